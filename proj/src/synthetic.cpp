#include "deid/synthetic.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <sstream>
#include <unordered_set>

#include "deid/error.hpp"
#include "deid/hash.hpp"
#include "deid/rng.hpp"
#include "utf8.hpp"

namespace deid {

namespace {

using Tokens = std::vector<std::string>;

// ---------------------------------------------------------------------------
// Word pools

const std::vector<std::string> kFirstNames{
    "Juan",    "José",   "Antonio",   "Manuel",   "Francisco", "David",    "Javier",
    "Carlos",  "Miguel", "Pedro",     "Luis",     "Jorge",     "Alberto",  "Fernando",
    "Pablo",   "Sergio", "Ramón",     "Enrique",  "Vicente",   "Andrés",   "María",
    "Carmen",  "Ana",    "Isabel",    "Dolores",  "Pilar",     "Teresa",   "Rosa",
    "Cristina", "Marta", "Lucía",     "Elena",    "Laura",     "Sara",     "Paula",
    "Raquel",  "Montserrat", "Mercedes", "Concepción", "Josefa", "Núria",   "Jordi",
    "Xavier",  "Albert", "Eulalia",   "Gregorio", "Ignacio",   "Emilio",
};

const std::vector<std::string> kSurnames{
    "García",   "Martínez", "López",    "Sánchez",  "González", "Pérez",    "Rodríguez",
    "Fernández", "Gómez",   "Martín",   "Jiménez",  "Ruiz",     "Hernández", "Díaz",
    "Moreno",   "Muñoz",    "Álvarez",  "Romero",   "Alonso",   "Gutiérrez", "Navarro",
    "Torres",   "Domínguez", "Vázquez", "Ramos",    "Gil",      "Serrano",  "Blanco",
    "Molina",   "Morales",  "Suárez",   "Ortega",   "Delgado",  "Castro",   "Ortiz",
    "Rubio",    "Marín",    "Sanz",     "Iglesias", "Medina",   "Garrido",  "Cortés",
    "Castillo", "Santos",   "Lozano",   "Guerrero", "Cano",     "Prieto",   "Méndez",
    "Cruz",     "Calvo",    "Gallego",  "Vidal",    "León",     "Márquez",  "Herrera",
    "Peña",     "Flores",   "Cabrera",  "Campos",   "Puig",     "Ferrer",   "Soler",
    "Vila",     "Roca",     "Font",     "Pujol",    "Casas",    "Riera",    "Serra",
};

const std::vector<Tokens> kCities{
    {"Barcelona"}, {"Badalona"}, {"Sabadell"}, {"Terrassa"}, {"Mataró"}, {"Girona"},
    {"Lleida"}, {"Tarragona"}, {"Reus"}, {"Manresa"}, {"Granollers"}, {"Vic"},
    {"Igualada"}, {"Figueres"}, {"Blanes"}, {"Rubí"}, {"Viladecans"}, {"Castelldefels"},
    {"Cornellà"}, {"Madrid"}, {"Valencia"}, {"Sevilla"}, {"Zaragoza"}, {"Málaga"},
    {"Murcia"}, {"Palma"}, {"Bilbao"}, {"Alicante"}, {"Córdoba"}, {"Valladolid"},
    {"Vigo"}, {"Granada"}, {"Huesca"}, {"Cuenca"}, {"Burgos"}, {"Andorra"},
    {"Francia"}, {"Marruecos"}, {"Rumanía"}, {"Ecuador"}, {"Colombia"},
    {"Santa", "Coloma", "de", "Gramenet"}, {"Sant", "Cugat", "del", "Vallès"},
    {"Sant", "Boi", "de", "Llobregat"}, {"Vilanova", "i", "la", "Geltrú"},
    {"Santa", "Perpètua", "de", "Mogoda"},
};

const std::vector<Tokens> kInstitutions{
    {"Hospital", "Clínic"}, {"Hospital", "del", "Mar"}, {"Hospital", "de", "Bellvitge"},
    {"Hospital", "de", "Sant", "Pau"}, {"Hospital", "Vall", "d", "'", "Hebron"},
    {"Hospital", "Germans", "Trias"}, {"Hospital", "Parc", "Taulí"},
    {"Clínica", "Corachán"}, {"Hospital", "Sagrat", "Cor"}, {"Clínica", "Teknon"},
};

const std::vector<Tokens> kProfessions{
    {"enfermera"}, {"enfermero"}, {"fisioterapeuta"}, {"albañil"}, {"conductor"},
    {"camionero"}, {"maestra"}, {"maestro"}, {"profesora"}, {"ingeniero"},
    {"abogada"}, {"abogado"}, {"camarero"}, {"camarera"}, {"cocinero"},
    {"agricultor"}, {"administrativo"}, {"administrativa"}, {"electricista"},
    {"fontanero"}, {"mecánico"}, {"carpintero"}, {"peluquera"}, {"dependienta"},
    {"contable"}, {"arquitecto"}, {"periodista"}, {"policía"}, {"bombero"},
    {"farmacéutica"}, {"jardinero"}, {"pintor"}, {"soldador"}, {"panadero"},
    {"taxista"}, {"informático"}, {"auxiliar", "de", "enfermería"},
    {"trabajadora", "social"}, {"empleada", "de", "hogar"}, {"guardia", "urbano"},
};

const std::vector<std::string> kMonths{"enero", "febrero", "marzo",      "abril",
                                       "mayo",  "junio",   "julio",      "agosto",
                                       "septiembre", "octubre", "noviembre", "diciembre"};

const std::vector<std::string> kMailDomains{"gmail", "hotmail", "yahoo", "telefonica", "salud",
                                            "correo"};
const std::vector<std::string> kTlds{"com", "es", "cat", "net", "org"};
const std::vector<std::string> kStreetKinds{"calle", "avenida", "paseo", "plaza", "carrer"};

// ---------------------------------------------------------------------------
// Clause templates. Tokens are space separated; `{TYPE}` is a PHI slot.

struct TemplateSet {
  std::map<std::string, std::vector<std::string>> phi;
  std::vector<std::string> filler;
};

const TemplateSet& shared_templates() {
  static const TemplateSet t{
      {
          {"DATE",
           {"ingresa el {DATE}", "fecha de ingreso : {DATE}", "alta hospitalaria el {DATE}",
            "control programado para el {DATE}", "intervenido el {DATE}",
            "inicio de los síntomas el {DATE}", "visitado en consulta el {DATE}",
            "última revisión {DATE}"}},
          {"AGE",
           {"paciente de {AGE}", "varón de {AGE}", "mujer de {AGE}", "edad : {AGE}",
            "hombre de {AGE} de edad", "con {AGE} cumplidos"}},
          {"LOCATION",
           {"trasladado desde {LOCATION}", "vive en {LOCATION}", "natural de {LOCATION}",
            "derivado desde {LOCATION}", "reside en {LOCATION}", "procedente de {LOCATION}",
            "seguimiento en {LOCATION}"}},
          {"NAME",
           {"paciente {NAME}", "atendido por el Dr. {NAME}", "firmado por {NAME}",
            "acompañado de su hija {NAME}", "médico responsable : {NAME}",
            "valorado por la Dra. {NAME}", "contacto familiar {NAME}"}},
          {"CONTACT",
           {"teléfono de contacto {CONTACT}", "correo electrónico {CONTACT}",
            "localizable en el {CONTACT}", "contactar al {CONTACT}"}},
          {"PROFESSION",
           {"trabaja como {PROFESSION}", "de profesión {PROFESSION}", "antiguo {PROFESSION}",
            "jubilado , fue {PROFESSION}", "trabajaba de {PROFESSION}"}},
          {"ID",
           {"NHC {ID}", "número de historia {ID}", "CIP : {ID}", "episodio {ID}",
            "número de afiliación {ID}"}},
      },
      {
          "presenta hemiparesia derecha",
          "refiere dolor de cabeza intenso",
          "sin alergias medicamentosas conocidas",
          "buena evolución clínica",
          "se realiza TAC craneal urgente",
          "TA 130 / 80 mmHg",
          "FC 72 lpm",
          "control en 3 meses",
          "tratamiento con AAS 100 mg",
          "escala NIHSS de 4 puntos",
          "pendiente de resonancia magnética",
          "escala de Barthel 85",
          "test de Boston normal",
          "Glasgow 15",
          "temperatura 36 , 5 grados",
          "peso 70 kg",
          "desde hace 2 años",
          "cada 8 horas",
          "ingresa en la unidad de ictus",
          "servicio de neurología",
          "habitación 214",
          "sin cambios respecto al control previo",
          "no refiere fiebre",
          "marcha autónoma con bastón",
          "afasia leve de predominio motor",
          "se solicita analítica completa",
          "glucemia 110 mg / dl",
          "rehabilitación 5 días por semana",
          "vida independiente para las actividades básicas",
      },
  };
  return t;
}

// Only drawn for the target language.
const TemplateSet& target_only_templates() {
  static const TemplateSet t{
      {
          {"DATE",
           {"pasa a planta el {DATE}", "última dosis administrada el {DATE}",
            "programada sesión de logopedia el {DATE}"}},
          {"AGE", {"diagnosticado a los {AGE}", "ictus previo a los {AGE}"}},
          {"LOCATION",
           {"ingresa en el centro de rehabilitación de {LOCATION}",
            "domicilio habitual en {LOCATION}", "centro de referencia {LOCATION}"}},
          {"NAME",
           {"logopeda {NAME}", "terapeuta ocupacional {NAME}", "su esposa {NAME} informa"}},
          {"CONTACT", {"número de la familia {CONTACT}", "avisar a la residencia al {CONTACT}"}},
          {"PROFESSION",
           {"antes del ictus trabajaba como {PROFESSION}", "su hijo es {PROFESSION}"}},
          {"ID", {"código de traslado {ID}", "número de registro de ictus {ID}"}},
      },
      {
          "hemiplejía izquierda residual",
          "disfagia para líquidos",
          "escala Rankin modificada 3",
          "inicia bipedestación asistida",
          "espasticidad en extremidad superior",
          "toxina botulínica 200 unidades",
          "heminegligencia visual",
      },
  };
  return t;
}

Tokens split_template(std::string_view t) {
  Tokens out;
  std::istringstream in{std::string(t)};
  std::string w;
  while (in >> w) {
    if (w.front() == '{') {
      out.push_back(w);
    } else {
      for (auto& piece : tokenize_words(w)) out.push_back(std::move(piece.text));
    }
  }
  return out;
}

std::string two_digits(std::uint64_t v) {
  return (v < 10 ? "0" : "") + std::to_string(v);
}

std::string digits(Rng& rng, std::size_t n, bool nonzero_first = true) {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t d = (i == 0 && nonzero_first) ? 1 + rng.index(9) : rng.index(10);
    s += static_cast<char>('0' + d);
  }
  return s;
}

template <typename T>
const T& pick(Rng& rng, const std::vector<T>& items) {
  return items[rng.index(items.size())];
}

std::string lower_ascii(std::string s) {
  for (auto& c : s) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return s;
}

std::string strip_accents_lower(const std::string& s) {
  // Only the accented characters used by the name pools.
  std::string out;
  for (const auto& ch : utf8::characters(s)) {
    if (ch == "á" || ch == "Á") out += 'a';
    else if (ch == "é" || ch == "É") out += 'e';
    else if (ch == "í" || ch == "Í") out += 'i';
    else if (ch == "ó" || ch == "Ó") out += 'o';
    else if (ch == "ú" || ch == "Ú") out += 'u';
    else if (ch == "ñ") out += 'n';
    else out += lower_ascii(ch);
  }
  return out;
}

Tokens make_entity(const std::string& type, Rng& rng) {
  if (type == "DATE") {
    const std::uint64_t day = 1 + rng.index(28);
    const std::uint64_t month = 1 + rng.index(12);
    const std::string year = std::to_string(1995 + rng.index(30));
    switch (rng.index(5)) {
      case 0:
        return {two_digits(day), "/", two_digits(month), "/", year};
      case 1:
        return {two_digits(day), ".", two_digits(month), ".", year.substr(2)};
      case 2:
        return {two_digits(day), "-", two_digits(month), "-", year};
      case 3:
        return {std::to_string(day), "de", kMonths[month - 1], "de", year};
      default:
        return {kMonths[month - 1], "de", year};
    }
  }
  if (type == "AGE") {
    return {std::to_string(18 + rng.index(82)), "años"};
  }
  if (type == "LOCATION") {
    switch (rng.index(4)) {
      case 0:
      case 1:
        return pick(rng, kCities);
      case 2:
        return pick(rng, kInstitutions);
      default: {
        Tokens t{pick(rng, kStreetKinds), pick(rng, kSurnames), std::to_string(1 + rng.index(200))};
        return t;
      }
    }
  }
  if (type == "NAME") {
    Tokens t{pick(rng, kFirstNames), pick(rng, kSurnames)};
    if (rng.bernoulli(0.5)) t.push_back(pick(rng, kSurnames));
    return t;
  }
  if (type == "CONTACT") {
    if (rng.bernoulli(0.6)) {
      if (rng.bernoulli(0.5)) return {"9" + digits(rng, 1), digits(rng, 3), digits(rng, 2, false), digits(rng, 2, false)};
      return {"6" + digits(rng, 2, false), digits(rng, 3, false), digits(rng, 3, false)};
    }
    return {strip_accents_lower(pick(rng, kFirstNames)), ".", strip_accents_lower(pick(rng, kSurnames)),
            "@", pick(rng, kMailDomains), ".", pick(rng, kTlds)};
  }
  if (type == "PROFESSION") {
    return pick(rng, kProfessions);
  }
  if (type == "ID") {
    switch (rng.index(3)) {
      case 0:
        return {digits(rng, 6 + rng.index(3))};
      case 1: {
        std::string code;
        for (int i = 0; i < 4; ++i) code += static_cast<char>('A' + rng.index(26));
        return {code + digits(rng, 10, false)};
      }
      default:
        return {two_digits(1 + rng.index(52)), "/", digits(rng, 8), "/", two_digits(rng.index(100))};
    }
  }
  throw ConfigError("no synthetic generator for PHI type '" + type + "'");
}

// Catalan-flavoured spelling rules. Applied in order to every occurrence.
const std::vector<std::pair<std::string, std::string>> kShiftRules{
    {"ción", "ció"}, {"sión", "sió"}, {"dad", "tat"}, {"ñ", "ny"}, {"ue", "o"},
    {"ie", "e"},     {"ch", "tx"},    {"j", "g"},     {"y", "i"},  {"ll", "l·l"},
    {"z", "ç"},      {"ó", "ò"},      {"é", "è"},
};

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
  return s;
}

std::string apply_rules(const std::string& word) {
  std::string w = word;
  for (const auto& [from, to] : kShiftRules) w = replace_all(w, from, to);
  // Final vowel drop, as in paciente -> pacient, médico -> mèdic.
  if (w.size() > 4 && (w.back() == 'e' || w.back() == 'o')) w.pop_back();
  return w;
}

double hash_unit(std::string_view word) {
  const std::uint64_t h = mix_seed(Fnv1a{}.update("shift:").update(word).value());
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

}  // namespace

bool is_alphabetic_word(std::string_view token) {
  if (token.empty()) return false;
  for (const auto& ch : utf8::characters(token)) {
    const auto c = static_cast<unsigned char>(ch[0]);
    if (ch.size() == 1) {
      if (!std::isalpha(c)) return false;
    } else if (ch == "·") {
      continue;
    } else if (c < 0xC3 || c > 0xC5) {
      return false;  // only Latin-1 supplement / Latin Extended-A letters
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// LexicalShift

const std::vector<std::string>& LexicalShift::source_lexicon() {
  static const std::vector<std::string> lexicon = [] {
    std::set<std::string> words;
    auto add_tokens = [&](const Tokens& tokens) {
      for (const auto& t : tokens) {
        if (is_alphabetic_word(t)) words.insert(t);
      }
    };
    auto add_set = [&](const TemplateSet& set) {
      for (const auto& [_, list] : set.phi) {
        for (const auto& tmpl : list) add_tokens(split_template(tmpl));
      }
      for (const auto& tmpl : set.filler) add_tokens(split_template(tmpl));
    };
    add_set(shared_templates());
    add_set(target_only_templates());
    add_tokens(kFirstNames);
    add_tokens(kSurnames);
    for (const auto& c : kCities) add_tokens(c);
    for (const auto& c : kInstitutions) add_tokens(c);
    for (const auto& p : kProfessions) add_tokens(p);
    add_tokens(kMonths);
    add_tokens(kMailDomains);
    add_tokens(kTlds);
    add_tokens(kStreetKinds);
    add_tokens({"años", "y"});
    for (const auto& n : kFirstNames) add_tokens({strip_accents_lower(n)});
    for (const auto& n : kSurnames) add_tokens({strip_accents_lower(n)});
    words.erase("");
    return std::vector<std::string>(words.begin(), words.end());
  }();
  return lexicon;
}

LexicalShift::LexicalShift(double overlap) {
  const auto& lexicon = source_lexicon();
  std::set<std::string, std::less<>> taken(lexicon.begin(), lexicon.end());
  const auto& abbreviations = default_abbreviations();
  for (const auto& word : lexicon) {
    if (hash_unit(word) >= 1.0 - overlap) continue;
    // Titles such as "Dra." stay put so the sentence splitter still knows them.
    std::string lower = word;
    for (auto& ch : lower) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (std::binary_search(abbreviations.begin(), abbreviations.end(), lower)) continue;
    std::string shifted = apply_rules(word);
    static const char* kSuffixes[] = {"a", "es", "et", "at", "ix", "ul"};
    for (std::size_t k = 0; shifted == word || taken.count(shifted); ++k) {
      shifted = apply_rules(word) + kSuffixes[k % 6] + (k >= 6 ? std::to_string(k) : "");
    }
    taken.insert(shifted);
    table_.emplace(word, std::move(shifted));
  }
}

std::string LexicalShift::apply(std::string_view word) const {
  auto it = table_.find(word);
  return it == table_.end() ? std::string(word) : it->second;
}

bool LexicalShift::is_shifted(std::string_view word) const { return table_.count(word) != 0; }

// ---------------------------------------------------------------------------
// Config

void SyntheticConfig::validate(const LabelSet& label_set) const {
  if (!(overlap >= 0.0 && overlap <= 1.0)) {
    throw ConfigError("overlap must lie in [0, 1], got " + std::to_string(overlap));
  }
  if (!(target_novel_rate >= 0.0 && target_novel_rate <= 1.0)) {
    throw ConfigError("target_novel_rate must lie in [0, 1]");
  }
  if (source_sentences == 0 || target_train_sentences == 0 || target_dev_sentences == 0) {
    throw ConfigError("corpus sizes must be positive");
  }
  for (const auto& [type, d] : densities) {
    if (!label_set.type_index(type)) throw ConfigError("density for unknown PHI type " + type);
    if (!(d >= 0.0 && d <= 1.0)) throw ConfigError("density of " + type + " must lie in [0, 1]");
  }
}

SyntheticConfig SyntheticConfig::from_kv(const KvConfig& kv) {
  SyntheticConfig c;
  auto size = [&](const char* key, std::size_t fallback) {
    const auto v = kv.get_int(key, static_cast<std::int64_t>(fallback));
    if (v < 0) throw ConfigError(std::string(key) + " must be non-negative");
    return static_cast<std::size_t>(v);
  };
  c.source_sentences = size("source_sentences", c.source_sentences);
  c.target_train_sentences = size("target_train_sentences", c.target_train_sentences);
  c.target_dev_sentences = size("target_dev_sentences", c.target_dev_sentences);
  c.raw_target_sentences = size("raw_target_sentences", c.raw_target_sentences);
  c.overlap = kv.get_double("overlap", c.overlap);
  c.target_novel_rate = kv.get_double("target_novel_rate", c.target_novel_rate);
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<std::int64_t>(c.seed)));
  for (const auto& [key, value] : kv.values()) {
    if (key.rfind("density.", 0) == 0) c.densities[key.substr(8)] = kv.get_double(key, 0.0);
  }
  for (const auto& [key, _] : kv.values()) {
    static const std::set<std::string> known{"source_sentences", "target_train_sentences",
                                             "target_dev_sentences", "raw_target_sentences",
                                             "overlap", "target_novel_rate", "seed"};
    if (!known.count(key) && key.rfind("density.", 0) != 0) {
      throw ConfigError("unknown synthetic config key '" + key + "'");
    }
  }
  return c;
}

std::string SyntheticConfig::to_kv() const {
  std::ostringstream out;
  out << "source_sentences = " << source_sentences << '\n'
      << "target_train_sentences = " << target_train_sentences << '\n'
      << "target_dev_sentences = " << target_dev_sentences << '\n'
      << "raw_target_sentences = " << raw_target_sentences << '\n'
      << "overlap = " << overlap << '\n'
      << "target_novel_rate = " << target_novel_rate << '\n'
      << "seed = " << seed << '\n';
  for (const auto& [type, d] : densities) out << "density." << type << " = " << d << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Generation

namespace {

struct Generator {
  const SyntheticConfig& config;
  const LabelSet& labels;
  const LexicalShift& shift;
  std::unordered_set<std::string>& used;

  Sentence make_sentence(const std::vector<std::size_t>& types, bool target, Rng& rng) const {
    const auto& shared = shared_templates();
    const auto& novel = target_only_templates();
    struct Clause {
      Tokens tokens;
      std::vector<LabelId> tags;
    };
    std::vector<Clause> clauses;
    auto use_novel = [&] { return target && rng.bernoulli(config.target_novel_rate); };
    for (std::size_t t : types) {
      const std::string& type = labels.phi_types()[t];
      const auto& pool = use_novel() ? novel.phi.at(type) : shared.phi.at(type);
      Clause c;
      for (const auto& tok : split_template(pick(rng, pool))) {
        if (tok.front() == '{') {
          const Tokens entity = make_entity(type, rng);
          for (std::size_t k = 0; k < entity.size(); ++k) {
            c.tokens.push_back(entity[k]);
            c.tags.push_back(k == 0 ? labels.begin_id(t) : labels.inside_id(t));
          }
        } else {
          c.tokens.push_back(tok);
          c.tags.push_back(kOutside);
        }
      }
      clauses.push_back(std::move(c));
    }
    std::size_t fillers = types.empty() ? 1 + rng.index(2) : rng.index(2);
    for (std::size_t f = 0; f < fillers; ++f) {
      const auto& pool = use_novel() ? novel.filler : shared.filler;
      Clause c;
      c.tokens = split_template(pick(rng, pool));
      c.tags.assign(c.tokens.size(), kOutside);
      clauses.push_back(std::move(c));
    }
    rng.shuffle(clauses);

    Sentence s;
    for (std::size_t i = 0; i < clauses.size(); ++i) {
      if (i > 0) s.tokens.push_back({i + 1 == clauses.size() && rng.bernoulli(0.4) ? "y" : ",", kOutside});
      for (std::size_t k = 0; k < clauses[i].tokens.size(); ++k) {
        s.tokens.push_back({clauses[i].tokens[k], clauses[i].tags[k]});
      }
    }
    s.tokens.push_back({".", kOutside});
    if (target) {
      for (auto& tok : s.tokens) tok.text = shift.apply(tok.text);
    }
    return s;
  }

  static std::string key(const Sentence& s) {
    std::string k;
    for (const auto& t : s.tokens) k += t.text + ' ';
    return k;
  }

  // Exactly round(density * n) sentences carry each PHI type.
  std::vector<std::vector<std::size_t>> assign_types(std::size_t n, Rng& rng) const {
    std::vector<std::vector<std::size_t>> per_sentence(n);
    std::vector<std::size_t> order(n);
    for (std::size_t t = 0; t < labels.num_types(); ++t) {
      auto it = config.densities.find(labels.phi_types()[t]);
      const double d = it == config.densities.end() ? 0.0 : it->second;
      const auto count = static_cast<std::size_t>(std::llround(d * static_cast<double>(n)));
      for (std::size_t i = 0; i < n; ++i) order[i] = i;
      rng.shuffle(order);
      for (std::size_t i = 0; i < count; ++i) per_sentence[order[i]].push_back(t);
    }
    return per_sentence;
  }

  Corpus make_corpus(std::size_t n, bool target, std::uint64_t seed, std::string name) const {
    Rng rng(seed);
    Corpus corpus{{}, labels, std::move(name)};
    const auto types = assign_types(n, rng);
    for (std::size_t i = 0; i < n; ++i) {
      Sentence s;
      for (int attempt = 0;; ++attempt) {
        if (attempt > 1000) throw Error("generation_error", "cannot produce unique sentences");
        s = make_sentence(types[i], target, rng);
        if (used.insert(key(s)).second) break;
      }
      s.doc_id = corpus.name;
      s.sent_index = static_cast<std::int64_t>(i);
      corpus.sentences.push_back(std::move(s));
    }
    return corpus;
  }
};

}  // namespace

SyntheticBenchmark generate_synthetic_bilingual(const SyntheticConfig& config, std::uint64_t seed) {
  const LabelSet labels;
  config.validate(labels);
  const LexicalShift shift(config.overlap);
  std::unordered_set<std::string> used;
  Generator gen{config, labels, shift, used};

  SyntheticBenchmark out;
  out.source = gen.make_corpus(config.source_sentences, false, derive_seed(seed, 1), "source");
  out.target = gen.make_corpus(config.target_train_sentences, true, derive_seed(seed, 2), "target");
  out.target_dev =
      gen.make_corpus(config.target_dev_sentences, true, derive_seed(seed, 3), "target_dev");
  const Corpus raw =
      gen.make_corpus(config.raw_target_sentences, true, derive_seed(seed, 4), "raw_target");
  for (const auto& s : raw.sentences) out.raw_target_text.push_back(detokenize(s.words()));
  return out;
}

std::string detokenize(const std::vector<std::string>& tokens) {
  auto binds_left = [](const std::string& t) {
    return t == "." || t == "," || t == ":" || t == ";" || t == ")" || t == "/" || t == "@" ||
           t == "-" || t == "'";
  };
  auto binds_right = [](const std::string& t) {
    return t == "(" || t == "/" || t == "@" || t == "-" || t == "'";
  };
  auto lower_or_digit = [](const std::string& t) {
    const auto c = static_cast<unsigned char>(t[0]);
    return std::isdigit(c) || std::islower(c);
  };
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto& t = tokens[i];
    if (i > 0) {
      const auto& prev = tokens[i - 1];
      // Inner periods of dates and e-mail addresses bind both neighbours.
      const bool inner_period =
          prev == "." && i >= 2 && lower_or_digit(tokens[i - 2]) && lower_or_digit(t);
      if (!binds_left(t) && !binds_right(prev) && !inner_period) out += ' ';
    }
    out += t;
  }
  return out;
}

std::vector<SyntheticNote> generate_synthetic_notes(const SyntheticConfig& config,
                                                    std::uint64_t seed, std::size_t count) {
  const LabelSet labels;
  config.validate(labels);
  const LexicalShift shift(config.overlap);
  std::unordered_set<std::string> used;
  Generator gen{config, labels, shift, used};
  Rng rng(derive_seed(seed, 5));
  std::vector<SyntheticNote> notes;
  for (std::size_t n = 0; n < count; ++n) {
    char id[32];
    std::snprintf(id, sizeof id, "note_%04zu", n);
    const std::size_t sentences = 3 + rng.index(6);
    Corpus gold = gen.make_corpus(sentences, true, derive_seed(seed, 6, n), id);
    std::string text;
    for (std::size_t i = 0; i < gold.size(); ++i) {
      if (i > 0) text += rng.bernoulli(0.3) ? "\n" : " ";
      text += detokenize(gold.sentences[i].words());
    }
    text += '\n';
    notes.push_back({id, std::move(text), std::move(gold)});
  }
  return notes;
}

}  // namespace deid
