#include "deid/annotation.hpp"

#include <sqlite3.h>

#include <algorithm>
#include <ctime>
#include <map>
#include <mutex>
#include <set>

#include "deid/hash.hpp"
#include "deid/metrics.hpp"

namespace deid {

using nlohmann::json;

json ServiceError::to_json() const {
  json e{{"kind", kind()}, {"message", what()}};
  if (!field_.empty()) e["field"] = field_;
  return {{"schema", kAnnotationSchema}, {"error", e}};
}

namespace {

ServiceError bad_request(const std::string& field, const std::string& message) {
  return ServiceError(400, "invalid_request", field + ": " + message, field);
}

ServiceError not_found(const std::string& what) { return ServiceError(404, "not_found", what); }

template <typename T>
T required(const json& j, const std::string& field) {
  if (!j.is_object() || !j.contains(field) || j[field].is_null()) {
    throw bad_request(field, "missing");
  }
  try {
    return j[field].get<T>();
  } catch (const json::exception&) {
    throw bad_request(field, "wrong type");
  }
}

template <typename T>
std::optional<T> optional_field(const json& j, const std::string& field) {
  if (!j.is_object() || !j.contains(field) || j[field].is_null()) return std::nullopt;
  try {
    return j[field].get<T>();
  } catch (const json::exception&) {
    throw bad_request(field, "wrong type");
  }
}

std::vector<Participant> participants(const json& j, const std::string& field) {
  std::vector<Participant> out;
  if (!j.contains(field)) return out;
  if (!j[field].is_array()) throw ConfigError("project config: " + field + " must be an array");
  for (const auto& p : j[field]) {
    if (!p.is_object() || !p.contains("id") || !p.contains("token") || !p["id"].is_string() ||
        !p["token"].is_string()) {
      throw ConfigError("project config: each of " + field + " needs string id and token");
    }
    out.push_back({p["id"].get<std::string>(), p["token"].get<std::string>()});
  }
  return out;
}

std::string now_utc() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

void ProjectConfig::validate() const {
  if (id.empty()) throw ConfigError("project config: id is empty");
  if (annotators.empty() || annotators.size() > 2) {
    throw ConfigError("project config: needs one or two annotators");
  }
  std::set<std::string> ids, tokens;
  for (const auto* group : {&annotators, &adjudicators}) {
    for (const auto& p : *group) {
      if (p.id.empty() || p.token.empty()) throw ConfigError("project config: empty id or token");
      if (!ids.insert(p.id).second) throw ConfigError("project config: duplicate id '" + p.id + "'");
      if (!tokens.insert(p.token).second) {
        throw ConfigError("project config: participants must have distinct tokens");
      }
    }
  }
}

ProjectConfig ProjectConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("project config must be a JSON object");
  ProjectConfig c;
  try {
    c.id = j.value("id", std::string{});
    c.title = j.value("title", std::string{});
    c.guidelines = j.value("guidelines", std::string{});
    c.pre_annotation = j.value("pre_annotation", false);
    if (j.contains("dual_overlap") && !j["dual_overlap"].is_null()) {
      c.dual_overlap = j["dual_overlap"].get<std::size_t>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("project config: ") + e.what());
  }
  for (const auto& [key, value] : j.items()) {
    static const std::set<std::string> known{"id",          "title",        "guidelines",
                                             "annotators",  "adjudicators", "dual_overlap",
                                             "pre_annotation"};
    if (!known.count(key)) throw ConfigError("project config: unknown key '" + key + "'");
  }
  c.annotators = participants(j, "annotators");
  c.adjudicators = participants(j, "adjudicators");
  c.validate();
  return c;
}

json ProjectConfig::to_json() const {
  auto list = [](const std::vector<Participant>& ps) {
    json a = json::array();
    for (const auto& p : ps) a.push_back({{"id", p.id}, {"token", p.token}});
    return a;
  };
  json j{{"id", id},
         {"title", title},
         {"guidelines", guidelines},
         {"annotators", list(annotators)},
         {"adjudicators", list(adjudicators)},
         {"pre_annotation", pre_annotation}};
  j["dual_overlap"] = dual_overlap ? json(*dual_overlap) : json(nullptr);
  return j;
}

SubmitRequest SubmitRequest::from_json(const json& j) {
  if (!j.is_object()) throw bad_request("body", "expected a JSON object");
  SubmitRequest r;
  r.project = required<std::string>(j, "project");
  r.sentence_id = required<std::int64_t>(j, "sentence_id");
  r.annotator = required<std::string>(j, "annotator");
  r.skipped = optional_field<bool>(j, "skipped").value_or(false);
  r.skip_reason = optional_field<std::string>(j, "skip_reason").value_or("");
  r.base_revision = required<int>(j, "base_revision");
  r.confidence = optional_field<int>(j, "confidence");
  r.labels = optional_field<std::vector<std::string>>(j, "labels").value_or(std::vector<std::string>{});
  return r;
}

std::string to_string(DisagreementCategory category) {
  switch (category) {
    case DisagreementCategory::CriteriaDiscrepancy: return "criteria-discrepancy";
    case DisagreementCategory::EntityAmbiguity: return "entity-ambiguity";
    case DisagreementCategory::AnnotationError: return "annotation-error";
  }
  return "?";
}

std::optional<DisagreementCategory> parse_disagreement_category(std::string_view name) {
  for (auto c : {DisagreementCategory::CriteriaDiscrepancy, DisagreementCategory::EntityAmbiguity,
                 DisagreementCategory::AnnotationError}) {
    if (to_string(c) == name) return c;
  }
  return std::nullopt;
}

AdjudicateRequest AdjudicateRequest::from_json(const json& j) {
  if (!j.is_object()) throw bad_request("body", "expected a JSON object");
  AdjudicateRequest r;
  r.project = required<std::string>(j, "project");
  r.sentence_id = required<std::int64_t>(j, "sentence_id");
  r.adjudicator = required<std::string>(j, "adjudicator");
  r.unresolvable = optional_field<bool>(j, "unresolvable").value_or(false);
  r.labels = optional_field<std::vector<std::string>>(j, "labels");
  const auto category = required<std::string>(j, "category");
  r.category = parse_disagreement_category(category);
  if (!r.category) {
    throw bad_request("category", "'" + category +
                                      "' is not criteria-discrepancy, entity-ambiguity or annotation-error");
  }
  if (r.unresolvable && r.labels) throw bad_request("labels", "must be absent when unresolvable");
  if (!r.unresolvable && !r.labels) throw bad_request("labels", "missing");
  return r;
}

std::string to_string(SentenceState state) {
  switch (state) {
    case SentenceState::Pending: return "pending";
    case SentenceState::Single: return "single";
    case SentenceState::Skipped: return "skipped";
    case SentenceState::Agreed: return "agreed";
    case SentenceState::Disagreed: return "disagreed";
    case SentenceState::Resolved: return "resolved";
    case SentenceState::Unresolvable: return "unresolvable";
  }
  return "?";
}

ExportTarget parse_export_target(std::string_view name) {
  if (name == "dev") return ExportTarget::Dev;
  if (name == "fewshot") return ExportTarget::FewShot;
  if (name == "annotations") return ExportTarget::Annotations;
  throw bad_request("target", "'" + std::string(name) + "' is not dev, fewshot or annotations");
}

// ---------------------------------------------------------------------------
// SQLite plumbing

namespace {

class Statement {
 public:
  Statement(sqlite3* db, const char* sql) : db_(db) {
    if (sqlite3_prepare_v2(db, sql, -1, &stmt_, nullptr) != SQLITE_OK) {
      throw IoError(std::string("sqlite prepare: ") + sqlite3_errmsg(db));
    }
  }
  ~Statement() { sqlite3_finalize(stmt_); }
  Statement(const Statement&) = delete;
  Statement& operator=(const Statement&) = delete;

  Statement& bind(int i, const std::string& v) {
    check(sqlite3_bind_text(stmt_, i, v.data(), static_cast<int>(v.size()), SQLITE_TRANSIENT));
    return *this;
  }
  Statement& bind(int i, std::int64_t v) {
    check(sqlite3_bind_int64(stmt_, i, v));
    return *this;
  }
  Statement& bind_null(int i) {
    check(sqlite3_bind_null(stmt_, i));
    return *this;
  }

  // True while a row is available.
  bool step() {
    const int rc = sqlite3_step(stmt_);
    if (rc == SQLITE_ROW) return true;
    if (rc == SQLITE_DONE) return false;
    throw IoError(std::string("sqlite: ") + sqlite3_errmsg(db_));
  }

  std::int64_t integer(int col) const { return sqlite3_column_int64(stmt_, col); }
  bool is_null(int col) const { return sqlite3_column_type(stmt_, col) == SQLITE_NULL; }
  std::string text(int col) const {
    const auto* p = sqlite3_column_text(stmt_, col);
    return p == nullptr ? std::string{} : std::string(reinterpret_cast<const char*>(p),
                                                      static_cast<std::size_t>(sqlite3_column_bytes(stmt_, col)));
  }

 private:
  void check(int rc) {
    if (rc != SQLITE_OK) throw IoError(std::string("sqlite bind: ") + sqlite3_errmsg(db_));
  }
  sqlite3* db_;
  sqlite3_stmt* stmt_ = nullptr;
};

constexpr const char* kSchema = R"sql(
CREATE TABLE IF NOT EXISTS projects (
  id TEXT PRIMARY KEY,
  config TEXT NOT NULL,
  pool_hash TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS sentences (
  project TEXT NOT NULL,
  id INTEGER NOT NULL,
  doc_id TEXT,
  sent_index INTEGER,
  tokens TEXT NOT NULL,
  PRIMARY KEY (project, id)
);
CREATE TABLE IF NOT EXISTS assignments (
  project TEXT NOT NULL,
  sentence INTEGER NOT NULL,
  annotator TEXT NOT NULL,
  PRIMARY KEY (project, sentence, annotator)
);
CREATE TABLE IF NOT EXISTS annotations (
  seq INTEGER PRIMARY KEY AUTOINCREMENT,
  project TEXT NOT NULL,
  sentence INTEGER NOT NULL,
  annotator TEXT NOT NULL,
  revision INTEGER NOT NULL,
  record TEXT NOT NULL,
  created_at TEXT NOT NULL,
  UNIQUE (project, sentence, annotator, revision)
);
CREATE TABLE IF NOT EXISTS adjudications (
  seq INTEGER PRIMARY KEY AUTOINCREMENT,
  project TEXT NOT NULL,
  sentence INTEGER NOT NULL,
  record TEXT NOT NULL,
  created_at TEXT NOT NULL
);
CREATE TRIGGER IF NOT EXISTS annotations_no_update BEFORE UPDATE ON annotations
  BEGIN SELECT RAISE(ABORT, 'annotations are append-only'); END;
CREATE TRIGGER IF NOT EXISTS annotations_no_delete BEFORE DELETE ON annotations
  BEGIN SELECT RAISE(ABORT, 'annotations are append-only'); END;
CREATE TRIGGER IF NOT EXISTS adjudications_no_update BEFORE UPDATE ON adjudications
  BEGIN SELECT RAISE(ABORT, 'adjudications are append-only'); END;
CREATE TRIGGER IF NOT EXISTS adjudications_no_delete BEFORE DELETE ON adjudications
  BEGIN SELECT RAISE(ABORT, 'adjudications are append-only'); END;
)sql";

struct Record {
  int revision = 0;
  std::vector<LabelId> labels;
  std::optional<int> confidence;
  bool skipped = false;
  std::string skip_reason;
  std::string created_at;
};

struct Adjudication {
  std::optional<std::vector<LabelId>> labels;
  std::string category;
  std::string adjudicator;
  std::string created_at;
};

// Everything about one project, read in a single transaction.
struct Snapshot {
  ProjectConfig config;
  std::vector<Sentence> sentences;
  std::vector<std::vector<std::string>> assigned;  // per sentence, annotator ids in config order
  std::map<std::pair<std::int64_t, std::string>, Record> latest;
  std::map<std::int64_t, Adjudication> adjudication;

  const Record* record(std::int64_t sentence, const std::string& annotator) const {
    auto it = latest.find({sentence, annotator});
    return it == latest.end() ? nullptr : &it->second;
  }
};

SentenceState state_of(const Snapshot& s, std::int64_t id) {
  const auto& who = s.assigned[static_cast<std::size_t>(id)];
  std::vector<const Record*> recs;
  for (const auto& a : who) {
    const Record* r = s.record(id, a);
    if (r == nullptr) return SentenceState::Pending;
    recs.push_back(r);
  }
  for (const auto* r : recs) {
    if (r->skipped) return SentenceState::Skipped;
  }
  if (recs.size() == 1) return SentenceState::Single;
  if (recs[0]->labels == recs[1]->labels) return SentenceState::Agreed;
  auto adj = s.adjudication.find(id);
  if (adj == s.adjudication.end()) return SentenceState::Disagreed;
  return adj->second.labels ? SentenceState::Resolved : SentenceState::Unresolvable;
}

json labels_json(const std::vector<LabelId>& labels, const LabelSet& ls) {
  json a = json::array();
  for (LabelId l : labels) a.push_back(ls.name(l));
  return a;
}

std::vector<std::string> words_of(const Sentence& s) { return s.words(); }

}  // namespace

struct AnnotationService::Impl {
  sqlite3* db = nullptr;
  mutable std::mutex mutex;
  LabelSet label_set;
  Suggester suggester;

  void exec(const char* sql) const {
    char* err = nullptr;
    if (sqlite3_exec(db, sql, nullptr, nullptr, &err) != SQLITE_OK) {
      std::string msg = err != nullptr ? err : "unknown";
      sqlite3_free(err);
      throw IoError("sqlite: " + msg);
    }
  }

  // BEGIN ... COMMIT, rolled back when an exception escapes.
  class Transaction {
   public:
    Transaction(const Impl& impl, bool write) : impl_(impl) {
      impl_.exec(write ? "BEGIN IMMEDIATE" : "BEGIN");
    }
    ~Transaction() {
      if (!done_) sqlite3_exec(impl_.db, "ROLLBACK", nullptr, nullptr, nullptr);
    }
    void commit() {
      impl_.exec("COMMIT");
      done_ = true;
    }

   private:
    const Impl& impl_;
    bool done_ = false;
  };

  std::optional<ProjectConfig> find_config(const std::string& project) const {
    Statement q(db, "SELECT config FROM projects WHERE id = ?");
    q.bind(1, project);
    if (!q.step()) return std::nullopt;
    return ProjectConfig::from_json(json::parse(q.text(0)));
  }

  Snapshot load(const std::string& project) const {
    Snapshot s;
    auto config = find_config(project);
    if (!config) throw not_found("project '" + project + "'");
    s.config = *config;
    {
      Statement q(db, "SELECT id, doc_id, sent_index, tokens FROM sentences WHERE project = ? ORDER BY id");
      q.bind(1, project);
      while (q.step()) {
        Sentence sent;
        if (!q.is_null(1)) sent.doc_id = q.text(1);
        if (!q.is_null(2)) sent.sent_index = q.integer(2);
        for (const auto& w : json::parse(q.text(3))) sent.tokens.push_back({w.get<std::string>(), kOutside});
        s.sentences.push_back(std::move(sent));
      }
    }
    s.assigned.resize(s.sentences.size());
    {
      Statement q(db, "SELECT sentence, annotator FROM assignments WHERE project = ?");
      q.bind(1, project);
      while (q.step()) s.assigned[static_cast<std::size_t>(q.integer(0))].push_back(q.text(1));
      for (auto& who : s.assigned) {
        std::sort(who.begin(), who.end(), [&](const std::string& a, const std::string& b) {
          auto pos = [&](const std::string& id) {
            for (std::size_t i = 0; i < s.config.annotators.size(); ++i) {
              if (s.config.annotators[i].id == id) return i;
            }
            return s.config.annotators.size();
          };
          return pos(a) < pos(b);
        });
      }
    }
    {
      Statement q(db,
                  "SELECT sentence, annotator, revision, record, created_at FROM annotations "
                  "WHERE project = ? ORDER BY seq");
      q.bind(1, project);
      while (q.step()) {
        const json r = json::parse(q.text(3));
        Record rec;
        rec.revision = static_cast<int>(q.integer(2));
        for (const auto& l : r.at("labels")) rec.labels.push_back(label_set.id(l.get<std::string>()));
        if (!r.at("confidence").is_null()) rec.confidence = r["confidence"].get<int>();
        rec.skipped = r.at("skipped").get<bool>();
        rec.skip_reason = r.value("skip_reason", "");
        rec.created_at = q.text(4);
        auto key = std::make_pair(q.integer(0), q.text(1));
        auto it = s.latest.find(key);
        if (it == s.latest.end() || it->second.revision < rec.revision) s.latest[key] = std::move(rec);
      }
    }
    {
      Statement q(db, "SELECT sentence, record, created_at FROM adjudications WHERE project = ? ORDER BY seq");
      q.bind(1, project);
      while (q.step()) {
        const json r = json::parse(q.text(1));
        Adjudication a;
        if (!r.at("labels").is_null()) {
          a.labels.emplace();
          for (const auto& l : r["labels"]) a.labels->push_back(label_set.id(l.get<std::string>()));
        }
        a.category = r.at("category").get<std::string>();
        a.adjudicator = r.at("adjudicator").get<std::string>();
        a.created_at = q.text(2);
        s.adjudication[q.integer(0)] = std::move(a);  // latest wins
      }
    }
    return s;
  }

  Snapshot read_snapshot(const std::string& project) const {
    Transaction tx(*this, false);
    Snapshot s = load(project);
    tx.commit();
    return s;
  }

  std::vector<LabelId> parse_labels(const std::vector<std::string>& names, std::size_t expected) const {
    if (names.size() != expected) {
      throw bad_request("labels", "got " + std::to_string(names.size()) + " labels for " +
                                      std::to_string(expected) + " tokens");
    }
    std::vector<LabelId> out;
    for (std::size_t i = 0; i < names.size(); ++i) {
      auto id = label_set.find(names[i]);
      if (!id) throw bad_request("labels", "unknown label '" + names[i] + "' at token " + std::to_string(i));
      out.push_back(*id);
    }
    return repair_bio(std::move(out));
  }

  static const Sentence& sentence_at(const Snapshot& s, std::int64_t id) {
    if (id < 0 || static_cast<std::size_t>(id) >= s.sentences.size()) {
      throw not_found("sentence " + std::to_string(id));
    }
    return s.sentences[static_cast<std::size_t>(id)];
  }

  static void require_annotator(const Snapshot& s, const std::string& annotator) {
    for (const auto& a : s.config.annotators) {
      if (a.id == annotator) return;
    }
    throw not_found("annotator '" + annotator + "'");
  }
};

AnnotationService::AnnotationService(const std::string& db_path) : impl_(std::make_unique<Impl>()) {
  if (sqlite3_open(db_path.c_str(), &impl_->db) != SQLITE_OK) {
    const std::string msg = impl_->db ? sqlite3_errmsg(impl_->db) : "out of memory";
    sqlite3_close(impl_->db);
    throw IoError("cannot open annotation store '" + db_path + "': " + msg);
  }
  sqlite3_busy_timeout(impl_->db, 5000);
  impl_->exec("PRAGMA foreign_keys = ON");
  impl_->exec(kSchema);
}

AnnotationService::~AnnotationService() { sqlite3_close(impl_->db); }

void AnnotationService::create_project(const ProjectConfig& config, const Corpus& pool) {
  config.validate();
  if (pool.empty()) throw ConfigError("annotation pool is empty");
  std::lock_guard lock(impl_->mutex);
  Fnv1a h;
  for (const auto& s : pool.sentences) {
    for (const auto& t : s.tokens) h.update(t.text).update("\x1f");
    h.update(s.doc_id.value_or("")).update("\x1e");
  }
  const std::string pool_hash = h.hex();
  Impl::Transaction tx(*impl_, true);
  {
    Statement q(impl_->db, "SELECT config, pool_hash FROM projects WHERE id = ?");
    q.bind(1, config.id);
    if (q.step()) {
      if (json::parse(q.text(0)) != config.to_json() || q.text(1) != pool_hash) {
        throw ServiceError(409, "project_exists",
                           "project '" + config.id + "' exists with a different config or pool");
      }
      return;
    }
  }
  Statement(impl_->db, "INSERT INTO projects (id, config, pool_hash) VALUES (?, ?, ?)")
      .bind(1, config.id)
      .bind(2, config.to_json().dump())
      .bind(3, pool_hash)
      .step();
  const std::size_t n = pool.size();
  const std::size_t overlap = config.annotators.size() == 1 ? 0 : std::min(n, config.dual_overlap.value_or(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = pool.sentences[i];
    json tokens = json::array();
    for (const auto& t : s.tokens) tokens.push_back(t.text);
    Statement ins(impl_->db,
                  "INSERT INTO sentences (project, id, doc_id, sent_index, tokens) VALUES (?, ?, ?, ?, ?)");
    ins.bind(1, config.id).bind(2, static_cast<std::int64_t>(i)).bind(5, tokens.dump());
    if (s.doc_id) ins.bind(3, *s.doc_id); else ins.bind_null(3);
    if (s.sent_index) ins.bind(4, *s.sent_index); else ins.bind_null(4);
    ins.step();
    std::vector<std::string> who;
    if (i < overlap) {
      who = {config.annotators[0].id, config.annotators[1].id};
    } else {
      who = {config.annotators[(i - overlap) % config.annotators.size()].id};
    }
    for (const auto& a : who) {
      Statement(impl_->db, "INSERT INTO assignments (project, sentence, annotator) VALUES (?, ?, ?)")
          .bind(1, config.id)
          .bind(2, static_cast<std::int64_t>(i))
          .bind(3, a)
          .step();
    }
  }
  tx.commit();
}

std::vector<std::string> AnnotationService::project_ids() const {
  std::lock_guard lock(impl_->mutex);
  std::vector<std::string> out;
  Statement q(impl_->db, "SELECT id FROM projects ORDER BY id");
  while (q.step()) out.push_back(q.text(0));
  return out;
}

ProjectConfig AnnotationService::project_config(const std::string& project) const {
  std::lock_guard lock(impl_->mutex);
  auto c = impl_->find_config(project);
  if (!c) throw not_found("project '" + project + "'");
  return *c;
}

void AnnotationService::set_suggester(Suggester suggester) {
  std::lock_guard lock(impl_->mutex);
  impl_->suggester = std::move(suggester);
}

std::optional<std::pair<std::string, std::string>> AnnotationService::authenticate(
    const std::string& project, const std::string& token) const {
  std::lock_guard lock(impl_->mutex);
  auto c = impl_->find_config(project);
  if (!c || token.empty()) return std::nullopt;
  for (const auto& a : c->annotators) {
    if (a.token == token) return std::make_pair(a.id, std::string("annotator"));
  }
  for (const auto& a : c->adjudicators) {
    if (a.token == token) return std::make_pair(a.id, std::string("adjudicator"));
  }
  return std::nullopt;
}

json AnnotationService::project_info(const std::string& project) const {
  std::lock_guard lock(impl_->mutex);
  const Snapshot s = impl_->read_snapshot(project);
  json annotators = json::array();
  for (const auto& a : s.config.annotators) annotators.push_back(a.id);
  json adjudicators = json::array();
  for (const auto& a : s.config.adjudicators) adjudicators.push_back(a.id);
  std::size_t dual = 0;
  for (const auto& who : s.assigned) dual += who.size() == 2;
  return {{"schema", kAnnotationSchema},
          {"id", s.config.id},
          {"title", s.config.title},
          {"guidelines", s.config.guidelines},
          {"labels", impl_->label_set.phi_types()},
          {"bio_labels", impl_->label_set.bio_labels()},
          {"annotators", annotators},
          {"adjudicators", adjudicators},
          {"sentences", s.sentences.size()},
          {"dual_sentences", dual},
          {"pre_annotation", s.config.pre_annotation},
          {"categories", {"criteria-discrepancy", "entity-ambiguity", "annotation-error"}}};
}

json AnnotationService::next_task(const std::string& project, const std::string& annotator) const {
  std::lock_guard lock(impl_->mutex);
  const Snapshot s = impl_->read_snapshot(project);
  Impl::require_annotator(s, annotator);
  std::size_t total = 0;
  std::size_t done = 0;
  std::optional<std::size_t> next;
  for (std::size_t i = 0; i < s.sentences.size(); ++i) {
    const auto& who = s.assigned[i];
    if (std::find(who.begin(), who.end(), annotator) == who.end()) continue;
    ++total;
    if (s.record(static_cast<std::int64_t>(i), annotator) != nullptr) {
      ++done;
    } else if (!next) {
      next = i;
    }
  }
  json out{{"schema", kAnnotationSchema}, {"progress", {{"done", done}, {"total", total}}}};
  if (!next) {
    out["status"] = "done";
    return out;
  }
  const Sentence& sent = s.sentences[*next];
  out["status"] = "task";
  out["sentence"] = {{"id", *next}, {"tokens", words_of(sent)}};
  if (sent.doc_id) out["sentence"]["doc_id"] = *sent.doc_id;
  out["revision"] = 0;
  if (s.config.pre_annotation && impl_->suggester) {
    out["suggested_labels"] = labels_json(impl_->suggester(sent), impl_->label_set);
  }
  return out;
}

json AnnotationService::submit(const SubmitRequest& r) {
  std::lock_guard lock(impl_->mutex);
  Impl::Transaction tx(*impl_, true);
  const Snapshot s = impl_->load(r.project);
  Impl::require_annotator(s, r.annotator);
  const Sentence& sent = Impl::sentence_at(s, r.sentence_id);
  const auto& who = s.assigned[static_cast<std::size_t>(r.sentence_id)];
  if (std::find(who.begin(), who.end(), r.annotator) == who.end()) {
    throw ServiceError(403, "not_assigned",
                       "sentence " + std::to_string(r.sentence_id) + " is not assigned to " + r.annotator);
  }
  if (r.confidence && (*r.confidence < 1 || *r.confidence > 5)) {
    throw bad_request("confidence", "must be an integer from 1 to 5, got " + std::to_string(*r.confidence));
  }
  std::vector<LabelId> labels;
  if (r.skipped) {
    if (!r.labels.empty()) throw bad_request("labels", "skipped records carry no labels");
  } else {
    if (!r.confidence) throw bad_request("confidence", "missing");
    labels = impl_->parse_labels(r.labels, sent.tokens.size());
  }
  const Record* current = s.record(r.sentence_id, r.annotator);
  const int current_revision = current == nullptr ? 0 : current->revision;
  if (r.base_revision != current_revision) {
    ServiceError e(409, "stale_revision",
                   "base_revision " + std::to_string(r.base_revision) + " but the stored revision is " +
                       std::to_string(current_revision),
                   "base_revision");
    throw e;
  }
  const int revision = current_revision + 1;
  json record{{"labels", labels_json(labels, impl_->label_set)},
              {"confidence", r.confidence ? json(*r.confidence) : json(nullptr)},
              {"skipped", r.skipped},
              {"skip_reason", r.skip_reason}};
  const std::string created = now_utc();
  Statement(impl_->db,
            "INSERT INTO annotations (project, sentence, annotator, revision, record, created_at) "
            "VALUES (?, ?, ?, ?, ?, ?)")
      .bind(1, r.project)
      .bind(2, r.sentence_id)
      .bind(3, r.annotator)
      .bind(4, static_cast<std::int64_t>(revision))
      .bind(5, record.dump())
      .bind(6, created)
      .step();
  tx.commit();
  return {{"schema", kAnnotationSchema},
          {"sentence_id", r.sentence_id},
          {"annotator", r.annotator},
          {"revision", revision},
          {"created_at", created}};
}

json AnnotationService::history(const std::string& project, const std::string& annotator) const {
  std::lock_guard lock(impl_->mutex);
  Impl::Transaction tx(*impl_, false);
  const Snapshot s = impl_->load(project);
  Impl::require_annotator(s, annotator);
  Statement q(impl_->db,
              "SELECT sentence, revision, record, created_at FROM annotations "
              "WHERE project = ? AND annotator = ? ORDER BY seq");
  q.bind(1, project).bind(2, annotator);
  json rows = json::array();
  while (q.step()) {
    json rec = json::parse(q.text(2));
    rec["sentence_id"] = q.integer(0);
    rec["revision"] = q.integer(1);
    rec["created_at"] = q.text(3);
    rows.push_back(std::move(rec));
  }
  tx.commit();
  return {{"schema", kAnnotationSchema}, {"annotator", annotator}, {"records", rows}};
}

std::vector<SentenceState> AnnotationService::sentence_states(const std::string& project) const {
  std::lock_guard lock(impl_->mutex);
  const Snapshot s = impl_->read_snapshot(project);
  std::vector<SentenceState> out;
  for (std::size_t i = 0; i < s.sentences.size(); ++i) out.push_back(state_of(s, static_cast<std::int64_t>(i)));
  return out;
}

namespace {

// The two annotators' corpora over dually annotated, non-skipped sentences.
std::pair<Corpus, Corpus> dual_corpora(const Snapshot& s, const LabelSet& ls) {
  Corpus a, b;
  a.label_set = b.label_set = ls;
  for (std::size_t i = 0; i < s.sentences.size(); ++i) {
    const auto state = state_of(s, static_cast<std::int64_t>(i));
    if (state != SentenceState::Agreed && state != SentenceState::Disagreed &&
        state != SentenceState::Resolved && state != SentenceState::Unresolvable) {
      continue;
    }
    const auto& who = s.assigned[i];
    for (int side = 0; side < 2; ++side) {
      Sentence sent = s.sentences[i];
      const auto& labels = s.record(static_cast<std::int64_t>(i), who[side])->labels;
      for (std::size_t t = 0; t < sent.tokens.size(); ++t) sent.tokens[t].label = labels[t];
      (side == 0 ? a : b).sentences.push_back(std::move(sent));
    }
  }
  return {std::move(a), std::move(b)};
}

}  // namespace

json AnnotationService::agreement(const std::string& project) const {
  std::lock_guard lock(impl_->mutex);
  const Snapshot s = impl_->read_snapshot(project);
  std::map<std::string, std::size_t> counts;
  for (auto st : {SentenceState::Pending, SentenceState::Single, SentenceState::Skipped,
                  SentenceState::Agreed, SentenceState::Disagreed, SentenceState::Resolved,
                  SentenceState::Unresolvable}) {
    counts[to_string(st)] = 0;
  }
  for (std::size_t i = 0; i < s.sentences.size(); ++i) ++counts[to_string(state_of(s, static_cast<std::int64_t>(i)))];
  json per_annotator = json::object();
  for (const auto& a : s.config.annotators) {
    std::size_t annotated = 0, skipped = 0;
    for (const auto& [key, rec] : s.latest) {
      if (key.second != a.id) continue;
      ++(rec.skipped ? skipped : annotated);
    }
    per_annotator[a.id] = {{"annotated", annotated}, {"skipped", skipped}};
  }
  json out{{"schema", kAnnotationSchema}, {"sentences", counts}, {"annotators", per_annotator}};
  const auto [a, b] = dual_corpora(s, impl_->label_set);
  if (a.empty()) {
    out["status"] = "empty";
    return out;
  }
  const KappaResult k = corpus_kappa(a, b);
  const std::size_t disagreed = counts["disagreed"] + counts["resolved"] + counts["unresolvable"];
  out["status"] = "ok";
  out["kappa"] = k.kappa;
  out["observed"] = k.observed;
  out["expected"] = k.expected;
  out["tokens"] = k.tokens;
  out["dual_sentences"] = a.size();
  out["agreed"] = counts["agreed"];
  out["disagreed"] = disagreed;
  return out;
}

json AnnotationService::disagreements(const std::string& project) const {
  std::lock_guard lock(impl_->mutex);
  const Snapshot s = impl_->read_snapshot(project);
  json rows = json::array();
  for (std::size_t i = 0; i < s.sentences.size(); ++i) {
    const auto id = static_cast<std::int64_t>(i);
    const auto state = state_of(s, id);
    if (state != SentenceState::Disagreed && state != SentenceState::Resolved &&
        state != SentenceState::Unresolvable) {
      continue;
    }
    json annotations = json::array();
    for (const auto& who : s.assigned[i]) {
      const Record* r = s.record(id, who);
      annotations.push_back({{"annotator", who},
                             {"labels", labels_json(r->labels, impl_->label_set)},
                             {"confidence", r->confidence ? json(*r->confidence) : json(nullptr)},
                             {"revision", r->revision}});
    }
    json row{{"sentence_id", i}, {"tokens", words_of(s.sentences[i])}, {"state", to_string(state)},
             {"annotations", annotations}};
    if (auto adj = s.adjudication.find(id); adj != s.adjudication.end()) {
      row["adjudication"] = {{"category", adj->second.category},
                             {"adjudicator", adj->second.adjudicator},
                             {"unresolvable", !adj->second.labels.has_value()}};
      if (adj->second.labels) row["adjudication"]["labels"] = labels_json(*adj->second.labels, impl_->label_set);
    }
    rows.push_back(std::move(row));
  }
  return {{"schema", kAnnotationSchema}, {"disagreements", rows}};
}

json AnnotationService::adjudicate(const AdjudicateRequest& r) {
  std::lock_guard lock(impl_->mutex);
  Impl::Transaction tx(*impl_, true);
  const Snapshot s = impl_->load(r.project);
  if (std::none_of(s.config.adjudicators.begin(), s.config.adjudicators.end(),
                   [&](const Participant& p) { return p.id == r.adjudicator; })) {
    throw not_found("adjudicator '" + r.adjudicator + "'");
  }
  const Sentence& sent = Impl::sentence_at(s, r.sentence_id);
  const auto state = state_of(s, r.sentence_id);
  if (state != SentenceState::Disagreed && state != SentenceState::Resolved &&
      state != SentenceState::Unresolvable) {
    throw ServiceError(409, "not_disagreed",
                       "sentence " + std::to_string(r.sentence_id) + " is " + to_string(state) +
                           ", not in the disagreed partition");
  }
  json labels = nullptr;
  if (r.labels) labels = labels_json(impl_->parse_labels(*r.labels, sent.tokens.size()), impl_->label_set);
  json originals = json::array();
  for (const auto& who : s.assigned[static_cast<std::size_t>(r.sentence_id)]) {
    const Record* rec = s.record(r.sentence_id, who);
    originals.push_back({{"annotator", who},
                         {"revision", rec->revision},
                         {"labels", labels_json(rec->labels, impl_->label_set)},
                         {"confidence", rec->confidence ? json(*rec->confidence) : json(nullptr)}});
  }
  json record{{"adjudicator", r.adjudicator},
              {"labels", labels},
              {"unresolvable", r.unresolvable},
              {"category", to_string(*r.category)},
              {"originals", originals}};
  const std::string created = now_utc();
  Statement(impl_->db, "INSERT INTO adjudications (project, sentence, record, created_at) VALUES (?, ?, ?, ?)")
      .bind(1, r.project)
      .bind(2, r.sentence_id)
      .bind(3, record.dump())
      .bind(4, created)
      .step();
  tx.commit();
  record["schema"] = kAnnotationSchema;
  record["sentence_id"] = r.sentence_id;
  record["state"] = r.unresolvable ? "unresolvable" : "resolved";
  record["created_at"] = created;
  return record;
}

std::string AnnotationService::export_conll(const std::string& project, ExportTarget target,
                                            const std::string& annotator) const {
  std::lock_guard lock(impl_->mutex);
  const Snapshot s = impl_->read_snapshot(project);
  Corpus out;
  out.label_set = impl_->label_set;
  if (target == ExportTarget::Annotations) {
    if (annotator.empty()) throw bad_request("annotator", "missing");
    Impl::require_annotator(s, annotator);
    const auto [a, b] = dual_corpora(s, impl_->label_set);
    const bool first = s.config.annotators[0].id == annotator;
    out = first ? a : b;
  } else {
    for (std::size_t i = 0; i < s.sentences.size(); ++i) {
      const auto id = static_cast<std::int64_t>(i);
      const auto state = state_of(s, id);
      const std::vector<LabelId>* labels = nullptr;
      if (target == ExportTarget::Dev && state == SentenceState::Agreed) {
        labels = &s.record(id, s.assigned[i][0])->labels;
      } else if (target == ExportTarget::FewShot && state == SentenceState::Resolved) {
        labels = &*s.adjudication.at(id).labels;
      }
      if (labels == nullptr) continue;
      Sentence sent = s.sentences[i];
      for (std::size_t t = 0; t < sent.tokens.size(); ++t) sent.tokens[t].label = (*labels)[t];
      out.sentences.push_back(std::move(sent));
    }
  }
  if (out.empty()) throw ServiceError(409, "empty_pool", "nothing to export for this target yet");
  return write_conll(out);
}

}  // namespace deid
