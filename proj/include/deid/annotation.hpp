#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "deid/corpus.hpp"
#include "deid/error.hpp"

namespace deid {

inline constexpr const char* kAnnotationSchema = "deid.annotation.v1";

// Error carrying an HTTP status and, for validation failures, the offending
// request field.
class ServiceError : public Error {
 public:
  ServiceError(int status, std::string kind, const std::string& message, std::string field = {})
      : Error(std::move(kind), message), status_(status), field_(std::move(field)) {}

  int status() const noexcept { return status_; }
  const std::string& field() const noexcept { return field_; }
  nlohmann::json to_json() const;

 private:
  int status_;
  std::string field_;
};

struct Participant {
  std::string id;
  std::string token;  // bearer token
};

// Project config file (JSON). Annotators are one or two people; with two,
// the first `dual_overlap` pool sentences (all when unset) go to both and the
// rest alternate between them.
struct ProjectConfig {
  std::string id;
  std::string title;
  std::string guidelines;  // shown verbatim by the UI
  std::vector<Participant> annotators;
  std::vector<Participant> adjudicators;
  std::optional<std::size_t> dual_overlap;
  bool pre_annotation = false;  // model suggestions in next_task

  void validate() const;
  static ProjectConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;  // includes tokens; not for API output
};

struct SubmitRequest {
  std::string project;
  std::int64_t sentence_id = 0;
  std::string annotator;
  std::vector<std::string> labels;
  std::optional<int> confidence;  // 1..5, required unless skipped
  bool skipped = false;
  std::string skip_reason;
  int base_revision = 0;  // revision the client last saw; 0 for a first submission

  // Throws ServiceError(400) naming the field.
  static SubmitRequest from_json(const nlohmann::json& j);
};

enum class DisagreementCategory { CriteriaDiscrepancy, EntityAmbiguity, AnnotationError };

std::string to_string(DisagreementCategory category);
std::optional<DisagreementCategory> parse_disagreement_category(std::string_view name);

struct AdjudicateRequest {
  std::string project;
  std::int64_t sentence_id = 0;
  std::string adjudicator;
  std::optional<std::vector<std::string>> labels;  // absent when unresolvable
  bool unresolvable = false;
  std::optional<DisagreementCategory> category;

  static AdjudicateRequest from_json(const nlohmann::json& j);
};

// Where a pool sentence currently stands.
enum class SentenceState {
  Pending,       // some assigned annotator has not submitted yet
  Single,        // single-assigned and annotated
  Skipped,       // some annotator skipped it
  Agreed,
  Disagreed,     // awaiting adjudication
  Resolved,
  Unresolvable,
};
std::string to_string(SentenceState state);

enum class ExportTarget { Dev, FewShot, Annotations };
ExportTarget parse_export_target(std::string_view name);

// Suggested labels for pre-annotation.
using Suggester = std::function<std::vector<LabelId>(const Sentence&)>;

// Annotation workflow over a SQLite file. Annotation and adjudication rows are
// append-only (enforced by triggers). Thread-safe; calls are serialized.
class AnnotationService {
 public:
  explicit AnnotationService(const std::string& db_path);  // ":memory:" for a scratch store
  ~AnnotationService();
  AnnotationService(const AnnotationService&) = delete;
  AnnotationService& operator=(const AnnotationService&) = delete;

  // Creates the project with the pool's tokens (labels ignored). Re-creating
  // an existing project is a no-op when config and pool match, else an error.
  void create_project(const ProjectConfig& config, const Corpus& pool);
  std::vector<std::string> project_ids() const;
  ProjectConfig project_config(const std::string& project) const;

  void set_suggester(Suggester suggester);

  // Who owns the token: {"id", "role"} with role annotator or adjudicator.
  std::optional<std::pair<std::string, std::string>> authenticate(const std::string& project,
                                                                  const std::string& token) const;

  nlohmann::json project_info(const std::string& project) const;
  nlohmann::json next_task(const std::string& project, const std::string& annotator) const;
  nlohmann::json submit(const SubmitRequest& request);
  // Every stored revision of one annotator, oldest first.
  nlohmann::json history(const std::string& project, const std::string& annotator) const;
  nlohmann::json agreement(const std::string& project) const;
  nlohmann::json disagreements(const std::string& project) const;
  nlohmann::json adjudicate(const AdjudicateRequest& request);

  // dev: agreed sentences; fewshot: resolved disagreements; annotations: one
  // annotator's labels over the dual-annotated, non-skipped sentences (the set
  // agreement() scores). Pool order. Throws ServiceError(409) on an empty pool.
  std::string export_conll(const std::string& project, ExportTarget target,
                           const std::string& annotator = {}) const;

  // Current state of every pool sentence, by sentence id.
  std::vector<SentenceState> sentence_states(const std::string& project) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::string ui_dir;  // static files mounted at "/" when set
};

// HTTP front end. Routes:
//   GET  /api/health
//   GET  /api/projects/:id
//   GET  /api/projects/:id/next?annotator=A
//   GET  /api/projects/:id/history?annotator=A
//   POST /api/annotations
//   GET  /api/projects/:id/agreement
//   GET  /api/projects/:id/disagreements
//   POST /api/adjudications
//   GET  /api/projects/:id/export?target=dev|fewshot|annotations[&annotator=A]
// Every /api/projects route and POST needs `Authorization: Bearer <token>`.
class AnnotationServer {
 public:
  AnnotationServer(AnnotationService& service, ServerOptions options);
  ~AnnotationServer();

  // Binds and returns the port; listen() then blocks until stop().
  int bind();
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace deid
