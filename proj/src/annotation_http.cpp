#include "httplib.h"

#include "deid/annotation.hpp"

namespace deid {

using nlohmann::json;

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

std::string bearer(const httplib::Request& req) {
  const std::string h = req.get_header_value("Authorization");
  const std::string prefix = "Bearer ";
  return h.rfind(prefix, 0) == 0 ? h.substr(prefix.size()) : std::string{};
}

struct Caller {
  std::string id;
  std::string role;
};

}  // namespace

struct AnnotationServer::Impl {
  AnnotationService& service;
  ServerOptions options;
  httplib::Server server;
  int port = 0;

  Impl(AnnotationService& s, ServerOptions o) : service(s), options(std::move(o)) {}

  Caller auth(const httplib::Request& req, const std::string& project) {
    const std::string token = bearer(req);
    if (token.empty()) throw ServiceError(401, "unauthorized", "missing bearer token");
    auto who = service.authenticate(project, token);
    if (!who) throw ServiceError(401, "unauthorized", "token not valid for project '" + project + "'");
    return {who->first, who->second};
  }

  static void require_self(const Caller& caller, const std::string& annotator) {
    if (caller.role != "annotator" || caller.id != annotator) {
      throw ServiceError(403, "forbidden", "token does not belong to annotator '" + annotator + "'");
    }
  }

  // Wraps a handler so ServiceError/Error become JSON error responses.
  template <typename F>
  httplib::Server::Handler guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
      try {
        f(req, res);
      } catch (const ServiceError& e) {
        send_json(res, e.status(), e.to_json());
      } catch (const Error& e) {
        const int status = e.kind() == "label_error" || e.kind() == "parse_error" ? 400 : 500;
        send_json(res, status, ServiceError(status, e.kind(), e.what()).to_json());
      } catch (const std::exception& e) {
        send_json(res, 500, ServiceError(500, "internal_error", e.what()).to_json());
      }
    };
  }

  static json parse_body(const httplib::Request& req) {
    try {
      return json::parse(req.body);
    } catch (const json::exception&) {
      throw ServiceError(400, "invalid_request", "body is not valid JSON", "body");
    }
  }

  void routes() {
    server.Get("/api/health", guarded([](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, {{"schema", kAnnotationSchema}, {"status", "ok"}});
    }));
    server.Get(R"(/api/projects/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string project = req.matches[1];
      const Caller c = auth(req, project);
      json info = service.project_info(project);
      info["you"] = {{"id", c.id}, {"role", c.role}};
      send_json(res, 200, info);
    }));
    server.Get(R"(/api/projects/([^/]+)/next)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string project = req.matches[1];
      const Caller c = auth(req, project);
      const std::string annotator = req.get_param_value("annotator");
      if (annotator.empty()) throw ServiceError(400, "invalid_request", "annotator: missing", "annotator");
      // Unknown annotators are 404 regardless of who asks.
      bool known = false;
      for (const auto& a : service.project_config(project).annotators) known |= a.id == annotator;
      if (!known) throw ServiceError(404, "not_found", "annotator '" + annotator + "'");
      require_self(c, annotator);
      send_json(res, 200, service.next_task(project, annotator));
    }));
    server.Get(R"(/api/projects/([^/]+)/history)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string project = req.matches[1];
      const Caller c = auth(req, project);
      const std::string annotator = req.get_param_value("annotator");
      if (c.role == "annotator") require_self(c, annotator);
      send_json(res, 200, service.history(project, annotator));
    }));
    server.Post("/api/annotations", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const SubmitRequest r = SubmitRequest::from_json(parse_body(req));
      const Caller c = auth(req, r.project);
      require_self(c, r.annotator);
      send_json(res, 201, service.submit(r));
    }));
    server.Get(R"(/api/projects/([^/]+)/agreement)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string project = req.matches[1];
      auth(req, project);
      send_json(res, 200, service.agreement(project));
    }));
    server.Get(R"(/api/projects/([^/]+)/disagreements)",
               guarded([this](const httplib::Request& req, httplib::Response& res) {
                 const std::string project = req.matches[1];
                 auth(req, project);
                 send_json(res, 200, service.disagreements(project));
               }));
    server.Post("/api/adjudications", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const AdjudicateRequest r = AdjudicateRequest::from_json(parse_body(req));
      const Caller c = auth(req, r.project);
      if (c.role != "adjudicator" || c.id != r.adjudicator) {
        throw ServiceError(403, "forbidden", "token does not belong to adjudicator '" + r.adjudicator + "'");
      }
      send_json(res, 201, service.adjudicate(r));
    }));
    server.Get(R"(/api/projects/([^/]+)/export)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string project = req.matches[1];
      auth(req, project);
      if (!req.has_param("target")) throw ServiceError(400, "invalid_request", "target: missing", "target");
      const ExportTarget target = parse_export_target(req.get_param_value("target"));
      res.status = 200;
      res.set_content(service.export_conll(project, target, req.get_param_value("annotator")),
                      "text/plain; charset=utf-8");
    }));
    if (!options.ui_dir.empty() && !server.set_mount_point("/", options.ui_dir)) {
      throw IoError("cannot serve UI directory '" + options.ui_dir + "'");
    }
  }
};

AnnotationServer::AnnotationServer(AnnotationService& service, ServerOptions options)
    : impl_(std::make_unique<Impl>(service, std::move(options))) {
  impl_->routes();
}

AnnotationServer::~AnnotationServer() { stop(); }

int AnnotationServer::bind() {
  if (impl_->options.port == 0) {
    impl_->port = impl_->server.bind_to_any_port(impl_->options.host);
  } else if (impl_->server.bind_to_port(impl_->options.host, impl_->options.port)) {
    impl_->port = impl_->options.port;
  } else {
    impl_->port = -1;
  }
  if (impl_->port < 0) {
    throw IoError("cannot bind " + impl_->options.host + ":" + std::to_string(impl_->options.port));
  }
  return impl_->port;
}

void AnnotationServer::listen() { impl_->server.listen_after_bind(); }

void AnnotationServer::stop() {
  if (impl_->server.is_running()) impl_->server.stop();
}

}  // namespace deid
