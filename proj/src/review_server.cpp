#include "conceptset/error.hpp"
#include "conceptset/review.hpp"

#include <httplib.h>

namespace conceptset {

namespace {

using nlohmann::json;

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kParse:
    case ErrorCode::kSchema:
      return 400;
    case ErrorCode::kNotFound:
      return 404;
    case ErrorCode::kInvalidState:
    case ErrorCode::kIncompleteAdjudication:
    case ErrorCode::kClassConflict:
    case ErrorCode::kLocked:
      return 409;
    default:
      return 500;
  }
}

void reply_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void reply_error(httplib::Response& res, int status, const std::string& code,
                 const std::string& message) {
  reply_json(res, status, json{{"error", code}, {"message", message}});
}

struct Denied {
  int status;
  std::string message;
};

json parse_body(const httplib::Request& req) {
  try {
    auto j = json::parse(req.body);
    if (!j.is_object()) throw Error(ErrorCode::kInvalidArgument, "request body must be a JSON object");
    return j;
  } catch (const json::exception&) {
    throw Error(ErrorCode::kInvalidArgument, "request body is not valid JSON");
  }
}

std::optional<ClassLabel> optional_label(const json& body) {
  auto it = body.find("class");
  if (it == body.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw Error(ErrorCode::kInvalidArgument, "\"class\" must be a string");
  auto label = parse_class_label(it->get<std::string>());
  if (!label) throw Error(ErrorCode::kInvalidArgument, "unknown class " + it->get<std::string>());
  return label;
}

Cui required_cui(const json& body) {
  auto it = body.find("cui");
  if (it == body.end() || !it->is_string()) throw Error(ErrorCode::kInvalidArgument, "\"cui\" is required");
  auto cui = Cui::parse(it->get<std::string>());
  if (!cui) throw Error(ErrorCode::kInvalidArgument, "malformed CUI " + it->get<std::string>());
  return *cui;
}

bool required_bool(const json& body, const char* key) {
  auto it = body.find(key);
  if (it == body.end() || !it->is_boolean())
    throw Error(ErrorCode::kInvalidArgument, std::string("\"") + key + "\" must be a boolean");
  return it->get<bool>();
}

}  // namespace

struct ReviewServer::Impl {
  ReviewStore& store;
  ReviewServerConfig config;
  httplib::Server server;

  Impl(ReviewStore& s, ReviewServerConfig c) : store(s), config(std::move(c)) {}

  const ReviewPrincipal& authenticate(const httplib::Request& req) const {
    const auto header = req.get_header_value("Authorization");
    const std::string prefix = "Bearer ";
    if (header.rfind(prefix, 0) != 0) throw Denied{401, "missing bearer token"};
    auto it = config.tokens.find(header.substr(prefix.size()));
    if (it == config.tokens.end()) throw Denied{401, "unknown token"};
    return it->second;
  }

  template <typename Fn>
  httplib::Server::Handler guarded(Fn fn) {
    return [this, fn](const httplib::Request& req, httplib::Response& res) {
      try {
        const auto& who = authenticate(req);
        fn(req, res, who);
      } catch (const Denied& d) {
        reply_error(res, d.status, d.status == 401 ? "unauthorized" : "forbidden", d.message);
      } catch (const Error& e) {
        reply_error(res, http_status(e.code()), error_code_name(e.code()), e.what());
      } catch (const std::exception& e) {
        reply_error(res, 500, "internal", e.what());
      }
    };
  }

  // Annotators may only touch their own sessions.
  ReviewSession owned_session(const std::string& id, const ReviewPrincipal& who) const {
    auto s = store.session(id);
    if (who.role != "adjudicator" && s.annotator_id != who.id)
      throw Denied{403, "session belongs to another annotator"};
    return s;
  }

  void routes() {
    server.Post("/sessions", guarded([this](const httplib::Request& req, httplib::Response& res,
                                            const ReviewPrincipal& who) {
      if (who.role != "annotator") throw Denied{403, "only annotators open review sessions"};
      const auto body = parse_body(req);
      auto it = body.find("concept_id");
      if (it == body.end() || !it->is_string())
        throw Error(ErrorCode::kInvalidArgument, "\"concept_id\" is required");
      if (auto a = body.find("annotator_id"); a != body.end() && a->get<std::string>() != who.id)
        throw Denied{403, "cannot open a session for another annotator"};
      const auto session = store.create_session(it->get<std::string>(), who.id);
      reply_json(res, 200, to_json(session, false));
    }));

    server.Get(R"(/sessions/([^/]+)/queue)",
               guarded([this](const httplib::Request& req, httplib::Response& res,
                              const ReviewPrincipal& who) {
                 const auto s = owned_session(req.matches[1], who);
                 json items = json::array();
                 for (const auto& item : s.queue) {
                   auto j = to_json(item);
                   auto d = s.decisions.find(item.cui);
                   j["decision"] = d == s.decisions.end() ? json(nullptr) : to_json(d->second);
                   items.push_back(std::move(j));
                 }
                 auto body = to_json(s, false);
                 body["items"] = std::move(items);
                 reply_json(res, 200, body);
               }));

    server.Post(R"(/sessions/([^/]+)/decisions)",
                guarded([this](const httplib::Request& req, httplib::Response& res,
                               const ReviewPrincipal& who) {
                  const auto s = owned_session(req.matches[1], who);
                  if (s.annotator_id != who.id) throw Denied{403, "only the session owner decides"};
                  const auto body = parse_body(req);
                  const auto cui = required_cui(body);
                  const auto decision =
                      store.record_decision(s.id, cui, required_bool(body, "include"), optional_label(body));
                  auto out = to_json(decision);
                  out["cui"] = cui.str();
                  out["session"] = s.id;
                  reply_json(res, 200, out);
                }));

    server.Get(R"(/concepts/([^/]+)/agreement)",
               guarded([this](const httplib::Request& req, httplib::Response& res,
                              const ReviewPrincipal& who) {
                 const auto agreement = store.live_agreement(req.matches[1]);
                 reply_json(res, 200, to_json(agreement, who.role == "adjudicator"));
               }));

    server.Post(R"(/concepts/([^/]+)/adjudication)",
                guarded([this](const httplib::Request& req, httplib::Response& res,
                               const ReviewPrincipal& who) {
                  if (who.role != "adjudicator") throw Denied{403, "adjudication is adjudicator-only"};
                  const auto body = parse_body(req);
                  std::vector<Resolution> resolutions;
                  if (auto it = body.find("resolutions"); it != body.end()) {
                    if (!it->is_array())
                      throw Error(ErrorCode::kInvalidArgument, "\"resolutions\" must be an array");
                    for (const auto& r : *it) {
                      if (!r.is_object())
                        throw Error(ErrorCode::kInvalidArgument, "resolutions must be objects");
                      resolutions.push_back({required_cui(r), required_bool(r, "include"), optional_label(r)});
                    }
                  }
                  const auto record = store.adjudicate(req.matches[1], who.id, resolutions);
                  reply_json(res, 200, to_json(record));
                }));

    server.Get(R"(/concepts/([^/]+)/gold.csv)",
               guarded([this](const httplib::Request& req, httplib::Response& res,
                              const ReviewPrincipal&) {
                 res.status = 200;
                 res.set_content(store.gold_csv(req.matches[1]), "text/csv");
               }));

    if (!config.static_dir.empty()) server.set_mount_point("/", config.static_dir.string());
  }
};

ReviewServer::ReviewServer(ReviewStore& store, ReviewServerConfig config)
    : impl_(std::make_unique<Impl>(store, std::move(config))) {
  impl_->routes();
}

ReviewServer::~ReviewServer() { stop(); }

int ReviewServer::bind() {
  if (impl_->config.port == 0) {
    const int port = impl_->server.bind_to_any_port(impl_->config.host);
    if (port < 0) throw Error(ErrorCode::kIo, "cannot bind " + impl_->config.host);
    return port;
  }
  if (!impl_->server.bind_to_port(impl_->config.host, impl_->config.port))
    throw Error(ErrorCode::kIo, "cannot bind " + impl_->config.host + ":" +
                                    std::to_string(impl_->config.port));
  return impl_->config.port;
}

void ReviewServer::serve() { impl_->server.listen_after_bind(); }

void ReviewServer::stop() {
  if (impl_->server.is_running()) impl_->server.stop();
}

}  // namespace conceptset
