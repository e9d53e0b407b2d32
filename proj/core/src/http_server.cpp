#include "vqi/http_server.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "httplib.h"
#include "json.hpp"

namespace vqi {

namespace {

void send_json(httplib::Response& res, int status, const std::string& body) {
  res.status = status;
  res.set_content(body, "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& msg) {
  nlohmann::ordered_json j;
  j["error"] = msg;
  j["status"] = status;
  send_json(res, status, j.dump());
}

std::uint64_t parse_id(const std::string& s) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ServiceError(ServiceError::Kind::BadRequest, "bad record id");
  return v;
}

int parse_page(const std::string& s) {
  int v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ServiceError(ServiceError::Kind::BadRequest, "page must be a positive integer");
  }
  return v;
}

// Maps exceptions from a handler to JSON error responses.
template <typename F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const ServiceError& e) {
      send_error(res, e.http_status(), e.what());
    } catch (const nlohmann::json::exception& e) {
      send_error(res, 400, std::string("bad JSON: ") + e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  };
}

}  // namespace

struct HttpFrontend::Impl {
  InspectService& svc;
  httplib::Server server;

  explicit Impl(InspectService& s) : svc(s) {
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                {"Access-Control-Allow-Headers", "Content-Type"}});
    server.set_payload_max_length(16 * 1024 * 1024);
    server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server.Post("/inspect", guarded([this](const httplib::Request& req, httplib::Response& res) {
      std::string body;
      if (req.is_multipart_form_data()) {
        if (!req.has_file("image")) throw ServiceError(ServiceError::Kind::BadRequest, "multipart field 'image' missing");
        body = req.get_file_value("image").content;
      } else {
        body = req.body;
      }
      if (body.empty()) throw ServiceError(ServiceError::Kind::BadRequest, "empty image body");
      const auto r = svc.inspect(reinterpret_cast<const std::uint8_t*>(body.data()), body.size());
      send_json(res, 201, r.to_json());
    }));

    server.Get("/queue", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto filter = queue_filter_from_string(req.has_param("filter") ? req.get_param_value("filter") : "");
      const int page = req.has_param("page") ? parse_page(req.get_param_value("page")) : 1;
      send_json(res, 200, svc.queue(filter, page).to_json());
    }));

    server.Post(R"(/records/(\d+)/review)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto id = parse_id(req.matches[1]);
      const auto j = nlohmann::json::parse(req.body);
      if (!j.is_object() || !j.contains("verdict") || !j.contains("reviewer")) {
        throw ServiceError(ServiceError::Kind::BadRequest, "body must be {\"verdict\": ..., \"reviewer\": ...}");
      }
      const auto verdict = verdict_from_string(j.at("verdict").get<std::string>());
      send_json(res, 200, svc.review(id, verdict, j.at("reviewer").get<std::string>()).to_json());
    }));

    server.Get(R"(/records/(\d+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send_json(res, 200, svc.record(parse_id(req.matches[1])).to_json());
    }));

    server.Get(R"(/records/(\d+)/image)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto r = svc.record(parse_id(req.matches[1]));
      std::ifstream in(svc.store() / r.image_ref, std::ios::binary);
      if (!in) throw ServiceError(ServiceError::Kind::NotFound, "image " + r.image_ref + " missing from store");
      std::stringstream ss;
      ss << in.rdbuf();
      res.set_content(ss.str(), "image/png");
    }));

    server.Get("/stats", guarded([this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, svc.stats().to_json());
    }));
    server.Get("/light", guarded([this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, svc.light().to_json());
    }));
    server.Get("/health", guarded([this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, nlohmann::json{{"model_loaded", svc.model_loaded()}}.dump());
    }));

    server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (res.body.empty()) send_error(res, res.status, res.status == 404 ? "no such route" : "request failed");
    });
  }
};

HttpFrontend::HttpFrontend(InspectService& service) : impl_(std::make_unique<Impl>(service)) {}
HttpFrontend::~HttpFrontend() { stop(); }

int HttpFrontend::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = impl_->server.bind_to_any_port(host);
    if (p < 0) throw std::runtime_error("cannot bind " + host);
    return p;
  }
  if (!impl_->server.bind_to_port(host, port)) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void HttpFrontend::run() { impl_->server.listen_after_bind(); }
void HttpFrontend::stop() {
  if (impl_->server.is_running()) impl_->server.stop();
}
void HttpFrontend::wait_until_ready() const { impl_->server.wait_until_ready(); }

}  // namespace vqi
