#pragma once

// HTTP/JSON front end for InspectService.
//
//   POST /inspect                  raw PNG body, or multipart field "image"
//   GET  /queue?filter=&page=      filter: unreviewed (default) | all
//   POST /records/{id}/review      {"verdict": "...", "reviewer": "..."}
//   GET  /records/{id}             one record
//   GET  /records/{id}/image       stored PNG
//   GET  /stats, GET /light, GET /health
//
// Errors are {"error": message, "status": code}.

#include <memory>
#include <string>

#include "vqi/service.hpp"

namespace vqi {

class HttpFrontend {
 public:
  explicit HttpFrontend(InspectService& service);
  ~HttpFrontend();
  HttpFrontend(const HttpFrontend&) = delete;
  HttpFrontend& operator=(const HttpFrontend&) = delete;

  /// Binds without serving; port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port);
  /// Blocks until stop() is called.
  void run();
  void stop();
  void wait_until_ready() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace vqi
