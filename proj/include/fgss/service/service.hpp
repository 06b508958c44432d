#pragma once

// HTTP facade for the annotate → segment → inspect loop. Sessions live in
// memory; one worker pool runs segmentation jobs.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>

namespace httplib {
class Server;
}

namespace fgss::service {

struct ServiceConfig {
  std::filesystem::path models_dir;  // falls back to $FGSS_MODELS_DIR
  std::size_t max_upload_bytes = 32u << 20;
  int workers = 1;        // concurrent segmentation jobs per process
  int infer_threads = 1;  // threads inside one job
  std::string cors_origin = "*";
  std::uint64_t grey_seed = 7;
};

class Service {
 public:
  explicit Service(ServiceConfig cfg);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Registers every route (and CORS handling) on `server`.
  void mount(httplib::Server& server);

  /// Blocks until no job is queued or running.
  void wait_idle();

  const ServiceConfig& config() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Binds host:port and serves until the process is stopped.
int serve(const ServiceConfig& cfg, const std::string& host, int port);

}  // namespace fgss::service
