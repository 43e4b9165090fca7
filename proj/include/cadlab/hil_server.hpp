#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "cadlab/hil_session.hpp"

namespace cadlab::hil {

struct ServerOptions {
  std::string address = "127.0.0.1";
  int port = 8080;  // 0 picks an ephemeral port
  SessionConfig session;
  std::filesystem::path archive_dir = "archive";
  bool handle_signals = false;  // stop on SIGINT / SIGTERM
};

// HTTP + WebSocket host for live sessions.
//   POST /sessions                 create a session (JSON body optional)
//   GET  /sessions/{id}/archive    session archive as JSON
//   GET  /health                   liveness
//   WS   /session/{id}             WireMessage stream
// Finished sessions are archived to <archive_dir>/<id>/.
class Server {
 public:
  Server(std::shared_ptr<const sim::TrackSpec> track,
         std::shared_ptr<const nn::Policy<float>> av_policy, ServerOptions options);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // Binds and starts serving on a background thread. Returns the bound port.
  // Throws std::runtime_error when the port is unavailable.
  int start();
  // Thread-safe. Archives open sessions, then stops serving.
  void request_stop();
  void wait();
  int archived_count() const;

  struct Impl;

 private:
  std::shared_ptr<Impl> impl_;
};

}  // namespace cadlab::hil
