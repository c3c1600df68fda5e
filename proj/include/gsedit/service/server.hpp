#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "gsedit/clients/backends.hpp"
#include "gsedit/edit/pipeline.hpp"

namespace gsedit::service {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 binds any free port
  std::filesystem::path data_dir = "gsedit-data";
  edit::PipelineConfig pipeline;

  void validate() const;
};

// HTTP+JSON API:
//   GET  /health, /version
//   POST /scenes                         multipart "scene" (PLY) + "cameras" (JSON) -> {scene_id}
//   GET  /scenes/{id}                    -> {scene_id, gaussians, views}
//   GET  /scenes/{id}/render?view=&channel=color|roi|overlay[&session=] -> PNG
//   POST /scenes/{id}/pick               {view, x, y[, session]} -> {gaussian_index | null}
//   POST /sessions                       {scene_id, instruction[, config]} -> descriptor
//   POST /sessions/{id}/describe | extract | masks | lift | roi | start | pause | resume
//   GET  /sessions/{id}                  -> descriptor
//   GET  /sessions/{id}/events[?from=&follow=1] -> JSON lines {round, loss, view, noise_level}
//   GET  /sessions/{id}/export           -> PLY
//
// POST requests carrying an X-Request-Id header are executed once; repeats
// with the same id receive the first response. Every session mutation runs
// on that session's worker thread in submission order.
class Service {
 public:
  Service(ServiceConfig config, clients::ModelBackends backends);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Restores scenes and sessions found in data_dir, binds, and serves on a
  /// background thread. Returns the bound port.
  int start();
  /// Blocks until stop() is called from elsewhere.
  void wait();
  /// Stops accepting requests, pauses running sessions at their next round
  /// boundary and writes every session checkpoint under data_dir.
  void stop();

  /// Writes checkpoints for all sessions now.
  void flush_checkpoints();
  std::filesystem::path session_dir(const std::string& session_id) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace gsedit::service
