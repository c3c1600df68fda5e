#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gsedit/clients/backends.hpp"
#include "gsedit/optim/adam.hpp"
#include "gsedit/roi/roi.hpp"

namespace gsedit::edit {

using Scene = GaussianScene<double>;
using Cam = Camera<double>;

enum class Status { kIdle, kLifting, kEditing, kPaused, kDone, kFailed };

const char* status_name(Status s);
Status status_from_name(const std::string& name);

struct EditConfig {
  double beta = 0.2;
  int max_rounds = 200;
  double t_min = 0.02, t_max = 0.98;
  optim::LearningRates learning_rates;
  std::uint64_t seed = 0;
  std::vector<Attribute> attributes = {Attribute::kColor, Attribute::kOpacity};
  bool mask_gradients = true;  // false reproduces editing without a Gaussian RoI
  bool early_stop = true;      // stop once the 20-round mean loss improves by < 1e-5
  int early_stop_window = 20;
  double early_stop_tolerance = 1e-5;

  void validate() const;
  static EditConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct StepDiagnostics {
  int round = 0;  // 1-based index of the completed round
  std::size_t view = 0;
  double noise_level = 0;
  double loss = 0;
  std::map<Attribute, double> grad_norms;  // after masking

  nlohmann::json to_json() const;
};

/// One editing session over a fixed Gaussian set. The original scene is
/// frozen; the working scene is replaced wholesale at round boundaries, so
/// snapshot() never observes a partially applied step.
class EditSession {
 public:
  EditSession(Scene original, std::vector<Cam> cameras, roi::GaussianRoi roi, std::string instruction,
              EditConfig config);

  const Scene& original() const { return *original_; }
  std::shared_ptr<const Scene> snapshot() const;
  const std::vector<Cam>& cameras() const { return cameras_; }
  const roi::GaussianRoi& roi() const { return roi_; }
  const std::string& instruction() const { return instruction_; }
  const EditConfig& config() const { return config_; }
  int round() const;
  Status status() const;
  std::vector<StepDiagnostics> history() const;
  std::optional<std::string> last_error() const;

  void set_status(Status s);
  void request_pause() { pause_requested_ = true; }
  bool pause_requested() const { return pause_requested_; }
  /// Clears a pending pause request, returning whether one was pending.
  bool consume_pause_request() { return pause_requested_.exchange(false); }
  /// Sets max_rounds for the next run; must be >= the current round and >= 1.
  void set_max_rounds(int max_rounds);

  /// One round on a view drawn from the session RNG. On a backend error the
  /// session is left exactly as before the call (round, RNG, scene); a
  /// non-finite loss marks it failed.
  StepDiagnostics step(const clients::ModelBackends& backends);
  StepDiagnostics step_view(std::size_t view, const clients::ModelBackends& backends);

  /// Writes working.ply, original.ply and session.json into `dir`.
  void save_checkpoint(const std::filesystem::path& dir) const;
  static std::unique_ptr<EditSession> load_checkpoint(const std::filesystem::path& dir);

 private:
  StepDiagnostics run_round(std::size_t view, double noise_level, const clients::ModelBackends& backends);
  const Image& original_render(std::size_t view);

  std::shared_ptr<const Scene> original_;
  std::vector<Cam> cameras_;
  roi::GaussianRoi roi_;
  std::string instruction_;
  EditConfig config_;

  mutable std::mutex mutex_;  // guards the fields below for readers on other threads
  std::shared_ptr<const Scene> working_;
  int round_ = 0;
  Status status_ = Status::kEditing;
  std::vector<StepDiagnostics> history_;
  std::optional<std::string> last_error_;

  std::atomic<bool> pause_requested_{false};
  std::mt19937_64 rng_;
  optim::SceneOptimizer<double> optimizer_;
  std::vector<std::optional<Image>> original_renders_;
};

/// Repeats step() until max_rounds, a pause request, or early stop. Status
/// ends as done, paused or failed.
Scene run_session(EditSession& session, const clients::ModelBackends& backends);

}  // namespace gsedit::edit
