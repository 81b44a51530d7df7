#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "detkit/data.hpp"
#include "detkit/model/detector.hpp"

namespace detkit::engine {

DETKIT_DEFINE_ERROR(BadTrainConfig);
DETKIT_DEFINE_ERROR(UntaggedParameter);
DETKIT_DEFINE_ERROR(TooManyStages);
DETKIT_DEFINE_ERROR(NonFiniteLoss);
DETKIT_DEFINE_ERROR(CorruptCheckpoint);
DETKIT_DEFINE_ERROR(IncompatibleCheckpoint);

struct TrainConfig {
  int64_t max_iter = 90000;
  std::vector<int64_t> lr_milestones = {80000};
  double lr_gamma = 0.1;
  int64_t warmup_iters = 1000;  // 0 disables
  double backbone_lr = 1e-5;
  double offsets_refpoints_lr = 1e-5;
  double encdec_lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t batch_size = 16;
  int freeze_stages = 1;
  std::optional<double> ema_decay;
  std::optional<double> clip_norm = 0.1;
  bool amp = false;
  bool grad_checkpoint = false;
  uint64_t seed = 0;
  int64_t log_period = 20;
  int64_t checkpoint_period = 0;  // 0: final checkpoint only

  // Throws BadTrainConfig.
  void validate() const;
};

// gamma^(#milestones <= iteration), times a linear warmup ramp that starts
// at 1/W on iteration 0 and reaches 1 at iteration W-1.
double lr_at(int64_t iteration, const TrainConfig& cfg);

struct ParamGroup {
  std::string name;  // "backbone", "offsets_refpoints", "encdec"
  double lr = 0;
  std::vector<std::pair<std::string, nn::Parameter*>> params;
};

// Three disjoint groups covering every trainable parameter exactly once.
// Errors: UntaggedParameter.
std::vector<ParamGroup> build_param_groups(nn::Module& model, const TrainConfig& cfg);

// Freezes the first n backbone stage units (stem, res2, ...).
// Errors: TooManyStages.
void freeze_backbone_stages(model::Detector& model, int n);

using TensorMap = std::map<std::string, Tensor>;

struct TrainState {
  int64_t iteration = 0;
  TensorMap params;
  TensorMap buffers;
  int64_t optimizer_step = 0;
  TensorMap exp_avg;
  TensorMap exp_avg_sq;
  std::optional<TensorMap> ema;
  std::string rng_state;
  std::optional<double> best_metric;
  bool operator==(const TrainState& other) const = default;
};

// Binary container: magic, JSON header, raw float64 payload, CRC-32 trailer.
// Writes to a temporary file and renames it into place.
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
std::string serialize_checkpoint(const TrainState& state);
// Errors: CorruptCheckpoint.
TrainState load_checkpoint(const std::filesystem::path& path);
TrainState parse_checkpoint(const std::string& bytes);

TensorMap snapshot_parameters(nn::Module& model);
TensorMap snapshot_buffers(nn::Module& model);
// Copies weights into the model. Errors: IncompatibleCheckpoint on any
// missing, extra or mis-shaped entry.
void load_weights(nn::Module& model, const TensorMap& params, const TensorMap& buffers);

struct StepReport {
  int64_t iteration = 0;  // iteration that was just trained
  double loss = 0;
  std::map<std::string, double> components;
  double lr_factor = 0;
  double grad_norm = 0;          // before clipping
  double clipped_grad_norm = 0;  // after clipping
  int64_t images = 0;
  double seconds = 0;
};

// Peak resident set size of this process, when the platform reports it.
std::optional<int64_t> peak_memory_bytes();

// One JSON object per line.
class TrainLog {
 public:
  explicit TrainLog(const std::filesystem::path& path, bool append = false);
  void write(const StepReport& report, double lr);

 private:
  std::ofstream out_;
};

class Trainer {
 public:
  using Notice = std::function<void(const std::string&)>;

  // Applies cfg.freeze_stages and builds the parameter groups.
  Trainer(std::shared_ptr<model::Detector> model, std::shared_ptr<const data::DataLoader> loader, TrainConfig cfg,
          Notice notice = nullptr);

  // One optimization step on loader.batch_at(iteration). `lr_factor`
  // overrides the schedule. Errors: NonFiniteLoss.
  StepReport step(std::optional<double> lr_factor = std::nullopt);
  // Trains until iteration == cfg.max_iter (or `until`), calling `on_step`
  // after every step.
  void run(std::optional<int64_t> until = std::nullopt, const std::function<void(const StepReport&)>& on_step = {});

  int64_t iteration() const { return iteration_; }
  model::Detector& model() { return *model_; }
  const TrainConfig& config() const { return cfg_; }
  const std::vector<ParamGroup>& param_groups() const { return groups_; }
  const std::optional<TensorMap>& ema() const { return ema_; }
  std::optional<double>& best_metric() { return best_metric_; }

  TrainState capture_state();
  void restore_state(const TrainState& state);
  void save(const std::filesystem::path& path) { save_checkpoint(capture_state(), path); }
  void resume(const std::filesystem::path& path) { restore_state(load_checkpoint(path)); }
  // Weights-only state whose params are the EMA copy. Requires EMA.
  TrainState ema_state();

 private:
  void update_ema();

  std::shared_ptr<model::Detector> model_;
  std::shared_ptr<const data::DataLoader> loader_;
  TrainConfig cfg_;
  Notice notice_;
  std::vector<ParamGroup> groups_;
  int64_t iteration_ = 0;
  int64_t optimizer_step_ = 0;
  TensorMap exp_avg_, exp_avg_sq_;
  std::optional<TensorMap> ema_;
  std::optional<double> best_metric_;
  std::mt19937_64 rng_;
};

}  // namespace detkit::engine
