// Joint optimisation of the denoiser and both schedule heads, held-out
// evaluation, correlation diagnostics and checkpoint persistence.
#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "oemdm/model.hpp"
#include "oemdm/objective.hpp"

namespace oemdm {

enum class TrainMode { Mdlm, Lomdm };
const char* mode_name(TrainMode m);
TrainMode parse_mode(const std::string& s);

struct TrainingConfig {
  ModelConfig model;
  TrainMode mode = TrainMode::Lomdm;
  int batch = 16;  // B; each step draws B/2 texts, two corruptions each
  int steps = 1000;
  double c1 = 0.7;
  double c2 = 0.65;
  double lr_backbone = 3e-4;
  double lr_heads = 1e-5;
  int warmup = 100;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double dropout = 0.0;
  double t_min = kDefaultTMin;
  std::uint64_t seed = 0;
  int log_every = 10;
  int eval_every = 0;  // 0: evaluate only at the end
  int checkpoint_every = 0;
  int eval_samples = 8;  // MC draws per held-out text
  std::uint64_t eval_seed = 12345;
  bool random_head_init = false;
};

// Throws Config naming the offending field.
void validate_training_config(const TrainingConfig& c);
// c1/c2 actually used: the mdlm baseline pins them to (1, 0).
ObjectiveSettings objective_settings(const TrainingConfig& c);

struct TrainState {
  ModelParams params;
  ModelParams m, v;  // AdamW moments
  std::uint64_t step = 0;
  std::uint64_t seed = 0;

  static TrainState fresh(const TrainingConfig& c);
};

struct Correlations {
  std::optional<double> phi_confidence;
  std::optional<double> psi_confidence;
  std::optional<double> phi_psi;
  std::size_t masked_positions = 0;
};

struct MetricsRecord {
  std::uint64_t step = 0;
  double loss = 0.0;  // mean of (L1 + L2) / 2 per token
  double l_main = 0.0;
  double l_velocity = 0.0;
  double objective = 0.0;
  double lr_backbone = 0.0;
  double lr_heads = 0.0;
  std::optional<double> val_nelbo;  // per token
  Correlations corr;
  double wall_seconds = 0.0;  // excluded from determinism comparisons
};

std::string to_json_line(const MetricsRecord& r);

// Learning rate after warmup scaling for the update taken at `step`.
double scheduled_lr(double base, int warmup, std::uint64_t step);

// One AdamW update on B/2 texts. Draws everything from streams keyed by
// (seed, step), so the result depends only on the state and the batch.
MetricsRecord train_step(TrainState& state, const TrainingConfig& config, const std::vector<Sequence>& batch);

// Texts for the update at `step`: B/2 indices drawn with replacement.
std::vector<Sequence> draw_batch(const std::vector<Sequence>& corpus, const TrainingConfig& config,
                                 std::uint64_t step);

std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b);

Correlations correlation_diagnostics(const ModelParams& params, const TrainingConfig& config,
                                     const std::vector<Sequence>& batch, RandomStream rng);

struct EvalReport {
  double nelbo_per_token = 0.0;
  double stderr_per_token = 0.0;
  double perplexity_bound = 0.0;
  double l_main = 0.0;
  double l_velocity = 0.0;
  std::size_t texts = 0;
  std::size_t samples = 0;
};

// Averages the continuous-time bound over texts; stderr comes from the
// per-sample spread.
EvalReport evaluate_denoiser(const Denoiser& denoiser, const SchedulerSpec& fwd, const SchedulerSpec& rev,
                             const std::vector<Sequence>& texts, std::size_t n_mc, RandomStream rng,
                             double t_min = kDefaultTMin);
// Uses the trained heads (or the linear schedule for the mdlm baseline).
EvalReport evaluate(const ModelParams& params, const TrainingConfig& config, const std::vector<Sequence>& texts,
                    std::size_t n_mc, RandomStream rng);

// Schedulers implied by a trained model: learned heads for lomdm, Linear for mdlm.
std::pair<SchedulerSpec, SchedulerSpec> trained_schedulers(std::shared_ptr<const ModelParams> params,
                                                           const TrainingConfig& config);

struct CheckpointMeta {
  TrainingConfig config;
  std::vector<std::string> symbols;  // vocabulary, pad last
};

void save_checkpoint(const std::string& path, const TrainState& state, const CheckpointMeta& meta);
std::string serialize_checkpoint(const TrainState& state, const CheckpointMeta& meta);
struct LoadedCheckpoint {
  TrainState state;
  CheckpointMeta meta;
};
LoadedCheckpoint load_checkpoint(const std::string& path);
LoadedCheckpoint parse_checkpoint(const std::string& bytes);

struct TrainOptions {
  std::string metrics_path;     // empty: no JSONL stream
  std::string checkpoint_path;  // empty: no checkpoint files
  std::vector<std::string> symbols;
  std::function<void(const MetricsRecord&)> on_metrics;
};

struct TrainResult {
  TrainState state;
  std::vector<MetricsRecord> metrics;
};

// Runs from `start` (fresh or resumed) until config.steps updates have been taken.
TrainResult train(const TrainingConfig& config, const std::vector<Sequence>& corpus,
                  const std::vector<Sequence>& validation, const TrainOptions& options = {},
                  std::optional<TrainState> start = std::nullopt);

}  // namespace oemdm
