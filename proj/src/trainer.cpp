#include "oemdm/trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace oemdm {

const char* mode_name(TrainMode m) { return m == TrainMode::Mdlm ? "mdlm" : "lomdm"; }

TrainMode parse_mode(const std::string& s) {
  if (s == "mdlm") return TrainMode::Mdlm;
  if (s == "lomdm") return TrainMode::Lomdm;
  throw Error(ErrorCode::Config, "mode must be 'mdlm' or 'lomdm', got '" + s + "'");
}

void validate_training_config(const TrainingConfig& c) {
  auto fail = [](const std::string& field, const std::string& why) {
    throw Error(ErrorCode::Config, "training." + field + ": " + why);
  };
  try {
    validate_config(c.model);
  } catch (const Error& e) {
    fail("model", e.what());
  }
  if (c.batch < 2 || c.batch % 2 != 0) fail("batch", "must be a positive even number");
  if (c.steps < 0) fail("steps", "must be non-negative");
  if (!(c.c2 >= 0.0)) fail("c2", "must be >= 0");
  if (!(c.c1 > c.c2)) fail("c1", "must exceed c2 (keeps the velocity ratio bounded and the bound finite)");
  if (!(c.lr_backbone >= 0.0)) fail("lr_backbone", "must be >= 0");
  if (!(c.lr_heads >= 0.0)) fail("lr_heads", "must be >= 0");
  if (c.warmup < 0) fail("warmup", "must be >= 0");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0)) fail("beta1", "must lie in [0,1)");
  if (!(c.beta2 >= 0.0 && c.beta2 < 1.0)) fail("beta2", "must lie in [0,1)");
  if (!(c.adam_eps > 0.0)) fail("adam_eps", "must be > 0");
  if (!(c.weight_decay >= 0.0)) fail("weight_decay", "must be >= 0");
  if (!(c.dropout >= 0.0 && c.dropout < 1.0)) fail("dropout", "must lie in [0,1)");
  if (!(c.t_min > 0.0 && c.t_min < 1.0)) fail("t_min", "must lie in (0,1)");
  if (c.log_every < 1) fail("log_every", "must be >= 1");
  if (c.eval_every < 0) fail("eval_every", "must be >= 0");
  if (c.checkpoint_every < 0) fail("checkpoint_every", "must be >= 0");
  if (c.eval_samples < 1) fail("eval_samples", "must be >= 1");
}

ObjectiveSettings objective_settings(const TrainingConfig& c) {
  ObjectiveSettings s;
  s.dropout = c.dropout;
  if (c.mode == TrainMode::Mdlm) {
    s.c1 = 1.0;
    s.c2 = 0.0;
    s.train_phi = s.train_psi = false;
  } else {
    s.c1 = c.c1;
    s.c2 = c.c2;
  }
  return s;
}

TrainState TrainState::fresh(const TrainingConfig& c) {
  validate_training_config(c);
  TrainState st{ModelParams::init(c.model, RandomStream(c.seed).derive("init"), c.random_head_init),
                ModelParams::zeros(c.model), ModelParams::zeros(c.model), 0, c.seed};
  return st;
}

std::string to_json_line(const MetricsRecord& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["loss"] = r.loss;
  j["l_main"] = r.l_main;
  j["l_velocity"] = r.l_velocity;
  j["objective"] = r.objective;
  j["lr_backbone"] = r.lr_backbone;
  j["lr_heads"] = r.lr_heads;
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  j["val_nelbo"] = opt(r.val_nelbo);
  j["corr_phi_conf"] = opt(r.corr.phi_confidence);
  j["corr_psi_conf"] = opt(r.corr.psi_confidence);
  j["corr_phi_psi"] = opt(r.corr.phi_psi);
  j["masked_positions"] = r.corr.masked_positions;
  j["wall_seconds"] = r.wall_seconds;
  return j.dump();
}

double scheduled_lr(double base, int warmup, std::uint64_t step) {
  if (warmup <= 0) return base;
  return base * std::min(1.0, static_cast<double>(step + 1) / warmup);
}

std::vector<Sequence> draw_batch(const std::vector<Sequence>& corpus, const TrainingConfig& config,
                                 std::uint64_t step) {
  if (corpus.empty()) throw Error(ErrorCode::InvalidArgument, "training corpus is empty");
  RandomStream r = RandomStream(config.seed).derive("batch", step);
  std::vector<Sequence> out;
  for (int k = 0; k < config.batch / 2; ++k) out.push_back(corpus[r.below(corpus.size())]);
  return out;
}

MetricsRecord train_step(TrainState& state, const TrainingConfig& config, const std::vector<Sequence>& batch) {
  if (batch.size() != static_cast<std::size_t>(config.batch / 2))
    throw Error(ErrorCode::InvalidArgument, "train_step expects B/2 texts");
  const ObjectiveSettings settings = objective_settings(config);
  const RandomStream step_rng = RandomStream(state.seed).derive("step", state.step);
  ModelParams grads = ModelParams::zeros(state.params.config);
  const double n = static_cast<double>(batch.size());
  const double L = static_cast<double>(config.model.length);
  const double weight = 1.0 / (n * L);

  MetricsRecord rec;
  for (std::size_t k = 0; k < batch.size(); ++k) {
    RandomStream text_rng = step_rng.derive("text", k);
    CombinedInputs in;
    in.x = batch[k];
    in.t = text_rng.derive("t").uniform(config.t_min, 1.0);
    in.rng = text_rng;
    CombinedResult res;
    try {
      res = combined_objective(state.params, in, settings, &grads, weight);
    } catch (const Error& e) {
      throw Error(e.code(), "step " + std::to_string(state.step) + ", text " + std::to_string(k) +
                                ", t=" + std::to_string(in.t) + ": " + e.what());
    }
    rec.loss += 0.5 * (res.loss1.total + res.loss2.total) * weight;
    rec.l_main += 0.5 * (res.loss1.l_main + res.loss2.l_main) * weight;
    rec.l_velocity += 0.5 * (res.loss1.l_velocity + res.loss2.l_velocity) * weight;
    rec.objective += res.objective * weight;
  }

  // AdamW with one learning rate for the backbone and one for both heads.
  const std::uint64_t t = state.step + 1;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(t));
  rec.lr_backbone = scheduled_lr(config.lr_backbone, config.warmup, state.step);
  rec.lr_heads = scheduled_lr(config.lr_heads, config.warmup, state.step);
  std::vector<Mat*> p = state.params.tensors(), m = state.m.tensors(), v = state.v.tensors();
  std::vector<const Mat*> g = static_cast<const ModelParams&>(grads).tensors();
  const std::vector<ParamGroup> groups = state.params.groups();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool head = groups[i] != ParamGroup::Backbone;
    if (head && config.mode == TrainMode::Mdlm) continue;
    if (!g[i]->allFinite()) throw Error(ErrorCode::NonFinite, "non-finite gradient in " + state.params.names()[i]);
    const double lr = head ? rec.lr_heads : rec.lr_backbone;
    *m[i] = config.beta1 * *m[i] + (1.0 - config.beta1) * *g[i];
    *v[i] = config.beta2 * *v[i] + (1.0 - config.beta2) * g[i]->cwiseAbs2();
    Mat update = (m[i]->array() / bc1) / ((v[i]->array() / bc2).sqrt() + config.adam_eps);
    if (config.weight_decay > 0.0) update += config.weight_decay * *p[i];
    *p[i] -= lr * update;
  }
  state.step = t;
  rec.step = t;
  return rec;
}

std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw Error(ErrorCode::InvalidArgument, "pearson needs equal-length inputs");
  const std::size_t n = a.size();
  if (n < 2) return std::nullopt;
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  // Relative guard: spreads at roundoff level count as constant.
  auto flat = [n](double s, double m) { return s <= 1e-24 * static_cast<double>(n) * std::max(1.0, m * m); };
  if (flat(saa, ma) || flat(sbb, mb)) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

Correlations correlation_diagnostics(const ModelParams& params, const TrainingConfig& config,
                                     const std::vector<Sequence>& batch, RandomStream rng) {
  const ObjectiveSettings settings = objective_settings(config);
  std::vector<double> a_phi, a_psi, conf;
  for (std::size_t k = 0; k < batch.size(); ++k) {
    RandomStream r = rng.derive("text", k);
    CombinedInputs in;
    in.x = batch[k];
    in.t = r.derive("t").uniform(config.t_min, 1.0);
    in.rng = r;
    CombinedResult res = combined_objective(params, in, settings);
    for (const LossBreakdown* lb : {&res.loss1, &res.loss2})
      for (const TokenTerm& tt : lb->per_token) {
        // Velocities at a shared t are exponents over t; compare exponents so
        // texts drawn at different t are on one scale.
        a_phi.push_back(tt.A * lb->t);
        a_psi.push_back(tt.A_hat * lb->t);
        conf.push_back(tt.confidence);
      }
  }
  Correlations c;
  c.masked_positions = conf.size();
  c.phi_confidence = pearson(a_phi, conf);
  c.psi_confidence = pearson(a_psi, conf);
  c.phi_psi = pearson(a_phi, a_psi);
  return c;
}

EvalReport evaluate_denoiser(const Denoiser& denoiser, const SchedulerSpec& fwd, const SchedulerSpec& rev,
                             const std::vector<Sequence>& texts, std::size_t n_mc, RandomStream rng, double t_min) {
  if (texts.empty()) throw Error(ErrorCode::InvalidArgument, "evaluation set is empty");
  EvalReport rep;
  double tokens = 0.0, var_sum = 0.0;
  for (std::size_t k = 0; k < texts.size(); ++k) {
    Estimate e = nelbo_mc(texts[k], denoiser, fwd, rev, n_mc, rng.derive("text", k), t_min);
    rep.nelbo_per_token += e.mean;
    rep.l_main += e.l_main;
    rep.l_velocity += e.l_velocity;
    var_sum += e.stderr_ * e.stderr_;
    tokens += static_cast<double>(texts[k].length());
    rep.samples += e.samples;
  }
  rep.texts = texts.size();
  rep.nelbo_per_token /= tokens;
  rep.l_main /= tokens;
  rep.l_velocity /= tokens;
  rep.stderr_per_token = std::sqrt(var_sum) / tokens;
  rep.perplexity_bound = std::exp(rep.nelbo_per_token);
  return rep;
}

std::pair<SchedulerSpec, SchedulerSpec> trained_schedulers(std::shared_ptr<const ModelParams> params,
                                                           const TrainingConfig& config) {
  if (config.mode == TrainMode::Mdlm) return {Linear{}, Linear{}};
  return {LearnedHead(std::make_shared<NeuralHead>(params, HeadRole::Forward), HeadRole::Forward, config.c1,
                      config.c2),
          LearnedHead(std::make_shared<NeuralHead>(params, HeadRole::Reverse), HeadRole::Reverse, config.c1,
                      config.c2)};
}

EvalReport evaluate(const ModelParams& params, const TrainingConfig& config, const std::vector<Sequence>& texts,
                    std::size_t n_mc, RandomStream rng) {
  auto shared = std::make_shared<const ModelParams>(params);
  NeuralDenoiser denoiser(shared);
  auto [fwd, rev] = trained_schedulers(shared, config);
  return evaluate_denoiser(denoiser, fwd, rev, texts, n_mc, rng, config.t_min);
}

namespace {

void write_atomically(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot open '" + tmp + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::Io, "write failed for '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::Io, "cannot move '" + tmp + "' to '" + path + "': " + ec.message());
}

}  // namespace

TrainResult train(const TrainingConfig& config, const std::vector<Sequence>& corpus,
                  const std::vector<Sequence>& validation, const TrainOptions& options,
                  std::optional<TrainState> start) {
  validate_training_config(config);
  for (const Sequence& s : corpus)
    if (s.length() != static_cast<std::size_t>(config.model.length))
      throw Error(ErrorCode::InvalidArgument, "corpus sequence length differs from the configured L");
  TrainResult result{start ? std::move(*start) : TrainState::fresh(config), {}};
  TrainState& st = result.state;

  std::ofstream metrics;
  if (!options.metrics_path.empty()) {
    metrics.open(options.metrics_path, st.step == 0 ? std::ios::trunc : std::ios::app);
    if (!metrics) throw Error(ErrorCode::Io, "cannot open metrics file '" + options.metrics_path + "'");
  }
  const CheckpointMeta meta{config, options.symbols};
  const auto t0 = std::chrono::steady_clock::now();
  const auto steps = static_cast<std::uint64_t>(config.steps);

  while (st.step < steps) {
    MetricsRecord rec = train_step(st, config, draw_batch(corpus, config, st.step));
    const bool last = st.step == steps;
    const bool eval_now = !validation.empty() && (last || (config.eval_every > 0 && st.step % config.eval_every == 0));
    if (eval_now) {
      const RandomStream er(config.eval_seed);
      rec.val_nelbo = evaluate(st.params, config, validation, static_cast<std::size_t>(config.eval_samples), er)
                          .nelbo_per_token;
      rec.corr = correlation_diagnostics(st.params, config, validation, er.derive("corr"));
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (metrics.is_open() && (eval_now || last || st.step % static_cast<std::uint64_t>(config.log_every) == 0)) {
      metrics << to_json_line(rec) << '\n';
      metrics.flush();
      if (!metrics) throw Error(ErrorCode::Io, "write failed for metrics file '" + options.metrics_path + "'");
    }
    if (options.on_metrics) options.on_metrics(rec);
    result.metrics.push_back(rec);
    if (!options.checkpoint_path.empty() &&
        (last || (config.checkpoint_every > 0 && st.step % config.checkpoint_every == 0)))
      write_atomically(options.checkpoint_path, serialize_checkpoint(st, meta));
  }
  if (!options.checkpoint_path.empty() && steps == 0) write_atomically(options.checkpoint_path, serialize_checkpoint(st, meta));
  return result;
}

void save_checkpoint(const std::string& path, const TrainState& state, const CheckpointMeta& meta) {
  write_atomically(path, serialize_checkpoint(state, meta));
}

}  // namespace oemdm
