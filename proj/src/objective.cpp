#include "oemdm/objective.hpp"

#include <cmath>
#include <string>

namespace oemdm {

using ad::Tape;
using ad::Var;

double velocity_term(double A, double A_hat) {
  if (!(A > 0.0) || !(A_hat > 0.0)) throw Error(ErrorCode::InvalidArgument, "velocities must be positive");
  // Â * phi(A/Â) with phi(r) = r log r - r + 1 >= 0.
  const double d = (A - A_hat) / A_hat;
  double phi;
  if (std::abs(d) < 1e-4) {
    const double d2 = d * d;
    phi = d2 / 2.0 - d2 * d / 6.0 + d2 * d2 / 12.0 - d2 * d2 * d / 20.0;
  } else {
    phi = (1.0 + d) * std::log1p(d) - d;
  }
  return A_hat * std::max(phi, 0.0);
}

LossTerms loss_terms(double A, double A_hat, double confidence) {
  if (!(confidence > 0.0))
    throw Error(ErrorCode::ZeroConfidence, "denoiser assigns zero probability to the clean token (infinite loss)");
  if (confidence > 1.0 + kSimplexTolerance) throw Error(ErrorCode::InvalidArgument, "confidence exceeds 1");
  return {-A * std::log(std::min(confidence, 1.0)), velocity_term(A, A_hat)};
}

LossBreakdown loss_breakdown(const Sequence& x, const MaskedSequence& z, const Rows& denoised, const Schedule& fwd,
                             const Schedule& rev, double t) {
  LossBreakdown lb;
  lb.t = t;
  for (std::size_t i = 0; i < x.length(); ++i) {
    if (!z.is_masked(i)) continue;
    TokenTerm tt;
    tt.position = i;
    tt.A = fwd[i].velocity(t);
    tt.A_hat = rev[i].velocity(t);
    tt.confidence = denoised(static_cast<Eigen::Index>(i), x[i]);
    LossTerms lt = loss_terms(tt.A, tt.A_hat, tt.confidence);
    tt.main = lt.main;
    tt.velocity = lt.velocity;
    lb.l_main += lt.main;
    lb.l_velocity += lt.velocity;
    lb.per_token.push_back(tt);
  }
  lb.total = lb.l_main + lb.l_velocity;
  return lb;
}

Estimate nelbo_mc(const Sequence& x, const Denoiser& denoiser, const SchedulerSpec& fwd, const SchedulerSpec& rev,
                  std::size_t n, RandomStream rng, double t_min) {
  if (n == 0) throw Error(ErrorCode::InvalidArgument, "need at least one sample");
  const Vocabulary vocab(denoiser.vocab_size());
  const std::size_t L = x.length();
  const Schedule fwd_sched = instantiate(fwd, L, x.tokens);  // t-independent
  const double span = 1.0 - t_min;
  double sum = 0.0, sum_sq = 0.0, main = 0.0, vel = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    RandomStream r = rng.derive("nelbo", k);
    const double t = r.derive("t").uniform(t_min, 1.0);
    MaskedSequence z = forward_sample(x, vocab, fwd_sched, t, r.derive("z"));
    double value = 0.0;
    if (z.masked_count() > 0) {
      LossBreakdown lb = loss_breakdown(x, z, denoiser.denoise(z), fwd_sched, instantiate(rev, L, z.tokens), t);
      value = lb.total;
      main += lb.l_main;
      vel += lb.l_velocity;
    }
    sum += value;
    sum_sq += value * value;
  }
  const double dn = static_cast<double>(n);
  Estimate e;
  e.samples = n;
  const double mean = sum / dn;
  const double var = n > 1 ? std::max(0.0, (sum_sq - dn * mean * mean) / (dn - 1.0)) : 0.0;
  e.mean = span * mean;
  e.stderr_ = span * std::sqrt(var / dn);
  e.l_main = span * main / dn;
  e.l_velocity = span * vel / dn;
  return e;
}

namespace {

double xlogx_over(double q, double p) {
  if (q <= 0.0) return 0.0;
  if (p <= 0.0) throw Error(ErrorCode::ZeroConfidence, "reverse kernel gives zero mass where the posterior does not");
  return q * std::log(q / p);
}

}  // namespace

double two_atom_kl(const PositionLaw& fwd, const PositionLaw& rev, double confidence, double s, double t) {
  const double q_den = fwd.one_minus_alpha(t);
  const double q_unmask = (fwd.one_minus_alpha(t) - fwd.one_minus_alpha(s)) / q_den;
  const double q_stay = fwd.one_minus_alpha(s) / q_den;
  const double p_den = rev.one_minus_alpha(t);
  const double p_unmask = (rev.one_minus_alpha(t) - rev.one_minus_alpha(s)) / p_den * confidence;
  const double p_stay = rev.one_minus_alpha(s) / p_den;
  return xlogx_over(q_unmask, p_unmask) + xlogx_over(q_stay, p_stay);
}

double nelbo_discrete_exact(const Sequence& x, const Denoiser& denoiser, const SchedulerSpec& fwd,
                            const SchedulerSpec& rev, const TimeGrid& grid) {
  const Vocabulary vocab(denoiser.vocab_size());
  validate_sequence(x, vocab);
  const std::size_t L = x.length();
  const std::vector<MaskedSequence> states = enumerate_masked_set(x, vocab);
  const Schedule fwd_sched = instantiate(fwd, L, x.tokens);
  // Denoiser rows and reverse schedules depend on z only.
  std::vector<Rows> rows(states.size());
  std::vector<Schedule> rev_sched(states.size());
  for (std::size_t k = 0; k < states.size(); ++k) {
    if (states[k].masked_count() == 0) continue;
    rows[k] = denoiser.denoise(states[k]);
    rev_sched[k] = instantiate(rev, L, states[k].tokens);
  }
  auto confidence = [&](std::size_t k, std::size_t i) { return rows[k](static_cast<Eigen::Index>(i), x[i]); };

  // Reconstruction at t(0); the prior term is zero because both chains start all-masked.
  double total = 0.0;
  const double t0 = grid.t_of(0);
  for (std::size_t k = 0; k < states.size(); ++k) {
    if (states[k].masked_count() == 0) continue;
    const double w = std::exp(forward_logprob(states[k], x, fwd_sched, t0));
    if (w == 0.0) continue;
    double nll = 0.0;
    for (std::size_t i = 0; i < L; ++i) {
      if (!states[k].is_masked(i)) continue;
      const double c = confidence(k, i);
      if (!(c > 0.0)) throw Error(ErrorCode::ZeroConfidence, "reconstruction assigns zero probability to x");
      nll -= std::log(c);
    }
    total += w * nll;
  }
  for (int tau = 1; tau <= grid.steps(); ++tau) {
    const double s = grid.s_of(tau), t = grid.t_of(tau);
    for (std::size_t k = 0; k < states.size(); ++k) {
      if (states[k].masked_count() == 0) continue;
      const double w = std::exp(forward_logprob(states[k], x, fwd_sched, t));
      if (w == 0.0) continue;
      double kl = 0.0;
      for (std::size_t i = 0; i < L; ++i)
        if (states[k].is_masked(i)) kl += two_atom_kl(fwd_sched[i], rev_sched[k][i], confidence(k, i), s, t);
      total += w * kl;
    }
  }
  return total;
}

double rloo_loss(double loss_z1, double loss_z2, double logq_z1, double logq_z2) {
  return 0.5 * (logq_z1 - logq_z2) * (loss_z1 - loss_z2);
}

namespace {

Mat mask_column(const MaskedSequence& z, bool masked) {
  Mat m(static_cast<Eigen::Index>(z.length()), 1);
  for (std::size_t i = 0; i < z.length(); ++i) m(static_cast<Eigen::Index>(i), 0) = z.is_masked(i) == masked ? 1.0 : 0.0;
  return m;
}

Var exponents(Tape& tape, Var raw, double c1, double c2) {
  return ad::add_scalar(tape, ad::scale(tape, ad::norm_sig(tape, raw), c2), c1);
}

std::vector<double> column(const Mat& m) { return std::vector<double>(m.data(), m.data() + m.size()); }

void add_leaf_grads(const Tape& tape, const ModelT<Var>& vars, ModelParams& grads, double weight) {
  std::vector<const Var*> vs;
  ModelT<Var>::each(vars, [&](const std::string&, ParamGroup, const Var& v) { vs.push_back(&v); });
  std::vector<Mat*> gs = grads.tensors();
  for (std::size_t k = 0; k < vs.size(); ++k)
    if (tape.needs_grad(*vs[k])) *gs[k] += weight * tape.grad(*vs[k]);
}

}  // namespace

CombinedResult combined_objective(const ModelParams& params, const CombinedInputs& in, const ObjectiveSettings& settings,
                                  ModelParams* grads, double weight, FrozenValues* frozen) {
  if (!(settings.c2 >= 0.0) || !(settings.c1 > settings.c2))
    throw Error(ErrorCode::InvalidArgument, "objective requires c1 > c2 >= 0");
  const double t = in.t;
  if (!(t > 0.0 && t < 1.0)) throw Error(ErrorCode::InvalidArgument, "training time must lie in (0,1)");
  const ModelConfig& cfg = params.config;
  const Vocabulary vocab(cfg.vocab_size);
  const bool use_frozen = frozen && frozen->set;

  Tape tape;
  const bool want = grads != nullptr;
  ModelT<Var> vars = bind(tape, params, want && settings.train_backbone, want && settings.train_phi,
                          want && settings.train_psi);
  Dropout drop{settings.dropout, in.rng.derive("dropout"), 0};
  Dropout* dp = settings.dropout > 0.0 ? &drop : nullptr;

  CombinedResult res;
  // Forward-schedule exponents from detached features of the clean text.
  Mat fx;
  {
    Tape::Scope scope(tape, "x");
    fx = use_frozen ? frozen->features_x : tape.value(backbone_pass(tape, vars, cfg, in.x.tokens, dp).features);
  }
  Var e_phi;
  {
    Tape::Scope scope(tape, "phi");
    e_phi = exponents(tape, head_pass(tape, vars.phi, cfg, tape.constant(fx, "features_x"), dp), settings.c1, settings.c2);
  }
  res.exponent_phi = column(tape.value(e_phi));
  std::vector<PositionLaw> laws(in.x.length());
  for (std::size_t i = 0; i < laws.size(); ++i) laws[i].exponent = res.exponent_phi[i];
  const Schedule fwd_sched(laws);

  res.z1 = in.z1 ? *in.z1 : forward_sample(in.x, vocab, fwd_sched, t, in.rng.derive("corrupt", 1));
  res.z2 = in.z2 ? *in.z2 : forward_sample(in.x, vocab, fwd_sched, t, in.rng.derive("corrupt", 2));

  const std::vector<int> targets(in.x.tokens.begin(), in.x.tokens.end());
  const double log_t = std::log(t);
  Var log_e_phi = ad::log(tape, e_phi);
  Var scaled = ad::scale(tape, e_phi, log_t);  // e * log t = log(1 - alpha)

  auto one_corruption = [&](const MaskedSequence& z, int idx, Mat* feat_slot, LossBreakdown& lb, double& logq) {
    Tape::Scope scope(tape, "z" + std::to_string(idx));
    BackbonePass pass = backbone_pass(tape, vars, cfg, z.tokens, dp);
    Mat fz = use_frozen ? *feat_slot : tape.value(pass.features);
    if (frozen && !use_frozen) *feat_slot = fz;
    Var e_psi = exponents(tape, head_pass(tape, vars.psi, cfg, tape.constant(fz, "features_z"), dp), settings.c1,
                          settings.c2);
    Var log_conf = ad::pick(tape, ad::log_softmax_rows(tape, pass.logits), targets);
    Var masked = tape.constant(mask_column(z, true), "masked");
    Var kept = tape.constant(mask_column(z, false), "kept");
    // (1/t) sum_masked [ -e_phi log c + e_phi (log e_phi - log e_psi) - (e_phi - e_psi) ]
    Var term = ad::sub(tape, ad::hadamard(tape, e_phi, ad::sub(tape, log_e_phi, ad::log(tape, e_psi))),
                       ad::hadamard(tape, e_phi, log_conf));
    term = ad::sub(tape, term, ad::sub(tape, e_phi, e_psi));
    Var loss = ad::scale(tape, ad::dot(tape, masked, term), 1.0 / t);
    Var lq = ad::add(tape, ad::dot(tape, masked, scaled), ad::dot(tape, kept, ad::log_one_minus_exp(tape, scaled)));

    // Stable per-token breakdown for reporting.
    const Mat& ep = tape.value(e_phi);
    const Mat& es = tape.value(e_psi);
    const Mat& lc = tape.value(log_conf);
    lb.t = t;
    for (std::size_t i = 0; i < z.length(); ++i) {
      if (!z.is_masked(i)) continue;
      const auto r = static_cast<Eigen::Index>(i);
      TokenTerm tt;
      tt.position = i;
      tt.A = ep(r, 0) / t;
      tt.A_hat = es(r, 0) / t;
      tt.confidence = std::exp(lc(r, 0));
      tt.main = -tt.A * lc(r, 0);
      tt.velocity = velocity_term(tt.A, tt.A_hat);
      lb.l_main += tt.main;
      lb.l_velocity += tt.velocity;
      lb.per_token.push_back(tt);
    }
    lb.total = lb.l_main + lb.l_velocity;
    logq = tape.scalar(lq);
    return std::pair{loss, lq};
  };

  Mat dummy1, dummy2;
  auto [loss1, lq1] = one_corruption(res.z1, 1, frozen ? &frozen->features_z1 : &dummy1, res.loss1, res.logq1);
  auto [loss2, lq2] = one_corruption(res.z2, 2, frozen ? &frozen->features_z2 : &dummy2, res.loss2, res.logq2);

  const double l1 = use_frozen ? frozen->loss_z1 : tape.scalar(loss1);
  const double l2 = use_frozen ? frozen->loss_z2 : tape.scalar(loss2);
  if (frozen && !use_frozen) {
    frozen->features_x = fx;
    frozen->loss_z1 = l1;
    frozen->loss_z2 = l2;
    frozen->set = true;
  }
  Var rloo = ad::scale(tape, ad::sub(tape, lq1, lq2), 0.5 * (l1 - l2));
  Var total = ad::add(tape, ad::scale(tape, ad::add(tape, loss1, loss2), 0.5), rloo);
  res.rloo = tape.scalar(rloo);
  res.objective = tape.scalar(total);
  if (!std::isfinite(res.objective)) throw Error(ErrorCode::NonFinite, "objective is not finite");

  if (grads) {
    tape.backward(total);
    add_leaf_grads(tape, vars, *grads, weight);
  }
  return res;
}

double phi_logprob(const ModelParams& params, const Sequence& x, const MaskedSequence& z, double t, double c1,
                   double c2, ModelParams* grads) {
  if (!in_masked_set(z, x)) throw Error(ErrorCode::Membership, "masked sequence is not a corruption of x");
  Tape tape;
  ModelT<Var> vars = bind(tape, params, false, grads != nullptr, false);
  Mat fx = tape.value(backbone_pass(tape, vars, params.config, x.tokens, nullptr).features);
  Var e = exponents(tape, head_pass(tape, vars.phi, params.config, tape.constant(fx, "features_x"), nullptr), c1, c2);
  Var scaled = ad::scale(tape, e, std::log(t));
  Var lq = ad::add(tape, ad::dot(tape, tape.constant(mask_column(z, true), "masked"), scaled),
                   ad::dot(tape, tape.constant(mask_column(z, false), "kept"), ad::log_one_minus_exp(tape, scaled)));
  if (grads) {
    tape.backward(lq);
    add_leaf_grads(tape, vars, *grads, 1.0);
  }
  return tape.scalar(lq);
}

double head_probe(const ModelParams& params, const Sequence& x, ModelParams* grads, const Mat* frozen_features) {
  Tape tape;
  ModelT<Var> vars = bind(tape, params, grads != nullptr, grads != nullptr, grads != nullptr);
  Mat f = frozen_features ? *frozen_features : tape.value(backbone_pass(tape, vars, params.config, x.tokens, nullptr).features);
  Var fc = tape.constant(f, "features");
  Var total = ad::add(tape, ad::sum(tape, head_pass(tape, vars.phi, params.config, fc, nullptr)),
                      ad::sum(tape, head_pass(tape, vars.psi, params.config, fc, nullptr)));
  if (grads) {
    tape.backward(total);
    add_leaf_grads(tape, vars, *grads, 1.0);
  }
  return tape.scalar(total);
}

}  // namespace oemdm
