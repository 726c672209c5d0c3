#include "oemdm/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace oemdm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

// Pairwise (tree) log-sum-exp.
double pairwise_logsumexp(std::vector<double> v) {
  if (v.empty()) return kNegInf;
  while (v.size() > 1) {
    std::size_t half = 0;
    for (std::size_t i = 0; i + 1 < v.size(); i += 2) v[half++] = log_add(v[i], v[i + 1]);
    if (v.size() % 2 == 1) v[half++] = v.back();
    v.resize(half);
  }
  return v[0];
}

// Per-masked-set cache of denoiser rows and reverse schedule for one endpoint x.
struct StateCache {
  const Sequence& x;
  const Vocabulary vocab;
  const Denoiser& denoiser;
  const SchedulerSpec& rev;
  std::map<std::uint64_t, std::pair<Rows, Schedule>> entries;

  const std::pair<Rows, Schedule>& at(std::uint64_t bits) {
    auto it = entries.find(bits);
    if (it != entries.end()) return it->second;
    MaskedSequence z = masked_by_bits(x, vocab, bits);
    auto& e = entries[bits];
    e.first = denoiser.denoise(z);
    e.second = instantiate(rev, x.length(), z.tokens);
    return e;
  }
};

double conf(const Rows& rows, std::size_t i, Token tok) { return rows(static_cast<Eigen::Index>(i), tok); }

}  // namespace

double exact_likelihood(const Sequence& x, const Denoiser& denoiser, const SchedulerSpec& rev, const TimeGrid& grid) {
  const Vocabulary vocab(denoiser.vocab_size());
  validate_sequence(x, vocab);
  const std::size_t L = x.length();
  if (L > kMaskedSetMaxLength) throw Error(ErrorCode::SizeGuard, "exact likelihood refused: L too large");
  const std::uint64_t full = (std::uint64_t{1} << L) - 1;
  StateCache cache{x, vocab, denoiser, rev, {}};

  std::vector<double> prob(full + 1, 0.0), next(full + 1, 0.0);
  prob[full] = 1.0;
  std::vector<double> stay(L), reveal(L);
  for (int tau = grid.steps(); tau >= 1; --tau) {
    const double s = grid.s_of(tau), t = grid.t_of(tau);
    std::fill(next.begin(), next.end(), 0.0);
    for (std::uint64_t m = 0; m <= full; ++m) {
      if (prob[m] == 0.0) continue;
      if (m == 0) {
        next[0] += prob[0];
        continue;
      }
      const auto& [rows, sched] = cache.at(m);
      for (std::size_t i = 0; i < L; ++i) {
        if (!(m >> i & 1U)) continue;
        const PositionLaw& law = sched[i];
        const double den = law.one_minus_alpha(t);
        stay[i] = law.one_minus_alpha(s) / den;
        reveal[i] = (den - law.one_minus_alpha(s)) / den * conf(rows, i, x[i]);
      }
      // Every sub-mask of m: positions in `sub` stay masked, the rest reveal x.
      for (std::uint64_t sub = m;; sub = (sub - 1) & m) {
        double p = prob[m];
        for (std::size_t i = 0; i < L; ++i)
          if (m >> i & 1U) p *= (sub >> i & 1U) ? stay[i] : reveal[i];
        next[sub] += p;
        if (sub == 0) break;
      }
    }
    std::swap(prob, next);
  }
  double total = prob[0];
  for (std::uint64_t m = 1; m <= full; ++m) {
    if (prob[m] == 0.0) continue;
    const Rows& rows = cache.at(m).first;
    double p = prob[m];
    for (std::size_t i = 0; i < L; ++i)
      if (m >> i & 1U) p *= conf(rows, i, x[i]);
    total += p;
  }
  return total;
}

double exact_likelihood_by_paths(const Sequence& x, const Denoiser& denoiser, const SchedulerSpec& rev,
                                 const TimeGrid& grid) {
  const Vocabulary vocab(denoiser.vocab_size());
  validate_sequence(x, vocab);
  const std::size_t L = x.length();
  StateCache cache{x, vocab, denoiser, rev, {}};
  auto bits_of = [&](const MaskedSequence& z) {
    std::uint64_t b = 0;
    for (std::size_t i = 0; i < L; ++i)
      if (z.is_masked(i)) b |= std::uint64_t{1} << i;
    return b;
  };
  std::vector<double> logw;
  for (const Trajectory& traj : enumerate_absorbing_trajectories(x, vocab, grid)) {
    double lw = 0.0;
    for (int tau = grid.steps(); tau >= 1 && lw != kNegInf; --tau) {
      const MaskedSequence& zt = traj.states[tau];
      const MaskedSequence& zs = traj.states[tau - 1];
      const double s = grid.s_of(tau), t = grid.t_of(tau);
      const auto& [rows, sched] = cache.at(bits_of(zt));
      for (std::size_t i = 0; i < L; ++i) {
        if (!zt.is_masked(i)) continue;
        const PositionLaw& law = sched[i];
        const double den = law.one_minus_alpha(t);
        const double p = zs.is_masked(i) ? law.one_minus_alpha(s) / den
                                         : (den - law.one_minus_alpha(s)) / den * conf(rows, i, x[i]);
        if (p <= 0.0) {
          lw = kNegInf;
          break;
        }
        lw += std::log(p);
      }
    }
    if (lw == kNegInf) continue;
    const MaskedSequence& z0 = traj.states[0];
    if (z0.masked_count() > 0) {
      const Rows& rows = cache.at(bits_of(z0)).first;
      for (std::size_t i = 0; i < L && lw != kNegInf; ++i) {
        if (!z0.is_masked(i)) continue;
        const double c = conf(rows, i, x[i]);
        lw = c > 0.0 ? lw + std::log(c) : kNegInf;
      }
    }
    if (lw != kNegInf) logw.push_back(lw);
  }
  return std::exp(pairwise_logsumexp(std::move(logw)));
}

double arm_factorized_nll(const Denoiser& denoiser, const Sequence& x, const std::vector<int>& order) {
  const Vocabulary vocab(denoiser.vocab_size());
  validate_sequence(x, vocab);
  const std::size_t L = x.length();
  std::vector<int> ord = order;
  if (ord.empty())
    for (std::size_t i = 0; i < L; ++i) ord.push_back(static_cast<int>(i));
  if (ord.size() != L) throw Error(ErrorCode::InvalidArgument, "order must cover every position");
  MaskedSequence y = MaskedSequence::all_masked(L, vocab);
  double nll = 0.0;
  for (int pos : ord) {
    const double c = conf(denoiser.denoise(y), static_cast<std::size_t>(pos), x[pos]);
    if (!(c > 0.0)) throw Error(ErrorCode::ZeroConfidence, "autoregressive factor has zero probability (infinite NLL)");
    nll -= std::log(c);
    y.tokens[pos] = x[pos];
  }
  return nll;
}

double loglog_slope(const std::vector<double>& xs, const std::vector<double>& ys) {
  const std::size_t n = xs.size();
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += std::log(xs[i]);
    my += std::log(ys[i]);
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = std::log(xs[i]) - mx;
    sxy += dx * (std::log(ys[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

PropositionReport check_arm_limit(const Denoiser& denoiser, const Sequence& x, const std::vector<double>& epsilons,
                                  const TimeGrid& grid, const std::vector<int>& order) {
  const int L = static_cast<int>(x.length());
  // Each window [1 - (k+1)/L, 1 - k/L] must contain at least four grid times.
  for (int k = 0; k < L; ++k) {
    const double lo = 1.0 - static_cast<double>(k + 1) / L, hi = 1.0 - static_cast<double>(k) / L;
    int count = 0;
    for (int tau = 0; tau <= grid.steps(); ++tau) count += grid.t_of(tau) >= lo && grid.t_of(tau) <= hi;
    if (count < 4) throw Error(ErrorCode::InvalidArgument, "grid too coarse: a window holds fewer than 4 grid times");
  }
  PropositionReport rep;
  rep.name = order.empty() ? "arm_limit" : "arm_limit_permuted";
  const double target = std::exp(-arm_factorized_nll(denoiser, x, order));
  for (double eps : epsilons) {
    ArmEpsilon spec{L, eps, order};
    const double p = exact_likelihood(x, denoiser, spec, grid);
    rep.epsilons.push_back(eps);
    rep.deviations.push_back(std::abs(p - target));
    ++rep.instances;
  }
  for (std::size_t k = 1; k < rep.deviations.size(); ++k)
    if (rep.deviations[k] > rep.deviations[k - 1]) rep.monotone = false;
  bool positive = std::all_of(rep.deviations.begin(), rep.deviations.end(), [](double d) { return d > 0.0; });
  rep.slope = positive ? loglog_slope(rep.epsilons, rep.deviations) : 0.0;
  rep.max_deviation = *std::max_element(rep.deviations.begin(), rep.deviations.end());
  rep.tolerance = 0.3;
  rep.pass = positive && rep.monotone && std::abs(rep.slope - 1.0) <= rep.tolerance;
  return rep;
}

double mdlm_loss_reference(const Sequence& x, const MaskedSequence& z, const Rows& denoised, double t) {
  // alpha = 1 - t: weight alpha'/(1 - alpha) = -1/t on log p(x_i).
  double loss = 0.0;
  for (std::size_t i = 0; i < x.length(); ++i)
    if (z.is_masked(i)) loss += (-1.0 / t) * std::log(denoised(static_cast<Eigen::Index>(i), x[i]));
  return loss;
}

PropositionReport check_mdlm_reduction(const Denoiser& denoiser, const Sequence& x, std::size_t n, RandomStream rng,
                                       const SchedulerSpec& matched) {
  PropositionReport rep;
  rep.name = "mdlm_reduction";
  rep.tolerance = 1e-12;
  const Vocabulary vocab(denoiser.vocab_size());
  const Schedule sched = instantiate(matched, x.length(), x.tokens);
  const bool linear = std::holds_alternative<Linear>(matched);
  double worst_velocity = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    RandomStream r = rng.derive("sample", k);
    const double t = r.derive("t").uniform(kDefaultTMin, 1.0);
    MaskedSequence z = forward_sample(x, vocab, sched, t, r.derive("z"));
    const Rows rows = denoiser.denoise(z);
    LossBreakdown lb = loss_breakdown(x, z, rows, sched, sched, t);
    ++rep.instances;
    worst_velocity = std::max(worst_velocity, std::abs(lb.l_velocity));
    if (linear) {
      const double ref = mdlm_loss_reference(x, z, rows, t);
      rep.max_deviation = std::max(rep.max_deviation, std::abs(lb.l_main - ref) / std::max(1.0, std::abs(ref)));
    }
  }
  rep.detail = "max |l_velocity| = " + std::to_string(worst_velocity) + "; l_main deviation is relative to max(1,|ref|)";
  rep.pass = worst_velocity == 0.0 && rep.max_deviation <= rep.tolerance;
  return rep;
}

GenMd4Trial genmd4_integrands(const std::vector<double>& vel, const std::vector<double>& row, int x_token) {
  const std::size_t V = vel.size();
  if (row.size() != V + 1) throw Error(ErrorCode::InvalidArgument, "row must have V+1 entries");
  for (double a : vel)
    if (!(a > 0.0)) throw Error(ErrorCode::InvalidArgument, "vocabulary velocities must be positive");
  double a_hat = 0.0;
  for (std::size_t v = 0; v < V; ++v) a_hat += vel[v] * row[v];
  const double A = vel[static_cast<std::size_t>(x_token)];
  const double c = row[static_cast<std::size_t>(x_token)];
  GenMd4Trial out;
  // <-A_vec, (log c) e_x + e_x - row> over real tokens.
  out.genmd4 = -A * std::log(c) - A + a_hat;
  // Reweighted row: A_vec * row / <A_vec, row>; its mask entry scales row[V].
  const double c_tilde = A * c / a_hat;
  out.tilde_mask = row[V] / a_hat;
  LossTerms lt = loss_terms(A, a_hat, c_tilde);
  out.oemdm = lt.main + lt.velocity;
  return out;
}

PropositionReport check_genmd4_equivalence(const std::vector<double>& vocab_velocities,
                                           const std::vector<double>& denoiser_row, int x_token, double t) {
  if (!(t > 0.0 && t <= 1.0)) throw Error(ErrorCode::InvalidArgument, "t must lie in (0,1]");
  std::vector<double> vel = vocab_velocities;
  for (double& a : vel) {
    if (!(a > 0.0)) throw Error(ErrorCode::InvalidArgument, "zero vocabulary velocity");
    a /= t;  // exponents -> velocities
  }
  GenMd4Trial tr = genmd4_integrands(vel, denoiser_row, x_token);
  PropositionReport rep;
  rep.name = "genmd4_equivalence";
  rep.instances = 1;
  rep.tolerance = 1e-12;
  // Both sides are O(A |log c|); compare relative to max(1, |value|).
  rep.max_deviation = std::abs(tr.genmd4 - tr.oemdm) / std::max(1.0, std::abs(tr.genmd4));
  rep.pass = rep.max_deviation <= rep.tolerance && (denoiser_row.back() != 0.0 || tr.tilde_mask == 0.0);
  return rep;
}

PropositionReport check_rloo_unbiased(const Sequence& x, const ModelParams& params, double t, std::size_t n_pairs,
                                      RandomStream rng, const RlooCheckOptions& opts) {
  const Vocabulary vocab(params.config.vocab_size);
  const std::vector<MaskedSequence> states = enumerate_masked_set(x, vocab);
  ObjectiveSettings settings;
  settings.c1 = opts.c1;
  settings.c2 = opts.c2;

  // Per-state detached loss, q weight and full phi score.
  std::vector<double> loss(states.size()), q(states.size());
  std::vector<std::vector<double>> full(states.size());
  std::vector<std::pair<std::size_t, Eigen::Index>> all;
  const std::vector<ParamGroup> groups = params.groups();
  for (std::size_t k = 0; k < states.size(); ++k) {
    CombinedInputs in;
    in.x = x;
    in.t = t;
    in.z1 = states[k];
    in.z2 = states[k];
    loss[k] = opts.constant_loss ? 1.0 : combined_objective(params, in, settings).loss1.total;
    ModelParams g = ModelParams::zeros(params.config);
    q[k] = std::exp(phi_logprob(params, x, states[k], t, opts.c1, opts.c2, &g));
    const std::vector<const Mat*> gt = static_cast<const ModelParams&>(g).tensors();
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (groups[i] != ParamGroup::Phi) continue;
      for (Eigen::Index j = 0; j < gt[i]->size(); ++j) {
        if (k == 0) all.emplace_back(i, j);
        full[k].push_back(gt[i]->data()[j]);
      }
    }
  }

  // Coordinates under test. Parameters the head output cannot depend on
  // (attention key biases, which softmax ignores) have scores at roundoff
  // level and no signal to test; they are not eligible.
  double largest = 0.0;
  for (const auto& f : full)
    for (double v : f) largest = std::max(largest, std::abs(v));
  std::vector<std::size_t> eligible;
  for (std::size_t a = 0; a < all.size(); ++a) {
    double m = 0.0;
    for (const auto& f : full) m = std::max(m, std::abs(f[a]));
    if (m > 1e-10 * largest) eligible.push_back(a);
  }
  RandomStream pick = rng.derive("coords");
  const std::size_t C = std::min(opts.coordinates, eligible.size());
  for (std::size_t i = 0; i < C; ++i) std::swap(eligible[i], eligible[i + pick.below(eligible.size() - i)]);
  std::vector<std::vector<double>> score(states.size(), std::vector<double>(C));
  for (std::size_t k = 0; k < states.size(); ++k)
    for (std::size_t c = 0; c < C; ++c) score[k][c] = full[k][eligible[c]];

  std::vector<double> exact(C, 0.0), magnitude(C, 0.0);
  for (std::size_t k = 0; k < states.size(); ++k)
    for (std::size_t c = 0; c < C; ++c) {
      exact[c] += q[k] * score[k][c] * loss[k];
      magnitude[c] += q[k] * std::abs(score[k][c] * loss[k]);
    }

  // Pairs are drawn with the library's forward sampler under the phi schedule.
  const HeadVelocity hv = head_velocity(params, HeadRole::Forward, extract_features(params, x.tokens), opts.c1, opts.c2, t);
  std::vector<PositionLaw> laws(x.length());
  for (std::size_t i = 0; i < laws.size(); ++i) laws[i].exponent = hv.exponent[i];
  const Schedule phi_sched(std::move(laws));
  std::map<std::vector<Token>, std::size_t> index;
  for (std::size_t k = 0; k < states.size(); ++k) index[states[k].tokens] = k;
  auto draw = [&](RandomStream r) { return index.at(forward_sample(x, vocab, phi_sched, t, r).tokens); };

  std::vector<double> mean(C, 0.0), m2(C, 0.0);
  for (std::size_t n = 0; n < n_pairs; ++n) {
    RandomStream r = rng.derive("pair", n);
    const std::size_t a = draw(r.derive(1));
    const std::size_t b = draw(r.derive(2));
    const double dl = loss[a] - loss[b];
    for (std::size_t c = 0; c < C; ++c) {
      const double g = 0.5 * (score[a][c] - score[b][c]) * dl;
      const double delta = g - mean[c];
      mean[c] += delta / static_cast<double>(n + 1);
      m2[c] += delta * (g - mean[c]);
    }
  }

  PropositionReport rep;
  rep.name = "rloo_unbiased";
  rep.instances = C;
  rep.tolerance = 4.0;
  for (std::size_t c = 0; c < C; ++c) {
    const double se = n_pairs > 1 ? std::sqrt(m2[c] / static_cast<double>(n_pairs - 1) / static_cast<double>(n_pairs)) : 0.0;
    const double diff = std::abs(mean[c] - exact[c]);
    double dev;
    if (se > 0.0) dev = diff / se;
    // Zero spread (constant loss): both sides must vanish up to roundoff.
    else dev = diff <= 1e-10 * magnitude[c] ? 0.0 : std::numeric_limits<double>::infinity();
    rep.deviations.push_back(dev);
    rep.max_deviation = std::max(rep.max_deviation, dev);
  }
  rep.pass = rep.max_deviation <= rep.tolerance;
  return rep;
}

double bd3lm_violation_fraction(double eps, int length, int blocks, const TimeGrid& grid, std::size_t n,
                                RandomStream rng) {
  Bd3lmEpsilon spec{length, blocks, eps};
  const Schedule sched = instantiate(spec, static_cast<std::size_t>(length), {});
  const int block_len = length / blocks;
  // Inclusive grid-index range of each block window.
  std::vector<std::pair<int, int>> window(static_cast<std::size_t>(blocks), {grid.steps() + 1, -1});
  for (int b = 0; b < blocks; ++b) {
    const double lo = 1.0 - static_cast<double>(b + 1) / blocks, hi = 1.0 - static_cast<double>(b) / blocks;
    for (int tau = 0; tau <= grid.steps(); ++tau) {
      const double tt = grid.t_of(tau);
      if (tt >= lo - 1e-12 && tt <= hi + 1e-12) {
        window[b].first = std::min(window[b].first, tau);
        window[b].second = std::max(window[b].second, tau);
      }
    }
    if (window[b].second < window[b].first)
      throw Error(ErrorCode::InvalidArgument, "grid does not resolve every block window");
  }
  std::size_t bad = 0;
  for (std::size_t k = 0; k < n; ++k) {
    RandomStream r = rng.derive("trajectory", k);
    bool violated = false;
    for (int i = 0; i < length && !violated; ++i) {
      // Masking is absorbing, so the onset is where 1 - alpha first exceeds u.
      const double u = r.derive(static_cast<std::uint64_t>(i)).uniform();
      int onset = grid.steps();
      for (int tau = 0; tau <= grid.steps(); ++tau) {
        if (u < sched[static_cast<std::size_t>(i)].one_minus_alpha(grid.t_of(tau))) {
          onset = tau;
          break;
        }
      }
      const auto& w = window[static_cast<std::size_t>(i / block_len)];
      violated = onset < w.first || onset > w.second;
    }
    bad += violated;
  }
  return static_cast<double>(bad) / static_cast<double>(n);
}

PropositionReport check_bd3lm_windows(const std::vector<double>& epsilons, int length, int blocks, const TimeGrid& grid,
                                      std::size_t n, RandomStream rng) {
  PropositionReport rep;
  rep.name = "bd3lm_windows";
  rep.tolerance = 0.3;
  for (double eps : epsilons) {
    rep.epsilons.push_back(eps);
    rep.deviations.push_back(bd3lm_violation_fraction(eps, length, blocks, grid, n, rng.derive("eps", rep.instances)));
    ++rep.instances;
  }
  for (std::size_t k = 1; k < rep.deviations.size(); ++k)
    if (rep.deviations[k] > rep.deviations[k - 1]) rep.monotone = false;
  rep.max_deviation = *std::max_element(rep.deviations.begin(), rep.deviations.end());
  bool positive = std::all_of(rep.deviations.begin(), rep.deviations.end(), [](double d) { return d > 0.0; });
  rep.slope = positive ? loglog_slope(rep.epsilons, rep.deviations) : 0.0;
  rep.pass = positive && rep.monotone && std::abs(rep.slope - 1.0) <= rep.tolerance;
  return rep;
}

}  // namespace oemdm
