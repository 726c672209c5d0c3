#include "oemdm/diffusion.hpp"

#include <cmath>
#include <string>

namespace oemdm {

namespace {

void check_time(double t) {
  if (!(t > 0.0 && t <= 1.0)) throw Error(ErrorCode::InvalidArgument, "time must lie in (0,1]");
}

void check_pair(double s, double t) {
  if (!(s >= 0.0 && s < t && t <= 1.0)) throw Error(ErrorCode::InvalidArgument, "need 0 <= s < t <= 1");
}

std::span<const Token> clean_context(const Sequence& x) { return x.tokens; }

}  // namespace

MaskedSequence forward_sample(const Sequence& x, const Vocabulary& vocab, const Schedule& sched, double t,
                              RandomStream rng) {
  check_time(t);
  MaskedSequence z = MaskedSequence::from(x, vocab);
  for (std::size_t i = 0; i < x.length(); ++i) {
    RandomStream pos = rng.derive("mask", i);
    if (pos.uniform() < sched[i].one_minus_alpha(t)) z.tokens[i] = vocab.mask();
  }
  return z;
}

MaskedSequence forward_sample(const Sequence& x, const Vocabulary& vocab, const SchedulerSpec& spec, double t,
                              RandomStream rng) {
  return forward_sample(x, vocab, instantiate(spec, x.length(), clean_context(x)), t, rng);
}

double forward_logprob(const MaskedSequence& z, const Sequence& x, const Schedule& sched, double t) {
  check_time(t);
  if (!in_masked_set(z, x)) throw Error(ErrorCode::Membership, "masked sequence is not a corruption of x");
  double lp = 0.0;
  for (std::size_t i = 0; i < x.length(); ++i)
    lp += z.is_masked(i) ? sched[i].log_one_minus_alpha(t) : sched[i].log_alpha(t);
  return lp;
}

double forward_logprob(const MaskedSequence& z, const Sequence& x, const SchedulerSpec& spec, double t) {
  return forward_logprob(z, x, instantiate(spec, x.length(), clean_context(x)), t);
}

Rows true_posterior_step(const MaskedSequence& z_t, const Sequence& x, const Vocabulary& vocab,
                         const SchedulerSpec& spec, double s, double t) {
  check_pair(s, t);
  if (!in_masked_set(z_t, x)) throw Error(ErrorCode::Membership, "z_t is not a corruption of x");
  Schedule sched = instantiate(spec, x.length(), clean_context(x));
  Rows k = Rows::Zero(static_cast<Eigen::Index>(x.length()), vocab.symbols());
  for (std::size_t i = 0; i < x.length(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    if (!z_t.is_masked(i)) {
      k(r, z_t.tokens[i]) = 1.0;
      continue;
    }
    const PositionLaw& law = sched[i];
    double denom = law.one_minus_alpha(t);
    double stay = law.one_minus_alpha(s) / denom;
    k(r, x[i]) = (law.alpha(s) - law.alpha(t)) / denom;
    k(r, vocab.mask()) = stay;
  }
  return k;
}

Rows apply_subs(const Rows& raw_scores, const MaskedSequence& z_t) {
  if (!raw_scores.allFinite()) throw Error(ErrorCode::NonFinite, "denoiser scores are not finite");
  const Eigen::Index V = raw_scores.cols() - 1;
  Rows out = Rows::Zero(raw_scores.rows(), raw_scores.cols());
  for (Eigen::Index r = 0; r < raw_scores.rows(); ++r) {
    if (!z_t.is_masked(static_cast<std::size_t>(r))) {
      out(r, z_t.tokens[r]) = 1.0;
      continue;
    }
    auto real = raw_scores.row(r).head(V);
    double m = real.maxCoeff();
    Eigen::RowVectorXd e = (real.array() - m).exp();
    out.row(r).head(V) = e / e.sum();
  }
  return out;
}

void check_subs(const Rows& rows, const MaskedSequence& z_t, double tol) {
  const Eigen::Index V = rows.cols() - 1;
  if (rows.rows() != static_cast<Eigen::Index>(z_t.length()))
    throw Error(ErrorCode::NonSubs, "denoiser output has the wrong number of rows");
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    std::string where = "denoiser row " + std::to_string(r);
    if (rows(r, V) != 0.0) throw Error(ErrorCode::NonSubs, where + " puts mass on the mask symbol");
    if ((rows.row(r).array() < 0.0).any() || std::abs(rows.row(r).sum() - 1.0) > tol)
      throw Error(ErrorCode::NonSubs, where + " is not a simplex");
    if (!z_t.is_masked(static_cast<std::size_t>(r)) && rows(r, z_t.tokens[r]) != 1.0)
      throw Error(ErrorCode::NonSubs, where + " does not carry over its unmasked token");
  }
}

Rows reverse_step(const MaskedSequence& z_t, const Rows& denoised, const Schedule& sched, double s, double t) {
  check_pair(s, t);
  check_subs(denoised, z_t, kSimplexTolerance);
  const Eigen::Index V = denoised.cols() - 1;
  Rows k = Rows::Zero(denoised.rows(), denoised.cols());
  for (Eigen::Index r = 0; r < denoised.rows(); ++r) {
    const auto i = static_cast<std::size_t>(r);
    if (!z_t.is_masked(i)) {
      k(r, z_t.tokens[i]) = 1.0;
      continue;
    }
    const PositionLaw& law = sched[i];
    double denom = law.one_minus_alpha(t);
    double reveal = (law.alpha(s) - law.alpha(t)) / denom;
    k.row(r).head(V) = reveal * denoised.row(r).head(V);
    k(r, V) = law.one_minus_alpha(s) / denom;
  }
  return k;
}

Rows reverse_step(const MaskedSequence& z_t, const Rows& denoised, const SchedulerSpec& spec, double s, double t) {
  return reverse_step(z_t, denoised, instantiate(spec, z_t.length(), z_t.tokens), s, t);
}

Sequence ancestral_sample(const Denoiser& denoiser, const SchedulerSpec& reverse_spec, const TimeGrid& grid,
                          std::size_t length, RandomStream rng, Trajectory* trace) {
  const Vocabulary vocab(denoiser.vocab_size());
  const int T = grid.steps();
  MaskedSequence z = MaskedSequence::all_masked(length, vocab);
  std::vector<MaskedSequence> states;
  if (trace) states.assign(static_cast<std::size_t>(T) + 1, z);

  std::vector<double> row(static_cast<std::size_t>(vocab.symbols()));
  for (int tau = T; tau >= 1; --tau) {
    if (z.masked_count() == 0) {
      if (trace) states[tau - 1] = z;
      continue;
    }
    Rows denoised = denoiser.denoise(z);
    // The reverse schedule is re-instantiated on the current state each step.
    Rows kernel = reverse_step(z, denoised, instantiate(reverse_spec, length, z.tokens), grid.s_of(tau), grid.t_of(tau));
    MaskedSequence next = z;
    for (std::size_t i = 0; i < length; ++i) {
      if (!z.is_masked(i)) continue;
      for (int v = 0; v < vocab.symbols(); ++v) row[v] = kernel(static_cast<Eigen::Index>(i), v);
      RandomStream pos = rng.derive("step", static_cast<std::uint64_t>(tau)).derive(i);
      next.tokens[i] = static_cast<Token>(sample_categorical(row, pos));
    }
    z = std::move(next);
    if (trace) states[tau - 1] = z;
  }

  // Whatever is still masked at t(0) is drawn from the reconstruction rows.
  Sequence x{std::vector<Token>(length)};
  Rows recon;
  if (z.masked_count() > 0) recon = denoiser.denoise(z);
  for (std::size_t i = 0; i < length; ++i) {
    if (!z.is_masked(i)) {
      x.tokens[i] = z.tokens[i];
      continue;
    }
    std::vector<double> probs(static_cast<std::size_t>(vocab.size));
    for (int v = 0; v < vocab.size; ++v) probs[v] = recon(static_cast<Eigen::Index>(i), v);
    RandomStream pos = rng.derive("reconstruct", i);
    x.tokens[i] = static_cast<Token>(sample_categorical(probs, pos));
  }
  if (trace) {
    trace->states = std::move(states);
    trace->endpoint = x;
  }
  return x;
}

}  // namespace oemdm
