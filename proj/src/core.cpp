#include "oemdm/core.hpp"

#include <cmath>
#include <numbers>

namespace oemdm {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid_argument";
    case ErrorCode::SizeGuard: return "size_guard";
    case ErrorCode::NotSimplex: return "not_simplex";
    case ErrorCode::Membership: return "membership";
    case ErrorCode::MissingContext: return "missing_context";
    case ErrorCode::ZeroConfidence: return "zero_confidence";
    case ErrorCode::NonFinite: return "non_finite";
    case ErrorCode::NonSubs: return "non_subs";
    case ErrorCode::Io: return "io";
    case ErrorCode::Corrupt: return "corrupt";
    case ErrorCode::Config: return "config";
  }
  return "unknown";
}

Vocabulary::Vocabulary(int v) : size(v) {
  if (v < 1) throw Error(ErrorCode::InvalidArgument, "vocabulary size must be positive");
}

MaskedSequence MaskedSequence::all_masked(std::size_t length, const Vocabulary& vocab) {
  return MaskedSequence(std::vector<Token>(length, vocab.mask()), vocab.mask());
}

MaskedSequence MaskedSequence::from(const Sequence& x, const Vocabulary& vocab) {
  return MaskedSequence(x.tokens, vocab.mask());
}

std::size_t MaskedSequence::masked_count() const {
  std::size_t n = 0;
  for (Token tok : tokens) n += tok == mask_id;
  return n;
}

void validate_sequence(const Sequence& x, const Vocabulary& vocab) {
  for (std::size_t i = 0; i < x.length(); ++i) {
    if (!vocab.is_real(x[i]))
      throw Error(ErrorCode::InvalidArgument,
                  "sequence position " + std::to_string(i) + " holds non-data token " + std::to_string(x[i]));
  }
}

bool in_masked_set(const MaskedSequence& z, const Sequence& x) {
  if (z.length() != x.length()) return false;
  for (std::size_t i = 0; i < z.length(); ++i) {
    if (!z.is_masked(i) && z.tokens[i] != x[i]) return false;
  }
  return true;
}

std::uint64_t encode(std::span<const Token> tokens, int symbols) {
  std::uint64_t code = 0;
  for (Token tok : tokens) code = code * static_cast<std::uint64_t>(symbols) + static_cast<std::uint64_t>(tok);
  return code;
}

bool Trajectory::valid() const {
  if (states.empty()) return false;
  if (!states.back().fully_masked()) return false;
  for (std::size_t tau = 0; tau < states.size(); ++tau) {
    if (!in_masked_set(states[tau], endpoint)) return false;
    if (tau + 1 < states.size()) {
      for (std::size_t i = 0; i < endpoint.length(); ++i) {
        if (states[tau].is_masked(i) && !states[tau + 1].is_masked(i)) return false;
      }
    }
  }
  return true;
}

TimeGrid::TimeGrid(int steps) : steps_(steps) {
  if (steps < 1) throw Error(ErrorCode::InvalidArgument, "time grid needs at least one step");
}

TimeGrid time_grid(int steps) { return TimeGrid(steps); }

std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

RandomStream::RandomStream(std::uint64_t seed) : key_(mix64(seed ^ 0x6f656d646d2d7267ULL)) {}

RandomStream RandomStream::derive(std::string_view tag, std::uint64_t index) const {
  return RandomStream(mix64(mix64(key_ ^ fnv1a64(tag)) + mix64(index)), 0);
}

RandomStream RandomStream::derive(std::uint64_t index) const { return RandomStream(mix64(key_ + mix64(index)), 0); }

std::uint64_t RandomStream::next_u64() { return mix64(key_ ^ mix64(counter_++)); }

double RandomStream::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double RandomStream::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double RandomStream::normal() {
  // Box-Muller on (0,1]; deterministic across platforms unlike std distributions.
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t RandomStream::below(std::uint64_t n) {
  if (n == 0) throw Error(ErrorCode::InvalidArgument, "below(0)");
  // Rejection keeps the draw exactly uniform.
  std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t r;
  do r = next_u64();
  while (r >= limit);
  return r % n;
}

void validate_simplex(std::span<const double> probs, std::string_view what) {
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p))
      throw Error(ErrorCode::NotSimplex, std::string(what) + " has a negative or non-finite entry");
    sum += p;
  }
  if (std::abs(sum - 1.0) > kSimplexTolerance)
    throw Error(ErrorCode::NotSimplex, std::string(what) + " sums to " + std::to_string(sum));
}

std::size_t sample_categorical(std::span<const double> probs, RandomStream& rng) {
  validate_simplex(probs);
  double total = 0.0;
  for (double p : probs) total += p;
  double u = rng.uniform() * total;
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    if (probs[k] <= 0.0) continue;
    acc += probs[k];
    last_positive = k;
    if (u < acc) return k;
  }
  return last_positive;
}

MaskedSequence masked_by_bits(const Sequence& x, const Vocabulary& vocab, std::uint64_t bits) {
  MaskedSequence z = MaskedSequence::from(x, vocab);
  for (std::size_t i = 0; i < x.length(); ++i) {
    if (bits >> i & 1U) z.tokens[i] = vocab.mask();
  }
  return z;
}

std::vector<MaskedSequence> enumerate_masked_set(const Sequence& x, const Vocabulary& vocab) {
  if (x.length() > kMaskedSetMaxLength)
    throw Error(ErrorCode::SizeGuard, "masked-set enumeration refused: L=" + std::to_string(x.length()) +
                                          " exceeds " + std::to_string(kMaskedSetMaxLength));
  std::vector<MaskedSequence> out;
  const std::uint64_t count = std::uint64_t{1} << x.length();
  out.reserve(count);
  for (std::uint64_t bits = 0; bits < count; ++bits) out.push_back(masked_by_bits(x, vocab, bits));
  return out;
}

std::vector<Trajectory> enumerate_absorbing_trajectories(const Sequence& x, const Vocabulary& vocab,
                                                         const TimeGrid& grid) {
  const std::size_t L = x.length();
  const std::uint64_t choices = static_cast<std::uint64_t>(grid.steps()) + 1;
  std::uint64_t total = 1;
  for (std::size_t i = 0; i < L; ++i) {
    total *= choices;
    if (total > kTrajectoryBudget)
      throw Error(ErrorCode::SizeGuard, "trajectory enumeration refused: (T+1)^L exceeds " +
                                            std::to_string(kTrajectoryBudget));
  }
  std::vector<Trajectory> out;
  out.reserve(total);
  // onset[i] is the first grid index at which position i is masked.
  std::vector<std::uint64_t> onset(L, 0);
  for (std::uint64_t n = 0; n < total; ++n) {
    std::uint64_t rem = n;
    for (std::size_t i = 0; i < L; ++i) {
      onset[i] = rem % choices;
      rem /= choices;
    }
    Trajectory traj;
    traj.endpoint = x;
    traj.states.reserve(choices);
    for (std::uint64_t tau = 0; tau < choices; ++tau) {
      MaskedSequence z = MaskedSequence::from(x, vocab);
      for (std::size_t i = 0; i < L; ++i) {
        if (tau >= onset[i]) z.tokens[i] = vocab.mask();
      }
      traj.states.push_back(std::move(z));
    }
    out.push_back(std::move(traj));
  }
  return out;
}

std::vector<Sequence> enumerate_sequences(const Vocabulary& vocab, std::size_t length) {
  if (length > kMaskedSetMaxLength)
    throw Error(ErrorCode::SizeGuard, "sequence enumeration refused for L=" + std::to_string(length));
  std::uint64_t total = 1;
  for (std::size_t i = 0; i < length; ++i) {
    total *= static_cast<std::uint64_t>(vocab.size);
    if (total > kTrajectoryBudget) throw Error(ErrorCode::SizeGuard, "sequence enumeration refused: V^L too large");
  }
  std::vector<Sequence> out;
  out.reserve(total);
  for (std::uint64_t n = 0; n < total; ++n) {
    std::vector<Token> toks(length);
    std::uint64_t rem = n;
    for (std::size_t i = length; i-- > 0;) {
      toks[i] = static_cast<Token>(rem % vocab.size);
      rem /= vocab.size;
    }
    out.emplace_back(std::move(toks));
  }
  return out;
}

}  // namespace oemdm
