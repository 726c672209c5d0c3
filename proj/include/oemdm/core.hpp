// Token-space primitives shared by every other module: sequences, masked
// sequences, absorbing trajectories, the discrete time grid and seeded
// counter-based randomness.
#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace oemdm {

using Token = std::int32_t;

enum class ErrorCode {
  InvalidArgument,
  SizeGuard,
  NotSimplex,
  Membership,
  MissingContext,
  ZeroConfidence,
  NonFinite,
  NonSubs,
  Io,
  Corrupt,
  Config,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

// Real tokens are 0..size-1; the mask symbol takes the id `size`.
struct Vocabulary {
  int size = 0;

  explicit Vocabulary(int v);
  Token mask() const { return size; }
  bool is_real(Token tok) const { return tok >= 0 && tok < size; }
  int symbols() const { return size + 1; }
};

struct Sequence {
  std::vector<Token> tokens;

  Sequence() = default;
  explicit Sequence(std::vector<Token> toks) : tokens(std::move(toks)) {}
  std::size_t length() const { return tokens.size(); }
  Token operator[](std::size_t i) const { return tokens[i]; }
  bool operator==(const Sequence&) const = default;
};

struct MaskedSequence {
  std::vector<Token> tokens;
  Token mask_id = 0;

  MaskedSequence() = default;
  MaskedSequence(std::vector<Token> toks, Token mask) : tokens(std::move(toks)), mask_id(mask) {}
  static MaskedSequence all_masked(std::size_t length, const Vocabulary& vocab);
  static MaskedSequence from(const Sequence& x, const Vocabulary& vocab);

  std::size_t length() const { return tokens.size(); }
  bool is_masked(std::size_t i) const { return tokens[i] == mask_id; }
  std::size_t masked_count() const;
  bool fully_masked() const { return masked_count() == tokens.size(); }
  bool operator==(const MaskedSequence&) const = default;
};

void validate_sequence(const Sequence& x, const Vocabulary& vocab);
// True iff every non-mask entry of z equals the matching entry of x.
bool in_masked_set(const MaskedSequence& z, const Sequence& x);
// Base-(V+1) integer code of z, used as a table key.
std::uint64_t encode(std::span<const Token> tokens, int symbols);

struct Trajectory {
  std::vector<MaskedSequence> states;  // indexed by grid step 0..T
  Sequence endpoint;

  // Checks the fully-masked final state, absorption, and endpoint consistency.
  bool valid() const;
};

class TimeGrid {
 public:
  explicit TimeGrid(int steps);
  int steps() const { return steps_; }
  double s_of(int tau) const { return static_cast<double>(tau) / (steps_ + 1); }
  double t_of(int tau) const { return static_cast<double>(tau + 1) / (steps_ + 1); }

 private:
  int steps_;
};

TimeGrid time_grid(int steps);

// Counter-based generator: every draw is a hash of (key, counter), and
// derive() produces an independent substream keyed by a purpose tag and index.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed);
  RandomStream derive(std::string_view tag, std::uint64_t index = 0) const;
  RandomStream derive(std::uint64_t index) const;

  std::uint64_t next_u64();
  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  double normal();
  std::uint64_t below(std::uint64_t n);  // uniform integer in [0, n)
  std::uint64_t key() const { return key_; }

 private:
  RandomStream(std::uint64_t key, int) : key_(key) {}
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t mix64(std::uint64_t z);

constexpr double kSimplexTolerance = 1e-9;
void validate_simplex(std::span<const double> probs, std::string_view what = "probabilities");
std::size_t sample_categorical(std::span<const double> probs, RandomStream& rng);

constexpr std::size_t kMaskedSetMaxLength = 16;
constexpr std::uint64_t kTrajectoryBudget = 1000000;

std::vector<MaskedSequence> enumerate_masked_set(const Sequence& x, const Vocabulary& vocab);
// Masked set indexed by bitmask: bit i set means position i is masked.
MaskedSequence masked_by_bits(const Sequence& x, const Vocabulary& vocab, std::uint64_t bits);
std::vector<Trajectory> enumerate_absorbing_trajectories(const Sequence& x, const Vocabulary& vocab,
                                                         const TimeGrid& grid);
// Every sequence in V^L in lexicographic order (guarded like the masked set).
std::vector<Sequence> enumerate_sequences(const Vocabulary& vocab, std::size_t length);

}  // namespace oemdm
