// Free-form per-position masking schedules: alpha(t), its time derivative and
// the velocity A = -alpha'/(1 - alpha), for every concrete family.
#pragma once

#include <memory>
#include <span>
#include <utility>
#include <variant>
#include <vector>

#include "oemdm/core.hpp"

namespace oemdm {

struct SchedulerEval {
  double alpha = 0.0;
  double dalpha_dt = 0.0;
  double velocity = 0.0;
};

double smoothstep(double u);
double smoothstep_slope(double u);  // dS/du, zero outside (0,1)

struct Linear {};

struct Polynomial {
  double exponent = 1.0;
};

// Windowed near-autoregressive schedule. `order[k]` is the position that
// owns the k-th window (window 0 sits nearest t = 1, so it unmasks first
// during generation). An empty order means left to right.
struct ArmEpsilon {
  int length = 1;
  double eps = 0.1;
  std::vector<int> order;
};

// Same construction with one window per block of length/blocks positions.
struct Bd3lmEpsilon {
  int length = 1;
  int blocks = 1;
  double eps = 0.1;
};

// Polynomial schedule whose exponent is looked up by the clean token.
struct GenMd4Fixed {
  std::vector<double> exponents;
};

enum class HeadRole { Forward, Reverse };

// Maps a context (clean or masked sequence) to one raw scalar per position.
class HeadFunction {
 public:
  virtual ~HeadFunction() = default;
  virtual std::vector<double> raw_scores(std::span<const Token> context) const = 0;
};

// exponent_i = c1 + c2 * norm_sig(head(context))_i
class LearnedHead {
 public:
  LearnedHead(std::shared_ptr<const HeadFunction> head, HeadRole role, double c1, double c2);
  const HeadFunction& head() const { return *head_; }
  HeadRole role() const { return role_; }
  double c1() const { return c1_; }
  double c2() const { return c2_; }

 private:
  std::shared_ptr<const HeadFunction> head_;
  HeadRole role_;
  double c1_;
  double c2_;
};

using SchedulerSpec = std::variant<Linear, Polynomial, ArmEpsilon, Bd3lmEpsilon, GenMd4Fixed, LearnedHead>;

void validate_spec(const SchedulerSpec& spec);
bool requires_context(const SchedulerSpec& spec);

// One position's closed-form time law.
struct PositionLaw {
  enum class Kind { Power, Window };
  Kind kind = Kind::Power;
  double exponent = 1.0;                      // Power: alpha = 1 - t^exponent
  double eps = 0.0, start = 0.0, width = 1.0;  // Window

  // Defined on [0,1]; the boundary values are exact.
  double alpha(double t) const;
  double one_minus_alpha(double t) const;
  double log_alpha(double t) const;
  double log_one_minus_alpha(double t) const;
  double dalpha_dt(double t) const;
  double velocity(double t) const;  // requires t in (0,1]
};

// A scheduler specialised to one context; evaluating at several times reuses
// a single head evaluation.
class Schedule {
 public:
  Schedule() = default;
  explicit Schedule(std::vector<PositionLaw> laws) : laws_(std::move(laws)) {}
  std::size_t length() const { return laws_.size(); }
  const PositionLaw& operator[](std::size_t i) const { return laws_[i]; }
  SchedulerEval eval(std::size_t position, double t) const;

 private:
  std::vector<PositionLaw> laws_;
};

Schedule instantiate(const SchedulerSpec& spec, std::size_t length, std::span<const Token> context);
SchedulerEval eval(const SchedulerSpec& spec, std::size_t position, std::span<const Token> context,
                   std::size_t length, double t);

// sigmoid(v_i) minus the sequence mean of sigmoids.
std::vector<double> norm_sig(std::span<const double> v);
std::vector<double> head_exponents(std::span<const double> raw, double c1, double c2);

struct FreeformReport {
  double start_residual = 0.0;     // max |alpha(0) - 1|
  double end_residual = 0.0;       // max |alpha(1)|
  double max_forward_diff = 0.0;   // max over grid of alpha(t_{k+1}) - alpha(t_k)
  double identity_residual = 0.0;  // max relative |A (1 - alpha) + alpha'|
  bool strictly_decreasing = true;
};

FreeformReport validate_freeform(const SchedulerSpec& spec, std::span<const std::vector<Token>> contexts,
                                 std::size_t length, std::span<const double> t_grid);

std::pair<double, double> velocity_ratio_bound(double c1, double c2);

}  // namespace oemdm
