#include "oemdm/schedulers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace oemdm {

double smoothstep(double u) {
  if (u <= 0.0) return 0.0;
  if (u >= 1.0) return 1.0;
  return u * u * (3.0 - 2.0 * u);
}

double smoothstep_slope(double u) {
  if (u <= 0.0 || u >= 1.0) return 0.0;
  return 6.0 * u * (1.0 - u);
}

LearnedHead::LearnedHead(std::shared_ptr<const HeadFunction> head, HeadRole role, double c1, double c2)
    : head_(std::move(head)), role_(role), c1_(c1), c2_(c2) {
  if (!head_) throw Error(ErrorCode::InvalidArgument, "learned schedule needs a head");
  // c2 = 0 is the non-learnable ablation; c1 > c2 keeps every exponent positive.
  if (!(c2 >= 0.0) || !(c1 > c2))
    throw Error(ErrorCode::InvalidArgument, "learned schedule requires c1 > c2 >= 0 so exponents stay positive (got c1=" +
                                                std::to_string(c1) + ", c2=" + std::to_string(c2) + ")");
}

void validate_spec(const SchedulerSpec& spec) {
  std::visit(
      [](const auto& s) {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, Polynomial>) {
          if (!(s.exponent > 0.0)) throw Error(ErrorCode::InvalidArgument, "polynomial exponent must be positive");
        } else if constexpr (std::is_same_v<S, ArmEpsilon>) {
          if (s.length < 1) throw Error(ErrorCode::InvalidArgument, "windowed schedule needs length >= 1");
          if (!(s.eps > 0.0 && s.eps < 1.0)) throw Error(ErrorCode::InvalidArgument, "eps must lie in (0,1)");
          if (!s.order.empty()) {
            if (s.order.size() != static_cast<std::size_t>(s.length))
              throw Error(ErrorCode::InvalidArgument, "order must list every position once");
            std::vector<int> sorted = s.order;
            std::sort(sorted.begin(), sorted.end());
            for (int k = 0; k < s.length; ++k)
              if (sorted[k] != k) throw Error(ErrorCode::InvalidArgument, "order is not a permutation");
          }
        } else if constexpr (std::is_same_v<S, Bd3lmEpsilon>) {
          if (s.blocks < 1 || s.length < 1 || s.length % s.blocks != 0)
            throw Error(ErrorCode::InvalidArgument, "block count must divide the length");
          if (!(s.eps > 0.0 && s.eps < 1.0)) throw Error(ErrorCode::InvalidArgument, "eps must lie in (0,1)");
        } else if constexpr (std::is_same_v<S, GenMd4Fixed>) {
          if (s.exponents.empty()) throw Error(ErrorCode::InvalidArgument, "per-token exponent table is empty");
          for (double w : s.exponents)
            if (!(w > 0.0)) throw Error(ErrorCode::InvalidArgument, "per-token exponents must be positive");
        }
      },
      spec);
}

bool requires_context(const SchedulerSpec& spec) {
  return std::holds_alternative<GenMd4Fixed>(spec) || std::holds_alternative<LearnedHead>(spec);
}

double PositionLaw::one_minus_alpha(double t) const {
  if (kind == Kind::Power) return t <= 0.0 ? 0.0 : std::exp(exponent * std::log(t));
  return eps * t + (1.0 - eps) * smoothstep((t - start) / width);
}

double PositionLaw::alpha(double t) const {
  if (kind == Kind::Power) return t <= 0.0 ? 1.0 : -std::expm1(exponent * std::log(t));
  return 1.0 - one_minus_alpha(t);
}

double PositionLaw::log_alpha(double t) const {
  if (kind == Kind::Power) return t <= 0.0 ? 0.0 : std::log(-std::expm1(exponent * std::log(t)));
  return std::log1p(-one_minus_alpha(t));
}

double PositionLaw::log_one_minus_alpha(double t) const {
  if (kind == Kind::Power) return exponent * std::log(t);
  return std::log(one_minus_alpha(t));
}

double PositionLaw::dalpha_dt(double t) const {
  if (kind == Kind::Power) return -exponent * std::exp((exponent - 1.0) * std::log(t));
  return -eps - (1.0 - eps) * smoothstep_slope((t - start) / width) / width;
}

double PositionLaw::velocity(double t) const {
  if (kind == Kind::Power) return exponent / t;
  return -dalpha_dt(t) / one_minus_alpha(t);
}

SchedulerEval Schedule::eval(std::size_t position, double t) const {
  if (!(t > 0.0 && t <= 1.0)) throw Error(ErrorCode::InvalidArgument, "schedule time must lie in (0,1]");
  if (position >= laws_.size()) throw Error(ErrorCode::InvalidArgument, "position out of range");
  const PositionLaw& law = laws_[position];
  return {law.alpha(t), law.dalpha_dt(t), law.velocity(t)};
}

std::vector<double> norm_sig(std::span<const double> v) {
  std::vector<double> out(v.size());
  if (v.empty()) return out;
  double mean = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = 1.0 / (1.0 + std::exp(-v[i]));
    mean += out[i];
  }
  mean /= static_cast<double>(v.size());
  for (double& o : out) o -= mean;
  return out;
}

std::vector<double> head_exponents(std::span<const double> raw, double c1, double c2) {
  std::vector<double> e = norm_sig(raw);
  for (double& x : e) x = c1 + c2 * x;
  return e;
}

namespace {

PositionLaw power_law(double w) {
  PositionLaw law;
  law.kind = PositionLaw::Kind::Power;
  law.exponent = w;
  return law;
}

PositionLaw window_law(double eps, int window, int windows) {
  PositionLaw law;
  law.kind = PositionLaw::Kind::Window;
  law.eps = eps;
  law.width = 1.0 / windows;
  // 1-based window k starts at 1 - k/windows.
  law.start = 1.0 - static_cast<double>(window + 1) / windows;
  return law;
}

void require_context(std::span<const Token> context, std::size_t length, const char* who) {
  if (context.size() != length)
    throw Error(ErrorCode::MissingContext, std::string(who) + " schedule needs a context of length " +
                                               std::to_string(length) + ", got " + std::to_string(context.size()));
}

}  // namespace

Schedule instantiate(const SchedulerSpec& spec, std::size_t length, std::span<const Token> context) {
  validate_spec(spec);
  std::vector<PositionLaw> laws;
  laws.reserve(length);
  std::visit(
      [&](const auto& s) {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, Linear>) {
          laws.assign(length, power_law(1.0));
        } else if constexpr (std::is_same_v<S, Polynomial>) {
          laws.assign(length, power_law(s.exponent));
        } else if constexpr (std::is_same_v<S, ArmEpsilon>) {
          if (static_cast<std::size_t>(s.length) != length)
            throw Error(ErrorCode::InvalidArgument, "windowed schedule built for a different length");
          laws.resize(length);
          for (int k = 0; k < s.length; ++k) {
            int pos = s.order.empty() ? k : s.order[k];
            laws[pos] = window_law(s.eps, k, s.length);
          }
        } else if constexpr (std::is_same_v<S, Bd3lmEpsilon>) {
          if (static_cast<std::size_t>(s.length) != length)
            throw Error(ErrorCode::InvalidArgument, "block schedule built for a different length");
          const int block_len = s.length / s.blocks;
          for (int i = 0; i < s.length; ++i) laws.push_back(window_law(s.eps, i / block_len, s.blocks));
        } else if constexpr (std::is_same_v<S, GenMd4Fixed>) {
          require_context(context, length, "per-token");
          for (Token tok : context) {
            if (tok < 0 || static_cast<std::size_t>(tok) >= s.exponents.size())
              throw Error(ErrorCode::MissingContext, "per-token schedule needs a clean token at every position");
            laws.push_back(power_law(s.exponents[tok]));
          }
        } else if constexpr (std::is_same_v<S, LearnedHead>) {
          require_context(context, length, "learned");
          std::vector<double> raw = s.head().raw_scores(context);
          if (raw.size() != length) throw Error(ErrorCode::InvalidArgument, "head returned the wrong length");
          for (double r : raw)
            if (!std::isfinite(r)) throw Error(ErrorCode::NonFinite, "head produced a non-finite score");
          for (double w : head_exponents(raw, s.c1(), s.c2())) laws.push_back(power_law(w));
        }
      },
      spec);
  return Schedule(std::move(laws));
}

SchedulerEval eval(const SchedulerSpec& spec, std::size_t position, std::span<const Token> context,
                   std::size_t length, double t) {
  if (!(t > 0.0 && t <= 1.0)) throw Error(ErrorCode::InvalidArgument, "schedule time must lie in (0,1]");
  return instantiate(spec, length, context).eval(position, t);
}

FreeformReport validate_freeform(const SchedulerSpec& spec, std::span<const std::vector<Token>> contexts,
                                 std::size_t length, std::span<const double> t_grid) {
  FreeformReport rep;
  rep.max_forward_diff = -std::numeric_limits<double>::infinity();
  std::vector<std::vector<Token>> ctx(contexts.begin(), contexts.end());
  if (ctx.empty()) ctx.emplace_back();
  for (const auto& c : ctx) {
    Schedule sched = instantiate(spec, length, c);
    for (std::size_t i = 0; i < length; ++i) {
      const PositionLaw& law = sched[i];
      rep.start_residual = std::max(rep.start_residual, std::abs(law.alpha(0.0) - 1.0));
      rep.end_residual = std::max(rep.end_residual, std::abs(law.alpha(1.0)));
      for (std::size_t k = 0; k < t_grid.size(); ++k) {
        const double t = t_grid[k];
        const double a = law.alpha(t);
        if (k > 0) {
          const double prev = law.alpha(t_grid[k - 1]);
          rep.max_forward_diff = std::max(rep.max_forward_diff, a - prev);
          if (!(a < prev)) rep.strictly_decreasing = false;
        }
        if (t > 0.0) {
          double d = law.dalpha_dt(t);
          double lhs = law.velocity(t) * law.one_minus_alpha(t);
          rep.identity_residual = std::max(rep.identity_residual, std::abs(lhs + d) / std::max(std::abs(d), 1e-300));
        }
      }
    }
  }
  return rep;
}

std::pair<double, double> velocity_ratio_bound(double c1, double c2) {
  if (!(c2 >= 0.0) || !(c1 > c2))
    throw Error(ErrorCode::InvalidArgument, "ratio bound requires c1 > c2 >= 0 (finite velocities)");
  return {(c1 - c2) / (c1 + c2), (c1 + c2) / (c1 - c2)};
}

}  // namespace oemdm
