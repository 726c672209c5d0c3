#include <doctest.h>

#include <cmath>
#include <memory>

#include "oemdm/model.hpp"
#include "oemdm/schedulers.hpp"

using namespace oemdm;

TEST_CASE("smoothstep values and clamping") {
  CHECK(smoothstep(0.5) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(smoothstep(-1.0) == 0.0);
  CHECK(smoothstep(2.0) == 1.0);
  CHECK(smoothstep(0.25) == doctest::Approx(0.15625).epsilon(1e-15));
  CHECK(smoothstep_slope(-0.5) == 0.0);
  CHECK(smoothstep_slope(0.5) == doctest::Approx(1.5));
}

TEST_CASE("closed-form scheduler values") {
  const std::vector<Token> none;
  const auto lin = eval(Linear{}, 0, none, 1, 0.5);
  CHECK(lin.alpha == doctest::Approx(0.5));
  CHECK(lin.velocity == doctest::Approx(2.0));

  const auto poly = eval(Polynomial{0.7}, 0, none, 1, 0.25);
  CHECK(poly.alpha == doctest::Approx(1.0 - std::pow(0.25, 0.7)).epsilon(1e-14));
  CHECK(poly.alpha == doctest::Approx(0.621072).epsilon(1e-6));
  CHECK(poly.velocity == doctest::Approx(2.8).epsilon(1e-14));

  const ArmEpsilon arm{2, 0.1, {}};
  CHECK(eval(arm, 0, none, 2, 0.25).alpha == doctest::Approx(0.975).epsilon(1e-14));
  CHECK(eval(arm, 1, none, 2, 0.25).alpha == doctest::Approx(0.525).epsilon(1e-14));
}

TEST_CASE("velocity identity A (1 - alpha) = -alpha'") {
  const std::vector<SchedulerSpec> specs = {Linear{}, Polynomial{0.7}, ArmEpsilon{4, 0.05, {}},
                                            Bd3lmEpsilon{4, 2, 0.1}};
  const std::vector<Token> none;
  for (const auto& spec : specs) {
    for (double t : {0.1, 0.37, 0.5, 0.81, 1.0}) {
      const auto e = eval(spec, 0, none, 4, t);
      CHECK(e.velocity * (1.0 - e.alpha) == doctest::Approx(-e.dalpha_dt).epsilon(1e-12));
    }
  }
}

TEST_CASE("free-form validation") {
  std::vector<double> grid;
  for (int k = 0; k <= 200; ++k) grid.push_back(k / 200.0);
  const std::vector<std::vector<Token>> contexts = {{}};
  for (const SchedulerSpec& spec : {SchedulerSpec{Linear{}}, SchedulerSpec{ArmEpsilon{3, 0.05, {}}}}) {
    const auto rep = validate_freeform(spec, contexts, 3, grid);
    CHECK(rep.start_residual == 0.0);
    CHECK(rep.end_residual == 0.0);
    CHECK(rep.strictly_decreasing);
    CHECK(rep.max_forward_diff < 0.0);
  }
}

TEST_CASE("ratio bound") {
  const auto [lo, hi] = velocity_ratio_bound(0.7, 0.65);
  CHECK(lo == doctest::Approx(0.05 / 1.35).epsilon(1e-12));
  CHECK(lo == doctest::Approx(0.0370).epsilon(1e-3));
  CHECK(hi == doctest::Approx(27.0).epsilon(1e-12));
  const auto [l1, h1] = velocity_ratio_bound(1.0, 0.0);
  CHECK(l1 == 1.0);
  CHECK(h1 == 1.0);
  CHECK_THROWS_AS(velocity_ratio_bound(0.5, 0.5), Error);
  CHECK_THROWS_AS(velocity_ratio_bound(0.5, 0.7), Error);
}

TEST_CASE("learned heads rejects c1 <= c2") {
  auto head = std::make_shared<TabularHead>(1, 3);
  CHECK_THROWS_AS(LearnedHead(head, HeadRole::Forward, 0.6, 0.65), Error);
  CHECK_NOTHROW(LearnedHead(head, HeadRole::Forward, 0.7, 0.65));
}

TEST_CASE("norm_sig") {
  const std::vector<double> zero = {0.0, 0.0};
  for (double v : norm_sig(zero)) CHECK(v == 0.0);
  const std::vector<double> pm = {1.0, -1.0};
  const auto out = norm_sig(pm);
  CHECK(out[0] == doctest::Approx(0.2311).epsilon(1e-3));
  CHECK(out[1] == doctest::Approx(-0.2311).epsilon(1e-3));

  RandomStream rng(11);
  std::vector<double> v(7);
  for (auto& x : v) x = 3.0 * rng.normal();
  double total = 0.0;
  for (double x : norm_sig(v)) {
    CHECK(std::abs(x) < 1.0);
    total += x;
  }
  CHECK(std::abs(total) <= 1e-12);
}

TEST_CASE("head exponents stay inside [c1 - c2, c1 + c2] and average to c1") {
  RandomStream rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> raw(5);
    for (auto& x : raw) x = 5.0 * rng.normal();
    const auto e = head_exponents(raw, 0.7, 0.65);
    double mean = 0.0;
    for (double x : e) {
      CHECK(x > 0.05);
      CHECK(x < 1.35);
      mean += x / e.size();
    }
    CHECK(mean == doctest::Approx(0.7).epsilon(1e-12));
  }
  const std::vector<double> flat = {3.0, 3.0, 3.0};
  for (double x : head_exponents(flat, 0.7, 0.65)) CHECK(x == doctest::Approx(0.7).epsilon(1e-15));
}

TEST_CASE("learned head schedules and context requirement") {
  auto head = std::make_shared<TabularHead>(7, 3);
  const SchedulerSpec spec = LearnedHead(head, HeadRole::Forward, 0.7, 0.65);
  CHECK(requires_context(spec));
  CHECK_FALSE(requires_context(Linear{}));
  const std::vector<Token> ctx = {0, 1, 2};
  const Schedule s = instantiate(spec, 3, ctx);
  const auto raw = head->raw_scores(ctx);
  const auto ex = head_exponents(raw, 0.7, 0.65);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto e = s.eval(i, 0.4);
    CHECK(e.alpha == doctest::Approx(1.0 - std::pow(0.4, ex[i])).epsilon(1e-14));
    CHECK(e.velocity == doctest::Approx(ex[i] / 0.4).epsilon(1e-14));
  }
}

TEST_CASE("genmd4 fixed uses the clean token's exponent") {
  const SchedulerSpec spec = GenMd4Fixed{{0.5, 2.0}};
  const std::vector<Token> x = {1, 0};
  CHECK(eval(spec, 0, x, 2, 0.3).alpha == doctest::Approx(1.0 - 0.09).epsilon(1e-14));
  CHECK(eval(spec, 1, x, 2, 0.3).alpha == doctest::Approx(1.0 - std::sqrt(0.3)).epsilon(1e-14));
}
