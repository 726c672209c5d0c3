#include <doctest.h>

#include <cmath>

#include "oemdm/objective.hpp"
#include "oemdm/oracles.hpp"
#include "oemdm/suites.hpp"

using namespace oemdm;

TEST_CASE("per-token loss terms") {
  const auto matched = loss_terms(2.0, 2.0, 1.0);
  CHECK(matched.main == 0.0);
  CHECK(matched.velocity == 0.0);
  CHECK(velocity_term(2.0, 1.0) == doctest::Approx(2 * std::log(2.0) - 1).epsilon(1e-14));
  CHECK(velocity_term(2.0, 1.0) == doctest::Approx(0.3863).epsilon(1e-4));
  CHECK(velocity_term(1.0, 2.0) == doctest::Approx(1 - std::log(2.0)).epsilon(1e-14));
  CHECK(velocity_term(1.0, 2.0) == doctest::Approx(0.3069).epsilon(1e-4));
  CHECK(loss_terms(3.0, 1.0, 0.25).main == doctest::Approx(-3.0 * std::log(0.25)));
  try {
    loss_terms(1.0, 1.0, 0.0);
    FAIL("zero confidence must throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ZeroConfidence);
  }
}

TEST_CASE("velocity term near the diagonal stays non-negative and small") {
  for (double A : {1e-3, 0.5, 1.0, 7.0, 300.0}) {
    for (double rel : {1e-12, 1e-9, 1e-6, 1e-3}) {
      const double v = velocity_term(A, A * (1 + rel));
      CHECK(v >= 0.0);
      // Second-order expansion A rel^2 / 2.
      CHECK(v == doctest::Approx(0.5 * A * rel * rel).epsilon(1e-2).scale(1e-300));
    }
  }
}

TEST_CASE("rloo loss") {
  CHECK(rloo_loss(1.0, 1.0, 0.3, -2.0) == 0.0);
  CHECK(rloo_loss(1.5, 0.2, -1.0, -1.0) == 0.0);
  CHECK(rloo_loss(1.0, 0.0, 0.2, 0.0) == doctest::Approx(0.1).epsilon(1e-15));
}

TEST_CASE("two-atom KL matches a direct evaluation") {
  const PositionLaw fwd{PositionLaw::Kind::Power, 0.7};
  const PositionLaw rev{PositionLaw::Kind::Power, 1.3};
  const double s = 0.3, t = 0.55, c = 0.62;
  const double q = (std::pow(t, 0.7) - std::pow(s, 0.7)) / std::pow(t, 0.7);
  const double p = (std::pow(t, 1.3) - std::pow(s, 1.3)) / std::pow(t, 1.3);
  const double expected = q * std::log(q / (p * c)) + (1 - q) * std::log((1 - q) / (1 - p));
  CHECK(two_atom_kl(fwd, rev, c, s, t) == doctest::Approx(expected).epsilon(1e-13));
  CHECK(two_atom_kl(fwd, fwd, 1.0, s, t) == doctest::Approx(0.0).scale(1.0).epsilon(1e-15));
}

TEST_CASE("loss breakdown sums masked terms and scales by nothing else") {
  const auto d = TabularDenoiser::random(3, 3, RandomStream(4));
  const Sequence x({2, 0, 1});
  const MaskedSequence z({3, 0, 3}, 3);
  const Rows rows = d.denoise(z);
  const double t = 0.4;
  const Schedule f = instantiate(Polynomial{0.7}, 3, x.tokens);
  const Schedule r = instantiate(Linear{}, 3, z.tokens);
  const auto lb = loss_breakdown(x, z, rows, f, r, t);
  REQUIRE(lb.per_token.size() == 2);
  const double A = 0.7 / t, Ah = 1.0 / t;
  const double expect_main = -A * (std::log(rows(0, 2)) + std::log(rows(2, 1)));
  const double expect_vel = 2 * (A * (std::log(A) - std::log(Ah)) - (A - Ah));
  CHECK(lb.l_main == doctest::Approx(expect_main).epsilon(1e-13));
  CHECK(lb.l_velocity == doctest::Approx(expect_vel).epsilon(1e-13));
  CHECK(lb.total == doctest::Approx(expect_main + expect_vel).epsilon(1e-13));
}

TEST_CASE("nelbo_mc with a memorizing denoiser is zero") {
  const Sequence x({1, 0, 1, 1});
  const MemorizingDenoiser d(2, x);
  const auto est = nelbo_mc(x, d, Linear{}, Linear{}, 500, RandomStream(1));
  CHECK(est.mean == 0.0);
  CHECK(est.stderr_ == 0.0);
}

TEST_CASE("matched schedules give zero velocity loss per sample") {
  const auto d = TabularDenoiser::random(3, 3, RandomStream(2));
  const Sequence x({0, 2, 1});
  for (const SchedulerSpec& spec : {SchedulerSpec{Linear{}}, SchedulerSpec{Polynomial{0.7}}}) {
    const auto est = nelbo_mc(x, d, spec, spec, 2000, RandomStream(3));
    CHECK(est.l_velocity == 0.0);
  }
}

TEST_CASE("Monte Carlo bound sits above the exact negative log-likelihood") {
  const auto d = TabularDenoiser::random(3, 3, RandomStream(5));
  const Sequence x({1, 2, 0});
  // A fine grid stands in for the continuous-time chain.
  const double nll = -std::log(exact_likelihood(x, d, Linear{}, TimeGrid(512)));
  const auto est = nelbo_mc(x, d, Linear{}, Linear{}, 200000, RandomStream(6));
  CHECK(est.mean >= nll - 3 * est.stderr_);
}

TEST_CASE("discrete bound at T=256 agrees with the continuous estimate") {
  const auto d = TabularDenoiser::random(2, 2, RandomStream(7));
  const Sequence x({1, 0});
  const double exact = nelbo_discrete_exact(x, d, Linear{}, Linear{}, TimeGrid(256));
  const auto est = nelbo_mc(x, d, Linear{}, Linear{}, 200000, RandomStream(8));
  CHECK(std::abs(exact - est.mean) <= 4 * est.stderr_);
}

TEST_CASE("discrete bound of a memorizing denoiser is zero on any grid") {
  const Sequence x({0, 1, 1});
  const MemorizingDenoiser d(2, x);
  for (int T : {1, 5, 32})
    CHECK(nelbo_discrete_exact(x, d, Polynomial{0.7}, Polynomial{0.7}, TimeGrid(T)) == doctest::Approx(0.0).scale(1.0));
}

TEST_CASE("stderr shrinks by about sqrt(2) when n doubles") {
  const auto d = TabularDenoiser::random(3, 3, RandomStream(9));
  const Sequence x({2, 2, 0});
  // Matched schedules keep the integrand's variance finite; a mismatched pair
  // adds a velocity term growing like 1/t whose second moment diverges as
  // t_min -> 0, which makes the sample stderr itself unreliable.
  const auto a = nelbo_mc(x, d, Linear{}, Linear{}, 40000, RandomStream(10));
  const auto b = nelbo_mc(x, d, Linear{}, Linear{}, 80000, RandomStream(11));
  CHECK(a.stderr_ / b.stderr_ == doctest::Approx(std::sqrt(2.0)).epsilon(0.05));
}

TEST_CASE("combined objective assembles its parts and is deterministic") {
  auto fx = gradient_fixture(3, 4, 21);
  fx.inputs.z1.reset();
  fx.inputs.z2.reset();
  fx.inputs.rng = RandomStream(77);
  const auto a = combined_objective(fx.params, fx.inputs, fx.settings);
  const auto b = combined_objective(fx.params, fx.inputs, fx.settings);
  CHECK(a.objective == b.objective);
  CHECK(a.z1 == b.z1);
  CHECK(a.rloo == doctest::Approx(rloo_loss(a.loss1.total, a.loss2.total, a.logq1, a.logq2)).epsilon(1e-13));
  CHECK(a.objective == doctest::Approx(0.5 * (a.loss1.total + a.loss2.total) + a.rloo).epsilon(1e-13));
  CHECK(a.logq1 == doctest::Approx(phi_logprob(fx.params, fx.inputs.x, a.z1, fx.inputs.t, 0.7, 0.65)).epsilon(1e-13));
}

TEST_CASE("c2 = 0 removes the velocity loss") {
  auto fx = gradient_fixture(3, 4, 22);
  fx.settings.c1 = 1.0;
  fx.settings.c2 = 0.0;
  const auto r = combined_objective(fx.params, fx.inputs, fx.settings);
  CHECK(r.loss1.l_velocity == 0.0);
  CHECK(r.loss2.l_velocity == 0.0);
  for (double e : r.exponent_phi) CHECK(e == 1.0);
}
