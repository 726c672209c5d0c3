#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "oemdm/core.hpp"

using namespace oemdm;

namespace {

// Brute force over every (T+1)^L state path: keep the absorbing ones.
std::size_t count_absorbing_by_filter(const Sequence& x, const Vocabulary& vocab, int steps) {
  const std::size_t L = x.length();
  const std::uint64_t per_state = std::uint64_t{1} << L;
  std::uint64_t total = 1;
  for (int k = 0; k <= steps; ++k) total *= per_state;
  std::size_t count = 0;
  for (std::uint64_t code = 0; code < total; ++code) {
    std::uint64_t c = code;
    std::uint64_t prev = 0;
    bool ok = true;
    for (int k = 0; k <= steps; ++k) {
      const std::uint64_t bits = c % per_state;
      c /= per_state;
      if ((bits & prev) != prev) ok = false;  // masked set must grow with time
      prev = bits;
    }
    if (prev != per_state - 1) ok = false;  // fully masked at the last grid step
    if (ok) ++count;
  }
  (void)vocab;
  return count;
}

}  // namespace

TEST_CASE("masked set sizes and membership") {
  const Vocabulary v(2);
  CHECK(enumerate_masked_set(Sequence{}, v).size() == 1);
  const Sequence x2({0, 1});
  const auto s2 = enumerate_masked_set(x2, v);
  CHECK(s2.size() == 4);
  const Sequence x3({1, 0, 1});
  const auto s3 = enumerate_masked_set(x3, v);
  REQUIRE(s3.size() == 8);
  std::set<std::vector<Token>> distinct;
  for (const auto& z : s3) {
    CHECK(in_masked_set(z, x3));
    distinct.insert(z.tokens);
  }
  CHECK(distinct.size() == 8);
  CHECK_FALSE(in_masked_set(MaskedSequence({0, 2, 2}, 2), x3));
}

TEST_CASE("masked set guard") {
  const Vocabulary v(2);
  const Sequence big(std::vector<Token>(kMaskedSetMaxLength + 1, 0));
  CHECK_THROWS_AS(enumerate_masked_set(big, v), Error);
}

TEST_CASE("absorbing trajectory counts match a raw filter") {
  const Vocabulary v(2);
  struct Case {
    Sequence x;
    int steps;
    std::size_t expected;
  };
  const std::vector<Case> cases = {{Sequence({1}), 1, 2}, {Sequence({0, 1}), 2, 9}, {Sequence({0, 1}), 3, 16}};
  for (const auto& c : cases) {
    const auto trajs = enumerate_absorbing_trajectories(c.x, v, TimeGrid(c.steps));
    CHECK(trajs.size() == c.expected);
    CHECK(count_absorbing_by_filter(c.x, v, c.steps) == c.expected);
    for (const auto& tr : trajs) {
      CHECK(tr.valid());
      CHECK(tr.states.back().fully_masked());
    }
  }
}

TEST_CASE("trajectory validity rejects non-absorbing paths") {
  const Vocabulary v(2);
  Trajectory tr;
  tr.endpoint = Sequence({0, 1});
  tr.states = {MaskedSequence({2, 1}, 2), MaskedSequence({0, 2}, 2), MaskedSequence({2, 2}, 2)};
  CHECK_FALSE(tr.valid());
}

TEST_CASE("time grid") {
  const TimeGrid g(3);
  const double expected[] = {0.25, 0.5, 0.75, 1.0};
  for (int tau = 0; tau <= 3; ++tau) {
    CHECK(g.t_of(tau) == doctest::Approx(expected[tau]).epsilon(1e-15));
    CHECK(g.s_of(tau) == doctest::Approx(tau / 4.0).epsilon(1e-15));
  }
  CHECK_THROWS_AS(TimeGrid(0), Error);
}

TEST_CASE("sample_categorical") {
  RandomStream rng(1);
  const std::vector<double> point = {1.0, 0.0, 0.0};
  for (int i = 0; i < 100; ++i) CHECK(sample_categorical(point, rng) == 0);

  const std::vector<double> p = {0.3, 0.7};
  RandomStream a(42);
  const int n = 100000;
  int ones = 0;
  for (int i = 0; i < n; ++i) ones += static_cast<int>(sample_categorical(p, a));
  const double se = std::sqrt(0.3 * 0.7 / n);
  CHECK(std::abs(ones / double(n) - 0.7) < 4 * se);

  RandomStream b(9), c(9);
  for (int i = 0; i < 10000; ++i) CHECK(sample_categorical(p, b) == sample_categorical(p, c));

  CHECK_THROWS_AS(sample_categorical(std::vector<double>{0.5, 0.6}, a), Error);
}

TEST_CASE("random streams are keyed by tag") {
  RandomStream root(5);
  CHECK(root.derive("a").key() == RandomStream(5).derive("a").key());
  CHECK(root.derive("a").key() != root.derive("b").key());
  CHECK(root.derive("a", 1).key() != root.derive("a", 2).key());
  RandomStream u(3);
  for (int i = 0; i < 1000; ++i) {
    const double x = u.uniform();
    CHECK(x >= 0.0);
    CHECK(x < 1.0);
  }
}

TEST_CASE("encode is a base-(V+1) code") {
  const std::vector<Token> toks = {2, 0, 1};
  CHECK(encode(toks, 3) == 2 * 9 + 0 * 3 + 1);
}

TEST_CASE("enumerate_sequences is lexicographic") {
  const auto all = enumerate_sequences(Vocabulary(2), 2);
  REQUIRE(all.size() == 4);
  CHECK(std::is_sorted(all.begin(), all.end(),
                       [](const Sequence& a, const Sequence& b) { return a.tokens < b.tokens; }));
}
