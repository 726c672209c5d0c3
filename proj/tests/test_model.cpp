#include <doctest.h>

#include <cmath>

#include "oemdm/model.hpp"
#include "oemdm/objective.hpp"
#include "oemdm/suites.hpp"

using namespace oemdm;

namespace {

ModelConfig tiny_config(int vocab = 3, int length = 4) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.length = length;
  c.width = 8;
  c.heads = 2;
  c.blocks = 1;
  c.ff_mult = 2;
  return c;
}

}  // namespace

TEST_CASE("tabular denoiser rows") {
  const auto u = TabularDenoiser::uniform(2, 3);
  const Rows r = u.denoise(MaskedSequence::all_masked(3, Vocabulary(2)));
  for (int i = 0; i < 3; ++i) {
    CHECK(r(i, 0) == doctest::Approx(0.5));
    CHECK(r(i, 1) == doctest::Approx(0.5));
    CHECK(r(i, 2) == 0.0);
  }
  const auto d = TabularDenoiser::random(3, 3, RandomStream(1));
  const MaskedSequence z({3, 3, 2}, 3);
  const Rows rz = d.denoise(z);
  CHECK(rz(2, 2) == 1.0);
  CHECK_NOTHROW(check_subs(rz, z));
}

TEST_CASE("neural denoiser satisfies the carry-over constraint and is deterministic") {
  const auto params = ModelParams::init(tiny_config(), RandomStream(5), true);
  const MaskedSequence z({3, 1, 3, 2}, 3);
  const Rows a = denoise(params, z);
  const Rows b = denoise(params, z);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
  CHECK(a(1, 1) == 1.0);
  CHECK(a(3, 2) == 1.0);
  for (int i = 0; i < 4; ++i) {
    CHECK(a(i, 3) == 0.0);
    CHECK(std::abs(a.row(i).sum() - 1.0) <= 1e-12);
  }
}

TEST_CASE("extract_features returns the denoiser's own hidden states") {
  const auto params = ModelParams::init(tiny_config(), RandomStream(6), true);
  const std::vector<Token> z = {3, 0, 3, 1};
  const Features f = extract_features(params, z);
  CHECK(f.detached);
  ad::Tape tape;
  const auto vars = bind(tape, params, true, true, true);
  const BackbonePass pass = backbone_pass(tape, vars, params.config, z, nullptr);
  CHECK((tape.value(pass.features) - f.hidden).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("head probe has no backbone gradient") {
  const auto params = ModelParams::init(tiny_config(), RandomStream(7), true);
  const Sequence x({0, 1, 2, 0});
  CHECK(stop_gradient_leak(params, x) == 0.0);
  CHECK(live_feature_sensitivity(params, x, 1e-5) > 1e-6);
}

TEST_CASE("fresh heads start every exponent at c1") {
  const auto params = ModelParams::init(tiny_config(), RandomStream(8));
  const Features f = extract_features(params, std::vector<Token>{0, 2, 1, 1});
  for (HeadRole role : {HeadRole::Forward, HeadRole::Reverse}) {
    const auto hv = head_velocity(params, role, f, 0.7, 0.65, 0.3);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(hv.exponent[i] == doctest::Approx(0.7).epsilon(1e-15));
      CHECK(hv.alpha[i] == doctest::Approx(1.0 - std::pow(0.3, 0.7)).epsilon(1e-14));
    }
  }
}

TEST_CASE("head velocity formulas and range") {
  // One large score against many small ones pushes norm_sig toward 1.
  std::vector<double> raw(1000, -40.0);
  raw[0] = 40.0;
  const auto hv = head_velocity(raw, 0.7, 0.65, 0.5);
  CHECK(hv.exponent[0] == doctest::Approx(1.35).epsilon(1e-3));
  CHECK(hv.velocity[0] == doctest::Approx(2.7).epsilon(1e-3));
  CHECK(hv.velocity[0] == doctest::Approx(hv.exponent[0] / 0.5).epsilon(1e-15));

  const auto params = ModelParams::init(tiny_config(), RandomStream(9), true);
  RandomStream rng(10);
  for (int k = 0; k < 50; ++k) {
    std::vector<Token> z(4);
    for (auto& tok : z) tok = static_cast<Token>(rng.below(4));
    const auto h = head_velocity(params, HeadRole::Forward, extract_features(params, z), 0.7, 0.65, 0.4);
    double mean = 0.0;
    for (double e : h.exponent) {
      CHECK(e > 0.05);
      CHECK(e < 1.35);
      mean += e / 4;
    }
    CHECK(mean == doctest::Approx(0.7).epsilon(1e-12));
  }
  CHECK_THROWS_AS(head_velocity(raw, 0.7, 0.65, 0.0), Error);
  CHECK_THROWS_AS(head_velocity(raw, 0.7, 0.65, 1.5), Error);
}

TEST_CASE("c2 = 0 gives no phi gradient") {
  auto fx = gradient_fixture(3, 4, 11);
  fx.settings.c2 = 0.0;
  ModelParams grads = ModelParams::zeros(fx.params.config);
  combined_objective(fx.params, fx.inputs, fx.settings, &grads);
  const auto groups = grads.groups();
  const auto ts = grads.tensors();
  double phi_max = 0.0, backbone_max = 0.0;
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const double m = ts[k]->cwiseAbs().maxCoeff();
    if (groups[k] == ParamGroup::Phi) phi_max = std::max(phi_max, m);
    if (groups[k] == ParamGroup::Backbone) backbone_max = std::max(backbone_max, m);
  }
  CHECK(phi_max == 0.0);
  CHECK(backbone_max > 0.0);
}

TEST_CASE("finite_diff_check on a quadratic probe") {
  Mat x(3, 2), g(3, 2);
  x << 0.5, -1.0, 2.0, 0.1, -0.3, 1.2;
  Mat a(3, 2);
  a << 1.0, 2.0, 0.5, 3.0, 1.5, 0.25;
  // f = sum a .* x.^2, gradient 2 a .* x
  auto f = [&]() { return (a.array() * x.array().square()).sum(); };
  g = 2.0 * a.cwiseProduct(x);
  const auto rep = finite_diff_check(f, {FdTensor{&x, &g, "x", "probe"}}, 1e-5, 1e-8, 200, RandomStream(1));
  CHECK(rep.pass);
  CHECK(rep.max_rel_error <= 1e-8);
}

TEST_CASE("objective gradient on V=3, L=4 matches central differences") {
  auto fx = gradient_fixture(3, 4, 12);
  const auto rep = check_objective_gradient(fx, 1e-5, 1e-4, 200, 1e-6, 3);
  CHECK(rep.pass);
  CHECK(rep.max_rel_error <= 1e-4);
  CHECK(rep.groups.size() >= 3);
}

TEST_CASE("parameter init is seeded and init/zeros/shaped differ as documented") {
  const auto c = tiny_config();
  const auto a = ModelParams::init(c, RandomStream(1));
  const auto b = ModelParams::init(c, RandomStream(1));
  const auto ta = a.tensors(), tb = b.tensors();
  for (std::size_t k = 0; k < ta.size(); ++k) CHECK((*ta[k] - *tb[k]).cwiseAbs().maxCoeff() == 0.0);
  const auto z = ModelParams::zeros(c);
  for (const Mat* m : z.tensors()) CHECK(m->cwiseAbs().maxCoeff() == 0.0);
  const auto s = ModelParams::shaped(c);
  CHECK(s.w.lnf_g.minCoeff() == 1.0);
  CHECK(a.names().size() == ta.size());
  CHECK(a.scalar_count() > 0);
}
