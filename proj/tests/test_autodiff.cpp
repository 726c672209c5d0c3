#include <doctest.h>

#include <cmath>
#include <functional>

#include "oemdm/autodiff.hpp"

using namespace oemdm;
using namespace oemdm::ad;

namespace {

Mat random_mat(Eigen::Index r, Eigen::Index c, RandomStream& rng, double scale = 1.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

using Op = std::function<Var(Tape&, const std::vector<Var>&)>;

// Contracts the op's output with a fixed random weight matrix so every output
// entry contributes, then compares the tape gradient of every input with
// central differences.
double max_grad_error(const Op& op, std::vector<Mat> inputs, std::uint64_t seed) {
  RandomStream rng(seed);
  Mat weights;
  auto evaluate = [&](const std::vector<Mat>& xs, std::vector<Mat>* grads) {
    Tape tape;
    std::vector<Var> vars;
    for (std::size_t k = 0; k < xs.size(); ++k) vars.push_back(tape.leaf(xs[k], "in" + std::to_string(k)));
    Var out = op(tape, vars);
    if (weights.size() == 0) weights = random_mat(tape.value(out).rows(), tape.value(out).cols(), rng);
    Var w = tape.constant(weights, "w");
    Var loss = dot(tape, out, w);
    if (grads) {
      tape.backward(loss);
      for (Var v : vars) grads->push_back(tape.grad(v));
    }
    return tape.scalar(loss);
  };
  std::vector<Mat> analytic;
  evaluate(inputs, &analytic);
  const double h = 1e-6;
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      const double keep = inputs[k].data()[i];
      inputs[k].data()[i] = keep + h;
      const double up = evaluate(inputs, nullptr);
      inputs[k].data()[i] = keep - h;
      const double down = evaluate(inputs, nullptr);
      inputs[k].data()[i] = keep;
      const double fd = (up - down) / (2 * h);
      const double a = analytic[k].data()[i];
      worst = std::max(worst, std::abs(fd - a) / std::max(1.0, std::abs(fd)));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("elementwise and matrix ops match central differences") {
  RandomStream rng(1);
  const Mat a = random_mat(3, 4, rng), b = random_mat(4, 2, rng), c = random_mat(3, 4, rng);
  const Mat row = random_mat(1, 4, rng);
  const double tol = 1e-7;

  CHECK(max_grad_error([](Tape& t, const auto& v) { return matmul(t, v[0], v[1]); }, {a, b}, 1) < tol);
  CHECK(max_grad_error([](Tape& t, const auto& v) { return matmul_nt(t, v[0], v[1]); }, {a, c}, 2) < tol);
  CHECK(max_grad_error([](Tape& t, const auto& v) { return add(t, v[0], v[1]); }, {a, c}, 3) < tol);
  CHECK(max_grad_error([](Tape& t, const auto& v) { return sub(t, v[0], v[1]); }, {a, c}, 4) < tol);
  CHECK(max_grad_error([](Tape& t, const auto& v) { return hadamard(t, v[0], v[1]); }, {a, c}, 5) < tol);
  CHECK(max_grad_error([](Tape& t, const auto& v) { return scale(t, v[0], -2.5); }, {a}, 6) < tol);
  CHECK(max_grad_error([](Tape& t, const auto& v) { return add_scalar(t, v[0], 0.3); }, {a}, 7) < tol);
  CHECK(max_grad_error([](Tape& t, const auto& v) { return add_row(t, v[0], v[1]); }, {a, row}, 8) < tol);
  CHECK(max_grad_error([](Tape& t, const auto& v) { return gelu(t, v[0]); }, {a}, 9) < tol);
  CHECK(max_grad_error([](Tape& t, const auto& v) { return sum(t, v[0]); }, {a}, 10) < tol);
}

TEST_CASE("normalisation and softmax ops match central differences") {
  RandomStream rng(2);
  const Mat x = random_mat(3, 5, rng), g = random_mat(1, 5, rng), b = random_mat(1, 5, rng);
  const double tol = 1e-7;
  CHECK(max_grad_error([](Tape& t, const auto& v) { return layer_norm(t, v[0], v[1], v[2]); }, {x, g, b}, 1) < tol);
  CHECK(max_grad_error([](Tape& t, const auto& v) { return softmax_rows(t, v[0]); }, {x}, 2) < tol);
  CHECK(max_grad_error([](Tape& t, const auto& v) { return log_softmax_rows(t, v[0]); }, {x}, 3) < tol);
  const Mat col = random_mat(6, 1, rng, 2.0);
  CHECK(max_grad_error([](Tape& t, const auto& v) { return norm_sig(t, v[0]); }, {col}, 4) < tol);
}

TEST_CASE("indexing ops match central differences") {
  RandomStream rng(3);
  const Mat x = random_mat(4, 5, rng), y = random_mat(4, 2, rng);
  const double tol = 1e-7;
  CHECK(max_grad_error([](Tape& t, const auto& v) { return slice_cols(t, v[0], 1, 3); }, {x}, 1) < tol);
  CHECK(max_grad_error([](Tape& t, const auto& v) { return concat_cols(t, {v[0], v[1]}); }, {x, y}, 2) < tol);
  CHECK(max_grad_error([](Tape& t, const auto& v) { return gather_rows(t, v[0], {3, 0, 3}); }, {x}, 3) < tol);
  CHECK(max_grad_error([](Tape& t, const auto& v) { return pick(t, v[0], {4, 0, 2, 2}); }, {x}, 4) < tol);
}

TEST_CASE("log ops match central differences") {
  Mat pos(2, 3);
  pos << 0.3, 1.7, 4.0, 0.01, 2.2, 0.9;
  CHECK(max_grad_error([](Tape& t, const auto& v) { return log(t, v[0]); }, {pos}, 1) < 1e-6);
  Mat neg(2, 2);
  neg << -0.1, -2.0, -0.7, -5.0;
  CHECK(max_grad_error([](Tape& t, const auto& v) { return log_one_minus_exp(t, v[0]); }, {neg}, 2) < 1e-6);
}

TEST_CASE("values of a few ops") {
  Tape t;
  Mat col(2, 1);
  col << 1.0, -1.0;
  const Mat ns = t.value(norm_sig(t, t.constant(col, "c")));
  CHECK(ns(0, 0) == doctest::Approx(0.231058).epsilon(1e-5));
  CHECK(ns(0, 0) + ns(1, 0) == doctest::Approx(0.0));
  Mat x(1, 3);
  x << 1.0, 2.0, 3.0;
  const Mat sm = t.value(softmax_rows(t, t.constant(x, "x")));
  CHECK(sm.sum() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(sm(0, 2) == doctest::Approx(std::exp(3.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0))));
}

TEST_CASE("constants receive no gradient; gradients accumulate over reuse") {
  Tape t;
  Mat one = Mat::Constant(1, 1, 2.0);
  Var c = t.constant(one, "c");
  Var l = t.leaf(one, "l");
  Var y = add(t, hadamard(t, l, l), hadamard(t, c, l));  // l^2 + c l
  t.backward(y);
  CHECK(t.grad(l)(0, 0) == doctest::Approx(2 * 2.0 + 2.0));
  CHECK_FALSE(t.needs_grad(c));
  CHECK(t.grad(c)(0, 0) == 0.0);
}

TEST_CASE("non-finite values are reported with the node name") {
  Tape t;
  Mat z = Mat::Constant(1, 1, 0.0);
  Var v = t.leaf(z, "zero_input");
  try {
    Tape::Scope scope(t, "probe");
    Var bad = log(t, v);
    t.backward(bad);
    FAIL("expected a non-finite error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NonFinite);
    CHECK(std::string(e.what()).find("probe") != std::string::npos);
  }
}
