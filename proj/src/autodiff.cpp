#include "oemdm/autodiff.hpp"

#include <cmath>

namespace oemdm::ad {

std::string Tape::qualified(const std::string& name) const { return prefix_.empty() ? name : prefix_ + "." + name; }

Tape::Scope::Scope(Tape& tape, const std::string& label) : tape_(tape), saved_(tape.prefix_.size()) {
  tape_.prefix_ = tape_.qualified(label);
}

Tape::Scope::~Scope() { tape_.prefix_.resize(saved_); }

Var Tape::constant(Mat value, const std::string& name) { return push(std::move(value), name, {}, nullptr); }

Var Tape::leaf(Mat value, const std::string& name) {
  Var v = push(std::move(value), name, {}, nullptr);
  nodes_[v.id].needs_grad = true;
  return v;
}

Var Tape::push(Mat value, const std::string& name, std::initializer_list<Var> inputs, Backward back) {
  return push(std::move(value), name, std::vector<Var>(inputs), std::move(back));
}

Var Tape::push(Mat value, const std::string& name, const std::vector<Var>& inputs, Backward back) {
  if (!value.allFinite()) throw Error(ErrorCode::NonFinite, "non-finite value at node '" + qualified(name) + "'");
  Node node;
  node.name = qualified(name);
  node.value = std::move(value);
  for (Var in : inputs) node.needs_grad = node.needs_grad || nodes_[in.id].needs_grad;
  if (node.needs_grad) node.back = std::move(back);
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Mat Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.has_grad) return n.grad;
  return Mat::Zero(n.value.rows(), n.value.cols());
}

void Tape::accumulate(Var v, const Mat& g) {
  Node& n = nodes_[v.id];
  if (!n.needs_grad) return;
  if (n.has_grad) {
    n.grad += g;
  } else {
    n.grad = g;
    n.has_grad = true;
  }
}

void Tape::backward(Var root) {
  if (nodes_[root.id].value.size() != 1) throw Error(ErrorCode::InvalidArgument, "backward needs a scalar root");
  accumulate(root, Mat::Ones(1, 1));
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.has_grad || !n.back) continue;
    if (!n.grad.allFinite()) throw Error(ErrorCode::NonFinite, "non-finite gradient at node '" + n.name + "'");
    // Callbacks only accumulate into earlier nodes, so n stays put.
    n.back(*this, n.grad);
  }
}

Var matmul(Tape& tp, Var a, Var b) {
  return tp.push(tp.value(a) * tp.value(b), "matmul", {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g * t.value(b).transpose());
    t.accumulate(b, t.value(a).transpose() * g);
  });
}

Var matmul_nt(Tape& tp, Var a, Var b) {
  return tp.push(tp.value(a) * tp.value(b).transpose(), "matmul_nt", {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g * t.value(b));
    t.accumulate(b, g.transpose() * t.value(a));
  });
}

Var add(Tape& tp, Var a, Var b) {
  return tp.push(tp.value(a) + tp.value(b), "add", {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Tape& tp, Var a, Var b) {
  return tp.push(tp.value(a) - tp.value(b), "sub", {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

Var hadamard(Tape& tp, Var a, Var b) {
  return tp.push(tp.value(a).cwiseProduct(tp.value(b)), "hadamard", {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g.cwiseProduct(t.value(b)));
    t.accumulate(b, g.cwiseProduct(t.value(a)));
  });
}

Var scale(Tape& tp, Var a, double c) {
  return tp.push(tp.value(a) * c, "scale", {a}, [a, c](Tape& t, const Mat& g) { t.accumulate(a, g * c); });
}

Var add_scalar(Tape& tp, Var a, double c) {
  return tp.push(tp.value(a).array() + c, "add_scalar", {a}, [a](Tape& t, const Mat& g) { t.accumulate(a, g); });
}

Var add_row(Tape& tp, Var a, Var row) {
  Mat out = tp.value(a).rowwise() + tp.value(row).row(0);
  return tp.push(std::move(out), "add_row", {a, row}, [a, row](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    t.accumulate(row, g.colwise().sum());
  });
}

Var layer_norm(Tape& tp, Var x, Var gain, Var bias, double eps) {
  const Mat& xv = tp.value(x);
  const Eigen::Index n = xv.cols();
  Mat xhat(xv.rows(), n);
  Eigen::VectorXd inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    double mu = xv.row(r).mean();
    Eigen::RowVectorXd c = xv.row(r).array() - mu;
    double var = c.squaredNorm() / static_cast<double>(n);
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = c * inv_std(r);
  }
  Mat out = (xhat.array().rowwise() * tp.value(gain).row(0).array()).rowwise() + tp.value(bias).row(0).array();
  return tp.push(std::move(out), "layer_norm", {x, gain, bias},
                 [x, gain, bias, xhat, inv_std, n](Tape& t, const Mat& g) {
                   t.accumulate(bias, g.colwise().sum());
                   t.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
                   Mat gx = g.array().rowwise() * t.value(gain).row(0).array();
                   Mat dx(gx.rows(), gx.cols());
                   for (Eigen::Index r = 0; r < gx.rows(); ++r) {
                     double m1 = gx.row(r).mean();
                     double m2 = gx.row(r).dot(xhat.row(r)) / static_cast<double>(n);
                     dx.row(r) = (gx.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r);
                   }
                   t.accumulate(x, dx);
                 });
}

Var gelu(Tape& tp, Var x) {
  // tanh approximation
  static constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  const Mat& xv = tp.value(x);
  Mat th = (k * (xv.array() + 0.044715 * xv.array().cube())).tanh();
  Mat out = 0.5 * xv.array() * (1.0 + th.array());
  return tp.push(std::move(out), "gelu", {x}, [x, th](Tape& t, const Mat& g) {
    const Mat& xv = t.value(x);
    auto sech2 = 1.0 - th.array().square();
    auto d = 0.5 * (1.0 + th.array()) + 0.5 * xv.array() * sech2 * k * (1.0 + 3.0 * 0.044715 * xv.array().square());
    t.accumulate(x, (g.array() * d).matrix());
  });
}

Var softmax_rows(Tape& tp, Var x) {
  const Mat& xv = tp.value(x);
  Mat p(xv.rows(), xv.cols());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    Eigen::RowVectorXd e = (xv.row(r).array() - xv.row(r).maxCoeff()).exp();
    p.row(r) = e / e.sum();
  }
  Mat keep = p;
  return tp.push(std::move(p), "softmax", {x}, [x, keep](Tape& t, const Mat& g) {
    Eigen::VectorXd inner = g.cwiseProduct(keep).rowwise().sum();
    Mat dx = keep.array() * (g.colwise() - inner).array();
    t.accumulate(x, dx);
  });
}

Var log_softmax_rows(Tape& tp, Var x) {
  const Mat& xv = tp.value(x);
  Mat out(xv.rows(), xv.cols());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    double m = xv.row(r).maxCoeff();
    double lse = m + std::log((xv.row(r).array() - m).exp().sum());
    out.row(r) = xv.row(r).array() - lse;
  }
  Mat probs = out.array().exp();
  return tp.push(std::move(out), "log_softmax", {x}, [x, probs](Tape& t, const Mat& g) {
    Eigen::VectorXd total = g.rowwise().sum();
    Mat dx = g - (probs.array().colwise() * total.array()).matrix();
    t.accumulate(x, dx);
  });
}

Var slice_cols(Tape& tp, Var x, Eigen::Index start, Eigen::Index count) {
  const Mat& xv = tp.value(x);
  Mat out = xv.middleCols(start, count);
  const Eigen::Index rows = xv.rows(), cols = xv.cols();
  return tp.push(std::move(out), "slice", {x}, [x, start, count, rows, cols](Tape& t, const Mat& g) {
    Mat full = Mat::Zero(rows, cols);
    full.middleCols(start, count) = g;
    t.accumulate(x, full);
  });
}

Var concat_cols(Tape& tp, const std::vector<Var>& parts) {
  Eigen::Index rows = tp.value(parts.front()).rows(), cols = 0;
  for (Var p : parts) cols += tp.value(p).cols();
  Mat out(rows, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    out.middleCols(at, tp.value(p).cols()) = tp.value(p);
    at += tp.value(p).cols();
  }
  return tp.push(std::move(out), "concat", parts, [parts](Tape& t, const Mat& g) {
    Eigen::Index at = 0;
    for (Var p : parts) {
      const Eigen::Index c = t.value(p).cols();
      t.accumulate(p, g.middleCols(at, c));
      at += c;
    }
  });
}

Var gather_rows(Tape& tp, Var table, const std::vector<int>& rows) {
  const Mat& tv = tp.value(table);
  Mat out(static_cast<Eigen::Index>(rows.size()), tv.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = tv.row(rows[i]);
  return tp.push(std::move(out), "gather", {table}, [table, rows](Tape& t, const Mat& g) {
    Mat full = Mat::Zero(t.value(table).rows(), t.value(table).cols());
    for (std::size_t i = 0; i < rows.size(); ++i) full.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(table, full);
  });
}

Var pick(Tape& tp, Var x, const std::vector<int>& cols) {
  const Mat& xv = tp.value(x);
  Mat out(xv.rows(), 1);
  for (Eigen::Index r = 0; r < xv.rows(); ++r) out(r, 0) = xv(r, cols[static_cast<std::size_t>(r)]);
  return tp.push(std::move(out), "pick", {x}, [x, cols](Tape& t, const Mat& g) {
    Mat full = Mat::Zero(t.value(x).rows(), t.value(x).cols());
    for (Eigen::Index r = 0; r < full.rows(); ++r) full(r, cols[static_cast<std::size_t>(r)]) = g(r, 0);
    t.accumulate(x, full);
  });
}

Var log(Tape& tp, Var x) {
  return tp.push(tp.value(x).array().log(), "log", {x},
                 [x](Tape& t, const Mat& g) { t.accumulate(x, g.cwiseQuotient(t.value(x))); });
}

Var log_one_minus_exp(Tape& tp, Var x) {
  const Mat& xv = tp.value(x);
  Mat out = xv.unaryExpr([](double u) { return std::log(-std::expm1(u)); });
  return tp.push(std::move(out), "log1mexp", {x}, [x](Tape& t, const Mat& g) {
    // d/du log(1 - e^u) = 1 / (1 - e^{-u})
    Mat d = t.value(x).unaryExpr([](double u) { return -1.0 / std::expm1(-u); });
    t.accumulate(x, g.cwiseProduct(d));
  });
}

Var norm_sig(Tape& tp, Var column) {
  const Mat& v = tp.value(column);
  Mat sig = v.unaryExpr([](double a) { return 1.0 / (1.0 + std::exp(-a)); });
  Mat out = sig.array() - sig.mean();
  return tp.push(std::move(out), "norm_sig", {column}, [column, sig](Tape& t, const Mat& g) {
    Mat centered = g.array() - g.mean();
    Mat d = sig.array() * (1.0 - sig.array());
    t.accumulate(column, centered.cwiseProduct(d));
  });
}

Var dot(Tape& tp, Var a, Var b) {
  Mat out(1, 1);
  out(0, 0) = tp.value(a).cwiseProduct(tp.value(b)).sum();
  return tp.push(std::move(out), "dot", {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, t.value(b) * g(0, 0));
    t.accumulate(b, t.value(a) * g(0, 0));
  });
}

Var sum(Tape& tp, Var a) {
  Mat out(1, 1);
  out(0, 0) = tp.value(a).sum();
  return tp.push(std::move(out), "sum", {a}, [a](Tape& t, const Mat& g) {
    t.accumulate(a, Mat::Constant(t.value(a).rows(), t.value(a).cols(), g(0, 0)));
  });
}

}  // namespace oemdm::ad
