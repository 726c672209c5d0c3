// Small tape-based reverse-mode differentiation over dense matrices. Nodes
// carry names so a non-finite value or gradient can be traced to its origin.
#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

#include "oemdm/core.hpp"

namespace oemdm::ad {

using Mat = Eigen::MatrixXd;

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Mat& upstream)>;

  Var constant(Mat value, const std::string& name);
  // A differentiable input; its gradient is read back with grad().
  Var leaf(Mat value, const std::string& name);
  Var push(Mat value, const std::string& name, std::initializer_list<Var> inputs, Backward back);
  Var push(Mat value, const std::string& name, const std::vector<Var>& inputs, Backward back);

  const Mat& value(Var v) const { return nodes_[v.id].value; }
  double scalar(Var v) const { return nodes_[v.id].value(0, 0); }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  // Zero matrix of the right shape when nothing flowed into v.
  Mat grad(Var v) const;
  void accumulate(Var v, const Mat& g);
  void backward(Var root);

  // Prefix prepended to node names while alive.
  class Scope {
   public:
    Scope(Tape& tape, const std::string& label);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape& tape_;
    std::size_t saved_;
  };

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::string name;
    Mat value;
    Mat grad;
    bool has_grad = false;
    bool needs_grad = false;
    Backward back;
  };
  std::string qualified(const std::string& name) const;
  std::vector<Node> nodes_;
  std::string prefix_;
};

Var matmul(Tape& tp, Var a, Var b);
Var matmul_nt(Tape& tp, Var a, Var b);  // a * b^T
Var add(Tape& tp, Var a, Var b);
Var sub(Tape& tp, Var a, Var b);
Var hadamard(Tape& tp, Var a, Var b);
Var scale(Tape& tp, Var a, double c);
Var add_scalar(Tape& tp, Var a, double c);
Var add_row(Tape& tp, Var a, Var row);  // broadcast a 1xN row over every row of a
Var layer_norm(Tape& tp, Var x, Var gain, Var bias, double eps = 1e-5);
Var gelu(Tape& tp, Var x);
Var softmax_rows(Tape& tp, Var x);
Var log_softmax_rows(Tape& tp, Var x);
Var slice_cols(Tape& tp, Var x, Eigen::Index start, Eigen::Index count);
Var concat_cols(Tape& tp, const std::vector<Var>& parts);
Var gather_rows(Tape& tp, Var table, const std::vector<int>& rows);
Var pick(Tape& tp, Var x, const std::vector<int>& cols);  // column vector of x(i, cols[i])
Var log(Tape& tp, Var x);
Var log_one_minus_exp(Tape& tp, Var x);  // log(1 - e^x) for x < 0
Var norm_sig(Tape& tp, Var column);       // sigmoid minus its mean over rows
Var dot(Tape& tp, Var a, Var b);          // 1x1 sum of the elementwise product
Var sum(Tape& tp, Var a);

}  // namespace oemdm::ad
