// Denoisers (tabular for the oracle suites, a small transformer for training),
// the detached feature extractor, the two schedule heads, and a
// finite-difference gradient checker.
#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "oemdm/autodiff.hpp"
#include "oemdm/diffusion.hpp"
#include "oemdm/schedulers.hpp"

namespace oemdm {

struct ModelConfig {
  int vocab_size = 2;  // real tokens; the embedding table has one extra row for the mask
  int length = 8;
  int width = 64;
  int heads = 4;
  int blocks = 2;
  int ff_mult = 4;
};

enum class ParamGroup { Backbone, Phi, Psi };
const char* group_name(ParamGroup g);

template <class T>
struct BlockT {
  T ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;

  template <class Self, class F>
  static void each(Self& s, const std::string& p, F&& f) {
    f(p + ".ln1_g", s.ln1_g);
    f(p + ".ln1_b", s.ln1_b);
    f(p + ".wq", s.wq);
    f(p + ".bq", s.bq);
    f(p + ".wk", s.wk);
    f(p + ".bk", s.bk);
    f(p + ".wv", s.wv);
    f(p + ".bv", s.bv);
    f(p + ".wo", s.wo);
    f(p + ".bo", s.bo);
    f(p + ".ln2_g", s.ln2_g);
    f(p + ".ln2_b", s.ln2_b);
    f(p + ".w1", s.w1);
    f(p + ".b1", s.b1);
    f(p + ".w2", s.w2);
    f(p + ".b2", s.b2);
  }
};

template <class T>
struct HeadT {
  BlockT<T> block;
  T ln_g, ln_b, w_out, b_out;

  template <class Self, class F>
  static void each(Self& s, const std::string& p, F&& f) {
    BlockT<T>::each(s.block, p + ".block", f);
    f(p + ".ln_g", s.ln_g);
    f(p + ".ln_b", s.ln_b);
    f(p + ".w_out", s.w_out);
    f(p + ".b_out", s.b_out);
  }
};

template <class T>
struct ModelT {
  T tok_emb, pos_emb;
  std::vector<BlockT<T>> blocks;
  T lnf_g, lnf_b, w_out, b_out;
  HeadT<T> phi, psi;

  // f(name, group, field) in a fixed order shared by every instantiation.
  template <class Self, class F>
  static void each(Self& s, F&& f) {
    auto backbone = [&](const std::string& n, auto& v) { f(n, ParamGroup::Backbone, v); };
    backbone("tok_emb", s.tok_emb);
    backbone("pos_emb", s.pos_emb);
    for (std::size_t b = 0; b < s.blocks.size(); ++b) BlockT<T>::each(s.blocks[b], "block" + std::to_string(b), backbone);
    backbone("lnf_g", s.lnf_g);
    backbone("lnf_b", s.lnf_b);
    backbone("out_w", s.w_out);
    backbone("out_b", s.b_out);
    HeadT<T>::each(s.phi, "phi", [&](const std::string& n, auto& v) { f(n, ParamGroup::Phi, v); });
    HeadT<T>::each(s.psi, "psi", [&](const std::string& n, auto& v) { f(n, ParamGroup::Psi, v); });
  }
};

using Mat = ad::Mat;

struct ModelParams {
  ModelConfig config;
  ModelT<Mat> w;

  // Every entry zero: gradient buffers and optimizer moments.
  static ModelParams zeros(const ModelConfig& config);
  // Identity layer norms, everything else zero.
  static ModelParams shaped(const ModelConfig& config);
  // Fan-in scaled uniform init. Head output layers start at zero (so every
  // exponent equals c1) unless random_heads is set.
  static ModelParams init(const ModelConfig& config, RandomStream rng, bool random_heads = false);

  std::vector<Mat*> tensors();
  std::vector<const Mat*> tensors() const;
  std::vector<std::string> names() const;
  std::vector<ParamGroup> groups() const;
  std::size_t scalar_count() const;
  void set_zero();
};

void validate_config(const ModelConfig& config);

// Per-call dropout; a null pointer or rate 0 disables it.
struct Dropout {
  double rate = 0.0;
  RandomStream rng{0};
  std::uint64_t calls = 0;
};

// Tape handles for every parameter. Groups not listed as trainable become constants.
ModelT<ad::Var> bind(ad::Tape& tape, const ModelParams& params, bool backbone, bool phi, bool psi);

struct BackbonePass {
  ad::Var features;  // final-norm hidden states, L x width
  ad::Var logits;    // L x V over real tokens only
};

BackbonePass backbone_pass(ad::Tape& tape, const ModelT<ad::Var>& vars, const ModelConfig& config,
                           std::span<const Token> tokens, Dropout* dropout);
ad::Var head_pass(ad::Tape& tape, const HeadT<ad::Var>& head, const ModelConfig& config, ad::Var features,
                  Dropout* dropout);  // L x 1 raw scores

struct Features {
  Mat hidden;
  bool detached = true;
};

Features extract_features(const ModelParams& params, std::span<const Token> tokens);
Rows denoise(const ModelParams& params, const MaskedSequence& z);
std::vector<double> head_scores(const ModelParams& params, HeadRole role, const Features& features);

struct HeadVelocity {
  std::vector<double> exponent;
  std::vector<double> alpha;
  std::vector<double> velocity;
};
HeadVelocity head_velocity(std::span<const double> raw_scores, double c1, double c2, double t);
HeadVelocity head_velocity(const ModelParams& params, HeadRole role, const Features& features, double c1, double c2,
                           double t);

class NeuralDenoiser : public Denoiser {
 public:
  explicit NeuralDenoiser(std::shared_ptr<const ModelParams> params) : params_(std::move(params)) {}
  int vocab_size() const override { return params_->config.vocab_size; }
  Rows denoise(const MaskedSequence& z) const override { return oemdm::denoise(*params_, z); }

 private:
  std::shared_ptr<const ModelParams> params_;
};

class NeuralHead : public HeadFunction {
 public:
  NeuralHead(std::shared_ptr<const ModelParams> params, HeadRole role) : params_(std::move(params)), role_(role) {}
  std::vector<double> raw_scores(std::span<const Token> context) const override;

 private:
  std::shared_ptr<const ModelParams> params_;
  HeadRole role_;
};

// Explicit simplex row per (masked sequence, position).
class TabularDenoiser : public Denoiser {
 public:
  TabularDenoiser(int vocab_size, std::size_t length);
  static TabularDenoiser uniform(int vocab_size, std::size_t length);
  // Rows drawn as softmax(spread * normal noise).
  static TabularDenoiser random(int vocab_size, std::size_t length, RandomStream rng, double spread = 1.5);

  int vocab_size() const override { return vocab_; }
  std::size_t length() const { return length_; }
  Rows denoise(const MaskedSequence& z) const override;
  void set_row(const MaskedSequence& z, std::size_t position, std::span<const double> probs);
  std::uint64_t states() const { return states_; }

 private:
  int vocab_;
  std::size_t length_;
  std::uint64_t states_;
  std::vector<double> table_;  // states x length x vocab
};

// Puts all mass on one fixed sequence.
class MemorizingDenoiser : public Denoiser {
 public:
  MemorizingDenoiser(int vocab_size, Sequence target) : vocab_(vocab_size), target_(std::move(target)) {}
  int vocab_size() const override { return vocab_; }
  Rows denoise(const MaskedSequence& z) const override;

 private:
  int vocab_;
  Sequence target_;
};

// Head for tabular suites: its features are the context's integer code, and
// the scores are a fixed pseudo-random function of that code.
class TabularHead : public HeadFunction {
 public:
  TabularHead(std::uint64_t seed, int symbols, double scale = 2.0) : seed_(seed), symbols_(symbols), scale_(scale) {}
  std::vector<double> raw_scores(std::span<const Token> context) const override;

 private:
  std::uint64_t seed_;
  int symbols_;
  double scale_;
};

struct GradientCheckGroup {
  std::string label;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  std::string worst;
};

struct GradientCheckReport {
  std::vector<GradientCheckGroup> groups;
  double max_rel_error = 0.0;
  bool pass = false;
};

// Central differences on a random subsample of coordinates of each tensor
// group. `objective` must read the current tensor values.
struct FdTensor {
  Mat* value;
  const Mat* analytic;
  std::string name;
  std::string group;
};
GradientCheckReport finite_diff_check(const std::function<double()>& objective, const std::vector<FdTensor>& tensors,
                                      double step, double tolerance, std::size_t coords_per_group, RandomStream rng,
                                      double floor = 1e-6);

}  // namespace oemdm
