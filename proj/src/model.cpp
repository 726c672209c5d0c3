#include "oemdm/model.hpp"

#include <cmath>
#include <algorithm>
#include <cstdio>
#include <numeric>

namespace oemdm {

using ad::Tape;
using ad::Var;

const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::Backbone: return "backbone";
    case ParamGroup::Phi: return "phi";
    case ParamGroup::Psi: return "psi";
  }
  return "?";
}

void validate_config(const ModelConfig& c) {
  if (c.vocab_size < 1 || c.length < 1 || c.width < 1 || c.heads < 1 || c.blocks < 0 || c.ff_mult < 1)
    throw Error(ErrorCode::InvalidArgument, "model dimensions must be positive");
  if (c.width % c.heads != 0) throw Error(ErrorCode::InvalidArgument, "width must be divisible by the head count");
}

namespace {

void shape_block(BlockT<Mat>& b, int d, int ff) {
  b.ln1_g = Mat::Ones(1, d);
  b.ln1_b = Mat::Zero(1, d);
  for (Mat* w : {&b.wq, &b.wk, &b.wv, &b.wo}) *w = Mat::Zero(d, d);
  for (Mat* bias : {&b.bq, &b.bk, &b.bv, &b.bo}) *bias = Mat::Zero(1, d);
  b.ln2_g = Mat::Ones(1, d);
  b.ln2_b = Mat::Zero(1, d);
  b.w1 = Mat::Zero(d, ff);
  b.b1 = Mat::Zero(1, ff);
  b.w2 = Mat::Zero(ff, d);
  b.b2 = Mat::Zero(1, d);
}

void shape_head(HeadT<Mat>& h, int d, int ff) {
  shape_block(h.block, d, ff);
  h.ln_g = Mat::Ones(1, d);
  h.ln_b = Mat::Zero(1, d);
  h.w_out = Mat::Zero(d, 1);
  h.b_out = Mat::Zero(1, 1);
}

void fill_uniform(Mat& m, double bound, RandomStream& rng) {
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = rng.uniform(-bound, bound);
}

void init_block(BlockT<Mat>& b, RandomStream rng) {
  const double d = static_cast<double>(b.wq.rows());
  const double ff = static_cast<double>(b.w2.rows());
  int k = 0;
  for (Mat* w : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w1}) {
    RandomStream r = rng.derive(k++);
    fill_uniform(*w, 1.0 / std::sqrt(d), r);
  }
  RandomStream r = rng.derive(k);
  fill_uniform(b.w2, 1.0 / std::sqrt(ff), r);
}

}  // namespace

ModelParams ModelParams::zeros(const ModelConfig& c) {
  ModelParams p = shaped(c);
  p.set_zero();
  return p;
}

ModelParams ModelParams::shaped(const ModelConfig& c) {
  validate_config(c);
  ModelParams p;
  p.config = c;
  const int d = c.width, ff = c.width * c.ff_mult;
  p.w.tok_emb = Mat::Zero(c.vocab_size + 1, d);
  p.w.pos_emb = Mat::Zero(c.length, d);
  p.w.blocks.resize(static_cast<std::size_t>(c.blocks));
  for (auto& b : p.w.blocks) shape_block(b, d, ff);
  p.w.lnf_g = Mat::Ones(1, d);
  p.w.lnf_b = Mat::Zero(1, d);
  p.w.w_out = Mat::Zero(d, c.vocab_size);
  p.w.b_out = Mat::Zero(1, c.vocab_size);
  shape_head(p.w.phi, d, ff);
  shape_head(p.w.psi, d, ff);
  return p;
}

ModelParams ModelParams::init(const ModelConfig& c, RandomStream rng, bool random_heads) {
  ModelParams p = shaped(c);
  const double d = c.width;
  RandomStream emb = rng.derive("tok_emb");
  fill_uniform(p.w.tok_emb, 1.0 / std::sqrt(d), emb);
  RandomStream pos = rng.derive("pos_emb");
  fill_uniform(p.w.pos_emb, 1.0 / std::sqrt(d), pos);
  for (std::size_t b = 0; b < p.w.blocks.size(); ++b) init_block(p.w.blocks[b], rng.derive("block", b));
  RandomStream out = rng.derive("out");
  fill_uniform(p.w.w_out, 1.0 / std::sqrt(d), out);
  init_block(p.w.phi.block, rng.derive("phi"));
  init_block(p.w.psi.block, rng.derive("psi"));
  if (random_heads) {
    for (auto [head, tag] : {std::pair{&p.w.phi, "phi_out"}, std::pair{&p.w.psi, "psi_out"}}) {
      RandomStream r = rng.derive(tag);
      fill_uniform(head->w_out, 1.0 / std::sqrt(d), r);
      fill_uniform(head->b_out, 0.5, r);
      fill_uniform(head->ln_b, 0.5, r);
    }
  }
  return p;
}

std::vector<Mat*> ModelParams::tensors() {
  std::vector<Mat*> out;
  ModelT<Mat>::each(w, [&](const std::string&, ParamGroup, Mat& m) { out.push_back(&m); });
  return out;
}

std::vector<const Mat*> ModelParams::tensors() const {
  std::vector<const Mat*> out;
  ModelT<Mat>::each(w, [&](const std::string&, ParamGroup, const Mat& m) { out.push_back(&m); });
  return out;
}

std::vector<std::string> ModelParams::names() const {
  std::vector<std::string> out;
  ModelT<Mat>::each(w, [&](const std::string& n, ParamGroup, const Mat&) { out.push_back(n); });
  return out;
}

std::vector<ParamGroup> ModelParams::groups() const {
  std::vector<ParamGroup> out;
  ModelT<Mat>::each(w, [&](const std::string&, ParamGroup g, const Mat&) { out.push_back(g); });
  return out;
}

std::size_t ModelParams::scalar_count() const {
  std::size_t n = 0;
  for (const Mat* m : tensors()) n += static_cast<std::size_t>(m->size());
  return n;
}

void ModelParams::set_zero() {
  for (Mat* m : tensors()) m->setZero();
}

ModelT<Var> bind(Tape& tape, const ModelParams& params, bool backbone, bool phi, bool psi) {
  ModelT<Var> vars;
  vars.blocks.resize(params.w.blocks.size());
  std::vector<Var*> slots;
  ModelT<Var>::each(vars, [&](const std::string&, ParamGroup, Var& v) { slots.push_back(&v); });
  std::size_t k = 0;
  ModelT<Mat>::each(params.w, [&](const std::string& name, ParamGroup g, const Mat& m) {
    bool trainable = (g == ParamGroup::Backbone && backbone) || (g == ParamGroup::Phi && phi) ||
                     (g == ParamGroup::Psi && psi);
    *slots[k++] = trainable ? tape.leaf(m, name) : tape.constant(m, name);
  });
  return vars;
}

namespace {

Var maybe_dropout(Tape& tape, Var x, Dropout* dropout) {
  if (!dropout || dropout->rate <= 0.0) return x;
  const Mat& v = tape.value(x);
  RandomStream r = dropout->rng.derive(dropout->calls++);
  const double keep = 1.0 - dropout->rate;
  Mat mask(v.rows(), v.cols());
  for (Eigen::Index j = 0; j < v.cols(); ++j)
    for (Eigen::Index i = 0; i < v.rows(); ++i) mask(i, j) = r.uniform() < keep ? 1.0 / keep : 0.0;
  return ad::hadamard(tape, x, tape.constant(std::move(mask), "dropout_mask"));
}

Var block_forward(Tape& tape, const BlockT<Var>& b, Var h, int heads, Dropout* dropout) {
  const Eigen::Index d = tape.value(h).cols();
  const Eigen::Index dh = d / heads;
  Var a = ad::layer_norm(tape, h, b.ln1_g, b.ln1_b);
  Var q = ad::add_row(tape, ad::matmul(tape, a, b.wq), b.bq);
  Var k = ad::add_row(tape, ad::matmul(tape, a, b.wk), b.bk);
  Var v = ad::add_row(tape, ad::matmul(tape, a, b.wv), b.bv);
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int hd = 0; hd < heads; ++hd) {
    Tape::Scope scope(tape, "head" + std::to_string(hd));
    Var qh = ad::slice_cols(tape, q, hd * dh, dh);
    Var kh = ad::slice_cols(tape, k, hd * dh, dh);
    Var vh = ad::slice_cols(tape, v, hd * dh, dh);
    Var p = ad::softmax_rows(tape, ad::scale(tape, ad::matmul_nt(tape, qh, kh), inv_sqrt));
    outs.push_back(ad::matmul(tape, p, vh));
  }
  Var attn = ad::add_row(tape, ad::matmul(tape, ad::concat_cols(tape, outs), b.wo), b.bo);
  h = ad::add(tape, h, maybe_dropout(tape, attn, dropout));
  Var a2 = ad::layer_norm(tape, h, b.ln2_g, b.ln2_b);
  Var hidden = ad::gelu(tape, ad::add_row(tape, ad::matmul(tape, a2, b.w1), b.b1));
  Var ff = ad::add_row(tape, ad::matmul(tape, hidden, b.w2), b.b2);
  return ad::add(tape, h, maybe_dropout(tape, ff, dropout));
}

}  // namespace

BackbonePass backbone_pass(Tape& tape, const ModelT<Var>& vars, const ModelConfig& config,
                           std::span<const Token> tokens, Dropout* dropout) {
  if (tokens.size() != static_cast<std::size_t>(config.length))
    throw Error(ErrorCode::InvalidArgument, "input length does not match the model length");
  std::vector<int> ids(tokens.begin(), tokens.end());
  for (int id : ids)
    if (id < 0 || id > config.vocab_size) throw Error(ErrorCode::InvalidArgument, "token id out of range");
  Tape::Scope scope(tape, "backbone");
  Var h = ad::add(tape, ad::gather_rows(tape, vars.tok_emb, ids), vars.pos_emb);
  for (std::size_t b = 0; b < vars.blocks.size(); ++b) {
    Tape::Scope bs(tape, "block" + std::to_string(b));
    h = block_forward(tape, vars.blocks[b], h, config.heads, dropout);
  }
  Var features = ad::layer_norm(tape, h, vars.lnf_g, vars.lnf_b);
  Var logits = ad::add_row(tape, ad::matmul(tape, features, vars.w_out), vars.b_out);
  return {features, logits};
}

Var head_pass(Tape& tape, const HeadT<Var>& head, const ModelConfig& config, Var features, Dropout* dropout) {
  Var h = block_forward(tape, head.block, features, config.heads, dropout);
  Var n = ad::layer_norm(tape, h, head.ln_g, head.ln_b);
  return ad::add_row(tape, ad::matmul(tape, n, head.w_out), head.b_out);
}

Features extract_features(const ModelParams& params, std::span<const Token> tokens) {
  Tape tape;
  ModelT<Var> vars = bind(tape, params, false, false, false);
  BackbonePass pass = backbone_pass(tape, vars, params.config, tokens, nullptr);
  return {tape.value(pass.features), true};
}

Rows denoise(const ModelParams& params, const MaskedSequence& z) {
  Tape tape;
  ModelT<Var> vars = bind(tape, params, false, false, false);
  BackbonePass pass = backbone_pass(tape, vars, params.config, z.tokens, nullptr);
  const Mat& logits = tape.value(pass.logits);
  Rows raw = Rows::Zero(logits.rows(), logits.cols() + 1);
  raw.leftCols(logits.cols()) = logits;
  return apply_subs(raw, z);
}

std::vector<double> head_scores(const ModelParams& params, HeadRole role, const Features& features) {
  if (!features.detached) throw Error(ErrorCode::InvalidArgument, "heads only consume detached features");
  Tape tape;
  ModelT<Var> vars = bind(tape, params, false, false, false);
  Var f = tape.constant(features.hidden, "features");
  Var raw = head_pass(tape, role == HeadRole::Forward ? vars.phi : vars.psi, params.config, f, nullptr);
  const Mat& r = tape.value(raw);
  return std::vector<double>(r.data(), r.data() + r.size());
}

HeadVelocity head_velocity(std::span<const double> raw_scores, double c1, double c2, double t) {
  if (!(t > 0.0 && t <= 1.0)) throw Error(ErrorCode::InvalidArgument, "head velocity needs t in (0,1]");
  HeadVelocity hv;
  hv.exponent = head_exponents(raw_scores, c1, c2);
  const double lt = std::log(t);
  for (double e : hv.exponent) {
    hv.alpha.push_back(-std::expm1(e * lt));
    hv.velocity.push_back(e / t);
  }
  return hv;
}

HeadVelocity head_velocity(const ModelParams& params, HeadRole role, const Features& features, double c1, double c2,
                           double t) {
  std::vector<double> raw = head_scores(params, role, features);
  return head_velocity(raw, c1, c2, t);
}

std::vector<double> NeuralHead::raw_scores(std::span<const Token> context) const {
  return head_scores(*params_, role_, extract_features(*params_, context));
}

TabularDenoiser::TabularDenoiser(int vocab_size, std::size_t length) : vocab_(vocab_size), length_(length) {
  if (vocab_size < 1) throw Error(ErrorCode::InvalidArgument, "vocabulary must be non-empty");
  states_ = 1;
  for (std::size_t i = 0; i < length; ++i) {
    states_ *= static_cast<std::uint64_t>(vocab_size + 1);
    if (states_ > kTrajectoryBudget) throw Error(ErrorCode::SizeGuard, "tabular denoiser state space too large");
  }
  table_.assign(states_ * length * static_cast<std::uint64_t>(vocab_size), 1.0 / vocab_size);
}

TabularDenoiser TabularDenoiser::uniform(int vocab_size, std::size_t length) { return TabularDenoiser(vocab_size, length); }

TabularDenoiser TabularDenoiser::random(int vocab_size, std::size_t length, RandomStream rng, double spread) {
  TabularDenoiser d(vocab_size, length);
  const std::size_t V = static_cast<std::size_t>(vocab_size);
  for (std::uint64_t s = 0; s < d.states_; ++s) {
    RandomStream r = rng.derive("row", s);
    for (std::size_t i = 0; i < length; ++i) {
      double* row = &d.table_[(s * length + i) * V];
      double total = 0.0;
      for (std::size_t v = 0; v < V; ++v) total += row[v] = std::exp(spread * r.normal());
      for (std::size_t v = 0; v < V; ++v) row[v] /= total;
    }
  }
  return d;
}

Rows TabularDenoiser::denoise(const MaskedSequence& z) const {
  if (z.length() != length_) throw Error(ErrorCode::InvalidArgument, "tabular denoiser length mismatch");
  const std::size_t V = static_cast<std::size_t>(vocab_);
  const std::uint64_t s = encode(z.tokens, vocab_ + 1);
  Rows out = Rows::Zero(static_cast<Eigen::Index>(length_), vocab_ + 1);
  for (std::size_t i = 0; i < length_; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    if (!z.is_masked(i)) {
      out(r, z.tokens[i]) = 1.0;
      continue;
    }
    const double* row = &table_[(s * length_ + i) * V];
    for (std::size_t v = 0; v < V; ++v) out(r, static_cast<Eigen::Index>(v)) = row[v];
  }
  return out;
}

void TabularDenoiser::set_row(const MaskedSequence& z, std::size_t position, std::span<const double> probs) {
  if (probs.size() != static_cast<std::size_t>(vocab_)) throw Error(ErrorCode::InvalidArgument, "row has the wrong size");
  validate_simplex(probs, "tabular row");
  const std::uint64_t s = encode(z.tokens, vocab_ + 1);
  std::copy(probs.begin(), probs.end(), table_.begin() + static_cast<std::ptrdiff_t>((s * length_ + position) * vocab_));
}

Rows MemorizingDenoiser::denoise(const MaskedSequence& z) const {
  Rows out = Rows::Zero(static_cast<Eigen::Index>(z.length()), vocab_ + 1);
  for (std::size_t i = 0; i < z.length(); ++i)
    out(static_cast<Eigen::Index>(i), z.is_masked(i) ? target_[i] : z.tokens[i]) = 1.0;
  return out;
}

std::vector<double> TabularHead::raw_scores(std::span<const Token> context) const {
  RandomStream r = RandomStream(seed_).derive("tabular-head", encode(context, symbols_));
  std::vector<double> out(context.size());
  for (double& o : out) o = scale_ * r.normal();
  return out;
}

GradientCheckReport finite_diff_check(const std::function<double()>& objective, const std::vector<FdTensor>& tensors,
                                      double step, double tolerance, std::size_t coords_per_group, RandomStream rng,
                                      double floor) {
  GradientCheckReport report;
  std::vector<std::string> labels;
  for (const auto& t : tensors)
    if (std::find(labels.begin(), labels.end(), t.group) == labels.end()) labels.push_back(t.group);

  for (const std::string& label : labels) {
    // (tensor index, flat offset) for every coordinate in the group
    std::vector<std::pair<std::size_t, Eigen::Index>> coords;
    for (std::size_t k = 0; k < tensors.size(); ++k) {
      if (tensors[k].group != label) continue;
      for (Eigen::Index j = 0; j < tensors[k].value->size(); ++j) coords.emplace_back(k, j);
    }
    RandomStream pick = rng.derive(label);
    const std::size_t n = std::min(coords_per_group, coords.size());
    for (std::size_t i = 0; i < n; ++i) std::swap(coords[i], coords[i + pick.below(coords.size() - i)]);

    GradientCheckGroup g;
    g.label = label;
    g.coordinates = n;
    for (std::size_t i = 0; i < n; ++i) {
      const auto [k, j] = coords[i];
      double* x = tensors[k].value->data() + j;
      const double saved = *x;
      *x = saved + step;
      const double up = objective();
      *x = saved - step;
      const double down = objective();
      *x = saved;
      const double fd = (up - down) / (2.0 * step);
      const double an = *(tensors[k].analytic->data() + j);
      const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), floor});
      if (rel > g.max_rel_error) {
        g.max_rel_error = rel;
        char buf[96];
        std::snprintf(buf, sizeof buf, "] analytic=%.6g numeric=%.6g", an, fd);
        g.worst = tensors[k].name + "[" + std::to_string(j) + buf;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, g.max_rel_error);
    report.groups.push_back(std::move(g));
  }
  report.pass = report.max_rel_error <= tolerance;
  return report;
}

}  // namespace oemdm
