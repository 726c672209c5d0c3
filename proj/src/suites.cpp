#include "oemdm/suites.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <sstream>

namespace oemdm {

namespace {

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

Sequence random_sequence(int vocab, std::size_t length, RandomStream rng) {
  Sequence x{std::vector<Token>(length)};
  for (auto& t : x.tokens) t = static_cast<Token>(rng.below(static_cast<std::uint64_t>(vocab)));
  return x;
}

PropositionReport elbo_suite(std::uint64_t seed) {
  PropositionReport rep;
  rep.name = "elbo";
  rep.tolerance = 1e-9;
  const RandomStream root(seed);
  double worst_margin = std::numeric_limits<double>::infinity(), worst_norm = 0.0;
  const TimeGrid grid(16);
  int k = 0;
  for (int V : {2, 3})
    for (std::size_t L : {2u, 3u})
      for (int family = 0; family < 3; ++family, ++k) {
        RandomStream r = root.derive("instance", static_cast<std::uint64_t>(k));
        TabularDenoiser den = TabularDenoiser::random(V, L, r.derive("denoiser"));
        SchedulerSpec spec = Linear{};
        if (family == 1) spec = Polynomial{0.7};
        if (family == 2)
          spec = LearnedHead(std::make_shared<TabularHead>(r.derive("head").key(), V + 1), HeadRole::Reverse, 0.7, 0.65);
        double total = 0.0;
        for (const Sequence& x : enumerate_sequences(Vocabulary(V), L)) {
          const double p = exact_likelihood(x, den, spec, grid);
          total += p;
          const double bound = nelbo_discrete_exact(x, den, spec, spec, grid);
          worst_margin = std::min(worst_margin, bound + std::log(p));
          ++rep.instances;
        }
        worst_norm = std::max(worst_norm, std::abs(total - 1.0));
      }
  rep.max_deviation = std::max(0.0, -worst_margin);
  rep.pass = worst_margin >= -rep.tolerance && worst_norm <= 1e-12;
  rep.detail = "min(NELBO + log p) = " + fmt(worst_margin) + ", max |sum_x p(x) - 1| = " + fmt(worst_norm);
  return rep;
}

PropositionReport mdlm_suite(std::uint64_t seed) {
  const RandomStream root(seed);
  const Sequence x = random_sequence(3, 6, root.derive("x"));
  TabularDenoiser den = TabularDenoiser::random(3, 6, root.derive("denoiser"));
  return check_mdlm_reduction(den, x, 2000, root.derive("samples"));
}

PropositionReport arm_suite(std::uint64_t seed) {
  const RandomStream root(seed);
  const std::vector<double> eps = {0.1, 0.05, 0.025, 0.0125};
  TabularDenoiser d2 = TabularDenoiser::random(2, 2, root.derive("d2"));
  PropositionReport a = check_arm_limit(d2, Sequence{{1, 0}}, eps, TimeGrid(32));
  TabularDenoiser d3 = TabularDenoiser::random(2, 3, root.derive("d3"));
  PropositionReport b = check_arm_limit(d3, Sequence{{0, 1, 1}}, eps, TimeGrid(48), {2, 0, 1});
  PropositionReport rep = a;
  rep.name = "arm";
  rep.instances = a.instances + b.instances;
  rep.max_deviation = std::max(a.max_deviation, b.max_deviation);
  rep.pass = a.pass && b.pass;
  rep.detail = "slope(L=2) = " + fmt(a.slope) + ", slope(L=3, order 2,0,1) = " + fmt(b.slope);
  return rep;
}

PropositionReport velocity_suite(std::uint64_t seed) {
  PropositionReport rep;
  rep.name = "velocity";
  rep.tolerance = 1e-12;
  RandomStream r(seed);
  bool ok = true;
  double min_value = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < 100000; ++k) {
    const double a = std::exp(r.uniform(std::log(1e-2), std::log(1e2)));
    const double b = k % 10 == 0 ? a : std::exp(r.uniform(std::log(1e-2), std::log(1e2)));
    const double v = velocity_term(a, b);
    min_value = std::min(min_value, v);
    if (v < 0.0) ok = false;
    if (v <= 1e-12 && std::abs(a - b) > 1e-9) ok = false;
    if (a == b && v != 0.0) ok = false;
    ++rep.instances;
  }
  rep.pass = ok;
  rep.detail = "min velocity term = " + fmt(min_value);
  return rep;
}

PropositionReport ratio_suite(std::uint64_t seed) {
  PropositionReport rep;
  rep.name = "ratio";
  const double c1 = 0.7, c2 = 0.65;
  const auto [lo, hi] = velocity_ratio_bound(c1, c2);
  RandomStream r(seed);
  double min_ratio = std::numeric_limits<double>::infinity(), max_ratio = 0.0;
  for (std::size_t k = 0; k < 10000; ++k) {
    const std::size_t L = 2 + r.below(15);
    const double scale = std::exp(r.uniform(std::log(0.1), std::log(1e3)));
    std::vector<double> a(L), b(L);
    for (std::size_t i = 0; i < L; ++i) {
      a[i] = scale * r.normal();
      b[i] = scale * r.normal();
    }
    const std::vector<double> ea = head_exponents(a, c1, c2), eb = head_exponents(b, c1, c2);
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j) {
        const double ratio = ea[i] / eb[j];
        min_ratio = std::min(min_ratio, ratio);
        max_ratio = std::max(max_ratio, ratio);
      }
    ++rep.instances;
  }
  rep.pass = min_ratio > lo && max_ratio < hi;
  rep.detail = "ratios in [" + fmt(min_ratio) + ", " + fmt(max_ratio) + "], bound (" + fmt(lo) + ", " + fmt(hi) + ")";
  return rep;
}

PropositionReport genmd4_suite(std::uint64_t seed) {
  PropositionReport rep;
  rep.name = "genmd4";
  rep.tolerance = 1e-12;
  RandomStream r(seed);
  bool ok = true;
  for (std::size_t k = 0; k < 2000; ++k) {
    const int V = 2 + static_cast<int>(r.below(5));
    std::vector<double> vel(static_cast<std::size_t>(V)), row(static_cast<std::size_t>(V) + 1, 0.0);
    double sum = 0.0;
    for (int v = 0; v < V; ++v) {
      vel[v] = std::exp(r.uniform(std::log(0.1), std::log(10.0)));
      row[v] = std::exp(2.0 * r.normal());
      sum += row[v];
    }
    for (int v = 0; v < V; ++v) row[v] /= sum;
    const int x = static_cast<int>(r.below(static_cast<std::uint64_t>(V)));
    const double t = r.uniform(0.05, 1.0);
    PropositionReport one = check_genmd4_equivalence(vel, row, x, t);
    rep.max_deviation = std::max(rep.max_deviation, one.max_deviation);
    ok = ok && one.pass;
    ++rep.instances;
  }
  rep.pass = ok;
  return rep;
}

PropositionReport gradient_suite(std::uint64_t seed) {
  GradientFixture fx = gradient_fixture(3, 4, seed);
  GradientCheckReport g = check_objective_gradient(fx, 1e-5, 1e-4, 200, 1e-6, seed);
  const double leak = stop_gradient_leak(fx.params, fx.inputs.x);
  PropositionReport rep;
  rep.name = "gradient";
  rep.tolerance = 1e-4;
  rep.max_deviation = g.max_rel_error;
  for (const auto& grp : g.groups) rep.instances += grp.coordinates;
  const double live = live_feature_sensitivity(fx.params, fx.inputs.x, 1e-5);
  rep.pass = g.pass && leak == 0.0 && live > 0.0;
  rep.detail = "stop-gradient leak = " + fmt(leak) + ", live-feature finite difference = " + fmt(live);
  for (const auto& grp : g.groups) rep.detail += "; " + grp.label + " max rel " + fmt(grp.max_rel_error) + " at " + grp.worst;
  return rep;
}

PropositionReport rloo_suite(std::uint64_t seed) {
  ModelConfig mc;
  mc.vocab_size = 2;
  mc.length = 3;
  mc.width = 8;
  mc.heads = 2;
  mc.blocks = 1;
  mc.ff_mult = 2;
  const RandomStream root(seed);
  ModelParams p = ModelParams::init(mc, root.derive("init"), true);
  RlooCheckOptions opts;
  opts.coordinates = 8;
  return check_rloo_unbiased(Sequence{{1, 0, 1}}, p, 0.5, 20000, root.derive("rloo"), opts);
}

PropositionReport sampler_suite(std::uint64_t seed) {
  PropositionReport rep;
  rep.name = "sampler";
  rep.tolerance = 3.0;
  const RandomStream root(seed);
  TabularDenoiser den = TabularDenoiser::random(2, 2, root.derive("denoiser"));
  const SchedulerSpec spec = LearnedHead(std::make_shared<TabularHead>(seed, 3), HeadRole::Reverse, 0.7, 0.65);
  const TimeGrid grid(8);
  const std::size_t n = 20000;
  std::map<std::vector<Token>, std::size_t> counts;
  std::size_t absorbing = 0;
  for (std::size_t k = 0; k < n; ++k) {
    Trajectory tr;
    Sequence x = ancestral_sample(den, spec, grid, 2, root.derive("draw", k), &tr);
    ++counts[x.tokens];
    absorbing += tr.valid();
  }
  for (const Sequence& x : enumerate_sequences(Vocabulary(2), 2)) {
    const double p = exact_likelihood(x, den, spec, grid);
    const double phat = static_cast<double>(counts[x.tokens]) / static_cast<double>(n);
    const double se = std::sqrt(p * (1.0 - p) / static_cast<double>(n));
    const double z = std::abs(phat - p) / se;
    rep.deviations.push_back(z);
    rep.max_deviation = std::max(rep.max_deviation, z);
    ++rep.instances;
  }
  rep.pass = rep.max_deviation <= rep.tolerance && absorbing == n;
  rep.detail = "absorbing trajectories " + std::to_string(absorbing) + "/" + std::to_string(n);
  return rep;
}

PropositionReport bd3lm_suite(std::uint64_t seed) {
  PropositionReport rep =
      check_bd3lm_windows({0.1, 0.05, 0.025, 0.0125}, 4, 2, TimeGrid(63), 20000, RandomStream(seed));
  rep.detail = "slope = " + fmt(rep.slope);
  return rep;
}

PropositionReport freeform_suite(std::uint64_t seed) {
  PropositionReport rep;
  rep.name = "freeform";
  rep.tolerance = 1e-9;
  const std::size_t L = 4;
  std::vector<std::vector<Token>> contexts;
  RandomStream r(seed);
  for (int k = 0; k < 8; ++k) {
    std::vector<Token> c(L);
    for (auto& t : c) t = static_cast<Token>(r.below(4));  // includes the mask id 3
    contexts.push_back(c);
  }
  std::vector<double> ts;
  for (int k = 1; k <= 200; ++k) ts.push_back(k / 200.0);
  const std::vector<SchedulerSpec> specs = {
      Linear{},
      Polynomial{0.7},
      ArmEpsilon{4, 0.05, {}},
      Bd3lmEpsilon{4, 2, 0.05},
      GenMd4Fixed{{0.5, 1.0, 2.0}},
      LearnedHead(std::make_shared<TabularHead>(seed, 4), HeadRole::Forward, 0.7, 0.65),
  };
  bool ok = true;
  for (const SchedulerSpec& s : specs) {
    // GenMD4 contexts must be clean; drop mask ids for it.
    std::vector<std::vector<Token>> ctx = contexts;
    if (std::holds_alternative<GenMd4Fixed>(s))
      for (auto& c : ctx)
        for (auto& t : c) t = t % 3;
    FreeformReport f = validate_freeform(s, ctx, L, ts);
    const double dev = std::max({f.start_residual, f.end_residual, f.identity_residual});
    rep.max_deviation = std::max(rep.max_deviation, dev);
    ok = ok && f.strictly_decreasing && dev <= rep.tolerance;
    ++rep.instances;
  }
  rep.pass = ok;
  return rep;
}

using SuiteFn = PropositionReport (*)(std::uint64_t);

const std::vector<std::pair<std::string, SuiteFn>>& registry() {
  static const std::vector<std::pair<std::string, SuiteFn>> r = {
      {"freeform", freeform_suite}, {"velocity", velocity_suite}, {"ratio", ratio_suite},
      {"genmd4", genmd4_suite},     {"mdlm", mdlm_suite},         {"elbo", elbo_suite},
      {"arm", arm_suite},           {"bd3lm", bd3lm_suite},       {"sampler", sampler_suite},
      {"gradient", gradient_suite}, {"rloo", rloo_suite},
  };
  return r;
}

}  // namespace

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& [name, fn] : registry()) n.push_back(name);
    return n;
  }();
  return names;
}

PropositionReport run_suite(const std::string& name, std::uint64_t seed) {
  for (const auto& [n, fn] : registry())
    if (n == name) return fn(RandomStream(seed).derive(n).key());
  throw Error(ErrorCode::InvalidArgument, "unknown suite '" + name + "'");
}

GradientFixture gradient_fixture(int vocab, int length, std::uint64_t seed) {
  ModelConfig mc;
  mc.vocab_size = vocab;
  mc.length = length;
  mc.width = 8;
  mc.heads = 2;
  mc.blocks = 1;
  mc.ff_mult = 2;
  const RandomStream root(seed);
  GradientFixture fx{ModelParams::init(mc, root.derive("init"), true), {}, {}};
  fx.inputs.x = random_sequence(vocab, static_cast<std::size_t>(length), root.derive("x"));
  fx.inputs.t = 0.45;
  fx.inputs.rng = root.derive("objective");
  // Pin the corruptions; a sampled pair may happen to mask nothing.
  const Vocabulary v(vocab);
  MaskedSequence z1 = MaskedSequence::from(fx.inputs.x, v), z2 = z1;
  for (int i = 0; i < length; ++i) {
    if (i % 2 == 0) z1.tokens[i] = v.mask();
    if (i % 3 != 1) z2.tokens[i] = v.mask();
  }
  fx.inputs.z1 = z1;
  fx.inputs.z2 = z2;
  return fx;
}

GradientCheckReport check_objective_gradient(GradientFixture& fx, double step, double tolerance,
                                             std::size_t coords_per_group, double floor, std::uint64_t seed) {
  ModelParams grads = ModelParams::zeros(fx.params.config);
  FrozenValues frozen;
  combined_objective(fx.params, fx.inputs, fx.settings, &grads, 1.0, &frozen);
  std::vector<FdTensor> tensors;
  std::vector<Mat*> vals = fx.params.tensors();
  std::vector<const Mat*> an = static_cast<const ModelParams&>(grads).tensors();
  const std::vector<std::string> names = fx.params.names();
  const std::vector<ParamGroup> groups = fx.params.groups();
  for (std::size_t i = 0; i < vals.size(); ++i) tensors.push_back({vals[i], an[i], names[i], group_name(groups[i])});
  auto objective = [&] { return combined_objective(fx.params, fx.inputs, fx.settings, nullptr, 1.0, &frozen).objective; };
  return finite_diff_check(objective, tensors, step, tolerance, coords_per_group, RandomStream(seed).derive("fd"),
                           floor);
}

double stop_gradient_leak(const ModelParams& params, const Sequence& x) {
  ModelParams g = ModelParams::zeros(params.config);
  head_probe(params, x, &g, nullptr);
  double leak = 0.0;
  const std::vector<ParamGroup> groups = g.groups();
  const std::vector<const Mat*> ts = static_cast<const ModelParams&>(g).tensors();
  for (std::size_t i = 0; i < ts.size(); ++i)
    if (groups[i] == ParamGroup::Backbone) leak = std::max(leak, ts[i]->cwiseAbs().maxCoeff());
  return leak;
}

double live_feature_sensitivity(const ModelParams& params, const Sequence& x, double step) {
  ModelParams p = params;
  const std::vector<ParamGroup> groups = p.groups();
  const std::vector<Mat*> ts = p.tensors();
  double largest = 0.0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    if (groups[i] != ParamGroup::Backbone) continue;
    double& w = (*ts[i])(0, 0);
    const double keep = w;
    w = keep + step;
    const double up = head_probe(p, x, nullptr, nullptr);
    w = keep - step;
    const double down = head_probe(p, x, nullptr, nullptr);
    w = keep;
    largest = std::max(largest, std::abs(up - down) / (2 * step));
  }
  return largest;
}

}  // namespace oemdm
