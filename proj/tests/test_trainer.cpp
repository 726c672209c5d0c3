#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "oemdm/corpus.hpp"
#include "oemdm/oracles.hpp"
#include "oemdm/trainer.hpp"

using namespace oemdm;

namespace {

struct Fixture {
  Corpus corpus;
  std::vector<Sequence> train, val;
  TrainingConfig config;
};

Fixture small_run(int steps, TrainMode mode = TrainMode::Lomdm) {
  Fixture f;
  f.corpus = grammar_corpus("kv", 1, 264, 6);
  std::tie(f.train, f.val) = split_corpus(f.corpus.sequences, 8);
  TrainingConfig& c = f.config;
  c.model.vocab_size = f.corpus.vocab_size();
  c.model.length = 6;
  c.model.width = 16;
  c.model.heads = 2;
  c.model.blocks = 1;
  c.model.ff_mult = 2;
  c.mode = mode;
  c.batch = 8;
  c.steps = steps;
  c.lr_backbone = 1e-3;
  c.lr_heads = 1e-3;
  c.warmup = 5;
  c.seed = 7;
  c.log_every = 1;
  c.eval_every = 5;
  c.eval_samples = 2;
  return f;
}

bool same_record(const MetricsRecord& a, const MetricsRecord& b) {
  // wall_seconds is deliberately left out.
  return a.step == b.step && a.loss == b.loss && a.l_main == b.l_main && a.l_velocity == b.l_velocity &&
         a.objective == b.objective && a.lr_backbone == b.lr_backbone && a.lr_heads == b.lr_heads &&
         a.val_nelbo == b.val_nelbo && a.corr.phi_confidence == b.corr.phi_confidence &&
         a.corr.psi_confidence == b.corr.psi_confidence && a.corr.phi_psi == b.corr.phi_psi;
}

bool same_params(const ModelParams& a, const ModelParams& b) {
  const auto ta = a.tensors(), tb = b.tensors();
  for (std::size_t k = 0; k < ta.size(); ++k)
    if (ta[k]->rows() != tb[k]->rows() || ta[k]->cols() != tb[k]->cols() || *ta[k] != *tb[k]) return false;
  return true;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("oemdm_test_" + name)).string();
}

}  // namespace

TEST_CASE("config validation names the field") {
  TrainingConfig c;
  c.batch = 7;
  try {
    validate_training_config(c);
    FAIL("odd batch accepted");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("training.batch") != std::string::npos);
  }
  c.batch = 8;
  c.c1 = 0.5;
  c.c2 = 0.6;
  CHECK_THROWS_AS(validate_training_config(c), Error);
  c.c2 = 0.0;
  CHECK_NOTHROW(validate_training_config(c));
}

TEST_CASE("mdlm mode pins the constants") {
  TrainingConfig c;
  c.mode = TrainMode::Mdlm;
  const auto s = objective_settings(c);
  CHECK(s.c1 == 1.0);
  CHECK(s.c2 == 0.0);
  CHECK_FALSE(s.train_phi);
  CHECK_FALSE(s.train_psi);
  CHECK(parse_mode("mdlm") == TrainMode::Mdlm);
  CHECK(parse_mode("lomdm") == TrainMode::Lomdm);
  CHECK_THROWS_AS(parse_mode("arm"), Error);
}

TEST_CASE("linear warmup") {
  CHECK(scheduled_lr(1e-3, 10, 0) == doctest::Approx(1e-4));
  CHECK(scheduled_lr(1e-3, 10, 9) == doctest::Approx(1e-3));
  CHECK(scheduled_lr(1e-3, 10, 500) == doctest::Approx(1e-3));
  CHECK(scheduled_lr(1e-3, 0, 0) == doctest::Approx(1e-3));
}

TEST_CASE("zero steps leaves the initialisation") {
  auto f = small_run(0);
  const auto r = train(f.config, f.train, f.val);
  CHECK(r.metrics.empty());
  CHECK(same_params(r.state.params, TrainState::fresh(f.config).params));
}

TEST_CASE("first step with fresh heads has no velocity loss") {
  auto f = small_run(1);
  TrainState st = TrainState::fresh(f.config);
  const auto rec = train_step(st, f.config, draw_batch(f.train, f.config, 0));
  CHECK(rec.l_velocity == 0.0);
  CHECK(std::isfinite(rec.loss));
  CHECK(st.step == 1);
}

TEST_CASE("mdlm steps never touch the heads") {
  auto f = small_run(3, TrainMode::Mdlm);
  const auto r = train(f.config, f.train, f.val);
  const auto init = TrainState::fresh(f.config);
  const auto groups = init.params.groups();
  const auto a = r.state.params.tensors(), b = init.params.tensors();
  bool backbone_moved = false;
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (groups[k] == ParamGroup::Backbone)
      backbone_moved = backbone_moved || *a[k] != *b[k];
    else
      CHECK(*a[k] == *b[k]);
  }
  CHECK(backbone_moved);
  for (const auto& m : r.metrics) CHECK(m.l_velocity == 0.0);
}

TEST_CASE("training is deterministic") {
  auto f = small_run(10);
  const auto a = train(f.config, f.train, f.val);
  const auto b = train(f.config, f.train, f.val);
  REQUIRE(a.metrics.size() == b.metrics.size());
  for (std::size_t k = 0; k < a.metrics.size(); ++k) CHECK(same_record(a.metrics[k], b.metrics[k]));
  CHECK(same_params(a.state.params, b.state.params));
  CHECK(serialize_checkpoint(a.state, {f.config, f.corpus.symbols}) ==
        serialize_checkpoint(b.state, {f.config, f.corpus.symbols}));
}

TEST_CASE("metrics records are JSON lines with bounded correlations") {
  auto f = small_run(10);
  const std::string path = temp_path("metrics.jsonl");
  TrainOptions o;
  o.metrics_path = path;
  const auto r = train(f.config, f.train, f.val, o);
  std::ifstream in(path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("step"));
    CHECK(std::isfinite(j.at("loss").get<double>()));
    ++lines;
  }
  CHECK(lines == 10);
  for (const auto& m : r.metrics) {
    for (const auto& c : {m.corr.phi_confidence, m.corr.psi_confidence, m.corr.phi_psi})
      if (c) {
        CHECK(*c >= -1.0);
        CHECK(*c <= 1.0);
      }
  }
  CHECK(r.metrics.back().val_nelbo.has_value());
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint round trip is byte-identical") {
  auto f = small_run(4);
  const auto r = train(f.config, f.train, f.val);
  const CheckpointMeta meta{f.config, f.corpus.symbols};
  const std::string path = temp_path("round.ckpt");
  save_checkpoint(path, r.state, meta);
  const auto loaded = load_checkpoint(path);
  CHECK(serialize_checkpoint(loaded.state, loaded.meta) == serialize_checkpoint(r.state, meta));
  CHECK(loaded.state.step == 4);
  CHECK(loaded.meta.symbols == f.corpus.symbols);
  CHECK(same_params(loaded.state.params, r.state.params));
  std::filesystem::remove(path);
}

TEST_CASE("corrupt checkpoints are rejected with the field named") {
  auto f = small_run(0);
  const auto st = TrainState::fresh(f.config);
  const std::string bytes = serialize_checkpoint(st, {f.config, f.corpus.symbols});

  try {
    parse_checkpoint(bytes.substr(0, bytes.size() - 3));
    FAIL("truncated checkpoint accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Corrupt);
    CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    CHECK(std::string(e.what()).find("adam_v/") != std::string::npos);
  }
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_WITH_AS(parse_checkpoint(bad_magic), doctest::Contains("magic"), Error);
  std::string bad_version = bytes;
  bad_version[6] = 9;
  CHECK_THROWS_WITH_AS(parse_checkpoint(bad_version), doctest::Contains("version"), Error);
  CHECK_THROWS_WITH_AS(parse_checkpoint(bytes + "x"), doctest::Contains("trailing"), Error);
  CHECK_THROWS_AS(load_checkpoint(temp_path("does_not_exist.ckpt")), Error);
}

TEST_CASE("resume continues bit-identically") {
  auto full = small_run(12);
  const auto uninterrupted = train(full.config, full.train, full.val);

  auto part = small_run(5);
  const std::string path = temp_path("resume.ckpt");
  TrainOptions o;
  o.checkpoint_path = path;
  o.symbols = part.corpus.symbols;
  train(part.config, part.train, part.val, o);
  auto loaded = load_checkpoint(path);
  const auto resumed = train(full.config, full.train, full.val, {}, std::move(loaded.state));

  REQUIRE(resumed.metrics.size() == 7);
  for (std::size_t k = 0; k < resumed.metrics.size(); ++k)
    CHECK(same_record(resumed.metrics[k], uninterrupted.metrics[k + 5]));
  CHECK(same_params(resumed.state.params, uninterrupted.state.params));
  CHECK(same_params(resumed.state.v, uninterrupted.state.v));
  std::filesystem::remove(path);
}

TEST_CASE("evaluation of a memorizing denoiser") {
  const Sequence x({1, 0, 2, 2});
  const MemorizingDenoiser d(3, x);
  const auto rep = evaluate_denoiser(d, Linear{}, Linear{}, {x}, 64, RandomStream(1));
  CHECK(rep.nelbo_per_token == 0.0);
  CHECK(rep.perplexity_bound <= 1.0 + 1e-6);
}

TEST_CASE("evaluation stderr scales with n_mc") {
  const auto d = TabularDenoiser::random(3, 3, RandomStream(2));
  const std::vector<Sequence> texts = {Sequence({0, 1, 2}), Sequence({2, 2, 1}), Sequence({1, 0, 0})};
  const auto a = evaluate_denoiser(d, Linear{}, Linear{}, texts, 20000, RandomStream(3));
  const auto b = evaluate_denoiser(d, Linear{}, Linear{}, texts, 40000, RandomStream(4));
  CHECK(a.stderr_per_token / b.stderr_per_token == doctest::Approx(std::sqrt(2.0)).epsilon(0.05));
  CHECK(a.perplexity_bound == doctest::Approx(std::exp(a.nelbo_per_token)));
}

TEST_CASE("evaluation bound sits above the exact NLL") {
  const auto d = TabularDenoiser::random(2, 2, RandomStream(5));
  const Sequence x({0, 1});
  const auto rep = evaluate_denoiser(d, Linear{}, Linear{}, {x}, 200000, RandomStream(6));
  // A fine grid stands in for the continuous-time chain.
  const double nll = -std::log(exact_likelihood(x, d, Linear{}, TimeGrid(512))) / 2.0;
  CHECK(rep.nelbo_per_token >= nll - 3 * rep.stderr_per_token);
  CHECK(rep.perplexity_bound >= std::exp(nll - 3 * rep.stderr_per_token));
}

TEST_CASE("pearson") {
  const std::vector<double> x = {1.0, 2.5, -0.3, 4.0};
  CHECK(*pearson(x, x) == doctest::Approx(1.0).epsilon(1e-15));
  std::vector<double> neg = x;
  for (auto& v : neg) v = -2 * v + 1;
  CHECK(*pearson(x, neg) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK_FALSE(pearson({1.0}, {2.0}).has_value());
  CHECK_FALSE(pearson({1.0, 1.0, 1.0}, {0.2, 0.5, 0.9}).has_value());
}

TEST_CASE("c2 = 0 leaves correlations undefined") {
  auto f = small_run(0);
  f.config.c2 = 0.0;
  const auto st = TrainState::fresh(f.config);
  const auto c = correlation_diagnostics(st.params, f.config, f.val, RandomStream(1));
  CHECK(c.masked_positions > 1);
  CHECK_FALSE(c.phi_confidence.has_value());
  CHECK_FALSE(c.psi_confidence.has_value());
  CHECK_FALSE(c.phi_psi.has_value());
}

TEST_CASE("short training lowers the validation bound") {
  auto f = small_run(150);
  f.config.eval_every = 0;
  f.config.eval_samples = 8;
  const auto init = TrainState::fresh(f.config);
  const double before = evaluate(init.params, f.config, f.val, 8, RandomStream(f.config.eval_seed)).nelbo_per_token;
  const auto r = train(f.config, f.train, f.val);
  REQUIRE(r.metrics.back().val_nelbo.has_value());
  CHECK(*r.metrics.back().val_nelbo < before);
}

TEST_CASE("batches are drawn per step from the seed") {
  auto f = small_run(1);
  const auto a = draw_batch(f.train, f.config, 3);
  const auto b = draw_batch(f.train, f.config, 3);
  CHECK(a.size() == 4);
  CHECK(a == b);
  CHECK(draw_batch(f.train, f.config, 4) != a);
}
