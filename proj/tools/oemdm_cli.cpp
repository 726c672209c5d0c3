// oemdm: verify | train | sample | eval | exact
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "oemdm/config.hpp"
#include "oemdm/corpus.hpp"
#include "oemdm/suites.hpp"
#include "oemdm/trainer.hpp"

using namespace oemdm;

namespace {

constexpr int kExitVerifyFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitErrorBase = 10;  // + ErrorCode ordinal

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> nfe;
  std::optional<int> steps;
  std::optional<std::string> out;
};

void note_override(const std::string& field, const std::string& value) {
  std::cerr << "override: " << field << " = " << value << "\n";
}

RunConfig base_config(const std::string& path) { return path.empty() ? RunConfig{} : load_config(path); }

struct LoadedCorpus {
  Corpus corpus;
  std::vector<Sequence> train, validation;
};

LoadedCorpus load_run_corpus(const RunConfig& rc) {
  const CorpusConfig& c = rc.corpus;
  const int L = rc.training.model.length;
  LoadedCorpus out;
  if (!c.grammar.empty()) out.corpus = grammar_corpus(c.grammar, c.grammar_seed, c.grammar_count, L);
  else if (!c.path.empty()) out.corpus = ingest_corpus(c.path, L, c.mode, c.vocab_cap);
  else throw Error(ErrorCode::Config, "corpus: set either 'path' or 'grammar'");
  const auto& seqs = out.corpus.sequences;
  if (c.validation == 0) {
    out.train = seqs;
  } else {
    auto [tr, va] = split_corpus(seqs, static_cast<std::size_t>(c.validation));
    out.train = std::move(tr);
    out.validation = std::move(va);
  }
  return out;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

int cmd_verify(const RunConfig& rc, std::vector<std::string> suites, std::uint64_t seed) {
  if (suites.empty()) suites = rc.suites;
  if (suites.empty()) suites = suite_names();
  bool ok = true;
  for (const std::string& name : suites) {
    const auto t0 = std::chrono::steady_clock::now();
    PropositionReport r = run_suite(name, seed);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << (r.pass ? "PASS " : "FAIL ") << name << "  instances=" << r.instances
              << " max_deviation=" << r.max_deviation;
    if (!r.epsilons.empty()) std::cout << " slope=" << r.slope << (r.monotone ? " monotone" : " non-monotone");
    if (!r.detail.empty()) std::cout << "  (" << r.detail << ")";
    std::cout << "  " << secs << "s\n";
    ok = ok && r.pass;
  }
  return ok ? 0 : kExitVerifyFailed;
}

int cmd_train(RunConfig rc, const Overrides& ov, const std::string& metrics_flag, const std::string& resume) {
  if (ov.seed) {
    rc.training.seed = *ov.seed;
    note_override("training.seed", std::to_string(*ov.seed));
  }
  if (ov.steps) {
    rc.training.steps = *ov.steps;
    note_override("training.steps", std::to_string(*ov.steps));
  }
  if (ov.out) {
    rc.checkpoint = *ov.out;
    note_override("paths.checkpoint", *ov.out);
  }
  if (!metrics_flag.empty()) {
    rc.metrics = metrics_flag;
    note_override("paths.metrics", metrics_flag);
  }
  LoadedCorpus data = load_run_corpus(rc);
  rc.training.model.vocab_size = data.corpus.vocab_size();
  validate_training_config(rc.training);

  std::optional<TrainState> start;
  if (!resume.empty()) {
    LoadedCheckpoint ck = load_checkpoint(resume);
    if (training_config_to_json(ck.meta.config).at("model") != training_config_to_json(rc.training).at("model"))
      throw Error(ErrorCode::Config, "resume checkpoint has a different model shape");
    start = std::move(ck.state);
  }
  TrainOptions opts;
  opts.metrics_path = rc.metrics;
  opts.checkpoint_path = rc.checkpoint;
  opts.symbols = data.corpus.symbols;
  opts.on_metrics = [&](const MetricsRecord& m) {
    if (m.val_nelbo || m.step % static_cast<std::uint64_t>(rc.training.log_every) == 0)
      std::cerr << to_json_line(m) << "\n";
  };
  std::cerr << "config hash " << hex64(config_hash(rc)) << ", " << data.train.size() << " training and "
            << data.validation.size() << " validation sequences, V=" << data.corpus.vocab_size() << "\n";
  TrainResult res = train(rc.training, data.train, data.validation, opts, std::move(start));
  std::cout << "trained to step " << res.state.step << "; checkpoint " << rc.checkpoint << "\n";
  return 0;
}

std::shared_ptr<const ModelParams> share(ModelParams p) { return std::make_shared<const ModelParams>(std::move(p)); }

int cmd_sample(RunConfig rc, const Overrides& ov, const std::string& checkpoint, int count) {
  LoadedCheckpoint ck = load_checkpoint(checkpoint);
  rc.training = ck.meta.config;
  const std::uint64_t seed = ov.seed.value_or(rc.training.seed);
  if (ov.seed) note_override("seed", std::to_string(seed));
  if (ov.nfe) {
    rc.nfe = *ov.nfe;
    note_override("sample.nfe", std::to_string(*ov.nfe));
  }
  if (count > 0) {
    rc.sample_count = count;
    note_override("sample.count", std::to_string(count));
  }
  if (ov.out) rc.samples = *ov.out;
  auto params = share(std::move(ck.state.params));
  NeuralDenoiser den(params);
  const int L = rc.training.model.length;
  const SchedulerSpec spec =
      rc.sampler.kind == "trained" ? trained_schedulers(params, rc.training).second : sampler_spec(rc.sampler, L);
  Corpus view;
  view.symbols = ck.meta.symbols;
  view.pad = static_cast<Token>(view.symbols.size()) - 1;

  std::ostringstream out;
  out << "# oemdm sample config_hash=" << hex64(config_hash(rc)) << " seed=" << seed << " nfe=" << rc.nfe
      << " count=" << rc.sample_count << " step=" << ck.state.step << " scheduler=" << rc.sampler.kind << "\n";
  const TimeGrid grid(rc.nfe);
  const RandomStream root = RandomStream(seed).derive("sample");
  for (int k = 0; k < rc.sample_count; ++k) {
    Sequence s = ancestral_sample(den, spec, grid, static_cast<std::size_t>(L), root.derive(static_cast<std::uint64_t>(k)));
    out << (view.symbols.empty() ? "" : view.decode(s.tokens)) << "\t";
    for (std::size_t i = 0; i < s.length(); ++i) out << (i ? " " : "") << s[i];
    out << "\n";
  }
  if (ov.out) {
    std::ofstream f(*ov.out, std::ios::trunc);
    if (!f) throw Error(ErrorCode::Io, "cannot open '" + *ov.out + "' for writing");
    f << out.str();
    if (!f) throw Error(ErrorCode::Io, "write failed for '" + *ov.out + "'");
  } else {
    std::cout << out.str();
  }
  return 0;
}

void print_eval(const EvalReport& r) {
  nlohmann::json j = {{"nelbo_per_token", r.nelbo_per_token}, {"stderr_per_token", r.stderr_per_token},
                      {"perplexity_bound", r.perplexity_bound}, {"l_main", r.l_main},
                      {"l_velocity", r.l_velocity},           {"texts", r.texts},
                      {"samples", r.samples}};
  std::cout << j.dump() << "\n";
}

int cmd_eval(RunConfig rc, const Overrides& ov, const std::string& checkpoint, const std::string& fixture, int n_mc) {
  const std::uint64_t seed = ov.seed.value_or(rc.training.eval_seed);
  if (n_mc > 0) rc.eval_samples = n_mc;
  if (!fixture.empty()) {
    if (fixture != "memorizer") throw Error(ErrorCode::InvalidArgument, "unknown fixture '" + fixture + "'");
    // One-sequence corpus and a model that puts all mass on it.
    Corpus c = ingest_text("oemdm", 5, ChunkMode::Lines, 256);
    MemorizingDenoiser den(c.vocab_size(), c.sequences.front());
    print_eval(evaluate_denoiser(den, Linear{}, Linear{}, c.sequences, static_cast<std::size_t>(rc.eval_samples),
                                 RandomStream(seed)));
    return 0;
  }
  if (checkpoint.empty()) throw Error(ErrorCode::InvalidArgument, "eval needs --checkpoint or --fixture");
  LoadedCheckpoint ck = load_checkpoint(checkpoint);
  rc.training.model.length = ck.meta.config.model.length;
  LoadedCorpus data = load_run_corpus(rc);
  if (data.corpus.symbols != ck.meta.symbols)
    throw Error(ErrorCode::Config, "corpus vocabulary differs from the checkpoint's");
  const auto& texts = data.validation.empty() ? data.train : data.validation;
  print_eval(evaluate(ck.state.params, ck.meta.config, texts, static_cast<std::size_t>(rc.eval_samples),
                      RandomStream(seed)));
  return 0;
}

int cmd_exact(RunConfig rc, const Overrides& ov, int vocab, int length) {
  const int T = ov.nfe.value_or(8);
  const std::uint64_t seed = ov.seed.value_or(0);
  TabularDenoiser den = TabularDenoiser::random(vocab, static_cast<std::size_t>(length), RandomStream(seed).derive("denoiser"));
  const SchedulerSpec spec = rc.sampler.kind == "trained" ? SchedulerSpec{Linear{}} : sampler_spec(rc.sampler, length);
  const TimeGrid grid(T);
  std::cout << "# exact likelihoods: V=" << vocab << " L=" << length << " T=" << T << " seed=" << seed
            << " scheduler=" << (rc.sampler.kind == "trained" ? "linear" : rc.sampler.kind) << "\n";
  std::cout << "x\tp(x)\t-log p(x)\tnelbo_T\tgap\n";
  double total = 0.0;
  for (const Sequence& x : enumerate_sequences(Vocabulary(vocab), static_cast<std::size_t>(length))) {
    const double p = exact_likelihood(x, den, spec, grid);
    const double nelbo = nelbo_discrete_exact(x, den, spec, spec, grid);
    total += p;
    for (std::size_t i = 0; i < x.length(); ++i) std::cout << (i ? "," : "") << x[i];
    std::printf("\t%.12g\t%.12g\t%.12g\t%.3g\n", p, -std::log(p), nelbo, nelbo + std::log(p));
    std::fflush(stdout);
  }
  std::printf("# sum_x p(x) = %.15g\n", total);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Order-expressive masked diffusion laboratory"};
  app.require_subcommand(1);
  std::string config_path;
  Overrides ov;
  std::uint64_t seed = 0;
  int nfe = 0, steps = 0;
  std::string out;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "random seed (overrides config)");
  };

  CLI::App* verify = app.add_subcommand("verify", "run the oracle suites; nonzero exit on failure");
  add_common(verify);
  std::vector<std::string> suites;
  verify->add_option("--suite", suites, "suite name (repeatable); default all")->check(CLI::IsMember(suite_names()));

  CLI::App* train_cmd = app.add_subcommand("train", "train on the configured corpus");
  add_common(train_cmd);
  train_cmd->add_option("--steps", steps, "optimizer steps");
  train_cmd->add_option("--out", out, "checkpoint path");
  std::string metrics, resume;
  train_cmd->add_option("--metrics", metrics, "JSON-lines metrics path");
  train_cmd->add_option("--resume", resume, "continue from this checkpoint")->check(CLI::ExistingFile);

  CLI::App* sample = app.add_subcommand("sample", "draw sequences by ancestral sampling");
  add_common(sample);
  std::string checkpoint;
  int count = 0;
  sample->add_option("--checkpoint", checkpoint, "trained checkpoint")->required()->check(CLI::ExistingFile);
  sample->add_option("--nfe", nfe, "grid size T (denoiser evaluations)");
  sample->add_option("--count", count, "number of sequences");
  sample->add_option("--out", out, "output file (default stdout)");

  CLI::App* eval = app.add_subcommand("eval", "report the per-token bound and perplexity bound");
  add_common(eval);
  std::string fixture;
  int n_mc = 0;
  eval->add_option("--checkpoint", checkpoint, "trained checkpoint")->check(CLI::ExistingFile);
  eval->add_option("--fixture", fixture, "built-in fixture instead of a checkpoint")->check(CLI::IsMember({"memorizer"}));
  eval->add_option("--n-mc", n_mc, "Monte Carlo samples per text");

  CLI::App* exact = app.add_subcommand("exact", "exact likelihood table for a random tiny tabular model");
  add_common(exact);
  int vocab = 2, length = 2;
  exact->add_option("--vocab", vocab, "real tokens V")->check(CLI::Range(2, 4));
  exact->add_option("--length", length, "sequence length L")->check(CLI::Range(1, 4));
  exact->add_option("--nfe", nfe, "grid size T");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  auto given = [](CLI::App* sub, const char* opt) {
    const CLI::Option* o = sub->get_option_no_throw(opt);
    return sub->parsed() && o != nullptr && o->count() > 0;
  };
  for (CLI::App* sub : {verify, train_cmd, sample, eval, exact}) {
    if (given(sub, "--seed")) ov.seed = seed;
    if (given(sub, "--out")) ov.out = out;
  }
  for (CLI::App* sub : {sample, exact})
    if (given(sub, "--nfe")) ov.nfe = nfe;
  if (given(train_cmd, "--steps")) ov.steps = steps;

  try {
    RunConfig rc = base_config(config_path);
    if (verify->parsed()) return cmd_verify(rc, suites, ov.seed.value_or(0));
    if (train_cmd->parsed()) return cmd_train(rc, ov, metrics, resume);
    if (sample->parsed()) return cmd_sample(rc, ov, checkpoint, count);
    if (eval->parsed()) return cmd_eval(rc, ov, checkpoint, fixture, n_mc);
    if (exact->parsed()) return cmd_exact(rc, ov, vocab, length);
  } catch (const Error& e) {
    nlohmann::json j = {{"error", error_code_name(e.code())}, {"message", e.what()}};
    std::cerr << j.dump() << "\n";
    return kExitErrorBase + static_cast<int>(e.code());
  } catch (const std::exception& e) {
    nlohmann::json j = {{"error", "internal"}, {"message", e.what()}};
    std::cerr << j.dump() << "\n";
    return kExitErrorBase + 99;
  }
  return kExitUsage;
}
