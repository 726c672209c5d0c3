#include "oemdm/config.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace oemdm {

using nlohmann::json;

namespace {

[[noreturn]] void config_error(const std::string& where, const std::string& why) {
  throw Error(ErrorCode::Config, where + ": " + why);
}

// Reads fields of one JSON object and remembers which keys were consumed so
// leftovers can be reported as unknown.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) config_error(where_, "expected an object");
  }

  template <class T>
  void read(const std::string& key, T& out) {
    used_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      config_error(path(key), "has the wrong type");
    }
  }

  const json* sub(const std::string& key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string path(const std::string& key) const { return where_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) config_error(where_, "unknown key '" + it.key() + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

std::string resolve(const std::string& base, const std::string& p) {
  if (p.empty()) return p;
  std::filesystem::path path(p);
  if (path.is_absolute()) return path.lexically_normal().string();
  return (std::filesystem::path(base) / path).lexically_normal().string();
}

std::string line_context(std::string_view text, std::size_t byte) {
  std::size_t line = 1, start = 0;
  const std::size_t pos = std::min(byte == 0 ? 0 : byte - 1, text.size());
  for (std::size_t i = 0; i < pos; ++i)
    if (text[i] == '\n') {
      ++line;
      start = i + 1;
    }
  std::size_t end = text.find('\n', start);
  if (end == std::string_view::npos) end = text.size();
  return "line " + std::to_string(line) + ", column " + std::to_string(pos - start + 1) + ": " +
         std::string(text.substr(start, end - start));
}

}  // namespace

json training_config_to_json(const TrainingConfig& c) {
  json j;
  j["length"] = c.model.length;
  j["model"] = {{"vocab_size", c.model.vocab_size},
                {"width", c.model.width},
                {"heads", c.model.heads},
                {"blocks", c.model.blocks},
                {"ff_mult", c.model.ff_mult}};
  j["mode"] = mode_name(c.mode);
  j["batch"] = c.batch;
  j["steps"] = c.steps;
  j["c1"] = c.c1;
  j["c2"] = c.c2;
  j["lr_backbone"] = c.lr_backbone;
  j["lr_heads"] = c.lr_heads;
  j["warmup"] = c.warmup;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_eps"] = c.adam_eps;
  j["weight_decay"] = c.weight_decay;
  j["dropout"] = c.dropout;
  j["t_min"] = c.t_min;
  j["seed"] = c.seed;
  j["log_every"] = c.log_every;
  j["eval_every"] = c.eval_every;
  j["checkpoint_every"] = c.checkpoint_every;
  j["eval_samples"] = c.eval_samples;
  j["eval_seed"] = c.eval_seed;
  j["random_head_init"] = c.random_head_init;
  return j;
}

TrainingConfig training_config_from_json(const json& j, const std::string& where) {
  TrainingConfig c;
  Fields f(j, where);
  f.read("length", c.model.length);
  if (const json* m = f.sub("model")) {
    Fields mf(*m, f.path("model"));
    mf.read("vocab_size", c.model.vocab_size);
    mf.read("width", c.model.width);
    mf.read("heads", c.model.heads);
    mf.read("blocks", c.model.blocks);
    mf.read("ff_mult", c.model.ff_mult);
    mf.finish();
  }
  std::string mode = mode_name(c.mode);
  f.read("mode", mode);
  try {
    c.mode = parse_mode(mode);
  } catch (const Error& e) {
    config_error(f.path("mode"), e.what());
  }
  f.read("batch", c.batch);
  f.read("steps", c.steps);
  f.read("c1", c.c1);
  f.read("c2", c.c2);
  f.read("lr_backbone", c.lr_backbone);
  f.read("lr_heads", c.lr_heads);
  f.read("warmup", c.warmup);
  f.read("beta1", c.beta1);
  f.read("beta2", c.beta2);
  f.read("adam_eps", c.adam_eps);
  f.read("weight_decay", c.weight_decay);
  f.read("dropout", c.dropout);
  f.read("t_min", c.t_min);
  f.read("seed", c.seed);
  f.read("log_every", c.log_every);
  f.read("eval_every", c.eval_every);
  f.read("checkpoint_every", c.checkpoint_every);
  f.read("eval_samples", c.eval_samples);
  f.read("eval_seed", c.eval_seed);
  f.read("random_head_init", c.random_head_init);
  f.finish();
  validate_training_config(c);
  return c;
}

RunConfig parse_config(std::string_view text, const std::string& base_dir) {
  json j;
  try {
    j = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::Config, "parse error at " + line_context(text, e.byte));
  }
  RunConfig rc;
  Fields top(j, "config");
  if (const json* t = top.sub("training")) rc.training = training_config_from_json(*t, "training");
  if (const json* c = top.sub("corpus")) {
    Fields f(*c, "corpus");
    f.read("path", rc.corpus.path);
    f.read("grammar", rc.corpus.grammar);
    f.read("grammar_seed", rc.corpus.grammar_seed);
    f.read("grammar_count", rc.corpus.grammar_count);
    std::string mode = "lines";
    f.read("mode", mode);
    try {
      rc.corpus.mode = parse_chunk_mode(mode);
    } catch (const Error& e) {
      config_error("corpus.mode", e.what());
    }
    f.read("vocab_cap", rc.corpus.vocab_cap);
    f.read("validation", rc.corpus.validation);
    f.finish();
    if (!rc.corpus.path.empty() && !rc.corpus.grammar.empty())
      config_error("corpus", "set either 'path' or 'grammar', not both");
    if (!rc.corpus.grammar.empty()) {
      try {
        grammar_alphabet(rc.corpus.grammar);
      } catch (const Error& e) {
        config_error("corpus.grammar", e.what());
      }
    }
    if (rc.corpus.vocab_cap < 1) config_error("corpus.vocab_cap", "must be >= 1");
    if (rc.corpus.validation < 0) config_error("corpus.validation", "must be >= 0");
    if (rc.corpus.grammar_count < 1) config_error("corpus.grammar_count", "must be >= 1");
  }
  if (const json* s = top.sub("sampler")) {
    Fields f(*s, "sampler");
    f.read("kind", rc.sampler.kind);
    if (const json* p = f.sub("params")) rc.sampler.params = *p;
    f.finish();
    if (rc.sampler.kind != "trained") {
      try {
        sampler_spec(rc.sampler, rc.training.model.length);
      } catch (const Error& e) {
        config_error("sampler", e.what());
      }
    }
  }
  if (const json* s = top.sub("sample")) {
    Fields f(*s, "sample");
    f.read("count", rc.sample_count);
    f.read("nfe", rc.nfe);
    f.finish();
    if (rc.sample_count < 1) config_error("sample.count", "must be >= 1");
    if (rc.nfe < 1) config_error("sample.nfe", "must be >= 1");
  }
  if (const json* s = top.sub("eval")) {
    Fields f(*s, "eval");
    f.read("samples", rc.eval_samples);
    f.finish();
    if (rc.eval_samples < 1) config_error("eval.samples", "must be >= 1");
  }
  if (const json* s = top.sub("verify")) {
    Fields f(*s, "verify");
    f.read("suites", rc.suites);
    f.finish();
  }
  if (const json* s = top.sub("paths")) {
    Fields f(*s, "paths");
    f.read("checkpoint", rc.checkpoint);
    f.read("metrics", rc.metrics);
    f.read("samples", rc.samples);
    f.finish();
  }
  top.finish();
  rc.corpus.path = resolve(base_dir, rc.corpus.path);
  rc.checkpoint = resolve(base_dir, rc.checkpoint);
  rc.metrics = resolve(base_dir, rc.metrics);
  rc.samples = resolve(base_dir, rc.samples);
  return rc;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  const auto dir = std::filesystem::absolute(path).parent_path().string();
  try {
    return parse_config(ss.str(), dir);
  } catch (const Error& e) {
    throw Error(e.code(), path + ": " + e.what());
  }
}

json run_config_to_json(const RunConfig& c) {
  json j;
  j["training"] = training_config_to_json(c.training);
  j["corpus"] = {{"path", c.corpus.path},
                 {"grammar", c.corpus.grammar},
                 {"grammar_seed", c.corpus.grammar_seed},
                 {"grammar_count", c.corpus.grammar_count},
                 {"mode", c.corpus.mode == ChunkMode::Lines ? "lines" : "stream"},
                 {"vocab_cap", c.corpus.vocab_cap},
                 {"validation", c.corpus.validation}};
  j["sampler"] = {{"kind", c.sampler.kind}, {"params", c.sampler.params}};
  j["sample"] = {{"count", c.sample_count}, {"nfe", c.nfe}};
  j["eval"] = {{"samples", c.eval_samples}};
  j["verify"] = {{"suites", c.suites}};
  j["paths"] = {{"checkpoint", c.checkpoint}, {"metrics", c.metrics}, {"samples", c.samples}};
  return j;
}

std::uint64_t config_hash(const RunConfig& c) { return fnv1a64(run_config_to_json(c).dump()); }

SchedulerSpec sampler_spec(const SamplerConfig& s, int length) {
  Fields f(s.params, "sampler.params");
  SchedulerSpec spec;
  if (s.kind == "linear") {
    spec = Linear{};
  } else if (s.kind == "polynomial") {
    Polynomial p;
    f.read("exponent", p.exponent);
    spec = p;
  } else if (s.kind == "arm") {
    ArmEpsilon a;
    a.length = length;
    f.read("eps", a.eps);
    f.read("order", a.order);
    spec = a;
  } else if (s.kind == "bd3lm") {
    Bd3lmEpsilon b;
    b.length = length;
    f.read("blocks", b.blocks);
    f.read("eps", b.eps);
    spec = b;
  } else if (s.kind == "genmd4") {
    GenMd4Fixed g;
    f.read("exponents", g.exponents);
    spec = g;
  } else if (s.kind == "trained") {
    config_error("sampler", "the trained kind has no fixed scheduler");
  } else {
    config_error("sampler.kind", "unknown scheduler kind '" + s.kind + "'");
  }
  f.finish();
  validate_spec(spec);
  return spec;
}

}  // namespace oemdm
