// Run configuration: a JSON document with strict key checking, path
// resolution relative to the file, and defaults for every optional field.
#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "oemdm/corpus.hpp"
#include "oemdm/schedulers.hpp"
#include "oemdm/trainer.hpp"

namespace oemdm {

struct CorpusConfig {
  std::string path;     // UTF-8 text; empty when a grammar is used
  std::string grammar;  // e.g. "kv"
  std::uint64_t grammar_seed = 0;
  int grammar_count = 2000;
  ChunkMode mode = ChunkMode::Lines;
  int vocab_cap = 256;
  int validation = 64;  // held-out sequences taken from the end
};

// `kind` is one of linear, polynomial, arm, bd3lm, genmd4, trained. The
// trained kind means "use the checkpoint's own schedulers".
struct SamplerConfig {
  std::string kind = "trained";
  nlohmann::json params = nlohmann::json::object();
};

struct RunConfig {
  TrainingConfig training;
  CorpusConfig corpus;
  SamplerConfig sampler;
  int sample_count = 8;
  int nfe = 64;
  int eval_samples = 16;
  std::vector<std::string> suites;  // empty: all
  std::string checkpoint = "oemdm.ckpt";
  std::string metrics = "metrics.jsonl";
  std::string samples = "samples.txt";
};

RunConfig parse_config(std::string_view text, const std::string& base_dir = ".");
RunConfig load_config(const std::string& path);

nlohmann::json training_config_to_json(const TrainingConfig& c);
// Strict: unknown keys are rejected. `where` prefixes error messages.
TrainingConfig training_config_from_json(const nlohmann::json& j, const std::string& where = "training");

nlohmann::json run_config_to_json(const RunConfig& c);
// FNV-1a of the canonical (sorted-key) JSON form.
std::uint64_t config_hash(const RunConfig& c);

// Builds a fixed scheduler; throws Config for "trained".
SchedulerSpec sampler_spec(const SamplerConfig& s, int length);

}  // namespace oemdm
