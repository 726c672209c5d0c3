// Binary layout (all integers little-endian):
//   "OEMDM1" | u32 version | u32 n | n bytes of sorted-key JSON metadata |
//   u32 array count | per array: u32 name length, name, u32 rank,
//   rank x u64 dims, u8 width flag (0 = f32, 1 = f64), payload.
#include <bit>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "oemdm/config.hpp"
#include "oemdm/trainer.hpp"

namespace oemdm {

namespace {

constexpr char kMagic[] = "OEMDM1";
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::string& out, T v) {
  for (std::size_t k = 0; k < sizeof(T); ++k) out += static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * k)) & 0xFF);
}

void put_f64(std::string& out, double d) { put(out, std::bit_cast<std::uint64_t>(d)); }

void put_array(std::string& out, const std::string& name, const Mat& m) {
  put(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put(out, std::uint32_t{2});
  put(out, static_cast<std::uint64_t>(m.rows()));
  put(out, static_cast<std::uint64_t>(m.cols()));
  put(out, std::uint8_t{1});
  // Row-major payload.
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) put_f64(out, m(r, c));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : b_(bytes) {}

  template <class T>
  T get(const std::string& field) {
    need(sizeof(T), field);
    std::uint64_t v = 0;
    for (std::size_t k = 0; k < sizeof(T); ++k)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + k])) << (8 * k);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::string bytes(std::size_t n, const std::string& field) {
    need(n, field);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n, const std::string& field) {
    if (b_.size() - pos_ < n)
      throw Error(ErrorCode::Corrupt, "checkpoint truncated while reading " + field + " at byte " + std::to_string(pos_));
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

const std::vector<std::string> kSections = {"param", "adam_m", "adam_v"};

}  // namespace

std::string serialize_checkpoint(const TrainState& state, const CheckpointMeta& meta) {
  nlohmann::json j;
  j["format"] = "oemdm-checkpoint";
  j["training"] = training_config_to_json(meta.config);
  j["vocabulary"] = meta.symbols;
  j["state"] = {{"step", state.step}, {"seed", state.seed}};
  const std::string meta_bytes = j.dump();  // object keys are already sorted

  std::string out(kMagic, 6);
  put(out, kVersion);
  put(out, static_cast<std::uint32_t>(meta_bytes.size()));
  out += meta_bytes;
  const std::vector<std::string> names = state.params.names();
  const ModelParams* sections[] = {&state.params, &state.m, &state.v};
  put(out, static_cast<std::uint32_t>(names.size() * 3));
  for (std::size_t s = 0; s < 3; ++s) {
    std::vector<const Mat*> ts = sections[s]->tensors();
    for (std::size_t i = 0; i < ts.size(); ++i) put_array(out, kSections[s] + "/" + names[i], *ts[i]);
  }
  return out;
}

LoadedCheckpoint parse_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.bytes(6, "magic") != std::string(kMagic, 6)) throw Error(ErrorCode::Corrupt, "checkpoint magic mismatch");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion)
    throw Error(ErrorCode::Corrupt, "checkpoint version " + std::to_string(version) + " is not supported");
  const auto meta_len = r.get<std::uint32_t>("metadata length");
  const std::string meta_bytes = r.bytes(meta_len, "metadata");

  LoadedCheckpoint out;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(meta_bytes);
    out.meta.config = training_config_from_json(j.at("training"), "metadata.training");
    out.meta.symbols = j.at("vocabulary").get<std::vector<std::string>>();
    out.state.step = j.at("state").at("step").get<std::uint64_t>();
    out.state.seed = j.at("state").at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Corrupt, std::string("checkpoint metadata is malformed: ") + e.what());
  } catch (const Error& e) {
    throw Error(ErrorCode::Corrupt, std::string("checkpoint metadata is invalid: ") + e.what());
  }
  if (!out.meta.symbols.empty() && static_cast<int>(out.meta.symbols.size()) != out.meta.config.model.vocab_size)
    throw Error(ErrorCode::Corrupt, "checkpoint vocabulary size disagrees with the model config");

  const ModelConfig& mc = out.meta.config.model;
  out.state.params = ModelParams::zeros(mc);
  out.state.m = ModelParams::zeros(mc);
  out.state.v = ModelParams::zeros(mc);
  const std::vector<std::string> names = out.state.params.names();
  const auto count = r.get<std::uint32_t>("array count");
  if (count != names.size() * 3)
    throw Error(ErrorCode::Corrupt, "checkpoint has " + std::to_string(count) + " arrays, expected " +
                                        std::to_string(names.size() * 3));
  ModelParams* sections[] = {&out.state.params, &out.state.m, &out.state.v};
  for (std::size_t s = 0; s < 3; ++s) {
    std::vector<Mat*> ts = sections[s]->tensors();
    for (std::size_t i = 0; i < ts.size(); ++i) {
      const std::string expect = kSections[s] + "/" + names[i];
      const auto name_len = r.get<std::uint32_t>("name length of " + expect);
      const std::string name = r.bytes(name_len, "name of " + expect);
      if (name != expect) throw Error(ErrorCode::Corrupt, "expected array '" + expect + "', found '" + name + "'");
      const auto rank = r.get<std::uint32_t>("rank of " + name);
      if (rank != 2) throw Error(ErrorCode::Corrupt, "array '" + name + "' has rank " + std::to_string(rank));
      const auto rows = r.get<std::uint64_t>("dims of " + name);
      const auto cols = r.get<std::uint64_t>("dims of " + name);
      Mat& m = *ts[i];
      if (rows != static_cast<std::uint64_t>(m.rows()) || cols != static_cast<std::uint64_t>(m.cols()))
        throw Error(ErrorCode::Corrupt, "array '" + name + "' has shape " + std::to_string(rows) + "x" +
                                            std::to_string(cols) + ", expected " + std::to_string(m.rows()) + "x" +
                                            std::to_string(m.cols()));
      const auto flag = r.get<std::uint8_t>("width flag of " + name);
      if (flag > 1) throw Error(ErrorCode::Corrupt, "array '" + name + "' has unknown width flag");
      const std::string payload = "payload of " + name;
      for (Eigen::Index rr = 0; rr < m.rows(); ++rr)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
          m(rr, c) = flag == 1 ? std::bit_cast<double>(r.get<std::uint64_t>(payload))
                               : static_cast<double>(std::bit_cast<float>(r.get<std::uint32_t>(payload)));
      if (!m.allFinite()) throw Error(ErrorCode::Corrupt, "array '" + name + "' contains non-finite values");
    }
  }
  if (!r.done()) throw Error(ErrorCode::Corrupt, "checkpoint has trailing bytes after the last array");
  return out;
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_checkpoint(ss.str());
  } catch (const Error& e) {
    throw Error(e.code(), path + ": " + e.what());
  }
}

}  // namespace oemdm
