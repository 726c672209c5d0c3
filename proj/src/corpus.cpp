#include "oemdm/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

namespace oemdm {

ChunkMode parse_chunk_mode(const std::string& s) {
  if (s == "stream") return ChunkMode::Stream;
  if (s == "lines") return ChunkMode::Lines;
  throw Error(ErrorCode::Config, "corpus mode must be 'stream' or 'lines', got '" + s + "'");
}

std::vector<char32_t> decode_utf8(std::string_view s) {
  std::vector<char32_t> out;
  std::size_t i = 0;
  auto bad = [&](const char* why) {
    throw Error(ErrorCode::InvalidArgument, std::string("invalid UTF-8 at byte ") + std::to_string(i) + ": " + why);
  };
  while (i < s.size()) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    int extra = 0;
    char32_t cp = 0;
    if (b0 < 0x80) {
      extra = 0;
      cp = b0;
    } else if ((b0 & 0xE0) == 0xC0) {
      extra = 1;
      cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
      extra = 2;
      cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
      extra = 3;
      cp = b0 & 0x07;
    } else {
      bad("unexpected lead byte");
    }
    if (i + static_cast<std::size_t>(extra) >= s.size() && extra > 0) bad("truncated sequence");
    for (int k = 1; k <= extra; ++k) {
      const auto b = static_cast<unsigned char>(s[i + static_cast<std::size_t>(k)]);
      if ((b & 0xC0) != 0x80) bad("bad continuation byte");
      cp = (cp << 6) | (b & 0x3F);
    }
    static constexpr char32_t kMin[] = {0, 0x80, 0x800, 0x10000};
    if (cp < kMin[extra] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) bad("overlong or out-of-range codepoint");
    out.push_back(cp);
    i += static_cast<std::size_t>(extra) + 1;
  }
  return out;
}

std::string encode_utf8(char32_t cp) {
  std::string s;
  if (cp < 0x80) {
    s += static_cast<char>(cp);
  } else if (cp < 0x800) {
    s += static_cast<char>(0xC0 | (cp >> 6));
    s += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    s += static_cast<char>(0xE0 | (cp >> 12));
    s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    s += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    s += static_cast<char>(0xF0 | (cp >> 18));
    s += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    s += static_cast<char>(0x80 | (cp & 0x3F));
  }
  return s;
}

std::string Corpus::decode(std::span<const Token> tokens) const {
  std::string out;
  for (Token t : tokens) {
    if (t == pad) continue;
    if (t < 0 || t >= vocab_size()) throw Error(ErrorCode::InvalidArgument, "token outside the corpus vocabulary");
    out += symbols[static_cast<std::size_t>(t)];
  }
  return out;
}

Corpus ingest_text(std::string_view utf8, int length, ChunkMode mode, int vocab_cap,
                   const std::optional<std::vector<char32_t>>& alphabet) {
  if (length < 1) throw Error(ErrorCode::InvalidArgument, "sequence length must be positive");
  const std::vector<char32_t> cps = decode_utf8(utf8);

  // Pieces to chunk: the whole stream, or each non-empty line without its terminator.
  std::vector<std::vector<char32_t>> pieces;
  if (mode == ChunkMode::Stream) {
    if (!cps.empty()) pieces.push_back(cps);
  } else {
    std::vector<char32_t> line;
    auto flush = [&] {
      if (!line.empty() && line.back() == U'\r') line.pop_back();
      if (!line.empty()) pieces.push_back(line);
      line.clear();
    };
    for (char32_t c : cps) {
      if (c == U'\n') flush();
      else line.push_back(c);
    }
    flush();
  }
  if (pieces.empty()) throw Error(ErrorCode::InvalidArgument, "corpus is empty");

  std::vector<char32_t> chars;
  if (alphabet) {
    chars = *alphabet;
  } else {
    for (const auto& p : pieces) chars.insert(chars.end(), p.begin(), p.end());
  }
  std::sort(chars.begin(), chars.end());
  chars.erase(std::unique(chars.begin(), chars.end()), chars.end());
  if (static_cast<int>(chars.size()) > vocab_cap)
    throw Error(ErrorCode::InvalidArgument, "corpus has " + std::to_string(chars.size()) +
                                                " distinct characters, above the vocabulary cap of " +
                                                std::to_string(vocab_cap));
  std::map<char32_t, Token> id;
  Corpus c;
  for (char32_t ch : chars) {
    id[ch] = static_cast<Token>(c.symbols.size());
    c.symbols.push_back(encode_utf8(ch));
  }
  c.pad = static_cast<Token>(c.symbols.size());
  c.symbols.push_back(kPadSymbol);
  c.length = length;

  const auto L = static_cast<std::size_t>(length);
  for (const auto& p : pieces) {
    for (std::size_t start = 0; start < p.size(); start += L) {
      Sequence s{std::vector<Token>(L, c.pad)};
      for (std::size_t k = 0; k < L && start + k < p.size(); ++k) {
        auto it = id.find(p[start + k]);
        if (it == id.end())
          throw Error(ErrorCode::InvalidArgument, "character U+" + std::to_string(static_cast<unsigned>(p[start + k])) +
                                                      " is not in the declared alphabet");
        s.tokens[k] = it->second;
      }
      c.sequences.push_back(std::move(s));
    }
  }
  return c;
}

Corpus ingest_corpus(const std::string& path, int length, ChunkMode mode, int vocab_cap) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open corpus '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return ingest_text(ss.str(), length, mode, vocab_cap);
  } catch (const Error& e) {
    throw Error(e.code(), path + ": " + e.what());
  }
}

namespace {

constexpr int kKeys = 8;
char32_t kv_value(int key) { return static_cast<char32_t>(U'0' + (key * 5 + 3) % 4); }

}  // namespace

std::vector<char32_t> grammar_alphabet(const std::string& grammar) {
  if (grammar != "kv") throw Error(ErrorCode::Config, "unknown grammar '" + grammar + "'");
  std::vector<char32_t> a;
  for (int k = 0; k < kKeys; ++k) a.push_back(static_cast<char32_t>(U'a' + k));
  for (int v = 0; v < 4; ++v) a.push_back(static_cast<char32_t>(U'0' + v));
  return a;
}

std::string grammar_text(const std::string& grammar, std::uint64_t seed, int count, int length) {
  grammar_alphabet(grammar);
  if (length < 2 || length % 2 != 0) throw Error(ErrorCode::InvalidArgument, "kv grammar needs an even length >= 2");
  if (count < 1) throw Error(ErrorCode::InvalidArgument, "grammar corpus needs at least one text");
  const RandomStream root = RandomStream(seed).derive("grammar:" + grammar);
  std::string out;
  for (int n = 0; n < count; ++n) {
    RandomStream r = root.derive(static_cast<std::uint64_t>(n));
    for (int p = 0; p < length / 2; ++p) {
      const int key = static_cast<int>(r.below(kKeys));
      out += encode_utf8(static_cast<char32_t>(U'a' + key));
      out += encode_utf8(kv_value(key));
    }
    out += '\n';
  }
  return out;
}

Corpus grammar_corpus(const std::string& grammar, std::uint64_t seed, int count, int length) {
  return ingest_text(grammar_text(grammar, seed, count, length), length, ChunkMode::Lines, 1 << 20,
                     grammar_alphabet(grammar));
}

std::pair<std::vector<Sequence>, std::vector<Sequence>> split_corpus(const std::vector<Sequence>& seqs,
                                                                     std::size_t held_out) {
  if (held_out >= seqs.size())
    throw Error(ErrorCode::InvalidArgument, "validation split would leave no training sequences");
  const auto cut = seqs.end() - static_cast<std::ptrdiff_t>(held_out);
  return {std::vector<Sequence>(seqs.begin(), cut), std::vector<Sequence>(cut, seqs.end())};
}

}  // namespace oemdm
