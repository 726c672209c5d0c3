// Character-level corpora: UTF-8 ingestion into fixed-length sequences and a
// seeded synthetic grammar for smoke training.
#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "oemdm/core.hpp"

namespace oemdm {

enum class ChunkMode { Stream, Lines };
ChunkMode parse_chunk_mode(const std::string& s);

inline constexpr const char* kPadSymbol = "<pad>";

struct Corpus {
  std::vector<std::string> symbols;  // one UTF-8 character per id; the pad is last
  Token pad = 0;
  int length = 0;
  std::vector<Sequence> sequences;

  int vocab_size() const { return static_cast<int>(symbols.size()); }
  std::string decode(std::span<const Token> tokens) const;  // pad renders as nothing
};

std::vector<char32_t> decode_utf8(std::string_view bytes);
std::string encode_utf8(char32_t cp);

// Ids follow codepoint order; the pad gets the next id. When `alphabet` is
// given it fixes the character set instead of the data.
Corpus ingest_text(std::string_view utf8, int length, ChunkMode mode, int vocab_cap,
                   const std::optional<std::vector<char32_t>>& alphabet = std::nullopt);
Corpus ingest_corpus(const std::string& path, int length, ChunkMode mode, int vocab_cap);

// Key/value grammar "kv": length/2 pairs, keys drawn uniformly from 8
// letters, each followed by a digit that is a fixed, non-injective function
// of its key. One line per text.
std::string grammar_text(const std::string& grammar, std::uint64_t seed, int count, int length);
std::vector<char32_t> grammar_alphabet(const std::string& grammar);
Corpus grammar_corpus(const std::string& grammar, std::uint64_t seed, int count, int length);

// Deterministic split: the last `held_out` sequences become validation.
std::pair<std::vector<Sequence>, std::vector<Sequence>> split_corpus(const std::vector<Sequence>& seqs,
                                                                     std::size_t held_out);

}  // namespace oemdm
