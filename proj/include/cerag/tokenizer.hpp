#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace cerag {

// Reserved token ids. They never appear in encoded text; the byte alphabet
// starts right after them.
namespace tok {
constexpr int kPad = 0;
constexpr int kBos = 1;
constexpr int kEos = 2;
// Task marker prepended to the compressor input sequence.
constexpr int kCompress = 3;
// Slot token appended to the compressor input; the hidden state at each slot
// position becomes one context embedding.
constexpr int kSlot = 4;
// Separator between embedding blocks of different passages in a prompt.
constexpr int kSep = 5;
// Delimiters reserved for instruction formatting.
constexpr int kInstOpen = 6;
constexpr int kInstClose = 7;
constexpr int kReservedCount = 8;
constexpr int kByteBase = kReservedCount;              // ids 8..263 are raw bytes
constexpr int kFirstMerged = kByteBase + 256;          // merge ids start at 264
}  // namespace tok

// Byte-level BPE tokenizer. Immutable after construction; safe to share
// across threads. Round trip detokenize(tokenize(s)) == s holds for any
// byte string.
class Tokenizer {
  public:
    Tokenizer();  // byte-level only, no merges

    std::vector<int> tokenize(std::string_view text) const;
    std::string detokenize(std::span<const int> ids) const;

    // Total id count: reserved + 256 bytes + merges.
    int vocab_size() const { return tok::kFirstMerged + static_cast<int>(merges_.size()); }

    // Byte expansion of an id; empty for reserved ids.
    const std::string& expansion(int id) const;

    const std::vector<std::pair<int, int>>& merges() const { return merges_; }
    void set_merges(std::vector<std::pair<int, int>> merges);

    void save(const std::filesystem::path& path) const;
    static Tokenizer load(const std::filesystem::path& path);

  private:
    std::vector<int> encode_piece(std::string_view piece) const;

    std::vector<std::pair<int, int>> merges_;
    std::vector<std::string> expansions_;            // indexed by id, "" for reserved
    std::unordered_map<std::uint64_t, int> ranks_;   // packed (left,right) -> merge index
};

// Trains merge rules by greedy pair counting over the corpus until the vocab
// reaches vocab_size or no pair occurs at least twice. Deterministic: ties in
// pair frequency break toward the lexicographically smallest (left, right) id
// pair; the seed is accepted for interface stability but unused because
// training is exact counting. Throws ConfigError if the corpus is empty or
// vocab_size < kFirstMerged.
Tokenizer build_tokenizer(const std::vector<std::string>& texts, int vocab_size,
                          std::uint64_t seed = 0);

// Lowercased alphanumeric word segmentation used by retrieval and metrics.
// Splits on every non-alphanumeric byte.
std::vector<std::string> words_lower(std::string_view text);

}  // namespace cerag
