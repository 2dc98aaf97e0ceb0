#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "cerag/compression.hpp"
#include "cerag/corpus.hpp"

namespace cerag {

// CCIX: persisted per-chunk context embeddings. Little-endian layout:
//   magic "CCIX", u32 version=1, u8 kind, u32 rate, u32 dim,
//   32-byte model fingerprint, u64 entry count;
// then per entry: u16 id length, UTF-8 id, u32 k, k*dim float32 (embedding
// vectors in order, each vector contiguous). Header is 57 bytes, so the file
// size is exactly 57 + sum(2 + |id| + 4 + k*dim*4).
inline constexpr std::size_t kCcixHeaderBytes = 57;

struct CompressedIndex {
    std::uint32_t version = 1;
    CompressorKind kind = CompressorKind::full;
    std::uint32_t rate = 0;
    std::uint32_t dim = 0;
    std::array<std::uint8_t, 32> fingerprint{};
    std::vector<ContextEmbeddings> entries;

    const ContextEmbeddings& lookup(const std::string& chunk_id) const;
    bool has(const std::string& chunk_id) const { return by_id_.contains(chunk_id); }
    void rebuild_id_map();

  private:
    std::unordered_map<std::string, std::size_t> by_id_;
};

struct IndexBuildSummary {
    std::size_t entry_count = 0;
    std::uint64_t file_bytes = 0;
    double wall_ms = 0.0;
};

// Compresses every chunk with the spec's compressor and writes the CCIX file.
// Deterministic bytes for fixed inputs; the fingerprint ties the file to the
// producing checkpoint.
IndexBuildSummary build_compressed_index(const std::vector<Chunk>& chunks, const ModelSpec& spec,
                                         const ParameterStore<float>& params,
                                         const std::array<std::uint8_t, 32>& fingerprint,
                                         const std::filesystem::path& out_path);

// Loads a CCIX file. When expected_fingerprint is non-null and differs from
// the stored one, throws unless allow_mismatch (then warns on stderr):
// embeddings are only meaningful to the model that produced them.
CompressedIndex load_index(const std::filesystem::path& path,
                           const std::array<std::uint8_t, 32>* expected_fingerprint = nullptr,
                           bool allow_mismatch = false);

std::string fingerprint_hex(const std::array<std::uint8_t, 32>& fp);

}  // namespace cerag
