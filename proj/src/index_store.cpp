#include "cerag/index_store.hpp"

#include <chrono>
#include <cstring>
#include <fstream>
#include <iostream>

namespace cerag {

namespace {
constexpr char kMagic[4] = {'C', 'C', 'I', 'X'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

const ContextEmbeddings& CompressedIndex::lookup(const std::string& chunk_id) const {
    auto it = by_id_.find(chunk_id);
    if (it == by_id_.end()) {
        throw std::out_of_range("chunk id \"" + chunk_id + "\" not in compressed index");
    }
    return entries[it->second];
}

void CompressedIndex::rebuild_id_map() {
    by_id_.clear();
    for (std::size_t i = 0; i < entries.size(); ++i) by_id_.emplace(entries[i].chunk_id, i);
}

IndexBuildSummary build_compressed_index(const std::vector<Chunk>& chunks, const ModelSpec& spec,
                                         const ParameterStore<float>& params,
                                         const std::array<std::uint8_t, 32>& fingerprint,
                                         const std::filesystem::path& out_path) {
    if (!spec.compression) throw ConfigError("building a compressed index requires a compressor");
    const auto start = std::chrono::steady_clock::now();

    std::ofstream f(out_path, std::ios::binary);
    if (!f) throw IoError("cannot write " + out_path.string());
    auto put = [&f](const void* p, std::size_t n) {
        f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    };
    put(kMagic, 4);
    put(&kVersion, 4);
    const auto kind = static_cast<std::uint8_t>(spec.compression->kind);
    put(&kind, 1);
    const auto rate = static_cast<std::uint32_t>(spec.compression->rate);
    put(&rate, 4);
    const auto dim = static_cast<std::uint32_t>(spec.decoder.d_model);
    put(&dim, 4);
    put(fingerprint.data(), fingerprint.size());
    const std::uint64_t count = chunks.size();
    put(&count, 8);

    for (const Chunk& chunk : chunks) {
        const ContextEmbeddings e = compress_tokens(chunk.tokens, chunk.id, spec, params);
        if (chunk.id.size() > 0xffff) throw ConfigError("chunk id too long: " + chunk.id);
        const auto id_len = static_cast<std::uint16_t>(chunk.id.size());
        put(&id_len, 2);
        put(chunk.id.data(), chunk.id.size());
        const auto k = static_cast<std::uint32_t>(e.vectors.rows());
        put(&k, 4);
        for (Eigen::Index r = 0; r < e.vectors.rows(); ++r) {
            for (Eigen::Index c = 0; c < e.vectors.cols(); ++c) {
                const float v = e.vectors(r, c);
                put(&v, 4);
            }
        }
    }
    f.flush();
    if (!f) throw IoError("write failed for " + out_path.string());
    f.close();

    IndexBuildSummary summary;
    summary.entry_count = chunks.size();
    summary.file_bytes = std::filesystem::file_size(out_path);
    summary.wall_ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - start)
                          .count();
    return summary;
}

CompressedIndex load_index(const std::filesystem::path& path,
                           const std::array<std::uint8_t, 32>* expected_fingerprint,
                           bool allow_mismatch) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    std::uint64_t offset = 0;
    auto get = [&](void* p, std::size_t n) {
        f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (!f) {
            throw ParseError("compressed index " + path.string() + " truncated at offset " +
                             std::to_string(offset));
        }
        offset += n;
    };

    CompressedIndex index;
    char magic[4];
    get(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw ParseError(path.string() + " is not a compressed index (bad magic)");
    }
    get(&index.version, 4);
    if (index.version != kVersion) {
        throw ParseError("unsupported compressed index version " + std::to_string(index.version));
    }
    std::uint8_t kind = 0;
    get(&kind, 1);
    if (kind > 1) throw ParseError("unknown compressor kind in " + path.string());
    index.kind = static_cast<CompressorKind>(kind);
    get(&index.rate, 4);
    get(&index.dim, 4);
    get(index.fingerprint.data(), index.fingerprint.size());
    std::uint64_t count = 0;
    get(&count, 8);

    if (expected_fingerprint && *expected_fingerprint != index.fingerprint) {
        const std::string msg = "compressed index " + path.string() +
                                " was built from a different checkpoint (fingerprint " +
                                fingerprint_hex(index.fingerprint) + ")";
        if (!allow_mismatch) throw std::runtime_error(msg);
        std::cerr << "warning: " << msg << '\n';
    }

    index.entries.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        std::uint16_t id_len = 0;
        get(&id_len, 2);
        ContextEmbeddings e;
        e.chunk_id.resize(id_len);
        get(e.chunk_id.data(), id_len);
        std::uint32_t k = 0;
        get(&k, 4);
        e.vectors.resize(k, index.dim);
        for (std::uint32_t r = 0; r < k; ++r) {
            for (std::uint32_t c = 0; c < index.dim; ++c) {
                float v = 0;
                get(&v, 4);
                e.vectors(r, c) = v;
            }
        }
        index.entries.push_back(std::move(e));
    }
    if (f.peek() != std::ifstream::traits_type::eof()) {
        throw ParseError("compressed index " + path.string() + " has trailing bytes at offset " +
                         std::to_string(offset));
    }
    index.rebuild_id_map();
    return index;
}

std::string fingerprint_hex(const std::array<std::uint8_t, 32>& fp) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    out.reserve(64);
    for (std::uint8_t b : fp) {
        out += digits[b >> 4];
        out += digits[b & 0xf];
    }
    return out;
}

}  // namespace cerag
