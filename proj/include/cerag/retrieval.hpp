#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "cerag/corpus.hpp"

namespace cerag {

// Inverted index with Lucene-style BM25 scoring. Documents are the lowercased
// word sequences of chunk texts (words_lower), independent of BPE
// granularity. Immutable after build.
struct BM25Index {
    struct Posting {
        std::uint32_t doc = 0;  // index into doc_ids
        std::uint32_t tf = 0;
    };
    // doc_ids sorted ascending, so ascending posting.doc is ascending chunk id.
    std::vector<std::string> doc_ids;
    std::vector<std::uint32_t> doc_len;                  // word counts
    std::map<std::string, std::vector<Posting>> postings;  // term -> postings by doc
    double avgdl = 0.0;
    double k1 = 0.9;
    double b = 0.4;

    std::uint32_t doc_count() const { return static_cast<std::uint32_t>(doc_ids.size()); }
};

BM25Index build_index(const std::vector<Chunk>& chunks, double k1 = 0.9, double b = 0.4);

struct SearchHit {
    std::string chunk_id;
    double score;
};

// Top-k chunks by BM25 score, descending; ties broken by ascending chunk id.
// Query terms are the distinct words_lower(query) terms; chunks matching no
// term are excluded. idf(t) = ln((N - df + 0.5)/(df + 0.5) + 1).
std::vector<SearchHit> search(const BM25Index& index, const std::string& query, int top_k);

// Persists as a directory: meta.json (N, avgdl, k1, b, doc ids and lengths)
// plus postings.bin (binary, term-sorted).
void save_index(const BM25Index& index, const std::filesystem::path& dir);
BM25Index load_bm25(const std::filesystem::path& dir);

}  // namespace cerag
