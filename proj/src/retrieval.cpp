#include "cerag/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

#include "cerag/errors.hpp"
#include "json.hpp"

namespace cerag {

BM25Index build_index(const std::vector<Chunk>& chunks, double k1, double b) {
    if (k1 < 0 || b < 0 || b > 1) throw ConfigError("invalid BM25 parameters");
    BM25Index index;
    index.k1 = k1;
    index.b = b;

    std::vector<std::size_t> order(chunks.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t z) { return chunks[a].id < chunks[z].id; });
    for (std::size_t i = 0; i + 1 < order.size(); ++i) {
        if (chunks[order[i]].id == chunks[order[i + 1]].id) {
            throw ConfigError("duplicate chunk id " + chunks[order[i]].id);
        }
    }

    std::uint64_t total_len = 0;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
        const Chunk& c = chunks[order[rank]];
        index.doc_ids.push_back(c.id);
        std::map<std::string, std::uint32_t> tf;
        for (std::string& w : words_lower(c.text)) ++tf[std::move(w)];
        std::uint32_t len = 0;
        for (const auto& [term, count] : tf) {
            index.postings[term].push_back({static_cast<std::uint32_t>(rank), count});
            len += count;
        }
        index.doc_len.push_back(len);
        total_len += len;
    }
    index.avgdl = index.doc_ids.empty()
                      ? 0.0
                      : static_cast<double>(total_len) / static_cast<double>(index.doc_ids.size());
    return index;
}

std::vector<SearchHit> search(const BM25Index& index, const std::string& query, int top_k) {
    if (top_k < 1) throw ConfigError("top_k must be >= 1");
    const std::set<std::string> terms = [&] {
        std::set<std::string> s;
        for (std::string& w : words_lower(query)) s.insert(std::move(w));
        return s;
    }();
    if (terms.empty()) throw ConfigError("query has no searchable terms");

    const double n_docs = static_cast<double>(index.doc_count());
    std::map<std::uint32_t, double> scores;  // doc index -> score, id-ordered
    for (const std::string& term : terms) {
        auto it = index.postings.find(term);
        if (it == index.postings.end()) continue;
        const double df = static_cast<double>(it->second.size());
        const double idf = std::log((n_docs - df + 0.5) / (df + 0.5) + 1.0);
        for (const BM25Index::Posting& p : it->second) {
            const double tf = static_cast<double>(p.tf);
            const double norm =
                1.0 - index.b + index.b * static_cast<double>(index.doc_len[p.doc]) / index.avgdl;
            scores[p.doc] += idf * tf * (index.k1 + 1.0) / (tf + index.k1 * norm);
        }
    }

    std::vector<SearchHit> hits;
    hits.reserve(scores.size());
    for (const auto& [doc, score] : scores) hits.push_back({index.doc_ids[doc], score});
    std::stable_sort(hits.begin(), hits.end(), [](const SearchHit& a, const SearchHit& z) {
        return a.score > z.score;  // stable keeps the id-ascending order of ties
    });
    if (static_cast<int>(hits.size()) > top_k) hits.resize(static_cast<std::size_t>(top_k));
    return hits;
}

namespace {
constexpr char kPostingsMagic[4] = {'B', 'M', 'P', 'S'};
constexpr std::uint32_t kPostingsVersion = 1;
}  // namespace

void save_index(const BM25Index& index, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json meta;
    meta["doc_count"] = index.doc_count();
    meta["avgdl"] = index.avgdl;
    meta["k1"] = index.k1;
    meta["b"] = index.b;
    meta["doc_ids"] = index.doc_ids;
    meta["doc_len"] = index.doc_len;
    {
        std::ofstream f(dir / "meta.json");
        if (!f) throw IoError("cannot write " + (dir / "meta.json").string());
        f << meta.dump(1, '\t') << '\n';
    }

    std::ofstream f(dir / "postings.bin", std::ios::binary);
    if (!f) throw IoError("cannot write " + (dir / "postings.bin").string());
    auto put = [&f](const void* p, std::size_t n) {
        f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    };
    put(kPostingsMagic, 4);
    put(&kPostingsVersion, 4);
    const std::uint64_t terms = index.postings.size();
    put(&terms, 8);
    for (const auto& [term, postings] : index.postings) {
        const auto len = static_cast<std::uint16_t>(term.size());
        put(&len, 2);
        put(term.data(), term.size());
        const auto df = static_cast<std::uint32_t>(postings.size());
        put(&df, 4);
        for (const BM25Index::Posting& p : postings) {
            put(&p.doc, 4);
            put(&p.tf, 4);
        }
    }
    if (!f) throw IoError("write failed for " + (dir / "postings.bin").string());
}

BM25Index load_bm25(const std::filesystem::path& dir) {
    BM25Index index;
    {
        std::ifstream f(dir / "meta.json");
        if (!f) throw IoError("cannot open " + (dir / "meta.json").string());
        nlohmann::json meta;
        try {
            f >> meta;
            index.avgdl = meta.at("avgdl").get<double>();
            index.k1 = meta.at("k1").get<double>();
            index.b = meta.at("b").get<double>();
            index.doc_ids = meta.at("doc_ids").get<std::vector<std::string>>();
            index.doc_len = meta.at("doc_len").get<std::vector<std::uint32_t>>();
            if (meta.at("doc_count").get<std::size_t>() != index.doc_ids.size()) {
                throw ParseError("doc_count does not match doc_ids");
            }
        } catch (const nlohmann::json::exception& e) {
            throw ParseError((dir / "meta.json").string() + ": " + e.what());
        }
    }

    std::ifstream f(dir / "postings.bin", std::ios::binary);
    if (!f) throw IoError("cannot open " + (dir / "postings.bin").string());
    auto get = [&f, &dir](void* p, std::size_t n) {
        f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (!f) throw ParseError("truncated postings file " + (dir / "postings.bin").string());
    };
    char magic[4];
    std::uint32_t version = 0;
    std::uint64_t terms = 0;
    get(magic, 4);
    get(&version, 4);
    get(&terms, 8);
    if (std::memcmp(magic, kPostingsMagic, 4) != 0 || version != kPostingsVersion) {
        throw ParseError("unrecognized postings file " + (dir / "postings.bin").string());
    }
    for (std::uint64_t i = 0; i < terms; ++i) {
        std::uint16_t len = 0;
        get(&len, 2);
        std::string term(len, '\0');
        get(term.data(), len);
        std::uint32_t df = 0;
        get(&df, 4);
        std::vector<BM25Index::Posting>& postings = index.postings[term];
        postings.resize(df);
        for (BM25Index::Posting& p : postings) {
            get(&p.doc, 4);
            get(&p.tf, 4);
            if (p.doc >= index.doc_ids.size()) {
                throw ParseError("posting references unknown document in " +
                                 (dir / "postings.bin").string());
            }
        }
    }
    return index;
}

}  // namespace cerag
