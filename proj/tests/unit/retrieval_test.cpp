#include <filesystem>
#include <fstream>

#include "cerag/errors.hpp"
#include "cerag/retrieval.hpp"
#include "doctest.h"

using namespace cerag;
namespace fs = std::filesystem;

namespace {

std::vector<Chunk> three_chunks() {
    return {{"c1", {}, "red apple"},
            {"c2", {}, "red red banana"},
            {"c3", {}, "yellow pear"}};
}

}  // namespace

TEST_CASE("bm25 scores match the hand-computed reference") {
    // Reference values computed independently from
    // idf = ln((N - df + 0.5)/(df + 0.5) + 1), tf-saturated with k1 = 0.9,
    // b = 0.4, avgdl = 7/3.
    BM25Index index = build_index(three_chunks());
    CHECK(index.avgdl == doctest::Approx(7.0 / 3.0).epsilon(1e-12));

    std::vector<SearchHit> hits = search(index, "red banana", 3);
    REQUIRE(hits.size() == 2);  // c3 matches no term and is excluded
    CHECK(hits[0].chunk_id == "c2");
    CHECK(hits[0].score == doctest::Approx(1.525230045189443).epsilon(1e-9));
    CHECK(hits[1].chunk_id == "c1");
    CHECK(hits[1].score == doctest::Approx(0.48307946437158295).epsilon(1e-9));

    hits = search(index, "yellow apple pear", 3);
    REQUIRE(hits.size() == 2);
    CHECK(hits[0].chunk_id == "c3");
    CHECK(hits[0].score == doctest::Approx(2.01623324034868).epsilon(1e-9));
    CHECK(hits[1].chunk_id == "c1");
    CHECK(hits[1].score == doctest::Approx(1.00811662017434).epsilon(1e-9));
}

TEST_CASE("query words are case-folded and deduplicated") {
    BM25Index index = build_index(three_chunks());
    std::vector<SearchHit> a = search(index, "red banana", 3);
    std::vector<SearchHit> b = search(index, "RED, Banana! red", 3);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].chunk_id == b[i].chunk_id);
        CHECK(a[i].score == b[i].score);
    }
}

TEST_CASE("score ties break toward the ascending chunk id") {
    BM25Index index = build_index({{"b2", {}, "same words here"},
                                   {"a9", {}, "same words here"},
                                   {"a10", {}, "same words here"}});
    std::vector<SearchHit> hits = search(index, "words", 3);
    REQUIRE(hits.size() == 3);
    CHECK(hits[0].score == hits[1].score);
    CHECK(hits[1].score == hits[2].score);
    // Lexicographic id order: a10 < a9 < b2.
    CHECK(hits[0].chunk_id == "a10");
    CHECK(hits[1].chunk_id == "a9");
    CHECK(hits[2].chunk_id == "b2");
}

TEST_CASE("top_k truncates and validates") {
    BM25Index index = build_index(three_chunks());
    CHECK(search(index, "red", 1).size() == 1);
    CHECK(search(index, "red", 1)[0].chunk_id == "c2");
    CHECK(search(index, "red", 100).size() == 2);
    CHECK_THROWS_AS(search(index, "red", 0), ConfigError);
    CHECK_THROWS_AS(search(index, "...!!!", 3), ConfigError);
    CHECK(search(index, "zzz unknown terms", 3).empty());
}

TEST_CASE("index build is order-independent and rejects duplicates") {
    std::vector<Chunk> shuffled = {{"c3", {}, "yellow pear"},
                                   {"c1", {}, "red apple"},
                                   {"c2", {}, "red red banana"}};
    BM25Index a = build_index(three_chunks());
    BM25Index b = build_index(shuffled);
    CHECK(a.doc_ids == b.doc_ids);
    CHECK(a.doc_len == b.doc_len);
    std::vector<SearchHit> ha = search(a, "red banana", 3);
    std::vector<SearchHit> hb = search(b, "red banana", 3);
    REQUIRE(ha.size() == hb.size());
    for (std::size_t i = 0; i < ha.size(); ++i) {
        CHECK(ha[i].chunk_id == hb[i].chunk_id);
        CHECK(ha[i].score == hb[i].score);
    }

    CHECK_THROWS_AS(build_index({{"c1", {}, "x"}, {"c1", {}, "y"}}), ConfigError);
    CHECK_THROWS_AS(build_index({}, -1.0, 0.4), ConfigError);
    CHECK_THROWS_AS(build_index({}, 0.9, 1.5), ConfigError);
}

TEST_CASE("bm25 save and load round trip") {
    const fs::path dir = fs::temp_directory_path() / "cerag_bm25_test";
    fs::remove_all(dir);
    BM25Index index = build_index(three_chunks(), 1.2, 0.75);
    save_index(index, dir);
    BM25Index loaded = load_bm25(dir);

    CHECK(loaded.doc_ids == index.doc_ids);
    CHECK(loaded.doc_len == index.doc_len);
    CHECK(loaded.avgdl == index.avgdl);
    CHECK(loaded.k1 == index.k1);
    CHECK(loaded.b == index.b);
    REQUIRE(loaded.postings.size() == index.postings.size());
    for (const auto& [term, postings] : index.postings) {
        const auto& lp = loaded.postings.at(term);
        REQUIRE(lp.size() == postings.size());
        for (std::size_t i = 0; i < postings.size(); ++i) {
            CHECK(lp[i].doc == postings[i].doc);
            CHECK(lp[i].tf == postings[i].tf);
        }
    }
    std::vector<SearchHit> ha = search(index, "red banana", 3);
    std::vector<SearchHit> hb = search(loaded, "red banana", 3);
    REQUIRE(ha.size() == hb.size());
    for (std::size_t i = 0; i < ha.size(); ++i) CHECK(ha[i].score == hb[i].score);
    fs::remove_all(dir);
}

TEST_CASE("bm25 loading rejects damage") {
    const fs::path dir = fs::temp_directory_path() / "cerag_bm25_damage";
    fs::remove_all(dir);
    BM25Index index = build_index(three_chunks());
    save_index(index, dir);

    const fs::path bin = dir / "postings.bin";
    const auto size = fs::file_size(bin);
    fs::resize_file(bin, size - 3);
    CHECK_THROWS_WITH_AS(load_bm25(dir), doctest::Contains("truncated"), ParseError);

    save_index(index, dir);
    {
        std::fstream f(bin, std::ios::in | std::ios::out | std::ios::binary);
        f.put('X');
    }
    CHECK_THROWS_WITH_AS(load_bm25(dir), doctest::Contains("unrecognized"), ParseError);

    save_index(index, dir);
    {
        // First posting's doc index sits after magic, version, term count,
        // the term length prefix, the term bytes and df.
        std::fstream f(bin, std::ios::in | std::ios::out | std::ios::binary);
        const std::string first_term = index.postings.begin()->first;
        f.seekp(static_cast<std::streamoff>(16 + 2 + first_term.size() + 4));
        const std::uint32_t bogus = 999;
        f.write(reinterpret_cast<const char*>(&bogus), 4);
    }
    CHECK_THROWS_WITH_AS(load_bm25(dir), doctest::Contains("unknown document"), ParseError);

    fs::remove_all(dir);
    CHECK_THROWS_AS(load_bm25(dir), IoError);
}
