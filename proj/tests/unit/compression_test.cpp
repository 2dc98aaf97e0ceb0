#include <random>

#include "cerag/errors.hpp"
#include "cerag/compression.hpp"
#include "doctest.h"

using namespace cerag;

namespace {

ModelSpec small_spec(CompressorKind kind, int rate) {
    ModelSpec spec;
    spec.decoder = {2, 8, 2, 32, 40, 64};
    spec.encoder = {1, 4, 2, 16, 40, 64};
    spec.compression = CompressionConfig{rate, kind};
    return spec;
}

std::vector<int> random_tokens(std::mt19937_64& rng, int n, int vocab) {
    std::uniform_int_distribution<int> d(tok::kReservedCount, vocab - 1);
    std::vector<int> out(static_cast<std::size_t>(n));
    for (int& t : out) t = d(rng);
    return out;
}

// Grouping simulation: walk the tokens in blocks of `rate` and count the
// complete blocks, never letting a context vanish.
int embed_count_oracle(int n, int rate) {
    int full = 0;
    for (int i = rate; i <= n; i += rate) ++full;
    return full > 0 ? full : 1;
}

}  // namespace

TEST_CASE("embed_count matches the grouping simulation") {
    for (int n = 1; n <= 96; ++n) {
        for (int rate = 1; rate <= 96; ++rate) {
            CHECK(embed_count(n, rate) == embed_count_oracle(n, rate));
        }
    }
    CHECK(embed_count(128, 64) == 2);
    CHECK(embed_count(64, 64) == 1);
    CHECK(embed_count(63, 64) == 1);
    CHECK(embed_count(65, 64) == 1);
    CHECK(embed_count(512, 4) == 128);
    CHECK(embed_count(1, 512) == 1);
    CHECK_THROWS_AS(embed_count(0, 4), ConfigError);
    CHECK_THROWS_AS(embed_count(5, 0), ConfigError);
}

TEST_CASE("full compressor slices the slot positions") {
    ModelSpec spec = small_spec(CompressorKind::full, 4);
    ParameterStore<float> params = init_params(spec, 2);
    std::mt19937_64 rng(3);
    const std::vector<int> tokens = random_tokens(rng, 10, spec.decoder.vocab_size);
    const int n = static_cast<int>(tokens.size());
    const int k = embed_count(n, 4);
    REQUIRE(k == 2);

    ContextEmbeddings ce = compress_full(tokens, "c0", spec, params);
    CHECK(ce.chunk_id == "c0");
    CHECK(ce.vectors.rows() == k);
    CHECK(ce.vectors.cols() == spec.decoder.d_model);

    // Assemble the compressor input by hand and read the same slot rows.
    std::vector<int> input{tok::kCompress};
    input.insert(input.end(), tokens.begin(), tokens.end());
    input.insert(input.end(), static_cast<std::size_t>(k), tok::kSlot);
    Tape<float> tape;
    GraphParams<float> P(tape, params, nullptr);
    Var<float> hidden = transformer_graph(P, kCompressorPrefix, TransformerDims(spec.decoder),
                                          {{input, std::nullopt}}, true);
    CHECK(ce.vectors == slice_rows(hidden, 1 + n, k).value());

    // Determinism.
    CHECK(compress_full(tokens, "c0", spec, params).vectors == ce.vectors);
}

TEST_CASE("light compressor flattens encoder blocks through the projection") {
    ModelSpec spec = small_spec(CompressorKind::light, 2);
    ParameterStore<float> params = init_params(spec, 9);
    const int b = spec.encoder.d_model;
    std::mt19937_64 rng(4);

    for (const int n : {5, 3, 1, 8}) {
        const std::vector<int> tokens = random_tokens(rng, n, 40);
        const int k = embed_count(n, 2);
        ContextEmbeddings ce = compress_light(tokens, "c", spec, params);
        REQUIRE(ce.vectors.rows() == k);
        REQUIRE(ce.vectors.cols() == spec.decoder.d_model);

        Mat<float> h = encoder_forward(tokens, params, spec.encoder);
        Mat<float> blocks = Mat<float>::Zero(k, 2 * b);
        for (int i = 0; i < k; ++i) {
            for (int j = 0; j < 2; ++j) {
                const int row = i * 2 + j;
                if (row < n) blocks.block(i, j * b, 1, b) = h.row(row);
            }
        }
        Mat<float> expect = blocks * params.at("proj.w");
        expect.rowwise() += params.at("proj.b").row(0);
        CHECK((ce.vectors - expect).cwiseAbs().maxCoeff() <= 1e-6f);
    }
}

TEST_CASE("light compressor rejects a foreign rate") {
    ModelSpec spec = small_spec(CompressorKind::light, 3);
    ParameterStore<float> params = init_params(spec, 0);
    spec.compression->rate = 4;
    CHECK_THROWS_WITH_AS(compress_tokens({9, 10, 11, 12}, "c", spec, params),
                         doctest::Contains("rate 3"), ConfigError);
}

TEST_CASE("compressor dispatch honors the spec") {
    ModelSpec full = small_spec(CompressorKind::full, 4);
    ParameterStore<float> fp = init_params(full, 0);
    CHECK_THROWS_AS(compress_light({9, 10}, "c", full, fp), ConfigError);

    ModelSpec light = small_spec(CompressorKind::light, 4);
    ParameterStore<float> lp = init_params(light, 0);
    CHECK_THROWS_AS(compress_full({9, 10}, "c", light, lp), ConfigError);

    ModelSpec none = full;
    none.compression.reset();
    CHECK_THROWS_AS(compress_tokens({9, 10}, "c", none, fp), ConfigError);

    CHECK_THROWS_AS(compress_tokens({}, "c", full, fp), ConfigError);
}

TEST_CASE("compressor refuses non-finite output") {
    ModelSpec spec = small_spec(CompressorKind::full, 4);
    ParameterStore<float> params = init_params(spec, 0);
    params.at("comp.wte").setConstant(std::numeric_limits<float>::quiet_NaN());
    CHECK_THROWS_AS(compress_tokens({9, 10, 11}, "c", spec, params), std::runtime_error);
}

TEST_CASE("flattened length counts embeddings plus separators") {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<int> m_dist(1, 6), n_dist(1, 200), r_dist(1, 64);
    for (int trial = 0; trial < 200; ++trial) {
        const int m = m_dist(rng), rate = r_dist(rng);
        std::vector<ContextEmbeddings> contexts;
        int expect = m - 1;
        for (int i = 0; i < m; ++i) {
            const int k = embed_count(n_dist(rng), rate);
            contexts.push_back({"c" + std::to_string(i), Mat<float>::Random(k, 8)});
            expect += k;
        }
        MultiContextInput multi = assemble_multi(std::move(contexts));
        CHECK(multi.flattened_length() == expect);
    }
}

TEST_CASE("append_to interleaves separators between contexts") {
    MultiContextInput multi = assemble_multi(
        {{"a", Mat<float>::Random(2, 8)}, {"b", Mat<float>::Random(1, 8)},
         {"c", Mat<float>::Random(3, 8)}});
    MixedSequence<float> seq;
    seq.push_token(tok::kBos);
    multi.append_to(seq);

    REQUIRE(static_cast<int>(seq.size()) == 1 + multi.flattened_length());
    const std::vector<int> sep_at{3, 5};
    for (std::size_t i = 1; i < seq.size(); ++i) {
        const bool is_sep =
            std::find(sep_at.begin(), sep_at.end(), static_cast<int>(i)) != sep_at.end();
        CHECK(seq.items[i].is_token() == is_sep);
        if (is_sep) CHECK(seq.items[i].token == tok::kSep);
    }
    CHECK(RowVec<float>(seq.items[1].vec) == RowVec<float>(multi.contexts[0].vectors.row(0)));
    CHECK(RowVec<float>(seq.items[6].vec) == RowVec<float>(multi.contexts[2].vectors.row(0)));
}

TEST_CASE("assemble_multi validates its contexts") {
    CHECK_THROWS_AS(assemble_multi({}), ConfigError);
    CHECK_THROWS_AS(assemble_multi({{"a", Mat<float>::Random(2, 8)},
                                    {"b", Mat<float>::Random(2, 4)}}),
                    ConfigError);
    CHECK_THROWS_AS(assemble_multi({{"a", Mat<float>(0, 8)}}), ConfigError);
}
