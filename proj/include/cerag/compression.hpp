#pragma once

#include <string>
#include <vector>

#include "cerag/model.hpp"
#include "cerag/tokenizer.hpp"

namespace cerag {

// Number of context embeddings for n tokens at the given rate:
// max(1, floor(n / rate)). A context never vanishes.
int embed_count(int n, int rate);

struct ContextEmbeddings {
    std::string chunk_id;
    Mat<float> vectors;  // k x d
    int count() const { return static_cast<int>(vectors.rows()); }
};

// Full compressor: run [compress-marker] t1..tn [slot]*k through the
// compressor transformer (decoder architecture, "comp." parameters, causal)
// and take the final hidden states at the k slot positions.
template <typename S>
Var<S> compress_full_graph(GraphParams<S>& P, const DecoderConfig& arch,
                           const std::vector<int>& tokens, int rate) {
    arch.validate();
    if (tokens.empty()) throw ConfigError("cannot compress an empty token sequence");
    const int n = static_cast<int>(tokens.size());
    const int k = embed_count(n, rate);
    std::vector<int> input;
    input.reserve(static_cast<std::size_t>(n + k + 1));
    input.push_back(tok::kCompress);
    input.insert(input.end(), tokens.begin(), tokens.end());
    input.insert(input.end(), static_cast<std::size_t>(k), tok::kSlot);
    GraphInput<S> segments{{input, std::nullopt}};
    Var<S> hidden =
        transformer_graph(P, kCompressorPrefix, TransformerDims(arch), segments, /*causal=*/true);
    return slice_rows(hidden, 1 + n, k);
}

// Light compressor: bidirectional encoder hidden states (n x b), regrouped
// into k blocks of rate rows (zero-padded only when n < rate, trailing
// partial block dropped otherwise) and mapped through the block projection.
template <typename S>
Var<S> compress_light_graph(GraphParams<S>& P, const EncoderConfig& arch,
                            const std::vector<int>& tokens, int rate) {
    arch.validate();
    if (tokens.empty()) throw ConfigError("cannot compress an empty token sequence");
    if (rate < 1) throw ConfigError("compression rate must be >= 1");
    const int n = static_cast<int>(tokens.size());
    const int k = embed_count(n, rate);
    GraphInput<S> segments{{tokens, std::nullopt}};
    Var<S> hidden =
        transformer_graph(P, kEncoderPrefix, TransformerDims(arch), segments, /*causal=*/false);
    Var<S> w = P(std::string(kProjectionPrefix) + ".w");
    if (w.rows() != static_cast<Eigen::Index>(rate) * arch.d_model) {
        throw ConfigError("projection built for rate " +
                          std::to_string(w.rows() / arch.d_model) + ", not " + std::to_string(rate));
    }
    Var<S> blocks = block_flatten(hidden, rate, k);
    return add_bias(matmul(blocks, w), P(std::string(kProjectionPrefix) + ".b"));
}

// Dispatches on the spec's compressor kind. The query never reaches this
// path: compression is question-independent by construction.
template <typename S>
Var<S> compress_graph(GraphParams<S>& P, const ModelSpec& spec, const std::vector<int>& tokens) {
    if (!spec.compression) throw ConfigError("model spec has no compressor");
    if (spec.compression->kind == CompressorKind::full) {
        return compress_full_graph(P, spec.decoder, tokens, spec.compression->rate);
    }
    return compress_light_graph(P, spec.encoder, tokens, spec.compression->rate);
}

ContextEmbeddings compress_full(const std::vector<int>& tokens, const std::string& chunk_id,
                                const ModelSpec& spec, const ParameterStore<float>& params);
ContextEmbeddings compress_light(const std::vector<int>& tokens, const std::string& chunk_id,
                                 const ModelSpec& spec, const ParameterStore<float>& params);
ContextEmbeddings compress_tokens(const std::vector<int>& tokens, const std::string& chunk_id,
                                  const ModelSpec& spec, const ParameterStore<float>& params);

struct MultiContextInput {
    std::vector<ContextEmbeddings> contexts;
    // Sum of counts plus one separator between adjacent contexts.
    int flattened_length() const;
    // Appends [E1] SEP [E2] ... [Em] to a decoder input; SEP is the decoder's
    // embedding-table row for the separator id, resolved at lookup time.
    void append_to(MixedSequence<float>& seq) const;
};

MultiContextInput assemble_multi(std::vector<ContextEmbeddings> contexts);

}  // namespace cerag
