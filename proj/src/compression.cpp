#include "cerag/compression.hpp"

namespace cerag {

int embed_count(int n, int rate) {
    if (n < 1) throw ConfigError("token count must be >= 1");
    if (rate < 1) throw ConfigError("compression rate must be >= 1");
    return std::max(1, n / rate);
}

namespace {

template <Var<float> (*Graph)(GraphParams<float>&, const ModelSpec&, const std::vector<int>&)>
ContextEmbeddings run_compressor(const std::vector<int>& tokens, const std::string& chunk_id,
                                 const ModelSpec& spec, const ParameterStore<float>& params) {
    Tape<float> tape;
    GraphParams<float> P(tape, params, nullptr);
    ContextEmbeddings out;
    out.chunk_id = chunk_id;
    out.vectors = Graph(P, spec, tokens).value();
    if (!out.vectors.allFinite()) {
        throw std::runtime_error("compressor produced non-finite embeddings for chunk " + chunk_id);
    }
    return out;
}

Var<float> full_dispatch(GraphParams<float>& P, const ModelSpec& spec,
                         const std::vector<int>& tokens) {
    if (!spec.compression || spec.compression->kind != CompressorKind::full) {
        throw ConfigError("model spec does not define a full compressor");
    }
    return compress_full_graph(P, spec.decoder, tokens, spec.compression->rate);
}

Var<float> light_dispatch(GraphParams<float>& P, const ModelSpec& spec,
                          const std::vector<int>& tokens) {
    if (!spec.compression || spec.compression->kind != CompressorKind::light) {
        throw ConfigError("model spec does not define a light compressor");
    }
    return compress_light_graph(P, spec.encoder, tokens, spec.compression->rate);
}

Var<float> any_dispatch(GraphParams<float>& P, const ModelSpec& spec,
                        const std::vector<int>& tokens) {
    return compress_graph(P, spec, tokens);
}

}  // namespace

ContextEmbeddings compress_full(const std::vector<int>& tokens, const std::string& chunk_id,
                                const ModelSpec& spec, const ParameterStore<float>& params) {
    return run_compressor<full_dispatch>(tokens, chunk_id, spec, params);
}

ContextEmbeddings compress_light(const std::vector<int>& tokens, const std::string& chunk_id,
                                 const ModelSpec& spec, const ParameterStore<float>& params) {
    return run_compressor<light_dispatch>(tokens, chunk_id, spec, params);
}

ContextEmbeddings compress_tokens(const std::vector<int>& tokens, const std::string& chunk_id,
                                  const ModelSpec& spec, const ParameterStore<float>& params) {
    return run_compressor<any_dispatch>(tokens, chunk_id, spec, params);
}

int MultiContextInput::flattened_length() const {
    int len = static_cast<int>(contexts.size()) - 1;
    for (const ContextEmbeddings& c : contexts) len += c.count();
    return len;
}

void MultiContextInput::append_to(MixedSequence<float>& seq) const {
    for (std::size_t i = 0; i < contexts.size(); ++i) {
        if (i) seq.push_token(tok::kSep);
        const Mat<float>& v = contexts[i].vectors;
        for (Eigen::Index r = 0; r < v.rows(); ++r) seq.push_vec(v.row(r));
    }
}

MultiContextInput assemble_multi(std::vector<ContextEmbeddings> contexts) {
    if (contexts.empty()) throw ConfigError("assemble_multi needs at least one context");
    const Eigen::Index d = contexts.front().vectors.cols();
    for (const ContextEmbeddings& c : contexts) {
        if (c.vectors.cols() != d) {
            throw ConfigError("context embedding dimensions differ: " + std::to_string(d) + " vs " +
                              std::to_string(c.vectors.cols()));
        }
        if (c.vectors.rows() < 1) throw ConfigError("context with zero embeddings");
    }
    return {std::move(contexts)};
}

}  // namespace cerag
