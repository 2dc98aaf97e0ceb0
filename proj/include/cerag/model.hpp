#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "cerag/tape.hpp"

namespace cerag {

struct DecoderConfig {
    int n_layers = 4;
    int d_model = 64;
    int n_heads = 4;
    int d_ff = 256;  // 4 * d_model by default
    int vocab_size = 4096;
    int max_seq_len = 1024;
    void validate() const;
};

struct EncoderConfig {
    int n_layers = 2;
    int d_model = 32;  // the compressor-side hidden size b
    int n_heads = 4;
    int d_ff = 128;
    int vocab_size = 4096;
    int max_seq_len = 1024;
    void validate() const;
};

enum class CompressorKind : std::uint8_t { full = 0, light = 1 };

struct CompressionConfig {
    int rate = 4;
    CompressorKind kind = CompressorKind::full;
};

// Everything a checkpoint carries. kind=full uses a second transformer with
// the decoder's architecture (parameters under "comp.") as compressor;
// kind=light uses the bidirectional encoder ("enc.") plus the block
// projection ("proj."). compression == nullopt is a plain decoder system
// that consumes raw context tokens.
struct ModelSpec {
    DecoderConfig decoder;
    std::optional<CompressionConfig> compression = CompressionConfig{};
    EncoderConfig encoder;
    void validate() const;
};

inline const char* kDecoderPrefix = "dec";
inline const char* kCompressorPrefix = "comp";
inline const char* kEncoderPrefix = "enc";
inline const char* kProjectionPrefix = "proj";

// Named tensors with trainable flags; creation order is the serialization
// order, so identical construction sequences give identical checkpoints.
template <typename S>
class ParameterStore {
  public:
    struct Entry {
        std::string name;
        Mat<S> value;
        bool trainable = true;
    };

    Mat<S>& add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
        if (index_.contains(name)) throw ConfigError("duplicate tensor name " + name);
        index_.emplace(name, entries_.size());
        entries_.push_back({name, Mat<S>::Zero(rows, cols), true});
        return entries_.back().value;
    }

    bool has(const std::string& name) const { return index_.contains(name); }

    Mat<S>& at(const std::string& name) {
        return entries_[checked_index(name)].value;
    }
    const Mat<S>& at(const std::string& name) const {
        return entries_[checked_index(name)].value;
    }
    bool trainable(const std::string& name) const {
        return entries_[checked_index(name)].trainable;
    }

    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }

    void set_trainable_prefix(const std::string& prefix, bool flag) {
        for (Entry& e : entries_) {
            if (e.name.starts_with(prefix)) e.trainable = flag;
        }
    }

    std::int64_t param_count(const std::string& prefix = "") const {
        std::int64_t n = 0;
        for (const Entry& e : entries_) {
            if (e.name.starts_with(prefix)) n += e.value.size();
        }
        return n;
    }

    template <typename T>
    ParameterStore<T> cast() const {
        ParameterStore<T> out;
        for (const Entry& e : entries_) {
            out.add(e.name, e.value.rows(), e.value.cols()) = e.value.template cast<T>();
            out.entries().back().trainable = e.trainable;
        }
        return out;
    }

  private:
    std::size_t checked_index(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown tensor name " + name);
        return it->second;
    }

    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Per-tensor gradient sinks for one accumulation window.
template <typename S>
class GradientSet {
  public:
    Mat<S>* sink(const ParameterStore<S>& store, const std::string& name) {
        if (!store.trainable(name)) return nullptr;
        return &grads_[name];
    }
    // Gradient of a tensor, zero if never accumulated.
    Mat<S> value_or_zero(const ParameterStore<S>& store, const std::string& name) const {
        auto it = grads_.find(name);
        if (it != grads_.end() && it->second.size() != 0) return it->second;
        const Mat<S>& v = store.at(name);
        return Mat<S>::Zero(v.rows(), v.cols());
    }
    void clear() { grads_.clear(); }
    void scale(S factor) {
        for (auto& [name, g] : grads_) g *= factor;
    }
    const std::unordered_map<std::string, Mat<S>>& all() const { return grads_; }

  private:
    std::unordered_map<std::string, Mat<S>> grads_;
};

// Binds (store, gradient sinks) to one tape; each tensor becomes at most one
// tape node, so reuses accumulate into a single gradient. A null gradient set
// makes every parameter a constant (inference mode).
template <typename S>
class GraphParams {
  public:
    GraphParams(Tape<S>& tape, const ParameterStore<S>& store, GradientSet<S>* grads)
        : tape_(&tape), store_(&store), grads_(grads) {}

    Var<S> operator()(const std::string& name) {
        auto it = cache_.find(name);
        if (it != cache_.end()) return it->second;
        Mat<S>* sink = grads_ ? grads_->sink(*store_, name) : nullptr;
        Var<S> v = param(*tape_, store_->at(name), sink);
        cache_.emplace(name, v);
        return v;
    }

    Tape<S>& tape() { return *tape_; }
    const ParameterStore<S>& store() const { return *store_; }

  private:
    Tape<S>* tape_;
    const ParameterStore<S>* store_;
    GradientSet<S>* grads_;
    std::unordered_map<std::string, Var<S>> cache_;
};

// One segment of a decoder input: either a run of token ids or rows already
// on the tape (injected embeddings).
template <typename S>
struct GraphSegment {
    std::vector<int> tokens;
    std::optional<Var<S>> rows;
};
template <typename S>
using GraphInput = std::vector<GraphSegment<S>>;

struct TransformerDims {
    int n_layers, d_model, n_heads, d_ff, vocab_size, max_seq_len;
    TransformerDims(const DecoderConfig& c)
        : n_layers(c.n_layers), d_model(c.d_model), n_heads(c.n_heads), d_ff(c.d_ff),
          vocab_size(c.vocab_size), max_seq_len(c.max_seq_len) {}
    TransformerDims(const EncoderConfig& c)
        : n_layers(c.n_layers), d_model(c.d_model), n_heads(c.n_heads), d_ff(c.d_ff),
          vocab_size(c.vocab_size), max_seq_len(c.max_seq_len) {}
};

// Pre-norm transformer: per block x += attn(ln1(x)) then x += mlp(ln2(x)),
// with a final layer norm. Token segments go through the embedding table;
// injected rows enter verbatim. Learned absolute positions are added to every
// item. Returns the n x d hidden states.
template <typename S>
Var<S> transformer_graph(GraphParams<S>& P, const std::string& prefix, const TransformerDims& dims,
                         const GraphInput<S>& segments, bool causal) {
    std::vector<Var<S>> parts;
    Eigen::Index n = 0;
    for (const GraphSegment<S>& seg : segments) {
        if (seg.rows) {
            if (seg.rows->cols() != dims.d_model) {
                throw ConfigError("injected vector dimension " + std::to_string(seg.rows->cols()) +
                                  " does not match d_model " + std::to_string(dims.d_model));
            }
            if (seg.rows->rows() == 0) continue;
            parts.push_back(*seg.rows);
            n += seg.rows->rows();
        } else {
            if (seg.tokens.empty()) continue;
            for (int t : seg.tokens) {
                if (t < 0 || t >= dims.vocab_size) {
                    throw ConfigError("token id " + std::to_string(t) + " outside vocab");
                }
            }
            parts.push_back(gather_rows(P(prefix + std::string(".wte")), seg.tokens));
            n += static_cast<Eigen::Index>(seg.tokens.size());
        }
    }
    if (n == 0) throw ConfigError("empty transformer input");
    if (n > dims.max_seq_len) {
        throw ConfigError("input length " + std::to_string(n) + " exceeds max_seq_len " +
                          std::to_string(dims.max_seq_len));
    }
    Var<S> x = parts.size() == 1 ? parts.front() : vconcat(parts);
    std::vector<int> positions(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = static_cast<int>(i);
    x = add(x, gather_rows(P(prefix + std::string(".wpe")), positions));

    for (int l = 0; l < dims.n_layers; ++l) {
        const std::string lp = prefix + ".h" + std::to_string(l);
        Var<S> h = layer_norm(x, P(lp + ".ln1.g"), P(lp + ".ln1.b"));
        Var<S> q = add_bias(matmul(h, P(lp + ".attn.wq")), P(lp + ".attn.bq"));
        Var<S> k = add_bias(matmul(h, P(lp + ".attn.wk")), P(lp + ".attn.bk"));
        Var<S> v = add_bias(matmul(h, P(lp + ".attn.wv")), P(lp + ".attn.bv"));
        Var<S> a = attention(q, k, v, dims.n_heads, causal);
        x = add(x, add_bias(matmul(a, P(lp + ".attn.wo")), P(lp + ".attn.bo")));
        Var<S> m = layer_norm(x, P(lp + ".ln2.g"), P(lp + ".ln2.b"));
        m = gelu(add_bias(matmul(m, P(lp + ".mlp.w1")), P(lp + ".mlp.b1")));
        x = add(x, add_bias(matmul(m, P(lp + ".mlp.w2")), P(lp + ".mlp.b2")));
    }
    return layer_norm(x, P(prefix + std::string(".lnf.g")), P(prefix + std::string(".lnf.b")));
}

template <typename S>
Var<S> lm_head(GraphParams<S>& P, const std::string& prefix, Var<S> hidden) {
    return add_bias(matmul(hidden, P(prefix + std::string(".head.w"))),
                    P(prefix + std::string(".head.b")));
}

// Decoder input surface for the non-graph API: token ids mixed with raw
// d-vectors.
template <typename S>
struct MixedSequence {
    struct Item {
        int token = -1;
        RowVec<S> vec;
        bool is_token() const { return vec.size() == 0; }
    };
    std::vector<Item> items;

    void push_token(int t) { items.push_back({t, {}}); }
    void push_vec(RowVec<S> v) { items.push_back({-1, std::move(v)}); }
    std::size_t size() const { return items.size(); }
};

template <typename S>
GraphInput<S> to_graph_input(Tape<S>& tape, const MixedSequence<S>& input) {
    GraphInput<S> segments;
    for (const auto& item : input.items) {
        if (item.is_token()) {
            if (!segments.empty() && !segments.back().rows) {
                segments.back().tokens.push_back(item.token);
            } else {
                segments.push_back({{item.token}, std::nullopt});
            }
        } else {
            segments.push_back({{}, constant(tape, Mat<S>(item.vec))});
        }
    }
    return segments;
}

// Causal decoder forward: logits for every input position.
template <typename S>
Mat<S> decoder_forward(const MixedSequence<S>& input, const ParameterStore<S>& params,
                       const DecoderConfig& cfg, const std::string& prefix = kDecoderPrefix) {
    cfg.validate();
    Tape<S> tape;
    GraphParams<S> P(tape, params, nullptr);
    Var<S> hidden = transformer_graph(P, prefix, TransformerDims(cfg), to_graph_input(tape, input),
                                      /*causal=*/true);
    return lm_head(P, prefix, hidden).value();
}

// Bidirectional encoder forward: one d_model-vector per token.
template <typename S>
Mat<S> encoder_forward(const std::vector<int>& tokens, const ParameterStore<S>& params,
                       const EncoderConfig& cfg, const std::string& prefix = kEncoderPrefix) {
    cfg.validate();
    Tape<S> tape;
    GraphParams<S> P(tape, params, nullptr);
    GraphInput<S> segments{{tokens, std::nullopt}};
    return transformer_graph(P, prefix, TransformerDims(cfg), segments, /*causal=*/false).value();
}

// Creates all tensors a ModelSpec needs: weights normal(0, 0.02), biases and
// norm offsets zero, norm gains one. Deterministic for a fixed seed.
ParameterStore<float> init_params(const ModelSpec& spec, std::uint64_t seed);

// Closed-form parameter count of one transformer stack (with_head adds the
// untied output projection).
std::int64_t transformer_param_count(const TransformerDims& dims, bool with_head);

struct Checkpoint {
    ModelSpec spec;
    ParameterStore<float> params;
};

void save_checkpoint(const std::filesystem::path& path, const ModelSpec& spec,
                     const ParameterStore<float>& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// SHA-256 of the checkpoint file; embedded in compressed indexes to tie them
// to the producing model.
std::array<std::uint8_t, 32> sha256_file(const std::filesystem::path& path);

// ModelSpec <-> JSON (used by checkpoints and run configs).
std::string model_spec_to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const std::string& json_text);

}  // namespace cerag
