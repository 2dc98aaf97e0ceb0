#pragma once

#include <random>
#include <string>
#include <vector>

#include "cerag/compression.hpp"

namespace cerag {

enum class PretrainTask { autoencode, continuation };

struct PretrainSample {
    PretrainTask task = PretrainTask::autoencode;
    std::vector<int> tokens;  // full chunk token sequence
    int split_point = -1;     // continuation only: prefix length, in [1, |tokens|)
};

struct FinetuneSample {
    std::string id;
    std::vector<int> instruction_tokens;           // template-expanded question
    std::vector<std::string> context_ids;          // retrieved chunk ids, rank order
    std::vector<std::vector<int>> context_tokens;  // token sequences of those chunks
    std::vector<int> response_tokens;              // non-empty
};

struct TrainConfig {
    double learning_rate = 1e-4;
    int batch_size = 16;
    int epochs = 1;
    double warmup_ratio = 0.05;  // fraction of total steps spent in linear warmup
    double weight_decay = 0.1;
    std::uint64_t seed = 0;
    bool freeze_decoder = false;
    bool freeze_compressor = false;
    double p_autoencode = 0.5;  // pretrain task mix
    int top_k = 5;              // contexts per fine-tune sample
    void validate() const;
};

// Mean negative log-likelihood over masked positions; logits row i scores
// targets[i]. Alias of the tape op so loss builders and tests share one
// implementation.
template <typename S>
Var<S> next_token_loss(Var<S> logits, std::vector<int> targets, std::vector<std::uint8_t> mask) {
    return masked_cross_entropy(std::move(logits), std::move(targets), std::move(mask));
}

// Reconstruction objective: compress the whole sequence X, then decode
// E .. BOS x1..x_{T-1} supervising every position against x1..xT.
template <typename S>
Var<S> autoencode_loss_graph(GraphParams<S>& P, const ModelSpec& spec,
                             const std::vector<int>& tokens) {
    if (tokens.empty()) throw ConfigError("autoencode sample has no tokens");
    Var<S> embeds = compress_graph(P, spec, tokens);
    const int k = static_cast<int>(embeds.rows());
    const int t = static_cast<int>(tokens.size());
    std::vector<int> decoder_tokens;
    decoder_tokens.reserve(static_cast<std::size_t>(t));
    decoder_tokens.push_back(tok::kBos);
    decoder_tokens.insert(decoder_tokens.end(), tokens.begin(), tokens.end() - 1);
    GraphInput<S> segments{{{}, embeds}, {decoder_tokens, std::nullopt}};
    Var<S> logits = lm_head(
        P, kDecoderPrefix,
        transformer_graph(P, kDecoderPrefix, TransformerDims(spec.decoder), segments, true));
    std::vector<int> targets(static_cast<std::size_t>(k + t), 0);
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(k + t), 0);
    for (int i = 0; i < t; ++i) {
        targets[static_cast<std::size_t>(k + i)] = tokens[static_cast<std::size_t>(i)];
        mask[static_cast<std::size_t>(k + i)] = 1;
    }
    return next_token_loss(std::move(logits), std::move(targets), std::move(mask));
}

// Continuation objective: compress the prefix X[0..split), then decode
// E_A .. BOS x_{j+1}..x_{T-1} supervising exactly the suffix tokens.
template <typename S>
Var<S> continuation_loss_graph(GraphParams<S>& P, const ModelSpec& spec,
                               const std::vector<int>& tokens, int split_point) {
    const int t = static_cast<int>(tokens.size());
    if (split_point < 1 || split_point >= t) {
        throw ConfigError("split point " + std::to_string(split_point) +
                          " outside [1, " + std::to_string(t) + ")");
    }
    const std::vector<int> prefix(tokens.begin(), tokens.begin() + split_point);
    const std::vector<int> suffix(tokens.begin() + split_point, tokens.end());
    Var<S> embeds = compress_graph(P, spec, prefix);
    const int k = static_cast<int>(embeds.rows());
    const int s = static_cast<int>(suffix.size());
    std::vector<int> decoder_tokens;
    decoder_tokens.reserve(static_cast<std::size_t>(s));
    decoder_tokens.push_back(tok::kBos);
    decoder_tokens.insert(decoder_tokens.end(), suffix.begin(), suffix.end() - 1);
    GraphInput<S> segments{{{}, embeds}, {decoder_tokens, std::nullopt}};
    Var<S> logits = lm_head(
        P, kDecoderPrefix,
        transformer_graph(P, kDecoderPrefix, TransformerDims(spec.decoder), segments, true));
    std::vector<int> targets(static_cast<std::size_t>(k + s), 0);
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(k + s), 0);
    for (int i = 0; i < s; ++i) {
        targets[static_cast<std::size_t>(k + i)] = suffix[static_cast<std::size_t>(i)];
        mask[static_cast<std::size_t>(k + i)] = 1;
    }
    return next_token_loss(std::move(logits), std::move(targets), std::move(mask));
}

template <typename S>
Var<S> pretrain_loss_graph(GraphParams<S>& P, const ModelSpec& spec, const PretrainSample& sample) {
    if (sample.task == PretrainTask::autoencode) {
        return autoencode_loss_graph(P, spec, sample.tokens);
    }
    return continuation_loss_graph(P, spec, sample.tokens, sample.split_point);
}

// Number of decoder input items the fine-tune graph will assemble; callers
// skip samples where this exceeds the decoder's max_seq_len.
int finetune_input_length(const ModelSpec& spec, const FinetuneSample& sample);

// Instruction objective: BOS .. contexts (compressed embeddings with SEP, or
// raw tokens with SEP when the spec has no compressor) .. instruction ..
// response. Supervision covers the response tokens plus a terminal EOS;
// instruction and context positions contribute nothing.
template <typename S>
Var<S> finetune_loss_graph(GraphParams<S>& P, const ModelSpec& spec, const FinetuneSample& sample) {
    if (sample.response_tokens.empty()) throw ConfigError("fine-tune sample has empty response");
    GraphInput<S> segments;
    segments.push_back({{tok::kBos}, std::nullopt});
    int context_items = 0;
    for (std::size_t c = 0; c < sample.context_tokens.size(); ++c) {
        if (c) {
            segments.push_back({{tok::kSep}, std::nullopt});
            ++context_items;
        }
        if (spec.compression) {
            Var<S> embeds = compress_graph(P, spec, sample.context_tokens[c]);
            context_items += static_cast<int>(embeds.rows());
            segments.push_back({{}, embeds});
        } else {
            context_items += static_cast<int>(sample.context_tokens[c].size());
            segments.push_back({sample.context_tokens[c], std::nullopt});
        }
    }
    segments.push_back({sample.instruction_tokens, std::nullopt});
    segments.push_back({sample.response_tokens, std::nullopt});

    const int prefix_len =
        1 + context_items + static_cast<int>(sample.instruction_tokens.size());
    const int r = static_cast<int>(sample.response_tokens.size());
    const int total = prefix_len + r;
    Var<S> logits = lm_head(
        P, kDecoderPrefix,
        transformer_graph(P, kDecoderPrefix, TransformerDims(spec.decoder), segments, true));
    std::vector<int> targets(static_cast<std::size_t>(total), 0);
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(total), 0);
    for (int i = 0; i < r; ++i) {
        targets[static_cast<std::size_t>(prefix_len - 1 + i)] =
            sample.response_tokens[static_cast<std::size_t>(i)];
        mask[static_cast<std::size_t>(prefix_len - 1 + i)] = 1;
    }
    targets[static_cast<std::size_t>(total - 1)] = tok::kEos;
    mask[static_cast<std::size_t>(total - 1)] = 1;
    return next_token_loss(std::move(logits), std::move(targets), std::move(mask));
}

// Scalar wrappers: evaluate a loss and, when grads is non-null, run backward
// and flush parameter gradients into it.
template <typename S>
S pretrain_loss(const ModelSpec& spec, const ParameterStore<S>& params,
                const PretrainSample& sample, GradientSet<S>* grads = nullptr) {
    Tape<S> tape;
    GraphParams<S> P(tape, params, grads);
    Var<S> loss = pretrain_loss_graph(P, spec, sample);
    if (grads) tape.backward(loss.id);
    return loss.value()(0, 0);
}

template <typename S>
S finetune_loss(const ModelSpec& spec, const ParameterStore<S>& params,
                const FinetuneSample& sample, GradientSet<S>* grads = nullptr) {
    Tape<S> tape;
    GraphParams<S> P(tape, params, grads);
    Var<S> loss = finetune_loss_graph(P, spec, sample);
    if (grads) tape.backward(loss.id);
    return loss.value()(0, 0);
}

PretrainTask sample_task(std::mt19937_64& rng, double p_autoencode);

// Split point for the continuation task: uniform in
// [ceil(T/4), floor(3T/4)], clamped into [1, T-1]. Requires T >= 2.
int sample_split_point(std::mt19937_64& rng, int total_tokens);

// Adam with decoupled weight decay over the trainable tensors. Decay applies
// to matrices (row count > 1) only; biases and norm parameters are exempt.
class AdamW {
  public:
    AdamW(ParameterStore<float>& params, const TrainConfig& cfg);
    // lr_scale multiplies the base learning rate (warmup/decay schedule).
    void step(const GradientSet<float>& grads, double lr_scale);

  private:
    ParameterStore<float>* params_;
    double lr_, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, weight_decay_;
    std::int64_t t_ = 0;
    std::unordered_map<std::string, Mat<float>> m_, v_;
};

// Linear warmup to the base rate, then linear decay toward zero.
// step_index counts from 0; total_steps and the warmup fraction fix the
// breakpoint.
double lr_schedule(int step_index, int total_steps, double warmup_ratio);

struct LossCurvePoint {
    int step;          // optimizer step index, from 0
    std::string task;  // "autoencode", "continuation" or "finetune"
    double loss;       // this sample's loss
};

struct TrainResult {
    std::vector<LossCurvePoint> curve;
    int skipped = 0;  // fine-tune samples dropped for prompt overflow
};

// Pre-training over chunk token sequences with the Bernoulli task mix.
// Deterministic for a fixed config; throws on non-finite loss. Trainable
// flags are restored after the run; frozen groups are bitwise untouched.
TrainResult pretrain_run(const ModelSpec& spec, ParameterStore<float>& params,
                         const std::vector<std::vector<int>>& chunk_tokens,
                         const TrainConfig& cfg);

TrainResult finetune_run(const ModelSpec& spec, ParameterStore<float>& params,
                         const std::vector<FinetuneSample>& samples, const TrainConfig& cfg);

void write_loss_curve_csv(const std::filesystem::path& path, const std::vector<LossCurvePoint>& curve);

}  // namespace cerag
