#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cerag/compression.hpp"
#include "cerag/index_store.hpp"
#include "cerag/retrieval.hpp"
#include "cerag/tokenizer.hpp"
#include "cerag/training.hpp"

namespace cerag {

struct PromptTemplate {
    std::string prefix = "Question: ";
    std::string suffix = "\nAnswer:";
    int max_new_tokens = 64;
    bool stop_on_eos = true;  // false decodes exactly max_new_tokens (profiling)
};

// Instruction token sequence: tokenize(prefix + question + suffix).
std::vector<int> instruction_tokens(const std::string& question, const PromptTemplate& tpl,
                                    const Tokenizer& tokenizer);

// BOS .. flattened context embeddings with SEP .. instruction tokens.
// contexts may be null (closed book). Prompt item count is
// 1 + sum(k_i) + (m - 1) + |instruction|.
MixedSequence<float> build_prompt(const MultiContextInput* contexts, const std::string& question,
                                  const PromptTemplate& tpl, const Tokenizer& tokenizer);

// Same shape but with raw context token runs instead of embeddings.
MixedSequence<float> build_prompt_raw(const std::vector<std::vector<int>>& context_tokens,
                                      const std::string& question, const PromptTemplate& tpl,
                                      const Tokenizer& tokenizer);

struct Answer {
    std::string text;
    std::vector<int> token_ids;
    int new_tokens = 0;
    double prefill_ms = 0.0;
    double decode_ms = 0.0;
};

// Incremental decoder with per-layer key/value caches. prefill() consumes the
// prompt and returns the last position's logits; step() appends one token.
// Matches the tape forward pass's arithmetic layer by layer.
class DecoderEngine {
  public:
    DecoderEngine(const ParameterStore<float>& params, const DecoderConfig& cfg,
                  const std::string& prefix = kDecoderPrefix);

    void reset() { len_ = 0; }
    int length() const { return len_; }
    RowVec<float> prefill(const MixedSequence<float>& prompt);
    RowVec<float> step(int token);

  private:
    RowVec<float> feed(Mat<float> x);

    struct LayerRefs {
        const Mat<float>*ln1_g, *ln1_b, *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
        const Mat<float>*ln2_g, *ln2_b, *w1, *b1, *w2, *b2;
    };
    DecoderConfig cfg_;
    const Mat<float>*wte_, *wpe_, *lnf_g_, *lnf_b_, *head_w_, *head_b_;
    std::vector<LayerRefs> layers_;
    std::vector<Mat<float>> k_cache_, v_cache_;  // per layer, max_seq_len x d
    int len_ = 0;
};

// Greedy decoding: argmax at every step, first (lowest) id on exact ties;
// stops at EOS (unless disabled) or max_new_tokens. Throws ConfigError when
// prompt length + max_new_tokens exceeds the decoder's max_seq_len.
Answer generate(const MixedSequence<float>& prompt, const ParameterStore<float>& params,
                const DecoderConfig& cfg, const PromptTemplate& tpl, const Tokenizer& tokenizer);

// Greedy reconstruction from a chunk's own compressed embeddings: decode
// exactly n_steps tokens from E .. BOS.
std::vector<int> greedy_reconstruct(const ModelSpec& spec, const ParameterStore<float>& params,
                                    const std::vector<int>& chunk_tokens, int n_steps);

class ChunkMap {
  public:
    explicit ChunkMap(const std::vector<Chunk>& chunks);
    const Chunk& at(const std::string& id) const;

  private:
    std::unordered_map<std::string, const Chunk*> map_;
};

// Everything rag_answer needs, wired once per run. index may be null (live
// compression); a null spec->compression means raw-token contexts.
struct RagPipeline {
    const Tokenizer* tokenizer = nullptr;
    const BM25Index* bm25 = nullptr;
    const ChunkMap* chunks = nullptr;
    const ModelSpec* spec = nullptr;
    const ParameterStore<float>* params = nullptr;
    const CompressedIndex* index = nullptr;
    PromptTemplate tpl;
};

struct RagResult {
    Answer answer;
    std::vector<std::string> retrieved;  // chunk ids in rank order
};

// retrieve top_k -> fetch embeddings (index lookup or live compression) ->
// build_prompt -> generate. top_k = 0 is closed book; empty retrieval falls
// back to closed book with a warning.
RagResult rag_answer(const std::string& question, const RagPipeline& pipe, int top_k);

// Offline retrieval at dataset-build time: one fixed top-k context set per
// question. Response tokens are " " + first gold answer.
std::vector<FinetuneSample> build_finetune_samples(const std::vector<QAExample>& examples,
                                                   const BM25Index& bm25, const ChunkMap& chunks,
                                                   const Tokenizer& tokenizer,
                                                   const PromptTemplate& tpl, int top_k);

struct GenerationRecord {
    std::string id;
    std::string question;
    std::string answer;
    std::vector<std::string> retrieved;
    double prefill_ms = 0.0;
    double decode_ms = 0.0;
    int new_tokens = 0;
};

void write_generations_jsonl(const std::filesystem::path& path,
                             const std::vector<GenerationRecord>& records);
std::vector<GenerationRecord> read_generations_jsonl(const std::filesystem::path& path);

}  // namespace cerag
