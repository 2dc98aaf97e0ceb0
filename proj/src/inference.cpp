#include "cerag/inference.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>

#include "json.hpp"

namespace cerag {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

// Row-wise layer norm matching the tape op: population variance, eps 1e-5.
void layer_norm_rows(Mat<float>& x, const Mat<float>& gain, const Mat<float>& bias) {
    constexpr float eps = 1e-5f;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const float mean = x.row(i).mean();
        const float var = (x.row(i).array() - mean).square().mean();
        const float rstd = 1.0f / std::sqrt(var + eps);
        x.row(i) = ((x.row(i).array() - mean) * rstd * gain.row(0).array()) + bias.row(0).array();
    }
}

float gelu_scalar(float v) {
    constexpr float inv_sqrt2 = 0.70710678118654752f;
    return 0.5f * v * (1.0f + std::erf(v * inv_sqrt2));
}

int argmax_lowest(const RowVec<float>& logits) {
    int best = 0;
    for (Eigen::Index i = 1; i < logits.size(); ++i) {
        if (logits(i) > logits(best)) best = static_cast<int>(i);
    }
    return best;
}

}  // namespace

std::vector<int> instruction_tokens(const std::string& question, const PromptTemplate& tpl,
                                    const Tokenizer& tokenizer) {
    return tokenizer.tokenize(tpl.prefix + question + tpl.suffix);
}

MixedSequence<float> build_prompt(const MultiContextInput* contexts, const std::string& question,
                                  const PromptTemplate& tpl, const Tokenizer& tokenizer) {
    MixedSequence<float> prompt;
    prompt.push_token(tok::kBos);
    if (contexts != nullptr) contexts->append_to(prompt);
    for (int t : instruction_tokens(question, tpl, tokenizer)) prompt.push_token(t);
    return prompt;
}

MixedSequence<float> build_prompt_raw(const std::vector<std::vector<int>>& context_tokens,
                                      const std::string& question, const PromptTemplate& tpl,
                                      const Tokenizer& tokenizer) {
    MixedSequence<float> prompt;
    prompt.push_token(tok::kBos);
    for (std::size_t i = 0; i < context_tokens.size(); ++i) {
        if (i > 0) prompt.push_token(tok::kSep);
        for (int t : context_tokens[i]) prompt.push_token(t);
    }
    for (int t : instruction_tokens(question, tpl, tokenizer)) prompt.push_token(t);
    return prompt;
}

DecoderEngine::DecoderEngine(const ParameterStore<float>& params, const DecoderConfig& cfg,
                             const std::string& prefix)
    : cfg_(cfg) {
    cfg_.validate();
    auto get = [&](const std::string& name) -> const Mat<float>* { return &params.at(prefix + name); };
    wte_ = get(".wte");
    wpe_ = get(".wpe");
    lnf_g_ = get(".lnf.g");
    lnf_b_ = get(".lnf.b");
    head_w_ = get(".head.w");
    head_b_ = get(".head.b");
    layers_.reserve(static_cast<std::size_t>(cfg_.n_layers));
    for (int l = 0; l < cfg_.n_layers; ++l) {
        const std::string lp = ".h" + std::to_string(l);
        layers_.push_back({get(lp + ".ln1.g"), get(lp + ".ln1.b"), get(lp + ".attn.wq"),
                           get(lp + ".attn.bq"), get(lp + ".attn.wk"), get(lp + ".attn.bk"),
                           get(lp + ".attn.wv"), get(lp + ".attn.bv"), get(lp + ".attn.wo"),
                           get(lp + ".attn.bo"), get(lp + ".ln2.g"), get(lp + ".ln2.b"),
                           get(lp + ".mlp.w1"), get(lp + ".mlp.b1"), get(lp + ".mlp.w2"),
                           get(lp + ".mlp.b2")});
    }
    k_cache_.assign(static_cast<std::size_t>(cfg_.n_layers),
                    Mat<float>::Zero(cfg_.max_seq_len, cfg_.d_model));
    v_cache_ = k_cache_;
}

RowVec<float> DecoderEngine::prefill(const MixedSequence<float>& prompt) {
    if (prompt.size() == 0) throw ConfigError("empty prompt");
    Mat<float> x(static_cast<Eigen::Index>(prompt.size()), cfg_.d_model);
    Eigen::Index row = 0;
    for (const auto& item : prompt.items) {
        if (item.is_token()) {
            if (item.token < 0 || item.token >= cfg_.vocab_size) {
                throw ConfigError("token id " + std::to_string(item.token) + " outside vocab");
            }
            x.row(row++) = wte_->row(item.token);
        } else {
            if (item.vec.size() != cfg_.d_model) {
                throw ConfigError("injected vector dimension " + std::to_string(item.vec.size()) +
                                  " does not match d_model " + std::to_string(cfg_.d_model));
            }
            x.row(row++) = item.vec;
        }
    }
    return feed(std::move(x));
}

RowVec<float> DecoderEngine::step(int token) {
    if (token < 0 || token >= cfg_.vocab_size) {
        throw ConfigError("token id " + std::to_string(token) + " outside vocab");
    }
    Mat<float> x(1, cfg_.d_model);
    x.row(0) = wte_->row(token);
    return feed(std::move(x));
}

RowVec<float> DecoderEngine::feed(Mat<float> x) {
    const Eigen::Index n = x.rows();
    if (len_ + n > cfg_.max_seq_len) {
        throw ConfigError("input length " + std::to_string(len_ + n) + " exceeds max_seq_len " +
                          std::to_string(cfg_.max_seq_len));
    }
    x += wpe_->middleRows(len_, n);
    const int n_heads = cfg_.n_heads;
    const Eigen::Index dh = cfg_.d_model / n_heads;
    const float inv_scale = 1.0f / std::sqrt(static_cast<float>(dh));
    const Eigen::Index total = len_ + n;

    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const LayerRefs& L = layers_[l];
        Mat<float> h = x;
        layer_norm_rows(h, *L.ln1_g, *L.ln1_b);
        Mat<float> q = (h * *L.wq).rowwise() + L.bq->row(0);
        k_cache_[l].middleRows(len_, n) = (h * *L.wk).rowwise() + L.bk->row(0);
        v_cache_[l].middleRows(len_, n) = (h * *L.wv).rowwise() + L.bv->row(0);

        Mat<float> attn_out(n, cfg_.d_model);
        for (int hd = 0; hd < n_heads; ++hd) {
            auto qh = q.middleCols(hd * dh, dh);
            auto kh = k_cache_[l].topRows(total).middleCols(hd * dh, dh);
            auto vh = v_cache_[l].topRows(total).middleCols(hd * dh, dh);
            Mat<float> scores = qh * kh.transpose() * inv_scale;
            for (Eigen::Index i = 0; i < n; ++i) {
                for (Eigen::Index j = len_ + i + 1; j < total; ++j) {
                    scores(i, j) = -std::numeric_limits<float>::infinity();
                }
            }
            for (Eigen::Index i = 0; i < n; ++i) {
                const float mx = scores.row(i).maxCoeff();
                scores.row(i) = (scores.row(i).array() - mx).exp();
                scores.row(i) /= scores.row(i).sum();
            }
            attn_out.middleCols(hd * dh, dh).noalias() = scores * vh;
        }
        x += ((attn_out * *L.wo).rowwise() + L.bo->row(0));

        Mat<float> m = x;
        layer_norm_rows(m, *L.ln2_g, *L.ln2_b);
        m = ((m * *L.w1).rowwise() + L.b1->row(0)).unaryExpr(&gelu_scalar);
        x += ((m * *L.w2).rowwise() + L.b2->row(0));
    }
    len_ += static_cast<int>(n);

    Mat<float> last = x.bottomRows(1);
    layer_norm_rows(last, *lnf_g_, *lnf_b_);
    return (last * *head_w_).row(0) + head_b_->row(0);
}

Answer generate(const MixedSequence<float>& prompt, const ParameterStore<float>& params,
                const DecoderConfig& cfg, const PromptTemplate& tpl, const Tokenizer& tokenizer) {
    if (tpl.max_new_tokens < 1) throw ConfigError("max_new_tokens must be positive");
    const int budget = static_cast<int>(prompt.size()) + tpl.max_new_tokens;
    if (budget > cfg.max_seq_len) {
        throw ConfigError("prompt length " + std::to_string(prompt.size()) + " + max_new_tokens " +
                          std::to_string(tpl.max_new_tokens) + " exceeds max_seq_len " +
                          std::to_string(cfg.max_seq_len));
    }
    DecoderEngine engine(params, cfg);
    Answer out;
    auto t0 = Clock::now();
    RowVec<float> logits = engine.prefill(prompt);
    out.prefill_ms = ms_since(t0);

    auto t1 = Clock::now();
    while (true) {
        const int next = argmax_lowest(logits);
        if (tpl.stop_on_eos && next == tok::kEos) break;
        out.token_ids.push_back(next);
        if (static_cast<int>(out.token_ids.size()) == tpl.max_new_tokens) break;
        logits = engine.step(next);
    }
    out.decode_ms = ms_since(t1);
    out.new_tokens = static_cast<int>(out.token_ids.size());
    out.text = tokenizer.detokenize(out.token_ids);
    return out;
}

std::vector<int> greedy_reconstruct(const ModelSpec& spec, const ParameterStore<float>& params,
                                    const std::vector<int>& chunk_tokens, int n_steps) {
    if (n_steps < 1) throw ConfigError("n_steps must be positive");
    ContextEmbeddings embeds = compress_tokens(chunk_tokens, "reconstruct", spec, params);
    MixedSequence<float> prompt;
    for (Eigen::Index i = 0; i < embeds.vectors.rows(); ++i) prompt.push_vec(embeds.vectors.row(i));
    prompt.push_token(tok::kBos);
    if (static_cast<int>(prompt.size()) + n_steps > spec.decoder.max_seq_len) {
        throw ConfigError("reconstruction length exceeds max_seq_len");
    }
    DecoderEngine engine(params, spec.decoder);
    RowVec<float> logits = engine.prefill(prompt);
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(n_steps));
    for (int i = 0; i < n_steps; ++i) {
        const int next = argmax_lowest(logits);
        out.push_back(next);
        if (i + 1 < n_steps) logits = engine.step(next);
    }
    return out;
}

ChunkMap::ChunkMap(const std::vector<Chunk>& chunks) {
    for (const Chunk& c : chunks) {
        if (!map_.emplace(c.id, &c).second) throw ConfigError("duplicate chunk id: " + c.id);
    }
}

const Chunk& ChunkMap::at(const std::string& id) const {
    auto it = map_.find(id);
    if (it == map_.end()) throw std::out_of_range("unknown chunk id: " + id);
    return *it->second;
}

RagResult rag_answer(const std::string& question, const RagPipeline& pipe, int top_k) {
    if (pipe.tokenizer == nullptr || pipe.spec == nullptr || pipe.params == nullptr) {
        throw ConfigError("rag pipeline missing tokenizer, spec, or params");
    }
    if (top_k < 0) throw ConfigError("top_k must be non-negative");

    RagResult result;
    if (top_k > 0) {
        if (pipe.bm25 == nullptr) throw ConfigError("top_k > 0 requires a retrieval index");
        if (!words_lower(question).empty()) {
            for (const SearchHit& hit : search(*pipe.bm25, question, top_k)) {
                result.retrieved.push_back(hit.chunk_id);
            }
        }
        if (result.retrieved.empty()) {
            std::cerr << "warning: no chunks retrieved, answering closed book\n";
        }
    }

    MixedSequence<float> prompt;
    if (result.retrieved.empty()) {
        prompt = build_prompt(nullptr, question, pipe.tpl, *pipe.tokenizer);
    } else if (!pipe.spec->compression) {
        if (pipe.chunks == nullptr) throw ConfigError("raw-context pipeline requires chunk texts");
        std::vector<std::vector<int>> context_tokens;
        for (const std::string& id : result.retrieved) {
            context_tokens.push_back(pipe.chunks->at(id).tokens);
        }
        prompt = build_prompt_raw(context_tokens, question, pipe.tpl, *pipe.tokenizer);
    } else {
        std::vector<ContextEmbeddings> contexts;
        for (const std::string& id : result.retrieved) {
            if (pipe.index != nullptr) {
                contexts.push_back(pipe.index->lookup(id));
            } else {
                if (pipe.chunks == nullptr) {
                    throw ConfigError("live compression requires chunk texts");
                }
                contexts.push_back(compress_tokens(pipe.chunks->at(id).tokens, id, *pipe.spec,
                                                   *pipe.params));
            }
        }
        MultiContextInput multi = assemble_multi(std::move(contexts));
        prompt = build_prompt(&multi, question, pipe.tpl, *pipe.tokenizer);
    }
    result.answer = generate(prompt, *pipe.params, pipe.spec->decoder, pipe.tpl, *pipe.tokenizer);
    return result;
}

std::vector<FinetuneSample> build_finetune_samples(const std::vector<QAExample>& examples,
                                                   const BM25Index& bm25, const ChunkMap& chunks,
                                                   const Tokenizer& tokenizer,
                                                   const PromptTemplate& tpl, int top_k) {
    if (top_k < 0) throw ConfigError("top_k must be non-negative");
    std::vector<FinetuneSample> samples;
    samples.reserve(examples.size());
    for (const QAExample& ex : examples) {
        FinetuneSample s;
        s.id = ex.id;
        s.instruction_tokens = instruction_tokens(ex.question, tpl, tokenizer);
        if (ex.answers.empty()) throw ConfigError("example " + ex.id + " has no answers");
        s.response_tokens = tokenizer.tokenize(" " + ex.answers.front());
        if (top_k > 0 && !words_lower(ex.question).empty()) {
            for (const SearchHit& hit : search(bm25, ex.question, top_k)) {
                s.context_ids.push_back(hit.chunk_id);
                s.context_tokens.push_back(chunks.at(hit.chunk_id).tokens);
            }
        }
        samples.push_back(std::move(s));
    }
    return samples;
}

void write_generations_jsonl(const std::filesystem::path& path,
                             const std::vector<GenerationRecord>& records) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    for (const GenerationRecord& r : records) {
        nlohmann::json j{{"id", r.id},
                         {"question", r.question},
                         {"answer", r.answer},
                         {"retrieved", r.retrieved},
                         {"prefill_ms", r.prefill_ms},
                         {"decode_ms", r.decode_ms},
                         {"new_tokens", r.new_tokens}};
        out << j.dump() << '\n';
    }
    if (!out) throw IoError("failed writing " + path.string());
}

std::vector<GenerationRecord> read_generations_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<GenerationRecord> records;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string where = path.string() + ":" + std::to_string(line_no);
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw ParseError(where + ": invalid JSON");
        try {
            GenerationRecord r;
            r.id = j.at("id").get<std::string>();
            r.question = j.at("question").get<std::string>();
            r.answer = j.at("answer").get<std::string>();
            r.retrieved = j.at("retrieved").get<std::vector<std::string>>();
            r.prefill_ms = j.value("prefill_ms", 0.0);
            r.decode_ms = j.value("decode_ms", 0.0);
            r.new_tokens = j.value("new_tokens", 0);
            records.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(where + ": " + e.what());
        }
    }
    return records;
}

}  // namespace cerag
