#include "cerag/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>

namespace cerag {

void TrainConfig::validate() const {
    if (learning_rate <= 0) throw ConfigError("learning_rate must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (warmup_ratio < 0 || warmup_ratio >= 1) throw ConfigError("warmup_ratio must be in [0, 1)");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (p_autoencode < 0 || p_autoencode > 1) throw ConfigError("p_autoencode must be in [0, 1]");
    if (top_k < 0) throw ConfigError("top_k must be >= 0");
}

int finetune_input_length(const ModelSpec& spec, const FinetuneSample& sample) {
    int items = 1;  // BOS
    for (std::size_t c = 0; c < sample.context_tokens.size(); ++c) {
        if (c) ++items;  // SEP
        const int n = static_cast<int>(sample.context_tokens[c].size());
        items += spec.compression ? embed_count(n, spec.compression->rate) : n;
    }
    items += static_cast<int>(sample.instruction_tokens.size());
    items += static_cast<int>(sample.response_tokens.size());
    return items;
}

PretrainTask sample_task(std::mt19937_64& rng, double p_autoencode) {
    return std::bernoulli_distribution(p_autoencode)(rng) ? PretrainTask::autoencode
                                                          : PretrainTask::continuation;
}

int sample_split_point(std::mt19937_64& rng, int total_tokens) {
    if (total_tokens < 2) throw ConfigError("continuation split needs at least 2 tokens");
    int lo = (total_tokens + 3) / 4;
    int hi = 3 * total_tokens / 4;
    lo = std::max(lo, 1);
    hi = std::min(hi, total_tokens - 1);
    if (hi < lo) hi = lo;
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

AdamW::AdamW(ParameterStore<float>& params, const TrainConfig& cfg)
    : params_(&params), lr_(cfg.learning_rate), weight_decay_(cfg.weight_decay) {}

void AdamW::step(const GradientSet<float>& grads, double lr_scale) {
    ++t_;
    const float lr = static_cast<float>(lr_ * lr_scale);
    const float bc1 = 1.0f - static_cast<float>(std::pow(beta1_, static_cast<double>(t_)));
    const float bc2 = 1.0f - static_cast<float>(std::pow(beta2_, static_cast<double>(t_)));
    const auto b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
    const auto eps = static_cast<float>(eps_), wd = static_cast<float>(weight_decay_);
    for (auto& e : params_->entries()) {
        if (!e.trainable) continue;
        const Mat<float> g = grads.value_or_zero(*params_, e.name);
        Mat<float>& m = m_[e.name];
        Mat<float>& v = v_[e.name];
        if (m.size() == 0) {
            m = Mat<float>::Zero(g.rows(), g.cols());
            v = Mat<float>::Zero(g.rows(), g.cols());
        }
        m = b1 * m + (1.0f - b1) * g;
        v = b2 * v + (1.0f - b2) * g.cwiseProduct(g);
        if (e.value.rows() > 1) e.value *= (1.0f - lr * wd);
        e.value.array() -=
            lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
    }
}

double lr_schedule(int step_index, int total_steps, double warmup_ratio) {
    if (total_steps <= 0) return 1.0;
    const int warmup = static_cast<int>(std::ceil(warmup_ratio * total_steps));
    if (step_index < warmup) return static_cast<double>(step_index + 1) / warmup;
    if (total_steps == warmup) return 1.0;
    return static_cast<double>(total_steps - step_index) / (total_steps - warmup);
}

namespace {

// Guard that applies freeze flags for the duration of a run and restores the
// previous trainable flags afterwards.
class FreezeGuard {
  public:
    FreezeGuard(ParameterStore<float>& params, const TrainConfig& cfg) : params_(&params) {
        for (const auto& e : params.entries()) saved_.push_back(e.trainable);
        if (cfg.freeze_decoder) params.set_trainable_prefix("dec.", false);
        if (cfg.freeze_compressor) {
            params.set_trainable_prefix("comp.", false);
            params.set_trainable_prefix("enc.", false);
            params.set_trainable_prefix("proj.", false);
        }
    }
    ~FreezeGuard() {
        for (std::size_t i = 0; i < saved_.size(); ++i) {
            params_->entries()[i].trainable = saved_[i];
        }
    }

  private:
    ParameterStore<float>* params_;
    std::vector<bool> saved_;
};

// Shared epoch/batch/optimizer loop. process(sample_index, rng, grads) runs
// one sample's forward+backward and reports (task label, loss).
template <typename ProcessFn>
TrainResult run_training(ParameterStore<float>& params, std::size_t n_samples,
                         const TrainConfig& cfg, ProcessFn&& process) {
    cfg.validate();
    if (n_samples == 0) throw ConfigError("no training samples");
    FreezeGuard freeze(params, cfg);
    AdamW opt(params, cfg);
    std::mt19937_64 rng(cfg.seed);
    const int batches_per_epoch =
        static_cast<int>((n_samples + cfg.batch_size - 1) / cfg.batch_size);
    const int total_steps = batches_per_epoch * cfg.epochs;

    TrainResult result;
    GradientSet<float> grads;
    std::vector<std::size_t> order(n_samples);
    std::iota(order.begin(), order.end(), std::size_t{0});
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t at = 0; at < n_samples; at += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(n_samples, at + static_cast<std::size_t>(cfg.batch_size));
            grads.clear();
            for (std::size_t i = at; i < end; ++i) {
                const auto [task, loss] = process(order[i], rng, grads);
                if (!std::isfinite(loss)) {
                    throw std::runtime_error("non-finite loss at step " + std::to_string(step) +
                                             " (task " + task + ")");
                }
                result.curve.push_back({step, task, loss});
            }
            grads.scale(1.0f / static_cast<float>(end - at));
            opt.step(grads, lr_schedule(step, total_steps, cfg.warmup_ratio));
            ++step;
        }
    }
    return result;
}

}  // namespace

TrainResult pretrain_run(const ModelSpec& spec, ParameterStore<float>& params,
                         const std::vector<std::vector<int>>& chunk_tokens,
                         const TrainConfig& cfg) {
    if (!spec.compression) throw ConfigError("pre-training requires a compressor");
    for (const auto& tokens : chunk_tokens) {
        if (tokens.empty()) throw ConfigError("pre-training chunk with no tokens");
    }
    auto process = [&](std::size_t idx, std::mt19937_64& rng, GradientSet<float>& grads) {
        PretrainSample s;
        s.tokens = chunk_tokens[idx];
        s.task = sample_task(rng, cfg.p_autoencode);
        if (s.tokens.size() < 2) s.task = PretrainTask::autoencode;
        if (s.task == PretrainTask::continuation) {
            s.split_point = sample_split_point(rng, static_cast<int>(s.tokens.size()));
        }
        const float loss = pretrain_loss<float>(spec, params, s, &grads);
        return std::pair<std::string, double>(
            s.task == PretrainTask::autoencode ? "autoencode" : "continuation", loss);
    };
    return run_training(params, chunk_tokens.size(), cfg, process);
}

TrainResult finetune_run(const ModelSpec& spec, ParameterStore<float>& params,
                         const std::vector<FinetuneSample>& samples, const TrainConfig& cfg) {
    std::vector<const FinetuneSample*> usable;
    int skipped = 0;
    for (const FinetuneSample& s : samples) {
        if (finetune_input_length(spec, s) > spec.decoder.max_seq_len) {
            std::cerr << "warning: fine-tune sample " << s.id << " overflows max_seq_len, skipped\n";
            ++skipped;
        } else {
            usable.push_back(&s);
        }
    }
    auto process = [&](std::size_t idx, std::mt19937_64&, GradientSet<float>& grads) {
        const float loss = finetune_loss<float>(spec, params, *usable[idx], &grads);
        return std::pair<std::string, double>("finetune", loss);
    };
    TrainResult result = run_training(params, usable.size(), cfg, process);
    result.skipped = skipped;
    return result;
}

void write_loss_curve_csv(const std::filesystem::path& path,
                          const std::vector<LossCurvePoint>& curve) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    f << "step,task,loss\n";
    f << std::setprecision(8);
    for (const LossCurvePoint& p : curve) {
        f << p.step << ',' << p.task << ',' << p.loss << '\n';
    }
}

}  // namespace cerag
