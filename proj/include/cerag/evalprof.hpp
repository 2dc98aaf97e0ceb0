#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cerag/inference.hpp"

namespace cerag {

// Lowercase, strip punctuation, drop the articles a/an/the, collapse runs of
// whitespace.
std::string normalize_answer(const std::string& text);

// 1.0 when the normalized strings are equal, else 0.0. The answers overload
// takes the best score over gold answers.
double exact_match(const std::string& prediction, const std::string& gold);
double exact_match(const std::string& prediction, const std::vector<std::string>& answers);

// 1.0 when the normalized gold appears as a substring of the normalized
// prediction, else 0.0.
double match_metric(const std::string& prediction, const std::string& gold);
double match_metric(const std::string& prediction, const std::vector<std::string>& answers);

// LCS-based F1 over normalized word sequences; 0.0 when either side has no
// words.
double rouge_l(const std::string& prediction, const std::string& gold);

struct EvalSummary {
    int count = 0;
    double em = 0.0;
    double match = 0.0;
    double rouge = 0.0;
};

// Per-example scores take the max over gold answers; the summary averages
// over examples.
EvalSummary evaluate(const std::vector<GenerationRecord>& generations,
                     const std::vector<QAExample>& examples);

void write_eval_json(const std::filesystem::path& path, const EvalSummary& summary);

// Analytic decoder FLOP counts (multiply and add counted separately).
// Per position: L * (24 d^2 + 4 d s) + 2 d V, where s is the number of
// attended positions.
std::int64_t decode_step_flops(int context_len, const DecoderConfig& cfg);
std::int64_t prefill_flops(int prompt_len, const DecoderConfig& cfg);

struct ProfileConfig {
    int reps = 3;        // timed repetitions after one discarded warm-up
    int decode_tokens = 32;
};

struct ProfileRow {
    std::string label;
    int rate = 0;          // 0 for the uncompressed baseline
    int prompt_items = 0;
    std::int64_t prefill_flops = 0;
    std::int64_t decode_flops_per_token = 0;
    double prefill_ms = 0.0;
    double decode_ms = 0.0;
    double speedup_vs_baseline = 1.0;
};

struct ProfileReport {
    std::vector<ProfileRow> rows;
};

// Times one fixed prompt shape: median over reps of prefill and of a fixed
// decode length, first repetition discarded. speedup is baseline end-to-end
// time over this row's, with the baseline row pinned at 1.
ProfileRow profile_prompt(const std::string& label, int rate, const MixedSequence<float>& prompt,
                          const ParameterStore<float>& params, const DecoderConfig& cfg,
                          const ProfileConfig& pcfg);

// One system to profile: a label, its compression rate (0 = raw tokens), and
// the prompts it would feed the decoder for a shared question batch.
struct ProfiledSystem {
    std::string label;
    int rate = 0;
    std::vector<MixedSequence<float>> prompts;
};

// Batch profiling over a fixed question set. Every repetition runs each
// system's whole batch (prefill + fixed-length decode per prompt); the first
// repetition is discarded as warm-up and medians of the per-rep totals are
// reported. FLOP columns are summed over the batch.
ProfileReport profile_run(const std::vector<ProfiledSystem>& systems,
                          const ParameterStore<float>& params, const DecoderConfig& cfg,
                          const ProfileConfig& pcfg);

void finalize_speedups(ProfileReport& report);

void write_profile_csv(const std::filesystem::path& path, const ProfileReport& report);

}  // namespace cerag
