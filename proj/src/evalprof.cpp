#include "cerag/evalprof.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <unordered_map>

#include "json.hpp"

namespace cerag {

namespace {

std::vector<std::string> normalized_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty() && cur != "a" && cur != "an" && cur != "the") words.push_back(cur);
        cur.clear();
    };
    for (char c : text) {
        const auto u = static_cast<unsigned char>(c);
        if (std::isspace(u)) {
            flush();
        } else if (!std::ispunct(u)) {
            cur.push_back(static_cast<char>(std::tolower(u)));
        }
    }
    flush();
    return words;
}

std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::vector<std::size_t> row(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        std::size_t diag = 0;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t up = row[j];
            row[j] = a[i - 1] == b[j - 1] ? diag + 1 : std::max(row[j], row[j - 1]);
            diag = up;
        }
    }
    return row[b.size()];
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::string normalize_answer(const std::string& text) {
    std::string out;
    for (const std::string& w : normalized_words(text)) {
        if (!out.empty()) out.push_back(' ');
        out += w;
    }
    return out;
}

double exact_match(const std::string& prediction, const std::string& gold) {
    return normalize_answer(prediction) == normalize_answer(gold) ? 1.0 : 0.0;
}

double match_metric(const std::string& prediction, const std::string& gold) {
    const std::string p = normalize_answer(prediction);
    const std::string g = normalize_answer(gold);
    return p.find(g) != std::string::npos ? 1.0 : 0.0;
}

double exact_match(const std::string& prediction, const std::vector<std::string>& answers) {
    if (answers.empty()) throw ConfigError("exact_match needs at least one answer");
    double best = 0.0;
    for (const std::string& a : answers) best = std::max(best, exact_match(prediction, a));
    return best;
}

double match_metric(const std::string& prediction, const std::vector<std::string>& answers) {
    if (answers.empty()) throw ConfigError("match_metric needs at least one answer");
    double best = 0.0;
    for (const std::string& a : answers) best = std::max(best, match_metric(prediction, a));
    return best;
}

double rouge_l(const std::string& prediction, const std::string& gold) {
    const std::vector<std::string> p = normalized_words(prediction);
    const std::vector<std::string> g = normalized_words(gold);
    if (p.empty() || g.empty()) return 0.0;
    const auto lcs = static_cast<double>(lcs_length(p, g));
    if (lcs == 0.0) return 0.0;
    const double prec = lcs / static_cast<double>(p.size());
    const double rec = lcs / static_cast<double>(g.size());
    return 2.0 * prec * rec / (prec + rec);
}

EvalSummary evaluate(const std::vector<GenerationRecord>& generations,
                     const std::vector<QAExample>& examples) {
    std::unordered_map<std::string, const QAExample*> by_id;
    for (const QAExample& ex : examples) by_id[ex.id] = &ex;
    EvalSummary s;
    for (const GenerationRecord& gen : generations) {
        auto it = by_id.find(gen.id);
        if (it == by_id.end()) throw ConfigError("no gold answers for generation id " + gen.id);
        double em = 0.0, match = 0.0, rouge = 0.0;
        for (const std::string& gold : it->second->answers) {
            em = std::max(em, exact_match(gen.answer, gold));
            match = std::max(match, match_metric(gen.answer, gold));
            rouge = std::max(rouge, rouge_l(gen.answer, gold));
        }
        s.em += em;
        s.match += match;
        s.rouge += rouge;
        ++s.count;
    }
    if (s.count > 0) {
        s.em /= s.count;
        s.match /= s.count;
        s.rouge /= s.count;
    }
    return s;
}

void write_eval_json(const std::filesystem::path& path, const EvalSummary& summary) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    nlohmann::json j{{"count", summary.count},
                     {"em", summary.em},
                     {"match", summary.match},
                     {"rouge_l", summary.rouge}};
    out << j.dump(2) << '\n';
    if (!out) throw IoError("failed writing " + path.string());
}

std::int64_t decode_step_flops(int context_len, const DecoderConfig& cfg) {
    if (context_len < 1) throw ConfigError("context_len must be positive");
    const std::int64_t d = cfg.d_model, L = cfg.n_layers, V = cfg.vocab_size;
    return L * (24 * d * d + 4 * d * context_len) + 2 * d * V;
}

std::int64_t prefill_flops(int prompt_len, const DecoderConfig& cfg) {
    if (prompt_len < 1) throw ConfigError("prompt_len must be positive");
    const std::int64_t S = prompt_len, d = cfg.d_model, L = cfg.n_layers, V = cfg.vocab_size;
    return S * L * 24 * d * d + L * 4 * d * (S * (S + 1) / 2) + 2 * d * V * S;
}

ProfileRow profile_prompt(const std::string& label, int rate, const MixedSequence<float>& prompt,
                          const ParameterStore<float>& params, const DecoderConfig& cfg,
                          const ProfileConfig& pcfg) {
    if (pcfg.reps < 2) throw ConfigError("profile needs at least 2 repetitions");
    if (pcfg.decode_tokens < 1) throw ConfigError("decode_tokens must be positive");
    const int items = static_cast<int>(prompt.size());
    if (items + pcfg.decode_tokens > cfg.max_seq_len) {
        throw ConfigError("profile sequence exceeds max_seq_len");
    }
    using Clock = std::chrono::steady_clock;
    DecoderEngine engine(params, cfg);
    std::vector<double> prefill_times, decode_times;
    for (int rep = 0; rep <= pcfg.reps; ++rep) {
        engine.reset();
        auto t0 = Clock::now();
        RowVec<float> logits = engine.prefill(prompt);
        auto t1 = Clock::now();
        for (int i = 0; i < pcfg.decode_tokens; ++i) {
            int best = 0;
            for (Eigen::Index c = 1; c < logits.size(); ++c) {
                if (logits(c) > logits(best)) best = static_cast<int>(c);
            }
            logits = engine.step(best);
        }
        auto t2 = Clock::now();
        if (rep == 0) continue;  // warm-up
        prefill_times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        decode_times.push_back(std::chrono::duration<double, std::milli>(t2 - t1).count());
    }
    ProfileRow row;
    row.label = label;
    row.rate = rate;
    row.prompt_items = items;
    row.prefill_flops = prefill_flops(items, cfg);
    row.decode_flops_per_token = decode_step_flops(items + 1, cfg);
    row.prefill_ms = median(prefill_times);
    row.decode_ms = median(decode_times);
    return row;
}

ProfileReport profile_run(const std::vector<ProfiledSystem>& systems,
                          const ParameterStore<float>& params, const DecoderConfig& cfg,
                          const ProfileConfig& pcfg) {
    if (pcfg.reps < 2) throw ConfigError("profile needs at least 2 repetitions");
    if (pcfg.decode_tokens < 1) throw ConfigError("decode_tokens must be positive");
    if (systems.empty()) throw ConfigError("no systems to profile");
    using Clock = std::chrono::steady_clock;
    ProfileReport report;
    for (const ProfiledSystem& sys : systems) {
        if (sys.prompts.empty()) throw ConfigError("system " + sys.label + " has no prompts");
        ProfileRow row;
        row.label = sys.label;
        row.rate = sys.rate;
        for (const MixedSequence<float>& p : sys.prompts) {
            const int items = static_cast<int>(p.size());
            if (items + pcfg.decode_tokens > cfg.max_seq_len) {
                throw ConfigError("profile sequence exceeds max_seq_len");
            }
            row.prompt_items += items;
            row.prefill_flops += prefill_flops(items, cfg);
            row.decode_flops_per_token += decode_step_flops(items + 1, cfg);
        }
        DecoderEngine engine(params, cfg);
        std::vector<double> prefill_times, decode_times;
        for (int rep = 0; rep <= pcfg.reps; ++rep) {
            double prefill_total = 0.0, decode_total = 0.0;
            for (const MixedSequence<float>& p : sys.prompts) {
                engine.reset();
                auto t0 = Clock::now();
                RowVec<float> logits = engine.prefill(p);
                auto t1 = Clock::now();
                for (int i = 0; i < pcfg.decode_tokens; ++i) {
                    int best = 0;
                    for (Eigen::Index c = 1; c < logits.size(); ++c) {
                        if (logits(c) > logits(best)) best = static_cast<int>(c);
                    }
                    logits = engine.step(best);
                }
                auto t2 = Clock::now();
                prefill_total += std::chrono::duration<double, std::milli>(t1 - t0).count();
                decode_total += std::chrono::duration<double, std::milli>(t2 - t1).count();
            }
            if (rep == 0) continue;  // warm-up
            prefill_times.push_back(prefill_total);
            decode_times.push_back(decode_total);
        }
        row.prefill_ms = median(prefill_times);
        row.decode_ms = median(decode_times);
        report.rows.push_back(std::move(row));
    }
    finalize_speedups(report);
    return report;
}

void finalize_speedups(ProfileReport& report) {
    if (report.rows.empty()) return;
    const ProfileRow* baseline = &report.rows.front();
    for (const ProfileRow& r : report.rows) {
        if (r.rate == 0) {
            baseline = &r;
            break;
        }
    }
    const double base_total = baseline->prefill_ms + baseline->decode_ms;
    for (ProfileRow& r : report.rows) {
        const double total = r.prefill_ms + r.decode_ms;
        r.speedup_vs_baseline = total > 0.0 ? base_total / total : 1.0;
    }
}

void write_profile_csv(const std::filesystem::path& path, const ProfileReport& report) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "label,rate,prompt_items,prefill_flops,decode_flops_per_token,prefill_ms,decode_ms,"
           "speedup_vs_baseline\n";
    for (const ProfileRow& r : report.rows) {
        out << r.label << ',' << r.rate << ',' << r.prompt_items << ',' << r.prefill_flops << ','
            << r.decode_flops_per_token << ',' << std::fixed << std::setprecision(4) << r.prefill_ms
            << ',' << r.decode_ms << ',' << std::setprecision(3) << r.speedup_vs_baseline << '\n';
        out.unsetf(std::ios::fixed);
    }
    if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace cerag
