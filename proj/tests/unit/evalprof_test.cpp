#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "cerag/errors.hpp"
#include "cerag/evalprof.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace cerag;
namespace fs = std::filesystem;

namespace {

DecoderConfig flop_cfg() {
    DecoderConfig cfg;
    cfg.n_layers = 4;
    cfg.d_model = 64;
    cfg.n_heads = 4;
    cfg.d_ff = 256;
    cfg.vocab_size = 512;
    cfg.max_seq_len = 1024;
    return cfg;
}

struct MetricCase {
    std::string pred;
    std::vector<std::string> answers;
    double em, match, rouge;  // rouge against answers.front()
};

}  // namespace

TEST_CASE("normalize_answer applies the SQuAD rules") {
    CHECK(normalize_answer("The Rosalind Bailey.") == "rosalind bailey");
    CHECK(normalize_answer("") == "");
    CHECK(normalize_answer("  An   Apple ") == "apple");
    CHECK(normalize_answer("It's THE answer!") == "its answer");
    CHECK(normalize_answer("A an the") == "");
    CHECK(normalize_answer("Athena") == "athena");  // article rule is whole-word
    CHECK(normalize_answer("x-12, B.C.") == "x12 bc");
}

TEST_CASE("metrics reproduce the hand-computed table") {
    // ROUGE-L worked by hand over normalized words; articles drop before the
    // LCS, so "a b c d" vs "a c d" becomes [b c d] vs [c d].
    const std::vector<MetricCase> table = {
        {"Rosalind Bailey", {"Rosalind Bailey"}, 1, 1, 1.0},
        {"the role was played by Rosalind Bailey in 1976", {"Rosalind Bailey"}, 0, 1, 0.4},
        {"Sarah Hadland", {"Rosalind Bailey"}, 0, 0, 0.0},
        {"The Rosalind Bailey.", {"rosalind bailey"}, 1, 1, 1.0},
        {"", {"blue"}, 0, 0, 0.0},
        {"unknown", {"The"}, 0, 1, 0.0},
        {"blue whale", {"fin whale", "blue whale"}, 1, 1, 0.5},
        {"It's   THE answer!", {"its answer"}, 1, 1, 1.0},
        {"foobar", {"oba"}, 0, 1, 0.0},
        {"a c d", {"a b c d"}, 0, 0, 0.8},
        {"w y z", {"w x y z"}, 0, 0, 6.0 / 7.0},
        {"  42   dollars ", {"42 dollars"}, 1, 1, 1.0},
    };
    REQUIRE(table.size() == 12);
    for (const MetricCase& c : table) {
        CAPTURE(c.pred);
        CHECK(exact_match(c.pred, c.answers) == c.em);
        CHECK(match_metric(c.pred, c.answers) == c.match);
        CHECK(rouge_l(c.pred, c.answers.front()) == doctest::Approx(c.rouge).epsilon(1e-12));
        CHECK(exact_match(c.pred, c.answers) <= match_metric(c.pred, c.answers));
    }
}

TEST_CASE("exact match never exceeds match") {
    std::mt19937_64 rng(1);
    const std::vector<std::string> vocab = {"red", "blue", "whale", "fin", "the", "of", "x"};
    std::uniform_int_distribution<std::size_t> pick(0, vocab.size() - 1);
    std::uniform_int_distribution<int> len(0, 5);
    auto phrase = [&] {
        std::string s;
        const int n = len(rng);
        for (int i = 0; i < n; ++i) {
            if (!s.empty()) s += ' ';
            s += vocab[pick(rng)];
        }
        return s;
    };
    for (int i = 0; i < 500; ++i) {
        const std::string p = phrase(), g = phrase();
        CHECK(exact_match(p, g) <= match_metric(p, g));
    }
}

TEST_CASE("rouge handles repeats and emptiness") {
    CHECK(rouge_l("d c c d", "d d c c") == doctest::Approx(0.75));  // LCS "d c c"
    CHECK(rouge_l("", "x") == 0.0);
    CHECK(rouge_l("x", "") == 0.0);
    CHECK(rouge_l("the a an", "x") == 0.0);  // all words normalized away
    CHECK(rouge_l("same words", "same words") == 1.0);
}

TEST_CASE("evaluate averages per-example maxima") {
    std::vector<QAExample> examples(2);
    examples[0].id = "q0";
    examples[0].question = "?";
    examples[0].answers = {"fin whale", "blue whale"};
    examples[1].id = "q1";
    examples[1].question = "?";
    examples[1].answers = {"red"};

    std::vector<GenerationRecord> gens(2);
    gens[0].id = "q0";
    gens[0].answer = "blue whale";   // em 1 via the second answer
    gens[1].id = "q1";
    gens[1].answer = "dark red sky";  // match only

    EvalSummary s = evaluate(gens, examples);
    CHECK(s.count == 2);
    CHECK(s.em == doctest::Approx(0.5));
    CHECK(s.match == doctest::Approx(1.0));
    // rouge: q0 -> 1.0, q1 -> LCS 1 over 3 vs 1 words = 2*(1/3)/(4/3) = 0.5.
    CHECK(s.rouge == doctest::Approx(0.75));

    gens[1].id = "q9";
    CHECK_THROWS_WITH_AS(evaluate(gens, examples), doctest::Contains("q9"), ConfigError);

    CHECK(evaluate({}, examples).count == 0);
}

TEST_CASE("flop counts match the closed form") {
    const DecoderConfig cfg = flop_cfg();
    CHECK(prefill_flops(10, cfg) == 4'643'840);
    CHECK(prefill_flops(10, cfg) == 3'932'160 + 56'320 + 655'360);
    CHECK(decode_step_flops(1, cfg) == prefill_flops(1, cfg));

    // Prefill equals the sum of per-position decode costs.
    for (const int S : {1, 2, 7, 33}) {
        std::int64_t total = 0;
        for (int s = 1; s <= S; ++s) total += decode_step_flops(s, cfg);
        CHECK(prefill_flops(S, cfg) == total);
    }
    for (int S = 2; S <= 64; ++S) {
        CHECK(prefill_flops(S, cfg) > prefill_flops(S - 1, cfg));
    }
    CHECK_THROWS_AS(prefill_flops(0, cfg), ConfigError);
    CHECK_THROWS_AS(decode_step_flops(0, cfg), ConfigError);

    // Five 128-token contexts squeezed to one embedding each: >= 10x prefill.
    DecoderConfig big = cfg;
    big.vocab_size = 4096;
    const int q = 15;
    const int uncompressed = 1 + 5 * 128 + 4 + q;
    const int compressed = 1 + 5 + 4 + q;
    CHECK(prefill_flops(uncompressed, big) >= 10 * prefill_flops(compressed, big));
}

TEST_CASE("profile rows carry batch sums and medians") {
    ModelSpec spec;
    spec.decoder = {2, 16, 2, 64, 300, 128};
    spec.compression.reset();
    ParameterStore<float> params = init_params(spec, 1);

    auto prompt_of = [&](int n) {
        MixedSequence<float> p;
        p.push_token(tok::kBos);
        for (int i = 1; i < n; ++i) p.push_token(9 + i % 40);
        return p;
    };

    ProfileConfig pcfg;
    pcfg.reps = 5;
    pcfg.decode_tokens = 8;

    ProfiledSystem base{"none", 0, {prompt_of(24), prompt_of(30), prompt_of(18)}};
    ProfiledSystem twin{"twin", 4, base.prompts};
    ProfileReport report = profile_run({base, twin}, params, spec.decoder, pcfg);

    REQUIRE(report.rows.size() == 2);
    const ProfileRow& r0 = report.rows[0];
    CHECK(r0.label == "none");
    CHECK(r0.prompt_items == 24 + 30 + 18);
    CHECK(r0.prefill_flops == prefill_flops(24, spec.decoder) + prefill_flops(30, spec.decoder) +
                                  prefill_flops(18, spec.decoder));
    CHECK(r0.decode_flops_per_token ==
          decode_step_flops(25, spec.decoder) + decode_step_flops(31, spec.decoder) +
              decode_step_flops(19, spec.decoder));
    CHECK(r0.prefill_ms > 0.0);
    CHECK(r0.decode_ms > 0.0);
    CHECK(r0.speedup_vs_baseline == 1.0);

    // The same prompts under another label should time out the same, within
    // scheduling noise.
    CHECK(report.rows[1].speedup_vs_baseline > 0.75);
    CHECK(report.rows[1].speedup_vs_baseline < 1.33);

    ProfileConfig bad = pcfg;
    bad.reps = 1;
    CHECK_THROWS_AS(profile_run({base}, params, spec.decoder, bad), ConfigError);
    bad = pcfg;
    bad.decode_tokens = 0;
    CHECK_THROWS_AS(profile_run({base}, params, spec.decoder, bad), ConfigError);
    CHECK_THROWS_AS(profile_run({}, params, spec.decoder, pcfg), ConfigError);
    CHECK_THROWS_AS(profile_run({{"empty", 0, {}}}, params, spec.decoder, pcfg), ConfigError);

    ProfiledSystem huge{"huge", 0, {prompt_of(125)}};
    CHECK_THROWS_AS(profile_run({huge}, params, spec.decoder, pcfg), ConfigError);

    ProfileRow single =
        profile_prompt("one", 4, prompt_of(24), params, spec.decoder, pcfg);
    CHECK(single.prompt_items == 24);
    CHECK(single.prefill_flops == prefill_flops(24, spec.decoder));
}

TEST_CASE("profile csv layout is exact") {
    ProfileReport report;
    report.rows.push_back({"none", 0, 10, 100, 5, 1.25, 2.5, 1.0});
    report.rows.push_back({"xi4", 4, 3, 40, 2, 0.5, 1.0, 2.5});
    const fs::path path = fs::temp_directory_path() / "cerag_profile_test.csv";
    write_profile_csv(path, report);
    std::stringstream ss;
    ss << std::ifstream(path).rdbuf();
    CHECK(ss.str() ==
          "label,rate,prompt_items,prefill_flops,decode_flops_per_token,prefill_ms,decode_ms,"
          "speedup_vs_baseline\n"
          "none,0,10,100,5,1.2500,2.5000,1.000\n"
          "xi4,4,3,40,2,0.5000,1.0000,2.500\n");
    fs::remove(path);
}

TEST_CASE("speedups are measured against the rate-zero row") {
    ProfileReport report;
    report.rows.push_back({"xi4", 4, 3, 0, 0, 1.0, 1.0, 1.0});
    report.rows.push_back({"none", 0, 10, 0, 0, 4.0, 2.0, 1.0});
    finalize_speedups(report);
    CHECK(report.rows[1].speedup_vs_baseline == doctest::Approx(1.0));
    CHECK(report.rows[0].speedup_vs_baseline == doctest::Approx(3.0));
}

TEST_CASE("eval json carries the summary") {
    const fs::path path = fs::temp_directory_path() / "cerag_eval_test.json";
    write_eval_json(path, {2, 0.5, 1.0, 0.75});
    std::ifstream f(path);
    nlohmann::json j;
    f >> j;
    CHECK(j.at("count") == 2);
    CHECK(j.at("em") == 0.5);
    CHECK(j.at("match") == 1.0);
    CHECK(j.at("rouge_l") == 0.75);
    fs::remove(path);
}
