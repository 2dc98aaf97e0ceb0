#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "cerag/errors.hpp"
#include "cerag/inference.hpp"
#include "cerag/training.hpp"
#include "doctest.h"

using namespace cerag;

namespace {

ModelSpec train_spec(int rate = 2, std::optional<CompressorKind> kind = CompressorKind::full) {
    ModelSpec spec;
    spec.decoder = {2, 16, 2, 64, 300, 128};
    spec.encoder = {1, 8, 2, 32, 300, 128};
    if (kind) {
        spec.compression = CompressionConfig{rate, *kind};
    } else {
        spec.compression.reset();
    }
    return spec;
}

std::vector<int> random_tokens(std::mt19937_64& rng, int n, int vocab = 300) {
    std::uniform_int_distribution<int> d(tok::kReservedCount, vocab - 1);
    std::vector<int> out(static_cast<std::size_t>(n));
    for (int& t : out) t = d(rng);
    return out;
}

FinetuneSample sample_with(std::vector<std::vector<int>> contexts, std::vector<int> instr,
                           std::vector<int> resp, const std::string& id = "s") {
    FinetuneSample s;
    s.id = id;
    s.instruction_tokens = std::move(instr);
    s.response_tokens = std::move(resp);
    s.context_tokens = std::move(contexts);
    for (std::size_t i = 0; i < s.context_tokens.size(); ++i) {
        s.context_ids.push_back("c" + std::to_string(i));
    }
    return s;
}

}  // namespace

TEST_CASE("split points stay in the middle half") {
    std::mt19937_64 rng(1);
    std::set<int> seen;
    for (int i = 0; i < 500; ++i) {
        const int p = sample_split_point(rng, 8);
        CHECK(p >= 2);
        CHECK(p <= 6);
        seen.insert(p);
    }
    CHECK(seen.size() == 5);  // every admissible value occurs
    for (int i = 0; i < 50; ++i) CHECK(sample_split_point(rng, 2) == 1);
    CHECK_THROWS_AS(sample_split_point(rng, 1), ConfigError);
}

TEST_CASE("task mix follows p_autoencode") {
    std::mt19937_64 rng(2);
    int ae = 0;
    const int trials = 10000;
    for (int i = 0; i < trials; ++i) {
        if (sample_task(rng, 0.3) == PretrainTask::autoencode) ++ae;
    }
    const double frac = static_cast<double>(ae) / trials;
    CHECK(frac > 0.25);
    CHECK(frac < 0.35);
    for (int i = 0; i < 100; ++i) {
        CHECK(sample_task(rng, 1.0) == PretrainTask::autoencode);
        CHECK(sample_task(rng, 0.0) == PretrainTask::continuation);
    }
}

TEST_CASE("learning rate schedule ramps then decays") {
    CHECK(lr_schedule(0, 100, 0.05) == doctest::Approx(0.2));
    CHECK(lr_schedule(4, 100, 0.05) == doctest::Approx(1.0));
    CHECK(lr_schedule(5, 100, 0.05) == doctest::Approx(1.0));
    CHECK(lr_schedule(99, 100, 0.05) == doctest::Approx(1.0 / 95.0));
    CHECK(lr_schedule(0, 10, 0.0) == doctest::Approx(1.0));
    CHECK(lr_schedule(9, 10, 0.0) == doctest::Approx(0.1));
    CHECK(lr_schedule(0, 0, 0.5) == doctest::Approx(1.0));
    for (int s = 6; s < 100; ++s) {
        CHECK(lr_schedule(s, 100, 0.05) <= lr_schedule(s - 1, 100, 0.05));
    }
}

TEST_CASE("adamw step matches a scalar simulation") {
    ParameterStore<float> store;
    store.add("w", 2, 2) << 1.0f, -2.0f, 0.5f, 3.0f;
    store.add("b", 1, 2) << 0.25f, -0.75f;
    store.add("frozen", 2, 2).setConstant(4.0f);
    store.entries()[2].trainable = false;
    store.add("idle", 2, 2).setConstant(2.0f);  // trainable, never receives gradients

    TrainConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.weight_decay = 0.5;
    AdamW opt(store, cfg);

    GradientSet<float> grads;
    *grads.sink(store, "w") = (Mat<float>(2, 2) << 0.3f, -0.1f, 0.0f, 2.0f).finished();
    *grads.sink(store, "b") = (Mat<float>(1, 2) << -1.0f, 0.5f).finished();

    // Scalar reference for one bias-corrected step.
    auto expected = [&](float w0, float g, bool decay, int t, float m0, float v0, float* m1,
                        float* v1) {
        const float b1 = 0.9f, b2 = 0.999f, lr = 0.1f * 0.5f, eps = 1e-8f;
        const float m = b1 * m0 + (1 - b1) * g;
        const float v = b2 * v0 + (1 - b2) * g * g;
        *m1 = m;
        *v1 = v;
        const float bc1 = 1 - std::pow(b1, static_cast<float>(t));
        const float bc2 = 1 - std::pow(b2, static_cast<float>(t));
        float w = decay ? w0 * (1 - lr * 0.5f) : w0;
        return w - lr * (m / bc1) / (std::sqrt(v / bc2) + eps);
    };

    const Mat<float> w0 = store.at("w"), b0 = store.at("b");
    const Mat<float> gw = grads.all().at("w"), gb = grads.all().at("b");
    opt.step(grads, 0.5);

    float m1, v1;
    for (int i = 0; i < 4; ++i) {
        CHECK(store.at("w").data()[i] ==
              doctest::Approx(expected(w0.data()[i], gw.data()[i], true, 1, 0, 0, &m1, &v1))
                  .epsilon(1e-5));
    }
    for (int i = 0; i < 2; ++i) {
        CHECK(store.at("b").data()[i] ==
              doctest::Approx(expected(b0.data()[i], gb.data()[i], false, 1, 0, 0, &m1, &v1))
                  .epsilon(1e-5));
    }
    CHECK(store.at("frozen") == Mat<float>::Constant(2, 2, 4.0f));
    // Zero gradient still decays a weight matrix, and only the decay.
    const float decayed = 2.0f * (1 - 0.1f * 0.5f * 0.5f);
    for (int i = 0; i < 4; ++i) {
        CHECK(store.at("idle").data()[i] == doctest::Approx(decayed).epsilon(1e-6));
    }

    // Second step with a different gradient exercises the moment history.
    GradientSet<float> g2;
    *g2.sink(store, "w") = (Mat<float>(2, 2) << -0.6f, 0.2f, 1.0f, -0.5f).finished();
    const Mat<float> w1 = store.at("w");
    const Mat<float> gw2 = g2.all().at("w");
    opt.step(g2, 0.5);
    for (int i = 0; i < 4; ++i) {
        float m0 = 0.1f * gw.data()[i];
        float v0 = 0.001f * gw.data()[i] * gw.data()[i];
        CHECK(store.at("w").data()[i] ==
              doctest::Approx(expected(w1.data()[i], gw2.data()[i], true, 2, m0, v0, &m1, &v1))
                  .epsilon(1e-4));
    }
}

TEST_CASE("losses supervise exactly the intended positions") {
    ModelSpec spec = train_spec(2);
    ParameterStore<float> params = init_params(spec, 3);
    std::mt19937_64 rng(4);

    for (int trial = 0; trial < 8; ++trial) {
        const std::vector<int> tokens = random_tokens(rng, 9);
        const int t = static_cast<int>(tokens.size());
        const int k = embed_count(t, 2);

        // Autoencode: the k embedding positions carry no supervision.
        {
            Tape<float> tape;
            GradientSet<float> grads;
            GraphParams<float> PG(tape, params, &grads);
            Var<float> loss = autoencode_loss_graph(PG, spec, tokens);
            tape.backward(loss.id);
            const Mat<float>& dlogits = tape.grad(loss.id - 1);
            REQUIRE(dlogits.rows() == k + t);
            for (int i = 0; i < k; ++i) CHECK(dlogits.row(i).isZero(0.0f));
            for (int i = k; i < k + t; ++i) CHECK_FALSE(dlogits.row(i).isZero(0.0f));
        }
        // Continuation: embeddings of the prefix are unsupervised.
        {
            const int split = sample_split_point(rng, t);
            const int kp = embed_count(split, 2);
            const int s = t - split;
            Tape<float> tape;
            GradientSet<float> grads;
            GraphParams<float> PG(tape, params, &grads);
            Var<float> loss = continuation_loss_graph(PG, spec, tokens, split);
            tape.backward(loss.id);
            const Mat<float>& dlogits = tape.grad(loss.id - 1);
            REQUIRE(dlogits.rows() == kp + s);
            for (int i = 0; i < kp; ++i) CHECK(dlogits.row(i).isZero(0.0f));
            for (int i = kp; i < kp + s; ++i) CHECK_FALSE(dlogits.row(i).isZero(0.0f));
        }
        // Fine-tune: BOS, contexts, separators and instruction are unsupervised;
        // the response tokens and the terminal EOS are.
        {
            FinetuneSample s = sample_with({random_tokens(rng, 6), random_tokens(rng, 5)},
                                           random_tokens(rng, 4), random_tokens(rng, 3));
            const int prefix =
                1 + embed_count(6, 2) + 1 + embed_count(5, 2) + 4;
            const int total = finetune_input_length(spec, s);
            Tape<float> tape;
            GradientSet<float> grads;
            GraphParams<float> PG(tape, params, &grads);
            Var<float> loss = finetune_loss_graph(PG, spec, s);
            tape.backward(loss.id);
            const Mat<float>& dlogits = tape.grad(loss.id - 1);
            REQUIRE(dlogits.rows() == total);
            for (int i = 0; i < total; ++i) {
                const bool supervised = i >= prefix - 1;
                CHECK(dlogits.row(i).isZero(0.0f) == !supervised);
            }
        }
    }
}

TEST_CASE("finetune_input_length counts items") {
    ModelSpec spec = train_spec(4);
    std::mt19937_64 rng(5);
    FinetuneSample s = sample_with({random_tokens(rng, 10), random_tokens(rng, 7)},
                                   random_tokens(rng, 5), random_tokens(rng, 3));
    CHECK(finetune_input_length(spec, s) == 1 + 2 + 1 + 1 + 5 + 3);
    ModelSpec raw = train_spec(4, std::nullopt);
    CHECK(finetune_input_length(raw, s) == 1 + 10 + 1 + 7 + 5 + 3);
}

TEST_CASE("autoencoding overfits one sequence to exact reconstruction") {
    ModelSpec spec = train_spec(2);
    spec.decoder = {2, 32, 2, 128, 300, 64};
    ParameterStore<float> params = init_params(spec, 1);
    std::mt19937_64 rng(6);
    const std::vector<int> tokens = random_tokens(rng, 8);

    TrainConfig cfg;
    cfg.learning_rate = 3e-3;
    cfg.batch_size = 1;
    cfg.epochs = 400;
    cfg.p_autoencode = 1.0;
    TrainResult result = pretrain_run(spec, params, {tokens}, cfg);

    REQUIRE(result.curve.size() == 400);
    CHECK(result.curve.front().loss > 1.0);
    CHECK(result.curve.back().loss < 0.1);
    for (const LossCurvePoint& p : result.curve) CHECK(p.task == "autoencode");

    CHECK(greedy_reconstruct(spec, params, tokens, static_cast<int>(tokens.size())) == tokens);
}

TEST_CASE("fine-tuning overfits one QA pair") {
    Tokenizer tokenizer;  // byte-level
    ModelSpec spec = train_spec(2);
    spec.decoder = {2, 32, 2, 128, 300, 128};
    ParameterStore<float> params = init_params(spec, 2);

    PromptTemplate tpl;
    tpl.max_new_tokens = 8;
    FinetuneSample s;
    s.id = "q0";
    s.instruction_tokens = instruction_tokens("color?", tpl, tokenizer);
    s.context_ids = {"c0"};
    s.context_tokens = {tokenizer.tokenize("the color is red")};
    s.response_tokens = tokenizer.tokenize(" red");

    TrainConfig cfg;
    cfg.learning_rate = 3e-3;
    cfg.batch_size = 1;
    cfg.epochs = 250;
    TrainResult result = finetune_run(spec, params, {s}, cfg);
    CHECK(result.curve.back().loss < 0.2);

    MultiContextInput ctx =
        assemble_multi({compress_tokens(s.context_tokens[0], "c0", spec, params)});
    MixedSequence<float> prompt = build_prompt(&ctx, "color?", tpl, tokenizer);
    Answer ans = generate(prompt, params, spec.decoder, tpl, tokenizer);
    CHECK(ans.text == " red");
}

TEST_CASE("freeze flags pin parameter groups bitwise") {
    ModelSpec spec = train_spec(2);
    ParameterStore<float> params = init_params(spec, 7);
    std::mt19937_64 rng(8);
    FinetuneSample s = sample_with({random_tokens(rng, 6)}, random_tokens(rng, 3),
                                   random_tokens(rng, 2));
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 1;

    SUBCASE("freeze_decoder") {
        cfg.freeze_decoder = true;
        ParameterStore<float> before = params;
        finetune_run(spec, params, {s}, cfg);
        for (const auto& e : params.entries()) {
            if (e.name.starts_with("dec.")) {
                CHECK(e.value == before.at(e.name));
            }
            CHECK(e.trainable);  // flags restored after the run
        }
        CHECK(params.at("comp.wte") != before.at("comp.wte"));
    }
    SUBCASE("freeze_compressor") {
        cfg.freeze_compressor = true;
        ParameterStore<float> before = params;
        finetune_run(spec, params, {s}, cfg);
        for (const auto& e : params.entries()) {
            if (e.name.starts_with("comp.")) CHECK(e.value == before.at(e.name));
        }
        CHECK(params.at("dec.wte") != before.at("dec.wte"));
    }
}

TEST_CASE("training runs are deterministic") {
    ModelSpec spec = train_spec(2);
    std::mt19937_64 rng(9);
    std::vector<std::vector<int>> chunks;
    for (int i = 0; i < 4; ++i) chunks.push_back(random_tokens(rng, 7 + i));
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 2;
    cfg.seed = 21;

    ParameterStore<float> a = init_params(spec, 10);
    ParameterStore<float> b = init_params(spec, 10);
    TrainResult ra = pretrain_run(spec, a, chunks, cfg);
    TrainResult rb = pretrain_run(spec, b, chunks, cfg);

    REQUIRE(ra.curve.size() == rb.curve.size());
    for (std::size_t i = 0; i < ra.curve.size(); ++i) {
        CHECK(ra.curve[i].step == rb.curve[i].step);
        CHECK(ra.curve[i].task == rb.curve[i].task);
        CHECK(ra.curve[i].loss == rb.curve[i].loss);
    }
    for (std::size_t i = 0; i < a.entries().size(); ++i) {
        CHECK(a.entries()[i].value == b.entries()[i].value);
    }
    // Steps advance once per batch: 4 samples / batch 2 * 2 epochs = 4 steps.
    CHECK(ra.curve.back().step == 3);
}

TEST_CASE("training rejects bad inputs") {
    ModelSpec spec = train_spec(2);
    ParameterStore<float> params = init_params(spec, 0);
    TrainConfig cfg;
    cfg.epochs = 1;

    CHECK_THROWS_AS(pretrain_run(spec, params, {}, cfg), ConfigError);
    CHECK_THROWS_AS(pretrain_run(spec, params, {{1, 2}, {}}, cfg), ConfigError);

    ModelSpec none = train_spec(2, std::nullopt);
    ParameterStore<float> np = init_params(none, 0);
    CHECK_THROWS_AS(pretrain_run(none, np, {{1, 2, 3}}, cfg), ConfigError);

    TrainConfig bad;
    bad.learning_rate = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = TrainConfig{};
    bad.warmup_ratio = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    params.at("comp.wte").setConstant(std::numeric_limits<float>::quiet_NaN());
    CHECK_THROWS_WITH_AS(pretrain_run(spec, params, {{9, 10, 11}}, cfg),
                         doctest::Contains("non-finite"), std::runtime_error);
}

TEST_CASE("oversized fine-tune samples are skipped with a count") {
    ModelSpec spec = train_spec(2);
    spec.decoder.max_seq_len = 24;
    ParameterStore<float> params = init_params(spec, 11);
    std::mt19937_64 rng(12);

    FinetuneSample ok = sample_with({random_tokens(rng, 8)}, random_tokens(rng, 4),
                                    random_tokens(rng, 2), "ok");
    FinetuneSample big = sample_with({random_tokens(rng, 8)}, random_tokens(rng, 30),
                                     random_tokens(rng, 2), "big");
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 1;

    TrainResult r = finetune_run(spec, params, {ok, big}, cfg);
    CHECK(r.skipped == 1);
    CHECK(r.curve.size() == 1);

    CHECK_THROWS_AS(finetune_run(spec, params, {big}, cfg), ConfigError);
}

TEST_CASE("loss curve csv is exact") {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "cerag_curve_test.csv";
    write_loss_curve_csv(path, {{0, "autoencode", 5.5}, {1, "finetune", 0.25}});
    std::ifstream f(path);
    std::stringstream ss;
    ss << f.rdbuf();
    CHECK(ss.str() == "step,task,loss\n0,autoencode,5.5\n1,finetune,0.25\n");
    fs::remove(path);
}
