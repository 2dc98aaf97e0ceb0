#include "app.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cerag/corpus.hpp"
#include "cerag/evalprof.hpp"
#include "cerag/index_store.hpp"
#include "cerag/inference.hpp"
#include "cerag/model.hpp"
#include "cerag/retrieval.hpp"
#include "cerag/tokenizer.hpp"
#include "cerag/training.hpp"
#include "json.hpp"

namespace cerag {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Everything a run can configure. A JSON config file populates it first, then
// command-line flags override field by field.
struct RunConfig {
    std::string corpus, chunks, qa, eval_qa, tokenizer, bm25, checkpoint, index, generations;
    std::string out = "out";
    std::uint64_t seed = 0;
    int threads = 1;

    DecoderConfig decoder;
    EncoderConfig encoder;
    int xi = 4;
    std::string compressor = "full";  // full | light | none

    TrainConfig train;
    PromptTemplate tpl;

    int top_k = 5;
    double bm25_k1 = 0.9, bm25_b = 0.4;

    int entities = 100, questions = 50;
    int chunk_size = 64, vocab_size = 4096;
    int limit = 0;  // generation/eval cap, 0 = no cap

    std::vector<int> profile_rates{0, 4, 16, 128};
    int profile_reps = 3, profile_decode_tokens = 32, profile_questions = 50;

    std::string axis;
    std::vector<int> axis_values{1, 5};
    std::vector<std::string> train_sets;
    bool allow_index_mismatch = false;
};

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        const bool known = std::any_of(allowed.begin(), allowed.end(),
                                       [&](const char* k) { return it.key() == k; });
        if (!known) throw ConfigError(where + ": unknown key \"" + it.key() + "\"");
    }
}

template <typename T>
void opt_get(const json& j, const char* key, T& out) {
    if (j.contains(key) && !j.at(key).is_null()) out = j.at(key).get<T>();
}

void load_decoder(const json& j, DecoderConfig& c) {
    check_keys(j, {"n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"},
               "config.decoder");
    opt_get(j, "n_layers", c.n_layers);
    opt_get(j, "d_model", c.d_model);
    opt_get(j, "n_heads", c.n_heads);
    opt_get(j, "d_ff", c.d_ff);
    opt_get(j, "vocab_size", c.vocab_size);
    opt_get(j, "max_seq_len", c.max_seq_len);
}

void load_encoder(const json& j, EncoderConfig& c) {
    check_keys(j, {"n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"},
               "config.encoder");
    opt_get(j, "n_layers", c.n_layers);
    opt_get(j, "d_model", c.d_model);
    opt_get(j, "n_heads", c.n_heads);
    opt_get(j, "d_ff", c.d_ff);
    opt_get(j, "vocab_size", c.vocab_size);
    opt_get(j, "max_seq_len", c.max_seq_len);
}

void load_run_config(const fs::path& path, RunConfig& cfg) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    try {
        check_keys(j,
                   {"corpus", "chunks", "qa", "eval_qa", "tokenizer", "bm25", "checkpoint", "index",
                    "generations", "out", "seed", "threads", "decoder", "encoder", "compression",
                    "train", "template", "retrieval", "synth", "chunking", "limit", "profile",
                    "ablate"},
                   "config");
        opt_get(j, "corpus", cfg.corpus);
        opt_get(j, "chunks", cfg.chunks);
        opt_get(j, "qa", cfg.qa);
        opt_get(j, "eval_qa", cfg.eval_qa);
        opt_get(j, "tokenizer", cfg.tokenizer);
        opt_get(j, "bm25", cfg.bm25);
        opt_get(j, "checkpoint", cfg.checkpoint);
        opt_get(j, "index", cfg.index);
        opt_get(j, "generations", cfg.generations);
        opt_get(j, "out", cfg.out);
        opt_get(j, "seed", cfg.seed);
        opt_get(j, "threads", cfg.threads);
        opt_get(j, "limit", cfg.limit);
        if (j.contains("decoder")) load_decoder(j.at("decoder"), cfg.decoder);
        if (j.contains("encoder")) load_encoder(j.at("encoder"), cfg.encoder);
        if (j.contains("compression")) {
            if (j.at("compression").is_null()) {
                cfg.compressor = "none";
            } else {
                check_keys(j.at("compression"), {"rate", "kind"}, "config.compression");
                opt_get(j.at("compression"), "rate", cfg.xi);
                opt_get(j.at("compression"), "kind", cfg.compressor);
            }
        }
        if (j.contains("train")) {
            const json& t = j.at("train");
            check_keys(t,
                       {"learning_rate", "batch_size", "epochs", "warmup_ratio", "weight_decay",
                        "freeze_decoder", "freeze_compressor", "p_autoencode"},
                       "config.train");
            opt_get(t, "learning_rate", cfg.train.learning_rate);
            opt_get(t, "batch_size", cfg.train.batch_size);
            opt_get(t, "epochs", cfg.train.epochs);
            opt_get(t, "warmup_ratio", cfg.train.warmup_ratio);
            opt_get(t, "weight_decay", cfg.train.weight_decay);
            opt_get(t, "freeze_decoder", cfg.train.freeze_decoder);
            opt_get(t, "freeze_compressor", cfg.train.freeze_compressor);
            opt_get(t, "p_autoencode", cfg.train.p_autoencode);
        }
        if (j.contains("template")) {
            const json& t = j.at("template");
            check_keys(t, {"prefix", "suffix", "max_new_tokens", "stop_on_eos"}, "config.template");
            opt_get(t, "prefix", cfg.tpl.prefix);
            opt_get(t, "suffix", cfg.tpl.suffix);
            opt_get(t, "max_new_tokens", cfg.tpl.max_new_tokens);
            opt_get(t, "stop_on_eos", cfg.tpl.stop_on_eos);
        }
        if (j.contains("retrieval")) {
            const json& r = j.at("retrieval");
            check_keys(r, {"top_k", "k1", "b"}, "config.retrieval");
            opt_get(r, "top_k", cfg.top_k);
            opt_get(r, "k1", cfg.bm25_k1);
            opt_get(r, "b", cfg.bm25_b);
        }
        if (j.contains("synth")) {
            const json& s = j.at("synth");
            check_keys(s, {"entities", "questions"}, "config.synth");
            opt_get(s, "entities", cfg.entities);
            opt_get(s, "questions", cfg.questions);
        }
        if (j.contains("chunking")) {
            const json& c = j.at("chunking");
            check_keys(c, {"chunk_size", "vocab_size"}, "config.chunking");
            opt_get(c, "chunk_size", cfg.chunk_size);
            opt_get(c, "vocab_size", cfg.vocab_size);
        }
        if (j.contains("profile")) {
            const json& p = j.at("profile");
            check_keys(p, {"rates", "reps", "decode_tokens", "questions"}, "config.profile");
            opt_get(p, "rates", cfg.profile_rates);
            opt_get(p, "reps", cfg.profile_reps);
            opt_get(p, "decode_tokens", cfg.profile_decode_tokens);
            opt_get(p, "questions", cfg.profile_questions);
        }
        if (j.contains("ablate")) {
            const json& a = j.at("ablate");
            check_keys(a, {"axis", "values", "train_sets"}, "config.ablate");
            opt_get(a, "axis", cfg.axis);
            opt_get(a, "values", cfg.axis_values);
            opt_get(a, "train_sets", cfg.train_sets);
        }
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

json run_config_json(const RunConfig& cfg) {
    auto dec = [](const DecoderConfig& c) {
        return json{{"n_layers", c.n_layers},     {"d_model", c.d_model},
                    {"n_heads", c.n_heads},       {"d_ff", c.d_ff},
                    {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}};
    };
    auto enc = [](const EncoderConfig& c) {
        return json{{"n_layers", c.n_layers},     {"d_model", c.d_model},
                    {"n_heads", c.n_heads},       {"d_ff", c.d_ff},
                    {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}};
    };
    json compression;
    if (cfg.compressor == "none") {
        compression = nullptr;
    } else {
        compression = json{{"rate", cfg.xi}, {"kind", cfg.compressor}};
    }
    return json{
        {"corpus", cfg.corpus},
        {"chunks", cfg.chunks},
        {"qa", cfg.qa},
        {"eval_qa", cfg.eval_qa},
        {"tokenizer", cfg.tokenizer},
        {"bm25", cfg.bm25},
        {"checkpoint", cfg.checkpoint},
        {"index", cfg.index},
        {"generations", cfg.generations},
        {"out", cfg.out},
        {"seed", cfg.seed},
        {"threads", cfg.threads},
        {"decoder", dec(cfg.decoder)},
        {"encoder", enc(cfg.encoder)},
        {"compression", compression},
        {"train",
         {{"learning_rate", cfg.train.learning_rate},
          {"batch_size", cfg.train.batch_size},
          {"epochs", cfg.train.epochs},
          {"warmup_ratio", cfg.train.warmup_ratio},
          {"weight_decay", cfg.train.weight_decay},
          {"freeze_decoder", cfg.train.freeze_decoder},
          {"freeze_compressor", cfg.train.freeze_compressor},
          {"p_autoencode", cfg.train.p_autoencode}}},
        {"template",
         {{"prefix", cfg.tpl.prefix},
          {"suffix", cfg.tpl.suffix},
          {"max_new_tokens", cfg.tpl.max_new_tokens},
          {"stop_on_eos", cfg.tpl.stop_on_eos}}},
        {"retrieval", {{"top_k", cfg.top_k}, {"k1", cfg.bm25_k1}, {"b", cfg.bm25_b}}},
        {"synth", {{"entities", cfg.entities}, {"questions", cfg.questions}}},
        {"chunking", {{"chunk_size", cfg.chunk_size}, {"vocab_size", cfg.vocab_size}}},
        {"limit", cfg.limit},
        {"profile",
         {{"rates", cfg.profile_rates},
          {"reps", cfg.profile_reps},
          {"decode_tokens", cfg.profile_decode_tokens},
          {"questions", cfg.profile_questions}}},
        {"ablate",
         {{"axis", cfg.axis}, {"values", cfg.axis_values}, {"train_sets", cfg.train_sets}}}};
}

fs::path prepare_out(const RunConfig& cfg, const std::string& command) {
    if (cfg.out.empty()) throw ConfigError("--out must not be empty");
    if (cfg.threads < 1) throw ConfigError("--threads must be >= 1");
    fs::create_directories(cfg.out);
    json j = run_config_json(cfg);
    j["command"] = command;
    std::ofstream out(fs::path(cfg.out) / "run_config.json");
    if (!out) throw IoError("cannot write resolved config to " + cfg.out);
    out << j.dump(2) << '\n';
    return cfg.out;
}

std::string require(const std::string& value, const char* flag) {
    if (value.empty()) throw ConfigError(std::string("missing required option ") + flag);
    return value;
}

ModelSpec make_spec(const RunConfig& cfg) {
    ModelSpec spec;
    spec.decoder = cfg.decoder;
    spec.encoder = cfg.encoder;
    if (cfg.compressor == "none") {
        spec.compression.reset();
    } else if (cfg.compressor == "full" || cfg.compressor == "light") {
        CompressionConfig cc;
        cc.rate = cfg.xi;
        cc.kind = cfg.compressor == "light" ? CompressorKind::light : CompressorKind::full;
        spec.compression = cc;
    } else {
        throw ConfigError("--compressor must be full, light, or none, got \"" + cfg.compressor +
                          "\"");
    }
    spec.validate();
    return spec;
}

Tokenizer load_tokenizer_checked(const RunConfig& cfg, const DecoderConfig& dec) {
    Tokenizer tk = Tokenizer::load(require(cfg.tokenizer, "--tokenizer"));
    if (tk.vocab_size() > dec.vocab_size) {
        throw ConfigError("tokenizer vocab " + std::to_string(tk.vocab_size()) +
                          " exceeds decoder vocab " + std::to_string(dec.vocab_size));
    }
    return tk;
}

std::vector<QAExample> load_examples(const std::string& path, const Tokenizer& tk, int limit) {
    QALoadResult qa = load_qa(path, tk, 128, 64);
    if (qa.dropped > 0) {
        std::cerr << "warning: dropped " << qa.dropped << " over-length examples from " << path
                  << '\n';
    }
    if (limit > 0 && static_cast<int>(qa.examples.size()) > limit) qa.examples.resize(limit);
    return qa.examples;
}

std::vector<GenerationRecord> generate_batch(const std::vector<QAExample>& examples,
                                             const RagPipeline& pipe, int top_k) {
    std::vector<GenerationRecord> records;
    records.reserve(examples.size());
    for (const QAExample& ex : examples) {
        RagResult r = rag_answer(ex.question, pipe, top_k);
        records.push_back({ex.id, ex.question, r.answer.text, r.retrieved, r.answer.prefill_ms,
                           r.answer.decode_ms, r.answer.new_tokens});
    }
    return records;
}

void cmd_synth(const RunConfig& cfg) {
    const fs::path out = prepare_out(cfg, "synth");
    SyntheticData data = gen_synthetic(cfg.entities, cfg.questions, cfg.seed);
    write_corpus_jsonl(out / "corpus.jsonl", data.documents);
    write_qa_jsonl(out / "qa.jsonl", data.questions);
    std::cout << "wrote " << data.documents.size() << " documents and " << data.questions.size()
              << " questions to " << out.string() << '\n';
}

void cmd_chunk(const RunConfig& cfg) {
    const fs::path out = prepare_out(cfg, "chunk");
    std::vector<Document> docs = read_corpus_jsonl(require(cfg.corpus, "--corpus"));
    std::vector<std::string> texts;
    texts.reserve(docs.size());
    for (const Document& d : docs) texts.push_back(d.text);
    Tokenizer tk = build_tokenizer(texts, cfg.vocab_size, cfg.seed);
    tk.save(out / "tokenizer.json");
    std::vector<Chunk> chunks = chunk_corpus(docs, tk, cfg.chunk_size);
    write_chunks_jsonl(out / "chunks.jsonl", chunks);
    std::cout << "tokenizer vocab " << tk.vocab_size() << ", " << chunks.size() << " chunks -> "
              << out.string() << '\n';
}

void cmd_build_bm25(const RunConfig& cfg) {
    const fs::path out = prepare_out(cfg, "build-bm25");
    Tokenizer tk = Tokenizer::load(require(cfg.tokenizer, "--tokenizer"));
    std::vector<Chunk> chunks = read_chunks_jsonl(require(cfg.chunks, "--chunks"), tk);
    BM25Index index = build_index(chunks, cfg.bm25_k1, cfg.bm25_b);
    const fs::path dir = out / "bm25";
    save_index(index, dir);
    std::cout << "bm25 over " << index.doc_count() << " chunks -> " << dir.string() << '\n';
}

void cmd_pretrain(const RunConfig& cfg) {
    const fs::path out = prepare_out(cfg, "pretrain");
    ModelSpec spec = make_spec(cfg);
    if (!spec.compression) throw ConfigError("pretrain requires a compressor (full or light)");
    Tokenizer tk = load_tokenizer_checked(cfg, spec.decoder);
    std::vector<Chunk> chunks = read_chunks_jsonl(require(cfg.chunks, "--chunks"), tk);
    std::vector<std::vector<int>> token_lists;
    token_lists.reserve(chunks.size());
    for (const Chunk& c : chunks) token_lists.push_back(c.tokens);

    ParameterStore<float> params = init_params(spec, cfg.seed);
    TrainConfig train = cfg.train;
    train.seed = cfg.seed;
    TrainResult result = pretrain_run(spec, params, token_lists, train);
    save_checkpoint(out / "model.cckp", spec, params);
    write_loss_curve_csv(out / "pretrain_curve.csv", result.curve);
    double last = result.curve.empty() ? 0.0 : result.curve.back().loss;
    std::cout << "pretrained on " << token_lists.size() << " chunks, " << result.curve.size()
              << " samples, final loss " << last << " -> " << (out / "model.cckp").string() << '\n';
}

void cmd_finetune(const RunConfig& cfg) {
    const fs::path out = prepare_out(cfg, "finetune");
    ModelSpec spec;
    ParameterStore<float> params;
    if (!cfg.checkpoint.empty()) {
        Checkpoint ckpt = load_checkpoint(cfg.checkpoint);
        spec = std::move(ckpt.spec);
        params = std::move(ckpt.params);
    } else {
        spec = make_spec(cfg);
        params = init_params(spec, cfg.seed);
    }
    Tokenizer tk = load_tokenizer_checked(cfg, spec.decoder);
    std::vector<Chunk> chunks = read_chunks_jsonl(require(cfg.chunks, "--chunks"), tk);
    ChunkMap chunk_map(chunks);
    BM25Index bm25 = load_bm25(require(cfg.bm25, "--bm25"));
    std::vector<QAExample> examples = load_examples(require(cfg.qa, "--qa"), tk, 0);

    std::vector<FinetuneSample> samples =
        build_finetune_samples(examples, bm25, chunk_map, tk, cfg.tpl, cfg.top_k);
    TrainConfig train = cfg.train;
    train.seed = cfg.seed;
    train.top_k = cfg.top_k;
    TrainResult result = finetune_run(spec, params, samples, train);
    save_checkpoint(out / "model.cckp", spec, params);
    write_loss_curve_csv(out / "finetune_curve.csv", result.curve);
    double last = result.curve.empty() ? 0.0 : result.curve.back().loss;
    std::cout << "fine-tuned on " << samples.size() - static_cast<std::size_t>(result.skipped)
              << " samples (" << result.skipped << " skipped), final loss " << last << " -> "
              << (out / "model.cckp").string() << '\n';
}

void cmd_compress(const RunConfig& cfg) {
    const fs::path out = prepare_out(cfg, "compress");
    Checkpoint ckpt = load_checkpoint(require(cfg.checkpoint, "--checkpoint"));
    if (!ckpt.spec.compression) throw ConfigError("checkpoint has no compressor");
    Tokenizer tk = load_tokenizer_checked(cfg, ckpt.spec.decoder);
    std::vector<Chunk> chunks = read_chunks_jsonl(require(cfg.chunks, "--chunks"), tk);
    const auto fingerprint = sha256_file(cfg.checkpoint);
    IndexBuildSummary s =
        build_compressed_index(chunks, ckpt.spec, ckpt.params, fingerprint, out / "index.ccix");
    std::cout << "compressed " << s.entry_count << " chunks, " << s.file_bytes << " bytes, "
              << s.wall_ms << " ms -> " << (out / "index.ccix").string() << '\n';
}

void cmd_generate(const RunConfig& cfg) {
    const fs::path out = prepare_out(cfg, "generate");
    Checkpoint ckpt = load_checkpoint(require(cfg.checkpoint, "--checkpoint"));
    Tokenizer tk = load_tokenizer_checked(cfg, ckpt.spec.decoder);
    std::vector<QAExample> examples = load_examples(require(cfg.qa, "--qa"), tk, cfg.limit);

    std::optional<BM25Index> bm25;
    std::vector<Chunk> chunks;
    std::optional<ChunkMap> chunk_map;
    std::optional<CompressedIndex> index;
    if (cfg.top_k > 0) {
        bm25 = load_bm25(require(cfg.bm25, "--bm25"));
        if (!cfg.index.empty()) {
            const auto fingerprint = sha256_file(cfg.checkpoint);
            index = load_index(cfg.index, &fingerprint, cfg.allow_index_mismatch);
        }
        if (cfg.index.empty() || !ckpt.spec.compression) {
            chunks = read_chunks_jsonl(require(cfg.chunks, "--chunks"), tk);
            chunk_map.emplace(chunks);
        }
    }
    RagPipeline pipe{&tk,
                     bm25 ? &*bm25 : nullptr,
                     chunk_map ? &*chunk_map : nullptr,
                     &ckpt.spec,
                     &ckpt.params,
                     index ? &*index : nullptr,
                     cfg.tpl};
    std::vector<GenerationRecord> records = generate_batch(examples, pipe, cfg.top_k);
    write_generations_jsonl(out / "generations.jsonl", records);
    std::cout << "generated " << records.size() << " answers -> "
              << (out / "generations.jsonl").string() << '\n';
}

void cmd_eval(const RunConfig& cfg) {
    const fs::path out = prepare_out(cfg, "eval");
    std::vector<GenerationRecord> records =
        read_generations_jsonl(require(cfg.generations, "--generations"));
    std::vector<QAExample> examples = read_qa_jsonl(require(cfg.qa, "--qa"));
    EvalSummary summary = evaluate(records, examples);
    write_eval_json(out / "metrics.json", summary);
    std::cout << "n=" << summary.count << " em=" << summary.em << " match=" << summary.match
              << " rouge_l=" << summary.rouge << " -> " << (out / "metrics.json").string() << '\n';
}

void cmd_profile(const RunConfig& cfg) {
    const fs::path out = prepare_out(cfg, "profile");
    Checkpoint ckpt = load_checkpoint(require(cfg.checkpoint, "--checkpoint"));
    Tokenizer tk = load_tokenizer_checked(cfg, ckpt.spec.decoder);
    std::vector<Chunk> chunks = read_chunks_jsonl(require(cfg.chunks, "--chunks"), tk);
    ChunkMap chunk_map(chunks);
    BM25Index bm25 = load_bm25(require(cfg.bm25, "--bm25"));
    std::vector<QAExample> examples =
        load_examples(require(cfg.qa, "--qa"), tk, cfg.profile_questions);
    if (examples.empty()) throw ConfigError("no questions to profile");

    // Retrieval is shared: the same context chunks feed every rate.
    std::vector<std::vector<std::string>> retrieved(examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) {
        for (const SearchHit& hit : search(bm25, examples[i].question, cfg.top_k)) {
            retrieved[i].push_back(hit.chunk_id);
        }
    }
    std::vector<ProfiledSystem> systems;
    for (int rate : cfg.profile_rates) {
        ProfiledSystem sys;
        sys.rate = rate;
        sys.label = rate == 0 ? "no-compression" : "xi=" + std::to_string(rate);
        ModelSpec rate_spec = ckpt.spec;
        if (rate > 0) {
            if (!rate_spec.compression) throw ConfigError("checkpoint has no compressor");
            rate_spec.compression->rate = rate;
        }
        for (std::size_t i = 0; i < examples.size(); ++i) {
            if (rate == 0) {
                std::vector<std::vector<int>> context_tokens;
                for (const std::string& id : retrieved[i]) {
                    context_tokens.push_back(chunk_map.at(id).tokens);
                }
                sys.prompts.push_back(
                    build_prompt_raw(context_tokens, examples[i].question, cfg.tpl, tk));
            } else {
                std::vector<ContextEmbeddings> contexts;
                for (const std::string& id : retrieved[i]) {
                    contexts.push_back(
                        compress_tokens(chunk_map.at(id).tokens, id, rate_spec, ckpt.params));
                }
                MultiContextInput multi = assemble_multi(std::move(contexts));
                sys.prompts.push_back(build_prompt(&multi, examples[i].question, cfg.tpl, tk));
            }
        }
        systems.push_back(std::move(sys));
    }
    ProfileConfig pcfg;
    pcfg.reps = cfg.profile_reps;
    pcfg.decode_tokens = cfg.profile_decode_tokens;
    ProfileReport report = profile_run(systems, ckpt.params, ckpt.spec.decoder, pcfg);
    write_profile_csv(out / "profile.csv", report);
    for (const ProfileRow& r : report.rows) {
        std::cout << r.label << ": items=" << r.prompt_items << " prefill_ms=" << r.prefill_ms
                  << " decode_ms=" << r.decode_ms << " speedup=" << r.speedup_vs_baseline << '\n';
    }
    std::cout << "-> " << (out / "profile.csv").string() << '\n';
}

struct AblationRow {
    std::string label;
    EvalSummary summary;
};

void write_ablation_csv(const fs::path& path, const std::vector<AblationRow>& rows) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "label,em,match,rouge_l,count\n";
    for (const AblationRow& r : rows) {
        out << r.label << ',' << r.summary.em << ',' << r.summary.match << ',' << r.summary.rouge
            << ',' << r.summary.count << '\n';
    }
}

void cmd_ablate(const RunConfig& cfg) {
    const fs::path out = prepare_out(cfg, "ablate");
    Checkpoint base = load_checkpoint(require(cfg.checkpoint, "--checkpoint"));
    Tokenizer tk = load_tokenizer_checked(cfg, base.spec.decoder);
    std::vector<Chunk> chunks = read_chunks_jsonl(require(cfg.chunks, "--chunks"), tk);
    ChunkMap chunk_map(chunks);
    BM25Index bm25 = load_bm25(require(cfg.bm25, "--bm25"));
    std::vector<QAExample> train_examples = load_examples(require(cfg.qa, "--qa"), tk, 0);
    std::vector<QAExample> eval_examples =
        load_examples(require(cfg.eval_qa, "--eval-qa"), tk, cfg.limit);

    auto run_variant = [&](const std::string& label, const std::vector<QAExample>& train_set,
                           bool from_scratch, bool freeze_decoder, int top_k) {
        ParameterStore<float> params =
            from_scratch ? init_params(base.spec, cfg.seed) : base.params;
        std::vector<FinetuneSample> samples =
            build_finetune_samples(train_set, bm25, chunk_map, tk, cfg.tpl, top_k);
        TrainConfig train = cfg.train;
        train.seed = cfg.seed;
        train.top_k = top_k;
        train.freeze_decoder = freeze_decoder;
        finetune_run(base.spec, params, samples, train);
        RagPipeline pipe{&tk, &bm25, &chunk_map, &base.spec, &params, nullptr, cfg.tpl};
        std::vector<GenerationRecord> records = generate_batch(eval_examples, pipe, top_k);
        return AblationRow{label, evaluate(records, eval_examples)};
    };

    std::vector<AblationRow> rows;
    if (cfg.axis == "no-pretrain") {
        rows.push_back(run_variant("scratch", train_examples, true, false, cfg.top_k));
        rows.push_back(run_variant("pretrained", train_examples, false, false, cfg.top_k));
    } else if (cfg.axis == "freeze-decoder") {
        rows.push_back(run_variant("frozen-decoder", train_examples, false, true, cfg.top_k));
        rows.push_back(run_variant("full-tuning", train_examples, false, false, cfg.top_k));
    } else if (cfg.axis == "topk") {
        if (cfg.axis_values.empty()) throw ConfigError("--values required for the topk axis");
        for (int v : cfg.axis_values) {
            rows.push_back(
                run_variant("topk=" + std::to_string(v), train_examples, false, false, v));
        }
    } else if (cfg.axis == "train-sets") {
        if (cfg.train_sets.empty()) throw ConfigError("--train-sets required for this axis");
        std::vector<QAExample> combined;
        for (const std::string& path : cfg.train_sets) {
            std::vector<QAExample> set = load_examples(path, tk, 0);
            rows.push_back(run_variant(fs::path(path).stem().string(), set, false, false,
                                       cfg.top_k));
            combined.insert(combined.end(), set.begin(), set.end());
        }
        if (cfg.train_sets.size() > 1) {
            rows.push_back(run_variant("combined", combined, false, false, cfg.top_k));
        }
    } else {
        throw ConfigError("--axis must be no-pretrain, freeze-decoder, topk, or train-sets, got \"" +
                          cfg.axis + "\"");
    }
    write_ablation_csv(out / "ablation.csv", rows);
    for (const AblationRow& r : rows) {
        std::cout << r.label << ": em=" << r.summary.em << " match=" << r.summary.match
                  << " rouge_l=" << r.summary.rouge << '\n';
    }
    std::cout << "-> " << (out / "ablation.csv").string() << '\n';
}

std::string find_config_arg(int argc, char** argv) {
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--config" && i + 1 < argc) return argv[i + 1];
        if (a.rfind("--config=", 0) == 0) return a.substr(9);
    }
    return {};
}

}  // namespace

int run_app(int argc, char** argv) {
    RunConfig cfg;
    const std::string config_path = find_config_arg(argc, argv);
    if (!config_path.empty()) load_run_config(config_path, cfg);

    CLI::App app{"context-embedding compression for retrieval-augmented generation"};
    app.require_subcommand(1);
    std::string config_sink;  // absorbed here; the file was loaded up front

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_sink, "JSON run config; explicit flags override it");
        sub->add_option("--seed", cfg.seed, "seed for all randomness");
        sub->add_option("--out", cfg.out, "output directory (resolved config is written there)");
        sub->add_option("--threads", cfg.threads, "worker threads; 1 guarantees determinism");
        return sub;
    };
    auto model_opts = [&](CLI::App* sub) {
        sub->add_option("--xi", cfg.xi, "compression rate");
        sub->add_option("--compressor", cfg.compressor, "compressor variant: full|light|none");
        sub->add_option("--layers", cfg.decoder.n_layers, "decoder layers");
        sub->add_option("--dmodel", cfg.decoder.d_model, "decoder width");
        sub->add_option("--vocab-size", cfg.decoder.vocab_size, "decoder vocabulary size");
        sub->add_option("--max-seq-len", cfg.decoder.max_seq_len, "decoder context limit");
        return sub;
    };
    auto train_opts = [&](CLI::App* sub) {
        sub->add_option("--epochs", cfg.train.epochs, "training epochs");
        sub->add_option("--batch", cfg.train.batch_size, "batch size");
        sub->add_option("--lr", cfg.train.learning_rate, "peak learning rate");
        return sub;
    };

    CLI::App* synth = common(app.add_subcommand("synth", "generate the synthetic corpus and QA"));
    synth->add_option("--entities", cfg.entities, "number of synthetic entities");
    synth->add_option("--questions", cfg.questions, "number of QA pairs");

    CLI::App* chunk = common(app.add_subcommand("chunk", "train tokenizer and chunk a corpus"));
    chunk->add_option("--corpus", cfg.corpus, "corpus JSONL");
    chunk->add_option("--chunk-size", cfg.chunk_size, "tokens per chunk");
    chunk->add_option("--vocab", cfg.vocab_size, "tokenizer vocabulary size");

    CLI::App* bm25 = common(app.add_subcommand("build-bm25", "build the BM25 retrieval index"));
    bm25->add_option("--chunks", cfg.chunks, "chunk JSONL");
    bm25->add_option("--tokenizer", cfg.tokenizer, "tokenizer JSON");
    bm25->add_option("--k1", cfg.bm25_k1, "BM25 k1");
    bm25->add_option("--b", cfg.bm25_b, "BM25 b");

    CLI::App* pretrain = train_opts(model_opts(
        common(app.add_subcommand("pretrain", "auto-encoding + continuation pre-training"))));
    pretrain->add_option("--chunks", cfg.chunks, "chunk JSONL");
    pretrain->add_option("--tokenizer", cfg.tokenizer, "tokenizer JSON");

    CLI::App* finetune = train_opts(model_opts(
        common(app.add_subcommand("finetune", "instruction fine-tuning with retrieved contexts"))));
    finetune->add_option("--checkpoint", cfg.checkpoint,
                         "starting checkpoint (omit to start from random init)");
    finetune->add_option("--qa", cfg.qa, "training QA JSONL");
    finetune->add_option("--chunks", cfg.chunks, "chunk JSONL");
    finetune->add_option("--tokenizer", cfg.tokenizer, "tokenizer JSON");
    finetune->add_option("--bm25", cfg.bm25, "BM25 index directory");
    finetune->add_option("--topk", cfg.top_k, "retrieved contexts per sample");
    finetune->add_flag("--freeze-decoder", cfg.train.freeze_decoder,
                       "keep decoder weights fixed");
    finetune->add_flag("--freeze-compressor", cfg.train.freeze_compressor,
                       "keep compressor weights fixed");

    CLI::App* compress =
        common(app.add_subcommand("compress", "build the offline compressed-context index"));
    compress->add_option("--checkpoint", cfg.checkpoint, "model checkpoint");
    compress->add_option("--chunks", cfg.chunks, "chunk JSONL");
    compress->add_option("--tokenizer", cfg.tokenizer, "tokenizer JSON");

    CLI::App* generate =
        common(app.add_subcommand("generate", "answer questions with the trained system"));
    generate->add_option("--checkpoint", cfg.checkpoint, "model checkpoint");
    generate->add_option("--qa", cfg.qa, "question JSONL");
    generate->add_option("--tokenizer", cfg.tokenizer, "tokenizer JSON");
    generate->add_option("--bm25", cfg.bm25, "BM25 index directory");
    generate->add_option("--chunks", cfg.chunks, "chunk JSONL (live compression / raw contexts)");
    generate->add_option("--index", cfg.index, "compressed context index (CCIX)");
    generate->add_option("--topk", cfg.top_k, "retrieved contexts per question (0 = closed book)");
    generate->add_option("--max-new", cfg.tpl.max_new_tokens, "generation length cap");
    generate->add_option("--limit", cfg.limit, "answer only the first N questions (0 = all)");
    generate->add_flag("--allow-index-mismatch", cfg.allow_index_mismatch,
                       "tolerate a CCIX checkpoint fingerprint mismatch");

    CLI::App* eval = common(app.add_subcommand("eval", "score generations against gold answers"));
    eval->add_option("--generations", cfg.generations, "generation JSONL");
    eval->add_option("--qa", cfg.qa, "gold QA JSONL");

    CLI::App* profile =
        common(app.add_subcommand("profile", "FLOP model + wall-clock timing across rates"));
    profile->add_option("--checkpoint", cfg.checkpoint, "model checkpoint");
    profile->add_option("--qa", cfg.qa, "question JSONL");
    profile->add_option("--tokenizer", cfg.tokenizer, "tokenizer JSON");
    profile->add_option("--bm25", cfg.bm25, "BM25 index directory");
    profile->add_option("--chunks", cfg.chunks, "chunk JSONL");
    profile->add_option("--rates", cfg.profile_rates,
                        "compression rates to time (0 = no compression)");
    profile->add_option("--reps", cfg.profile_reps, "timed repetitions (first is warm-up)");
    profile->add_option("--decode-tokens", cfg.profile_decode_tokens,
                        "fixed decode length per question");
    profile->add_option("--questions", cfg.profile_questions, "question batch size");
    profile->add_option("--topk", cfg.top_k, "contexts per question");

    CLI::App* ablate = train_opts(
        common(app.add_subcommand("ablate", "paired fine-tune/eval runs along one axis")));
    ablate->add_option("--axis", cfg.axis,
                       "ablation axis: no-pretrain|freeze-decoder|topk|train-sets");
    ablate->add_option("--values", cfg.axis_values, "topk axis values");
    ablate->add_option("--train-sets", cfg.train_sets, "QA JSONL files for the train-sets axis");
    ablate->add_option("--checkpoint", cfg.checkpoint, "pretrained checkpoint");
    ablate->add_option("--qa", cfg.qa, "training QA JSONL");
    ablate->add_option("--eval-qa", cfg.eval_qa, "held-out QA JSONL");
    ablate->add_option("--chunks", cfg.chunks, "chunk JSONL");
    ablate->add_option("--tokenizer", cfg.tokenizer, "tokenizer JSON");
    ablate->add_option("--bm25", cfg.bm25, "BM25 index directory");
    ablate->add_option("--topk", cfg.top_k, "retrieved contexts per sample");
    ablate->add_option("--limit", cfg.limit, "evaluate only the first N questions (0 = all)");

    synth->callback([&] { cmd_synth(cfg); });
    chunk->callback([&] { cmd_chunk(cfg); });
    bm25->callback([&] { cmd_build_bm25(cfg); });
    pretrain->callback([&] { cmd_pretrain(cfg); });
    finetune->callback([&] { cmd_finetune(cfg); });
    compress->callback([&] { cmd_compress(cfg); });
    generate->callback([&] { cmd_generate(cfg); });
    eval->callback([&] { cmd_eval(cfg); });
    profile->callback([&] { cmd_profile(cfg); });
    ablate->callback([&] { cmd_ablate(cfg); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }
    return 0;
}

}  // namespace cerag
