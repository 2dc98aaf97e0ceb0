#include "cerag/model.hpp"

#include <openssl/evp.h>

#include <cstring>
#include <fstream>
#include <random>

#include "json.hpp"

namespace cerag {

namespace {

void require_positive(int v, const char* name) {
    if (v < 1) throw ConfigError(std::string(name) + " must be >= 1");
}

void validate_dims(int n_layers, int d_model, int n_heads, int d_ff, int vocab_size,
                   int max_seq_len) {
    require_positive(n_layers, "n_layers");
    require_positive(d_model, "d_model");
    require_positive(n_heads, "n_heads");
    require_positive(d_ff, "d_ff");
    require_positive(vocab_size, "vocab_size");
    require_positive(max_seq_len, "max_seq_len");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
}

}  // namespace

void DecoderConfig::validate() const {
    validate_dims(n_layers, d_model, n_heads, d_ff, vocab_size, max_seq_len);
}

void EncoderConfig::validate() const {
    validate_dims(n_layers, d_model, n_heads, d_ff, vocab_size, max_seq_len);
}

void ModelSpec::validate() const {
    decoder.validate();
    if (compression) {
        require_positive(compression->rate, "compression rate");
        if (compression->kind == CompressorKind::light) {
            encoder.validate();
            if (encoder.vocab_size != decoder.vocab_size) {
                throw ConfigError("encoder and decoder must share the vocabulary");
            }
        }
    }
}

namespace {

void init_transformer(ParameterStore<float>& ps, const std::string& prefix,
                      const TransformerDims& dims, bool with_head, std::mt19937_64& rng) {
    std::normal_distribution<float> dist(0.0f, 0.02f);
    auto fill = [&](Mat<float>& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    };
    auto ones = [](Mat<float>& m) { m.setOnes(); };

    fill(ps.add(prefix + ".wte", dims.vocab_size, dims.d_model));
    fill(ps.add(prefix + ".wpe", dims.max_seq_len, dims.d_model));
    for (int l = 0; l < dims.n_layers; ++l) {
        const std::string lp = prefix + ".h" + std::to_string(l);
        ones(ps.add(lp + ".ln1.g", 1, dims.d_model));
        ps.add(lp + ".ln1.b", 1, dims.d_model);
        fill(ps.add(lp + ".attn.wq", dims.d_model, dims.d_model));
        ps.add(lp + ".attn.bq", 1, dims.d_model);
        fill(ps.add(lp + ".attn.wk", dims.d_model, dims.d_model));
        ps.add(lp + ".attn.bk", 1, dims.d_model);
        fill(ps.add(lp + ".attn.wv", dims.d_model, dims.d_model));
        ps.add(lp + ".attn.bv", 1, dims.d_model);
        fill(ps.add(lp + ".attn.wo", dims.d_model, dims.d_model));
        ps.add(lp + ".attn.bo", 1, dims.d_model);
        ones(ps.add(lp + ".ln2.g", 1, dims.d_model));
        ps.add(lp + ".ln2.b", 1, dims.d_model);
        fill(ps.add(lp + ".mlp.w1", dims.d_model, dims.d_ff));
        ps.add(lp + ".mlp.b1", 1, dims.d_ff);
        fill(ps.add(lp + ".mlp.w2", dims.d_ff, dims.d_model));
        ps.add(lp + ".mlp.b2", 1, dims.d_model);
    }
    ones(ps.add(prefix + ".lnf.g", 1, dims.d_model));
    ps.add(prefix + ".lnf.b", 1, dims.d_model);
    if (with_head) {
        fill(ps.add(prefix + ".head.w", dims.d_model, dims.vocab_size));
        ps.add(prefix + ".head.b", 1, dims.vocab_size);
    }
}

}  // namespace

ParameterStore<float> init_params(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    ParameterStore<float> ps;
    init_transformer(ps, kDecoderPrefix, TransformerDims(spec.decoder), /*with_head=*/true, rng);
    if (spec.compression) {
        if (spec.compression->kind == CompressorKind::full) {
            init_transformer(ps, kCompressorPrefix, TransformerDims(spec.decoder),
                             /*with_head=*/false, rng);
        } else {
            init_transformer(ps, kEncoderPrefix, TransformerDims(spec.encoder),
                             /*with_head=*/false, rng);
            std::normal_distribution<float> dist(0.0f, 0.02f);
            Mat<float>& w = ps.add(std::string(kProjectionPrefix) + ".w",
                                   static_cast<Eigen::Index>(spec.compression->rate) *
                                       spec.encoder.d_model,
                                   spec.decoder.d_model);
            for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
            ps.add(std::string(kProjectionPrefix) + ".b", 1, spec.decoder.d_model);
        }
    }
    return ps;
}

std::int64_t transformer_param_count(const TransformerDims& dims, bool with_head) {
    const std::int64_t d = dims.d_model, dff = dims.d_ff, v = dims.vocab_size;
    std::int64_t per_layer = 2 * d                // ln1
                             + 4 * (d * d + d)    // q/k/v/o projections
                             + 2 * d              // ln2
                             + d * dff + dff      // mlp in
                             + dff * d + d;       // mlp out
    std::int64_t n = v * d + dims.max_seq_len * d + dims.n_layers * per_layer + 2 * d;
    if (with_head) n += d * v + v;
    return n;
}

namespace {

constexpr char kCheckpointMagic[4] = {'C', 'C', 'K', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Config>
nlohmann::json config_json(const Config& c) {
    return {{"n_layers", c.n_layers},     {"d_model", c.d_model},
            {"n_heads", c.n_heads},       {"d_ff", c.d_ff},
            {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}};
}

template <typename Config>
Config config_from_json(const nlohmann::json& j) {
    Config c;
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    return c;
}

nlohmann::json spec_json(const ModelSpec& spec) {
    nlohmann::json j;
    j["decoder"] = config_json(spec.decoder);
    if (spec.compression) {
        j["compression"] = {
            {"rate", spec.compression->rate},
            {"kind", spec.compression->kind == CompressorKind::full ? "full" : "light"}};
    } else {
        j["compression"] = nullptr;
    }
    j["encoder"] = config_json(spec.encoder);
    return j;
}

ModelSpec spec_from_json_obj(const nlohmann::json& j) {
    ModelSpec spec;
    spec.decoder = config_from_json<DecoderConfig>(j.at("decoder"));
    if (j.at("compression").is_null()) {
        spec.compression.reset();
    } else {
        CompressionConfig cc;
        cc.rate = j.at("compression").at("rate").get<int>();
        const std::string kind = j.at("compression").at("kind").get<std::string>();
        if (kind == "full") {
            cc.kind = CompressorKind::full;
        } else if (kind == "light") {
            cc.kind = CompressorKind::light;
        } else {
            throw ParseError("unknown compressor kind \"" + kind + "\"");
        }
        spec.compression = cc;
    }
    spec.encoder = config_from_json<EncoderConfig>(j.at("encoder"));
    return spec;
}

}  // namespace

std::string model_spec_to_json(const ModelSpec& spec) { return spec_json(spec).dump(); }

ModelSpec model_spec_from_json(const std::string& json_text) {
    try {
        return spec_from_json_obj(nlohmann::json::parse(json_text));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("model spec json: ") + e.what());
    }
}

void save_checkpoint(const std::filesystem::path& path, const ModelSpec& spec,
                     const ParameterStore<float>& params) {
    nlohmann::json header;
    header["spec"] = spec_json(spec);
    header["tensors"] = nlohmann::json::array();
    for (const auto& e : params.entries()) {
        header["tensors"].push_back({{"name", e.name},
                                     {"rows", e.value.rows()},
                                     {"cols", e.value.cols()},
                                     {"trainable", e.trainable}});
    }
    const std::string header_text = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint " + path.string());
    f.write(kCheckpointMagic, 4);
    const std::uint32_t version = kCheckpointVersion;
    f.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::uint64_t header_len = header_text.size();
    f.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    f.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    // Tensor payload: 32-bit floats in Eigen's column-major order.
    for (const auto& e : params.entries()) {
        f.write(reinterpret_cast<const char*>(e.value.data()),
                static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(e.value.size())));
    }
    if (!f) throw IoError("write failed for checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint " + path.string());
    char magic[4];
    std::uint32_t version = 0;
    std::uint64_t header_len = 0;
    f.read(magic, 4);
    f.read(reinterpret_cast<char*>(&version), sizeof(version));
    f.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    if (!f || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw ParseError("not a checkpoint file: " + path.string());
    }
    if (version != kCheckpointVersion) {
        throw ParseError("unsupported checkpoint version " + std::to_string(version));
    }
    std::string header_text(header_len, '\0');
    f.read(header_text.data(), static_cast<std::streamsize>(header_len));
    if (!f) throw ParseError("truncated checkpoint header in " + path.string());

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("checkpoint header json: " + std::string(e.what()));
    }
    Checkpoint ckpt;
    ckpt.spec = spec_from_json_obj(header.at("spec"));
    for (const auto& t : header.at("tensors")) {
        Mat<float>& m = ckpt.params.add(t.at("name").get<std::string>(),
                                        t.at("rows").get<Eigen::Index>(),
                                        t.at("cols").get<Eigen::Index>());
        ckpt.params.entries().back().trainable = t.at("trainable").get<bool>();
        f.read(reinterpret_cast<char*>(m.data()),
               static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(m.size())));
        if (!f) {
            throw ParseError("truncated checkpoint tensor \"" +
                             t.at("name").get<std::string>() + "\" in " + path.string());
        }
    }
    return ckpt;
}

std::array<std::uint8_t, 32> sha256_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
        EVP_MD_CTX_free(ctx);
        throw std::runtime_error("sha256 init failed");
    }
    char buf[1 << 16];
    while (f) {
        f.read(buf, sizeof(buf));
        const std::streamsize got = f.gcount();
        if (got > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(got));
    }
    std::array<std::uint8_t, 32> out{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, out.data(), &len);
    EVP_MD_CTX_free(ctx);
    if (len != out.size()) throw std::runtime_error("sha256 digest length mismatch");
    return out;
}

}  // namespace cerag
