#include "cerag/corpus.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <numeric>
#include <random>
#include <unordered_set>

#include "cerag/errors.hpp"
#include "json.hpp"

namespace cerag {

namespace {

nlohmann::json parse_line(const std::filesystem::path& path, const std::string& line,
                          std::size_t lineno) {
    try {
        auto j = nlohmann::json::parse(line);
        if (!j.is_object()) throw ParseError("not an object");
        return j;
    } catch (const std::exception& e) {
        throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
}

std::string require_string(const nlohmann::json& j, const char* field,
                           const std::filesystem::path& path, std::size_t lineno) {
    if (!j.contains(field) || !j[field].is_string()) {
        throw ParseError(path.string() + ":" + std::to_string(lineno) + ": missing string field \"" +
                         field + "\"");
    }
    return j[field].get<std::string>();
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) lines.push_back(line);
    return lines;
}

}  // namespace

std::vector<Chunk> chunk_corpus(const std::vector<Document>& docs, const Tokenizer& tokenizer,
                                int chunk_size) {
    if (chunk_size < 1) throw ConfigError("chunk_size must be >= 1");
    std::vector<Chunk> chunks;
    for (const Document& doc : docs) {
        const std::vector<int> tokens = tokenizer.tokenize(doc.text);
        for (std::size_t start = 0, index = 0; start < tokens.size(); start += chunk_size, ++index) {
            const std::size_t len = std::min<std::size_t>(chunk_size, tokens.size() - start);
            Chunk c;
            c.id = doc.id + "#" + std::to_string(index);
            c.tokens.assign(tokens.begin() + start, tokens.begin() + start + len);
            c.text = tokenizer.detokenize(c.tokens);
            chunks.push_back(std::move(c));
        }
    }
    return chunks;
}

QALoadResult load_qa(const std::filesystem::path& path, const Tokenizer& tokenizer,
                     int max_question_tokens, int max_answer_tokens) {
    QALoadResult result;
    for (QAExample& ex : read_qa_jsonl(path)) {
        const bool question_ok =
            static_cast<int>(tokenizer.tokenize(ex.question).size()) <= max_question_tokens;
        const bool answers_ok = std::all_of(ex.answers.begin(), ex.answers.end(), [&](const auto& a) {
            return static_cast<int>(tokenizer.tokenize(a).size()) <= max_answer_tokens;
        });
        if (question_ok && answers_ok) {
            result.examples.push_back(std::move(ex));
        } else {
            ++result.dropped;
        }
    }
    return result;
}

namespace {

// Entity names draw on this syllable set; values draw on a disjoint set whose
// every syllable contains a letter absent from entity syllables and the filler
// vocabulary, so a value can never appear inside any other word.
constexpr std::array<const char*, 20> kEntitySyllables = {
    "bar", "bel", "cor", "dal", "dor", "fal", "fen", "gar", "hol", "lam",
    "lin", "mar", "nor", "pel", "ran", "sel", "tor", "ul",  "ser", "tan"};
constexpr std::array<const char*, 20> kValueSyllables = {
    "vex", "zok", "jix", "quv", "wab", "xen", "kyz", "vub", "zax", "jeq",
    "wix", "kov", "zul", "jag", "qib", "wol", "xam", "kez", "vyn", "jux"};
constexpr std::array<const char*, 8> kAttributes = {
    "color", "metal", "animal", "flower", "beverage", "mineral", "emblem", "motto"};
constexpr std::array<const char*, 10> kFillers = {
    "Travelers often mention {} in their letters home.",
    "The road to {} winds past quiet fields.",
    "Market days in {} begin before sunrise.",
    "Old maps mark {} with a small star.",
    "Children in {} learn the founding songs early.",
    "The archive of {} keeps records on heavy paper.",
    "Visitors praise the calm evenings of {}.",
    "A stone bridge connects {} to the northern valley.",
    "Every spring, {} hosts a modest festival.",
    "The council of {} meets at the first full moon."};

std::string fill_template(std::string_view tpl, const std::string& entity) {
    std::string out(tpl);
    out.replace(out.find("{}"), 2, entity);
    return out;
}

}  // namespace

SyntheticData gen_synthetic(int n_entities, int n_questions, std::uint64_t seed) {
    if (n_entities < 1) throw ConfigError("n_entities must be >= 1");
    const long long total_pairs =
        static_cast<long long>(n_entities) * static_cast<long long>(kAttributes.size());
    if (n_questions < 0 || n_questions > total_pairs) {
        throw ConfigError("n_questions must be in [0, " + std::to_string(total_pairs) + "]");
    }
    // 20^3 distinct value words exist; stay clear of exhausting them.
    if (total_pairs > 7200) {
        throw ConfigError("n_entities must be <= 900");
    }
    std::mt19937_64 rng(seed);
    auto pick = [&rng](std::size_t n) {
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    };

    std::unordered_set<std::string> used;
    auto unique_word = [&](auto& syllables, bool capitalize) {
        std::string w;
        do {
            w.clear();
            for (int s = 0; s < 3; ++s) w += syllables[pick(syllables.size())];
        } while (!used.insert(w).second);
        if (capitalize) w[0] = static_cast<char>(w[0] - 'a' + 'A');
        return w;
    };

    SyntheticData data;
    std::vector<std::string> entities(static_cast<std::size_t>(n_entities));
    std::vector<std::vector<std::string>> values(static_cast<std::size_t>(n_entities));
    for (int e = 0; e < n_entities; ++e) {
        const std::string entity = unique_word(kEntitySyllables, true);
        entities[static_cast<std::size_t>(e)] = entity;
        auto& entity_values = values[static_cast<std::size_t>(e)];
        std::vector<std::string> sentences;
        for (std::size_t a = 0; a < kAttributes.size(); ++a) {
            entity_values.push_back(unique_word(kValueSyllables, false));
            sentences.push_back("The " + std::string(kAttributes[a]) + " of " + entity + " is " +
                                entity_values.back() + ".");
        }
        std::vector<std::size_t> filler_order(kFillers.size());
        std::iota(filler_order.begin(), filler_order.end(), std::size_t{0});
        std::shuffle(filler_order.begin(), filler_order.end(), rng);
        for (std::size_t f = 0; f < kAttributes.size(); ++f) {
            sentences.push_back(fill_template(kFillers[filler_order[f]], entity));
        }
        std::shuffle(sentences.begin(), sentences.end(), rng);

        Document doc;
        doc.id = "doc_" + std::to_string(e);
        for (std::size_t s = 0; s < sentences.size(); ++s) {
            if (s) doc.text += ' ';
            doc.text += sentences[s];
        }
        data.documents.push_back(std::move(doc));
    }

    std::vector<std::pair<int, std::size_t>> pairs;
    for (int e = 0; e < n_entities; ++e) {
        for (std::size_t a = 0; a < kAttributes.size(); ++a) pairs.emplace_back(e, a);
    }
    std::shuffle(pairs.begin(), pairs.end(), rng);
    for (int q = 0; q < n_questions; ++q) {
        const auto [e, a] = pairs[static_cast<std::size_t>(q)];
        QAExample ex;
        ex.id = "q_" + std::to_string(q);
        ex.question = "What is the " + std::string(kAttributes[a]) + " of " +
                      entities[static_cast<std::size_t>(e)] + "?";
        ex.answers.push_back(values[static_cast<std::size_t>(e)][a]);
        data.questions.push_back(std::move(ex));
    }

    for (int e = 0; e < n_entities; ++e) {
        for (const std::string& v : values[static_cast<std::size_t>(e)]) {
            for (int other = 0; other < n_entities; ++other) {
                const bool found =
                    data.documents[static_cast<std::size_t>(other)].text.find(v) != std::string::npos;
                if (found != (other == e)) {
                    throw std::logic_error("synthetic value \"" + v + "\" leaked across documents");
                }
            }
        }
    }
    return data;
}

std::vector<Document> read_corpus_jsonl(const std::filesystem::path& path) {
    std::vector<Document> docs;
    const auto lines = read_lines(path);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        const auto j = parse_line(path, lines[i], i + 1);
        docs.push_back({require_string(j, "id", path, i + 1), require_string(j, "text", path, i + 1)});
    }
    return docs;
}

void write_corpus_jsonl(const std::filesystem::path& path, const std::vector<Document>& docs) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    for (const Document& d : docs) {
        f << nlohmann::json{{"id", d.id}, {"text", d.text}}.dump() << '\n';
    }
}

std::vector<QAExample> read_qa_jsonl(const std::filesystem::path& path) {
    std::vector<QAExample> out;
    const auto lines = read_lines(path);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        const auto j = parse_line(path, lines[i], i + 1);
        QAExample ex;
        ex.id = require_string(j, "id", path, i + 1);
        ex.question = require_string(j, "question", path, i + 1);
        if (!j.contains("answers") || !j["answers"].is_array() || j["answers"].empty()) {
            throw ParseError(path.string() + ":" + std::to_string(i + 1) +
                             ": missing non-empty \"answers\" array");
        }
        for (const auto& a : j["answers"]) {
            if (!a.is_string()) {
                throw ParseError(path.string() + ":" + std::to_string(i + 1) +
                                 ": answers must be strings");
            }
            ex.answers.push_back(a.get<std::string>());
        }
        out.push_back(std::move(ex));
    }
    return out;
}

void write_qa_jsonl(const std::filesystem::path& path, const std::vector<QAExample>& examples) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    for (const QAExample& ex : examples) {
        f << nlohmann::json{{"id", ex.id}, {"question", ex.question}, {"answers", ex.answers}}.dump()
          << '\n';
    }
}

void write_chunks_jsonl(const std::filesystem::path& path, const std::vector<Chunk>& chunks) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    for (const Chunk& c : chunks) {
        f << nlohmann::json{{"id", c.id}, {"text", c.text}}.dump() << '\n';
    }
}

std::vector<Chunk> read_chunks_jsonl(const std::filesystem::path& path,
                                     const Tokenizer& tokenizer) {
    std::vector<Chunk> chunks;
    for (Document& d : read_corpus_jsonl(path)) {
        Chunk c;
        c.id = std::move(d.id);
        c.tokens = tokenizer.tokenize(d.text);
        c.text = std::move(d.text);
        if (c.tokens.empty()) {
            throw ParseError(path.string() + ": chunk \"" + c.id + "\" has no tokens");
        }
        chunks.push_back(std::move(c));
    }
    return chunks;
}

}  // namespace cerag
