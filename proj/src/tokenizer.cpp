#include "cerag/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <limits>

#include "cerag/errors.hpp"
#include "json.hpp"

namespace cerag {

namespace {

bool is_alnum(unsigned char c) {
    return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
}

std::uint64_t pack(int a, int b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
}

// Pre-tokenization: a piece is either an alphanumeric run (with one leading
// space absorbed, GPT style) or a single byte. Concatenating pieces
// reproduces the input.
std::vector<std::string_view> split_pieces(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    const std::size_t n = s.size();
    while (i < n) {
        const std::size_t start = i;
        if (s[i] == ' ' && i + 1 < n && is_alnum(static_cast<unsigned char>(s[i + 1]))) {
            i += 2;
        } else if (is_alnum(static_cast<unsigned char>(s[i]))) {
            ++i;
        } else {
            ++i;
            out.push_back(s.substr(start, i - start));
            continue;
        }
        while (i < n && is_alnum(static_cast<unsigned char>(s[i]))) ++i;
        out.push_back(s.substr(start, i - start));
    }
    return out;
}

}  // namespace

Tokenizer::Tokenizer() { set_merges({}); }

void Tokenizer::set_merges(std::vector<std::pair<int, int>> merges) {
    merges_ = std::move(merges);
    expansions_.assign(tok::kReservedCount, std::string());
    for (int c = 0; c < 256; ++c) expansions_.push_back(std::string(1, static_cast<char>(c)));
    ranks_.clear();
    for (std::size_t r = 0; r < merges_.size(); ++r) {
        const auto [a, b] = merges_[r];
        const int limit = tok::kFirstMerged + static_cast<int>(r);
        if (a < tok::kByteBase || a >= limit || b < tok::kByteBase || b >= limit) {
            throw ParseError("tokenizer merge " + std::to_string(r) + " references invalid id");
        }
        expansions_.push_back(expansions_[a] + expansions_[b]);
        ranks_.emplace(pack(a, b), static_cast<int>(r));
    }
}

const std::string& Tokenizer::expansion(int id) const {
    if (id < 0 || id >= vocab_size()) {
        throw ParseError("token id " + std::to_string(id) + " out of range");
    }
    return expansions_[static_cast<std::size_t>(id)];
}

std::vector<int> Tokenizer::encode_piece(std::string_view piece) const {
    std::vector<int> toks;
    toks.reserve(piece.size());
    for (unsigned char c : piece) toks.push_back(tok::kByteBase + c);
    while (toks.size() >= 2 && !ranks_.empty()) {
        int best = std::numeric_limits<int>::max();
        for (std::size_t i = 0; i + 1 < toks.size(); ++i) {
            auto it = ranks_.find(pack(toks[i], toks[i + 1]));
            if (it != ranks_.end() && it->second < best) best = it->second;
        }
        if (best == std::numeric_limits<int>::max()) break;
        const auto [a, b] = merges_[static_cast<std::size_t>(best)];
        std::vector<int> out;
        out.reserve(toks.size());
        for (std::size_t i = 0; i < toks.size();) {
            if (i + 1 < toks.size() && toks[i] == a && toks[i + 1] == b) {
                out.push_back(tok::kFirstMerged + best);
                i += 2;
            } else {
                out.push_back(toks[i]);
                ++i;
            }
        }
        toks = std::move(out);
    }
    return toks;
}

std::vector<int> Tokenizer::tokenize(std::string_view text) const {
    std::vector<int> out;
    for (std::string_view piece : split_pieces(text)) {
        for (int id : encode_piece(piece)) out.push_back(id);
    }
    return out;
}

std::string Tokenizer::detokenize(std::span<const int> ids) const {
    // Reserved ids and ids beyond this vocabulary render as nothing. A model
    // head may be wider than the trained merge table, so unknown ids are a
    // display concern here, not an error.
    std::string out;
    for (int id : ids) {
        if (id < 0 || id >= vocab_size()) continue;
        out += expansions_[static_cast<std::size_t>(id)];
    }
    return out;
}

void Tokenizer::save(const std::filesystem::path& path) const {
    nlohmann::json j;
    j["format"] = "cerag-tokenizer";
    j["version"] = 1;
    j["merges"] = nlohmann::json::array();
    for (const auto& [a, b] : merges_) j["merges"].push_back({a, b});
    std::ofstream f(path);
    if (!f) throw IoError("cannot write tokenizer file " + path.string());
    f << j.dump(1, '\t') << '\n';
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open tokenizer file " + path.string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("tokenizer file " + path.string() + ": " + e.what());
    }
    if (!j.is_object() || j.value("format", "") != "cerag-tokenizer") {
        throw ParseError("tokenizer file " + path.string() + ": unrecognized format");
    }
    std::vector<std::pair<int, int>> merges;
    for (const auto& m : j.at("merges")) {
        if (!m.is_array() || m.size() != 2) {
            throw ParseError("tokenizer file " + path.string() + ": malformed merge entry");
        }
        merges.emplace_back(m[0].get<int>(), m[1].get<int>());
    }
    Tokenizer t;
    t.set_merges(std::move(merges));
    return t;
}

Tokenizer build_tokenizer(const std::vector<std::string>& texts, int vocab_size,
                          std::uint64_t seed) {
    (void)seed;  // training is exact counting; no randomness consumed
    if (texts.empty()) throw ConfigError("tokenizer training corpus is empty");
    if (vocab_size < tok::kFirstMerged) {
        throw ConfigError("vocab_size " + std::to_string(vocab_size) + " below minimum " +
                          std::to_string(tok::kFirstMerged));
    }

    std::unordered_map<std::string, std::int64_t> piece_counts;
    for (const std::string& text : texts) {
        for (std::string_view piece : split_pieces(text)) ++piece_counts[std::string(piece)];
    }
    std::vector<std::pair<std::string, std::int64_t>> sorted(piece_counts.begin(),
                                                             piece_counts.end());
    std::sort(sorted.begin(), sorted.end());

    struct Piece {
        std::vector<int> toks;
        std::int64_t count;
    };
    std::vector<Piece> pieces;
    pieces.reserve(sorted.size());
    for (const auto& [text, count] : sorted) {
        Piece p;
        p.count = count;
        p.toks.reserve(text.size());
        for (unsigned char c : text) p.toks.push_back(tok::kByteBase + c);
        pieces.push_back(std::move(p));
    }

    std::unordered_map<std::uint64_t, std::int64_t> pair_counts;
    std::unordered_map<std::uint64_t, std::vector<int>> pair_pieces;
    auto count_pairs = [&](int idx, int sign) {
        const Piece& p = pieces[static_cast<std::size_t>(idx)];
        for (std::size_t i = 0; i + 1 < p.toks.size(); ++i) {
            const std::uint64_t k = pack(p.toks[i], p.toks[i + 1]);
            pair_counts[k] += sign * p.count;
            if (sign > 0) pair_pieces[k].push_back(idx);
        }
    };
    for (int i = 0; i < static_cast<int>(pieces.size()); ++i) count_pairs(i, +1);

    std::vector<std::pair<int, int>> merges;
    int next_id = tok::kFirstMerged;
    while (next_id < vocab_size) {
        std::uint64_t best_key = 0;
        std::int64_t best_count = 0;
        for (const auto& [key, count] : pair_counts) {
            if (count > best_count || (count == best_count && count > 0 && key < best_key)) {
                best_key = key;
                best_count = count;
            }
        }
        if (best_count < 2) break;
        const int a = static_cast<int>(best_key >> 32);
        const int b = static_cast<int>(static_cast<std::uint32_t>(best_key));
        merges.emplace_back(a, b);

        auto hits = std::move(pair_pieces[best_key]);
        pair_pieces.erase(best_key);
        std::sort(hits.begin(), hits.end());
        hits.erase(std::unique(hits.begin(), hits.end()), hits.end());
        for (int idx : hits) {
            Piece& p = pieces[static_cast<std::size_t>(idx)];
            bool present = false;
            for (std::size_t i = 0; i + 1 < p.toks.size(); ++i) {
                if (p.toks[i] == a && p.toks[i + 1] == b) {
                    present = true;
                    break;
                }
            }
            if (!present) continue;  // stale occurrence entry
            count_pairs(idx, -1);
            std::vector<int> out;
            out.reserve(p.toks.size());
            for (std::size_t i = 0; i < p.toks.size();) {
                if (i + 1 < p.toks.size() && p.toks[i] == a && p.toks[i + 1] == b) {
                    out.push_back(next_id);
                    i += 2;
                } else {
                    out.push_back(p.toks[i]);
                    ++i;
                }
            }
            p.toks = std::move(out);
            count_pairs(idx, +1);
        }
        ++next_id;
    }

    Tokenizer t;
    t.set_merges(std::move(merges));
    return t;
}

std::vector<std::string> words_lower(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (is_alnum(c)) {
            cur += static_cast<char>(c >= 'A' && c <= 'Z' ? c - 'A' + 'a' : c);
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

}  // namespace cerag
