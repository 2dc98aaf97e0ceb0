#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cerag/tokenizer.hpp"

namespace cerag {

struct Document {
    std::string id;
    std::string text;
};

struct Chunk {
    std::string id;           // "<doc_id>#<chunk_index>"
    std::vector<int> tokens;  // 1..chunk_size ids when produced by chunk_corpus
    std::string text;         // the bytes these tokens decode to
};

struct QAExample {
    std::string id;
    std::string question;
    std::vector<std::string> answers;  // non-empty
};

// Splits each document's token stream into consecutive runs of chunk_size
// tokens (last run per document may be shorter). Chunks never cross document
// boundaries. Chunk text is the detokenization of its token run, so chunk
// texts concatenate back to the document text.
std::vector<Chunk> chunk_corpus(const std::vector<Document>& docs, const Tokenizer& tokenizer,
                                int chunk_size);

struct QALoadResult {
    std::vector<QAExample> examples;
    int dropped = 0;  // examples failing a length filter
};

// Reads QA JSONL and drops examples whose question exceeds max_question_tokens
// or whose any answer exceeds max_answer_tokens (inclusive bounds retained).
QALoadResult load_qa(const std::filesystem::path& path, const Tokenizer& tokenizer,
                     int max_question_tokens = 128, int max_answer_tokens = 64);

struct SyntheticData {
    std::vector<Document> documents;
    std::vector<QAExample> questions;
};

// Deterministic fact corpus: each entity gets one document containing one
// fact sentence per attribute ("The <attribute> of <entity> is <value>.")
// shuffled among filler sentences. Values are fixed-length nonsense words,
// each appearing in exactly one document. Questions ask for a random subset
// of (entity, attribute) pairs; answers are the single stored value.
// Throws ConfigError if n_questions exceeds the number of distinct pairs.
SyntheticData gen_synthetic(int n_entities, int n_questions, std::uint64_t seed);

std::vector<Document> read_corpus_jsonl(const std::filesystem::path& path);
void write_corpus_jsonl(const std::filesystem::path& path, const std::vector<Document>& docs);
std::vector<QAExample> read_qa_jsonl(const std::filesystem::path& path);
void write_qa_jsonl(const std::filesystem::path& path, const std::vector<QAExample>& examples);

// Chunked-corpus JSONL ({"id", "text"} per line). Loading re-tokenizes each
// line's text; token counts can drift by a token or two from the original
// stream slicing when a chunk boundary split a merge, which downstream
// consumers tolerate.
void write_chunks_jsonl(const std::filesystem::path& path, const std::vector<Chunk>& chunks);
std::vector<Chunk> read_chunks_jsonl(const std::filesystem::path& path,
                                     const Tokenizer& tokenizer);

}  // namespace cerag
