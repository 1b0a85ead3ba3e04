#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace smoelab::data {

enum class DatasetKind { CharLm, WordLm, Classification };

std::string_view to_string(DatasetKind k);
/// Accepts "char-lm", "word-lm", "classification"; throws ConfigError otherwise.
DatasetKind parse_kind(const std::string& name);

/// Half-open ranges. For language-model data they index tokens; for
/// classification data they index records.
struct Split {
    std::size_t begin = 0, end = 0;
    std::size_t size() const { return end - begin; }
};

struct Manifest {
    DatasetKind kind = DatasetKind::CharLm;
    std::size_t vocab_size = 0;
    std::vector<std::string> vocabulary;  // word-lm only; id order
    std::vector<std::string> labels;      // classification only; id order
    Split train, valid, test;
    std::string token_file;  // relative to the manifest's directory
    std::uint64_t source_checksum = 0;
    std::uint64_t token_checksum = 0;
    std::size_t n_tokens = 0;
    std::size_t n_records = 0;
};

struct Record {
    std::uint32_t label;
    std::vector<std::uint32_t> ids;
};

/// In-memory result of ingesting one source.
struct Corpus {
    Manifest manifest;
    std::vector<std::uint32_t> tokens;  // LM kinds
    std::vector<Record> records;        // classification
};

inline constexpr std::size_t kWordVocabCap = 50000;
inline constexpr const char* kUnknownToken = "<unk>";
inline constexpr const char* kEndOfLine = "<eos>";

/// Tokenizes `source` and assigns 90/5/5 train/valid/test splits in order.
/// Classification text is encoded as bytes so byte-level trunks transfer.
/// Throws DataError on empty input or malformed classification lines.
Corpus ingest_text(const std::string& source, DatasetKind kind);

/// Ingests a file and writes `<out_dir>/tokens.bin` and
/// `<out_dir>/manifest.json`. Returns the manifest path.
std::string ingest_file(const std::string& source_path, DatasetKind kind, const std::string& out_dir);

/// Serialized token file: u32 LE ids for LM kinds; for classification each
/// record is u32 label, u32 length, then the ids.
std::string encode_tokens(const Corpus& corpus);

std::string manifest_to_json(const Manifest& m);
Manifest manifest_from_json(const std::string& text);

/// Loads and verifies checksums. Throws DataError on mismatch.
Corpus load_corpus(const std::string& manifest_path);

inline std::span<const std::uint32_t> split_tokens(const Corpus& c, const Split& s)
{
    return std::span<const std::uint32_t>(c.tokens).subspan(s.begin, s.size());
}

}  // namespace smoelab::data
