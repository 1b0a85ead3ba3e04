#include "smoelab/data.hpp"

#include <algorithm>
#include <filesystem>
#include <map>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "smoelab/config.hpp"
#include "smoelab/errors.hpp"
#include "smoelab/io.hpp"

namespace smoelab::data {

namespace {

void assign_splits(Manifest& m, std::size_t n)
{
    const std::size_t train_end = n * 90 / 100;
    const std::size_t valid_end = n * 95 / 100;
    m.train = {0, train_end};
    m.valid = {train_end, valid_end};
    m.test = {valid_end, n};
}

std::vector<std::string> split_whitespace(const std::string& line)
{
    std::vector<std::string> out;
    std::istringstream ss(line);
    std::string w;
    while (ss >> w)
        out.push_back(w);
    return out;
}

std::vector<std::uint32_t> bytes_of(std::string_view s)
{
    std::vector<std::uint32_t> out(s.size());
    for (std::size_t i = 0; i < s.size(); ++i)
        out[i] = static_cast<unsigned char>(s[i]);
    return out;
}

void put_u32(std::string& out, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t& pos)
{
    if (pos + 4 > in.size())
        throw DataError("token file truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    pos += 4;
    return v;
}

}  // namespace

std::string_view to_string(DatasetKind k)
{
    switch (k) {
    case DatasetKind::CharLm: return "char-lm";
    case DatasetKind::WordLm: return "word-lm";
    case DatasetKind::Classification: return "classification";
    }
    return "char-lm";
}

DatasetKind parse_kind(const std::string& name)
{
    for (auto k : {DatasetKind::CharLm, DatasetKind::WordLm, DatasetKind::Classification})
        if (name == to_string(k))
            return k;
    throw ConfigError("unknown dataset kind '" + name + "' (char-lm, word-lm or classification)");
}

Corpus ingest_text(const std::string& source, DatasetKind kind)
{
    if (source.empty())
        throw DataError("empty source");
    Corpus c;
    c.manifest.kind = kind;
    c.manifest.source_checksum = fnv1a64(source);

    switch (kind) {
    case DatasetKind::CharLm:
        c.tokens = bytes_of(source);
        c.manifest.vocab_size = 256;
        break;
    case DatasetKind::WordLm: {
        std::vector<std::vector<std::string>> lines;
        std::unordered_map<std::string, std::size_t> freq;
        std::istringstream in(source);
        std::string line;
        while (std::getline(in, line)) {
            auto words = split_whitespace(line);
            if (words.empty())
                continue;
            for (const auto& w : words)
                ++freq[w];
            ++freq[kEndOfLine];
            lines.push_back(std::move(words));
        }
        if (lines.empty())
            throw DataError("source has no words");
        std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
        std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            return a.second != b.second ? a.second > b.second : a.first < b.first;
        });
        if (ranked.size() > kWordVocabCap - 1)
            ranked.resize(kWordVocabCap - 1);
        std::unordered_map<std::string, std::uint32_t> ids;
        c.manifest.vocabulary.push_back(kUnknownToken);
        for (const auto& [w, n] : ranked) {
            ids.emplace(w, static_cast<std::uint32_t>(c.manifest.vocabulary.size()));
            c.manifest.vocabulary.push_back(w);
        }
        auto id_of = [&](const std::string& w) {
            auto it = ids.find(w);
            return it == ids.end() ? 0u : it->second;
        };
        for (const auto& words : lines) {
            for (const auto& w : words)
                c.tokens.push_back(id_of(w));
            c.tokens.push_back(id_of(kEndOfLine));
        }
        c.manifest.vocab_size = c.manifest.vocabulary.size();
        break;
    }
    case DatasetKind::Classification: {
        std::map<std::string, std::uint32_t> label_ids;
        std::vector<std::pair<std::string, std::string>> raw;
        std::istringstream in(source);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r')
                line.pop_back();
            if (line.empty())
                continue;
            const auto tab = line.find('\t');
            if (tab == std::string::npos || tab == 0 || tab + 1 == line.size())
                throw DataError("line " + std::to_string(lineno) + ": expected label<TAB>text");
            raw.emplace_back(line.substr(0, tab), line.substr(tab + 1));
            label_ids.emplace(raw.back().first, 0);
        }
        if (raw.empty())
            throw DataError("source has no records");
        // Labels are numbered in sorted order so the table is stable.
        for (auto& [name, id] : label_ids) {
            id = static_cast<std::uint32_t>(c.manifest.labels.size());
            c.manifest.labels.push_back(name);
        }
        for (const auto& [label, text] : raw)
            c.records.push_back({label_ids.at(label), bytes_of(text)});
        c.manifest.vocab_size = 256;
        break;
    }
    }

    const std::size_t n = kind == DatasetKind::Classification ? c.records.size() : c.tokens.size();
    assign_splits(c.manifest, n);
    c.manifest.n_tokens = c.tokens.size();
    c.manifest.n_records = c.records.size();
    c.manifest.token_checksum = fnv1a64(encode_tokens(c));
    return c;
}

std::string encode_tokens(const Corpus& corpus)
{
    std::string out;
    if (corpus.manifest.kind == DatasetKind::Classification) {
        for (const auto& r : corpus.records) {
            put_u32(out, r.label);
            put_u32(out, static_cast<std::uint32_t>(r.ids.size()));
            for (auto id : r.ids)
                put_u32(out, id);
        }
    } else {
        out.reserve(corpus.tokens.size() * 4);
        for (auto id : corpus.tokens)
            put_u32(out, id);
    }
    return out;
}

std::string manifest_to_json(const Manifest& m)
{
    using nlohmann::json;
    auto split = [](const Split& s) { return json::array({s.begin, s.end}); };
    json j;
    j["kind"] = std::string(to_string(m.kind));
    j["vocab_size"] = m.vocab_size;
    j["vocabulary"] = m.vocabulary;
    j["labels"] = m.labels;
    j["splits"] = {{"train", split(m.train)}, {"valid", split(m.valid)}, {"test", split(m.test)}};
    j["token_file"] = m.token_file;
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(m.source_checksum));
    j["source_checksum"] = buf;
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(m.token_checksum));
    j["token_checksum"] = buf;
    j["n_tokens"] = m.n_tokens;
    j["n_records"] = m.n_records;
    return j.dump(1) + "\n";
}

Manifest manifest_from_json(const std::string& text)
{
    using nlohmann::json;
    try {
        const json j = json::parse(text);
        Manifest m;
        m.kind = parse_kind(j.at("kind").get<std::string>());
        m.vocab_size = j.at("vocab_size").get<std::size_t>();
        m.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
        m.labels = j.at("labels").get<std::vector<std::string>>();
        auto split = [&](const char* name) {
            const auto& a = j.at("splits").at(name);
            return Split{a.at(0).get<std::size_t>(), a.at(1).get<std::size_t>()};
        };
        m.train = split("train");
        m.valid = split("valid");
        m.test = split("test");
        m.token_file = j.at("token_file").get<std::string>();
        m.source_checksum = std::stoull(j.at("source_checksum").get<std::string>(), nullptr, 16);
        m.token_checksum = std::stoull(j.at("token_checksum").get<std::string>(), nullptr, 16);
        m.n_tokens = j.at("n_tokens").get<std::size_t>();
        m.n_records = j.at("n_records").get<std::size_t>();
        if (m.train.end > m.valid.begin || m.valid.end > m.test.begin)
            throw DataError("manifest splits overlap");
        return m;
    } catch (const json::exception& e) {
        throw DataError(std::string("bad manifest: ") + e.what());
    }
}

std::string ingest_file(const std::string& source_path, DatasetKind kind, const std::string& out_dir)
{
    Corpus c = ingest_text(read_file(source_path), kind);
    c.manifest.token_file = "tokens.bin";
    const std::filesystem::path dir(out_dir);
    write_file_atomic((dir / "tokens.bin").string(), encode_tokens(c));
    const std::string manifest_path = (dir / "manifest.json").string();
    write_file_atomic(manifest_path, manifest_to_json(c.manifest));
    return manifest_path;
}

Corpus load_corpus(const std::string& manifest_path)
{
    Corpus c;
    c.manifest = manifest_from_json(read_file(manifest_path));
    const auto token_path = std::filesystem::path(manifest_path).parent_path() / c.manifest.token_file;
    const std::string bytes = read_file(token_path.string());
    if (fnv1a64(bytes) != c.manifest.token_checksum)
        throw DataError("token file checksum mismatch for " + token_path.string());
    std::size_t pos = 0;
    if (c.manifest.kind == DatasetKind::Classification) {
        while (pos < bytes.size()) {
            Record r;
            r.label = get_u32(bytes, pos);
            const std::uint32_t len = get_u32(bytes, pos);
            r.ids.resize(len);
            for (auto& id : r.ids)
                id = get_u32(bytes, pos);
            c.records.push_back(std::move(r));
        }
    } else {
        c.tokens.resize(bytes.size() / 4);
        for (auto& id : c.tokens)
            id = get_u32(bytes, pos);
    }
    if (c.tokens.size() != c.manifest.n_tokens || c.records.size() != c.manifest.n_records)
        throw DataError("token file does not match manifest counts");
    return c;
}

}  // namespace smoelab::data
