#include "smoelab/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "smoelab/errors.hpp"

namespace smoelab {

namespace {

std::string trim(std::string_view s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos)
        return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& value)
{
    T out{};
    const char* end = value.data() + value.size();
    auto [ptr, ec] = std::from_chars(value.data(), end, out);
    if (ec != std::errc() || ptr != end)
        throw ConfigError("bad value for " + key + ": '" + value + "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& value)
{
    if (value == "true" || value == "1")
        return true;
    if (value == "false" || value == "0")
        return false;
    throw ConfigError("bad value for " + key + ": '" + value + "' (expected true or false)");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& value)
{
    std::vector<std::size_t> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ','))
        out.push_back(parse_number<std::size_t>(key, trim(item)));
    if (out.empty())
        throw ConfigError("empty list for " + key);
    return out;
}

std::string format_double(double v)
{
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    (void)ec;
    return std::string(buf, ptr);
}

std::string_view shape_name(moe::ScheduleShape s)
{
    switch (s) {
    case moe::ScheduleShape::Linear: return "linear";
    case moe::ScheduleShape::Doubling: return "doubling";
    case moe::ScheduleShape::Fixed: return "fixed";
    }
    return "linear";
}

moe::ScheduleShape parse_shape(const std::string& key, const std::string& v)
{
    if (v == "linear")
        return moe::ScheduleShape::Linear;
    if (v == "doubling")
        return moe::ScheduleShape::Doubling;
    if (v == "fixed")
        return moe::ScheduleShape::Fixed;
    throw ConfigError("bad value for " + key + ": '" + v + "' (linear, doubling or fixed)");
}

struct Field {
    std::string key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

#define SIZE_FIELD(KEY, MEMBER)                                                              \
    Field{KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = parse_number<std::size_t>(KEY, v); }, \
          [](const RunConfig& c) { return std::to_string(c.MEMBER); }}
#define U64_FIELD(KEY, MEMBER)                                                               \
    Field{KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = parse_number<std::uint64_t>(KEY, v); }, \
          [](const RunConfig& c) { return std::to_string(c.MEMBER); }}
#define DOUBLE_FIELD(KEY, MEMBER)                                                            \
    Field{KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = parse_number<double>(KEY, v); }, \
          [](const RunConfig& c) { return format_double(c.MEMBER); }}
#define BOOL_FIELD(KEY, MEMBER)                                                              \
    Field{KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = parse_bool(KEY, v); },    \
          [](const RunConfig& c) { return std::string(c.MEMBER ? "true" : "false"); }}
#define STRING_FIELD(KEY, MEMBER)                                                            \
    Field{KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = v; },                     \
          [](const RunConfig& c) { return c.MEMBER; }}

const std::vector<Field>& fields()
{
    static const std::vector<Field> table = {
        SIZE_FIELD("model.layers", model.n_layers),
        SIZE_FIELD("model.d_model", model.d_model),
        SIZE_FIELD("model.heads", model.n_heads),
        SIZE_FIELD("model.inner_dim", model.inner_dim),
        SIZE_FIELD("model.experts", model.n_experts),
        DOUBLE_FIELD("model.dropout", model.dropout),
        SIZE_FIELD("model.vocab_size", model.vocab_size),
        SIZE_FIELD("model.max_seq_len", model.max_seq_len),
        Field{"model.strategy",
              [](RunConfig& c, const std::string& v) { c.model.strategy = routing::parse_strategy(v); },
              [](const RunConfig& c) { return std::string(routing::to_string(c.model.strategy)); }},
        U64_FIELD("model.seed", model.seed),
        SIZE_FIELD("model.router_embedding_dim", model.router_embedding_dim),
        SIZE_FIELD("model.hypernet_inner_dim", model.hypernet_inner_dim),
        BOOL_FIELD("model.renormalize_gates", model.renormalize_gates),
        Field{"schedule.shape",
              [](RunConfig& c, const std::string& v) { c.schedule.shape = parse_shape("schedule.shape", v); },
              [](const RunConfig& c) { return std::string(shape_name(c.schedule.shape)); }},
        SIZE_FIELD("schedule.k_start", schedule.k_start),
        SIZE_FIELD("schedule.k_end", schedule.k_end),
        U64_FIELD("schedule.total_steps", schedule.total_steps),
        DOUBLE_FIELD("train.lr", train.lr),
        SIZE_FIELD("train.batch_size", train.batch_size),
        SIZE_FIELD("train.seq_len", train.seq_len),
        U64_FIELD("train.iterations", train.iterations),
        DOUBLE_FIELD("train.clip_norm", train.clip_norm),
        BOOL_FIELD("train.cosine_decay", train.cosine_decay),
        U64_FIELD("train.eval_every", train.eval_every),
        U64_FIELD("train.checkpoint_every", train.checkpoint_every),
        SIZE_FIELD("train.eval_batches", train.eval_batches),
        Field{"train.eval_ks",
              [](RunConfig& c, const std::string& v) { c.train.eval_ks = parse_list("train.eval_ks", v); },
              [](const RunConfig& c) {
                  std::string s;
                  for (std::size_t i = 0; i < c.train.eval_ks.size(); ++i)
                      s += (i ? "," : "") + std::to_string(c.train.eval_ks[i]);
                  return s;
              }},
        DOUBLE_FIELD("train.thor_weight", train.thor_weight),
        DOUBLE_FIELD("finetune.lr", finetune.lr),
        SIZE_FIELD("finetune.batch_size", finetune.batch_size),
        SIZE_FIELD("finetune.epochs", finetune.epochs),
        SIZE_FIELD("finetune.max_len", finetune.max_len),
        STRING_FIELD("data.manifest", data.manifest),
        STRING_FIELD("data.pretrained", data.pretrained),
    };
    return table;
}

const Field& find_field(const std::string& key)
{
    for (const auto& f : fields())
        if (f.key == key)
            return f;
    std::string msg = "unknown config key '" + key + "'; valid keys:";
    for (const auto& f : fields())
        msg += "\n  " + f.key;
    msg += "\n  run.preset";
    throw ConfigError(msg);
}

}  // namespace

void RunConfig::validate() const
{
    model.validate();
    const std::size_t n = model.n_experts;
    if (!(train.lr > 0) || !(finetune.lr > 0))
        throw ConfigError("learning rates must be positive");
    if (train.batch_size == 0 || finetune.batch_size == 0)
        throw ConfigError("batch sizes must be positive");
    if (train.seq_len == 0 || train.seq_len > model.max_seq_len)
        throw ConfigError("train.seq_len must be in [1, model.max_seq_len]");
    if (finetune.max_len == 0 || finetune.max_len > model.max_seq_len)
        throw ConfigError("finetune.max_len must be in [1, model.max_seq_len]");
    if (train.clip_norm < 0)
        throw ConfigError("train.clip_norm must be non-negative");
    if (train.thor_weight < 0)
        throw ConfigError("train.thor_weight must be non-negative");
    for (std::size_t k : train.eval_ks)
        if (k < 1 || k > n)
            throw ConfigError("train.eval_ks entry " + std::to_string(k) + " outside [1, " +
                              std::to_string(n) + "]");
    const std::size_t k_end = schedule.k_end ? schedule.k_end : n;
    if (schedule.k_start < 1 || schedule.k_start > k_end || k_end > n)
        throw ConfigError("schedule needs 1 <= k_start <= k_end <= model.experts");
}

moe::KSchedule RunConfig::k_schedule() const
{
    moe::KSchedule s;
    s.k_start = schedule.k_start;
    s.k_end = schedule.k_end ? schedule.k_end : model.n_experts;
    s.total_steps = schedule.total_steps ? schedule.total_steps : train.iterations;
    s.shape = schedule.shape;
    if (s.shape == moe::ScheduleShape::Fixed)
        s.k_start = s.k_end;
    return s;
}

std::string RunConfig::canonical_text() const
{
    std::string out, section;
    for (const auto& f : fields()) {
        const std::string sec = f.key.substr(0, f.key.find('.'));
        if (sec != section) {
            out += (section.empty() ? "" : "\n") + ("[" + sec + "]\n");
            section = sec;
        }
        out += f.key.substr(sec.size() + 1) + " = " + f.get(*this) + "\n";
    }
    return out;
}

std::uint64_t RunConfig::hash() const
{
    return fnv1a64(canonical_text());
}

std::string RunConfig::hash_hex() const
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash()));
    return buf;
}

RunConfig preset(const std::string& name)
{
    RunConfig c;
    if (name == "full")
        return c;
    if (name == "desk") {
        c.model.n_layers = 2;
        c.model.d_model = 64;
        c.model.n_heads = 4;
        c.model.inner_dim = 128;
        c.model.n_experts = 8;
        c.model.max_seq_len = 128;
        c.train.seq_len = 128;
        c.train.batch_size = 8;
        c.train.iterations = 2000;
        c.train.eval_ks = {1, 2, 4, 8};
        c.finetune.max_len = 128;
        return c;
    }
    throw ConfigError("unknown preset '" + name + "' (full or desk)");
}

std::vector<std::string> preset_names()
{
    return {"full", "desk"};
}

std::vector<std::string> config_keys()
{
    std::vector<std::string> out;
    for (const auto& f : fields())
        out.push_back(f.key);
    return out;
}

void set_key(RunConfig& config, const std::string& key, const std::string& value)
{
    find_field(key).set(config, value);
}

std::string get_key(const RunConfig& config, const std::string& key)
{
    return find_field(key).get(config);
}

std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text)
{
    std::vector<std::pair<std::string, std::string>> out;
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash_pos = line.find('#');
        std::string s = trim(hash_pos == std::string::npos ? line : line.substr(0, hash_pos));
        if (s.empty())
            continue;
        if (s.front() == '[') {
            if (s.back() != ']')
                throw ConfigError("line " + std::to_string(lineno) + ": unterminated section header");
            section = trim(std::string_view(s).substr(1, s.size() - 2));
            continue;
        }
        const auto eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(std::string_view(s).substr(0, eq));
        if (!section.empty())
            key = section + "." + key;
        out.emplace_back(key, trim(std::string_view(s).substr(eq + 1)));
    }
    return out;
}

RunConfig parse_config(const std::string& text, const std::vector<std::string>& overrides)
{
    auto pairs = parse_key_values(text);
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override '" + o + "' is not key=value");
        pairs.emplace_back(trim(std::string_view(o).substr(0, eq)), trim(std::string_view(o).substr(eq + 1)));
    }
    RunConfig config;
    for (const auto& [k, v] : pairs)
        if (k == "run.preset")
            config = preset(v);
    for (const auto& [k, v] : pairs)
        if (k != "run.preset")
            set_key(config, k, v);
    config.validate();
    return config;
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw ConfigError("cannot read config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), overrides);
}

std::uint64_t fnv1a64(const void* data, std::size_t size)
{
    std::uint64_t h = 0xcbf29ce484222325ull;
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::uint64_t fnv1a64(const std::string& text)
{
    return fnv1a64(text.data(), text.size());
}

}  // namespace smoelab
