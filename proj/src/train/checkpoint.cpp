#include "smoelab/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "smoelab/errors.hpp"
#include "smoelab/io.hpp"

namespace smoelab {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void put_u64(std::string& out, std::uint64_t v)
{
    char buf[8];
    std::memcpy(buf, &v, 8);
    out.append(buf, 8);
}

class Reader {
public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}

    const char* take(std::size_t n)
    {
        if (n > bytes_.size() - pos_)
            throw DataError("checkpoint truncated");
        const char* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::uint64_t u64()
    {
        std::uint64_t v;
        std::memcpy(&v, take(8), 8);
        return v;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

const TensorRecord* Checkpoint::find(const std::string& name) const
{
    for (const auto& r : records)
        if (r.name == name)
            return &r;
    return nullptr;
}

std::string Checkpoint::serialize() const
{
    std::string out(kCheckpointMagic, 8);
    put_u64(out, config_text.size());
    out += config_text;
    for (const auto& r : records) {
        put_u64(out, r.name.size());
        out += r.name;
        put_u64(out, r.shape.size());
        for (auto d : r.shape)
            put_u64(out, d);
        out.push_back(static_cast<char>(r.flags));
        const std::size_t n = r.values.size();
        const std::size_t at = out.size();
        out.resize(at + 8 * n);
        std::memcpy(out.data() + at, r.values.data(), 8 * n);
    }
    return out;
}

Checkpoint Checkpoint::deserialize(const std::string& bytes)
{
    Reader in(bytes);
    if (std::memcmp(in.take(8), kCheckpointMagic, 8) != 0)
        throw DataError("not a checkpoint (bad magic)");
    Checkpoint c;
    const std::uint64_t text_len = in.u64();
    c.config_text.assign(in.take(text_len), text_len);
    while (!in.done()) {
        TensorRecord r;
        const std::uint64_t name_len = in.u64();
        r.name.assign(in.take(name_len), name_len);
        const std::uint64_t rank = in.u64();
        if (rank > 8)
            throw DataError("checkpoint record " + r.name + " has implausible rank");
        std::size_t count = 1;
        for (std::uint64_t i = 0; i < rank; ++i) {
            r.shape.push_back(in.u64());
            count *= r.shape.back();
        }
        r.flags = static_cast<std::uint8_t>(*in.take(1));
        r.values.resize(count);
        std::memcpy(r.values.data(), in.take(8 * count), 8 * count);
        c.records.push_back(std::move(r));
    }
    return c;
}

void Checkpoint::save(const std::string& path) const
{
    write_file_atomic(path, serialize());
}

Checkpoint Checkpoint::load(const std::string& path)
{
    return deserialize(read_file(path));
}

}  // namespace smoelab
