#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "smoelab/tensor.hpp"

namespace smoelab {

inline constexpr char kCheckpointMagic[8] = {'S', 'M', 'O', 'E', 'L', 'A', 'B', '1'};

enum RecordFlags : std::uint8_t {
    kTrainable = 1u << 0,
    kOptimizerMoment = 1u << 1,
};

struct TensorRecord {
    std::string name;
    diff::Shape shape;
    std::uint8_t flags = 0;
    std::vector<double> values;
};

/// Binary layout: magic, u64 length + config text, then records of
/// u64 name length, name, u64 rank, u64 dims, u8 flags, f64 values.
/// Integers and floats are little-endian.
struct Checkpoint {
    std::string config_text;
    std::vector<TensorRecord> records;

    const TensorRecord* find(const std::string& name) const;

    std::string serialize() const;
    /// Throws DataError on a bad magic or truncated input.
    static Checkpoint deserialize(const std::string& bytes);

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

}  // namespace smoelab
