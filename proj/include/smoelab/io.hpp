#pragma once

#include <string>

namespace smoelab {

/// Writes to a sibling temp file, then renames over `path`.
void write_file_atomic(const std::string& path, const std::string& contents);

/// Throws DataError if the file cannot be read.
std::string read_file(const std::string& path);

}  // namespace smoelab
