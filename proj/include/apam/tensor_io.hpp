#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "apam/tensor.hpp"

namespace apam {

class FormatError : public Error {
public:
    using Error::Error;
};

/// PCT1 record: "PCT1", u32 rank, rank x u32 dims, then the values as
/// little-endian IEEE-754 doubles in row-major order.
void write_tensor(std::ostream& os, const Tensor& t);

/// Reads one PCT1 record. `source` names the stream in error messages, which
/// also carry the byte offset of the failure.
Tensor read_tensor(std::istream& is, const std::string& source);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

/// Reads `magic.size()` bytes and throws FormatError unless they match.
void expect_magic(std::istream& is, std::string_view magic, const std::string& source);

/// Text header of key=value lines terminated by a blank line.
void write_text_header(std::ostream& os, const std::vector<std::pair<std::string, std::string>>& kv);
std::vector<std::pair<std::string, std::string>> read_text_header(std::istream& is,
                                                                  const std::string& source);

}  // namespace apam
