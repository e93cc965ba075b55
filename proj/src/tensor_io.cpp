#include "apam/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace apam {
namespace {

constexpr std::string_view kTensorMagic = "PCT1";
constexpr std::uint32_t kMaxRank = 16;

void put_u32(std::ostream& os, std::uint32_t v) {
    const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                                static_cast<char>((v >> 16) & 0xff),
                                static_cast<char>((v >> 24) & 0xff)};
    os.write(b.data(), 4);
}

void put_f64(std::ostream& os, double d) {
    const auto v = std::bit_cast<std::uint64_t>(d);
    std::array<char, 8> b{};
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b.data(), 8);
}

std::string where(const std::string& source, std::istream& is) {
    is.clear();
    const auto pos = is.tellg();
    return source + " at byte " + (pos < 0 ? std::string("?") : std::to_string(pos));
}

std::uint32_t get_u32(std::istream& is, const std::string& source, const char* what) {
    const auto start = is.tellg();
    std::array<unsigned char, 4> b{};
    is.read(reinterpret_cast<char*>(b.data()), 4);
    if (is.gcount() != 4) {
        is.clear();
        is.seekg(start);
        throw FormatError(std::string("truncated ") + what + " in " + where(source, is));
    }
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void expect_magic(std::istream& is, std::string_view magic, const std::string& source) {
    const auto start = is.tellg();
    std::string got(magic.size(), '\0');
    is.read(got.data(), static_cast<std::streamsize>(magic.size()));
    if (static_cast<std::size_t>(is.gcount()) != magic.size() || got != magic) {
        is.clear();
        is.seekg(start);
        throw FormatError("bad magic in " + where(source, is) + ": expected \"" +
                          std::string(magic) + "\"");
    }
}

void write_tensor(std::ostream& os, const Tensor& t) {
    os.write(kTensorMagic.data(), 4);
    put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
    for (double v : t.data()) put_f64(os, v);
}

Tensor read_tensor(std::istream& is, const std::string& source) {
    expect_magic(is, kTensorMagic, source);
    const std::uint32_t rank = get_u32(is, source, "rank");
    if (rank > kMaxRank) {
        throw FormatError("implausible rank " + std::to_string(rank) + " in " + where(source, is));
    }
    Shape shape(rank);
    for (auto& d : shape) d = get_u32(is, source, "dimension");
    const std::size_t n = element_count(shape);
    std::vector<double> data(n);
    std::vector<unsigned char> buf(n * 8);
    const auto payload_start = is.tellg();
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(is.gcount()) != buf.size()) {
        const auto got = is.gcount();
        is.clear();
        is.seekg(payload_start + static_cast<std::streamoff>(got));
        throw FormatError("truncated payload (" + std::to_string(got) + " of " +
                          std::to_string(buf.size()) + " bytes) in " + where(source, is));
    }
    for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t v = 0;
        for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(buf[i * 8 + b]) << (8 * b);
        data[i] = std::bit_cast<double>(v);
    }
    return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path.string() + " for writing");
    write_tensor(os, t);
    if (!os) throw Error("write failed for " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path.string());
    return read_tensor(is, path.string());
}

void write_text_header(std::ostream& os,
                       const std::vector<std::pair<std::string, std::string>>& kv) {
    for (const auto& [k, v] : kv) os << k << '=' << v << '\n';
    os << '\n';
}

std::vector<std::pair<std::string, std::string>> read_text_header(std::istream& is,
                                                                  const std::string& source) {
    std::vector<std::pair<std::string, std::string>> kv;
    std::string line;
    while (true) {
        if (!std::getline(is, line)) throw FormatError("unterminated header in " + where(source, is));
        if (line.empty()) break;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw FormatError("header line without '=' before " + where(source, is) + ": " + line);
        }
        kv.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    return kv;
}

}  // namespace apam
