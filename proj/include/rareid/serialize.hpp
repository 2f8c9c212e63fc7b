#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "rareid/tensor.hpp"

// Tensor record: "TNSR", u32 rank, rank × u64 extents, float64 payload, all
// little-endian.

namespace rareid {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

template <typename U>
void put_le(std::ostream& os, U value) {
    std::array<char, sizeof(U)> bytes{};
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
    os.write(bytes.data(), bytes.size());
}

template <typename U>
U get_le(std::istream& is) {
    std::array<unsigned char, sizeof(U)> bytes{};
    is.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
    if (!is) throw FormatError("truncated tensor record");
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
    return value;
}

inline constexpr std::uint32_t kMaxRank = 16;

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
    os.write("TNSR", 4);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) detail::put_le<std::uint64_t>(os, e);
    for (double v : t.data()) detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
    if (!os) throw std::runtime_error("failed writing tensor record");
}

inline Tensor read_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "TNSR", 4) != 0) throw FormatError("bad tensor magic");
    const auto rank = detail::get_le<std::uint32_t>(is);
    if (rank == 0 || rank > detail::kMaxRank) throw FormatError("bad tensor rank " + std::to_string(rank));
    Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& e : shape) {
        const auto extent = detail::get_le<std::uint64_t>(is);
        if (extent == 0 || extent > (std::uint64_t{1} << 32)) throw FormatError("bad tensor extent");
        count *= extent;
        if (count > (std::uint64_t{1} << 34)) throw FormatError("tensor record too large");
        e = static_cast<std::size_t>(extent);
    }
    std::vector<double> values(static_cast<std::size_t>(count));
    for (auto& v : values) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(is));
    return Tensor(std::move(shape), std::move(values));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    write_tensor(os, t);
}

inline Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    return read_tensor(is);
}

}  // namespace rareid
