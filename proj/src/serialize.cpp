#include "mrham/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mrham {

namespace {

template <typename U>
void put_le(std::ostream& os, U v) {
    std::array<char, sizeof(U)> b{};
    for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<char>((std::uint64_t(v) >> (8 * i)) & 0xff);
    os.write(b.data(), b.size());
}

template <typename U>
U get_le(std::istream& is) {
    std::array<unsigned char, sizeof(U)> b{};
    is.read(reinterpret_cast<char*>(b.data()), b.size());
    if (!is) throw std::runtime_error("truncated tensor stream");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return static_cast<U>(v);
}

void put_magic(std::ostream& os, const char* magic) { os.write(magic, 4); }

void expect_magic(std::istream& is, const char* magic) {
    char got[4];
    is.read(got, 4);
    if (!is || std::memcmp(got, magic, 4) != 0)
        throw std::runtime_error(std::string("bad magic, expected ") + std::string(magic, 4));
    const auto version = get_le<std::uint32_t>(is);
    if (version != kFormatVersion) throw std::runtime_error("unsupported format version " + std::to_string(version));
}

void put_body(std::ostream& os, const Tensor<float>& t) {
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (std::int64_t i = 0; i < t.numel(); ++i) put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(t[i]));
}

Tensor<float> get_body(std::istream& is) {
    const auto rank = get_le<std::uint32_t>(is);
    if (rank == 0 || rank > 8) throw std::runtime_error("implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) {
        const auto v = get_le<std::uint32_t>(is);
        if (v == 0 || v > (1u << 30)) throw std::runtime_error("implausible tensor dim " + std::to_string(v));
        d = static_cast<int>(v);
    }
    Array<float> values(shape_numel(shape));
    for (Eigen::Index i = 0; i < values.size(); ++i) values[i] = std::bit_cast<float>(get_le<std::uint32_t>(is));
    return Tensor<float>(std::move(shape), std::move(values));
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    return os;
}

std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    return is;
}

}  // namespace

void write_snapshot(std::ostream& os, const Tensor<float>& t) {
    put_magic(os, "MRHT");
    put_le<std::uint32_t>(os, kFormatVersion);
    put_body(os, t);
}

Tensor<float> read_snapshot(std::istream& is) {
    expect_magic(is, "MRHT");
    return get_body(is);
}

void save_snapshot(const std::filesystem::path& path, const Tensor<float>& t) {
    auto os = open_out(path);
    write_snapshot(os, t);
}

Tensor<float> load_snapshot(const std::filesystem::path& path) {
    auto is = open_in(path);
    return read_snapshot(is);
}

void write_checkpoint(std::ostream& os, const NamedTensors& tensors) {
    put_magic(os, "MRHW");
    put_le<std::uint32_t>(os, kFormatVersion);
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        if (name.size() > 0xffff) throw std::invalid_argument("tensor name too long: " + name.substr(0, 32));
        put_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_body(os, t);
    }
}

NamedTensors read_checkpoint(std::istream& is) {
    expect_magic(is, "MRHW");
    const auto count = get_le<std::uint32_t>(is);
    NamedTensors out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = get_le<std::uint16_t>(is);
        std::string name(len, '\0');
        is.read(name.data(), len);
        if (!is) throw std::runtime_error("truncated checkpoint name");
        out.emplace_back(std::move(name), get_body(is));
    }
    return out;
}

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
    auto os = open_out(path);
    write_checkpoint(os, tensors);
    if (!os) throw std::runtime_error("failed writing " + path.string());
}

NamedTensors load_checkpoint(const std::filesystem::path& path) {
    auto is = open_in(path);
    return read_checkpoint(is);
}

}  // namespace mrham
