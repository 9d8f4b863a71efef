#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "nasaudit/core/tensor.hpp"

// Binary checkpoint container; byte layout is documented in docs/checkpoint_format.md.

namespace nasaudit {

inline constexpr std::array<char, 8> kCheckpointMagic{'N', 'A', 'S', 'A', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <std::floating_point T>
using TensorMap = std::map<std::string, Tensor<T>>;

namespace detail {

template <class U>
void put_le(std::ostream& os, U value) {
    static_assert(std::is_trivially_copyable_v<U>);
    std::array<char, sizeof(U)> bytes;
    std::memcpy(bytes.data(), &value, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    os.write(bytes.data(), sizeof(U));
}

template <class U>
U get_le(std::istream& is, const char* what) {
    std::array<char, sizeof(U)> bytes;
    const auto offset = static_cast<long long>(is.tellg());
    if (!is.read(bytes.data(), sizeof(U)))
        throw Error(std::string("checkpoint truncated reading ") + what + " at byte " +
                    std::to_string(offset));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    U value;
    std::memcpy(&value, bytes.data(), sizeof(U));
    return value;
}

}  // namespace detail

/// Writes tensors in name order. float and double store as 4- and 8-byte IEEE values.
template <std::floating_point T>
void write_checkpoint(std::ostream& os, const TensorMap<T>& tensors) {
    static_assert(sizeof(T) == 4 || sizeof(T) == 8, "checkpoints store 32- or 64-bit reals");
    os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    detail::put_le<std::uint32_t>(os, kCheckpointVersion);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(sizeof(T)));
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
        for (std::size_t d : t.shape) detail::put_le<std::uint64_t>(os, d);
        for (T v : t.data) detail::put_le<T>(os, v);
    }
}

/// Reads a checkpoint, converting stored reals to T.
template <std::floating_point T>
TensorMap<T> read_checkpoint(std::istream& is) {
    std::array<char, 8> magic{};
    if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic)
        throw Error("not a checkpoint: bad magic at byte 0");
    const auto version = detail::get_le<std::uint32_t>(is, "version");
    if (version != kCheckpointVersion)
        throw Error("unsupported checkpoint version " + std::to_string(version));
    const auto count = detail::get_le<std::uint32_t>(is, "entry count");
    TensorMap<T> out;
    for (std::uint32_t e = 0; e < count; ++e) {
        const auto len = detail::get_le<std::uint32_t>(is, "name length");
        std::string name(len, '\0');
        if (!is.read(name.data(), len)) throw Error("checkpoint truncated in entry name");
        const auto width = detail::get_le<std::uint8_t>(is, "dtype");
        const auto rank = detail::get_le<std::uint32_t>(is, "rank");
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(detail::get_le<std::uint64_t>(is, "dim"));
        Tensor<T> t(shape);
        for (auto& v : t.data) {
            if (width == 4) v = static_cast<T>(detail::get_le<float>(is, "data"));
            else if (width == 8) v = static_cast<T>(detail::get_le<double>(is, "data"));
            else throw Error("checkpoint entry '" + name + "' has unknown dtype width " + std::to_string(width));
        }
        out.emplace(std::move(name), std::move(t));
    }
    return out;
}

/// Write-to-temp then rename, so readers never observe a partial file.
inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw Error("cannot open " + tmp.string() + " for writing");
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw Error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

template <std::floating_point T>
void save_checkpoint(const std::filesystem::path& path, const TensorMap<T>& tensors) {
    std::ostringstream os(std::ios::binary);
    write_checkpoint(os, tensors);
    atomic_write(path, os.str());
}

template <std::floating_point T>
TensorMap<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open checkpoint " + path.string());
    return read_checkpoint<T>(is);
}

}  // namespace nasaudit
