#pragma once

// SHA-256 digests and little-endian blob I/O shared by the weight, tape,
// dataset and manifest formats.

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "restitch/error.hpp"
#include "restitch/tensor.hpp"

namespace restitch {

static_assert(std::endian::native == std::endian::little,
              "blob formats are little-endian; big-endian hosts need byte swapping");

inline std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
        EVP_DigestFinal_ex(ctx.get(), md, &len) != 1) {
        fail(ErrorKind::io, "sha256 computation failed");
    }
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return os.str();
}

inline std::string sha256_hex(std::string_view s) {
    return sha256_hex(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

/// Raw little-endian encoding of the tensor in its own dtype.
inline std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
    std::vector<std::uint8_t> out(t.size() * dtype_size(t.dtype()));
    if (t.dtype() == DType::f32) {
        for (std::size_t i = 0; i < t.size(); ++i) {
            const float f = static_cast<float>(t[i]);
            std::memcpy(out.data() + 4 * i, &f, 4);
        }
    } else {
        std::memcpy(out.data(), t.data().data(), out.size());
    }
    return out;
}

inline Tensor decode_tensor(std::span<const std::uint8_t> bytes, const Shape& shape, DType dtype) {
    const std::size_t n = numel(shape);
    if (bytes.size() != n * dtype_size(dtype)) {
        fail(ErrorKind::corruption, "blob holds " + std::to_string(bytes.size()) + " bytes, expected " +
                                        std::to_string(n * dtype_size(dtype)) + " for " +
                                        shape_string(shape) + " " + to_string(dtype));
    }
    std::vector<double> v(n);
    if (dtype == DType::f32) {
        for (std::size_t i = 0; i < n; ++i) {
            float f;
            std::memcpy(&f, bytes.data() + 4 * i, 4);
            v[i] = f;
        }
    } else {
        std::memcpy(v.data(), bytes.data(), bytes.size());
    }
    return Tensor(shape, std::move(v), dtype);
}

inline std::string tensor_digest(const Tensor& t) { return sha256_hex(encode_tensor(t)); }

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::io, "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

inline std::string read_file_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::io, "cannot open " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::io, "short write to " + path.string());
}

inline void write_file_text(const std::filesystem::path& path, std::string_view text) {
    write_file_bytes(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string file_digest(const std::filesystem::path& path) { return sha256_hex(read_file_bytes(path)); }

}  // namespace restitch
