#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "filo/core/error.hpp"
#include "filo/core/tensor.hpp"

// Binary tensor container: the exchange format for externally produced
// backbone features, anomaly-map float sidecars, and checkpoints.
//
//   magic   "FILOTEN1"                  8 bytes
//   count   u32                         number of tensors
//   per tensor:
//     name_len u16, name bytes (UTF-8)
//     dtype    u8   (0 = float32, 1 = float64)
//     ndims    u8
//     dims     u32 * ndims
//     data     little-endian, row-major
//
// Feature exchange uses float32; checkpoints use float64 so a save/load
// round trip reproduces forward outputs exactly.
namespace filo::tio {

static_assert(std::endian::native == std::endian::little,
              "tensor container I/O assumes a little-endian host");

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1 };

namespace detail {

template <class T>
void write_pod(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

constexpr char kMagic[8] = {'F', 'I', 'L', 'O', 'T', 'E', 'N', '1'};

} // namespace detail

inline void write_tensors(std::ostream& out,
                          const std::vector<std::pair<std::string, const Tensor*>>& tensors,
                          Dtype dtype) {
    out.write(detail::kMagic, 8);
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        require(name.size() < 65536, ErrorKind::io, "tensor name too long");
        detail::write_pod<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(dtype));
        detail::write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(t->ndim()));
        for (int d : t->shape) detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        if (dtype == Dtype::f32) {
            for (double x : t->v) detail::write_pod<float>(out, static_cast<float>(x));
        } else {
            for (double x : t->v) detail::write_pod<double>(out, x);
        }
    }
    require(out.good(), ErrorKind::io, "tensor container write failed");
}

inline std::map<std::string, Tensor> read_tensors(std::istream& in,
                                                  const std::string& what) {
    char magic[8];
    in.read(magic, 8);
    require(in.good() && std::equal(magic, magic + 8, detail::kMagic), ErrorKind::io,
            "not a tensor container: " + what);
    const auto count = detail::read_pod<std::uint32_t>(in);
    std::map<std::string, Tensor> result;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = detail::read_pod<std::uint16_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const auto dtype = static_cast<Dtype>(detail::read_pod<std::uint8_t>(in));
        require(dtype == Dtype::f32 || dtype == Dtype::f64, ErrorKind::io,
                "unknown dtype in " + what);
        const auto ndims = detail::read_pod<std::uint8_t>(in);
        std::vector<int> shape(ndims);
        for (auto& d : shape) d = static_cast<int>(detail::read_pod<std::uint32_t>(in));
        Tensor t(shape);
        if (dtype == Dtype::f32) {
            for (auto& x : t.v) x = static_cast<double>(detail::read_pod<float>(in));
        } else {
            for (auto& x : t.v) x = detail::read_pod<double>(in);
        }
        require(in.good(), ErrorKind::io, "truncated tensor container: " + what);
        result.emplace(std::move(name), std::move(t));
    }
    return result;
}

inline void save_tensors(const std::string& path,
                         const std::vector<std::pair<std::string, const Tensor*>>& tensors,
                         Dtype dtype = Dtype::f32) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), ErrorKind::io, "cannot open for write: " + path);
    write_tensors(out, tensors, dtype);
}

inline std::map<std::string, Tensor> load_tensors(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::io, "cannot open: " + path);
    return read_tensors(in, path);
}

} // namespace filo::tio
