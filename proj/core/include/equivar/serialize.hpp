#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "equivar/tensor.hpp"

namespace equivar {

/// EQT1 binary layout (little-endian): "EQT1", u32 rank, rank x u64 extents,
/// u8 dtype code, raw element buffer.
enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t);

/// Reads one EQT1 record, converting the stored element type to T.
template <typename T>
Tensor<T> read_tensor(std::istream& is);

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t);
template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path);

}  // namespace equivar
