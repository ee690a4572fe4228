#include "equivar/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "equivar/errors.hpp"

namespace equivar {

static_assert(std::endian::native == std::endian::little, "EQT1 I/O assumes a little-endian host");

namespace {

constexpr std::array<char, 4> kMagic{'E', 'Q', 'T', '1'};

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V take(std::istream& is) {
  V v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(V))) throw FormatError("EQT1: truncated header");
  return v;
}

template <typename Stored, typename T>
std::vector<T> read_buffer(std::istream& is, std::size_t count) {
  std::vector<Stored> raw(count);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count * sizeof(Stored)))) {
    throw FormatError("EQT1: truncated buffer");
  }
  return std::vector<T>(raw.begin(), raw.end());
}

}  // namespace

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) put<std::uint64_t>(os, e);
  put<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<T>()));
  os.write(reinterpret_cast<const char*>(t.values().data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
  if (!os) throw FormatError("EQT1: write failed");
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) throw FormatError("EQT1: bad magic");
  const auto rank = take<std::uint32_t>(is);
  if (rank > 16) throw FormatError("EQT1: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) {
    e = static_cast<std::size_t>(take<std::uint64_t>(is));
    if (e == 0) throw FormatError("EQT1: zero extent");
  }
  const auto code = take<std::uint8_t>(is);
  const std::size_t count = numel(shape);
  switch (static_cast<DType>(code)) {
    case DType::f32:
      return Tensor<T>(std::move(shape), read_buffer<float, T>(is, count));
    case DType::f64:
      return Tensor<T>(std::move(shape), read_buffer<double, T>(is, count));
  }
  throw FormatError("EQT1: unknown dtype code " + std::to_string(code));
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_tensor<T>(is);
}

template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor(std::istream&);
template Tensor<double> read_tensor(std::istream&);
template void save_tensor(const std::filesystem::path&, const Tensor<float>&);
template void save_tensor(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> load_tensor(const std::filesystem::path&);
template Tensor<double> load_tensor(const std::filesystem::path&);

}  // namespace equivar
