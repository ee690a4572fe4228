#include "equivar/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include "equivar/errors.hpp"
#include "equivar/group.hpp"
#include "equivar/ops.hpp"
#include "equivar/serialize.hpp"

namespace equivar {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Canonical (un-oriented) pattern value at normalised coordinates u (column)
// and v (row), both in (0, 1).
struct Pattern {
  std::size_t family = 0;
  std::size_t level = 0;
  double phase = 0.0;
  double thickness = 0.0;
  double cu = 0.5, cv = 0.5;

  double operator()(double u, double v) const {
    const double f = static_cast<double>(level);
    switch (family) {
      case 0:  // bars
        return 0.5 + 0.5 * std::sin(kTwoPi * (2.0 + 2.0 * f) * u + phase);
      case 1: {  // corner: an L with its vertex near the top-left
        const double t = thickness, arm = 0.55 + 0.1 * f;
        const double du = u - cu + 0.35, dv = v - cv + 0.35;
        const bool vertical = du >= 0 && du < t && dv >= 0 && dv < arm;
        const bool horizontal = dv >= 0 && dv < t && du >= 0 && du < arm;
        return vertical || horizontal ? 1.0 : 0.0;
      }
      case 2: {  // sawtooth gradient
        const double x = (1.0 + f) * u + phase / kTwoPi;
        return x - std::floor(x);
      }
      default: {  // rings
        const double r = std::hypot(u - cu, v - cv);
        return 0.5 + 0.5 * std::cos(kTwoPi * (2.0 + 1.5 * f) * r + phase);
      }
    }
  }
};

std::mt19937_64 seeded(std::uint64_t seed, std::uint64_t draw, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(draw), static_cast<std::uint32_t>(draw >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

// out[dest] = in[src] over every [n, n] plane.
template <typename T>
void relocate(std::vector<T>& pixels, std::size_t planes, std::size_t n, const GridTransform& t) {
  std::vector<T> out(pixels.size());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c) {
        const auto [dr, dc] = t.apply(n, r, c);
        out[p * n * n + dr * n + dc] = pixels[p * n * n + r * n + c];
      }
  pixels = std::move(out);
}

template <typename T>
Tensor<T> augment_view(const Tensor<T>& image, const AugmentationSpec& spec, std::uint64_t draw, std::uint64_t view) {
  if (image.rank() != 3 || image.extent(1) != image.extent(2)) {
    throw DimensionError("augment: expected [C,n,n], got " + shape_str(image.shape()));
  }
  const std::size_t C = image.extent(0), n = image.extent(1);
  std::vector<T> px(image.values().begin(), image.values().end());
  auto rng = seeded(spec.seed, draw, view);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  if (unit(rng) < spec.crop) {
    const double scale = spec.crop_min_scale + (1.0 - spec.crop_min_scale) * unit(rng);
    const std::size_t side = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(scale * n)), 1, n);
    const std::size_t top = std::uniform_int_distribution<std::size_t>(0, n - side)(rng);
    const std::size_t left = std::uniform_int_distribution<std::size_t>(0, n - side)(rng);
    const std::size_t at = (n - side) / 2;
    std::vector<T> out(px.size(), T(0));
    for (std::size_t ch = 0; ch < C; ++ch)
      for (std::size_t r = 0; r < side; ++r)
        for (std::size_t c = 0; c < side; ++c)
          out[(ch * n + at + r) * n + at + c] = px[(ch * n + top + r) * n + left + c];
    px = std::move(out);
  }
  if (unit(rng) < spec.hflip) relocate(px, C, n, GridTransform{0, true});
  if (unit(rng) < spec.rot90) {
    const int q = std::uniform_int_distribution<int>(0, 3)(rng);
    relocate(px, C, n, GridTransform{q, false});
  }
  if (unit(rng) < spec.grayscale) {
    for (std::size_t i = 0; i < n * n; ++i) {
      T s = T(0);
      for (std::size_t ch = 0; ch < C; ++ch) s += px[ch * n * n + i];
      s /= static_cast<T>(C);
      for (std::size_t ch = 0; ch < C; ++ch) px[ch * n * n + i] = s;
    }
  }
  return Tensor<T>(image.shape(), std::move(px));
}

void skip_pnm_space(std::istream& is) {
  while (is) {
    const int ch = is.peek();
    if (ch == '#') {
      std::string line;
      std::getline(is, line);
    } else if (std::isspace(ch)) {
      is.get();
    } else {
      break;
    }
  }
}

struct PnmImage {
  std::size_t channels = 0, width = 0, height = 0;
  std::vector<unsigned char> bytes;  // interleaved
};

PnmImage read_pnm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  std::string magic(2, '\0');
  is.read(magic.data(), 2);
  PnmImage img;
  if (magic == "P6") img.channels = 3;
  else if (magic == "P5") img.channels = 1;
  else throw FormatError(path.string() + ": not a binary PPM/PGM file");
  std::size_t maxval = 0;
  skip_pnm_space(is);
  is >> img.width;
  skip_pnm_space(is);
  is >> img.height;
  skip_pnm_space(is);
  is >> maxval;
  if (!is || maxval != 255) throw FormatError(path.string() + ": only 8-bit images (maxval 255) are supported");
  is.get();  // single whitespace before the raster
  img.bytes.resize(img.channels * img.width * img.height);
  is.read(reinterpret_cast<char*>(img.bytes.data()), static_cast<std::streamsize>(img.bytes.size()));
  if (is.gcount() != static_cast<std::streamsize>(img.bytes.size())) throw FormatError(path.string() + ": truncated raster");
  return img;
}

bool is_pnm(const std::filesystem::path& p) {
  const auto ext = p.extension().string();
  return ext == ".ppm" || ext == ".pgm" || ext == ".pnm";
}

}  // namespace

void Dataset::validate() const {
  if (images.rank() != 4 || images.extent(2) != images.extent(3)) {
    throw DimensionError("dataset images must be square [N,C,n,n], got " + shape_str(images.shape()));
  }
  if (!labels.empty()) {
    if (labels.size() != size()) {
      throw FormatError("dataset has " + std::to_string(size()) + " images but " + std::to_string(labels.size()) +
                        " labels");
    }
    for (std::size_t l : labels)
      if (l >= classes) throw FormatError("label " + std::to_string(l) + " exceeds class count " + std::to_string(classes));
  }
}

template <typename T>
Tensor<T> Dataset::batch(std::span<const std::size_t> indices) const {
  const std::size_t per = channels() * extent() * extent();
  std::vector<T> out(indices.size() * per);
  const auto src = images.values();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    if (indices[b] >= size()) throw DimensionError("dataset index " + std::to_string(indices[b]) + " out of range");
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(indices[b] * per), per,
                out.begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  return Tensor<T>(Shape{indices.size(), channels(), extent(), extent()}, std::move(out));
}

template <typename T>
Tensor<T> Dataset::image(std::size_t index) const {
  const std::size_t idx[1] = {index};
  auto b = batch<T>(std::span<const std::size_t>(idx));
  return reshape(b, Shape{channels(), extent(), extent()});
}

Dataset synth_dataset(std::size_t classes, std::size_t per_class, std::size_t extent, std::uint64_t seed,
                      std::size_t channels) {
  if (extent < 16) throw ExtentError("synthetic images need extent >= 16, got " + std::to_string(extent));
  if (classes == 0 || per_class == 0 || channels == 0) throw ParameterError("synthetic dataset must be non-empty");
  const std::size_t N = classes * per_class, n = extent, plane = n * n;
  std::vector<float> pixels(N * channels * plane);
  std::vector<std::size_t> labels(N);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.05);

  for (std::size_t i = 0; i < N; ++i) {
    const std::size_t label = i % classes;
    labels[i] = label;
    Pattern pat;
    pat.family = label % 4;
    pat.level = label / 4;
    pat.phase = kTwoPi * unit(rng);
    pat.thickness = 0.12 + 0.06 * unit(rng);
    pat.cu = 0.4 + 0.2 * unit(rng);
    pat.cv = 0.4 + 0.2 * unit(rng);
    const GridTransform orient{static_cast<int>(std::uniform_int_distribution<int>(0, 3)(rng)), unit(rng) < 0.5};
    std::vector<double> gain(channels), offset(channels);
    for (std::size_t c = 0; c < channels; ++c) {
      gain[c] = 0.6 + 0.4 * unit(rng);
      offset[c] = 0.1 * unit(rng);
    }
    std::vector<double> canonical(plane);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c) canonical[r * n + c] = pat((c + 0.5) / n, (r + 0.5) / n);
    relocate(canonical, 1, n, orient);
    // Radial envelope around the image centre: symmetric under every grid
    // transform, and it gives each patch a cue about its position.
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c) {
        const double d = std::hypot((c + 0.5) / n - 0.5, (r + 0.5) / n - 0.5);
        canonical[r * n + c] *= 1.0 - 0.6 * std::min(1.0, d / 0.75);
      }
    float* out = pixels.data() + i * channels * plane;
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        const double v = offset[c] + gain[c] * canonical[p] * 0.9 + noise(rng);
        out[c * plane + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  }
  Dataset d{Tensor<float>(Shape{N, channels, n, n}, std::move(pixels)), std::move(labels), classes};
  d.validate();
  return d;
}

void save_dataset(const std::filesystem::path& stem, const Dataset& data) {
  data.validate();
  auto eqt = stem;
  eqt += ".eqt";
  save_tensor(eqt, data.images);
  if (data.labeled()) {
    auto lp = stem;
    lp += ".labels";
    std::ofstream os(lp);
    if (!os) throw FormatError("cannot write " + lp.string());
    for (std::size_t l : data.labels) os << l << '\n';
  }
}

Dataset load_dataset(const std::filesystem::path& stem) {
  auto eqt = stem;
  eqt += ".eqt";
  Dataset d;
  d.images = load_tensor<float>(eqt);
  auto lp = stem;
  lp += ".labels";
  if (std::filesystem::exists(lp)) {
    std::ifstream is(lp);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::size_t pos = 0;
      unsigned long long v = 0;
      try {
        v = std::stoull(line, &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      if (pos == 0 || line.find_first_not_of(" \t\r", pos) != std::string::npos) {
        throw FormatError(lp.string() + ": bad label line '" + line + "'");
      }
      d.labels.push_back(static_cast<std::size_t>(v));
      d.classes = std::max(d.classes, static_cast<std::size_t>(v) + 1);
    }
  }
  d.validate();
  return d;
}

Dataset import_pnm_directory(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw FormatError(dir.string() + " is not a directory");
  std::vector<fs::path> class_dirs, flat;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory()) class_dirs.push_back(e.path());
    else if (is_pnm(e.path())) flat.push_back(e.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  std::sort(flat.begin(), flat.end());
  std::vector<std::pair<fs::path, std::size_t>> files;
  if (class_dirs.empty()) {
    for (const auto& p : flat) files.emplace_back(p, 0);
  } else {
    for (std::size_t k = 0; k < class_dirs.size(); ++k) {
      std::vector<fs::path> inner;
      for (const auto& e : fs::directory_iterator(class_dirs[k]))
        if (is_pnm(e.path())) inner.push_back(e.path());
      std::sort(inner.begin(), inner.end());
      for (const auto& p : inner) files.emplace_back(p, k);
    }
  }
  if (files.empty()) throw FormatError(dir.string() + " holds no PPM/PGM images");

  std::vector<float> pixels;
  std::size_t C = 0, n = 0;
  Dataset d;
  for (const auto& [path, label] : files) {
    const auto img = read_pnm(path);
    if (img.width != img.height) throw DimensionError(path.string() + ": image is not square");
    if (C == 0) {
      C = img.channels;
      n = img.width;
    } else if (img.channels != C || img.width != n) {
      throw DimensionError(path.string() + ": size or channel count differs from the first image");
    }
    const std::size_t plane = n * n;
    const std::size_t base = pixels.size();
    pixels.resize(base + C * plane);
    for (std::size_t p = 0; p < plane; ++p)
      for (std::size_t c = 0; c < C; ++c) pixels[base + c * plane + p] = static_cast<float>(img.bytes[p * C + c]) / 255.0f;
    if (!class_dirs.empty()) d.labels.push_back(label);
  }
  d.images = Tensor<float>(Shape{files.size(), C, n, n}, std::move(pixels));
  d.classes = class_dirs.size();
  d.validate();
  return d;
}

void AugmentationSpec::validate() const {
  for (double p : {crop, hflip, rot90, grayscale})
    if (!(p >= 0.0 && p <= 1.0)) throw ParameterError("augmentation probabilities must lie in [0, 1]");
  if (!(crop_min_scale > 0.0 && crop_min_scale <= 1.0)) throw ParameterError("crop_min_scale must lie in (0, 1]");
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> augment(const Tensor<T>& image, const AugmentationSpec& spec, std::uint64_t draw_index) {
  spec.validate();
  return {augment_view(image, spec, draw_index, 0), augment_view(image, spec, draw_index, 1)};
}

template <typename T>
Tensor<T> augment_batch(const Tensor<T>& batch, const AugmentationSpec& spec, std::uint64_t first_draw,
                        std::size_t view) {
  spec.validate();
  if (batch.rank() != 4) throw DimensionError("augment_batch: expected [B,C,n,n], got " + shape_str(batch.shape()));
  const std::size_t B = batch.extent(0), per = batch.size() / B;
  const Shape one{batch.extent(1), batch.extent(2), batch.extent(3)};
  std::vector<T> out(batch.size());
  const auto src = batch.values();
  for (std::size_t b = 0; b < B; ++b) {
    Tensor<T> img(one, std::vector<T>(src.begin() + static_cast<std::ptrdiff_t>(b * per),
                                      src.begin() + static_cast<std::ptrdiff_t>((b + 1) * per)));
    const auto v = augment_view(img, spec, first_draw + b, view);
    std::copy(v.values().begin(), v.values().end(), out.begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  return Tensor<T>(batch.shape(), std::move(out));
}

std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, std::uint64_t epoch_seed) {
  if (batch_size == 0 || batch_size > n) {
    throw ParameterError("batch size " + std::to_string(batch_size) + " must lie in 1.." + std::to_string(n));
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(epoch_seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start + batch_size <= n; start += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(start + batch_size));
  return out;
}

template Tensor<float> Dataset::batch(std::span<const std::size_t>) const;
template Tensor<double> Dataset::batch(std::span<const std::size_t>) const;
template Tensor<float> Dataset::image(std::size_t) const;
template Tensor<double> Dataset::image(std::size_t) const;
template std::pair<Tensor<float>, Tensor<float>> augment(const Tensor<float>&, const AugmentationSpec&, std::uint64_t);
template std::pair<Tensor<double>, Tensor<double>> augment(const Tensor<double>&, const AugmentationSpec&,
                                                           std::uint64_t);
template Tensor<float> augment_batch(const Tensor<float>&, const AugmentationSpec&, std::uint64_t, std::size_t);
template Tensor<double> augment_batch(const Tensor<double>&, const AugmentationSpec&, std::uint64_t, std::size_t);

}  // namespace equivar
