#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "equivar/tensor.hpp"

namespace equivar {

/// Square images [N, C, n, n] with optional integer labels.
struct Dataset {
  Tensor<float> images;
  std::vector<std::size_t> labels;  // empty when unlabeled
  std::size_t classes = 0;

  std::size_t size() const { return images.extent(0); }
  std::size_t channels() const { return images.extent(1); }
  std::size_t extent() const { return images.extent(2); }
  bool labeled() const { return !labels.empty(); }

  /// Throws DimensionError / FormatError when the invariants do not hold.
  void validate() const;

  /// Stacks the selected samples into [B, C, n, n].
  template <typename T>
  Tensor<T> batch(std::span<const std::size_t> indices) const;
  /// One sample as [C, n, n].
  template <typename T>
  Tensor<T> image(std::size_t index) const;
};

/// Oriented-shape images: bars, corners, gradients and rings, each family at
/// class-specific frequencies, drawn in a random orientation of the
/// flip-and-quarter-turn group, so that every class is closed under those
/// transforms. Values lie in [0, 1]. Deterministic per seed.
Dataset synth_dataset(std::size_t classes, std::size_t per_class, std::size_t extent, std::uint64_t seed,
                      std::size_t channels = 3);

/// Writes `<stem>.eqt` and, when labeled, `<stem>.labels`.
void save_dataset(const std::filesystem::path& stem, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& stem);

/// Reads every binary PPM (P6) or PGM (P5) file with maxval 255 below `dir`.
/// Subdirectories, in sorted order, become class labels; a flat directory
/// yields an unlabeled dataset. Byte values map to v / 255 exactly.
Dataset import_pnm_directory(const std::filesystem::path& dir);

struct AugmentationSpec {
  double crop = 0.0;            // probability of a random crop
  double crop_min_scale = 0.5;  // smallest crop side as a fraction of n
  double hflip = 0.0;
  double rot90 = 0.0;  // probability of a uniformly drawn quarter turn
  double grayscale = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Two independent views of image [C, n, n], each a deterministic function of
/// (spec.seed, draw_index, view). Crops are zero-padded back to n x n around
/// the centre; flips and turns use the exact grid action.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> augment(const Tensor<T>& image, const AugmentationSpec& spec, std::uint64_t draw_index);

/// Single view of a batch [B, C, n, n]; sample b uses draw index
/// first_draw + b.
template <typename T>
Tensor<T> augment_batch(const Tensor<T>& batch, const AugmentationSpec& spec, std::uint64_t first_draw,
                        std::size_t view);

/// Seeded permutation of 0..n-1 cut into full batches; the remainder is
/// dropped.
std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, std::uint64_t epoch_seed);

}  // namespace equivar
