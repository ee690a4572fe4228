#pragma once

#include <filesystem>
#include <vector>

#include "equivar/config.hpp"
#include "equivar/layers.hpp"
#include "equivar/train.hpp"

namespace equivar {

/// Writes `config.txt`, `checkpoint.manifest` (one `name extents...` line per
/// tensor) and `checkpoint.eqt` (the EQT1 records in manifest order).
template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const RunConfig& cfg, const std::vector<NamedTensor<T>>& tensors);

/// Reads the tensors back, converting to T. Throws FormatError when the
/// manifest and the records disagree.
template <typename T>
std::vector<NamedTensor<T>> load_checkpoint_tensors(const std::filesystem::path& dir);

RunConfig load_checkpoint_config(const std::filesystem::path& dir);

/// Rebuilds the backbone stored under the `backbone.` prefix.
template <typename T>
Backbone<T> load_backbone(const std::filesystem::path& dir);

}  // namespace equivar
