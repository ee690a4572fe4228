#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "equivar/group.hpp"
#include "equivar/tensor.hpp"

namespace equivar {

/// Feature maps [B, |G|, C, H, W] in the regular representation of `group`.
template <typename T>
struct GroupFeatureMap {
  Tensor<T> tensor;
  FiniteGroup group;

  std::size_t batch() const { return tensor.extent(0); }
  std::size_t channels() const { return tensor.extent(2); }
  std::size_t extent() const { return tensor.extent(3); }
};

/// Pooled features [B, |G| * block]: one contiguous block per group element.
template <typename T>
struct PooledFeature {
  Tensor<T> tensor;
  FiniteGroup group;

  std::size_t batch() const { return tensor.extent(0); }
  std::size_t block() const { return tensor.extent(1) / group.order(); }
};

/// T_out(g): spatial relocation by g together with h -> g*h on the group axis.
template <typename T>
GroupFeatureMap<T> regular_action(const GroupFeatureMap<T>& x, std::size_t g);
/// T_out(g) on pooled features: block h moves to block g*h.
template <typename T>
PooledFeature<T> pooled_action(const PooledFeature<T>& v, std::size_t g);

/// Output plane g = conv2d(x, T(g) w0). x [B,C,n,n], w0 [O,C,k,k] with k odd.
template <typename T>
GroupFeatureMap<T> lifting_conv(const Tensor<T>& x, const Tensor<T>& w0, const FiniteGroup& group, std::size_t pad);

/// Output plane g = sum_h conv2d(x_h, T(g) w[g^-1 h]). w [|G|,O,C,k,k].
template <typename T>
GroupFeatureMap<T> group_conv(const GroupFeatureMap<T>& x, const Tensor<T>& w, const FiniteGroup& group,
                              std::size_t pad);

/// Global spatial mean per (g, c). The sum runs over values in sorted order so
/// that any relocation of pixels yields a bit-identical result.
template <typename T>
PooledFeature<T> group_pool_spatial(const GroupFeatureMap<T>& x);

/// (1/|G|) sum_g T_out(g) v: every block becomes the mean of all blocks,
/// summed in sorted order so the result is exactly invariant.
template <typename T>
PooledFeature<T> group_average(const PooledFeature<T>& v);

/// Per-block concatenation: block h of the result is [a_h, b_h, ...].
template <typename T>
PooledFeature<T> concat_blocks(const std::vector<PooledFeature<T>>& parts);

/// round(base / sqrt(order)), at least 1.
std::size_t scale_channels(std::size_t base_channels, std::size_t group_order);

/// Regular-to-regular linear layer: out_g = sum_h W[g^-1 h] v_h + b. For the
/// trivial group this is an ordinary dense layer.
template <typename T>
class GroupLinear {
 public:
  GroupLinear() = default;
  GroupLinear(const FiniteGroup& group, std::size_t in_block, std::size_t out_block, std::mt19937_64& rng);

  PooledFeature<T> operator()(const PooledFeature<T>& v) const;
  std::vector<Tensor<T>*> parameter_slots() { return {&weight_, &bias_}; }
  std::size_t out_block() const { return weight_.extent(1); }
  const FiniteGroup& group() const { return group_; }

 private:
  FiniteGroup group_ = make_group(GroupKind::trivial);
  Tensor<T> weight_;  // [|G|, out, in]
  Tensor<T> bias_;    // [out]
  std::vector<std::uint32_t> expand_;
};

/// Linear classifier whose logits permute with the label action:
/// logits(T_out(g) v) = P_g logits(v). The label space must split into free
/// orbits; each orbit holds one weight block per group element.
template <typename T>
class EquivariantHead {
 public:
  EquivariantHead() = default;
  EquivariantHead(const LabelAction& labels, std::size_t in_block, std::mt19937_64& rng);

  Tensor<T> operator()(const PooledFeature<T>& v) const;
  std::vector<Tensor<T>*> parameter_slots() { return {&weight_, &bias_}; }
  std::size_t label_count() const { return label_count_; }
  std::size_t orbit_count() const { return weight_.extent(0); }

 private:
  FiniteGroup group_ = make_group(GroupKind::trivial);
  std::size_t label_count_ = 0;
  Tensor<T> weight_;  // [orbits, |G|, in]
  Tensor<T> bias_;    // [orbits]
  std::vector<std::uint32_t> weight_index_;
  std::vector<std::uint32_t> bias_index_;
};

/// Plain dense layer on flat features [B, in] -> [B, out].
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, std::mt19937_64& rng);
  Tensor<T> operator()(const Tensor<T>& x) const;
  std::vector<Tensor<T>*> parameter_slots() { return {&weight_, &bias_}; }

 private:
  Tensor<T> weight_;  // [in, out]
  Tensor<T> bias_;    // [out]
};

struct BackboneConfig {
  GroupKind group = GroupKind::rot4_flip;
  std::size_t in_channels = 3;
  std::size_t width = 16;  // channels of the non-equivariant equivalent
  std::size_t depth = 2;   // group-conv layers after the lifting layer
  std::size_t kernel = 3;
  std::size_t pool_stages = 2;  // leading stages followed by a 2x mean pool
  bool normalize = true;
};

/// Source of the normalisation statistics. `batch` pools each channel over
/// (batch, group axis, H, W) and, when a graph is being recorded, folds the
/// result into the running averages. `running` uses those averages.
enum class Statistics { batch, running };

/// lifting_conv -> depth x (group_conv, normalisation, relu, optional pool)
/// -> group_pool_spatial. Every stage commutes with the regular action.
template <typename T>
class Backbone {
 public:
  static constexpr T kEps = T(1e-5);
  static constexpr T kMomentum = T(0.1);

  Backbone() = default;
  Backbone(const BackboneConfig& cfg, std::mt19937_64& rng);

  PooledFeature<T> operator()(const Tensor<T>& x, Statistics stats = Statistics::batch) const;
  GroupFeatureMap<T> feature_map(const Tensor<T>& x, Statistics stats = Statistics::batch) const;

  const BackboneConfig& config() const { return cfg_; }
  const FiniteGroup& group() const { return group_; }
  std::size_t channels() const { return channels_; }
  std::size_t feature_dim() const { return channels_ * group_.order(); }
  std::size_t parameter_count() const;
  std::vector<Tensor<T>*> parameter_slots();
  /// Running mean and variance per stage, as [2, c] tensors.
  std::vector<Tensor<T>> running_statistics() const;
  void set_running_statistics(const std::vector<Tensor<T>>& stats);

 private:
  Tensor<T> normalize(const Tensor<T>& x, std::size_t stage, Statistics stats) const;

  BackboneConfig cfg_;
  FiniteGroup group_ = make_group(GroupKind::trivial);
  std::size_t channels_ = 0;
  Tensor<T> lifting_;               // [c, C_in, k, k]
  std::vector<Tensor<T>> layers_;   // [|G|, c, c, k, k]
  mutable std::vector<std::vector<T>> running_mean_, running_var_;
};

/// Replaces every parameter of a module with an independent copy.
template <typename Module>
Module deep_copy(const Module& m) {
  Module copy = m;
  for (auto* slot : copy.parameter_slots()) *slot = slot->clone();
  return copy;
}

}  // namespace equivar
