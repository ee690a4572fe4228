#pragma once

#include <cstddef>
#include <random>
#include <vector>

#include "equivar/errors.hpp"
#include "equivar/layers.hpp"
#include "equivar/ops.hpp"
#include "equivar/optim.hpp"
#include "equivar/tensor.hpp"

namespace equivar {

/// Per-row <avg(u), avg(v)> where avg is the group average. Equal to the mean
/// of <T_out(g1) u, T_out(g2) v> over all |G|^2 pairs by bilinearity.
template <typename T>
Tensor<T> invariant_inner(const PooledFeature<T>& u, const PooledFeature<T>& v);

/// Unit-norm embedding used by the contrastive losses: the group average
/// followed by L2 normalisation when `invariant`, the plain normalised feature
/// otherwise.
template <typename T>
Tensor<T> embed(const PooledFeature<T>& v, bool invariant);

/// Fixed-capacity FIFO bank of unit-norm key vectors.
template <typename T>
class FeatureQueue {
 public:
  FeatureQueue(std::size_t capacity, std::size_t dim);

  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return size_; }
  bool empty() const noexcept { return size_ == 0; }

  /// Appends the rows of keys [N, dim], evicting the oldest entries beyond
  /// capacity. Rows must be unit-norm within 1e-6.
  void push(const Tensor<T>& keys);
  /// Rows oldest-first, detached.
  Tensor<T> contents() const;
  /// Replaces the contents with `capacity` random unit vectors. With
  /// `group` given, each vector is group-averaged before normalisation.
  void fill_random(std::mt19937_64& rng, const FiniteGroup* group = nullptr);
  /// Raw ring storage and cursor, for checkpointing.
  const std::vector<T>& storage() const noexcept { return data_; }
  std::size_t cursor() const noexcept { return cursor_; }

 private:
  std::size_t capacity_;
  std::size_t dim_;
  std::size_t size_ = 0;
  std::size_t cursor_ = 0;  // next slot to overwrite
  std::vector<T> data_;
};

/// InfoNCE against the positive key and every queued negative. Keys are
/// detached. An empty queue leaves only the positive term (loss 0).
template <typename T>
Tensor<T> moco_loss(const PooledFeature<T>& queries, const PooledFeature<T>& keys, const FeatureQueue<T>& queue, T tau,
                    bool invariant);

/// Exponential moving average shadow of a module's parameters. The shadow
/// parameters never take gradients.
template <typename Module>
class MomentumEncoder {
 public:
  MomentumEncoder(Module& online, double momentum) : shadow_(online), momentum_(momentum) {
    for (auto* slot : shadow_.parameter_slots()) *slot = detached_copy(*slot);
  }

  /// shadow = m * shadow + (1 - m) * online, per parameter.
  void update(Module& online) {
    auto src = online.parameter_slots();
    auto dst = shadow_.parameter_slots();
    for (std::size_t i = 0; i < src.size(); ++i) {
      auto d = dst[i]->mutable_values();
      const auto s = src[i]->values();
      using T = typename std::remove_reference_t<decltype(*dst[i])>::value_type;
      const T m = static_cast<T>(momentum_);
      for (std::size_t j = 0; j < d.size(); ++j) d[j] = m * d[j] + (T(1) - m) * s[j];
    }
  }

  const Module& shadow() const { return shadow_; }
  Module& shadow() { return shadow_; }
  double momentum() const { return momentum_; }

 private:
  template <typename T>
  static Tensor<T> detached_copy(const Tensor<T>& t) {
    return Tensor<T>(t.shape(), std::vector<T>(t.values().begin(), t.values().end()));
  }

  Module shadow_;
  double momentum_;
};

/// Cluster centroids C [d, c] with unit-norm columns.
template <typename T>
class Prototypes {
 public:
  Prototypes() = default;
  Prototypes(std::size_t dim, std::size_t clusters, std::mt19937_64& rng);

  const Tensor<T>& matrix() const { return weight_; }
  std::vector<Tensor<T>*> parameter_slots() { return {&weight_}; }
  void renormalize();
  std::size_t clusters() const { return weight_.extent(1); }

 private:
  Tensor<T> weight_;
};

/// Entropy-regularised transport plan for scores [B,c] with uniform marginals:
/// alternately rescale columns to 1/c and rows to 1/B for `iterations` rounds,
/// then scale rows to sum to one. Falls back to log-domain updates when the
/// direct kernel over- or underflows. Never part of the autodiff graph.
template <typename T>
Tensor<T> sinkhorn_knopp(const Tensor<T>& scores, std::size_t iterations = 3, T eps = T(0.05));

struct SwavConfig {
  double tau = 0.1;
  double eps = 0.05;
  std::size_t iterations = 3;
};

/// Swapped prediction: assignments from each of the first `large_views` views
/// (detached Sinkhorn) predict every other view through softmax(C^t z / tau).
/// `queue` (optional) supplies extra rows to the Sinkhorn problem.
template <typename T>
Tensor<T> swav_loss(const std::vector<PooledFeature<T>>& views, std::size_t large_views, const Prototypes<T>& prototypes,
                    const SwavConfig& cfg, bool invariant, const FeatureQueue<T>* queue = nullptr);

/// -1/2 [cos(p1, sg(z2)) + cos(p2, sg(z1))], averaged over the batch. With
/// `invariant`, every vector is replaced by its group average first.
template <typename T>
Tensor<T> simsiam_loss(const PooledFeature<T>& z1, const PooledFeature<T>& z2, const PooledFeature<T>& p1,
                       const PooledFeature<T>& p2, bool invariant);

struct MocoConfig {
  double tau = 0.2;
  double momentum = 0.999;
  std::size_t queue_size = 4096;
  bool invariant = true;
};

/// One momentum-contrast iteration on an augmented view pair: keys from the
/// momentum encoder, an optimizer step on the InfoNCE loss, the moving-average
/// update of the key encoder, then the FIFO queue update. Returns the loss.
template <typename T, typename Encoder>
T moco_step(Encoder& online, MomentumEncoder<Encoder>& key_encoder, FeatureQueue<T>& queue, Sgd<T>& optimizer,
            const Tensor<T>& view_q, const Tensor<T>& view_k, const MocoConfig& cfg, double lr) {
  const PooledFeature<T> keys = key_encoder.shadow()(view_k);
  const Tensor<T> loss = moco_loss(online(view_q), keys, queue, static_cast<T>(cfg.tau), cfg.invariant);
  backward(loss);
  optimizer.step(lr);
  key_encoder.update(online);
  queue.push(stop_gradient(embed(keys, cfg.invariant)));
  return loss.item();
}

}  // namespace equivar
