#include "equivar/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "equivar/pretext.hpp"

namespace equivar {

template <typename T>
Tensor<T> invariant_inner(const PooledFeature<T>& u, const PooledFeature<T>& v) {
  if (!(u.group == v.group) || u.tensor.shape() != v.tensor.shape() || u.tensor.rank() != 2 ||
      u.tensor.extent(1) % u.group.order() != 0) {
    throw StructureError("invariant_inner: block structures " + shape_str(u.tensor.shape()) + " and " +
                         shape_str(v.tensor.shape()) + " do not match");
  }
  return sum(mul(group_average(u).tensor, group_average(v).tensor), 1);
}

template <typename T>
Tensor<T> embed(const PooledFeature<T>& v, bool invariant) {
  return l2_normalize(invariant ? group_average(v).tensor : v.tensor, 1);
}

template <typename T>
FeatureQueue<T>::FeatureQueue(std::size_t capacity, std::size_t dim)
    : capacity_(capacity), dim_(dim), data_(capacity * dim, T(0)) {
  if (capacity == 0 || dim == 0) throw ParameterError("feature queue needs positive capacity and dimension");
}

template <typename T>
void FeatureQueue<T>::push(const Tensor<T>& keys) {
  if (keys.rank() != 2 || keys.extent(1) != dim_) {
    throw DimensionError("feature queue of dim " + std::to_string(dim_) + " cannot take " + shape_str(keys.shape()));
  }
  const auto v = keys.values();
  for (std::size_t r = 0; r < keys.extent(0); ++r) {
    double sq = 0.0;
    for (std::size_t j = 0; j < dim_; ++j) sq += static_cast<double>(v[r * dim_ + j]) * v[r * dim_ + j];
    if (std::abs(std::sqrt(sq) - 1.0) > 1e-6) throw NumericError("feature queue: key row is not unit-norm");
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(r * dim_), dim_, data_.begin() + static_cast<std::ptrdiff_t>(cursor_ * dim_));
    cursor_ = (cursor_ + 1) % capacity_;
    size_ = std::min(size_ + 1, capacity_);
  }
}

template <typename T>
Tensor<T> FeatureQueue<T>::contents() const {
  if (size_ == 0) throw DimensionError("feature queue is empty");
  std::vector<T> out(size_ * dim_);
  const std::size_t start = size_ < capacity_ ? 0 : cursor_;
  for (std::size_t i = 0; i < size_; ++i) {
    const std::size_t slot = (start + i) % capacity_;
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(slot * dim_), dim_, out.begin() + static_cast<std::ptrdiff_t>(i * dim_));
  }
  return Tensor<T>(Shape{size_, dim_}, std::move(out));
}

template <typename T>
void FeatureQueue<T>::fill_random(std::mt19937_64& rng, const FiniteGroup* group) {
  auto raw = Tensor<T>::randn(Shape{capacity_, dim_}, rng);
  Tensor<T> rows = group ? embed(PooledFeature<T>{raw, *group}, true) : l2_normalize(raw, 1);
  size_ = 0;
  cursor_ = 0;
  push(rows);
}

template <typename T>
Tensor<T> moco_loss(const PooledFeature<T>& queries, const PooledFeature<T>& keys, const FeatureQueue<T>& queue, T tau,
                    bool invariant) {
  if (!(tau > T(0))) throw ParameterError("moco_loss: temperature must be positive");
  if (queries.tensor.shape() != keys.tensor.shape()) {
    throw DimensionError("moco_loss: queries " + shape_str(queries.tensor.shape()) + " and keys " +
                         shape_str(keys.tensor.shape()) + " are not batch-aligned");
  }
  const std::size_t B = queries.batch();
  const auto q = embed(queries, invariant);
  const auto k = stop_gradient(embed(keys, invariant));
  auto logits = reshape(sum(mul(q, k), 1), Shape{B, 1});
  if (!queue.empty()) logits = concat<T>({logits, matmul(q, transpose(queue.contents()))}, 1);
  const std::vector<std::size_t> positive(B, 0);
  return pretext_loss(scale(logits, T(1) / tau), std::span<const std::size_t>(positive));
}

template <typename T>
Prototypes<T>::Prototypes(std::size_t dim, std::size_t clusters, std::mt19937_64& rng) {
  auto raw = Tensor<T>::randn(Shape{dim, clusters}, rng);
  weight_ = Tensor<T>::parameter(raw.shape(), std::vector<T>(raw.values().begin(), raw.values().end()));
  renormalize();
}

template <typename T>
void Prototypes<T>::renormalize() {
  auto w = weight_.mutable_values();
  const std::size_t d = weight_.extent(0), c = weight_.extent(1);
  for (std::size_t j = 0; j < c; ++j) {
    T sq = T(0);
    for (std::size_t i = 0; i < d; ++i) sq += w[i * c + j] * w[i * c + j];
    const T r = std::max(std::sqrt(sq), T(1e-12));
    for (std::size_t i = 0; i < d; ++i) w[i * c + j] /= r;
  }
}

namespace {

template <typename T>
bool plan_is_usable(const std::vector<T>& q) {
  return std::all_of(q.begin(), q.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
std::vector<T> sinkhorn_log_domain(std::span<const T> scores, std::size_t B, std::size_t c, std::size_t iterations,
                                   T eps) {
  std::vector<T> lq(B * c);
  for (std::size_t i = 0; i < lq.size(); ++i) lq[i] = scores[i] / eps;
  auto lse = [](auto begin_value, std::size_t count, auto get) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t k = 0; k < count; ++k) mx = std::max(mx, get(begin_value, k));
    T s = T(0);
    for (std::size_t k = 0; k < count; ++k) s += std::exp(get(begin_value, k) - mx);
    return mx + std::log(s);
  };
  const T log_c = std::log(static_cast<T>(c)), log_b = std::log(static_cast<T>(B));
  for (std::size_t it = 0; it < iterations; ++it) {
    for (std::size_t j = 0; j < c; ++j) {
      const T l = lse(j, B, [&](std::size_t col, std::size_t i) { return lq[i * c + col]; });
      for (std::size_t i = 0; i < B; ++i) lq[i * c + j] += -log_c - l;
    }
    for (std::size_t i = 0; i < B; ++i) {
      const T l = lse(i, c, [&](std::size_t row, std::size_t j) { return lq[row * c + j]; });
      for (std::size_t j = 0; j < c; ++j) lq[i * c + j] += -log_b - l;
    }
  }
  std::vector<T> q(B * c);
  for (std::size_t i = 0; i < B; ++i) {
    T s = T(0);
    for (std::size_t j = 0; j < c; ++j) s += (q[i * c + j] = std::exp(lq[i * c + j]));
    for (std::size_t j = 0; j < c; ++j) q[i * c + j] /= s;
  }
  return q;
}

}  // namespace

template <typename T>
Tensor<T> sinkhorn_knopp(const Tensor<T>& scores, std::size_t iterations, T eps) {
  if (scores.rank() != 2) throw DimensionError("sinkhorn_knopp: scores must be [B,c], got " + shape_str(scores.shape()));
  if (!(eps > T(0))) throw ParameterError("sinkhorn_knopp: eps must be positive");
  const auto s = scores.values();
  for (T v : s)
    if (!std::isfinite(v)) throw NumericError("sinkhorn_knopp: non-finite score");
  const std::size_t B = scores.extent(0), c = scores.extent(1);
  const T mx = *std::max_element(s.begin(), s.end());

  std::vector<T> q(B * c);
  T total = T(0);
  for (std::size_t i = 0; i < q.size(); ++i) total += (q[i] = std::exp((s[i] - mx) / eps));
  for (auto& v : q) v /= total;
  std::vector<T> col(c), row(B);
  bool ok = std::isfinite(total) && total > T(0);
  for (std::size_t it = 0; ok && it < iterations; ++it) {
    std::fill(col.begin(), col.end(), T(0));
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < c; ++j) col[j] += q[i * c + j];
    for (T v : col) ok = ok && v > std::numeric_limits<T>::min();
    if (!ok) break;
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < c; ++j) q[i * c + j] *= T(1) / (static_cast<T>(c) * col[j]);
    for (std::size_t i = 0; i < B; ++i) {
      row[i] = T(0);
      for (std::size_t j = 0; j < c; ++j) row[i] += q[i * c + j];
      ok = ok && row[i] > std::numeric_limits<T>::min();
    }
    if (!ok) break;
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < c; ++j) q[i * c + j] *= T(1) / (static_cast<T>(B) * row[i]);
  }
  if (ok) {
    for (std::size_t i = 0; i < B; ++i) {
      T r = T(0);
      for (std::size_t j = 0; j < c; ++j) r += q[i * c + j];
      ok = ok && r > std::numeric_limits<T>::min();
      for (std::size_t j = 0; ok && j < c; ++j) q[i * c + j] /= r;
    }
  }
  if (!ok || !plan_is_usable(q)) q = sinkhorn_log_domain<T>(s, B, c, iterations, eps);
  return Tensor<T>(scores.shape(), std::move(q));
}

template <typename T>
Tensor<T> swav_loss(const std::vector<PooledFeature<T>>& views, std::size_t large_views, const Prototypes<T>& prototypes,
                    const SwavConfig& cfg, bool invariant, const FeatureQueue<T>* queue) {
  if (views.size() < 2 || large_views == 0 || large_views > views.size()) {
    throw ParameterError("swav_loss needs at least two views and 1..views large views");
  }
  if (!(cfg.tau > 0.0)) throw ParameterError("swav_loss: temperature must be positive");
  const std::size_t B = views.front().batch();
  std::vector<Tensor<T>> scores;
  for (const auto& v : views) {
    if (v.batch() != B) throw DimensionError("swav_loss: views differ in batch size");
    scores.push_back(matmul(embed(v, invariant), prototypes.matrix()));
  }
  const std::size_t c = prototypes.clusters();
  Tensor<T> total;
  std::size_t terms = 0;
  for (std::size_t i = 0; i < large_views; ++i) {
    Tensor<T> problem = stop_gradient(scores[i]);
    if (queue != nullptr && !queue->empty()) {
      problem = concat<T>({problem, matmul(queue->contents(), stop_gradient(prototypes.matrix()))}, 0);
    }
    auto plan = sinkhorn_knopp(problem, cfg.iterations, static_cast<T>(cfg.eps));
    Tensor<T> q(Shape{B, c}, std::vector<T>(plan.values().begin(), plan.values().begin() + static_cast<std::ptrdiff_t>(B * c)));
    for (std::size_t j = 0; j < views.size(); ++j) {
      if (j == i) continue;
      const auto logp = log_softmax(scale(scores[j], static_cast<T>(1.0 / cfg.tau)), 1);
      const auto ce = neg(scale(sum(mul(q, logp)), T(1) / static_cast<T>(B)));
      total = total.defined() ? add(total, ce) : ce;
      ++terms;
    }
  }
  return scale(total, T(1) / static_cast<T>(terms));
}

template <typename T>
Tensor<T> simsiam_loss(const PooledFeature<T>& z1, const PooledFeature<T>& z2, const PooledFeature<T>& p1,
                       const PooledFeature<T>& p2, bool invariant) {
  auto prep = [invariant](const PooledFeature<T>& v) { return invariant ? group_average(v).tensor : v.tensor; };
  auto cosine = [](const Tensor<T>& a, const Tensor<T>& b) {
    return sum(mul(l2_normalize(a, 1), l2_normalize(b, 1)), 1);
  };
  const auto t1 = cosine(prep(p1), stop_gradient(prep(z2)));
  const auto t2 = cosine(prep(p2), stop_gradient(prep(z1)));
  return scale(mean(add(t1, t2)), T(-0.5));
}

#define EQUIVAR_INSTANTIATE_CONTRASTIVE(T)                                                                   \
  template Tensor<T> invariant_inner(const PooledFeature<T>&, const PooledFeature<T>&);                      \
  template Tensor<T> embed(const PooledFeature<T>&, bool);                                                   \
  template class FeatureQueue<T>;                                                                            \
  template Tensor<T> moco_loss(const PooledFeature<T>&, const PooledFeature<T>&, const FeatureQueue<T>&, T, bool); \
  template class Prototypes<T>;                                                                              \
  template Tensor<T> sinkhorn_knopp(const Tensor<T>&, std::size_t, T);                                       \
  template Tensor<T> swav_loss(const std::vector<PooledFeature<T>>&, std::size_t, const Prototypes<T>&,      \
                               const SwavConfig&, bool, const FeatureQueue<T>*);                             \
  template Tensor<T> simsiam_loss(const PooledFeature<T>&, const PooledFeature<T>&, const PooledFeature<T>&, \
                                  const PooledFeature<T>&, bool);

EQUIVAR_INSTANTIATE_CONTRASTIVE(float)
EQUIVAR_INSTANTIATE_CONTRASTIVE(double)

}  // namespace equivar
