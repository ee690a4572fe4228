#include "equivar/layers.hpp"

#include <algorithm>
#include <cmath>

#include "equivar/errors.hpp"
#include "equivar/ops.hpp"

namespace equivar {

namespace {

void require_same_group(const FiniteGroup& a, const FiniteGroup& b, const char* where) {
  if (!(a == b)) {
    throw GroupError(std::string(where) + ": group " + std::string(to_string(a.kind())) + " does not match " +
                     std::string(to_string(b.kind())));
  }
}

template <typename T>
T sorted_sum(std::vector<T>& scratch) {
  std::sort(scratch.begin(), scratch.end());
  T s = T(0);
  for (T v : scratch) s += v;
  return s;
}

template <typename T>
std::vector<T> he_normal(std::size_t count, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<T> v(count);
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return v;
}

}  // namespace

template <typename T>
GroupFeatureMap<T> regular_action(const GroupFeatureMap<T>& x, std::size_t g) {
  const auto& G = x.group;
  const std::size_t B = x.tensor.extent(0), n = G.order(), C = x.tensor.extent(2);
  const std::size_t H = x.tensor.extent(3);
  if (x.tensor.extent(1) != n || x.tensor.extent(4) != H) {
    throw DimensionError("regular_action: feature map " + shape_str(x.tensor.shape()) + " is not [B,|G|,C,n,n]");
  }
  const GridAction action(G, H);
  const auto pull = action.pullback(g);
  const std::size_t ginv = G.inverse(g), plane = H * H;
  std::vector<std::uint32_t> index(x.tensor.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t src_h = G.compose(ginv, k);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < plane; ++p)
          index[((b * n + k) * C + c) * plane + p] =
              static_cast<std::uint32_t>(((b * n + src_h) * C + c) * plane + pull[p]);
    }
  return {gather(x.tensor, std::span<const std::uint32_t>(index), x.tensor.shape()), G};
}

template <typename T>
PooledFeature<T> pooled_action(const PooledFeature<T>& v, std::size_t g) {
  const auto& G = v.group;
  const std::size_t B = v.batch(), n = G.order();
  if (v.tensor.rank() != 2 || v.tensor.extent(1) % n != 0) {
    throw StructureError("pooled feature " + shape_str(v.tensor.shape()) + " has no |G|-block structure");
  }
  const std::size_t C = v.block(), ginv = G.inverse(g);
  std::vector<std::uint32_t> index(v.tensor.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t c = 0; c < C; ++c)
        index[(b * n + k) * C + c] = static_cast<std::uint32_t>((b * n + G.compose(ginv, k)) * C + c);
  return {gather(v.tensor, std::span<const std::uint32_t>(index), v.tensor.shape()), G};
}

template <typename T>
GroupFeatureMap<T> lifting_conv(const Tensor<T>& x, const Tensor<T>& w0, const FiniteGroup& group, std::size_t pad) {
  if (w0.rank() != 4 || w0.extent(2) != w0.extent(3)) {
    throw DimensionError("lifting_conv: filter " + shape_str(w0.shape()) + " is not [O,C,k,k]");
  }
  const std::size_t k = w0.extent(2);
  if (k % 2 == 0) throw UnsupportedKernelError("lifting_conv: even kernel size " + std::to_string(k));
  if (x.rank() != 4 || x.extent(2) != x.extent(3)) {
    throw DimensionError("lifting_conv: input " + shape_str(x.shape()) + " is not square [B,C,n,n]");
  }
  const std::size_t n = group.order(), O = w0.extent(0), C = w0.extent(1), kk = k * k;
  const GridAction filter_action(group, k);
  std::vector<std::uint32_t> index(n * O * C * kk);
  for (std::size_t g = 0; g < n; ++g) {
    const auto pull = filter_action.pullback(g);
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < kk; ++p)
          index[((g * O + o) * C + c) * kk + p] = static_cast<std::uint32_t>((o * C + c) * kk + pull[p]);
  }
  const auto bank = gather(w0, std::span<const std::uint32_t>(index), Shape{n * O, C, k, k});
  const auto y = conv2d(x, bank, 1, pad);
  return {reshape(y, Shape{y.extent(0), n, O, y.extent(2), y.extent(3)}), group};
}

template <typename T>
GroupFeatureMap<T> group_conv(const GroupFeatureMap<T>& x, const Tensor<T>& w, const FiniteGroup& group,
                              std::size_t pad) {
  require_same_group(x.group, group, "group_conv");
  const std::size_t n = group.order();
  if (w.rank() != 5 || w.extent(0) != n || w.extent(3) != w.extent(4)) {
    throw DimensionError("group_conv: filter " + shape_str(w.shape()) + " is not [|G|,O,C,k,k]");
  }
  const std::size_t k = w.extent(3);
  if (k % 2 == 0) throw UnsupportedKernelError("group_conv: even kernel size " + std::to_string(k));
  const std::size_t O = w.extent(1), C = w.extent(2), kk = k * k;
  if (x.tensor.extent(1) != n || x.tensor.extent(2) != C) {
    throw DimensionError("group_conv: input " + shape_str(x.tensor.shape()) + " does not match filter " +
                         shape_str(w.shape()) + " on axes 1,2");
  }
  const GridAction filter_action(group, k);
  std::vector<std::uint32_t> index(n * O * n * C * kk);
  for (std::size_t g = 0; g < n; ++g) {
    const auto pull = filter_action.pullback(g);
    const std::size_t ginv = group.inverse(g);
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t h = 0; h < n; ++h) {
        const std::size_t rel = group.compose(ginv, h);
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t p = 0; p < kk; ++p)
            index[(((g * O + o) * n + h) * C + c) * kk + p] =
                static_cast<std::uint32_t>(((rel * O + o) * C + c) * kk + pull[p]);
      }
  }
  const auto bank = gather(w, std::span<const std::uint32_t>(index), Shape{n * O, n * C, k, k});
  const std::size_t B = x.tensor.extent(0), H = x.tensor.extent(3), W = x.tensor.extent(4);
  const auto y = conv2d(reshape(x.tensor, Shape{B, n * C, H, W}), bank, 1, pad);
  return {reshape(y, Shape{B, n, O, y.extent(2), y.extent(3)}), group};
}

template <typename T>
PooledFeature<T> group_pool_spatial(const GroupFeatureMap<T>& x) {
  const auto& t = x.tensor;
  if (t.rank() != 5) throw DimensionError("group_pool_spatial: " + shape_str(t.shape()) + " is not [B,|G|,C,H,W]");
  const std::size_t B = t.extent(0), n = t.extent(1), C = t.extent(2), plane = t.extent(3) * t.extent(4);
  const std::size_t planes = B * n * C;
  std::vector<T> out(planes);
  std::vector<T> scratch(plane);
  const auto v = t.values();
  for (std::size_t q = 0; q < planes; ++q) {
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(q * plane), plane, scratch.begin());
    out[q] = sorted_sum(scratch) / static_cast<T>(plane);
  }
  auto pooled = make_result<T>(Shape{B, n * C}, std::move(out), {t}, [t, planes, plane](detail::Node<T>& self) {
    std::vector<T> g(t.size());
    const T inv = T(1) / static_cast<T>(plane);
    for (std::size_t q = 0; q < planes; ++q)
      std::fill_n(g.begin() + static_cast<std::ptrdiff_t>(q * plane), plane, self.grad[q] * inv);
    accumulate_grad<T>(t, g);
  });
  return {pooled, x.group};
}

template <typename T>
PooledFeature<T> group_average(const PooledFeature<T>& v) {
  const std::size_t n = v.group.order();
  if (v.tensor.rank() != 2 || v.tensor.extent(1) % n != 0) {
    throw StructureError("group_average: " + shape_str(v.tensor.shape()) + " has no |G|-block structure");
  }
  const std::size_t B = v.batch(), C = v.block();
  const auto& t = v.tensor;
  std::vector<T> out(t.size());
  std::vector<T> scratch(n);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t h = 0; h < n; ++h) scratch[h] = t[(b * n + h) * C + c];
      const T m = sorted_sum(scratch) / static_cast<T>(n);
      for (std::size_t k = 0; k < n; ++k) out[(b * n + k) * C + c] = m;
    }
  auto avg = make_result<T>(t.shape(), std::move(out), {t}, [t, B, C, n](detail::Node<T>& self) {
    std::vector<T> g(t.size());
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        T s = T(0);
        for (std::size_t k = 0; k < n; ++k) s += self.grad[(b * n + k) * C + c];
        s /= static_cast<T>(n);
        for (std::size_t h = 0; h < n; ++h) g[(b * n + h) * C + c] = s;
      }
    accumulate_grad<T>(t, g);
  });
  return {avg, v.group};
}

template <typename T>
PooledFeature<T> concat_blocks(const std::vector<PooledFeature<T>>& parts) {
  if (parts.empty()) throw StructureError("concat_blocks of nothing");
  const auto& G = parts.front().group;
  const std::size_t B = parts.front().batch(), n = G.order();
  std::vector<Tensor<T>> pieces;
  for (const auto& p : parts) {
    require_same_group(p.group, G, "concat_blocks");
    if (p.batch() != B || p.tensor.extent(1) % n != 0) throw StructureError("concat_blocks: block mismatch");
    pieces.push_back(reshape(p.tensor, Shape{B, n, p.block()}));
  }
  auto joined = concat(pieces, 2);
  return {reshape(joined, Shape{B, joined.extent(1) * joined.extent(2)}), G};
}

std::size_t scale_channels(std::size_t base_channels, std::size_t group_order) {
  if (group_order == 0) throw ParameterError("scale_channels: group order must be at least 1");
  const double scaled = static_cast<double>(base_channels) / std::sqrt(static_cast<double>(group_order));
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(scaled + 0.5)));
}

template <typename T>
GroupLinear<T>::GroupLinear(const FiniteGroup& group, std::size_t in_block, std::size_t out_block,
                            std::mt19937_64& rng)
    : group_(group) {
  const std::size_t n = group.order();
  weight_ = Tensor<T>::parameter(Shape{n, out_block, in_block}, he_normal<T>(n * out_block * in_block, n * in_block, rng));
  bias_ = Tensor<T>::parameter(Shape{out_block}, std::vector<T>(out_block, T(0)));
  expand_.resize(n * in_block * n * out_block);
  for (std::size_t h = 0; h < n; ++h)
    for (std::size_t c = 0; c < in_block; ++c)
      for (std::size_t g = 0; g < n; ++g) {
        const std::size_t rel = group.compose(group.inverse(g), h);
        for (std::size_t o = 0; o < out_block; ++o)
          expand_[(h * in_block + c) * n * out_block + g * out_block + o] =
              static_cast<std::uint32_t>((rel * out_block + o) * in_block + c);
      }
}

template <typename T>
PooledFeature<T> GroupLinear<T>::operator()(const PooledFeature<T>& v) const {
  require_same_group(v.group, group_, "GroupLinear");
  const std::size_t n = group_.order(), in = weight_.extent(2), out = weight_.extent(1);
  if (v.tensor.extent(1) != n * in) {
    throw StructureError("GroupLinear: input width " + std::to_string(v.tensor.extent(1)) + " != " +
                         std::to_string(n * in));
  }
  const auto full = gather(weight_, std::span<const std::uint32_t>(expand_), Shape{n * in, n * out});
  const auto y = matmul(v.tensor, full);
  const auto with_bias = reshape(add_bias(reshape(y, Shape{v.batch() * n, out}), bias_, 1), Shape{v.batch(), n * out});
  return {with_bias, group_};
}

template <typename T>
EquivariantHead<T>::EquivariantHead(const LabelAction& labels, std::size_t in_block, std::mt19937_64& rng)
    : group_(labels.group()), label_count_(labels.label_count()) {
  const std::size_t n = group_.order(), L = label_count_;
  if (L % n != 0) {
    throw RepresentationError("label count " + std::to_string(L) + " is not a multiple of |G| = " + std::to_string(n));
  }
  // label_of[r][k]: the label reached from orbit r's base by element k.
  std::vector<std::vector<std::size_t>> label_of;
  std::vector<bool> assigned(L, false);
  for (std::size_t base = 0; base < L; ++base) {
    if (assigned[base]) continue;
    std::vector<std::size_t> orbit(n);
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t l = labels.apply(k, base);
      if (assigned[l]) throw RepresentationError("label orbit of " + std::to_string(base) + " is not free");
      assigned[l] = true;
      orbit[k] = l;
    }
    label_of.push_back(std::move(orbit));
  }
  const std::size_t R = label_of.size();
  weight_ = Tensor<T>::parameter(Shape{R, n, in_block}, he_normal<T>(R * n * in_block, n * in_block, rng));
  bias_ = Tensor<T>::parameter(Shape{R}, std::vector<T>(R, T(0)));
  weight_index_.resize(n * in_block * L);
  bias_index_.resize(L);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t label = label_of[r][k];
      bias_index_[label] = static_cast<std::uint32_t>(r);
      const std::size_t kinv = group_.inverse(k);
      for (std::size_t h = 0; h < n; ++h)
        for (std::size_t c = 0; c < in_block; ++c)
          weight_index_[(h * in_block + c) * L + label] =
              static_cast<std::uint32_t>((r * n + group_.compose(kinv, h)) * in_block + c);
    }
}

template <typename T>
Tensor<T> EquivariantHead<T>::operator()(const PooledFeature<T>& v) const {
  require_same_group(v.group, group_, "EquivariantHead");
  const std::size_t n = group_.order(), in = weight_.extent(2);
  if (v.tensor.extent(1) != n * in) {
    throw StructureError("EquivariantHead: input width " + std::to_string(v.tensor.extent(1)) + " != " +
                         std::to_string(n * in));
  }
  const auto full = gather(weight_, std::span<const std::uint32_t>(weight_index_), Shape{n * in, label_count_});
  const auto bias = gather(bias_, std::span<const std::uint32_t>(bias_index_), Shape{label_count_});
  return add_bias(matmul(v.tensor, full), bias, 1);
}

template <typename T>
Linear<T>::Linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  weight_ = Tensor<T>::parameter(Shape{in, out}, he_normal<T>(in * out, in, rng));
  bias_ = Tensor<T>::parameter(Shape{out}, std::vector<T>(out, T(0)));
}

template <typename T>
Tensor<T> Linear<T>::operator()(const Tensor<T>& x) const {
  return add_bias(matmul(x, weight_), bias_, 1);
}

template <typename T>
Backbone<T>::Backbone(const BackboneConfig& cfg, std::mt19937_64& rng) : cfg_(cfg), group_(make_group(cfg.group)) {
  if (cfg.kernel % 2 == 0) throw UnsupportedKernelError("backbone kernel must be odd");
  if (cfg.pool_stages > cfg.depth + 1) throw ParameterError("pool_stages exceeds the number of stages");
  const std::size_t n = group_.order(), k = cfg.kernel;
  channels_ = scale_channels(cfg.width, n);
  const std::size_t c = channels_;
  lifting_ = Tensor<T>::parameter(Shape{c, cfg.in_channels, k, k}, he_normal<T>(c * cfg.in_channels * k * k,
                                                                                 cfg.in_channels * k * k, rng));
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    layers_.push_back(Tensor<T>::parameter(Shape{n, c, c, k, k}, he_normal<T>(n * c * c * k * k, n * c * k * k, rng)));
  }
  running_mean_.assign(cfg.depth + 1, std::vector<T>(c, T(0)));
  running_var_.assign(cfg.depth + 1, std::vector<T>(c, T(1)));
}

template <typename T>
Tensor<T> Backbone<T>::normalize(const Tensor<T>& x, std::size_t stage, Statistics stats) const {
  const Shape sh = x.shape();
  const std::size_t planes = sh[0] * sh[1], C = sh[2], HW = sh[3] * sh[4];
  auto& mean = running_mean_[stage];
  auto& var = running_var_[stage];
  if (stats == Statistics::running) {
    std::vector<T> scale(x.size()), shift(C);
    for (std::size_t c = 0; c < C; ++c) {
      const T s = T(1) / std::sqrt(var[c] + kEps);
      shift[c] = -mean[c] * s;
      for (std::size_t i = 0; i < planes; ++i) std::fill_n(scale.begin() + (i * C + c) * HW, HW, s);
    }
    return add_bias(mul(x, Tensor<T>(sh, std::move(scale))), Tensor<T>(Shape{C}, std::move(shift)), 2);
  }
  if (grad_enabled()) {
    const T* xv = x.values().data();
    const T count = static_cast<T>(planes * HW);
    for (std::size_t c = 0; c < C; ++c) {
      T m = T(0), v = T(0);
      for (std::size_t i = 0; i < planes; ++i)
        for (std::size_t p = 0; p < HW; ++p) m += xv[(i * C + c) * HW + p];
      m /= count;
      for (std::size_t i = 0; i < planes; ++i)
        for (std::size_t p = 0; p < HW; ++p) {
          const T d = xv[(i * C + c) * HW + p] - m;
          v += d * d;
        }
      v /= count;
      mean[c] += kMomentum * (m - mean[c]);
      var[c] += kMomentum * (v - var[c]);
    }
  }
  return reshape(channel_normalize(reshape(x, Shape{1, planes, C, sh[3], sh[4]}), kEps), sh);
}

template <typename T>
std::vector<Tensor<T>> Backbone<T>::running_statistics() const {
  std::vector<Tensor<T>> out;
  for (std::size_t i = 0; i < running_mean_.size(); ++i) {
    std::vector<T> v = running_mean_[i];
    v.insert(v.end(), running_var_[i].begin(), running_var_[i].end());
    out.emplace_back(Shape{2, channels_}, std::move(v));
  }
  return out;
}

template <typename T>
void Backbone<T>::set_running_statistics(const std::vector<Tensor<T>>& stats) {
  if (stats.size() != running_mean_.size()) throw StructureError("running statistics stage count mismatch");
  for (std::size_t i = 0; i < stats.size(); ++i) {
    if (stats[i].shape() != Shape{2, channels_}) throw DimensionError("running statistics shape mismatch");
    const auto v = stats[i].values();
    running_mean_[i].assign(v.begin(), v.begin() + channels_);
    running_var_[i].assign(v.begin() + channels_, v.end());
  }
}

template <typename T>
GroupFeatureMap<T> Backbone<T>::feature_map(const Tensor<T>& x, Statistics stats) const {
  if (x.rank() != 4 || x.extent(2) != x.extent(3)) {
    throw DimensionError("backbone input " + shape_str(x.shape()) + " is not square [B,C,n,n]");
  }
  const std::size_t stride = std::size_t{1} << cfg_.pool_stages;
  if (x.extent(2) % stride != 0) {
    throw DimensionError("backbone input extent " + std::to_string(x.extent(2)) + " not divisible by pooling stride " +
                         std::to_string(stride));
  }
  const std::size_t pad = cfg_.kernel / 2;
  auto stage = [&](GroupFeatureMap<T> fm, std::size_t index) {
    if (cfg_.normalize) fm.tensor = normalize(fm.tensor, index, stats);
    fm.tensor = relu(fm.tensor);
    if (index < cfg_.pool_stages) fm.tensor = avg_pool2d(fm.tensor, 2);
    return fm;
  };
  auto fm = stage(lifting_conv(x, lifting_, group_, pad), 0);
  for (std::size_t i = 0; i < layers_.size(); ++i) fm = stage(group_conv(fm, layers_[i], group_, pad), i + 1);
  return fm;
}

template <typename T>
PooledFeature<T> Backbone<T>::operator()(const Tensor<T>& x, Statistics stats) const {
  return group_pool_spatial(feature_map(x, stats));
}

template <typename T>
std::size_t Backbone<T>::parameter_count() const {
  std::size_t total = lifting_.size();
  for (const auto& l : layers_) total += l.size();
  return total;
}

template <typename T>
std::vector<Tensor<T>*> Backbone<T>::parameter_slots() {
  std::vector<Tensor<T>*> out{&lifting_};
  for (auto& l : layers_) out.push_back(&l);
  return out;
}

#define EQUIVAR_INSTANTIATE_LAYERS(T)                                                                         \
  template GroupFeatureMap<T> regular_action(const GroupFeatureMap<T>&, std::size_t);                         \
  template PooledFeature<T> pooled_action(const PooledFeature<T>&, std::size_t);                              \
  template GroupFeatureMap<T> lifting_conv(const Tensor<T>&, const Tensor<T>&, const FiniteGroup&, std::size_t); \
  template GroupFeatureMap<T> group_conv(const GroupFeatureMap<T>&, const Tensor<T>&, const FiniteGroup&,      \
                                         std::size_t);                                                         \
  template PooledFeature<T> group_pool_spatial(const GroupFeatureMap<T>&);                                    \
  template PooledFeature<T> group_average(const PooledFeature<T>&);                                           \
  template PooledFeature<T> concat_blocks(const std::vector<PooledFeature<T>>&);                              \
  template class GroupLinear<T>;                                                                              \
  template class EquivariantHead<T>;                                                                          \
  template class Linear<T>;                                                                                   \
  template class Backbone<T>;

EQUIVAR_INSTANTIATE_LAYERS(float)
EQUIVAR_INSTANTIATE_LAYERS(double)

}  // namespace equivar
