#include "equivar/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "equivar/errors.hpp"

namespace equivar {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
  }
}

template <typename T>
std::span<const T> grad_of(const detail::Node<T>& self) {
  return self.grad;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [a, b](detail::Node<T>& self) {
    accumulate_grad(a, grad_of(self));
    accumulate_grad(b, grad_of(self));
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [a, b](detail::Node<T>& self) {
    accumulate_grad(a, grad_of(self));
    if (b.requires_grad()) {
      std::vector<T> g(self.grad.size());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = -self.grad[i];
      accumulate_grad<T>(b, g);
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [a, b](detail::Node<T>& self) {
    const auto& g = self.grad;
    if (a.requires_grad()) {
      std::vector<T> ga(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * b[i];
      accumulate_grad<T>(a, ga);
    }
    if (b.requires_grad()) {
      std::vector<T> gb(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * a[i];
      accumulate_grad<T>(b, gb);
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
  return make_result<T>(x.shape(), std::move(out), {x}, [x, s](detail::Node<T>& self) {
    std::vector<T> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * s;
    accumulate_grad<T>(x, g);
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + s;
  return make_result<T>(x.shape(), std::move(out), {x},
                        [x](detail::Node<T>& self) { accumulate_grad(x, grad_of(self)); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x[i]);
  return make_result<T>(x.shape(), std::move(out), {x}, [x](detail::Node<T>& self) {
    std::vector<T> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * self.value[i];
    accumulate_grad<T>(x, g);
  });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(x[i] > T(0)) || !std::isfinite(x[i])) {
      throw NumericError("log of non-positive or non-finite value at flat index " + std::to_string(i));
    }
    out[i] = std::log(x[i]);
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [x](detail::Node<T>& self) {
    std::vector<T> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] / x[i];
    accumulate_grad<T>(x, g);
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  const T* xv = x.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  return make_result<T>(x.shape(), std::move(out), {x}, [x](detail::Node<T>& self) {
    if (!x.requires_grad()) return;
    const T* xv = x.values().data();
    const T* dy = self.grad.data();
    T* g = x.node()->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (xv[i] > T(0)) g[i] += dy[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.values()) s += v;
  return make_result<T>(Shape{}, {s}, {x}, [x](detail::Node<T>& self) {
    std::vector<T> g(x.size(), self.grad[0]);
    accumulate_grad<T>(x, g);
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_at(x.shape(), axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<T> out(s.outer * s.inner, T(0));
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.n; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += x[(o * s.n + k) * s.inner + i];
  return make_result<T>(std::move(shape), std::move(out), {x}, [x, s](detail::Node<T>& self) {
    std::vector<T> g(x.size());
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.n; ++k)
        for (std::size_t i = 0; i < s.inner; ++i) g[(o * s.n + k) * s.inner + i] = self.grad[o * s.inner + i];
    accumulate_grad<T>(x, g);
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis) {
  return scale(sum(x, axis), T(1) / static_cast<T>(x.extent(axis)));
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_at(x.shape(), axis);
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::size_t k) { return (o * s.n + k) * s.inner + i; };
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < s.n; ++k) mx = std::max(mx, x[at(k)]);
      T z = T(0);
      for (std::size_t k = 0; k < s.n; ++k) z += (out[at(k)] = std::exp(x[at(k)] - mx));
      for (std::size_t k = 0; k < s.n; ++k) out[at(k)] /= z;
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [x, s](detail::Node<T>& self) {
    std::vector<T> g(x.size());
    const auto& y = self.value;
    const auto& dy = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        auto at = [&](std::size_t k) { return (o * s.n + k) * s.inner + i; };
        T dot = T(0);
        for (std::size_t k = 0; k < s.n; ++k) dot += dy[at(k)] * y[at(k)];
        for (std::size_t k = 0; k < s.n; ++k) g[at(k)] = y[at(k)] * (dy[at(k)] - dot);
      }
    }
    accumulate_grad<T>(x, g);
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_at(x.shape(), axis);
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::size_t k) { return (o * s.n + k) * s.inner + i; };
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < s.n; ++k) mx = std::max(mx, x[at(k)]);
      T z = T(0);
      for (std::size_t k = 0; k < s.n; ++k) z += std::exp(x[at(k)] - mx);
      const T lse = mx + std::log(z);
      for (std::size_t k = 0; k < s.n; ++k) out[at(k)] = x[at(k)] - lse;
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [x, s](detail::Node<T>& self) {
    std::vector<T> g(x.size());
    const auto& y = self.value;
    const auto& dy = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        auto at = [&](std::size_t k) { return (o * s.n + k) * s.inner + i; };
        T total = T(0);
        for (std::size_t k = 0; k < s.n; ++k) total += dy[at(k)];
        for (std::size_t k = 0; k < s.n; ++k) g[at(k)] = dy[at(k)] - std::exp(y[at(k)]) * total;
      }
    }
    accumulate_grad<T>(x, g);
  });
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, std::size_t axis, T eps) {
  const AxisSplit s = split_at(x.shape(), axis);
  std::vector<T> out(x.size());
  std::vector<T> radius(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      T sq = T(0);
      for (std::size_t k = 0; k < s.n; ++k) {
        const T v = x[(o * s.n + k) * s.inner + i];
        sq += v * v;
      }
      const T r = std::max(std::sqrt(sq), eps);
      radius[o * s.inner + i] = r;
      for (std::size_t k = 0; k < s.n; ++k) out[(o * s.n + k) * s.inner + i] = x[(o * s.n + k) * s.inner + i] / r;
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [x, s, eps, radius](detail::Node<T>& self) {
    std::vector<T> g(x.size());
    const auto& y = self.value;
    const auto& dy = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const T r = radius[o * s.inner + i];
        auto at = [&](std::size_t k) { return (o * s.n + k) * s.inner + i; };
        T dot = T(0);
        if (r > eps) {
          for (std::size_t k = 0; k < s.n; ++k) dot += dy[at(k)] * y[at(k)];
        }
        for (std::size_t k = 0; k < s.n; ++k) g[at(k)] = (dy[at(k)] - y[at(k)] * dot) / r;
      }
    }
    accumulate_grad<T>(x, g);
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                         " (axis 1 of lhs must equal axis 0 of rhs)");
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  std::vector<T> out(m * n);
  MapMat<T>(out.data(), m, n).noalias() = ConstMapMat<T>(a.values().data(), m, k) * ConstMapMat<T>(b.values().data(), k, n);
  return make_result<T>(Shape{m, n}, std::move(out), {a, b}, [a, b, m, k, n](detail::Node<T>& self) {
    ConstMapMat<T> dy(self.grad.data(), m, n);
    if (a.requires_grad()) {
      std::vector<T> ga(m * k);
      MapMat<T>(ga.data(), m, k).noalias() = dy * ConstMapMat<T>(b.values().data(), k, n).transpose();
      accumulate_grad<T>(a, ga);
    }
    if (b.requires_grad()) {
      std::vector<T> gb(k * n);
      MapMat<T>(gb.data(), k, n).noalias() = ConstMapMat<T>(a.values().data(), m, k).transpose() * dy;
      accumulate_grad<T>(b, gb);
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects rank 2, got " + shape_str(a.shape()));
  const std::size_t m = a.extent(0), n = a.extent(1);
  std::vector<std::uint32_t> index(m * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < m; ++i) index[j * m + i] = static_cast<std::uint32_t>(i * n + j);
  return gather(a, std::span<const std::uint32_t>(index), Shape{n, m});
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  }
  std::vector<T> out(x.values().begin(), x.values().end());
  return make_result<T>(std::move(shape), std::move(out), {x},
                        [x](detail::Node<T>& self) { accumulate_grad(x, grad_of(self)); });
}

template <typename T>
Tensor<T> index_permute(const Tensor<T>& x, std::size_t axis, std::span<const std::size_t> perm) {
  const AxisSplit s = split_at(x.shape(), axis);
  if (perm.size() != s.n) {
    throw PermutationError("permutation of length " + std::to_string(perm.size()) + " on axis of extent " +
                           std::to_string(s.n));
  }
  std::vector<bool> seen(s.n, false);
  for (std::size_t p : perm) {
    if (p >= s.n || seen[p]) throw PermutationError("index_permute: permutation is not a bijection");
    seen[p] = true;
  }
  std::vector<std::uint32_t> index(x.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.n; ++k)
      for (std::size_t i = 0; i < s.inner; ++i)
        index[(o * s.n + k) * s.inner + i] = static_cast<std::uint32_t>((o * s.n + perm[k]) * s.inner + i);
  return gather(x, std::span<const std::uint32_t>(index), x.shape());
}

template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::span<const std::uint32_t> index, Shape shape) {
  if (numel(shape) != index.size()) {
    throw DimensionError("gather: " + std::to_string(index.size()) + " indices for shape " + shape_str(shape));
  }
  std::vector<T> out(index.size());
  const auto src = x.values();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= src.size()) throw DimensionError("gather: index out of range");
    out[i] = src[index[i]];
  }
  std::vector<std::uint32_t> saved(index.begin(), index.end());
  return make_result<T>(std::move(shape), std::move(out), {x}, [x, saved = std::move(saved)](detail::Node<T>& self) {
    std::vector<T> g(x.size(), T(0));
    for (std::size_t i = 0; i < saved.size(); ++i) g[saved[i]] += self.grad[i];
    accumulate_grad<T>(x, g);
  });
}

template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  return Tensor<T>(x.shape(), std::vector<T>(x.values().begin(), x.values().end()));
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw DimensionError("concat of zero tensors");
  Shape shape = xs.front().shape();
  split_at(shape, axis);
  std::size_t total = 0;
  for (const auto& t : xs) {
    Shape a = t.shape(), b = shape;
    if (a.size() != b.size()) throw DimensionError("concat: rank mismatch");
    a[axis] = b[axis] = 0;
    if (a != b) throw DimensionError("concat: shapes " + shape_str(t.shape()) + " and " + shape_str(shape) +
                                     " differ off axis " + std::to_string(axis));
    total += t.extent(axis);
  }
  shape[axis] = total;
  const AxisSplit out_split = split_at(shape, axis);
  std::vector<T> out(numel(shape));
  std::size_t offset = 0;
  for (const auto& t : xs) {
    const AxisSplit s = split_at(t.shape(), axis);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.n; ++k)
        for (std::size_t i = 0; i < s.inner; ++i)
          out[(o * out_split.n + offset + k) * s.inner + i] = t[(o * s.n + k) * s.inner + i];
    offset += s.n;
  }
  return make_result<T>(std::move(shape), std::move(out), xs, [xs, out_split](detail::Node<T>& self) {
    std::size_t offset = 0;
    for (const auto& t : xs) {
      const std::size_t n = t.size() / (out_split.outer * out_split.inner);
      if (t.requires_grad()) {
        std::vector<T> g(t.size());
        for (std::size_t o = 0; o < out_split.outer; ++o)
          for (std::size_t k = 0; k < n; ++k)
            for (std::size_t i = 0; i < out_split.inner; ++i)
              g[(o * n + k) * out_split.inner + i] = self.grad[(o * out_split.n + offset + k) * out_split.inner + i];
        accumulate_grad<T>(t, g);
      }
      offset += n;
    }
  });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias, std::size_t axis) {
  const AxisSplit s = split_at(x.shape(), axis);
  if (bias.size() != s.n) {
    throw DimensionError("add_bias: bias of " + std::to_string(bias.size()) + " elements for axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.n; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t at = (o * s.n + k) * s.inner + i;
        out[at] = x[at] + bias[k];
      }
  return make_result<T>(x.shape(), std::move(out), {x, bias}, [x, bias, s](detail::Node<T>& self) {
    accumulate_grad(x, grad_of(self));
    if (bias.requires_grad()) {
      std::vector<T> g(s.n, T(0));
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t k = 0; k < s.n; ++k)
          for (std::size_t i = 0; i < s.inner; ++i) g[k] += self.grad[(o * s.n + k) * s.inner + i];
      accumulate_grad<T>(bias, g);
    }
  });
}

namespace {

struct ConvGeometry {
  std::size_t batch, channels, height, width, out_channels, kh, kw, stride, pad, out_h, out_w;
  std::size_t patch() const { return channels * kh * kw; }
  std::size_t positions() const { return out_h * out_w; }
};

// cols[(c*kh+i)*kw+j, b*P + p]
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
  const std::size_t P = g.positions();
  const std::size_t ld = g.batch * P;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = cols + ((c * g.kh + i) * g.kw + j) * ld;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const T* plane = x + (b * g.channels + c) * g.height * g.width;
          T* dst = row + b * P;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const std::ptrdiff_t xx =
                  static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
              const bool inside = y >= 0 && xx >= 0 && y < static_cast<std::ptrdiff_t>(g.height) &&
                                  xx < static_cast<std::ptrdiff_t>(g.width);
              dst[oy * g.out_w + ox] = inside ? plane[y * static_cast<std::ptrdiff_t>(g.width) + xx] : T(0);
            }
          }
        }
      }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* cols, T* dx) {
  const std::size_t P = g.positions();
  const std::size_t ld = g.batch * P;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = cols + ((c * g.kh + i) * g.kw + j) * ld;
        for (std::size_t b = 0; b < g.batch; ++b) {
          T* plane = dx + (b * g.channels + c) * g.height * g.width;
          const T* src = row + b * P;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
            if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.height)) continue;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const std::ptrdiff_t xx =
                  static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
              if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(g.width)) continue;
              plane[y * static_cast<std::ptrdiff_t>(g.width) + xx] += src[oy * g.out_w + ox];
            }
          }
        }
      }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, std::size_t stride, std::size_t pad) {
  if (input.rank() != 4) throw DimensionError("conv2d: input must be [B,C,H,W], got " + shape_str(input.shape()));
  if (weight.rank() != 4) throw DimensionError("conv2d: weight must be [O,C,k,k], got " + shape_str(weight.shape()));
  if (input.extent(1) != weight.extent(1)) {
    throw DimensionError("conv2d: input axis 1 (" + std::to_string(input.extent(1)) + ") != weight axis 1 (" +
                         std::to_string(weight.extent(1)) + ")");
  }
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  ConvGeometry g{};
  g.batch = input.extent(0);
  g.channels = input.extent(1);
  g.height = input.extent(2);
  g.width = input.extent(3);
  g.out_channels = weight.extent(0);
  g.kh = weight.extent(2);
  g.kw = weight.extent(3);
  g.stride = stride;
  g.pad = pad;
  if (g.kh > g.height + 2 * pad || g.kw > g.width + 2 * pad) {
    throw DimensionError("conv2d: kernel axes 2,3 " + shape_str(weight.shape()) + " exceed padded input axes 2,3 " +
                         shape_str(input.shape()));
  }
  g.out_h = (g.height + 2 * pad - g.kh) / stride + 1;
  g.out_w = (g.width + 2 * pad - g.kw) / stride + 1;

  const std::size_t K = g.patch(), P = g.positions(), N = g.batch * P;
  std::vector<T> cols(K * N);
  im2col(g, input.values().data(), cols.data());
  RowMat<T> y = ConstMapMat<T>(weight.values().data(), g.out_channels, K) * MapMat<T>(cols.data(), K, N);
  std::vector<T> out(g.batch * g.out_channels * P);
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t o = 0; o < g.out_channels; ++o)
      std::copy_n(y.data() + o * N + b * P, P, out.data() + (b * g.out_channels + o) * P);

  return make_result<T>(Shape{g.batch, g.out_channels, g.out_h, g.out_w}, std::move(out), {input, weight},
                        [input, weight, g](detail::Node<T>& self) {
                          const std::size_t K = g.patch(), P = g.positions(), N = g.batch * P;
                          RowMat<T> dy(g.out_channels, N);
                          for (std::size_t b = 0; b < g.batch; ++b)
                            for (std::size_t o = 0; o < g.out_channels; ++o)
                              std::copy_n(self.grad.data() + (b * g.out_channels + o) * P, P, dy.data() + o * N + b * P);
                          if (weight.requires_grad()) {
                            std::vector<T> cols(K * N);
                            im2col(g, input.values().data(), cols.data());
                            std::vector<T> gw(g.out_channels * K);
                            MapMat<T>(gw.data(), g.out_channels, K).noalias() =
                                dy * MapMat<T>(cols.data(), K, N).transpose();
                            accumulate_grad<T>(weight, gw);
                          }
                          if (input.requires_grad()) {
                            std::vector<T> dcols(K * N);
                            MapMat<T>(dcols.data(), K, N).noalias() =
                                ConstMapMat<T>(weight.values().data(), g.out_channels, K).transpose() * dy;
                            std::vector<T> gx(input.size(), T(0));
                            col2im(g, dcols.data(), gx.data());
                            accumulate_grad<T>(input, gx);
                          }
                        });
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k) {
  if (x.rank() < 2) throw DimensionError("avg_pool2d needs two trailing spatial axes");
  const std::size_t h = x.extent(x.rank() - 2), w = x.extent(x.rank() - 1);
  if (k == 0 || h % k != 0 || w % k != 0) {
    throw DimensionError("avg_pool2d: spatial axes " + shape_str(x.shape()) + " not divisible by " + std::to_string(k));
  }
  const std::size_t planes = x.size() / (h * w), oh = h / k, ow = w / k;
  Shape shape = x.shape();
  shape[shape.size() - 2] = oh;
  shape[shape.size() - 1] = ow;
  const T inv = T(1) / static_cast<T>(k * k);
  std::vector<T> out(planes * oh * ow, T(0));
  const T* xv = x.values().data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < h; ++y) {
      const T* row = xv + (p * h + y) * w;
      T* dst = out.data() + (p * oh + y / k) * ow;
      for (std::size_t xx = 0; xx < ow; ++xx)
        for (std::size_t u = 0; u < k; ++u) dst[xx] += row[xx * k + u] * inv;
    }
  return make_result<T>(std::move(shape), std::move(out), {x}, [x, planes, h, w, k, oh, ow, inv](detail::Node<T>& self) {
    if (!x.requires_grad()) return;
    T* g = x.node()->grad_buffer();
    const T* dy = self.grad.data();
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < h; ++y) {
        const T* src = dy + (p * oh + y / k) * ow;
        T* row = g + (p * h + y) * w;
        for (std::size_t xx = 0; xx < ow; ++xx)
          for (std::size_t u = 0; u < k; ++u) row[xx * k + u] += src[xx] * inv;
      }
  });
}

template <typename T>
Tensor<T> channel_normalize(const Tensor<T>& x, T eps) {
  if (x.rank() != 5) throw DimensionError("channel_normalize expects [B,G,C,H,W], got " + shape_str(x.shape()));
  const std::size_t B = x.extent(0), G = x.extent(1), C = x.extent(2), HW = x.extent(3) * x.extent(4);
  const std::size_t count = G * HW;
  auto plane = [=](std::size_t b, std::size_t g, std::size_t c) { return ((b * G + g) * C + c) * HW; };
  std::vector<T> out(x.size());
  std::vector<T> inv_std(B * C);
  const T* xv = x.values().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      T m = T(0);
      for (std::size_t g = 0; g < G; ++g) {
        const T* src = xv + plane(b, g, c);
        for (std::size_t p = 0; p < HW; ++p) m += src[p];
      }
      m /= static_cast<T>(count);
      T var = T(0);
      for (std::size_t g = 0; g < G; ++g) {
        const T* src = xv + plane(b, g, c);
        for (std::size_t p = 0; p < HW; ++p) {
          const T d = src[p] - m;
          var += d * d;
        }
      }
      var /= static_cast<T>(count);
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[b * C + c] = is;
      for (std::size_t g = 0; g < G; ++g) {
        const T* src = xv + plane(b, g, c);
        T* dst = out.data() + plane(b, g, c);
        for (std::size_t p = 0; p < HW; ++p) dst[p] = (src[p] - m) * is;
      }
    }
  return make_result<T>(x.shape(), std::move(out), {x}, [x, inv_std, B, G, C, HW, count, plane](detail::Node<T>& self) {
    if (!x.requires_grad()) return;
    T* gx = x.node()->grad_buffer();
    const T* y = self.value.data();
    const T* dy = self.grad.data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        T mean_dy = T(0), mean_dyy = T(0);
        for (std::size_t g = 0; g < G; ++g) {
          const std::size_t o = plane(b, g, c);
          for (std::size_t p = 0; p < HW; ++p) {
            mean_dy += dy[o + p];
            mean_dyy += dy[o + p] * y[o + p];
          }
        }
        mean_dy /= static_cast<T>(count);
        mean_dyy /= static_cast<T>(count);
        const T is = inv_std[b * C + c];
        for (std::size_t g = 0; g < G; ++g) {
          const std::size_t o = plane(b, g, c);
          for (std::size_t p = 0; p < HW; ++p) gx[o + p] += is * (dy[o + p] - mean_dy - y[o + p] * mean_dyy);
        }
      }
  });
}

#define EQUIVAR_INSTANTIATE_OPS(T)                                                                     \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> scale(const Tensor<T>&, T);                                                       \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                  \
  template Tensor<T> exp(const Tensor<T>&);                                                            \
  template Tensor<T> log(const Tensor<T>&);                                                            \
  template Tensor<T> relu(const Tensor<T>&);                                                           \
  template Tensor<T> sum(const Tensor<T>&);                                                            \
  template Tensor<T> sum(const Tensor<T>&, std::size_t);                                               \
  template Tensor<T> mean(const Tensor<T>&);                                                           \
  template Tensor<T> mean(const Tensor<T>&, std::size_t);                                              \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                           \
  template Tensor<T> log_softmax(const Tensor<T>&, std::size_t);                                       \
  template Tensor<T> l2_normalize(const Tensor<T>&, std::size_t, T);                                   \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> transpose(const Tensor<T>&);                                                      \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                 \
  template Tensor<T> index_permute(const Tensor<T>&, std::size_t, std::span<const std::size_t>);       \
  template Tensor<T> gather(const Tensor<T>&, std::span<const std::uint32_t>, Shape);                  \
  template Tensor<T> stop_gradient(const Tensor<T>&);                                                  \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                               \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&, std::size_t);                        \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);             \
  template Tensor<T> avg_pool2d(const Tensor<T>&, std::size_t);                                        \
  template Tensor<T> channel_normalize(const Tensor<T>&, T);

EQUIVAR_INSTANTIATE_OPS(float)
EQUIVAR_INSTANTIATE_OPS(double)

}  // namespace equivar
