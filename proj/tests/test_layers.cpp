#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "equivar/errors.hpp"
#include "equivar/grad_check.hpp"
#include "equivar/layers.hpp"
#include "equivar/ops.hpp"
#include "equivar/pretext.hpp"
#include "oracles.hpp"

using namespace equivar;
using TD = Tensor<double>;

namespace {

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  REQUIRE(a.shape() == b.shape());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(double(a[i]) - double(b[i])));
  return worst;
}

// Filter bank with every spatial slice transformed by g, via explicit loops.
std::vector<double> transform_filter(const FiniteGroup& group, std::size_t g, const std::vector<double>& w,
                                     std::size_t planes, std::size_t k) {
  std::vector<double> out(w.size());
  const auto& t = group.transform(g);
  for (std::size_t p = 0; p < planes; ++p) {
    std::vector<double> plane(w.begin() + p * k * k, w.begin() + (p + 1) * k * k);
    if (t.flip) plane = oracle::flip_plane(plane, k);
    for (int q = 0; q < t.quarter_turns; ++q) plane = oracle::rot90_plane(plane, k);
    std::copy(plane.begin(), plane.end(), out.begin() + p * k * k);
  }
  return out;
}

}  // namespace

TEST_CASE("lifting_conv shape and symmetric filter") {
  const auto d4 = make_group(GroupKind::rot4_flip);
  std::mt19937_64 rng(31);
  auto x = TD::randn(Shape{2, 3, 6, 6}, rng);
  auto w = TD::randn(Shape{4, 3, 3, 3}, rng);
  auto y = lifting_conv(x, w, d4, 1);
  CHECK(y.tensor.shape() == Shape{2, 8, 4, 6, 6});

  auto ones = TD::full(Shape{1, 3, 3, 3}, 1.0);
  auto s = lifting_conv(x, ones, d4, 1);
  const std::size_t plane = 36;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t g = 1; g < 8; ++g)
      for (std::size_t i = 0; i < plane; ++i) CHECK(s.tensor[(b * 8 + g) * plane + i] == s.tensor[b * 8 * plane + i]);

  CHECK_THROWS_AS(lifting_conv(x, TD(Shape{4, 3, 2, 2}), d4, 1), UnsupportedKernelError);
}

TEST_CASE("lifting_conv plane g equals the loop oracle with a transformed filter") {
  const auto d4 = make_group(GroupKind::rot4_flip);
  std::mt19937_64 rng(32);
  const std::size_t B = 1, C = 2, O = 3, n = 5, k = 3;
  auto x = TD::randn(Shape{B, C, n, n}, rng);
  auto w = TD::randn(Shape{O, C, k, k}, rng);
  auto y = lifting_conv(x, w, d4, 1);
  const std::vector<double> xv(x.values().begin(), x.values().end()), wv(w.values().begin(), w.values().end());
  for (std::size_t g = 0; g < 8; ++g) {
    std::size_t oh = 0, ow = 0;
    auto expect = oracle::conv2d_loops(xv, B, C, n, n, transform_filter(d4, g, wv, O * C, k), O, k, 1, 1, oh, ow);
    for (std::size_t i = 0; i < expect.size(); ++i) CHECK(std::abs(y.tensor[g * O * n * n + i] - expect[i]) <= 1e-12);
  }
}

TEST_CASE("lifting_conv and group_conv are equivariant for every element") {
  std::mt19937_64 rng(33);
  for (auto kind : {GroupKind::rot4, GroupKind::rot2_flip, GroupKind::rot4_flip}) {
    const auto group = make_group(kind);
    const std::size_t G = group.order();
    auto w0 = TD::randn(Shape{3, 2, 3, 3}, rng);
    auto w1 = TD::randn(Shape{G, 2, 3, 3, 3}, rng);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      auto x = TD::randn(Shape{1, 2, 7, 7}, rng);
      auto fx = lifting_conv(x, w0, group, 1);
      auto h = GroupFeatureMap<double>{TD::randn(Shape{1, G, 3, 7, 7}, rng), group};
      auto fh = group_conv(h, w1, group, 1);
      for (std::size_t g = 0; g < G; ++g) {
        worst = std::max(worst, max_abs_diff(lifting_conv(apply_grid(group, g, x), w0, group, 1).tensor,
                                             regular_action(fx, g).tensor));
        worst = std::max(worst, max_abs_diff(group_conv(regular_action(h, g), w1, group, 1).tensor,
                                             regular_action(fh, g).tensor));
      }
    }
    CHECK(worst <= 1e-6);
  }
}

TEST_CASE("regular action is a left action") {
  const auto d4 = make_group(GroupKind::rot4_flip);
  std::mt19937_64 rng(34);
  GroupFeatureMap<double> x{TD::randn(Shape{2, 8, 2, 5, 5}, rng), d4};
  for (std::size_t a = 0; a < 8; ++a)
    for (std::size_t b = 0; b < 8; ++b)
      CHECK(max_abs_diff(regular_action(regular_action(x, b), a).tensor, regular_action(x, d4.compose(a, b)).tensor) ==
            0.0);
}

TEST_CASE("group_conv reduces to conv2d for the trivial group") {
  const auto triv = make_group(GroupKind::trivial);
  std::mt19937_64 rng(35);
  auto x = TD::randn(Shape{2, 1, 3, 6, 6}, rng);
  auto w = TD::randn(Shape{1, 4, 3, 3, 3}, rng);
  auto y = group_conv(GroupFeatureMap<double>{x, triv}, w, triv, 1);
  auto plain = conv2d(reshape(x, Shape{2, 3, 6, 6}), reshape(w, Shape{4, 3, 3, 3}), 1, 1);
  CHECK(max_abs_diff(reshape(y.tensor, Shape{2, 4, 6, 6}), plain) <= 1e-12);
}

TEST_CASE("group_conv with only the identity slice matches the single-term expansion") {
  const auto d4 = make_group(GroupKind::rot4_flip);
  std::mt19937_64 rng(36);
  const std::size_t C = 2, O = 2, n = 5, k = 3;
  auto x = TD::randn(Shape{1, 8, C, n, n}, rng);
  std::vector<double> wv(8 * O * C * k * k, 0.0);
  auto slice = oracle::random_vector(O * C * k * k, rng);
  std::copy(slice.begin(), slice.end(), wv.begin());  // w[e] only
  TD w(Shape{8, O, C, k, k}, wv);
  auto y = group_conv(GroupFeatureMap<double>{x, d4}, w, d4, 1);
  for (std::size_t g = 0; g < 8; ++g) {
    // Only h = g contributes: w[g^-1 h] = w[e].
    std::vector<double> xg(x.values().begin() + g * C * n * n, x.values().begin() + (g + 1) * C * n * n);
    std::size_t oh = 0, ow = 0;
    auto expect = oracle::conv2d_loops(xg, 1, C, n, n, transform_filter(d4, g, slice, O * C, k), O, k, 1, 1, oh, ow);
    for (std::size_t i = 0; i < expect.size(); ++i) CHECK(std::abs(y.tensor[g * O * n * n + i] - expect[i]) <= 1e-12);
  }
}

TEST_CASE("group_conv rejects a foreign group") {
  const auto d4 = make_group(GroupKind::rot4_flip);
  const auto r4 = make_group(GroupKind::rot4);
  GroupFeatureMap<double> x{TD(Shape{1, 4, 2, 5, 5}), r4};
  CHECK_THROWS_AS(group_conv(x, TD(Shape{8, 2, 2, 3, 3}), d4, 1), GroupError);
}

TEST_CASE("group_pool_spatial examples") {
  const auto d4 = make_group(GroupKind::rot4_flip);
  auto c = group_pool_spatial(GroupFeatureMap<double>{TD::full(Shape{1, 8, 2, 4, 4}, 2.5), d4});
  for (double v : c.tensor.values()) CHECK(v == 2.5);
  auto big = group_pool_spatial(GroupFeatureMap<double>{TD(Shape{2, 8, 16, 7, 7}), d4});
  CHECK(big.tensor.shape() == Shape{2, 128});

  std::mt19937_64 rng(37);
  GroupFeatureMap<double> x{TD::randn(Shape{2, 8, 3, 6, 6}, rng), d4};
  auto px = group_pool_spatial(x);
  for (std::size_t g = 0; g < 8; ++g) {
    auto lhs = group_pool_spatial(regular_action(x, g));
    auto rhs = pooled_action(px, g);
    CHECK(max_abs_diff(lhs.tensor, rhs.tensor) == 0.0);
  }
}

TEST_CASE("group_average examples and exact invariance") {
  const auto r4 = make_group(GroupKind::rot4);
  PooledFeature<double> same{TD(Shape{1, 8}, {1, 2, 1, 2, 1, 2, 1, 2}), r4};
  CHECK(max_abs_diff(group_average(same).tensor, same.tensor) == 0.0);

  PooledFeature<double> cyc{TD(Shape{1, 4}, {1, 2, 3, 6}), r4};
  const auto avg_cyc = group_average(cyc);
  for (double v : avg_cyc.tensor.values()) CHECK(v == 3.0);

  const auto d4 = make_group(GroupKind::rot4_flip);
  std::mt19937_64 rng(38);
  PooledFeature<double> v{TD::randn(Shape{3, 8 * 5}, rng), d4};
  auto avg = group_average(v);
  for (std::size_t h = 0; h < 8; ++h) CHECK(max_abs_diff(group_average(pooled_action(v, h)).tensor, avg.tensor) == 0.0);
}

TEST_CASE("pooled action is a norm-preserving block permutation") {
  const auto d4 = make_group(GroupKind::rot4_flip);
  std::mt19937_64 rng(39);
  PooledFeature<double> v{TD::randn(Shape{1, 8 * 3}, rng), d4};
  // Squares summed in sorted order, so the norm depends only on the multiset.
  auto norm = [](const TD& t) {
    std::vector<double> sq;
    for (double x : t.values()) sq.push_back(x * x);
    std::sort(sq.begin(), sq.end());
    double s = 0.0;
    for (double x : sq) s += x;
    return std::sqrt(s);
  };
  for (std::size_t g = 0; g < 8; ++g) {
    auto w = pooled_action(v, g);
    CHECK(norm(w.tensor) == norm(v.tensor));
    for (std::size_t h = 0; h < 8; ++h)
      for (std::size_t c = 0; c < 3; ++c) CHECK(w.tensor[d4.compose(g, h) * 3 + c] == v.tensor[h * 3 + c]);
  }
}

TEST_CASE("scale_channels rounding") {
  CHECK(scale_channels(64, 1) == 64);
  CHECK(scale_channels(64, 4) == 32);
  CHECK(scale_channels(64, 8) == 23);
  CHECK(scale_channels(1, 8) == 1);
  CHECK_THROWS_AS(scale_channels(8, 0), ParameterError);
}

TEST_CASE("equivariant head intertwines the label action") {
  std::mt19937_64 rng(40);
  SUBCASE("context labels under rot4") {
    const auto r4 = make_group(GroupKind::rot4);
    const auto labels = context_label_action(r4);
    EquivariantHead<double> head(labels, 3, rng);
    PooledFeature<double> v{TD::randn(Shape{2, 4 * 3}, rng), r4};
    auto base = head(v);
    CHECK(max_abs_diff(head(pooled_action(v, r4.identity())), base) == 0.0);
    const auto r = r4.index_of("r");
    auto moved = head(pooled_action(v, r));
    // right -> up, upper-left -> lower-left
    for (std::size_t b = 0; b < 2; ++b) {
      CHECK(std::abs(moved.at({b, 3}) - base.at({b, 2})) <= 1e-12);
      CHECK(std::abs(moved.at({b, 5}) - base.at({b, 4})) <= 1e-12);
    }
  }
  SUBCASE("random weights, every element, jigsaw-sized label space") {
    const auto d4 = make_group(GroupKind::rot4_flip);
    const auto subset = generate_closed_subset(GroupKind::rot4_flip, 6, 3, 200);
    const auto labels = subset.label_action(d4);
    EquivariantHead<double> head(labels, 4, rng);
    PooledFeature<double> v{TD::randn(Shape{3, 8 * 4}, rng), d4};
    auto base = head(v);
    for (std::size_t g = 0; g < 8; ++g) {
      auto moved = head(pooled_action(v, g));
      double worst = 0.0;
      for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t l = 0; l < labels.label_count(); ++l)
          worst = std::max(worst, std::abs(moved.at({b, labels.apply(g, l)}) - base.at({b, l})));
      CHECK(worst <= 1e-6);
    }
  }
  SUBCASE("non-free label orbits are rejected") {
    const auto r4 = make_group(GroupKind::rot4);
    std::vector<std::vector<std::size_t>> fixed(4, {0, 1, 2, 3});
    CHECK_THROWS_AS(EquivariantHead<double>(LabelAction(r4, fixed), 2, rng), RepresentationError);
    std::vector<std::vector<std::size_t>> odd(4, {0, 1, 2});
    CHECK_THROWS_AS(EquivariantHead<double>(LabelAction(r4, odd), 2, rng), RepresentationError);
  }
}

TEST_CASE("GroupLinear commutes with the pooled action") {
  std::mt19937_64 rng(41);
  const auto d4 = make_group(GroupKind::rot4_flip);
  GroupLinear<double> lin(d4, 3, 5, rng);
  PooledFeature<double> v{TD::randn(Shape{2, 8 * 3}, rng), d4};
  auto base = lin(v);
  CHECK(base.tensor.shape() == Shape{2, 8 * 5});
  for (std::size_t g = 0; g < 8; ++g) CHECK(max_abs_diff(lin(pooled_action(v, g)).tensor, pooled_action(base, g).tensor) <= 1e-12);
}

TEST_CASE("backbone end-to-end equivariance") {
  std::mt19937_64 rng(42);
  SUBCASE("three-layer rot4_flip backbone on 32x32, f32") {
    BackboneConfig cfg;
    cfg.group = GroupKind::rot4_flip;
    cfg.width = 8;
    cfg.depth = 2;
    Backbone<float> net(cfg, rng);
    auto x = Tensor<float>::randn(Shape{2, 3, 32, 32}, rng);
    auto base = net(x);
    for (std::size_t g = 0; g < 8; ++g)
      CHECK(max_abs_diff(net(apply_grid(net.group(), g, x)).tensor, pooled_action(base, g).tensor) <= 1e-4);
  }
  SUBCASE("depth 0 is still equivariant") {
    BackboneConfig cfg;
    cfg.depth = 0;
    cfg.pool_stages = 0;
    cfg.width = 4;
    Backbone<double> net(cfg, rng);
    auto x = TD::randn(Shape{1, 3, 9, 9}, rng);
    auto base = net(x);
    for (std::size_t g = 0; g < 8; ++g)
      CHECK(max_abs_diff(net(apply_grid(net.group(), g, x)).tensor, pooled_action(base, g).tensor) <= 1e-6);
  }
  SUBCASE("trivial group is a plain CNN") {
    BackboneConfig cfg;
    cfg.group = GroupKind::trivial;
    cfg.width = 6;
    Backbone<double> net(cfg, rng);
    CHECK(net.channels() == 6);
    CHECK(net.feature_dim() == 6);
    CHECK(net.parameter_count() == 6 * 3 * 9 + 2 * 6 * 6 * 9);
  }
  SUBCASE("indivisible extent") {
    BackboneConfig cfg;
    cfg.width = 4;
    Backbone<double> net(cfg, rng);
    CHECK_THROWS_AS(net(TD(Shape{1, 3, 10, 10})), DimensionError);
  }
}

TEST_CASE("backbone normalisation statistics") {
  std::mt19937_64 rng(43);
  BackboneConfig cfg;
  cfg.group = GroupKind::rot4;
  cfg.width = 8;
  cfg.depth = 1;
  cfg.pool_stages = 1;
  Backbone<double> net(cfg, rng);
  const auto x = TD::randn(Shape{4, 3, 8, 8}, rng);
  const auto initial = net.running_statistics();
  REQUIRE(initial.size() == 2);
  {
    NoGradGuard guard;
    net(x);
  }
  for (std::size_t s = 0; s < initial.size(); ++s)
    CHECK(max_abs_diff(net.running_statistics()[s], initial[s]) == 0.0);

  SUBCASE("a recorded pass folds the batch moments into the averages") {
    net(x);
    const auto lifted = lifting_conv(x, *net.parameter_slots()[0], net.group(), 1).tensor;
    const std::size_t c = net.channels(), planes = 4 * 4, hw = 64;
    const auto stats = net.running_statistics()[0];
    for (std::size_t ch = 0; ch < c; ++ch) {
      double m = 0.0, v = 0.0;
      for (std::size_t i = 0; i < planes; ++i)
        for (std::size_t p = 0; p < hw; ++p) m += lifted[(i * c + ch) * hw + p];
      m /= double(planes * hw);
      for (std::size_t i = 0; i < planes; ++i)
        for (std::size_t p = 0; p < hw; ++p) v += std::pow(lifted[(i * c + ch) * hw + p] - m, 2);
      v /= double(planes * hw);
      CHECK(stats[ch] == doctest::Approx(0.1 * m).epsilon(1e-12));
      CHECK(stats[c + ch] == doctest::Approx(0.9 + 0.1 * v).epsilon(1e-12));
    }
  }
  SUBCASE("running statistics act per sample and commute with the group") {
    for (int i = 0; i < 5; ++i) net(TD::randn(Shape{4, 3, 8, 8}, rng));
    const auto base = net(x, Statistics::running);
    const TD first(Shape{1, 3, 8, 8}, std::vector<double>(x.values().begin(), x.values().begin() + 3 * 64));
    const auto alone = net(first, Statistics::running).tensor;
    for (std::size_t j = 0; j < alone.size(); ++j) CHECK(alone[j] == doctest::Approx(base.tensor[j]).epsilon(1e-12));
    for (std::size_t g = 0; g < 4; ++g)
      CHECK(max_abs_diff(net(apply_grid(net.group(), g, x), Statistics::running).tensor,
                         pooled_action(base, g).tensor) <= 1e-10);
  }
  SUBCASE("set_running_statistics round trip") {
    net(x);
    const auto stats = net.running_statistics();
    Backbone<double> other(cfg, rng);
    other.set_running_statistics(stats);
    for (std::size_t s = 0; s < stats.size(); ++s)
      CHECK(max_abs_diff(other.running_statistics()[s], stats[s]) == 0.0);
    CHECK_THROWS_AS(other.set_running_statistics({stats[0]}), StructureError);
    CHECK_THROWS_AS(other.set_running_statistics({TD(Shape{2, 3}), stats[1]}), DimensionError);
  }
}

TEST_CASE("layer gradients") {
  std::mt19937_64 rng(43);
  const auto r4 = make_group(GroupKind::rot4);
  auto x = TD::randn(Shape{1, 2, 5, 5}, rng);
  auto w0 = TD::randn(Shape{2, 2, 3, 3}, rng);
  auto w1 = TD::randn(Shape{4, 2, 2, 3, 3}, rng);
  auto probe = TD::randn(Shape{1, 4, 2, 5, 5}, rng);
  auto weigh = [&](const GroupFeatureMap<double>& y) { return sum(mul(y.tensor, probe)); };
  CHECK(grad_check([&](const TD& v) { return weigh(lifting_conv(v, w0, r4, 1)); }, x, 1e-4) <= 1e-4);
  CHECK(grad_check([&](const TD& v) { return weigh(lifting_conv(x, v, r4, 1)); }, w0, 1e-4) <= 1e-4);
  auto h = lifting_conv(x, w0, r4, 1);
  CHECK(grad_check([&](const TD& v) { return weigh(group_conv(h, v, r4, 1)); }, w1, 1e-4) <= 1e-4);
  CHECK(grad_check([&](const TD& v) { return weigh(group_conv(GroupFeatureMap<double>{v, r4}, w1, r4, 1)); },
                   h.tensor.clone(), 1e-4) <= 1e-4);
  auto pw = TD::randn(Shape{1, 8}, rng);
  CHECK(grad_check([&](const TD& v) { return sum(mul(group_pool_spatial(GroupFeatureMap<double>{v, r4}).tensor, pw)); },
                   probe, 1e-4) <= 1e-4);
  CHECK(grad_check([&](const TD& v) { return sum(mul(group_average(PooledFeature<double>{v, r4}).tensor, pw)); },
                   TD::randn(Shape{1, 8}, rng), 1e-4) <= 1e-4);
  CHECK(grad_check([&](const TD& v) { return sum(mul(pooled_action(PooledFeature<double>{v, r4}, 1).tensor, pw)); },
                   TD::randn(Shape{1, 8}, rng), 1e-4) <= 1e-4);
}
