#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include "equivar/errors.hpp"
#include "equivar/grad_check.hpp"
#include "equivar/layers.hpp"
#include "equivar/ops.hpp"
#include "equivar/pretext.hpp"
#include "oracles.hpp"

using namespace equivar;
using TD = Tensor<double>;

namespace {

bool same_values(const TD& a, const TD& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

// Image whose pixel value encodes its own coordinates.
TD coordinate_image(std::size_t n) {
  std::vector<double> v(2 * n * n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      v[r * n + c] = double(c);
      v[n * n + r * n + c] = double(r);
    }
  return TD(Shape{2, n, n}, v);
}

Puzzle random_puzzle(std::mt19937_64& rng) {
  Puzzle p = identity_puzzle();
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

}  // namespace

TEST_CASE("context extraction geometry") {
  const PatchGeometry geo{};  // 8px patches, 2px gaps
  const std::size_t n = 32;
  auto img = coordinate_image(n);
  const auto right = extract_context(img, 2, geo);
  CHECK(right.label == 2);
  // Smallest column of the right patch exceeds the largest column of the centre.
  double centre_max = 0.0, right_min = 1e9;
  for (std::size_t i = 0; i < 64; ++i) {
    centre_max = std::max(centre_max, right.center[i]);
    right_min = std::min(right_min, right.neighbor[i]);
  }
  CHECK(right_min > centre_max);
  // Same rows as the centre.
  for (std::size_t i = 64; i < 128; ++i) CHECK(right.neighbor[i] == right.center[i]);

  // The eight neighbours and the centre partition the 3x3 grid of patches.
  std::set<std::pair<int, int>> covered;
  std::size_t total = 0;
  for (std::size_t l = 0; l < 8; ++l) {
    const auto s = extract_context(img, l, geo);
    CHECK(s.label == l);
    for (std::size_t i = 0; i < 64; ++i) {
      covered.insert({int(s.neighbor[64 + i]), int(s.neighbor[i])});
      ++total;
    }
  }
  for (std::size_t i = 0; i < 64; ++i) {
    covered.insert({int(right.center[64 + i]), int(right.center[i])});
    ++total;
  }
  CHECK(covered.size() == total);
  CHECK(total == 9 * 64);

  CHECK_THROWS_AS(extract_context(TD(Shape{1, 20, 20}), 0, geo), ExtentError);
}

TEST_CASE("context label action") {
  const auto r4 = make_group(GroupKind::rot4);
  const auto act = context_label_action(r4);
  CHECK(act.violations().empty());
  const auto r = r4.index_of("r");
  auto label = [](std::string_view name) {
    return std::size_t(std::find(kContextLabels.begin(), kContextLabels.end(), name) - kContextLabels.begin());
  };
  CHECK(act.apply(r, label("right")) == label("up"));
  CHECK(act.apply(r, label("upper-left")) == label("lower-left"));
  // The two disjoint 4-cycles.
  CHECK(act.apply(r, label("left")) == label("down"));
  CHECK(act.apply(r, label("down")) == label("right"));
  CHECK(act.apply(r, label("up")) == label("left"));
  CHECK(act.apply(r, label("lower-left")) == label("lower-right"));
  CHECK(act.apply(r, label("lower-right")) == label("upper-right"));
  CHECK(act.apply(r, label("upper-right")) == label("upper-left"));
  for (std::size_t l = 0; l < 8; ++l) {
    std::size_t x = l;
    for (int i = 0; i < 4; ++i) x = act.apply(r, x);
    CHECK(x == l);
  }
  CHECK_THROWS_AS(context_label_action(make_group(GroupKind::rot4_flip)), GroupError);
}

TEST_CASE("context labels are equivariant: exhaustive 8 labels x 4 rotations") {
  const auto r4 = make_group(GroupKind::rot4);
  const auto act = context_label_action(r4);
  std::mt19937_64 rng(51);
  auto img = TD::randn(Shape{3, 32, 32}, rng);
  std::size_t matches = 0;
  for (std::size_t g = 0; g < 4; ++g) {
    const auto moved = apply_grid(r4, g, img);
    for (std::size_t l = 0; l < 8; ++l) {
      const auto orig = extract_context(img, l, PatchGeometry{});
      const auto acted = extract_context(moved, act.apply(g, l), PatchGeometry{});
      const bool ok = same_values(acted.neighbor, apply_grid(r4, g, orig.neighbor)) &&
                      same_values(acted.center, apply_grid(r4, g, orig.center));
      // No other label reproduces the transformed neighbour.
      std::size_t hits = 0;
      for (std::size_t k = 0; k < 8; ++k)
        hits += same_values(extract_context(moved, k, PatchGeometry{}).neighbor, apply_grid(r4, g, orig.neighbor));
      matches += ok && hits == 1;
    }
  }
  CHECK(matches == 32);
}

TEST_CASE("puzzle primitives") {
  CHECK(is_bijection(identity_puzzle()));
  Puzzle bad = identity_puzzle();
  bad[3] = 4;
  CHECK(!is_bijection(bad));
  const auto r = grid_permutation(GridTransform{1, false});
  // Cell (0,0) moves to (2,0) under a quarter turn.
  CHECK(r[0] == 6);
  Puzzle p = identity_puzzle();
  for (int i = 0; i < 4; ++i) p = compose(r, p);
  CHECK(p == identity_puzzle());
  CHECK(hamming(identity_puzzle(), r) == 8);
}

TEST_CASE("extract_jigsaw conventions") {
  const PatchGeometry geo{};
  auto img = coordinate_image(32);
  const auto id = extract_jigsaw(img, identity_puzzle(), geo);
  REQUIRE(id.patches.size() == 9);
  for (std::size_t k = 0; k < 9; ++k) {
    const auto [top, left] = geo.origin(32, k / 3, k % 3);
    CHECK(id.patches[k].at({0, 0, 0}) == double(left));
    CHECK(id.patches[k].at({1, 0, 0}) == double(top));
  }

  // sigma = pi_r: slot k shows the un-rotated patch from cell pi_r[k].
  const auto pr = grid_permutation(GridTransform{1, false});
  const auto rs = extract_jigsaw(img, pr, geo);
  for (std::size_t k = 0; k < 9; ++k) {
    const auto [top, left] = geo.origin(32, pr[k] / 3, pr[k] % 3);
    CHECK(rs.patches[k].at({0, 0, 0}) == double(left));
    CHECK(rs.patches[k].at({1, 0, 0}) == double(top));
  }

  // The multiset of patches does not depend on sigma.
  std::mt19937_64 rng(52);
  auto key = [](const JigsawSample<double>& s) {
    std::multiset<std::pair<double, double>> m;
    for (const auto& p : s.patches) m.insert({p.at({0, 0, 0}), p.at({1, 0, 0})});
    return m;
  };
  for (int i = 0; i < 5; ++i) CHECK(key(extract_jigsaw(img, random_puzzle(rng), geo)) == key(id));

  CHECK_THROWS_AS(extract_jigsaw(img, Puzzle{0, 0, 1, 2, 3, 4, 5, 6, 7}, geo), PermutationError);
}

TEST_CASE("generated subset: size, freeness, closure, determinism") {
  const auto d4 = make_group(GroupKind::rot4_flip);
  const auto start = std::chrono::steady_clock::now();
  const auto subset = generate_closed_subset(GroupKind::rot4_flip, 250, 2024);
  MESSAGE("generation took "
          << std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() << " s, min Hamming "
          << subset.min_hamming());
  CHECK(subset.size() == 2000);
  CHECK(subset.orbit_count() == 250);
  CHECK(subset.min_hamming() >= 2);
  CHECK(subset.min_hamming() == min_pairwise_hamming(subset.permutations()));

  std::set<Puzzle> unique(subset.permutations().begin(), subset.permutations().end());
  CHECK(unique.size() == 2000);

  std::size_t closed = 0;
  for (std::size_t g = 0; g < 8; ++g) {
    const auto pi = grid_permutation(d4.transform(g));
    for (const auto& s : subset.permutations()) closed += unique.count(compose(pi, s));
  }
  CHECK(closed == 8 * 2000);

  for (std::size_t r = 0; r < 250; ++r) {
    std::set<Puzzle> orbit;
    for (std::size_t g = 0; g < 8; ++g) orbit.insert(compose(grid_permutation(d4.transform(g)), subset.at(r * 8)));
    CHECK(orbit.size() == 8);
    for (std::size_t k = 0; k < 8; ++k) CHECK(orbit.count(subset.at(r * 8 + k)) == 1);
  }

  const auto again = generate_closed_subset(GroupKind::rot4_flip, 250, 2024);
  CHECK(again.permutations() == subset.permutations());
  const auto other = generate_closed_subset(GroupKind::rot4_flip, 250, 2025);
  CHECK(other.permutations() != subset.permutations());

  std::stringstream a, b;
  subset.write(a);
  again.write(b);
  CHECK(a.str() == b.str());
  std::string header;
  std::getline(a, header);
  CHECK(header.rfind("group=rot4_flip orbits=250 seed=2024 min_hamming=", 0) == 0);
  a.seekg(0);
  const auto back = PermutationSubset::read(a);
  CHECK(back.permutations() == subset.permutations());
  CHECK(back.min_hamming() == subset.min_hamming());
}

TEST_CASE("jigsaw label action") {
  const auto d4 = make_group(GroupKind::rot4_flip);
  const auto subset = generate_closed_subset(GroupKind::rot4_flip, 20, 7, 500);
  std::mt19937_64 rng(53);
  std::uniform_int_distribution<std::size_t> pick_g(0, 7), pick_l(0, subset.size() - 1);

  for (std::size_t l = 0; l < subset.size(); ++l)
    CHECK(jigsaw_label_action(d4, d4.identity(), subset.at(l), subset) == subset.at(l));

  for (int i = 0; i < 100; ++i) {
    const auto g1 = pick_g(rng), g2 = pick_g(rng);
    const auto& s = subset.at(pick_l(rng));
    const auto lhs = jigsaw_label_action(d4, g1, jigsaw_label_action(d4, g2, s, subset), subset);
    CHECK(lhs == jigsaw_label_action(d4, d4.compose(g1, g2), s, subset));
  }
  CHECK(subset.label_action(d4).violations().empty());
  // Labels follow (r, k) -> (r, g k).
  for (std::size_t g = 0; g < 8; ++g)
    for (std::size_t l = 0; l < subset.size(); ++l) CHECK(subset.act(d4, g, l) == (l / 8) * 8 + d4.compose(g, l % 8));

  // A subset missing one orbit member is not closed.
  auto perms = subset.permutations();
  perms.pop_back();
  PermutationSubset broken(GroupKind::rot4_flip, perms, 7, 0);
  CHECK_THROWS_AS(jigsaw_label_action(d4, 1, perms[perms.size() - 1], broken), ClosureError);
}

TEST_CASE("jigsaw pipeline consistency on 100 random (g, sigma) pairs") {
  const auto d4 = make_group(GroupKind::rot4_flip);
  const auto subset = generate_closed_subset(GroupKind::rot4_flip, 30, 9, 500);
  std::mt19937_64 rng(54);
  auto img = TD::randn(Shape{3, 32, 32}, rng);
  std::uniform_int_distribution<std::size_t> pick_g(0, 7), pick_l(0, subset.size() - 1);
  std::size_t ok = 0;
  for (int i = 0; i < 100; ++i) {
    const auto g = pick_g(rng);
    const auto label = pick_l(rng);
    const auto orig = extract_jigsaw(img, subset.at(label), PatchGeometry{});
    const auto acted = extract_jigsaw(apply_grid(d4, g, img), subset.at(subset.act(d4, g, label)), PatchGeometry{});
    bool same = true;
    for (std::size_t k = 0; k < 9; ++k) same = same && same_values(acted.patches[k], apply_grid(d4, g, orig.patches[k]));
    ok += same;
  }
  CHECK(ok == 100);
}

TEST_CASE("pretext loss") {
  std::vector<std::size_t> zero{0};
  CHECK(pretext_loss(TD(Shape{1, 8}, std::vector<double>(8, 0.3)), zero).item() == doctest::Approx(std::log(8.0)));
  CHECK(pretext_loss(TD(Shape{1, 3}, {1e4, 0, 0}), zero).item() == doctest::Approx(0.0));

  std::mt19937_64 rng(55);
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    auto logits = oracle::random_vector(8, rng, 3.0);
    const std::vector<std::size_t> label{std::size_t(t % 8)};
    const double got = pretext_loss(TD(Shape{1, 8}, logits), label).item();
    worst = std::max(worst, std::abs(got - oracle::cross_entropy_scalar(logits, label[0])));
  }
  CHECK(worst <= 1e-9);

  const std::vector<std::size_t> labels{1, 4, 7};
  CHECK(grad_check([&](const TD& v) { return pretext_loss(v, labels); }, TD::randn(Shape{3, 8}, rng)) <= 1e-4);
}

TEST_CASE("loss-level consistency through backbone and equivariant head") {
  std::mt19937_64 rng(56);
  SUBCASE("context prediction, rot4") {
    BackboneConfig cfg;
    cfg.group = GroupKind::rot4;
    cfg.width = 8;
    cfg.depth = 1;
    cfg.pool_stages = 1;
    Backbone<float> net(cfg, rng);
    const auto act = context_label_action(net.group());
    EquivariantHead<float> head(act, 2 * net.channels(), rng);
    auto img = Tensor<float>::randn(Shape{3, 32, 32}, rng);
    auto loss = [&](const Tensor<float>& image, std::size_t label) {
      const auto s = extract_context(image, label, PatchGeometry{});
      auto batch = [](const Tensor<float>& p) { return reshape(p, Shape{1, p.extent(0), p.extent(1), p.extent(2)}); };
      const auto feat = concat_blocks<float>({net(batch(s.center)), net(batch(s.neighbor))});
      const std::vector<std::size_t> l{s.label};
      return pretext_loss(head(feat), l).item();
    };
    double worst = 0.0;
    for (std::size_t g = 0; g < 4; ++g)
      for (std::size_t l = 0; l < 8; ++l)
        worst = std::max(worst, double(std::abs(loss(apply_grid(net.group(), g, img), act.apply(g, l)) - loss(img, l))));
    CHECK(worst <= 1e-4);
  }
  SUBCASE("jigsaw, rot4_flip") {
    BackboneConfig cfg;
    cfg.group = GroupKind::rot4_flip;
    cfg.width = 8;
    cfg.depth = 1;
    cfg.pool_stages = 1;
    Backbone<float> net(cfg, rng);
    const auto subset = generate_closed_subset(GroupKind::rot4_flip, 10, 4, 300);
    EquivariantHead<float> head(subset.label_action(net.group()), 9 * net.channels(), rng);
    auto img = Tensor<float>::randn(Shape{3, 32, 32}, rng);
    auto loss = [&](const Tensor<float>& image, std::size_t label) {
      const auto s = extract_jigsaw(image, subset.at(label), PatchGeometry{});
      std::vector<PooledFeature<float>> feats;
      for (const auto& p : s.patches) feats.push_back(net(reshape(p, Shape{1, p.extent(0), p.extent(1), p.extent(2)})));
      const std::vector<std::size_t> l{label};
      return pretext_loss(head(concat_blocks(feats)), l).item();
    };
    double worst = 0.0;
    for (std::size_t g = 0; g < 8; ++g)
      for (std::size_t l = 0; l < subset.size(); l += 7)
        worst = std::max(worst, double(std::abs(loss(apply_grid(net.group(), g, img), subset.act(net.group(), g, l)) -
                                                loss(img, l))));
    CHECK(worst <= 1e-4);
  }
}
