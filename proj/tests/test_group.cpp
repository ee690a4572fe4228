#include <doctest.h>

#include <random>

#include "equivar/errors.hpp"
#include "equivar/group.hpp"
#include "oracles.hpp"

using namespace equivar;
using TD = Tensor<double>;

namespace {

const GroupKind kAllKinds[] = {GroupKind::trivial, GroupKind::rot4, GroupKind::rot2_flip, GroupKind::rot4_flip};

// Independent coordinate oracle: flip first, then q counter-clockwise turns.
std::pair<std::size_t, std::size_t> oracle_map(const GridTransform& t, std::size_t n, std::size_t r, std::size_t c) {
  if (t.flip) c = n - 1 - c;
  for (int q = 0; q < t.quarter_turns; ++q) {
    const std::size_t nr = n - 1 - c, nc = r;
    r = nr;
    c = nc;
  }
  return {r, c};
}

}  // namespace

TEST_CASE("group orders and names") {
  CHECK(make_group(GroupKind::rot4).order() == 4);
  CHECK(make_group(GroupKind::rot2_flip).order() == 4);
  CHECK(make_group(GroupKind::rot4_flip).order() == 8);
  CHECK(make_group(GroupKind::trivial).order() == 1);
  CHECK(parse_group_kind("rot4_flip") == GroupKind::rot4_flip);
  CHECK(to_string(GroupKind::rot2_flip) == "rot2_flip");
  CHECK_THROWS_AS(parse_group_kind("rot8"), GroupError);
}

TEST_CASE("group axioms hold for every constructible group") {
  for (auto kind : kAllKinds) {
    const auto g = make_group(kind);
    CHECK(g.axiom_violations().empty());
    for (std::size_t a = 0; a < g.order(); ++a) CHECK(g.compose(a, g.inverse(a)) == g.identity());
  }
}

TEST_CASE("corrupted Cayley table is detected") {
  const auto g = make_group(GroupKind::rot4_flip);
  const auto bad = g.with_cayley_entry(1, 1, 0);  // r*r = e is wrong
  CHECK(!bad.axiom_violations().empty());
}

TEST_CASE("cyclic and dihedral relations") {
  const auto r4 = make_group(GroupKind::rot4);
  const auto r = r4.index_of("r");
  CHECK(r4.compose(r, r) == r4.index_of("r2"));

  const auto d4 = make_group(GroupKind::rot4_flip);
  const auto dr = d4.index_of("r"), m = d4.index_of("m");
  CHECK(d4.compose(m, dr) == d4.compose(d4.inverse(dr), m));
  CHECK(d4.compose(dr, m) != d4.compose(m, dr));

  const auto k4 = make_group(GroupKind::rot2_flip);
  for (std::size_t a = 0; a < 4; ++a) CHECK(k4.compose(a, a) == k4.identity());
}

TEST_CASE("grid maps follow the counter-clockwise and horizontal-flip conventions") {
  const auto d4 = make_group(GroupKind::rot4_flip);
  const GridAction act(d4, 3);
  const auto r = d4.index_of("r"), m = d4.index_of("m");
  CHECK(act.map(r)[0] == 2 * 3 + 0);  // (0,0) -> (2,0)
  CHECK(act.map(m)[0] == 0 * 3 + 2);  // (0,0) -> (0,2)
  for (std::size_t i = 0; i < 9; ++i) CHECK(act.map(d4.identity())[i] == i);

  for (std::size_t n : {1, 2, 5, 7}) {
    const GridAction a(d4, n);
    for (std::size_t g = 0; g < d4.order(); ++g)
      for (std::size_t row = 0; row < n; ++row)
        for (std::size_t col = 0; col < n; ++col) {
          const auto [er, ec] = oracle_map(d4.transform(g), n, row, col);
          CHECK(a.map(g)[row * n + col] == er * n + ec);
        }
  }
}

TEST_CASE("grid action is a homomorphism, n = 7") {
  for (auto kind : kAllKinds) {
    const auto g = make_group(kind);
    const GridAction act(g, 7);
    CHECK(act.homomorphism_violations().empty());
    // Exhaustive composition oracle on coordinates.
    for (std::size_t a = 0; a < g.order(); ++a)
      for (std::size_t b = 0; b < g.order(); ++b)
        for (std::size_t i = 0; i < 49; ++i) CHECK(act.map(g.compose(a, b))[i] == act.map(a)[act.map(b)[i]]);
  }
}

TEST_CASE("apply_grid matches explicit rotation and flip loops") {
  std::mt19937_64 rng(21);
  const auto d4 = make_group(GroupKind::rot4_flip);
  const std::size_t n = 6;
  auto x = TD::randn(Shape{n, n}, rng);
  const std::vector<double> plane(x.values().begin(), x.values().end());

  auto check = [&](std::size_t g, const std::vector<double>& expect) {
    auto y = apply_grid(d4, g, x);
    for (std::size_t i = 0; i < n * n; ++i) CHECK(y[i] == expect[i]);
  };
  check(d4.identity(), plane);
  check(d4.index_of("r"), oracle::rot90_plane(plane, n));
  check(d4.index_of("m"), oracle::flip_plane(plane, n));
  // r m: flip first, then rotate.
  check(d4.index_of("rm"), oracle::rot90_plane(oracle::flip_plane(plane, n), n));
}

TEST_CASE("apply_grid examples and left-action property") {
  std::mt19937_64 rng(22);
  const auto d4 = make_group(GroupKind::rot4_flip);
  const GridAction act(d4, 5);
  auto x = TD::randn(Shape{2, 3, 5, 5}, rng);
  const auto r = d4.index_of("r"), m = d4.index_of("m");

  auto e = apply_grid(act, d4.identity(), x);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(e[i] == x[i]);

  auto y = x;
  for (int i = 0; i < 4; ++i) y = apply_grid(act, r, y);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);

  auto rm = apply_grid(act, m, apply_grid(act, r, x));
  auto once = apply_grid(act, d4.compose(m, r), x);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(rm[i] == once[i]);

  for (std::size_t a = 0; a < d4.order(); ++a)
    for (std::size_t b = 0; b < d4.order(); ++b) {
      auto lhs = apply_grid(act, a, apply_grid(act, b, x));
      auto rhs = apply_grid(act, d4.compose(a, b), x);
      bool same = true;
      for (std::size_t i = 0; i < x.size(); ++i) same = same && lhs[i] == rhs[i];
      CHECK(same);
    }

  CHECK_THROWS_AS(apply_grid(d4, r, TD(Shape{2, 3, 4})), DimensionError);
  CHECK_THROWS_AS(apply_grid(act, r, TD(Shape{4, 4})), DimensionError);
}

TEST_CASE("label actions validate their permutations") {
  const auto r4 = make_group(GroupKind::rot4);
  std::vector<std::vector<std::size_t>> cyc(4, std::vector<std::size_t>(4));
  for (std::size_t g = 0; g < 4; ++g)
    for (std::size_t l = 0; l < 4; ++l) cyc[g][l] = r4.compose(g, l);
  const LabelAction good(r4, cyc);
  CHECK(good.violations().empty());

  auto broken = cyc;
  std::swap(broken[1][0], broken[1][1]);
  CHECK(!LabelAction(r4, broken).violations().empty());

  auto not_perm = cyc;
  not_perm[2][0] = not_perm[2][1];
  CHECK_THROWS_AS(LabelAction(r4, not_perm), PermutationError);
}
