#include <doctest.h>

#include <cmath>
#include <random>

#include "equivar/contrastive.hpp"
#include "equivar/errors.hpp"
#include "equivar/grad_check.hpp"
#include "oracles.hpp"

using namespace equivar;
using TD = Tensor<double>;
using PF = PooledFeature<double>;

namespace {

TD unit_rows(std::size_t rows, std::size_t dim, std::mt19937_64& rng) {
  return l2_normalize(TD::randn(Shape{rows, dim}, rng), 1);
}

// Replaces sample m of a batch by its image under g.
TD transform_sample(const TD& batch, std::size_t m, const FiniteGroup& group, std::size_t g) {
  const std::size_t per = batch.size() / batch.extent(0);
  Shape one = batch.shape();
  one[0] = 1;
  TD sample(one, std::vector<double>(batch.values().begin() + m * per, batch.values().begin() + (m + 1) * per));
  auto moved = apply_grid(group, g, sample);
  std::vector<double> out(batch.values().begin(), batch.values().end());
  std::copy(moved.values().begin(), moved.values().end(), out.begin() + m * per);
  return TD(batch.shape(), out);
}

struct Fixture {
  FiniteGroup group = make_group(GroupKind::rot4_flip);
  std::mt19937_64 rng{61};
  Backbone<double> net;
  TD xa, xb;

  Fixture() {
    BackboneConfig cfg;
    cfg.width = 8;
    cfg.depth = 1;
    cfg.pool_stages = 1;
    net = Backbone<double>(cfg, rng);
    xa = TD::randn(Shape{4, 3, 12, 12}, rng);
    xb = TD::randn(Shape{4, 3, 12, 12}, rng);
  }

  // max over m, g of |L(x_m -> g x_m) - L| and min over the same set.
  template <typename Loss>
  std::pair<double, double> residual(Loss loss) {
    const double base = loss(xa, xb);
    double worst = 0.0, least = 1e300;
    for (std::size_t m = 0; m < 4; ++m)
      for (std::size_t g = 1; g < group.order(); ++g) {
        const double d = std::abs(loss(transform_sample(xa, m, group, g), xb) - base);
        worst = std::max(worst, d);
        least = std::min(least, d);
      }
    return {worst, least};
  }
};

}  // namespace

TEST_CASE("invariant_inner") {
  std::mt19937_64 rng(62);
  const auto triv = make_group(GroupKind::trivial);
  auto u = TD::randn(Shape{1, 6}, rng), v = TD::randn(Shape{1, 6}, rng);
  double dot = 0.0;
  for (std::size_t i = 0; i < 6; ++i) dot += u[i] * v[i];
  CHECK(invariant_inner(PF{u, triv}, PF{v, triv}).item() == doctest::Approx(dot).epsilon(1e-14));

  for (auto kind : {GroupKind::rot4, GroupKind::rot2_flip, GroupKind::rot4_flip}) {
    const auto group = make_group(kind);
    const std::size_t block = 5, dim = block * group.order();
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      auto a = oracle::random_vector(dim, rng), b = oracle::random_vector(dim, rng);
      const double expect = oracle::double_sum_inner(a, b, group.cayley(), block);
      const double got = invariant_inner(PF{TD(Shape{1, dim}, a), group}, PF{TD(Shape{1, dim}, b), group}).item();
      worst = std::max(worst, std::abs(got - expect) / std::abs(expect));
    }
    CHECK(worst <= 1e-12);

    PF pu{TD::randn(Shape{2, dim}, rng), group}, pv{TD::randn(Shape{2, dim}, rng), group};
    const auto base = invariant_inner(pu, pv);
    for (std::size_t h = 0; h < group.order(); ++h) {
      const auto moved = invariant_inner(pooled_action(pu, h), pv);
      for (std::size_t b = 0; b < 2; ++b) CHECK(moved[b] == base[b]);
    }
  }
  CHECK_THROWS_AS(invariant_inner(PF{TD(Shape{1, 8}), make_group(GroupKind::rot4)},
                                  PF{TD(Shape{1, 12}), make_group(GroupKind::rot4)}),
                  StructureError);
}

TEST_CASE("feature queue is a FIFO of unit vectors") {
  std::mt19937_64 rng(63);
  FeatureQueue<double> q(5, 3);
  CHECK(q.empty());
  auto first = unit_rows(3, 3, rng);
  auto second = unit_rows(4, 3, rng);
  q.push(first);
  CHECK(q.size() == 3);
  q.push(second);
  CHECK(q.size() == 5);
  const auto c = q.contents();
  // Oldest surviving entries: first[2], then second[0..3].
  for (std::size_t j = 0; j < 3; ++j) CHECK(c.at({0, j}) == first.at({2, j}));
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 0; j < 3; ++j) CHECK(c.at({r + 1, j}) == second.at({r, j}));
  CHECK_THROWS_AS(q.push(TD(Shape{1, 3}, {1, 1, 0})), NumericError);

  FeatureQueue<double> rnd(16, 8);
  const auto d4 = make_group(GroupKind::rot4);
  rnd.fill_random(rng, &d4);
  CHECK(rnd.size() == 16);
  const auto rows = rnd.contents();
  for (std::size_t r = 0; r < 16; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < 8; ++j) s += rows.at({r, j}) * rows.at({r, j});
    CHECK(std::abs(std::sqrt(s) - 1.0) <= 1e-6);
    CHECK(rows.at({r, 0}) == doctest::Approx(rows.at({r, 2})));  // group-averaged blocks coincide
  }
}

TEST_CASE("moco loss examples") {
  const auto triv = make_group(GroupKind::trivial);
  std::mt19937_64 rng(64);
  FeatureQueue<double> empty(4, 3);
  PF q{TD::randn(Shape{2, 3}, rng), triv}, k{TD::randn(Shape{2, 3}, rng), triv};
  CHECK(moco_loss(q, k, empty, 0.2, false).item() == doctest::Approx(0.0));

  PF same{TD(Shape{1, 2}, {1, 0}), triv};
  FeatureQueue<double> one(1, 2);
  one.push(TD(Shape{1, 2}, {1, 0}));
  CHECK(moco_loss(same, same, one, 1.0, false).item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK_THROWS_AS(moco_loss(same, same, one, 0.0, false), ParameterError);

  // Scalar oracle on random data.
  FeatureQueue<double> bank(6, 3);
  bank.push(unit_rows(6, 3, rng));
  const auto qn = l2_normalize(q.tensor, 1), kn = l2_normalize(k.tensor, 1), neg = bank.contents();
  double expect = 0.0;
  for (std::size_t b = 0; b < 2; ++b) {
    std::vector<double> logits;
    double pos = 0.0;
    for (std::size_t j = 0; j < 3; ++j) pos += qn.at({b, j}) * kn.at({b, j});
    logits.push_back(pos / 0.2);
    for (std::size_t r = 0; r < 6; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < 3; ++j) s += qn.at({b, j}) * neg.at({r, j});
      logits.push_back(s / 0.2);
    }
    expect += oracle::cross_entropy_scalar(logits, 0) / 2.0;
  }
  CHECK(moco_loss(q, k, bank, 0.2, false).item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("momentum encoder EMA and moco_step bookkeeping") {
  std::mt19937_64 rng(65);
  BackboneConfig cfg;
  cfg.group = GroupKind::rot4;
  cfg.width = 4;
  cfg.depth = 1;
  cfg.pool_stages = 1;
  Backbone<double> online(cfg, rng);
  MomentumEncoder<Backbone<double>> key(online, 0.9);
  std::vector<std::vector<double>> before;
  for (auto* p : key.shadow().parameter_slots()) before.emplace_back(p->values().begin(), p->values().end());
  std::normal_distribution<double> jolt(0.0, 0.5);
  for (auto* p : online.parameter_slots()) {
    auto v = p->mutable_values();
    for (auto& x : v) x += jolt(rng);
  }
  key.update(online);
  auto shadow = key.shadow().parameter_slots();
  auto live = online.parameter_slots();
  for (std::size_t i = 0; i < shadow.size(); ++i) {
    CHECK(!shadow[i]->requires_grad());
    for (std::size_t j = 0; j < shadow[i]->size(); ++j)
      CHECK((*shadow[i])[j] == 0.9 * before[i][j] + (1.0 - 0.9) * (*live[i])[j]);
  }

  FeatureQueue<double> queue(10, online.feature_dim());
  Sgd<double> opt(collect_parameters<double>(online), 0.9, 1e-4);
  MocoConfig mc;
  mc.queue_size = 10;
  const std::size_t N = 4, T = 3;  // N * T > K
  for (std::size_t t = 0; t < T; ++t) {
    auto a = TD::randn(Shape{N, 3, 8, 8}, rng), b = TD::randn(Shape{N, 3, 8, 8}, rng);
    const double loss = moco_step(online, key, queue, opt, a, b, mc, 0.01);
    CHECK(std::isfinite(loss));
    CHECK(queue.size() == std::min<std::size_t>((t + 1) * N, 10));
  }
}

TEST_CASE("prototypes keep unit columns") {
  std::mt19937_64 rng(66);
  Prototypes<double> c(6, 4, rng);
  auto check_cols = [&]() {
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < 6; ++i) s += c.matrix().at({i, j}) * c.matrix().at({i, j});
      CHECK(std::abs(std::sqrt(s) - 1.0) <= 1e-6);
    }
  };
  check_cols();
  for (auto& v : c.parameter_slots()[0]->mutable_values()) v *= 3.0;
  c.renormalize();
  check_cols();
}

TEST_CASE("sinkhorn marginals") {
  std::mt19937_64 rng(67);
  auto scores = TD::randn(Shape{64, 16}, rng);
  const auto q = sinkhorn_knopp(scores, 100, 0.5);
  double worst = 0.0;
  for (std::size_t j = 0; j < 16; ++j) {
    double col = 0.0;
    for (std::size_t i = 0; i < 64; ++i) col += q.at({i, j}) / 64.0;
    worst = std::max(worst, std::abs(col - 1.0 / 16.0));
  }
  for (std::size_t i = 0; i < 64; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 16; ++j) row += q.at({i, j});
    worst = std::max(worst, std::abs(row - 1.0));
  }
  CHECK(worst <= 1e-6);

  for (std::size_t iters : {1, 3, 7}) {
    const auto p = sinkhorn_knopp(TD::randn(Shape{32, 8}, rng), iters, 0.05);
    for (std::size_t i = 0; i < 32; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < 8; ++j) {
        CHECK(p.at({i, j}) >= 0.0);
        row += p.at({i, j});
      }
      CHECK(std::abs(row - 1.0) <= 1e-9);
    }
  }

  // Diagonal dominance: the plan approaches a permutation (rows one-hot).
  std::vector<double> diag(16, 0.0);
  for (std::size_t i = 0; i < 4; ++i) diag[i * 4 + (i + 1) % 4] = 50.0;
  const auto perm = sinkhorn_knopp(TD(Shape{4, 4}, diag), 3, 0.05);
  for (std::size_t i = 0; i < 4; ++i) CHECK(perm.at({i, (i + 1) % 4}) == doctest::Approx(1.0));

  // Overflow territory for the direct kernel still yields distributions.
  auto huge = scale(TD::randn(Shape{8, 4}, rng), 1e3);
  const auto h = sinkhorn_knopp(huge, 3, 1e-3);
  for (std::size_t i = 0; i < 8; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 4; ++j) row += h.at({i, j});
    CHECK(std::abs(row - 1.0) <= 1e-9);
  }
}

TEST_CASE("swav loss at q = p equals the entropy of q") {
  // Circulant scores already have uniform marginals, so the plan is the
  // row softmax at temperature eps; with tau = eps both views give p = q.
  const auto triv = make_group(GroupKind::trivial);
  const std::size_t c = 4;
  std::mt19937_64 rng(68);
  Prototypes<double> protos(c, c, rng);
  {
    auto w = protos.parameter_slots()[0]->mutable_values();
    for (std::size_t i = 0; i < c; ++i)
      for (std::size_t j = 0; j < c; ++j) w[i * c + j] = i == j ? 1.0 : 0.0;
  }
  const std::vector<double> pattern{0.9, 0.3, 0.1, 0.3};
  std::vector<double> z(c * c);
  for (std::size_t b = 0; b < c; ++b)
    for (std::size_t j = 0; j < c; ++j) z[b * c + j] = pattern[(j + c - b) % c];
  PF view{TD(Shape{c, c}, z), triv};
  SwavConfig cfg;
  cfg.tau = cfg.eps = 0.1;
  const double loss = swav_loss<double>({view, view}, 2, protos, cfg, false).item();

  const auto zn = l2_normalize(view.tensor, 1);
  std::vector<double> row(zn.values().begin(), zn.values().begin() + c);
  double mx = *std::max_element(row.begin(), row.end()), s = 0.0;
  for (auto& v : row) s += (v = std::exp((v - mx) / 0.1));
  double entropy = 0.0;
  for (double v : row) entropy -= (v / s) * std::log(v / s);
  CHECK(loss == doctest::Approx(entropy).epsilon(1e-10));
}

TEST_CASE("simsiam examples") {
  const auto triv = make_group(GroupKind::trivial);
  std::mt19937_64 rng(69);
  PF z{TD::randn(Shape{3, 5}, rng), triv};
  CHECK(simsiam_loss(z, z, z, z, false).item() == doctest::Approx(-1.0));
  PF a{TD(Shape{1, 2}, {1, 0}), triv}, b{TD(Shape{1, 2}, {0, 1}), triv};
  CHECK(simsiam_loss(b, b, a, a, false).item() == doctest::Approx(0.0));
  PF zero{TD(Shape{1, 2}, {0, 0}), triv};
  CHECK(std::isfinite(simsiam_loss(zero, zero, a, a, false).item()));
}

TEST_CASE("invariant losses ignore single-input transforms") {
  Fixture fx;
  const std::size_t D = fx.net.feature_dim();
  FeatureQueue<double> queue(32, D);
  queue.fill_random(fx.rng, &fx.group);
  FeatureQueue<double> plain_queue(32, D);
  plain_queue.fill_random(fx.rng);
  Prototypes<double> protos(D, 6, fx.rng);
  GroupLinear<double> pred(fx.group, fx.net.channels(), fx.net.channels(), fx.rng);
  SwavConfig swav;

  for (bool invariant : {true, false}) {
    CAPTURE(invariant);
    const auto& bank = invariant ? queue : plain_queue;
    auto moco = [&](const TD& a, const TD& b) { return moco_loss(fx.net(a), fx.net(b), bank, 0.2, invariant).item(); };
    auto sw = [&](const TD& a, const TD& b) {
      return swav_loss<double>({fx.net(a), fx.net(b)}, 2, protos, swav, invariant).item();
    };
    auto ss = [&](const TD& a, const TD& b) {
      const auto z1 = fx.net(a), z2 = fx.net(b);
      return simsiam_loss(z1, z2, pred(z1), pred(z2), invariant).item();
    };
    const auto [rm, lm] = fx.residual(moco);
    const auto [rs, ls] = fx.residual(sw);
    const auto [rq, lq] = fx.residual(ss);
    if (invariant) {
      CHECK(rm <= 1e-8);
      CHECK(rs <= 1e-8);
      CHECK(rq <= 1e-8);
    } else {
      CHECK(rm > 1e-3);
      CHECK(rs > 1e-3);
      CHECK(rq > 1e-3);
      MESSAGE("non-invariant minimum change: moco " << lm << " swav " << ls << " simsiam " << lq);
    }
  }
}

TEST_CASE("loss gradients pass finite differences") {
  std::mt19937_64 rng(70);
  const auto d4 = make_group(GroupKind::rot4_flip);
  const std::size_t D = 8 * 2;
  FeatureQueue<double> queue(12, D);
  queue.fill_random(rng, &d4);
  auto keys = TD::randn(Shape{4, D}, rng);
  auto q0 = TD::randn(Shape{4, D}, rng);
  CHECK(grad_check([&](const TD& v) { return moco_loss(PF{v, d4}, PF{keys, d4}, queue, 0.2, true); }, q0, 1e-6) <= 1e-3);
  CHECK(grad_check([&](const TD& v) { return moco_loss(PF{v, d4}, PF{keys, d4}, queue, 0.2, false); }, q0, 1e-6) <= 1e-3);

  Prototypes<double> protos(D, 5, rng);
  auto other = TD::randn(Shape{4, D}, rng);
  // Assignments come from the first view only, so the checked view enters
  // solely through the differentiable prediction branch.
  CHECK(grad_check([&](const TD& v) { return swav_loss<double>({PF{other, d4}, PF{v, d4}}, 1, protos, {}, true); }, q0,
                   1e-6) <= 1e-3);
  auto z2 = TD::randn(Shape{4, D}, rng), p2 = TD::randn(Shape{4, D}, rng);
  CHECK(grad_check([&](const TD& v) { return simsiam_loss(PF{other, d4}, PF{z2, d4}, PF{v, d4}, PF{p2, d4}, true); }, q0,
                   1e-6) <= 1e-3);
  // Gradient through the stopped branch is exactly zero.
  auto z = TD::parameter(Shape{4, D}, std::vector<double>(z2.values().begin(), z2.values().end()));
  backward(simsiam_loss(PF{other, d4}, PF{z, d4}, PF{q0, d4}, PF{p2, d4}, true));
  CHECK(!z.has_grad());
}
