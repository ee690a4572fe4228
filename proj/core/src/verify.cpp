#include "equivar/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iterator>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include "equivar/contrastive.hpp"
#include "equivar/data.hpp"
#include "equivar/grad_check.hpp"
#include "equivar/layers.hpp"
#include "equivar/metrics.hpp"
#include "equivar/ops.hpp"
#include "equivar/pretext.hpp"
#include "equivar/train.hpp"

namespace equivar {

const std::vector<PropertyEntry>& property_manifest() {
  static const std::vector<PropertyEntry> entries{
      {"tensor.grad_check", "every differentiable op matches central differences, rel err <= 1e-4 (f64)"},
      {"tensor.conv2d_oracle", "conv2d equals the direct-loop oracle, extents <= 8, 100 trials, <= 1e-6 (f64)"},
      {"tensor.stop_gradient", "gradient through a stop_gradient path is exactly zero"},
      {"group.axioms", "identity, inverse and associativity hold exhaustively for every group"},
      {"group.left_action", "apply_grid(a, apply_grid(b, x)) == apply_grid(a*b, x) bit-exactly"},
      {"layers.equivariance", "lifting, group conv and backbone commute with the group action"},
      {"layers.group_average", "group_average is exactly invariant"},
      {"layers.pooled_norm", "pooled action preserves the L2 norm bit-exactly"},
      {"layers.head_intertwining", "equivariant head permutes logits with the label action"},
      {"pretext.context_labels", "context stimulus of T(g)x under the acted label equals T(g) of the original"},
      {"pretext.jigsaw_subset", "jigsaw subset is closed, free, deterministic, min Hamming >= 2"},
      {"pretext.loss_consistency", "pretext loss unchanged under (T(g)x, acted label)"},
      {"contrastive.loss_invariance", "invariant losses unchanged when one input is transformed; plain ones change"},
      {"contrastive.double_sum", "invariant inner product equals the all-pairs double sum, rel <= 1e-12"},
      {"contrastive.loss_gradients", "contrastive loss gradients pass finite differences, rel <= 1e-3"},
      {"contrastive.sinkhorn", "Sinkhorn rows are distributions for any iteration count; marginals at convergence"},
      {"contrastive.ema_fifo", "momentum encoder EMA and feature queue FIFO invariants"},
      {"data.determinism", "(data, aug, epoch) seeds reproduce training bit-for-bit in f64"},
      {"data.view_shape", "augmented views keep extent and channel count"},
      {"cli.reproducibility", "identical config and seeds give identical final metrics (f64)"},
      {"cli.coverage", "every manifest entry is covered by an executed check"},
  };
  return entries;
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"group", "tensor", "layers", "pretext", "contrastive", "data", "cli"};
  return names;
}

bool VerificationReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed; });
}

std::vector<std::string> VerificationReport::failed_ids() const {
  std::vector<std::string> out;
  for (const auto& c : checks)
    if (!c.passed) out.push_back(c.suite + "/" + c.id);
  return out;
}

namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

class Recorder {
 public:
  explicit Recorder(VerificationReport& report) : report_(report) {}

  void suite(const std::string& name) {
    suite_ = name;
    mark_ = Clock::now();
  }

  void check(const std::string& id, const std::string& property, double value, const std::string& comparison,
             double threshold) {
    CheckResult r;
    r.suite = suite_;
    r.id = id;
    r.property = property;
    r.value = value;
    r.comparison = comparison;
    r.threshold = threshold;
    if (comparison == "<=") r.passed = value <= threshold;
    else if (comparison == ">") r.passed = value > threshold;
    else if (comparison == ">=") r.passed = value >= threshold;
    else r.passed = value == threshold;
    if (std::isnan(value)) r.passed = false;
    const auto now = Clock::now();
    r.seconds = std::chrono::duration<double>(now - mark_).count();
    mark_ = now;
    report_.checks.push_back(r);
  }

  void at_most(const std::string& id, const std::string& property, double value, double threshold) {
    check(id, property, value, "<=", threshold);
  }
  void exactly(const std::string& id, const std::string& property, double value, double expected = 0.0) {
    check(id, property, value, "==", expected);
  }

 private:
  VerificationReport& report_;
  std::string suite_;
  Clock::time_point mark_;
};

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(double(a[i]) - double(b[i])));
  return worst;
}

template <typename T>
std::size_t mismatches(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return std::max(a.size(), b.size()) + 1;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += a[i] != b[i];
  return n;
}

std::string kind_name(GroupKind k) { return std::string(to_string(k)); }

// Independent oracle: six nested loops.
std::vector<double> conv_loops(const Tensor<double>& x, const Tensor<double>& w, std::size_t stride, std::size_t pad) {
  const std::size_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  const std::size_t O = w.extent(0), k = w.extent(2);
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  std::vector<double> out(B * O * Ho * Wo, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t u = 0; u < k; ++u)
              for (std::size_t v = 0; v < k; ++v) {
                const long r = long(i * stride + u) - long(pad), s = long(j * stride + v) - long(pad);
                if (r < 0 || s < 0 || r >= long(H) || s >= long(W)) continue;
                acc += x.at({b, c, std::size_t(r), std::size_t(s)}) * w.at({o, c, u, v});
              }
          out[((b * O + o) * Ho + i) * Wo + j] = acc;
        }
  return out;
}

// ---------------------------------------------------------------- group
template <typename T>
void suite_group(Recorder& rec, const VerifyOptions& opt, std::mt19937_64& rng) {
  rec.suite("group");
  const auto start = Clock::now();
  for (GroupKind kind : {GroupKind::trivial, GroupKind::rot4, GroupKind::rot2_flip, GroupKind::rot4_flip}) {
    FiniteGroup g = make_group(kind);
    if (opt.corrupt_cayley && g.order() > 1) g = g.with_cayley_entry(1, 1, (g.compose(1, 1) + 1) % g.order());
    rec.exactly("axioms." + kind_name(kind), "group.axioms", double(g.axiom_violations().size()));
  }
  rec.at_most("axioms.runtime_seconds", "group.axioms", std::chrono::duration<double>(Clock::now() - start).count(),
              1.0);
  for (GroupKind kind : {GroupKind::rot4, GroupKind::rot2_flip, GroupKind::rot4_flip}) {
    const FiniteGroup g = make_group(kind);
    std::size_t bad = 0;
    for (std::size_t n : {7, 8}) {
      bad += GridAction(g, n).homomorphism_violations().size();
      const auto x = Tensor<T>::randn(Shape{2, 3, n, n}, rng);
      for (std::size_t a = 0; a < g.order(); ++a)
        for (std::size_t b = 0; b < g.order(); ++b)
          bad += mismatches(apply_grid(g, a, apply_grid(g, b, x)), apply_grid(g, g.compose(a, b), x));
    }
    rec.exactly("left_action." + kind_name(kind), "group.left_action", double(bad));
  }
}

// ---------------------------------------------------------------- tensor
void suite_tensor(Recorder& rec, std::mt19937_64& rng) {
  using TD = Tensor<double>;
  rec.suite("tensor");
  double worst = 0.0;
  std::uniform_int_distribution<std::size_t> small(1, 3), extent(1, 8), coin(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = small(rng), pad = coin(rng), stride = 1 + coin(rng);
    const std::size_t H = std::max(k, extent(rng)), W = std::max(k, extent(rng));
    const auto x = TD::randn(Shape{small(rng), small(rng), H, W}, rng);
    const auto w = TD::randn(Shape{small(rng), x.extent(1), k, k}, rng);
    const auto got = conv2d(x, w, stride, pad);
    const auto want = conv_loops(x, w, stride, pad);
    for (std::size_t i = 0; i < want.size(); ++i) worst = std::max(worst, std::abs(got[i] - want[i]));
  }
  rec.at_most("conv2d.loop_oracle", "tensor.conv2d_oracle", worst, 1e-6);

  auto a = TD::randn(Shape{3, 4}, rng), b = TD::randn(Shape{3, 4}, rng), c = TD::randn(Shape{4, 2}, rng);
  auto wts = TD::randn(Shape{3, 4}, rng);
  std::vector<double> pos(12);
  for (auto& v : pos) v = std::uniform_real_distribution<double>(0.5, 2.0)(rng);
  const TD positive(Shape{3, 4}, pos);
  // Keep relu inputs away from the kink.
  std::vector<double> off(a.values().begin(), a.values().end());
  for (auto& v : off) v = v >= 0 ? v + 0.1 : v - 0.1;
  const TD away(Shape{3, 4}, off);
  auto weigh = [&](const TD& y) { return sum(mul(y, wts)); };
  const double tol = 1e-4;
  const std::string prop = "tensor.grad_check";
  auto gc = [&](const std::string& id, const std::function<TD(const TD&)>& f, const TD& at) {
    rec.at_most("grad." + id, prop, grad_check(f, at), tol);
  };
  gc("add", [&](const TD& v) { return weigh(add(v, b)); }, a);
  gc("sub", [&](const TD& v) { return weigh(sub(b, v)); }, a);
  gc("mul", [&](const TD& v) { return weigh(mul(v, b)); }, a);
  gc("scale", [&](const TD& v) { return weigh(scale(v, 1.7)); }, a);
  gc("add_scalar", [&](const TD& v) { return weigh(add_scalar(v, 0.3)); }, a);
  gc("exp", [&](const TD& v) { return weigh(exp(v)); }, a);
  gc("log", [&](const TD& v) { return weigh(log(v)); }, positive);
  gc("relu", [&](const TD& v) { return weigh(relu(v)); }, away);
  gc("sum_axis", [&](const TD& v) { return sum(mul(sum(v, 1), TD(Shape{3}, {1, -2, 3}))); }, a);
  gc("mean_axis", [&](const TD& v) { return sum(mul(mean(v, 0), TD(Shape{4}, {1, -2, 3, 0.5}))); }, a);
  gc("mean", [&](const TD& v) { return scale(mean(mul(v, v)), 3.0); }, a);
  gc("softmax", [&](const TD& v) { return weigh(softmax(v, 1)); }, a);
  gc("log_softmax", [&](const TD& v) { return weigh(log_softmax(v, 1)); }, a);
  gc("l2_normalize", [&](const TD& v) { return weigh(l2_normalize(v, 1)); }, a);
  gc("matmul", [&](const TD& v) { return sum(mul(matmul(v, c), TD(Shape{3, 2}, {1, 2, 3, 4, 5, 6}))); }, a);
  gc("transpose", [&](const TD& v) { return sum(mul(transpose(v), transpose(wts))); }, a);
  gc("reshape", [&](const TD& v) { return sum(mul(reshape(v, Shape{4, 3}), reshape(wts, Shape{4, 3}))); }, a);
  const std::vector<std::size_t> perm{3, 1, 0, 2};
  gc("index_permute", [&](const TD& v) { return weigh(index_permute(v, 1, std::span<const std::size_t>(perm))); }, a);
  const std::vector<std::uint32_t> idx{0, 0, 5, 11, 7, 5};
  gc("gather",
     [&](const TD& v) {
       return sum(mul(gather(v, std::span<const std::uint32_t>(idx), Shape{6}), TD(Shape{6}, {1, 2, 3, 4, 5, 6})));
     },
     a);
  gc("concat", [&](const TD& v) { return sum(mul(concat<double>({v, b}, 1), concat<double>({wts, wts}, 1))); }, a);
  auto bias = TD::randn(Shape{4}, rng);
  gc("add_bias", [&](const TD& v) { return weigh(add_bias(a, v, 1)); }, bias);
  auto img = TD::randn(Shape{2, 3, 5, 5}, rng), kern = TD::randn(Shape{2, 3, 3, 3}, rng);
  auto img_w = TD::randn(Shape{2, 2, 5, 5}, rng);
  gc("conv2d_input", [&](const TD& v) { return sum(mul(conv2d(v, kern, 1, 1), img_w)); }, img);
  gc("conv2d_weight", [&](const TD& v) { return sum(mul(conv2d(img, v, 1, 1), img_w)); }, kern);
  auto pool_in = TD::randn(Shape{2, 3, 4, 4}, rng), pool_w = TD::randn(Shape{2, 3, 2, 2}, rng);
  gc("avg_pool2d", [&](const TD& v) { return sum(mul(avg_pool2d(v, 2), pool_w)); }, pool_in);
  auto fm = TD::randn(Shape{2, 2, 3, 3, 3}, rng), fm_w = TD::randn(Shape{2, 2, 3, 3, 3}, rng);
  gc("channel_normalize", [&](const TD& v) { return sum(mul(channel_normalize(v), fm_w)); }, fm);
  const auto d4 = make_group(GroupKind::rot4_flip);
  auto grid_w = TD::randn(Shape{2, 3, 5, 5}, rng);
  gc("apply_grid", [&](const TD& v) { return sum(mul(apply_grid(d4, 3, v), grid_w)); }, img);
  auto lift_w = TD::randn(Shape{2, 8, 2, 5, 5}, rng);
  gc("lifting_conv", [&](const TD& v) { return sum(mul(lifting_conv(img, v, d4, 1).tensor, lift_w)); },
     TD::randn(Shape{2, 3, 3, 3}, rng));
  const auto r4 = make_group(GroupKind::rot4);
  auto gx = TD::randn(Shape{1, 4, 2, 4, 4}, rng), gw = TD::randn(Shape{4, 2, 2, 3, 3}, rng);
  auto gout = TD::randn(Shape{1, 4, 2, 4, 4}, rng);
  gc("group_conv_input", [&](const TD& v) { return sum(mul(group_conv(GroupFeatureMap<double>{v, r4}, gw, r4, 1).tensor, gout)); },
     gx);
  gc("group_conv_weight", [&](const TD& v) { return sum(mul(group_conv(GroupFeatureMap<double>{gx, r4}, v, r4, 1).tensor, gout)); },
     gw);
  auto pooled_w = TD::randn(Shape{1, 8}, rng);
  gc("group_pool_spatial", [&](const TD& v) { return sum(mul(group_pool_spatial(GroupFeatureMap<double>{v, r4}).tensor, pooled_w)); },
     gx);
  auto pv = TD::randn(Shape{2, 8}, rng), pv_w = TD::randn(Shape{2, 8}, rng);
  gc("group_average", [&](const TD& v) { return sum(mul(group_average(PooledFeature<double>{v, r4}).tensor, pv_w)); }, pv);

  // stop_gradient: the stopped path contributes nothing.
  auto x = TD::parameter(Shape{5}, {0.3, -1.2, 2.0, 0.7, -0.4});
  backward(sum(mul(x, stop_gradient(x))));
  double off_path = 0.0;
  for (std::size_t i = 0; i < 5; ++i) off_path = std::max(off_path, std::abs(x.grad()[i] - x[i]));
  auto y = TD::parameter(Shape{5}, {0.3, -1.2, 2.0, 0.7, -0.4});
  backward(sum(mul(stop_gradient(y), TD(Shape{5}, {1, 2, 3, 4, 5}))));
  for (auto g : y.grad()) off_path = std::max(off_path, std::abs(g));
  rec.exactly("stop_gradient.zero", "tensor.stop_gradient", off_path);
}

// ---------------------------------------------------------------- layers
template <typename T>
void suite_layers(Recorder& rec, const VerifyOptions& opt, const Tolerances& tol, std::mt19937_64& rng) {
  rec.suite("layers");
  for (GroupKind kind : opt.groups) {
    const auto G = make_group(kind);
    const std::string k = kind_name(kind);
    double lift = 0.0, conv = 0.0, net_map = 0.0, net_pooled = 0.0;
    const auto w0 = Tensor<T>::randn(Shape{4, 3, 3, 3}, rng, T(0.5));
    const auto w = Tensor<T>::randn(Shape{G.order(), 3, 4, 3, 3}, rng, T(0.3));
    BackboneConfig bc;
    bc.group = kind;
    bc.width = 8;
    bc.depth = 2;
    bc.pool_stages = 1;
    const Backbone<T> net(bc, rng);
    for (int trial = 0; trial < 20; ++trial) {
      const auto x = Tensor<T>::randn(Shape{2, 3, 9, 9}, rng);
      const auto fx = lifting_conv(x, w0, G, 1);
      const auto hx = GroupFeatureMap<T>{Tensor<T>::randn(Shape{2, G.order(), 4, 9, 9}, rng), G};
      const auto gfx = group_conv(hx, w, G, 1);
      const auto img = Tensor<T>::randn(Shape{2, 3, 12, 12}, rng);
      const auto map = net.feature_map(img);
      const auto pooled = net(img);
      for (std::size_t g = 0; g < G.order(); ++g) {
        lift = std::max(lift, max_abs_diff(lifting_conv(apply_grid(G, g, x), w0, G, 1).tensor, regular_action(fx, g).tensor));
        conv = std::max(conv, max_abs_diff(group_conv(regular_action(hx, g), w, G, 1).tensor, regular_action(gfx, g).tensor));
        const auto moved = apply_grid(G, g, img);
        net_map = std::max(net_map, max_abs_diff(net.feature_map(moved).tensor, regular_action(map, g).tensor));
        net_pooled = std::max(net_pooled, max_abs_diff(net(moved).tensor, pooled_action(pooled, g).tensor));
      }
    }
    rec.at_most("equivariance.lifting_conv." + k, "layers.equivariance", lift, tol.equivariance);
    rec.at_most("equivariance.group_conv." + k, "layers.equivariance", conv, tol.equivariance);
    rec.at_most("equivariance.backbone_map." + k, "layers.equivariance", net_map, tol.equivariance);
    rec.at_most("equivariance.backbone_pooled." + k, "layers.equivariance", net_pooled, tol.equivariance);

    double avg_change = 0.0;
    std::size_t norm_mismatch = 0;
    auto sorted_norm = [](const Tensor<T>& v) {
      std::vector<T> sq;
      for (auto e : v.values()) sq.push_back(e * e);
      std::sort(sq.begin(), sq.end());
      T acc = 0;
      for (auto s : sq) acc += s;
      return std::sqrt(acc);
    };
    for (int trial = 0; trial < 20; ++trial) {
      const PooledFeature<T> v{Tensor<T>::randn(Shape{1, G.order() * 5}, rng), G};
      const auto base = group_average(v);
      for (std::size_t h = 0; h < G.order(); ++h) {
        const auto moved = pooled_action(v, h);
        avg_change = std::max(avg_change, max_abs_diff(group_average(moved).tensor, base.tensor));
        norm_mismatch += sorted_norm(moved.tensor) != sorted_norm(v.tensor);
      }
    }
    rec.exactly("group_average.exact." + k, "layers.group_average", avg_change);
    rec.exactly("pooled_norm.exact." + k, "layers.pooled_norm", double(norm_mismatch));

    double head = 0.0;
    auto intertwine = [&](const LabelAction& labels, std::size_t block) {
      EquivariantHead<T> eh(labels, block, rng);
      const PooledFeature<T> v{Tensor<T>::randn(Shape{3, G.order() * block}, rng), G};
      const auto base = eh(v);
      const std::size_t L = labels.label_count();
      for (std::size_t g = 0; g < G.order(); ++g) {
        const auto moved = eh(pooled_action(v, g));
        for (std::size_t b = 0; b < 3; ++b)
          for (std::size_t l = 0; l < L; ++l)
            head = std::max(head, std::abs(double(moved[b * L + labels.apply(g, l)]) - double(base[b * L + l])));
      }
    };
    intertwine(generate_closed_subset(kind, 6, opt.seed, 200).label_action(G), 4);
    if (kind == GroupKind::rot4) intertwine(context_label_action(G), 3);
    GroupLinear<T> lin(G, 3, 5, rng);
    const PooledFeature<T> v{Tensor<T>::randn(Shape{2, G.order() * 3}, rng), G};
    const auto lv = lin(v);
    for (std::size_t g = 0; g < G.order(); ++g)
      head = std::max(head, max_abs_diff(lin(pooled_action(v, g)).tensor, pooled_action(lv, g).tensor));
    rec.at_most("head_intertwining." + k, "layers.head_intertwining", head, tol.equivariance);
  }
}

// ---------------------------------------------------------------- pretext
template <typename T>
void suite_pretext(Recorder& rec, const VerifyOptions& opt, const Tolerances& tol, std::mt19937_64& rng) {
  rec.suite("pretext");
  const auto r4 = make_group(GroupKind::rot4);
  const auto act = context_label_action(r4);
  const auto img = Tensor<T>::randn(Shape{3, 32, 32}, rng);
  std::size_t wrong = 0;
  for (std::size_t g = 0; g < 4; ++g) {
    const auto moved = apply_grid(r4, g, img);
    for (std::size_t l = 0; l < 8; ++l) {
      const auto orig = extract_context(img, l, PatchGeometry{});
      const auto acted = extract_context(moved, act.apply(g, l), PatchGeometry{});
      wrong += mismatches(acted.neighbor, apply_grid(r4, g, orig.neighbor)) != 0 ||
               mismatches(acted.center, apply_grid(r4, g, orig.center)) != 0;
    }
  }
  rec.exactly("context.label_action_8x4", "pretext.context_labels", double(wrong));

  for (GroupKind kind : opt.groups) {
    const auto G = make_group(kind);
    const std::string k = kind_name(kind);
    const auto subset = generate_closed_subset(kind, 250, opt.seed);
    rec.exactly("jigsaw.size_250_orbits." + k, "pretext.jigsaw_subset", double(subset.size()), 250.0 * G.order());
    std::size_t open = 0, unfree = 0;
    for (std::size_t l = 0; l < subset.size(); ++l) {
      std::set<Puzzle> orbit;
      for (std::size_t g = 0; g < G.order(); ++g) {
        const auto moved = compose(grid_permutation(G.transform(g)), subset.at(l));
        open += !subset.label_of(moved).has_value();
        orbit.insert(moved);
      }
      unfree += orbit.size() != G.order();
    }
    rec.exactly("jigsaw.closure." + k, "pretext.jigsaw_subset", double(open));
    rec.exactly("jigsaw.free_orbits." + k, "pretext.jigsaw_subset", double(unfree));
    const auto again = generate_closed_subset(kind, 250, opt.seed);
    rec.exactly("jigsaw.deterministic." + k, "pretext.jigsaw_subset",
                double(again.permutations() != subset.permutations()));
    rec.check("jigsaw.min_hamming." + k, "pretext.jigsaw_subset", double(subset.min_hamming()), ">=", 2.0);

    std::uniform_int_distribution<std::size_t> pick_g(0, G.order() - 1), pick_l(0, subset.size() - 1);
    std::size_t bad = 0;
    for (int i = 0; i < 100; ++i) {
      const auto g = pick_g(rng), label = pick_l(rng);
      const auto orig = extract_jigsaw(img, subset.at(label), PatchGeometry{});
      const auto acted = extract_jigsaw(apply_grid(G, g, img), subset.at(subset.act(G, g, label)), PatchGeometry{});
      for (std::size_t s = 0; s < 9; ++s) bad += mismatches(acted.patches[s], apply_grid(G, g, orig.patches[s])) != 0;
    }
    rec.exactly("jigsaw.pipeline_100_pairs." + k, "pretext.jigsaw_subset", double(bad));

    BackboneConfig bc;
    bc.group = kind;
    bc.width = 8;
    bc.depth = 1;
    bc.pool_stages = 1;
    const Backbone<T> net(bc, rng);
    auto as_batch = [](const Tensor<T>& p) { return reshape(p, Shape{1, p.extent(0), p.extent(1), p.extent(2)}); };
    const auto small = generate_closed_subset(kind, 10, opt.seed, 300);
    const EquivariantHead<T> jhead(small.label_action(G), 9 * net.channels(), rng);
    auto jigsaw_loss = [&](const Tensor<T>& image, std::size_t label) {
      const auto s = extract_jigsaw(image, small.at(label), PatchGeometry{});
      std::vector<PooledFeature<T>> feats;
      for (const auto& p : s.patches) feats.push_back(net(as_batch(p)));
      const std::vector<std::size_t> l{label};
      return double(pretext_loss(jhead(concat_blocks(feats)), l).item());
    };
    double worst = 0.0;
    for (std::size_t g = 0; g < G.order(); ++g)
      for (std::size_t l = 0; l < small.size(); l += 5)
        worst = std::max(worst, std::abs(jigsaw_loss(apply_grid(G, g, img), small.act(G, g, l)) - jigsaw_loss(img, l)));
    rec.at_most("loss_consistency.jigsaw." + k, "pretext.loss_consistency", worst, tol.equivariance);

    if (kind == GroupKind::rot4) {
      const EquivariantHead<T> chead(act, 2 * net.channels(), rng);
      auto context_loss = [&](const Tensor<T>& image, std::size_t label) {
        const auto s = extract_context(image, label, PatchGeometry{});
        const auto feat = concat_blocks<T>({net(as_batch(s.center)), net(as_batch(s.neighbor))});
        const std::vector<std::size_t> l{s.label};
        return double(pretext_loss(chead(feat), l).item());
      };
      double cw = 0.0;
      for (std::size_t g = 0; g < 4; ++g)
        for (std::size_t l = 0; l < 8; ++l)
          cw = std::max(cw, std::abs(context_loss(apply_grid(r4, g, img), act.apply(g, l)) - context_loss(img, l)));
      rec.at_most("loss_consistency.context.rot4", "pretext.loss_consistency", cw, tol.equivariance);
    }
  }
}

// ---------------------------------------------------------------- contrastive
template <typename T>
void suite_contrastive(Recorder& rec, const VerifyOptions& opt, const Tolerances& tol, std::mt19937_64& rng) {
  using TD = Tensor<double>;
  rec.suite("contrastive");
  for (std::size_t order : {4, 8}) {
    const auto G = make_group(order == 4 ? GroupKind::rot4 : GroupKind::rot4_flip);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
      const std::size_t block = 3;
      const PooledFeature<double> u{TD::randn(Shape{1, order * block}, rng), G}, v{TD::randn(Shape{1, order * block}, rng), G};
      double pairs = 0.0;
      for (std::size_t g1 = 0; g1 < order; ++g1)
        for (std::size_t g2 = 0; g2 < order; ++g2) {
          const auto a = pooled_action(u, g1).tensor, b = pooled_action(v, g2).tensor;
          double dot = 0.0;
          for (std::size_t j = 0; j < a.size(); ++j) dot += a[j] * b[j];
          pairs += dot;
        }
      pairs /= double(order * order);
      const double got = invariant_inner(u, v).item();
      worst = std::max(worst, std::abs(got - pairs) / std::max(std::abs(pairs), 1e-300));
    }
    rec.at_most("double_sum.order" + std::to_string(order), "contrastive.double_sum", worst, 1e-12);
  }

  for (GroupKind kind : opt.groups) {
    const auto G = make_group(kind);
    const std::string k = kind_name(kind);
    BackboneConfig bc;
    bc.group = kind;
    bc.width = 8;
    bc.depth = 1;
    bc.pool_stages = 1;
    const Backbone<T> net(bc, rng);
    const auto xa = Tensor<T>::randn(Shape{4, 3, 12, 12}, rng), xb = Tensor<T>::randn(Shape{4, 3, 12, 12}, rng);
    const std::size_t D = net.feature_dim();
    FeatureQueue<T> inv_queue(32, D), plain_queue(32, D);
    inv_queue.fill_random(rng, &G);
    plain_queue.fill_random(rng);
    const Prototypes<T> protos(D, 6, rng);
    const GroupLinear<T> pred(G, net.channels(), net.channels(), rng);
    const SwavConfig swav;
    for (bool invariant : {true, false}) {
      const auto& bank = invariant ? inv_queue : plain_queue;
      std::map<std::string, std::function<double(const Tensor<T>&)>> losses{
          {"moco", [&](const Tensor<T>& a) { return double(moco_loss(net(a), net(xb), bank, T(0.2), invariant).item()); }},
          {"swav",
           [&](const Tensor<T>& a) { return double(swav_loss<T>({net(a), net(xb)}, 2, protos, swav, invariant).item()); }},
          {"simsiam",
           [&](const Tensor<T>& a) {
             const auto z1 = net(a), z2 = net(xb);
             return double(simsiam_loss(z1, z2, pred(z1), pred(z2), invariant).item());
           }},
      };
      for (const auto& [name, loss] : losses) {
        const double base = loss(xa);
        double worst = 0.0;
        for (std::size_t m = 0; m < 4; ++m)
          for (std::size_t g = 1; g < G.order(); ++g) worst = std::max(worst, std::abs(loss(transform_sample(xa, m, G, g)) - base));
        if (invariant) rec.at_most("invariant." + name + "." + k, "contrastive.loss_invariance", worst, tol.invariance);
        else rec.check("plain_changes." + name + "." + k, "contrastive.loss_invariance", worst, ">", 1e-3);
      }
    }
  }

  const auto d4 = make_group(GroupKind::rot4_flip);
  const std::size_t D = 16;
  FeatureQueue<double> queue(12, D);
  queue.fill_random(rng, &d4);
  const auto keys = TD::randn(Shape{4, D}, rng), q0 = TD::randn(Shape{4, D}, rng), other = TD::randn(Shape{4, D}, rng);
  using PF = PooledFeature<double>;
  double moco_err = 0.0;
  for (bool inv : {true, false})
    moco_err = std::max(moco_err, grad_check([&](const TD& v) { return moco_loss(PF{v, d4}, PF{keys, d4}, queue, 0.2, inv); }, q0));
  rec.at_most("grad.moco_queries", "contrastive.loss_gradients", moco_err, 1e-3);
  const Prototypes<double> protos(D, 5, rng);
  rec.at_most("grad.swav", "contrastive.loss_gradients",
              grad_check([&](const TD& v) { return swav_loss<double>({PF{other, d4}, PF{v, d4}}, 1, protos, {}, true); }, q0),
              1e-3);
  const auto z2 = TD::randn(Shape{4, D}, rng), p2 = TD::randn(Shape{4, D}, rng);
  rec.at_most("grad.simsiam", "contrastive.loss_gradients",
              grad_check([&](const TD& v) { return simsiam_loss(PF{other, d4}, PF{z2, d4}, PF{v, d4}, PF{p2, d4}, true); }, q0),
              1e-3);

  const auto scores = TD::randn(Shape{64, 16}, rng);
  const auto plan = sinkhorn_knopp(scores, 100, 0.5);
  // Rows sum to one after the final scaling; columns carry mass B/c each.
  double marginal = 0.0;
  for (std::size_t j = 0; j < 16; ++j) {
    double col = 0.0;
    for (std::size_t i = 0; i < 64; ++i) col += plan[i * 16 + j];
    marginal = std::max(marginal, std::abs(col - 64.0 / 16.0));
  }
  rec.at_most("sinkhorn.marginals_100_iterations", "contrastive.sinkhorn", marginal, 1e-6);
  double rows = 0.0;
  for (std::size_t iters : {1, 2, 3, 7}) {
    const auto q = sinkhorn_knopp(TD::randn(Shape{64, 16}, rng, 3.0), iters, 0.05);
    for (std::size_t i = 0; i < 64; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 16; ++j) {
        s += q[i * 16 + j];
        if (q[i * 16 + j] < 0) rows = std::max(rows, -q[i * 16 + j]);
      }
      rows = std::max(rows, std::abs(s - 1.0));
    }
  }
  rec.at_most("sinkhorn.rows_are_distributions", "contrastive.sinkhorn", rows, 1e-9);

  // EMA: shadow' = m * shadow + (1 - m) * online, element for element.
  BackboneConfig bc;
  bc.group = GroupKind::rot4;
  bc.width = 4;
  bc.depth = 1;
  bc.pool_stages = 1;
  Backbone<T> online(bc, rng);
  MomentumEncoder<Backbone<T>> key(online, 0.9);
  for (auto* p : online.parameter_slots())
    for (auto& v : p->mutable_values()) v += T(0.25);
  std::vector<std::vector<T>> expect;
  {
    auto src = online.parameter_slots();
    auto dst = key.shadow().parameter_slots();
    for (std::size_t i = 0; i < src.size(); ++i) {
      std::vector<T> e;
      for (std::size_t j = 0; j < src[i]->size(); ++j)
        e.push_back(T(0.9) * (*dst[i])[j] + (T(1) - T(0.9)) * (*src[i])[j]);
      expect.push_back(std::move(e));
    }
  }
  key.update(online);
  std::size_t ema_bad = 0;
  auto dst = key.shadow().parameter_slots();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    ema_bad += dst[i]->requires_grad();
    for (std::size_t j = 0; j < dst[i]->size(); ++j) ema_bad += (*dst[i])[j] != expect[i][j];
  }
  FeatureQueue<T> fifo(5, 2);
  std::vector<T> pushed;
  for (int round = 0; round < 4; ++round) {
    const auto rows2 = l2_normalize(Tensor<T>::randn(Shape{2, 2}, rng), 1);
    fifo.push(rows2);
    pushed.insert(pushed.end(), rows2.values().begin(), rows2.values().end());
  }
  const auto contents = fifo.contents();
  ema_bad += fifo.size() != 5;
  for (std::size_t i = 0; i < 10; ++i) ema_bad += contents[i] != pushed[pushed.size() - 10 + i];
  rec.exactly("ema_and_fifo", "contrastive.ema_fifo", double(ema_bad));
}

// ---------------------------------------------------------------- data + cli
RunConfig tiny_config(std::uint64_t seed) {
  RunConfig cfg;
  cfg.name = "verify-determinism";
  cfg.task = Task::simsiam;
  cfg.group = GroupKind::rot4;
  cfg.width = 4;
  cfg.depth = 1;
  cfg.pool_stages = 1;
  cfg.hidden_dim = 16;
  cfg.head_dim = 16;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.residual_every = 2;
  cfg.probe_batch = 2;
  cfg.synth_classes = 2;
  cfg.synth_per_class = 12;
  cfg.synth_test_per_class = 6;
  cfg.synth_extent = 16;
  cfg.probe_epochs = 3;
  cfg.probe_batch_size = 8;
  cfg.reseed(seed);
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

void suite_data_and_cli(Recorder& rec, const VerifyOptions& opt, bool data, bool cli, std::mt19937_64& rng) {
  rec.suite("data");
  const auto d = synth_dataset(2, 3, 16, opt.seed);
  AugmentationSpec spec;
  spec.crop = 0.8;
  spec.hflip = 0.5;
  spec.rot90 = 0.5;
  spec.grayscale = 0.3;
  spec.seed = rng();
  std::size_t differ = 0, shape_bad = 0;
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::uint64_t draw = 0; draw < 10; ++draw) {
      const auto img = d.image<double>(i);
      const auto [a1, b1] = augment(img, spec, draw);
      const auto [a2, b2] = augment(img, spec, draw);
      differ += mismatches(a1, a2) + mismatches(b1, b2);
      shape_bad += (a1.shape() != img.shape()) + (b1.shape() != img.shape());
    }
  if (data) {
    rec.exactly("augment.same_seed_same_views", "data.determinism", double(differ));
    rec.exactly("augment.views_keep_shape", "data.view_shape", double(shape_bad));
  }

  const auto root = fs::temp_directory_path() / ("equivar_verify_" + std::to_string(rng()));
  const auto cfg = tiny_config(opt.seed);
  pretrain<double>(cfg, root / "a");
  pretrain<double>(cfg, root / "b");
  if (data) {
    rec.exactly("pretrain.f64_trajectory_bitwise", "data.determinism",
                double(slurp(root / "a" / "metrics.csv") != slurp(root / "b" / "metrics.csv")));
  }
  if (cli) {
    rec.suite("cli");
    const bool same = slurp(root / "a" / "epochs.csv") == slurp(root / "b" / "epochs.csv") &&
                      slurp(root / "a" / "checkpoint.eqt") == slurp(root / "b" / "checkpoint.eqt");
    rec.exactly("pretrain.f64_final_metrics_identical", "cli.reproducibility", double(!same));
  }
  fs::remove_all(root);
}

}  // namespace

VerificationReport run_verification(const VerifyOptions& opt) {
  VerificationReport report;
  report.precision = opt.precision;
  Recorder rec(report);
  const auto tol = Tolerances::for_precision(opt.precision);
  auto wanted = [&](const std::string& s) {
    return opt.suites.empty() || std::find(opt.suites.begin(), opt.suites.end(), s) != opt.suites.end();
  };
  for (const auto& s : opt.suites)
    if (std::find(suite_names().begin(), suite_names().end(), s) == suite_names().end())
      throw ParameterError("unknown verification suite '" + s + "'");
  std::mt19937_64 rng(opt.seed);
  const bool f32 = opt.precision == Precision::f32;
  if (wanted("group")) f32 ? suite_group<float>(rec, opt, rng) : suite_group<double>(rec, opt, rng);
  if (wanted("tensor")) suite_tensor(rec, rng);
  if (wanted("layers")) f32 ? suite_layers<float>(rec, opt, tol, rng) : suite_layers<double>(rec, opt, tol, rng);
  if (wanted("pretext")) f32 ? suite_pretext<float>(rec, opt, tol, rng) : suite_pretext<double>(rec, opt, tol, rng);
  if (wanted("contrastive"))
    f32 ? suite_contrastive<float>(rec, opt, tol, rng) : suite_contrastive<double>(rec, opt, tol, rng);
  if (wanted("data") || wanted("cli")) suite_data_and_cli(rec, opt, wanted("data"), wanted("cli"), rng);

  if (opt.suites.empty()) {
    std::set<std::string> covered;
    for (const auto& c : report.checks) covered.insert(c.property);
    covered.insert("cli.coverage");
    std::size_t missing = 0;
    for (const auto& p : property_manifest()) missing += !covered.count(p.id);
    rec.suite("cli");
    rec.exactly("manifest.uncovered_properties", "cli.coverage", double(missing));
  }
  return report;
}

void print_verification(std::ostream& os, const VerificationReport& report) {
  os << "precision " << to_string(report.precision) << '\n';
  for (const auto& c : report.checks) {
    os << (c.passed ? "PASS " : "FAIL ") << c.suite << '/' << c.id << "  " << std::setprecision(6) << c.value << ' '
       << c.comparison << ' ' << c.threshold << '\n';
  }
  const auto failed = report.failed_ids();
  os << report.checks.size() - failed.size() << '/' << report.checks.size() << " checks passed\n";
  for (const auto& f : failed) os << "failed: " << f << '\n';
}

void write_verification_csv(std::ostream& os, const VerificationReport& report) {
  os << "suite,id,property,value,comparison,threshold,passed,seconds\n";
  os << std::setprecision(9);
  for (const auto& c : report.checks) {
    os << c.suite << ',' << c.id << ',' << c.property << ',' << c.value << ',' << c.comparison << ',' << c.threshold
       << ',' << (c.passed ? 1 : 0) << ',' << c.seconds << '\n';
  }
}

}  // namespace equivar
