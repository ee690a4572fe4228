#include "equivar/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <ostream>

#include "equivar/checkpoint.hpp"
#include "equivar/contrastive.hpp"
#include "equivar/errors.hpp"
#include "equivar/metrics.hpp"
#include "equivar/ops.hpp"
#include "equivar/optim.hpp"
#include "equivar/pretext.hpp"

namespace equivar {

template <typename T>
PooledFeature<T> MlpHead<T>::operator()(const PooledFeature<T>& v) const {
  auto h = fc1_(v);
  const std::size_t b = h.batch(), n = h.group.order(), c = h.block();
  h.tensor = relu(reshape(channel_normalize(reshape(h.tensor, Shape{1, b * n, c, 1, 1})), Shape{b, n * c}));
  return fc2_(h);
}

template <typename T>
std::vector<Tensor<T>*> MlpHead<T>::parameter_slots() {
  auto out = fc1_.parameter_slots();
  for (auto* p : fc2_.parameter_slots()) out.push_back(p);
  return out;
}

template <typename T>
Encoder<T>::Encoder(const BackboneConfig& backbone, std::size_t hidden_dim, std::size_t out_dim, std::mt19937_64& rng)
    : backbone_(backbone, rng) {
  const std::size_t n = backbone_.group().order();
  head_ = MlpHead<T>(backbone_.group(), backbone_.channels(), hidden_dim / n, out_dim / n, rng);
}

template <typename T>
std::vector<Tensor<T>*> Encoder<T>::parameter_slots() {
  auto out = backbone_.parameter_slots();
  for (auto* p : head_.parameter_slots()) out.push_back(p);
  return out;
}

template <typename T>
Tensor<T> transform_sample(const Tensor<T>& x, std::size_t m, const FiniteGroup& group, std::size_t g) {
  const std::size_t per = x.size() / x.extent(0);
  const Shape one(x.shape().begin() + 1, x.shape().end());
  const auto src = x.values();
  Tensor<T> sample(one, std::vector<T>(src.begin() + static_cast<std::ptrdiff_t>(m * per),
                                       src.begin() + static_cast<std::ptrdiff_t>((m + 1) * per)));
  const auto moved = apply_grid(group, g, sample);
  std::vector<T> out(src.begin(), src.end());
  std::copy(moved.values().begin(), moved.values().end(), out.begin() + static_cast<std::ptrdiff_t>(m * per));
  return Tensor<T>(x.shape(), std::move(out));
}

namespace {

template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& items) {
  Shape shape = items.front().shape();
  shape.insert(shape.begin(), items.size());
  std::vector<T> values;
  values.reserve(numel(shape));
  for (const auto& t : items) values.insert(values.end(), t.values().begin(), t.values().end());
  return Tensor<T>(shape, std::move(values));
}

// [S*B, |G|*c] in slot-major sample order -> [B, |G|*S*c] with block h holding
// the S slot blocks h side by side.
template <typename T>
PooledFeature<T> slot_features(const PooledFeature<T>& pf, std::size_t slots) {
  const std::size_t B = pf.batch() / slots, G = pf.group.order(), c = pf.block();
  std::vector<std::uint32_t> index;
  index.reserve(B * G * slots * c);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < G; ++h)
      for (std::size_t s = 0; s < slots; ++s)
        for (std::size_t j = 0; j < c; ++j)
          index.push_back(static_cast<std::uint32_t>((s * B + b) * G * c + h * c + j));
  return {gather(pf.tensor, index, Shape{B, G * slots * c}), pf.group};
}

template <typename T>
std::vector<Tensor<T>> images_of(const Dataset& data, std::span<const std::size_t> indices) {
  std::vector<Tensor<T>> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(data.image<T>(i));
  return out;
}

std::mt19937_64 step_rng(std::uint64_t seed, std::size_t step, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

BackboneConfig backbone_config(const RunConfig& cfg, std::size_t in_channels) {
  BackboneConfig bc;
  bc.group = cfg.model_group();
  bc.in_channels = in_channels;
  bc.width = cfg.width;
  bc.depth = cfg.depth;
  bc.kernel = cfg.kernel;
  bc.pool_stages = cfg.pool_stages;
  return bc;
}

std::vector<std::size_t> probe_indices(const Dataset& probe_set, std::size_t count) {
  if (count > probe_set.size()) throw ParameterError("probe batch exceeds the held-out set");
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = i;
  return idx;
}

template <typename T>
void add_state(std::vector<NamedTensor<T>>& out, const std::string& prefix, const std::vector<Tensor<T>*>& slots) {
  for (std::size_t i = 0; i < slots.size(); ++i) out.push_back({prefix + std::to_string(i), *slots[i]});
}

template <typename T>
void add_backbone_state(std::vector<NamedTensor<T>>& out, Backbone<T>& net) {
  add_state(out, "backbone.", net.parameter_slots());
  const auto stats = net.running_statistics();
  for (std::size_t i = 0; i < stats.size(); ++i) out.push_back({"backbone_stats." + std::to_string(i), stats[i]});
}

// Shared by the two pretext tasks: classifier on slot features, either the
// equivariant head (labels carry the group action) or a plain dense layer.
template <typename T>
class PretextBase : public TaskModel<T> {
 public:
  PretextBase(const RunConfig& cfg, const Dataset& train, const Dataset& probe_set, std::size_t slots)
      : cfg_(cfg),
        train_(train),
        group_(make_group(cfg.group)),
        slots_(slots),
        rng_(cfg.init_seed),
        net_(backbone_config(cfg, train.channels()), rng_),
        probe_(images_of<T>(probe_set, probe_indices(probe_set, cfg.probe_batch))) {}

  const Backbone<T>& backbone() const override { return net_; }

  std::vector<NamedTensor<T>> state() override {
    std::vector<NamedTensor<T>> out;
    add_backbone_state(out, net_);
    add_state(out, "head.", equivariant_head_ ? eq_head_.parameter_slots() : plain_head_.parameter_slots());
    return out;
  }

 protected:
  void build_head(std::optional<LabelAction> action, std::size_t labels) {
    equivariant_head_ = action.has_value();
    if (equivariant_head_) eq_head_ = EquivariantHead<T>(*action, slots_ * net_.channels(), rng_);
    else plain_head_ = Linear<T>(slots_ * net_.feature_dim(), labels, rng_);
    auto params = collect_parameters<T>(net_);
    for (auto p : equivariant_head_ ? collect_parameters<T>(eq_head_) : collect_parameters<T>(plain_head_))
      params.push_back(p);
    opt_.emplace(std::move(params), cfg_.momentum, cfg_.weight_decay);
  }

  // patches: slot-major stack [S*B, C, p, p].
  Tensor<T> loss_from_patches(const Tensor<T>& patches, std::span<const std::size_t> head_labels) const {
    const auto feat = slot_features(net_(patches), slots_);
    const auto logits = equivariant_head_ ? eq_head_(feat) : plain_head_(feat.tensor);
    return pretext_loss(logits, head_labels);
  }

  T optimize(const Tensor<T>& loss, double lr) {
    backward(loss);
    opt_->step(lr);
    return loss.item();
  }

  RunConfig cfg_;
  const Dataset& train_;
  FiniteGroup group_;
  std::size_t slots_;
  std::mt19937_64 rng_;
  Backbone<T> net_;
  std::vector<Tensor<T>> probe_;
  bool equivariant_head_ = false;
  EquivariantHead<T> eq_head_;
  Linear<T> plain_head_;
  std::optional<Sgd<T>> opt_;
};

template <typename T>
class ContextTask final : public PretextBase<T> {
  using Base = PretextBase<T>;

 public:
  ContextTask(const RunConfig& cfg, const Dataset& train, const Dataset& probe_set)
      : Base(cfg, train, probe_set, 2), action_(context_label_action(this->group_)) {
    this->build_head(cfg.invariant_loss ? std::optional<LabelAction>(action_) : std::nullopt, 8);
    std::mt19937_64 rng(cfg.jigsaw_seed);
    for (std::size_t m = 0; m < this->probe_.size(); ++m) probe_labels_.push_back(rng() % 8);
  }

  T train_step(std::span<const std::size_t> indices, std::size_t step, double lr) override {
    auto rng = step_rng(this->cfg_.aug_seed, step, 1);
    std::vector<std::size_t> labels;
    for (std::size_t b = 0; b < indices.size(); ++b) labels.push_back(rng() % 8);
    const PatchGeometry geometry{this->cfg_.patch, this->cfg_.gap, this->cfg_.jitter};
    return this->optimize(loss(images_of<T>(this->train_, indices), labels, geometry, &rng), lr);
  }

  std::optional<double> residual() override {
    NoGradGuard guard;
    const PatchGeometry geometry{this->cfg_.patch, this->cfg_.gap, 0};
    const double base = loss(this->probe_, probe_labels_, geometry, nullptr).item();
    double worst = 0.0;
    for (std::size_t m = 0; m < this->probe_.size(); ++m)
      for (std::size_t g = 0; g < this->group_.order(); ++g) {
        if (g == this->group_.identity()) continue;
        auto images = this->probe_;
        auto labels = probe_labels_;
        images[m] = apply_grid(this->group_, g, images[m]);
        labels[m] = action_.apply(g, labels[m]);
        worst = std::max(worst, std::abs(double(loss(images, labels, geometry, nullptr).item()) - base));
      }
    return worst;
  }

 private:
  Tensor<T> loss(const std::vector<Tensor<T>>& images, std::span<const std::size_t> labels,
                 const PatchGeometry& geometry, std::mt19937_64* rng) const {
    std::vector<Tensor<T>> centers, neighbors;
    std::vector<std::size_t> head_labels;
    for (std::size_t b = 0; b < images.size(); ++b) {
      auto s = extract_context(images[b], labels[b], geometry, rng);
      centers.push_back(s.center);
      neighbors.push_back(s.neighbor);
      head_labels.push_back(this->equivariant_head_ ? s.label : kRasterContextOrder[s.label]);
    }
    for (auto& n : neighbors) centers.push_back(n);
    return this->loss_from_patches(stack(centers), head_labels);
  }

  LabelAction action_;
  std::vector<std::size_t> probe_labels_;
};

template <typename T>
class JigsawTask final : public PretextBase<T> {
  using Base = PretextBase<T>;

 public:
  JigsawTask(const RunConfig& cfg, const Dataset& train, const Dataset& probe_set)
      : Base(cfg, train, probe_set, 9), subset_(make_subset(cfg)) {
    closed_ = subset_.group_kind() == cfg.group;
    this->build_head(cfg.invariant_loss ? std::optional<LabelAction>(subset_.label_action(this->group_)) : std::nullopt,
                     subset_.size());
    std::mt19937_64 rng(cfg.jigsaw_seed);
    for (std::size_t m = 0; m < this->probe_.size(); ++m) probe_labels_.push_back(rng() % subset_.size());
  }

  T train_step(std::span<const std::size_t> indices, std::size_t step, double lr) override {
    auto rng = step_rng(this->cfg_.aug_seed, step, 2);
    std::vector<std::size_t> labels;
    for (std::size_t b = 0; b < indices.size(); ++b) labels.push_back(rng() % subset_.size());
    const PatchGeometry geometry{this->cfg_.patch, this->cfg_.gap, this->cfg_.jitter};
    return this->optimize(loss(images_of<T>(this->train_, indices), labels, geometry, &rng), lr);
  }

  std::optional<double> residual() override {
    if (!closed_) return std::nullopt;
    NoGradGuard guard;
    const PatchGeometry geometry{this->cfg_.patch, this->cfg_.gap, 0};
    const double base = loss(this->probe_, probe_labels_, geometry, nullptr).item();
    double worst = 0.0;
    for (std::size_t m = 0; m < this->probe_.size(); ++m)
      for (std::size_t g = 0; g < this->group_.order(); ++g) {
        if (g == this->group_.identity()) continue;
        auto images = this->probe_;
        auto labels = probe_labels_;
        images[m] = apply_grid(this->group_, g, images[m]);
        labels[m] = subset_.act(this->group_, g, labels[m]);
        worst = std::max(worst, std::abs(double(loss(images, labels, geometry, nullptr).item()) - base));
      }
    return worst;
  }

 private:
  // The equivariant head needs the orbit-closed subset; the other arms use
  // the classic greedy subset of the same size.
  static PermutationSubset make_subset(const RunConfig& cfg) {
    if (!cfg.invariant_loss) {
      const std::size_t order = make_group(cfg.group).order();
      return generate_closed_subset(GroupKind::trivial, cfg.jigsaw_orbits * order, cfg.jigsaw_seed);
    }
    if (cfg.jigsaw_subset.empty()) return generate_closed_subset(cfg.group, cfg.jigsaw_orbits, cfg.jigsaw_seed);
    std::ifstream is(cfg.jigsaw_subset);
    if (!is) throw ConfigError("jigsaw.subset", "cannot open " + cfg.jigsaw_subset);
    auto subset = PermutationSubset::read(is);
    if (subset.group_kind() != cfg.group) throw ConfigError("jigsaw.subset", "subset was built for another group");
    return subset;
  }

  Tensor<T> loss(const std::vector<Tensor<T>>& images, std::span<const std::size_t> labels,
                 const PatchGeometry& geometry, std::mt19937_64* rng) const {
    std::vector<std::vector<Tensor<T>>> per_slot(9);
    for (std::size_t b = 0; b < images.size(); ++b) {
      auto s = extract_jigsaw(images[b], subset_.at(labels[b]), geometry, rng);
      for (std::size_t k = 0; k < 9; ++k) per_slot[k].push_back(s.patches[k]);
    }
    std::vector<Tensor<T>> flat;
    for (auto& slot : per_slot)
      for (auto& p : slot) flat.push_back(p);
    return this->loss_from_patches(stack(flat), labels);
  }

  PermutationSubset subset_;
  bool closed_ = false;
  std::vector<std::size_t> probe_labels_;
};

// Shared by the contrastive tasks: an encoder trained on augmented views,
// with fixed probe views for residual measurements.
template <typename T>
class ContrastiveBase : public TaskModel<T> {
 public:
  ContrastiveBase(const RunConfig& cfg, const Dataset& train, const Dataset& probe_set)
      : cfg_(cfg),
        train_(train),
        group_(make_group(cfg.group)),
        rng_(cfg.init_seed),
        encoder_(backbone_config(cfg, train.channels()), cfg.hidden_dim, cfg.head_dim, rng_),
        probe_(probe_set.batch<T>(probe_indices(probe_set, cfg.probe_batch))) {
    spec_.crop = cfg.aug_crop;
    spec_.crop_min_scale = cfg.aug_crop_min_scale;
    spec_.hflip = cfg.aug_hflip;
    spec_.rot90 = cfg.aug_rot90;
    spec_.grayscale = cfg.aug_grayscale;
    spec_.seed = cfg.aug_seed;
  }

  const Backbone<T>& backbone() const override { return encoder_.backbone(); }

 protected:
  // View `k` of a step; views come in pairs sharing one draw index.
  Tensor<T> view(const Tensor<T>& batch, std::size_t step, std::size_t k, std::size_t views_per_step) const {
    const std::size_t B = batch.extent(0);
    return augment_batch(batch, spec_, (step * views_per_step + k / 2) * B, k % 2);
  }

  static constexpr std::size_t kProbeStep = std::size_t{1} << 40;

  template <typename LossFn>
  double worst_change(const std::vector<Tensor<T>>& views, std::size_t slot, LossFn loss) {
    NoGradGuard guard;
    const double base = loss(views);
    double worst = 0.0;
    for (std::size_t m = 0; m < views[slot].extent(0); ++m)
      for (std::size_t g = 0; g < group_.order(); ++g) {
        if (g == group_.identity()) continue;
        auto changed = views;
        changed[slot] = transform_sample(views[slot], m, group_, g);
        worst = std::max(worst, std::abs(loss(changed) - base));
      }
    return worst;
  }

  RunConfig cfg_;
  const Dataset& train_;
  FiniteGroup group_;
  std::mt19937_64 rng_;
  Encoder<T> encoder_;
  Tensor<T> probe_;
  AugmentationSpec spec_;
};

template <typename T>
class MocoTask final : public ContrastiveBase<T> {
  using Base = ContrastiveBase<T>;

 public:
  MocoTask(const RunConfig& cfg, const Dataset& train, const Dataset& probe_set)
      : Base(cfg, train, probe_set),
        key_(this->encoder_, cfg.moco_momentum),
        queue_(cfg.moco_queue, cfg.head_dim),
        opt_(collect_parameters<T>(this->encoder_), cfg.momentum, cfg.weight_decay) {
    mcfg_.tau = cfg.moco_tau;
    mcfg_.momentum = cfg.moco_momentum;
    mcfg_.queue_size = cfg.moco_queue;
    mcfg_.invariant = cfg.invariant_loss;
    const auto model_group = this->encoder_.backbone().group();
    queue_.fill_random(this->rng_, cfg.invariant_loss ? &model_group : nullptr);
    probe_views_ = {this->view(this->probe_, Base::kProbeStep, 0, 1), this->view(this->probe_, Base::kProbeStep, 1, 1)};
  }

  T train_step(std::span<const std::size_t> indices, std::size_t step, double lr) override {
    const auto batch = this->train_.template batch<T>(indices);
    return moco_step(this->encoder_, key_, queue_, opt_, this->view(batch, step, 0, 1), this->view(batch, step, 1, 1),
                     mcfg_, lr);
  }

  std::optional<double> residual() override {
    NoGradGuard guard;
    const auto keys = key_.shadow()(probe_views_[1]);
    return this->worst_change(probe_views_, 0, [&](const std::vector<Tensor<T>>& v) {
      return double(moco_loss(this->encoder_(v[0]), keys, queue_, T(mcfg_.tau), mcfg_.invariant).item());
    });
  }

  std::vector<NamedTensor<T>> state() override {
    std::vector<NamedTensor<T>> out;
    add_backbone_state(out, this->encoder_.backbone());
    add_state(out, "encoder.", this->encoder_.parameter_slots());
    add_state(out, "key.", key_.shadow().parameter_slots());
    const auto& s = queue_.storage();
    out.push_back({"queue", Tensor<T>(Shape{queue_.capacity(), queue_.dim()}, s)});
    return out;
  }

 private:
  MomentumEncoder<Encoder<T>> key_;
  FeatureQueue<T> queue_;
  Sgd<T> opt_;
  MocoConfig mcfg_;
  std::vector<Tensor<T>> probe_views_;
};

template <typename T>
class SwavTask final : public ContrastiveBase<T> {
  using Base = ContrastiveBase<T>;

 public:
  SwavTask(const RunConfig& cfg, const Dataset& train, const Dataset& probe_set)
      : Base(cfg, train, probe_set), prototypes_(cfg.head_dim, cfg.swav_prototypes, this->rng_) {
    if (cfg.swav_small_crops > 0 &&
        (cfg.swav_small_extent > train.extent() || cfg.swav_small_extent % (std::size_t{1} << cfg.pool_stages) != 0)) {
      throw ConfigError("swav.small_extent", "must fit the images and be divisible by the pooling stride");
    }
    auto params = collect_parameters<T>(this->encoder_);
    params.push_back(prototypes_.matrix());
    opt_.emplace(std::move(params), cfg.momentum, cfg.weight_decay);
    scfg_.tau = cfg.swav_tau;
    scfg_.eps = cfg.swav_eps;
    scfg_.iterations = cfg.swav_iterations;
    if (cfg.swav_queue > 0) queue_.emplace(cfg.swav_queue, cfg.head_dim);
    probe_views_ = views(this->probe_, Base::kProbeStep);
  }

  T train_step(std::span<const std::size_t> indices, std::size_t step, double lr) override {
    const auto batch_views = views(this->train_.template batch<T>(indices), step);
    std::vector<PooledFeature<T>> feats;
    for (const auto& v : batch_views) feats.push_back(this->encoder_(v));
    const auto loss = swav_loss(feats, 2, prototypes_, scfg_, this->cfg_.invariant_loss, queue_ ? &*queue_ : nullptr);
    backward(loss);
    opt_->step(lr);
    prototypes_.renormalize();
    if (queue_) queue_->push(stop_gradient(embed(feats[0], this->cfg_.invariant_loss)));
    return loss.item();
  }

  std::optional<double> residual() override {
    return this->worst_change(probe_views_, 0, [&](const std::vector<Tensor<T>>& v) {
      std::vector<PooledFeature<T>> feats;
      for (const auto& x : v) feats.push_back(this->encoder_(x));
      return double(swav_loss(feats, 2, prototypes_, scfg_, this->cfg_.invariant_loss).item());
    });
  }

  std::vector<NamedTensor<T>> state() override {
    std::vector<NamedTensor<T>> out;
    add_backbone_state(out, this->encoder_.backbone());
    add_state(out, "encoder.", this->encoder_.parameter_slots());
    out.push_back({"prototypes", prototypes_.matrix()});
    return out;
  }

 private:
  // Two full-size views, then square crops of the small extent at seeded offsets.
  std::vector<Tensor<T>> views(const Tensor<T>& batch, std::size_t step) const {
    const std::size_t small = this->cfg_.swav_small_crops;
    const std::size_t per_step = 1 + (small + 1) / 2;
    std::vector<Tensor<T>> out{this->view(batch, step, 0, per_step), this->view(batch, step, 1, per_step)};
    auto rng = step_rng(this->cfg_.aug_seed, step, 3);
    const std::size_t n = batch.extent(2), e = this->cfg_.swav_small_extent;
    for (std::size_t i = 0; i < small; ++i) {
      const auto full = this->view(batch, step, 2 + i, per_step);
      const std::size_t B = full.extent(0), C = full.extent(1);
      std::vector<T> values;
      values.reserve(B * C * e * e);
      for (std::size_t b = 0; b < B; ++b) {
        const std::size_t r0 = rng() % (n - e + 1), c0 = rng() % (n - e + 1);
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t r = 0; r < e; ++r)
            for (std::size_t k = 0; k < e; ++k) values.push_back(full.at({b, c, r0 + r, c0 + k}));
      }
      out.emplace_back(Shape{B, C, e, e}, std::move(values));
    }
    return out;
  }

  Prototypes<T> prototypes_;
  std::optional<Sgd<T>> opt_;
  SwavConfig scfg_;
  std::optional<FeatureQueue<T>> queue_;
  std::vector<Tensor<T>> probe_views_;
};

template <typename T>
class SimsiamTask final : public ContrastiveBase<T> {
  using Base = ContrastiveBase<T>;

 public:
  SimsiamTask(const RunConfig& cfg, const Dataset& train, const Dataset& probe_set) : Base(cfg, train, probe_set) {
    const auto& group = this->encoder_.backbone().group();
    const std::size_t n = group.order();
    predictor_ = MlpHead<T>(group, cfg.head_dim / n, cfg.hidden_dim / n, cfg.head_dim / n, this->rng_);
    auto params = collect_parameters<T>(this->encoder_);
    for (auto p : collect_parameters<T>(predictor_)) params.push_back(p);
    opt_.emplace(std::move(params), cfg.momentum, cfg.weight_decay);
    probe_views_ = {this->view(this->probe_, Base::kProbeStep, 0, 1), this->view(this->probe_, Base::kProbeStep, 1, 1)};
  }

  T train_step(std::span<const std::size_t> indices, std::size_t step, double lr) override {
    const auto batch = this->train_.template batch<T>(indices);
    const auto loss = evaluate({this->view(batch, step, 0, 1), this->view(batch, step, 1, 1)});
    backward(loss);
    opt_->step(lr);
    return loss.item();
  }

  std::optional<double> residual() override {
    return this->worst_change(probe_views_, 0, [&](const std::vector<Tensor<T>>& v) { return double(evaluate(v).item()); });
  }

  std::vector<NamedTensor<T>> state() override {
    std::vector<NamedTensor<T>> out;
    add_backbone_state(out, this->encoder_.backbone());
    add_state(out, "encoder.", this->encoder_.parameter_slots());
    add_state(out, "predictor.", predictor_.parameter_slots());
    return out;
  }

 private:
  Tensor<T> evaluate(const std::vector<Tensor<T>>& v) const {
    const auto z1 = this->encoder_(v[0]);
    const auto z2 = this->encoder_(v[1]);
    return simsiam_loss(z1, z2, predictor_(z1), predictor_(z2), this->cfg_.invariant_loss);
  }

  MlpHead<T> predictor_;
  std::optional<Sgd<T>> opt_;
  std::vector<Tensor<T>> probe_views_;
};

}  // namespace

template <typename T>
std::unique_ptr<TaskModel<T>> make_task(const RunConfig& cfg, const Dataset& train, const Dataset& probe_set) {
  cfg.validate();
  switch (cfg.task) {
    case Task::context:
      return std::make_unique<ContextTask<T>>(cfg, train, probe_set);
    case Task::jigsaw:
      return std::make_unique<JigsawTask<T>>(cfg, train, probe_set);
    case Task::moco:
      return std::make_unique<MocoTask<T>>(cfg, train, probe_set);
    case Task::swav:
      return std::make_unique<SwavTask<T>>(cfg, train, probe_set);
    case Task::simsiam:
      return std::make_unique<SimsiamTask<T>>(cfg, train, probe_set);
  }
  throw ConfigError("run.task", "unknown task");
}

DataSplit load_data(const RunConfig& cfg) {
  DataSplit split;
  if (cfg.train_data.empty()) {
    split.train = synth_dataset(cfg.synth_classes, cfg.synth_per_class, cfg.synth_extent, cfg.data_seed);
    split.test = synth_dataset(cfg.synth_classes, cfg.synth_test_per_class, cfg.synth_extent,
                               cfg.data_seed ^ 0x9e3779b97f4a7c15ULL);
    return split;
  }
  split.train = load_dataset(cfg.train_data);
  if (cfg.test_data.empty()) throw ConfigError("data.test", "a held-out set is required with data.train");
  split.test = load_dataset(cfg.test_data);
  if (split.test.channels() != split.train.channels() || split.test.extent() != split.train.extent())
    throw ConfigError("data.test", "held-out images differ in shape from the training images");
  return split;
}

ProbeResult train_linear_probe(const Tensor<double>& train_features, std::span<const std::size_t> train_labels,
                               const Tensor<double>& test_features, std::span<const std::size_t> test_labels,
                               const RunConfig& cfg) {
  if (train_features.extent(0) != train_labels.size() || test_features.extent(0) != test_labels.size())
    throw DimensionError("probe: feature and label counts differ");
  if (train_features.extent(1) != test_features.extent(1)) throw DimensionError("probe: feature dimensions differ");
  const std::size_t n = train_features.extent(0), d = train_features.extent(1);
  std::size_t classes = 0;
  for (auto l : train_labels) classes = std::max(classes, l + 1);
  for (auto l : test_labels) classes = std::max(classes, l + 1);

  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  const auto f = train_features.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += f[i * d + j] / double(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) sd[j] += (f[i * d + j] - mu[j]) * (f[i * d + j] - mu[j]) / double(n);
  for (auto& s : sd) s = std::sqrt(s) + 1e-8;
  auto standardize = [&](const Tensor<double>& x) {
    std::vector<double> v(x.values().begin(), x.values().end());
    for (std::size_t i = 0; i < x.extent(0); ++i)
      for (std::size_t j = 0; j < d; ++j) v[i * d + j] = (v[i * d + j] - mu[j]) / sd[j];
    return Tensor<double>(x.shape(), std::move(v));
  };
  const auto xs = standardize(train_features), xt = standardize(test_features);

  std::mt19937_64 rng(cfg.init_seed ^ 0x5851f42d4c957f2dULL);
  Linear<double> head(d, classes, rng);
  Sgd<double> opt(collect_parameters<double>(head), cfg.momentum, 0.0);
  const std::size_t bs = std::min(cfg.probe_batch_size, n);
  const std::size_t total = cfg.probe_epochs * (n / bs);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.probe_epochs; ++epoch) {
    for (const auto& idx : batches(n, bs, cfg.epoch_seed + 7919 * (epoch + 1))) {
      std::vector<double> rows;
      std::vector<std::size_t> labels;
      for (auto i : idx) {
        rows.insert(rows.end(), xs.values().begin() + static_cast<std::ptrdiff_t>(i * d),
                    xs.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
        labels.push_back(train_labels[i]);
      }
      const auto loss = pretext_loss(head(Tensor<double>(Shape{idx.size(), d}, std::move(rows))),
                                     std::span<const std::size_t>(labels));
      backward(loss);
      opt.step(scheduled_lr(cfg.probe_lr, Schedule::cosine, step++, total));
    }
  }

  NoGradGuard guard;
  auto accuracy = [&](const Tensor<double>& x, std::span<const std::size_t> labels) {
    const auto logits = head(x);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const auto row = logits.values().subspan(i * classes, classes);
      hits += std::size_t(std::max_element(row.begin(), row.end()) - row.begin()) == labels[i];
    }
    return double(hits) / double(labels.size());
  };
  return {accuracy(xs, train_labels), accuracy(xt, test_labels)};
}

template <typename T>
Tensor<double> extract_features(const Backbone<T>& net, const Dataset& data, bool average) {
  NoGradGuard guard;
  const std::size_t n = data.size(), chunk = 64;
  const std::size_t d = average ? net.channels() : net.feature_dim();
  std::vector<double> out;
  out.reserve(n * d);
  for (std::size_t start = 0; start < n; start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(n, start + chunk); ++i) idx.push_back(i);
    auto pf = net(data.batch<T>(idx), Statistics::running);
    if (average) pf = group_average(pf);
    const std::size_t width = pf.tensor.extent(1);
    for (std::size_t b = 0; b < idx.size(); ++b)
      for (std::size_t j = 0; j < d; ++j) out.push_back(double(pf.tensor[b * width + j]));
  }
  return Tensor<double>(Shape{n, d}, std::move(out));
}

template <typename T>
ProbeResult linear_probe(const Backbone<T>& net, const Dataset& train, const Dataset& test, const RunConfig& cfg) {
  if (!train.labeled() || !test.labeled()) throw ParameterError("probe needs labeled train and test sets");
  auto& mutable_net = const_cast<Backbone<T>&>(net);
  std::vector<std::vector<T>> before;
  for (auto* p : mutable_net.parameter_slots()) before.emplace_back(p->values().begin(), p->values().end());
  const bool average = cfg.probe_average && net.group().order() > 1;
  const auto result = train_linear_probe(extract_features(net, train, average), train.labels,
                                         extract_features(net, test, average), test.labels, cfg);
  const auto after = mutable_net.parameter_slots();
  for (std::size_t i = 0; i < after.size(); ++i)
    if (!std::equal(before[i].begin(), before[i].end(), after[i]->values().begin()))
      throw StructureError("probe modified a frozen backbone parameter");
  return result;
}

double loss_infimum(Task task) { return task == Task::simsiam ? -1.0 : 0.0; }

double loss_drop(std::span<const double> epoch_loss, double infimum) {
  if (epoch_loss.size() < 2) return 0.0;
  const double first = epoch_loss.front(), last = epoch_loss.back();
  return (first - last) / (first - infimum);
}

template <typename T>
PretrainSummary pretrain(const RunConfig& cfg, const std::filesystem::path& out, std::ostream* progress) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  const auto data = load_data(cfg);
  auto task = make_task<T>(cfg, data.train, data.test);
  MetricsLog log(out);

  PretrainSummary summary;
  const std::size_t per_epoch = data.train.size() / cfg.batch_size;
  const std::size_t total = cfg.epochs * per_epoch;
  auto note_residual = [&](std::optional<double> r) {
    if (r) summary.max_residual = std::max(summary.max_residual.value_or(0.0), *r);
  };
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs && !summary.diverged; ++epoch) {
    double loss_sum = 0.0;
    std::size_t count = 0;
    std::optional<double> epoch_residual;
    for (const auto& idx : batches(data.train.size(), cfg.batch_size, cfg.epoch_seed * 1000003ULL + epoch)) {
      const double lr = scheduled_lr(cfg.lr, cfg.schedule, step, total);
      const double loss = task->train_step(idx, step, lr);
      std::optional<double> residual;
      if (step % std::max<std::size_t>(cfg.residual_every, 1) == 0 || step + 1 == total) residual = task->residual();
      if (residual) epoch_residual = std::max(epoch_residual.value_or(0.0), *residual);
      note_residual(residual);
      log.log_step({step + 1, loss, residual, lr});
      ++step;
      if (!std::isfinite(loss)) {
        summary.diverged = true;
        break;
      }
      loss_sum += loss;
      ++count;
    }
    const double mean = count ? loss_sum / double(count) : std::nan("");
    summary.epoch_loss.push_back(mean);
    std::optional<double> acc;
    const bool last = epoch == cfg.epochs;
    if (!summary.diverged && data.train.labeled() &&
        (last || (cfg.probe_interval > 0 && epoch % cfg.probe_interval == 0))) {
      acc = linear_probe(task->backbone(), data.train, data.test, cfg).test_accuracy;
      if (last) summary.probe_accuracy = acc;
    }
    log.log_epoch({epoch, mean, epoch_residual, acc});
    if (progress) {
      *progress << cfg.name << " epoch " << epoch << "/" << cfg.epochs << " loss " << mean;
      if (epoch_residual) *progress << " residual " << *epoch_residual;
      if (acc) *progress << " probe " << *acc;
      *progress << std::endl;
    }
  }
  summary.steps = step;
  save_checkpoint(out, cfg, task->state());
  summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return summary;
}

#define EQUIVAR_INSTANTIATE(T)                                                                                    \
  template class MlpHead<T>;                                                                                      \
  template class Encoder<T>;                                                                                      \
  template Tensor<T> transform_sample(const Tensor<T>&, std::size_t, const FiniteGroup&, std::size_t);           \
  template std::unique_ptr<TaskModel<T>> make_task(const RunConfig&, const Dataset&, const Dataset&);             \
  template Tensor<double> extract_features(const Backbone<T>&, const Dataset&, bool);                             \
  template ProbeResult linear_probe(const Backbone<T>&, const Dataset&, const Dataset&, const RunConfig&);        \
  template PretrainSummary pretrain<T>(const RunConfig&, const std::filesystem::path&, std::ostream*);
EQUIVAR_INSTANTIATE(float)
EQUIVAR_INSTANTIATE(double)
#undef EQUIVAR_INSTANTIATE

}  // namespace equivar
