#include "equivar/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <vector>

#include "equivar/errors.hpp"

namespace equivar {

std::string_view to_string(Task task) {
  switch (task) {
    case Task::context:
      return "context";
    case Task::jigsaw:
      return "jigsaw";
    case Task::moco:
      return "moco";
    case Task::swav:
      return "swav";
    case Task::simsiam:
      return "simsiam";
  }
  return "?";
}

Task parse_task(std::string_view name) {
  for (Task t : {Task::context, Task::jigsaw, Task::moco, Task::swav, Task::simsiam})
    if (to_string(t) == name) return t;
  throw ConfigError("run.task", "unknown task '" + std::string(name) + "'");
}

std::string_view to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision parse_precision(std::string_view name) {
  if (name == "f32") return Precision::f32;
  if (name == "f64") return Precision::f64;
  throw ConfigError("precision", "expected f32 or f64, got '" + std::string(name) + "'");
}

std::string_view to_string(Schedule s) {
  switch (s) {
    case Schedule::constant:
      return "constant";
    case Schedule::cosine:
      return "cosine";
    case Schedule::step:
      return "step";
  }
  return "?";
}

Schedule parse_schedule(std::string_view name) {
  for (Schedule s : {Schedule::constant, Schedule::cosine, Schedule::step})
    if (to_string(s) == name) return s;
  throw ConfigError("train.schedule", "unknown schedule '" + std::string(name) + "'");
}

namespace {

struct Field {
  std::string key;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename N>
N parse_number(std::string_view key, std::string_view text) {
  N value{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) throw ConfigError(std::string(key), "cannot parse '" + std::string(text) + "'");
  return value;
}

bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError(std::string(key), "expected true or false, got '" + std::string(text) + "'");
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <typename M>
Field field(std::string key, M RunConfig::*member) {
  Field f;
  f.key = key;
  f.set = [member, key](RunConfig& c, std::string_view v) {
    if constexpr (std::is_same_v<M, bool>) c.*member = parse_bool(key, v);
    else if constexpr (std::is_same_v<M, std::string>) c.*member = std::string(v);
    else c.*member = parse_number<M>(key, v);
  };
  f.get = [member](const RunConfig& c) {
    if constexpr (std::is_same_v<M, bool>) return std::string(c.*member ? "true" : "false");
    else if constexpr (std::is_same_v<M, std::string>) return c.*member;
    else if constexpr (std::is_floating_point_v<M>) return format_double(c.*member);
    else return std::to_string(c.*member);
  };
  return f;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> t;
    t.push_back(field("run.name", &RunConfig::name));
    t.push_back({"run.task", [](RunConfig& c, std::string_view v) { c.task = parse_task(v); },
                 [](const RunConfig& c) { return std::string(to_string(c.task)); }});
    t.push_back({"model.group",
                 [](RunConfig& c, std::string_view v) {
                   try {
                     c.group = parse_group_kind(v);
                   } catch (const GroupError& e) {
                     throw ConfigError("model.group", e.what());
                   }
                 },
                 [](const RunConfig& c) { return std::string(to_string(c.group)); }});
    t.push_back(field("model.equivariant", &RunConfig::equivariant_model));
    t.push_back(field("model.width", &RunConfig::width));
    t.push_back(field("model.depth", &RunConfig::depth));
    t.push_back(field("model.pool_stages", &RunConfig::pool_stages));
    t.push_back(field("model.kernel", &RunConfig::kernel));
    t.push_back(field("model.hidden_dim", &RunConfig::hidden_dim));
    t.push_back(field("model.head_dim", &RunConfig::head_dim));
    t.push_back(field("loss.invariant", &RunConfig::invariant_loss));
    t.push_back(field("train.lr", &RunConfig::lr));
    t.push_back(field("train.momentum", &RunConfig::momentum));
    t.push_back(field("train.weight_decay", &RunConfig::weight_decay));
    t.push_back({"train.schedule", [](RunConfig& c, std::string_view v) { c.schedule = parse_schedule(v); },
                 [](const RunConfig& c) { return std::string(to_string(c.schedule)); }});
    t.push_back(field("train.epochs", &RunConfig::epochs));
    t.push_back(field("train.batch_size", &RunConfig::batch_size));
    t.push_back(field("train.residual_every", &RunConfig::residual_every));
    t.push_back(field("train.probe_batch", &RunConfig::probe_batch));
    t.push_back(field("seed.data", &RunConfig::data_seed));
    t.push_back(field("seed.init", &RunConfig::init_seed));
    t.push_back(field("seed.aug", &RunConfig::aug_seed));
    t.push_back(field("seed.epoch", &RunConfig::epoch_seed));
    t.push_back(field("data.train", &RunConfig::train_data));
    t.push_back(field("data.test", &RunConfig::test_data));
    t.push_back(field("data.synth_classes", &RunConfig::synth_classes));
    t.push_back(field("data.synth_per_class", &RunConfig::synth_per_class));
    t.push_back(field("data.synth_test_per_class", &RunConfig::synth_test_per_class));
    t.push_back(field("data.synth_extent", &RunConfig::synth_extent));
    t.push_back(field("aug.crop", &RunConfig::aug_crop));
    t.push_back(field("aug.crop_min_scale", &RunConfig::aug_crop_min_scale));
    t.push_back(field("aug.hflip", &RunConfig::aug_hflip));
    t.push_back(field("aug.rot90", &RunConfig::aug_rot90));
    t.push_back(field("aug.grayscale", &RunConfig::aug_grayscale));
    t.push_back(field("moco.tau", &RunConfig::moco_tau));
    t.push_back(field("moco.momentum", &RunConfig::moco_momentum));
    t.push_back(field("moco.queue_size", &RunConfig::moco_queue));
    t.push_back(field("swav.tau", &RunConfig::swav_tau));
    t.push_back(field("swav.eps", &RunConfig::swav_eps));
    t.push_back(field("swav.iterations", &RunConfig::swav_iterations));
    t.push_back(field("swav.prototypes", &RunConfig::swav_prototypes));
    t.push_back(field("swav.small_crops", &RunConfig::swav_small_crops));
    t.push_back(field("swav.small_extent", &RunConfig::swav_small_extent));
    t.push_back(field("swav.queue_size", &RunConfig::swav_queue));
    t.push_back(field("pretext.patch", &RunConfig::patch));
    t.push_back(field("pretext.gap", &RunConfig::gap));
    t.push_back(field("pretext.jitter", &RunConfig::jitter));
    t.push_back(field("jigsaw.orbits", &RunConfig::jigsaw_orbits));
    t.push_back(field("jigsaw.subset", &RunConfig::jigsaw_subset));
    t.push_back(field("jigsaw.seed", &RunConfig::jigsaw_seed));
    t.push_back(field("probe.epochs", &RunConfig::probe_epochs));
    t.push_back(field("probe.lr", &RunConfig::probe_lr));
    t.push_back(field("probe.batch_size", &RunConfig::probe_batch_size));
    t.push_back(field("probe.average", &RunConfig::probe_average));
    t.push_back(field("probe.interval", &RunConfig::probe_interval));
    return t;
  }();
  return table;
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value) {
  for (const auto& f : fields()) {
    if (f.key == key) {
      f.set(cfg, value);
      return;
    }
  }
  throw ConfigError(std::string(key), "unknown configuration key");
}

void RunConfig::validate() const {
  auto require = [](bool ok, const char* field, const std::string& what) {
    if (!ok) throw ConfigError(field, what);
  };
  require(!name.empty(), "run.name", "must not be empty");
  require(!invariant_loss || equivariant_model, "loss.invariant",
          "an invariant loss needs the group block structure of an equivariant model (set model.equivariant=true)");
  require(task != Task::context || group == GroupKind::rot4, "model.group",
          "context prediction labels carry a free action only for rot4");
  require(task != Task::jigsaw || !equivariant_model || group != GroupKind::trivial, "model.group",
          "an equivariant jigsaw model needs a non-trivial group");
  require(width >= 1, "model.width", "must be at least 1");
  require(kernel % 2 == 1, "model.kernel", "must be odd");
  require(pool_stages <= depth + 1, "model.pool_stages", "exceeds the number of stages");
  const std::size_t order = make_group(model_group()).order();
  require(head_dim >= order && head_dim % order == 0, "model.head_dim", "must be a multiple of the group order");
  require(hidden_dim >= order && hidden_dim % order == 0, "model.hidden_dim", "must be a multiple of the group order");
  require(lr > 0.0, "train.lr", "must be positive");
  require(momentum >= 0.0 && momentum < 1.0, "train.momentum", "must lie in [0, 1)");
  require(weight_decay >= 0.0, "train.weight_decay", "must be non-negative");
  require(epochs >= 1, "train.epochs", "must be at least 1");
  require(batch_size >= 2, "train.batch_size", "must be at least 2");
  require(probe_batch >= 1, "train.probe_batch", "must be at least 1");
  require(synth_extent >= 16, "data.synth_extent", "must be at least 16");
  for (auto [p, f] : {std::pair{aug_crop, "aug.crop"}, std::pair{aug_hflip, "aug.hflip"},
                      std::pair{aug_rot90, "aug.rot90"}, std::pair{aug_grayscale, "aug.grayscale"}})
    require(p >= 0.0 && p <= 1.0, f, "probability must lie in [0, 1]");
  require(aug_crop_min_scale > 0.0 && aug_crop_min_scale <= 1.0, "aug.crop_min_scale", "must lie in (0, 1]");
  require(moco_tau > 0.0, "moco.tau", "must be positive");
  require(moco_momentum >= 0.0 && moco_momentum <= 1.0, "moco.momentum", "must lie in [0, 1]");
  require(moco_queue >= 1, "moco.queue_size", "must be at least 1");
  require(swav_tau > 0.0, "swav.tau", "must be positive");
  require(swav_eps > 0.0, "swav.eps", "must be positive");
  require(swav_iterations >= 1, "swav.iterations", "must be at least 1");
  require(swav_prototypes >= 2, "swav.prototypes", "must be at least 2");
  require(patch >= 4, "pretext.patch", "must be at least 4");
  require(jigsaw_orbits >= 1, "jigsaw.orbits", "must be at least 1");
  require(probe_epochs >= 1, "probe.epochs", "must be at least 1");
  require(probe_lr > 0.0, "probe.lr", "must be positive");
}

void RunConfig::reseed(std::uint64_t base) {
  data_seed = base;
  init_seed = base + 1;
  aug_seed = base + 2;
  epoch_seed = base + 3;
}

void RunConfig::write(std::ostream& os) const {
  for (const auto& f : fields()) os << f.key << '=' << f.get(*this) << '\n';
}

RunConfig parse_config(std::istream& is) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::string line;
  while (std::getline(is, line)) {
    const auto text = trim(line);
    if (text.empty() || text.front() == '#') continue;
    const auto eq = text.find('=');
    if (eq == std::string_view::npos) throw ConfigError(std::string(text), "expected key=value");
    const auto key = trim(text.substr(0, eq));
    const auto value = trim(text.substr(eq + 1));
    if (!seen.insert(std::string(key)).second) throw ConfigError(std::string(key), "duplicate key");
    apply_setting(cfg, key, value);
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("--config", "cannot open " + path.string());
  return parse_config(is);
}

}  // namespace equivar
