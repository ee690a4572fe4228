#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>

#include "equivar/group.hpp"
#include "equivar/optim.hpp"

namespace equivar {

enum class Task { context, jigsaw, moco, swav, simsiam };
enum class Precision { f32, f64 };

std::string_view to_string(Task task);
Task parse_task(std::string_view name);
std::string_view to_string(Precision p);
Precision parse_precision(std::string_view name);
std::string_view to_string(Schedule s);
Schedule parse_schedule(std::string_view name);

/// One training arm. Serialised as flat `section.key=value` lines; every
/// field below is listed in the same order by write().
struct RunConfig {
  std::string name = "run";
  Task task = Task::simsiam;

  // model
  GroupKind group = GroupKind::rot4_flip;
  bool equivariant_model = true;
  std::size_t width = 8;
  std::size_t depth = 2;
  std::size_t pool_stages = 2;
  std::size_t kernel = 3;
  std::size_t hidden_dim = 64;  // head hidden width, total over all blocks
  std::size_t head_dim = 64;    // contrastive output dimension, total over all blocks

  // loss
  bool invariant_loss = true;

  // train
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  Schedule schedule = Schedule::cosine;
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  std::size_t residual_every = 50;  // steps between invariance residual measurements
  std::size_t probe_batch = 4;

  // seeds
  std::uint64_t data_seed = 0;
  std::uint64_t init_seed = 1;
  std::uint64_t aug_seed = 2;
  std::uint64_t epoch_seed = 3;

  // data: a dataset stem, or a synthetic set when empty
  std::string train_data;
  std::string test_data;
  std::size_t synth_classes = 4;
  std::size_t synth_per_class = 500;
  std::size_t synth_test_per_class = 250;
  std::size_t synth_extent = 32;

  // augmentation (contrastive tasks)
  double aug_crop = 0.8;
  double aug_crop_min_scale = 0.6;
  double aug_hflip = 0.5;
  double aug_rot90 = 0.0;
  double aug_grayscale = 0.2;

  // momentum contrast
  double moco_tau = 0.2;
  double moco_momentum = 0.999;
  std::size_t moco_queue = 4096;

  // swav
  double swav_tau = 0.1;
  double swav_eps = 0.05;
  std::size_t swav_iterations = 3;
  std::size_t swav_prototypes = 32;
  std::size_t swav_small_crops = 4;
  std::size_t swav_small_extent = 16;
  std::size_t swav_queue = 0;  // 0 disables the assignment queue

  // pretext
  std::size_t patch = 8;
  std::size_t gap = 2;
  std::size_t jitter = 1;
  std::size_t jigsaw_orbits = 250;
  std::string jigsaw_subset;  // optional subset file
  std::uint64_t jigsaw_seed = 7;

  // linear probe
  std::size_t probe_epochs = 30;
  double probe_lr = 0.1;
  std::size_t probe_batch_size = 64;
  bool probe_average = false;     // group-average features before the probe
  std::size_t probe_interval = 0;  // epochs between probes; 0 probes after the last epoch only

  /// Throws ConfigError naming the offending field.
  void validate() const;
  /// Effective backbone group: `group` for equivariant models, else trivial.
  GroupKind model_group() const { return equivariant_model ? group : GroupKind::trivial; }
  /// Overrides the four seed streams with base, base+1, base+2, base+3.
  void reseed(std::uint64_t base);

  void write(std::ostream& os) const;
};

/// Parses `section.key=value` lines. Blank lines and `#` comments are skipped.
/// Unknown keys, duplicate keys and malformed values raise ConfigError.
RunConfig parse_config(std::istream& is);
RunConfig load_config(const std::filesystem::path& path);
/// Applies one `section.key=value` assignment.
void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value);

}  // namespace equivar
