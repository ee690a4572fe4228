#include "equivar/checkpoint.hpp"

#include <fstream>
#include <sstream>
#include <string>

#include "equivar/errors.hpp"
#include "equivar/serialize.hpp"

namespace equivar {

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const RunConfig& cfg, const std::vector<NamedTensor<T>>& tensors) {
  std::filesystem::create_directories(dir);
  std::ofstream config(dir / "config.txt");
  cfg.write(config);
  std::ofstream manifest(dir / "checkpoint.manifest");
  std::ofstream records(dir / "checkpoint.eqt", std::ios::binary);
  if (!config || !manifest || !records) throw FormatError("cannot write checkpoint in " + dir.string());
  for (const auto& [name, tensor] : tensors) {
    manifest << name;
    for (auto e : tensor.shape()) manifest << ' ' << e;
    manifest << '\n';
    write_tensor(records, tensor);
  }
}

template <typename T>
std::vector<NamedTensor<T>> load_checkpoint_tensors(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "checkpoint.manifest");
  std::ifstream records(dir / "checkpoint.eqt", std::ios::binary);
  if (!manifest || !records) throw FormatError("no checkpoint in " + dir.string());
  std::vector<NamedTensor<T>> out;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name;
    ls >> name;
    Shape shape;
    for (std::size_t e; ls >> e;) shape.push_back(e);
    Tensor<T> t = read_tensor<T>(records);
    if (t.shape() != shape) {
      throw FormatError("checkpoint record '" + name + "' has shape " + shape_str(t.shape()) + ", manifest says " +
                        shape_str(shape));
    }
    out.push_back({name, t});
  }
  return out;
}

RunConfig load_checkpoint_config(const std::filesystem::path& dir) { return load_config(dir / "config.txt"); }

template <typename T>
Backbone<T> load_backbone(const std::filesystem::path& dir) {
  const RunConfig cfg = load_checkpoint_config(dir);
  std::vector<Tensor<T>> params, stats;
  for (auto& [name, t] : load_checkpoint_tensors<T>(dir)) {
    if (name.starts_with("backbone.")) params.push_back(t);
    if (name.starts_with("backbone_stats.")) stats.push_back(t);
  }
  if (params.empty()) throw FormatError("checkpoint in " + dir.string() + " holds no backbone");
  BackboneConfig bc;
  bc.group = cfg.model_group();
  bc.in_channels = params.front().extent(1);
  bc.width = cfg.width;
  bc.depth = cfg.depth;
  bc.kernel = cfg.kernel;
  bc.pool_stages = cfg.pool_stages;
  std::mt19937_64 rng(0);
  Backbone<T> net(bc, rng);
  const auto slots = net.parameter_slots();
  if (slots.size() != params.size()) throw FormatError("checkpoint backbone parameter count mismatch");
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i]->shape() != params[i].shape()) throw FormatError("checkpoint backbone shape mismatch");
    auto dst = slots[i]->mutable_values();
    std::copy(params[i].values().begin(), params[i].values().end(), dst.begin());
  }
  net.set_running_statistics(stats);
  return net;
}

#define EQUIVAR_INSTANTIATE(T)                                                                                     \
  template void save_checkpoint(const std::filesystem::path&, const RunConfig&, const std::vector<NamedTensor<T>>&); \
  template std::vector<NamedTensor<T>> load_checkpoint_tensors(const std::filesystem::path&);                       \
  template Backbone<T> load_backbone(const std::filesystem::path&);
EQUIVAR_INSTANTIATE(float)
EQUIVAR_INSTANTIATE(double)
#undef EQUIVAR_INSTANTIATE

}  // namespace equivar
