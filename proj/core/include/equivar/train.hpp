#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "equivar/config.hpp"
#include "equivar/data.hpp"
#include "equivar/layers.hpp"

namespace equivar {

/// GroupLinear -> normalisation over batch and group axis -> relu -> GroupLinear.
template <typename T>
class MlpHead {
 public:
  MlpHead() = default;
  MlpHead(const FiniteGroup& group, std::size_t in_block, std::size_t hidden_block, std::size_t out_block,
          std::mt19937_64& rng)
      : fc1_(group, in_block, hidden_block, rng), fc2_(group, hidden_block, out_block, rng) {}

  PooledFeature<T> operator()(const PooledFeature<T>& v) const;
  std::vector<Tensor<T>*> parameter_slots();

 private:
  GroupLinear<T> fc1_;
  GroupLinear<T> fc2_;
};

/// Backbone followed by a projection head.
template <typename T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(const BackboneConfig& backbone, std::size_t hidden_dim, std::size_t out_dim, std::mt19937_64& rng);

  PooledFeature<T> operator()(const Tensor<T>& x) const { return head_(backbone_(x)); }
  std::vector<Tensor<T>*> parameter_slots();
  const Backbone<T>& backbone() const { return backbone_; }
  Backbone<T>& backbone() { return backbone_; }

 private:
  Backbone<T> backbone_;
  MlpHead<T> head_;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

/// One pretraining objective together with its model, optimizer and fixed
/// probe batch for invariance residuals.
template <typename T>
class TaskModel {
 public:
  virtual ~TaskModel() = default;
  /// One optimizer step on the samples `indices` of the training set.
  virtual T train_step(std::span<const std::size_t> indices, std::size_t step, double lr) = 0;
  /// max over probe samples m and non-identity g of |L(x_m -> T(g) x_m) - L|,
  /// with the label acted on as well for pretext tasks. Empty when the label
  /// set is not closed under the group.
  virtual std::optional<double> residual() = 0;
  virtual const Backbone<T>& backbone() const = 0;
  virtual std::vector<NamedTensor<T>> state() = 0;
};

/// Builds the model for `cfg.task`. `probe_set` supplies the held-out samples
/// used for residual measurements.
template <typename T>
std::unique_ptr<TaskModel<T>> make_task(const RunConfig& cfg, const Dataset& train, const Dataset& probe_set);

/// Training and held-out test data: the configured dataset files, or
/// synthetic sets drawn from disjoint seeds.
struct DataSplit {
  Dataset train;
  Dataset test;
};
DataSplit load_data(const RunConfig& cfg);

/// `x` with sample m replaced by T(g) x_m.
template <typename T>
Tensor<T> transform_sample(const Tensor<T>& x, std::size_t m, const FiniteGroup& group, std::size_t g);

struct ProbeResult {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
};

/// Linear classifier on fixed features [N, d], standardised with the
/// training statistics and fitted by momentum SGD on softmax cross-entropy.
ProbeResult train_linear_probe(const Tensor<double>& train_features, std::span<const std::size_t> train_labels,
                               const Tensor<double>& test_features, std::span<const std::size_t> test_labels,
                               const RunConfig& cfg);

/// Pooled backbone features of every image, computed without recording a
/// graph. With `average`, one group-averaged block per image.
template <typename T>
Tensor<double> extract_features(const Backbone<T>& net, const Dataset& data, bool average);

/// Frozen-backbone linear evaluation. Throws StructureError if any backbone
/// parameter changes.
template <typename T>
ProbeResult linear_probe(const Backbone<T>& net, const Dataset& train, const Dataset& test, const RunConfig& cfg);

struct PretrainSummary {
  std::vector<double> epoch_loss;
  std::optional<double> max_residual;
  std::optional<double> probe_accuracy;
  std::size_t steps = 0;
  bool diverged = false;
  double seconds = 0.0;
};

/// Validates `cfg`, trains, and writes config.txt, metrics.csv, epochs.csv and
/// the checkpoint into `out`. Progress lines go to `progress` when given.
template <typename T>
PretrainSummary pretrain(const RunConfig& cfg, const std::filesystem::path& out, std::ostream* progress = nullptr);

/// Lower bound of the training loss: -1 for SimSiam, 0 for the others.
double loss_infimum(Task task);
/// (first - last) / (first - infimum) over epoch mean losses.
double loss_drop(std::span<const double> epoch_loss, double infimum);

}  // namespace equivar
