#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <vector>

namespace equivar {

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  std::optional<double> inv_residual;
  double lr = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  std::optional<double> max_inv_residual;
  std::optional<double> probe_acc;
};

/// Append-only training log: `metrics.csv` (step,loss,inv_residual,lr) and
/// `epochs.csv` (epoch,mean_loss,max_inv_residual,probe_acc) in one directory.
/// Unmeasured fields are written as empty cells. Step and epoch indices must
/// strictly increase.
class MetricsLog {
 public:
  explicit MetricsLog(const std::filesystem::path& dir);

  void log_step(const StepRecord& r);
  void log_epoch(const EpochRecord& r);

  static std::vector<StepRecord> read_steps(const std::filesystem::path& dir);
  static std::vector<EpochRecord> read_epochs(const std::filesystem::path& dir);

 private:
  std::ofstream steps_;
  std::ofstream epochs_;
  std::optional<std::size_t> last_step_;
  std::optional<std::size_t> last_epoch_;
};

}  // namespace equivar
