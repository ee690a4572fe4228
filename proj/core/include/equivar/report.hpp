#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "equivar/config.hpp"

namespace equivar {

/// baseline (plain model), equivariant+invariant, or equivariant-only.
std::string arm_name(const RunConfig& cfg);

struct RunSummary {
  std::string name;
  Task task = Task::simsiam;
  std::string arm;
  std::size_t epochs = 0;
  double first_loss = 0.0;
  double last_loss = 0.0;
  double loss_drop = 0.0;  // relative to the loss infimum
  std::optional<double> max_residual;
  std::optional<double> probe_accuracy;
};

/// Reads config.txt and epochs.csv from a run directory.
RunSummary summarize_run(const std::filesystem::path& dir);

/// CSV with one column per run, sorted by run name, and one row per metric.
/// Throws ReportError when the runs do not share a task.
void write_report(std::ostream& os, std::vector<RunSummary> runs);

/// Runs ordered by decreasing probe accuracy, e.g. `b (0.81) > a (0.74)`.
std::string probe_ordering(std::vector<RunSummary> runs);

}  // namespace equivar
