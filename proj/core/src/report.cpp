#include "equivar/report.hpp"

#include <algorithm>
#include <ostream>
#include <sstream>

#include "equivar/errors.hpp"
#include "equivar/metrics.hpp"
#include "equivar/train.hpp"

namespace equivar {

std::string arm_name(const RunConfig& cfg) {
  if (!cfg.equivariant_model) return "baseline";
  return cfg.invariant_loss ? "equivariant+invariant" : "equivariant-only";
}

RunSummary summarize_run(const std::filesystem::path& dir) {
  const RunConfig cfg = load_config(dir / "config.txt");
  const auto epochs = MetricsLog::read_epochs(dir);
  if (epochs.empty()) throw ReportError(dir.string() + ": no epochs logged");
  RunSummary s;
  s.name = cfg.name;
  s.task = cfg.task;
  s.arm = arm_name(cfg);
  s.epochs = epochs.size();
  std::vector<double> losses;
  for (const auto& e : epochs) {
    losses.push_back(e.mean_loss);
    if (e.max_inv_residual) s.max_residual = std::max(s.max_residual.value_or(0.0), *e.max_inv_residual);
    if (e.probe_acc) s.probe_accuracy = e.probe_acc;
  }
  s.first_loss = losses.front();
  s.last_loss = losses.back();
  s.loss_drop = loss_drop(losses, loss_infimum(cfg.task));
  return s;
}

namespace {

void sort_by_name(std::vector<RunSummary>& runs) {
  std::sort(runs.begin(), runs.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
}

std::string cell(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(6);
  os << *v;
  return os.str();
}

}  // namespace

void write_report(std::ostream& os, std::vector<RunSummary> runs) {
  if (runs.empty()) throw ReportError("no runs to report");
  for (const auto& r : runs)
    if (r.task != runs.front().task) {
      throw ReportError("runs mix tasks " + std::string(to_string(runs.front().task)) + " and " +
                        std::string(to_string(r.task)));
    }
  sort_by_name(runs);
  auto row = [&](const std::string& label, auto value) {
    os << label;
    for (const auto& r : runs) os << ',' << value(r);
    os << '\n';
  };
  row("metric", [](const RunSummary& r) { return r.name; });
  row("task", [](const RunSummary& r) { return std::string(to_string(r.task)); });
  row("arm", [](const RunSummary& r) { return r.arm; });
  row("probe_acc", [](const RunSummary& r) { return cell(r.probe_accuracy); });
  row("epochs", [](const RunSummary& r) { return std::to_string(r.epochs); });
  row("first_epoch_loss", [](const RunSummary& r) { return cell(r.first_loss); });
  row("last_epoch_loss", [](const RunSummary& r) { return cell(r.last_loss); });
  row("loss_drop", [](const RunSummary& r) { return cell(r.loss_drop); });
  row("max_inv_residual", [](const RunSummary& r) { return cell(r.max_residual); });
}

std::string probe_ordering(std::vector<RunSummary> runs) {
  sort_by_name(runs);
  std::stable_sort(runs.begin(), runs.end(), [](const auto& a, const auto& b) {
    return a.probe_accuracy.value_or(-1.0) > b.probe_accuracy.value_or(-1.0);
  });
  std::string out;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    if (i) out += " > ";
    out += runs[i].name + " (" + (runs[i].probe_accuracy ? cell(runs[i].probe_accuracy) : "n/a") + ")";
  }
  return out;
}

}  // namespace equivar
