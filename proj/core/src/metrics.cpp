#include "equivar/metrics.hpp"

#include <sstream>
#include <string>

#include "equivar/errors.hpp"

namespace equivar {

namespace {

void put(std::ostream& os, const std::optional<double>& v) {
  if (v) os << *v;
}

std::optional<double> cell(const std::string& text) {
  if (text.empty()) return std::nullopt;
  return std::stod(text);
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path, const std::string& header) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != header) throw FormatError(path.string() + ": expected header " + header);
  std::vector<std::vector<std::string>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    if (line.back() == ',') cells.emplace_back();
    if (cells.size() != 4) throw FormatError(path.string() + ": malformed row '" + line + "'");
    rows.push_back(std::move(cells));
  }
  return rows;
}

constexpr const char* kStepHeader = "step,loss,inv_residual,lr";
constexpr const char* kEpochHeader = "epoch,mean_loss,max_inv_residual,probe_acc";

}  // namespace

MetricsLog::MetricsLog(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  steps_.open(dir / "metrics.csv", std::ios::trunc);
  epochs_.open(dir / "epochs.csv", std::ios::trunc);
  if (!steps_ || !epochs_) throw FormatError("cannot write metrics in " + dir.string());
  steps_.precision(9);
  epochs_.precision(9);
  steps_ << kStepHeader << '\n' << std::flush;
  epochs_ << kEpochHeader << '\n' << std::flush;
}

void MetricsLog::log_step(const StepRecord& r) {
  if (last_step_ && r.step <= *last_step_) throw ParameterError("metrics step indices must increase");
  last_step_ = r.step;
  steps_ << r.step << ',' << r.loss << ',';
  put(steps_, r.inv_residual);
  steps_ << ',' << r.lr << '\n' << std::flush;
}

void MetricsLog::log_epoch(const EpochRecord& r) {
  if (last_epoch_ && r.epoch <= *last_epoch_) throw ParameterError("metrics epoch indices must increase");
  last_epoch_ = r.epoch;
  epochs_ << r.epoch << ',' << r.mean_loss << ',';
  put(epochs_, r.max_inv_residual);
  epochs_ << ',';
  put(epochs_, r.probe_acc);
  epochs_ << '\n' << std::flush;
}

std::vector<StepRecord> MetricsLog::read_steps(const std::filesystem::path& dir) {
  std::vector<StepRecord> out;
  for (const auto& c : read_csv(dir / "metrics.csv", kStepHeader))
    out.push_back({std::stoul(c[0]), std::stod(c[1]), cell(c[2]), std::stod(c[3])});
  return out;
}

std::vector<EpochRecord> MetricsLog::read_epochs(const std::filesystem::path& dir) {
  std::vector<EpochRecord> out;
  for (const auto& c : read_csv(dir / "epochs.csv", kEpochHeader))
    out.push_back({std::stoul(c[0]), std::stod(c[1]), cell(c[2]), cell(c[3])});
  return out;
}

}  // namespace equivar
