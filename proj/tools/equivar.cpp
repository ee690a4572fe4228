#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "equivar/checkpoint.hpp"
#include "equivar/config.hpp"
#include "equivar/errors.hpp"
#include "equivar/pretext.hpp"
#include "equivar/report.hpp"
#include "equivar/train.hpp"
#include "equivar/verify.hpp"

namespace fs = std::filesystem;
using namespace equivar;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string precision = "f64";
  std::string out;
  std::vector<std::string> settings;
};

void add_common(CLI::App* cmd, Common& c, bool needs_config) {
  auto* opt = cmd->add_option("--config", c.config, "run configuration (section.key=value lines)");
  if (needs_config) opt->required();
  cmd->add_option("--seed", c.seed, "base seed; overrides data, init, augmentation and epoch seeds");
  cmd->add_option("--precision", c.precision, "floating point type")->check(CLI::IsMember({"f32", "f64"}));
  cmd->add_option("--out", c.out, "output directory or file");
  cmd->add_option("--set", c.settings, "extra section.key=value overrides");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  for (const auto& s : c.settings) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(s, "expected key=value");
    apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  if (c.seed) cfg.reseed(*c.seed);
  cfg.validate();
  return cfg;
}

int cmd_pretrain(const Common& c) {
  const RunConfig cfg = resolve(c);
  const fs::path out = c.out.empty() ? fs::path("runs") / cfg.name : fs::path(c.out);
  const auto summary = parse_precision(c.precision) == Precision::f32 ? pretrain<float>(cfg, out, &std::cout)
                                                                      : pretrain<double>(cfg, out, &std::cout);
  std::cout << "steps " << summary.steps << " seconds " << summary.seconds;
  if (summary.max_residual) std::cout << " max_inv_residual " << *summary.max_residual;
  if (summary.probe_accuracy) std::cout << " probe_acc " << *summary.probe_accuracy;
  std::cout << "\ncheckpoint " << out.string() << '\n';
  return summary.diverged ? 3 : 0;
}

template <typename T>
ProbeResult probe_checkpoint(const fs::path& dir, const RunConfig& cfg) {
  const auto net = load_backbone<T>(dir);
  const auto data = load_data(cfg);
  return linear_probe(net, data.train, data.test, cfg);
}

int cmd_probe(const Common& c, const std::string& checkpoint) {
  RunConfig cfg = c.config.empty() ? load_checkpoint_config(checkpoint) : load_config(c.config);
  for (const auto& s : c.settings) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(s, "expected key=value");
    apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  if (c.seed) cfg.reseed(*c.seed);
  const auto result = parse_precision(c.precision) == Precision::f32 ? probe_checkpoint<float>(checkpoint, cfg)
                                                                     : probe_checkpoint<double>(checkpoint, cfg);
  std::cout << "train_acc " << result.train_accuracy << "\ntest_acc " << result.test_accuracy << '\n';
  if (!c.out.empty()) {
    std::ofstream os(c.out);
    os << "train_acc,test_acc\n" << result.train_accuracy << ',' << result.test_accuracy << '\n';
  }
  return 0;
}

int cmd_gen_jigsaw(const Common& c, std::size_t orbits, const std::string& group) {
  RunConfig cfg = resolve(c);
  const std::uint64_t seed = c.seed ? *c.seed : cfg.jigsaw_seed;
  const auto subset = generate_closed_subset(parse_group_kind(group), orbits, seed);
  const fs::path out = c.out.empty() ? fs::path("jigsaw_subset.txt") : fs::path(c.out);
  std::ofstream os(out);
  if (!os) throw FormatError("cannot write " + out.string());
  subset.write(os);
  std::cout << "permutations " << subset.size() << "\nmin_hamming " << subset.min_hamming() << "\nwritten "
            << out.string() << '\n';
  return 0;
}

int cmd_report(const Common& c, const std::vector<std::string>& runs) {
  std::vector<RunSummary> summaries;
  for (const auto& r : runs) summaries.push_back(summarize_run(r));
  if (c.out.empty()) {
    write_report(std::cout, summaries);
  } else {
    std::ofstream os(c.out);
    write_report(os, summaries);
    std::cout << "written " << c.out << '\n';
  }
  std::cout << "ordering by probe accuracy: " << probe_ordering(summaries) << '\n';
  return 0;
}

int cmd_verify(const Common& c, const std::vector<std::string>& groups, const std::vector<std::string>& suites,
               bool corrupt) {
  VerifyOptions opt;
  opt.precision = parse_precision(c.precision);
  opt.suites = suites;
  opt.groups.clear();
  for (const auto& g : groups) opt.groups.push_back(parse_group_kind(g));
  opt.corrupt_cayley = corrupt;
  if (c.seed) opt.seed = *c.seed;
  const auto report = run_verification(opt);
  print_verification(std::cout, report);
  if (!c.out.empty()) {
    std::ofstream os(c.out);
    write_verification_csv(os, report);
  }
  return report.passed() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Group-equivariant self-supervised learning toolkit"};
  app.require_subcommand(1);
  Common common;

  auto* verify = app.add_subcommand("verify", "run the property suites");
  add_common(verify, common, false);
  std::vector<std::string> groups{"rot4", "rot4_flip"};
  std::vector<std::string> suites;
  bool corrupt = false;
  verify->add_option("--groups", groups, "groups for the equivariance suites");
  verify->add_option("--suites", suites, "suites to run (default: all)")->check(CLI::IsMember(suite_names()));
  verify->add_flag("--corrupt-cayley", corrupt, "negative control: corrupt one Cayley entry before the axiom suite");

  auto* gen = app.add_subcommand("gen-jigsaw", "generate an orbit-closed jigsaw permutation subset");
  add_common(gen, common, false);
  std::size_t orbits = 250;
  std::string group = "rot4_flip";
  gen->add_option("--orbits", orbits, "number of orbits");
  gen->add_option("--group", group, "group whose grid action closes the subset");

  auto* pre = app.add_subcommand("pretrain", "self-supervised pretraining");
  add_common(pre, common, true);

  auto* probe = app.add_subcommand("probe", "linear probe on a frozen checkpoint");
  add_common(probe, common, false);
  std::string checkpoint;
  probe->add_option("--checkpoint", checkpoint, "run directory written by pretrain")->required();

  auto* report = app.add_subcommand("report", "compare run directories");
  add_common(report, common, false);
  std::vector<std::string> runs;
  report->add_option("runs", runs, "run directories")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*verify) return cmd_verify(common, groups, suites, corrupt);
    if (*gen) return cmd_gen_jigsaw(common, orbits, group);
    if (*pre) return cmd_pretrain(common);
    if (*probe) return cmd_probe(common, checkpoint);
    if (*report) return cmd_report(common, runs);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error in " << e.field() << ": " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
