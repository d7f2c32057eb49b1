// prefnet: train and inspect preference-constrained auction networks.
//
//   prefnet train    --config cfg.yaml [--preset desk] [--seed 1] [--out runs/x]
//   prefnet evaluate --config cfg.yaml --checkpoint runs/x/best.ckpt
//   prefnet label    --config cfg.yaml --allocations z.csv [--noise]
//   prefnet plot     --config cfg.yaml --checkpoint runs/x/best.ckpt [--resolution 50]
//   prefnet compare  --config cfg.yaml --a a.ckpt --b b.ckpt [--samples 20000]
//   prefnet baseline --config cfg.yaml
//
// Exit status: 0 success, 1 other failure, 2 configuration error,
// 3 numerical abort.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>

#include "prefnet/harness.hpp"

namespace {

struct Common {
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Experiment YAML file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--preset", c.preset, "Scale preset (overrides the file's preset)")
      ->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--seed", c.seed, "Experiment seed");
  cmd->add_option("--out", c.out, "Output directory");
}

prefnet::ExperimentConfig load(const Common& c) {
  auto cfg = prefnet::load_config(c.config, c.preset);
  if (c.seed) cfg.experiment.train.seed = *c.seed;
  if (c.out) cfg.out_dir = *c.out;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Tape buffers are freed and reallocated every step; keep them on the heap
  // instead of round-tripping through mmap.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
  CLI::App app{"PreferenceNet training and evaluation harness"};
  app.require_subcommand(1);

  Common c;
  std::string checkpoint, allocations, ckpt_a, ckpt_b, results;
  std::optional<std::size_t> resolution, samples;
  bool noise = false, quiet = false;

  auto* train = app.add_subcommand("train", "Train, select the best checkpoint and evaluate it");
  add_common(train, c);
  train->add_flag("--quiet", quiet, "No per-epoch progress on stdout");

  auto* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint and append a results row");
  add_common(evaluate, c);
  evaluate->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  evaluate->add_option("--results", results, "Results CSV (default <out>/results.csv)");

  auto* label = app.add_subcommand("label", "Label an allocation CSV by pairwise plurality");
  add_common(label, c);
  label->add_option("--allocations", allocations, "CSV with header sample,agent,item,z")
      ->required()
      ->check(CLI::ExistingFile);
  label->add_flag("--noise", noise, "Apply the configured probit label noise");

  auto* plot = app.add_subcommand("plot", "Allocation heatmaps over two bid coordinates");
  add_common(plot, c);
  plot->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  plot->add_option("--resolution", resolution, "Grid points per axis (>= 2)");

  auto* compare = app.add_subcommand("compare", "Mean L2 allocation distance between two checkpoints");
  add_common(compare, c);
  compare->add_option("--a", ckpt_a)->required()->check(CLI::ExistingFile);
  compare->add_option("--b", ckpt_b)->required()->check(CLI::ExistingFile);
  compare->add_option("--samples", samples, "Number of shared bid profiles");

  auto* baseline = app.add_subcommand("baseline", "Itemwise Myerson revenue on the test batch");
  add_common(baseline, c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    auto cfg = load(c);
    if (train->parsed()) {
      auto outcome = prefnet::cmd_train(cfg, quiet ? nullptr : &std::cout);
      std::cout << prefnet::kResultsHeader << '\n' << prefnet::format_row(outcome.row) << '\n';
    } else if (evaluate->parsed()) {
      auto row = prefnet::cmd_evaluate(cfg, checkpoint, results);
      std::cout << prefnet::kResultsHeader << '\n' << prefnet::format_row(row) << '\n';
    } else if (label->parsed()) {
      auto out = std::filesystem::path(cfg.out_dir) / "labels.csv";
      auto set = prefnet::cmd_label(cfg, allocations, out, noise);
      std::cout << "labeled " << set.size() << " allocations, positive fraction " << set.positive_fraction()
                << " -> " << out.string() << '\n';
    } else if (plot->parsed()) {
      if (resolution) cfg.plot.resolution = *resolution;
      auto g = prefnet::cmd_plot(cfg, checkpoint);
      std::cout << "wrote " << g.resolution * g.resolution * g.m_items << " grid rows to " << cfg.out_dir << '\n';
    } else if (compare->parsed()) {
      if (samples) cfg.compare.samples = *samples;
      auto rep = prefnet::cmd_compare(cfg, ckpt_a, ckpt_b);
      std::cout << "mean L2 distance " << rep.distance << " over " << rep.samples << " profiles\n";
    } else if (baseline->parsed()) {
      auto row = prefnet::cmd_baseline(cfg);
      std::cout << prefnet::kResultsHeader << '\n' << prefnet::format_row(row) << '\n';
    }
  } catch (const prefnet::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const prefnet::NumericalAbort& e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
