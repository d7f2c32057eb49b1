#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "prefnet/checkpoint.hpp"
#include "prefnet/config.hpp"
#include "prefnet/csv.hpp"
#include "prefnet/preference.hpp"
#include "prefnet/trainer.hpp"

namespace prefnet {

namespace fs = std::filesystem;

/// Training stopped on a non-finite loss or metric.
class NumericalAbort : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Results table

inline constexpr const char* kResultsHeader = "setting,pca,regret_mean,regret_std,payment_mean,payment_std";
inline constexpr const char* kMetricsHeader = "epoch,pca,regret_mean,regret_std,payment_mean,payment_std,lambda_r,rho_r";

struct ResultsRow {
  std::string setting;
  double pca = 0.0;
  double regret_mean = 0.0;
  double regret_std = 0.0;
  double payment_mean = 0.0;
  double payment_std = 0.0;
  bool operator==(const ResultsRow&) const = default;
};

inline ResultsRow make_row(const std::string& setting, const Metrics& m) {
  return {setting, m.pca, m.regret_mean, m.regret_std, m.payment_mean, m.payment_std};
}

inline std::string format_row(const ResultsRow& r) {
  using csv::format_double;
  return r.setting + "," + format_double(r.pca) + "," + format_double(r.regret_mean) + "," +
         format_double(r.regret_std) + "," + format_double(r.payment_mean) + "," + format_double(r.payment_std);
}

/// Appends rows, writing the header first if the file is new or empty.
inline void append_results(const fs::path& path, const std::vector<ResultsRow>& rows) {
  bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error("cannot write " + path.string());
  if (fresh) out << kResultsHeader << '\n';
  for (const auto& r : rows) out << format_row(r) << '\n';
}

inline std::vector<ResultsRow> read_results(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  csv::Reader reader(in, kResultsHeader, "results");
  std::vector<ResultsRow> rows;
  std::vector<std::string> cells;
  while (reader.next(cells)) {
    auto num = [&](std::size_t k) { return csv::parse_double(cells[k], "results", reader.line()); };
    rows.push_back({cells[0], num(1), num(2), num(3), num(4), num(5)});
  }
  return rows;
}

namespace detail {

inline std::string timestamp() {
  auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::ostringstream ss;
  ss << std::put_time(std::gmtime(&now), "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

inline std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::out) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, mode);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

inline Experiment evaluation_experiment(const ExperimentConfig& cfg) {
  Experiment ex = cfg.experiment;
  if (cfg.evaluate_with) ex.preference = *cfg.evaluate_with;
  return ex;
}

inline void check_spec(const Checkpoint& cp, const AuctionSpec& spec, const std::string& what) {
  if (!(cp.model.spec == spec)) {
    throw Error(what + ": checkpoint auction " + cp.model.spec.label() + " does not match configured auction " +
                spec.label());
  }
}

}  // namespace detail

inline BidBatch test_batch(const Experiment& ex) {
  return sample_bids(ex.spec, ex.valuation, ex.train.test_samples, derive_seed(ex.train.seed, streams::test));
}

// ---------------------------------------------------------------------------
// train

struct TrainOutcome {
  TrainResult result;
  std::size_t best_index = 0;
  Metrics test;
  ResultsRow row;
};

/// Trains, selects the best checkpoint, evaluates it on a fresh test batch
/// and writes config.yaml, metrics.csv, best.ckpt, results.csv and train.log
/// into the output directory. Throws NumericalAbort (after saving the last
/// good checkpoint as last_good.ckpt) if training diverges.
inline TrainOutcome cmd_train(const ExperimentConfig& cfg, std::ostream* progress = nullptr) {
  const fs::path dir = cfg.out_dir;
  fs::create_directories(dir);
  const Experiment& ex = cfg.experiment;
  detail::open_out(dir / "config.yaml") << serialize_config(cfg);

  auto log = detail::open_out(dir / "train.log");
  log << "# started " << detail::timestamp() << '\n';
  auto metrics = detail::open_out(dir / "metrics.csv");
  metrics << kMetricsHeader << '\n';

  TrainOutcome outcome;
  outcome.result = train(ex, [&](const EpochLog& e) {
    using csv::format_double;
    const auto& m = e.metrics;
    metrics << e.epoch << ',' << format_double(m.pca) << ',' << format_double(m.regret_mean) << ','
            << format_double(m.regret_std) << ',' << format_double(m.payment_mean) << ','
            << format_double(m.payment_std) << ',' << format_double(e.lambda_r) << ',' << format_double(e.rho_r)
            << '\n';
    metrics.flush();
    std::ostringstream line;
    line << "epoch " << e.epoch << " pca " << m.pca << " regret " << m.regret_mean << " payment " << m.payment_mean
         << " loss " << e.train_loss << " mlp_acc " << e.mlp_accuracy;
    log << line.str() << '\n';
    log.flush();
    if (progress) *progress << line.str() << '\n';
  });
  auto& r = outcome.result;
  if (uses_mlp(ex.train.mode)) {
    log << "initial labels " << r.initial_labels << " mlp accuracy " << r.initial_mlp_accuracy;
    if (ex.train.noise) log << " probit flip fraction " << r.label_flip_fraction;
    log << '\n';
  }
  if (r.aborted) {
    log << "aborted: " << r.abort_reason << '\n';
    if (!r.checkpoints.empty()) save_checkpoint(r.checkpoints.back(), dir / "last_good.ckpt");
    throw NumericalAbort(r.abort_reason + " (last good checkpoint: " + (dir / "last_good.ckpt").string() + ")");
  }
  outcome.best_index = validate_select_index(r.checkpoints, ex.train.alpha, ex.train.beta, ex.train.gamma);
  const Checkpoint& best = r.checkpoints[outcome.best_index];
  save_checkpoint(best, dir / "best.ckpt");

  Experiment eval = detail::evaluation_experiment(cfg);
  outcome.test = evaluate(best, eval, test_batch(eval), make_ground_truth(eval));
  outcome.row = make_row(ex.spec.label(), outcome.test);
  fs::remove(dir / "results.csv");
  append_results(dir / "results.csv", {outcome.row});
  log << "selected epoch " << best.epoch << '\n' << "test " << format_row(outcome.row) << '\n';
  return outcome;
}

// ---------------------------------------------------------------------------
// evaluate

/// Evaluates a checkpoint on a fresh seeded test batch and appends the row
/// to `results` (default: <out>/results.csv).
inline ResultsRow cmd_evaluate(const ExperimentConfig& cfg, const fs::path& checkpoint, fs::path results = {}) {
  Checkpoint cp = load_checkpoint(checkpoint);
  Experiment eval = detail::evaluation_experiment(cfg);
  detail::check_spec(cp, eval.spec, "evaluate");
  Metrics m = evaluate(cp, eval, test_batch(eval), make_ground_truth(eval));
  ResultsRow row = make_row(eval.spec.label(), m);
  if (results.empty()) results = fs::path(cfg.out_dir) / "results.csv";
  append_results(results, {row});
  return row;
}

// ---------------------------------------------------------------------------
// label

/// Labels an allocation CSV with the configured preference (pairwise
/// plurality over n_comparisons), optionally applies the configured probit
/// noise, and writes the `sample,score,label` sidecar.
inline LabeledAllocationSet cmd_label(const ExperimentConfig& cfg, const fs::path& allocations, const fs::path& out,
                                      bool apply_noise) {
  std::ifstream in(allocations);
  if (!in) throw Error("cannot open " + allocations.string());
  LabeledAllocationSet raw = read_allocations_csv(in);
  const auto& t = cfg.experiment.train;
  LabeledAllocationSet set = build_labels(raw.tensor(), cfg.experiment.preference, t.n_comparisons,
                                          derive_seed(t.seed, streams::labels));
  if (apply_noise) {
    if (!t.noise) throw ConfigError("label: noise requested but train.noise is not configured");
    auto x = presentation_scale(set.scores);
    ProbitNoiseModel model{t.noise->mu, t.noise->sigma ? *t.noise->sigma : sample_std(x), t.noise->k, t.noise->floor};
    set.labels = probit_flip(set.labels, x, model, derive_seed(t.seed, streams::noise));
  }
  auto file = detail::open_out(out);
  write_labels_csv(file, set);
  return set;
}

// ---------------------------------------------------------------------------
// plot

struct PlotGrid {
  std::size_t resolution = 0;
  std::size_t m_items = 0;
  std::vector<double> b1, b2;  // axis values
  std::vector<double> z;       // [item][row b2][col b1]
};

inline PlotGrid allocation_grid(const RegretNetModel& model, const ValuationModel& valuation, const PlotOptions& p) {
  const auto& spec = model.spec;
  const std::size_t n = spec.n_agents, m = spec.m_items, R = p.resolution;
  if (R < 2) throw ConfigError("plot: resolution must be at least 2");
  if (p.agent >= n || p.x_agent >= n || p.y_agent >= n || p.x_item >= m || p.y_item >= m) {
    throw ConfigError("plot: agent/item index out of range for auction " + spec.label());
  }
  if (p.x_agent == p.y_agent && p.x_item == p.y_item) throw ConfigError("plot: x and y must be different bids");
  std::vector<double> pins = p.pins;
  if (pins.empty()) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j)
        pins.push_back(0.5 * (valuation.support_lower(spec, i, j) + valuation.support_upper(spec, i, j)));
  }
  if (pins.size() != n * m) throw ConfigError("plot: pins must list all n*m bids");
  PlotGrid g;
  g.resolution = R;
  g.m_items = m;
  auto axis = [&](std::size_t a, std::size_t j) {
    std::vector<double> v(R);
    double lo = valuation.support_lower(spec, a, j), hi = valuation.support_upper(spec, a, j);
    for (std::size_t k = 0; k < R; ++k) v[k] = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(R - 1);
    return v;
  };
  g.b1 = axis(p.x_agent, p.x_item);
  g.b2 = axis(p.y_agent, p.y_item);
  std::vector<double> bids(R * R * n * m);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < R; ++c) {
      double* b = bids.data() + (r * R + c) * n * m;
      std::copy(pins.begin(), pins.end(), b);
      b[p.x_agent * m + p.x_item] = g.b1[c];
      b[p.y_agent * m + p.y_item] = g.b2[r];
    }
  ad::NoGradScope no_grad;
  Tensor z = alloc_forward(model, Tensor({R * R, n, m}, std::move(bids)));
  g.z.resize(m * R * R);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t k = 0; k < R * R; ++k) g.z[j * R * R + k] = z[(k * n + p.agent) * m + j];
  return g;
}

namespace detail {

// Five-stop perceptual ramp from dark purple (0) to yellow (1).
inline std::string ramp(double t) {
  static const double stops[5][3] = {{68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}};
  t = std::clamp(t, 0.0, 1.0) * 4.0;
  std::size_t k = std::min<std::size_t>(3, static_cast<std::size_t>(t));
  double f = t - static_cast<double>(k);
  char buf[8];
  int rgb[3];
  for (int c = 0; c < 3; ++c) rgb[c] = static_cast<int>(std::lround(stops[k][c] + f * (stops[k + 1][c] - stops[k][c])));
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", rgb[0], rgb[1], rgb[2]);
  return buf;
}

inline std::string heatmap_svg(const PlotGrid& g, std::size_t item, const std::string& title) {
  const std::size_t R = g.resolution;
  const double cell = std::max(2.0, 400.0 / static_cast<double>(R));
  const double side = cell * static_cast<double>(R);
  const double left = 50, top = 30;
  std::ostringstream s;
  s << std::fixed << std::setprecision(2);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << left + side + 90 << "\" height=\"" << top + side + 45
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<text x=\"" << left << "\" y=\"18\">" << title << "</text>\n";
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < R; ++c) {
      double y = top + side - cell * static_cast<double>(r + 1);  // b2 grows upwards
      s << "<rect x=\"" << left + cell * static_cast<double>(c) << "\" y=\"" << y << "\" width=\"" << cell
        << "\" height=\"" << cell << "\" fill=\"" << ramp(g.z[item * R * R + r * R + c]) << "\"/>\n";
    }
  s << "<text x=\"" << left << "\" y=\"" << top + side + 16 << "\">" << g.b1.front() << "</text>\n";
  s << "<text x=\"" << left + side << "\" y=\"" << top + side + 16 << "\" text-anchor=\"end\">" << g.b1.back()
    << "</text>\n";
  s << "<text x=\"" << left + side / 2 << "\" y=\"" << top + side + 34 << "\" text-anchor=\"middle\">b1</text>\n";
  s << "<text x=\"" << left - 6 << "\" y=\"" << top + side << "\" text-anchor=\"end\">" << g.b2.front() << "</text>\n";
  s << "<text x=\"" << left - 6 << "\" y=\"" << top + 10 << "\" text-anchor=\"end\">" << g.b2.back() << "</text>\n";
  s << "<text x=\"" << left - 30 << "\" y=\"" << top + side / 2 << "\">b2</text>\n";
  const double bx = left + side + 20;
  for (int k = 0; k < 50; ++k) {
    double y = top + side - side * (k + 1) / 50.0;
    s << "<rect x=\"" << bx << "\" y=\"" << y << "\" width=\"16\" height=\"" << side / 50.0 + 0.5 << "\" fill=\""
      << ramp((k + 0.5) / 50.0) << "\"/>\n";
  }
  s << "<text x=\"" << bx + 20 << "\" y=\"" << top + side << "\">0</text>\n";
  s << "<text x=\"" << bx + 20 << "\" y=\"" << top + 10 << "\">1</text>\n";
  s << "</svg>\n";
  return s.str();
}

}  // namespace detail

/// Allocation probabilities of `plot.agent` over a resolution x resolution
/// grid of two bids (others pinned): plot.csv plus one SVG per item.
inline PlotGrid cmd_plot(const ExperimentConfig& cfg, const fs::path& checkpoint) {
  Checkpoint cp = load_checkpoint(checkpoint);
  detail::check_spec(cp, cfg.experiment.spec, "plot");
  PlotGrid g = allocation_grid(cp.model, cfg.experiment.valuation, cfg.plot);
  const fs::path dir = cfg.out_dir;
  auto out = detail::open_out(dir / "plot.csv");
  out << "b1,b2,item,z\n";
  const std::size_t R = g.resolution;
  for (std::size_t j = 0; j < g.m_items; ++j)
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < R; ++c)
        out << csv::format_double(g.b1[c]) << ',' << csv::format_double(g.b2[r]) << ',' << j << ','
            << csv::format_double(g.z[j * R * R + r * R + c]) << '\n';
  for (std::size_t j = 0; j < g.m_items; ++j) {
    std::string title = "agent " + std::to_string(cfg.plot.agent) + ", item " + std::to_string(j) +
                        ": allocation probability";
    detail::open_out(dir / ("plot_item" + std::to_string(j) + ".svg")) << detail::heatmap_svg(g, j, title);
  }
  return g;
}

// ---------------------------------------------------------------------------
// compare

struct HistogramBin {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
};

/// Equal-width bins over [min, max]; the maximum lands in the last bin.
inline std::vector<HistogramBin> histogram(const std::vector<double>& xs, std::size_t bins) {
  if (bins < 1) throw ConfigError("histogram: need at least one bin");
  if (xs.empty()) throw Error("histogram: no values");
  auto [lo_it, hi_it] = std::minmax_element(xs.begin(), xs.end());
  double lo = *lo_it, hi = *hi_it;
  if (hi == lo) hi = lo + 1.0;
  std::vector<HistogramBin> h(bins);
  double width = (hi - lo) / static_cast<double>(bins);
  for (std::size_t k = 0; k < bins; ++k) {
    h[k].lower = lo + width * static_cast<double>(k);
    h[k].upper = k + 1 == bins ? hi : lo + width * static_cast<double>(k + 1);
  }
  for (double x : xs) {
    auto k = static_cast<std::size_t>((x - lo) / width);
    h[std::min(k, bins - 1)].count++;
  }
  return h;
}

struct CompareReport {
  double distance = 0.0;
  std::size_t samples = 0;
  std::vector<HistogramBin> histogram;  // preference scores of A's allocations
};

/// Mean L2 distance between the allocations of two checkpoints on a shared
/// seeded bid batch, plus a histogram of A's preference scores. Writes
/// compare.csv and histogram.csv.
inline CompareReport compare_models(const ExperimentConfig& cfg, const RegretNetModel& a, const RegretNetModel& b) {
  const auto& ex = cfg.experiment;
  if (!(a.spec == b.spec) || !(a.spec == ex.spec)) throw Error("compare: checkpoints are for different auctions");
  if (cfg.compare.samples < 1) throw ConfigError("compare: samples must be positive");
  BidBatch bids = sample_bids(ex.spec, ex.valuation, cfg.compare.samples,
                              derive_seed(ex.train.seed, streams::test + 1));
  ad::NoGradScope no_grad;
  Tensor za = alloc_forward(a, bids.values);
  Tensor zb = alloc_forward(b, bids.values);
  CompareReport rep;
  rep.samples = cfg.compare.samples;
  rep.distance = allocation_similarity(za, zb);
  PreferenceFunction fn = cfg.evaluate_with ? *cfg.evaluate_with : ex.preference;
  if (fn.kind == PreferenceKind::Mixture) fn = fn.mixture.front().function;
  rep.histogram = histogram(preference_scores(fn, za), cfg.compare.bins);
  return rep;
}

inline CompareReport cmd_compare(const ExperimentConfig& cfg, const fs::path& a, const fs::path& b) {
  CompareReport rep = compare_models(cfg, load_checkpoint(a).model, load_checkpoint(b).model);
  const fs::path dir = cfg.out_dir;
  detail::open_out(dir / "compare.csv") << "samples,mean_l2_distance\n"
                                        << rep.samples << ',' << csv::format_double(rep.distance) << '\n';
  auto h = detail::open_out(dir / "histogram.csv");
  h << "bin_lower,bin_upper,count\n";
  for (const auto& bin : rep.histogram) {
    h << csv::format_double(bin.lower) << ',' << csv::format_double(bin.upper) << ',' << bin.count << '\n';
  }
  return rep;
}

// ---------------------------------------------------------------------------
// baseline

/// Itemwise Myerson auction on the seeded test batch, appended to
/// <out>/results.csv. It is strategyproof, so its regret is 0.
inline ResultsRow cmd_baseline(const ExperimentConfig& cfg) {
  Experiment eval = detail::evaluation_experiment(cfg);
  if (eval.spec.demand != DemandKind::Additive) {
    throw ConfigError("baseline: the itemwise Myerson auction is only defined here for additive valuations");
  }
  std::vector<double> reserves = cfg.reserves.empty() ? myerson_reserves(eval.spec, eval.valuation) : cfg.reserves;
  BidBatch bids = test_batch(eval);
  BaselineRevenue rev = itemwise_myerson_revenue(bids, reserves);
  ResultsRow row;
  row.setting = eval.spec.label() + " myerson";
  row.pca = pca(itemwise_myerson_allocation(bids, reserves), make_ground_truth(eval));
  row.payment_mean = rev.mean;
  row.payment_std = rev.std;
  append_results(fs::path(cfg.out_dir) / "results.csv", {row});
  return row;
}

}  // namespace prefnet
