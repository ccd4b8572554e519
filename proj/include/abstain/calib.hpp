#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "abstain/errors.hpp"

// Temperature-scaling calibration of option logits with ECE and AUROC
// diagnostics.
namespace abstain::calib {

// softmax(logits / tau), computed in log-sum-exp form.
inline std::vector<double> scaled_softmax(std::span<const double> logits, double tau) {
  if (!(tau > 0) || !std::isfinite(tau)) throw DomainError("scaled_softmax: tau must be a positive finite number");
  if (logits.empty()) throw DomainError("scaled_softmax: empty logits");
  for (double z : logits)
    if (!std::isfinite(z)) throw DomainError("scaled_softmax: non-finite logit");
  const double zmax = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double total = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp((logits[i] - zmax) / tau);
    total += out[i];
  }
  for (double& p : out) p /= total;
  return out;
}

enum class Binning { equal_width, equal_mass };

struct Bin {
  double low = 0;
  double high = 0;
  double mean_conf = 0;
  double accuracy = 0;
  long count = 0;
};

struct BinOptions {
  int n_bins = 20;
  double low = 0.0;
  double high = 1.0;
  Binning binning = Binning::equal_width;
};

namespace detail {

inline void check_inputs(std::span<const double> conf, const std::vector<bool>& correct) {
  if (conf.size() != correct.size()) throw DomainError("calibration inputs have different lengths");
  if (conf.empty()) throw DomainError("calibration inputs are empty");
}

}  // namespace detail

// Reliability table. Equal-width bins partition [low, high]; the last bin is
// closed on the right. Equal-mass bins split the sorted confidences into
// n_bins groups of (nearly) equal size.
inline std::vector<Bin> reliability_bins(std::span<const double> conf, const std::vector<bool>& correct,
                                         const BinOptions& opt = {}) {
  detail::check_inputs(conf, correct);
  if (opt.n_bins < 1) throw DomainError("n_bins must be >= 1");
  if (!(opt.high > opt.low)) throw DomainError("bin range is empty");
  std::vector<Bin> bins(static_cast<std::size_t>(opt.n_bins));

  if (opt.binning == Binning::equal_width) {
    const double width = (opt.high - opt.low) / opt.n_bins;
    for (int b = 0; b < opt.n_bins; ++b) {
      bins[static_cast<std::size_t>(b)].low = opt.low + b * width;
      bins[static_cast<std::size_t>(b)].high = b + 1 == opt.n_bins ? opt.high : opt.low + (b + 1) * width;
    }
    for (std::size_t i = 0; i < conf.size(); ++i) {
      auto b = static_cast<long>(std::floor((conf[i] - opt.low) / width));
      b = std::clamp<long>(b, 0, opt.n_bins - 1);
      auto& bin = bins[static_cast<std::size_t>(b)];
      bin.mean_conf += conf[i];
      bin.accuracy += correct[i] ? 1.0 : 0.0;
      ++bin.count;
    }
  } else {
    std::vector<std::size_t> order(conf.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return conf[a] < conf[b]; });
    const std::size_t n = order.size();
    for (int b = 0; b < opt.n_bins; ++b) {
      const std::size_t lo = n * static_cast<std::size_t>(b) / static_cast<std::size_t>(opt.n_bins);
      const std::size_t hi = n * static_cast<std::size_t>(b + 1) / static_cast<std::size_t>(opt.n_bins);
      auto& bin = bins[static_cast<std::size_t>(b)];
      bin.low = lo < n ? conf[order[lo]] : opt.high;
      bin.high = hi > lo ? conf[order[hi - 1]] : bin.low;
      for (std::size_t r = lo; r < hi; ++r) {
        bin.mean_conf += conf[order[r]];
        bin.accuracy += correct[order[r]] ? 1.0 : 0.0;
        ++bin.count;
      }
    }
  }
  for (auto& bin : bins) {
    if (bin.count > 0) {
      bin.mean_conf /= static_cast<double>(bin.count);
      bin.accuracy /= static_cast<double>(bin.count);
    }
  }
  return bins;
}

inline double ece_from_bins(const std::vector<Bin>& bins) {
  long total = 0;
  for (const auto& b : bins) total += b.count;
  if (total == 0) throw DomainError("ece: no samples");
  double e = 0;
  for (const auto& b : bins)
    if (b.count > 0) e += static_cast<double>(b.count) / static_cast<double>(total) * std::abs(b.mean_conf - b.accuracy);
  return e;
}

// Expected calibration error: sum_b (count_b / N) |mean_conf_b - acc_b| over
// non-empty bins.
inline double ece(std::span<const double> conf, const std::vector<bool>& correct, const BinOptions& opt = {}) {
  return ece_from_bins(reliability_bins(conf, correct, opt));
}

inline double ece(std::span<const double> conf, const std::vector<bool>& correct, int n_bins) {
  BinOptions opt;
  opt.n_bins = n_bins;
  return ece(conf, correct, opt);
}

// Probability that a random correct prediction outranks a random incorrect
// one, ties counted 0.5 (Mann-Whitney U / (n_pos * n_neg) via mid-ranks).
inline double auroc(std::span<const double> conf, const std::vector<bool>& correct) {
  detail::check_inputs(conf, correct);
  const std::size_t n = conf.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return conf[a] < conf[b]; });
  double rank_sum_pos = 0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && conf[order[j + 1]] == conf[order[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k)
      if (correct[order[k]]) {
        rank_sum_pos += mid_rank;
        ++n_pos;
      }
    i = j + 1;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw DomainError("AUROC undefined: need both correct and incorrect samples");
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum_pos - np * (np + 1) / 2) / (np * nn);
}

// One labelled item of a calibration set: raw option logits and the index of
// the correct option (0-based).
struct CalibrationItem {
  std::vector<double> logits;
  int correct_option = 0;
};

struct CalibrationResult {
  double tau_scale = 1.0;
  double ece_before = 0;
  double ece_after = 0;
  std::optional<double> auroc;
  std::vector<Bin> bin_table;
  std::vector<std::string> warnings;
};

struct FitOptions {
  BinOptions bins{};
  double grid_start = 0.25;
  double grid_ratio = 1.25;
  double grid_max = 64.0;
  double rel_tol = 1e-3;
};

// Chosen-option confidence (max probability) and correctness at temperature
// tau. The argmax does not depend on tau.
inline void confidences_at(std::span<const CalibrationItem> items, double tau, std::vector<double>& conf,
                           std::vector<bool>& correct) {
  conf.resize(items.size());
  correct.resize(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto p = scaled_softmax(items[i].logits, tau);
    const auto best = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
    conf[i] = p[static_cast<std::size_t>(best)];
    correct[i] = best == items[i].correct_option;
  }
}

namespace detail {

inline double ece_at(std::span<const CalibrationItem> items, double tau, const BinOptions& bins) {
  std::vector<double> conf;
  std::vector<bool> correct;
  confidences_at(items, tau, conf, correct);
  return ece(conf, correct, bins);
}

}  // namespace detail

// Fits tau_scale = argmin_tau ECE(softmax(z / tau)) by a log-spaced grid
// tau = start * ratio^k on [start, max], refined by golden-section search
// between the neighbours of the best grid point.
inline CalibrationResult fit_temperature(std::span<const CalibrationItem> items, const FitOptions& opt = {}) {
  if (items.empty()) throw DomainError("fit_temperature: empty calibration set");
  for (const auto& it : items)
    if (it.correct_option < 0 || it.correct_option >= static_cast<int>(it.logits.size()))
      throw DomainError("fit_temperature: correct option out of range");

  CalibrationResult res;
  {
    std::vector<double> conf;
    std::vector<bool> correct;
    confidences_at(items, 1.0, conf, correct);
    const auto bins = reliability_bins(conf, correct, opt.bins);
    const auto populated = std::count_if(bins.begin(), bins.end(), [](const Bin& b) { return b.count > 0; });
    if (populated < 2) throw DomainError("fit_temperature: fewer than 2 confidence bins populated");
    res.ece_before = ece_from_bins(bins);
  }

  std::vector<double> grid;
  for (double t = opt.grid_start; t <= opt.grid_max * opt.grid_ratio; t *= opt.grid_ratio) grid.push_back(t);
  std::vector<double> values(grid.size());
  for (std::size_t k = 0; k < grid.size(); ++k) values[k] = detail::ece_at(items, grid[k], opt.bins);
  const auto best = static_cast<std::size_t>(std::min_element(values.begin(), values.end()) - values.begin());

  // Golden-section search on log(tau) between the neighbouring grid points.
  double a = std::log(grid[best == 0 ? 0 : best - 1]);
  double b = std::log(grid[std::min(best + 1, grid.size() - 1)]);
  const double phi = (std::sqrt(5.0) - 1) / 2;
  double c = b - phi * (b - a), d = a + phi * (b - a);
  double fc = detail::ece_at(items, std::exp(c), opt.bins);
  double fd = detail::ece_at(items, std::exp(d), opt.bins);
  while (std::exp(b) - std::exp(a) > opt.rel_tol * std::exp(0.5 * (a + b))) {
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - phi * (b - a);
      fc = detail::ece_at(items, std::exp(c), opt.bins);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + phi * (b - a);
      fd = detail::ece_at(items, std::exp(d), opt.bins);
    }
  }
  double tau = std::exp(0.5 * (a + b));
  double best_ece = detail::ece_at(items, tau, opt.bins);
  // The golden-section result only replaces the grid point when it improves on it;
  // tau = 1 (the uncalibrated input) is always a candidate.
  if (values[best] < best_ece) {
    tau = grid[best];
    best_ece = values[best];
  }
  if (res.ece_before <= best_ece) {
    tau = 1.0;
    best_ece = res.ece_before;
  }
  res.tau_scale = tau;
  res.ece_after = best_ece;
  if (tau != 1.0 && (best == 0 || best + 1 == grid.size()))
    res.warnings.push_back("optimum at the edge of the temperature grid; the true minimum may lie outside it");

  std::vector<double> conf;
  std::vector<bool> correct;
  confidences_at(items, tau, conf, correct);
  res.bin_table = reliability_bins(conf, correct, opt.bins);
  const auto n_correct = std::count(correct.begin(), correct.end(), true);
  if (n_correct == 0 || n_correct == static_cast<long>(correct.size())) {
    res.warnings.push_back("degenerate calibration set (all correct or all incorrect); AUROC omitted");
  } else {
    res.auroc = auroc(conf, correct);
  }
  return res;
}

}  // namespace abstain::calib
