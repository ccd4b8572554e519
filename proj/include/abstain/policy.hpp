#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "abstain/errors.hpp"
#include "abstain/glm.hpp"
#include "abstain/parallel.hpp"
#include "abstain/stats.hpp"
#include "abstain/trialstore.hpp"

// Two-stage confidence -> decision models: nested logistic suites, derived
// policy parameters, bandness diagnostics and the abstention-confidence model.
namespace abstain::policy {

// Column names shared by suite designs and derived-parameter lookups.
inline constexpr const char* kConfidence = "confidence";
inline constexpr const char* kDifficulty = "difficulty";
inline constexpr const char* kRag = "rag";
inline constexpr const char* kThreshold = "threshold";

inline std::string pc_name(std::size_t k) { return "pc" + std::to_string(k + 1); }

// One analysed trial. Confidence is always stored in [0, 1]; Phase 4 designs
// convert it to percent.
struct PolicyRow {
  std::string item_id;
  double confidence = 0;
  double difficulty = 0;
  double rag = 0;
  std::vector<double> pcs;
  double threshold = 0;      // instructed threshold, percent (Phase 4)
  double abstained = 0;      // 0/1
  double abstain_conf = 0;   // probability on the abstention option
};

// Joins a target run's trials with per-item Phase 1 chosen confidence
// (averaged over seeds). Without a Phase 1 run the trial's own maximum
// real-option probability, renormalized over options 1-4, stands in and a
// warning is recorded.
inline std::vector<PolicyRow> build_policy_table(const JoinedTable& joined, const PhaseRun* phase1,
                                                 std::vector<std::string>* warnings = nullptr) {
  std::map<std::string, std::pair<double, int>> p1;
  if (phase1) {
    for (const auto& t : phase1->trials) {
      auto& acc = p1[t.item_id];
      acc.first += t.chosen_confidence();
      acc.second += 1;
    }
    std::set<std::string> missing;
    for (const auto& r : joined)
      if (!p1.count(r.trial.item_id)) missing.insert(r.trial.item_id);
    if (!missing.empty()) {
      std::string msg = "no Phase 1 confidence for " + std::to_string(missing.size()) + " item(s):";
      for (const auto& id : missing) msg += " " + id;
      throw JoinError(msg);
    }
  } else if (warnings) {
    warnings->push_back("no Phase 1 run given; confidence taken from each trial's renormalized max real-option probability");
  }
  std::vector<PolicyRow> rows;
  rows.reserve(joined.size());
  for (const auto& r : joined) {
    PolicyRow row;
    row.item_id = r.trial.item_id;
    if (phase1) {
      const auto& acc = p1.at(row.item_id);
      row.confidence = acc.first / acc.second;
    } else {
      double real = 0;
      for (int k = 0; k < 4; ++k) real += r.trial.option_probs[static_cast<std::size_t>(k)];
      row.confidence = real > 0 ? r.trial.max_real_confidence() / real : 0.25;
    }
    row.difficulty = r.difficulty;
    row.rag = r.rag_score;
    row.pcs = r.embedding_pcs;
    row.threshold = r.trial.instructed_threshold.value_or(0.0);
    row.abstained = r.trial.abstained ? 1.0 : 0.0;
    row.abstain_conf = r.trial.abstain_confidence();
    rows.push_back(std::move(row));
  }
  return rows;
}

// Predictor groups understood by design_for().
enum class Term { confidence, confidence_pct, difficulty, rag, embeddings, threshold };

inline glm::Design design_for(const std::vector<PolicyRow>& rows, const std::vector<Term>& terms) {
  const auto n = static_cast<Eigen::Index>(rows.size());
  glm::Design d(n);
  std::vector<double> col(rows.size());
  auto add = [&](const std::string& name, auto get) {
    for (std::size_t i = 0; i < rows.size(); ++i) col[i] = get(rows[i]);
    d.add(name, col);
  };
  for (Term t : terms) {
    switch (t) {
      case Term::confidence: add(kConfidence, [](const PolicyRow& r) { return r.confidence; }); break;
      case Term::confidence_pct: add(kConfidence, [](const PolicyRow& r) { return 100.0 * r.confidence; }); break;
      case Term::difficulty: add(kDifficulty, [](const PolicyRow& r) { return r.difficulty; }); break;
      case Term::rag: add(kRag, [](const PolicyRow& r) { return r.rag; }); break;
      case Term::threshold: add(kThreshold, [](const PolicyRow& r) { return r.threshold; }); break;
      case Term::embeddings:
        for (std::size_t k = 0; k < kNumPcs; ++k)
          add(pc_name(k), [k](const PolicyRow& r) { return k < r.pcs.size() ? r.pcs[k] : 0.0; });
        break;
    }
  }
  return d;
}

inline std::vector<double> outcome(const std::vector<PolicyRow>& rows, double PolicyRow::*field) {
  std::vector<double> y(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) y[i] = rows[i].*field;
  return y;
}

struct ModelSpec {
  std::string name;
  std::vector<Term> terms;
};

// A nested pair compared by AIC difference and likelihood-ratio test.
struct Comparison {
  std::string model;
  std::string baseline;
  std::optional<double> delta_aic;  // model minus baseline
  std::optional<glm::LrtResult> lrt;
};

struct SuiteEntry {
  ModelSpec spec;
  std::optional<glm::ModelFit> fit;
  std::string error;  // set when the model could not be fitted
};

struct Suite {
  std::vector<SuiteEntry> models;  // in declaration order
  std::vector<Comparison> comparisons;

  const SuiteEntry& entry(std::string_view name) const {
    for (const auto& e : models)
      if (e.spec.name == name) return e;
    throw DomainError("suite has no model '" + std::string(name) + "'");
  }
  const glm::ModelFit& fit(std::string_view name) const {
    const auto& e = entry(name);
    if (!e.fit) throw DomainError("model '" + std::string(name) + "' not fitted: " + e.error);
    return *e.fit;
  }
};

struct SuiteOptions {
  bool standardize = false;
  unsigned workers = default_workers();
  glm::LogitOptions logit{};
};

// Fits every model concurrently. A model that fails (separation, rank) is
// kept with its error message; comparisons involving it carry no numbers.
inline Suite fit_suite(const std::vector<PolicyRow>& rows, const std::vector<ModelSpec>& specs,
                       const std::vector<std::pair<std::string, std::string>>& pairs, const SuiteOptions& opt = {}) {
  if (rows.empty()) throw DomainError("fit_suite: empty table");
  const auto y = outcome(rows, &PolicyRow::abstained);
  Suite suite;
  suite.models.resize(specs.size());
  parallel_for(specs.size(), opt.workers, [&](std::size_t i) {
    auto& e = suite.models[i];
    e.spec = specs[i];
    try {
      auto d = design_for(rows, specs[i].terms);
      if (opt.standardize) {
        auto fit = glm::fit_logit(glm::standardize(d).design, y, opt.logit);
        fit.standardized = true;
        e.fit = std::move(fit);
      } else {
        e.fit = glm::fit_logit(d, y, opt.logit);
      }
    } catch (const DomainError& err) {
      e.error = err.what();
    }
  });
  for (const auto& [model, base] : pairs) {
    Comparison c{model, base, std::nullopt, std::nullopt};
    const auto& m = suite.entry(model);
    const auto& b = suite.entry(base);
    if (m.fit && b.fit) {
      c.delta_aic = m.fit->aic - b.fit->aic;
      if (m.fit->k() > b.fit->k()) c.lrt = glm::lrt(*m.fit, *b.fit);
    }
    suite.comparisons.push_back(std::move(c));
  }
  return suite;
}

inline std::vector<ModelSpec> phase2_models() {
  using T = Term;
  return {{"difficulty", {T::difficulty}},
          {"confidence", {T::confidence}},
          {"confidence+difficulty", {T::confidence, T::difficulty}},
          {"confidence+rag", {T::confidence, T::rag}},
          {"confidence+embeddings", {T::confidence, T::embeddings}},
          {"full", {T::confidence, T::difficulty, T::rag, T::embeddings}}};
}

inline std::vector<std::pair<std::string, std::string>> phase2_pairs() {
  return {{"confidence", "difficulty"},
          {"confidence+difficulty", "difficulty"},
          {"confidence+difficulty", "confidence"},
          {"confidence+rag", "confidence"},
          {"confidence+embeddings", "confidence"},
          {"full", "confidence+difficulty"}};
}

inline Suite fit_phase2_suite(const std::vector<PolicyRow>& rows, const SuiteOptions& opt = {}) {
  return fit_suite(rows, phase2_models(), phase2_pairs(), opt);
}

inline std::vector<ModelSpec> phase4_models() {
  using T = Term;
  return {{"T", {T::threshold}},
          {"T+conf", {T::threshold, T::confidence_pct}},
          {"T+diff", {T::threshold, T::difficulty}},
          {"T+conf+diff", {T::threshold, T::confidence_pct, T::difficulty}},
          {"T+rag", {T::threshold, T::rag}},
          {"T+emb", {T::threshold, T::embeddings}},
          {"maximal", {T::threshold, T::confidence_pct, T::difficulty, T::rag, T::embeddings}}};
}

inline std::vector<std::pair<std::string, std::string>> phase4_pairs() {
  return {{"T+conf", "T"},           {"T+diff", "T"}, {"T+conf+diff", "T+conf"}, {"T+conf+diff", "T+diff"},
          {"T+rag", "T"},            {"T+emb", "T"},  {"maximal", "T+conf+diff"}};
}

inline Suite fit_phase4_suite(const std::vector<PolicyRow>& rows, const SuiteOptions& opt = {}) {
  return fit_suite(rows, phase4_models(), phase4_pairs(), opt);
}

enum class Stage { phase2, phase4 };

struct DecisionParams {
  Stage stage = Stage::phase2;
  double t50 = 0;  // confidence in [0, 1] (Phase 2) or threshold percent (Phase 4)
  double policy_temperature = 0;
  std::optional<double> scale;
  std::optional<double> shift;
  std::optional<double> difficulty_adjustment;
  std::optional<glm::ModelFit> source_fit;

  // Phase 4 indifference threshold T*(conf, diff), confidence in percent.
  double t50_at(double conf_pct, double diff = 0) const {
    if (stage != Stage::phase4) throw DomainError("t50_at is defined for Phase 4 parameters only");
    return *shift + *scale * conf_pct + difficulty_adjustment.value_or(0.0) * diff;
  }
};

namespace detail {
inline double coef_or_zero(const glm::ModelFit& fit, const char* name) {
  const auto j = fit.index_of(name);
  return j ? fit.coef[*j] : 0.0;
}
}  // namespace detail

// t50 = -b0/bC - (bD/bC) diff; temperature = 1/|bC|.
inline DecisionParams derive_phase2_params(double b0, double b_conf, double b_diff, double diff_at) {
  if (b_conf == 0.0 || !std::isfinite(b_conf)) throw DomainError("degenerate policy: confidence coefficient is zero");
  DecisionParams p;
  p.stage = Stage::phase2;
  p.t50 = -b0 / b_conf - (b_diff / b_conf) * diff_at;
  p.policy_temperature = 1.0 / std::abs(b_conf);
  return p;
}

inline DecisionParams derive_phase2_params(const glm::ModelFit& fit, double diff_at) {
  if (!fit.index_of(kConfidence)) throw DomainError("degenerate policy: fit has no confidence coefficient");
  auto p = derive_phase2_params(detail::coef_or_zero(fit, glm::kIntercept.data()), fit.coefficient(kConfidence),
                                detail::coef_or_zero(fit, kDifficulty), diff_at);
  p.source_fit = fit;
  return p;
}

// scale = -bC/bT, shift = -b0/bT, difficulty adjustment = -bD/bT,
// temperature = 1/bT.
inline DecisionParams derive_phase4_params(double b0, double b_threshold, double b_conf, double b_diff = 0) {
  if (!(b_threshold > 0)) throw DomainError("threshold coefficient non-positive");
  DecisionParams p;
  p.stage = Stage::phase4;
  p.scale = -b_conf / b_threshold;
  p.shift = -b0 / b_threshold;
  p.difficulty_adjustment = -b_diff / b_threshold;
  p.policy_temperature = 1.0 / b_threshold;
  p.t50 = *p.shift;
  return p;
}

inline DecisionParams derive_phase4_params(const glm::ModelFit& fit) {
  if (!fit.index_of(kThreshold)) throw DomainError("threshold coefficient non-positive: fit has no threshold term");
  auto p = derive_phase4_params(detail::coef_or_zero(fit, glm::kIntercept.data()), fit.coefficient(kThreshold),
                                detail::coef_or_zero(fit, kConfidence), detail::coef_or_zero(fit, kDifficulty));
  p.source_fit = fit;
  return p;
}

// ----- bandness ------------------------------------------------------------

inline constexpr int kConfidenceBins = 10;

// Abstention rates over instructed thresholds (0..100 step 10) by confidence
// bins of width 0.1. Empty cells have no rate.
struct Heatmap {
  std::vector<double> thresholds;
  std::vector<std::vector<long>> n;          // [threshold][conf bin]
  std::vector<std::vector<long>> abstained;  // [threshold][conf bin]

  std::optional<double> rate(std::size_t t, std::size_t c) const {
    if (n[t][c] == 0) return std::nullopt;
    return static_cast<double>(abstained[t][c]) / static_cast<double>(n[t][c]);
  }
  static double bin_center(std::size_t c) { return (static_cast<double>(c) + 0.5) / kConfidenceBins; }
};

inline int confidence_bin(double conf) {
  return std::clamp(static_cast<int>(std::floor(conf * kConfidenceBins)), 0, kConfidenceBins - 1);
}

inline Heatmap abstention_grid(const std::vector<PolicyRow>& rows) {
  std::set<int> levels;
  for (const auto& r : rows) {
    const double snapped = std::round(r.threshold / 10.0) * 10.0;
    if (std::abs(snapped - r.threshold) > 1e-9 || snapped < 0 || snapped > 100)
      throw DomainError("threshold " + std::to_string(r.threshold) + " is not on the 0..100 step 10 grid");
    levels.insert(static_cast<int>(snapped));
  }
  Heatmap h;
  for (int t : levels) h.thresholds.push_back(t);
  h.n.assign(h.thresholds.size(), std::vector<long>(kConfidenceBins, 0));
  h.abstained = h.n;
  for (const auto& r : rows) {
    const auto t = static_cast<std::size_t>(
        std::find(h.thresholds.begin(), h.thresholds.end(), std::round(r.threshold / 10.0) * 10.0) -
        h.thresholds.begin());
    const auto c = static_cast<std::size_t>(confidence_bin(r.confidence));
    ++h.n[t][c];
    if (r.abstained > 0.5) ++h.abstained[t][c];
  }
  return h;
}

inline double bandness_from_correlations(double r_conf, double r_threshold) {
  const double a = std::abs(r_conf), b = std::abs(r_threshold);
  if (a + b == 0) throw DomainError("bandness undefined: both correlations are zero");
  return (a - b) / (a + b);
}

struct Bandness {
  double index = 0;
  double r_conf = 0;
  double r_threshold = 0;
  std::size_t cells = 0;
};

// Pearson correlations of cell abstention rate with the bin's confidence
// centre and with the threshold, over non-empty cells.
inline Bandness bandness_index(const Heatmap& h) {
  std::vector<double> rate, conf, thr;
  std::set<std::size_t> conf_bins;
  for (std::size_t t = 0; t < h.thresholds.size(); ++t)
    for (std::size_t c = 0; c < static_cast<std::size_t>(kConfidenceBins); ++c)
      if (auto r = h.rate(t, c)) {
        rate.push_back(*r);
        conf.push_back(Heatmap::bin_center(c));
        thr.push_back(h.thresholds[t]);
        conf_bins.insert(c);
      }
  if (h.thresholds.size() < 2 || conf_bins.size() < 2)
    throw DomainError("grid degenerate: need at least 2 threshold levels and 2 confidence bins");
  if (std::all_of(rate.begin(), rate.end(), [&](double v) { return v == rate.front(); }))
    throw DomainError("bandness undefined: abstention rate is constant");
  Bandness b;
  b.cells = rate.size();
  b.r_conf = stats::pearson(rate, conf);
  b.r_threshold = stats::pearson(rate, thr);
  b.index = bandness_from_correlations(b.r_conf, b.r_threshold);
  return b;
}

inline Bandness bandness_index(const std::vector<PolicyRow>& rows) { return bandness_index(abstention_grid(rows)); }

// ----- abstention-confidence linear model ---------------------------------

struct AbstentionConfidence {
  std::vector<SuiteEntry> models;  // T, T+conf, T+diff, T+conf+diff (OLS)
  std::vector<Comparison> comparisons;
  const glm::ModelFit& full() const { return *models.back().fit; }
};

// OLS of abstention-option probability on threshold (percent), confidence
// (percent) and difficulty, with nested AIC comparisons against T-only.
inline AbstentionConfidence fit_abstention_confidence(const std::vector<PolicyRow>& rows) {
  if (rows.empty()) throw DomainError("fit_abstention_confidence: empty table");
  using T = Term;
  const std::vector<ModelSpec> specs = {{"T", {T::threshold}},
                                        {"T+conf", {T::threshold, T::confidence_pct}},
                                        {"T+diff", {T::threshold, T::difficulty}},
                                        {"T+conf+diff", {T::threshold, T::confidence_pct, T::difficulty}}};
  const auto y = outcome(rows, &PolicyRow::abstain_conf);
  AbstentionConfidence out;
  for (const auto& s : specs) out.models.push_back({s, glm::fit_ols(design_for(rows, s.terms), y), {}});
  for (std::size_t i = 1; i < specs.size(); ++i) {
    const auto& m = *out.models[i].fit;
    const auto& b = *out.models[0].fit;
    out.comparisons.push_back({specs[i].name, "T", m.aic - b.aic, glm::lrt(m, b)});
  }
  return out;
}

}  // namespace abstain::policy
