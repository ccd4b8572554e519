#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "abstain/errors.hpp"
#include "abstain/glm.hpp"
#include "abstain/parallel.hpp"
#include "abstain/stats.hpp"
#include "abstain/trialstore.hpp"

// Parallel mediation of steering strength -> abstention through a confidence
// shift (M1) and a policy shift (M2), with an item-level cluster bootstrap.
namespace abstain::mediate {

// One steered trial paired with its item's unsteered baseline.
struct MediationInput {
  std::string item_id;
  double x = 0;  // signed steering strength
  bool y = false;  // abstained
  double c_m = 0;  // max real-option confidence
  double c_5 = 0;  // abstention-option confidence
  std::optional<double> c_m_baseline;
  std::optional<double> c_5_baseline;
  std::optional<bool> y_baseline;
  std::optional<double> difficulty;
  std::optional<int> layer;
};

inline void to_json(json& j, const MediationInput& r) {
  j = json{{"item_id", r.item_id}, {"x", r.x}, {"y", r.y}, {"c_m", r.c_m}, {"c_5", r.c_5}};
  if (r.c_m_baseline) j["c_m_baseline"] = *r.c_m_baseline;
  if (r.c_5_baseline) j["c_5_baseline"] = *r.c_5_baseline;
  if (r.y_baseline) j["y_baseline"] = *r.y_baseline;
  if (r.difficulty) j["difficulty"] = *r.difficulty;
  if (r.layer) j["layer"] = *r.layer;
}

inline void from_json(const json& j, MediationInput& r) {
  r.item_id = j.at("item_id").get<std::string>();
  r.x = j.at("x").get<double>();
  r.y = j.at("y").get<bool>();
  r.c_m = j.at("c_m").get<double>();
  r.c_5 = j.at("c_5").get<double>();
  auto opt = [&](const char* k) { return j.contains(k) && !j.at(k).is_null(); };
  if (opt("c_m_baseline")) r.c_m_baseline = j.at("c_m_baseline").get<double>();
  if (opt("c_5_baseline")) r.c_5_baseline = j.at("c_5_baseline").get<double>();
  if (opt("y_baseline")) r.y_baseline = j.at("y_baseline").get<bool>();
  if (opt("difficulty")) r.difficulty = j.at("difficulty").get<double>();
  if (opt("layer")) r.layer = j.at("layer").get<int>();
}

inline std::vector<MediationInput> load_inputs(const std::filesystem::path& path) {
  std::vector<MediationInput> rows;
  read_jsonl(path, [&](std::size_t lineno, const json& j) {
    try {
      rows.push_back(j.get<MediationInput>());
    } catch (const json::exception& e) {
      throw ParseError(std::string("mediation input schema: ") + e.what(), lineno);
    }
  });
  return rows;
}

inline void save_inputs(const std::vector<MediationInput>& rows, const std::filesystem::path& path) {
  auto out = open_for_write(path);
  for (const auto& r : rows) out << json(r).dump() << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

inline void validate(const MediationInput& r) {
  if (!r.c_m_baseline || !r.c_5_baseline || !r.y_baseline)
    throw ValidationError("baseline: steered row for item " + r.item_id + " has no paired baseline");
  if (r.x == 0.0) throw ValidationError("x: steered rows must have non-zero steering strength (item " + r.item_id + ")");
}

// M1 = (C_m - C_m_baseline) - (C_5 - C_5_baseline).
inline double mediator_confidence_shift(const MediationInput& r) {
  if (!r.c_m_baseline || !r.c_5_baseline)
    throw ValidationError("baseline: no paired baseline for item " + r.item_id);
  return (r.c_m - *r.c_m_baseline) - (r.c_5 - *r.c_5_baseline);
}

// Logistic curve P(abstain | C_m) = sigma(alpha + beta C_m).
struct Curve {
  double alpha = 0;
  double beta = 0;
  bool fitted = false;
  double operator()(double c) const { return stats::sigmoid(alpha + beta * c); }
};

inline Curve fit_curve(std::span<const double> c_m, std::span<const double> y) {
  glm::Design d(static_cast<Eigen::Index>(c_m.size()));
  d.add("c_m", c_m);
  const auto fit = glm::fit_logit(d, y);
  return {fit.coef[0], fit.coef[1], true};
}

// M2 = sigma(alpha_s + beta_s C_m) - sigma(alpha_b + beta_b C_m).
inline double mediator_policy_shift(double c_m, const Curve& baseline, const Curve& steered) {
  if (!baseline.fitted || !steered.fitted) throw DomainError("policy shift: calibration curve not fitted");
  return steered(c_m) - baseline(c_m);
}

// Flat path-model data: one row per steered trial, clustered by item.
struct PathData {
  std::vector<double> x, m1, m2, y;
  std::vector<std::string> cluster;
  std::optional<std::vector<double>> difficulty;

  std::size_t size() const { return x.size(); }
};

struct MediatorCurves {
  Curve baseline;
  std::map<double, Curve> steered;  // per steering strength, pooled across layers
};

// Computes M1 and M2 for every row. The baseline curve is fitted on one
// baseline observation per item; one steered curve per steering strength.
inline PathData build_path_data(const std::vector<MediationInput>& rows, bool with_difficulty,
                                MediatorCurves* curves_out = nullptr) {
  if (rows.empty()) throw DomainError("mediation: no input rows");
  for (const auto& r : rows) validate(r);

  std::map<std::string, std::pair<double, double>> base;
  for (const auto& r : rows) base.emplace(r.item_id, std::make_pair(*r.c_m_baseline, *r.y_baseline ? 1.0 : 0.0));
  std::vector<double> bc, by;
  for (const auto& [id, v] : base) {
    bc.push_back(v.first);
    by.push_back(v.second);
  }
  MediatorCurves curves;
  curves.baseline = fit_curve(bc, by);

  std::map<double, std::pair<std::vector<double>, std::vector<double>>> by_x;
  for (const auto& r : rows) {
    auto& [c, y] = by_x[r.x];
    c.push_back(r.c_m);
    y.push_back(r.y ? 1.0 : 0.0);
  }
  for (const auto& [x, cy] : by_x) curves.steered[x] = fit_curve(cy.first, cy.second);

  PathData d;
  if (with_difficulty) d.difficulty.emplace();
  for (const auto& r : rows) {
    d.x.push_back(r.x);
    d.m1.push_back(mediator_confidence_shift(r));
    d.m2.push_back(mediator_policy_shift(r.c_m, curves.baseline, curves.steered.at(r.x)));
    d.y.push_back(r.y ? 1.0 : 0.0);
    d.cluster.push_back(r.item_id);
    if (with_difficulty) {
      if (!r.difficulty) throw ValidationError("difficulty: missing for item " + r.item_id);
      d.difficulty->push_back(*r.difficulty);
    }
  }
  if (curves_out) *curves_out = std::move(curves);
  return d;
}

struct PathEstimate {
  double estimate = 0;
  double se = 0;
};

struct PathFits {
  PathEstimate a1, a2, b1, b2, c_prime, c;
  std::optional<PathEstimate> gamma_difficulty;  // from the outcome equation
  double indirect1() const { return a1.estimate * b1.estimate; }
  double indirect2() const { return a2.estimate * b2.estimate; }
};

namespace detail {

inline void check_shape(const PathData& d) {
  const auto n = d.size();
  if (d.m1.size() != n || d.m2.size() != n || d.y.size() != n || d.cluster.size() != n ||
      (d.difficulty && d.difficulty->size() != n))
    throw DomainError("mediation: path data columns differ in length");
}

inline glm::Design design(const PathData& d, std::initializer_list<std::pair<const char*, const std::vector<double>*>> cols) {
  glm::Design des(static_cast<Eigen::Index>(d.size()));
  for (const auto& [name, v] : cols) des.add(name, *v);
  if (d.difficulty) des.add("difficulty", *d.difficulty);
  return des;
}

inline PathEstimate at(const glm::ModelFit& f, const char* name) {
  return {f.coefficient(name), f.std_error(name)};
}

}  // namespace detail

// a-paths: OLS with intercept and item-clustered sandwich SEs.
// b, c': logit of Y on X, M1, M2. c: logit of Y on X. Difficulty, when
// present, enters every equation.
inline PathFits fit_paths(const PathData& d, bool cluster_se = true) {
  detail::check_shape(d);
  if (std::set<std::string>(d.cluster.begin(), d.cluster.end()).size() < 2)
    throw DomainError("mediation: need at least 2 items");
  if (std::set<double>(d.x.begin(), d.x.end()).size() < 2)
    throw DomainError("mediation: need at least 2 steering levels");

  const auto da = detail::design(d, {{"x", &d.x}});
  const auto a1 = cluster_se ? glm::fit_ols_cluster(da, d.m1, d.cluster) : glm::fit_ols(da, d.m1);
  const auto a2 = cluster_se ? glm::fit_ols_cluster(da, d.m2, d.cluster) : glm::fit_ols(da, d.m2);
  const auto outcome = glm::fit_logit(detail::design(d, {{"x", &d.x}, {"m1", &d.m1}, {"m2", &d.m2}}), d.y);
  const auto total = glm::fit_logit(da, d.y);

  PathFits p;
  p.a1 = detail::at(a1, "x");
  p.a2 = detail::at(a2, "x");
  p.b1 = detail::at(outcome, "m1");
  p.b2 = detail::at(outcome, "m2");
  p.c_prime = detail::at(outcome, "x");
  p.c = detail::at(total, "x");
  if (d.difficulty) p.gamma_difficulty = detail::at(outcome, "difficulty");
  return p;
}

// Point estimates only (no covariance), for bootstrap replicates.
inline std::pair<double, double> indirect_effects(const PathData& d) {
  const auto da = detail::design(d, {{"x", &d.x}});
  const auto col = *da.column("x");
  auto ols_slope = [&](const std::vector<double>& y) {
    const Eigen::MatrixXd& X = da.matrix();
    Eigen::VectorXd yv = Eigen::Map<const Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
    if (qr.rank() < X.cols()) throw RankError("bootstrap replicate: rank-deficient a-path design");
    return qr.solve(yv)(col);
  };
  const double a1 = ols_slope(d.m1), a2 = ols_slope(d.m2);
  const auto outcome = glm::fit_logit(detail::design(d, {{"x", &d.x}, {"m1", &d.m1}, {"m2", &d.m2}}), d.y);
  return {a1 * outcome.coefficient("m1"), a2 * outcome.coefficient("m2")};
}

// Rows of the clusters drawn (with replacement). Each draw becomes its own
// cluster so repeated items stay distinguishable.
inline PathData resample_clusters(const PathData& d, const std::vector<std::vector<std::size_t>>& members,
                                  std::span<const std::size_t> draw) {
  PathData out;
  if (d.difficulty) out.difficulty.emplace();
  for (std::size_t k = 0; k < draw.size(); ++k)
    for (auto i : members[draw[k]]) {
      out.x.push_back(d.x[i]);
      out.m1.push_back(d.m1[i]);
      out.m2.push_back(d.m2[i]);
      out.y.push_back(d.y[i]);
      out.cluster.push_back(std::to_string(k));
      if (d.difficulty) out.difficulty->push_back((*d.difficulty)[i]);
    }
  return out;
}

struct BootstrapResult {
  glm::Interval ci1;
  glm::Interval ci2;
  int B = 0;
  int failed = 0;
  std::vector<double> draws1;
  std::vector<double> draws2;
};

struct BootstrapOptions {
  int B = 1000;
  std::uint64_t seed = 0;
  unsigned workers = default_workers();
  double max_failure_fraction = 0.2;
  double level = 0.95;
};

// Percentile CIs from B item-resampled refits. Replicate b draws its items
// from an RNG seeded by derive_seed(seed, b), so results do not depend on the
// number of workers or their scheduling.
inline BootstrapResult bootstrap_ci(const PathData& d, const BootstrapOptions& opt) {
  detail::check_shape(d);
  if (opt.B < 100) throw DomainError("bootstrap: B must be at least 100");
  std::map<std::string, std::size_t> index;
  std::vector<std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto [it, inserted] = index.emplace(d.cluster[i], members.size());
    if (inserted) members.emplace_back();
    members[it->second].push_back(i);
  }
  const std::size_t J = members.size();
  if (J < 2) throw DomainError("bootstrap: need at least 2 items");

  const auto B = static_cast<std::size_t>(opt.B);
  std::vector<double> v1(B), v2(B);
  std::vector<char> ok(B, 0);
  std::vector<std::string> errors(B);
  parallel_for(B, opt.workers, [&](std::size_t b) {
    std::mt19937_64 rng(derive_seed(opt.seed, static_cast<std::uint64_t>(b)));
    std::uniform_int_distribution<std::size_t> pick(0, J - 1);
    std::vector<std::size_t> draw(J);
    for (auto& k : draw) k = pick(rng);
    try {
      const auto [i1, i2] = indirect_effects(resample_clusters(d, members, draw));
      v1[b] = i1;
      v2[b] = i2;
      ok[b] = 1;
    } catch (const DomainError& e) {
      errors[b] = e.what();
    }
  });

  BootstrapResult res;
  res.B = opt.B;
  for (std::size_t b = 0; b < B; ++b) {
    if (ok[b]) {
      res.draws1.push_back(v1[b]);
      res.draws2.push_back(v2[b]);
    } else {
      ++res.failed;
    }
  }
  if (res.failed > opt.max_failure_fraction * opt.B) {
    std::string first;
    for (const auto& e : errors)
      if (!e.empty()) {
        first = e;
        break;
      }
    throw DomainError("bootstrap: " + std::to_string(res.failed) + " of " + std::to_string(opt.B) +
                      " replicates failed (limit " + std::to_string(opt.max_failure_fraction) + "); first failure: " + first);
  }
  const double lo = (1 - opt.level) / 2, hi = 1 - lo;
  res.ci1 = {stats::quantile(res.draws1, lo), stats::quantile(res.draws1, hi)};
  res.ci2 = {stats::quantile(res.draws2, lo), stats::quantile(res.draws2, hi)};
  return res;
}

struct Proportions {
  double p1 = 0;
  double p2 = 0;
  double total = 0;
};

// a_k b_k / c. Direct and indirect effects need not sum to c under a logit link.
inline Proportions proportion_mediated(double indirect1, double indirect2, double c) {
  if (std::abs(c) < 1e-6) throw DomainError("proportion mediated undefined: total effect |c| < 1e-6");
  return {indirect1 / c, indirect2 / c, (indirect1 + indirect2) / c};
}

struct MediationReport {
  PathFits paths;
  double indirect1 = 0;
  double indirect2 = 0;
  std::optional<BootstrapResult> bootstrap;
  std::optional<Proportions> proportions;
  double corr_m1_m2 = 0;
  std::size_t n_rows = 0;
  std::size_t n_items = 0;
  std::vector<std::string> notes;
};

inline MediationReport analyze(const PathData& d, const std::optional<BootstrapOptions>& boot) {
  MediationReport rep;
  rep.paths = fit_paths(d);
  rep.indirect1 = rep.paths.indirect1();
  rep.indirect2 = rep.paths.indirect2();
  rep.n_rows = d.size();
  rep.n_items = std::set<std::string>(d.cluster.begin(), d.cluster.end()).size();
  try {
    rep.corr_m1_m2 = stats::pearson(d.m1, d.m2);
  } catch (const DomainError&) {
    rep.corr_m1_m2 = std::numeric_limits<double>::quiet_NaN();
    rep.notes.push_back("mediator correlation undefined (a mediator is constant)");
  }
  try {
    rep.proportions = proportion_mediated(rep.indirect1, rep.indirect2, rep.paths.c.estimate);
  } catch (const DomainError& e) {
    rep.notes.push_back(e.what());
  }
  rep.notes.push_back("logit link: c' + a1*b1 + a2*b2 need not equal c exactly");
  if (boot) rep.bootstrap = bootstrap_ci(d, *boot);
  return rep;
}

inline MediationReport analyze(const std::vector<MediationInput>& rows, bool with_difficulty,
                               const std::optional<BootstrapOptions>& boot) {
  return analyze(build_path_data(rows, with_difficulty), boot);
}

inline json path_json(const PathEstimate& p) { return json{{"estimate", p.estimate}, {"se", p.se}}; }

inline json to_report_json(const MediationReport& r) {
  auto nan_null = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  json j{{"a1", path_json(r.paths.a1)},
         {"a2", path_json(r.paths.a2)},
         {"b1", path_json(r.paths.b1)},
         {"b2", path_json(r.paths.b2)},
         {"c_prime", path_json(r.paths.c_prime)},
         {"c", path_json(r.paths.c)},
         {"indirect1", r.indirect1},
         {"indirect2", r.indirect2},
         {"corr_m1_m2", nan_null(r.corr_m1_m2)},
         {"n_rows", r.n_rows},
         {"n_items", r.n_items},
         {"notes", r.notes}};
  if (r.paths.gamma_difficulty) j["gamma_difficulty"] = path_json(*r.paths.gamma_difficulty);
  if (r.proportions)
    j["proportions"] = {{"p1", r.proportions->p1}, {"p2", r.proportions->p2}, {"total", r.proportions->total}};
  if (r.bootstrap) {
    j["bootstrap"] = {{"B", r.bootstrap->B},
                      {"failed", r.bootstrap->failed},
                      {"indirect1_ci", {r.bootstrap->ci1.low, r.bootstrap->ci1.high}},
                      {"indirect2_ci", {r.bootstrap->ci2.low, r.bootstrap->ci2.high}}};
  }
  return j;
}

}  // namespace abstain::mediate
