#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "abstain/errors.hpp"
#include "abstain/stats.hpp"

// Logistic and linear regression by maximum likelihood, sandwich variances,
// nested-model comparison and a handful of interval / effect-size helpers.
namespace abstain::glm {

inline constexpr std::string_view kIntercept = "(Intercept)";

enum class Family { logit, linear };

inline std::string to_string(Family f) { return f == Family::logit ? "logit" : "linear"; }

inline Family family_from_string(std::string_view s) {
  if (s == "logit") return Family::logit;
  if (s == "linear") return Family::linear;
  throw ValidationError("unknown model family '" + std::string(s) + "'");
}

// Column-named design matrix. Column 0 is the intercept when one is present.
class Design {
 public:
  Design() = default;
  explicit Design(Eigen::Index n, bool intercept = true) : x_(n, 0) {
    if (intercept) add(std::string(kIntercept), std::vector<double>(static_cast<std::size_t>(n), 1.0));
  }

  Design& add(std::string name, std::span<const double> values) {
    if (x_.cols() == 0 && x_.rows() == 0) x_.resize(static_cast<Eigen::Index>(values.size()), 0);
    if (static_cast<Eigen::Index>(values.size()) != x_.rows())
      throw DomainError("design column '" + name + "' has " + std::to_string(values.size()) + " rows, expected " +
                        std::to_string(x_.rows()));
    if (column(name)) throw DomainError("duplicate design column '" + name + "'");
    x_.conservativeResize(Eigen::NoChange, x_.cols() + 1);
    for (Eigen::Index i = 0; i < x_.rows(); ++i) x_(i, x_.cols() - 1) = values[static_cast<std::size_t>(i)];
    names_.push_back(std::move(name));
    return *this;
  }

  const Eigen::MatrixXd& matrix() const noexcept { return x_; }
  Eigen::MatrixXd& matrix() noexcept { return x_; }
  const std::vector<std::string>& names() const noexcept { return names_; }
  Eigen::Index rows() const noexcept { return x_.rows(); }
  Eigen::Index cols() const noexcept { return x_.cols(); }
  bool has_intercept() const noexcept { return !names_.empty() && names_.front() == kIntercept; }

  std::optional<Eigen::Index> column(std::string_view name) const {
    for (std::size_t j = 0; j < names_.size(); ++j)
      if (names_[j] == name) return static_cast<Eigen::Index>(j);
    return std::nullopt;
  }

  // Subset of rows, in the given order (duplicates allowed; used by resampling).
  Design rows_subset(std::span<const std::size_t> idx) const {
    Design out;
    out.names_ = names_;
    out.x_.resize(static_cast<Eigen::Index>(idx.size()), x_.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) out.x_.row(static_cast<Eigen::Index>(r)) = x_.row(static_cast<Eigen::Index>(idx[r]));
    return out;
  }

 private:
  Eigen::MatrixXd x_;
  std::vector<std::string> names_;
};

struct ModelFit {
  Family family = Family::logit;
  std::vector<std::string> predictor_names;
  std::vector<double> coef;
  std::vector<double> se;
  std::vector<double> z;
  std::vector<double> p_value;
  Eigen::MatrixXd cov;
  double loglik = 0;
  double null_loglik = 0;
  double aic = 0;
  // McFadden 1 - loglik/null_loglik for logit; ordinary R^2 for linear fits.
  double pseudo_r2 = 0;
  long n = 0;
  bool standardized = false;
  int iterations = 0;
  bool converged = true;
  // "model" (inverse information / classical OLS) or "cluster".
  std::string covariance = "model";

  std::size_t k() const noexcept { return coef.size(); }

  std::optional<std::size_t> index_of(std::string_view name) const {
    for (std::size_t j = 0; j < predictor_names.size(); ++j)
      if (predictor_names[j] == name) return j;
    return std::nullopt;
  }

  double coefficient(std::string_view name) const {
    auto j = index_of(name);
    if (!j) throw DomainError("fit has no coefficient '" + std::string(name) + "'");
    return coef[*j];
  }

  double std_error(std::string_view name) const {
    auto j = index_of(name);
    if (!j) throw DomainError("fit has no coefficient '" + std::string(name) + "'");
    return se[*j];
  }

  // Linear predictor for a full row of covariates (same order as coef).
  double linear_predictor(std::span<const double> row) const {
    if (row.size() != coef.size()) throw DomainError("linear_predictor: row size mismatch");
    double eta = 0;
    for (std::size_t j = 0; j < coef.size(); ++j) eta += coef[j] * row[j];
    return eta;
  }
};

struct LogitOptions {
  int max_iter = 100;
  double tol = 1e-8;
  // Tiny ridge on the information matrix; guards numerical singularity only.
  double ridge = 1e-8;
  double separation_bound = 30.0;
};

namespace detail {

inline void check_rank(const Eigen::MatrixXd& x, const std::vector<std::string>& names) {
  if (x.rows() < x.cols())
    throw RankError("design has " + std::to_string(x.rows()) + " rows but " + std::to_string(x.cols()) + " columns");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  qr.setThreshold(1e-10);
  if (qr.rank() < x.cols()) {
    std::string msg = "design is rank deficient (rank " + std::to_string(qr.rank()) + " < " +
                      std::to_string(x.cols()) + ") in columns:";
    for (const auto& n : names) msg += " " + n;
    throw RankError(msg);
  }
}

inline void finish_inference(ModelFit& fit) {
  const auto p = fit.coef.size();
  fit.se.assign(p, 0.0);
  fit.z.assign(p, 0.0);
  fit.p_value.assign(p, 1.0);
  for (std::size_t j = 0; j < p; ++j) {
    const double v = fit.cov(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(j));
    fit.se[j] = v > 0 ? std::sqrt(v) : std::numeric_limits<double>::quiet_NaN();
    fit.z[j] = fit.coef[j] / fit.se[j];
    fit.p_value[j] = stats::normal_two_sided_p(fit.z[j]);
  }
}

inline double logit_loglik(const Eigen::VectorXd& eta, const Eigen::VectorXd& y) {
  double ll = 0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) ll += y(i) * eta(i) - stats::log1pexp(eta(i));
  return ll;
}

inline double bernoulli_null_loglik(const Eigen::VectorXd& y) {
  const double n = static_cast<double>(y.size());
  const double p = y.sum() / n;
  if (p <= 0 || p >= 1) return 0.0;
  return n * (p * std::log(p) + (1 - p) * std::log1p(-p));
}

inline Eigen::VectorXd to_vector(std::span<const double> y) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(y.size()));
  for (std::size_t i = 0; i < y.size(); ++i) v(static_cast<Eigen::Index>(i)) = y[i];
  return v;
}

}  // namespace detail

// Logistic regression by iteratively reweighted least squares (Newton-Raphson
// on the Bernoulli log-likelihood).
inline ModelFit fit_logit(const Design& design, std::span<const double> outcome, const LogitOptions& opt = {}) {
  const Eigen::MatrixXd& x = design.matrix();
  const Eigen::Index n = x.rows(), p = x.cols();
  if (static_cast<Eigen::Index>(outcome.size()) != n) throw DomainError("fit_logit: outcome length mismatch");
  if (n == 0 || p == 0) throw DomainError("fit_logit: empty design");
  for (double v : outcome)
    if (v != 0.0 && v != 1.0) throw DomainError("fit_logit: outcome must be 0/1");
  if (std::all_of(outcome.begin(), outcome.end(), [&](double v) { return v == outcome.front(); }))
    throw SeparationError("fit_logit: all outcomes are identical; the MLE is at infinity");
  detail::check_rank(x, design.names());
  const Eigen::VectorXd y = detail::to_vector(outcome);

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  Eigen::VectorXd eta = x * beta;
  double ll = detail::logit_loglik(eta, y);
  double prev_step = std::numeric_limits<double>::infinity();
  int runaway = 0;
  bool converged = false;
  int iter = 0;
  const Eigen::MatrixXd ridge = opt.ridge * Eigen::MatrixXd::Identity(p, p);

  for (iter = 1; iter <= opt.max_iter; ++iter) {
    Eigen::VectorXd mu(n), w(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      mu(i) = stats::sigmoid(eta(i));
      w(i) = mu(i) * (1 - mu(i));
    }
    const Eigen::MatrixXd info = x.transpose() * w.asDiagonal() * x + ridge;
    const Eigen::VectorXd score = x.transpose() * (y - mu);
    Eigen::VectorXd step = info.ldlt().solve(score);
    if (!step.allFinite()) throw ConvergenceError("fit_logit: non-finite Newton step");

    // Step halving keeps the iteration monotone in the log-likelihood.
    Eigen::VectorXd cand = beta + step;
    Eigen::VectorXd cand_eta = x * cand;
    double cand_ll = detail::logit_loglik(cand_eta, y);
    for (int h = 0; h < 20 && cand_ll < ll - 1e-12; ++h) {
      step *= 0.5;
      cand = beta + step;
      cand_eta = x * cand;
      cand_ll = detail::logit_loglik(cand_eta, y);
    }
    beta = cand;
    eta = cand_eta;
    ll = cand_ll;

    const double step_size = step.cwiseAbs().maxCoeff();
    if (step_size < opt.tol) {
      converged = true;
      break;
    }
    // Under separation the Newton steps stop contracting while coefficients
    // run away; a converging fit contracts quadratically near the optimum.
    if (beta.cwiseAbs().maxCoeff() > opt.separation_bound && step_size >= 0.5 * prev_step) {
      if (++runaway >= 5)
        throw SeparationError("fit_logit: complete or quasi-complete separation (|coef| > " +
                              std::to_string(opt.separation_bound) + " with non-contracting steps)");
    } else {
      runaway = 0;
    }
    prev_step = step_size;
  }
  if (!converged) {
    if (beta.cwiseAbs().maxCoeff() > opt.separation_bound)
      throw SeparationError("fit_logit: coefficients diverging, outcome appears separated");
    throw ConvergenceError("fit_logit: no convergence after " + std::to_string(opt.max_iter) + " iterations");
  }

  Eigen::VectorXd w(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double m = stats::sigmoid(eta(i));
    w(i) = m * (1 - m);
  }
  const Eigen::MatrixXd info = x.transpose() * w.asDiagonal() * x + ridge;

  ModelFit fit;
  fit.family = Family::logit;
  fit.predictor_names = design.names();
  fit.coef.assign(beta.data(), beta.data() + p);
  fit.cov = info.ldlt().solve(Eigen::MatrixXd::Identity(p, p));
  fit.loglik = ll;
  fit.null_loglik = detail::bernoulli_null_loglik(y);
  fit.aic = 2.0 * static_cast<double>(p) - 2.0 * ll;
  fit.pseudo_r2 = fit.null_loglik < 0 ? 1.0 - ll / fit.null_loglik : 0.0;
  fit.n = static_cast<long>(n);
  fit.iterations = iter;
  fit.converged = converged;
  detail::finish_inference(fit);
  return fit;
}

namespace detail {

struct OlsCore {
  Eigen::VectorXd beta;
  Eigen::VectorXd resid;
  Eigen::MatrixXd xtx_inv;
};

inline OlsCore ols_core(const Design& design, const Eigen::VectorXd& y) {
  const Eigen::MatrixXd& x = design.matrix();
  if (y.size() != x.rows()) throw DomainError("ols: outcome length mismatch");
  check_rank(x, design.names());
  const Eigen::MatrixXd xtx = x.transpose() * x;
  OlsCore core;
  core.xtx_inv = xtx.ldlt().solve(Eigen::MatrixXd::Identity(x.cols(), x.cols()));
  core.beta = x.colPivHouseholderQr().solve(y);
  core.resid = y - x * core.beta;
  return core;
}

inline void fill_linear_summary(ModelFit& fit, const Design& design, const Eigen::VectorXd& y, const OlsCore& core) {
  const double n = static_cast<double>(y.size());
  const double ssr = core.resid.squaredNorm();
  const double ybar = y.mean();
  const double sst = design.has_intercept() ? (y.array() - ybar).square().sum() : y.squaredNorm();
  fit.family = Family::linear;
  fit.predictor_names = design.names();
  fit.coef.assign(core.beta.data(), core.beta.data() + core.beta.size());
  fit.loglik = -0.5 * n * (std::log(2.0 * std::numbers::pi * ssr / n) + 1.0);
  const double sst_ll = -0.5 * n * (std::log(2.0 * std::numbers::pi * (y.array() - ybar).square().sum() / n) + 1.0);
  fit.null_loglik = sst_ll;
  fit.aic = 2.0 * static_cast<double>(core.beta.size()) - 2.0 * fit.loglik;
  fit.pseudo_r2 = sst > 0 ? 1.0 - ssr / sst : 0.0;
  fit.n = static_cast<long>(y.size());
  fit.iterations = 0;
}

}  // namespace detail

// Ordinary least squares with the classical covariance s^2 (X'X)^-1.
inline ModelFit fit_ols(const Design& design, std::span<const double> outcome) {
  const Eigen::VectorXd y = detail::to_vector(outcome);
  const auto core = detail::ols_core(design, y);
  ModelFit fit;
  detail::fill_linear_summary(fit, design, y, core);
  const double dof = static_cast<double>(y.size() - design.cols());
  if (dof <= 0) throw DomainError("fit_ols: no residual degrees of freedom");
  fit.cov = core.xtx_inv * (core.resid.squaredNorm() / dof);
  detail::finish_inference(fit);
  return fit;
}

// Sum over clusters of s_j s_j' where s_j is the summed score of cluster j.
// `scores` holds one row per observation.
inline Eigen::MatrixXd cluster_meat(const Eigen::MatrixXd& scores, std::span<const std::string> clusters) {
  if (static_cast<Eigen::Index>(clusters.size()) != scores.rows()) throw DomainError("cluster ids length mismatch");
  std::map<std::string_view, Eigen::VectorXd> sums;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    auto [it, inserted] = sums.try_emplace(clusters[static_cast<std::size_t>(i)], Eigen::VectorXd::Zero(scores.cols()));
    it->second += scores.row(i).transpose();
  }
  if (sums.size() < 2) throw DomainError("cluster-robust covariance needs at least 2 clusters (got " +
                                         std::to_string(sums.size()) + ")");
  Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(scores.cols(), scores.cols());
  for (const auto& [id, s] : sums) meat += s * s.transpose();
  return meat;
}

// OLS point estimates with the cluster sandwich
//   (X'X)^-1 (sum_j X_j' e_j e_j' X_j) (X'X)^-1
// and no small-sample correction.
inline ModelFit fit_ols_cluster(const Design& design, std::span<const double> outcome,
                                std::span<const std::string> clusters) {
  const Eigen::VectorXd y = detail::to_vector(outcome);
  const auto core = detail::ols_core(design, y);
  const Eigen::MatrixXd scores = design.matrix().array().colwise() * core.resid.array();
  const Eigen::MatrixXd meat = cluster_meat(scores, clusters);
  ModelFit fit;
  detail::fill_linear_summary(fit, design, y, core);
  fit.cov = core.xtx_inv * meat * core.xtx_inv;
  fit.cov = 0.5 * (fit.cov + fit.cov.transpose());
  fit.covariance = "cluster";
  detail::finish_inference(fit);
  return fit;
}

// Replaces the covariance of an existing fit (either family) by the
// cluster-robust sandwich evaluated at its coefficients.
inline ModelFit with_cluster_covariance(ModelFit fit, const Design& design, std::span<const double> outcome,
                                        std::span<const std::string> clusters) {
  const Eigen::MatrixXd& x = design.matrix();
  const Eigen::VectorXd y = detail::to_vector(outcome);
  Eigen::VectorXd beta = Eigen::Map<const Eigen::VectorXd>(fit.coef.data(), static_cast<Eigen::Index>(fit.coef.size()));
  const Eigen::VectorXd eta = x * beta;
  Eigen::VectorXd resid(y.size()), w(y.size());
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (fit.family == Family::logit) {
      const double m = stats::sigmoid(eta(i));
      resid(i) = y(i) - m;
      w(i) = m * (1 - m);
    } else {
      resid(i) = y(i) - eta(i);
      w(i) = 1.0;
    }
  }
  const Eigen::MatrixXd bread_inv = x.transpose() * w.asDiagonal() * x;
  const Eigen::MatrixXd bread = bread_inv.ldlt().solve(Eigen::MatrixXd::Identity(x.cols(), x.cols()));
  const Eigen::MatrixXd scores = x.array().colwise() * resid.array();
  fit.cov = bread * cluster_meat(scores, clusters) * bread;
  fit.cov = 0.5 * (fit.cov + fit.cov.transpose());
  fit.covariance = "cluster";
  detail::finish_inference(fit);
  return fit;
}

struct LrtResult {
  double chi2 = 0;
  int df = 0;
  double p = 1;
};

// Likelihood-ratio test of a reduced model nested in a full one.
inline LrtResult lrt(const ModelFit& full, const ModelFit& reduced) {
  const int df = static_cast<int>(full.k()) - static_cast<int>(reduced.k());
  if (df <= 0) throw DomainError("lrt: reduced model is not nested in full model (df = " + std::to_string(df) + ")");
  if (full.loglik < reduced.loglik - 1e-6) throw DomainError("lrt: full model log-likelihood below reduced model");
  LrtResult r;
  r.df = df;
  r.chi2 = std::max(0.0, 2.0 * (full.loglik - reduced.loglik));
  r.p = stats::chi2_sf(r.chi2, df);
  return r;
}

// Same statistic from bare log-likelihoods, e.g. values recovered from
// published AIC tables.
inline LrtResult lrt(double loglik_full, int k_full, double loglik_reduced, int k_reduced) {
  ModelFit f, r;
  f.loglik = loglik_full;
  f.coef.assign(static_cast<std::size_t>(k_full), 0.0);
  r.loglik = loglik_reduced;
  r.coef.assign(static_cast<std::size_t>(k_reduced), 0.0);
  return lrt(f, r);
}

// loglik implied by an AIC and parameter count.
inline double loglik_from_aic(double aic, int k) { return (2.0 * k - aic) / 2.0; }

struct Standardized {
  Design design;
  std::vector<double> mean;  // per column; 0 for the intercept
  std::vector<double> sd;    // per column; 1 for the intercept
};

// Rescales every non-intercept column to mean 0 and sample sd 1.
inline Standardized standardize(const Design& design) {
  Standardized out{design, {}, {}};
  Eigen::MatrixXd& x = out.design.matrix();
  const auto n = x.rows();
  if (n < 2) throw DomainError("standardize: need at least 2 rows");
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const auto& name = design.names()[static_cast<std::size_t>(j)];
    if (name == kIntercept) {
      out.mean.push_back(0.0);
      out.sd.push_back(1.0);
      continue;
    }
    const double m = x.col(j).mean();
    const double var = (x.col(j).array() - m).square().sum() / static_cast<double>(n - 1);
    const double scale = std::max(1.0, x.col(j).cwiseAbs().maxCoeff());
    if (!(var > 1e-24 * scale * scale)) throw DomainError("standardize: column '" + name + "' has zero variance");
    const double s = std::sqrt(var);
    x.col(j) = (x.col(j).array() - m) / s;
    out.mean.push_back(m);
    out.sd.push_back(s);
  }
  return out;
}

// beta_std = beta * sd for each predictor of a fit on unstandardized columns.
inline std::vector<double> standardized_slopes(const ModelFit& raw, const Standardized& st) {
  if (raw.k() != st.sd.size()) throw DomainError("standardized_slopes: column count mismatch");
  std::vector<double> out(raw.k());
  for (std::size_t j = 0; j < raw.k(); ++j) out[j] = raw.coef[j] * st.sd[j];
  return out;
}

struct Interval {
  double low = 0;
  double high = 0;
};

// Wilson score interval for a binomial proportion, clamped to [0, 1].
inline Interval wilson_ci(long k, long n, double z = 1.96) {
  if (n <= 0) throw DomainError("wilson_ci: n must be >= 1");
  if (k < 0 || k > n) throw DomainError("wilson_ci: k must lie in [0, n]");
  const double nn = static_cast<double>(n);
  const double p = static_cast<double>(k) / nn;
  const double denom = 1 + z * z / nn;
  const double centre = (p + z * z / (2 * nn)) / denom;
  const double half = z * std::sqrt(p * (1 - p) / nn + z * z / (4 * nn * nn)) / denom;
  Interval ci{std::clamp(centre - half, 0.0, 1.0), std::clamp(centre + half, 0.0, 1.0)};
  if (k == 0) ci.low = 0.0;
  if (k == n) ci.high = 1.0;
  return ci;
}

struct VifResult {
  std::vector<std::string> names;
  std::vector<double> values;
  std::vector<bool> infinite;

  bool any_flagged() const { return std::find(infinite.begin(), infinite.end(), true) != infinite.end(); }
};

// VIF_j = 1 / (1 - R^2_j), regressing predictor j on all other predictors
// (with an intercept). Perfect collinearity is reported as +inf and flagged.
inline VifResult vif(const Design& design) {
  std::vector<Eigen::Index> cols;
  for (Eigen::Index j = 0; j < design.cols(); ++j)
    if (design.names()[static_cast<std::size_t>(j)] != kIntercept) cols.push_back(j);
  if (cols.size() < 2) throw DomainError("vif: need at least 2 non-intercept predictors");
  const Eigen::MatrixXd& x = design.matrix();
  const Eigen::Index n = x.rows();
  VifResult r;
  for (auto j : cols) {
    Eigen::MatrixXd others(n, static_cast<Eigen::Index>(cols.size()));
    others.col(0).setOnes();
    Eigen::Index c = 1;
    for (auto o : cols)
      if (o != j) others.col(c++) = x.col(o);
    const Eigen::VectorXd target = x.col(j);
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(others);
    qr.setThreshold(1e-12);
    const Eigen::VectorXd fitted = others * qr.solve(target);
    const double sst = (target.array() - target.mean()).square().sum();
    if (sst <= 0) throw DomainError("vif: predictor '" + design.names()[static_cast<std::size_t>(j)] + "' is constant");
    const double r2 = 1.0 - (target - fitted).squaredNorm() / sst;
    r.names.push_back(design.names()[static_cast<std::size_t>(j)]);
    if (1.0 - r2 < 1e-10) {
      r.values.push_back(std::numeric_limits<double>::infinity());
      r.infinite.push_back(true);
    } else {
      r.values.push_back(1.0 / (1.0 - r2));
      r.infinite.push_back(false);
    }
  }
  return r;
}

inline double pearson_r(std::span<const double> x, std::span<const double> y) {
  if (x.size() < 3) throw DomainError("pearson_r: need at least 3 points");
  return stats::pearson(x, y);
}

// Cohen's d = (mean_a - mean_b) / pooled sample sd.
inline double cohens_d(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw DomainError("cohens_d: both groups must be non-empty");
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  if (na + nb < 3) throw DomainError("cohens_d: need at least 3 observations in total");
  const double ma = stats::mean(a), mb = stats::mean(b);
  double ssa = 0, ssb = 0;
  for (double v : a) ssa += (v - ma) * (v - ma);
  for (double v : b) ssb += (v - mb) * (v - mb);
  const double pooled = std::sqrt((ssa + ssb) / (na + nb - 2));
  if (!(pooled > 0)) throw DomainError("cohens_d: pooled standard deviation is zero");
  return (ma - mb) / pooled;
}

}  // namespace abstain::glm
