// Acceptance checks: one PASS/FAIL line per criterion, each under its time
// limit. Exit status is non-zero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "abstain/calib.hpp"
#include "abstain/glm.hpp"
#include "abstain/mediate.hpp"
#include "abstain/policy.hpp"
#include "abstain/steerlab.hpp"
#include "abstain/trialstore.hpp"
#include "bandness_generators.hpp"

using namespace abstain;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

bool within(double v, double target, double tol) { return std::abs(v - target) <= tol; }

int failures = 0;

void criterion(int id, const std::string& name, double limit_s, const std::function<void(Outcome&)>& body) {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(o);
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail << " [exception: " << e.what() << "]";
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (secs >= limit_s) {
    o.pass = false;
    o.detail << " [over time limit " << limit_s << " s]";
  }
  if (!o.pass) ++failures;
  std::cout << (o.pass ? "PASS" : "FAIL") << "  " << id << ". " << name << " (" << fmt(secs, 2) << " s / " << limit_s
            << " s):" << o.detail.str() << std::endl;
}

// Rows for the policy fits: the target run's trials with Phase 1 confidence.
std::vector<policy::PolicyRow> rows_for(const PhaseRun& run, const PhaseRun& p1) {
  std::vector<FeatureRow> feats;
  std::set<std::string> seen;
  for (const auto& t : run.trials)
    if (seen.insert(t.item_id).second) feats.push_back(FeatureRow{t.item_id});
  return policy::build_policy_table(join_features(run, feats), &p1);
}

// ---- 5: mediation path generator ----------------------------------------

struct PathGen {
  double a1 = 0.1, a2 = -0.02, b1 = -5.0, b2 = 20.0, c_prime = -0.1, intercept = -0.5;
  double item_sd = 0.05, m1_sd = 0.05, m2_sd = 0.01;
};

mediate::PathData generate_paths(const PathGen& g, std::size_t items, std::uint64_t seed) {
  static const std::vector<double> alphas = {-2, -1.5, -1, -0.5, 0.5, 1, 1.5, 2};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> u;
  mediate::PathData d;
  for (std::size_t i = 0; i < items; ++i) {
    const double item = g.item_sd * nd(rng);
    for (double x : alphas) {
      const double m1 = g.a1 * x + item + g.m1_sd * nd(rng);
      const double m2 = g.a2 * x + g.m2_sd * nd(rng);
      const double eta = g.intercept + g.c_prime * x + g.b1 * m1 + g.b2 * m2;
      d.x.push_back(x);
      d.m1.push_back(m1);
      d.m2.push_back(m2);
      d.y.push_back(u(rng) < 1.0 / (1.0 + std::exp(-eta)) ? 1.0 : 0.0);
      d.cluster.push_back("item" + std::to_string(i));
    }
  }
  return d;
}

// ---- 6: miscalibrated classifier ----------------------------------------

std::vector<calib::CalibrationItem> miscalibrated(double tau_true, std::size_t n, int options, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0, 1);
  std::uniform_real_distribution<double> u;
  std::vector<calib::CalibrationItem> items(n);
  for (auto& it : items) {
    it.logits.resize(static_cast<std::size_t>(options));
    for (auto& z : it.logits) z = nd(rng) * 6.0;
    // True probabilities softmax(z / tau_true), computed here without the library.
    std::vector<double> p(it.logits.size());
    double zmax = *std::max_element(it.logits.begin(), it.logits.end()), total = 0;
    for (std::size_t k = 0; k < p.size(); ++k) total += p[k] = std::exp((it.logits[k] - zmax) / tau_true);
    double r = u(rng) * total, acc = 0;
    it.correct_option = options - 1;
    for (int k = 0; k < options; ++k) {
      acc += p[static_cast<std::size_t>(k)];
      if (r < acc) {
        it.correct_option = k;
        break;
      }
    }
  }
  return items;
}

// Rank-sum AUROC over pairs, written out directly as an oracle.
double pairwise_auroc(const std::vector<double>& conf, const std::vector<bool>& correct) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < conf.size(); ++i)
    if (correct[i])
      for (std::size_t j = 0; j < conf.size(); ++j)
        if (!correct[j]) {
          pairs += 1;
          wins += conf[i] > conf[j] ? 1.0 : conf[i] == conf[j] ? 0.5 : 0.0;
        }
  return wins / pairs;
}

// ---- 7: derivative-free logistic MLE ------------------------------------

struct Instance {
  std::vector<std::vector<double>> x;  // rows, without intercept
  std::vector<double> y;
};

double loglik(const Instance& d, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < d.y.size(); ++i) {
    double eta = b[0];
    for (std::size_t j = 0; j < d.x[i].size(); ++j) eta += b[j + 1] * d.x[i][j];
    // log(1 + e^eta), stable
    const double l1pe = eta > 0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta));
    s += d.y[i] * eta - l1pe;
  }
  return s;
}

// Exhaustive grid (step 1 on [-6, 6]) followed by compass search down to a
// step of 1e-8 over every direction in {-1, 0, 1}^p.
std::pair<std::vector<double>, double> grid_search_mle(const Instance& d) {
  const std::size_t p = d.x.front().size() + 1;
  std::vector<double> best(p, 0.0), cur(p);
  double fb = loglik(d, best);
  const int steps = 13;
  std::vector<int> idx(p, 0);
  while (true) {
    for (std::size_t j = 0; j < p; ++j) cur[j] = -6.0 + 1.0 * idx[j];
    const double f = loglik(d, cur);
    if (f > fb) {
      fb = f;
      best = cur;
    }
    std::size_t j = 0;
    while (j < p && ++idx[j] == steps) idx[j++] = 0;
    if (j == p) break;
  }
  std::vector<std::vector<int>> dirs;
  std::vector<int> dv(p, -1);
  while (true) {
    if (std::any_of(dv.begin(), dv.end(), [](int v) { return v != 0; })) dirs.push_back(dv);
    std::size_t j = 0;
    while (j < p && ++dv[j] == 2) dv[j++] = -1;
    if (j == p) break;
  }
  for (double step = 0.5; step > 1e-8; step /= 2) {
    bool improved = true;
    while (improved) {
      improved = false;
      for (const auto& dir : dirs) {
        for (std::size_t j = 0; j < p; ++j) cur[j] = best[j] + step * dir[j];
        const double f = loglik(d, cur);
        if (f > fb) {
          fb = f;
          best = cur;
          improved = true;
        }
      }
    }
  }
  return {best, fb};
}

}  // namespace

int main() {
  std::cout << "acceptance: " << default_workers() << " worker threads" << std::endl;

  criterion(1, "derived-parameter arithmetic", 1.0, [](Outcome& o) {
    const auto gemma = policy::derive_phase2_params(2.692, -5.575, -0.837, 0.66);
    const auto deepseek = policy::derive_phase2_params(4.364, -5.461, -0.481, 0.65);
    const auto qwen2 = policy::derive_phase2_params(3.017, -4.510, 0.041, 0.646);
    o.detail << " gemma T50 " << fmt(gemma.t50, 4) << " temp " << fmt(gemma.policy_temperature, 4) << "; deepseek T50 "
             << fmt(deepseek.t50, 4) << "; qwen T50 " << fmt(qwen2.t50, 4);
    o.require(within(gemma.t50, 0.384, 0.002), "gemma T50");
    o.require(within(gemma.policy_temperature, 0.179, 0.001), "gemma temperature");
    o.require(within(deepseek.t50, 0.742, 0.002), "deepseek T50");
    o.require(within(qwen2.t50, 0.675, 0.002), "qwen phase 2 T50");

    const auto g4 = policy::derive_phase4_params(-0.058, 0.060, -0.040);
    const auto q4 = policy::derive_phase4_params(1.785, 0.034, -0.051);
    o.detail << "; gemma P4 scale " << fmt(*g4.scale, 3) << " shift " << fmt(*g4.shift, 2) << " temp "
             << fmt(g4.policy_temperature, 2) << "; qwen P4 scale " << fmt(*q4.scale, 3) << " shift " << fmt(*q4.shift, 2)
             << " temp " << fmt(q4.policy_temperature, 2);
    o.require(within(*g4.scale, 0.667, 0.02), "gemma scale");
    o.require(within(*g4.shift, 0.97, 0.2), "gemma shift");
    o.require(within(g4.policy_temperature, 16.7, 0.2), "gemma P4 temperature");
    o.require(within(*q4.scale, 1.50, 0.02), "qwen scale");
    o.require(within(*q4.shift, -52.5, 0.5), "qwen shift");
    o.require(within(q4.policy_temperature, 29.4, 0.2), "qwen P4 temperature");
  });

  criterion(2, "mediation arithmetic", 1.0, [](Outcome& o) {
    const double i1 = 0.107 * -5.15, i2 = -0.0038 * 56.6;
    const auto p = mediate::proportion_mediated(i1, i2, -0.824);
    o.detail << " indirect1 " << fmt(i1) << " indirect2 " << fmt(i2) << " proportions " << fmt(100 * p.p1, 1) << "% / "
             << fmt(100 * p.p2, 1) << "%";
    o.require(within(i1, -0.551, 0.005), "indirect1");
    o.require(within(i2, -0.215, 0.007), "indirect2");
    o.require(within(100 * p.p1, 66.9, 1.5) && within(100 * p.p1, 67.1, 1.5), "proportion 1");
    o.require(within(100 * p.p2, 26.1, 1.5) && within(100 * p.p2, 26.2, 1.5), "proportion 2");
  });

  criterion(3, "parameter recovery", 60.0, [](Outcome& o) {
    int hits = 0, t50_hits = 0, tau_hits = 0;
    const int runs = 50;
    for (int r = 0; r < runs; ++r) {
      const steerlab::Agent a(steerlab::AgentConfig::standard(1000 + static_cast<std::uint64_t>(r)));
      const auto items = steerlab::make_items(a.config(), 1000);
      const auto p1 = steerlab::simulate_phase(a, items, Phase::P1, {});
      steerlab::SimulateOptions so;
      so.seed = 1;
      const auto p2 = steerlab::simulate_phase(a, items, Phase::P2, so);
      const auto rows = rows_for(p2.run, p1.run);
      const auto fit = glm::fit_logit(policy::design_for(rows, {policy::Term::confidence}),
                                      policy::outcome(rows, &policy::PolicyRow::abstained));
      const auto params = policy::derive_phase2_params(fit, 0.0);
      const bool t_ok = within(params.t50, 0.77, 0.03), s_ok = within(params.policy_temperature, 0.20, 0.04);
      t50_hits += t_ok;
      tau_hits += s_ok;
      hits += t_ok && s_ok;
    }
    o.detail << " phase 2: " << hits << "/" << runs << " runs within tolerance (t50 " << t50_hits << ", tau " << tau_hits << ")";
    o.require(hits >= 45, "phase 2 recovery rate below 90%");

    const steerlab::Agent a(steerlab::AgentConfig::standard(12));
    const auto items = steerlab::make_items(a.config(), 1000);
    const auto p1 = steerlab::simulate_phase(a, items, Phase::P1, {});
    std::vector<double> grid;
    for (int t = 0; t <= 100; t += 10) grid.push_back(t);
    const auto p4 = steerlab::simulate_phase4(a, items, grid, 2);
    const auto rows = rows_for(p4, p1.run);
    const auto fit = glm::fit_logit(policy::design_for(rows, {policy::Term::threshold, policy::Term::confidence_pct}),
                                    policy::outcome(rows, &policy::PolicyRow::abstained));
    const auto params = policy::derive_phase4_params(fit);
    o.detail << "; phase 4 (n = " << rows.size() << "): scale " << fmt(*params.scale, 3) << " shift " << fmt(*params.shift, 2);
    o.require(rows.size() == 11000, "phase 4 sample size");
    o.require(*params.scale >= 0.95 && *params.scale <= 1.05, "phase 4 scale");
    o.require(std::abs(*params.shift) < 2.0, "phase 4 shift");
  });

  criterion(4, "steering causality", 120.0, [](Outcome& o) {
    // Confidence-only steering: the vector acts on the confidence direction,
    // the policy is fixed. Ground truth is the mediated fraction of the
    // generator's population, estimated on 80,000 items; the test sample is
    // a disjoint set of 20,000.
    const auto cfg = steerlab::AgentConfig::steering_tuned();
    const steerlab::Agent a(cfg);
    steerlab::SweepOptions so;
    so.layers = {4, 5, 6, 7};
    const auto sample = steerlab::make_items(cfg, 20000, "sample");
    const auto e = steerlab::run_steering_experiment(a, steerlab::make_items(cfg, 500, "contrast"), sample, so);

    std::vector<double> x, y;
    bool monotone = true;
    for (const auto& [alpha, rate] : steerlab::abstention_by_alpha(e.sweep)) {
      if (!y.empty() && !(rate < y.back())) monotone = false;
      x.push_back(alpha);
      y.push_back(rate);
    }
    const double r = glm::pearson_r(x, y);
    const auto rep = mediate::analyze(e.sweep.mediation, false, std::nullopt);
    const auto truth_sweep = steerlab::steering_sweep(a, steerlab::make_items(cfg, 80000, "population"), e.vector, so);
    const auto truth = mediate::analyze(truth_sweep.mediation, false, std::nullopt);
    const double p1 = rep.proportions ? rep.proportions->p1 : std::nan("");
    const double p1_truth = truth.proportions ? truth.proportions->p1 : std::nan("");
    o.detail << " abstention " << fmt(y.front(), 3) << " (alpha -2) -> " << fmt(y.back(), 3) << " (alpha 2), corr " << fmt(r, 3)
             << "; M1 share " << fmt(100 * p1, 1) << "% vs generator " << fmt(100 * p1_truth, 1) << "%";
    o.require(monotone, "abstention not monotone in alpha");
    o.require(r <= -0.95, "corr(alpha, abstention) above -0.95");
    o.require(p1 >= 0.60, "M1 share below 60%");
    o.require(std::abs(p1 - p1_truth) <= 0.10, "M1 share more than 10 points from the generator");
  });

  criterion(5, "bootstrap coverage", 300.0, [](Outcome& o) {
    const PathGen g;
    const double truth1 = g.a1 * g.b1, truth2 = g.a2 * g.b2;
    const int reps = 50;
    int cover1 = 0, cover2 = 0;
    for (int r = 0; r < reps; ++r) {
      const auto d = generate_paths(g, 200, 500 + static_cast<std::uint64_t>(r));
      mediate::BootstrapOptions bo;
      bo.B = 500;
      bo.seed = 9000 + static_cast<std::uint64_t>(r);
      const auto res = mediate::bootstrap_ci(d, bo);
      cover1 += res.ci1.low <= truth1 && truth1 <= res.ci1.high;
      cover2 += res.ci2.low <= truth2 && truth2 <= res.ci2.high;
    }
    o.detail << " indirect1 covered " << cover1 << "/" << reps << ", indirect2 covered " << cover2 << "/" << reps;
    o.require(cover1 >= 45, "indirect1 coverage below 90%");
    o.require(cover2 >= 45, "indirect2 coverage below 90%");

    const auto d = generate_paths(g, 200, 77);
    mediate::BootstrapOptions bo;
    bo.B = 500;
    bo.seed = 4242;
    bo.workers = 1;
    const auto one = mediate::bootstrap_ci(d, bo);
    bo.workers = std::max(2u, default_workers());
    const auto many = mediate::bootstrap_ci(d, bo);
    const bool identical = one.ci1.low == many.ci1.low && one.ci1.high == many.ci1.high && one.ci2.low == many.ci2.low &&
                           one.ci2.high == many.ci2.high && one.draws1 == many.draws1 && one.draws2 == many.draws2;
    o.detail << "; 1 vs " << bo.workers << " workers " << (identical ? "bit-identical" : "differ");
    o.require(identical, "CIs depend on worker count");
  });

  criterion(6, "calibration", 10.0, [](Outcome& o) {
    const auto items = miscalibrated(5.0, 6000, 4, 42);
    const auto res = calib::fit_temperature(items);
    o.detail << " tau " << fmt(res.tau_scale, 3) << " (true 5), ECE " << fmt(res.ece_before, 4) << " -> " << fmt(res.ece_after, 4);
    o.require(std::abs(res.tau_scale - 5.0) <= 0.15 * 5.0, "tau outside 15%");
    o.require(res.ece_after * 5.0 <= res.ece_before, "ECE reduced less than 5x");

    // Invariance checked where it holds exactly: two-option logits, whose
    // max-probability is monotone in the logit margin for every tau.
    const auto two = miscalibrated(5.0, 3000, 2, 43);
    const auto res2 = calib::fit_temperature(two);
    std::vector<double> conf;
    std::vector<bool> correct;
    calib::confidences_at(two, 1.0, conf, correct);
    const double before = pairwise_auroc(conf, correct);
    calib::confidences_at(two, res2.tau_scale, conf, correct);
    const double after = pairwise_auroc(conf, correct);
    o.detail << "; two-option AUROC " << fmt(before, 6) << " -> " << fmt(after, 6) << " (library " << fmt(*res2.auroc, 6) << ")";
    o.require(std::abs(before - after) <= 1e-9, "AUROC changed under recalibration");
    o.require(std::abs(*res2.auroc - after) <= 1e-9, "library AUROC disagrees with pairwise oracle");
  });

  criterion(7, "GLM oracle equivalence", 30.0, [](Outcome& o) {
    std::mt19937_64 rng(2024);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> u;
    std::uniform_int_distribution<int> pick_n(20, 50), pick_p(1, 3);
    int accepted = 0, rejected = 0;
    double worst = 0;
    while (accepted < 20) {
      Instance inst;
      const int n = pick_n(rng), p = pick_p(rng);
      std::vector<double> beta(static_cast<std::size_t>(p) + 1);
      for (auto& b : beta) b = 0.8 * nd(rng);
      for (int i = 0; i < n; ++i) {
        std::vector<double> row(static_cast<std::size_t>(p));
        double eta = beta[0];
        for (int j = 0; j < p; ++j) eta += beta[static_cast<std::size_t>(j) + 1] * (row[static_cast<std::size_t>(j)] = nd(rng));
        inst.x.push_back(row);
        inst.y.push_back(u(rng) < 1.0 / (1.0 + std::exp(-eta)) ? 1.0 : 0.0);
      }
      glm::Design d(n);
      for (int j = 0; j < p; ++j) {
        std::vector<double> col(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) col[static_cast<std::size_t>(i)] = inst.x[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        d.add("x" + std::to_string(j + 1), col);
      }
      glm::ModelFit fit;
      try {
        fit = glm::fit_logit(d, inst.y);
      } catch (const DomainError&) {
        ++rejected;  // separated or degenerate draw: no finite MLE to compare
        continue;
      }
      const auto [b, ll] = grid_search_mle(inst);
      if (std::any_of(b.begin(), b.end(), [](double v) { return std::abs(v) > 8.0; })) {
        ++rejected;  // near-separated: optimum far outside the grid
        continue;
      }
      ++accepted;
      worst = std::max(worst, std::abs(fit.loglik - ll));
      o.require(std::abs(fit.loglik - ll) <= 1e-6, "instance " + std::to_string(accepted) + " loglik differs by " + fmt(fit.loglik - ll, 9));
    }
    o.detail << " 20 instances (" << rejected << " separated draws redrawn), max |loglik diff| " << worst;

    // Two-cluster fixture, sandwich written out by hand.
    const std::vector<double> x = {0, 1, 2, 1, 3, 4}, y = {1, 2, 2, 3, 5, 4};
    const std::vector<std::string> cl = {"A", "A", "A", "B", "B", "B"};
    double sx = 0, sxx = 0, sy = 0, sxy = 0;
    for (int i = 0; i < 6; ++i) sx += x[i], sxx += x[i] * x[i], sy += y[i], sxy += x[i] * y[i];
    const double det = 6 * sxx - sx * sx;
    const double b1 = (6 * sxy - sx * sy) / det, b0 = (sy - b1 * sx) / 6;
    const double inv[2][2] = {{sxx / det, -sx / det}, {-sx / det, 6 / det}};
    double meat[2][2] = {{0, 0}, {0, 0}};
    for (int g = 0; g < 2; ++g) {
      double s0 = 0, s1 = 0;
      for (int i = 3 * g; i < 3 * g + 3; ++i) {
        const double e = y[i] - b0 - b1 * x[i];
        s0 += e;
        s1 += x[i] * e;
      }
      meat[0][0] += s0 * s0, meat[0][1] += s0 * s1, meat[1][0] += s1 * s0, meat[1][1] += s1 * s1;
    }
    double hand[2][2];
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 2; ++c) {
        hand[r][c] = 0;
        for (int k = 0; k < 2; ++k)
          for (int l = 0; l < 2; ++l) hand[r][c] += inv[r][k] * meat[k][l] * inv[l][c];
      }
    glm::Design d(6);
    d.add("x", x);
    const auto fit = glm::fit_ols_cluster(d, y, cl);
    double diff = 0;
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 2; ++c) diff = std::max(diff, std::abs(fit.cov(r, c) - hand[r][c]));
    // Exact rational values of the same matrices.
    const double frozen[2][2] = {{0.23524117502888553, -0.03717752179545534}, {-0.03717752179545534, 0.00587553657084836}};
    double diff_frozen = 0;
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 2; ++c) diff_frozen = std::max(diff_frozen, std::abs(fit.cov(r, c) - frozen[r][c]));
    o.detail << "; sandwich max diff " << diff << " (hand), " << diff_frozen << " (exact)";
    o.require(diff <= 1e-10 && diff_frozen <= 1e-10, "cluster sandwich");
  });

  criterion(8, "bandness dichotomy", 10.0, [](Outcome& o) {
    const auto pre = policy::bandness_index(bandness_gen::pre_decisional(11));
    const auto post = policy::bandness_index(bandness_gen::post_decisional(11));
    o.detail << " pre-decisional " << fmt(pre.index, 3) << " (r_C " << fmt(pre.r_conf, 3) << ", r_T " << fmt(pre.r_threshold, 3)
             << "), post-decisional " << fmt(post.index, 3) << " (r_C " << fmt(post.r_conf, 3) << ", r_T "
             << fmt(post.r_threshold, 3) << ")";
    o.require(pre.index < 0.15, "pre-decisional index not below 0.15");
    o.require(post.index > 0.6, "post-decisional index not above 0.6");
  });

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
