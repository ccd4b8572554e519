#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "abstain/calib.hpp"
#include "abstain/errors.hpp"
#include "abstain/features.hpp"
#include "abstain/glm.hpp"
#include "abstain/mediate.hpp"
#include "abstain/parallel.hpp"
#include "abstain/policy.hpp"
#include "abstain/steerlab.hpp"
#include "abstain/trialstore.hpp"

// Command-line driver: calibrate, simulate, fit-phase2, fit-phase4, steer,
// mediate, features, report.
namespace abstain::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitValidation = 2;

// ----- formatting ------------------------------------------------------------

inline std::string num(double v) { return std::isfinite(v) ? abstain::detail::format_double(v) : std::string("NA"); }

inline std::string fixed(double v, int digits) {
  if (!std::isfinite(v)) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  std::string s = buf;
  if (s.find_first_not_of("-0.") == std::string::npos && s.front() == '-') s.erase(0, 1);
  return s;
}

inline std::string p_text(double p) {
  if (!std::isfinite(p)) return "NA";
  return p < 0.001 ? "< 0.001" : fixed(p, 3);
}

inline json nullable(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline double opt_num(const json& j, const char* key) {
  return j.contains(key) && !j.at(key).is_null() ? j.at(key).get<double>() : std::numeric_limits<double>::quiet_NaN();
}

// ----- heatmap ---------------------------------------------------------------

// Threshold x confidence-bin abstention rates as CSV with empty cells as NA,
// followed by a bandness footer. Throws on a degenerate grid.
inline policy::Bandness emit_heatmap_data(const std::vector<policy::PolicyRow>& rows, std::ostream& out) {
  const auto grid = policy::abstention_grid(rows);
  const auto band = policy::bandness_index(grid);
  out << "threshold";
  for (int c = 0; c < policy::kConfidenceBins; ++c)
    out << ',' << fixed(c / double(policy::kConfidenceBins), 1) << '-' << fixed((c + 1) / double(policy::kConfidenceBins), 1);
  out << '\n';
  for (std::size_t t = 0; t < grid.thresholds.size(); ++t) {
    out << grid.thresholds[t];
    for (std::size_t c = 0; c < static_cast<std::size_t>(policy::kConfidenceBins); ++c) {
      const auto r = grid.rate(t, c);
      out << ',' << (r ? num(*r) : std::string("NA"));
    }
    out << '\n';
  }
  out << "# bandness_index=" << num(band.index) << " r_conf=" << num(band.r_conf) << " r_threshold=" << num(band.r_threshold)
      << " cells=" << band.cells << '\n';
  return band;
}

// ----- suites ----------------------------------------------------------------

inline std::string term_name(policy::Term t) {
  switch (t) {
    case policy::Term::confidence: return "confidence";
    case policy::Term::confidence_pct: return "confidence_pct";
    case policy::Term::difficulty: return "difficulty";
    case policy::Term::rag: return "rag";
    case policy::Term::embeddings: return "embeddings";
    case policy::Term::threshold: return "threshold";
  }
  return "?";
}

inline json params_json(const policy::DecisionParams& p) {
  json j{{"stage", p.stage == policy::Stage::phase2 ? "phase2" : "phase4"},
         {"t50", nullable(p.t50)},
         {"policy_temperature", nullable(p.policy_temperature)}};
  if (p.scale) j["scale"] = nullable(*p.scale);
  if (p.shift) j["shift"] = nullable(*p.shift);
  if (p.difficulty_adjustment) j["difficulty_adjustment"] = nullable(*p.difficulty_adjustment);
  return j;
}

inline json suite_json(const policy::Suite& s) {
  json models = json::array();
  for (const auto& e : s.models) {
    json terms = json::array();
    for (auto t : e.spec.terms) terms.push_back(term_name(t));
    json m{{"name", e.spec.name}, {"terms", terms}};
    if (e.fit) m["fit"] = *e.fit;
    else m["error"] = e.error;
    models.push_back(std::move(m));
  }
  json comps = json::array();
  for (const auto& c : s.comparisons) {
    json cj{{"model", c.model}, {"baseline", c.baseline}, {"fitted", c.delta_aic.has_value()}};
    if (c.delta_aic) cj["delta_aic"] = *c.delta_aic;
    if (c.lrt) cj["lrt"] = {{"chi2", c.lrt->chi2}, {"df", c.lrt->df}, {"p", c.lrt->p}};
    comps.push_back(std::move(cj));
  }
  return json{{"models", models}, {"comparisons", comps}};
}

// Comparison table: model, AIC, pseudo-R2 and the LRT against its baseline.
inline void write_comparison_csv(const policy::Suite& s, std::ostream& out) {
  out << "model,baseline,status,aic,baseline_aic,delta_aic,pseudo_r2,lr_chi2,df,p_value\n";
  for (const auto& c : s.comparisons) {
    const auto& m = s.entry(c.model);
    const auto& b = s.entry(c.baseline);
    const bool ok = m.fit && b.fit;
    out << c.model << ',' << c.baseline << ',' << (ok ? "ok" : "not fitted") << ',' << (m.fit ? num(m.fit->aic) : "NA") << ','
        << (b.fit ? num(b.fit->aic) : "NA") << ',' << (c.delta_aic ? num(*c.delta_aic) : "NA") << ','
        << (m.fit ? num(m.fit->pseudo_r2) : "NA") << ',' << (c.lrt ? num(c.lrt->chi2) : "NA") << ','
        << (c.lrt ? std::to_string(c.lrt->df) : "NA") << ',' << (c.lrt ? num(c.lrt->p) : "NA") << '\n';
  }
}

// ----- Markdown reports ------------------------------------------------------

inline std::string fit_table_markdown(const glm::ModelFit& f) {
  std::ostringstream os;
  os << "| Predictor | Coefficient | SE | z | p |\n|---|---:|---:|---:|---:|\n";
  for (std::size_t j = 0; j < f.k(); ++j)
    os << "| " << f.predictor_names[j] << " | " << fixed(f.coef[j], 4) << " | " << fixed(f.se[j], 4) << " | "
       << fixed(f.z[j], 2) << " | " << p_text(f.p_value[j]) << " |\n";
  os << "\n" << glm::to_string(f.family) << " model, n = " << f.n << ", log-likelihood = " << fixed(f.loglik, 2)
     << ", AIC = " << fixed(f.aic, 1) << ", " << (f.family == glm::Family::logit ? "pseudo-R2" : "R2") << " = "
     << fixed(f.pseudo_r2, 3) << (f.standardized ? ", standardized predictors" : "")
     << (f.covariance == "cluster" ? ", cluster-robust SE" : "") << "\n";
  return os.str();
}

inline std::string suite_markdown(const json& s) {
  std::ostringstream os;
  for (const auto& m : s.at("models")) {
    os << "### " << m.at("name").get<std::string>() << "\n\n";
    if (m.contains("fit")) os << fit_table_markdown(m.at("fit").get<glm::ModelFit>()) << "\n";
    else os << "not fitted: " << m.value("error", std::string()) << "\n\n";
  }
  os << "### Model comparisons\n\n| Model | Baseline | Delta AIC | LR chi2 | df | p |\n|---|---|---:|---:|---:|---:|\n";
  for (const auto& c : s.at("comparisons")) {
    os << "| " << c.at("model").get<std::string>() << " | " << c.at("baseline").get<std::string>() << " | ";
    if (!c.value("fitted", false)) {
      os << "not fitted | | | |\n";
      continue;
    }
    os << fixed(c.at("delta_aic").get<double>(), 1) << " | ";
    if (c.contains("lrt"))
      os << fixed(c["lrt"].at("chi2").get<double>(), 2) << " | " << c["lrt"].at("df").get<int>() << " | "
         << p_text(c["lrt"].at("p").get<double>()) << " |\n";
    else
      os << "NA | NA | NA |\n";
  }
  if (s.contains("derived")) {
    os << "\n### Derived parameters\n\n| Source model | T50 | Policy temperature | Scale | Shift |\n|---|---:|---:|---:|---:|\n";
    for (const auto& [name, p] : s["derived"].items())
      os << "| " << name << " | " << fixed(opt_num(p, "t50"), 3) << " | " << fixed(opt_num(p, "policy_temperature"), 3)
         << " | " << fixed(opt_num(p, "scale"), 3) << " | " << fixed(opt_num(p, "shift"), 2) << " |\n";
  }
  return os.str();
}

inline std::string mediation_markdown(const json& r) {
  std::ostringstream os;
  os << "| Path | Estimate | SE |\n|---|---:|---:|\n";
  for (const char* k : {"a1", "a2", "b1", "b2", "c_prime", "c", "gamma_difficulty"}) {
    if (!r.contains(k)) continue;
    os << "| " << k << " | " << fixed(r[k].at("estimate").get<double>(), 4) << " | " << fixed(r[k].at("se").get<double>(), 4)
       << " |\n";
  }
  os << "\n| Indirect effect | Estimate | 95% CI | Proportion of c |\n|---|---:|---|---:|\n";
  for (int k = 1; k <= 2; ++k) {
    const std::string key = "indirect" + std::to_string(k);
    std::string ci = "not bootstrapped";
    if (r.contains("bootstrap")) {
      const auto& b = r["bootstrap"].at(key + "_ci");
      ci = "[" + fixed(b.at(0).get<double>(), 4) + ", " + fixed(b.at(1).get<double>(), 4) + "]";
    }
    std::string prop = "NA";
    if (r.contains("proportions")) prop = fixed(100 * r["proportions"].at("p" + std::to_string(k)).get<double>(), 1) + "%";
    os << "| M" << k << " | " << fixed(r.at(key).get<double>(), 4) << " | " << ci << " | " << prop << " |\n";
  }
  os << "\nrows = " << r.at("n_rows").get<long>() << ", items = " << r.at("n_items").get<long>()
     << ", corr(M1, M2) = " << fixed(opt_num(r, "corr_m1_m2"), 3) << "\n";
  return os.str();
}

// ----- config ----------------------------------------------------------------

// Flat key=value lines; '#' starts a comment.
inline std::vector<std::pair<std::string, std::string>> read_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return std::string();
    return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("config: expected key=value", lineno);
    auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ParseError("config: empty key", lineno);
    out.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return out;
}

// ----- subcommand bodies -----------------------------------------------------

struct Common {
  std::string out_dir;
  unsigned workers = default_workers();
};

inline fs::path prepare_out(const std::string& dir) {
  fs::path p(dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
  return p;
}

inline void write_text(const fs::path& path, const std::string& text) {
  auto out = open_for_write(path);
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}


// calibrate
struct CalibrateArgs {
  std::string trials;
  int bins = 20;
  std::string binning = "width";
};

inline int cmd_calibrate(const CalibrateArgs& a, const Common& c, std::ostream& out) {
  const auto run = load_trials(a.trials);
  std::vector<calib::CalibrationItem> items;
  for (const auto& t : run.trials) {
    if (!t.logits) throw ValidationError("logits: trial " + t.item_id + " has no raw logits to calibrate");
    items.push_back({*t.logits, t.correct_option - 1});
  }
  calib::FitOptions fo;
  fo.bins.n_bins = a.bins;
  if (a.binning == "mass") fo.bins.binning = calib::Binning::equal_mass;
  else if (a.binning != "width") throw ValidationError("binning: expected width or mass");
  const auto res = calib::fit_temperature(items, fo);

  const auto dir = prepare_out(c.out_dir);
  json j{{"tau_scale", res.tau_scale}, {"ece_before", res.ece_before}, {"ece_after", res.ece_after},
         {"auroc", res.auroc ? json(*res.auroc) : json(nullptr)}, {"n", items.size()}, {"warnings", res.warnings}};
  save_json(j, dir / "calibration.json");
  std::ostringstream rel;
  rel << "low,high,mean_conf,accuracy,count\n";
  for (const auto& b : res.bin_table)
    rel << num(b.low) << ',' << num(b.high) << ',' << (b.count ? num(b.mean_conf) : "NA") << ','
        << (b.count ? num(b.accuracy) : "NA") << ',' << b.count << '\n';
  write_text(dir / "reliability.csv", rel.str());

  PhaseRun cal = run;
  for (auto& t : cal.trials) {
    t.option_probs = calib::scaled_softmax(*t.logits, res.tau_scale);
    t.calibrated = true;
  }
  save_trials(cal, dir / (fs::path(a.trials).stem().string() + ".calibrated.jsonl"));
  out << "tau_scale " << fixed(res.tau_scale, 4) << "  ECE " << fixed(res.ece_before, 4) << " -> " << fixed(res.ece_after, 4)
      << '\n';
  for (const auto& w : res.warnings) out << "warning: " << w << '\n';
  return kExitOk;
}

// simulate
struct SimulateArgs {
  std::int64_t seed = 0;
  std::size_t items = 500;
  std::string profile = "standard";
  int difficulty_seeds = 10;
  double difficulty_temperature = 1.0;
  std::string thresholds = "0,10,20,30,40,50,60,70,80,90,100";
  std::optional<double> t50, tau, p4_scale, p4_shift, tau_true;
};

inline steerlab::AgentConfig profile_config(const std::string& name, std::uint64_t seed) {
  if (name == "standard") return steerlab::AgentConfig::standard(seed);
  if (name == "paper-like") return steerlab::AgentConfig::paper_like(seed);
  if (name == "steering-tuned") return steerlab::AgentConfig::steering_tuned(seed);
  throw ValidationError("profile: expected standard, paper-like or steering-tuned, got '" + name + "'");
}

template <class T>
std::vector<T> parse_list(const std::string& s, const char* what) {
  std::vector<T> out;
  std::stringstream ss(s);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    std::istringstream is(cell);
    T v;
    if (!(is >> v) || !(is >> std::ws).eof()) throw ValidationError(std::string(what) + ": cannot parse '" + cell + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ValidationError(std::string(what) + ": empty list");
  return out;
}

// Synthetic question embeddings with three retrieved-context embeddings each.
inline std::vector<features::ItemEmbedding> synthetic_embeddings(const std::vector<steerlab::AgentItem>& items,
                                                                 std::uint64_t seed, int dim = 32) {
  std::vector<features::ItemEmbedding> out;
  for (const auto& it : items) {
    std::mt19937_64 rng(derive_seed(derive_seed(seed, "embeddings"), it.item_id));
    std::normal_distribution<double> n01;
    features::ItemEmbedding e;
    e.item_id = it.item_id;
    e.embedding.resize(static_cast<std::size_t>(dim));
    for (auto& v : e.embedding) v = n01(rng);
    for (int k = 0; k < 3; ++k) {
      auto ctx = e.embedding;
      for (auto& v : ctx) v += 1.5 * n01(rng);
      e.context_embeddings.push_back(std::move(ctx));
    }
    out.push_back(std::move(e));
  }
  return out;
}

inline int cmd_simulate(const SimulateArgs& a, const Common& c, std::ostream& out) {
  auto cfg = profile_config(a.profile, static_cast<std::uint64_t>(a.seed));
  if (a.t50) cfg.policy_t50 = *a.t50;
  if (a.tau) cfg.policy_tau = *a.tau;
  if (a.p4_scale) cfg.p4_scale = *a.p4_scale;
  if (a.p4_shift) cfg.p4_shift = *a.p4_shift;
  if (a.tau_true) cfg.tau_true = *a.tau_true;
  if (a.items <= kNumPcs) throw ValidationError("items: need more than " + std::to_string(kNumPcs) + " items for embedding PCs");
  if (a.difficulty_seeds < 1) throw ValidationError("difficulty-seeds: must be at least 1");
  const auto thresholds = parse_list<double>(a.thresholds, "thresholds");
  const steerlab::Agent agent(cfg);
  const auto items = steerlab::make_items(cfg, a.items);
  const auto dir = prepare_out(c.out_dir);

  steerlab::SimulateOptions so;
  so.seed = a.seed;
  so.workers = c.workers;
  auto p1 = steerlab::simulate_phase(agent, items, Phase::P1, so).run;
  auto p2 = steerlab::simulate_phase(agent, items, Phase::P2, so).run;
  auto p4 = steerlab::simulate_phase4(agent, items, thresholds, a.seed, c.workers);
  p1.run_id = "p1";
  p2.run_id = "p2";
  p4.run_id = "p4";
  save_trials(p1, dir / "p1.jsonl");
  save_trials(p2, dir / "p2.jsonl");
  save_trials(p4, dir / "p4.jsonl");

  std::vector<PhaseRun> diff_runs;
  for (int k = 0; k < a.difficulty_seeds; ++k) {
    steerlab::SimulateOptions ds = so;
    ds.seed = static_cast<std::int64_t>(derive_seed(static_cast<std::uint64_t>(a.seed), "difficulty:" + std::to_string(k)) >> 1);
    ds.sampling_temperature = a.difficulty_temperature;
    diff_runs.push_back(steerlab::simulate_phase(agent, items, Phase::P1, ds).run);
  }
  const auto emb = synthetic_embeddings(items, static_cast<std::uint64_t>(a.seed));
  {
    auto f = open_for_write(dir / "embeddings.jsonl");
    for (const auto& e : emb)
      f << json{{"item_id", e.item_id}, {"embedding", e.embedding}, {"context_embeddings", e.context_embeddings}}.dump() << '\n';
    if (!f) throw IoError("failed writing embeddings.jsonl");
  }
  save_features(features::build_features(features::difficulty(diff_runs), emb), dir / "features.csv");

  json truth{{"profile", a.profile},     {"seed", a.seed},         {"items", a.items},
             {"policy_t50", cfg.policy_t50}, {"policy_tau", cfg.policy_tau}, {"p4_scale", cfg.p4_scale},
             {"p4_shift", cfg.p4_shift},   {"tau_true", cfg.tau_true}, {"thresholds", thresholds}};
  save_json(truth, dir / "truth.json");
  out << "wrote " << p1.trials.size() << " P1, " << p2.trials.size() << " P2 and " << p4.trials.size() << " P4 trials to "
      << dir.string() << '\n';
  return kExitOk;
}

// fit-phase2 / fit-phase4
struct FitArgs {
  std::string trials;
  std::string features;
  std::string phase1;
  std::optional<double> diff_at;
  bool standardize = false;
};

inline std::vector<policy::PolicyRow> policy_rows(const FitArgs& a, Phase expected, std::ostream& out) {
  const auto run = load_trials(a.trials);
  if (run.phase != expected)
    throw ValidationError("phase: " + a.trials + " holds " + to_string(run.phase) + " trials, expected " + to_string(expected));
  const auto joined = join_features(run, load_features(a.features));
  std::optional<PhaseRun> p1;
  if (!a.phase1.empty()) {
    p1 = load_trials(a.phase1);
    if (p1->phase != Phase::P1) throw ValidationError("phase: --phase1 file holds " + to_string(p1->phase) + " trials");
  }
  std::vector<std::string> warnings;
  auto rows = policy::build_policy_table(joined, p1 ? &*p1 : nullptr, &warnings);
  for (const auto& w : warnings) out << "warning: " << w << '\n';
  return rows;
}

inline int cmd_fit_phase2(const FitArgs& a, const Common& c, std::ostream& out) {
  const auto rows = policy_rows(a, Phase::P2, out);
  policy::SuiteOptions so;
  so.standardize = a.standardize;
  so.workers = c.workers;
  const auto suite = policy::fit_phase2_suite(rows, so);
  double diff_at = 0;
  for (const auto& r : rows) diff_at += r.difficulty;
  diff_at = a.diff_at.value_or(diff_at / static_cast<double>(rows.size()));

  auto j = suite_json(suite);
  j["diff_at"] = diff_at;
  j["derived"] = json::object();
  for (const char* m : {"confidence", "confidence+difficulty"}) {
    const auto& e = suite.entry(m);
    if (!e.fit || a.standardize) continue;
    try {
      j["derived"][m] = params_json(policy::derive_phase2_params(*e.fit, diff_at));
    } catch (const DomainError& err) {
      j["derived"][m] = {{"error", err.what()}};
    }
  }
  const auto dir = prepare_out(c.out_dir);
  save_json(j, dir / "phase2_suite.json");
  std::ostringstream csv;
  write_comparison_csv(suite, csv);
  write_text(dir / "phase2_comparison.csv", csv.str());
  for (const auto& [name, p] : j["derived"].items())
    if (p.contains("t50"))
      out << name << ": T50 " << fixed(opt_num(p, "t50"), 3) << ", policy temperature " << fixed(opt_num(p, "policy_temperature"), 3)
          << '\n';
  for (const auto& e : suite.models)
    if (!e.fit) out << "not fitted: " << e.spec.name << " (" << e.error << ")\n";
  return kExitOk;
}

inline int cmd_fit_phase4(const FitArgs& a, const Common& c, std::ostream& out) {
  const auto rows = policy_rows(a, Phase::P4, out);
  policy::SuiteOptions so;
  so.standardize = a.standardize;
  so.workers = c.workers;
  const auto suite = policy::fit_phase4_suite(rows, so);
  auto j = suite_json(suite);
  j["derived"] = json::object();
  for (const char* m : {"T+conf", "T+conf+diff"}) {
    const auto& e = suite.entry(m);
    if (!e.fit || a.standardize) continue;
    try {
      j["derived"][m] = params_json(policy::derive_phase4_params(*e.fit));
    } catch (const DomainError& err) {
      j["derived"][m] = {{"error", err.what()}};
    }
  }
  const auto dir = prepare_out(c.out_dir);
  save_json(j, dir / "phase4_suite.json");
  std::ostringstream csv;
  write_comparison_csv(suite, csv);
  write_text(dir / "phase4_comparison.csv", csv.str());
  try {
    const auto ac = policy::fit_abstention_confidence(rows);
    json aj{{"full", ac.full()}};
    json comps = json::array();
    for (const auto& cmp : ac.comparisons)
      comps.push_back({{"model", cmp.model}, {"baseline", cmp.baseline}, {"delta_aic", *cmp.delta_aic}});
    aj["comparisons"] = comps;
    save_json(aj, dir / "abstention_confidence.json");
  } catch (const DomainError& err) {
    out << "warning: abstention-confidence model not fitted: " << err.what() << '\n';
  }
  for (const auto& [name, p] : j["derived"].items())
    if (p.contains("scale"))
      out << name << ": scale " << fixed(opt_num(p, "scale"), 3) << ", shift " << fixed(opt_num(p, "shift"), 2)
          << ", policy temperature " << fixed(opt_num(p, "policy_temperature"), 2) << '\n';
  std::ostringstream heat;
  const auto band = emit_heatmap_data(rows, heat);
  write_text(dir / "heatmap.csv", heat.str());
  out << "bandness index " << fixed(band.index, 3) << '\n';
  return kExitOk;
}

// steer
struct SteerArgs {
  std::int64_t seed = 0;
  std::string profile = "steering-tuned";
  std::size_t contrast_items = 1000;
  std::size_t items = 2000;
  std::string alphas = "-2,-1.5,-1,-0.5,0.5,1,1.5,2";
  std::string layers;
  double fraction = 0.03;
};

inline int cmd_steer(const SteerArgs& a, const Common& c, std::ostream& out) {
  const auto cfg = profile_config(a.profile, static_cast<std::uint64_t>(a.seed));
  const steerlab::Agent agent(cfg);
  steerlab::SweepOptions so;
  so.alphas = parse_list<double>(a.alphas, "alphas");
  steerlab::validate_alphas(so.alphas);
  if (a.layers.empty())
    for (int l = cfg.window_lo; l <= cfg.window_hi; ++l) so.layers.push_back(l);
  else
    so.layers = parse_list<int>(a.layers, "layers");
  for (int l : so.layers)
    if (l < 0 || l >= cfg.n_layers) throw ValidationError("layers: " + std::to_string(l) + " is outside 0.." + std::to_string(cfg.n_layers - 1));
  so.seed = a.seed;
  so.workers = c.workers;
  const auto contrast = steerlab::make_items(cfg, a.contrast_items, "contrast");
  const auto sweep_items = steerlab::make_items(cfg, a.items, "item");
  const auto e = steerlab::run_steering_experiment(agent, contrast, sweep_items, so, a.fraction);

  const auto dir = prepare_out(c.out_dir);
  steerlab::save_sweep_csv(e.sweep, dir / "sweep.csv");
  mediate::save_inputs(e.sweep.mediation, dir / "mediation_inputs.jsonl");
  auto base = e.sweep.baseline;
  base.run_id = "p2_baseline";
  save_trials(base, dir / "p2_baseline.jsonl");
  auto steered = e.sweep.steered;
  steered.run_id = "p3";
  save_trials(steered, dir / "p3.jsonl");
  json norms = json::array();
  for (std::size_t l = 0; l < e.vector.layers.size(); ++l) norms.push_back(e.vector.layers[l].norm());
  save_json({{"n_high", e.vector.n_high},
             {"n_low", e.vector.n_low},
             {"mean_margin_high", e.vector.mean_margin_high},
             {"mean_margin_low", e.vector.mean_margin_low},
             {"scale_fraction", e.vector.scale_fraction},
             {"degenerate", e.vector.degenerate},
             {"layer_norms", norms}},
            dir / "vector.json");

  const auto curve = steerlab::abstention_by_alpha(e.sweep);
  std::vector<double> xs, ys;
  for (const auto& [x, y] : curve) {
    xs.push_back(x);
    ys.push_back(y);
  }
  out << "baseline abstention " << fixed(e.sweep.baseline_abstention, 3) << '\n';
  for (const auto& [x, y] : curve) out << "alpha " << x << ": abstention " << fixed(y, 3) << '\n';
  if (xs.size() >= 2) {
    try {
      out << "corr(alpha, abstention) " << fixed(stats::pearson(xs, ys), 3) << '\n';
    } catch (const DomainError&) {
    }
  }
  return kExitOk;
}

// mediate
struct MediateArgs {
  std::string inputs;
  std::int64_t seed = 0;
  int B = 1000;
  bool difficulty = false;
  bool no_bootstrap = false;
};

inline int cmd_mediate(const MediateArgs& a, const Common& c, std::ostream& out) {
  const auto rows = mediate::load_inputs(a.inputs);
  std::optional<mediate::BootstrapOptions> boot;
  if (!a.no_bootstrap) {
    if (a.B < 100) throw ValidationError("B: must be at least 100");
    boot = mediate::BootstrapOptions{};
    boot->B = a.B;
    boot->seed = static_cast<std::uint64_t>(a.seed);
    boot->workers = c.workers;
  }
  const auto rep = mediate::analyze(rows, a.difficulty, boot);
  auto j = mediate::to_report_json(rep);
  j["seed"] = a.seed;
  const auto dir = prepare_out(c.out_dir);
  save_json(j, dir / "mediation.json");
  out << mediation_markdown(j);
  return kExitOk;
}

// features
struct FeaturesArgs {
  std::vector<std::string> runs;
  std::string embeddings;
  int k = static_cast<int>(kNumPcs);
  bool keep_raw = false;
  std::string corpus;
  std::string questions;
};

inline int cmd_features(const FeaturesArgs& a, const Common& c, std::ostream& out) {
  if (a.corpus.empty() != a.questions.empty()) throw ValidationError("corpus: --corpus and --questions go together");
  const auto dir = prepare_out(c.out_dir);
  if (!a.corpus.empty()) {
    const features::Bm25Index index(features::load_corpus(a.corpus));
    auto f = open_for_write(dir / "contexts.jsonl");
    std::size_t n = 0, empty = 0;
    read_jsonl(a.questions, [&](std::size_t line, const json& q) {
      std::string id, text;
      try {
        id = q.at("item_id").get<std::string>();
        text = q.at("question").get<std::string>();
      } catch (const json::exception& e) {
        throw ParseError(std::string("question record: ") + e.what(), line);
      }
      const auto ctx = features::retrieve_contexts(text, index);
      if (ctx.empty()) ++empty;
      ++n;
      f << json{{"item_id", id}, {"contexts", ctx}}.dump() << '\n';
    });
    if (!f) throw IoError("failed writing contexts.jsonl");
    out << "retrieved contexts for " << n << " questions (" << empty << " with no match)\n";
  }
  if (a.runs.empty() && a.embeddings.empty()) return kExitOk;
  if (a.runs.empty() || a.embeddings.empty()) throw ValidationError("runs: --runs and --embeddings are both needed for feature rows");
  std::vector<PhaseRun> runs;
  for (const auto& r : a.runs) runs.push_back(load_trials(r));
  const auto rows = features::build_features(features::difficulty(runs), features::load_embeddings(a.embeddings), a.k, a.keep_raw);
  save_features(rows, dir / "features.csv");
  const auto failed = std::count_if(rows.begin(), rows.end(), [](const FeatureRow& r) { return r.rag_failed; });
  out << "wrote " << rows.size() << " feature rows";
  if (failed) out << " (" << failed << " with failed retrieval, RAG score 0)";
  out << '\n';
  return kExitOk;
}

// report
struct ReportArgs {
  std::string fit, suite, mediation;
};

inline int cmd_report(const ReportArgs& a, const Common& c, std::ostream& out) {
  const int given = !a.fit.empty() + !a.suite.empty() + !a.mediation.empty();
  if (given != 1) throw ValidationError("report: give exactly one of --fit, --suite, --mediation");
  std::string md;
  if (!a.fit.empty()) {
    const auto j = load_json(a.fit);
    try {
      md = fit_table_markdown(j.contains("fit") ? j["fit"].get<glm::ModelFit>() : j.get<glm::ModelFit>());
    } catch (const json::exception& e) {
      throw ParseError(std::string("model fit: ") + e.what(), 1);
    }
  } else {
    const auto j = load_json(a.suite.empty() ? a.mediation : a.suite);
    try {
      md = a.suite.empty() ? mediation_markdown(j) : suite_markdown(j);
    } catch (const json::exception& e) {
      throw ParseError(std::string("report input: ") + e.what(), 1);
    }
  }
  if (!c.out_dir.empty()) write_text(prepare_out(c.out_dir) / "report.md", md);
  out << md;
  return kExitOk;
}

// ----- entry point -----------------------------------------------------------

namespace detail {

// Appends config-file settings for options not given on the command line.
inline std::vector<std::string> apply_config(std::vector<std::string> args, const CLI::App& app,
                                             const std::set<std::string>& flags) {
  std::string config;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw ConfigError("config: --config needs a file");
      config = args[i + 1];
      args.erase(args.begin() + static_cast<long>(i), args.begin() + static_cast<long>(i) + 2);
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      config = args[i].substr(9);
      args.erase(args.begin() + static_cast<long>(i));
      break;
    }
  }
  if (config.empty()) return args;
  const CLI::App* sub = nullptr;
  for (const auto& a : args)
    if (!a.empty() && a[0] != '-')
      if (auto* s = app.get_subcommand_no_throw(a)) {
        sub = s;
        break;
      }
  if (!sub) throw ConfigError("config: a subcommand is needed to apply " + config);
  for (const auto& [key, value] : read_config(config)) {
    const std::string flag = "--" + key;
    if (!sub->get_option_no_throw(flag)) throw ConfigError("config: '" + key + "' is not an option of " + sub->get_name());
    const bool given = std::any_of(args.begin(), args.end(), [&](const std::string& a) {
      return a == flag || a.rfind(flag + "=", 0) == 0;
    });
    if (given) continue;
    if (flags.count(key)) {
      if (value == "true" || value == "1") args.push_back(flag);
      else if (value != "false" && value != "0") throw ConfigError("config: '" + key + "' expects true or false");
    } else {
      args.push_back(flag);
      args.push_back(value);
    }
  }
  return args;
}

}  // namespace detail

inline int run(const std::vector<std::string>& argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Fit and simulate confidence-based abstention policies.", "abstain"};
  app.require_subcommand(1, 1);
  Common common;
  std::string config_path;  // consumed by apply_config; declared for --help
  std::set<std::string> flags;

  auto add_common = [&](CLI::App* s, bool out_required) {
    auto* o = s->add_option("--out", common.out_dir, "Output directory");
    if (out_required) o->required();
    s->add_option("--workers", common.workers, "Worker threads (results do not depend on this)")->check(CLI::PositiveNumber);
    s->add_option("--config", config_path, "Flat key=value file; command-line flags take precedence");
  };

  CalibrateArgs ca;
  auto* cal = app.add_subcommand("calibrate", "Fit temperature scaling on Phase 1 logits");
  cal->add_option("--trials", ca.trials, "Phase 1 trials JSONL with logits")->required();
  cal->add_option("--bins", ca.bins, "Reliability bins")->check(CLI::PositiveNumber);
  cal->add_option("--binning", ca.binning, "width or mass");
  add_common(cal, true);

  SimulateArgs sa;
  auto* sim = app.add_subcommand("simulate", "Generate synthetic Phase 1/2/4 trials and features");
  sim->add_option("--seed", sa.seed, "Master seed")->required();
  sim->add_option("--items", sa.items, "Number of items");
  sim->add_option("--profile", sa.profile, "standard, paper-like or steering-tuned");
  sim->add_option("--difficulty-seeds", sa.difficulty_seeds, "Sampled Phase 1 runs for difficulty scores");
  sim->add_option("--difficulty-temperature", sa.difficulty_temperature, "Sampling temperature of those runs");
  sim->add_option("--thresholds", sa.thresholds, "Phase 4 thresholds, comma separated");
  sim->add_option("--t50", sa.t50, "Phase 2 indifference confidence");
  sim->add_option("--tau", sa.tau, "Phase 2 policy temperature");
  sim->add_option("--p4-scale", sa.p4_scale, "Phase 4 confidence scale");
  sim->add_option("--p4-shift", sa.p4_shift, "Phase 4 shift, percent");
  sim->add_option("--tau-true", sa.tau_true, "Temperature of the raw logits");
  add_common(sim, true);

  FitArgs f2, f4;
  auto* fit2 = app.add_subcommand("fit-phase2", "Fit the Phase 2 policy model suite");
  auto* fit4 = app.add_subcommand("fit-phase4", "Fit the Phase 4 policy model suite and heatmap");
  for (auto [s, a] : {std::pair{fit2, &f2}, std::pair{fit4, &f4}}) {
    s->add_option("--trials", a->trials, "Trials JSONL")->required();
    s->add_option("--features", a->features, "Item features CSV")->required();
    s->add_option("--phase1", a->phase1, "Phase 1 trials JSONL supplying confidence");
    s->add_flag("--standardize", a->standardize, "Z-score predictors");
    add_common(s, true);
  }
  fit2->add_option("--diff-at", f2.diff_at, "Difficulty at which T50 is evaluated (default: mean)");
  flags.insert("standardize");

  SteerArgs st;
  auto* steer = app.add_subcommand("steer", "Steering sweep on the synthetic agent");
  steer->add_option("--seed", st.seed, "Master seed")->required();
  steer->add_option("--profile", st.profile, "standard, paper-like or steering-tuned");
  steer->add_option("--contrast-items", st.contrast_items, "Items for high/low contrast selection");
  steer->add_option("--items", st.items, "Items in the sweep");
  steer->add_option("--alphas", st.alphas, "Steering strengths, comma separated");
  steer->add_option("--layers", st.layers, "Layers, comma separated (default: readout window)");
  steer->add_option("--fraction", st.fraction, "Vector norm as a fraction of the mean residual norm");
  add_common(steer, true);

  MediateArgs ma;
  auto* med = app.add_subcommand("mediate", "Two-mediator analysis with bootstrap CIs");
  med->add_option("--inputs", ma.inputs, "Mediation inputs JSONL")->required();
  med->add_option("--seed", ma.seed, "Bootstrap seed")->required();
  med->add_option("--B", ma.B, "Bootstrap replicates");
  med->add_flag("--difficulty", ma.difficulty, "Adjust for item difficulty");
  med->add_flag("--no-bootstrap", ma.no_bootstrap, "Point estimates only");
  add_common(med, true);
  flags.insert({"difficulty", "no-bootstrap"});

  FeaturesArgs fa;
  auto* feat = app.add_subcommand("features", "Difficulty, RAG and embedding features; optional BM25 retrieval");
  feat->add_option("--runs", fa.runs, "Phase 1 runs (one file per seed)")->delimiter(',');
  feat->add_option("--embeddings", fa.embeddings, "Embeddings JSONL");
  feat->add_option("--k", fa.k, "Principal components")->check(CLI::Range(1, static_cast<int>(kNumPcs)));
  feat->add_flag("--keep-raw", fa.keep_raw, "Keep raw embeddings in memory");
  feat->add_option("--corpus", fa.corpus, "Corpus JSONL for retrieval");
  feat->add_option("--questions", fa.questions, "Questions JSONL for retrieval");
  add_common(feat, true);
  flags.insert("keep-raw");

  ReportArgs ra;
  auto* rep = app.add_subcommand("report", "Markdown tables from fit, suite or mediation JSON");
  rep->add_option("--fit", ra.fit, "Single model fit JSON");
  rep->add_option("--suite", ra.suite, "Suite JSON from fit-phase2/fit-phase4");
  rep->add_option("--mediation", ra.mediation, "Mediation JSON");
  add_common(rep, false);

  std::vector<std::string> args;
  try {
    args = detail::apply_config(argv, app, flags);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitInternal;
  }

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    const auto subs = app.get_subcommands();
    out << (subs.empty() ? app.help() : subs.front()->help());
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    const auto subs = app.get_subcommands();
    err << "error: " << e.what() << "\n\n" << (subs.empty() ? app.help() : subs.front()->help());
    return kExitValidation;
  }

  try {
    if (cal->parsed()) return cmd_calibrate(ca, common, out);
    if (sim->parsed()) return cmd_simulate(sa, common, out);
    if (fit2->parsed()) return cmd_fit_phase2(f2, common, out);
    if (fit4->parsed()) return cmd_fit_phase4(f4, common, out);
    if (steer->parsed()) return cmd_steer(st, common, out);
    if (med->parsed()) return cmd_mediate(ma, common, out);
    if (feat->parsed()) return cmd_features(fa, common, out);
    if (rep->parsed()) return cmd_report(ra, common, out);
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitInternal;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, out, err);
}

}  // namespace abstain::cli
