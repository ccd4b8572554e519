#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "abstain/errors.hpp"
#include "abstain/glm.hpp"

// Data model and persistence for trials, feature tables and fitted models.
namespace abstain {

using json = nlohmann::json;

enum class Phase { P1, P2, P3, P4 };

inline std::string to_string(Phase p) {
  switch (p) {
    case Phase::P1: return "P1";
    case Phase::P2: return "P2";
    case Phase::P3: return "P3";
    case Phase::P4: return "P4";
  }
  return "?";
}

inline Phase phase_from_string(std::string_view s) {
  if (s == "P1") return Phase::P1;
  if (s == "P2") return Phase::P2;
  if (s == "P3") return Phase::P3;
  if (s == "P4") return Phase::P4;
  throw ValidationError("phase: unknown value '" + std::string(s) + "'");
}

inline constexpr int kAbstainOption = 5;
inline constexpr std::size_t kNumPcs = 10;
inline constexpr double kProbSumTolerance = 1e-9;

// One question presentation. Option indices are 1-based; option 5 is the
// abstention option when five probabilities are present.
struct Trial {
  std::string item_id;
  Phase phase = Phase::P1;
  std::int64_t seed = 0;
  std::vector<double> option_probs;
  int chosen = 1;
  int correct_option = 1;
  bool is_correct = false;
  bool abstained = false;
  std::optional<double> instructed_threshold;  // P4 only, percent
  std::optional<double> steering_strength;     // P3 only
  std::optional<int> layer;                    // P3 only
  bool calibrated = true;
  std::optional<std::vector<double>> logits;  // raw option logits, when kept

  int n_options() const noexcept { return static_cast<int>(option_probs.size()); }
  double chosen_confidence() const { return option_probs.at(static_cast<std::size_t>(chosen - 1)); }
  double max_real_confidence() const { return *std::max_element(option_probs.begin(), option_probs.begin() + 4); }
  double abstain_confidence() const { return option_probs.size() == 5 ? option_probs[4] : 0.0; }

  bool operator==(const Trial&) const = default;
};

inline bool is_valid_steering_strength(double s) {
  for (double v : {0.5, 1.0, 1.5, 2.0})
    if (std::abs(std::abs(s) - v) < 1e-12) return true;
  return false;
}

// Throws ValidationError naming the offending field.
inline void validate(const Trial& t) {
  auto fail = [&](const std::string& field, const std::string& why) {
    throw ValidationError(field + ": " + why + " (item " + t.item_id + ")");
  };
  if (t.item_id.empty()) fail("item_id", "must be non-empty");
  if (t.option_probs.size() != 4 && t.option_probs.size() != 5) fail("option_probs", "must have 4 or 5 entries");
  double total = 0;
  for (double p : t.option_probs) {
    if (!(p >= 0.0 && p <= 1.0)) fail("option_probs", "entries must be probabilities");
    total += p;
  }
  if (std::abs(total - 1.0) > kProbSumTolerance) {
    std::ostringstream os;
    os << "must sum to 1 (got " << total << ")";
    fail("option_probs", os.str());
  }
  if (t.chosen < 1 || t.chosen > t.n_options()) fail("chosen", "out of range");
  if (t.correct_option < 1 || t.correct_option > 4) fail("correct_option", "must be a real option 1-4");
  if (t.abstained != (t.chosen == kAbstainOption)) fail("abstained", "must hold exactly when chosen = 5");
  if (t.is_correct != (t.chosen == t.correct_option)) fail("is_correct", "inconsistent with chosen/correct_option");
  if (t.instructed_threshold.has_value() != (t.phase == Phase::P4))
    fail("instructed_threshold", "must be present exactly for phase P4");
  if (t.instructed_threshold && !(*t.instructed_threshold >= 0 && *t.instructed_threshold <= 100))
    fail("instructed_threshold", "must lie in [0, 100]");
  if (t.steering_strength.has_value() != (t.phase == Phase::P3))
    fail("steering_strength", "must be present exactly for phase P3");
  if (t.layer.has_value() != (t.phase == Phase::P3)) fail("layer", "must be present exactly for phase P3");
  if (t.steering_strength && !is_valid_steering_strength(*t.steering_strength))
    fail("steering_strength", "must be one of +-0.5, +-1.0, +-1.5, +-2.0");
  if (t.layer && *t.layer < 0) fail("layer", "must be non-negative");
  if (t.logits && t.logits->size() != t.option_probs.size()) fail("logits", "length must match option_probs");
}

inline void to_json(json& j, const Trial& t) {
  j = json{{"item_id", t.item_id},
           {"phase", to_string(t.phase)},
           {"seed", t.seed},
           {"option_probs", t.option_probs},
           {"chosen", t.chosen},
           {"correct_option", t.correct_option},
           {"is_correct", t.is_correct},
           {"abstained", t.abstained},
           {"calibrated", t.calibrated}};
  if (t.instructed_threshold) j["instructed_threshold"] = *t.instructed_threshold;
  if (t.steering_strength) j["steering_strength"] = *t.steering_strength;
  if (t.layer) j["layer"] = *t.layer;
  if (t.logits) j["logits"] = *t.logits;
}

inline void from_json(const json& j, Trial& t) {
  t.item_id = j.at("item_id").get<std::string>();
  t.phase = phase_from_string(j.at("phase").get<std::string>());
  t.seed = j.value("seed", std::int64_t{0});
  t.option_probs = j.at("option_probs").get<std::vector<double>>();
  t.chosen = j.at("chosen").get<int>();
  t.correct_option = j.at("correct_option").get<int>();
  t.is_correct = j.at("is_correct").get<bool>();
  t.abstained = j.at("abstained").get<bool>();
  t.calibrated = j.value("calibrated", true);
  auto opt_num = [&](const char* key) -> std::optional<double> {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<double>();
  };
  t.instructed_threshold = opt_num("instructed_threshold");
  t.steering_strength = opt_num("steering_strength");
  t.layer = j.contains("layer") && !j.at("layer").is_null() ? std::optional<int>(j.at("layer").get<int>()) : std::nullopt;
  if (j.contains("logits") && !j.at("logits").is_null()) t.logits = j.at("logits").get<std::vector<double>>();
}

struct PhaseRun {
  std::string run_id;
  Phase phase = Phase::P1;
  std::vector<Trial> trials;
  std::string provenance;
};

// Key under which item ids must be unique within a run.
inline std::string condition_key(const Trial& t) {
  std::ostringstream os;
  os << t.item_id << '|' << t.seed << '|' << (t.instructed_threshold ? std::to_string(*t.instructed_threshold) : "-")
     << '|' << (t.steering_strength ? std::to_string(*t.steering_strength) : "-") << '|'
     << (t.layer ? std::to_string(*t.layer) : "-");
  return os.str();
}

inline void validate(const PhaseRun& run) {
  std::set<std::string> seen;
  for (const auto& t : run.trials) {
    validate(t);
    if (t.phase != run.phase)
      throw ValidationError("phase: trial " + t.item_id + " has phase " + to_string(t.phase) + " in a " +
                            to_string(run.phase) + " run");
    if (!seen.insert(condition_key(t)).second)
      throw ValidationError("item_id: duplicate trial for item " + t.item_id + " in the same condition");
  }
}

// Calls fn(line_number, json) for each non-blank line of a JSONL file.
inline void read_jsonl(const std::filesystem::path& path, const std::function<void(std::size_t, const json&)>& fn) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), lineno);
    }
    fn(lineno, j);
  }
}

inline std::ofstream open_for_write(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

// Loads a JSONL trial file. An optional line {"run_meta": {...}} carries the
// run id and provenance.
inline PhaseRun load_trials(const std::filesystem::path& path) {
  PhaseRun run;
  run.run_id = path.stem().string();
  bool phase_set = false;
  read_jsonl(path, [&](std::size_t lineno, const json& j) {
    if (j.is_object() && j.contains("run_meta")) {
      const auto& m = j.at("run_meta");
      run.run_id = m.value("run_id", run.run_id);
      run.provenance = m.value("provenance", std::string{});
      return;
    }
    Trial t;
    try {
      t = j.get<Trial>();
    } catch (const json::exception& e) {
      throw ParseError(std::string("trial schema: ") + e.what(), lineno);
    } catch (const ValidationError& e) {
      throw ParseError(e.what(), lineno);
    }
    try {
      validate(t);
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!phase_set) {
      run.phase = t.phase;
      phase_set = true;
    }
    run.trials.push_back(std::move(t));
  });
  validate(run);
  return run;
}

inline void save_trials(const PhaseRun& run, const std::filesystem::path& path) {
  validate(run);
  auto out = open_for_write(path);
  if (!run.provenance.empty() || !run.run_id.empty())
    out << json{{"run_meta", {{"run_id", run.run_id}, {"provenance", run.provenance}}}}.dump() << '\n';
  for (const auto& t : run.trials) out << json(t).dump() << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

struct FeatureRow {
  std::string item_id;
  double difficulty = 0;
  double rag_score = 0;
  std::vector<double> embedding_pcs = std::vector<double>(kNumPcs, 0.0);
  std::optional<std::vector<double>> raw_embedding;
  bool rag_failed = false;

  bool operator==(const FeatureRow&) const = default;
};

inline void validate(const FeatureRow& f) {
  auto fail = [&](const std::string& field, const std::string& why) {
    throw ValidationError(field + ": " + why + " (item " + f.item_id + ")");
  };
  if (f.item_id.empty()) fail("item_id", "must be non-empty");
  if (!(f.difficulty >= 0 && f.difficulty <= 1)) fail("difficulty", "must lie in [0, 1]");
  if (!(f.rag_score >= -1 && f.rag_score <= 1)) fail("rag_score", "must lie in [-1, 1]");
  if (f.rag_failed && f.rag_score != 0.0) fail("rag_score", "must be 0 when retrieval failed");
  if (f.embedding_pcs.size() != kNumPcs) fail("embedding_pcs", "must have exactly 10 entries");
  for (double v : f.embedding_pcs)
    if (!std::isfinite(v)) fail("embedding_pcs", "must be finite");
}

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, std::size_t lineno, const std::string& field) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(field + ": not a number '" + s + "'", lineno);
  }
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

inline std::string features_header(bool with_flag = true) {
  std::string h = "item_id,difficulty,rag_score";
  for (std::size_t k = 1; k <= kNumPcs; ++k) h += ",pc" + std::to_string(k);
  if (with_flag) h += ",rag_failed";
  return h;
}

// Features CSV: header item_id,difficulty,rag_score,pc1..pc10 with an
// optional trailing rag_failed column (0/1).
inline std::vector<FeatureRow> load_features(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) return {};
  if (!line.empty() && line.back() == '\r') line.pop_back();
  bool has_flag = false;
  if (line == features_header(true))
    has_flag = true;
  else if (line != features_header(false))
    throw ParseError("features header must be '" + features_header(false) + "[,rag_failed]'", 1);
  const std::size_t ncols = 3 + kNumPcs + (has_flag ? 1 : 0);
  std::vector<FeatureRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto cells = detail::split_csv(line);
    if (cells.size() != ncols)
      throw ParseError("expected " + std::to_string(ncols) + " columns, got " + std::to_string(cells.size()), lineno);
    FeatureRow f;
    f.item_id = cells[0];
    f.difficulty = detail::parse_double(cells[1], lineno, "difficulty");
    f.rag_score = detail::parse_double(cells[2], lineno, "rag_score");
    for (std::size_t k = 0; k < kNumPcs; ++k)
      f.embedding_pcs[k] = detail::parse_double(cells[3 + k], lineno, "pc" + std::to_string(k + 1));
    if (has_flag) {
      const auto& flag = cells[3 + kNumPcs];
      if (flag != "0" && flag != "1") throw ParseError("rag_failed must be 0 or 1", lineno);
      f.rag_failed = flag == "1";
    }
    try {
      validate(f);
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(lineno) + ": " + e.what());
    }
    rows.push_back(std::move(f));
  }
  return rows;
}

inline void save_features(const std::vector<FeatureRow>& rows, const std::filesystem::path& path) {
  auto out = open_for_write(path);
  out << features_header(true) << '\n';
  for (const auto& f : rows) {
    validate(f);
    out << f.item_id << ',' << detail::format_double(f.difficulty) << ',' << detail::format_double(f.rag_score);
    for (double v : f.embedding_pcs) out << ',' << detail::format_double(v);
    out << ',' << (f.rag_failed ? 1 : 0) << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

// A trial with its item-level covariates attached.
struct JoinedRow {
  Trial trial;
  double difficulty = 0;
  double rag_score = 0;
  bool rag_failed = false;
  std::vector<double> embedding_pcs;
};

using JoinedTable = std::vector<JoinedRow>;

inline JoinedTable join_features(const PhaseRun& run, const std::vector<FeatureRow>& features) {
  std::map<std::string, const FeatureRow*> by_id;
  for (const auto& f : features)
    if (!by_id.emplace(f.item_id, &f).second) throw JoinError("duplicate feature row for item " + f.item_id);
  std::set<std::string> missing;
  for (const auto& t : run.trials)
    if (!by_id.count(t.item_id)) missing.insert(t.item_id);
  if (!missing.empty()) {
    std::string msg = "no feature row for " + std::to_string(missing.size()) + " item(s):";
    for (const auto& id : missing) msg += " " + id;
    throw JoinError(msg);
  }
  JoinedTable table;
  table.reserve(run.trials.size());
  for (const auto& t : run.trials) {
    const auto& f = *by_id.at(t.item_id);
    table.push_back({t, f.difficulty, f.rag_score, f.rag_failed, f.embedding_pcs});
  }
  return table;
}

}  // namespace abstain

namespace abstain::glm {

inline void to_json(json& j, const ModelFit& f) {
  auto nullable = [](const std::vector<double>& v) {
    json a = json::array();
    for (double x : v) a.push_back(std::isfinite(x) ? json(x) : json(nullptr));
    return a;
  };
  json cov = json::array();
  for (Eigen::Index r = 0; r < f.cov.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(f.cov.cols()));
    for (Eigen::Index c = 0; c < f.cov.cols(); ++c) row[static_cast<std::size_t>(c)] = f.cov(r, c);
    cov.push_back(nullable(row));
  }
  j = json{{"family", to_string(f.family)},
           {"predictor_names", f.predictor_names},
           {"coef", nullable(f.coef)},
           {"se", nullable(f.se)},
           {"z", nullable(f.z)},
           {"p_value", nullable(f.p_value)},
           {"cov", cov},
           {"loglik", f.loglik},
           {"null_loglik", f.null_loglik},
           {"aic", f.aic},
           {"pseudo_r2", f.pseudo_r2},
           {"n", f.n},
           {"standardized", f.standardized},
           {"iterations", f.iterations},
           {"converged", f.converged},
           {"covariance", f.covariance}};
}

inline void from_json(const json& j, ModelFit& f) {
  auto vec = [](const json& a) {
    std::vector<double> v;
    for (const auto& x : a) v.push_back(x.is_null() ? std::numeric_limits<double>::quiet_NaN() : x.get<double>());
    return v;
  };
  f.family = family_from_string(j.at("family").get<std::string>());
  f.predictor_names = j.at("predictor_names").get<std::vector<std::string>>();
  f.coef = vec(j.at("coef"));
  f.se = vec(j.at("se"));
  f.z = vec(j.at("z"));
  f.p_value = vec(j.at("p_value"));
  const auto& cov = j.at("cov");
  const auto p = static_cast<Eigen::Index>(cov.size());
  f.cov.resize(p, p);
  for (Eigen::Index r = 0; r < p; ++r) {
    const auto row = vec(cov.at(static_cast<std::size_t>(r)));
    if (static_cast<Eigen::Index>(row.size()) != p) throw ValidationError("cov: matrix must be square");
    for (Eigen::Index c = 0; c < p; ++c) f.cov(r, c) = row[static_cast<std::size_t>(c)];
  }
  f.loglik = j.at("loglik").get<double>();
  f.null_loglik = j.value("null_loglik", 0.0);
  f.aic = j.at("aic").get<double>();
  f.pseudo_r2 = j.at("pseudo_r2").get<double>();
  f.n = j.at("n").get<long>();
  f.standardized = j.value("standardized", false);
  f.iterations = j.value("iterations", 0);
  f.converged = j.value("converged", true);
  f.covariance = j.value("covariance", std::string("model"));
  const auto k = f.coef.size();
  if (f.predictor_names.size() != k || f.se.size() != k || f.z.size() != k || f.p_value.size() != k)
    throw ValidationError("coef: predictor_names/coef/se/z/p_value lengths differ");
}

}  // namespace abstain::glm

namespace abstain {

inline void save_fit(const glm::ModelFit& fit, const std::filesystem::path& path) {
  auto out = open_for_write(path);
  out << json(fit).dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

inline glm::ModelFit load_fit(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in).get<glm::ModelFit>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("model fit: ") + e.what(), 1);
  }
}

inline void save_json(const json& j, const std::filesystem::path& path) {
  auto out = open_for_write(path);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

inline json load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed JSON: ") + e.what(), 1);
  }
}

}  // namespace abstain
