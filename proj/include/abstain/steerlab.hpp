#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "abstain/calib.hpp"
#include "abstain/errors.hpp"
#include "abstain/mediate.hpp"
#include "abstain/parallel.hpp"
#include "abstain/stats.hpp"
#include "abstain/trialstore.hpp"

// Synthetic two-stage agent with a layered linear residual stream, and the
// steering-vector pipeline built on it.
//
// Forward pass: r(l+1) = r(l) + P_l r(l) with small fixed random P_l. The
// readout averages the residual over a window of middle layers, reads one
// evidence value per real option (rows 0-3) and a gain from row 4:
//   z_i = exp(gain * <w4, rbar>) * <w_i, rbar>,   p = softmax(z / tau_true).
// Confidence C = max p. The second stage abstains with probability
// q = sigmoid((T - C) / tau_policy) and reports ((1 - q) p, q).
namespace abstain::steerlab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline constexpr std::array<double, 8> kSteeringGrid = {-2.0, -1.5, -1.0, -0.5, 0.5, 1.0, 1.5, 2.0};

struct AgentConfig {
  int n_layers = 12;
  int dim = 24;
  Mat readout;               // 5 x dim
  Vec confidence_direction;  // unit, dim
  double policy_t50 = 0.77;
  double policy_tau = 0.20;
  double knowledge_sd = 1.0;
  std::uint64_t seed = 1;

  double knowledge_mean = 2.5;
  double evidence_noise = 0.5;      // sd of per-option evidence noise
  double confidence_coupling = 0.8;  // loading of knowledge on the confidence direction
  double confidence_noise = 0.3;
  double gain = 1.0;                 // gain sensitivity to the confidence direction
  double susceptibility_sd = 0.0;    // log-sd of a per-item multiplier on the gain
  double bias_norm = 8.0;            // constant bias coordinate
  double nuisance_sd = 0.2;
  double mixing = 0.01;              // scale of the per-layer projections
  int window_lo = 4;                 // readout window (inclusive)
  int window_hi = 7;
  double tau_true = 1.0;             // raw logits are softmax(z / tau_true)-calibrated
  double p4_scale = 1.0;             // Phase 4: T*(C) = shift + scale * 100 C, percent
  double p4_shift = 0.0;

  // Coordinates used by standard(): 0-3 option evidence, 4 confidence,
  // 5 bias, the rest nuisance.
  static constexpr int kConfidenceCoord = 4;
  static constexpr int kBiasCoord = 5;

  static AgentConfig standard(std::uint64_t seed = 1, int n_layers = 12, int dim = 24) {
    AgentConfig c;
    c.seed = seed;
    c.n_layers = n_layers;
    c.dim = dim;
    c.readout = Mat::Zero(5, dim);
    for (int i = 0; i < 4; ++i) c.readout(i, i) = 1.0;
    c.readout(4, kConfidenceCoord) = 1.0;
    c.confidence_direction = Vec::Unit(dim, kConfidenceCoord);
    c.window_lo = n_layers / 3;
    c.window_hi = (2 * n_layers) / 3 - 1;
    return c;
  }

  // Items cluster near the policy threshold and differ mainly in how strongly
  // they respond to the confidence direction, so a steering sweep moves
  // abstention through confidence alone.
  static AgentConfig steering_tuned(std::uint64_t seed = 7) {
    auto c = standard(seed);
    c.knowledge_mean = 2.0;
    c.knowledge_sd = 0.05;
    c.evidence_noise = 0.03;
    c.confidence_coupling = 0.0;
    c.confidence_noise = 0.05;
    c.gain = 1.5;
    c.susceptibility_sd = 0.8;
    return c;
  }

  // Tuned so the high/low contrast sets have mean chosen confidence near
  // 0.64 and 0.29.
  static AgentConfig paper_like(std::uint64_t seed = 7) {
    auto c = standard(seed);
    c.knowledge_mean = 2.2;
    c.knowledge_sd = 0.2;
    c.evidence_noise = 0.25;
    c.confidence_coupling = 0.3;
    c.confidence_noise = 0.1;
    c.policy_t50 = 0.6;
    c.policy_tau = 0.3;
    return c;
  }
};

inline void validate(const AgentConfig& c) {
  if (c.n_layers < 1 || c.dim < 6) throw ValidationError("agent: need n_layers >= 1 and dim >= 6");
  if (c.readout.rows() != 5 || c.readout.cols() != c.dim) throw ValidationError("readout: must be 5 x dim");
  if (c.confidence_direction.size() != c.dim) throw ValidationError("confidence_direction: length must equal dim");
  if (std::abs(c.confidence_direction.norm() - 1.0) > 1e-9)
    throw ValidationError("confidence_direction: must have unit norm");
  if (!(c.policy_tau > 0)) throw ValidationError("policy_tau: must be positive");
  if (!(c.knowledge_sd > 0)) throw ValidationError("knowledge_sd: must be positive");
  if (!(c.tau_true > 0)) throw ValidationError("tau_true: must be positive");
  if (c.window_lo < 0 || c.window_hi >= c.n_layers || c.window_lo > c.window_hi)
    throw ValidationError("readout window: must lie within the layers");
}

struct AgentItem {
  std::string item_id;
  double knowledge = 0;
  double susceptibility = 1;
};

// Items with knowledge ~ N(knowledge_mean, knowledge_sd) and log-normal
// susceptibility, drawn from the config seed.
inline std::vector<AgentItem> make_items(const AgentConfig& c, std::size_t n, std::string_view prefix = "item") {
  std::vector<AgentItem> items(n);
  for (std::size_t i = 0; i < n; ++i) {
    items[i].item_id = std::string(prefix) + std::to_string(i);
    std::mt19937_64 rng(derive_seed(derive_seed(c.seed, "items"), items[i].item_id));
    items[i].knowledge = std::normal_distribution<double>(c.knowledge_mean, c.knowledge_sd)(rng);
    items[i].susceptibility = std::exp(c.susceptibility_sd * std::normal_distribution<double>()(rng));
  }
  return items;
}

struct ResidualTrace {
  std::string item_id;
  std::vector<Vec> layer_vectors;
};

// Evidence read from a trace, before the second stage.
struct Readout {
  std::array<double, 4> logits{};  // raw
  std::array<double, 4> probs{};   // calibrated real-option probabilities
  double confidence = 0;           // max probs
  int argmax = 0;                  // 0-based
};

struct SteeringVector {
  std::vector<Vec> layers;
  double scale_fraction = 0.03;
  std::vector<double> mean_norms;  // mean residual norm per layer
  std::size_t n_high = 0;
  std::size_t n_low = 0;
  double mean_margin_high = 0;
  double mean_margin_low = 0;
  bool degenerate = false;

  SteeringVector negated() const {
    SteeringVector v = *this;
    for (auto& l : v.layers) l = -l;
    return v;
  }
};

// Random quantities of one trial. The residual noise belongs to the item
// (option evidence is stored correct-first and follows the option order), so
// an item's confidence is stable across seeds; the seed sets the option order
// and the decision draws. The same draw serves every phase and steering
// condition, so paired comparisons differ only by the intervention.
struct TrialDraw {
  Vec noise;             // residual noise at layer 0
  double choice_u = 0;   // abstention draw
  double sample_u = 0;   // option draw when sampling
  int correct_position = 0;  // 0-based
};

class Agent {
 public:
  explicit Agent(AgentConfig cfg) : cfg_(std::move(cfg)) {
    validate(cfg_);
    std::mt19937_64 rng(derive_seed(cfg_.seed, "layers"));
    std::normal_distribution<double> nd(0.0, cfg_.mixing / std::sqrt(static_cast<double>(cfg_.dim)));
    for (int l = 0; l + 1 < cfg_.n_layers; ++l) {
      Mat p(cfg_.dim, cfg_.dim);
      for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = nd(rng);
      step_.push_back(Mat::Identity(cfg_.dim, cfg_.dim) + p);
    }
    // Resting state: the stream carrying only the bias. Readouts are taken
    // relative to it so the mixing's leak of the bias is not read as evidence.
    ResidualTrace rest;
    rest.layer_vectors.assign(static_cast<std::size_t>(cfg_.n_layers), Vec());
    rest.layer_vectors[0] = Vec::Zero(cfg_.dim);
    rest.layer_vectors[0](AgentConfig::kBiasCoord) = cfg_.bias_norm;
    forward_from(rest, 0);
    rest_ = cfg_.readout * window_mean(rest);
  }

  const AgentConfig& config() const noexcept { return cfg_; }

  TrialDraw draw(const AgentItem& item, std::int64_t seed) const {
    const auto item_seed = derive_seed(cfg_.seed, item.item_id);
    std::mt19937_64 item_rng(item_seed);
    std::normal_distribution<double> nd;
    TrialDraw d;
    d.noise = Vec(cfg_.dim);
    for (Eigen::Index i = 0; i < d.noise.size(); ++i) d.noise(i) = nd(item_rng);
    std::mt19937_64 rng(derive_seed(item_seed, static_cast<std::uint64_t>(seed)));
    std::uniform_real_distribution<double> u;
    d.choice_u = u(rng);
    d.sample_u = u(rng);
    d.correct_position = static_cast<int>(rng() % 4);
    return d;
  }

  // Layer-0 residual: option evidence, centred knowledge on the confidence direction,
  // a constant bias and nuisance noise.
  Vec encode(const AgentItem& item, const TrialDraw& d) const {
    Vec r = Vec::Zero(cfg_.dim);
    // noise(0) is the correct option's, noise(1..3) the distractors' in order.
    for (int i = 0, k = 1; i < 4; ++i) r(i) = cfg_.evidence_noise * d.noise(i == d.correct_position ? 0 : k++);
    r(d.correct_position) += item.knowledge;
    r(AgentConfig::kBiasCoord) = cfg_.bias_norm;
    for (int i = AgentConfig::kBiasCoord + 1; i < cfg_.dim; ++i) r(i) = cfg_.nuisance_sd * d.noise(i);
    r += (cfg_.confidence_coupling * (item.knowledge - cfg_.knowledge_mean) + cfg_.confidence_noise * d.noise(AgentConfig::kConfidenceCoord)) *
         cfg_.confidence_direction;
    return r;
  }

  // Recomputes layers after `from` from the vector at `from`.
  void forward_from(ResidualTrace& t, int from) const {
    for (int l = from; l + 1 < cfg_.n_layers; ++l)
      t.layer_vectors[static_cast<std::size_t>(l + 1)] = step_[static_cast<std::size_t>(l)] * t.layer_vectors[static_cast<std::size_t>(l)];
  }

  ResidualTrace trace(const AgentItem& item, const TrialDraw& d) const {
    ResidualTrace t;
    t.item_id = item.item_id;
    t.layer_vectors.assign(static_cast<std::size_t>(cfg_.n_layers), Vec());
    t.layer_vectors[0] = encode(item, d);
    forward_from(t, 0);
    return t;
  }

  // r~(l) = r(l) + alpha v(l); downstream layers recomputed.
  ResidualTrace apply_steering(const ResidualTrace& t, const SteeringVector& v, double alpha, int layer) const {
    if (layer < 0 || layer >= cfg_.n_layers) throw DomainError("apply_steering: layer " + std::to_string(layer) + " out of range");
    if (!std::isfinite(alpha)) throw DomainError("apply_steering: alpha must be finite");
    if (static_cast<int>(v.layers.size()) != cfg_.n_layers) throw DomainError("apply_steering: vector has wrong layer count");
    ResidualTrace out = t;
    out.layer_vectors[static_cast<std::size_t>(layer)] += alpha * v.layers[static_cast<std::size_t>(layer)];
    forward_from(out, layer);
    return out;
  }

  Vec window_mean(const ResidualTrace& t) const {
    Vec mean = Vec::Zero(cfg_.dim);
    for (int l = cfg_.window_lo; l <= cfg_.window_hi; ++l) mean += t.layer_vectors[static_cast<std::size_t>(l)];
    return mean / static_cast<double>(cfg_.window_hi - cfg_.window_lo + 1);
  }

  Readout readout(const ResidualTrace& t, double susceptibility = 1.0) const {
    const Vec e = cfg_.readout * window_mean(t) - rest_;
    const double g = std::exp(cfg_.gain * susceptibility * e(4));
    Readout r;
    std::vector<double> z(4);
    for (int i = 0; i < 4; ++i) z[static_cast<std::size_t>(i)] = r.logits[static_cast<std::size_t>(i)] = g * e(i);
    const auto p = calib::scaled_softmax(z, cfg_.tau_true);
    std::copy(p.begin(), p.end(), r.probs.begin());
    r.argmax = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
    r.confidence = p[static_cast<std::size_t>(r.argmax)];
    return r;
  }

  // Abstention probability for the phase. Phase 2 uses the implicit t50;
  // Phase 4 an instructed threshold in percent, T* = shift + scale * 100 C.
  double abstain_probability(double confidence, Phase phase, std::optional<double> threshold) const {
    if (phase == Phase::P4) {
      if (!threshold) throw DomainError("Phase 4 simulation needs a threshold");
      const double t_star = cfg_.p4_shift + cfg_.p4_scale * 100.0 * confidence;
      return stats::sigmoid((*threshold - t_star) / (100.0 * cfg_.policy_tau));
    }
    return stats::sigmoid((cfg_.policy_t50 - confidence) / cfg_.policy_tau);
  }

  // Turns a readout into a trial. Phase 1 answers among four options; later
  // phases add the abstention option. Options are chosen greedily unless a
  // sampling temperature is given.
  Trial decide(const AgentItem& item, const TrialDraw& d, const Readout& r, Phase phase, std::int64_t seed,
               std::optional<double> threshold = std::nullopt, double sampling_temperature = 0.0) const {
    Trial t;
    t.item_id = item.item_id;
    t.phase = phase;
    t.seed = seed;
    t.correct_option = d.correct_position + 1;
    t.calibrated = true;
    int answer = r.argmax;
    if (sampling_temperature > 0) {
      std::array<double, 4> w{};
      double total = 0;
      for (int i = 0; i < 4; ++i) total += w[static_cast<std::size_t>(i)] = std::pow(r.probs[static_cast<std::size_t>(i)], 1.0 / sampling_temperature);
      double acc = 0;
      answer = 3;
      for (int i = 0; i < 4; ++i) {
        acc += w[static_cast<std::size_t>(i)] / total;
        if (d.sample_u < acc) {
          answer = i;
          break;
        }
      }
    }
    if (phase == Phase::P1) {
      t.option_probs.assign(r.probs.begin(), r.probs.end());
      t.logits = std::vector<double>(r.logits.begin(), r.logits.end());
      t.chosen = answer + 1;
    } else {
      const double q = abstain_probability(r.confidence, phase, threshold);
      t.option_probs.resize(5);
      for (int i = 0; i < 4; ++i) t.option_probs[static_cast<std::size_t>(i)] = (1 - q) * r.probs[static_cast<std::size_t>(i)];
      t.option_probs[4] = q;
      t.chosen = d.choice_u < q ? kAbstainOption : answer + 1;
      if (phase == Phase::P4) t.instructed_threshold = threshold;
    }
    t.abstained = t.chosen == kAbstainOption;
    t.is_correct = t.chosen == t.correct_option;
    return t;
  }

 private:
  AgentConfig cfg_;
  std::vector<Mat> step_;  // I + P_l
  Vec rest_;               // readout of the resting state
};

struct SimulateOptions {
  std::int64_t seed = 0;
  std::optional<double> threshold;     // Phase 4, percent
  double sampling_temperature = 0.0;   // 0 = greedy
  bool keep_traces = false;
  unsigned workers = default_workers();
};

struct Simulation {
  PhaseRun run;
  std::vector<ResidualTrace> traces;
};

// One trial per item. Phase 3 is produced by steering_sweep, not here.
inline Simulation simulate_phase(const Agent& agent, const std::vector<AgentItem>& items, Phase phase,
                                 const SimulateOptions& opt = {}) {
  if (items.empty()) throw DomainError("simulate_phase: no items");
  if (phase == Phase::P3) throw DomainError("simulate_phase: Phase 3 trials come from steering_sweep");
  if (phase == Phase::P4 && !opt.threshold) throw DomainError("simulate_phase: Phase 4 needs a threshold");
  Simulation sim;
  sim.run.phase = phase;
  sim.run.run_id = to_string(phase) + "-seed" + std::to_string(opt.seed);
  sim.run.provenance = "synthetic agent";
  sim.run.trials.resize(items.size());
  if (opt.keep_traces) sim.traces.resize(items.size());
  parallel_for(items.size(), opt.workers, [&](std::size_t i) {
    const auto d = agent.draw(items[i], opt.seed);
    auto tr = agent.trace(items[i], d);
    sim.run.trials[i] = agent.decide(items[i], d, agent.readout(tr, items[i].susceptibility), phase, opt.seed,
                                     phase == Phase::P4 ? opt.threshold : std::nullopt, opt.sampling_temperature);
    if (opt.keep_traces) sim.traces[i] = std::move(tr);
  });
  return sim;
}

// Phase 4 run over every threshold in `thresholds` (one trial per item each).
inline PhaseRun simulate_phase4(const Agent& agent, const std::vector<AgentItem>& items,
                                const std::vector<double>& thresholds, std::int64_t seed,
                                unsigned workers = default_workers()) {
  PhaseRun run;
  run.phase = Phase::P4;
  run.run_id = "P4-seed" + std::to_string(seed);
  run.provenance = "synthetic agent";
  for (double t : thresholds) {
    SimulateOptions opt;
    opt.seed = seed;
    opt.threshold = t;
    opt.workers = workers;
    auto sim = simulate_phase(agent, items, Phase::P4, opt);
    for (auto& tr : sim.run.trials) run.trials.push_back(std::move(tr));
  }
  return run;
}

// m = max of the four real-option probabilities minus the abstention one.
inline double confidence_margin(std::span<const double> probs) {
  if (probs.size() != 5) throw DomainError("confidence_margin: need 5 probabilities, got " + std::to_string(probs.size()));
  return *std::max_element(probs.begin(), probs.begin() + 4) - probs[4];
}

struct ContrastSelection {
  std::vector<std::size_t> high;  // indices into the trial list
  std::vector<std::size_t> low;
  double mean_margin_high = 0;
  double mean_margin_low = 0;
};

struct SelectionOptions {
  std::size_t pool = 75;     // top / bottom pool size
  std::size_t take = 25;     // trials per group
  std::size_t max_per_option = 7;  // 28% of 25
  std::size_t min_eligible = 150;
};

namespace detail {

// Round-robin over options, each round visiting options in order of their
// best remaining margin, taking one trial per option until `take` are chosen
// or every option is exhausted or capped. `pool` is in priority order.
inline std::vector<std::size_t> pick_balanced(const std::vector<std::size_t>& pool, const std::vector<Trial>& trials,
                                              const SelectionOptions& opt, const char* which) {
  std::array<std::vector<std::size_t>, 4> queues;
  for (auto i : pool) queues[static_cast<std::size_t>(trials[i].chosen - 1)].push_back(i);
  std::array<std::size_t, 4> next{};
  std::vector<std::size_t> out;
  auto rank = [&](std::size_t idx) { return std::find(pool.begin(), pool.end(), idx) - pool.begin(); };
  while (out.size() < opt.take) {
    std::vector<std::size_t> order;
    for (std::size_t k = 0; k < 4; ++k)
      if (next[k] < queues[k].size() && next[k] < opt.max_per_option) order.push_back(k);
    if (order.empty()) break;
    std::sort(order.begin(), order.end(),
              [&](auto a, auto b) { return rank(queues[a][next[a]]) < rank(queues[b][next[b]]); });
    for (auto k : order) {
      out.push_back(queues[k][next[k]++]);
      if (out.size() == opt.take) break;
    }
  }
  if (out.size() == opt.take) return out;
  std::string msg = std::string("contrast selection infeasible for ") + which + " set: option counts in pool";
  for (std::size_t k = 0; k < 4; ++k) msg += " " + std::to_string(k + 1) + "=" + std::to_string(queues[k].size());
  msg += "; need " + std::to_string(opt.take) + " with at most " + std::to_string(opt.max_per_option) + " per option";
  throw DomainError(msg);
}

}  // namespace detail

// Eligible trials are correct real-option answers. Ranked by margin, the
// top and bottom pools each yield `take` trials chosen in margin order
// (highest first for H, lowest first for L) subject to the per-option cap.
inline ContrastSelection select_contrast_trials(const std::vector<Trial>& trials, const SelectionOptions& opt = {}) {
  std::vector<std::size_t> eligible;
  std::vector<double> margin(trials.size(), 0.0);
  for (std::size_t i = 0; i < trials.size(); ++i) {
    const auto& t = trials[i];
    if (t.option_probs.size() != 5) throw DomainError("select_contrast_trials: trials need 5 option probabilities");
    if (!t.is_correct || t.abstained) continue;
    margin[i] = confidence_margin(t.option_probs);
    eligible.push_back(i);
  }
  if (eligible.size() < opt.min_eligible)
    throw DomainError("select_contrast_trials: " + std::to_string(eligible.size()) + " eligible trials, need " +
                      std::to_string(opt.min_eligible));
  std::stable_sort(eligible.begin(), eligible.end(), [&](auto a, auto b) { return margin[a] > margin[b]; });
  std::vector<std::size_t> top(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(opt.pool));
  std::vector<std::size_t> bottom(eligible.end() - static_cast<std::ptrdiff_t>(opt.pool), eligible.end());
  std::reverse(bottom.begin(), bottom.end());
  ContrastSelection s;
  s.high = detail::pick_balanced(top, trials, opt, "high");
  s.low = detail::pick_balanced(bottom, trials, opt, "low");
  for (auto i : s.high) s.mean_margin_high += margin[i] / static_cast<double>(s.high.size());
  for (auto i : s.low) s.mean_margin_low += margin[i] / static_cast<double>(s.low.size());
  return s;
}

// Rescales `raw` to norm fraction * mean_norm. A zero vector stays zero.
inline Vec scale_to_fraction(const Vec& raw, double mean_norm, double fraction) {
  const double n = raw.norm();
  if (n == 0.0) return raw;
  return raw * (fraction * mean_norm / n);
}

// v(l) = mean H trace - mean L trace at each layer, rescaled to
// scale_fraction times the mean residual norm over H and L at that layer.
inline SteeringVector build_steering_vector(const std::vector<ResidualTrace>& high, const std::vector<ResidualTrace>& low,
                                            double scale_fraction = 0.03) {
  if (high.empty() || low.empty()) throw DomainError("build_steering_vector: empty trial group");
  const auto n_layers = high.front().layer_vectors.size();
  const auto dim = high.front().layer_vectors.front().size();
  auto check = [&](const ResidualTrace& t) {
    if (t.layer_vectors.size() != n_layers) throw DomainError("build_steering_vector: traces differ in layer count");
    for (const auto& v : t.layer_vectors)
      if (v.size() != dim) throw DomainError("build_steering_vector: traces differ in dimension");
  };
  for (const auto& t : high) check(t);
  for (const auto& t : low) check(t);

  SteeringVector sv;
  sv.scale_fraction = scale_fraction;
  sv.n_high = high.size();
  sv.n_low = low.size();
  bool all_zero = true;
  for (std::size_t l = 0; l < n_layers; ++l) {
    Vec mh = Vec::Zero(dim), ml = Vec::Zero(dim);
    double norm_sum = 0;
    for (const auto& t : high) {
      mh += t.layer_vectors[l];
      norm_sum += t.layer_vectors[l].norm();
    }
    for (const auto& t : low) {
      ml += t.layer_vectors[l];
      norm_sum += t.layer_vectors[l].norm();
    }
    const Vec diff = mh / static_cast<double>(high.size()) - ml / static_cast<double>(low.size());
    const double mean_norm = norm_sum / static_cast<double>(high.size() + low.size());
    if (diff.norm() > 1e-12 * std::max(1.0, mean_norm)) all_zero = false;
    sv.layers.push_back(diff.norm() > 1e-12 * std::max(1.0, mean_norm) ? scale_to_fraction(diff, mean_norm, scale_fraction)
                                                                          : Vec::Zero(dim));
    sv.mean_norms.push_back(mean_norm);
  }
  sv.degenerate = all_zero;
  return sv;
}

// A steering vector along a fixed direction, norm-scaled per layer like
// build_steering_vector.
inline SteeringVector direction_vector(const Agent& agent, const std::vector<ResidualTrace>& reference, const Vec& direction,
                                       double scale_fraction = 0.03) {
  if (reference.empty()) throw DomainError("direction_vector: no reference traces");
  SteeringVector sv;
  sv.scale_fraction = scale_fraction;
  for (int l = 0; l < agent.config().n_layers; ++l) {
    double norm_sum = 0;
    for (const auto& t : reference) norm_sum += t.layer_vectors[static_cast<std::size_t>(l)].norm();
    const double mean_norm = norm_sum / static_cast<double>(reference.size());
    sv.layers.push_back(scale_to_fraction(direction, mean_norm, scale_fraction));
    sv.mean_norms.push_back(mean_norm);
  }
  return sv;
}

inline void validate_alphas(std::span<const double> alphas) {
  for (double a : alphas)
    if (std::find(kSteeringGrid.begin(), kSteeringGrid.end(), a) == kSteeringGrid.end())
      throw ValidationError("alphas: " + std::to_string(a) + " is not one of +-0.5, +-1.0, +-1.5, +-2.0");
}

struct SweepCell {
  double alpha = 0;
  int layer = 0;
  long n = 0;
  double abstention_rate = 0;
  double d_max_real_conf = 0;   // mean over items of steered minus baseline
  double d_abstain_conf = 0;
  double accuracy_on_answered = 0;  // NaN when nothing was answered
};

struct SweepResult {
  double baseline_abstention = 0;
  std::vector<SweepCell> cells;
  PhaseRun baseline;  // unsteered trials, stored as a Phase 2 run
  PhaseRun steered;   // Phase 3 trials
  std::vector<mediate::MediationInput> mediation;
};

struct SweepOptions {
  std::vector<double> alphas{kSteeringGrid.begin(), kSteeringGrid.end()};
  std::vector<int> layers;
  std::int64_t seed = 0;
  bool validate_grid = true;
  unsigned workers = default_workers();
};

// Applies every (alpha, layer) to every item with the item's baseline draw,
// so each steered trial is paired with its own unsteered counterpart.
inline SweepResult steering_sweep(const Agent& agent, const std::vector<AgentItem>& items, const SteeringVector& v,
                                  const SweepOptions& opt, const std::map<std::string, double>* difficulty = nullptr) {
  if (items.empty()) throw DomainError("steering_sweep: no items");
  if (opt.validate_grid) validate_alphas(opt.alphas);
  if (opt.layers.empty()) throw DomainError("steering_sweep: no layers");
  const std::size_t n_cond = opt.alphas.size() * opt.layers.size();

  std::vector<Trial> base(items.size());
  std::vector<std::vector<Trial>> steered(items.size(), std::vector<Trial>(n_cond));
  parallel_for(items.size(), opt.workers, [&](std::size_t i) {
    const auto d = agent.draw(items[i], opt.seed);
    const auto tr = agent.trace(items[i], d);
    base[i] = agent.decide(items[i], d, agent.readout(tr, items[i].susceptibility), Phase::P2, opt.seed);
    std::size_t k = 0;
    for (double a : opt.alphas)
      for (int l : opt.layers) {
        auto t = agent.decide(items[i], d, agent.readout(agent.apply_steering(tr, v, a, l), items[i].susceptibility), Phase::P2, opt.seed);
        t.phase = Phase::P3;
        t.steering_strength = a;
        t.layer = l;
        steered[i][k++] = std::move(t);
      }
  });

  SweepResult res;
  res.baseline.phase = Phase::P2;
  res.baseline.run_id = "baseline-seed" + std::to_string(opt.seed);
  res.baseline.provenance = "synthetic agent, unsteered";
  res.steered.phase = Phase::P3;
  res.steered.run_id = "steer-seed" + std::to_string(opt.seed);
  res.steered.provenance = "synthetic agent, steered";
  res.baseline.trials = base;
  long base_abstain = 0;
  for (const auto& t : base) base_abstain += t.abstained;
  res.baseline_abstention = static_cast<double>(base_abstain) / static_cast<double>(base.size());

  std::size_t k = 0;
  for (double a : opt.alphas)
    for (int l : opt.layers) {
      SweepCell c;
      c.alpha = a;
      c.layer = l;
      long abst = 0, answered = 0, correct = 0;
      for (std::size_t i = 0; i < items.size(); ++i) {
        const auto& s = steered[i][k];
        const auto& b = base[i];
        abst += s.abstained;
        if (!s.abstained) {
          ++answered;
          correct += s.is_correct;
        }
        c.d_max_real_conf += s.max_real_confidence() - b.max_real_confidence();
        c.d_abstain_conf += s.abstain_confidence() - b.abstain_confidence();
      }
      c.n = static_cast<long>(items.size());
      c.abstention_rate = static_cast<double>(abst) / static_cast<double>(c.n);
      c.d_max_real_conf /= static_cast<double>(c.n);
      c.d_abstain_conf /= static_cast<double>(c.n);
      c.accuracy_on_answered = answered ? static_cast<double>(correct) / static_cast<double>(answered)
                                        : std::numeric_limits<double>::quiet_NaN();
      res.cells.push_back(c);
      ++k;
    }

  for (std::size_t i = 0; i < items.size(); ++i)
    for (const auto& s : steered[i]) {
      res.steered.trials.push_back(s);
      mediate::MediationInput m;
      m.item_id = s.item_id;
      m.x = *s.steering_strength;
      m.y = s.abstained;
      m.c_m = s.max_real_confidence();
      m.c_5 = s.abstain_confidence();
      m.c_m_baseline = base[i].max_real_confidence();
      m.c_5_baseline = base[i].abstain_confidence();
      m.y_baseline = base[i].abstained;
      m.layer = s.layer;
      if (difficulty) {
        auto it = difficulty->find(s.item_id);
        if (it != difficulty->end()) m.difficulty = it->second;
      }
      res.mediation.push_back(std::move(m));
    }
  return res;
}

// Mean abstention rate per alpha, averaged over the swept layers.
inline std::vector<std::pair<double, double>> abstention_by_alpha(const SweepResult& r) {
  std::map<double, std::pair<double, int>> acc;
  for (const auto& c : r.cells) {
    acc[c.alpha].first += c.abstention_rate;
    acc[c.alpha].second += 1;
  }
  std::vector<std::pair<double, double>> out;
  for (const auto& [a, v] : acc) out.emplace_back(a, v.first / v.second);
  return out;
}

struct Experiment {
  Simulation contrast_run;  // unsteered Phase 2 trials used for H/L selection
  ContrastSelection selection;
  SteeringVector vector;
  SweepResult sweep;
};

// Full pipeline: simulate Phase 2 with traces, select H/L trials, build the
// vector and sweep it over `sweep_items`.
inline Experiment run_steering_experiment(const Agent& agent, const std::vector<AgentItem>& contrast_items,
                                          const std::vector<AgentItem>& sweep_items, const SweepOptions& sweep_opt,
                                          double scale_fraction = 0.03, const SelectionOptions& sel = {}) {
  Experiment e;
  SimulateOptions so;
  so.seed = sweep_opt.seed;
  so.keep_traces = true;
  so.workers = sweep_opt.workers;
  e.contrast_run = simulate_phase(agent, contrast_items, Phase::P2, so);
  e.selection = select_contrast_trials(e.contrast_run.run.trials, sel);
  std::vector<ResidualTrace> hi, lo;
  for (auto i : e.selection.high) hi.push_back(e.contrast_run.traces[i]);
  for (auto i : e.selection.low) lo.push_back(e.contrast_run.traces[i]);
  e.vector = build_steering_vector(hi, lo, scale_fraction);
  e.vector.mean_margin_high = e.selection.mean_margin_high;
  e.vector.mean_margin_low = e.selection.mean_margin_low;
  e.sweep = steering_sweep(agent, sweep_items, e.vector, sweep_opt);
  return e;
}

inline void save_sweep_csv(const SweepResult& r, const std::filesystem::path& path) {
  auto out = open_for_write(path);
  out << "alpha,layer,n,abstention_rate,d_max_real_conf,d_abstain_conf,accuracy_on_answered\n";
  auto num = [](double v) { return std::isfinite(v) ? abstain::detail::format_double(v) : std::string("NA"); };
  for (const auto& c : r.cells)
    out << num(c.alpha) << ',' << c.layer << ',' << c.n << ',' << num(c.abstention_rate) << ',' << num(c.d_max_real_conf)
        << ',' << num(c.d_abstain_conf) << ',' << num(c.accuracy_on_answered) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace abstain::steerlab
