#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "abstain/cli.hpp"
#include "bandness_generators.hpp"

using namespace abstain;
using Catch::Matchers::ContainsSubstring;

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / "abstain_cli_test" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// One shared simulated dataset for the fitting tests.
const fs::path& simulated() {
  static const fs::path dir = [] {
    auto d = scratch("sim");
    const auto r = run({"simulate", "--seed", "5", "--items", "300", "--out", d.string()});
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("fit-phase2 writes suite JSON and comparison CSV") {
  const auto& sim = simulated();
  const auto out = scratch("fit2");
  const auto r = run({"fit-phase2", "--trials", (sim / "p2.jsonl").string(), "--features", (sim / "features.csv").string(),
                      "--phase1", (sim / "p1.jsonl").string(), "--out", out.string()});
  REQUIRE(r.code == 0);
  const auto suite = load_json(out / "phase2_suite.json");
  CHECK(suite["models"].size() == 6);
  CHECK(suite["derived"].contains("confidence+difficulty"));
  const auto csv = slurp(out / "phase2_comparison.csv");
  CHECK(csv.rfind("model,baseline,status,aic,baseline_aic,delta_aic,pseudo_r2,lr_chi2,df,p_value\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
  CHECK_THAT(r.out, ContainsSubstring("T50"));

  // Without --phase1 the fallback confidence is used and a warning printed.
  const auto w = run({"fit-phase2", "--trials", (sim / "p2.jsonl").string(), "--features", (sim / "features.csv").string(),
                      "--out", scratch("fit2b").string()});
  CHECK(w.code == 0);
  CHECK_THAT(w.out, ContainsSubstring("warning: no Phase 1 run given"));

  // A P4 file is rejected as a validation error.
  const auto bad = run({"fit-phase2", "--trials", (sim / "p4.jsonl").string(), "--features", (sim / "features.csv").string(),
                        "--out", scratch("fit2c").string()});
  CHECK(bad.code == 2);
}

TEST_CASE("fit-phase4 writes suite, heatmap and abstention-confidence model") {
  const auto& sim = simulated();
  const auto out = scratch("fit4");
  const auto r = run({"fit-phase4", "--trials", (sim / "p4.jsonl").string(), "--features", (sim / "features.csv").string(),
                      "--phase1", (sim / "p1.jsonl").string(), "--out", out.string()});
  REQUIRE(r.code == 0);
  CHECK(load_json(out / "phase4_suite.json")["models"].size() == 7);
  CHECK(fs::exists(out / "abstention_confidence.json"));
  const auto heat = slurp(out / "heatmap.csv");
  CHECK(heat.rfind("threshold,0.0-0.1,0.1-0.2,", 0) == 0);
  CHECK_THAT(heat, ContainsSubstring("# bandness_index="));
  CHECK_THAT(r.out, ContainsSubstring("scale"));
}

TEST_CASE("heatmap emission: NA cells, footer and degenerate grids") {
  std::vector<policy::PolicyRow> rows;
  for (int t : {20, 80})
    for (double c : {0.15, 0.75}) {
      policy::PolicyRow r;
      r.item_id = "x";
      r.threshold = t;
      r.confidence = c;
      r.abstained = (t / 100.0 > c) ? 1 : 0;
      rows.push_back(r);
    }
  std::ostringstream os;
  const auto b = cli::emit_heatmap_data(rows, os);
  const auto s = os.str();
  CHECK_THAT(s, ContainsSubstring("20,NA,1,NA,NA,NA,NA,NA,0,NA,NA\n"));
  CHECK_THAT(s, ContainsSubstring("80,NA,1,NA,NA,NA,NA,NA,1,NA,NA\n"));
  CHECK_THAT(s, ContainsSubstring("# bandness_index=" + cli::num(b.index)));

  auto single = rows;
  for (auto& r : single) r.threshold = 50;
  std::ostringstream ignored;
  CHECK_THROWS_MATCHES(cli::emit_heatmap_data(single, ignored), DomainError,
                       Catch::Matchers::MessageMatches(ContainsSubstring("grid degenerate")));
}

TEST_CASE("bandness separates pre- and post-decisional generators") {
  std::ostringstream os;
  const auto pre = cli::emit_heatmap_data(bandness_gen::pre_decisional(1), os);
  const auto post = cli::emit_heatmap_data(bandness_gen::post_decisional(1), os);
  CHECK(std::abs(pre.index) < 0.15);
  CHECK(post.index > 0.6);
}

TEST_CASE("exit codes follow the 0/1/2 contract") {
  const auto unknown = run({"mediate", "--inputs", "x.jsonl", "--seed", "1", "--out", "o", "--frobnicate"});
  CHECK(unknown.code == 2);
  CHECK_THAT(unknown.err, ContainsSubstring("--frobnicate"));
  CHECK_THAT(unknown.err, ContainsSubstring("Usage:"));

  const auto no_seed = run({"mediate", "--inputs", "x.jsonl", "--out", scratch("m").string()});
  CHECK(no_seed.code == 2);
  CHECK_THAT(no_seed.err, ContainsSubstring("--seed"));

  CHECK(run({}).code == 2);
  CHECK(run({"frobnicate"}).code == 2);

  // Missing input file is an I/O failure, not a validation error.
  const auto missing = run({"report", "--fit", (scratch("r") / "none.json").string()});
  CHECK(missing.code == 1);

  // Malformed input is a validation error.
  const auto dir = scratch("bad");
  std::ofstream(dir / "t.jsonl") << "{\"item_id\":\n";
  const auto malformed = run({"calibrate", "--trials", (dir / "t.jsonl").string(), "--out", dir.string()});
  CHECK(malformed.code == 2);
}

TEST_CASE("every subcommand's help lists its flags") {
  const std::map<std::string, std::vector<std::string>> expected = {
      {"calibrate", {"--trials", "--bins", "--binning", "--out", "--workers", "--config"}},
      {"simulate", {"--seed", "--items", "--profile", "--thresholds", "--t50", "--tau", "--out"}},
      {"fit-phase2", {"--trials", "--features", "--phase1", "--standardize", "--diff-at", "--out"}},
      {"fit-phase4", {"--trials", "--features", "--phase1", "--standardize", "--out"}},
      {"steer", {"--seed", "--alphas", "--layers", "--items", "--contrast-items", "--fraction", "--out"}},
      {"mediate", {"--inputs", "--seed", "--B", "--difficulty", "--no-bootstrap", "--out"}},
      {"features", {"--runs", "--embeddings", "--k", "--corpus", "--questions", "--out"}},
      {"report", {"--fit", "--suite", "--mediation", "--out"}}};
  for (const auto& [sub, flags] : expected) {
    const auto r = run({sub, "--help"});
    INFO(sub);
    CHECK(r.code == 0);
    for (const auto& f : flags) CHECK_THAT(r.out, ContainsSubstring(f));
  }
}

TEST_CASE("report --fit renders a Markdown coefficient table") {
  glm::Design d(6);
  d.add("confidence", std::vector<double>{0.1, 0.2, 0.3, 0.6, 0.7, 0.9});
  const auto fit = glm::fit_logit(d, std::vector<double>{1, 1, 0, 1, 0, 0});
  const auto dir = scratch("report");
  save_fit(fit, dir / "fit.json");
  const auto r = run({"report", "--fit", (dir / "fit.json").string(), "--out", dir.string()});
  REQUIRE(r.code == 0);
  CHECK_THAT(r.out, ContainsSubstring("| Predictor | Coefficient | SE | z | p |"));
  CHECK_THAT(r.out, ContainsSubstring("| (Intercept) | " + cli::fixed(fit.coef[0], 4) + " | " + cli::fixed(fit.se[0], 4)));
  CHECK_THAT(r.out, ContainsSubstring("| confidence | "));
  CHECK(slurp(dir / "report.md") == r.out);
  CHECK(run({"report", "--out", dir.string()}).code == 2);
}

TEST_CASE("same argv and seed give byte-identical artifacts") {
  const auto a = scratch("det_a"), b = scratch("det_b");
  REQUIRE(run({"simulate", "--seed", "9", "--items", "60", "--out", a.string(), "--workers", "1"}).code == 0);
  REQUIRE(run({"simulate", "--seed", "9", "--items", "60", "--out", b.string(), "--workers", "8"}).code == 0);
  for (const char* f : {"p1.jsonl", "p2.jsonl", "p4.jsonl", "features.csv", "embeddings.jsonl", "truth.json"})
    CHECK(slurp(a / f) == slurp(b / f));

  const auto c = scratch("det_c");
  REQUIRE(run({"simulate", "--seed", "10", "--items", "60", "--out", c.string()}).code == 0);
  CHECK(slurp(a / "p2.jsonl") != slurp(c / "p2.jsonl"));

  const auto s1 = scratch("steer_a"), s2 = scratch("steer_b");
  const std::vector<std::string> steer = {"steer", "--seed", "3", "--items", "150", "--contrast-items", "500"};
  auto args1 = steer, args2 = steer;
  args1.insert(args1.end(), {"--out", s1.string(), "--workers", "1"});
  args2.insert(args2.end(), {"--out", s2.string(), "--workers", "6"});
  REQUIRE(run(args1).code == 0);
  REQUIRE(run(args2).code == 0);
  for (const char* f : {"sweep.csv", "mediation_inputs.jsonl", "p3.jsonl", "vector.json"}) CHECK(slurp(s1 / f) == slurp(s2 / f));

  const auto m1 = scratch("med_a"), m2 = scratch("med_b");
  const auto in = (s1 / "mediation_inputs.jsonl").string();
  REQUIRE(run({"mediate", "--inputs", in, "--seed", "4", "--B", "100", "--out", m1.string(), "--workers", "1"}).code == 0);
  REQUIRE(run({"mediate", "--inputs", in, "--seed", "4", "--B", "100", "--out", m2.string(), "--workers", "5"}).code == 0);
  CHECK(slurp(m1 / "mediation.json") == slurp(m2 / "mediation.json"));
}

TEST_CASE("config file supplies defaults and flags take precedence") {
  const auto dir = scratch("config");
  std::ofstream(dir / "run.cfg") << "# simulation settings\nseed = 9\nitems=60\nprofile = standard\n";
  const auto a = dir / "a", b = dir / "b";
  REQUIRE(run({"simulate", "--config", (dir / "run.cfg").string(), "--out", a.string()}).code == 0);
  REQUIRE(run({"simulate", "--seed", "9", "--items", "60", "--out", b.string()}).code == 0);
  CHECK(slurp(a / "p2.jsonl") == slurp(b / "p2.jsonl"));

  const auto c = dir / "c";
  REQUIRE(run({"simulate", "--config", (dir / "run.cfg").string(), "--items", "30", "--out", c.string()}).code == 0);
  CHECK(load_json(c / "truth.json")["items"] == 30);

  std::ofstream(dir / "bad.cfg") << "seed = 1\nwidgets = 3\n";
  const auto bad = run({"simulate", "--config", (dir / "bad.cfg").string(), "--out", (dir / "d").string()});
  CHECK(bad.code == 2);
  CHECK_THAT(bad.err, ContainsSubstring("widgets"));

  std::ofstream(dir / "noline.cfg") << "seed\n";
  CHECK(run({"simulate", "--config", (dir / "noline.cfg").string(), "--out", (dir / "e").string()}).code == 2);
}

TEST_CASE("calibrate, steer and mediate produce their artifacts") {
  const auto& sim = simulated();
  const auto cal = scratch("cal");
  const auto r = run({"calibrate", "--trials", (sim / "p1.jsonl").string(), "--out", cal.string()});
  REQUIRE(r.code == 0);
  const auto j = load_json(cal / "calibration.json");
  CHECK(j["ece_after"].get<double>() <= j["ece_before"].get<double>());
  const auto calibrated = load_trials(cal / "p1.calibrated.jsonl");
  CHECK(calibrated.trials.size() == 300);

  const auto st = scratch("steer");
  const auto s = run({"steer", "--seed", "7", "--items", "200", "--contrast-items", "500", "--out", st.string()});
  REQUIRE(s.code == 0);
  CHECK_THAT(s.out, ContainsSubstring("corr(alpha, abstention)"));
  CHECK(load_trials(st / "p3.jsonl").trials.size() == 200 * 8 * 4);
  CHECK(run({"steer", "--seed", "7", "--alphas", "0.7", "--out", st.string()}).code == 2);
  CHECK(run({"steer", "--seed", "7", "--layers", "40", "--out", st.string()}).code == 2);

  const auto md = scratch("med");
  const auto m = run({"mediate", "--inputs", (st / "mediation_inputs.jsonl").string(), "--seed", "1", "--B", "100", "--out", md.string()});
  REQUIRE(m.code == 0);
  CHECK_THAT(m.out, ContainsSubstring("| M1 |"));
  const auto rep = run({"report", "--mediation", (md / "mediation.json").string()});
  CHECK(rep.code == 0);
  CHECK_THAT(rep.out, ContainsSubstring("| a1 |"));
  CHECK(run({"mediate", "--inputs", (st / "mediation_inputs.jsonl").string(), "--seed", "1", "--B", "50", "--out", md.string()}).code == 2);
}

TEST_CASE("features subcommand builds feature rows and retrieves contexts") {
  const auto dir = scratch("features");
  REQUIRE(run({"simulate", "--seed", "20", "--items", "40", "--out", (dir / "run0").string()}).code == 0);
  std::ofstream(dir / "corpus.jsonl") << R"({"doc_id":"d1","title":"Rivers","text":"The Danube flows through central Europe."})" "\n"
                                      << R"({"doc_id":"d2","title":"Peaks","text":"Mount Everest height is 8849 metres."})" "\n";
  std::ofstream(dir / "questions.jsonl") << R"({"item_id":"q1","question":"Which river crosses central Europe?"})" "\n"
                                         << R"({"item_id":"q2","question":"zzz"})" "\n";
  // The same run twice stands in for two seeds.
  const auto run0 = (dir / "run0" / "p1.jsonl").string();
  const auto r = run({"features", "--runs", run0 + "," + run0, "--embeddings", (dir / "run0" / "embeddings.jsonl").string(),
                      "--corpus", (dir / "corpus.jsonl").string(), "--questions", (dir / "questions.jsonl").string(), "--out",
                      dir.string()});
  REQUIRE(r.code == 0);
  CHECK(load_features(dir / "features.csv").size() == 40);
  const auto ctx = slurp(dir / "contexts.jsonl");
  CHECK_THAT(ctx, ContainsSubstring("Danube"));
  CHECK_THAT(r.out, ContainsSubstring("1 with no match"));
  CHECK(run({"features", "--runs", run0, "--out", dir.string()}).code == 2);
}
