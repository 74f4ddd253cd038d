// Acceptance suite: one PASS/FAIL line per criterion. Pipeline criteria drive
// metaemg_cli; invariants and stubs run in-process on the library.
//
//   acceptance --work DIR [--config configs/acceptance.json] [--seeds 5] [--only NAME]

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "metaemg/harness.hpp"

#ifndef METAEMG_CLI_PATH
#error "METAEMG_CLI_PATH must name the metaemg_cli binary"
#endif
#ifndef METAEMG_CONFIG_DIR
#error "METAEMG_CONFIG_DIR must name the configs directory"
#endif

namespace fs = std::filesystem;
using namespace metaemg;
using nlohmann::json;

namespace {

// Pinned tolerances.
constexpr double kTinyGradTol = 1e-6;
constexpr double kFullGradTol = 1e-5;
constexpr double kGradSeconds = 120.0;
constexpr double kMetaGradTol = 1e-5;
constexpr double kMetaGradSeconds = 300.0;
constexpr double kClosedFormTol = 1e-6;
constexpr double kPreprocessSeconds = 60.0;
constexpr double kOrderingGap = 1.0;  // accuracy points
constexpr double kChanceLow = 25.0;
constexpr double kChanceHigh = 45.0;
constexpr int kMinSeeds = 5;

struct Outcome {
  std::string name;
  bool pass = false;
  std::string detail;
};

std::vector<Outcome> outcomes;

void report(const std::string& name, bool pass, const std::string& detail) {
  outcomes.push_back({name, pass, detail});
  std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

/// Runs the CLI with `args`, output appended to work/cli.log. Returns the exit status.
int cli(const fs::path& work, const std::string& args) {
  const std::string cmd = std::string("\"") + METAEMG_CLI_PATH + "\" " + args + " >> \"" + (work / "cli.log").string() +
                          "\" 2>&1";
  {
    std::ofstream log(work / "cli.log", std::ios::app);
    log << "$ metaemg_cli " << args << "\n";
  }
  const int status = std::system(cmd.c_str());
  return status == 0 ? 0 : (WIFEXITED(status) ? WEXITSTATUS(status) : 255);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

/// Byte-compares every regular file under two directories.
bool same_tree(const fs::path& a, const fs::path& b, std::string& why) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), a));
  std::size_t count_b = 0;
  for (const auto& e : fs::recursive_directory_iterator(b)) count_b += e.is_regular_file();
  if (files.size() != count_b) {
    why = "file counts differ";
    return false;
  }
  for (const fs::path& f : files) {
    if (!fs::exists(b / f) || slurp(a / f) != slurp(b / f)) {
      why = f.string() + " differs";
      return false;
    }
  }
  why = std::to_string(files.size()) + " files identical";
  return true;
}

// ---------------------------------------------------------------------------

void gradient_oracles(const fs::path& work) {
  const fs::path out = work / "gradcheck";
  fs::create_directories(out);
  const int status = cli(work, "gradcheck --out \"" + out.string() + "\"");
  if (!fs::exists(out / "gradcheck.json")) {
    report("Gradient oracle", false, "gradcheck produced no output (exit " + std::to_string(status) + ")");
    return;
  }
  std::map<std::string, json> checks;
  const json doc = read_json(out / "gradcheck.json");
  for (const json& c : doc.at("checks")) checks[c.at("name").get<std::string>()] = c;
  auto err = [&](const char* n) { return checks.at(n).at("max_error").get<double>(); };
  auto secs = [&](const char* n) { return checks.at(n).at("seconds").get<double>(); };

  const double tiny = err("tiny-net gradient"), full = err("full-net gradient");
  const double grad_secs = secs("tiny-net gradient") + secs("full-net gradient");
  report("Gradient oracle", tiny < kTinyGradTol && full < kFullGradTol && grad_secs < kGradSeconds,
         "tiny nets " + fmt("%.2e", tiny) + " (< 1e-6; double-precision differences " +
             fmt("%.2e", checks.at("tiny-net gradient").at("double_fd_error").get<double>()) + "), full net " +
             fmt("%.2e", full) + " (< 1e-5), " + fmt("%.1f s", grad_secs));
  const double meta = err("meta-gradient");
  report("Meta-gradient oracle", meta < kMetaGradTol && secs("meta-gradient") < kMetaGradSeconds,
         fmt("%.2e", meta) + " (< 1e-5) over 10 trials x 50 coordinates, " + fmt("%.1f s", secs("meta-gradient")));
  const double cf = err("M=1 closed form");
  report("M = 1 closed form", cf < kClosedFormTol, fmt("%.2e", cf) + " (< 1e-6) against an explicit FD Hessian");
}

void degenerate_suite() {
  Rng rng(5);
  const Network tiny(NetworkConfig{{5, 6, 4, 3}, Activation::Tanh});
  ModelParams theta = tiny.init_params(3);
  for (std::size_t j = 0; j < theta.size(); ++j) theta[j] += rng.normal(0.0, 0.2);
  Batch s, q;
  for (Batch* b : {&s, &q}) {
    b->inputs = Eigen::MatrixXd::NullaryExpr(5, 9, [&]() { return rng.uniform(-1.0, 1.0); });
    for (int i = 0; i < 9; ++i) b->labels.push_back(static_cast<int>(rng.below(kIntents)));
  }
  const TaskBatches task{s, q};
  const GradientVector gq = tiny.batch_gradient(theta, q);
  bool ok = true;
  std::vector<std::string> failed;
  MetaConfig c;
  c.alpha = 0.3;
  c.inner_steps = 0;
  if (!(meta_gradient(tiny, theta, task, c) == gq)) failed.push_back("M=0");
  c.inner_steps = 3;
  c.alpha = 0.0;
  if (!(meta_gradient(tiny, theta, task, c) == gq)) failed.push_back("alpha=0");

  // Full-size network on a real task for the supervised and meta_train cases.
  const Corpus corpus = generate_corpus(1, 4);
  const Task t = make_task(corpus.entries[0].recording, {2.0, 250.0}, corpus.entries[0].repetition);
  const Network net;
  const ModelParams base = initial_params(net, 7);
  if (!(fine_tune(net, base, t.support, {3, 0.0, 64, Optimizer::Adam}, 1) == base)) failed.push_back("fine_tune lr=0");
  MetaConfig k1;
  k1.inner_steps = 0;
  k1.outer_epochs = 1;
  k1.outer_rule = OuterRule::SGD;
  k1.seed = 7;
  const std::vector<Task> one{t};
  ModelParams expected = base;
  expected.axpy(-k1.beta, net.batch_gradient(base, make_batch(t.query)));
  if (!(meta_train(net, one, k1).first == expected)) failed.push_back("K=1/M=0 meta_train");
  ok = failed.empty();
  std::string detail = ok ? "M=0, alpha=0, fine_tune lr=0, K=1/M=0/single-task SGD step: all exact" : "";
  for (const auto& f : failed) detail += f + " not exact; ";
  report("Degenerate-equivalence suite", ok, detail);
}

void preprocessing_invariants() {
  const Stopwatch clock;
  std::vector<std::string> failed;
  Rng rng(11);
  // Clip idempotence on random out-of-range signals.
  for (int trial = 0; trial < 20; ++trial) {
    RawRecording r = generate_corpus(1, 100 + static_cast<std::uint64_t>(trial)).entries[0].recording;
    for (Eigen::Index i = 0; i < r.channels.size(); i += 7) r.channels.data()[i] = rng.uniform(-3000.0, 4000.0);
    const RawRecording once = clip_channels(r);
    if (!(clip_channels(once).channels == once.channels) || once.channels.minCoeff() < 0 ||
        once.channels.maxCoeff() > 1000)
      failed.push_back("clip idempotence");
  }
  // Rescale endpoints.
  {
    RawRecording r = generate_corpus(1, 1).entries[0].recording;
    r.channels(0, 0) = 0.0;
    r.channels(1, 0) = 1000.0;
    const RawRecording out = rescale_channels(r);
    if (out.channels(0, 0) != -1.0 || out.channels(1, 0) != 1.0) failed.push_back("rescale endpoints");
  }
  // Window count over n in [200, 1200] against enumeration and the windowing path.
  {
    const RawRecording full = preprocess(generate_corpus(1, 2).entries[0].recording);
    for (std::size_t n = 200; n <= 1200; ++n) {
      std::size_t enumerated = 0;
      for (std::size_t t_end = 199; t_end < n; ++t_end) ++enumerated;
      RawRecording cut = full;
      cut.channels = full.channels.topRows(static_cast<Eigen::Index>(n)).eval();
      cut.cues.resize(n);
      const auto ws = window(cut);
      if (window_count(n, 200, 1) != enumerated || ws.size() != enumerated) {
        failed.push_back("window count at n=" + std::to_string(n));
        break;
      }
      // Label provenance: each window's label is the cue at its end sample.
      for (const WindowedSample& w : ws)
        if (w.label() != cut.cues[w.t_end()]) {
          failed.push_back("label provenance");
          break;
        }
    }
  }
  const double secs = clock.seconds();
  std::string detail = failed.empty() ? "clip idempotence, rescale endpoints, window count n in [200, 1200], labels exact"
                                      : "";
  for (const auto& f : failed) detail += f + " failed; ";
  report("Preprocessing invariants", failed.empty() && secs < kPreprocessSeconds, detail + " " + fmt("(%.1f s)", secs));
}

void determinism(const fs::path& work) {
  const fs::path d = work / "determinism";
  fs::remove_all(d);
  fs::create_directories(d);
  const std::string cfg = (fs::path(METAEMG_CONFIG_DIR) / "determinism.json").string();
  std::vector<std::string> failed;
  std::string why;
  auto q = [](const fs::path& p) { return "\"" + p.string() + "\""; };

  if (cli(work, "synth --subjects 5 --seed 1 --out " + q(d / "corpus_a")) != 0 ||
      cli(work, "synth --subjects 5 --seed 1 --out " + q(d / "corpus_b")) != 0) {
    report("Determinism", false, "synth failed");
    return;
  }
  if (!same_tree(d / "corpus_a", d / "corpus_b", why)) failed.push_back("synth: " + why);
  const std::string synth_why = why;

  const std::string data = " --data " + q(d / "corpus_a") + " --config " + q(cfg);
  const std::string train = "train --method MetaEMG --scenario subject --held-out S2 --seed 4" + data;
  cli(work, train + " --threads 1 --out " + q(d / "train_1a"));
  cli(work, train + " --threads 1 --out " + q(d / "train_1b"));
  cli(work, train + " --threads 4 --out " + q(d / "train_4"));
  const char* ck = "MetaEMG_subject_S2_seed4.ckpt";
  const char* lg = "MetaEMG_subject_S2_seed4.log.jsonl";
  for (const char* run : {"train_1b", "train_4"}) {
    if (!fs::exists(d / run / ck) || slurp(d / "train_1a" / ck) != slurp(d / run / ck))
      failed.push_back(std::string("train checkpoint ") + run);
    if (slurp(d / "train_1a" / lg) != slurp(d / run / lg)) failed.push_back(std::string("train log ") + run);
  }

  const std::string eval_ck = "eval --checkpoint " + q(d / "train_1a" / ck) + data;
  cli(work, eval_ck + " --out " + q(d / "eval_ck_a"));
  cli(work, eval_ck + " --out " + q(d / "eval_ck_b"));
  const std::string eval_full = "eval --methods all --scenario session --seeds 1,2" + data;
  cli(work, eval_full + " --threads 1 --out " + q(d / "eval_a"));
  cli(work, eval_full + " --threads 1 --out " + q(d / "eval_b"));
  cli(work, eval_full + " --threads 4 --out " + q(d / "eval_4"));
  for (const auto& [a, b] : std::vector<std::pair<const char*, const char*>>{
           {"eval_ck_a", "eval_ck_b"}, {"eval_a", "eval_b"}, {"eval_a", "eval_4"}}) {
    for (const char* f : {"results.json", "results.csv"})
      if (!fs::exists(d / a / f) || slurp(d / a / f) != slurp(d / b / f))
        failed.push_back(std::string("eval ") + a + " vs " + b + " " + f);
  }
  std::string detail = failed.empty() ? "synth (" + synth_why + "), train and eval byte-identical across runs and for "
                                                                "1 vs 4 threads"
                                      : "";
  for (const auto& f : failed) detail += f + " differs; ";
  report("Determinism", failed.empty(), detail);
}

double accuracy(const json& results, const std::string& method, double fraction = 1.0, int n_pretrain = 0) {
  for (const json& r : results.at("rows"))
    if (r.at("method") == method && r.at("subject") == "average" &&
        std::abs(r.at("fraction").get<double>() - fraction) < 1e-12 && r.at("n_pretrain") == n_pretrain)
      return r.at("mean_accuracy").get<double>();
  throw Error("no result row for " + method);
}

void directional(const fs::path& work, const std::string& config, int n_seeds) {
  const fs::path d = work / "directional";
  fs::create_directories(d);
  auto q = [](const fs::path& p) { return "\"" + p.string() + "\""; };
  const Stopwatch clock;
  std::string seeds;
  for (int s = 1; s <= n_seeds; ++s) seeds += (s > 1 ? "," : "") + std::to_string(s);
  const bool enough_seeds = n_seeds >= kMinSeeds;

  ExperimentConfig cfg;
  {
    std::ifstream in(config);
    cfg = json::parse(in).get<ExperimentConfig>();
  }
  if (cli(work, "synth --config " + q(config) + " --out " + q(d / "corpus")) != 0) {
    report("Directional reproduction", false, "synth failed");
    return;
  }
  const std::string data = " --data " + q(d / "corpus") + " --config " + q(config) + " --threads 0 --seeds " + seeds;

  // Session scenario, with the support-fraction ablation riding on the same bases.
  const int s1 = cli(work, "ablate fraction --methods all --scenario session --fractions 0.25,1" + data + " --out " +
                               q(d / "session"));
  // Pretraining-subject ablation; n = 4 is the subject-adaptation scenario.
  const int s2 = cli(work, "ablate subjects --methods ConvPretrain3,MetaEMG --n 1,4" + data + " --out " +
                               q(d / "subjects"));
  const double secs = clock.seconds();
  if (s1 != 0 || s2 != 0) {
    report("Directional reproduction", false, "CLI runs failed; see cli.log");
    return;
  }
  const json session = read_json(d / "session" / "results.json");
  const json subjects = read_json(d / "subjects" / "results.json");

  const double meta = accuracy(session, "MetaEMG"), conv = accuracy(session, "ConvPretrain3"),
               none = accuracy(session, "NoPretrain3");
  const bool a = meta - conv >= kOrderingGap && conv - none >= kOrderingGap;
  const std::string da = "MetaEMG " + fmt("%.2f", meta) + " > ConvPretrain3 " + fmt("%.2f", conv) + " > NoPretrain3 " +
                         fmt("%.2f", none) + " (gaps must be >= 1.00)";
  report("Directional (a) session ordering", a && enough_seeds, da);

  const double meta_s = accuracy(subjects, "MetaEMG", 1.0, 4), conv_s = accuracy(subjects, "ConvPretrain3", 1.0, 4);
  report("Directional (b) subject scenario", meta_s >= conv_s && enough_seeds,
         "MetaEMG " + fmt("%.2f", meta_s) + " >= ConvPretrain3 " + fmt("%.2f", conv_s));

  bool c = true;
  std::string dc;
  for (Method m : kAllMethods) {
    const std::string name(to_token(m));
    const double full = accuracy(session, name, 1.0), quarter = accuracy(session, name, 0.25);
    c = c && full >= quarter;
    dc += name + " " + fmt("%.2f", full) + " vs " + fmt("%.2f", quarter) + "; ";
  }
  report("Directional (c) support fraction 1.0 >= 0.25", c && enough_seeds, dc);

  const double gain_meta = accuracy(subjects, "MetaEMG", 1.0, 4) - accuracy(subjects, "MetaEMG", 1.0, 1);
  const double gain_conv = accuracy(subjects, "ConvPretrain3", 1.0, 4) - accuracy(subjects, "ConvPretrain3", 1.0, 1);
  report("Directional (d) pretraining-subject gain", gain_meta >= gain_conv && enough_seeds,
         "MetaEMG gain n=1->4 " + fmt("%+.2f", gain_meta) + " >= ConvPretrain3 gain " + fmt("%+.2f", gain_conv));
  std::cout << "  directional runs: " << n_seeds << " seeds, " << fmt("%.0f s", secs) << ", config "
            << fs::path(config).filename().string() << " (" << cfg.notes << ")" << std::endl;
}

void chance_and_oracle(const std::string& config) {
  ExperimentConfig cfg;
  {
    std::ifstream in(config);
    cfg = json::parse(in).get<ExperimentConfig>();
  }
  const auto tasks = corpus_tasks(generate_corpus(cfg.n_subjects, cfg.corpus_seed, cfg.synth), cfg);
  const ScenarioSplit split = build_scenario(tasks, Scenario::SessionAdaptation);
  const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5, 6, 7, 8};
  const ResultTable oracle =
      evaluate_predictor("oracle", [](std::uint64_t, const Task& t) { return query_labels(t); }, split, seeds);
  const Network net(cfg.network());
  const ResultTable untrained = evaluate_predictor(
      "untrained", [&](std::uint64_t seed, const Task& t) { return predict_query(net, initial_params(net, seed), t); },
      split, seeds);
  const double o = oracle.find("oracle")->mean_accuracy, so = oracle.find("oracle")->std_over_seeds;
  const double u = untrained.find("untrained")->mean_accuracy;
  report("Chance-level and oracle stubs", o == 100.0 && so == 0.0 && u >= kChanceLow && u <= kChanceHigh,
         "oracle " + fmt("%.2f", o) + " (std " + fmt("%.2f", so) + "), untrained " + fmt("%.2f", u) +
             " in [25, 45] over 8 seeds");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance suite"};
  std::string work = "acceptance_work";
  std::string config = (fs::path(METAEMG_CONFIG_DIR) / "acceptance.json").string();
  int seeds = kMinSeeds;
  std::vector<std::string> only;
  app.add_option("--work", work, "scratch directory");
  app.add_option("--config", config, "experiment config for the directional runs")->check(CLI::ExistingFile);
  app.add_option("--seeds", seeds, "training seeds for the directional runs");
  app.add_option("--only", only, "run a subset: gradients, degenerate, preprocessing, determinism, directional, stubs")
      ->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  auto want = [&](const char* name) { return only.empty() || std::find(only.begin(), only.end(), name) != only.end(); };
  fs::create_directories(work);
  std::ofstream(fs::path(work) / "cli.log", std::ios::trunc).close();
  const Stopwatch total;
  try {
    if (want("gradients")) gradient_oracles(work);
    if (want("degenerate")) degenerate_suite();
    if (want("preprocessing")) preprocessing_invariants();
    if (want("determinism")) determinism(work);
    if (want("directional")) directional(work, config, seeds);
    if (want("stubs")) chance_and_oracle(config);
  } catch (const std::exception& e) {
    report("Acceptance driver", false, e.what());
  }
  std::size_t failed = 0;
  for (const Outcome& o : outcomes) failed += !o.pass;
  std::cout << outcomes.size() - failed << "/" << outcomes.size() << " criteria passed in "
            << fmt("%.0f s", total.seconds()) << std::endl;
  return failed == 0 ? 0 : 1;
}
