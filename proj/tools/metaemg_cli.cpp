// metaemg_cli: corpus generation, preprocessing, training, evaluation,
// ablations and gradient checks. Every command writes run_manifest.json into
// its output directory.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include "metaemg/gradcheck.hpp"
#include "metaemg/harness.hpp"

namespace fs = std::filesystem;
using namespace metaemg;
using nlohmann::json;

namespace {

struct Common {
  std::string config_path;
  std::string out;
  unsigned threads = 1;
};

void add_common(CLI::App* app, Common& c, bool out_required = true) {
  app->add_option("--config", c.config_path, "experiment config JSON")->check(CLI::ExistingFile);
  auto* out = app->add_option("--out", c.out, "output directory");
  if (out_required) out->required();
  app->add_option("--threads", c.threads, "worker threads (0 = all cores)");
}

ExperimentConfig load_config(const Common& c) {
  ExperimentConfig cfg;
  if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    if (!in) throw Error("cannot open config " + c.config_path);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError(c.config_path + ": " + e.what());
    }
    try {
      cfg = j.get<ExperimentConfig>();
    } catch (const json::exception& e) {
      throw ConfigError(c.config_path + ": " + e.what());
    }
  }
  cfg.threads = c.threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : c.threads;
  return cfg;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot read " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw Error("cannot write " + p.string());
}

/// Digest over the manifest and every recording file, in manifest order.
std::string corpus_hash(const fs::path& dir) {
  const std::string manifest = read_file(dir / kManifestName);
  std::string all = manifest;
  for (const auto& r : json::parse(manifest).at("recordings")) all += read_file(dir / r.at("path").get<std::string>());
  return digest(all);
}

struct Data {
  std::vector<Task> tasks;
  std::string hash;
};

Data load_data(const std::string& dir, const ExperimentConfig& cfg) {
  const auto recs = load_corpus(dir);
  return {corpus_tasks(recs, cfg), corpus_hash(dir)};
}

std::vector<std::uint64_t> parse_seeds(const std::vector<std::uint64_t>& given) {
  if (given.empty()) return {1, 2, 3};
  return given;
}

std::vector<Method> parse_methods(const std::vector<std::string>& tokens) {
  std::vector<Method> out;
  for (const std::string& t : tokens) {
    if (t == "all") {
      out.assign(kAllMethods.begin(), kAllMethods.end());
      continue;
    }
    out.push_back(method_from_token(t));
  }
  if (out.empty()) throw ConfigError("no methods given");
  return out;
}

class RunManifest {
 public:
  RunManifest(std::string command, const ExperimentConfig& cfg) : start_(std::chrono::steady_clock::now()) {
    j_ = {{"command", std::move(command)},
          {"version", kVersion},
          {"checkpoint_version", kCheckpointVersion},
          {"config", cfg},
          {"config_hash", config_hash(cfg)},
          {"threads", cfg.threads}};
    if (!cfg.notes.empty()) j_["scaled_settings"] = cfg.notes;
  }

  json& operator[](const char* key) { return j_[key]; }

  void write(const fs::path& dir) {
    write_file(dir / "run_manifest.json", j_.dump(2) + "\n");
    std::cerr << j_.at("command").get<std::string>() << ": "
              << std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count() << " s\n";
  }

 private:
  json j_;
  std::chrono::steady_clock::time_point start_;
};

void write_results(const fs::path& dir, const ResultTable& t) {
  write_file(dir / "results.json", t.json().dump(2) + "\n");
  write_file(dir / "results.csv", t.csv());
}

void print_rows(const ResultTable& t) {
  for (const ResultRow& r : t.rows) {
    if (r.subject != "average") continue;
    std::cout << r.method;
    if (r.fraction != 1.0) std::cout << " fraction=" << r.fraction;
    if (r.n_pretrain != 0) std::cout << " n_pretrain=" << r.n_pretrain;
    std::printf("  %.2f%% (std %.2f, %zu seeds)\n", r.mean_accuracy, r.std_over_seeds, r.n_seeds);
  }
}

/// Splits for a scenario; `held_out` "all" expands to one split per subject.
std::vector<ScenarioSplit> splits_for(const std::vector<Task>& tasks, Scenario scenario, const std::string& held_out) {
  if (scenario == Scenario::SessionAdaptation) {
    if (!held_out.empty()) throw ConfigError("--held-out applies to the subject scenario only");
    return {build_scenario(tasks, scenario)};
  }
  if (held_out.empty()) throw ConfigError("subject scenario needs --held-out <subject|all>");
  std::vector<ScenarioSplit> out;
  if (held_out == "all")
    for (const std::string& s : subjects_of(tasks)) out.push_back(build_scenario(tasks, scenario, s));
  else
    out.push_back(build_scenario(tasks, scenario, held_out));
  return out;
}

ResultTable merge(std::vector<ResultTable> parts) {
  ResultTable out = std::move(parts.front());
  for (std::size_t i = 1; i < parts.size(); ++i)
    out.records.insert(out.records.end(), parts[i].records.begin(), parts[i].records.end());
  out.rows = aggregate(out.records);
  return out;
}

json splits_json(const std::vector<ScenarioSplit>& splits) {
  json j = json::array();
  for (const ScenarioSplit& s : splits) j.push_back(scenario_json(s));
  return j;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

int cmd_synth(const Common& c, int subjects, std::uint64_t seed) {
  ExperimentConfig cfg = load_config(c);
  if (subjects > 0) cfg.n_subjects = subjects;
  if (seed != 0) cfg.corpus_seed = seed;
  RunManifest m("synth", cfg);
  const Corpus corpus = generate_corpus(cfg.n_subjects, cfg.corpus_seed, cfg.synth);
  write_corpus(corpus, cfg.synth, c.out);
  m["seeds"] = {{"corpus", cfg.corpus_seed}};
  m["corpus_hash"] = corpus_hash(c.out);
  m["recordings"] = corpus.entries.size();
  m.write(c.out);
  std::cout << "wrote " << corpus.entries.size() << " recordings for " << cfg.n_subjects << " subjects to " << c.out
            << "\n";
  return 0;
}

int cmd_preprocess(const Common& c, const std::string& data) {
  const ExperimentConfig cfg = load_config(c);
  RunManifest m("preprocess", cfg);
  const auto recs = load_corpus(data);
  json tasks = json::array();
  for (const LoadedRecording& r : recs) {
    auto rec = std::make_shared<const RawRecording>(preprocess(r.recording, cfg.rescale));
    const Task t = split_task(rec, cfg.window, r.repetition);
    const std::string name = t.id() + ".csv";
    write_file(fs::path(c.out) / "tasks" / name, format_recording(*rec));
    json tj = task_json(t);
    tj["path"] = "tasks/" + name;
    tasks.push_back(std::move(tj));
  }
  const json index = {{"format", "metaemg-tasks"},
                      {"window", {{"window_seconds", cfg.window.window_seconds}, {"stride_ms", cfg.window.stride_ms}}},
                      {"rescale", detail::enum_name(cfg.rescale)},
                      {"flattening", kFlatteningOrder},
                      {"tasks", tasks}};
  write_file(fs::path(c.out) / "tasks.json", index.dump(2) + "\n");
  m["corpus_hash"] = corpus_hash(data);
  m["tasks"] = tasks.size();
  m.write(c.out);
  std::cout << "wrote " << tasks.size() << " task files to " << c.out << "\n";
  return 0;
}

int cmd_train(const Common& c, const std::string& data, const std::string& method_token,
              const std::string& scenario_token, const std::string& held_out, std::uint64_t seed) {
  const ExperimentConfig cfg = load_config(c);
  RunManifest m("train", cfg);
  const MethodSpec spec = MethodSpec::resolve(method_from_token(method_token), cfg);
  const Scenario scenario = scenario_from_token(scenario_token);
  const Data d = load_data(data, cfg);
  const auto splits = splits_for(d.tasks, scenario, held_out);
  if (splits.size() != 1) throw ConfigError("train needs a single held-out subject");
  const Network net(cfg.network());
  TrainLog log;
  const ModelParams base = pretrain_base(spec.pretrain, net, splits[0].meta_train, cfg, seed, &log);

  std::string stem = spec.name() + "_" + std::string(to_token(scenario));
  if (!held_out.empty()) stem += "_" + held_out;
  stem += "_seed" + std::to_string(seed);
  Checkpoint ck{net.config(), base,
                {{"method", spec.name()},
                 {"scenario", to_token(scenario)},
                 {"held_out", held_out},
                 {"seed", seed},
                 {"config_hash", config_hash(cfg)},
                 {"corpus_hash", d.hash}}};
  fs::create_directories(c.out);
  const fs::path ck_path = fs::path(c.out) / (stem + ".ckpt");
  write_checkpoint(ck, ck_path.string());
  if (spec.pretrain == PretrainKind::Meta) write_file(fs::path(c.out) / (stem + ".log.jsonl"), log.jsonl());

  m["seeds"] = {{"training", seed}, {"init_stream", "init"}, {"shuffle_stream", "pretrain"}};
  m["corpus_hash"] = d.hash;
  m["method"] = spec.name();
  m["split"] = scenario_json(splits[0]);
  m["checkpoint"] = ck_path.filename().string();
  m.write(c.out);
  std::cout << "wrote " << ck_path.string() << "\n";
  return 0;
}

int cmd_eval(const Common& c, const std::string& data, const std::vector<std::string>& checkpoints,
             const std::vector<std::string>& method_tokens, const std::string& scenario_token,
             const std::string& held_out, const std::vector<std::uint64_t>& seed_list) {
  ExperimentConfig cfg = load_config(c);
  RunManifest m("eval", cfg);
  // Checkpoint files are opened before any corpus work so a bad path fails fast.
  std::vector<Checkpoint> cks;
  for (const std::string& p : checkpoints) cks.push_back(read_checkpoint(p));
  const Data d = load_data(data, cfg);
  m["corpus_hash"] = d.hash;

  ResultTable table;
  if (!cks.empty()) {
    const json& meta0 = cks[0].metadata;
    std::map<std::uint64_t, ModelParams> bases;
    for (std::size_t i = 0; i < cks.size(); ++i) {
      const json& mi = cks[i].metadata;
      for (const char* key : {"method", "scenario", "held_out"})
        if (mi.value(key, json()) != meta0.value(key, json()))
          throw ConfigError(checkpoints[i] + ": " + key + " differs from " + checkpoints[0]);
      if (cks[i].network.layer_sizes != cfg.network().layer_sizes)
        throw ShapeError(checkpoints[i] + ": architecture does not match the config");
      if (cks[i].network.activation != cfg.activation)
        throw ConfigError(checkpoints[i] + ": activation does not match the config");
      const auto seed = mi.at("seed").get<std::uint64_t>();
      if (!bases.emplace(seed, cks[i].params).second)
        throw ConfigError("two checkpoints for seed " + std::to_string(seed));
    }
    const MethodSpec spec = MethodSpec::resolve(method_from_token(meta0.at("method").get<std::string>()), cfg);
    const Scenario scenario = scenario_from_token(meta0.at("scenario").get<std::string>());
    const auto splits = splits_for(d.tasks, scenario, meta0.value("held_out", std::string()));
    table = evaluate_bases(spec, bases, splits[0], cfg);
    m["checkpoints"] = checkpoints;
    m["split"] = scenario_json(splits[0]);
  } else {
    const auto specs = resolve_methods(parse_methods(method_tokens), cfg);
    const auto seeds = parse_seeds(seed_list);
    const auto splits = splits_for(d.tasks, scenario_from_token(scenario_token), held_out);
    std::vector<ResultTable> parts;
    for (const ScenarioSplit& s : splits) parts.push_back(evaluate_methods(specs, s, seeds, cfg));
    table = merge(std::move(parts));
    m["split"] = splits_json(splits);
  }
  m["seeds"] = {{"training", table.seeds}, {"finetune_stream", "finetune:<task id>"}};
  write_results(c.out, table);
  m.write(c.out);
  print_rows(table);
  return 0;
}

int cmd_ablate_fraction(const Common& c, const std::string& data, const std::vector<std::string>& method_tokens,
                        const std::string& scenario_token, const std::string& held_out,
                        const std::vector<std::uint64_t>& seed_list, std::vector<double> fractions) {
  const ExperimentConfig cfg = load_config(c);
  RunManifest m("ablate fraction", cfg);
  if (fractions.empty()) fractions = {0.25, 0.5, 0.75, 1.0};
  const auto specs = resolve_methods(parse_methods(method_tokens), cfg);
  const auto seeds = parse_seeds(seed_list);
  const Data d = load_data(data, cfg);
  const auto splits = splits_for(d.tasks, scenario_from_token(scenario_token), held_out);
  std::vector<ResultTable> parts;
  for (const ScenarioSplit& s : splits) parts.push_back(ablate_support_fraction(s, fractions, specs, seeds, cfg));
  ResultTable table = merge(std::move(parts));
  write_results(c.out, table);
  m["corpus_hash"] = d.hash;
  m["seeds"] = {{"training", seeds}, {"finetune_stream", "finetune:<task id>"}};
  m["split"] = splits_json(splits);
  m.write(c.out);
  print_rows(table);
  return 0;
}

int cmd_ablate_subjects(const Common& c, const std::string& data, const std::vector<std::string>& method_tokens,
                        const std::vector<std::uint64_t>& seed_list, std::vector<int> ns) {
  const ExperimentConfig cfg = load_config(c);
  RunManifest m("ablate subjects", cfg);
  if (ns.empty()) ns = {1, 2, 3, 4};
  const auto specs = resolve_methods(parse_methods(method_tokens), cfg);
  const auto seeds = parse_seeds(seed_list);
  const Data d = load_data(data, cfg);
  const ResultTable table = ablate_pretrain_subjects(d.tasks, ns, specs, seeds, cfg);
  write_results(c.out, table);
  m["corpus_hash"] = d.hash;
  m["seeds"] = {{"training", seeds}, {"finetune_stream", "finetune:<task id>"}};
  m.write(c.out);
  print_rows(table);
  return 0;
}

int cmd_gradcheck(const std::string& out) {
  bool ok = true;
  json results = json::array();
  for (const gradcheck::CheckResult& r : gradcheck::run_all()) {
    ok = ok && r.passed();
    std::printf("%-20s max relative error %.3e (threshold %.0e) %s  [%.2f s]", r.name.c_str(), r.max_error,
                r.threshold, r.passed() ? "ok" : "FAILED", r.seconds);
    if (r.aux_error >= 0) std::printf("  double-precision differences: %.3e", r.aux_error);
    std::printf("\n");
    results.push_back({{"name", r.name},
                       {"max_error", r.max_error},
                       {"threshold", r.threshold},
                       {"passed", r.passed()},
                       {"seconds", r.seconds},
                       {"double_fd_error", r.aux_error}});
  }
  if (!out.empty()) write_file(fs::path(out) / "gradcheck.json", json{{"version", kVersion}, {"checks", results}}.dump(2) + "\n");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-learned initialization for EMG intent classifiers"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  Common common;
  int subjects = 0;
  std::uint64_t corpus_seed = 0, seed = 1;
  std::string data, method = "MetaEMG", scenario = "session", held_out;
  std::vector<std::string> checkpoints, methods{"all"};
  std::vector<std::uint64_t> seeds;
  std::vector<double> fractions;
  std::vector<int> n_pretrain;

  auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
  add_common(synth, common);
  synth->add_option("--subjects", subjects, "number of subjects")->check(CLI::PositiveNumber);
  synth->add_option("--seed", corpus_seed, "corpus seed");

  auto* pre = app.add_subcommand("preprocess", "recordings -> windowed task files");
  add_common(pre, common);
  pre->add_option("--data", data, "corpus directory")->required();

  auto* train = app.add_subcommand("train", "pretrain one method and write a checkpoint");
  add_common(train, common);
  train->add_option("--data", data, "corpus directory")->required();
  train->add_option("--method", method, "NoPretrain3 | ConvPretrain3 | MetaEMG | ...");
  train->add_option("--scenario", scenario, "session | subject");
  train->add_option("--held-out", held_out, "held-out subject (subject scenario)");
  train->add_option("--seed", seed, "training seed");

  auto* eval = app.add_subcommand("eval", "score checkpoints, or train and score methods");
  add_common(eval, common);
  eval->add_option("--data", data, "corpus directory")->required();
  eval->add_option("--checkpoint", checkpoints, "checkpoint files (one per seed)");
  eval->add_option("--methods", methods, "methods when no checkpoint is given")->delimiter(',');
  eval->add_option("--scenario", scenario, "session | subject");
  eval->add_option("--held-out", held_out, "held-out subject, or all");
  eval->add_option("--seeds", seeds, "training seeds")->delimiter(',');

  auto* ablate = app.add_subcommand("ablate", "support-fraction or pretraining-subject ablation");
  ablate->require_subcommand(1);
  auto* frac = ablate->add_subcommand("fraction", "downsample meta-test support sets");
  add_common(frac, common);
  frac->add_option("--data", data, "corpus directory")->required();
  frac->add_option("--methods", methods, "methods")->delimiter(',');
  frac->add_option("--scenario", scenario, "session | subject");
  frac->add_option("--held-out", held_out, "held-out subject, or all");
  frac->add_option("--seeds", seeds, "training seeds")->delimiter(',');
  frac->add_option("--fractions", fractions, "support fractions")->delimiter(',');
  auto* subj = ablate->add_subcommand("subjects", "vary the number of pretraining subjects");
  add_common(subj, common);
  subj->add_option("--data", data, "corpus directory")->required();
  subj->add_option("--methods", methods, "methods")->delimiter(',');
  subj->add_option("--seeds", seeds, "training seeds")->delimiter(',');
  subj->add_option("--n", n_pretrain, "pretraining subject counts")->delimiter(',');

  std::string gc_out;
  auto* gc = app.add_subcommand("gradcheck", "run the gradient and meta-gradient oracles");
  gc->add_option("--out", gc_out, "directory for gradcheck.json");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return cmd_synth(common, subjects, corpus_seed);
    if (*pre) return cmd_preprocess(common, data);
    if (*train) return cmd_train(common, data, method, scenario, held_out, seed);
    if (*eval) return cmd_eval(common, data, checkpoints, methods, scenario, held_out, seeds);
    if (*frac) return cmd_ablate_fraction(common, data, methods, scenario, held_out, seeds, fractions);
    if (*subj) {
      if (methods == std::vector<std::string>{"all"}) methods = {"ConvPretrain3", "MetaEMG"};
      return cmd_ablate_subjects(common, data, methods, seeds, n_pretrain);
    }
    if (*gc) return cmd_gradcheck(gc_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
