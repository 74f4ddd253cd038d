#pragma once

// Experiment driver: pretrain per method, fine-tune on each meta-test
// task's support set, score argmax accuracy on its query set, and aggregate
// per task -> per subject -> across subjects, with spread over seeds.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaemg/dataio.hpp"
#include "metaemg/error.hpp"
#include "metaemg/meta.hpp"
#include "metaemg/nn.hpp"
#include "metaemg/synth.hpp"
#include "metaemg/tasks.hpp"

namespace metaemg {

inline constexpr std::string_view kVersion = "1.0.0";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  SynthConfig synth;
  int n_subjects = 5;
  std::uint64_t corpus_seed = 1;
  WindowConfig window;
  RescaleMode rescale = RescaleMode::FixedAffine;
  std::vector<std::size_t> hidden_sizes{512, 128};
  Activation activation = Activation::ReLU;
  MetaConfig meta;
  /// Meta-test fine-tuning; epochs are overridden per method.
  SupervisedConfig finetune{3, 1e-4, 64, Optimizer::Adam};
  SupervisedConfig pretrain{50, 5e-4, 64, Optimizer::Adam};
  int fast_epochs = 3;
  int converged_epochs = 50;
  DownsampleMode downsample = DownsampleMode::Prefix;
  unsigned threads = 1;
  /// Free-form note, e.g. which settings were scaled down for desk runs.
  std::string notes;

  NetworkConfig network() const {
    NetworkConfig n;
    n.layer_sizes = {window.input_dim(synth.sample_rate_hz)};
    n.layer_sizes.insert(n.layer_sizes.end(), hidden_sizes.begin(), hidden_sizes.end());
    n.layer_sizes.push_back(kIntents);
    n.activation = activation;
    return n;
  }
};

namespace detail {

template <typename E>
struct EnumNames;

template <>
struct EnumNames<InnerRule> {
  static constexpr std::array<std::pair<InnerRule, std::string_view>, 2> v{{{InnerRule::SGD, "sgd"}, {InnerRule::Adam, "adam"}}};
};
template <>
struct EnumNames<MetaGradientKind> {
  static constexpr std::array<std::pair<MetaGradientKind, std::string_view>, 2> v{
      {{MetaGradientKind::SecondOrder, "second_order"}, {MetaGradientKind::FirstOrder, "first_order"}}};
};
template <>
struct EnumNames<OuterRule> {
  static constexpr std::array<std::pair<OuterRule, std::string_view>, 2> v{{{OuterRule::Adam, "adam"}, {OuterRule::SGD, "sgd"}}};
};
template <>
struct EnumNames<TaskReduction> {
  static constexpr std::array<std::pair<TaskReduction, std::string_view>, 2> v{
      {{TaskReduction::Sum, "sum"}, {TaskReduction::Mean, "mean"}}};
};
template <>
struct EnumNames<Optimizer> {
  static constexpr std::array<std::pair<Optimizer, std::string_view>, 2> v{{{Optimizer::Adam, "adam"}, {Optimizer::SGD, "sgd"}}};
};
template <>
struct EnumNames<RescaleMode> {
  static constexpr std::array<std::pair<RescaleMode, std::string_view>, 2> v{
      {{RescaleMode::FixedAffine, "fixed_affine"}, {RescaleMode::PerRecordingMinMax, "per_recording_minmax"}}};
};
template <>
struct EnumNames<DownsampleMode> {
  static constexpr std::array<std::pair<DownsampleMode, std::string_view>, 2> v{
      {{DownsampleMode::Prefix, "prefix"}, {DownsampleMode::UniformRandom, "uniform_random"}}};
};

template <typename E>
std::string enum_name(E e) {
  for (const auto& [value, name] : EnumNames<E>::v)
    if (value == e) return std::string(name);
  return "?";
}

template <typename E>
E enum_value(const std::string& s) {
  for (const auto& [value, name] : EnumNames<E>::v)
    if (name == s) return value;
  throw ConfigError("unknown option '" + s + "'");
}

template <typename E>
void read_enum(const nlohmann::json& j, const char* key, E& out) {
  if (j.contains(key)) out = enum_value<E>(j.at(key).get<std::string>());
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void check_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed, std::string_view where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be a JSON object");
  for (const auto& item : j.items())
    if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end())
      throw ConfigError("unknown key '" + item.key() + "' in " + std::string(where));
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const MetaConfig& c) {
  j = {{"alpha", c.alpha},
       {"beta", c.beta},
       {"inner_steps", c.inner_steps},
       {"outer_epochs", c.outer_epochs},
       {"decay_every", c.decay_every},
       {"decay_factor", c.decay_factor},
       {"inner_rule", detail::enum_name(c.inner_rule)},
       {"meta_gradient", detail::enum_name(c.meta_gradient)},
       {"outer_rule", detail::enum_name(c.outer_rule)},
       {"reduction", detail::enum_name(c.reduction)}};
}

inline void from_json(const nlohmann::json& j, MetaConfig& c) {
  detail::check_keys(j,
                     {"alpha", "beta", "inner_steps", "outer_epochs", "decay_every", "decay_factor", "inner_rule",
                      "meta_gradient", "outer_rule", "reduction"},
                     "meta");
  detail::read(j, "alpha", c.alpha);
  detail::read(j, "beta", c.beta);
  detail::read(j, "inner_steps", c.inner_steps);
  detail::read(j, "outer_epochs", c.outer_epochs);
  detail::read(j, "decay_every", c.decay_every);
  detail::read(j, "decay_factor", c.decay_factor);
  detail::read_enum(j, "inner_rule", c.inner_rule);
  detail::read_enum(j, "meta_gradient", c.meta_gradient);
  detail::read_enum(j, "outer_rule", c.outer_rule);
  detail::read_enum(j, "reduction", c.reduction);
}

inline void to_json(nlohmann::json& j, const SupervisedConfig& c) {
  j = {{"epochs", c.epochs}, {"lr", c.lr}, {"batch_size", c.batch_size}, {"optimizer", detail::enum_name(c.optimizer)}};
}

inline void from_json(const nlohmann::json& j, SupervisedConfig& c) {
  detail::check_keys(j, {"epochs", "lr", "batch_size", "optimizer"}, "training config");
  detail::read(j, "epochs", c.epochs);
  detail::read(j, "lr", c.lr);
  detail::read(j, "batch_size", c.batch_size);
  detail::read_enum(j, "optimizer", c.optimizer);
}

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"synth", c.synth},
       {"n_subjects", c.n_subjects},
       {"corpus_seed", c.corpus_seed},
       {"window", {{"window_seconds", c.window.window_seconds}, {"stride_ms", c.window.stride_ms}}},
       {"rescale", detail::enum_name(c.rescale)},
       {"hidden_sizes", c.hidden_sizes},
       {"activation", to_token(c.activation)},
       {"meta", c.meta},
       {"finetune", c.finetune},
       {"pretrain", c.pretrain},
       {"fast_epochs", c.fast_epochs},
       {"converged_epochs", c.converged_epochs},
       {"downsample", detail::enum_name(c.downsample)},
       {"notes", c.notes}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  detail::check_keys(j,
                     {"synth", "n_subjects", "corpus_seed", "window", "rescale", "hidden_sizes", "activation", "meta",
                      "finetune", "pretrain", "fast_epochs", "converged_epochs", "downsample", "notes"},
                     "experiment config");
  if (j.contains("synth")) c.synth = j.at("synth").get<SynthConfig>();
  detail::read(j, "n_subjects", c.n_subjects);
  detail::read(j, "corpus_seed", c.corpus_seed);
  if (j.contains("window")) {
    detail::check_keys(j.at("window"), {"window_seconds", "stride_ms"}, "window");
    detail::read(j.at("window"), "window_seconds", c.window.window_seconds);
    detail::read(j.at("window"), "stride_ms", c.window.stride_ms);
  }
  detail::read_enum(j, "rescale", c.rescale);
  detail::read(j, "hidden_sizes", c.hidden_sizes);
  if (j.contains("activation")) c.activation = activation_from_token(j.at("activation").get<std::string>());
  if (j.contains("meta")) from_json(j.at("meta"), c.meta);
  if (j.contains("finetune")) from_json(j.at("finetune"), c.finetune);
  if (j.contains("pretrain")) from_json(j.at("pretrain"), c.pretrain);
  detail::read(j, "fast_epochs", c.fast_epochs);
  detail::read(j, "converged_epochs", c.converged_epochs);
  detail::read_enum(j, "downsample", c.downsample);
  detail::read(j, "notes", c.notes);
}

/// Stable 64-bit FNV-1a digest, hex encoded.
inline std::string digest(std::string_view bytes) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(detail::fnv1a(bytes)));
  return buf;
}

inline std::string config_hash(const ExperimentConfig& c) { return digest(nlohmann::json(c).dump()); }

// ---------------------------------------------------------------------------
// Methods
// ---------------------------------------------------------------------------

enum class Method { NoPretrain3, NoPretrainConverged, ConvPretrain3, ConvPretrainConverged, MetaEMG };
enum class PretrainKind { None, Conventional, Meta };

inline constexpr std::array<Method, 5> kAllMethods = {Method::NoPretrain3, Method::NoPretrainConverged,
                                                      Method::ConvPretrain3, Method::ConvPretrainConverged,
                                                      Method::MetaEMG};

constexpr std::string_view to_token(Method m) {
  switch (m) {
    case Method::NoPretrain3: return "NoPretrain3";
    case Method::NoPretrainConverged: return "NoPretrainConverged";
    case Method::ConvPretrain3: return "ConvPretrain3";
    case Method::ConvPretrainConverged: return "ConvPretrainConverged";
    case Method::MetaEMG: return "MetaEMG";
  }
  return "?";
}

inline Method method_from_token(std::string_view s) {
  for (Method m : kAllMethods)
    if (to_token(m) == s) return m;
  throw ConfigError("unknown method '" + std::string(s) + "'");
}

struct MethodSpec {
  Method method = Method::MetaEMG;
  int finetune_epochs = 3;
  PretrainKind pretrain = PretrainKind::Meta;

  std::string name() const { return std::string(to_token(method)); }

  static MethodSpec resolve(Method m, const ExperimentConfig& cfg = {}) {
    switch (m) {
      case Method::NoPretrain3: return {m, cfg.fast_epochs, PretrainKind::None};
      case Method::NoPretrainConverged: return {m, cfg.converged_epochs, PretrainKind::None};
      case Method::ConvPretrain3: return {m, cfg.fast_epochs, PretrainKind::Conventional};
      case Method::ConvPretrainConverged: return {m, cfg.converged_epochs, PretrainKind::Conventional};
      case Method::MetaEMG: return {m, cfg.fast_epochs, PretrainKind::Meta};
    }
    throw ConfigError("unknown method");
  }
};

inline std::vector<MethodSpec> resolve_methods(std::span<const Method> ms, const ExperimentConfig& cfg) {
  std::vector<MethodSpec> out;
  for (Method m : ms) out.push_back(MethodSpec::resolve(m, cfg));
  return out;
}

/// Base parameters for a method: random init, pooled supervised training, or
/// meta-training, all from the same init stream for a given seed.
inline ModelParams pretrain_base(PretrainKind kind, const Network& net, std::span<const Task> meta_train_tasks,
                                 const ExperimentConfig& cfg, std::uint64_t seed, TrainLog* log = nullptr) {
  switch (kind) {
    case PretrainKind::None: return initial_params(net, seed);
    case PretrainKind::Conventional: return conventional_pretrain(net, meta_train_tasks, cfg.pretrain, seed);
    case PretrainKind::Meta: {
      MetaConfig mc = cfg.meta;
      mc.seed = seed;
      mc.threads = cfg.threads;
      auto [theta, tl] = meta_train(net, meta_train_tasks, mc);
      if (log) *log = std::move(tl);
      return theta;
    }
  }
  throw ConfigError("unknown pretraining kind");
}

inline std::uint64_t finetune_seed(std::uint64_t seed, const Task& t) { return derive_seed(seed, "finetune:" + t.id()); }

inline ModelParams adapt_to_task(const Network& net, const ModelParams& base, const Task& t, int epochs,
                                 const ExperimentConfig& cfg, std::uint64_t seed) {
  SupervisedConfig ft = cfg.finetune;
  ft.epochs = epochs;
  return fine_tune(net, base, t.support, ft, finetune_seed(seed, t));
}

// ---------------------------------------------------------------------------
// Scoring and aggregation
// ---------------------------------------------------------------------------

struct TaskRecord {
  std::string method;
  std::uint64_t seed = 0;
  std::string task_id;
  std::string subject;
  double fraction = 1.0;
  int n_pretrain = 0;
  std::string partition;
  std::size_t correct = 0;
  std::size_t total = 0;

  double accuracy() const { return total == 0 ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(total); }
};

struct ResultRow {
  std::string method;
  /// Subject id, or "average" for the across-subject column.
  std::string subject;
  double fraction = 1.0;
  int n_pretrain = 0;
  double mean_accuracy = 0.0;
  double std_over_seeds = 0.0;
  std::size_t n_seeds = 0;
  std::size_t n_tasks = 0;
};

inline constexpr std::string_view kAggregation =
    "per-window argmax accuracy on each query set; mean over a subject's tasks per seed; average = mean over "
    "subjects per seed; reported mean and sample std are over seeds";

struct ResultTable {
  std::string scenario;
  std::vector<std::uint64_t> seeds;
  std::vector<ResultRow> rows;
  std::vector<TaskRecord> records;
  nlohmann::json ablation = nlohmann::json::object();

  const ResultRow* find(std::string_view method, std::string_view subject = "average", double fraction = 1.0,
                        int n_pretrain = 0) const {
    for (const ResultRow& r : rows)
      if (r.method == method && r.subject == subject && std::abs(r.fraction - fraction) < 1e-12 &&
          r.n_pretrain == n_pretrain)
        return &r;
    return nullptr;
  }

  std::string csv() const {
    std::ostringstream out;
    out << "scenario,method,subject,fraction,n_pretrain,mean_accuracy,std_over_seeds,n_seeds,n_tasks\n";
    out.precision(17);
    for (const ResultRow& r : rows)
      out << scenario << ',' << r.method << ',' << r.subject << ',' << r.fraction << ',' << r.n_pretrain << ','
          << r.mean_accuracy << ',' << r.std_over_seeds << ',' << r.n_seeds << ',' << r.n_tasks << '\n';
    return out.str();
  }

  nlohmann::json json() const {
    nlohmann::json rs = nlohmann::json::array(), recs = nlohmann::json::array();
    for (const ResultRow& r : rows)
      rs.push_back({{"method", r.method},
                    {"subject", r.subject},
                    {"fraction", r.fraction},
                    {"n_pretrain", r.n_pretrain},
                    {"mean_accuracy", r.mean_accuracy},
                    {"std_over_seeds", r.std_over_seeds},
                    {"n_seeds", r.n_seeds},
                    {"n_tasks", r.n_tasks}});
    for (const TaskRecord& t : records)
      recs.push_back({{"method", t.method},
                      {"seed", t.seed},
                      {"task", t.task_id},
                      {"subject", t.subject},
                      {"fraction", t.fraction},
                      {"n_pretrain", t.n_pretrain},
                      {"partition", t.partition},
                      {"correct", t.correct},
                      {"total", t.total},
                      {"accuracy", t.accuracy()}});
    return {{"scenario", scenario},
            {"seeds", seeds},
            {"aggregation", kAggregation},
            {"std_column", "sample standard deviation over seeds of the per-seed mean"},
            {"ablation", ablation},
            {"rows", rs},
            {"task_records", recs}};
  }
};

inline std::pair<double, double> mean_and_std(std::span<const double> xs) {
  if (xs.empty()) return {0.0, 0.0};
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

/// Rows for every (method, fraction, n_pretrain) group in `records`.
inline std::vector<ResultRow> aggregate(std::span<const TaskRecord> records) {
  using GroupKey = std::tuple<std::string, double, int>;
  // group -> seed -> subject -> task accuracies
  std::map<GroupKey, std::map<std::uint64_t, std::map<std::string, std::vector<double>>>> groups;
  std::vector<GroupKey> group_order;
  for (const TaskRecord& r : records) {
    GroupKey key{r.method, r.fraction, r.n_pretrain};
    if (!groups.count(key)) group_order.push_back(key);
    groups[key][r.seed][r.subject].push_back(r.accuracy());
  }
  std::vector<ResultRow> rows;
  for (const GroupKey& key : group_order) {
    const auto& by_seed = groups.at(key);
    std::map<std::string, std::vector<double>> subject_per_seed;
    std::map<std::string, std::size_t> subject_tasks;
    std::vector<double> average_per_seed;
    for (const auto& [seed, by_subject] : by_seed) {
      std::vector<double> subject_means;
      for (const auto& [subject, accs] : by_subject) {
        const double m = mean_and_std(accs).first;
        subject_per_seed[subject].push_back(m);
        subject_tasks[subject] = accs.size();
        subject_means.push_back(m);
      }
      average_per_seed.push_back(mean_and_std(subject_means).first);
    }
    const auto& [method, fraction, n_pretrain] = key;
    std::size_t total_tasks = 0;
    for (const auto& [subject, means] : subject_per_seed) {
      const auto [m, s] = mean_and_std(means);
      rows.push_back({method, subject, fraction, n_pretrain, m, s, means.size(), subject_tasks[subject]});
      total_tasks += subject_tasks[subject];
    }
    const auto [m, s] = mean_and_std(average_per_seed);
    rows.push_back({method, "average", fraction, n_pretrain, m, s, average_per_seed.size(), total_tasks});
  }
  return rows;
}

/// Query-set predictions for one task under one seed.
using Predictor = std::function<std::vector<int>(std::uint64_t seed, const Task& task)>;

inline std::vector<int> query_labels(const Task& t) {
  std::vector<int> out;
  for (const WindowedSample& w : t.query) out.push_back(static_cast<int>(w.label()));
  return out;
}

inline TaskRecord score_predictions(const Task& t, std::span<const int> predictions) {
  if (predictions.size() != t.query.size()) throw ShapeError("prediction count does not match query size");
  TaskRecord r;
  r.task_id = t.id();
  r.subject = t.source.subject_id;
  r.total = t.query.size();
  for (std::size_t i = 0; i < t.query.size(); ++i) r.correct += predictions[i] == static_cast<int>(t.query[i].label());
  return r;
}

/// Argmax predictions on the query set, in chunks to bound memory.
inline std::vector<int> predict_query(const Network& net, const ModelParams& params, const Task& t,
                                      std::size_t chunk = 512) {
  std::vector<int> out;
  out.reserve(t.query.size());
  for (std::size_t begin = 0; begin < t.query.size(); begin += chunk) {
    const std::size_t end = std::min(t.query.size(), begin + chunk);
    const Batch b = make_batch(std::span(t.query).subspan(begin, end - begin));
    const auto p = net.classify(params, b.inputs);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

/// Scores an arbitrary predictor on every meta-test task for every seed.
inline ResultTable evaluate_predictor(const std::string& name, const Predictor& predictor, const ScenarioSplit& split,
                                      std::span<const std::uint64_t> seeds) {
  if (seeds.empty()) throw PreconditionError("evaluate: seed list is empty");
  if (split.meta_test.empty()) throw PreconditionError("evaluate: split has no meta-test tasks");
  ResultTable table;
  table.scenario = std::string(to_token(split.scenario));
  table.seeds.assign(seeds.begin(), seeds.end());
  for (std::uint64_t seed : seeds)
    for (const Task& t : split.meta_test) {
      TaskRecord r = score_predictions(t, predictor(seed, t));
      r.method = name;
      r.seed = seed;
      table.records.push_back(std::move(r));
    }
  table.rows = aggregate(table.records);
  return table;
}

/// Fine-tunes `base` on every meta-test task at each support fraction and
/// appends the scored records.
inline void score_base(const Network& net, const ModelParams& base, const MethodSpec& m, const ScenarioSplit& split,
                       std::uint64_t seed, const ExperimentConfig& cfg, std::span<const double> fractions,
                       std::vector<TaskRecord>& out) {
  for (double fraction : fractions) {
    for (const Task& full : split.meta_test) {
      const Task t = downsample_support(full, fraction, finetune_seed(seed, full), cfg.downsample);
      const ModelParams adapted = adapt_to_task(net, base, t, m.finetune_epochs, cfg, seed);
      TaskRecord r = score_predictions(t, predict_query(net, adapted, t));
      r.method = m.name();
      r.seed = seed;
      r.fraction = fraction;
      out.push_back(std::move(r));
    }
  }
}

/// Runs several methods on one split, sharing pretraining between methods of
/// the same kind, and scoring each requested support fraction.
inline ResultTable evaluate_methods(std::span<const MethodSpec> methods, const ScenarioSplit& split,
                                    std::span<const std::uint64_t> seeds, const ExperimentConfig& cfg,
                                    std::span<const double> fractions = std::span<const double>()) {
  if (seeds.empty()) throw PreconditionError("evaluate: seed list is empty");
  if (split.meta_test.empty()) throw PreconditionError("evaluate: split has no meta-test tasks");
  static constexpr double kFull[] = {1.0};
  if (fractions.empty()) fractions = kFull;
  for (double f : fractions)
    if (!(f > 0.0) || f > 1.0) throw PreconditionError("support fractions must lie in (0, 1]");
  for (const MethodSpec& m : methods)
    if (m.pretrain != PretrainKind::None && split.meta_train.empty())
      throw PreconditionError(m.name() + " needs meta-training tasks");

  const Network net(cfg.network());
  ResultTable table;
  table.scenario = std::string(to_token(split.scenario));
  table.seeds.assign(seeds.begin(), seeds.end());
  for (std::uint64_t seed : seeds) {
    std::map<PretrainKind, ModelParams> bases;
    for (const MethodSpec& m : methods) {
      if (!bases.count(m.pretrain)) bases.emplace(m.pretrain, pretrain_base(m.pretrain, net, split.meta_train, cfg, seed));
      score_base(net, bases.at(m.pretrain), m, split, seed, cfg, fractions, table.records);
    }
  }
  table.rows = aggregate(table.records);
  return table;
}

/// Scores pretrained base parameters, one per seed, on the meta-test tasks.
inline ResultTable evaluate_bases(const MethodSpec& method, const std::map<std::uint64_t, ModelParams>& bases,
                                  const ScenarioSplit& split, const ExperimentConfig& cfg,
                                  std::span<const double> fractions = std::span<const double>()) {
  if (bases.empty()) throw PreconditionError("evaluate: no base parameters");
  if (split.meta_test.empty()) throw PreconditionError("evaluate: split has no meta-test tasks");
  static constexpr double kFull[] = {1.0};
  if (fractions.empty()) fractions = kFull;
  const Network net(cfg.network());
  ResultTable table;
  table.scenario = std::string(to_token(split.scenario));
  for (const auto& [seed, base] : bases) {
    if (base.layer_sizes() != net.config().layer_sizes) throw ShapeError("base parameters do not match the network");
    table.seeds.push_back(seed);
    score_base(net, base, method, split, seed, cfg, fractions, table.records);
  }
  table.rows = aggregate(table.records);
  return table;
}

inline ResultTable evaluate_method(const MethodSpec& method, const ScenarioSplit& split,
                                   std::span<const std::uint64_t> seeds, const ExperimentConfig& cfg) {
  return evaluate_methods(std::span(&method, 1), split, seeds, cfg);
}

inline ResultTable ablate_support_fraction(const ScenarioSplit& split, std::span<const double> fractions,
                                           std::span<const MethodSpec> methods, std::span<const std::uint64_t> seeds,
                                           const ExperimentConfig& cfg) {
  ResultTable t = evaluate_methods(methods, split, seeds, cfg, fractions);
  t.ablation = {{"kind", "support_fraction"},
                {"fractions", std::vector<double>(fractions.begin(), fractions.end())},
                {"downsample", detail::enum_name(cfg.downsample)}};
  return t;
}

struct Partition {
  std::vector<std::string> pretrain;
  std::string held_out;
};

/// Every choice of n pretraining subjects paired with each remaining subject.
inline std::vector<Partition> pretrain_partitions(const std::vector<std::string>& subjects, int n) {
  if (n < 1 || static_cast<std::size_t>(n) + 1 > subjects.size())
    throw PreconditionError("need at least n_pretrain + 1 subjects (have " + std::to_string(subjects.size()) + ")");
  std::vector<Partition> out;
  std::vector<bool> pick(subjects.size(), false);
  std::fill(pick.begin(), pick.begin() + n, true);
  do {
    std::vector<std::string> chosen;
    for (std::size_t i = 0; i < subjects.size(); ++i)
      if (pick[i]) chosen.push_back(subjects[i]);
    for (std::size_t i = 0; i < subjects.size(); ++i)
      if (!pick[i]) out.push_back({chosen, subjects[i]});
  } while (std::prev_permutation(pick.begin(), pick.end()));
  return out;
}

/// Vary how many subjects the base model is pretrained on; each held-out
/// subject's 14 tasks are the meta-test set.
inline ResultTable ablate_pretrain_subjects(std::span<const Task> corpus, std::span<const int> n_pretrain,
                                            std::span<const MethodSpec> methods, std::span<const std::uint64_t> seeds,
                                            const ExperimentConfig& cfg) {
  if (seeds.empty()) throw PreconditionError("evaluate: seed list is empty");
  const Network net(cfg.network());
  const std::vector<std::string> subjects = subjects_of(corpus);
  ResultTable table;
  table.scenario = "subject";
  table.seeds.assign(seeds.begin(), seeds.end());
  nlohmann::json partition_counts = nlohmann::json::object();
  for (int n : n_pretrain) {
    const auto parts = pretrain_partitions(subjects, n);
    partition_counts[std::to_string(n)] = parts.size();
    // Group partitions sharing a pretraining set so each base is trained once.
    std::map<std::vector<std::string>, std::vector<std::string>> by_set;
    for (const Partition& p : parts) by_set[p.pretrain].push_back(p.held_out);
    for (std::uint64_t seed : seeds) {
      for (const auto& [pre, held] : by_set) {
        const std::vector<Task> train = tasks_of(corpus, {pre.begin(), pre.end()});
        std::map<PretrainKind, ModelParams> bases;
        for (const MethodSpec& m : methods) {
          if (!bases.count(m.pretrain)) bases.emplace(m.pretrain, pretrain_base(m.pretrain, net, train, cfg, seed));
          for (const std::string& h : held) {
            std::string label;
            for (const std::string& s : pre) label += (label.empty() ? "" : "+") + s;
            label += "->" + h;
            for (const Task& t : tasks_of(corpus, {h})) {
              const ModelParams adapted = adapt_to_task(net, bases.at(m.pretrain), t, m.finetune_epochs, cfg, seed);
              TaskRecord r = score_predictions(t, predict_query(net, adapted, t));
              r.method = m.name();
              r.seed = seed;
              r.n_pretrain = n;
              r.partition = label;
              table.records.push_back(std::move(r));
            }
          }
        }
      }
    }
  }
  table.rows = aggregate(table.records);
  table.ablation = {{"kind", "pretrain_subjects"},
                    {"n_pretrain", std::vector<int>(n_pretrain.begin(), n_pretrain.end())},
                    {"partitions", partition_counts}};
  return table;
}

// ---------------------------------------------------------------------------
// Corpus -> tasks
// ---------------------------------------------------------------------------

inline std::vector<Task> corpus_tasks(const Corpus& corpus, const ExperimentConfig& cfg) {
  std::vector<Task> tasks;
  for (const CorpusEntry& e : corpus.entries) tasks.push_back(make_task(e.recording, cfg.window, e.repetition, cfg.rescale));
  return tasks;
}

inline std::vector<Task> corpus_tasks(std::span<const LoadedRecording> recs, const ExperimentConfig& cfg) {
  std::vector<Task> tasks;
  for (const LoadedRecording& r : recs) tasks.push_back(make_task(r.recording, cfg.window, r.repetition, cfg.rescale));
  return tasks;
}

}  // namespace metaemg
