#pragma once

// Recordings -> (support, query) tasks, and the two assessment scenarios.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaemg/dataio.hpp"
#include "metaemg/error.hpp"
#include "metaemg/rng.hpp"

namespace metaemg {

struct TaskSource {
  std::string subject_id;
  int day = 1;
  Condition condition = Condition::ArmOnMotorOff;
  int repetition = 0;

  auto key() const { return std::tie(subject_id, day, condition, repetition); }
  friend bool operator==(const TaskSource& a, const TaskSource& b) { return a.key() == b.key(); }
  friend bool operator<(const TaskSource& a, const TaskSource& b) { return a.key() < b.key(); }
};

struct Task {
  std::vector<WindowedSample> support;
  std::vector<WindowedSample> query;
  TaskSource source;
  /// Last sample index of the first motion; support windows end at or before it.
  std::size_t boundary_k = 0;
  /// Final sample index of the recording.
  std::size_t n = 0;

  std::string id() const {
    return source.subject_id + "_d" + std::to_string(source.day) + "_" + std::string(to_token(source.condition)) +
           "_r" + std::to_string(source.repetition);
  }

  std::size_t window_count() const { return support.size() + query.size(); }
};

/// Last index of the relax run that follows the first Close run.
inline std::size_t first_motion_boundary(std::span<const Intent> cues) {
  if (!has_three_motions(cues)) throw StructureError("recording does not contain three open-relax-close motions");
  const auto runs = cue_runs(cues);
  for (std::size_t r = 0; r < runs.size(); ++r) {
    if (runs[r].intent != Intent::Close) continue;
    if (r + 1 >= runs.size() || runs[r + 1].intent != Intent::Relax)
      throw StructureError("first close run is not followed by a relax run");
    if (r + 2 >= runs.size() || runs[r + 2].intent != Intent::Open)
      throw StructureError("second motion does not start with an open cue after the first close");
    return runs[r + 1].end - 1;
  }
  throw StructureError("recording has no close run");
}

/// Splits a preprocessed recording into its support (first motion) and query
/// (remaining motions) windows, assigned by each window's final sample.
inline Task split_task(std::shared_ptr<const RawRecording> rec, const WindowConfig& windows = {}, int repetition = 0) {
  Task task;
  task.boundary_k = first_motion_boundary(rec->cues);
  task.n = rec->n_samples() - 1;
  task.source = {rec->subject_id, rec->day, rec->condition, repetition};
  for (WindowedSample& w : window(rec, windows))
    (w.t_end() <= task.boundary_k ? task.support : task.query).push_back(std::move(w));
  if (task.support.empty() || task.query.empty())
    throw StructureError(task.id() + ": support or query set is empty for this window configuration");
  return task;
}

/// Clip, rescale, and split a raw recording.
inline Task make_task(RawRecording raw, const WindowConfig& windows = {}, int repetition = 0,
                      RescaleMode mode = RescaleMode::FixedAffine) {
  return split_task(std::make_shared<const RawRecording>(preprocess(std::move(raw), mode)), windows, repetition);
}

enum class Scenario { SessionAdaptation, SubjectAdaptation };

constexpr std::string_view to_token(Scenario s) {
  return s == Scenario::SessionAdaptation ? "session" : "subject";
}

inline Scenario scenario_from_token(std::string_view s) {
  if (s == "session") return Scenario::SessionAdaptation;
  if (s == "subject") return Scenario::SubjectAdaptation;
  throw ConfigError("unknown scenario '" + std::string(s) + "' (expected session or subject)");
}

struct ScenarioSplit {
  std::vector<Task> meta_train;
  std::vector<Task> meta_test;
  Scenario scenario = Scenario::SessionAdaptation;
  std::optional<std::string> held_out;
};

namespace detail {
inline void sort_tasks(std::vector<Task>& tasks) {
  std::stable_sort(tasks.begin(), tasks.end(), [](const Task& a, const Task& b) { return a.source < b.source; });
}
}  // namespace detail

/// Session: day-1 tasks train, day-2 tasks test. Subject: every task of
/// `held_out` tests, all other subjects' tasks train.
inline ScenarioSplit build_scenario(std::span<const Task> corpus, Scenario scenario,
                                    const std::optional<std::string>& held_out = std::nullopt) {
  if (corpus.empty()) throw PreconditionError("build_scenario: empty corpus");
  ScenarioSplit split;
  split.scenario = scenario;
  if (scenario == Scenario::SessionAdaptation) {
    if (held_out) throw PreconditionError("session adaptation takes no held-out subject");
    for (const Task& t : corpus) (t.source.day == 1 ? split.meta_train : split.meta_test).push_back(t);
  } else {
    if (!held_out) throw PreconditionError("subject adaptation requires a held-out subject");
    const bool present = std::any_of(corpus.begin(), corpus.end(),
                                     [&](const Task& t) { return t.source.subject_id == *held_out; });
    if (!present) throw PreconditionError("held-out subject '" + *held_out + "' is not in the corpus");
    split.held_out = held_out;
    for (const Task& t : corpus) (t.source.subject_id == *held_out ? split.meta_test : split.meta_train).push_back(t);
  }
  detail::sort_tasks(split.meta_train);
  detail::sort_tasks(split.meta_test);
  return split;
}

/// Tasks whose subject is in `subjects`, sorted.
inline std::vector<Task> tasks_of(std::span<const Task> corpus, const std::set<std::string>& subjects) {
  std::vector<Task> out;
  for (const Task& t : corpus)
    if (subjects.count(t.source.subject_id)) out.push_back(t);
  detail::sort_tasks(out);
  return out;
}

inline std::vector<std::string> subjects_of(std::span<const Task> corpus) {
  std::set<std::string> s;
  for (const Task& t : corpus) s.insert(t.source.subject_id);
  return {s.begin(), s.end()};
}

enum class DownsampleMode {
  /// Earliest ceil(f |support|) windows.
  Prefix,
  /// Uniform random subset of the same size, kept in temporal order.
  UniformRandom,
};

inline Task downsample_support(Task task, double fraction, std::uint64_t seed = 0,
                               DownsampleMode mode = DownsampleMode::Prefix) {
  if (!(fraction > 0.0) || fraction > 1.0) throw PreconditionError("support fraction must lie in (0, 1]");
  const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(task.support.size()) - 1e-9));
  if (keep >= task.support.size()) return task;
  if (mode == DownsampleMode::Prefix) {
    task.support.erase(task.support.begin() + static_cast<std::ptrdiff_t>(keep), task.support.end());
    return task;
  }
  std::vector<std::size_t> idx(task.support.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng(seed).split("downsample").shuffle(std::span(idx));
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  std::vector<WindowedSample> kept;
  kept.reserve(keep);
  for (std::size_t i : idx) kept.push_back(task.support[i]);
  task.support = std::move(kept);
  return task;
}

inline nlohmann::json task_json(const Task& t) {
  return {{"id", t.id()},
          {"subject", t.source.subject_id},
          {"day", t.source.day},
          {"condition", to_token(t.source.condition)},
          {"repetition", t.source.repetition},
          {"boundary_k", t.boundary_k},
          {"n", t.n},
          {"support_count", t.support.size()},
          {"query_count", t.query.size()},
          {"support_t_end", t.support.empty() ? nlohmann::json::array()
                                              : nlohmann::json::array({t.support.front().t_end(), t.support.back().t_end()})},
          {"query_t_end", t.query.empty() ? nlohmann::json::array()
                                          : nlohmann::json::array({t.query.front().t_end(), t.query.back().t_end()})}};
}

inline nlohmann::json scenario_json(const ScenarioSplit& s) {
  nlohmann::json train = nlohmann::json::array(), test = nlohmann::json::array();
  for (const Task& t : s.meta_train) train.push_back(task_json(t));
  for (const Task& t : s.meta_test) test.push_back(task_json(t));
  return {{"scenario", to_token(s.scenario)},
          {"held_out", s.held_out ? nlohmann::json(*s.held_out) : nlohmann::json(nullptr)},
          {"meta_train_count", s.meta_train.size()},
          {"meta_test_count", s.meta_test.size()},
          {"meta_train", train},
          {"meta_test", test}};
}

}  // namespace metaemg
