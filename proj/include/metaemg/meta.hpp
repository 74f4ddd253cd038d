#pragma once

// MAML for intent inferral: inner adaptation on the support set, outer update
// on the post-adaptation query loss, differentiated exactly through the
// unrolled inner loop.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaemg/error.hpp"
#include "metaemg/nn.hpp"
#include "metaemg/parallel.hpp"
#include "metaemg/rng.hpp"
#include "metaemg/tasks.hpp"

namespace metaemg {

enum class InnerRule { SGD, Adam };
enum class MetaGradientKind { SecondOrder, FirstOrder };
enum class OuterRule { Adam, SGD };
enum class TaskReduction { Sum, Mean };
enum class Optimizer { Adam, SGD };

struct MetaConfig {
  double alpha = 1e-4;
  double beta = 5e-4;
  int inner_steps = 5;
  int outer_epochs = 50;
  int decay_every = 10;
  double decay_factor = 0.9;
  InnerRule inner_rule = InnerRule::SGD;
  MetaGradientKind meta_gradient = MetaGradientKind::SecondOrder;
  OuterRule outer_rule = OuterRule::Adam;
  TaskReduction reduction = TaskReduction::Sum;
  std::uint64_t seed = 0;
  unsigned threads = 1;

  /// Outer learning rate used during 0-based `epoch`.
  double beta_at(int epoch) const {
    return beta * std::pow(decay_factor, static_cast<double>(decay_every > 0 ? epoch / decay_every : 0));
  }

  void validate() const {
    // alpha = 0 is accepted so the degenerate no-adaptation case can be run.
    if (!(alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
    if (!(beta > 0.0)) throw ConfigError("beta must be positive");
    if (inner_steps < 0) throw ConfigError("inner_steps must be >= 0");
    if (outer_epochs < 1) throw ConfigError("outer_epochs must be >= 1");
    if (meta_gradient == MetaGradientKind::SecondOrder && inner_rule == InnerRule::Adam)
      throw ConfigError("second-order meta-gradients require the SGD inner rule");
  }
};

/// Support and query windows of one task, materialized once for training.
struct TaskBatches {
  Batch support;
  Batch query;

  static TaskBatches from(const Task& t) { return {make_batch(t.support), make_batch(t.query)}; }
};

struct TaskLosses {
  /// Support loss at the base parameters.
  double support = 0.0;
  /// Query loss after inner adaptation.
  double query = 0.0;
};

/// theta after M full-batch steps on the support loss; theta is untouched.
inline ModelParams inner_adapt(const Network& net, const ModelParams& theta, const Batch& support, double alpha,
                               int steps, InnerRule rule = InnerRule::SGD) {
  if (support.empty()) throw PreconditionError("inner_adapt: empty support set");
  if (steps < 0) throw ConfigError("inner_adapt: negative step count");
  ModelParams adapted = theta;
  AdamState adam;
  if (rule == InnerRule::Adam) adam = AdamState(theta);
  for (int m = 0; m < steps; ++m) {
    const GradientVector g = net.batch_gradient(adapted, support);
    if (rule == InnerRule::SGD)
      adapted.axpy(-alpha, g);
    else
      adam_step(adam, adapted, g, alpha);
  }
  return adapted;
}

inline ModelParams inner_adapt(const Network& net, const ModelParams& theta, std::span<const WindowedSample> support,
                               double alpha, int steps, InnerRule rule = InnerRule::SGD) {
  if (support.empty()) throw PreconditionError("inner_adapt: empty support set");
  return inner_adapt(net, theta, make_batch(support), alpha, steps, rule);
}

/// Gradient of L_q(adapt(theta)) with respect to theta.
///
/// Second order: with theta_{j+1} = theta_j - alpha g_s(theta_j), the chain
/// rule gives v_M = grad L_q(theta_M) and v_j = (I - alpha H_s(theta_j)) v_{j+1};
/// the result is v_0. First order: v_M alone.
inline GradientVector meta_gradient(const Network& net, const ModelParams& theta, const TaskBatches& task,
                                    const MetaConfig& cfg, TaskLosses* losses = nullptr) {
  if (task.support.empty() || task.query.empty()) throw PreconditionError("meta_gradient: empty support or query");
  if (cfg.meta_gradient == MetaGradientKind::SecondOrder && cfg.inner_rule == InnerRule::Adam)
    throw ConfigError("second-order meta-gradients require the SGD inner rule");

  TaskLosses tl;
  if (cfg.meta_gradient == MetaGradientKind::FirstOrder) {
    if (losses) tl.support = net.batch_loss(theta, task.support);
    const ModelParams adapted = inner_adapt(net, theta, task.support, cfg.alpha, cfg.inner_steps, cfg.inner_rule);
    GradientVector v;
    tl.query = net.trace(adapted, task.query, &v).loss;
    if (losses) *losses = tl;
    return v;
  }

  const auto steps = static_cast<std::size_t>(cfg.inner_steps);
  std::vector<ModelParams> points;
  std::vector<Network::Trace> traces;
  points.reserve(steps);
  traces.reserve(steps);
  ModelParams current = theta;
  for (std::size_t j = 0; j < steps; ++j) {
    GradientVector g;
    traces.push_back(net.trace(current, task.support, &g));
    if (j == 0) tl.support = traces.back().loss;
    points.push_back(current);
    current.axpy(-cfg.alpha, g);
  }
  GradientVector v;
  tl.query = net.trace(current, task.query, &v).loss;
  if (steps == 0 && losses) tl.support = net.batch_loss(theta, task.support);
  for (std::size_t j = steps; j-- > 0;) v.axpy(-cfg.alpha, net.hvp(points[j], traces[j], v));
  if (losses) *losses = tl;
  return v;
}

inline GradientVector meta_gradient(const Network& net, const ModelParams& theta, const Task& task,
                                    const MetaConfig& cfg, TaskLosses* losses = nullptr) {
  return meta_gradient(net, theta, TaskBatches::from(task), cfg, losses);
}

struct EpochLog {
  int epoch = 0;
  double mean_query_loss = 0.0;
  double mean_support_loss = 0.0;
  double beta = 0.0;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;

  /// One JSON object per line.
  std::string jsonl() const {
    std::string out;
    for (const EpochLog& e : epochs) {
      out += nlohmann::json{{"epoch", e.epoch},
                            {"mean_query_loss", e.mean_query_loss},
                            {"mean_support_loss", e.mean_support_loss},
                            {"beta", e.beta},
                            {"seed", seed}}
                 .dump();
      out += '\n';
    }
    return out;
  }
};

/// Tasks in (subject, day, condition, repetition) order so the outer
/// reduction does not depend on how the caller ordered them.
inline std::vector<const Task*> canonical_order(std::span<const Task> tasks) {
  std::vector<const Task*> order;
  for (const Task& t : tasks) order.push_back(&t);
  std::stable_sort(order.begin(), order.end(), [](const Task* a, const Task* b) { return a->source < b->source; });
  return order;
}

inline ModelParams initial_params(const Network& net, std::uint64_t seed) {
  return net.init_params(derive_seed(seed, "init"));
}

/// One outer step: per-task meta-gradients from the same theta, reduced in
/// task order, followed by the outer update.
inline std::pair<ModelParams, TrainLog> meta_train(const Network& net, std::span<const Task> tasks,
                                                   const MetaConfig& cfg,
                                                   std::optional<ModelParams> init = std::nullopt) {
  cfg.validate();
  if (tasks.empty()) throw PreconditionError("meta_train: empty task list");
  const auto start = std::chrono::steady_clock::now();

  std::vector<TaskBatches> batches;
  for (const Task* t : canonical_order(tasks)) batches.push_back(TaskBatches::from(*t));

  ModelParams theta = init ? std::move(*init) : initial_params(net, cfg.seed);
  AdamState adam(theta);
  TrainLog log;
  log.seed = cfg.seed;

  const unsigned workers = resolve_threads(cfg.threads);
  for (int epoch = 0; epoch < cfg.outer_epochs; ++epoch) {
    GradientVector total = net.zeros();
    std::vector<TaskLosses> losses(batches.size());
    for (std::size_t begin = 0; begin < batches.size(); begin += workers) {
      const std::size_t count = std::min<std::size_t>(workers, batches.size() - begin);
      std::vector<GradientVector> grads(count);
      parallel_for(count, workers, [&](std::size_t i) {
        grads[i] = meta_gradient(net, theta, batches[begin + i], cfg, &losses[begin + i]);
      });
      for (const GradientVector& g : grads) total += g;
    }
    if (cfg.reduction == TaskReduction::Mean) total *= 1.0 / static_cast<double>(batches.size());

    const double beta = cfg.beta_at(epoch);
    if (cfg.outer_rule == OuterRule::Adam)
      adam_step(adam, theta, total, beta);
    else
      theta.axpy(-beta, total);

    EpochLog e;
    e.epoch = epoch;
    e.beta = beta;
    for (const TaskLosses& l : losses) {
      e.mean_query_loss += l.query;
      e.mean_support_loss += l.support;
    }
    e.mean_query_loss /= static_cast<double>(losses.size());
    e.mean_support_loss /= static_cast<double>(losses.size());
    log.epochs.push_back(e);
  }
  log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(theta), std::move(log)};
}

// ---------------------------------------------------------------------------
// Supervised training: fine-tuning and conventional pretraining
// ---------------------------------------------------------------------------

struct SupervisedConfig {
  int epochs = 3;
  double lr = 1e-4;
  /// 0 means full batch.
  std::size_t batch_size = 64;
  Optimizer optimizer = Optimizer::Adam;
};

/// Mini-batch training with a per-epoch seeded shuffle.
inline ModelParams train_supervised(const Network& net, ModelParams params, std::span<const WindowedSample> data,
                                    const SupervisedConfig& cfg, std::uint64_t seed) {
  if (data.empty()) throw PreconditionError("training set is empty");
  if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");
  AdamState adam(params);
  auto step = [&](const Batch& b) {
    const GradientVector g = net.batch_gradient(params, b);
    if (cfg.optimizer == Optimizer::Adam)
      adam_step(adam, params, g, cfg.lr);
    else
      params.axpy(-cfg.lr, g);
  };
  if (cfg.batch_size == 0 || cfg.batch_size >= data.size()) {
    const Batch full = make_batch(data);
    for (int e = 0; e < cfg.epochs; ++e) step(full);
    return params;
  }
  std::vector<std::size_t> order(data.size());
  std::vector<WindowedSample> chunk;
  const Rng shuffle_root = Rng(seed).split("shuffle");
  for (int e = 0; e < cfg.epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = shuffle_root.split(static_cast<std::uint64_t>(e));
    rng.shuffle(std::span(order));
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      chunk.clear();
      for (std::size_t i = begin; i < end; ++i) chunk.push_back(data[order[i]]);
      step(make_batch(chunk));
    }
  }
  return params;
}

inline ModelParams fine_tune(const Network& net, const ModelParams& theta, std::span<const WindowedSample> support,
                             const SupervisedConfig& cfg, std::uint64_t seed = 0) {
  if (support.empty()) throw PreconditionError("fine_tune: empty support set");
  return train_supervised(net, theta, support, cfg, seed);
}

/// Every support and query window of every task, in canonical task order.
inline std::vector<WindowedSample> pooled_windows(std::span<const Task> tasks) {
  std::vector<WindowedSample> all;
  for (const Task* t : canonical_order(tasks)) {
    all.insert(all.end(), t->support.begin(), t->support.end());
    all.insert(all.end(), t->query.begin(), t->query.end());
  }
  return all;
}

/// Supervised training on the pooled windows of all meta-training tasks.
inline ModelParams conventional_pretrain(const Network& net, std::span<const Task> tasks, const SupervisedConfig& cfg,
                                         std::uint64_t seed, std::optional<ModelParams> init = std::nullopt) {
  if (tasks.empty()) throw PreconditionError("conventional_pretrain: empty task list");
  ModelParams theta = init ? std::move(*init) : initial_params(net, seed);
  return train_supervised(net, std::move(theta), pooled_windows(tasks), cfg, derive_seed(seed, "pretrain"));
}

}  // namespace metaemg
