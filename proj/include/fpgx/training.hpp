#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "fpgx/common.hpp"
#include "fpgx/growth.hpp"
#include "fpgx/linalg.hpp"
#include "fpgx/mask.hpp"
#include "fpgx/tasks.hpp"
#include "fpgx/transformer.hpp"

namespace fpgx {

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 16;
  int steps = 1000;
  int eval_every = 100;
  std::uint64_t seed = 0;

  void validate() const {
    if (learning_rate <= 0.0) throw InputError("train: learning_rate must be > 0");
    if (steps < 1) throw InputError("train: steps must be >= 1");
    if (batch_size < 1) throw InputError("train: batch_size must be >= 1");
    if (eval_every < 1) throw InputError("train: eval_every must be >= 1");
  }
};

struct RunLogEntry {
  int step = 0;
  double new_acc = 0.0;
  double old_acc = 0.0;
  double train_loss = 0.0;
};

struct RunLog {
  std::vector<RunLogEntry> entries;

  std::string to_csv() const {
    std::string out = "step,new_acc,old_acc,train_loss\n";
    char buf[160];
    for (const RunLogEntry& e : entries) {
      std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", e.step, e.new_acc, e.old_acc,
                    e.train_loss);
      out += buf;
    }
    return out;
  }
};

template <class S>
struct AdamState {
  ModelParams<S> m;
  ModelParams<S> v;
  long t = 0;
};

namespace detail {

// One Adam update on the trainable block(s) of a single tensor. Frozen
// coordinates are never read or written, so their bits cannot move.
template <class S>
void adam_update_block(Eigen::Block<Mat<S>> w, Eigen::Block<Mat<S>> g,
                       Eigen::Block<Mat<S>> m, Eigen::Block<Mat<S>> v, long t,
                       const TrainConfig& cfg) {
  const S b1 = S(cfg.beta1), b2 = S(cfg.beta2);
  const S bc1 = S(1) - std::pow(b1, S(t));
  const S bc2 = S(1) - std::pow(b2, S(t));
  m.array() = b1 * m.array() + (S(1) - b1) * g.array();
  v.array() = b2 * v.array() + (S(1) - b2) * g.array().square();
  w.array() -= S(cfg.learning_rate) * (m.array() / bc1) /
               ((v.array() / bc2).sqrt() + S(cfg.eps));
}

template <class S>
void adam_update_tensor(Mat<S>& w, Mat<S>& g, Mat<S>& m, Mat<S>& v, long t,
                        const TrainConfig& cfg, const TensorMask* mask) {
  const Trainability kind = mask ? mask->kind : Trainability::FullTrainable;
  switch (kind) {
    case Trainability::FullFrozen:
      return;
    case Trainability::FullTrainable:
      adam_update_block<S>(w.block(0, 0, w.rows(), w.cols()),
                           g.block(0, 0, g.rows(), g.cols()),
                           m.block(0, 0, m.rows(), m.cols()),
                           v.block(0, 0, v.rows(), v.cols()), t, cfg);
      return;
    case Trainability::ColRange: {
      const Index n = mask->end - mask->begin;
      if (n <= 0) return;
      adam_update_block<S>(w.block(0, mask->begin, w.rows(), n),
                           g.block(0, mask->begin, g.rows(), n),
                           m.block(0, mask->begin, m.rows(), n),
                           v.block(0, mask->begin, v.rows(), n), t, cfg);
      return;
    }
    case Trainability::RowRange: {
      const Index n = mask->end - mask->begin;
      if (n <= 0) return;
      adam_update_block<S>(w.block(mask->begin, 0, n, w.cols()),
                           g.block(mask->begin, 0, n, g.cols()),
                           m.block(mask->begin, 0, n, m.cols()),
                           v.block(mask->begin, 0, n, v.cols()), t, cfg);
      return;
    }
  }
}

template <class S>
std::vector<std::pair<std::string, Mat<S>*>> collect_tensors(ModelParams<S>& p) {
  std::vector<std::pair<std::string, Mat<S>*>> out;
  for_each_tensor(p, [&out](const std::string& name, Mat<S>& t) { out.emplace_back(name, &t); });
  return out;
}

}  // namespace detail

template <class S>
void adam_step(ModelParams<S>& params, ModelParams<S>& grads, AdamState<S>& state,
               const TrainConfig& cfg, const FreezeMask* mask) {
  ++state.t;
  auto ws = detail::collect_tensors(params);
  auto gs = detail::collect_tensors(grads);
  auto ms = detail::collect_tensors(state.m);
  auto vs = detail::collect_tensors(state.v);
  for (size_t i = 0; i < ws.size(); ++i) {
    const TensorMask* tm = mask ? &mask->at(ws[i].first) : nullptr;
    detail::adam_update_tensor(*ws[i].second, *gs[i].second, *ms[i].second, *vs[i].second,
                               state.t, cfg, tm);
  }
}

template <class S>
using CheckpointCallback = std::function<void(int step, const ModelParams<S>&)>;

namespace detail {

template <class S>
std::vector<Example> next_batch(TrainSampler& sampler, int batch_size, bool full_sequence) {
  std::vector<Example> batch;
  batch.reserve(static_cast<size_t>(batch_size));
  for (int i = 0; i < batch_size; ++i) batch.push_back(to_example(sampler.next(), full_sequence));
  return batch;
}

}  // namespace detail

template <class S>
std::pair<ModelParams<S>, RunLog> pretrain(const TrainConfig& cfg, const TaskSpec& task_old,
                                           const ModelConfig& model_cfg) {
  cfg.validate();
  task_old.validate();
  if (task_old.min_vocab() > model_cfg.vocab_size)
    throw InputError("pretrain: task alphabet exceeds model vocab");
  if (task_old.episode_len() > model_cfg.max_seq_len)
    throw InputError("pretrain: task episodes exceed max_seq_len");

  ModelParams<S> params = init_params<S>(model_cfg);
  TrainSampler sampler(task_old);
  const std::vector<Episode> eval_set = make_eval_set(task_old);
  AdamState<S> state{zero_like(params), zero_like(params), 0};
  RunLog log;

  double last_loss = 0.0;
  double acc = 0.0;
  {
    auto probe = detail::next_batch<S>(sampler, cfg.batch_size, true);
    auto [l0, g0] = loss_and_grads(params, probe);
    last_loss = double(l0);
    acc = evaluate_accuracy(params, eval_set);
    log.entries.push_back({0, acc, acc, last_loss});
  }
  for (int step = 1; step <= cfg.steps; ++step) {
    auto batch = detail::next_batch<S>(sampler, cfg.batch_size, true);
    auto [loss, grads] = loss_and_grads(params, batch);
    last_loss = double(loss);
    adam_step(params, grads, state, cfg, nullptr);
    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      acc = evaluate_accuracy(params, eval_set);
      log.entries.push_back({step, acc, acc, last_loss});
      if (acc >= 0.95) return {std::move(params), std::move(log)};
    }
  }
  throw ConvergenceError("pretrain: accuracy " + std::to_string(acc) +
                             " still below 0.95 at step cap",
                         acc);
}

template <class S>
std::pair<ModelParams<S>, RunLog> finetune(const ModelParams<S>& start, const FreezeMask* mask,
                                           const TrainConfig& cfg, const TaskSpec& task_new,
                                           const TaskSpec& task_old,
                                           const CheckpointCallback<S>& on_checkpoint = {}) {
  cfg.validate();
  task_new.validate();
  task_old.validate();
  if (task_new.min_vocab() > start.config.vocab_size ||
      task_old.min_vocab() > start.config.vocab_size)
    throw InputError("finetune: task alphabet exceeds model vocab");
  if (task_new.episode_len() > start.config.max_seq_len)
    throw InputError("finetune: task episodes exceed max_seq_len");
  if (mask) {
    size_t covered = 0;
    for_each_tensor(start, [&](const std::string& name, const Mat<S>&) {
      mask->at(name);
      ++covered;
    });
    if (covered != mask->tensors.size())
      throw StructureError("finetune: mask names tensors absent from the model");
  }

  ModelParams<S> params = start;
  TrainSampler sampler(task_new);
  const std::vector<Episode> eval_new = make_eval_set(task_new);
  const std::vector<Episode> eval_old = make_eval_set(task_old);
  AdamState<S> state{zero_like(params), zero_like(params), 0};
  RunLog log;

  double last_loss;
  {
    auto probe = detail::next_batch<S>(sampler, cfg.batch_size, false);
    auto [l0, g0] = loss_and_grads(params, probe, mask);
    last_loss = double(l0);
    log.entries.push_back(
        {0, evaluate_accuracy(params, eval_new), evaluate_accuracy(params, eval_old), last_loss});
    if (on_checkpoint) on_checkpoint(0, params);
  }
  for (int step = 1; step <= cfg.steps; ++step) {
    auto batch = detail::next_batch<S>(sampler, cfg.batch_size, false);
    auto [loss, grads] = loss_and_grads(params, batch, mask);
    last_loss = double(loss);
    adam_step(params, grads, state, cfg, mask);
    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      log.entries.push_back({step, evaluate_accuracy(params, eval_new),
                             evaluate_accuracy(params, eval_old), last_loss});
      if (on_checkpoint) on_checkpoint(step, params);
    }
  }
  return {std::move(params), std::move(log)};
}

template <class S>
std::vector<int> select_layers(const ModelParams<S>& before, const ModelParams<S>& after,
                               int top_n) {
  if (before.config.n_layers != after.config.n_layers)
    throw StructureError("select_layers: layer count mismatch");
  if (top_n < 1 || top_n > before.config.n_layers)
    throw InputError("select_layers: top_n out of range");
  const int n = before.config.n_layers;
  std::vector<double> score(static_cast<size_t>(n), 0.0);
  for (int l = 0; l < n; ++l) {
    const MlpWeights<S>& a = before.layers[static_cast<size_t>(l)].mlp;
    const MlpWeights<S>& b = after.layers[static_cast<size_t>(l)].mlp;
    if (a.w1.rows() != b.w1.rows() || a.w1.cols() != b.w1.cols() ||
        a.w2.rows() != b.w2.rows() || a.w2.cols() != b.w2.cols())
      throw StructureError("select_layers: mlp shape mismatch at layer " + std::to_string(l));
    double sq = 0.0;
    sq += double((b.w1 - a.w1).squaredNorm());
    sq += double((b.b1 - a.b1).squaredNorm());
    sq += double((b.w2 - a.w2).squaredNorm());
    sq += double((b.b2 - a.b2).squaredNorm());
    score[static_cast<size_t>(l)] = std::sqrt(sq);
  }
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&score](int a, int b) {
    if (score[static_cast<size_t>(a)] != score[static_cast<size_t>(b)])
      return score[static_cast<size_t>(a)] > score[static_cast<size_t>(b)];
    return a < b;
  });
  order.resize(static_cast<size_t>(top_n));
  return order;
}

struct SweepArm {
  int n = 0;
  std::vector<int> layers;
  RunLog log;
};

// One fine-tune per requested layer count; layers come from a preliminary
// standard fine-tune at a tenth of the budget.
template <class S>
std::vector<SweepArm> sweep_n_layers(const ModelParams<S>& base, const std::vector<int>& n_values,
                                     const GrowthPlan& plan_template, const TaskSpec& task_new,
                                     const TaskSpec& task_old, const TrainConfig& cfg) {
  cfg.validate();
  for (int n : n_values)
    if (n < 1 || n > base.config.n_layers)
      throw PlanError("sweep: layer count " + std::to_string(n) + " out of range");

  TrainConfig prelim = cfg;
  prelim.steps = std::max(1, cfg.steps / 10);
  prelim.eval_every = prelim.steps;
  auto [probe_params, probe_log] = finetune(base, nullptr, prelim, task_new, task_old);

  std::vector<SweepArm> arms;
  for (int n : n_values) {
    SweepArm arm;
    arm.n = n;
    arm.layers = select_layers(base, probe_params, n);
    GrowthPlan plan = plan_template;
    plan.layers = arm.layers;
    Rng rng(cfg.seed ^ 0x5157ull);
    auto [grown, mask, receipt] = grow_model(base, plan, rng);
    auto [tuned, log] = finetune(grown, &mask, cfg, task_new, task_old);
    arm.log = std::move(log);
    arms.push_back(std::move(arm));
  }
  return arms;
}

// Step at which the trailing window stopped improving the train loss by the
// given relative amount; falls back to the last logged step.
inline int convergence_step(const RunLog& log, int window, double rel_improvement) {
  for (size_t i = 1; i < log.entries.size(); ++i) {
    const RunLogEntry& cur = log.entries[i];
    double past = cur.train_loss;
    bool have_window = false;
    for (size_t j = 0; j < i; ++j) {
      if (cur.step - log.entries[j].step >= window) {
        past = log.entries[j].train_loss;
        have_window = true;
      }
    }
    if (have_window && past - cur.train_loss < rel_improvement * std::abs(past)) return cur.step;
  }
  return log.entries.empty() ? 0 : log.entries.back().step;
}

}  // namespace fpgx
