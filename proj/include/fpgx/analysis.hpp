#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fpgx/common.hpp"
#include "fpgx/growth.hpp"
#include "fpgx/linalg.hpp"
#include "fpgx/tasks.hpp"
#include "fpgx/transformer.hpp"

namespace fpgx {

struct RankTrace {
  Mat<double> grid;  // (checkpoints-1) x n_layers
  std::vector<std::vector<bool>> zero_update;
  std::vector<int> step_labels;
};

inline RankTrace rank_trace(const std::vector<ModelParams<double>>& checkpoints,
                            const std::vector<int>& step_labels = {}) {
  if (checkpoints.size() < 2) throw InputError("rank_trace: need at least two checkpoints");
  const ModelConfig& cfg = checkpoints.front().config;
  for (const auto& c : checkpoints) {
    if (c.config.n_layers != cfg.n_layers) throw StructureError("rank_trace: layer count drift");
    for (int l = 0; l < cfg.n_layers; ++l)
      if (c.config.mlp_dims[size_t(l)] != cfg.mlp_dims[size_t(l)])
        throw StructureError("rank_trace: mlp width drift between checkpoints");
  }
  if (!step_labels.empty() && step_labels.size() != checkpoints.size())
    throw InputError("rank_trace: one step label per checkpoint required");

  RankTrace out;
  const size_t intervals = checkpoints.size() - 1;
  out.grid = Mat<double>::Zero(static_cast<Index>(intervals), cfg.n_layers);
  out.zero_update.assign(intervals, std::vector<bool>(static_cast<size_t>(cfg.n_layers), false));
  if (step_labels.empty())
    for (size_t t = 0; t < checkpoints.size(); ++t)
      out.step_labels.push_back(static_cast<int>(t));
  else
    out.step_labels = step_labels;

  for (size_t t = 1; t < checkpoints.size(); ++t)
    for (int l = 0; l < cfg.n_layers; ++l) {
      Mat<double> delta = checkpoints[t].layers[size_t(l)].mlp.w1 -
                          checkpoints[t - 1].layers[size_t(l)].mlp.w1;
      if ((delta.array() == 0.0).all())
        out.zero_update[t - 1][size_t(l)] = true;
      else
        out.grid(static_cast<Index>(t - 1), l) = effective_rank(delta);
    }
  return out;
}

struct IclPrompt {
  std::vector<std::pair<std::vector<int>, std::vector<int>>> demos;
  std::vector<int> query;
  int query_answer = -1;
  bool corrupted = false;

  void validate() const {
    if (demos.size() < 2) throw InputError("icl prompt: need at least two demonstrations");
    if (query.empty()) throw InputError("icl prompt: empty query");
    for (const auto& [in, out] : demos)
      if (in.empty() || out.empty()) throw InputError("icl prompt: empty demonstration span");
  }
};

inline std::vector<int> prompt_tokens(const IclPrompt& p) {
  p.validate();
  std::vector<int> t;
  t.push_back(kBosToken);
  for (const auto& [in, out] : p.demos) {
    t.insert(t.end(), in.begin(), in.end());
    t.insert(t.end(), out.begin(), out.end());
  }
  t.push_back(kSepToken);
  t.insert(t.end(), p.query.begin(), p.query.end());
  return t;
}

// Sattolo cycle over demonstration labels: every label leaves its slot.
inline IclPrompt corrupt_prompt(const IclPrompt& clean, Rng& rng) {
  clean.validate();
  IclPrompt out = clean;
  const Index n = static_cast<Index>(out.demos.size());
  for (Index i = n - 1; i > 0; --i) {
    Index j = rng.uniform_int(i);
    std::swap(out.demos[size_t(i)].second, out.demos[size_t(j)].second);
  }
  out.corrupted = true;
  return out;
}

// Demonstration-structured episodes (pair lists plus a query) map directly
// onto prompts; the other task kinds have no demonstration segment.
inline std::vector<IclPrompt> make_icl_prompts(const TaskSpec& spec, Index count,
                                               std::uint64_t seed) {
  if (spec.kind != TaskKind::AssocMapping && spec.kind != TaskKind::KeyValueRecall)
    throw InputError("icl prompts: task kind has no demonstration structure");
  if (spec.n_pairs < 2) throw InputError("icl prompts: need n_pairs >= 2");
  spec.validate();
  Rng rng(seed);
  std::vector<IclPrompt> prompts;
  for (Index i = 0; i < count; ++i) {
    Episode e = sample_episode(spec, rng);
    IclPrompt p;
    for (int d = 0; d < spec.n_pairs; ++d)
      p.demos.push_back({{e.tokens[size_t(1 + 2 * d)]}, {e.tokens[size_t(2 + 2 * d)]}});
    p.query = {e.tokens[size_t(e.answer_begin - 1)]};
    p.query_answer = e.tokens[size_t(e.answer_begin)];
    prompts.push_back(std::move(p));
  }
  return prompts;
}

struct HeadMeans {
  int n_layers = 0;
  int n_heads = 0;
  std::vector<Vec<double>> mean;  // indexed layer * n_heads + head

  const Vec<double>& at(int layer, int head) const {
    if (layer < 0 || layer >= n_layers || head < 0 || head >= n_heads)
      throw InputError("head means: index out of range");
    return mean[size_t(layer) * size_t(n_heads) + size_t(head)];
  }
};

inline HeadMeans mean_clean_activations(const ModelParams<double>& model,
                                        const std::vector<IclPrompt>& prompts) {
  if (prompts.empty()) throw InputError("mean activations: empty prompt set");
  for (const IclPrompt& p : prompts)
    if (p.corrupted) throw InputError("mean activations: corrupted prompt in clean set");

  HeadMeans out;
  out.n_layers = model.config.n_layers;
  out.n_heads = model.config.n_heads;
  out.mean.assign(size_t(out.n_layers) * size_t(out.n_heads),
                  Vec<double>::Zero(model.config.hidden_dim));
  for (const IclPrompt& p : prompts) {
    const std::vector<int> tokens = prompt_tokens(p);
    ForwardTrace<double> trace;
    forward(model, tokens, &trace);
    const Index last = static_cast<Index>(tokens.size()) - 1;
    for (int l = 0; l < out.n_layers; ++l)
      for (int j = 0; j < out.n_heads; ++j)
        out.mean[size_t(l) * size_t(out.n_heads) + size_t(j)] +=
            trace.layers[size_t(l)].head_out[size_t(j)].row(last).transpose();
  }
  for (auto& v : out.mean) v /= double(prompts.size());
  return out;
}

inline double causal_indirect_effect(const ModelParams<double>& model, const HeadMeans& means,
                                     const std::vector<IclPrompt>& prompts, int layer, int head) {
  if (layer < 0 || layer >= model.config.n_layers || head < 0 || head >= model.config.n_heads)
    throw InputError("cie: head index out of range");
  if (prompts.empty()) throw InputError("cie: empty prompt set");

  double total = 0.0;
  for (const IclPrompt& p : prompts) {
    if (p.query_answer < 0 || Index(p.query_answer) >= model.config.vocab_size)
      throw InputError("cie: prompt lacks a valid answer token");
    const std::vector<int> tokens = prompt_tokens(p);
    const Index last = static_cast<Index>(tokens.size()) - 1;

    Mat<double> base_logits = forward(model, tokens);
    Vec<double> base_p = softmax_row(base_logits, last);

    Interventions<double> iv;
    iv.head_patches.push_back({layer, head, last, means.at(layer, head)});
    Mat<double> patched_logits = forward(model, tokens, nullptr, &iv);
    Vec<double> patched_p = softmax_row(patched_logits, last);

    total += patched_p(p.query_answer) - base_p(p.query_answer);
  }
  return total / double(prompts.size());
}

inline Mat<double> cie_all_heads(const ModelParams<double>& model, const HeadMeans& means,
                                 const std::vector<IclPrompt>& prompts) {
  Mat<double> grid = Mat<double>::Zero(model.config.n_layers, model.config.n_heads);
  for (int l = 0; l < model.config.n_layers; ++l)
    for (int j = 0; j < model.config.n_heads; ++j)
      grid(l, j) = causal_indirect_effect(model, means, prompts, l, j);
  return grid;
}

struct FvHead {
  int layer = 0;
  int head = 0;
  double cie = 0.0;
};

struct FunctionVector {
  std::string task_id;
  int k_top = 0;
  std::vector<FvHead> heads;
  Vec<double> vector;
};

inline FunctionVector build_function_vector(const ModelParams<double>& model,
                                            const std::vector<IclPrompt>& clean,
                                            const std::vector<IclPrompt>& corrupted, int k_top,
                                            const std::string& task_id = "") {
  const int total = model.config.n_layers * model.config.n_heads;
  if (k_top < 1 || k_top > total) throw InputError("function vector: k_top out of range");

  const HeadMeans means = mean_clean_activations(model, clean);
  const Mat<double> cie = cie_all_heads(model, means, corrupted);

  std::vector<FvHead> ranked;
  for (int l = 0; l < model.config.n_layers; ++l)
    for (int j = 0; j < model.config.n_heads; ++j) ranked.push_back({l, j, cie(l, j)});
  std::sort(ranked.begin(), ranked.end(), [](const FvHead& a, const FvHead& b) {
    if (a.cie != b.cie) return a.cie > b.cie;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.head < b.head;
  });
  ranked.resize(static_cast<size_t>(k_top));

  FunctionVector fv;
  fv.task_id = task_id;
  fv.k_top = k_top;
  fv.heads = ranked;
  fv.vector = Vec<double>::Zero(model.config.hidden_dim);
  for (const FvHead& h : ranked) fv.vector += means.at(h.layer, h.head);
  return fv;
}

struct FvSimilarity {
  int overlap = 0;
  double cosine = 0.0;
};

inline FvSimilarity fv_similarity(const FunctionVector& a, const FunctionVector& b) {
  if (a.vector.size() != b.vector.size())
    throw DimensionError("fv similarity: hidden dimensions differ");
  const double na = a.vector.norm(), nb = b.vector.norm();
  if (na == 0.0 || nb == 0.0) throw ZeroVectorError("fv similarity: zero function vector");
  FvSimilarity out;
  out.cosine = a.vector.dot(b.vector) / (na * nb);
  for (const FvHead& ha : a.heads)
    for (const FvHead& hb : b.heads)
      if (ha.layer == hb.layer && ha.head == hb.head) ++out.overlap;
  return out;
}

}  // namespace fpgx
