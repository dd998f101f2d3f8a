#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fpgx/common.hpp"
#include "fpgx/linalg.hpp"
#include "fpgx/mask.hpp"
#include "fpgx/transformer.hpp"

namespace fpgx {

enum class GrowthStrategy { GFreeze, GTrain };
enum class GrowthInitializer { Duplicate, ZeroInit };

struct GrowthPlan {
  int k = 2;
  std::optional<std::vector<int>> layers;  // nullopt grows every layer
  GrowthStrategy strategy = GrowthStrategy::GFreeze;
  GrowthInitializer initializer = GrowthInitializer::Duplicate;
  double noise_scale = 0.0;
};

struct LayerGrowthRecord {
  int layer = 0;
  Index p_before = 0;
  Index p_after = 0;
};

struct GrowthReceipt {
  int k = 0;
  GrowthStrategy strategy = GrowthStrategy::GFreeze;
  GrowthInitializer initializer = GrowthInitializer::Duplicate;
  Index original_param_count = 0;
  Index added_param_count = 0;
  Index trainable_param_count = 0;
  double trainable_fraction_of_original = 0.0;
  std::vector<LayerGrowthRecord> per_layer;
};

struct VerificationReport {
  double max_abs_dev = 0.0;
  double max_rel_dev = 0.0;
  double tol = 0.0;
  Index n_samples = 0;
  Index seq_len = 0;
  bool pass = false;
};

template <class S>
MlpWeights<S> expand_mlp(const MlpWeights<S>& w, int k, GrowthInitializer initializer,
                         double noise_scale, Rng& rng) {
  if (k < 2) throw PlanError("expansion factor must be >= 2, got " + std::to_string(k));
  if (noise_scale < 0.0) throw PlanError("noise_scale must be >= 0");
  const Index h = w.w1.rows();
  const Index p = w.w1.cols();
  MlpWeights<S> out;
  out.b2 = w.b2;

  if (initializer == GrowthInitializer::Duplicate) {
    std::vector<Mat<S>> cols(static_cast<size_t>(k), w.w1);
    if (noise_scale > 0.0)
      for (int c = 1; c < k; ++c)
        cols[static_cast<size_t>(c)] += rng.gaussian<S>(h, p, S(noise_scale));
    out.w1 = hconcat<S>(cols);
    out.b1 = hconcat<S>(std::vector<Mat<S>>(static_cast<size_t>(k), w.b1));
    Mat<S> scaled = (w.w2.array() / S(k)).matrix();
    out.w2 = vstack<S>(std::vector<Mat<S>>(static_cast<size_t>(k), scaled));
  } else {
    const S sigma = S(0.02) / std::sqrt(S(h));
    std::vector<Mat<S>> cols;
    cols.push_back(w.w1);
    for (int c = 1; c < k; ++c) cols.push_back(rng.gaussian<S>(h, p, sigma));
    out.w1 = hconcat<S>(cols);
    std::vector<Mat<S>> b1parts;
    b1parts.push_back(w.b1);
    for (int c = 1; c < k; ++c) b1parts.push_back(Mat<S>::Zero(1, p));
    out.b1 = hconcat<S>(b1parts);
    std::vector<Mat<S>> rows;
    rows.push_back(w.w2);
    for (int c = 1; c < k; ++c) rows.push_back(Mat<S>::Zero(p, h));
    out.w2 = vstack<S>(rows);
  }
  return out;
}

namespace detail {

inline std::vector<int> resolve_layers(const GrowthPlan& plan, int n_layers) {
  std::vector<int> layers;
  if (plan.layers.has_value()) {
    layers = *plan.layers;
    if (layers.empty()) throw PlanError("growth plan names no layers");
    std::sort(layers.begin(), layers.end());
    layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
    for (int l : layers)
      if (l < 0 || l >= n_layers)
        throw PlanError("growth plan layer index " + std::to_string(l) + " out of range");
  } else {
    layers.resize(static_cast<size_t>(n_layers));
    for (int l = 0; l < n_layers; ++l) layers[static_cast<size_t>(l)] = l;
  }
  return layers;
}

}  // namespace detail

template <class S>
std::tuple<ModelParams<S>, FreezeMask, GrowthReceipt> grow_model(const ModelParams<S>& params,
                                                                 const GrowthPlan& plan,
                                                                 Rng& rng) {
  if (plan.k < 2) throw PlanError("expansion factor must be >= 2, got " + std::to_string(plan.k));
  const std::vector<int> layers = detail::resolve_layers(plan, params.config.n_layers);

  ModelParams<S> grown = params;
  GrowthReceipt receipt;
  receipt.k = plan.k;
  receipt.strategy = plan.strategy;
  receipt.initializer = plan.initializer;
  receipt.original_param_count = param_count(params);

  const Index h = params.config.hidden_dim;
  for (int l : layers) {
    const Index p = params.config.mlp_dims[static_cast<size_t>(l)];
    grown.layers[static_cast<size_t>(l)].mlp =
        expand_mlp(params.layers[static_cast<size_t>(l)].mlp, plan.k, plan.initializer,
                   plan.noise_scale, rng);
    grown.config.mlp_dims[static_cast<size_t>(l)] = Index(plan.k) * p;
    receipt.per_layer.push_back({l, p, Index(plan.k) * p});
    receipt.added_param_count += Index(plan.k - 1) * (h * p + p + p * h);
  }

  FreezeMask mask;
  for_each_tensor(grown, [&mask](const std::string& name, const Mat<S>&) {
    mask.tensors[name] = TensorMask::frozen();
  });
  for (const LayerGrowthRecord& rec : receipt.per_layer) {
    const std::string pre = detail::layer_prefix(rec.layer);
    if (plan.strategy == GrowthStrategy::GFreeze) {
      mask.tensors[pre + "mlp.w1"] = TensorMask::col_range(rec.p_before, rec.p_after);
      mask.tensors[pre + "mlp.b1"] = TensorMask::col_range(rec.p_before, rec.p_after);
      mask.tensors[pre + "mlp.w2"] = TensorMask::row_range(rec.p_before, rec.p_after);
    } else {
      mask.tensors[pre + "mlp.w1"] = TensorMask::trainable();
      mask.tensors[pre + "mlp.b1"] = TensorMask::trainable();
    }
  }

  Index trainable = 0;
  for_each_tensor(grown, [&mask, &trainable](const std::string& name, const Mat<S>& t) {
    const TensorMask& m = mask.at(name);
    switch (m.kind) {
      case Trainability::FullFrozen: break;
      case Trainability::FullTrainable: trainable += t.size(); break;
      case Trainability::ColRange: trainable += (m.end - m.begin) * t.rows(); break;
      case Trainability::RowRange: trainable += (m.end - m.begin) * t.cols(); break;
    }
  });
  receipt.trainable_param_count = trainable;
  receipt.trainable_fraction_of_original =
      double(trainable) / double(receipt.original_param_count);

  if (receipt.original_param_count + receipt.added_param_count != param_count(grown))
    throw StructureError("growth receipt arithmetic failed to reconcile");
  return {std::move(grown), std::move(mask), std::move(receipt)};
}

// Receipt for a plan applied to a config, by dimension arithmetic alone; lets
// parameter accounting run on shapes too large to materialize.
inline GrowthReceipt plan_receipt(const ModelConfig& config, const GrowthPlan& plan) {
  if (plan.k < 2) throw PlanError("expansion factor must be >= 2, got " + std::to_string(plan.k));
  config.validate();
  const std::vector<int> layers = detail::resolve_layers(plan, config.n_layers);

  GrowthReceipt receipt;
  receipt.k = plan.k;
  receipt.strategy = plan.strategy;
  receipt.initializer = plan.initializer;

  const Index h = config.hidden_dim;
  receipt.original_param_count = config.vocab_size * h + config.max_seq_len * h + 2 * h +
                                 h * config.vocab_size;
  for (int l = 0; l < config.n_layers; ++l) {
    const Index p = config.mlp_dims[static_cast<size_t>(l)];
    receipt.original_param_count += 4 * h * h + 9 * h + 2 * h * p + p;
  }

  for (int l : layers) {
    const Index p = config.mlp_dims[static_cast<size_t>(l)];
    receipt.per_layer.push_back({l, p, Index(plan.k) * p});
    receipt.added_param_count += Index(plan.k - 1) * (h * p + p + p * h);
    receipt.trainable_param_count += plan.strategy == GrowthStrategy::GFreeze
                                         ? Index(plan.k - 1) * (h * p + p + p * h)
                                         : Index(plan.k) * p * (h + 1);
  }
  receipt.trainable_fraction_of_original =
      double(receipt.trainable_param_count) / double(receipt.original_param_count);
  return receipt;
}

template <class S>
VerificationReport verify_preservation(const ModelParams<S>& original,
                                       const ModelParams<S>& grown, Index n_samples,
                                       Index seq_len, Rng& rng, double tol) {
  if (!original.config.same_shape_except_mlp(grown.config))
    throw StructureError("verify: configs differ beyond mlp widths");
  for (int l = 0; l < original.config.n_layers; ++l)
    if (grown.config.mlp_dims[static_cast<size_t>(l)] <
        original.config.mlp_dims[static_cast<size_t>(l)])
      throw StructureError("verify: grown model narrower than original at layer " +
                           std::to_string(l));
  if (n_samples < 1 || seq_len < 1 || seq_len > original.config.max_seq_len)
    throw InputError("verify: bad sample count or sequence length");

  VerificationReport report;
  report.tol = tol;
  report.n_samples = n_samples;
  report.seq_len = seq_len;
  for (Index s = 0; s < n_samples; ++s) {
    std::vector<int> tokens(static_cast<size_t>(seq_len));
    for (auto& t : tokens) t = rng.uniform_int(original.config.vocab_size);
    Mat<S> lo = forward(original, tokens);
    Mat<S> lg = forward(grown, tokens);
    for (Index i = 0; i < lo.rows(); ++i)
      for (Index j = 0; j < lo.cols(); ++j) {
        const double a = double(lo(i, j)), b = double(lg(i, j));
        const double abs_dev = std::abs(a - b);
        report.max_abs_dev = std::max(report.max_abs_dev, abs_dev);
        if (abs_dev > 0.0)
          report.max_rel_dev =
              std::max(report.max_rel_dev, abs_dev / std::max(std::abs(a), 1e-300));
      }
  }
  report.pass = report.max_abs_dev <= tol;
  return report;
}

// Replays a sequence of growth plans against a starting shape, yielding the
// configuration the grown model must have.
inline ModelConfig apply_lineage(ModelConfig config, const std::vector<GrowthPlan>& lineage) {
  for (const GrowthPlan& plan : lineage) {
    if (plan.k < 2) throw PlanError("lineage: growth factor must be >= 2");
    for (int l : detail::resolve_layers(plan, config.n_layers))
      config.mlp_dims[static_cast<size_t>(l)] *= plan.k;
  }
  return config;
}

// FNV-1a over the bytes of every frozen coordinate, in tensor traversal order.
template <class S>
std::uint64_t frozen_hash(const ModelParams<S>& params, const FreezeMask& mask) {
  std::uint64_t hash = 0xcbf29ce484222325ull;
  auto eat = [&hash](const void* data, size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      hash ^= b[i];
      hash *= 0x100000001b3ull;
    }
  };
  for_each_tensor(params, [&](const std::string& name, const Mat<S>& t) {
    const TensorMask& m = mask.at(name);
    for (Index r = 0; r < t.rows(); ++r)
      for (Index c = 0; c < t.cols(); ++c)
        if (!is_trainable_coord<S>(m, r, c)) eat(&t(r, c), sizeof(S));
  });
  return hash;
}

}  // namespace fpgx
