#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "fpgx/common.hpp"
#include "fpgx/linalg.hpp"
#include "fpgx/mask.hpp"

namespace fpgx {

struct ModelConfig {
  int n_layers = 0;
  Index hidden_dim = 0;
  std::vector<Index> mlp_dims;
  int n_heads = 0;
  Index head_dim = 0;
  Index vocab_size = 0;
  Index max_seq_len = 0;
  std::uint64_t seed = 0;

  static ModelConfig uniform(int n_layers, Index hidden_dim, Index mlp_dim, int n_heads,
                             Index vocab_size, Index max_seq_len, std::uint64_t seed) {
    ModelConfig c;
    c.n_layers = n_layers;
    c.hidden_dim = hidden_dim;
    c.mlp_dims.assign(static_cast<size_t>(n_layers), mlp_dim);
    c.n_heads = n_heads;
    c.head_dim = n_heads > 0 ? hidden_dim / n_heads : 0;
    c.vocab_size = vocab_size;
    c.max_seq_len = max_seq_len;
    c.seed = seed;
    return c;
  }

  void validate() const {
    if (n_layers < 1) throw StructureError("config: n_layers must be >= 1");
    if (n_heads < 1 || head_dim < 1) throw StructureError("config: need n_heads, head_dim >= 1");
    if (Index(n_heads) * head_dim != hidden_dim)
      throw StructureError("config: n_heads * head_dim != hidden_dim");
    if (mlp_dims.size() != static_cast<size_t>(n_layers))
      throw StructureError("config: mlp_dims must list one width per layer");
    for (Index p : mlp_dims)
      if (p < 1) throw StructureError("config: mlp_dim must be >= 1");
    if (vocab_size < 2) throw StructureError("config: vocab_size must be >= 2");
    if (max_seq_len < 1) throw StructureError("config: max_seq_len must be >= 1");
  }

  bool same_shape_except_mlp(const ModelConfig& o) const {
    return n_layers == o.n_layers && hidden_dim == o.hidden_dim && n_heads == o.n_heads &&
           head_dim == o.head_dim && vocab_size == o.vocab_size && max_seq_len == o.max_seq_len;
  }
};

// Biases and norm parameters are stored as 1 x n matrices so every tensor is
// reachable through the same Mat-typed traversal.
template <class S>
struct MlpWeights {
  Mat<S> w1;  // h x p
  Mat<S> b1;  // 1 x p
  Mat<S> w2;  // p x h
  Mat<S> b2;  // 1 x h
};

template <class S>
struct AttnWeights {
  Mat<S> wq, wk, wv, wo;  // h x h
  Mat<S> bq, bk, bv, bo;  // 1 x h
};

template <class S>
struct LayerNormWeights {
  Mat<S> gain;  // 1 x h
  Mat<S> bias;  // 1 x h
};

template <class S>
struct LayerWeights {
  AttnWeights<S> attn;
  LayerNormWeights<S> ln1;
  MlpWeights<S> mlp;
  LayerNormWeights<S> ln2;
};

template <class S>
struct ModelParams {
  ModelConfig config;
  Mat<S> embedding;      // vocab x h
  Mat<S> pos_embedding;  // max_seq_len x h
  std::vector<LayerWeights<S>> layers;
  LayerNormWeights<S> final_ln;
  Mat<S> w_out;  // h x vocab
};

namespace detail {
inline std::string layer_prefix(int l) { return "layers." + std::to_string(l) + "."; }
}  // namespace detail

template <class S, class F>
void for_each_tensor(ModelParams<S>& p, F&& f) {
  f(std::string("embedding"), p.embedding);
  f(std::string("pos_embedding"), p.pos_embedding);
  for (int l = 0; l < p.config.n_layers; ++l) {
    const std::string pre = detail::layer_prefix(l);
    LayerWeights<S>& lw = p.layers[static_cast<size_t>(l)];
    f(pre + "attn.wq", lw.attn.wq);
    f(pre + "attn.bq", lw.attn.bq);
    f(pre + "attn.wk", lw.attn.wk);
    f(pre + "attn.bk", lw.attn.bk);
    f(pre + "attn.wv", lw.attn.wv);
    f(pre + "attn.bv", lw.attn.bv);
    f(pre + "attn.wo", lw.attn.wo);
    f(pre + "attn.bo", lw.attn.bo);
    f(pre + "ln1.gain", lw.ln1.gain);
    f(pre + "ln1.bias", lw.ln1.bias);
    f(pre + "mlp.w1", lw.mlp.w1);
    f(pre + "mlp.b1", lw.mlp.b1);
    f(pre + "mlp.w2", lw.mlp.w2);
    f(pre + "mlp.b2", lw.mlp.b2);
    f(pre + "ln2.gain", lw.ln2.gain);
    f(pre + "ln2.bias", lw.ln2.bias);
  }
  f(std::string("final_ln.gain"), p.final_ln.gain);
  f(std::string("final_ln.bias"), p.final_ln.bias);
  f(std::string("w_out"), p.w_out);
}

template <class S, class F>
void for_each_tensor(const ModelParams<S>& p, F&& f) {
  for_each_tensor(const_cast<ModelParams<S>&>(p),
                  [&f](const std::string& name, Mat<S>& t) { f(name, const_cast<const Mat<S>&>(t)); });
}

template <class S>
Index param_count(const ModelParams<S>& p) {
  Index n = 0;
  for_each_tensor(p, [&n](const std::string&, const Mat<S>& t) { n += t.size(); });
  return n;
}

template <class S>
ModelParams<S> alloc_params(const ModelConfig& config) {
  config.validate();
  ModelParams<S> p;
  p.config = config;
  const Index h = config.hidden_dim;
  p.embedding = Mat<S>::Zero(config.vocab_size, h);
  p.pos_embedding = Mat<S>::Zero(config.max_seq_len, h);
  p.layers.resize(static_cast<size_t>(config.n_layers));
  for (int l = 0; l < config.n_layers; ++l) {
    LayerWeights<S>& lw = p.layers[static_cast<size_t>(l)];
    const Index pdim = config.mlp_dims[static_cast<size_t>(l)];
    lw.attn.wq = Mat<S>::Zero(h, h);
    lw.attn.wk = Mat<S>::Zero(h, h);
    lw.attn.wv = Mat<S>::Zero(h, h);
    lw.attn.wo = Mat<S>::Zero(h, h);
    lw.attn.bq = Mat<S>::Zero(1, h);
    lw.attn.bk = Mat<S>::Zero(1, h);
    lw.attn.bv = Mat<S>::Zero(1, h);
    lw.attn.bo = Mat<S>::Zero(1, h);
    lw.ln1.gain = Mat<S>::Ones(1, h);
    lw.ln1.bias = Mat<S>::Zero(1, h);
    lw.mlp.w1 = Mat<S>::Zero(h, pdim);
    lw.mlp.b1 = Mat<S>::Zero(1, pdim);
    lw.mlp.w2 = Mat<S>::Zero(pdim, h);
    lw.mlp.b2 = Mat<S>::Zero(1, h);
    lw.ln2.gain = Mat<S>::Ones(1, h);
    lw.ln2.bias = Mat<S>::Zero(1, h);
  }
  p.final_ln.gain = Mat<S>::Ones(1, h);
  p.final_ln.bias = Mat<S>::Zero(1, h);
  p.w_out = Mat<S>::Zero(h, config.vocab_size);
  return p;
}

template <class S>
ModelParams<S> init_params(const ModelConfig& config) {
  ModelParams<S> p = alloc_params<S>(config);
  Rng rng(config.seed);
  const Index h = config.hidden_dim;
  const S sigma = S(0.08);
  p.embedding = rng.gaussian<S>(config.vocab_size, h, sigma);
  p.pos_embedding = rng.gaussian<S>(config.max_seq_len, h, sigma);
  for (int l = 0; l < config.n_layers; ++l) {
    LayerWeights<S>& lw = p.layers[static_cast<size_t>(l)];
    const Index pdim = config.mlp_dims[static_cast<size_t>(l)];
    lw.attn.wq = rng.gaussian<S>(h, h, sigma);
    lw.attn.wk = rng.gaussian<S>(h, h, sigma);
    lw.attn.wv = rng.gaussian<S>(h, h, sigma);
    lw.attn.wo = rng.gaussian<S>(h, h, sigma);
    lw.mlp.w1 = rng.gaussian<S>(h, pdim, sigma);
    lw.mlp.w2 = rng.gaussian<S>(pdim, h, sigma);
  }
  p.w_out = rng.gaussian<S>(h, config.vocab_size, sigma);
  return p;
}

template <class S>
ModelParams<S> zero_like(const ModelParams<S>& p) {
  ModelParams<S> z;
  z.config = p.config;
  z.embedding = Mat<S>::Zero(p.embedding.rows(), p.embedding.cols());
  z.pos_embedding = Mat<S>::Zero(p.pos_embedding.rows(), p.pos_embedding.cols());
  z.layers.resize(p.layers.size());
  for (size_t l = 0; l < p.layers.size(); ++l) {
    const LayerWeights<S>& a = p.layers[l];
    LayerWeights<S>& b = z.layers[l];
    auto zl = [](const Mat<S>& m) { return Mat<S>::Zero(m.rows(), m.cols()).eval(); };
    b.attn.wq = zl(a.attn.wq);
    b.attn.bq = zl(a.attn.bq);
    b.attn.wk = zl(a.attn.wk);
    b.attn.bk = zl(a.attn.bk);
    b.attn.wv = zl(a.attn.wv);
    b.attn.bv = zl(a.attn.bv);
    b.attn.wo = zl(a.attn.wo);
    b.attn.bo = zl(a.attn.bo);
    b.ln1.gain = zl(a.ln1.gain);
    b.ln1.bias = zl(a.ln1.bias);
    b.mlp.w1 = zl(a.mlp.w1);
    b.mlp.b1 = zl(a.mlp.b1);
    b.mlp.w2 = zl(a.mlp.w2);
    b.mlp.b2 = zl(a.mlp.b2);
    b.ln2.gain = zl(a.ln2.gain);
    b.ln2.bias = zl(a.ln2.bias);
  }
  z.final_ln.gain = Mat<S>::Zero(1, p.config.hidden_dim);
  z.final_ln.bias = Mat<S>::Zero(1, p.config.hidden_dim);
  z.w_out = Mat<S>::Zero(p.w_out.rows(), p.w_out.cols());
  return z;
}

template <class To, class From>
ModelParams<To> cast_params(const ModelParams<From>& p) {
  ModelParams<To> out;
  out.config = p.config;
  out.layers.resize(p.layers.size());
  for_each_tensor(p, [&out](const std::string& name, const Mat<From>& t) {
    Mat<To> cast = t.template cast<To>();
    bool placed = false;
    for_each_tensor(out, [&](const std::string& n2, Mat<To>& dst) {
      if (n2 == name) {
        dst = cast;
        placed = true;
      }
    });
    if (!placed) throw StructureError("cast_params: tensor not placed: " + name);
  });
  return out;
}

template <class S>
constexpr S kLnEps = S(1e-5);

template <class S>
Mat<S> mlp_forward(const MlpWeights<S>& w, const Mat<S>& x) {
  if (x.cols() != w.w1.rows())
    throw DimensionError("mlp_forward: input cols " + std::to_string(x.cols()) +
                         " vs w1 rows " + std::to_string(w.w1.rows()));
  if (w.w1.cols() != w.w2.rows() || w.w1.cols() != w.b1.cols() ||
      w.w2.cols() != w.b2.cols() || w.w1.rows() != w.w2.cols())
    throw DimensionError("mlp_forward: inconsistent mlp weight shapes");
  Mat<S> pre = matmul(x, w.w1);
  pre.rowwise() += w.b1.row(0);
  Mat<S> hidden = pre.cwiseMax(S(0));
  Mat<S> out = matmul(hidden, w.w2);
  out.rowwise() += w.b2.row(0);
  return out;
}

// Patches act on a head's residual-space contribution (its context slice
// pushed through the matching rows of wo) at one position.
template <class S>
struct HeadPatch {
  int layer = 0;
  int head = 0;
  Index position = 0;
  Vec<S> value;  // length h
};

// Added to the residual stream entering `layer`; layer == n_layers targets the
// stream just before the final norm. position < 0 means every position.
template <class S>
struct ResidualAdd {
  int layer = 0;
  Index position = -1;
  Vec<S> value;  // length h
};

template <class S>
struct Interventions {
  std::vector<HeadPatch<S>> head_patches;
  std::vector<ResidualAdd<S>> residual_adds;
};

template <class S>
struct LayerTrace {
  Mat<S> attn_in;                  // T x h
  Mat<S> q, k, v;                  // T x h
  std::vector<Mat<S>> probs;       // per head, T x T
  std::vector<Mat<S>> head_ctx;    // per head, T x hd
  std::vector<Mat<S>> head_out;    // per head residual-space contribution, T x h
  Mat<S> attn_out;                 // T x h
  Mat<S> ln1_xhat;                 // T x h
  Vec<S> ln1_rstd;                 // T
  Mat<S> x1;                       // T x h
  Mat<S> mlp_pre;                  // T x p
  Mat<S> mlp_hidden;               // T x p
  Mat<S> ln2_xhat;
  Vec<S> ln2_rstd;
  Mat<S> x2;  // layer output
};

template <class S>
struct ForwardTrace {
  std::vector<LayerTrace<S>> layers;
  Mat<S> final_in;    // residual stream entering the final norm
  Mat<S> final_xhat;
  Vec<S> final_rstd;
  Mat<S> final_out;
  Mat<S> logits;
};

namespace detail {

template <class S>
Mat<S> layer_norm_forward(const Mat<S>& x, const LayerNormWeights<S>& w,
                          std::type_identity_t<Mat<S>*> xhat_out,
                          std::type_identity_t<Vec<S>*> rstd_out) {
  const Index rows = x.rows(), h = x.cols();
  Mat<S> y(rows, h);
  Mat<S> xhat(rows, h);
  Vec<S> rstd(rows);
  for (Index i = 0; i < rows; ++i) {
    const S mu = x.row(i).mean();
    const S var = (x.row(i).array() - mu).square().mean();
    const S r = S(1) / std::sqrt(var + kLnEps<S>);
    xhat.row(i) = (x.row(i).array() - mu) * r;
    rstd(i) = r;
  }
  y = xhat.array().rowwise() * w.gain.row(0).array();
  y.array().rowwise() += w.bias.row(0).array();
  if (xhat_out) *xhat_out = xhat;
  if (rstd_out) *rstd_out = rstd;
  return y;
}

template <class S>
Mat<S> layer_norm_backward(const Mat<S>& dy, const Mat<S>& xhat, const Vec<S>& rstd,
                           const LayerNormWeights<S>& w, Mat<S>& dgain, Mat<S>& dbias) {
  const Index rows = dy.rows(), h = dy.cols();
  dgain.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
  dbias.row(0) += dy.colwise().sum();
  Mat<S> dx(rows, h);
  for (Index i = 0; i < rows; ++i) {
    Eigen::Array<S, 1, Eigen::Dynamic> dxhat = dy.row(i).array() * w.gain.row(0).array();
    const S m1 = dxhat.mean();
    const S m2 = (dxhat * xhat.row(i).array()).mean();
    dx.row(i) = (rstd(i) * (dxhat - m1 - xhat.row(i).array() * m2)).matrix();
  }
  return dx;
}

template <class S>
void causal_softmax_inplace(Mat<S>& scores) {
  const Index t = scores.rows();
  for (Index i = 0; i < t; ++i) {
    S m = scores(i, 0);
    for (Index j = 1; j <= i; ++j) m = std::max(m, scores(i, j));
    S z = S(0);
    for (Index j = 0; j <= i; ++j) {
      scores(i, j) = std::exp(scores(i, j) - m);
      z += scores(i, j);
    }
    for (Index j = 0; j <= i; ++j) scores(i, j) /= z;
    for (Index j = i + 1; j < t; ++j) scores(i, j) = S(0);
  }
}

}  // namespace detail

template <class S>
Mat<S> forward(const ModelParams<S>& params, const std::vector<int>& tokens,
               std::type_identity_t<ForwardTrace<S>*> trace = nullptr,
               std::type_identity_t<const Interventions<S>*> iv = nullptr) {
  const ModelConfig& cfg = params.config;
  const Index t = static_cast<Index>(tokens.size());
  if (t < 1) throw InputError("forward: empty token sequence");
  if (t > cfg.max_seq_len)
    throw InputError("forward: sequence length " + std::to_string(t) + " exceeds max " +
                     std::to_string(cfg.max_seq_len));
  for (size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i] < 0 || Index(tokens[i]) >= cfg.vocab_size)
      throw InputError("forward: token id out of range at position " + std::to_string(i));

  const Index h = cfg.hidden_dim;
  const int nh = cfg.n_heads;
  const Index hd = cfg.head_dim;
  const S scale = S(1) / std::sqrt(S(hd));

  Mat<S> x(t, h);
  for (Index i = 0; i < t; ++i)
    x.row(i) = params.embedding.row(tokens[static_cast<size_t>(i)]) + params.pos_embedding.row(i);

  if (trace) {
    trace->layers.clear();
    trace->layers.resize(static_cast<size_t>(cfg.n_layers));
  }

  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights<S>& lw = params.layers[static_cast<size_t>(l)];
    LayerTrace<S>* lt = trace ? &trace->layers[static_cast<size_t>(l)] : nullptr;

    if (iv)
      for (const ResidualAdd<S>& ra : iv->residual_adds)
        if (ra.layer == l) {
          if (ra.value.size() != h) throw InputError("residual add: vector length mismatch");
          if (ra.position >= t) throw InputError("residual add: position out of range");
          if (ra.position < 0)
            x.rowwise() += ra.value.transpose();
          else
            x.row(ra.position) += ra.value.transpose();
        }

    Mat<S> q = matmul(x, lw.attn.wq);
    q.rowwise() += lw.attn.bq.row(0);
    Mat<S> k = matmul(x, lw.attn.wk);
    k.rowwise() += lw.attn.bk.row(0);
    Mat<S> v = matmul(x, lw.attn.wv);
    v.rowwise() += lw.attn.bv.row(0);

    Mat<S> attn_out = Mat<S>::Zero(t, h);
    if (lt) {
      lt->attn_in = x;
      lt->q = q;
      lt->k = k;
      lt->v = v;
      lt->probs.resize(static_cast<size_t>(nh));
      lt->head_ctx.resize(static_cast<size_t>(nh));
      lt->head_out.resize(static_cast<size_t>(nh));
    }
    for (int j = 0; j < nh; ++j) {
      Mat<S> qj = q.middleCols(Index(j) * hd, hd);
      Mat<S> kj = k.middleCols(Index(j) * hd, hd);
      Mat<S> vj = v.middleCols(Index(j) * hd, hd);
      Mat<S> scores = matmul(qj, Mat<S>(kj.transpose()));
      scores *= scale;
      detail::causal_softmax_inplace(scores);
      Mat<S> ctx = matmul(scores, vj);
      Mat<S> head_res = matmul(ctx, Mat<S>(lw.attn.wo.middleRows(Index(j) * hd, hd)));
      if (iv)
        for (const HeadPatch<S>& hp : iv->head_patches)
          if (hp.layer == l && hp.head == j) {
            if (hp.value.size() != h) throw InputError("head patch: vector length mismatch");
            if (hp.position < 0 || hp.position >= t)
              throw InputError("head patch: position out of range");
            head_res.row(hp.position) = hp.value.transpose();
          }
      attn_out += head_res;
      if (lt) {
        lt->probs[static_cast<size_t>(j)] = scores;
        lt->head_ctx[static_cast<size_t>(j)] = ctx;
        lt->head_out[static_cast<size_t>(j)] = head_res;
      }
    }
    attn_out.rowwise() += lw.attn.bo.row(0);

    Mat<S> r1 = x + attn_out;
    Mat<S> x1 = detail::layer_norm_forward(r1, lw.ln1, lt ? &lt->ln1_xhat : nullptr,
                                           lt ? &lt->ln1_rstd : nullptr);

    Mat<S> mlp_pre = matmul(x1, lw.mlp.w1);
    mlp_pre.rowwise() += lw.mlp.b1.row(0);
    Mat<S> mlp_hidden = mlp_pre.cwiseMax(S(0));
    Mat<S> mlp_out = matmul(mlp_hidden, lw.mlp.w2);
    mlp_out.rowwise() += lw.mlp.b2.row(0);

    Mat<S> r2 = x1 + mlp_out;
    Mat<S> x2 = detail::layer_norm_forward(r2, lw.ln2, lt ? &lt->ln2_xhat : nullptr,
                                           lt ? &lt->ln2_rstd : nullptr);
    if (lt) {
      lt->attn_out = attn_out;
      lt->x1 = x1;
      lt->mlp_pre = mlp_pre;
      lt->mlp_hidden = mlp_hidden;
      lt->x2 = x2;
    }
    x = x2;
  }

  if (iv)
    for (const ResidualAdd<S>& ra : iv->residual_adds)
      if (ra.layer == cfg.n_layers) {
        if (ra.value.size() != h) throw InputError("residual add: vector length mismatch");
        if (ra.position >= t) throw InputError("residual add: position out of range");
        if (ra.position < 0)
          x.rowwise() += ra.value.transpose();
        else
          x.row(ra.position) += ra.value.transpose();
      }

  Mat<S> final_out = detail::layer_norm_forward(
      x, params.final_ln, trace ? &trace->final_xhat : nullptr,
      trace ? &trace->final_rstd : nullptr);
  Mat<S> logits = matmul(final_out, params.w_out);
  if (trace) {
    trace->final_in = x;
    trace->final_out = final_out;
    trace->logits = logits;
  }
  return logits;
}

struct Example {
  std::vector<int> tokens;
  std::vector<int> targets;  // targets[i] is the id expected at i+1; -1 skips the position
};

// Softmax probabilities of one logits row, computed through logsumexp.
template <class S>
Vec<S> softmax_row(const Mat<S>& logits, Index row) {
  const S m = logits.row(row).maxCoeff();
  Vec<S> p = (logits.row(row).array() - m).exp().matrix().transpose();
  p /= p.sum();
  return p;
}

template <class S>
std::pair<S, ModelParams<S>> loss_and_grads(const ModelParams<S>& params,
                                            const std::vector<Example>& batch,
                                            const FreezeMask* mask = nullptr) {
  if (batch.empty()) throw InputError("loss_and_grads: empty batch");
  const ModelConfig& cfg = params.config;
  const Index h = cfg.hidden_dim;
  const int nh = cfg.n_heads;
  const Index hd = cfg.head_dim;
  const S scale = S(1) / std::sqrt(S(hd));

  Index n_targets = 0;
  for (const Example& ex : batch) {
    if (ex.targets.size() != ex.tokens.size())
      throw InputError("loss_and_grads: targets length must match tokens length");
    for (int y : ex.targets) {
      if (y < -1 || Index(y) >= cfg.vocab_size)
        throw InputError("loss_and_grads: target id out of range");
      if (y >= 0) ++n_targets;
    }
  }
  if (n_targets == 0) throw InputError("loss_and_grads: no scored positions in batch");

  ModelParams<S> grads = zero_like(params);
  S total_loss = S(0);
  const S inv_m = S(1) / S(n_targets);

  for (size_t b = 0; b < batch.size(); ++b) {
    const Example& ex = batch[b];
    const Index t = static_cast<Index>(ex.tokens.size());
    ForwardTrace<S> trace;
    Mat<S> logits = forward(params, ex.tokens, &trace);

    S ex_loss = S(0);
    Mat<S> dlogits = Mat<S>::Zero(t, cfg.vocab_size);
    for (Index i = 0; i < t; ++i) {
      const int y = ex.targets[static_cast<size_t>(i)];
      if (y < 0) continue;
      const S m = logits.row(i).maxCoeff();
      const S lse = m + std::log((logits.row(i).array() - m).exp().sum());
      ex_loss += lse - logits(i, y);
      dlogits.row(i) = ((logits.row(i).array() - lse).exp() * inv_m).matrix();
      dlogits(i, y) -= inv_m;
    }
    if (!std::isfinite(double(ex_loss)))
      throw NumericError("loss_and_grads: non-finite loss at batch index " + std::to_string(b));
    total_loss += ex_loss;

    grads.w_out += matmul(Mat<S>(trace.final_out.transpose()), dlogits);
    Mat<S> dfinal = matmul(dlogits, Mat<S>(params.w_out.transpose()));
    Mat<S> dx = detail::layer_norm_backward(dfinal, trace.final_xhat, trace.final_rstd,
                                            params.final_ln, grads.final_ln.gain,
                                            grads.final_ln.bias);

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
      const LayerWeights<S>& lw = params.layers[static_cast<size_t>(l)];
      LayerWeights<S>& gw = grads.layers[static_cast<size_t>(l)];
      const LayerTrace<S>& lt = trace.layers[static_cast<size_t>(l)];

      Mat<S> dr2 = detail::layer_norm_backward(dx, lt.ln2_xhat, lt.ln2_rstd, lw.ln2,
                                               gw.ln2.gain, gw.ln2.bias);
      Mat<S> dx1 = dr2;
      gw.mlp.w2 += matmul(Mat<S>(lt.mlp_hidden.transpose()), dr2);
      gw.mlp.b2.row(0) += dr2.colwise().sum();
      Mat<S> dhidden = matmul(dr2, Mat<S>(lw.mlp.w2.transpose()));
      Mat<S> dpre =
          (dhidden.array() * (lt.mlp_pre.array() > S(0)).template cast<S>()).matrix();
      gw.mlp.w1 += matmul(Mat<S>(lt.x1.transpose()), dpre);
      gw.mlp.b1.row(0) += dpre.colwise().sum();
      dx1 += matmul(dpre, Mat<S>(lw.mlp.w1.transpose()));

      Mat<S> dr1 = detail::layer_norm_backward(dx1, lt.ln1_xhat, lt.ln1_rstd, lw.ln1,
                                               gw.ln1.gain, gw.ln1.bias);
      Mat<S> dattn_in = dr1;
      const Mat<S>& dattn_out = dr1;
      gw.attn.bo.row(0) += dattn_out.colwise().sum();

      Mat<S> dq = Mat<S>::Zero(t, h);
      Mat<S> dk = Mat<S>::Zero(t, h);
      Mat<S> dv = Mat<S>::Zero(t, h);
      for (int j = 0; j < nh; ++j) {
        const Mat<S>& probs = lt.probs[static_cast<size_t>(j)];
        const Mat<S>& ctx = lt.head_ctx[static_cast<size_t>(j)];
        Mat<S> kj = lt.k.middleCols(Index(j) * hd, hd);
        Mat<S> qj = lt.q.middleCols(Index(j) * hd, hd);
        Mat<S> vj = lt.v.middleCols(Index(j) * hd, hd);

        gw.attn.wo.middleRows(Index(j) * hd, hd) += matmul(Mat<S>(ctx.transpose()), dattn_out);
        Mat<S> dctx = matmul(dattn_out, Mat<S>(lw.attn.wo.middleRows(Index(j) * hd, hd).transpose()));
        Mat<S> dprobs = matmul(dctx, Mat<S>(vj.transpose()));
        dv.middleCols(Index(j) * hd, hd) += matmul(Mat<S>(probs.transpose()), dctx);

        Mat<S> dscores(t, t);
        for (Index i = 0; i < t; ++i) {
          S dot = S(0);
          for (Index c = 0; c <= i; ++c) dot += dprobs(i, c) * probs(i, c);
          for (Index c = 0; c <= i; ++c) dscores(i, c) = probs(i, c) * (dprobs(i, c) - dot);
          for (Index c = i + 1; c < t; ++c) dscores(i, c) = S(0);
        }
        dq.middleCols(Index(j) * hd, hd) += scale * matmul(dscores, kj);
        dk.middleCols(Index(j) * hd, hd) += scale * matmul(Mat<S>(dscores.transpose()), qj);
      }
      gw.attn.wq += matmul(Mat<S>(lt.attn_in.transpose()), dq);
      gw.attn.bq.row(0) += dq.colwise().sum();
      gw.attn.wk += matmul(Mat<S>(lt.attn_in.transpose()), dk);
      gw.attn.bk.row(0) += dk.colwise().sum();
      gw.attn.wv += matmul(Mat<S>(lt.attn_in.transpose()), dv);
      gw.attn.bv.row(0) += dv.colwise().sum();
      dattn_in += matmul(dq, Mat<S>(lw.attn.wq.transpose()));
      dattn_in += matmul(dk, Mat<S>(lw.attn.wk.transpose()));
      dattn_in += matmul(dv, Mat<S>(lw.attn.wv.transpose()));
      dx = dattn_in;
    }

    for (Index i = 0; i < t; ++i) {
      grads.embedding.row(ex.tokens[static_cast<size_t>(i)]) += dx.row(i);
      grads.pos_embedding.row(i) += dx.row(i);
    }
  }

  if (mask) {
    for_each_tensor(grads, [mask](const std::string& name, Mat<S>& g) {
      zero_frozen(mask->at(name), g);
    });
  }
  return {total_loss * inv_m, std::move(grads)};
}

}  // namespace fpgx
