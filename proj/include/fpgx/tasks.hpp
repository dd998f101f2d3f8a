#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "fpgx/common.hpp"
#include "fpgx/linalg.hpp"
#include "fpgx/transformer.hpp"

namespace fpgx {

inline constexpr int kBosToken = 0;
inline constexpr int kSepToken = 1;

enum class TaskKind { CopyReverse, ModularArith, KeyValueRecall, AssocMapping };

struct TaskSpec {
  TaskKind kind = TaskKind::CopyReverse;
  Index alphabet_size = 16;
  Index alphabet_offset = 0;  // first symbol token id is 2 + alphabet_offset
  Index seq_len = 6;          // CopyReverse: symbols to reverse
  int n_operands = 2;         // ModularArith
  int modulus = 0;            // ModularArith; 0 means alphabet_size
  int n_pairs = 3;            // KeyValueRecall pairs / AssocMapping demonstrations
  int n_mappings = 1;         // AssocMapping: number of permutation tables
  std::uint64_t mapping_seed = 0;
  std::uint64_t train_seed = 1;
  std::uint64_t eval_seed = 2;
  Index eval_size = 128;

  int symbol(Index v) const { return static_cast<int>(2 + alphabet_offset + v); }

  void validate() const {
    if (alphabet_size < 2) throw InputError("task: alphabet_size must be >= 2");
    if (eval_size < 1) throw InputError("task: eval_size must be >= 1");
    switch (kind) {
      case TaskKind::CopyReverse:
        if (seq_len < 1) throw InputError("task: seq_len must be >= 1");
        break;
      case TaskKind::ModularArith: {
        if (n_operands < 1) throw InputError("task: n_operands must be >= 1");
        const Index m = modulus > 0 ? Index(modulus) : alphabet_size;
        if (m < 2 || m > alphabet_size)
          throw InputError("task: modulus must lie in [2, alphabet_size]");
        break;
      }
      case TaskKind::KeyValueRecall:
        if (n_pairs < 1) throw InputError("task: n_pairs must be >= 1");
        if (Index(n_pairs) > alphabet_size / 2)
          throw InputError("task: n_pairs exceeds distinct key count");
        break;
      case TaskKind::AssocMapping:
        // n_pairs = 0 is allowed: the answer comes from the mapping table,
        // so a zero-demonstration episode is still well-posed.
        if (n_pairs < 0) throw InputError("task: n_pairs must be >= 0");
        if (n_mappings < 1) throw InputError("task: n_mappings must be >= 1");
        if (Index(n_pairs) + 1 > alphabet_size)
          throw InputError("task: n_pairs + query exceeds alphabet");
        break;
    }
  }

  Index episode_len() const {
    switch (kind) {
      case TaskKind::CopyReverse: return 2 * seq_len + 2;
      case TaskKind::ModularArith: return Index(n_operands) + 3;
      case TaskKind::KeyValueRecall: return 2 * Index(n_pairs) + 4;
      case TaskKind::AssocMapping: return 2 * Index(n_pairs) + 4;
    }
    return 0;
  }

  Index min_vocab() const { return 2 + alphabet_offset + alphabet_size; }
};

struct Episode {
  std::vector<int> tokens;
  Index answer_begin = 0;
};

namespace detail {

inline std::uint64_t episode_hash(const Episode& e) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (int t : e.tokens) {
    h ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(t));
    h *= 0x100000001b3ull;
  }
  return h;
}

// Distinct draws from [0, n) by rejection; n small at desk scale.
inline std::vector<Index> sample_distinct(Rng& rng, Index n, int count) {
  std::vector<Index> out;
  while (static_cast<int>(out.size()) < count) {
    Index v = rng.uniform_int(n);
    bool seen = false;
    for (Index u : out) seen = seen || (u == v);
    if (!seen) out.push_back(v);
  }
  return out;
}

inline std::vector<Index> permutation_table(const TaskSpec& spec, int table_index) {
  std::vector<Index> pi(static_cast<size_t>(spec.alphabet_size));
  for (Index i = 0; i < spec.alphabet_size; ++i) pi[static_cast<size_t>(i)] = i;
  Rng rng(spec.mapping_seed + 0x9e37u * static_cast<std::uint64_t>(table_index + 1));
  for (Index i = spec.alphabet_size - 1; i > 0; --i) {
    Index j = rng.uniform_int(i + 1);
    std::swap(pi[static_cast<size_t>(i)], pi[static_cast<size_t>(j)]);
  }
  return pi;
}

}  // namespace detail

inline Episode sample_episode(const TaskSpec& spec, Rng& rng) {
  Episode e;
  switch (spec.kind) {
    case TaskKind::CopyReverse: {
      e.tokens.push_back(kBosToken);
      std::vector<int> body(static_cast<size_t>(spec.seq_len));
      for (auto& s : body) s = spec.symbol(rng.uniform_int(spec.alphabet_size));
      for (int s : body) e.tokens.push_back(s);
      e.tokens.push_back(kSepToken);
      e.answer_begin = static_cast<Index>(e.tokens.size());
      for (auto it = body.rbegin(); it != body.rend(); ++it) e.tokens.push_back(*it);
      break;
    }
    case TaskKind::ModularArith: {
      const Index m = spec.modulus > 0 ? Index(spec.modulus) : spec.alphabet_size;
      e.tokens.push_back(kBosToken);
      Index sum = 0;
      for (int i = 0; i < spec.n_operands; ++i) {
        Index v = rng.uniform_int(m);
        sum += v;
        e.tokens.push_back(spec.symbol(v));
      }
      e.tokens.push_back(kSepToken);
      e.answer_begin = static_cast<Index>(e.tokens.size());
      e.tokens.push_back(spec.symbol(sum % m));
      break;
    }
    case TaskKind::KeyValueRecall: {
      const Index half = spec.alphabet_size / 2;
      auto keys = detail::sample_distinct(rng, half, spec.n_pairs);
      e.tokens.push_back(kBosToken);
      std::vector<Index> values(keys.size());
      for (size_t i = 0; i < keys.size(); ++i) {
        values[i] = half + rng.uniform_int(spec.alphabet_size - half);
        e.tokens.push_back(spec.symbol(keys[i]));
        e.tokens.push_back(spec.symbol(values[i]));
      }
      e.tokens.push_back(kSepToken);
      const Index qi = rng.uniform_int(static_cast<Index>(keys.size()));
      e.tokens.push_back(spec.symbol(keys[static_cast<size_t>(qi)]));
      e.answer_begin = static_cast<Index>(e.tokens.size());
      e.tokens.push_back(spec.symbol(values[static_cast<size_t>(qi)]));
      break;
    }
    case TaskKind::AssocMapping: {
      const int table = spec.n_mappings > 1 ? static_cast<int>(rng.uniform_int(spec.n_mappings)) : 0;
      const auto pi = detail::permutation_table(spec, table);
      auto xs = detail::sample_distinct(rng, spec.alphabet_size, spec.n_pairs + 1);
      e.tokens.push_back(kBosToken);
      for (int i = 0; i < spec.n_pairs; ++i) {
        e.tokens.push_back(spec.symbol(xs[static_cast<size_t>(i)]));
        e.tokens.push_back(spec.symbol(pi[static_cast<size_t>(xs[static_cast<size_t>(i)])]));
      }
      e.tokens.push_back(kSepToken);
      const Index xq = xs[static_cast<size_t>(spec.n_pairs)];
      e.tokens.push_back(spec.symbol(xq));
      e.answer_begin = static_cast<Index>(e.tokens.size());
      e.tokens.push_back(spec.symbol(pi[static_cast<size_t>(xq)]));
      break;
    }
  }
  return e;
}

inline std::vector<Episode> make_eval_set(const TaskSpec& spec) {
  spec.validate();
  Rng rng(spec.eval_seed);
  std::vector<Episode> out;
  std::set<std::uint64_t> seen;
  int stall = 0;
  while (static_cast<Index>(out.size()) < spec.eval_size) {
    Episode e = sample_episode(spec, rng);
    const std::uint64_t h = detail::episode_hash(e);
    if (seen.insert(h).second) {
      out.push_back(std::move(e));
      stall = 0;
    } else if (++stall > 10000) {
      throw InputError("task: episode space too small for requested eval_size");
    }
  }
  return out;
}

// Train-side sampler; rejects anything whose token string appears in the eval set.
class TrainSampler {
 public:
  explicit TrainSampler(const TaskSpec& spec)
      : spec_(spec), rng_(spec.train_seed) {
    spec_.validate();
    for (const Episode& e : make_eval_set(spec_)) eval_hashes_.insert(detail::episode_hash(e));
  }

  Episode next() {
    for (int tries = 0; tries < 100000; ++tries) {
      Episode e = sample_episode(spec_, rng_);
      if (eval_hashes_.count(detail::episode_hash(e)) == 0) return e;
    }
    throw InputError("task: train sampler exhausted by eval-set rejection");
  }

  const TaskSpec& spec() const { return spec_; }

 private:
  TaskSpec spec_;
  Rng rng_;
  std::set<std::uint64_t> eval_hashes_;
};

inline Example to_example(const Episode& e, bool full_sequence) {
  Example ex;
  ex.tokens = e.tokens;
  ex.targets.assign(e.tokens.size(), -1);
  const Index t = static_cast<Index>(e.tokens.size());
  const Index first = full_sequence ? Index(0) : e.answer_begin - 1;
  for (Index i = first; i + 1 < t; ++i)
    ex.targets[static_cast<size_t>(i)] = e.tokens[static_cast<size_t>(i) + 1];
  return ex;
}

// Exact-match accuracy of greedy decoding over each episode's answer span.
template <class S>
double evaluate_accuracy(const ModelParams<S>& params, const std::vector<Episode>& eval_set) {
  if (eval_set.empty()) throw InputError("evaluate: empty eval set");
  Index correct = 0;
  for (const Episode& e : eval_set) {
    std::vector<int> ctx(e.tokens.begin(), e.tokens.begin() + e.answer_begin);
    bool ok = true;
    for (Index i = e.answer_begin; i < static_cast<Index>(e.tokens.size()); ++i) {
      Mat<S> logits = forward(params, ctx);
      Index best = 0;
      logits.row(logits.rows() - 1).maxCoeff(&best);
      if (static_cast<int>(best) != e.tokens[static_cast<size_t>(i)]) {
        ok = false;
        break;
      }
      ctx.push_back(static_cast<int>(best));
    }
    if (ok) ++correct;
  }
  return double(correct) / double(eval_set.size());
}

}  // namespace fpgx
