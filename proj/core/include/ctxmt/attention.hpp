#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ctxmt/autodiff.hpp"

namespace ctxmt {

// Per-forward inspection hooks. Attention probability maps are stored by
// module name in call order; context-attention outputs are kept as live
// graph Vars so tests can differentiate through them.
struct Trace {
  std::vector<std::pair<std::string, ad::Matrix>> attention_maps;
  std::vector<ad::Var> context_attention_outputs;
};

struct RunState {
  bool training = false;
  std::mt19937_64* rng = nullptr;
  Trace* trace = nullptr;
};

// One multi-head attention block's projections.
struct AttentionWeights {
  ad::Var wq, bq, wk, bk, wv, bv, wo, bo;
};

// Tq x Tq mask allowing position i to attend to positions <= i.
ad::Matrix causal_mask(Eigen::Index t);

// Scaled dot-product multi-head attention. queries: Tq x d, keys/values:
// Tk x d. `mask` (Tq x Tk, 1 = allowed) may be empty for full attention.
// Probability maps are recorded into `trace` under `name` when non-null.
ad::Var multi_head_attention(const ad::Var& queries, const ad::Var& keys, const ad::Var& values,
                             const AttentionWeights& w, int heads,
                             const ad::Matrix& mask = ad::Matrix(), Trace* trace = nullptr,
                             const std::string& name = "");

}  // namespace ctxmt
