#pragma once

#include <string>

#include "ctxmt/attention.hpp"
#include "ctxmt/autodiff.hpp"

// Sequence shortening: maps the encoder output H (M x d) to a compressed
// representation used as cached context. Grouping and selecting learn a
// token-to-group categorization; pooling compresses windows of K
// neighboring tokens; the refinement step lets the shortened tokens
// attend back to the full sequence.

namespace ctxmt {

enum class ShorteningMode { kTokens, kSentence, kMeanPool, kMaxPool, kLinearPool, kGroup, kSelect };
enum class Activation { kSoftmax, kSparsemax };
enum class NormalizationAxis { kGroups, kSequence };

ShorteningMode shortening_mode_from_string(const std::string& s);
std::string to_string(ShorteningMode m);
Activation activation_from_string(const std::string& s);
std::string to_string(Activation a);

// Projection of a score vector onto the probability simplex. Produces
// sparse distributions: entries below the support threshold are exact
// zeros. Throws InvalidInput on non-finite entries.
Eigen::VectorXd sparsemax(const Eigen::VectorXd& z);

struct ShorteningParams {
  ShorteningMode mode = ShorteningMode::kTokens;
  int k = 1;                                    // group count, or pooling window
  Activation activation = Activation::kSparsemax;
  int categorizer_hidden = 512;
  int heads = 1;                                // refinement attention heads
  double dropout = 0.0;                         // applied to the refinement output when training
};

// Tensors for one forward pass, wrapped as graph Vars by the owner.
struct ShorteningWeights {
  ad::Var cat_w1, cat_b1, cat_w2, cat_b2;  // categorizer FFN: d -> hidden -> K
  ad::Var lin_w, lin_b;                    // linear pooling map: (K*d) -> d
  AttentionWeights refine_attn;
  ad::Var refine_ln_gamma, refine_ln_beta;
};

// Pooling over non-overlapping windows of K neighboring tokens; output has
// ceil(M/K) tokens. Mean/max pool over a shorter remainder window; linear
// pooling zero-pads the concatenated window to K*d.
ad::Var pool_shorten(const ad::Var& h, const ShorteningParams& p, const ShorteningWeights& w);

// M x K token-to-group weights from the categorizer FFN. axis=kGroups
// normalizes each token's row over the groups (grouping); axis=kSequence
// normalizes each group's column over the sequence (selecting).
ad::Var categorize(const ad::Var& h, const ShorteningParams& p, const ShorteningWeights& w,
                   NormalizationAxis axis);

// g_k = sum_i c[i,k] * h_i, i.e. C^T * H. Exactly K output tokens.
ad::Var group_aggregate(const ad::Var& h, const ad::Var& categorization);

// LayerNorm(G + Attn(G, H, H)): the shortened tokens attend to the full
// hidden sequence, with a residual connection.
ad::Var refine(const ad::Var& g, const ad::Var& h, const ShorteningParams& p,
               const ShorteningWeights& w, RunState& rs);

// Mean over the M tokens; single-token output.
ad::Var aggregate_sentence(const ad::Var& h);

// Dispatches on p.mode. Length contract: tokens -> M, sentence -> 1,
// pooling -> ceil(M/K), group/select -> K. `valid_len` restricts the
// computation to the first rows of h (padding is excluded from pooling
// denominators, categorization normalization, and refinement keys);
// -1 means all rows are valid.
ad::Var shorten(const ad::Var& h, const ShorteningParams& p, const ShorteningWeights& w,
                RunState& rs, Eigen::Index valid_len = -1);

}  // namespace ctxmt
