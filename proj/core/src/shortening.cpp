#include "ctxmt/shortening.hpp"

#include <cmath>

namespace ctxmt {

using ad::Matrix;
using ad::Var;

ShorteningMode shortening_mode_from_string(const std::string& s) {
  if (s == "tokens") return ShorteningMode::kTokens;
  if (s == "sentence") return ShorteningMode::kSentence;
  if (s == "mean_pool") return ShorteningMode::kMeanPool;
  if (s == "max_pool") return ShorteningMode::kMaxPool;
  if (s == "linear_pool") return ShorteningMode::kLinearPool;
  if (s == "group") return ShorteningMode::kGroup;
  if (s == "select") return ShorteningMode::kSelect;
  throw InvalidConfig("unknown shortening mode: " + s);
}

std::string to_string(ShorteningMode m) {
  switch (m) {
    case ShorteningMode::kTokens: return "tokens";
    case ShorteningMode::kSentence: return "sentence";
    case ShorteningMode::kMeanPool: return "mean_pool";
    case ShorteningMode::kMaxPool: return "max_pool";
    case ShorteningMode::kLinearPool: return "linear_pool";
    case ShorteningMode::kGroup: return "group";
    case ShorteningMode::kSelect: return "select";
  }
  throw InvalidConfig("unknown shortening mode tag");
}

Activation activation_from_string(const std::string& s) {
  if (s == "softmax") return Activation::kSoftmax;
  if (s == "sparsemax") return Activation::kSparsemax;
  throw InvalidConfig("unknown activation: " + s);
}

std::string to_string(Activation a) {
  return a == Activation::kSoftmax ? "softmax" : "sparsemax";
}

Eigen::VectorXd sparsemax(const Eigen::VectorXd& z) {
  if (z.size() < 1) throw InvalidInput("sparsemax: empty input");
  if (!z.allFinite()) throw InvalidInput("sparsemax: non-finite input");
  return ad::simplex_project(z.transpose()).transpose();
}

Var pool_shorten(const Var& h, const ShorteningParams& p, const ShorteningWeights& w) {
  if (p.k < 1) throw InvalidConfig("pool_shorten: K must be >= 1");
  switch (p.mode) {
    case ShorteningMode::kMeanPool:
      return ad::mean_pool_rows(h, p.k);
    case ShorteningMode::kMaxPool:
      return ad::max_pool_rows(h, p.k);
    case ShorteningMode::kLinearPool: {
      const Eigen::Index m = h.rows();
      const Eigen::Index d = h.cols();
      const Eigen::Index groups = (m + p.k - 1) / p.k;
      std::vector<Var> group_rows;
      group_rows.reserve(static_cast<size_t>(groups));
      for (Eigen::Index j = 0; j < groups; ++j) {
        const Eigen::Index lo = j * p.k;
        const Eigen::Index len = std::min<Eigen::Index>(p.k, m - lo);
        std::vector<Var> pieces;
        pieces.reserve(static_cast<size_t>(p.k));
        for (Eigen::Index r = 0; r < len; ++r) {
          pieces.push_back(ad::slice_rows(h, lo + r, 1));
        }
        if (len < p.k) {
          pieces.push_back(Var::constant(Matrix::Zero(1, (p.k - len) * d)));
        }
        group_rows.push_back(ad::concat_cols(pieces));
      }
      Var stacked = ad::concat_rows(group_rows);
      return ad::add_rowvec(ad::matmul(stacked, w.lin_w), w.lin_b);
    }
    default:
      throw InvalidConfig("pool_shorten: mode is not a pooling mode");
  }
}

Var categorize(const Var& h, const ShorteningParams& p, const ShorteningWeights& w,
               NormalizationAxis axis) {
  if (w.cat_w2.cols() != p.k) throw InvalidInput("categorize: categorizer output width != K");
  Var hidden = ad::relu(ad::add_rowvec(ad::matmul(h, w.cat_w1), w.cat_b1));
  Var logits = ad::add_rowvec(ad::matmul(hidden, w.cat_w2), w.cat_b2);
  if (axis == NormalizationAxis::kSequence) {
    // Normalize over the sequence dimension: each group's column.
    Var lt = ad::transpose(logits);
    Var nt = p.activation == Activation::kSoftmax ? ad::softmax_rows(lt) : ad::sparsemax_rows(lt);
    return ad::transpose(nt);
  }
  return p.activation == Activation::kSoftmax ? ad::softmax_rows(logits)
                                              : ad::sparsemax_rows(logits);
}

Var group_aggregate(const Var& h, const Var& categorization) {
  if (categorization.rows() != h.rows()) {
    throw InvalidInput("group_aggregate: categorization rows != sequence length");
  }
  return ad::matmul(ad::transpose(categorization), h);
}

Var refine(const Var& g, const Var& h, const ShorteningParams& p, const ShorteningWeights& w,
           RunState& rs) {
  if (g.cols() != h.cols()) throw InvalidInput("refine: model dim mismatch");
  Var attended = multi_head_attention(g, h, h, w.refine_attn, p.heads, Matrix(), rs.trace,
                                      "shortening/refine");
  if (rs.training && p.dropout > 0.0 && rs.rng != nullptr) {
    attended = ad::dropout(attended, p.dropout, rs.training, *rs.rng);
  }
  return ad::layer_norm_rows(ad::add(g, attended), w.refine_ln_gamma, w.refine_ln_beta);
}

Var aggregate_sentence(const Var& h) {
  if (h.rows() < 1) throw InvalidInput("aggregate_sentence: empty sequence");
  return ad::mean_rows(h);
}

Var shorten(const Var& h, const ShorteningParams& p, const ShorteningWeights& w, RunState& rs,
            Eigen::Index valid_len) {
  if (p.k < 1) throw InvalidConfig("shorten: K must be >= 1");
  Var x = h;
  if (valid_len >= 0 && valid_len != h.rows()) {
    if (valid_len < 1 || valid_len > h.rows()) throw InvalidInput("shorten: bad valid length");
    x = ad::slice_rows(h, 0, valid_len);
  }
  switch (p.mode) {
    case ShorteningMode::kTokens:
      return x;
    case ShorteningMode::kSentence:
      return aggregate_sentence(x);
    case ShorteningMode::kMeanPool:
    case ShorteningMode::kMaxPool:
    case ShorteningMode::kLinearPool:
      return refine(pool_shorten(x, p, w), x, p, w, rs);
    case ShorteningMode::kGroup: {
      Var c = categorize(x, p, w, NormalizationAxis::kGroups);
      return refine(group_aggregate(x, c), x, p, w, rs);
    }
    case ShorteningMode::kSelect: {
      Var c = categorize(x, p, w, NormalizationAxis::kSequence);
      return refine(group_aggregate(x, c), x, p, w, rs);
    }
  }
  throw InvalidConfig("shorten: unknown mode");
}

}  // namespace ctxmt
