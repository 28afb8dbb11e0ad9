#include "ctxmt/attention.hpp"

#include <cmath>

namespace ctxmt {

using ad::Matrix;
using ad::Var;

Matrix causal_mask(Eigen::Index t) {
  Matrix m = Matrix::Zero(t, t);
  for (Eigen::Index i = 0; i < t; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) m(i, j) = 1.0;
  }
  return m;
}

Var multi_head_attention(const Var& queries, const Var& keys, const Var& values,
                         const AttentionWeights& w, int heads, const Matrix& mask, Trace* trace,
                         const std::string& name) {
  const Eigen::Index d = queries.cols();
  if (heads < 1 || d % heads != 0) throw InvalidConfig("attention: heads must divide model dim");
  const Eigen::Index dh = d / heads;
  const double scaling = 1.0 / std::sqrt(static_cast<double>(dh));

  Var q = ad::add_rowvec(ad::matmul(queries, w.wq), w.bq);
  Var k = ad::add_rowvec(ad::matmul(keys, w.wk), w.bk);
  Var v = ad::add_rowvec(ad::matmul(values, w.wv), w.bv);

  std::vector<Var> head_outputs;
  head_outputs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Var qh = ad::slice_cols(q, h * dh, dh);
    Var kh = ad::slice_cols(k, h * dh, dh);
    Var vh = ad::slice_cols(v, h * dh, dh);
    Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), scaling);
    Var probs = ad::softmax_rows(scores, mask);
    if (trace != nullptr) {
      trace->attention_maps.emplace_back(name + "/h" + std::to_string(h), probs.value());
    }
    head_outputs.push_back(ad::matmul(probs, vh));
  }
  Var merged = ad::concat_cols(head_outputs);
  return ad::add_rowvec(ad::matmul(merged, w.wo), w.bo);
}

}  // namespace ctxmt
