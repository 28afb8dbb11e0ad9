#include "ctxmt/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <unordered_set>

namespace ctxmt::ad {

namespace {

std::atomic<std::uint64_t> g_order{0};
std::atomic<std::int64_t> g_live_bytes{0};
std::atomic<std::int64_t> g_peak_bytes{0};

void bump_peak() {
  std::int64_t live = g_live_bytes.load(std::memory_order_relaxed);
  std::int64_t peak = g_peak_bytes.load(std::memory_order_relaxed);
  while (live > peak &&
         !g_peak_bytes.compare_exchange_weak(peak, live, std::memory_order_relaxed)) {
  }
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InvalidInput(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                       std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                       std::to_string(b.cols()));
  }
}

}  // namespace

void MemProbe::reset_peak() {
  g_peak_bytes.store(g_live_bytes.load(std::memory_order_relaxed), std::memory_order_relaxed);
}
std::int64_t MemProbe::live_bytes() { return g_live_bytes.load(std::memory_order_relaxed); }
std::int64_t MemProbe::peak_bytes() { return g_peak_bytes.load(std::memory_order_relaxed); }
void MemProbe::add(std::int64_t n) {
  g_live_bytes.fetch_add(n, std::memory_order_relaxed);
  bump_peak();
}
void MemProbe::sub(std::int64_t n) { g_live_bytes.fetch_sub(n, std::memory_order_relaxed); }

Node::Node(Matrix v) : value(std::move(v)), order(g_order.fetch_add(1, std::memory_order_relaxed)) {
  MemProbe::add(static_cast<std::int64_t>(value.size()) * static_cast<std::int64_t>(sizeof(double)));
}

Node::~Node() {
  MemProbe::sub(static_cast<std::int64_t>(value.size() + grad.size()) *
                static_cast<std::int64_t>(sizeof(double)));
}

void Node::accumulate(const Matrix& g) {
  if (!requires_grad) return;
  if (grad.size() == 0) {
    grad = g;
    MemProbe::add(static_cast<std::int64_t>(grad.size()) * static_cast<std::int64_t>(sizeof(double)));
  } else {
    grad += g;
  }
}

Var Var::constant(Matrix value) {
  return Var(std::make_shared<Node>(std::move(value)));
}

Var Var::leaf(Parameter& p, bool requires_grad) {
  auto n = std::make_shared<Node>(p.value);
  if (requires_grad) {
    n->requires_grad = true;
    Parameter* pp = &p;
    n->backprop = [pp](Node& self) { pp->grad += self.grad; };
  }
  return Var(std::move(n));
}

const std::shared_ptr<Node>& node_of(const Var& v) { return v.node_; }

// Creates the result node. Parent links and the closure are only kept
// when a gradient can actually flow, so inference graphs stay flat.
Var make_op(Matrix value, std::vector<Var> parents, std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>(std::move(value));
  bool needs = false;
  for (const Var& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (Var& p : parents) n->parents.push_back(p.node_);
    n->backprop = std::move(backprop);
  }
  return Var(std::move(n));
}

void backward(const Var& root) {
  if (!root.defined()) throw InvalidInput("backward: undefined root");
  if (root.rows() != 1 || root.cols() != 1) throw InvalidInput("backward: root must be 1x1");
  if (!root.requires_grad()) return;

  // Reverse creation order is a topological order of the subgraph.
  std::vector<Node*> nodes;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.node_.get()};
  seen.insert(root.node_.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    nodes.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(nodes.begin(), nodes.end(), [](Node* a, Node* b) { return a->order > b->order; });

  root.node_->accumulate(Matrix::Ones(1, 1));
  for (Node* n : nodes) {
    if (n->backprop && n->grad.size() != 0) n->backprop(*n);
  }
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  return make_op(a.value() + b.value(), {a, b}, [](Node& self) {
    self.parents[0]->accumulate(self.grad);
    self.parents[1]->accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  return make_op(a.value() - b.value(), {a, b}, [](Node& self) {
    self.parents[0]->accumulate(self.grad);
    self.parents[1]->accumulate(-self.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  return make_op(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
    self.parents[0]->accumulate(self.grad.cwiseProduct(self.parents[1]->value));
    self.parents[1]->accumulate(self.grad.cwiseProduct(self.parents[0]->value));
  });
}

Var scale(const Var& a, double s) {
  return make_op(a.value() * s, {a},
                 [s](Node& self) { self.parents[0]->accumulate(self.grad * s); });
}

Var add_scalar(const Var& a, double s) {
  return make_op(a.value().array() + s, {a},
                 [](Node& self) { self.parents[0]->accumulate(self.grad); });
}

Var relu(const Var& a) {
  return make_op(a.value().cwiseMax(0.0), {a}, [](Node& self) {
    const Matrix& x = self.parents[0]->value;
    self.parents[0]->accumulate(
        self.grad.cwiseProduct((x.array() > 0.0).cast<double>().matrix()));
  });
}

Var sigmoid(const Var& a) {
  Matrix s = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return make_op(std::move(s), {a}, [](Node& self) {
    const Matrix& y = self.value;
    self.parents[0]->accumulate(
        self.grad.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
  });
}

// ------------------------------------------------------------- linear algebra

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw InvalidInput("matmul: inner dimensions " + std::to_string(a.cols()) + " vs " +
                       std::to_string(b.rows()));
  }
  return make_op(a.value() * b.value(), {a, b}, [](Node& self) {
    self.parents[0]->accumulate(self.grad * self.parents[1]->value.transpose());
    self.parents[1]->accumulate(self.parents[0]->value.transpose() * self.grad);
  });
}

Var transpose(const Var& a) {
  return make_op(a.value().transpose(), {a},
                 [](Node& self) { self.parents[0]->accumulate(self.grad.transpose()); });
}

Var add_rowvec(const Var& a, const Var& v) {
  if (v.rows() != 1 || v.cols() != a.cols()) throw InvalidInput("add_rowvec: bad vector shape");
  Matrix out = a.value();
  out.rowwise() += Eigen::RowVectorXd(v.value().row(0));
  return make_op(std::move(out), {a, v}, [](Node& self) {
    self.parents[0]->accumulate(self.grad);
    self.parents[1]->accumulate(self.grad.colwise().sum());
  });
}

Var mul_colvec(const Var& a, const Var& v) {
  if (v.cols() != 1 || v.rows() != a.rows()) throw InvalidInput("mul_colvec: bad vector shape");
  Matrix out = a.value().array().colwise() * v.value().col(0).array();
  return make_op(std::move(out), {a, v}, [](Node& self) {
    const Matrix& x = self.parents[0]->value;
    const Matrix& vv = self.parents[1]->value;
    self.parents[0]->accumulate((self.grad.array().colwise() * vv.col(0).array()).matrix());
    self.parents[1]->accumulate(self.grad.cwiseProduct(x).rowwise().sum());
  });
}

// ------------------------------------------------------------------- shape

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || n < 0 || start + n > a.rows()) throw InvalidInput("slice_rows: out of range");
  return make_op(a.value().middleRows(start, n), {a}, [start, n](Node& self) {
    Matrix g = Matrix::Zero(self.parents[0]->value.rows(), self.parents[0]->value.cols());
    g.middleRows(start, n) = self.grad;
    self.parents[0]->accumulate(g);
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || n < 0 || start + n > a.cols()) throw InvalidInput("slice_cols: out of range");
  return make_op(a.value().middleCols(start, n), {a}, [start, n](Node& self) {
    Matrix g = Matrix::Zero(self.parents[0]->value.rows(), self.parents[0]->value.cols());
    g.middleCols(start, n) = self.grad;
    self.parents[0]->accumulate(g);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidInput("concat_rows: no parts");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const Var& p : parts) {
    if (p.cols() != cols) throw InvalidInput("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Eigen::Index r = 0;
  std::vector<Var> parents;
  parents.reserve(parts.size());
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
    parents.push_back(p);
  }
  return make_op(std::move(out), std::move(parents), [](Node& self) {
    Eigen::Index r = 0;
    for (auto& p : self.parents) {
      p->accumulate(self.grad.middleRows(r, p->value.rows()));
      r += p->value.rows();
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidInput("concat_cols: no parts");
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts.front().rows();
  for (const Var& p : parts) {
    if (p.rows() != rows) throw InvalidInput("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index c = 0;
  std::vector<Var> parents;
  parents.reserve(parts.size());
  for (const Var& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
    parents.push_back(p);
  }
  return make_op(std::move(out), std::move(parents), [](Node& self) {
    Eigen::Index c = 0;
    for (auto& p : self.parents) {
      p->accumulate(self.grad.middleCols(c, p->value.cols()));
      c += p->value.cols();
    }
  });
}

// --------------------------------------------------------------- reductions

Var sum_all(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make_op(std::move(out), {a}, [](Node& self) {
    self.parents[0]->accumulate(Matrix::Constant(self.parents[0]->value.rows(),
                                                 self.parents[0]->value.cols(),
                                                 self.grad(0, 0)));
  });
}

Var mean_rows(const Var& a) {
  Matrix out = a.value().colwise().mean();
  return make_op(std::move(out), {a}, [](Node& self) {
    const double inv = 1.0 / static_cast<double>(self.parents[0]->value.rows());
    self.parents[0]->accumulate((self.grad * inv).replicate(self.parents[0]->value.rows(), 1));
  });
}

Var sum_rows_weighted(const Var& a, const Var& w) {
  if (w.cols() != 1 || w.rows() != a.rows()) throw InvalidInput("sum_rows_weighted: bad weights");
  Matrix out = w.value().transpose() * a.value();
  return make_op(std::move(out), {a, w}, [](Node& self) {
    const Matrix& x = self.parents[0]->value;
    const Matrix& ww = self.parents[1]->value;
    self.parents[0]->accumulate(ww * self.grad);
    self.parents[1]->accumulate(x * self.grad.transpose());
  });
}

// ----------------------------------------------------- row-wise nonlinearities

Var softmax_rows(const Var& a, const Matrix& mask) {
  const bool masked = mask.size() != 0;
  if (masked && (mask.rows() != a.rows() || mask.cols() != a.cols())) {
    throw InvalidInput("softmax_rows: mask shape mismatch");
  }
  const Matrix& x = a.value();
  Matrix p(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (!masked || mask(i, j) != 0.0) m = std::max(m, x(i, j));
    }
    double z = 0.0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (!masked || mask(i, j) != 0.0) {
        p(i, j) = std::exp(x(i, j) - m);
        z += p(i, j);
      } else {
        p(i, j) = 0.0;
      }
    }
    if (z <= 0.0) throw InvalidInput("softmax_rows: fully masked row");
    p.row(i) /= z;
  }
  return make_op(std::move(p), {a}, [](Node& self) {
    const Matrix& y = self.value;
    Matrix gx = self.grad.cwiseProduct(y);
    Eigen::VectorXd dot = gx.rowwise().sum();
    gx -= (y.array().colwise() * dot.array()).matrix();
    self.parents[0]->accumulate(gx);
  });
}

Var log_softmax_rows(const Var& a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    const double lse = m + std::log((x.row(i).array() - m).exp().sum());
    out.row(i) = x.row(i).array() - lse;
  }
  return make_op(std::move(out), {a}, [](Node& self) {
    Matrix sm = self.value.array().exp();
    Eigen::VectorXd gsum = self.grad.rowwise().sum();
    self.parents[0]->accumulate(self.grad - (sm.array().colwise() * gsum.array()).matrix());
  });
}

// Support-search projection onto the simplex. Ties in the sort are
// broken by index so the result is deterministic.
Eigen::RowVectorXd simplex_project(const Eigen::RowVectorXd& z) {
  const Eigen::Index n = z.size();
  std::vector<Eigen::Index> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](Eigen::Index a, Eigen::Index b) {
    if (z(a) != z(b)) return z(a) > z(b);
    return a < b;
  });
  double cum = 0.0;
  double tau = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    const double zk = z(idx[static_cast<size_t>(k)]);
    cum += zk;
    const double cand = (cum - 1.0) / static_cast<double>(k + 1);
    if (zk - cand > 0.0) {
      tau = cand;
    } else {
      break;
    }
  }
  return (z.array() - tau).max(0.0);
}

Var sparsemax_rows(const Var& a) {
  const Matrix& x = a.value();
  if (!x.allFinite()) throw InvalidInput("sparsemax_rows: non-finite input");
  Matrix p(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    p.row(i) = simplex_project(x.row(i));
  }
  // d sparsemax / dz = diag(s) - s s^T / |S| on the support S = {p > 0}.
  return make_op(std::move(p), {a}, [](Node& self) {
    const Matrix& y = self.value;
    Matrix gx = Matrix::Zero(y.rows(), y.cols());
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      double gsum = 0.0;
      Eigen::Index count = 0;
      for (Eigen::Index j = 0; j < y.cols(); ++j) {
        if (y(i, j) > 0.0) {
          gsum += self.grad(i, j);
          ++count;
        }
      }
      if (count == 0) continue;
      const double ghat = gsum / static_cast<double>(count);
      for (Eigen::Index j = 0; j < y.cols(); ++j) {
        if (y(i, j) > 0.0) gx(i, j) = self.grad(i, j) - ghat;
      }
    }
    self.parents[0]->accumulate(gx);
  });
}

Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps) {
  if (gamma.rows() != 1 || gamma.cols() != a.cols() || beta.rows() != 1 ||
      beta.cols() != a.cols()) {
    throw InvalidInput("layer_norm_rows: affine shape mismatch");
  }
  const Matrix& x = a.value();
  const Eigen::Index d = x.cols();
  Eigen::VectorXd mu = x.rowwise().mean();
  Matrix centered = x.array().colwise() - mu.array();
  Eigen::VectorXd var = centered.array().square().rowwise().mean();
  Eigen::VectorXd inv_std = (var.array() + eps).rsqrt();
  Matrix xhat = centered.array().colwise() * inv_std.array();
  Eigen::RowVectorXd gv = gamma.value().row(0);
  Matrix out = xhat.array().rowwise() * gv.array();
  out.rowwise() += Eigen::RowVectorXd(beta.value().row(0));

  struct Saved {
    Matrix xhat;
    Eigen::VectorXd inv_std;
  };
  auto saved = std::make_shared<Saved>(Saved{std::move(xhat), std::move(inv_std)});
  (void)d;
  return make_op(std::move(out), {a, gamma, beta}, [saved](Node& self) {
    const Eigen::RowVectorXd g = self.parents[1]->value.row(0);
    // dgamma, dbeta
    self.parents[1]->accumulate(self.grad.cwiseProduct(saved->xhat).colwise().sum());
    self.parents[2]->accumulate(self.grad.colwise().sum());
    // dx per row: inv_std * (dxh - mean(dxh) - xhat * mean(dxh*xhat))
    Matrix dxh = self.grad.array().rowwise() * g.array();
    Eigen::VectorXd m1 = dxh.rowwise().mean();
    Eigen::VectorXd m2 = dxh.cwiseProduct(saved->xhat).rowwise().mean();
    Matrix dx = dxh;
    dx.colwise() -= m1;
    dx -= (saved->xhat.array().colwise() * m2.array()).matrix();
    dx = dx.array().colwise() * saved->inv_std.array();
    self.parents[0]->accumulate(dx);
  });
}

// ------------------------------------------------------------------- pooling

Var mean_pool_rows(const Var& a, Eigen::Index k) {
  if (k < 1) throw InvalidConfig("mean_pool_rows: k must be >= 1");
  const Matrix& x = a.value();
  const Eigen::Index m = x.rows();
  const Eigen::Index groups = (m + k - 1) / k;
  Matrix out(groups, x.cols());
  for (Eigen::Index j = 0; j < groups; ++j) {
    const Eigen::Index lo = j * k;
    const Eigen::Index len = std::min(k, m - lo);
    out.row(j) = x.middleRows(lo, len).colwise().mean();
  }
  return make_op(std::move(out), {a}, [k](Node& self) {
    const Eigen::Index m = self.parents[0]->value.rows();
    Matrix g = Matrix::Zero(m, self.parents[0]->value.cols());
    for (Eigen::Index j = 0; j < self.value.rows(); ++j) {
      const Eigen::Index lo = j * k;
      const Eigen::Index len = std::min(k, m - lo);
      g.middleRows(lo, len) = (self.grad.row(j) / static_cast<double>(len)).replicate(len, 1);
    }
    self.parents[0]->accumulate(g);
  });
}

Var max_pool_rows(const Var& a, Eigen::Index k) {
  if (k < 1) throw InvalidConfig("max_pool_rows: k must be >= 1");
  const Matrix& x = a.value();
  const Eigen::Index m = x.rows();
  const Eigen::Index groups = (m + k - 1) / k;
  Matrix out(groups, x.cols());
  // First maximal row wins per (group, column); recorded for backward.
  auto argmax = std::make_shared<Eigen::MatrixXi>(groups, x.cols());
  for (Eigen::Index j = 0; j < groups; ++j) {
    const Eigen::Index lo = j * k;
    const Eigen::Index len = std::min(k, m - lo);
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      Eigen::Index best = lo;
      for (Eigen::Index r = lo + 1; r < lo + len; ++r) {
        if (x(r, c) > x(best, c)) best = r;
      }
      out(j, c) = x(best, c);
      (*argmax)(j, c) = static_cast<int>(best);
    }
  }
  return make_op(std::move(out), {a}, [argmax](Node& self) {
    Matrix g = Matrix::Zero(self.parents[0]->value.rows(), self.parents[0]->value.cols());
    for (Eigen::Index j = 0; j < self.value.rows(); ++j) {
      for (Eigen::Index c = 0; c < self.value.cols(); ++c) {
        g((*argmax)(j, c), c) += self.grad(j, c);
      }
    }
    self.parents[0]->accumulate(g);
  });
}

// -------------------------------------------------------------------- lookup

Var gather_rows(const Var& table, const std::vector<int>& ids) {
  const Matrix& t = table.value();
  Matrix out(static_cast<Eigen::Index>(ids.size()), t.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= t.rows()) throw InvalidInput("gather_rows: id out of range");
    out.row(static_cast<Eigen::Index>(i)) = t.row(ids[i]);
  }
  auto ids_copy = std::make_shared<std::vector<int>>(ids);
  return make_op(std::move(out), {table}, [ids_copy](Node& self) {
    Matrix g = Matrix::Zero(self.parents[0]->value.rows(), self.parents[0]->value.cols());
    for (size_t i = 0; i < ids_copy->size(); ++i) {
      g.row((*ids_copy)[i]) += self.grad.row(static_cast<Eigen::Index>(i));
    }
    self.parents[0]->accumulate(g);
  });
}

// ------------------------------------------------------------- graph control

Var detach(const Var& a) { return Var::constant(a.value()); }

Var dropout(const Var& a, double rate, bool training, std::mt19937_64& rng) {
  if (!training || rate == 0.0) return a;
  if (rate < 0.0 || rate >= 1.0) throw InvalidConfig("dropout: rate must be in [0, 1)");
  const double keep = 1.0 - rate;
  std::bernoulli_distribution coin(keep);
  Matrix mask(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < mask.rows(); ++i) {
    for (Eigen::Index j = 0; j < mask.cols(); ++j) {
      mask(i, j) = coin(rng) ? 1.0 / keep : 0.0;
    }
  }
  auto m = std::make_shared<Matrix>(std::move(mask));
  return make_op(a.value().cwiseProduct(*m), {a}, [m](Node& self) {
    self.parents[0]->accumulate(self.grad.cwiseProduct(*m));
  });
}

}  // namespace ctxmt::ad
