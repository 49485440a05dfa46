#include "sat3d/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sat3d::nn {

namespace {

Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }
bool needs(const Node& n, std::size_t i) { return n.parents[i]->requires_grad; }

template <typename Expr>
void acc(Node& n, const Expr& e) {
  if (n.grad.size() == 0)
    n.grad.noalias() = e;
  else
    n.grad.noalias() += e;
}

void require(bool ok, const char* what) {
  if (!ok) throw ShapeError(what);
}

}  // namespace

// --- dense algebra -------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix out;
  out.noalias() = a.value() * b.value();
  return make_result(std::move(out), {a, b}, [](Node& self) {
    Node& A = parent(self, 0);
    Node& B = parent(self, 1);
    if (needs(self, 0)) acc(A, self.grad * B.value.transpose());
    if (needs(self, 1)) acc(B, A.value.transpose() * self.grad);
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require(x.cols() == weight.rows(), "linear: input width does not match weight rows");
  Matrix out;
  out.noalias() = x.value() * weight.value();
  if (bias.defined()) {
    require(bias.rows() == 1 && bias.cols() == weight.cols(), "linear: bad bias shape");
    out.rowwise() += bias.value().row(0);
    return make_result(std::move(out), {x, weight, bias}, [](Node& self) {
      Node& X = parent(self, 0);
      Node& W = parent(self, 1);
      if (needs(self, 0)) acc(X, self.grad * W.value.transpose());
      if (needs(self, 1)) acc(W, X.value.transpose() * self.grad);
      if (needs(self, 2)) acc(parent(self, 2), self.grad.colwise().sum());
    });
  }
  return make_result(std::move(out), {x, weight}, [](Node& self) {
    Node& X = parent(self, 0);
    Node& W = parent(self, 1);
    if (needs(self, 0)) acc(X, self.grad * W.value.transpose());
    if (needs(self, 1)) acc(W, X.value.transpose() * self.grad);
  });
}

Var add(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shapes differ");
  return make_result(a.value() + b.value(), {a, b}, [](Node& self) {
    if (needs(self, 0)) acc(parent(self, 0), self.grad);
    if (needs(self, 1)) acc(parent(self, 1), self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shapes differ");
  return make_result(a.value() - b.value(), {a, b}, [](Node& self) {
    if (needs(self, 0)) acc(parent(self, 0), self.grad);
    if (needs(self, 1)) acc(parent(self, 1), -self.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shapes differ");
  return make_result(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
    if (needs(self, 0)) acc(parent(self, 0), self.grad.cwiseProduct(parent(self, 1).value));
    if (needs(self, 1)) acc(parent(self, 1), self.grad.cwiseProduct(parent(self, 0).value));
  });
}

Var scale(const Var& a, float s) {
  return make_result(a.value() * s, {a}, [s](Node& self) { acc(parent(self, 0), self.grad * s); });
}

Var add_row(const Var& x, const Var& row) {
  require(row.rows() == 1 && row.cols() == x.cols(), "add_row: bad row shape");
  Matrix out = x.value();
  out.rowwise() += row.value().row(0);
  return make_result(std::move(out), {x, row}, [](Node& self) {
    if (needs(self, 0)) acc(parent(self, 0), self.grad);
    if (needs(self, 1)) acc(parent(self, 1), self.grad.colwise().sum());
  });
}

Var broadcast_rows(const Var& row, Index rows) {
  require(row.rows() == 1, "broadcast_rows: expects a single row");
  Matrix out = row.value().replicate(rows, 1);
  return make_result(std::move(out), {row},
                     [](Node& self) { acc(parent(self, 0), self.grad.colwise().sum()); });
}

Var sum_all(const Var& x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  return make_result(std::move(out), {x}, [](Node& self) {
    Node& X = parent(self, 0);
    acc(X, Matrix::Constant(X.value.rows(), X.value.cols(), self.grad(0, 0)));
  });
}

Var mean_all(const Var& x) {
  const float n = float(x.value().size());
  Matrix out(1, 1);
  out(0, 0) = x.value().sum() / n;
  return make_result(std::move(out), {x}, [n](Node& self) {
    Node& X = parent(self, 0);
    acc(X, Matrix::Constant(X.value.rows(), X.value.cols(), self.grad(0, 0) / n));
  });
}

Var detach(const Var& x) { return Var(x.value(), false); }

// --- activations ---------------------------------------------------------

namespace {
constexpr float kGeluScale = 0.7978845608028654f;  // sqrt(2 / pi)
constexpr float kGeluCubic = 0.044715f;
}  // namespace

Var gelu(const Var& x) {
  constexpr float k0 = kGeluScale;
  constexpr float k1 = kGeluCubic;
  const auto& xv = x.value().array();
  Eigen::ArrayXXf t = (k0 * (xv + k1 * xv.cube())).tanh();
  Matrix out = (0.5f * xv * (1.0f + t)).matrix();
  auto tanh_part = std::make_shared<Eigen::ArrayXXf>(std::move(t));
  return make_result(std::move(out), {x}, [tanh_part](Node& self) {
    const auto& xv = parent(self, 0).value.array();
    const auto& t = *tanh_part;
    constexpr float k0 = kGeluScale;
    constexpr float k1 = kGeluCubic;
    const auto dy =
        0.5f * (1.0f + t) + 0.5f * xv * (1.0f - t.square()) * k0 * (1.0f + 3.0f * k1 * xv.square());
    acc(parent(self, 0), (self.grad.array() * dy).matrix());
  });
}

Var relu(const Var& x) {
  Matrix out = x.value().cwiseMax(0.0f);
  return make_result(std::move(out), {x}, [](Node& self) {
    const auto& xv = parent(self, 0).value.array();
    acc(parent(self, 0), (xv > 0.0f).select(self.grad.array(), 0.0f).matrix());
  });
}

Var leaky_relu(const Var& x, float slope) {
  const auto& xv = x.value().array();
  Matrix out = (xv > 0.0f).select(xv, slope * xv).matrix();
  return make_result(std::move(out), {x}, [slope](Node& self) {
    const auto& xv = parent(self, 0).value.array();
    acc(parent(self, 0),
        (xv > 0.0f).select(self.grad.array(), slope * self.grad.array()).matrix());
  });
}

Var sigmoid(const Var& x) {
  Matrix out = (1.0f / (1.0f + (-x.value().array()).exp())).matrix();
  return make_result(std::move(out), {x}, [](Node& self) {
    const auto& y = self.value.array();
    acc(parent(self, 0), (self.grad.array() * y * (1.0f - y)).matrix());
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps) {
  const Index C = x.cols();
  require(gamma.rows() == 1 && gamma.cols() == C && beta.rows() == 1 && beta.cols() == C,
          "layer_norm: bad affine shape");
  const auto& xv = x.value();
  auto xhat = std::make_shared<Matrix>(xv.rows(), C);
  auto inv = std::make_shared<Eigen::VectorXf>(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const float mean = xv.row(r).mean();
    const float var = (xv.row(r).array() - mean).square().mean();
    const float is = 1.0f / std::sqrt(var + eps);
    (*inv)[r] = is;
    xhat->row(r) = (xv.row(r).array() - mean) * is;
  }
  Matrix out = xhat->array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  return make_result(std::move(out), {x, gamma, beta}, [xhat, inv, C](Node& self) {
    const Matrix& g = self.grad;
    if (needs(self, 1)) acc(parent(self, 1), g.cwiseProduct(*xhat).colwise().sum());
    if (needs(self, 2)) acc(parent(self, 2), g.colwise().sum());
    if (!needs(self, 0)) return;
    const auto gam = parent(self, 1).value.row(0).array();
    Matrix dxhat = g.array().rowwise() * gam;
    const Eigen::VectorXf m1 = dxhat.rowwise().mean();
    const Eigen::VectorXf m2 = dxhat.cwiseProduct(*xhat).rowwise().mean();
    Matrix dx = dxhat;
    dx.colwise() -= m1;
    dx -= (xhat->array().colwise() * m2.array()).matrix();
    dx = dx.array().colwise() * inv->array();
    acc(parent(self, 0), dx);
    (void)C;
  });
}

// --- structural ----------------------------------------------------------

Var gather_rows(const Var& x, IndexList index) {
  const auto& idx = *index;
  const Index C = x.cols();
  Matrix out(Index(idx.size()), C);
  for (Index r = 0; r < Index(idx.size()); ++r) {
    if (idx[r] < 0)
      out.row(r).setZero();
    else
      out.row(r) = x.value().row(idx[r]);
  }
  return make_result(std::move(out), {x}, [index](Node& self) {
    const auto& idx = *index;
    Matrix& dx = parent(self, 0).grad_buffer();
    for (Index r = 0; r < Index(idx.size()); ++r)
      if (idx[r] >= 0) dx.row(idx[r]) += self.grad.row(r);
  });
}

Var reshape(const Var& x, Index rows, Index cols) {
  require(rows * cols == x.value().size(), "reshape: element count differs");
  Matrix out = Eigen::Map<const Matrix>(x.value().data(), rows, cols);
  return make_result(std::move(out), {x}, [](Node& self) {
    Node& X = parent(self, 0);
    acc(X, Eigen::Map<const Matrix>(self.grad.data(), X.value.rows(), X.value.cols()));
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: nothing to concatenate");
  Index cols = 0;
  for (const Var& p : parts) {
    require(p.rows() == parts[0].rows(), "concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix out(parts[0].rows(), cols);
  Index c = 0;
  for (const Var& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return make_result(std::move(out), parts, [](Node& self) {
    Index c = 0;
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      const Index w = self.parents[i]->value.cols();
      if (needs(self, i)) acc(parent(self, i), self.grad.middleCols(c, w));
      c += w;
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: nothing to concatenate");
  Index rows = 0;
  for (const Var& p : parts) {
    require(p.cols() == parts[0].cols(), "concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix out(rows, parts[0].cols());
  Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return make_result(std::move(out), parts, [](Node& self) {
    Index r = 0;
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      const Index h = self.parents[i]->value.rows();
      if (needs(self, i)) acc(parent(self, i), self.grad.middleRows(r, h));
      r += h;
    }
  });
}

Var slice_rows(const Var& x, Index start, Index count) {
  require(start >= 0 && start + count <= x.rows(), "slice_rows: out of range");
  return make_result(x.value().middleRows(start, count), {x}, [start, count](Node& self) {
    parent(self, 0).grad_buffer().middleRows(start, count) += self.grad;
  });
}

Var slice_cols(const Var& x, Index start, Index count) {
  require(start >= 0 && start + count <= x.cols(), "slice_cols: out of range");
  return make_result(x.value().middleCols(start, count), {x}, [start, count](Node& self) {
    parent(self, 0).grad_buffer().middleCols(start, count) += self.grad;
  });
}

Var scalar_with_grad(const std::vector<Var>& inputs, float value, std::vector<Matrix> grads) {
  require(inputs.size() == grads.size(), "scalar_with_grad: one gradient per input");
  Matrix out(1, 1);
  out(0, 0) = value;
  auto g = std::make_shared<std::vector<Matrix>>(std::move(grads));
  return make_result(std::move(out), inputs, [g](Node& self) {
    const float up = self.grad(0, 0);
    for (std::size_t i = 0; i < self.parents.size(); ++i)
      if (needs(self, i)) acc(parent(self, i), (*g)[i] * up);
  });
}

// --- attention -----------------------------------------------------------

Var attention(const Var& q, const Var& k, const Var& v, int heads, Index group_q, Index group_k,
              const AttentionBias* bias, IndexList regions) {
  const Index C = q.cols();
  require(heads > 0 && C % heads == 0, "attention: channels not divisible by heads");
  require(k.cols() == C && v.cols() == C, "attention: q/k/v widths differ");
  require(group_q > 0 && group_k > 0 && q.rows() % group_q == 0, "attention: bad grouping");
  const Index groups = q.rows() / group_q;
  require(k.rows() == groups * group_k && v.rows() == k.rows(), "attention: group counts differ");
  require(!regions || group_q == group_k, "attention: regions need square groups");
  const Index dh = C / heads;
  const float sc = 1.0f / std::sqrt(float(dh));

  // Dense per-head bias, shared by every group.
  std::vector<Matrix> dense_bias;
  if (bias) {
    const auto& table = bias->table.value();
    const auto& idx = *bias->index;
    require(Index(idx.size()) == group_q * group_k, "attention: bias index size mismatch");
    require(table.cols() == heads, "attention: bias table needs one column per head");
    dense_bias.assign(heads, Matrix(group_q, group_k));
    for (int h = 0; h < heads; ++h)
      for (Index i = 0; i < group_q; ++i)
        for (Index j = 0; j < group_k; ++j) dense_bias[h](i, j) = table(idx[i * group_k + j], h);
  }

  auto probs = std::make_shared<Matrix>(groups * heads * group_q, group_k);
  Matrix out(q.rows(), C);
  const Matrix& qv = q.value();
  const Matrix& kv = k.value();
  const Matrix& vv = v.value();
  Matrix mask;
  for (Index g = 0; g < groups; ++g) {
    bool masked = false;
    if (regions) {
      const auto& reg = *regions;
      mask.setZero(group_q, group_k);
      for (Index i = 0; i < group_q; ++i)
        for (Index j = 0; j < group_k; ++j)
          if (reg[g * group_q + i] != reg[g * group_k + j]) {
            mask(i, j) = -100.0f;
            masked = true;
          }
    }
    for (int h = 0; h < heads; ++h) {
      auto S = probs->middleRows((g * heads + h) * group_q, group_q);
      S.noalias() = qv.block(g * group_q, h * dh, group_q, dh) *
                    kv.block(g * group_k, h * dh, group_k, dh).transpose();
      S *= sc;
      if (bias) S += dense_bias[h];
      if (masked) S += mask;
      for (Index i = 0; i < group_q; ++i) {
        auto row = S.row(i).array();
        row = (row - row.maxCoeff()).exp();
        row /= row.sum();
      }
      out.block(g * group_q, h * dh, group_q, dh).noalias() =
          S * vv.block(g * group_k, h * dh, group_k, dh);
    }
  }

  std::vector<Var> parents{q, k, v};
  if (bias) parents.push_back(bias->table);
  IndexList bias_index = bias ? bias->index : IndexList{};
  return make_result(
      std::move(out), parents,
      [probs, heads, groups, group_q, group_k, dh, sc, bias_index](Node& self) {
        const Matrix& qv = parent(self, 0).value;
        const Matrix& kv = parent(self, 1).value;
        const Matrix& vv = parent(self, 2).value;
        const bool dq = needs(self, 0), dk = needs(self, 1), dv = needs(self, 2);
        const bool db = self.parents.size() > 3 && needs(self, 3);
        Matrix* gq = dq ? &parent(self, 0).grad_buffer() : nullptr;
        Matrix* gk = dk ? &parent(self, 1).grad_buffer() : nullptr;
        Matrix* gv = dv ? &parent(self, 2).grad_buffer() : nullptr;
        std::vector<Matrix> bias_acc;
        if (db) bias_acc.assign(heads, Matrix::Zero(group_q, group_k));
        Matrix dP, dS;
        for (Index g = 0; g < groups; ++g)
          for (int h = 0; h < heads; ++h) {
            const auto P = probs->middleRows((g * heads + h) * group_q, group_q);
            const auto dO = self.grad.block(g * group_q, h * dh, group_q, dh);
            const auto V = vv.block(g * group_k, h * dh, group_k, dh);
            if (dv) gv->block(g * group_k, h * dh, group_k, dh).noalias() += P.transpose() * dO;
            dP.noalias() = dO * V.transpose();
            const Eigen::VectorXf rs = dP.cwiseProduct(P).rowwise().sum();
            dS = P.cwiseProduct(dP.colwise() - rs);
            if (db) bias_acc[h] += dS;
            if (dq)
              gq->block(g * group_q, h * dh, group_q, dh).noalias() +=
                  (dS * kv.block(g * group_k, h * dh, group_k, dh)) * sc;
            if (dk)
              gk->block(g * group_k, h * dh, group_k, dh).noalias() +=
                  (dS.transpose() * qv.block(g * group_q, h * dh, group_q, dh)) * sc;
          }
        if (db) {
          Matrix& gt = parent(self, 3).grad_buffer();
          const auto& idx = *bias_index;
          for (int h = 0; h < heads; ++h)
            for (Index i = 0; i < group_q; ++i)
              for (Index j = 0; j < group_k; ++j) gt(idx[i * group_k + j], h) += bias_acc[h](i, j);
        }
      });
}

// --- volumetric ----------------------------------------------------------

Extent3 ConvGeometry::output(const Extent3& in) const {
  auto dim = [&](int n) { return (n + 2 * padding - kernel) / stride + 1; };
  Extent3 out{dim(in.h), dim(in.w), dim(in.d)};
  if (out.h < 1 || out.w < 1 || out.d < 1 || kernel < 1 || stride < 1)
    throw ShapeError("conv3d: input too small for kernel");
  return out;
}

namespace {

struct ConvPlan {
  Extent3 in, out;
  ConvGeometry geom;
  Index cin = 0;
  Index chunk = 0;

  // Fills cols (n x k^3*cin) for output rows [r0, r0 + n).
  void im2col(const Matrix& x, Index r0, Index n, Matrix& cols) const {
    const int k = geom.kernel;
    cols.resize(n, Index(k) * k * k * cin);
    for (Index r = 0; r < n; ++r) {
      const Voxel o = out.voxel(r0 + r);
      Index col = 0;
      for (int a = 0; a < k; ++a) {
        const int si = o[0] * geom.stride + a - geom.padding;
        for (int b = 0; b < k; ++b) {
          const int sj = o[1] * geom.stride + b - geom.padding;
          for (int c = 0; c < k; ++c, col += cin) {
            const int sk = o[2] * geom.stride + c - geom.padding;
            if (si < 0 || si >= in.h || sj < 0 || sj >= in.w || sk < 0 || sk >= in.d)
              cols.row(r).segment(col, cin).setZero();
            else
              cols.row(r).segment(col, cin) = x.row(in.offset(si, sj, sk));
          }
        }
      }
    }
  }

  void col2im(const Matrix& dcols, Index r0, Matrix& dx) const {
    const int k = geom.kernel;
    for (Index r = 0; r < dcols.rows(); ++r) {
      const Voxel o = out.voxel(r0 + r);
      Index col = 0;
      for (int a = 0; a < k; ++a) {
        const int si = o[0] * geom.stride + a - geom.padding;
        for (int b = 0; b < k; ++b) {
          const int sj = o[1] * geom.stride + b - geom.padding;
          for (int c = 0; c < k; ++c, col += cin) {
            const int sk = o[2] * geom.stride + c - geom.padding;
            if (si < 0 || si >= in.h || sj < 0 || sj >= in.w || sk < 0 || sk >= in.d) continue;
            dx.row(in.offset(si, sj, sk)) += dcols.row(r).segment(col, cin);
          }
        }
      }
    }
  }
};

}  // namespace

Var conv3d(const Var& x, const Extent3& in, const Var& weight, const Var& bias,
           const ConvGeometry& geom) {
  require(x.rows() == in.count(), "conv3d: row count does not match extent");
  ConvPlan plan;
  plan.in = in;
  plan.out = geom.output(in);
  plan.geom = geom;
  plan.cin = x.cols();
  const Index taps = Index(geom.kernel) * geom.kernel * geom.kernel * plan.cin;
  require(weight.rows() == taps, "conv3d: weight rows must be k^3 * Cin");
  const Index nout = plan.out.count();
  plan.chunk = std::max<Index>(1, std::min<Index>(nout, (Index(1) << 21) / taps));

  Matrix y(nout, weight.cols());
  Matrix cols;
  for (Index r0 = 0; r0 < nout; r0 += plan.chunk) {
    const Index n = std::min(plan.chunk, nout - r0);
    plan.im2col(x.value(), r0, n, cols);
    y.middleRows(r0, n).noalias() = cols * weight.value();
  }
  std::vector<Var> parents{x, weight};
  if (bias.defined()) {
    require(bias.rows() == 1 && bias.cols() == weight.cols(), "conv3d: bad bias shape");
    y.rowwise() += bias.value().row(0);
    parents.push_back(bias);
  }
  return make_result(std::move(y), parents, [plan](Node& self) {
    const Matrix& xv = parent(self, 0).value;
    const Matrix& wv = parent(self, 1).value;
    const bool dx = needs(self, 0), dw = needs(self, 1);
    if (self.parents.size() > 2 && needs(self, 2))
      acc(parent(self, 2), self.grad.colwise().sum());
    if (!dx && !dw) return;
    Matrix* gx = dx ? &parent(self, 0).grad_buffer() : nullptr;
    Matrix* gw = dw ? &parent(self, 1).grad_buffer() : nullptr;
    const Index nout = plan.out.count();
    Matrix cols, dcols;
    for (Index r0 = 0; r0 < nout; r0 += plan.chunk) {
      const Index n = std::min(plan.chunk, nout - r0);
      const auto g = self.grad.middleRows(r0, n);
      if (dw) {
        plan.im2col(xv, r0, n, cols);
        gw->noalias() += cols.transpose() * g;
      }
      if (dx) {
        dcols.noalias() = g * wv.transpose();
        plan.col2im(dcols, r0, *gx);
      }
    }
  });
}

Var conv_transpose2(const Var& x, const Extent3& in, const Var& weight, const Var& bias) {
  require(x.rows() == in.count(), "conv_transpose2: row count does not match extent");
  require(weight.rows() == x.cols() && weight.cols() % 8 == 0, "conv_transpose2: bad weight");
  const Index cout = weight.cols() / 8;
  const Extent3 out{in.h * 2, in.w * 2, in.d * 2};
  Matrix lin;
  lin.noalias() = x.value() * weight.value();
  Matrix y(out.count(), cout);
  for (int i = 0; i < in.h; ++i)
    for (int j = 0; j < in.w; ++j)
      for (int k = 0; k < in.d; ++k) {
        const Index r = in.offset(i, j, k);
        for (int s = 0; s < 8; ++s)
          y.row(out.offset(2 * i + (s >> 2), 2 * j + ((s >> 1) & 1), 2 * k + (s & 1))) =
              lin.row(r).segment(s * cout, cout);
      }
  std::vector<Var> parents{x, weight};
  if (bias.defined()) {
    require(bias.rows() == 1 && bias.cols() == cout, "conv_transpose2: bad bias shape");
    y.rowwise() += bias.value().row(0);
    parents.push_back(bias);
  }
  return make_result(std::move(y), parents, [in, out, cout](Node& self) {
    if (self.parents.size() > 2 && needs(self, 2))
      acc(parent(self, 2), self.grad.colwise().sum());
    Matrix dlin(in.count(), 8 * cout);
    for (int i = 0; i < in.h; ++i)
      for (int j = 0; j < in.w; ++j)
        for (int k = 0; k < in.d; ++k) {
          const Index r = in.offset(i, j, k);
          for (int s = 0; s < 8; ++s)
            dlin.row(r).segment(s * cout, cout) =
                self.grad.row(out.offset(2 * i + (s >> 2), 2 * j + ((s >> 1) & 1), 2 * k + (s & 1)));
        }
    if (needs(self, 0)) acc(parent(self, 0), dlin * parent(self, 1).value.transpose());
    if (needs(self, 1)) acc(parent(self, 1), parent(self, 0).value.transpose() * dlin);
  });
}

namespace {

struct Taps {
  std::vector<int> i0, i1;
  std::vector<float> w1;
};

Taps linear_taps(int in, int out) {
  Taps t;
  const double ratio = double(in) / double(out);
  for (int o = 0; o < out; ++o) {
    double src = std::max(0.0, (o + 0.5) * ratio - 0.5);
    int lo = std::min(int(std::floor(src)), in - 1);
    t.i0.push_back(lo);
    t.i1.push_back(std::min(lo + 1, in - 1));
    t.w1.push_back(float(src - lo));
  }
  return t;
}

// Dimensions before/after `axis` in row-major (H, W, D) order.
void axis_split(const Extent3& e, int axis, Index& outer, Index& inner) {
  outer = axis == 0 ? 1 : (axis == 1 ? e.h : Index(e.h) * e.w);
  inner = axis == 0 ? Index(e.w) * e.d : (axis == 1 ? e.d : 1);
}

Matrix interp_axis(const Matrix& x, const Extent3& e, int axis, int n) {
  const int nin = e[axis];
  Index outer, inner;
  axis_split(e, axis, outer, inner);
  const Taps t = linear_taps(nin, n);
  Matrix y(outer * n * inner, x.cols());
  for (Index o = 0; o < outer; ++o)
    for (int p = 0; p < n; ++p) {
      const float w1 = t.w1[p];
      y.middleRows((o * n + p) * inner, inner) =
          (1.0f - w1) * x.middleRows((o * nin + t.i0[p]) * inner, inner) +
          w1 * x.middleRows((o * nin + t.i1[p]) * inner, inner);
    }
  return y;
}

// Adjoint of interp_axis: e is the extent before interpolation.
Matrix interp_axis_adjoint(const Matrix& dy, const Extent3& e, int axis, int n) {
  const int nin = e[axis];
  Index outer, inner;
  axis_split(e, axis, outer, inner);
  const Taps t = linear_taps(nin, n);
  Matrix dx = Matrix::Zero(e.count(), dy.cols());
  for (Index o = 0; o < outer; ++o)
    for (int p = 0; p < n; ++p) {
      const float w1 = t.w1[p];
      const auto g = dy.middleRows((o * n + p) * inner, inner);
      dx.middleRows((o * nin + t.i0[p]) * inner, inner) += (1.0f - w1) * g;
      dx.middleRows((o * nin + t.i1[p]) * inner, inner) += w1 * g;
    }
  return dx;
}

Extent3 with_axis(Extent3 e, int axis, int n) {
  (axis == 0 ? e.h : (axis == 1 ? e.w : e.d)) = n;
  return e;
}

}  // namespace

Var resize_trilinear(const Var& x, const Extent3& in, const Extent3& out) {
  require(x.rows() == in.count(), "resize_trilinear: row count does not match extent");
  if (in == out) return make_result(x.value(), {x}, [](Node& self) { acc(parent(self, 0), self.grad); });
  const Extent3 e1 = with_axis(in, 0, out.h);
  const Extent3 e2 = with_axis(e1, 1, out.w);
  Matrix y = interp_axis(interp_axis(interp_axis(x.value(), in, 0, out.h), e1, 1, out.w), e2, 2,
                         out.d);
  return make_result(std::move(y), {x}, [in, e1, e2, out](Node& self) {
    Matrix g = interp_axis_adjoint(self.grad, e2, 2, out.d);
    g = interp_axis_adjoint(g, e1, 1, out.w);
    acc(parent(self, 0), interp_axis_adjoint(g, in, 0, out.h));
  });
}

}  // namespace sat3d::nn
