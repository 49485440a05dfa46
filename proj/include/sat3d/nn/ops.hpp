#pragma once

#include <memory>
#include <vector>

#include "sat3d/grid.hpp"
#include "sat3d/nn/tensor.hpp"

namespace sat3d::nn {

using IndexList = std::shared_ptr<const std::vector<int>>;

// --- dense algebra -------------------------------------------------------
Var matmul(const Var& a, const Var& b);
// x * weight (+ bias row), weight stored as (in x out).
Var linear(const Var& x, const Var& weight, const Var& bias = {});
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, float s);
Var add_row(const Var& x, const Var& row);          // broadcast a 1 x C row over x
Var broadcast_rows(const Var& row, Index rows);     // 1 x C -> rows x C
Var sum_all(const Var& x);                          // -> 1 x 1
Var mean_all(const Var& x);                         // -> 1 x 1
Var detach(const Var& x);

// --- activations and normalisation ---------------------------------------
Var gelu(const Var& x);  // tanh approximation
Var relu(const Var& x);
Var leaky_relu(const Var& x, float slope);
Var sigmoid(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps = 1e-5f);

// --- structural ----------------------------------------------------------
// out.row(r) = x.row(index[r]); index -1 yields a zero row.
Var gather_rows(const Var& x, IndexList index);
Var reshape(const Var& x, Index rows, Index cols);  // row-major data preserved
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(const Var& x, Index start, Index count);
Var slice_cols(const Var& x, Index start, Index count);

// --- attention -----------------------------------------------------------
struct AttentionBias {
  Var table;        // entries x heads
  IndexList index;  // group_q * group_k entries into table rows
};

// Multi-head scaled dot-product attention over independent groups of rows:
// group g attends rows [g*group_q, (g+1)*group_q) of q against rows
// [g*group_k, (g+1)*group_k) of k / v. Channels are split evenly over heads.
// `regions` (one id per row, only when group_q == group_k) masks pairs whose
// ids differ with a large negative logit, as in shifted-window attention.
Var attention(const Var& q, const Var& k, const Var& v, int heads, Index group_q, Index group_k,
              const AttentionBias* bias = nullptr, IndexList regions = {});

// --- volumetric ----------------------------------------------------------
struct ConvGeometry {
  int kernel = 3;
  int stride = 1;
  int padding = 1;
  Extent3 output(const Extent3& in) const;
};

// x: (H*W*D) x Cin, weight: (k^3 * Cin) x Cout with rows ordered by kernel
// offset (a, b, c) then input channel.
Var conv3d(const Var& x, const Extent3& in, const Var& weight, const Var& bias,
           const ConvGeometry& geom);

// Kernel-2, stride-2 transposed convolution. weight: Cin x (8 * Cout), column
// block s = (a*2 + b)*2 + c holds sub-voxel (a, b, c).
Var conv_transpose2(const Var& x, const Extent3& in, const Var& weight, const Var& bias);

// Trilinear resize with align_corners = false (half-pixel centres).
Var resize_trilinear(const Var& x, const Extent3& in, const Extent3& out);

// Scalar node with a precomputed gradient d(value)/d(input_i) for each input.
Var scalar_with_grad(const std::vector<Var>& inputs, float value, std::vector<Matrix> grads);

}  // namespace sat3d::nn
