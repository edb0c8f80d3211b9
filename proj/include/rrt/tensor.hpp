#pragma once

#include <cstdint>
#include <vector>

#include "rrt/error.hpp"

namespace rrt {

// Dense row-major float32 tensor. All reductions inside operations accumulate
// in float64 and round once on store, so results are reproducible and
// independent of traversal order.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(std::vector<int64_t> shape_, float fill = 0.0f);
    Tensor(std::vector<int64_t> shape_, std::vector<float> data_);

    int64_t numel() const;
    int64_t ndim() const { return static_cast<int64_t>(shape.size()); }

    // 2-D accessors; throw ShapeError when the tensor is not 2-D.
    int64_t rows() const;
    int64_t cols() const;
    float& at(int64_t i, int64_t j);
    float at(int64_t i, int64_t j) const;

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    bool all_finite() const;
};

// Rank-r factorization of a matrix: m ~= u * diag(sigma) * v^T.
// u is [d x r] with orthonormal columns, sigma holds non-negative singular
// values sorted descending, v is [k x r] with orthonormal columns.
struct SvdFactors {
    Tensor u;
    Tensor sigma;  // [r]
    Tensor v;
};

// [m x n] * [n x p] -> [m x p], float64 accumulation per output element.
Tensor matmul(const Tensor& a, const Tensor& b);

// [m x n] -> [n x m].
Tensor transpose(const Tensor& a);

// Elementwise a + b (shapes must match).
Tensor add(const Tensor& a, const Tensor& b);

// Elementwise a - b (shapes must match).
Tensor sub(const Tensor& a, const Tensor& b);

// Elementwise scale.
Tensor scale(const Tensor& a, float s);

// Row-wise softmax of a 2-D tensor. Each row has its max subtracted before
// exponentiation; exp/sum run in float64. Rows containing the -inf sentinel
// (most-negative finite float) get ~0 probability at those entries; a row of
// all sentinels would divide by zero, so at least one entry per row must be
// unmasked.
Tensor softmax_rows(const Tensor& scores);

// The additive mask value used for disallowed attention positions.
float neg_inf_sentinel();

// y[i] = gamma[i] * x[i] / sqrt(mean(x^2) + eps), row-wise over the last axis
// of a 2-D tensor; mean accumulates in float64. gamma is [cols].
Tensor rms_norm(const Tensor& x, const Tensor& gamma, float eps);

// Exact-erf GELU: x * 0.5 * (1 + erf(x / sqrt(2))), elementwise.
Tensor gelu(const Tensor& x);

// Frobenius norm, float64 accumulation.
double frobenius_norm(const Tensor& a);

// Max absolute elementwise difference (shapes must match).
double max_abs_diff(const Tensor& a, const Tensor& b);

// Index of the largest entry in one row of a 2-D tensor; ties resolve to the
// lowest index.
int64_t row_argmax(const Tensor& m, int64_t row);

// Rank-r truncated SVD of a 2-D tensor via one-sided Jacobi rotations:
// cyclic column sweeps, converged when every off-diagonal column dot product
// falls below 1e-10 * ||m||_F, hard cap 60 sweeps (ConvergenceError past the
// cap, reporting the residual). Deterministic sign convention: each u column
// is flipped so its largest-magnitude entry (lowest index on ties) is
// non-negative, with v compensating. Requires 0 <= r <= min(rows, cols);
// violations raise ArgumentError. Zero singular directions get deterministic
// orthonormal completion columns so u/v invariants hold at any requested r.
SvdFactors truncated_svd(const Tensor& m, int64_t r);

}  // namespace rrt
