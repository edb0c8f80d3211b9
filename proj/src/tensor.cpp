#include "rrt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <string>

namespace rrt {

namespace {

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t extent : shape) {
        if (extent < 0) throw ShapeError("negative extent in tensor shape");
        n *= extent;
    }
    return n;
}

std::string shape_str(const Tensor& t) {
    std::string s = "[";
    for (size_t i = 0; i < t.shape.size(); ++i) {
        if (i) s += " x ";
        s += std::to_string(t.shape[i]);
    }
    return s + "]";
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace

Tensor::Tensor(std::vector<int64_t> shape_, float fill)
    : shape(std::move(shape_)), data(static_cast<size_t>(shape_numel(shape)), fill) {}

Tensor::Tensor(std::vector<int64_t> shape_, std::vector<float> data_)
    : shape(std::move(shape_)), data(std::move(data_)) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
        throw ShapeError("tensor data size does not match shape " + shape_str(*this));
}

int64_t Tensor::numel() const {
    return static_cast<int64_t>(data.size());
}

int64_t Tensor::rows() const {
    if (ndim() != 2) throw ShapeError("expected 2-D tensor, got " + shape_str(*this));
    return shape[0];
}

int64_t Tensor::cols() const {
    if (ndim() != 2) throw ShapeError("expected 2-D tensor, got " + shape_str(*this));
    return shape[1];
}

float& Tensor::at(int64_t i, int64_t j) {
    return data[static_cast<size_t>(i * cols() + j)];
}

float Tensor::at(int64_t i, int64_t j) const {
    return data[static_cast<size_t>(i * cols() + j)];
}

bool Tensor::all_finite() const {
    for (float x : data)
        if (!std::isfinite(x)) return false;
    return true;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    const int64_t m = a.rows(), n = a.cols(), p = b.cols();
    if (b.rows() != n)
        throw ShapeError("matmul: inner extents differ, " + shape_str(a) + " * " + shape_str(b));
    Tensor out({m, p});
    for (int64_t i = 0; i < m; ++i) {
        const float* arow = a.data.data() + i * n;
        for (int64_t j = 0; j < p; ++j) {
            double acc = 0.0;
            for (int64_t k = 0; k < n; ++k)
                acc += static_cast<double>(arow[k]) * static_cast<double>(b.data[k * p + j]);
            out.data[i * p + j] = static_cast<float>(acc);
        }
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    const int64_t m = a.rows(), n = a.cols();
    Tensor out({n, m});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j)
            out.data[j * m + i] = a.data[i * n + j];
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.data[i];
    return out;
}

Tensor scale(const Tensor& a, float s) {
    Tensor out = a;
    for (float& x : out.data) x *= s;
    return out;
}

float neg_inf_sentinel() {
    return -std::numeric_limits<float>::max();
}

Tensor softmax_rows(const Tensor& scores) {
    const int64_t m = scores.rows(), n = scores.cols();
    if (n == 0) throw ShapeError("softmax_rows: empty rows");
    Tensor out({m, n});
    std::vector<double> e(static_cast<size_t>(n));
    for (int64_t i = 0; i < m; ++i) {
        const float* row = scores.data.data() + i * n;
        double mx = row[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double sum = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            e[j] = std::exp(static_cast<double>(row[j]) - mx);
            sum += e[j];
        }
        for (int64_t j = 0; j < n; ++j)
            out.data[i * n + j] = static_cast<float>(e[j] / sum);
    }
    return out;
}

Tensor rms_norm(const Tensor& x, const Tensor& gamma, float eps) {
    const int64_t m = x.rows(), n = x.cols();
    if (gamma.numel() != n)
        throw ShapeError("rms_norm: gamma has " + std::to_string(gamma.numel()) +
                         " elements, expected " + std::to_string(n));
    Tensor out({m, n});
    for (int64_t i = 0; i < m; ++i) {
        double sq = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            double v = x.data[i * n + j];
            sq += v * v;
        }
        const double inv = 1.0 / std::sqrt(sq / static_cast<double>(n) + static_cast<double>(eps));
        for (int64_t j = 0; j < n; ++j)
            out.data[i * n + j] = static_cast<float>(
                static_cast<double>(gamma.data[j]) * static_cast<double>(x.data[i * n + j]) * inv);
    }
    return out;
}

Tensor gelu(const Tensor& x) {
    Tensor out = x;
    for (float& v : out.data) {
        const double d = v;
        v = static_cast<float>(d * 0.5 * (1.0 + std::erf(d / std::sqrt(2.0))));
    }
    return out;
}

double frobenius_norm(const Tensor& a) {
    double sq = 0.0;
    for (float x : a.data) sq += static_cast<double>(x) * static_cast<double>(x);
    return std::sqrt(sq);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double mx = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i)
        mx = std::max(mx, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
    return mx;
}

int64_t row_argmax(const Tensor& m, int64_t row) {
    const int64_t n = m.cols();
    if (row < 0 || row >= m.rows())
        throw ArgumentError("row_argmax: row " + std::to_string(row) + " out of range");
    const float* r = m.data.data() + row * n;
    int64_t best = 0;
    for (int64_t j = 1; j < n; ++j)
        if (r[j] > r[best]) best = j;
    return best;
}

namespace {

// One-sided Jacobi working state: columns of w converge to u_i * sigma_i while
// v accumulates the applied rotations starting from identity.
struct JacobiState {
    int64_t d, k;
    std::vector<double> w;  // d x k, column j at w[j*d .. j*d+d)
    std::vector<double> v;  // k x k, same layout
};

double column_dot(const std::vector<double>& a, int64_t d, int64_t i, int64_t j) {
    const double* ci = a.data() + i * d;
    const double* cj = a.data() + j * d;
    double acc = 0.0;
    for (int64_t t = 0; t < d; ++t) acc += ci[t] * cj[t];
    return acc;
}

void rotate_columns(std::vector<double>& a, int64_t d, int64_t i, int64_t j, double c, double s) {
    double* ci = a.data() + i * d;
    double* cj = a.data() + j * d;
    for (int64_t t = 0; t < d; ++t) {
        const double x = ci[t], y = cj[t];
        ci[t] = c * x - s * y;
        cj[t] = s * x + c * y;
    }
}

}  // namespace

SvdFactors truncated_svd(const Tensor& m, int64_t r) {
    const int64_t d = m.rows(), k = m.cols();
    const int64_t full = std::min(d, k);
    if (r < 0 || r > full)
        throw ArgumentError("truncated_svd: rank " + std::to_string(r) +
                            " outside [0, " + std::to_string(full) + "] for " +
                            std::to_string(d) + " x " + std::to_string(k) + " input");
    if (!m.all_finite()) throw ArgumentError("truncated_svd: input has non-finite entries");

    JacobiState st;
    st.d = d;
    st.k = k;
    st.w.assign(static_cast<size_t>(d * k), 0.0);
    st.v.assign(static_cast<size_t>(k * k), 0.0);
    for (int64_t i = 0; i < d; ++i)
        for (int64_t j = 0; j < k; ++j)
            st.w[j * d + i] = m.data[i * k + j];
    for (int64_t j = 0; j < k; ++j) st.v[j * k + j] = 1.0;

    const double threshold = 1e-10 * frobenius_norm(m);
    constexpr int kMaxSweeps = 60;
    double worst = 0.0;
    bool converged = false;
    for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
        worst = 0.0;
        for (int64_t i = 0; i < k - 1; ++i) {
            for (int64_t j = i + 1; j < k; ++j) {
                const double g = column_dot(st.w, d, i, j);
                worst = std::max(worst, std::abs(g));
                if (std::abs(g) <= threshold) continue;
                const double a = column_dot(st.w, d, i, i);
                const double b = column_dot(st.w, d, j, j);
                const double zeta = (b - a) / (2.0 * g);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                rotate_columns(st.w, d, i, j, c, s);
                rotate_columns(st.v, k, i, j, c, s);
            }
        }
        converged = worst <= threshold;
    }
    if (!converged)
        throw ConvergenceError("truncated_svd: one-sided Jacobi did not converge in " +
                               std::to_string(kMaxSweeps) + " sweeps (worst off-diagonal " +
                               std::to_string(worst) + ")", worst);

    std::vector<double> norms(static_cast<size_t>(k));
    for (int64_t j = 0; j < k; ++j) norms[j] = std::sqrt(column_dot(st.w, d, j, j));
    std::vector<int64_t> order(static_cast<size_t>(k));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int64_t a, int64_t b) { return norms[a] > norms[b]; });

    const double sigma_max = k > 0 ? norms[order[0]] : 0.0;
    const double degenerate = 1e-9 * sigma_max;  // below this a direction is numerical noise

    SvdFactors out;
    out.u = Tensor({d, r});
    out.sigma = Tensor({r});
    out.v = Tensor({k, r});

    // Columns of u built so far, kept in float64 for the orthonormal completion.
    std::vector<std::vector<double>> ucols;
    ucols.reserve(static_cast<size_t>(r));
    for (int64_t jr = 0; jr < r; ++jr) {
        const int64_t src = order[jr];
        const double sigma = norms[src];
        std::vector<double> ucol(static_cast<size_t>(d));
        if (sigma > degenerate && sigma > 0.0) {
            for (int64_t t = 0; t < d; ++t) ucol[t] = st.w[src * d + t] / sigma;
        } else {
            // Deterministic completion: first canonical basis vector that keeps a
            // sizable component after projecting out the columns already chosen.
            bool found = false;
            for (int64_t cand = 0; cand < d && !found; ++cand) {
                std::vector<double> e(static_cast<size_t>(d), 0.0);
                e[cand] = 1.0;
                for (const auto& prev : ucols) {
                    double dot = 0.0;
                    for (int64_t t = 0; t < d; ++t) dot += prev[t] * e[t];
                    for (int64_t t = 0; t < d; ++t) e[t] -= dot * prev[t];
                }
                double nrm = 0.0;
                for (double x : e) nrm += x * x;
                nrm = std::sqrt(nrm);
                if (nrm > 0.5) {
                    for (int64_t t = 0; t < d; ++t) ucol[t] = e[t] / nrm;
                    found = true;
                }
            }
            if (!found)
                throw ConvergenceError("truncated_svd: failed to complete orthonormal basis", sigma);
        }

        // Sign convention: largest-|entry| of the u column (lowest index on ties)
        // made non-negative; v flips with it so the product is unchanged.
        int64_t arg = 0;
        for (int64_t t = 1; t < d; ++t)
            if (std::abs(ucol[t]) > std::abs(ucol[arg])) arg = t;
        const double flip = ucol[arg] < 0.0 ? -1.0 : 1.0;
        for (int64_t t = 0; t < d; ++t) ucol[t] *= flip;

        for (int64_t t = 0; t < d; ++t) out.u.data[t * r + jr] = static_cast<float>(ucol[t]);
        out.sigma.data[jr] = static_cast<float>(sigma);
        for (int64_t t = 0; t < k; ++t)
            out.v.data[t * r + jr] = static_cast<float>(flip * st.v[src * k + t]);
        ucols.push_back(std::move(ucol));
    }
    return out;
}

}  // namespace rrt
