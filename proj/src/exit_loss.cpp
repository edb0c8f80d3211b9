#include "rrt/exit_loss.hpp"

#include <cmath>

namespace rrt {

namespace {

// Softmax of one logit row in float64.
std::vector<double> softmax_row_f64(const Tensor& logits, int64_t row) {
    const int64_t n = logits.cols();
    std::vector<double> p(static_cast<size_t>(n));
    double mx = logits.at(row, 0);
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, static_cast<double>(logits.at(row, j)));
    double sum = 0.0;
    for (int64_t j = 0; j < n; ++j) {
        p[static_cast<size_t>(j)] = std::exp(static_cast<double>(logits.at(row, j)) - mx);
        sum += p[static_cast<size_t>(j)];
    }
    for (double& x : p) x /= sum;
    return p;
}

// sum_i p_i * ln(p_i / q_i) with 0 * log 0 := 0.
double kl_f64(const std::vector<double>& p, const std::vector<double>& q) {
    double acc = 0.0;
    for (size_t i = 0; i < p.size(); ++i)
        if (p[i] > 0.0) acc += p[i] * (std::log(p[i]) - std::log(q[i]));
    return acc;
}

void require_logit_stack(const std::vector<Tensor>& per_loop) {
    if (per_loop.empty()) throw ArgumentError("need at least one loop of logits");
    for (const Tensor& t : per_loop)
        if (!t.same_shape(per_loop.front()))
            throw ShapeError("per-loop logit tensors disagree on shape");
    if (per_loop.front().ndim() != 2) throw ShapeError("logits must be [seq x vocab]");
}

}  // namespace

std::vector<int64_t> oracle_exits(const std::vector<Tensor>& per_loop_logits) {
    require_logit_stack(per_loop_logits);
    const int64_t n_loops = static_cast<int64_t>(per_loop_logits.size());
    const int64_t seq = per_loop_logits.front().rows();
    std::vector<int64_t> exits(static_cast<size_t>(seq));
    for (int64_t t = 0; t < seq; ++t) {
        const int64_t final_pick = row_argmax(per_loop_logits[static_cast<size_t>(n_loops - 1)], t);
        for (int64_t b = 1; b <= n_loops; ++b) {
            if (row_argmax(per_loop_logits[static_cast<size_t>(b - 1)], t) == final_pick) {
                exits[static_cast<size_t>(t)] = b;
                break;
            }
        }
    }
    return exits;
}

CoeffScheme parse_coeff_scheme(const std::string& s) {
    if (s == "weighted") return CoeffScheme::weighted;
    if (s == "aggressive") return CoeffScheme::aggressive;
    throw ArgumentError("unknown coefficient scheme '" + s + "'");
}

std::string to_string(CoeffScheme scheme) {
    return scheme == CoeffScheme::weighted ? "weighted" : "aggressive";
}

std::vector<double> exit_coefficients(CoeffScheme scheme, int64_t n_loops,
                                      double aggressive_coeff) {
    if (n_loops < 1) throw ArgumentError("n_loops must be >= 1");
    std::vector<double> alpha(static_cast<size_t>(n_loops));
    switch (scheme) {
        case CoeffScheme::weighted: {
            const double denom = static_cast<double>(n_loops * (n_loops + 1)) / 2.0;
            for (int64_t i = 1; i <= n_loops; ++i)
                alpha[static_cast<size_t>(i - 1)] = static_cast<double>(i) / denom;
            break;
        }
        case CoeffScheme::aggressive: {
            if (!(aggressive_coeff >= 0.0) || !std::isfinite(aggressive_coeff))
                throw ArgumentError("aggressive coefficient must be finite and >= 0");
            for (int64_t i = 1; i < n_loops; ++i)
                alpha[static_cast<size_t>(i - 1)] = aggressive_coeff;
            alpha[static_cast<size_t>(n_loops - 1)] = 1.0;
            break;
        }
    }
    return alpha;
}

Divergence parse_divergence(const std::string& s) {
    if (s == "fkl") return Divergence::fkl;
    if (s == "rkl") return Divergence::rkl;
    if (s == "jsd") return Divergence::jsd;
    if (s == "tvd") return Divergence::tvd;
    throw ArgumentError("unknown divergence '" + s + "'");
}

std::string to_string(Divergence kind) {
    switch (kind) {
        case Divergence::fkl: return "fkl";
        case Divergence::rkl: return "rkl";
        case Divergence::jsd: return "jsd";
        case Divergence::tvd: return "tvd";
    }
    return "?";
}

double kd_divergence(const Tensor& teacher_logits, const Tensor& student_logits, Divergence kind) {
    if (!teacher_logits.same_shape(student_logits))
        throw ShapeError("kd_divergence: teacher and student logits must share a shape");
    if (teacher_logits.ndim() != 2) throw ShapeError("kd_divergence: logits must be [seq x vocab]");
    const int64_t rows = teacher_logits.rows();
    if (rows == 0) throw ArgumentError("kd_divergence: no rows");

    double acc = 0.0;
    for (int64_t t = 0; t < rows; ++t) {
        const std::vector<double> p = softmax_row_f64(teacher_logits, t);
        const std::vector<double> s = softmax_row_f64(student_logits, t);
        switch (kind) {
            case Divergence::fkl:
                acc += kl_f64(p, s);
                break;
            case Divergence::rkl:
                acc += kl_f64(s, p);
                break;
            case Divergence::jsd: {
                std::vector<double> m(p.size());
                for (size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + s[i]);
                acc += 0.5 * kl_f64(p, m) + 0.5 * kl_f64(s, m);
                break;
            }
            case Divergence::tvd: {
                double tv = 0.0;
                for (size_t i = 0; i < p.size(); ++i) tv += std::abs(p[i] - s[i]);
                acc += 0.5 * tv;
                break;
            }
        }
    }
    return acc / static_cast<double>(rows);
}

namespace {

// Per-token-mean cross entropy of one loop's logits against class targets.
double cross_entropy(const Tensor& logits, const std::vector<int32_t>& targets) {
    const int64_t seq = logits.rows();
    double acc = 0.0;
    for (int64_t t = 0; t < seq; ++t) {
        const int32_t target = targets[static_cast<size_t>(t)];
        if (target < 0 || target >= logits.cols())
            throw ArgumentError("target id " + std::to_string(target) + " outside vocab of " +
                                std::to_string(logits.cols()));
        const std::vector<double> p = softmax_row_f64(logits, t);
        acc -= std::log(p[static_cast<size_t>(target)]);
    }
    return acc / static_cast<double>(seq);
}

}  // namespace

LossBreakdown early_exit_loss(const std::vector<Tensor>& per_loop_logits,
                              const std::vector<int32_t>& targets, CoeffScheme scheme,
                              double aggressive_coeff, bool self_distill) {
    require_logit_stack(per_loop_logits);
    const int64_t n_loops = static_cast<int64_t>(per_loop_logits.size());
    const int64_t seq = per_loop_logits.front().rows();
    if (static_cast<int64_t>(targets.size()) != seq)
        throw ArgumentError("early_exit_loss: " + std::to_string(targets.size()) +
                            " targets for " + std::to_string(seq) + " positions");
    if (seq == 0) throw ArgumentError("early_exit_loss: empty sequence");

    LossBreakdown out;
    out.coefficients = exit_coefficients(scheme, n_loops, aggressive_coeff);
    out.per_loop.resize(static_cast<size_t>(n_loops));
    const Tensor& final_logits = per_loop_logits[static_cast<size_t>(n_loops - 1)];
    for (int64_t b = 1; b <= n_loops; ++b) {
        const Tensor& logits = per_loop_logits[static_cast<size_t>(b - 1)];
        const bool distill_this = self_distill && b < n_loops;
        out.per_loop[static_cast<size_t>(b - 1)] =
            distill_this ? kd_divergence(final_logits, logits, Divergence::fkl)
                         : cross_entropy(logits, targets);
        out.total += out.coefficients[static_cast<size_t>(b - 1)] * out.per_loop[static_cast<size_t>(b - 1)];
    }
    return out;
}

}  // namespace rrt
