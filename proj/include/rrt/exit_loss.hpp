#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rrt/tensor.hpp"

namespace rrt {

// Per-position oracle exit loops. per_loop_logits holds one [seq x vocab]
// tensor per loop; position t exits at the earliest loop whose argmax (lowest
// index on ties) matches the final loop's argmax, so every result lies in
// [1, n_loops] and the final loop always matches itself.
std::vector<int64_t> oracle_exits(const std::vector<Tensor>& per_loop_logits);

// Loss-mixing coefficient schemes for the per-loop objectives: `weighted`
// ramps linearly (alpha_i = i / sum_j j); `aggressive` gives every
// non-final loop the same small constant and the final loop 1.
enum class CoeffScheme { weighted, aggressive };

CoeffScheme parse_coeff_scheme(const std::string& s);
std::string to_string(CoeffScheme scheme);

// Coefficients alpha_1..alpha_B. aggressive_coeff is only read by the
// aggressive scheme (the conventional value is 0.1).
std::vector<double> exit_coefficients(CoeffScheme scheme, int64_t n_loops,
                                      double aggressive_coeff);

// Distribution distances for distillation, natural log, float64 softmax,
// 0 * log 0 treated as 0. fkl is KL(teacher || student), rkl the reverse,
// jsd the Jensen-Shannon divergence, tvd the total variation distance.
enum class Divergence { fkl, rkl, jsd, tvd };

Divergence parse_divergence(const std::string& s);
std::string to_string(Divergence kind);

// Mean over rows of the chosen divergence between the two softmaxed logit
// tensors (shapes must match, rows are token positions).
double kd_divergence(const Tensor& teacher_logits, const Tensor& student_logits, Divergence kind);

struct LossBreakdown {
    double total = 0.0;
    std::vector<double> per_loop;      // unweighted per-loop terms
    std::vector<double> coefficients;  // the alphas actually applied
};

// Weighted sum over loops of per-token-mean losses. The final loop always
// contributes cross-entropy against `targets`; earlier loops contribute
// cross-entropy too, unless self_distill is set, in which case they
// contribute KL(final || loop) with the final logits treated as constants
// (an evaluation of the detached-teacher objective).
LossBreakdown early_exit_loss(const std::vector<Tensor>& per_loop_logits,
                              const std::vector<int32_t>& targets, CoeffScheme scheme,
                              double aggressive_coeff, bool self_distill);

}  // namespace rrt
