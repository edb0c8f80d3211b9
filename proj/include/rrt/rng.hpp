#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace rrt {

// Deterministic Gaussian stream. std::normal_distribution is
// implementation-defined, so Box-Muller is spelled out here: two runs with the
// same seed produce bitwise-identical draws on a given platform.
class GaussianRng {
  public:
    explicit GaussianRng(uint64_t seed) : engine_(seed) {}

    // N(0, stddev^2), computed in float64 and rounded once.
    float next(double stddev) {
        if (have_spare_) {
            have_spare_ = false;
            return static_cast<float>(spare_ * stddev);
        }
        // u1 in (0, 1] so the log is finite; u2 in [0, 1).
        const double u1 = (static_cast<double>(engine_() >> 11) + 1.0) * 0x1p-53;
        const double u2 = static_cast<double>(engine_() >> 11) * 0x1p-53;
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * 3.141592653589793238462643383279502884 * u2;
        spare_ = radius * std::sin(angle);
        have_spare_ = true;
        return static_cast<float>(radius * std::cos(angle) * stddev);
    }

  private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace rrt
