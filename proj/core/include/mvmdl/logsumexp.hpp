#pragma once
// Max-shifted log(sum(exp(args))). Entries equal to -infinity are allowed
// and drop out of the sum; an all-(-inf) input returns -infinity.

#include <cmath>
#include <limits>
#include <vector>

namespace mvmdl {

inline double log_sum_exp(const double* args, std::size_t n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        if (args[i] > mx) mx = args[i];
    }
    if (!std::isfinite(mx)) return mx;
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sum += std::exp(args[i] - mx);
    }
    return mx + std::log(sum);
}

inline double log_sum_exp(const std::vector<double>& args) {
    return log_sum_exp(args.data(), args.size());
}

}  // namespace mvmdl
