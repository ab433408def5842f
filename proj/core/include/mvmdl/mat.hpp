#pragma once
// Minimal row-major dense matrix of doubles.

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace mvmdl {

struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    double* row(std::size_t i) { return data.data() + i * cols; }
    const double* row(std::size_t i) const { return data.data() + i * cols; }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

inline void require_shape(const Mat& m, std::size_t r, std::size_t c, const char* where) {
    if (m.rows != r || m.cols != c) {
        throw std::invalid_argument(std::string(where) + ": unexpected matrix shape");
    }
}

}  // namespace mvmdl
