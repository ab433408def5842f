#pragma once
// Synthetic multi-view classification data: class-conditional Gaussian
// clusters in R^D, per-view corruptions graded Light..Ultimate (coordinate
// erasure, additive noise, multiplicative gain, circular shift) and
// coordinate-block occlusions on a pseudo 2-D grid. Plus strict CSV
// ingestion and a binary dump with a JSON sidecar.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mvmdl/mat.hpp"

namespace mvmdl {

struct DistortionLevel {
    std::string name;
    double erase_rate = 0.0;   // per-coordinate erasure probability
    double rotation_deg = 0.0; // mapped to additive noise of scale (deg/5)*0.1*||x||/sqrt(D)
    double gain_lo = 1.0;      // multiplicative gain interval
    double gain_hi = 1.0;
    double shift_frac = 0.0;   // max circular shift as a fraction of D
};

// Named levels: Light, Medium, Heavy, Ultimate.
DistortionLevel distortion_level(const std::string& name);

enum class Occlusion { none, left, right, upper, bottom,
                       quad_ul, quad_ur, quad_ll, quad_lr };
Occlusion parse_occlusion(const std::string& name);

struct ViewSpec {
    Occlusion occlusion = Occlusion::none;
    std::optional<DistortionLevel> level;
};

struct MultiViewDataset {
    std::vector<Mat> views;   // K matrices of shape n x D
    std::vector<int> labels;  // n
    int num_classes = 0;

    std::size_t size() const { return labels.size(); }
    int num_views() const { return static_cast<int>(views.size()); }
    std::size_t dim() const { return views.empty() ? 0 : views[0].cols; }
    void validate() const;
};

struct GeneratedData {
    MultiViewDataset train;
    MultiViewDataset ghost;  // held-out i.i.d. copy of equal size
};

// Kept coordinates of an occlusion mask over D coordinates arranged on a
// floor(sqrt(D)) x ceil(D/rows) grid; halves cover 55% of their axis so
// complementary pairs overlap by 10% and union-cover everything.
std::vector<std::uint8_t> occlusion_mask(Occlusion kind, std::size_t D);

// Deterministic given seed; per-sample sub-seeds make generation
// partitionable across threads without changing the output.
GeneratedData generate(std::int64_t n, int num_classes, int D, int K,
                       const std::vector<ViewSpec>& view_specs, double separation,
                       std::uint64_t seed);

// CSV round trip. Header: label,v0_c0,...,v{K-1}_c{D-1}. Strict numeric
// parsing; malformed rows are reported with their line number.
void save_csv(const MultiViewDataset& data, const std::string& path);

struct CsvSchema {
    int num_views = 0;
    int dim = 0;
    int num_classes = 0;
};
MultiViewDataset load_csv(const std::string& path, const CsvSchema& schema);

// Binary dump: little-endian 64-bit reals plus a JSON sidecar carrying the
// shapes and the generator seed. Byte-identical for identical inputs.
void save_binary(const MultiViewDataset& data, const std::string& bin_path,
                 const std::string& sidecar_path, std::uint64_t seed);
MultiViewDataset load_binary(const std::string& sidecar_path);

}  // namespace mvmdl
