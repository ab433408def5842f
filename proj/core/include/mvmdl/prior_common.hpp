#pragma once
// Shared pieces of the single-view and product-mixture prior engines:
// update hyperparameters, latent batches, and the per-sample-per-component
// divergence kernels.

#include <cstdint>
#include <vector>

#include "mvmdl/gaussian.hpp"
#include "mvmdl/mat.hpp"

namespace mvmdl {

enum class PriorMode { lossless, lossy };
enum class KlEstimate { var_only, avg_var_prod };

struct ZetaSchedule {
    double zeta0_mean = 1e-4;
    double zeta0_var = 1e-4;
    double decay = 0.99;

    double mean_var_at(int t) const;
    double var_var_at(int t) const;
};

struct UpdateHyper {
    double eta_mean = 0.5;    // moving-average rate for component means
    double eta_var = 0.5;     // ... for component variances
    double eta_weight = 0.5;  // ... for mixture weights
    ZetaSchedule zeta;
    double eps_lossy = 1.0;   // variance offset of the perturbed divergence
    PriorMode mode = PriorMode::lossless;
    KlEstimate kl_estimate = KlEstimate::avg_var_prod;
    double b_min = 1e-3;      // component mass below which the M-step keeps old params
    bool normalize_means = false;  // rescale component means to norm sqrt(d) after updates

    void validate() const;
};

// Per-sample diagonal-Gaussian latents for one view: mu and sigma are b x d,
// sigma holds standard deviations (>= sqrt(kVarFloor)).
struct LatentBatch {
    Mat mu;
    Mat sigma;
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
    std::size_t dim() const { return mu.cols; }
    void validate(int num_classes) const;
};

// out(i, m) = divergence between sample i's latent and component m of its
// label's mixture (per_class[labels[i]]): exact diagonal KL in lossless
// mode, the perturbed divergence (variance offset eps, isotropic mean
// variance mean_var) in lossy mode.
void fill_divergence_matrix(const std::vector<GaussianMixture>& per_class,
                            const LatentBatch& latents, PriorMode mode, double eps,
                            double mean_var, Mat* out);

// out(i, m) = quadratic exponent the product-bound weights use:
//   lossless: sum_j (mu_x - mu_m)^2 / (2*var_m)
//   lossy:    ||mu_x - mu_m||^2 / (2*(2*mean_var))
void fill_beta_exponent_matrix(const std::vector<GaussianMixture>& per_class,
                               const LatentBatch& latents, PriorMode mode,
                               double mean_var, Mat* out);

}  // namespace mvmdl
