#pragma once
// Per-class single-view Gaussian mixture prior bank: k-means++-style
// initialization, one E/M pass per optimization iteration, moving-average
// updates with decaying symmetry noise, and the regularizer values and
// analytic latent gradients (lossless and lossy, with or without the
// product-bound half).

#include <cstdint>
#include <string>
#include <vector>

#include "mvmdl/prior_common.hpp"

namespace mvmdl {

struct PriorBankSingle {
    int num_classes = 0;
    int num_components = 0;  // M
    int dim = 0;             // d
    std::vector<GaussianMixture> priors;   // one mixture per class
    std::vector<std::uint8_t> fallback;    // classes absent at init time
    UpdateHyper hyper;

    void validate() const;
};

// M-step output for one class.
struct MixtureCandidate {
    Mat mean;                        // M x d
    Mat var;                         // M x d
    std::vector<double> weight;      // M
    std::vector<std::uint8_t> kept;  // component mass fell below b_min
    bool class_present = false;      // class had samples in the batch
};

using SingleCandidates = std::vector<MixtureCandidate>;

// Initialization from an (enlarged) latent batch. Per class: uniform
// weights, |N(0,1)| standard deviations per coordinate, first mean a
// uniformly chosen class sample, remaining means weighted by squared
// distance to the closest chosen center. Classes absent from the batch get
// standard-normal components and are flagged in `fallback`.
PriorBankSingle init_single_bank(const LatentBatch& latents, int num_classes,
                                 int num_components, const UpdateHyper& hyper,
                                 std::uint64_t seed);

// E-step: row i is the softmax over components of
// log(alpha_{y_i,m}) - D(P_i || Q_{y_i,m}), max-shifted. Rows are on the
// simplex.
Mat responsibilities(const PriorBankSingle& bank, const LatentBatch& latents);

// M-step closed forms at fixed gamma. Lossless variances blend in the
// squared offset from the previous component mean; lossy variances average
// the latent variances only. Components whose mass is below b_min keep the
// previous parameters and are marked in `kept`.
SingleCandidates fit_candidates(const PriorBankSingle& bank, const LatentBatch& latents,
                                const Mat& gamma);

// Moving-average update with per-component Gaussian noise of variance
// zeta(t+1); weights are blended and renormalized, variances clamped to the
// floor. Classes not present in the candidates are left untouched and
// consume no randomness.
PriorBankSingle blend_update(const PriorBankSingle& bank, const SingleCandidates& candidates,
                             int iteration, std::uint64_t seed);

// Regularizer value and analytic gradients with respect to the per-sample
// latent parameters (prior parameters are treated as constants).
struct RegResult {
    double value = 0.0;
    Mat d_mu;     // b x d
    Mat d_sigma;  // b x d, derivative w.r.t. the standard deviation
};

RegResult mixture_regularizer(const PriorBankSingle& bank, const LatentBatch& latents);

// Baseline: sum_i KL(P_i || N(0, I)) with gradients.
RegResult vib_regularizer(const LatentBatch& latents);

// sum_i log Q_{y_i}(u_i) for realized latent samples; symmetry probe.
double prior_log_density(const PriorBankSingle& bank, const Mat& samples,
                         const std::vector<int>& labels);

// JSON checkpoint (documented layout, numeric round trip is exact).
std::string bank_to_json(const PriorBankSingle& bank);
PriorBankSingle bank_from_json(const std::string& text);

// Hyperparameter block shared by the single- and multi-view checkpoints.
std::string hyper_to_json_string(const UpdateHyper& hyper);
UpdateHyper hyper_from_json_string(const std::string& text);

}  // namespace mvmdl
