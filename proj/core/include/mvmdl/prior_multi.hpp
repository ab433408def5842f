#pragma once
// Joint Gaussians-product mixture prior over K views: dense joint weights
// over [M]^K, per-view component banks with cached marginal weights, joint
// E/M updates (lossless and lossy), the marginals-only mode, and the joint
// regularizer with per-view analytic gradients.
//
// Joint cells are indexed row-major over (m_1, ..., m_K) with m_K fastest.
// The dense tensor is capped at M^K <= 65536; exceeding it is a
// configuration error, not a silent truncation.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mvmdl/prior_common.hpp"
#include "mvmdl/prior_single.hpp"

namespace mvmdl {

inline constexpr std::size_t kJointBudget = 65536;

std::size_t joint_cells(int num_components, int num_views);  // throws over budget

struct ProductMixturePrior {
    int num_classes = 0;
    int num_views = 0;       // K
    int num_components = 0;  // M
    int dim = 0;             // d
    // joint_weights[c] has M^K entries on the simplex.
    std::vector<std::vector<double>> joint_weights;
    // views[c][k]: the view-k marginal mixture of class c; its weights are
    // the cached marginals of joint_weights[c].
    std::vector<std::vector<GaussianMixture>> views;
    std::vector<double> eps_view;  // per-view lossy offsets epsilon_k
    std::vector<std::uint8_t> fallback;
    UpdateHyper hyper;

    void validate() const;
    // Marginal weight alpha_{c,k,m} recomputed from the joint tensor.
    double marginal_weight(int c, int k, int m) const;
};

struct MultiLatentBatch {
    std::vector<LatentBatch> view;  // K entries, shared labels

    std::size_t num_views() const { return view.size(); }
    std::size_t size() const { return view.empty() ? 0 : view[0].size(); }
    std::size_t dim() const { return view.empty() ? 0 : view[0].dim(); }
    const std::vector<int>& labels() const { return view.at(0).labels; }
    void validate(int num_classes) const;
};

// Joint k-means++-style initialization: uniform joint weights, |N(0,1)|
// standard deviations, and for each component index one sample's per-view
// latent means chosen by the summed per-view squared distances.
ProductMixturePrior init_multi_bank(const MultiLatentBatch& latents, int num_classes,
                                    int num_components, const UpdateHyper& hyper,
                                    std::uint64_t seed);

// Joint E-step: row i is the softmax over [M]^K of
// log(alpha_{y_i, m^K}) - sum_k D_k(i, m_k), built from per-view b x M
// divergence matrices.
Mat joint_responsibilities(const ProductMixturePrior& prior, const MultiLatentBatch& latents);

// Exact marginal sums of a joint responsibility tensor; K matrices of
// shape b x M, each row on the simplex.
std::vector<Mat> marginalize(const Mat& gamma_joint, int num_views, int num_components);

struct JointClassCandidate {
    std::vector<Mat> mean;               // per view: M x d
    std::vector<Mat> var;                // per view: M x d
    std::vector<double> joint_weight;    // M^K
    std::vector<std::uint8_t> joint_kept;  // joint cells below mass threshold
    std::vector<std::vector<std::uint8_t>> comp_kept;  // per view, per component
    bool class_present = false;
};
using JointCandidates = std::vector<JointClassCandidate>;

// M-step closed forms at fixed joint responsibilities. The lossless mode
// blends gamma with the product-kernel weights beta as (gamma+beta)/2 for
// means and joint weights; the lossy mode uses (2*gamma+beta)/3 for means
// and gamma alone for variances. With hyper.normalize_means on (lossy
// default), beta reduces to the joint weights themselves.
JointCandidates fit_joint_candidates(const ProductMixturePrior& prior,
                                     const MultiLatentBatch& latents, const Mat& gamma_joint);

// Moving-average update; per-view component noise comes from sub-streams
// derived from `seed` and the view index, mirroring the distributed
// protocol where each client owns its view's noise.
ProductMixturePrior blend_update(const ProductMixturePrior& prior,
                                 const JointCandidates& candidates, int iteration,
                                 std::uint64_t seed);

// --- protocol-grade stages -------------------------------------------------
// The distributed runtime runs the same update as the monolithic engine by
// composing exactly these functions; clients evaluate the per-view stages,
// the server the joint stage. Keeping them public is what makes the
// trajectory equivalence bit-exact.

// b x M divergence matrix of view k against its class components
// (kl_diag in lossless mode, the perturbed divergence with isotropic mean
// variance sqrt(K*d)/2 and offset eps_k in lossy mode).
Mat view_divergence_matrix(const ProductMixturePrior& prior, const LatentBatch& latents_k,
                           int k);

// b x M quadratic exponents feeding the product-kernel weights beta.
Mat view_beta_exponent_matrix(const ProductMixturePrior& prior, const LatentBatch& latents_k,
                              int k);

struct JointEmOutputs {
    std::vector<Mat> gamma_marg;  // K of b x M: marginals of the joint softmax
    std::vector<Mat> blend_marg;  // K of b x M: (gamma+beta)/2, or (2*gamma+beta)/3 in lossy mode
    std::vector<std::vector<double>> joint_weight_candidate;  // per class, M^K
    std::vector<std::vector<std::uint8_t>> joint_kept;        // per class, M^K
    std::vector<std::uint8_t> class_present;                  // per class
};

// Server-side joint E-step and joint-weight M-step from the K view reports.
JointEmOutputs joint_em_from_reports(const ProductMixturePrior& prior,
                                     const std::vector<int>& labels,
                                     const std::vector<Mat>& divergences,
                                     const std::vector<Mat>& beta_exponents);

// log of the product-kernel term per component: log t' (lossless, needs the
// component variances) or log t-tilde (lossy, means only). Reported by
// clients so the server can form the product-bound softmax without seeing
// the component parameters.
Mat view_log_prod_matrix(const ProductMixturePrior& prior, const LatentBatch& latents_k, int k);

// Joint log-sum-exp over the cells with logits
// log(alpha_{y_i, m^K}) + sum_k addend_k(i, m_k), plus the per-view
// marginals of the softmax. Shared by the regularizer and the server so the
// accumulation order (and hence every bit) matches.
struct JointSoftmaxOut {
    std::vector<double> lse;   // per sample
    std::vector<Mat> marg;     // K of b x M
};
JointSoftmaxOut joint_softmax_marginals(const ProductMixturePrior& prior,
                                        const std::vector<int>& labels,
                                        const std::vector<Mat>& addends);

// Per-view gradient kernels of the two regularizer halves, driven entirely
// by marginal coefficient matrices; used by the monolithic regularizer and
// by clients on received coefficients.
void accumulate_var_gradients(const std::vector<GaussianMixture>& per_class,
                              const LatentBatch& latents_k, const Mat& gamma_marg,
                              PriorMode mode, double eps, double mean_var, Mat* d_mu,
                              Mat* d_sigma);
void accumulate_prod_gradients(const std::vector<GaussianMixture>& per_class,
                               const LatentBatch& latents_k, const Mat& prod_marg,
                               PriorMode mode, double mean_var, Mat* d_mu, Mat* d_sigma);

// Client-side per-view M-step from the marginal coefficient matrices; the
// bank is the client's own per-class component list for its view.
struct ViewCandidate {
    std::vector<Mat> mean;  // per class: M x d
    std::vector<Mat> var;   // per class: M x d
    std::vector<std::vector<std::uint8_t>> kept;  // per class, per component
};
ViewCandidate view_m_step_from_marginals(const std::vector<GaussianMixture>& bank,
                                         const UpdateHyper& hyper,
                                         const LatentBatch& latents_k, const Mat& gamma_marg,
                                         const Mat& blend_marg,
                                         const std::vector<std::uint8_t>& class_present);

// Client-side blend of one view's components; consumes the view's noise
// stream. Mutates the per-class bank for all present classes.
void blend_view_components(std::vector<GaussianMixture>* bank, const UpdateHyper& hyper,
                           const ViewCandidate& candidate,
                           const std::vector<std::uint8_t>& class_present, int iteration,
                           std::uint64_t view_seed);

// Server-side blend of the joint weights followed by marginal-cache refresh.
void blend_joint_weights(ProductMixturePrior* prior,
                         const std::vector<std::vector<double>>& joint_weight_candidate,
                         const std::vector<std::uint8_t>& class_present);

// Recompute every cached marginal weight from the joint tensors.
void refresh_marginal_cache(ProductMixturePrior* prior);
// ---------------------------------------------------------------------------

struct MultiRegResult {
    double value = 0.0;
    std::vector<Mat> d_mu;     // per view: b x d
    std::vector<Mat> d_sigma;  // per view: b x d
};

// Joint regularizer: -sum_i log sum_{m^K} alpha exp(-sum_k D_k), plus the
// product-bound half when configured, with gradients per view.
MultiRegResult joint_regularizer(const ProductMixturePrior& prior,
                                 const MultiLatentBatch& latents);

// Marginals-only mode: the single-view regularizer applied per view to the
// induced marginal mixtures, summed.
MultiRegResult marginal_regularizer(const ProductMixturePrior& prior,
                                    const MultiLatentBatch& latents);

// Joint prior log-density of realized per-view samples (symmetry probe).
double joint_prior_log_density(const ProductMixturePrior& prior,
                               const std::vector<Mat>& samples,
                               const std::vector<int>& labels);

// Two identical views whose latent parameters take one of R per-class
// values; priors set to the matched optimum (per-view mixtures at the R
// values, joint weights pairing equal indices). Evaluated under var_only.
struct RedundancyInstance {
    ProductMixturePrior prior;
    MultiLatentBatch batch;
};
RedundancyInstance make_redundancy_instance(int num_classes, int R, int dim, int batch_size,
                                            std::uint64_t seed);

// Returns (marginals-only value R1, joint value R2); R2 <= R1.
std::pair<double, double> redundancy_gap(const RedundancyInstance& instance);

// JSON checkpoint extending the single-view layout with the joint tensor.
std::string product_prior_to_json(const ProductMixturePrior& prior);
ProductMixturePrior product_prior_from_json(const std::string& text);

}  // namespace mvmdl
