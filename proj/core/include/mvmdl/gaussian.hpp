#pragma once
// Diagonal-Gaussian algebra: exact KL between diagonal Gaussians, the
// variational upper / product-Gaussian lower / averaged estimators for
// KL(Gaussian || Gaussian mixture), the perturbed-latent divergence used by
// the lossy regularizers, and a seeded Monte-Carlo oracle.
//
// Sandwich property (checked by the test suite): for the exact product
// variant,  kl_mixture_lower <= KL <= kl_mixture_upper.

#include <cstdint>
#include <optional>
#include <vector>

namespace mvmdl {

// Variances are clamped to this floor at construction; the estimators
// divide by them.
inline constexpr double kVarFloor = 1e-8;

struct DiagGaussian {
    std::vector<double> mean;
    std::vector<double> var;  // componentwise variance, >= kVarFloor

    DiagGaussian() = default;
    DiagGaussian(std::vector<double> mu, std::vector<double> v);

    std::size_t dim() const { return mean.size(); }
};

struct GaussianMixture {
    std::vector<double> weights;           // simplex over M components
    std::vector<DiagGaussian> components;  // shared dimension

    std::size_t size() const { return components.size(); }
    std::size_t dim() const { return components.empty() ? 0 : components[0].dim(); }
    void validate() const;
};

// Exact KL(p || q) between diagonal Gaussians, in nats.
double kl_diag(const DiagGaussian& p, const DiagGaussian& q);

// Variational upper bound on KL(p || mixture). With gamma supplied, returns
// sum_m gamma_m * (kl_diag(p, q_m) - log(alpha_m / gamma_m)); gamma entries
// below 1e-12 contribute zero. Without gamma, uses the minimizing
// responsibilities gamma_m proportional to alpha_m * exp(-kl_m), in which
// case the value equals -log sum_m alpha_m exp(-kl_m) (max-shifted).
double kl_mixture_upper(const DiagGaussian& p, const GaussianMixture& q,
                        const std::optional<std::vector<double>>& gamma = std::nullopt);

// Product-Gaussian bound. Variant::exact uses the true pairwise product
// integral (combined variances) and lower-bounds the KL; Variant::tprime
// evaluates the component density at the posterior mean instead (variance
// of q alone), the form the regularizers use.
enum class ProdVariant { exact, tprime };
double kl_mixture_lower(const DiagGaussian& p, const GaussianMixture& q,
                        ProdVariant variant = ProdVariant::exact);

// (upper(optimal gamma) + lower(exact)) / 2.
double kl_mixture_estimate(const DiagGaussian& p, const GaussianMixture& q);

// Perturbed-latent divergence: the means are compared under a fixed
// isotropic variance mean_var and the variances under an offset eps:
//   ||mu_p - mu_q||^2 / (2*mean_var)
//   + sum_j [ log sqrt((var_q+eps)/(var_p+eps))
//             + (var_p+eps)/(2*(var_q+eps)) - 1/2 ].
// mean_var defaults to sqrt(d)/2 when <= 0 is passed.
double kl_perturbed(const DiagGaussian& p, const DiagGaussian& q, double eps,
                    double mean_var = 0.0);

struct McEstimate {
    double estimate = 0.0;
    double stderr_ = 0.0;
};

// Monte-Carlo estimate of KL(p || mixture) with standard error;
// deterministic given the seed.
McEstimate kl_monte_carlo(const DiagGaussian& p, const GaussianMixture& q,
                          std::int64_t n_samples, std::uint64_t seed);

}  // namespace mvmdl
