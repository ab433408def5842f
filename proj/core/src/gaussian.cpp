#include "mvmdl/gaussian.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "mvmdl/logsumexp.hpp"
#include "mvmdl/rng.hpp"

namespace mvmdl {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr double kGammaZero = 1e-12;

void require_same_dim(std::size_t a, std::size_t b, const char* where) {
    if (a != b) throw std::invalid_argument(std::string(where) + ": dimension mismatch");
}

}  // namespace

DiagGaussian::DiagGaussian(std::vector<double> mu, std::vector<double> v)
    : mean(std::move(mu)), var(std::move(v)) {
    if (mean.size() != var.size()) {
        throw std::invalid_argument("DiagGaussian: mean/var length mismatch");
    }
    for (double& vj : var) {
        if (!std::isfinite(vj)) throw std::invalid_argument("DiagGaussian: non-finite variance");
        vj = std::max(vj, kVarFloor);
    }
    for (double m : mean) {
        if (!std::isfinite(m)) throw std::invalid_argument("DiagGaussian: non-finite mean");
    }
}

void GaussianMixture::validate() const {
    if (components.empty()) throw std::invalid_argument("GaussianMixture: needs M >= 1");
    if (weights.size() != components.size()) {
        throw std::invalid_argument("GaussianMixture: weights/components size mismatch");
    }
    double total = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0)) throw std::invalid_argument("GaussianMixture: negative weight");
        total += w;
    }
    if (std::abs(total - 1.0) > 1e-9) {
        throw std::invalid_argument("GaussianMixture: weights must sum to 1");
    }
    const std::size_t d = components[0].dim();
    for (const auto& c : components) {
        require_same_dim(c.dim(), d, "GaussianMixture");
    }
}

double kl_diag(const DiagGaussian& p, const DiagGaussian& q) {
    require_same_dim(p.dim(), q.dim(), "kl_diag");
    double acc = 0.0;
    for (std::size_t j = 0; j < p.dim(); ++j) {
        const double dm = p.mean[j] - q.mean[j];
        acc += 0.5 * std::log(q.var[j] / p.var[j]) +
               (p.var[j] + dm * dm) / (2.0 * q.var[j]) - 0.5;
    }
    return std::max(0.0, acc);
}

double kl_mixture_upper(const DiagGaussian& p, const GaussianMixture& q,
                        const std::optional<std::vector<double>>& gamma) {
    q.validate();
    require_same_dim(p.dim(), q.dim(), "kl_mixture_upper");
    const std::size_t M = q.size();

    if (!gamma.has_value()) {
        std::vector<double> logits(M);
        for (std::size_t m = 0; m < M; ++m) {
            const double la = q.weights[m] > 0.0
                                  ? std::log(q.weights[m])
                                  : -std::numeric_limits<double>::infinity();
            logits[m] = la - kl_diag(p, q.components[m]);
        }
        return -log_sum_exp(logits);
    }

    const std::vector<double>& g = *gamma;
    if (g.size() != M) throw std::invalid_argument("kl_mixture_upper: gamma size mismatch");
    double total = 0.0;
    double acc = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
        if (!(g[m] >= 0.0)) throw std::invalid_argument("kl_mixture_upper: negative gamma");
        total += g[m];
        if (g[m] < kGammaZero) continue;  // 0*log(0/alpha) = 0
        if (q.weights[m] <= 0.0) {
            throw std::invalid_argument("kl_mixture_upper: gamma positive on a zero-weight component");
        }
        acc += g[m] * (kl_diag(p, q.components[m]) - std::log(q.weights[m] / g[m]));
    }
    if (std::abs(total - 1.0) > 1e-9) {
        throw std::invalid_argument("kl_mixture_upper: gamma must lie on the simplex");
    }
    return acc;
}

double kl_mixture_lower(const DiagGaussian& p, const GaussianMixture& q, ProdVariant variant) {
    q.validate();
    require_same_dim(p.dim(), q.dim(), "kl_mixture_lower");
    const std::size_t M = q.size();
    const std::size_t d = p.dim();

    // -h(p) term: -(1/2) log((2*pi*e)^d prod var_p).
    double neg_entropy = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        neg_entropy -= 0.5 * std::log(kTwoPi * std::exp(1.0) * p.var[j]);
    }

    std::vector<double> logits(M);
    for (std::size_t m = 0; m < M; ++m) {
        if (q.weights[m] <= 0.0) {
            logits[m] = -std::numeric_limits<double>::infinity();
            continue;
        }
        double log_t = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double v = variant == ProdVariant::exact
                                 ? p.var[j] + q.components[m].var[j]
                                 : q.components[m].var[j];
            const double dm = p.mean[j] - q.components[m].mean[j];
            log_t += -dm * dm / (2.0 * v) - 0.5 * std::log(kTwoPi * v);
        }
        logits[m] = std::log(q.weights[m]) + log_t;
    }
    return neg_entropy - log_sum_exp(logits);
}

double kl_mixture_estimate(const DiagGaussian& p, const GaussianMixture& q) {
    return 0.5 * (kl_mixture_upper(p, q) + kl_mixture_lower(p, q, ProdVariant::exact));
}

double kl_perturbed(const DiagGaussian& p, const DiagGaussian& q, double eps, double mean_var) {
    require_same_dim(p.dim(), q.dim(), "kl_perturbed");
    if (!(eps > 0.0)) throw std::invalid_argument("kl_perturbed: eps must be > 0");
    const std::size_t d = p.dim();
    if (mean_var <= 0.0) mean_var = 0.5 * std::sqrt(static_cast<double>(d));

    double mean_term = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        const double dm = p.mean[j] - q.mean[j];
        mean_term += dm * dm;
    }
    mean_term /= 2.0 * mean_var;

    double var_term = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        const double vp = p.var[j] + eps;
        const double vq = q.var[j] + eps;
        var_term += 0.5 * std::log(vq / vp) + vp / (2.0 * vq) - 0.5;
    }
    return mean_term + std::max(0.0, var_term);
}

McEstimate kl_monte_carlo(const DiagGaussian& p, const GaussianMixture& q,
                          std::int64_t n_samples, std::uint64_t seed) {
    q.validate();
    require_same_dim(p.dim(), q.dim(), "kl_monte_carlo");
    if (n_samples < 1) throw std::invalid_argument("kl_monte_carlo: n_samples must be >= 1");
    const std::size_t M = q.size();
    const std::size_t d = p.dim();

    // Precompute per-component constants of log N(u; mu_m, var_m).
    std::vector<double> comp_const(M);
    std::vector<double> comp_inv2(M * d);
    for (std::size_t m = 0; m < M; ++m) {
        double c = q.weights[m] > 0.0 ? std::log(q.weights[m])
                                      : -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < d; ++j) {
            c -= 0.5 * std::log(kTwoPi * q.components[m].var[j]);
            comp_inv2[m * d + j] = 0.5 / q.components[m].var[j];
        }
        comp_const[m] = c;
    }
    double p_const = 0.0;
    std::vector<double> p_inv2(d), p_std(d);
    for (std::size_t j = 0; j < d; ++j) {
        p_const -= 0.5 * std::log(kTwoPi * p.var[j]);
        p_inv2[j] = 0.5 / p.var[j];
        p_std[j] = std::sqrt(p.var[j]);
    }

    Rng rng(seed);
    std::vector<double> u(d);
    std::vector<double> logits(M);
    double sum = 0.0, sum_sq = 0.0;
    for (std::int64_t s = 0; s < n_samples; ++s) {
        double log_p = p_const;
        for (std::size_t j = 0; j < d; ++j) {
            const double z = rng.normal();
            u[j] = p.mean[j] + p_std[j] * z;
            log_p -= p_inv2[j] * (p_std[j] * z) * (p_std[j] * z);
        }
        for (std::size_t m = 0; m < M; ++m) {
            double quad = 0.0;
            const double* inv2 = &comp_inv2[m * d];
            const auto& comp = q.components[m];
            for (std::size_t j = 0; j < d; ++j) {
                const double dm = u[j] - comp.mean[j];
                quad += inv2[j] * dm * dm;
            }
            logits[m] = comp_const[m] - quad;
        }
        const double w = log_p - log_sum_exp(logits);
        sum += w;
        sum_sq += w * w;
    }
    McEstimate out;
    const double n = static_cast<double>(n_samples);
    out.estimate = sum / n;
    if (n_samples > 1) {
        const double var = std::max(0.0, (sum_sq - sum * sum / n) / (n - 1.0));
        out.stderr_ = std::sqrt(var / n);
    }
    return out;
}

}  // namespace mvmdl
