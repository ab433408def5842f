#include "mvmdl/prior_single.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "mvmdl/logsumexp.hpp"
#include "mvmdl/rng.hpp"

namespace mvmdl {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

double component_mean_var(std::size_t d) { return 0.5 * std::sqrt(static_cast<double>(d)); }

}  // namespace

double ZetaSchedule::mean_var_at(int t) const {
    return zeta0_mean * std::pow(decay, t);
}
double ZetaSchedule::var_var_at(int t) const {
    return zeta0_var * std::pow(decay, t);
}

void UpdateHyper::validate() const {
    auto in01 = [](double x) { return x >= 0.0 && x <= 1.0; };
    if (!in01(eta_mean) || !in01(eta_var) || !in01(eta_weight)) {
        throw std::invalid_argument("UpdateHyper: eta rates must lie in [0,1]");
    }
    if (!(zeta.zeta0_mean >= 0.0) || !(zeta.zeta0_var >= 0.0) || !(zeta.decay >= 0.0)) {
        throw std::invalid_argument("UpdateHyper: zeta parameters must be >= 0");
    }
    if (!(eps_lossy > 0.0)) throw std::invalid_argument("UpdateHyper: eps_lossy must be > 0");
    if (!(b_min >= 0.0)) throw std::invalid_argument("UpdateHyper: b_min must be >= 0");
}

void LatentBatch::validate(int num_classes) const {
    if (mu.rows != labels.size() || !mu.same_shape(sigma)) {
        throw std::invalid_argument("LatentBatch: inconsistent shapes");
    }
    for (int y : labels) {
        if (y < 0 || y >= num_classes) throw std::invalid_argument("LatentBatch: label out of range");
    }
    const double floor_std = std::sqrt(kVarFloor);
    for (double s : sigma.data) {
        if (!(s >= floor_std * (1.0 - 1e-12))) {
            throw std::invalid_argument("LatentBatch: sigma below the variance floor");
        }
    }
}

void fill_divergence_matrix(const std::vector<GaussianMixture>& per_class,
                            const LatentBatch& latents, PriorMode mode, double eps,
                            double mean_var, Mat* out) {
    const std::size_t b = latents.size();
    const std::size_t d = latents.dim();
    const std::size_t M = per_class.front().size();
    if (out->rows != b || out->cols != M) *out = Mat(b, M);

    for (std::size_t i = 0; i < b; ++i) {
        const GaussianMixture& mix = per_class[latents.labels[i]];
        const double* mu_x = latents.mu.row(i);
        const double* sd_x = latents.sigma.row(i);
        for (std::size_t m = 0; m < M; ++m) {
            const DiagGaussian& comp = mix.components[m];
            double acc = 0.0;
            if (mode == PriorMode::lossless) {
                for (std::size_t j = 0; j < d; ++j) {
                    const double vp = sd_x[j] * sd_x[j];
                    const double vq = comp.var[j];
                    const double dm = mu_x[j] - comp.mean[j];
                    acc += 0.5 * std::log(vq / vp) + (vp + dm * dm) / (2.0 * vq) - 0.5;
                }
            } else {
                double quad = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double dm = mu_x[j] - comp.mean[j];
                    quad += dm * dm;
                    const double vp = sd_x[j] * sd_x[j] + eps;
                    const double vq = comp.var[j] + eps;
                    acc += 0.5 * std::log(vq / vp) + vp / (2.0 * vq) - 0.5;
                }
                acc += quad / (2.0 * mean_var);
            }
            (*out)(i, m) = acc;
        }
    }
}

void fill_beta_exponent_matrix(const std::vector<GaussianMixture>& per_class,
                               const LatentBatch& latents, PriorMode mode,
                               double mean_var, Mat* out) {
    const std::size_t b = latents.size();
    const std::size_t d = latents.dim();
    const std::size_t M = per_class.front().size();
    if (out->rows != b || out->cols != M) *out = Mat(b, M);

    for (std::size_t i = 0; i < b; ++i) {
        const GaussianMixture& mix = per_class[latents.labels[i]];
        const double* mu_x = latents.mu.row(i);
        for (std::size_t m = 0; m < M; ++m) {
            const DiagGaussian& comp = mix.components[m];
            double acc = 0.0;
            if (mode == PriorMode::lossless) {
                for (std::size_t j = 0; j < d; ++j) {
                    const double dm = mu_x[j] - comp.mean[j];
                    acc += dm * dm / (2.0 * comp.var[j]);
                }
            } else {
                double quad = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double dm = mu_x[j] - comp.mean[j];
                    quad += dm * dm;
                }
                acc = quad / (2.0 * (2.0 * mean_var));
            }
            (*out)(i, m) = acc;
        }
    }
}

void PriorBankSingle::validate() const {
    if (num_classes <= 0 || num_components <= 0 || dim <= 0) {
        throw std::invalid_argument("PriorBankSingle: empty bank");
    }
    if (priors.size() != static_cast<std::size_t>(num_classes)) {
        throw std::invalid_argument("PriorBankSingle: class count mismatch");
    }
    for (const auto& mix : priors) {
        mix.validate();
        if (mix.size() != static_cast<std::size_t>(num_components) ||
            mix.dim() != static_cast<std::size_t>(dim)) {
            throw std::invalid_argument("PriorBankSingle: mixture shape mismatch");
        }
    }
    hyper.validate();
}

PriorBankSingle init_single_bank(const LatentBatch& latents, int num_classes,
                                 int num_components, const UpdateHyper& hyper,
                                 std::uint64_t seed) {
    hyper.validate();
    latents.validate(num_classes);
    if (num_components < 1) throw std::invalid_argument("init_single_bank: M must be >= 1");
    const std::size_t d = latents.dim();
    const std::size_t M = static_cast<std::size_t>(num_components);

    std::vector<std::vector<std::size_t>> by_class(num_classes);
    for (std::size_t i = 0; i < latents.size(); ++i) {
        by_class[latents.labels[i]].push_back(i);
    }

    PriorBankSingle bank;
    bank.num_classes = num_classes;
    bank.num_components = num_components;
    bank.dim = static_cast<int>(d);
    bank.hyper = hyper;
    bank.fallback.assign(num_classes, 0);
    bank.priors.resize(num_classes);

    Rng rng(seed);
    for (int c = 0; c < num_classes; ++c) {
        GaussianMixture& mix = bank.priors[c];
        mix.weights.assign(M, 1.0 / static_cast<double>(M));
        mix.components.resize(M);
        const auto& members = by_class[c];
        if (members.empty()) {
            // No data for this class: standard-normal components, flagged.
            bank.fallback[c] = 1;
            for (std::size_t m = 0; m < M; ++m) {
                mix.components[m] = DiagGaussian(std::vector<double>(d, 0.0),
                                                 std::vector<double>(d, 1.0));
            }
            continue;
        }

        std::vector<std::vector<double>> chosen;
        // First center: uniform over the class samples.
        {
            const std::size_t pick = members[rng.below(members.size())];
            chosen.emplace_back(latents.mu.row(pick), latents.mu.row(pick) + d);
        }
        // Remaining centers: weight by squared distance to the closest
        // already-chosen center (a chosen point has weight zero and is never
        // repeated while distinct samples remain).
        std::vector<double> weights(members.size());
        for (std::size_t m = 1; m < M; ++m) {
            for (std::size_t idx = 0; idx < members.size(); ++idx) {
                const double* mu = latents.mu.row(members[idx]);
                double best = std::numeric_limits<double>::infinity();
                for (const auto& center : chosen) {
                    double dist = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dm = mu[j] - center[j];
                        dist += dm * dm;
                    }
                    best = std::min(best, dist);
                }
                weights[idx] = best;
            }
            const std::size_t pick = members[rng.weighted(weights)];
            chosen.emplace_back(latents.mu.row(pick), latents.mu.row(pick) + d);
        }

        for (std::size_t m = 0; m < M; ++m) {
            std::vector<double> var(d);
            for (std::size_t j = 0; j < d; ++j) {
                const double s = std::abs(rng.normal());
                var[j] = std::max(s * s, kVarFloor);
            }
            mix.components[m] = DiagGaussian(chosen[m], std::move(var));
        }
    }
    return bank;
}

Mat responsibilities(const PriorBankSingle& bank, const LatentBatch& latents) {
    bank.validate();
    latents.validate(bank.num_classes);
    const std::size_t b = latents.size();
    const std::size_t M = static_cast<std::size_t>(bank.num_components);
    const double mean_var = component_mean_var(latents.dim());

    Mat div;
    fill_divergence_matrix(bank.priors, latents, bank.hyper.mode, bank.hyper.eps_lossy,
                           mean_var, &div);

    Mat gamma(b, M);
    std::vector<double> logits(M);
    for (std::size_t i = 0; i < b; ++i) {
        const GaussianMixture& mix = bank.priors[latents.labels[i]];
        for (std::size_t m = 0; m < M; ++m) {
            const double la = mix.weights[m] > 0.0
                                  ? std::log(mix.weights[m])
                                  : -std::numeric_limits<double>::infinity();
            logits[m] = la - div(i, m);
        }
        const double lse = log_sum_exp(logits);
        for (std::size_t m = 0; m < M; ++m) {
            gamma(i, m) = std::exp(logits[m] - lse);
        }
    }
    return gamma;
}

SingleCandidates fit_candidates(const PriorBankSingle& bank, const LatentBatch& latents,
                                const Mat& gamma) {
    bank.validate();
    latents.validate(bank.num_classes);
    const std::size_t b = latents.size();
    const std::size_t d = latents.dim();
    const std::size_t M = static_cast<std::size_t>(bank.num_components);
    require_shape(gamma, b, M, "fit_candidates");

    SingleCandidates out(bank.num_classes);
    for (int c = 0; c < bank.num_classes; ++c) {
        MixtureCandidate& cand = out[c];
        cand.mean = Mat(M, d);
        cand.var = Mat(M, d);
        cand.weight.assign(M, 0.0);
        cand.kept.assign(M, 0);

        std::vector<double> mass(M, 0.0);
        double class_mass = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
            if (latents.labels[i] != c) continue;
            for (std::size_t m = 0; m < M; ++m) {
                mass[m] += gamma(i, m);
                class_mass += gamma(i, m);
            }
        }
        if (class_mass <= 0.0) {
            // Class missing from the batch: no M-step for it.
            cand.class_present = false;
            const GaussianMixture& prev = bank.priors[c];
            for (std::size_t m = 0; m < M; ++m) {
                cand.weight[m] = prev.weights[m];
                cand.kept[m] = 1;
                for (std::size_t j = 0; j < d; ++j) {
                    cand.mean(m, j) = prev.components[m].mean[j];
                    cand.var(m, j) = prev.components[m].var[j];
                }
            }
            continue;
        }
        cand.class_present = true;

        const GaussianMixture& prev = bank.priors[c];
        for (std::size_t m = 0; m < M; ++m) {
            if (mass[m] < bank.hyper.b_min) {
                cand.kept[m] = 1;
                cand.weight[m] = prev.weights[m];
                for (std::size_t j = 0; j < d; ++j) {
                    cand.mean(m, j) = prev.components[m].mean[j];
                    cand.var(m, j) = prev.components[m].var[j];
                }
                continue;
            }
            cand.weight[m] = mass[m] / class_mass;
            for (std::size_t j = 0; j < d; ++j) {
                double mu_acc = 0.0;
                double var_acc = 0.0;
                for (std::size_t i = 0; i < b; ++i) {
                    if (latents.labels[i] != c) continue;
                    const double g = gamma(i, m);
                    if (g == 0.0) continue;
                    const double mu_x = latents.mu(i, j);
                    const double sd_x = latents.sigma(i, j);
                    mu_acc += g * mu_x;
                    if (bank.hyper.mode == PriorMode::lossless) {
                        const double dm = mu_x - prev.components[m].mean[j];
                        var_acc += g * (sd_x * sd_x + dm * dm);
                    } else {
                        var_acc += g * sd_x * sd_x;
                    }
                }
                cand.mean(m, j) = mu_acc / mass[m];
                cand.var(m, j) = std::max(var_acc / mass[m], kVarFloor);
            }
        }
    }
    return out;
}

PriorBankSingle blend_update(const PriorBankSingle& bank, const SingleCandidates& candidates,
                             int iteration, std::uint64_t seed) {
    bank.validate();
    if (candidates.size() != static_cast<std::size_t>(bank.num_classes)) {
        throw std::invalid_argument("blend_update: candidate class count mismatch");
    }
    const std::size_t d = static_cast<std::size_t>(bank.dim);
    const std::size_t M = static_cast<std::size_t>(bank.num_components);
    const double zeta_mean = bank.hyper.zeta.mean_var_at(iteration + 1);
    const double zeta_var = bank.hyper.zeta.var_var_at(iteration + 1);
    const double noise_mean = std::sqrt(zeta_mean);
    const double noise_var = std::sqrt(zeta_var);

    PriorBankSingle next = bank;
    Rng rng(seed);
    for (int c = 0; c < bank.num_classes; ++c) {
        const MixtureCandidate& cand = candidates[c];
        if (!cand.class_present) continue;
        GaussianMixture& mix = next.priors[c];
        double weight_total = 0.0;
        for (std::size_t m = 0; m < M; ++m) {
            DiagGaussian& comp = mix.components[m];
            for (std::size_t j = 0; j < d; ++j) {
                const double z = rng.normal() * noise_mean;
                comp.mean[j] = (1.0 - bank.hyper.eta_mean) * comp.mean[j] +
                               bank.hyper.eta_mean * cand.mean(m, j) + z;
            }
            for (std::size_t j = 0; j < d; ++j) {
                const double z = rng.normal() * noise_var;
                comp.var[j] = std::max((1.0 - bank.hyper.eta_var) * comp.var[j] +
                                           bank.hyper.eta_var * cand.var(m, j) + z,
                                       kVarFloor);
            }
            mix.weights[m] = (1.0 - bank.hyper.eta_weight) * mix.weights[m] +
                             bank.hyper.eta_weight * cand.weight[m];
            weight_total += mix.weights[m];
        }
        for (std::size_t m = 0; m < M; ++m) {
            mix.weights[m] /= weight_total;
        }
        if (bank.hyper.normalize_means) {
            const double target = std::sqrt(static_cast<double>(d));
            for (std::size_t m = 0; m < M; ++m) {
                double norm = 0.0;
                for (double x : mix.components[m].mean) norm += x * x;
                norm = std::sqrt(norm);
                if (norm > 0.0) {
                    for (double& x : mix.components[m].mean) x *= target / norm;
                }
            }
        }
    }
    return next;
}

namespace {

// Shared single-view regularizer core; also used by the multi-view engine
// for the marginals-only mode.
RegResult regularizer_core(const std::vector<GaussianMixture>& per_class,
                           const LatentBatch& latents, const UpdateHyper& hyper) {
    const std::size_t b = latents.size();
    const std::size_t d = latents.dim();
    const std::size_t M = per_class.front().size();
    const double mean_var = component_mean_var(d);
    const double eps = hyper.eps_lossy;

    Mat div;
    fill_divergence_matrix(per_class, latents, hyper.mode, eps, mean_var, &div);

    RegResult res;
    res.d_mu = Mat(b, d);
    res.d_sigma = Mat(b, d);

    std::vector<double> logits(M);
    std::vector<double> gam(M);
    for (std::size_t i = 0; i < b; ++i) {
        const GaussianMixture& mix = per_class[latents.labels[i]];
        for (std::size_t m = 0; m < M; ++m) {
            const double la = mix.weights[m] > 0.0
                                  ? std::log(mix.weights[m])
                                  : -std::numeric_limits<double>::infinity();
            logits[m] = la - div(i, m);
        }
        const double lse = log_sum_exp(logits);
        res.value += -lse;
        for (std::size_t m = 0; m < M; ++m) {
            gam[m] = std::exp(logits[m] - lse);
        }
        const double* mu_x = latents.mu.row(i);
        const double* sd_x = latents.sigma.row(i);
        for (std::size_t m = 0; m < M; ++m) {
            if (gam[m] == 0.0) continue;
            const DiagGaussian& comp = mix.components[m];
            for (std::size_t j = 0; j < d; ++j) {
                if (hyper.mode == PriorMode::lossless) {
                    res.d_mu(i, j) += gam[m] * (mu_x[j] - comp.mean[j]) / comp.var[j];
                    res.d_sigma(i, j) += gam[m] * (sd_x[j] / comp.var[j] - 1.0 / sd_x[j]);
                } else {
                    res.d_mu(i, j) += gam[m] * (mu_x[j] - comp.mean[j]) / mean_var;
                    res.d_sigma(i, j) += gam[m] * (-sd_x[j] / (sd_x[j] * sd_x[j] + eps) +
                                                   sd_x[j] / (comp.var[j] + eps));
                }
            }
        }
    }
    if (hyper.kl_estimate == KlEstimate::var_only) return res;

    // Product-bound half.
    RegResult prod;
    prod.d_mu = Mat(b, d);
    prod.d_sigma = Mat(b, d);
    std::vector<double> w(M);
    for (std::size_t i = 0; i < b; ++i) {
        const GaussianMixture& mix = per_class[latents.labels[i]];
        const double* mu_x = latents.mu.row(i);
        const double* sd_x = latents.sigma.row(i);
        double head = 0.0;
        if (hyper.mode == PriorMode::lossless) {
            for (std::size_t j = 0; j < d; ++j) {
                head += 0.5 * std::log(kTwoPi * std::exp(1.0) * sd_x[j] * sd_x[j]);
            }
        } else {
            head = 0.5 * static_cast<double>(d) *
                   std::log(0.5 * kTwoPi * std::exp(1.0) * (2.0 * mean_var));
        }
        for (std::size_t m = 0; m < M; ++m) {
            const DiagGaussian& comp = mix.components[m];
            double log_t = 0.0;
            if (hyper.mode == PriorMode::lossless) {
                for (std::size_t j = 0; j < d; ++j) {
                    const double dm = mu_x[j] - comp.mean[j];
                    log_t += -dm * dm / (2.0 * comp.var[j]) - 0.5 * std::log(kTwoPi * comp.var[j]);
                }
            } else {
                double quad = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double dm = mu_x[j] - comp.mean[j];
                    quad += dm * dm;
                }
                log_t = -quad / (2.0 * (2.0 * mean_var)) -
                        0.5 * static_cast<double>(d) * std::log(kTwoPi * (2.0 * mean_var));
            }
            logits[m] = (mix.weights[m] > 0.0 ? std::log(mix.weights[m])
                                              : -std::numeric_limits<double>::infinity()) +
                        log_t;
        }
        const double lse = log_sum_exp(logits);
        prod.value += -(head + lse);
        for (std::size_t m = 0; m < M; ++m) {
            w[m] = std::exp(logits[m] - lse);
        }
        for (std::size_t m = 0; m < M; ++m) {
            if (w[m] == 0.0) continue;
            const DiagGaussian& comp = mix.components[m];
            for (std::size_t j = 0; j < d; ++j) {
                const double dm = mu_x[j] - comp.mean[j];
                if (hyper.mode == PriorMode::lossless) {
                    prod.d_mu(i, j) += w[m] * dm / comp.var[j];
                } else {
                    prod.d_mu(i, j) += w[m] * dm / (2.0 * mean_var);
                }
            }
        }
        if (hyper.mode == PriorMode::lossless) {
            for (std::size_t j = 0; j < d; ++j) {
                prod.d_sigma(i, j) += -1.0 / sd_x[j];
            }
        }
    }

    RegResult avg;
    avg.value = 0.5 * (res.value + prod.value);
    avg.d_mu = Mat(b, d);
    avg.d_sigma = Mat(b, d);
    for (std::size_t i = 0; i < b * d; ++i) {
        avg.d_mu.data[i] = 0.5 * (res.d_mu.data[i] + prod.d_mu.data[i]);
        avg.d_sigma.data[i] = 0.5 * (res.d_sigma.data[i] + prod.d_sigma.data[i]);
    }
    return avg;
}

}  // namespace

RegResult mixture_regularizer(const PriorBankSingle& bank, const LatentBatch& latents) {
    bank.validate();
    latents.validate(bank.num_classes);
    return regularizer_core(bank.priors, latents, bank.hyper);
}

RegResult vib_regularizer(const LatentBatch& latents) {
    if (latents.mu.rows != latents.labels.size() || !latents.mu.same_shape(latents.sigma)) {
        throw std::invalid_argument("vib_regularizer: inconsistent shapes");
    }
    const std::size_t b = latents.size();
    const std::size_t d = latents.dim();
    RegResult res;
    res.d_mu = Mat(b, d);
    res.d_sigma = Mat(b, d);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            const double mu = latents.mu(i, j);
            const double sd = latents.sigma(i, j);
            res.value += 0.5 * (sd * sd + mu * mu - 1.0) - std::log(sd);
            res.d_mu(i, j) = mu;
            res.d_sigma(i, j) = sd - 1.0 / sd;
        }
    }
    return res;
}

double prior_log_density(const PriorBankSingle& bank, const Mat& samples,
                         const std::vector<int>& labels) {
    bank.validate();
    if (samples.rows != labels.size() || samples.cols != static_cast<std::size_t>(bank.dim)) {
        throw std::invalid_argument("prior_log_density: shape mismatch");
    }
    const std::size_t M = static_cast<std::size_t>(bank.num_components);
    const std::size_t d = static_cast<std::size_t>(bank.dim);
    std::vector<double> logits(M);
    double total = 0.0;
    for (std::size_t i = 0; i < samples.rows; ++i) {
        const GaussianMixture& mix = bank.priors[labels[i]];
        const double* u = samples.row(i);
        for (std::size_t m = 0; m < M; ++m) {
            const DiagGaussian& comp = mix.components[m];
            double lp = mix.weights[m] > 0.0 ? std::log(mix.weights[m])
                                             : -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < d; ++j) {
                const double dm = u[j] - comp.mean[j];
                lp += -0.5 * std::log(kTwoPi * comp.var[j]) - dm * dm / (2.0 * comp.var[j]);
            }
            logits[m] = lp;
        }
        total += log_sum_exp(logits);
    }
    return total;
}

namespace {

nlohmann::json hyper_to_json(const UpdateHyper& h);
UpdateHyper hyper_from_json(const nlohmann::json& j);

}  // namespace

std::string hyper_to_json_string(const UpdateHyper& hyper) {
    return hyper_to_json(hyper).dump();
}

UpdateHyper hyper_from_json_string(const std::string& text) {
    return hyper_from_json(nlohmann::json::parse(text));
}

namespace {

nlohmann::json hyper_to_json(const UpdateHyper& h) {
    return nlohmann::json{
        {"eta_mean", h.eta_mean},
        {"eta_var", h.eta_var},
        {"eta_weight", h.eta_weight},
        {"zeta", {{"zeta0_mean", h.zeta.zeta0_mean}, {"zeta0_var", h.zeta.zeta0_var},
                  {"decay", h.zeta.decay}}},
        {"eps_lossy", h.eps_lossy},
        {"mode", h.mode == PriorMode::lossless ? "lossless" : "lossy"},
        {"kl_estimate", h.kl_estimate == KlEstimate::var_only ? "var_only" : "avg_var_prod"},
        {"b_min", h.b_min},
        {"normalize_means", h.normalize_means},
    };
}

UpdateHyper hyper_from_json(const nlohmann::json& j) {
    UpdateHyper h;
    h.eta_mean = j.at("eta_mean").get<double>();
    h.eta_var = j.at("eta_var").get<double>();
    h.eta_weight = j.at("eta_weight").get<double>();
    h.zeta.zeta0_mean = j.at("zeta").at("zeta0_mean").get<double>();
    h.zeta.zeta0_var = j.at("zeta").at("zeta0_var").get<double>();
    h.zeta.decay = j.at("zeta").at("decay").get<double>();
    h.eps_lossy = j.at("eps_lossy").get<double>();
    h.mode = j.at("mode").get<std::string>() == "lossy" ? PriorMode::lossy : PriorMode::lossless;
    h.kl_estimate = j.at("kl_estimate").get<std::string>() == "var_only"
                        ? KlEstimate::var_only
                        : KlEstimate::avg_var_prod;
    h.b_min = j.at("b_min").get<double>();
    h.normalize_means = j.at("normalize_means").get<bool>();
    return h;
}

}  // namespace

std::string bank_to_json(const PriorBankSingle& bank) {
    bank.validate();
    nlohmann::json j;
    j["format"] = "mvmdl.prior_single";
    j["version"] = 1;
    j["num_classes"] = bank.num_classes;
    j["num_components"] = bank.num_components;
    j["dim"] = bank.dim;
    j["fallback"] = bank.fallback;
    j["hyper"] = hyper_to_json(bank.hyper);
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& mix : bank.priors) {
        nlohmann::json entry;
        entry["weights"] = mix.weights;
        nlohmann::json means = nlohmann::json::array();
        nlohmann::json vars = nlohmann::json::array();
        for (const auto& comp : mix.components) {
            means.push_back(comp.mean);
            vars.push_back(comp.var);
        }
        entry["means"] = means;
        entry["vars"] = vars;
        classes.push_back(entry);
    }
    j["classes"] = classes;
    return j.dump(2);
}

PriorBankSingle bank_from_json(const std::string& text) {
    const nlohmann::json j = nlohmann::json::parse(text);
    if (j.at("format").get<std::string>() != "mvmdl.prior_single") {
        throw std::invalid_argument("bank_from_json: unexpected format tag");
    }
    PriorBankSingle bank;
    bank.num_classes = j.at("num_classes").get<int>();
    bank.num_components = j.at("num_components").get<int>();
    bank.dim = j.at("dim").get<int>();
    bank.fallback = j.at("fallback").get<std::vector<std::uint8_t>>();
    bank.hyper = hyper_from_json(j.at("hyper"));
    for (const auto& entry : j.at("classes")) {
        GaussianMixture mix;
        mix.weights = entry.at("weights").get<std::vector<double>>();
        const auto& means = entry.at("means");
        const auto& vars = entry.at("vars");
        for (std::size_t m = 0; m < means.size(); ++m) {
            mix.components.emplace_back(means[m].get<std::vector<double>>(),
                                        vars[m].get<std::vector<double>>());
        }
        bank.priors.push_back(std::move(mix));
    }
    bank.validate();
    return bank;
}

}  // namespace mvmdl
