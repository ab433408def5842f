#include "mvmdl/prior_multi.hpp"

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
constexpr double kJointMassFloor = 1e-6;  // joint cells below this keep previous alpha

double joint_mean_var(int num_views, std::size_t d) {
    return 0.5 * std::sqrt(static_cast<double>(num_views) * static_cast<double>(d));
}

// Odometer over (m_1, ..., m_K), m_K fastest.
struct JointIndex {
    std::vector<int> m;
    int M;
    explicit JointIndex(int K, int M_) : m(K, 0), M(M_) {}
    bool advance() {
        for (int k = static_cast<int>(m.size()) - 1; k >= 0; --k) {
            if (++m[k] < M) return true;
            m[k] = 0;
        }
        return false;
    }
};

}  // namespace

std::size_t joint_cells(int num_components, int num_views) {
    if (num_components < 1 || num_views < 1) {
        throw std::invalid_argument("joint_cells: M and K must be >= 1");
    }
    std::size_t cells = 1;
    for (int k = 0; k < num_views; ++k) {
        cells *= static_cast<std::size_t>(num_components);
        if (cells > kJointBudget) {
            throw std::invalid_argument("joint prior budget exceeded: M^K > 65536");
        }
    }
    return cells;
}

void ProductMixturePrior::validate() const {
    if (num_classes <= 0 || num_views <= 0 || num_components <= 0 || dim <= 0) {
        throw std::invalid_argument("ProductMixturePrior: empty prior");
    }
    const std::size_t cells = joint_cells(num_components, num_views);
    if (joint_weights.size() != static_cast<std::size_t>(num_classes) ||
        views.size() != static_cast<std::size_t>(num_classes)) {
        throw std::invalid_argument("ProductMixturePrior: class count mismatch");
    }
    if (eps_view.size() != static_cast<std::size_t>(num_views)) {
        throw std::invalid_argument("ProductMixturePrior: eps_view size mismatch");
    }
    for (double e : eps_view) {
        if (!(e > 0.0)) throw std::invalid_argument("ProductMixturePrior: eps_view entries must be > 0");
    }
    for (int c = 0; c < num_classes; ++c) {
        if (joint_weights[c].size() != cells) {
            throw std::invalid_argument("ProductMixturePrior: joint tensor size mismatch");
        }
        double total = 0.0;
        for (double a : joint_weights[c]) {
            if (!(a >= 0.0)) throw std::invalid_argument("ProductMixturePrior: negative joint weight");
            total += a;
        }
        if (std::abs(total - 1.0) > 1e-9) {
            throw std::invalid_argument("ProductMixturePrior: joint weights must sum to 1");
        }
        if (views[c].size() != static_cast<std::size_t>(num_views)) {
            throw std::invalid_argument("ProductMixturePrior: view bank count mismatch");
        }
        for (const auto& mix : views[c]) {
            mix.validate();
            if (mix.size() != static_cast<std::size_t>(num_components) ||
                mix.dim() != static_cast<std::size_t>(dim)) {
                throw std::invalid_argument("ProductMixturePrior: view mixture shape mismatch");
            }
        }
    }
    hyper.validate();
}

double ProductMixturePrior::marginal_weight(int c, int k, int m) const {
    const std::size_t cells = joint_cells(num_components, num_views);
    double acc = 0.0;
    JointIndex idx(num_views, num_components);
    for (std::size_t cell = 0; cell < cells; ++cell) {
        if (idx.m[k] == m) acc += joint_weights[c][cell];
        idx.advance();
    }
    return acc;
}

void MultiLatentBatch::validate(int num_classes) const {
    if (view.empty()) throw std::invalid_argument("MultiLatentBatch: needs at least one view");
    for (const auto& v : view) {
        v.validate(num_classes);
        if (v.size() != size() || v.dim() != dim()) {
            throw std::invalid_argument("MultiLatentBatch: inconsistent view shapes");
        }
        if (v.labels != labels()) {
            throw std::invalid_argument("MultiLatentBatch: views disagree on labels");
        }
    }
}

ProductMixturePrior init_multi_bank(const MultiLatentBatch& latents, int num_classes,
                                    int num_components, const UpdateHyper& hyper,
                                    std::uint64_t seed) {
    hyper.validate();
    latents.validate(num_classes);
    const int K = static_cast<int>(latents.num_views());
    const std::size_t d = latents.dim();
    const std::size_t M = static_cast<std::size_t>(num_components);
    const std::size_t cells = joint_cells(num_components, K);

    std::vector<std::vector<std::size_t>> by_class(num_classes);
    for (std::size_t i = 0; i < latents.size(); ++i) {
        by_class[latents.labels()[i]].push_back(i);
    }

    ProductMixturePrior prior;
    prior.num_classes = num_classes;
    prior.num_views = K;
    prior.num_components = num_components;
    prior.dim = static_cast<int>(d);
    prior.hyper = hyper;
    prior.eps_view.assign(K, hyper.eps_lossy);
    prior.fallback.assign(num_classes, 0);
    prior.joint_weights.assign(num_classes,
                               std::vector<double>(cells, 1.0 / static_cast<double>(cells)));
    prior.views.resize(num_classes);

    Rng rng(seed);
    for (int c = 0; c < num_classes; ++c) {
        prior.views[c].assign(K, GaussianMixture{});
        for (int k = 0; k < K; ++k) {
            prior.views[c][k].weights.assign(M, 1.0 / static_cast<double>(M));
            prior.views[c][k].components.resize(M);
        }
        const auto& members = by_class[c];
        if (members.empty()) {
            prior.fallback[c] = 1;
            for (int k = 0; k < K; ++k) {
                for (std::size_t m = 0; m < M; ++m) {
                    prior.views[c][k].components[m] = DiagGaussian(
                        std::vector<double>(d, 0.0), std::vector<double>(d, 1.0));
                }
            }
            continue;
        }

        // Chosen sample index per component; the K view-means of component m
        // all come from the same sample.
        std::vector<std::size_t> chosen;
        chosen.push_back(members[rng.below(members.size())]);
        std::vector<double> weights(members.size());
        for (std::size_t m = 1; m < M; ++m) {
            for (std::size_t idx = 0; idx < members.size(); ++idx) {
                double best = std::numeric_limits<double>::infinity();
                for (std::size_t prev : chosen) {
                    double dist = 0.0;
                    for (int k = 0; k < K; ++k) {
                        const double* a = latents.view[k].mu.row(members[idx]);
                        const double* b = latents.view[k].mu.row(prev);
                        for (std::size_t j = 0; j < d; ++j) {
                            const double dm = a[j] - b[j];
                            dist += dm * dm;
                        }
                    }
                    best = std::min(best, dist);
                }
                weights[idx] = best;
            }
            chosen.push_back(members[rng.weighted(weights)]);
        }

        for (std::size_t m = 0; m < M; ++m) {
            for (int k = 0; k < K; ++k) {
                const double* mu = latents.view[k].mu.row(chosen[m]);
                std::vector<double> mean(mu, mu + d);
                std::vector<double> var(d);
                for (std::size_t j = 0; j < d; ++j) {
                    const double s = std::abs(rng.normal());
                    var[j] = std::max(s * s, kVarFloor);
                }
                prior.views[c][k].components[m] = DiagGaussian(std::move(mean), std::move(var));
            }
        }
    }
    return prior;
}

Mat view_divergence_matrix(const ProductMixturePrior& prior, const LatentBatch& latents_k,
                           int k) {
    std::vector<GaussianMixture> per_class(prior.num_classes);
    for (int c = 0; c < prior.num_classes; ++c) per_class[c] = prior.views[c][k];
    Mat out;
    fill_divergence_matrix(per_class, latents_k, prior.hyper.mode, prior.eps_view[k],
                           joint_mean_var(prior.num_views, latents_k.dim()), &out);
    return out;
}

Mat view_beta_exponent_matrix(const ProductMixturePrior& prior, const LatentBatch& latents_k,
                              int k) {
    std::vector<GaussianMixture> per_class(prior.num_classes);
    for (int c = 0; c < prior.num_classes; ++c) per_class[c] = prior.views[c][k];
    Mat out;
    fill_beta_exponent_matrix(per_class, latents_k, prior.hyper.mode,
                              joint_mean_var(prior.num_views, latents_k.dim()), &out);
    return out;
}

Mat joint_responsibilities(const ProductMixturePrior& prior, const MultiLatentBatch& latents) {
    prior.validate();
    latents.validate(prior.num_classes);
    const std::size_t cells = joint_cells(prior.num_components, prior.num_views);
    const std::size_t b = latents.size();
    const int K = prior.num_views;

    std::vector<Mat> div(K);
    for (int k = 0; k < K; ++k) div[k] = view_divergence_matrix(prior, latents.view[k], k);

    Mat gamma(b, cells);
    std::vector<double> logits(cells);
    for (std::size_t i = 0; i < b; ++i) {
        const std::vector<double>& alpha = prior.joint_weights[latents.labels()[i]];
        JointIndex idx(K, prior.num_components);
        for (std::size_t cell = 0; cell < cells; ++cell) {
            double lg = alpha[cell] > 0.0 ? std::log(alpha[cell])
                                          : -std::numeric_limits<double>::infinity();
            for (int k = 0; k < K; ++k) lg -= div[k](i, idx.m[k]);
            logits[cell] = lg;
            idx.advance();
        }
        const double lse = log_sum_exp(logits);
        for (std::size_t cell = 0; cell < cells; ++cell) {
            gamma(i, cell) = std::exp(logits[cell] - lse);
        }
    }
    return gamma;
}

std::vector<Mat> marginalize(const Mat& gamma_joint, int num_views, int num_components) {
    const std::size_t cells = joint_cells(num_components, num_views);
    if (gamma_joint.cols != cells) {
        throw std::invalid_argument("marginalize: tensor width is not M^K");
    }
    std::vector<Mat> marg(num_views, Mat(gamma_joint.rows, num_components));
    for (std::size_t i = 0; i < gamma_joint.rows; ++i) {
        JointIndex idx(num_views, num_components);
        for (std::size_t cell = 0; cell < cells; ++cell) {
            const double g = gamma_joint(i, cell);
            for (int k = 0; k < num_views; ++k) {
                marg[k](i, idx.m[k]) += g;
            }
            idx.advance();
        }
    }
    return marg;
}

JointEmOutputs joint_em_from_reports(const ProductMixturePrior& prior,
                                     const std::vector<int>& labels,
                                     const std::vector<Mat>& divergences,
                                     const std::vector<Mat>& beta_exponents) {
    const int K = prior.num_views;
    const int M = prior.num_components;
    const std::size_t cells = joint_cells(M, K);
    const std::size_t b = labels.size();
    if (divergences.size() != static_cast<std::size_t>(K) ||
        beta_exponents.size() != static_cast<std::size_t>(K)) {
        throw std::invalid_argument("joint_em_from_reports: need one report per view");
    }

    JointEmOutputs out;
    out.gamma_marg.assign(K, Mat(b, M));
    out.blend_marg.assign(K, Mat(b, M));
    out.class_present.assign(prior.num_classes, 0);
    out.joint_weight_candidate.assign(prior.num_classes, std::vector<double>());
    out.joint_kept.assign(prior.num_classes, std::vector<std::uint8_t>());

    // Accumulated (gamma+beta)/2 mass per class and joint cell.
    std::vector<std::vector<double>> tilde_mass(prior.num_classes,
                                                std::vector<double>(cells, 0.0));

    const bool beta_from_alpha =
        prior.hyper.mode == PriorMode::lossy && prior.hyper.normalize_means;
    std::vector<double> gamma_logits(cells), beta_logits(cells);
    std::vector<double> gamma_row(cells), beta_row(cells);
    for (std::size_t i = 0; i < b; ++i) {
        const int y = labels[i];
        out.class_present[y] = 1;
        const std::vector<double>& alpha = prior.joint_weights[y];
        JointIndex idx(K, M);
        for (std::size_t cell = 0; cell < cells; ++cell) {
            const double la = alpha[cell] > 0.0 ? std::log(alpha[cell])
                                                : -std::numeric_limits<double>::infinity();
            double lg = la, lb = la;
            for (int k = 0; k < K; ++k) {
                lg -= divergences[k](i, idx.m[k]);
                if (!beta_from_alpha) lb -= beta_exponents[k](i, idx.m[k]);
            }
            gamma_logits[cell] = lg;
            beta_logits[cell] = lb;
            idx.advance();
        }
        const double lse_g = log_sum_exp(gamma_logits);
        const double lse_b = beta_from_alpha ? 0.0 : log_sum_exp(beta_logits);
        JointIndex idx2(K, M);
        for (std::size_t cell = 0; cell < cells; ++cell) {
            const double g = std::exp(gamma_logits[cell] - lse_g);
            const double bt = beta_from_alpha ? alpha[cell]
                                              : std::exp(beta_logits[cell] - lse_b);
            gamma_row[cell] = g;
            beta_row[cell] = bt;
            tilde_mass[y][cell] += 0.5 * (g + bt);
            const double blend = prior.hyper.mode == PriorMode::lossless
                                     ? 0.5 * (g + bt)
                                     : (2.0 * g + bt) / 3.0;
            for (int k = 0; k < K; ++k) {
                out.gamma_marg[k](i, idx2.m[k]) += g;
                out.blend_marg[k](i, idx2.m[k]) += blend;
            }
            idx2.advance();
        }
    }

    for (int c = 0; c < prior.num_classes; ++c) {
        auto& cand = out.joint_weight_candidate[c];
        auto& kept = out.joint_kept[c];
        cand.assign(cells, 0.0);
        kept.assign(cells, 0);
        if (!out.class_present[c]) {
            cand = prior.joint_weights[c];
            std::fill(kept.begin(), kept.end(), 1);
            continue;
        }
        double total = 0.0;
        for (std::size_t cell = 0; cell < cells; ++cell) total += tilde_mass[c][cell];
        double cand_total = 0.0;
        for (std::size_t cell = 0; cell < cells; ++cell) {
            if (tilde_mass[c][cell] < kJointMassFloor) {
                kept[cell] = 1;
                cand[cell] = prior.joint_weights[c][cell];
            } else {
                cand[cell] = tilde_mass[c][cell] / total;
            }
            cand_total += cand[cell];
        }
        // Kept cells carry their old mass, so the vector needs rescaling to
        // stay on the simplex.
        for (std::size_t cell = 0; cell < cells; ++cell) cand[cell] /= cand_total;
    }
    return out;
}

ViewCandidate view_m_step_from_marginals(const std::vector<GaussianMixture>& bank,
                                         const UpdateHyper& hyper,
                                         const LatentBatch& latents_k, const Mat& gamma_marg,
                                         const Mat& blend_marg,
                                         const std::vector<std::uint8_t>& class_present) {
    const std::size_t b = latents_k.size();
    const std::size_t d = latents_k.dim();
    const std::size_t M = bank.front().size();
    const int num_classes = static_cast<int>(bank.size());
    require_shape(gamma_marg, b, M, "view_m_step_from_marginals");
    require_shape(blend_marg, b, M, "view_m_step_from_marginals");

    ViewCandidate out;
    out.mean.assign(num_classes, Mat(M, d));
    out.var.assign(num_classes, Mat(M, d));
    out.kept.assign(num_classes, std::vector<std::uint8_t>(M, 0));

    for (int c = 0; c < num_classes; ++c) {
        const GaussianMixture& prev = bank[c];
        if (!class_present[c]) {
            for (std::size_t m = 0; m < M; ++m) {
                out.kept[c][m] = 1;
                for (std::size_t j = 0; j < d; ++j) {
                    out.mean[c](m, j) = prev.components[m].mean[j];
                    out.var[c](m, j) = prev.components[m].var[j];
                }
            }
            continue;
        }
        std::vector<double> gamma_mass(M, 0.0), blend_mass(M, 0.0);
        for (std::size_t i = 0; i < b; ++i) {
            if (latents_k.labels[i] != c) continue;
            for (std::size_t m = 0; m < M; ++m) {
                gamma_mass[m] += gamma_marg(i, m);
                blend_mass[m] += blend_marg(i, m);
            }
        }
        for (std::size_t m = 0; m < M; ++m) {
            if (gamma_mass[m] < hyper.b_min || blend_mass[m] < hyper.b_min) {
                out.kept[c][m] = 1;
                for (std::size_t j = 0; j < d; ++j) {
                    out.mean[c](m, j) = prev.components[m].mean[j];
                    out.var[c](m, j) = prev.components[m].var[j];
                }
                continue;
            }
            for (std::size_t j = 0; j < d; ++j) {
                double mean_acc = 0.0;
                double var_acc = 0.0;
                for (std::size_t i = 0; i < b; ++i) {
                    if (latents_k.labels[i] != c) continue;
                    const double mu_x = latents_k.mu(i, j);
                    const double sd_x = latents_k.sigma(i, j);
                    mean_acc += blend_marg(i, m) * mu_x;
                    if (hyper.mode == PriorMode::lossless) {
                        const double dm = mu_x - prev.components[m].mean[j];
                        // gamma carries the latent variance, (gamma+beta)
                        // the squared offset from the previous mean.
                        var_acc += gamma_marg(i, m) * sd_x * sd_x +
                                   2.0 * blend_marg(i, m) * dm * dm;
                    } else {
                        var_acc += gamma_marg(i, m) * sd_x * sd_x;
                    }
                }
                out.mean[c](m, j) = mean_acc / blend_mass[m];
                out.var[c](m, j) = std::max(var_acc / gamma_mass[m], kVarFloor);
            }
        }
    }
    return out;
}

JointCandidates fit_joint_candidates(const ProductMixturePrior& prior,
                                     const MultiLatentBatch& latents, const Mat& gamma_joint) {
    prior.validate();
    latents.validate(prior.num_classes);
    const int K = prior.num_views;
    const std::size_t cells = joint_cells(prior.num_components, K);
    require_shape(gamma_joint, latents.size(), cells, "fit_joint_candidates");

    std::vector<Mat> div(K), beta_exp(K);
    for (int k = 0; k < K; ++k) {
        div[k] = view_divergence_matrix(prior, latents.view[k], k);
        beta_exp[k] = view_beta_exponent_matrix(prior, latents.view[k], k);
    }
    // gamma_joint is accepted from the caller for API symmetry with the
    // single-view engine; joint_em recomputes the same softmax from the
    // divergence matrices, which is also what the distributed server does.
    JointEmOutputs em = joint_em_from_reports(prior, latents.labels(), div, beta_exp);

    JointCandidates out(prior.num_classes);
    std::vector<ViewCandidate> per_view(K);
    for (int k = 0; k < K; ++k) {
        std::vector<GaussianMixture> bank(prior.num_classes);
        for (int c = 0; c < prior.num_classes; ++c) bank[c] = prior.views[c][k];
        per_view[k] = view_m_step_from_marginals(bank, prior.hyper, latents.view[k],
                                                 em.gamma_marg[k], em.blend_marg[k],
                                                 em.class_present);
    }
    for (int c = 0; c < prior.num_classes; ++c) {
        JointClassCandidate& cand = out[c];
        cand.class_present = em.class_present[c] != 0;
        cand.joint_weight = em.joint_weight_candidate[c];
        cand.joint_kept = em.joint_kept[c];
        cand.mean.resize(K);
        cand.var.resize(K);
        cand.comp_kept.resize(K);
        for (int k = 0; k < K; ++k) {
            cand.mean[k] = per_view[k].mean[c];
            cand.var[k] = per_view[k].var[c];
            cand.comp_kept[k] = per_view[k].kept[c];
        }
    }
    return out;
}

void blend_view_components(std::vector<GaussianMixture>* bank, const UpdateHyper& hyper,
                           const ViewCandidate& candidate,
                           const std::vector<std::uint8_t>& class_present, int iteration,
                           std::uint64_t view_seed) {
    const std::size_t d = bank->front().dim();
    const std::size_t M = bank->front().size();
    const int num_classes = static_cast<int>(bank->size());
    const double noise_mean = std::sqrt(hyper.zeta.mean_var_at(iteration + 1));
    const double noise_var = std::sqrt(hyper.zeta.var_var_at(iteration + 1));

    Rng rng(view_seed);
    for (int c = 0; c < num_classes; ++c) {
        if (!class_present[c]) continue;
        GaussianMixture& mix = (*bank)[c];
        for (std::size_t m = 0; m < M; ++m) {
            DiagGaussian& comp = mix.components[m];
            for (std::size_t j = 0; j < d; ++j) {
                const double z = rng.normal() * noise_mean;
                comp.mean[j] = (1.0 - hyper.eta_mean) * comp.mean[j] +
                               hyper.eta_mean * candidate.mean[c](m, j) + z;
            }
            for (std::size_t j = 0; j < d; ++j) {
                const double z = rng.normal() * noise_var;
                comp.var[j] = std::max((1.0 - hyper.eta_var) * comp.var[j] +
                                           hyper.eta_var * candidate.var[c](m, j) + z,
                                       kVarFloor);
            }
        }
        if (hyper.normalize_means) {
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
}

void blend_joint_weights(ProductMixturePrior* prior,
                         const std::vector<std::vector<double>>& joint_weight_candidate,
                         const std::vector<std::uint8_t>& class_present) {
    const double eta = prior->hyper.eta_weight;
    for (int c = 0; c < prior->num_classes; ++c) {
        if (!class_present[c]) continue;
        auto& alpha = prior->joint_weights[c];
        double total = 0.0;
        for (std::size_t cell = 0; cell < alpha.size(); ++cell) {
            alpha[cell] = (1.0 - eta) * alpha[cell] + eta * joint_weight_candidate[c][cell];
            total += alpha[cell];
        }
        for (double& a : alpha) a /= total;
    }
    refresh_marginal_cache(prior);
}

void refresh_marginal_cache(ProductMixturePrior* prior) {
    const int K = prior->num_views;
    const int M = prior->num_components;
    const std::size_t cells = joint_cells(M, K);
    for (int c = 0; c < prior->num_classes; ++c) {
        for (int k = 0; k < K; ++k) {
            std::fill(prior->views[c][k].weights.begin(), prior->views[c][k].weights.end(), 0.0);
        }
        JointIndex idx(K, M);
        for (std::size_t cell = 0; cell < cells; ++cell) {
            const double a = prior->joint_weights[c][cell];
            for (int k = 0; k < K; ++k) {
                prior->views[c][k].weights[idx.m[k]] += a;
            }
            idx.advance();
        }
    }
}

ProductMixturePrior blend_update(const ProductMixturePrior& prior,
                                 const JointCandidates& candidates, int iteration,
                                 std::uint64_t seed) {
    prior.validate();
    if (candidates.size() != static_cast<std::size_t>(prior.num_classes)) {
        throw std::invalid_argument("blend_update: candidate class count mismatch");
    }
    std::vector<std::uint8_t> class_present(prior.num_classes, 0);
    std::vector<std::vector<double>> joint_cand(prior.num_classes);
    for (int c = 0; c < prior.num_classes; ++c) {
        class_present[c] = candidates[c].class_present ? 1 : 0;
        joint_cand[c] = candidates[c].joint_weight;
    }

    ProductMixturePrior next = prior;
    for (int k = 0; k < prior.num_views; ++k) {
        ViewCandidate vc;
        vc.mean.resize(prior.num_classes);
        vc.var.resize(prior.num_classes);
        vc.kept.resize(prior.num_classes);
        for (int c = 0; c < prior.num_classes; ++c) {
            vc.mean[c] = candidates[c].mean[k];
            vc.var[c] = candidates[c].var[k];
            vc.kept[c] = candidates[c].comp_kept[k];
        }
        std::vector<GaussianMixture> bank(prior.num_classes);
        for (int c = 0; c < prior.num_classes; ++c) bank[c] = next.views[c][k];
        blend_view_components(&bank, prior.hyper, vc, class_present, iteration,
                              derive_seed(seed, static_cast<std::uint64_t>(k)));
        for (int c = 0; c < prior.num_classes; ++c) next.views[c][k] = bank[c];
    }
    blend_joint_weights(&next, joint_cand, class_present);
    return next;
}

Mat view_log_prod_matrix(const ProductMixturePrior& prior, const LatentBatch& latents_k, int k) {
    const std::size_t b = latents_k.size();
    const std::size_t d = latents_k.dim();
    const int M = prior.num_components;
    const double mean_var = joint_mean_var(prior.num_views, d);
    const bool lossless = prior.hyper.mode == PriorMode::lossless;
    Mat log_t(b, M);
    for (std::size_t i = 0; i < b; ++i) {
        const GaussianMixture& mix = prior.views[latents_k.labels[i]][k];
        for (int m = 0; m < M; ++m) {
            const DiagGaussian& comp = mix.components[m];
            double lt = 0.0;
            if (lossless) {
                for (std::size_t j = 0; j < d; ++j) {
                    const double dm = latents_k.mu(i, j) - comp.mean[j];
                    lt += -dm * dm / (2.0 * comp.var[j]) - 0.5 * std::log(kTwoPi * comp.var[j]);
                }
            } else {
                double quad = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double dm = latents_k.mu(i, j) - comp.mean[j];
                    quad += dm * dm;
                }
                lt = -quad / (2.0 * (2.0 * mean_var)) -
                     0.5 * static_cast<double>(d) * std::log(kTwoPi * (2.0 * mean_var));
            }
            log_t(i, m) = lt;
        }
    }
    return log_t;
}

JointSoftmaxOut joint_softmax_marginals(const ProductMixturePrior& prior,
                                        const std::vector<int>& labels,
                                        const std::vector<Mat>& addends) {
    const int K = prior.num_views;
    const int M = prior.num_components;
    const std::size_t cells = joint_cells(M, K);
    const std::size_t b = labels.size();
    if (addends.size() != static_cast<std::size_t>(K)) {
        throw std::invalid_argument("joint_softmax_marginals: need one addend matrix per view");
    }
    JointSoftmaxOut out;
    out.lse.resize(b);
    out.marg.assign(K, Mat(b, M));
    std::vector<double> logits(cells);
    for (std::size_t i = 0; i < b; ++i) {
        const std::vector<double>& alpha = prior.joint_weights[labels[i]];
        JointIndex idx(K, M);
        for (std::size_t cell = 0; cell < cells; ++cell) {
            double lg = alpha[cell] > 0.0 ? std::log(alpha[cell])
                                          : -std::numeric_limits<double>::infinity();
            for (int k = 0; k < K; ++k) lg += addends[k](i, idx.m[k]);
            logits[cell] = lg;
            idx.advance();
        }
        const double lse = log_sum_exp(logits);
        out.lse[i] = lse;
        JointIndex idx2(K, M);
        for (std::size_t cell = 0; cell < cells; ++cell) {
            const double g = std::exp(logits[cell] - lse);
            for (int k = 0; k < K; ++k) out.marg[k](i, idx2.m[k]) += g;
            idx2.advance();
        }
    }
    return out;
}

void accumulate_var_gradients(const std::vector<GaussianMixture>& per_class,
                              const LatentBatch& latents_k, const Mat& gamma_marg,
                              PriorMode mode, double eps, double mean_var, Mat* d_mu,
                              Mat* d_sigma) {
    const std::size_t b = latents_k.size();
    const std::size_t d = latents_k.dim();
    const int M = static_cast<int>(per_class.front().size());
    const bool lossless = mode == PriorMode::lossless;
    for (std::size_t i = 0; i < b; ++i) {
        const GaussianMixture& mix = per_class[latents_k.labels[i]];
        for (int m = 0; m < M; ++m) {
            const double g = gamma_marg(i, m);
            if (g == 0.0) continue;
            const DiagGaussian& comp = mix.components[m];
            for (std::size_t j = 0; j < d; ++j) {
                const double mu_x = latents_k.mu(i, j);
                const double sd_x = latents_k.sigma(i, j);
                if (lossless) {
                    (*d_mu)(i, j) += g * (mu_x - comp.mean[j]) / comp.var[j];
                    (*d_sigma)(i, j) += g * (sd_x / comp.var[j] - 1.0 / sd_x);
                } else {
                    (*d_mu)(i, j) += g * (mu_x - comp.mean[j]) / mean_var;
                    (*d_sigma)(i, j) += g * (-sd_x / (sd_x * sd_x + eps) +
                                             sd_x / (comp.var[j] + eps));
                }
            }
        }
    }
}

void accumulate_prod_gradients(const std::vector<GaussianMixture>& per_class,
                               const LatentBatch& latents_k, const Mat& prod_marg,
                               PriorMode mode, double mean_var, Mat* d_mu, Mat* d_sigma) {
    const std::size_t b = latents_k.size();
    const std::size_t d = latents_k.dim();
    const int M = static_cast<int>(per_class.front().size());
    const bool lossless = mode == PriorMode::lossless;
    for (std::size_t i = 0; i < b; ++i) {
        const GaussianMixture& mix = per_class[latents_k.labels[i]];
        for (int m = 0; m < M; ++m) {
            const double w = prod_marg(i, m);
            if (w == 0.0) continue;
            const DiagGaussian& comp = mix.components[m];
            for (std::size_t j = 0; j < d; ++j) {
                const double dm = latents_k.mu(i, j) - comp.mean[j];
                if (lossless) {
                    (*d_mu)(i, j) += w * dm / comp.var[j];
                } else {
                    (*d_mu)(i, j) += w * dm / (2.0 * mean_var);
                }
            }
        }
        if (lossless) {
            // differential-entropy head of the product bound
            for (std::size_t j = 0; j < d; ++j) {
                (*d_sigma)(i, j) += -1.0 / latents_k.sigma(i, j);
            }
        }
    }
}

namespace {

// Shared core of the joint regularizer, assembled from the stage functions
// the distributed runtime also uses.
MultiRegResult joint_reg_core(const ProductMixturePrior& prior,
                              const MultiLatentBatch& latents) {
    const int K = prior.num_views;
    const std::size_t b = latents.size();
    const std::size_t d = latents.dim();
    const double mean_var = joint_mean_var(K, d);
    const bool lossless = prior.hyper.mode == PriorMode::lossless;

    std::vector<std::vector<GaussianMixture>> per_class(K);
    for (int k = 0; k < K; ++k) {
        per_class[k].resize(prior.num_classes);
        for (int c = 0; c < prior.num_classes; ++c) per_class[k][c] = prior.views[c][k];
    }

    std::vector<Mat> neg_div(K);
    for (int k = 0; k < K; ++k) {
        neg_div[k] = view_divergence_matrix(prior, latents.view[k], k);
        for (auto& v : neg_div[k].data) v = -v;
    }
    const JointSoftmaxOut var_out = joint_softmax_marginals(prior, latents.labels(), neg_div);

    MultiRegResult res;
    res.d_mu.assign(K, Mat(b, d));
    res.d_sigma.assign(K, Mat(b, d));
    for (std::size_t i = 0; i < b; ++i) res.value += -var_out.lse[i];
    for (int k = 0; k < K; ++k) {
        accumulate_var_gradients(per_class[k], latents.view[k], var_out.marg[k],
                                 prior.hyper.mode, prior.eps_view[k], mean_var, &res.d_mu[k],
                                 &res.d_sigma[k]);
    }
    if (prior.hyper.kl_estimate == KlEstimate::var_only) return res;

    std::vector<Mat> log_t(K);
    for (int k = 0; k < K; ++k) log_t[k] = view_log_prod_matrix(prior, latents.view[k], k);
    const JointSoftmaxOut prod_out = joint_softmax_marginals(prior, latents.labels(), log_t);

    MultiRegResult prod;
    prod.d_mu.assign(K, Mat(b, d));
    prod.d_sigma.assign(K, Mat(b, d));
    for (std::size_t i = 0; i < b; ++i) {
        double head = 0.0;
        if (lossless) {
            for (int k = 0; k < K; ++k) {
                for (std::size_t j = 0; j < d; ++j) {
                    const double sd = latents.view[k].sigma(i, j);
                    head += 0.5 * std::log(kTwoPi * std::exp(1.0) * sd * sd);
                }
            }
        } else {
            head = 0.5 * static_cast<double>(K) * static_cast<double>(d) *
                   std::log(0.5 * kTwoPi * std::exp(1.0) * (2.0 * mean_var));
        }
        prod.value += -(head + prod_out.lse[i]);
    }
    for (int k = 0; k < K; ++k) {
        accumulate_prod_gradients(per_class[k], latents.view[k], prod_out.marg[k],
                                  prior.hyper.mode, mean_var, &prod.d_mu[k], &prod.d_sigma[k]);
    }

    MultiRegResult avg;
    avg.value = 0.5 * (res.value + prod.value);
    avg.d_mu.assign(K, Mat(b, d));
    avg.d_sigma.assign(K, Mat(b, d));
    for (int k = 0; k < K; ++k) {
        for (std::size_t i = 0; i < b * d; ++i) {
            avg.d_mu[k].data[i] = 0.5 * (res.d_mu[k].data[i] + prod.d_mu[k].data[i]);
            avg.d_sigma[k].data[i] = 0.5 * (res.d_sigma[k].data[i] + prod.d_sigma[k].data[i]);
        }
    }
    return avg;
}

}  // namespace

MultiRegResult joint_regularizer(const ProductMixturePrior& prior,
                                 const MultiLatentBatch& latents) {
    prior.validate();
    latents.validate(prior.num_classes);
    return joint_reg_core(prior, latents);
}

MultiRegResult marginal_regularizer(const ProductMixturePrior& prior,
                                    const MultiLatentBatch& latents) {
    prior.validate();
    latents.validate(prior.num_classes);
    const int K = prior.num_views;
    MultiRegResult res;
    res.d_mu.resize(K);
    res.d_sigma.resize(K);
    for (int k = 0; k < K; ++k) {
        PriorBankSingle marginal;
        marginal.num_classes = prior.num_classes;
        marginal.num_components = prior.num_components;
        marginal.dim = prior.dim;
        marginal.hyper = prior.hyper;
        marginal.hyper.eps_lossy = prior.eps_view[k];
        marginal.fallback.assign(prior.num_classes, 0);
        marginal.priors.resize(prior.num_classes);
        for (int c = 0; c < prior.num_classes; ++c) {
            marginal.priors[c] = prior.views[c][k];
        }
        RegResult r = mixture_regularizer(marginal, latents.view[k]);
        res.value += r.value;
        res.d_mu[k] = std::move(r.d_mu);
        res.d_sigma[k] = std::move(r.d_sigma);
    }
    return res;
}

double joint_prior_log_density(const ProductMixturePrior& prior,
                               const std::vector<Mat>& samples,
                               const std::vector<int>& labels) {
    prior.validate();
    const int K = prior.num_views;
    const int M = prior.num_components;
    const std::size_t cells = joint_cells(M, K);
    const std::size_t d = static_cast<std::size_t>(prior.dim);
    if (samples.size() != static_cast<std::size_t>(K)) {
        throw std::invalid_argument("joint_prior_log_density: need one sample matrix per view");
    }
    const std::size_t b = labels.size();

    // Per-view log-density matrices b x M.
    std::vector<Mat> log_pdf(K, Mat(b, M));
    for (int k = 0; k < K; ++k) {
        require_shape(samples[k], b, d, "joint_prior_log_density");
        for (std::size_t i = 0; i < b; ++i) {
            const GaussianMixture& mix = prior.views[labels[i]][k];
            for (int m = 0; m < M; ++m) {
                const DiagGaussian& comp = mix.components[m];
                double lp = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double dm = samples[k](i, j) - comp.mean[j];
                    lp += -0.5 * std::log(kTwoPi * comp.var[j]) - dm * dm / (2.0 * comp.var[j]);
                }
                log_pdf[k](i, m) = lp;
            }
        }
    }

    std::vector<double> logits(cells);
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        const std::vector<double>& alpha = prior.joint_weights[labels[i]];
        JointIndex idx(K, M);
        for (std::size_t cell = 0; cell < cells; ++cell) {
            double lg = alpha[cell] > 0.0 ? std::log(alpha[cell])
                                          : -std::numeric_limits<double>::infinity();
            for (int k = 0; k < K; ++k) lg += log_pdf[k](i, idx.m[k]);
            logits[cell] = lg;
            idx.advance();
        }
        total += log_sum_exp(logits);
    }
    return total;
}

RedundancyInstance make_redundancy_instance(int num_classes, int R, int dim, int batch_size,
                                            std::uint64_t seed) {
    if (num_classes < 1 || R < 1 || dim < 1 || batch_size < 1) {
        throw std::invalid_argument("make_redundancy_instance: bad sizes");
    }
    Rng rng(seed);
    const std::size_t d = static_cast<std::size_t>(dim);

    // Per class: R latent parameter values and their probabilities.
    std::vector<std::vector<std::vector<double>>> mu(num_classes);
    std::vector<std::vector<std::vector<double>>> var(num_classes);
    std::vector<std::vector<double>> beta(num_classes);
    for (int c = 0; c < num_classes; ++c) {
        mu[c].resize(R);
        var[c].resize(R);
        beta[c].resize(R);
        double total = 0.0;
        for (int r = 0; r < R; ++r) {
            mu[c][r].resize(d);
            var[c][r].resize(d);
            for (std::size_t j = 0; j < d; ++j) {
                mu[c][r][j] = 2.0 * rng.normal();
                var[c][r][j] = rng.uniform(0.5, 1.5);
            }
            beta[c][r] = rng.uniform(0.5, 1.5);
            total += beta[c][r];
        }
        for (int r = 0; r < R; ++r) beta[c][r] /= total;
    }

    // Matched prior: per-view mixtures at the R values, joint weights on the
    // diagonal cells only.
    ProductMixturePrior prior;
    prior.num_classes = num_classes;
    prior.num_views = 2;
    prior.num_components = R;
    prior.dim = dim;
    prior.hyper.mode = PriorMode::lossless;
    prior.hyper.kl_estimate = KlEstimate::var_only;
    prior.eps_view.assign(2, prior.hyper.eps_lossy);
    prior.fallback.assign(num_classes, 0);
    const std::size_t cells = joint_cells(R, 2);
    prior.joint_weights.assign(num_classes, std::vector<double>(cells, 0.0));
    prior.views.resize(num_classes);
    for (int c = 0; c < num_classes; ++c) {
        prior.views[c].assign(2, GaussianMixture{});
        for (int k = 0; k < 2; ++k) {
            prior.views[c][k].weights = beta[c];
            for (int r = 0; r < R; ++r) {
                prior.views[c][k].components.emplace_back(mu[c][r], var[c][r]);
            }
        }
        for (int r = 0; r < R; ++r) {
            prior.joint_weights[c][static_cast<std::size_t>(r) * R + r] = beta[c][r];
        }
    }
    refresh_marginal_cache(&prior);

    // Batch: identical latent parameters on both views.
    MultiLatentBatch batch;
    batch.view.assign(2, LatentBatch{});
    for (int k = 0; k < 2; ++k) {
        batch.view[k].mu = Mat(batch_size, d);
        batch.view[k].sigma = Mat(batch_size, d);
    }
    batch.view[0].labels.resize(batch_size);
    for (int i = 0; i < batch_size; ++i) {
        const int c = static_cast<int>(rng.below(static_cast<std::uint64_t>(num_classes)));
        const int r = static_cast<int>(rng.weighted(beta[c]));
        batch.view[0].labels[i] = c;
        for (std::size_t j = 0; j < d; ++j) {
            batch.view[0].mu(i, j) = mu[c][r][j];
            batch.view[0].sigma(i, j) = std::sqrt(var[c][r][j]);
            batch.view[1].mu(i, j) = mu[c][r][j];
            batch.view[1].sigma(i, j) = std::sqrt(var[c][r][j]);
        }
    }
    batch.view[1].labels = batch.view[0].labels;

    return RedundancyInstance{std::move(prior), std::move(batch)};
}

std::pair<double, double> redundancy_gap(const RedundancyInstance& instance) {
    const double r1 = marginal_regularizer(instance.prior, instance.batch).value;
    const double r2 = joint_regularizer(instance.prior, instance.batch).value;
    return {r1, r2};
}

std::string product_prior_to_json(const ProductMixturePrior& prior) {
    prior.validate();
    nlohmann::json j;
    j["format"] = "mvmdl.prior_multi";
    j["version"] = 1;
    j["num_classes"] = prior.num_classes;
    j["num_views"] = prior.num_views;
    j["num_components"] = prior.num_components;
    j["dim"] = prior.dim;
    j["fallback"] = prior.fallback;
    j["eps_view"] = prior.eps_view;
    j["hyper"] = nlohmann::json::parse(hyper_to_json_string(prior.hyper));
    nlohmann::json classes = nlohmann::json::array();
    for (int c = 0; c < prior.num_classes; ++c) {
        nlohmann::json entry;
        // Row-major over (m_1, ..., m_K), m_K fastest.
        entry["joint_weights"] = prior.joint_weights[c];
        nlohmann::json views = nlohmann::json::array();
        for (int k = 0; k < prior.num_views; ++k) {
            nlohmann::json view;
            view["weights"] = prior.views[c][k].weights;
            nlohmann::json means = nlohmann::json::array();
            nlohmann::json vars = nlohmann::json::array();
            for (const auto& comp : prior.views[c][k].components) {
                means.push_back(comp.mean);
                vars.push_back(comp.var);
            }
            view["means"] = means;
            view["vars"] = vars;
            views.push_back(view);
        }
        entry["views"] = views;
        classes.push_back(entry);
    }
    j["classes"] = classes;
    return j.dump(2);
}

ProductMixturePrior product_prior_from_json(const std::string& text) {
    const nlohmann::json j = nlohmann::json::parse(text);
    if (j.at("format").get<std::string>() != "mvmdl.prior_multi") {
        throw std::invalid_argument("product_prior_from_json: unexpected format tag");
    }
    ProductMixturePrior prior;
    prior.num_classes = j.at("num_classes").get<int>();
    prior.num_views = j.at("num_views").get<int>();
    prior.num_components = j.at("num_components").get<int>();
    prior.dim = j.at("dim").get<int>();
    prior.fallback = j.at("fallback").get<std::vector<std::uint8_t>>();
    prior.eps_view = j.at("eps_view").get<std::vector<double>>();
    prior.hyper = hyper_from_json_string(j.at("hyper").dump());
    for (const auto& entry : j.at("classes")) {
        prior.joint_weights.push_back(entry.at("joint_weights").get<std::vector<double>>());
        std::vector<GaussianMixture> views;
        for (const auto& view : entry.at("views")) {
            GaussianMixture mix;
            mix.weights = view.at("weights").get<std::vector<double>>();
            const auto& means = view.at("means");
            const auto& vars = view.at("vars");
            for (std::size_t m = 0; m < means.size(); ++m) {
                mix.components.emplace_back(means[m].get<std::vector<double>>(),
                                            vars[m].get<std::vector<double>>());
            }
            views.push_back(std::move(mix));
        }
        prior.views.push_back(std::move(views));
    }
    prior.validate();
    return prior;
}

}  // namespace mvmdl
