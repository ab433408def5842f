#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "mvmdl/logsumexp.hpp"
#include "mvmdl/prior_single.hpp"
#include "mvmdl/rng.hpp"
#include "oracles.hpp"

using namespace mvmdl;

namespace {

LatentBatch random_batch(Rng& rng, std::size_t b, std::size_t d, int num_classes) {
    LatentBatch batch;
    batch.mu = Mat(b, d);
    batch.sigma = Mat(b, d);
    batch.labels.resize(b);
    for (std::size_t i = 0; i < b; ++i) {
        batch.labels[i] = static_cast<int>(rng.below(num_classes));
        for (std::size_t j = 0; j < d; ++j) {
            batch.mu(i, j) = 2.0 * rng.normal();
            batch.sigma(i, j) = rng.uniform(0.4, 1.5);
        }
    }
    return batch;
}

UpdateHyper lossless_hyper() {
    UpdateHyper h;
    h.mode = PriorMode::lossless;
    h.kl_estimate = KlEstimate::var_only;
    return h;
}

double dvar_objective(const PriorBankSingle& bank, const LatentBatch& batch) {
    double total = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        std::vector<double> mu(batch.mu.row(i), batch.mu.row(i) + batch.dim());
        std::vector<double> var(batch.dim());
        for (std::size_t j = 0; j < batch.dim(); ++j) {
            var[j] = batch.sigma(i, j) * batch.sigma(i, j);
        }
        total += kl_mixture_upper(DiagGaussian(mu, var), bank.priors[batch.labels[i]]);
    }
    return total;
}

// Gamma-fixed variational objective used by the perturbation oracle.
double gamma_fixed_objective(const PriorBankSingle& bank, const LatentBatch& batch,
                             const Mat& gamma) {
    double total = 0.0;
    const double mean_var = 0.5 * std::sqrt(static_cast<double>(batch.dim()));
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const GaussianMixture& mix = bank.priors[batch.labels[i]];
        std::vector<double> mu(batch.mu.row(i), batch.mu.row(i) + batch.dim());
        std::vector<double> var(batch.dim());
        for (std::size_t j = 0; j < batch.dim(); ++j) {
            var[j] = batch.sigma(i, j) * batch.sigma(i, j);
        }
        const DiagGaussian p(mu, var);
        for (std::size_t m = 0; m < mix.size(); ++m) {
            const double g = gamma(i, m);
            if (g < 1e-12) continue;
            const double div = bank.hyper.mode == PriorMode::lossless
                                   ? kl_diag(p, mix.components[m])
                                   : kl_perturbed(p, mix.components[m],
                                                  bank.hyper.eps_lossy, mean_var);
            total += g * (div - std::log(mix.weights[m] / g));
        }
    }
    return total;
}

}  // namespace

TEST_CASE("init: single component sits on a class sample") {
    Rng rng(1);
    const auto batch = random_batch(rng, 40, 3, 2);
    const auto bank = init_single_bank(batch, 2, 1, lossless_hyper(), 5);
    for (int c = 0; c < 2; ++c) {
        bool found = false;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            if (batch.labels[i] != c) continue;
            bool equal = true;
            for (std::size_t j = 0; j < 3; ++j) {
                if (batch.mu(i, j) != bank.priors[c].components[0].mean[j]) equal = false;
            }
            if (equal) found = true;
        }
        CHECK(found);
        CHECK(bank.priors[c].weights[0] == 1.0);
    }
}

TEST_CASE("init: class with exactly M samples uses all of them") {
    // Two classes, 4 distinct samples each, M = 4.
    LatentBatch batch;
    const std::size_t b = 8, d = 2;
    batch.mu = Mat(b, d);
    batch.sigma = Mat(b, d, 1.0);
    batch.labels = {0, 0, 0, 0, 1, 1, 1, 1};
    for (std::size_t i = 0; i < b; ++i) {
        batch.mu(i, 0) = static_cast<double>(i);
        batch.mu(i, 1) = static_cast<double>(3 * i) + 1.0;
    }
    for (int seed = 0; seed < 20; ++seed) {
        const auto bank = init_single_bank(batch, 2, 4, lossless_hyper(), seed);
        for (int c = 0; c < 2; ++c) {
            std::set<double> firsts;
            for (const auto& comp : bank.priors[c].components) firsts.insert(comp.mean[0]);
            CHECK(firsts.size() == 4);  // never repeats a zero-distance point
        }
    }
}

TEST_CASE("init: determinism and absent-class fallback") {
    Rng rng(2);
    auto batch = random_batch(rng, 30, 4, 3);
    for (auto& y : batch.labels) {
        if (y == 2) y = 1;  // class 2 absent
    }
    const auto a = init_single_bank(batch, 3, 3, lossless_hyper(), 77);
    const auto b = init_single_bank(batch, 3, 3, lossless_hyper(), 77);
    CHECK(bank_to_json(a) == bank_to_json(b));
    CHECK(a.fallback[2] == 1);
    CHECK(a.fallback[0] == 0);
    for (const auto& comp : a.priors[2].components) {
        for (std::size_t j = 0; j < 4; ++j) {
            CHECK(comp.mean[j] == 0.0);
            CHECK(comp.var[j] == 1.0);
        }
    }
}

TEST_CASE("e-step: symmetry, single component, brute force") {
    Rng rng(3);
    auto batch = random_batch(rng, 24, 3, 2);
    auto bank = init_single_bank(batch, 2, 3, lossless_hyper(), 9);

    // M=1: all-ones column.
    const auto bank1 = init_single_bank(batch, 2, 1, lossless_hyper(), 9);
    const Mat g1 = responsibilities(bank1, batch);
    for (std::size_t i = 0; i < batch.size(); ++i) CHECK(g1(i, 0) == 1.0);

    // Equal weights and identical components: uniform rows.
    PriorBankSingle flat = bank;
    for (auto& mix : flat.priors) {
        for (auto& comp : mix.components) comp = mix.components[0];
    }
    const Mat gf = responsibilities(flat, batch);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        for (std::size_t m = 0; m < 3; ++m) {
            CHECK(gf(i, m) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
        }
    }

    // Rows on the simplex and equal to the extended-precision brute force.
    const Mat gamma = responsibilities(bank, batch);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        double row = 0.0;
        for (std::size_t m = 0; m < 3; ++m) row += gamma(i, m);
        CHECK(row == doctest::Approx(1.0).epsilon(1e-9));

        const GaussianMixture& mix = bank.priors[batch.labels[i]];
        std::vector<double> mu(batch.mu.row(i), batch.mu.row(i) + 3);
        std::vector<double> var(3);
        for (std::size_t j = 0; j < 3; ++j) var[j] = batch.sigma(i, j) * batch.sigma(i, j);
        const DiagGaussian p(mu, var);
        long double total = 0.0L;
        std::vector<long double> w(3);
        for (std::size_t m = 0; m < 3; ++m) {
            w[m] = static_cast<long double>(mix.weights[m]) *
                   std::exp(static_cast<long double>(-kl_diag(p, mix.components[m])));
            total += w[m];
        }
        for (std::size_t m = 0; m < 3; ++m) {
            CHECK(gamma(i, m) == doctest::Approx(static_cast<double>(w[m] / total)).epsilon(1e-10));
        }
    }
}

TEST_CASE("lossy e-step equals the normalized attention form") {
    // Components with means scaled to ||mu|| = sqrt(d) and one shared
    // variance: the softmax reduces to inner-product attention with weights
    // proportional to the mixture weights (quadratic expansion carries the
    // factor 2).
    const std::size_t d = 4, M = 3, b = 10;
    Rng rng(4);
    auto batch = random_batch(rng, b, d, 1);
    UpdateHyper hyper = lossless_hyper();
    hyper.mode = PriorMode::lossy;
    hyper.eps_lossy = 0.7;
    PriorBankSingle bank;
    bank.num_classes = 1;
    bank.num_components = M;
    bank.dim = d;
    bank.hyper = hyper;
    bank.fallback = {0};
    GaussianMixture mix;
    mix.weights = {0.5, 0.3, 0.2};
    const double target = std::sqrt(static_cast<double>(d));
    for (std::size_t m = 0; m < M; ++m) {
        std::vector<double> mu(d), var(d, 0.9);
        double norm = 0.0;
        for (auto& x : mu) {
            x = rng.normal();
        }
        for (auto x : mu) norm += x * x;
        for (auto& x : mu) x *= target / std::sqrt(norm);
        mix.components.emplace_back(mu, var);
    }
    bank.priors = {mix};

    const Mat gamma = responsibilities(bank, batch);
    const double sqrt_d = std::sqrt(static_cast<double>(d));
    for (std::size_t i = 0; i < b; ++i) {
        std::vector<double> logits(M);
        for (std::size_t m = 0; m < M; ++m) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += batch.mu(i, j) * mix.components[m].mean[j];
            logits[m] = std::log(mix.weights[m]) + 2.0 * dot / sqrt_d;
        }
        const double lse = log_sum_exp(logits);
        for (std::size_t m = 0; m < M; ++m) {
            CHECK(gamma(i, m) == doctest::Approx(std::exp(logits[m] - lse)).epsilon(1e-10));
        }
    }
}

TEST_CASE("m-step closed forms") {
    Rng rng(5);
    auto batch = random_batch(rng, 30, 2, 1);
    const auto bank = init_single_bank(batch, 1, 1, lossless_hyper(), 3);
    Mat gamma(batch.size(), 1, 1.0);
    const auto cand = fit_candidates(bank, batch, gamma);

    // M=1: the candidate mean is the class-conditional batch mean.
    for (std::size_t j = 0; j < 2; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < batch.size(); ++i) mean += batch.mu(i, j);
        mean /= static_cast<double>(batch.size());
        CHECK(cand[0].mean(0, j) == doctest::Approx(mean).epsilon(1e-12));
    }
    CHECK(cand[0].weight[0] == doctest::Approx(1.0));

    // All samples identical: lossless variance is sigma^2 + offset^2 exactly.
    LatentBatch same;
    same.mu = Mat(6, 2);
    same.sigma = Mat(6, 2);
    same.labels.assign(6, 0);
    for (std::size_t i = 0; i < 6; ++i) {
        same.mu(i, 0) = 1.5;
        same.mu(i, 1) = -0.5;
        same.sigma(i, 0) = 0.8;
        same.sigma(i, 1) = 1.1;
    }
    const auto bank2 = init_single_bank(same, 1, 1, lossless_hyper(), 8);
    Mat ones(6, 1, 1.0);
    const auto cand2 = fit_candidates(bank2, same, ones);
    for (std::size_t j = 0; j < 2; ++j) {
        const double off = same.mu(0, j) - bank2.priors[0].components[0].mean[j];
        const double want = same.sigma(0, j) * same.sigma(0, j) + off * off;
        CHECK(cand2[0].var(0, j) == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("m-step candidates minimize the gamma-fixed objective") {
    for (PriorMode mode : {PriorMode::lossless, PriorMode::lossy}) {
        Rng rng(mode == PriorMode::lossless ? 6 : 7);
        auto batch = random_batch(rng, 40, 3, 2);
        UpdateHyper hyper = lossless_hyper();
        hyper.mode = mode;
        auto bank = init_single_bank(batch, 2, 3, hyper, 31);
        const Mat gamma = responsibilities(bank, batch);

        // Two passes with frozen gamma align the previous means with the
        // gamma-weighted means; only then are the closed forms stationary in
        // every block (the variance rule freezes the previous mean).
        PriorBankSingle exact = bank;
        exact.hyper.eta_mean = exact.hyper.eta_var = exact.hyper.eta_weight = 1.0;
        exact.hyper.zeta.zeta0_mean = exact.hyper.zeta.zeta0_var = 0.0;
        auto cand = fit_candidates(exact, batch, gamma);
        PriorBankSingle aligned = blend_update(exact, cand, 0, 1);
        cand = fit_candidates(aligned, batch, gamma);
        PriorBankSingle candidate_bank = blend_update(aligned, cand, 0, 1);
        const double base = gamma_fixed_objective(candidate_bank, batch, gamma);

        Rng perturb(99);
        for (int t = 0; t < 60; ++t) {
            PriorBankSingle other = candidate_bank;
            for (auto& mix : other.priors) {
                double total = 0.0;
                for (std::size_t m = 0; m < mix.size(); ++m) {
                    for (std::size_t j = 0; j < 3; ++j) {
                        mix.components[m].mean[j] *= 1.0 + 0.01 * perturb.normal();
                        mix.components[m].var[j] *= 1.0 + 0.01 * perturb.normal();
                    }
                    mix.weights[m] *= std::exp(0.01 * perturb.normal());
                    total += mix.weights[m];
                }
                for (auto& w : mix.weights) w /= total;
            }
            CHECK(gamma_fixed_objective(other, batch, gamma) >= base - 1e-9);
        }
    }
}

TEST_CASE("blend update endpoints and floor") {
    Rng rng(8);
    auto batch = random_batch(rng, 25, 2, 2);
    auto bank = init_single_bank(batch, 2, 2, lossless_hyper(), 11);
    const Mat gamma = responsibilities(bank, batch);
    const auto cand = fit_candidates(bank, batch, gamma);

    PriorBankSingle full = bank;
    full.hyper.eta_mean = full.hyper.eta_var = full.hyper.eta_weight = 1.0;
    full.hyper.zeta.zeta0_mean = full.hyper.zeta.zeta0_var = 0.0;
    const auto next_full = blend_update(full, cand, 0, 5);
    for (int c = 0; c < 2; ++c) {
        for (std::size_t m = 0; m < 2; ++m) {
            for (std::size_t j = 0; j < 2; ++j) {
                CHECK(next_full.priors[c].components[m].mean[j] ==
                      doctest::Approx(cand[c].mean(m, j)).epsilon(1e-12));
            }
            CHECK(next_full.priors[c].weights[m] == doctest::Approx(cand[c].weight[m]).epsilon(1e-12));
        }
    }

    PriorBankSingle frozen = bank;
    frozen.hyper.eta_mean = frozen.hyper.eta_var = frozen.hyper.eta_weight = 0.0;
    frozen.hyper.zeta.zeta0_mean = frozen.hyper.zeta.zeta0_var = 0.0;
    const auto next_frozen = blend_update(frozen, cand, 0, 5);
    CHECK(bank_to_json(next_frozen) == bank_to_json(frozen));

    // Noise on a floored variance keeps the floor.
    PriorBankSingle noisy = bank;
    noisy.hyper.eta_var = 1.0;
    noisy.hyper.zeta.zeta0_var = 1e-2;
    for (auto& mix : noisy.priors) {
        for (auto& comp : mix.components) {
            std::fill(comp.var.begin(), comp.var.end(), kVarFloor);
        }
    }
    auto floored_cand = cand;
    for (auto& c : floored_cand) {
        std::fill(c.var.data.begin(), c.var.data.end(), kVarFloor);
    }
    const auto bumped = blend_update(noisy, floored_cand, 0, 6);
    for (const auto& mix : bumped.priors) {
        for (const auto& comp : mix.components) {
            for (double v : comp.var) CHECK(v >= kVarFloor);
        }
    }
}

TEST_CASE("EM pass never increases the variational objective") {
    Rng rng(9);
    for (int inst = 0; inst < 10; ++inst) {
        auto batch = random_batch(rng, 50, 3, 2);
        UpdateHyper hyper = lossless_hyper();
        hyper.eta_mean = hyper.eta_var = hyper.eta_weight = 1.0;
        hyper.zeta.zeta0_mean = hyper.zeta.zeta0_var = 0.0;
        auto bank = init_single_bank(batch, 2, 3, hyper, 100 + inst);
        const double before = dvar_objective(bank, batch);
        const Mat gamma = responsibilities(bank, batch);
        const auto cand = fit_candidates(bank, batch, gamma);
        const auto after_bank = blend_update(bank, cand, 0, 1);
        const double after = dvar_objective(after_bank, batch);
        CHECK(after <= before + 1e-8);
    }
}

TEST_CASE("regularizer reductions and gradients") {
    Rng rng(10);
    auto batch = random_batch(rng, 8, 3, 2);

    // M=1 lossless var_only is the class-conditional KL sum.
    UpdateHyper hyper = lossless_hyper();
    auto bank = init_single_bank(batch, 2, 1, hyper, 13);
    const RegResult reg = mixture_regularizer(bank, batch);
    double want = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        std::vector<double> mu(batch.mu.row(i), batch.mu.row(i) + 3);
        std::vector<double> var(3);
        for (std::size_t j = 0; j < 3; ++j) var[j] = batch.sigma(i, j) * batch.sigma(i, j);
        want += kl_diag(DiagGaussian(mu, var), bank.priors[batch.labels[i]].components[0]);
    }
    CHECK(reg.value == doctest::Approx(want).epsilon(1e-12));

    // Latents equal to the component: zero.
    LatentBatch matched;
    matched.mu = Mat(4, 3);
    matched.sigma = Mat(4, 3);
    matched.labels.assign(4, 0);
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            matched.mu(i, j) = bank.priors[0].components[0].mean[j];
            matched.sigma(i, j) = std::sqrt(bank.priors[0].components[0].var[j]);
        }
    }
    CHECK(mixture_regularizer(bank, matched).value == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("regularizer gradients match finite differences") {
    for (PriorMode mode : {PriorMode::lossless, PriorMode::lossy}) {
        for (KlEstimate est : {KlEstimate::var_only, KlEstimate::avg_var_prod}) {
            Rng rng(20 + static_cast<int>(mode) * 2 + static_cast<int>(est));
            auto batch = random_batch(rng, 4, 3, 2);
            UpdateHyper hyper;
            hyper.mode = mode;
            hyper.kl_estimate = est;
            auto bank = init_single_bank(batch, 2, 3, hyper, 50);
            const RegResult reg = mixture_regularizer(bank, batch);
            const double h = 1e-5;
            for (std::size_t i = 0; i < batch.size(); ++i) {
                for (std::size_t j = 0; j < 3; ++j) {
                    auto f_mu = [&](double x) {
                        LatentBatch pert = batch;
                        pert.mu(i, j) = x;
                        return mixture_regularizer(bank, pert).value;
                    };
                    auto f_sd = [&](double x) {
                        LatentBatch pert = batch;
                        pert.sigma(i, j) = x;
                        return mixture_regularizer(bank, pert).value;
                    };
                    const double fd_mu = oracles::central_diff(f_mu, batch.mu(i, j), h);
                    const double fd_sd = oracles::central_diff(f_sd, batch.sigma(i, j), h);
                    CHECK(reg.d_mu(i, j) ==
                          doctest::Approx(fd_mu).epsilon(1e-4).scale(std::abs(fd_mu) + 1.0));
                    CHECK(reg.d_sigma(i, j) ==
                          doctest::Approx(fd_sd).epsilon(1e-4).scale(std::abs(fd_sd) + 1.0));
                }
            }
        }
    }
}

TEST_CASE("vib regularizer") {
    LatentBatch std_batch;
    std_batch.mu = Mat(3, 2, 0.0);
    std_batch.sigma = Mat(3, 2, 1.0);
    std_batch.labels.assign(3, 0);
    CHECK(vib_regularizer(std_batch).value == doctest::Approx(0.0).epsilon(1e-15));

    LatentBatch one;
    one.mu = Mat(1, 1, 1.0);
    one.sigma = Mat(1, 1, 1.0);
    one.labels = {0};
    CHECK(vib_regularizer(one).value == doctest::Approx(0.5));

    Rng rng(33);
    auto batch = random_batch(rng, 5, 3, 1);
    const RegResult reg = vib_regularizer(batch);
    const double h = 1e-5;
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            auto f_mu = [&](double x) {
                LatentBatch pert = batch;
                pert.mu(i, j) = x;
                return vib_regularizer(pert).value;
            };
            const double fd = oracles::central_diff(f_mu, batch.mu(i, j), h);
            CHECK(reg.d_mu(i, j) == doctest::Approx(fd).epsilon(1e-6).scale(std::abs(fd) + 1.0));
        }
    }
}

TEST_CASE("prior log density symmetry") {
    Rng rng(40);
    auto batch = random_batch(rng, 30, 3, 2);
    auto bank = init_single_bank(batch, 2, 3, lossless_hyper(), 60);

    Mat samples(30, 3);
    for (auto& x : samples.data) x = rng.normal();
    const double base = prior_log_density(bank, samples, batch.labels);

    // Joint permutation of (u, y) pairs.
    std::vector<std::size_t> perm(30);
    for (std::size_t i = 0; i < 30; ++i) perm[i] = i;
    for (std::size_t i = 29; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    Mat samples_p(30, 3);
    std::vector<int> labels_p(30);
    for (std::size_t i = 0; i < 30; ++i) {
        labels_p[i] = batch.labels[perm[i]];
        for (std::size_t j = 0; j < 3; ++j) samples_p(i, j) = samples(perm[i], j);
    }
    CHECK(prior_log_density(bank, samples_p, labels_p) == doctest::Approx(base).epsilon(1e-9));

    // Label-preserving permutation of the samples only.
    std::vector<std::size_t> class0, class1;
    for (std::size_t i = 0; i < 30; ++i) {
        (batch.labels[i] == 0 ? class0 : class1).push_back(i);
    }
    Mat samples_lp = samples;
    if (class0.size() >= 2) {
        for (std::size_t j = 0; j < 3; ++j) {
            std::swap(samples_lp(class0[0], j), samples_lp(class0[1], j));
        }
    }
    CHECK(prior_log_density(bank, samples_lp, batch.labels) == doctest::Approx(base).epsilon(1e-9));

    // Swapping across labels changes the density in general.
    Mat samples_x = samples;
    for (std::size_t j = 0; j < 3; ++j) {
        std::swap(samples_x(class0[0], j), samples_x(class1[0], j));
    }
    CHECK(prior_log_density(bank, samples_x, batch.labels) != doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("bank json round trip is exact") {
    Rng rng(50);
    auto batch = random_batch(rng, 20, 3, 2);
    UpdateHyper hyper;
    hyper.mode = PriorMode::lossy;
    hyper.kl_estimate = KlEstimate::avg_var_prod;
    const auto bank = init_single_bank(batch, 2, 3, hyper, 70);
    const std::string text = bank_to_json(bank);
    const auto loaded = bank_from_json(text);
    CHECK(bank_to_json(loaded) == text);
    for (int c = 0; c < 2; ++c) {
        for (std::size_t m = 0; m < 3; ++m) {
            CHECK(loaded.priors[c].weights[m] == bank.priors[c].weights[m]);
            for (std::size_t j = 0; j < 3; ++j) {
                CHECK(loaded.priors[c].components[m].mean[j] == bank.priors[c].components[m].mean[j]);
                CHECK(loaded.priors[c].components[m].var[j] == bank.priors[c].components[m].var[j]);
            }
        }
    }
}
