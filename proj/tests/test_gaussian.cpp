#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "mvmdl/gaussian.hpp"
#include "mvmdl/rng.hpp"
#include "oracles.hpp"

using namespace mvmdl;

namespace {

GaussianMixture single(const DiagGaussian& g) {
    GaussianMixture mix;
    mix.weights = {1.0};
    mix.components = {g};
    return mix;
}

}  // namespace

TEST_CASE("kl_diag closed form") {
    const DiagGaussian p({1.0}, {1.0});
    const DiagGaussian q({0.0}, {1.0});
    CHECK(kl_diag(p, p) == 0.0);
    CHECK(kl_diag(p, q) == doctest::Approx(0.5));
    // Diagonal structure: d=2 value is the sum of the per-dimension terms.
    const DiagGaussian p2({1.0, -0.5}, {1.0, 0.7});
    const DiagGaussian q2({0.0, 0.3}, {1.0, 1.9});
    const double a = kl_diag(DiagGaussian({1.0}, {1.0}), DiagGaussian({0.0}, {1.0}));
    const double b = kl_diag(DiagGaussian({-0.5}, {0.7}), DiagGaussian({0.3}, {1.9}));
    CHECK(kl_diag(p2, q2) == doctest::Approx(a + b).epsilon(1e-12));
    CHECK_THROWS_AS(kl_diag(p, p2), std::invalid_argument);
}

TEST_CASE("variance floor is applied at construction") {
    const DiagGaussian g({0.0}, {0.0});
    CHECK(g.var[0] == doctest::Approx(kVarFloor));
    CHECK_THROWS_AS(DiagGaussian({0.0}, {std::nan("")}), std::invalid_argument);
}

TEST_CASE("kl_mixture_upper reductions") {
    Rng rng(7);
    const DiagGaussian p = oracles::random_gaussian(rng, 3);
    const DiagGaussian q1 = oracles::random_gaussian(rng, 3);
    CHECK(kl_mixture_upper(p, single(q1)) == doctest::Approx(kl_diag(p, q1)).epsilon(1e-12));

    // Identical components: -log sum (1/M) e^{ -k } = k.
    GaussianMixture mix;
    mix.weights = {0.25, 0.25, 0.25, 0.25};
    mix.components = {q1, q1, q1, q1};
    CHECK(kl_mixture_upper(p, mix) == doctest::Approx(kl_diag(p, q1)).epsilon(1e-12));
}

TEST_CASE("optimal responsibilities beat random simplex points") {
    Rng rng(11);
    for (int inst = 0; inst < 25; ++inst) {
        const std::size_t d = 1 + rng.below(4);
        const std::size_t M = 2 + rng.below(3);
        const DiagGaussian p = oracles::random_gaussian(rng, d);
        const GaussianMixture q = oracles::random_mixture(rng, d, M);
        const double best = kl_mixture_upper(p, q);
        for (int t = 0; t < 50; ++t) {
            const auto gamma = oracles::random_simplex(rng, M);
            CHECK(kl_mixture_upper(p, q, gamma) >= best - 1e-9);
        }
    }
}

TEST_CASE("gamma on a zero-weight component is rejected") {
    Rng rng(3);
    const DiagGaussian p = oracles::random_gaussian(rng, 2);
    GaussianMixture q = oracles::random_mixture(rng, 2, 2);
    q.weights = {1.0, 0.0};
    CHECK_THROWS_AS(kl_mixture_upper(p, q, std::vector<double>{0.5, 0.5}), std::invalid_argument);
    CHECK(kl_mixture_upper(p, q, std::vector<double>{1.0, 0.0}) ==
          doctest::Approx(kl_diag(p, q.components[0])).epsilon(1e-12));
}

TEST_CASE("product bound closed form") {
    for (double v : {0.3, 1.0, 2.2}) {
        const DiagGaussian g({0.0}, {v});
        const double got = kl_mixture_lower(g, single(g), ProdVariant::exact);
        CHECK(got == doctest::Approx(0.5 * (std::log(2.0) - 1.0)).epsilon(1e-12));
    }
    // tprime agrees with exact when the posterior variance collapses.
    const DiagGaussian tight({0.4, -0.2}, {kVarFloor, kVarFloor});
    Rng rng(5);
    const GaussianMixture q = oracles::random_mixture(rng, 2, 3);
    CHECK(kl_mixture_lower(tight, q, ProdVariant::tprime) ==
          doctest::Approx(kl_mixture_lower(tight, q, ProdVariant::exact)).epsilon(1e-6));
}

TEST_CASE("kl_mixture_estimate") {
    const DiagGaussian g({0.0}, {1.0});
    CHECK(kl_mixture_estimate(g, single(g)) ==
          doctest::Approx(0.5 * (0.0 + 0.5 * (std::log(2.0) - 1.0))).epsilon(1e-12));
    // Far-apart single component: both halves are dominated by the mean
    // separation. upper = 200, lower = 100 + 0.5*ln(2/e), so the estimate
    // is 149.9233 at ||dmu|| = 20.
    const DiagGaussian far({20.0}, {1.0});
    const double est = kl_mixture_estimate(far, single(g));
    CHECK(kl_mixture_lower(far, single(g), ProdVariant::exact) > 99.0);
    CHECK(est == doctest::Approx(149.9233).epsilon(1e-4));
    // Always between the two bounds.
    Rng rng(17);
    for (int t = 0; t < 20; ++t) {
        const DiagGaussian p = oracles::random_gaussian(rng, 3);
        const GaussianMixture q = oracles::random_mixture(rng, 3, 4);
        const double lo = kl_mixture_lower(p, q, ProdVariant::exact);
        const double hi = kl_mixture_upper(p, q);
        const double mid = kl_mixture_estimate(p, q);
        CHECK(mid >= lo - 1e-12);
        CHECK(mid <= hi + 1e-12);
    }
}

TEST_CASE("perturbed divergence") {
    const DiagGaussian p({0.7, -0.1}, {0.5, 0.9});
    CHECK(kl_perturbed(p, p, 1.0) == 0.0);
    // Large eps leaves only the mean term.
    const DiagGaussian q({1.7, -0.1}, {1.5, 0.4});
    const double d = 2.0;
    const double mean_only = 1.0 / std::sqrt(d);
    CHECK(kl_perturbed(p, q, 1e9) == doctest::Approx(mean_only).epsilon(1e-6));
    // d=1, unit mean offset, equal sigmas: exactly 1.
    CHECK(kl_perturbed(DiagGaussian({1.0}, {0.8}), DiagGaussian({0.0}, {0.8}), 0.5) ==
          doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(kl_perturbed(p, q, 0.0), std::invalid_argument);
}

TEST_CASE("monte-carlo oracle consistency") {
    const DiagGaussian g({0.3, -1.0}, {0.8, 1.4});
    const auto self = kl_monte_carlo(g, single(g), 20000, 42);
    CHECK(std::abs(self.estimate) <= 3.0 * std::max(self.stderr_, 1e-12));

    Rng rng(23);
    const DiagGaussian p = oracles::random_gaussian(rng, 3);
    const DiagGaussian q = oracles::random_gaussian(rng, 3);
    const auto mc = kl_monte_carlo(p, single(q), 200000, 7);
    CHECK(std::abs(mc.estimate - kl_diag(p, q)) <= 3.0 * mc.stderr_);

    // stderr shrinks like 1/sqrt(n).
    const auto small = kl_monte_carlo(p, single(q), 10000, 7);
    const auto large = kl_monte_carlo(p, single(q), 1000000, 7);
    const double ratio = small.stderr_ / large.stderr_;
    CHECK(ratio > 5.0);
    CHECK(ratio < 20.0);

    // Determinism.
    const auto again = kl_monte_carlo(p, single(q), 10000, 7);
    CHECK(again.estimate == small.estimate);
}

TEST_CASE("sandwich property on random instances") {
    Rng rng(101);
    for (int inst = 0; inst < 20; ++inst) {
        const std::size_t d = 1 + rng.below(8);
        const std::size_t M = 1 + rng.below(5);
        const DiagGaussian p = oracles::random_gaussian(rng, d);
        const GaussianMixture q = oracles::random_mixture(rng, d, M);
        const auto mc = kl_monte_carlo(p, q, 100000, 1000 + inst);
        const double lo = kl_mixture_lower(p, q, ProdVariant::exact);
        const double hi = kl_mixture_upper(p, q);
        CHECK(lo - 3.0 * mc.stderr_ <= mc.estimate);
        CHECK(mc.estimate <= hi + 3.0 * mc.stderr_);
    }
}

TEST_CASE("log-sum-exp path survives huge divergences") {
    // Components 1e5 nats away must not overflow the optimal-gamma path.
    const DiagGaussian p({0.0}, {1.0});
    GaussianMixture q;
    q.weights = {0.5, 0.5};
    q.components = {DiagGaussian({450.0}, {1.0}), DiagGaussian({500.0}, {1.0})};
    const double hi = kl_mixture_upper(p, q);
    CHECK(std::isfinite(hi));
    CHECK(hi > 1e4);
    CHECK(std::isfinite(kl_mixture_lower(p, q, ProdVariant::exact)));
}
