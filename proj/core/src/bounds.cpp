#include "mvmdl/bounds.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "mvmdl/rng.hpp"

namespace mvmdl {

namespace {

constexpr double kDomainTol = 1e-12;
constexpr double kLog2e = 1.4426950408889634073599246810019;  // 1/ln(2)

double clamp01(double x) { return std::min(1.0, std::max(0.0, x)); }

// Converts the nats-valued MDL/KL term according to the unit convention.
double mdl_term_in(LogBase base, double nats) {
    return base == LogBase::bits ? nats * kLog2e : nats;
}

// Converts the bits-valued residual according to the unit convention.
double residual_term_in(LogBase base, double bits) {
    return base == LogBase::nats ? bits / kLog2e : bits;
}

// Reduces an rhs value to the bits scale so it can be fed to the inverse.
double rhs_to_bits(LogBase base, double rhs) {
    return base == LogBase::nats ? rhs * kLog2e : rhs;
}

}  // namespace

LogBase parse_log_base(const std::string& s) {
    if (s == "mixed") return LogBase::mixed;
    if (s == "bits") return LogBase::bits;
    if (s == "nats") return LogBase::nats;
    throw std::invalid_argument("log_base must be one of mixed|bits|nats, got '" + s + "'");
}

void RiskPair::validate() const {
    if (!(train_risk >= 0.0 && train_risk <= 1.0) ||
        !(test_risk >= 0.0 && test_risk <= 1.0)) {
        throw std::invalid_argument("RiskPair: risks must lie in [0,1]");
    }
}

void BoundSpec::validate() const {
    if (n < 1) throw std::invalid_argument("BoundSpec: n must be >= 1");
    if (C < 1) throw std::invalid_argument("BoundSpec: C must be >= 1");
    if (!(mdl >= 0.0)) throw std::invalid_argument("BoundSpec: mdl must be >= 0");
    if (!(tv >= 0.0 && tv <= 2.0)) throw std::invalid_argument("BoundSpec: tv must lie in [0,2]");
    if (!(delta > 0.0 && delta <= 1.0)) throw std::invalid_argument("BoundSpec: delta must lie in (0,1]");
}

double binary_entropy(double x) {
    if (x < -kDomainTol || x > 1.0 + kDomainTol) {
        throw std::domain_error("binary_entropy: argument outside [0,1]");
    }
    x = clamp01(x);
    double h = 0.0;
    if (x > 0.0) h -= x * std::log2(x);
    if (x < 1.0) h -= (1.0 - x) * std::log2(1.0 - x);
    return h;
}

double bernoulli_jsd(double x1, double x2) {
    const double mid = binary_entropy(0.5 * (x1 + x2));
    return std::max(0.0, 2.0 * mid - binary_entropy(x1) - binary_entropy(x2));
}

double entropy_slack(double x1, double x2, double eps) {
    if (!(eps >= 0.0)) throw std::domain_error("entropy_slack: eps must be >= 0");
    const double lo = std::min(x1, x2);
    const double hi = std::max(x1, x2);
    const double cap = std::min(eps, 0.5 * (hi - lo));
    if (cap < 1e-12) return 0.0;

    const double base = binary_entropy(lo) + binary_entropy(hi);
    auto gain = [&](double e) {
        return binary_entropy(lo + e) + binary_entropy(hi - e) - base;
    };

    // Golden-section search for the maximum on [0, cap]; objective is
    // strictly concave, absolute tolerance 1e-10.
    const double inv_phi = 0.6180339887498948482;
    double a = 0.0, b = cap;
    double c = b - inv_phi * (b - a);
    double d = a + inv_phi * (b - a);
    double fc = gain(c), fd = gain(d);
    while (b - a > 1e-10) {
        if (fc > fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = gain(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = gain(d);
        }
    }
    const double mid = gain(0.5 * (a + b));
    // The endpoints are feasible; never report below the trivial shift.
    return std::max({0.0, mid, gain(0.0), gain(cap)});
}

double bernoulli_jsd_inverse(double y, double x2) {
    if (!(y >= 0.0 && y <= 2.0)) throw std::domain_error("bernoulli_jsd_inverse: y outside [0,2]");
    if (x2 < 0.0 || x2 > 1.0) throw std::domain_error("bernoulli_jsd_inverse: x2 outside [0,1]");
    if (bernoulli_jsd(1.0, x2) <= y) return 1.0;
    // jsd(., x2) is nondecreasing on [x2, 1]; bisect for the boundary.
    double lo = x2, hi = 1.0;
    for (int it = 0; it < 200 && hi - lo > 1e-10; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (bernoulli_jsd(mid, x2) <= y) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    return lo;
}

double mdl_sqrt_bound(const BoundSpec& spec) {
    spec.validate();
    return std::sqrt((2.0 * spec.mdl + static_cast<double>(spec.C) + 2.0) /
                     static_cast<double>(spec.n));
}

double risk_mismatch_residual(const RiskPair& risks, double tv) {
    risks.validate();
    if (!(tv >= 0.0 && tv <= 2.0)) throw std::invalid_argument("risk_mismatch_residual: tv outside [0,2]");
    return entropy_slack(risks.train_risk, risks.test_risk, 0.5 * tv);
}

double risk_mismatch_residual_mc(const RiskPair& risks, std::int64_t n,
                                 std::int64_t C, int draws, std::uint64_t seed) {
    risks.validate();
    if (n < 1 || C < 1 || draws < 1) {
        throw std::invalid_argument("risk_mismatch_residual_mc: n, C, draws must be positive");
    }
    Rng rng(seed);
    std::vector<std::int64_t> count_a(static_cast<std::size_t>(C));
    std::vector<std::int64_t> count_b(static_cast<std::size_t>(C));
    double acc = 0.0;
    for (int t = 0; t < draws; ++t) {
        std::fill(count_a.begin(), count_a.end(), 0);
        std::fill(count_b.begin(), count_b.end(), 0);
        for (std::int64_t i = 0; i < n; ++i) {
            ++count_a[rng.below(static_cast<std::uint64_t>(C))];
            ++count_b[rng.below(static_cast<std::uint64_t>(C))];
        }
        double tv = 0.0;
        for (std::int64_t c = 0; c < C; ++c) {
            tv += std::abs(count_a[c] - count_b[c]) / static_cast<double>(n);
        }
        acc += entropy_slack(risks.train_risk, risks.test_risk, 0.5 * tv);
    }
    return acc / draws;
}

double jsd_rhs(const BoundSpec& spec, const RiskPair& risks, LogBase base) {
    spec.validate();
    if (spec.n < 10) throw std::invalid_argument("jsd_rhs: requires n >= 10");
    const double n = static_cast<double>(spec.n);
    const double core = (spec.mdl + std::log(n)) / n;
    const double residual = risk_mismatch_residual(risks, spec.tv);
    return mdl_term_in(base, core) + residual_term_in(base, residual);
}

double jsd_gen_bound(const BoundSpec& spec, double emp_risk, LogBase base) {
    if (!(emp_risk >= 0.0 && emp_risk <= 1.0)) {
        throw std::invalid_argument("jsd_gen_bound: emp_risk outside [0,1]");
    }
    const RiskPair risks{emp_risk, emp_risk};
    BoundSpec s = spec;
    const double rhs_bits = std::min(2.0, rhs_to_bits(base, jsd_rhs(s, risks, base)));
    const double x1 = bernoulli_jsd_inverse(rhs_bits, emp_risk);
    return std::max(0.0, x1 - emp_risk);
}

double tail_rhs(const BoundSpec& spec, double kl, const RiskPair& risks, LogBase base) {
    spec.validate();
    if (spec.n < 10) throw std::invalid_argument("tail_rhs: requires n >= 10");
    if (!(kl >= 0.0)) throw std::invalid_argument("tail_rhs: kl must be >= 0");
    const double n = static_cast<double>(spec.n);
    const double core = (kl + std::log(n / spec.delta)) / n;
    const double residual = risk_mismatch_residual(risks, spec.tv);
    return mdl_term_in(base, core) + residual_term_in(base, residual);
}

DistributedMdl distributed_mdl(const std::vector<double>& marginal_kls, double joint_term) {
    if (marginal_kls.empty()) throw std::invalid_argument("distributed_mdl: need at least one view");
    for (double kl : marginal_kls) {
        if (!(kl >= 0.0)) throw std::invalid_argument("distributed_mdl: marginal KLs must be >= 0");
    }
    if (!(joint_term >= 0.0)) throw std::invalid_argument("distributed_mdl: joint term must be >= 0");
    double sum = 0.0;
    for (double kl : marginal_kls) sum += kl;
    DistributedMdl out;
    out.value = sum - joint_term;
    out.negative_flagged = out.value < 0.0;
    return out;
}

double lossy_sqrt_bound(const BoundSpec& spec, double epsilon) {
    if (!(epsilon >= 0.0)) throw std::invalid_argument("lossy_sqrt_bound: epsilon must be >= 0");
    return mdl_sqrt_bound(spec) + epsilon;
}

BoundReport make_bound_report(const BoundSpec& spec, const RiskPair& risks, LogBase base) {
    BoundReport r;
    r.sqrt_bound = mdl_sqrt_bound(spec);
    r.residual = risk_mismatch_residual(risks, spec.tv);
    r.jsd_rhs = jsd_rhs(spec, risks, base);
    r.jsd_gen_bound = jsd_gen_bound(spec, risks.train_risk, base);
    r.tail_bound = tail_rhs(spec, spec.mdl, risks, base);
    return r;
}

}  // namespace mvmdl
