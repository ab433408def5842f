#pragma once
// Generalization-bound calculus for MDL-regularized representation learning.
//
// Everything here is a pure function of scalars. Entropy-type quantities
// (binary_entropy, bernoulli_jsd, entropy_slack) are in bits; MDL and KL
// inputs are in nats. The two scales meet inside jsd_rhs / jsd_gen_bound,
// where LogBase picks the reconciliation:
//
//   LogBase::mixed  - add the nats-valued MDL term to the bits-valued
//                     residual as plain numbers (literal reading),
//   LogBase::bits   - convert the MDL term to bits first,
//   LogBase::nats   - convert the residual to nats first.
//
// bits and nats produce the same gen-bound value (the inversion is
// unit-consistent either way); mixed differs.

#include <cstdint>
#include <string>
#include <vector>

namespace mvmdl {

enum class LogBase { mixed, bits, nats };

LogBase parse_log_base(const std::string& s);

struct RiskPair {
    double train_risk = 0.0;  // empirical risk on the training split
    double test_risk = 0.0;   // empirical risk on the ghost split
    void validate() const;
};

struct BoundSpec {
    std::int64_t n = 1;   // per-dataset sample count
    std::int64_t C = 1;   // class count
    double mdl = 0.0;     // MDL value, nats
    double tv = 0.0;      // total-variation term ||p_Y - p_Y'||_1, in [0,2]
    double delta = 1.0;   // tail confidence, used by tail_rhs only
    void validate() const;
};

struct BoundReport {
    double sqrt_bound = 0.0;     // sqrt((2*mdl + C + 2)/n)
    double jsd_rhs = 0.0;        // (mdl + log n)/n + residual
    double jsd_gen_bound = 0.0;  // inverted divergence bound minus emp risk
    double residual = 0.0;       // risk-mismatch residual term
    double tail_bound = 0.0;     // high-probability rhs at spec.delta
};

// Binary Shannon entropy in bits, with 0*log(0) = 0. Domain [0,1] is
// enforced to within 1e-12; out-of-range input throws std::domain_error.
double binary_entropy(double x);

// Twice the Jensen-Shannon divergence between Bernoulli(x1) and
// Bernoulli(x2), in bits: 2*h((x1+x2)/2) - h(x1) - h(x2). Range [0,2],
// symmetric, zero iff x1 == x2.
double bernoulli_jsd(double x1, double x2);

// Largest total entropy gain obtainable by moving the smaller of (x1,x2)
// up and the larger down by the same shift e', with
// e' <= min(eps, (max-min)/2). Nonnegative; zero when x1 == x2 or eps == 0.
// Inner 1-D maximization is a golden-section search (the objective is
// strictly concave on the interval).
double entropy_slack(double x1, double x2, double eps);

// sup{ x1 in [0,1] : bernoulli_jsd(x1, x2) <= y }, computed by bisection on
// the increasing branch [x2, 1]. Returns 1 when even x1 = 1 satisfies the
// constraint.
double bernoulli_jsd_inverse(double y, double x2);

// sqrt((2*mdl + C + 2)/n).
double mdl_sqrt_bound(const BoundSpec& spec);

// Deterministic integrand of the label-mismatch residual:
// entropy_slack(train_risk, test_risk, tv/2).
double risk_mismatch_residual(const RiskPair& risks, double tv);

// Monte-Carlo version: draws n labels per split uniformly over C classes,
// evaluates the integrand at the realized total variation, and averages.
double risk_mismatch_residual_mc(const RiskPair& risks, std::int64_t n,
                                 std::int64_t C, int draws, std::uint64_t seed);

// (mdl + log n)/n + residual; requires n >= 10.
double jsd_rhs(const BoundSpec& spec, const RiskPair& risks,
               LogBase base = LogBase::mixed);

// Generalization bound from inverting the divergence:
// jsd_inverse(min(2, jsd_rhs) | emp_risk) - emp_risk, clamped at 0.
double jsd_gen_bound(const BoundSpec& spec, double emp_risk,
                     LogBase base = LogBase::mixed);

// High-probability rhs: (kl + log(n/delta))/n + residual; n >= 10,
// delta in (0,1].
double tail_rhs(const BoundSpec& spec, double kl, const RiskPair& risks,
                LogBase base = LogBase::mixed);

// Distributed MDL decomposition: sum of per-view marginal KLs minus the
// joint coupling term. A negative value signals estimator error and is
// flagged, not clamped; callers clamp at zero before feeding sqrt bounds.
struct DistributedMdl {
    double value = 0.0;
    bool negative_flagged = false;
};
DistributedMdl distributed_mdl(const std::vector<double>& marginal_kls,
                               double joint_term);

// Lossy form: sqrt bound for the quantized encoder plus the distortion.
double lossy_sqrt_bound(const BoundSpec& spec, double epsilon);

// Convenience bundle used by the CLI report path.
BoundReport make_bound_report(const BoundSpec& spec, const RiskPair& risks,
                              LogBase base = LogBase::mixed);

}  // namespace mvmdl
