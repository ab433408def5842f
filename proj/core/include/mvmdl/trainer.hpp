#pragma once
// Training orchestration: one optimization step = encoder/decoder forward,
// analytic backward with the configured regularizer, Adam update, then one
// prior E/M/blend pass on the same batch. Randomness is split into
// independent streams (model init, latent sampling, prior noise, data
// order) so that a lambda = 0 run is trajectory-identical to an
// unregularized one and the distributed runtime can reproduce the sampling
// draws per (step, view).

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mvmdl/nets.hpp"
#include "mvmdl/prior_multi.hpp"
#include "mvmdl/prior_single.hpp"
#include "mvmdl/synth.hpp"

namespace mvmdl {

enum class RegKind { none, vib, cdvib, gm_mdl, gpm_mdl, marginals_only };
RegKind parse_reg_kind(const std::string& s);
std::string reg_kind_name(RegKind kind);

struct TrainConfig {
    RegKind kind = RegKind::none;
    double lambda = 0.0;      // trade-off; the regularizer enters as lambda * (batch value / b)
    int batch_size = 128;
    int epochs = 20;
    double lr = 1e-4;
    double lr_decay = 0.97;   // per-epoch exponential decay
    int samples_train = 1;    // latent draws per input during training
    int samples_eval = 5;     // ... during evaluation
    std::uint64_t seed = 0;
    std::vector<int> hidden = {64, 64};
    int latent_dim = 8;
    int mixture_components = 4;  // M
    UpdateHyper prior_hyper;     // mode defaults to lossy with the averaged estimate
    int normalize_means = -1;    // -1 auto (on for lossy product mixtures), 0 off, 1 on
    int init_batch_factor = 8;   // enlarged init batch, b_tilde = factor * b

    void validate() const;
};

TrainConfig default_train_config();

// Prior side of the training state. gm_mdl and cdvib keep one single-view
// bank per view; the product-mixture kinds keep the joint prior.
struct PriorEngine {
    RegKind kind = RegKind::none;
    std::vector<PriorBankSingle> banks;
    std::optional<ProductMixturePrior> joint;
};

struct TrainState {
    TrainConfig cfg;
    Models models;
    AdamState adam;
    PriorEngine prior;
    int step = 0;          // global iteration index
    double lr_scale = 1.0; // per-epoch decay factor, set by run_training
};

struct Minibatch {
    std::vector<Mat> x;       // per view: b x D
    std::vector<int> labels;
};

// Derived random streams.
std::uint64_t sample_seed(std::uint64_t run_seed, int step, int view);
std::uint64_t prior_seed(std::uint64_t run_seed, int step);

TrainState init_training(const TrainConfig& cfg, const MultiViewDataset& train);

// Latent parameters of a batch under the current encoders.
MultiLatentBatch encode_views(const Models& models, const Minibatch& batch,
                              std::vector<EncoderCache>* caches);

// Regularizer value and per-view latent gradients for the configured kind.
MultiRegResult regularizer_of(const TrainState& state, const MultiLatentBatch& latents);

struct StepStats {
    double loss = 0.0;
    double ce = 0.0;
    double reg = 0.0;  // batch value / b, reported even when lambda = 0
};

// One full optimization step; aborts with a diagnostic on non-finite loss.
StepStats train_step(TrainState* state, const Minibatch& batch);

// Loss under frozen reparameterization noise; pure in the models. Used by
// the finite-difference checks.
double frozen_loss(const TrainState& state, const Minibatch& batch,
                   const std::vector<Mat>& xi);
ModelGrads loss_gradients(const TrainState& state, const Minibatch& batch,
                          const std::vector<Mat>& xi, StepStats* stats);

struct EvalResult {
    double accuracy = 0.0;
    double risk = 0.0;                    // Monte-Carlo 0-1 risk
    std::vector<double> per_class_risk;   // indexed by class
};
EvalResult evaluate(const TrainState& state, const MultiViewDataset& data, int n_samples,
                    std::uint64_t seed);

struct MdlEstimate {
    double total = 0.0;
    double per_sample = 0.0;
};
// Plug-in MDL of the dataset under the engine's prior using the configured
// divergence estimate; vib/none fall back to the standard-normal prior.
MdlEstimate estimate_mdl(const TrainState& state, const MultiViewDataset& data);

struct EpochMetrics {
    int epoch = 0;
    double loss = 0.0;
    double ce = 0.0;
    double reg = 0.0;
    double train_accuracy = 0.0;
    double ghost_accuracy = 0.0;
};

struct TrainResult {
    TrainState state;
    std::vector<EpochMetrics> history;
};

// Full training run; evaluation after every epoch uses seeds derived from
// the run seed, so reruns reproduce the metrics exactly.
TrainResult run_training(const TrainConfig& cfg, const MultiViewDataset& train,
                         const MultiViewDataset& ghost);

// Deterministic epoch batching (shuffled index blocks, partial tail batch
// dropped when a full one exists).
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size,
                                                    std::uint64_t run_seed, int epoch);
Minibatch gather_batch(const MultiViewDataset& data, const std::vector<std::size_t>& idx);

}  // namespace mvmdl
