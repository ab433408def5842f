#include "mvmdl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace mvmdl {

namespace {

constexpr std::uint64_t kModelTag = 0x6d6f64656cull;
constexpr std::uint64_t kSampleTag = 0x73616d70ull;
constexpr std::uint64_t kPriorTag = 0x7072696full;
constexpr std::uint64_t kDataTag = 0x64617461ull;
constexpr std::uint64_t kInitTag = 0x696e6974ull;
constexpr std::uint64_t kEvalTag = 0x6576616cull;

}  // namespace

RegKind parse_reg_kind(const std::string& s) {
    if (s == "none") return RegKind::none;
    if (s == "vib") return RegKind::vib;
    if (s == "cdvib") return RegKind::cdvib;
    if (s == "gm_mdl") return RegKind::gm_mdl;
    if (s == "gpm_mdl") return RegKind::gpm_mdl;
    if (s == "marginals_only") return RegKind::marginals_only;
    throw std::invalid_argument("unknown regularizer kind '" + s + "'");
}

std::string reg_kind_name(RegKind kind) {
    switch (kind) {
        case RegKind::none: return "none";
        case RegKind::vib: return "vib";
        case RegKind::cdvib: return "cdvib";
        case RegKind::gm_mdl: return "gm_mdl";
        case RegKind::gpm_mdl: return "gpm_mdl";
        case RegKind::marginals_only: return "marginals_only";
    }
    return "none";
}

void TrainConfig::validate() const {
    if (!(lambda >= 0.0)) throw std::invalid_argument("TrainConfig: lambda must be >= 0");
    if (batch_size < 1 || epochs < 0) throw std::invalid_argument("TrainConfig: bad sizes");
    if (samples_train < 1 || samples_eval < 1) throw std::invalid_argument("TrainConfig: samples must be >= 1");
    if (!(lr >= 0.0)) throw std::invalid_argument("TrainConfig: lr must be >= 0");
    if (latent_dim < 1 || mixture_components < 1) throw std::invalid_argument("TrainConfig: bad dims");
    if (init_batch_factor < 1) throw std::invalid_argument("TrainConfig: init_batch_factor must be >= 1");
    prior_hyper.validate();
}

TrainConfig default_train_config() {
    TrainConfig cfg;
    cfg.prior_hyper.mode = PriorMode::lossy;
    cfg.prior_hyper.kl_estimate = KlEstimate::avg_var_prod;
    return cfg;
}

std::uint64_t sample_seed(std::uint64_t run_seed, int step, int view) {
    return derive_seed(derive_seed(run_seed ^ kSampleTag, static_cast<std::uint64_t>(step)),
                       static_cast<std::uint64_t>(view));
}

std::uint64_t prior_seed(std::uint64_t run_seed, int step) {
    return derive_seed(run_seed ^ kPriorTag, static_cast<std::uint64_t>(step));
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size,
                                                    std::uint64_t run_seed, int epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(run_seed ^ kDataTag, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = n; i > 1; --i) {
        std::swap(order[i - 1], order[rng.below(i)]);
    }
    std::vector<std::vector<std::size_t>> batches;
    const std::size_t b = static_cast<std::size_t>(batch_size);
    if (n <= b) {
        batches.push_back(order);
        return batches;
    }
    for (std::size_t start = 0; start + b <= n; start += b) {
        batches.emplace_back(order.begin() + start, order.begin() + start + b);
    }
    return batches;
}

Minibatch gather_batch(const MultiViewDataset& data, const std::vector<std::size_t>& idx) {
    Minibatch batch;
    batch.labels.resize(idx.size());
    for (std::size_t t = 0; t < idx.size(); ++t) batch.labels[t] = data.labels[idx[t]];
    for (const auto& view : data.views) {
        Mat x(idx.size(), view.cols);
        for (std::size_t t = 0; t < idx.size(); ++t) {
            std::copy(view.row(idx[t]), view.row(idx[t]) + view.cols, x.row(t));
        }
        batch.x.push_back(std::move(x));
    }
    return batch;
}

MultiLatentBatch encode_views(const Models& models, const Minibatch& batch,
                              std::vector<EncoderCache>* caches) {
    MultiLatentBatch latents;
    for (int k = 0; k < models.num_views(); ++k) {
        EncoderCache cache = encode_batch(models.encoders[k], batch.x[k]);
        LatentBatch lv;
        lv.mu = cache.mu;
        lv.sigma = cache.sigma;
        lv.labels = batch.labels;
        latents.view.push_back(std::move(lv));
        if (caches != nullptr) caches->push_back(std::move(cache));
    }
    return latents;
}

namespace {

UpdateHyper resolve_hyper(const TrainConfig& cfg, bool joint_prior) {
    UpdateHyper hyper = cfg.prior_hyper;
    if (cfg.normalize_means >= 0) {
        hyper.normalize_means = cfg.normalize_means != 0;
    } else {
        hyper.normalize_means = joint_prior && hyper.mode == PriorMode::lossy;
    }
    return hyper;
}

}  // namespace

TrainState init_training(const TrainConfig& cfg, const MultiViewDataset& train) {
    cfg.validate();
    train.validate();
    const int K = train.num_views();
    const int D = static_cast<int>(train.dim());
    const int C = train.num_classes;

    TrainState state;
    state.cfg = cfg;

    Rng model_rng(derive_seed(cfg.seed, kModelTag));
    for (int k = 0; k < K; ++k) {
        state.models.encoders.push_back(make_encoder(D, cfg.hidden, cfg.latent_dim, model_rng));
    }
    state.models.decoder = make_decoder(K * cfg.latent_dim, C, model_rng);
    state.adam = make_adam(state.models);

    state.prior.kind = cfg.kind;
    if (cfg.kind == RegKind::none || cfg.kind == RegKind::vib) return state;

    // Enlarged initialization batch.
    const std::size_t n = train.size();
    std::size_t want = static_cast<std::size_t>(cfg.init_batch_factor) *
                       static_cast<std::size_t>(cfg.batch_size);
    want = std::min(want, n);
    Rng init_rng(derive_seed(cfg.seed, kInitTag));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[init_rng.below(i)]);
    order.resize(want);
    const Minibatch init_batch = gather_batch(train, order);
    const MultiLatentBatch latents = encode_views(state.models, init_batch, nullptr);

    if (cfg.kind == RegKind::cdvib) {
        UpdateHyper hyper = resolve_hyper(cfg, false);
        hyper.mode = PriorMode::lossless;           // class-conditional single Gaussian
        hyper.kl_estimate = KlEstimate::var_only;
        for (int k = 0; k < K; ++k) {
            state.prior.banks.push_back(init_single_bank(latents.view[k], C, 1, hyper,
                                                         derive_seed(init_rng.raw(), k)));
        }
    } else if (cfg.kind == RegKind::gm_mdl) {
        const UpdateHyper hyper = resolve_hyper(cfg, false);
        for (int k = 0; k < K; ++k) {
            state.prior.banks.push_back(init_single_bank(latents.view[k], C,
                                                         cfg.mixture_components, hyper,
                                                         derive_seed(init_rng.raw(), k)));
        }
    } else {
        const UpdateHyper hyper = resolve_hyper(cfg, true);
        state.prior.joint =
            init_multi_bank(latents, C, cfg.mixture_components, hyper, init_rng.raw());
    }
    return state;
}

MultiRegResult regularizer_of(const TrainState& state, const MultiLatentBatch& latents) {
    const int K = static_cast<int>(latents.num_views());
    const std::size_t b = latents.size();
    const std::size_t d = latents.dim();
    MultiRegResult res;
    switch (state.prior.kind) {
        case RegKind::none:
            res.d_mu.assign(K, Mat(b, d));
            res.d_sigma.assign(K, Mat(b, d));
            return res;
        case RegKind::vib: {
            for (int k = 0; k < K; ++k) {
                RegResult r = vib_regularizer(latents.view[k]);
                res.value += r.value;
                res.d_mu.push_back(std::move(r.d_mu));
                res.d_sigma.push_back(std::move(r.d_sigma));
            }
            return res;
        }
        case RegKind::cdvib:
        case RegKind::gm_mdl: {
            for (int k = 0; k < K; ++k) {
                RegResult r = mixture_regularizer(state.prior.banks[k], latents.view[k]);
                res.value += r.value;
                res.d_mu.push_back(std::move(r.d_mu));
                res.d_sigma.push_back(std::move(r.d_sigma));
            }
            return res;
        }
        case RegKind::gpm_mdl:
            return joint_regularizer(*state.prior.joint, latents);
        case RegKind::marginals_only:
            return marginal_regularizer(*state.prior.joint, latents);
    }
    return res;
}

namespace {

void update_prior(TrainState* state, const MultiLatentBatch& latents) {
    const std::uint64_t seed = prior_seed(state->cfg.seed, state->step);
    switch (state->prior.kind) {
        case RegKind::none:
        case RegKind::vib:
            return;
        case RegKind::cdvib:
        case RegKind::gm_mdl: {
            for (std::size_t k = 0; k < state->prior.banks.size(); ++k) {
                PriorBankSingle& bank = state->prior.banks[k];
                const Mat gamma = responsibilities(bank, latents.view[k]);
                const SingleCandidates cand = fit_candidates(bank, latents.view[k], gamma);
                bank = blend_update(bank, cand, state->step,
                                    derive_seed(seed, static_cast<std::uint64_t>(k)));
            }
            return;
        }
        case RegKind::gpm_mdl:
        case RegKind::marginals_only: {
            ProductMixturePrior& joint = *state->prior.joint;
            const Mat gamma = joint_responsibilities(joint, latents);
            const JointCandidates cand = fit_joint_candidates(joint, latents, gamma);
            joint = blend_update(joint, cand, state->step, seed);
            return;
        }
    }
}

}  // namespace

StepStats train_step(TrainState* state, const Minibatch& batch) {
    const TrainConfig& cfg = state->cfg;
    const int K = state->models.num_views();
    const std::size_t b = batch.labels.size();

    std::vector<EncoderCache> caches;
    const MultiLatentBatch latents = encode_views(state->models, batch, &caches);

    std::vector<LatentDraws> draws;
    for (int k = 0; k < K; ++k) {
        draws.push_back(sample_latent(caches[k].mu, caches[k].sigma, cfg.samples_train,
                                      sample_seed(cfg.seed, state->step, k)));
    }

    const MultiRegResult reg = regularizer_of(*state, latents);

    ModelGrads grads = zero_grads(state->models);
    std::vector<Mat> scaled_mu, scaled_sigma;
    std::vector<const Mat*> extra_mu(K, nullptr), extra_sigma(K, nullptr);
    const double scale = cfg.lambda / static_cast<double>(b);
    if (cfg.lambda > 0.0 && state->prior.kind != RegKind::none) {
        scaled_mu.resize(K);
        scaled_sigma.resize(K);
        for (int k = 0; k < K; ++k) {
            scaled_mu[k] = reg.d_mu[k];
            scaled_sigma[k] = reg.d_sigma[k];
            for (auto& v : scaled_mu[k].data) v *= scale;
            for (auto& v : scaled_sigma[k].data) v *= scale;
            extra_mu[k] = &scaled_mu[k];
            extra_sigma[k] = &scaled_sigma[k];
        }
    }
    const double ce = backward_batch(state->models, caches, draws, batch.labels, extra_mu,
                                     extra_sigma, &grads);

    StepStats stats;
    stats.ce = ce;
    stats.reg = reg.value / static_cast<double>(b);
    stats.loss = ce + cfg.lambda * stats.reg;
    if (!std::isfinite(stats.loss)) {
        std::ostringstream msg;
        msg << "non-finite loss at step " << state->step << " (ce=" << ce
            << ", reg=" << stats.reg << ")";
        throw std::runtime_error(msg.str());
    }

    adam_update(&state->models, &state->adam, grads, cfg.lr * state->lr_scale);
    update_prior(state, latents);
    state->step += 1;
    return stats;
}

double frozen_loss(const TrainState& state, const Minibatch& batch,
                   const std::vector<Mat>& xi) {
    const TrainConfig& cfg = state.cfg;
    const int K = state.models.num_views();
    std::vector<EncoderCache> caches;
    const MultiLatentBatch latents = encode_views(state.models, batch, &caches);

    std::vector<LatentDraws> draws(K);
    for (int k = 0; k < K; ++k) {
        Mat u = caches[k].mu;
        for (std::size_t t = 0; t < u.data.size(); ++t) {
            u.data[t] += caches[k].sigma.data[t] * xi[k].data[t];
        }
        draws[k].xi.push_back(xi[k]);
        draws[k].u.push_back(std::move(u));
    }
    const CeBackward ce = ce_backward(state.models.decoder, draws, batch.labels);
    const MultiRegResult reg = regularizer_of(state, latents);
    return ce.ce + cfg.lambda * reg.value / static_cast<double>(batch.labels.size());
}

ModelGrads loss_gradients(const TrainState& state, const Minibatch& batch,
                          const std::vector<Mat>& xi, StepStats* stats) {
    const TrainConfig& cfg = state.cfg;
    const int K = state.models.num_views();
    const std::size_t b = batch.labels.size();
    std::vector<EncoderCache> caches;
    const MultiLatentBatch latents = encode_views(state.models, batch, &caches);

    std::vector<LatentDraws> draws(K);
    for (int k = 0; k < K; ++k) {
        Mat u = caches[k].mu;
        for (std::size_t t = 0; t < u.data.size(); ++t) {
            u.data[t] += caches[k].sigma.data[t] * xi[k].data[t];
        }
        draws[k].xi.push_back(xi[k]);
        draws[k].u.push_back(std::move(u));
    }
    const MultiRegResult reg = regularizer_of(state, latents);

    ModelGrads grads = zero_grads(state.models);
    std::vector<Mat> scaled_mu(K), scaled_sigma(K);
    std::vector<const Mat*> extra_mu(K, nullptr), extra_sigma(K, nullptr);
    const double scale = cfg.lambda / static_cast<double>(b);
    if (cfg.lambda > 0.0 && state.prior.kind != RegKind::none) {
        for (int k = 0; k < K; ++k) {
            scaled_mu[k] = reg.d_mu[k];
            scaled_sigma[k] = reg.d_sigma[k];
            for (auto& v : scaled_mu[k].data) v *= scale;
            for (auto& v : scaled_sigma[k].data) v *= scale;
            extra_mu[k] = &scaled_mu[k];
            extra_sigma[k] = &scaled_sigma[k];
        }
    }
    const double ce = backward_batch(state.models, caches, draws, batch.labels, extra_mu,
                                     extra_sigma, &grads);
    if (stats != nullptr) {
        stats->ce = ce;
        stats->reg = reg.value / static_cast<double>(b);
        stats->loss = ce + cfg.lambda * stats->reg;
    }
    return grads;
}

EvalResult evaluate(const TrainState& state, const MultiViewDataset& data, int n_samples,
                    std::uint64_t seed) {
    data.validate();
    if (n_samples < 1) throw std::invalid_argument("evaluate: n_samples must be >= 1");
    const int K = state.models.num_views();
    const std::size_t n = data.size();
    const std::size_t d = static_cast<std::size_t>(state.models.latent_dim());

    EvalResult result;
    result.per_class_risk.assign(data.num_classes, 0.0);
    std::vector<std::int64_t> class_count(data.num_classes, 0);

    const std::size_t chunk = 512;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t stop = std::min(n, start + chunk);
        idx.resize(stop - start);
        for (std::size_t t = 0; t < idx.size(); ++t) idx[t] = start + t;
        const Minibatch batch = gather_batch(data, idx);
        std::vector<EncoderCache> caches;
        encode_views(state.models, batch, &caches);

        const std::size_t b = idx.size();
        Mat u(b, static_cast<std::size_t>(K) * d);
        for (int s = 0; s < n_samples; ++s) {
            for (int k = 0; k < K; ++k) {
                for (std::size_t i = 0; i < b; ++i) {
                    // Per-sample, per-view streams keep the draw independent
                    // of the chunking.
                    Rng rng(derive_seed(derive_seed(seed, start + i),
                                        static_cast<std::uint64_t>(k) * 1000003ull +
                                            static_cast<std::uint64_t>(s)));
                    for (std::size_t j = 0; j < d; ++j) {
                        u(i, static_cast<std::size_t>(k) * d + j) =
                            caches[k].mu(i, j) + caches[k].sigma(i, j) * rng.normal();
                    }
                }
            }
            const Mat probs = decode_probs(state.models.decoder, u);
            for (std::size_t i = 0; i < b; ++i) {
                const double risk = 1.0 - probs(i, batch.labels[i]);
                result.risk += risk / n_samples;
                result.per_class_risk[batch.labels[i]] += risk / n_samples;
            }
        }
        for (std::size_t i = 0; i < b; ++i) class_count[batch.labels[i]] += 1;
    }
    result.risk /= static_cast<double>(n);
    for (int c = 0; c < data.num_classes; ++c) {
        if (class_count[c] > 0) result.per_class_risk[c] /= static_cast<double>(class_count[c]);
    }
    result.accuracy = 1.0 - result.risk;
    return result;
}

MdlEstimate estimate_mdl(const TrainState& state, const MultiViewDataset& data) {
    data.validate();
    const std::size_t n = data.size();
    double total = 0.0;
    const std::size_t chunk = 512;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t stop = std::min(n, start + chunk);
        idx.resize(stop - start);
        for (std::size_t t = 0; t < idx.size(); ++t) idx[t] = start + t;
        const Minibatch batch = gather_batch(data, idx);
        const MultiLatentBatch latents = encode_views(state.models, batch, nullptr);
        if (state.prior.kind == RegKind::none || state.prior.kind == RegKind::vib) {
            for (std::size_t k = 0; k < latents.view.size(); ++k) {
                total += vib_regularizer(latents.view[k]).value;
            }
        } else {
            total += regularizer_of(state, latents).value;
        }
    }
    MdlEstimate est;
    // The averaged divergence estimate can dip below zero on near-perfect
    // fits; the MDL plug-in is reported clamped.
    est.total = std::max(0.0, total);
    est.per_sample = est.total / static_cast<double>(n);
    return est;
}

TrainResult run_training(const TrainConfig& cfg, const MultiViewDataset& train,
                         const MultiViewDataset& ghost) {
    TrainResult result;
    result.state = init_training(cfg, train);
    TrainState& state = result.state;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        state.lr_scale = std::pow(cfg.lr_decay, epoch);
        const auto batches = epoch_batches(train.size(), cfg.batch_size, cfg.seed, epoch);
        EpochMetrics metrics;
        metrics.epoch = epoch;
        for (const auto& idx : batches) {
            const Minibatch batch = gather_batch(train, idx);
            const StepStats stats = train_step(&state, batch);
            metrics.loss += stats.loss / static_cast<double>(batches.size());
            metrics.ce += stats.ce / static_cast<double>(batches.size());
            metrics.reg += stats.reg / static_cast<double>(batches.size());
        }
        metrics.train_accuracy =
            evaluate(state, train, cfg.samples_eval,
                     derive_seed(cfg.seed ^ kEvalTag, 2 * epoch)).accuracy;
        metrics.ghost_accuracy =
            evaluate(state, ghost, cfg.samples_eval,
                     derive_seed(cfg.seed ^ kEvalTag, 2 * epoch + 1)).accuracy;
        result.history.push_back(metrics);
    }
    return result;
}

}  // namespace mvmdl
