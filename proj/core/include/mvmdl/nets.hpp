#pragma once
// Desk-scale stochastic encoders and a linear-softmax decoder with
// hand-rolled differentiation. Encoders are MLPs with leaky-rectifier
// activations whose final layer emits (mu, logvar); latents are drawn with
// the reparameterization u = mu + sigma * xi so gradients flow through the
// sampling path.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mvmdl/gaussian.hpp"
#include "mvmdl/mat.hpp"
#include "mvmdl/rng.hpp"

namespace mvmdl {

struct DenseLayer {
    Mat W;                   // out x in
    std::vector<double> b;   // out
};

struct EncoderMLP {
    std::vector<DenseLayer> layers;  // hidden layers, then the 2d head
    int input_dim = 0;
    int latent_dim = 0;
    double leaky_slope = 0.1;
};

struct DecoderLinear {
    Mat W;                  // C x (K*d)
    std::vector<double> b;  // C
};

struct Models {
    std::vector<EncoderMLP> encoders;  // one per view
    DecoderLinear decoder;

    int num_views() const { return static_cast<int>(encoders.size()); }
    int latent_dim() const { return encoders.empty() ? 0 : encoders[0].latent_dim; }
    int num_classes() const { return static_cast<int>(decoder.b.size()); }
};

// Xavier-uniform weights, zero biases.
EncoderMLP make_encoder(int input_dim, const std::vector<int>& hidden, int latent_dim,
                        Rng& rng, double leaky_slope = 0.1);
DecoderLinear make_decoder(int input_dim, int num_classes, Rng& rng);

// Forward pass caches everything backward needs.
struct EncoderCache {
    std::vector<Mat> pre;   // per layer: b x width, pre-activation
    std::vector<Mat> act;   // act[0] = input, act[l+1] = activation of layer l
    Mat mu;                 // b x d
    Mat sigma;              // b x d, standard deviation after the floor
    std::vector<std::uint8_t> floored;  // b*d, variance clamped at kVarFloor
};

EncoderCache encode_batch(const EncoderMLP& enc, const Mat& x);

// Single-input convenience used by tests and the evaluator.
DiagGaussian encode(const EncoderMLP& enc, const std::vector<double>& x);

// u = mu + sigma * xi with xi recorded; deterministic given the seed.
struct LatentDraws {
    std::vector<Mat> xi;  // per draw: b x d
    std::vector<Mat> u;   // per draw: b x d
};
LatentDraws sample_latent(const Mat& mu, const Mat& sigma, int n_samples, std::uint64_t seed);

// Softmax probabilities of the decoder on concatenated latents (b x K*d).
Mat decode_probs(const DecoderLinear& dec, const Mat& u);

// Gradient containers mirror the model shapes.
struct ModelGrads {
    std::vector<EncoderMLP> encoders;
    DecoderLinear decoder;
};
ModelGrads zero_grads(const Models& models);

// Cross-entropy backward through the decoder and the sampling path. This is
// the stage the distributed server runs: it only needs the decoder, the
// sampled latents and the labels, and it hands each view its latent
// gradients (d_mu, d_sigma include the xi factor of the sampling path).
struct CeBackward {
    double ce = 0.0;          // mean cross-entropy over batch and draws
    Mat dec_W;                // decoder weight gradient
    std::vector<double> dec_b;
    std::vector<Mat> d_mu;    // per view: b x d
    std::vector<Mat> d_sigma; // per view: b x d
};
CeBackward ce_backward(const DecoderLinear& dec, const std::vector<LatentDraws>& draws,
                       const std::vector<int>& labels);

// Backward through one encoder given the latent-parameter gradients; the
// stage each client runs for its own view.
void encoder_backward(const EncoderMLP& enc, const EncoderCache& cache, const Mat& d_mu,
                      const Mat& d_sigma, EncoderMLP* grads);

// Convenience composition of the two stages. d_mu_extra / d_sigma_extra
// (entries may be null) are added to the latent gradients before the encoder
// backward pass; this is where the regularizer gradients enter. Returns the
// mean cross-entropy.
double backward_batch(const Models& models, const std::vector<EncoderCache>& caches,
                      const std::vector<LatentDraws>& draws, const std::vector<int>& labels,
                      const std::vector<const Mat*>& d_mu_extra,
                      const std::vector<const Mat*>& d_sigma_extra, ModelGrads* grads);

// Adam with moments per parameter tensor.
struct AdamState {
    ModelGrads m;
    ModelGrads v;
    std::int64_t step = 0;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
};
AdamState make_adam(const Models& models);
void adam_update(Models* models, AdamState* state, const ModelGrads& grads, double lr);

// Visits every parameter of the model together with its counterpart in a
// same-shaped structure (used by the finite-difference checks).
void for_each_param(Models* models, ModelGrads* grads,
                    const std::function<void(double&, double&)>& fn);

// Checkpoints: shapes in JSON, weights as little-endian 64-bit reals in a
// sidecar binary. Round trip is bit-exact.
void save_models(const Models& models, const std::string& json_path,
                 const std::string& weights_path);
Models load_models(const std::string& json_path);

}  // namespace mvmdl
