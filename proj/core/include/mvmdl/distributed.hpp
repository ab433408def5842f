#pragma once
// Deterministic in-process simulation of the K-client / one-server update
// protocol for the product-mixture regularizer. Each round:
//
//   phase 1  each client encodes its view, samples the latent, and reports
//            {sampled latents, divergence matrix, product-kernel exponent
//            and log-product matrices};
//   phase 2  the server forms the joint responsibilities and their
//            marginals from the reports, blends the joint weights, runs the
//            decoder loss and its backward pass, and broadcasts one
//            coefficient message {per-view marginal matrices, marginal
//            weights, per-sample backprop vectors};
//   phase 3  each client assembles its regularizer gradients from the
//            received marginals, updates its encoder, and runs its view's
//            M-step and moving-average blend.
//
// Transport is an in-process ordered queue; every message crosses it
// serialized (canonical little-endian, length-prefixed), so the byte
// counters measure real wire sizes and round trips are bit-exact. The
// trajectory matches the monolithic trainer parameter for parameter.
//
// The wire never carries the joint responsibility tensor: message sizes are
// Theta(K*b*M + K*C*M*d), not Theta(M^K).

#include <cstdint>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "mvmdl/trainer.hpp"

namespace mvmdl {

struct ClientKLReport {
    int view = 0;
    Mat latent_u;       // b x d, the round's sampled latents (one draw)
    Mat divergence;     // b x M
    Mat beta_exponent;  // b x M
    Mat log_prod;       // b x M
};

struct ServerCoeffs {
    std::vector<Mat> gamma_marg;      // K of b x M
    std::vector<Mat> blend_marg;      // K of b x M
    std::vector<Mat> prod_marg;       // K of b x M; empty matrices when var_only
    std::vector<Mat> marginal_alpha;  // K of C x M, after the joint blend
    std::vector<Mat> backprop_mu;     // K of b x d, dCE/du per sample
    double reg_value = 0.0;           // logging only
    double ce = 0.0;                  // logging only
};

struct ClientAck {
    int view = 0;
    std::uint64_t bank_digest = 0;  // digest of the updated view bank
};

using RoundMessage = std::variant<ClientKLReport, ServerCoeffs, ClientAck>;

// Canonical little-endian, length-prefixed encoding; bit-exact round trip.
std::vector<std::uint8_t> serialize_message(const RoundMessage& msg);

class DecodeError : public std::runtime_error {
public:
    DecodeError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"),
          offset_(offset) {}
    std::size_t offset() const { return offset_; }

private:
    std::size_t offset_;
};
RoundMessage deserialize_message(const std::vector<std::uint8_t>& bytes);

std::uint64_t fnv1a(const std::uint8_t* data, std::size_t n);

struct RoundLog {
    int round = 0;
    std::vector<std::pair<std::string, std::uint64_t>> digests;  // message tag -> payload digest
    std::uint64_t bytes = 0;  // total serialized bytes this round
    double reg_value = 0.0;
    double ce = 0.0;
};

// One client: its encoder (with optimizer state), its view's per-class
// component bank, and its slice of the configuration.
struct ClientState {
    int view = 0;
    Models model;  // exactly one encoder, no decoder tensors
    AdamState adam;
    std::vector<GaussianMixture> bank;  // per class
    double eps = 1.0;
};

// The server: decoder (with optimizer state) and the authoritative joint
// weight tensor plus marginal caches. The per-view component entries of
// `joint` are never read here; clients own those.
struct ServerState {
    Models model;  // decoder only
    AdamState adam;
    ProductMixturePrior joint;
};

struct DistributedRun {
    TrainConfig cfg;
    int num_classes = 0;
    ServerState server;
    std::vector<ClientState> clients;
    int step = 0;
    double lr_scale = 1.0;
    std::vector<RoundLog> logs;
};

// Splits a freshly initialized monolithic state into server and client
// slices; requires cfg.kind == gpm_mdl and samples_train == 1.
DistributedRun make_distributed(const TrainConfig& cfg, const MultiViewDataset& train);

// Executes one protocol round on the batch. drop_views simulates missing
// client reports: the round aborts naming the silent view.
RoundLog run_round(DistributedRun* run, const Minibatch& batch,
                   const std::set<int>& drop_views = {});

// Reassembled global views for equivalence checks against the monolithic
// trainer.
Models assemble_models(const DistributedRun& run);
ProductMixturePrior assemble_prior(const DistributedRun& run);

// Binary round-log dump plus a JSON index.
void dump_round_logs(const std::vector<RoundLog>& logs, const std::string& bin_path,
                     const std::string& index_path);
std::vector<RoundLog> load_round_logs(const std::string& index_path);

}  // namespace mvmdl
