#include "mvmdl/distributed.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace mvmdl {

namespace {

// --- canonical byte codec ---------------------------------------------------

struct Writer {
    std::vector<std::uint8_t> bytes;

    void u8(std::uint8_t v) { bytes.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void mat(const Mat& m) {
        u64(m.rows);
        u64(m.cols);
        for (double v : m.data) f64(v);
    }
};

struct Reader {
    const std::vector<std::uint8_t>& bytes;
    std::size_t pos = 0;

    explicit Reader(const std::vector<std::uint8_t>& b) : bytes(b) {}

    void need(std::size_t n, const char* what) {
        if (pos + n > bytes.size()) throw DecodeError(std::string("truncated ") + what, pos);
    }
    std::uint8_t u8() {
        need(1, "u8");
        return bytes[pos++];
    }
    std::uint32_t u32() {
        need(4, "u32");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos++]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8, "u64");
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[pos++]) << (8 * i);
        return v;
    }
    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    Mat mat() {
        const std::uint64_t rows = u64();
        const std::uint64_t cols = u64();
        if (rows > (1ull << 32) || cols > (1ull << 32)) {
            throw DecodeError("implausible matrix shape", pos);
        }
        need(rows * cols * 8, "matrix payload");
        Mat m(rows, cols);
        for (double& v : m.data) v = f64();
        return m;
    }
};

constexpr std::uint8_t kTagReport = 0;
constexpr std::uint8_t kTagCoeffs = 1;
constexpr std::uint8_t kTagAck = 2;

std::uint64_t digest_of(const std::vector<std::uint8_t>& frame) {
    return fnv1a(frame.data(), frame.size());
}

std::uint64_t bank_digest(const std::vector<GaussianMixture>& bank) {
    Writer w;
    for (const auto& mix : bank) {
        for (double x : mix.weights) w.f64(x);
        for (const auto& comp : mix.components) {
            for (double x : comp.mean) w.f64(x);
            for (double x : comp.var) w.f64(x);
        }
    }
    return fnv1a(w.bytes.data(), w.bytes.size());
}

double joint_mean_var_of(int K, std::size_t d) {
    return 0.5 * std::sqrt(static_cast<double>(K) * static_cast<double>(d));
}

}  // namespace

std::uint64_t fnv1a(const std::uint8_t* data, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::vector<std::uint8_t> serialize_message(const RoundMessage& msg) {
    Writer w;
    if (const auto* report = std::get_if<ClientKLReport>(&msg)) {
        w.u8(kTagReport);
        w.u32(static_cast<std::uint32_t>(report->view));
        w.mat(report->latent_u);
        w.mat(report->divergence);
        w.mat(report->beta_exponent);
        w.mat(report->log_prod);
    } else if (const auto* coeffs = std::get_if<ServerCoeffs>(&msg)) {
        w.u8(kTagCoeffs);
        w.u32(static_cast<std::uint32_t>(coeffs->gamma_marg.size()));
        auto group = [&](const std::vector<Mat>& mats) {
            for (const Mat& m : mats) w.mat(m);
        };
        group(coeffs->gamma_marg);
        group(coeffs->blend_marg);
        group(coeffs->prod_marg);
        group(coeffs->marginal_alpha);
        group(coeffs->backprop_mu);
        w.f64(coeffs->reg_value);
        w.f64(coeffs->ce);
    } else {
        const auto& ack = std::get<ClientAck>(msg);
        w.u8(kTagAck);
        w.u32(static_cast<std::uint32_t>(ack.view));
        w.u64(ack.bank_digest);
    }
    Writer framed;
    framed.u64(w.bytes.size());
    framed.bytes.insert(framed.bytes.end(), w.bytes.begin(), w.bytes.end());
    return framed.bytes;
}

RoundMessage deserialize_message(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    const std::uint64_t len = r.u64();
    if (len + 8 != bytes.size()) throw DecodeError("frame length mismatch", r.pos);
    const std::uint8_t tag = r.u8();
    if (tag == kTagReport) {
        ClientKLReport report;
        report.view = static_cast<int>(r.u32());
        report.latent_u = r.mat();
        report.divergence = r.mat();
        report.beta_exponent = r.mat();
        report.log_prod = r.mat();
        if (r.pos != bytes.size()) throw DecodeError("trailing bytes", r.pos);
        return report;
    }
    if (tag == kTagCoeffs) {
        ServerCoeffs coeffs;
        const std::uint32_t K = r.u32();
        auto group = [&](std::vector<Mat>* mats) {
            mats->clear();
            for (std::uint32_t k = 0; k < K; ++k) mats->push_back(r.mat());
        };
        group(&coeffs.gamma_marg);
        group(&coeffs.blend_marg);
        group(&coeffs.prod_marg);
        group(&coeffs.marginal_alpha);
        group(&coeffs.backprop_mu);
        coeffs.reg_value = r.f64();
        coeffs.ce = r.f64();
        if (r.pos != bytes.size()) throw DecodeError("trailing bytes", r.pos);
        return coeffs;
    }
    if (tag == kTagAck) {
        ClientAck ack;
        ack.view = static_cast<int>(r.u32());
        ack.bank_digest = r.u64();
        if (r.pos != bytes.size()) throw DecodeError("trailing bytes", r.pos);
        return ack;
    }
    throw DecodeError("unknown message tag", 8);
}

DistributedRun make_distributed(const TrainConfig& cfg, const MultiViewDataset& train) {
    if (cfg.kind != RegKind::gpm_mdl) {
        throw std::invalid_argument("make_distributed: protocol is defined for the gpm_mdl kind");
    }
    if (cfg.samples_train != 1) {
        throw std::invalid_argument("make_distributed: one latent draw per input on the wire");
    }
    TrainState state = init_training(cfg, train);
    const ProductMixturePrior& joint = *state.prior.joint;

    DistributedRun run;
    run.cfg = cfg;
    run.num_classes = train.num_classes;

    run.server.model.decoder = state.models.decoder;
    run.server.adam = make_adam(run.server.model);
    run.server.joint = joint;  // component entries of this copy are never read

    for (int k = 0; k < train.num_views(); ++k) {
        ClientState client;
        client.view = k;
        client.model.encoders.push_back(state.models.encoders[k]);
        client.adam = make_adam(client.model);
        client.bank.resize(train.num_classes);
        for (int c = 0; c < train.num_classes; ++c) client.bank[c] = joint.views[c][k];
        client.eps = joint.eps_view[k];
        run.clients.push_back(std::move(client));
    }
    return run;
}

RoundLog run_round(DistributedRun* run, const Minibatch& batch, const std::set<int>& drop_views) {
    const TrainConfig& cfg = run->cfg;
    const int K = static_cast<int>(run->clients.size());
    const std::size_t b = batch.labels.size();
    const std::size_t d = static_cast<std::size_t>(cfg.latent_dim);
    const UpdateHyper& hyper = run->server.joint.hyper;
    const double mean_var = joint_mean_var_of(K, d);
    const bool avg_mode = hyper.kl_estimate == KlEstimate::avg_var_prod;

    RoundLog log;
    log.round = run->step;

    // ---- phase 1: client reports --------------------------------------------
    std::vector<std::vector<std::uint8_t>> wire;
    std::vector<EncoderCache> caches(K);
    std::vector<LatentDraws> draws(K);
    std::vector<LatentBatch> latents(K);
    for (int k = 0; k < K; ++k) {
        if (drop_views.count(k) != 0) continue;
        ClientState& client = run->clients[k];
        caches[k] = encode_batch(client.model.encoders[0], batch.x[k]);
        draws[k] = sample_latent(caches[k].mu, caches[k].sigma, 1,
                                 sample_seed(cfg.seed, run->step, k));
        latents[k].mu = caches[k].mu;
        latents[k].sigma = caches[k].sigma;
        latents[k].labels = batch.labels;

        ClientKLReport report;
        report.view = k;
        report.latent_u = draws[k].u[0];
        fill_divergence_matrix(client.bank, latents[k], hyper.mode, client.eps, mean_var,
                               &report.divergence);
        fill_beta_exponent_matrix(client.bank, latents[k], hyper.mode, mean_var,
                                  &report.beta_exponent);
        {
            // The shared log-prod kernel reads only this view's slice.
            ProductMixturePrior slice;
            slice.num_classes = run->num_classes;
            slice.num_views = K;
            slice.num_components = cfg.mixture_components;
            slice.dim = static_cast<int>(d);
            slice.hyper = hyper;
            slice.eps_view.assign(K, client.eps);
            slice.views.assign(run->num_classes, std::vector<GaussianMixture>(K));
            for (int c = 0; c < run->num_classes; ++c) slice.views[c][k] = client.bank[c];
            report.log_prod = view_log_prod_matrix(slice, latents[k], k);
        }
        wire.push_back(serialize_message(RoundMessage(std::move(report))));
    }

    // ---- server intake --------------------------------------------------------
    std::vector<ClientKLReport> reports(K);
    std::vector<std::uint8_t> seen(K, 0);
    for (const auto& frame : wire) {
        log.bytes += frame.size();
        RoundMessage msg = deserialize_message(frame);
        auto& report = std::get<ClientKLReport>(msg);
        if (report.view < 0 || report.view >= K) {
            throw std::runtime_error("protocol violation: report for unknown view " +
                                     std::to_string(report.view));
        }
        if (seen[report.view]) {
            throw std::runtime_error("protocol violation: duplicate report for view " +
                                     std::to_string(report.view));
        }
        seen[report.view] = 1;
        log.digests.emplace_back("report_v" + std::to_string(report.view), digest_of(frame));
        reports[report.view] = std::move(report);
    }
    for (int k = 0; k < K; ++k) {
        if (!seen[k]) {
            throw std::runtime_error("protocol violation: missing report for view " +
                                     std::to_string(k));
        }
    }

    // ---- phase 2: server --------------------------------------------------------
    ServerState& server = run->server;
    std::vector<Mat> divs(K), beta_exps(K), neg_div(K), log_prods(K);
    for (int k = 0; k < K; ++k) {
        divs[k] = reports[k].divergence;
        beta_exps[k] = reports[k].beta_exponent;
        neg_div[k] = reports[k].divergence;
        for (auto& v : neg_div[k].data) v = -v;
        log_prods[k] = reports[k].log_prod;
    }

    const JointSoftmaxOut var_out = joint_softmax_marginals(server.joint, batch.labels, neg_div);
    double reg_value = 0.0;
    for (std::size_t i = 0; i < b; ++i) reg_value += -var_out.lse[i];
    JointSoftmaxOut prod_out;
    if (avg_mode) {
        prod_out = joint_softmax_marginals(server.joint, batch.labels, log_prods);
        double prod_value = 0.0;
        const double head = 0.5 * static_cast<double>(K) * static_cast<double>(d) *
                            std::log(3.141592653589793238462643383280 * std::exp(1.0) *
                                     (2.0 * mean_var));
        for (std::size_t i = 0; i < b; ++i) {
            // The per-sample entropy head of the lossless variant lives with
            // the clients; the broadcast value is exact in the lossy default.
            prod_value += -((hyper.mode == PriorMode::lossy ? head : 0.0) + prod_out.lse[i]);
        }
        reg_value = 0.5 * (reg_value + prod_value);
    }

    const JointEmOutputs em = joint_em_from_reports(server.joint, batch.labels, divs, beta_exps);

    // Decoder loss and backward on the reported latents; the xi factors stay
    // with the clients, so the server's noise records are zeros.
    std::vector<LatentDraws> server_draws(K);
    for (int k = 0; k < K; ++k) {
        server_draws[k].xi.push_back(Mat(b, d));
        server_draws[k].u.push_back(reports[k].latent_u);
    }
    const CeBackward ceb = ce_backward(server.model.decoder, server_draws, batch.labels);

    ModelGrads server_grads = zero_grads(server.model);
    server_grads.decoder.W = ceb.dec_W;
    server_grads.decoder.b = ceb.dec_b;
    adam_update(&server.model, &server.adam, server_grads, cfg.lr * run->lr_scale);

    blend_joint_weights(&server.joint, em.joint_weight_candidate, em.class_present);

    ServerCoeffs coeffs;
    coeffs.gamma_marg = em.gamma_marg;
    coeffs.blend_marg = em.blend_marg;
    if (avg_mode) {
        coeffs.prod_marg = prod_out.marg;
    } else {
        coeffs.prod_marg.assign(K, Mat(0, 0));
    }
    coeffs.marginal_alpha.assign(K, Mat(run->num_classes, cfg.mixture_components));
    for (int k = 0; k < K; ++k) {
        for (int c = 0; c < run->num_classes; ++c) {
            for (int m = 0; m < cfg.mixture_components; ++m) {
                coeffs.marginal_alpha[k](c, m) = server.joint.views[c][k].weights[m];
            }
        }
    }
    coeffs.backprop_mu = ceb.d_mu;
    coeffs.reg_value = reg_value;
    coeffs.ce = ceb.ce;
    log.reg_value = reg_value;
    log.ce = ceb.ce;

    const auto coeff_frame = serialize_message(RoundMessage(coeffs));
    log.bytes += coeff_frame.size();
    log.digests.emplace_back("coeffs", digest_of(coeff_frame));
    RoundMessage coeffs_msg = deserialize_message(coeff_frame);
    const ServerCoeffs& rx = std::get<ServerCoeffs>(coeffs_msg);

    // ---- phase 3: clients ---------------------------------------------------------
    std::vector<std::uint8_t> class_present(run->num_classes, 0);
    for (int y : batch.labels) class_present[y] = 1;
    const std::uint64_t round_prior_seed = prior_seed(cfg.seed, run->step);
    for (int k = 0; k < K; ++k) {
        ClientState& client = run->clients[k];

        Mat var_mu(b, d), var_sigma(b, d);
        accumulate_var_gradients(client.bank, latents[k], rx.gamma_marg[k], hyper.mode,
                                 client.eps, mean_var, &var_mu, &var_sigma);
        Mat reg_mu = var_mu, reg_sigma = var_sigma;
        if (avg_mode) {
            Mat prod_mu(b, d), prod_sigma(b, d);
            accumulate_prod_gradients(client.bank, latents[k], rx.prod_marg[k], hyper.mode,
                                      mean_var, &prod_mu, &prod_sigma);
            for (std::size_t t = 0; t < b * d; ++t) {
                reg_mu.data[t] = 0.5 * (var_mu.data[t] + prod_mu.data[t]);
                reg_sigma.data[t] = 0.5 * (var_sigma.data[t] + prod_sigma.data[t]);
            }
        }

        Mat d_mu = rx.backprop_mu[k];
        Mat d_sigma(b, d);
        for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                d_sigma(i, j) = rx.backprop_mu[k](i, j) * draws[k].xi[0](i, j);
            }
        }
        if (cfg.lambda > 0.0) {
            const double scale = cfg.lambda / static_cast<double>(b);
            for (std::size_t t = 0; t < b * d; ++t) {
                d_mu.data[t] += reg_mu.data[t] * scale;
                d_sigma.data[t] += reg_sigma.data[t] * scale;
            }
        }

        ModelGrads grads = zero_grads(client.model);
        encoder_backward(client.model.encoders[0], caches[k], d_mu, d_sigma, &grads.encoders[0]);
        adam_update(&client.model, &client.adam, grads, cfg.lr * run->lr_scale);

        const ViewCandidate cand = view_m_step_from_marginals(
            client.bank, hyper, latents[k], rx.gamma_marg[k], rx.blend_marg[k], class_present);
        blend_view_components(&client.bank, hyper, cand, class_present, run->step,
                              derive_seed(round_prior_seed, static_cast<std::uint64_t>(k)));
        for (int c = 0; c < run->num_classes; ++c) {
            for (int m = 0; m < cfg.mixture_components; ++m) {
                client.bank[c].weights[m] = rx.marginal_alpha[k](c, m);
            }
        }

        ClientAck ack;
        ack.view = k;
        ack.bank_digest = bank_digest(client.bank);
        const auto ack_frame = serialize_message(RoundMessage(ack));
        log.bytes += ack_frame.size();
        log.digests.emplace_back("ack_v" + std::to_string(k), digest_of(ack_frame));
    }

    run->step += 1;
    run->logs.push_back(log);
    return log;
}

Models assemble_models(const DistributedRun& run) {
    Models models;
    for (const auto& client : run.clients) models.encoders.push_back(client.model.encoders[0]);
    models.decoder = run.server.model.decoder;
    return models;
}

ProductMixturePrior assemble_prior(const DistributedRun& run) {
    ProductMixturePrior prior = run.server.joint;
    for (int c = 0; c < run.num_classes; ++c) {
        for (std::size_t k = 0; k < run.clients.size(); ++k) {
            prior.views[c][k] = run.clients[k].bank[c];
        }
    }
    return prior;
}

void dump_round_logs(const std::vector<RoundLog>& logs, const std::string& bin_path,
                     const std::string& index_path) {
    Writer w;
    w.u32(static_cast<std::uint32_t>(logs.size()));
    for (const auto& log : logs) {
        w.u32(static_cast<std::uint32_t>(log.round));
        w.u64(log.bytes);
        w.f64(log.reg_value);
        w.f64(log.ce);
        w.u32(static_cast<std::uint32_t>(log.digests.size()));
        for (const auto& [tag, digest] : log.digests) {
            w.u32(static_cast<std::uint32_t>(tag.size()));
            for (char ch : tag) w.u8(static_cast<std::uint8_t>(ch));
            w.u64(digest);
        }
    }
    std::ofstream bin(bin_path, std::ios::binary);
    if (!bin) throw std::runtime_error("cannot write " + bin_path);
    bin.write(reinterpret_cast<const char*>(w.bytes.data()),
              static_cast<std::streamsize>(w.bytes.size()));

    nlohmann::json j;
    j["format"] = "mvmdl.round_log";
    j["version"] = 1;
    j["bin_file"] = bin_path;
    j["rounds"] = logs.size();
    std::uint64_t total = 0;
    for (const auto& log : logs) total += log.bytes;
    j["total_bytes"] = total;
    std::ofstream side(index_path);
    if (!side) throw std::runtime_error("cannot write " + index_path);
    side << j.dump(2) << "\n";
}

std::vector<RoundLog> load_round_logs(const std::string& index_path) {
    std::ifstream side(index_path);
    if (!side) throw std::runtime_error("cannot read " + index_path);
    nlohmann::json j;
    side >> j;
    if (j.at("format").get<std::string>() != "mvmdl.round_log") {
        throw std::runtime_error("load_round_logs: unexpected format tag");
    }
    std::ifstream bin(j.at("bin_file").get<std::string>(), std::ios::binary);
    if (!bin) throw std::runtime_error("load_round_logs: cannot read data file");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(bin)),
                                    std::istreambuf_iterator<char>());
    Reader r(bytes);
    const std::uint32_t count = r.u32();
    std::vector<RoundLog> logs(count);
    for (auto& log : logs) {
        log.round = static_cast<int>(r.u32());
        log.bytes = r.u64();
        log.reg_value = r.f64();
        log.ce = r.f64();
        const std::uint32_t nd = r.u32();
        for (std::uint32_t t = 0; t < nd; ++t) {
            const std::uint32_t len = r.u32();
            std::string tag;
            for (std::uint32_t i = 0; i < len; ++i) tag.push_back(static_cast<char>(r.u8()));
            log.digests.emplace_back(tag, r.u64());
        }
    }
    return logs;
}

}  // namespace mvmdl
