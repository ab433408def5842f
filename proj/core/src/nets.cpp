#include "mvmdl/nets.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "mvmdl/logsumexp.hpp"

namespace mvmdl {

namespace {

DenseLayer make_layer(int in, int out, Rng& rng) {
    DenseLayer layer;
    layer.W = Mat(out, in);
    layer.b.assign(out, 0.0);
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    for (auto& w : layer.W.data) w = rng.uniform(-bound, bound);
    return layer;
}

// out = x * W^T + b, rows are samples.
Mat affine(const Mat& W, const std::vector<double>& bias, const Mat& x) {
    const std::size_t b = x.rows;
    const std::size_t in = W.cols;
    const std::size_t out = W.rows;
    if (x.cols != in) throw std::invalid_argument("affine: input width mismatch");
    Mat y(b, out);
    for (std::size_t i = 0; i < b; ++i) {
        const double* xi = x.row(i);
        double* yi = y.row(i);
        for (std::size_t o = 0; o < out; ++o) {
            const double* w = W.row(o);
            double acc = bias[o];
            for (std::size_t j = 0; j < in; ++j) acc += w[j] * xi[j];
            yi[o] = acc;
        }
    }
    return y;
}

}  // namespace

EncoderMLP make_encoder(int input_dim, const std::vector<int>& hidden, int latent_dim,
                        Rng& rng, double leaky_slope) {
    if (input_dim < 1 || latent_dim < 1) throw std::invalid_argument("make_encoder: bad dims");
    EncoderMLP enc;
    enc.input_dim = input_dim;
    enc.latent_dim = latent_dim;
    enc.leaky_slope = leaky_slope;
    int in = input_dim;
    for (int h : hidden) {
        enc.layers.push_back(make_layer(in, h, rng));
        in = h;
    }
    enc.layers.push_back(make_layer(in, 2 * latent_dim, rng));
    return enc;
}

DecoderLinear make_decoder(int input_dim, int num_classes, Rng& rng) {
    DecoderLinear dec;
    const DenseLayer layer = make_layer(input_dim, num_classes, rng);
    dec.W = layer.W;
    dec.b = layer.b;
    return dec;
}

EncoderCache encode_batch(const EncoderMLP& enc, const Mat& x) {
    if (x.cols != static_cast<std::size_t>(enc.input_dim)) {
        throw std::invalid_argument("encode_batch: input width mismatch");
    }
    const std::size_t b = x.rows;
    const std::size_t d = static_cast<std::size_t>(enc.latent_dim);
    EncoderCache cache;
    cache.act.push_back(x);
    for (std::size_t l = 0; l < enc.layers.size(); ++l) {
        Mat z = affine(enc.layers[l].W, enc.layers[l].b, cache.act.back());
        cache.pre.push_back(z);
        if (l + 1 < enc.layers.size()) {
            Mat a = std::move(z);
            for (auto& v : a.data) {
                if (v < 0.0) v *= enc.leaky_slope;
            }
            cache.act.push_back(std::move(a));
        }
    }
    const Mat& head = cache.pre.back();
    cache.mu = Mat(b, d);
    cache.sigma = Mat(b, d);
    cache.floored.assign(b * d, 0);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            cache.mu(i, j) = head(i, j);
            double var = std::exp(head(i, d + j));
            if (!(var >= kVarFloor)) {
                var = kVarFloor;
                cache.floored[i * d + j] = 1;
            }
            cache.sigma(i, j) = std::sqrt(var);
        }
    }
    return cache;
}

DiagGaussian encode(const EncoderMLP& enc, const std::vector<double>& x) {
    Mat xm(1, x.size());
    std::copy(x.begin(), x.end(), xm.data.begin());
    const EncoderCache cache = encode_batch(enc, xm);
    const std::size_t d = static_cast<std::size_t>(enc.latent_dim);
    std::vector<double> mu(d), var(d);
    for (std::size_t j = 0; j < d; ++j) {
        mu[j] = cache.mu(0, j);
        var[j] = cache.sigma(0, j) * cache.sigma(0, j);
    }
    return DiagGaussian(std::move(mu), std::move(var));
}

LatentDraws sample_latent(const Mat& mu, const Mat& sigma, int n_samples, std::uint64_t seed) {
    if (n_samples < 1) throw std::invalid_argument("sample_latent: n_samples must be >= 1");
    LatentDraws draws;
    Rng rng(seed);
    for (int s = 0; s < n_samples; ++s) {
        Mat xi(mu.rows, mu.cols);
        Mat u(mu.rows, mu.cols);
        for (std::size_t t = 0; t < mu.data.size(); ++t) {
            xi.data[t] = rng.normal();
            u.data[t] = mu.data[t] + sigma.data[t] * xi.data[t];
        }
        draws.xi.push_back(std::move(xi));
        draws.u.push_back(std::move(u));
    }
    return draws;
}

Mat decode_probs(const DecoderLinear& dec, const Mat& u) {
    Mat logits = affine(dec.W, dec.b, u);
    for (std::size_t i = 0; i < logits.rows; ++i) {
        double* row = logits.row(i);
        const double lse = log_sum_exp(row, logits.cols);
        for (std::size_t c = 0; c < logits.cols; ++c) row[c] = std::exp(row[c] - lse);
    }
    return logits;
}

ModelGrads zero_grads(const Models& models) {
    ModelGrads g;
    g.encoders = models.encoders;
    for (auto& enc : g.encoders) {
        for (auto& layer : enc.layers) {
            std::fill(layer.W.data.begin(), layer.W.data.end(), 0.0);
            std::fill(layer.b.begin(), layer.b.end(), 0.0);
        }
    }
    g.decoder = models.decoder;
    std::fill(g.decoder.W.data.begin(), g.decoder.W.data.end(), 0.0);
    std::fill(g.decoder.b.begin(), g.decoder.b.end(), 0.0);
    return g;
}

CeBackward ce_backward(const DecoderLinear& dec, const std::vector<LatentDraws>& draws,
                       const std::vector<int>& labels) {
    const int K = static_cast<int>(draws.size());
    const std::size_t b = labels.size();
    const std::size_t d = draws[0].u[0].cols;
    const std::size_t C = dec.b.size();
    const int S = static_cast<int>(draws[0].u.size());
    const double inv_bs = 1.0 / (static_cast<double>(b) * static_cast<double>(S));

    CeBackward out;
    out.dec_W = Mat(dec.W.rows, dec.W.cols);
    out.dec_b.assign(C, 0.0);
    out.d_mu.assign(K, Mat(b, d));
    out.d_sigma.assign(K, Mat(b, d));

    Mat u(b, static_cast<std::size_t>(K) * d);
    for (int s = 0; s < S; ++s) {
        for (int k = 0; k < K; ++k) {
            for (std::size_t i = 0; i < b; ++i) {
                std::copy(draws[k].u[s].row(i), draws[k].u[s].row(i) + d,
                          u.row(i) + static_cast<std::size_t>(k) * d);
            }
        }
        const Mat probs = decode_probs(dec, u);
        Mat dlogits(b, C);
        for (std::size_t i = 0; i < b; ++i) {
            const double py = std::max(probs(i, labels[i]), 1e-300);
            out.ce += -std::log(py) * inv_bs;
            for (std::size_t c = 0; c < C; ++c) {
                dlogits(i, c) =
                    (probs(i, c) - (static_cast<int>(c) == labels[i] ? 1.0 : 0.0)) * inv_bs;
            }
        }
        for (std::size_t i = 0; i < b; ++i) {
            const double* ui = u.row(i);
            for (std::size_t c = 0; c < C; ++c) {
                const double g = dlogits(i, c);
                out.dec_b[c] += g;
                double* wrow = out.dec_W.row(c);
                for (std::size_t j = 0; j < u.cols; ++j) wrow[j] += g * ui[j];
            }
        }
        for (int k = 0; k < K; ++k) {
            const std::size_t off = static_cast<std::size_t>(k) * d;
            for (std::size_t i = 0; i < b; ++i) {
                for (std::size_t j = 0; j < d; ++j) {
                    double du = 0.0;
                    for (std::size_t c = 0; c < C; ++c) {
                        du += dlogits(i, c) * dec.W(c, off + j);
                    }
                    out.d_mu[k](i, j) += du;
                    out.d_sigma[k](i, j) += du * draws[k].xi[s](i, j);
                }
            }
        }
    }
    return out;
}

void encoder_backward(const EncoderMLP& enc, const EncoderCache& cache, const Mat& d_mu,
                      const Mat& d_sigma, EncoderMLP* grads) {
    const std::size_t b = d_mu.rows;
    const std::size_t d = d_mu.cols;
    Mat dz(b, 2 * d);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            dz(i, j) = d_mu(i, j);
            // sigma = exp(logvar/2); no gradient where the floor clipped.
            const bool floored = cache.floored[i * d + j] != 0;
            dz(i, d + j) = floored ? 0.0 : d_sigma(i, j) * 0.5 * cache.sigma(i, j);
        }
    }
    for (int l = static_cast<int>(enc.layers.size()) - 1; l >= 0; --l) {
        const DenseLayer& layer = enc.layers[l];
        DenseLayer& glayer = grads->layers[l];
        const Mat& input = cache.act[l];
        for (std::size_t i = 0; i < b; ++i) {
            const double* xi = input.row(i);
            const double* gz = dz.row(i);
            for (std::size_t o = 0; o < layer.W.rows; ++o) {
                if (gz[o] == 0.0) continue;
                glayer.b[o] += gz[o];
                double* wrow = glayer.W.row(o);
                for (std::size_t j = 0; j < layer.W.cols; ++j) wrow[j] += gz[o] * xi[j];
            }
        }
        if (l == 0) break;
        Mat dprev(b, layer.W.cols);
        for (std::size_t i = 0; i < b; ++i) {
            const double* gz = dz.row(i);
            double* gp = dprev.row(i);
            for (std::size_t o = 0; o < layer.W.rows; ++o) {
                if (gz[o] == 0.0) continue;
                const double* wrow = layer.W.row(o);
                for (std::size_t j = 0; j < layer.W.cols; ++j) gp[j] += gz[o] * wrow[j];
            }
        }
        const Mat& pre = cache.pre[l - 1];
        for (std::size_t t = 0; t < dprev.data.size(); ++t) {
            if (pre.data[t] < 0.0) dprev.data[t] *= enc.leaky_slope;
        }
        dz = std::move(dprev);
    }
}

double backward_batch(const Models& models, const std::vector<EncoderCache>& caches,
                      const std::vector<LatentDraws>& draws, const std::vector<int>& labels,
                      const std::vector<const Mat*>& d_mu_extra,
                      const std::vector<const Mat*>& d_sigma_extra, ModelGrads* grads) {
    const int K = models.num_views();
    const std::size_t b = labels.size();
    const std::size_t d = static_cast<std::size_t>(models.latent_dim());

    CeBackward ce = ce_backward(models.decoder, draws, labels);
    for (std::size_t t = 0; t < grads->decoder.W.data.size(); ++t) {
        grads->decoder.W.data[t] += ce.dec_W.data[t];
    }
    for (std::size_t c = 0; c < grads->decoder.b.size(); ++c) {
        grads->decoder.b[c] += ce.dec_b[c];
    }
    for (int k = 0; k < K; ++k) {
        if (k < static_cast<int>(d_mu_extra.size()) && d_mu_extra[k] != nullptr) {
            for (std::size_t t = 0; t < b * d; ++t) ce.d_mu[k].data[t] += d_mu_extra[k]->data[t];
        }
        if (k < static_cast<int>(d_sigma_extra.size()) && d_sigma_extra[k] != nullptr) {
            for (std::size_t t = 0; t < b * d; ++t) {
                ce.d_sigma[k].data[t] += d_sigma_extra[k]->data[t];
            }
        }
        encoder_backward(models.encoders[k], caches[k], ce.d_mu[k], ce.d_sigma[k],
                         &grads->encoders[k]);
    }
    return ce.ce;
}

AdamState make_adam(const Models& models) {
    AdamState s;
    s.m = zero_grads(models);
    s.v = zero_grads(models);
    return s;
}

namespace {

void adam_tensor(std::vector<double>& w, std::vector<double>& m, std::vector<double>& v,
                 const std::vector<double>& g, double lr, double b1, double b2, double eps,
                 double bc1, double bc2) {
    for (std::size_t t = 0; t < w.size(); ++t) {
        m[t] = b1 * m[t] + (1.0 - b1) * g[t];
        v[t] = b2 * v[t] + (1.0 - b2) * g[t] * g[t];
        w[t] -= lr * (m[t] / bc1) / (std::sqrt(v[t] / bc2) + eps);
    }
}

}  // namespace

void adam_update(Models* models, AdamState* state, const ModelGrads& grads, double lr) {
    state->step += 1;
    const double bc1 = 1.0 - std::pow(state->beta1, static_cast<double>(state->step));
    const double bc2 = 1.0 - std::pow(state->beta2, static_cast<double>(state->step));
    adam_tensor(models->decoder.W.data, state->m.decoder.W.data, state->v.decoder.W.data,
                grads.decoder.W.data, lr, state->beta1, state->beta2, state->eps, bc1, bc2);
    adam_tensor(models->decoder.b, state->m.decoder.b, state->v.decoder.b, grads.decoder.b, lr,
                state->beta1, state->beta2, state->eps, bc1, bc2);
    for (std::size_t k = 0; k < models->encoders.size(); ++k) {
        for (std::size_t l = 0; l < models->encoders[k].layers.size(); ++l) {
            adam_tensor(models->encoders[k].layers[l].W.data,
                        state->m.encoders[k].layers[l].W.data,
                        state->v.encoders[k].layers[l].W.data,
                        grads.encoders[k].layers[l].W.data, lr, state->beta1, state->beta2,
                        state->eps, bc1, bc2);
            adam_tensor(models->encoders[k].layers[l].b, state->m.encoders[k].layers[l].b,
                        state->v.encoders[k].layers[l].b, grads.encoders[k].layers[l].b, lr,
                        state->beta1, state->beta2, state->eps, bc1, bc2);
        }
    }
}

void for_each_param(Models* models, ModelGrads* grads,
                    const std::function<void(double&, double&)>& fn) {
    for (std::size_t k = 0; k < models->encoders.size(); ++k) {
        for (std::size_t l = 0; l < models->encoders[k].layers.size(); ++l) {
            auto& W = models->encoders[k].layers[l].W.data;
            auto& gW = grads->encoders[k].layers[l].W.data;
            for (std::size_t t = 0; t < W.size(); ++t) fn(W[t], gW[t]);
            auto& bb = models->encoders[k].layers[l].b;
            auto& gb = grads->encoders[k].layers[l].b;
            for (std::size_t t = 0; t < bb.size(); ++t) fn(bb[t], gb[t]);
        }
    }
    auto& W = models->decoder.W.data;
    auto& gW = grads->decoder.W.data;
    for (std::size_t t = 0; t < W.size(); ++t) fn(W[t], gW[t]);
    for (std::size_t t = 0; t < models->decoder.b.size(); ++t) {
        fn(models->decoder.b[t], grads->decoder.b[t]);
    }
}

namespace {

void write_le_doubles(std::ofstream& out, const std::vector<double>& xs) {
    for (double x : xs) {
        std::uint64_t bits;
        std::memcpy(&bits, &x, 8);
        unsigned char buf[8];
        for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
        out.write(reinterpret_cast<const char*>(buf), 8);
    }
}

void read_le_doubles(std::ifstream& in, std::vector<double>& xs) {
    for (double& x : xs) {
        unsigned char buf[8];
        in.read(reinterpret_cast<char*>(buf), 8);
        if (!in) throw std::runtime_error("model weights file truncated");
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
        std::memcpy(&x, &bits, 8);
    }
}

}  // namespace

void save_models(const Models& models, const std::string& json_path,
                 const std::string& weights_path) {
    nlohmann::json j;
    j["format"] = "mvmdl.models";
    j["version"] = 1;
    j["dtype"] = "f64";
    j["byte_order"] = "little";
    j["weights_file"] = weights_path;
    nlohmann::json encoders = nlohmann::json::array();
    for (const auto& enc : models.encoders) {
        nlohmann::json e;
        e["input_dim"] = enc.input_dim;
        e["latent_dim"] = enc.latent_dim;
        e["leaky_slope"] = enc.leaky_slope;
        nlohmann::json layers = nlohmann::json::array();
        for (const auto& layer : enc.layers) {
            layers.push_back({{"out", layer.W.rows}, {"in", layer.W.cols}});
        }
        e["layers"] = layers;
        encoders.push_back(e);
    }
    j["encoders"] = encoders;
    j["decoder"] = {{"out", models.decoder.W.rows}, {"in", models.decoder.W.cols}};

    std::ofstream jf(json_path);
    if (!jf) throw std::runtime_error("cannot write " + json_path);
    jf << j.dump(2) << "\n";

    std::ofstream wf(weights_path, std::ios::binary);
    if (!wf) throw std::runtime_error("cannot write " + weights_path);
    for (const auto& enc : models.encoders) {
        for (const auto& layer : enc.layers) {
            write_le_doubles(wf, layer.W.data);
            write_le_doubles(wf, layer.b);
        }
    }
    write_le_doubles(wf, models.decoder.W.data);
    write_le_doubles(wf, models.decoder.b);
}

Models load_models(const std::string& json_path) {
    std::ifstream jf(json_path);
    if (!jf) throw std::runtime_error("cannot read " + json_path);
    nlohmann::json j;
    jf >> j;
    if (j.at("format").get<std::string>() != "mvmdl.models") {
        throw std::runtime_error("load_models: unexpected format tag");
    }
    Models models;
    for (const auto& e : j.at("encoders")) {
        EncoderMLP enc;
        enc.input_dim = e.at("input_dim").get<int>();
        enc.latent_dim = e.at("latent_dim").get<int>();
        enc.leaky_slope = e.at("leaky_slope").get<double>();
        for (const auto& l : e.at("layers")) {
            DenseLayer layer;
            layer.W = Mat(l.at("out").get<std::size_t>(), l.at("in").get<std::size_t>());
            layer.b.assign(l.at("out").get<std::size_t>(), 0.0);
            enc.layers.push_back(std::move(layer));
        }
        models.encoders.push_back(std::move(enc));
    }
    models.decoder.W = Mat(j.at("decoder").at("out").get<std::size_t>(),
                           j.at("decoder").at("in").get<std::size_t>());
    models.decoder.b.assign(j.at("decoder").at("out").get<std::size_t>(), 0.0);

    std::ifstream wf(j.at("weights_file").get<std::string>(), std::ios::binary);
    if (!wf) throw std::runtime_error("cannot read weights file");
    for (auto& enc : models.encoders) {
        for (auto& layer : enc.layers) {
            read_le_doubles(wf, layer.W.data);
            read_le_doubles(wf, layer.b);
        }
    }
    read_le_doubles(wf, models.decoder.W.data);
    read_le_doubles(wf, models.decoder.b);
    return models;
}

}  // namespace mvmdl
