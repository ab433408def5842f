#include "mvmdl/synth.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "mvmdl/rng.hpp"

namespace mvmdl {

namespace {

constexpr std::uint64_t kGhostTag = 0x67686f7374ull;   // per-split stream tag
constexpr std::uint64_t kClassTag = 0x636c6173ull;

}  // namespace

DistortionLevel distortion_level(const std::string& name) {
    DistortionLevel level;
    level.name = name;
    if (name == "Light") {
        level.erase_rate = 0.05;
        level.rotation_deg = 5.0;
        level.gain_lo = 0.9;
        level.gain_hi = 1.1;
        level.shift_frac = 0.0;
    } else if (name == "Medium") {
        level.erase_rate = 0.10;
        level.rotation_deg = 7.5;
        level.gain_lo = 0.8;
        level.gain_hi = 1.2;
        level.shift_frac = 0.0;
    } else if (name == "Heavy") {
        level.erase_rate = 0.20;
        level.rotation_deg = 10.0;
        level.gain_lo = 0.6;
        level.gain_hi = 1.4;
        level.shift_frac = 0.20;
    } else if (name == "Ultimate") {
        level.erase_rate = 0.40;
        level.rotation_deg = 20.0;
        level.gain_lo = 0.5;
        level.gain_hi = 1.5;
        level.shift_frac = 0.40;
    } else {
        throw std::invalid_argument("unknown distortion level '" + name + "'");
    }
    return level;
}

Occlusion parse_occlusion(const std::string& name) {
    if (name == "none") return Occlusion::none;
    if (name == "left") return Occlusion::left;
    if (name == "right") return Occlusion::right;
    if (name == "upper") return Occlusion::upper;
    if (name == "bottom") return Occlusion::bottom;
    if (name == "quad_ul") return Occlusion::quad_ul;
    if (name == "quad_ur") return Occlusion::quad_ur;
    if (name == "quad_ll") return Occlusion::quad_ll;
    if (name == "quad_lr") return Occlusion::quad_lr;
    throw std::invalid_argument("unknown occlusion '" + name + "'");
}

void MultiViewDataset::validate() const {
    if (views.empty()) throw std::invalid_argument("MultiViewDataset: no views");
    for (const auto& v : views) {
        if (v.rows != labels.size() || v.cols != views[0].cols) {
            throw std::invalid_argument("MultiViewDataset: inconsistent shapes");
        }
    }
    for (int y : labels) {
        if (y < 0 || y >= num_classes) {
            throw std::invalid_argument("MultiViewDataset: label out of range");
        }
    }
}

std::vector<std::uint8_t> occlusion_mask(Occlusion kind, std::size_t D) {
    std::vector<std::uint8_t> keep(D, 1);
    if (kind == Occlusion::none) return keep;
    const std::size_t rows = std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(static_cast<double>(D))));
    const std::size_t cols = (D + rows - 1) / rows;
    // Halves keep 55% of their axis: complementary pairs overlap by 10%.
    const auto axis_hi = [](std::size_t n) { return (n * 55 + 99) / 100; };  // ceil(0.55 n)
    const auto axis_lo = [](std::size_t n) { return (n * 45) / 100; };       // floor(0.45 n)
    std::fill(keep.begin(), keep.end(), 0);
    for (std::size_t t = 0; t < D; ++t) {
        const std::size_t r = t / cols;
        const std::size_t c = t % cols;
        bool in = false;
        switch (kind) {
            case Occlusion::left: in = c < axis_hi(cols); break;
            case Occlusion::right: in = c >= axis_lo(cols); break;
            case Occlusion::upper: in = r < axis_hi(rows); break;
            case Occlusion::bottom: in = r >= axis_lo(rows); break;
            case Occlusion::quad_ul: in = c < axis_hi(cols) && r < axis_hi(rows); break;
            case Occlusion::quad_ur: in = c >= axis_lo(cols) && r < axis_hi(rows); break;
            case Occlusion::quad_ll: in = c < axis_hi(cols) && r >= axis_lo(rows); break;
            case Occlusion::quad_lr: in = c >= axis_lo(cols) && r >= axis_lo(rows); break;
            case Occlusion::none: in = true; break;
        }
        keep[t] = in ? 1 : 0;
    }
    return keep;
}

namespace {

MultiViewDataset generate_split(std::int64_t n, int num_classes, int D, int K,
                                const std::vector<ViewSpec>& specs,
                                const std::vector<std::vector<double>>& class_means,
                                const std::vector<std::vector<std::uint8_t>>& masks,
                                std::uint64_t split_seed) {
    MultiViewDataset data;
    data.num_classes = num_classes;
    data.labels.resize(n);
    data.views.assign(K, Mat(n, D));

    std::vector<double> base(D), x(D), shifted(D);
    for (std::int64_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(split_seed, static_cast<std::uint64_t>(i)));
        const int c = static_cast<int>(rng.below(num_classes));
        data.labels[i] = c;
        for (int j = 0; j < D; ++j) base[j] = class_means[c][j] + rng.normal();

        for (int k = 0; k < K; ++k) {
            std::copy(base.begin(), base.end(), x.begin());
            if (specs[k].level.has_value()) {
                const DistortionLevel& level = *specs[k].level;
                // gain
                const double gain = rng.uniform(level.gain_lo, level.gain_hi);
                for (double& v : x) v *= gain;
                // additive noise scaled like a small rotation
                double norm = 0.0;
                for (double v : x) norm += v * v;
                norm = std::sqrt(norm);
                const double noise_scale =
                    (level.rotation_deg / 5.0) * 0.1 * norm / std::sqrt(static_cast<double>(D));
                for (double& v : x) v += noise_scale * rng.normal();
                // circular coordinate shift
                const int max_shift = static_cast<int>(level.shift_frac * D);
                if (max_shift > 0) {
                    const int shift =
                        static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * max_shift + 1))) -
                        max_shift;
                    for (int j = 0; j < D; ++j) {
                        shifted[(j + shift + 2 * D) % D] = x[j];
                    }
                    std::copy(shifted.begin(), shifted.end(), x.begin());
                }
                // erasure
                for (double& v : x) {
                    if (rng.uniform() < level.erase_rate) v = 0.0;
                }
            }
            const auto& mask = masks[k];
            for (int j = 0; j < D; ++j) {
                data.views[k](i, j) = mask[j] ? x[j] : 0.0;
            }
        }
    }
    return data;
}

}  // namespace

GeneratedData generate(std::int64_t n, int num_classes, int D, int K,
                       const std::vector<ViewSpec>& view_specs, double separation,
                       std::uint64_t seed) {
    if (n < 1 || num_classes < 1 || D < 1 || K < 1) {
        throw std::invalid_argument("generate: sizes must be positive");
    }
    if (static_cast<int>(view_specs.size()) != K) {
        throw std::invalid_argument("generate: need one view spec per view");
    }
    if (!(separation > 0.0)) throw std::invalid_argument("generate: separation must be > 0");

    // Class centers: random directions scaled to pairwise distance ~separation.
    Rng class_rng(derive_seed(seed, kClassTag));
    std::vector<std::vector<double>> class_means(num_classes, std::vector<double>(D));
    for (int c = 0; c < num_classes; ++c) {
        double norm = 0.0;
        for (int j = 0; j < D; ++j) {
            class_means[c][j] = class_rng.normal();
            norm += class_means[c][j] * class_means[c][j];
        }
        norm = std::sqrt(norm);
        for (int j = 0; j < D; ++j) class_means[c][j] *= separation / norm;
    }

    std::vector<std::vector<std::uint8_t>> masks;
    for (const auto& spec : view_specs) masks.push_back(occlusion_mask(spec.occlusion, D));

    GeneratedData out;
    out.train = generate_split(n, num_classes, D, K, view_specs, class_means, masks, seed);
    out.ghost = generate_split(n, num_classes, D, K, view_specs, class_means, masks,
                               derive_seed(seed, kGhostTag));
    return out;
}

void save_csv(const MultiViewDataset& data, const std::string& path) {
    data.validate();
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "label";
    for (int k = 0; k < data.num_views(); ++k) {
        for (std::size_t j = 0; j < data.dim(); ++j) {
            out << ",v" << k << "_c" << j;
        }
    }
    out << "\n";
    out.precision(17);
    for (std::size_t i = 0; i < data.size(); ++i) {
        out << data.labels[i];
        for (int k = 0; k < data.num_views(); ++k) {
            for (std::size_t j = 0; j < data.dim(); ++j) {
                out << ',' << data.views[k](i, j);
            }
        }
        out << "\n";
    }
}

namespace {

double parse_double_strict(const std::string& tok, std::size_t line_no) {
    // std::from_chars for doubles is incomplete in some standard libraries;
    // strtod with a full-consumption check is equivalent here.
    if (tok.empty()) {
        throw std::runtime_error("csv: empty field at line " + std::to_string(line_no));
    }
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (end != tok.c_str() + tok.size()) {
        throw std::runtime_error("csv: bad numeric field '" + tok + "' at line " +
                                 std::to_string(line_no));
    }
    return v;
}

}  // namespace

MultiViewDataset load_csv(const std::string& path, const CsvSchema& schema) {
    if (schema.num_views < 1 || schema.dim < 1 || schema.num_classes < 1) {
        throw std::invalid_argument("load_csv: invalid schema");
    }
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);

    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("csv: missing header in " + path);
    {
        std::ostringstream want;
        want << "label";
        for (int k = 0; k < schema.num_views; ++k) {
            for (int j = 0; j < schema.dim; ++j) want << ",v" << k << "_c" << j;
        }
        if (line != want.str()) {
            throw std::runtime_error("csv: header does not match the declared schema");
        }
    }

    const std::size_t expected_fields =
        1 + static_cast<std::size_t>(schema.num_views) * static_cast<std::size_t>(schema.dim);
    std::vector<std::vector<double>> rows;
    std::vector<int> labels;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            const std::size_t comma = line.find(',', start);
            fields.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (fields.size() != expected_fields) {
            throw std::runtime_error("csv: wrong column count at line " + std::to_string(line_no));
        }
        int label = 0;
        const auto [p, ec] = std::from_chars(fields[0].data(), fields[0].data() + fields[0].size(), label);
        if (ec != std::errc() || p != fields[0].data() + fields[0].size()) {
            throw std::runtime_error("csv: bad label at line " + std::to_string(line_no));
        }
        if (label < 0 || label >= schema.num_classes) {
            throw std::runtime_error("csv: label out of range at line " + std::to_string(line_no));
        }
        labels.push_back(label);
        std::vector<double> row(expected_fields - 1);
        for (std::size_t t = 1; t < expected_fields; ++t) {
            row[t - 1] = parse_double_strict(fields[t], line_no);
        }
        rows.push_back(std::move(row));
    }

    MultiViewDataset data;
    data.num_classes = schema.num_classes;
    data.labels = std::move(labels);
    data.views.assign(schema.num_views, Mat(rows.size(), schema.dim));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (int k = 0; k < schema.num_views; ++k) {
            for (int j = 0; j < schema.dim; ++j) {
                data.views[k](i, j) = rows[i][static_cast<std::size_t>(k) * schema.dim + j];
            }
        }
    }
    data.validate();
    return data;
}

void save_binary(const MultiViewDataset& data, const std::string& bin_path,
                 const std::string& sidecar_path, std::uint64_t seed) {
    data.validate();
    std::ofstream bin(bin_path, std::ios::binary);
    if (!bin) throw std::runtime_error("cannot write " + bin_path);
    auto write_doubles = [&](const std::vector<double>& xs) {
        for (double x : xs) {
            std::uint64_t bits;
            std::memcpy(&bits, &x, 8);
            unsigned char buf[8];
            for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
            bin.write(reinterpret_cast<const char*>(buf), 8);
        }
    };
    for (const auto& view : data.views) write_doubles(view.data);

    nlohmann::json j;
    j["format"] = "mvmdl.dataset";
    j["version"] = 1;
    j["bin_file"] = bin_path;
    j["byte_order"] = "little";
    j["dtype"] = "f64";
    j["num_views"] = data.num_views();
    j["num_classes"] = data.num_classes;
    j["n"] = data.size();
    j["dim"] = data.dim();
    j["seed"] = seed;
    j["labels"] = data.labels;
    std::ofstream side(sidecar_path);
    if (!side) throw std::runtime_error("cannot write " + sidecar_path);
    side << j.dump(2) << "\n";
}

MultiViewDataset load_binary(const std::string& sidecar_path) {
    std::ifstream side(sidecar_path);
    if (!side) throw std::runtime_error("cannot read " + sidecar_path);
    nlohmann::json j;
    side >> j;
    if (j.at("format").get<std::string>() != "mvmdl.dataset") {
        throw std::runtime_error("load_binary: unexpected format tag");
    }
    MultiViewDataset data;
    data.num_classes = j.at("num_classes").get<int>();
    data.labels = j.at("labels").get<std::vector<int>>();
    const int K = j.at("num_views").get<int>();
    const std::size_t n = j.at("n").get<std::size_t>();
    const std::size_t D = j.at("dim").get<std::size_t>();
    std::ifstream bin(j.at("bin_file").get<std::string>(), std::ios::binary);
    if (!bin) throw std::runtime_error("load_binary: cannot read data file");
    data.views.assign(K, Mat(n, D));
    for (auto& view : data.views) {
        for (double& x : view.data) {
            unsigned char buf[8];
            bin.read(reinterpret_cast<char*>(buf), 8);
            if (!bin) throw std::runtime_error("load_binary: data file truncated");
            std::uint64_t bits = 0;
            for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
            std::memcpy(&x, &bits, 8);
        }
    }
    data.validate();
    return data;
}

}  // namespace mvmdl
