#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "mvmdl/synth.hpp"

using namespace mvmdl;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("generation basics") {
    const int D = 32, C = 4;
    const auto gen = generate(200, C, D, 1, {ViewSpec{}}, 3.0, 17);
    gen.train.validate();
    gen.ghost.validate();
    CHECK(gen.train.size() == 200);
    CHECK(gen.ghost.size() == 200);
    // Determinism.
    const auto again = generate(200, C, D, 1, {ViewSpec{}}, 3.0, 17);
    CHECK(again.train.views[0].data == gen.train.views[0].data);
    CHECK(again.train.labels == gen.train.labels);
}

TEST_CASE("class frequencies are near uniform") {
    const int C = 4;
    const auto gen = generate(10000, C, 8, 1, {ViewSpec{}}, 3.0, 23);
    std::vector<int> counts(C, 0);
    for (int y : gen.train.labels) counts[y]++;
    const double expect = 10000.0 / C;
    const double sigma = std::sqrt(10000.0 * (1.0 / C) * (1.0 - 1.0 / C));
    for (int c = 0; c < C; ++c) {
        CHECK(std::abs(counts[c] - expect) <= 3.0 * sigma);
    }
}

TEST_CASE("light level erases about five percent of coordinates") {
    const int D = 32;
    ViewSpec spec;
    spec.level = distortion_level("Light");
    const auto gen = generate(10000, 2, D, 1, {spec}, 3.0, 31);
    // Erased coordinates are exactly zero; everything else carries noise and
    // is nonzero almost surely.
    std::int64_t zeros = 0;
    for (double v : gen.train.views[0].data) {
        if (v == 0.0) ++zeros;
    }
    const double trials = 10000.0 * D;
    const double expect = 0.05 * trials;
    const double sigma = std::sqrt(trials * 0.05 * 0.95);
    CHECK(std::abs(zeros - expect) <= 3.0 * sigma);
}

TEST_CASE("distortion levels are ordered and named") {
    const auto light = distortion_level("Light");
    const auto medium = distortion_level("Medium");
    const auto heavy = distortion_level("Heavy");
    const auto ultimate = distortion_level("Ultimate");
    CHECK(light.erase_rate < medium.erase_rate);
    CHECK(medium.erase_rate < heavy.erase_rate);
    CHECK(heavy.erase_rate < ultimate.erase_rate);
    CHECK(light.gain_hi - light.gain_lo < ultimate.gain_hi - ultimate.gain_lo);
    CHECK_THROWS_AS(distortion_level("Extreme"), std::invalid_argument);
}

TEST_CASE("cross-view noise is uncorrelated") {
    const int n = 10000, D = 16;
    // Noise-only distortion so the injected noise is x_view - base.
    DistortionLevel noise_only;
    noise_only.name = "noise";
    noise_only.rotation_deg = 10.0;
    ViewSpec spec;
    spec.level = noise_only;

    const auto base = generate(n, 2, D, 1, {ViewSpec{}}, 3.0, 47);
    const auto two = generate(n, 2, D, 2, {spec, spec}, 3.0, 47);
    REQUIRE(base.train.labels == two.train.labels);

    double sum1 = 0.0, sum2 = 0.0, sum11 = 0.0, sum22 = 0.0, sum12 = 0.0;
    const double total = static_cast<double>(n) * D;
    for (std::size_t t = 0; t < base.train.views[0].data.size(); ++t) {
        const double n1 = two.train.views[0].data[t] - base.train.views[0].data[t];
        const double n2 = two.train.views[1].data[t] - base.train.views[0].data[t];
        sum1 += n1;
        sum2 += n2;
        sum11 += n1 * n1;
        sum22 += n2 * n2;
        sum12 += n1 * n2;
    }
    const double cov = sum12 / total - (sum1 / total) * (sum2 / total);
    const double v1 = sum11 / total - (sum1 / total) * (sum1 / total);
    const double v2 = sum22 / total - (sum2 / total) * (sum2 / total);
    const double corr = cov / std::sqrt(v1 * v2);
    CHECK(std::abs(corr) < 0.02);
}

TEST_CASE("occlusion masks cover and overlap") {
    for (std::size_t D : {16u, 32u, 37u, 64u}) {
        const auto left = occlusion_mask(Occlusion::left, D);
        const auto right = occlusion_mask(Occlusion::right, D);
        const auto upper = occlusion_mask(Occlusion::upper, D);
        const auto bottom = occlusion_mask(Occlusion::bottom, D);
        auto coverage = [&](const std::vector<std::uint8_t>& mask) {
            std::size_t kept = 0;
            for (auto m : mask) kept += m;
            return static_cast<double>(kept) / static_cast<double>(D);
        };
        CHECK(coverage(left) >= 0.4);
        CHECK(coverage(right) >= 0.4);
        CHECK(coverage(upper) >= 0.4);
        CHECK(coverage(bottom) >= 0.4);
        std::size_t overlap = 0, covered = 0;
        for (std::size_t t = 0; t < D; ++t) {
            overlap += left[t] & right[t];
            covered += left[t] | right[t];
        }
        CHECK(covered == D);
        CHECK(static_cast<double>(overlap) / static_cast<double>(D) >= 0.10 - 1e-9);
        overlap = covered = 0;
        for (std::size_t t = 0; t < D; ++t) {
            overlap += upper[t] & bottom[t];
            covered += upper[t] | bottom[t];
        }
        CHECK(covered == D);
        CHECK(overlap > 0);
    }
}

TEST_CASE("csv round trip and strict errors") {
    const auto gen = generate(40, 3, 5, 2,
                              {ViewSpec{}, ViewSpec{Occlusion::left, std::nullopt}}, 3.0, 53);
    const auto dir = std::filesystem::temp_directory_path() / "mvmdl_synth_test";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "data.csv").string();
    save_csv(gen.train, path);
    const CsvSchema schema{2, 5, 3};
    const MultiViewDataset loaded = load_csv(path, schema);
    CHECK(loaded.labels == gen.train.labels);
    for (int k = 0; k < 2; ++k) {
        CHECK(loaded.views[k].data == gen.train.views[k].data);
    }

    // Wrong column count points at the first bad line.
    {
        std::ofstream out(path, std::ios::app);
        out << "1,0.5\n";
    }
    try {
        load_csv(path, schema);
        FAIL("expected a parse error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("line 42") != std::string::npos);
    }

    // Label out of range.
    save_csv(gen.train, path);
    CHECK_THROWS_AS(load_csv(path, CsvSchema{2, 5, 2}), std::runtime_error);
    std::filesystem::remove_all(dir);
}

TEST_CASE("binary dump is byte-identical across runs") {
    const auto gen = generate(30, 2, 4, 1, {ViewSpec{}}, 3.0, 59);
    const auto dir = std::filesystem::temp_directory_path() / "mvmdl_synth_bin";
    std::filesystem::create_directories(dir);
    const std::string bin_a = (dir / "a.bin").string();
    const std::string bin_b = (dir / "b.bin").string();
    save_binary(gen.train, bin_a, (dir / "a.json").string(), 59);
    save_binary(gen.train, bin_b, (dir / "b.json").string(), 59);
    CHECK(slurp(bin_a) == slurp(bin_b));
    const MultiViewDataset loaded = load_binary((dir / "a.json").string());
    CHECK(loaded.views[0].data == gen.train.views[0].data);
    CHECK(loaded.labels == gen.train.labels);
    std::filesystem::remove_all(dir);
}
