#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "advlab/common.hpp"
#include "advlab/rng.hpp"
#include "advlab/tensor.hpp"

namespace advlab {

// In-memory labeled image set; images are [N,3,H,W] in [0,1].
struct Dataset {
    Tensor<float> images;
    std::vector<int> labels;
    int classes = 0;

    int count() const { return images.numel() == 0 ? 0 : images.dim(0); }
    int image_size() const { return images.dim(2); }

    Tensor<float> image(int i) const {
        const int c = images.dim(1), h = images.dim(2), w = images.dim(3);
        const int64_t n = static_cast<int64_t>(c) * h * w;
        std::vector<float> out(static_cast<size_t>(n));
        std::copy(images.data() + i * n, images.data() + (i + 1) * n, out.begin());
        return Tensor<float>({c, h, w}, std::move(out));
    }

    // Gathers rows into a batch tensor [B,3,H,W].
    Tensor<float> gather(const std::vector<int>& idx) const {
        const int c = images.dim(1), h = images.dim(2), w = images.dim(3);
        const int64_t n = static_cast<int64_t>(c) * h * w;
        Tensor<float> out({static_cast<int>(idx.size()), c, h, w});
        for (size_t b = 0; b < idx.size(); ++b)
            std::copy(images.data() + idx[b] * n, images.data() + (idx[b] + 1) * n,
                      out.data() + static_cast<int64_t>(b) * n);
        return out;
    }
};

struct TrainTestSplit {
    Dataset train;
    Dataset test;
};

// Seeded blob classes: each class owns a spatial center and a color
// signature; images are a low-contrast bump at a jittered center over a gray
// background plus dense pixel noise. Contrast and noise are chosen so a small
// network separates the classes cleanly while leaving narrow margins for
// gradient attacks to exploit.
struct SyntheticConfig {
    int classes = 4;
    int train_count = 384;
    int test_count = 192;
    int image_size = 32;
    double blob_amp = 0.22;
    double blob_sigma = 4.0;
    double center_jitter = 3.0;
    double noise_sigma = 0.14;

    bool operator==(const SyntheticConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const SyntheticConfig& c) {
    j = {{"classes", c.classes},       {"train_count", c.train_count},
         {"test_count", c.test_count}, {"image_size", c.image_size},
         {"blob_amp", c.blob_amp},     {"blob_sigma", c.blob_sigma},
         {"center_jitter", c.center_jitter}, {"noise_sigma", c.noise_sigma}};
}

namespace detail {

inline Dataset synthetic_split(const SyntheticConfig& cfg, int count, uint64_t seed) {
    const int s = cfg.image_size;
    Dataset ds;
    ds.classes = cfg.classes;
    ds.images = Tensor<float>({count, 3, s, s});
    ds.labels.resize(static_cast<size_t>(count));

    // class color signatures on the RGB simplex, centers on a ring
    const double cx0 = (s - 1) / 2.0, cy0 = (s - 1) / 2.0;
    const double ring = s * 0.28;
    Rng rng(mix_seed({seed, 0x5b10b5ull}));
    for (int i = 0; i < count; ++i) {
        const int k = i % cfg.classes;
        ds.labels[static_cast<size_t>(i)] = k;
        const double ang = 6.283185307179586 * k / cfg.classes;
        const double cx = cx0 + ring * std::cos(ang) + cfg.center_jitter * (2 * rng.uniform() - 1);
        const double cy = cy0 + ring * std::sin(ang) + cfg.center_jitter * (2 * rng.uniform() - 1);
        double color[3] = {std::cos(ang), std::sin(ang), std::cos(2 * ang)};

        float* img = ds.images.data() + static_cast<int64_t>(i) * 3 * s * s;
        for (int ch = 0; ch < 3; ++ch) {
            for (int y = 0; y < s; ++y) {
                for (int x = 0; x < s; ++x) {
                    const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                    const double bump = std::exp(-d2 / (2.0 * cfg.blob_sigma * cfg.blob_sigma));
                    double v = 0.5 + cfg.blob_amp * color[ch] * bump +
                               cfg.noise_sigma * rng.normal();
                    img[(static_cast<int64_t>(ch) * s + y) * s + x] =
                        static_cast<float>(std::clamp(v, 0.0, 1.0));
                }
            }
        }
    }
    return ds;
}

}  // namespace detail

inline TrainTestSplit make_synthetic(const SyntheticConfig& cfg, uint64_t seed) {
    if (cfg.classes < 2 || cfg.train_count < cfg.classes || cfg.test_count < 1)
        throw ConfigError("synthetic dataset: need >=2 classes and enough samples");
    TrainTestSplit split;
    split.train = detail::synthetic_split(cfg, cfg.train_count, mix_seed({seed, 1}));
    split.test = detail::synthetic_split(cfg, cfg.test_count, mix_seed({seed, 2}));
    return split;
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format: records of 3073 bytes, 1 label byte followed by
// 3072 channel-major pixel bytes.
// ---------------------------------------------------------------------------

inline Dataset load_cifar10_files(const std::vector<std::filesystem::path>& files, int max_count) {
    constexpr int kRecord = 3073;
    std::vector<uint8_t> raw;
    for (const auto& f : files) {
        std::ifstream in(f, std::ios::binary);
        if (!in) throw DataError(detail::cat("cifar10: cannot open ", f.string()));
        std::vector<uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
        if (buf.empty() || buf.size() % kRecord != 0)
            throw DataError(detail::cat("cifar10: ", f.string(), " is not a multiple of 3073 bytes"));
        raw.insert(raw.end(), buf.begin(), buf.end());
        if (max_count > 0 && raw.size() >= static_cast<size_t>(max_count) * kRecord) break;
    }
    int n = static_cast<int>(raw.size()) / kRecord;
    if (max_count > 0) n = std::min(n, max_count);
    if (n == 0) throw DataError("cifar10: no records found");

    Dataset ds;
    ds.classes = 10;
    ds.images = Tensor<float>({n, 3, 32, 32});
    ds.labels.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const uint8_t* rec = raw.data() + static_cast<size_t>(i) * kRecord;
        if (rec[0] > 9) throw DataError(detail::cat("cifar10: bad label ", int(rec[0])));
        ds.labels[static_cast<size_t>(i)] = rec[0];
        float* img = ds.images.data() + static_cast<int64_t>(i) * 3072;
        for (int j = 0; j < 3072; ++j) img[j] = static_cast<float>(rec[1 + j]) / 255.0f;
    }
    return ds;
}

inline TrainTestSplit load_cifar10(const std::filesystem::path& dir, int train_count,
                                   int test_count) {
    if (!std::filesystem::is_directory(dir))
        throw DataError(detail::cat("cifar10: ", dir.string(), " is not a directory"));
    std::vector<std::filesystem::path> train_files;
    for (int b = 1; b <= 5; ++b) {
        auto f = dir / ("data_batch_" + std::to_string(b) + ".bin");
        if (std::filesystem::exists(f)) train_files.push_back(f);
    }
    if (train_files.empty())
        throw DataError(detail::cat("cifar10: no data_batch_*.bin under ", dir.string()));
    TrainTestSplit split;
    split.train = load_cifar10_files(train_files, train_count);
    auto tf = dir / "test_batch.bin";
    if (!std::filesystem::exists(tf))
        throw DataError(detail::cat("cifar10: missing ", tf.string()));
    split.test = load_cifar10_files({tf}, test_count);
    return split;
}

}  // namespace advlab
