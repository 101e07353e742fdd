#pragma once

#include <cmath>
#include <json.hpp>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "advlab/ops.hpp"
#include "advlab/rng.hpp"
#include "advlab/serialize.hpp"
#include "advlab/tensor.hpp"

namespace advlab {

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>*>>;

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

template <typename T>
struct Conv2d {
    Tensor<T> w;  // [F,C,kh,kw]
    Tensor<T> b;  // [F] when biased
    int stride = 1, pad = 0;
    bool biased = false;

    Conv2d() = default;
    Conv2d(int in, int out, int k, int stride_, int pad_, bool biased_, Rng& rng)
        : stride(stride_), pad(pad_), biased(biased_) {
        const T std = static_cast<T>(std::sqrt(2.0 / (in * k * k)));
        w = Tensor<T>::randn({out, in, k, k}, rng, std);
        if (biased) b = Tensor<T>({out});
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        auto y = conv2d(x, w, stride, pad);
        return biased ? add_channel_bias(y, b) : y;
    }

    void params(NamedParams<T>& out, const std::string& prefix) {
        out.emplace_back(prefix + ".w", &w);
        if (biased) out.emplace_back(prefix + ".b", &b);
    }
};

template <typename T>
struct ConvTranspose2d {
    Tensor<T> w;  // [C,F,kh,kw]
    int stride = 1, pad = 0;

    ConvTranspose2d() = default;
    ConvTranspose2d(int in, int out, int k, int stride_, int pad_, Rng& rng)
        : stride(stride_), pad(pad_) {
        const T std = static_cast<T>(std::sqrt(2.0 / (in * k * k)));
        w = Tensor<T>::randn({in, out, k, k}, rng, std);
    }

    Tensor<T> forward(const Tensor<T>& x) const { return conv_transpose2d(x, w, stride, pad); }

    void params(NamedParams<T>& out, const std::string& prefix) {
        out.emplace_back(prefix + ".w", &w);
    }
};

template <typename T>
struct BatchNorm2d {
    Tensor<T> gamma, beta;
    BnStats<T> stats;

    BatchNorm2d() = default;
    explicit BatchNorm2d(int channels)
        : gamma(Tensor<T>::full({channels}, T(1))),
          beta(Tensor<T>({channels})),
          stats{std::vector<T>(static_cast<size_t>(channels), T(0)),
                std::vector<T>(static_cast<size_t>(channels), T(1))} {}

    Tensor<T> forward(const Tensor<T>& x, BnMode mode, bool update_running) {
        return batchnorm2d(x, gamma, beta, stats, mode, update_running);
    }

    void params(NamedParams<T>& out, const std::string& prefix) {
        out.emplace_back(prefix + ".gamma", &gamma);
        out.emplace_back(prefix + ".beta", &beta);
    }
};

template <typename T>
struct Linear {
    Tensor<T> w;  // [Din,Dout]
    Tensor<T> b;  // [Dout]

    Linear() = default;
    Linear(int in, int out, Rng& rng, bool zero_init = false) {
        if (zero_init) {
            w = Tensor<T>({in, out});
        } else {
            const T std = static_cast<T>(std::sqrt(2.0 / (in + out)));
            w = Tensor<T>::randn({in, out}, rng, std);
        }
        b = Tensor<T>({out});
    }

    Tensor<T> forward(const Tensor<T>& x) const { return linear(x, w, b); }

    void params(NamedParams<T>& out, const std::string& prefix) {
        out.emplace_back(prefix + ".w", &w);
        out.emplace_back(prefix + ".b", &b);
    }
};

template <typename T>
struct LayerNorm {
    Tensor<T> gamma, beta;

    LayerNorm() = default;
    explicit LayerNorm(int d) : gamma(Tensor<T>::full({d}, T(1))), beta(Tensor<T>({d})) {}

    Tensor<T> forward(const Tensor<T>& x) const { return layernorm_last(x, gamma, beta); }

    void params(NamedParams<T>& out, const std::string& prefix) {
        out.emplace_back(prefix + ".gamma", &gamma);
        out.emplace_back(prefix + ".beta", &beta);
    }
};

// Pre-norm self-attention block: layernorm -> multi-head scaled dot-product
// attention -> residual, then layernorm -> 2-layer MLP -> residual. With the
// output projection and the MLP output layer zero-initialized the block is
// the identity map.
template <typename T>
struct AttentionBlock {
    LayerNorm<T> ln1, ln2;
    Linear<T> wq, wk, wv, wo, fc1, fc2;
    int heads = 1;

    AttentionBlock() = default;
    AttentionBlock(int dim, int heads_, int mlp_hidden, Rng& rng) : heads(heads_) {
        if (dim % heads_ != 0)
            throw ConfigError(detail::cat("attention: dim ", dim, " not divisible by ", heads_, " heads"));
        ln1 = LayerNorm<T>(dim);
        ln2 = LayerNorm<T>(dim);
        wq = Linear<T>(dim, dim, rng);
        wk = Linear<T>(dim, dim, rng);
        wv = Linear<T>(dim, dim, rng);
        wo = Linear<T>(dim, dim, rng, /*zero_init=*/true);
        fc1 = Linear<T>(dim, mlp_hidden, rng);
        fc2 = Linear<T>(mlp_hidden, dim, rng, /*zero_init=*/true);
    }

    Tensor<T> forward(const Tensor<T>& tokens) const {
        if (tokens.ndim() != 3) throw ShapeError("attention: expected tokens [N,T,D]");
        const int n = tokens.dim(0), tk = tokens.dim(1), d = tokens.dim(2);
        if (d % heads != 0) throw ShapeError("attention: token dim not divisible by heads");
        const int dh = d / heads;

        auto u = ln1.forward(tokens);
        auto split = [&](const Tensor<T>& m) {
            // [N,T,D] -> [N*H, T, dh]
            auto r = reshape(m, {n, tk, heads, dh});
            auto p = permute(r, {0, 2, 1, 3});
            return reshape(p, {n * heads, tk, dh});
        };
        auto q = split(wq.forward(u));
        auto k = split(wk.forward(u));
        auto v = split(wv.forward(u));

        auto scores = smul(bmm(q, k, /*transpose_b=*/true),
                           static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
        auto attn = softmax_last(scores);
        auto ctx = bmm(attn, v);  // [N*H, T, dh]
        auto merged = reshape(permute(reshape(ctx, {n, heads, tk, dh}), {0, 2, 1, 3}), {n, tk, d});
        auto x1 = add(tokens, wo.forward(merged));

        auto h = relu(fc1.forward(ln2.forward(x1)));
        return add(x1, fc2.forward(h));
    }

    void params(NamedParams<T>& out, const std::string& prefix) {
        ln1.params(out, prefix + ".ln1");
        wq.params(out, prefix + ".wq");
        wk.params(out, prefix + ".wk");
        wv.params(out, prefix + ".wv");
        wo.params(out, prefix + ".wo");
        ln2.params(out, prefix + ".ln2");
        fc1.params(out, prefix + ".fc1");
        fc2.params(out, prefix + ".fc2");
    }
};

// ---------------------------------------------------------------------------
// backbone
// ---------------------------------------------------------------------------

struct BackboneConfig {
    int in_channels = 3;
    int image_size = 32;
    std::vector<int> stage_widths = {16, 32, 64};
    int blocks_per_stage = 2;
    int classes = 10;
    std::vector<int> tap_stages = {0, 1, 2};  // shallow -> deep

    bool operator==(const BackboneConfig&) const = default;

    void validate() const {
        if (stage_widths.size() < 2)
            throw ConfigError("backbone: need at least 2 stages so low/full tap sets differ");
        if (blocks_per_stage < 1 || classes < 2 || in_channels < 1)
            throw ConfigError("backbone: bad block/class/channel counts");
        const int stages = static_cast<int>(stage_widths.size());
        if (image_size % (1 << (stages - 1)) != 0)
            throw ConfigError("backbone: image size must halve exactly at each stage transition");
        if (tap_stages.empty()) throw ConfigError("backbone: need at least one tap stage");
        for (size_t i = 0; i < tap_stages.size(); ++i) {
            if (tap_stages[i] < 0 || tap_stages[i] >= stages)
                throw ConfigError("backbone: tap stage out of range");
            if (i > 0 && tap_stages[i] <= tap_stages[i - 1])
                throw ConfigError("backbone: tap stages must be strictly increasing");
        }
    }

    // spatial extent of a stage output
    int stage_extent(int stage) const { return image_size >> stage; }

    // [channels, extent] per tap, shallow to deep
    std::vector<std::pair<int, int>> tap_shapes() const {
        std::vector<std::pair<int, int>> out;
        for (int s : tap_stages) out.emplace_back(stage_widths[static_cast<size_t>(s)], stage_extent(s));
        return out;
    }
};

inline void to_json(nlohmann::json& j, const BackboneConfig& c) {
    j = {{"in_channels", c.in_channels}, {"image_size", c.image_size},
         {"stage_widths", c.stage_widths}, {"blocks_per_stage", c.blocks_per_stage},
         {"classes", c.classes},         {"tap_stages", c.tap_stages}};
}

inline void from_json(const nlohmann::json& j, BackboneConfig& c) {
    c.in_channels = j.value("in_channels", 3);
    c.image_size = j.value("image_size", 32);
    c.stage_widths = j.value("stage_widths", std::vector<int>{16, 32, 64});
    c.blocks_per_stage = j.value("blocks_per_stage", 2);
    c.classes = j.value("classes", 10);
    c.tap_stages = j.value("tap_stages", std::vector<int>{});
    if (c.tap_stages.empty())
        for (size_t s = 0; s < c.stage_widths.size(); ++s) c.tap_stages.push_back(static_cast<int>(s));
}

template <typename T>
struct BackboneOutput {
    Tensor<T> logits;                    // [N,K]
    std::vector<Tensor<T>> feature_maps; // one per tap stage, shallow -> deep
};

// Pre-activation residual block. Stage transitions (stride 2) project the
// skip path with a 2x2 stride-2 conv so spatial extents halve exactly.
template <typename T>
struct ResidualBlock {
    BatchNorm2d<T> bn1, bn2;
    Conv2d<T> conv1, conv2;
    Conv2d<T> proj;
    bool has_proj = false;

    ResidualBlock() = default;
    ResidualBlock(int in, int out, int stride, Rng& rng) {
        bn1 = BatchNorm2d<T>(in);
        conv1 = stride == 1 ? Conv2d<T>(in, out, 3, 1, 1, false, rng)
                            : Conv2d<T>(in, out, 2, 2, 0, false, rng);
        bn2 = BatchNorm2d<T>(out);
        conv2 = Conv2d<T>(out, out, 3, 1, 1, false, rng);
        has_proj = stride != 1 || in != out;
        if (has_proj)
            proj = stride == 1 ? Conv2d<T>(in, out, 1, 1, 0, false, rng)
                               : Conv2d<T>(in, out, 2, 2, 0, false, rng);
    }

    Tensor<T> forward(const Tensor<T>& x, BnMode mode, bool update_running) {
        auto h = relu(bn1.forward(x, mode, update_running));
        auto y = conv1.forward(h);
        y = conv2.forward(relu(bn2.forward(y, mode, update_running)));
        auto skip = has_proj ? proj.forward(h) : x;
        return add(y, skip);
    }

    void params(NamedParams<T>& out, const std::string& prefix) {
        bn1.params(out, prefix + ".bn1");
        conv1.params(out, prefix + ".conv1");
        bn2.params(out, prefix + ".bn2");
        conv2.params(out, prefix + ".conv2");
        if (has_proj) proj.params(out, prefix + ".proj");
    }

    void bn_layers(std::vector<BatchNorm2d<T>*>& out) {
        out.push_back(&bn1);
        out.push_back(&bn2);
    }
};

template <typename T>
class ResidualBackbone {
public:
    ResidualBackbone() = default;

    ResidualBackbone(BackboneConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(mix_seed({seed, 0xbacc}));
        stem_ = Conv2d<T>(cfg_.in_channels, cfg_.stage_widths[0], 3, 1, 1, false, rng);
        int in = cfg_.stage_widths[0];
        for (size_t s = 0; s < cfg_.stage_widths.size(); ++s) {
            const int out = cfg_.stage_widths[s];
            std::vector<ResidualBlock<T>> blocks;
            for (int b = 0; b < cfg_.blocks_per_stage; ++b) {
                const int stride = (s > 0 && b == 0) ? 2 : 1;
                blocks.emplace_back(in, out, stride, rng);
                in = out;
            }
            stages_.push_back(std::move(blocks));
        }
        bn_final_ = BatchNorm2d<T>(in);
        head_ = Linear<T>(in, cfg_.classes, rng, /*zero_init=*/true);
    }

    const BackboneConfig& config() const { return cfg_; }

    BackboneOutput<T> forward(const Tensor<T>& x, BnMode mode, bool update_running = true) {
        if (x.ndim() != 4 || x.dim(1) != cfg_.in_channels || x.dim(2) != cfg_.image_size ||
            x.dim(3) != cfg_.image_size)
            throw ShapeError(detail::cat("backbone: input ", shape_str(x.shape()),
                                         " does not match config (", cfg_.in_channels, "x",
                                         cfg_.image_size, "x", cfg_.image_size, ")"));
        const bool upd = mode == BnMode::train && update_running;
        BackboneOutput<T> out;
        auto h = stem_.forward(x);
        std::vector<Tensor<T>> stage_out;
        for (auto& stage : stages_) {
            for (auto& block : stage) h = block.forward(h, mode, upd);
            stage_out.push_back(h);
        }
        for (int s : cfg_.tap_stages) out.feature_maps.push_back(stage_out[static_cast<size_t>(s)]);

        auto f = relu(bn_final_.forward(h, mode, upd));
        // global average pool: [N,C,H,W] -> [N,C]
        const int n = f.dim(0), c = f.dim(1);
        const int hw = f.dim(2) * f.dim(3);
        auto pooled = mean_tokens(permute(reshape(f, {n, c, hw}), {0, 2, 1}));
        out.logits = head_.forward(pooled);
        return out;
    }

    NamedParams<T> params() {
        NamedParams<T> out;
        stem_.params(out, "stem");
        for (size_t s = 0; s < stages_.size(); ++s)
            for (size_t b = 0; b < stages_[s].size(); ++b)
                stages_[s][b].params(out, detail::cat("stage", s, ".block", b));
        bn_final_.params(out, "bn_final");
        head_.params(out, "head");
        return out;
    }

    // batchnorm running statistics, ordered to match construction
    std::vector<BatchNorm2d<T>*> bn_layers() {
        std::vector<BatchNorm2d<T>*> out;
        for (auto& stage : stages_)
            for (auto& block : stage) block.bn_layers(out);
        out.push_back(&bn_final_);
        return out;
    }

    void set_requires_grad(bool v) {
        for (auto& [name, t] : params()) t->requires_grad = v;
    }

private:
    BackboneConfig cfg_;
    Conv2d<T> stem_;
    std::vector<std::vector<ResidualBlock<T>>> stages_;
    BatchNorm2d<T> bn_final_;
    Linear<T> head_;
};

// ---------------------------------------------------------------------------
// detector: feature embedding + shallow transformer
// ---------------------------------------------------------------------------

enum class InputType { low, full };

inline std::string to_string(InputType t) { return t == InputType::low ? "low" : "full"; }
inline InputType input_type_from_string(const std::string& s) {
    if (s == "low") return InputType::low;
    if (s == "full") return InputType::full;
    throw ConfigError(detail::cat("bad input type '", s, "' (expected low|full)"));
}

struct DetectorConfig {
    InputType input_type = InputType::full;
    int sa_layers = 2;
    int token_dim = 32;
    int heads = 4;
    int embed_channels = 16;
    int anchor_index = -1;  // index into the supplied tap list; -1 = auto
    int tap_index = -1;     // SA layer whose output is exported; -1 = auto
    int mlp_hidden = -1;    // -1 = 4 * token_dim

    bool operator==(const DetectorConfig&) const = default;

    int resolved_anchor(int n_maps) const {
        if (anchor_index >= 0) {
            if (anchor_index >= n_maps) throw ConfigError("detector: anchor index out of range");
            return anchor_index;
        }
        // fuse around the second-shallowest map when several are present
        return n_maps > 1 ? 1 : 0;
    }

    int resolved_tap() const {
        const int t = tap_index >= 0 ? tap_index : (sa_layers >= 2 ? sa_layers - 2 : 0);
        if (t >= sa_layers) throw ConfigError("detector: tap layer index must be < sa_layers");
        return t;
    }

    int resolved_mlp_hidden() const { return mlp_hidden > 0 ? mlp_hidden : 4 * token_dim; }

    void validate() const {
        if (sa_layers < 1) throw ConfigError("detector: sa_layers must be >= 1");
        if (token_dim < 1 || heads < 1 || token_dim % heads != 0)
            throw ConfigError("detector: token dim must be a positive multiple of heads");
        if (embed_channels < 1) throw ConfigError("detector: embed channels must be positive");
        resolved_tap();
    }
};

inline void to_json(nlohmann::json& j, const DetectorConfig& c) {
    j = {{"input_type", to_string(c.input_type)},
         {"sa_layers", c.sa_layers},
         {"token_dim", c.token_dim},
         {"heads", c.heads},
         {"embed_channels", c.embed_channels},
         {"anchor_index", c.anchor_index},
         {"tap_index", c.tap_index},
         {"mlp_hidden", c.mlp_hidden}};
}

inline void from_json(const nlohmann::json& j, DetectorConfig& c) {
    c.input_type = input_type_from_string(j.value("input_type", std::string("full")));
    c.sa_layers = j.value("sa_layers", 2);
    c.token_dim = j.value("token_dim", 32);
    c.heads = j.value("heads", 4);
    c.embed_channels = j.value("embed_channels", 16);
    c.anchor_index = j.value("anchor_index", -1);
    c.tap_index = j.value("tap_index", -1);
    c.mlp_hidden = j.value("mlp_hidden", -1);
}

// Selects the tap subset the detector consumes: the shallowest map for Low,
// all maps for Full.
inline std::vector<std::pair<int, int>> detector_input_shapes(
    const BackboneConfig& bb, const DetectorConfig& det) {
    auto taps = bb.tap_shapes();
    if (det.input_type == InputType::low) return {taps.front()};
    return taps;
}

template <typename T>
std::vector<Tensor<T>> select_detector_maps(const std::vector<Tensor<T>>& maps,
                                            const DetectorConfig& det) {
    if (maps.empty()) throw ShapeError("detector: no feature maps supplied");
    if (det.input_type == InputType::low) return {maps.front()};
    return maps;
}

// Resamples every feature map to the anchor's spatial size with stride-2
// conv/deconv chains, projects to a common channel count, concatenates along
// channels, and flattens each spatial position into one token.
template <typename T>
class FeatureEmbedder {
public:
    FeatureEmbedder() = default;

    FeatureEmbedder(const std::vector<std::pair<int, int>>& map_shapes, const DetectorConfig& cfg,
                    uint64_t seed)
        : cfg_(cfg), map_shapes_(map_shapes) {
        cfg_.validate();
        Rng rng(mix_seed({seed, 0xe3bedull}));
        const int n_maps = static_cast<int>(map_shapes.size());
        anchor_ = cfg_.resolved_anchor(n_maps);
        const int target = map_shapes[static_cast<size_t>(anchor_)].second;
        const int e = cfg_.embed_channels;

        for (const auto& [ch, extent] : map_shapes) {
            Chain chain;
            if (extent == target) {
                chain.convs.emplace_back(ch, e, 1, 1, 0, true, rng);
            } else if (extent > target) {
                int cur = extent, in = ch;
                while (cur > target) {
                    if (cur % 2 != 0)
                        throw ConfigError(detail::cat("embed: extent ", extent,
                                                      " not reachable from anchor ", target,
                                                      " by stride-2 steps"));
                    chain.convs.emplace_back(in, e, 2, 2, 0, true, rng);
                    in = e;
                    cur /= 2;
                }
                if (cur != target) throw ConfigError("embed: resample chain does not land on anchor");
            } else {
                int cur = extent, in = ch;
                chain.up = true;
                while (cur < target) {
                    chain.deconvs.emplace_back(in, e, 2, 2, 0, rng);
                    in = e;
                    cur *= 2;
                }
                if (cur != target) throw ConfigError("embed: resample chain does not land on anchor");
            }
            chains_.push_back(std::move(chain));
        }

        token_count_ = target * target;
        const int fused = e * n_maps;
        has_proj_ = fused != cfg_.token_dim;
        if (has_proj_) proj_ = Linear<T>(fused, cfg_.token_dim, rng);
        pos_ = Tensor<T>::randn({token_count_, cfg_.token_dim}, rng, T(0.02));
    }

    int token_count() const { return token_count_; }
    int anchor() const { return anchor_; }
    const DetectorConfig& config() const { return cfg_; }

    // maps (already selected for the input type) -> tokens [N,T,D]
    Tensor<T> forward(const std::vector<Tensor<T>>& maps) const {
        if (maps.size() != chains_.size())
            throw ShapeError(detail::cat("embed: got ", maps.size(), " maps, expected ",
                                         chains_.size()));
        std::vector<Tensor<T>> resampled;
        for (size_t i = 0; i < maps.size(); ++i) {
            Tensor<T> h = maps[i];
            if (chains_[i].up)
                for (const auto& d : chains_[i].deconvs) h = d.forward(h);
            else
                for (const auto& c : chains_[i].convs) h = c.forward(h);
            resampled.push_back(std::move(h));
        }
        auto fused = resampled.size() == 1 ? resampled[0] : concat(resampled, 1);
        const int n = fused.dim(0), c = fused.dim(1);
        const int hw = fused.dim(2) * fused.dim(3);
        auto tokens = permute(reshape(fused, {n, c, hw}), {0, 2, 1});  // [N,T,C]
        if (has_proj_) tokens = proj_.forward(tokens);
        return add_broadcast0(tokens, pos_);
    }

    NamedParams<T> params() {
        NamedParams<T> out;
        for (size_t i = 0; i < chains_.size(); ++i) {
            auto& ch = chains_[i];
            for (size_t j = 0; j < ch.convs.size(); ++j)
                ch.convs[j].params(out, detail::cat("embed.map", i, ".conv", j));
            for (size_t j = 0; j < ch.deconvs.size(); ++j)
                ch.deconvs[j].params(out, detail::cat("embed.map", i, ".deconv", j));
        }
        if (has_proj_) proj_.params(out, "embed.proj");
        out.emplace_back("embed.pos", &pos_);
        return out;
    }

private:
    struct Chain {
        bool up = false;
        std::vector<Conv2d<T>> convs;
        std::vector<ConvTranspose2d<T>> deconvs;
    };

    DetectorConfig cfg_;
    std::vector<std::pair<int, int>> map_shapes_;
    std::vector<Chain> chains_;
    bool has_proj_ = false;
    Linear<T> proj_;
    Tensor<T> pos_;
    int token_count_ = 0;
    int anchor_ = 0;
};

template <typename T>
struct DetectorOutput {
    Tensor<T> detect_logits;  // [N,2]
    Tensor<T> tap;            // [N,T,D], output of the configured SA layer
};

// Shallow transformer head performing adversarial-sample detection.
template <typename T>
class Detector {
public:
    Detector() = default;

    Detector(const DetectorConfig& cfg, uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(mix_seed({seed, 0xde7ec7ull}));
        for (int i = 0; i < cfg_.sa_layers; ++i)
            blocks_.emplace_back(cfg_.token_dim, cfg_.heads, cfg_.resolved_mlp_hidden(), rng);
        head_ = Linear<T>(cfg_.token_dim, 2, rng, /*zero_init=*/true);
        tap_ = cfg_.resolved_tap();
    }

    const DetectorConfig& config() const { return cfg_; }
    int tap_layer() const { return tap_; }

    DetectorOutput<T> forward(const Tensor<T>& tokens) const {
        if (tokens.ndim() != 3 || tokens.dim(2) != cfg_.token_dim)
            throw ShapeError(detail::cat("detector: tokens ", shape_str(tokens.shape()),
                                         " do not match token dim ", cfg_.token_dim));
        DetectorOutput<T> out;
        Tensor<T> h = tokens;
        for (size_t i = 0; i < blocks_.size(); ++i) {
            h = blocks_[i].forward(h);
            if (static_cast<int>(i) == tap_) out.tap = h;
        }
        out.detect_logits = head_.forward(mean_tokens(h));
        return out;
    }

    NamedParams<T> params() {
        NamedParams<T> out;
        for (size_t i = 0; i < blocks_.size(); ++i)
            blocks_[i].params(out, detail::cat("det.block", i));
        head_.params(out, "det.head");
        return out;
    }

private:
    DetectorConfig cfg_;
    std::vector<AttentionBlock<T>> blocks_;
    Linear<T> head_;
    int tap_ = 0;
};

// Shared embedding + detector, as one unit for parameter handling. Both the
// pretrained path and the target path run through the same instance.
template <typename T>
struct DetectorStack {
    FeatureEmbedder<T> embed;
    Detector<T> det;

    DetectorStack() = default;
    DetectorStack(const BackboneConfig& bb, const DetectorConfig& cfg, uint64_t seed)
        : embed(detector_input_shapes(bb, cfg), cfg, mix_seed({seed, 1})),
          det(cfg, mix_seed({seed, 2})) {}

    DetectorOutput<T> forward(const std::vector<Tensor<T>>& all_maps) const {
        return det.forward(embed.forward(select_detector_maps(all_maps, det.config())));
    }

    NamedParams<T> params() {
        NamedParams<T> out = embed.params();
        auto dp = det.params();
        out.insert(out.end(), dp.begin(), dp.end());
        return out;
    }

    void set_requires_grad(bool v) {
        for (auto& [name, t] : params()) t->requires_grad = v;
    }
};

// ---------------------------------------------------------------------------
// checkpoint helpers. A checkpoint stores the config as JSON plus every
// parameter and batchnorm buffer as an ADVT tensor; loading into a different
// config is an error, never a silent reshape.
// ---------------------------------------------------------------------------

namespace detail {

inline void gather_bn_buffers(std::vector<BatchNorm2d<float>*> layers,
                              std::vector<std::pair<std::string, Tensor<float>>>& store,
                              std::vector<std::pair<std::string, const Tensor<float>*>>& refs) {
    store.reserve(store.size() + layers.size() * 2);
    for (size_t i = 0; i < layers.size(); ++i) {
        const int c = static_cast<int>(layers[i]->stats.mean.size());
        store.emplace_back(cat("bn", i, ".running_mean"), Tensor<float>({c}, layers[i]->stats.mean));
        store.emplace_back(cat("bn", i, ".running_var"), Tensor<float>({c}, layers[i]->stats.var));
    }
    for (auto& [name, t] : store) refs.emplace_back(name, &t);
}

inline void restore_named(const CheckpointPayload& payload, NamedParams<float> params,
                          std::vector<BatchNorm2d<float>*> bns, const std::string& what) {
    std::map<std::string, const Tensor<float>*> stored;
    for (const auto& [name, t] : payload.tensors) stored[name] = &t;
    auto take = [&](const std::string& name, Tensor<float>* dst) {
        auto it = stored.find(name);
        if (it == stored.end())
            throw DataError(cat(what, ": checkpoint is missing tensor '", name, "'"));
        if (it->second->shape() != dst->shape())
            throw DataError(cat(what, ": tensor '", name, "' has shape ",
                                shape_str(it->second->shape()), ", expected ",
                                shape_str(dst->shape())));
        dst->vec() = it->second->vec();
        stored.erase(it);
    };
    for (auto& [name, t] : params) take(name, t);
    for (size_t i = 0; i < bns.size(); ++i) {
        const int c = static_cast<int>(bns[i]->stats.mean.size());
        Tensor<float> m({c}), v({c});
        take(cat("bn", i, ".running_mean"), &m);
        take(cat("bn", i, ".running_var"), &v);
        bns[i]->stats.mean = m.vec();
        bns[i]->stats.var = v.vec();
    }
    if (!stored.empty())
        throw DataError(cat(what, ": checkpoint has ", stored.size(),
                            " unexpected tensors (first: '", stored.begin()->first, "')"));
}

}  // namespace detail

inline void save_backbone(const std::filesystem::path& path, ResidualBackbone<float>& net,
                          nlohmann::json extra = nlohmann::json::object()) {
    nlohmann::json header = std::move(extra);
    header["kind"] = "backbone";
    header["backbone"] = net.config();
    std::vector<std::pair<std::string, const Tensor<float>*>> refs;
    for (auto& [name, t] : net.params()) refs.emplace_back(name, t);
    std::vector<std::pair<std::string, Tensor<float>>> store;
    detail::gather_bn_buffers(net.bn_layers(), store, refs);
    save_checkpoint(path, header, refs);
}

struct LoadedBackbone {
    ResidualBackbone<float> net;
    nlohmann::json header;
};

inline LoadedBackbone load_backbone(const std::filesystem::path& path) {
    auto payload = load_checkpoint(path);
    if (payload.header.value("kind", "") != "backbone")
        throw DataError(detail::cat("checkpoint ", path.string(), " is not a backbone checkpoint"));
    BackboneConfig cfg;
    try {
        cfg = payload.header.at("backbone").get<BackboneConfig>();
        cfg.validate();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(detail::cat("checkpoint ", path.string(), ": bad config: ", e.what()));
    }
    LoadedBackbone out{ResidualBackbone<float>(cfg, 0), std::move(payload.header)};
    detail::restore_named(payload, out.net.params(), out.net.bn_layers(), path.string());
    return out;
}

inline LoadedBackbone load_backbone_expect(const std::filesystem::path& path,
                                           const BackboneConfig& expected) {
    auto loaded = load_backbone(path);
    if (!(loaded.net.config() == expected))
        throw DataError(detail::cat("checkpoint ", path.string(),
                                    " config does not match the requested backbone config"));
    return loaded;
}

}  // namespace advlab
