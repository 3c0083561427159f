#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "unwarp/autodiff.hpp"
#include "unwarp/flow.hpp"
#include "unwarp/image.hpp"
#include "unwarp/optim.hpp"

namespace unwarp {

enum class QueryMode { Learned, Fixed };
enum class UpsampleMode { Learned, Bilinear };

struct ModelConfig {
    int height = 288, width = 288;
    std::vector<int> backbone_channels{32, 64, 128};
    int cb = 256;
    int encoder_blocks = 3, encoder_layers_per_block = 2;
    int decoder_blocks = 3, decoder_layers_per_block = 2;
    int heads = 8;
    int ffn_width = 0;  // 0 -> 2*cb
    QueryMode query_mode = QueryMode::Learned;
    UpsampleMode upsample_mode = UpsampleMode::Learned;
    std::string pos_embedding = "sincos2d";
    bool re_add_pos_per_block = true;

    int ffn() const { return ffn_width > 0 ? ffn_width : 2 * cb; }

    void validate() const {
        require(height % 8 == 0 && width % 8 == 0, "ModelConfig: extents must be divisible by 8");
        require(height >= 8 && width >= 8, "ModelConfig: extents too small");
        require(cb % heads == 0, "ModelConfig: cb=" + std::to_string(cb) + " not divisible by heads=" +
                                     std::to_string(heads));
        require(cb % 4 == 0, "ModelConfig: cb must be divisible by 4 for the 2d position embedding");
        require(backbone_channels.size() == 3, "ModelConfig: backbone ladder must have 3 stages");
        require(encoder_blocks == 3 && decoder_blocks == 3, "ModelConfig: hierarchy is 3 blocks deep");
        require(encoder_layers_per_block == 2 && decoder_layers_per_block == 2,
                "ModelConfig: two layers per block");
        require(pos_embedding == "sincos2d", "ModelConfig: unknown positional embedding kind");
    }

    // pyramid extents: /8 exact, then conv-arithmetic halvings (ceil)
    std::array<std::array<int, 2>, 3> pyramid_extents() const {
        const int h8 = height / 8, w8 = width / 8;
        const int h16 = (h8 + 1) / 2, w16 = (w8 + 1) / 2;
        const int h32 = (h16 + 1) / 2, w32 = (w16 + 1) / 2;
        return {{{h8, w8}, {h16, w16}, {h32, w32}}};
    }

    static ModelConfig full() { return ModelConfig{}; }

    static ModelConfig toy(int h = 64, int w = 64, int cb_ = 64) {
        ModelConfig c;
        c.height = h;
        c.width = w;
        c.cb = cb_;
        c.backbone_channels = {std::max(8, cb_ / 4), std::max(8, cb_ / 2), cb_};
        c.heads = 4;
        return c;
    }

    nlohmann::json to_json() const {
        return {{"height", height},
                {"width", width},
                {"backbone_channels", backbone_channels},
                {"cb", cb},
                {"encoder_blocks", encoder_blocks},
                {"encoder_layers_per_block", encoder_layers_per_block},
                {"decoder_blocks", decoder_blocks},
                {"decoder_layers_per_block", decoder_layers_per_block},
                {"heads", heads},
                {"ffn_width", ffn_width},
                {"query_mode", query_mode == QueryMode::Learned ? "learned" : "fixed"},
                {"upsample_mode", upsample_mode == UpsampleMode::Learned ? "learned" : "bilinear"},
                {"pos_embedding", pos_embedding},
                {"re_add_pos_per_block", re_add_pos_per_block}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.height = j.at("height").get<int>();
        c.width = j.at("width").get<int>();
        c.backbone_channels = j.at("backbone_channels").get<std::vector<int>>();
        c.cb = j.at("cb").get<int>();
        c.encoder_blocks = j.at("encoder_blocks").get<int>();
        c.encoder_layers_per_block = j.at("encoder_layers_per_block").get<int>();
        c.decoder_blocks = j.at("decoder_blocks").get<int>();
        c.decoder_layers_per_block = j.at("decoder_layers_per_block").get<int>();
        c.heads = j.at("heads").get<int>();
        c.ffn_width = j.at("ffn_width").get<int>();
        c.query_mode = j.at("query_mode").get<std::string>() == "learned" ? QueryMode::Learned : QueryMode::Fixed;
        c.upsample_mode =
            j.at("upsample_mode").get<std::string>() == "learned" ? UpsampleMode::Learned : UpsampleMode::Bilinear;
        c.pos_embedding = j.at("pos_embedding").get<std::string>();
        c.re_add_pos_per_block = j.at("re_add_pos_per_block").get<bool>();
        return c;
    }
};

template <typename T>
using ParamStore = std::map<std::string, NdArray<T>>;

// Fixed 2d sin/cos embedding: first half of the channels encodes x, second
// half y; within each half, sin/cos interleave over a geometric frequency ladder.
template <typename T>
NdArray<T> positional_embedding(int h, int w, int c) {
    require(c % 4 == 0, "positional_embedding: channels must be divisible by 4, got " + std::to_string(c));
    const int quarter = c / 4;
    NdArray<T> pe(Shape{h, w, c});
    for (int i = 0; i < quarter; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / quarter);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const size_t base = (static_cast<size_t>(y) * w + x) * c;
                pe.data[base + 2 * i] = static_cast<T>(std::sin(x * freq));
                pe.data[base + 2 * i + 1] = static_cast<T>(std::cos(x * freq));
                pe.data[base + 2 * quarter + 2 * i] = static_cast<T>(std::sin(y * freq));
                pe.data[base + 2 * quarter + 2 * i + 1] = static_cast<T>(std::cos(y * freq));
            }
    }
    return pe;
}

namespace detail {

template <typename T>
NdArray<T> random_normal(Shape s, double std_dev, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, std_dev);
    NdArray<T> a(std::move(s));
    for (auto& v : a.data) v = static_cast<T>(dist(rng));
    return a;
}

}  // namespace detail

// Builds every parameter of the architecture, keyed by name. Per-tensor seeds
// derive from the name so initialization is independent of creation order.
template <typename T>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ParamStore<T> p;
    auto tseed = [seed](const std::string& name) { return derive_seed(seed, fnv1a(name.data(), name.size())); };
    auto conv = [&](const std::string& name, int kh, int kw, int cin, int cout, bool zero = false) {
        const double sd = zero ? 0.0 : std::sqrt(2.0 / (kh * kw * cin));
        p[name + ".w"] = detail::random_normal<T>(Shape{kh, kw, cin, cout}, sd, tseed(name + ".w"));
        p[name + ".b"] = NdArray<T>::zeros(Shape{cout});
    };
    auto linear = [&](const std::string& name, int cin, int cout) {
        p[name + ".w"] = detail::random_normal<T>(Shape{cin, cout}, std::sqrt(1.0 / cin), tseed(name + ".w"));
        p[name + ".b"] = NdArray<T>::zeros(Shape{cout});
    };
    auto lnorm = [&](const std::string& name, int c) {
        p[name + ".g"] = NdArray<T>::full(Shape{c}, T(1));
        p[name + ".b"] = NdArray<T>::zeros(Shape{c});
    };
    auto attention = [&](const std::string& name, int c) {
        linear(name + ".q", c, c);
        linear(name + ".k", c, c);
        linear(name + ".v", c, c);
        linear(name + ".o", c, c);
    };
    auto ffn_block = [&](const std::string& name, int c, int f) {
        linear(name + ".w1", c, f);
        linear(name + ".w2", f, c);
    };

    // backbone: three stages of (downsampling residual block, residual block)
    int cin = 3;
    for (int s = 0; s < 3; ++s) {
        const int cout = cfg.backbone_channels[static_cast<size_t>(s)];
        const std::string pre = "backbone.stage" + std::to_string(s);
        conv(pre + ".down.conv1", 3, 3, cin, cout);
        conv(pre + ".down.conv2", 3, 3, cout, cout);
        conv(pre + ".down.skip", 1, 1, cin, cout);
        conv(pre + ".res.conv1", 3, 3, cout, cout);
        conv(pre + ".res.conv2", 3, 3, cout, cout);
        cin = cout;
    }
    conv("backbone.proj", 1, 1, cin, cfg.cb);

    // encoder
    for (int b = 0; b < cfg.encoder_blocks; ++b) {
        for (int l = 0; l < cfg.encoder_layers_per_block; ++l) {
            const std::string pre = "enc.b" + std::to_string(b) + ".l" + std::to_string(l);
            attention(pre + ".attn", cfg.cb);
            lnorm(pre + ".ln1", cfg.cb);
            ffn_block(pre + ".ffn", cfg.cb, cfg.ffn());
            lnorm(pre + ".ln2", cfg.cb);
        }
        if (b + 1 < cfg.encoder_blocks) conv("enc.down" + std::to_string(b), 3, 3, cfg.cb, cfg.cb);
    }

    // decoder
    for (int b = 0; b < cfg.decoder_blocks; ++b)
        for (int l = 0; l < cfg.decoder_layers_per_block; ++l) {
            const std::string pre = "dec.b" + std::to_string(b) + ".l" + std::to_string(l);
            attention(pre + ".self", cfg.cb);
            lnorm(pre + ".ln1", cfg.cb);
            attention(pre + ".cross", cfg.cb);
            lnorm(pre + ".ln2", cfg.cb);
            ffn_block(pre + ".ffn", cfg.cb, cfg.ffn());
            lnorm(pre + ".ln3", cfg.cb);
        }
    if (cfg.query_mode == QueryMode::Learned) {
        const auto ext = cfg.pyramid_extents();
        p["dec.queries"] =
            detail::random_normal<T>(Shape{ext[2][0] * ext[2][1], cfg.cb}, 0.02, tseed("dec.queries"));
    }

    // flow head; the final coarse-flow conv starts at zero so the map starts
    // at the identity grid
    conv("head.a1", 3, 3, cfg.cb, std::max(2, cfg.cb / 2));
    conv("head.a2", 3, 3, std::max(2, cfg.cb / 2), 2, /*zero=*/true);
    if (cfg.upsample_mode == UpsampleMode::Learned) {
        conv("head.b1", 3, 3, cfg.cb, cfg.cb);
        conv("head.b2", 3, 3, cfg.cb, 64 * 9);
    }
    return p;
}

template <typename T>
struct TapedParams {
    std::map<std::string, typename Tape<T>::Id> id;

    typename Tape<T>::Id at(const std::string& name) const {
        auto it = id.find(name);
        require(it != id.end(), "parameter '" + name + "' missing from store");
        return it->second;
    }

    AttentionParams<T> attn(const std::string& pre) const {
        return AttentionParams<T>{at(pre + ".q.w"), at(pre + ".q.b"), at(pre + ".k.w"), at(pre + ".k.b"),
                                  at(pre + ".v.w"), at(pre + ".v.b"), at(pre + ".o.w"), at(pre + ".o.b")};
    }
};

template <typename T>
TapedParams<T> inject_params(Tape<T>& tape, const ParamStore<T>& store, bool requires_grad) {
    TapedParams<T> tp;
    for (const auto& [name, arr] : store) tp.id[name] = tape.leaf(arr, requires_grad);
    return tp;
}

namespace detail {

template <typename T>
using Id = typename Tape<T>::Id;

template <typename T>
Id<T> conv_bias(Tape<T>& tape, const TapedParams<T>& p, const std::string& name, Id<T> x, int stride,
                int padding) {
    return tape.add_bias(tape.conv2d(x, p.at(name + ".w"), stride, padding), p.at(name + ".b"));
}

template <typename T>
Id<T> residual_down_block(Tape<T>& tape, const TapedParams<T>& p, const std::string& pre, Id<T> x) {
    auto branch = conv_bias(tape, p, pre + ".conv1", x, 2, 1);
    branch = tape.relu(branch);
    branch = conv_bias(tape, p, pre + ".conv2", branch, 1, 1);
    auto skip = conv_bias(tape, p, pre + ".skip", x, 2, 0);
    return tape.add(skip, branch);
}

template <typename T>
Id<T> residual_block(Tape<T>& tape, const TapedParams<T>& p, const std::string& pre, Id<T> x) {
    auto branch = conv_bias(tape, p, pre + ".conv1", x, 1, 1);
    branch = tape.relu(branch);
    branch = conv_bias(tape, p, pre + ".conv2", branch, 1, 1);
    return tape.add(x, branch);
}

template <typename T>
Id<T> linear_layer(Tape<T>& tape, const TapedParams<T>& p, const std::string& name, Id<T> x) {
    return tape.add_bias(tape.matmul(x, p.at(name + ".w")), p.at(name + ".b"));
}

template <typename T>
Id<T> ffn_forward(Tape<T>& tape, const TapedParams<T>& p, const std::string& pre, Id<T> x) {
    return linear_layer(tape, p, pre + ".w2", tape.gelu(linear_layer(tape, p, pre + ".w1", x)));
}

template <typename T>
Id<T> ln_res(Tape<T>& tape, const TapedParams<T>& p, const std::string& name, Id<T> a, Id<T> b) {
    return tape.layer_norm(tape.add(a, b), p.at(name + ".g"), p.at(name + ".b"), T(1e-5));
}

template <typename T>
Id<T> encoder_layer(Tape<T>& tape, const TapedParams<T>& p, const ModelConfig& cfg, const std::string& pre,
                    Id<T> tokens) {
    auto attn = multi_head_attention(tape, tokens, tokens, tokens, cfg.heads, p.attn(pre + ".attn"));
    auto x1 = ln_res(tape, p, pre + ".ln1", attn, tokens);
    auto ff = ffn_forward(tape, p, pre + ".ffn", x1);
    return ln_res(tape, p, pre + ".ln2", ff, x1);
}

template <typename T>
Id<T> decoder_layer(Tape<T>& tape, const TapedParams<T>& p, const ModelConfig& cfg, const std::string& pre,
                    Id<T> tokens, Id<T> memory) {
    auto self = multi_head_attention(tape, tokens, tokens, tokens, cfg.heads, p.attn(pre + ".self"));
    auto x1 = ln_res(tape, p, pre + ".ln1", self, tokens);
    auto cross = multi_head_attention(tape, x1, memory, memory, cfg.heads, p.attn(pre + ".cross"));
    auto x2 = ln_res(tape, p, pre + ".ln2", cross, x1);
    auto ff = ffn_forward(tape, p, pre + ".ffn", x2);
    return ln_res(tape, p, pre + ".ln3", ff, x2);
}

}  // namespace detail

// img leaf [H,W,3] -> feature map [H/8, W/8, cb]
template <typename T>
typename Tape<T>::Id backbone_forward(Tape<T>& tape, const TapedParams<T>& p, const ModelConfig& cfg,
                                      typename Tape<T>::Id img) {
    const Shape s = tape.value(img).shape;
    require(s.rank() == 3 && s[2] == 3, "backbone_forward: input must be [H,W,3]");
    require(s[0] % 8 == 0 && s[1] % 8 == 0, "backbone_forward: extents must be divisible by 8");
    auto x = img;
    for (int st = 0; st < 3; ++st) {
        const std::string pre = "backbone.stage" + std::to_string(st);
        x = detail::residual_down_block(tape, p, pre + ".down", x);
        x = detail::residual_block(tape, p, pre + ".res", x);
    }
    return detail::conv_bias(tape, p, "backbone.proj", x, 1, 0);
}

template <typename T>
struct PyramidIds {
    std::array<typename Tape<T>::Id, 3> level;  // E2, E4, E6 as [h,w,cb]
};

// Three two-layer blocks with stride-2 downsampling between them; positional
// embedding regenerated and re-added at the start of each block.
template <typename T>
PyramidIds<T> encoder_forward(Tape<T>& tape, const TapedParams<T>& p, const ModelConfig& cfg,
                              typename Tape<T>::Id ec) {
    PyramidIds<T> pyr;
    auto x = ec;
    for (int b = 0; b < cfg.encoder_blocks; ++b) {
        const Shape s = tape.value(x).shape;
        const int h = s[0], w = s[1];
        auto pe = tape.leaf(positional_embedding<T>(h, w, cfg.cb));
        x = tape.add(x, pe);
        auto tokens = tape.reshape(x, Shape{h * w, cfg.cb});
        for (int l = 0; l < cfg.encoder_layers_per_block; ++l)
            tokens = detail::encoder_layer(tape, p, cfg, "enc.b" + std::to_string(b) + ".l" + std::to_string(l),
                                           tokens);
        auto spatial = tape.reshape(tokens, Shape{h, w, cfg.cb});
        pyr.level[static_cast<size_t>(b)] = spatial;
        if (b + 1 < cfg.encoder_blocks)
            x = detail::conv_bias(tape, p, "enc.down" + std::to_string(b), spatial, 2, 1);
    }
    return pyr;
}

// Query tokens attend to E6, then (bilinearly upsampled between blocks) to E4
// and E2. Returns D6 at [H/8, W/8, cb].
template <typename T>
typename Tape<T>::Id decoder_forward(Tape<T>& tape, const TapedParams<T>& p, const ModelConfig& cfg,
                                     const PyramidIds<T>& pyr) {
    const Shape s32 = tape.value(pyr.level[2]).shape;
    const int h32 = s32[0], w32 = s32[1];
    typename Tape<T>::Id queries;
    if (cfg.query_mode == QueryMode::Learned) {
        queries = p.at("dec.queries");
        require(tape.value(queries).shape == Shape{h32 * w32, cfg.cb},
                "decoder_forward: query shape " + tape.value(queries).shape.str() + " does not match E6 grid");
    } else {
        queries = tape.reshape(tape.leaf(positional_embedding<T>(h32, w32, cfg.cb)), Shape{h32 * w32, cfg.cb});
    }
    auto pd = tape.reshape(tape.leaf(positional_embedding<T>(h32, w32, cfg.cb)), Shape{h32 * w32, cfg.cb});
    auto d = tape.add(queries, pd);
    for (int b = 0; b < cfg.decoder_blocks; ++b) {
        auto mem_spatial = pyr.level[static_cast<size_t>(2 - b)];
        const Shape ms = tape.value(mem_spatial).shape;
        auto memory = tape.reshape(mem_spatial, Shape{ms[0] * ms[1], cfg.cb});
        for (int l = 0; l < cfg.decoder_layers_per_block; ++l)
            d = detail::decoder_layer(tape, p, cfg, "dec.b" + std::to_string(b) + ".l" + std::to_string(l), d,
                                      memory);
        if (b + 1 < cfg.decoder_blocks) {
            auto spatial = tape.reshape(d, Shape{ms[0], ms[1], cfg.cb});
            const Shape ns = tape.value(pyr.level[static_cast<size_t>(1 - b)]).shape;
            auto up = tape.bilinear_resize(spatial, ns[0], ns[1]);
            if (cfg.re_add_pos_per_block) up = tape.add(up, tape.leaf(positional_embedding<T>(ns[0], ns[1], cfg.cb)));
            d = tape.reshape(up, Shape{ns[0] * ns[1], cfg.cb});
        }
    }
    const Shape s8 = tape.value(pyr.level[0]).shape;
    return tape.reshape(d, Shape{s8[0], s8[1], cfg.cb});
}

// Identity coordinate grid for the coarse flow, in full-resolution pixel
// units: cell (i,j) holds the center of its 8x8 patch.
template <typename T>
NdArray<T> coarse_identity_grid(int h8, int w8) {
    NdArray<T> g(Shape{h8, w8, 2});
    for (int i = 0; i < h8; ++i)
        for (int j = 0; j < w8; ++j) {
            g.data[(static_cast<size_t>(i) * w8 + j) * 2 + 0] = static_cast<T>(j * 8 + 3.5);
            g.data[(static_cast<size_t>(i) * w8 + j) * 2 + 1] = static_cast<T>(i * 8 + 3.5);
        }
    return g;
}

// Coarse flow plus convex 8x upsampling (or plain bilinear in the ablation).
template <typename T>
typename Tape<T>::Id flow_head(Tape<T>& tape, const TapedParams<T>& p, const ModelConfig& cfg,
                               typename Tape<T>::Id d6) {
    const Shape s = tape.value(d6).shape;
    const int h8 = s[0], w8 = s[1];
    auto ha = tape.relu(detail::conv_bias(tape, p, "head.a1", d6, 1, 1));
    auto delta = detail::conv_bias(tape, p, "head.a2", ha, 1, 1);
    auto fm = tape.add(tape.leaf(coarse_identity_grid<T>(h8, w8)), delta);
    if (cfg.upsample_mode == UpsampleMode::Learned) {
        auto hb = tape.relu(detail::conv_bias(tape, p, "head.b1", d6, 1, 1));
        auto logits = detail::conv_bias(tape, p, "head.b2", hb, 1, 1);
        auto wts = tape.softmax(tape.reshape(logits, Shape{h8, w8, 64, 9}), 3);
        return tape.convex_combine8(fm, wts);
    }
    return tape.bilinear_resize(fm, h8 * 8, w8 * 8);
}

template <typename T>
typename Tape<T>::Id model_forward(Tape<T>& tape, const TapedParams<T>& p, const ModelConfig& cfg,
                                   typename Tape<T>::Id img) {
    auto ec = backbone_forward(tape, p, cfg, img);
    auto pyr = encoder_forward(tape, p, cfg, ec);
    auto d6 = decoder_forward(tape, p, cfg, pyr);
    return flow_head(tape, p, cfg, d6);
}

// Input normalization: rasters are fed to the network centered around zero.
template <typename T>
NdArray<T> image_to_input(const ImageRaster& img) {
    require(img.channels == 3, "image_to_input: expected an RGB raster");
    NdArray<T> a(Shape{img.height, img.width, 3});
    for (size_t i = 0; i < img.data.size(); ++i) a.data[i] = static_cast<T>(img.data[i] - 0.5);
    return a;
}

template <typename T>
WarpFlow flow_from_value(const NdArray<T>& v) {
    require(v.shape.rank() == 3 && v.shape[2] == 2, "flow_from_value: expected [H,W,2]");
    WarpFlow f(v.shape[0], v.shape[1]);
    for (int y = 0; y < f.height; ++y)
        for (int x = 0; x < f.width; ++x) {
            f.u(y, x) = static_cast<double>(v.data[(static_cast<size_t>(y) * f.width + x) * 2 + 0]);
            f.v(y, x) = static_cast<double>(v.data[(static_cast<size_t>(y) * f.width + x) * 2 + 1]);
        }
    return f;
}

template <typename T>
NdArray<T> flow_to_value(const WarpFlow& f) {
    NdArray<T> v(Shape{f.height, f.width, 2});
    for (int y = 0; y < f.height; ++y)
        for (int x = 0; x < f.width; ++x) {
            v.data[(static_cast<size_t>(y) * f.width + x) * 2 + 0] = static_cast<T>(f.u(y, x));
            v.data[(static_cast<size_t>(y) * f.width + x) * 2 + 1] = static_cast<T>(f.v(y, x));
        }
    return v;
}

// Inference-only forward on a fresh tape.
template <typename T>
WarpFlow predict_flow(const ParamStore<T>& params, const ModelConfig& cfg, const ImageRaster& img) {
    require(img.height == cfg.height && img.width == cfg.width,
            "predict_flow: raster extents do not match the configured network size");
    Tape<T> tape;
    auto tp = inject_params(tape, params, /*requires_grad=*/false);
    auto in = tape.leaf(image_to_input<T>(img.to_rgb()));
    auto out = model_forward(tape, tp, cfg, in);
    return flow_from_value(tape.value(out));
}

// --- checkpoint container ----------------------------------------------
// "UWCK" | u32 version | u64 json_len | json | u32 nblobs | blobs | u64 fnv
// Blob: u16 name_len | name | u8 rank | u32 dims[] | f32 data (LE).

struct Checkpoint {
    ModelConfig config;
    ParamStore<float> params;
    std::map<std::string, AdamWState<float>> opt_state;  // empty if not saved
    std::int64_t opt_step = 0;
    std::int64_t train_step = 0;
    std::string rng_state;  // serialized trainer rng stream
};

namespace detail {

inline void buf_u32(std::string& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void buf_u64(std::string& b, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void buf_blob(std::string& b, const std::string& name, const NdArray<float>& a) {
    require(name.size() < 65536, "blob name too long");
    b.push_back(static_cast<char>(name.size() & 0xff));
    b.push_back(static_cast<char>((name.size() >> 8) & 0xff));
    b += name;
    b.push_back(static_cast<char>(a.shape.rank()));
    for (int d : a.shape.dims) buf_u32(b, static_cast<std::uint32_t>(d));
    const size_t off = b.size();
    b.resize(off + a.data.size() * 4);
    std::memcpy(b.data() + off, a.data.data(), a.data.size() * 4);
}

struct BufReader {
    const std::string& b;
    size_t pos = 0;
    explicit BufReader(const std::string& s) : b(s) {}
    std::uint32_t u32() {
        require(pos + 4 <= b.size(), "checkpoint: truncated");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[pos++])) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        require(pos + 8 <= b.size(), "checkpoint: truncated");
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[pos++])) << (8 * i);
        return v;
    }
    std::string bytes(size_t n) {
        require(pos + n <= b.size(), "checkpoint: truncated");
        std::string s = b.substr(pos, n);
        pos += n;
        return s;
    }
    std::pair<std::string, NdArray<float>> blob() {
        require(pos + 2 <= b.size(), "checkpoint: truncated");
        const size_t nl = static_cast<unsigned char>(b[pos]) | (static_cast<unsigned char>(b[pos + 1]) << 8);
        pos += 2;
        std::string name = bytes(nl);
        require(pos + 1 <= b.size(), "checkpoint: truncated");
        const int rank = static_cast<unsigned char>(b[pos++]);
        Shape s;
        for (int i = 0; i < rank; ++i) s.dims.push_back(static_cast<int>(u32()));
        NdArray<float> a(s);
        const size_t n = a.data.size() * 4;
        require(pos + n <= b.size(), "checkpoint: truncated blob data");
        std::memcpy(a.data.data(), b.data() + pos, n);
        pos += n;
        return {std::move(name), std::move(a)};
    }
};

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::string buf;
    buf += "UWCK";
    detail::buf_u32(buf, 1);  // format version
    nlohmann::json meta = {{"config", ck.config.to_json()},
                           {"train_step", ck.train_step},
                           {"has_optimizer", !ck.opt_state.empty()},
                           {"opt_step", ck.opt_step},
                           {"rng_state", ck.rng_state}};
    const std::string js = meta.dump();
    detail::buf_u64(buf, js.size());
    buf += js;
    std::uint32_t nblobs = static_cast<std::uint32_t>(ck.params.size() + 2 * ck.opt_state.size());
    detail::buf_u32(buf, nblobs);
    for (const auto& [name, arr] : ck.params) detail::buf_blob(buf, name, arr);
    for (const auto& [name, st] : ck.opt_state) {
        detail::buf_blob(buf, "__opt_m__/" + name, st.m);
        detail::buf_blob(buf, "__opt_v__/" + name, st.v);
    }
    detail::buf_u64(buf, fnv1a(buf.data(), buf.size()));
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "save_checkpoint: cannot open " + path);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    require(f.good(), "save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "load_checkpoint: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    require(buf.size() > 24, "load_checkpoint: file too small: " + path);
    const std::string body = buf.substr(0, buf.size() - 8);
    detail::BufReader tail(buf);
    tail.pos = buf.size() - 8;
    require(tail.u64() == fnv1a(body.data(), body.size()), "load_checkpoint: checksum mismatch in " + path);
    detail::BufReader r(body);
    require(r.bytes(4) == "UWCK", "load_checkpoint: bad magic in " + path);
    const std::uint32_t version = r.u32();
    require(version == 1, "load_checkpoint: unsupported format version " + std::to_string(version));
    const std::uint64_t jlen = r.u64();
    auto meta = nlohmann::json::parse(r.bytes(jlen));
    Checkpoint ck;
    ck.config = ModelConfig::from_json(meta.at("config"));
    ck.train_step = meta.at("train_step").get<std::int64_t>();
    ck.opt_step = meta.at("opt_step").get<std::int64_t>();
    ck.rng_state = meta.at("rng_state").get<std::string>();
    const std::uint32_t nblobs = r.u32();
    for (std::uint32_t i = 0; i < nblobs; ++i) {
        auto [name, arr] = r.blob();
        if (name.rfind("__opt_m__/", 0) == 0)
            ck.opt_state[name.substr(10)].m = std::move(arr);
        else if (name.rfind("__opt_v__/", 0) == 0)
            ck.opt_state[name.substr(10)].v = std::move(arr);
        else
            ck.params[name] = std::move(arr);
    }
    for (auto& [name, st] : ck.opt_state) st.step = ck.opt_step;
    // every architecture parameter must appear exactly once with the right shape
    auto expect = init_params<float>(ck.config, 0);
    require(expect.size() == ck.params.size(), "load_checkpoint: parameter set does not match architecture");
    for (const auto& [name, arr] : expect) {
        auto it = ck.params.find(name);
        require(it != ck.params.end(), "load_checkpoint: missing parameter " + name);
        require(it->second.shape == arr.shape, "load_checkpoint: shape mismatch for " + name);
    }
    return ck;
}

template <typename T>
ParamStore<T> params_from_checkpoint(const Checkpoint& ck) {
    ParamStore<T> out;
    for (const auto& [name, arr] : ck.params) {
        NdArray<T> a(arr.shape);
        for (size_t i = 0; i < arr.data.size(); ++i) a.data[i] = static_cast<T>(arr.data[i]);
        out[name] = std::move(a);
    }
    return out;
}

template <typename T>
ParamStore<float> params_to_f32(const ParamStore<T>& in) {
    ParamStore<float> out;
    for (const auto& [name, arr] : in) {
        NdArray<float> a(arr.shape);
        for (size_t i = 0; i < arr.data.size(); ++i) a.data[i] = static_cast<float>(arr.data[i]);
        out[name] = std::move(a);
    }
    return out;
}

}  // namespace unwarp
