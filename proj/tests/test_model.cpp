#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "unwarp/model.hpp"
#include "unwarp/train.hpp"

using namespace unwarp;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config(int h = 64, int w = 64, int cb = 16) {
    ModelConfig c = ModelConfig::toy(h, w, cb);
    return c;
}

ImageRaster smooth_test_image(int h, int w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const double a = uni(rng), b = uni(rng), c = uni(rng);
    ImageRaster img(h, w, 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            img.at(y, x, 0) = 0.5 + 0.4 * std::sin(2 * 3.14159 * (x * a / w + y * b / h));
            img.at(y, x, 1) = 0.5 + 0.4 * std::cos(2 * 3.14159 * (x * b / w + c));
            img.at(y, x, 2) = 0.5 + 0.3 * std::sin(2 * 3.14159 * (y * c / h + a));
        }
    for (auto& v : img.data) v = clamp01(v);
    return img;
}

std::vector<LoadedSample> toy_samples(const ModelConfig& cfg, int n, std::uint64_t seed) {
    std::vector<LoadedSample> out;
    for (int i = 0; i < n; ++i) {
        LoadedSample s;
        s.image = smooth_test_image(cfg.height, cfg.width, seed + i);
        s.flow = identity_flow(cfg.height, cfg.width);
        for (int y = 0; y < cfg.height; ++y)
            for (int x = 0; x < cfg.width; ++x) {
                s.flow.u(y, x) += 1.5 * std::sin(0.1 * y + i);
                s.flow.v(y, x) += 1.2 * std::cos(0.13 * x - i);
            }
        out.push_back(std::move(s));
    }
    return out;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("config validation and pyramid extents") {
    CHECK_NOTHROW(ModelConfig::full().validate());
    CHECK_NOTHROW(tiny_config().validate());

    ModelConfig bad = ModelConfig::full();
    bad.height = 100;  // not divisible by 8
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = ModelConfig::full();
    bad.heads = 7;  // 256 % 7 != 0
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = ModelConfig::full();
    bad.backbone_channels = {32, 64};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    const auto p288 = ModelConfig::full().pyramid_extents();
    CHECK(p288[0] == std::array<int, 2>{36, 36});
    CHECK(p288[1] == std::array<int, 2>{18, 18});
    CHECK(p288[2] == std::array<int, 2>{9, 9});

    ModelConfig rect = tiny_config(96, 160);
    const auto pr = rect.pyramid_extents();
    CHECK(pr[0] == std::array<int, 2>{12, 20});
    CHECK(pr[1] == std::array<int, 2>{6, 10});
    CHECK(pr[2] == std::array<int, 2>{3, 5});

    const auto p64 = tiny_config().pyramid_extents();
    CHECK(p64[0] == std::array<int, 2>{8, 8});
    CHECK(p64[1] == std::array<int, 2>{4, 4});
    CHECK(p64[2] == std::array<int, 2>{2, 2});
}

TEST_CASE("positional embedding separates axes and stays bounded") {
    const int h = 6, w = 7, c = 16;
    auto pe = positional_embedding<double>(h, w, c);
    REQUIRE(pe.shape == Shape{h, w, c});
    for (double v : pe.data) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
    auto at = [&](int y, int x, int ch) { return pe.data[(static_cast<size_t>(y) * w + x) * c + ch]; };
    // first half of the channels depends only on x, second half only on y
    for (int ch = 0; ch < c / 2; ++ch)
        for (int x = 0; x < w; ++x)
            for (int y = 1; y < h; ++y) CHECK(at(y, x, ch) == at(0, x, ch));
    for (int ch = c / 2; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 1; x < w; ++x) CHECK(at(y, x, ch) == at(y, 0, ch));
    // distinct positions get distinct codes
    double d01 = 0, d10 = 0;
    for (int ch = 0; ch < c; ++ch) {
        d01 += std::abs(at(0, 0, ch) - at(0, 1, ch));
        d10 += std::abs(at(0, 0, ch) - at(1, 0, ch));
    }
    CHECK(d01 > 1e-3);
    CHECK(d10 > 1e-3);

    CHECK_THROWS_AS(positional_embedding<double>(4, 4, 6), std::invalid_argument);
}

TEST_CASE("backbone, encoder pyramid, decoder and head shapes line up") {
    for (auto [h, w] : {std::pair{64, 64}, std::pair{96, 160}}) {
        ModelConfig cfg = tiny_config(h, w, 16);
        auto params = init_params<float>(cfg, 3);
        Tape<float> tape;
        auto tp = inject_params(tape, params, false);
        auto in = tape.leaf(image_to_input<float>(smooth_test_image(h, w, 1)));

        auto ec = backbone_forward(tape, tp, cfg, in);
        CHECK(tape.value(ec).shape == Shape{h / 8, w / 8, cfg.cb});

        auto pyr = encoder_forward(tape, tp, cfg, ec);
        const auto ext = cfg.pyramid_extents();
        for (int lvl = 0; lvl < 3; ++lvl)
            CHECK(tape.value(pyr.level[static_cast<size_t>(lvl)]).shape ==
                  Shape{ext[static_cast<size_t>(lvl)][0], ext[static_cast<size_t>(lvl)][1], cfg.cb});

        auto d6 = decoder_forward(tape, tp, cfg, pyr);
        CHECK(tape.value(d6).shape == Shape{h / 8, w / 8, cfg.cb});

        auto flow = flow_head(tape, tp, cfg, d6);
        CHECK(tape.value(flow).shape == Shape{h, w, 2});
        for (float v : tape.value(flow).data) CHECK(std::isfinite(v));
    }
}

TEST_CASE("full forward is finite and well-shaped across seeds and ablations") {
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        for (auto qm : {QueryMode::Learned, QueryMode::Fixed})
            for (auto um : {UpsampleMode::Learned, UpsampleMode::Bilinear}) {
                ModelConfig cfg = tiny_config();
                cfg.query_mode = qm;
                cfg.upsample_mode = um;
                auto params = init_params<float>(cfg, seed);
                WarpFlow f = predict_flow(params, cfg, smooth_test_image(64, 64, seed));
                REQUIRE(f.height == 64);
                REQUIRE(f.width == 64);
                for (double v : f.u_map) CHECK(std::isfinite(v));
                for (double v : f.v_map) CHECK(std::isfinite(v));
            }
    }
}

TEST_CASE("freshly initialized model predicts a near-identity map") {
    ModelConfig cfg = tiny_config();
    auto params = init_params<float>(cfg, 11);
    WarpFlow f = predict_flow(params, cfg, smooth_test_image(64, 64, 5));
    // the coarse delta starts at zero, so every prediction convex-combines
    // identity grid values from a 3x3 coarse neighborhood (span < 12 px)
    double mean_dev = 0;
    for (int y = 8; y < 56; ++y)
        for (int x = 8; x < 56; ++x) {
            CHECK(std::abs(f.u(y, x) - x) < 12.0);
            CHECK(std::abs(f.v(y, x) - y) < 12.0);
            mean_dev += std::abs(f.u(y, x) - x) + std::abs(f.v(y, x) - y);
        }
    mean_dev /= 2.0 * 48 * 48;
    CHECK(mean_dev < 4.0);

    ModelConfig bcfg = cfg;
    bcfg.upsample_mode = UpsampleMode::Bilinear;
    auto bparams = init_params<float>(bcfg, 11);
    WarpFlow fb = predict_flow(bparams, bcfg, smooth_test_image(64, 64, 5));
    // bilinear upsampling of the exact identity grid is the identity interior
    for (int y = 8; y < 56; ++y)
        for (int x = 8; x < 56; ++x) {
            CHECK(fb.u(y, x) == doctest::Approx(x).epsilon(1e-4));
            CHECK(fb.v(y, x) == doctest::Approx(y).epsilon(1e-4));
        }
}

TEST_CASE("predictions stay within the convex hull of coarse neighborhoods") {
    ModelConfig cfg = tiny_config();
    auto params = init_params<float>(cfg, 17);
    // randomize the coarse head too so the combined values are not trivial
    for (auto key : {"head.a2.w", "head.a2.b"}) {
        std::mt19937_64 rng(99);
        std::normal_distribution<double> d(0.0, 0.3);
        for (auto& v : params.at(key).data) v = static_cast<float>(d(rng));
    }
    Tape<float> tape;
    auto tp = inject_params(tape, params, false);
    auto in = tape.leaf(image_to_input<float>(smooth_test_image(64, 64, 2)));
    auto ec = backbone_forward(tape, tp, cfg, in);
    auto pyr = encoder_forward(tape, tp, cfg, ec);
    auto d6 = decoder_forward(tape, tp, cfg, pyr);

    // recompute the coarse map the head upsamples
    auto ha = tape.relu(tape.add_bias(tape.conv2d(d6, tp.at("head.a1.w"), 1, 1), tp.at("head.a1.b")));
    auto delta = tape.add_bias(tape.conv2d(ha, tp.at("head.a2.w"), 1, 1), tp.at("head.a2.b"));
    auto fm = tape.add(tape.leaf(coarse_identity_grid<float>(8, 8)), delta);
    auto fine = flow_head(tape, tp, cfg, d6);
    const auto& cv = tape.value(fm);
    const auto& fv = tape.value(fine);
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x)
            for (int c = 0; c < 2; ++c) {
                const int ci = y / 8, cj = x / 8;
                float lo = 1e30f, hi = -1e30f;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int ny = std::clamp(ci + dy, 0, 7), nx = std::clamp(cj + dx, 0, 7);
                        const float v = cv.data[(static_cast<size_t>(ny) * 8 + nx) * 2 + c];
                        lo = std::min(lo, v);
                        hi = std::max(hi, v);
                    }
                const float v = fv.data[(static_cast<size_t>(y) * 64 + x) * 2 + c];
                CHECK(v >= lo - 1e-4f);
                CHECK(v <= hi + 1e-4f);
            }
}

TEST_CASE("checkpoints round-trip bit-exactly and rewrite byte-identically") {
    ModelConfig cfg = tiny_config();
    Checkpoint ck;
    ck.config = cfg;
    ck.params = init_params<float>(cfg, 29);
    ck.train_step = 7;

    const fs::path p1 = fs::temp_directory_path() / "unwarp_ck_a.bin";
    const fs::path p2 = fs::temp_directory_path() / "unwarp_ck_b.bin";
    save_checkpoint(ck, p1.string());
    save_checkpoint(ck, p2.string());
    CHECK(slurp(p1) == slurp(p2));

    Checkpoint back = load_checkpoint(p1.string());
    CHECK(back.train_step == 7);
    REQUIRE(back.params.size() == ck.params.size());
    for (const auto& [name, arr] : ck.params) {
        const auto& b = back.params.at(name);
        REQUIRE(b.shape == arr.shape);
        for (size_t i = 0; i < arr.data.size(); ++i) CHECK(b.data[i] == arr.data[i]);
    }

    // identical forward pass from the reloaded parameters
    ImageRaster img = smooth_test_image(64, 64, 3);
    WarpFlow fa = predict_flow(ck.params, cfg, img);
    WarpFlow fb = predict_flow(params_from_checkpoint<float>(back), back.config, img);
    for (size_t i = 0; i < fa.u_map.size(); ++i) {
        CHECK(fa.u_map[i] == fb.u_map[i]);
        CHECK(fa.v_map[i] == fb.v_map[i]);
    }

    // corruption must be detected
    std::string bytes = slurp(p1);
    bytes[bytes.size() / 2] ^= 0x01;
    const fs::path p3 = fs::temp_directory_path() / "unwarp_ck_c.bin";
    std::ofstream(p3, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    CHECK_THROWS_AS(load_checkpoint(p3.string()), std::invalid_argument);

    fs::remove(p1);
    fs::remove(p2);
    fs::remove(p3);
}

TEST_CASE("training is deterministic and checkpoint resume is bit-exact") {
    ModelConfig cfg = tiny_config();
    auto samples = toy_samples(cfg, 2, 21);

    TrainOptions opt;
    opt.steps = 4;
    opt.batch = 2;
    opt.lr_max = 1e-3;
    opt.seed = 5;

    auto a = train<float>(samples, cfg, opt);
    auto b = train<float>(samples, cfg, opt);
    REQUIRE(a.loss_trace.size() == 4);
    CHECK(a.loss_trace == b.loss_trace);
    for (const auto& [name, arr] : a.params) {
        const auto& other = b.params.at(name);
        for (size_t i = 0; i < arr.data.size(); ++i) CHECK(arr.data[i] == other.data[i]);
    }
    CHECK(a.lr_trace[0] == doctest::Approx(onecycle_lr(0, 4, opt.lr_max, opt.warmup_frac)));

    // pause after 2 steps, then resume for the remaining 2: identical outcome
    TrainOptions half = opt;
    half.stop_after = 2;
    auto first = train<float>(samples, cfg, half);
    Checkpoint mid = first.checkpoint;
    REQUIRE(mid.train_step == 2);
    auto resumed = train<float>(samples, cfg, opt, &mid);
    REQUIRE(resumed.loss_trace.size() == 2);
    CHECK(resumed.loss_trace[0] == a.loss_trace[2]);
    CHECK(resumed.loss_trace[1] == a.loss_trace[3]);
    for (const auto& [name, arr] : a.params) {
        const auto& other = resumed.params.at(name);
        for (size_t i = 0; i < arr.data.size(); ++i) CHECK(arr.data[i] == other.data[i]);
    }
}

TEST_CASE("rectification maps a native-resolution raster through the flow") {
    ModelConfig cfg = tiny_config();
    auto params = init_params<float>(cfg, 41);
    ImageRaster native = smooth_test_image(80, 72, 9);  // not the network size
    RectifyResult r = rectify(native, params, cfg);
    CHECK(r.rectified.height == 80);
    CHECK(r.rectified.width == 72);
    CHECK(r.flow.height == 80);
    CHECK(r.flow.width == 72);
    // near-identity initialization: the output resembles the input
    double err = 0;
    std::int64_t cnt = 0;
    for (int y = 10; y < 70; ++y)
        for (int x = 10; x < 62; ++x)
            for (int c = 0; c < 3; ++c) {
                err += std::abs(r.rectified.at(y, x, c) - native.at(y, x, c));
                ++cnt;
            }
    CHECK(err / static_cast<double>(cnt) < 0.1);
}
