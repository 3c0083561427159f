#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <random>

#include "unwarp/flow.hpp"
#include "unwarp/synth.hpp"

using namespace unwarp;

namespace {

ImageRaster random_image(int h, int w, int c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    ImageRaster img(h, w, c);
    for (auto& v : img.data) v = uni(rng);
    return img;
}

}  // namespace

TEST_CASE("identity flow holds pixel-center coordinates") {
    WarpFlow f = identity_flow(2, 2);
    CHECK(f.u(0, 0) == 0.0);
    CHECK(f.u(0, 1) == 1.0);
    CHECK(f.u(1, 0) == 0.0);
    CHECK(f.u(1, 1) == 1.0);
    CHECK(f.v(0, 0) == 0.0);
    CHECK(f.v(0, 1) == 0.0);
    CHECK(f.v(1, 0) == 1.0);
    CHECK(f.v(1, 1) == 1.0);
}

TEST_CASE("warping with the identity flow is bit-exact") {
    ImageRaster img = random_image(13, 9, 3, 7);
    auto [out, mask] = warp(img, identity_flow(13, 9), 0.0);
    REQUIRE(out.data.size() == img.data.size());
    for (size_t i = 0; i < img.data.size(); ++i) CHECK(out.data[i] == img.data[i]);
    for (int y = 0; y < 13; ++y)
        for (int x = 0; x < 9; ++x) CHECK(mask.at(y, x));
}

TEST_CASE("warp of a ramp under a +1 horizontal shift") {
    const int w = 8, h = 5;
    ImageRaster img(h, w, 1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) img.at(y, x, 0) = static_cast<double>(x) / (w - 1);
    WarpFlow f = identity_flow(h, w);
    for (auto& u : f.u_map) u += 1.0;
    auto [out, mask] = warp(img, f, 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x + 1 < w; ++x)
            CHECK(out.at(y, x, 0) == doctest::Approx(static_cast<double>(x + 1) / (w - 1)).epsilon(1e-12));
}

TEST_CASE("flow pointing far outside yields fill and an all-false mask") {
    ImageRaster img = random_image(6, 6, 1, 3);
    WarpFlow f = identity_flow(6, 6);
    for (auto& u : f.u_map) u = -100.0;
    auto [out, mask] = warp(img, f, 0.0);
    for (double v : out.data) CHECK(v == 0.0);
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 6; ++x) CHECK(!mask.at(y, x));
}

TEST_CASE("warp output is bounded by input range and fill (bilinear convexity)") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
        ImageRaster img = random_image(10, 12, 1, 100 + static_cast<std::uint64_t>(trial));
        double lo = 0.0, hi = 0.0;  // fill = 0 participates
        for (double v : img.data) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        WarpFlow f(10, 12);
        for (size_t i = 0; i < f.u_map.size(); ++i) {
            f.u_map[i] = uni(rng) * 16.0 - 2.0;
            f.v_map[i] = uni(rng) * 14.0 - 2.0;
        }
        auto [out, mask] = warp(img, f, 0.0);
        for (double v : out.data) {
            CHECK(v >= lo - 1e-12);
            CHECK(v <= hi + 1e-12);
        }
    }
}

TEST_CASE("resize_flow preserves identity under consistent rescaling") {
    WarpFlow id = identity_flow(288, 288);
    WarpFlow up = resize_flow(id, 576, 576, 576, 576);
    WarpFlow ref = identity_flow(576, 576);
    for (size_t i = 0; i < up.u_map.size(); ++i) {
        CHECK(std::abs(up.u_map[i] - ref.u_map[i]) < 1e-6);
        CHECK(std::abs(up.v_map[i] - ref.v_map[i]) < 1e-6);
    }
}

TEST_CASE("resize_flow scales a constant shift linearly") {
    WarpFlow f = identity_flow(288, 288);
    for (auto& u : f.u_map) u += 2.0;
    WarpFlow up = resize_flow(f, 576, 576, 576, 576);
    WarpFlow id = identity_flow(576, 576);
    for (int y = 8; y < 568; ++y)
        for (int x = 8; x < 568; ++x) {
            CHECK(up.u(y, x) == doctest::Approx(id.u(y, x) + 4.0).epsilon(1e-9));
            CHECK(up.v(y, x) == doctest::Approx(id.v(y, x)).epsilon(1e-9));
        }
}

TEST_CASE("resize_flow to identical extents is a bit-equal copy") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> uni(-3.0, 40.0);
    WarpFlow f(17, 23);
    for (size_t i = 0; i < f.u_map.size(); ++i) {
        f.u_map[i] = uni(rng);
        f.v_map[i] = uni(rng);
    }
    WarpFlow g = resize_flow(f, 17, 23, 17, 23);
    for (size_t i = 0; i < f.u_map.size(); ++i) {
        CHECK(g.u_map[i] == f.u_map[i]);
        CHECK(g.v_map[i] == f.v_map[i]);
    }
}

TEST_CASE("compose_crop_flow with a full-image crop is the identity restriction") {
    const int h = 48, w = 48;
    // smooth contraction flow that stays strictly inside the canvas
    WarpFlow full(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            full.u(y, x) = 3.0 + 0.85 * x + 0.8 * std::sin(0.2 * y);
            full.v(y, x) = 2.5 + 0.85 * y + 0.6 * std::cos(0.25 * x);
        }
    CropRect crop{0, 0, w, h};
    auto bbox = crop_flow_bbox(full, crop);
    // a crop covering everything must produce a bbox covering everything
    CHECK(bbox[0] == 0);
    CHECK(bbox[1] == 0);
    CHECK(bbox[2] == w - 1);
    CHECK(bbox[3] == h - 1);
    WarpFlow composed = compose_crop_flow(full, crop, h, w);
    for (size_t i = 0; i < composed.u_map.size(); ++i) {
        CHECK(composed.u_map[i] == doctest::Approx(full.u_map[i]).epsilon(1e-9));
        CHECK(composed.v_map[i] == doctest::Approx(full.v_map[i]).epsilon(1e-9));
    }
}

TEST_CASE("compose_crop_flow of a pure translation is identity plus a constant") {
    const int h = 64, w = 64;
    WarpFlow full = identity_flow(h, w);
    for (auto& u : full.u_map) u += 5.0;
    for (auto& v : full.v_map) v += 3.0;
    CropRect crop{10, 8, 40, 40};
    auto bbox = crop_flow_bbox(full, crop);
    // V = crop translated back by (-5,-3)
    CHECK(bbox[0] == 5);
    CHECK(bbox[1] == 5);
    CHECK(bbox[2] == 44);
    CHECK(bbox[3] == 44);
    WarpFlow composed = compose_crop_flow(full, crop, 40, 40);
    // B-local pixel q maps to q + B_origin + t - crop_origin
    for (int y = 0; y < 40; ++y)
        for (int x = 0; x < 40; ++x) {
            CHECK(composed.u(y, x) == doctest::Approx(x + 5 + 5 - 10).epsilon(1e-9));
            CHECK(composed.v(y, x) == doctest::Approx(y + 5 + 3 - 8).epsilon(1e-9));
        }
}

// warping the stored crop with the composed flow must agree with warping the
// full image and cutting the bbox, on doubly-valid interior pixels
static double compose_consistency_err(std::uint64_t seed) {
    const int h = 96, w = 96;
    DocumentRender doc = render_document(derive_seed(seed, 1), h, w);
    DistortionParams params = draw_distortion_params(derive_seed(seed, 2), h, w, 0.8);
    DistortionResult dist = generate_distortion(doc.image, doc.mask, params);
    CropRect crop{12, 12, 64, 64};
    auto bbox = crop_flow_bbox(dist.full_flow, crop);
    const int bw = bbox[2] - bbox[0] + 1, bh = bbox[3] - bbox[1] + 1;

    WarpFlow composed = compose_crop_flow(dist.full_flow, crop, bh, bw);
    ImageRaster crop_img(crop.height, crop.width, 3);
    for (int y = 0; y < crop.height; ++y)
        for (int x = 0; x < crop.width; ++x)
            for (int c = 0; c < 3; ++c)
                crop_img.at(y, x, c) = dist.distorted.at(crop.origin_y + y, crop.origin_x + x, c);
    auto [a, mask] = warp(crop_img, composed, 0.0);

    ImageRaster full_rect = warp(dist.distorted, dist.full_flow, 0.0).first;
    double err = 0;
    std::int64_t cnt = 0;
    for (int y = 1; y + 1 < bh; ++y)
        for (int x = 1; x + 1 < bw; ++x) {
            bool interior = true;
            for (int dy = -1; dy <= 1 && interior; ++dy)
                for (int dx = -1; dx <= 1; ++dx)
                    if (!mask.at(y + dy, x + dx)) {
                        interior = false;
                        break;
                    }
            if (!interior) continue;
            for (int c = 0; c < 3; ++c) err += std::abs(a.at(y, x, c) - full_rect.at(bbox[1] + y, bbox[0] + x, c));
            cnt += 3;
        }
    REQUIRE(cnt > 0);
    return err / static_cast<double>(cnt);
}

TEST_CASE("composed crop flows reproduce the full-image rectification") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) CHECK(compose_consistency_err(seed) < 2e-2);
}

TEST_CASE("flow_l1 matches its closed forms and a naive oracle") {
    WarpFlow a = identity_flow(6, 6), b = identity_flow(6, 6);
    CHECK(flow_l1(a, b) == 0.0);
    for (auto& u : b.u_map) u += 1.0;
    CHECK(flow_l1(a, b) == doctest::Approx(0.5).epsilon(1e-12));

    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> uni(-5.0, 5.0);
    WarpFlow p(7, 5), q(7, 5);
    double acc = 0;
    for (size_t i = 0; i < p.u_map.size(); ++i) {
        p.u_map[i] = uni(rng);
        q.u_map[i] = uni(rng);
        p.v_map[i] = uni(rng);
        q.v_map[i] = uni(rng);
        acc += std::abs(p.u_map[i] - q.u_map[i]) + std::abs(p.v_map[i] - q.v_map[i]);
    }
    CHECK(flow_l1(p, q) == doctest::Approx(acc / (2.0 * 7 * 5)).epsilon(1e-9));
}

TEST_CASE("flow files round-trip bit-exactly") {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> uni(-10.0, 100.0);
    WarpFlow f(19, 7);
    for (size_t i = 0; i < f.u_map.size(); ++i) {
        f.u_map[i] = static_cast<float>(uni(rng));  // format stores 32-bit floats
        f.v_map[i] = static_cast<float>(uni(rng));
    }
    const std::string path = "roundtrip_test.wfl";
    write_wfl(f, path, 1);
    std::uint32_t flags = 0;
    WarpFlow g = read_wfl(path, &flags);
    CHECK(flags == 1);
    REQUIRE(g.height == f.height);
    REQUIRE(g.width == f.width);
    for (size_t i = 0; i < f.u_map.size(); ++i) {
        CHECK(g.u_map[i] == f.u_map[i]);
        CHECK(g.v_map[i] == f.v_map[i]);
    }
    // second write must be byte-identical
    const std::string path2 = "roundtrip_test2.wfl";
    write_wfl(g, path2, 1);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
    std::remove(path.c_str());
    std::remove(path2.c_str());
}

TEST_CASE("validity mask marks exactly the inside-support pixels") {
    WarpFlow f = identity_flow(4, 4);
    ValidityMask m = flow_validity(f, 4, 4);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) CHECK(m.at(y, x));
    f.u(1, 1) = -0.75;  // quarter-inside support
    f.u(2, 2) = -0.25;  // three-quarter-inside support
    m = flow_validity(f, 4, 4);
    CHECK(!m.at(1, 1));
    CHECK(m.at(2, 2));
}
