#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "unwarp/metrics.hpp"

using namespace unwarp;

namespace {

ImageRaster textured(int h, int w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    ImageRaster img(h, w, 1);
    // text-like texture: dark bars on a bright page plus mild noise
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const bool bar = (y / 6) % 2 == 0 && (x % 17) > 2;
            double v = bar ? 0.15 : 0.9;
            v += 0.25 * std::sin(0.37 * x + 0.23 * y) * std::cos(0.11 * x);
            img.at(y, x, 0) = clamp01(v + 0.05 * (uni(rng) - 0.5));
        }
    return img;
}

ImageRaster noise_image(int h, int w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    ImageRaster img(h, w, 1);
    for (auto& v : img.data) v = uni(rng);
    return img;
}

// sample img at fractional x with clamping, one row
double sample_row(const ImageRaster& img, int y, double x) {
    const double xc = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
    const int x0 = std::clamp(static_cast<int>(std::floor(xc)), 0, img.width - 2);
    const double f = xc - x0;
    return img.at(y, x0, 0) * (1 - f) + img.at(y, x0 + 1, 0) * f;
}

// independent recursive Levenshtein for short strings
int lev_oracle(const std::string& a, const std::string& b, size_t i, size_t j) {
    if (i == a.size()) return static_cast<int>(b.size() - j);
    if (j == b.size()) return static_cast<int>(a.size() - i);
    const int sub = lev_oracle(a, b, i + 1, j + 1) + (a[i] == b[j] ? 0 : 1);
    const int del = lev_oracle(a, b, i + 1, j) + 1;
    const int ins = lev_oracle(a, b, i, j + 1) + 1;
    return std::min({sub, del, ins});
}

}  // namespace

TEST_CASE("protocol resize hits the standard evaluation area") {
    ImageRaster a(748, 800, 1);
    ImageRaster ra = protocol_resize(a);
    CHECK(ra.height == 748);
    CHECK(ra.width == 800);

    ImageRaster b(1496, 1600, 1);
    ImageRaster rb = protocol_resize(b);
    CHECK(rb.height == 748);
    CHECK(rb.width == 800);

    ImageRaster c(100, 100, 1);
    ImageRaster rc = protocol_resize(c);
    // round(sqrt(598400/10000) * 100) = round(773.56)
    CHECK(rc.height == 774);
    CHECK(rc.width == 774);
}

TEST_CASE("single-scale structural similarity") {
    ImageRaster x = textured(64, 64, 1);
    CHECK(ssim(x, x).mean == doctest::Approx(1.0).epsilon(1e-9));

    // binary half-black/half-white against its inversion
    ImageRaster half(64, 64, 1);
    for (int y = 0; y < 64; ++y)
        for (int xx = 0; xx < 64; ++xx) half.at(y, xx, 0) = xx < 32 ? 0.0 : 1.0;
    ImageRaster inv = half;
    for (auto& v : inv.data) v = 1.0 - v;
    CHECK(ssim(half, inv).mean < 0.1);

    // +0.1 intensity shift hits luminance, not structure
    ImageRaster dim = textured(64, 64, 2);
    for (auto& v : dim.data) v = 0.2 + 0.6 * v;  // headroom so the shift never clips
    ImageRaster bright = dim;
    for (auto& v : bright.data) v += 0.1;
    SsimResult r = ssim(dim, bright);
    CHECK(r.luminance < 0.999);
    CHECK(r.contrast_structure > 0.999);

    ImageRaster other(32, 32, 1);
    CHECK_THROWS_AS(ssim(x, other), std::invalid_argument);
    ImageRaster small(8, 8, 1);
    CHECK_THROWS_AS(ssim(small, small), std::invalid_argument);
}

TEST_CASE("multi-scale similarity: identity, noise, symmetry, size guard") {
    ImageRaster x = textured(180, 200, 3);
    CHECK(msssim(x, x) == doctest::Approx(1.0).epsilon(1e-6));

    ImageRaster n1 = noise_image(180, 200, 10), n2 = noise_image(180, 200, 11);
    CHECK(msssim(n1, n2) < 0.2);

    ImageRaster y = textured(180, 200, 4);
    CHECK(msssim(x, y) == doctest::Approx(msssim(y, x)).epsilon(1e-9));

    ImageRaster small(100, 100, 1);
    CHECK_THROWS_AS(msssim(small, small), std::invalid_argument);
}

TEST_CASE("black-region mask from validity or border flood fill") {
    ImageRaster img = textured(40, 40, 5);
    for (auto& v : img.data) v = 0.05 + 0.9 * v;  // keep everything above the fill threshold
    // all-valid image: empty mask
    ValidityMask none = black_region_mask(img);
    for (int y = 0; y < 40; ++y)
        for (int x = 0; x < 40; ++x) CHECK(!none.at(y, x));

    // explicit validity: mask is exactly its complement
    ValidityMask valid(40, 40);
    for (int y = 0; y < 40; ++y)
        for (int x = 0; x < 40; ++x) valid.set(y, x, (x + y) % 3 != 0);
    ValidityMask m = black_region_mask(img, &valid);
    for (int y = 0; y < 40; ++y)
        for (int x = 0; x < 40; ++x) CHECK(m.at(y, x) == !valid.at(y, x));

    // border-connected fill is masked; interior ink is not
    ImageRaster filled = textured(40, 40, 6);
    for (auto& v : filled.data) v = 0.05 + 0.9 * v;
    for (int y = 0; y < 40; ++y)
        for (int x = 0; x < 6; ++x) filled.at(y, x, 0) = 0.0;  // left fill band
    filled.at(20, 20, 0) = 0.0;  // isolated interior ink pixel
    ValidityMask f = black_region_mask(filled);
    for (int y = 0; y < 40; ++y)
        for (int x = 0; x < 6; ++x) CHECK(f.at(y, x));
    CHECK(!f.at(20, 20));
}

TEST_CASE("masked multi-scale similarity") {
    ImageRaster rect = textured(180, 200, 7);
    ImageRaster gt = textured(180, 200, 8);
    ValidityMask empty(180, 200);
    CHECK(msssim_masked(rect, gt, empty) == msssim(rect, gt));

    // rectified already equals the masked gt: score is 1 and stays 1 when the
    // mask grows, because both operands lose the same pixels
    ValidityMask band(180, 200);
    for (int y = 0; y < 180; ++y)
        for (int x = 0; x < 30; ++x) band.set(y, x, true);
    ImageRaster rect2 = gt;
    for (int y = 0; y < 180; ++y)
        for (int x = 0; x < 30; ++x) rect2.at(y, x, 0) = 0.0;
    CHECK(msssim_masked(rect2, gt, band) == doctest::Approx(1.0).epsilon(1e-6));
    ValidityMask wider(180, 200);
    for (int y = 0; y < 180; ++y)
        for (int x = 0; x < 45; ++x) wider.set(y, x, true);
    ImageRaster rect3 = gt;
    for (int y = 0; y < 180; ++y)
        for (int x = 0; x < 45; ++x) rect3.at(y, x, 0) = 0.0;
    CHECK(msssim_masked(rect3, gt, wider) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("dense matching recovers known displacements") {
    ImageRaster a = textured(160, 180, 20);

    // identical images: zero field everywhere
    DisplacementField self = dense_match(a, a);
    for (size_t i = 0; i < self.dx.size(); ++i) {
        CHECK(self.dx[i] == 0.0);
        CHECK(self.dy[i] == 0.0);
    }
    CHECK(local_distortion(self) == 0.0);

    // 3 px right shift
    ImageRaster shifted(160, 180, 1);
    for (int y = 0; y < 160; ++y)
        for (int x = 0; x < 180; ++x) shifted.at(y, x, 0) = sample_row(a, y, x - 3.0);
    DisplacementField sf = dense_match(a, shifted);
    double mx = 0, my = 0;
    std::int64_t n = 0;
    for (int y = 12; y < 148; ++y)
        for (int x = 12; x < 168; ++x) {
            mx += sf.dx[static_cast<size_t>(y) * 180 + x];
            my += sf.dy[static_cast<size_t>(y) * 180 + x];
            ++n;
        }
    mx /= n;
    my /= n;
    CHECK(std::abs(mx - 3.0) < 0.5);
    CHECK(std::abs(my) < 0.5);

    // smooth sinusoidal warp, amplitude 5 px: mean endpoint error < 1
    ImageRaster warped(160, 180, 1);
    auto s = [](int y) { return 5.0 * std::sin(2 * 3.14159265358979323846 * y / 64.0); };
    for (int y = 0; y < 160; ++y)
        for (int x = 0; x < 180; ++x) warped.at(y, x, 0) = sample_row(a, y, x + s(y));
    DisplacementField wf = dense_match(a, warped);
    double epe = 0;
    n = 0;
    for (int y = 12; y < 148; ++y)
        for (int x = 12; x < 168; ++x) {
            const size_t i = static_cast<size_t>(y) * 180 + x;
            const double ex = wf.dx[i] - (-s(y));
            const double ey = wf.dy[i];
            epe += std::sqrt(ex * ex + ey * ey);
            ++n;
        }
    CHECK(epe / n < 1.0);

    // degenerate constant images: everything flagged invalid
    ImageRaster flat(64, 64, 1);
    for (auto& v : flat.data) v = 0.5;
    DisplacementField df = dense_match(flat, flat);
    for (auto v : df.valid) CHECK(v == 0);
    CHECK_THROWS_AS(local_distortion(df), std::invalid_argument);
}

TEST_CASE("mean displacement magnitude, plain and masked") {
    DisplacementField c(10, 10);
    for (size_t i = 0; i < c.dx.size(); ++i) {
        c.dx[i] = 3.0;
        c.dy[i] = 4.0;
        c.valid[i] = 1;
    }
    CHECK(local_distortion(c) == 5.0);

    ValidityMask empty(10, 10);
    CHECK(local_distortion_masked(c, empty) == local_distortion(c));

    ValidityMask half(10, 10);
    for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 5; ++x) half.set(y, x, true);
    CHECK(local_distortion_masked(c, half) == 5.0);

    // corruption confined to the masked half moves LD but not LD-M
    DisplacementField corrupt = c;
    for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 5; ++x) corrupt.dx[static_cast<size_t>(y) * 10 + x] = 40.0;
    CHECK(local_distortion_masked(corrupt, half) == 5.0);
    CHECK(local_distortion(corrupt) > 5.0);

    // naive oracle on a random field
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> uni(-5.0, 5.0);
    DisplacementField r(12, 9);
    double acc = 0;
    int cnt = 0;
    for (size_t i = 0; i < r.dx.size(); ++i) {
        r.dx[i] = uni(rng);
        r.dy[i] = uni(rng);
        r.valid[i] = (i % 3) != 0;
        if (r.valid[i]) {
            acc += std::hypot(r.dx[i], r.dy[i]);
            ++cnt;
        }
    }
    CHECK(std::abs(local_distortion(r) - acc / cnt) < 1e-9);
}

TEST_CASE("edit distance examples and decomposition") {
    EditCounts same = edit_distance("hello", "hello");
    CHECK(same.total == 0);
    CHECK(same.deletions == 0);
    CHECK(same.insertions == 0);
    CHECK(same.substitutions == 0);

    EditCounts ins = edit_distance("", "abc");
    CHECK(ins.total == 3);
    CHECK(ins.insertions == 3);

    EditCounts kit = edit_distance("kitten", "sitting");
    CHECK(kit.total == 3);
    CHECK(kit.total == kit.deletions + kit.insertions + kit.substitutions);

    // character-level comparison of multi-byte text
    CHECK(edit_distance("héllo", "hello").total == 1);
    CHECK(edit_distance("日本語", "日本").total == 1);
}

TEST_CASE("edit distance satisfies the metric axioms against a brute-force oracle") {
    std::mt19937_64 rng(17);
    std::uniform_int_distribution<int> len(0, 6), ch(0, 2);
    auto rand_str = [&]() {
        std::string s;
        const int n = len(rng);
        for (int i = 0; i < n; ++i) s.push_back(static_cast<char>('a' + ch(rng)));
        return s;
    };
    for (int trial = 0; trial < 1000; ++trial) {
        const std::string a = rand_str(), b = rand_str(), c = rand_str();
        const EditCounts ab = edit_distance(a, b);
        CHECK(ab.total == lev_oracle(a, b, 0, 0));
        CHECK(ab.total == ab.deletions + ab.insertions + ab.substitutions);
        CHECK(edit_distance(a, a).total == 0);
        CHECK(edit_distance(b, a).total == ab.total);
        CHECK(edit_distance(a, c).total <= ab.total + edit_distance(b, c).total);
    }
}

TEST_CASE("character error rate") {
    CHECK(cer("perfect", "perfect") == 0.0);
    CHECK(cer("ab", "") == 1.0);
    CHECK(cer("sitting", "kitten") == doctest::Approx(3.0 / 7.0));
    CHECK_THROWS_AS(cer("", "abc"), std::invalid_argument);

    // rate consistency against the op decomposition over random pairs
    std::mt19937_64 rng(23);
    std::uniform_int_distribution<int> len(1, 8), ch(0, 3);
    auto rand_str = [&](int n) {
        std::string s;
        for (int i = 0; i < n; ++i) s.push_back(static_cast<char>('a' + ch(rng)));
        return s;
    };
    for (int trial = 0; trial < 100; ++trial) {
        const std::string r = rand_str(len(rng)), h = rand_str(len(rng));
        const EditCounts e = edit_distance(r, h);
        const double expect = static_cast<double>(e.deletions + e.insertions + e.substitutions) /
                              static_cast<double>(detail::decode_utf8(r).size());
        CHECK(cer(r, h) == doctest::Approx(expect).epsilon(1e-12));
        CHECK(cer(r, h) >= 0.0);
    }
}

TEST_CASE("pair evaluation and aggregation") {
    // identity pair: all-perfect row, aggregate equals the row
    EvalPair p;
    p.id = "ident";
    p.rectified = textured(200, 210, 31).to_rgb();
    p.gt = p.rectified;
    p.text = std::pair<std::string, std::string>{"lorem ipsum", "lorem ipsum"};
    MetricReport rep = evaluate_set({p});
    REQUIRE(rep.rows.size() == 1);
    const MetricRow& row = rep.rows[0];
    CHECK(row.mssim == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(row.mssim_m == doctest::Approx(1.0).epsilon(1e-6));
    REQUIRE(row.ld_ok);
    CHECK(row.ld == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(row.ld_m == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(row.ed == 0);
    CHECK(row.cer_value == 0.0);
    CHECK(rep.mean_mssim == row.mssim);
    CHECK(rep.mean_ld == row.ld);
    CHECK(rep.count_images == 1);
    CHECK(rep.count_ld == 1);
    CHECK(rep.count_text == 1);

    // mean of two LD-M rows; text bookkeeping counts only supplied rows
    MetricRow r1, r2;
    r1.id = "a";
    r1.ld = r1.ld_m = 4;
    r1.ld_ok = true;
    r1.has_text = true;
    r1.ed = 2;
    r1.cer_value = 0.25;
    r2.id = "b";
    r2.ld = r2.ld_m = 6;
    r2.ld_ok = true;
    MetricReport two = aggregate_rows({r1, r2});
    CHECK(two.mean_ld_m == doctest::Approx(5.0));
    CHECK(two.count_ld == 2);
    CHECK(two.count_text == 1);
    CHECK(two.mean_ed == doctest::Approx(2.0));
}
