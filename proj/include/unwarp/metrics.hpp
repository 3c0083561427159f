#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "unwarp/common.hpp"
#include "unwarp/flow.hpp"
#include "unwarp/image.hpp"

namespace unwarp {

// --- evaluation protocol constants -------------------------------------

inline constexpr double kProtocolArea = 598400.0;
inline constexpr std::array<double, 5> kMsssimWeights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

// Aspect-preserving resize to the standard evaluation pixel area.
inline ImageRaster protocol_resize(const ImageRaster& img) {
    require(img.height >= 1 && img.width >= 1, "protocol_resize: empty image");
    const double s = std::sqrt(kProtocolArea / (static_cast<double>(img.height) * img.width));
    const int oh = static_cast<int>(std::lround(s * img.height));
    const int ow = static_cast<int>(std::lround(s * img.width));
    if (oh == img.height && ow == img.width) return img;
    return resize_bilinear(img, oh, ow);
}

// --- SSIM / MS-SSIM ----------------------------------------------------

struct SsimResult {
    double mean = 0;        // mean of l*cs over the valid map
    double luminance = 0;   // mean l
    double contrast_structure = 0;  // mean cs
};

namespace detail {

inline std::vector<double> gaussian_kernel_11() {
    std::vector<double> k(11);
    double sum = 0;
    for (int i = 0; i < 11; ++i) {
        const double d = i - 5;
        k[static_cast<size_t>(i)] = std::exp(-d * d / (2 * 1.5 * 1.5));
        sum += k[static_cast<size_t>(i)];
    }
    for (auto& v : k) v /= sum;
    return k;
}

// separable gaussian filtering, valid region only: output (h-10, w-10)
inline std::vector<double> gauss_filter_valid(const std::vector<double>& img, int h, int w, int& oh, int& ow) {
    static const std::vector<double> k = gaussian_kernel_11();
    oh = h - 10;
    ow = w - 10;
    std::vector<double> tmp(static_cast<size_t>(h) * ow);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < ow; ++x) {
            double acc = 0;
            for (int i = 0; i < 11; ++i) acc += k[static_cast<size_t>(i)] * img[static_cast<size_t>(y) * w + x + i];
            tmp[static_cast<size_t>(y) * ow + x] = acc;
        }
    std::vector<double> out(static_cast<size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double acc = 0;
            for (int i = 0; i < 11; ++i) acc += k[static_cast<size_t>(i)] * tmp[static_cast<size_t>(y + i) * ow + x];
            out[static_cast<size_t>(y) * ow + x] = acc;
        }
    return out;
}

inline std::vector<double> halve_mean2x2(const std::vector<double>& img, int h, int w, int& oh, int& ow) {
    oh = h / 2;
    ow = w / 2;
    std::vector<double> out(static_cast<size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x)
            out[static_cast<size_t>(y) * ow + x] =
                0.25 * (img[static_cast<size_t>(2 * y) * w + 2 * x] + img[static_cast<size_t>(2 * y) * w + 2 * x + 1] +
                        img[static_cast<size_t>(2 * y + 1) * w + 2 * x] +
                        img[static_cast<size_t>(2 * y + 1) * w + 2 * x + 1]);
    return out;
}

inline SsimResult ssim_planes(const std::vector<double>& a, const std::vector<double>& b, int h, int w) {
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;  // dynamic range 1.0
    int oh, ow;
    auto mu1 = gauss_filter_valid(a, h, w, oh, ow);
    auto mu2 = gauss_filter_valid(b, h, w, oh, ow);
    std::vector<double> aa(a.size()), bb(b.size()), ab(a.size());
    for (size_t i = 0; i < a.size(); ++i) {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    auto s11 = gauss_filter_valid(aa, h, w, oh, ow);
    auto s22 = gauss_filter_valid(bb, h, w, oh, ow);
    auto s12 = gauss_filter_valid(ab, h, w, oh, ow);
    double ms = 0, ml = 0, mcs = 0;
    const size_t n = mu1.size();
    for (size_t i = 0; i < n; ++i) {
        const double m1 = mu1[i], m2 = mu2[i];
        const double v1 = s11[i] - m1 * m1, v2 = s22[i] - m2 * m2, cov = s12[i] - m1 * m2;
        const double l = (2 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
        const double cs = (2 * cov + c2) / (v1 + v2 + c2);
        ml += l;
        mcs += cs;
        ms += l * cs;
    }
    return SsimResult{ms / n, ml / n, mcs / n};
}

}  // namespace detail

// Single-scale SSIM: 11x11 gaussian window (sigma 1.5), K1=0.01, K2=0.03,
// dynamic range 1.0. Inputs are converted to grayscale.
inline SsimResult ssim(const ImageRaster& a, const ImageRaster& b) {
    require(a.height == b.height && a.width == b.width,
            "ssim: extent mismatch " + std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                std::to_string(b.height) + "x" + std::to_string(b.width));
    require(a.height >= 11 && a.width >= 11, "ssim: image smaller than the 11x11 window");
    ImageRaster ga = a.to_gray(), gb = b.to_gray();
    return detail::ssim_planes(ga.data, gb.data, a.height, a.width);
}

// 5-level MS-SSIM, product form: contrast-structure at every level, luminance
// at the coarsest, exponents from the published weight list renormalized by
// their sum (1.0001). 2x downsampling by 2x2 mean.
inline double msssim(const ImageRaster& a, const ImageRaster& b) {
    require(a.height == b.height && a.width == b.width, "msssim: extent mismatch");
    require(std::min(a.height, a.width) >= 176,
            "msssim: short side must be >= 176 (11 px window across 5 levels), got " +
                std::to_string(std::min(a.height, a.width)));
    double wsum = 0;
    for (double w : kMsssimWeights) wsum += w;
    std::vector<double> pa = a.to_gray().data, pb = b.to_gray().data;
    int h = a.height, w = a.width;
    double score = 1.0;
    for (int level = 0; level < 5; ++level) {
        SsimResult r = detail::ssim_planes(pa, pb, h, w);
        const double expo = kMsssimWeights[static_cast<size_t>(level)] / wsum;
        score *= std::pow(std::max(r.contrast_structure, 0.0), expo);
        if (level == 4) score *= std::pow(std::max(r.luminance, 0.0), expo);
        if (level < 4) {
            int nh, nw;
            pa = detail::halve_mean2x2(pa, h, w, nh, nw);
            pb = detail::halve_mean2x2(pb, h, w, nh, nw);
            h = nh;
            w = nw;
        }
    }
    return score;
}

// --- black-region masking ----------------------------------------------

// Border-connected exactly-fill pixels of the rectified image, or the
// complement of an explicit validity mask when available.
inline ValidityMask black_region_mask(const ImageRaster& rectified, const ValidityMask* validity = nullptr) {
    const int h = rectified.height, w = rectified.width;
    ValidityMask mask(h, w);  // true = black/redundant region
    if (validity) {
        require(validity->height == h && validity->width == w, "black_region_mask: validity extents mismatch");
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) mask.set(y, x, !validity->at(y, x));
        return mask;
    }
    auto is_fill = [&](int y, int x) {
        for (int c = 0; c < rectified.channels; ++c)
            if (rectified.at(y, x, c) > 1.0 / 255.0) return false;
        return true;
    };
    // flood fill from border over fill-valued pixels
    std::vector<std::pair<int, int>> stack;
    auto push = [&](int y, int x) {
        if (y < 0 || y >= h || x < 0 || x >= w || mask.at(y, x) || !is_fill(y, x)) return;
        mask.set(y, x, true);
        stack.emplace_back(y, x);
    };
    for (int x = 0; x < w; ++x) {
        push(0, x);
        push(h - 1, x);
    }
    for (int y = 0; y < h; ++y) {
        push(y, 0);
        push(y, w - 1);
    }
    while (!stack.empty()) {
        auto [y, x] = stack.back();
        stack.pop_back();
        push(y - 1, x);
        push(y + 1, x);
        push(y, x - 1);
        push(y, x + 1);
    }
    return mask;
}

// Ground truth is zeroed under the black-region mask, then compared as usual.
inline double msssim_masked(const ImageRaster& rectified, const ImageRaster& gt, const ValidityMask& mask) {
    require(mask.height == rectified.height && mask.width == rectified.width,
            "msssim_masked: mask extents must match the rectified image");
    require(gt.height == rectified.height && gt.width == rectified.width,
            "msssim_masked: align gt to the rectified extents before masking");
    ImageRaster masked = gt;
    for (int y = 0; y < gt.height; ++y)
        for (int x = 0; x < gt.width; ++x)
            if (mask.at(y, x))
                for (int c = 0; c < gt.channels; ++c) masked.at(y, x, c) = 0.0;
    return msssim(rectified, masked);
}

// --- dense correspondence / local distortion ---------------------------

struct DisplacementField {
    int height = 0, width = 0;
    std::vector<double> dx, dy;
    std::vector<unsigned char> valid;

    DisplacementField() = default;
    DisplacementField(int h, int w)
        : height(h), width(w), dx(static_cast<size_t>(h) * w, 0.0), dy(static_cast<size_t>(h) * w, 0.0),
          valid(static_cast<size_t>(h) * w, 0) {}
};

namespace detail {

// 8 orientation channels, magnitude-weighted soft binning, box-aggregated
// over 4x4 cells.
inline std::vector<float> orientation_channels(const std::vector<double>& img, int h, int w) {
    std::vector<float> ch(static_cast<size_t>(h) * w * 8, 0.f);
    for (int y = 1; y < h - 1; ++y)
        for (int x = 1; x < w - 1; ++x) {
            const double gx = 0.5 * (img[static_cast<size_t>(y) * w + x + 1] - img[static_cast<size_t>(y) * w + x - 1]);
            const double gy =
                0.5 * (img[static_cast<size_t>(y + 1) * w + x] - img[static_cast<size_t>(y - 1) * w + x]);
            const double mag = std::sqrt(gx * gx + gy * gy);
            if (mag < 1e-12) continue;
            double ang = std::atan2(gy, gx);  // [-pi, pi]
            double bin = (ang + 3.14159265358979323846) / (2 * 3.14159265358979323846) * 8.0;
            int b0 = static_cast<int>(std::floor(bin)) % 8;
            const double f = bin - std::floor(bin);
            const int b1 = (b0 + 1) % 8;
            ch[(static_cast<size_t>(y) * w + x) * 8 + b0] += static_cast<float>(mag * (1 - f));
            ch[(static_cast<size_t>(y) * w + x) * 8 + b1] += static_cast<float>(mag * f);
        }
    // 4x4 box aggregation per channel (two passes of width-4 box, separable)
    auto box_pass = [&](bool horizontal) {
        std::vector<float> tmp(ch.size(), 0.f);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 8; ++c) {
                    float acc = 0;
                    for (int o = -2; o <= 1; ++o) {
                        const int yy = horizontal ? y : std::clamp(y + o, 0, h - 1);
                        const int xx = horizontal ? std::clamp(x + o, 0, w - 1) : x;
                        acc += ch[(static_cast<size_t>(yy) * w + xx) * 8 + c];
                    }
                    tmp[(static_cast<size_t>(y) * w + x) * 8 + c] = acc * 0.25f;
                }
        ch.swap(tmp);
    };
    box_pass(true);
    box_pass(false);
    return ch;
}

inline double descriptor_cost(const std::vector<float>& da, const std::vector<float>& db, int h, int w, int ay,
                              int ax, int by, int bx) {
    // 3x3 grid of cell offsets, spacing 4, 8 channels each
    double cost = 0;
    for (int oy = -1; oy <= 1; ++oy)
        for (int ox = -1; ox <= 1; ++ox) {
            const int y1 = std::clamp(ay + oy * 4, 0, h - 1), x1 = std::clamp(ax + ox * 4, 0, w - 1);
            const int y2 = std::clamp(by + oy * 4, 0, h - 1), x2 = std::clamp(bx + ox * 4, 0, w - 1);
            const float* p1 = da.data() + (static_cast<size_t>(y1) * w + x1) * 8;
            const float* p2 = db.data() + (static_cast<size_t>(y2) * w + x2) * 8;
            for (int c = 0; c < 8; ++c) {
                const double d = static_cast<double>(p1[c]) - p2[c];
                cost += d * d;
            }
        }
    return cost;
}

inline void median3(std::vector<double>& plane, int h, int w) {
    std::vector<double> out(plane.size());
    double window[9];
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            int n = 0;
            for (int oy = -1; oy <= 1; ++oy)
                for (int ox = -1; ox <= 1; ++ox) {
                    const int yy = y + oy, xx = x + ox;
                    if (yy >= 0 && yy < h && xx >= 0 && xx < w) window[n++] = plane[static_cast<size_t>(yy) * w + xx];
                }
            std::nth_element(window, window + n / 2, window + n);
            out[static_cast<size_t>(y) * w + x] = window[n / 2];
        }
    plane.swap(out);
}

}  // namespace detail

// Dense correspondence from gt to rectified: HOG-style descriptors on a
// 3-level coarse-to-fine pyramid, +-4 px discrete search per level with
// quadratic sub-pixel refinement and median smoothing between levels.
// Contract: smooth warps up to ~8 px are recovered with < 1 px mean error.
inline DisplacementField dense_match(const ImageRaster& gt, const ImageRaster& rectified) {
    require(gt.height == rectified.height && gt.width == rectified.width, "dense_match: extent mismatch");
    const ImageRaster ga = gt.to_gray(), gb = rectified.to_gray();

    // degenerate (constant) inputs have no texture to match
    auto energy = [](const std::vector<double>& p) {
        double mn = p[0], mx = p[0];
        for (double v : p) {
            mn = std::min(mn, v);
            mx = std::max(mx, v);
        }
        return mx - mn;
    };
    DisplacementField field(gt.height, gt.width);
    if (energy(ga.data) < 1e-9 || energy(gb.data) < 1e-9) return field;  // valid stays all-false

    // pyramid
    struct Level {
        std::vector<double> a, b;
        int h, w;
    };
    std::vector<Level> levels;
    levels.push_back({ga.data, gb.data, gt.height, gt.width});
    for (int l = 1; l < 3; ++l) {
        const auto& prev = levels.back();
        if (prev.h < 24 || prev.w < 24) break;
        Level nx;
        nx.a = detail::halve_mean2x2(prev.a, prev.h, prev.w, nx.h, nx.w);
        nx.b = detail::halve_mean2x2(prev.b, prev.h, prev.w, nx.h, nx.w);
        levels.push_back(std::move(nx));
    }

    std::vector<double> fdx, fdy;
    int fh = 0, fw = 0;
    for (int li = static_cast<int>(levels.size()) - 1; li >= 0; --li) {
        const auto& lv = levels[static_cast<size_t>(li)];
        auto da = detail::orientation_channels(lv.a, lv.h, lv.w);
        auto db = detail::orientation_channels(lv.b, lv.h, lv.w);
        std::vector<double> dx(static_cast<size_t>(lv.h) * lv.w, 0.0), dy(dx.size(), 0.0);
        for (int y = 0; y < lv.h; ++y)
            for (int x = 0; x < lv.w; ++x) {
                double ix = 0, iy = 0;
                if (!fdx.empty()) {
                    const int py = std::clamp(y / 2, 0, fh - 1), px = std::clamp(x / 2, 0, fw - 1);
                    ix = 2.0 * fdx[static_cast<size_t>(py) * fw + px];
                    iy = 2.0 * fdy[static_cast<size_t>(py) * fw + px];
                }
                const int cx = x + static_cast<int>(std::lround(ix));
                const int cy = y + static_cast<int>(std::lround(iy));
                double best = std::numeric_limits<double>::max(), best_raw = 0;
                int bu = 0, bv = 0;
                for (int v = -4; v <= 4; ++v)
                    for (int u = -4; u <= 4; ++u) {
                        const int ty = cy + v, tx = cx + u;
                        if (ty < 0 || ty >= lv.h || tx < 0 || tx >= lv.w) continue;
                        // tiny displacement penalty so textureless ties resolve
                        // to the smallest motion
                        const double raw = detail::descriptor_cost(da, db, lv.h, lv.w, y, x, ty, tx);
                        const double c = raw + 1e-9 * (u * u + v * v);
                        if (c < best) {
                            best = c;
                            best_raw = raw;
                            bu = u;
                            bv = v;
                        }
                    }
                double sx = 0, sy2 = 0;
                // quadratic refinement along each axis where neighbors exist
                auto refine = [&](int du, int dv, double& s) {
                    if (best_raw <= 1e-12) return;  // exact minimum, nothing to refine
                    const int tyA = cy + bv - dv, txA = cx + bu - du;
                    const int tyB = cy + bv + dv, txB = cx + bu + du;
                    if (tyA < 0 || tyA >= lv.h || txA < 0 || txA >= lv.w || tyB < 0 || tyB >= lv.h || txB < 0 ||
                        txB >= lv.w)
                        return;
                    const double cA = detail::descriptor_cost(da, db, lv.h, lv.w, y, x, tyA, txA);
                    const double cB = detail::descriptor_cost(da, db, lv.h, lv.w, y, x, tyB, txB);
                    const double den = cA - 2 * best_raw + cB;
                    if (den > 1e-12) s = std::clamp(0.5 * (cA - cB) / den, -0.5, 0.5);
                };
                refine(1, 0, sx);
                refine(0, 1, sy2);
                dx[static_cast<size_t>(y) * lv.w + x] = std::lround(ix) + bu + sx;
                dy[static_cast<size_t>(y) * lv.w + x] = std::lround(iy) + bv + sy2;
            }
        detail::median3(dx, lv.h, lv.w);
        detail::median3(dy, lv.h, lv.w);
        fdx = std::move(dx);
        fdy = std::move(dy);
        fh = lv.h;
        fw = lv.w;
    }

    field.dx = std::move(fdx);
    field.dy = std::move(fdy);
    for (int y = 0; y < field.height; ++y)
        for (int x = 0; x < field.width; ++x) {
            const double tx = x + field.dx[static_cast<size_t>(y) * field.width + x];
            const double ty = y + field.dy[static_cast<size_t>(y) * field.width + x];
            field.valid[static_cast<size_t>(y) * field.width + x] =
                (tx >= 0 && tx <= field.width - 1 && ty >= 0 && ty <= field.height - 1) ? 1 : 0;
        }
    return field;
}

// Mean L2 displacement magnitude over valid pixels.
inline double local_distortion(const DisplacementField& field) {
    double acc = 0;
    std::int64_t n = 0;
    for (size_t i = 0; i < field.dx.size(); ++i)
        if (field.valid[i]) {
            acc += std::sqrt(field.dx[i] * field.dx[i] + field.dy[i] * field.dy[i]);
            ++n;
        }
    require(n > 0, "local_distortion: no valid pixels");
    return acc / static_cast<double>(n);
}

// Restricted to pixels outside the black-region mask.
inline double local_distortion_masked(const DisplacementField& field, const ValidityMask& black_mask) {
    require(black_mask.height == field.height && black_mask.width == field.width,
            "local_distortion_masked: mask extents mismatch");
    double acc = 0;
    std::int64_t n = 0;
    for (int y = 0; y < field.height; ++y)
        for (int x = 0; x < field.width; ++x) {
            const size_t i = static_cast<size_t>(y) * field.width + x;
            if (!field.valid[i] || black_mask.at(y, x)) continue;
            acc += std::sqrt(field.dx[i] * field.dx[i] + field.dy[i] * field.dy[i]);
            ++n;
        }
    require(n > 0, "local_distortion_masked: empty valid set");
    return acc / static_cast<double>(n);
}

// --- edit distance / CER -----------------------------------------------

struct EditCounts {
    int total = 0;
    int deletions = 0;     // reference characters absent from the hypothesis
    int insertions = 0;    // extra characters present in the hypothesis
    int substitutions = 0;
};

namespace detail {

inline std::vector<char32_t> decode_utf8(const std::string& s) {
    std::vector<char32_t> out;
    size_t i = 0;
    while (i < s.size()) {
        const unsigned char c = static_cast<unsigned char>(s[i]);
        char32_t cp;
        int extra;
        if (c < 0x80) {
            cp = c;
            extra = 0;
        } else if ((c >> 5) == 0x6) {
            cp = c & 0x1f;
            extra = 1;
        } else if ((c >> 4) == 0xe) {
            cp = c & 0x0f;
            extra = 2;
        } else if ((c >> 3) == 0x1e) {
            cp = c & 0x07;
            extra = 3;
        } else {
            cp = 0xfffd;
            extra = 0;
        }
        for (int k = 0; k < extra; ++k) {
            ++i;
            if (i >= s.size()) break;
            cp = (cp << 6) | (static_cast<unsigned char>(s[i]) & 0x3f);
        }
        out.push_back(cp);
        ++i;
    }
    return out;
}

}  // namespace detail

// Levenshtein with unit costs plus one optimal op-count decomposition,
// recovered by backtrace. Ties broken substitution-first, then deletion.
inline EditCounts edit_distance(const std::string& reference, const std::string& hypothesis) {
    const auto r = detail::decode_utf8(reference);
    const auto h = detail::decode_utf8(hypothesis);
    const int nr = static_cast<int>(r.size()), nh = static_cast<int>(h.size());
    std::vector<int> dp(static_cast<size_t>(nr + 1) * (nh + 1));
    auto D = [&](int i, int j) -> int& { return dp[static_cast<size_t>(i) * (nh + 1) + j]; };
    for (int i = 0; i <= nr; ++i) D(i, 0) = i;
    for (int j = 0; j <= nh; ++j) D(0, j) = j;
    for (int i = 1; i <= nr; ++i)
        for (int j = 1; j <= nh; ++j) {
            const int sub = D(i - 1, j - 1) + (r[static_cast<size_t>(i - 1)] == h[static_cast<size_t>(j - 1)] ? 0 : 1);
            D(i, j) = std::min({sub, D(i - 1, j) + 1, D(i, j - 1) + 1});
        }
    EditCounts c;
    c.total = D(nr, nh);
    int i = nr, j = nh;
    while (i > 0 || j > 0) {
        if (i > 0 && j > 0) {
            const bool match = r[static_cast<size_t>(i - 1)] == h[static_cast<size_t>(j - 1)];
            if (D(i, j) == D(i - 1, j - 1) + (match ? 0 : 1)) {
                if (!match) c.substitutions++;
                --i;
                --j;
                continue;
            }
        }
        if (i > 0 && D(i, j) == D(i - 1, j) + 1) {
            c.deletions++;
            --i;
        } else {
            c.insertions++;
            --j;
        }
    }
    return c;
}

// (d + i + s) / reference character count; may exceed 1.
inline double cer(const std::string& reference, const std::string& hypothesis) {
    const auto r = detail::decode_utf8(reference);
    require(!r.empty(), "cer: empty reference string");
    const EditCounts c = edit_distance(reference, hypothesis);
    return static_cast<double>(c.deletions + c.insertions + c.substitutions) / static_cast<double>(r.size());
}

// --- pair / set evaluation ---------------------------------------------

struct EvalPair {
    std::string id;
    ImageRaster rectified;
    ImageRaster gt;
    std::optional<ValidityMask> validity;
    std::optional<std::pair<std::string, std::string>> text;  // reference, hypothesis
};

struct MetricRow {
    std::string id;
    double mssim = 0, mssim_m = 0;
    double ld = -1, ld_m = -1;  // -1: matcher declared the pair degenerate
    int ed = -1;
    double cer_value = -1;
    bool has_text = false;
    bool ld_ok = false;
};

struct MetricReport {
    std::vector<MetricRow> rows;
    double mean_mssim = 0, mean_mssim_m = 0, mean_ld = 0, mean_ld_m = 0, mean_ed = 0, mean_cer = 0;
    int count_images = 0, count_ld = 0, count_text = 0;
};

inline MetricRow evaluate_pair(const EvalPair& pair) {
    MetricRow row;
    row.id = pair.id;
    ImageRaster gt_aligned = resize_bilinear(pair.gt, pair.rectified.height, pair.rectified.width);
    ValidityMask black = black_region_mask(pair.rectified, pair.validity ? &*pair.validity : nullptr);

    ImageRaster rect_p = protocol_resize(pair.rectified);
    row.mssim = msssim(rect_p, protocol_resize(gt_aligned));

    ImageRaster gt_masked = gt_aligned;
    for (int y = 0; y < gt_masked.height; ++y)
        for (int x = 0; x < gt_masked.width; ++x)
            if (black.at(y, x))
                for (int c = 0; c < gt_masked.channels; ++c) gt_masked.at(y, x, c) = 0.0;
    row.mssim_m = msssim(rect_p, protocol_resize(gt_masked));

    DisplacementField field = dense_match(protocol_resize(gt_aligned), rect_p);
    bool any_valid = false;
    for (auto v : field.valid)
        if (v) {
            any_valid = true;
            break;
        }
    if (any_valid) {
        row.ld = local_distortion(field);
        // nearest-neighbor transfer of the black mask to protocol extents
        ValidityMask black_p(field.height, field.width);
        for (int y = 0; y < field.height; ++y)
            for (int x = 0; x < field.width; ++x) {
                const int sy = std::min(black.height - 1, y * black.height / field.height);
                const int sx = std::min(black.width - 1, x * black.width / field.width);
                black_p.set(y, x, black.at(sy, sx));
            }
        bool any_unmasked = false;
        for (int y = 0; y < field.height && !any_unmasked; ++y)
            for (int x = 0; x < field.width; ++x)
                if (field.valid[static_cast<size_t>(y) * field.width + x] && !black_p.at(y, x)) {
                    any_unmasked = true;
                    break;
                }
        row.ld_m = any_unmasked ? local_distortion_masked(field, black_p) : row.ld;
        row.ld_ok = true;
    }

    if (pair.text) {
        row.has_text = true;
        row.ed = edit_distance(pair.text->first, pair.text->second).total;
        row.cer_value = cer(pair.text->first, pair.text->second);
    }
    return row;
}

inline MetricReport aggregate_rows(std::vector<MetricRow> rows) {
    MetricReport rep;
    rep.rows = std::move(rows);
    for (const auto& row : rep.rows) {
        rep.mean_mssim += row.mssim;
        rep.mean_mssim_m += row.mssim_m;
        rep.count_images++;
        if (row.ld_ok) {
            rep.mean_ld += row.ld;
            rep.mean_ld_m += row.ld_m;
            rep.count_ld++;
        }
        if (row.has_text) {
            rep.mean_ed += row.ed;
            rep.mean_cer += row.cer_value;
            rep.count_text++;
        }
    }
    if (rep.count_images) {
        rep.mean_mssim /= rep.count_images;
        rep.mean_mssim_m /= rep.count_images;
    }
    if (rep.count_ld) {
        rep.mean_ld /= rep.count_ld;
        rep.mean_ld_m /= rep.count_ld;
    }
    if (rep.count_text) {
        rep.mean_ed /= rep.count_text;
        rep.mean_cer /= rep.count_text;
    }
    return rep;
}

// Pairs evaluated independently (optionally in parallel); the reduce runs in
// index order so aggregate rounding is reproducible.
inline MetricReport evaluate_set(const std::vector<EvalPair>& pairs, int jobs = 1) {
    require(!pairs.empty(), "evaluate_set: no pairs");
    std::vector<MetricRow> rows(pairs.size());
    if (jobs <= 1) {
        for (size_t i = 0; i < pairs.size(); ++i) rows[i] = evaluate_pair(pairs[i]);
    } else {
        std::atomic<size_t> next{0};
        std::vector<std::thread> pool;
        for (int t = 0; t < jobs; ++t)
            pool.emplace_back([&]() {
                size_t i;
                while ((i = next.fetch_add(1)) < pairs.size()) rows[i] = evaluate_pair(pairs[i]);
            });
        for (auto& th : pool) th.join();
    }
    return aggregate_rows(std::move(rows));
}

inline void write_report_csv(const MetricReport& rep, const std::string& path) {
    std::ofstream f(path);
    require(f.good(), "write_report_csv: cannot open " + path);
    f << "id,mssim,mssim_m,ld,ld_m,ed,cer\n";
    for (const auto& row : rep.rows) {
        f << row.id << "," << row.mssim << "," << row.mssim_m << ",";
        if (row.ld_ok)
            f << row.ld << "," << row.ld_m;
        else
            f << ",";
        f << ",";
        if (row.has_text)
            f << row.ed << "," << row.cer_value;
        else
            f << ",";
        f << "\n";
    }
    require(f.good(), "write_report_csv: write failed");
}

inline void write_report_json(const MetricReport& rep, const std::string& path) {
    nlohmann::json means = {{"mssim", rep.mean_mssim}, {"mssim_m", rep.mean_mssim_m}};
    means["ld"] = rep.count_ld ? nlohmann::json(rep.mean_ld) : nlohmann::json();
    means["ld_m"] = rep.count_ld ? nlohmann::json(rep.mean_ld_m) : nlohmann::json();
    means["ed"] = rep.count_text ? nlohmann::json(rep.mean_ed) : nlohmann::json();
    means["cer"] = rep.count_text ? nlohmann::json(rep.mean_cer) : nlohmann::json();
    nlohmann::json j = {{"means", means},
                        {"counts",
                         {{"images", rep.count_images}, {"ld", rep.count_ld}, {"text", rep.count_text}}}};
    std::ofstream f(path);
    require(f.good(), "write_report_json: cannot open " + path);
    f << j.dump(2) << "\n";
}

}  // namespace unwarp
