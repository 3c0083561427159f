#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <mutex>
#include <thread>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "unwarp/common.hpp"
#include "unwarp/flow.hpp"
#include "unwarp/image.hpp"

namespace unwarp {

inline constexpr int kGeneratorVersion = 1;

enum class CropCategory { Complete, Partial, None };

inline const char* category_name(CropCategory c) {
    switch (c) {
        case CropCategory::Complete: return "complete";
        case CropCategory::Partial: return "partial";
        default: return "none";
    }
}

inline CropCategory category_from_name(const std::string& s) {
    if (s == "complete") return CropCategory::Complete;
    if (s == "partial") return CropCategory::Partial;
    require(s == "none", "unknown crop category '" + s + "'");
    return CropCategory::None;
}

// Analytic distortion: a near-identity homography plus per-axis sinusoids,
// mapping rectified coordinates to distorted ones.
struct DistortionParams {
    // homography in normalized canvas coordinates, row-major 3x3
    std::array<double, 9> hom{1, 0, 0, 0, 1, 0, 0, 0, 1};
    struct Sinusoid {
        double amplitude;  // px
        double fx, fy;     // cycles/px
        double phase;
    };
    std::vector<Sinusoid> sin_u, sin_v;
    int background_style = 0;
    std::uint64_t seed = 0;

    void validate(int h, int w) const {
        double su = 0, sv = 0;
        for (const auto& s : sin_u) su += std::abs(s.amplitude);
        for (const auto& s : sin_v) sv += std::abs(s.amplitude);
        const double lim = 0.08 * std::min(h, w);
        require(su <= lim && sv <= lim, "DistortionParams: sinusoid amplitude sum exceeds bijection bound");
        require(sin_u.size() <= 6 && sin_v.size() <= 6, "DistortionParams: at most 6 sinusoids per axis");
    }
};

struct DocumentRender {
    ImageRaster image;          // RGB canvas
    ImageRaster mask;           // 1-channel, 1 inside the page
    int page_x0, page_y0, page_x1, page_y1;  // inclusive page rect
    int text_x0, text_x1;       // column range of the text body
    std::vector<int> bar_rows;  // representative rows inside text-line bars
    std::vector<int> gap_rows;  // representative rows between bars
};

// Flat page on a textured background: dark text-line bars with random
// heights/gaps, occasional ruled lines and block figures. Deterministic per seed.
inline DocumentRender render_document(std::uint64_t seed, int h, int w) {
    require(h >= 64 && w >= 64, "render_document: extents must be >= 64");
    std::mt19937_64 rng(seed);
    auto uni = [&rng](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
    auto unii = [&rng](int a, int b) { return std::uniform_int_distribution<int>(a, b)(rng); };

    DocumentRender r;
    r.image = ImageRaster(h, w, 3);
    r.mask = ImageRaster(h, w, 1);

    // background
    const int style = unii(0, 2);
    switch (style) {
        case 0: {  // flat dark
            const double v = uni(0.05, 0.25);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    for (int c = 0; c < 3; ++c) r.image.at(y, x, c) = v;
            break;
        }
        case 1: {  // smooth blotchy texture (noise on a coarse grid, interpolated)
            const double base = uni(0.1, 0.3);
            const int cell = 16;
            const int gh = h / cell + 2, gw = w / cell + 2;
            std::vector<double> grid(static_cast<size_t>(gh) * gw);
            for (auto& v : grid) v = clamp01(base + uni(-0.08, 0.08));
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const double gy = static_cast<double>(y) / cell, gx = static_cast<double>(x) / cell;
                    const int iy = static_cast<int>(gy), ix = static_cast<int>(gx);
                    const double fy = gy - iy, fx = gx - ix;
                    const double v = grid[static_cast<size_t>(iy) * gw + ix] * (1 - fy) * (1 - fx) +
                                     grid[static_cast<size_t>(iy) * gw + ix + 1] * (1 - fy) * fx +
                                     grid[static_cast<size_t>(iy + 1) * gw + ix] * fy * (1 - fx) +
                                     grid[static_cast<size_t>(iy + 1) * gw + ix + 1] * fy * fx;
                    for (int c = 0; c < 3; ++c) r.image.at(y, x, c) = v;
                }
            break;
        }
        default: {  // gradient
            const double a = uni(0.05, 0.2), b = uni(0.25, 0.45);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const double t = (static_cast<double>(x) / (w - 1) + static_cast<double>(y) / (h - 1)) / 2;
                    for (int c = 0; c < 3; ++c) r.image.at(y, x, c) = a + (b - a) * t;
                }
        }
    }

    // page placement; area fraction kept within [0.5, 0.9]
    const int pw = static_cast<int>(std::lround(uni(0.72, 0.82) * w));
    const int ph = static_cast<int>(std::lround(uni(0.72, 0.82) * h));
    const int border_x = std::max(2, w / 24), border_y = std::max(2, h / 24);
    r.page_x0 = unii(border_x, w - pw - border_x);
    r.page_y0 = unii(border_y, h - ph - border_y);
    r.page_x1 = r.page_x0 + pw - 1;
    r.page_y1 = r.page_y0 + ph - 1;
    const double page_white = uni(0.94, 0.99);
    for (int y = r.page_y0; y <= r.page_y1; ++y)
        for (int x = r.page_x0; x <= r.page_x1; ++x) {
            for (int c = 0; c < 3; ++c) r.image.at(y, x, c) = page_white;
            r.mask.at(y, x, 0) = 1.0;
        }

    // text body with horizontal bars; ruled lines and block figures interleaved
    const int margin_x = std::max(3, pw / 12);
    const int margin_y = std::max(3, ph / 12);
    r.text_x0 = r.page_x0 + margin_x;
    r.text_x1 = r.page_x1 - margin_x;
    int y = r.page_y0 + margin_y;
    const int y_end = r.page_y1 - margin_y;
    while (y < y_end) {
        const int kind = unii(0, 9);  // 0-6 text bar, 7 ruled line, 8 figure, 9 wide gap
        if (kind <= 6) {
            const int bar_h = unii(2, std::max(2, ph / 24));
            if (y + bar_h > y_end) break;
            const double ink = uni(0.1, 0.35);
            const int x_right = r.text_x0 + static_cast<int>((r.text_x1 - r.text_x0) * uni(0.55, 1.0));
            for (int yy = y; yy < y + bar_h; ++yy)
                for (int x = r.text_x0; x <= x_right; ++x)
                    for (int c = 0; c < 3; ++c) r.image.at(yy, x, c) = ink;
            // only rows whose center stays dark after band-limiting
            if (bar_h >= 3) r.bar_rows.push_back(y + bar_h / 2);
            y += bar_h;
        } else if (kind == 7) {
            if (y + 1 > y_end) break;
            for (int x = r.text_x0; x <= r.text_x1; ++x)
                for (int c = 0; c < 3; ++c) r.image.at(y, x, c) = 0.4;
            y += 1;
        } else if (kind == 8) {
            const int fig_h = unii(ph / 12, ph / 6);
            if (y + fig_h > y_end) break;
            const int fig_w = unii(pw / 6, pw / 3);
            const int fx0 = unii(r.text_x0, std::max(r.text_x0, r.text_x1 - fig_w));
            const double shade = uni(0.3, 0.7);
            for (int yy = y; yy < y + fig_h; ++yy)
                for (int x = fx0; x < std::min(fx0 + fig_w, r.text_x1 + 1); ++x) {
                    r.image.at(yy, x, 0) = shade;
                    r.image.at(yy, x, 1) = clamp01(shade + 0.1);
                    r.image.at(yy, x, 2) = clamp01(shade - 0.1);
                }
            y += fig_h;
        }
        const int gap_h = unii(2, std::max(2, ph / 20)) + (kind == 9 ? ph / 10 : 0);
        if (gap_h >= 5 && y + gap_h <= y_end) r.gap_rows.push_back(y + gap_h / 2);
        y += gap_h;
    }

    // band-limit the canvas so later resampling stays faithful
    auto blur_pass = [&](bool horizontal) {
        static const double k[5] = {1 / 16.0, 4 / 16.0, 6 / 16.0, 4 / 16.0, 1 / 16.0};
        ImageRaster tmp = r.image;
        for (int yy = 0; yy < h; ++yy)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c) {
                    double acc = 0;
                    for (int o = -2; o <= 2; ++o) {
                        const int sy = horizontal ? yy : std::clamp(yy + o, 0, h - 1);
                        const int sx = horizontal ? std::clamp(x + o, 0, w - 1) : x;
                        acc += k[o + 2] * r.image.at(sy, sx, c);
                    }
                    tmp.at(yy, x, c) = acc;
                }
        r.image = std::move(tmp);
    };
    blur_pass(true);
    blur_pass(false);
    return r;
}

namespace detail {

// forward analytic map: rectified pixel -> distorted coordinate
inline void apply_distortion(const DistortionParams& p, int h, int w, double x, double y, double& dx,
                             double& dy) {
    // homography in normalized coordinates
    const double nx = x / (w - 1), ny = y / (h - 1);
    const double den = p.hom[6] * nx + p.hom[7] * ny + p.hom[8];
    double hx = (p.hom[0] * nx + p.hom[1] * ny + p.hom[2]) / den;
    double hy = (p.hom[3] * nx + p.hom[4] * ny + p.hom[5]) / den;
    dx = hx * (w - 1);
    dy = hy * (h - 1);
    for (const auto& s : p.sin_u) dx += s.amplitude * std::sin(2 * 3.14159265358979323846 * (s.fx * x + s.fy * y) + s.phase);
    for (const auto& s : p.sin_v) dy += s.amplitude * std::sin(2 * 3.14159265358979323846 * (s.fx * x + s.fy * y) + s.phase);
}

}  // namespace detail

struct DistortionResult {
    ImageRaster distorted;
    WarpFlow full_flow;   // rectified grid -> distorted coordinates
    ImageRaster doc_mask; // document mask transported into the distorted image
};

// Renders the distorted image by numerically inverting the analytic map per
// pixel (fixed-point iteration) and sampling the flat raster; full_flow holds
// the analytic map on the rectified grid.
inline DistortionResult generate_distortion(const ImageRaster& flat, const ImageRaster& flat_mask,
                                            const DistortionParams& params) {
    const int h = flat.height, w = flat.width;
    params.validate(h, w);
    DistortionResult out;
    out.full_flow = WarpFlow(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double dx, dy;
            detail::apply_distortion(params, h, w, x, y, dx, dy);
            out.full_flow.u(y, x) = dx;
            out.full_flow.v(y, x) = dy;
        }

    // invert F per distorted pixel: find p with F(p) = q
    WarpFlow inverse(h, w);
    std::int64_t failures = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double px = x, py = y;
            bool converged = false;
            for (int it = 0; it < 50; ++it) {
                double fx, fy;
                detail::apply_distortion(params, h, w, px, py, fx, fy);
                const double ex = fx - x, ey = fy - y;
                px -= ex;
                py -= ey;
                if (std::abs(ex) < 1e-3 && std::abs(ey) < 1e-3) {
                    converged = true;
                    break;
                }
            }
            if (!converged) ++failures;
            inverse.u(y, x) = px;
            inverse.v(y, x) = py;
        }
    require(failures <= static_cast<std::int64_t>(0.001 * h * w),
            "generate_distortion: fixed-point inversion failed on " + std::to_string(failures) + " pixels");

    out.distorted = warp(flat, inverse, 0.0).first;
    ImageRaster mask_w = warp(flat_mask, inverse, 0.0).first;
    out.doc_mask = ImageRaster(h, w, 1);
    for (size_t i = 0; i < mask_w.data.size(); ++i) out.doc_mask.data[i] = mask_w.data[i] >= 0.5 ? 1.0 : 0.0;
    return out;
}

// Draws distortion parameters of bounded strength.
inline DistortionParams draw_distortion_params(std::uint64_t seed, int h, int w, double strength = 1.0) {
    std::mt19937_64 rng(seed);
    auto uni = [&rng](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
    DistortionParams p;
    p.seed = seed;
    const double m = std::min(h, w);
    // near-identity homography: mild affine part plus a touch of perspective
    p.hom = {1 + uni(-0.02, 0.02) * strength, uni(-0.02, 0.02) * strength, uni(-0.02, 0.02) * strength,
             uni(-0.02, 0.02) * strength, 1 + uni(-0.02, 0.02) * strength, uni(-0.02, 0.02) * strength,
             uni(-0.03, 0.03) * strength, uni(-0.03, 0.03) * strength, 1.0};
    const int k = std::uniform_int_distribution<int>(2, 4)(rng);
    double budget = 0.05 * m * strength;
    for (int axis = 0; axis < 2; ++axis) {
        auto& dst = axis == 0 ? p.sin_u : p.sin_v;
        double left = budget;
        for (int i = 0; i < k; ++i) {
            DistortionParams::Sinusoid s;
            s.amplitude = uni(0.2, 1.0) * left / (k - i);
            left -= std::abs(s.amplitude);
            const double freq = uni(0.5, 1.8) / m;
            const double ang = uni(0, 2 * 3.14159265358979323846);
            s.fx = freq * std::cos(ang);
            s.fy = freq * std::sin(ang);
            s.phase = uni(0, 2 * 3.14159265358979323846);
            dst.push_back(s);
        }
    }
    p.background_style = static_cast<int>(seed % 3);
    return p;
}

// Category test for a crop against the distorted document mask.
inline bool crop_matches_category(const ImageRaster& mask, const CropRect& crop, CropCategory cat) {
    const int h = mask.height, w = mask.width;
    const int cx0 = crop.origin_x, cy0 = crop.origin_y;
    const int cx1 = crop.origin_x + crop.width - 1, cy1 = crop.origin_y + crop.height - 1;
    if (cx0 < 0 || cy0 < 0 || cx1 >= w || cy1 >= h) return false;
    switch (cat) {
        case CropCategory::Complete: {
            // every mask pixel strictly inside the crop with >= 2 px margin
            bool any = false;
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    if (mask.at(y, x, 0) > 0.5) {
                        any = true;
                        if (x < cx0 + 2 || x > cx1 - 2 || y < cy0 + 2 || y > cy1 - 2) return false;
                    }
            return any;
        }
        case CropCategory::Partial: {
            bool has_true = false, has_false = false;
            for (int y = cy0; y <= cy1 && !(has_true && has_false); ++y)
                for (int x = cx0; x <= cx1; ++x)
                    (mask.at(y, x, 0) > 0.5 ? has_true : has_false) = true;
            return has_true && has_false;
        }
        default: {
            // every pixel of the crop expanded by 2 px lies inside the mask
            if (cx0 - 2 < 0 || cy0 - 2 < 0 || cx1 + 2 >= w || cy1 + 2 >= h) return false;
            for (int y = cy0 - 2; y <= cy1 + 2; ++y)
                for (int x = cx0 - 2; x <= cx1 + 2; ++x)
                    if (mask.at(y, x, 0) <= 0.5) return false;
            return true;
        }
    }
}

// Rejection-samples a crop rectangle of the requested boundary category.
// Throws after 1000 failed attempts (caller regenerates the distortion).
inline CropRect sample_crop(const ImageRaster& doc_mask_distorted, CropCategory category, std::uint64_t seed) {
    const int h = doc_mask_distorted.height, w = doc_mask_distorted.width;
    bool nonempty = false;
    for (double v : doc_mask_distorted.data)
        if (v > 0.5) {
            nonempty = true;
            break;
        }
    require(nonempty, "sample_crop: document mask is empty");
    std::mt19937_64 rng(seed);
    auto unii = [&rng](int a, int b) { return std::uniform_int_distribution<int>(a, b)(rng); };
    for (int attempt = 0; attempt < 1000; ++attempt) {
        const int cw = std::max(32, unii(static_cast<int>(0.35 * w), static_cast<int>(0.95 * w)));
        const int ch = std::max(32, unii(static_cast<int>(0.35 * h), static_cast<int>(0.95 * h)));
        if (cw > w - 2 || ch > h - 2) continue;
        CropRect crop{unii(1, w - cw - 1), unii(1, h - ch - 1), cw, ch};
        if (crop_matches_category(doc_mask_distorted, crop, category)) return crop;
    }
    throw std::runtime_error("sample_crop: no crop of category '" + std::string(category_name(category)) +
                             "' found in 1000 attempts");
}

struct SampleRecord {
    int id = 0;
    std::string image_file;
    std::string flow_file;
    CropCategory category = CropCategory::Complete;
    CropRect crop;
    std::uint64_t seed = 0;
    int generator_version = kGeneratorVersion;
};

struct DatasetOptions {
    int n = 30;
    int out_h = 64, out_w = 64;
    std::array<double, 3> category_mix{1.0 / 3, 1.0 / 3, 1.0 / 3};  // complete, partial, none
    std::uint64_t seed = 1;
    int canvas_scale = 3;          // canvas extent = canvas_scale * sample extent
    bool sentinel_flow = false;    // overwrite out-of-image flow targets with -1
    double distortion_strength = 1.0;
    int jobs = 1;
};

struct GeneratedSample {
    ImageRaster image;   // distorted crop at canonical size
    WarpFlow flow;       // ground truth at canonical size, canonical pixel units
    CropCategory category;
    CropRect crop;
    std::uint64_t seed;
};

// One training sample: render, distort, crop, compose and validate its flow.
// Retries internally with fresh sub-seeds on infeasible geometry.
inline GeneratedSample generate_sample(std::uint64_t sample_seed, CropCategory category,
                                       const DatasetOptions& opt) {
    const int canvas_h = opt.out_h * opt.canvas_scale;
    const int canvas_w = opt.out_w * opt.canvas_scale;
    for (int attempt = 0; attempt < 32; ++attempt) {
        const std::uint64_t s = derive_seed(sample_seed, static_cast<std::uint64_t>(attempt));
        try {
            DocumentRender doc = render_document(derive_seed(s, 1), canvas_h, canvas_w);
            DistortionParams params =
                draw_distortion_params(derive_seed(s, 2), canvas_h, canvas_w, opt.distortion_strength);
            DistortionResult dist = generate_distortion(doc.image, doc.mask, params);
            CropRect crop = sample_crop(dist.doc_mask, category, derive_seed(s, 3));

            WarpFlow flow = compose_crop_flow(dist.full_flow, crop, opt.out_h, opt.out_w);
            rescale_flow_coords(flow, crop.width, crop.height, opt.out_w, opt.out_h);

            // crop + resize the distorted image to the canonical extents
            ImageRaster crop_img(crop.height, crop.width, 3);
            for (int y = 0; y < crop.height; ++y)
                for (int x = 0; x < crop.width; ++x)
                    for (int c = 0; c < 3; ++c)
                        crop_img.at(y, x, c) = dist.distorted.at(crop.origin_y + y, crop.origin_x + x, c);
            ImageRaster sample_img = resize_bilinear(crop_img, opt.out_h, opt.out_w);

            // write-time consistency oracle: warping the stored crop with the
            // stored flow must reproduce the rectified full-image content
            auto bbox = crop_flow_bbox(dist.full_flow, crop);
            ImageRaster rect_full = warp(dist.distorted, dist.full_flow, 0.0).first;
            const int bw = bbox[2] - bbox[0] + 1, bh = bbox[3] - bbox[1] + 1;
            ImageRaster ref_box(bh, bw, 3);
            for (int y = 0; y < bh; ++y)
                for (int x = 0; x < bw; ++x)
                    for (int c = 0; c < 3; ++c) ref_box.at(y, x, c) = rect_full.at(bbox[1] + y, bbox[0] + x, c);
            ImageRaster ref = resize_bilinear(ref_box, opt.out_h, opt.out_w);
            auto [rect_sample, mask] = warp(sample_img, flow, 0.0);
            double err = 0;
            std::int64_t cnt = 0;
            for (int y = 1; y < opt.out_h - 1; ++y)
                for (int x = 1; x < opt.out_w - 1; ++x) {
                    bool interior = true;
                    for (int dy2 = -1; dy2 <= 1 && interior; ++dy2)
                        for (int dx2 = -1; dx2 <= 1; ++dx2)
                            if (!mask.at(y + dy2, x + dx2)) {
                                interior = false;
                                break;
                            }
                    if (!interior) continue;
                    for (int c = 0; c < 3; ++c) err += std::abs(rect_sample.at(y, x, c) - ref.at(y, x, c));
                    cnt += 3;
                }
            if (cnt > 0 && err / cnt > 2e-2)
                throw std::runtime_error("consistency oracle failed: mean err " + std::to_string(err / cnt));

            if (opt.sentinel_flow) {
                for (size_t i = 0; i < flow.u_map.size(); ++i) {
                    const bool outside = flow.u_map[i] < -0.5 || flow.u_map[i] > opt.out_w - 0.5 ||
                                         flow.v_map[i] < -0.5 || flow.v_map[i] > opt.out_h - 0.5;
                    if (outside) {
                        flow.u_map[i] = -1.0;
                        flow.v_map[i] = -1.0;
                    }
                }
            } else {
                // continuity bound between 4-neighbors
                for (int y = 0; y < opt.out_h; ++y)
                    for (int x = 0; x + 1 < opt.out_w; ++x)
                        if (std::abs(flow.u(y, x + 1) - flow.u(y, x)) >= 10 ||
                            std::abs(flow.v(y, x + 1) - flow.v(y, x)) >= 10)
                            throw std::runtime_error("flow continuity bound violated");
                for (int y = 0; y + 1 < opt.out_h; ++y)
                    for (int x = 0; x < opt.out_w; ++x)
                        if (std::abs(flow.u(y + 1, x) - flow.u(y, x)) >= 10 ||
                            std::abs(flow.v(y + 1, x) - flow.v(y, x)) >= 10)
                            throw std::runtime_error("flow continuity bound violated");
            }

            return GeneratedSample{std::move(sample_img), std::move(flow), category, crop, s};
        } catch (const std::exception&) {
            if (attempt == 31) throw;
        }
    }
    throw std::runtime_error("generate_sample: exhausted retries");
}

// Quota allocation: exact per-category counts via largest remainder.
inline std::vector<CropCategory> allocate_categories(int n, const std::array<double, 3>& mix) {
    double sum = mix[0] + mix[1] + mix[2];
    require(std::abs(sum - 1.0) < 1e-6, "category mix fractions must sum to 1");
    std::array<int, 3> counts{};
    std::array<double, 3> rem{};
    int assigned = 0;
    for (int i = 0; i < 3; ++i) {
        const double exact = mix[i] * n;
        counts[i] = static_cast<int>(std::floor(exact + 1e-9));
        rem[i] = exact - counts[i];
        assigned += counts[i];
    }
    while (assigned < n) {
        int best = 0;
        for (int i = 1; i < 3; ++i)
            if (rem[i] > rem[best]) best = i;
        counts[best]++;
        rem[best] = -1;
        assigned++;
    }
    std::vector<CropCategory> cats;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < counts[i]; ++j) cats.push_back(static_cast<CropCategory>(i));
    return cats;
}

// Emits n samples as out_dir/{images/NNNNNN.ppm, flows/NNNNNN.wfl,
// manifest.jsonl}. Deterministic per seed. Returns the manifest path.
inline std::string build_dataset(const DatasetOptions& opt, const std::string& out_dir) {
    namespace fs = std::filesystem;
    require(opt.n >= 1, "build_dataset: n must be >= 1");
    fs::create_directories(fs::path(out_dir) / "images");
    fs::create_directories(fs::path(out_dir) / "flows");
    const auto cats = allocate_categories(opt.n, opt.category_mix);

    std::vector<SampleRecord> records(static_cast<size_t>(opt.n));
    auto run_one = [&](int i) {
        const std::uint64_t sub = derive_seed(opt.seed, static_cast<std::uint64_t>(i));
        GeneratedSample s = generate_sample(sub, cats[static_cast<size_t>(i)], opt);
        char name[32];
        std::snprintf(name, sizeof(name), "%06d", i);
        SampleRecord rec;
        rec.id = i;
        rec.image_file = std::string("images/") + name + ".ppm";
        rec.flow_file = std::string("flows/") + name + ".wfl";
        rec.category = s.category;
        rec.crop = s.crop;
        rec.seed = sub;
        write_ppm(s.image, (fs::path(out_dir) / rec.image_file).string());
        write_wfl(s.flow, (fs::path(out_dir) / rec.flow_file).string(), opt.sentinel_flow ? 1u : 0u);
        records[static_cast<size_t>(i)] = std::move(rec);
    };

    if (opt.jobs <= 1) {
        for (int i = 0; i < opt.n; ++i) run_one(i);
    } else {
        std::vector<std::thread> pool;
        std::atomic<int> next{0};
        std::atomic<bool> failed{false};
        std::string first_error;
        std::mutex err_mu;
        for (int t = 0; t < opt.jobs; ++t)
            pool.emplace_back([&]() {
                int i;
                while ((i = next.fetch_add(1)) < opt.n && !failed.load()) {
                    try {
                        run_one(i);
                    } catch (const std::exception& e) {
                        std::scoped_lock lk(err_mu);
                        failed = true;
                        if (first_error.empty()) first_error = e.what();
                    }
                }
            });
        for (auto& th : pool) th.join();
        require(!failed.load(), "build_dataset: " + first_error);
    }

    const std::string manifest_path = (fs::path(out_dir) / "manifest.jsonl").string();
    std::ofstream mf(manifest_path, std::ios::binary);
    require(mf.good(), "build_dataset: cannot write " + manifest_path);
    for (const auto& rec : records) {
        nlohmann::json row = {
            {"id", rec.id},
            {"image", rec.image_file},
            {"flow", rec.flow_file},
            {"category", category_name(rec.category)},
            {"crop", {{"x", rec.crop.origin_x}, {"y", rec.crop.origin_y}, {"w", rec.crop.width}, {"h", rec.crop.height}}},
            {"seed", rec.seed},
            {"generator_version", rec.generator_version},
        };
        mf << row.dump() << "\n";
    }
    require(mf.good(), "build_dataset: manifest write failed");
    return manifest_path;
}

inline std::vector<SampleRecord> read_manifest(const std::string& manifest_path) {
    std::ifstream f(manifest_path);
    require(f.good(), "read_manifest: cannot open " + manifest_path);
    std::vector<SampleRecord> records;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        SampleRecord rec;
        rec.id = j.at("id").get<int>();
        rec.image_file = j.at("image").get<std::string>();
        rec.flow_file = j.at("flow").get<std::string>();
        rec.category = category_from_name(j.at("category").get<std::string>());
        rec.crop = CropRect{j.at("crop").at("x").get<int>(), j.at("crop").at("y").get<int>(),
                            j.at("crop").at("w").get<int>(), j.at("crop").at("h").get<int>()};
        rec.seed = j.at("seed").get<std::uint64_t>();
        rec.generator_version = j.at("generator_version").get<int>();
        records.push_back(std::move(rec));
    }
    return records;
}

}  // namespace unwarp
