#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "unwarp/common.hpp"
#include "unwarp/image.hpp"

namespace unwarp {

// Dense backward map: for each output (rectified) pixel, the absolute source
// coordinate in the input image, pixel-center convention, origin at the
// center of pixel (0,0). Coordinates are unbounded and may point outside.
struct WarpFlow {
    int height = 0;
    int width = 0;
    std::vector<double> u_map;  // horizontal source coordinate
    std::vector<double> v_map;  // vertical source coordinate

    WarpFlow() = default;
    WarpFlow(int h, int w)
        : height(h), width(w), u_map(static_cast<size_t>(h) * w, 0.0), v_map(static_cast<size_t>(h) * w, 0.0) {
        require(h >= 1 && w >= 1, "WarpFlow: extents must be >= 1");
    }

    double& u(int y, int x) { return u_map[static_cast<size_t>(y) * width + x]; }
    double& v(int y, int x) { return v_map[static_cast<size_t>(y) * width + x]; }
    double u(int y, int x) const { return u_map[static_cast<size_t>(y) * width + x]; }
    double v(int y, int x) const { return v_map[static_cast<size_t>(y) * width + x]; }

    bool all_finite() const {
        for (double x : u_map)
            if (!std::isfinite(x)) return false;
        for (double x : v_map)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

// Crop rectangle in full-image pixel units.
struct CropRect {
    int origin_x = 0;
    int origin_y = 0;
    int width = 0;
    int height = 0;

    bool contains_coord(double u, double v) const {
        return u >= origin_x && u <= origin_x + width - 1 && v >= origin_y && v <= origin_y + height - 1;
    }
};

// Boolean raster over the rectified output; true where the flow's source
// lands inside the input with majority bilinear support.
struct ValidityMask {
    int height = 0;
    int width = 0;
    std::vector<unsigned char> data;

    ValidityMask() = default;
    ValidityMask(int h, int w, bool fill = false)
        : height(h), width(w), data(static_cast<size_t>(h) * w, fill ? 1 : 0) {}

    bool at(int y, int x) const { return data[static_cast<size_t>(y) * width + x] != 0; }
    void set(int y, int x, bool v) { data[static_cast<size_t>(y) * width + x] = v ? 1 : 0; }
    bool all_true() const {
        for (auto v : data)
            if (!v) return false;
        return true;
    }
};

inline WarpFlow identity_flow(int height, int width) {
    WarpFlow f(height, width);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            f.u(y, x) = x;
            f.v(y, x) = y;
        }
    return f;
}

// Bilinear backward warp. Corners outside the input contribute `fill`; the
// mask marks pixels with inside-weight >= 0.5.
inline std::pair<ImageRaster, ValidityMask> warp(const ImageRaster& input, const WarpFlow& flow,
                                                 double fill = 0.0) {
    require(flow.all_finite(), "warp: flow contains non-finite coordinates");
    ImageRaster out(flow.height, flow.width, input.channels);
    ValidityMask mask(flow.height, flow.width);
    for (int y = 0; y < flow.height; ++y)
        for (int x = 0; x < flow.width; ++x) {
            const double su = flow.u(y, x), sv = flow.v(y, x);
            const int x0 = static_cast<int>(std::floor(su)), y0 = static_cast<int>(std::floor(sv));
            const double fx = su - x0, fy = sv - y0;
            const double wgt[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
            const int cx[4] = {x0, x0 + 1, x0, x0 + 1};
            const int cy[4] = {y0, y0, y0 + 1, y0 + 1};
            double inside_w = 0.0;
            for (int c = 0; c < input.channels; ++c) {
                double acc = 0.0;
                for (int k = 0; k < 4; ++k) {
                    const bool inside = cx[k] >= 0 && cx[k] < input.width && cy[k] >= 0 && cy[k] < input.height;
                    if (c == 0) inside_w += inside ? wgt[k] : 0.0;
                    if (wgt[k] == 0.0) continue;
                    acc += wgt[k] * (inside ? input.at(cy[k], cx[k], c) : fill);
                }
                out.at(y, x, c) = acc;
            }
            mask.set(y, x, inside_w >= 0.5);
        }
    return {std::move(out), std::move(mask)};
}

// Validity of a flow against an input of the given extents, without warping.
inline ValidityMask flow_validity(const WarpFlow& flow, int in_h, int in_w) {
    ValidityMask mask(flow.height, flow.width);
    for (int y = 0; y < flow.height; ++y)
        for (int x = 0; x < flow.width; ++x) {
            const double su = flow.u(y, x), sv = flow.v(y, x);
            const int x0 = static_cast<int>(std::floor(su)), y0 = static_cast<int>(std::floor(sv));
            const double fx = su - x0, fy = sv - y0;
            const double wgt[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
            const int cx[4] = {x0, x0 + 1, x0, x0 + 1};
            const int cy[4] = {y0, y0, y0 + 1, y0 + 1};
            double inside_w = 0.0;
            for (int k = 0; k < 4; ++k)
                if (cx[k] >= 0 && cx[k] < in_w && cy[k] >= 0 && cy[k] < in_h) inside_w += wgt[k];
            mask.set(y, x, inside_w >= 0.5);
        }
    return mask;
}

namespace detail {

// Bilinear resample of one coordinate plane, half-pixel convention.
inline std::vector<double> resample_plane(const std::vector<double>& plane, int h, int w, int oh, int ow) {
    if (oh == h && ow == w) return plane;
    std::vector<double> out(static_cast<size_t>(oh) * ow);
    const double sy = static_cast<double>(h) / oh, sx = static_cast<double>(w) / ow;
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            const double yc = (y + 0.5) * sy - 0.5;
            const double xc = (x + 0.5) * sx - 0.5;
            // clamp the cell, not the coordinate: weights outside [0,1]
            // extrapolate linearly, keeping ramps (identity flows) exact
            const int y0 = std::clamp(static_cast<int>(std::floor(yc)), 0, std::max(0, h - 2));
            const int x0 = std::clamp(static_cast<int>(std::floor(xc)), 0, std::max(0, w - 2));
            const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
            const double fy = yc - y0, fx = xc - x0;
            auto P = [&](int yy, int xx) { return plane[static_cast<size_t>(yy) * w + xx]; };
            out[static_cast<size_t>(y) * ow + x] =
                (1 - fy) * ((1 - fx) * P(y0, x0) + fx * P(y0, x1)) + fy * ((1 - fx) * P(y1, x0) + fx * P(y1, x1));
        }
    return out;
}

}  // namespace detail

// Rescales coordinate values from one source-image scale to another, in the
// pixel-center frame: u' = (u + 0.5) * to / from - 0.5. Maps the identity
// flow at one scale onto the identity flow at the other exactly.
inline void rescale_flow_coords(WarpFlow& flow, int from_w, int from_h, int to_w, int to_h) {
    const double su = static_cast<double>(to_w) / from_w;
    const double sv = static_cast<double>(to_h) / from_h;
    for (auto& u : flow.u_map) u = (u + 0.5) * su - 0.5;
    for (auto& v : flow.v_map) v = (v + 0.5) * sv - 0.5;
}

// Resamples a network-scale flow to (out_h, out_w) and rescales its
// coordinates from the network input size to the original (src_h, src_w).
inline WarpFlow resize_flow(const WarpFlow& flow, int out_h, int out_w, int src_h, int src_w) {
    require(out_h >= 1 && out_w >= 1 && src_h >= 1 && src_w >= 1, "resize_flow: extents must be >= 1");
    WarpFlow out(out_h, out_w);
    out.u_map = detail::resample_plane(flow.u_map, flow.height, flow.width, out_h, out_w);
    out.v_map = detail::resample_plane(flow.v_map, flow.height, flow.width, out_h, out_w);
    rescale_flow_coords(out, flow.width, flow.height, src_w, src_h);
    return out;
}

// Reformulates a full-image ground-truth flow as the ground truth of a crop:
// collect the rectified pixels whose source lands inside the crop, take their
// bounding box (so the rectified target covers all of the crop's content),
// shift coordinates into crop-local units and resample to the output size.
// Pixels inside the box but outside the collected set keep shifted
// coordinates that point outside the crop; they become the black regions.
inline WarpFlow compose_crop_flow(const WarpFlow& full_flow, const CropRect& crop, int out_h, int out_w) {
    require(out_h >= 1 && out_w >= 1, "compose_crop_flow: output extents must be >= 1");
    int x0 = full_flow.width, y0 = full_flow.height, x1 = -1, y1 = -1;
    for (int y = 0; y < full_flow.height; ++y)
        for (int x = 0; x < full_flow.width; ++x)
            if (crop.contains_coord(full_flow.u(y, x), full_flow.v(y, x))) {
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
    require(x1 >= 0, "compose_crop_flow: crop contains no document-mapped content");
    const int bw = x1 - x0 + 1, bh = y1 - y0 + 1;
    std::vector<double> su(static_cast<size_t>(bh) * bw), sv(static_cast<size_t>(bh) * bw);
    for (int y = 0; y < bh; ++y)
        for (int x = 0; x < bw; ++x) {
            su[static_cast<size_t>(y) * bw + x] = full_flow.u(y0 + y, x0 + x) - crop.origin_x;
            sv[static_cast<size_t>(y) * bw + x] = full_flow.v(y0 + y, x0 + x) - crop.origin_y;
        }
    WarpFlow out(out_h, out_w);
    out.u_map = detail::resample_plane(su, bh, bw, out_h, out_w);
    out.v_map = detail::resample_plane(sv, bh, bw, out_h, out_w);
    return out;
}

// Bounding box of rectified-full pixels mapping into the crop; exposed for
// consistency checks against the full-image warp.
inline std::array<int, 4> crop_flow_bbox(const WarpFlow& full_flow, const CropRect& crop) {
    int x0 = full_flow.width, y0 = full_flow.height, x1 = -1, y1 = -1;
    for (int y = 0; y < full_flow.height; ++y)
        for (int x = 0; x < full_flow.width; ++x)
            if (crop.contains_coord(full_flow.u(y, x), full_flow.v(y, x))) {
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
    require(x1 >= 0, "crop_flow_bbox: crop contains no document-mapped content");
    return {x0, y0, x1, y1};
}

// Mean absolute difference over all 2*H*W coordinate entries.
inline double flow_l1(const WarpFlow& pred, const WarpFlow& gt) {
    require(pred.height == gt.height && pred.width == gt.width,
            "flow_l1: extent mismatch " + std::to_string(pred.height) + "x" + std::to_string(pred.width) + " vs " +
                std::to_string(gt.height) + "x" + std::to_string(gt.width));
    double acc = 0.0;
    for (size_t i = 0; i < pred.u_map.size(); ++i) acc += std::abs(pred.u_map[i] - gt.u_map[i]);
    for (size_t i = 0; i < pred.v_map.size(); ++i) acc += std::abs(pred.v_map[i] - gt.v_map[i]);
    return acc / (2.0 * pred.u_map.size());
}

// --- .wfl file format --------------------------------------------------
// 16-byte header: magic "WFL1", u32 LE height, width, flags; then row-major
// f32 LE u-plane, then v-plane. Round-trips bit-exactly at f32 precision.

inline void write_wfl(const WarpFlow& flow, const std::string& path, std::uint32_t flags = 0) {
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "write_wfl: cannot open " + path);
    auto put_u32 = [&f](std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
        f.write(reinterpret_cast<const char*>(b), 4);
    };
    f.write("WFL1", 4);
    put_u32(static_cast<std::uint32_t>(flow.height));
    put_u32(static_cast<std::uint32_t>(flow.width));
    put_u32(flags);
    auto put_plane = [&](const std::vector<double>& plane) {
        std::vector<float> buf(plane.size());
        for (size_t i = 0; i < plane.size(); ++i) buf[i] = static_cast<float>(plane[i]);
        static_assert(sizeof(float) == 4);
        f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    };
    put_plane(flow.u_map);
    put_plane(flow.v_map);
    require(f.good(), "write_wfl: write failed for " + path);
}

inline WarpFlow read_wfl(const std::string& path, std::uint32_t* flags_out = nullptr) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "read_wfl: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    require(f.gcount() == 4 && std::memcmp(magic, "WFL1", 4) == 0, "read_wfl: bad magic in " + path);
    auto get_u32 = [&f, &path]() {
        unsigned char b[4];
        f.read(reinterpret_cast<char*>(b), 4);
        require(f.gcount() == 4, "read_wfl: truncated header in " + path);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    };
    const std::uint32_t h = get_u32(), w = get_u32(), flags = get_u32();
    require(h >= 1 && w >= 1 && h < (1u << 20) && w < (1u << 20), "read_wfl: implausible extents in " + path);
    if (flags_out) *flags_out = flags;
    WarpFlow flow(static_cast<int>(h), static_cast<int>(w));
    auto get_plane = [&](std::vector<double>& plane) {
        std::vector<float> buf(plane.size());
        f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
        require(f.gcount() == static_cast<std::streamsize>(buf.size() * 4), "read_wfl: truncated data in " + path);
        for (size_t i = 0; i < plane.size(); ++i) plane[i] = buf[i];
    };
    get_plane(flow.u_map);
    get_plane(flow.v_map);
    return flow;
}

// Debug visualization: displacement from identity mapped to a red/green ramp.
inline ImageRaster flow_debug_colormap(const WarpFlow& flow) {
    ImageRaster img(flow.height, flow.width, 3);
    double mx = 1e-9;
    for (int y = 0; y < flow.height; ++y)
        for (int x = 0; x < flow.width; ++x)
            mx = std::max({mx, std::abs(flow.u(y, x) - x), std::abs(flow.v(y, x) - y)});
    for (int y = 0; y < flow.height; ++y)
        for (int x = 0; x < flow.width; ++x) {
            img.at(y, x, 0) = clamp01(0.5 + 0.5 * (flow.u(y, x) - x) / mx);
            img.at(y, x, 1) = clamp01(0.5 + 0.5 * (flow.v(y, x) - y) / mx);
            img.at(y, x, 2) = 0.5;
        }
    return img;
}

}  // namespace unwarp
