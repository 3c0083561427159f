#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "unwarp/common.hpp"

namespace unwarp {

// H x W x C raster of unit-interval intensities. C is 1 (gray) or 3 (RGB).
struct ImageRaster {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<double> data;  // row-major, interleaved channels

    ImageRaster() = default;
    ImageRaster(int h, int w, int c, double fill = 0.0)
        : height(h), width(w), channels(c), data(static_cast<size_t>(h) * w * c, fill) {
        require(h >= 1 && w >= 1 && (c == 1 || c == 3), "ImageRaster: bad extents/channels");
    }

    double& at(int y, int x, int c) { return data[(static_cast<size_t>(y) * width + x) * channels + c]; }
    double at(int y, int x, int c) const { return data[(static_cast<size_t>(y) * width + x) * channels + c]; }

    ImageRaster to_gray() const {
        if (channels == 1) return *this;
        ImageRaster g(height, width, 1);
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x)
                g.at(y, x, 0) = 0.299 * at(y, x, 0) + 0.587 * at(y, x, 1) + 0.114 * at(y, x, 2);
        return g;
    }

    ImageRaster to_rgb() const {
        if (channels == 3) return *this;
        ImageRaster c(height, width, 3);
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x)
                for (int ch = 0; ch < 3; ++ch) c.at(y, x, ch) = at(y, x, 0);
        return c;
    }
};

// Half-pixel bilinear resize with edge clamping.
inline ImageRaster resize_bilinear(const ImageRaster& img, int oh, int ow) {
    require(oh >= 1 && ow >= 1, "resize_bilinear: target extents must be >= 1");
    if (oh == img.height && ow == img.width) return img;
    ImageRaster out(oh, ow, img.channels);
    const double sy = static_cast<double>(img.height) / oh;
    const double sx = static_cast<double>(img.width) / ow;
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double yc = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
            double xc = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
            const int y0 = static_cast<int>(std::floor(yc)), x0 = static_cast<int>(std::floor(xc));
            const int y1 = std::min(y0 + 1, img.height - 1), x1 = std::min(x0 + 1, img.width - 1);
            const double fy = yc - y0, fx = xc - x0;
            for (int c = 0; c < img.channels; ++c)
                out.at(y, x, c) = (1 - fy) * ((1 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c)) +
                                  fy * ((1 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c));
        }
    return out;
}

// --- HSV ---------------------------------------------------------------

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    v = mx;
    const double d = mx - mn;
    s = mx > 0 ? d / mx : 0.0;
    if (d <= 0) {
        h = 0.0;
        return;
    }
    if (mx == r)
        h = std::fmod((g - b) / d, 6.0);
    else if (mx == g)
        h = (b - r) / d + 2.0;
    else
        h = (r - g) / d + 4.0;
    h /= 6.0;
    if (h < 0) h += 1.0;
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
    h = h - std::floor(h);
    const double c = v * s;
    const double hp = h * 6.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r1 = 0, g1 = 0, b1 = 0;
    if (hp < 1) { r1 = c; g1 = x; }
    else if (hp < 2) { r1 = x; g1 = c; }
    else if (hp < 3) { g1 = c; b1 = x; }
    else if (hp < 4) { g1 = x; b1 = c; }
    else if (hp < 5) { r1 = x; b1 = c; }
    else { r1 = c; b1 = x; }
    const double m = v - c;
    r = r1 + m;
    g = g1 + m;
    b = b1 + m;
}

// Random uniform offsets in HSV, hue cyclic, s/v clamped.
inline ImageRaster hsv_jitter(const ImageRaster& img, double max_dh, double max_ds, double max_dv,
                              std::uint64_t seed) {
    require(max_dh >= 0 && max_dh <= 1 && max_ds >= 0 && max_ds <= 1 && max_dv >= 0 && max_dv <= 1,
            "hsv_jitter: magnitudes must lie in [0,1]");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    const double dh = uni(rng) * max_dh;
    const double ds = uni(rng) * max_ds;
    const double dv = uni(rng) * max_dv;
    ImageRaster rgb = img.to_rgb();
    ImageRaster out(rgb.height, rgb.width, 3);
    for (int y = 0; y < rgb.height; ++y)
        for (int x = 0; x < rgb.width; ++x) {
            double h, s, v;
            rgb_to_hsv(rgb.at(y, x, 0), rgb.at(y, x, 1), rgb.at(y, x, 2), h, s, v);
            h += dh;
            s = clamp01(s + ds);
            v = clamp01(v + dv);
            double r, g, b;
            hsv_to_rgb(h, s, v, r, g, b);
            out.at(y, x, 0) = clamp01(r);
            out.at(y, x, 1) = clamp01(g);
            out.at(y, x, 2) = clamp01(b);
        }
    return out;
}

// --- PPM / PGM ---------------------------------------------------------

inline void write_ppm(const ImageRaster& img, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "write_ppm: cannot open " + path);
    ImageRaster rgb = img.to_rgb();
    f << "P6\n" << rgb.width << " " << rgb.height << "\n255\n";
    std::vector<unsigned char> row(static_cast<size_t>(rgb.width) * 3);
    for (int y = 0; y < rgb.height; ++y) {
        for (int x = 0; x < rgb.width; ++x)
            for (int c = 0; c < 3; ++c)
                row[static_cast<size_t>(x) * 3 + c] =
                    static_cast<unsigned char>(std::lround(clamp01(rgb.at(y, x, c)) * 255.0));
        f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    require(f.good(), "write_ppm: write failed for " + path);
}

inline ImageRaster read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "read_ppm: cannot open " + path);
    std::string magic;
    f >> magic;
    require(magic == "P6" || magic == "P5", "read_ppm: unsupported magic '" + magic + "' in " + path);
    auto next_int = [&f, &path]() {
        // skip whitespace and '#' comments
        int c;
        while ((c = f.peek()) != EOF) {
            if (c == '#') {
                std::string line;
                std::getline(f, line);
            } else if (std::isspace(c)) {
                f.get();
            } else
                break;
        }
        int v;
        f >> v;
        require(f.good(), "read_ppm: malformed header in " + path);
        return v;
    };
    const int w = next_int(), h = next_int(), maxval = next_int();
    require(maxval == 255, "read_ppm: only 8-bit images supported, " + path);
    f.get();  // single whitespace after maxval
    const int ch = magic == "P6" ? 3 : 1;
    ImageRaster img(h, w, ch);
    std::vector<unsigned char> buf(static_cast<size_t>(w) * h * ch);
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    require(f.gcount() == static_cast<std::streamsize>(buf.size()), "read_ppm: truncated file " + path);
    for (size_t i = 0; i < buf.size(); ++i) img.data[i] = buf[i] / 255.0;
    return img;
}

}  // namespace unwarp
