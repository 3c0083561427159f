#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "unwarp/common.hpp"

namespace unwarp {

template <typename T>
struct NdArray {
    Shape shape;
    std::vector<T> data;

    NdArray() = default;
    explicit NdArray(Shape s) : shape(std::move(s)), data(static_cast<size_t>(shape.numel()), T(0)) {}
    NdArray(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        require(static_cast<std::int64_t>(data.size()) == shape.numel(),
                "NdArray: data length " + std::to_string(data.size()) + " does not match shape " + shape.str());
    }

    static NdArray zeros(Shape s) { return NdArray(std::move(s)); }
    static NdArray full(Shape s, T v) {
        NdArray a(std::move(s));
        std::fill(a.data.begin(), a.data.end(), v);
        return a;
    }

    std::int64_t numel() const { return shape.numel(); }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

// Reverse-mode tape. Eager: each op computes its value on record and registers
// a pull closure that accumulates into its parents' gradient buffers.
template <typename T>
class Tape {
public:
    using Id = int;

    Id leaf(NdArray<T> v, bool requires_grad = false) {
        return add_node(std::move(v), requires_grad, {}, nullptr, /*check_finite=*/true);
    }

    const NdArray<T>& value(Id id) const { return nodes_[static_cast<size_t>(id)].value; }
    const NdArray<T>& grad(Id id) const { return nodes_[static_cast<size_t>(id)].grad; }
    bool requires_grad(Id id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
    size_t size() const { return nodes_.size(); }

    void backward(Id loss) {
        require(!consumed_, "backward: tape already consumed; re-record before differentiating again");
        require(value(loss).numel() == 1, "backward: loss must be a scalar, got shape " + value(loss).shape.str());
        consumed_ = true;
        for (auto& n : nodes_)
            if (n.requires_grad) n.grad = NdArray<T>::zeros(n.value.shape);
        nodes_[static_cast<size_t>(loss)].grad.data[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
            if (it->pull && it->requires_grad) it->pull();
    }

    // --- primitives -------------------------------------------------------

    Id add(Id a, Id b) {
        require(value(a).shape == value(b).shape,
                "add: shape mismatch " + value(a).shape.str() + " vs " + value(b).shape.str());
        NdArray<T> out(value(a).shape);
        const auto& av = value(a).data;
        const auto& bv = value(b).data;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = av[i] + bv[i];
        return add_node(std::move(out), any_grad({a, b}), {a, b}, [this, a, b](const NdArray<T>& g, Id) {
            accumulate(a, g.data.data(), g.data.size());
            accumulate(b, g.data.data(), g.data.size());
        });
    }

    Id sub(Id a, Id b) {
        require(value(a).shape == value(b).shape,
                "sub: shape mismatch " + value(a).shape.str() + " vs " + value(b).shape.str());
        NdArray<T> out(value(a).shape);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = value(a).data[i] - value(b).data[i];
        return add_node(std::move(out), any_grad({a, b}), {a, b}, [this, a, b](const NdArray<T>& g, Id) {
            accumulate(a, g.data.data(), g.data.size());
            if (requires_grad(b)) {
                auto& gb = grad_mut(b);
                for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] -= g.data[i];
            }
        });
    }

    Id mul(Id a, Id b) {
        require(value(a).shape == value(b).shape,
                "mul: shape mismatch " + value(a).shape.str() + " vs " + value(b).shape.str());
        NdArray<T> out(value(a).shape);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = value(a).data[i] * value(b).data[i];
        return add_node(std::move(out), any_grad({a, b}), {a, b}, [this, a, b](const NdArray<T>& g, Id) {
            if (requires_grad(a)) {
                auto& ga = grad_mut(a);
                for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * value(b).data[i];
            }
            if (requires_grad(b)) {
                auto& gb = grad_mut(b);
                for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i] * value(a).data[i];
            }
        });
    }

    Id scale(Id a, T c) {
        NdArray<T> out(value(a).shape);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = value(a).data[i] * c;
        return add_node(std::move(out), requires_grad(a), {a}, [this, a, c](const NdArray<T>& g, Id) {
            if (requires_grad(a)) {
                auto& ga = grad_mut(a);
                for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * c;
            }
        });
    }

    // x: [..., C] plus a per-channel bias [C]
    Id add_bias(Id x, Id b) {
        const auto& xs = value(x).shape;
        const auto& bs = value(b).shape;
        require(bs.rank() == 1 && xs.rank() >= 1 && xs[xs.rank() - 1] == bs[0],
                "add_bias: channel mismatch " + xs.str() + " vs " + bs.str());
        const int c = bs[0];
        NdArray<T> out(xs);
        for (size_t i = 0; i < out.data.size(); ++i)
            out.data[i] = value(x).data[i] + value(b).data[static_cast<size_t>(i % static_cast<size_t>(c))];
        return add_node(std::move(out), any_grad({x, b}), {x, b}, [this, x, b, c](const NdArray<T>& g, Id) {
            accumulate(x, g.data.data(), g.data.size());
            if (requires_grad(b)) {
                auto& gb = grad_mut(b);
                for (size_t i = 0; i < g.data.size(); ++i) gb.data[i % static_cast<size_t>(c)] += g.data[i];
            }
        });
    }

    Id matmul(Id a, Id b) {
        const auto& as = value(a).shape;
        const auto& bs = value(b).shape;
        require(as.rank() == 2 && bs.rank() == 2, "matmul: operands must be 2-d");
        require(as[1] == bs[0], "matmul: inner extents differ, " + as.str() + " vs " + bs.str());
        const int m = as[0], k = as[1], n = bs[1];
        NdArray<T> out(Shape{m, n});
        const T* pa = value(a).data.data();
        const T* pb = value(b).data.data();
        for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
                const T av = pa[i * k + p];
                if (av == T(0)) continue;
                T* po = out.data.data() + static_cast<size_t>(i) * n;
                const T* pr = pb + static_cast<size_t>(p) * n;
                for (int j = 0; j < n; ++j) po[j] += av * pr[j];
            }
        return add_node(std::move(out), any_grad({a, b}), {a, b}, [this, a, b, m, k, n](const NdArray<T>& g, Id) {
            // dA = G B^T, dB = A^T G
            if (requires_grad(a)) {
                auto& ga = grad_mut(a);
                const T* pb2 = value(b).data.data();
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        T acc = T(0);
                        for (int j = 0; j < n; ++j) acc += g.data[static_cast<size_t>(i) * n + j] * pb2[static_cast<size_t>(p) * n + j];
                        ga.data[static_cast<size_t>(i) * k + p] += acc;
                    }
            }
            if (requires_grad(b)) {
                auto& gb = grad_mut(b);
                const T* pa2 = value(a).data.data();
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        const T av = pa2[static_cast<size_t>(i) * k + p];
                        if (av == T(0)) continue;
                        for (int j = 0; j < n; ++j)
                            gb.data[static_cast<size_t>(p) * n + j] += av * g.data[static_cast<size_t>(i) * n + j];
                    }
            }
        });
    }

    Id transpose2d(Id a) {
        const auto& as = value(a).shape;
        require(as.rank() == 2, "transpose2d: operand must be 2-d");
        const int m = as[0], n = as[1];
        NdArray<T> out(Shape{n, m});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(j) * m + i] = value(a).data[static_cast<size_t>(i) * n + j];
        return add_node(std::move(out), requires_grad(a), {a}, [this, a, m, n](const NdArray<T>& g, Id) {
            auto& ga = grad_mut(a);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) ga.data[static_cast<size_t>(i) * n + j] += g.data[static_cast<size_t>(j) * m + i];
        });
    }

    Id slice_cols(Id a, int start, int count) {
        const auto& as = value(a).shape;
        require(as.rank() == 2 && start >= 0 && count >= 1 && start + count <= as[1], "slice_cols: range out of bounds");
        const int m = as[0], n = as[1];
        NdArray<T> out(Shape{m, count});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < count; ++j)
                out.data[static_cast<size_t>(i) * count + j] = value(a).data[static_cast<size_t>(i) * n + start + j];
        return add_node(std::move(out), requires_grad(a), {a}, [this, a, start, count, m, n](const NdArray<T>& g, Id) {
            auto& ga = grad_mut(a);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < count; ++j)
                    ga.data[static_cast<size_t>(i) * n + start + j] += g.data[static_cast<size_t>(i) * count + j];
        });
    }

    Id concat_cols(const std::vector<Id>& parts) {
        require(!parts.empty(), "concat_cols: empty part list");
        const int m = value(parts[0]).shape[0];
        int total = 0;
        for (Id p : parts) {
            require(value(p).shape.rank() == 2 && value(p).shape[0] == m, "concat_cols: row mismatch");
            total += value(p).shape[1];
        }
        NdArray<T> out(Shape{m, total});
        int off = 0;
        for (Id p : parts) {
            const int c = value(p).shape[1];
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < c; ++j)
                    out.data[static_cast<size_t>(i) * total + off + j] = value(p).data[static_cast<size_t>(i) * c + j];
            off += c;
        }
        bool rg = false;
        for (Id p : parts) rg = rg || requires_grad(p);
        return add_node(std::move(out), rg, parts, [this, parts, m, total](const NdArray<T>& g, Id) {
            int o = 0;
            for (Id p : parts) {
                const int c = value(p).shape[1];
                if (requires_grad(p)) {
                    auto& gp = grad_mut(p);
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < c; ++j)
                            gp.data[static_cast<size_t>(i) * c + j] += g.data[static_cast<size_t>(i) * total + o + j];
                }
                o += c;
            }
        });
    }

    Id reshape(Id a, Shape s) {
        require(s.numel() == value(a).numel(),
                "reshape: element count mismatch " + value(a).shape.str() + " -> " + s.str());
        NdArray<T> out(s, value(a).data);
        return add_node(std::move(out), requires_grad(a), {a}, [this, a](const NdArray<T>& g, Id) {
            accumulate(a, g.data.data(), g.data.size());
        });
    }

    Id relu(Id a) {
        NdArray<T> out(value(a).shape);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::max(T(0), value(a).data[i]);
        return add_node(std::move(out), requires_grad(a), {a}, [this, a](const NdArray<T>& g, Id) {
            auto& ga = grad_mut(a);
            for (size_t i = 0; i < g.data.size(); ++i)
                if (value(a).data[i] > T(0)) ga.data[i] += g.data[i];
        });
    }

    Id gelu(Id a) {
        NdArray<T> out(value(a).shape);
        for (size_t i = 0; i < out.data.size(); ++i) {
            const double x = static_cast<double>(value(a).data[i]);
            out.data[i] = static_cast<T>(0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))));
        }
        return add_node(std::move(out), requires_grad(a), {a}, [this, a](const NdArray<T>& g, Id) {
            auto& ga = grad_mut(a);
            for (size_t i = 0; i < g.data.size(); ++i) {
                const double x = static_cast<double>(value(a).data[i]);
                const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
                const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * 3.14159265358979323846);
                ga.data[i] += g.data[i] * static_cast<T>(cdf + x * pdf);
            }
        });
    }

    Id abs_(Id a) {
        NdArray<T> out(value(a).shape);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::abs(value(a).data[i]);
        return add_node(std::move(out), requires_grad(a), {a}, [this, a](const NdArray<T>& g, Id) {
            auto& ga = grad_mut(a);
            for (size_t i = 0; i < g.data.size(); ++i) {
                const T x = value(a).data[i];
                ga.data[i] += g.data[i] * (x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)));
            }
        });
    }

    Id sum(Id a) {
        T acc = T(0);
        for (T v : value(a).data) acc += v;
        NdArray<T> out(Shape{1});
        out.data[0] = acc;
        return add_node(std::move(out), requires_grad(a), {a}, [this, a](const NdArray<T>& g, Id) {
            auto& ga = grad_mut(a);
            for (auto& v : ga.data) v += g.data[0];
        });
    }

    Id mean(Id a) {
        const T inv = T(1) / static_cast<T>(value(a).numel());
        return scale(sum(a), inv);
    }

    // Softmax along an arbitrary axis, max-subtracted.
    Id softmax(Id a, int axis) {
        const auto& s = value(a).shape;
        require(axis >= 0 && axis < s.rank(), "softmax: axis out of range for shape " + s.str());
        const int n = s[axis];
        std::int64_t inner = 1, outer = 1;
        for (int i = axis + 1; i < s.rank(); ++i) inner *= s[i];
        for (int i = 0; i < axis; ++i) outer *= s[i];
        NdArray<T> out(s);
        const T* in = value(a).data.data();
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t c = 0; c < inner; ++c) {
                const std::int64_t base = o * n * inner + c;
                T mx = in[base];
                for (int i = 1; i < n; ++i) mx = std::max(mx, in[base + i * inner]);
                T z = T(0);
                for (int i = 0; i < n; ++i) {
                    const T e = std::exp(in[base + i * inner] - mx);
                    out.data[static_cast<size_t>(base + i * inner)] = e;
                    z += e;
                }
                for (int i = 0; i < n; ++i) out.data[static_cast<size_t>(base + i * inner)] /= z;
            }
        return add_node(std::move(out), requires_grad(a), {a},
                        [this, a, n, inner, outer](const NdArray<T>& g, Id self) {
                            auto& ga = grad_mut(a);
                            const auto& y = value(self).data;
                            for (std::int64_t o = 0; o < outer; ++o)
                                for (std::int64_t c = 0; c < inner; ++c) {
                                    const std::int64_t base = o * n * inner + c;
                                    T dot = T(0);
                                    for (int i = 0; i < n; ++i)
                                        dot += g.data[static_cast<size_t>(base + i * inner)] * y[static_cast<size_t>(base + i * inner)];
                                    for (int i = 0; i < n; ++i) {
                                        const size_t idx = static_cast<size_t>(base + i * inner);
                                        ga.data[idx] += y[idx] * (g.data[idx] - dot);
                                    }
                                }
                        });
    }

    // Normalizes over the last axis, then applies per-channel gain and bias.
    Id layer_norm(Id x, Id gain, Id bias, T eps) {
        const auto& s = value(x).shape;
        require(eps > T(0), "layer_norm: eps must be positive");
        const int c = s[s.rank() - 1];
        require(value(gain).shape == Shape{c} && value(bias).shape == Shape{c},
                "layer_norm: gain/bias must have shape [" + std::to_string(c) + "]");
        const std::int64_t rows = s.numel() / c;
        NdArray<T> out(s);
        std::vector<T> mu(static_cast<size_t>(rows)), istd(static_cast<size_t>(rows));
        const T* in = value(x).data.data();
        for (std::int64_t r = 0; r < rows; ++r) {
            T m = T(0);
            for (int i = 0; i < c; ++i) m += in[r * c + i];
            m /= static_cast<T>(c);
            T v = T(0);
            for (int i = 0; i < c; ++i) {
                const T d = in[r * c + i] - m;
                v += d * d;
            }
            v /= static_cast<T>(c);
            mu[static_cast<size_t>(r)] = m;
            istd[static_cast<size_t>(r)] = T(1) / std::sqrt(v + eps);
            for (int i = 0; i < c; ++i) {
                const T xh = (in[r * c + i] - m) * istd[static_cast<size_t>(r)];
                out.data[static_cast<size_t>(r * c + i)] = xh * value(gain).data[static_cast<size_t>(i)] + value(bias).data[static_cast<size_t>(i)];
            }
        }
        return add_node(std::move(out), any_grad({x, gain, bias}), {x, gain, bias},
                        [this, x, gain, bias, c, rows, mu, istd](const NdArray<T>& g, Id) {
                            const T* in = value(x).data.data();
                            for (std::int64_t r = 0; r < rows; ++r) {
                                const T m = mu[static_cast<size_t>(r)], is = istd[static_cast<size_t>(r)];
                                // recompute xhat for the row
                                T mean_dxh = T(0), mean_dxh_xh = T(0);
                                for (int i = 0; i < c; ++i) {
                                    const T xh = (in[r * c + i] - m) * is;
                                    const T gy = g.data[static_cast<size_t>(r * c + i)];
                                    const T dxh = gy * value(gain).data[static_cast<size_t>(i)];
                                    mean_dxh += dxh;
                                    mean_dxh_xh += dxh * xh;
                                    if (requires_grad(gain)) grad_mut(gain).data[static_cast<size_t>(i)] += gy * xh;
                                    if (requires_grad(bias)) grad_mut(bias).data[static_cast<size_t>(i)] += gy;
                                }
                                mean_dxh /= static_cast<T>(c);
                                mean_dxh_xh /= static_cast<T>(c);
                                if (requires_grad(x)) {
                                    auto& gx = grad_mut(x);
                                    for (int i = 0; i < c; ++i) {
                                        const T xh = (in[r * c + i] - m) * is;
                                        const T dxh = g.data[static_cast<size_t>(r * c + i)] * value(gain).data[static_cast<size_t>(i)];
                                        gx.data[static_cast<size_t>(r * c + i)] += is * (dxh - mean_dxh - xh * mean_dxh_xh);
                                    }
                                }
                            }
                        });
    }

    // input [H,W,Cin], kernel [kh,kw,Cin,Cout]. HWC layout.
    Id conv2d(Id input, Id kernel, int stride, int padding) {
        const auto& is = value(input).shape;
        const auto& ks = value(kernel).shape;
        require(is.rank() == 3 && ks.rank() == 4, "conv2d: input must be [H,W,Cin], kernel [kh,kw,Cin,Cout]");
        require(ks[0] % 2 == 1 && ks[1] % 2 == 1, "conv2d: kernel extents must be odd");
        require(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
        require(is[2] == ks[2], "conv2d: channel mismatch, input " + is.str() + " vs kernel " + ks.str());
        const int h = is[0], w = is[1], cin = is[2];
        const int kh = ks[0], kw = ks[1], cout = ks[3];
        const int oh = (h + 2 * padding - kh) / stride + 1;
        const int ow = (w + 2 * padding - kw) / stride + 1;
        require(oh >= 1 && ow >= 1, "conv2d: output would be empty");
        NdArray<T> out(Shape{oh, ow, cout});
        const T* in = value(input).data.data();
        const T* kk = value(kernel).data.data();
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                T* po = out.data.data() + (static_cast<size_t>(oy) * ow + ox) * cout;
                for (int ky = 0; ky < kh; ++ky) {
                    const int iy = oy * stride + ky - padding;
                    if (iy < 0 || iy >= h) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                        const int ix = ox * stride + kx - padding;
                        if (ix < 0 || ix >= w) continue;
                        const T* pi = in + (static_cast<size_t>(iy) * w + ix) * cin;
                        const T* pk = kk + (static_cast<size_t>(ky) * kw + kx) * cin * cout;
                        for (int ci = 0; ci < cin; ++ci) {
                            const T xv = pi[ci];
                            if (xv == T(0)) continue;
                            const T* pkc = pk + static_cast<size_t>(ci) * cout;
                            for (int co = 0; co < cout; ++co) po[co] += xv * pkc[co];
                        }
                    }
                }
            }
        return add_node(std::move(out), any_grad({input, kernel}), {input, kernel},
                        [this, input, kernel, stride, padding, h, w, cin, kh, kw, cout, oh, ow](const NdArray<T>& g, Id) {
                            const T* in = value(input).data.data();
                            const T* kk = value(kernel).data.data();
                            const bool gi = requires_grad(input), gk = requires_grad(kernel);
                            for (int oy = 0; oy < oh; ++oy)
                                for (int ox = 0; ox < ow; ++ox) {
                                    const T* pg = g.data.data() + (static_cast<size_t>(oy) * ow + ox) * cout;
                                    for (int ky = 0; ky < kh; ++ky) {
                                        const int iy = oy * stride + ky - padding;
                                        if (iy < 0 || iy >= h) continue;
                                        for (int kx = 0; kx < kw; ++kx) {
                                            const int ix = ox * stride + kx - padding;
                                            if (ix < 0 || ix >= w) continue;
                                            const size_t ibase = (static_cast<size_t>(iy) * w + ix) * cin;
                                            const size_t kbase = (static_cast<size_t>(ky) * kw + kx) * cin * cout;
                                            for (int ci = 0; ci < cin; ++ci) {
                                                T acc = T(0);
                                                const T* pkc = kk + kbase + static_cast<size_t>(ci) * cout;
                                                for (int co = 0; co < cout; ++co) acc += pg[co] * pkc[co];
                                                if (gi) grad_mut(input).data[ibase + ci] += acc;
                                                if (gk) {
                                                    const T xv = in[ibase + ci];
                                                    if (xv != T(0)) {
                                                        T* pgk = grad_mut(kernel).data.data() + kbase + static_cast<size_t>(ci) * cout;
                                                        for (int co = 0; co < cout; ++co) pgk[co] += xv * pg[co];
                                                    }
                                                }
                                            }
                                        }
                                    }
                                }
                        });
    }

    // [H,W,C] -> [oh,ow,C], half-pixel sampling with edge clamping.
    Id bilinear_resize(Id a, int oh, int ow) {
        const auto& s = value(a).shape;
        require(s.rank() == 3 && oh >= 1 && ow >= 1, "bilinear_resize: input must be [H,W,C]");
        const int h = s[0], w = s[1], c = s[2];
        NdArray<T> out(Shape{oh, ow, c});
        const T sy = static_cast<T>(h) / static_cast<T>(oh);
        const T sx = static_cast<T>(w) / static_cast<T>(ow);
        const T* in = value(a).data.data();
        auto corners = [sy, sx, h, w](int oy, int ox, int& y0, int& x0, T& fy, T& fx) {
            T yc = (static_cast<T>(oy) + T(0.5)) * sy - T(0.5);
            T xc = (static_cast<T>(ox) + T(0.5)) * sx - T(0.5);
            yc = std::clamp(yc, T(0), static_cast<T>(h - 1));
            xc = std::clamp(xc, T(0), static_cast<T>(w - 1));
            y0 = std::min(static_cast<int>(std::floor(yc)), h - 1);
            x0 = std::min(static_cast<int>(std::floor(xc)), w - 1);
            fy = yc - static_cast<T>(y0);
            fx = xc - static_cast<T>(x0);
        };
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                int y0, x0;
                T fy, fx;
                corners(oy, ox, y0, x0, fy, fx);
                const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
                for (int ch = 0; ch < c; ++ch) {
                    const T v00 = in[(static_cast<size_t>(y0) * w + x0) * c + ch];
                    const T v01 = in[(static_cast<size_t>(y0) * w + x1) * c + ch];
                    const T v10 = in[(static_cast<size_t>(y1) * w + x0) * c + ch];
                    const T v11 = in[(static_cast<size_t>(y1) * w + x1) * c + ch];
                    out.data[(static_cast<size_t>(oy) * ow + ox) * c + ch] =
                        (T(1) - fy) * ((T(1) - fx) * v00 + fx * v01) + fy * ((T(1) - fx) * v10 + fx * v11);
                }
            }
        return add_node(std::move(out), requires_grad(a), {a},
                        [this, a, oh, ow, h, w, c, corners](const NdArray<T>& g, Id) {
                            auto& ga = grad_mut(a);
                            for (int oy = 0; oy < oh; ++oy)
                                for (int ox = 0; ox < ow; ++ox) {
                                    int y0, x0;
                                    T fy, fx;
                                    corners(oy, ox, y0, x0, fy, fx);
                                    const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
                                    for (int ch = 0; ch < c; ++ch) {
                                        const T gv = g.data[(static_cast<size_t>(oy) * ow + ox) * c + ch];
                                        ga.data[(static_cast<size_t>(y0) * w + x0) * c + ch] += gv * (T(1) - fy) * (T(1) - fx);
                                        ga.data[(static_cast<size_t>(y0) * w + x1) * c + ch] += gv * (T(1) - fy) * fx;
                                        ga.data[(static_cast<size_t>(y1) * w + x0) * c + ch] += gv * fy * (T(1) - fx);
                                        ga.data[(static_cast<size_t>(y1) * w + x1) * c + ch] += gv * fy * fx;
                                    }
                                }
                        });
    }

    // Convex 8x upsampling: fine value = weighted 3x3 neighborhood of the coarse
    // map, replicate-padded at the border. coarse [h,w,c], weights [h,w,64,9]
    // (already normalized along the last axis).
    Id convex_combine8(Id coarse, Id weights) {
        const auto& cs = value(coarse).shape;
        const auto& ws = value(weights).shape;
        require(cs.rank() == 3, "convex_combine8: coarse must be [h,w,c]");
        require(ws.rank() == 4 && ws[0] == cs[0] && ws[1] == cs[1] && ws[2] == 64 && ws[3] == 9,
                "convex_combine8: weights must be [h,w,64,9] matching coarse " + cs.str());
        const int h = cs[0], w = cs[1], c = cs[2];
        NdArray<T> out(Shape{h * 8, w * 8, c});
        const T* fm = value(coarse).data.data();
        const T* wt = value(weights).data.data();
        auto clampi = [](int v, int hi) { return v < 0 ? 0 : (v > hi ? hi : v); };
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                for (int a = 0; a < 8; ++a)
                    for (int b = 0; b < 8; ++b) {
                        const size_t wbase = ((static_cast<size_t>(i) * w + j) * 64 + a * 8 + b) * 9;
                        const size_t obase = (static_cast<size_t>(i * 8 + a) * (w * 8) + (j * 8 + b)) * c;
                        for (int n = 0; n < 9; ++n) {
                            const int ni = clampi(i + n / 3 - 1, h - 1);
                            const int nj = clampi(j + n % 3 - 1, w - 1);
                            const T wv = wt[wbase + n];
                            const size_t cbase = (static_cast<size_t>(ni) * w + nj) * c;
                            for (int ch = 0; ch < c; ++ch) out.data[obase + ch] += wv * fm[cbase + ch];
                        }
                    }
        return add_node(std::move(out), any_grad({coarse, weights}), {coarse, weights},
                        [this, coarse, weights, h, w, c, clampi](const NdArray<T>& g, Id) {
                            const T* fm = value(coarse).data.data();
                            const T* wt = value(weights).data.data();
                            const bool gc = requires_grad(coarse), gw = requires_grad(weights);
                            for (int i = 0; i < h; ++i)
                                for (int j = 0; j < w; ++j)
                                    for (int a = 0; a < 8; ++a)
                                        for (int b = 0; b < 8; ++b) {
                                            const size_t wbase = ((static_cast<size_t>(i) * w + j) * 64 + a * 8 + b) * 9;
                                            const size_t obase = (static_cast<size_t>(i * 8 + a) * (w * 8) + (j * 8 + b)) * c;
                                            for (int n = 0; n < 9; ++n) {
                                                const int ni = clampi(i + n / 3 - 1, h - 1);
                                                const int nj = clampi(j + n % 3 - 1, w - 1);
                                                const size_t cbase = (static_cast<size_t>(ni) * w + nj) * c;
                                                T dot = T(0);
                                                for (int ch = 0; ch < c; ++ch) {
                                                    const T gv = g.data[obase + ch];
                                                    if (gc) grad_mut(coarse).data[cbase + ch] += wt[wbase + n] * gv;
                                                    dot += gv * fm[cbase + ch];
                                                }
                                                if (gw) grad_mut(weights).data[wbase + n] += dot;
                                            }
                                        }
                        });
    }

private:
    struct Node {
        NdArray<T> value;
        NdArray<T> grad;
        bool requires_grad = false;
        std::function<void()> pull;
    };

    bool any_grad(std::initializer_list<Id> ids) const {
        for (Id i : ids)
            if (requires_grad(i)) return true;
        return false;
    }
    bool any_grad(const std::vector<Id>& ids) const {
        for (Id i : ids)
            if (requires_grad(i)) return true;
        return false;
    }

    NdArray<T>& grad_mut(Id id) { return nodes_[static_cast<size_t>(id)].grad; }

    void accumulate(Id id, const T* g, size_t n) {
        if (!requires_grad(id)) return;
        auto& dst = grad_mut(id).data;
        for (size_t i = 0; i < n; ++i) dst[i] += g[i];
    }

    Id add_node(NdArray<T> v, bool rg, std::vector<Id> parents,
                std::function<void(const NdArray<T>&, Id)> pull, bool check_finite = true) {
        if (check_finite)
            require(v.all_finite(), "forward op produced a non-finite value");
        const Id id = static_cast<Id>(nodes_.size());
        Node n;
        n.value = std::move(v);
        n.requires_grad = rg;
        if (pull && rg)
            n.pull = [this, id, pull = std::move(pull)]() { pull(nodes_[static_cast<size_t>(id)].grad, id); };
        nodes_.push_back(std::move(n));
        (void)parents;
        return id;
    }

    std::vector<Node> nodes_;
    bool consumed_ = false;
};

// Scaled dot-product multi-head attention built from tape primitives.
// q: [Nq,C], k/v: [Nk,C]; params are projection weights [C,C] and biases [C].
template <typename T>
struct AttentionParams {
    typename Tape<T>::Id wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
typename Tape<T>::Id multi_head_attention(Tape<T>& tape, typename Tape<T>::Id q, typename Tape<T>::Id k,
                                          typename Tape<T>::Id v, int heads, const AttentionParams<T>& p) {
    const int c = tape.value(q).shape[1];
    require(c % heads == 0, "multi_head_attention: channel count " + std::to_string(c) +
                                " not divisible by " + std::to_string(heads) + " heads");
    const int dh = c / heads;
    auto qp = tape.add_bias(tape.matmul(q, p.wq), p.bq);
    auto kp = tape.add_bias(tape.matmul(k, p.wk), p.bk);
    auto vp = tape.add_bias(tape.matmul(v, p.wv), p.bv);
    std::vector<typename Tape<T>::Id> outs;
    const T sc = T(1) / std::sqrt(static_cast<T>(dh));
    for (int h = 0; h < heads; ++h) {
        auto qh = tape.slice_cols(qp, h * dh, dh);
        auto kh = tape.slice_cols(kp, h * dh, dh);
        auto vh = tape.slice_cols(vp, h * dh, dh);
        auto scores = tape.scale(tape.matmul(qh, tape.transpose2d(kh)), sc);
        auto attn = tape.softmax(scores, 1);
        outs.push_back(tape.matmul(attn, vh));
    }
    auto cat = heads == 1 ? outs[0] : tape.concat_cols(outs);
    return tape.add_bias(tape.matmul(cat, p.wo), p.bo);
}

}  // namespace unwarp
