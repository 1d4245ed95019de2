#pragma once

// Differentiable primitives on DiffArray. Anything heavier than an
// elementwise loop goes through Eigen GEMMs (affine, conv1d via im2col,
// attention per batch/head); everything is single threaded on purpose so
// runs stay reproducible.

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "dsqa/array.hpp"
#include "dsqa/common.hpp"
#include "dsqa/rng.hpp"

namespace dsqa {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

namespace detail {

inline void expect_min_ndim(const char* op, const DiffArray& x, int n) {
    if (x.ndim() < n)
        throw DimensionError(std::string(op) + ": need at least " + std::to_string(n) +
                             " axes, got shape " + shape_str(x.shape()));
}

inline void expect_ndim(const char* op, const DiffArray& x, int n) {
    if (x.ndim() != n)
        throw DimensionError(std::string(op) + ": need " + std::to_string(n) +
                             " axes, got shape " + shape_str(x.shape()));
}

inline void expect_same_shape(const char* op, const DiffArray& a, const DiffArray& b) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

inline std::int64_t leading_rows(const Shape& s) {
    std::int64_t n = 1;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) n *= s[i];
    return n;
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise

inline DiffArray add(const DiffArray& a, const DiffArray& b) {
    detail::expect_same_shape("add", a, b);
    std::vector<float> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return detail::make_op("add", a.shape(), std::move(out), {a, b}, [a, b](TapeNode& o) {
        for (const auto& in : {a, b}) {
            if (!in.node()->requires_grad) continue;
            float* g = in.node()->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        }
    });
}

inline DiffArray sub(const DiffArray& a, const DiffArray& b) {
    detail::expect_same_shape("sub", a, b);
    std::vector<float> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return detail::make_op("sub", a.shape(), std::move(out), {a, b}, [a, b](TapeNode& o) {
        if (a.node()->requires_grad) {
            float* g = a.node()->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        }
        if (b.node()->requires_grad) {
            float* g = b.node()->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
        }
    });
}

inline DiffArray mul(const DiffArray& a, const DiffArray& b) {
    detail::expect_same_shape("mul", a, b);
    std::vector<float> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return detail::make_op("mul", a.shape(), std::move(out), {a, b}, [a, b](TapeNode& o) {
        if (a.node()->requires_grad) {
            float* g = a.node()->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * b.data()[i];
        }
        if (b.node()->requires_grad) {
            float* g = b.node()->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * a.data()[i];
        }
    });
}

inline DiffArray scale(const DiffArray& x, float c) {
    std::vector<float> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * c;
    return detail::make_op("scale", x.shape(), std::move(out), {x}, [x, c](TapeNode& o) {
        float* g = x.node()->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * c;
    });
}

inline DiffArray neg(const DiffArray& x) { return scale(x, -1.0f); }

inline DiffArray add_scalar(const DiffArray& x, float c) {
    std::vector<float> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + c;
    return detail::make_op("add_scalar", x.shape(), std::move(out), {x}, [x](TapeNode& o) {
        float* g = x.node()->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    });
}

// v's shape must be a suffix of x's shape (bias add, positional add).
inline DiffArray add_broadcast(const DiffArray& x, const DiffArray& v) {
    const Shape& xs = x.shape();
    const Shape& vs = v.shape();
    if (vs.size() > xs.size() ||
        !std::equal(vs.begin(), vs.end(), xs.end() - static_cast<std::ptrdiff_t>(vs.size())))
        throw DimensionError("add_broadcast: " + shape_str(vs) + " is not a suffix of " + shape_str(xs));
    const std::size_t block = v.size();
    std::vector<float> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + v.data()[i % block];
    return detail::make_op("add_broadcast", xs, std::move(out), {x, v}, [x, v, block](TapeNode& o) {
        if (x.node()->requires_grad) {
            float* g = x.node()->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        }
        if (v.node()->requires_grad) {
            float* g = v.node()->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % block] += o.grad[i];
        }
    });
}

inline DiffArray relu(const DiffArray& x) {
    std::vector<float> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > 0.0f ? x.data()[i] : 0.0f;
    return detail::make_op("relu", x.shape(), std::move(out), {x}, [x](TapeNode& o) {
        float* g = x.node()->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i)
            if (x.data()[i] > 0.0f) g[i] += o.grad[i];
    });
}

inline DiffArray sigmoid(const DiffArray& x) {
    std::vector<float> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0f / (1.0f + std::exp(-x.data()[i]));
    return detail::make_op("sigmoid", x.shape(), std::move(out), {x}, [x](TapeNode& o) {
        float* g = x.node()->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            float s = o.value[i];
            g[i] += o.grad[i] * s * (1.0f - s);
        }
    });
}

// max(0, min(1, 1.2*sigmoid(x) - 0.1)). Gradient is zero where the clamp
// is active, 1.2*s*(1-s) strictly inside.
inline DiffArray saturating_sigmoid(const DiffArray& x) {
    std::vector<float> out(x.size());
    std::vector<float> dvdx(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        float s = 1.0f / (1.0f + std::exp(-x.data()[i]));
        float v = 1.2f * s - 0.1f;
        if (v <= 0.0f) {
            out[i] = 0.0f;
            dvdx[i] = 0.0f;
        } else if (v >= 1.0f) {
            out[i] = 1.0f;
            dvdx[i] = 0.0f;
        } else {
            out[i] = v;
            dvdx[i] = 1.2f * s * (1.0f - s);
        }
    }
    return detail::make_op("saturating_sigmoid", x.shape(), std::move(out), {x},
                           [x, dvdx = std::move(dvdx)](TapeNode& o) {
                               float* g = x.node()->ensure_grad();
                               for (std::size_t i = 0; i < o.grad.size(); ++i)
                                   g[i] += o.grad[i] * dvdx[i];
                           });
}

inline DiffArray stop_gradient(const DiffArray& x) {
    return DiffArray::constant(x.shape(), x.values());
}

// Forward value is a bitwise copy of `forward_value`; the whole gradient is
// routed to `grad_target`. This is the straight-through estimator without
// the float round-trip a v2 + v1 - stop(v1) composite would introduce.
inline DiffArray gradient_redirect(const DiffArray& forward_value, const DiffArray& grad_target) {
    detail::expect_same_shape("gradient_redirect", forward_value, grad_target);
    return detail::make_op("gradient_redirect", forward_value.shape(), forward_value.values(),
                           {grad_target}, [grad_target](TapeNode& o) {
                               float* g = grad_target.node()->ensure_grad();
                               for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                           });
}

inline DiffArray reshape(const DiffArray& x, Shape shape) {
    if (numel(shape) != numel(x.shape()))
        throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
    return detail::make_op("reshape", std::move(shape), x.values(), {x}, [x](TapeNode& o) {
        float* g = x.node()->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    });
}

inline DiffArray sum(const DiffArray& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x.data()[i];
    return detail::make_op("sum", {1}, {static_cast<float>(acc)}, {x}, [x](TapeNode& o) {
        float* g = x.node()->ensure_grad();
        for (std::size_t i = 0; i < x.size(); ++i) g[i] += o.grad[0];
    });
}

// ---------------------------------------------------------------------------
// noise / dropout

inline DiffArray gaussian_like(RngState& rng, const Shape& shape, float sigma) {
    if (sigma < 0.0f) throw ConfigError("gaussian_like: sigma must be >= 0, got " + std::to_string(sigma));
    std::vector<float> out(static_cast<std::size_t>(numel(shape)));
    for (auto& v : out) v = sigma == 0.0f ? 0.0f : sigma * static_cast<float>(rng.gaussian());
    return DiffArray::constant(shape, std::move(out));
}

inline DiffArray dropout(const DiffArray& x, float p, RngState& rng, Mode mode) {
    if (p < 0.0f || p >= 1.0f) throw ConfigError("dropout: rate must be in [0,1), got " + std::to_string(p));
    if (mode == Mode::eval || p == 0.0f) return x;
    std::vector<float> mask(x.size());
    const float keep = 1.0f - p;
    for (auto& m : mask) m = rng.u01() < p ? 0.0f : 1.0f / keep;
    DiffArray m = DiffArray::constant(x.shape(), std::move(mask));
    return mul(x, m);
}

// ---------------------------------------------------------------------------
// dense / matmul

// x: [..., d], w: [d, n], b: [n] (optional, pass undefined to skip).
inline DiffArray affine(const DiffArray& x, const DiffArray& w, const DiffArray& b) {
    detail::expect_min_ndim("affine", x, 1);
    detail::expect_ndim("affine", w, 2);
    const int d = x.dim(x.ndim() - 1);
    const int n = w.dim(1);
    if (w.dim(0) != d)
        throw DimensionError("affine: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
    if (b.defined() && (b.ndim() != 1 || b.dim(0) != n))
        throw DimensionError("affine: bias " + shape_str(b.shape()) + " vs weight " + shape_str(w.shape()));

    const std::int64_t rows = detail::leading_rows(x.shape());
    std::vector<float> out(static_cast<std::size_t>(rows * n));
    {
        CMapRM xm(x.data(), rows, d);
        CMapRM wm(w.data(), d, n);
        MapRM om(out.data(), rows, n);
        om.noalias() = xm * wm;
        if (b.defined()) om.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(b.data(), n);
    }
    Shape oshape = x.shape();
    oshape.back() = n;
    return detail::make_op("affine", std::move(oshape), std::move(out), {x, w, b},
                           [x, w, b, rows, d, n](TapeNode& o) {
                               CMapRM gm(o.grad.data(), rows, n);
                               if (x.node()->requires_grad) {
                                   CMapRM wm(w.data(), d, n);
                                   MapRM xg(x.node()->ensure_grad(), rows, d);
                                   xg.noalias() += gm * wm.transpose();
                               }
                               if (w.node()->requires_grad) {
                                   CMapRM xm(x.data(), rows, d);
                                   MapRM wg(w.node()->ensure_grad(), d, n);
                                   wg.noalias() += xm.transpose() * gm;
                               }
                               if (b.defined() && b.node()->requires_grad) {
                                   // fixed row order: Eigen's column reduction picks its
                                   // grouping from buffer alignment, which varies per run
                                   float* bg = b.node()->ensure_grad();
                                   const float* g = o.grad.data();
                                   for (std::int64_t r = 0; r < rows; ++r)
                                       for (int j = 0; j < n; ++j) bg[j] += g[r * n + j];
                               }
                           });
}

inline DiffArray matmul(const DiffArray& x, const DiffArray& w) { return affine(x, w, DiffArray()); }

// ---------------------------------------------------------------------------
// embedding lookup

// table: [V, H], ids laid out as `shape` (out gets a trailing H axis).
inline DiffArray embedding(const DiffArray& table, const std::vector<int>& ids, Shape shape) {
    detail::expect_ndim("embedding", table, 2);
    if (static_cast<std::int64_t>(ids.size()) != numel(shape))
        throw DimensionError("embedding: id count does not match shape " + shape_str(shape));
    const int V = table.dim(0);
    const int H = table.dim(1);
    std::vector<float> out(ids.size() * static_cast<std::size_t>(H));
    for (std::size_t i = 0; i < ids.size(); ++i) {
        int id = ids[i];
        if (id < 0 || id >= V)
            throw RangeError("embedding: id " + std::to_string(id) + " outside table of " + std::to_string(V));
        std::memcpy(out.data() + i * H, table.data() + static_cast<std::size_t>(id) * H,
                    sizeof(float) * static_cast<std::size_t>(H));
    }
    shape.push_back(H);
    return detail::make_op("embedding", std::move(shape), std::move(out), {table},
                           [table, ids, H](TapeNode& o) {
                               float* g = table.node()->ensure_grad();
                               for (std::size_t i = 0; i < ids.size(); ++i) {
                                   const float* src = o.grad.data() + i * H;
                                   float* dst = g + static_cast<std::size_t>(ids[i]) * H;
                                   for (int c = 0; c < H; ++c) dst[c] += src[c];
                               }
                           });
}

// ---------------------------------------------------------------------------
// 1-d convolution, SAME padding, x: [B, L, Cin], w: [k, Cin, Cout], b: [Cout]

inline DiffArray conv1d(const DiffArray& x, const DiffArray& w, const DiffArray& b, int stride) {
    detail::expect_ndim("conv1d", x, 3);
    detail::expect_ndim("conv1d", w, 3);
    if (stride < 1) throw ConfigError("conv1d: stride must be >= 1, got " + std::to_string(stride));
    const int B = x.dim(0), L = x.dim(1), Cin = x.dim(2);
    const int k = w.dim(0), Cout = w.dim(2);
    if (k < 1) throw ConfigError("conv1d: kernel size must be >= 1, got " + std::to_string(k));
    if (w.dim(1) != Cin)
        throw DimensionError("conv1d: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
    if (b.defined() && (b.ndim() != 1 || b.dim(0) != Cout))
        throw DimensionError("conv1d: bias " + shape_str(b.shape()) + " vs weight " + shape_str(w.shape()));

    const int Lo = (L + stride - 1) / stride;
    const int pad_total = std::max(0, (Lo - 1) * stride + k - L);
    const int pad_left = pad_total / 2;

    // im2col: [B*Lo, k*Cin]; out-of-range taps stay zero.
    const std::int64_t rows = static_cast<std::int64_t>(B) * Lo;
    std::vector<float> col(static_cast<std::size_t>(rows * k * Cin), 0.0f);
    for (int bi = 0; bi < B; ++bi) {
        const float* xb = x.data() + static_cast<std::size_t>(bi) * L * Cin;
        for (int t = 0; t < Lo; ++t) {
            float* row = col.data() + (static_cast<std::size_t>(bi) * Lo + t) * k * Cin;
            const int start = t * stride - pad_left;
            for (int j = 0; j < k; ++j) {
                const int src = start + j;
                if (src >= 0 && src < L)
                    std::memcpy(row + static_cast<std::size_t>(j) * Cin, xb + static_cast<std::size_t>(src) * Cin,
                                sizeof(float) * static_cast<std::size_t>(Cin));
            }
        }
    }

    std::vector<float> out(static_cast<std::size_t>(rows * Cout));
    {
        CMapRM cm(col.data(), rows, static_cast<std::int64_t>(k) * Cin);
        CMapRM wm(w.data(), static_cast<std::int64_t>(k) * Cin, Cout);
        MapRM om(out.data(), rows, Cout);
        om.noalias() = cm * wm;
        if (b.defined()) om.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(b.data(), Cout);
    }
    return detail::make_op(
        "conv1d", {B, Lo, Cout}, std::move(out), {x, w, b},
        [x, w, b, col = std::move(col), B, L, Cin, k, Cout, Lo, stride, pad_left, rows](TapeNode& o) {
            CMapRM gm(o.grad.data(), rows, Cout);
            if (w.node()->requires_grad) {
                CMapRM cm(col.data(), rows, static_cast<std::int64_t>(k) * Cin);
                MapRM wg(w.node()->ensure_grad(), static_cast<std::int64_t>(k) * Cin, Cout);
                wg.noalias() += cm.transpose() * gm;
            }
            if (b.defined() && b.node()->requires_grad) {
                // fixed row order, same reasoning as the affine bias
                float* bg = b.node()->ensure_grad();
                const float* g = o.grad.data();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < Cout; ++j) bg[j] += g[r * Cout + j];
            }
            if (x.node()->requires_grad) {
                RowMat dcol(rows, static_cast<std::int64_t>(k) * Cin);
                CMapRM wm(w.data(), static_cast<std::int64_t>(k) * Cin, Cout);
                dcol.noalias() = gm * wm.transpose();
                float* xg = x.node()->ensure_grad();
                for (int bi = 0; bi < B; ++bi) {
                    float* xgb = xg + static_cast<std::size_t>(bi) * L * Cin;
                    for (int t = 0; t < Lo; ++t) {
                        const float* row = dcol.data() + (static_cast<std::size_t>(bi) * Lo + t) * k * Cin;
                        const int start = t * stride - pad_left;
                        for (int j = 0; j < k; ++j) {
                            const int src = start + j;
                            if (src < 0 || src >= L) continue;
                            float* dst = xgb + static_cast<std::size_t>(src) * Cin;
                            const float* s = row + static_cast<std::size_t>(j) * Cin;
                            for (int c = 0; c < Cin; ++c) dst[c] += s[c];
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// layer norm over the last axis

inline DiffArray layer_norm(const DiffArray& x, const DiffArray& gain, const DiffArray& bias,
                            float eps = 1e-6f) {
    detail::expect_min_ndim("layer_norm", x, 1);
    const int d = x.dim(x.ndim() - 1);
    if (gain.ndim() != 1 || gain.dim(0) != d || bias.ndim() != 1 || bias.dim(0) != d)
        throw DimensionError("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
    const std::int64_t rows = detail::leading_rows(x.shape());

    std::vector<float> out(x.size());
    std::vector<float> xhat(x.size());
    std::vector<float> inv_std(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const float* xr = x.data() + r * d;
        double mu = 0.0;
        for (int i = 0; i < d; ++i) mu += xr[i];
        mu /= d;
        double var = 0.0;
        for (int i = 0; i < d; ++i) {
            double c = xr[i] - mu;
            var += c * c;
        }
        var /= d;
        const float is = 1.0f / std::sqrt(static_cast<float>(var) + eps);
        inv_std[static_cast<std::size_t>(r)] = is;
        float* hr = xhat.data() + r * d;
        float* orow = out.data() + r * d;
        for (int i = 0; i < d; ++i) {
            hr[i] = (xr[i] - static_cast<float>(mu)) * is;
            orow[i] = hr[i] * gain.data()[i] + bias.data()[i];
        }
    }
    return detail::make_op(
        "layer_norm", x.shape(), std::move(out), {x, gain, bias},
        [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](TapeNode& o) {
            for (std::int64_t r = 0; r < rows; ++r) {
                const float* go = o.grad.data() + r * d;
                const float* hr = xhat.data() + r * d;
                if (gain.node()->requires_grad) {
                    float* gg = gain.node()->ensure_grad();
                    for (int i = 0; i < d; ++i) gg[i] += go[i] * hr[i];
                }
                if (bias.node()->requires_grad) {
                    float* bg = bias.node()->ensure_grad();
                    for (int i = 0; i < d; ++i) bg[i] += go[i];
                }
                if (x.node()->requires_grad) {
                    float* xg = x.node()->ensure_grad() + r * d;
                    double sum_dh = 0.0, sum_dh_h = 0.0;
                    for (int i = 0; i < d; ++i) {
                        const double dh = static_cast<double>(go[i]) * gain.data()[i];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[i];
                    }
                    const float is = inv_std[static_cast<std::size_t>(r)];
                    const float m1 = static_cast<float>(sum_dh / d);
                    const float m2 = static_cast<float>(sum_dh_h / d);
                    for (int i = 0; i < d; ++i) {
                        const float dh = go[i] * gain.data()[i];
                        xg[i] += is * (dh - m1 - hr[i] * m2);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// softmax family (last axis)

namespace detail {
inline void softmax_rows(const float* x, float* out, std::int64_t rows, int d) {
    for (std::int64_t r = 0; r < rows; ++r) {
        const float* xr = x + r * d;
        float* o = out + r * d;
        float m = xr[0];
        for (int i = 1; i < d; ++i) m = std::max(m, xr[i]);
        double z = 0.0;
        for (int i = 0; i < d; ++i) {
            o[i] = std::exp(xr[i] - m);
            z += o[i];
        }
        const float inv = static_cast<float>(1.0 / z);
        for (int i = 0; i < d; ++i) o[i] *= inv;
    }
}
} // namespace detail

inline DiffArray softmax(const DiffArray& x) {
    detail::expect_min_ndim("softmax", x, 1);
    const int d = x.dim(x.ndim() - 1);
    const std::int64_t rows = detail::leading_rows(x.shape());
    std::vector<float> out(x.size());
    detail::softmax_rows(x.data(), out.data(), rows, d);
    return detail::make_op("softmax", x.shape(), std::move(out), {x}, [x, rows, d](TapeNode& o) {
        float* xg = x.node()->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const float* p = o.value.data() + r * d;
            const float* go = o.grad.data() + r * d;
            double dot = 0.0;
            for (int i = 0; i < d; ++i) dot += static_cast<double>(go[i]) * p[i];
            for (int i = 0; i < d; ++i) xg[r * d + i] += p[i] * (go[i] - static_cast<float>(dot));
        }
    });
}

inline DiffArray log_softmax(const DiffArray& x) {
    detail::expect_min_ndim("log_softmax", x, 1);
    const int d = x.dim(x.ndim() - 1);
    const std::int64_t rows = detail::leading_rows(x.shape());
    std::vector<float> out(x.size());
    for (std::int64_t r = 0; r < rows; ++r) {
        const float* xr = x.data() + r * d;
        float* o = out.data() + r * d;
        float m = xr[0];
        for (int i = 1; i < d; ++i) m = std::max(m, xr[i]);
        double z = 0.0;
        for (int i = 0; i < d; ++i) z += std::exp(static_cast<double>(xr[i]) - m);
        const float lse = m + static_cast<float>(std::log(z));
        for (int i = 0; i < d; ++i) o[i] = xr[i] - lse;
    }
    return detail::make_op("log_softmax", x.shape(), std::move(out), {x}, [x, rows, d](TapeNode& o) {
        float* xg = x.node()->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const float* ly = o.value.data() + r * d;
            const float* go = o.grad.data() + r * d;
            double gsum = 0.0;
            for (int i = 0; i < d; ++i) gsum += go[i];
            for (int i = 0; i < d; ++i)
                xg[r * d + i] += go[i] - static_cast<float>(gsum) * std::exp(ly[i]);
        }
    });
}

// ---------------------------------------------------------------------------
// masked mean cross entropy, nats

// logits: [N, V]; targets/mask: length N. Returns the mean negative log
// likelihood over positions with nonzero mask.
inline DiffArray cross_entropy(const DiffArray& logits, const std::vector<int>& targets,
                               const std::vector<float>& mask) {
    detail::expect_ndim("cross_entropy", logits, 2);
    const std::int64_t N = logits.dim(0);
    const int V = logits.dim(1);
    if (static_cast<std::int64_t>(targets.size()) != N || static_cast<std::int64_t>(mask.size()) != N)
        throw DimensionError("cross_entropy: targets/mask length must be " + std::to_string(N));

    double mask_sum = 0.0;
    for (float m : mask) mask_sum += m;
    if (mask_sum <= 0.0) throw DataError("cross_entropy: mask selects no positions");

    std::vector<float> probs(logits.size());
    detail::softmax_rows(logits.data(), probs.data(), N, V);
    double acc = 0.0;
    for (std::int64_t r = 0; r < N; ++r) {
        if (mask[static_cast<std::size_t>(r)] == 0.0f) continue;
        const int t = targets[static_cast<std::size_t>(r)];
        if (t < 0 || t >= V)
            throw RangeError("cross_entropy: target " + std::to_string(t) + " outside vocab of " + std::to_string(V));
        const double p = std::max(static_cast<double>(probs[r * V + t]), 1e-30);
        acc -= mask[static_cast<std::size_t>(r)] * std::log(p);
    }
    const float loss = static_cast<float>(acc / mask_sum);
    return detail::make_op("cross_entropy", {1}, {loss}, {logits},
                           [logits, targets, mask, probs = std::move(probs), mask_sum, N, V](TapeNode& o) {
                               const float g = o.grad[0] / static_cast<float>(mask_sum);
                               float* lg = logits.node()->ensure_grad();
                               for (std::int64_t r = 0; r < N; ++r) {
                                   const float m = mask[static_cast<std::size_t>(r)];
                                   if (m == 0.0f) continue;
                                   const int t = targets[static_cast<std::size_t>(r)];
                                   const float* p = probs.data() + r * V;
                                   float* row = lg + r * V;
                                   for (int v = 0; v < V; ++v) row[v] += g * m * p[v];
                                   row[t] -= g * m;
                               }
                           });
}

// ---------------------------------------------------------------------------
// time-axis reshuffles on [B, T, H]

inline DiffArray concat_time(const DiffArray& a, const DiffArray& b) {
    detail::expect_ndim("concat_time", a, 3);
    detail::expect_ndim("concat_time", b, 3);
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
        throw DimensionError("concat_time: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int B = a.dim(0), Ta = a.dim(1), Tb = b.dim(1), H = a.dim(2);
    std::vector<float> out(static_cast<std::size_t>(B) * (Ta + Tb) * H);
    for (int bi = 0; bi < B; ++bi) {
        std::memcpy(out.data() + static_cast<std::size_t>(bi) * (Ta + Tb) * H,
                    a.data() + static_cast<std::size_t>(bi) * Ta * H, sizeof(float) * static_cast<std::size_t>(Ta) * H);
        std::memcpy(out.data() + (static_cast<std::size_t>(bi) * (Ta + Tb) + Ta) * H,
                    b.data() + static_cast<std::size_t>(bi) * Tb * H, sizeof(float) * static_cast<std::size_t>(Tb) * H);
    }
    return detail::make_op("concat_time", {B, Ta + Tb, H}, std::move(out), {a, b},
                           [a, b, B, Ta, Tb, H](TapeNode& o) {
                               for (int bi = 0; bi < B; ++bi) {
                                   const float* go = o.grad.data() + static_cast<std::size_t>(bi) * (Ta + Tb) * H;
                                   if (a.node()->requires_grad) {
                                       float* ga = a.node()->ensure_grad() + static_cast<std::size_t>(bi) * Ta * H;
                                       for (int i = 0; i < Ta * H; ++i) ga[i] += go[i];
                                   }
                                   if (b.node()->requires_grad) {
                                       float* gb = b.node()->ensure_grad() + static_cast<std::size_t>(bi) * Tb * H;
                                       for (int i = 0; i < Tb * H; ++i) gb[i] += go[static_cast<std::size_t>(Ta) * H + i];
                                   }
                               }
                           });
}

inline DiffArray slice_time(const DiffArray& x, int start, int len) {
    detail::expect_ndim("slice_time", x, 3);
    const int B = x.dim(0), T = x.dim(1), H = x.dim(2);
    if (start < 0 || len < 1 || start + len > T)
        throw DimensionError("slice_time: [" + std::to_string(start) + ", " + std::to_string(start + len) +
                             ") outside length " + std::to_string(T));
    std::vector<float> out(static_cast<std::size_t>(B) * len * H);
    for (int bi = 0; bi < B; ++bi)
        std::memcpy(out.data() + static_cast<std::size_t>(bi) * len * H,
                    x.data() + (static_cast<std::size_t>(bi) * T + start) * H,
                    sizeof(float) * static_cast<std::size_t>(len) * H);
    return detail::make_op("slice_time", {B, len, H}, std::move(out), {x},
                           [x, B, T, H, start, len](TapeNode& o) {
                               float* xg = x.node()->ensure_grad();
                               for (int bi = 0; bi < B; ++bi) {
                                   const float* go = o.grad.data() + static_cast<std::size_t>(bi) * len * H;
                                   float* dst = xg + (static_cast<std::size_t>(bi) * T + start) * H;
                                   for (int i = 0; i < len * H; ++i) dst[i] += go[i];
                               }
                           });
}

inline DiffArray reverse_time(const DiffArray& x) {
    detail::expect_ndim("reverse_time", x, 3);
    const int B = x.dim(0), T = x.dim(1), H = x.dim(2);
    std::vector<float> out(x.size());
    for (int bi = 0; bi < B; ++bi)
        for (int t = 0; t < T; ++t)
            std::memcpy(out.data() + (static_cast<std::size_t>(bi) * T + t) * H,
                        x.data() + (static_cast<std::size_t>(bi) * T + (T - 1 - t)) * H,
                        sizeof(float) * static_cast<std::size_t>(H));
    return detail::make_op("reverse_time", x.shape(), std::move(out), {x}, [x, B, T, H](TapeNode& o) {
        float* xg = x.node()->ensure_grad();
        for (int bi = 0; bi < B; ++bi)
            for (int t = 0; t < T; ++t) {
                const float* go = o.grad.data() + (static_cast<std::size_t>(bi) * T + t) * H;
                float* dst = xg + (static_cast<std::size_t>(bi) * T + (T - 1 - t)) * H;
                for (int c = 0; c < H; ++c) dst[c] += go[c];
            }
    });
}

// v: [H] -> [B, 1, H] (shared row, summed gradient).
inline DiffArray tile_row(const DiffArray& v, int B) {
    detail::expect_ndim("tile_row", v, 1);
    const int H = v.dim(0);
    std::vector<float> out(static_cast<std::size_t>(B) * H);
    for (int bi = 0; bi < B; ++bi)
        std::memcpy(out.data() + static_cast<std::size_t>(bi) * H, v.data(), sizeof(float) * static_cast<std::size_t>(H));
    return detail::make_op("tile_row", {B, 1, H}, std::move(out), {v}, [v, B, H](TapeNode& o) {
        float* g = v.node()->ensure_grad();
        for (int bi = 0; bi < B; ++bi)
            for (int c = 0; c < H; ++c) g[c] += o.grad[static_cast<std::size_t>(bi) * H + c];
    });
}

// ---------------------------------------------------------------------------
// multi-head scaled dot-product attention

// q, k, v: [B, T, H] with H divisible by n_heads. Causal masking keeps
// position i from attending to j > i; the first bidirectional_prefix
// positions instead attend freely among themselves (and never past the
// prefix), so a given prefix can be encoded non-causally.
inline DiffArray attention(const DiffArray& q, const DiffArray& k, const DiffArray& v, int n_heads,
                           bool causal, int bidirectional_prefix = 0) {
    detail::expect_ndim("attention", q, 3);
    detail::expect_same_shape("attention", q, k);
    detail::expect_same_shape("attention", q, v);
    const int B = q.dim(0), T = q.dim(1), H = q.dim(2);
    if (n_heads < 1 || H % n_heads != 0)
        throw ConfigError("attention: heads " + std::to_string(n_heads) + " must divide width " + std::to_string(H));
    if (bidirectional_prefix < 0 || bidirectional_prefix > T)
        throw ConfigError("attention: bidirectional_prefix outside [0, T]");
    const int dh = H / n_heads;
    const float scl = 1.0f / std::sqrt(static_cast<float>(dh));

    using StrideT = Eigen::OuterStride<>;
    auto head_view = [&](const float* base, int bi, int h) {
        return Eigen::Map<const RowMat, 0, StrideT>(
            base + static_cast<std::size_t>(bi) * T * H + static_cast<std::size_t>(h) * dh, T, dh, StrideT(H));
    };

    std::vector<float> out(q.size());
    std::vector<float> probs(static_cast<std::size_t>(B) * n_heads * T * T);
    RowMat s(T, T);
    for (int bi = 0; bi < B; ++bi) {
        for (int h = 0; h < n_heads; ++h) {
            auto qh = head_view(q.data(), bi, h);
            auto kh = head_view(k.data(), bi, h);
            auto vh = head_view(v.data(), bi, h);
            s.noalias() = qh * kh.transpose() * scl;
            if (causal) {
                const int p = bidirectional_prefix;
                for (int i = 0; i < T; ++i) {
                    const int first_masked = i < p ? p : i + 1;
                    for (int j = first_masked; j < T; ++j) s(i, j) = -1e9f;
                }
            }
            float* p = probs.data() + (static_cast<std::size_t>(bi) * n_heads + h) * T * T;
            detail::softmax_rows(s.data(), p, T, T);
            CMapRM pm(p, T, T);
            Eigen::Map<RowMat, 0, StrideT> oh(
                out.data() + static_cast<std::size_t>(bi) * T * H + static_cast<std::size_t>(h) * dh, T, dh, StrideT(H));
            oh.noalias() = pm * vh;
        }
    }
    return detail::make_op(
        "attention", q.shape(), std::move(out), {q, k, v},
        [q, k, v, probs = std::move(probs), B, T, H, n_heads, dh, scl](TapeNode& o) {
            using StrideT = Eigen::OuterStride<>;
            auto cview = [&](const float* base, int bi, int h) {
                return Eigen::Map<const RowMat, 0, StrideT>(
                    base + static_cast<std::size_t>(bi) * T * H + static_cast<std::size_t>(h) * dh, T, dh, StrideT(H));
            };
            auto view = [&](float* base, int bi, int h) {
                return Eigen::Map<RowMat, 0, StrideT>(
                    base + static_cast<std::size_t>(bi) * T * H + static_cast<std::size_t>(h) * dh, T, dh, StrideT(H));
            };
            float* qg = q.node()->requires_grad ? q.node()->ensure_grad() : nullptr;
            float* kg = k.node()->requires_grad ? k.node()->ensure_grad() : nullptr;
            float* vg = v.node()->requires_grad ? v.node()->ensure_grad() : nullptr;
            RowMat dp(T, T), ds(T, T);
            for (int bi = 0; bi < B; ++bi) {
                for (int h = 0; h < n_heads; ++h) {
                    CMapRM pm(probs.data() + (static_cast<std::size_t>(bi) * n_heads + h) * T * T, T, T);
                    auto go = cview(o.grad.data(), bi, h);
                    if (vg) view(vg, bi, h).noalias() += pm.transpose() * go;
                    if (!qg && !kg) continue;
                    dp.noalias() = go * cview(v.data(), bi, h).transpose();
                    for (int i = 0; i < T; ++i) {
                        const float row_dot = pm.row(i).dot(dp.row(i));
                        ds.row(i) = (pm.row(i).array() * (dp.row(i).array() - row_dot)).matrix();
                    }
                    if (qg) view(qg, bi, h).noalias() += ds * cview(k.data(), bi, h) * scl;
                    if (kg) view(kg, bi, h).noalias() += ds.transpose() * cview(q.data(), bi, h) * scl;
                }
            }
        });
}

// ---------------------------------------------------------------------------
// usage penalty for the continuous relaxation baseline

// y: [R, V] rows of simplex weights. Returns weight * sum_v m_v ln m_v with
// m = mean over rows, i.e. the negated entropy of the average usage.
inline DiffArray neg_entropy_of_mean(const DiffArray& y, float weight) {
    detail::expect_ndim("neg_entropy_of_mean", y, 2);
    const std::int64_t R = y.dim(0);
    const int V = y.dim(1);
    std::vector<double> mean(static_cast<std::size_t>(V), 0.0);
    for (std::int64_t r = 0; r < R; ++r)
        for (int c = 0; c < V; ++c) mean[static_cast<std::size_t>(c)] += y.data()[r * V + c];
    double acc = 0.0;
    std::vector<float> dmean(static_cast<std::size_t>(V));
    for (int c = 0; c < V; ++c) {
        const double m = std::max(mean[static_cast<std::size_t>(c)] / static_cast<double>(R), 1e-30);
        acc += m * std::log(m);
        dmean[static_cast<std::size_t>(c)] =
            static_cast<float>(weight * (std::log(m) + 1.0) / static_cast<double>(R));
    }
    const float loss = static_cast<float>(weight * acc);
    return detail::make_op("neg_entropy_of_mean", {1}, {loss}, {y},
                           [y, dmean = std::move(dmean), R, V](TapeNode& o) {
                               float* g = y.node()->ensure_grad();
                               for (std::int64_t r = 0; r < R; ++r)
                                   for (int c = 0; c < V; ++c)
                                       g[r * V + c] += o.grad[0] * dmean[static_cast<std::size_t>(c)];
                           });
}

} // namespace dsqa
