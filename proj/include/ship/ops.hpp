#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "ship/tensor.hpp"

namespace ship {

// Differentiable operations. Every op computes the forward value eagerly and,
// when an active tape exists and the result requires grad, records a closure
// that scatters d(out) into the inputs' grad buffers. Loop orders are fixed,
// so identical inputs always produce bitwise-identical outputs.

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
}

inline Tensor make_output(std::vector<std::size_t> shape, bool requires_grad) {
    Tensor out(std::move(shape));
    if (requires_grad) out.set_requires_grad(true);
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul: (m x k) . (k x n) -> (m x n)
// ---------------------------------------------------------------------------
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = detail::make_output({m, n}, a.requires_grad() || b.requires_grad());

    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = out.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double aik = pa[i * k + p];
            if (aik == 0.0) continue;
            const double* brow = pb + p * n;
            double* crow = pc + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }

    if (detail::should_record(out.requires_grad())) {
        detail::record_step([a, b, out, m, k, n]() mutable {
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                double* ga = a.grad().data();
                const double* pb2 = b.data();
                // dA = dC . B^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        const double* grow = g + i * n;
                        const double* brow = pb2 + p * n;
                        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ga[i * k + p] += acc;
                    }
            }
            if (b.requires_grad()) {
                double* gb = b.grad().data();
                const double* pa2 = a.data();
                // dB = A^T . dC
                for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = g + i * n;
                    for (std::size_t p = 0; p < k; ++p) {
                        const double aik = pa2[i * k + p];
                        if (aik == 0.0) continue;
                        double* gbrow = gb + p * n;
                        for (std::size_t j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
                    }
                }
            }
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: expected rank-2, got " + shape_str(a.shape()));
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor out = detail::make_output({n, m}, a.requires_grad());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
    if (detail::should_record(out.requires_grad())) {
        detail::record_step([a, out, m, n]() mutable {
            double* ga = a.grad().data();
            const double* g = out.grad().data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------
inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    Tensor out = detail::make_output(a.shape(), a.requires_grad() || b.requires_grad());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (detail::should_record(out.requires_grad())) {
        detail::record_step([a, b, out]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor out = detail::make_output(a.shape(), a.requires_grad() || b.requires_grad());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    if (detail::should_record(out.requires_grad())) {
        detail::record_step([a, b, out]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor out = detail::make_output(a.shape(), a.requires_grad() || b.requires_grad());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (detail::should_record(out.requires_grad())) {
        detail::record_step([a, b, out]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.data()[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.data()[i];
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& a, double c) {
    Tensor out = detail::make_output(a.shape(), a.requires_grad());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * c;
    if (detail::should_record(out.requires_grad())) {
        detail::record_step([a, out, c]() mutable {
            auto& ga = a.grad();
            const auto& g = out.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
        });
    }
    return out;
}

inline Tensor add_scalar(const Tensor& a, double c) {
    Tensor out = detail::make_output(a.shape(), a.requires_grad());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + c;
    if (detail::should_record(out.requires_grad())) {
        detail::record_step([a, out]() mutable {
            auto& ga = a.grad();
            const auto& g = out.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        });
    }
    return out;
}

// out[i][j] = a[i][j] + bias[j]
inline Tensor add_row(const Tensor& a, const Tensor& bias) {
    if (a.rank() != 2 || bias.rank() != 1 || bias.dim(0) != a.dim(1)) {
        throw ShapeError("add_row: " + shape_str(a.shape()) + " vs bias " + shape_str(bias.shape()));
    }
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor out = detail::make_output(a.shape(), a.requires_grad() || bias.requires_grad());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data()[i * n + j] = a.data()[i * n + j] + bias.data()[j];
    if (detail::should_record(out.requires_grad())) {
        detail::record_step([a, bias, out, m, n]() mutable {
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                double* ga = a.grad().data();
                for (std::size_t i = 0; i < m * n; ++i) ga[i] += g[i];
            }
            if (bias.requires_grad()) {
                double* gb = bias.grad().data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax along an axis, stabilized by max subtraction. Rows along the axis
// are nonnegative and sum to 1.
// ---------------------------------------------------------------------------
inline Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape()));
    }
    const std::size_t len = x.dim(axis);
    if (len == 0) throw ShapeError("softmax: empty axis " + std::to_string(axis));

    std::size_t inner = 1, outer = 1;
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);

    Tensor out = detail::make_output(x.shape(), x.requires_grad());
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = px[base];
            for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, px[base + l * inner]);
            double sum = 0.0;
            for (std::size_t l = 0; l < len; ++l) {
                const double e = std::exp(px[base + l * inner] - mx);
                po[base + l * inner] = e;
                sum += e;
            }
            for (std::size_t l = 0; l < len; ++l) po[base + l * inner] /= sum;
        }
    }

    if (detail::should_record(out.requires_grad())) {
        detail::record_step([x, out, len, inner, outer]() mutable {
            double* gx = x.grad().data();
            const double* g = out.grad().data();
            const double* s = out.data();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    double dot = 0.0;
                    for (std::size_t l = 0; l < len; ++l)
                        dot += g[base + l * inner] * s[base + l * inner];
                    for (std::size_t l = 0; l < len; ++l) {
                        const std::size_t idx = base + l * inner;
                        gx[idx] += s[idx] * (g[idx] - dot);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// layer_norm over the last axis of a rank-2 input, with affine parameters.
// Default epsilon is tiny: normalized rows should carry mean 0 / variance 1
// essentially exactly at f64.
// ---------------------------------------------------------------------------
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-12) {
    if (x.rank() != 2) throw ShapeError("layer_norm: expected rank-2, got " + shape_str(x.shape()));
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (gamma.rank() != 1 || gamma.dim(0) != n || beta.rank() != 1 || beta.dim(0) != n) {
        throw ShapeError("layer_norm: affine params " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match width " + std::to_string(n));
    }
    Tensor out = detail::make_output(
        x.shape(), x.requires_grad() || gamma.requires_grad() || beta.requires_grad());

    std::vector<double> inv_sigma(m), xhat(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = x.data() + i * n;
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += row[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[i] = is;
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (row[j] - mean) * is;
            xhat[i * n + j] = h;
            out.data()[i * n + j] = h * gamma.data()[j] + beta.data()[j];
        }
    }

    if (detail::should_record(out.requires_grad())) {
        detail::record_step([x, gamma, beta, out, m, n, inv_sigma, xhat]() mutable {
            const double* g = out.grad().data();
            if (gamma.requires_grad()) {
                double* gg = gamma.grad().data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
            }
            if (beta.requires_grad()) {
                double* gb = beta.grad().data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
            }
            if (x.requires_grad()) {
                double* gx = x.grad().data();
                for (std::size_t i = 0; i < m; ++i) {
                    double mean_dy = 0.0, mean_dy_xhat = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dy = g[i * n + j] * gamma.data()[j];
                        mean_dy += dy;
                        mean_dy_xhat += dy * xhat[i * n + j];
                    }
                    mean_dy /= static_cast<double>(n);
                    mean_dy_xhat /= static_cast<double>(n);
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dy = g[i * n + j] * gamma.data()[j];
                        gx[i * n + j] +=
                            inv_sigma[i] * (dy - mean_dy - xhat[i * n + j] * mean_dy_xhat);
                    }
                }
            }
        });
    }
    return out;
}

// Exact GELU: 0.5 x (1 + erf(x / sqrt(2)))
inline Tensor gelu(const Tensor& x) {
    Tensor out = detail::make_output(x.shape(), x.requires_grad());
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x.data()[i];
        out.data()[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    }
    if (detail::should_record(out.requires_grad())) {
        detail::record_step([x, out]() mutable {
            constexpr double inv_sqrt_2pi = 0.3989422804014326779;
            auto& gx = x.grad();
            const auto& g = out.grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double v = x.data()[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865475244));
                const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
                gx[i] += g[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Token-axis (row) concatenation and slicing. Concatenation then slicing is
// the identity.
// ---------------------------------------------------------------------------
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    std::size_t cols = 0;
    bool cols_known = false;
    std::size_t rows = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        if (p.rank() != 2) throw ShapeError("concat_rows: expected rank-2, got " + shape_str(p.shape()));
        if (p.dim(0) == 0) continue;  // empty block contributes nothing
        if (!cols_known) {
            cols = p.dim(1);
            cols_known = true;
        } else if (p.dim(1) != cols) {
            throw ShapeError("concat_rows: column mismatch " + std::to_string(cols) + " vs " +
                             shape_str(p.shape()));
        }
        rows += p.dim(0);
        rg = rg || p.requires_grad();
    }
    if (!cols_known) cols = parts.front().dim(1);
    Tensor out = detail::make_output({rows, cols}, rg);
    std::size_t r = 0;
    for (const Tensor& p : parts) {
        std::copy(p.data(), p.data() + p.size(), out.data() + r * cols);
        r += p.dim(0);
    }
    if (detail::should_record(out.requires_grad())) {
        detail::record_step([parts, out, cols]() mutable {
            const double* g = out.grad().data();
            std::size_t r = 0;
            for (const Tensor& p : parts) {
                if (p.requires_grad()) {
                    double* gp = p.grad().data();
                    for (std::size_t i = 0; i < p.size(); ++i) gp[i] += g[r * cols + i];
                }
                r += p.dim(0);
            }
        });
    }
    return out;
}

inline Tensor slice_rows(const Tensor& a, std::size_t row0, std::size_t nrows) {
    if (a.rank() != 2) throw ShapeError("slice_rows: expected rank-2, got " + shape_str(a.shape()));
    if (row0 + nrows > a.dim(0)) {
        throw ShapeError("slice_rows: range [" + std::to_string(row0) + ", " +
                         std::to_string(row0 + nrows) + ") exceeds " + shape_str(a.shape()));
    }
    const std::size_t n = a.dim(1);
    Tensor out = detail::make_output({nrows, n}, a.requires_grad());
    std::copy(a.data() + row0 * n, a.data() + (row0 + nrows) * n, out.data());
    if (detail::should_record(out.requires_grad())) {
        detail::record_step([a, out, row0, nrows, n]() mutable {
            double* ga = a.grad().data();
            const double* g = out.grad().data();
            for (std::size_t i = 0; i < nrows * n; ++i) ga[row0 * n + i] += g[i];
        });
    }
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t rows = parts.front().dim(0);
    std::size_t cols = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.dim(0) != rows) {
            throw ShapeError("concat_cols: row mismatch " + std::to_string(rows) + " vs " +
                             shape_str(p.shape()));
        }
        cols += p.dim(1);
        rg = rg || p.requires_grad();
    }
    Tensor out = detail::make_output({rows, cols}, rg);
    std::size_t c = 0;
    for (const Tensor& p : parts) {
        const std::size_t pn = p.dim(1);
        for (std::size_t i = 0; i < rows; ++i)
            std::copy(p.data() + i * pn, p.data() + (i + 1) * pn, out.data() + i * cols + c);
        c += pn;
    }
    if (detail::should_record(out.requires_grad())) {
        detail::record_step([parts, out, rows, cols]() mutable {
            const double* g = out.grad().data();
            std::size_t c = 0;
            for (const Tensor& p : parts) {
                const std::size_t pn = p.dim(1);
                if (p.requires_grad()) {
                    double* gp = p.grad().data();
                    for (std::size_t i = 0; i < rows; ++i)
                        for (std::size_t j = 0; j < pn; ++j) gp[i * pn + j] += g[i * cols + c + j];
                }
                c += pn;
            }
        });
    }
    return out;
}

inline Tensor slice_cols(const Tensor& a, std::size_t col0, std::size_t ncols) {
    if (a.rank() != 2) throw ShapeError("slice_cols: expected rank-2, got " + shape_str(a.shape()));
    if (col0 + ncols > a.dim(1)) {
        throw ShapeError("slice_cols: range [" + std::to_string(col0) + ", " +
                         std::to_string(col0 + ncols) + ") exceeds " + shape_str(a.shape()));
    }
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor out = detail::make_output({m, ncols}, a.requires_grad());
    for (std::size_t i = 0; i < m; ++i)
        std::copy(a.data() + i * n + col0, a.data() + i * n + col0 + ncols, out.data() + i * ncols);
    if (detail::should_record(out.requires_grad())) {
        detail::record_step([a, out, col0, ncols, m, n]() mutable {
            double* ga = a.grad().data();
            const double* g = out.grad().data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < ncols; ++j) ga[i * n + col0 + j] += g[i * ncols + j];
        });
    }
    return out;
}

// Row gather; duplicate indices accumulate gradient additively.
inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
    if (a.rank() != 2) throw ShapeError("gather_rows: expected rank-2, got " + shape_str(a.shape()));
    const std::size_t n = a.dim(1);
    for (std::size_t i : idx)
        if (i >= a.dim(0))
            throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range for " +
                             shape_str(a.shape()));
    Tensor out = detail::make_output({idx.size(), n}, a.requires_grad());
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy(a.data() + idx[r] * n, a.data() + (idx[r] + 1) * n, out.data() + r * n);
    if (detail::should_record(out.requires_grad())) {
        detail::record_step([a, out, idx, n]() mutable {
            double* ga = a.grad().data();
            const double* g = out.grad().data();
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t j = 0; j < n; ++j) ga[idx[r] * n + j] += g[r * n + j];
        });
    }
    return out;
}

// Element gather from a rank-2 tensor; result is rank-1.
inline Tensor gather_coords(const Tensor& a, const std::vector<std::array<std::size_t, 2>>& coords) {
    if (a.rank() != 2) throw ShapeError("gather_coords: expected rank-2, got " + shape_str(a.shape()));
    const std::size_t n = a.dim(1);
    for (const auto& rc : coords)
        if (rc[0] >= a.dim(0) || rc[1] >= n)
            throw ShapeError("gather_coords: coordinate out of range for " + shape_str(a.shape()));
    Tensor out = detail::make_output({coords.size()}, a.requires_grad());
    for (std::size_t i = 0; i < coords.size(); ++i)
        out.data()[i] = a.data()[coords[i][0] * n + coords[i][1]];
    if (detail::should_record(out.requires_grad())) {
        detail::record_step([a, out, coords, n]() mutable {
            double* ga = a.grad().data();
            const double* g = out.grad().data();
            for (std::size_t i = 0; i < coords.size(); ++i)
                ga[coords[i][0] * n + coords[i][1]] += g[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------
inline Tensor sum_all(const Tensor& a) {
    Tensor out = detail::make_output({1}, a.requires_grad());
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a.data()[i];
    out.data()[0] = acc;
    if (detail::should_record(out.requires_grad())) {
        detail::record_step([a, out]() mutable {
            auto& ga = a.grad();
            const double g = out.grad()[0];
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        });
    }
    return out;
}

inline Tensor mean_all(const Tensor& a) {
    if (a.size() == 0) throw ShapeError("mean_all: empty tensor");
    return scale(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

// Column means of a rank-2 tensor -> rank-1 of width n.
inline Tensor mean_rows(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("mean_rows: expected rank-2, got " + shape_str(a.shape()));
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (m == 0) throw ShapeError("mean_rows: no rows in " + shape_str(a.shape()));
    Tensor out = detail::make_output({n}, a.requires_grad());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data()[j] += a.data()[i * n + j];
    for (std::size_t j = 0; j < n; ++j) out.data()[j] /= static_cast<double>(m);
    if (detail::should_record(out.requires_grad())) {
        detail::record_step([a, out, m, n]() mutable {
            double* ga = a.grad().data();
            const double* g = out.grad().data();
            const double inv = 1.0 / static_cast<double>(m);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j] * inv;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Row-wise L2 normalization. Zero-norm rows are rejected outright; callers
// that can legitimately see them must check first.
// ---------------------------------------------------------------------------
inline Tensor l2_normalize_rows(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("l2_normalize_rows: expected rank-2, got " + shape_str(a.shape()));
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor out = detail::make_output(a.shape(), a.requires_grad());
    std::vector<double> inv_norm(m);
    for (std::size_t i = 0; i < m; ++i) {
        double sq = 0.0;
        for (std::size_t j = 0; j < n; ++j) sq += a.data()[i * n + j] * a.data()[i * n + j];
        if (sq == 0.0) {
            throw DegenerateInputError("l2_normalize_rows: zero-norm row " + std::to_string(i));
        }
        inv_norm[i] = 1.0 / std::sqrt(sq);
        for (std::size_t j = 0; j < n; ++j) out.data()[i * n + j] = a.data()[i * n + j] * inv_norm[i];
    }
    if (detail::should_record(out.requires_grad())) {
        detail::record_step([a, out, m, n, inv_norm]() mutable {
            double* ga = a.grad().data();
            const double* g = out.grad().data();
            const double* y = out.data();
            for (std::size_t i = 0; i < m; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                for (std::size_t j = 0; j < n; ++j)
                    ga[i * n + j] += inv_norm[i] * (g[i * n + j] - dot * y[i * n + j]);
            }
        });
    }
    return out;
}

// Cosine similarity of two rank-1 vectors -> scalar in [-1, 1].
inline Tensor cosine_sim(const Tensor& a, const Tensor& b) {
    if (a.rank() != 1 || b.rank() != 1 || a.dim(0) != b.dim(0)) {
        throw ShapeError("cosine_sim: expected equal-length vectors, got " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
    const std::size_t n = a.dim(0);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        dot += a.data()[i] * b.data()[i];
        na += a.data()[i] * a.data()[i];
        nb += b.data()[i] * b.data()[i];
    }
    if (na == 0.0 || nb == 0.0) {
        throw DegenerateInputError("cosine_sim: zero-norm input vector");
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    const double c = dot / (na * nb);
    Tensor out = detail::make_output({1}, a.requires_grad() || b.requires_grad());
    out.data()[0] = c;
    if (detail::should_record(out.requires_grad())) {
        detail::record_step([a, b, out, n, na, nb, c]() mutable {
            const double g = out.grad()[0];
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < n; ++i)
                    ga[i] += g * (b.data()[i] / (na * nb) - c * a.data()[i] / (na * na));
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < n; ++i)
                    gb[i] += g * (a.data()[i] / (na * nb) - c * b.data()[i] / (nb * nb));
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Mean cross-entropy over a batch of logit rows, fused with softmax for
// stability. labels[i] indexes the correct class of row i.
// ---------------------------------------------------------------------------
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy: expected rank-2 logits, got " + shape_str(logits.shape()));
    const std::size_t b = logits.dim(0), c = logits.dim(1);
    if (labels.size() != b) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(b) + " rows");
    }
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= c)
            throw ShapeError("cross_entropy: label " + std::to_string(y) + " out of range [0, " +
                             std::to_string(c) + ")");

    Tensor out = detail::make_output({1}, logits.requires_grad());
    std::vector<double> probs(b * c);
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        const double* row = logits.data() + i * c;
        double mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            probs[i * c + j] = std::exp(row[j] - mx);
            sum += probs[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= sum;
        loss -= std::log(probs[i * c + static_cast<std::size_t>(labels[i])]);
    }
    out.data()[0] = loss / static_cast<double>(b);

    if (detail::should_record(out.requires_grad())) {
        detail::record_step([logits, out, labels, probs, b, c]() mutable {
            double* gl = logits.grad().data();
            const double g = out.grad()[0] / static_cast<double>(b);
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t j = 0; j < c; ++j) {
                    const double onehot = (static_cast<std::size_t>(labels[i]) == j) ? 1.0 : 0.0;
                    gl[i * c + j] += g * (probs[i * c + j] - onehot);
                }
        });
    }
    return out;
}

}  // namespace ship
