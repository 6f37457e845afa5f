#pragma once

// Reference implementations used as test oracles. Deliberately naive and
// written without any library helpers beyond plain storage.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <vector>

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat zeros(std::size_t r, std::size_t c) { return Mat(r, std::vector<double>(c, 0.0)); }

inline Mat matmul(const Mat& a, const Mat& b) {
    Mat out = zeros(a.size(), b[0].size());
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b[0].size(); ++j)
            for (std::size_t k = 0; k < b.size(); ++k) out[i][j] += a[i][k] * b[k][j];
    return out;
}

/// Direct convolution over (n, co, y, x, ci, ky, kx).
inline std::vector<double> conv2d(const std::vector<double>& x, std::size_t B, std::size_t C, std::size_t H,
                                  std::size_t W, const std::vector<double>& k, std::size_t CO, std::size_t KH,
                                  std::size_t KW, std::size_t stride, std::size_t pad, std::size_t& OH,
                                  std::size_t& OW) {
    OH = (H + 2 * pad - KH) / stride + 1;
    OW = (W + 2 * pad - KW) / stride + 1;
    std::vector<double> out(B * CO * OH * OW, 0.0);
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t co = 0; co < CO; ++co)
            for (std::size_t oy = 0; oy < OH; ++oy)
                for (std::size_t ox = 0; ox < OW; ++ox) {
                    double s = 0.0;
                    for (std::size_t ci = 0; ci < C; ++ci)
                        for (std::size_t ky = 0; ky < KH; ++ky)
                            for (std::size_t kx = 0; kx < KW; ++kx) {
                                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W))
                                    continue;
                                s += x[((n * C + ci) * H + iy) * W + ix] * k[((co * C + ci) * KH + ky) * KW + kx];
                            }
                    out[((n * CO + co) * OH + oy) * OW + ox] = s;
                }
    return out;
}

/// K[i][j] = <row i, row j>.
inline Mat gram(const Mat& f) {
    Mat k = zeros(f.size(), f.size());
    for (std::size_t i = 0; i < f.size(); ++i)
        for (std::size_t j = 0; j < f.size(); ++j)
            for (std::size_t d = 0; d < f[i].size(); ++d) k[i][j] += f[i][d] * f[j][d];
    return k;
}

inline Mat centering(std::size_t b) {
    Mat h = zeros(b, b);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < b; ++j) h[i][j] = (i == j ? 1.0 : 0.0) - 1.0 / static_cast<double>(b);
    return h;
}

/// Explicitly centers K and L with H (as matrices), then sums elementwise
/// products over (b-1)^2.
inline double hsic(const Mat& k, const Mat& l) {
    const std::size_t b = k.size();
    const Mat h = centering(b);
    const Mat kc = matmul(matmul(h, k), h);
    const Mat lc = matmul(matmul(h, l), h);
    double s = 0.0;
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < b; ++j) s += kc[i][j] * lc[i][j];
    return s / ((static_cast<double>(b) - 1.0) * (static_cast<double>(b) - 1.0));
}

inline double cka(const Mat& f1, const Mat& f2) {
    const Mat k = gram(f1), l = gram(f2);
    return hsic(k, l) / std::sqrt(hsic(k, k) * hsic(l, l));
}

/// Central differences of a scalar function of a parameter vector.
inline std::vector<double> finite_difference(const std::function<double(const std::vector<double>&)>& f,
                                             std::vector<double> p, double step = 1e-5) {
    std::vector<double> g(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double orig = p[i];
        p[i] = orig + step;
        const double up = f(p);
        p[i] = orig - step;
        const double down = f(p);
        p[i] = orig;
        g[i] = (up - down) / (2.0 * step);
    }
    return g;
}

struct Cell {
    std::size_t i = 0;
    std::size_t j = 0;
};

/// Best feasible cell by enumeration: highest score among cells whose cost
/// exists and fits; the first such cell in row-major order wins ties.
inline std::optional<Cell> feasible_argmax(const std::vector<double>& scores, std::size_t rows, std::size_t cols,
                                           const std::vector<std::optional<unsigned long long>>& costs,
                                           unsigned long long limit) {
    std::optional<Cell> best;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) {
            const auto& c = costs[i * cols + j];
            if (!c || *c > limit) continue;
            if (!best || scores[i * cols + j] > best_score) {
                best = Cell{i, j};
                best_score = scores[i * cols + j];
            }
        }
    return best;
}

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian matrix.
inline Mat random_orthogonal(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    Mat q = zeros(n, n);
    for (std::size_t c = 0; c < n; ++c) {
        std::vector<double> v(n);
        for (auto& x : v) x = nd(rng);
        for (int pass = 0; pass < 2; ++pass)
            for (std::size_t p = 0; p < c; ++p) {
                double dot = 0.0;
                for (std::size_t r = 0; r < n; ++r) dot += v[r] * q[r][p];
                for (std::size_t r = 0; r < n; ++r) v[r] -= dot * q[r][p];
            }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        for (std::size_t r = 0; r < n; ++r) q[r][c] = v[r] / norm;
    }
    return q;
}

}  // namespace oracle
