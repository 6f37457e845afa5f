#pragma once

// Reverse-mode differentiation over Tensor values. A graph is built by the
// op functions below and consumed by backward(); graphs are confined to the
// thread that built them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "restitch/error.hpp"
#include "restitch/tensor.hpp"

namespace restitch {

namespace detail {

struct Node {
    Tensor value;
    bool requires_grad = false;
    // f64 accumulator, allocated on first use
    std::vector<double> grad;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::vector<double>& grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

// C[MxN] += A[MxK] * B[KxN]
inline void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const double* A,
                    const double* B, double* C) {
    for (std::size_t i = 0; i < M; ++i) {
        double* c = C + i * N;
        for (std::size_t k = 0; k < K; ++k) {
            const double a = A[i * K + k];
            if (a == 0.0) continue;
            const double* b = B + k * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
        }
    }
}

// C[MxN] += A^T * B with A stored [KxM], B [KxN]
inline void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const double* A,
                    const double* B, double* C) {
    for (std::size_t k = 0; k < K; ++k) {
        const double* b = B + k * N;
        for (std::size_t i = 0; i < M; ++i) {
            const double a = A[k * M + i];
            if (a == 0.0) continue;
            double* c = C + i * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
        }
    }
}

// C[MxN] += A * B^T with A [MxK], B stored [NxK]
inline void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const double* A,
                    const double* B, double* C) {
    for (std::size_t i = 0; i < M; ++i) {
        const double* a = A + i * K;
        for (std::size_t j = 0; j < N; ++j) {
            const double* b = B + j * K;
            double s = 0.0;
            for (std::size_t k = 0; k < K; ++k) s += a[k] * b[k];
            C[i * N + j] += s;
        }
    }
}

}  // namespace detail

/// Handle to a graph node. Copies alias the same node.
class Var {
public:
    Var() = default;

    static Var leaf(Tensor value, bool requires_grad = false) {
        auto node = std::make_shared<detail::Node>();
        node->value = std::move(value);
        node->requires_grad = requires_grad;
        return Var(std::move(node));
    }

    const Tensor& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    DType dtype() const { return node_->value.dtype(); }
    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }

    /// Accumulated gradient rounded to the value's dtype; absent if never reached.
    std::optional<Tensor> grad() const {
        if (node_->grad.empty()) return std::nullopt;
        return Tensor(node_->value.shape(), node_->grad, node_->value.dtype());
    }

    /// Raw f64 accumulator (empty when absent).
    std::span<const double> grad_data() const { return node_->grad; }

    void zero_grad() { node_->grad.clear(); }

    explicit operator bool() const { return static_cast<bool>(node_); }

    const std::shared_ptr<detail::Node>& node() const { return node_; }

    explicit Var(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Var make_result(Tensor value, std::initializer_list<Var> inputs,
                       std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool any = false;
    for (const Var& v : inputs) any = any || v.requires_grad();
    if (any) {
        node->requires_grad = true;
        for (const Var& v : inputs) node->parents.push_back(v.node());
        node->backward = std::move(backward_fn);
    }
    return Var(std::move(node));
}

inline std::vector<double> zeros(std::size_t n) { return std::vector<double>(n, 0.0); }

}  // namespace detail

/// Propagates d(loss)/d(node) into every requires_grad node reachable from
/// `loss`. Leaves accumulate; intermediate buffers are released afterwards.
inline void backward(const Var& loss) {
    if (loss.value().size() != 1) {
        fail(ErrorKind::contract,
             "backward requires a scalar loss, got shape " + shape_string(loss.shape()));
    }
    if (!loss.requires_grad()) return;

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
    for (detail::Node* n : order) {
        if (!n->parents.empty()) {
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
    }
}

// ---------------------------------------------------------------------------
// Ops

inline Var matmul(const Var& a, const Var& w) {
    const Shape& as = a.shape();
    const Shape& ws = w.shape();
    if (as.size() != 2 || ws.size() != 2 || as[1] != ws[0]) {
        fail(ErrorKind::dimension,
             "matmul shape mismatch: " + shape_string(as) + " x " + shape_string(ws));
    }
    const std::size_t M = as[0], K = as[1], N = ws[1];
    auto out = detail::zeros(M * N);
    detail::gemm_nn(M, N, K, a.value().data().data(), w.value().data().data(), out.data());
    Tensor value({M, N}, std::move(out), promote(a.dtype(), w.dtype()));
    return detail::make_result(std::move(value), {a, w}, [M, N, K](detail::Node& self) {
        const double* g = self.grad.data();
        detail::Node& pa = *self.parents[0];
        detail::Node& pw = *self.parents[1];
        if (pa.requires_grad) {
            // dA = G * W^T
            detail::gemm_nt(M, K, N, g, pw.value.data().data(), pa.grad_buffer().data());
        }
        if (pw.requires_grad) {
            // dW = A^T * G
            detail::gemm_tn(K, N, M, pa.value.data().data(), g, pw.grad_buffer().data());
        }
    });
}

/// Adds a bias along the feature axis: last axis for rank 2 and 3, channel
/// axis for rank 4. A bias shaped like one whole sample (x.shape minus the
/// batch axis) is added to every sample instead. This is the only
/// broadcasting op.
inline Var add_bias(const Var& x, const Var& bias) {
    const Shape& xs = x.shape();
    const Shape& bs = bias.shape();
    if (xs.size() < 2 || xs.size() > 4) {
        fail(ErrorKind::dimension, "add_bias: unsupported shapes " + shape_string(xs) + " + " + shape_string(bs));
    }
    std::size_t channels, inner, outer;
    if (bs.size() > 1 || (xs.size() == 2 && bs.size() == 1)) {
        if (!std::equal(xs.begin() + 1, xs.end(), bs.begin(), bs.end())) {
            fail(ErrorKind::dimension, "add_bias: bias " + shape_string(bs) + " does not match " + shape_string(xs));
        }
        channels = bias.value().size();
        inner = 1;
        outer = xs[0];
    } else if (xs.size() == 4) {
        channels = xs[1];
        inner = xs[2] * xs[3];
        outer = xs[0];
    } else {
        channels = xs.back();
        inner = 1;
        outer = x.value().size() / channels;
    }
    if (bias.value().size() != channels) {
        fail(ErrorKind::dimension, "add_bias: bias " + shape_string(bs) + " does not match " + shape_string(xs));
    }
    auto out = x.value().to_vector();
    const auto b = bias.value().data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t i = 0; i < inner; ++i) out[(o * channels + c) * inner + i] += b[c];
    Tensor value(xs, std::move(out), promote(x.dtype(), bias.dtype()));
    return detail::make_result(std::move(value), {x, bias},
                               [outer, channels, inner](detail::Node& self) {
        detail::Node& px = *self.parents[0];
        detail::Node& pb = *self.parents[1];
        if (px.requires_grad) {
            auto& gx = px.grad_buffer();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            auto& gb = pb.grad_buffer();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t c = 0; c < channels; ++c)
                    for (std::size_t i = 0; i < inner; ++i)
                        gb[c] += self.grad[(o * channels + c) * inner + i];
        }
    });
}

inline Var add(const Var& a, const Var& b) {
    if (a.shape() != b.shape()) {
        fail(ErrorKind::dimension,
             "add shape mismatch: " + shape_string(a.shape()) + " + " + shape_string(b.shape()));
    }
    auto out = a.value().to_vector();
    const auto bd = b.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
    Tensor value(a.shape(), std::move(out), promote(a.dtype(), b.dtype()));
    return detail::make_result(std::move(value), {a, b}, [](detail::Node& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            auto& g = p->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

inline Var scale(const Var& x, double c) {
    auto out = x.value().to_vector();
    for (double& v : out) v *= c;
    Tensor value(x.shape(), std::move(out), x.dtype());
    return detail::make_result(std::move(value), {x}, [c](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
    });
}

inline Var relu(const Var& x) {
    auto out = x.value().to_vector();
    for (double& v : out) v = v > 0.0 ? v : 0.0;
    Tensor value(x.shape(), std::move(out), x.dtype());
    return detail::make_result(std::move(value), {x}, [](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        auto& g = p.grad_buffer();
        const auto xv = p.value.data();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (xv[i] > 0.0) g[i] += self.grad[i];
    });
}

inline Var sum(const Var& x) {
    double s = 0.0;
    for (double v : x.value().data()) s += v;
    return detail::make_result(Tensor::scalar(s, x.dtype()), {x}, [](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (double& v : g) v += self.grad[0];
    });
}

inline Var reshape(const Var& x, Shape shape) {
    Tensor value = x.value().reshaped(std::move(shape));
    return detail::make_result(std::move(value), {x}, [](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

/// Keeps the leading (sample) extent and merges the rest; data order unchanged.
inline Shape flattened_shape(const Shape& s) {
    if (s.size() < 2) {
        fail(ErrorKind::dimension, "flatten_features needs rank >= 2, got " + shape_string(s));
    }
    std::size_t rest = 1;
    for (std::size_t i = 1; i < s.size(); ++i) rest *= s[i];
    return {s[0], rest};
}

inline Tensor flatten_features(const Tensor& x) { return x.reshaped(flattened_shape(x.shape())); }
inline Var flatten_features(const Var& x) { return reshape(x, flattened_shape(x.shape())); }

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t pad, const char* axis) {
    if (stride == 0) fail(ErrorKind::configuration, "conv2d: stride must be >= 1");
    if (k > in + 2 * pad) {
        fail(ErrorKind::configuration, std::string("conv2d: kernel ") + std::to_string(k) +
                                           " exceeds padded " + axis + " extent " +
                                           std::to_string(in + 2 * pad));
    }
    const std::size_t span = in + 2 * pad - k;
    if (span % stride != 0) {
        fail(ErrorKind::configuration,
             std::string("conv2d: non-exact output ") + axis + " extent: (" +
                 std::to_string(in) + "+2*" + std::to_string(pad) + "-" + std::to_string(k) +
                 ") not divisible by stride " + std::to_string(stride));
    }
    return span / stride + 1;
}

/// Cross-correlation of x[b,c,h,w] with k[c',c,kh,kw] (no bias).
inline Var conv2d(const Var& x, const Var& k, std::size_t stride, std::size_t padding) {
    const Shape& xs = x.shape();
    const Shape& ks = k.shape();
    if (xs.size() != 4 || ks.size() != 4) {
        fail(ErrorKind::dimension,
             "conv2d expects rank-4 input and kernel, got " + shape_string(xs) + " and " +
                 shape_string(ks));
    }
    if (xs[1] != ks[1]) {
        fail(ErrorKind::dimension, "conv2d channel mismatch: input " + shape_string(xs) +
                                       " kernel " + shape_string(ks));
    }
    const std::size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const std::size_t CO = ks[0], KH = ks[2], KW = ks[3];
    const std::size_t OH = conv_out_extent(H, KH, stride, padding, "height");
    const std::size_t OW = conv_out_extent(W, KW, stride, padding, "width");
    const std::size_t CKK = C * KH * KW, OHW = OH * OW;

    auto cols = std::make_shared<std::vector<double>>(B * CKK * OHW, 0.0);
    const double* xd = x.value().data().data();
    for (std::size_t n = 0; n < B; ++n) {
        double* col = cols->data() + n * CKK * OHW;
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ky = 0; ky < KH; ++ky)
                for (std::size_t kx = 0; kx < KW; ++kx) {
                    double* row = col + ((c * KH + ky) * KW + kx) * OHW;
                    for (std::size_t oy = 0; oy < OH; ++oy) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                                  static_cast<std::ptrdiff_t>(padding);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                        for (std::size_t ox = 0; ox < OW; ++ox) {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                static_cast<std::ptrdiff_t>(padding);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                            row[oy * OW + ox] = xd[((n * C + c) * H + iy) * W + ix];
                        }
                    }
                }
    }
    auto out = detail::zeros(B * CO * OHW);
    const double* kd = k.value().data().data();
    for (std::size_t n = 0; n < B; ++n)
        detail::gemm_nn(CO, OHW, CKK, kd, cols->data() + n * CKK * OHW, out.data() + n * CO * OHW);

    Tensor value({B, CO, OH, OW}, std::move(out), promote(x.dtype(), k.dtype()));
    return detail::make_result(
        std::move(value), {x, k},
        [=, cols = std::move(cols)](detail::Node& self) {
            detail::Node& px = *self.parents[0];
            detail::Node& pk = *self.parents[1];
            const double* g = self.grad.data();
            if (pk.requires_grad) {
                double* gk = pk.grad_buffer().data();
                for (std::size_t n = 0; n < B; ++n)
                    detail::gemm_nt(CO, CKK, OHW, g + n * CO * OHW, cols->data() + n * CKK * OHW, gk);
            }
            if (px.requires_grad) {
                double* gx = px.grad_buffer().data();
                std::vector<double> dcol(CKK * OHW);
                const double* kv = pk.value.data().data();
                for (std::size_t n = 0; n < B; ++n) {
                    std::fill(dcol.begin(), dcol.end(), 0.0);
                    detail::gemm_tn(CKK, OHW, CO, kv, g + n * CO * OHW, dcol.data());
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t ky = 0; ky < KH; ++ky)
                            for (std::size_t kx = 0; kx < KW; ++kx) {
                                const double* row = dcol.data() + ((c * KH + ky) * KW + kx) * OHW;
                                for (std::size_t oy = 0; oy < OH; ++oy) {
                                    const std::ptrdiff_t iy =
                                        static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                        static_cast<std::ptrdiff_t>(padding);
                                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                                    for (std::size_t ox = 0; ox < OW; ++ox) {
                                        const std::ptrdiff_t ix =
                                            static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                            static_cast<std::ptrdiff_t>(padding);
                                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                                        gx[((n * C + c) * H + iy) * W + ix] += row[oy * OW + ox];
                                    }
                                }
                            }
                }
            }
        });
}

namespace detail {

inline void check_pool(const Shape& xs, std::size_t kernel, std::size_t stride, const char* op) {
    if (xs.size() != 4) {
        fail(ErrorKind::dimension, std::string(op) + " expects rank-4 input, got " + shape_string(xs));
    }
    if (kernel == 0 || stride == 0) {
        fail(ErrorKind::configuration, std::string(op) + ": kernel and stride must be >= 1");
    }
}

}  // namespace detail

inline Var max_pool2d(const Var& x, std::size_t kernel, std::size_t stride) {
    const Shape& xs = x.shape();
    detail::check_pool(xs, kernel, stride, "max_pool2d");
    const std::size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const std::size_t OH = conv_out_extent(H, kernel, stride, 0, "height");
    const std::size_t OW = conv_out_extent(W, kernel, stride, 0, "width");
    auto arg = std::make_shared<std::vector<std::size_t>>(B * C * OH * OW);
    std::vector<double> out(B * C * OH * OW);
    const auto xd = x.value().data();
    for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t oy = 0; oy < OH; ++oy)
            for (std::size_t ox = 0; ox < OW; ++ox) {
                std::size_t best = bc * H * W + (oy * stride) * W + ox * stride;
                for (std::size_t ky = 0; ky < kernel; ++ky)
                    for (std::size_t kx = 0; kx < kernel; ++kx) {
                        const std::size_t idx = bc * H * W + (oy * stride + ky) * W + ox * stride + kx;
                        if (xd[idx] > xd[best]) best = idx;
                    }
                const std::size_t o = (bc * OH + oy) * OW + ox;
                (*arg)[o] = best;
                out[o] = xd[best];
            }
    Tensor value({B, C, OH, OW}, std::move(out), x.dtype());
    return detail::make_result(std::move(value), {x}, [arg = std::move(arg)](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t o = 0; o < arg->size(); ++o) g[(*arg)[o]] += self.grad[o];
    });
}

inline Var avg_pool2d(const Var& x, std::size_t kernel, std::size_t stride) {
    const Shape& xs = x.shape();
    detail::check_pool(xs, kernel, stride, "avg_pool2d");
    const std::size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const std::size_t OH = conv_out_extent(H, kernel, stride, 0, "height");
    const std::size_t OW = conv_out_extent(W, kernel, stride, 0, "width");
    const double inv = 1.0 / static_cast<double>(kernel * kernel);
    std::vector<double> out(B * C * OH * OW, 0.0);
    const auto xd = x.value().data();
    for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t oy = 0; oy < OH; ++oy)
            for (std::size_t ox = 0; ox < OW; ++ox) {
                double s = 0.0;
                for (std::size_t ky = 0; ky < kernel; ++ky)
                    for (std::size_t kx = 0; kx < kernel; ++kx)
                        s += xd[bc * H * W + (oy * stride + ky) * W + ox * stride + kx];
                out[(bc * OH + oy) * OW + ox] = s * inv;
            }
    Tensor value({B, C, OH, OW}, std::move(out), x.dtype());
    return detail::make_result(std::move(value), {x}, [=](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t bc = 0; bc < B * C; ++bc)
            for (std::size_t oy = 0; oy < OH; ++oy)
                for (std::size_t ox = 0; ox < OW; ++ox) {
                    const double go = self.grad[(bc * OH + oy) * OW + ox] * inv;
                    for (std::size_t ky = 0; ky < kernel; ++ky)
                        for (std::size_t kx = 0; kx < kernel; ++kx)
                            g[bc * H * W + (oy * stride + ky) * W + ox * stride + kx] += go;
                }
    });
}

/// Nearest-neighbour upsampling by integer factors.
inline Var upsample_nearest(const Var& x, std::size_t fh, std::size_t fw) {
    const Shape& xs = x.shape();
    if (xs.size() != 4) fail(ErrorKind::dimension, "upsample_nearest expects rank 4, got " + shape_string(xs));
    if (fh == 0 || fw == 0) fail(ErrorKind::configuration, "upsample_nearest: factors must be >= 1");
    const std::size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const std::size_t OH = H * fh, OW = W * fw;
    std::vector<double> out(B * C * OH * OW);
    const auto xd = x.value().data();
    for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t oy = 0; oy < OH; ++oy)
            for (std::size_t ox = 0; ox < OW; ++ox)
                out[(bc * OH + oy) * OW + ox] = xd[(bc * H + oy / fh) * W + ox / fw];
    Tensor value({B, C, OH, OW}, std::move(out), x.dtype());
    return detail::make_result(std::move(value), {x}, [=](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t bc = 0; bc < B * C; ++bc)
            for (std::size_t oy = 0; oy < OH; ++oy)
                for (std::size_t ox = 0; ox < OW; ++ox)
                    g[(bc * H + oy / fh) * W + ox / fw] += self.grad[(bc * OH + oy) * OW + ox];
    });
}

/// Normalizes over the last axis, then applies per-feature gamma and beta.
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    const Shape& xs = x.shape();
    const std::size_t D = xs.back();
    if (gamma.value().size() != D || beta.value().size() != D) {
        fail(ErrorKind::dimension, "layer_norm: gamma/beta " + shape_string(gamma.shape()) +
                                       " do not match feature width of " + shape_string(xs));
    }
    const std::size_t R = x.value().size() / D;
    auto xhat = std::make_shared<std::vector<double>>(R * D);
    auto inv_std = std::make_shared<std::vector<double>>(R);
    std::vector<double> out(R * D);
    const auto xd = x.value().data();
    const auto gd = gamma.value().data();
    const auto bd = beta.value().data();
    for (std::size_t r = 0; r < R; ++r) {
        double mean = 0.0;
        for (std::size_t d = 0; d < D; ++d) mean += xd[r * D + d];
        mean /= static_cast<double>(D);
        double var = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
            const double c = xd[r * D + d] - mean;
            var += c * c;
        }
        var /= static_cast<double>(D);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t d = 0; d < D; ++d) {
            const double h = (xd[r * D + d] - mean) * is;
            (*xhat)[r * D + d] = h;
            out[r * D + d] = h * gd[d] + bd[d];
        }
    }
    Tensor value(xs, std::move(out), promote(x.dtype(), gamma.dtype()));
    return detail::make_result(
        std::move(value), {x, gamma, beta},
        [R, D, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
            detail::Node& px = *self.parents[0];
            detail::Node& pg = *self.parents[1];
            detail::Node& pb = *self.parents[2];
            const double* g = self.grad.data();
            if (pg.requires_grad) {
                auto& gg = pg.grad_buffer();
                for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t d = 0; d < D; ++d) gg[d] += g[r * D + d] * (*xhat)[r * D + d];
            }
            if (pb.requires_grad) {
                auto& gb = pb.grad_buffer();
                for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t d = 0; d < D; ++d) gb[d] += g[r * D + d];
            }
            if (px.requires_grad) {
                auto& gx = px.grad_buffer();
                const auto gam = pg.value.data();
                const double invD = 1.0 / static_cast<double>(D);
                for (std::size_t r = 0; r < R; ++r) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t d = 0; d < D; ++d) {
                        const double dh = g[r * D + d] * gam[d];
                        s1 += dh;
                        s2 += dh * (*xhat)[r * D + d];
                    }
                    for (std::size_t d = 0; d < D; ++d) {
                        const double dh = g[r * D + d] * gam[d];
                        gx[r * D + d] +=
                            (*inv_std)[r] * (dh - s1 * invD - (*xhat)[r * D + d] * s2 * invD);
                    }
                }
            }
        });
}

/// Batch-norm with frozen running statistics on the channel axis of x[b,c,h,w].
inline Var batch_norm_inference(const Var& x, const Tensor& running_mean, const Tensor& running_var,
                                const Var& gamma, const Var& beta, double eps = 1e-5) {
    const Shape& xs = x.shape();
    if (xs.size() != 4) fail(ErrorKind::dimension, "batch_norm expects rank 4, got " + shape_string(xs));
    const std::size_t B = xs[0], C = xs[1], HW = xs[2] * xs[3];
    for (const Tensor* t : {&running_mean, &running_var, &gamma.value(), &beta.value()}) {
        if (t->size() != C) {
            fail(ErrorKind::dimension, "batch_norm: parameter " + shape_string(t->shape()) +
                                           " does not match channels of " + shape_string(xs));
        }
    }
    auto scale_c = std::make_shared<std::vector<double>>(C);
    for (std::size_t c = 0; c < C; ++c) (*scale_c)[c] = 1.0 / std::sqrt(running_var[c] + eps);
    std::vector<double> out(B * C * HW);
    const auto xd = x.value().data();
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i) {
                const std::size_t o = (n * C + c) * HW + i;
                out[o] = (xd[o] - running_mean[c]) * (*scale_c)[c] * gamma.value()[c] + beta.value()[c];
            }
    Tensor value(xs, std::move(out), promote(x.dtype(), gamma.dtype()));
    Tensor mean = running_mean;
    return detail::make_result(
        std::move(value), {x, gamma, beta},
        [B, C, HW, mean, scale_c = std::move(scale_c)](detail::Node& self) {
            detail::Node& px = *self.parents[0];
            detail::Node& pg = *self.parents[1];
            detail::Node& pb = *self.parents[2];
            const double* g = self.grad.data();
            const auto xv = px.value.data();
            const auto gam = pg.value.data();
            for (std::size_t n = 0; n < B; ++n)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t i = 0; i < HW; ++i) {
                        const std::size_t o = (n * C + c) * HW + i;
                        if (px.requires_grad) px.grad_buffer()[o] += g[o] * (*scale_c)[c] * gam[c];
                        if (pg.requires_grad)
                            pg.grad_buffer()[c] += g[o] * (xv[o] - mean[c]) * (*scale_c)[c];
                        if (pb.requires_grad) pb.grad_buffer()[c] += g[o];
                    }
        });
}

/// x[b,c,h,w] -> tokens[b, h*w, c], token p = y*w + x.
inline Var spatial_to_tokens(const Var& x) {
    const Shape& xs = x.shape();
    if (xs.size() != 4) fail(ErrorKind::dimension, "spatial_to_tokens expects rank 4, got " + shape_string(xs));
    const std::size_t B = xs[0], C = xs[1], P = xs[2] * xs[3];
    std::vector<double> out(B * P * C);
    const auto xd = x.value().data();
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < P; ++p) out[(n * P + p) * C + c] = xd[(n * C + c) * P + p];
    Tensor value({B, P, C}, std::move(out), x.dtype());
    return detail::make_result(std::move(value), {x}, [B, C, P](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t n = 0; n < B; ++n)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t p = 0; p < P; ++p) g[(n * C + c) * P + p] += self.grad[(n * P + p) * C + c];
    });
}

/// Per-token linear map: x[b,t,d] * w[d,d'] -> [b,t,d'].
inline Var token_linear(const Var& x, const Var& w) {
    const Shape& xs = x.shape();
    if (xs.size() != 3) fail(ErrorKind::dimension, "token_linear expects rank 3, got " + shape_string(xs));
    Var flat = reshape(x, {xs[0] * xs[1], xs[2]});
    Var y = matmul(flat, w);
    return reshape(y, {xs[0], xs[1], w.shape()[1]});
}

/// Mean over the token axis: [b,t,d] -> [b,d].
inline Var mean_tokens(const Var& x) {
    const Shape& xs = x.shape();
    if (xs.size() != 3) fail(ErrorKind::dimension, "mean_tokens expects rank 3, got " + shape_string(xs));
    const std::size_t B = xs[0], T = xs[1], D = xs[2];
    const double inv = 1.0 / static_cast<double>(T);
    std::vector<double> out(B * D, 0.0);
    const auto xd = x.value().data();
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t d = 0; d < D; ++d) out[n * D + d] += xd[(n * T + t) * D + d];
    for (double& v : out) v *= inv;
    Tensor value({B, D}, std::move(out), x.dtype());
    return detail::make_result(std::move(value), {x}, [B, T, D, inv](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t n = 0; n < B; ++n)
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t d = 0; d < D; ++d) g[(n * T + t) * D + d] += self.grad[n * D + d] * inv;
    });
}

/// Row-wise softmax of a [b,n] tensor.
inline Tensor softmax(const Tensor& logits) {
    if (logits.rank() != 2) fail(ErrorKind::dimension, "softmax expects rank 2, got " + shape_string(logits.shape()));
    const std::size_t B = logits.extent(0), N = logits.extent(1);
    std::vector<double> out(B * N);
    for (std::size_t r = 0; r < B; ++r) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < N; ++j) m = std::max(m, logits[r * N + j]);
        double s = 0.0;
        for (std::size_t j = 0; j < N; ++j) {
            out[r * N + j] = std::exp(logits[r * N + j] - m);
            s += out[r * N + j];
        }
        for (std::size_t j = 0; j < N; ++j) out[r * N + j] /= s;
    }
    return Tensor(logits.shape(), std::move(out), logits.dtype());
}

/// Mean cross-entropy of softmax(logits) against integer labels.
inline Var softmax_cross_entropy(const Var& logits, std::span<const std::int32_t> labels) {
    const Shape& ls = logits.shape();
    if (ls.size() != 2 || ls[0] != labels.size()) {
        fail(ErrorKind::dimension, "softmax_cross_entropy: logits " + shape_string(ls) + " vs " +
                                       std::to_string(labels.size()) + " labels");
    }
    const std::size_t B = ls[0], N = ls[1];
    for (std::int32_t y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= N) {
            fail(ErrorKind::range, "label " + std::to_string(y) + " outside [0," + std::to_string(N) + ")");
        }
    }
    auto probs = std::make_shared<std::vector<double>>(B * N);
    double loss = 0.0;
    const auto ld = logits.value().data();
    for (std::size_t r = 0; r < B; ++r) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < N; ++j) m = std::max(m, ld[r * N + j]);
        double s = 0.0;
        for (std::size_t j = 0; j < N; ++j) s += std::exp(ld[r * N + j] - m);
        const double log_s = std::log(s);
        for (std::size_t j = 0; j < N; ++j) (*probs)[r * N + j] = std::exp(ld[r * N + j] - m - log_s);
        loss -= ld[r * N + labels[r]] - m - log_s;
    }
    loss /= static_cast<double>(B);
    std::vector<std::int32_t> ys(labels.begin(), labels.end());
    return detail::make_result(Tensor::scalar(loss, logits.dtype()), {logits},
                               [B, N, probs = std::move(probs), ys = std::move(ys)](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        const double go = self.grad[0] / static_cast<double>(B);
        for (std::size_t r = 0; r < B; ++r)
            for (std::size_t j = 0; j < N; ++j) {
                const double t = (static_cast<std::int32_t>(j) == ys[r]) ? 1.0 : 0.0;
                g[r * N + j] += go * ((*probs)[r * N + j] - t);
            }
    });
}

}  // namespace restitch
