#pragma once

// Stitching layers: the single trainable mapping inserted at a seam between a
// front prefix and a back suffix.
//
//   channel-project  spatial(c,h,w) -> spatial(c',h',w')  resize, then 1x1 conv
//   token-project    tokens(t,d)    -> tokens(t,d')       per-token linear
//   patchify         spatial(c,h,w) -> tokens(t',d')      conv, kernel = stride = s

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "restitch/autograd.hpp"
#include "restitch/error.hpp"
#include "restitch/log.hpp"
#include "restitch/netgraph.hpp"
#include "restitch/tensor.hpp"

namespace restitch {

enum class AdapterKind { channel_project, token_project, patchify };
enum class Resize { none, avg_pool, nearest };
enum class AdapterInit { least_squares, random, identity };

inline std::string to_string(AdapterKind k) {
    switch (k) {
        case AdapterKind::channel_project: return "channel-project";
        case AdapterKind::token_project: return "token-project";
        case AdapterKind::patchify: return "patchify";
    }
    return "?";
}

inline AdapterKind parse_adapter_kind(const std::string& s) {
    if (s == "channel-project") return AdapterKind::channel_project;
    if (s == "token-project") return AdapterKind::token_project;
    if (s == "patchify") return AdapterKind::patchify;
    fail(ErrorKind::format, "unknown adapter kind '" + s + "'");
}

inline std::string to_string(Resize r) {
    switch (r) {
        case Resize::none: return "none";
        case Resize::avg_pool: return "avg-pool";
        case Resize::nearest: return "nearest";
    }
    return "?";
}

inline Resize parse_resize(const std::string& s) {
    if (s == "none") return Resize::none;
    if (s == "avg-pool") return Resize::avg_pool;
    if (s == "nearest") return Resize::nearest;
    fail(ErrorKind::format, "unknown resize '" + s + "'");
}

inline std::string to_string(AdapterInit i) {
    switch (i) {
        case AdapterInit::least_squares: return "least-squares";
        case AdapterInit::random: return "random";
        case AdapterInit::identity: return "identity";
    }
    return "?";
}

inline AdapterInit parse_adapter_init(const std::string& s) {
    if (s == "least-squares") return AdapterInit::least_squares;
    if (s == "random") return AdapterInit::random;
    if (s == "identity") return AdapterInit::identity;
    fail(ErrorKind::configuration, "unknown adapter init '" + s + "' (least-squares|random|identity)");
}

struct AdapterSpec {
    AdapterKind kind = AdapterKind::channel_project;
    Signature in_signature;
    Signature out_signature;
    Resize resize = Resize::none;
    std::size_t resize_factor = 1;  // pooling window or upsampling factor
    std::size_t patch = 1;          // patchify kernel = stride
    AdapterInit init = AdapterInit::random;

    /// ("weight", ...), ("bias", [out width]).
    std::vector<std::pair<std::string, Shape>> weight_shapes() const {
        switch (kind) {
            case AdapterKind::channel_project:
                return {{"weight", {out_signature.dims[0], in_signature.dims[0], 1, 1}},
                        {"bias", {out_signature.dims[0]}}};
            case AdapterKind::token_project:
                return {{"weight", {in_signature.dims[1], out_signature.dims[1]}}, {"bias", {out_signature.dims[1]}}};
            case AdapterKind::patchify:
                return {{"weight", {out_signature.dims[1], in_signature.dims[0], patch, patch}},
                        {"bias", {out_signature.dims[1]}}};
        }
        return {};
    }

    std::uint64_t param_count() const {
        std::uint64_t n = 0;
        for (const auto& [name, shape] : weight_shapes()) n += numel(shape);
        return n;
    }

    /// Per-sample FLOPs, same conventions as the unit table.
    std::uint64_t flops() const {
        const auto& in = in_signature.dims;
        const auto& out = out_signature.dims;
        switch (kind) {
            case AdapterKind::channel_project: {
                const std::uint64_t hw = out[1] * out[2];
                const std::uint64_t resize_cost = resize == Resize::none ? 0 : in[0] * hw;
                return resize_cost + 2 * in[0] * out[0] * hw;
            }
            case AdapterKind::token_project:
                return 2 * in[0] * in[1] * out[1];
            case AdapterKind::patchify:
                return 2 * in[0] * out[1] * patch * patch * out[0];
        }
        return 0;
    }

    bool operator==(const AdapterSpec&) const = default;
};

inline json to_json(const AdapterSpec& a) {
    json shapes = json::array();
    for (const auto& [name, shape] : a.weight_shapes()) shapes.push_back({{"name", name}, {"shape", shape}});
    return json{{"kind", to_string(a.kind)},
                {"in_signature", to_json(a.in_signature)},
                {"out_signature", to_json(a.out_signature)},
                {"resize", to_string(a.resize)},
                {"resize_factor", a.resize_factor},
                {"patch", a.patch},
                {"init", to_string(a.init)},
                {"weight_shapes", std::move(shapes)},
                {"param_count", a.param_count()}};
}

inline AdapterSpec adapter_from_json(const json& j) {
    try {
        AdapterSpec a;
        a.kind = parse_adapter_kind(j.at("kind").get<std::string>());
        a.in_signature = signature_from_json(j.at("in_signature"));
        a.out_signature = signature_from_json(j.at("out_signature"));
        a.resize = parse_resize(j.value("resize", std::string("none")));
        a.resize_factor = j.value("resize_factor", std::size_t{1});
        a.patch = j.value("patch", std::size_t{1});
        a.init = parse_adapter_init(j.value("init", std::string("random")));
        if (j.contains("param_count") && j["param_count"].get<std::uint64_t>() != a.param_count()) {
            fail(ErrorKind::format, "adapter param_count " + j["param_count"].dump() + " disagrees with its shapes (" +
                                        std::to_string(a.param_count()) + ")");
        }
        return a;
    } catch (const json::exception& e) {
        fail(ErrorKind::format, std::string("adapter spec: ") + e.what());
    }
}

/// Chooses the adapter mapping front_out onto back_in.
inline AdapterSpec synthesize_adapter(const Signature& front_out, const Signature& back_in) {
    using K = SignatureKind;
    AdapterSpec a;
    a.in_signature = front_out;
    a.out_signature = back_in;
    if (front_out.kind == K::spatial && back_in.kind == K::spatial) {
        a.kind = AdapterKind::channel_project;
        const std::size_t h = front_out.dims[1], w = front_out.dims[2];
        const std::size_t h2 = back_in.dims[1], w2 = back_in.dims[2];
        if (h == h2 && w == w2) {
            a.resize = Resize::none;
        } else if (h2 < h && h % h2 == 0 && w % w2 == 0 && h / h2 == w / w2) {
            a.resize = Resize::avg_pool;
            a.resize_factor = h / h2;
        } else if (h2 > h && h2 % h == 0 && w2 % w == 0 && h2 / h == w2 / w) {
            a.resize = Resize::nearest;
            a.resize_factor = h2 / h;
        } else {
            fail(ErrorKind::configuration, "no integer resize maps grid " + std::to_string(h) + "x" + std::to_string(w) +
                                               " onto " + std::to_string(h2) + "x" + std::to_string(w2));
        }
        return a;
    }
    if (front_out.kind == K::tokens && back_in.kind == K::tokens) {
        if (front_out.dims[0] != back_in.dims[0]) {
            fail(ErrorKind::configuration, "token counts differ (" + front_out.str() + " -> " + back_in.str() +
                                               "); token resampling is not supported");
        }
        a.kind = AdapterKind::token_project;
        return a;
    }
    if (front_out.kind == K::spatial && back_in.kind == K::tokens) {
        a.kind = AdapterKind::patchify;
        const std::size_t h = front_out.dims[1], w = front_out.dims[2], t = back_in.dims[0];
        std::vector<std::size_t> grids;
        for (std::size_t s = 1; s <= std::min(h, w); ++s) {
            if (h % s || w % s) continue;
            const std::size_t g = (h / s) * (w / s);
            if (g == t) {
                a.patch = s;
                return a;
            }
            grids.push_back(g);
        }
        std::string list;
        for (std::size_t g : grids) list += (list.empty() ? "" : ", ") + std::to_string(g);
        fail(ErrorKind::configuration, "no kernel=stride patchify of " + front_out.str() + " yields " +
                                           std::to_string(t) + " tokens; achievable token counts: " + list);
    }
    if (front_out.kind == K::tokens && back_in.kind == K::spatial) {
        fail(ErrorKind::unsupported, "tokens -> spatial stitching is not supported (" + front_out.str() + " -> " +
                                         back_in.str() + ")");
    }
    fail(ErrorKind::unsupported, "no stitching layer for " + front_out.str() + " -> " + back_in.str());
}

/// Adapter applied to x; parameters are bound as unit 0 of ctx.section.
inline Var apply_adapter(const AdapterSpec& a, const UnitWeights& w, const Var& x, const BindContext& ctx = {}) {
    const std::size_t b = x.shape().empty() ? 0 : x.shape()[0];
    if (x.shape() != a.in_signature.batch_shape(b)) {
        fail(ErrorKind::dimension, "adapter expects " + a.in_signature.str() + ", got batch shape " +
                                       shape_string(x.shape()));
    }
    const Var weight = ctx.param(w, 0, 0);
    const Var bias = ctx.param(w, 0, 1);
    switch (a.kind) {
        case AdapterKind::channel_project: {
            Var h = x;
            if (a.resize == Resize::avg_pool) h = avg_pool2d(h, a.resize_factor, a.resize_factor);
            if (a.resize == Resize::nearest) h = upsample_nearest(h, a.resize_factor, a.resize_factor);
            return add_bias(conv2d(h, weight, 1, 0), bias);
        }
        case AdapterKind::token_project:
            return add_bias(token_linear(x, weight), bias);
        case AdapterKind::patchify:
            return spatial_to_tokens(add_bias(conv2d(x, weight, a.patch, 0), bias));
    }
    return x;
}

/// Weight and bias tensors with fan-in uniform weights, zero bias.
inline UnitWeights random_adapter_weights(const AdapterSpec& a, std::uint64_t seed, DType dtype = DType::f32) {
    std::mt19937_64 rng(seed);
    const auto shapes = a.weight_shapes();
    const Shape& ws = shapes[0].second;
    const std::size_t fan_in = ws.size() == 4 ? ws[1] * ws[2] * ws[3] : ws[0];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return {{"weight", Tensor::uniform(ws, -bound, bound, rng, dtype)},
            {"bias", Tensor::full(shapes[1].second, 0.0, dtype)}};
}

/// Pass-through on the leading min(in, out) channels; zero bias. Only
/// meaningful without a spatial resize or patch grid.
inline UnitWeights identity_adapter_weights(const AdapterSpec& a, DType dtype = DType::f32) {
    if (a.kind == AdapterKind::patchify) fail(ErrorKind::configuration, "patchify adapters have no identity form");
    const auto shapes = a.weight_shapes();
    const Shape& ws = shapes[0].second;
    std::vector<double> v(numel(ws), 0.0);
    if (a.kind == AdapterKind::channel_project) {
        const std::size_t co = ws[0], ci = ws[1];
        for (std::size_t c = 0; c < std::min(co, ci); ++c) v[c * ci + c] = 1.0;
    } else {
        const std::size_t din = ws[0], dout = ws[1];
        for (std::size_t d = 0; d < std::min(din, dout); ++d) v[d * dout + d] = 1.0;
    }
    return {{"weight", Tensor(ws, std::move(v), dtype)}, {"bias", Tensor::full(shapes[1].second, 0.0, dtype)}};
}

namespace detail {

/// Regression rows for least squares: one row per output site (pixel or
/// token), features laid out to match the adapter weight's flattening.
struct RegressionData {
    Eigen::MatrixXd x;  // rows x features
    Eigen::MatrixXd y;  // rows x outputs
};

inline RegressionData adapter_regression(const AdapterSpec& a, const Tensor& front, const Tensor& back) {
    const std::size_t b = front.extent(0);
    if (back.extent(0) != b) {
        fail(ErrorKind::dimension, "calibration batches differ: " + std::to_string(b) + " vs " +
                                       std::to_string(back.extent(0)));
    }
    if (front.shape() != a.in_signature.batch_shape(b) || back.shape() != a.out_signature.batch_shape(b)) {
        fail(ErrorKind::dimension, "calibration shapes " + shape_string(front.shape()) + " / " +
                                       shape_string(back.shape()) + " do not match adapter " + a.in_signature.str() +
                                       " -> " + a.out_signature.str());
    }
    RegressionData r;
    switch (a.kind) {
        case AdapterKind::channel_project: {
            Var h = Var::leaf(front.as(DType::f64));
            if (a.resize == Resize::avg_pool) h = avg_pool2d(h, a.resize_factor, a.resize_factor);
            if (a.resize == Resize::nearest) h = upsample_nearest(h, a.resize_factor, a.resize_factor);
            const auto src = h.value().data();
            const std::size_t c = a.in_signature.dims[0], co = a.out_signature.dims[0];
            const std::size_t hw = a.out_signature.dims[1] * a.out_signature.dims[2];
            r.x.resize(static_cast<Eigen::Index>(b * hw), static_cast<Eigen::Index>(c));
            r.y.resize(static_cast<Eigen::Index>(b * hw), static_cast<Eigen::Index>(co));
            const auto tgt = back.data();
            for (std::size_t n = 0; n < b; ++n)
                for (std::size_t p = 0; p < hw; ++p) {
                    const auto row = static_cast<Eigen::Index>(n * hw + p);
                    for (std::size_t k = 0; k < c; ++k) r.x(row, static_cast<Eigen::Index>(k)) = src[(n * c + k) * hw + p];
                    for (std::size_t k = 0; k < co; ++k) r.y(row, static_cast<Eigen::Index>(k)) = tgt[(n * co + k) * hw + p];
                }
            break;
        }
        case AdapterKind::token_project: {
            const std::size_t t = a.in_signature.dims[0], d = a.in_signature.dims[1], d2 = a.out_signature.dims[1];
            r.x.resize(static_cast<Eigen::Index>(b * t), static_cast<Eigen::Index>(d));
            r.y.resize(static_cast<Eigen::Index>(b * t), static_cast<Eigen::Index>(d2));
            const auto src = front.data();
            const auto tgt = back.data();
            for (std::size_t row = 0; row < b * t; ++row) {
                for (std::size_t k = 0; k < d; ++k) r.x(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(k)) = src[row * d + k];
                for (std::size_t k = 0; k < d2; ++k) r.y(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(k)) = tgt[row * d2 + k];
            }
            break;
        }
        case AdapterKind::patchify: {
            const std::size_t c = a.in_signature.dims[0], h = a.in_signature.dims[1], w = a.in_signature.dims[2];
            const std::size_t s = a.patch, gw = w / s, t = a.out_signature.dims[0], d2 = a.out_signature.dims[1];
            const std::size_t feat = c * s * s;
            r.x.resize(static_cast<Eigen::Index>(b * t), static_cast<Eigen::Index>(feat));
            r.y.resize(static_cast<Eigen::Index>(b * t), static_cast<Eigen::Index>(d2));
            const auto src = front.data();
            const auto tgt = back.data();
            for (std::size_t n = 0; n < b; ++n)
                for (std::size_t p = 0; p < t; ++p) {
                    const auto row = static_cast<Eigen::Index>(n * t + p);
                    const std::size_t gy = p / gw, gx = p % gw;
                    for (std::size_t k = 0; k < c; ++k)
                        for (std::size_t ky = 0; ky < s; ++ky)
                            for (std::size_t kx = 0; kx < s; ++kx)
                                r.x(row, static_cast<Eigen::Index>((k * s + ky) * s + kx)) =
                                    src[((n * c + k) * h + gy * s + ky) * w + gx * s + kx];
                    for (std::size_t k = 0; k < d2; ++k)
                        r.y(row, static_cast<Eigen::Index>(k)) = tgt[(n * t + p) * d2 + k];
                }
            break;
        }
    }
    return r;
}

}  // namespace detail

inline constexpr double kLeastSquaresRidge = 1e-6;

/// Least-squares fit of the adapter onto paired activations (front output,
/// back input) via ridge-regularized normal equations. Returns nullopt when
/// the system cannot be solved.
inline std::optional<UnitWeights> least_squares_adapter_weights(const AdapterSpec& a, const Tensor& front,
                                                                const Tensor& back, DType dtype = DType::f32) {
    auto r = detail::adapter_regression(a, front, back);
    const Eigen::Index rows = r.x.rows(), feat = r.x.cols();
    Eigen::MatrixXd design(rows, feat + 1);
    design.leftCols(feat) = r.x;
    design.col(feat).setOnes();
    Eigen::MatrixXd gram = design.transpose() * design;
    gram.diagonal().array() += kLeastSquaresRidge;
    Eigen::LLT<Eigen::MatrixXd> llt(gram);
    if (llt.info() != Eigen::Success) return std::nullopt;
    const Eigen::MatrixXd sol = llt.solve(design.transpose() * r.y);  // (feat+1) x outputs
    if (!sol.allFinite()) return std::nullopt;

    const auto shapes = a.weight_shapes();
    const Shape& ws = shapes[0].second;
    const std::size_t outputs = static_cast<std::size_t>(r.y.cols());
    std::vector<double> w(numel(ws)), bias(outputs);
    for (std::size_t o = 0; o < outputs; ++o) {
        bias[o] = sol(feat, static_cast<Eigen::Index>(o));
        for (Eigen::Index f = 0; f < feat; ++f) {
            const double v = sol(f, static_cast<Eigen::Index>(o));
            if (a.kind == AdapterKind::token_project) w[static_cast<std::size_t>(f) * outputs + o] = v;
            else w[o * static_cast<std::size_t>(feat) + static_cast<std::size_t>(f)] = v;
        }
    }
    return UnitWeights{{"weight", Tensor(ws, std::move(w), dtype)}, {"bias", Tensor(shapes[1].second, std::move(bias), dtype)}};
}

struct Calibration {
    Tensor front;  // activation after the front stitch unit
    Tensor back;   // activation after the back stitch unit (suffix input)
};

/// Initializes adapter weights. Least squares falls back to random when no
/// calibration is given or the normal equations fail.
inline UnitWeights init_adapter(AdapterSpec& a, AdapterInit mode, const std::optional<Calibration>& calib,
                                std::uint64_t seed, DType dtype = DType::f32) {
    if (mode == AdapterInit::identity) {
        a.init = mode;
        return identity_adapter_weights(a, dtype);
    }
    if (mode == AdapterInit::least_squares) {
        if (calib) {
            if (auto w = least_squares_adapter_weights(a, calib->front, calib->back, dtype)) {
                a.init = mode;
                return *w;
            }
            warn("least-squares adapter init failed (normal equations not solvable); using random init");
        } else {
            warn("no calibration activations; using random adapter init");
        }
    }
    a.init = AdapterInit::random;
    return random_adapter_weights(a, seed, dtype);
}

}  // namespace restitch
