#pragma once

// Sequential networks described as ordered stitchable units: shape
// inference, parameter/FLOP accounting, forward passes with activation taps,
// prefix/suffix extraction and weight persistence.

#include <algorithm>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "restitch/autograd.hpp"
#include "restitch/digest.hpp"
#include "restitch/error.hpp"
#include "restitch/tensor.hpp"

namespace restitch {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Signatures

enum class SignatureKind { spatial, tokens, vector };

/// Per-sample activation shape at a unit boundary.
struct Signature {
    SignatureKind kind = SignatureKind::vector;
    std::vector<std::size_t> dims{1};

    static Signature spatial(std::size_t c, std::size_t h, std::size_t w) {
        return {SignatureKind::spatial, {c, h, w}};
    }
    static Signature tokens(std::size_t t, std::size_t d) { return {SignatureKind::tokens, {t, d}}; }
    static Signature vector(std::size_t d) { return {SignatureKind::vector, {d}}; }

    std::size_t features() const { return numel(dims); }

    Shape batch_shape(std::size_t batch) const {
        Shape s{batch};
        s.insert(s.end(), dims.begin(), dims.end());
        return s;
    }

    bool operator==(const Signature&) const = default;

    std::string str() const {
        static const char* names[] = {"spatial", "tokens", "vector"};
        std::string s = names[static_cast<int>(kind)];
        s += shape_string(dims);
        return s;
    }
};

inline Signature signature_of(const Shape& batch_shape) {
    switch (batch_shape.size()) {
        case 4: return Signature::spatial(batch_shape[1], batch_shape[2], batch_shape[3]);
        case 3: return Signature::tokens(batch_shape[1], batch_shape[2]);
        case 2: return Signature::vector(batch_shape[1]);
        default:
            fail(ErrorKind::dimension, "no signature for batch shape " + shape_string(batch_shape));
    }
}

inline json to_json(const Signature& s) {
    static const char* names[] = {"spatial", "tokens", "vector"};
    return json{{"kind", names[static_cast<int>(s.kind)]}, {"dims", s.dims}};
}

inline Signature signature_from_json(const json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    Signature s;
    s.dims = j.at("dims").get<std::vector<std::size_t>>();
    if (kind == "spatial" && s.dims.size() == 3) s.kind = SignatureKind::spatial;
    else if (kind == "tokens" && s.dims.size() == 2) s.kind = SignatureKind::tokens;
    else if (kind == "vector" && s.dims.size() == 1) s.kind = SignatureKind::vector;
    else fail(ErrorKind::format, "bad signature: " + j.dump());
    for (std::size_t d : s.dims)
        if (d == 0) fail(ErrorKind::format, "zero extent in signature: " + j.dump());
    return s;
}

// ---------------------------------------------------------------------------
// Unit configuration

enum class UnitKind { conv_block, pool, dense, token_block, embed, head };
enum class Norm { none, batch };
enum class PoolMode { max, avg };

inline std::string to_string(UnitKind k) {
    switch (k) {
        case UnitKind::conv_block: return "conv-block";
        case UnitKind::pool: return "pool";
        case UnitKind::dense: return "dense";
        case UnitKind::token_block: return "token-block";
        case UnitKind::embed: return "embed";
        case UnitKind::head: return "head";
    }
    return "?";
}

inline UnitKind parse_unit_kind(const std::string& s) {
    for (UnitKind k : {UnitKind::conv_block, UnitKind::pool, UnitKind::dense, UnitKind::token_block,
                       UnitKind::embed, UnitKind::head})
        if (to_string(k) == s) return k;
    fail(ErrorKind::format, "unknown unit kind '" + s + "'");
}

/// User-facing description of one unit. Fields irrelevant to a kind are ignored.
///   conv-block : conv(kernel, stride, padding) -> [batch-norm] -> [relu]
///   pool       : max/avg pool with stride == kernel
///   dense      : flatten -> linear(out_channels) -> [relu]
///   embed      : patchify conv (kernel == stride) to out_channels-wide tokens + positions
///   token-block: x + W2 relu(W1 layernorm(x) + b1) + b2, MLP width `hidden`
///   head       : (flatten | token mean) -> linear(num_classes)
struct LayerConfig {
    std::string name;
    UnitKind kind = UnitKind::conv_block;
    std::size_t out_channels = 0;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t padding = 0;
    Norm norm = Norm::none;
    bool relu = true;
    PoolMode pool = PoolMode::max;
    std::size_t hidden = 0;

    static LayerConfig conv(std::string name, std::size_t out, std::size_t kernel = 3,
                            std::size_t stride = 1, std::size_t padding = 1, Norm norm = Norm::none) {
        LayerConfig c;
        c.name = std::move(name);
        c.kind = UnitKind::conv_block;
        c.out_channels = out;
        c.kernel = kernel;
        c.stride = stride;
        c.padding = padding;
        c.norm = norm;
        return c;
    }
    static LayerConfig pooling(std::string name, std::size_t kernel = 2, PoolMode mode = PoolMode::max) {
        LayerConfig c;
        c.name = std::move(name);
        c.kind = UnitKind::pool;
        c.kernel = kernel;
        c.stride = kernel;
        c.pool = mode;
        return c;
    }
    static LayerConfig dense(std::string name, std::size_t out, bool relu = true) {
        LayerConfig c;
        c.name = std::move(name);
        c.kind = UnitKind::dense;
        c.out_channels = out;
        c.relu = relu;
        return c;
    }
    static LayerConfig embed(std::string name, std::size_t width, std::size_t patch) {
        LayerConfig c;
        c.name = std::move(name);
        c.kind = UnitKind::embed;
        c.out_channels = width;
        c.kernel = patch;
        c.stride = patch;
        return c;
    }
    static LayerConfig token_block(std::string name, std::size_t hidden) {
        LayerConfig c;
        c.name = std::move(name);
        c.kind = UnitKind::token_block;
        c.hidden = hidden;
        return c;
    }
    static LayerConfig head(std::string name = "head") {
        LayerConfig c;
        c.name = std::move(name);
        c.kind = UnitKind::head;
        return c;
    }

    bool operator==(const LayerConfig&) const = default;
};

inline json to_json(const LayerConfig& c) {
    json j{{"name", c.name}, {"kind", to_string(c.kind)}};
    switch (c.kind) {
        case UnitKind::conv_block:
            j["out_channels"] = c.out_channels;
            j["kernel"] = c.kernel;
            j["stride"] = c.stride;
            j["padding"] = c.padding;
            j["norm"] = c.norm == Norm::batch ? "batch" : "none";
            j["relu"] = c.relu;
            break;
        case UnitKind::pool:
            j["kernel"] = c.kernel;
            j["pool"] = c.pool == PoolMode::max ? "max" : "avg";
            break;
        case UnitKind::dense:
            j["out_channels"] = c.out_channels;
            j["relu"] = c.relu;
            break;
        case UnitKind::embed:
            j["out_channels"] = c.out_channels;
            j["kernel"] = c.kernel;
            break;
        case UnitKind::token_block:
            j["hidden"] = c.hidden;
            break;
        case UnitKind::head:
            break;
    }
    return j;
}

inline LayerConfig layer_from_json(const json& j) {
    LayerConfig c;
    c.name = j.at("name").get<std::string>();
    c.kind = parse_unit_kind(j.at("kind").get<std::string>());
    c.out_channels = j.value("out_channels", std::size_t{0});
    c.kernel = j.value("kernel", std::size_t{3});
    c.stride = j.value("stride", std::size_t{1});
    c.padding = j.value("padding", std::size_t{0});
    c.norm = j.value("norm", std::string("none")) == "batch" ? Norm::batch : Norm::none;
    c.relu = j.value("relu", true);
    c.pool = j.value("pool", std::string("max")) == "avg" ? PoolMode::avg : PoolMode::max;
    c.hidden = j.value("hidden", std::size_t{0});
    if (c.kind == UnitKind::pool || c.kind == UnitKind::embed) c.stride = c.kernel;
    return c;
}

/// Named weight tensors of a unit in canonical order, given its input.
inline std::vector<std::pair<std::string, Shape>> weight_shapes(const LayerConfig& c, const Signature& in,
                                                                std::size_t num_classes) {
    switch (c.kind) {
        case UnitKind::conv_block: {
            const std::size_t ci = in.dims[0], co = c.out_channels;
            std::vector<std::pair<std::string, Shape>> w{{"weight", {co, ci, c.kernel, c.kernel}},
                                                         {"bias", {co}}};
            if (c.norm == Norm::batch) {
                w.push_back({"bn_gamma", {co}});
                w.push_back({"bn_beta", {co}});
                w.push_back({"bn_mean", {co}});
                w.push_back({"bn_var", {co}});
            }
            return w;
        }
        case UnitKind::pool: return {};
        case UnitKind::dense: return {{"weight", {in.features(), c.out_channels}}, {"bias", {c.out_channels}}};
        case UnitKind::embed: {
            const std::size_t t = (in.dims[1] / c.kernel) * (in.dims[2] / c.kernel);
            return {{"weight", {c.out_channels, in.dims[0], c.kernel, c.kernel}},
                    {"bias", {c.out_channels}},
                    {"pos", {t, c.out_channels}}};
        }
        case UnitKind::token_block: {
            const std::size_t d = in.dims[1];
            return {{"ln_gamma", {d}}, {"ln_beta", {d}}, {"w1", {d, c.hidden}},
                    {"b1", {c.hidden}}, {"w2", {c.hidden, d}}, {"b2", {d}}};
        }
        case UnitKind::head: {
            const std::size_t d = in.kind == SignatureKind::tokens ? in.dims[1] : in.features();
            return {{"weight", {d, num_classes}}, {"bias", {num_classes}}};
        }
    }
    return {};
}

/// Output signature of a unit, or a dimension/configuration error.
inline Signature infer_output(const LayerConfig& c, const Signature& in, std::size_t num_classes) {
    auto need_spatial = [&] {
        if (in.kind != SignatureKind::spatial) {
            fail(ErrorKind::dimension, "unit '" + c.name + "' (" + to_string(c.kind) +
                                           ") needs spatial input, got " + in.str());
        }
    };
    switch (c.kind) {
        case UnitKind::conv_block: {
            need_spatial();
            if (c.out_channels == 0) fail(ErrorKind::configuration, "unit '" + c.name + "': out_channels must be > 0");
            const std::size_t h = conv_out_extent(in.dims[1], c.kernel, c.stride, c.padding, "height");
            const std::size_t w = conv_out_extent(in.dims[2], c.kernel, c.stride, c.padding, "width");
            return Signature::spatial(c.out_channels, h, w);
        }
        case UnitKind::pool: {
            need_spatial();
            const std::size_t h = conv_out_extent(in.dims[1], c.kernel, c.kernel, 0, "height");
            const std::size_t w = conv_out_extent(in.dims[2], c.kernel, c.kernel, 0, "width");
            return Signature::spatial(in.dims[0], h, w);
        }
        case UnitKind::dense:
            if (c.out_channels == 0) fail(ErrorKind::configuration, "unit '" + c.name + "': out_channels must be > 0");
            return Signature::vector(c.out_channels);
        case UnitKind::embed: {
            need_spatial();
            if (c.out_channels == 0) fail(ErrorKind::configuration, "unit '" + c.name + "': width must be > 0");
            const std::size_t h = conv_out_extent(in.dims[1], c.kernel, c.kernel, 0, "height");
            const std::size_t w = conv_out_extent(in.dims[2], c.kernel, c.kernel, 0, "width");
            return Signature::tokens(h * w, c.out_channels);
        }
        case UnitKind::token_block:
            if (in.kind != SignatureKind::tokens) {
                fail(ErrorKind::dimension, "unit '" + c.name + "' (token-block) needs token input, got " + in.str());
            }
            if (c.hidden == 0) fail(ErrorKind::configuration, "unit '" + c.name + "': hidden must be > 0");
            return in;
        case UnitKind::head:
            if (num_classes == 0) fail(ErrorKind::configuration, "head '" + c.name + "': num_classes must be > 0");
            return Signature::vector(num_classes);
    }
    return in;
}

/// Per-sample FLOPs of one unit. Convention: conv 2*c_in*c_out*kh*kw*h'*w';
/// dense 2*d_in*d_out; pool, activation, normalization, residual add and
/// token mean each count one op per output (or input, for the mean) element.
inline std::uint64_t unit_flops(const LayerConfig& c, const Signature& in, const Signature& out) {
    using u64 = std::uint64_t;
    switch (c.kind) {
        case UnitKind::conv_block: {
            const u64 elems = out.features();
            u64 f = 2 * u64(in.dims[0]) * out.dims[0] * c.kernel * c.kernel * out.dims[1] * out.dims[2];
            if (c.norm == Norm::batch) f += elems;
            if (c.relu) f += elems;
            return f;
        }
        case UnitKind::pool: return out.features();
        case UnitKind::dense: return 2 * u64(in.features()) * out.features() + (c.relu ? out.features() : 0);
        case UnitKind::embed: {
            const u64 t = out.dims[0], d = out.dims[1];
            return 2 * u64(in.dims[0]) * d * c.kernel * c.kernel * t + t * d;
        }
        case UnitKind::token_block: {
            const u64 t = in.dims[0], d = in.dims[1], h = c.hidden;
            return t * d + 2 * t * d * h + t * h + 2 * t * h * d + t * d;
        }
        case UnitKind::head: {
            if (in.kind == SignatureKind::tokens) {
                return u64(in.features()) + 2 * u64(in.dims[1]) * out.features();
            }
            return 2 * u64(in.features()) * out.features();
        }
    }
    return 0;
}

/// A resolved unit: configuration plus derived boundary signatures and costs.
struct StitchableUnit {
    std::size_t index = 0;
    LayerConfig config;
    Signature in_signature;
    Signature out_signature;
    std::uint64_t param_count = 0;
    std::uint64_t flops = 0;

    const std::string& name() const { return config.name; }
    UnitKind kind() const { return config.kind; }
};

class NetworkSpec {
public:
    NetworkSpec() = default;

    NetworkSpec(std::string model_id, Signature input, std::size_t num_classes,
                const std::vector<LayerConfig>& layers)
        : model_id_(std::move(model_id)), input_(std::move(input)), num_classes_(num_classes) {
        if (layers.empty()) fail(ErrorKind::configuration, "network '" + model_id_ + "' has no units");
        Signature cur = input_;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const LayerConfig& c = layers[i];
            if (c.kind == UnitKind::head && i + 1 != layers.size()) {
                fail(ErrorKind::configuration, "head '" + c.name + "' must be the last unit");
            }
            StitchableUnit u;
            u.index = i;
            u.config = c;
            u.in_signature = cur;
            u.out_signature = infer_output(c, cur, num_classes_);
            for (const auto& [name, shape] : weight_shapes(c, cur, num_classes_)) u.param_count += numel(shape);
            u.flops = unit_flops(c, cur, u.out_signature);
            cur = u.out_signature;
            units_.push_back(std::move(u));
        }
    }

    const std::string& model_id() const { return model_id_; }
    const Signature& input_signature() const { return input_; }
    const Signature& output_signature() const { return units_.back().out_signature; }
    std::size_t num_classes() const { return num_classes_; }
    const std::vector<StitchableUnit>& units() const { return units_; }
    const StitchableUnit& unit(std::size_t i) const {
        if (i >= units_.size()) {
            fail(ErrorKind::lookup, "unit index " + std::to_string(i) + " out of range for '" + model_id_ +
                                        "' with " + std::to_string(units_.size()) + " units");
        }
        return units_[i];
    }
    std::size_t size() const { return units_.size(); }
    bool has_head() const { return !units_.empty() && units_.back().kind() == UnitKind::head; }

    std::vector<LayerConfig> layers(std::size_t begin, std::size_t end) const {
        std::vector<LayerConfig> out;
        for (std::size_t i = begin; i < end; ++i) out.push_back(units_.at(i).config);
        return out;
    }

    std::uint64_t total_params() const {
        std::uint64_t s = 0;
        for (const auto& u : units_) s += u.param_count;
        return s;
    }

    bool operator==(const NetworkSpec& o) const {
        return model_id_ == o.model_id_ && input_ == o.input_ && num_classes_ == o.num_classes_ &&
               layers(0, size()) == o.layers(0, o.size());
    }

private:
    std::string model_id_;
    Signature input_;
    std::size_t num_classes_ = 0;
    std::vector<StitchableUnit> units_;
};

inline json to_json(const NetworkSpec& spec) {
    json units = json::array();
    for (const auto& u : spec.units()) {
        json j = to_json(u.config);
        j["index"] = u.index;
        j["out_signature"] = to_json(u.out_signature);
        j["param_count"] = u.param_count;
        j["flops"] = u.flops;
        units.push_back(std::move(j));
    }
    return json{{"model_id", spec.model_id()},
                {"input_signature", to_json(spec.input_signature())},
                {"num_classes", spec.num_classes()},
                {"total_params", spec.total_params()},
                {"units", std::move(units)}};
}

/// Parses a spec; derived fields present in the file must agree with the
/// recomputed ones.
inline NetworkSpec spec_from_json(const json& j) {
    try {
        std::vector<LayerConfig> layers;
        for (const auto& u : j.at("units")) layers.push_back(layer_from_json(u));
        NetworkSpec spec(j.at("model_id").get<std::string>(), signature_from_json(j.at("input_signature")),
                         j.at("num_classes").get<std::size_t>(), layers);
        const auto& ju = j.at("units");
        for (std::size_t i = 0; i < spec.size(); ++i) {
            const auto& u = spec.unit(i);
            if (ju[i].contains("index") && ju[i]["index"].get<std::size_t>() != i)
                fail(ErrorKind::format, "unit indices must be consecutive from 0");
            if (ju[i].contains("param_count") && ju[i]["param_count"].get<std::uint64_t>() != u.param_count)
                fail(ErrorKind::format, "unit '" + u.name() + "' declares param_count " +
                                            ju[i]["param_count"].dump() + ", computed " +
                                            std::to_string(u.param_count));
            if (ju[i].contains("out_signature") && signature_from_json(ju[i]["out_signature"]) != u.out_signature)
                fail(ErrorKind::format, "unit '" + u.name() + "' declares out_signature " +
                                            ju[i]["out_signature"].dump() + ", computed " + u.out_signature.str());
        }
        return spec;
    } catch (const json::exception& e) {
        fail(ErrorKind::format, std::string("network spec: ") + e.what());
    }
}

inline void save_spec(const NetworkSpec& spec, const std::filesystem::path& path) {
    write_file_text(path, to_json(spec).dump(2) + "\n");
}

inline NetworkSpec load_spec(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_file_text(path));
    } catch (const json::parse_error& e) {
        fail(ErrorKind::format, path.string() + ": " + e.what());
    }
    return spec_from_json(j);
}

inline std::uint64_t count_params(const NetworkSpec& spec, std::size_t begin, std::size_t end) {
    if (begin > end || end > spec.size()) {
        fail(ErrorKind::range, "unit range [" + std::to_string(begin) + "," + std::to_string(end) +
                                   ") invalid for " + std::to_string(spec.size()) + " units");
    }
    std::uint64_t s = 0;
    for (std::size_t i = begin; i < end; ++i) s += spec.units()[i].param_count;
    return s;
}

inline std::uint64_t estimate_flops(const NetworkSpec& spec, std::size_t begin, std::size_t end) {
    if (begin > end || end > spec.size()) {
        fail(ErrorKind::range, "unit range [" + std::to_string(begin) + "," + std::to_string(end) +
                                   ") invalid for " + std::to_string(spec.size()) + " units");
    }
    std::uint64_t s = 0;
    for (std::size_t i = begin; i < end; ++i) s += spec.units()[i].flops;
    return s;
}

// ---------------------------------------------------------------------------
// Weights

struct NamedTensor {
    std::string name;
    Tensor value;
};

using UnitWeights = std::vector<NamedTensor>;

class WeightStore {
public:
    WeightStore() = default;
    WeightStore(std::string model_id, std::vector<UnitWeights> units)
        : model_id_(std::move(model_id)), units_(std::move(units)) {}

    const std::string& model_id() const { return model_id_; }
    void set_model_id(std::string id) { model_id_ = std::move(id); }
    std::size_t unit_count() const { return units_.size(); }
    const std::vector<UnitWeights>& units() const { return units_; }

    const UnitWeights& unit(std::size_t i) const {
        if (i >= units_.size()) fail(ErrorKind::lookup, "weight store has no unit " + std::to_string(i));
        return units_[i];
    }

    const Tensor& get(std::size_t unit_index, const std::string& name) const {
        for (const auto& nt : unit(unit_index))
            if (nt.name == name) return nt.value;
        fail(ErrorKind::lookup, "unit " + std::to_string(unit_index) + " has no tensor '" + name + "'");
    }

    void set(std::size_t unit_index, std::size_t slot, Tensor value) {
        auto& nt = units_.at(unit_index).at(slot);
        if (nt.value.shape() != value.shape() || nt.value.dtype() != value.dtype()) {
            fail(ErrorKind::dimension, "replacement for '" + nt.name + "' changes shape or dtype");
        }
        nt.value = std::move(value);
    }

    std::uint64_t element_count(std::size_t begin, std::size_t end) const {
        std::uint64_t s = 0;
        for (std::size_t i = begin; i < end && i < units_.size(); ++i)
            for (const auto& nt : units_[i]) s += nt.value.size();
        return s;
    }
    std::uint64_t element_count() const { return element_count(0, units_.size()); }

    /// Digest over the ordered per-tensor digests (names included).
    std::string digest() const {
        std::string acc;
        for (std::size_t i = 0; i < units_.size(); ++i)
            for (const auto& nt : units_[i])
                acc += std::to_string(i) + ":" + nt.name + ":" + tensor_digest(nt.value) + "\n";
        return sha256_hex(acc);
    }

    bool bit_equal(const WeightStore& o) const {
        if (units_.size() != o.units_.size()) return false;
        for (std::size_t i = 0; i < units_.size(); ++i) {
            if (units_[i].size() != o.units_[i].size()) return false;
            for (std::size_t k = 0; k < units_[i].size(); ++k)
                if (units_[i][k].name != o.units_[i][k].name || !units_[i][k].value.bit_equal(o.units_[i][k].value))
                    return false;
        }
        return true;
    }

    /// Sub-store covering units [begin, end), re-indexed from 0.
    WeightStore slice(std::size_t begin, std::size_t end, std::string model_id) const {
        return WeightStore(std::move(model_id),
                           std::vector<UnitWeights>(units_.begin() + static_cast<std::ptrdiff_t>(begin),
                                                    units_.begin() + static_cast<std::ptrdiff_t>(end)));
    }

private:
    std::string model_id_;
    std::vector<UnitWeights> units_;
};

/// Throws unless every unit holds exactly the tensors its spec declares.
inline void check_weights(const NetworkSpec& spec, const WeightStore& w) {
    if (w.unit_count() != spec.size()) {
        fail(ErrorKind::format, "weight store for '" + spec.model_id() + "' has " + std::to_string(w.unit_count()) +
                                    " units, spec has " + std::to_string(spec.size()));
    }
    for (const auto& u : spec.units()) {
        const auto expect = weight_shapes(u.config, u.in_signature, spec.num_classes());
        const auto& have = w.unit(u.index);
        if (have.size() != expect.size()) {
            fail(ErrorKind::format, "unit '" + u.name() + "' expects " + std::to_string(expect.size()) +
                                        " tensors, store has " + std::to_string(have.size()));
        }
        std::uint64_t total = 0;
        for (std::size_t k = 0; k < expect.size(); ++k) {
            if (have[k].name != expect[k].first) {
                fail(ErrorKind::format, "unit '" + u.name() + "' missing tensor '" + expect[k].first + "'");
            }
            if (have[k].value.shape() != expect[k].second) {
                fail(ErrorKind::dimension, "unit '" + u.name() + "' tensor '" + expect[k].first + "' has shape " +
                                               shape_string(have[k].value.shape()) + ", expected " +
                                               shape_string(expect[k].second));
            }
            total += have[k].value.size();
        }
        if (total != u.param_count) {
            fail(ErrorKind::format, "unit '" + u.name() + "' stores " + std::to_string(total) +
                                        " elements, declares " + std::to_string(u.param_count));
        }
    }
}

/// He-uniform weights, zero biases, identity normalization, small positions.
inline WeightStore init_weights(const NetworkSpec& spec, std::uint64_t seed, DType dtype = DType::f32) {
    std::mt19937_64 rng(seed);
    std::vector<UnitWeights> units;
    for (const auto& u : spec.units()) {
        UnitWeights uw;
        for (const auto& [name, shape] : weight_shapes(u.config, u.in_signature, spec.num_classes())) {
            Tensor t;
            if (name == "weight" || name == "w1" || name == "w2") {
                const std::size_t fan_in =
                    shape.size() == 4 ? shape[1] * shape[2] * shape[3] : shape[0];
                const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
                const double gain = u.kind() == UnitKind::head || name == "w2" ? 0.5 : 1.0;
                t = Tensor::uniform(shape, -bound * gain, bound * gain, rng, dtype);
            } else if (name == "pos") {
                t = Tensor::uniform(shape, -0.02, 0.02, rng, dtype);
            } else if (name == "bn_gamma" || name == "bn_var" || name == "ln_gamma") {
                t = Tensor::full(shape, 1.0, dtype);
            } else {
                t = Tensor::full(shape, 0.0, dtype);
            }
            uw.push_back({name, std::move(t)});
        }
        units.push_back(std::move(uw));
    }
    return WeightStore(spec.model_id(), std::move(units));
}

// ---------------------------------------------------------------------------
// Forward execution

/// Identifies one parameter tensor: section (0 front / 1 adapter / 2 back for
/// stitched models, 0 for plain networks), unit and slot within the unit.
struct ParamRef {
    int section = 0;
    std::size_t unit = 0;
    std::size_t slot = 0;
    auto operator<=>(const ParamRef&) const = default;
};

/// Collects the trainable leaves created during one forward pass.
struct Binding {
    std::vector<std::pair<ParamRef, Var>> params;
};

struct BindContext {
    Binding* binding = nullptr;
    int section = 0;
    bool trainable = false;

    Var param(const UnitWeights& w, std::size_t unit, std::size_t slot) const {
        const bool grad = trainable && binding != nullptr;
        Var v = Var::leaf(w.at(slot).value, grad);
        if (grad) binding->params.push_back({ParamRef{section, unit, slot}, v});
        return v;
    }
};

using TapSink = std::function<void(std::size_t unit, const Tensor& activation)>;

inline Var apply_unit(const StitchableUnit& u, const UnitWeights& w, const Var& x, const BindContext& ctx) {
    const std::size_t b = x.shape().empty() ? 0 : x.shape()[0];
    if (x.shape() != u.in_signature.batch_shape(b)) {
        fail(ErrorKind::dimension, "unit " + std::to_string(u.index) + " '" + u.name() + "' expects " +
                                       u.in_signature.str() + ", got batch shape " + shape_string(x.shape()));
    }
    auto p = [&](std::size_t slot) { return ctx.param(w, u.index, slot); };
    const LayerConfig& c = u.config;
    switch (c.kind) {
        case UnitKind::conv_block: {
            Var y = add_bias(conv2d(x, p(0), c.stride, c.padding), p(1));
            if (c.norm == Norm::batch) y = batch_norm_inference(y, w.at(4).value, w.at(5).value, p(2), p(3));
            return c.relu ? relu(y) : y;
        }
        case UnitKind::pool:
            return c.pool == PoolMode::max ? max_pool2d(x, c.kernel, c.kernel) : avg_pool2d(x, c.kernel, c.kernel);
        case UnitKind::dense: {
            Var y = add_bias(matmul(x.shape().size() == 2 ? x : flatten_features(x), p(0)), p(1));
            return c.relu ? relu(y) : y;
        }
        case UnitKind::embed: {
            Var y = add_bias(conv2d(x, p(0), c.kernel, 0), p(1));
            return add_bias(spatial_to_tokens(y), p(2));
        }
        case UnitKind::token_block: {
            Var h = layer_norm(x, p(0), p(1));
            h = relu(add_bias(token_linear(h, p(2)), p(3)));
            h = add_bias(token_linear(h, p(4)), p(5));
            return add(x, h);
        }
        case UnitKind::head: {
            Var f = x.shape().size() == 3 ? mean_tokens(x) : (x.shape().size() == 2 ? x : flatten_features(x));
            return add_bias(matmul(f, p(0)), p(1));
        }
    }
    return x;
}

/// Runs units [begin, end) of `spec` on x. `taps`, when set, receives the
/// activation after every unit in the range (indices relative to `spec`).
inline Var forward_range(const NetworkSpec& spec, const WeightStore& weights, const Var& x, std::size_t begin,
                         std::size_t end, const BindContext& ctx = {}, const TapSink& taps = {}) {
    if (begin > end || end > spec.size()) {
        fail(ErrorKind::range, "unit range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for '" +
                                   spec.model_id() + "'");
    }
    Var h = x;
    for (std::size_t i = begin; i < end; ++i) {
        h = apply_unit(spec.units()[i], weights.unit(i), h, ctx);
        if (taps) taps(i, h.value());
    }
    return h;
}

/// A network specification together with its weights.
struct Network {
    NetworkSpec spec;
    WeightStore weights;

    Var forward(const Var& x, const BindContext& ctx = {}, const TapSink& taps = {}) const {
        return forward_range(spec, weights, x, 0, spec.size(), ctx, taps);
    }

    /// Output of the last unit (logits when the network ends in a head).
    Tensor logits(const Tensor& batch) const { return forward(Var::leaf(batch)).value(); }

    std::uint64_t param_count() const { return spec.total_params(); }
};

inline Tensor forward(const NetworkSpec& spec, const WeightStore& weights, const Tensor& batch) {
    return forward_range(spec, weights, Var::leaf(batch), 0, spec.size()).value();
}

struct TappedOutput {
    Tensor logits;
    std::map<std::size_t, Tensor> captures;
};

/// Forward pass recording the activation after each requested unit.
inline TappedOutput forward_with_taps(const NetworkSpec& spec, const WeightStore& weights, const Tensor& batch,
                                      const std::set<std::size_t>& tap_indices) {
    for (std::size_t t : tap_indices) {
        if (t >= spec.size()) {
            fail(ErrorKind::lookup, "tap index " + std::to_string(t) + " not a unit of '" + spec.model_id() +
                                        "' (" + std::to_string(spec.size()) + " units)");
        }
    }
    TappedOutput out;
    Var y = forward_range(spec, weights, Var::leaf(batch), 0, spec.size(), {},
                          [&](std::size_t i, const Tensor& a) {
                              if (tap_indices.count(i)) out.captures.emplace(i, a);
                          });
    out.logits = y.value();
    return out;
}

inline std::set<std::size_t> all_units(const NetworkSpec& spec) {
    std::set<std::size_t> s;
    for (std::size_t i = 0; i < spec.size(); ++i) s.insert(i);
    return s;
}

/// Spec of units [begin, end), re-indexed from 0.
inline NetworkSpec subnetwork_spec(const NetworkSpec& spec, std::size_t begin, std::size_t end,
                                   const std::string& model_id) {
    if (begin >= end || end > spec.size()) {
        fail(ErrorKind::range, "sub-network range [" + std::to_string(begin) + "," + std::to_string(end) +
                                   ") invalid for " + std::to_string(spec.size()) + " units");
    }
    const Signature& in = begin == 0 ? spec.input_signature() : spec.unit(begin - 1).out_signature;
    return NetworkSpec(model_id, in, spec.num_classes(), spec.layers(begin, end));
}

/// Sub-network over units [begin, end), re-indexed from 0.
inline Network subnetwork(const Network& net, std::size_t begin, std::size_t end, std::string model_id) {
    NetworkSpec spec = subnetwork_spec(net.spec, begin, end, model_id);
    return {std::move(spec), net.weights.slice(begin, end, std::move(model_id))};
}

/// Splits into prefix units [0, at) and suffix units [at, k); requires 1 <= at < k.
inline std::pair<Network, Network> split(const Network& net, std::size_t at) {
    const std::size_t k = net.spec.size();
    if (at < 1 || at >= k) {
        fail(ErrorKind::range, "split point " + std::to_string(at) + " outside [1," + std::to_string(k) + ")");
    }
    const std::string& id = net.spec.model_id();
    return {subnetwork(net, 0, at, id + "[0:" + std::to_string(at) + ")"),
            subnetwork(net, at, k, id + "[" + std::to_string(at) + ":" + std::to_string(k) + ")")};
}

/// Concatenates two networks whose boundary signatures agree.
inline Network compose(const Network& front, const Network& back, std::string model_id) {
    if (front.spec.output_signature() != back.spec.input_signature()) {
        fail(ErrorKind::dimension, "cannot compose: front ends in " + front.spec.output_signature().str() +
                                       ", back expects " + back.spec.input_signature().str());
    }
    auto layers = front.spec.layers(0, front.spec.size());
    auto tail = back.spec.layers(0, back.spec.size());
    layers.insert(layers.end(), tail.begin(), tail.end());
    std::vector<UnitWeights> w = front.weights.units();
    w.insert(w.end(), back.weights.units().begin(), back.weights.units().end());
    NetworkSpec spec(model_id, front.spec.input_signature(), back.spec.num_classes(), layers);
    return {std::move(spec), WeightStore(std::move(model_id), std::move(w))};
}

// ---------------------------------------------------------------------------
// Weight files: <dir>/weights.json plus one raw little-endian blob per tensor.

inline constexpr int kWeightsFormatVersion = 1;

inline void save_weights(const WeightStore& store, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    json tensors = json::array();
    for (std::size_t u = 0; u < store.unit_count(); ++u) {
        for (const auto& nt : store.unit(u)) {
            const std::string blob = "u" + std::to_string(u) + "_" + nt.name + ".bin";
            const auto bytes = encode_tensor(nt.value);
            write_file_bytes(dir / blob, bytes);
            tensors.push_back(json{{"unit", u},
                                   {"name", nt.name},
                                   {"shape", nt.value.shape()},
                                   {"dtype", to_string(nt.value.dtype())},
                                   {"blob", blob},
                                   {"sha256", sha256_hex(bytes)}});
        }
    }
    json manifest{{"format_version", kWeightsFormatVersion},
                  {"model_id", store.model_id()},
                  {"byte_order", "little"},
                  {"unit_count", store.unit_count()},
                  {"tensors", std::move(tensors)}};
    write_file_text(dir / "weights.json", manifest.dump(2) + "\n");
}

/// Loads and digest-verifies a weight directory. When `expected` is given,
/// every tensor must already have that dtype; no conversion is done.
inline WeightStore load_weights(const std::filesystem::path& dir, std::optional<DType> expected = std::nullopt) {
    const auto manifest_path = dir / "weights.json";
    if (!std::filesystem::exists(manifest_path)) fail(ErrorKind::format, "missing " + manifest_path.string());
    json m;
    try {
        m = json::parse(read_file_text(manifest_path));
    } catch (const json::parse_error& e) {
        fail(ErrorKind::format, manifest_path.string() + ": " + e.what());
    }
    try {
        const int version = m.at("format_version").get<int>();
        if (version != kWeightsFormatVersion) {
            fail(ErrorKind::format, "weights format_version " + std::to_string(version) + ", reader supports " +
                                        std::to_string(kWeightsFormatVersion));
        }
        if (m.value("byte_order", std::string("little")) != "little") {
            fail(ErrorKind::format, "unsupported byte_order " + m["byte_order"].dump());
        }
        std::vector<UnitWeights> units(m.at("unit_count").get<std::size_t>());
        for (const auto& t : m.at("tensors")) {
            const std::size_t u = t.at("unit").get<std::size_t>();
            if (u >= units.size()) fail(ErrorKind::format, "tensor unit " + std::to_string(u) + " beyond unit_count");
            const DType dt = parse_dtype(t.at("dtype").get<std::string>());
            const std::string name = t.at("name").get<std::string>();
            if (expected && dt != *expected) {
                fail(ErrorKind::dtype, "tensor '" + name + "' of unit " + std::to_string(u) + " is " + to_string(dt) +
                                           ", requested " + to_string(*expected));
            }
            const std::string blob = t.at("blob").get<std::string>();
            if (!std::filesystem::exists(dir / blob)) fail(ErrorKind::format, "missing blob '" + blob + "'");
            const auto bytes = read_file_bytes(dir / blob);
            if (sha256_hex(bytes) != t.at("sha256").get<std::string>()) {
                fail(ErrorKind::corruption, "digest mismatch for blob '" + blob + "'");
            }
            units[u].push_back({name, decode_tensor(bytes, t.at("shape").get<Shape>(), dt)});
        }
        return WeightStore(m.at("model_id").get<std::string>(), std::move(units));
    } catch (const json::exception& e) {
        fail(ErrorKind::format, manifest_path.string() + ": " + e.what());
    }
}

}  // namespace restitch
