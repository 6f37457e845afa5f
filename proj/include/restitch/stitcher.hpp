#pragma once

// Hybrid assembly: front prefix -> adapter -> back suffix, plus the on-disk
// stitched-model directory (model.json + front/, adapter/, back/ weights).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "restitch/adapter.hpp"
#include "restitch/digest.hpp"
#include "restitch/error.hpp"
#include "restitch/netgraph.hpp"
#include "restitch/planner.hpp"

namespace restitch {

/// Which sections train during fine-tuning.
enum class Scope { stitch_only, stitch_back, stitch_front, full };

inline std::string to_string(Scope s) {
    switch (s) {
        case Scope::stitch_only: return "stitch-only";
        case Scope::stitch_back: return "stitch-back";
        case Scope::stitch_front: return "stitch-front";
        case Scope::full: return "full";
    }
    return "?";
}

inline Scope parse_scope(const std::string& s) {
    if (s == "stitch-only") return Scope::stitch_only;
    if (s == "stitch-back" || s == "stitch+back") return Scope::stitch_back;
    if (s == "stitch-front" || s == "stitch+front") return Scope::stitch_front;
    if (s == "full") return Scope::full;
    fail(ErrorKind::configuration, "unknown scope '" + s + "' (stitch-only|stitch-back|stitch-front|full)");
}

inline constexpr int kFrontSection = 0;
inline constexpr int kAdapterSection = 1;
inline constexpr int kBackSection = 2;

inline bool section_trainable(Scope scope, int section) {
    switch (section) {
        case kFrontSection: return scope == Scope::stitch_front || scope == Scope::full;
        case kAdapterSection: return true;
        case kBackSection: return scope == Scope::stitch_back || scope == Scope::full;
    }
    return false;
}

struct StitchedModel {
    StitchPlan plan;
    Network front;  // front units [0, i*]
    AdapterSpec adapter;
    WeightStore adapter_weights;  // one unit: weight, bias
    Network back;  // back units [j*+1, l)

    /// Full forward; parameters of sections trainable under `scope` are bound
    /// into `binding` when it is non-null.
    Var forward(const Var& x, Binding* binding = nullptr, Scope scope = Scope::stitch_only) const {
        auto ctx = [&](int section) {
            return BindContext{binding, section, binding != nullptr && section_trainable(scope, section)};
        };
        Var h = front.forward(x, ctx(kFrontSection));
        h = apply_adapter(adapter, adapter_weights.unit(0), h, ctx(kAdapterSection));
        return back.forward(h, ctx(kBackSection));
    }

    Tensor logits(const Tensor& batch) const { return forward(Var::leaf(batch)).value(); }

    /// Stored parameter elements across all three sections.
    std::uint64_t measured_params() const {
        return front.weights.element_count() + adapter_weights.element_count() + back.weights.element_count();
    }

    std::uint64_t trainable_params(Scope scope) const {
        std::uint64_t n = adapter_weights.element_count();
        if (section_trainable(scope, kFrontSection)) n += front.weights.element_count();
        if (section_trainable(scope, kBackSection)) n += back.weights.element_count();
        return n;
    }

    WeightStore& section(int s) {
        if (s == kFrontSection) return front.weights;
        if (s == kBackSection) return back.weights;
        return adapter_weights;
    }
    const WeightStore& section(int s) const { return const_cast<StitchedModel*>(this)->section(s); }
};

/// Builds the hybrid for `plan` from full parent networks. Seams are checked
/// against the adapter and the measured parameter count against the plan.
inline StitchedModel assemble(const StitchPlan& plan, const Network& front_parent, const Network& back_parent,
                              const UnitWeights& adapter_weights) {
    if (!(front_parent.spec == plan.front_spec) || !(back_parent.spec == plan.back_spec)) {
        fail(ErrorKind::assembly, "parent networks do not match the specs recorded in the plan ('" +
                                      plan.front_model_id + "', '" + plan.back_model_id + "')");
    }
    check_weights(front_parent.spec, front_parent.weights);
    check_weights(back_parent.spec, back_parent.weights);
    const std::size_t i = plan.front_unit, j = plan.back_unit;
    check_stitch_indices(i, j, plan.front_spec, plan.back_spec);
    if (j + 1 >= plan.back_spec.size()) fail(ErrorKind::range, "back stitch unit leaves an empty suffix");

    StitchedModel m;
    m.plan = plan;
    m.front = subnetwork(front_parent, 0, i + 1, plan.front_model_id + "[0:" + std::to_string(i + 1) + ")");
    m.back = subnetwork(back_parent, j + 1, plan.back_spec.size(),
                        plan.back_model_id + "[" + std::to_string(j + 1) + ":" + std::to_string(plan.back_spec.size()) +
                            ")");
    m.adapter = plan.adapter;
    if (m.front.spec.output_signature() != m.adapter.in_signature) {
        fail(ErrorKind::assembly, "front seam: prefix ends in " + m.front.spec.output_signature().str() +
                                      ", adapter expects " + m.adapter.in_signature.str());
    }
    if (m.adapter.out_signature != m.back.spec.input_signature()) {
        fail(ErrorKind::assembly, "back seam: adapter emits " + m.adapter.out_signature.str() + ", suffix expects " +
                                      m.back.spec.input_signature().str());
    }
    const auto shapes = m.adapter.weight_shapes();
    if (adapter_weights.size() != shapes.size()) fail(ErrorKind::assembly, "adapter weights incomplete");
    for (std::size_t k = 0; k < shapes.size(); ++k) {
        if (adapter_weights[k].name != shapes[k].first || adapter_weights[k].value.shape() != shapes[k].second) {
            fail(ErrorKind::assembly, "adapter tensor '" + shapes[k].first + "' expected shape " +
                                          shape_string(shapes[k].second));
        }
    }
    m.adapter_weights = WeightStore("adapter", {adapter_weights});
    if (m.measured_params() != plan.accounting.total) {
        fail(ErrorKind::assembly, "assembled model holds " + std::to_string(m.measured_params()) +
                                      " parameters, plan accounts " + std::to_string(plan.accounting.total));
    }
    return m;
}

/// Activations feeding a least-squares adapter fit: front unit i* and back
/// unit j* outputs on the same batch.
inline Calibration calibration_batch(const StitchPlan& plan, const Network& front_parent, const Network& back_parent,
                                     const Tensor& batch) {
    auto f = forward_with_taps(front_parent.spec, front_parent.weights, batch, {plan.front_unit});
    auto b = forward_with_taps(back_parent.spec, back_parent.weights, batch, {plan.back_unit});
    return {f.captures.at(plan.front_unit), b.captures.at(plan.back_unit)};
}

// ---------------------------------------------------------------------------
// Stitched-model directory

inline constexpr int kStitchedFormatVersion = 1;

inline void save_stitched(const StitchedModel& m, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    save_weights(m.front.weights, dir / "front");
    save_weights(m.adapter_weights, dir / "adapter");
    save_weights(m.back.weights, dir / "back");
    json j{{"format_version", kStitchedFormatVersion},
           {"plan", to_json(m.plan)},
           {"sections",
            {{"front", {{"dir", "front"}, {"digest", m.front.weights.digest()}, {"params", m.front.weights.element_count()}}},
             {"adapter",
              {{"dir", "adapter"}, {"digest", m.adapter_weights.digest()}, {"params", m.adapter_weights.element_count()}}},
             {"back", {{"dir", "back"}, {"digest", m.back.weights.digest()}, {"params", m.back.weights.element_count()}}}}}};
    write_file_text(dir / "model.json", j.dump(2) + "\n");
}

inline StitchedModel load_stitched(const std::filesystem::path& dir) {
    const auto path = dir / "model.json";
    if (!std::filesystem::exists(path)) fail(ErrorKind::io, "no stitched model at " + dir.string());
    json j;
    try {
        j = json::parse(read_file_text(path));
    } catch (const json::parse_error& e) {
        fail(ErrorKind::format, path.string() + ": " + e.what());
    }
    try {
        const int version = j.at("format_version").get<int>();
        if (version != kStitchedFormatVersion) {
            fail(ErrorKind::format, "stitched model format_version " + std::to_string(version) + " not supported (reader " +
                                        std::to_string(kStitchedFormatVersion) + ")");
        }
        StitchedModel m;
        m.plan = plan_from_json(j.at("plan"));
        m.adapter = m.plan.adapter;
        const auto& s = j.at("sections");
        auto load_section = [&](const char* name) {
            WeightStore w = load_weights(dir / s.at(name).at("dir").get<std::string>());
            if (w.digest() != s.at(name).at("digest").get<std::string>()) {
                fail(ErrorKind::corruption, std::string("section '") + name + "' digest mismatch");
            }
            return w;
        };
        const std::size_t i = m.plan.front_unit, jj = m.plan.back_unit, l = m.plan.back_spec.size();
        auto fw = load_section("front");
        auto aw = load_section("adapter");
        auto bw = load_section("back");
        m.front = {subnetwork_spec(m.plan.front_spec, 0, i + 1, fw.model_id()), fw};
        m.back = {subnetwork_spec(m.plan.back_spec, jj + 1, l, bw.model_id()), bw};
        check_weights(m.front.spec, m.front.weights);
        check_weights(m.back.spec, m.back.weights);
        m.adapter_weights = aw;
        if (aw.unit_count() != 1) fail(ErrorKind::format, "adapter section must hold one unit");
        if (m.measured_params() != m.plan.accounting.total) {
            fail(ErrorKind::format, "stored parameters disagree with plan accounting");
        }
        return m;
    } catch (const json::exception& e) {
        fail(ErrorKind::format, path.string() + ": " + e.what());
    }
}

}  // namespace restitch
