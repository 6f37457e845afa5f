#pragma once

// Budget-constrained stitch-point selection.
//
// A stitch point (i, j) keeps front units 0..i, inserts an adapter mapping the
// front unit i output onto the back unit j output, and finishes with back
// units j+1..l-1. Candidates exclude the first and last unit of either model.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "restitch/adapter.hpp"
#include "restitch/error.hpp"
#include "restitch/log.hpp"
#include "restitch/netgraph.hpp"
#include "restitch/similarity.hpp"

namespace restitch {

enum class BudgetMetric { params, flops, trainable };
enum class Direction { slow_to_fast, fast_to_slow };

inline std::string to_string(BudgetMetric m) {
    switch (m) {
        case BudgetMetric::params: return "params";
        case BudgetMetric::flops: return "flops";
        case BudgetMetric::trainable: return "trainable";
    }
    return "?";
}

inline BudgetMetric parse_budget_metric(const std::string& s) {
    if (s == "params") return BudgetMetric::params;
    if (s == "flops") return BudgetMetric::flops;
    if (s == "trainable" || s == "trainable-params") return BudgetMetric::trainable;
    fail(ErrorKind::configuration, "unknown budget metric '" + s + "' (params|flops|trainable)");
}

inline std::string to_string(Direction d) { return d == Direction::slow_to_fast ? "slow-to-fast" : "fast-to-slow"; }

inline Direction parse_direction(const std::string& s) {
    if (s == "slow-to-fast") return Direction::slow_to_fast;
    if (s == "fast-to-slow") return Direction::fast_to_slow;
    fail(ErrorKind::configuration, "unknown direction '" + s + "' (slow-to-fast|fast-to-slow)");
}

struct Budget {
    BudgetMetric metric = BudgetMetric::params;
    std::uint64_t limit = 0;

    bool operator==(const Budget&) const = default;
};

inline Budget make_budget(BudgetMetric metric, std::uint64_t limit) {
    if (limit == 0) fail(ErrorKind::configuration, "budget limit must be positive");
    return {metric, limit};
}

struct Accounting {
    std::uint64_t front_params = 0;
    std::uint64_t adapter_params = 0;
    std::uint64_t back_params = 0;
    std::uint64_t total = 0;
    std::uint64_t flops_total = 0;

    std::uint64_t cost(BudgetMetric m) const {
        switch (m) {
            case BudgetMetric::params: return total;
            case BudgetMetric::flops: return flops_total;
            case BudgetMetric::trainable: return adapter_params;
        }
        return total;
    }

    bool operator==(const Accounting&) const = default;
};

inline void check_stitch_indices(std::size_t i, std::size_t j, const NetworkSpec& front, const NetworkSpec& back) {
    if (i >= front.size() || j >= back.size()) {
        fail(ErrorKind::range, "stitch point (" + std::to_string(i) + "," + std::to_string(j) + ") outside " +
                                   std::to_string(front.size()) + "x" + std::to_string(back.size()) + " units");
    }
}

/// Parameter and FLOP accounting of the hybrid: front units [0, i], the
/// adapter, back units [j+1, l).
inline Accounting plan_params(std::size_t i, std::size_t j, const NetworkSpec& front, const NetworkSpec& back,
                              const AdapterSpec& adapter) {
    check_stitch_indices(i, j, front, back);
    Accounting a;
    a.front_params = count_params(front, 0, i + 1);
    a.adapter_params = adapter.param_count();
    a.back_params = count_params(back, j + 1, back.size());
    a.total = a.front_params + a.adapter_params + a.back_params;
    a.flops_total = estimate_flops(front, 0, i + 1) + adapter.flops() + estimate_flops(back, j + 1, back.size());
    return a;
}

/// Whether (i, j) may be a stitch point at all: never the first unit or the
/// last unit (the head) of either model.
inline bool is_candidate(std::size_t i, std::size_t j, const NetworkSpec& front, const NetworkSpec& back) {
    return i >= 1 && i + 2 <= front.size() && j >= 1 && j + 2 <= back.size();
}

struct Selection {
    std::size_t i = 0;
    std::size_t j = 0;
};

/// Feasible argmax over a rows x cols score table by masking: take the
/// argmax (lowest (i, j) on ties); if its cost exceeds the limit or it has no
/// cost, set it to -inf and repeat. `cost(i, j)` returns nullopt for cells
/// that are not candidates.
template <class CostFn>
std::optional<Selection> select_feasible_argmax(std::vector<double> scores, std::size_t rows, std::size_t cols,
                                                CostFn&& cost, std::uint64_t limit) {
    constexpr double masked = -std::numeric_limits<double>::infinity();
    std::size_t remaining = rows * cols;
    while (remaining > 0) {
        std::size_t best = 0;
        bool found = false;
        for (std::size_t c = 0; c < rows * cols; ++c) {
            if (scores[c] == masked) continue;
            if (!found || scores[c] > scores[best]) {
                best = c;
                found = true;
            }
        }
        if (!found) break;
        const std::size_t i = best / cols, j = best % cols;
        const std::optional<std::uint64_t> c = cost(i, j);
        if (c && *c <= limit) return Selection{i, j};
        scores[best] = masked;
        --remaining;
    }
    return std::nullopt;
}

struct StitchPlan {
    std::string front_model_id;
    std::string back_model_id;
    Direction direction = Direction::slow_to_fast;
    std::size_t front_unit = 0;  // i*
    std::size_t back_unit = 0;   // j*
    double similarity = 0.0;
    AdapterSpec adapter;
    Accounting accounting;
    Budget budget;
    NetworkSpec front_spec;
    NetworkSpec back_spec;
};

inline std::optional<AdapterSpec> try_synthesize(const Signature& a, const Signature& b) {
    try {
        return synthesize_adapter(a, b);
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::configuration || e.kind() == ErrorKind::unsupported) return std::nullopt;
        throw;
    }
}

inline void check_matrix_dims(const SimilarityMatrix& s, const NetworkSpec& front, const NetworkSpec& back) {
    if (s.rows != front.size() || s.cols != back.size()) {
        fail(ErrorKind::dimension, "similarity matrix is " + std::to_string(s.rows) + "x" + std::to_string(s.cols) +
                                       ", models have " + std::to_string(front.size()) + " and " +
                                       std::to_string(back.size()) + " units");
    }
}

/// Everything about one candidate cell, or nothing if it is not a candidate
/// or has no synthesizable adapter.
struct Candidate {
    std::size_t i = 0;
    std::size_t j = 0;
    double similarity = 0.0;
    AdapterSpec adapter;
    Accounting accounting;
};

inline std::optional<Candidate> candidate_at(const SimilarityMatrix& s, std::size_t i, std::size_t j,
                                             const NetworkSpec& front, const NetworkSpec& back) {
    if (!is_candidate(i, j, front, back)) return std::nullopt;
    auto adapter = try_synthesize(front.unit(i).out_signature, back.unit(j).out_signature);
    if (!adapter) return std::nullopt;
    return Candidate{i, j, s.at(i, j), *adapter, plan_params(i, j, front, back, *adapter)};
}

/// All candidate cells with a synthesizable adapter, in row-major order.
inline std::vector<Candidate> enumerate_candidates(const SimilarityMatrix& s, const NetworkSpec& front,
                                                   const NetworkSpec& back) {
    check_matrix_dims(s, front, back);
    std::vector<Candidate> out;
    for (std::size_t i = 0; i < s.rows; ++i)
        for (std::size_t j = 0; j < s.cols; ++j)
            if (auto c = candidate_at(s, i, j, front, back)) out.push_back(std::move(*c));
    return out;
}

inline StitchPlan make_plan(const Candidate& c, const NetworkSpec& front, const NetworkSpec& back,
                            const Budget& budget, Direction direction) {
    StitchPlan p;
    p.front_model_id = front.model_id();
    p.back_model_id = back.model_id();
    p.direction = direction;
    p.front_unit = c.i;
    p.back_unit = c.j;
    p.similarity = c.similarity;
    p.adapter = c.adapter;
    p.accounting = c.accounting;
    p.budget = budget;
    p.front_spec = front;
    p.back_spec = back;
    return p;
}

/// Highest-similarity stitch point whose cost under `budget` fits.
inline StitchPlan select_stitch_point(const SimilarityMatrix& s, const Budget& budget, const NetworkSpec& front,
                                      const NetworkSpec& back, Direction direction = Direction::slow_to_fast) {
    check_matrix_dims(s, front, back);
    if (budget.limit == 0) fail(ErrorKind::configuration, "budget limit must be positive");
    std::vector<std::optional<Candidate>> cells(s.rows * s.cols);
    std::optional<std::uint64_t> min_cost;
    for (std::size_t i = 0; i < s.rows; ++i)
        for (std::size_t j = 0; j < s.cols; ++j) {
            auto& c = cells[i * s.cols + j];
            c = candidate_at(s, i, j, front, back);
            if (c) min_cost = std::min(min_cost.value_or(UINT64_MAX), c->accounting.cost(budget.metric));
        }
    auto cost = [&](std::size_t i, std::size_t j) -> std::optional<std::uint64_t> {
        const auto& c = cells[i * s.cols + j];
        if (!c) return std::nullopt;
        return c->accounting.cost(budget.metric);
    };
    const auto sel = select_feasible_argmax(s.values, s.rows, s.cols, cost, budget.limit);
    if (!sel) {
        const std::string what = min_cost ? "minimum achievable " + to_string(budget.metric) + " cost is " +
                                                std::to_string(*min_cost)
                                          : "no stitchable candidate exists";
        throw NoFeasibleStitch("no feasible stitch under budget " + std::to_string(budget.limit) + " (" +
                                   to_string(budget.metric) + "); " + what,
                               min_cost ? static_cast<std::int64_t>(*min_cost) : -1);
    }
    return make_plan(*cells[sel->i * s.cols + sel->j], front, back, budget, direction);
}

/// (front, back) for a direction: slow-to-fast runs the large model first.
inline std::pair<NetworkSpec, NetworkSpec> orient(const NetworkSpec& large, const NetworkSpec& small,
                                                  Direction direction) {
    if (large.total_params() == small.total_params()) {
        warn("models '" + large.model_id() + "' and '" + small.model_id() +
             "' have equal parameter counts; direction applied as declared");
    } else if (large.total_params() < small.total_params()) {
        warn("model designated large ('" + large.model_id() + "') has fewer parameters than '" + small.model_id() + "'");
    }
    if (direction == Direction::slow_to_fast) return {large, small};
    return {small, large};
}

struct SweepRow {
    Budget budget;
    std::optional<StitchPlan> plan;
    std::string error;  // set when no plan
    std::optional<double> accuracy;
};

/// One row per budget; selection failures are recorded on the row. Rows are
/// sorted by total params (infeasible rows last), stable in budget order.
inline std::vector<SweepRow> sweep_candidates(const SimilarityMatrix& s, const std::vector<Budget>& budgets,
                                              const NetworkSpec& front, const NetworkSpec& back,
                                              Direction direction = Direction::slow_to_fast) {
    std::vector<SweepRow> rows;
    for (const auto& b : budgets) {
        SweepRow r;
        r.budget = b;
        try {
            r.plan = select_stitch_point(s, b, front, back, direction);
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::infeasible && e.kind() != ErrorKind::configuration) throw;
            r.error = e.what();
        }
        rows.push_back(std::move(r));
    }
    std::stable_sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
        const auto key = [](const SweepRow& r) { return r.plan ? r.plan->accounting.total : UINT64_MAX; };
        return key(a) < key(b);
    });
    return rows;
}

// ---------------------------------------------------------------------------
// Serialization

inline json to_json(const Accounting& a) {
    return json{{"front_params", a.front_params},
                {"adapter_params", a.adapter_params},
                {"back_params", a.back_params},
                {"total", a.total},
                {"flops_total", a.flops_total}};
}

inline json to_json(const Budget& b) { return json{{"metric", to_string(b.metric)}, {"limit", b.limit}}; }

inline json to_json(const StitchPlan& p) {
    return json{{"front_model_id", p.front_model_id},
                {"back_model_id", p.back_model_id},
                {"direction", to_string(p.direction)},
                {"stitch_point", {p.front_unit, p.back_unit}},
                {"stitch_units", {p.front_spec.unit(p.front_unit).name(), p.back_spec.unit(p.back_unit).name()}},
                {"similarity_at_point", p.similarity},
                {"adapter", to_json(p.adapter)},
                {"accounting", to_json(p.accounting)},
                {"budget", to_json(p.budget)},
                {"excluded_candidates", "first and last unit of each model"},
                {"front_spec", to_json(p.front_spec)},
                {"back_spec", to_json(p.back_spec)}};
}

inline StitchPlan plan_from_json(const json& j) {
    try {
        StitchPlan p;
        p.front_model_id = j.at("front_model_id").get<std::string>();
        p.back_model_id = j.at("back_model_id").get<std::string>();
        p.direction = parse_direction(j.at("direction").get<std::string>());
        const auto pt = j.at("stitch_point").get<std::vector<std::size_t>>();
        if (pt.size() != 2) fail(ErrorKind::format, "stitch_point must have two entries");
        p.front_unit = pt[0];
        p.back_unit = pt[1];
        p.similarity = j.at("similarity_at_point").get<double>();
        p.adapter = adapter_from_json(j.at("adapter"));
        const auto& a = j.at("accounting");
        p.accounting = {a.at("front_params").get<std::uint64_t>(), a.at("adapter_params").get<std::uint64_t>(),
                        a.at("back_params").get<std::uint64_t>(), a.at("total").get<std::uint64_t>(),
                        a.at("flops_total").get<std::uint64_t>()};
        p.budget = {parse_budget_metric(j.at("budget").at("metric").get<std::string>()),
                    j.at("budget").at("limit").get<std::uint64_t>()};
        p.front_spec = spec_from_json(j.at("front_spec"));
        p.back_spec = spec_from_json(j.at("back_spec"));
        const Accounting check = plan_params(p.front_unit, p.back_unit, p.front_spec, p.back_spec, p.adapter);
        if (!(check == p.accounting)) fail(ErrorKind::format, "plan accounting disagrees with its specs");
        return p;
    } catch (const json::exception& e) {
        fail(ErrorKind::format, std::string("stitch plan: ") + e.what());
    }
}

inline void save_plan(const StitchPlan& p, const std::filesystem::path& path) {
    write_file_text(path, to_json(p).dump(2) + "\n");
}

inline StitchPlan load_plan(const std::filesystem::path& path) {
    try {
        return plan_from_json(json::parse(read_file_text(path)));
    } catch (const json::parse_error& e) {
        fail(ErrorKind::format, path.string() + ": " + e.what());
    }
}

inline std::string sweep_csv_header() {
    return "i,j,similarity,front_params,adapter_params,back_params,total_params,flops,budget,accuracy\n";
}

/// One CSV line; infeasible rows leave the plan columns empty.
inline std::string sweep_csv_row(const SweepRow& r) {
    std::ostringstream os;
    os << std::setprecision(6) << std::fixed;
    if (r.plan) {
        const auto& p = *r.plan;
        os << p.front_unit << ',' << p.back_unit << ',' << p.similarity << ',' << p.accounting.front_params << ','
           << p.accounting.adapter_params << ',' << p.accounting.back_params << ',' << p.accounting.total << ','
           << p.accounting.flops_total << ',' << r.budget.limit << ',';
        if (r.accuracy) os << *r.accuracy;
        else os << "";
    } else {
        os << ",,,,,,,," << r.budget.limit << ",infeasible";
    }
    os << '\n';
    return os.str();
}

}  // namespace restitch
