#pragma once

// SGD training of base networks and stitched hybrids, evaluation, and the
// synthetic image datasets used at desk scale.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "restitch/autograd.hpp"
#include "restitch/digest.hpp"
#include "restitch/error.hpp"
#include "restitch/netgraph.hpp"
#include "restitch/stitcher.hpp"
#include "restitch/tensor.hpp"

namespace restitch {

// ---------------------------------------------------------------------------
// Datasets

struct Dataset {
    std::string id;
    std::string split;  // "train" or "test"
    std::size_t num_classes = 0;
    Shape image_shape;  // (c, h, w)
    std::uint64_t seed = 0;
    Tensor images;  // [n, c, h, w]
    std::vector<std::int32_t> labels;

    std::size_t size() const { return labels.size(); }

    /// Samples at `idx`, in that order.
    Tensor gather(std::span<const std::size_t> idx) const {
        const std::size_t per = numel(image_shape);
        std::vector<double> v(idx.size() * per);
        const auto src = images.data();
        for (std::size_t k = 0; k < idx.size(); ++k)
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(idx[k] * per), per,
                        v.begin() + static_cast<std::ptrdiff_t>(k * per));
        Shape s{idx.size()};
        s.insert(s.end(), image_shape.begin(), image_shape.end());
        return Tensor(std::move(s), std::move(v), images.dtype());
    }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> c(num_classes, 0);
        for (auto y : labels) ++c.at(static_cast<std::size_t>(y));
        return c;
    }
};

struct DataSplit {
    Dataset train;
    Dataset test;
};

/// Per-class Gaussian prototypes plus per-sample Gaussian noise of standard
/// deviation `noise`; 80/20 stratified split, each split in seeded order.
inline DataSplit gen_synthetic(std::uint64_t seed, std::size_t num_classes, std::size_t per_class, Shape image_shape,
                               double noise = 1.0) {
    if (num_classes < 1 || per_class < 1) fail(ErrorKind::configuration, "class and sample counts must be positive");
    if (num_classes > 256) fail(ErrorKind::configuration, "at most 256 classes (labels are stored as u8)");
    if (image_shape.size() != 3 || numel(image_shape) == 0) {
        fail(ErrorKind::configuration, "image shape must be (c,h,w) with positive extents");
    }
    if (!(noise >= 0.0) || !std::isfinite(noise)) fail(ErrorKind::configuration, "noise must be finite and >= 0");
    const std::size_t per = numel(image_shape);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<std::vector<double>> protos(num_classes, std::vector<double>(per));
    for (auto& p : protos)
        for (auto& v : p) v = normal(rng);

    const std::size_t n_train = std::max<std::size_t>(1, (per_class * 4) / 5);
    std::vector<std::pair<std::int32_t, std::vector<double>>> train, test;
    for (std::size_t c = 0; c < num_classes; ++c)
        for (std::size_t s = 0; s < per_class; ++s) {
            std::vector<double> img(per);
            for (std::size_t k = 0; k < per; ++k) img[k] = protos[c][k] + noise * normal(rng);
            (s < n_train ? train : test).emplace_back(static_cast<std::int32_t>(c), std::move(img));
        }
    const std::string id = "synthetic-s" + std::to_string(seed) + "-c" + std::to_string(num_classes) + "-n" +
                           std::to_string(per_class) + "-" + std::to_string(image_shape[0]) + "x" +
                           std::to_string(image_shape[1]) + "x" + std::to_string(image_shape[2]);
    auto build = [&](std::vector<std::pair<std::int32_t, std::vector<double>>>& rows, const char* split) {
        std::shuffle(rows.begin(), rows.end(), rng);
        Dataset d;
        d.id = id;
        d.split = split;
        d.num_classes = num_classes;
        d.image_shape = image_shape;
        d.seed = seed;
        std::vector<double> v;
        v.reserve(rows.size() * per);
        for (auto& [y, img] : rows) {
            d.labels.push_back(y);
            v.insert(v.end(), img.begin(), img.end());
        }
        Shape s{rows.size()};
        s.insert(s.end(), image_shape.begin(), image_shape.end());
        if (!rows.empty()) d.images = Tensor(std::move(s), std::move(v), DType::f32);
        return d;
    };
    return {build(train, "train"), build(test, "test")};
}

inline void check_dataset(const Dataset& d) {
    if (d.labels.empty()) fail(ErrorKind::data, "dataset '" + d.id + "' split '" + d.split + "' is empty");
    for (auto y : d.labels)
        if (y < 0 || static_cast<std::size_t>(y) >= d.num_classes)
            fail(ErrorKind::data, "label " + std::to_string(y) + " outside [0," + std::to_string(d.num_classes) + ")");
}

inline constexpr int kDatasetFormatVersion = 1;

/// <dir>/data.json plus f32 image and u8 label blobs per split.
inline void save_dataset(const DataSplit& data, const std::filesystem::path& dir, double noise = 0.0) {
    std::filesystem::create_directories(dir);
    json splits = json::object();
    for (const Dataset* d : {&data.train, &data.test}) {
        json entry{{"count", d->size()}, {"counts", d->class_counts()}};
        if (d->size() > 0) {
            const auto img = encode_tensor(d->images.as(DType::f32));
            std::vector<std::uint8_t> lab(d->labels.begin(), d->labels.end());
            const std::string ib = d->split + "_images.bin", lb = d->split + "_labels.bin";
            write_file_bytes(dir / ib, img);
            write_file_bytes(dir / lb, lab);
            entry["images"] = {{"blob", ib}, {"dtype", "f32"}, {"sha256", sha256_hex(img)}};
            entry["labels"] = {{"blob", lb}, {"dtype", "u8"}, {"sha256", sha256_hex(lab)}};
        }
        splits[d->split] = std::move(entry);
    }
    json j{{"format_version", kDatasetFormatVersion},
           {"id", data.train.id},
           {"num_classes", data.train.num_classes},
           {"shape", data.train.image_shape},
           {"seed", data.train.seed},
           {"noise", noise},
           {"byte_order", "little"},
           {"counts", {{"train", data.train.size()}, {"test", data.test.size()}}},
           {"splits", std::move(splits)}};
    write_file_text(dir / "data.json", j.dump(2) + "\n");
}

inline DataSplit load_dataset(const std::filesystem::path& dir) {
    const auto path = dir / "data.json";
    if (!std::filesystem::exists(path)) fail(ErrorKind::io, "no dataset at " + dir.string());
    json j;
    try {
        j = json::parse(read_file_text(path));
    } catch (const json::parse_error& e) {
        fail(ErrorKind::format, path.string() + ": " + e.what());
    }
    try {
        if (j.at("format_version").get<int>() != kDatasetFormatVersion) {
            fail(ErrorKind::format, "dataset format_version " + j["format_version"].dump() + " not supported (reader " +
                                        std::to_string(kDatasetFormatVersion) + ")");
        }
        DataSplit out;
        for (Dataset* d : {&out.train, &out.test}) {
            d->split = d == &out.train ? "train" : "test";
            d->id = j.at("id").get<std::string>();
            d->num_classes = j.at("num_classes").get<std::size_t>();
            d->image_shape = j.at("shape").get<Shape>();
            d->seed = j.at("seed").get<std::uint64_t>();
            const auto& s = j.at("splits").at(d->split);
            const std::size_t n = s.at("count").get<std::size_t>();
            if (n == 0) continue;
            auto load_blob = [&](const json& b) {
                const std::string name = b.at("blob").get<std::string>();
                if (!std::filesystem::exists(dir / name)) fail(ErrorKind::format, "dataset references missing blob '" + name + "'");
                auto bytes = read_file_bytes(dir / name);
                if (sha256_hex(bytes) != b.at("sha256").get<std::string>())
                    fail(ErrorKind::corruption, "digest mismatch for dataset blob '" + name + "'");
                return bytes;
            };
            Shape shape{n};
            shape.insert(shape.end(), d->image_shape.begin(), d->image_shape.end());
            d->images = decode_tensor(load_blob(s.at("images")), shape, DType::f32);
            const auto lab = load_blob(s.at("labels"));
            if (lab.size() != n) fail(ErrorKind::corruption, "label blob holds " + std::to_string(lab.size()) + " entries, expected " + std::to_string(n));
            d->labels.assign(lab.begin(), lab.end());
            check_dataset(*d);
        }
        return out;
    } catch (const json::exception& e) {
        fail(ErrorKind::format, path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
    double learning_rate = 0.01;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::size_t epochs = 10;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
    Scope scope = Scope::stitch_only;

    void validate() const {
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
            fail(ErrorKind::configuration, "learning_rate must be finite and >= 0");
        if (!(momentum >= 0.0 && momentum < 1.0)) fail(ErrorKind::configuration, "momentum must lie in [0,1)");
        if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay))
            fail(ErrorKind::configuration, "weight_decay must be finite and >= 0");
        if (batch_size == 0) fail(ErrorKind::configuration, "batch_size must be positive");
    }
};

inline json to_json(const TrainConfig& c) {
    return json{{"learning_rate", c.learning_rate}, {"momentum", c.momentum}, {"weight_decay", c.weight_decay},
                {"epochs", c.epochs},               {"batch_size", c.batch_size}, {"seed", c.seed},
                {"scope", to_string(c.scope)}};
}

/// Fields present in `j` override `base`.
inline TrainConfig train_config_from_json(const json& j, TrainConfig base = {}) {
    try {
        if (j.contains("learning_rate")) base.learning_rate = j["learning_rate"].get<double>();
        if (j.contains("momentum")) base.momentum = j["momentum"].get<double>();
        if (j.contains("weight_decay")) base.weight_decay = j["weight_decay"].get<double>();
        if (j.contains("epochs")) base.epochs = j["epochs"].get<std::size_t>();
        if (j.contains("batch_size")) base.batch_size = j["batch_size"].get<std::size_t>();
        if (j.contains("seed")) base.seed = j["seed"].get<std::uint64_t>();
        if (j.contains("scope")) base.scope = parse_scope(j["scope"].get<std::string>());
    } catch (const json::exception& e) {
        fail(ErrorKind::configuration, std::string("train config: ") + e.what());
    }
    base.validate();
    return base;
}

// ---------------------------------------------------------------------------
// Models the loop can drive

inline Var bound_forward(const Network& net, const Var& x, Binding* binding, Scope) {
    return net.forward(x, BindContext{binding, 0, binding != nullptr});
}

inline Var bound_forward(const StitchedModel& m, const Var& x, Binding* binding, Scope scope) {
    return m.forward(x, binding, scope);
}

inline WeightStore& param_section(Network& net, int) { return net.weights; }
inline WeightStore& param_section(StitchedModel& m, int section) { return m.section(section); }

inline Tensor model_logits(const Network& net, const Tensor& x) { return net.logits(x); }
inline Tensor model_logits(const StitchedModel& m, const Tensor& x) { return m.logits(x); }

// ---------------------------------------------------------------------------
// Evaluation

inline constexpr std::size_t kEvalBatch = 256;

/// Index of the largest logit per row, lowest index on ties.
inline std::vector<std::int32_t> argmax_rows(const Tensor& logits) {
    const std::size_t b = logits.extent(0), k = logits.extent(1);
    const auto d = logits.data();
    std::vector<std::int32_t> out(b);
    for (std::size_t r = 0; r < b; ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c)
            if (d[r * k + c] > d[r * k + best]) best = c;
        out[r] = static_cast<std::int32_t>(best);
    }
    return out;
}

inline double accuracy_from_logits(const Tensor& logits, std::span<const std::int32_t> labels) {
    const auto pred = argmax_rows(logits);
    std::size_t hit = 0;
    for (std::size_t r = 0; r < pred.size(); ++r) hit += pred[r] == labels[r];
    return static_cast<double>(hit) / static_cast<double>(pred.size());
}

struct EvalResult {
    double accuracy = 0.0;
    double loss = 0.0;
};

template <class Model>
EvalResult evaluate_full(const Model& model, const Dataset& data) {
    check_dataset(data);
    std::size_t hit = 0;
    double loss = 0.0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < data.size(); start += kEvalBatch) {
        const std::size_t end = std::min(data.size(), start + kEvalBatch);
        idx.resize(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const Tensor logits = model_logits(model, data.gather(idx));
        const std::span<const std::int32_t> labels(data.labels.data() + start, end - start);
        const auto pred = argmax_rows(logits);
        for (std::size_t r = 0; r < pred.size(); ++r) hit += pred[r] == labels[r];
        loss += softmax_cross_entropy(Var::leaf(logits), labels).value().item() * static_cast<double>(end - start);
    }
    return {static_cast<double>(hit) / static_cast<double>(data.size()), loss / static_cast<double>(data.size())};
}

template <class Model>
double evaluate(const Model& model, const Dataset& data) {
    return evaluate_full(model, data).accuracy;
}

// ---------------------------------------------------------------------------
// SGD

struct TrainResult {
    double initial_loss = 0.0;
    std::vector<double> epoch_losses;  // mean training loss over each epoch
    double final_loss = 0.0;           // full-pass training loss after training
    double final_train_accuracy = 0.0;
    std::uint64_t trainable_params = 0;
    std::size_t steps = 0;
};

inline json to_json(const TrainResult& r) {
    return json{{"initial_loss", r.initial_loss},
                {"epoch_losses", r.epoch_losses},
                {"final_loss", r.final_loss},
                {"final_train_accuracy", r.final_train_accuracy},
                {"trainable_params", r.trainable_params},
                {"steps", r.steps}};
}

/// Mini-batch SGD with momentum and decoupled weight decay:
///   v <- mu v + g;  p <- p - lr v - lr wd p
/// Batches follow a seeded shuffle per epoch. On a non-finite loss the model
/// is restored to the last state that produced a finite loss and a
/// divergence error is raised.
template <class Model>
TrainResult sgd_train(Model& model, const Dataset& data, const TrainConfig& cfg) {
    cfg.validate();
    check_dataset(data);
    TrainResult result;
    {
        const EvalResult e = evaluate_full(model, data);
        result.initial_loss = e.loss;
    }
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::map<ParamRef, std::vector<double>> velocity;
    Model last_finite = model;
    std::vector<std::int32_t> labels;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const std::span<const std::size_t> idx(order.data() + start, end - start);
            labels.clear();
            for (std::size_t k : idx) labels.push_back(data.labels[k]);

            Binding binding;
            const Var logits = bound_forward(model, Var::leaf(data.gather(idx)), &binding, cfg.scope);
            const Var loss = softmax_cross_entropy(logits, labels);
            const double lv = loss.value().item();
            if (!std::isfinite(lv)) {
                model = last_finite;
                fail(ErrorKind::divergence, "non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                                std::to_string(result.steps) + "; weights restored to the last finite state");
            }
            epoch_loss += lv * static_cast<double>(idx.size());
            if (epoch == 0 && start == 0) {
                std::uint64_t n = 0;
                for (const auto& [ref, v] : binding.params) n += v.value().size();
                result.trainable_params = n;
            }
            backward(loss);
            last_finite = model;
            if (cfg.learning_rate > 0.0) {
                for (const auto& [ref, var] : binding.params) {
                    const auto g = var.grad_data();
                    const auto p = var.value().data();
                    auto& v = velocity[ref];
                    if (v.empty()) v.assign(p.size(), 0.0);
                    std::vector<double> next(p.size());
                    for (std::size_t k = 0; k < p.size(); ++k) {
                        v[k] = cfg.momentum * v[k] + (g.empty() ? 0.0 : g[k]);
                        next[k] = p[k] - cfg.learning_rate * v[k] - cfg.learning_rate * cfg.weight_decay * p[k];
                    }
                    param_section(model, ref.section)
                        .set(ref.unit, ref.slot, Tensor(var.shape(), std::move(next), var.dtype()));
                }
            }
            ++result.steps;
        }
        result.epoch_losses.push_back(epoch_loss / static_cast<double>(order.size()));
    }
    const EvalResult e = evaluate_full(model, data);
    if (!std::isfinite(e.loss)) {
        model = last_finite;
        fail(ErrorKind::divergence, "non-finite loss after training; weights restored to the last finite state");
    }
    result.final_loss = e.loss;
    result.final_train_accuracy = e.accuracy;
    return result;
}

struct TrainedNetwork {
    Network network;
    TrainResult result;
};

/// Trains every parameter of a freshly initialized network (seeded by cfg.seed).
inline TrainedNetwork train_base(const NetworkSpec& spec, const Dataset& data, const TrainConfig& cfg,
                                 DType dtype = DType::f32) {
    if (!spec.has_head()) fail(ErrorKind::configuration, "base network '" + spec.model_id() + "' needs a head");
    if (spec.num_classes() != data.num_classes) {
        fail(ErrorKind::data, "network has " + std::to_string(spec.num_classes()) + " classes, data has " +
                                  std::to_string(data.num_classes));
    }
    TrainedNetwork out{Network{spec, init_weights(spec, cfg.seed, dtype)}, {}};
    TrainConfig c = cfg;
    c.scope = Scope::full;
    out.result = sgd_train(out.network, data, c);
    out.result.trainable_params = spec.total_params();
    return out;
}

/// Fine-tunes the sections selected by cfg.scope; everything else is left
/// bit-identical.
inline TrainResult finetune(StitchedModel& model, const Dataset& data, const TrainConfig& cfg) {
    if (model.back.spec.num_classes() != data.num_classes) {
        fail(ErrorKind::data, "model has " + std::to_string(model.back.spec.num_classes()) + " classes, data has " +
                                  std::to_string(data.num_classes));
    }
    TrainResult r = sgd_train(model, data, cfg);
    r.trainable_params = model.trainable_params(cfg.scope);
    return r;
}

}  // namespace restitch
