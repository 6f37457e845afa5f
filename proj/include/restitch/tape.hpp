#pragma once

// Activation tapes: the on-disk record of every unit's activation for one
// seeded batch. A tape directory holds manifest.json and one raw
// little-endian blob per unit; a tape set is a directory of repeat_<r>/ tapes.
// Shapes are stored as captured (leading batch axis included); flattening
// happens at CKA time.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "restitch/digest.hpp"
#include "restitch/error.hpp"
#include "restitch/netgraph.hpp"
#include "restitch/similarity.hpp"

namespace restitch {

inline constexpr int kTapeFormatVersion = 1;

struct TapeUnit {
    std::size_t index = 0;
    std::string name;
    std::string kind;
    Tensor activation;
};

struct ActivationTape {
    std::string model_id;
    std::string dataset_id;
    std::size_t batch_size = 0;
    std::uint64_t seed = 0;
    std::size_t repeat_index = 0;
    std::vector<TapeUnit> units;
};

/// Builds a tape from a forward pass of `net` on one batch.
inline ActivationTape capture_tape(const Network& net, const Batch& batch) {
    auto out = forward_with_taps(net.spec, net.weights, batch.images, all_units(net.spec));
    ActivationTape tape;
    tape.model_id = net.spec.model_id();
    tape.dataset_id = batch.dataset_id;
    tape.batch_size = batch.images.extent(0);
    tape.seed = batch.seed;
    tape.repeat_index = batch.repeat_index;
    for (auto& [i, t] : out.captures) {
        const auto& u = net.spec.unit(i);
        tape.units.push_back({i, u.name(), to_string(u.kind()), std::move(t)});
    }
    return tape;
}

inline std::vector<ActivationTape> capture_tapes(const Network& net, const SeededBatchSource& source,
                                                 std::size_t repeats) {
    std::vector<ActivationTape> tapes;
    for (std::size_t r = 0; r < repeats; ++r) tapes.push_back(capture_tape(net, source.batch(r)));
    return tapes;
}

inline void write_tape(const ActivationTape& tape, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    json units = json::array();
    for (std::size_t k = 0; k < tape.units.size(); ++k) {
        const auto& u = tape.units[k];
        if (u.index != k) fail(ErrorKind::contract, "tape units must be indexed consecutively from 0");
        if (u.activation.rank() < 2 || u.activation.extent(0) != tape.batch_size) {
            fail(ErrorKind::dimension, "capture for unit '" + u.name + "' has shape " +
                                           shape_string(u.activation.shape()) + ", batch size is " +
                                           std::to_string(tape.batch_size));
        }
        const std::string blob = "unit_" + std::to_string(u.index) + ".bin";
        const auto bytes = encode_tensor(u.activation);
        write_file_bytes(dir / blob, bytes);
        units.push_back(json{{"index", u.index},
                             {"name", u.name},
                             {"kind", u.kind},
                             {"shape", u.activation.shape()},
                             {"dtype", to_string(u.activation.dtype())},
                             {"blob", blob},
                             {"sha256", sha256_hex(bytes)}});
    }
    json manifest{{"format_version", kTapeFormatVersion},
                  {"model_id", tape.model_id},
                  {"dataset_id", tape.dataset_id},
                  {"byte_order", "little"},
                  {"batch", {{"size", tape.batch_size}, {"seed", tape.seed}, {"repeat_index", tape.repeat_index}}},
                  {"units", std::move(units)}};
    write_file_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

/// Reads a tape, verifying every digest before returning any data.
inline ActivationTape read_tape(const std::filesystem::path& dir) {
    const auto path = dir / "manifest.json";
    if (!std::filesystem::exists(path)) fail(ErrorKind::format, "missing tape manifest " + path.string());
    json m;
    try {
        m = json::parse(read_file_text(path));
    } catch (const json::parse_error& e) {
        fail(ErrorKind::format, path.string() + ": " + e.what());
    }
    try {
        const int version = m.at("format_version").get<int>();
        if (version != kTapeFormatVersion) {
            fail(ErrorKind::format, "tape format_version " + std::to_string(version) + " not supported (reader " +
                                        std::to_string(kTapeFormatVersion) + ")");
        }
        if (m.value("byte_order", std::string("little")) != "little") {
            fail(ErrorKind::format, "unsupported byte_order " + m["byte_order"].dump());
        }
        ActivationTape tape;
        tape.model_id = m.at("model_id").get<std::string>();
        tape.dataset_id = m.at("dataset_id").get<std::string>();
        const auto& b = m.at("batch");
        tape.batch_size = b.at("size").get<std::size_t>();
        tape.seed = b.at("seed").get<std::uint64_t>();
        tape.repeat_index = b.at("repeat_index").get<std::size_t>();
        for (const auto& u : m.at("units")) {
            const std::string blob = u.at("blob").get<std::string>();
            if (!std::filesystem::exists(dir / blob)) fail(ErrorKind::format, "tape references missing blob '" + blob + "'");
            const auto bytes = read_file_bytes(dir / blob);
            if (sha256_hex(bytes) != u.at("sha256").get<std::string>()) {
                fail(ErrorKind::corruption, "digest mismatch for tape blob '" + blob + "'");
            }
            const Shape shape = u.at("shape").get<Shape>();
            if (shape.size() < 2 || shape[0] != tape.batch_size) {
                fail(ErrorKind::format, "unit blob '" + blob + "' shape " + shape_string(shape) +
                                            " does not lead with batch size " + std::to_string(tape.batch_size));
            }
            TapeUnit tu;
            tu.index = u.at("index").get<std::size_t>();
            tu.name = u.at("name").get<std::string>();
            tu.kind = u.value("kind", std::string());
            tu.activation = decode_tensor(bytes, shape, parse_dtype(u.at("dtype").get<std::string>()));
            if (tu.index != tape.units.size()) fail(ErrorKind::format, "tape unit indices must be consecutive from 0");
            tape.units.push_back(std::move(tu));
        }
        if (tape.units.empty()) fail(ErrorKind::format, "tape has no units");
        return tape;
    } catch (const json::exception& e) {
        fail(ErrorKind::format, path.string() + ": " + e.what());
    }
}

inline void write_tape_set(const std::vector<ActivationTape>& tapes, const std::filesystem::path& dir) {
    for (const auto& t : tapes) write_tape(t, dir / ("repeat_" + std::to_string(t.repeat_index)));
}

/// A single tape directory, or a directory of tape subdirectories.
inline std::vector<ActivationTape> read_tape_set(const std::filesystem::path& dir) {
    if (std::filesystem::exists(dir / "manifest.json")) return {read_tape(dir)};
    if (!std::filesystem::is_directory(dir)) fail(ErrorKind::io, "tape set " + dir.string() + " not found");
    std::vector<std::filesystem::path> subdirs;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_directory() && std::filesystem::exists(e.path() / "manifest.json")) subdirs.push_back(e.path());
    std::sort(subdirs.begin(), subdirs.end());
    if (subdirs.empty()) fail(ErrorKind::format, "no tapes under " + dir.string());
    std::vector<ActivationTape> tapes;
    for (const auto& p : subdirs) tapes.push_back(read_tape(p));
    std::sort(tapes.begin(), tapes.end(),
              [](const ActivationTape& a, const ActivationTape& b) { return a.repeat_index < b.repeat_index; });
    return tapes;
}

/// Offline equivalent of build_similarity_matrix. Tapes are paired by
/// (dataset_id, batch seed, repeat_index); every repeat must be present on
/// both sides.
inline SimilarityMatrix similarity_from_tapes(const std::vector<ActivationTape>& front,
                                              const std::vector<ActivationTape>& back) {
    if (front.empty() || back.empty()) fail(ErrorKind::pairing, "empty tape set");
    using Key = std::tuple<std::string, std::uint64_t, std::size_t>;
    std::map<Key, const ActivationTape*> fk, bk;
    for (const auto& t : front)
        if (!fk.emplace(Key{t.dataset_id, t.seed, t.repeat_index}, &t).second)
            fail(ErrorKind::pairing, "duplicate front tape for repeat " + std::to_string(t.repeat_index));
    for (const auto& t : back)
        if (!bk.emplace(Key{t.dataset_id, t.seed, t.repeat_index}, &t).second)
            fail(ErrorKind::pairing, "duplicate back tape for repeat " + std::to_string(t.repeat_index));

    std::set<std::size_t> missing_front, missing_back;
    for (const auto& [k, t] : fk)
        if (!bk.count(k)) missing_back.insert(std::get<2>(k));
    for (const auto& [k, t] : bk)
        if (!fk.count(k)) missing_front.insert(std::get<2>(k));
    if (!missing_front.empty() || !missing_back.empty()) {
        auto list = [](const std::set<std::size_t>& s) {
            std::string r;
            for (std::size_t v : s) r += (r.empty() ? "" : ",") + std::to_string(v);
            return r.empty() ? std::string("none") : r;
        };
        fail(ErrorKind::pairing, "unpaired repeats (matched on dataset, seed, repeat): front lacks [" +
                                     list(missing_front) + "], back lacks [" + list(missing_back) + "]");
    }

    std::vector<const ActivationTape*> fs, bs;
    for (const auto& [k, t] : fk) fs.push_back(t);
    std::sort(fs.begin(), fs.end(), [](auto* a, auto* b) { return a->repeat_index < b->repeat_index; });
    for (const auto* t : fs) bs.push_back(bk.at(Key{t->dataset_id, t->seed, t->repeat_index}));
    for (std::size_t r = 0; r < fs.size(); ++r) {
        if (fs[r]->repeat_index != r) {
            fail(ErrorKind::pairing, "repeat indices must cover [0," + std::to_string(fs.size()) + ")");
        }
        if (fs[r]->batch_size != bs[r]->batch_size) fail(ErrorKind::pairing, "batch sizes differ between paired tapes");
        if (fs[r]->model_id != fs[0]->model_id || bs[r]->model_id != bs[0]->model_id) {
            fail(ErrorKind::pairing, "tape set mixes models");
        }
    }

    std::vector<RepeatCaptures> fc, bc;
    for (std::size_t r = 0; r < fs.size(); ++r) {
        RepeatCaptures a, b;
        for (const auto& u : fs[r]->units) a.units.push_back(u.activation);
        for (const auto& u : bs[r]->units) b.units.push_back(u.activation);
        fc.push_back(std::move(a));
        bc.push_back(std::move(b));
    }
    SimilarityMeta meta{fs[0]->model_id, bs[0]->model_id, fs[0]->dataset_id, {}, {}};
    for (const auto& u : fs[0]->units) meta.front_units.push_back(u.name);
    for (const auto& u : bs[0]->units) meta.back_units.push_back(u.name);
    return similarity_from_captures(fc, bc, meta);
}

}  // namespace restitch
