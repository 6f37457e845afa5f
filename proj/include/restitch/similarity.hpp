#pragma once

// Linear-kernel centered kernel alignment (CKA) between layer activations and
// the all-pairs similarity matrix between two networks' units.
//
//   K = F1 F1^T,  L = F2 F2^T,  H = I - (1/b) 1 1^T
//   HSIC(K, L) = tr(K H L H) / (b-1)^2
//   CKA(F1, F2) = HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L))
//
// All arithmetic is f64 regardless of the activation dtype.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "restitch/autograd.hpp"
#include "restitch/digest.hpp"
#include "restitch/error.hpp"
#include "restitch/log.hpp"
#include "restitch/netgraph.hpp"
#include "restitch/parallel.hpp"
#include "restitch/tensor.hpp"

namespace restitch {

/// Self-HSIC below this marks a representation as degenerate (constant).
inline constexpr double kDegenerateHsic = 1e-12;
inline constexpr double kSimilarityFpSlack = 1e-6;

/// K[i][j] = <row i, row j> of a [b, d] feature matrix.
inline Tensor gram(const Tensor& features) {
    if (features.rank() != 2) {
        fail(ErrorKind::dimension, "gram expects [b, d] features, got " + shape_string(features.shape()));
    }
    const std::size_t b = features.extent(0), d = features.extent(1);
    if (b < 2) fail(ErrorKind::contract, "gram needs at least 2 samples, got " + std::to_string(b));
    const double* f = features.data().data();
    std::vector<double> k(b * b);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = i; j < b; ++j) {
            double s = 0.0;
            for (std::size_t t = 0; t < d; ++t) s += f[i * d + t] * f[j * d + t];
            k[i * b + j] = s;
            k[j * b + i] = s;
        }
    return Tensor({b, b}, std::move(k), DType::f64);
}

namespace detail {

/// H K H via row, column and grand means.
inline std::vector<double> double_center(std::span<const double> k, std::size_t b) {
    std::vector<double> row(b, 0.0), col(b, 0.0);
    double grand = 0.0;
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < b; ++j) {
            row[i] += k[i * b + j];
            col[j] += k[i * b + j];
        }
    const double inv = 1.0 / static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i) {
        grand += row[i];
        row[i] *= inv;
        col[i] *= inv;
    }
    grand *= inv * inv;
    std::vector<double> c(b * b);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < b; ++j) c[i * b + j] = k[i * b + j] - row[i] - col[j] + grand;
    return c;
}

/// tr(A B) for row-major b x b matrices.
inline double trace_product(std::span<const double> a, std::span<const double> bm, std::size_t b) {
    double s = 0.0;
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < b; ++j) s += a[i * b + j] * bm[j * b + i];
    return s;
}

inline void check_square_pair(const Tensor& K, const Tensor& L) {
    if (K.rank() != 2 || L.rank() != 2 || K.extent(0) != K.extent(1) || L.extent(0) != L.extent(1) ||
        K.extent(0) != L.extent(0)) {
        fail(ErrorKind::dimension, "hsic needs square matrices of equal size, got " + shape_string(K.shape()) +
                                       " and " + shape_string(L.shape()));
    }
    if (K.extent(0) < 2) fail(ErrorKind::contract, "hsic needs b >= 2");
}

}  // namespace detail

/// tr(K H L H) / (b-1)^2.
inline double hsic(const Tensor& K, const Tensor& L) {
    detail::check_square_pair(K, L);
    const std::size_t b = K.extent(0);
    // tr(K H L H) = tr((H K H)(H L H)) since H is idempotent
    const auto kc = detail::double_center(K.data(), b);
    const auto lc = detail::double_center(L.data(), b);
    const double denom = static_cast<double>(b - 1) * static_cast<double>(b - 1);
    return detail::trace_product(kc, lc, b) / denom;
}

/// Double-centered gram of one representation plus its self-HSIC.
struct CenteredGram {
    std::size_t samples = 0;
    std::vector<double> centered;
    double self_hsic = 0.0;
};

inline CenteredGram centered_gram(const Tensor& activation) {
    const Tensor f = activation.rank() == 2 ? activation : flatten_features(activation);
    const Tensor k = gram(f);
    CenteredGram g;
    g.samples = f.extent(0);
    g.centered = detail::double_center(k.data(), g.samples);
    const double denom = static_cast<double>(g.samples - 1) * static_cast<double>(g.samples - 1);
    g.self_hsic = detail::trace_product(g.centered, g.centered, g.samples) / denom;
    return g;
}

/// CKA from precomputed centered grams; 0 (with a warning) when either side
/// is degenerate. Result clamped to [0, 1].
inline double cka(const CenteredGram& a, const CenteredGram& b) {
    if (a.samples != b.samples) {
        fail(ErrorKind::dimension, "cka batch mismatch: " + std::to_string(a.samples) + " vs " +
                                       std::to_string(b.samples) + " samples");
    }
    if (a.self_hsic < kDegenerateHsic || b.self_hsic < kDegenerateHsic) {
        warn("degenerate representation (self-HSIC < 1e-12); CKA set to 0");
        return 0.0;
    }
    const double denom = static_cast<double>(a.samples - 1) * static_cast<double>(a.samples - 1);
    const double cross = detail::trace_product(a.centered, b.centered, a.samples) / denom;
    const double v = cross / std::sqrt(a.self_hsic * b.self_hsic);
    return std::clamp(v, 0.0, 1.0);
}

/// Linear CKA of two [b, ...] representations (flattened per sample).
inline double cka(const Tensor& f1, const Tensor& f2) {
    if (f1.rank() < 2 || f2.rank() < 2 || f1.extent(0) != f2.extent(0)) {
        fail(ErrorKind::dimension, "cka batch mismatch: " + shape_string(f1.shape()) + " vs " +
                                       shape_string(f2.shape()));
    }
    return cka(centered_gram(f1), centered_gram(f2));
}

// ---------------------------------------------------------------------------
// Similarity matrix

struct SimilarityMatrix {
    std::string front_model_id;
    std::string back_model_id;
    std::string dataset_id;
    std::size_t repeats = 0;
    std::size_t batch_size = 0;
    std::vector<std::string> front_units;
    std::vector<std::string> back_units;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;              // row-major rows x cols, in [0, 1]
    std::vector<std::uint64_t> sample_counts;  // samples averaged per cell

    double at(std::size_t i, std::size_t j) const {
        if (i >= rows || j >= cols) {
            fail(ErrorKind::range, "similarity cell (" + std::to_string(i) + "," + std::to_string(j) +
                                       ") outside " + std::to_string(rows) + "x" + std::to_string(cols));
        }
        return values[i * cols + j];
    }

    SimilarityMatrix transposed() const {
        SimilarityMatrix t = *this;
        std::swap(t.front_model_id, t.back_model_id);
        std::swap(t.front_units, t.back_units);
        std::swap(t.rows, t.cols);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) {
                t.values[j * rows + i] = values[i * cols + j];
                t.sample_counts[j * rows + i] = sample_counts[i * cols + j];
            }
        return t;
    }
};

/// Activations of every unit of one model for one batch, indexed by unit.
struct RepeatCaptures {
    std::vector<Tensor> units;
};

struct SimilarityMeta {
    std::string front_model_id;
    std::string back_model_id;
    std::string dataset_id;
    std::vector<std::string> front_units;
    std::vector<std::string> back_units;
};

/// Mean over repeats of per-repeat clamped CKA. Cells are independent tasks;
/// the result does not depend on the thread count.
inline SimilarityMatrix similarity_from_captures(const std::vector<RepeatCaptures>& front,
                                                 const std::vector<RepeatCaptures>& back, const SimilarityMeta& meta) {
    if (front.empty() || front.size() != back.size()) {
        fail(ErrorKind::pairing, "need equal, non-zero repeat counts, got " + std::to_string(front.size()) + " and " +
                                     std::to_string(back.size()));
    }
    SimilarityMatrix m;
    m.front_model_id = meta.front_model_id;
    m.back_model_id = meta.back_model_id;
    m.dataset_id = meta.dataset_id;
    m.repeats = front.size();
    m.rows = front[0].units.size();
    m.cols = back[0].units.size();
    m.front_units = meta.front_units;
    m.back_units = meta.back_units;
    if (m.front_units.size() != m.rows || m.back_units.size() != m.cols) {
        fail(ErrorKind::dimension, "unit name lists do not match capture counts");
    }
    m.batch_size = front[0].units.at(0).extent(0);
    std::vector<double> sums(m.rows * m.cols, 0.0);
    for (std::size_t r = 0; r < m.repeats; ++r) {
        if (front[r].units.size() != m.rows || back[r].units.size() != m.cols) {
            fail(ErrorKind::dimension, "repeat " + std::to_string(r) + " captures a different unit count");
        }
        std::vector<CenteredGram> fg(m.rows), bg(m.cols);
        parallel_for(m.rows + m.cols, [&](std::size_t u) {
            if (u < m.rows) fg[u] = centered_gram(front[r].units[u]);
            else bg[u - m.rows] = centered_gram(back[r].units[u - m.rows]);
        });
        for (const auto& g : fg)
            if (g.samples != m.batch_size) fail(ErrorKind::dimension, "inconsistent batch size across captures");
        for (const auto& g : bg)
            if (g.samples != m.batch_size) fail(ErrorKind::dimension, "inconsistent batch size across captures");
        std::vector<double> cell(m.rows * m.cols);
        parallel_for(m.rows * m.cols, [&](std::size_t c) { cell[c] = cka(fg[c / m.cols], bg[c % m.cols]); });
        for (std::size_t c = 0; c < cell.size(); ++c) sums[c] += cell[c];
    }
    m.values.resize(sums.size());
    for (std::size_t c = 0; c < sums.size(); ++c)
        m.values[c] = std::clamp(sums[c] / static_cast<double>(m.repeats), 0.0, 1.0);
    m.sample_counts.assign(sums.size(), static_cast<std::uint64_t>(m.repeats * m.batch_size));
    return m;
}

/// One input batch of a repeat, identified for tape pairing.
struct Batch {
    Tensor images;
    std::string dataset_id;
    std::uint64_t seed = 0;
    std::size_t repeat_index = 0;
};

/// Disjoint batches drawn from one seeded permutation of a sample pool.
class SeededBatchSource {
public:
    SeededBatchSource(Tensor samples, std::string dataset_id, std::size_t batch_size, std::uint64_t seed)
        : samples_(std::move(samples)), dataset_id_(std::move(dataset_id)), batch_size_(batch_size), seed_(seed) {
        if (samples_.rank() < 2) fail(ErrorKind::dimension, "sample pool needs a leading batch axis");
        if (batch_size_ < 2) fail(ErrorKind::contract, "CKA batches need at least 2 samples");
        order_.resize(samples_.extent(0));
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        std::mt19937_64 rng(seed_);
        std::shuffle(order_.begin(), order_.end(), rng);
    }

    std::size_t batch_size() const { return batch_size_; }
    std::uint64_t seed() const { return seed_; }
    const std::string& dataset_id() const { return dataset_id_; }
    std::size_t capacity() const { return order_.size() / batch_size_; }

    Batch batch(std::size_t repeat_index) const {
        if ((repeat_index + 1) * batch_size_ > order_.size()) {
            fail(ErrorKind::data, "batch source exhausted: repeat " + std::to_string(repeat_index) + " needs " +
                                      std::to_string((repeat_index + 1) * batch_size_) + " samples, pool has " +
                                      std::to_string(order_.size()));
        }
        const Shape& s = samples_.shape();
        const std::size_t per = samples_.size() / s[0];
        std::vector<double> v(batch_size_ * per);
        const auto src = samples_.data();
        for (std::size_t i = 0; i < batch_size_; ++i) {
            const std::size_t idx = order_[repeat_index * batch_size_ + i];
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(idx * per), per,
                        v.begin() + static_cast<std::ptrdiff_t>(i * per));
        }
        Shape bs = s;
        bs[0] = batch_size_;
        return {Tensor(bs, std::move(v), samples_.dtype()), dataset_id_, seed_, repeat_index};
    }

private:
    Tensor samples_;
    std::string dataset_id_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    std::vector<std::size_t> order_;
};

inline std::vector<std::string> unit_names(const NetworkSpec& spec) {
    std::vector<std::string> n;
    for (const auto& u : spec.units()) n.push_back(u.name());
    return n;
}

/// Activations after every unit for one batch.
inline RepeatCaptures capture_all(const Network& net, const Tensor& batch) {
    auto out = forward_with_taps(net.spec, net.weights, batch, all_units(net.spec));
    RepeatCaptures rc;
    for (auto& [i, t] : out.captures) rc.units.push_back(std::move(t));
    return rc;
}

/// All-pairs unit similarity of two live networks, averaged over `repeats`
/// batches. Both networks see the same batch within a repeat.
inline SimilarityMatrix build_similarity_matrix(const Network& front, const Network& back,
                                                const SeededBatchSource& source, std::size_t repeats = 5) {
    if (front.spec.input_signature() != back.spec.input_signature()) {
        fail(ErrorKind::dimension, "models take different inputs: " + front.spec.input_signature().str() + " vs " +
                                       back.spec.input_signature().str());
    }
    if (repeats == 0) fail(ErrorKind::contract, "repeats must be >= 1");
    std::vector<RepeatCaptures> fc, bc;
    for (std::size_t r = 0; r < repeats; ++r) {
        const Batch b = source.batch(r);
        fc.push_back(capture_all(front, b.images));
        bc.push_back(capture_all(back, b.images));
    }
    SimilarityMeta meta{front.spec.model_id(), back.spec.model_id(), source.dataset_id(), unit_names(front.spec),
                        unit_names(back.spec)};
    return similarity_from_captures(fc, bc, meta);
}

// ---------------------------------------------------------------------------
// Persistence

inline json to_json(const SimilarityMatrix& m) {
    json values = json::array();
    json counts = json::array();
    for (std::size_t i = 0; i < m.rows; ++i) {
        values.push_back(std::vector<double>(m.values.begin() + static_cast<std::ptrdiff_t>(i * m.cols),
                                             m.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * m.cols)));
        counts.push_back(std::vector<std::uint64_t>(
            m.sample_counts.begin() + static_cast<std::ptrdiff_t>(i * m.cols),
            m.sample_counts.begin() + static_cast<std::ptrdiff_t>((i + 1) * m.cols)));
    }
    return json{{"front_model_id", m.front_model_id},
                {"back_model_id", m.back_model_id},
                {"repeats", m.repeats},
                {"batch_size", m.batch_size},
                {"dataset_id", m.dataset_id},
                {"front_units", m.front_units},
                {"back_units", m.back_units},
                {"values", std::move(values)},
                {"sample_counts", std::move(counts)}};
}

inline SimilarityMatrix similarity_from_json(const json& j) {
    try {
        SimilarityMatrix m;
        m.front_model_id = j.at("front_model_id").get<std::string>();
        m.back_model_id = j.at("back_model_id").get<std::string>();
        m.repeats = j.at("repeats").get<std::size_t>();
        m.batch_size = j.at("batch_size").get<std::size_t>();
        m.dataset_id = j.at("dataset_id").get<std::string>();
        const auto rows = j.at("values").get<std::vector<std::vector<double>>>();
        m.rows = rows.size();
        m.cols = rows.empty() ? 0 : rows[0].size();
        for (const auto& r : rows) {
            if (r.size() != m.cols) fail(ErrorKind::format, "ragged similarity matrix");
            for (double v : r) {
                if (!(v >= -kSimilarityFpSlack && v <= 1.0 + kSimilarityFpSlack))
                    fail(ErrorKind::format, "similarity value " + std::to_string(v) + " outside [0,1]");
                m.values.push_back(std::clamp(v, 0.0, 1.0));
            }
        }
        if (j.contains("front_units")) m.front_units = j["front_units"].get<std::vector<std::string>>();
        if (j.contains("back_units")) m.back_units = j["back_units"].get<std::vector<std::string>>();
        if (m.front_units.empty())
            for (std::size_t i = 0; i < m.rows; ++i) m.front_units.push_back(std::to_string(i));
        if (m.back_units.empty())
            for (std::size_t i = 0; i < m.cols; ++i) m.back_units.push_back(std::to_string(i));
        if (j.contains("sample_counts")) {
            for (const auto& r : j["sample_counts"]) for (const auto& v : r) m.sample_counts.push_back(v.get<std::uint64_t>());
        } else {
            m.sample_counts.assign(m.values.size(), m.repeats * m.batch_size);
        }
        if (m.front_units.size() != m.rows || m.back_units.size() != m.cols || m.sample_counts.size() != m.values.size())
            fail(ErrorKind::format, "similarity metadata does not match matrix dimensions");
        return m;
    } catch (const json::exception& e) {
        fail(ErrorKind::format, std::string("similarity matrix: ") + e.what());
    }
}

inline void save_similarity(const SimilarityMatrix& m, const std::filesystem::path& path) {
    write_file_text(path, to_json(m).dump(2) + "\n");
}

inline SimilarityMatrix load_similarity(const std::filesystem::path& path) {
    try {
        return similarity_from_json(json::parse(read_file_text(path)));
    } catch (const json::parse_error& e) {
        fail(ErrorKind::format, path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Heatmap CSV: header row of back-unit names, one row per front unit.

namespace detail {

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
        if (c == '"') q += '"';
        q += c;
    }
    return q + '"';
}

inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false, any = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
            continue;
        }
        if (c == '"') {
            quoted = true;
            any = true;
        } else if (c == ',') {
            row.push_back(std::move(field));
            field.clear();
            any = true;
        } else if (c == '\n' || c == '\r') {
            if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
            if (any || !field.empty()) {
                row.push_back(std::move(field));
                rows.push_back(std::move(row));
            }
            row.clear();
            field.clear();
            any = false;
        } else {
            field += c;
            any = true;
        }
    }
    if (quoted) fail(ErrorKind::format, "unterminated quoted CSV field");
    if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace detail

inline std::string heatmap_csv(const SimilarityMatrix& m) {
    std::ostringstream os;
    os << detail::csv_field(m.front_model_id + "\\" + m.back_model_id);
    for (const auto& n : m.back_units) os << ',' << detail::csv_field(n);
    os << '\n';
    os << std::fixed << std::setprecision(6);
    for (std::size_t i = 0; i < m.rows; ++i) {
        os << detail::csv_field(m.front_units[i]);
        for (std::size_t j = 0; j < m.cols; ++j) os << ',' << m.values[i * m.cols + j];
        os << '\n';
    }
    return os.str();
}

inline void heatmap_export(const SimilarityMatrix& m, const std::filesystem::path& path) {
    write_file_text(path, heatmap_csv(m));
}

/// Parses a heatmap CSV back into names and values (metadata left empty).
inline SimilarityMatrix heatmap_import(const std::filesystem::path& path) {
    const auto rows = detail::parse_csv(read_file_text(path));
    if (rows.size() < 2 || rows[0].size() < 2) fail(ErrorKind::format, path.string() + ": heatmap needs a header and data");
    SimilarityMatrix m;
    m.back_units.assign(rows[0].begin() + 1, rows[0].end());
    m.cols = m.back_units.size();
    for (std::size_t r = 1; r < rows.size(); ++r) {
        if (rows[r].size() != m.cols + 1) fail(ErrorKind::format, path.string() + ": ragged heatmap row " + std::to_string(r));
        m.front_units.push_back(rows[r][0]);
        for (std::size_t c = 1; c < rows[r].size(); ++c) {
            try {
                m.values.push_back(std::stod(rows[r][c]));
            } catch (const std::exception&) {
                fail(ErrorKind::format, path.string() + ": bad number '" + rows[r][c] + "'");
            }
        }
    }
    m.rows = m.front_units.size();
    m.sample_counts.assign(m.values.size(), 0);
    return m;
}

}  // namespace restitch
