#include <gtest/gtest.h>

#include "oracles.hpp"
#include "toy_fleet.hpp"

using namespace restitch;

TEST(Gram, Fixtures) {
    EXPECT_TRUE(gram(Tensor::identity(2)).bit_equal(Tensor::identity(2)));
    const Tensor same({3, 2}, {1, 2, 1, 2, 1, 2});
    const Tensor k = gram(same);
    for (double v : k.data()) EXPECT_EQ(v, 5.0);
}

TEST(Gram, MatchesDoubleLoop) {
    const Tensor f = toy::random_tensor({3, 5}, 1);
    const auto want = oracle::gram(toy::to_mat(f));
    const Tensor k = gram(f);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(k[i * 3 + j], want[i][j], 1e-12);
    EXPECT_THROW(gram(Tensor({1, 4})), Error);
}

TEST(Hsic, IdentityAtTwoIsOne) {
    // H = [[.5,-.5],[-.5,.5]]; tr(I H I H) = tr(H) = 1; (b-1)^2 = 1
    EXPECT_NEAR(hsic(Tensor::identity(2), Tensor::identity(2)), 1.0, 1e-12);
}

TEST(Hsic, ConstantKernelIsAnnihilated) {
    const Tensor l = gram(toy::random_tensor({5, 3}, 2));
    EXPECT_NEAR(hsic(Tensor::full({5, 5}, 3.0), l), 0.0, 1e-12);
}

TEST(Hsic, MatchesExplicitCentering) {
    for (std::uint64_t s = 0; s < 10; ++s) {
        const Tensor k = gram(toy::random_tensor({6, 4}, 10 + s)), l = gram(toy::random_tensor({6, 7}, 30 + s));
        EXPECT_NEAR(hsic(k, l), oracle::hsic(toy::to_mat(k), toy::to_mat(l)), 1e-10);
        EXPECT_GE(hsic(k, k), -1e-12);
    }
    EXPECT_THROW(hsic(Tensor::identity(3), Tensor::identity(4)), Error);
}

TEST(Centering, Algebra) {
    const auto h = oracle::centering(7);
    const auto hh = oracle::matmul(h, h);
    for (std::size_t i = 0; i < 7; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < 7; ++j) {
            EXPECT_NEAR(hh[i][j], h[i][j], 1e-12);
            row += h[i][j];
        }
        EXPECT_NEAR(row, 0.0, 1e-12);
    }
}

TEST(Cka, OrthogonalSamplesGiveZero) {
    const Tensor f1({4, 1}, {1, 1, -1, -1}), f2({4, 1}, {1, -1, 1, -1});
    EXPECT_NEAR(cka(f1, f2), 0.0, 1e-12);
    EXPECT_NEAR(oracle::cka(toy::to_mat(f1), toy::to_mat(f2)), 0.0, 1e-12);
}

TEST(Cka, InvariancesOnRandomFeatures) {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<std::size_t> bd(8, 32), dd(1, 24);
    std::uniform_real_distribution<double> cd(0.1, 10.0);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t b = bd(rng), d = dd(rng);
        const Tensor f = Tensor::normal({b, d}, 0.0, 1.0, rng);
        const double c = cd(rng) * (trial % 2 ? -1.0 : 1.0);
        std::vector<double> scaled(f.size());
        for (std::size_t k = 0; k < f.size(); ++k) scaled[k] = c * f[k];
        const Tensor fq = toy::from_mat(oracle::matmul(toy::to_mat(f), oracle::random_orthogonal(d, rng)));
        EXPECT_NEAR(cka(f, f), 1.0, 1e-9);
        EXPECT_NEAR(cka(f, Tensor({b, d}, scaled)), 1.0, 1e-9);
        EXPECT_NEAR(cka(f, fq), 1.0, 1e-9);
        const Tensor g = Tensor::normal({b, dd(rng)}, 0.0, 1.0, rng);
        const double v = cka(f, g);
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        EXPECT_NEAR(v, cka(g, f), 1e-12);
        EXPECT_NEAR(v, oracle::cka(toy::to_mat(f), toy::to_mat(g)), 1e-9);
    }
}

TEST(Cka, DegenerateFeaturesScoreZeroWithWarning) {
    toy::CaptureWarnings w;
    EXPECT_EQ(cka(Tensor::full({6, 3}, 2.0), toy::random_tensor({6, 3}, 4)), 0.0);
    EXPECT_FALSE(w.messages.empty());
}

TEST(Cka, BatchMismatch) {
    try {
        cka(Tensor({4, 2}), Tensor({5, 2}));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::dimension);
    }
}

TEST(Cka, FlattensSpatialActivations) {
    const Tensor a = toy::random_tensor({6, 2, 3, 3}, 5), b = toy::random_tensor({6, 4, 2, 2}, 6);
    EXPECT_DOUBLE_EQ(cka(a, b), cka(flatten_features(a), flatten_features(b)));
}

namespace {

struct Pair {
    Network a, b;
    Dataset data;
};

Pair random_pair() {
    auto split = gen_synthetic(7, 3, 40, {2, 4, 4});
    return {toy::random_network(toy::tiny_spec("A"), 1, DType::f32),
            toy::random_network(toy::tiny_spec("B", 3), 2, DType::f32), split.train};
}

}  // namespace

TEST(Matrix, SelfComparisonDiagonalIsOne) {
    const auto p = random_pair();
    const SeededBatchSource src(p.data.images, p.data.id, 16, 3);
    const auto m = build_similarity_matrix(p.a, p.a, src, 3);
    for (std::size_t i = 0; i < m.rows; ++i) EXPECT_NEAR(m.at(i, i), 1.0, 1e-6);
}

TEST(Matrix, SwapTransposes) {
    const auto p = random_pair();
    const SeededBatchSource src(p.data.images, p.data.id, 16, 3);
    const auto ab = build_similarity_matrix(p.a, p.b, src, 2);
    const auto ba = build_similarity_matrix(p.b, p.a, src, 2);
    const auto t = ab.transposed();
    ASSERT_EQ(t.rows, ba.rows);
    for (std::size_t i = 0; i < t.rows; ++i)
        for (std::size_t j = 0; j < t.cols; ++j) EXPECT_NEAR(t.at(i, j), ba.at(i, j), 1e-9);
    EXPECT_EQ(t.front_model_id, "B");
}

TEST(Matrix, FiveRepeatMeanOfSingleRepeats) {
    const auto p = random_pair();
    const SeededBatchSource src(p.data.images, p.data.id, 16, 3);
    const auto five = build_similarity_matrix(p.a, p.b, src, 5);
    // independent recomputation: one cka per (repeat, cell), averaged here
    for (std::size_t i = 0; i < five.rows; ++i)
        for (std::size_t j = 0; j < five.cols; ++j) {
            double s = 0.0;
            for (std::size_t r = 0; r < 5; ++r) {
                const Tensor x = src.batch(r).images;
                const auto fa = forward_with_taps(p.a.spec, p.a.weights, x, {i}).captures.at(i);
                const auto fb = forward_with_taps(p.b.spec, p.b.weights, x, {j}).captures.at(j);
                s += std::clamp(cka(fa, fb), 0.0, 1.0);
            }
            EXPECT_EQ(five.at(i, j), s / 5.0) << i << "," << j;
        }
    EXPECT_EQ(five.repeats, 5u);
    EXPECT_EQ(five.batch_size, 16u);
    for (double v : five.values) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Matrix, RepeatsUseDisjointBatches) {
    const auto p = random_pair();
    const SeededBatchSource src(p.data.images, p.data.id, 16, 3);
    EXPECT_EQ(src.capacity(), p.data.size() / 16);
    EXPECT_FALSE(src.batch(0).images.bit_equal(src.batch(1).images));
    try {
        src.batch(src.capacity());
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::data);
    }
}

TEST(Matrix, ParallelScheduleMatchesSequential) {
    const auto p = random_pair();
    const SeededBatchSource src(p.data.images, p.data.id, 16, 3);
    ::setenv("RESTITCH_THREADS", "1", 1);
    const auto seq = build_similarity_matrix(p.a, p.b, src, 2);
    ::setenv("RESTITCH_THREADS", "4", 1);
    const auto par = build_similarity_matrix(p.a, p.b, src, 2);
    ::unsetenv("RESTITCH_THREADS");
    EXPECT_EQ(seq.values, par.values);
}

TEST(Matrix, JsonRoundTrip) {
    const auto p = random_pair();
    const SeededBatchSource src(p.data.images, p.data.id, 16, 3);
    const auto m = build_similarity_matrix(p.a, p.b, src, 2);
    const auto back = similarity_from_json(to_json(m));
    EXPECT_EQ(back.values, m.values);
    EXPECT_EQ(back.front_units, m.front_units);
    EXPECT_EQ(back.dataset_id, m.dataset_id);
}

TEST(Heatmap, GridRoundTripAndQuoting) {
    SimilarityMatrix m;
    m.front_model_id = "f";
    m.back_model_id = "b";
    m.rows = m.cols = 2;
    m.front_units = {"a,1", "b"};
    m.back_units = {"c", "d\"q"};
    m.values = {0.1234567, 1.0, 0.0, 0.5};
    m.sample_counts = {1, 1, 1, 1};
    const std::string csv = heatmap_csv(m);
    const auto grid = detail::parse_csv(csv);
    ASSERT_EQ(grid.size(), 3u);
    for (const auto& row : grid) EXPECT_EQ(row.size(), 3u);
    EXPECT_NE(csv.find("\"a,1\""), std::string::npos);
    EXPECT_EQ(grid[1][0], "a,1");
    EXPECT_EQ(grid[0][2], "d\"q");

    const auto dir = toy::temp_dir("heatmap");
    heatmap_export(m, dir / "h.csv");
    const auto back = heatmap_import(dir / "h.csv");
    ASSERT_EQ(back.values.size(), 4u);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(back.values[k], m.values[k], 1e-6);
    EXPECT_EQ(back.front_units, m.front_units);
    std::filesystem::remove_all(dir);
}
