#include <gtest/gtest.h>

#include "oracles.hpp"
#include "toy_fleet.hpp"

using namespace restitch;

namespace {

ErrorKind kind_of(const std::function<void()>& f, std::string* what = nullptr) {
    try {
        f();
    } catch (const Error& e) {
        if (what) *what = e.what();
        return e.kind();
    }
    ADD_FAILURE() << "no error";
    return ErrorKind::contract;
}

Tensor apply(const AdapterSpec& a, const UnitWeights& w, const Tensor& x) {
    return apply_adapter(a, w, Var::leaf(x)).value();
}

double largest_gap(const Tensor& a, const Tensor& b) {
    EXPECT_EQ(a.shape(), b.shape());
    double m = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b[k]));
    return m;
}

}  // namespace

TEST(Synthesize, ChannelProjectCounts) {
    const auto a = synthesize_adapter(Signature::spatial(8, 4, 4), Signature::spatial(16, 4, 4));
    EXPECT_EQ(a.kind, AdapterKind::channel_project);
    EXPECT_EQ(a.resize, Resize::none);
    EXPECT_EQ(a.param_count(), 8u * 16 + 16);
    EXPECT_EQ(a.param_count(), 144u);
}

TEST(Synthesize, ChannelProjectResizes) {
    const auto down = synthesize_adapter(Signature::spatial(8, 8, 8), Signature::spatial(4, 4, 4));
    EXPECT_EQ(down.resize, Resize::avg_pool);
    EXPECT_EQ(down.resize_factor, 2u);
    const auto up = synthesize_adapter(Signature::spatial(8, 2, 2), Signature::spatial(4, 8, 8));
    EXPECT_EQ(up.resize, Resize::nearest);
    EXPECT_EQ(up.resize_factor, 4u);
    EXPECT_EQ(kind_of([] { synthesize_adapter(Signature::spatial(8, 6, 6), Signature::spatial(4, 4, 4)); }),
              ErrorKind::configuration);
}

TEST(Synthesize, TokenProjectCounts) {
    const auto a = synthesize_adapter(Signature::tokens(50, 192), Signature::tokens(50, 384));
    EXPECT_EQ(a.kind, AdapterKind::token_project);
    EXPECT_EQ(a.param_count(), 74112u);
    EXPECT_EQ(kind_of([] { synthesize_adapter(Signature::tokens(50, 8), Signature::tokens(49, 8)); }),
              ErrorKind::configuration);
}

TEST(Synthesize, PatchifyPicksKernel) {
    const auto a = synthesize_adapter(Signature::spatial(64, 8, 8), Signature::tokens(16, 96));
    EXPECT_EQ(a.kind, AdapterKind::patchify);
    EXPECT_EQ(a.patch, 2u);
    EXPECT_EQ(a.param_count(), 96u * 64 * 2 * 2 + 96);
}

TEST(Synthesize, ImpossiblePatchifyListsGrids) {
    std::string what;
    EXPECT_EQ(kind_of([] { synthesize_adapter(Signature::spatial(3, 6, 6), Signature::tokens(5, 8)); }, &what),
              ErrorKind::configuration);
    // 6x6 divides by 1, 2, 3, 6 -> 36, 9, 4, 1 tokens
    EXPECT_NE(what.find("36, 9, 4, 1"), std::string::npos) << what;
}

TEST(Synthesize, TokensToSpatialUnsupported) {
    EXPECT_EQ(kind_of([] { synthesize_adapter(Signature::tokens(16, 8), Signature::spatial(8, 4, 4)); }),
              ErrorKind::unsupported);
}

TEST(Adapter, ChannelProjectMatchesDirectConvolution) {
    const auto a = synthesize_adapter(Signature::spatial(3, 4, 4), Signature::spatial(5, 2, 2));
    const auto w = random_adapter_weights(a, 1, DType::f64);
    const Tensor x = toy::random_tensor({2, 3, 4, 4}, 2);
    // 2x2 mean by hand, then a 1x1 convolution
    std::vector<double> pooled(2 * 3 * 2 * 2, 0.0);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < 4; ++y)
                for (std::size_t xx = 0; xx < 4; ++xx)
                    pooled[((n * 3 + c) * 2 + y / 2) * 2 + xx / 2] += 0.25 * x[((n * 3 + c) * 4 + y) * 4 + xx];
    std::size_t oh = 0, ow = 0;
    const auto& wt = w[0].value;
    auto want = oracle::conv2d(pooled, 2, 3, 2, 2, {wt.data().begin(), wt.data().end()}, 5, 1, 1, 1, 0, oh, ow);
    const Tensor got = apply(a, w, x);
    ASSERT_EQ(got.shape(), (Shape{2, 5, 2, 2}));
    for (std::size_t k = 0; k < want.size(); ++k) EXPECT_NEAR(got[k], want[k] + w[1].value[(k / 4) % 5], 1e-12);
}

TEST(Adapter, PatchifyMatchesStridedConvolution) {
    const auto a = synthesize_adapter(Signature::spatial(2, 4, 4), Signature::tokens(4, 3));
    const auto w = random_adapter_weights(a, 3, DType::f64);
    const Tensor x = toy::random_tensor({2, 2, 4, 4}, 4);
    std::size_t oh = 0, ow = 0;
    const auto& wt = w[0].value;
    const auto conv = oracle::conv2d({x.data().begin(), x.data().end()}, 2, 2, 4, 4,
                                     {wt.data().begin(), wt.data().end()}, 3, 2, 2, 2, 0, oh, ow);
    const Tensor got = apply(a, w, x);
    ASSERT_EQ(got.shape(), (Shape{2, 4, 3}));
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t t = 0; t < 4; ++t)
            for (std::size_t d = 0; d < 3; ++d)
                EXPECT_NEAR(got[(n * 4 + t) * 3 + d], conv[(n * 3 + d) * 4 + t], 1e-12);
}

TEST(Adapter, RejectsWrongInput) {
    const auto a = synthesize_adapter(Signature::spatial(3, 4, 4), Signature::spatial(5, 4, 4));
    const auto w = random_adapter_weights(a, 1);
    EXPECT_EQ(kind_of([&] { apply(a, w, Tensor({2, 4, 4, 4})); }), ErrorKind::dimension);
}

TEST(Init, RandomIsDeterministicAndBounded) {
    const auto a = synthesize_adapter(Signature::spatial(8, 4, 4), Signature::spatial(16, 4, 4));
    const auto w1 = random_adapter_weights(a, 7), w2 = random_adapter_weights(a, 7), w3 = random_adapter_weights(a, 8);
    EXPECT_TRUE(w1[0].value.bit_equal(w2[0].value));
    EXPECT_FALSE(w1[0].value.bit_equal(w3[0].value));
    const double bound = 1.0 / std::sqrt(8.0);
    for (double v : w1[0].value.data()) EXPECT_LE(std::abs(v), bound);
    for (double v : w1[1].value.data()) EXPECT_EQ(v, 0.0);
}

TEST(Init, IdentityPassesChannelsThrough) {
    const auto a = synthesize_adapter(Signature::spatial(4, 3, 3), Signature::spatial(4, 3, 3));
    const Tensor x = toy::random_tensor({2, 4, 3, 3}, 9);
    EXPECT_LT(largest_gap(apply(a, identity_adapter_weights(a, DType::f64), x), x), 1e-15);
    const auto t = synthesize_adapter(Signature::tokens(5, 6), Signature::tokens(5, 6));
    const Tensor y = toy::random_tensor({2, 5, 6}, 10);
    EXPECT_LT(largest_gap(apply(t, identity_adapter_weights(t, DType::f64), y), y), 1e-15);
    const auto p = synthesize_adapter(Signature::spatial(2, 4, 4), Signature::tokens(4, 3));
    EXPECT_EQ(kind_of([&] { identity_adapter_weights(p); }), ErrorKind::configuration);
}

namespace {

/// Targets produced by a known adapter; the fit should recover it.
void expect_recovers(const Signature& in, const Signature& out, Shape batch_shape) {
    const auto a = synthesize_adapter(in, out);
    auto truth = random_adapter_weights(a, 21, DType::f64);
    std::mt19937_64 rng(22);
    truth[1].value = Tensor::normal(truth[1].value.shape(), 0.0, 1.0, rng);
    const Tensor x = toy::random_tensor(batch_shape, 23);
    const Tensor y = apply(a, truth, x);
    const auto fit = least_squares_adapter_weights(a, x, y, DType::f64);
    ASSERT_TRUE(fit.has_value());
    EXPECT_LT(largest_gap((*fit)[0].value, truth[0].value), 1e-6) << to_string(a.kind);
    EXPECT_LT(largest_gap((*fit)[1].value, truth[1].value), 1e-6) << to_string(a.kind);
    EXPECT_LT(largest_gap(apply(a, *fit, x), y), 1e-6);
}

}  // namespace

TEST(LeastSquares, RecoversChannelProject) {
    expect_recovers(Signature::spatial(4, 4, 4), Signature::spatial(3, 4, 4), {16, 4, 4, 4});
}

TEST(LeastSquares, RecoversResizedChannelProject) {
    expect_recovers(Signature::spatial(4, 4, 4), Signature::spatial(3, 2, 2), {32, 4, 4, 4});
    expect_recovers(Signature::spatial(4, 2, 2), Signature::spatial(3, 4, 4), {32, 4, 2, 2});
}

TEST(LeastSquares, RecoversTokenProject) {
    expect_recovers(Signature::tokens(6, 5), Signature::tokens(6, 7), {10, 6, 5});
}

TEST(LeastSquares, RecoversPatchify) {
    expect_recovers(Signature::spatial(2, 4, 4), Signature::tokens(4, 3), {16, 2, 4, 4});
}

TEST(LeastSquares, RejectsMismatchedCalibration) {
    const auto a = synthesize_adapter(Signature::spatial(4, 4, 4), Signature::spatial(3, 4, 4));
    EXPECT_EQ(kind_of([&] { least_squares_adapter_weights(a, Tensor({4, 4, 4, 4}), Tensor({5, 3, 4, 4})); }),
              ErrorKind::dimension);
    EXPECT_EQ(kind_of([&] { least_squares_adapter_weights(a, Tensor({4, 4, 4, 4}), Tensor({4, 2, 4, 4})); }),
              ErrorKind::dimension);
}

TEST(Init, LeastSquaresWithoutCalibrationFallsBackToRandom) {
    auto a = synthesize_adapter(Signature::spatial(8, 4, 4), Signature::spatial(16, 4, 4));
    toy::CaptureWarnings w;
    const auto got = init_adapter(a, AdapterInit::least_squares, std::nullopt, 5);
    EXPECT_EQ(a.init, AdapterInit::random);
    EXPECT_FALSE(w.messages.empty());
    EXPECT_TRUE(got[0].value.bit_equal(random_adapter_weights(a, 5)[0].value));
}

TEST(Init, LeastSquaresRecordsMode) {
    auto a = synthesize_adapter(Signature::tokens(3, 4), Signature::tokens(3, 4));
    const Tensor x = toy::random_tensor({8, 3, 4}, 1);
    init_adapter(a, AdapterInit::least_squares, Calibration{x, x}, 5);
    EXPECT_EQ(a.init, AdapterInit::least_squares);
}

TEST(AdapterSpec, JsonRoundTrip) {
    const auto a = synthesize_adapter(Signature::spatial(64, 8, 8), Signature::tokens(16, 96));
    EXPECT_TRUE(adapter_from_json(to_json(a)) == a);
    const auto b = synthesize_adapter(Signature::spatial(8, 8, 8), Signature::spatial(4, 4, 4));
    EXPECT_TRUE(adapter_from_json(to_json(b)) == b);
}
