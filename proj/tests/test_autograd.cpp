#include <gtest/gtest.h>

#include <functional>

#include "oracles.hpp"
#include "toy_fleet.hpp"

using namespace restitch;

namespace {

/// Random-weighted scalar readout so every output element carries a distinct
/// gradient.
Var readout(const Var& out, std::uint64_t seed) {
    const Var flat = out.shape().size() == 2 ? out : flatten_features(out);
    const Var w = Var::leaf(toy::random_tensor({flat.shape()[1], 1}, seed));
    return sum(matmul(flat, w));
}

using Fn = std::function<Var(const std::vector<Var>&)>;

/// Analytic gradients of every input versus central differences.
void expect_gradients(const std::vector<Tensor>& inputs, const Fn& f, double tol = 1e-4) {
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(Var::leaf(t, true));
    backward(f(vars));
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const auto analytic = vars[k].grad_data();
        ASSERT_EQ(analytic.size(), inputs[k].size()) << "input " << k << " got no gradient";
        auto numeric = oracle::finite_difference(
            [&](const std::vector<double>& p) {
                std::vector<Var> v;
                for (std::size_t m = 0; m < inputs.size(); ++m)
                    v.push_back(Var::leaf(m == k ? Tensor(inputs[k].shape(), p) : inputs[m]));
                return f(v).value().item();
            },
            inputs[k].to_vector());
        for (std::size_t e = 0; e < numeric.size(); ++e) {
            EXPECT_LT(std::abs(analytic[e] - numeric[e]) / std::max(1.0, std::abs(analytic[e])), tol)
                << "input " << k << " element " << e;
        }
    }
}

}  // namespace

TEST(Matmul, IdentityTimesIdentity) {
    const Tensor i2 = Tensor::identity(2);
    EXPECT_TRUE(matmul(Var::leaf(i2), Var::leaf(i2)).value().bit_equal(i2));
}

TEST(Matmul, RowTimesColumn) {
    const auto r = matmul(Var::leaf(Tensor({1, 2}, {1, 2})), Var::leaf(Tensor({2, 1}, {3, 4}))).value();
    EXPECT_EQ(r.shape(), (Shape{1, 1}));
    EXPECT_EQ(r[0], 11.0);
}

TEST(Matmul, MatchesTripleLoop) {
    const Tensor a = toy::random_tensor({3, 4}, 1), b = toy::random_tensor({4, 2}, 2);
    const auto got = matmul(Var::leaf(a), Var::leaf(b)).value();
    const auto want = oracle::matmul(toy::to_mat(a), toy::to_mat(b));
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(got[i * 2 + j], want[i][j], 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    try {
        matmul(Var::leaf(Tensor({2, 3})), Var::leaf(Tensor({2, 3})));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::dimension);
        EXPECT_NE(std::string(e.what()).find("(2,3)"), std::string::npos) << e.what();
    }
}

TEST(Conv2d, OneByOneIsChannelMatmul) {
    const Tensor x = toy::random_tensor({2, 3, 4, 4}, 3), k = toy::random_tensor({5, 3, 1, 1}, 4);
    const auto y = conv2d(Var::leaf(x), Var::leaf(k), 1, 0).value();
    ASSERT_EQ(y.shape(), (Shape{2, 5, 4, 4}));
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t p = 0; p < 16; ++p)
            for (std::size_t o = 0; o < 5; ++o) {
                double s = 0.0;
                for (std::size_t c = 0; c < 3; ++c) s += x[(n * 3 + c) * 16 + p] * k[o * 3 + c];
                EXPECT_NEAR(y[(n * 5 + o) * 16 + p], s, 1e-12);
            }
}

TEST(Conv2d, OnesKernelOnConstantImage) {
    const auto y = conv2d(Var::leaf(Tensor::full({1, 1, 5, 5}, 2.5)), Var::leaf(Tensor::full({1, 1, 3, 3}, 1.0)), 1, 0)
                       .value();
    ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
    for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 9 * 2.5);
}

TEST(Conv2d, MatchesDirectOracle) {
    const Tensor x = toy::random_tensor({2, 3, 5, 5}, 5), k = toy::random_tensor({4, 3, 3, 3}, 6);
    for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 0}, {1, 1}, {2, 1}}) {
        const auto got = conv2d(Var::leaf(x), Var::leaf(k), stride, pad).value();
        std::size_t oh = 0, ow = 0;
        const auto want = oracle::conv2d(x.to_vector(), 2, 3, 5, 5, k.to_vector(), 4, 3, 3, stride, pad, oh, ow);
        ASSERT_EQ(got.shape(), (Shape{2, 4, oh, ow}));
        for (std::size_t e = 0; e < want.size(); ++e) EXPECT_NEAR(got[e], want[e], 1e-10);
    }
}

TEST(Conv2d, Errors) {
    const Var x = Var::leaf(Tensor({1, 3, 4, 4}));
    try {
        conv2d(x, Var::leaf(Tensor({2, 3, 3, 3})), 2, 0);  // (4-3)/2 not exact
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::configuration);
    }
    try {
        conv2d(x, Var::leaf(Tensor({2, 2, 3, 3})), 1, 1);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::dimension);
    }
}

TEST(Flatten, Shapes) {
    EXPECT_EQ(flatten_features(Tensor({4, 3, 2, 2})).shape(), (Shape{4, 12}));
    EXPECT_EQ(flatten_features(Tensor({4, 7})).shape(), (Shape{4, 7}));
    EXPECT_THROW(flatten_features(Tensor({4})), Error);
}

TEST(Flatten, IndexArithmetic) {
    std::vector<double> v(16);
    for (std::size_t i = 0; i < 16; ++i) v[i] = static_cast<double>(i);
    const Tensor x({2, 2, 2, 2}, v);
    const Tensor f = flatten_features(x);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t y = 0; y < 2; ++y)
                for (std::size_t xx = 0; xx < 2; ++xx)
                    EXPECT_EQ(f[n * 8 + c * 4 + y * 2 + xx], x[((n * 2 + c) * 2 + y) * 2 + xx]);
    EXPECT_TRUE(f.reshaped({2, 2, 2, 2}).bit_equal(x));
}

TEST(Backward, SumGivesOnes) {
    const Var w = Var::leaf(toy::random_tensor({3, 2}, 7), true);
    backward(sum(w));
    for (double g : w.grad_data()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, NonScalarLossRejected) {
    const Var w = Var::leaf(Tensor({2, 2}), true);
    try {
        backward(w);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::contract);
    }
}

TEST(Backward, DisconnectedGraphsStayIsolated) {
    const Var a = Var::leaf(toy::random_tensor({2}, 8), true);
    const Var b = Var::leaf(toy::random_tensor({2}, 9), true);
    const Var la = sum(a);
    const Var lb = sum(b);
    backward(la);
    EXPECT_TRUE(a.has_grad());
    EXPECT_FALSE(b.has_grad());
    (void)lb;
}

TEST(Backward, FrozenLeavesGetNoGradient) {
    const Var x = Var::leaf(toy::random_tensor({2, 3}, 10));
    const Var w = Var::leaf(toy::random_tensor({3, 2}, 11), true);
    backward(sum(relu(matmul(x, w))));
    EXPECT_TRUE(w.has_grad());
    EXPECT_FALSE(x.has_grad());
}

TEST(Backward, FrozenLayerIntoTrainableAdapter) {
    // adapter (trainable) -> frozen dense -> loss
    const Tensor x = toy::random_tensor({4, 3}, 12);
    const Tensor frozen = toy::random_tensor({5, 2}, 13);
    expect_gradients({toy::random_tensor({3, 5}, 14)}, [&](const std::vector<Var>& v) {
        const Var h = matmul(Var::leaf(x), v[0]);
        return readout(relu(matmul(h, Var::leaf(frozen))), 15);
    });
}

TEST(GradCheck, MatmulAndBias) {
    expect_gradients({toy::random_tensor({3, 4}, 20), toy::random_tensor({4, 2}, 21), toy::random_tensor({2}, 22)},
                     [](const std::vector<Var>& v) { return readout(add_bias(matmul(v[0], v[1]), v[2]), 23); });
}

TEST(GradCheck, Conv2dPaddedStrided) {
    expect_gradients({toy::random_tensor({2, 2, 5, 5}, 24), toy::random_tensor({3, 2, 3, 3}, 25),
                      toy::random_tensor({3}, 26)},
                     [](const std::vector<Var>& v) { return readout(add_bias(conv2d(v[0], v[1], 2, 1), v[2]), 27); });
}

TEST(GradCheck, ReluAndPools) {
    expect_gradients({toy::random_tensor({2, 2, 4, 4}, 28)}, [](const std::vector<Var>& v) {
        return readout(max_pool2d(relu(v[0]), 2, 2), 29);
    });
    expect_gradients({toy::random_tensor({2, 2, 4, 4}, 30)},
                     [](const std::vector<Var>& v) { return readout(avg_pool2d(v[0], 2, 2), 31); });
    expect_gradients({toy::random_tensor({1, 2, 2, 2}, 32)},
                     [](const std::vector<Var>& v) { return readout(upsample_nearest(v[0], 2, 2), 33); });
}

TEST(GradCheck, LayerNormAndTokenLinear) {
    expect_gradients({toy::random_tensor({2, 3, 4}, 34), toy::random_tensor({4}, 35), toy::random_tensor({4}, 36),
                      toy::random_tensor({4, 5}, 37)},
                     [](const std::vector<Var>& v) {
                         return readout(token_linear(layer_norm(v[0], v[1], v[2]), v[3]), 38);
                     });
}

TEST(GradCheck, BatchNormInference) {
    const Tensor mean = toy::random_tensor({3}, 39);
    const Tensor var = Tensor({3}, {0.5, 1.5, 2.0});
    expect_gradients({toy::random_tensor({2, 3, 2, 2}, 40), toy::random_tensor({3}, 41), toy::random_tensor({3}, 42)},
                     [&](const std::vector<Var>& v) {
                         return readout(batch_norm_inference(v[0], mean, var, v[1], v[2]), 43);
                     });
}

TEST(GradCheck, TokensAndCrossEntropy) {
    const std::vector<std::int32_t> labels{2, 0};
    expect_gradients({toy::random_tensor({2, 3, 2, 2}, 44)}, [&](const std::vector<Var>& v) {
        const Var tokens = spatial_to_tokens(v[0]);  // [2, 4, 3]
        return softmax_cross_entropy(mean_tokens(tokens), labels);
    });
    expect_gradients({toy::random_tensor({2, 3}, 45)},
                     [](const std::vector<Var>& v) { return readout(scale(reshape(v[0], {3, 2}), -1.5), 46); });
}

TEST(Softmax, RowsSumToOne) {
    const Tensor p = softmax(toy::random_tensor({4, 6}, 47));
    for (std::size_t r = 0; r < 4; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < 6; ++c) s += p[r * 6 + c];
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Softmax, ConfidentCorrectPredictionHasZeroLoss) {
    const Tensor logits({1, 3}, {0.0, 100.0, 0.0});
    const std::vector<std::int32_t> y{1};
    EXPECT_NEAR(softmax_cross_entropy(Var::leaf(logits), y).value().item(), 0.0, 1e-6);
}

TEST(Determinism, SameSeedSameForward) {
    const Network a = toy::random_network(toy::tiny_spec(), 3);
    const Network b = toy::random_network(toy::tiny_spec(), 3);
    const Tensor x = toy::random_tensor({4, 2, 4, 4}, 4);
    EXPECT_TRUE(a.logits(x).bit_equal(b.logits(x)));
}

TEST(Tensor, F32RoundsOnConstruction) {
    const Tensor t({1}, {0.1}, DType::f32);
    EXPECT_EQ(t[0], static_cast<double>(0.1f));
}
