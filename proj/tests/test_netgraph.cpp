#include <gtest/gtest.h>

#include <filesystem>

#include "toy_fleet.hpp"

using namespace restitch;
namespace fs = std::filesystem;

TEST(Params, DenseAndConvArithmetic) {
    const NetworkSpec dense("d", Signature::vector(10), 5, {LayerConfig::dense("fc", 5, false)});
    EXPECT_EQ(dense.unit(0).param_count, 55u);
    const NetworkSpec conv("c", Signature::spatial(3, 8, 8), 2, {LayerConfig::conv("c1", 8)});
    EXPECT_EQ(conv.unit(0).param_count, 224u);
}

TEST(Params, WholeNetEqualsStoreTotal) {
    for (const auto& spec : {toy::large_spec(), toy::small_spec(), toy::tiny_spec()}) {
        const auto w = init_weights(spec, 1);
        EXPECT_EQ(spec.total_params(), w.element_count());
        EXPECT_EQ(count_params(spec, 0, spec.size()), w.element_count());
        for (const auto& u : spec.units()) EXPECT_EQ(u.param_count, w.element_count(u.index, u.index + 1));
    }
}

TEST(Params, RangeSumsAreAdditive) {
    const auto spec = toy::large_spec();
    for (std::size_t a = 0; a <= spec.size(); ++a)
        for (std::size_t b = a; b <= spec.size(); ++b)
            EXPECT_EQ(count_params(spec, 0, a) + count_params(spec, a, b) + count_params(spec, b, spec.size()),
                      spec.total_params());
}

TEST(Flops, ConvFormula) {
    const NetworkSpec conv("c", Signature::spatial(3, 8, 8), 2, {LayerConfig::conv("c1", 8)});
    // multiply-adds plus one op per activated output
    EXPECT_EQ(estimate_flops(conv, 0, 1), 2u * 3 * 8 * 3 * 3 * 8 * 8 + 8 * 8 * 8);
    const NetworkSpec dense("d", Signature::vector(10), 5, {LayerConfig::dense("fc", 5, false)});
    EXPECT_EQ(estimate_flops(dense, 0, 1), 2u * 10 * 5);
}

TEST(Forward, ZeroHeadGivesZeroLogits) {
    Network net = toy::random_network(toy::tiny_spec(), 1);
    const std::size_t head = net.spec.size() - 1;
    for (std::size_t s = 0; s < net.weights.unit(head).size(); ++s) {
        const auto& t = net.weights.unit(head)[s].value;
        net.weights.set(head, s, Tensor(t.shape(), t.dtype()));
    }
    const Tensor logits = net.logits(toy::random_tensor({3, 2, 4, 4}, 2));
    EXPECT_EQ(logits.shape(), (Shape{3, 3}));
    for (double v : logits.data()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, TwoUnitDenseMatchesHandComposition) {
    const NetworkSpec spec("d2", Signature::vector(3), 2, {LayerConfig::dense("fc1", 4), LayerConfig::head()});
    const Network net = toy::random_network(spec, 5);
    const Tensor x = toy::random_tensor({1, 3}, 6);
    const auto w1 = toy::to_mat(net.weights.get(0, "weight"));
    const auto b1 = net.weights.get(0, "bias");
    const auto w2 = toy::to_mat(net.weights.get(1, "weight"));
    const auto b2 = net.weights.get(1, "bias");
    auto h = oracle::matmul(toy::to_mat(x), w1);
    for (std::size_t k = 0; k < 4; ++k) h[0][k] = std::max(0.0, h[0][k] + b1[k]);
    auto y = oracle::matmul(h, w2);
    const Tensor logits = net.logits(x);
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(logits[k], y[0][k] + b2[k], 1e-12);
}

TEST(Forward, SignatureMismatchNamesUnit) {
    const Network net = toy::random_network(toy::tiny_spec(), 1);
    try {
        net.logits(Tensor({2, 3, 4, 4}));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::dimension);
        EXPECT_NE(std::string(e.what()).find("c1"), std::string::npos) << e.what();
    }
}

TEST(Taps, PurityAndPrefixOracle) {
    const Network net = toy::random_network(toy::tiny_spec(), 7);
    const Tensor x = toy::random_tensor({3, 2, 4, 4}, 8);
    const auto all = forward_with_taps(net.spec, net.weights, x, all_units(net.spec));
    EXPECT_TRUE(all.logits.bit_equal(net.logits(x)));
    for (std::size_t m = 0; m < net.spec.size(); ++m) {
        const Network prefix = subnetwork(net, 0, m + 1, "prefix");
        EXPECT_TRUE(all.captures.at(m).bit_equal(prefix.logits(x))) << "unit " << m;
    }
    const auto none = forward_with_taps(net.spec, net.weights, x, {});
    EXPECT_TRUE(none.captures.empty());
    EXPECT_TRUE(none.logits.bit_equal(all.logits));
    // the last non-head tap is what the head consumes
    EXPECT_EQ(all.captures.at(net.spec.size() - 2).shape(), net.spec.unit(net.spec.size() - 1).in_signature.batch_shape(3));
    EXPECT_THROW(forward_with_taps(net.spec, net.weights, x, {99}), Error);
}

TEST(Split, RecomposeIsBitIdentical) {
    const Network net = toy::random_network(toy::tiny_spec(), 9);
    const Tensor x = toy::random_tensor({2, 2, 4, 4}, 10);
    for (std::size_t at = 1; at < net.spec.size(); ++at) {
        auto [pre, suf] = split(net, at);
        EXPECT_EQ(pre.spec.size(), at);
        EXPECT_EQ(pre.param_count() + suf.param_count(), net.param_count());
        EXPECT_TRUE(compose(pre, suf, "re").logits(x).bit_equal(net.logits(x)));
    }
    for (std::size_t bad : {std::size_t{0}, net.spec.size()}) {
        try {
            split(net, bad);
            FAIL();
        } catch (const Error& e) {
            EXPECT_EQ(e.kind(), ErrorKind::range);
        }
    }
}

TEST(Split, FiveUnitsAtTwo) {
    const Network net = toy::random_network(toy::tiny_spec(), 11);
    ASSERT_EQ(net.spec.size(), 5u);
    auto [pre, suf] = split(net, 2);
    EXPECT_EQ(pre.spec.unit(0).name(), "c1");
    EXPECT_EQ(pre.spec.unit(1).name(), "c2");
    EXPECT_EQ(suf.spec.size(), 3u);
    EXPECT_EQ(suf.spec.unit(0).name(), "p1");
}

TEST(Weights, RoundTripAndErrors) {
    const auto dir = toy::temp_dir("weights");
    const Network net = toy::random_network(toy::tiny_spec(), 12, DType::f32);
    save_weights(net.weights, dir / "w");
    const auto back = load_weights(dir / "w");
    EXPECT_TRUE(back.bit_equal(net.weights));
    EXPECT_EQ(back.digest(), net.weights.digest());

    try {
        load_weights(dir / "w", DType::f64);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::dtype);
    }

    fs::resize_file(dir / "w" / "u0_weight.bin", 8);
    try {
        load_weights(dir / "w");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::corruption);
    }

    fs::remove(dir / "w" / "u0_weight.bin");
    try {
        load_weights(dir / "w");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::format);
    }
    fs::remove_all(dir);
}

TEST(Spec, JsonRoundTripAndDerivedFieldCheck) {
    const auto spec = toy::large_spec();
    EXPECT_TRUE(spec_from_json(to_json(spec)) == spec);
    json j = to_json(spec);
    j["units"][1]["param_count"] = 1;
    try {
        spec_from_json(j);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::format);
    }
}

TEST(Spec, ShippedToyConfigsMatchFleet) {
    const fs::path root = RESTITCH_SOURCE_DIR;
    EXPECT_TRUE(load_spec(root / "configs" / "toy_large.json") == toy::large_spec());
    EXPECT_TRUE(load_spec(root / "configs" / "toy_small.json") == toy::small_spec());
}

TEST(Spec, TokenModel) {
    const NetworkSpec vit("vit", Signature::spatial(3, 8, 8), 4,
                          {LayerConfig::embed("embed", 12, 2), LayerConfig::token_block("b1", 24),
                           LayerConfig::token_block("b2", 24), LayerConfig::head()});
    EXPECT_EQ(vit.unit(0).out_signature, Signature::tokens(16, 12));
    const Network net = toy::random_network(vit, 3);
    EXPECT_EQ(net.logits(toy::random_tensor({2, 3, 8, 8}, 4)).shape(), (Shape{2, 4}));
    EXPECT_EQ(net.weights.element_count(), vit.total_params());
}
