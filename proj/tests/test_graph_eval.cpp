#include <catch2/catch_amalgamated.hpp>

#include "repinv/eval.hpp"
#include "repinv/graph.hpp"
#include "test_util.hpp"

using namespace repinv;
using repinv::testutil::random_tensor;

namespace {

Tensor image(std::int64_t h, std::int64_t w, std::vector<double> v) {
    return Tensor({1, 1, h, w}, std::move(v));
}

}  // namespace

TEST_CASE("identity kernel convolution reproduces the input") {
    Graph g;
    const int x = g.input("x", {1, 1, 4, 4});
    const int w = g.param("w", {1, 1, 3, 3}, 9, 9);
    const int y = g.conv2d(x, w, Pad::Same);
    g.mark_output("y", y);

    std::vector<Tensor> params{Tensor({1, 1, 3, 3})};
    params[0].values[4] = 1.0;  // center tap
    Rng rng(3);
    Tensor xin = random_tensor({1, 1, 4, 4}, rng);
    auto ev = eval(g, params, {{"x", xin}}, Mode::Infer, 0);
    REQUIRE(ev.value(y).values == xin.values);
}

TEST_CASE("all-ones valid convolution sums its window") {
    Graph g;
    const int x = g.input("x", {1, 1, 4, 4});
    const int w = g.param("w", {1, 1, 2, 2}, 4, 4);
    const int y = g.conv2d(x, w, Pad::Valid);
    g.mark_output("y", y);

    std::vector<Tensor> params{Tensor::full({1, 1, 2, 2}, 1.0)};
    auto ev = eval(g, params, {{"x", Tensor::full({1, 1, 4, 4}, 1.0)}}, Mode::Infer, 0);
    REQUIRE(ev.value(y).shape == Shape{1, 1, 3, 3});
    for (double v : ev.value(y).values) REQUIRE(v == 4.0);
}

TEST_CASE("28x28 through 5x5 valid conv and 2x2 pool lands at 12x12") {
    Graph g;
    const int x = g.input("x", {1, 1, 28, 28});
    const int w = g.param("w", {1, 1, 5, 5}, 25, 25);
    const int y = g.max_pool2(g.conv2d(x, w, Pad::Valid));
    g.mark_output("y", y);
    REQUIRE(g.shape_of(y) == Shape{1, 1, 12, 12});
}

TEST_CASE("ceil-mode pooling handles odd extents and degenerate 1x1 maps") {
    Graph g;
    const int x = g.input("x", {1, 1, 5, 5});
    const int p = g.max_pool2(x);
    REQUIRE(g.shape_of(p) == Shape{1, 1, 3, 3});

    Graph g2;
    const int x2 = g2.input("x", {1, 2, 1, 1});
    const int p2 = g2.max_pool2(x2);
    g2.mark_output("y", p2);
    auto ev = eval(g2, {}, {{"x", Tensor({1, 2, 1, 1}, {3.0, -4.0})}}, Mode::Infer, 0);
    REQUIRE(ev.value(p2).values == std::vector<double>{3.0, -4.0});
}

TEST_CASE("max pooling picks window maxima") {
    Graph g;
    const int x = g.input("x", {1, 1, 2, 4});
    const int p = g.max_pool2(x);
    g.mark_output("y", p);
    auto ev = eval(g, {}, {{"x", image(2, 4, {1, 5, 2, 0, 3, -1, 7, 7})}}, Mode::Infer, 0);
    REQUIRE(ev.value(p).values == std::vector<double>{5.0, 7.0});
}

TEST_CASE("global max pool reduces spatial dims") {
    Graph g;
    const int x = g.input("x", {1, 2, 2, 2});
    const int p = g.global_max_pool(x);
    g.mark_output("y", p);
    auto ev =
        eval(g, {}, {{"x", Tensor({1, 2, 2, 2}, {1, 2, 3, 0, -5, -2, -9, -7})}}, Mode::Infer, 0);
    REQUIRE(ev.value(p).values == std::vector<double>{3.0, -2.0});
}

TEST_CASE("affine computes x*W + b") {
    Graph g;
    const int x = g.input("x", {2, 2});
    const int w = g.param("w", {2, 3}, 2, 3);
    const int b = g.param("b", {3}, 0, 0);
    const int y = g.affine(x, w, b);
    g.mark_output("y", y);
    std::vector<Tensor> params{Tensor({2, 3}, {1, 2, 3, 4, 5, 6}), Tensor({3}, {10, 20, 30})};
    auto ev = eval(g, params, {{"x", Tensor({2, 2}, {1, 1, 2, 0})}}, Mode::Infer, 0);
    REQUIRE(ev.value(y).values == std::vector<double>{15, 27, 39, 12, 24, 36});
}

TEST_CASE("dropout is inactive in infer mode and scaled in train mode") {
    Graph g;
    const int x = g.input("x", {1, 64});
    const int d = g.dropout(x, 0.5);
    g.mark_output("y", d);
    Tensor xin = Tensor::full({1, 64}, 1.0);

    auto inf = eval(g, {}, {{"x", xin}}, Mode::Infer, 1);
    REQUIRE(inf.value(d).values == xin.values);

    auto tr = eval(g, {}, {{"x", xin}}, Mode::Train, 1);
    int zeros = 0;
    for (double v : tr.value(d).values) {
        REQUIRE((v == 0.0 || v == 2.0));
        zeros += v == 0.0;
    }
    REQUIRE(zeros > 10);
    REQUIRE(zeros < 54);

    auto tr2 = eval(g, {}, {{"x", xin}}, Mode::Train, 1);
    REQUIRE(tr2.value(d).values == tr.value(d).values);  // same seed, same mask
    auto tr3 = eval(g, {}, {{"x", xin}}, Mode::Train, 2);
    REQUIRE(tr3.value(d).values != tr.value(d).values);
}

TEST_CASE("train-mode dropout expectation matches infer output") {
    // inverted scaling: E[mask] = 1, checked over 1e4 seeds at 3 standard errors
    Graph g;
    const int x = g.input("x", {1, 8});
    const int d = g.dropout(x, 0.3);
    g.mark_output("y", d);
    Tensor xin({1, 8}, {1, -2, 3, 0.5, 4, -1, 2, 1});
    const int n = 10000;
    std::vector<double> mean(8, 0.0);
    for (int s = 0; s < n; ++s) {
        auto ev = eval(g, {}, {{"x", xin}}, Mode::Train, static_cast<std::uint64_t>(s));
        for (int j = 0; j < 8; ++j) mean[static_cast<std::size_t>(j)] += ev.value(d)[j];
    }
    // per-element variance of mask*x is x^2 * r/(1-r)
    for (int j = 0; j < 8; ++j) {
        const double m = mean[static_cast<std::size_t>(j)] / n;
        const double se = std::fabs(xin[j]) * std::sqrt(0.3 / 0.7 / n);
        REQUIRE(std::fabs(m - xin[j]) <= 3.0 * se + 1e-12);
    }
}

TEST_CASE("resize nearest doubles pixels exactly") {
    Graph g;
    const int x = g.input("x", {1, 1, 2, 2});
    const int r = g.resize_nearest(x, 4, 4);
    g.mark_output("y", r);
    auto ev = eval(g, {}, {{"x", image(2, 2, {1, 2, 3, 4})}}, Mode::Infer, 0);
    REQUIRE(ev.value(r).values ==
            std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
}

TEST_CASE("log softmax rows sum to one in probability space") {
    Graph g;
    const int x = g.input("x", {2, 4});
    const int y = g.log_softmax(x);
    g.mark_output("y", y);
    Rng rng(5);
    auto ev = eval(g, {}, {{"x", random_tensor({2, 4}, rng, -3, 3)}}, Mode::Infer, 0);
    for (int r = 0; r < 2; ++r) {
        double s = 0.0;
        for (int k = 0; k < 4; ++k) s += std::exp(ev.value(y).at2(r, k));
        REQUIRE_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
}

TEST_CASE("xent_rows equals negative log softmax at the label") {
    Graph g;
    const int x = g.input("x", {2, 3});
    const int labels = g.input("labels", {2});
    const int ls = g.log_softmax(x);
    const int xe = g.xent_rows(x, labels);
    g.mark_output("ls", ls);
    g.mark_output("xe", xe);
    Rng rng(9);
    Tensor logits = random_tensor({2, 3}, rng, -2, 2);
    Tensor lab({2}, {2, 0});
    auto ev = eval(g, {}, {{"x", logits}, {"labels", lab}}, Mode::Infer, 0);
    REQUIRE_THAT(ev.value(xe)[0], Catch::Matchers::WithinAbs(-ev.value(ls).at2(0, 2), 1e-12));
    REQUIRE_THAT(ev.value(xe)[1], Catch::Matchers::WithinAbs(-ev.value(ls).at2(1, 0), 1e-12));

    Tensor bad({2}, {3, 0});  // out of range
    REQUIRE_THROWS_AS(eval(g, {}, {{"x", logits}, {"labels", bad}}, Mode::Infer, 0), GraphError);
}

TEST_CASE("structured errors name the node") {
    Graph g;
    const int x = g.input("x", {1, 4});
    g.mark_output("y", g.relu(x));
    try {
        eval(g, {}, {{"x", Tensor({1, 4}, {1, 2, std::nan(""), 4})}}, Mode::Infer, 0);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        REQUIRE(std::string(e.what()).find("#0:input(x)") != std::string::npos);
    }

    REQUIRE_THROWS_AS(eval(g, {}, {}, Mode::Infer, 0), GraphError);  // unbound input
    REQUIRE_THROWS_AS(eval(g, {}, {{"x", Tensor({2, 4})}}, Mode::Infer, 0), GraphError);
}

TEST_CASE("build-time shape validation") {
    Graph g;
    const int x = g.input("x", {1, 1, 4, 4});
    const int w = g.param("w", {1, 2, 3, 3}, 1, 1);  // channel mismatch
    REQUIRE_THROWS_AS(g.conv2d(x, w, Pad::Same), GraphError);
    const int w2 = g.param("w2", {1, 1, 6, 6}, 1, 1);
    REQUIRE_THROWS_AS(g.conv2d(x, w2, Pad::Valid), GraphError);  // kernel larger than input
    const int a = g.input("a", {2, 3});
    const int b = g.input("b", {3, 2});
    REQUIRE_THROWS_AS(g.add(a, b), GraphError);
    REQUIRE_THROWS_AS(g.reshape(a, {7}), GraphError);
}

TEST_CASE("unused parameter slots are rejected by validate") {
    Graph g;
    const int x = g.input("x", {1, 2});
    g.param("w", {2, 2}, 2, 2);
    g.mark_output("y", g.relu(x));
    REQUIRE_THROWS_AS(g.validate(), GraphError);
}

TEST_CASE("sample_categorical draws roughly uniform values from zero logits") {
    Graph g;
    const int logits = g.input("logits", {1, 2, 2, 2});  // C=1, L=2, 2x2
    const int s = g.sample_categorical(logits, 2);
    g.mark_output("s", s);
    Tensor zeros({1, 2, 2, 2});
    double mean[4] = {0, 0, 0, 0};
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        auto ev = eval(g, {}, {{"logits", zeros}}, Mode::Infer, static_cast<std::uint64_t>(i));
        for (int p = 0; p < 4; ++p) mean[p] += ev.value(s)[p];
    }
    for (int p = 0; p < 4; ++p) {
        REQUIRE(mean[p] / n > 0.48);
        REQUIRE(mean[p] / n < 0.52);
    }
    // identical seeds give identical draws
    auto a = eval(g, {}, {{"logits", zeros}}, Mode::Infer, 42);
    auto b = eval(g, {}, {{"logits", zeros}}, Mode::Infer, 42);
    REQUIRE(a.value(s).values == b.value(s).values);
}

TEST_CASE("determinism: identical graph, inputs and seed give bitwise outputs") {
    Graph g;
    const int x = g.input("x", {2, 1, 6, 6});
    const int w = g.param("w", {3, 1, 3, 3}, 9, 27);
    const int c = g.conv2d(x, w, Pad::Same);
    const int d = g.dropout(g.relu(c), 0.4);
    const int m = g.mean(d);
    g.mark_output("m", m);
    auto params = init_params(g, 11);
    Rng rng(2);
    Tensor xin = random_tensor({2, 1, 6, 6}, rng);
    auto e1 = eval(g, params, {{"x", xin}}, Mode::Train, 77);
    auto e2 = eval(g, params, {{"x", xin}}, Mode::Train, 77);
    REQUIRE(e1.value(m).values == e2.value(m).values);
    auto g1 = backward(g, e1, m);
    auto g2 = backward(g, e2, m);
    for (std::size_t i = 0; i < g1.size(); ++i) REQUIRE(g1[i].values == g2[i].values);
}
