#include <catch2/catch_amalgamated.hpp>

#include "repinv/rng.hpp"
#include "repinv/tensor.hpp"

using namespace repinv;

TEST_CASE("shape count and construction") {
    Tensor t({2, 3, 4});
    REQUIRE(t.count() == 24);
    REQUIRE(t.values.size() == 24);
    REQUIRE(shape_count({5}) == 5);
    REQUIRE_THROWS_AS(Tensor({2, 0}), GraphError);
    REQUIRE_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), GraphError);
}

TEST_CASE("indexing helpers address row-major storage") {
    Tensor t({2, 3});
    t.at2(1, 2) = 7.0;
    REQUIRE(t.values[5] == 7.0);
    Tensor u({2, 2, 3, 3});
    u.at4(1, 1, 2, 2) = 9.0;
    REQUIRE(u.values[2 * 2 * 3 * 3 - 1] == 9.0);
}

TEST_CASE("finite check") {
    Tensor t = Tensor::full({3}, 1.0);
    REQUIRE(t.all_finite());
    t[1] = std::numeric_limits<double>::infinity();
    REQUIRE_FALSE(t.all_finite());
}

TEST_CASE("rng determinism and distribution sanity") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next() == b.next());

    Rng r(7);
    double sum = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) sum += r.u01();
    REQUIRE(std::fabs(sum / n - 0.5) < 0.01);

    double nsum = 0.0, nsq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = r.normal();
        nsum += x;
        nsq += x * x;
    }
    REQUIRE(std::fabs(nsum / n) < 0.02);
    REQUIRE(std::fabs(nsq / n - 1.0) < 0.03);

    // uniform_int covers its range
    std::vector<int> counts(5, 0);
    for (int i = 0; i < 5000; ++i) counts[static_cast<std::size_t>(r.uniform_int(5))]++;
    for (int c : counts) REQUIRE(c > 800);
}

TEST_CASE("derive_seed separates stages") {
    REQUIRE(derive_seed(1, "a") != derive_seed(1, "b"));
    REQUIRE(derive_seed(1, "a") != derive_seed(2, "a"));
    REQUIRE(derive_seed(1, "a") == derive_seed(1, "a"));
    REQUIRE(derive_seed(1, std::uint64_t{0}) != derive_seed(1, std::uint64_t{1}));
}
