#include <doctest.h>

#include <specdesk/rng.hpp>

#include <cmath>
#include <vector>

using specdesk::Rng;

TEST_CASE("identical seeds produce identical streams") {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) {
        CHECK(a.next_u64() == b.next_u64());
    }
}

TEST_CASE("different seeds diverge") {
    Rng a(1), b(2);
    int same = 0;
    for (int i = 0; i < 64; ++i) {
        same += a.next_u64() == b.next_u64();
    }
    CHECK(same == 0);
}

TEST_CASE("uniform stays in [0,1) with sane mean") {
    Rng r(7);
    double sum = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const double u = r.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        sum += u;
    }
    CHECK(std::abs(sum / n - 0.5) < 0.01);
}

TEST_CASE("below is unbiased over small ranges") {
    Rng r(11);
    std::vector<int> counts(5, 0);
    const int n = 50000;
    for (int i = 0; i < n; ++i) {
        counts[r.below(5)]++;
    }
    for (int c : counts) {
        CHECK(std::abs(c - n / 5) < n / 50);
    }
}

TEST_CASE("normal has zero mean unit variance") {
    Rng r(3);
    double sum = 0.0, sq = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double x = r.normal();
        sum += x;
        sq += x * x;
    }
    CHECK(std::abs(sum / n) < 0.02);
    CHECK(std::abs(sq / n - 1.0) < 0.02);
}

TEST_CASE("shuffle is deterministic per seed") {
    std::vector<int> a{1, 2, 3, 4, 5, 6, 7, 8}, b = a;
    Rng ra(9), rb(9);
    ra.shuffle(a);
    rb.shuffle(b);
    CHECK(a == b);
}

TEST_CASE("fork with different tags gives independent streams") {
    Rng base(5);
    Rng a = base.fork("init");
    Rng b = base.fork("shuffle");
    CHECK(a.next_u64() != b.next_u64());
    Rng a2 = base.fork("init");
    CHECK(a2.next_u64() == Rng(5).fork("init").next_u64());
}
