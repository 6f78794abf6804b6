#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "tryflow/posindex.hpp"
#include "tryflow/rng.hpp"

using namespace tryflow;

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

TEST_CASE("target-only index enumerates row-major") {
    const auto idx = build_position_index({2, 2, 0}, {});
    REQUIRE(idx.size() == 4);
    CHECK(idx[0] == PosEntry{0, 0, 0});
    CHECK(idx[1] == PosEntry{0, 0, 1});
    CHECK(idx[2] == PosEntry{0, 1, 0});
    CHECK(idx[3] == PosEntry{0, 1, 1});
}

TEST_CASE("same-resolution condition keeps integer coordinates") {
    const auto idx = build_position_index({2, 2, 0}, {{2, 2, 2}});
    REQUIRE(idx.size() == 8);
    CHECK(idx[4] == PosEntry{2, 0, 0});
    CHECK(idx[5] == PosEntry{2, 0, 1});
    CHECK(idx[6] == PosEntry{2, 1, 0});
    CHECK(idx[7] == PosEntry{2, 1, 1});
}

TEST_CASE("higher-resolution condition rescales by the resolution ratio") {
    const auto idx = build_position_index({2, 2, 0}, {{4, 4, 2}});
    REQUIRE(idx.size() == 4 + 16);
    // ratio 2/4 = 0.5 on each axis -> coordinates {0, 0.5, 1.0, 1.5}
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) {
            const PosEntry& e = idx[static_cast<size_t>(4 + r * 4 + c)];
            CHECK(e.id == 2);
            CHECK(e.row == r * 0.5);
            CHECK(e.col == c * 0.5);
        }
}

TEST_CASE("channel-0 ids are copied verbatim and never rescaled") {
    const auto idx = build_position_index({4, 4, 0}, {{2, 2, 1}, {8, 8, 3}});
    for (const auto& e : idx.entries) CHECK((e.id == 0 || e.id == 1 || e.id == 3));
    // id-1 at half resolution: coordinates scale by 2.
    CHECK(idx[16 + 3] == PosEntry{1, 2.0, 2.0});
}

TEST_CASE("index construction rejections") {
    CHECK_THROWS_AS(build_position_index({2, 2, 1}, {}), std::invalid_argument);
    CHECK_THROWS_AS(build_position_index({0, 2, 0}, {}), std::invalid_argument);
    CHECK_THROWS_AS(build_position_index({2, 2, 0}, {{2, 2, 2}, {2, 2, 2}}),
                    std::invalid_argument);
    CHECK_THROWS_AS(build_position_index({2, 2, 0}, {{2, 0, 2}}), std::invalid_argument);
    CHECK_THROWS_AS(build_position_index({2, 2, 0}, {{2, 2, 0}}), std::invalid_argument);
    CHECK_THROWS_AS(build_position_index({2, 2, 0}, {{2, 2, 4}}), std::invalid_argument);
}

TEST_CASE("index determinism is bit-exact") {
    const auto a = build_position_index({3, 5, 0}, {{6, 10, 1}, {3, 5, 2}});
    const auto b = build_position_index({3, 5, 0}, {{6, 10, 1}, {3, 5, 2}});
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("rescaling consistency for integer factors") {
    for (int f : {1, 2, 4}) {
        const GridSpec target{4, 4, 0};
        const GridSpec cond{4 * f, 4 * f, 2};
        const auto idx = build_position_index(target, {cond});
        for (int r = 0; r < target.rows; ++r)
            for (int c = 0; c < target.cols; ++c) {
                const size_t pos =
                    static_cast<size_t>(16 + (r * f) * cond.cols + (c * f));
                CHECK(idx[pos].row == static_cast<double>(r));
                CHECK(idx[pos].col == static_cast<double>(c));
            }
    }
}

TEST_CASE("rope table schedule") {
    const auto t = rope_table(4, 10000.0);
    CHECK(t.angle(0, 0.0) == 0.0);
    CHECK(t.angle(1, 0.0) == 0.0);
    CHECK(rope_table(2, 10000.0).angle(0, 1.0) == doctest::Approx(1.0).epsilon(1e-15));
    // dim 4, base 100, position 2, k=1 -> 2 * 100^(-1/2) = 0.2
    CHECK(rope_table(4, 100.0).angle(1, 2.0) == doctest::Approx(0.2).epsilon(1e-12));
    for (size_t k = 1; k < t.freqs.size(); ++k) CHECK(t.freqs[k] < t.freqs[k - 1]);
    CHECK_THROWS_AS(rope_table(3, 10000.0), std::invalid_argument);
    CHECK_THROWS_AS(rope_table(4, 1.0), std::invalid_argument);
}

namespace {

MatX<double> random_tokens(int n, int w, Rng& rng) {
    MatX<double> m(n, w);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < w; ++j) m(i, j) = rng.normal();
    return m;
}

}  // namespace

TEST_CASE("rope identity at zero coordinates") {
    Rng rng(11);
    MatX<double> tokens = random_tokens(5, 12, rng);
    PositionIndex idx;
    for (int i = 0; i < 5; ++i) idx.entries.push_back({0, 0.0, 0.0});
    const auto out = apply_rope<double>(tokens, idx, rope_table(4, 10000.0));
    CHECK((out - tokens).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("quarter turn swaps components with sign flip") {
    MatX<double> tokens = MatX<double>::Zero(1, 6);
    tokens(0, 2) = 1.0;  // first row-axis pair, x component
    PositionIndex idx;
    idx.entries.push_back({0, M_PI_2, 0.0});  // angle pi/2 at k=0 (freq 1)
    const auto out = apply_rope<double>(tokens, idx, rope_table(2, 10000.0));
    CHECK(out(0, 2) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(out(0, 3) == doctest::Approx(1.0).epsilon(1e-15));
    // And a unit y-vector goes to -x.
    MatX<double> t2 = MatX<double>::Zero(1, 6);
    t2(0, 3) = 1.0;
    const auto out2 = apply_rope<double>(t2, idx, rope_table(2, 10000.0));
    CHECK(out2(0, 2) == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(std::fabs(out2(0, 3)) < 1e-15);
}

TEST_CASE("rope matches an explicit rotation-matrix oracle on an 8-wide token") {
    Rng rng(42);
    MatX<double> tokens = random_tokens(1, 8, rng);
    PositionIndex idx;
    idx.entries.push_back({1, 2.0, 3.0});
    const auto table = rope_table(2, 10000.0);
    const auto out = apply_rope<double>(tokens, idx, table);

    // Oracle: independent 2x2 rotation per axis block, passthrough after.
    Eigen::VectorXd expect = tokens.row(0);
    const double coords[3] = {1.0, 2.0, 3.0};
    for (int axis = 0; axis < 3; ++axis) {
        const double a = coords[axis] * 1.0;  // k=0 frequency is base^0 = 1
        Eigen::Matrix2d rot;
        rot << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
        expect.segment(2 * axis, 2) = rot * expect.segment(2 * axis, 2);
    }
    for (int j = 0; j < 8; ++j) CHECK(out(0, j) == doctest::Approx(expect(j)).epsilon(1e-12));
}

TEST_CASE("rope rejects tokens narrower than the block layout") {
    MatX<double> tokens = MatX<double>::Zero(1, 4);
    PositionIndex idx;
    idx.entries.push_back({0, 0.0, 0.0});
    CHECK_THROWS_AS(apply_rope<double>(tokens, idx, rope_table(2, 10000.0)),
                    std::invalid_argument);
    MatX<double> two = MatX<double>::Zero(2, 6);
    CHECK_THROWS_AS(apply_rope<double>(two, idx, rope_table(2, 10000.0)), std::invalid_argument);
}

TEST_CASE("rope preserves norms") {
    Rng rng(7);
    const auto table = rope_table(4, 10000.0);
    MatX<double> tokens = random_tokens(1000, 12, rng);
    PositionIndex idx;
    for (int i = 0; i < 1000; ++i)
        idx.entries.push_back({rng.uniform_int(4), rng.uniform(0, 31), rng.uniform(0, 31)});
    const auto out = apply_rope<double>(tokens, idx, table);
    for (int i = 0; i < 1000; ++i)
        CHECK(std::fabs(out.row(i).norm() - tokens.row(i).norm()) <= 1e-10);
}

TEST_CASE("rope dot products depend only on per-axis offsets") {
    Rng rng(19);
    const auto table = rope_table(4, 10000.0);
    for (int trial = 0; trial < 100; ++trial) {
        MatX<double> q = random_tokens(1, 12, rng);
        MatX<double> k = random_tokens(1, 12, rng);
        const PosEntry p1{1, rng.uniform(0, 10), rng.uniform(0, 10)};
        const PosEntry p2{2, rng.uniform(0, 10), rng.uniform(0, 10)};
        const double did = rng.uniform_int(2), drow = rng.uniform(0, 5), dcol = rng.uniform(0, 5);

        auto dots = [&](const PosEntry& a, const PosEntry& b) {
            PositionIndex ia, ib;
            ia.entries.push_back(a);
            ib.entries.push_back(b);
            const auto qa = apply_rope<double>(q, ia, table);
            const auto kb = apply_rope<double>(k, ib, table);
            return qa.row(0).dot(kb.row(0));
        };
        const double base = dots(p1, p2);
        const PosEntry p1s{static_cast<int>(p1.id + did), p1.row + drow, p1.col + dcol};
        const PosEntry p2s{static_cast<int>(p2.id + did), p2.row + drow, p2.col + dcol};
        CHECK(std::fabs(dots(p1s, p2s) - base) <= 1e-9);
    }
}
