#include <catch_amalgamated.hpp>

#include "fixtures.hpp"
#include "gftrees/critical.hpp"

using namespace gftrees;
using namespace fixtures;
using Catch::Approx;

namespace {

std::vector<CriticalPoint> all_roots(const DifferenceField& w, int per_axis = 15)
{
    return find_critical_points(w, difference_search(w, per_axis, {}));
}

ExtendedField ext(const GeneratingFamily& F, int i, int j) { return ExtendedField(F, QuadraticLike::standard(F.N()), i, j); }

} // namespace

TEST_CASE("unknot difference function has one antisymmetric pair of roots", "[critical]")
{
    DifferenceField w(unknot());
    auto roots = all_roots(w);
    REQUIRE(roots.size() == 2);
    // cubic oracle: x = 0, e = -e' = -1
    CHECK(roots[0].coords.isApprox(vec({0, 1, -1}), 1e-9));
    CHECK(roots[0].value == Approx(-4.0 / 3.0).epsilon(1e-12));
    CHECK(roots[1].coords.isApprox(vec({0, -1, 1}), 1e-9));
    CHECK(roots[1].value == Approx(4.0 / 3.0).epsilon(1e-12));
    CHECK(roots[1].index == 3);
    CHECK(roots[1].grading == 2);
    CHECK(roots[1].id == "p1");
    CHECK(roots[1].eigs.isApprox(vec({-4, -2, -2}), 1e-9));
    CHECK(roots[0].index == 0);
    for (auto& c : roots) CHECK(w.gradient(c.coords).norm() < 1e-9);
}

TEST_CASE("pure linear family has no chords", "[critical]")
{
    CHECK(chords(linear()).empty());
    CHECK_THROWS_WITH(least_positive_value(chords(linear())), Catch::Matchers::ContainsSubstring("no Reeb chords"));
}

TEST_CASE("dimple family chords", "[critical]")
{
    auto cs = chords(dimple());
    REQUIRE(cs.size() == 3);
    CHECK(cs[0].coords.isApprox(vec({0, -1, 1}), 1e-9));
    CHECK(cs[0].value == Approx(4.0 / 3.0).epsilon(1e-12));
    CHECK(cs[0].grading == 1);
    double vb = 8 * std::sqrt(2.0) / 3;
    for (int k : {1, 2}) {
        CHECK(cs[k].value == Approx(vb).epsilon(1e-12));
        CHECK(cs[k].grading == 2);
        CHECK(std::abs(cs[k].coords[0]) == Approx(1.0).epsilon(1e-9));
        CHECK(cs[k].coords[1] == Approx(-std::sqrt(2.0)).epsilon(1e-9));
    }
    CHECK(cs[1].coords[0] < 0);
    CHECK(cs[2].coords[0] > 0);
}

TEST_CASE("grid doubling leaves the root set unchanged", "[critical]")
{
    for (const GeneratingFamily& F : {unknot(), dimple(), unknot_twisted()}) {
        DifferenceField w(F);
        auto a = all_roots(w, 11), b = all_roots(w, 21);
        REQUIRE(a.size() == b.size());
        for (std::size_t k = 0; k < a.size(); ++k) {
            CHECK((a[k].coords - b[k].coords).norm() < 1e-6);
            CHECK(a[k].index == b[k].index);
        }
        // antisymmetric partners
        int N = F.N(), n = F.n();
        for (auto& c : a) {
            Vec q = c.coords;
            q.segment(n, N) = c.coords.segment(n + N, N);
            q.segment(n + N, N) = c.coords.segment(n, N);
            bool partner = false;
            for (auto& d : a)
                if ((d.coords - q).norm() < 1e-6 && std::abs(d.value + c.value) < 1e-9) partner = true;
            CHECK(partner);
        }
    }
}

TEST_CASE("stabilized unknot shifts the index and keeps the grading", "[critical]")
{
    for (int sign : {1, -1}) {
        auto cs = chords(unknot().stabilize(sign));
        REQUIRE(cs.size() == 1);
        CHECK(cs[0].coords.isApprox(vec({0, -1, 0, 1, 0}), 1e-9));
        CHECK(cs[0].index == 4);
        CHECK(cs[0].grading == 2);
        CHECK(cs[0].value == Approx(4.0 / 3.0));
    }
    auto cs = chords(dimple().stabilize(1).stabilize(-1));
    REQUIRE(cs.size() == 3);
    CHECK(cs[0].grading == 1);
    CHECK(cs[1].grading == 2);
    CHECK(cs[2].grading == 2);
}

TEST_CASE("fpd twist keeps values and gradings", "[critical]")
{
    auto a = chords(unknot()), b = chords(unknot_twisted());
    REQUIRE(b.size() == 1);
    CHECK(b[0].value == Approx(a[0].value).epsilon(1e-10));
    CHECK(b[0].grading == a[0].grading);
    // the location moves by the inverse twist applied to each fiber copy
    GeneratingFamily Ft = unknot_twisted();
    Vec lhs = Ft.apply_fpd(vec({b[0].coords[0], b[0].coords[1]}));
    Vec rhs = Ft.apply_fpd(vec({b[0].coords[0], b[0].coords[2]}));
    CHECK(lhs[1] == Approx(-1.0).epsilon(1e-9));
    CHECK(rhs[1] == Approx(1.0).epsilon(1e-9));
}

TEST_CASE("extended difference function roots and iota", "[critical]")
{
    GeneratingFamily F = unknot();
    ExtendedField w13 = ext(F, 1, 3);
    auto roots = positive_part(find_critical_points(w13, {w13.search_box(), 11, {}, w13.shift(), true}));
    REQUIRE(roots.size() == 1);
    CHECK(roots[0].coords.isApprox(vec({0, -1, 0, 1}), 1e-9));
    CHECK(roots[0].index == 4);
    CHECK(roots[0].grading == 2);

    auto cs = chords(F);
    CriticalPoint a = iota(cs[0], ext(F, 1, 2));
    CHECK(a.coords.isApprox(vec({0, -1, 1, 0}), 1e-9));
    CHECK(a.index == 3);
    CHECK(a.value == cs[0].value);
    CriticalPoint b = iota(cs[0], w13);
    CHECK(b.coords.isApprox(vec({0, -1, 0, 1}), 1e-9));
    CHECK(b.index == 4);
    CHECK(b.eigs.isApprox(vec({-4, -2, -2, -2}), 1e-9));
    CriticalPoint c = iota(cs[0], ext(F, 2, 3));
    CHECK(c.coords.isApprox(vec({0, 0, -1, 1}), 1e-9));
    CHECK(c.index == 3);

    // every generator, every pair, several families
    for (const GeneratingFamily& G : {dimple(), unknot().stabilize(1), dimple().stabilize(-1), unknot_twisted()}) {
        for (auto& p : chords(G)) {
            for (auto [i, j] : {std::pair{1, 2}, std::pair{2, 3}, std::pair{1, 3}}) {
                ExtendedField e = ext(G, i, j);
                CriticalPoint q = iota(p, e);
                CHECK(q.value == p.value);
                CHECK(q.index == p.index + (j - i - 1) * G.N());
                CHECK(q.grading == p.grading);
            }
        }
    }
}

TEST_CASE("degenerate chords are rejected", "[critical]")
{
    Layout L{1, 1, 1};
    GeneratingFamily F(Base::Euclidean, 1, 1, Expr::parse("e1^3/3 + (x1^4 - 1)*e1", L), vec({1.0}),
                       box({{-1.1, 1.1}, {-1.15, 1.15}}), box({{-1.2, 1.2}, {-1.29, 1.29}}));
    CHECK_THROWS_AS(chords(F), CriticalError);
}

TEST_CASE("rho and perturbation radius", "[critical]")
{
    GeneratingFamily F = unknot();
    auto cs = chords(F);
    QuadraticLike Q = QuadraticLike::standard(1).scaled(0.25);
    ExtendedField w12(F, Q, 1, 2), w23(F, Q, 2, 3), w13(F, Q, 1, 3);
    Box K = tree_region(F);
    RhoBound b = rho_and_perturbation_bound(cs, {&w12, &w23, &w13}, K);
    CHECK(b.rho == Approx(4.0 / 3.0).epsilon(1e-12));
    CHECK(b.delta == Approx(b.rho / (4 * b.lipschitz)));
    Box K2 = K.inflate(1.3);
    RhoBound b2 = rho_and_perturbation_bound(cs, {&w12, &w23, &w13}, K2);
    CHECK(b2.lipschitz >= b.lipschitz);
    CHECK(b2.delta <= b.delta);

    std::vector<CriticalPoint> fake(3);
    double vals[] = {1.2, 0.5, 3.0};
    for (int k = 0; k < 3; ++k) fake[k].value = vals[k];
    CHECK(least_positive_value(fake) == 0.5);
}

TEST_CASE("Morse torus critical points", "[critical]")
{
    Layout L{2, 0, 1};
    MorseFields mf = morse_mode_fields(Expr::parse("cos(2*pi*x1) + 0.3*cos(2*pi*x2)", L),
                                       Expr::parse("cos(2*pi*x2) + 0.3*cos(2*pi*x1)", L));
    Box T = box({{0, 1}, {0, 1}});
    for (auto h : {mf.h1, mf.h2, mf.h3}) {
        auto cs = find_critical_points(*h, {T, 12, {}, 0, false});
        REQUIRE(cs.size() == 4);
        std::vector<int> idx;
        for (auto& c : cs) {
            idx.push_back(c.index);
            for (int i = 0; i < 2; ++i) {
                double t = c.coords[i];
                CHECK(std::min(std::abs(t), std::min(std::abs(t - 0.5), std::abs(t - 1.0))) < 1e-9);
            }
        }
        std::sort(idx.begin(), idx.end());
        CHECK(idx == std::vector<int>{0, 1, 1, 2});
    }
}
