#include <catch_amalgamated.hpp>

#include "fixtures.hpp"

#include <random>

using namespace gftrees;
using namespace fixtures;
using Catch::Approx;

namespace {

Vec random_point(std::mt19937_64& rng, int D, double r)
{
    std::uniform_real_distribution<double> U(-r, r);
    Vec p(D);
    for (int i = 0; i < D; ++i) p[i] = U(rng);
    return p;
}

} // namespace

TEST_CASE("difference function of the unknot", "[family]")
{
    DifferenceField w(unknot());
    REQUIRE(w.dim() == 3);
    // F(0,-1) = 2/3, F(0,1) = -2/3
    CHECK(w.value(vec({0, -1, 1})) == Approx(4.0 / 3.0).epsilon(1e-15));
    std::mt19937_64 rng(5);
    for (int t = 0; t < 500; ++t) {
        Vec p = random_point(rng, 3, 2.0);
        Vec q = p;
        std::swap(q[1], q[2]);
        CHECK(w.value(p) == -w.value(q));
        q[2] = q[1];
        CHECK(w.value(q) == 0.0);
    }
}

TEST_CASE("pure linear family has an affine difference function", "[family]")
{
    DifferenceField w(linear());
    std::mt19937_64 rng(9);
    for (int t = 0; t < 200; ++t) {
        Vec p = random_point(rng, 3, 3.0);
        CHECK(w.value(p) == Approx(p[1] - p[2]).margin(1e-14));
        Vec g = w.gradient(p);
        CHECK(g[1] == Approx(1.0));
        CHECK(g[2] == Approx(-1.0));
    }
}

TEST_CASE("extended difference functions", "[family]")
{
    GeneratingFamily F = unknot();
    QuadraticLike Q = QuadraticLike::standard(1);
    ExtendedField w12(F, Q, 1, 2), w23(F, Q, 2, 3), w13(F, Q, 1, 3);
    CHECK(w12.dim() == 4);
    CHECK(w12.q_sign() == 1);
    CHECK(w23.q_sign() == 1);
    CHECK(w13.q_sign() == -1);
    CHECK(w12.value(vec({0, -1, 1, 0})) == Approx(4.0 / 3.0).epsilon(1e-15));
    CHECK(w13.value(vec({0, -1, 0, 1})) == Approx(4.0 / 3.0).epsilon(1e-15));
    // the Q slot enters with its sign
    CHECK(w12.value(vec({0, -1, 1, 0.5})) == Approx(4.0 / 3.0 + 0.25));
    CHECK(w13.value(vec({0, -1, 0.5, 1})) == Approx(4.0 / 3.0 - 0.25));
    CHECK_THROWS_AS(ExtendedField(F, Q, 2, 2), FamilyError);
    CHECK_THROWS_AS(ExtendedField(F, QuadraticLike::standard(2), 1, 2), FamilyError);

    auto emb = w13.embed(vec({0.1, -1, 1}));
    CHECK(emb.isApprox(vec({0.1, -1, 0, 1})));
    CHECK(w13.project(emb).isApprox(vec({0.1, -1, 1})));
}

TEST_CASE("jump identity between the three extended functions", "[family]")
{
    Layout LQ{0, 1, 1};
    QuadraticLike bumpy(Expr::parse("e1^2*(1 + 0.5*bump(e1))", LQ), vec({0.0}), box({{-2, 2}}));
    for (const GeneratingFamily& F : {unknot(), unknot_twisted(), dimple(), unknot().stabilize(-1)}) {
        for (const QuadraticLike& Q : {QuadraticLike::standard(F.N()).scaled(0.25), bumpy}) {
            if (Q.N() != F.N()) continue;
            ExtendedField w12(F, Q, 1, 2), w23(F, Q, 2, 3), w13(F, Q, 1, 3);
            std::mt19937_64 rng(17);
            double worst = 0;
            for (int t = 0; t < 1000; ++t) {
                Vec y = random_point(rng, w12.dim(), 2.5);
                worst = std::max(worst, std::abs(jump_residual(w12, w23, w13, y)));
            }
            CHECK(worst < 1e-12);
        }
    }
}

TEST_CASE("stabilization adds a decoupled square", "[family]")
{
    GeneratingFamily F = unknot();
    GeneratingFamily Fp = F.stabilize(1), Fm = F.stabilize(-1);
    CHECK(Fp.N() == 2);
    CHECK(Fp.slope().isApprox(vec({1.0, 0.0})));
    std::mt19937_64 rng(3);
    for (int t = 0; t < 200; ++t) {
        Vec p = random_point(rng, 3, 2.0);
        double base = F.value(p.head(2));
        CHECK(Fp.value(p) == Approx(base + p[2] * p[2]).margin(1e-13));
        CHECK(Fm.value(p) == Approx(base - p[2] * p[2]).margin(1e-13));
    }
    DifferenceField w(Fp);
    CHECK(w.dim() == 5);
    CHECK(w.quadratic_axes() == std::vector<int>{2, 4});
    CHECK(w.value(vec({0, -1, 0, 1, 0})) == Approx(4.0 / 3.0));
    GeneratingFamily Fpm = Fp.stabilize(-1);
    CHECK(Fpm.N() == 3);
    CHECK_THROWS_AS(F.stabilize(0), FamilyError);
}

TEST_CASE("family validation", "[family]")
{
    Layout L{1, 1, 1};
    Expr core = Expr::parse("e1^3/3", L);
    CHECK_THROWS_AS(GeneratingFamily(Base::Euclidean, 1, 1, core, vec({0.0}), box({{-1, 1}, {-1, 1}}),
                                     box({{-2, 2}, {-2, 2}})),
                    FamilyError);
    CHECK_THROWS_AS(GeneratingFamily(Base::Euclidean, 1, 1, core, vec({1.0}), box({{-1, 1}, {-1, 1}}),
                                     box({{-2, 2}, {-1, 2}})),
                    FamilyError);
    CHECK_THROWS_AS(GeneratingFamily(Base::Euclidean, 1, 1, Expr::parse("e1", {1, 2, 1}), vec({1.0}),
                                     box({{-1, 1}, {-1, 1}}), box({{-2, 2}, {-2, 2}})),
                    FamilyError);
}

TEST_CASE("fiber-preserving diffeomorphisms", "[family]")
{
    Layout L{1, 1, 1};
    GeneratingFamily F = unknot();
    GeneratingFamily Fid = F.precompose_fpd({Expr::parse("e1", L)});
    std::mt19937_64 rng(21);
    for (int t = 0; t < 200; ++t) {
        Vec p = random_point(rng, 2, 2.0);
        CHECK(Fid.value(p) == F.value(p));
        Derivatives a = Fid.differentiate(p), b = F.differentiate(p);
        CHECK(a.grad == b.grad);
        CHECK(a.hess == b.hess);
    }
    GeneratingFamily Ft = unknot_twisted();
    // F o Phi at (x, phi^{-1}(e)) equals F at (x, e); check along a few points by inverting in e
    for (double x : {-0.5, 0.0, 0.3}) {
        for (double e : {-1.0, -0.2, 0.7}) {
            double u = e;
            for (int it = 0; it < 60; ++it) {
                Mat J;
                Vec q = Ft.apply_fpd(vec({x, u}), &J);
                u -= (q[1] - e) / J(0, 0);
            }
            CHECK(Ft.value(vec({x, u})) == Approx(F.value(vec({x, e}))).epsilon(1e-13));
        }
    }
    CHECK_THROWS_AS(F.precompose_fpd({Expr::parse("e1 + 0.1*x1", L)}), FamilyError);
    CHECK_THROWS_AS(F.precompose_fpd({Expr::parse("e1 - 0.5*bump(e1/0.3)*bump(x1/0.3)", L)}), FamilyError);
    CHECK_THROWS_AS(F.precompose_fpd({Expr::parse("e1", L), Expr::parse("e1", L)}), FamilyError);
}

TEST_CASE("exterior linearity", "[family]")
{
    for (const GeneratingFamily& F : {unknot(), unknot_twisted(), dimple(), unknot().stabilize(1)})
        CHECK(exterior_linearity_defect(F, 10000) == 0.0);
}

TEST_CASE("blend annulus carries no critical points", "[family]")
{
    CHECK(blend_annulus_min_gradient(unknot(), 41) > 0.2);
    CHECK(blend_annulus_min_gradient(dimple(), 41) > 0.4);
    CHECK(blend_annulus_min_gradient(unknot_twisted(), 41) > 0.2);
}

TEST_CASE("quadratic-like functions", "[family]")
{
    Layout LQ{0, 1, 1};
    CHECK_NOTHROW(QuadraticLike(Expr::parse("e1^2*(1 + 0.5*bump(e1))", LQ), vec({0.0}), box({{-2, 2}})));
    CHECK_THROWS_AS(QuadraticLike(Expr::parse("e1^2*(1 - 2*bump(e1))", LQ), vec({0.0}), box({{-2, 2}})),
                    FamilyError);
    CHECK_THROWS_AS(QuadraticLike(Expr::parse("2*e1^2", LQ), vec({0.0}), box({{-2, 2}})), FamilyError);
    CHECK_THROWS_AS(QuadraticLike(Expr::parse("e1^2 + 0.1", LQ), vec({0.0}), box({{-2, 2}})), FamilyError);
    // rescaling: 3 * lambda * max|e|^2 must fall below rho
    CHECK(fit_q_scale(unknot(), QuadraticLike::standard(1), 4.0 / 3.0) == 0.25);
    CHECK(fit_q_scale(dimple(), QuadraticLike::standard(1), 4.0 / 3.0) == 0.125);
}

TEST_CASE("Morse-mode torus fields", "[family]")
{
    Layout L{2, 0, 1};
    Expr f = Expr::parse("cos(2*pi*x1) + 0.3*cos(2*pi*x2)", L);
    Expr g = Expr::parse("cos(2*pi*x2) + 0.3*cos(2*pi*x1)", L);
    MorseFields mf = morse_mode_fields(f, g);
    CHECK(mf.h1->periodic());
    std::mt19937_64 rng(2);
    for (int t = 0; t < 200; ++t) {
        Vec p = random_point(rng, 2, 1.0);
        CHECK(mf.h3->value(p) == Approx(mf.h1->value(p) + mf.h2->value(p)).margin(1e-14));
        Vec q = p;
        q[0] += 1.0;
        CHECK(mf.h1->value(q) == Approx(mf.h1->value(p)).margin(1e-12));
    }
    // half-lattice critical points: indices by Hessian sign count
    std::vector<int> fi, gi;
    for (double x : {0.0, 0.5})
        for (double y : {0.0, 0.5}) {
            for (auto [h, out] : {std::pair{mf.h1, &fi}, std::pair{mf.h2, &gi}}) {
                Derivatives d = h->derivatives(vec({x, y}));
                CHECK(d.grad.norm() < 1e-12);
                Eigen::SelfAdjointEigenSolver<Mat> es(d.hess);
                out->push_back(static_cast<int>((es.eigenvalues().array() < 0).count()));
            }
        }
    std::sort(fi.begin(), fi.end());
    std::sort(gi.begin(), gi.end());
    CHECK(fi == std::vector<int>{0, 1, 1, 2});
    CHECK(gi == fi);
}
