#include <catch_amalgamated.hpp>

#include "fixtures.hpp"
#include "gftrees/trees.hpp"

using namespace gftrees;
using namespace fixtures;

namespace {

// h(x, y) + c z^2 on T^2 x R.
class QuadraticProduct : public Field {
public:
    QuadraticProduct(std::shared_ptr<const Field> h, double c) : h_(std::move(h)), c_(c) {}

    int dim() const override { return 3; }
    std::string tag() const override { return h_->tag() + "+z2"; }
    std::vector<int> periodic_axes() const override { return {0, 1}; }
    std::vector<int> quadratic_axes() const override { return {2}; }

    void jet(const double* p, int order, double* out) const override
    {
        double in[jet::stride(2, 2)];
        h_->jet(p, order, in);
        double z = p[2];
        out[0] = in[0] + c_ * z * z;
        if (order == 0) return;
        out[1] = in[1];
        out[2] = in[2];
        out[3] = 2 * c_ * z;
        if (order == 1) return;
        double* H = out + 4;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) H[i * 3 + j] = i < 2 && j < 2 ? in[3 + i * 2 + j] : 0.0;
        H[8] = 2 * c_;
    }

private:
    std::shared_ptr<const Field> h_;
    double c_;
};

struct Torus {
    MorseFields mf;
    std::array<std::shared_ptr<const Field>, 3> h;
    std::array<std::vector<CriticalPoint>, 3> crits;
    std::array<FlowSpace, 3> spaces;
    Box K;

    explicit Torus(std::array<double, 3> quad = {0, 0, 0})
    {
        Layout L{2, 0, 1};
        mf = morse_mode_fields(Expr::parse("cos(2*pi*x1) + 0.3*cos(2*pi*x2)", L),
                               Expr::parse("cos(2*pi*x2) + 0.3*cos(2*pi*x1)", L));
        std::array<std::shared_ptr<const Field>, 3> base{mf.h1, mf.h2, mf.h3};
        bool lift = quad[0] != 0;
        K = lift ? box({{0, 1}, {0, 1}, {-1, 1}}) : box({{0, 1}, {0, 1}});
        for (int k = 0; k < 3; ++k) {
            auto flat = find_critical_points(*base[k], {box({{0, 1}, {0, 1}}), 12, {}, 0, false});
            if (!lift) {
                h[k] = base[k];
                crits[k] = flat;
            } else {
                h[k] = std::make_shared<QuadraticProduct>(base[k], quad[k]);
                for (auto& c : flat) {
                    Vec p(3);
                    p << c.coords, 0.0;
                    CriticalPoint q = classify(*h[k], p, quad[k] < 0 ? 1 : 0);
                    q.id = c.id;
                    crits[k].push_back(q);
                }
            }
            spaces[k] = make_space(*h[k], K, crits[k], {});
        }
    }

    TreeProblem problem(const std::string& a, const std::string& b, const std::string& c, std::uint64_t seed) const
    {
        TreeProblem P;
        for (int k = 0; k < 3; ++k) {
            P.spaces[k] = &spaces[k];
            P.crits[k] = &crits[k];
        }
        P.ids = {a, b, c};
        P.s = draw_perturbations(K.dim(), 0.02, seed);
        P.confine = K;
        return P;
    }

    std::string at(int k, double x, double y) const
    {
        for (auto& c : crits[k])
            if (std::abs(c.coords[0] - x) < 1e-9 && std::abs(c.coords[1] - y) < 1e-9) return c.id;
        FAIL("no critical point at " << x << ", " << y);
        return {};
    }
};

// f-saddle at (0, 1/2) rises along {x = 0}; g-saddle at (1/2, 0) rises along {y = 0}. Crossing loops give one tree.
std::map<std::pair<std::string, std::string>, int> expected_counts(const Torus& T)
{
    std::string fa = T.at(0, 0, 0.5), fb = T.at(0, 0.5, 0), ga = T.at(1, 0.5, 0), gb = T.at(1, 0, 0.5);
    return {{{fa, ga}, 1}, {{fb, gb}, 1}, {{fa, gb}, 0}, {{fb, ga}, 0}};
}

} // namespace

TEST_CASE("perturbations lie in the ball and repeat per seed", "[trees]")
{
    for (std::uint64_t seed : {1ull, 2ull, 99ull}) {
        auto a = draw_perturbations(5, 0.1, seed), b = draw_perturbations(5, 0.1, seed);
        for (int k = 0; k < 3; ++k) {
            CHECK(a.s[k].norm() < 0.1);
            CHECK(a.s[k] == b.s[k]);
        }
    }
    CHECK(draw_perturbations(5, 0.1, 1).s[0] != draw_perturbations(5, 0.1, 2).s[0]);
    CHECK(draw_perturbations(3, 0.0, 1).s[2].norm() == 0.0);
}

TEST_CASE("unknown-count balance equals the expected dimension", "[trees]")
{
    Torus T;
    for (auto& a : T.crits[0])
        for (auto& b : T.crits[1])
            for (auto& c : T.crits[2]) {
                auto P = T.problem(a.id, b.id, c.id, 1);
                CHECK(tree_balance(P) == expected_dimension(P));
            }
}

TEST_CASE("residual at coincident chart centers is the chart offset", "[trees]")
{
    Torus T;
    // every field has its minimum at (1/2, 1/2): two-dimensional source charts, a point sink chart
    std::string a = T.at(0, 0.5, 0.5), b = T.at(1, 0.5, 0.5), c = T.at(2, 0.5, 0.5);
    auto P = T.problem(a, b, c, 1);
    for (auto& s : P.s.s) s.setZero();
    Vec u1(2), u2(2);
    u1 << 1, 0;
    u2 << 0.6, 0.8;
    Vec r = tree_residual(P, {u1, u2, Vec(0)}, {0.0, 0.0, 0.0});
    double r0 = T.spaces[0].tol.r0;
    Chart c1 = unstable_chart(detail::find_crit(T.crits[0], a), r0), c2 = unstable_chart(detail::find_crit(T.crits[1], b), r0);
    Vec p3 = detail::find_crit(T.crits[2], c).coords;
    Vec expect(4);
    expect << c1.p + r0 * c1.U * u1 - c2.p - r0 * c2.U * u2, c2.p + r0 * c2.U * u2 - p3;
    CHECK((r - expect).norm() < 1e-14);
    CHECK(r.norm() > 0);
}

TEST_CASE("matching residual is periodic on the torus", "[trees]")
{
    std::array<Vec, 3> q{vec({0.2, 0.3}), vec({0.25, 0.9}), vec({0.7, 0.1})};
    std::array<Vec, 3> s{vec({0.01, 0}), vec({0, -0.01}), vec({0.005, 0.005})};
    Vec r = detail::matching_residual(q, s, {0, 1});
    for (int k = 0; k < 3; ++k)
        for (int axis = 0; axis < 2; ++axis) {
            auto q2 = q;
            q2[k][axis] += 1.0;
            CHECK((detail::matching_residual(q2, s, {0, 1}) - r).norm() < 1e-12);
        }
}

TEST_CASE("nonzero expected dimension and grading mismatch are rejected", "[trees]")
{
    Torus T;
    std::string sa = T.at(0, 0, 0.5), sb = T.at(1, 0.5, 0);
    std::string min3 = T.at(2, 0.5, 0.5);
    auto P = T.problem(sa, sb, min3, 1);
    CHECK_THROWS_WITH(solve_trees(P), Catch::Matchers::ContainsSubstring("expected dimension -2"));
    CHECK_THROWS_WITH(count_trees(P), Catch::Matchers::ContainsSubstring("grading mismatch"));
}

TEST_CASE("Morse torus: trees between saddles with crossing loops", "[trees]")
{
    Torus T;
    std::string top = T.at(2, 0, 0);
    for (auto [pair, n] : expected_counts(T)) {
        auto P = T.problem(pair.first, pair.second, top, 1);
        auto trees = solve_trees(P);
        CHECK(static_cast<int>(trees.size()) % 2 == n);
        for (auto& t : trees) {
            CHECK(t.residual < P.tol.tol_match);
            CHECK(t.cond < P.tol.cond_cap);
            for (int k = 0; k < 3; ++k) {
                // the arm reaches gamma_k(0) and the perturbed end is the meeting point
                CHECK((wrap_diff(t.ends[k] + P.s.s[k] - t.y, {0, 1})).norm() < 1e-6);
                CHECK(!t.arms[k].empty());
            }
        }
    }
}

TEST_CASE("quadratic product axes do not change tree counts", "[trees]")
{
    // exactly two arms carry the z direction freely: sources with c > 0, the sink with c < 0
    for (auto quad : {std::array<double, 3>{1, 1, 1}, std::array<double, 3>{1, -1, -1}, std::array<double, 3>{-1, 0.5, -2}}) {
        Torus T(quad), flat;
        std::string top = T.at(2, 0, 0);
        for (auto [pair, n] : expected_counts(flat)) {
            auto P = T.problem(pair.first, pair.second, top, 3);
            CHECK(tree_balance(P) == 0);
            auto trees = solve_trees(P);
            CHECK(static_cast<int>(trees.size()) % 2 == n);
            for (auto& t : trees)
                for (int k = 0; k < 3; ++k)
                    for (auto& x : t.arms[k]) CHECK(inside_box(T.K, x, {0, 1}));
        }
    }
}

TEST_CASE("torus counts repeat under reseeding", "[trees]")
{
    Torus T;
    std::string top = T.at(2, 0, 0);
    for (auto [pair, n] : expected_counts(T))
        for (std::uint64_t seed : {2ull, 5ull}) {
            auto P = T.problem(pair.first, pair.second, top, seed);
            CHECK(count_trees(P) == n);
            auto a = solve_trees(P), b = solve_trees(P);
            REQUIRE(a.size() == b.size());
            for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].y == b[i].y);
        }
}
