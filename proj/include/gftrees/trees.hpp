#pragma once

// Y-shaped flow trees: two half-infinite lines out of sources p1, p2 and one into a sink p0,
// with perturbed endpoints meeting at a point.

#include "gftrees/flow.hpp"

#include <tbb/parallel_for.h>

#include <array>
#include <cstdint>
#include <random>

namespace gftrees {

class TreeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TreeTolerances {
    double tol_match = 1e-8;
    double fd_step = 1e-5;
    double dedup = 1e-4;
    double cond_cap = 1e8;
    int newton_iters = 40;
    int max_seeds = 48;
    double seed_radius = 0.3; // largest cloud residual worth refining
    double seed_skip = 0.02;  // seeds whose cloud meeting points are this close share one refinement
    double cloud_dt = 0.01;
    int sphere_density = 16;
    std::size_t max_combos = 4000000;
};

struct PerturbationTriple {
    std::array<Vec, 3> s;
    std::uint64_t seed = 0;
    double bound = 0.0;
};

// Uniform in the open ball of radius bound, from raw generator bits so runs repeat across platforms.
inline PerturbationTriple draw_perturbations(int D, double bound, std::uint64_t seed)
{
    PerturbationTriple out;
    out.seed = seed;
    out.bound = bound;
    std::mt19937_64 rng(seed);
    auto unit = [&] { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
    for (auto& s : out.s) {
        s = Vec::Zero(D);
        if (bound <= 0.0 || D == 0) continue;
        do {
            for (int i = 0; i < D; ++i) s[i] = bound * (2.0 * unit() - 1.0);
        } while (s.norm() >= bound);
    }
    return out;
}

struct TreeProblem {
    // arm 0: source of h1, arm 1: source of h2, arm 2: sink of h3
    std::array<const FlowSpace*, 3> spaces{};
    std::array<const std::vector<CriticalPoint>*, 3> crits{};
    std::array<std::string, 3> ids;
    PerturbationTriple s;
    Box confine;               // K'
    std::optional<double> rho; // enables the rho/4 check on the sink arm
    TreeTolerances tol;
};

struct FlowTree {
    std::array<std::vector<Vec>, 3> arms; // samples, critical point first for sources, last for the sink
    std::array<Vec, 3> ends;              // gamma_k(0)
    Vec y;                                // meeting point
    double residual = 0.0;
    double cond = 0.0;
};

namespace detail {

inline const CriticalPoint& find_crit(const std::vector<CriticalPoint>& cs, const std::string& id)
{
    for (auto& c : cs)
        if (c.id == id) return c;
    throw TreeError("unknown critical point " + id);
}

// (q1 + s1 - q2 - s2, q2 + s2 - q3 - s3), wrapped on periodic axes.
inline Vec matching_residual(const std::array<Vec, 3>& q, const std::array<Vec, 3>& s, const std::vector<int>& periodic)
{
    int D = static_cast<int>(q[0].size());
    Vec r(2 * D);
    r.head(D) = wrap_diff(q[0] + s[0] - q[1] - s[1], periodic);
    r.tail(D) = wrap_diff(q[1] + s[1] - q[2] - s[2], periodic);
    return r;
}

} // namespace detail

// Residual of the full matching system at chart coordinates (u_k, t_k).
inline Vec tree_residual(const TreeProblem& P, const std::array<Vec, 3>& u, const std::array<double, 3>& t)
{
    std::array<Vec, 3> q;
    for (int k = 0; k < 3; ++k) {
        const CriticalPoint& c = detail::find_crit(*P.crits[k], P.ids[k]);
        Chart ch = k < 2 ? unstable_chart(c, P.spaces[k]->tol.r0) : stable_chart(c, P.spaces[k]->tol.r0);
        q[k] = ch.dim() == 0 ? c.coords : chart_point(*P.spaces[k], ch, u[k], t[k]).end;
    }
    return detail::matching_residual(q, P.s.s, P.spaces[0]->periodic);
}

// Unknowns minus equations of the full system; equals |p0| - |p1| - |p2|.
inline int tree_balance(const TreeProblem& P)
{
    const CriticalPoint& a = detail::find_crit(*P.crits[0], P.ids[0]);
    const CriticalPoint& b = detail::find_crit(*P.crits[1], P.ids[1]);
    const CriticalPoint& c = detail::find_crit(*P.crits[2], P.ids[2]);
    return a.coindex() + b.coindex() + c.index - 2 * a.dim();
}

inline int expected_dimension(const TreeProblem& P)
{
    return detail::find_crit(*P.crits[2], P.ids[2]).grading - detail::find_crit(*P.crits[0], P.ids[0]).grading -
           detail::find_crit(*P.crits[1], P.ids[1]).grading;
}

namespace detail {

enum class AxisKind { Solved, Pinned, Free };

// One arm restricted to the non-quadratic axes of its field.
struct Arm {
    SplitSpace split;
    std::vector<int> keep; // restricted axis -> full axis
    std::vector<double> coef; // quadratic coefficient per full axis (0 if not quadratic)
    CriticalPoint crit;       // restricted
    Chart chart;
    bool open = false;
    int role = 1; // +1 source, -1 sink
    std::vector<AxisKind> kind;
    std::vector<int> local; // full axis -> restricted axis or -1

    int params() const { return open ? 0 : chart.dim(); }
    const FlowSpace& space() const { return split.space; }
};

inline Arm make_arm(const FlowSpace& S, const std::vector<CriticalPoint>& crits, const std::string& id, int role)
{
    Arm a;
    a.role = role;
    a.split = split_space(S, crits);
    int D = S.field->dim();
    a.local.assign(D, -1);
    a.coef.assign(D, 0.0);
    if (a.split.field) a.keep = a.split.field->keep();
    else {
        a.keep.resize(D);
        std::iota(a.keep.begin(), a.keep.end(), 0);
    }
    for (int r = 0; r < static_cast<int>(a.keep.size()); ++r) a.local[a.keep[r]] = r;
    a.crit = find_crit(a.split.crits, id);
    const CriticalPoint& full = find_crit(crits, id);
    Derivatives d = S.field->derivatives(full.coords);
    for (int i = 0; i < D; ++i)
        if (a.local[i] < 0) a.coef[i] = 0.5 * d.hess(i, i);
    double r0 = S.tol.r0;
    a.chart = role > 0 ? unstable_chart(a.crit, r0) : stable_chart(a.crit, r0);
    a.open = a.chart.dim() == a.crit.dim() && a.crit.dim() > 0;
    a.kind.resize(D);
    for (int i = 0; i < D; ++i) {
        if (a.local[i] >= 0) a.kind[i] = a.open ? AxisKind::Free : AxisKind::Solved;
        else a.kind[i] = role * a.coef[i] > 0 ? AxisKind::Free : AxisKind::Pinned;
    }
    return a;
}

// Endpoint of a non-open arm at chart coordinates v, restricted coordinates.
inline std::optional<Vec> arm_end(const Arm& a, const Vec& v, Trajectory* keep = nullptr)
{
    if (a.chart.dim() == 0) {
        if (keep) {
            keep->samples = {a.crit.coords};
            keep->times = {0.0};
        }
        return a.crit.coords;
    }
    Trajectory tr = chart_eval(a.space(), a.chart, v, keep != nullptr);
    if (tr.verdict != Verdict::Time) return std::nullopt;
    if (keep) *keep = tr;
    return tr.end;
}

struct CloudPoint {
    Vec v;
    Vec x;
};

// Samples of the arm's invariant manifold in chart coordinates.
inline std::vector<CloudPoint> arm_cloud(const Arm& a, const TreeTolerances& tol)
{
    int c = a.chart.dim();
    if (c == 0) return {{Vec(0), a.crit.coords}};
    auto dirs = sphere_samples(c, tol.sphere_density);
    FlowSpace S = a.space();
    S.tol.sample_dt = tol.cloud_dt;
    std::vector<std::vector<CloudPoint>> per(dirs.size());
    tbb::parallel_for(std::size_t(0), dirs.size(), [&](std::size_t k) {
        const Vec& u = dirs[k];
        for (double s : {0.25, 0.5, 0.75}) per[k].push_back({Vec(s * u), Vec(a.chart.p + a.chart.r0 * (a.chart.U * (s * u)))});
        FlowRequest rq;
        rq.dir = a.chart.dir;
        rq.record = true;
        Trajectory tr = integrate(S, a.chart.p + a.chart.r0 * (a.chart.U * u), rq);
        for (std::size_t i = 0; i < tr.samples.size(); ++i) {
            if (!S.inside(tr.samples[i])) break;
            per[k].push_back({Vec(u * chart_radius(a.chart, tr.times[i])), tr.samples[i]});
        }
    });
    std::vector<CloudPoint> out{{Vec::Zero(c), a.crit.coords}};
    for (auto& p : per) out.insert(out.end(), p.begin(), p.end());
    return out;
}

} // namespace detail

// Reduced matching system over the arms' own coordinates.
class TreeSystem {
public:
    explicit TreeSystem(const TreeProblem& P) : P_(P)
    {
        D_ = P.spaces[0]->field->dim();
        periodic_ = P.spaces[0]->periodic;
        for (int k = 0; k < 3; ++k) {
            if (P.spaces[k]->field->dim() != D_) throw TreeError("tree fields live on different spaces");
            arms_[k] = detail::make_arm(*P.spaces[k], *P.crits[k], P.ids[k], k < 2 ? 1 : -1);
        }
        for (int k = 0; k < 3; ++k) {
            offset_[k] = np_;
            np_ += arms_[k].params();
        }
        for (int i = 0; i < D_; ++i) {
            int solved = 0;
            for (int k = 0; k < 3; ++k)
                if (arms_[k].kind[i] != detail::AxisKind::Free) ++solved;
            if (solved == 0) ++open_axes_;
            else ne_ += solved - 1;
        }
    }

    int unknowns() const { return np_ + open_axes_; }
    int equations() const { return ne_; }
    const detail::Arm& arm(int k) const { return arms_[k]; }

    // Arm endpoints in full coordinates; free axes left at zero.
    std::optional<std::array<Vec, 3>> ends(const Vec& th, std::array<Trajectory, 3>* keep = nullptr) const
    {
        std::array<Vec, 3> e;
        for (int k = 0; k < 3; ++k) {
            const auto& a = arms_[k];
            e[k] = Vec::Zero(D_);
            if (a.open) continue;
            auto x = detail::arm_end(a, th.segment(offset_[k], a.params()), keep ? &(*keep)[k] : nullptr);
            if (!x) return std::nullopt;
            for (int r = 0; r < static_cast<int>(a.keep.size()); ++r) e[k][a.keep[r]] = (*x)[r];
        }
        return e;
    }

    Vec residual_from(const std::array<Vec, 3>& e) const
    {
        Vec r(ne_);
        int row = 0;
        for (int i = 0; i < D_; ++i) {
            int first = -1;
            for (int k = 0; k < 3; ++k) {
                if (arms_[k].kind[i] == detail::AxisKind::Free) continue;
                double v = e[k][i] + P_.s.s[k][i];
                if (first < 0) {
                    first = k;
                    continue;
                }
                double d = v - (e[first][i] + P_.s.s[first][i]);
                if (is_periodic(i)) d -= std::round(d);
                r[row++] = d;
            }
        }
        return r;
    }

    std::optional<Vec> residual(const Vec& th) const
    {
        auto e = ends(th);
        if (!e) return std::nullopt;
        return residual_from(*e);
    }

    // Meeting point of a solution.
    Vec meeting(const std::array<Vec, 3>& e) const
    {
        Vec y = Vec::Zero(D_);
        for (int i = 0; i < D_; ++i)
            for (int k = 0; k < 3; ++k)
                if (arms_[k].kind[i] != detail::AxisKind::Free) {
                    y[i] = e[k][i] + P_.s.s[k][i];
                    break;
                }
        return y;
    }

    int offset(int k) const { return offset_[k]; }
    int params() const { return np_; }
    int dim() const { return D_; }
    const std::vector<int>& periodic() const { return periodic_; }
    bool is_periodic(int i) const { return std::find(periodic_.begin(), periodic_.end(), i) != periodic_.end(); }

private:
    const TreeProblem& P_;
    int D_ = 0;
    std::vector<int> periodic_;
    std::array<detail::Arm, 3> arms_;
    std::array<int, 3> offset_{};
    int np_ = 0, ne_ = 0, open_axes_ = 0;
};

namespace detail {

struct NewtonResult {
    bool ok = false;
    Vec th;
    double res = 0.0;
    double cond = 0.0;
};

inline NewtonResult tree_newton(const TreeSystem& T, Vec th, const TreeTolerances& tol)
{
    NewtonResult out;
    auto r = T.residual(th);
    if (!r) return out;
    int np = T.params(), ne = static_cast<int>(r->size());
    for (int it = 0; it < tol.newton_iters; ++it) {
        Mat J(ne, np);
        for (int k = 0; k < np; ++k) {
            Vec tp = th, tm = th;
            tp[k] += tol.fd_step;
            tm[k] -= tol.fd_step;
            auto rp = T.residual(tp), rm = T.residual(tm);
            if (!rp || !rm) return out;
            J.col(k) = (*rp - *rm) / (2 * tol.fd_step);
        }
        if (np > 0) {
            Eigen::JacobiSVD<Mat> svd(J);
            auto sv = svd.singularValues();
            out.cond = sv[0] / std::max(sv[sv.size() - 1], 1e-300);
        } else {
            out.cond = 1.0;
        }
        if (r->norm() < tol.tol_match) {
            out.ok = true;
            out.th = th;
            out.res = r->norm();
            return out;
        }
        if (np == 0) return out;
        Vec step = J.completeOrthogonalDecomposition().solve(*r);
        double lam = 1.0;
        bool moved = false;
        for (int ls = 0; ls < 14; ++ls, lam *= 0.5) {
            Vec tn = th - lam * step;
            auto rn = T.residual(tn);
            if (rn && rn->norm() < r->norm()) {
                th = tn;
                r = rn;
                moved = true;
                break;
            }
        }
        if (!moved) return out;
    }
    return out;
}

// Ranked seeds from the product of the arm clouds.
inline std::vector<Vec> tree_seeds(const TreeSystem& T, const TreeTolerances& tol)
{
    std::vector<int> solved;
    std::vector<std::vector<CloudPoint>> clouds(3);
    std::size_t combos = 1;
    for (int k = 0; k < 3; ++k)
        if (!T.arm(k).open) {
            solved.push_back(k);
            clouds[k] = arm_cloud(T.arm(k), tol);
            combos *= clouds[k].size();
        }
    // thin the clouds evenly until the product is affordable
    while (combos > tol.max_combos) {
        int big = solved[0];
        for (int k : solved)
            if (clouds[k].size() > clouds[big].size()) big = k;
        std::vector<CloudPoint> thin;
        for (std::size_t i = 0; i < clouds[big].size(); i += 2) thin.push_back(clouds[big][i]);
        combos = combos / clouds[big].size() * thin.size();
        clouds[big] = std::move(thin);
    }
    struct Seed {
        double r;
        std::vector<std::size_t> idx;
        Vec y;
    };
    std::vector<Seed> seeds;
    std::vector<std::size_t> idx(solved.size(), 0);
    std::array<Vec, 3> e;
    for (int k = 0; k < 3; ++k) e[k] = Vec::Zero(T.dim());
    for (std::size_t n = 0; n < combos; ++n) {
        for (std::size_t m = 0; m < solved.size(); ++m) {
            const auto& a = T.arm(solved[m]);
            const Vec& x = clouds[solved[m]][idx[m]].x;
            for (int r = 0; r < static_cast<int>(a.keep.size()); ++r) e[solved[m]][a.keep[r]] = x[r];
        }
        double r = T.residual_from(e).norm();
        if (r < tol.seed_radius) seeds.push_back({r, idx, T.meeting(e)});
        for (std::size_t m = 0; m < solved.size(); ++m) {
            if (++idx[m] < clouds[solved[m]].size()) break;
            idx[m] = 0;
        }
    }
    std::stable_sort(seeds.begin(), seeds.end(), [](const Seed& a, const Seed& b) { return a.r < b.r; });
    std::vector<Vec> out, tried;
    for (auto& sd : seeds) {
        if (static_cast<int>(out.size()) >= tol.max_seeds) break;
        bool near = false;
        for (auto& y : tried)
            if (wrap_diff(y - sd.y, T.periodic()).norm() < tol.seed_skip)
                near = true;
        if (near) continue;
        tried.push_back(sd.y);
        Vec th(T.params());
        for (std::size_t m = 0; m < solved.size(); ++m) {
            int k = solved[m];
            th.segment(T.offset(k), T.arm(k).params()) = clouds[k][sd.idx[m]].v;
        }
        out.push_back(th);
    }
    return out;
}

// Lift restricted samples to the full space; free quadratic coordinates decay away from the endpoint.
inline std::vector<Vec> lift_arm(const Arm& a, const Trajectory& tr, const Vec& end_full, bool from_end)
{
    std::vector<Vec> out;
    double T = tr.times.empty() ? 0.0 : tr.times.back();
    for (std::size_t i = 0; i < tr.samples.size(); ++i) {
        double sigma = from_end ? tr.times[i] : T - tr.times[i];
        Vec x = Vec::Zero(end_full.size());
        for (int r = 0; r < static_cast<int>(a.keep.size()); ++r) x[a.keep[r]] = tr.samples[i][r];
        for (int j = 0; j < x.size(); ++j)
            if (a.local[j] < 0 && a.kind[j] == AxisKind::Free) x[j] = end_full[j] * std::exp(-2.0 * std::abs(a.coef[j]) * sigma);
        out.push_back(x);
    }
    return out;
}

} // namespace detail

inline bool inside_box(const Box& K, const Vec& x, const std::vector<int>& periodic)
{
    for (int i = 0; i < K.dim(); ++i) {
        if (std::find(periodic.begin(), periodic.end(), i) != periodic.end()) continue;
        if (x[i] < K.iv[i].lo || x[i] > K.iv[i].hi) return false;
    }
    return true;
}

inline std::vector<FlowTree> solve_trees(const TreeProblem& P)
{
    int d = expected_dimension(P);
    if (d != 0)
        throw TreeError("expected dimension " + std::to_string(d) + " != 0 for |" + P.ids[2] + "| - |" + P.ids[0] +
                        "| - |" + P.ids[1] + "|");
    for (auto& s : P.s.s)
        if (P.s.bound > 0 && s.norm() >= P.s.bound) throw TreeError("perturbation outside its ball");
    TreeSystem T(P);
    if (T.unknowns() - T.equations() != d) throw TreeError("internal: unbalanced tree system");
    const TreeTolerances& tol = P.tol;
    auto seeds = detail::tree_seeds(T, tol);
    std::vector<detail::NewtonResult> res(seeds.size());
    tbb::parallel_for(std::size_t(0), seeds.size(), [&](std::size_t k) { res[k] = detail::tree_newton(T, seeds[k], tol); });

    std::vector<FlowTree> out;
    const auto& periodic = P.spaces[0]->periodic;
    for (auto& nr : res) {
        if (!nr.ok) continue;
        std::array<Trajectory, 3> tr;
        auto e = T.ends(nr.th, &tr);
        if (!e) continue;
        Vec y = T.meeting(*e);
        bool dup = false;
        for (auto& t : out)
            if (wrap_diff(t.y - y, periodic).norm() < tol.dedup) dup = true;
        if (dup) continue;
        FlowTree ft;
        ft.y = periodic.empty() ? y : wrap_point(y, periodic);
        ft.residual = nr.res;
        ft.cond = nr.cond;
        bool valid = true;
        for (int k = 0; k < 3 && valid; ++k) {
            const auto& a = T.arm(k);
            Vec end = y - P.s.s[k];
            for (int i = 0; i < T.dim(); ++i)
                if (a.kind[i] == detail::AxisKind::Pinned || (a.kind[i] == detail::AxisKind::Solved)) end[i] = (*e)[k][i];
            ft.ends[k] = end;
            if (a.open) {
                // the point must lie in the basin of the critical point
                Vec z(a.keep.size());
                for (int r = 0; r < z.size(); ++r) z[r] = end[a.keep[r]];
                FlowRequest rq;
                rq.dir = -a.role;
                rq.record = true;
                Trajectory t = integrate(a.space(), z, rq);
                const auto& sinks = rq.dir > 0 ? a.space().fwd_sinks : a.space().bwd_sinks;
                if (t.verdict != Verdict::Converged || a.space().diff(sinks[t.target], a.crit.coords).norm() > 1e-9) {
                    valid = false;
                    break;
                }
                t.samples.push_back(a.crit.coords);
                t.times.push_back(t.t_end);
                ft.arms[k] = detail::lift_arm(a, t, end, true);
            } else {
                ft.arms[k] = detail::lift_arm(a, tr[k], end, false);
            }
            if (a.open == (a.role > 0)) std::reverse(ft.arms[k].begin(), ft.arms[k].end());
        }
        if (!valid) continue;
        if (nr.cond > tol.cond_cap)
            throw TreeError("non-transverse at this s (condition " + std::to_string(nr.cond) + "); resample s");
        for (int k = 0; k < 3; ++k)
            for (auto& x : ft.arms[k])
                if (!inside_box(P.confine, x, periodic))
                    throw TreeError("tree edge leaves K' at " + detail::fmt_point(x));
        if (P.rho) {
            double v = P.spaces[2]->field->value(ft.ends[2]);
            if (v <= *P.rho / 4)
                throw TreeError("tree meeting value " + std::to_string(v) + " below rho/4");
        }
        out.push_back(std::move(ft));
    }
    std::sort(out.begin(), out.end(), [](const FlowTree& a, const FlowTree& b) {
        return std::lexicographical_compare(a.y.data(), a.y.data() + a.y.size(), b.y.data(), b.y.data() + b.y.size());
    });
    return out;
}

inline int count_trees(const TreeProblem& P)
{
    int d = expected_dimension(P);
    if (d != 0)
        throw TreeError("grading mismatch: |" + P.ids[2] + "| != |" + P.ids[0] + "| + |" + P.ids[1] + "|");
    return static_cast<int>(solve_trees(P).size()) % 2;
}

} // namespace gftrees
