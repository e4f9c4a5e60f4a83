#pragma once

// Positive gradient flow: integration, invariant-manifold charts, and isolated line counts.

#include "gftrees/critical.hpp"

#include <Eigen/SparseLU>

#include <boost/numeric/odeint.hpp>

#include <tbb/parallel_for.h>

#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace gftrees {

class FlowError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct FlowTolerances {
    double rtol = 1e-10;
    double atol = 1e-12;
    double r0 = 1e-3;       // chart radius
    double r_conv = 1e-3;   // convergence ball around sinks
    double t_max = 200.0;
    double max_dt = 0.25;
    double min_step = 1e-13;
    double escape_factor = 1.5;
    double tol_match = 1e-8;
    double cond_cap = 1e8;
    double r_near = 1e-2;      // radius of the linearized stable manifold used as target
    double match_radius = 0.5; // largest cloud distance worth refining
    int sphere_density = 32; // samples per great circle
    double sample_dt = 0.05;  // cloud spacing along trajectories
};

enum class Verdict { Converged, Escaped, Timeout, Level, Time };

inline const char* to_string(Verdict v)
{
    switch (v) {
    case Verdict::Converged: return "converged";
    case Verdict::Escaped: return "escaped";
    case Verdict::Timeout: return "timeout";
    case Verdict::Level: return "level";
    case Verdict::Time: return "time";
    }
    return "?";
}

struct Trajectory {
    Verdict verdict = Verdict::Timeout;
    int target = -1; // index into the sink list when converged
    double t_end = 0.0;
    Vec end;
    std::vector<double> times;
    std::vector<Vec> samples;
};

// Where a flow runs: field, direction, escape box, and the sinks that stop it.
struct FlowSpace {
    const Field* field = nullptr;
    Box escape;                 // K'
    std::vector<int> periodic;
    std::vector<Vec> fwd_sinks; // local maxima (sinks of the forward flow)
    std::vector<Vec> bwd_sinks; // local minima (sinks of the backward flow)
    FlowTolerances tol;

    bool inside(const Vec& p) const
    {
        for (int i = 0; i < escape.dim(); ++i) {
            if (std::find(periodic.begin(), periodic.end(), i) != periodic.end()) continue;
            if (p[i] < escape.iv[i].lo || p[i] > escape.iv[i].hi) return false;
        }
        return true;
    }

    Vec diff(const Vec& a, const Vec& b) const { return wrap_diff(a - b, periodic); }
};

inline FlowSpace make_space(const Field& f, const Box& search, const std::vector<CriticalPoint>& crits,
                            const FlowTolerances& tol)
{
    FlowSpace s;
    s.field = &f;
    s.escape = search.inflate(tol.escape_factor);
    s.periodic = f.periodic_axes();
    s.tol = tol;
    for (auto& c : crits) {
        if (c.coindex() == 0) s.fwd_sinks.push_back(c.coords);
        if (c.index == 0) s.bwd_sinks.push_back(c.coords);
    }
    return s;
}

struct FlowRequest {
    int dir = 1;                       // +1 forward, -1 backward
    std::optional<double> until_time;  // stop exactly at this time
    std::optional<double> until_level; // stop where the field value crosses this level
    bool record = false;
    bool stop_on_sinks = true;
};

namespace detail {

using State = std::vector<double>;

struct GradientSystem {
    const Field* f;
    int dir;
    void operator()(const State& x, State& dx, double) const
    {
        thread_local std::vector<double> buf;
        int D = static_cast<int>(x.size());
        buf.resize(1 + D);
        f->jet(x.data(), 1, buf.data());
        dx.resize(D);
        for (int i = 0; i < D; ++i) dx[i] = dir * buf[1 + i];
    }
};

inline Vec to_vec(const State& s) { return Eigen::Map<const Vec>(s.data(), static_cast<Eigen::Index>(s.size())); }

} // namespace detail

inline Trajectory integrate(const FlowSpace& S, const Vec& start, const FlowRequest& req)
{
    using namespace boost::numeric::odeint;
    const FlowTolerances& tol = S.tol;
    int D = static_cast<int>(start.size());
    detail::GradientSystem sys{S.field, req.dir};
    auto stepper = make_dense_output(tol.atol, tol.rtol, tol.max_dt, runge_kutta_dopri5<detail::State>());
    detail::State x(start.data(), start.data() + D), y(D);
    Trajectory tr;
    auto record = [&](double t, const Vec& p) {
        if (req.record) {
            tr.times.push_back(t);
            tr.samples.push_back(p);
        }
    };
    auto finish = [&](Verdict v, double t, const Vec& p) {
        tr.verdict = v;
        tr.t_end = t;
        tr.end = p;
        record(t, p);
        return tr;
    };
    const auto& sinks = req.dir > 0 ? S.fwd_sinks : S.bwd_sinks;
    if (req.until_time && *req.until_time <= 0.0) return finish(Verdict::Time, 0.0, start);
    double level_sign = 0.0;
    if (req.until_level) {
        double v0 = S.field->value(start);
        level_sign = req.dir * (v0 - *req.until_level);
        if (level_sign >= 0) return finish(Verdict::Level, 0.0, start);
    }
    stepper.initialize(x, 0.0, std::min(1e-3, tol.max_dt));
    record(0.0, start);
    double last_rec = 0.0;
    while (true) {
        std::pair<double, double> span;
        try {
            span = stepper.do_step(sys);
        } catch (const std::exception& e) {
            throw FlowError(std::string("step size underflow near ") + detail::fmt_point(detail::to_vec(stepper.current_state())) +
                            ": " + e.what());
        }
        double t0 = span.first, t1 = span.second;
        if (t1 - t0 < tol.min_step)
            throw FlowError("step size underflow near " + detail::fmt_point(detail::to_vec(stepper.current_state())));
        Vec p = detail::to_vec(stepper.current_state());
        if (!p.allFinite()) throw FlowError("non-finite state in " + S.field->tag() + " flow");
        if (req.until_time && t1 >= *req.until_time) {
            stepper.calc_state(*req.until_time, y);
            Vec q = detail::to_vec(y);
            if (!S.inside(q)) return finish(Verdict::Escaped, *req.until_time, q);
            return finish(Verdict::Time, *req.until_time, q);
        }
        if (req.until_level && req.dir * (S.field->value(p) - *req.until_level) >= 0) {
            // bisect the crossing on the dense output
            double a = t0, b = t1;
            for (int it = 0; it < 100 && b - a > 1e-15 * std::max(1.0, b); ++it) {
                double m = 0.5 * (a + b);
                stepper.calc_state(m, y);
                if (req.dir * (S.field->value(detail::to_vec(y)) - *req.until_level) >= 0)
                    b = m;
                else
                    a = m;
            }
            stepper.calc_state(b, y);
            Vec q = detail::to_vec(y);
            if (!S.inside(q)) return finish(Verdict::Escaped, b, q);
            return finish(Verdict::Level, b, q);
        }
        if (!S.inside(p)) return finish(Verdict::Escaped, t1, p);
        if (req.stop_on_sinks) {
            for (std::size_t k = 0; k < sinks.size(); ++k)
                if (S.diff(p, sinks[k]).norm() < tol.r_conv) {
                    tr.target = static_cast<int>(k);
                    return finish(Verdict::Converged, t1, p);
                }
        }
        if (t1 >= tol.t_max) return finish(Verdict::Timeout, t1, p);
        if (req.record && t1 - last_rec >= tol.sample_dt) {
            record(t1, p);
            last_rec = t1;
        }
    }
}

// W^- (unstable, forward flow) or W^+ (stable, backward flow) of a critical point.
struct Chart {
    Vec p;
    Mat U; // D x c orthonormal frame
    int dir = 1;
    double lambda = 1.0; // smallest |eigenvalue| along the frame
    double r0 = 1e-3;

    int dim() const { return static_cast<int>(U.cols()); }
    bool open() const { return dim() == static_cast<int>(p.size()); }
};

inline Chart unstable_chart(const CriticalPoint& c, double r0)
{
    Chart ch{c.coords, c.unstable(), 1, 1.0, r0};
    if (c.coindex() > 0) ch.lambda = c.eigs.tail(c.coindex()).cwiseAbs().minCoeff();
    return ch;
}

inline Chart stable_chart(const CriticalPoint& c, double r0)
{
    Chart ch{c.coords, c.stable(), -1, 1.0, r0};
    if (c.index > 0) ch.lambda = c.eigs.head(c.index).cwiseAbs().minCoeff();
    return ch;
}

// Flow_{+-t}(p + r0 U u) for a unit u.
inline Trajectory chart_point(const FlowSpace& S, const Chart& ch, const Vec& u, double t, bool record = false)
{
    Vec start = ch.p + ch.r0 * (ch.U * u);
    FlowRequest rq;
    rq.dir = ch.dir;
    rq.until_time = t;
    rq.record = record;
    rq.stop_on_sinks = false;
    return integrate(S, start, rq);
}

// Chart coordinates v in R^c: linear inside the unit ball, flowed for t = (|v| - 1)/lambda outside.
inline Trajectory chart_eval(const FlowSpace& S, const Chart& ch, const Vec& v, bool record = false)
{
    double r = v.norm();
    if (ch.dim() == 0 || r <= 1.0) {
        Trajectory tr;
        tr.verdict = Verdict::Time;
        tr.end = ch.dim() == 0 ? ch.p : Vec(ch.p + ch.r0 * (ch.U * v));
        if (record) {
            tr.times = {0.0};
            tr.samples = {tr.end};
        }
        return tr;
    }
    return chart_point(S, ch, v / r, (r - 1.0) / ch.lambda, record);
}

inline double chart_radius(const Chart& ch, double t) { return 1.0 + ch.lambda * t; }

// Deterministic samples of S^{c-1}.
inline std::vector<Vec> sphere_samples(int c, int density)
{
    std::vector<Vec> out;
    if (c <= 0) return out;
    if (c == 1) {
        Vec a(1), b(1);
        a << 1.0;
        b << -1.0;
        return {a, b};
    }
    if (c == 2) {
        int n = std::max(4, density);
        for (int k = 0; k < n; ++k) {
            double th = 2 * M_PI * (k + 0.5) / n;
            Vec v(2);
            v << std::cos(th), std::sin(th);
            out.push_back(v);
        }
        return out;
    }
    // cube faces, projected
    int g = std::max(2, density / 4);
    std::size_t per_face = 1;
    for (int i = 0; i < c - 1; ++i) per_face *= g;
    for (int axis = 0; axis < c; ++axis)
        for (int sgn : {1, -1})
            for (std::size_t k = 0; k < per_face; ++k) {
                Vec v(c);
                std::size_t rem = k;
                for (int i = 0; i < c; ++i) {
                    if (i == axis) {
                        v[i] = sgn;
                        continue;
                    }
                    int j = static_cast<int>(rem % g);
                    rem /= g;
                    v[i] = -1.0 + 2.0 * (j + 0.5) / g;
                }
                out.push_back(v.normalized());
            }
    return out;
}

// Orthonormal basis of the tangent space of the unit sphere at u.
inline Mat sphere_tangent(const Vec& u)
{
    int c = static_cast<int>(u.size());
    Mat M = Mat::Identity(c, c) - u * u.transpose();
    Eigen::ColPivHouseholderQR<Mat> qr(M);
    Mat Q = qr.householderQ();
    return Q.leftCols(c - 1);
}

struct LineCount {
    bool defined = false;
    int count = 0;
    std::vector<Trajectory> lines;
    std::string note;
};

namespace detail {

struct LevelSample {
    Vec u;   // sphere point
    Vec end; // point on the level set
};

inline std::vector<LevelSample> level_cloud(const FlowSpace& S, const Chart& ch, double level)
{
    auto dirs = sphere_samples(ch.dim(), S.tol.sphere_density);
    std::vector<std::optional<LevelSample>> res(dirs.size());
    tbb::parallel_for(std::size_t(0), dirs.size(), [&](std::size_t k) {
        FlowRequest rq;
        rq.dir = ch.dir;
        rq.until_level = level;
        Trajectory tr = integrate(S, ch.p + ch.r0 * (ch.U * dirs[k]), rq);
        if (tr.verdict == Verdict::Level) res[k] = LevelSample{dirs[k], tr.end};
    });
    std::vector<LevelSample> out;
    for (auto& r : res)
        if (r) out.push_back(*r);
    return out;
}

inline std::vector<double> nn_dist(const FlowSpace& S, const std::vector<LevelSample>& c)
{
    std::vector<double> d(c.size(), std::numeric_limits<double>::infinity());
    for (std::size_t a = 0; a < c.size(); ++a)
        for (std::size_t b = 0; b < c.size(); ++b)
            if (a != b) d[a] = std::min(d[a], S.diff(c[a].end, c[b].end).norm());
    for (auto& x : d)
        if (!std::isfinite(x)) x = 0.1;
    return d;
}

// Endpoint on the level set for a perturbed sphere point u0 + T theta.
inline std::optional<Vec> level_end(const FlowSpace& S, const Chart& ch, const Vec& u0, const Mat& T, const Vec& th,
                                    double level, Trajectory* keep = nullptr)
{
    Vec u = ch.dim() == 1 ? u0 : Vec((u0 + T * th).normalized());
    FlowRequest rq;
    rq.dir = ch.dir;
    rq.until_level = level;
    rq.record = keep != nullptr;
    Trajectory tr = integrate(S, ch.p + ch.r0 * (ch.U * u), rq);
    if (tr.verdict != Verdict::Level) return std::nullopt;
    if (keep) *keep = tr;
    return tr.end;
}

// Point of the linearized stable manifold of q on the given level: an ellipsoid point of radius r,
// moved along the gradient onto the exact level set.
inline std::optional<Vec> near_end(const FlowSpace& S, const CriticalPoint& q, const Vec& scale, const Vec& u,
                                   double r, double level)
{
    Vec y = q.coords + r * (q.stable() * scale.cwiseProduct(u));
    for (int it = 0; it < 20; ++it) {
        Vec g;
        double dv = S.field->gradient(y, g) - level;
        double g2 = g.squaredNorm();
        if (g2 == 0.0) return std::nullopt;
        y -= (dv / g2) * g;
        if (std::abs(dv) < 1e-15 * std::max(1.0, std::abs(level))) break;
    }
    if ((y - q.coords).norm() > 4 * r) return std::nullopt;
    return y;
}

} // namespace detail

// Isolated positive-gradient lines from p up to q, mod 2; q one grading above p.
inline LineCount count_lines(const FlowSpace& S, const CriticalPoint& p, const CriticalPoint& q)
{
    LineCount out;
    if (q.grading - p.grading != 1) {
        out.note = "dimension != 0, count undefined at this grading";
        return out;
    }
    out.defined = true;
    int D = p.dim();
    if (p.coindex() == 0 || q.index == 0 || q.value <= p.value) return out;
    const FlowTolerances& tol = S.tol;

    // p has a one-dimensional unstable manifold and q is a sink: shoot directly
    if (p.coindex() == 1 && q.index == D) {
        Chart ch = unstable_chart(p, tol.r0);
        for (double s : {1.0, -1.0}) {
            FlowRequest rq;
            rq.record = true;
            Trajectory tr = integrate(S, ch.p + s * ch.r0 * ch.U.col(0), rq);
            if (tr.verdict == Verdict::Converged && S.diff(S.fwd_sinks[tr.target], q.coords).norm() < 1e-9)
                out.lines.push_back(std::move(tr));
        }
        out.count = static_cast<int>(out.lines.size());
        return out;
    }
    if (q.index == 1 && p.index == 0) {
        Chart ch = stable_chart(q, tol.r0);
        for (double s : {1.0, -1.0}) {
            FlowRequest rq;
            rq.dir = -1;
            rq.record = true;
            Trajectory tr = integrate(S, ch.p + s * ch.r0 * ch.U.col(0), rq);
            if (tr.verdict == Verdict::Converged && S.diff(S.bwd_sinks[tr.target], p.coords).norm() < 1e-9) {
                std::reverse(tr.samples.begin(), tr.samples.end());
                out.lines.push_back(std::move(tr));
            }
        }
        out.count = static_cast<int>(out.lines.size());
        return out;
    }

    // match W^u(p) against the linearized W^s(q) on a level just below q
    Chart A = unstable_chart(p, tol.r0), B = stable_chart(q, tol.r0);
    double rb = tol.r_near;
    double level = q.value - 0.5 * B.lambda * rb * rb;
    if (level <= p.value) return out;
    Vec scale = (B.lambda / q.eigs.head(q.index).cwiseAbs().array()).sqrt();
    auto ca = detail::level_cloud(S, A, level);
    std::vector<detail::LevelSample> cb;
    for (auto& u : sphere_samples(B.dim(), tol.sphere_density))
        if (auto e = detail::near_end(S, q, scale, u, rb, level)) cb.push_back({u, *e});
    if (ca.empty() || cb.empty()) return out;

    // nearest partners in both directions
    struct Cand {
        double d;
        std::size_t a, b;
    };
    std::vector<Cand> cands;
    {
        Mat dist(ca.size(), cb.size());
        for (std::size_t a = 0; a < ca.size(); ++a)
            for (std::size_t b = 0; b < cb.size(); ++b) dist(a, b) = S.diff(ca[a].end, cb[b].end).norm();
        std::set<std::pair<std::size_t, std::size_t>> pairs;
        for (Eigen::Index a = 0; a < dist.rows(); ++a) {
            Eigen::Index b;
            dist.row(a).minCoeff(&b);
            pairs.emplace(a, b);
        }
        for (Eigen::Index b = 0; b < dist.cols(); ++b) {
            Eigen::Index a;
            dist.col(b).minCoeff(&a);
            pairs.emplace(a, b);
        }
        std::vector<Cand> all;
        for (auto [a, b] : pairs)
            if (dist(a, b) < tol.match_radius) all.push_back({dist(a, b), a, b});
        std::sort(all.begin(), all.end(), [](const Cand& x, const Cand& y) {
            return x.d < y.d || (x.d == y.d && (x.a < y.a || (x.a == y.a && x.b < y.b)));
        });
        // each sample seeds at most two refinements
        std::vector<int> used_a(ca.size(), 0), used_b(cb.size(), 0);
        for (const Cand& c : all)
            if (used_a[c.a] < 2 && used_b[c.b] < 2) {
                ++used_a[c.a];
                ++used_b[c.b];
                cands.push_back(c);
            }
    }
    int na_par = A.dim() - 1, nb_par = B.dim() - 1, np = na_par + nb_par;
    std::vector<Vec> found; // meeting points
    std::vector<std::pair<Vec, Vec>> found_dirs;
    const double h = 1e-6;
    auto tangent = [](const Vec& u) { return u.size() > 1 ? sphere_tangent(u) : Mat(1, 0); };
    auto b_end = [&](const Vec& u0, const Mat& T, const Vec& th) -> std::optional<Vec> {
        Vec u = u0.size() == 1 ? u0 : Vec((u0 + T * th).normalized());
        return detail::near_end(S, q, scale, u, rb, level);
    };
    for (const Cand& cd : cands) {
        Vec ua = ca[cd.a].u, ub = cb[cd.b].u;
        bool seen = false;
        for (auto& fd : found_dirs)
            if ((fd.first - ua).norm() < 2.0 * M_PI / tol.sphere_density &&
                (fd.second - ub).norm() < 2.0 * M_PI / tol.sphere_density)
                seen = true;
        if (seen) continue;
        Mat Ta = tangent(ua), Tb = tangent(ub);
        Vec th = Vec::Zero(np);
        auto resid = [&](const Vec& t) -> std::optional<Vec> {
            auto ea = detail::level_end(S, A, ua, Ta, t.head(na_par), level);
            if (!ea) return std::nullopt;
            auto eb = b_end(ub, Tb, t.tail(nb_par));
            if (!eb) return std::nullopt;
            return S.diff(*ea, *eb);
        };
        auto r = resid(th);
        if (!r) continue;
        bool ok = false;
        double cond = 0;
        for (int it = 0; it < 30; ++it) {
            Mat J(D, np);
            bool bad = false;
            for (int k = 0; k < np && !bad; ++k) {
                Vec tp = th, tm = th;
                tp[k] += h;
                tm[k] -= h;
                auto rp = resid(tp), rm = resid(tm);
                if (!rp || !rm) bad = true;
                else J.col(k) = (*rp - *rm) / (2 * h);
            }
            if (bad) break;
            Eigen::JacobiSVD<Mat> svd(J);
            auto sv = svd.singularValues();
            cond = np == 0 ? 1.0 : sv[0] / std::max(sv[np - 1], 1e-300);
            if (r->norm() < tol.tol_match) {
                ok = true;
                break;
            }
            if (np == 0) break;
            Vec step = J.completeOrthogonalDecomposition().solve(*r);
            double lam = 1.0;
            bool moved = false;
            for (int ls = 0; ls < 12; ++ls, lam *= 0.5) {
                Vec tn = th - lam * step;
                auto rn = resid(tn);
                if (rn && rn->norm() < r->norm()) {
                    th = tn;
                    r = rn;
                    moved = true;
                    break;
                }
            }
            if (!moved) break;
            // restart tangent coordinates at the new sphere points
            if (na_par > 0) {
                ua = (ua + Ta * th.head(na_par)).normalized();
                Ta = sphere_tangent(ua);
            }
            if (nb_par > 0) {
                ub = (ub + Tb * th.tail(nb_par)).normalized();
                Tb = sphere_tangent(ub);
            }
            th.setZero();
        }
        if (!ok) continue;
        Trajectory ta;
        auto ea = detail::level_end(S, A, ua, Ta, th.head(na_par), level, &ta);
        bool dup = false;
        for (auto& m : found)
            if (S.diff(m, *ea).norm() < 1e-5) dup = true;
        found_dirs.emplace_back(ua, ub);
        if (dup) continue;
        if (cond > tol.cond_cap)
            throw FlowError("suspected non-transverse configuration between " + p.id + " and " + q.id +
                            "; perturb family or lower tolerances");
        found.push_back(*ea);
        // the last stretch inside the linear neighborhood of q
        Trajectory line = ta;
        Vec from = line.end;
        for (int k = 1; k <= 8; ++k) {
            line.samples.push_back(from + (k / 8.0) * S.diff(q.coords, from));
            line.times.push_back(line.times.empty() ? 0.0 : line.times.back());
        }
        line.verdict = Verdict::Converged;
        line.end = q.coords;
        out.lines.push_back(std::move(line));
    }
    out.count = static_cast<int>(out.lines.size());
    return out;
}

// Flow lines between critical points have zero coordinates along exactly quadratic axes, so line
// counting can run on the remaining axes.
struct SplitSpace {
    std::shared_ptr<SliceField> field; // null when there is nothing to drop
    FlowSpace space;
    std::vector<CriticalPoint> crits;  // restricted, same ids and gradings
};

inline SplitSpace split_space(const FlowSpace& S, const std::vector<CriticalPoint>& crits)
{
    SplitSpace out;
    std::vector<int> quad = S.field->quadratic_axes(), keep;
    for (int i = 0; i < S.field->dim(); ++i)
        if (std::find(quad.begin(), quad.end(), i) == quad.end()) keep.push_back(i);
    if (quad.empty() || keep.empty()) {
        out.space = S;
        out.crits = crits;
        return out;
    }
    out.field = std::make_shared<SliceField>(*S.field, keep);
    Box box;
    for (int i : keep) box.iv.push_back(S.escape.iv[i]);
    for (auto& c : crits) {
        CriticalPoint r = classify(*out.field, out.field->restrict(c.coords), 0);
        r.id = c.id;
        r.shift = c.shift - (c.index - r.index);
        r.grading = r.index - r.shift;
        out.crits.push_back(std::move(r));
    }
    out.space = make_space(*out.field, box, out.crits, S.tol);
    out.space.escape = box;
    return out;
}

inline LineCount count_lines(const SplitSpace& S, const std::string& p, const std::string& q)
{
    auto find = [&](const std::string& id) -> const CriticalPoint& {
        for (auto& c : S.crits)
            if (c.id == id) return c;
        throw FlowError("unknown critical point " + id);
    };
    LineCount lc = count_lines(S.space, find(p), find(q));
    if (S.field)
        for (auto& tr : lc.lines) {
            for (auto& x : tr.samples) x = S.field->lift(x);
            tr.end = S.field->lift(tr.end);
        }
    return lc;
}


// Connecting orbits by multiple shooting. Used where single shooting is hopeless: a slow exit
// direction next to fast unstable ones.
struct ConnectionSeed {
    std::vector<double> times; // increasing
    std::vector<Vec> points;   // from p to q
};

struct Connection {
    double T = 0.0;
    std::vector<Vec> nodes; // chart point of p, interior nodes, chart point of q
    double cond = 0.0;
    bool confined = true;
};

namespace detail {

// RK4 flow of +grad for time tau in n steps, with the variational matrix when M is given.
inline Vec rk4_flow(const Field& f, const Vec& y0, double tau, int n, Mat* M)
{
    int D = static_cast<int>(y0.size());
    double h = tau / n;
    Vec y = y0;
    if (M) M->setIdentity(D, D);
    Vec k1, k2, k3, k4;
    Mat P1, P2, P3, P4;
    auto eval = [&](const Vec& x, const Mat* P, Vec& k, Mat& dP) {
        if (!P) {
            k = f.gradient(x);
            return;
        }
        Derivatives d = f.derivatives(x);
        k = d.grad;
        dP.noalias() = d.hess * *P;
    };
    for (int s = 0; s < n; ++s) {
        if (M) {
            Mat T;
            eval(y, M, k1, P1);
            T = *M + 0.5 * h * P1;
            eval(y + 0.5 * h * k1, &T, k2, P2);
            T = *M + 0.5 * h * P2;
            eval(y + 0.5 * h * k2, &T, k3, P3);
            T = *M + h * P3;
            eval(y + h * k3, &T, k4, P4);
            *M += h / 6 * (P1 + 2 * P2 + 2 * P3 + P4);
        } else {
            eval(y, nullptr, k1, P1);
            eval(y + 0.5 * h * k1, nullptr, k2, P2);
            eval(y + 0.5 * h * k2, nullptr, k3, P3);
            eval(y + h * k3, nullptr, k4, P4);
        }
        y += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
    }
    return y;
}

// Point on the seed polyline at time t.
inline Vec seed_at(const FlowSpace& S, const ConnectionSeed& sd, double t)
{
    const auto& ts = sd.times;
    auto it = std::upper_bound(ts.begin(), ts.end(), t);
    if (it == ts.begin()) return sd.points.front();
    if (it == ts.end()) return sd.points.back();
    std::size_t k = static_cast<std::size_t>(it - ts.begin());
    double a = ts[k - 1], b = ts[k];
    double w = b > a ? (t - a) / (b - a) : 0.0;
    return sd.points[k - 1] + w * S.diff(sd.points[k], sd.points[k - 1]);
}

} // namespace detail

// Newton on (exit direction at p, entry direction at q, interior nodes, total time).
inline std::optional<Connection> refine_connection(const FlowSpace& S, const CriticalPoint& p, const CriticalPoint& q,
                                                   const ConnectionSeed& seed)
{
    const FlowTolerances& tol = S.tol;
    const Field& f = *S.field;
    int D = p.dim(), ca = p.coindex(), ib = q.index;
    if (ca == 0 || ib == 0 || seed.points.size() < 2) return std::nullopt;
    double r = tol.r0;
    Mat Ua = p.unstable(), Ub = q.stable();

    // chart crossings of the seed
    std::size_t ia = 0, ibk = seed.points.size() - 1;
    while (ia + 1 < seed.points.size() && S.diff(seed.points[ia], p.coords).norm() < r) ++ia;
    while (ibk > ia && S.diff(seed.points[ibk], q.coords).norm() < r) --ibk;
    if (ibk <= ia) return std::nullopt;
    Vec u0 = Ua.transpose() * S.diff(seed.points[ia], p.coords);
    Vec v0 = Ub.transpose() * S.diff(seed.points[ibk], q.coords);
    if (u0.norm() < 1e-12 || v0.norm() < 1e-12) return std::nullopt;
    u0.normalize();
    v0.normalize();
    double t0 = seed.times[ia], T = seed.times[ibk] - t0;
    if (!(T > 0)) return std::nullopt;

    double lmax = 1.0;
    for (std::size_t k = ia; k <= ibk; ++k) {
        Eigen::SelfAdjointEigenSolver<Mat> es(f.derivatives(seed.points[k]).hess, Eigen::EigenvaluesOnly);
        lmax = std::max(lmax, es.eigenvalues().cwiseAbs().maxCoeff());
    }
    int K = std::max(4, static_cast<int>(std::ceil(T * lmax / 3.0)));
    int nsub = std::max(2, static_cast<int>(std::ceil(T / K * lmax / 0.5)));
    int na = ca - 1, nb = ib - 1;
    int n = na + nb + (K - 1) * D + 1;
    Mat Ta = na > 0 ? sphere_tangent(u0) : Mat(ca, 0), Tb = nb > 0 ? sphere_tangent(v0) : Mat(ib, 0);

    Vec z = Vec::Zero(n);
    for (int k = 1; k < K; ++k) z.segment(na + nb + (k - 1) * D, D) = detail::seed_at(S, seed, t0 + T * k / K);
    z[n - 1] = T;

    auto end_point = [&](const Vec& c, const Mat& U, const Vec& w0, const Mat& Tw, const Vec& th, Mat* dth) {
        Vec m = w0 + Tw * th;
        double nm = m.norm();
        Vec w = m / nm;
        if (dth) *dth = r * U * ((Mat::Identity(w.size(), w.size()) - w * w.transpose()) / nm) * Tw;
        return Vec(c + r * U * w);
    };
    auto node = [&](const Vec& zz, int k, Mat* dth) -> Vec {
        if (k == 0) return end_point(p.coords, Ua, u0, Ta, zz.head(na), dth);
        if (k == K) return end_point(q.coords, Ub, v0, Tb, zz.segment(na, nb), dth);
        return zz.segment(na + nb + (k - 1) * D, D);
    };
    auto residual = [&](const Vec& zz, std::vector<Eigen::Triplet<double>>* trip) {
        Vec R(D * K);
        double tau = zz[n - 1] / K;
        std::vector<Vec> rk(K);
        std::vector<Mat> Mk(K), dA(1), dB(1);
        tbb::parallel_for(0, K, [&](int k) {
            Vec y = node(zz, k, nullptr);
            rk[k] = detail::rk4_flow(f, y, tau, nsub, trip ? &Mk[k] : nullptr);
        });
        for (int k = 0; k < K; ++k) R.segment(k * D, D) = S.diff(rk[k], node(zz, k + 1, nullptr));
        if (!trip) return R;
        Mat dy0, dyK;
        node(zz, 0, &dy0);
        node(zz, K, &dyK);
        auto put = [&](int r0, int c0, const Mat& B, double sgn) {
            for (Eigen::Index i = 0; i < B.rows(); ++i)
                for (Eigen::Index j = 0; j < B.cols(); ++j)
                    if (B(i, j) != 0.0) trip->emplace_back(r0 + static_cast<int>(i), c0 + static_cast<int>(j), sgn * B(i, j));
        };
        for (int k = 0; k < K; ++k) {
            int row = k * D;
            if (k == 0) put(row, 0, Mk[0] * dy0, 1.0);
            else put(row, na + nb + (k - 1) * D, Mk[k], 1.0);
            if (k + 1 == K) put(row, na, dyK, -1.0);
            else put(row, na + nb + k * D, Mat::Identity(D, D), -1.0);
            put(row, n - 1, f.gradient(rk[k]) / K, 1.0);
        }
        return R;
    };

    using Sparse = Eigen::SparseMatrix<double>;
    Vec R = residual(z, nullptr);
    if (!R.allFinite()) return std::nullopt;
    for (int it = 0; it < 40; ++it) {
        std::vector<Eigen::Triplet<double>> trip;
        R = residual(z, &trip);
        Sparse J(n, n);
        J.setFromTriplets(trip.begin(), trip.end());
        J.makeCompressed();
        Eigen::SparseLU<Sparse> lu;
        lu.compute(J);
        if (lu.info() != Eigen::Success) return std::nullopt;
        if (R.lpNorm<Eigen::Infinity>() < tol.tol_match) {
            // condition estimate of the row and column equilibrated J: power and inverse iteration on J^T J
            Vec rs = Vec::Zero(n), cs = Vec::Zero(n);
            for (int c = 0; c < J.outerSize(); ++c)
                for (Sparse::InnerIterator e(J, c); e; ++e) rs[e.row()] = std::max(rs[e.row()], std::abs(e.value()));
            for (int c = 0; c < J.outerSize(); ++c)
                for (Sparse::InnerIterator e(J, c); e; ++e)
                    cs[c] = std::max(cs[c], std::abs(e.value()) / rs[e.row()]);
            for (int c = 0; c < J.outerSize(); ++c)
                for (Sparse::InnerIterator e(J, c); e; ++e) e.valueRef() /= rs[e.row()] * cs[c];
            lu.compute(J);
            Sparse Jt = J.transpose();
            Eigen::SparseLU<Sparse> lut;
            lut.compute(Jt);
            Vec a = Vec::Ones(n).normalized(), b = a;
            double smax = 0, sinv = 0;
            for (int k = 0; k < 20; ++k) {
                Vec y = Jt * (J * a);
                smax = std::sqrt(y.norm());
                a = y.normalized();
                Vec w = lu.solve(Vec(lut.solve(b)));
                sinv = std::sqrt(w.norm());
                b = w.normalized();
            }
            Connection c;
            c.T = z[n - 1];
            for (int k = 0; k <= K; ++k) c.nodes.push_back(node(z, k, nullptr));
            c.cond = smax * sinv;
            for (auto& x : c.nodes)
                if (!S.inside(x)) c.confined = false;
            return c;
        }
        Vec step = lu.solve(R);
        if (!step.allFinite()) return std::nullopt;
        double lam = 1.0, r0n = R.norm();
        bool moved = false;
        for (int ls = 0; ls < 14; ++ls, lam *= 0.5) {
            Vec zn = z - lam * step;
            if (!(zn[n - 1] > 0)) continue;
            Vec Rn = residual(zn, nullptr);
            if (Rn.allFinite() && Rn.norm() < r0n) {
                z = zn;
                moved = true;
                break;
            }
        }
        if (!moved) return std::nullopt;
    }
    return std::nullopt;
}

} // namespace gftrees
