#pragma once

// Continuation maps for a path of difference functions, counted on domain x [0,1].

#include "gftrees/complex.hpp"
#include "gftrees/flow.hpp"

namespace gftrees {

class ContinuationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Quintic smoothstep, flat to second order at both ends: value, first and second derivative.
inline std::array<double, 3> sigma_jet(double t)
{
    return {t * t * t * (10 - 15 * t + 6 * t * t), 30 * t * t * (1 - t) * (1 - t), 60 * t * (1 - t) * (1 - 2 * t)};
}

// Exactly quadratic axes shared by a and b with equal coefficients.
inline std::vector<int> common_quadratic_axes(const Field& a, const Field& b)
{
    std::vector<int> out, q0 = a.quadratic_axes(), q1 = b.quadratic_axes();
    if (q0.empty()) return out;
    Vec z = Vec::Zero(a.dim());
    Derivatives d0 = a.derivatives(z), d1 = b.derivatives(z);
    for (int i : q0)
        if (std::find(q1.begin(), q1.end(), i) != q1.end() && d0.hess(i, i) == d1.hess(i, i)) out.push_back(i);
    return out;
}

// (1 - beta) w0 + beta w1.
class InterpField : public Field {
public:
    InterpField(const Field& w0, const Field& w1, double beta)
        : w0_(&w0), w1_(&w1), beta_(beta), quad_(common_quadratic_axes(w0, w1))
    {
        if (w0.dim() != w1.dim()) throw ContinuationError("path endpoints live on different spaces");
    }

    int dim() const override { return w0_->dim(); }
    std::string tag() const override { return w0_->tag() + "^" + std::to_string(beta_); }
    std::vector<int> periodic_axes() const override { return w0_->periodic_axes(); }
    std::vector<int> quadratic_axes() const override { return quad_; }
    double beta() const { return beta_; }

    void jet(const double* p, int order, double* out) const override
    {
        int st = jet::stride(dim(), order);
        thread_local std::vector<double> b;
        b.resize(st);
        w0_->jet(p, order, out);
        w1_->jet(p, order, b.data());
        for (int i = 0; i < st; ++i) out[i] += beta_ * (b[i] - out[i]);
    }

private:
    const Field* w0_;
    const Field* w1_;
    double beta_;
    std::vector<int> quad_;
};

// W(p, t) = w^beta(t)(p) + eps (t^2/2 - t^4/4) on D + 1 coordinates, t last, where
// beta(t) = ba + sigma(t) (bb - ba) and w^beta = (1 - beta) w0 + beta w1.
class ContinuationField : public Field {
public:
    ContinuationField(const Field& w0, const Field& w1, double eps, double ba = 0.0, double bb = 1.0)
        : w0_(&w0), w1_(&w1), eps_(eps), ba_(ba), bb_(bb), quad_(common_quadratic_axes(w0, w1))
    {
        if (w0.dim() != w1.dim()) throw ContinuationError("path endpoints live on different spaces");
    }

    int dim() const override { return w0_->dim() + 1; }
    std::string tag() const override { return "W[" + w0_->tag() + "]"; }
    std::vector<int> periodic_axes() const override { return w0_->periodic_axes(); }
    std::vector<int> quadratic_axes() const override { return quad_; }
    double eps() const { return eps_; }

    void jet(const double* p, int order, double* out) const override
    {
        int D = w0_->dim(), M = D + 1;
        int sd = jet::stride(D, order);
        thread_local std::vector<double> a, b;
        a.resize(sd);
        b.resize(sd);
        w0_->jet(p, order, a.data());
        w1_->jet(p, order, b.data());
        double t = p[D];
        auto s = sigma_jet(t);
        double db = bb_ - ba_, beta = ba_ + s[0] * db;
        double dv = b[0] - a[0];
        out[0] = a[0] + beta * dv + eps_ * (0.5 * t * t - 0.25 * t * t * t * t);
        if (order == 0) return;
        for (int i = 0; i < D; ++i) out[1 + i] = a[1 + i] + beta * (b[1 + i] - a[1 + i]);
        out[1 + D] = s[1] * db * dv + eps_ * (t - t * t * t);
        if (order == 1) return;
        double* H = out + 1 + M;
        for (int i = 0; i < D; ++i) {
            for (int j = 0; j < D; ++j) {
                int k = 1 + D + i * D + j;
                H[i * M + j] = a[k] + beta * (b[k] - a[k]);
            }
            double mixed = s[1] * db * (b[1 + i] - a[1 + i]);
            H[i * M + D] = mixed;
            H[D * M + i] = mixed;
        }
        H[D * M + D] = s[2] * db * dv + eps_ * (1 - 3 * t * t);
    }

private:
    const Field* w0_;
    const Field* w1_;
    double eps_, ba_, bb_;
    std::vector<int> quad_;
};

struct ContinuationOptions {
    std::optional<double> eps;             // default 0.1 * min rho^t
    std::vector<double> slices{0.0, 0.25, 0.5, 0.75, 1.0};
    std::vector<double> rho_known;         // skips the slice search when set
    int per_axis = 15;
    CritTolerances crit;
    FlowTolerances flow;
    double beta_step = 0.02; // largest step of the critical-point continuation
    int max_pieces = 128;
    int seed_points = 160;   // per half of the adiabatic seed
};

// A critical point followed along beta in [0, 1].
struct CritPath {
    CriticalPoint start;
    std::vector<double> beta;
    std::vector<Vec> pts;
    std::vector<double> values;

    Vec at(double b) const
    {
        for (std::size_t k = 0; k < beta.size(); ++k)
            if (beta[k] == b) return pts[k];
        throw ContinuationError("internal: beta " + std::to_string(b) + " not on the path of " + start.id);
    }
};

struct ContinuationLine {
    std::string from, to;
    int piece = 0;
    Connection conn;
};

struct ContinuationResult {
    Z2Matrix phi; // rows: generators at t = 1, columns: generators at t = 0
    double eps = 0.0;
    int pieces = 1;
    std::vector<double> rho_t;
    std::vector<ContinuationLine> lines;
    std::vector<std::string> notes;
};

// Least positive critical value of w^t at each slice; degenerate slices are noted and skipped.
inline std::vector<double> sample_rho(const Field& w0, const Field& w1, const Box& search, const ContinuationOptions& o,
                                      std::vector<std::string>& notes)
{
    std::vector<double> out;
    for (double t : o.slices) {
        InterpField wt(w0, w1, sigma_jet(t)[0]);
        try {
            auto cs = find_critical_points(wt, {search, o.per_axis, o.crit, 0, true});
            double r = std::numeric_limits<double>::infinity();
            for (auto& c : cs)
                if (c.value > 0) r = std::min(r, c.value);
            out.push_back(r);
        } catch (const CriticalError& e) {
            notes.push_back("degenerate slice t=" + std::to_string(t) + ": " + e.what());
        }
    }
    return out;
}

// Follows c from beta = 0 to 1, landing exactly on every breakpoint.
inline CritPath follow_crit(const Field& w0, const Field& w1, const CriticalPoint& c, const Box& guard,
                            const std::vector<double>& breaks, const ContinuationOptions& o)
{
    CritPath path;
    path.start = c;
    path.beta.push_back(0.0);
    path.pts.push_back(c.coords);
    path.values.push_back(c.value);
    auto per = w0.periodic_axes();
    Vec x = c.coords;
    double b = 0.0, h = o.beta_step;
    std::size_t next = 0;
    while (b < 1.0) {
        while (next < breaks.size() && breaks[next] <= b) ++next;
        double target = next < breaks.size() ? std::min(breaks[next], 1.0) : 1.0;
        double nb = std::min(target, b + h);
        InterpField f(w0, w1, nb);
        auto y = detail::newton_root(f, x, guard, o.crit);
        bool ok = y && wrap_diff(*y - x, per).norm() < 0.05;
        if (ok) {
            CriticalPoint k = classify(f, *y, c.shift);
            ok = k.index == c.index && k.min_abs_eig() > o.crit.degenerate;
        }
        if (!ok) {
            h *= 0.5;
            if (h < 1e-6)
                throw ContinuationError("critical point " + c.id + " degenerates near beta=" + std::to_string(nb) +
                                        "; births and deaths along the path are not supported");
            continue;
        }
        x = *y;
        b = nb;
        double v = f.value(x);
        if (!(v > 0)) throw ContinuationError("chord " + c.id + " reaches value 0 along the path");
        path.beta.push_back(b);
        path.pts.push_back(x);
        path.values.push_back(v);
        h = std::min(o.beta_step, 2 * h);
    }
    return path;
}

namespace detail {

// Adiabatic seed: the slice critical point dragged through one piece, timed by dt/ds = dW/dt.
inline std::optional<ConnectionSeed> adiabatic_seed(const ContinuationField& W, const Field& w0, const Field& w1,
                                                    double ba, double bb, const Vec& x0, const Box& guard,
                                                    const ContinuationOptions& o)
{
    int M = std::max(8, o.seed_points);
    double r = o.flow.r0 * 0.5;
    std::vector<double> ss;
    for (int j = 0; j <= M; ++j) ss.push_back(r * std::pow(0.5 / r, static_cast<double>(j) / M));
    for (int j = M - 1; j >= 0; --j) ss.push_back(1.0 - ss[j]);
    ConnectionSeed seed;
    std::vector<double> g;
    Vec x = x0;
    int D = static_cast<int>(x0.size());
    double dprev = 0.0;
    for (double s : ss) {
        InterpField f(w0, w1, ba + sigma_jet(s)[0] * (bb - ba));
        auto y = newton_root(f, x, guard, o.crit);
        if (!y || wrap_diff(*y - x, f.periodic_axes()).norm() > 0.05) return std::nullopt;
        x = *y;
        Vec pt(D + 1);
        pt << x, s;
        double gs = W.gradient(pt)[D];
        if (!(gs > 0)) return std::nullopt;
        double t = 0.0;
        if (!seed.points.empty()) t = seed.times.back() + (s - dprev) * 0.5 * (1.0 / gs + 1.0 / g.back());
        seed.points.push_back(pt);
        seed.times.push_back(t);
        g.push_back(gs);
        dprev = s;
    }
    return seed;
}

} // namespace detail

// Phi(q, p) = number mod 2 of continuation lines from (p, 0) to (q, 1), over generators of equal grading.
// Candidate lines follow the continued critical points; each is refined by multiple shooting. The path is
// cut into pieces short enough that W rises along every such line.
inline ContinuationResult continuation_matrix(const Field& w0, const std::vector<CriticalPoint>& crits0, const Field& w1,
                                              const std::vector<CriticalPoint>& crits1, const Box& search,
                                              const ContinuationOptions& o)
{
    ContinuationResult res;
    res.rho_t = o.rho_known.empty() ? sample_rho(w0, w1, search, o, res.notes) : o.rho_known;
    double rho_min = std::numeric_limits<double>::infinity();
    for (double r : res.rho_t) rho_min = std::min(rho_min, r);
    res.eps = o.eps ? *o.eps : (std::isfinite(rho_min) ? 0.1 * rho_min : 0.1);
    if (res.eps <= 0) throw ContinuationError("continuation eps must be positive");
    if (std::isfinite(rho_min) && res.eps / 4 >= rho_min)
        throw ContinuationError("eps/4 = " + std::to_string(res.eps / 4) + " is not below rho^t = " + std::to_string(rho_min));

    auto pos0 = positive_part(crits0), pos1 = positive_part(crits1);
    res.phi = Z2Matrix(static_cast<int>(pos1.size()), static_cast<int>(pos0.size()));
    if (pos0.empty() && pos1.empty()) return res;
    Box guard = search.inflate(o.flow.escape_factor);
    auto per = w0.periodic_axes();

    // first pass fixes the number of pieces from the steepest value drift
    std::vector<CritPath> paths;
    for (auto& c : pos0) paths.push_back(follow_crit(w0, w1, c, guard, {}, o));
    double drift = 0.0;
    for (auto& P : paths)
        for (std::size_t k = 1; k < P.beta.size(); ++k)
            drift = std::max(drift, std::abs(P.values[k] - P.values[k - 1]) / (P.beta[k] - P.beta[k - 1]));
    int m = std::max(1, static_cast<int>(std::ceil(6.0 * drift / res.eps)));
    if (m > o.max_pieces)
        throw ContinuationError("path needs " + std::to_string(m) + " pieces at eps=" + std::to_string(res.eps) +
                                "; shorten the path");
    res.pieces = m;
    std::vector<double> breaks;
    for (int k = 1; k < m; ++k) breaks.push_back(static_cast<double>(k) / m);
    if (m > 1) {
        paths.clear();
        for (auto& c : pos0) paths.push_back(follow_crit(w0, w1, c, guard, breaks, o));
    }

    // endpoint correspondence
    std::vector<int> target(pos0.size(), -1);
    for (std::size_t j = 0; j < pos0.size(); ++j) {
        for (std::size_t i = 0; i < pos1.size(); ++i)
            if (wrap_diff(paths[j].pts.back() - pos1[i].coords, per).norm() < 1e-6) target[j] = static_cast<int>(i);
        if (target[j] < 0 || pos1[target[j]].grading != pos0[j].grading)
            throw ContinuationError("critical point " + pos0[j].id + " does not continue to a generator at t=1");
    }
    {
        auto t = target;
        std::sort(t.begin(), t.end());
        if (std::adjacent_find(t.begin(), t.end()) != t.end() || pos0.size() != pos1.size())
            throw ContinuationError("continued critical points do not match the generators at t=1");
    }

    for (int k = 0; k < m; ++k) {
        double ba = static_cast<double>(k) / m, bb = static_cast<double>(k + 1) / m;
        ContinuationField W(w0, w1, res.eps, ba, bb);
        std::vector<CriticalPoint> cw;
        for (auto& P : paths) {
            for (int side = 0; side < 2; ++side) {
                Vec p(P.start.dim() + 1);
                p << P.at(side ? bb : ba), static_cast<double>(side);
                if (W.gradient(p).norm() > 1e-7) throw ContinuationError("internal: lifted point is not critical");
                CriticalPoint c = classify(W, p, P.start.shift);
                c.id = P.start.id + (side ? "@1" : "@0");
                cw.push_back(std::move(c));
            }
        }
        Box box = search;
        box.iv.push_back({0.0, 1.0});
        FlowSpace S = make_space(W, box, cw, o.flow);
        SplitSpace sp = split_space(S, cw);
        auto find = [&](const std::string& id) -> const CriticalPoint& {
            for (auto& c : sp.crits)
                if (c.id == id) return c;
            throw ContinuationError("internal: missing " + id);
        };
        for (std::size_t j = 0; j < paths.size(); ++j) {
            const CritPath& P = paths[j];
            auto seed = detail::adiabatic_seed(W, w0, w1, ba, bb, P.at(ba), guard, o);
            if (!seed)
                throw ContinuationError("no monotone seed for " + P.start.id + " on piece " + std::to_string(k) +
                                        "; lower eps or shorten the path");
            if (sp.field)
                for (auto& x : seed->points) x = sp.field->restrict(x);
            const CriticalPoint& cp = find(P.start.id + "@0");
            const CriticalPoint& cq = find(P.start.id + "@1");
            if (cq.grading - cp.grading != 1) throw ContinuationError("internal: continuation index gap is not one");
            auto conn = refine_connection(sp.space, cp, cq, *seed);
            if (!conn)
                throw ContinuationError("continuation line of " + P.start.id + " on piece " + std::to_string(k) +
                                        " did not converge");
            if (conn->cond > o.flow.cond_cap)
                throw ContinuationError("suspected non-transverse continuation line of " + P.start.id);
            if (!conn->confined)
                throw ContinuationError("continuation line of " + P.start.id + " leaves the confinement box");
            if (sp.field)
                for (auto& x : conn->nodes) x = sp.field->lift(x);
            res.lines.push_back({P.start.id, pos1[target[j]].id, k, std::move(*conn)});
        }
    }
    for (std::size_t j = 0; j < pos0.size(); ++j) res.phi.set(target[j], static_cast<int>(j), 1);
    return res;
}

// Endpoints must share everything but the core.
inline void check_path(const GeneratingFamily& F0, const GeneratingFamily& F1)
{
    auto same_box = [](const Box& a, const Box& b) {
        if (a.dim() != b.dim()) return false;
        for (int i = 0; i < a.dim(); ++i)
            if (a.iv[i].lo != b.iv[i].lo || a.iv[i].hi != b.iv[i].hi) return false;
        return true;
    };
    if (F0.base() != F1.base() || F0.n() != F1.n() || F0.N() != F1.N())
        throw ContinuationError("path endpoints differ in base or dimensions");
    if (F0.slope() != F1.slope()) throw ContinuationError("path endpoints differ in slope");
    if (!same_box(F0.inner_box(), F1.inner_box()) || !same_box(F0.outer_box(), F1.outer_box()))
        throw ContinuationError("path endpoints differ in boxes");
    if (F0.stab_axes() != F1.stab_axes()) throw ContinuationError("path endpoints differ in stabilization");
}

} // namespace gftrees
