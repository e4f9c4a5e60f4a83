#pragma once

// Critical points of difference functions: search, classification, iota embedding, rho bound.

#include "gftrees/family.hpp"

#include <tbb/blocked_range.h>
#include <tbb/parallel_for.h>
#include <tbb/parallel_reduce.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace gftrees {

class CriticalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct CritTolerances {
    double grad = 1e-9;
    double dedup = 1e-6;
    double degenerate = 1e-6;
    double value = 1e-7;
    int newton_iters = 60;
};

struct CriticalPoint {
    std::string id;
    Vec coords;
    double value = 0.0;
    int index = 0;
    int grading = 0;
    int shift = 0;
    Vec eigs;     // ascending
    Mat frame;    // eigenvectors as columns, matching eigs
    std::string field;

    int dim() const { return static_cast<int>(coords.size()); }
    int coindex() const { return dim() - index; }
    // positive-eigenvalue directions (unstable for the positive gradient flow)
    Mat unstable() const { return frame.rightCols(coindex()); }
    Mat stable() const { return frame.leftCols(index); }
    double min_abs_eig() const { return eigs.cwiseAbs().minCoeff(); }
};

// Symmetric eigendecomposition block by block along the sparsity pattern, so decoupled axes stay clean.
inline void block_eigen(const Mat& H, Vec& eigs, Mat& vecs)
{
    int D = static_cast<int>(H.rows());
    std::vector<int> comp(D, -1);
    int nc = 0;
    for (int s = 0; s < D; ++s) {
        if (comp[s] >= 0) continue;
        std::vector<int> stack{s};
        comp[s] = nc;
        while (!stack.empty()) {
            int a = stack.back();
            stack.pop_back();
            for (int b = 0; b < D; ++b)
                if (comp[b] < 0 && (H(a, b) != 0.0 || H(b, a) != 0.0)) {
                    comp[b] = nc;
                    stack.push_back(b);
                }
        }
        ++nc;
    }
    std::vector<std::pair<double, Vec>> pairs;
    for (int c = 0; c < nc; ++c) {
        std::vector<int> ix;
        for (int i = 0; i < D; ++i)
            if (comp[i] == c) ix.push_back(i);
        int k = static_cast<int>(ix.size());
        Mat B(k, k);
        for (int a = 0; a < k; ++a)
            for (int b = 0; b < k; ++b) B(a, b) = H(ix[a], ix[b]);
        Eigen::SelfAdjointEigenSolver<Mat> es(B);
        for (int a = 0; a < k; ++a) {
            Vec v = Vec::Zero(D);
            for (int b = 0; b < k; ++b) v[ix[b]] = es.eigenvectors()(b, a);
            // deterministic orientation: largest component positive
            Eigen::Index im;
            v.cwiseAbs().maxCoeff(&im);
            if (v[im] < 0) v = -v;
            pairs.emplace_back(es.eigenvalues()[a], v);
        }
    }
    std::stable_sort(pairs.begin(), pairs.end(), [](auto& a, auto& b) { return a.first < b.first; });
    eigs.resize(D);
    vecs.resize(D, D);
    for (int i = 0; i < D; ++i) {
        eigs[i] = pairs[i].first;
        vecs.col(i) = pairs[i].second;
    }
}

inline CriticalPoint classify(const Field& f, const Vec& p, int shift)
{
    CriticalPoint c;
    c.coords = p;
    c.field = f.tag();
    Derivatives d = f.derivatives(p);
    c.value = d.value;
    block_eigen(d.hess, c.eigs, c.frame);
    c.index = static_cast<int>((c.eigs.array() < 0).count());
    c.shift = shift;
    c.grading = c.index - shift;
    return c;
}

namespace detail {

inline std::string fmt_point(const Vec& p)
{
    std::ostringstream os;
    os.precision(6);
    os << "(";
    for (int i = 0; i < p.size(); ++i) os << (i ? ", " : "") << p[i];
    os << ")";
    return os.str();
}

// Newton on grad f from p; nullopt on divergence or leaving the guard box.
inline std::optional<Vec> newton_root(const Field& f, Vec p, const Box& guard, const CritTolerances& tol)
{
    auto per = f.periodic_axes();
    for (int it = 0; it < tol.newton_iters; ++it) {
        Derivatives d = f.derivatives(p);
        if (!std::isfinite(d.grad.norm())) return std::nullopt;
        if (d.grad.norm() < tol.grad) return p;
        Vec step = d.hess.completeOrthogonalDecomposition().solve(d.grad);
        double cap = 0.5;
        if (step.norm() > cap) step *= cap / step.norm();
        p -= step;
        if (!per.empty()) p = wrap_point(p, per);
        if (!guard.contains(p)) return std::nullopt;
    }
    if (f.gradient(p).norm() < tol.grad) return p;
    return std::nullopt;
}

} // namespace detail

struct CritSearch {
    Box box;
    int per_axis = 15;
    CritTolerances tol;
    int shift = 0;
    bool exclude_zero = true; // drop the value-0 diagonal (generating-family mode)
};

// All isolated nondegenerate critical points found from a grid of Newton seeds, sorted by value.
inline std::vector<CriticalPoint> find_critical_points(const Field& f, const CritSearch& s)
{
    int D = f.dim();
    if (s.box.dim() != D) throw CriticalError("search box dimension does not match the field");
    if (s.per_axis < 2) throw CriticalError("grid density must be at least 2 per axis");
    std::vector<int> quad = f.quadratic_axes();
    auto per = f.periodic_axes();
    std::vector<int> free;
    for (int i = 0; i < D; ++i)
        if (std::find(quad.begin(), quad.end(), i) == quad.end()) free.push_back(i);
    std::size_t total = 1;
    for (std::size_t a = 0; a < free.size(); ++a) total *= s.per_axis;

    Box guard = s.box.inflate(1.5);
    for (int i : per) guard.iv[i] = {-1e9, 1e9};

    std::vector<std::optional<Vec>> roots(total);
    tbb::parallel_for(tbb::blocked_range<std::size_t>(0, total), [&](const tbb::blocked_range<std::size_t>& r) {
        for (std::size_t k = r.begin(); k != r.end(); ++k) {
            Vec p = Vec::Zero(D);
            std::size_t rem = k;
            for (int i : free) {
                int j = static_cast<int>(rem % s.per_axis);
                rem /= s.per_axis;
                const Interval& I = s.box.iv[i];
                // periodic axes: the endpoint duplicates the start
                double frac = per.empty() || std::find(per.begin(), per.end(), i) == per.end()
                                  ? double(j) / (s.per_axis - 1)
                                  : double(j) / s.per_axis;
                p[i] = I.lo + frac * I.width();
            }
            roots[k] = detail::newton_root(f, p, guard, s.tol);
        }
    });

    std::vector<Vec> found;
    for (auto& r : roots)
        if (r) found.push_back(per.empty() ? *r : wrap_point(*r, per));
    std::sort(found.begin(), found.end(), [](const Vec& a, const Vec& b) {
        return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(), b.data() + b.size());
    });
    std::vector<CriticalPoint> out;
    std::vector<Vec> kept;
    for (const Vec& p : found) {
        bool dup = false;
        for (const Vec& q : kept)
            if (wrap_diff(p - q, per).norm() < s.tol.dedup) {
                dup = true;
                break;
            }
        if (dup) continue;
        kept.push_back(p);
        double v = f.value(p);
        if (s.exclude_zero && std::abs(v) < s.tol.value) continue;
        if (!s.box.contains(p, 1e-9) && per.empty())
            throw CriticalError("critical point " + detail::fmt_point(p) + " of " + f.tag() +
                                " lies outside the search box");
        CriticalPoint c = classify(f, p, s.shift);
        if (c.min_abs_eig() <= s.tol.degenerate)
            throw CriticalError("degenerate critical point " + detail::fmt_point(p) + " of " + f.tag() +
                                " (min |eig| = " + std::to_string(c.min_abs_eig()) + "); family is not generic");
        out.push_back(std::move(c));
    }
    // equal values up to round-off are ordered by position
    auto key = [](double v) { return std::llround(v * 1e8); };
    std::stable_sort(out.begin(), out.end(), [&](const CriticalPoint& a, const CriticalPoint& b) {
        if (key(a.value) != key(b.value)) return key(a.value) < key(b.value);
        return std::lexicographical_compare(a.coords.data(), a.coords.data() + a.coords.size(), b.coords.data(),
                                            b.coords.data() + b.coords.size());
    });
    int pos = 0, neg = 0;
    for (auto& c : out) c.id = c.value > 0 ? "p" + std::to_string(++pos) : "n" + std::to_string(++neg);
    return out;
}

inline std::vector<CriticalPoint> positive_part(const std::vector<CriticalPoint>& cs)
{
    std::vector<CriticalPoint> r;
    for (auto& c : cs)
        if (c.value > 0) r.push_back(c);
    return r;
}

inline CritSearch difference_search(const DifferenceField& w, int per_axis, const CritTolerances& tol)
{
    return CritSearch{w.search_box(), per_axis, tol, w.family().N(), true};
}

// Crit_+(w) of a generating family.
inline std::vector<CriticalPoint> chords(const GeneratingFamily& F, int per_axis = 15, const CritTolerances& tol = {})
{
    DifferenceField w(F);
    return positive_part(find_critical_points(w, difference_search(w, per_axis, tol)));
}

// iota: insert 0_Q in the free slot and check the image.
inline CriticalPoint iota(const CriticalPoint& p, const ExtendedField& w, const CritTolerances& tol = {})
{
    Vec y = w.embed(p.coords);
    CriticalPoint c = classify(w, y, w.shift());
    c.id = p.id;
    double g = w.gradient(y).norm();
    int N = w.family().N();
    int expect = p.index + (w.j() - w.i() - 1) * N;
    if (g >= tol.grad)
        throw CriticalError("iota image of " + p.id + " is not critical for " + w.tag());
    if (std::abs(c.value - p.value) > 1e-12)
        throw CriticalError("iota changed the value of " + p.id + " in " + w.tag());
    if (c.index != expect || c.grading != p.grading)
        throw CriticalError("iota index mismatch for " + p.id + " in " + w.tag() + ": got " + std::to_string(c.index) +
                            ", expected " + std::to_string(expect));
    return c;
}

struct RhoBound {
    double rho = 0.0;
    double lipschitz = 0.0;
    double delta = 0.0;
};

inline double least_positive_value(const std::vector<CriticalPoint>& crits)
{
    double rho = std::numeric_limits<double>::infinity();
    for (auto& c : crits)
        if (c.value > 0) rho = std::min(rho, c.value);
    if (!std::isfinite(rho)) throw CriticalError("no Reeb chords");
    return rho;
}

// Largest gradient norm of a field on a uniform grid over K.
inline double max_gradient(const Field& f, const Box& K, int per_axis)
{
    int D = f.dim();
    std::size_t total = 1;
    for (int i = 0; i < D; ++i) total *= per_axis;
    return tbb::parallel_reduce(
        tbb::blocked_range<std::size_t>(0, total), 0.0,
        [&](const tbb::blocked_range<std::size_t>& r, double best) {
            Vec p(D), g;
            for (std::size_t k = r.begin(); k != r.end(); ++k) {
                std::size_t rem = k;
                for (int i = 0; i < D; ++i) {
                    int j = static_cast<int>(rem % per_axis);
                    rem /= per_axis;
                    p[i] = K.iv[i].lo + K.iv[i].width() * j / (per_axis - 1);
                }
                f.gradient(p, g);
                best = std::max(best, g.norm());
            }
            return best;
        },
        [](double a, double b) { return std::max(a, b); });
}

inline int grid_per_axis(int D, double budget = 200000)
{
    return std::max(3, static_cast<int>(std::floor(std::pow(budget, 1.0 / D) + 1e-9)));
}

// K = K'_M x (K'_E)^3, the compact set holding every tree.
inline Box tree_region(const GeneratingFamily& F)
{
    return F.base_box() * F.outer_fiber() * F.outer_fiber() * F.outer_fiber();
}

inline RhoBound rho_and_perturbation_bound(const std::vector<CriticalPoint>& crits,
                                           const std::vector<const Field*>& fields, const Box& K, int per_axis = 0)
{
    RhoBound b;
    b.rho = least_positive_value(crits);
    for (const Field* f : fields) {
        int g = per_axis > 0 ? per_axis : grid_per_axis(f->dim());
        b.lipschitz = std::max(b.lipschitz, max_gradient(*f, K, g));
    }
    if (!(b.lipschitz > 0)) throw CriticalError("vanishing gradient bound on K");
    b.delta = b.rho / (4 * b.lipschitz);
    return b;
}

} // namespace gftrees
