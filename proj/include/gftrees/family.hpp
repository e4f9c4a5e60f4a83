#pragma once

// Linear-at-infinity generating families and the difference functions built from them.

#include "gftrees/field.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gftrees {

class FamilyError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Base { Euclidean, Torus };

struct Interval {
    double lo = 0.0, hi = 0.0;
    double width() const { return hi - lo; }
    double mid() const { return 0.5 * (lo + hi); }
};

struct Box {
    std::vector<Interval> iv;

    int dim() const { return static_cast<int>(iv.size()); }

    bool contains(const Vec& p, double pad = 0.0) const
    {
        for (int i = 0; i < dim(); ++i)
            if (p[i] < iv[i].lo - pad || p[i] > iv[i].hi + pad) return false;
        return true;
    }

    // scaled about its center
    Box inflate(double factor) const
    {
        Box b = *this;
        for (auto& I : b.iv) {
            double c = I.mid(), h = 0.5 * I.width() * factor;
            I = {c - h, c + h};
        }
        return b;
    }

    Box operator*(const Box& o) const
    {
        Box b = *this;
        b.iv.insert(b.iv.end(), o.iv.begin(), o.iv.end());
        return b;
    }

    Box slice(int from, int count) const
    {
        Box b;
        b.iv.assign(iv.begin() + from, iv.begin() + from + count);
        return b;
    }

    double max_abs_sq() const
    {
        double s = 0;
        for (auto& I : iv) s += std::max(I.lo * I.lo, I.hi * I.hi);
        return s;
    }
};

// One-sided C^2 cutoff: 1 on [lo_in, hi_in], 0 outside [lo_out, hi_out].
inline void cutoff_jet(double z, const Interval& in, const Interval& out, double& f0, double& f1, double& f2)
{
    f0 = 1.0;
    f1 = f2 = 0.0;
    if (z <= out.lo || z >= out.hi) {
        f0 = 0.0;
        return;
    }
    if (z < in.lo) {
        double w = in.lo - out.lo;
        bump_jet(1.0 + (in.lo - z) / w, f0, f1, f2);
        f1 = -f1 / w;
        f2 = f2 / (w * w);
    } else if (z > in.hi) {
        double w = out.hi - in.hi;
        bump_jet(1.0 + (z - in.hi) / w, f0, f1, f2);
        f1 = f1 / w;
        f2 = f2 / (w * w);
    }
}

namespace detail {

// Stack of per-thread jet buffers; nested evaluators each take their own frame.
class JetArena {
public:
    struct Frame {
        JetArena* arena;
        std::size_t mark;
        ~Frame() { arena->top_ = mark; }
    };

    Frame frame() { return Frame{this, top_}; }

    double* take(std::size_t n)
    {
        if (top_ + n > blocks_.size()) grow(top_ + n);
        double* p = blocks_.data() + top_;
        top_ += n;
        return p;
    }

private:
    std::vector<double> blocks_ = std::vector<double>(1 << 16);
    std::size_t top_ = 0;

    void grow(std::size_t need)
    {
        if (top_ != 0) throw std::logic_error("jet arena exhausted inside a live frame");
        blocks_.resize(std::max(need, 2 * blocks_.size()));
    }
};

inline JetArena& arena()
{
    thread_local JetArena a;
    return a;
}

} // namespace detail

class GeneratingFamily {
public:
    GeneratingFamily() = default;

    GeneratingFamily(Base base, int n, int N, Expr core, Vec slope, Box inner, Box outer)
        : base_(base), n_(n), N0_(N), core_(std::move(core)), slope_(std::move(slope)), inner_(std::move(inner)),
          outer_(std::move(outer))
    {
        validate();
    }

    Base base() const { return base_; }
    int n() const { return n_; }
    int N() const { return N0_ + static_cast<int>(stab_.size()); }
    int core_fiber_dim() const { return N0_; }
    const Expr& core() const { return core_; }
    const Vec& core_slope() const { return slope_; }
    const std::vector<int>& stabilization() const { return stab_; }
    const std::vector<Expr>& fpd() const { return fpd_; }

    Vec slope() const
    {
        Vec A = Vec::Zero(N());
        A.head(N0_) = slope_;
        return A;
    }

    // boxes over (x, e) including stabilization axes ([-1,1] inner, [-2,2] outer)
    Box inner_box() const { return with_stab(inner_, 1.0); }
    Box outer_box() const { return with_stab(outer_, 2.0); }
    Box base_box() const
    {
        if (base_ == Base::Torus) {
            Box b;
            b.iv.assign(n_, Interval{0.0, 1.0});
            return b;
        }
        return outer_.slice(0, n_);
    }
    Box inner_fiber() const { return inner_box().slice(n_, N()); }
    Box outer_fiber() const { return outer_box().slice(n_, N()); }

    GeneratingFamily stabilize(int sign) const
    {
        if (sign != 1 && sign != -1) throw FamilyError("stabilization sign must be +1 or -1");
        GeneratingFamily G = *this;
        G.stab_.push_back(sign);
        return G;
    }

    // F o Phi with Phi(x,e) = (x, phi_x(e)); phi given as N0 expressions in (x, e)
    GeneratingFamily precompose_fpd(std::vector<Expr> phi, int samples = 10000, std::uint64_t seed = 1) const
    {
        if (!fpd_.empty()) throw FamilyError("family already carries a fiber diffeomorphism");
        if (static_cast<int>(phi.size()) != N0_)
            throw FamilyError("fiber diffeomorphism needs " + std::to_string(N0_) + " components");
        for (auto& p : phi)
            if (p.layout().n != n_ || p.layout().N != N0_ || p.layout().copies != 1)
                throw FamilyError("fiber diffeomorphism layout mismatch");
        GeneratingFamily G = *this;
        G.fpd_ = std::move(phi);
        G.check_fpd(samples, seed);
        return G;
    }

    // phi_x(e) and its Jacobian in e
    Vec apply_fpd(const Vec& xe, Mat* jac = nullptr) const
    {
        int m = n_ + N0_;
        Vec r = xe.head(m);
        if (jac) *jac = Mat::Identity(N0_, N0_);
        if (fpd_.empty()) return r;
        for (int j = 0; j < N0_; ++j) {
            Derivatives d = fpd_[j].differentiate(xe.head(m));
            r[n_ + j] = d.value;
            if (jac) jac->row(j) = d.grad.segment(n_, N0_).transpose();
        }
        return r;
    }

    // in[0..n+N) are jets in m variables
    void eval_jet(const double* const* in, int m, int order, double* out) const
    {
        int st = jet::stride(m, order);
        auto& ar = detail::arena();
        auto fr = ar.frame();
        int k = n_ + N0_;
        if (k > kMaxVars) throw FamilyError("too many family variables");
        const double* z[kMaxVars];
        for (int i = 0; i < k; ++i) z[i] = in[i];
        if (!fpd_.empty()) {
            for (int j = 0; j < N0_; ++j) {
                double* r = ar.take(st);
                fpd_[j].eval_jet(in, m, order, r);
                z[n_ + j] = r;
            }
        }
        double* core = ar.take(st);
        core_.eval_jet(z, m, order, core);
        double* lin = ar.take(st);
        jet::constant(lin, 0.0, m, order);
        for (int j = 0; j < N0_; ++j)
            if (slope_[j] != 0.0) jet::axpy(lin, slope_[j], z[n_ + j], m, order);
        // chi, as a product of per-coordinate cutoffs
        double* chi = ar.take(st);
        double* tmp = ar.take(st);
        double* fac = ar.take(st);
        jet::constant(chi, 1.0, m, order);
        bool zero = false;
        for (int i = base_ == Base::Torus ? n_ : 0; i < k && !zero; ++i) {
            double f0, f1, f2;
            cutoff_jet(z[i][0], inner_.iv[i], outer_.iv[i], f0, f1, f2);
            if (f0 == 0.0 && f1 == 0.0) {
                zero = true;
                break;
            }
            if (f0 == 1.0 && f1 == 0.0 && f2 == 0.0) continue;
            jet::chain(fac, z[i], f0, f1, f2, m, order);
            jet::mul(tmp, chi, fac, m, order);
            std::swap(chi, tmp);
        }
        if (zero) {
            jet::copy(out, lin, m, order);
        } else {
            jet::axpy(core, -1.0, lin, m, order);
            jet::mul(tmp, chi, core, m, order);
            jet::lincomb(out, 1.0, tmp, 1.0, lin, m, order);
        }
        for (std::size_t s = 0; s < stab_.size(); ++s) {
            const double* e = in[k + s];
            jet::mul(tmp, e, e, m, order);
            jet::axpy(out, stab_[s], tmp, m, order);
        }
    }

    double value(const Vec& xe) const
    {
        auto& sd = detail::seeds();
        sd.build(xe.data(), n_ + N(), 0);
        double v;
        eval_jet(sd.ptr.data(), n_ + N(), 0, &v);
        return v;
    }

    Derivatives differentiate(const Vec& xe) const
    {
        int m = n_ + N();
        detail::Seeds sd;
        sd.build(xe.data(), m, 2);
        std::vector<double> buf(jet::stride(m, 2));
        eval_jet(sd.ptr.data(), m, 2, buf.data());
        Derivatives d;
        d.value = buf[0];
        d.grad = Eigen::Map<const Vec>(buf.data() + 1, m);
        d.hess = Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(buf.data() + 1 + m, m, m);
        return d;
    }

    // indices (within the fiber) of the stabilization axes
    std::vector<int> stab_axes() const
    {
        std::vector<int> a;
        for (std::size_t s = 0; s < stab_.size(); ++s) a.push_back(N0_ + static_cast<int>(s));
        return a;
    }

private:
    static constexpr int kMaxVars = 64;
    Base base_ = Base::Euclidean;
    int n_ = 0, N0_ = 0;
    Expr core_;
    Vec slope_;
    Box inner_, outer_;
    std::vector<Expr> fpd_;
    std::vector<int> stab_;

    Box with_stab(const Box& b, double r) const
    {
        Box out = b;
        if (base_ == Base::Torus)
            for (int i = 0; i < n_; ++i) out.iv[i] = {0.0, 1.0};
        for (std::size_t s = 0; s < stab_.size(); ++s) out.iv.push_back({-r, r});
        return out;
    }

    void validate() const
    {
        if (n_ < 0 || N0_ < 1) throw FamilyError("need n >= 0 and N >= 1");
        if (core_.empty()) throw FamilyError("missing core expression");
        const Layout& L = core_.layout();
        if (L.n != n_ || L.N != N0_ || L.copies != 1) throw FamilyError("core layout does not match (n, N)");
        if (slope_.size() != N0_) throw FamilyError("slope must have N components");
        if (slope_.isZero(0.0)) throw FamilyError("slope A must be nonzero");
        if (inner_.dim() != n_ + N0_ || outer_.dim() != n_ + N0_) throw FamilyError("boxes must have n + N intervals");
        int first = base_ == Base::Torus ? n_ : 0;
        for (int i = first; i < n_ + N0_; ++i) {
            const Interval &a = inner_.iv[i], &b = outer_.iv[i];
            if (!(a.lo < a.hi && b.lo < a.lo && a.hi < b.hi))
                throw FamilyError("inner box must lie strictly inside the outer box (axis " + std::to_string(i + 1) +
                                  ")");
        }
    }

    void check_fpd(int samples, std::uint64_t seed) const
    {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> U(0.0, 1.0);
        Box big = outer_.inflate(3.0);
        if (base_ == Base::Torus)
            for (int i = 0; i < n_; ++i) big.iv[i] = {0.0, 1.0};
        int m = n_ + N0_;
        Vec p(m);
        int outside = 0, inside = 0;
        for (int it = 0; it < 200 * samples && (outside < samples || inside < samples); ++it) {
            for (int i = 0; i < m; ++i) p[i] = big.iv[i].lo + U(rng) * big.iv[i].width();
            bool in = true;
            for (int i = base_ == Base::Torus ? n_ : 0; i < m; ++i)
                if (p[i] <= outer_.iv[i].lo || p[i] >= outer_.iv[i].hi) in = false;
            if (!in && outside < samples) {
                ++outside;
                Vec q = apply_fpd(p);
                if ((q - p).cwiseAbs().maxCoeff() > 1e-12)
                    throw FamilyError("fiber diffeomorphism is not the identity outside the outer box");
            } else if (in && inside < samples) {
                ++inside;
            } else {
                continue;
            }
            Mat J;
            apply_fpd(p, &J);
            // identity at infinity fixes the sign of det J
            if (J.determinant() < 1e-8) throw FamilyError("fiber diffeomorphism has a singular Jacobian");
        }
    }
};

// Q on R^N with a single nondegenerate minimum at 0_Q, equal to |e|^2 outside its box; scaled by lambda.
class QuadraticLike {
public:
    QuadraticLike() = default;

    static QuadraticLike standard(int N)
    {
        QuadraticLike q;
        q.N_ = N;
        q.zero_ = Vec::Zero(N);
        q.box_.iv.assign(N, Interval{-1.0, 1.0});
        return q;
    }

    QuadraticLike(Expr q, Vec zero, Box box) : N_(static_cast<int>(zero.size())), q_(std::move(q)), zero_(std::move(zero)), box_(std::move(box))
    {
        validate();
    }

    int N() const { return N_; }
    bool exact() const { return q_.empty(); }
    double scale() const { return lambda_; }
    const Vec& zero() const { return zero_; }
    const Box& box() const { return box_; }
    const Expr& expr() const { return q_; }

    QuadraticLike scaled(double lambda) const
    {
        if (!(lambda > 0)) throw FamilyError("Q scale must be positive");
        QuadraticLike q = *this;
        q.lambda_ = lambda;
        return q;
    }

    void eval_jet(const double* const* e, int m, int order, double* out) const
    {
        if (exact()) {
            auto& ar = detail::arena();
            auto fr = ar.frame();
            double* t = ar.take(jet::stride(m, order));
            jet::constant(out, 0.0, m, order);
            for (int j = 0; j < N_; ++j) {
                jet::mul(t, e[j], e[j], m, order);
                jet::axpy(out, lambda_, t, m, order);
            }
            return;
        }
        q_.eval_jet(e, m, order, out);
        int st = jet::stride(m, order);
        for (int i = 0; i < st; ++i) out[i] *= lambda_;
    }

    double value(const Vec& e) const
    {
        if (exact()) return lambda_ * e.squaredNorm();
        return lambda_ * q_.value(e);
    }

private:
    int N_ = 0;
    Expr q_;
    Vec zero_;
    Box box_;
    double lambda_ = 1.0;

    void validate() const
    {
        const Layout& L = q_.layout();
        if (L.n != 0 || L.N != N_ || L.copies != 1) throw FamilyError("Q must be an expression in e1..eN");
        if (box_.dim() != N_) throw FamilyError("Q box must have N intervals");
        Derivatives d = q_.differentiate(zero_);
        if (std::abs(d.value) > 1e-12) throw FamilyError("Q(0_Q) must vanish");
        if (d.grad.norm() > 1e-9) throw FamilyError("0_Q is not a critical point of Q");
        Eigen::SelfAdjointEigenSolver<Mat> es(d.hess);
        if (es.eigenvalues().minCoeff() <= 1e-9) throw FamilyError("Hessian of Q at 0_Q is not positive definite");
        // exterior: Q = |e|^2, and no other critical point inside
        std::mt19937_64 rng(11);
        std::uniform_real_distribution<double> U(0.0, 1.0);
        Box big = box_.inflate(3.0);
        for (int it = 0; it < 2000; ++it) {
            Vec e(N_);
            for (int j = 0; j < N_; ++j) e[j] = big.iv[j].lo + U(rng) * big.iv[j].width();
            if (!box_.contains(e) && std::abs(q_.value(e) - e.squaredNorm()) > 1e-12)
                throw FamilyError("Q differs from |e|^2 outside its box");
        }
        for (int it = 0; it < 400; ++it) {
            Vec e(N_);
            for (int j = 0; j < N_; ++j) e[j] = box_.iv[j].lo + U(rng) * box_.iv[j].width();
            for (int k = 0; k < 50; ++k) {
                Derivatives dd = q_.differentiate(e);
                if (dd.grad.norm() < 1e-12) break;
                e -= dd.hess.completeOrthogonalDecomposition().solve(dd.grad);
                if (!box_.inflate(1.5).contains(e)) break;
            }
            if (q_.differentiate(e).grad.norm() < 1e-10 && (e - zero_).norm() > 1e-6 && box_.contains(e))
                throw FamilyError("Q has a second critical point");
        }
    }
};

// Minimal lambda = factor^k with sup over the inner fiber box^3 of Q(e1) + Q(e2) + Q(e3) below rho.
inline double fit_q_scale(const GeneratingFamily& F, const QuadraticLike& Q, double rho, double factor = 0.5,
                          int grid = 9)
{
    if (!(factor > 0 && factor < 1)) throw FamilyError("Q scale factor must lie in (0,1)");
    Box B = F.inner_fiber();
    double qmax = 0;
    if (Q.exact()) {
        qmax = B.max_abs_sq();
    } else {
        int N = B.dim();
        std::vector<int> idx(N, 0);
        bool first = true;
        while (true) {
            Vec e(N);
            for (int j = 0; j < N; ++j) e[j] = B.iv[j].lo + B.iv[j].width() * idx[j] / (grid - 1);
            double v = Q.scaled(1.0).value(e);
            if (first || v > qmax) qmax = v;
            first = false;
            int j = 0;
            while (j < N && ++idx[j] == grid) idx[j++] = 0;
            if (j == N) break;
        }
    }
    double sup = 3 * qmax;
    double lambda = 1.0;
    while (lambda * sup >= rho) lambda *= factor;
    return lambda;
}

// F itself as a field on R^{n+N}.
class FamilyField : public Field {
public:
    explicit FamilyField(GeneratingFamily F) : F_(std::move(F)) {}
    int dim() const override { return F_.n() + F_.N(); }
    std::string tag() const override { return "F"; }
    std::vector<int> periodic_axes() const override { return base_axes(F_); }
    void jet(const double* p, int order, double* out) const override
    {
        detail::Seeds sd;
        sd.build(p, dim(), order);
        F_.eval_jet(sd.ptr.data(), dim(), order, out);
    }

    static std::vector<int> base_axes(const GeneratingFamily& F)
    {
        std::vector<int> a;
        if (F.base() == Base::Torus)
            for (int i = 0; i < F.n(); ++i) a.push_back(i);
        return a;
    }

private:
    GeneratingFamily F_;
};

// w(x, e, e') = F(x, e) - F(x, e') on R^{n+2N}.
class DifferenceField : public Field {
public:
    explicit DifferenceField(GeneratingFamily F) : F_(std::move(F)) {}

    const GeneratingFamily& family() const { return F_; }
    int dim() const override { return F_.n() + 2 * F_.N(); }
    std::string tag() const override { return "w"; }
    std::vector<int> periodic_axes() const override { return FamilyField::base_axes(F_); }
    std::vector<int> quadratic_axes() const override
    {
        std::vector<int> a;
        for (int s : F_.stab_axes()) {
            a.push_back(F_.n() + s);
            a.push_back(F_.n() + F_.N() + s);
        }
        return a;
    }

    // Fiber slot k (0-based) starts at this coordinate.
    int slot(int k) const { return F_.n() + k * F_.N(); }

    void jet(const double* p, int order, double* out) const override { eval(p, order, out); }

    void eval(const double* p, int order, double* out) const
    {
        int D = dim(), n = F_.n(), N = F_.N();
        int st = jet::stride(D, order);
        detail::Seeds sd;
        sd.build(p, D, order);
        std::vector<const double*> in(n + N);
        std::vector<double> b(st);
        for (int i = 0; i < n; ++i) in[i] = sd.ptr[i];
        for (int j = 0; j < N; ++j) in[n + j] = sd.ptr[n + j];
        F_.eval_jet(in.data(), D, order, out);
        for (int j = 0; j < N; ++j) in[n + j] = sd.ptr[n + N + j];
        F_.eval_jet(in.data(), D, order, b.data());
        for (int i = 0; i < st; ++i) out[i] -= b[i];
    }

    // search box: base box times two copies of the outer fiber box
    Box search_box() const { return F_.base_box() * F_.outer_fiber() * F_.outer_fiber(); }
    Box inner_search_box() const
    {
        Box bx = F_.inner_box().slice(0, F_.n());
        if (F_.base() == Base::Torus) bx = F_.base_box();
        return bx * F_.inner_fiber() * F_.inner_fiber();
    }

private:
    GeneratingFamily F_;
};

// w_{i,j;3} on R^{n+3N}: F(x,e_i) - F(x,e_j) +/- Q(e_k).
class ExtendedField : public Field {
public:
    ExtendedField(GeneratingFamily F, QuadraticLike Q, int i, int j) : F_(std::move(F)), Q_(std::move(Q)), i_(i), j_(j)
    {
        if (!(1 <= i && i < j && j <= 3)) throw FamilyError("pair must satisfy 1 <= i < j <= 3");
        if (Q_.N() != F_.N()) throw FamilyError("Q fiber dimension does not match F");
        k_ = 6 - i - j;
        qsign_ = (k_ < i || k_ > j) ? 1 : -1;
    }

    const GeneratingFamily& family() const { return F_; }
    const QuadraticLike& Q() const { return Q_; }
    int i() const { return i_; }
    int j() const { return j_; }
    int k() const { return k_; }
    int q_sign() const { return qsign_; }
    // shift between index and grading
    int shift() const { return (j_ - i_) * F_.N(); }
    int slot(int s) const { return F_.n() + (s - 1) * F_.N(); }

    int dim() const override { return F_.n() + 3 * F_.N(); }
    std::string tag() const override { return "w" + std::to_string(i_) + std::to_string(j_) + ";3"; }
    std::vector<int> periodic_axes() const override { return FamilyField::base_axes(F_); }
    std::vector<int> quadratic_axes() const override
    {
        std::vector<int> a;
        for (int s : F_.stab_axes()) {
            a.push_back(slot(i_) + s);
            a.push_back(slot(j_) + s);
        }
        if (Q_.exact())
            for (int t = 0; t < F_.N(); ++t) a.push_back(slot(k_) + t);
        std::sort(a.begin(), a.end());
        return a;
    }

    void jet(const double* p, int order, double* out) const override
    {
        int D = dim(), n = F_.n(), N = F_.N();
        int st = jet::stride(D, order);
        detail::Seeds sd;
        sd.build(p, D, order);
        std::vector<const double*> in(n + N);
        std::vector<double> b(st);
        for (int t = 0; t < n; ++t) in[t] = sd.ptr[t];
        auto at = [&](int s) {
            for (int t = 0; t < N; ++t) in[n + t] = sd.ptr[slot(s) + t];
        };
        at(i_);
        F_.eval_jet(in.data(), D, order, out);
        at(j_);
        F_.eval_jet(in.data(), D, order, b.data());
        for (int t = 0; t < st; ++t) out[t] -= b[t];
        Q_.eval_jet(sd.ptr.data() + slot(k_), D, order, b.data());
        for (int t = 0; t < st; ++t) out[t] += qsign_ * b[t];
    }

    Box search_box() const
    {
        Box b = F_.base_box();
        for (int s = 1; s <= 3; ++s) b = b * (s == k_ ? q_box() : F_.outer_fiber());
        return b;
    }

    Box q_box() const
    {
        Box qb = Q_.box();
        // the quadratic part of Q is proper; its critical point sits in its box
        return qb;
    }

    // embed (x, e, e') in P_3 with 0_Q in slot k
    Vec embed(const Vec& p) const
    {
        int n = F_.n(), N = F_.N();
        Vec y(dim());
        y.head(n) = p.head(n);
        y.segment(slot(i_), N) = p.segment(n, N);
        y.segment(slot(j_), N) = p.segment(n + N, N);
        y.segment(slot(k_), N) = Q_.zero();
        return y;
    }

    // drop slot k
    Vec project(const Vec& y) const
    {
        int n = F_.n(), N = F_.N();
        Vec p(n + 2 * N);
        p.head(n) = y.head(n);
        p.segment(n, N) = y.segment(slot(i_), N);
        p.segment(n + N, N) = y.segment(slot(j_), N);
        return p;
    }

private:
    GeneratingFamily F_;
    QuadraticLike Q_;
    int i_, j_, k_, qsign_;
};

// (f, g, f+g) on the flat torus.
struct MorseFields {
    FieldPtr h1, h2, h3;
};

inline MorseFields morse_mode_fields(const Expr& f, const Expr& g)
{
    if (f.dim() != g.dim()) throw FamilyError("Morse-mode functions must live on the same torus");
    if (f.layout().N != 0 || g.layout().N != 0) throw FamilyError("Morse-mode functions take base variables only");
    auto h1 = std::make_shared<ExprField>(f, "f", true);
    auto h2 = std::make_shared<ExprField>(g, "g", true);
    auto h3 = std::make_shared<SumField>(h1, h2, "f+g");
    return {h1, h2, h3};
}

// Largest |F - A.e| at sampled points outside the outer box (fiber axes only on a torus base).
inline double exterior_linearity_defect(const GeneratingFamily& F, int samples, std::uint64_t seed = 3)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    int n = F.n(), N0 = F.core_fiber_dim();
    // stabilization axes are pinned to 0 so the quadratic terms drop out
    Box outer = F.outer_box();
    Box big = outer.inflate(3.0);
    Vec A = F.slope();
    int got = 0;
    double worst = 0;
    Vec p(n + F.N());
    while (got < samples) {
        for (int i = 0; i < n + N0; ++i) p[i] = big.iv[i].lo + U(rng) * big.iv[i].width();
        for (int i = n + N0; i < n + F.N(); ++i) p[i] = 0.0;
        bool in = true;
        for (int i = F.base() == Base::Torus ? n : 0; i < n + N0; ++i)
            if (p[i] > outer.iv[i].lo && p[i] < outer.iv[i].hi) continue;
            else in = false;
        if (in) continue;
        ++got;
        worst = std::max(worst, std::abs(F.value(p) - A.dot(p.tail(F.N()))));
    }
    return worst;
}

// Least |grad w| on a grid over outer^2 minus inner^2 of the difference function.
inline double blend_annulus_min_gradient(const GeneratingFamily& F, int per_axis = 21)
{
    DifferenceField w(F);
    Box outer = w.search_box();
    Box inner = w.inner_search_box();
    int D = w.dim();
    std::vector<int> quad = w.quadratic_axes();
    std::vector<int> axes;
    for (int i = 0; i < D; ++i)
        if (std::find(quad.begin(), quad.end(), i) == quad.end()) axes.push_back(i);
    int k = static_cast<int>(axes.size());
    std::vector<int> idx(k, 0);
    double best = std::numeric_limits<double>::infinity();
    Vec p = Vec::Zero(D), g;
    while (true) {
        bool in_inner = true;
        for (int a = 0; a < k; ++a) {
            int i = axes[a];
            p[i] = outer.iv[i].lo + outer.iv[i].width() * idx[a] / (per_axis - 1);
            if (p[i] < inner.iv[i].lo || p[i] > inner.iv[i].hi) in_inner = false;
        }
        if (!in_inner) {
            w.gradient(p, g);
            best = std::min(best, g.norm());
        }
        int a = 0;
        while (a < k && ++idx[a] == per_axis) idx[a++] = 0;
        if (a == k) break;
    }
    return best;
}

// w13 - w12 - w23 + Q(e1) + Q(e2) + Q(e3) at y; vanishes identically.
inline double jump_residual(const ExtendedField& w12, const ExtendedField& w23, const ExtendedField& w13,
                            const Vec& y)
{
    const auto& Q = w12.Q();
    int N = w12.family().N();
    double q1 = Q.value(y.segment(w12.slot(1), N));
    double q2 = Q.value(y.segment(w12.slot(2), N));
    double q3 = Q.value(y.segment(w12.slot(3), N));
    return w13.value(y) - w12.value(y) - w23.value(y) + (q1 + q2 + q3);
}

} // namespace gftrees
