#pragma once

// Scalar fields on R^D evaluated as second-order jets.

#include "gftrees/expr.hpp"

#include <algorithm>
#include <memory>
#include <string>
#include <vector>

namespace gftrees {

class Field {
public:
    virtual ~Field() = default;

    virtual int dim() const = 0;
    // out receives a jet of stride jet::stride(dim(), order) seeded at p
    virtual void jet(const double* p, int order, double* out) const = 0;
    virtual std::string tag() const = 0;

    // coordinates taken modulo 1
    virtual std::vector<int> periodic_axes() const { return {}; }
    // axes along which the field is an exact decoupled c*z^2
    virtual std::vector<int> quadratic_axes() const { return {}; }

    bool periodic() const { return !periodic_axes().empty(); }

    double value(const Vec& p) const
    {
        double v = 0;
        jet(p.data(), 0, &v);
        return v;
    }

    double gradient(const Vec& p, Vec& g) const
    {
        thread_local std::vector<double> buf;
        int D = dim();
        buf.resize(1 + D);
        jet(p.data(), 1, buf.data());
        g = Eigen::Map<const Vec>(buf.data() + 1, D);
        return buf[0];
    }

    Vec gradient(const Vec& p) const
    {
        Vec g;
        gradient(p, g);
        return g;
    }

    Derivatives derivatives(const Vec& p) const
    {
        int D = dim();
        std::vector<double> buf(jet::stride(D, 2));
        jet(p.data(), 2, buf.data());
        Derivatives d;
        d.value = buf[0];
        d.grad = Eigen::Map<const Vec>(buf.data() + 1, D);
        d.hess = Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(buf.data() + 1 + D, D, D);
        return d;
    }
};

using FieldPtr = std::shared_ptr<const Field>;

namespace detail {

// Identity-seeded input jets for a point, reused per thread.
struct Seeds {
    std::vector<double> data;
    std::vector<const double*> ptr;

    void build(const double* p, int m, int order)
    {
        int st = jet::stride(m, order);
        data.resize(static_cast<std::size_t>(m) * st);
        ptr.resize(m);
        for (int i = 0; i < m; ++i) {
            jet::variable(data.data() + i * st, p[i], i, m, order);
            ptr[i] = data.data() + i * st;
        }
    }
};

inline Seeds& seeds()
{
    thread_local Seeds s;
    return s;
}

} // namespace detail

// Field given directly by an expression in x1..xD.
class ExprField : public Field {
public:
    ExprField(Expr f, std::string tag, bool periodic = false)
        : f_(std::move(f)), tag_(std::move(tag)), periodic_(periodic) {}

    int dim() const override { return f_.dim(); }
    std::string tag() const override { return tag_; }
    std::vector<int> periodic_axes() const override
    {
        std::vector<int> ax;
        if (periodic_)
            for (int i = 0; i < dim(); ++i) ax.push_back(i);
        return ax;
    }

    void jet(const double* p, int order, double* out) const override
    {
        // copy: nested evaluations may reuse the per-thread seed buffer
        detail::Seeds s;
        s.build(p, dim(), order);
        f_.eval_jet(s.ptr.data(), dim(), order, out);
    }

    const Expr& expr() const { return f_; }

private:
    Expr f_;
    std::string tag_;
    bool periodic_;
};

// Pointwise sum of two fields on the same space.
class SumField : public Field {
public:
    SumField(FieldPtr a, FieldPtr b, std::string tag) : a_(std::move(a)), b_(std::move(b)), tag_(std::move(tag)) {}

    int dim() const override { return a_->dim(); }
    std::string tag() const override { return tag_; }
    std::vector<int> periodic_axes() const override { return a_->periodic_axes(); }

    void jet(const double* p, int order, double* out) const override
    {
        int st = jet::stride(dim(), order);
        std::vector<double> tmp(st);
        a_->jet(p, order, out);
        b_->jet(p, order, tmp.data());
        for (int i = 0; i < st; ++i) out[i] += tmp[i];
    }

private:
    FieldPtr a_, b_;
    std::string tag_;
};

// Restriction of a field to a coordinate subspace; the dropped axes are held at zero.
class SliceField : public Field {
public:
    SliceField(const Field& parent, std::vector<int> keep) : parent_(&parent), keep_(std::move(keep)) {}

    int dim() const override { return static_cast<int>(keep_.size()); }
    std::string tag() const override { return parent_->tag() + "|slice"; }
    std::vector<int> periodic_axes() const override
    {
        std::vector<int> ax;
        for (int i : parent_->periodic_axes()) {
            auto it = std::find(keep_.begin(), keep_.end(), i);
            if (it != keep_.end()) ax.push_back(static_cast<int>(it - keep_.begin()));
        }
        return ax;
    }

    void jet(const double* p, int order, double* out) const override
    {
        int D = parent_->dim(), m = dim();
        thread_local std::vector<double> full, buf;
        full.assign(D, 0.0);
        for (int i = 0; i < m; ++i) full[keep_[i]] = p[i];
        buf.resize(jet::stride(D, order));
        parent_->jet(full.data(), order, buf.data());
        out[0] = buf[0];
        if (order == 0) return;
        for (int i = 0; i < m; ++i) out[1 + i] = buf[1 + keep_[i]];
        if (order == 1) return;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < m; ++j) out[1 + m + i * m + j] = buf[1 + D + keep_[i] * D + keep_[j]];
    }

    const std::vector<int>& keep() const { return keep_; }
    Vec restrict(const Vec& p) const
    {
        Vec r(dim());
        for (int i = 0; i < dim(); ++i) r[i] = p[keep_[i]];
        return r;
    }
    Vec lift(const Vec& p) const
    {
        Vec r = Vec::Zero(parent_->dim());
        for (int i = 0; i < dim(); ++i) r[keep_[i]] = p[i];
        return r;
    }

private:
    const Field* parent_;
    std::vector<int> keep_;
};

// Minimal-image difference for periodic axes (period 1).
inline Vec wrap_diff(const Vec& d, const std::vector<int>& periodic)
{
    Vec r = d;
    for (int i : periodic) r[i] -= std::round(r[i]);
    return r;
}

inline Vec wrap_point(const Vec& p, const std::vector<int>& periodic)
{
    Vec r = p;
    for (int i : periodic) {
        r[i] -= std::floor(r[i]);
        if (r[i] >= 1.0) r[i] -= 1.0;
    }
    return r;
}

} // namespace gftrees
