#pragma once

// Z2 cochain complexes on chord generators, the product m2, cohomology and ring comparisons.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace gftrees {

class ComplexError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Dense matrix over Z2.
class Z2Matrix {
public:
    Z2Matrix() = default;
    Z2Matrix(int rows, int cols) : r_(rows), c_(cols), a_(static_cast<std::size_t>(rows) * cols, 0) {}

    static Z2Matrix identity(int n)
    {
        Z2Matrix m(n, n);
        for (int i = 0; i < n; ++i) m.set(i, i, 1);
        return m;
    }

    int rows() const { return r_; }
    int cols() const { return c_; }
    int operator()(int i, int j) const { return a_[idx(i, j)]; }
    void set(int i, int j, int v) { a_[idx(i, j)] = static_cast<std::uint8_t>(v & 1); }
    void flip(int i, int j) { a_[idx(i, j)] ^= 1; }

    bool is_zero() const { return std::all_of(a_.begin(), a_.end(), [](std::uint8_t v) { return v == 0; }); }
    bool operator==(const Z2Matrix& o) const { return r_ == o.r_ && c_ == o.c_ && a_ == o.a_; }

    Z2Matrix operator*(const Z2Matrix& o) const
    {
        if (c_ != o.r_) throw ComplexError("Z2 matrix shape mismatch");
        Z2Matrix m(r_, o.c_);
        for (int i = 0; i < r_; ++i)
            for (int k = 0; k < c_; ++k)
                if ((*this)(i, k))
                    for (int j = 0; j < o.c_; ++j) m.a_[m.idx(i, j)] ^= o(k, j);
        return m;
    }

    Z2Matrix operator+(const Z2Matrix& o) const
    {
        if (r_ != o.r_ || c_ != o.c_) throw ComplexError("Z2 matrix shape mismatch");
        Z2Matrix m = *this;
        for (std::size_t i = 0; i < a_.size(); ++i) m.a_[i] ^= o.a_[i];
        return m;
    }

    std::vector<int> apply(const std::vector<int>& v) const
    {
        std::vector<int> out(r_, 0);
        for (int i = 0; i < r_; ++i)
            for (int j = 0; j < c_; ++j) out[i] ^= (*this)(i, j) & v[j];
        return out;
    }

    Z2Matrix column_subset(const std::vector<int>& cols) const
    {
        Z2Matrix m(r_, static_cast<int>(cols.size()));
        for (int i = 0; i < r_; ++i)
            for (std::size_t j = 0; j < cols.size(); ++j) m.set(i, static_cast<int>(j), (*this)(i, cols[j]));
        return m;
    }

private:
    std::size_t idx(int i, int j) const { return static_cast<std::size_t>(i) * c_ + j; }
    int r_ = 0, c_ = 0;
    std::vector<std::uint8_t> a_;
};

using Z2Vec = std::vector<int>;

namespace z2 {

// Row echelon form in place; returns pivot columns.
inline std::vector<int> echelon(Z2Matrix& m)
{
    std::vector<int> piv;
    int row = 0;
    for (int c = 0; c < m.cols() && row < m.rows(); ++c) {
        int p = -1;
        for (int i = row; i < m.rows(); ++i)
            if (m(i, c)) {
                p = i;
                break;
            }
        if (p < 0) continue;
        if (p != row)
            for (int j = 0; j < m.cols(); ++j) {
                int t = m(p, j);
                m.set(p, j, m(row, j));
                m.set(row, j, t);
            }
        for (int i = 0; i < m.rows(); ++i)
            if (i != row && m(i, c))
                for (int j = 0; j < m.cols(); ++j) m.set(i, j, m(i, j) ^ m(row, j));
        piv.push_back(c);
        ++row;
    }
    return piv;
}

inline int rank(Z2Matrix m) { return static_cast<int>(echelon(m).size()); }

// Basis of the kernel, one vector per free column.
inline std::vector<Z2Vec> kernel(Z2Matrix m)
{
    auto piv = echelon(m);
    std::vector<int> is_piv(m.cols(), -1);
    for (std::size_t r = 0; r < piv.size(); ++r) is_piv[piv[r]] = static_cast<int>(r);
    std::vector<Z2Vec> out;
    for (int f = 0; f < m.cols(); ++f) {
        if (is_piv[f] >= 0) continue;
        Z2Vec v(m.cols(), 0);
        v[f] = 1;
        for (std::size_t r = 0; r < piv.size(); ++r)
            if (m(static_cast<int>(r), f)) v[piv[r]] = 1;
        out.push_back(v);
    }
    return out;
}

// Some x with A x = b, if any.
inline std::optional<Z2Vec> solve(const Z2Matrix& A, const Z2Vec& b)
{
    Z2Matrix aug(A.rows(), A.cols() + 1);
    for (int i = 0; i < A.rows(); ++i) {
        for (int j = 0; j < A.cols(); ++j) aug.set(i, j, A(i, j));
        aug.set(i, A.cols(), b[i]);
    }
    auto piv = echelon(aug);
    if (!piv.empty() && piv.back() == A.cols()) return std::nullopt;
    Z2Vec x(A.cols(), 0);
    for (std::size_t r = 0; r < piv.size(); ++r) x[piv[r]] = aug(static_cast<int>(r), A.cols());
    return x;
}

inline Z2Matrix from_columns(int rows, const std::vector<Z2Vec>& cols)
{
    Z2Matrix m(rows, static_cast<int>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j)
        for (int i = 0; i < rows; ++i) m.set(i, static_cast<int>(j), cols[j][i]);
    return m;
}

inline bool is_zero(const Z2Vec& v)
{
    return std::all_of(v.begin(), v.end(), [](int x) { return x == 0; });
}

} // namespace z2

struct Generator {
    std::string id;
    int grading = 0;
    double value = 0.0;
};

// delta(p_j) = sum_i delta(i, j) p_i
struct ChordComplex {
    std::vector<Generator> gens;
    Z2Matrix delta;

    int size() const { return static_cast<int>(gens.size()); }
    int index_of(const std::string& id) const
    {
        for (int i = 0; i < size(); ++i)
            if (gens[i].id == id) return i;
        throw ComplexError("unknown generator " + id);
    }
    Z2Vec basis(int i) const
    {
        Z2Vec v(size(), 0);
        v[i] = 1;
        return v;
    }
};

// m2(p1 (x) p2) = sum over stored triples (p1, p2, p0) of p0.
struct Product {
    int n1 = 0, n2 = 0, n0 = 0;
    std::set<std::tuple<int, int, int>> triples;

    Z2Vec apply(const Z2Vec& a, const Z2Vec& b) const
    {
        Z2Vec out(n0, 0);
        for (auto [i, j, k] : triples) out[k] ^= a[i] & b[j];
        return out;
    }
};

struct AlgebraReport {
    std::vector<std::string> delta_squared; // "(row, col)" entries of delta^2 per complex
    std::vector<std::string> leibniz;       // "p1 p2 -> p0"
    bool ok() const { return delta_squared.empty() && leibniz.empty(); }
};

inline void check_delta(const ChordComplex& C, const std::string& tag, AlgebraReport& rep)
{
    Z2Matrix d2 = C.delta * C.delta;
    for (int i = 0; i < d2.rows(); ++i)
        for (int j = 0; j < d2.cols(); ++j)
            if (d2(i, j)) rep.delta_squared.push_back(tag + ": " + C.gens[j].id + " -> " + C.gens[i].id);
}

// delta^2 on each complex and delta m2 + m2 (delta x 1 + 1 x delta) over Z2.
inline AlgebraReport verify_algebra(const ChordComplex& C1, const ChordComplex& C2, const ChordComplex& C0, const Product& m)
{
    AlgebraReport rep;
    check_delta(C1, "C1", rep);
    if (&C2 != &C1) check_delta(C2, "C2", rep);
    if (&C0 != &C1 && &C0 != &C2) check_delta(C0, "C0", rep);
    for (int a = 0; a < C1.size(); ++a)
        for (int b = 0; b < C2.size(); ++b) {
            Z2Vec ea = C1.basis(a), eb = C2.basis(b);
            Z2Vec lhs = C0.delta.apply(m.apply(ea, eb));
            Z2Vec r1 = m.apply(C1.delta.apply(ea), eb), r2 = m.apply(ea, C2.delta.apply(eb));
            for (int k = 0; k < C0.size(); ++k)
                if (lhs[k] ^ r1[k] ^ r2[k])
                    rep.leibniz.push_back(C1.gens[a].id + " " + C2.gens[b].id + " -> " + C0.gens[k].id);
        }
    return rep;
}

inline AlgebraReport verify_algebra(const ChordComplex& C, const Product& m) { return verify_algebra(C, C, C, m); }

struct CohomologyClass {
    int grading = 0;
    Z2Vec rep;
};

struct Cohomology {
    std::map<int, int> ranks;
    std::vector<CohomologyClass> classes;
    Z2Matrix basis; // columns: representatives followed by a basis of im delta

    // Class coordinates of a cocycle.
    Z2Vec coords(const Z2Vec& z) const
    {
        auto x = z2::solve(basis, z);
        if (!x) throw ComplexError("internal: vector is not a cocycle");
        return Z2Vec(x->begin(), x->begin() + classes.size());
    }
};

inline Cohomology cohomology(const ChordComplex& C)
{
    int n = C.size();
    if (!(C.delta * C.delta).is_zero()) throw ComplexError("delta^2 != 0; cohomology undefined");
    Cohomology H;
    std::set<int> grades;
    for (auto& g : C.gens) grades.insert(g.grading);
    std::vector<Z2Vec> image;
    for (int j = 0; j < n; ++j) {
        Z2Vec col(n);
        for (int i = 0; i < n; ++i) col[i] = C.delta(i, j);
        if (!z2::is_zero(col)) image.push_back(col);
    }
    for (int g : grades) {
        std::vector<int> idx;
        for (int i = 0; i < n; ++i)
            if (C.gens[i].grading == g) idx.push_back(i);
        // cocycles supported in grading g
        Z2Matrix dg = C.delta.column_subset(idx);
        std::vector<Z2Vec> ker;
        for (auto& k : z2::kernel(dg)) {
            Z2Vec v(n, 0);
            for (std::size_t t = 0; t < idx.size(); ++t) v[idx[t]] = k[t];
            ker.push_back(v);
        }
        std::vector<Z2Vec> span;
        for (auto& b : image) {
            bool in = false;
            for (int i : idx)
                if (b[i]) in = true;
            if (in) span.push_back(b);
        }
        int base = z2::rank(z2::from_columns(n, span));
        int count = 0;
        for (auto& k : ker) {
            std::vector<Z2Vec> trial = span;
            trial.push_back(k);
            int r = z2::rank(z2::from_columns(n, trial));
            if (r > base) {
                span.push_back(k);
                base = r;
                H.classes.push_back({g, k});
                ++count;
            }
        }
        if (count > 0) H.ranks[g] = count;
    }
    std::vector<Z2Vec> cols;
    for (auto& c : H.classes) cols.push_back(c.rep);
    // a basis of the image after the representatives
    std::vector<Z2Vec> im;
    for (auto& b : image) {
        std::vector<Z2Vec> trial = im;
        trial.push_back(b);
        if (z2::rank(z2::from_columns(n, trial)) > static_cast<int>(im.size())) im.push_back(b);
    }
    cols.insert(cols.end(), im.begin(), im.end());
    H.basis = z2::from_columns(n, cols);
    return H;
}

// Structure constants mu(i, j) = class coordinates of m2(rep_i, rep_j) in H0.
struct RingProduct {
    std::vector<std::vector<Z2Vec>> mu;
};

inline RingProduct ring_product(const Cohomology& H1, const Cohomology& H2, const ChordComplex& C0, const Cohomology& H0,
                                const Product& m)
{
    RingProduct R;
    R.mu.assign(H1.classes.size(), std::vector<Z2Vec>(H2.classes.size()));
    for (std::size_t i = 0; i < H1.classes.size(); ++i)
        for (std::size_t j = 0; j < H2.classes.size(); ++j) {
            Z2Vec z = m.apply(H1.classes[i].rep, H2.classes[j].rep);
            if (!z2::is_zero(C0.delta.apply(z))) throw ComplexError("internal: product of cocycles is not a cocycle");
            R.mu[i][j] = H0.coords(z);
        }
    return R;
}

// Matrix of the map induced on cohomology by a chain map phi: C -> C'.
inline Z2Matrix induced(const Z2Matrix& phi, const ChordComplex& C, const Cohomology& H, const ChordComplex& Cp,
                        const Cohomology& Hp)
{
    Z2Matrix out(static_cast<int>(Hp.classes.size()), static_cast<int>(H.classes.size()));
    for (std::size_t j = 0; j < H.classes.size(); ++j) {
        Z2Vec z = phi.apply(H.classes[j].rep);
        if (!z2::is_zero(Cp.delta.apply(z))) throw ComplexError("map does not send cocycles to cocycles");
        Z2Vec c = Hp.coords(z);
        for (std::size_t i = 0; i < c.size(); ++i) out.set(static_cast<int>(i), static_cast<int>(j), c[i]);
    }
    (void)C;
    return out;
}

inline bool is_chain_map(const Z2Matrix& phi, const ChordComplex& C, const ChordComplex& Cp)
{
    return (Cp.delta * phi + phi * C.delta).is_zero();
}

struct RingSide {
    const ChordComplex* C1;
    const ChordComplex* C2;
    const ChordComplex* C0;
    const Product* m;
};

struct RingVerdict {
    bool ranks_equal = false;
    bool chain_maps = false;
    bool isomorphisms = false;
    bool commutes = false;
    std::vector<std::string> defects;
    bool pass() const { return ranks_equal && chain_maps && isomorphisms && commutes; }
};

// Checks phi0 o mu = mu' o (phi1 x phi2) on classes, with phi_k chain maps of the three slots.
inline RingVerdict compare_rings(const RingSide& A, const RingSide& B, const Z2Matrix& phi1, const Z2Matrix& phi2,
                                 const Z2Matrix& phi0)
{
    RingVerdict v;
    const ChordComplex* ca[3] = {A.C1, A.C2, A.C0};
    const ChordComplex* cb[3] = {B.C1, B.C2, B.C0};
    const Z2Matrix* ph[3] = {&phi1, &phi2, &phi0};
    Cohomology ha[3], hb[3];
    v.ranks_equal = true;
    v.chain_maps = true;
    for (int k = 0; k < 3; ++k) {
        ha[k] = cohomology(*ca[k]);
        hb[k] = cohomology(*cb[k]);
        if (ha[k].ranks != hb[k].ranks) {
            v.ranks_equal = false;
            v.defects.push_back("graded ranks differ in slot " + std::to_string(k));
        }
        if (!is_chain_map(*ph[k], *ca[k], *cb[k])) {
            v.chain_maps = false;
            v.defects.push_back("slot " + std::to_string(k) + " map is not a cochain map");
        }
    }
    if (!v.ranks_equal || !v.chain_maps) return v;
    Z2Matrix ind[3];
    v.isomorphisms = true;
    for (int k = 0; k < 3; ++k) {
        ind[k] = induced(*ph[k], *ca[k], ha[k], *cb[k], hb[k]);
        if (ind[k].rows() != ind[k].cols() || z2::rank(ind[k]) != ind[k].rows()) {
            v.isomorphisms = false;
            v.defects.push_back("slot " + std::to_string(k) + " map is not an isomorphism on cohomology");
        }
    }
    if (!v.isomorphisms) return v;
    RingProduct ma = ring_product(ha[0], ha[1], *A.C0, ha[2], *A.m);
    RingProduct mb = ring_product(hb[0], hb[1], *B.C0, hb[2], *B.m);
    v.commutes = true;
    int n1 = static_cast<int>(ha[0].classes.size()), n2 = static_cast<int>(ha[1].classes.size());
    for (int i = 0; i < n1; ++i)
        for (int j = 0; j < n2; ++j) {
            Z2Vec lhs = ind[2].apply(ma.mu[i][j]);
            Z2Vec rhs(hb[2].classes.size(), 0);
            for (int a = 0; a < ind[0].rows(); ++a)
                for (int b = 0; b < ind[1].rows(); ++b)
                    if (ind[0](a, i) && ind[1](b, j))
                        for (std::size_t c = 0; c < rhs.size(); ++c) rhs[c] ^= mb.mu[a][b][c];
            if (lhs != rhs) {
                v.commutes = false;
                v.defects.push_back("classes " + std::to_string(i) + " x " + std::to_string(j) + " do not commute");
            }
        }
    return v;
}

// Generator bijection by grading and critical value.
inline Z2Matrix match_by_value(const ChordComplex& C, const ChordComplex& Cp, double tol = 1e-6)
{
    if (C.size() != Cp.size()) throw ComplexError("generator counts differ: " + std::to_string(C.size()) + " vs " + std::to_string(Cp.size()));
    Z2Matrix phi(Cp.size(), C.size());
    std::vector<int> used(Cp.size(), 0);
    for (int j = 0; j < C.size(); ++j) {
        std::vector<int> hits;
        for (int i = 0; i < Cp.size(); ++i)
            if (Cp.gens[i].grading == C.gens[j].grading && std::abs(Cp.gens[i].value - C.gens[j].value) < tol) hits.push_back(i);
        if (hits.size() != 1)
            throw ComplexError("no unambiguous value/grading match for " + C.gens[j].id + "; supply an explicit correspondence");
        if (used[hits[0]]++) throw ComplexError("value/grading match is not a bijection");
        phi.set(hits[0], j, 1);
    }
    return phi;
}

} // namespace gftrees
