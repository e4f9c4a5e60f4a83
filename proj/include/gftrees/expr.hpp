#pragma once

// Scalar expressions over R^D with exact first and second derivatives.
//
// Expressions are parsed into an immutable tree, flattened into a small
// straight-line program and evaluated on second-order jets
// (value, gradient, Hessian) in forward mode.

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gftrees {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Variable layout: x1..xn, then `copies` blocks of N fiber coordinates.
struct Layout {
    int n = 0;
    int N = 0;
    int copies = 1;

    int dim() const { return n + copies * N; }

    // -1 when the name is not a variable of this layout.
    int var_index(std::string_view name) const
    {
        if (name.size() < 2) return -1;
        char head = name[0];
        auto digits = [](std::string_view s, int& out) {
            if (s.empty() || s[0] == '0') return false;
            auto r = std::from_chars(s.data(), s.data() + s.size(), out);
            return r.ec == std::errc() && r.ptr == s.data() + s.size();
        };
        std::string_view rest = name.substr(1);
        if (head == 'x') {
            int i = 0;
            if (!digits(rest, i) || i > n) return -1;
            return i - 1;
        }
        if (head != 'e' || N == 0) return -1;
        auto us = rest.find('_');
        if (us != std::string_view::npos) {
            int k = 0, j = 0;
            if (!digits(rest.substr(0, us), k) || !digits(rest.substr(us + 1), j)) return -1;
            if (k > copies || j > N) return -1;
            return n + (k - 1) * N + (j - 1);
        }
        int i = 0;
        if (!digits(rest, i)) return -1;
        if (copies == 1) return i <= N ? n + i - 1 : -1;
        if (N == 1) return i <= copies ? n + i - 1 : -1;
        return -1;
    }

    std::string var_name(int v) const
    {
        if (v < n) return "x" + std::to_string(v + 1);
        int f = v - n;
        int k = f / N + 1, j = f % N + 1;
        if (copies == 1) return "e" + std::to_string(j);
        if (N == 1) return "e" + std::to_string(k);
        return "e" + std::to_string(k) + "_" + std::to_string(j);
    }
};

class ParseError : public std::runtime_error {
public:
    enum class Kind { Syntax, UnknownIdentifier, Arity };

    ParseError(Kind kind, std::size_t position, const std::string& what)
        : std::runtime_error(what + " at position " + std::to_string(position)),
          kind_(kind), position_(position) {}

    Kind kind() const { return kind_; }
    // 1-based character offset
    std::size_t position() const { return position_; }

private:
    Kind kind_;
    std::size_t position_;
};

class DomainError : public std::runtime_error {
public:
    explicit DomainError(const std::string& sub)
        : std::runtime_error("division by zero in '" + sub + "'"), sub_(sub) {}
    const std::string& subexpression() const { return sub_; }

private:
    std::string sub_;
};

enum class Op : std::uint8_t { Lit, Var, Neg, Add, Sub, Mul, Div, Pow, Sin, Cos, Exp, Bump };

struct Node;
using NodePtr = std::shared_ptr<const Node>;

struct Node {
    Op op = Op::Lit;
    double lit = 0.0;
    int var = -1;
    int power = 0;
    NodePtr a, b;
};

inline NodePtr make_lit(double v)
{
    auto n = std::make_shared<Node>();
    n->op = Op::Lit;
    n->lit = v;
    return n;
}

inline NodePtr make_var(int v)
{
    auto n = std::make_shared<Node>();
    n->op = Op::Var;
    n->var = v;
    return n;
}

inline NodePtr make_node(Op op, NodePtr a, NodePtr b = nullptr, int power = 0)
{
    auto n = std::make_shared<Node>();
    n->op = op;
    n->a = std::move(a);
    n->b = std::move(b);
    n->power = power;
    return n;
}

inline bool same_tree(const Node* p, const Node* q)
{
    if (p == q) return true;
    if (!p || !q || p->op != q->op) return false;
    switch (p->op) {
    case Op::Lit: return p->lit == q->lit;
    case Op::Var: return p->var == q->var;
    case Op::Pow: return p->power == q->power && same_tree(p->a.get(), q->a.get());
    default: return same_tree(p->a.get(), q->a.get()) && same_tree(p->b.get(), q->b.get());
    }
}

// C^2 cutoff: 1 on |t|<=1, 0 on |t|>=2, quintic smoothstep in between.
inline void bump_jet(double t, double& f0, double& f1, double& f2)
{
    double at = std::abs(t);
    if (at <= 1.0) { f0 = 1.0; f1 = 0.0; f2 = 0.0; return; }
    if (at >= 2.0) { f0 = 0.0; f1 = 0.0; f2 = 0.0; return; }
    double s = at - 1.0, r = 1.0 - s;
    double S = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
    double dS = 30.0 * s * s * r * r;
    double d2S = 60.0 * s * r * (1.0 - 2.0 * s);
    double sg = t > 0 ? 1.0 : -1.0;
    f0 = 1.0 - S;
    f1 = -dS * sg;
    f2 = -d2S;
}

inline double bump(double t)
{
    double f0, f1, f2;
    bump_jet(t, f0, f1, f2);
    return f0;
}

// Jet storage: [0] value, [1..m] gradient, then m*m row-major Hessian.
namespace jet {

inline int stride(int m, int order) { return order == 0 ? 1 : order == 1 ? 1 + m : 1 + m + m * m; }

inline void constant(double* r, double v, int m, int order)
{
    r[0] = v;
    std::fill(r + 1, r + stride(m, order), 0.0);
}

inline void variable(double* r, double v, int idx, int m, int order)
{
    constant(r, v, m, order);
    if (order >= 1) r[1 + idx] = 1.0;
}

inline void copy(double* r, const double* a, int m, int order) { std::copy(a, a + stride(m, order), r); }

// r = ca*a + cb*b
inline void lincomb(double* r, double ca, const double* a, double cb, const double* b, int m, int order)
{
    int s = stride(m, order);
    for (int i = 0; i < s; ++i) r[i] = ca * a[i] + cb * b[i];
}

inline void axpy(double* r, double c, const double* a, int m, int order)
{
    int s = stride(m, order);
    for (int i = 0; i < s; ++i) r[i] += c * a[i];
}

inline void mul(double* r, const double* a, const double* b, int m, int order)
{
    double av = a[0], bv = b[0];
    r[0] = av * bv;
    if (order < 1) return;
    const double* ga = a + 1;
    const double* gb = b + 1;
    if (order >= 2) {
        const double* Ha = a + 1 + m;
        const double* Hb = b + 1 + m;
        double* H = r + 1 + m;
        for (int i = 0; i < m; ++i)
            for (int j = i; j < m; ++j)
                H[i * m + j] = H[j * m + i] =
                    av * Hb[i * m + j] + bv * Ha[i * m + j] + ga[i] * gb[j] + gb[i] * ga[j];
    }
    for (int i = 0; i < m; ++i) r[1 + i] = av * gb[i] + bv * ga[i];
}

// r = f(a) given f, f', f'' at a[0]
inline void chain(double* r, const double* a, double f0, double f1, double f2, int m, int order)
{
    r[0] = f0;
    if (order < 1) return;
    const double* ga = a + 1;
    if (order >= 2) {
        const double* Ha = a + 1 + m;
        double* H = r + 1 + m;
        for (int i = 0; i < m; ++i)
            for (int j = i; j < m; ++j) H[i * m + j] = H[j * m + i] = f1 * Ha[i * m + j] + f2 * ga[i] * ga[j];
    }
    for (int i = 0; i < m; ++i) r[1 + i] = f1 * ga[i];
}

} // namespace jet

namespace detail {

inline int precedence(const Node* n)
{
    switch (n->op) {
    case Op::Add:
    case Op::Sub: return 1;
    case Op::Mul:
    case Op::Div: return 2;
    case Op::Neg: return 3;
    case Op::Pow: return 4;
    case Op::Lit: return n->lit < 0 ? 0 : 5;
    default: return 5;
    }
}

inline std::string format_number(double v)
{
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline std::string print(const Node* n, const Layout& lay)
{
    auto wrap = [&](const Node* c, bool paren) {
        std::string s = print(c, lay);
        return paren ? "(" + s + ")" : s;
    };
    int p = precedence(n);
    switch (n->op) {
    case Op::Lit: return format_number(n->lit);
    case Op::Var: return lay.var_name(n->var);
    case Op::Neg: return "-" + wrap(n->a.get(), precedence(n->a.get()) < 3);
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Div: {
        const char* sym = n->op == Op::Add ? " + " : n->op == Op::Sub ? " - " : n->op == Op::Mul ? "*" : "/";
        return wrap(n->a.get(), precedence(n->a.get()) < p) + sym +
               wrap(n->b.get(), precedence(n->b.get()) <= p);
    }
    case Op::Pow: return wrap(n->a.get(), precedence(n->a.get()) < 5) + "^" + std::to_string(n->power);
    case Op::Sin: return "sin(" + print(n->a.get(), lay) + ")";
    case Op::Cos: return "cos(" + print(n->a.get(), lay) + ")";
    case Op::Exp: return "exp(" + print(n->a.get(), lay) + ")";
    case Op::Bump: return "bump(" + print(n->a.get(), lay) + ")";
    }
    return {};
}

class Parser {
public:
    Parser(std::string_view text, const Layout& lay) : s_(text), lay_(lay) {}

    NodePtr run()
    {
        NodePtr e = expr();
        skip();
        if (i_ < s_.size()) fail("unexpected '" + std::string(1, s_[i_]) + "'");
        return e;
    }

private:
    std::string_view s_;
    const Layout& lay_;
    std::size_t i_ = 0;

    [[noreturn]] void fail(const std::string& msg, std::size_t at) const
    {
        throw ParseError(ParseError::Kind::Syntax, at + 1, "syntax error: " + msg);
    }
    [[noreturn]] void fail(const std::string& msg) const { fail(msg, i_); }

    void skip()
    {
        while (i_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[i_]))) ++i_;
    }

    bool eat(char c)
    {
        skip();
        if (i_ < s_.size() && s_[i_] == c) {
            ++i_;
            return true;
        }
        return false;
    }

    NodePtr expr()
    {
        NodePtr lhs = term();
        for (;;) {
            if (eat('+')) lhs = make_node(Op::Add, lhs, term());
            else if (eat('-')) lhs = make_node(Op::Sub, lhs, term());
            else return lhs;
        }
    }

    NodePtr term()
    {
        NodePtr lhs = unary();
        for (;;) {
            if (eat('*')) lhs = make_node(Op::Mul, lhs, unary());
            else if (eat('/')) lhs = make_node(Op::Div, lhs, unary());
            else return lhs;
        }
    }

    NodePtr unary()
    {
        if (eat('-')) return make_node(Op::Neg, unary());
        if (eat('+')) return unary();
        return power();
    }

    NodePtr power()
    {
        NodePtr base = atom();
        if (!eat('^')) return base;
        skip();
        std::size_t start = i_;
        bool neg = false;
        if (i_ < s_.size() && s_[i_] == '-') {
            neg = true;
            ++i_;
        }
        std::size_t d0 = i_;
        while (i_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[i_]))) ++i_;
        if (i_ == d0) fail("expected integer exponent", start);
        if (i_ < s_.size() && (s_[i_] == '.' || s_[i_] == 'e' || s_[i_] == 'E'))
            fail("exponent must be an integer", start);
        int k = 0;
        auto r = std::from_chars(s_.data() + d0, s_.data() + i_, k);
        if (r.ec != std::errc()) fail("exponent out of range", start);
        return make_node(Op::Pow, base, nullptr, neg ? -k : k);
    }

    NodePtr atom()
    {
        skip();
        if (i_ >= s_.size()) fail("expected operand");
        char c = s_[i_];
        if (c == '(') {
            ++i_;
            NodePtr e = expr();
            if (!eat(')')) fail("expected ')'");
            return e;
        }
        if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return number();
        if (std::isalpha(static_cast<unsigned char>(c))) return identifier();
        fail("unexpected '" + std::string(1, c) + "'");
    }

    NodePtr number()
    {
        std::size_t start = i_;
        while (i_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[i_]))) ++i_;
        if (i_ < s_.size() && s_[i_] == '.') {
            ++i_;
            while (i_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[i_]))) ++i_;
        }
        if (i_ < s_.size() && (s_[i_] == 'e' || s_[i_] == 'E')) {
            std::size_t k = i_ + 1;
            if (k < s_.size() && (s_[k] == '+' || s_[k] == '-')) ++k;
            if (k < s_.size() && std::isdigit(static_cast<unsigned char>(s_[k]))) {
                i_ = k;
                while (i_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[i_]))) ++i_;
            }
        }
        double v = 0;
        auto r = std::from_chars(s_.data() + start, s_.data() + i_, v);
        if (r.ec != std::errc() || r.ptr != s_.data() + i_) fail("malformed number", start);
        return make_lit(v);
    }

    NodePtr identifier()
    {
        std::size_t start = i_;
        while (i_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[i_])) || s_[i_] == '_')) ++i_;
        std::string name(s_.substr(start, i_ - start));
        skip();
        bool call = i_ < s_.size() && s_[i_] == '(';
        Op fn = Op::Lit;
        if (name == "sin") fn = Op::Sin;
        else if (name == "cos") fn = Op::Cos;
        else if (name == "exp") fn = Op::Exp;
        else if (name == "bump") fn = Op::Bump;
        if (fn != Op::Lit) {
            if (!call)
                throw ParseError(ParseError::Kind::Arity, start + 1, name + " expects 1 argument, got 0");
            ++i_;
            std::vector<NodePtr> args;
            skip();
            if (i_ < s_.size() && s_[i_] == ')') {
                ++i_;
            } else {
                args.push_back(expr());
                while (eat(',')) args.push_back(expr());
                if (!eat(')')) fail("expected ')'");
            }
            if (args.size() != 1)
                throw ParseError(ParseError::Kind::Arity, start + 1,
                                 name + " expects 1 argument, got " + std::to_string(args.size()));
            return make_node(fn, args[0]);
        }
        if (call)
            throw ParseError(ParseError::Kind::UnknownIdentifier, start + 1, "unknown function '" + name + "'");
        if (name == "pi") return make_lit(std::numbers::pi);
        int v = lay_.var_index(name);
        if (v < 0)
            throw ParseError(ParseError::Kind::UnknownIdentifier, start + 1, "unknown identifier '" + name + "'");
        return make_var(v);
    }
};

} // namespace detail

// Flattened evaluation order of an expression tree.
class Program {
public:
    Program() = default;
    explicit Program(const NodePtr& root)
    {
        if (root) emit(root.get());
    }

    std::size_t size() const { return code_.size(); }

    // inputs[v] is the jet of variable v; result written to out.
    void eval(const double* const* inputs, int m, int order, double* out, const Layout& lay) const
    {
        thread_local std::vector<double> ws;
        thread_local std::vector<const double*> src;
        int st = jet::stride(m, order);
        if (ws.size() < code_.size() * st) ws.resize(code_.size() * st);
        src.resize(code_.size());
        // resize of an outer call may have moved ws; take the base after resizing
        double* base = ws.data();
        for (std::size_t k = 0; k < code_.size(); ++k) {
            const Ins& in = code_[k];
            double* r = base + k * st;
            const double* a = in.a >= 0 ? src[in.a] : nullptr;
            const double* b = in.b >= 0 ? src[in.b] : nullptr;
            src[k] = r;
            switch (in.op) {
            case Op::Lit: jet::constant(r, in.lit, m, order); break;
            case Op::Var: src[k] = inputs[in.var]; break;
            case Op::Neg: jet::lincomb(r, -1.0, a, 0.0, a, m, order); break;
            case Op::Add: jet::lincomb(r, 1.0, a, 1.0, b, m, order); break;
            case Op::Sub: jet::lincomb(r, 1.0, a, -1.0, b, m, order); break;
            case Op::Mul: jet::mul(r, a, b, m, order); break;
            case Op::Div: {
                double d = b[0];
                if (d == 0.0) throw DomainError(detail::print(in.node, lay));
                double* t = scratch(st);
                jet::chain(t, b, 1.0 / d, -1.0 / (d * d), 2.0 / (d * d * d), m, order);
                jet::mul(r, a, t, m, order);
                break;
            }
            case Op::Pow: {
                double x = a[0];
                int p = in.power;
                if (p < 0 && x == 0.0) throw DomainError(detail::print(in.node, lay));
                double f0 = ipow(x, p);
                double f1 = p == 0 ? 0.0 : p * ipow(x, p - 1);
                double f2 = (p == 0 || p == 1) ? 0.0 : double(p) * (p - 1) * ipow(x, p - 2);
                jet::chain(r, a, f0, f1, f2, m, order);
                break;
            }
            case Op::Sin: {
                double s = std::sin(a[0]), c = std::cos(a[0]);
                jet::chain(r, a, s, c, -s, m, order);
                break;
            }
            case Op::Cos: {
                double s = std::sin(a[0]), c = std::cos(a[0]);
                jet::chain(r, a, c, -s, -c, m, order);
                break;
            }
            case Op::Exp: {
                double e = std::exp(a[0]);
                jet::chain(r, a, e, e, e, m, order);
                break;
            }
            case Op::Bump: {
                double f0, f1, f2;
                bump_jet(a[0], f0, f1, f2);
                jet::chain(r, a, f0, f1, f2, m, order);
                break;
            }
            }
        }
        jet::copy(out, src.back(), m, order);
    }

private:
    struct Ins {
        Op op;
        int a = -1, b = -1;
        double lit = 0.0;
        int var = -1;
        int power = 0;
        const Node* node = nullptr;
    };
    std::vector<Ins> code_;

    static double ipow(double x, int p)
    {
        if (p < 0) return 1.0 / ipow(x, -p);
        double r = 1.0;
        while (p) {
            if (p & 1) r *= x;
            x *= x;
            p >>= 1;
        }
        return r;
    }

    static double* scratch(int st)
    {
        thread_local std::vector<double> t;
        if (static_cast<int>(t.size()) < st) t.resize(st);
        return t.data();
    }

    int emit(const Node* n)
    {
        Ins in;
        in.op = n->op;
        in.node = n;
        in.lit = n->lit;
        in.var = n->var;
        in.power = n->power;
        if (n->a) in.a = emit(n->a.get());
        if (n->b) in.b = emit(n->b.get());
        code_.push_back(in);
        return static_cast<int>(code_.size()) - 1;
    }
};

struct Derivatives {
    double value = 0.0;
    Vec grad;
    Mat hess;
};

class Expr {
public:
    Expr() = default;

    static Expr parse(std::string_view text, const Layout& layout)
    {
        detail::Parser p(text, layout);
        return Expr(p.run(), layout);
    }

    static Expr from_tree(NodePtr root, const Layout& layout) { return Expr(std::move(root), layout); }

    bool empty() const { return !root_; }
    const Layout& layout() const { return layout_; }
    int dim() const { return layout_.dim(); }
    const NodePtr& root() const { return root_; }
    std::string str() const { return root_ ? detail::print(root_.get(), layout_) : std::string(); }
    bool same(const Expr& o) const { return same_tree(root_.get(), o.root_.get()); }

    // Variables referenced by the tree, ascending.
    std::vector<int> variables() const
    {
        std::vector<int> vs;
        collect(root_.get(), vs);
        std::sort(vs.begin(), vs.end());
        vs.erase(std::unique(vs.begin(), vs.end()), vs.end());
        return vs;
    }

    void eval_jet(const double* const* inputs, int m, int order, double* out) const
    {
        prog_->eval(inputs, m, order, out, layout_);
    }

    double value(const Vec& p) const
    {
        std::vector<const double*> in(dim());
        for (int i = 0; i < dim(); ++i) in[i] = p.data() + i;
        double out = 0;
        prog_->eval(in.data(), 0, 0, &out, layout_);
        return out;
    }

    Derivatives differentiate(const Vec& p) const
    {
        int m = dim();
        int st = jet::stride(m, 2);
        std::vector<double> seeds(static_cast<std::size_t>(m) * st), out(st);
        std::vector<const double*> in(m);
        for (int i = 0; i < m; ++i) {
            jet::variable(seeds.data() + i * st, p[i], i, m, 2);
            in[i] = seeds.data() + i * st;
        }
        prog_->eval(in.data(), m, 2, out.data(), layout_);
        Derivatives d;
        d.value = out[0];
        d.grad = Eigen::Map<const Vec>(out.data() + 1, m);
        d.hess = Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(out.data() + 1 + m, m, m);
        return d;
    }

private:
    NodePtr root_;
    Layout layout_;
    std::shared_ptr<const Program> prog_;

    Expr(NodePtr root, const Layout& layout)
        : root_(std::move(root)), layout_(layout), prog_(std::make_shared<Program>(root_)) {}

    static void collect(const Node* n, std::vector<int>& vs)
    {
        if (!n) return;
        if (n->op == Op::Var) vs.push_back(n->var);
        collect(n->a.get(), vs);
        collect(n->b.get(), vs);
    }
};

inline Derivatives differentiate(const Expr& f, const Vec& p) { return f.differentiate(p); }

} // namespace gftrees
