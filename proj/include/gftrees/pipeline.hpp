#pragma once

// Run configuration, staged analysis, comparisons, and deterministic reports.

#include "gftrees/continuation.hpp"
#include "gftrees/trees.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

namespace gftrees {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Json = nlohmann::ordered_json;
using Logger = std::function<void(const std::string&)>;

namespace detail {

// Reads known keys into values and writes the resolved block back out.
class Binder {
public:
    Binder(const Json* in, std::string where) : in_(in), where_(std::move(where))
    {
        if (in_ && !in_->is_object()) throw ConfigError(where_ + " must be an object");
    }

    template <class T>
    void operator()(const char* key, T& v)
    {
        seen_.push_back(key);
        if (in_ && in_->contains(key)) read((*in_)[key], std::string(key), v);
        out_[key] = v;
    }

    Json finish()
    {
        if (in_)
            for (auto it = in_->begin(); it != in_->end(); ++it)
                if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end())
                    throw ConfigError("unknown key '" + it.key() + "' in " + where_);
        return out_;
    }

private:
    const Json* in_;
    std::string where_;
    std::vector<std::string> seen_;
    Json out_ = Json::object();

    std::string at(const std::string& key) const { return where_ + "." + key; }
    void read(const Json& j, const std::string& key, double& v)
    {
        if (!j.is_number()) throw ConfigError(at(key) + " must be a number");
        v = j.get<double>();
    }
    void read(const Json& j, const std::string& key, int& v)
    {
        if (!j.is_number_integer()) throw ConfigError(at(key) + " must be an integer");
        v = j.get<int>();
    }
    void read(const Json& j, const std::string& key, std::uint64_t& v)
    {
        if (!j.is_number_unsigned()) throw ConfigError(at(key) + " must be a non-negative integer");
        v = j.get<std::uint64_t>();
    }
    void read(const Json& j, const std::string& key, bool& v)
    {
        if (!j.is_boolean()) throw ConfigError(at(key) + " must be true or false");
        v = j.get<bool>();
    }
    void read(const Json& j, const std::string& key, std::string& v)
    {
        if (!j.is_string()) throw ConfigError(at(key) + " must be a string");
        v = j.get<std::string>();
    }
};

inline Vec json_vec(const Json& j, const std::string& where)
{
    if (!j.is_array()) throw ConfigError(where + " must be an array of numbers");
    Vec v(j.size());
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_number()) throw ConfigError(where + " must be an array of numbers");
        v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
    }
    return v;
}

inline Box json_box(const Json& j, const std::string& where)
{
    if (!j.is_array()) throw ConfigError(where + " must be an array of [lo, hi] pairs");
    Box b;
    for (auto& iv : j) {
        if (!iv.is_array() || iv.size() != 2 || !iv[0].is_number() || !iv[1].is_number())
            throw ConfigError(where + " must be an array of [lo, hi] pairs");
        b.iv.push_back({iv[0].get<double>(), iv[1].get<double>()});
    }
    return b;
}

inline Json vec_json(const Vec& v)
{
    Json a = Json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

inline Json box_json(const Box& b)
{
    Json a = Json::array();
    for (auto& iv : b.iv) a.push_back({iv.lo, iv.hi});
    return a;
}

inline Expr parse_expr(const Json& j, const std::string& where, const Layout& L)
{
    if (!j.is_string()) throw ConfigError(where + " must be an expression string");
    try {
        return Expr::parse(j.get<std::string>(), L);
    } catch (const ParseError& e) {
        throw ParseError(e.kind(), e.position(), where + ": " + std::string(e.what()).substr(0, std::string(e.what()).rfind(" at position")));
    }
}

} // namespace detail

struct Tolerances {
    CritTolerances crit;
    FlowTolerances flow;
    TreeTolerances trees;
    double q_factor = 0.5;     // Q scale shrinks by this factor until the Q-terms fit under rho
    double blend_floor = 0.05; // least |grad w| allowed on the blend annulus
    bool strict = false;       // stable-subspace test on every line end

    Json bind(const Json* in)
    {
        if (in && !in->is_object()) throw ConfigError("tolerances must be an object");
        auto sub = [&](const char* k) { return in && in->contains(k) ? &(*in)[k] : nullptr; };
        detail::Binder c(sub("crit"), "tolerances.crit");
        c("grad", crit.grad);
        c("dedup", crit.dedup);
        c("degenerate", crit.degenerate);
        c("value", crit.value);
        c("newton_iters", crit.newton_iters);
        detail::Binder f(sub("flow"), "tolerances.flow");
        f("rtol", flow.rtol);
        f("atol", flow.atol);
        f("r0", flow.r0);
        f("r_conv", flow.r_conv);
        f("t_max", flow.t_max);
        f("max_dt", flow.max_dt);
        f("min_step", flow.min_step);
        f("escape_factor", flow.escape_factor);
        f("tol_match", flow.tol_match);
        f("cond_cap", flow.cond_cap);
        f("r_near", flow.r_near);
        f("match_radius", flow.match_radius);
        f("sphere_density", flow.sphere_density);
        f("sample_dt", flow.sample_dt);
        detail::Binder t(sub("trees"), "tolerances.trees");
        t("tol_match", trees.tol_match);
        t("fd_step", trees.fd_step);
        t("dedup", trees.dedup);
        t("cond_cap", trees.cond_cap);
        t("newton_iters", trees.newton_iters);
        t("max_seeds", trees.max_seeds);
        t("seed_radius", trees.seed_radius);
        t("seed_skip", trees.seed_skip);
        t("sphere_density", trees.sphere_density);
        t("cloud_dt", trees.cloud_dt);
        Json out = Json::object();
        out["crit"] = c.finish();
        out["flow"] = f.finish();
        out["trees"] = t.finish();
        Json rest = Json::object();
        if (in)
            for (auto it = in->begin(); it != in->end(); ++it)
                if (it.key() != "crit" && it.key() != "flow" && it.key() != "trees") rest[it.key()] = it.value();
        detail::Binder r(in ? &rest : nullptr, "tolerances");
        r("q_factor", q_factor);
        r("blend_floor", blend_floor);
        r("strict", strict);
        Json top = r.finish();
        for (auto& [k, v] : top.items()) out[k] = v;
        if (!(crit.grad > 0 && crit.dedup > 0 && crit.degenerate > 0 && crit.value > 0 && flow.rtol > 0 && flow.atol > 0 &&
              flow.r0 > 0 && flow.escape_factor > 1 && trees.tol_match > 0 && trees.fd_step > 0))
            throw ConfigError("tolerances must be positive (escape_factor above 1)");
        if (!(q_factor > 0 && q_factor < 1)) throw ConfigError("tolerances.q_factor must lie in (0,1)");
        return out;
    }
};

struct SeedBlock {
    std::uint64_t rng = 1;
    int crit_grid = 15;     // Newton seeds per axis
    int lipschitz_grid = 0; // 0: sized by dimension

    Json bind(const Json* in)
    {
        detail::Binder b(in, "seed");
        b("rng", rng);
        b("crit_grid", crit_grid);
        b("lipschitz_grid", lipschitz_grid);
        if (crit_grid < 2) throw ConfigError("seed.crit_grid must be at least 2");
        if (lipschitz_grid != 0 && lipschitz_grid < 2) throw ConfigError("seed.lipschitz_grid must be 0 or at least 2");
        return b.finish();
    }
};

struct MorseSpec {
    int n = 2;
    std::string f = "cos(2*pi*x1) + 0.3*cos(2*pi*x2)";
    std::string g = "cos(2*pi*x2) + 0.3*cos(2*pi*x1)";
    double delta_pert = 0.02;

    Json bind(const Json* in)
    {
        detail::Binder b(in, "morse");
        b("n", n);
        b("f", f);
        b("g", g);
        b("delta_pert", delta_pert);
        if (n < 1) throw ConfigError("morse.n must be positive");
        if (!(delta_pert >= 0)) throw ConfigError("morse.delta_pert must be non-negative");
        return b.finish();
    }
};

struct RunConfig {
    std::string mode = "gf";
    // generating-family mode
    Json family;                   // resolved family keys
    GeneratingFamily base;         // core family before fpd and stabilization
    std::vector<Expr> fpd;
    std::vector<int> stabilize;
    std::optional<QuadraticLike> Q;
    std::optional<double> q_scale;
    // Morse mode
    MorseSpec morse;
    Tolerances tol;
    SeedBlock seed;
    std::string out_json, out_csv;

    bool is_morse() const { return mode == "morse-torus"; }

    GeneratingFamily build(bool with_fpd = true) const
    {
        GeneratingFamily F = base;
        if (with_fpd && !fpd.empty()) F = F.precompose_fpd(fpd);
        for (int s : stabilize) F = F.stabilize(s);
        return F;
    }

    QuadraticLike quadratic(int N) const
    {
        if (!Q) return QuadraticLike::standard(N);
        if (Q->N() != N) throw ConfigError("Q has fiber dimension " + std::to_string(Q->N()) + ", family has " + std::to_string(N));
        return *Q;
    }

    Json resolved() const
    {
        Json j = Json::object();
        j["mode"] = mode;
        if (is_morse()) {
            MorseSpec m = morse;
            j["morse"] = m.bind(nullptr);
        } else {
            for (auto& [k, v] : family.items()) j[k] = v;
            j["q_scale"] = q_scale ? Json(*q_scale) : Json();
        }
        Tolerances t = tol;
        j["tolerances"] = t.bind(nullptr);
        SeedBlock s = seed;
        j["seed"] = s.bind(nullptr);
        j["output"] = {{"json", out_json}, {"csv", out_csv}};
        return j;
    }
};

inline RunConfig parse_config(const Json& j)
{
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    RunConfig c;
    static const std::vector<std::string> family_keys{"base", "n", "N", "core", "slope", "inner_box", "outer_box",
                                                      "Q", "q_scale", "fpd", "stabilize"};
    static const std::vector<std::string> other_keys{"mode", "morse", "tolerances", "seed", "output"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(family_keys.begin(), family_keys.end(), it.key()) == family_keys.end() &&
            std::find(other_keys.begin(), other_keys.end(), it.key()) == other_keys.end())
            throw ConfigError("unknown key '" + it.key() + "'");
    if (j.contains("mode")) {
        if (!j["mode"].is_string()) throw ConfigError("mode must be a string");
        c.mode = j["mode"].get<std::string>();
        if (c.mode != "gf" && c.mode != "morse-torus") throw ConfigError("mode must be \"gf\" or \"morse-torus\"");
    }
    c.tol.bind(j.contains("tolerances") ? &j["tolerances"] : nullptr);
    c.seed.bind(j.contains("seed") ? &j["seed"] : nullptr);
    if (j.contains("output")) {
        detail::Binder b(&j["output"], "output");
        b("json", c.out_json);
        b("csv", c.out_csv);
        b.finish();
    }
    if (c.is_morse()) {
        for (auto& k : family_keys)
            if (j.contains(k)) throw ConfigError("key '" + k + "' is not used in morse-torus mode");
        c.morse.bind(j.contains("morse") ? &j["morse"] : nullptr);
        Layout L{c.morse.n, 0, 1};
        detail::parse_expr(Json(c.morse.f), "morse.f", L);
        detail::parse_expr(Json(c.morse.g), "morse.g", L);
        return c;
    }
    if (j.contains("morse")) throw ConfigError("key 'morse' needs mode \"morse-torus\"");

    for (const char* k : {"n", "N", "core", "slope", "inner_box", "outer_box"})
        if (!j.contains(k)) throw ConfigError(std::string("missing key '") + k + "'");
    Json fam = Json::object();
    std::string base = "euclidean";
    if (j.contains("base")) {
        if (!j["base"].is_string()) throw ConfigError("base must be a string");
        base = j["base"].get<std::string>();
    }
    if (base != "euclidean" && base != "torus") throw ConfigError("base must be \"euclidean\" or \"torus\"");
    if (!j["n"].is_number_integer() || !j["N"].is_number_integer()) throw ConfigError("n and N must be integers");
    int n = j["n"].get<int>(), N = j["N"].get<int>();
    if (n < 0 || N < 1) throw ConfigError("need n >= 0 and N >= 1");
    Layout L{n, N, 1};
    Expr core = detail::parse_expr(j["core"], "core", L);
    Vec slope = detail::json_vec(j["slope"], "slope");
    Box inner = detail::json_box(j["inner_box"], "inner_box"), outer = detail::json_box(j["outer_box"], "outer_box");
    c.base = GeneratingFamily(base == "torus" ? Base::Torus : Base::Euclidean, n, N, core, slope, inner, outer);
    fam["base"] = base;
    fam["n"] = n;
    fam["N"] = N;
    fam["core"] = j["core"];
    fam["slope"] = detail::vec_json(slope);
    fam["inner_box"] = detail::box_json(inner);
    fam["outer_box"] = detail::box_json(outer);

    if (j.contains("fpd")) {
        const Json& f = j["fpd"];
        if (!f.is_array() || static_cast<int>(f.size()) != N) throw ConfigError("fpd must list N expression strings");
        for (std::size_t k = 0; k < f.size(); ++k) c.fpd.push_back(detail::parse_expr(f[k], "fpd[" + std::to_string(k) + "]", L));
        fam["fpd"] = f;
    }
    if (j.contains("stabilize")) {
        const Json& s = j["stabilize"];
        if (!s.is_array()) throw ConfigError("stabilize must be an array of \"+\" / \"-\"");
        for (auto& e : s) {
            if (e == "+" || e == 1) c.stabilize.push_back(1);
            else if (e == "-" || e == -1) c.stabilize.push_back(-1);
            else throw ConfigError("stabilize entries must be \"+\" or \"-\"");
        }
    }
    Json st = Json::array();
    for (int s : c.stabilize) st.push_back(s > 0 ? "+" : "-");
    fam["stabilize"] = st;
    int Nf = N + static_cast<int>(c.stabilize.size());
    if (j.contains("Q")) {
        const Json& q = j["Q"];
        detail::Binder b(&q, "Q");
        std::string expr;
        b("expr", expr);
        Json rest = q;
        rest.erase("expr");
        for (auto it = rest.begin(); it != rest.end(); ++it)
            if (it.key() != "zero" && it.key() != "box") throw ConfigError("unknown key '" + it.key() + "' in Q");
        if (!q.contains("expr") || !q.contains("zero") || !q.contains("box")) throw ConfigError("Q needs expr, zero and box");
        Layout LQ{0, Nf, 1};
        c.Q = QuadraticLike(detail::parse_expr(q["expr"], "Q.expr", LQ), detail::json_vec(q["zero"], "Q.zero"),
                            detail::json_box(q["box"], "Q.box"));
        fam["Q"] = q;
    }
    if (j.contains("q_scale") && !j["q_scale"].is_null()) {
        if (!j["q_scale"].is_number() || !(j["q_scale"].get<double>() > 0)) throw ConfigError("q_scale must be a positive number");
        c.q_scale = j["q_scale"].get<double>();
    }
    c.family = fam;
    // fpd and stabilization are checked now so errors surface as config errors
    c.build();
    return c;
}

inline Json read_json_file(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read " + path.string());
    try {
        return Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

inline RunConfig load_config(const std::filesystem::path& path) { return parse_config(read_json_file(path)); }

// A path of families for isotopy comparisons; endpoints are config files or inline config objects.
struct PathConfig {
    RunConfig from, to;
    std::optional<double> eps;
    std::vector<double> slices{0.0, 0.25, 0.5, 0.75, 1.0};
    int max_pieces = 128;
    Json raw_from, raw_to;
};

inline PathConfig parse_path_config(const Json& j, const std::filesystem::path& dir)
{
    if (!j.is_object()) throw ConfigError("path config must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (it.key() != "from" && it.key() != "to" && it.key() != "eps" && it.key() != "slices" && it.key() != "max_pieces")
            throw ConfigError("unknown key '" + it.key() + "' in path config");
    if (!j.contains("from") || !j.contains("to")) throw ConfigError("path config needs 'from' and 'to'");
    PathConfig pc;
    auto end = [&](const Json& e, Json& raw) {
        if (e.is_string()) raw = read_json_file(dir / e.get<std::string>());
        else raw = e;
        return parse_config(raw);
    };
    pc.from = end(j["from"], pc.raw_from);
    pc.to = end(j["to"], pc.raw_to);
    if (pc.from.is_morse() || pc.to.is_morse()) throw ConfigError("isotopy paths need generating-family configs");
    if (j.contains("eps")) {
        if (!j["eps"].is_number() || !(j["eps"].get<double>() > 0)) throw ConfigError("eps must be a positive number");
        pc.eps = j["eps"].get<double>();
    }
    if (j.contains("slices")) {
        Vec s = detail::json_vec(j["slices"], "slices");
        pc.slices.assign(s.data(), s.data() + s.size());
        for (double t : pc.slices)
            if (t < 0 || t > 1) throw ConfigError("slices must lie in [0, 1]");
    }
    if (j.contains("max_pieces")) {
        if (!j["max_pieces"].is_number_integer() || j["max_pieces"].get<int>() < 1)
            throw ConfigError("max_pieces must be a positive integer");
        pc.max_pieces = j["max_pieces"].get<int>();
    }
    // the endpoints share one set of numerical settings
    pc.to.tol = pc.from.tol;
    pc.to.seed = pc.from.seed;
    return pc;
}

inline PathConfig load_path_config(const std::filesystem::path& path)
{
    return parse_path_config(read_json_file(path), path.parent_path());
}

struct Check {
    std::string name;
    bool pass = true;
    std::vector<std::string> details;

    void fail(std::string d)
    {
        pass = false;
        details.push_back(std::move(d));
    }
};

struct LineRecord {
    int slot = 0;
    std::string from, to;
    int count = 0;
    std::vector<Trajectory> lines;
};

struct TreeRecord {
    std::array<std::string, 3> ids;
    std::vector<FlowTree> trees;
};

enum class Stage { Chords, Differential, Product, Verify };

struct Analysis {
    RunConfig cfg;
    bool morse = false;
    // generating-family mode
    std::shared_ptr<GeneratingFamily> F;
    std::shared_ptr<DifferenceField> w;
    std::vector<CriticalPoint> crits; // all isolated critical points of w
    FlowSpace space;
    SplitSpace split;
    // product slots: (w12, w23, w13) or (f, g, f+g)
    std::array<FieldPtr, 3> h;
    std::array<Box, 3> hbox;
    std::array<std::vector<CriticalPoint>, 3> hcrits;
    std::array<FlowSpace, 3> hspace;
    Box confine;
    // algebra: one complex in generating-family mode, three in Morse mode
    std::vector<ChordComplex> C;
    std::vector<LineRecord> lines;
    bool has_product = false;
    std::optional<double> rho;
    double lipschitz = 0.0, q_scale = 0.0;
    PerturbationTriple s;
    Product m;
    std::vector<TreeRecord> trees;
    bool has_cohomology = false;
    std::vector<Cohomology> H;
    RingProduct mu;
    std::vector<Check> checks;

    const ChordComplex& slot(int k) const { return C.size() == 1 ? C[0] : C[k]; }
    const Cohomology& hslot(int k) const { return H.size() == 1 ? H[0] : H[k]; }
    bool pass() const
    {
        for (auto& c : checks)
            if (!c.pass) return false;
        return true;
    }
    Check& check(const std::string& name)
    {
        for (auto& c : checks)
            if (c.name == name) return c;
        checks.push_back({name, true, {}});
        return checks.back();
    }
};

namespace detail {

inline void note(const Logger& log, const std::string& s)
{
    if (log) log(s);
}

// The last approach to q runs inside its stable subspace.
inline bool stable_approach(const Trajectory& tr, const CriticalPoint& q, double r_near, const std::vector<int>& per)
{
    if (q.coindex() == 0) return true;
    Mat U = q.unstable();
    bool tested = false;
    for (const Vec& x : tr.samples) {
        Vec d = wrap_diff(x - q.coords, per);
        double r = d.norm();
        if (r < 0.5 * r_near || r > 2 * r_near) continue;
        tested = true;
        if ((U.transpose() * d).norm() > 0.1 * r) return false;
    }
    return tested;
}

inline ChordComplex complex_of(const std::vector<CriticalPoint>& gens)
{
    ChordComplex C;
    for (auto& c : gens) C.gens.push_back({c.id, c.grading, c.value});
    C.delta = Z2Matrix(C.size(), C.size());
    return C;
}

inline void differential(Analysis& A, int slot, const std::function<LineCount(const CriticalPoint&, const CriticalPoint&)>& count,
                         const std::vector<CriticalPoint>& gens, const FlowSpace& S)
{
    ChordComplex& C = A.C[slot];
    Check& conf = A.check("flow.confinement");
    Check& mono = A.check("flow.monotone");
    Check* strict = A.cfg.tol.strict ? &A.check("flow.stable_approach") : nullptr;
    for (std::size_t j = 0; j < gens.size(); ++j)
        for (std::size_t i = 0; i < gens.size(); ++i) {
            if (gens[i].grading != gens[j].grading + 1) continue;
            LineCount lc = count(gens[j], gens[i]);
            LineRecord rec{slot, gens[j].id, gens[i].id, lc.count, lc.lines};
            for (auto& tr : rec.lines) {
                for (auto& x : tr.samples)
                    if (!S.inside(x)) {
                        conf.fail("line " + rec.from + " -> " + rec.to + " leaves K' at " + fmt_point(x));
                        break;
                    }
                for (std::size_t k = 1; k < tr.samples.size(); ++k)
                    if (S.field->value(tr.samples[k]) < S.field->value(tr.samples[k - 1]) - 1e-12) {
                        mono.fail("value drops along " + rec.from + " -> " + rec.to);
                        break;
                    }
                if (strict && !stable_approach(tr, gens[i], S.tol.r_near, S.periodic))
                    strict->fail("line " + rec.from + " -> " + rec.to + " does not enter along the stable subspace");
            }
            C.delta.set(static_cast<int>(i), static_cast<int>(j), lc.count % 2);
            A.lines.push_back(std::move(rec));
        }
}

inline void products(Analysis& A, const Logger& log)
{
    const auto& c1 = A.hcrits[0];
    const auto& c2 = A.hcrits[1];
    const auto& c0 = A.hcrits[2];
    const ChordComplex &C1 = A.slot(0), &C2 = A.slot(1), &C0 = A.slot(2);
    A.m = Product{C1.size(), C2.size(), C0.size(), {}};
    Check& conf = A.check("trees.confinement");
    Check* quarter = A.rho ? &A.check("trees.rho_quarter") : nullptr;
    auto per = A.hspace[0].periodic;
    for (int a = 0; a < C1.size(); ++a)
        for (int b = 0; b < C2.size(); ++b)
            for (int c = 0; c < C0.size(); ++c) {
                if (C0.gens[c].grading != C1.gens[a].grading + C2.gens[b].grading) continue;
                TreeProblem P;
                for (int k = 0; k < 3; ++k) {
                    P.spaces[k] = &A.hspace[k];
                    P.crits[k] = &A.hcrits[k];
                }
                P.ids = {C1.gens[a].id, C2.gens[b].id, C0.gens[c].id};
                P.s = A.s;
                P.confine = A.confine;
                P.rho = A.rho;
                P.tol = A.cfg.tol.trees;
                note(log, "trees " + P.ids[0] + " " + P.ids[1] + " -> " + P.ids[2]);
                TreeRecord rec{P.ids, solve_trees(P)};
                for (auto& t : rec.trees) {
                    for (int k = 0; k < 3; ++k)
                        for (auto& x : t.arms[k])
                            if (!inside_box(A.confine, x, per)) conf.fail("tree edge outside K' at " + fmt_point(x));
                    if (quarter) {
                        double v = A.h[2]->value(t.ends[2]);
                        if (!(v > *A.rho / 4)) quarter->fail("meeting value " + std::to_string(v) + " <= rho/4");
                        const CriticalPoint& p0 = find_crit(c0, P.ids[2]);
                        if (v > p0.value + 1e-9) quarter->fail("meeting value above the sink value of " + p0.id);
                    }
                }
                if (rec.trees.size() % 2) A.m.triples.insert({a, b, c});
                A.trees.push_back(std::move(rec));
            }
    (void)c1;
    (void)c2;
}

inline void algebra(Analysis& A)
{
    AlgebraReport rep = A.C.size() == 1 ? verify_algebra(A.C[0], A.m) : verify_algebra(A.C[0], A.C[1], A.C[2], A.m);
    Check& d2 = A.check("complex.delta_squared");
    for (auto& s : rep.delta_squared) d2.fail(s);
    Check& lb = A.check("complex.leibniz");
    for (auto& s : rep.leibniz) lb.fail(s);
    Check& gr = A.check("complex.grading");
    for (std::size_t k = 0; k < A.C.size(); ++k) {
        const ChordComplex& C = A.C[k];
        for (int i = 0; i < C.size(); ++i)
            for (int j = 0; j < C.size(); ++j)
                if (C.delta(i, j) && (C.gens[i].grading != C.gens[j].grading + 1 || !(C.gens[i].value > C.gens[j].value)))
                    gr.fail("delta entry " + C.gens[j].id + " -> " + C.gens[i].id);
    }
    for (auto [a, b, c] : A.m.triples)
        if (A.slot(2).gens[c].grading != A.slot(0).gens[a].grading + A.slot(1).gens[b].grading)
            gr.fail("product entry off grading");
    if (!rep.delta_squared.empty()) return;
    for (auto& C : A.C) A.H.push_back(cohomology(C));
    if (!rep.leibniz.empty()) return;
    A.mu = ring_product(A.hslot(0), A.hslot(1), A.slot(2), A.hslot(2), A.m);
    A.has_cohomology = true;
}

inline void gf_chords(Analysis& A, const Logger& log)
{
    const RunConfig& cfg = A.cfg;
    A.F = std::make_shared<GeneratingFamily>(cfg.build());
    A.w = std::make_shared<DifferenceField>(*A.F);
    note(log, "critical points of w on a grid of " + std::to_string(cfg.seed.crit_grid) + " per axis");
    A.crits = find_critical_points(*A.w, difference_search(*A.w, cfg.seed.crit_grid, cfg.tol.crit));
    A.C.push_back(detail::complex_of(positive_part(A.crits)));
    Check& grad = A.check("critical.gradient");
    Check& box = A.check("critical.in_box");
    Check& anti = A.check("critical.antisymmetry");
    Box sb = A.w->search_box();
    auto per = A.w->periodic_axes();
    int n = A.F->n(), N = A.F->N();
    for (auto& c : A.crits) {
        if (A.w->gradient(c.coords).norm() >= cfg.tol.crit.grad) grad.fail(c.id);
        if (!sb.contains(c.coords, 1e-9) && per.empty()) box.fail(c.id);
        Vec sw = c.coords;
        sw.segment(n, N) = c.coords.segment(n + N, N);
        sw.segment(n + N, N) = c.coords.segment(n, N);
        bool found = false;
        for (auto& d : A.crits)
            if (wrap_diff(d.coords - sw, per).norm() < cfg.tol.crit.dedup && std::abs(d.value + c.value) < 1e-9) found = true;
        if (!found) anti.fail("no partner for " + c.id);
    }
}

inline void gf_differential(Analysis& A, const Logger& log)
{
    A.space = make_space(*A.w, A.w->search_box(), A.crits, A.cfg.tol.flow);
    A.split = split_space(A.space, A.crits);
    note(log, "line counts for delta");
    auto pos = positive_part(A.crits);
    differential(
        A, 0, [&](const CriticalPoint& p, const CriticalPoint& q) { return count_lines(A.split, p.id, q.id); }, pos, A.space);
}

inline void gf_product(Analysis& A, const Logger& log)
{
    auto pos = positive_part(A.crits);
    A.has_product = true;
    if (pos.empty()) {
        A.m = Product{0, 0, 0, {}};
        return;
    }
    const RunConfig& cfg = A.cfg;
    A.rho = least_positive_value(pos);
    QuadraticLike Q = cfg.quadratic(A.F->N());
    A.q_scale = cfg.q_scale ? *cfg.q_scale : fit_q_scale(*A.F, Q, *A.rho, cfg.tol.q_factor);
    Q = Q.scaled(A.q_scale);
    const int pairs[3][2] = {{1, 2}, {2, 3}, {1, 3}};
    std::vector<const Field*> fs;
    for (int k = 0; k < 3; ++k) {
        auto e = std::make_shared<ExtendedField>(*A.F, Q, pairs[k][0], pairs[k][1]);
        A.h[k] = e;
        A.hbox[k] = e->search_box();
        A.hcrits[k].clear();
        for (auto& c : A.crits) A.hcrits[k].push_back(iota(c, *e, cfg.tol.crit));
        A.hspace[k] = make_space(*e, A.hbox[k], A.hcrits[k], cfg.tol.flow);
        fs.push_back(e.get());
    }
    A.confine = tree_region(*A.F).inflate(cfg.tol.flow.escape_factor);
    note(log, "rho and the perturbation radius");
    RhoBound rb = rho_and_perturbation_bound(pos, fs, tree_region(*A.F), cfg.seed.lipschitz_grid);
    A.lipschitz = rb.lipschitz;
    A.s = draw_perturbations(A.h[0]->dim(), rb.delta, cfg.seed.rng);
    products(A, log);
}

inline void gf_verify(Analysis& A, const Logger& log)
{
    const RunConfig& cfg = A.cfg;
    note(log, "family checks");
    Check& ext = A.check("family.exterior_linearity");
    double dl = exterior_linearity_defect(*A.F, 10000);
    if (dl > 1e-12) ext.fail("|F - A.e| = " + std::to_string(dl) + " outside the outer box");
    Check& blend = A.check("family.blend_annulus");
    double bg = blend_annulus_min_gradient(*A.F);
    if (!(bg > cfg.tol.blend_floor))
        blend.fail("min |grad w| = " + std::to_string(bg) + " on the blend annulus, floor " + std::to_string(cfg.tol.blend_floor));
    auto pos = positive_part(A.crits);
    if (pos.empty()) return;
    auto& e12 = static_cast<const ExtendedField&>(*A.h[0]);
    auto& e23 = static_cast<const ExtendedField&>(*A.h[1]);
    auto& e13 = static_cast<const ExtendedField&>(*A.h[2]);
    Check& jump = A.check("family.jump_identity");
    {
        std::mt19937_64 rng(cfg.seed.rng);
        std::uniform_real_distribution<double> U(0.0, 1.0);
        Box K = tree_region(*A.F);
        double worst = 0;
        for (int it = 0; it < 1000; ++it) {
            Vec y(K.dim());
            for (int i = 0; i < K.dim(); ++i) y[i] = K.iv[i].lo + U(rng) * K.iv[i].width();
            worst = std::max(worst, std::abs(jump_residual(e12, e23, e13, y)));
        }
        if (worst > 1e-12) jump.fail("residual " + std::to_string(worst));
    }
    Check& io = A.check("critical.iota");
    Check& tr = A.check("flow.line_transfer");
    Check& spl = A.check("flow.splitting");
    for (int k = 0; k < 3; ++k) {
        auto& e = static_cast<const ExtendedField&>(*A.h[k]);
        for (auto& p : pos) {
            const CriticalPoint& c = find_crit(A.hcrits[k], p.id);
            if (std::abs(c.value - p.value) > 1e-9) io.fail(p.id + " value in " + e.tag());
            if (c.index != p.index + (e.j() - e.i() - 1) * A.F->N()) io.fail(p.id + " index in " + e.tag());
            if (c.grading != p.grading) io.fail(p.id + " grading in " + e.tag());
        }
        note(log, "line counts through " + e.tag());
        SplitSpace es = split_space(A.hspace[k], A.hcrits[k]);
        const ChordComplex& C = A.C[0];
        for (int j = 0; j < C.size(); ++j)
            for (int i = 0; i < C.size(); ++i) {
                if (C.gens[i].grading != C.gens[j].grading + 1) continue;
                LineCount lc = count_lines(es, C.gens[j].id, C.gens[i].id);
                if (lc.count % 2 != C.delta(i, j))
                    tr.fail(e.tag() + ": " + C.gens[j].id + " -> " + C.gens[i].id + " count " + std::to_string(lc.count));
                for (auto& t : lc.lines)
                    for (auto& x : t.samples)
                        if ((x.segment(e.slot(e.k()), A.F->N()) - e.Q().zero()).cwiseAbs().maxCoeff() > 1e-9) {
                            spl.fail(e.tag() + ": free slot leaves 0_Q on " + C.gens[j].id + " -> " + C.gens[i].id);
                            break;
                        }
            }
    }
}

inline void morse_all(Analysis& A, Stage stage, const Logger& log)
{
    const RunConfig& cfg = A.cfg;
    Layout L{cfg.morse.n, 0, 1};
    MorseFields mf = morse_mode_fields(Expr::parse(cfg.morse.f, L), Expr::parse(cfg.morse.g, L));
    A.h = {mf.h1, mf.h2, mf.h3};
    Box T;
    T.iv.assign(cfg.morse.n, Interval{0.0, 1.0});
    const char* names[3] = {"f", "g", "h"};
    for (int k = 0; k < 3; ++k) {
        A.hbox[k] = T;
        auto cs = find_critical_points(*A.h[k], {T, cfg.seed.crit_grid, cfg.tol.crit, 0, false});
        for (std::size_t i = 0; i < cs.size(); ++i) cs[i].id = names[k] + std::to_string(i + 1);
        A.hcrits[k] = cs;
        A.hspace[k] = make_space(*A.h[k], T, cs, cfg.tol.flow);
        A.C.push_back(complex_of(cs));
    }
    A.confine = T;
    if (stage == Stage::Chords) return;
    for (int k = 0; k < 3; ++k) {
        note(log, "line counts for " + A.h[k]->tag());
        differential(
            A, k, [&](const CriticalPoint& p, const CriticalPoint& q) { return count_lines(A.hspace[k], p, q); },
            A.hcrits[k], A.hspace[k]);
    }
    if (stage == Stage::Differential) return;
    A.has_product = true;
    A.s = draw_perturbations(cfg.morse.n, cfg.morse.delta_pert, cfg.seed.rng);
    products(A, log);
}

} // namespace detail

inline Analysis analyze(const RunConfig& cfg, Stage stage, const Logger& log = {})
{
    Analysis A;
    A.cfg = cfg;
    A.morse = cfg.is_morse();
    if (A.morse) {
        detail::morse_all(A, stage, log);
    } else {
        detail::gf_chords(A, log);
        if (stage >= Stage::Differential) detail::gf_differential(A, log);
        if (stage >= Stage::Product) detail::gf_product(A, log);
        if (stage >= Stage::Verify) detail::gf_verify(A, log);
    }
    if (stage >= Stage::Product) detail::algebra(A);
    if (A.morse && A.has_cohomology) {
        // Morse cohomology of T^n has binomial ranks
        Check& b = A.check("morse.betti");
        int n = cfg.morse.n;
        std::map<int, int> expect;
        for (int k = 0, c = 1; k <= n; c = c * (n - k) / (k + 1), ++k) expect[k] = c;
        for (std::size_t k = 0; k < A.H.size(); ++k)
            if (A.H[k].ranks != expect) b.fail(A.h[k]->tag() + " ranks differ from the torus");
    }
    return A;
}

// ---- reports ----

namespace detail {

inline Json crit_json(const CriticalPoint& c, int N)
{
    Json j = Json::object();
    j["id"] = c.id;
    j["coords"] = vec_json(c.coords);
    j["value"] = c.value;
    j["index"] = c.index;
    j["grading"] = c.grading;
    if (N >= 0) j["grading_shift_N_plus_1"] = c.grading - 1;
    j["hess_eigs"] = vec_json(c.eigs);
    return j;
}

inline Json delta_json(const ChordComplex& C)
{
    Json a = Json::array();
    for (int j = 0; j < C.size(); ++j)
        for (int i = 0; i < C.size(); ++i)
            if (C.delta(i, j)) a.push_back({C.gens[j].id, C.gens[i].id});
    return a;
}

inline Json ids_json(const ChordComplex& C, const Z2Vec& v)
{
    Json a = Json::array();
    for (int i = 0; i < C.size(); ++i)
        if (v[i]) a.push_back(C.gens[i].id);
    return a;
}

inline Json cohomology_json(const ChordComplex& C, const Cohomology& H)
{
    Json j = Json::object();
    Json r = Json::object();
    for (auto [g, k] : H.ranks) r[std::to_string(g)] = k;
    j["ranks"] = r;
    Json cl = Json::array();
    for (auto& c : H.classes) cl.push_back({{"grading", c.grading}, {"rep", ids_json(C, c.rep)}});
    j["classes"] = cl;
    return j;
}

} // namespace detail

inline Json checks_json(const std::vector<Check>& checks)
{
    Json a = Json::array();
    for (auto& c : checks) a.push_back({{"name", c.name}, {"pass", c.pass}, {"details", c.details}});
    return a;
}

inline Json report(const Analysis& A, const std::string& command)
{
    Json j = Json::object();
    j["command"] = command;
    j["config"] = A.cfg.resolved();
    j["seed"] = A.cfg.seed.rng;
    const char* slots[3] = {"f", "g", "f+g"};
    if (A.morse) {
        Json cp = Json::object();
        for (int k = 0; k < 3; ++k) {
            Json l = Json::array();
            for (auto& c : A.hcrits[k]) l.push_back(detail::crit_json(c, -1));
            cp[slots[k]] = l;
        }
        j["critical_points"] = cp;
    } else {
        Json l = Json::array();
        for (auto& c : positive_part(A.crits)) l.push_back(detail::crit_json(c, A.F->N()));
        j["chords"] = l;
        j["grading_shift"] = A.F->N();
    }
    if (!A.lines.empty() || A.checks.size() > 3 || A.has_product) {
        if (A.morse) {
            Json d = Json::object();
            for (int k = 0; k < 3; ++k) d[slots[k]] = detail::delta_json(A.C[k]);
            j["differential"] = d;
        } else {
            j["differential"] = detail::delta_json(A.C[0]);
        }
    }
    if (A.has_product) {
        j["rho"] = A.rho ? Json(*A.rho) : Json();
        j["lipschitz"] = A.morse ? Json() : Json(A.lipschitz);
        j["delta_pert"] = A.s.bound;
        j["q_scale"] = A.morse ? Json() : Json(A.q_scale);
        Json s = Json::array();
        for (auto& v : A.s.s) s.push_back(detail::vec_json(v));
        j["s"] = s;
        Json m = Json::array();
        for (auto [a, b, c] : A.m.triples) m.push_back({A.slot(0).gens[a].id, A.slot(1).gens[b].id, A.slot(2).gens[c].id});
        j["product"] = m;
        Json t = Json::array();
        for (auto& r : A.trees)
            if (!r.trees.empty()) {
                Json ys = Json::array();
                for (auto& ft : r.trees) ys.push_back(detail::vec_json(ft.y));
                t.push_back({{"ids", r.ids}, {"count", r.trees.size()}, {"meeting_points", ys}});
            }
        j["trees"] = t;
    }
    if (A.has_cohomology) {
        if (A.morse) {
            Json h = Json::object();
            for (int k = 0; k < 3; ++k) h[slots[k]] = detail::cohomology_json(A.C[k], A.H[k]);
            j["cohomology"] = h;
        } else {
            j["cohomology"] = detail::cohomology_json(A.C[0], A.H[0]);
        }
        Json mu = Json::array();
        for (std::size_t a = 0; a < A.mu.mu.size(); ++a)
            for (std::size_t b = 0; b < A.mu.mu[a].size(); ++b)
                if (!z2::is_zero(A.mu.mu[a][b])) {
                    Json cls = Json::array();
                    for (std::size_t c = 0; c < A.mu.mu[a][b].size(); ++c)
                        if (A.mu.mu[a][b][c]) cls.push_back(c);
                    mu.push_back({{"a", a}, {"b", b}, {"product", cls}});
                }
        j["mu2"] = mu;
    }
    j["checks"] = checks_json(A.checks);
    j["pass"] = A.pass();
    return j;
}

// Aligned text table of the generators.
inline std::string chord_table(const Analysis& A)
{
    std::ostringstream os;
    auto table = [&](const std::vector<CriticalPoint>& cs, const std::string& title) {
        os << title << "\n";
        char buf[256];
        std::snprintf(buf, sizeof buf, "  %-6s %14s %6s %8s  %s\n", "id", "value", "index", "grading", "coords");
        os << buf;
        for (auto& c : cs) {
            std::snprintf(buf, sizeof buf, "  %-6s %14.9f %6d %8d  ", c.id.c_str(), c.value, c.index, c.grading);
            os << buf << detail::fmt_point(c.coords) << "\n";
        }
    };
    if (A.morse) {
        const char* names[3] = {"f", "g", "f+g"};
        for (int k = 0; k < 3; ++k) table(A.hcrits[k], std::string("critical points of ") + names[k]);
    } else {
        table(positive_part(A.crits), "Reeb chords (grading = index - " + std::to_string(A.F->N()) + ")");
    }
    return os.str();
}

inline std::string summary_text(const Analysis& A)
{
    std::ostringstream os;
    auto ranks = [&](const Cohomology& H) {
        std::string s;
        for (auto [g, k] : H.ranks) s += (s.empty() ? "" : ", ") + std::to_string(g) + ":" + std::to_string(k);
        return "{" + s + "}";
    };
    for (std::size_t k = 0; k < A.C.size(); ++k) {
        std::string tag = A.C.size() == 1 ? "" : std::string(" [") + A.h[k]->tag() + "]";
        os << "delta" << tag << ": " << detail::delta_json(A.C[k]).dump() << "\n";
        if (k < A.H.size()) os << "ranks" << tag << ": " << ranks(A.H[k]) << "\n";
    }
    if (A.has_product) {
        os << "m2 entries: " << A.m.triples.size() << "\n";
        if (A.rho) os << "rho = " << *A.rho << ", delta_pert = " << A.s.bound << ", seed = " << A.cfg.seed.rng << "\n";
    }
    if (A.has_cohomology) {
        int nz = 0;
        for (auto& row : A.mu.mu)
            for (auto& v : row) nz += !z2::is_zero(v);
        os << "mu2 nonzero class products: " << nz << "\n";
    }
    for (auto& c : A.checks) {
        os << (c.pass ? "  PASS " : "  FAIL ") << c.name << "\n";
        for (auto& d : c.details) os << "       " << d << "\n";
    }
    return os.str();
}

// CSV polylines: kind, label, sample index, coordinates.
inline void write_polylines(const Analysis& A, std::ostream& os)
{
    os << "kind,label,sample,coords\n";
    auto row = [&](const std::string& kind, const std::string& label, std::size_t k, const Vec& x) {
        os << kind << ',' << label << ',' << k;
        for (Eigen::Index i = 0; i < x.size(); ++i) os << ',' << x[i];
        os << '\n';
    };
    for (auto& r : A.lines)
        for (std::size_t l = 0; l < r.lines.size(); ++l)
            for (std::size_t k = 0; k < r.lines[l].samples.size(); ++k)
                row("line", r.from + "->" + r.to + "#" + std::to_string(l), k, r.lines[l].samples[k]);
    for (auto& r : A.trees)
        for (std::size_t t = 0; t < r.trees.size(); ++t)
            for (int a = 0; a < 3; ++a)
                for (std::size_t k = 0; k < r.trees[t].arms[a].size(); ++k)
                    row("tree", r.ids[0] + "," + r.ids[1] + "->" + r.ids[2] + "#" + std::to_string(t) + ".arm" + std::to_string(a), k,
                        r.trees[t].arms[a][k]);
}

// ---- comparisons ----

struct Comparison {
    std::string kind;
    RingVerdict verdict;
    std::vector<Check> checks;
    Json detail = Json::object();

    bool pass() const
    {
        if (!verdict.pass()) return false;
        for (auto& c : checks)
            if (!c.pass) return false;
        return true;
    }
};

inline Json comparison_json(const Comparison& c)
{
    Json j = Json::object();
    j["kind"] = c.kind;
    for (auto& [k, v] : c.detail.items()) j[k] = v;
    j["verdict"] = {{"ranks_equal", c.verdict.ranks_equal},
                    {"chain_maps", c.verdict.chain_maps},
                    {"isomorphisms", c.verdict.isomorphisms},
                    {"commutes", c.verdict.commutes},
                    {"defects", c.verdict.defects}};
    j["checks"] = checks_json(c.checks);
    j["pass"] = c.pass();
    return j;
}

namespace detail {

inline Json summary_json(const Analysis& A)
{
    Json j = Json::object();
    Json ch = Json::array();
    for (auto& g : A.C[0].gens) ch.push_back({{"id", g.id}, {"value", g.value}, {"grading", g.grading}});
    j["chords"] = ch;
    j["differential"] = delta_json(A.C[0]);
    Json m = Json::array();
    for (auto [a, b, c] : A.m.triples) m.push_back({A.C[0].gens[a].id, A.C[0].gens[b].id, A.C[0].gens[c].id});
    j["product"] = m;
    if (A.has_cohomology) j["cohomology"] = cohomology_json(A.C[0], A.H[0]);
    j["seed"] = A.cfg.seed.rng;
    j["checks_pass"] = A.pass();
    return j;
}

inline Json map_json(const Z2Matrix& phi, const ChordComplex& from, const ChordComplex& to)
{
    Json a = Json::array();
    for (int j = 0; j < phi.cols(); ++j)
        for (int i = 0; i < phi.rows(); ++i)
            if (phi(i, j)) a.push_back({from.gens[j].id, to.gens[i].id});
    return a;
}

// Matches generators of B to those of A by mapping B's coordinates into A's space.
inline Z2Matrix match_coords(const Analysis& A, const Analysis& B, const std::function<Vec(const Vec&)>& to_a, Check& chk)
{
    auto pa = positive_part(A.crits), pb = positive_part(B.crits);
    Z2Matrix phi(B.C[0].size(), A.C[0].size());
    auto per = A.w->periodic_axes();
    std::vector<int> used(pa.size(), 0);
    if (pa.size() != pb.size()) chk.fail("generator counts differ: " + std::to_string(pa.size()) + " vs " + std::to_string(pb.size()));
    for (std::size_t i = 0; i < pb.size(); ++i) {
        Vec y = to_a(pb[i].coords);
        int hit = -1;
        for (std::size_t j = 0; j < pa.size(); ++j)
            if (wrap_diff(pa[j].coords - y, per).norm() < 1e-6) hit = static_cast<int>(j);
        if (hit < 0) {
            chk.fail("no counterpart for " + pb[i].id);
            continue;
        }
        if (used[hit]++) chk.fail("correspondence is not a bijection at " + pa[hit].id);
        if (pa[hit].grading != pb[i].grading) chk.fail(pa[hit].id + " and " + pb[i].id + " differ in grading");
        if (std::abs(pa[hit].value - pb[i].value) > 1e-6) chk.fail(pa[hit].id + " and " + pb[i].id + " differ in value");
        phi.set(static_cast<int>(i), hit, 1);
    }
    return phi;
}

inline RingVerdict same_map_compare(const Analysis& A, const Analysis& B, const Z2Matrix& phi)
{
    RingSide sa{&A.C[0], &A.C[0], &A.C[0], &A.m}, sb{&B.C[0], &B.C[0], &B.C[0], &B.m};
    return compare_rings(sa, sb, phi, phi, phi);
}

inline void carry_checks(Comparison& c, const Analysis& A, const std::string& tag)
{
    Check k{"analysis." + tag, true, {}};
    for (auto& ch : A.checks)
        if (!ch.pass) k.fail(ch.name);
    c.checks.push_back(k);
}

} // namespace detail

// F against F + sign * e'^2; generators matched by dropping the new fiber axes.
inline Comparison compare_stabilize(const RunConfig& cfg, int sign, const Logger& log = {})
{
    if (cfg.is_morse()) throw ConfigError("stabilization needs a generating-family config");
    RunConfig c2 = cfg;
    c2.stabilize.push_back(sign);
    c2.family["stabilize"].push_back(sign > 0 ? "+" : "-");
    c2.Q.reset();
    if (cfg.Q) throw ConfigError("stabilization comparisons use the standard Q");
    Analysis A = analyze(cfg, Stage::Product, log), B = analyze(c2, Stage::Product, log);
    Comparison c;
    c.kind = std::string("stabilize") + (sign > 0 ? "+" : "-");
    Check corr{"correspondence", true, {}};
    int n = A.F->n(), N = A.F->N();
    auto to_a = [&](const Vec& p) {
        Vec y(n + 2 * N);
        y.head(n) = p.head(n);
        y.segment(n, N) = p.segment(n, N);
        y.segment(n + N, N) = p.segment(n + N + 1, N);
        return y;
    };
    Z2Matrix phi = detail::match_coords(A, B, to_a, corr);
    c.checks.push_back(corr);
    detail::carry_checks(c, A, "F");
    detail::carry_checks(c, B, "stabilized");
    if (corr.pass) c.verdict = detail::same_map_compare(A, B, phi);
    c.detail["A"] = detail::summary_json(A);
    c.detail["B"] = detail::summary_json(B);
    c.detail["correspondence"] = detail::map_json(phi, A.C[0], B.C[0]);
    return c;
}

// F against F o Phi; B's generators pulled back through Phi.
inline Comparison compare_fpd(const RunConfig& cfg, const Logger& log = {})
{
    if (cfg.is_morse() || cfg.fpd.empty()) throw ConfigError("fpd comparison needs a config with an 'fpd' block");
    RunConfig c1 = cfg;
    c1.fpd.clear();
    c1.family.erase("fpd");
    Analysis A = analyze(c1, Stage::Product, log), B = analyze(cfg, Stage::Product, log);
    Comparison c;
    c.kind = "fpd";
    Check corr{"correspondence", true, {}};
    int n = B.F->n(), N = B.F->N(), N0 = cfg.base.N();
    auto to_a = [&](const Vec& p) {
        Vec y = p;
        for (int copy = 0; copy < 2; ++copy) {
            Vec xe(n + N);
            xe << p.head(n), p.segment(n + copy * N, N);
            y.segment(n + copy * N, N0) = B.F->apply_fpd(xe).tail(N0);
        }
        return y;
    };
    Z2Matrix phi = detail::match_coords(A, B, to_a, corr);
    c.checks.push_back(corr);
    detail::carry_checks(c, A, "F");
    detail::carry_checks(c, B, "F o Phi");
    if (corr.pass) c.verdict = detail::same_map_compare(A, B, phi);
    c.detail["A"] = detail::summary_json(A);
    c.detail["B"] = detail::summary_json(B);
    c.detail["correspondence"] = detail::map_json(phi, A.C[0], B.C[0]);
    return c;
}

// Two perturbation seeds: chain-level m2 may differ, classes must agree.
inline Comparison compare_reseed(const RunConfig& cfg, std::uint64_t seed2, const Logger& log = {})
{
    if (cfg.is_morse()) {
        RunConfig c2 = cfg;
        c2.seed.rng = seed2;
        Analysis A = analyze(cfg, Stage::Product, log), B = analyze(c2, Stage::Product, log);
        Comparison c;
        c.kind = "reseed";
        detail::carry_checks(c, A, "seed1");
        detail::carry_checks(c, B, "seed2");
        std::array<Z2Matrix, 3> I;
        for (int k = 0; k < 3; ++k) I[k] = Z2Matrix::identity(A.C[k].size());
        RingSide sa{&A.C[0], &A.C[1], &A.C[2], &A.m}, sb{&B.C[0], &B.C[1], &B.C[2], &B.m};
        c.verdict = compare_rings(sa, sb, I[0], I[1], I[2]);
        c.detail["chain_level_equal"] = A.m.triples == B.m.triples;
        c.detail["seeds"] = {cfg.seed.rng, seed2};
        return c;
    }
    RunConfig c2 = cfg;
    c2.seed.rng = seed2;
    Analysis A = analyze(cfg, Stage::Product, log), B = analyze(c2, Stage::Product, log);
    Comparison c;
    c.kind = "reseed";
    detail::carry_checks(c, A, "seed1");
    detail::carry_checks(c, B, "seed2");
    Check same{"same_generators", true, {}};
    if (A.C[0].size() != B.C[0].size()) same.fail("generator sets differ");
    c.checks.push_back(same);
    if (same.pass) c.verdict = detail::same_map_compare(A, B, Z2Matrix::identity(A.C[0].size()));
    c.detail["A"] = detail::summary_json(A);
    c.detail["B"] = detail::summary_json(B);
    c.detail["chain_level_equal"] = A.m.triples == B.m.triples;
    return c;
}

struct IsotopyRun {
    Analysis A, B;
    ContinuationResult w;
    std::array<ContinuationResult, 3> ext;
};

// Continuation maps for w and the three extended functions, then the ring square on cohomology.
inline Comparison compare_isotopy(const PathConfig& pc, const Logger& log = {}, IsotopyRun* keep = nullptr)
{
    RunConfig ca = pc.from, cb = pc.to;
    check_path(ca.build(), cb.build());
    // one Q scale for both ends so the extended functions interpolate
    if (!ca.q_scale || !cb.q_scale) {
        Analysis A0 = analyze(ca, Stage::Chords, log), B0 = analyze(cb, Stage::Chords, log);
        auto pa = positive_part(A0.crits), pb = positive_part(B0.crits);
        double lam = 1.0;
        if (!pa.empty() && !pb.empty()) {
            double la = fit_q_scale(*A0.F, ca.quadratic(A0.F->N()), least_positive_value(pa), ca.tol.q_factor);
            double lb = fit_q_scale(*B0.F, cb.quadratic(B0.F->N()), least_positive_value(pb), cb.tol.q_factor);
            lam = std::min(ca.q_scale.value_or(la), cb.q_scale.value_or(lb));
        }
        ca.q_scale = cb.q_scale = lam;
    }
    if (*ca.q_scale != *cb.q_scale) throw ConfigError("path endpoints set different q_scale values");
    IsotopyRun run;
    run.A = analyze(ca, Stage::Product, log);
    run.B = analyze(cb, Stage::Product, log);
    Analysis &A = run.A, &B = run.B;
    Comparison c;
    c.kind = "isotopy";
    detail::carry_checks(c, A, "from");
    detail::carry_checks(c, B, "to");
    if (!A.has_cohomology || !B.has_cohomology) {
        c.verdict.defects.push_back("endpoint algebra failed");
        return c;
    }
    if (A.H[0].ranks != B.H[0].ranks) throw ContinuationError("endpoint complexes have different graded ranks");

    ContinuationOptions o;
    o.eps = pc.eps;
    o.slices = pc.slices;
    o.per_axis = ca.seed.crit_grid;
    o.crit = ca.tol.crit;
    o.flow = ca.tol.flow;
    o.max_pieces = pc.max_pieces;
    detail::note(log, "continuation map of w");
    run.w = continuation_matrix(*A.w, A.crits, *B.w, B.crits, A.w->search_box(), o);
    Check cm{"continuation.cochain_map", true, {}};
    if (!is_chain_map(run.w.phi, A.C[0], B.C[0])) cm.fail("w");
    if (A.has_product && !positive_part(A.crits).empty()) {
        ContinuationOptions oe = o;
        oe.eps = run.w.eps;
        oe.rho_known = run.w.rho_t;
        for (int k = 0; k < 3; ++k) {
            detail::note(log, "continuation map of " + A.h[k]->tag());
            run.ext[k] = continuation_matrix(*A.h[k], A.hcrits[k], *B.h[k], B.hcrits[k], A.hbox[k], oe);
            if (!is_chain_map(run.ext[k].phi, A.C[0], B.C[0])) cm.fail(A.h[k]->tag());
        }
    } else {
        for (auto& e : run.ext) e.phi = run.w.phi;
    }
    c.checks.push_back(cm);
    bool same = true;
    for (int k = 0; k < 3; ++k) same = same && run.ext[k].phi == run.w.phi;
    RingSide sa{&A.C[0], &A.C[0], &A.C[0], &A.m}, sb{&B.C[0], &B.C[0], &B.C[0], &B.m};
    if (cm.pass) c.verdict = compare_rings(sa, sb, run.ext[0].phi, run.ext[1].phi, run.ext[2].phi);
    c.detail["A"] = detail::summary_json(A);
    c.detail["B"] = detail::summary_json(B);
    c.detail["eps"] = run.w.eps;
    c.detail["rho_t"] = run.w.rho_t;
    c.detail["pieces"] = run.w.pieces;
    c.detail["q_scale"] = *ca.q_scale;
    c.detail["phi_w"] = detail::map_json(run.w.phi, A.C[0], B.C[0]);
    const char* tags[3] = {"phi_12", "phi_23", "phi_13"};
    for (int k = 0; k < 3; ++k) c.detail[tags[k]] = detail::map_json(run.ext[k].phi, A.C[0], B.C[0]);
    c.detail["extended_maps_equal_w"] = same;
    c.detail["notes"] = run.w.notes;
    if (keep) *keep = std::move(run);
    return c;
}

} // namespace gftrees
