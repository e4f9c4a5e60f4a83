// gftrees command-line driver.

#include "gftrees/pipeline.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>
#include <tbb/global_control.h>

#include <chrono>
#include <cstdlib>
#include <iostream>

using namespace gftrees;

namespace {

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    int jobs = 0;
    bool dump = false;
    std::string json;
    bool strict = false;
    std::string stabilize;
    bool fpd = false;
    std::optional<std::uint64_t> reseed;
    std::string isotopy;
};

void setup_logging()
{
    auto log = spdlog::stderr_color_mt("gftrees");
    spdlog::set_default_logger(log);
    spdlog::set_pattern("[%l] %v");
    const char* env = std::getenv("GFTREES_LOG");
    spdlog::set_level(env ? spdlog::level::from_str(env) : spdlog::level::warn);
}

RunConfig load(const Options& o, bool morse)
{
    RunConfig c;
    if (o.config.empty()) {
        if (!morse) throw ConfigError("a config file is required");
        c = parse_config(Json{{"mode", "morse-torus"}});
    } else {
        c = load_config(o.config);
    }
    if (morse && !c.is_morse()) throw ConfigError("morse-torus needs a config with mode \"morse-torus\"");
    if (o.seed) c.seed.rng = *o.seed;
    if (o.strict) c.tol.strict = true;
    return c;
}

void emit_json(const Json& j, const Options& o, const RunConfig& c)
{
    std::string path = !o.json.empty() ? o.json : c.out_json;
    if (path.empty()) return;
    std::string text = j.dump(2) + "\n";
    if (path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path);
    out << text;
    spdlog::info("report written to {}", path);
}

void emit_csv(const Analysis& A, const Options& o)
{
    if (!o.dump) return;
    std::string path = A.cfg.out_csv;
    if (path.empty()) path = o.config.empty() ? "polylines.csv" : std::filesystem::path(o.config).stem().string() + "_polylines.csv";
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path);
    write_polylines(A, out);
    spdlog::info("polylines written to {}", path);
}

int run_analysis(const std::string& command, Stage stage, const Options& o, bool morse)
{
    RunConfig c = load(o, morse);
    auto t0 = std::chrono::steady_clock::now();
    Analysis A = analyze(c, stage, [](const std::string& s) { spdlog::info("{}", s); });
    spdlog::info("{} finished in {:.2f} s", command,
                 std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    bool to_stdout = (!o.json.empty() ? o.json : c.out_json) == "-";
    std::ostream& text = to_stdout ? std::cerr : std::cout;
    text << chord_table(A);
    if (stage > Stage::Chords) text << summary_text(A);
    emit_json(report(A, command), o, c);
    emit_csv(A, o);
    return A.pass() ? 0 : 1;
}

int run_compare(const Options& o)
{
    int modes = !o.stabilize.empty() + o.fpd + o.reseed.has_value() + !o.isotopy.empty();
    if (modes != 1) throw ConfigError("compare needs exactly one of --stabilize, --fpd, --reseed, --isotopy");
    auto logger = [](const std::string& s) { spdlog::info("{}", s); };
    Comparison cmp;
    Json config;
    RunConfig c;
    if (!o.isotopy.empty()) {
        PathConfig pc = load_path_config(o.isotopy);
        if (o.seed) pc.from.seed.rng = pc.to.seed.rng = *o.seed;
        if (o.strict) pc.from.tol.strict = pc.to.tol.strict = true;
        c = pc.from;
        config = {{"from", pc.from.resolved()}, {"to", pc.to.resolved()}, {"eps", pc.eps ? Json(*pc.eps) : Json()},
                  {"slices", pc.slices}, {"max_pieces", pc.max_pieces}};
        cmp = compare_isotopy(pc, logger);
    } else {
        c = load(o, false);
        config = c.resolved();
        if (!o.stabilize.empty()) {
            if (o.stabilize != "+" && o.stabilize != "-") throw ConfigError("--stabilize takes + or -");
            cmp = compare_stabilize(c, o.stabilize == "+" ? 1 : -1, logger);
        } else if (o.fpd) {
            cmp = compare_fpd(c, logger);
        } else {
            cmp = compare_reseed(c, *o.reseed, logger);
        }
    }
    Json j = Json::object();
    j["command"] = "compare";
    j["config"] = config;
    Json body = comparison_json(cmp);
    for (auto& [k, v] : body.items()) j[k] = v;
    bool to_stdout = (!o.json.empty() ? o.json : c.out_json) == "-";
    std::ostream& text = to_stdout ? std::cerr : std::cout;
    const RingVerdict& v = cmp.verdict;
    text << "compare " << cmp.kind << "\n"
         << "  ranks equal:    " << (v.ranks_equal ? "yes" : "no") << "\n"
         << "  chain maps:     " << (v.chain_maps ? "yes" : "no") << "\n"
         << "  isomorphisms:   " << (v.isomorphisms ? "yes" : "no") << "\n"
         << "  ring square:    " << (v.commutes ? "commutes" : "fails") << "\n";
    for (auto& d : v.defects) text << "    " << d << "\n";
    for (auto& ch : cmp.checks) {
        text << (ch.pass ? "  PASS " : "  FAIL ") << ch.name << "\n";
        for (auto& d : ch.details) text << "       " << d << "\n";
    }
    emit_json(j, o, c);
    return cmp.pass() ? 0 : 1;
}

} // namespace

int main(int argc, char** argv)
{
    setup_logging();
    CLI::App app{"Generating family cohomology and its product from gradient flow trees"};
    app.require_subcommand(1);
    Options o;
    app.add_option("--seed", o.seed, "rng seed for the tree perturbations");
    app.add_option("--jobs", o.jobs, "worker threads (0: all cores)")->check(CLI::NonNegativeNumber);
    app.add_flag("--dump-trees", o.dump, "write trajectory and tree polylines as CSV");
    app.add_option("--json", o.json, "report path, - for stdout");
    app.add_flag("--strict", o.strict, "test that every line enters its target along the stable subspace");

    struct Sub {
        const char* name;
        const char* help;
        Stage stage;
    };
    const Sub subs[] = {{"chords", "Reeb chords with values and gradings", Stage::Chords},
                        {"differential", "the differential from gradient line counts", Stage::Differential},
                        {"cohomology", "cohomology ranks and class representatives", Stage::Product},
                        {"product", "the m2 tree counts and the ring product", Stage::Product},
                        {"verify", "every identity check", Stage::Verify}};
    std::vector<std::pair<CLI::App*, const Sub*>> analysis;
    for (auto& s : subs) {
        auto* sc = app.add_subcommand(s.name, s.help)->fallthrough();
        sc->add_option("config", o.config, "family config (JSON)")->required()->check(CLI::ExistingFile);
        analysis.emplace_back(sc, &s);
    }
    auto* cmp = app.add_subcommand("compare", "invariance checks between two runs")->fallthrough();
    cmp->add_option("config", o.config, "family config (JSON)")->check(CLI::ExistingFile);
    cmp->add_option("--stabilize", o.stabilize, "compare with F + sign e^2 (+ or -)");
    cmp->add_flag("--fpd", o.fpd, "compare F o Phi with F");
    cmp->add_option("--reseed", o.reseed, "compare with a second perturbation seed");
    cmp->add_option("--isotopy", o.isotopy, "path config for a continuation comparison")->check(CLI::ExistingFile);
    auto* morse = app.add_subcommand("morse-torus", "Morse flow trees of (f, g, f+g) on the torus")->fallthrough();
    morse->add_option("config", o.config, "optional morse-torus config")->check(CLI::ExistingFile);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    std::optional<tbb::global_control> pool;
    if (o.jobs > 0) pool.emplace(tbb::global_control::max_allowed_parallelism, static_cast<std::size_t>(o.jobs));

    try {
        for (auto& [sc, s] : analysis)
            if (sc->parsed()) return run_analysis(s->name, s->stage, o, false);
        if (cmp->parsed()) {
            if (o.config.empty() && o.isotopy.empty()) throw ConfigError("compare needs a config file");
            return run_compare(o);
        }
        if (morse->parsed()) return run_analysis("morse-torus", Stage::Verify, o, true);
    } catch (const ConfigError& e) {
        spdlog::error("config: {}", e.what());
        return 2;
    } catch (const ParseError& e) {
        spdlog::error("expr: {}", e.what());
        return 2;
    } catch (const FamilyError& e) {
        spdlog::error("family: {}", e.what());
        return 2;
    } catch (const DomainError& e) {
        spdlog::error("expr: {}", e.what());
        return 1;
    } catch (const CriticalError& e) {
        spdlog::error("critical: {}", e.what());
        return 1;
    } catch (const FlowError& e) {
        spdlog::error("flow: {}", e.what());
        return 1;
    } catch (const TreeError& e) {
        spdlog::error("trees: {}", e.what());
        return 1;
    } catch (const ComplexError& e) {
        spdlog::error("complex: {}", e.what());
        return 1;
    } catch (const ContinuationError& e) {
        spdlog::error("continuation: {}", e.what());
        return 1;
    }
    return 2;
}
