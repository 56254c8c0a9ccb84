#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "stacksafe/campaign.hpp"

using namespace stacksafe;

namespace {

constexpr int kConfigVersion = 1;

std::vector<PropId> parse_props(const std::string& csv) {
    std::vector<PropId> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        auto p = prop_from_name(item);
        if (!p) throw ConfigError("unknown property '" + item + "'");
        out.push_back(*p);
    }
    if (out.empty()) throw ConfigError("no properties selected");
    return out;
}

// Config file mirrors the flags; explicitly passed flags win.
void load_config_file(const std::string& path, CampaignConfig& cfg) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    nlohmann::json j = nlohmann::json::parse(in);
    if (j.contains("version") && j["version"].get<int>() != kConfigVersion)
        throw ConfigError("config version mismatch: expected " + std::to_string(kConfigVersion));
    if (j.contains("policy")) cfg.policy = j["policy"].get<std::string>();
    if (j.contains("props")) cfg.props = parse_props(j["props"].get<std::string>());
    if (j.contains("tests")) cfg.tests = j["tests"].get<int>();
    if (j.contains("seed")) cfg.gen.seed = j["seed"].get<uint64_t>();
    if (j.contains("fuel")) cfg.gen.fuel = j["fuel"].get<int>();
    if (j.contains("variants")) cfg.n_variants = j["variants"].get<int>();
    if (j.contains("jobs")) cfg.jobs = j["jobs"].get<int>();
    if (j.contains("soak")) cfg.soak = j["soak"].get<bool>();
    if (j.contains("shrink")) cfg.do_shrink = j["shrink"].get<bool>();
    if (j.contains("emit")) cfg.emit_dir = j["emit"].get<std::string>();
    if (j.contains("dump_traces")) cfg.dump_traces = j["dump_traces"].get<bool>();
    if (j.contains("argreg"))
        cfg.argreg = j["argreg"].get<std::string>() == "active" ? ArgRegClass::Active
                                                                : ArgRegClass::Public;
    if (j.contains("gen")) {
        const auto& g = j["gen"];
        if (g.contains("max_functions")) cfg.gen.max_functions = g["max_functions"].get<int>();
        if (g.contains("max_frame_words")) cfg.gen.max_frame_words = g["max_frame_words"].get<int>();
        if (g.contains("call_depth_cap")) cfg.gen.call_depth_cap = g["call_depth_cap"].get<int>();
        if (g.contains("p_call")) cfg.gen.p_call = g["p_call"].get<double>();
        if (g.contains("p_tailcall")) cfg.gen.p_tailcall = g["p_tailcall"].get<double>();
        if (g.contains("p_store")) cfg.gen.p_store = g["p_store"].get<double>();
        if (g.contains("p_load")) cfg.gen.p_load = g["p_load"].get<double>();
        if (g.contains("p_misbehave")) cfg.gen.p_misbehave = g["p_misbehave"].get<double>();
        if (g.contains("p_public_alloc")) cfg.gen.p_public_alloc = g["p_public_alloc"].get<double>();
        if (g.contains("p_init_after_call"))
            cfg.gen.p_init_after_call = g["p_init_after_call"].get<double>();
    }
}

struct CommonFlags {
    std::string policy;
    std::string props;
    std::string argreg;
    int tests = 0;
    uint64_t seed = 0;
    int fuel = 0;
    int variants = 0;
    int jobs = 0;
    std::string emit_dir;
    std::string config_path;
    std::string out_path;
    bool soak = false;
    bool do_shrink = false;
    bool dump_traces = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--policy", f.policy, "di | ltc | di+regs | ltc+regs | mutant:<ID> | none");
    cmd->add_option("--props", f.props, "comma list of wbcf,clri,clrc,clec,clei");
    cmd->add_option("--seed", f.seed, "root seed");
    cmd->add_option("--fuel", f.fuel, "max steps per trace");
    cmd->add_option("--variants", f.variants, "variants per irrelevance check");
    cmd->add_option("--jobs", f.jobs, "parallel workers");
    cmd->add_option("--emit", f.emit_dir, "write failing case assembly/annotations to DIR");
    cmd->add_option("--argreg", f.argreg, "class of argument registers at calls: public | active");
    cmd->add_option("--config", f.config_path, "JSON config file; flags override it");
    cmd->add_option("--out", f.out_path, "write the JSON report here");
    cmd->add_flag("--dump-traces", f.dump_traces, "dump execution traces for failures");
}

CampaignConfig build_config(const CLI::App* cmd, const CommonFlags& f) {
    CampaignConfig cfg;
    if (!f.config_path.empty()) load_config_file(f.config_path, cfg);
    if (cmd->count("--policy")) cfg.policy = f.policy;
    if (cmd->count("--props")) cfg.props = parse_props(f.props);
    if (cmd->count("--seed")) cfg.gen.seed = f.seed;
    if (cmd->count("--fuel")) cfg.gen.fuel = f.fuel;
    if (cmd->count("--variants")) cfg.n_variants = f.variants;
    if (cmd->count("--jobs")) cfg.jobs = f.jobs;
    if (cmd->count("--emit")) cfg.emit_dir = f.emit_dir;
    if (cmd->count("--argreg")) {
        if (f.argreg == "public") cfg.argreg = ArgRegClass::Public;
        else if (f.argreg == "active") cfg.argreg = ArgRegClass::Active;
        else throw ConfigError("argreg must be public or active");
    }
    if (cmd->count("--dump-traces")) cfg.dump_traces = true;
    return cfg;
}

void write_report(const std::string& path, const CampaignReport& rep) {
    if (path.empty()) return;
    std::ofstream out(path);
    out << rep.to_json();
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"stacksafe: property campaigns for tag-based stack protection"};
    app.require_subcommand(1);

    CommonFlags rf, mf, pf;
    int run_tests = 1000;
    bool run_soak = false, run_shrink = false;
    CLI::App* run = app.add_subcommand("run", "generate tests and check properties");
    add_common(run, rf);
    run->add_option("--tests", run_tests, "test budget");
    run->add_flag("--soak", run_soak, "keep going past the first failure");
    run->add_flag("--shrink", run_shrink, "minimize the first failing case");

    int matrix_budget = 0;
    int control_budget = 200;
    CLI::App* matrix = app.add_subcommand("matrix", "run the mutation matrix");
    add_common(matrix, mf);
    matrix->add_option("--budget", matrix_budget, "cap every row's test budget");
    matrix->add_option("--control-budget", control_budget, "tests per correct-policy control");

    uint64_t replay_seed = 0;
    CLI::App* rep = app.add_subcommand("replay", "re-run one test case by seed");
    add_common(rep, pf);
    rep->add_option("--seed-of-test", replay_seed, "per-test seed from a report")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) {
            CampaignConfig cfg = build_config(run, rf);
            if (run->count("--tests")) cfg.tests = run_tests;
            if (run->count("--soak")) cfg.soak = true;
            if (run->count("--shrink")) cfg.do_shrink = true;
            CampaignReport report = run_campaign(cfg);
            std::cout << report.human_table();
            std::cout << report.machine_lines();
            write_report(rf.out_path, report);
            return report.any_fail() ? kExitPropertyFail : kExitOk;
        }
        if (matrix->parsed()) {
            CampaignConfig cfg = build_config(matrix, mf);
            MatrixReport report = run_mutation_matrix(cfg, matrix_budget, control_budget);
            std::cout << report.human_table();
            if (!report.controls_clean) return kExitPropertyFail;
            return report.all_mutants_killed ? kExitOk : kExitMutantSurvived;
        }
        if (rep->parsed()) {
            CampaignConfig cfg = build_config(rep, pf);
            ReplayResult result = replay(replay_seed, cfg);
            for (const Verdict& v : result.verdicts) std::cout << v.report_line() << "\n";
            if (!pf.emit_dir.empty()) {
                std::filesystem::create_directories(pf.emit_dir);
                std::ofstream(pf.emit_dir + "/replayed.s") << result.tc.assembly_text();
                std::ofstream(pf.emit_dir + "/replayed.ann") << result.tc.annotation_text();
            }
            if (cfg.dump_traces) {
                MicroPolicy pol = parse_policy(cfg.policy);
                CombinedState s = make_initial_state(result.tc, pol, cfg.argreg);
                System sys{&pol, &result.tc.code, &result.tc.annot};
                IrrelevanceBudget budget;
                budget.n_variants = cfg.n_variants;
                budget.fuel = Fuel{cfg.gen.fuel};
                std::cout << "TRACE base\n" << dump_trace(s, 0, sys, budget.fuel);
                for (const Verdict& v : result.verdicts) {
                    if (v.outcome != Outcome::Fail) continue;
                    std::cout << dump_failure_traces(s, sys, v, budget);
                }
            }
            return result.any_fail ? kExitPropertyFail : kExitOk;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitError;
    }
    return kExitError;
}
