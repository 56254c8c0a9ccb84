#include "stacksafe/campaign.hpp"

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

namespace stacksafe {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

MicroPolicy reference_for(const MicroPolicy& pol) {
    switch (pol.base) {
    case MicroPolicy::Base::LTC: return with_register_protection(make_ltc());
    default: return with_register_protection(make_di());
    }
}

struct TestOutcome {
    int index = 0;
    uint64_t seed = 0;
    std::vector<Verdict> verdicts;
    bool fail = false;
};

TestOutcome run_one(int index, uint64_t root_seed, const CampaignConfig& cfg,
                    const MicroPolicy& pol, const MicroPolicy& ref) {
    TestOutcome out;
    out.index = index;
    out.seed = Rng(root_seed).derive(static_cast<uint64_t>(index) + 1).state();
    GenConfig gen = cfg.gen;
    gen.seed = out.seed;
    TestCase tc = generate(gen, ref);
    IrrelevanceBudget budget;
    budget.n_variants = cfg.n_variants;
    budget.fuel = Fuel{cfg.gen.fuel};
    out.verdicts = run_testcase(tc, pol, cfg.props, budget, cfg.argreg);
    for (const Verdict& v : out.verdicts)
        if (v.outcome == Outcome::Fail) out.fail = true;
    return out;
}

} // namespace

void CampaignConfig::validate() const {
    if (props.empty()) throw ConfigError("at least one property must be selected");
    if (tests <= 0) throw ConfigError("test budget must be positive");
    if (jobs < 1) throw ConfigError("parallelism degree must be at least 1");
    if (n_variants < 1) throw ConfigError("variant budget must be at least 1");
    gen.validate();
    parse_policy(policy);
}

CampaignReport run_campaign(const CampaignConfig& cfg) {
    cfg.validate();
    MicroPolicy pol = parse_policy(cfg.policy);
    MicroPolicy ref = reference_for(pol);
    CampaignReport rep;
    rep.policy = cfg.policy;
    rep.root_seed = cfg.gen.seed;
    for (PropId p : cfg.props) rep.counts[prop_name(p)] = PropCount{};

    Clock::time_point t0 = Clock::now();
    int next_index = 0;
    bool stop = false;

    auto absorb = [&](const TestOutcome& out) {
        rep.tests_run++;
        for (const Verdict& v : out.verdicts) {
            PropCount& c = rep.counts[prop_name(v.id)];
            switch (v.outcome) {
            case Outcome::Pass: c.pass++; break;
            case Outcome::Fail: c.fail++; break;
            case Outcome::Vacuous: c.vacuous++; break;
            }
            rep.total_sites += v.sites;
            rep.vacuous_sites += v.vacuous_sites;
            if (v.outcome == Outcome::Fail) {
                std::ostringstream line;
                line << "TEST " << out.index << " seed=" << std::hex << out.seed << std::dec << " "
                     << v.report_line();
                rep.fail_lines.push_back(line.str());
            }
        }
        if (out.fail && rep.first_fail_index < 0) {
            rep.first_fail_index = out.index;
            rep.first_fail_seed = out.seed;
            rep.wall_to_first_fail_s = seconds_since(t0);
            for (const Verdict& v : out.verdicts)
                if (v.outcome == Outcome::Fail) {
                    rep.first_fail_prop = prop_name(v.id);
                    break;
                }
        }
    };

    while (!stop && next_index < cfg.tests) {
        int chunk = std::min(cfg.jobs, cfg.tests - next_index);
        std::vector<TestOutcome> results(chunk);
        if (chunk == 1) {
            results[0] = run_one(next_index, cfg.gen.seed, cfg, pol, ref);
        } else {
            std::vector<std::thread> workers;
            for (int k = 0; k < chunk; ++k) {
                workers.emplace_back([&, k] {
                    results[k] = run_one(next_index + k, cfg.gen.seed, cfg, pol, ref);
                });
            }
            for (auto& w : workers) w.join();
        }
        for (const TestOutcome& out : results) {
            absorb(out);
            if (out.fail && !cfg.soak) {
                stop = true;
                break;
            }
        }
        next_index += chunk;
        if (cfg.time_budget_s > 0 && seconds_since(t0) > cfg.time_budget_s) stop = true;
    }

    rep.wall_total_s = seconds_since(t0);
    rep.vacuity_flagged = rep.total_sites > 0 && rep.vacuous_sites * 2 > rep.total_sites;

    if (rep.any_fail() && (cfg.do_shrink || !cfg.emit_dir.empty())) {
        GenConfig gen = cfg.gen;
        gen.seed = rep.first_fail_seed;
        TestCase tc = generate(gen, ref);
        IrrelevanceBudget budget;
        budget.n_variants = cfg.n_variants;
        budget.fuel = Fuel{cfg.gen.fuel};
        if (cfg.do_shrink) {
            auto failing = prop_from_name(rep.first_fail_prop);
            try {
                TestCase small = shrink(tc, *failing, pol, budget, cfg.argreg);
                rep.shrunk_assembly = small.assembly_text();
                tc = std::move(small);
            } catch (const std::exception&) {
                // keep the unshrunk case
            }
        }
        if (!cfg.emit_dir.empty()) {
            std::filesystem::create_directories(cfg.emit_dir);
            std::ofstream(cfg.emit_dir + "/failing.s") << tc.assembly_text();
            std::ofstream(cfg.emit_dir + "/failing.ann") << tc.annotation_text();
        }
    }
    return rep;
}

std::string CampaignReport::human_table() const {
    std::ostringstream os;
    os << "policy " << policy << "  seed " << std::hex << root_seed << std::dec << "  tests "
       << tests_run << "  wall " << std::fixed << std::setprecision(2) << wall_total_s << "s\n";
    os << std::left << std::setw(8) << "prop" << std::right << std::setw(10) << "pass"
       << std::setw(10) << "fail" << std::setw(10) << "vacuous" << "\n";
    for (const auto& [name, c] : counts) {
        os << std::left << std::setw(8) << name << std::right << std::setw(10) << c.pass
           << std::setw(10) << c.fail << std::setw(10) << c.vacuous << "\n";
    }
    if (first_fail_index >= 0) {
        os << "first failure: test " << first_fail_index << " (" << first_fail_prop << ", seed "
           << std::hex << first_fail_seed << std::dec << ", " << std::setprecision(2)
           << wall_to_first_fail_s << "s)\n";
    } else {
        os << "no failures\n";
    }
    if (vacuity_flagged)
        os << "warning: more than half of all call sites were vacuous; "
              "revisit the generator configuration\n";
    return os.str();
}

std::string CampaignReport::machine_lines() const {
    std::ostringstream os;
    for (const auto& l : fail_lines) os << l << "\n";
    return os.str();
}

std::string CampaignReport::to_json() const {
    nlohmann::json j;
    j["policy"] = policy;
    j["root_seed"] = root_seed;
    j["tests_run"] = tests_run;
    j["first_fail_index"] = first_fail_index;
    j["first_fail_prop"] = first_fail_prop;
    j["first_fail_seed"] = first_fail_seed;
    j["wall_to_first_fail_s"] = wall_to_first_fail_s;
    j["wall_total_s"] = wall_total_s;
    j["total_sites"] = total_sites;
    j["vacuous_sites"] = vacuous_sites;
    j["vacuity_flagged"] = vacuity_flagged;
    for (const auto& [name, c] : counts) {
        j["counts"][name] = {{"pass", c.pass}, {"fail", c.fail}, {"vacuous", c.vacuous}};
    }
    j["fail_lines"] = fail_lines;
    return j.dump(2);
}

std::vector<MatrixRow> mutation_matrix_rows() {
    // Budgets are ten times the reference average test counts.
    std::vector<PropId> integ = {PropId::ClrI, PropId::CleI};
    std::vector<PropId> conf = {PropId::ClrC, PropId::CleC};
    return {
        {"LOAD_NO_CHECK_DI", "Confidentiality", conf, 133},
        {"STORE_NO_CHECK", "Integrity", integ, 260},
        {"HEADER_NO_INIT", "Integrity", integ, 763},
        {"PER_DEPTH_TAG", "Integrity", integ, 83425},
        {"LOAD_NO_CHECK_LT", "Integrity", integ, 120},
        {"LOAD_NO_CHECK_LT", "Confidentiality", conf, 6955},
        {"STORE_NO_UPDATE", "Integrity", integ, 806},
        {"STORE_NO_UPDATE", "Confidentiality", conf, 885},
    };
}

MatrixReport run_mutation_matrix(const CampaignConfig& base, int budget_override,
                                 int control_budget) {
    MatrixReport rep;
    bool all_killed = true;
    for (const MatrixRow& row : mutation_matrix_rows()) {
        CampaignConfig cfg = base;
        cfg.policy = "mutant:" + row.mutant;
        cfg.props = row.props;
        cfg.tests = budget_override > 0 ? std::min(budget_override, row.budget) : row.budget;
        cfg.soak = false;
        cfg.do_shrink = false;
        CampaignReport r = run_campaign(cfg);
        MatrixRowResult rr;
        rr.row = row;
        rr.killed = r.any_fail();
        rr.tests_to_kill = r.any_fail() ? r.first_fail_index + 1 : -1;
        rr.wall_s = r.any_fail() ? r.wall_to_first_fail_s : r.wall_total_s;
        rr.killed_by = r.first_fail_prop;
        all_killed = all_killed && rr.killed;
        rep.rows.push_back(std::move(rr));
    }
    bool controls_clean = true;
    for (const char* control : {"di+regs", "ltc+regs"}) {
        CampaignConfig cfg = base;
        cfg.policy = control;
        cfg.props = all_props();
        cfg.tests = control_budget;
        cfg.soak = true;
        cfg.do_shrink = false;
        CampaignReport r = run_campaign(cfg);
        MatrixRowResult rr;
        rr.row = MatrixRow{control, "control", all_props(), control_budget};
        rr.control = true;
        rr.killed = r.any_fail(); // a control "kill" is a harness failure
        rr.tests_to_kill = r.any_fail() ? r.first_fail_index + 1 : -1;
        rr.wall_s = r.wall_total_s;
        rr.killed_by = r.first_fail_prop;
        controls_clean = controls_clean && !r.any_fail();
        rep.rows.push_back(std::move(rr));
    }
    rep.all_mutants_killed = all_killed;
    rep.controls_clean = controls_clean;
    return rep;
}

std::string MatrixReport::human_table() const {
    std::ostringstream os;
    os << std::left << std::setw(20) << "policy" << std::setw(17) << "group" << std::setw(10)
       << "status" << std::right << std::setw(8) << "tests" << std::setw(10) << "wall(s)"
       << "  killed-by\n";
    for (const auto& r : rows) {
        std::string status = r.control ? (r.killed ? "FAILED" : "CLEAN")
                                       : (r.killed ? "KILLED" : "SURVIVED");
        os << std::left << std::setw(20) << r.row.mutant << std::setw(17) << r.row.group
           << std::setw(10) << status << std::right << std::setw(8)
           << (r.tests_to_kill >= 0 ? std::to_string(r.tests_to_kill)
                                    : std::to_string(r.row.budget))
           << std::setw(10) << std::fixed << std::setprecision(1) << r.wall_s << "  "
           << r.killed_by << "\n";
    }
    return os.str();
}

ReplayResult replay(uint64_t seed, const CampaignConfig& cfg) {
    MicroPolicy pol = parse_policy(cfg.policy);
    MicroPolicy ref = reference_for(pol);
    GenConfig gen = cfg.gen;
    gen.seed = seed;
    ReplayResult out;
    out.tc = generate(gen, ref);
    IrrelevanceBudget budget;
    budget.n_variants = cfg.n_variants;
    budget.fuel = Fuel{cfg.gen.fuel};
    out.verdicts = run_testcase(out.tc, pol, cfg.props, budget, cfg.argreg);
    for (const Verdict& v : out.verdicts)
        if (v.outcome == Outcome::Fail) out.any_fail = true;
    return out;
}

} // namespace stacksafe
