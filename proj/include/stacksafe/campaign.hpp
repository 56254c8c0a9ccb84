#pragma once

#include <map>
#include <string>
#include <vector>

#include "stacksafe/generator.hpp"

namespace stacksafe {

struct CampaignConfig {
    std::string policy = "di+regs";
    std::vector<PropId> props = all_props();
    GenConfig gen;
    int tests = 1000;
    double time_budget_s = 0.0; // 0 = unlimited
    int jobs = 1;
    bool soak = false;       // keep going past the first failure
    bool do_shrink = false;  // minimize the first failing case
    int n_variants = 5;
    ArgRegClass argreg = ArgRegClass::Public;
    std::string emit_dir;    // write failing case assembly/annotations here
    bool dump_traces = false;

    void validate() const;
};

struct PropCount {
    long pass = 0;
    long fail = 0;
    long vacuous = 0;
};

struct CampaignReport {
    std::string policy;
    uint64_t root_seed = 0;
    int tests_run = 0;
    std::map<std::string, PropCount> counts; // keyed by property name
    int first_fail_index = -1;
    std::string first_fail_prop;
    uint64_t first_fail_seed = 0;
    double wall_to_first_fail_s = -1.0;
    double wall_total_s = 0.0;
    long total_sites = 0;
    long vacuous_sites = 0;
    bool vacuity_flagged = false; // > 50% vacuous call sites
    std::vector<std::string> fail_lines;
    std::string shrunk_assembly; // populated when shrinking ran

    bool any_fail() const { return first_fail_index >= 0; }
    std::string human_table() const;
    std::string machine_lines() const;
    std::string to_json() const;
};

// Generate-execute-check loop. Stops at the first failure unless soaking.
// Parallel runs split the root seed per test index, so the first failure is
// the minimum failing index and matches a serial run.
CampaignReport run_campaign(const CampaignConfig& cfg);

// One Table row of the mutation matrix.
struct MatrixRow {
    std::string mutant;
    std::string group; // Integrity | Confidentiality
    std::vector<PropId> props;
    int budget = 0; // tests allowed before the mutant counts as surviving
};

std::vector<MatrixRow> mutation_matrix_rows();

struct MatrixRowResult {
    MatrixRow row;
    bool control = false;
    bool killed = false;
    int tests_to_kill = -1;
    double wall_s = 0.0;
    std::string killed_by;
};

struct MatrixReport {
    std::vector<MatrixRowResult> rows;
    bool all_mutants_killed = false;
    bool controls_clean = false;

    std::string human_table() const;
};

// Runs every (mutant, violated-property-group) pair plus the two correct
// policies as negative controls. budget_override > 0 caps every row.
MatrixReport run_mutation_matrix(const CampaignConfig& base, int budget_override = 0,
                                 int control_budget = 200);

// Regenerates the test for a seed and reruns the checkers; deterministic at
// parallelism 1 by construction.
struct ReplayResult {
    std::vector<Verdict> verdicts;
    TestCase tc;
    bool any_fail = false;
};

ReplayResult replay(uint64_t seed, const CampaignConfig& cfg);

// Exit-code contract shared by the CLI.
inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitPropertyFail = 3;
inline constexpr int kExitMutantSurvived = 4;

} // namespace stacksafe
