#pragma once

#include <string>
#include <vector>

#include "stacksafe/properties.hpp"

namespace stacksafe {

struct GenConfig {
    int max_functions = 5;
    int max_frame_words = 6; // private locals per frame, before ra and argument slots
    int call_depth_cap = 4;
    double p_call = 0.15;
    double p_tailcall = 0.03;
    double p_store = 0.25;
    double p_load = 0.25;
    double p_misbehave = 0.05;
    double p_public_alloc = 0.2;
    double p_init_after_call = 0.8;
    int fuel = 4000;
    uint64_t seed = 0;

    void validate() const; // throws ConfigError
};

// A generated test: program, operation annotations, initial machine state.
// Policy tags and the security context are instantiated per selected policy
// when the case is run.
struct TestCase {
    Layout layout;
    CodeImage code;
    AnnotationMap annot;
    MachineState initial;
    std::vector<Reg> entry_args;
    uint64_t seed = 0;
    std::vector<std::string> misbehavior_log; // shape names, for triage

    std::string assembly_text() const;
    std::string annotation_text() const;
};

// Builds the program by executing it as it is generated: each new
// instruction is chosen so that the reference (correct) policy would allow
// it, except that with probability p_misbehave a potentially violating
// instruction from the attack catalog is emitted instead.
TestCase generate(const GenConfig& cfg, const MicroPolicy& reference_policy);

// Convenience: reference policy derived from the campaign policy (mutants
// use the correct version of their base).
TestCase generate(const GenConfig& cfg);

// Assembles the combined start state for a test under a policy.
CombinedState make_initial_state(const TestCase& tc, const MicroPolicy& pol,
                                 ArgRegClass argreg = ArgRegClass::Public,
                                 bool prov_enabled = false);

// Counts used by the coverage-floor checks.
struct TestCaseStats {
    int calls = 0;
    int tail_calls = 0;
    int stack_arg_calls = 0;
    int public_allocs = 0;
    int misbehaviors = 0;
};
TestCaseStats scan_testcase(const TestCase& tc);

// Greedy minimization: truncate the tail, blank single instructions, and
// re-replay after each edit; keeps the smallest case that still fails the
// same property under the same policy and budget.
TestCase shrink(const TestCase& tc, PropId failing, const MicroPolicy& pol,
                const IrrelevanceBudget& budget, ArgRegClass argreg = ArgRegClass::Public);

// Replays a test case and reports verdicts for the chosen properties.
std::vector<Verdict> run_testcase(const TestCase& tc, const MicroPolicy& pol,
                                  const std::vector<PropId>& props,
                                  const IrrelevanceBudget& budget,
                                  ArgRegClass argreg = ArgRegClass::Public);

} // namespace stacksafe
