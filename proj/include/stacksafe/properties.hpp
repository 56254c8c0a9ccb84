#pragma once

#include <string>
#include <vector>

#include "stacksafe/rng.hpp"
#include "stacksafe/traces.hpp"

namespace stacksafe {

enum class PropId : uint8_t { WBCF, ClrI, ClrC, CleC, CleI };

const char* prop_name(PropId p); // wbcf clri clrc clec clei
std::optional<PropId> prop_from_name(const std::string& name);
std::vector<PropId> all_props();

// A call or tail-call target discovered while replaying a test case.
struct CallSite {
    CombinedState pre;  // state before the call step
    CombinedState post; // the call target
    bool tail = false;
    size_t d = 0; // context depth at the target
    int step_index = 0;
    uint32_t call_pc = 0;
    uint32_t call_sp = 0;
};

// Replays from the initial state and records every call target reached
// within the fuel bound. Failstopped steps apply no operations, so they
// cannot open call sites.
std::vector<CallSite> collect_call_sites(const CombinedState& initial, const System& sys,
                                         Fuel fuel);

// Sampling budget for the irrelevance approximation. Exhaustive mode
// enumerates every assignment of `domain` payloads over the set instead of
// sampling; it is meant for tiny element sets and small domains.
struct IrrelevanceBudget {
    int n_variants = 5;
    Fuel fuel;
    bool exhaustive = false;
    std::vector<uint32_t> domain = {0, 1};
};

// Machine varied over K, enforcement state and context copied unchanged.
CombinedState spawn_variant(const CombinedState& s, const ElementSet& k, Rng& rng);

// (m, c) || K: every sampled K-variant of the state produces a similar
// unbounded trace. The pc and zero register are never varied.
bool irrelevant(const CombinedState& s, const ElementSet& k, const IrrelevanceBudget& budget,
                Rng rng, const System& sys);

// Corrupted set of two executions m -> m_fin and n -> n_fin: elements that
// changed in at least one execution and disagree at the endpoints.
ElementSet corrupted_set(const MachineState& m, const MachineState& m_fin, const MachineState& n,
                         const MachineState& n_fin);

enum class Outcome : uint8_t { Pass, Fail, Vacuous };

const char* outcome_name(Outcome o);

struct Verdict {
    PropId id = PropId::WBCF;
    Outcome outcome = Outcome::Vacuous;
    int fail_site = -1;
    int clause = 0; // confidentiality clause: 1 = internal (a), 2 = return-time (b)
    uint64_t witness_seed = 0;
    std::string detail;
    std::vector<uint32_t> trace_m; // divergent write sequences for clause-a failures
    std::vector<uint32_t> trace_n;
    std::vector<std::string> offending; // offending elements for irrelevance failures
    int sites = 0;
    int vacuous_sites = 0;

    std::string report_line() const; // PROP <id> <PASS|FAIL|VACUOUS> site=<n> seed=<hex>
};

// Table checkers. WBCF and caller integrity run at call sites only; the
// confidentiality checkers and callee integrity also cover tail calls.
Verdict check_wbcf(const std::vector<CallSite>& sites, const System& sys, Fuel fuel);
Verdict check_clr_integrity(const std::vector<CallSite>& sites, const System& sys,
                            const IrrelevanceBudget& budget, Rng rng);
Verdict check_clr_confidentiality(const std::vector<CallSite>& sites, const System& sys,
                                  const IrrelevanceBudget& budget, Rng rng);
Verdict check_cle_confidentiality(const std::vector<CallSite>& sites, const System& sys,
                                  const IrrelevanceBudget& budget, Rng rng);
Verdict check_cle_integrity(const std::vector<CallSite>& sites, const System& sys,
                            const IrrelevanceBudget& budget, Rng rng);

// Collects sites once and runs the selected checkers with per-property
// derived streams, so checks are order-independent and replayable.
std::vector<Verdict> check_run(const CombinedState& initial, const System& sys,
                               const std::vector<PropId>& props, const IrrelevanceBudget& budget,
                               Rng rng);

// Rebuilds the failing site (and, for internal-confidentiality failures, the
// recorded variant) and renders the trace pair in the dump format.
std::string dump_failure_traces(const CombinedState& initial, const System& sys, const Verdict& v,
                                const IrrelevanceBudget& budget);

} // namespace stacksafe
