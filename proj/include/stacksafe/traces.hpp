#pragma once

#include <functional>
#include <string>
#include <vector>

#include "stacksafe/secsem.hpp"

namespace stacksafe {

// Everything a run needs besides the evolving state.
struct System {
    const MicroPolicy* policy = nullptr;
    const CodeImage* code = nullptr;
    const AnnotationMap* annot = nullptr;
};

struct Fuel {
    int max_steps = 4000;
};

enum class Terminator : uint8_t { Returned, Fuel, Halted };

const char* terminator_name(Terminator t);

// A finite trace: observable writes with their step indices (silent steps are
// the gaps), a terminator, and for Returned the first state whose context
// depth dropped below the requested bound.
struct Trace {
    std::vector<std::pair<int, uint32_t>> writes;
    int steps = 0;
    Terminator term = Terminator::Fuel;
    bool has_final = false;
    CombinedState final_state;

    std::vector<uint32_t> write_payloads() const;
};

// Optional per-step sink for --dump-traces.
struct TraceSink {
    virtual ~TraceSink() = default;
    virtual void on_step(int index, uint32_t pc, Event e, size_t depth) = 0;
};

// Runs combined steps until the context depth drops below d (Returned), the
// machine halts (Halted), or fuel runs out (Fuel). d = 0 never returns.
// Failstop makes the state a fixpoint, so the silent self-loop is cut short
// and reported as fuel exhaustion over an all-silent tail.
Trace run_to_return(const CombinedState& start, size_t d, const System& sys, Fuel fuel,
                    TraceSink* sink = nullptr);

// Trace similarity: the sequences of non-silent events agree. A trace that
// diverges silently absorbs any continuation of its write prefix, so a
// Halted side only requires its writes to prefix the other side's; a
// fuel-cut side is unknown and compared conservatively by mutual prefix.
bool similar(const Trace& a, const Trace& b);

enum class CheckOutcome : uint8_t { Holds, Violated, Vacuous };

const char* check_outcome_name(CheckOutcome c);

struct CheckResult {
    CheckOutcome outcome = CheckOutcome::Vacuous;
    bool has_witness = false;
    CombinedState witness; // returned state for Violated
};

using StatePredicate = std::function<bool(const MachineState&)>;
using StateRelation = std::function<bool(const CombinedState&, const CombinedState&)>;

// "P holds on return from depth d"; vacuous if the run never returns.
CheckResult on_return(const CombinedState& start, size_t d, const StatePredicate& p,
                      const System& sys, Fuel fuel);

// Binary form: advances each side independently to its own first state below
// depth d and applies R there; vacuous if either side never returns.
CheckResult on_return_pair(const CombinedState& s1, const CombinedState& s2, size_t d,
                           const StateRelation& r, const System& sys, Fuel fuel);

// Text dump: one line per step `STEP PC EVENT DEPTH`, then `END <terminator>`.
std::string dump_trace(const CombinedState& start, size_t d, const System& sys, Fuel fuel);

} // namespace stacksafe
