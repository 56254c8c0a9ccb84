#include "stacksafe/traces.hpp"

#include <sstream>

namespace stacksafe {

const char* terminator_name(Terminator t) {
    switch (t) {
    case Terminator::Returned: return "Returned";
    case Terminator::Fuel: return "Fuel";
    case Terminator::Halted: return "Halted";
    }
    return "?";
}

const char* check_outcome_name(CheckOutcome c) {
    switch (c) {
    case CheckOutcome::Holds: return "Holds";
    case CheckOutcome::Violated: return "Violated";
    case CheckOutcome::Vacuous: return "Vacuous";
    }
    return "?";
}

std::vector<uint32_t> Trace::write_payloads() const {
    std::vector<uint32_t> out;
    out.reserve(writes.size());
    for (auto& [_, w] : writes) out.push_back(w);
    return out;
}

Trace run_to_return(const CombinedState& start, size_t d, const System& sys, Fuel fuel,
                    TraceSink* sink) {
    Trace t;
    CombinedState s = start;
    for (int i = 0; i < fuel.max_steps; ++i) {
        if (s.depth() < d) {
            t.term = Terminator::Returned;
            t.has_final = true;
            t.final_state = std::move(s);
            return t;
        }
        if (s.m.halted()) {
            t.term = Terminator::Halted;
            return t;
        }
        uint32_t pc = s.m.pc();
        CombinedStepOutput out = combined_step(s, *sys.policy, *sys.code, *sys.annot);
        t.steps += 1;
        if (out.event) t.writes.emplace_back(i, *out.event);
        if (sink) sink->on_step(i, pc, out.event, s.depth());
        if (out.failstopped) {
            // Failstop is a fixpoint: the rest of the run is silent. Cut the
            // self-loop short and report it as an all-silent fuel-bounded tail.
            t.term = Terminator::Fuel;
            return t;
        }
    }
    // One more chance to observe a return exactly at the fuel boundary.
    if (s.depth() < d) {
        t.term = Terminator::Returned;
        t.has_final = true;
        t.final_state = std::move(s);
        return t;
    }
    t.term = s.m.halted() ? Terminator::Halted : Terminator::Fuel;
    return t;
}

namespace {

bool write_prefix(const Trace& a, const Trace& b) {
    if (a.writes.size() > b.writes.size()) return false;
    for (size_t i = 0; i < a.writes.size(); ++i)
        if (a.writes[i].second != b.writes[i].second) return false;
    return true;
}

} // namespace

bool similar(const Trace& a, const Trace& b) {
    if (a.term == Terminator::Fuel || b.term == Terminator::Fuel)
        return write_prefix(a, b) || write_prefix(b, a);
    if (a.term == Terminator::Returned && b.term == Terminator::Returned) {
        if (a.writes.size() != b.writes.size()) return false;
        return write_prefix(a, b);
    }
    if (a.term == Terminator::Halted && b.term == Terminator::Halted)
        return write_prefix(a, b) || write_prefix(b, a);
    const Trace& halted = a.term == Terminator::Halted ? a : b;
    const Trace& returned = a.term == Terminator::Halted ? b : a;
    return write_prefix(halted, returned);
}

CheckResult on_return(const CombinedState& start, size_t d, const StatePredicate& p,
                      const System& sys, Fuel fuel) {
    CheckResult res;
    Trace t = run_to_return(start, d, sys, fuel);
    if (t.term != Terminator::Returned) {
        res.outcome = CheckOutcome::Vacuous;
        return res;
    }
    if (p(t.final_state.m)) {
        res.outcome = CheckOutcome::Holds;
    } else {
        res.outcome = CheckOutcome::Violated;
        res.has_witness = true;
        res.witness = std::move(t.final_state);
    }
    return res;
}

CheckResult on_return_pair(const CombinedState& s1, const CombinedState& s2, size_t d,
                           const StateRelation& r, const System& sys, Fuel fuel) {
    CheckResult res;
    Trace t1 = run_to_return(s1, d, sys, fuel);
    if (t1.term != Terminator::Returned) return res; // Left never fires Returned
    Trace t2 = run_to_return(s2, d, sys, fuel);
    if (t2.term != Terminator::Returned) return res;
    if (r(t1.final_state, t2.final_state)) {
        res.outcome = CheckOutcome::Holds;
    } else {
        res.outcome = CheckOutcome::Violated;
        res.has_witness = true;
        res.witness = std::move(t1.final_state);
    }
    return res;
}

namespace {

struct LineSink : TraceSink {
    std::ostringstream os;
    void on_step(int index, uint32_t pc, Event e, size_t depth) override {
        os << index << "  " << pc << "  [" << (e ? "out(" + std::to_string(*e) + ")" : "tau")
           << "]  " << depth << "\n";
    }
};

} // namespace

std::string dump_trace(const CombinedState& start, size_t d, const System& sys, Fuel fuel) {
    LineSink sink;
    Trace t = run_to_return(start, d, sys, fuel, &sink);
    sink.os << "END " << terminator_name(t.term) << "\n";
    return sink.os.str();
}

} // namespace stacksafe
