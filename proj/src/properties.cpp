#include "stacksafe/properties.hpp"

#include <algorithm>
#include <sstream>

namespace stacksafe {

const char* prop_name(PropId p) {
    switch (p) {
    case PropId::WBCF: return "wbcf";
    case PropId::ClrI: return "clri";
    case PropId::ClrC: return "clrc";
    case PropId::CleC: return "clec";
    case PropId::CleI: return "clei";
    }
    return "?";
}

std::optional<PropId> prop_from_name(const std::string& name) {
    for (PropId p : all_props())
        if (name == prop_name(p)) return p;
    return std::nullopt;
}

std::vector<PropId> all_props() {
    return {PropId::WBCF, PropId::ClrI, PropId::ClrC, PropId::CleC, PropId::CleI};
}

const char* outcome_name(Outcome o) {
    switch (o) {
    case Outcome::Pass: return "PASS";
    case Outcome::Fail: return "FAIL";
    case Outcome::Vacuous: return "VACUOUS";
    }
    return "?";
}

std::string Verdict::report_line() const {
    std::ostringstream os;
    os << "PROP " << prop_name(id) << " " << outcome_name(outcome) << " site=" << fail_site
       << " seed=" << std::hex << witness_seed << std::dec;
    if (clause) os << " clause=" << (clause == 1 ? "a" : "b");
    if (!detail.empty()) os << " " << detail;
    return os.str();
}

std::vector<CallSite> collect_call_sites(const CombinedState& initial, const System& sys,
                                         Fuel fuel) {
    std::vector<CallSite> sites;
    CombinedState s = initial;
    for (int i = 0; i < fuel.max_steps && !s.m.halted(); ++i) {
        CombinedState pre = s;
        CombinedStepOutput out = combined_step(s, *sys.policy, *sys.code, *sys.annot);
        if (out.failstopped) break; // permanent silent divergence
        for (const SecOp& op : *out.ops) {
            if (!op.is_call_target()) continue;
            CallSite site;
            site.pre = pre;
            site.post = s;
            site.tail = op.kind == SecOp::Kind::TailCall;
            site.d = s.depth();
            site.step_index = i;
            site.call_pc = pre.m.pc();
            site.call_sp = pre.m.reg(Reg::sp).payload;
            sites.push_back(std::move(site));
        }
    }
    return sites;
}

CombinedState spawn_variant(const CombinedState& s, const ElementSet& k, Rng& rng) {
    CombinedState out;
    out.m = k_variant(s.m, k, rng);
    out.ps = s.ps;
    out.ctx = s.ctx;
    return out;
}

namespace {

// The pc and the zero register are never varied: the pc would break the
// "same continuation" premise, and zero is architecturally pinned.
ElementSet variable_part(ElementSet k, const MachineState& ref) {
    k.reset(ref.element_index(Element::pc()));
    k.reset(ref.element_index(Element::reg(Reg::zero)));
    return k;
}

bool exhaustive_irrelevant(const CombinedState& s, const std::vector<int>& idxs,
                           const IrrelevanceBudget& budget, const Trace& base,
                           const System& sys) {
    size_t n = idxs.size();
    if (n > 20) throw ConfigError("exhaustive irrelevance over more than 20 elements");
    uint64_t combos = 1;
    for (size_t i = 0; i < n; ++i) combos *= budget.domain.size();
    for (uint64_t c = 0; c < combos; ++c) {
        CombinedState v = s;
        uint64_t rest = c;
        for (size_t i = 0; i < n; ++i) {
            uint32_t payload = budget.domain[rest % budget.domain.size()];
            rest /= budget.domain.size();
            Element e = s.m.element_at(idxs[i]);
            if (e.kind == Element::Kind::Register)
                v.m.set_reg(static_cast<Reg>(e.index), payload);
            else if (e.kind == Element::Kind::MemWord)
                v.m.set_mem(e.index, payload);
        }
        Trace t = run_to_return(v, 0, sys, budget.fuel);
        if (!similar(base, t)) return false;
    }
    return true;
}

} // namespace

bool irrelevant(const CombinedState& s, const ElementSet& k, const IrrelevanceBudget& budget,
                Rng rng, const System& sys) {
    ElementSet vk = variable_part(k, s.m);
    if (vk.empty()) return true;
    Trace base = run_to_return(s, 0, sys, budget.fuel);
    if (budget.exhaustive) return exhaustive_irrelevant(s, vk.indices(), budget, base, sys);
    for (int i = 0; i < budget.n_variants; ++i) {
        Rng vr = rng.derive(i);
        CombinedState v = spawn_variant(s, vk, vr);
        Trace t = run_to_return(v, 0, sys, budget.fuel);
        if (!similar(base, t)) return false;
    }
    return true;
}

ElementSet corrupted_set(const MachineState& m, const MachineState& m_fin, const MachineState& n,
                         const MachineState& n_fin) {
    ElementSet changed = diff_set(m, m_fin);
    changed |= diff_set(n, n_fin);
    changed &= diff_set(m_fin, n_fin);
    return changed;
}

// ---------------------------------------------------------------------------
// Checkers
// ---------------------------------------------------------------------------

namespace {

struct SiteTally {
    int sites = 0;
    int vacuous = 0;
    bool any_holds = false;
};

void finish(Verdict& v, const SiteTally& t) {
    if (v.outcome == Outcome::Fail) {
        v.sites = t.sites;
        v.vacuous_sites = t.vacuous;
        return;
    }
    v.sites = t.sites;
    v.vacuous_sites = t.vacuous;
    v.outcome = t.any_holds ? Outcome::Pass : Outcome::Vacuous;
}

std::vector<std::string> element_names(const ElementSet& set, const MachineState& ref) {
    std::vector<std::string> out;
    for (const Element& e : set.elements(ref)) out.push_back(e.to_string());
    return out;
}

} // namespace

Verdict check_wbcf(const std::vector<CallSite>& sites, const System& sys, Fuel fuel) {
    Verdict v;
    v.id = PropId::WBCF;
    SiteTally tally;
    for (size_t i = 0; i < sites.size(); ++i) {
        const CallSite& site = sites[i];
        if (site.tail) continue; // the eventual return answers for the whole chain
        tally.sites++;
        uint32_t want_pc = site.call_pc + 4;
        uint32_t want_sp = site.call_sp;
        CheckResult r = on_return(
            site.post, site.d,
            [&](const MachineState& m) {
                return m.pc() == want_pc && m.reg(Reg::sp).payload == want_sp;
            },
            sys, fuel);
        if (r.outcome == CheckOutcome::Violated) {
            v.outcome = Outcome::Fail;
            v.fail_site = static_cast<int>(i);
            std::ostringstream d;
            d << "returned pc=" << r.witness.m.pc() << " sp=" << r.witness.m.reg(Reg::sp).payload
              << " expected pc=" << want_pc << " sp=" << want_sp;
            v.detail = d.str();
            finish(v, tally);
            return v;
        }
        if (r.outcome == CheckOutcome::Vacuous) tally.vacuous++;
        else tally.any_holds = true;
    }
    finish(v, tally);
    return v;
}

Verdict check_clr_integrity(const std::vector<CallSite>& sites, const System& sys,
                            const IrrelevanceBudget& budget, Rng rng) {
    Verdict v;
    v.id = PropId::ClrI;
    SiteTally tally;
    for (size_t i = 0; i < sites.size(); ++i) {
        const CallSite& site = sites[i];
        if (site.tail) continue;
        tally.sites++;
        Rng site_rng = rng.derive(i);
        Trace t = run_to_return(site.post, site.d, sys, budget.fuel);
        if (t.term != Terminator::Returned) {
            tally.vacuous++;
            continue;
        }
        ElementSet k = site.post.ctx.current.with_class(SecurityClass::Sealed);
        k &= diff_set(site.post.m, t.final_state.m);
        if (!irrelevant(t.final_state, k, budget, site_rng, sys)) {
            v.outcome = Outcome::Fail;
            v.fail_site = static_cast<int>(i);
            v.witness_seed = site_rng.state();
            v.offending = element_names(k, site.post.m);
            v.detail = "sealed elements changed and relevant after return";
            finish(v, tally);
            return v;
        }
        tally.any_holds = true;
    }
    finish(v, tally);
    return v;
}

namespace {

// Shared shape of the two variant-quantified properties: caller
// confidentiality varies the sealed set, callee integrity varies everything
// outside the call interface. Clause a compares traces up to the matching
// return, clause b checks the corrupted set at the pair of return states.
Verdict check_variant_property(PropId id, bool include_tails, bool vary_sealed_only,
                               const std::vector<CallSite>& sites, const System& sys,
                               const IrrelevanceBudget& budget, Rng rng) {
    Verdict v;
    v.id = id;
    SiteTally tally;
    for (size_t i = 0; i < sites.size(); ++i) {
        const CallSite& site = sites[i];
        if (site.tail && !include_tails) continue;
        tally.sites++;
        Rng site_rng = rng.derive(i);

        ElementSet k(site.post.m.num_elements());
        if (vary_sealed_only) {
            k = site.post.ctx.current.with_class(SecurityClass::Sealed);
        } else {
            k |= site.post.ctx.current.with_class(SecurityClass::Sealed);
            k |= site.post.ctx.current.with_class(SecurityClass::Free);
        }

        Trace t_m = run_to_return(site.post, site.d, sys, budget.fuel);
        bool site_holds = false;
        for (int vi = 0; vi < budget.n_variants; ++vi) {
            Rng vr = site_rng.derive(vi);
            Rng spawn_rng = vr;
            CombinedState n = spawn_variant(site.post, variable_part(k, site.post.m), spawn_rng);
            Trace t_n = run_to_return(n, site.d, sys, budget.fuel);
            if (!similar(t_m, t_n)) {
                v.outcome = Outcome::Fail;
                v.fail_site = static_cast<int>(i);
                v.clause = 1;
                v.witness_seed = vr.state();
                v.trace_m = t_m.write_payloads();
                v.trace_n = t_n.write_payloads();
                v.detail = "variant trace diverges before return";
                finish(v, tally);
                return v;
            }
            if (t_m.term == Terminator::Returned && t_n.term == Terminator::Returned) {
                ElementSet corr = corrupted_set(site.post.m, t_m.final_state.m, n.m,
                                                t_n.final_state.m);
                if (!irrelevant(t_m.final_state, corr, budget, vr.derive(0x5eed), sys)) {
                    v.outcome = Outcome::Fail;
                    v.fail_site = static_cast<int>(i);
                    v.clause = 2;
                    v.witness_seed = vr.state();
                    v.offending = element_names(corr, site.post.m);
                    v.detail = "corrupted set relevant at return";
                    finish(v, tally);
                    return v;
                }
                site_holds = true;
            }
        }
        if (site_holds) tally.any_holds = true;
        else tally.vacuous++;
    }
    finish(v, tally);
    return v;
}

} // namespace

Verdict check_clr_confidentiality(const std::vector<CallSite>& sites, const System& sys,
                                  const IrrelevanceBudget& budget, Rng rng) {
    return check_variant_property(PropId::ClrC, true, true, sites, sys, budget, rng);
}

Verdict check_cle_integrity(const std::vector<CallSite>& sites, const System& sys,
                            const IrrelevanceBudget& budget, Rng rng) {
    return check_variant_property(PropId::CleI, true, false, sites, sys, budget, rng);
}

Verdict check_cle_confidentiality(const std::vector<CallSite>& sites, const System& sys,
                                  const IrrelevanceBudget& budget, Rng rng) {
    Verdict v;
    v.id = PropId::CleC;
    SiteTally tally;
    for (size_t i = 0; i < sites.size(); ++i) {
        const CallSite& site = sites[i];
        tally.sites++;
        Rng site_rng = rng.derive(i);
        Trace t = run_to_return(site.post, site.d, sys, budget.fuel);
        if (t.term != Terminator::Returned) {
            tally.vacuous++;
            continue;
        }
        ElementSet k = diff_set(site.post.m, t.final_state.m);
        k -= site.post.ctx.current.with_class(SecurityClass::Public);
        k -= site.post.ctx.current.with_class(SecurityClass::Active);
        if (!irrelevant(t.final_state, k, budget, site_rng, sys)) {
            v.outcome = Outcome::Fail;
            v.fail_site = static_cast<int>(i);
            v.witness_seed = site_rng.state();
            v.offending = element_names(k, site.post.m);
            v.detail = "callee effects outside the interface are relevant";
            finish(v, tally);
            return v;
        }
        tally.any_holds = true;
    }
    finish(v, tally);
    return v;
}

std::string dump_failure_traces(const CombinedState& initial, const System& sys, const Verdict& v,
                                const IrrelevanceBudget& budget) {
    std::vector<CallSite> sites = collect_call_sites(initial, sys, budget.fuel);
    if (v.fail_site < 0 || v.fail_site >= static_cast<int>(sites.size()))
        return "TRACE site unavailable\n";
    const CallSite& site = sites[v.fail_site];
    std::ostringstream os;
    os << "TRACE m-side site=" << v.fail_site << "\n"
       << dump_trace(site.post, site.d, sys, budget.fuel);
    if (v.clause == 1) {
        ElementSet k = site.post.ctx.current.with_class(SecurityClass::Sealed);
        if (v.id == PropId::CleI) k |= site.post.ctx.current.with_class(SecurityClass::Free);
        k.reset(site.post.m.element_index(Element::pc()));
        k.reset(site.post.m.element_index(Element::reg(Reg::zero)));
        Rng vr(v.witness_seed);
        CombinedState n = spawn_variant(site.post, k, vr);
        os << "TRACE n-side site=" << v.fail_site << "\n"
           << dump_trace(n, site.d, sys, budget.fuel);
    }
    return os.str();
}

std::vector<Verdict> check_run(const CombinedState& initial, const System& sys,
                               const std::vector<PropId>& props, const IrrelevanceBudget& budget,
                               Rng rng) {
    std::vector<CallSite> sites = collect_call_sites(initial, sys, budget.fuel);
    std::vector<Verdict> out;
    for (PropId p : props) {
        Rng prop_rng = rng.derive(0x100 + static_cast<uint64_t>(p));
        switch (p) {
        case PropId::WBCF: out.push_back(check_wbcf(sites, sys, budget.fuel)); break;
        case PropId::ClrI: out.push_back(check_clr_integrity(sites, sys, budget, prop_rng)); break;
        case PropId::ClrC:
            out.push_back(check_clr_confidentiality(sites, sys, budget, prop_rng));
            break;
        case PropId::CleC:
            out.push_back(check_cle_confidentiality(sites, sys, budget, prop_rng));
            break;
        case PropId::CleI: out.push_back(check_cle_integrity(sites, sys, budget, prop_rng)); break;
        }
    }
    return out;
}

} // namespace stacksafe
