#include "stacksafe/secsem.hpp"

#include <algorithm>
#include <sstream>

namespace stacksafe {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

const Reg kCallerSaved[] = {Reg::a0, Reg::a1, Reg::a2, Reg::a3,
                            Reg::t0, Reg::t1, Reg::t2, Reg::t3};

} // namespace

const char* security_class_name(SecurityClass c) {
    switch (c) {
    case SecurityClass::Public: return "public";
    case SecurityClass::Active: return "active";
    case SecurityClass::Sealed: return "sealed";
    case SecurityClass::Free: return "free";
    }
    return "?";
}

View::View(const MachineState& ref) {
    classes_.assign(ref.num_elements(), static_cast<uint8_t>(SecurityClass::Public));
}

SecurityClass View::at(const MachineState& ref, const Element& e) const {
    int idx = ref.element_index(e);
    if (idx < 0) fail("view query for a non-element");
    return at(idx);
}

ElementSet View::with_class(SecurityClass c) const {
    ElementSet out(size());
    for (int i = 0; i < size(); ++i)
        if (at(i) == c) out.set(i);
    return out;
}

std::string View::serialize(const MachineState& ref) const {
    std::ostringstream os;
    os << "pc=" << security_class_name(at(0));
    for (int r = 0; r < kNumRegs; ++r)
        os << " " << reg_name(static_cast<Reg>(r)) << "="
           << security_class_name(at(1 + r));
    const Layout& lay = ref.layout();
    os << " stack[";
    int base_idx = 1 + kNumRegs;
    uint32_t run_start = lay.stack.base;
    SecurityClass run_class = at(base_idx);
    for (uint32_t i = 1; i <= lay.stack.words(); ++i) {
        bool flush = i == lay.stack.words() ||
                     at(base_idx + static_cast<int>(i)) != run_class;
        if (flush) {
            uint32_t run_end = lay.stack.base + 4 * i;
            os << " " << run_start << ".." << run_end - 1 << ":"
               << security_class_name(run_class);
            if (i < lay.stack.words()) {
                run_start = run_end;
                run_class = at(base_idx + static_cast<int>(i));
            }
        }
    }
    os << " ]";
    return os.str();
}

SecurityContext initial_context(const MachineState& ref, const std::vector<Reg>& entry_args,
                                bool prov_enabled, ArgRegClass argreg_class) {
    SecurityContext c;
    c.current = View(ref); // everything public...
    c.prov_enabled = prov_enabled;
    c.argreg_class = argreg_class;
    View& v = c.current;
    const Layout& lay = ref.layout();
    for (uint32_t a = lay.stack.base; a < lay.stack.base + lay.stack.size; a += 4)
        v.set(ref.element_index(Element::mem(a)), SecurityClass::Free);
    for (Reg r : kCallerSaved)
        v.set(ref.element_index(Element::reg(r)), SecurityClass::Free);
    for (Reg r : {Reg::s0, Reg::s1, Reg::s2, Reg::s3})
        v.set(ref.element_index(Element::reg(r)), SecurityClass::Sealed);
    for (Reg r : entry_args) {
        if (!is_caller_saved(r)) fail("entry arguments must be caller-saved registers");
        v.set(ref.element_index(Element::reg(r)), SecurityClass::Active);
    }
    return c;
}

// ---------------------------------------------------------------------------
// SecOp constructors / printing
// ---------------------------------------------------------------------------

SecOp SecOp::call(uint32_t target, std::vector<Reg> args, std::vector<StackArg> sa) {
    SecOp op;
    op.kind = Kind::Call;
    op.target = target;
    op.arg_regs = std::move(args);
    op.stack_args = std::move(sa);
    return op;
}

SecOp SecOp::tail_call(uint32_t target, std::vector<Reg> args, std::vector<StackArg> sa) {
    SecOp op = call(target, std::move(args), std::move(sa));
    op.kind = Kind::TailCall;
    return op;
}

SecOp SecOp::ret() {
    SecOp op;
    op.kind = Kind::Return;
    return op;
}

SecOp SecOp::alloc(bool is_public, int32_t off, uint32_t size) {
    SecOp op;
    op.kind = Kind::Alloc;
    op.alloc_public = is_public;
    op.off = off;
    op.size = size;
    return op;
}

SecOp SecOp::dealloc(int32_t off, uint32_t size) {
    SecOp op;
    op.kind = Kind::Dealloc;
    op.off = off;
    op.size = size;
    return op;
}

SecOp SecOp::promote(Reg dst, Reg base, int32_t off, uint32_t size) {
    SecOp op;
    op.kind = Kind::Promote;
    op.prom_dst = dst;
    op.prom_base = base;
    op.off = off;
    op.size = size;
    return op;
}

SecOp SecOp::propagate(Element src, Element dst) {
    SecOp op;
    op.kind = Kind::Propagate;
    op.src = src;
    op.dst = dst;
    return op;
}

SecOp SecOp::clear(Element k) {
    SecOp op;
    op.kind = Kind::Clear;
    op.dst = k;
    return op;
}

namespace {

std::string element_text(const Element& e) {
    if (e.kind == Element::Kind::Register) return reg_name(static_cast<Reg>(e.index));
    if (e.kind == Element::Kind::MemWord) return "[" + std::to_string(e.index) + "]";
    return "pc";
}

} // namespace

std::string SecOp::to_string() const {
    std::ostringstream os;
    switch (kind) {
    case Kind::Call:
    case Kind::TailCall: {
        os << (kind == Kind::Call ? "call(" : "tailcall(") << target << ",[";
        for (size_t i = 0; i < arg_regs.size(); ++i)
            os << (i ? "," : "") << reg_name(arg_regs[i]);
        os << "],[";
        for (size_t i = 0; i < stack_args.size(); ++i) {
            const StackArg& a = stack_args[i];
            os << (i ? "," : "") << "(" << reg_name(a.base) << "," << a.off << "," << a.size << ")";
        }
        os << "])";
        break;
    }
    case Kind::Return:
        os << "return";
        break;
    case Kind::Alloc:
        os << "alloc(" << (alloc_public ? "pub" : "priv") << "," << off << "," << size << ")";
        break;
    case Kind::Dealloc:
        os << "dealloc(" << off << "," << size << ")";
        break;
    case Kind::Promote:
        os << "promote(" << reg_name(prom_dst) << "," << reg_name(prom_base) << "," << off << ","
           << size << ")";
        break;
    case Kind::Propagate:
        os << "propagate(" << element_text(src) << "," << element_text(dst) << ")";
        break;
    case Kind::Clear:
        os << "clear(" << element_text(dst) << ")";
        break;
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// passed / capped
// ---------------------------------------------------------------------------

ElementSet passed_set(const std::vector<StackArg>& stack_args, const MachineState& m) {
    ElementSet out(m.num_elements());
    for (const StackArg& a : stack_args) {
        uint32_t base = m.reg(a.base).payload + static_cast<uint32_t>(a.off);
        for (uint32_t w = base; w < base + a.size; w += 4) {
            if (w % 4 != 0) break; // step keeps alignment, so all or none
            int idx = m.element_index(Element::mem(w));
            if (idx >= 0) out.set(idx);
        }
    }
    return out;
}

ElementSet capped_set(const ElementSet& roots, const SecurityContext& c, const MachineState& ref) {
    ElementSet out = roots;
    bool changed = true;
    while (changed) {
        changed = false;
        for (int idx : out.indices()) {
            auto it = c.prov.find(idx);
            if (it == c.prov.end()) continue;
            const ProvRegion& r = it->second;
            for (uint32_t w = r.base; w < r.bound; w += 4) {
                if (w % 4 != 0) break;
                int widx = ref.element_index(Element::mem(w));
                if (widx >= 0 && !out.test(widx)) {
                    out.set(widx);
                    changed = true;
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// apply_op
// ---------------------------------------------------------------------------

namespace {

void class_range_update(View& v, const MachineState& m, uint32_t base, uint32_t size,
                        SecurityClass from, SecurityClass to) {
    for (uint32_t w = base; w < base + size; w += 4) {
        if (w % 4 != 0) continue;
        if (!m.layout().stack.contains(w) && !m.layout().globals.contains(w)) continue;
        int idx = m.element_index(Element::mem(w));
        if (v.at(idx) == from) v.set(idx, to);
    }
}

SecurityContext apply_call(const MachineState& m, const SecurityContext& c, const SecOp& op) {
    const bool is_tail = op.kind == SecOp::Kind::TailCall;
    SecurityContext out = c;
    View v = c.current;
    for (Reg r : kCallerSaved)
        v.set(m.element_index(Element::reg(r)), SecurityClass::Free);
    SecurityClass arg_class = c.argreg_class == ArgRegClass::Public ? SecurityClass::Public
                                                                    : SecurityClass::Active;
    for (Reg r : op.arg_regs)
        v.set(m.element_index(Element::reg(r)), arg_class);

    ElementSet excluded = passed_set(op.stack_args, m);
    if (c.prov_enabled) {
        ElementSet roots(m.num_elements());
        for (Reg r : op.arg_regs) roots.set(m.element_index(Element::reg(r)));
        excluded |= capped_set(roots, c, m);
    }

    const Layout& lay = m.layout();
    SecurityClass to = is_tail ? SecurityClass::Free : SecurityClass::Sealed;
    for (uint32_t a = lay.stack.base; a < lay.stack.base + lay.stack.size; a += 4) {
        int idx = m.element_index(Element::mem(a));
        if (v.at(idx) == SecurityClass::Active && !excluded.test(idx)) v.set(idx, to);
    }

    if (!is_tail) out.pending.push_back(PendingFrame{c.current, m.pc() + 4, m.reg(Reg::sp).payload});
    out.current = std::move(v);
    return out;
}

} // namespace

SecurityContext apply_op(const MachineState& m, const SecurityContext& c, const SecOp& op) {
    switch (op.kind) {
    case SecOp::Kind::Alloc: {
        SecurityContext out = c;
        uint32_t base = m.reg(Reg::sp).payload + static_cast<uint32_t>(op.off);
        class_range_update(out.current, m, base, op.size, SecurityClass::Free,
                           op.alloc_public ? SecurityClass::Public : SecurityClass::Active);
        return out;
    }
    case SecOp::Kind::Dealloc: {
        SecurityContext out = c;
        uint32_t base = m.reg(Reg::sp).payload + static_cast<uint32_t>(op.off);
        class_range_update(out.current, m, base, op.size, SecurityClass::Active,
                           SecurityClass::Free);
        return out;
    }
    case SecOp::Kind::Call:
    case SecOp::Kind::TailCall:
        return apply_call(m, c, op);
    case SecOp::Kind::Return: {
        if (c.pending.empty()) throw ContextError("return with an empty pending stack");
        SecurityContext out = c;
        out.current = out.pending.back().view;
        out.pending.pop_back();
        return out;
    }
    case SecOp::Kind::Promote: {
        if (!c.prov_enabled) throw ConfigError("provenance operation with provenance disabled");
        SecurityContext out = c;
        uint32_t base = m.reg(op.prom_base).payload + static_cast<uint32_t>(op.off);
        out.prov[m.element_index(Element::reg(op.prom_dst))] = ProvRegion{base, base + op.size};
        return out;
    }
    case SecOp::Kind::Propagate: {
        if (!c.prov_enabled) throw ConfigError("provenance operation with provenance disabled");
        SecurityContext out = c;
        int src = m.element_index(op.src);
        int dst = m.element_index(op.dst);
        if (src < 0 || dst < 0) throw ContextError("propagate over a non-element");
        auto it = out.prov.find(src);
        if (it == out.prov.end())
            out.prov.erase(dst);
        else
            out.prov[dst] = it->second;
        return out;
    }
    case SecOp::Kind::Clear: {
        if (!c.prov_enabled) throw ConfigError("provenance operation with provenance disabled");
        SecurityContext out = c;
        int k = m.element_index(op.dst);
        if (k < 0) throw ContextError("clear over a non-element");
        out.prov.erase(k);
        return out;
    }
    }
    fail("unreachable");
}

// ---------------------------------------------------------------------------
// Annotations
// ---------------------------------------------------------------------------

const std::vector<SecOp> AnnotationMap::kEmpty;

void AnnotationMap::add(uint32_t addr, SecOp op) {
    if (addr % 4 != 0 || !region_.contains(addr))
        fail("annotation outside the code region at " + std::to_string(addr));
    ops_[(addr - region_.base) / 4].push_back(std::move(op));
}

void AnnotationMap::clear_at(uint32_t addr) {
    if (region_.contains(addr)) ops_[(addr - region_.base) / 4].clear();
}

const std::vector<SecOp>& AnnotationMap::at(uint32_t addr) const {
    if (addr % 4 != 0 || !region_.contains(addr)) return kEmpty;
    return ops_[(addr - region_.base) / 4];
}

std::vector<uint32_t> AnnotationMap::annotated_addresses() const {
    std::vector<uint32_t> out;
    for (size_t i = 0; i < ops_.size(); ++i)
        if (!ops_[i].empty()) out.push_back(region_.base + 4 * static_cast<uint32_t>(i));
    return out;
}

void AnnotationMap::cross_check(const CodeImage& code) const {
    for (uint32_t addr : annotated_addresses()) {
        if (!code.has(addr))
            fail("annotation at " + std::to_string(addr) + " references no instruction");
    }
}

namespace {

std::string trim_ws(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

// Splits "a,b,(c,d),[e,f]" at top-level commas.
std::vector<std::string> split_args(const std::string& s) {
    std::vector<std::string> out;
    int depth = 0;
    std::string cur;
    for (char ch : s) {
        if (ch == '(' || ch == '[') depth++;
        if (ch == ')' || ch == ']') depth--;
        if (ch == ',' && depth == 0) {
            out.push_back(trim_ws(cur));
            cur.clear();
        } else {
            cur += ch;
        }
    }
    cur = trim_ws(cur);
    if (!cur.empty()) out.push_back(cur);
    return out;
}

Reg parse_reg_text(const std::string& s, int line_no) {
    auto r = reg_from_name(s);
    if (!r) fail("annotation line " + std::to_string(line_no) + ": unknown register '" + s + "'");
    return *r;
}

int64_t parse_int_text(const std::string& s, int line_no) {
    try {
        size_t pos = 0;
        long long v = std::stoll(s, &pos, 0);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (...) {
        fail("annotation line " + std::to_string(line_no) + ": bad integer '" + s + "'");
    }
}

Element parse_element_text(const std::string& s, int line_no) {
    if (!s.empty() && s.front() == '[' && s.back() == ']')
        return Element::mem(static_cast<uint32_t>(parse_int_text(s.substr(1, s.size() - 2), line_no)));
    if (s == "pc") return Element::pc();
    return Element::reg(parse_reg_text(s, line_no));
}

} // namespace

AnnotationMap parse_annotations(const std::string& text, Region code_region) {
    AnnotationMap out(code_region);
    std::istringstream in(text);
    std::string raw;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string line = raw;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim_ws(line);
        if (line.empty()) continue;

        size_t colon = line.find(':');
        if (colon == std::string::npos)
            fail("annotation line " + std::to_string(line_no) + ": expected 'ADDR: op(...)'");
        uint32_t addr = static_cast<uint32_t>(parse_int_text(trim_ws(line.substr(0, colon)), line_no));
        std::string body = trim_ws(line.substr(colon + 1));

        size_t lp = body.find('(');
        std::string name = lp == std::string::npos ? body : trim_ws(body.substr(0, lp));
        std::string argstr;
        if (lp != std::string::npos) {
            size_t rp = body.rfind(')');
            if (rp == std::string::npos || rp < lp)
                fail("annotation line " + std::to_string(line_no) + ": unbalanced parentheses");
            argstr = body.substr(lp + 1, rp - lp - 1);
        }
        auto args = split_args(argstr);

        auto want = [&](size_t n) {
            if (args.size() != n)
                fail("annotation line " + std::to_string(line_no) + ": " + name + " expects " +
                     std::to_string(n) + " arguments");
        };

        if (name == "return") {
            out.add(addr, SecOp::ret());
        } else if (name == "alloc") {
            want(3);
            bool pub;
            if (args[0] == "pub") pub = true;
            else if (args[0] == "priv") pub = false;
            else fail("annotation line " + std::to_string(line_no) + ": alloc flag must be pub|priv");
            out.add(addr, SecOp::alloc(pub, static_cast<int32_t>(parse_int_text(args[1], line_no)),
                                       static_cast<uint32_t>(parse_int_text(args[2], line_no))));
        } else if (name == "dealloc") {
            want(2);
            out.add(addr, SecOp::dealloc(static_cast<int32_t>(parse_int_text(args[0], line_no)),
                                         static_cast<uint32_t>(parse_int_text(args[1], line_no))));
        } else if (name == "call" || name == "tailcall") {
            want(3);
            uint32_t target = static_cast<uint32_t>(parse_int_text(args[0], line_no));
            std::string regs_body = args[1];
            if (regs_body.size() < 2 || regs_body.front() != '[' || regs_body.back() != ']')
                fail("annotation line " + std::to_string(line_no) + ": expected [regs]");
            std::vector<Reg> regs;
            for (const auto& rn : split_args(regs_body.substr(1, regs_body.size() - 2)))
                regs.push_back(parse_reg_text(rn, line_no));
            std::string sa_body = args[2];
            if (sa_body.size() < 2 || sa_body.front() != '[' || sa_body.back() != ']')
                fail("annotation line " + std::to_string(line_no) + ": expected [(reg,off,sz)...]");
            std::vector<StackArg> sas;
            for (const auto& t : split_args(sa_body.substr(1, sa_body.size() - 2))) {
                if (t.size() < 2 || t.front() != '(' || t.back() != ')')
                    fail("annotation line " + std::to_string(line_no) + ": expected (reg,off,sz)");
                auto parts = split_args(t.substr(1, t.size() - 2));
                if (parts.size() != 3)
                    fail("annotation line " + std::to_string(line_no) + ": expected (reg,off,sz)");
                sas.push_back(StackArg{parse_reg_text(parts[0], line_no),
                                       static_cast<int32_t>(parse_int_text(parts[1], line_no)),
                                       static_cast<uint32_t>(parse_int_text(parts[2], line_no))});
            }
            out.add(addr, name == "call" ? SecOp::call(target, std::move(regs), std::move(sas))
                                         : SecOp::tail_call(target, std::move(regs), std::move(sas)));
        } else if (name == "promote") {
            want(4);
            out.add(addr, SecOp::promote(parse_reg_text(args[0], line_no),
                                         parse_reg_text(args[1], line_no),
                                         static_cast<int32_t>(parse_int_text(args[2], line_no)),
                                         static_cast<uint32_t>(parse_int_text(args[3], line_no))));
        } else if (name == "propagate") {
            want(2);
            out.add(addr, SecOp::propagate(parse_element_text(args[0], line_no),
                                           parse_element_text(args[1], line_no)));
        } else if (name == "clear") {
            want(1);
            out.add(addr, SecOp::clear(parse_element_text(args[0], line_no)));
        } else {
            fail("annotation line " + std::to_string(line_no) + ": unknown op '" + name + "'");
        }
    }
    return out;
}

std::string write_annotations(const AnnotationMap& a) {
    std::ostringstream os;
    for (uint32_t addr : a.annotated_addresses()) {
        for (const SecOp& op : a.at(addr)) os << addr << ": " << op.to_string() << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// combined_step
// ---------------------------------------------------------------------------

CombinedStepOutput combined_step(CombinedState& s, const MicroPolicy& pol, const CodeImage& code,
                                 const AnnotationMap& annot) {
    CombinedStepOutput out;
    static const std::vector<SecOp> empty;
    out.ops = &empty;
    if (s.m.halted()) return out;

    const std::vector<SecOp>& ops = annot.at(s.m.pc());
    if (ops.empty()) {
        GuardedStepResult g = guarded_step(s.m, s.ps, pol, code);
        out.event = g.event;
        out.failstopped = g.failstopped;
        return out;
    }

    // Operations read the pre-step machine state; registers and pc are all
    // they may consult, but starting from a full copy keeps apply_op total.
    MachineState pre = s.m;
    GuardedStepResult g = guarded_step(s.m, s.ps, pol, code);
    out.event = g.event;
    out.failstopped = g.failstopped;
    if (g.failstopped) return out;

    for (const SecOp& op : ops) s.ctx = apply_op(pre, s.ctx, op);
    out.ops = &ops;
    return out;
}

} // namespace stacksafe
