#include "stacksafe/policy.hpp"

#include <algorithm>

namespace stacksafe {

namespace {

// Color 0 marks shared stack words: public allocations and argument windows.
// They are readable by every activation and immutable until reclaimed.
constexpr uint32_t kSharedColor = 0;

bool reads_reg(const Instruction& ins, Reg r) {
    switch (ins.op) {
    case Opcode::ADD: case Opcode::SUB: case Opcode::AND: case Opcode::OR: case Opcode::XOR:
    case Opcode::BEQ: case Opcode::BNE:
        return ins.rs1 == r || ins.rs2 == r;
    case Opcode::ADDI: case Opcode::MOV: case Opcode::LW: case Opcode::JALR:
        return ins.rs1 == r;
    case Opcode::SW:
        return ins.rs1 == r || ins.rs2 == r;
    default:
        return false;
    }
}

bool writes_rd(const Instruction& ins) {
    switch (ins.op) {
    case Opcode::ADD: case Opcode::SUB: case Opcode::AND: case Opcode::OR: case Opcode::XOR:
    case Opcode::ADDI: case Opcode::LI: case Opcode::MOV: case Opcode::LW:
    case Opcode::JAL: case Opcode::JALR:
        return true;
    default:
        return false;
    }
}

struct TagWrite {
    bool is_reg;
    Reg reg;
    uint32_t addr;
    PolicyTag tag;
};

struct RangeEffect {
    uint32_t base = 0;
    uint32_t bytes = 0;
    PolicyTag tag;
    bool zero_payload = false;
};

// Effects computed against the pre-state, applied after the raw step.
struct Effects {
    std::vector<TagWrite> tags;
    std::vector<RangeEffect> ranges;
};

} // namespace

MicroPolicy make_none() { return MicroPolicy{}; }

MicroPolicy make_di() {
    MicroPolicy p;
    p.base = MicroPolicy::Base::DI;
    p.name = "di";
    return p;
}

MicroPolicy make_ltc() {
    MicroPolicy p;
    p.base = MicroPolicy::Base::LTC;
    p.name = "ltc";
    return p;
}

MicroPolicy with_register_protection(MicroPolicy p) {
    if (!p.enforcing()) throw ConfigError("register protection needs a tag policy");
    p.protect_registers = true;
    p.name += "+regs";
    return p;
}

MicroPolicy make_mutant(const std::string& id) {
    // Each mutant builds on the register-protecting variant of its base
    // policy and alters exactly one memory rule.
    if (id == "LOAD_NO_CHECK_DI") {
        MicroPolicy p = with_register_protection(make_di());
        p.load_check = false;
        p.name = "mutant:" + id;
        return p;
    }
    if (id == "STORE_NO_CHECK") {
        MicroPolicy p = with_register_protection(make_di());
        p.store_check = false;
        p.name = "mutant:" + id;
        return p;
    }
    if (id == "HEADER_NO_INIT") {
        MicroPolicy p = with_register_protection(make_di());
        p.header_init = false;
        p.name = "mutant:" + id;
        return p;
    }
    if (id == "PER_DEPTH_TAG") {
        MicroPolicy p = with_register_protection(make_ltc());
        p.fresh_colors = false;
        p.name = "mutant:" + id;
        return p;
    }
    if (id == "LOAD_NO_CHECK_LT") {
        MicroPolicy p = with_register_protection(make_ltc());
        p.load_check = false;
        p.name = "mutant:" + id;
        return p;
    }
    if (id == "STORE_NO_UPDATE") {
        MicroPolicy p = with_register_protection(make_ltc());
        p.store_update = false;
        p.name = "mutant:" + id;
        return p;
    }
    throw ConfigError("unknown mutant id '" + id + "'");
}

std::vector<std::string> mutant_ids() {
    return {"LOAD_NO_CHECK_DI", "STORE_NO_CHECK", "HEADER_NO_INIT",
            "PER_DEPTH_TAG", "LOAD_NO_CHECK_LT", "STORE_NO_UPDATE"};
}

MicroPolicy parse_policy(const std::string& selector) {
    if (selector == "none") return make_none();
    if (selector == "di") return make_di();
    if (selector == "ltc") return make_ltc();
    if (selector == "di+regs") return with_register_protection(make_di());
    if (selector == "ltc+regs") return with_register_protection(make_ltc());
    if (selector.rfind("mutant:", 0) == 0) return make_mutant(selector.substr(7));
    throw ConfigError("unknown policy selector '" + selector + "'");
}

void apply_initial_tags(MachineState& m, const MicroPolicy& p) {
    if (!p.enforcing()) return;
    const Region& st = m.layout().stack;
    for (uint32_t a = st.base; a < st.base + st.size; a += 4)
        m.set_mem_tag(a, PolicyTag::unused());
}

// ---------------------------------------------------------------------------
// guarded_step
// ---------------------------------------------------------------------------

GuardedStepResult guarded_step(MachineState& m, PolicyState& ps, const MicroPolicy& pol,
                               const CodeImage& code) {
    GuardedStepResult res;
    if (m.halted()) return res;

    const TaggedInstruction* ti = code.fetch(m.pc());
    if (!ti) {
        m.set_halted(true);
        return res;
    }

    if (!pol.enforcing()) {
        StepOutput out = raw_step(m, code);
        res.event = out.event;
        return res;
    }

    const Instruction& ins = ti->instr;
    const InstrKind kind = ti->kind;
    const bool di = pol.base == MicroPolicy::Base::DI;
    const uint32_t cur = ps.current_color;
    const Region& stack = m.layout().stack;

    PolicyState next = ps;
    Effects fx;

    auto failstop = [&](const char* why) {
        GuardedStepResult r;
        r.failstopped = true;
        r.reason = why;
        return r;
    };

    // Calls must land on a function header.
    if (ps.pending_entry && kind != InstrKind::Header1)
        return failstop("call target is not a function header");
    // Argument marking must run contiguously into the call.
    if (!ps.pending_args.empty() && kind != InstrKind::Call)
        return failstop("argument marking not followed by a call");
    // Blessed sequences execute in full from their start.
    switch (ps.last_kind) {
    case InstrKind::Header1:
        if (kind != InstrKind::Header2) return failstop("header sequence broken");
        break;
    case InstrKind::Return1:
        if (!ps.last_ra_restore && kind != InstrKind::Return1)
            return failstop("exit restore sequence broken");
        if (ps.last_ra_restore && kind != InstrKind::Return2)
            return failstop("exit sequence broken after ra restore");
        break;
    case InstrKind::Return2:
        if (kind != InstrKind::Return3 && !(kind == InstrKind::Call && ins.op == Opcode::J))
            return failstop("exit sequence broken after stack release");
        break;
    default:
        break;
    }

    const ActivationRecord* top = ps.records.empty() ? nullptr : &ps.records.back();

    // Callee-saved register reads outside the blessed save belong to the
    // activation that last wrote them.
    if (pol.protect_registers) {
        bool blessed_save = kind == InstrKind::Header2 && ins.op == Opcode::SW;
        for (Reg r : {Reg::s0, Reg::s1, Reg::s2, Reg::s3}) {
            if (!reads_reg(ins, r)) continue;
            if (blessed_save && ins.rs2 == r && ins.rs1 != r) continue;
            PolicyTag t = m.reg(r).tag;
            if (!(t.kind == PolicyTag::Kind::RegOwned && t.color == cur))
                return failstop("callee-saved register not owned by reader");
        }
    }

    auto stack_tag = [&](uint32_t addr) { return m.mem(addr).tag; };
    auto mem_addr = [&] { return m.reg(ins.rs1).payload + static_cast<uint32_t>(ins.imm); };

    switch (kind) {
    case InstrKind::Plain: {
        if (ins.op == Opcode::LW) {
            uint32_t addr = mem_addr();
            if (stack.contains(addr) && addr % 4 == 0) {
                PolicyTag t = stack_tag(addr);
                bool shared = t.kind == PolicyTag::Kind::Cell && t.color == kSharedColor;
                bool own = t.kind == PolicyTag::Kind::Cell && t.color == cur;
                if (pol.load_check && !shared && !own)
                    return failstop("load from stack word not owned by this activation");
            }
        } else if (ins.op == Opcode::SW) {
            uint32_t addr = mem_addr();
            if (stack.contains(addr) && addr % 4 == 0) {
                PolicyTag t = stack_tag(addr);
                bool shared = t.kind == PolicyTag::Kind::Cell && t.color == kSharedColor;
                if (shared) return failstop("store to shared stack word");
                if (di) {
                    bool own = t.kind == PolicyTag::Kind::Cell && t.color == cur;
                    bool unused = t.kind == PolicyTag::Kind::Unused;
                    if (pol.store_check && !own && !unused)
                        return failstop("store to stack word not owned by this activation");
                    // Eager policy: ownership comes from the entry claim only.
                } else {
                    if (pol.store_update)
                        fx.tags.push_back({false, Reg::zero, addr, PolicyTag::cell(cur)});
                }
            }
        }
        break;
    }

    case InstrKind::Call: {
        if (ins.op == Opcode::SW) {
            // Argument-window marking store: publishes one word of the
            // caller's frame, read-only, for the upcoming callee.
            if (!top) return failstop("argument marking outside any activation");
            uint32_t addr = mem_addr();
            if (!(stack.contains(addr) && addr % 4 == 0 && top->in_frame(addr)))
                return failstop("argument mark outside own frame");
            if (top->ra_slot_set && addr == top->ra_slot)
                return failstop("argument mark over saved return address");
            PolicyTag t = stack_tag(addr);
            bool own = t.kind == PolicyTag::Kind::Cell && t.color == cur;
            bool unused = t.kind == PolicyTag::Kind::Unused;
            if (di ? !own : !(own || unused))
                return failstop("argument mark on word not owned by this activation");
            if (pol.store_update)
                fx.tags.push_back({false, Reg::zero, addr, PolicyTag::cell(kSharedColor)});
            next.pending_args.push_back(addr);
        } else if (ins.op == Opcode::JAL) {
            next.staged_window = std::move(next.pending_args);
            next.pending_args.clear();
            next.pending_entry = true;
        } else if (ins.op == Opcode::J) {
            // Tail transfer: the current activation is already torn down.
            if (ps.last_kind != InstrKind::Return2) return failstop("tail call outside exit sequence");
            if (!top) return failstop("tail call outside any activation");
            ActivationRecord rec = *top;
            next.records.pop_back();
            uint32_t caller_color = next.records.empty() ? 0 : next.records.back().color;
            for (uint32_t a : rec.arg_window)
                fx.tags.push_back({false, Reg::zero, a, PolicyTag::cell(caller_color)});
            next.depth -= 1;
            next.current_color = caller_color;
            next.pending_entry = true;
            next.staged_window.clear();
        } else {
            return failstop("malformed call instruction");
        }
        break;
    }

    case InstrKind::Header1: {
        if (!ps.pending_entry) return failstop("function header outside a call");
        if (!(ins.op == Opcode::ADDI && ins.rd == Reg::sp && ins.rs1 == Reg::sp && ins.imm < 0))
            return failstop("malformed function header");
        uint32_t bytes = static_cast<uint32_t>(-ins.imm);
        if (bytes % 4 != 0 || bytes < 4) return failstop("bad frame size");
        uint32_t new_sp = m.reg(Reg::sp).payload + static_cast<uint32_t>(ins.imm);
        if (new_sp < stack.base || new_sp + bytes > stack.base + stack.size || new_sp % 4 != 0)
            return failstop("frame does not fit in the stack region");

        uint32_t color = di ? ps.depth + 1
                            : (pol.fresh_colors ? ps.next_fresh : ps.depth + 1);
        if (!di && pol.fresh_colors) next.next_fresh += 1;
        next.depth += 1;
        next.current_color = color;
        next.pending_entry = false;

        ActivationRecord rec;
        rec.color = color;
        rec.frame_base = new_sp;
        rec.frame_bytes = bytes;
        rec.arg_window = std::move(next.staged_window);
        next.staged_window.clear();
        next.records.push_back(std::move(rec));

        if (di) {
            // Eager claim; the correct policy also initializes the payloads.
            fx.ranges.push_back({new_sp, bytes, PolicyTag::cell(color), pol.header_init});
        }
        break;
    }

    case InstrKind::Header2: {
        if (!top) return failstop("entry store outside any activation");
        if (!(ins.op == Opcode::SW && ins.rs1 == Reg::sp)) return failstop("malformed entry store");
        uint32_t addr = mem_addr();
        if (!top->in_frame(addr)) return failstop("entry store outside own frame");
        if (ps.last_kind == InstrKind::Header1) {
            if (ins.rs2 != Reg::ra) return failstop("entry must save the return address first");
            next.records.back().ra_slot = addr;
            next.records.back().ra_slot_set = true;
            if (!di && pol.store_update)
                fx.tags.push_back({false, Reg::zero, addr, PolicyTag::cell(cur)});
        } else if (ins.rs2 == Reg::zero) {
            // Public allocation: shared, zeroed, immutable.
            fx.tags.push_back({false, Reg::zero, addr, PolicyTag::cell(kSharedColor)});
        } else if (is_callee_saved(ins.rs2)) {
            if (pol.protect_registers) {
                PolicyTag t = m.reg(ins.rs2).tag;
                if (t.kind == PolicyTag::Kind::RegOwned) {
                    fx.tags.push_back({false, Reg::zero, addr, t});
                    fx.tags.push_back({true, ins.rs2, 0, PolicyTag::none()});
                } else if (!di && pol.store_update) {
                    fx.tags.push_back({false, Reg::zero, addr, PolicyTag::cell(cur)});
                }
            } else if (!di && pol.store_update) {
                fx.tags.push_back({false, Reg::zero, addr, PolicyTag::cell(cur)});
            }
        } else {
            return failstop("malformed entry store");
        }
        break;
    }

    case InstrKind::Return1: {
        if (!top) return failstop("exit restore outside any activation");
        if (ps.pending_entry) return failstop("exit restore before entry");
        if (!(ins.op == Opcode::LW && ins.rs1 == Reg::sp)) return failstop("malformed exit restore");
        uint32_t addr = mem_addr();
        if (ins.rd == Reg::ra) {
            if (!top->ra_slot_set || addr != top->ra_slot)
                return failstop("return address restored from the wrong slot");
            PolicyTag t = stack_tag(addr);
            bool own = t.kind == PolicyTag::Kind::Cell && t.color == top->color;
            bool unused = t.kind == PolicyTag::Kind::Unused;
            if (!own && !unused) return failstop("saved return address was overwritten");
            next.last_ra_restore = true;
        } else if (is_callee_saved(ins.rd)) {
            if (!top->in_frame(addr)) return failstop("exit restore outside own frame");
            PolicyTag t = stack_tag(addr);
            if (pol.protect_registers && t.kind == PolicyTag::Kind::RegOwned) {
                fx.tags.push_back({true, ins.rd, 0, t});
                fx.tags.push_back({false, Reg::zero, addr, PolicyTag::cell(top->color)});
            } else {
                bool own = t.kind == PolicyTag::Kind::Cell && t.color == cur;
                bool shared = t.kind == PolicyTag::Kind::Cell && t.color == kSharedColor;
                if (pol.load_check && !own && !shared)
                    return failstop("exit restore from word not owned by this activation");
                if (pol.protect_registers)
                    fx.tags.push_back({true, ins.rd, 0, PolicyTag::none()});
            }
        } else {
            return failstop("malformed exit restore");
        }
        break;
    }

    case InstrKind::Return2: {
        if (!top) return failstop("stack release outside any activation");
        if (!(ps.last_kind == InstrKind::Return1 && ps.last_ra_restore))
            return failstop("stack release before return address restore");
        if (!(ins.op == Opcode::ADDI && ins.rd == Reg::sp && ins.rs1 == Reg::sp && ins.imm > 0))
            return failstop("malformed stack release");
        if (static_cast<uint32_t>(ins.imm) != top->frame_bytes)
            return failstop("stack release does not match the frame size");
        if (di) {
            // Clear before returning: the frame goes back to unused, zeroed.
            fx.ranges.push_back({top->frame_base, top->frame_bytes, PolicyTag::unused(), true});
        }
        break;
    }

    case InstrKind::Return3: {
        if (!top) return failstop("return outside any activation");
        if (ps.last_kind != InstrKind::Return2) return failstop("return outside exit sequence");
        if (!(ins.op == Opcode::JALR && ins.rs1 == Reg::ra)) return failstop("malformed return");
        ActivationRecord rec = *top;
        next.records.pop_back();
        uint32_t caller_color = next.records.empty() ? 0 : next.records.back().color;
        for (uint32_t a : rec.arg_window)
            fx.tags.push_back({false, Reg::zero, a, PolicyTag::cell(caller_color)});
        next.depth -= 1;
        next.current_color = caller_color;
        break;
    }
    }

    // Ownership marking for callee-saved destination registers.
    if (pol.protect_registers && writes_rd(ins) && is_callee_saved(ins.rd) &&
        kind != InstrKind::Return1) {
        fx.tags.push_back({true, ins.rd, 0, PolicyTag::reg_owned(cur)});
    }

    next.last_kind = kind;
    if (kind != InstrKind::Return1) next.last_ra_restore = false;

    StepOutput out = raw_step(m, code);
    if (!m.halted()) {
        for (const auto& r : fx.ranges) {
            for (uint32_t a = r.base; a < r.base + r.bytes; a += 4) {
                m.set_mem_tag(a, r.tag);
                if (r.zero_payload) m.set_mem(a, 0);
            }
        }
        for (const auto& t : fx.tags) {
            if (t.is_reg)
                m.set_reg_tag(t.reg, t.tag);
            else
                m.set_mem_tag(t.addr, t.tag);
        }
        ps = std::move(next);
    }
    res.event = out.event;
    return res;
}

} // namespace stacksafe
