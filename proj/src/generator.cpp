#include "stacksafe/generator.hpp"

#include <algorithm>
#include <deque>
#include <sstream>

namespace stacksafe {

void GenConfig::validate() const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(p_call) || !prob(p_tailcall) || !prob(p_store) || !prob(p_load) ||
        !prob(p_misbehave) || !prob(p_public_alloc) || !prob(p_init_after_call))
        throw ConfigError("generator probabilities must lie in [0,1]");
    if (max_functions < 1) throw ConfigError("max_functions must be at least 1");
    if (max_frame_words < 1) throw ConfigError("max_frame_words must be at least 1");
    if (call_depth_cap < 1) throw ConfigError("call_depth_cap must be at least 1");
    if (fuel <= 0) throw ConfigError("fuel must be positive");
}

std::string TestCase::assembly_text() const {
    Program p{layout, code, initial, entry_args};
    return write_assembly(p);
}

std::string TestCase::annotation_text() const { return write_annotations(annot); }

CombinedState make_initial_state(const TestCase& tc, const MicroPolicy& pol, ArgRegClass argreg,
                                 bool prov_enabled) {
    CombinedState s;
    s.m = tc.initial;
    apply_initial_tags(s.m, pol);
    s.ps = PolicyState{};
    s.ctx = initial_context(s.m, tc.entry_args, prov_enabled, argreg);
    return s;
}

namespace {

constexpr int kOutArgWords = 2; // convention: outgoing stack args at offsets 0 and 4

struct FunctionPlan {
    int index = 0;
    uint32_t entry = 0;
    uint32_t span_end = 0;
    int n_locals = 0;
    int n_sregs = 0;
    std::vector<Reg> sregs;
    std::vector<int> public_words; // word indices within the frame
    int ra_word = 0;
    int frame_words = 0;
    int n_reg_params = 0;
    int n_stack_params = 0;
    bool returns_value = false;
    int body_slots = 0;

    // emission state
    uint32_t cursor = 0;
    int slots_done = 0;
    bool entry_emitted = false;
    bool exit_emitted = false;

    int first_local_word() const { return kOutArgWords; }
    int spill_word(int i) const { return kOutArgWords + n_locals + i; }
    uint32_t frame_bytes() const { return static_cast<uint32_t>(frame_words) * 4; }
    bool is_public_word(int w) const {
        return std::find(public_words.begin(), public_words.end(), w) != public_words.end();
    }
};

struct PendingInstr {
    Instruction ins;
    InstrKind kind = InstrKind::Plain;
    std::vector<SecOp> ops;
};

struct WalkFrame {
    FunctionPlan* plan = nullptr;
    uint32_t frame_base = 0;
    uint32_t defined = 0;   // bit per register
    uint64_t inited = 0;    // bit per frame word: stored since entry
    bool post_call = false; // reinitialization window after a call returned
};

uint32_t reg_bit(Reg r) { return 1u << static_cast<int>(r); }

const Reg kScratch[] = {Reg::t0, Reg::t1, Reg::t2, Reg::t3, Reg::a0, Reg::a1, Reg::a2, Reg::a3};

class Builder {
public:
    Builder(const GenConfig& cfg, const MicroPolicy& reference) : cfg_(cfg), ref_(reference) {}

    TestCase build() {
        plan();
        walk();
        fill_holes();
        tc_.annot.cross_check(tc_.code);
        return std::move(tc_);
    }

private:
    GenConfig cfg_;
    MicroPolicy ref_;
    Rng rng_{0};
    TestCase tc_;
    std::vector<FunctionPlan> plans_;
    std::deque<PendingInstr> queue_; // pending instructions of the function being emitted
    std::vector<WalkFrame> frames_;
    CombinedState s_;
    System sys_;
    bool main_trailer_done_ = false;

    // ------------------------------------------------------------------ plan

    void plan() {
        rng_ = Rng(cfg_.seed);
        int n_functions = cfg_.max_functions <= 1
                              ? 1
                              : 2 + static_cast<int>(rng_.below(cfg_.max_functions - 1));
        uint32_t cursor = 0;
        for (int i = 0; i < n_functions; ++i) {
            FunctionPlan p;
            p.index = i;
            p.n_locals = 1 + static_cast<int>(rng_.below(cfg_.max_frame_words));
            if (rng_.chance(0.4)) {
                p.sregs.push_back(Reg::s0);
                if (rng_.chance(0.3)) p.sregs.push_back(Reg::s1);
            }
            p.n_sregs = static_cast<int>(p.sregs.size());
            for (int w = 0; w < p.n_locals; ++w) {
                if (rng_.chance(cfg_.p_public_alloc))
                    p.public_words.push_back(kOutArgWords + w);
            }
            p.frame_words = kOutArgWords + p.n_locals + p.n_sregs + 1;
            p.ra_word = p.frame_words - 1;
            p.n_reg_params = i == 0 ? 0 : static_cast<int>(rng_.below(4));
            p.n_stack_params = i == 0 ? 0 : (rng_.chance(0.35) ? (rng_.chance(0.4) ? 2 : 1) : 0);
            p.returns_value = i != 0 && rng_.chance(0.6);
            p.body_slots = (i == 0 ? 10 : 6) + static_cast<int>(rng_.below(8));
            p.entry = cursor;
            uint32_t entry_len = 2 + p.n_sregs + static_cast<uint32_t>(p.public_words.size());
            uint32_t exit_len = p.n_sregs + 3;
            uint32_t trailer = i == 0 ? 6 : 0;
            uint32_t span_words = entry_len + static_cast<uint32_t>(p.body_slots) * 6 + exit_len +
                                  trailer + 4;
            cursor += span_words * 4;
            p.span_end = cursor;
            p.cursor = p.entry;
            plans_.push_back(p);
        }

        Layout lay;
        lay.code = {0, cursor};
        uint32_t stack_base = ((cursor + 63) / 64) * 64 + 64;
        lay.stack = {stack_base, 96 * 4};
        lay.globals = {stack_base + 96 * 4, 4 * 4};
        lay.out_addr = lay.globals.base;
        lay.validate();

        tc_.layout = lay;
        tc_.code = CodeImage(lay.code);
        tc_.annot = AnnotationMap(lay.code);
        tc_.initial = MachineState(lay);
        tc_.initial.set_pc(0);
        tc_.initial.set_reg(Reg::sp, lay.stack.base + lay.stack.size);
        tc_.seed = cfg_.seed;

        int n_entry_args = static_cast<int>(rng_.below(3));
        for (int i = 0; i < n_entry_args; ++i) {
            Reg r = static_cast<Reg>(static_cast<int>(Reg::a0) + i);
            tc_.entry_args.push_back(r);
            tc_.initial.set_reg(r, rng_.next_u32() % 64);
        }
    }

    // ------------------------------------------------------------------ walk

    void walk() {
        s_ = make_initial_state(tc_, ref_);
        sys_ = System{&ref_, &tc_.code, &tc_.annot};

        WalkFrame wf0;
        wf0.plan = &plans_[0];
        wf0.defined = reg_bit(Reg::zero) | reg_bit(Reg::sp);
        for (Reg r : tc_.entry_args) wf0.defined |= reg_bit(r);
        frames_.push_back(wf0);

        for (int step = 0; step < cfg_.fuel; ++step) {
            if (s_.m.halted()) break;
            uint32_t pc = s_.m.pc();
            FunctionPlan* f = pc % 4 == 0 ? plan_at(pc) : nullptr;
            if (!tc_.code.has(pc)) {
                if (!f) break; // wild jump; the machine halts on the failed fetch
                emit_at(*f, pc);
            }
            execute_one(pc);
        }
    }

    FunctionPlan* plan_at(uint32_t pc) {
        for (auto& p : plans_)
            if (pc >= p.entry && p.span_end > pc) return &p;
        return nullptr;
    }

    WalkFrame* top() { return frames_.empty() ? nullptr : &frames_.back(); }

    void execute_one(uint32_t pc) {
        const TaggedInstruction* ti = tc_.code.fetch(pc);
        if (!ti) {
            s_.m.set_halted(true);
            return;
        }
        MachineState pre = s_.m;
        CombinedStepOutput out = combined_step(s_, ref_, tc_.code, tc_.annot);
        if (out.failstopped) {
            // Misbehaving instructions may be vetoed by the reference policy;
            // the walk continues on the unenforced semantics so that the rest
            // of the program still gets generated.
            raw_step(s_.m, tc_.code);
            for (const SecOp& op : tc_.annot.at(pc)) {
                try {
                    s_.ctx = apply_op(pre, s_.ctx, op);
                } catch (const std::exception&) {
                }
            }
        }

        // Mirror the activation structure.
        const Instruction& ins = ti->instr;
        if (ti->kind == InstrKind::Call && ins.op == Opcode::JAL) {
            FunctionPlan* callee = plan_at(ins.target);
            WalkFrame wf;
            wf.plan = callee;
            wf.frame_base = 0; // set at its Header1
            wf.defined = reg_bit(Reg::zero) | reg_bit(Reg::sp) | reg_bit(Reg::ra);
            for (int i = 0; callee && i < callee->n_reg_params; ++i)
                wf.defined |= reg_bit(static_cast<Reg>(static_cast<int>(Reg::a0) + i));
            frames_.push_back(wf);
        } else if (ti->kind == InstrKind::Call && ins.op == Opcode::J) {
            FunctionPlan* callee = plan_at(ins.target);
            if (!frames_.empty()) frames_.pop_back();
            WalkFrame wf;
            wf.plan = callee;
            wf.defined = reg_bit(Reg::zero) | reg_bit(Reg::sp) | reg_bit(Reg::ra);
            for (int i = 0; callee && i < callee->n_reg_params; ++i)
                wf.defined |= reg_bit(static_cast<Reg>(static_cast<int>(Reg::a0) + i));
            frames_.push_back(wf);
        } else if (ti->kind == InstrKind::Header1) {
            if (WalkFrame* wf = top()) wf->frame_base = s_.m.reg(Reg::sp).payload;
        } else if (ti->kind == InstrKind::Return3) {
            if (!frames_.empty()) frames_.pop_back();
            if (WalkFrame* wf = top()) {
                wf->post_call = true;
                wf->defined &= ~(reg_bit(Reg::a0) | reg_bit(Reg::a1) | reg_bit(Reg::a2) |
                                 reg_bit(Reg::a3) | reg_bit(Reg::t0) | reg_bit(Reg::t1) |
                                 reg_bit(Reg::t2) | reg_bit(Reg::t3));
            }
        }

        // Keep emission aligned with taken branches: the skipped arm becomes
        // explicit no-ops so later activations can fall through it.
        FunctionPlan* f = plan_at(pc);
        if (f && s_.m.pc() > f->cursor && s_.m.pc() < f->span_end && !s_.m.halted()) {
            for (uint32_t a = f->cursor; a < s_.m.pc(); a += 4) {
                if (!tc_.code.has(a)) tc_.code.set(a, Instruction{}, InstrKind::Plain);
            }
            f->cursor = s_.m.pc();
        }
    }

    // ------------------------------------------------------------- emission

    void put(FunctionPlan& f, const PendingInstr& pi) {
        tc_.code.set(f.cursor, pi.ins, pi.kind);
        for (const SecOp& op : pi.ops) tc_.annot.add(f.cursor, op);
        f.cursor += 4;
    }

    void emit_at(FunctionPlan& f, uint32_t pc) {
        if (pc != f.cursor) {
            // An unexpected landing spot (wild jump in a replayed body).
            tc_.code.set(pc, Instruction{}, InstrKind::Plain);
            return;
        }
        if (!queue_.empty()) {
            put(f, queue_.front());
            queue_.pop_front();
            return;
        }
        if (!f.entry_emitted) {
            f.entry_emitted = true;
            queue_entry(f);
        } else if (f.slots_done < f.body_slots) {
            f.slots_done++;
            queue_body_slot(f);
        } else if (!f.exit_emitted) {
            f.exit_emitted = true;
            if (f.index == 0)
                queue_trailer();
            else
                queue_exit(f);
        } else {
            queue_.push_back(PendingInstr{Instruction{.op = Opcode::HALT}, InstrKind::Plain, {}});
        }
        put(f, queue_.front());
        queue_.pop_front();
    }

    // Main ends with observable output so return-time state stays relevant.
    void queue_trailer() {
        WalkFrame* wf = top();
        for (int i = 0; i < 2; ++i) {
            Reg src = Reg::zero;
            if (wf && wf->plan == &plans_[0]) src = pick_defined(*wf).value_or(Reg::zero);
            queue_.push_back(PendingInstr{make(Opcode::SW, Reg::zero, Reg::zero, src,
                                               static_cast<int32_t>(tc_.layout.out_addr)),
                                          InstrKind::Plain, {}});
        }
        queue_.push_back(PendingInstr{make(Opcode::HALT), InstrKind::Plain, {}});
    }

    Instruction make(Opcode op, Reg rd = Reg::zero, Reg rs1 = Reg::zero, Reg rs2 = Reg::zero,
                     int32_t imm = 0, uint32_t target = 0) {
        Instruction i;
        i.op = op;
        i.rd = rd;
        i.rs1 = rs1;
        i.rs2 = rs2;
        i.imm = imm;
        i.target = target;
        return i;
    }

    void queue_entry(FunctionPlan& f) {
        int32_t bytes = static_cast<int32_t>(f.frame_bytes());
        PendingInstr h1{make(Opcode::ADDI, Reg::sp, Reg::sp, Reg::zero, -bytes), InstrKind::Header1, {}};
        // Allocation ops partition the frame into private and public words.
        int run_start = 0;
        bool run_public = f.is_public_word(0);
        for (int w = 1; w <= f.frame_words; ++w) {
            bool flush = w == f.frame_words || f.is_public_word(w) != run_public;
            if (flush) {
                h1.ops.push_back(SecOp::alloc(run_public, -bytes + run_start * 4,
                                              static_cast<uint32_t>(w - run_start) * 4));
                if (w < f.frame_words) {
                    run_start = w;
                    run_public = f.is_public_word(w);
                }
            }
        }
        queue_.push_back(std::move(h1));
        queue_.push_back(
            PendingInstr{make(Opcode::SW, Reg::zero, Reg::sp, Reg::ra, f.ra_word * 4),
                         InstrKind::Header2, {}});
        for (int i = 0; i < f.n_sregs; ++i)
            queue_.push_back(
                PendingInstr{make(Opcode::SW, Reg::zero, Reg::sp, f.sregs[i], f.spill_word(i) * 4),
                             InstrKind::Header2, {}});
        for (int w : f.public_words)
            queue_.push_back(PendingInstr{make(Opcode::SW, Reg::zero, Reg::sp, Reg::zero, w * 4),
                                          InstrKind::Header2, {}});
    }

    void queue_exit(FunctionPlan& f, FunctionPlan* tail_target = nullptr) {
        for (int i = f.n_sregs - 1; i >= 0; --i)
            queue_.push_back(
                PendingInstr{make(Opcode::LW, f.sregs[i], Reg::sp, Reg::zero, f.spill_word(i) * 4),
                             InstrKind::Return1, {}});
        queue_.push_back(PendingInstr{make(Opcode::LW, Reg::ra, Reg::sp, Reg::zero, f.ra_word * 4),
                                      InstrKind::Return1, {}});
        PendingInstr r2{make(Opcode::ADDI, Reg::sp, Reg::sp, Reg::zero,
                             static_cast<int32_t>(f.frame_bytes())),
                        InstrKind::Return2, {}};
        r2.ops.push_back(SecOp::dealloc(0, f.frame_bytes()));
        queue_.push_back(std::move(r2));
        if (tail_target) {
            PendingInstr j{make(Opcode::J, Reg::zero, Reg::zero, Reg::zero, 0, tail_target->entry),
                           InstrKind::Call, {}};
            std::vector<Reg> args = call_arg_regs(*tail_target);
            j.ops.push_back(SecOp::tail_call(tail_target->entry, args, {}));
            queue_.push_back(std::move(j));
        } else {
            PendingInstr r3{make(Opcode::JALR, Reg::zero, Reg::ra), InstrKind::Return3, {}};
            r3.ops.push_back(SecOp::ret());
            queue_.push_back(std::move(r3));
        }
    }

    std::vector<Reg> call_arg_regs(const FunctionPlan& callee) {
        std::vector<Reg> args;
        for (int i = 0; i < callee.n_reg_params; ++i)
            args.push_back(static_cast<Reg>(static_cast<int>(Reg::a0) + i));
        if (callee.returns_value &&
            std::find(args.begin(), args.end(), Reg::a0) == args.end())
            args.push_back(Reg::a0);
        return args;
    }

    Reg pick_scratch() { return kScratch[rng_.below(8)]; }

    std::optional<Reg> pick_defined(const WalkFrame& wf) {
        std::vector<Reg> cands;
        for (Reg r : kScratch)
            if (wf.defined & reg_bit(r)) cands.push_back(r);
        for (Reg r : wf.plan->sregs)
            if (wf.defined & reg_bit(r)) cands.push_back(r);
        if (cands.empty()) return std::nullopt;
        return cands[rng_.below(cands.size())];
    }

    std::optional<int> pick_private_local(const FunctionPlan& f, bool want_inited,
                                          const WalkFrame& wf) {
        std::vector<int> cands;
        for (int w = f.first_local_word(); w < f.first_local_word() + f.n_locals; ++w) {
            if (f.is_public_word(w)) continue;
            bool inited = (wf.inited >> w) & 1;
            if (inited == want_inited) cands.push_back(w);
        }
        if (cands.empty()) return std::nullopt;
        return cands[rng_.below(cands.size())];
    }

    // Callable targets: strictly later functions, so the call graph is a DAG.
    FunctionPlan* pick_callee(const FunctionPlan& f) {
        std::vector<FunctionPlan*> cands;
        for (auto& p : plans_)
            if (p.index > f.index) cands.push_back(&p);
        if (cands.empty()) return nullptr;
        FunctionPlan* callee = cands[rng_.below(cands.size())];
        uint32_t sp = s_.m.reg(Reg::sp).payload;
        if (sp < tc_.layout.stack.base + callee->frame_bytes() + 8) return nullptr;
        if (frames_.size() >= static_cast<size_t>(cfg_.call_depth_cap)) return nullptr;
        return callee;
    }

    void queue_call(FunctionPlan& f, WalkFrame& wf, FunctionPlan& callee) {
        for (int i = 0; i < callee.n_reg_params; ++i) {
            Reg a = static_cast<Reg>(static_cast<int>(Reg::a0) + i);
            queue_.push_back(PendingInstr{
                make(Opcode::LI, a, Reg::zero, Reg::zero, static_cast<int32_t>(rng_.below(64))),
                InstrKind::Plain, {}});
            wf.defined |= reg_bit(a);
        }
        std::vector<StackArg> sas;
        for (int j = 0; j < callee.n_stack_params; ++j) {
            Reg src = Reg::zero;
            if (auto d = pick_defined(wf); d && !is_callee_saved(*d)) src = *d;
            queue_.push_back(PendingInstr{make(Opcode::SW, Reg::zero, Reg::sp, src, j * 4),
                                          InstrKind::Call, {}});
            sas.push_back(StackArg{Reg::sp, j * 4, 4});
            wf.inited |= 1ull << j;
        }
        PendingInstr jal{make(Opcode::JAL, Reg::ra, Reg::zero, Reg::zero, 0, callee.entry),
                         InstrKind::Call, {}};
        jal.ops.push_back(SecOp::call(callee.entry, call_arg_regs(callee), sas));
        queue_.push_back(std::move(jal));
        if (callee.returns_value) wf.defined |= reg_bit(Reg::a0);
    }

    void queue_misbehavior(FunctionPlan& f, WalkFrame& wf) {
        // The catalog mirrors the classic attack shapes: cross-frame access,
        // return-address and stack-pointer tampering, read-before-write and
        // callee-saved clobbering.
        struct Victim {
            uint32_t addr;
        };
        std::vector<uint32_t> cross;
        for (size_t i = 0; i + 1 < frames_.size(); ++i) {
            const WalkFrame& anc = frames_[i];
            if (!anc.plan || anc.frame_base == 0) continue;
            for (int w = anc.plan->first_local_word();
                 w < anc.plan->first_local_word() + anc.plan->n_locals; ++w) {
                if (anc.plan->is_public_word(w)) continue;
                cross.push_back(anc.frame_base + 4 * w);
            }
            cross.push_back(anc.frame_base + 4 * anc.plan->ra_word);
        }

        std::vector<int> shapes;
        if (!cross.empty()) {
            shapes.push_back(0); // cross-frame load
            shapes.push_back(1); // cross-frame store
        }
        if (pick_private_local(f, false, wf)) shapes.push_back(2); // read before write
        shapes.push_back(3);                                       // ra tamper
        shapes.push_back(4);                                       // sp tamper
        if (f.n_sregs < 2) shapes.push_back(5);                    // callee-saved clobber
        int shape = shapes[rng_.below(shapes.size())];

        switch (shape) {
        case 0: {
            uint32_t victim = cross[rng_.below(cross.size())];
            Reg rd = pick_scratch();
            queue_.push_back(PendingInstr{
                make(Opcode::LW, rd, Reg::zero, Reg::zero, static_cast<int32_t>(victim)),
                InstrKind::Plain, {}});
            wf.defined |= reg_bit(rd);
            if (rng_.chance(0.6))
                queue_.push_back(PendingInstr{make(Opcode::SW, Reg::zero, Reg::zero, rd,
                                                   static_cast<int32_t>(tc_.layout.out_addr)),
                                              InstrKind::Plain, {}});
            tc_.misbehavior_log.push_back("cross_frame_load");
            break;
        }
        case 1: {
            uint32_t victim = cross[rng_.below(cross.size())];
            Reg src = pick_defined(wf).value_or(Reg::zero);
            queue_.push_back(PendingInstr{
                make(Opcode::SW, Reg::zero, Reg::zero, src, static_cast<int32_t>(victim)),
                InstrKind::Plain, {}});
            tc_.misbehavior_log.push_back("cross_frame_store");
            break;
        }
        case 2: {
            int w = *pick_private_local(f, false, wf);
            Reg rd = pick_scratch();
            uint32_t addr = wf.frame_base + 4 * w;
            int32_t off = static_cast<int32_t>(addr - s_.m.reg(Reg::sp).payload);
            queue_.push_back(
                PendingInstr{make(Opcode::LW, rd, Reg::sp, Reg::zero, off), InstrKind::Plain, {}});
            wf.defined |= reg_bit(rd);
            if (rng_.chance(0.6))
                queue_.push_back(PendingInstr{make(Opcode::SW, Reg::zero, Reg::zero, rd,
                                                   static_cast<int32_t>(tc_.layout.out_addr)),
                                              InstrKind::Plain, {}});
            tc_.misbehavior_log.push_back("read_before_write");
            break;
        }
        case 3:
            queue_.push_back(PendingInstr{
                make(Opcode::ADDI, Reg::ra, Reg::ra, Reg::zero, rng_.chance(0.5) ? 8 : 16),
                InstrKind::Plain, {}});
            tc_.misbehavior_log.push_back("ra_tamper");
            break;
        case 4:
            queue_.push_back(PendingInstr{
                make(Opcode::ADDI, Reg::sp, Reg::sp, Reg::zero, rng_.chance(0.5) ? 8 : -8),
                InstrKind::Plain, {}});
            tc_.misbehavior_log.push_back("sp_tamper");
            break;
        default: {
            Reg victim = f.n_sregs == 0 ? Reg::s2 : Reg::s3;
            queue_.push_back(PendingInstr{
                make(Opcode::LI, victim, Reg::zero, Reg::zero,
                     static_cast<int32_t>(rng_.below(100))),
                InstrKind::Plain, {}});
            wf.defined |= reg_bit(victim);
            tc_.misbehavior_log.push_back("callee_saved_clobber");
            break;
        }
        }
    }

    void queue_body_slot(FunctionPlan& f) {
        WalkFrame* wfp = top();
        if (!wfp || wfp->plan != &f) {
            queue_.push_back(PendingInstr{Instruction{}, InstrKind::Plain, {}});
            return;
        }
        WalkFrame& wf = *wfp;

        // Early slots read the declared stack parameters.
        int slot = f.slots_done;
        if (slot >= 1 && slot <= f.n_stack_params) {
            Reg rd = pick_scratch();
            queue_.push_back(PendingInstr{
                make(Opcode::LW, rd, Reg::sp, Reg::zero,
                     static_cast<int32_t>(f.frame_bytes()) + (slot - 1) * 4),
                InstrKind::Plain, {}});
            wf.defined |= reg_bit(rd);
            return;
        }

        if (wf.post_call) {
            wf.post_call = false;
            if (rng_.chance(cfg_.p_init_after_call)) {
                if (auto w = pick_private_local(f, true, wf)) {
                    Reg src = pick_defined(wf).value_or(Reg::zero);
                    queue_.push_back(PendingInstr{
                        make(Opcode::SW, Reg::zero, Reg::sp, src,
                             static_cast<int32_t>(wf.frame_base + 4 * *w -
                                                  s_.m.reg(Reg::sp).payload)),
                        InstrKind::Plain, {}});
                    return;
                }
            }
        }

        double u = rng_.unit();
        if (u < cfg_.p_call) {
            if (FunctionPlan* callee = pick_callee(f)) {
                queue_call(f, wf, *callee);
                return;
            }
            u = 1.0; // fall through to filler
        } else if (u < cfg_.p_call + cfg_.p_tailcall) {
            // Tail transfers pass register arguments only, so the target must
            // not expect stack parameters: its caller's frame is already gone.
            if (f.index != 0) {
                FunctionPlan* callee = pick_callee(f);
                if (callee && callee->n_stack_params == 0) {
                    f.slots_done = f.body_slots; // the tail transfer ends this body
                    f.exit_emitted = true;
                    queue_exit(f, callee);
                    return;
                }
            }
            u = 1.0;
        } else if (u < cfg_.p_call + cfg_.p_tailcall + cfg_.p_store) {
            if (auto w = pick_private_local(f, rng_.chance(0.5), wf)) {
                Reg src = pick_defined(wf).value_or(Reg::zero);
                uint32_t addr = wf.frame_base + 4 * *w;
                int32_t off = static_cast<int32_t>(addr - s_.m.reg(Reg::sp).payload);
                queue_.push_back(PendingInstr{make(Opcode::SW, Reg::zero, Reg::sp, src, off),
                                              InstrKind::Plain, {}});
                wf.inited |= 1ull << *w;
                return;
            }
            u = 1.0;
        } else if (u < cfg_.p_call + cfg_.p_tailcall + cfg_.p_store + cfg_.p_load) {
            if (auto w = pick_private_local(f, true, wf)) {
                Reg rd = pick_scratch();
                uint32_t addr = wf.frame_base + 4 * *w;
                int32_t off = static_cast<int32_t>(addr - s_.m.reg(Reg::sp).payload);
                queue_.push_back(PendingInstr{make(Opcode::LW, rd, Reg::sp, Reg::zero, off),
                                              InstrKind::Plain, {}});
                wf.defined |= reg_bit(rd);
                return;
            }
            u = 1.0;
        } else if (u < cfg_.p_call + cfg_.p_tailcall + cfg_.p_store + cfg_.p_load +
                           cfg_.p_misbehave) {
            queue_misbehavior(f, wf);
            return;
        }

        // Filler: constants, arithmetic, output, short forward branches.
        double v = rng_.unit();
        if (v < 0.35) {
            Reg rd = pick_scratch();
            bool claim_sreg = f.n_sregs > 0 && rng_.chance(0.2);
            if (claim_sreg) rd = f.sregs[rng_.below(f.n_sregs)];
            queue_.push_back(PendingInstr{
                make(Opcode::LI, rd, Reg::zero, Reg::zero, static_cast<int32_t>(rng_.below(256))),
                InstrKind::Plain, {}});
            wf.defined |= reg_bit(rd);
        } else if (v < 0.6) {
            auto r1 = pick_defined(wf);
            auto r2 = pick_defined(wf);
            Reg rd = pick_scratch();
            if (r1 && r2) {
                Opcode op = rng_.chance(0.5) ? Opcode::ADD : (rng_.chance(0.5) ? Opcode::SUB
                                                                               : Opcode::XOR);
                queue_.push_back(PendingInstr{make(op, rd, *r1, *r2), InstrKind::Plain, {}});
                wf.defined |= reg_bit(rd);
            } else {
                queue_.push_back(PendingInstr{
                    make(Opcode::LI, rd, Reg::zero, Reg::zero, 7), InstrKind::Plain, {}});
                wf.defined |= reg_bit(rd);
            }
        } else if (v < 0.78) {
            Reg src = pick_defined(wf).value_or(Reg::zero);
            queue_.push_back(PendingInstr{make(Opcode::SW, Reg::zero, Reg::zero, src,
                                               static_cast<int32_t>(tc_.layout.out_addr)),
                                          InstrKind::Plain, {}});
        } else {
            auto r1 = pick_defined(wf);
            int remaining = f.body_slots - f.slots_done;
            if (r1 && remaining > 4) {
                int skip = 1 + static_cast<int>(rng_.below(3));
                uint32_t t = f.cursor + 4 * (1 + skip);
                Opcode op = rng_.chance(0.5) ? Opcode::BEQ : Opcode::BNE;
                queue_.push_back(PendingInstr{
                    make(op, Reg::zero, *r1, rng_.chance(0.5) ? Reg::zero : *r1, 0, t),
                    InstrKind::Plain, {}});
            } else {
                queue_.push_back(PendingInstr{Instruction{}, InstrKind::Plain, {}});
            }
        }
    }

    void fill_holes() {
        for (auto& f : plans_) {
            if (!f.entry_emitted) continue; // never reached; leave the span empty
            uint32_t end = std::max(f.cursor, f.entry);
            for (uint32_t a = f.entry; a < end; a += 4)
                if (!tc_.code.has(a)) tc_.code.set(a, Instruction{}, InstrKind::Plain);
        }
        // Main's trailer: observable output then halt, if the walk finished
        // inside main without emitting them.
        FunctionPlan& main_f = plans_[0];
        if (main_f.entry_emitted && !tc_.code.has(main_f.cursor) &&
            main_f.cursor + 4 <= main_f.span_end) {
            tc_.code.set(main_f.cursor, Instruction{.op = Opcode::HALT}, InstrKind::Plain);
        }
    }
};

} // namespace

TestCase generate(const GenConfig& cfg, const MicroPolicy& reference_policy) {
    cfg.validate();
    Builder b(cfg, reference_policy);
    return b.build();
}

TestCase generate(const GenConfig& cfg) { return generate(cfg, with_register_protection(make_di())); }

TestCaseStats scan_testcase(const TestCase& tc) {
    TestCaseStats st;
    for (uint32_t addr : tc.annot.annotated_addresses()) {
        for (const SecOp& op : tc.annot.at(addr)) {
            if (op.kind == SecOp::Kind::Call) {
                st.calls++;
                if (!op.stack_args.empty()) st.stack_arg_calls++;
            } else if (op.kind == SecOp::Kind::TailCall) {
                st.tail_calls++;
            } else if (op.kind == SecOp::Kind::Alloc && op.alloc_public) {
                st.public_allocs++;
            }
        }
    }
    st.misbehaviors = static_cast<int>(tc.misbehavior_log.size());
    return st;
}

std::vector<Verdict> run_testcase(const TestCase& tc, const MicroPolicy& pol,
                                  const std::vector<PropId>& props,
                                  const IrrelevanceBudget& budget, ArgRegClass argreg) {
    CombinedState s = make_initial_state(tc, pol, argreg);
    System sys{&pol, &tc.code, &tc.annot};
    return check_run(s, sys, props, budget, Rng(tc.seed).derive(0xc0fFee));
}

namespace {

bool still_fails(const TestCase& tc, PropId failing, const MicroPolicy& pol,
                 const IrrelevanceBudget& budget, ArgRegClass argreg) {
    for (const Verdict& v : run_testcase(tc, pol, {failing}, budget, argreg))
        if (v.outcome == Outcome::Fail) return true;
    return false;
}

int live_instructions(const TestCase& tc) {
    int n = 0;
    for (uint32_t addr : tc.code.addresses())
        if (tc.code.fetch(addr)->instr.op != Opcode::NOP) n++;
    return n;
}

} // namespace

TestCase shrink(const TestCase& tc, PropId failing, const MicroPolicy& pol,
                const IrrelevanceBudget& budget, ArgRegClass argreg) {
    if (!still_fails(tc, failing, pol, budget, argreg))
        throw ConfigError("shrink precondition: the test case does not fail the given property");

    TestCase best = tc;
    bool improved = true;
    while (improved) {
        improved = false;
        std::vector<uint32_t> addrs = best.code.addresses();
        // Truncate the tail first: replace a suffix with a halt.
        for (size_t i = addrs.size(); i-- > 1;) {
            uint32_t cut = addrs[i];
            const TaggedInstruction* ti = best.code.fetch(cut);
            if (ti->instr.op == Opcode::NOP || ti->instr.op == Opcode::HALT) continue;
            TestCase cand = best;
            cand.code.set(cut, Instruction{.op = Opcode::HALT}, InstrKind::Plain);
            cand.annot.clear_at(cut);
            for (size_t j = i + 1; j < addrs.size(); ++j) {
                cand.code.set(addrs[j], Instruction{}, InstrKind::Plain);
                cand.annot.clear_at(addrs[j]);
            }
            if (live_instructions(cand) < live_instructions(best) &&
                still_fails(cand, failing, pol, budget, argreg)) {
                best = std::move(cand);
                improved = true;
                break;
            }
        }
        // Then blank individual instructions.
        addrs = best.code.addresses();
        for (uint32_t addr : addrs) {
            const TaggedInstruction* ti = best.code.fetch(addr);
            if (ti->instr.op == Opcode::NOP) continue;
            TestCase cand = best;
            cand.code.set(addr, Instruction{}, InstrKind::Plain);
            cand.annot.clear_at(addr);
            if (still_fails(cand, failing, pol, budget, argreg)) {
                best = std::move(cand);
                improved = true;
            }
        }
    }
    return best;
}

} // namespace stacksafe
