#include "stacksafe/machine.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

namespace stacksafe {

namespace {

const char* kRegNames[kNumRegs] = {
    "zero", "ra", "sp", "a0", "a1", "a2", "a3",
    "t0", "t1", "t2", "t3", "s0", "s1", "s2", "s3",
};

const char* kOpcodeNames[] = {
    "ADD", "SUB", "AND", "OR", "XOR", "ADDI", "LI", "MOV", "LW", "SW",
    "JAL", "JALR", "BEQ", "BNE", "J", "NOP", "HALT",
};

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

} // namespace

const char* reg_name(Reg r) { return kRegNames[static_cast<int>(r)]; }

std::optional<Reg> reg_from_name(const std::string& name) {
    for (int i = 0; i < kNumRegs; ++i) {
        if (name == kRegNames[i]) return static_cast<Reg>(i);
    }
    return std::nullopt;
}

bool is_callee_saved(Reg r) { return r >= Reg::s0 && r <= Reg::s3; }

bool is_caller_saved(Reg r) { return r >= Reg::a0 && r <= Reg::t3; }

Element Element::mem(uint32_t addr) {
    if (addr % 4 != 0) fail("unaligned memory element address " + std::to_string(addr));
    return {Kind::MemWord, addr};
}

std::string Element::to_string() const {
    switch (kind) {
    case Kind::PC: return "pc";
    case Kind::Register: return kRegNames[index];
    case Kind::MemWord: return "[" + std::to_string(index) + "]";
    }
    return "?";
}

std::string PolicyTag::to_string() const {
    switch (kind) {
    case Kind::None: return "-";
    case Kind::Unused: return "unused";
    case Kind::Cell: return "cell(" + std::to_string(color) + ")";
    case Kind::PCColor: return "pccolor(" + std::to_string(color) + ")";
    case Kind::Instr: return std::string("instr(") + instr_kind_name(static_cast<InstrKind>(color)) + ")";
    case Kind::RegOwned: return "regowned(" + std::to_string(color) + ")";
    }
    return "?";
}

const char* opcode_name(Opcode op) { return kOpcodeNames[static_cast<int>(op)]; }

const char* instr_kind_name(InstrKind k) {
    switch (k) {
    case InstrKind::Plain: return "plain";
    case InstrKind::Call: return "call";
    case InstrKind::Header1: return "h1";
    case InstrKind::Header2: return "h2";
    case InstrKind::Return1: return "r1";
    case InstrKind::Return2: return "r2";
    case InstrKind::Return3: return "r3";
    }
    return "?";
}

std::optional<InstrKind> instr_kind_from_name(const std::string& name) {
    for (InstrKind k : {InstrKind::Plain, InstrKind::Call, InstrKind::Header1, InstrKind::Header2,
                        InstrKind::Return1, InstrKind::Return2, InstrKind::Return3}) {
        if (name == instr_kind_name(k)) return k;
    }
    return std::nullopt;
}

std::string Instruction::to_string() const {
    std::ostringstream os;
    os << opcode_name(op);
    switch (op) {
    case Opcode::ADD: case Opcode::SUB: case Opcode::AND: case Opcode::OR: case Opcode::XOR:
        os << " " << reg_name(rd) << ", " << reg_name(rs1) << ", " << reg_name(rs2);
        break;
    case Opcode::ADDI:
        os << " " << reg_name(rd) << ", " << reg_name(rs1) << ", " << imm;
        break;
    case Opcode::LI:
        os << " " << reg_name(rd) << ", " << imm;
        break;
    case Opcode::MOV:
        os << " " << reg_name(rd) << ", " << reg_name(rs1);
        break;
    case Opcode::LW:
        os << " " << reg_name(rd) << ", " << imm << "(" << reg_name(rs1) << ")";
        break;
    case Opcode::SW:
        os << " " << reg_name(rs2) << ", " << imm << "(" << reg_name(rs1) << ")";
        break;
    case Opcode::JAL:
        os << " " << reg_name(rd) << ", " << target;
        break;
    case Opcode::JALR:
        os << " " << reg_name(rd) << ", " << reg_name(rs1) << ", " << imm;
        break;
    case Opcode::BEQ: case Opcode::BNE:
        os << " " << reg_name(rs1) << ", " << reg_name(rs2) << ", " << target;
        break;
    case Opcode::J:
        os << " " << target;
        break;
    case Opcode::NOP: case Opcode::HALT:
        break;
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Layout / code image
// ---------------------------------------------------------------------------

void Layout::validate() const {
    auto check_region = [](const char* name, const Region& r) {
        if (r.size == 0) fail(std::string(name) + " region is empty");
        if (r.base % 4 != 0 || r.size % 4 != 0)
            fail(std::string(name) + " region is not word-aligned");
        if (r.base + r.size < r.base) fail(std::string(name) + " region wraps");
    };
    check_region("code", code);
    check_region("stack", stack);
    check_region("globals", globals);
    if (code.overlaps(stack) || code.overlaps(globals) || stack.overlaps(globals))
        fail("memory regions overlap");
    if (out_addr % 4 != 0 || !globals.contains(out_addr))
        fail("OUT address must be a word address inside the globals region");
}

bool Layout::operator==(const Layout& o) const {
    return code.base == o.code.base && code.size == o.code.size &&
           stack.base == o.stack.base && stack.size == o.stack.size &&
           globals.base == o.globals.base && globals.size == o.globals.size &&
           out_addr == o.out_addr;
}

void CodeImage::set(uint32_t addr, Instruction ins, InstrKind kind) {
    if (addr % 4 != 0) fail("unaligned instruction address " + std::to_string(addr));
    if (!region_.contains(addr)) fail("instruction outside code region at " + std::to_string(addr));
    slots_[(addr - region_.base) / 4] = TaggedInstruction{ins, kind};
}

const TaggedInstruction* CodeImage::fetch(uint32_t addr) const {
    if (addr % 4 != 0 || !region_.contains(addr)) return nullptr;
    const auto& slot = slots_[(addr - region_.base) / 4];
    return slot ? &*slot : nullptr;
}

std::vector<uint32_t> CodeImage::addresses() const {
    std::vector<uint32_t> out;
    for (size_t i = 0; i < slots_.size(); ++i) {
        if (slots_[i]) out.push_back(region_.base + 4 * static_cast<uint32_t>(i));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Machine state
// ---------------------------------------------------------------------------

MachineState::MachineState(const Layout& layout) : layout_(layout) {
    layout_.validate();
    stack_.resize(layout_.stack.words());
    globals_.resize(layout_.globals.words());
    n_elements_ = 1 + kNumRegs + static_cast<int>(stack_.size() + globals_.size());
}

void MachineState::set_reg(Reg r, uint32_t payload) {
    if (r == Reg::zero) return;
    regs_[static_cast<int>(r)].payload = payload;
}

void MachineState::set_reg_tag(Reg r, PolicyTag tag) {
    if (r == Reg::zero) return;
    regs_[static_cast<int>(r)].tag = tag;
}

bool MachineState::is_data_addr(uint32_t addr) const {
    return addr % 4 == 0 && (layout_.stack.contains(addr) || layout_.globals.contains(addr));
}

Value* MachineState::mem_slot(uint32_t addr) {
    if (addr % 4 != 0) return nullptr;
    if (layout_.stack.contains(addr)) return &stack_[(addr - layout_.stack.base) / 4];
    if (layout_.globals.contains(addr)) return &globals_[(addr - layout_.globals.base) / 4];
    return nullptr;
}

const Value* MachineState::mem_slot(uint32_t addr) const {
    return const_cast<MachineState*>(this)->mem_slot(addr);
}

const Value& MachineState::mem(uint32_t addr) const {
    const Value* v = mem_slot(addr);
    if (!v) fail("memory access outside data regions at " + std::to_string(addr));
    return *v;
}

void MachineState::set_mem(uint32_t addr, uint32_t payload) {
    Value* v = mem_slot(addr);
    if (!v) fail("memory write outside data regions at " + std::to_string(addr));
    v->payload = payload;
}

void MachineState::set_mem_tag(uint32_t addr, PolicyTag tag) {
    Value* v = mem_slot(addr);
    if (!v) fail("memory tag write outside data regions at " + std::to_string(addr));
    v->tag = tag;
}

Value MachineState::get(const Element& e) const {
    switch (e.kind) {
    case Element::Kind::PC:
        return Value{pc_, PolicyTag::none()};
    case Element::Kind::Register:
        return regs_[e.index];
    case Element::Kind::MemWord:
        return mem(e.index);
    }
    return Value{};
}

int MachineState::element_index(const Element& e) const {
    switch (e.kind) {
    case Element::Kind::PC:
        return 0;
    case Element::Kind::Register:
        return 1 + static_cast<int>(e.index);
    case Element::Kind::MemWord: {
        uint32_t a = e.index;
        if (a % 4 != 0) return -1;
        if (layout_.stack.contains(a)) return 1 + kNumRegs + static_cast<int>((a - layout_.stack.base) / 4);
        if (layout_.globals.contains(a))
            return 1 + kNumRegs + static_cast<int>(stack_.size()) +
                   static_cast<int>((a - layout_.globals.base) / 4);
        return -1;
    }
    }
    return -1;
}

Element MachineState::element_at(int idx) const {
    if (idx == 0) return Element::pc();
    idx -= 1;
    if (idx < kNumRegs) return Element::reg(static_cast<Reg>(idx));
    idx -= kNumRegs;
    if (idx < static_cast<int>(stack_.size()))
        return Element::mem(layout_.stack.base + 4 * static_cast<uint32_t>(idx));
    idx -= static_cast<int>(stack_.size());
    return Element::mem(layout_.globals.base + 4 * static_cast<uint32_t>(idx));
}

bool MachineState::operator==(const MachineState& o) const {
    return layout_ == o.layout_ && pc_ == o.pc_ && halted_ == o.halted_ &&
           regs_ == o.regs_ && stack_ == o.stack_ && globals_ == o.globals_;
}

// ---------------------------------------------------------------------------
// Element sets
// ---------------------------------------------------------------------------

bool ElementSet::empty() const {
    for (uint64_t w : bits_)
        if (w) return false;
    return true;
}

int ElementSet::count() const {
    int c = 0;
    for (uint64_t w : bits_) c += __builtin_popcountll(w);
    return c;
}

ElementSet& ElementSet::operator|=(const ElementSet& o) {
    for (size_t i = 0; i < bits_.size(); ++i) bits_[i] |= o.bits_[i];
    return *this;
}

ElementSet& ElementSet::operator&=(const ElementSet& o) {
    for (size_t i = 0; i < bits_.size(); ++i) bits_[i] &= o.bits_[i];
    return *this;
}

ElementSet& ElementSet::operator-=(const ElementSet& o) {
    for (size_t i = 0; i < bits_.size(); ++i) bits_[i] &= ~o.bits_[i];
    return *this;
}

bool ElementSet::subset_of(const ElementSet& o) const {
    for (size_t i = 0; i < bits_.size(); ++i)
        if (bits_[i] & ~o.bits_[i]) return false;
    return true;
}

std::vector<int> ElementSet::indices() const {
    std::vector<int> out;
    for (size_t w = 0; w < bits_.size(); ++w) {
        uint64_t word = bits_[w];
        while (word) {
            int b = __builtin_ctzll(word);
            out.push_back(static_cast<int>(w) * 64 + b);
            word &= word - 1;
        }
    }
    return out;
}

std::vector<Element> ElementSet::elements(const MachineState& ref) const {
    std::vector<Element> out;
    for (int idx : indices()) out.push_back(ref.element_at(idx));
    return out;
}

// ---------------------------------------------------------------------------
// raw_step
// ---------------------------------------------------------------------------

StepOutput raw_step(MachineState& m, const CodeImage& code) {
    StepOutput out;
    if (m.halted()) return out; // self-loop, silent

    const TaggedInstruction* ti = code.fetch(m.pc());
    if (!ti) {
        m.set_halted(true);
        return out;
    }
    const Instruction& ins = ti->instr;
    uint32_t next_pc = m.pc() + 4;

    auto halt = [&] { m.set_halted(true); };

    switch (ins.op) {
    case Opcode::ADD:
        m.set_reg(ins.rd, m.reg(ins.rs1).payload + m.reg(ins.rs2).payload);
        break;
    case Opcode::SUB:
        m.set_reg(ins.rd, m.reg(ins.rs1).payload - m.reg(ins.rs2).payload);
        break;
    case Opcode::AND:
        m.set_reg(ins.rd, m.reg(ins.rs1).payload & m.reg(ins.rs2).payload);
        break;
    case Opcode::OR:
        m.set_reg(ins.rd, m.reg(ins.rs1).payload | m.reg(ins.rs2).payload);
        break;
    case Opcode::XOR:
        m.set_reg(ins.rd, m.reg(ins.rs1).payload ^ m.reg(ins.rs2).payload);
        break;
    case Opcode::ADDI:
        m.set_reg(ins.rd, m.reg(ins.rs1).payload + static_cast<uint32_t>(ins.imm));
        break;
    case Opcode::LI:
        m.set_reg(ins.rd, static_cast<uint32_t>(ins.imm));
        break;
    case Opcode::MOV:
        m.set_reg(ins.rd, m.reg(ins.rs1).payload);
        break;
    case Opcode::LW: {
        uint32_t addr = m.reg(ins.rs1).payload + static_cast<uint32_t>(ins.imm);
        if (!m.is_data_addr(addr)) { halt(); return out; }
        m.set_reg(ins.rd, m.mem(addr).payload);
        break;
    }
    case Opcode::SW: {
        uint32_t addr = m.reg(ins.rs1).payload + static_cast<uint32_t>(ins.imm);
        if (!m.is_data_addr(addr)) { halt(); return out; }
        uint32_t v = m.reg(ins.rs2).payload;
        m.set_mem(addr, v);
        if (addr == m.layout().out_addr) out.event = v;
        break;
    }
    case Opcode::JAL:
        m.set_reg(ins.rd, m.pc() + 4);
        next_pc = ins.target;
        break;
    case Opcode::JALR: {
        uint32_t t = m.reg(ins.rs1).payload + static_cast<uint32_t>(ins.imm);
        m.set_reg(ins.rd, m.pc() + 4);
        next_pc = t;
        break;
    }
    case Opcode::BEQ:
        if (m.reg(ins.rs1).payload == m.reg(ins.rs2).payload) next_pc = ins.target;
        break;
    case Opcode::BNE:
        if (m.reg(ins.rs1).payload != m.reg(ins.rs2).payload) next_pc = ins.target;
        break;
    case Opcode::J:
        next_pc = ins.target;
        break;
    case Opcode::NOP:
        break;
    case Opcode::HALT:
        halt();
        return out;
    }
    m.set_pc(next_pc);
    return out;
}

// ---------------------------------------------------------------------------
// diff / compatibility / variants
// ---------------------------------------------------------------------------

ElementSet diff_set(const MachineState& m, const MachineState& n) {
    if (!(m.layout() == n.layout())) fail("diff_set: layouts differ");
    ElementSet out(m.num_elements());
    if (m.pc() != n.pc()) out.set(0);
    for (int r = 0; r < kNumRegs; ++r) {
        if (m.reg(static_cast<Reg>(r)).payload != n.reg(static_cast<Reg>(r)).payload)
            out.set(1 + r);
    }
    int idx = 1 + kNumRegs;
    const Layout& lay = m.layout();
    for (uint32_t a = lay.stack.base; a < lay.stack.base + lay.stack.size; a += 4, ++idx) {
        if (m.mem(a).payload != n.mem(a).payload) out.set(idx);
    }
    for (uint32_t a = lay.globals.base; a < lay.globals.base + lay.globals.size; a += 4, ++idx) {
        if (m.mem(a).payload != n.mem(a).payload) out.set(idx);
    }
    return out;
}

bool compatible(const MachineState& m, const MachineState& n) {
    if (!(m.layout() == n.layout())) fail("compatible: layouts differ");
    for (int r = 0; r < kNumRegs; ++r) {
        if (m.reg(static_cast<Reg>(r)).tag != n.reg(static_cast<Reg>(r)).tag) return false;
    }
    const Layout& lay = m.layout();
    for (uint32_t a = lay.stack.base; a < lay.stack.base + lay.stack.size; a += 4)
        if (m.mem(a).tag != n.mem(a).tag) return false;
    for (uint32_t a = lay.globals.base; a < lay.globals.base + lay.globals.size; a += 4)
        if (m.mem(a).tag != n.mem(a).tag) return false;
    return true;
}

MachineState k_variant(const MachineState& m, const ElementSet& k, Rng& rng) {
    MachineState n = m;
    for (int idx : k.indices()) {
        Element e = m.element_at(idx);
        if (e.kind == Element::Kind::PC) continue;
        if (e.kind == Element::Kind::Register && static_cast<Reg>(e.index) == Reg::zero) continue;
        bool keep = rng.chance(0.25);
        uint32_t v = rng.next_u32();
        if (keep) continue;
        if (e.kind == Element::Kind::Register) {
            n.set_reg(static_cast<Reg>(e.index), v);
        } else {
            n.set_mem(e.index, v);
        }
    }
    return n;
}

// ---------------------------------------------------------------------------
// Assembly text
// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_operands(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
    return out;
}

Reg parse_reg(const std::string& s, int line_no) {
    auto r = reg_from_name(s);
    if (!r) fail("line " + std::to_string(line_no) + ": unknown register '" + s + "'");
    return *r;
}

int64_t parse_int(const std::string& s, int line_no) {
    try {
        size_t pos = 0;
        long long v = std::stoll(s, &pos, 0);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (...) {
        fail("line " + std::to_string(line_no) + ": bad integer '" + s + "'");
    }
}

// "imm(reg)" or "out"
void parse_mem_operand(const std::string& s, int line_no, uint32_t out_addr, bool have_out,
                       int32_t& imm, Reg& base) {
    if (s == "out") {
        if (!have_out) fail("line " + std::to_string(line_no) + ": 'out' used before .out");
        imm = static_cast<int32_t>(out_addr);
        base = Reg::zero;
        return;
    }
    size_t lp = s.find('(');
    size_t rp = s.rfind(')');
    if (lp == std::string::npos || rp == std::string::npos || rp < lp)
        fail("line " + std::to_string(line_no) + ": expected 'imm(reg)' in '" + s + "'");
    imm = static_cast<int32_t>(parse_int(trim(s.substr(0, lp)), line_no));
    base = parse_reg(trim(s.substr(lp + 1, rp - lp - 1)), line_no);
}

std::optional<Opcode> opcode_from_name(const std::string& name) {
    for (int i = 0; i <= static_cast<int>(Opcode::HALT); ++i) {
        if (name == kOpcodeNames[i]) return static_cast<Opcode>(i);
    }
    return std::nullopt;
}

} // namespace

Program load_assembly(const std::string& text) {
    struct Line {
        uint32_t addr;
        Instruction ins;
        InstrKind kind;
    };
    std::vector<Line> lines;
    std::vector<std::pair<Reg, uint32_t>> reg_inits;
    std::vector<Reg> entry_args;
    Layout layout{};
    bool have_code = false, have_stack = false, have_out = false;

    std::istringstream in(text);
    std::string raw;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        InstrKind kind = InstrKind::Plain;
        std::string line = raw;
        size_t hash = line.find('#');
        if (hash != std::string::npos) {
            std::string comment = line.substr(hash + 1);
            size_t at = comment.find("@tag:");
            if (at != std::string::npos) {
                std::string tag = trim(comment.substr(at + 5));
                size_t sp = tag.find_first_of(" \t");
                if (sp != std::string::npos) tag = tag.substr(0, sp);
                auto k = instr_kind_from_name(tag);
                if (!k) fail("line " + std::to_string(line_no) + ": unknown @tag '" + tag + "'");
                kind = *k;
            }
            line = line.substr(0, hash);
        }
        line = trim(line);
        if (line.empty()) continue;

        if (line[0] == '.') {
            std::istringstream ls(line);
            std::string dir;
            ls >> dir;
            if (dir == ".code") {
                uint32_t base;
                if (!(ls >> base)) fail("line " + std::to_string(line_no) + ": .code BASE");
                layout.code.base = base;
                have_code = true;
            } else if (dir == ".stack") {
                uint32_t base, size;
                if (!(ls >> base >> size)) fail("line " + std::to_string(line_no) + ": .stack BASE SIZE");
                layout.stack = {base, size};
                have_stack = true;
            } else if (dir == ".out") {
                uint32_t addr;
                if (!(ls >> addr)) fail("line " + std::to_string(line_no) + ": .out ADDR");
                layout.out_addr = addr;
                have_out = true;
            } else if (dir == ".globals") {
                uint32_t base, size;
                if (!(ls >> base >> size)) fail("line " + std::to_string(line_no) + ": .globals BASE SIZE");
                layout.globals = {base, size};
            } else if (dir == ".reg") {
                std::string rn;
                int64_t v;
                std::string vs;
                if (!(ls >> rn >> vs)) fail("line " + std::to_string(line_no) + ": .reg NAME VALUE");
                v = parse_int(vs, line_no);
                reg_inits.emplace_back(parse_reg(rn, line_no), static_cast<uint32_t>(v));
            } else if (dir == ".args") {
                std::string rn;
                while (ls >> rn) entry_args.push_back(parse_reg(rn, line_no));
            } else {
                fail("line " + std::to_string(line_no) + ": unknown directive '" + dir + "'");
            }
            continue;
        }

        size_t colon = line.find(':');
        if (colon == std::string::npos)
            fail("line " + std::to_string(line_no) + ": expected 'ADDR: OPCODE ...'");
        uint32_t addr = static_cast<uint32_t>(parse_int(trim(line.substr(0, colon)), line_no));
        std::string rest = trim(line.substr(colon + 1));
        std::istringstream rs(rest);
        std::string opname;
        rs >> opname;
        auto opc = opcode_from_name(opname);
        if (!opc) fail("line " + std::to_string(line_no) + ": unknown opcode '" + opname + "'");
        std::string operands;
        std::getline(rs, operands);
        auto ops = split_operands(trim(operands));
        auto want = [&](size_t n) {
            if (ops.size() != n)
                fail("line " + std::to_string(line_no) + ": " + opname + " expects " +
                     std::to_string(n) + " operands");
        };

        Instruction ins;
        ins.op = *opc;
        switch (*opc) {
        case Opcode::ADD: case Opcode::SUB: case Opcode::AND: case Opcode::OR: case Opcode::XOR:
            want(3);
            ins.rd = parse_reg(ops[0], line_no);
            ins.rs1 = parse_reg(ops[1], line_no);
            ins.rs2 = parse_reg(ops[2], line_no);
            break;
        case Opcode::ADDI:
            want(3);
            ins.rd = parse_reg(ops[0], line_no);
            ins.rs1 = parse_reg(ops[1], line_no);
            ins.imm = static_cast<int32_t>(parse_int(ops[2], line_no));
            break;
        case Opcode::LI:
            want(2);
            ins.rd = parse_reg(ops[0], line_no);
            ins.imm = static_cast<int32_t>(parse_int(ops[1], line_no));
            break;
        case Opcode::MOV:
            want(2);
            ins.rd = parse_reg(ops[0], line_no);
            ins.rs1 = parse_reg(ops[1], line_no);
            break;
        case Opcode::LW:
            want(2);
            ins.rd = parse_reg(ops[0], line_no);
            parse_mem_operand(ops[1], line_no, layout.out_addr, have_out, ins.imm, ins.rs1);
            break;
        case Opcode::SW:
            want(2);
            ins.rs2 = parse_reg(ops[0], line_no);
            parse_mem_operand(ops[1], line_no, layout.out_addr, have_out, ins.imm, ins.rs1);
            break;
        case Opcode::JAL:
            want(2);
            ins.rd = parse_reg(ops[0], line_no);
            ins.target = static_cast<uint32_t>(parse_int(ops[1], line_no));
            break;
        case Opcode::JALR:
            if (ops.size() == 1) {
                ins.rd = Reg::zero;
                ins.rs1 = parse_reg(ops[0], line_no);
                ins.imm = 0;
            } else {
                want(3);
                ins.rd = parse_reg(ops[0], line_no);
                ins.rs1 = parse_reg(ops[1], line_no);
                ins.imm = static_cast<int32_t>(parse_int(ops[2], line_no));
            }
            break;
        case Opcode::BEQ: case Opcode::BNE:
            want(3);
            ins.rs1 = parse_reg(ops[0], line_no);
            ins.rs2 = parse_reg(ops[1], line_no);
            ins.target = static_cast<uint32_t>(parse_int(ops[2], line_no));
            break;
        case Opcode::J:
            want(1);
            ins.target = static_cast<uint32_t>(parse_int(ops[0], line_no));
            break;
        case Opcode::NOP: case Opcode::HALT:
            want(0);
            break;
        }
        lines.push_back({addr, ins, kind});
    }

    if (!have_code || !have_stack || !have_out)
        fail("assembly must declare .code, .stack and .out");
    if (lines.empty()) fail("assembly contains no instructions");
    if (layout.globals.size == 0) {
        // default: one word at the OUT address
        layout.globals = {layout.out_addr, 4};
    }
    uint32_t max_addr = 0;
    for (const auto& l : lines) max_addr = std::max(max_addr, l.addr);
    layout.code.size = max_addr + 4 - layout.code.base;
    layout.validate();

    Program p{layout, CodeImage(layout.code), MachineState(layout), entry_args};
    for (const auto& l : lines) {
        if (p.code.has(l.addr)) fail("duplicate instruction at address " + std::to_string(l.addr));
        p.code.set(l.addr, l.ins, l.kind);
    }
    uint32_t entry = lines.front().addr;
    for (const auto& l : lines) entry = std::min(entry, l.addr);
    p.initial.set_pc(entry);
    p.initial.set_reg(Reg::sp, layout.stack.base + layout.stack.size);
    for (auto [r, v] : reg_inits) p.initial.set_reg(r, v);
    return p;
}

std::string write_assembly(const Program& p) {
    std::ostringstream os;
    os << ".code " << p.layout.code.base << "\n";
    os << ".stack " << p.layout.stack.base << " " << p.layout.stack.size << "\n";
    os << ".globals " << p.layout.globals.base << " " << p.layout.globals.size << "\n";
    os << ".out " << p.layout.out_addr << "\n";
    if (!p.entry_args.empty()) {
        os << ".args";
        for (Reg r : p.entry_args) os << " " << reg_name(r);
        os << "\n";
    }
    for (int r = 1; r < kNumRegs; ++r) {
        Reg reg = static_cast<Reg>(r);
        if (reg == Reg::sp) continue; // implied by the stack region
        uint32_t v = p.initial.reg(reg).payload;
        if (v != 0) os << ".reg " << reg_name(reg) << " " << v << "\n";
    }
    for (uint32_t addr : p.code.addresses()) {
        const TaggedInstruction* ti = p.code.fetch(addr);
        os << addr << ": " << ti->instr.to_string();
        if (ti->kind != InstrKind::Plain) os << "  # @tag:" << instr_kind_name(ti->kind);
        os << "\n";
    }
    return os.str();
}

} // namespace stacksafe
