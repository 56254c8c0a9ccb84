#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "stacksafe/rng.hpp"

namespace stacksafe {

// ---------------------------------------------------------------------------
// Registers and state elements
// ---------------------------------------------------------------------------

enum class Reg : uint8_t {
    zero = 0,
    ra,
    sp,
    a0, a1, a2, a3,   // caller-saved argument registers
    t0, t1, t2, t3,   // caller-saved temporaries
    s0, s1, s2, s3,   // callee-saved
};

inline constexpr int kNumRegs = 15;

const char* reg_name(Reg r);
std::optional<Reg> reg_from_name(const std::string& name);
bool is_callee_saved(Reg r);
bool is_caller_saved(Reg r); // a0-a3 and t0-t3; ra/sp/zero are globally shared

// A state element: the program counter, a register, or one word of data
// memory. Memory is word-addressed; addresses are multiples of 4.
struct Element {
    enum class Kind : uint8_t { PC, Register, MemWord };
    Kind kind;
    uint32_t index; // register number, or byte address for MemWord

    static Element pc() { return {Kind::PC, 0}; }
    static Element reg(Reg r) { return {Kind::Register, static_cast<uint32_t>(r)}; }
    static Element mem(uint32_t addr); // throws on unaligned address

    bool operator==(const Element& o) const { return kind == o.kind && index == o.index; }
    bool operator!=(const Element& o) const { return !(*this == o); }
    bool operator<(const Element& o) const {
        return kind != o.kind ? kind < o.kind : index < o.index;
    }
    std::string to_string() const;
};

// ---------------------------------------------------------------------------
// Tags
// ---------------------------------------------------------------------------

// Metadata tag carried by every value. Opaque to the ISA; only the policy
// layer interprets it. Instr tags live on code image entries, PCColor is
// tracked as the current color in the policy state.
struct PolicyTag {
    enum class Kind : uint8_t { None, Unused, Cell, PCColor, Instr, RegOwned };
    Kind kind = Kind::None;
    uint32_t color = 0; // Cell/PCColor/RegOwned color, or InstrKind for Instr

    static PolicyTag none() { return {Kind::None, 0}; }
    static PolicyTag unused() { return {Kind::Unused, 0}; }
    static PolicyTag cell(uint32_t c) { return {Kind::Cell, c}; }
    static PolicyTag reg_owned(uint32_t c) { return {Kind::RegOwned, c}; }

    bool operator==(const PolicyTag& o) const { return kind == o.kind && color == o.color; }
    bool operator!=(const PolicyTag& o) const { return !(*this == o); }
    std::string to_string() const;
};

struct Value {
    uint32_t payload = 0;
    PolicyTag tag;

    bool operator==(const Value& o) const { return payload == o.payload && tag == o.tag; }
};

// ---------------------------------------------------------------------------
// Instructions
// ---------------------------------------------------------------------------

enum class Opcode : uint8_t {
    ADD, SUB, AND, OR, XOR, ADDI, LI, MOV, LW, SW, JAL, JALR, BEQ, BNE, J, NOP, HALT,
};

const char* opcode_name(Opcode op);

// Blessed-sequence role of an instruction, consumed by micro-policies.
enum class InstrKind : uint8_t { Plain, Call, Header1, Header2, Return1, Return2, Return3 };

const char* instr_kind_name(InstrKind k);
std::optional<InstrKind> instr_kind_from_name(const std::string& name);

struct Instruction {
    Opcode op = Opcode::NOP;
    Reg rd = Reg::zero;
    Reg rs1 = Reg::zero;
    Reg rs2 = Reg::zero;
    int32_t imm = 0;      // ADDI/LI immediate, LW/SW offset, JALR offset
    uint32_t target = 0;  // absolute code target for JAL/J/BEQ/BNE

    std::string to_string() const;
};

struct TaggedInstruction {
    Instruction instr;
    InstrKind kind = InstrKind::Plain;
};

// ---------------------------------------------------------------------------
// Memory layout and code image
// ---------------------------------------------------------------------------

struct Region {
    uint32_t base = 0;
    uint32_t size = 0; // bytes; [base, base+size)

    bool contains(uint32_t addr) const { return addr >= base && addr < base + size; }
    bool overlaps(const Region& o) const {
        return size != 0 && o.size != 0 && base < o.base + o.size && o.base < base + size;
    }
    uint32_t words() const { return size / 4; }
};

struct Layout {
    Region code;
    Region stack;
    Region globals;
    uint32_t out_addr = 0; // must lie in the globals region

    void validate() const; // throws std::runtime_error on bad layouts
    bool operator==(const Layout& o) const;
};

// Symbolic code image: one instruction per word-aligned address in the code
// region. Encoding fidelity is out of scope; decode failure means "no entry".
class CodeImage {
public:
    CodeImage() = default;
    explicit CodeImage(Region code_region) : region_(code_region) {
        slots_.resize(region_.words());
    }

    Region region() const { return region_; }
    void set(uint32_t addr, Instruction ins, InstrKind kind = InstrKind::Plain);
    const TaggedInstruction* fetch(uint32_t addr) const; // nullptr on decode failure
    bool has(uint32_t addr) const { return fetch(addr) != nullptr; }
    std::vector<uint32_t> addresses() const;

private:
    Region region_;
    std::vector<std::optional<TaggedInstruction>> slots_;
};

// ---------------------------------------------------------------------------
// Machine state
// ---------------------------------------------------------------------------

// Observable event: a store to the OUT address. Everything else is silent.
using Event = std::optional<uint32_t>;
inline constexpr std::nullopt_t kSilent = std::nullopt;

// Total map from state elements to tagged values, plus the layout that
// defines which memory words exist. Data memory covers the stack and globals
// regions; the code region is held symbolically in CodeImage, so loads and
// stores that hit it are out-of-region accesses.
class MachineState {
public:
    MachineState() = default;
    explicit MachineState(const Layout& layout);

    const Layout& layout() const { return layout_; }

    uint32_t pc() const { return pc_; }
    void set_pc(uint32_t v) { pc_ = v; }

    bool halted() const { return halted_; }
    void set_halted(bool h) { halted_ = h; }

    const Value& reg(Reg r) const { return regs_[static_cast<int>(r)]; }
    void set_reg(Reg r, uint32_t payload); // writes to zero are discarded
    void set_reg_tag(Reg r, PolicyTag tag); // zero keeps tag None

    bool is_data_addr(uint32_t addr) const;
    const Value& mem(uint32_t addr) const; // pre: is_data_addr
    void set_mem(uint32_t addr, uint32_t payload);
    void set_mem_tag(uint32_t addr, PolicyTag tag);

    Value get(const Element& e) const; // pc is exposed as a payload-only value

    // Dense element indexing: pc, registers, stack words, global words.
    int num_elements() const { return n_elements_; }
    int element_index(const Element& e) const; // -1 if not an element
    Element element_at(int idx) const;

    bool operator==(const MachineState& o) const;

private:
    Layout layout_;
    uint32_t pc_ = 0;
    bool halted_ = false;
    std::array<Value, kNumRegs> regs_{};
    std::vector<Value> stack_;
    std::vector<Value> globals_;
    int n_elements_ = 0;

    Value* mem_slot(uint32_t addr);
    const Value* mem_slot(uint32_t addr) const;
    friend class ElementSet;
};

// Set of state elements over a fixed layout, as a bitset in dense index
// space. The workhorse for difference sets, class queries and corrupted sets.
class ElementSet {
public:
    ElementSet() = default;
    explicit ElementSet(int n_elements) : n_(n_elements), bits_((n_elements + 63) / 64, 0) {}

    int universe_size() const { return n_; }
    bool empty() const;
    int count() const;
    bool test(int idx) const { return (bits_[idx >> 6] >> (idx & 63)) & 1; }
    void set(int idx) { bits_[idx >> 6] |= (1ull << (idx & 63)); }
    void reset(int idx) { bits_[idx >> 6] &= ~(1ull << (idx & 63)); }

    ElementSet& operator|=(const ElementSet& o);
    ElementSet& operator&=(const ElementSet& o);
    ElementSet& operator-=(const ElementSet& o);
    bool operator==(const ElementSet& o) const { return bits_ == o.bits_; }
    bool subset_of(const ElementSet& o) const;

    std::vector<int> indices() const;
    std::vector<Element> elements(const MachineState& ref) const;

private:
    int n_ = 0;
    std::vector<uint64_t> bits_;
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

struct StepOutput {
    Event event = kSilent;
};

// Standard ISA successor. Decode failure, out-of-region or unaligned data
// access put the machine into a halted self-loop that emits silent events.
StepOutput raw_step(MachineState& m, const CodeImage& code);

// Elements whose payloads differ. Tags are ignored here; tag differences are
// a compatibility matter.
ElementSet diff_set(const MachineState& m, const MachineState& n);

// True iff tags agree at every element.
bool compatible(const MachineState& m, const MachineState& n);

// Builds a K-variant of m: every element of K except the pc and the zero
// register is independently resampled over 32-bit words, or kept with
// probability 1/4 so that strict subsets of K get exercised. Tags are
// preserved everywhere.
MachineState k_variant(const MachineState& m, const ElementSet& k, Rng& rng);

// ---------------------------------------------------------------------------
// Assembly text format
// ---------------------------------------------------------------------------
//
//   # comment
//   .code 0
//   .stack 512 488            # base size
//   .out 1004
//   .reg a0 5                 # optional initial register payload
//   0: ADDI sp, sp, -20       # @tag:h1
//   16: JAL ra, 100           # @tag:call
//   40: SW a0, out            # sugar for SW a0, <out>(zero)
//
// `@tag:` comments carry the blessed-sequence kind (plain, call, h1, h2,
// r1, r2, r3); untagged lines are plain. The loader rejects overlapping
// regions, unaligned addresses and instructions outside the code region.

struct Program {
    Layout layout;
    CodeImage code;
    MachineState initial; // pc at first instruction, sp at top of stack
    std::vector<Reg> entry_args;
};

Program load_assembly(const std::string& text);
std::string write_assembly(const Program& p);

} // namespace stacksafe
