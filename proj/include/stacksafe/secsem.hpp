#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "stacksafe/machine.hpp"
#include "stacksafe/policy.hpp"

namespace stacksafe {

// Raised when an operation is applied in an impossible context (return with
// no pending frame, and similar). Such test cases are rejected, they are not
// property violations.
struct ContextError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class SecurityClass : uint8_t { Public, Active, Sealed, Free };

const char* security_class_name(SecurityClass c);

// A view maps every state element to a security class. The code region and
// globals (including OUT) are public in every reachable view; the pc, sp, ra
// and zero registers are globally shared and stay public as well.
class View {
public:
    View() = default;
    explicit View(const MachineState& ref);

    SecurityClass at(int element_index) const {
        return static_cast<SecurityClass>(classes_[element_index]);
    }
    SecurityClass at(const MachineState& ref, const Element& e) const;
    void set(int element_index, SecurityClass c) {
        classes_[element_index] = static_cast<uint8_t>(c);
    }

    // l(V): the set of elements carrying class l.
    ElementSet with_class(SecurityClass c) const;
    int size() const { return static_cast<int>(classes_.size()); }

    bool operator==(const View& o) const { return classes_ == o.classes_; }
    bool operator!=(const View& o) const { return !(*this == o); }

    // Canonical text form, register classes plus run-length coded stack
    // classes. Used where exact view equality must be reported.
    std::string serialize(const MachineState& ref) const;

private:
    std::vector<uint8_t> classes_;
};

struct PendingFrame {
    View view;
    uint32_t ret_target = 0;
    uint32_t sp_target = 0;

    bool operator==(const PendingFrame&) const = default;
};

// Half-open word range owned through a capability; absence means "no
// capability" in the provenance map.
struct ProvRegion {
    uint32_t base = 0;
    uint32_t bound = 0;

    bool operator==(const ProvRegion&) const = default;
};

enum class ArgRegClass : uint8_t { Public, Active };

struct SecurityContext {
    View current;
    std::vector<PendingFrame> pending;
    bool prov_enabled = false;
    std::map<int, ProvRegion> prov; // keyed by dense element index
    ArgRegClass argreg_class = ArgRegClass::Public;

    size_t depth() const { return pending.size(); }
    bool operator==(const SecurityContext&) const = default;
};

// Initial context: stack free, globals and code public, callee-saved
// registers sealed, entry argument registers active, other caller-saved
// free; sp, ra, pc and zero are globally shared (public).
SecurityContext initial_context(const MachineState& ref, const std::vector<Reg>& entry_args,
                                bool prov_enabled = false,
                                ArgRegClass argreg_class = ArgRegClass::Public);

// ---------------------------------------------------------------------------
// Security-relevant operations
// ---------------------------------------------------------------------------

struct StackArg {
    Reg base = Reg::sp;
    int32_t off = 0;
    uint32_t size = 0; // bytes

    bool operator==(const StackArg&) const = default;
};

struct SecOp {
    enum class Kind : uint8_t { Call, TailCall, Return, Alloc, Dealloc, Promote, Propagate, Clear };
    Kind kind = Kind::Return;

    // call / tail call
    uint32_t target = 0;
    std::vector<Reg> arg_regs;
    std::vector<StackArg> stack_args;
    // alloc / dealloc / promote
    bool alloc_public = false;
    int32_t off = 0;
    uint32_t size = 0;
    // promote
    Reg prom_dst = Reg::zero;
    Reg prom_base = Reg::zero;
    // propagate / clear
    Element src = Element::pc();
    Element dst = Element::pc();

    static SecOp call(uint32_t target, std::vector<Reg> args = {}, std::vector<StackArg> sa = {});
    static SecOp tail_call(uint32_t target, std::vector<Reg> args = {}, std::vector<StackArg> sa = {});
    static SecOp ret();
    static SecOp alloc(bool is_public, int32_t off, uint32_t size);
    static SecOp dealloc(int32_t off, uint32_t size);
    static SecOp promote(Reg dst, Reg base, int32_t off, uint32_t size);
    static SecOp propagate(Element src, Element dst);
    static SecOp clear(Element k);

    bool is_call_target() const { return kind == Kind::Call || kind == Kind::TailCall; }
    std::string to_string() const;
    bool operator==(const SecOp&) const = default;
};

// passed(sa, m): union of the argument word ranges, evaluated against the
// pre-step machine state. Words outside the data regions are dropped.
ElementSet passed_set(const std::vector<StackArg>& stack_args, const MachineState& m);

// capped(K, rho): least fixed point of K under "add every word of a region
// reachable through a capability already in the set".
ElementSet capped_set(const ElementSet& roots, const SecurityContext& c, const MachineState& ref);

// One operation's effect on the context. Pure in the machine state: m is
// only read, and it is the state before the step carrying the operation.
SecurityContext apply_op(const MachineState& m, const SecurityContext& c, const SecOp& op);

// ---------------------------------------------------------------------------
// Annotations and the combined step
// ---------------------------------------------------------------------------

// Instruction address -> list of security-relevant operations. Addresses
// without an entry carry the empty list.
class AnnotationMap {
public:
    AnnotationMap() = default;
    explicit AnnotationMap(Region code_region) : region_(code_region) {
        ops_.resize(region_.words());
    }

    Region region() const { return region_; }
    void add(uint32_t addr, SecOp op);
    void clear_at(uint32_t addr);
    const std::vector<SecOp>& at(uint32_t addr) const;
    std::vector<uint32_t> annotated_addresses() const;

    // Every annotated address must decode to an instruction.
    void cross_check(const CodeImage& code) const;

private:
    Region region_;
    std::vector<std::vector<SecOp>> ops_;
    static const std::vector<SecOp> kEmpty;
};

// Text format: one op per line, `ADDR: op(args)`, '#' comments; multiple
// lines per address accumulate in file order.
AnnotationMap parse_annotations(const std::string& text, Region code_region);
std::string write_annotations(const AnnotationMap& a);

struct CombinedState {
    MachineState m;
    PolicyState ps;
    SecurityContext ctx;

    size_t depth() const { return ctx.depth(); }
};

struct CombinedStepOutput {
    Event event = kSilent;
    bool failstopped = false;
    const std::vector<SecOp>* ops = nullptr; // ops applied this step (empty if failstopped)
};

// Lifted transition: the guarded machine step plus a left fold of the
// instruction's annotated operations over the context, using the machine
// state from before the step. On failstop the context is unchanged.
CombinedStepOutput combined_step(CombinedState& s, const MicroPolicy& pol, const CodeImage& code,
                                 const AnnotationMap& annot);

} // namespace stacksafe
