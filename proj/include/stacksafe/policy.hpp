#pragma once

#include <optional>
#include <string>
#include <vector>

#include "stacksafe/machine.hpp"

namespace stacksafe {

// Raised for bad policy selectors, unknown mutants and similar setup errors.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One live activation as seen by the monitor. The record stack is what lets
// the fresh-color LTC restore the caller's color on return, pins the blessed
// exit to the real saved-ra slot even when sp was tampered with, and tracks
// which caller-frame words were opened as a read-only argument window.
struct ActivationRecord {
    uint32_t color = 0;
    uint32_t frame_base = 0;
    uint32_t frame_bytes = 0;
    uint32_t ra_slot = 0;
    bool ra_slot_set = false;
    std::vector<uint32_t> arg_window;

    bool in_frame(uint32_t addr) const {
        return addr >= frame_base && addr < frame_base + frame_bytes;
    }
    bool operator==(const ActivationRecord&) const = default;
};

struct PolicyState {
    uint32_t current_color = 0; // conceptually the PC tag PCColor(current_color)
    uint32_t next_fresh = 1;
    uint32_t depth = 0;
    bool pending_entry = true; // execution must begin with a function header
    InstrKind last_kind = InstrKind::Plain;
    bool last_ra_restore = false;
    std::vector<ActivationRecord> records;
    std::vector<uint32_t> pending_args;  // marked words awaiting the call
    std::vector<uint32_t> staged_window; // captured at the call instruction

    bool operator==(const PolicyState&) const = default;
};

// A micro-policy is an immutable rule table; the six Table-style mutants are
// the correct policies with exactly one rule toggled off.
struct MicroPolicy {
    enum class Base : uint8_t { None, DI, LTC };

    Base base = Base::None;
    bool protect_registers = false;
    bool fresh_colors = true; // false: colors equal stack depth (the broken LTC)
    bool load_check = true;   // color check on stack loads
    bool store_check = true;  // DI store check (unused or same color)
    bool header_init = true;  // DI entry zero-fills the claimed frame
    bool store_update = true; // LTC stores retag the destination
    std::string name = "none";

    bool enforcing() const { return base != Base::None; }
};

MicroPolicy make_none();
MicroPolicy make_di();
MicroPolicy make_ltc();
MicroPolicy with_register_protection(MicroPolicy p);

// Table mutant ids: LOAD_NO_CHECK_DI, STORE_NO_CHECK, HEADER_NO_INIT,
// PER_DEPTH_TAG, LOAD_NO_CHECK_LT, STORE_NO_UPDATE. Throws ConfigError on
// anything else.
MicroPolicy make_mutant(const std::string& id);
std::vector<std::string> mutant_ids();

// Selector grammar: di | ltc | di+regs | ltc+regs | mutant:<ID> | none.
MicroPolicy parse_policy(const std::string& selector);

// Stack memory starts Unused under the tag policies; everything else untagged.
void apply_initial_tags(MachineState& m, const MicroPolicy& p);

struct GuardedStepResult {
    Event event = kSilent;
    bool failstopped = false;
    const char* reason = nullptr; // diagnostic only; failstop means "step to same state"
};

// Policy-guarded step: consults the monitor on the decoded instruction and
// the tags of its inputs and outputs. Allow performs the raw step and applies
// the tag (and, for the DI entry/exit sequences, frame payload) updates.
// Failstop leaves machine and policy state untouched and emits silence.
GuardedStepResult guarded_step(MachineState& m, PolicyState& ps, const MicroPolicy& pol,
                               const CodeImage& code);

} // namespace stacksafe
