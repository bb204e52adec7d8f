#pragma once

// Guest-visible machine state. Code lives behind the vaptr page tables and is
// execute-fetch only for the guest; data and stack live at fixed addresses
// and never randomize. The state is a plain value so attack models can
// checkpoint/restore it (crash-restart probing).

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <unordered_map>
#include <vector>

#include "vaptr/image.hpp"
#include "vaptr/isa.hpp"

namespace vaptr {

enum class Status : std::uint8_t { Running, Halted, Crashed, FuelExhausted };

inline const char* status_name(Status s) {
  switch (s) {
    case Status::Running: return "running";
    case Status::Halted: return "halted";
    case Status::Crashed: return "crashed";
    case Status::FuelExhausted: return "fuel_exhausted";
  }
  return "?";
}

enum class CrashReason : std::uint8_t {
  None,
  DecodeFault,     // bytes at pc do not decode
  UnknownPage,     // control reached an unmapped page / untranslatable target
  StackOverflow,   // sp left the stack region
  WildFetch,       // fetch from a data/stack page (DEP analog)
  ShadowMiss,      // return with no shadow-table entry
  BadLibrary,      // RSI flag names an unregistered library
};

inline const char* crash_reason_name(CrashReason r) {
  switch (r) {
    case CrashReason::None: return "none";
    case CrashReason::DecodeFault: return "decode_fault";
    case CrashReason::UnknownPage: return "unknown_page";
    case CrashReason::StackOverflow: return "stack_overflow";
    case CrashReason::WildFetch: return "wild_fetch";
    case CrashReason::ShadowMiss: return "shadow_miss";
    case CrashReason::BadLibrary: return "bad_library";
  }
  return "?";
}

struct FlagsReg {
  bool z = false;
  bool s = false;
  Word word() const { return (z ? 1u : 0u) | (s ? 2u : 0u); }
  void set_word(Word w) {
    z = (w & 1u) != 0;
    s = (w & 2u) != 0;
  }
  friend bool operator==(const FlagsReg&, const FlagsReg&) = default;
};

struct MachineState {
  std::array<Word, kNumRegs> regs{};
  FlagsReg flags{};
  Addr pc = 0;  // after-randomization address
  Addr sp = 0;
  Status status = Status::Running;
  CrashReason crash = CrashReason::None;

  std::vector<std::uint8_t> output;
  std::vector<std::uint8_t> data_mem;
  std::vector<std::uint8_t> stack_mem;
  MemoryMap mem{};
  PageGeometry geom{};
  std::map<int, Addr> callback_entries;

  std::uint64_t steps = 0;
  std::uint64_t rsi_total = 0;
  // Executions per unit, keyed by the unit's before-randomization site.
  std::unordered_map<Addr, std::uint64_t> rsi_exec_counts;

  Addr stack_top() const { return mem.stack_base + mem.stack_size; }

  bool in_data(Addr a, std::size_t n) const {
    return a >= mem.data_base && a + n <= mem.data_base + mem.data_size;
  }
  bool in_stack(Addr a, std::size_t n) const {
    return a >= mem.stack_base && a + n <= stack_top();
  }

  void crash_with(CrashReason r) {
    status = Status::Crashed;
    crash = r;
  }

  std::optional<Word> read_word_at(Addr a) {
    const std::uint8_t* p = nullptr;
    if (in_data(a, kWordSize)) {
      p = data_mem.data() + (a - mem.data_base);
    } else if (in_stack(a, kWordSize)) {
      p = stack_mem.data() + (a - mem.stack_base);
    } else {
      crash_with(CrashReason::WildFetch);
      return std::nullopt;
    }
    return static_cast<Word>(p[0]) | (static_cast<Word>(p[1]) << 8) |
           (static_cast<Word>(p[2]) << 16) | (static_cast<Word>(p[3]) << 24);
  }

  bool write_word_at(Addr a, Word v) {
    std::uint8_t* p = nullptr;
    if (in_data(a, kWordSize)) {
      p = data_mem.data() + (a - mem.data_base);
    } else if (in_stack(a, kWordSize)) {
      p = stack_mem.data() + (a - mem.stack_base);
    } else {
      crash_with(CrashReason::WildFetch);
      return false;
    }
    p[0] = static_cast<std::uint8_t>(v);
    p[1] = static_cast<std::uint8_t>(v >> 8);
    p[2] = static_cast<std::uint8_t>(v >> 16);
    p[3] = static_cast<std::uint8_t>(v >> 24);
    return true;
  }

  bool push_word(Word v) {
    if (sp < mem.stack_base + kWordSize) {
      crash_with(CrashReason::StackOverflow);
      return false;
    }
    sp -= kWordSize;
    return write_word_at(sp, v);
  }

  std::optional<Word> pop_word() {
    if (sp + kWordSize > stack_top()) {
      crash_with(CrashReason::StackOverflow);
      return std::nullopt;
    }
    const auto v = read_word_at(sp);
    if (v) sp += kWordSize;
    return v;
  }
};

// Fresh machine for an image: data region initialized, stack empty, pc at the
// image entry (identity-mapped at load time, so the before-randomization
// entry address is also the initial after-randomization pc).
inline MachineState init_machine(const ProgramImage& img) {
  MachineState m;
  m.mem = img.mem;
  m.geom = img.geometry;
  m.data_mem.assign(img.mem.data_size, 0);
  std::copy(img.data.begin(), img.data.end(), m.data_mem.begin());
  m.stack_mem.assign(img.mem.stack_size, 0);
  m.sp = m.stack_top();
  m.pc = img.entry;
  for (const auto& cb : img.callbacks) m.callback_entries[cb.id] = cb.entry;
  return m;
}

}  // namespace vaptr
