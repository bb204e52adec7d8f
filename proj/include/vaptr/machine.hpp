#pragma once

// The interpreter. One guest instruction per simulated tick; the remapping
// runtime's clock fires between any two instructions. An RSI unit executes
// its whole sequence (reserve slots, save state, sys_jit, stub) within a
// single step, mirroring how the real unit runs between scheduler ticks.

#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <vector>

#include "vaptr/isa.hpp"
#include "vaptr/machine_state.hpp"
#include "vaptr/vaptr.hpp"

namespace vaptr {

struct StepEvent {
  Opcode op = Opcode::Nop;
  Addr pc_before = 0;
  Addr pc_after = 0;
  bool rsi = false;
};

namespace mdetail {

// Instruction window at pc through the page table. Fast path: the whole
// window lives in one frame. Slow path (instructions straddling a page
// boundary, which only clean images produce): splice two frames together.
inline bool fetch_decode(const VaptrState& v, MachineState& m,
                         Instruction& out) {
  const std::uint64_t ps = v.geom.page_size;
  if (m.in_data(m.pc, 1) || m.in_stack(m.pc, 1)) {
    m.crash_with(CrashReason::WildFetch);
    return false;
  }
  const auto* frame = current_page_bytes(v, m.pc);
  if (frame == nullptr) {
    m.crash_with(CrashReason::UnknownPage);
    return false;
  }
  const std::uint64_t off = m.pc % ps;
  DecodeResult r = decode_at(std::span(*frame), off);
  if (!r.ok() && r.fault == DecodeFaultKind::Truncated) {
    const auto* next = current_page_bytes(v, (m.pc / ps + 1) * ps);
    if (next != nullptr) {
      std::vector<std::uint8_t> buf(frame->begin() + off, frame->end());
      buf.insert(buf.end(), next->begin(), next->end());
      r = decode_at(std::span(buf), 0);
    }
  }
  if (!r.ok()) {
    m.crash_with(CrashReason::DecodeFault);
    return false;
  }
  out = *r.instr;
  return true;
}

inline void set_arith_flags(MachineState& m, Word result) {
  m.flags.z = result == 0;
  m.flags.s = (result >> 31) != 0;
}

// Architectural contract for absolute code addresses: registers and stack
// slots hold before-randomization logical addresses, and every save of a
// return address is kernel-mediated — it stores the before-randomization
// value and mirrors it into the shadow table. Plain RET/JMPI/CALLI re-enter
// the mapping through a forward translation. On a never-shuffled machine the
// mapping is the identity, so clean programs behave exactly as written;
// after shuffles, stacked return addresses stay valid because they never
// named the moving location in the first place.
inline bool save_return(VaptrState& v, MachineState& m, Addr next_pc) {
  const auto before = translate_inverse(v, next_pc);
  if (!before) {
    m.crash_with(CrashReason::UnknownPage);
    return false;
  }
  if (!m.push_word(static_cast<Word>(*before))) return false;
  std::unique_lock lock(v.table_mutex);
  v.shadow[m.sp] = *before;
  return true;
}

inline bool enter_absolute(VaptrState& v, MachineState& m, Addr target) {
  const auto after = translate_forward(v, target);
  if (!after) {
    m.crash_with(CrashReason::UnknownPage);
    return false;
  }
  m.pc = *after;
  return true;
}

inline void exec_rsi(VaptrState& v, MachineState& m, const Instruction& ins) {
  const Addr unit_pc = m.pc;
  const Addr after_pc = m.pc + ins.rsi.length;
  const auto before_site = translate_inverse(v, unit_pc);
  if (before_site) {
    ++m.rsi_exec_counts[*before_site];
    ++m.rsi_total;
  }

  const Addr sp_before = m.sp;
  const CftKind kind = rsi_flag_kind(ins.rsi.flag);
  for (int i = 0; i < rsi_reserved_slots(kind); ++i)
    if (!m.push_word(0)) return;
  if (!m.push_word(m.flags.word())) return;
  for (int r = kNumRegs - 1; r >= 0; --r)
    if (!m.push_word(m.regs[r])) return;

  const SysJitResult res = sys_jit(v, m, ins.rsi, sp_before, after_pc);
  if (!res.ok) {
    if (m.status == Status::Running) m.crash_with(res.crash);
    return;
  }
  stub_execute(m);
}

}  // namespace mdetail

inline StepEvent step(VaptrState& v, MachineState& m) {
  StepEvent ev;
  ev.pc_before = m.pc;
  if (m.status != Status::Running) return ev;

  Instruction ins;
  if (!mdetail::fetch_decode(v, m, ins)) return ev;
  ev.op = ins.op;
  const Addr next_pc = m.pc + ins.length();
  ++m.steps;

  switch (ins.op) {
    case Opcode::Nop:
      m.pc = next_pc;
      break;
    case Opcode::Halt:
      m.status = Status::Halted;
      break;
    case Opcode::MovRI:
      m.regs[ins.r1] = ins.imm;
      m.pc = next_pc;
      break;
    case Opcode::MovRR:
      m.regs[ins.r1] = m.regs[ins.r2];
      m.pc = next_pc;
      break;
    case Opcode::Add: {
      const Word res = m.regs[ins.r1] + m.regs[ins.r2];
      m.regs[ins.r1] = res;
      mdetail::set_arith_flags(m, res);
      m.pc = next_pc;
      break;
    }
    case Opcode::Sub: {
      const Word res = m.regs[ins.r1] - m.regs[ins.r2];
      m.regs[ins.r1] = res;
      mdetail::set_arith_flags(m, res);
      m.pc = next_pc;
      break;
    }
    case Opcode::Cmp:
      mdetail::set_arith_flags(m, m.regs[ins.r1] - m.regs[ins.r2]);
      m.pc = next_pc;
      break;
    case Opcode::Load: {
      const Addr a = static_cast<Addr>(m.regs[ins.r2]) + ins.disp;
      const auto val = m.read_word_at(a);
      if (!val) return ev;
      m.regs[ins.r1] = *val;
      m.pc = next_pc;
      break;
    }
    case Opcode::Store: {
      const Addr a = static_cast<Addr>(m.regs[ins.r2]) + ins.disp;
      if (!m.write_word_at(a, m.regs[ins.r1])) return ev;
      m.pc = next_pc;
      break;
    }
    case Opcode::Push:
      if (!m.push_word(m.regs[ins.r1])) return ev;
      m.pc = next_pc;
      break;
    case Opcode::Pop: {
      const auto v2 = m.pop_word();
      if (!v2) return ev;
      m.regs[ins.r1] = *v2;
      m.pc = next_pc;
      break;
    }
    case Opcode::Out:
      m.output.push_back(ins.out_is_reg()
                             ? static_cast<std::uint8_t>(m.regs[ins.out_reg()])
                             : static_cast<std::uint8_t>(ins.imm));
      m.pc = next_pc;
      break;
    case Opcode::Jrel:
      m.pc = next_pc + ins.disp;
      break;
    case Opcode::Jcc:
      m.pc = vdetail::cond_holds(ins.cond, m.flags, m.regs[kCxzReg])
                 ? next_pc + ins.disp
                 : next_pc;
      break;
    case Opcode::Jmpi:
      if (!mdetail::enter_absolute(v, m, m.regs[ins.r1])) return ev;
      break;
    case Opcode::Callrel:
      if (!mdetail::save_return(v, m, next_pc)) return ev;
      m.pc = next_pc + ins.disp;
      break;
    case Opcode::Calli:
      if (!mdetail::save_return(v, m, next_pc)) return ev;
      if (!mdetail::enter_absolute(v, m, m.regs[ins.r1])) return ev;
      break;
    case Opcode::Ret: {
      const auto ra = m.pop_word();
      if (!ra) return ev;
      if (!mdetail::enter_absolute(v, m, *ra)) return ev;
      break;
    }
    case Opcode::Rsi:
      ev.rsi = true;
      mdetail::exec_rsi(v, m, ins);
      break;
  }
  ev.pc_after = m.pc;
  return ev;
}

// Kernel-delivered callback: pushes the resume address, registers it in the
// shadow table (the kernel half of delivery — sig_return analog), and enters
// the registered entry address. In rewritten images that address is a
// DirectJump unit on the whitelisted entry page; in clean images it is the
// function itself.
inline void deliver_callback(VaptrState& v, MachineState& m, int id) {
  auto it = m.callback_entries.find(id);
  if (it == m.callback_entries.end())
    throw std::invalid_argument("unknown callback id " +
                                std::to_string(id));
  if (m.status != Status::Running) return;
  if (!mdetail::save_return(v, m, m.pc)) return;
  const auto entry = translate_forward(v, it->second);
  if (!entry) {
    m.crash_with(CrashReason::UnknownPage);
    return;
  }
  m.pc = *entry;
}

// One delivery, due when the guest has emitted `after_output` bytes. Keying
// deliveries to the output stream (not raw ticks) hits the same semantic
// program point in original and rewritten runs, whose step counts differ.
struct CallbackDelivery {
  std::uint64_t after_output = 0;
  int id = 0;
};

struct RunOptions {
  std::uint64_t fuel = 50'000'000;
  std::uint64_t start_tick = 0;
  std::vector<CallbackDelivery> deliveries;  // sorted by after_output
  std::ostream* trace = nullptr;
};

struct RunResult {
  Status status = Status::Running;
  CrashReason crash = CrashReason::None;
  std::uint64_t steps = 0;
  std::uint64_t ticks = 0;
  std::uint64_t rsi_total = 0;
};

inline RunResult run(VaptrState& v, MachineState& m, RunOptions opts = {}) {
  std::uint64_t now = opts.start_tick;
  std::size_t delivery_at = 0;
  std::uint64_t fuel = opts.fuel;
  while (m.status == Status::Running) {
    if (fuel == 0) {
      m.status = Status::FuelExhausted;
      break;
    }
    --fuel;
    ++now;
    vaptr_tick(v, now);
    const StepEvent ev = step(v, m);
    if (opts.trace != nullptr) {
      *opts.trace << "{\"tick\":" << now << ",\"pc\":" << ev.pc_before
                  << ",\"op\":\"" << opcode_name(ev.op) << "\",\"pc_next\":"
                  << ev.pc_after << (ev.rsi ? ",\"rsi\":true" : "") << "}\n";
    }
    while (delivery_at < opts.deliveries.size() &&
           m.output.size() >= opts.deliveries[delivery_at].after_output &&
           m.status == Status::Running) {
      deliver_callback(v, m, opts.deliveries[delivery_at].id);
      ++delivery_at;
    }
  }
  return {m.status, m.crash, m.steps, now - opts.start_tick, m.rsi_total};
}

}  // namespace vaptr
