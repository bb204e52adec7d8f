#pragma once

// Toy ISA: byte-encoded, variable-length, little-endian. Direct control
// transfers are PC-relative (relative to the end of the instruction);
// indirect transfers take absolute addresses from registers. The RSI opcode
// is the rewriter-inserted trampoline; it never appears in assembler output.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vaptr {

using Addr = std::uint64_t;
using Word = std::uint32_t;

inline constexpr int kNumRegs = 8;
inline constexpr std::size_t kWordSize = 4;

enum class Opcode : std::uint8_t {
  Nop = 0x00,
  MovRI = 0x01,   // mov rD, imm32
  MovRR = 0x02,   // mov rD, rS
  Add = 0x03,     // add rD, rS   (rD += rS, sets Z/S)
  Sub = 0x04,     // sub rD, rS   (rD -= rS, sets Z/S)
  Cmp = 0x05,     // cmp rA, rB   (flags from rA - rB)
  Load = 0x06,    // load rD, [rB+disp8]
  Store = 0x07,   // store rS, [rB+disp8]
  Push = 0x08,    // push rS
  Pop = 0x09,     // pop rD
  Jrel = 0x0a,    // jrel ±disp32
  Jcc = 0x0b,     // j<cond> ±disp32
  Jmpi = 0x0c,    // jmpi rS  (absolute)
  Callrel = 0x0d, // call ±disp32
  Calli = 0x0e,   // calli rS (absolute)
  Ret = 0x0f,
  Out = 0x10,     // out imm7 | out rS
  Halt = 0x11,
  Rsi = 0x12,     // rewriter-inserted unit, self-sized
};

inline constexpr std::uint8_t kMaxOpcodeByte = 0x12;

enum class Cond : std::uint8_t { Eq = 0, Ne = 1, Lt = 2, Ge = 3, Cxz = 4 };
inline constexpr std::uint8_t kNumConds = 5;

// Registers counted down by bounded loops / tested by Cxz.
inline constexpr std::uint8_t kCxzReg = 2;

inline constexpr std::uint8_t kOutRegBit = 0x80;
inline constexpr std::uint32_t kOutImmMax = 0x7f;

// Default trampoline size in bytes; configurable within [kRsiMinLength, 255].
inline constexpr std::uint8_t kRsiDefaultLength = 24;
inline constexpr std::uint8_t kRsiMinLength = 16;

// Low nibble of the RSI flag word: what kind of transfer the unit replaced.
// High bits hold the library index of the module containing the unit
// (0 = main image).
enum class CftKind : std::uint8_t {
  DirectJump = 1,
  DirectCall = 2,
  Return = 3,
  CondJump = 4,
  PageEndFallthrough = 5,
  IndirectJump = 6,
  IndirectCall = 7,
};

inline std::uint32_t make_rsi_flag(CftKind kind, std::uint32_t lib_index) {
  return static_cast<std::uint32_t>(kind) | (lib_index << 4);
}
inline CftKind rsi_flag_kind(std::uint32_t flag) {
  return static_cast<CftKind>(flag & 0xf);
}
inline std::uint32_t rsi_flag_lib(std::uint32_t flag) { return flag >> 4; }

// Stack words the unit's prologue reserves below the saved state: two for
// calls (planted target + return address), none for returns (the existing
// return slot is reused), one for everything else.
inline int rsi_reserved_slots(CftKind kind) {
  switch (kind) {
    case CftKind::DirectCall:
    case CftKind::IndirectCall:
      return 2;
    case CftKind::Return:
      return 0;
    default:
      return 1;
  }
}

// Payload carried inside an encoded RSI unit. target_arg holds an absolute
// before-randomization address for direct kinds (module-relative inside PIC
// libraries), a register number for indirect kinds, and 0 for returns.
// fallthrough is the before-randomization address of the not-taken successor
// (CondJump) or of the next page's first instruction (PageEndFallthrough).
struct RsiPayload {
  std::uint32_t flag = 0;
  Cond cond = Cond::Eq;
  std::uint32_t target_arg = 0;
  std::uint32_t fallthrough = 0;
  std::uint8_t length = kRsiDefaultLength;

  friend bool operator==(const RsiPayload&, const RsiPayload&) = default;
};

struct Instruction {
  Opcode op = Opcode::Nop;
  std::uint8_t r1 = 0;
  std::uint8_t r2 = 0;
  std::uint32_t imm = 0;  // MovRI immediate; Out operand byte
  std::int32_t disp = 0;  // Jrel/Jcc/Callrel displacement; Load/Store offset
  Cond cond = Cond::Eq;
  RsiPayload rsi{};

  std::size_t length() const;
  bool is_control_transfer() const;
  bool out_is_reg() const { return (imm & kOutRegBit) != 0; }
  std::uint8_t out_reg() const { return static_cast<std::uint8_t>(imm & 0x7); }

  friend bool operator==(const Instruction&, const Instruction&) = default;
};

// Fixed per-opcode lengths (RSI is self-sized via its length byte).
inline std::size_t opcode_length(Opcode op) {
  switch (op) {
    case Opcode::Nop:
    case Opcode::Ret:
    case Opcode::Halt:
      return 1;
    case Opcode::Push:
    case Opcode::Pop:
    case Opcode::Jmpi:
    case Opcode::Calli:
    case Opcode::Out:
      return 2;
    case Opcode::MovRR:
    case Opcode::Add:
    case Opcode::Sub:
    case Opcode::Cmp:
      return 3;
    case Opcode::Load:
    case Opcode::Store:
      return 4;
    case Opcode::Jrel:
    case Opcode::Callrel:
      return 5;
    case Opcode::MovRI:
    case Opcode::Jcc:
      return 6;
    case Opcode::Rsi:
      return kRsiDefaultLength;
  }
  return 1;
}

inline std::size_t Instruction::length() const {
  return op == Opcode::Rsi ? rsi.length : opcode_length(op);
}

inline bool Instruction::is_control_transfer() const {
  switch (op) {
    case Opcode::Jrel:
    case Opcode::Jcc:
    case Opcode::Jmpi:
    case Opcode::Callrel:
    case Opcode::Calli:
    case Opcode::Ret:
      return true;
    default:
      return false;
  }
}

// ---------------------------------------------------------------- geometry

struct PageGeometry {
  std::uint64_t page_size = 4096;
  std::uint64_t space_size = 0x4c000000;  // covers code, libs, data, stack

  bool valid() const {
    if (page_size < 64 || page_size > 65536) return false;
    if ((page_size & (page_size - 1)) != 0) return false;
    return space_size % page_size == 0 && space_size > 0;
  }
  std::uint64_t page_count() const { return space_size / page_size; }
  bool contains(Addr a) const { return a < space_size; }
};

struct PageSlot {
  std::uint64_t page = 0;
  std::uint64_t offset = 0;
  friend bool operator==(const PageSlot&, const PageSlot&) = default;
};

inline PageSlot page_of(Addr a, const PageGeometry& g) {
  if (!g.contains(a)) throw std::out_of_range("page_of: address outside space");
  return {a / g.page_size, a % g.page_size};
}

inline Addr page_base(std::uint64_t page, const PageGeometry& g) {
  return page * g.page_size;
}

// ---------------------------------------------------------------- decoding

enum class DecodeFaultKind : std::uint8_t { None, BadOpcode, Truncated, BadOperand };

struct DecodeResult {
  std::optional<Instruction> instr;
  DecodeFaultKind fault = DecodeFaultKind::None;
  bool ok() const { return instr.has_value(); }
};

namespace detail {
inline std::uint32_t read_u32(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) |
         (static_cast<std::uint32_t>(b[at + 1]) << 8) |
         (static_cast<std::uint32_t>(b[at + 2]) << 16) |
         (static_cast<std::uint32_t>(b[at + 3]) << 24);
}
inline void write_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 24));
}
}  // namespace detail

// Total decode: any byte sequence yields either an instruction or a fault,
// never UB. Operand bytes are validated (register < 8, cond < 5, RSI flag
// nibble in 1..7) so wild offsets fault instead of fabricating state.
inline DecodeResult decode_at(std::span<const std::uint8_t> bytes, std::size_t offset) {
  if (offset >= bytes.size()) return {std::nullopt, DecodeFaultKind::Truncated};
  const std::uint8_t opb = bytes[offset];
  if (opb > kMaxOpcodeByte) return {std::nullopt, DecodeFaultKind::BadOpcode};
  const Opcode op = static_cast<Opcode>(opb);
  const std::size_t remain = bytes.size() - offset;

  Instruction ins;
  ins.op = op;

  auto need = [&](std::size_t n) { return remain >= n; };
  auto reg_ok = [](std::uint8_t r) { return r < kNumRegs; };

  switch (op) {
    case Opcode::Nop:
    case Opcode::Ret:
    case Opcode::Halt:
      return {ins, DecodeFaultKind::None};

    case Opcode::Push:
    case Opcode::Pop:
    case Opcode::Jmpi:
    case Opcode::Calli: {
      if (!need(2)) return {std::nullopt, DecodeFaultKind::Truncated};
      ins.r1 = bytes[offset + 1];
      if (!reg_ok(ins.r1)) return {std::nullopt, DecodeFaultKind::BadOperand};
      return {ins, DecodeFaultKind::None};
    }

    case Opcode::Out: {
      if (!need(2)) return {std::nullopt, DecodeFaultKind::Truncated};
      const std::uint8_t operand = bytes[offset + 1];
      if ((operand & kOutRegBit) && (operand & 0x78) != 0)
        return {std::nullopt, DecodeFaultKind::BadOperand};
      ins.imm = operand;
      if (ins.out_is_reg()) ins.r1 = ins.out_reg();
      return {ins, DecodeFaultKind::None};
    }

    case Opcode::MovRR:
    case Opcode::Add:
    case Opcode::Sub:
    case Opcode::Cmp: {
      if (!need(3)) return {std::nullopt, DecodeFaultKind::Truncated};
      ins.r1 = bytes[offset + 1];
      ins.r2 = bytes[offset + 2];
      if (!reg_ok(ins.r1) || !reg_ok(ins.r2))
        return {std::nullopt, DecodeFaultKind::BadOperand};
      return {ins, DecodeFaultKind::None};
    }

    case Opcode::Load:
    case Opcode::Store: {
      if (!need(4)) return {std::nullopt, DecodeFaultKind::Truncated};
      ins.r1 = bytes[offset + 1];
      ins.r2 = bytes[offset + 2];
      if (!reg_ok(ins.r1) || !reg_ok(ins.r2))
        return {std::nullopt, DecodeFaultKind::BadOperand};
      ins.disp = static_cast<std::int8_t>(bytes[offset + 3]);
      return {ins, DecodeFaultKind::None};
    }

    case Opcode::MovRI: {
      if (!need(6)) return {std::nullopt, DecodeFaultKind::Truncated};
      ins.r1 = bytes[offset + 1];
      if (!reg_ok(ins.r1)) return {std::nullopt, DecodeFaultKind::BadOperand};
      ins.imm = detail::read_u32(bytes, offset + 2);
      return {ins, DecodeFaultKind::None};
    }

    case Opcode::Jrel:
    case Opcode::Callrel: {
      if (!need(5)) return {std::nullopt, DecodeFaultKind::Truncated};
      ins.disp = static_cast<std::int32_t>(detail::read_u32(bytes, offset + 1));
      return {ins, DecodeFaultKind::None};
    }

    case Opcode::Jcc: {
      if (!need(6)) return {std::nullopt, DecodeFaultKind::Truncated};
      const std::uint8_t c = bytes[offset + 1];
      if (c >= kNumConds) return {std::nullopt, DecodeFaultKind::BadOperand};
      ins.cond = static_cast<Cond>(c);
      ins.disp = static_cast<std::int32_t>(detail::read_u32(bytes, offset + 2));
      return {ins, DecodeFaultKind::None};
    }

    case Opcode::Rsi: {
      // [op][cond][len][0][flag u32][target u32][fallthrough u32][zero pad]
      if (!need(kRsiMinLength)) return {std::nullopt, DecodeFaultKind::Truncated};
      const std::uint8_t c = bytes[offset + 1];
      const std::uint8_t len = bytes[offset + 2];
      if (c >= kNumConds) return {std::nullopt, DecodeFaultKind::BadOperand};
      if (len < kRsiMinLength) return {std::nullopt, DecodeFaultKind::BadOperand};
      if (!need(len)) return {std::nullopt, DecodeFaultKind::Truncated};
      ins.cond = static_cast<Cond>(c);
      ins.rsi.cond = ins.cond;
      ins.rsi.length = len;
      ins.rsi.flag = detail::read_u32(bytes, offset + 4);
      const std::uint8_t nib = ins.rsi.flag & 0xf;
      if (nib < 1 || nib > 7) return {std::nullopt, DecodeFaultKind::BadOperand};
      ins.rsi.target_arg = detail::read_u32(bytes, offset + 8);
      ins.rsi.fallthrough = detail::read_u32(bytes, offset + 12);
      return {ins, DecodeFaultKind::None};
    }
  }
  return {std::nullopt, DecodeFaultKind::BadOpcode};
}

inline void encode(const Instruction& ins, std::vector<std::uint8_t>& out) {
  out.push_back(static_cast<std::uint8_t>(ins.op));
  switch (ins.op) {
    case Opcode::Nop:
    case Opcode::Ret:
    case Opcode::Halt:
      break;
    case Opcode::Push:
    case Opcode::Pop:
    case Opcode::Jmpi:
    case Opcode::Calli:
      out.push_back(ins.r1);
      break;
    case Opcode::Out:
      out.push_back(static_cast<std::uint8_t>(ins.imm));
      break;
    case Opcode::MovRR:
    case Opcode::Add:
    case Opcode::Sub:
    case Opcode::Cmp:
      out.push_back(ins.r1);
      out.push_back(ins.r2);
      break;
    case Opcode::Load:
    case Opcode::Store:
      out.push_back(ins.r1);
      out.push_back(ins.r2);
      out.push_back(static_cast<std::uint8_t>(static_cast<std::int8_t>(ins.disp)));
      break;
    case Opcode::MovRI:
      out.push_back(ins.r1);
      detail::write_u32(out, ins.imm);
      break;
    case Opcode::Jrel:
    case Opcode::Callrel:
      detail::write_u32(out, static_cast<std::uint32_t>(ins.disp));
      break;
    case Opcode::Jcc:
      out.push_back(static_cast<std::uint8_t>(ins.cond));
      detail::write_u32(out, static_cast<std::uint32_t>(ins.disp));
      break;
    case Opcode::Rsi: {
      out.push_back(static_cast<std::uint8_t>(ins.rsi.cond));
      out.push_back(ins.rsi.length);
      out.push_back(0);
      detail::write_u32(out, ins.rsi.flag);
      detail::write_u32(out, ins.rsi.target_arg);
      detail::write_u32(out, ins.rsi.fallthrough);
      for (std::size_t i = kRsiMinLength; i < ins.rsi.length; ++i) out.push_back(0);
      break;
    }
  }
}

inline std::vector<std::uint8_t> encode(const Instruction& ins) {
  std::vector<std::uint8_t> out;
  encode(ins, out);
  return out;
}

inline const char* opcode_name(Opcode op) {
  switch (op) {
    case Opcode::Nop: return "nop";
    case Opcode::MovRI: return "mov";
    case Opcode::MovRR: return "mov";
    case Opcode::Add: return "add";
    case Opcode::Sub: return "sub";
    case Opcode::Cmp: return "cmp";
    case Opcode::Load: return "load";
    case Opcode::Store: return "store";
    case Opcode::Push: return "push";
    case Opcode::Pop: return "pop";
    case Opcode::Jrel: return "jrel";
    case Opcode::Jcc: return "jcc";
    case Opcode::Jmpi: return "jmpi";
    case Opcode::Callrel: return "call";
    case Opcode::Calli: return "calli";
    case Opcode::Ret: return "ret";
    case Opcode::Out: return "out";
    case Opcode::Halt: return "halt";
    case Opcode::Rsi: return "rsi";
  }
  return "?";
}

inline const char* cond_name(Cond c) {
  switch (c) {
    case Cond::Eq: return "eq";
    case Cond::Ne: return "ne";
    case Cond::Lt: return "lt";
    case Cond::Ge: return "ge";
    case Cond::Cxz: return "cxz";
  }
  return "?";
}

}  // namespace vaptr
