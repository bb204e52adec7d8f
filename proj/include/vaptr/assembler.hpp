#pragma once

// Two-pass assembler for the toy ISA. Grammar (documented in docs/asm.md):
//
//   .entry NAME            entry function (defaults to "main")
//   .callback NAME         register NAME as a kernel-invocable callback
//   .data NAME b0 b1 ...   bytes in the fixed data region; &NAME = address
//   fn NAME { stmts }      function; statements split on newlines and ';'
//   .lib NAME [pic] { fn ... }   shared-library module
//
// Labels are statements of the form `Lname:` and are function-local.
// `mov rD, &sym` records a relocation so the rewriter can re-resolve the
// symbol address against the rewritten layout.

#include <cctype>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "vaptr/image.hpp"
#include "vaptr/isa.hpp"

namespace vaptr {

struct AsmError : std::runtime_error {
  int line = 0;
  int col = 0;
  AsmError(int line_, int col_, const std::string& msg)
      : std::runtime_error("line " + std::to_string(line_) + ":" +
                           std::to_string(col_) + ": " + msg),
        line(line_),
        col(col_) {}
};

namespace asmdetail {

struct Stmt {
  std::string text;
  int line = 1;
  int col = 1;
};

enum class TargetKind : std::uint8_t { None, Label, Function, AddrOf };

struct AsmInstr {
  Instruction ins;
  TargetKind target_kind = TargetKind::None;
  std::string target;  // label / function / &symbol name
  int line = 1, col = 1;
};

struct AsmFunction {
  std::string name;
  std::vector<AsmInstr> instrs;
  std::map<std::string, std::size_t> labels;  // label -> instr index
  int line = 1;
};

struct AsmModule {
  std::string name;
  bool pic = false;
  std::vector<AsmFunction> fns;
};

class Parser {
 public:
  explicit Parser(std::string_view src, PageGeometry geom, MemoryMap mem)
      : geom_(geom), mem_(mem) {
    split_statements(src);
  }

  ProgramImage parse() {
    while (pos_ < stmts_.size()) top_level(next());
    return finish();
  }

 private:
  PageGeometry geom_;
  MemoryMap mem_;
  std::vector<Stmt> stmts_;
  std::size_t pos_ = 0;

  AsmModule main_{"main", false, {}};
  std::vector<AsmModule> libs_;
  std::string entry_name_;
  std::vector<std::string> callback_names_;
  std::vector<std::uint8_t> data_;
  std::map<std::string, Addr> data_syms_;

  [[noreturn]] void fail(const Stmt& s, const std::string& msg, int col = 0) const {
    throw AsmError(s.line, col ? col : s.col, msg);
  }

  void split_statements(std::string_view src) {
    int line = 1;
    std::size_t i = 0;
    while (i <= src.size()) {
      std::size_t eol = src.find('\n', i);
      if (eol == std::string_view::npos) eol = src.size();
      std::string_view raw = src.substr(i, eol - i);
      if (auto h = raw.find('#'); h != std::string_view::npos)
        raw = raw.substr(0, h);
      std::size_t start = 0;
      while (start <= raw.size()) {
        // ';' separates statements; '{' and '}' are statements of their own.
        std::size_t cut = raw.size();
        char delim = 0;
        for (std::size_t k = start; k < raw.size(); ++k) {
          if (raw[k] == ';' || raw[k] == '{' || raw[k] == '}') {
            cut = k;
            delim = raw[k];
            break;
          }
        }
        std::string_view piece = raw.substr(start, cut - start);
        std::size_t b = piece.find_first_not_of(" \t\r");
        if (b != std::string_view::npos) {
          std::size_t e = piece.find_last_not_of(" \t\r");
          stmts_.push_back(Stmt{std::string(piece.substr(b, e - b + 1)), line,
                                static_cast<int>(start + b + 1)});
        }
        if (delim == '{' || delim == '}')
          stmts_.push_back(
              Stmt{std::string(1, delim), line, static_cast<int>(cut + 1)});
        if (cut == raw.size()) break;
        start = cut + 1;
      }
      if (eol == src.size()) break;
      i = eol + 1;
      ++line;
    }
  }

  const Stmt& next() { return stmts_[pos_++]; }
  const Stmt* peek() const { return pos_ < stmts_.size() ? &stmts_[pos_] : nullptr; }

  static std::vector<std::string> words(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
  }

  void top_level(const Stmt& s) {
    auto ws = words(s.text);
    if (ws.empty()) return;
    if (ws[0] == ".entry") {
      if (ws.size() != 2) fail(s, ".entry takes one function name");
      entry_name_ = ws[1];
    } else if (ws[0] == ".callback") {
      if (ws.size() != 2) fail(s, ".callback takes one function name");
      callback_names_.push_back(ws[1]);
    } else if (ws[0] == ".data") {
      if (ws.size() < 2) fail(s, ".data needs a name");
      if (data_syms_.count(ws[1])) fail(s, "duplicate data symbol " + ws[1]);
      data_syms_[ws[1]] = mem_.data_base + data_.size();
      for (std::size_t i = 2; i < ws.size(); ++i) {
        const long v = parse_int(s, ws[i]);
        if (v < 0 || v > 255) fail(s, "data byte out of range: " + ws[i]);
        data_.push_back(static_cast<std::uint8_t>(v));
      }
    } else if (ws[0] == "fn") {
      main_.fns.push_back(parse_fn(s, ws));
    } else if (ws[0] == ".lib") {
      parse_lib(s, ws);
    } else {
      fail(s, "expected directive, fn, or .lib, got '" + ws[0] + "'");
    }
  }

  void parse_lib(const Stmt& s, const std::vector<std::string>& ws) {
    if (ws.size() < 2) fail(s, ".lib NAME [pic] { ... }");
    AsmModule lib;
    lib.name = ws[1];
    std::size_t at = 2;
    if (at < ws.size() && ws[at] == "pic") {
      lib.pic = true;
      ++at;
    }
    if (at != ws.size()) fail(s, "unexpected tokens after .lib header");
    if (!peek() || peek()->text != "{") fail(s, ".lib missing '{'");
    next();
    while (true) {
      if (!peek()) fail(s, ".lib " + lib.name + " missing closing '}'");
      const Stmt& st = next();
      auto w = words(st.text);
      if (w.empty()) continue;
      if (w[0] == "}") break;
      if (w[0] != "fn") fail(st, "only fn blocks allowed inside .lib");
      lib.fns.push_back(parse_fn(st, w));
    }
    libs_.push_back(std::move(lib));
  }

  AsmFunction parse_fn(const Stmt& s, const std::vector<std::string>& ws) {
    if (ws.size() < 2) fail(s, "fn needs a name");
    AsmFunction fn;
    fn.name = ws[1];
    fn.line = s.line;
    if (ws.size() != 2) fail(s, "unexpected tokens after fn name");
    if (!peek()) fail(s, "fn " + fn.name + " missing '{'");
    {
      const Stmt& st = next();
      if (st.text != "{") fail(st, "fn " + fn.name + " missing '{'");
    }
    while (true) {
      if (!peek()) fail(s, "fn " + fn.name + " missing closing '}'");
      const Stmt& st = next();
      if (st.text == "}") break;
      parse_stmt(fn, st);
    }
    if (fn.instrs.empty()) fail(s, "fn " + fn.name + " has no instructions");
    return fn;
  }

  static bool is_label_def(const std::string& t) {
    return t.size() >= 2 && t[0] == 'L' && t.back() == ':';
  }

  void parse_stmt(AsmFunction& fn, const Stmt& s) {
    if (is_label_def(s.text)) {
      const std::string name = s.text.substr(0, s.text.size() - 1);
      for (char c : name)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_')
          fail(s, "bad label name " + name);
      if (fn.labels.count(name)) fail(s, "duplicate label " + name);
      fn.labels[name] = fn.instrs.size();
      return;
    }
    fn.instrs.push_back(parse_instr(s));
  }

  long parse_int(const Stmt& s, const std::string& t) const {
    try {
      std::size_t used = 0;
      const long v = std::stol(t, &used, 0);
      if (used != t.size()) fail(s, "bad integer '" + t + "'");
      return v;
    } catch (const AsmError&) {
      throw;
    } catch (...) {
      fail(s, "bad integer '" + t + "'");
    }
  }

  std::optional<std::uint8_t> parse_reg(const std::string& t) const {
    if (t.size() == 2 && t[0] == 'r' && t[1] >= '0' && t[1] < '0' + kNumRegs)
      return static_cast<std::uint8_t>(t[1] - '0');
    return std::nullopt;
  }

  // "mov r0, 5" -> mnemonic + comma-separated operand list.
  static void split_operands(const std::string& text, std::string& mnem,
                             std::vector<std::string>& ops) {
    std::size_t sp = text.find_first_of(" \t");
    if (sp == std::string::npos) {
      mnem = text;
      return;
    }
    mnem = text.substr(0, sp);
    std::string rest = text.substr(sp + 1);
    std::size_t start = 0;
    while (start <= rest.size()) {
      std::size_t comma = rest.find(',', start);
      if (comma == std::string::npos) comma = rest.size();
      std::string piece = rest.substr(start, comma - start);
      std::size_t b = piece.find_first_not_of(" \t");
      if (b != std::string::npos) {
        std::size_t e = piece.find_last_not_of(" \t");
        ops.push_back(piece.substr(b, e - b + 1));
      }
      if (comma == rest.size()) break;
      start = comma + 1;
    }
  }

  // [rB+disp] / [rB-disp] / [rB]
  bool parse_mem(const Stmt& s, const std::string& t, std::uint8_t& reg,
                 std::int32_t& disp) const {
    if (t.size() < 4 || t.front() != '[' || t.back() != ']') return false;
    std::string inner = t.substr(1, t.size() - 2);
    std::size_t op = inner.find_first_of("+-");
    std::string regs = op == std::string::npos ? inner : inner.substr(0, op);
    auto r = parse_reg(regs);
    if (!r) fail(s, "bad base register in " + t);
    reg = *r;
    disp = 0;
    if (op != std::string::npos) {
      const long v = parse_int(s, inner.substr(op + 1));
      disp = inner[op] == '-' ? -static_cast<std::int32_t>(v)
                              : static_cast<std::int32_t>(v);
      if (disp < -128 || disp > 127) fail(s, "memory offset out of range");
    }
    return true;
  }

  AsmInstr parse_instr(const Stmt& s) {
    std::string mnem;
    std::vector<std::string> ops;
    split_operands(s.text, mnem, ops);
    AsmInstr ai;
    ai.line = s.line;
    ai.col = s.col;
    Instruction& ins = ai.ins;

    auto want = [&](std::size_t n) {
      if (ops.size() != n)
        fail(s, mnem + " takes " + std::to_string(n) + " operand(s)");
    };
    auto reg_op = [&](std::size_t i) {
      auto r = parse_reg(ops[i]);
      if (!r) fail(s, "expected register, got '" + ops[i] + "'");
      return *r;
    };

    if (mnem == "nop") { want(0); ins.op = Opcode::Nop; }
    else if (mnem == "ret") { want(0); ins.op = Opcode::Ret; }
    else if (mnem == "halt") { want(0); ins.op = Opcode::Halt; }
    else if (mnem == "push") { want(1); ins.op = Opcode::Push; ins.r1 = reg_op(0); }
    else if (mnem == "pop") { want(1); ins.op = Opcode::Pop; ins.r1 = reg_op(0); }
    else if (mnem == "jmpi") { want(1); ins.op = Opcode::Jmpi; ins.r1 = reg_op(0); }
    else if (mnem == "calli") { want(1); ins.op = Opcode::Calli; ins.r1 = reg_op(0); }
    else if (mnem == "out") {
      want(1);
      ins.op = Opcode::Out;
      if (auto r = parse_reg(ops[0])) {
        ins.imm = kOutRegBit | *r;
        ins.r1 = *r;
      } else {
        const long v = parse_int(s, ops[0]);
        if (v < 0 || static_cast<std::uint32_t>(v) > kOutImmMax)
          fail(s, "out immediate must be 0..127 (use a register)");
        ins.imm = static_cast<std::uint32_t>(v);
      }
    } else if (mnem == "mov") {
      want(2);
      ins.r1 = reg_op(0);
      if (auto r = parse_reg(ops[1])) {
        ins.op = Opcode::MovRR;
        ins.r2 = *r;
      } else if (!ops[1].empty() && ops[1][0] == '&') {
        ins.op = Opcode::MovRI;
        ai.target_kind = TargetKind::AddrOf;
        ai.target = ops[1].substr(1);
        if (ai.target.empty()) fail(s, "empty symbol after '&'");
      } else {
        ins.op = Opcode::MovRI;
        ins.imm = static_cast<std::uint32_t>(parse_int(s, ops[1]));
      }
    } else if (mnem == "add" || mnem == "sub" || mnem == "cmp") {
      want(2);
      ins.op = mnem == "add" ? Opcode::Add : mnem == "sub" ? Opcode::Sub : Opcode::Cmp;
      ins.r1 = reg_op(0);
      ins.r2 = reg_op(1);
    } else if (mnem == "load" || mnem == "store") {
      want(2);
      ins.op = mnem == "load" ? Opcode::Load : Opcode::Store;
      ins.r1 = reg_op(0);
      std::uint8_t base = 0;
      std::int32_t disp = 0;
      if (!parse_mem(s, ops[1], base, disp))
        fail(s, "expected memory operand [rB+off], got '" + ops[1] + "'");
      ins.r2 = base;
      ins.disp = disp;
    } else if (mnem == "jrel") {
      want(1);
      ins.op = Opcode::Jrel;
      ai.target_kind = TargetKind::Label;
      ai.target = ops[0];
    } else if (mnem == "call") {
      want(1);
      ins.op = Opcode::Callrel;
      ai.target_kind = TargetKind::Function;
      ai.target = ops[0];
    } else if (mnem == "jeq" || mnem == "jne" || mnem == "jlt" ||
               mnem == "jge" || mnem == "jcxz") {
      want(1);
      ins.op = Opcode::Jcc;
      ins.cond = mnem == "jeq"   ? Cond::Eq
                 : mnem == "jne" ? Cond::Ne
                 : mnem == "jlt" ? Cond::Lt
                 : mnem == "jge" ? Cond::Ge
                                 : Cond::Cxz;
      ai.target_kind = TargetKind::Label;
      ai.target = ops[0];
    } else {
      fail(s, "unknown mnemonic '" + mnem + "'");
    }
    return ai;
  }

  // ---- second pass: layout, resolve, encode ----

  struct FnAddr {
    Addr addr = 0;
    std::uint32_t lib_index = 0;
  };

  ProgramImage finish() {
    if (main_.fns.empty()) throw AsmError(1, 1, "no functions defined");
    if (entry_name_.empty()) entry_name_ = "main";

    ProgramImage img;
    img.geometry = geom_;
    img.mem = mem_;
    img.data = data_;

    std::map<std::string, FnAddr> fn_addrs;
    auto layout_module = [&](const AsmModule& am, Addr base,
                             std::uint32_t lib_index) {
      Addr cursor = base;
      for (const auto& fn : am.fns) {
        if (fn_addrs.count(fn.name))
          throw AsmError(fn.line, 1, "duplicate function name " + fn.name);
        fn_addrs[fn.name] = {cursor, lib_index};
        for (const auto& ai : fn.instrs) cursor += ai.ins.length();
      }
      return cursor - base;
    };

    layout_module(main_, mem_.code_base, 0);
    for (std::size_t k = 0; k < libs_.size(); ++k)
      layout_module(libs_[k], mem_.lib_base + k * mem_.lib_stride,
                    static_cast<std::uint32_t>(k + 1));

    img.main = encode_module(main_, mem_.code_base, 0, fn_addrs);
    for (std::size_t k = 0; k < libs_.size(); ++k)
      img.libs.push_back(encode_module(libs_[k],
                                       mem_.lib_base + k * mem_.lib_stride,
                                       static_cast<std::uint32_t>(k + 1),
                                       fn_addrs));

    auto eit = fn_addrs.find(entry_name_);
    if (eit == fn_addrs.end())
      throw AsmError(1, 1, "entry function '" + entry_name_ + "' not defined");
    if (eit->second.lib_index != 0)
      throw AsmError(1, 1, "entry function must live in the main image");
    img.entry = eit->second.addr;

    int next_id = 0;
    for (const auto& cb : callback_names_) {
      auto it = fn_addrs.find(cb);
      if (it == fn_addrs.end())
        throw AsmError(1, 1, ".callback references unknown function " + cb);
      img.callbacks.push_back({next_id++, cb, it->second.addr});
    }

    img.validate();
    return img;
  }

  ModuleCode encode_module(const AsmModule& am, Addr base,
                           std::uint32_t lib_index,
                           const std::map<std::string, FnAddr>& fn_addrs) {
    ModuleCode mod;
    mod.name = am.name;
    mod.base = base;
    mod.pic = am.pic;

    Addr cursor = base;
    for (const auto& fn : am.fns) {
      const Addr fn_start = cursor;
      // Precompute each instruction's address for label displacement math.
      std::vector<Addr> addrs(fn.instrs.size());
      for (std::size_t i = 0; i < fn.instrs.size(); ++i) {
        addrs[i] = cursor;
        cursor += fn.instrs[i].ins.length();
      }
      for (std::size_t i = 0; i < fn.instrs.size(); ++i) {
        const AsmInstr& ai = fn.instrs[i];
        Instruction ins = ai.ins;
        switch (ai.target_kind) {
          case TargetKind::None:
            break;
          case TargetKind::Label: {
            auto it = fn.labels.find(ai.target);
            if (it == fn.labels.end())
              throw AsmError(ai.line, ai.col,
                             "undefined label '" + ai.target + "' in fn " + fn.name);
            const Addr target = addrs[it->second];
            const Addr after = addrs[i] + ins.length();
            ins.disp = static_cast<std::int32_t>(
                static_cast<std::int64_t>(target) - static_cast<std::int64_t>(after));
            break;
          }
          case TargetKind::Function: {
            auto it = fn_addrs.find(ai.target);
            if (it == fn_addrs.end())
              throw AsmError(ai.line, ai.col,
                             "call to undefined function '" + ai.target + "'");
            if (lib_index != 0 && it->second.lib_index != lib_index)
              throw AsmError(ai.line, ai.col,
                             "library code may only call its own module");
            const Addr after = addrs[i] + ins.length();
            ins.disp = static_cast<std::int32_t>(
                static_cast<std::int64_t>(it->second.addr) -
                static_cast<std::int64_t>(after));
            break;
          }
          case TargetKind::AddrOf: {
            Addr value = 0;
            std::uint32_t sym_module = 0;
            bool is_data = false;
            if (auto it = fn_addrs.find(ai.target); it != fn_addrs.end()) {
              value = it->second.addr;
              sym_module = it->second.lib_index;
            } else if (auto dit = data_syms_.find(ai.target); dit != data_syms_.end()) {
              value = dit->second;
              is_data = true;
            } else {
              // Function-local label?
              auto lit = fn.labels.find(ai.target);
              if (lit == fn.labels.end())
                throw AsmError(ai.line, ai.col, "unknown symbol '&" + ai.target + "'");
              value = addrs[lit->second];
              sym_module = lib_index;
            }
            if (lib_index != 0 && !is_data && sym_module != lib_index)
              throw AsmError(ai.line, ai.col,
                             "library code may only take addresses of its own symbols");
            ins.imm = static_cast<std::uint32_t>(value);
            if (!is_data)  // code symbols move when the rewriter relayouts
              mod.relocs.push_back({addrs[i] - base, ai.target});
            break;
          }
        }
        encode(ins, mod.bytes);
      }
      mod.functions.push_back({fn.name, fn_start - base, cursor - fn_start});
    }
    return mod;
  }
};

}  // namespace asmdetail

inline ProgramImage assemble(std::string_view source,
                             PageGeometry geom = {},
                             MemoryMap mem = {}) {
  asmdetail::Parser p(source, geom, mem);
  return p.parse();
}

}  // namespace vaptr
