#pragma once

// Program images: one main module plus optional shared-library modules, each
// a contiguous byte region of code with a function table. Clean images come
// from the assembler (functions packed back to back, instructions may
// straddle page boundaries). Rewritten (RSB) images additionally record
// filler ranges (page fill + page-end units between functions) and the
// callback entry page.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vaptr/isa.hpp"

namespace vaptr {

struct FunctionInfo {
  std::string name;
  std::uint64_t offset = 0;  // relative to module base
  std::uint64_t length = 0;
};

// A MovRI whose immediate is the address of a symbol. The rewriter must
// re-resolve these against the rewritten layout (the loader analog).
struct RelocEntry {
  std::uint64_t instr_offset = 0;  // module-relative offset of the MovRI
  std::string symbol;
};

struct ModuleCode {
  std::string name;
  Addr base = 0;
  bool pic = false;
  std::vector<std::uint8_t> bytes;
  std::vector<FunctionInfo> functions;
  std::vector<RelocEntry> relocs;
  // RSB only: [offset, length) ranges between functions (NOP fill and
  // page-end units). Together with functions they partition the code bytes.
  std::vector<std::pair<std::uint64_t, std::uint64_t>> fillers;

  Addr end() const { return base + bytes.size(); }
  std::uint64_t first_page(const PageGeometry& g) const { return base / g.page_size; }
  std::uint64_t page_count(const PageGeometry& g) const {
    if (bytes.empty()) return 0;
    return (base + bytes.size() - 1) / g.page_size - base / g.page_size + 1;
  }
};

struct CallbackInfo {
  int id = 0;
  std::string function;
  Addr entry = 0;  // address the kernel analog invokes (never randomized in RSBs)
};

struct MemoryMap {
  Addr code_base = 0x08048000;
  Addr data_base = 0x20000000;
  std::uint64_t data_size = 0x10000;
  Addr stack_base = 0x30000000;
  std::uint64_t stack_size = 0x10000;
  Addr lib_base = 0x49791000;
  std::uint64_t lib_stride = 0x00100000;
};

struct RsbFlags {
  bool is_rsb = false;
  // Page holding one DirectJump unit per callback; whitelisted at init.
  std::optional<std::uint64_t> callback_entry_page;
};

struct ImageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ProgramImage {
  PageGeometry geometry{};
  MemoryMap mem{};
  ModuleCode main;
  std::vector<ModuleCode> libs;
  Addr entry = 0;
  std::vector<CallbackInfo> callbacks;
  std::vector<std::uint8_t> data;
  RsbFlags rsb{};

  // lib_index 0 is the main image, i is libs[i-1].
  const ModuleCode& module_at(std::uint32_t lib_index) const {
    if (lib_index == 0) return main;
    if (lib_index > libs.size()) throw ImageError("bad library index");
    return libs[lib_index - 1];
  }
  std::uint32_t module_count() const {
    return static_cast<std::uint32_t>(libs.size() + 1);
  }

  const ModuleCode* module_containing(Addr a) const {
    if (a >= main.base && a < main.end()) return &main;
    for (const auto& l : libs)
      if (a >= l.base && a < l.end()) return &l;
    return nullptr;
  }

  struct FunctionRef {
    std::uint32_t lib_index;
    std::size_t fn_index;
  };
  std::optional<FunctionRef> find_function(const std::string& name) const {
    for (std::size_t i = 0; i < main.functions.size(); ++i)
      if (main.functions[i].name == name) return FunctionRef{0, i};
    for (std::uint32_t m = 0; m < libs.size(); ++m)
      for (std::size_t i = 0; i < libs[m].functions.size(); ++i)
        if (libs[m].functions[i].name == name)
          return FunctionRef{m + 1, i};
    return std::nullopt;
  }

  Addr function_addr(const FunctionRef& r) const {
    const ModuleCode& m = module_at(r.lib_index);
    return m.base + m.functions[r.fn_index].offset;
  }

  void validate() const;
};

namespace detail {

inline void validate_module(const ModuleCode& m, const PageGeometry& g,
                            bool allow_rsi) {
  if (m.base % g.page_size != 0)
    throw ImageError(m.name + ": module base not page aligned");
  if (!g.contains(m.base) || !g.contains(m.base + m.bytes.size()))
    throw ImageError(m.name + ": code exceeds address space");

  // Functions (plus fillers, for RSBs) must be disjoint and cover the bytes.
  std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
  for (const auto& f : m.functions) {
    if (f.length == 0) throw ImageError(m.name + ": empty function " + f.name);
    spans.emplace_back(f.offset, f.length);
  }
  for (const auto& [off, len] : m.fillers) spans.emplace_back(off, len);
  std::sort(spans.begin(), spans.end());
  std::uint64_t cursor = 0;
  for (const auto& [off, len] : spans) {
    if (off != cursor)
      throw ImageError(m.name + ": code bytes not exactly covered");
    cursor = off + len;
  }
  if (cursor != m.bytes.size())
    throw ImageError(m.name + ": code bytes not exactly covered");

  // Decode walk: every function (and filler) decodes cleanly start to end.
  auto walk = [&](std::uint64_t off, std::uint64_t len, const char* what) {
    std::span<const std::uint8_t> bytes(m.bytes);
    std::uint64_t at = off;
    while (at < off + len) {
      const DecodeResult r = decode_at(bytes, at);
      if (!r.ok())
        throw ImageError(m.name + ": " + what + " does not decode at offset " +
                         std::to_string(at));
      if (!allow_rsi && r.instr->op == Opcode::Rsi)
        throw ImageError(m.name + ": RSI unit in a clean image");
      at += r.instr->length();
    }
    if (at != off + len)
      throw ImageError(m.name + ": " + std::string(what) +
                       " decode walk overruns its end");
  };
  for (const auto& f : m.functions) walk(f.offset, f.length, f.name.c_str());
  for (const auto& [off, len] : m.fillers) walk(off, len, "filler");
}

}  // namespace detail

inline void ProgramImage::validate() const {
  if (!geometry.valid()) throw ImageError("invalid page geometry");
  detail::validate_module(main, geometry, rsb.is_rsb);
  for (const auto& l : libs) detail::validate_module(l, geometry, rsb.is_rsb);

  // Modules must not overlap each other (or data/stack).
  std::vector<std::pair<Addr, Addr>> regions;
  regions.emplace_back(main.base, main.end());
  for (const auto& l : libs) regions.emplace_back(l.base, l.end());
  regions.emplace_back(mem.data_base, mem.data_base + mem.data_size);
  regions.emplace_back(mem.stack_base, mem.stack_base + mem.stack_size);
  std::sort(regions.begin(), regions.end());
  for (std::size_t i = 1; i < regions.size(); ++i)
    if (regions[i].first < regions[i - 1].second)
      throw ImageError("overlapping memory regions");

  bool entry_ok = false;
  const ModuleCode* em = module_containing(entry);
  if (em != nullptr) {
    for (const auto& f : em->functions) {
      const Addr s = em->base + f.offset;
      if (entry >= s && entry < s + f.length) entry_ok = true;
    }
  }
  if (!entry_ok && rsb.callback_entry_page &&
      entry / geometry.page_size == *rsb.callback_entry_page)
    entry_ok = true;
  if (!entry_ok) throw ImageError("entry address lies outside every function");

  if (data.size() > mem.data_size) throw ImageError("data exceeds data region");

  std::map<std::string, int> names;
  for (const auto& f : main.functions) names[f.name]++;
  for (const auto& l : libs)
    for (const auto& f : l.functions) names[f.name]++;
  for (const auto& [n, c] : names)
    if (c > 1) throw ImageError("duplicate function name " + n);

  for (const auto& cb : callbacks) {
    if (!find_function(cb.function))
      throw ImageError("callback references unknown function " + cb.function);
  }
}

}  // namespace vaptr
