#pragma once

// Static binary rewriter: turns a clean image into a re-randomization-ready
// one. Every control transfer whose site and target live on different pages
// is replaced by an RSI unit (a trampoline into sys_jit); because each
// replacement changes the layout, instrumentation iterates until the set of
// inter-page transfers reaches a fixpoint. Two layout optimizations shrink
// that set first: small functions are packed so intra-function transfers
// become page-co-resident, and near-miss transfers inside large functions
// are nudged onto one page with NOP padding. Each page also ends with a
// fall-through unit so sequential execution never silently crosses a page.
//
// Layout ground rules the engine maintains:
//   - the last rsi_length bytes of every page are reserved for the page-end
//     unit; an instruction that would intrude moves to the next page whole
//   - unwritten gaps are zero bytes, and 0x00 is NOP, so every page decodes
//     cleanly end to end
//   - a module's final page gets no page-end unit (nothing follows it)

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include "vaptr/image.hpp"
#include "vaptr/isa.hpp"

namespace vaptr {

struct RewriteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RewriteOptions {
  bool enable_reorder = true;
  bool enable_rearrange = true;
  std::uint32_t max_iterations = 1000;
  std::uint8_t rsi_length = kRsiDefaultLength;
};

struct RewriteStats {
  std::uint32_t iterations = 0;
  std::uint64_t cft_total = 0;       // CFT instructions in the clean image
  std::uint64_t cft_replaced = 0;    // replaced by units
  std::uint64_t page_end_units = 0;
  std::uint64_t rsi_units = 0;       // cft_replaced + page_end_units
  std::uint64_t callback_units = 0;  // entry-page trampolines (counted apart)
  std::uint64_t size_before = 0;
  std::uint64_t size_after = 0;
  std::uint64_t pages_before = 0;
  std::uint64_t pages_after = 0;
  std::uint64_t padding_bytes = 0;     // every inserted NOP byte
  std::uint64_t rearrange_padding = 0; // subset from instruction rearranging
  bool superset_fallback = false;
};

enum class CftClass : std::uint8_t { IntraPage, InterPage };

struct RsiUnitRecord {
  CftKind kind = CftKind::DirectJump;
  std::uint32_t flag = 0;
  Cond cond = Cond::Eq;
  int reserved_slots = 0;
  std::uint32_t lib_index = 0;
  Addr site = 0;  // before-randomization address of the unit
  std::uint64_t target_arg = 0;
  std::uint64_t fallthrough = 0;
  std::uint8_t length = kRsiDefaultLength;
};

struct RewriteResult {
  ProgramImage rsb;
  std::vector<RsiUnitRecord> units;
  RewriteStats stats;
};

// Class of one control-transfer instruction at its current address.
struct CftSite {
  Addr site = 0;
  CftKind kind = CftKind::DirectJump;
  std::optional<Addr> target;  // static target (direct transfers only)
  CftClass cls = CftClass::InterPage;
};

namespace rw {

// ------------------------------------------------------------ decoded form

struct DecInstr {
  Instruction ins;
  Addr clean_addr = 0;
  bool is_cft = false;
  CftKind kind = CftKind::DirectJump;
  // Direct-transfer target: either an instruction in this module or a
  // function in another one (main calling into a library).
  enum class Ref : std::uint8_t { None, Local, External } ref = Ref::None;
  std::uint32_t tfn = 0, tidx = 0;  // Local
  std::uint32_t ext_module = 0, ext_fn = 0;  // External
};

struct DecFunction {
  std::string name;
  std::vector<DecInstr> instrs;
};

struct DecModule {
  std::uint32_t lib_index = 0;
  Addr base = 0;
  bool pic = false;
  std::string name;
  std::vector<DecFunction> fns;
  std::map<Addr, std::pair<std::uint32_t, std::uint32_t>> addr_to_instr;
  std::vector<RelocEntry> relocs;
};

using SiteId = std::tuple<std::uint32_t, std::uint32_t, std::uint32_t>;
using InterSet = std::set<SiteId>;

inline CftKind cft_kind_of(Opcode op) {
  switch (op) {
    case Opcode::Jrel: return CftKind::DirectJump;
    case Opcode::Callrel: return CftKind::DirectCall;
    case Opcode::Jcc: return CftKind::CondJump;
    case Opcode::Jmpi: return CftKind::IndirectJump;
    case Opcode::Calli: return CftKind::IndirectCall;
    case Opcode::Ret: return CftKind::Return;
    default: throw RewriteError("not a control transfer");
  }
}

inline std::vector<DecModule> decode_image(const ProgramImage& img) {
  std::vector<DecModule> mods;
  // Function-start directory for cross-module call resolution.
  struct FnStart { std::uint32_t module, fn; };
  std::map<Addr, FnStart> fn_starts;

  for (std::uint32_t mi = 0; mi < img.module_count(); ++mi) {
    const ModuleCode& mc = img.module_at(mi);
    DecModule dm;
    dm.lib_index = mi;
    dm.base = mc.base;
    dm.pic = mc.pic;
    dm.name = mc.name;
    dm.relocs = mc.relocs;
    for (std::uint32_t fi = 0; fi < mc.functions.size(); ++fi) {
      const FunctionInfo& f = mc.functions[fi];
      fn_starts[mc.base + f.offset] = {mi, fi};
      DecFunction df;
      df.name = f.name;
      std::uint64_t at = f.offset;
      std::uint32_t idx = 0;
      while (at < f.offset + f.length) {
        const DecodeResult r = decode_at(std::span(mc.bytes), at);
        if (!r.ok()) throw RewriteError(f.name + ": undecodable instruction");
        if (r.instr->op == Opcode::Rsi)
          throw RewriteError("instrument requires a clean image");
        DecInstr di;
        di.ins = *r.instr;
        di.clean_addr = mc.base + at;
        di.is_cft = r.instr->is_control_transfer();
        if (di.is_cft) di.kind = cft_kind_of(r.instr->op);
        dm.addr_to_instr[di.clean_addr] = {fi, idx};
        df.instrs.push_back(di);
        at += r.instr->length();
        ++idx;
      }
      dm.fns.push_back(std::move(df));
    }
    mods.push_back(std::move(dm));
  }

  // Resolve direct-transfer targets against clean addresses.
  for (auto& dm : mods) {
    for (std::uint32_t fi = 0; fi < dm.fns.size(); ++fi) {
      for (auto& di : dm.fns[fi].instrs) {
        if (!di.is_cft) continue;
        const Opcode op = di.ins.op;
        if (op != Opcode::Jrel && op != Opcode::Jcc && op != Opcode::Callrel)
          continue;
        const Addr target = di.clean_addr + di.ins.length() + di.ins.disp;
        if (auto it = dm.addr_to_instr.find(target); it != dm.addr_to_instr.end()) {
          di.ref = DecInstr::Ref::Local;
          di.tfn = it->second.first;
          di.tidx = it->second.second;
          continue;
        }
        auto fit = fn_starts.find(target);
        if (fit == fn_starts.end())
          throw RewriteError(dm.fns[fi].name +
                             ": direct transfer target is not an instruction");
        if (op != Opcode::Callrel)
          throw RewriteError(dm.fns[fi].name + ": jump leaves its module");
        if (dm.lib_index != 0)
          throw RewriteError(dm.fns[fi].name +
                             ": library code may only call its own module");
        di.ref = DecInstr::Ref::External;
        di.ext_module = fit->second.module;
        di.ext_fn = fit->second.fn;
      }
    }
  }
  return mods;
}

// ------------------------------------------------------------ layout engine

struct Item {
  enum class Kind : std::uint8_t { Instr, Unit, Pad } kind = Kind::Instr;
  std::uint32_t fn = 0, idx = 0;  // Instr/Unit: which clean instruction
  std::uint32_t len = 0;
};

struct FnPlan {
  std::uint32_t fn = 0;
  bool page_align_before = false;
  std::vector<Item> items;
  std::uint64_t body_len() const {
    std::uint64_t n = 0;
    for (const auto& it : items) n += it.len;
    return n;
  }
};

struct ModulePlan {
  std::vector<FnPlan> order;
};

struct ModuleLayout {
  std::vector<std::vector<Addr>> item_addrs;  // [plan pos][item pos]
  std::map<std::pair<std::uint32_t, std::uint32_t>, Addr> instr_addr;
  std::vector<std::pair<Addr, Addr>> fn_spans;  // by module fn index
  Addr base = 0;
  Addr end = 0;
  std::uint64_t first_page = 0, last_page = 0;
};

inline ModuleLayout layout_module(const ModulePlan& plan, Addr base,
                                  const PageGeometry& g, std::uint8_t rsi_len,
                                  std::size_t module_fn_count) {
  const std::uint64_t ps = g.page_size;
  const std::uint64_t capacity = ps - rsi_len;
  ModuleLayout L;
  L.base = base;
  L.fn_spans.assign(module_fn_count, {0, 0});
  Addr cursor = base;
  for (const auto& fp : plan.order) {
    if (fp.page_align_before && cursor % ps != 0)
      cursor = (cursor / ps + 1) * ps;
    std::vector<Addr> addrs;
    addrs.reserve(fp.items.size());
    const Addr fn_start_probe = cursor;
    for (const auto& it : fp.items) {
      if (it.kind == Item::Kind::Pad) {
        // NOP padding flows around the page-end reserve byte by byte.
        addrs.push_back(cursor);
        std::uint64_t remaining = it.len;
        while (remaining > 0) {
          const Addr data_end = (cursor / ps) * ps + capacity;
          const std::uint64_t room = data_end > cursor ? data_end - cursor : 0;
          const std::uint64_t take = std::min<std::uint64_t>(room, remaining);
          cursor += take;
          remaining -= take;
          if (remaining > 0) cursor = (cursor / ps + 1) * ps;
        }
        continue;
      }
      if (it.len > capacity)
        throw RewriteError("instruction cannot fit a page alongside its unit");
      const Addr data_end = (cursor / ps) * ps + capacity;
      if (cursor + it.len > data_end) cursor = (cursor / ps + 1) * ps;
      addrs.push_back(cursor);
      if (it.kind != Item::Kind::Pad)
        L.instr_addr[{it.fn, it.idx}] = cursor;
      cursor += it.len;
    }
    const Addr fn_start = addrs.empty() ? fn_start_probe : addrs.front();
    L.fn_spans[fp.fn] = {fn_start, cursor};
    L.item_addrs.push_back(std::move(addrs));
  }
  L.end = cursor;
  if (!g.contains(L.end)) throw RewriteError("module exceeds address space");
  L.first_page = base / ps;
  L.last_page = cursor > base ? (cursor - 1) / ps : L.first_page;
  return L;
}

// --------------------------------------------------------------- plan build

inline std::uint32_t instr_len_in(const DecInstr& di, bool replaced,
                                  std::uint8_t rsi_len) {
  return replaced ? rsi_len : static_cast<std::uint32_t>(di.ins.length());
}

inline ModulePlan base_plan(const DecModule& dm, const InterSet& inter,
                            std::uint8_t rsi_len) {
  ModulePlan plan;
  for (std::uint32_t fi = 0; fi < dm.fns.size(); ++fi) {
    FnPlan fp;
    fp.fn = fi;
    const auto& instrs = dm.fns[fi].instrs;
    for (std::uint32_t ii = 0; ii < instrs.size(); ++ii) {
      const bool replaced = inter.count({dm.lib_index, fi, ii}) > 0;
      Item it;
      it.kind = replaced ? Item::Kind::Unit : Item::Kind::Instr;
      it.fn = fi;
      it.idx = ii;
      it.len = instr_len_in(instrs[ii], replaced, rsi_len);
      fp.items.push_back(it);
    }
    plan.order.push_back(std::move(fp));
  }
  return plan;
}

// Function reordering: small ("Type-I") functions, sorted by instrumented
// size descending, are first-fit packed into pages placed below every large
// ("Type-II") function. A function is Type-I when it fits a page together
// with the page-end unit, which is what makes packing always succeed and
// keeps packed functions from straddling.
inline ModulePlan reorder_plan(const ModulePlan& in, const PageGeometry& g,
                               std::uint8_t rsi_len) {
  const std::uint64_t capacity = g.page_size - rsi_len;
  std::vector<std::size_t> small, large;
  for (std::size_t i = 0; i < in.order.size(); ++i) {
    (in.order[i].body_len() <= capacity ? small : large).push_back(i);
  }
  std::stable_sort(small.begin(), small.end(), [&](std::size_t a, std::size_t b) {
    return in.order[a].body_len() > in.order[b].body_len();
  });

  std::vector<std::vector<std::size_t>> bins;
  std::vector<std::uint64_t> room;
  for (std::size_t s : small) {
    const std::uint64_t len = in.order[s].body_len();
    bool placed = false;
    for (std::size_t b = 0; b < bins.size(); ++b) {
      if (room[b] >= len) {
        bins[b].push_back(s);
        room[b] -= len;
        placed = true;
        break;
      }
    }
    if (!placed) {
      bins.push_back({s});
      room.push_back(capacity - len);
    }
  }

  ModulePlan out;
  for (const auto& bin : bins) {
    for (std::size_t k = 0; k < bin.size(); ++k) {
      FnPlan fp = in.order[bin[k]];
      fp.page_align_before = k == 0;
      out.order.push_back(std::move(fp));
    }
  }
  for (std::size_t k = 0; k < large.size(); ++k) {
    FnPlan fp = in.order[large[k]];
    fp.page_align_before = k == 0;
    out.order.push_back(std::move(fp));
  }
  return out;
}

// Instruction rearranging: inside functions too large to pack, a direct
// transfer whose target sits in the same function within one page size can
// often be made page-co-resident by pushing the earlier of (site, target)
// onto the next page with NOP padding. Minimal padding is found by walking
// candidate sizes; if nothing <= page_size co-locates the pair, the transfer
// simply stays instrumented.
inline void rearrange_plan(ModulePlan& plan, const DecModule& dm,
                           const PageGeometry& g, std::uint8_t rsi_len,
                           Addr base, std::uint64_t* padding_added) {
  const std::uint64_t ps = g.page_size;
  const std::uint64_t capacity = ps - rsi_len;

  // Walk one function's items from its start address, honoring the page-end
  // reserve, and report each item's address with `pad` NOPs inserted before
  // item position `pad_before`.
  auto walk = [&](const FnPlan& fp, Addr start, std::size_t pad_before,
                  std::uint64_t pad) {
    std::vector<Addr> addrs(fp.items.size());
    Addr cursor = start;
    auto place_pad = [&](std::uint64_t n) {
      while (n > 0) {
        const Addr data_end = (cursor / ps) * ps + capacity;
        const std::uint64_t room = data_end > cursor ? data_end - cursor : 0;
        const std::uint64_t take = std::min<std::uint64_t>(room, n);
        cursor += take;
        n -= take;
        if (n > 0) cursor = (cursor / ps + 1) * ps;
      }
    };
    for (std::size_t i = 0; i < fp.items.size(); ++i) {
      if (i == pad_before) place_pad(pad);
      const Item& it = fp.items[i];
      if (it.kind == Item::Kind::Pad) {
        addrs[i] = cursor;
        place_pad(it.len);
        continue;
      }
      const Addr data_end = (cursor / ps) * ps + capacity;
      if (cursor + it.len > data_end) cursor = (cursor / ps + 1) * ps;
      addrs[i] = cursor;
      cursor += it.len;
    }
    return addrs;
  };

  // One module layout per sweep: padding inserted at function `pos` never
  // moves functions before it, so restarting the scan after each insertion
  // fixes candidates in the same greedy order as a per-function loop would,
  // without a full relayout per function.
  bool changed = true;
  while (changed) {
    changed = false;
    const ModuleLayout L = layout_module(plan, base, g, rsi_len, dm.fns.size());

    for (std::size_t pos = 0; pos < plan.order.size() && !changed; ++pos) {
      FnPlan& fp = plan.order[pos];
      if (fp.body_len() <= capacity) continue;  // Type-I: reordering's job
      const std::vector<Addr>& cur = L.item_addrs[pos];
      const Addr fn_start = cur.empty() ? 0 : cur.front();

      // Item position of each clean instruction, for target lookup.
      std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> item_pos;
      for (std::size_t i = 0; i < fp.items.size(); ++i)
        if (fp.items[i].kind != Item::Kind::Pad)
          item_pos[{fp.items[i].fn, fp.items[i].idx}] = i;

      for (std::size_t i = 0; i < fp.items.size() && !changed; ++i) {
        const Item& it = fp.items[i];
        if (it.kind == Item::Kind::Pad) continue;
        const DecInstr& di = dm.fns[it.fn].instrs[it.idx];
        if (!di.is_cft || di.ref != DecInstr::Ref::Local) continue;
        auto tp = item_pos.find({di.tfn, di.tidx});
        if (tp == item_pos.end()) continue;  // target outside this function
        const std::size_t j = tp->second;
        const Addr site = cur[i];
        const Addr target = cur[j];
        if (site / ps == target / ps) continue;
        const std::uint64_t dist = site > target ? site - target : target - site;
        if (dist >= ps) continue;

        const std::size_t earlier = std::min(i, j);
        for (std::uint64_t pad = 1; pad <= ps; ++pad) {
          const auto trial = walk(fp, fn_start, earlier, pad);
          if (trial[i] / ps == trial[j] / ps) {
            Item p;
            p.kind = Item::Kind::Pad;
            p.len = static_cast<std::uint32_t>(pad);
            fp.items.insert(fp.items.begin() + earlier, p);
            if (padding_added != nullptr) *padding_added += pad;
            changed = true;
            break;
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------- classification

struct IterationLayout {
  std::vector<ModulePlan> plans;
  std::vector<ModuleLayout> layouts;
};

inline std::optional<Addr> direct_target_addr(const IterationLayout& il,
                                              const DecInstr& di) {
  if (di.ref == DecInstr::Ref::Local) {
    // Same module as the site; caller passes the site's module layout via
    // lookup below. Resolved by the caller because the module index lives
    // there; kept here for the external case.
    return std::nullopt;
  }
  if (di.ref == DecInstr::Ref::External) {
    const auto& L = il.layouts[di.ext_module];
    const auto span = L.fn_spans[di.ext_fn];
    return span.first;
  }
  return std::nullopt;
}

inline InterSet classify_iteration(const std::vector<DecModule>& mods,
                                   const IterationLayout& il,
                                   const PageGeometry& g) {
  InterSet out;
  for (std::uint32_t mi = 0; mi < mods.size(); ++mi) {
    const DecModule& dm = mods[mi];
    const ModuleLayout& L = il.layouts[mi];
    for (std::uint32_t fi = 0; fi < dm.fns.size(); ++fi) {
      const auto& instrs = dm.fns[fi].instrs;
      for (std::uint32_t ii = 0; ii < instrs.size(); ++ii) {
        const DecInstr& di = instrs[ii];
        if (!di.is_cft) continue;
        const SiteId id{mi, fi, ii};
        switch (di.kind) {
          case CftKind::Return:
          case CftKind::IndirectJump:
          case CftKind::IndirectCall:
            out.insert(id);  // runtime targets: always treated inter-page
            continue;
          default:
            break;
        }
        const Addr site = L.instr_addr.at({fi, ii});
        Addr target = 0;
        if (di.ref == DecInstr::Ref::Local) {
          target = L.instr_addr.at({di.tfn, di.tidx});
        } else if (auto t = direct_target_addr(il, di)) {
          target = *t;
        } else {
          continue;  // unresolved: leave uninstrumented (cannot happen)
        }
        if (site / g.page_size != target / g.page_size) out.insert(id);
      }
    }
  }
  return out;
}

inline IterationLayout build_iteration(const std::vector<DecModule>& mods,
                                       const InterSet& inter,
                                       const PageGeometry& g,
                                       const RewriteOptions& opts,
                                       std::uint64_t* rearrange_padding) {
  IterationLayout il;
  for (const auto& dm : mods) {
    ModulePlan plan = base_plan(dm, inter, opts.rsi_length);
    if (opts.enable_reorder) plan = reorder_plan(plan, g, opts.rsi_length);
    if (opts.enable_rearrange)
      rearrange_plan(plan, dm, g, opts.rsi_length, dm.base, rearrange_padding);
    il.plans.push_back(plan);
    il.layouts.push_back(
        layout_module(il.plans.back(), dm.base, g, opts.rsi_length,
                      dm.fns.size()));
  }
  return il;
}

}  // namespace rw

// ------------------------------------------------------------- public ops

// One instrumentation pass: replace the given inter-page set (sites by clean
// address), relayout with the configured optimizations, reclassify under the
// new layout. instrument() is the fixpoint loop over this function.
struct InstrumentOnceResult {
  std::set<Addr> next_inter;      // clean site addresses
  std::uint64_t candidate_size = 0;
  std::uint64_t candidate_pages = 0;
};

namespace rw {

inline InterSet inter_from_addrs(const std::vector<DecModule>& mods,
                                 const std::set<Addr>& sites) {
  InterSet out;
  for (const Addr a : sites) {
    bool found = false;
    for (std::uint32_t mi = 0; mi < mods.size() && !found; ++mi) {
      auto it = mods[mi].addr_to_instr.find(a);
      if (it != mods[mi].addr_to_instr.end()) {
        out.insert({mi, it->second.first, it->second.second});
        found = true;
      }
    }
    if (!found) throw RewriteError("inter set names a non-instruction address");
  }
  return out;
}

inline std::set<Addr> addrs_from_inter(const std::vector<DecModule>& mods,
                                       const InterSet& s) {
  std::set<Addr> out;
  for (const auto& [mi, fi, ii] : s)
    out.insert(mods[mi].fns[fi].instrs[ii].clean_addr);
  return out;
}

inline InterSet all_cfts(const std::vector<DecModule>& mods) {
  InterSet out;
  for (std::uint32_t mi = 0; mi < mods.size(); ++mi)
    for (std::uint32_t fi = 0; fi < mods[mi].fns.size(); ++fi)
      for (std::uint32_t ii = 0; ii < mods[mi].fns[fi].instrs.size(); ++ii)
        if (mods[mi].fns[fi].instrs[ii].is_cft) out.insert({mi, fi, ii});
  return out;
}

}  // namespace rw

inline InstrumentOnceResult instrument_once(const ProgramImage& clean,
                                            const std::set<Addr>& inter_sites,
                                            RewriteOptions opts = {}) {
  clean.validate();
  const auto mods = rw::decode_image(clean);
  const auto inter = rw::inter_from_addrs(mods, inter_sites);
  const auto il =
      rw::build_iteration(mods, inter, clean.geometry, opts, nullptr);
  const auto next = rw::classify_iteration(mods, il, clean.geometry);
  InstrumentOnceResult res;
  res.next_inter = rw::addrs_from_inter(mods, next);
  for (const auto& L : il.layouts) {
    res.candidate_size += L.end - L.base;
    res.candidate_pages += L.last_page - L.first_page + 1;
  }
  return res;
}

namespace rw {

// Materialize the fixpoint layout into an image: encode surviving
// instructions (direct transfers get their displacements recomputed for the
// new distances), synthesize unit encodings, drop page-end units into every
// reserved slot except the module's last page, leave gaps as NOPs.
struct Materialized {
  ProgramImage rsb;
  std::vector<RsiUnitRecord> units;
  std::uint64_t fill_padding = 0;
  std::uint64_t page_end_units = 0;
  std::uint64_t cft_replaced = 0;
};

inline Materialized materialize(const ProgramImage& clean,
                                const std::vector<DecModule>& mods,
                                const IterationLayout& il,
                                const RewriteOptions& opts) {
  const PageGeometry& g = clean.geometry;
  const std::uint64_t ps = g.page_size;
  Materialized out;
  out.rsb = clean;  // geometry, mem map, data, callbacks copied
  out.rsb.rsb.is_rsb = true;

  auto resolve_instr_addr = [&](std::uint32_t mi, std::uint32_t fi,
                                std::uint32_t ii) {
    return il.layouts[mi].instr_addr.at({fi, ii});
  };

  for (std::uint32_t mi = 0; mi < mods.size(); ++mi) {
    const DecModule& dm = mods[mi];
    const ModuleLayout& L = il.layouts[mi];
    const ModulePlan& plan = il.plans[mi];
    ModuleCode& mc = mi == 0 ? out.rsb.main : out.rsb.libs[mi - 1];
    mc.bytes.assign(L.end - L.base, 0);  // gaps decode as NOP
    mc.functions.clear();
    mc.fillers.clear();
    mc.relocs.clear();

    auto put = [&](Addr at, const std::vector<std::uint8_t>& bytes) {
      std::copy(bytes.begin(), bytes.end(), mc.bytes.begin() + (at - L.base));
    };

    // Module-relative storage for direct targets inside PIC libraries
    // (sys_jit adds the base back when the value is below it).
    auto store_target = [&](Addr abs) -> std::uint64_t {
      if (dm.pic && abs >= dm.base) return abs - dm.base;
      return abs;
    };

    for (std::size_t pos = 0; pos < plan.order.size(); ++pos) {
      const FnPlan& fp = plan.order[pos];
      for (std::size_t k = 0; k < fp.items.size(); ++k) {
        const Item& item = fp.items[k];
        if (item.kind == Item::Kind::Pad) continue;  // already NOPs
        const Addr at = il.layouts[mi].item_addrs[pos][k];
        const DecInstr& di = dm.fns[item.fn].instrs[item.idx];

        if (item.kind == Item::Kind::Instr) {
          Instruction ins = di.ins;
          // Re-encode surviving direct transfers against the new layout.
          if (di.is_cft && di.ref == DecInstr::Ref::Local) {
            const Addr target = resolve_instr_addr(mi, di.tfn, di.tidx);
            ins.disp = static_cast<std::int32_t>(
                static_cast<std::int64_t>(target) -
                static_cast<std::int64_t>(at + ins.length()));
          } else if (di.is_cft && di.ref == DecInstr::Ref::External) {
            const Addr target = il.layouts[di.ext_module].fn_spans[di.ext_fn].first;
            ins.disp = static_cast<std::int32_t>(
                static_cast<std::int64_t>(target) -
                static_cast<std::int64_t>(at + ins.length()));
          }
          put(at, encode(ins));
          continue;
        }

        // RSI unit replacing this control transfer.
        RsiUnitRecord rec;
        rec.kind = di.kind;
        rec.lib_index = mi;
        rec.flag = make_rsi_flag(di.kind, mi);
        rec.reserved_slots = rsi_reserved_slots(di.kind);
        rec.site = at;
        rec.length = opts.rsi_length;
        switch (di.kind) {
          case CftKind::DirectJump:
          case CftKind::DirectCall: {
            Addr target = 0;
            if (di.ref == DecInstr::Ref::Local)
              target = resolve_instr_addr(mi, di.tfn, di.tidx);
            else
              target = il.layouts[di.ext_module].fn_spans[di.ext_fn].first;
            rec.target_arg = store_target(target);
            break;
          }
          case CftKind::CondJump: {
            rec.cond = di.ins.cond;
            const Addr target = resolve_instr_addr(mi, di.tfn, di.tidx);
            rec.target_arg = store_target(target);
            const auto& instrs = dm.fns[item.fn].instrs;
            const Addr fall = item.idx + 1 < instrs.size()
                                  ? resolve_instr_addr(mi, item.fn, item.idx + 1)
                                  : at + opts.rsi_length;
            rec.fallthrough = store_target(fall);
            break;
          }
          case CftKind::IndirectJump:
          case CftKind::IndirectCall:
            rec.target_arg = di.ins.r1;  // register number
            break;
          case CftKind::Return:
            rec.target_arg = 0;
            break;
          case CftKind::PageEndFallthrough:
            throw RewriteError("page-end unit in the replacement set");
        }
        Instruction ins;
        ins.op = Opcode::Rsi;
        ins.cond = rec.cond;
        ins.rsi = {rec.flag, rec.cond,
                   static_cast<std::uint32_t>(rec.target_arg),
                   static_cast<std::uint32_t>(rec.fallthrough), rec.length};
        put(at, encode(ins));
        out.units.push_back(rec);
        ++out.cft_replaced;
      }
    }

    // Page-end units: every page of the module except its last.
    for (std::uint64_t p = L.first_page; p < L.last_page; ++p) {
      const Addr slot = (p + 1) * ps - opts.rsi_length;
      RsiUnitRecord rec;
      rec.kind = CftKind::PageEndFallthrough;
      rec.lib_index = mi;
      rec.flag = make_rsi_flag(CftKind::PageEndFallthrough, mi);
      rec.reserved_slots = rsi_reserved_slots(rec.kind);
      rec.site = slot;
      rec.length = opts.rsi_length;
      rec.target_arg = (p + 1) * ps;  // absolute: never below a PIC base
      Instruction ins;
      ins.op = Opcode::Rsi;
      ins.rsi = {rec.flag, Cond::Eq, static_cast<std::uint32_t>(rec.target_arg),
                 0, rec.length};
      put(slot, encode(ins));
      out.units.push_back(rec);
      ++out.page_end_units;
    }

    // Function table (spans include any embedded fill/page-end units) and
    // filler ranges between them.
    std::vector<std::pair<Addr, Addr>> spans = L.fn_spans;
    for (std::uint32_t fi = 0; fi < dm.fns.size(); ++fi) {
      mc.functions.push_back({dm.fns[fi].name, spans[fi].first - L.base,
                              spans[fi].second - spans[fi].first});
    }
    std::sort(spans.begin(), spans.end());
    Addr cursor = L.base;
    for (const auto& [s, e] : spans) {
      if (s > cursor) {
        mc.fillers.emplace_back(cursor - L.base, s - cursor);
        out.fill_padding += s - cursor;
      }
      cursor = e;
    }
    if (L.end > cursor) {
      mc.fillers.emplace_back(cursor - L.base, L.end - cursor);
      out.fill_padding += L.end - cursor;
    }
    // Plus the in-span gaps (page fill inside straddling functions) — every
    // zero byte that is not an encoded item or unit is padding.
    // (Counted by subtraction below in instrument().)

    // Re-resolve address-of relocations against the new layout.
    for (const RelocEntry& re : dm.relocs) {
      const Addr site_clean = dm.base + re.instr_offset;
      const auto [sfi, sii] = dm.addr_to_instr.at(site_clean);
      const Addr new_site = resolve_instr_addr(mi, sfi, sii);
      // The clean immediate is the symbol's clean address; map it forward.
      const DecInstr& mov = dm.fns[sfi].instrs[sii];
      const Addr sym_clean = mov.ins.imm;
      Addr sym_new = 0;
      bool resolved = false;
      for (std::uint32_t mj = 0; mj < mods.size() && !resolved; ++mj) {
        auto it = mods[mj].addr_to_instr.find(sym_clean);
        if (it != mods[mj].addr_to_instr.end()) {
          sym_new = il.layouts[mj].instr_addr.at(it->second);
          resolved = true;
        }
      }
      if (!resolved)
        throw RewriteError("relocation symbol '" + re.symbol +
                           "' does not name an instruction");
      Instruction ins = mov.ins;
      ins.imm = static_cast<std::uint32_t>(sym_new);
      put(new_site, encode(ins));
      mc.relocs.push_back({new_site - L.base, re.symbol});
    }
  }

  // Entry follows its instruction into the new layout.
  {
    bool found = false;
    for (std::uint32_t mi = 0; mi < mods.size() && !found; ++mi) {
      auto it = mods[mi].addr_to_instr.find(clean.entry);
      if (it != mods[mi].addr_to_instr.end()) {
        out.rsb.entry = il.layouts[mi].instr_addr.at(it->second);
        found = true;
      }
    }
    if (!found) throw RewriteError("entry does not name an instruction");
  }
  return out;
}

}  // namespace rw

// Callback extraction: one DirectJump unit per callback on a dedicated page
// above the main module's code. The kernel always enters through this page;
// it is whitelisted (never randomized) so registered entry addresses stay
// valid across shuffles while the bodies keep moving.
inline ProgramImage extract_callbacks(const ProgramImage& img,
                                      RewriteOptions opts = {}) {
  if (img.callbacks.empty())
    throw RewriteError("extract_callbacks: image has no callbacks");
  const std::uint64_t ps = img.geometry.page_size;
  if (img.callbacks.size() * opts.rsi_length > ps)
    throw RewriteError("callbacks exceed one entry page");

  ProgramImage out = img;
  ModuleCode& mc = out.main;
  const Addr code_end = mc.base + mc.bytes.size();
  const Addr page_start = (code_end % ps == 0)
                              ? code_end
                              : (code_end / ps + 1) * ps;
  const std::uint64_t lead_fill = page_start - code_end;
  if (lead_fill > 0) mc.fillers.emplace_back(mc.bytes.size(), lead_fill);
  mc.bytes.resize(mc.bytes.size() + lead_fill + ps, 0);

  for (std::size_t i = 0; i < out.callbacks.size(); ++i) {
    auto ref = out.find_function(out.callbacks[i].function);
    if (!ref || ref->lib_index != 0)
      throw RewriteError("callback body must live in the main image");
    const Addr body = out.function_addr(*ref);
    const Addr site = page_start + i * opts.rsi_length;
    Instruction ins;
    ins.op = Opcode::Rsi;
    ins.rsi = {make_rsi_flag(CftKind::DirectJump, 0), Cond::Eq,
               static_cast<std::uint32_t>(body), 0, opts.rsi_length};
    const auto bytes = encode(ins);
    std::copy(bytes.begin(), bytes.end(),
              mc.bytes.begin() + (site - mc.base));
    out.callbacks[i].entry = site;
  }
  mc.fillers.emplace_back(page_start - mc.base, ps);
  out.rsb.is_rsb = true;
  out.rsb.callback_entry_page = page_start / ps;
  return out;
}

// The rewriter: iterate instrumentation until the inter-page set is stable.
// Pass 1 instruments every control transfer; pass k reuses pass k-1's
// classification. If the sets ever cycle instead of converging, the union of
// the cycling sets is instrumented (extra units are semantically neutral)
// and grown until classification stays inside it.
inline RewriteResult instrument(const ProgramImage& clean,
                                RewriteOptions opts = {}) {
  clean.validate();
  if (opts.rsi_length < kRsiMinLength)
    throw RewriteError("rsi_length must be at least 16");
  if (clean.geometry.page_size < opts.rsi_length + 24ull)
    throw RewriteError("page size too small for the unit length");

  const auto mods = rw::decode_image(clean);
  RewriteStats stats;
  for (std::uint32_t mi = 0; mi < clean.module_count(); ++mi) {
    const auto& mc = clean.module_at(mi);
    stats.size_before += mc.bytes.size();
    stats.pages_before += mc.page_count(clean.geometry);
  }
  stats.cft_total = rw::all_cfts(mods).size();

  rw::InterSet current = rw::all_cfts(mods);
  std::set<rw::InterSet> seen;
  rw::IterationLayout final_layout;
  rw::InterSet final_set;
  std::uint64_t rearrange_padding = 0;
  bool done = false;

  for (std::uint32_t iter = 1; iter <= opts.max_iterations; ++iter) {
    rearrange_padding = 0;
    auto il = rw::build_iteration(mods, current, clean.geometry, opts,
                                  &rearrange_padding);
    const rw::InterSet next =
        rw::classify_iteration(mods, il, clean.geometry);
    stats.iterations = iter;
    if (next == current) {
      final_layout = std::move(il);
      final_set = current;
      done = true;
      break;
    }
    if (seen.count(next) > 0) {
      // Oscillation: instrument the union of the two cycling states and
      // grow it until classification is closed within it. Growing is what
      // establishes correctness, so the seed stays minimal; folding in the
      // whole history would drag the conservative first pass (every
      // transfer) back in and erase the optimization gains.
      rw::InterSet u = next;
      u.insert(current.begin(), current.end());
      while (true) {
        ++stats.iterations;
        if (stats.iterations > opts.max_iterations)
          throw RewriteError("no fixpoint within the iteration budget");
        rearrange_padding = 0;
        auto ul = rw::build_iteration(mods, u, clean.geometry, opts,
                                      &rearrange_padding);
        const rw::InterSet c =
            rw::classify_iteration(mods, ul, clean.geometry);
        rw::InterSet grown = u;
        grown.insert(c.begin(), c.end());
        if (grown == u) {
          final_layout = std::move(ul);
          final_set = u;
          break;
        }
        u = std::move(grown);
      }
      stats.superset_fallback = true;
      done = true;
      break;
    }
    seen.insert(current);
    current = next;
  }
  if (!done) throw RewriteError("no fixpoint within the iteration budget");

  auto mat = rw::materialize(clean, mods, final_layout, opts);
  stats.cft_replaced = mat.cft_replaced;
  stats.page_end_units = mat.page_end_units;
  stats.rsi_units = mat.cft_replaced + mat.page_end_units;

  RewriteResult result;
  result.rsb = std::move(mat.rsb);
  result.units = std::move(mat.units);

  if (!result.rsb.callbacks.empty()) {
    result.rsb = extract_callbacks(result.rsb, opts);
    stats.callback_units = result.rsb.callbacks.size();
    for (const auto& cb : result.rsb.callbacks) {
      RsiUnitRecord rec;
      rec.kind = CftKind::DirectJump;
      rec.flag = make_rsi_flag(CftKind::DirectJump, 0);
      rec.reserved_slots = rsi_reserved_slots(rec.kind);
      rec.site = cb.entry;
      rec.length = opts.rsi_length;
      auto ref = result.rsb.find_function(cb.function);
      rec.target_arg = result.rsb.function_addr(*ref);
      result.units.push_back(rec);
    }
  }

  for (std::uint32_t mi = 0; mi < result.rsb.module_count(); ++mi) {
    const auto& mc = result.rsb.module_at(mi);
    stats.size_after += mc.bytes.size();
    stats.pages_after += mc.page_count(result.rsb.geometry);
  }
  // Every byte that is not a surviving instruction or a unit is NOP padding.
  {
    std::uint64_t item_bytes = 0;
    for (std::uint32_t mi = 0; mi < mods.size(); ++mi)
      for (std::uint32_t fi = 0; fi < mods[mi].fns.size(); ++fi)
        for (std::uint32_t ii = 0; ii < mods[mi].fns[fi].instrs.size(); ++ii) {
          const bool replaced = final_set.count({mi, fi, ii}) > 0;
          item_bytes += replaced ? opts.rsi_length
                                 : mods[mi].fns[fi].instrs[ii].ins.length();
        }
    item_bytes += stats.page_end_units * opts.rsi_length;
    item_bytes += stats.callback_units * opts.rsi_length;
    stats.padding_bytes = stats.size_after - item_bytes;
    stats.rearrange_padding = rearrange_padding;
  }

  result.rsb.validate();
  result.stats = stats;
  return result;
}

// Standalone views of the two optimization passes (each relayouts the image
// through the same engine, with the other pass disabled and nothing forced
// into the replacement set).
inline ProgramImage reorder_functions(const ProgramImage& img,
                                      RewriteOptions opts = {}) {
  opts.enable_reorder = true;
  opts.enable_rearrange = false;
  const auto mods = rw::decode_image(img);
  const auto il = rw::build_iteration(mods, {}, img.geometry, opts, nullptr);
  auto mat = rw::materialize(img, mods, il, opts);
  mat.rsb.validate();
  return std::move(mat.rsb);
}

inline ProgramImage rearrange_instructions(const ProgramImage& img,
                                           RewriteOptions opts = {}) {
  opts.enable_reorder = false;
  opts.enable_rearrange = true;
  const auto mods = rw::decode_image(img);
  std::uint64_t pad = 0;
  const auto il = rw::build_iteration(mods, {}, img.geometry, opts, &pad);
  auto mat = rw::materialize(img, mods, il, opts);
  mat.rsb.validate();
  return std::move(mat.rsb);
}

// Classification of every control-transfer *instruction* in an image at its
// current address (RSI units are already instrumented and are skipped).
inline std::vector<CftSite> classify_cft(const ProgramImage& img) {
  const std::uint64_t ps = img.geometry.page_size;
  std::vector<CftSite> out;
  for (std::uint32_t mi = 0; mi < img.module_count(); ++mi) {
    const ModuleCode& mc = img.module_at(mi);
    auto walk = [&](std::uint64_t off, std::uint64_t len) {
      std::uint64_t at = off;
      while (at < off + len) {
        const DecodeResult r = decode_at(std::span(mc.bytes), at);
        if (!r.ok()) throw RewriteError("image does not decode");
        const Instruction& ins = *r.instr;
        if (ins.is_control_transfer()) {
          CftSite site;
          site.site = mc.base + at;
          site.kind = rw::cft_kind_of(ins.op);
          if (ins.op == Opcode::Jrel || ins.op == Opcode::Jcc ||
              ins.op == Opcode::Callrel) {
            const Addr t = site.site + ins.length() + ins.disp;
            site.target = t;
            site.cls = (site.site / ps == t / ps) ? CftClass::IntraPage
                                                  : CftClass::InterPage;
          } else {
            site.cls = CftClass::InterPage;
          }
          out.push_back(site);
        }
        at += ins.length();
      }
    };
    for (const auto& f : mc.functions) walk(f.offset, f.length);
    for (const auto& [off, len] : mc.fillers) walk(off, len);
  }
  return out;
}

}  // namespace vaptr
