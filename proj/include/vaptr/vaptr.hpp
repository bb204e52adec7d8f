#pragma once

// The virtual-address page remapping runtime. Two composed mappings:
//
//   L2L:       before-randomization logical page -> current logical page
//   PageTable: current logical page -> physical frame
//
// Re-randomization permutes L2L (Fisher-Yates) and rewrites PageTable so the
// physical contents follow the logical move:
//
//   PageTable[L2L.forward[p]] == PageTable0[p]   for every page p
//
// Whitelisted pages (stub page, callback entry page) and the page currently
// executing map to themselves / stay pinned across shuffles. sys_jit is the
// kernel service RSI units trap into: it resolves the before-randomization
// target, translates it through L2L, and plants it (plus, for calls, the
// before-randomization return address) in the reserved stack slots that the
// stub pops on its way back into guest code.
//
// The reference simulator is single-threaded but keeps the reader/writer
// contract real: translations take a shared lock, shuffles take the unique
// lock, so a threaded driver remains a valid host.

#include <algorithm>
#include <cstdint>
#include <iterator>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "vaptr/image.hpp"
#include "vaptr/isa.hpp"
#include "vaptr/machine_state.hpp"
#include "vaptr/rng.hpp"

namespace vaptr {

// Thrown when a structural invariant (bijection, two-step composition,
// whitelist pinning) fails; the CLI maps it to exit code 3.
struct PropertyViolation : std::logic_error {
  using std::logic_error::logic_error;
};

struct VaptrError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// interval_ticks == 0 means "never shuffle" (the infinite interval).
inline constexpr std::uint64_t kIntervalInf = 0;

struct VaptrConfig {
  std::uint64_t interval_ticks = kIntervalInf;
  std::uint64_t seed = 0;
  // Only "whitelist" is supported: the stub must stay reachable while a
  // translation is mid-flight, so the stub page never randomizes.
  std::string stub_page_policy = "whitelist";
};

struct LibraryInfo {
  std::uint32_t lib_index = 0;  // matches the RSI flag's high bits
  std::string name;
  Addr base = 0;
  bool pic = false;
  std::uint64_t first_page = 0;
  std::uint64_t page_count = 0;
};

// Sparse set of code pages stored as sorted ranges with a flat dense index,
// so the three tables are plain vectors even though code regions sit far
// apart in the address space.
class PageIndexer {
 public:
  void add_range(std::uint64_t first, std::uint64_t count) {
    if (count == 0) return;
    for (const auto& r : ranges_)
      if (first < r.first + r.count && r.first < first + count)
        throw VaptrError("page ranges overlap");
    ranges_.push_back({first, count, 0});
    std::sort(ranges_.begin(), ranges_.end(),
              [](const Range& a, const Range& b) { return a.first < b.first; });
    std::uint64_t flat = 0;
    for (auto& r : ranges_) {
      r.flat = flat;
      flat += r.count;
    }
    total_ = flat;
  }

  std::optional<std::size_t> flat_of(std::uint64_t page) const {
    for (const auto& r : ranges_) {
      if (page >= r.first && page < r.first + r.count)
        return r.flat + (page - r.first);
    }
    return std::nullopt;
  }

  std::uint64_t page_at(std::size_t flat) const {
    for (const auto& r : ranges_) {
      if (flat >= r.flat && flat < r.flat + r.count)
        return r.first + (flat - r.flat);
    }
    throw VaptrError("flat index out of range");
  }

  std::size_t size() const { return total_; }

 private:
  struct Range {
    std::uint64_t first, count, flat;
  };
  std::vector<Range> ranges_;
  std::uint64_t total_ = 0;
};

class VaptrState {
 public:
  PageGeometry geom{};
  VaptrConfig cfg{};
  PageIndexer pages;
  std::vector<std::vector<std::uint8_t>> phys;  // frame contents, never move
  std::vector<std::uint64_t> forward;   // flat(before page) -> current page
  std::vector<std::uint64_t> inverse;   // flat(current page) -> before page
  std::vector<std::uint32_t> page_table;    // flat(current page) -> frame
  std::vector<std::uint32_t> page_table0;   // flat(before page) -> frame at load
  std::vector<std::uint8_t> whitelist;      // flat(before page) -> pinned?
  std::vector<LibraryInfo> libraries;
  std::map<Addr, Addr> shadow;  // saving location -> before-rand return
  Rng rng;
  std::uint64_t stub_page = 0;
  std::uint64_t shuffle_count = 0;  // association generation for attackers

  mutable std::shared_mutex table_mutex;

  VaptrState() = default;
  VaptrState(const VaptrState&) = delete;
  VaptrState& operator=(const VaptrState&) = delete;

  std::uint64_t current_page() const {
    std::lock_guard<std::mutex> g(current_page_mutex_);
    return current_page_;
  }
  void set_current_page(std::uint64_t p) {
    std::lock_guard<std::mutex> g(current_page_mutex_);
    current_page_ = p;
  }

 private:
  mutable std::mutex current_page_mutex_;
  std::uint64_t current_page_ = 0;
};

namespace vdetail {

// Callers hold at least a shared lock.
inline std::optional<Addr> translate_forward_locked(const VaptrState& s, Addr a) {
  if (!s.geom.contains(a)) return std::nullopt;
  const auto flat = s.pages.flat_of(a / s.geom.page_size);
  if (!flat) return std::nullopt;
  return s.forward[*flat] * s.geom.page_size + a % s.geom.page_size;
}

inline std::optional<Addr> translate_inverse_locked(const VaptrState& s, Addr a) {
  if (!s.geom.contains(a)) return std::nullopt;
  const auto flat = s.pages.flat_of(a / s.geom.page_size);
  if (!flat) return std::nullopt;
  return s.inverse[*flat] * s.geom.page_size + a % s.geom.page_size;
}

inline void rebuild_derived_locked(VaptrState& s) {
  const std::size_t n = s.pages.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto dst = s.pages.flat_of(s.forward[i]);
    if (!dst) throw PropertyViolation("forward maps outside the page set");
    s.inverse[*dst] = s.pages.page_at(i);
    s.page_table[*dst] = s.page_table0[i];
  }
}

inline void check_invariants_locked(const VaptrState& s) {
  const std::size_t n = s.pages.size();
  std::vector<std::uint8_t> seen(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t before = s.pages.page_at(i);
    const auto dst = s.pages.flat_of(s.forward[i]);
    if (!dst) throw PropertyViolation("forward maps outside the page set");
    if (seen[*dst]) throw PropertyViolation("forward is not a bijection");
    seen[*dst] = 1;
    if (s.inverse[*dst] != before)
      throw PropertyViolation("inverse does not invert forward");
    // The two-step composition: the frame reachable through the randomized
    // mapping must be the frame the page had at load time.
    if (s.page_table[*dst] != s.page_table0[i])
      throw PropertyViolation("page table does not track the l2l move");
    if (s.whitelist[i] && s.forward[i] != before)
      throw PropertyViolation("whitelisted page was moved");
  }
}

}  // namespace vdetail

// ------------------------------------------------------------------- init

inline void register_library(VaptrState& s, const ModuleCode& lib,
                             std::uint32_t lib_index) {
  const std::uint64_t first = lib.base / s.geom.page_size;
  const std::uint64_t count = lib.page_count(s.geom);
  s.pages.add_range(first, count);  // throws on overlap
  s.libraries.push_back(
      {lib_index, lib.name, lib.base, lib.pic, first, count});
}

inline std::unique_ptr<VaptrState> vaptr_init(const ProgramImage& img,
                                              const VaptrConfig& cfg) {
  if (!img.geometry.valid()) throw VaptrError("invalid page geometry");
  if (cfg.stub_page_policy != "whitelist")
    throw VaptrError(
        "stub_page_policy '" + cfg.stub_page_policy +
        "' not supported: the stub page must stay reachable mid-translation, "
        "so only \"whitelist\" is modeled");

  auto sp = std::make_unique<VaptrState>();
  VaptrState& s = *sp;
  s.geom = img.geometry;
  s.cfg = cfg;
  s.rng = Rng(cfg.seed);

  // Main module pages plus one stub page directly above them; libraries each
  // contribute their own range.
  const std::uint64_t main_first = img.main.first_page(s.geom);
  const std::uint64_t main_count = img.main.page_count(s.geom);
  s.stub_page = main_first + main_count;
  s.pages.add_range(main_first, main_count + 1);
  for (std::uint32_t k = 0; k < img.libs.size(); ++k)
    register_library(s, img.libs[k], k + 1);

  const std::size_t n = s.pages.size();
  s.forward.resize(n);
  s.inverse.resize(n);
  s.page_table.resize(n);
  s.page_table0.resize(n);
  s.whitelist.assign(n, 0);
  s.phys.assign(n, {});

  auto load_module = [&](const ModuleCode& m) {
    const std::uint64_t first = m.first_page(s.geom);
    const std::uint64_t count = m.page_count(s.geom);
    for (std::uint64_t p = 0; p < count; ++p) {
      const std::size_t flat = *s.pages.flat_of(first + p);
      auto& frame = s.phys[flat];
      frame.assign(s.geom.page_size, 0);
      const std::uint64_t off = p * s.geom.page_size;
      const std::uint64_t take =
          std::min<std::uint64_t>(s.geom.page_size,
                                  m.bytes.size() > off ? m.bytes.size() - off : 0);
      std::copy(m.bytes.begin() + off, m.bytes.begin() + off + take,
                frame.begin());
    }
  };
  load_module(img.main);
  for (const auto& l : img.libs) load_module(l);
  s.phys[*s.pages.flat_of(s.stub_page)].assign(s.geom.page_size, 0);  // NOPs

  for (std::size_t i = 0; i < n; ++i) {
    s.forward[i] = s.pages.page_at(i);
    s.inverse[i] = s.pages.page_at(i);
    s.page_table[i] = static_cast<std::uint32_t>(i);
    s.page_table0[i] = static_cast<std::uint32_t>(i);
  }

  s.whitelist[*s.pages.flat_of(s.stub_page)] = 1;
  if (img.rsb.callback_entry_page) {
    const auto flat = s.pages.flat_of(*img.rsb.callback_entry_page);
    if (!flat) throw VaptrError("callback entry page outside code pages");
    s.whitelist[*flat] = 1;
  }

  s.set_current_page(img.entry / s.geom.page_size);
  return sp;
}

// ---------------------------------------------------------------- shuffle

// Fresh uniform permutation of every randomizable page except current_page,
// drawn with Fisher-Yates. Derived tables are rebuilt and the structural
// invariants re-checked on every shuffle.
inline void vaptr_shuffle(VaptrState& s, std::uint64_t current_page) {
  std::unique_lock lock(s.table_mutex);
  std::vector<std::size_t> idx;
  idx.reserve(s.pages.size());
  for (std::size_t i = 0; i < s.pages.size(); ++i) {
    if (s.whitelist[i]) continue;
    if (s.pages.page_at(i) == current_page) continue;
    idx.push_back(i);
  }
  std::vector<std::uint64_t> targets(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) targets[i] = s.forward[idx[i]];
  s.rng.shuffle(targets);
  for (std::size_t i = 0; i < idx.size(); ++i) s.forward[idx[i]] = targets[i];
  vdetail::rebuild_derived_locked(s);
  vdetail::check_invariants_locked(s);
  ++s.shuffle_count;
}

inline void vaptr_tick(VaptrState& s, std::uint64_t now) {
  if (s.cfg.interval_ticks == kIntervalInf) return;
  if (now % s.cfg.interval_ticks == 0) vaptr_shuffle(s, s.current_page());
}

// ------------------------------------------------------------ translation

inline std::optional<Addr> translate_forward(const VaptrState& s, Addr a) {
  std::shared_lock lock(s.table_mutex);
  return vdetail::translate_forward_locked(s, a);
}

inline std::optional<Addr> translate_inverse(const VaptrState& s, Addr a) {
  std::shared_lock lock(s.table_mutex);
  return vdetail::translate_inverse_locked(s, a);
}

// Bytes of the page containing after-rand address `a`, through the page
// table (what the CPU — or an attacker's disclosure primitive — sees).
inline const std::vector<std::uint8_t>* current_page_bytes(const VaptrState& s,
                                                           Addr a) {
  std::shared_lock lock(s.table_mutex);
  if (!s.geom.contains(a)) return nullptr;
  const auto flat = s.pages.flat_of(a / s.geom.page_size);
  if (!flat) return nullptr;
  return &s.phys[s.page_table[*flat]];
}

inline void check_invariants(const VaptrState& s) {
  std::shared_lock lock(s.table_mutex);
  vdetail::check_invariants_locked(s);
}

// Test/debug hook: pin before-page -> current-page by swapping with whoever
// currently owns that slot, keeping the permutation a bijection.
inline void set_mapping_for_test(VaptrState& s, std::uint64_t before_page,
                                 std::uint64_t current_page) {
  std::unique_lock lock(s.table_mutex);
  const auto src = s.pages.flat_of(before_page);
  if (!src) throw VaptrError("page not in set");
  std::size_t owner = s.pages.size();
  for (std::size_t i = 0; i < s.pages.size(); ++i)
    if (s.forward[i] == current_page) owner = i;
  if (owner == s.pages.size()) throw VaptrError("target page not in set");
  std::swap(s.forward[*src], s.forward[owner]);
  vdetail::rebuild_derived_locked(s);
  vdetail::check_invariants_locked(s);
}

// ----------------------------------------------------------------- sys_jit

struct SysJitResult {
  bool ok = false;
  CrashReason crash = CrashReason::None;
  Addr before_target = 0;
  Addr after_target = 0;
};

namespace vdetail {

inline bool cond_holds(Cond c, const FlagsReg& f, Word cxz_reg) {
  switch (c) {
    case Cond::Eq: return f.z;
    case Cond::Ne: return !f.z;
    case Cond::Lt: return f.s;
    case Cond::Ge: return !f.s;
    case Cond::Cxz: return cxz_reg == 0;
  }
  return false;
}

}  // namespace vdetail

// The kernel half of an RSI unit. `sp_before` is the guest sp before the
// unit's prologue ran; the reserved slots sit directly below it (above it,
// for returns, where the caller's planted return address already lives).
// `after_pc` is the after-randomization address just past the unit.
inline SysJitResult sys_jit(VaptrState& s, MachineState& m,
                            const RsiPayload& unit, Addr sp_before,
                            Addr after_pc) {
  std::unique_lock lock(s.table_mutex);
  SysJitResult res;
  const CftKind kind = rsi_flag_kind(unit.flag);
  const std::uint32_t lib_index = rsi_flag_lib(unit.flag);

  // (1) the before-randomization target, by kind
  Addr before_target = 0;
  switch (kind) {
    case CftKind::DirectJump:
    case CftKind::DirectCall:
    case CftKind::PageEndFallthrough:
      before_target = unit.target_arg;
      break;
    case CftKind::CondJump:
      before_target = vdetail::cond_holds(unit.cond, m.flags, m.regs[kCxzReg])
                          ? unit.target_arg
                          : unit.fallthrough;
      break;
    case CftKind::IndirectJump:
    case CftKind::IndirectCall: {
      if (unit.target_arg >= kNumRegs) {
        res.crash = CrashReason::DecodeFault;
        return res;
      }
      before_target = m.regs[unit.target_arg];
      break;
    }
    case CftKind::Return: {
      const Addr key = sp_before;
      auto it = s.shadow.find(key);
      if (it == s.shadow.end()) {
        res.crash = CrashReason::ShadowMiss;
        return res;
      }
      before_target = it->second;
      // Consume the entry; entries below it belong to frames a stack cut
      // abandoned, so collect them too.
      s.shadow.erase(s.shadow.begin(), std::next(it));
      break;
    }
  }

  // (2) position-independent code: targets *stored in the unit* (hard-coded
  // labels) are module-relative and need the load base added. Values that
  // arrive at runtime — shadow-table returns, register-held addresses — are
  // already absolute and must pass through untouched.
  const bool stored_target = kind == CftKind::DirectJump ||
                             kind == CftKind::DirectCall ||
                             kind == CftKind::CondJump ||
                             kind == CftKind::PageEndFallthrough;
  if (lib_index != 0 && stored_target) {
    const LibraryInfo* lib = nullptr;
    for (const auto& l : s.libraries)
      if (l.lib_index == lib_index) lib = &l;
    if (lib == nullptr) {
      res.crash = CrashReason::BadLibrary;
      return res;
    }
    if (before_target < lib->base) before_target += lib->base;
  }

  // (3) translate and plant in the reserved slot
  const auto after = vdetail::translate_forward_locked(s, before_target);
  if (!after) {
    res.crash = CrashReason::UnknownPage;
    return res;
  }
  const int slots = rsi_reserved_slots(kind);
  const Addr target_slot =
      kind == CftKind::Return ? sp_before : sp_before - slots * kWordSize;
  if (!m.write_word_at(target_slot, static_cast<Word>(*after))) {
    res.crash = m.crash;
    return res;
  }

  // (4) calls additionally plant the before-randomization return address and
  // remember it in the shadow table, keyed by its saving location
  if (kind == CftKind::DirectCall || kind == CftKind::IndirectCall) {
    const auto before_ret = vdetail::translate_inverse_locked(s, after_pc);
    if (!before_ret) {
      res.crash = CrashReason::UnknownPage;
      return res;
    }
    const Addr ret_slot = sp_before - kWordSize;
    if (!m.write_word_at(ret_slot, static_cast<Word>(*before_ret))) {
      res.crash = m.crash;
      return res;
    }
    s.shadow[ret_slot] = *before_ret;
  }

  // (5) the destination page becomes the current page (pinned by shuffles)
  s.set_current_page(before_target / s.geom.page_size);

  res.ok = true;
  res.before_target = before_target;
  res.after_target = *after;
  return res;
}

// The stub: restores registers and flags, then returns into the planted
// after-randomization slot. Lives in a whitelisted page so it survives every
// shuffle mid-flight.
inline bool stub_execute(MachineState& m) {
  for (int r = 0; r < kNumRegs; ++r) {
    const auto v = m.pop_word();
    if (!v) return false;
    m.regs[r] = *v;
  }
  const auto fl = m.pop_word();
  if (!fl) return false;
  m.flags.set_word(*fl);
  const auto target = m.pop_word();
  if (!target) return false;
  m.pc = *target;
  return true;
}

// Observable snapshot of the remapping state (debug dumps, determinism
// tests). Plain data so callers can serialize it however they like.
struct VaptrDump {
  std::map<std::uint64_t, std::uint64_t> forward;
  std::map<std::uint64_t, std::uint32_t> page_table;
  std::map<Addr, Addr> shadow;
  std::uint64_t shuffle_count = 0;
  std::uint64_t current_page = 0;
  friend bool operator==(const VaptrDump&, const VaptrDump&) = default;
};

inline VaptrDump debug_dump(const VaptrState& s) {
  std::shared_lock lock(s.table_mutex);
  VaptrDump d;
  for (std::size_t i = 0; i < s.pages.size(); ++i) {
    const std::uint64_t page = s.pages.page_at(i);
    d.forward[page] = s.forward[i];
    d.page_table[s.forward[i]] = s.page_table[*s.pages.flat_of(s.forward[i])];
  }
  d.shadow = s.shadow;
  d.shuffle_count = s.shuffle_count;
  d.current_page = s.current_page();
  return d;
}

}  // namespace vaptr
