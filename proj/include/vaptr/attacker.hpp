#pragma once

// Simulated adversaries against the remapping runtime, plus the offline
// gadget census used to compare original and rewritten binaries.
//
//   jitrop_attack       read one leaked page, harvest gadgets and cross-page
//                       references from the snapshot, crawl breadth-first
//                       until the payload is satisfiable, compile, execute.
//   blind_probe_attack  no read primitive: redirect control to sequential
//                       addresses, observe crash / hang / clean completion,
//                       restore the checkpoint, and infer usable addresses
//                       from the behavior alone.
//
// The attacker reads live memory by after-randomization address through the
// page table — exactly what a disclosure bug yields — and never sees the
// remapping tables themselves. Every campaign action has a declared cost in
// ticks and the defense clock fires through all of it, so a short shuffle
// interval races the attack for real.
//
// Association staleness: every harvested fact (a page snapshot, a gadget, a
// reference) is only knowledge about a specific moment; a shuffle in between
// moves the logical pages and turns the recorded addresses into pointers at
// unrelated code. The campaign judges validity by the shuffle generation the
// fact was recorded at, with two pages exempt because shuffles never move
// them: whitelisted pages and the page the paused guest occupies. A
// generation bump fails a gadget even if a permutation happened to park its
// page in the old slot — an exploit that only works when the defense rolls a
// fixed point is not a working exploit, and scoring that luck as success
// would make the defense's guarantee untestable.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <vector>

#include "vaptr/image.hpp"
#include "vaptr/isa.hpp"
#include "vaptr/machine.hpp"
#include "vaptr/machine_state.hpp"
#include "vaptr/vaptr.hpp"

namespace vaptr {

enum class GadgetKind : std::uint8_t { Intended, Unintended };

inline const char* gadget_kind_name(GadgetKind k) {
  return k == GadgetKind::Intended ? "intended" : "unintended";
}

// A usable instruction suffix: at most k instructions, the last one a return
// or an indirect transfer. `addr` is the after-randomization address the
// attacker would jump to; it is only meaningful together with `generation`,
// the shuffle count at the moment the association was recorded.
struct Gadget {
  Addr addr = 0;
  std::vector<Instruction> instrs;
  GadgetKind kind = GadgetKind::Unintended;
  std::uint64_t generation = 0;
};

struct AttackConfig {
  Addr entry_leak = 0;  // leaked address (also the probe-campaign start)
  std::uint32_t needed_gadgets = 15;  // payload size
  std::uint32_t needed_intended = 1;  // of which at least this many aligned
  std::uint64_t t1_per_page = 200;    // ticks per disclosure attempt
  std::uint64_t t2_compile = 3000;    // ticks to compile the payload
  std::uint32_t k = 5;                // max gadget length, in instructions
  std::uint64_t ticks_per_gadget = 1;  // execution cost per chained gadget
  // Blind probing only:
  std::uint64_t probe_cost = 50;      // ticks to set up + observe one probe
  std::uint64_t probe_fuel = 256;     // steps before a probe counts as a hang
  std::uint64_t probe_budget = 4096;  // max probes per campaign
};

enum class AttackOutcome : std::uint8_t {
  Success,
  InsufficientGadgets,
  PayloadCrashed,
};

inline const char* attack_outcome_name(AttackOutcome o) {
  switch (o) {
    case AttackOutcome::Success: return "success";
    case AttackOutcome::InsufficientGadgets: return "insufficient_gadgets";
    case AttackOutcome::PayloadCrashed: return "payload_crashed";
  }
  return "?";
}

struct AttackReport {
  std::uint64_t pages_disclosed = 0;  // reads whose association held
  std::uint64_t gadgets_found = 0;
  std::uint64_t discovery_ticks = 0;
  std::uint64_t compile_ticks = 0;
  std::vector<Addr> payload;
  AttackOutcome outcome = AttackOutcome::InsufficientGadgets;
  std::uint64_t dead_ends = 0;        // unmapped / stale reads, failed probes
  std::uint64_t shuffles_during = 0;  // defense activity across the campaign
  std::uint64_t gadgets_executed = 0;  // chain links that validated and ran
};

// ------------------------------------------------------------- disclosure

struct DisclosedPage {
  Addr base = 0;                    // after-randomization page base
  std::vector<std::uint8_t> bytes;  // snapshot as of the read
  std::uint64_t generation = 0;     // shuffle count as of the read
};

// One page read through the live page table — the disclosure primitive.
// Unmapped addresses read nothing (the crawl records a dead end instead of
// faulting). Tick costs are charged by the campaign loop, not here.
inline std::optional<DisclosedPage> disclose_page(const VaptrState& v,
                                                  Addr addr) {
  std::shared_lock lock(v.table_mutex);
  if (!v.geom.contains(addr)) return std::nullopt;
  const auto flat = v.pages.flat_of(addr / v.geom.page_size);
  if (!flat) return std::nullopt;
  DisclosedPage d;
  d.base = addr - addr % v.geom.page_size;
  d.bytes = v.phys[v.page_table[*flat]];
  d.generation = v.shuffle_count;
  return d;
}

namespace adetail {

inline bool is_terminator(Opcode op) {
  return op == Opcode::Ret || op == Opcode::Jmpi || op == Opcode::Calli;
}

// The aligned stream of one page viewed in isolation: decode from offset 0,
// resynchronizing one byte at a time over anything that does not decode.
inline std::set<std::size_t> aligned_offsets(
    std::span<const std::uint8_t> page) {
  std::set<std::size_t> offs;
  std::size_t at = 0;
  while (at < page.size()) {
    const DecodeResult r = decode_at(page, at);
    if (r.ok()) {
      offs.insert(at);
      at += r.instr->length();
    } else {
      ++at;
    }
  }
  return offs;
}

// Ticks the attacker spends on the shared clock; the defense fires on every
// one of them.
struct AttackClock {
  VaptrState& v;
  std::uint64_t now = 0;
  void spend(std::uint64_t ticks) {
    for (std::uint64_t i = 0; i < ticks; ++i) vaptr_tick(v, ++now);
  }
};

inline std::uint64_t generation_of(const VaptrState& v) {
  std::shared_lock lock(v.table_mutex);
  return v.shuffle_count;
}

// Pages a shuffle never moves while the guest sits still: the whitelist and
// the page the paused machine occupies.
inline bool page_pinned(const VaptrState& v, std::uint64_t page) {
  if (page == v.current_page()) return true;
  std::shared_lock lock(v.table_mutex);
  const auto flat = v.pages.flat_of(page);
  return flat && v.whitelist[*flat] != 0;
}

}  // namespace adetail

// -------------------------------------------------------------- scanning

// Every byte offset of the page is a potential gadget start: decode forward
// until the first return or indirect transfer, keeping sequences of at most
// k instructions that reach one. Intended means the start offset lies on the
// page's aligned stream; everything else is an artifact of the variable-
// length encoding.
inline std::vector<Gadget> scan_gadgets(std::span<const std::uint8_t> page,
                                        Addr base, std::uint32_t k) {
  const std::set<std::size_t> aligned = adetail::aligned_offsets(page);
  std::vector<Gadget> out;
  for (std::size_t o = 0; o < page.size(); ++o) {
    std::vector<Instruction> seq;
    std::size_t at = o;
    bool ends_in_transfer = false;
    while (seq.size() < k) {
      const DecodeResult r = decode_at(page, at);
      if (!r.ok()) break;
      seq.push_back(*r.instr);
      at += r.instr->length();
      if (adetail::is_terminator(r.instr->op)) {
        ends_in_transfer = true;
        break;
      }
    }
    if (!ends_in_transfer) continue;
    Gadget g;
    g.addr = base + o;
    g.instrs = std::move(seq);
    g.kind = aligned.count(o) != 0 ? GadgetKind::Intended
                                   : GadgetKind::Unintended;
    out.push_back(std::move(g));
  }
  return out;
}

// Cross-page code addresses computable from one page: displacement targets
// of the aligned direct transfers plus the address immediates carried by
// rewriter-inserted units. Addresses inside the page itself are not leads to
// *other* pages and are dropped.
inline std::set<Addr> discover_references(std::span<const std::uint8_t> page,
                                          Addr base) {
  std::set<Addr> refs;
  const Addr lo = base;
  const Addr hi = base + page.size();
  auto keep = [&](Addr a) {
    if (a == 0) return;  // unit fields use 0 for "none"
    if (a >= lo && a < hi) return;
    refs.insert(a);
  };
  std::size_t at = 0;
  while (at < page.size()) {
    const DecodeResult r = decode_at(page, at);
    if (!r.ok()) {
      ++at;
      continue;
    }
    const Instruction& ins = *r.instr;
    const std::int64_t next = static_cast<std::int64_t>(base + at + ins.length());
    switch (ins.op) {
      case Opcode::Jrel:
      case Opcode::Jcc:
      case Opcode::Callrel:
        keep(static_cast<Addr>(next + ins.disp));
        break;
      case Opcode::Rsi:
        switch (rsi_flag_kind(ins.rsi.flag)) {
          case CftKind::DirectJump:
          case CftKind::DirectCall:
          case CftKind::PageEndFallthrough:
            keep(ins.rsi.target_arg);
            break;
          case CftKind::CondJump:
            keep(ins.rsi.target_arg);
            keep(ins.rsi.fallthrough);
            break;
          default:
            break;  // register numbers and return slots carry no address
        }
        break;
      default:
        break;
    }
    at += ins.length();
  }
  return refs;
}

// ---------------------------------------------------------------- census

struct GadgetCensus {
  std::uint64_t intended = 0;
  std::uint64_t unintended = 0;
  std::uint64_t total = 0;
};

// Offline population count over every code page of the image as it loads
// (partial trailing pages zero-filled; zero is the NOP byte).
inline GadgetCensus census_gadgets(const ProgramImage& img, std::uint32_t k) {
  GadgetCensus c;
  const std::uint64_t ps = img.geometry.page_size;
  auto scan_module = [&](const ModuleCode& m) {
    const std::uint64_t pages = m.page_count(img.geometry);
    for (std::uint64_t p = 0; p < pages; ++p) {
      std::vector<std::uint8_t> frame(ps, 0);
      const std::uint64_t off = p * ps;
      const std::uint64_t take =
          std::min<std::uint64_t>(ps, m.bytes.size() - off);
      std::copy(m.bytes.begin() + off, m.bytes.begin() + off + take,
                frame.begin());
      for (const Gadget& g : scan_gadgets(frame, m.base + off, k))
        ++(g.kind == GadgetKind::Intended ? c.intended : c.unintended);
    }
  };
  scan_module(img.main);
  for (const auto& l : img.libs) scan_module(l);
  c.total = c.intended + c.unintended;
  return c;
}

// --------------------------------------------------------------- payload

namespace adetail {

// Judge one chained gadget at the moment control reaches it: the shuffle
// generation must be unchanged (or the page pinned), and the live bytes must
// still decode to exactly the recorded instructions.
inline bool gadget_still_valid(const VaptrState& v, const Gadget& g) {
  const std::uint64_t page = g.addr / v.geom.page_size;
  if (generation_of(v) != g.generation && !page_pinned(v, page)) return false;
  const auto* frame = current_page_bytes(v, g.addr);
  if (frame == nullptr) return false;
  std::size_t at = g.addr % v.geom.page_size;
  for (const Instruction& want : g.instrs) {
    const DecodeResult r = decode_at(std::span(*frame), at);
    if (!r.ok() || !(*r.instr == want)) return false;
    at += r.instr->length();
  }
  return true;
}

inline AttackOutcome run_payload(MachineState& m, VaptrState& v,
                                 const std::vector<Gadget>& payload,
                                 AttackClock& clock,
                                 std::uint64_t ticks_per_gadget,
                                 std::uint64_t* executed = nullptr) {
  for (const Gadget& g : payload) {
    m.pc = g.addr;  // the chain redirects control here
    if (!gadget_still_valid(v, g)) return AttackOutcome::PayloadCrashed;
    clock.spend(ticks_per_gadget);
    if (executed != nullptr) ++*executed;
  }
  return AttackOutcome::Success;
}

// Payload selection: intended gadgets first (in discovery order) up to the
// required count, then anything in discovery order until the size is met.
// Empty result means the pool cannot satisfy the requirements.
inline std::vector<Gadget> compile_payload(const std::vector<Gadget>& pool,
                                           const AttackConfig& cfg) {
  std::vector<Gadget> chosen;
  std::vector<char> used(pool.size(), 0);
  for (std::size_t i = 0;
       i < pool.size() && chosen.size() < cfg.needed_intended; ++i) {
    if (pool[i].kind == GadgetKind::Intended) {
      chosen.push_back(pool[i]);
      used[i] = 1;
    }
  }
  if (chosen.size() < cfg.needed_intended) return {};
  for (std::size_t i = 0;
       i < pool.size() && chosen.size() < cfg.needed_gadgets; ++i) {
    if (used[i] == 0) chosen.push_back(pool[i]);
  }
  if (chosen.size() < cfg.needed_gadgets) return {};
  return chosen;
}

inline void check_config(const AttackConfig& cfg) {
  if (cfg.needed_gadgets < 1)
    throw std::invalid_argument("needed_gadgets must be at least 1");
  if (cfg.needed_intended > cfg.needed_gadgets)
    throw std::invalid_argument("needed_intended cannot exceed needed_gadgets");
  if (cfg.k < 1) throw std::invalid_argument("k must be at least 1");
}

// Rewriter units inside position-independent libraries store module-relative
// immediates. The static load bases are public knowledge (the attacker has
// the binary offline), so a harvested immediate below its own module's base
// gets the base re-added — the strongest reading the attacker can make.
inline Addr rebase_pic_reference(const VaptrState& v, Addr src_page_base,
                                 Addr ref) {
  std::shared_lock lock(v.table_mutex);
  for (const auto& l : v.libraries) {
    const Addr lo = l.base;
    const Addr hi = l.base + l.page_count * v.geom.page_size;
    if (src_page_base >= lo && src_page_base < hi) {
      if (l.pic && ref < l.base) return ref + l.base;
      return ref;
    }
  }
  return ref;
}

}  // namespace adetail

// Chains control through the recorded gadgets. Success means every gadget's
// association was still valid when control reached it, so the recorded
// instructions are exactly what executed.
inline AttackOutcome execute_payload(MachineState& m, VaptrState& v,
                                     const std::vector<Gadget>& payload,
                                     std::uint64_t ticks_per_gadget = 1,
                                     std::uint64_t start_tick = 0,
                                     std::uint64_t* executed = nullptr) {
  if (payload.empty())
    throw std::invalid_argument("execute_payload: payload must be non-empty");
  adetail::AttackClock clock{v, start_tick};
  return adetail::run_payload(m, v, payload, clock, ticks_per_gadget, executed);
}

// ------------------------------------------------------------ jitrop BFS

// Breadth-first crawl from the leaked entry address against a machine paused
// at the hijack point. Every read costs t1_per_page ticks; a snapshot only
// contributes gadgets and further references while the reference that led to
// it is still current — a read through a reference that a shuffle has
// already invalidated returns bytes of some unrelated logical page, which
// the attacker's cross-validation rejects (a dead end, harvesting nothing).
// Each page address is read at most once per campaign.
inline AttackReport jitrop_attack(MachineState& m, VaptrState& v,
                                  const AttackConfig& cfg) {
  adetail::check_config(cfg);
  AttackReport rep;
  adetail::AttackClock clock{v};
  const std::uint64_t gen_start = adetail::generation_of(v);
  const std::uint64_t ps = v.geom.page_size;

  // A candidate's `born` generation is its source snapshot's; the entry leak
  // has none — the vulnerability hands over a pointer live at read time.
  struct Candidate {
    Addr addr = 0;
    std::optional<std::uint64_t> born;
  };
  std::deque<Candidate> frontier;
  frontier.push_back({cfg.entry_leak, std::nullopt});
  std::set<std::uint64_t> attempted;  // page numbers already read
  std::vector<Gadget> pool;
  std::set<Addr> pool_addrs;
  std::uint64_t intended = 0;
  auto satisfied = [&] {
    return pool.size() >= cfg.needed_gadgets &&
           intended >= cfg.needed_intended;
  };

  while (!frontier.empty() && !satisfied()) {
    const Candidate cand = frontier.front();
    frontier.pop_front();
    if (!attempted.insert(cand.addr / ps).second) continue;

    clock.spend(cfg.t1_per_page);
    rep.discovery_ticks += cfg.t1_per_page;
    const auto snap = disclose_page(v, cand.addr);
    if (!snap) {
      ++rep.dead_ends;  // unmapped: note it, do not scan neighbours
      continue;
    }
    if (cand.born && *cand.born != snap->generation) {
      ++rep.dead_ends;  // stale reference: the bytes are some other page
      continue;
    }
    ++rep.pages_disclosed;

    for (Gadget g : scan_gadgets(snap->bytes, snap->base, cfg.k)) {
      if (!pool_addrs.insert(g.addr).second) continue;
      g.generation = snap->generation;
      if (g.kind == GadgetKind::Intended) ++intended;
      pool.push_back(std::move(g));
    }
    for (const Addr ref : discover_references(snap->bytes, snap->base)) {
      frontier.push_back(
          {adetail::rebase_pic_reference(v, snap->base, ref),
           snap->generation});
    }
  }

  rep.gadgets_found = pool.size();
  const std::vector<Gadget> payload = adetail::compile_payload(pool, cfg);
  if (payload.empty()) {
    rep.outcome = AttackOutcome::InsufficientGadgets;
    rep.shuffles_during = adetail::generation_of(v) - gen_start;
    return rep;
  }
  clock.spend(cfg.t2_compile);
  rep.compile_ticks = cfg.t2_compile;
  for (const Gadget& g : payload) rep.payload.push_back(g.addr);
  rep.outcome = adetail::run_payload(m, v, payload, clock,
                                     cfg.ticks_per_gadget,
                                     &rep.gadgets_executed);
  rep.shuffles_during = adetail::generation_of(v) - gen_start;
  return rep;
}

// ---------------------------------------------------------- blind probing

// Probe campaign without a read primitive (crash-restart model): redirect
// control to sequential addresses starting at entry_leak, observe whether
// the run crashes, hangs, or completes, restore the checkpoint, and infer
// associations at the addresses that ran without crashing. A return value
// planted on the probe stack (the paused program point) lets a probed return
// land back in normal execution, so return-terminated sequences read as
// clean completions instead of crashing on an empty stack.
inline AttackReport blind_probe_attack(MachineState& m, VaptrState& v,
                                       const AttackConfig& cfg) {
  adetail::check_config(cfg);
  AttackReport rep;
  adetail::AttackClock clock{v};
  const std::uint64_t gen_start = adetail::generation_of(v);
  const std::uint64_t ps = v.geom.page_size;
  const MachineState checkpoint = m;

  std::vector<Gadget> pool;
  std::set<Addr> pool_addrs;
  std::uint64_t intended = 0;
  std::set<std::uint64_t> pages_touched;
  auto satisfied = [&] {
    return pool.size() >= cfg.needed_gadgets &&
           intended >= cfg.needed_intended;
  };

  for (std::uint64_t i = 0; i < cfg.probe_budget && !satisfied(); ++i) {
    const Addr addr = cfg.entry_leak + i;
    pages_touched.insert(addr / ps);
    clock.spend(cfg.probe_cost);
    rep.discovery_ticks += cfg.probe_cost;

    MachineState probe = checkpoint;
    if (const auto lure = translate_inverse(v, checkpoint.pc))
      probe.push_word(static_cast<Word>(*lure));
    probe.pc = addr;
    RunOptions ro;
    ro.fuel = cfg.probe_fuel;
    ro.start_tick = clock.now;
    const RunResult rr = run(v, probe, ro);
    clock.now += rr.ticks;  // run() already fired the defense clock
    rep.discovery_ticks += rr.ticks;

    if (rr.status == Status::Crashed) {
      ++rep.dead_ends;  // observation: crash — restart and move on
      continue;
    }

    // Observation: clean completion or a hang. Record the association that
    // held while the probe ran, if the address is gadget-shaped.
    const auto* frame = current_page_bytes(v, addr);
    if (frame == nullptr) {
      ++rep.dead_ends;
      continue;
    }
    std::vector<Instruction> seq;
    std::size_t at = addr % ps;
    bool ends_in_transfer = false;
    while (seq.size() < cfg.k) {
      const DecodeResult r = decode_at(std::span(*frame), at);
      if (!r.ok()) break;
      seq.push_back(*r.instr);
      at += r.instr->length();
      if (adetail::is_terminator(r.instr->op)) {
        ends_in_transfer = true;
        break;
      }
    }
    if (!ends_in_transfer) continue;
    if (!pool_addrs.insert(addr).second) continue;
    Gadget g;
    g.addr = addr;
    g.instrs = std::move(seq);
    g.kind = adetail::aligned_offsets(std::span(*frame)).count(addr % ps) != 0
                 ? GadgetKind::Intended
                 : GadgetKind::Unintended;
    g.generation = adetail::generation_of(v);
    if (g.kind == GadgetKind::Intended) ++intended;
    pool.push_back(std::move(g));
  }

  rep.pages_disclosed = pages_touched.size();
  rep.gadgets_found = pool.size();
  const std::vector<Gadget> payload = adetail::compile_payload(pool, cfg);
  if (payload.empty()) {
    rep.outcome = AttackOutcome::InsufficientGadgets;
    rep.shuffles_during = adetail::generation_of(v) - gen_start;
    return rep;
  }
  clock.spend(cfg.t2_compile);
  rep.compile_ticks = cfg.t2_compile;
  for (const Gadget& g : payload) rep.payload.push_back(g.addr);
  rep.outcome = adetail::run_payload(m, v, payload, clock,
                                     cfg.ticks_per_gadget,
                                     &rep.gadgets_executed);
  rep.shuffles_during = adetail::generation_of(v) - gen_start;
  return rep;
}

}  // namespace vaptr
