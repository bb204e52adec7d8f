#pragma once

// Seeded program generator for the toy assembly language.
//
// Every generated program halts by construction:
//   * calls form a forest over the source order -- a function may only call
//     functions defined after it, and every function is the target of at
//     most one call site -- so there is no recursion and each body runs at
//     most once per program (the designated hot callee, driven by a counted
//     loop, is the sole exception);
//   * every backward jump is a counted loop (`mov rC, K; ... ; sub rC, r1;
//     jne/jcxz`) whose counter register the loop body never writes.
//
// Register convention for generated code: r1 holds the constant 1 for the
// lifetime of the program, r2/r3 are loop counters, r6 holds the scratch
// buffer base, r0 is the indirect-transfer register, and r4/r5/r7 are
// scratch.
//
// When loops are requested, each program embeds a "hot pair": the largest
// function (the hot caller) runs a counted loop around a call to the
// second-largest (the hot callee), which is separated from the caller by a
// page-sized ballast function so the hot call is inter-page in the
// unoptimized layout. Descending-size first-fit packing then provably
// co-locates caller and callee on one page: the loop iteration count
// (kHotIterations) exceeds the number of control-transfer sites any
// generated program can contain, and every non-hot call site executes at
// most once, so the reordering optimization always removes strictly more
// unit executions than incidental layout changes can add back. The size
// ranks that make this work hold as long as other functions stay under
// kSmallRawCap bytes with at most kSmallCftCap transfers each, which the
// emitter enforces.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vaptr/assembler.hpp"
#include "vaptr/image.hpp"
#include "vaptr/machine.hpp"
#include "vaptr/rng.hpp"

namespace vaptr {

struct CorpusRange {
  std::uint32_t min = 0;
  std::uint32_t max = 0;
};

struct CorpusParams {
  std::uint32_t n_programs = 100;
  CorpusRange functions_per_program{4, 10};
  CorpusRange function_size{64, 420};  // raw body bytes, approximate target
  double cft_density = 0.15;  // chance an emitted slot is a control transfer
  CorpusRange loop_depth{0, 2};
  double indirect_fraction = 0.15;  // chance a call/tail transfer is indirect
  CorpusRange callback_count{0, 2};
  std::uint64_t seed = 1;
};

struct CorpusProgram {
  std::string name;
  std::string source;
  ProgramImage image;
  std::vector<CallbackDelivery> deliveries;
  std::uint32_t function_count = 0;
  std::uint32_t callback_count = 0;
  std::uint32_t loop_count = 0;
  bool has_loops = false;
};

inline void validate_corpus_params(const CorpusParams& p) {
  auto bad = [](const std::string& m) {
    throw std::invalid_argument("corpus params: " + m);
  };
  auto range_ok = [&](const CorpusRange& r, const char* what) {
    if (r.min > r.max)
      bad(std::string(what) + " range has min above max");
  };
  if (p.n_programs < 1) bad("n_programs must be at least 1");
  range_ok(p.functions_per_program, "functions_per_program");
  range_ok(p.function_size, "function_size");
  range_ok(p.loop_depth, "loop_depth");
  range_ok(p.callback_count, "callback_count");
  if (p.functions_per_program.min < 1)
    bad("functions_per_program.min must be at least 1");
  if (p.function_size.min < 48)
    bad("function_size.min below 48 bytes leaves no room for a body");
  if (p.function_size.max > 65536) bad("function_size.max above 65536");
  if (!(p.cft_density >= 0.0 && p.cft_density <= 1.0))
    bad("cft_density outside [0, 1]");
  if (!(p.indirect_fraction >= 0.0 && p.indirect_fraction <= 1.0))
    bad("indirect_fraction outside [0, 1]");
  if (p.loop_depth.max > 2) bad("loop nesting above depth 2 is unsupported");
  if (p.callback_count.max > 128)
    bad("callback_count.max above one entry page's capacity");
  if (p.cft_density == 0.0) {
    if (p.loop_depth.min > 0)
      bad("loops are control transfers; impossible with cft_density 0");
    if (p.callback_count.min > 0)
      bad("callbacks need returns; impossible with cft_density 0");
  }
}

namespace cg {

// Non-hot functions stay below the hot callee even in the worst case:
// kSmallRawCap + kSmallCftCap * 19 + 24 < kHotCalleeRawBase + 23.
inline constexpr std::size_t kSmallRawCap = 430;
inline constexpr std::size_t kSmallCftCap = 23;
inline constexpr std::size_t kHotCallerRawBase = 1280;
inline constexpr std::size_t kHotCalleeRawBase = 980;
// Raw ballast above one page guarantees the hot callee starts on a later
// page than the hot call site in any layout that keeps source order.
inline constexpr std::size_t kBallastRawBase = 4240;
// 15 * 14 iterations: more than the largest possible number of
// control-transfer sites in one generated program, so the hot savings
// dominate every incidental one-shot layout flip.
inline constexpr std::uint64_t kHotOuter = 15;
inline constexpr std::uint64_t kHotInner = 14;
inline constexpr std::size_t kBufBytes = 128;

inline std::uint64_t nth_program_seed(std::uint64_t corpus_seed,
                                      std::uint32_t index) {
  SplitMix64 sm(corpus_seed + 0x632be59bd9b4e019ULL * (index + 1ULL));
  return sm.next();
}

struct FnBuilder {
  std::string name;
  std::vector<std::string> lines;
  std::size_t bytes = 0;
  int next_label = 0;
  std::size_t cfts = 0;

  void ins(std::string text, std::size_t len) {
    lines.push_back(std::move(text));
    bytes += len;
  }
  std::string fresh_label() { return "L" + std::to_string(next_label++); }
  void place_label(const std::string& l) { lines.push_back(l + ":"); }
};

inline char scratch_reg(Rng& rng) {
  static constexpr char kScratch[3] = {'4', '5', '7'};
  return kScratch[rng.below(3)];
}

inline std::string hex32(std::uint64_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08llx",
                static_cast<unsigned long long>(v & 0xffffffffULL));
  return buf;
}

// One straight-line instruction (or a balanced push/pop pair). Only scratch
// registers are written, so fillers are safe inside loop bodies.
inline void emit_filler(FnBuilder& b, Rng& rng) {
  const std::string rd(1, scratch_reg(rng));
  const std::string rs(1, scratch_reg(rng));
  switch (rng.below(14)) {
    case 0:
    case 1:
    case 2:
      b.ins("mov r" + rd + ", " + hex32(rng.next_u64()), 6);
      break;
    case 3:
    case 4:
      b.ins("mov r" + rd + ", r" + rs, 3);
      break;
    case 5:
      b.ins("add r" + rd + ", r" + rs, 3);
      break;
    case 6:
      b.ins("sub r" + rd + ", r" + rs, 3);
      break;
    case 7:
      b.ins("cmp r" + rd + ", r" + rs, 3);
      break;
    case 8:
      b.ins("out " + std::to_string(rng.below(128)), 2);
      break;
    case 9:
      b.ins("nop", 1);
      break;
    case 10:
      b.ins("push r" + rd, 2);
      b.ins("pop r" + rs, 2);
      break;
    case 11:
      b.ins("store r" + rd + ", [r6+" + std::to_string(4 * rng.below(kBufBytes / 4)) + "]",
            4);
      break;
    default:
      b.ins("load r" + rd + ", [r6+" + std::to_string(4 * rng.below(kBufBytes / 4)) + "]",
            4);
      break;
  }
}

// Conditional forward skip over a couple of fillers.
inline void emit_cond_skip(FnBuilder& b, Rng& rng) {
  static constexpr const char* kCc[4] = {"jeq", "jne", "jlt", "jge"};
  const std::string skip = b.fresh_label();
  b.ins(std::string("cmp r") + scratch_reg(rng) + ", r" + scratch_reg(rng), 3);
  b.ins(std::string(kCc[rng.below(4)]) + " " + skip, 6);
  b.cfts += 1;
  const std::uint64_t n = 1 + rng.below(2);
  for (std::uint64_t i = 0; i < n; ++i) emit_filler(b, rng);
  b.place_label(skip);
}

inline void emit_jrel_skip(FnBuilder& b, Rng& rng) {
  const std::string skip = b.fresh_label();
  b.ins("jrel " + skip, 5);
  b.cfts += 1;
  const std::uint64_t n = 1 + rng.below(2);
  for (std::uint64_t i = 0; i < n; ++i) emit_filler(b, rng);
  b.place_label(skip);
}

// Counted loop over pure-arithmetic fillers. Depth 1 uses r2; an optional
// inner loop uses r3. Counters are re-initialized immediately before each
// loop, so earlier clobbers never affect termination.
inline void emit_arith_loop(FnBuilder& b, Rng& rng, bool nested) {
  const std::uint64_t outer_k = 2 + rng.below(2);
  const std::string back = b.fresh_label();
  b.ins("mov r2, " + std::to_string(outer_k), 6);
  b.place_label(back);
  const std::uint64_t n = 1 + rng.below(3);
  for (std::uint64_t i = 0; i < n; ++i) emit_filler(b, rng);
  if (nested) {
    const std::uint64_t inner_k = 2 + rng.below(2);
    const std::string iback = b.fresh_label();
    b.ins("mov r3, " + std::to_string(inner_k), 6);
    b.place_label(iback);
    emit_filler(b, rng);
    b.ins("sub r3, r1", 3);
    b.ins("jne " + iback, 6);
    b.cfts += 1;
  }
  b.ins("sub r2, r1", 3);
  if (rng.chance(0.3)) {
    const std::string done = b.fresh_label();
    b.ins("jcxz " + done, 6);
    b.ins("jrel " + back, 5);
    b.place_label(done);
    b.cfts += 2;
  } else {
    b.ins("jne " + back, 6);
    b.cfts += 1;
  }
}

inline void emit_call(FnBuilder& b, Rng& rng, const std::string& target,
                      double indirect_fraction) {
  if (rng.chance(indirect_fraction)) {
    b.ins("mov r0, &" + target, 6);
    b.ins("calli r0", 2);
  } else {
    b.ins("call " + target, 5);
  }
  b.cfts += 1;
}

// Unreachable straight-line bytes after the final transfer, used to pin a
// function's size without adding dynamic cost.
inline void emit_dead_tail(FnBuilder& b, Rng& rng, std::size_t raw_target) {
  while (b.bytes + 6 <= raw_target)
    b.ins("mov r" + std::string(1, scratch_reg(rng)) + ", " +
              hex32(rng.next_u64()),
          6);
  while (b.bytes < raw_target) b.ins("nop", 1);
}

}  // namespace cg

// Generates program `index` of the corpus described by `p`. Deterministic:
// the result depends only on (p, index).
inline CorpusProgram gen_program(const CorpusParams& p, std::uint32_t index) {
  validate_corpus_params(p);
  Rng rng(cg::nth_program_seed(p.seed, index));

  CorpusProgram prog;
  {
    char nb[16];
    std::snprintf(nb, sizeof nb, "p%03u", index);
    prog.name = nb;
  }

  const auto draw = [&rng](const CorpusRange& r) {
    return static_cast<std::uint32_t>(rng.range(r.min, r.max));
  };

  std::uint32_t fn_count = draw(p.functions_per_program);
  const std::uint32_t depth_budget =
      p.cft_density == 0.0 ? 0u : draw(p.loop_depth);
  const std::uint32_t cb_count =
      p.cft_density == 0.0 ? 0u : draw(p.callback_count);
  const bool hot = depth_budget > 0;
  if (hot && fn_count < 4) fn_count = 4;  // main, caller, ballast, callee

  std::vector<cg::FnBuilder> fns(fn_count);
  fns[0].name = "main";
  for (std::uint32_t i = 1; i < fn_count; ++i)
    fns[i].name = "fn" + std::to_string(i);

  const std::uint32_t caller_ix = hot ? 1 : 0;
  const std::uint32_t ballast_ix = hot ? 2 : 0;
  const std::uint32_t callee_ix = hot ? fn_count - 1 : 0;

  const auto body_target = [&]() {
    return std::min<std::size_t>(draw(p.function_size), cg::kSmallRawCap);
  };

  // Call sites target only unclaimed later functions, keeping the call
  // multigraph a forest; whatever is left unclaimed is called once by main
  // so the whole image is reachable from the entry.
  std::vector<std::uint32_t> unclaimed;
  for (std::uint32_t i = 1; i < fn_count; ++i)
    if (!hot || (i != caller_ix && i != ballast_ix && i != callee_ix))
      unclaimed.push_back(i);

  const auto claim_after = [&](std::uint32_t i) -> std::string {
    std::vector<std::size_t> cands;
    for (std::size_t u = 0; u < unclaimed.size(); ++u)
      if (unclaimed[u] > i) cands.push_back(u);
    if (cands.empty()) return {};
    const std::size_t pick = cands[rng.below(cands.size())];
    const std::uint32_t fn = unclaimed[pick];
    unclaimed.erase(unclaimed.begin() + static_cast<std::ptrdiff_t>(pick));
    return fns[fn].name;
  };

  // --- non-main functions, in source order ---
  for (std::uint32_t i = 1; i < fn_count; ++i) {
    cg::FnBuilder& b = fns[i];
    if (hot && i == caller_ix) {
      const std::size_t raw = cg::kHotCallerRawBase + rng.range(0, 96);
      b.ins("mov r6, &buf", 6);
      for (int k = 0; k < 10; ++k) cg::emit_filler(b, rng);
      const std::string louter = b.fresh_label();
      const std::string linner = b.fresh_label();
      if (depth_budget >= 2) {
        b.ins("mov r2, " + std::to_string(cg::kHotOuter), 6);
        b.place_label(louter);
        b.ins("mov r3, " + std::to_string(cg::kHotInner), 6);
        b.place_label(linner);
        b.ins("call " + fns[callee_ix].name, 5);
        b.ins("sub r3, r1", 3);
        b.ins("jne " + linner, 6);
        b.ins("sub r2, r1", 3);
        b.ins("jne " + louter, 6);
        b.cfts += 3;
      } else {
        b.ins("mov r2, " + std::to_string(cg::kHotOuter * cg::kHotInner), 6);
        b.place_label(louter);
        b.ins("call " + fns[callee_ix].name, 5);
        b.ins("sub r2, r1", 3);
        b.ins("jne " + louter, 6);
        b.cfts += 2;
      }
      prog.loop_count += depth_budget >= 2 ? 2 : 1;
      cg::emit_filler(b, rng);
      b.ins("ret", 1);
      b.cfts += 1;
      cg::emit_dead_tail(b, rng, raw);
    } else if (hot && i == ballast_ix) {
      // Page-plus-sized straight-line spacer; a couple of forward skips give
      // the instruction-rearranging pass same-function material.
      const std::size_t raw = cg::kBallastRawBase + rng.range(0, 64);
      b.ins("mov r6, &buf", 6);
      const std::size_t skip_at[2] = {raw / 3, (2 * raw) / 3};
      std::size_t next_skip = 0;
      while (b.bytes + 8 < raw) {
        if (next_skip < 2 && b.bytes >= skip_at[next_skip]) {
          cg::emit_jrel_skip(b, rng);
          ++next_skip;
        } else {
          b.ins("mov r" + std::string(1, cg::scratch_reg(rng)) + ", " +
                    cg::hex32(rng.next_u64()),
                6);
        }
      }
      b.ins("ret", 1);
      b.cfts += 1;
      cg::emit_dead_tail(b, rng, raw);
    } else if (hot && i == callee_ix) {
      const std::size_t raw = cg::kHotCalleeRawBase + rng.range(0, 40);
      b.ins("out " + std::to_string(index % 89), 2);
      b.ins("ret", 1);
      b.cfts += 1;
      cg::emit_dead_tail(b, rng, raw);
    } else {
      const std::size_t raw = body_target();
      bool loop_done = false;
      if (p.cft_density == 0.0) {
        b.ins("mov r6, &buf", 6);
        while (b.bytes + 6 < raw) cg::emit_filler(b, rng);
        b.ins("halt", 1);  // no returns in a transfer-free program
        continue;
      }
      b.ins("mov r6, &buf", 6);
      while (b.bytes + 12 < raw) {
        if (b.cfts < cg::kSmallCftCap && rng.chance(p.cft_density)) {
          const std::uint64_t pick = rng.below(4);
          if (pick == 0) {
            const std::string target = claim_after(i);
            if (!target.empty())
              cg::emit_call(b, rng, target, p.indirect_fraction);
            else
              cg::emit_filler(b, rng);
          } else if (pick == 1 && depth_budget > 0 && !loop_done) {
            cg::emit_arith_loop(b, rng,
                                depth_budget >= 2 && rng.chance(0.5));
            loop_done = true;
            prog.loop_count += 1;
          } else if (pick == 2) {
            cg::emit_jrel_skip(b, rng);
          } else {
            cg::emit_cond_skip(b, rng);
          }
        } else {
          cg::emit_filler(b, rng);
        }
      }
      const std::string tail = rng.chance(p.indirect_fraction * 0.5)
                                   ? claim_after(i)
                                   : std::string();
      if (!tail.empty()) {
        b.ins("mov r0, &" + tail, 6);
        b.ins("jmpi r0", 2);
      } else {
        b.ins("ret", 1);
      }
      b.cfts += 1;
    }
  }

  // --- callbacks ---
  std::vector<cg::FnBuilder> cbs(cb_count);
  for (std::uint32_t c = 0; c < cb_count; ++c) {
    cg::FnBuilder& b = cbs[c];
    b.name = "cb" + std::to_string(c);
    b.ins("out " + std::to_string(90 + (c % 38)), 2);
    b.ins("ret", 1);
    b.cfts += 1;
    cg::emit_dead_tail(b, rng, 40 + rng.range(0, 24));
    prog.deliveries.push_back({2, static_cast<int>(c)});
  }

  // --- main, emitted last so it can absorb every unclaimed function ---
  {
    cg::FnBuilder& b = fns[0];
    b.ins("mov r1, 1", 6);
    b.ins("mov r6, &buf", 6);
    b.ins("out " + std::to_string(index % 128), 2);
    if (p.cft_density == 0.0) {
      const std::size_t raw = body_target();
      while (b.bytes + 4 < raw) cg::emit_filler(b, rng);
      b.ins("out 127", 2);
      b.ins("halt", 1);
    } else {
      if (hot) {
        b.ins("call " + fns[caller_ix].name, 5);
        b.ins("call " + fns[ballast_ix].name, 5);
        b.cfts += 2;
      }
      for (const std::uint32_t fn : unclaimed)
        cg::emit_call(b, rng, fns[fn].name, p.indirect_fraction);
      unclaimed.clear();
      std::size_t extra = 60 + rng.range(0, 120);
      const std::size_t stop = b.bytes + extra;
      while (b.bytes + 12 < stop) {
        if (b.cfts < cg::kSmallCftCap + 8 && rng.chance(p.cft_density * 0.5))
          cg::emit_cond_skip(b, rng);
        else
          cg::emit_filler(b, rng);
      }
      b.ins("out 127", 2);
      b.ins("halt", 1);
    }
  }

  // --- stitch the source ---
  std::string src;
  src += "# " + prog.name + ": generated program, " +
         std::to_string(fn_count) + " functions, " +
         std::to_string(cb_count) + " callbacks\n";
  src += ".entry main\n";
  for (const auto& cb : cbs) src += ".callback " + cb.name + "\n";
  src += ".data buf";
  for (std::size_t i = 0; i < cg::kBufBytes; ++i) src += " 0";
  src += "\n";
  const auto append_fn = [&src](const cg::FnBuilder& b) {
    src += "fn " + b.name + " {\n";
    for (const auto& l : b.lines) src += "  " + l + "\n";
    src += "}\n";
  };
  for (const auto& b : fns) append_fn(b);
  for (const auto& b : cbs) append_fn(b);

  prog.source = std::move(src);
  prog.image = assemble(prog.source);
  prog.function_count = fn_count;
  prog.callback_count = cb_count;
  prog.has_loops = prog.loop_count > 0;
  return prog;
}

inline std::vector<CorpusProgram> gen_corpus(const CorpusParams& p) {
  validate_corpus_params(p);
  std::vector<CorpusProgram> out;
  out.reserve(p.n_programs);
  for (std::uint32_t i = 0; i < p.n_programs; ++i)
    out.push_back(gen_program(p, i));
  return out;
}

// One large program (hundreds of pages) for stressing the instrumentation
// fixpoint: thousands of page-boundary-sensitive transfer sites keep the
// layout rippling for many iterations.
inline ProgramImage gen_stress_image(std::uint32_t min_pages = 310,
                                     std::uint64_t seed = 7) {
  CorpusParams p;
  p.n_programs = 1;
  const std::uint32_t n_fns =
      static_cast<std::uint32_t>((static_cast<std::uint64_t>(min_pages) * 4096) / 396 + 8);
  p.functions_per_program = {n_fns, n_fns};
  p.function_size = {370, 430};
  p.cft_density = 0.35;
  p.loop_depth = {1, 2};
  p.indirect_fraction = 0.12;
  p.callback_count = {2, 2};
  p.seed = seed;
  return gen_program(p, 0).image;
}

}  // namespace vaptr
