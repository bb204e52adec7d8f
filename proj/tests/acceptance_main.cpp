// End-to-end acceptance gate for the co-simulator. Runs nine numbered
// checks covering semantic preservation under the live defense, mapping
// invariants, rewriter fixpoint behavior, attack outcomes, gadget removal,
// optimization effectiveness, shadow-table hardening, shuffle uniformity,
// and oracle equivalence. Prints one PASS/FAIL line per check; the process
// exit code is the number of failures.
#include <algorithm>
#include <array>
#include <chrono>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "vaptr/assembler.hpp"
#include "vaptr/attacker.hpp"
#include "vaptr/corpus.hpp"
#include "vaptr/machine.hpp"
#include "vaptr/rewriter.hpp"
#include "vaptr/vaptr.hpp"

using namespace vaptr;

namespace {

// ------------------------------------------------------ pinned gate bounds

constexpr std::uint32_t kCorpusPrograms = 100;
constexpr std::uint64_t kCorpusSeed = 1;
constexpr std::uint64_t kIntervals[] = {kIntervalInf, 100, 10, 1};
constexpr std::uint64_t kShuffleSeeds[] = {101, 102, 103, 104, 105};
constexpr double kSemanticBudgetSec = 60.0;

constexpr std::uint32_t kIterationBound = 1000;
constexpr std::uint32_t kStressMinPages = 300;
constexpr std::uint32_t kStressIterationFloor = 10;  // strict: must exceed

constexpr std::uint32_t kNeededGadgets = 15;
constexpr std::uint32_t kNeededIntended = 1;
constexpr std::uint32_t kGadgetLen = 5;
constexpr std::uint64_t kAttackIntervals[] = {100, 10, 1};
constexpr std::uint64_t kAttackSeed = 7;

constexpr double kCensusBudgetSec = 10.0;
constexpr double kCensusReferencePct = 56.1;  // reported beside, not matched

constexpr double kOptReferencePct = 64.4;  // reported beside, not matched

constexpr int kShadowTrials = 1000;

constexpr std::uint64_t kUniformityTrials = 24000;
constexpr double kChiSquareCritical001 = 51.18;  // 23 degrees of freedom
constexpr double kUniformityBudgetSec = 5.0;

constexpr std::uint64_t kOracleMaxPages = 4;
constexpr std::uint64_t kRunFuel = 20'000'000;

// ----------------------------------------------------------------- gating

struct Gate {
  int failures = 0;
  void line(int id, const char* name, bool pass, const std::string& detail) {
    std::printf("%s  %d %-24s %s\n", pass ? "PASS" : "FAIL", id, name,
                detail.c_str());
    std::fflush(stdout);
    if (!pass) ++failures;
  }
};

using Clock = std::chrono::steady_clock;

double secs_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return std::string(buf);
}

// ------------------------------------------------ shared corpus artifacts

struct Prepared {
  bool ready = false;
  std::vector<CorpusProgram> programs;
  std::vector<ProgramImage> rsb;        // rewrites with both optimizations on
  std::vector<RewriteStats> stats;
  std::vector<std::vector<std::uint8_t>> ref_out;  // original program output
};

RunResult run_image(const ProgramImage& img, std::uint64_t interval,
                    std::uint64_t seed,
                    const std::vector<CallbackDelivery>& deliveries,
                    MachineState& m_out) {
  VaptrConfig vc;
  vc.interval_ticks = interval;
  vc.seed = seed;
  auto v = vaptr_init(img, vc);
  m_out = init_machine(img);
  RunOptions opts;
  opts.fuel = kRunFuel;
  opts.deliveries = deliveries;
  return run(*v, m_out, opts);
}

// ------------------------------------------------- criterion 1: semantics

bool criterion1(Gate& g, Prepared& prep) {
  const auto t0 = Clock::now();
  CorpusParams params;
  params.n_programs = kCorpusPrograms;
  params.seed = kCorpusSeed;
  prep.programs = gen_corpus(params);

  std::uint64_t originals_halted = 0;
  for (const CorpusProgram& p : prep.programs) {
    MachineState m;
    const RunResult r =
        run_image(p.image, kIntervalInf, 0, p.deliveries, m);
    if (r.status == Status::Halted) ++originals_halted;
    prep.ref_out.push_back(m.output);
  }

  for (const CorpusProgram& p : prep.programs) {
    RewriteResult r = instrument(p.image);
    prep.stats.push_back(r.stats);
    prep.rsb.push_back(std::move(r.rsb));
  }

  std::uint64_t runs = 0, identical = 0;
  for (std::size_t i = 0; i < prep.programs.size(); ++i) {
    for (const std::uint64_t interval : kIntervals) {
      for (const std::uint64_t seed : kShuffleSeeds) {
        MachineState m;
        const RunResult r = run_image(prep.rsb[i], interval, seed,
                                      prep.programs[i].deliveries, m);
        ++runs;
        if (r.status == Status::Halted && m.output == prep.ref_out[i])
          ++identical;
      }
    }
  }
  const double el = secs_since(t0);
  prep.ready = originals_halted == prep.programs.size();

  const bool pass = prep.programs.size() == kCorpusPrograms &&
                    originals_halted == kCorpusPrograms &&
                    runs == identical && el < kSemanticBudgetSec;
  g.line(1, "semantic-equivalence", pass,
         fmt("%zu programs x 4 intervals x 5 seeds: %llu/%llu outputs "
             "byte-identical and halting, %.1fs (budget %.0fs)",
             prep.programs.size(),
             static_cast<unsigned long long>(identical),
             static_cast<unsigned long long>(runs), el, kSemanticBudgetSec));
  return pass;
}

// -------------------------------------------- criterion 2: two-step maps

// PageTable[L2L[p]] == PageTable0[p] for every page p, and the forward and
// inverse tables are mutually inverse.
bool two_step_ok(const VaptrState& s) {
  const std::size_t n = s.pages.size();
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t cur = s.forward[i];  // L2L of before-page i
    const auto fc = s.pages.flat_of(cur);
    if (!fc) return false;
    if (s.page_table[*fc] != s.page_table0[i]) return false;
    if (s.inverse[*fc] != s.pages.page_at(i)) return false;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto fb = s.pages.flat_of(s.inverse[i]);
    if (!fb) return false;
    if (s.forward[*fb] != s.pages.page_at(i)) return false;
  }
  return true;
}

bool criterion2(Gate& g, const Prepared& prep) {
  if (!prep.ready) {
    g.line(2, "two-step-mapping", false, "prerequisite corpus unavailable");
    return false;
  }
  // Every shuffle anywhere re-checks the structural invariants inline
  // (vaptr_shuffle throws on violation), so criterion 1's 2,000 runs already
  // aborted on any breakage. Here a sample of programs re-runs at the
  // fastest interval with this gate's own verifier applied after every
  // single shuffle.
  std::uint64_t verified = 0;
  bool all_ok = true;
  const std::size_t sample = std::min<std::size_t>(prep.programs.size(), 5);
  for (std::size_t i = 0; i < sample && all_ok; ++i) {
    VaptrConfig vc;
    vc.interval_ticks = 1;
    vc.seed = 777 + i;
    auto v = vaptr_init(prep.rsb[i], vc);
    MachineState m = init_machine(prep.rsb[i]);
    const std::vector<CallbackDelivery>& ds = prep.programs[i].deliveries;
    std::uint64_t fuel = kRunFuel, now = 0, last = v->shuffle_count;
    std::size_t di = 0;
    while (m.status == Status::Running) {
      if (fuel-- == 0) break;
      ++now;
      vaptr_tick(*v, now);
      if (v->shuffle_count != last) {
        last = v->shuffle_count;
        if (!two_step_ok(*v)) {
          all_ok = false;
          break;
        }
        ++verified;
      }
      step(*v, m);
      while (di < ds.size() && m.output.size() >= ds[di].after_output &&
             m.status == Status::Running) {
        deliver_callback(*v, m, ds[di].id);
        ++di;
      }
    }
    if (m.status != Status::Halted) all_ok = false;
  }
  const bool pass = all_ok && verified > 0;
  g.line(2, "two-step-mapping", pass,
         fmt("%llu shuffles explicitly verified after each shuffle on %zu "
             "interval-1 runs; all shuffles self-check inline",
             static_cast<unsigned long long>(verified), sample));
  return pass;
}

// ------------------------------------------- criterion 3: fixpoint bounds

bool criterion3(Gate& g, const Prepared& prep) {
  if (!prep.ready) {
    g.line(3, "fixpoint-behavior", false, "prerequisite corpus unavailable");
    return false;
  }
  std::uint32_t iter_max = 0;
  bool bounded = true;
  for (const RewriteStats& s : prep.stats) {
    iter_max = std::max(iter_max, s.iterations);
    if (s.iterations < 1 || s.iterations > kIterationBound) bounded = false;
  }

  // Idempotence: the rewritten image leaves no inter-page control-transfer
  // instruction, so a further classify-and-replace pass has no work.
  std::uint64_t residual = 0;
  for (const ProgramImage& rsb : prep.rsb)
    for (const CftSite& s : classify_cft(rsb))
      if (s.cls == CftClass::InterPage) ++residual;

  // Nontrivial convergence on a large synthetic image, measured in the
  // plain instrumentation mode (no reorder/rearrange); the optimizations
  // deliberately compress page churn and with them the same image settles
  // in a handful of iterations.
  const ProgramImage stress = gen_stress_image(310, 7);
  RewriteOptions plain;
  plain.enable_reorder = false;
  plain.enable_rearrange = false;
  const RewriteResult sr = instrument(stress, plain);
  const bool stress_ok = sr.stats.pages_before >= kStressMinPages &&
                         sr.stats.iterations > kStressIterationFloor &&
                         sr.stats.iterations <= kIterationBound;

  const bool pass = bounded && residual == 0 && stress_ok;
  g.line(3, "fixpoint-behavior", pass,
         fmt("corpus max %u iterations (bound %u); %llu residual inter-page "
             "sites after rewrite; stress %llu pages -> %u iterations "
             "(floor %u)",
             iter_max, kIterationBound,
             static_cast<unsigned long long>(residual),
             static_cast<unsigned long long>(sr.stats.pages_before),
             sr.stats.iterations, kStressIterationFloor));
  return pass;
}

// --------------------------------------------- criterion 4: attack table

bool criterion4(Gate& g, const Prepared& prep) {
  if (!prep.ready) {
    g.line(4, "attack-outcomes", false, "prerequisite corpus unavailable");
    return false;
  }
  AttackConfig ac;
  ac.needed_gadgets = kNeededGadgets;
  ac.needed_intended = kNeededIntended;
  ac.k = kGadgetLen;

  // (a) No defense, original binary: the crawl succeeds wherever the static
  // census clears the payload requirement.
  std::uint64_t eligible = 0, succeeded = 0, below_floor = 0;
  for (const CorpusProgram& p : prep.programs) {
    const GadgetCensus c = census_gadgets(p.image, ac.k);
    if (c.total < kNeededGadgets || c.intended < kNeededIntended) {
      ++below_floor;
      continue;
    }
    ++eligible;
    VaptrConfig vc;
    auto v = vaptr_init(p.image, vc);
    MachineState m = init_machine(p.image);
    AttackConfig a = ac;
    a.entry_leak = p.image.entry;
    if (jitrop_attack(m, *v, a).outcome == AttackOutcome::Success)
      ++succeeded;
  }

  // (b) Live defense, instrumented binary: one page scanned, nothing runs.
  std::uint64_t defended = 0, confined = 0;
  for (std::size_t i = 0; i < prep.programs.size(); ++i) {
    for (const std::uint64_t interval : kAttackIntervals) {
      VaptrConfig vc;
      vc.interval_ticks = interval;
      vc.seed = kAttackSeed;
      auto v = vaptr_init(prep.rsb[i], vc);
      MachineState m = init_machine(prep.rsb[i]);
      AttackConfig a = ac;
      a.entry_leak = prep.rsb[i].entry;
      const AttackReport rep = jitrop_attack(m, *v, a);
      ++defended;
      if (rep.pages_disclosed == 1 && rep.gadgets_executed == 0) ++confined;
    }
  }

  const bool pass = below_floor == 0 && eligible == succeeded &&
                    defended == confined && defended > 0;
  g.line(4, "attack-outcomes", pass,
         fmt("(a) %llu/%llu undefended originals fully exploited, %llu below "
             "the gadget floor; (b) %llu/%llu defended runs one-page with 0 "
             "gadgets executed",
             static_cast<unsigned long long>(succeeded),
             static_cast<unsigned long long>(eligible),
             static_cast<unsigned long long>(below_floor),
             static_cast<unsigned long long>(confined),
             static_cast<unsigned long long>(defended)));
  return pass;
}

// --------------------------------------------- criterion 5: gadget census

bool criterion5(Gate& g, const Prepared& prep) {
  if (!prep.ready) {
    g.line(5, "gadget-census", false, "prerequisite corpus unavailable");
    return false;
  }
  const auto t0 = Clock::now();
  std::uint64_t intended_left = 0, non_strict = 0;
  double reduction_sum = 0.0;
  for (std::size_t i = 0; i < prep.programs.size(); ++i) {
    const GadgetCensus co = census_gadgets(prep.programs[i].image, kGadgetLen);
    const GadgetCensus ci = census_gadgets(prep.rsb[i], kGadgetLen);
    intended_left += ci.intended;
    if (ci.total >= co.total) ++non_strict;
    if (co.total > 0)
      reduction_sum += (static_cast<double>(co.total) -
                        static_cast<double>(ci.total)) *
                       100.0 / static_cast<double>(co.total);
  }
  const double el = secs_since(t0);
  const double mean = reduction_sum / static_cast<double>(prep.programs.size());
  const bool pass =
      intended_left == 0 && non_strict == 0 && el < kCensusBudgetSec;
  g.line(5, "gadget-census", pass,
         fmt("intended gadgets after rewrite: %llu; non-strict totals: %llu; "
             "mean reduction %.1f%% (reference %.1f%%); %.1fs (budget %.0fs)",
             static_cast<unsigned long long>(intended_left),
             static_cast<unsigned long long>(non_strict), mean,
             kCensusReferencePct, el, kCensusBudgetSec));
  return pass;
}

// -------------------------------------- criterion 6: optimization effects

// A "type-I optimizable" transfer: site and static target inside the same
// function whose rewritten body fits a page net of the reserved page-end
// slot. After reordering, none may cross a page.
std::uint64_t type1_interpage_transfers(const ProgramImage& rsb) {
  const std::uint64_t ps = rsb.geometry.page_size;
  const std::uint64_t capacity = ps - kRsiDefaultLength;
  const auto owner = [&](Addr a)
      -> std::optional<std::pair<std::uint32_t, std::size_t>> {
    for (std::uint32_t mi = 0; mi < rsb.module_count(); ++mi) {
      const ModuleCode& mc = rsb.module_at(mi);
      if (a < mc.base || a >= mc.base + mc.bytes.size()) continue;
      const std::uint64_t off = a - mc.base;
      for (std::size_t fi = 0; fi < mc.functions.size(); ++fi) {
        const FunctionInfo& f = mc.functions[fi];
        if (off >= f.offset && off < f.offset + f.length) return {{mi, fi}};
      }
    }
    return std::nullopt;
  };
  std::uint64_t bad = 0;
  for (const CftSite& s : classify_cft(rsb)) {
    if (!s.target || s.cls != CftClass::InterPage) continue;
    const auto fs = owner(s.site);
    const auto ft = owner(*s.target);
    if (!fs || !ft || *fs != *ft) continue;
    const FunctionInfo& f =
        rsb.module_at(fs->first).functions[fs->second];
    if (f.length <= capacity) ++bad;
  }
  return bad;
}

bool criterion6(Gate& g, const Prepared& prep) {
  if (!prep.ready) {
    g.line(6, "optimization-effect", false, "prerequisite corpus unavailable");
    return false;
  }
  std::uint64_t type1_bad = 0;
  for (const ProgramImage& rsb : prep.rsb)
    type1_bad += type1_interpage_transfers(rsb);

  RewriteOptions plainopts;
  plainopts.enable_reorder = false;
  plainopts.enable_rearrange = false;

  std::uint64_t loop_programs = 0, strict = 0;
  std::uint64_t exec_plain_sum = 0, exec_opt_sum = 0;
  for (std::size_t i = 0; i < prep.programs.size(); ++i) {
    const CorpusProgram& p = prep.programs[i];
    const RewriteResult plain = instrument(p.image, plainopts);
    MachineState mp, mo;
    const RunResult rp =
        run_image(plain.rsb, kIntervalInf, 0, p.deliveries, mp);
    const RunResult ro =
        run_image(prep.rsb[i], kIntervalInf, 0, p.deliveries, mo);
    exec_plain_sum += rp.rsi_total;
    exec_opt_sum += ro.rsi_total;
    if (p.has_loops) {
      ++loop_programs;
      if (ro.rsi_total < rp.rsi_total) ++strict;
    }
  }
  const double gross =
      exec_plain_sum == 0
          ? 0.0
          : (static_cast<double>(exec_plain_sum) -
             static_cast<double>(exec_opt_sum)) *
                100.0 / static_cast<double>(exec_plain_sum);

  const bool pass =
      type1_bad == 0 && loop_programs > 0 && strict == loop_programs;
  g.line(6, "optimization-effect", pass,
         fmt("%llu type-I inter-page transfers after reorder; executed-unit "
             "strict decrease on %llu/%llu loop programs; gross executed "
             "reduction %.1f%% (reference %.1f%%)",
             static_cast<unsigned long long>(type1_bad),
             static_cast<unsigned long long>(strict),
             static_cast<unsigned long long>(loop_programs), gross,
             kOptReferencePct));
  return pass;
}

// ------------------------------------------ criterion 7: shadow hardening

bool criterion7(Gate& g) {
  // main calls across a page boundary; the callee's return slot is smashed
  // with the address of a decoy while the callee runs. The shadow table
  // must route the return to the true caller on every trial.
  std::string src =
      ".entry main\nfn main {\n  call helper\n  out 65\n  halt\n}\n"
      "fn filler {\n";
  for (int i = 0; i < 690; ++i) src += "  mov r1, 0x01020304\n";
  src += "}\nfn decoy {\n  out 66\n  halt\n}\nfn helper {\n  out 64\n  ret\n}\n";

  RewriteOptions plain;  // keep caller and callee on distinct pages
  plain.enable_reorder = false;
  plain.enable_rearrange = false;
  const RewriteResult rw = instrument(assemble(src), plain);
  const ProgramImage& rsb = rw.rsb;

  const auto decoy_ref = rsb.find_function("decoy");
  if (!decoy_ref || rw.stats.cft_replaced < 2) {
    g.line(7, "shadow-hardening", false,
           "test program did not instrument as expected");
    return false;
  }
  const Addr decoy_addr = rsb.function_addr(*decoy_ref);

  int good = 0;
  for (int t = 0; t < kShadowTrials; ++t) {
    VaptrConfig vc;
    vc.interval_ticks = 1;  // shuffle on every tick throughout
    vc.seed = 1000 + static_cast<std::uint64_t>(t);
    auto v = vaptr_init(rsb, vc);
    MachineState m = init_machine(rsb);
    std::uint64_t now = 0, fuel = 200'000;
    bool poked = false;
    while (m.status == Status::Running && fuel--) {
      ++now;
      vaptr_tick(*v, now);
      step(*v, m);
      if (!poked && !m.output.empty() && m.output.back() == 64) {
        // Inside helper: the top of the stack is the saved return slot.
        if (!m.write_word_at(m.sp, static_cast<Word>(decoy_addr))) break;
        poked = true;
      }
    }
    const std::vector<std::uint8_t> want{64, 65};
    if (poked && m.status == Status::Halted && m.output == want) ++good;
  }
  const bool pass = good == kShadowTrials;
  g.line(7, "shadow-hardening", pass,
         fmt("%d/%d smashed-return trials returned through the shadow entry",
             good, kShadowTrials));
  return pass;
}

// ----------------------------------------- criterion 8: shuffle uniformity

bool criterion8(Gate& g) {
  const auto t0 = Clock::now();
  // Exactly four shuffled code pages (the stub page is pinned).
  std::string src = ".entry main\nfn main {\n  out 1\n  halt\n}\n";
  for (const char* name : {"fa", "fb", "fc", "fd"}) {
    src += std::string("fn ") + name + " {\n";
    for (int i = 0; i < 682; ++i) src += "  mov r2, 0x11223344\n";
    src += "}\n";
  }
  const ProgramImage img = assemble(src);
  VaptrConfig vc;
  vc.seed = 424242;
  auto v = vaptr_init(img, vc);

  const std::uint64_t first = img.main.first_page(img.geometry);
  const std::uint64_t npages = img.main.page_count(img.geometry);
  std::uint64_t randomizable = 0;
  for (std::size_t i = 0; i < v->pages.size(); ++i)
    if (!v->whitelist[i]) ++randomizable;
  if (npages != 4 || randomizable != 4) {
    g.line(8, "shuffle-uniformity", false,
           fmt("expected 4 shuffled pages, image has %llu/%llu",
               static_cast<unsigned long long>(npages),
               static_cast<unsigned long long>(randomizable)));
    return false;
  }

  std::array<std::uint64_t, 4> perm{0, 1, 2, 3};
  std::map<std::array<std::uint64_t, 4>, std::size_t> rank;
  do {
    rank.emplace(perm, rank.size());
  } while (std::next_permutation(perm.begin(), perm.end()));

  std::array<std::uint64_t, 24> counts{};
  for (std::uint64_t trial = 0; trial < kUniformityTrials; ++trial) {
    // The executing page is parked on the pinned stub page, so the full
    // 4-page set participates in every draw.
    vaptr_shuffle(*v, v->stub_page);
    std::array<std::uint64_t, 4> got{};
    for (std::uint64_t p = 0; p < 4; ++p)
      got[p] = v->forward[*v->pages.flat_of(first + p)] - first;
    ++counts[rank.at(got)];
  }
  const double expected = static_cast<double>(kUniformityTrials) / 24.0;
  double chi2 = 0.0;
  for (const std::uint64_t c : counts) {
    const double d = static_cast<double>(c) - expected;
    chi2 += d * d / expected;
  }
  const double el = secs_since(t0);
  const bool pass = chi2 < kChiSquareCritical001 && el < kUniformityBudgetSec;
  g.line(8, "shuffle-uniformity", pass,
         fmt("chi-square %.2f over 24 permutations after %llu shuffles "
             "(critical %.2f at 23 d.o.f.); %.2fs (budget %.0fs)",
             chi2, static_cast<unsigned long long>(kUniformityTrials),
             kChiSquareCritical001, el, kUniformityBudgetSec));
  return pass;
}

// -------------------------------------- criterion 9: oracle equivalence

bool oracle_terminator(Opcode op) {
  return op == Opcode::Ret || op == Opcode::Jmpi || op == Opcode::Calli;
}

// Independent brute force over one page: for every start offset, the first
// terminator within k decoded instructions ends exactly one gadget.
void oracle_scan_page(std::span<const std::uint8_t> page, std::uint32_t k,
                      std::uint64_t& intended, std::uint64_t& unintended) {
  std::vector<bool> aligned(page.size(), false);
  for (std::size_t at = 0; at < page.size();) {
    const DecodeResult r = decode_at(page, at);
    if (r.ok()) {
      aligned[at] = true;
      at += r.instr->length();
    } else {
      ++at;
    }
  }
  for (std::size_t o = 0; o < page.size(); ++o) {
    std::size_t at = o;
    for (std::uint32_t n = 1; n <= k; ++n) {
      const DecodeResult r = decode_at(page, at);
      if (!r.ok()) break;
      at += r.instr->length();
      if (oracle_terminator(r.instr->op)) {
        if (aligned[o]) ++intended;
        else ++unintended;
        break;
      }
    }
  }
}

GadgetCensus oracle_census(const ProgramImage& img, std::uint32_t k) {
  GadgetCensus c;
  const std::uint64_t ps = img.geometry.page_size;
  for (std::uint32_t mi = 0; mi < img.module_count(); ++mi) {
    const ModuleCode& mc = img.module_at(mi);
    const std::uint64_t pages = mc.page_count(img.geometry);
    for (std::uint64_t p = 0; p < pages; ++p) {
      std::vector<std::uint8_t> page(ps, 0);
      const std::uint64_t off = p * ps;
      const std::uint64_t take =
          std::min<std::uint64_t>(ps, mc.bytes.size() > off
                                          ? mc.bytes.size() - off
                                          : 0);
      std::copy(mc.bytes.begin() + static_cast<std::ptrdiff_t>(off),
                mc.bytes.begin() + static_cast<std::ptrdiff_t>(off + take),
                page.begin());
      oracle_scan_page(page, k, c.intended, c.unintended);
    }
  }
  c.total = c.intended + c.unintended;
  return c;
}

// Independent classification of every control-transfer instruction.
struct OracleSite {
  Addr site;
  int kind;
  bool inter;
  std::int64_t target;  // -1 when dynamic

  auto tie() const { return std::tie(site, kind, inter, target); }
  bool operator<(const OracleSite& o) const { return tie() < o.tie(); }
  bool operator==(const OracleSite& o) const { return tie() == o.tie(); }
};

std::vector<OracleSite> oracle_classify(const ProgramImage& img) {
  const std::uint64_t ps = img.geometry.page_size;
  std::vector<OracleSite> out;
  for (std::uint32_t mi = 0; mi < img.module_count(); ++mi) {
    const ModuleCode& mc = img.module_at(mi);
    const auto walk = [&](std::uint64_t off, std::uint64_t len) {
      std::uint64_t at = off;
      while (at < off + len) {
        const DecodeResult r = decode_at(std::span(mc.bytes), at);
        if (!r.ok()) return;  // image must decode; mismatch shows up anyway
        const Instruction& ins = *r.instr;
        const Addr site = mc.base + at;
        switch (ins.op) {
          case Opcode::Jrel:
          case Opcode::Jcc:
          case Opcode::Callrel: {
            const Addr tgt = site + ins.length() + ins.disp;
            out.push_back({site,
                           ins.op == Opcode::Jrel    ? 1
                           : ins.op == Opcode::Jcc   ? 4
                                                     : 2,
                           site / ps != tgt / ps,
                           static_cast<std::int64_t>(tgt)});
            break;
          }
          case Opcode::Jmpi:
            out.push_back({site, 6, true, -1});
            break;
          case Opcode::Calli:
            out.push_back({site, 7, true, -1});
            break;
          case Opcode::Ret:
            out.push_back({site, 3, true, -1});
            break;
          default:
            break;
        }
        at += ins.length();
      }
    };
    for (const FunctionInfo& f : mc.functions) walk(f.offset, f.length);
    for (const auto& [off, len] : mc.fillers) walk(off, len);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<OracleSite> sites_of(const ProgramImage& img) {
  std::vector<OracleSite> out;
  for (const CftSite& s : classify_cft(img)) {
    out.push_back({s.site, static_cast<int>(s.kind),
                   s.cls == CftClass::InterPage,
                   s.target ? static_cast<std::int64_t>(*s.target) : -1});
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::uint64_t image_pages(const ProgramImage& img) {
  std::uint64_t n = 0;
  for (std::uint32_t mi = 0; mi < img.module_count(); ++mi)
    n += img.module_at(mi).page_count(img.geometry);
  return n;
}

bool criterion9(Gate& g, const Prepared& prep) {
  std::vector<ProgramImage> images;

  // Hand-built textures: misaligned-terminator soup, a ret-dense page, and
  // an all-NOP body.
  {
    std::string soup = ".entry main\nfn main {\n  call fa\n  call fb\n"
                       "  halt\n}\nfn big {\n";
    for (int i = 0; i < 682; ++i) soup += "  mov r0, 0x0f0c0e0f\n";
    soup += "}\nfn fa {\n  out 65\n  ret\n}\nfn fb {\n  out 66\n  ret\n}\n";
    images.push_back(assemble(soup));

    std::string rets = ".entry main\nfn main {\n  halt\n}\n";
    for (int f = 0; f < 40; ++f) {
      rets += "fn r" + std::to_string(f) + " {\n";
      for (int i = 0; i < 10; ++i) rets += "  ret\n";
      rets += "}\n";
    }
    images.push_back(assemble(rets));

    std::string nops = ".entry main\nfn main {\n";
    for (int i = 0; i < 600; ++i) nops += "  nop\n";
    nops += "  halt\n}\n";
    images.push_back(assemble(nops));
  }

  if (prep.ready) {
    for (std::size_t i = 0; i < prep.programs.size(); ++i) {
      if (image_pages(prep.programs[i].image) <= kOracleMaxPages)
        images.push_back(prep.programs[i].image);
      if (image_pages(prep.rsb[i]) <= kOracleMaxPages)
        images.push_back(prep.rsb[i]);
    }
  }

  std::uint64_t census_mismatch = 0, classify_mismatch = 0;
  for (const ProgramImage& img : images) {
    for (const std::uint32_t k : {2u, kGadgetLen}) {
      const GadgetCensus got = census_gadgets(img, k);
      const GadgetCensus want = oracle_census(img, k);
      if (got.intended != want.intended ||
          got.unintended != want.unintended || got.total != want.total)
        ++census_mismatch;
    }
    if (sites_of(img) != oracle_classify(img)) ++classify_mismatch;
  }

  const bool pass = !images.empty() && census_mismatch == 0 &&
                    classify_mismatch == 0;
  g.line(9, "oracle-equivalence", pass,
         fmt("%zu images (<= %llu pages): %llu census mismatches, %llu "
             "classification mismatches against brute force",
             images.size(),
             static_cast<unsigned long long>(kOracleMaxPages),
             static_cast<unsigned long long>(census_mismatch),
             static_cast<unsigned long long>(classify_mismatch)));
  return pass;
}

}  // namespace

int main() {
  Gate g;
  Prepared prep;
  const auto t0 = Clock::now();

  const auto guarded = [&g](int id, const char* name, auto&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      g.line(id, name, false, std::string("exception: ") + e.what());
    }
  };

  guarded(1, "semantic-equivalence", [&] { criterion1(g, prep); });
  guarded(2, "two-step-mapping", [&] { criterion2(g, prep); });
  guarded(3, "fixpoint-behavior", [&] { criterion3(g, prep); });
  guarded(4, "attack-outcomes", [&] { criterion4(g, prep); });
  guarded(5, "gadget-census", [&] { criterion5(g, prep); });
  guarded(6, "optimization-effect", [&] { criterion6(g, prep); });
  guarded(7, "shadow-hardening", [&] { criterion7(g); });
  guarded(8, "shuffle-uniformity", [&] { criterion8(g); });
  guarded(9, "oracle-equivalence", [&] { criterion9(g, prep); });

  std::printf("%d/9 criteria passed in %.1fs\n", 9 - g.failures,
              secs_since(t0));
  return g.failures;
}
