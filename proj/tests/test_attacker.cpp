#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "vaptr/assembler.hpp"
#include "vaptr/attacker.hpp"
#include "vaptr/machine.hpp"
#include "vaptr/rewriter.hpp"
#include "vaptr/rng.hpp"
#include "vaptr/vaptr.hpp"

using namespace vaptr;

namespace {

struct Arena {
  ProgramImage img;
  std::unique_ptr<VaptrState> v;
  MachineState m;
};

Arena arm(const ProgramImage& img, std::uint64_t interval,
          std::uint64_t seed = 11) {
  VaptrConfig cfg;
  cfg.interval_ticks = interval;
  cfg.seed = seed;
  Arena a{img, nullptr, {}};
  a.v = vaptr_init(a.img, cfg);
  a.m = init_machine(a.img);
  return a;
}

// Entry page holds three cross-page calls; the callees (each `out`+`ret`)
// land on the second page behind a big straight-line filler whose immediates
// are stuffed with 0x0f bytes, seeding misaligned returns.
std::string cross_call_source() {
  std::string src = ".entry main\nfn main {\n  call fa\n  call fb\n"
                    "  call fc\n  halt\n}\nfn filler {\n";
  for (int i = 0; i < 682; ++i) src += "  mov r0, 0x0f0f0f0f\n";
  src += "}\nfn fa {\n  out 65\n  ret\n}\nfn fb {\n  out 66\n  ret\n}\n"
         "fn fc {\n  out 67\n  ret\n}\n";
  return src;
}

// Five code pages with visibly different byte patterns per page.
std::string striped_source() {
  std::string src = ".entry main\nfn main {\n  halt\n}\nfn stripe1 {\n";
  for (int i = 0; i < 1400; ++i) src += "  mov r1, 0x11111111\n";
  src += "}\nfn stripe2 {\n";
  for (int i = 0; i < 1400; ++i) src += "  mov r3, 0x33333333\n";
  src += "}\n";
  return src;
}

// Tiny front page plus a lone `ret` function pushed onto the second page.
std::string probe_range_source() {
  std::string src = ".entry main\nfn main {\n  out 46\n  halt\n}\n"
                    "fn filler {\n";
  for (int i = 0; i < 690; ++i) src += "  mov r5, 0x22222222\n";
  src += "}\nfn lone {\n  ret\n}\n";
  return src;
}

Addr fn_addr(const ProgramImage& img, const std::string& name) {
  const auto ref = img.find_function(name);
  REQUIRE(ref.has_value());
  return img.function_addr(*ref);
}

bool oracle_terminator(Opcode op) {
  return op == Opcode::Ret || op == Opcode::Jmpi || op == Opcode::Calli;
}

struct OracleGadget {
  Addr addr = 0;
  std::vector<Instruction> instrs;
  bool intended = false;
};

// Independent brute force: enumerate every (offset, length) pair up to k and
// keep exactly the sequences whose sole terminator is the last instruction.
std::vector<OracleGadget> oracle_scan(std::span<const std::uint8_t> page,
                                      Addr base, std::uint32_t k) {
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
  std::vector<OracleGadget> out;
  for (std::size_t o = 0; o < page.size(); ++o) {
    for (std::uint32_t len = 1; len <= k; ++len) {
      std::vector<Instruction> seq;
      std::size_t at = o;
      bool decoded = true;
      for (std::uint32_t i = 0; i < len; ++i) {
        const DecodeResult r = decode_at(page, at);
        if (!r.ok()) {
          decoded = false;
          break;
        }
        seq.push_back(*r.instr);
        at += r.instr->length();
      }
      if (!decoded) continue;
      const bool last_term = oracle_terminator(seq.back().op);
      bool early_term = false;
      for (std::size_t i = 0; i + 1 < seq.size(); ++i)
        if (oracle_terminator(seq[i].op)) early_term = true;
      if (!last_term || early_term) continue;
      out.push_back({base + o, std::move(seq), aligned[o]});
      break;  // one gadget per start offset: the first terminator ends it
    }
  }
  return out;
}

void check_against_oracle(std::span<const std::uint8_t> page, Addr base,
                          std::uint32_t k) {
  const auto got = scan_gadgets(page, base, k);
  const auto want = oracle_scan(page, base, k);
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    CHECK(got[i].addr == want[i].addr);
    CHECK((got[i].kind == GadgetKind::Intended) == want[i].intended);
    CHECK(got[i].instrs == want[i].instrs);
  }
}

std::vector<std::uint8_t> page_frame(const ModuleCode& m,
                                     const PageGeometry& g, std::uint64_t p) {
  std::vector<std::uint8_t> frame(g.page_size, 0);
  const std::uint64_t off = p * g.page_size;
  const std::uint64_t take =
      std::min<std::uint64_t>(g.page_size, m.bytes.size() - off);
  std::copy(m.bytes.begin() + off, m.bytes.begin() + off + take,
            frame.begin());
  return frame;
}

}  // namespace

TEST_CASE("gadget scan equals the brute-force enumeration", "[attacker]") {
  SECTION("synthetic 64-byte page") {
    std::vector<std::uint8_t> page(64, 0);
    Rng rng(2024);
    for (auto& b : page) b = static_cast<std::uint8_t>(rng.below(256));
    page[5] = 0x0f;   // ret
    page[19] = 0x0c;  // jmpi
    page[20] = 0x01;
    page[37] = 0x0e;  // calli
    page[38] = 0x03;
    page[63] = 0x0f;
    check_against_oracle(page, 0x1000, 5);
    check_against_oracle(page, 0x1000, 1);
  }

  SECTION("every page of a real image, original and rewritten") {
    const ProgramImage clean = assemble(cross_call_source());
    const ProgramImage rsb = instrument(clean).rsb;
    for (const ProgramImage* img : {&clean, &rsb}) {
      const std::uint64_t pages = img->main.page_count(img->geometry);
      REQUIRE(pages <= 4);
      for (std::uint64_t p = 0; p < pages; ++p) {
        const auto frame = page_frame(img->main, img->geometry, p);
        check_against_oracle(frame, img->main.base + p * img->geometry.page_size, 4);
      }
    }
  }
}

TEST_CASE("aligned returns are intended, rewritten pages have none",
          "[attacker]") {
  const ProgramImage clean = assemble(cross_call_source());

  // The callee page carries the three aligned rets.
  const auto frame = page_frame(clean.main, clean.geometry, 1);
  const auto gs = scan_gadgets(frame, clean.main.base + 4096, 5);
  const std::size_t intended =
      std::count_if(gs.begin(), gs.end(), [](const Gadget& g) {
        return g.kind == GadgetKind::Intended;
      });
  CHECK(intended >= 3);

  const ProgramImage rsb = instrument(clean).rsb;
  const std::uint64_t pages = rsb.main.page_count(rsb.geometry);
  for (std::uint64_t p = 0; p < pages; ++p) {
    const auto rf = page_frame(rsb.main, rsb.geometry, p);
    for (const Gadget& g :
         scan_gadgets(rf, rsb.main.base + p * 4096, 5))
      CHECK(g.kind == GadgetKind::Unintended);
  }
}

TEST_CASE("gadget census", "[attacker]") {
  const ProgramImage clean = assemble(cross_call_source());
  const GadgetCensus orig = census_gadgets(clean, 5);
  CHECK(orig.intended >= 3);  // the three rets
  CHECK(orig.total == orig.intended + orig.unintended);

  const GadgetCensus after = census_gadgets(instrument(clean).rsb, 5);
  CHECK(after.intended == 0);
  CHECK(after.total == after.unintended);

  ProgramImage empty;
  const GadgetCensus none = census_gadgets(empty, 5);
  CHECK(none.intended == 0);
  CHECK(none.unintended == 0);
  CHECK(none.total == 0);
}

TEST_CASE("page disclosure reads live bytes by current address", "[attacker]") {
  const ProgramImage img = assemble(striped_source());
  auto a = arm(img, kIntervalInf);

  SECTION("the leaked entry page matches the static image") {
    const auto snap = disclose_page(*a.v, img.entry);
    REQUIRE(snap.has_value());
    CHECK(snap->base == img.main.base);
    CHECK(snap->generation == 0);
    CHECK(snap->bytes == page_frame(img.main, img.geometry, 0));
  }

  SECTION("unmapped addresses disclose nothing") {
    CHECK_FALSE(disclose_page(*a.v, 0x100).has_value());
    CHECK_FALSE(disclose_page(*a.v, img.mem.data_base).has_value());
  }

  SECTION("the same address reads different code once pages move") {
    const std::uint64_t ps = img.geometry.page_size;
    const std::uint64_t p1 = img.main.first_page(img.geometry) + 1;
    const std::uint64_t p2 = p1 + 1;
    const Addr addr = p1 * ps + 128;
    const auto before = disclose_page(*a.v, addr);
    REQUIRE(before.has_value());
    set_mapping_for_test(*a.v, p2, p1);  // stripe2's page now sits at p1
    const auto after = disclose_page(*a.v, addr);
    REQUIRE(after.has_value());
    CHECK(before->bytes != after->bytes);
    CHECK(after->bytes == page_frame(img.main, img.geometry, 2));
  }
}

TEST_CASE("reference discovery harvests cross-page leads", "[attacker]") {
  const ProgramImage clean = assemble(cross_call_source());
  const auto frame = page_frame(clean.main, clean.geometry, 0);

  const std::set<Addr> refs = discover_references(frame, clean.main.base);
  const std::set<Addr> want = {fn_addr(clean, "fa"), fn_addr(clean, "fb"),
                               fn_addr(clean, "fc")};
  CHECK(refs == want);

  SECTION("a page of pure fill yields nothing") {
    const std::vector<std::uint8_t> nops(4096, 0);
    CHECK(discover_references(nops, clean.main.base).empty());
  }

  SECTION("rewritten pages leak their units' stored constants") {
    const RewriteResult rw = instrument(clean);
    const std::uint64_t entry_page =
        (rw.rsb.entry - rw.rsb.main.base) / rw.rsb.geometry.page_size;
    const auto ef = page_frame(rw.rsb.main, rw.rsb.geometry, entry_page);
    const Addr ebase =
        rw.rsb.main.base + entry_page * rw.rsb.geometry.page_size;
    const std::set<Addr> got = discover_references(ef, ebase);
    std::set<Addr> expected;
    for (const RsiUnitRecord& u : rw.units) {
      if (u.site < ebase || u.site >= ebase + 4096) continue;
      if (u.kind == CftKind::DirectJump || u.kind == CftKind::DirectCall ||
          u.kind == CftKind::PageEndFallthrough)
        expected.insert(u.target_arg);
      if (u.kind == CftKind::CondJump) {
        expected.insert(u.target_arg);
        expected.insert(u.fallthrough);
      }
    }
    std::erase_if(expected, [&](Addr t) { return t >= ebase && t < ebase + 4096; });
    CHECK(got == expected);
  }
}

TEST_CASE("jitrop crawls, compiles and lands with no defense running",
          "[attacker]") {
  const ProgramImage clean = assemble(cross_call_source());
  auto a = arm(clean, kIntervalInf);

  AttackConfig cfg;
  cfg.entry_leak = clean.entry;
  cfg.needed_gadgets = 4;
  cfg.needed_intended = 1;
  cfg.k = 2;
  const AttackReport rep = jitrop_attack(a.m, *a.v, cfg);

  CHECK(rep.outcome == AttackOutcome::Success);
  CHECK(rep.pages_disclosed == 2);  // entry page, then the callee page
  CHECK(rep.gadgets_found >= 4);
  CHECK(rep.payload.size() == 4);
  CHECK(rep.discovery_ticks == 2 * cfg.t1_per_page);
  CHECK(rep.compile_ticks == cfg.t2_compile);
  CHECK(rep.discovery_ticks + rep.compile_ticks > 3000);
  CHECK(rep.shuffles_during == 0);

  // The first aligned two-instruction gadget reaching a ret is fa itself.
  CHECK(rep.payload.front() == fn_addr(clean, "fa"));
}

TEST_CASE("jitrop against the rewritten image under a live defense",
          "[attacker]") {
  const ProgramImage rsb = instrument(assemble(cross_call_source())).rsb;

  AttackConfig cfg;
  cfg.entry_leak = rsb.entry;
  cfg.needed_gadgets = 2;
  cfg.needed_intended = 1;

  SECTION("a short interval confines the crawl to the leaked page") {
    auto a = arm(rsb, 50);
    const AttackReport rep = jitrop_attack(a.m, *a.v, cfg);
    CHECK(rep.outcome == AttackOutcome::InsufficientGadgets);
    CHECK(rep.pages_disclosed == 1);
    CHECK(rep.dead_ends >= 1);  // stale references were chased and rejected
    CHECK(rep.compile_ticks == 0);
    CHECK(rep.payload.empty());
    CHECK(rep.shuffles_during > 0);
  }

  SECTION("even unlimited time finds no aligned gadget to anchor the payload") {
    auto a = arm(rsb, kIntervalInf);
    const AttackReport rep = jitrop_attack(a.m, *a.v, cfg);
    CHECK(rep.outcome == AttackOutcome::InsufficientGadgets);
    CHECK(rep.pages_disclosed > 1);  // the crawl itself works at generation 0
    CHECK(rep.gadgets_found >= 1);   // misaligned leftovers exist
    CHECK(rep.compile_ticks == 0);
  }

  SECTION("identical campaigns produce identical reports") {
    auto a1 = arm(rsb, 50, 99);
    auto a2 = arm(rsb, 50, 99);
    const AttackReport r1 = jitrop_attack(a1.m, *a1.v, cfg);
    const AttackReport r2 = jitrop_attack(a2.m, *a2.v, cfg);
    CHECK(r1.pages_disclosed == r2.pages_disclosed);
    CHECK(r1.gadgets_found == r2.gadgets_found);
    CHECK(r1.discovery_ticks == r2.discovery_ticks);
    CHECK(r1.dead_ends == r2.dead_ends);
    CHECK(r1.payload == r2.payload);
    CHECK(r1.outcome == r2.outcome);
    CHECK(r1.shuffles_during == r2.shuffles_during);
  }
}

TEST_CASE("jitrop rejects malformed configs and unmapped leaks", "[attacker]") {
  const ProgramImage clean = assemble(cross_call_source());
  auto a = arm(clean, kIntervalInf);

  AttackConfig bad;
  bad.needed_gadgets = 0;
  CHECK_THROWS_AS(jitrop_attack(a.m, *a.v, bad), std::invalid_argument);
  bad.needed_gadgets = 2;
  bad.needed_intended = 3;
  CHECK_THROWS_AS(jitrop_attack(a.m, *a.v, bad), std::invalid_argument);

  AttackConfig cfg;
  cfg.entry_leak = 0;  // unmapped
  cfg.needed_gadgets = 1;
  cfg.needed_intended = 0;
  const AttackReport rep = jitrop_attack(a.m, *a.v, cfg);
  CHECK(rep.outcome == AttackOutcome::InsufficientGadgets);
  CHECK(rep.pages_disclosed == 0);
  CHECK(rep.dead_ends == 1);

  CHECK(AttackConfig{}.needed_gadgets == 15);  // default campaign size
}

TEST_CASE("payload execution validates every association", "[attacker]") {
  const ProgramImage clean = assemble(cross_call_source());
  auto a = arm(clean, kIntervalInf);

  // Record gadgets on the callee page (not entry-pinned, not whitelisted).
  const auto snap = disclose_page(*a.v, fn_addr(clean, "fa"));
  REQUIRE(snap.has_value());
  auto gs = scan_gadgets(snap->bytes, snap->base, 5);
  REQUIRE_FALSE(gs.empty());
  std::vector<Gadget> payload;
  for (Gadget& g : gs) {
    g.generation = snap->generation;
    if (g.kind == GadgetKind::Intended) {
      payload.push_back(g);
      break;
    }
  }
  REQUIRE(payload.size() == 1);

  SECTION("valid with zero shuffles") {
    CHECK(execute_payload(a.m, *a.v, payload) == AttackOutcome::Success);
  }

  SECTION("one shuffle between record and execution breaks it") {
    vaptr_shuffle(*a.v, a.v->current_page());
    CHECK(execute_payload(a.m, *a.v, payload) ==
          AttackOutcome::PayloadCrashed);
  }

  SECTION("empty payloads are a caller bug") {
    CHECK_THROWS_AS(execute_payload(a.m, *a.v, {}), std::invalid_argument);
  }
}

TEST_CASE("blind probing infers a return address from behavior alone",
          "[attacker]") {
  const ProgramImage img = assemble(probe_range_source());
  const Addr lone = fn_addr(img, "lone");

  AttackConfig cfg;
  cfg.entry_leak = lone - 2;  // a few garbage probes first
  cfg.needed_gadgets = 1;
  cfg.needed_intended = 1;
  cfg.probe_budget = 8;

  SECTION("with the defense off the campaign succeeds") {
    auto a = arm(img, kIntervalInf);
    const AttackReport rep = blind_probe_attack(a.m, *a.v, cfg);
    CHECK(rep.outcome == AttackOutcome::Success);
    REQUIRE(rep.payload.size() == 1);
    CHECK(rep.payload.front() == lone);
    CHECK(img.main.bytes[lone - img.main.base] ==
          static_cast<std::uint8_t>(Opcode::Ret));
    CHECK(rep.dead_ends >= 1);  // the garbage probes crashed
  }

  SECTION("a short interval stales the inferences before execution") {
    auto a = arm(img, 1);
    const AttackReport rep = blind_probe_attack(a.m, *a.v, cfg);
    CHECK(rep.outcome != AttackOutcome::Success);
    CHECK(rep.shuffles_during > 100);  // the defense raced every probe
  }

  SECTION("probing into the data region only ever observes crashes") {
    auto a = arm(img, kIntervalInf);
    AttackConfig data_cfg = cfg;
    data_cfg.entry_leak = img.mem.data_base;
    data_cfg.probe_budget = 4;
    const AttackReport rep = blind_probe_attack(a.m, *a.v, data_cfg);
    CHECK(rep.outcome == AttackOutcome::InsufficientGadgets);
    CHECK(rep.gadgets_found == 0);
    CHECK(rep.dead_ends == 4);
  }
}
