#include <catch2/catch_amalgamated.hpp>

#include <span>
#include <string>

#include "vaptr/assembler.hpp"
#include "vaptr/machine.hpp"
#include "vaptr/rewriter.hpp"
#include "vaptr/vaptr.hpp"

using namespace vaptr;

namespace {

struct RunOutcome {
  Status status = Status::Running;
  std::string output;
  Addr final_sp = 0;
};

RunOutcome run_image(const ProgramImage& img, std::uint64_t interval,
                     std::uint64_t seed = 5,
                     std::vector<CallbackDelivery> deliveries = {}) {
  VaptrConfig cfg;
  cfg.interval_ticks = interval;
  cfg.seed = seed;
  auto v = vaptr_init(img, cfg);
  MachineState m = init_machine(img);
  RunOptions opt;
  opt.deliveries = std::move(deliveries);
  const RunResult r = run(*v, m, opt);
  return {r.status, std::string(m.output.begin(), m.output.end()), m.sp};
}

const std::string kCallProgram = R"(
  .entry main
  fn main {
    mov r2, 3
    mov r1, 1
  Lloop:
    call emit
    sub r2, r1
    jne Lloop
    call tail
    halt
  }
  fn emit {
    out 42
    ret
  }
  fn tail {
    mov r4, &emit
    calli r4
    out 10
    ret
  }
)";

}  // namespace

TEST_CASE("rewritten programs behave like the original under shuffling",
          "[rewriter]") {
  const ProgramImage clean = assemble(kCallProgram);
  const RunOutcome base = run_image(clean, kIntervalInf);
  REQUIRE(base.status == Status::Halted);
  CHECK(base.output == "****\n");  // three looped calls, one indirect, newline

  const RewriteResult rw = instrument(clean);
  CHECK_NOTHROW(rw.rsb.validate());

  for (std::uint64_t interval : {kIntervalInf, std::uint64_t{100},
                                 std::uint64_t{7}, std::uint64_t{1}}) {
    const RunOutcome got = run_image(rw.rsb, interval);
    CHECK(got.status == base.status);
    CHECK(got.output == base.output);
    CHECK(got.final_sp == base.final_sp);
  }
}

TEST_CASE("no un-instrumented inter-page transfer survives", "[rewriter]") {
  const ProgramImage clean = assemble(kCallProgram);
  const RewriteResult rw = instrument(clean);

  for (std::uint32_t mi = 0; mi < rw.rsb.module_count(); ++mi) {
    const ModuleCode& mc = rw.rsb.module_at(mi);
    for (const auto& f : mc.functions) {
      for (std::uint64_t at = f.offset; at < f.offset + f.length;) {
        const DecodeResult r = decode_at(std::span(mc.bytes), at);
        REQUIRE(r.ok());
        const Instruction& ins = *r.instr;
        // Runtime-target transfers can never stay plain.
        CHECK(ins.op != Opcode::Ret);
        CHECK(ins.op != Opcode::Jmpi);
        CHECK(ins.op != Opcode::Calli);
        if (ins.op == Opcode::Jrel || ins.op == Opcode::Jcc ||
            ins.op == Opcode::Callrel) {
          const Addr site = mc.base + at;
          const Addr target = site + ins.length() + ins.disp;
          CHECK(site / 4096 == target / 4096);  // survivors are intra-page
        }
        at += ins.length();
      }
    }
  }
}

TEST_CASE("every non-final page ends with a fall-through unit", "[rewriter]") {
  // Enough straight-line code to span several pages.
  std::string src = "fn main {\n";
  for (int i = 0; i < 2500; ++i) src += "  mov r1, " + std::to_string(i) + "\n";
  src += "  halt\n}\n";
  const ProgramImage clean = assemble(src);
  const RewriteResult rw = instrument(clean);
  const ModuleCode& mc = rw.rsb.main;
  const std::uint64_t ps = rw.rsb.geometry.page_size;
  const std::uint64_t pages = mc.page_count(rw.rsb.geometry);
  REQUIRE(pages >= 3);

  std::uint64_t found = 0;
  for (std::uint64_t p = 0; p + 1 < pages; ++p) {
    const std::uint64_t slot = (p + 1) * ps - kRsiDefaultLength;
    const DecodeResult r = decode_at(std::span(mc.bytes), slot);
    REQUIRE(r.ok());
    REQUIRE(r.instr->op == Opcode::Rsi);
    CHECK(rsi_flag_kind(r.instr->rsi.flag) == CftKind::PageEndFallthrough);
    CHECK(r.instr->rsi.target_arg == mc.base + (p + 1) * ps);
    ++found;
  }
  CHECK(found == rw.stats.page_end_units);

  // And multi-page straight-line code still runs correctly while shuffled.
  const RunOutcome base = run_image(clean, kIntervalInf);
  const RunOutcome got = run_image(rw.rsb, 1);
  CHECK(got.status == Status::Halted);
  CHECK(got.output == base.output);
  CHECK(base.status == Status::Halted);
}

TEST_CASE("instrumentation converges and reports iterations", "[rewriter]") {
  SECTION("no control transfers: fixpoint on the first pass") {
    const ProgramImage clean = assemble(R"(
      fn main {
        mov r0, 1
        out 88
        halt
      }
    )");
    const RewriteResult rw = instrument(clean);
    CHECK(rw.stats.iterations == 1);
    CHECK(rw.stats.cft_total == 0);
    CHECK(rw.stats.rsi_units == 0);
    CHECK(rw.rsb.main.bytes == clean.main.bytes);  // nothing to do
  }
  SECTION("small program with transfers converges past the first pass") {
    const ProgramImage clean = assemble(kCallProgram);
    const RewriteResult rw = instrument(clean);
    CHECK(rw.stats.iterations >= 1);
    CHECK(rw.stats.iterations <= 1000);
    CHECK(rw.stats.cft_total == 6);  // two calls, jne, calli, two rets
    CHECK(rw.stats.cft_replaced >= 3);  // at least calli and the rets
    CHECK(rw.stats.rsi_units ==
          rw.stats.cft_replaced + rw.stats.page_end_units);
  }
}

TEST_CASE("instrument_once reports the reclassified set", "[rewriter]") {
  const ProgramImage clean = assemble(R"(
    fn main {
      mov r0, 5
      out 97
      halt
    }
  )");
  const InstrumentOnceResult once = instrument_once(clean, {});
  CHECK(once.next_inter.empty());
  CHECK(once.candidate_size == clean.main.bytes.size());
  CHECK(once.candidate_pages == 1);
}

TEST_CASE("function reordering packs small functions page-aligned",
          "[rewriter]") {
  // Two ~1800-byte functions: separately misaligned, together one page.
  auto body = [](int n, int tag) {
    std::string s;
    for (int i = 0; i < n; ++i) s += "  mov r1, " + std::to_string(tag) + "\n";
    return s;
  };
  // 299 movs (6 bytes each) + ret = 1795 bytes per function.
  const std::string src = "fn main {\n  call f1\n  call f2\n  halt\n}\n"
                          "fn f1 {\n" + body(299, 1) + "  ret\n}\n" +
                          "fn f2 {\n" + body(299, 2) + "  ret\n}\n";
  const ProgramImage clean = assemble(src);
  const ProgramImage packed = reorder_functions(clean);
  packed.validate();

  const auto f1 = packed.find_function("f1");
  const auto f2 = packed.find_function("f2");
  REQUIRE(f1.has_value());
  REQUIRE(f2.has_value());
  const auto& m1 = packed.module_at(f1->lib_index).functions[f1->fn_index];
  const auto& m2 = packed.module_at(f2->lib_index).functions[f2->fn_index];
  const std::uint64_t ps = packed.geometry.page_size;
  // Both functions co-resident on one page.
  CHECK(m1.offset / ps == m2.offset / ps);
  CHECK((m1.offset + m1.length - 1) / ps == m1.offset / ps);
  CHECK((m2.offset + m2.length - 1) / ps == m2.offset / ps);
}

TEST_CASE("reordering is first-fit by decreasing size", "[rewriter]") {
  auto fn_of = [](const std::string& name, int movs) {
    std::string s = "fn " + name + " {\n";
    for (int i = 0; i < movs; ++i) s += "  mov r0, 1\n";
    return s + "  ret\n}\n";
  };
  // Sizes: a=2severely wide spread to force two bins.
  const std::string src =
      "fn main { halt }\n" + fn_of("a", 400) + fn_of("b", 300) +
      fn_of("c", 200) + fn_of("d", 120);
  // a=2401, b=1801, c=1201, d=721 bytes; capacity 4072:
  // a+b = 4202 > 4072 so bins are [a, c] (3602+...), then [b, d].
  const ProgramImage clean = assemble(src);
  const ProgramImage packed = reorder_functions(clean);
  const std::uint64_t ps = packed.geometry.page_size;
  auto page_of_fn = [&](const char* n) {
    const auto r = packed.find_function(n);
    REQUIRE(r.has_value());
    return packed.module_at(r->lib_index).functions[r->fn_index].offset / ps;
  };
  CHECK(page_of_fn("a") == page_of_fn("c"));
  CHECK(page_of_fn("b") == page_of_fn("d"));
  CHECK(page_of_fn("a") != page_of_fn("b"));
}

TEST_CASE("rearranging co-locates a near-miss jump with padding",
          "[rewriter]") {
  std::string src = "fn main {\n";
  for (int i = 0; i < 666; ++i) src += "  mov r0, 7\n";
  src += "  jrel Lskip\n";
  for (int i = 0; i < 20; ++i) src += "  mov r1, 9\n";
  src += "Lskip:\n  halt\n}\n";
  const ProgramImage clean = assemble(src);

  // In the clean image that jump crosses the first page boundary.
  bool crossed = false;
  for (const CftSite& s : classify_cft(clean))
    if (s.kind == CftKind::DirectJump && s.cls == CftClass::InterPage)
      crossed = true;
  REQUIRE(crossed);

  const ProgramImage moved = rearrange_instructions(clean);
  for (const CftSite& s : classify_cft(moved)) {
    if (s.kind == CftKind::DirectJump) {
      CHECK(s.cls == CftClass::IntraPage);
      REQUIRE(s.target.has_value());
      CHECK(*s.target > s.site);
    }
  }
  // Padding was inserted, and the program still runs identically.
  CHECK(moved.main.bytes.size() > clean.main.bytes.size());
  CHECK(run_image(moved, kIntervalInf).output ==
        run_image(clean, kIntervalInf).output);
}

TEST_CASE("address-of relocations follow their symbol", "[rewriter]") {
  const ProgramImage clean = assemble(kCallProgram);
  const RewriteResult rw = instrument(clean);
  REQUIRE(rw.rsb.main.relocs.size() == 1);
  const auto& re = rw.rsb.main.relocs[0];
  CHECK(re.symbol == "emit");
  const DecodeResult r =
      decode_at(std::span(rw.rsb.main.bytes), re.instr_offset);
  REQUIRE(r.ok());
  CHECK(r.instr->op == Opcode::MovRI);
  CHECK(r.instr->imm == rw.rsb.function_addr(*rw.rsb.find_function("emit")));
}

TEST_CASE("library units carry their library index and relative targets",
          "[rewriter]") {
  // `work` is deliberately bigger than a page so it cannot be packed next to
  // `leaf`; the call between them must cross pages and become a unit.
  std::string src = R"(
    .entry main
    fn main {
      call work
      halt
    }
    .lib helper pic {
      fn work {
)";
  for (int i = 0; i < 700; ++i) src += "        mov r3, 1\n";
  src += R"(
        call leaf
        out 76
        ret
      }
      fn leaf {
        out 108
        ret
      }
    }
  )";
  const ProgramImage clean = assemble(src);
  const RewriteResult rw = instrument(clean);

  bool saw_lib_unit = false;
  for (const RsiUnitRecord& u : rw.units) {
    if (u.lib_index == 1 && u.kind == CftKind::DirectCall) {
      saw_lib_unit = true;
      CHECK(rsi_flag_lib(u.flag) == 1);
      // Stored module-relative: far below the library's load base.
      CHECK(u.target_arg < rw.rsb.libs[0].base);
    }
  }
  CHECK(saw_lib_unit);

  const RunOutcome base = run_image(clean, kIntervalInf);
  const RunOutcome got = run_image(rw.rsb, 1);
  CHECK(base.status == Status::Halted);
  CHECK(got.status == Status::Halted);
  CHECK(got.output == base.output);
}

TEST_CASE("callback bodies move while their entry page stands still",
          "[rewriter]") {
  const ProgramImage clean = assemble(R"(
    .callback on_evt
    fn main {
      out 97
      out 98
      halt
    }
    fn on_evt {
      out 69
      ret
    }
  )");
  const RewriteResult rw = instrument(clean);
  REQUIRE(rw.rsb.rsb.callback_entry_page.has_value());
  REQUIRE(rw.rsb.callbacks.size() == 1);
  const std::uint64_t ps = rw.rsb.geometry.page_size;
  CHECK(rw.rsb.callbacks[0].entry / ps == *rw.rsb.rsb.callback_entry_page);
  CHECK(rw.stats.callback_units == 1);

  // Deliver mid-run under aggressive shuffling; the entry must stay valid.
  const RunOutcome base = run_image(clean, kIntervalInf, 5, {{1, 0}});
  const RunOutcome got = run_image(rw.rsb, 1, 9, {{1, 0}});
  CHECK(base.output == "aEb");
  CHECK(got.output == base.output);
  CHECK(got.status == Status::Halted);
}

TEST_CASE("extract_callbacks leaves bodies untouched", "[rewriter]") {
  const ProgramImage clean = assemble(R"(
    .callback cb
    fn main { halt }
    fn cb { ret }
  )");
  const ProgramImage out = extract_callbacks(clean);
  // Original code bytes are a prefix (bodies unchanged, page appended).
  REQUIRE(out.main.bytes.size() > clean.main.bytes.size());
  CHECK(std::equal(clean.main.bytes.begin(), clean.main.bytes.end(),
                   out.main.bytes.begin()));
  CHECK(out.rsb.callback_entry_page.has_value());
  const DecodeResult r = decode_at(std::span(out.main.bytes),
                                   out.callbacks[0].entry - out.main.base);
  REQUIRE(r.ok());
  CHECK(r.instr->op == Opcode::Rsi);
  CHECK(rsi_flag_kind(r.instr->rsi.flag) == CftKind::DirectJump);
}

TEST_CASE("rewriting is deterministic", "[rewriter]") {
  const ProgramImage clean = assemble(kCallProgram);
  const RewriteResult a = instrument(clean);
  const RewriteResult b = instrument(clean);
  CHECK(a.rsb.main.bytes == b.rsb.main.bytes);
  CHECK(a.stats.iterations == b.stats.iterations);
  CHECK(a.units.size() == b.units.size());
}

TEST_CASE("unit length is configurable and self-describing", "[rewriter]") {
  const ProgramImage clean = assemble(kCallProgram);
  RewriteOptions opts;
  opts.rsi_length = 32;
  const RewriteResult rw = instrument(clean, opts);
  for (const RsiUnitRecord& u : rw.units) CHECK(u.length == 32);
  const RunOutcome base = run_image(clean, kIntervalInf);
  const RunOutcome got = run_image(rw.rsb, 1);
  CHECK(got.output == base.output);
  CHECK(got.status == base.status);

  RewriteOptions bad;
  bad.rsi_length = 12;
  CHECK_THROWS_AS(instrument(clean, bad), RewriteError);
}
