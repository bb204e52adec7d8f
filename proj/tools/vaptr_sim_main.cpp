// vaptr-sim: command-line front end for the co-simulator.
//
//   gen      write a seeded corpus of toy-ISA programs to disk
//   rewrite  instrument one program and print the rewrite counters
//   run      execute a program original vs. instrumented-under-defense
//   attack   launch a simulated attack against one program
//   census   static gadget populations, original vs. instrumented
//   report   run a configured experiment and emit CSV/JSON reports
//
// Exit codes: 0 success; 2 configuration or input error; 3 a runtime
// property violation was detected (defense soundness or semantics).
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vaptr/experiments.hpp"

using namespace vaptr;
namespace fs = std::filesystem;

namespace {

std::uint64_t parse_interval(const std::string& s) {
  if (s == "inf") return kIntervalInf;
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw ConfigError("--interval must be a tick count or 'inf', got '" + s +
                      "'");
  return v;
}

ProgramImage load_asm(const std::string& path) {
  return assemble(read_text_file(path));
}

Json delivery_json(const std::vector<CallbackDelivery>& ds) {
  Json arr = Json::array();
  for (const CallbackDelivery& d : ds) {
    Json e;
    e["after_output"] = d.after_output;
    e["id"] = d.id;
    arr.push_back(std::move(e));
  }
  return arr;
}

std::vector<CallbackDelivery> deliveries_from_json(const Json& arr) {
  std::vector<CallbackDelivery> out;
  if (!arr.is_array()) throw ConfigError("deliveries must be an array");
  for (const Json& e : arr) {
    if (!e.is_object() || !e.contains("after_output") || !e.contains("id"))
      throw ConfigError("each delivery needs 'after_output' and 'id'");
    out.push_back({e.at("after_output").get<std::uint64_t>(),
                   e.at("id").get<int>()});
  }
  return out;
}

// Looks for <asm-file's dir>/manifest.json and returns the recorded callback
// deliveries for this program, if any (the `gen` command writes one).
std::vector<CallbackDelivery> sidecar_deliveries(const std::string& asm_path) {
  const fs::path manifest = fs::path(asm_path).parent_path() / "manifest.json";
  std::error_code ec;
  if (!fs::exists(manifest, ec)) return {};
  const Json m = Json::parse(read_text_file(manifest), nullptr, false);
  if (m.is_discarded() || !m.is_object() || !m.contains("programs")) return {};
  const std::string stem = fs::path(asm_path).stem().string();
  for (const Json& p : m.at("programs")) {
    if (p.value("name", "") == stem && p.contains("deliveries"))
      return deliveries_from_json(p.at("deliveries"));
  }
  return {};
}

// ------------------------------------------------------------------- gen

struct GenOpts {
  std::string config;
  std::string out = "corpus";
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::uint32_t count = 0;  // 0 = keep the config's n_programs
};

int cmd_gen(const GenOpts& o) {
  CorpusParams params;
  if (!o.config.empty())
    params = parse_experiment_config(read_text_file(o.config)).corpus;
  if (o.seed_set) params.seed = o.seed;
  if (o.count) params.n_programs = o.count;

  const std::vector<CorpusProgram> corpus = gen_corpus(params);
  fs::create_directories(o.out);

  Json manifest;
  manifest["seed"] = params.seed;
  Json programs = Json::array();
  for (const CorpusProgram& p : corpus) {
    const fs::path path = fs::path(o.out) / (p.name + ".asm");
    write_text_file(path, p.source);
    Json e;
    e["name"] = p.name;
    e["file"] = path.filename().string();
    e["functions"] = p.function_count;
    e["callbacks"] = p.callback_count;
    e["loops"] = p.loop_count;
    e["deliveries"] = delivery_json(p.deliveries);
    programs.push_back(std::move(e));
  }
  manifest["programs"] = std::move(programs);
  write_text_file(fs::path(o.out) / "manifest.json",
                  manifest.dump(2) + "\n");

  std::cout << "wrote " << corpus.size() << " programs and manifest.json to "
            << o.out << "\n";
  return 0;
}

// --------------------------------------------------------------- rewrite

struct RewriteOpts {
  std::string asm_path;
  std::string out;
  bool no_reorder = false;
  bool no_rearrange = false;
};

Json rewrite_stats_json(const RewriteStats& s) {
  Json j;
  j["iterations"] = static_cast<std::uint64_t>(s.iterations);
  j["cft_total"] = s.cft_total;
  j["cft_replaced"] = s.cft_replaced;
  j["page_end_units"] = s.page_end_units;
  j["rsi_units"] = s.rsi_units;
  j["callback_units"] = s.callback_units;
  j["size_before"] = s.size_before;
  j["size_after"] = s.size_after;
  j["pages_before"] = s.pages_before;
  j["pages_after"] = s.pages_after;
  j["padding_bytes"] = s.padding_bytes;
  j["rearrange_padding"] = s.rearrange_padding;
  j["superset_fallback"] = s.superset_fallback;
  return j;
}

int cmd_rewrite(const RewriteOpts& o) {
  const ProgramImage clean = load_asm(o.asm_path);
  RewriteOptions opts;
  opts.enable_reorder = !o.no_reorder;
  opts.enable_rearrange = !o.no_rearrange;
  const RewriteResult r = instrument(clean, opts);
  const Json j = rewrite_stats_json(r.stats);
  std::cout << j.dump(2) << "\n";
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    write_text_file(fs::path(o.out) / "rewrite_stats.json", j.dump(2) + "\n");
  }
  return 0;
}

// ------------------------------------------------------------------- run

struct RunOpts {
  std::string asm_path;
  std::string out;
  std::string interval = "100";
  std::uint64_t seed = 0;
  std::uint64_t fuel = 50'000'000;
};

Json output_json(const std::vector<std::uint8_t>& bytes) {
  Json arr = Json::array();
  for (std::uint8_t b : bytes) arr.push_back(static_cast<std::uint64_t>(b));
  return arr;
}

int cmd_run(const RunOpts& o) {
  const ProgramImage clean = load_asm(o.asm_path);
  const std::vector<CallbackDelivery> deliveries =
      sidecar_deliveries(o.asm_path);
  RunOptions ropts;
  ropts.fuel = o.fuel;
  ropts.deliveries = deliveries;

  VaptrConfig inert;
  auto v0 = vaptr_init(clean, inert);
  MachineState m0 = init_machine(clean);
  const RunResult r0 = run(*v0, m0, ropts);

  const ProgramImage rsb = instrument(clean).rsb;
  VaptrConfig live;
  live.interval_ticks = parse_interval(o.interval);
  live.seed = o.seed;
  auto v1 = vaptr_init(rsb, live);
  MachineState m1 = init_machine(rsb);
  const RunResult r1 = run(*v1, m1, ropts);

  Json j;
  j["program"] = fs::path(o.asm_path).stem().string();
  j["interval"] = o.interval;
  j["seed"] = o.seed;
  Json orig;
  orig["status"] = status_name(r0.status);
  orig["steps"] = r0.steps;
  orig["output"] = output_json(m0.output);
  j["original"] = std::move(orig);
  Json inst;
  inst["status"] = status_name(r1.status);
  inst["steps"] = r1.steps;
  inst["shuffles"] = v1->shuffle_count;
  inst["rsi_executed"] = r1.rsi_total;
  inst["output"] = output_json(m1.output);
  j["instrumented"] = std::move(inst);
  const bool match = r0.status == r1.status && m0.output == m1.output;
  j["outputs_match"] = match;
  std::cout << j.dump(2) << "\n";
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    write_text_file(fs::path(o.out) / "run.json", j.dump(2) + "\n");
  }
  if (!match)
    throw PropertyViolation(
        "instrumented run under the defense diverged from the original");
  return 0;
}

// ---------------------------------------------------------------- attack

struct AttackOpts {
  std::string asm_path;
  std::string out;
  std::string interval = "100";
  std::uint64_t seed = 0;
  bool blind = false;
  bool original = false;
  std::uint32_t gadgets = 15;
};

Json attack_report_json(const AttackReport& rep) {
  Json j;
  j["outcome"] = attack_outcome_name(rep.outcome);
  j["pages_disclosed"] = rep.pages_disclosed;
  j["gadgets_found"] = rep.gadgets_found;
  j["payload_size"] = static_cast<std::uint64_t>(rep.payload.size());
  j["gadgets_executed"] = rep.gadgets_executed;
  j["dead_ends"] = rep.dead_ends;
  j["shuffles_during"] = rep.shuffles_during;
  j["discovery_ticks"] = rep.discovery_ticks;
  j["compile_ticks"] = rep.compile_ticks;
  return j;
}

int cmd_attack(const AttackOpts& o) {
  const ProgramImage clean = load_asm(o.asm_path);
  const ProgramImage image = o.original ? clean : instrument(clean).rsb;

  VaptrConfig vc;
  vc.interval_ticks = parse_interval(o.interval);
  vc.seed = o.seed;
  auto v = vaptr_init(image, vc);
  MachineState m = init_machine(image);

  AttackConfig ac;
  ac.entry_leak = image.entry;
  ac.needed_gadgets = o.gadgets;
  const AttackReport rep =
      o.blind ? blind_probe_attack(m, *v, ac) : jitrop_attack(m, *v, ac);
  edetail::check_success_consistency(*v, rep, vc.interval_ticks,
                                     fs::path(o.asm_path).stem().string());

  Json j;
  j["program"] = fs::path(o.asm_path).stem().string();
  j["attack"] = o.blind ? "blind_probe" : "jitrop";
  j["binary"] = o.original ? "original" : "instrumented";
  j["interval"] = o.interval;
  j["seed"] = o.seed;
  j["report"] = attack_report_json(rep);
  std::cout << j.dump(2) << "\n";
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    write_text_file(fs::path(o.out) / "attack.json", j.dump(2) + "\n");
  }
  return 0;
}

// ---------------------------------------------------------------- census

struct CensusOpts {
  std::string asm_path;
  std::string out;
  std::uint32_t k = 5;
};

int cmd_census(const CensusOpts& o) {
  if (o.k < 1) throw ConfigError("--k must be at least 1");
  const ProgramImage clean = load_asm(o.asm_path);
  const GadgetCensus co = census_gadgets(clean, o.k);
  const ProgramImage rsb = instrument(clean).rsb;
  const GadgetCensus ci = census_gadgets(rsb, o.k);

  Json j;
  j["program"] = fs::path(o.asm_path).stem().string();
  j["k"] = o.k;
  Json orig;
  orig["intended"] = co.intended;
  orig["unintended"] = co.unintended;
  orig["total"] = co.total;
  j["original"] = std::move(orig);
  Json inst;
  inst["intended"] = ci.intended;
  inst["unintended"] = ci.unintended;
  inst["total"] = ci.total;
  j["instrumented"] = std::move(inst);
  const double reduction =
      co.total == 0 ? 0.0
                    : (static_cast<double>(co.total) -
                       static_cast<double>(ci.total)) *
                          100.0 / static_cast<double>(co.total);
  j["total_reduction_pct"] = reduction;
  std::cout << j.dump(2) << "\n";
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    write_text_file(fs::path(o.out) / "census.json", j.dump(2) + "\n");
  }
  return 0;
}

// ---------------------------------------------------------------- report

struct ReportOpts {
  std::string config;
  std::string out;
  std::string interval;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

int cmd_report(const ReportOpts& o) {
  ExperimentConfig cfg = parse_experiment_config(read_text_file(o.config));
  if (!o.out.empty()) cfg.output_dir = o.out;
  if (o.seed_set) {
    cfg.corpus.seed = o.seed;
    cfg.vaptr.seed = o.seed;
  }
  if (!o.interval.empty())
    cfg.vaptr.interval_ticks = parse_interval(o.interval);

  const ExperimentOutput out = run_experiment(cfg);
  for (const auto& f : out.files) std::cout << "wrote " << f.string() << "\n";
  std::cout << out.report.at("summary").dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "vaptr-sim: co-simulator of a page-shuffling runtime defense, its "
      "binary rewriter, and code-reuse attackers"};
  app.require_subcommand(1);

  GenOpts gen;
  CLI::App* sgen = app.add_subcommand("gen", "generate a seeded program corpus");
  sgen->add_option("--config", gen.config, "experiment config JSON (corpus section)");
  sgen->add_option("--out", gen.out, "output directory");
  sgen->add_option("--seed", gen.seed, "corpus seed override")
      ->each([&](const std::string&) { gen.seed_set = true; });
  sgen->add_option("--count", gen.count, "number of programs override");

  RewriteOpts rw;
  CLI::App* srw = app.add_subcommand("rewrite", "instrument one program");
  srw->add_option("--asm", rw.asm_path, "toy-ISA source file")->required();
  srw->add_option("--out", rw.out, "directory for rewrite_stats.json");
  srw->add_flag("--no-reorder", rw.no_reorder, "disable function reordering");
  srw->add_flag("--no-rearrange", rw.no_rearrange,
                "disable instruction rearranging");

  RunOpts rn;
  CLI::App* srn = app.add_subcommand(
      "run", "run original vs. instrumented-under-defense and compare");
  srn->add_option("--asm", rn.asm_path, "toy-ISA source file")->required();
  srn->add_option("--interval", rn.interval, "shuffle interval (ticks or 'inf')");
  srn->add_option("--seed", rn.seed, "defense shuffle seed");
  srn->add_option("--fuel", rn.fuel, "max interpreter steps");
  srn->add_option("--out", rn.out, "directory for run.json");

  AttackOpts at;
  CLI::App* sat = app.add_subcommand("attack", "simulate an attack campaign");
  sat->add_option("--asm", at.asm_path, "toy-ISA source file")->required();
  sat->add_option("--interval", at.interval, "shuffle interval (ticks or 'inf')");
  sat->add_option("--seed", at.seed, "defense shuffle seed");
  sat->add_flag("--blind", at.blind, "blind probing instead of jitrop");
  sat->add_flag("--original", at.original,
                "attack the original binary instead of the instrumented one");
  sat->add_option("--gadgets", at.gadgets, "payload gadget requirement");
  sat->add_option("--out", at.out, "directory for attack.json");

  CensusOpts cs;
  CLI::App* scs = app.add_subcommand(
      "census", "gadget census, original vs. instrumented");
  scs->add_option("--asm", cs.asm_path, "toy-ISA source file")->required();
  scs->add_option("--k", cs.k, "max gadget length in instructions");
  scs->add_option("--out", cs.out, "directory for census.json");

  ReportOpts rp;
  CLI::App* srp = app.add_subcommand("report", "run a configured experiment");
  srp->add_option("--config", rp.config, "experiment config JSON")->required();
  srp->add_option("--out", rp.out, "output directory override");
  srp->add_option("--seed", rp.seed, "corpus + defense seed override")
      ->each([&](const std::string&) { rp.seed_set = true; });
  srp->add_option("--interval", rp.interval,
                  "defense interval override (ticks or 'inf')");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // bad flags are configuration errors
  }

  try {
    if (app.got_subcommand(sgen)) return cmd_gen(gen);
    if (app.got_subcommand(srw)) return cmd_rewrite(rw);
    if (app.got_subcommand(srn)) return cmd_run(rn);
    if (app.got_subcommand(sat)) return cmd_attack(at);
    if (app.got_subcommand(scs)) return cmd_census(cs);
    if (app.got_subcommand(srp)) return cmd_report(rp);
  } catch (const PropertyViolation& e) {
    std::cerr << "property violation: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const AsmError& e) {
    std::cerr << "asm error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
