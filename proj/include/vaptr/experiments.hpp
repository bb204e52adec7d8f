// Experiment orchestration: seeded corpus + rewriter + runtime + attackers
// wired into five reproducible report generators (instrumentation statistics,
// attack evaluation, gadget census, runtime statistics, optimization
// evaluation). Configs load from strictly-validated JSON; reports land as
// CSV + JSON (+ optional gnuplot TSV) and rerun byte-identically per seed.
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vaptr/assembler.hpp"
#include "vaptr/attacker.hpp"
#include "vaptr/corpus.hpp"
#include "vaptr/io.hpp"
#include "vaptr/machine.hpp"
#include "vaptr/rewriter.hpp"
#include "vaptr/vaptr.hpp"

namespace vaptr {

using Json = nlohmann::ordered_json;

// Invalid or unparsable configuration (CLI exit code 2).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class ExperimentKind : std::uint8_t {
  InstrumentStats,
  AttackEval,
  GadgetCensus,
  RuntimeStats,
  OptimizationEval,
};

inline const char* experiment_kind_name(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::InstrumentStats: return "instrument_stats";
    case ExperimentKind::AttackEval: return "attack_eval";
    case ExperimentKind::GadgetCensus: return "gadget_census";
    case ExperimentKind::RuntimeStats: return "runtime_stats";
    case ExperimentKind::OptimizationEval: return "optimization_eval";
  }
  return "?";
}

inline ExperimentKind parse_experiment_kind(const std::string& s) {
  if (s == "instrument_stats") return ExperimentKind::InstrumentStats;
  if (s == "attack_eval") return ExperimentKind::AttackEval;
  if (s == "gadget_census") return ExperimentKind::GadgetCensus;
  if (s == "runtime_stats") return ExperimentKind::RuntimeStats;
  if (s == "optimization_eval") return ExperimentKind::OptimizationEval;
  throw ConfigError("unknown experiment '" + s +
                    "' (expected instrument_stats, attack_eval, "
                    "gadget_census, runtime_stats or optimization_eval)");
}

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::InstrumentStats;
  // Program source: generated corpus (default) or explicit .asm files.
  CorpusParams corpus;
  std::vector<std::string> asm_files;
  VaptrConfig vaptr;
  AttackConfig attack;
  // Shuffle intervals swept by attack_eval (0 = never shuffle).
  std::vector<std::uint64_t> intervals{kIntervalInf, 100, 10, 1};
  std::string output_dir = "out";
  bool emit_tsv = false;
  std::uint32_t census_k = 5;  // max gadget length for census experiments
};

// ------------------------------------------------------- JSON validation

namespace edetail {

[[noreturn]] inline void bad(const std::string& ctx, const std::string& msg) {
  throw ConfigError(ctx + ": " + msg);
}

inline void reject_unknown(const Json& obj, const std::string& ctx,
                           std::initializer_list<const char*> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* a : allowed)
      if (it.key() == a) { known = true; break; }
    if (!known) bad(ctx, "unknown key '" + it.key() + "'");
  }
}

inline const Json& expect_object(const Json& j, const std::string& ctx) {
  if (!j.is_object()) bad(ctx, "must be an object");
  return j;
}

inline std::uint64_t get_u64(const Json& obj, const char* key,
                             std::uint64_t dflt, const std::string& ctx) {
  if (!obj.contains(key)) return dflt;
  const Json& v = obj.at(key);
  if (!v.is_number_unsigned())
    bad(ctx, std::string("'") + key + "' must be a non-negative integer");
  return v.get<std::uint64_t>();
}

inline std::uint32_t get_u32(const Json& obj, const char* key,
                             std::uint32_t dflt, const std::string& ctx) {
  const std::uint64_t v = get_u64(obj, key, dflt, ctx);
  if (v > 0xffffffffULL)
    bad(ctx, std::string("'") + key + "' exceeds 32 bits");
  return static_cast<std::uint32_t>(v);
}

inline double get_fraction(const Json& obj, const char* key, double dflt,
                           const std::string& ctx) {
  if (!obj.contains(key)) return dflt;
  const Json& v = obj.at(key);
  if (!v.is_number())
    bad(ctx, std::string("'") + key + "' must be a number");
  const double d = v.get<double>();
  if (d < 0.0 || d > 1.0)
    bad(ctx, std::string("'") + key + "' must lie in [0, 1]");
  return d;
}

inline bool get_bool(const Json& obj, const char* key, bool dflt,
                     const std::string& ctx) {
  if (!obj.contains(key)) return dflt;
  const Json& v = obj.at(key);
  if (!v.is_boolean())
    bad(ctx, std::string("'") + key + "' must be a boolean");
  return v.get<bool>();
}

inline std::string get_string(const Json& obj, const char* key,
                              std::string dflt, const std::string& ctx) {
  if (!obj.contains(key)) return dflt;
  const Json& v = obj.at(key);
  if (!v.is_string())
    bad(ctx, std::string("'") + key + "' must be a string");
  return v.get<std::string>();
}

inline CorpusRange get_range(const Json& obj, const char* key,
                             CorpusRange dflt, const std::string& ctx) {
  if (!obj.contains(key)) return dflt;
  const Json& v = obj.at(key);
  if (!v.is_array() || v.size() != 2 || !v[0].is_number_unsigned() ||
      !v[1].is_number_unsigned())
    bad(ctx, std::string("'") + key +
                 "' must be a two-element array [min, max]");
  return {v[0].get<std::uint32_t>(), v[1].get<std::uint32_t>()};
}

// A tick count that may be spelled "inf" (never shuffle).
inline std::uint64_t interval_value(const Json& v, const std::string& ctx) {
  if (v.is_string()) {
    if (v.get<std::string>() == "inf") return kIntervalInf;
    bad(ctx, "interval string must be \"inf\"");
  }
  if (!v.is_number_unsigned())
    bad(ctx, "interval must be a non-negative integer or \"inf\"");
  return v.get<std::uint64_t>();
}

inline CorpusParams parse_corpus(const Json& j, const std::string& ctx) {
  expect_object(j, ctx);
  reject_unknown(j, ctx,
                 {"n_programs", "functions_per_program", "function_size",
                  "cft_density", "loop_depth", "indirect_fraction",
                  "callback_count", "seed"});
  CorpusParams p;
  p.n_programs = get_u32(j, "n_programs", p.n_programs, ctx);
  p.functions_per_program =
      get_range(j, "functions_per_program", p.functions_per_program, ctx);
  p.function_size = get_range(j, "function_size", p.function_size, ctx);
  p.cft_density = get_fraction(j, "cft_density", p.cft_density, ctx);
  p.loop_depth = get_range(j, "loop_depth", p.loop_depth, ctx);
  p.indirect_fraction =
      get_fraction(j, "indirect_fraction", p.indirect_fraction, ctx);
  p.callback_count = get_range(j, "callback_count", p.callback_count, ctx);
  p.seed = get_u64(j, "seed", p.seed, ctx);
  try {
    validate_corpus_params(p);
  } catch (const std::invalid_argument& e) {
    bad(ctx, e.what());
  }
  return p;
}

inline VaptrConfig parse_vaptr(const Json& j, const std::string& ctx) {
  expect_object(j, ctx);
  reject_unknown(j, ctx, {"interval_ticks", "seed", "stub_page_policy"});
  VaptrConfig v;
  if (j.contains("interval_ticks"))
    v.interval_ticks = interval_value(j.at("interval_ticks"), ctx);
  v.seed = get_u64(j, "seed", v.seed, ctx);
  v.stub_page_policy =
      get_string(j, "stub_page_policy", v.stub_page_policy, ctx);
  if (v.stub_page_policy != "whitelist")
    bad(ctx, "stub_page_policy must be \"whitelist\"");
  return v;
}

inline AttackConfig parse_attack(const Json& j, const std::string& ctx) {
  expect_object(j, ctx);
  reject_unknown(j, ctx,
                 {"needed_gadgets", "needed_intended", "t1_per_page",
                  "t2_compile", "k", "ticks_per_gadget", "probe_cost",
                  "probe_fuel", "probe_budget"});
  AttackConfig a;
  a.needed_gadgets = get_u32(j, "needed_gadgets", a.needed_gadgets, ctx);
  a.needed_intended = get_u32(j, "needed_intended", a.needed_intended, ctx);
  a.t1_per_page = get_u64(j, "t1_per_page", a.t1_per_page, ctx);
  a.t2_compile = get_u64(j, "t2_compile", a.t2_compile, ctx);
  a.k = get_u32(j, "k", a.k, ctx);
  a.ticks_per_gadget = get_u64(j, "ticks_per_gadget", a.ticks_per_gadget, ctx);
  a.probe_cost = get_u64(j, "probe_cost", a.probe_cost, ctx);
  a.probe_fuel = get_u64(j, "probe_fuel", a.probe_fuel, ctx);
  a.probe_budget = get_u64(j, "probe_budget", a.probe_budget, ctx);
  if (a.needed_gadgets < 1) bad(ctx, "'needed_gadgets' must be at least 1");
  if (a.needed_intended > a.needed_gadgets)
    bad(ctx, "'needed_intended' cannot exceed 'needed_gadgets'");
  if (a.k < 1) bad(ctx, "'k' must be at least 1");
  if (a.probe_budget < 1) bad(ctx, "'probe_budget' must be at least 1");
  return a;
}

}  // namespace edetail

inline ExperimentConfig parse_experiment_config_json(const Json& j) {
  edetail::expect_object(j, "config");
  edetail::reject_unknown(j, "config",
                          {"experiment", "corpus", "asm_files", "vaptr",
                           "attack", "intervals", "output_dir", "emit_tsv",
                           "census_k"});
  if (!j.contains("experiment") || !j.at("experiment").is_string())
    throw ConfigError("config: 'experiment' (string) is required");

  ExperimentConfig cfg;
  cfg.kind = parse_experiment_kind(j.at("experiment").get<std::string>());

  if (j.contains("corpus") && j.contains("asm_files"))
    throw ConfigError(
        "config: give either 'corpus' parameters or an 'asm_files' list, "
        "not both");
  if (j.contains("corpus"))
    cfg.corpus = edetail::parse_corpus(j.at("corpus"), "config.corpus");
  if (j.contains("asm_files")) {
    const Json& files = j.at("asm_files");
    if (!files.is_array() || files.empty())
      throw ConfigError("config: 'asm_files' must be a non-empty array");
    for (const Json& f : files) {
      if (!f.is_string())
        throw ConfigError("config: 'asm_files' entries must be strings");
      cfg.asm_files.push_back(f.get<std::string>());
    }
  }
  if (j.contains("vaptr"))
    cfg.vaptr = edetail::parse_vaptr(j.at("vaptr"), "config.vaptr");
  if (j.contains("attack"))
    cfg.attack = edetail::parse_attack(j.at("attack"), "config.attack");
  if (j.contains("intervals")) {
    const Json& iv = j.at("intervals");
    if (!iv.is_array() || iv.empty())
      throw ConfigError("config: 'intervals' must be a non-empty array");
    cfg.intervals.clear();
    for (const Json& v : iv)
      cfg.intervals.push_back(edetail::interval_value(v, "config.intervals"));
  }
  cfg.output_dir =
      edetail::get_string(j, "output_dir", cfg.output_dir, "config");
  cfg.emit_tsv = edetail::get_bool(j, "emit_tsv", cfg.emit_tsv, "config");
  cfg.census_k = edetail::get_u32(j, "census_k", cfg.census_k, "config");
  if (cfg.census_k < 1)
    throw ConfigError("config: 'census_k' must be at least 1");
  return cfg;
}

inline ExperimentConfig parse_experiment_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("invalid JSON: ") + e.what());
  }
  return parse_experiment_config_json(j);
}

// Canonical echo of a config (also the documented schema's shape). Feeding
// it back through parse_experiment_config reproduces the same config.
inline Json experiment_config_to_json(const ExperimentConfig& cfg) {
  Json j;
  j["experiment"] = experiment_kind_name(cfg.kind);
  if (cfg.asm_files.empty()) {
    Json c;
    c["n_programs"] = cfg.corpus.n_programs;
    c["functions_per_program"] = {cfg.corpus.functions_per_program.min,
                                  cfg.corpus.functions_per_program.max};
    c["function_size"] = {cfg.corpus.function_size.min,
                          cfg.corpus.function_size.max};
    c["cft_density"] = cfg.corpus.cft_density;
    c["loop_depth"] = {cfg.corpus.loop_depth.min, cfg.corpus.loop_depth.max};
    c["indirect_fraction"] = cfg.corpus.indirect_fraction;
    c["callback_count"] = {cfg.corpus.callback_count.min,
                           cfg.corpus.callback_count.max};
    c["seed"] = cfg.corpus.seed;
    j["corpus"] = std::move(c);
  } else {
    j["asm_files"] = cfg.asm_files;
  }
  Json v;
  if (cfg.vaptr.interval_ticks == kIntervalInf) v["interval_ticks"] = "inf";
  else v["interval_ticks"] = cfg.vaptr.interval_ticks;
  v["seed"] = cfg.vaptr.seed;
  v["stub_page_policy"] = cfg.vaptr.stub_page_policy;
  j["vaptr"] = std::move(v);
  Json a;
  a["needed_gadgets"] = cfg.attack.needed_gadgets;
  a["needed_intended"] = cfg.attack.needed_intended;
  a["t1_per_page"] = cfg.attack.t1_per_page;
  a["t2_compile"] = cfg.attack.t2_compile;
  a["k"] = cfg.attack.k;
  a["ticks_per_gadget"] = cfg.attack.ticks_per_gadget;
  a["probe_cost"] = cfg.attack.probe_cost;
  a["probe_fuel"] = cfg.attack.probe_fuel;
  a["probe_budget"] = cfg.attack.probe_budget;
  j["attack"] = std::move(a);
  Json iv = Json::array();
  for (std::uint64_t t : cfg.intervals) {
    if (t == kIntervalInf) iv.push_back("inf");
    else iv.push_back(t);
  }
  j["intervals"] = std::move(iv);
  j["output_dir"] = cfg.output_dir;
  j["emit_tsv"] = cfg.emit_tsv;
  j["census_k"] = cfg.census_k;
  return j;
}

// ------------------------------------------------------- program loading

struct ExperimentProgram {
  std::string name;
  ProgramImage image;
  std::vector<CallbackDelivery> deliveries;
  bool has_loops = false;
};

// Loop detection for user-supplied programs: any backward direct transfer.
inline bool image_has_backward_direct(const ProgramImage& img) {
  for (const CftSite& s : classify_cft(img))
    if (s.target && *s.target <= s.site) return true;
  return false;
}

inline std::vector<ExperimentProgram> load_programs(
    const ExperimentConfig& cfg) {
  std::vector<ExperimentProgram> out;
  if (!cfg.asm_files.empty()) {
    for (const std::string& path : cfg.asm_files) {
      std::string src;
      try {
        src = read_text_file(path);
      } catch (const IoError& e) {
        throw ConfigError(e.what());
      }
      ExperimentProgram p;
      p.name = std::filesystem::path(path).stem().string();
      p.image = assemble(src);
      p.has_loops = image_has_backward_direct(p.image);
      out.push_back(std::move(p));
    }
    return out;
  }
  std::vector<CorpusProgram> corpus = gen_corpus(cfg.corpus);
  out.reserve(corpus.size());
  for (CorpusProgram& c : corpus)
    out.push_back({std::move(c.name), std::move(c.image),
                   std::move(c.deliveries), c.has_loops});
  return out;
}

// ------------------------------------------------------- report assembly

struct ExperimentOutput {
  Table table;
  Json report;
  std::vector<std::filesystem::path> files;
};

namespace edetail {

inline std::string interval_label(std::uint64_t t) {
  return t == kIntervalInf ? "inf" : std::to_string(t);
}

// One source of truth per row: typed JSON values render to table cells.
inline std::string cell_of(const Json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_unsigned()) return std::to_string(v.get<std::uint64_t>());
  if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
  if (v.is_number_float()) return format_fixed(v.get<double>(), 2);
  throw IoError("unsupported cell type in report row");
}

inline void table_from_rows(Table& t, const Json& rows) {
  for (const Json& r : rows) {
    std::vector<std::string> cells;
    cells.reserve(t.columns.size());
    for (const std::string& c : t.columns) cells.push_back(cell_of(r.at(c)));
    t.add_row(std::move(cells));
  }
}

struct Built {
  std::vector<std::string> columns;
  Json rows = Json::array();
  Json summary = Json::object();
};

inline double pct_drop(std::uint64_t before, std::uint64_t after) {
  if (before == 0) return 0.0;
  return (static_cast<double>(before) - static_cast<double>(after)) * 100.0 /
         static_cast<double>(before);
}

// ---- instrumentation statistics (per-program rewrite counters) ----------

inline Built build_instrument_stats(const ExperimentConfig&,
                                    const std::vector<ExperimentProgram>& ps) {
  Built b;
  b.columns = {"program",      "size_before",  "size_after",
               "pages_before", "pages_after",  "cft_total",
               "cft_replaced", "page_end_units", "rsi_units",
               "callback_units", "padding_bytes", "iter_count"};
  std::uint64_t iter_sum = 0, iter_max = 0;
  double growth_sum = 0.0;
  for (const ExperimentProgram& p : ps) {
    const RewriteResult r = instrument(p.image);
    const RewriteStats& s = r.stats;
    Json row;
    row["program"] = p.name;
    row["size_before"] = s.size_before;
    row["size_after"] = s.size_after;
    row["pages_before"] = s.pages_before;
    row["pages_after"] = s.pages_after;
    row["cft_total"] = s.cft_total;
    row["cft_replaced"] = s.cft_replaced;
    row["page_end_units"] = s.page_end_units;
    row["rsi_units"] = s.rsi_units;
    row["callback_units"] = s.callback_units;
    row["padding_bytes"] = s.padding_bytes;
    row["iter_count"] = static_cast<std::uint64_t>(s.iterations);
    b.rows.push_back(std::move(row));
    iter_sum += s.iterations;
    iter_max = std::max<std::uint64_t>(iter_max, s.iterations);
    if (s.size_before)
      growth_sum += (static_cast<double>(s.size_after) -
                     static_cast<double>(s.size_before)) *
                    100.0 / static_cast<double>(s.size_before);
  }
  const double n = ps.empty() ? 1.0 : static_cast<double>(ps.size());
  b.summary["programs"] = ps.size();
  b.summary["mean_iterations"] = static_cast<double>(iter_sum) / n;
  b.summary["max_iterations"] = iter_max;
  b.summary["mean_size_growth_pct"] = growth_sum / n;
  return b;
}

// ---- attack evaluation (defense races two attackers) ---------------------

inline void check_success_consistency(const VaptrState& v,
                                      const AttackReport& rep,
                                      std::uint64_t interval,
                                      const std::string& where) {
  if (rep.outcome != AttackOutcome::Success) return;
  if (interval == kIntervalInf) return;
  for (Addr a : rep.payload) {
    const auto flat = v.pages.flat_of(a / v.geom.page_size);
    if (!flat || !v.whitelist[*flat])
      throw PropertyViolation(
          "attack success under a live shuffle with a non-whitelisted "
          "payload page (" + where + ")");
  }
}

inline Built build_attack_eval(const ExperimentConfig& cfg,
                               const std::vector<ExperimentProgram>& ps) {
  Built b;
  b.columns = {"program",        "attack",        "binary",
               "interval",       "outcome",       "pages_disclosed",
               "gadgets_found",  "payload_size",  "gadgets_executed",
               "dead_ends",      "shuffles_during", "discovery_ticks",
               "compile_ticks"};
  std::uint64_t baseline_success = 0, baseline_rows = 0;
  std::uint64_t defended_rows = 0, defended_one_page = 0,
                defended_zero_exec = 0;

  const auto attack_row = [&](const ExperimentProgram& p, bool blind,
                              const char* binary, const ProgramImage& img,
                              std::uint64_t interval) {
    VaptrConfig vc = cfg.vaptr;
    vc.interval_ticks = interval;
    auto v = vaptr_init(img, vc);
    MachineState m = init_machine(img);
    AttackConfig ac = cfg.attack;
    ac.entry_leak = img.entry;
    const AttackReport rep =
        blind ? blind_probe_attack(m, *v, ac) : jitrop_attack(m, *v, ac);
    check_success_consistency(*v, rep, interval,
                              p.name + "/" + (blind ? "blind_probe" : "jitrop"));
    Json row;
    row["program"] = p.name;
    row["attack"] = blind ? "blind_probe" : "jitrop";
    row["binary"] = binary;
    row["interval"] = interval_label(interval);
    row["outcome"] = attack_outcome_name(rep.outcome);
    row["pages_disclosed"] = rep.pages_disclosed;
    row["gadgets_found"] = rep.gadgets_found;
    row["payload_size"] = static_cast<std::uint64_t>(rep.payload.size());
    row["gadgets_executed"] = rep.gadgets_executed;
    row["dead_ends"] = rep.dead_ends;
    row["shuffles_during"] = rep.shuffles_during;
    row["discovery_ticks"] = rep.discovery_ticks;
    row["compile_ticks"] = rep.compile_ticks;
    b.rows.push_back(std::move(row));

    const bool defended =
        std::string(binary) == "instrumented" && interval != kIntervalInf;
    if (defended) {
      ++defended_rows;
      if (rep.pages_disclosed == 1) ++defended_one_page;
      if (rep.gadgets_executed == 0) ++defended_zero_exec;
    } else if (std::string(binary) == "original" && !blind) {
      ++baseline_rows;
      if (rep.outcome == AttackOutcome::Success) ++baseline_success;
    }
  };

  for (const ExperimentProgram& p : ps) {
    const ProgramImage rsb = instrument(p.image).rsb;
    for (const bool blind : {false, true}) {
      attack_row(p, blind, "original", p.image, kIntervalInf);
      for (const std::uint64_t interval : cfg.intervals)
        attack_row(p, blind, "instrumented", rsb, interval);
    }
  }
  b.summary["programs"] = ps.size();
  b.summary["baseline_jitrop_rows"] = baseline_rows;
  b.summary["baseline_jitrop_success"] = baseline_success;
  b.summary["defended_rows"] = defended_rows;
  b.summary["defended_one_page_rows"] = defended_one_page;
  b.summary["defended_zero_exec_rows"] = defended_zero_exec;
  return b;
}

// ---- gadget census (static populations, original vs instrumented) -------

inline Built build_gadget_census(const ExperimentConfig& cfg,
                                 const std::vector<ExperimentProgram>& ps) {
  Built b;
  b.columns = {"program",         "orig_intended", "orig_unintended",
               "orig_total",      "inst_intended", "inst_unintended",
               "inst_total",      "total_reduction_pct"};
  double reduction_sum = 0.0;
  bool intended_all_removed = true, strict_decrease = true;
  for (const ExperimentProgram& p : ps) {
    const GadgetCensus co = census_gadgets(p.image, cfg.census_k);
    const ProgramImage rsb = instrument(p.image).rsb;
    const GadgetCensus ci = census_gadgets(rsb, cfg.census_k);
    const double red = pct_drop(co.total, ci.total);
    Json row;
    row["program"] = p.name;
    row["orig_intended"] = co.intended;
    row["orig_unintended"] = co.unintended;
    row["orig_total"] = co.total;
    row["inst_intended"] = ci.intended;
    row["inst_unintended"] = ci.unintended;
    row["inst_total"] = ci.total;
    row["total_reduction_pct"] = red;
    b.rows.push_back(std::move(row));
    reduction_sum += red;
    if (ci.intended != 0) intended_all_removed = false;
    if (ci.total >= co.total) strict_decrease = false;
  }
  const double n = ps.empty() ? 1.0 : static_cast<double>(ps.size());
  b.summary["programs"] = ps.size();
  b.summary["mean_total_reduction_pct"] = reduction_sum / n;
  b.summary["reference_total_reduction_pct"] = 56.1;
  b.summary["intended_all_removed"] = intended_all_removed;
  b.summary["strict_decrease_everywhere"] = strict_decrease;
  return b;
}

// ---- runtime statistics (instrumented programs under a live defense) -----

inline const char* rsi_bucket(std::uint64_t executed) {
  if (executed > 1'000'000) return ">1e6";
  if (executed > 100'000) return ">1e5";
  if (executed > 10'000) return ">1e4";
  if (executed > 1'000) return ">1e3";
  return "<=1e3";
}

inline Built build_runtime_stats(const ExperimentConfig& cfg,
                                 const std::vector<ExperimentProgram>& ps) {
  Built b;
  b.columns = {"program", "status", "steps", "ticks", "shuffles",
               "rsi_executed", "bucket"};
  Json hist;
  for (const char* k : {"<=1e3", ">1e3", ">1e4", ">1e5", ">1e6"}) hist[k] = 0;
  std::uint64_t rsi_sum = 0;

  for (const ExperimentProgram& p : ps) {
    // Reference semantics: the clean image with the defense idle.
    VaptrConfig inert = cfg.vaptr;
    inert.interval_ticks = kIntervalInf;
    auto v0 = vaptr_init(p.image, inert);
    MachineState m0 = init_machine(p.image);
    RunOptions ro;
    ro.deliveries = p.deliveries;
    const RunResult r0 = run(*v0, m0, ro);

    const ProgramImage rsb = instrument(p.image).rsb;
    auto v1 = vaptr_init(rsb, cfg.vaptr);
    MachineState m1 = init_machine(rsb);
    const RunResult r1 = run(*v1, m1, ro);

    if (r0.status == Status::Halted &&
        (r1.status != Status::Halted || m1.output != m0.output))
      throw PropertyViolation("instrumented run diverged from the original (" +
                              p.name + ")");

    Json row;
    row["program"] = p.name;
    row["status"] = status_name(r1.status);
    row["steps"] = r1.steps;
    row["ticks"] = r1.ticks;
    row["shuffles"] = v1->shuffle_count;
    row["rsi_executed"] = r1.rsi_total;
    row["bucket"] = rsi_bucket(r1.rsi_total);
    b.rows.push_back(std::move(row));
    hist[rsi_bucket(r1.rsi_total)] = hist[rsi_bucket(r1.rsi_total)].get<std::uint64_t>() + 1;
    rsi_sum += r1.rsi_total;
  }
  b.summary["programs"] = ps.size();
  b.summary["interval_ticks"] = interval_label(cfg.vaptr.interval_ticks);
  b.summary["rsi_executed_total"] = rsi_sum;
  b.summary["buckets"] = std::move(hist);
  return b;
}

// ---- optimization evaluation (reorder + rearrange on vs off) -------------

inline Built build_optimization_eval(const ExperimentConfig& cfg,
                                     const std::vector<ExperimentProgram>& ps) {
  Built b;
  b.columns = {"program",       "has_loops",     "units_base",
               "units_opt",     "executed_base", "executed_opt",
               "executed_reduction_pct"};
  RewriteOptions base;
  base.enable_reorder = false;
  base.enable_rearrange = false;
  std::uint64_t exec_base_sum = 0, exec_opt_sum = 0, loop_programs = 0;
  bool strict_on_loops = true;

  for (const ExperimentProgram& p : ps) {
    const RewriteResult rb = instrument(p.image, base);
    const RewriteResult ro = instrument(p.image);

    VaptrConfig inert = cfg.vaptr;
    inert.interval_ticks = kIntervalInf;
    RunOptions opts;
    opts.deliveries = p.deliveries;

    auto vb = vaptr_init(rb.rsb, inert);
    MachineState mb = init_machine(rb.rsb);
    const RunResult resb = run(*vb, mb, opts);

    auto vo = vaptr_init(ro.rsb, inert);
    MachineState mo = init_machine(ro.rsb);
    const RunResult reso = run(*vo, mo, opts);

    if (resb.status != reso.status || mb.output != mo.output)
      throw PropertyViolation(
          "optimized rewrite diverged from the unoptimized rewrite (" +
          p.name + ")");

    Json row;
    row["program"] = p.name;
    row["has_loops"] = p.has_loops;
    row["units_base"] = rb.stats.rsi_units;
    row["units_opt"] = ro.stats.rsi_units;
    row["executed_base"] = resb.rsi_total;
    row["executed_opt"] = reso.rsi_total;
    row["executed_reduction_pct"] = pct_drop(resb.rsi_total, reso.rsi_total);
    b.rows.push_back(std::move(row));

    exec_base_sum += resb.rsi_total;
    exec_opt_sum += reso.rsi_total;
    if (p.has_loops) {
      ++loop_programs;
      if (reso.rsi_total >= resb.rsi_total) strict_on_loops = false;
    }
  }
  b.summary["programs"] = ps.size();
  b.summary["loop_programs"] = loop_programs;
  b.summary["executed_total_base"] = exec_base_sum;
  b.summary["executed_total_opt"] = exec_opt_sum;
  b.summary["gross_executed_reduction_pct"] =
      pct_drop(exec_base_sum, exec_opt_sum);
  b.summary["reference_executed_reduction_pct"] = 64.4;
  b.summary["strict_decrease_on_loop_programs"] = strict_on_loops;
  return b;
}

}  // namespace edetail

inline ExperimentOutput run_experiment(const ExperimentConfig& cfg) {
  const std::vector<ExperimentProgram> progs = load_programs(cfg);

  edetail::Built built;
  switch (cfg.kind) {
    case ExperimentKind::InstrumentStats:
      built = edetail::build_instrument_stats(cfg, progs);
      break;
    case ExperimentKind::AttackEval:
      built = edetail::build_attack_eval(cfg, progs);
      break;
    case ExperimentKind::GadgetCensus:
      built = edetail::build_gadget_census(cfg, progs);
      break;
    case ExperimentKind::RuntimeStats:
      built = edetail::build_runtime_stats(cfg, progs);
      break;
    case ExperimentKind::OptimizationEval:
      built = edetail::build_optimization_eval(cfg, progs);
      break;
  }

  ExperimentOutput out;
  out.table.columns = built.columns;
  edetail::table_from_rows(out.table, built.rows);

  Json rep;
  rep["experiment"] = experiment_kind_name(cfg.kind);
  rep["config"] = experiment_config_to_json(cfg);
  rep["columns"] = built.columns;
  rep["rows"] = std::move(built.rows);
  rep["summary"] = std::move(built.summary);
  out.report = std::move(rep);

  namespace fs = std::filesystem;
  fs::create_directories(cfg.output_dir);
  const std::string base = experiment_kind_name(cfg.kind);
  const fs::path csv_path = fs::path(cfg.output_dir) / (base + ".csv");
  write_text_file(csv_path, to_csv(out.table));
  out.files.push_back(csv_path);
  const fs::path json_path = fs::path(cfg.output_dir) / (base + ".json");
  write_text_file(json_path, out.report.dump(2) + "\n");
  out.files.push_back(json_path);
  if (cfg.emit_tsv) {
    const fs::path tsv_path = fs::path(cfg.output_dir) / (base + ".tsv");
    write_text_file(tsv_path, to_tsv(out.table));
    out.files.push_back(tsv_path);
  }
  return out;
}

}  // namespace vaptr
