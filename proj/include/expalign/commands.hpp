#pragma once

// Command implementations behind the command-line tool. Each command turns a
// RunConfig into a JSON report, a short text summary and an exit status.
//
// Exit status: 0 when every requested check passes and all I/O succeeds,
// 1 when a check fails, 2 for invalid input or configuration, 3 for I/O errors.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "expalign/io.hpp"
#include "expalign/suites.hpp"
#include "expalign/synth.hpp"

namespace expalign {

enum ExitStatus : int { kExitOk = 0, kExitCheckFailed = 1, kExitBadInput = 2, kExitIo = 3 };

struct RunConfig {
  std::string command;
  std::uint64_t seed = 0;
  ObjectiveConfig objective;
  int seeds = 10;
  int steps = 500;
  double learning_rate = 10.0;
  double signal = 1.0;
  int gradient_configs = 20;
  std::optional<std::string> scene_path;
  std::optional<std::string> heatmap_dir;
  std::optional<std::string> out_path;
  bool text = false;
};

struct CommandOutcome {
  Json report;
  std::string text;
  int status = kExitOk;
};

inline const char* std_mode_name(StdMode m) {
  return m == StdMode::population_eps_inside ? "population" : "sample";
}

inline StdMode parse_std_mode(const std::string& s) {
  if (s == "population") return StdMode::population_eps_inside;
  if (s == "sample") return StdMode::sample_eps_outside;
  throw DomainError("std mode must be 'population' or 'sample', got '" + s + "'");
}

inline void validate(const RunConfig& c) {
  check_config(c.objective);
  detail::require_domain(c.objective.k_ratio > 0.0 && c.objective.k_ratio <= 1.0,
                         "k-ratio must lie in (0, 1]");
  detail::require_domain(c.seeds >= 1, "seeds must be >= 1");
  detail::require_domain(c.steps >= 1, "steps must be >= 1");
  detail::require_domain(std::isfinite(c.learning_rate) && c.learning_rate >= 0.0,
                         "learning rate must be finite and >= 0");
  detail::require_domain(std::isfinite(c.signal) && c.signal >= 0.0, "signal must be finite and >= 0");
  detail::require_domain(c.gradient_configs >= 1, "gradient configs must be >= 1");
}

/// Applies a JSON config file on top of `base`. Keys mirror the long flags
/// with dashes replaced by underscores.
inline RunConfig apply_config_json(RunConfig base, const Json& j, const std::string& origin) {
  auto fail = [&](const std::string& key, const std::string& what) {
    throw ParseError(origin + ": field /" + key + ": " + what, 0, 0, "/" + key);
  };
  if (!j.is_object()) throw ParseError(origin + ": expected a JSON object", 1, 1, "");
  auto number = [&](const std::string& key, const Json& v) {
    if (!v.is_number()) fail(key, "expected a number");
    return v.get<double>();
  };
  auto integer = [&](const std::string& key, const Json& v) {
    if (!v.is_number_integer()) fail(key, "expected an integer");
    return v.get<long long>();
  };
  for (const auto& [key, v] : j.items()) {
    auto& o = base.objective;
    if (key == "seed") {
      if (!v.is_number_unsigned()) fail(key, "expected a non-negative integer");
      base.seed = v.get<std::uint64_t>();
    } else if (key == "tau_t") {
      o.token_temperature = number(key, v);
    } else if (key == "tau") {
      o.temperature = number(key, v);
    } else if (key == "lambda_sem") {
      o.lambda_sem = number(key, v);
    } else if (key == "lambda_geo") {
      o.lambda_geo = number(key, v);
    } else if (key == "clip") {
      o.gaco.clip = number(key, v);
    } else if (key == "epsilon") {
      o.gaco.epsilon = number(key, v);
    } else if (key == "k_ratio") {
      o.k_ratio = number(key, v);
    } else if (key == "normalize") {
      if (!v.is_boolean()) fail(key, "expected a boolean");
      o.gaco.normalize = v.get<bool>();
    } else if (key == "std_mode") {
      if (!v.is_string()) fail(key, "expected \"population\" or \"sample\"");
      try {
        o.gaco.std_mode = parse_std_mode(v.get<std::string>());
      } catch (const DomainError& e) {
        fail(key, e.what());
      }
    } else if (key == "seeds") {
      base.seeds = static_cast<int>(integer(key, v));
    } else if (key == "steps") {
      base.steps = static_cast<int>(integer(key, v));
    } else if (key == "lr") {
      base.learning_rate = number(key, v);
    } else if (key == "signal") {
      base.signal = number(key, v);
    } else if (key == "gradient_configs") {
      base.gradient_configs = static_cast<int>(integer(key, v));
    } else {
      fail(key, "unknown key");
    }
  }
  return base;
}

inline RunConfig load_config_file(const RunConfig& base, const std::string& path) {
  return apply_config_json(base, parse_json_text(read_text_file(path), path), path);
}

inline Json config_echo(const RunConfig& c) {
  const auto& o = c.objective;
  return Json{{"tau_t", o.token_temperature},
              {"tau", o.temperature},
              {"lambda_sem", o.lambda_sem},
              {"lambda_geo", o.lambda_geo},
              {"clip", o.gaco.clip},
              {"epsilon", o.gaco.epsilon},
              {"k_ratio", o.k_ratio},
              {"normalize", o.gaco.normalize},
              {"std_mode", std_mode_name(o.gaco.std_mode)},
              {"inject_fault", o.gaco.inject_sign_fault},
              {"seeds", c.seeds},
              {"steps", c.steps},
              {"lr", c.learning_rate},
              {"signal", c.signal},
              {"gradient_configs", c.gradient_configs}};
}

inline Json report_header(const RunConfig& c) {
  return Json{{"schema_version", kSchemaVersion},
              {"command", c.command},
              {"prng", kPrngName},
              {"seed", c.seed},
              {"config", config_echo(c)}};
}

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(6);
  ss << v;
  return ss.str();
}

inline SceneSpec synthetic_scene(const RunConfig& c) {
  SceneSpec spec;
  spec.seed = c.seed;
  spec.signal = c.signal;
  return spec;
}

inline Sample input_scene(const RunConfig& c, Json& source) {
  if (c.scene_path) {
    source = {{"kind", "file"}, {"name", std::filesystem::path(*c.scene_path).filename().string()}};
    return load_scene(*c.scene_path);
  }
  source = {{"kind", "synthetic"}, {"seed", c.seed}, {"signal", c.signal}};
  return generate_scene(synthetic_scene(c));
}

inline CommandOutcome run_suites(const RunConfig& c, const std::vector<std::string>& suites) {
  SuiteOptions opts;
  opts.seed = c.seed;
  opts.objective = c.objective;
  opts.gradient_configs = c.gradient_configs;
  const auto results = run_properties(properties_of(suites), opts);

  CommandOutcome out;
  out.report = report_header(c);
  Json props = Json::array();
  std::ostringstream text;
  for (const auto& r : results) {
    Json j{{"suite", r.suite},
           {"name", r.name},
           {"passed", r.passed},
           {"residual", r.residual},
           {"tolerance", r.tolerance},
           {"cases", r.cases}};
    if (!r.error.empty()) j["error"] = r.error;
    props.push_back(std::move(j));
    text << (r.passed ? "PASS " : "FAIL ") << r.suite << "/" << r.name << "  residual "
         << fmt(r.residual) << "  tolerance " << fmt(r.tolerance) << "  cases " << r.cases;
    if (!r.error.empty()) text << "  error: " << r.error;
    text << "\n";
  }
  const bool ok = all_passed(results);
  out.report["properties"] = std::move(props);
  out.report["passed"] = ok;
  text << (ok ? "all properties passed\n" : "some properties FAILED\n");
  out.text = text.str();
  out.status = ok ? kExitOk : kExitCheckFailed;
  return out;
}

}  // namespace detail

inline CommandOutcome cmd_loss(const RunConfig& c) {
  Json source;
  const Sample s = detail::input_scene(c, source);
  const ForwardPass fw = forward(std::span<const Sample>(&s, 1), c.objective);
  const auto& f = fw.samples[0];

  CommandOutcome out;
  out.report = report_header(c);
  out.report["scene"] = {{"source", source},
                         {"prompts", s.prompts()},
                         {"channels", s.features[0].channels},
                         {"height", s.features[0].height},
                         {"width", s.features[0].width},
                         {"masked_pairs", fw.masked_pairs}};
  out.report["loss"] = {{"sem", fw.loss.sem}, {"geo", fw.loss.geo}, {"total", fw.loss.total}};
  Json prompts = Json::array();
  for (int p = 0; p < s.prompts(); ++p) {
    const bool positive =
        std::find(s.labels.positives.begin(), s.labels.positives.end(), p) != s.labels.positives.end();
    prompts.push_back({{"index", p},
                       {"positive", positive},
                       {"pooled_logit", f.logits.values[p]},
                       {"topk", f.selections[p].indices}});
  }
  out.report["prompts"] = std::move(prompts);
  const bool ok = std::isfinite(fw.loss.total);
  out.report["passed"] = ok;
  out.text = "L_sem " + detail::fmt(fw.loss.sem) + "\nL_geo " + detail::fmt(fw.loss.geo) + "\ntotal " +
             detail::fmt(fw.loss.total) + "\n";
  out.status = ok ? kExitOk : kExitCheckFailed;
  return out;
}

inline CommandOutcome cmd_verify(const RunConfig& c) { return detail::run_suites(c, suite_names()); }

inline CommandOutcome cmd_gibbs(const RunConfig& c) {
  return detail::run_suites(c, {"gibbs", "gibbs_limits"});
}

inline CommandOutcome cmd_mil(const RunConfig& c) { return detail::run_suites(c, {"mil"}); }

inline CommandOutcome cmd_gradcheck(const RunConfig& c) { return detail::run_suites(c, {"gradients"}); }

/// Weak-signal benchmark: `seeds` consecutive scenes from `seed`, each
/// trained for `steps` steps. Passes when no run diverges.
inline CommandOutcome cmd_demo(const RunConfig& c) {
  DemoBenchmark bench;
  bench.scene = detail::synthetic_scene(c);
  bench.steps = c.steps;
  bench.learning_rate = c.learning_rate;
  bench.first_seed = c.seed;
  bench.seeds = c.seeds;
  std::vector<Sample> trained;
  const auto result = run_benchmark(bench, c.objective, c.heatmap_dir ? &trained : nullptr);

  CommandOutcome out;
  out.report = report_header(c);
  Json runs = Json::array();
  bool ok = true;
  std::ostringstream text;
  for (const auto& r : result.runs) {
    ok = ok && !r.diverged;
    runs.push_back({{"seed", r.seed},
                    {"accuracy_before", r.accuracy_before},
                    {"accuracy_after", r.accuracy_after},
                    {"diverged", r.diverged},
                    {"loss", {{"sem", r.sem}, {"geo", r.geo}, {"total", r.total}}}});
    text << "seed " << r.seed << "  accuracy " << detail::fmt(r.accuracy_before) << " -> "
         << detail::fmt(r.accuracy_after) << "  L_sem " << detail::fmt(r.sem.front()) << " -> "
         << detail::fmt(r.sem.back()) << (r.diverged ? "  DIVERGED" : "") << "\n";
  }
  out.report["runs"] = std::move(runs);
  out.report["mean_accuracy_before"] = result.mean_accuracy_before;
  out.report["mean_accuracy_after"] = result.mean_accuracy_after;
  text << "mean accuracy " << detail::fmt(result.mean_accuracy_before) << " -> "
       << detail::fmt(result.mean_accuracy_after) << "\n";

  if (c.heatmap_dir) {
    Json maps = Json::array();
    for (std::size_t k = 0; k < trained.size(); ++k) {
      const auto up = fuse_up(alignment_pyramid(trained[k], c.objective.token_temperature));
      maps.push_back(write_heatmaps(up, *c.heatmap_dir, "demo_seed" + std::to_string(result.runs[k].seed)));
    }
    out.report["heatmaps"] = std::move(maps);
  }
  out.report["passed"] = ok;
  out.text = text.str();
  out.status = ok ? kExitOk : kExitCheckFailed;
  return out;
}

/// Fine fused maps of the input scene, one PGM per prompt.
inline CommandOutcome cmd_heatmap(const RunConfig& c) {
  if (!c.heatmap_dir) throw DomainError("heatmap: --heatmap <dir> is required");
  Json source;
  const Sample s = detail::input_scene(c, source);
  const auto up = fuse_up(alignment_pyramid(s, c.objective.token_temperature));
  CommandOutcome out;
  out.report = report_header(c);
  out.report["scene"] = {{"source", source}};
  out.report["heatmaps"] = write_heatmaps(up, *c.heatmap_dir, "heatmap");
  out.report["passed"] = true;
  out.text = "wrote " + std::to_string(up.prompts) + " heatmaps to " + *c.heatmap_dir + "\n";
  return out;
}

inline CommandOutcome run_command(const RunConfig& c) {
  validate(c);
  if (c.command == "loss") return cmd_loss(c);
  if (c.command == "verify") return cmd_verify(c);
  if (c.command == "gibbs") return cmd_gibbs(c);
  if (c.command == "mil") return cmd_mil(c);
  if (c.command == "gradcheck") return cmd_gradcheck(c);
  if (c.command == "demo") return cmd_demo(c);
  if (c.command == "heatmap") return cmd_heatmap(c);
  throw DomainError("unknown command '" + c.command + "'");
}

/// Runs the command and maps library errors onto exit statuses. The report
/// is written to `out_path` when set.
inline CommandOutcome execute(const RunConfig& c, std::string& error) {
  CommandOutcome out;
  try {
    out = run_command(c);
    if (c.out_path) write_text_file(*c.out_path, dump_report(out.report));
  } catch (const IoError& e) {
    error = e.what();
    out.status = kExitIo;
  } catch (const ParseError& e) {
    error = e.what();
    out.status = kExitBadInput;
  } catch (const std::invalid_argument& e) {
    error = e.what();
    out.status = kExitBadInput;
  } catch (const std::domain_error& e) {
    error = e.what();
    out.status = kExitBadInput;
  }
  return out;
}

}  // namespace expalign
