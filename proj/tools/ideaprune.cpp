// ideaprune command-line driver.
//
// Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.
// Failures also print one JSON object {"error": {...}} on stderr.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ideaprune/pipeline.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace ideaprune;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct RunOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string resume;
  bool quiet = false;
};

RunConfig resolve_config(const RunOptions& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_config(o.config);
  for (const auto& kv : o.overrides) apply_override(c, kv);
  if (o.seed) c.seed = *o.seed;
  c.validate();
  return c;
}

std::int64_t tokens_for(std::int64_t steps, const RunConfig& c) {
  return steps * c.batch_size * static_cast<std::int64_t>(c.model.seq_len);
}

json flagged_defaults(const RunConfig& c) {
  json f = json::array();
  const RunConfig d;
  if (c.adam.weight_decay == d.adam.weight_decay) f.push_back("optim.weight_decay=0 (not stated for the reference runs)");
  if (c.adam.grad_clip == d.adam.grad_clip) f.push_back("optim.grad_clip=off (not stated for the reference runs)");
  if (c.denominator == CosineDenominator::normalized) {
    f.push_back("schedule.cosine_denominator=normalized (lr reaches eta_e exactly at the last step)");
  }
  if (c.kd_enabled && c.kd_alpha == d.kd_alpha) f.push_back("kd.alpha=0.5 (artifact choice)");
  if (c.kd_enabled && c.kd_tau == d.kd_tau) f.push_back("kd.tau=1 (artifact choice)");
  if (c.prunes() && c.method == PruneMethod::minitron && c.calibration_samples == d.calibration_samples) {
    f.push_back("minitron.calibration_samples=256 (desk default)");
  }
  return f;
}

json run_summary(const Trainer& t, double final_ppl) {
  const RunConfig& c = t.config();
  json s;
  s["final_heldout_ppl"] = final_ppl;
  s["config_hash"] = config_hash(c);
  s["seed"] = c.seed;
  s["mode"] = to_string(c.mode);
  if (c.prunes()) s["pruning_method"] = to_string(c.method);
  s["steps"] = {{"pretrain", c.stages.pretrain},
                {"prune", c.stages.prune},
                {"recover", c.stages.recover},
                {"total", c.total_steps()}};
  s["tokens"] = {{"pretrain", tokens_for(c.stages.pretrain, c)},
                 {"prune", tokens_for(c.stages.prune, c)},
                 {"recover", tokens_for(c.stages.recover, c)},
                 {"total", tokens_for(c.total_steps(), c)}};
  if (c.mode == RunMode::resume_ablation) s["tokens"]["inherited_from_init_checkpoint"] = tokens_for(c.stages.pretrain, c);
  if (t.teacher()) {
    // Reported separately; the teacher's budget is not part of this run's.
    const RunConfig tc = parse_config(t.teacher()->config_text);
    s["teacher"] = {{"checkpoint", c.kd_teacher},
                    {"config_hash", detail::git_blob_sha1(t.teacher()->config_text)},
                    {"ffn_hidden", t.teacher()->model.ffn_hidden},
                    {"tokens", tokens_for(tc.total_steps(), tc)}};
  }
  s["ffn_hidden"] = {{"initial", c.model.ffn_hidden}, {"final", t.model().ffn_hidden}};
  // Measured, not assumed: at desk scale attention is a much larger share than in big models.
  s["parameters"] = {{"final", parameter_count(t.weights())}, {"final_ffn", ffn_parameter_count(t.weights())}};
  s["ffn_parameter_fraction"] =
      static_cast<double>(ffn_parameter_count(t.weights())) / static_cast<double>(parameter_count(t.weights()));
  if (c.prunes() && c.method == PruneMethod::minitron) s["calibration_samples_used"] = t.calibration_samples_used();
  s["flagged_defaults"] = flagged_defaults(c);
  const char* det = std::getenv("IDEA_PRUNE_DETERMINISTIC");
  s["deterministic_kernels"] = !(det && std::string(det) == "0");
  s["wall_ms"] = t.wall_ms();
  return s;
}

int run_training(const RunOptions& o, bool pruning_command) {
  const RunConfig cfg = resolve_config(o);
  if (pruning_command && !cfg.prunes()) {
    throw ConfigError("prune-run needs run.mode integrated, naive or resume_ablation (use train for from_scratch)");
  }
  if (!pruning_command && cfg.prunes()) throw ConfigError("train runs run.mode = from_scratch; use prune-run");
  if (o.out.empty()) throw ConfigError("--out is required");

  const fs::path out(o.out);
  fs::create_directories(out);
  write_text_atomic(out / "config.ini", canonical_text(cfg));
  write_text_atomic(out / "config.sha1", config_hash(cfg) + "\n");

  auto data = std::make_shared<const RunData>(load_run_data(cfg));
  std::optional<Trainer> t;
  if (o.resume.empty()) {
    t.emplace(cfg, data);
  } else {
    t.emplace(Trainer::resume(cfg, load_checkpoint(o.resume), data));
  }
  t->set_output_dir(out);
  if (!o.quiet) {
    std::cerr << "config " << config_hash(cfg) << ", " << t->total_steps() << " steps, "
              << data->train_tokens.size() << " training tokens\n";
  }
  std::size_t logged = t->metrics().size();
  auto flush = [&] {
    if (o.quiet) return;
    for (; logged < t->metrics().size(); ++logged) {
      const MetricsRow& r = t->metrics()[logged];
      if (r.heldout_ppl) {
        std::cerr << "step " << r.step << " " << r.phase << " lr " << r.lr << " retained " << r.retained << " loss "
                  << r.train_loss << " ppl " << *r.heldout_ppl << "\n";
      }
    }
  };
  try {
    while (!t->done()) {
      t->step_once();
      flush();
    }
  } catch (...) {
    std::string log;
    for (const auto& e : t->events()) log += e + "\n";
    write_text_atomic(out / "events.log", log);
    throw;
  }

  const double ppl = t->heldout_perplexity();
  t->write_outputs(out);
  std::string log;
  for (const auto& e : t->events()) log += e + "\n";
  write_text_atomic(out / "events.log", log);
  const json summary = run_summary(*t, ppl);
  write_text_atomic(out / "summary.json", summary.dump(2) + "\n");
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_ingest(const std::vector<std::string>& inputs, const std::string& out, const std::string& expect_manifest) {
  if (inputs.empty()) throw ConfigError("ingest needs at least one --input");
  std::vector<fs::path> files;
  for (const auto& p : inputs) {
    if (fs::is_directory(p)) {
      std::vector<fs::path> dir;
      for (const auto& e : fs::directory_iterator(p))
        if (e.is_regular_file()) dir.push_back(e.path());
      std::sort(dir.begin(), dir.end());
      files.insert(files.end(), dir.begin(), dir.end());
    } else {
      files.emplace_back(p);
    }
  }
  const TokenizedCorpus c = ingest(files);
  if (!expect_manifest.empty()) verify_manifest(c, parse_manifest(read_file(expect_manifest)));
  fs::create_directories(out);
  save_corpus(c, fs::path(out) / "corpus.bin");
  write_text_atomic(fs::path(out) / "manifest.txt", manifest_text(c));
  json s = {{"documents", c.documents()}, {"tokens", c.tokens.size()}, {"files", files.size()}};
  std::cout << s.dump() << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::vector<std::string>& overrides, const std::string& out) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  RunConfig cfg = parse_config(ck.config_text);
  for (const auto& kv : overrides) apply_override(cfg, kv);
  const RunData data = load_run_data(cfg);
  const std::vector<Batch> batches =
      sequential_batches(data.heldout_tokens, cfg.model.seq_len, static_cast<std::size_t>(cfg.eval_batch),
                         static_cast<std::size_t>(cfg.eval_sequences));
  const NeuronMask* mask = ck.compacted ? nullptr : &ck.mask;
  const double ppl = evaluate_perplexity(ck.model, ck.weights, batches, mask);
  std::size_t sequences = 0;
  for (const auto& b : batches) sequences += b.batch;
  json s = {{"checkpoint", checkpoint},
            {"step", ck.step},
            {"config_hash", detail::git_blob_sha1(ck.config_text)},
            {"ffn_hidden", ck.model.ffn_hidden},
            {"heldout_sequences", sequences},
            {"heldout_ppl", ppl}};
  if (!out.empty()) {
    fs::create_directories(out);
    write_text_atomic(fs::path(out) / "eval.json", s.dump(2) + "\n");
  }
  std::cout << s.dump() << "\n";
  return 0;
}

std::vector<MetricsRow> read_metrics(const fs::path& run) {
  const fs::path p = run / "metrics.csv";
  if (!fs::exists(p)) throw DataError("no metrics.csv in " + run.string());
  return parse_metrics_csv(read_file(p));
}

int cmd_export(const std::vector<std::string>& runs, const std::string& kind, const std::string& out) {
  if (runs.empty()) throw ConfigError("export needs at least one --run");
  if (out.empty()) throw ConfigError("--out is required");
  // Artifacts in run directories are only read, never rewritten.
  fs::create_directories(out);
  if (kind == "loss_curve" || kind == "lr_curve") {
    if (runs.size() != 1) throw ConfigError(kind + " exports one run at a time");
    const auto rows = read_metrics(runs[0]);
    std::string csv = kind == "loss_curve" ? "step,phase,train_loss,heldout_ppl\n" : "step,phase,lr,sparsity,retained\n";
    for (const auto& r : rows) {
      csv += std::to_string(r.step) + "," + r.phase + ",";
      if (kind == "loss_curve") {
        csv += format_double(r.train_loss) + "," + (r.heldout_ppl ? format_double(*r.heldout_ppl) : "") + "\n";
      } else {
        csv += format_double(r.lr) + "," + format_double(r.sparsity) + "," + std::to_string(r.retained) + "\n";
      }
    }
    write_text_atomic(fs::path(out) / (kind + ".csv"), csv);
    std::cout << json{{"kind", kind}, {"rows", rows.size()}}.dump() << "\n";
    return 0;
  }
  if (kind != "ppl_table") throw ConfigError("unknown export kind '" + kind + "' (loss_curve, lr_curve, ppl_table)");

  json table = json::array();
  std::string csv = "run,mode,method,seed,ffn_hidden,tokens,final_heldout_ppl,config_hash\n";
  for (const auto& run : runs) {
    read_metrics(run);  // validates the run is complete enough to report
    const fs::path sp = fs::path(run) / "summary.json";
    if (!fs::exists(sp)) throw DataError("no summary.json in " + run);
    json s;
    try {
      s = json::parse(read_file(sp));
    } catch (const json::exception& e) {
      throw DataError("corrupt summary.json in " + run + ": " + e.what());
    }
    const std::string method = s.value("pruning_method", "none");
    json row = {{"run", fs::path(run).filename().string()},
                {"mode", s.at("mode")},
                {"method", method},
                {"seed", s.at("seed")},
                {"ffn_hidden", s.at("ffn_hidden").at("final")},
                {"tokens", s.at("tokens").at("total")},
                {"final_heldout_ppl", s.at("final_heldout_ppl")},
                {"config_hash", s.at("config_hash")}};
    csv += row["run"].get<std::string>() + "," + row["mode"].get<std::string>() + "," + method + "," +
           std::to_string(row["seed"].get<std::uint64_t>()) + "," +
           std::to_string(row["ffn_hidden"].get<std::size_t>()) + "," +
           std::to_string(row["tokens"].get<std::int64_t>()) + "," +
           format_double(row["final_heldout_ppl"].get<double>()) + "," + row["config_hash"].get<std::string>() + "\n";
    table.push_back(std::move(row));
  }
  write_text_atomic(fs::path(out) / "ppl_table.csv", csv);
  write_text_atomic(fs::path(out) / "ppl_table.json", table.dump(2) + "\n");
  std::cout << json{{"kind", kind}, {"rows", table.size()}}.dump() << "\n";
  return 0;
}

int fail(int code, const std::string& type, const std::string& message) {
  std::cerr << json{{"error", {{"type", type}, {"message", message}, {"exit_code", code}}}}.dump() << "\n";
  return code;
}

void add_run_options(CLI::App* cmd, RunOptions& o) {
  cmd->add_option("--config", o.config, "INI config file (defaults apply when omitted)");
  cmd->add_option("--override", o.overrides, "section.key=value, repeatable")->take_all();
  cmd->add_option("--seed", o.seed, "root seed (overrides run.seed)");
  cmd->add_option("--out", o.out, "output directory")->required();
  cmd->add_option("--resume", o.resume, "continue from a checkpoint written by this config");
  cmd->add_flag("--quiet", o.quiet, "no progress on stderr");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Enlarge-and-prune training for small decoder-only transformers"};
  app.require_subcommand(1);

  RunOptions train_opts, prune_opts;
  add_run_options(app.add_subcommand("train", "train a model from scratch (run.mode = from_scratch)"), train_opts);
  add_run_options(app.add_subcommand("prune-run", "integrated, naive or resume_ablation pruning run"), prune_opts);

  std::vector<std::string> ingest_inputs;
  std::string ingest_out, ingest_expect;
  auto* ingest_cmd = app.add_subcommand("ingest", "tokenize text files into a corpus cache");
  ingest_cmd->add_option("--input", ingest_inputs, "text file or directory, repeatable")->required();
  ingest_cmd->add_option("--out", ingest_out, "output directory")->required();
  ingest_cmd->add_option("--expect-manifest", ingest_expect, "fail unless the files match this manifest");

  std::string eval_ckpt, eval_out;
  std::vector<std::string> eval_overrides;
  auto* eval_cmd = app.add_subcommand("eval", "held-out perplexity of a checkpoint");
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--override", eval_overrides, "section.key=value applied to the checkpoint's config");
  eval_cmd->add_option("--out", eval_out, "directory for eval.json");

  std::vector<std::string> export_runs;
  std::string export_kind, export_out;
  auto* export_cmd = app.add_subcommand("export", "emit plot-ready series from finished runs");
  export_cmd->add_option("--run", export_runs, "run directory, repeatable")->required();
  export_cmd->add_option("--kind", export_kind, "loss_curve, lr_curve or ppl_table")->required();
  export_cmd->add_option("--out", export_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(kExitConfig, "UsageError", e.what());
  }

  try {
    if (app.got_subcommand("train")) return run_training(train_opts, false);
    if (app.got_subcommand("prune-run")) return run_training(prune_opts, true);
    if (app.got_subcommand("ingest")) return cmd_ingest(ingest_inputs, ingest_out, ingest_expect);
    if (app.got_subcommand("eval")) return cmd_eval(eval_ckpt, eval_overrides, eval_out);
    if (app.got_subcommand("export")) return cmd_export(export_runs, export_kind, export_out);
  } catch (const ConfigError& e) {
    return fail(kExitConfig, "ConfigError", e.what());
  } catch (const NonFiniteError& e) {
    return fail(kExitRuntime, "NonFiniteError", e.what());
  } catch (const FormatError& e) {
    return fail(kExitRuntime, "FormatError", e.what());
  } catch (const DataError& e) {
    return fail(kExitRuntime, "DataError", e.what());
  } catch (const Error& e) {
    return fail(kExitRuntime, "Error", e.what());
  } catch (const std::exception& e) {
    return fail(kExitRuntime, "InternalError", e.what());
  }
  return fail(kExitConfig, "UsageError", "no subcommand");
}
