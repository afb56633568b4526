// SPDX-License-Identifier: Apache-2.0
#include "dqlora/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>

#include "dqlora/binary_io.hpp"
#include "dqlora/config.hpp"
#include "dqlora/errors.hpp"
#include "dqlora/evaluation.hpp"
#include "dqlora/training.hpp"

namespace dqlora {

namespace {

namespace fs = std::filesystem;

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string short_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string as_text(const std::vector<std::uint8_t>& bytes) {
  return std::string(bytes.begin(), bytes.end());
}

void save_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

struct Options {
  std::string config_path;
  std::vector<std::string> sets;
  // flag -> config key; only flags actually given end up in the config
  std::map<std::string, std::string> flags;
};

void add_common(CLI::App* cmd, Options& o, bool training_flags) {
  cmd->add_option("--config", o.config_path, "config file (key = value lines)");
  cmd->add_option("--set", o.sets, "override any config key, key=value (repeatable)");
  auto flag = [&](const std::string& name, const std::string& key, const std::string& help) {
    cmd->add_option_function<std::string>(
        name, [&o, key](const std::string& v) { o.flags[key] = v; }, help + " (" + key + ")");
  };
  flag("--out", "out", "output directory; for datagen the corpus file");
  flag("--seed", "seed", "training seed");
  flag("--snr-db", "snr_db", "noise level in dB");
  if (training_flags) {
    flag("--stage", "stage", "teacher | student_base | distill");
    flag("--lambda", "lambda", "KL distillation weight");
    flag("--mu", "mu", "coalescence weight");
    flag("--alpha", "alpha", "coalescence decay");
    flag("--tau", "tau", "distillation temperature");
    flag("--epochs", "epochs", "epochs for the selected stage");
  }
}

Config build_config(const Options& o) {
  Config c;
  if (!o.config_path.empty()) c.load_file(o.config_path);
  for (const auto& [key, value] : o.flags) c.set(key, value);
  for (const std::string& s : o.sets) c.set_assignment(s);
  return c;
}

CorpusConfig corpus_config(const Config& c) {
  CorpusConfig cc;
  auto count = [&](const char* key) {
    const long long v = c.get_int(key);
    if (v < 0 || v > 1000000) throw ConfigError(std::string(key) + " out of range");
    return static_cast<std::uint32_t>(v);
  };
  cc.n_train = count("corpus.n_train");
  cc.n_val = count("corpus.n_val");
  cc.n_test = count("corpus.n_test");
  cc.seed = static_cast<std::uint64_t>(c.get_int("corpus.seed"));
  cc.min_tokens = static_cast<int>(c.get_int("corpus.min_tokens"));
  cc.max_tokens = static_cast<int>(c.get_int("corpus.max_tokens"));
  if (cc.min_tokens < 1 || cc.max_tokens < cc.min_tokens) {
    throw ConfigError("corpus token range is empty");
  }
  return cc;
}

std::string model_label(const fs::path& file, const ModelBundle& b) {
  const std::string stem = file.stem().string();
  if (stem != "distill") return stem;
  auto meta = [&](const char* k) { return b.meta.count(k) ? b.meta.at(k) : 0.0; };
  return "student_distill(lambda=" + short_num(meta("lambda")) + ",mu=" + short_num(meta("mu")) +
         ")";
}

int cmd_datagen(const Options& o, std::ostream& out) {
  const Config c = build_config(o);
  const fs::path path = o.flags.count("out") ? fs::path(c.get("out")) : fs::path(c.get("corpus"));
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const Corpus corpus = build_corpus(corpus_config(c), path);
  const auto n = corpus.counts();
  out << "wrote " << path.string() << ": " << n[0] << " train, " << n[1] << " validation, " << n[2]
      << " test\n";
  return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  const Config c = build_config(o);
  const TrainConfig tc = TrainConfig::from_config(c);
  const StageResult r = run_stage(tc);
  for (const std::string& w : r.warnings) err << "warning: " << w << "\n";
  for (const EpochRecord& e : r.log.records) {
    out << stage_name(tc.stage) << " epoch " << e.epoch << " loss " << short_num(e.mean.l_total)
        << " val_ter " << short_num(e.val_ter) << "\n";
  }
  out << "wrote " << r.checkpoint.string() << " (best epoch " << r.best_epoch << ", val_ter "
      << short_num(r.best_val_ter) << ")\n";
  return kExitOk;
}

int cmd_evaluate(const Options& o, std::ostream& out) {
  const Config c = build_config(o);
  const fs::path dir = c.get("out");
  const fs::path corpus_path = c.get("corpus");
  if (!fs::exists(corpus_path)) throw DataError("corpus not found: " + corpus_path.string());
  const Corpus corpus = read_corpus(corpus_path);
  const std::vector<const Utterance*> test = corpus.split(Split::kTest);
  if (test.empty()) throw DataError("corpus has no test utterances");
  const double snr = c.get_real("snr_db");

  const long long n_rtf = std::min<long long>(c.get_int("eval.rtf_utterances"),
                                              static_cast<long long>(test.size()));
  std::vector<Waveform> rtf_audio;
  for (long long i = 0; i < n_rtf; ++i) rtf_audio.push_back(test[static_cast<std::size_t>(i)]->clean);
  const int reps = static_cast<int>(c.get_int("eval.rtf_repetitions"));

  std::vector<ReportRow> rows;
  Metrics metrics;
  for (const char* name : {"teacher", "student_base", "distill"}) {
    const fs::path file = dir / (std::string(name) + ".dqck");
    if (!fs::exists(file)) continue;
    const Checkpoint ckpt = read_checkpoint(file);
    const ModelBundle bundle = from_checkpoint(ckpt);
    const std::string label = model_label(file, bundle);
    const std::vector<ParamInfo> inventory = parameter_inventory(bundle.encoder);
    Index total = 0, trainable = 0;
    for (const ParamInfo& p : inventory) {
      total += p.numel;
      if (p.trainable) trainable += p.numel;
    }
    ReportRow row;
    row.model = label;
    row.params = format_params_millions(total);
    row.wer_clean = evaluate_ter(bundle.encoder, test, std::nullopt).rate();
    row.wer_noisy = evaluate_ter(bundle.encoder, test, snr).rate();
    row.rtf = measure_rtf(bundle.encoder, rtf_audio, reps);
    row.memory_mb = param_memory_report(ckpt).megabytes();
    rows.push_back(row);

    auto key = [&](const char* field) { return std::string(field) + "[" + label + "]"; };
    metrics.emplace_back(key("params_total"), std::to_string(total));
    metrics.emplace_back(key("params_trainable"), std::to_string(trainable));
    metrics.emplace_back(key("trainable_fraction"), num(trainable_fraction(inventory)));
    metrics.emplace_back(key("wer_clean"), num(row.wer_clean));
    metrics.emplace_back(key("wer_noisy"), num(row.wer_noisy));
    metrics.emplace_back(key("memory_mb"), num(row.memory_mb));
    metrics.emplace_back(key("rtf"), num(row.rtf));
  }
  if (rows.empty()) throw DataError("no checkpoints found in " + dir.string());
  metrics.emplace_back("snr_db", num(snr));
  if (const auto peak = process_peak_rss_mb()) metrics.emplace_back("peak_rss_mb", num(*peak));

  const std::string report = emit_report(rows);
  save_text(dir / "metrics.tsv", format_metrics(metrics));
  save_text(dir / "report.txt", report);
  out << report;
  return kExitOk;
}

// Rebuilds report rows from one or more metrics files; the first file that
// mentions a model wins.
int cmd_report(const std::vector<std::string>& files, const std::string& out_file,
               std::ostream& out) {
  std::vector<std::string> order;
  std::map<std::string, std::map<std::string, std::string>> fields;
  for (const std::string& f : files) {
    if (!fs::exists(f)) throw DataError("metrics file not found: " + f);
    std::map<std::string, std::map<std::string, std::string>> local;
    std::vector<std::string> local_order;
    for (const auto& [key, value] : parse_metrics(as_text(read_file(f)))) {
      const auto open = key.find('[');
      if (open == std::string::npos || key.back() != ']') continue;
      const std::string model = key.substr(open + 1, key.size() - open - 2);
      if (!local.count(model)) local_order.push_back(model);
      local[model][key.substr(0, open)] = value;
    }
    for (const std::string& m : local_order) {
      if (fields.count(m)) continue;
      order.push_back(m);
      fields[m] = local[m];
    }
  }
  if (order.empty()) throw DataError("no model metrics in the given files");
  std::vector<ReportRow> rows;
  for (const std::string& m : order) {
    const auto& f = fields.at(m);
    auto real = [&](const char* k) {
      if (!f.count(k)) throw DataError("metrics for " + m + " lack '" + k + "'");
      return std::stod(f.at(k));
    };
    rows.push_back({m, format_params_millions(static_cast<Index>(real("params_total"))),
                    real("wer_clean"), real("wer_noisy"), real("rtf"), real("memory_mb")});
  }
  const std::string report = emit_report(rows);
  if (!out_file.empty()) save_text(out_file, report);
  out << report;
  return kExitOk;
}

std::string keys_help() {
  std::string s = "Config keys (settable in --config files and with --set key=value):\n";
  for (const KeySpec& k : config_keys()) {
    s += "  " + k.name + " = " + (k.default_value.empty() ? "\"\"" : k.default_value) + "    " +
         k.help + "\n";
  }
  return s;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Quantized adapter distillation for noisy speech recognition (toy scale)", "dqlora"};
  app.require_subcommand(1);
  app.footer(keys_help());

  Options opts;
  CLI::App* datagen = app.add_subcommand("datagen", "generate the synthetic corpus");
  add_common(datagen, opts, false);
  CLI::App* train = app.add_subcommand("train", "run one training stage");
  add_common(train, opts, true);
  CLI::App* evaluate = app.add_subcommand("evaluate", "score the checkpoints in --out");
  add_common(evaluate, opts, false);
  CLI::App* report = app.add_subcommand("report", "merge metrics files into one table");
  std::vector<std::string> metrics_files;
  std::string report_out;
  report->add_option("metrics", metrics_files, "metrics.tsv files")->required();
  report->add_option("--out", report_out, "also write the table to this file");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    err << app.help();
    return kExitUsage;
  }

  try {
    if (datagen->parsed()) return cmd_datagen(opts, out);
    if (train->parsed()) return cmd_train(opts, out, err);
    if (evaluate->parsed()) return cmd_evaluate(opts, out);
    return cmd_report(metrics_files, report_out, out);
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
}

}  // namespace dqlora
