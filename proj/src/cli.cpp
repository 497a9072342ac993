#include "sm3/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <iomanip>
#include <optional>
#include <sstream>

#include "sm3/errors.hpp"
#include "sm3/io.hpp"
#include "sm3/json_fields.hpp"

namespace sm3 {

using nlohmann::json;
namespace fs = std::filesystem;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ValidationError*>(&e) != nullptr) return kExitValidation;
  if (dynamic_cast<const IoError*>(&e) != nullptr) return kExitIo;
  if (dynamic_cast<const VersionError*>(&e) != nullptr) return kExitVersion;
  if (dynamic_cast<const ChecksumError*>(&e) != nullptr) return kExitChecksum;
  if (dynamic_cast<const FormatError*>(&e) != nullptr) return kExitFormat;
  if (dynamic_cast<const NonFiniteError*>(&e) != nullptr) return kExitNonFinite;
  if (dynamic_cast<const fs::filesystem_error*>(&e) != nullptr) return kExitIo;
  return kExitError;
}

void RunConfig::resolve() {
  generator.seed = derive_seed(seed, "data");
  train.seed = derive_seed(seed, "train");
  eval.seed = derive_seed(seed, "eval");
  generator.validate();
  train.validate();
  eval.validate();
  if (output_root.empty()) throw ValidationError("output_root must not be empty");
}

json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"generator", to_json(c.generator)},
          {"train", to_json(c.train)},
          {"eval", to_json(c.eval)},
          {"output_root", c.output_root}};
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  FieldReader r(j, "config");
  r("seed", c.seed)("output_root", c.output_root);
  if (const json* g = r.child("generator")) c.generator = generator_config_from_json(*g);
  if (const json* t = r.child("train")) c.train = train_config_from_json(*t);
  if (const json* e = r.child("eval")) c.eval = eval_config_from_json(*e);
  r.finish();
  return c;
}

void apply_override(json& tree, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ValidationError("--set expects key=value (got '" + assignment + "')");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &tree;
  std::stringstream parts(key);
  std::string part;
  std::vector<std::string> path;
  while (std::getline(parts, part, '.')) {
    if (part.empty()) throw ValidationError("--set key '" + key + "' has an empty component");
    path.push_back(part);
  }
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    if (!node->is_object()) throw ValidationError("--set key '" + key + "' descends into a non-object");
    node = &(*node)[path[i]];
    if (node->is_null()) *node = json::object();
  }
  if (!node->is_object()) throw ValidationError("--set key '" + key + "' descends into a non-object");
  (*node)[path.back()] = value;
}

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
};

RunConfig load_run_config(const Common& c) {
  json tree = json::object();
  if (!c.config.empty()) {
    if (!fs::exists(c.config)) throw IoError("missing config file " + c.config);
    tree = io::parse_json(io::read_text(c.config), c.config);
    if (!tree.is_object()) throw ValidationError("config file must hold a JSON object");
  }
  for (const std::string& s : c.sets) apply_override(tree, s);
  if (c.seed) tree["seed"] = *c.seed;
  RunConfig rc = run_config_from_json(tree);
  rc.resolve();
  return rc;
}

fs::path output_root(const RunConfig& rc) {
  if (const char* env = std::getenv("SM3_OUTPUT_ROOT"); env != nullptr && *env != '\0') return env;
  return rc.output_root;
}

fs::path sibling(const fs::path& path, const std::string& suffix) {
  return path.parent_path() / (path.stem().string() + suffix);
}

/// Collects log lines and mirrors them to stdout.
class RunLog {
 public:
  explicit RunLog(std::ostream& out) : out_(out) {}

  void add(const std::string& line) {
    lines_ += line + "\n";
    out_ << line << '\n';
  }
  void write(const fs::path& path) const { io::write_text(path, lines_); }

 private:
  std::ostream& out_;
  std::string lines_;
};

/// Resolved paths and logging shared by every subcommand.
class Command {
 public:
  Command(const Common& common, const std::string& name, const std::string& default_out, std::ostream& out)
      : config_(load_run_config(common)), root_(output_root(config_)), log_(out), name_(name) {
    out_ = resolve(common.out.empty() ? default_out : common.out);
    log_.add("command " + name);
  }

  const RunConfig& config() const { return config_; }
  const fs::path& out() const { return out_; }
  RunLog& log() { return log_; }

  fs::path resolve(const std::string& p) const {
    fs::path path(p);
    return path.is_absolute() ? path : root_ / path;
  }

  /// Resolves an input path, logs its checksum and refuses to overwrite it.
  fs::path input(const std::string& role, const std::string& p) {
    fs::path path = resolve(p);
    if (!fs::exists(path)) throw IoError("missing " + role + " " + path.string());
    if (fs::weakly_canonical(path) == fs::weakly_canonical(out_)) {
      throw ValidationError("output path equals the " + role + " input");
    }
    inputs_[role] = {{"path", p}, {"sha256", io::sha256_file(path)}};
    log_.add("input " + role + " " + p + " sha256=" + inputs_[role]["sha256"].get<std::string>());
    return path;
  }

  const json& inputs() const { return inputs_; }

  /// Writes the resolved-config snapshot and the log beside the output.
  void finish() {
    json snapshot{{"command", name_}, {"config", to_json(config_)}, {"inputs", inputs_}};
    io::write_text(sibling(out_, ".config.json"), snapshot.dump(2) + "\n");
    log_.add("wrote " + out_.filename().string());
    log_.write(sibling(out_, ".log"));
  }

 private:
  RunConfig config_;
  fs::path root_;
  RunLog log_;
  std::string name_;
  fs::path out_;
  json inputs_ = json::object();
};

std::string fixed(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

std::string checkpoint_name(const Checkpoint& ck) {
  std::string name(to_string(ck.network.mm_strategy()));
  if (ck.network.ml_strategy()) name += "+" + std::string(to_string(*ck.network.ml_strategy()));
  return name;
}

Network random_network(const RunConfig& rc, const Dataset& ds) {
  Network net(model_for_dataset(rc.train.model, ds), rc.train.mm_strategy);
  net.initialize(derive_seed(rc.train.seed, "init"));
  return net;
}

void write_json(const fs::path& path, const json& j) { io::write_text(path, j.dump(2) + "\n"); }

int cmd_generate(const Common& common, std::ostream& out) {
  Command cmd(common, "generate-data", "dataset.json", out);
  Dataset ds = generate(cmd.config().generator);
  save_dataset(ds, cmd.out());
  cmd.log().add("samples " + std::to_string(ds.size()) + " train " + std::to_string(ds.train.size()) + " val " +
                std::to_string(ds.val.size()) + " test " + std::to_string(ds.test.size()));
  cmd.finish();
  return kExitOk;
}

int cmd_pretrain_mm(const Common& common, const std::string& data, const std::string& strategy, std::ostream& out) {
  Command cmd(common, "pretrain-mm", "stage1.json", out);
  Dataset ds = load_dataset(cmd.input("dataset", data));
  TrainConfig tc = cmd.config().train;
  if (!strategy.empty()) tc.mm_strategy = parse_mm_strategy(strategy);
  Checkpoint ck = pretrain_mm(ds, tc, [&](const std::string& line) { cmd.log().add(line); });
  save_checkpoint(ck, cmd.out());
  write_loss_csv(ck, sibling(cmd.out(), ".loss.csv"));
  cmd.finish();
  return kExitOk;
}

int cmd_pretrain_ml(const Common& common, const std::string& data, const std::string& stage1,
                    const std::string& strategy, std::ostream& out) {
  Command cmd(common, "pretrain-ml", "stage2.json", out);
  Dataset ds = load_dataset(cmd.input("dataset", data));
  Checkpoint s1 = load_checkpoint(cmd.input("stage1", stage1));
  TrainConfig tc = cmd.config().train;
  if (!strategy.empty()) tc.ml_strategy = parse_ml_strategy(strategy);
  PseudoLabelSet labels;
  Checkpoint ck = pretrain_ml(ds, s1, tc, [&](const std::string& line) { cmd.log().add(line); }, &labels);
  save_checkpoint(ck, cmd.out());
  write_loss_csv(ck, sibling(cmd.out(), ".loss.csv"));
  write_pseudolabel_csv(labels, sibling(cmd.out(), ".pseudolabels.csv"));
  cmd.finish();
  return kExitOk;
}

int cmd_classify(const Common& common, const std::string& data, const std::string& ckpt, bool full, std::ostream& out) {
  const char* name = full ? "finetune" : "probe";
  Command cmd(common, name, std::string(name) + ".json", out);
  Dataset ds = load_dataset(cmd.input("dataset", data));
  std::string label = "random";
  std::optional<Network> net;
  if (!ckpt.empty()) {
    Checkpoint ck = load_checkpoint(cmd.input("checkpoint", ckpt));
    label = checkpoint_name(ck);
    net = std::move(ck.network);
  } else {
    net = random_network(cmd.config(), ds);
  }
  const RunConfig& rc = cmd.config();
  ProbeResult r = full ? finetune(*net, ds, rc.eval, rc.train) : linear_probe(*net, ds, rc.eval, rc.train);
  for (std::size_t e = 0; e < r.report.loss_history.size(); ++e) {
    cmd.log().add(std::string(name) + " epoch " + std::to_string(e + 1) + " l_ce=" + fixed(r.report.loss_history[e]));
  }
  cmd.log().add("macro_auc=" + fixed(r.report.macro_auc) + " macro_sensitivity=" + fixed(r.report.macro_sensitivity) +
                " macro_specificity=" + fixed(r.report.macro_specificity) +
                " macro_precision=" + fixed(r.report.macro_precision));
  write_json(cmd.out(), {{"format", "sm3-metrics"},
                         {"version", 1},
                         {"protocol", name},
                         {"name", label},
                         {"inputs", cmd.inputs()},
                         {"metrics", to_json(r.report)}});
  io::write_text(sibling(cmd.out(), ".csv"), metrics_csv(r.report));
  cmd.finish();
  return kExitOk;
}

int cmd_pairmatch(const Common& common, const std::string& data, const std::string& ckpt, std::ostream& out) {
  Command cmd(common, "eval-pairmatch", "pairmatch.json", out);
  Dataset ds = load_dataset(cmd.input("dataset", data));
  std::string label = "random";
  std::optional<Network> net;
  if (!ckpt.empty()) {
    Checkpoint ck = load_checkpoint(cmd.input("checkpoint", ckpt));
    label = checkpoint_name(ck);
    net = std::move(ck.network);
  } else {
    net = random_network(cmd.config(), ds);
  }
  PairMatchReport r = evaluate_pair_matching(*net, ds, cmd.config().eval.pair_queries);
  cmd.log().add("avg_rank=" + fixed(r.avg_rank) + " acc_at_1=" + fixed(r.acc_at_1) + " acc_at_5=" + fixed(r.acc_at_5) +
                " m=" + std::to_string(r.m));
  write_json(cmd.out(), {{"format", "sm3-pairmatch"},
                         {"version", 1},
                         {"name", label},
                         {"inputs", cmd.inputs()},
                         {"pair_match", to_json(r)}});
  cmd.finish();
  return kExitOk;
}

int cmd_report(const Common& common, const std::vector<std::string>& inputs, std::ostream& out) {
  Command cmd(common, "report", "report.json", out);
  const char* columns[] = {"avg_rank", "acc_at_1", "acc_at_5", "macro_auc", "macro_sensitivity",
                           "macro_specificity", "macro_precision"};
  json rows = json::array();
  std::ostringstream csv;
  csv << std::setprecision(17) << "name,kind";
  for (const char* c : columns) csv << ',' << c;
  csv << '\n';
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    fs::path path = cmd.input("report" + std::to_string(i + 1), inputs[i]);
    json j = io::parse_json(io::read_text(path), path.string());
    std::string format = j.is_object() ? j.value("format", "") : "";
    json row{{"name", j.value("name", path.stem().string())}, {"source", inputs[i]}};
    if (format == "sm3-pairmatch") {
      row["kind"] = "pairmatch";
      for (const char* c : {"avg_rank", "acc_at_1", "acc_at_5"}) row[c] = j.at("pair_match").at(c);
    } else if (format == "sm3-metrics") {
      row["kind"] = j.value("protocol", "metrics");
      for (const char* c : {"macro_auc", "macro_sensitivity", "macro_specificity", "macro_precision"}) {
        row[c] = j.at("metrics").at(c);
      }
    } else {
      throw FormatError(path.string() + " is neither a pair-matching nor a metrics report");
    }
    csv << row["name"].get<std::string>() << ',' << row["kind"].get<std::string>();
    for (const char* c : columns) {
      csv << ',';
      if (row.contains(c)) csv << row[c].get<double>();
    }
    csv << '\n';
    cmd.log().add("row " + row["name"].get<std::string>() + " (" + row["kind"].get<std::string>() + ")");
    rows.push_back(row);
  }
  write_json(cmd.out(), {{"format", "sm3-report"}, {"version", 1}, {"inputs", cmd.inputs()}, {"rows", rows}});
  io::write_text(sibling(cmd.out(), ".csv"), csv.str());
  cmd.finish();
  return kExitOk;
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "JSON run configuration");
  sub->add_option("--set", c.sets, "Override a setting, e.g. train.stage1.epochs=20 (repeatable)");
  sub->add_option("--seed", c.seed, "Run seed (overrides the config)");
  sub->add_option("--out", c.out, "Output file (relative paths resolve against the output root)");
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Two-stage multi-modality, multi-label self-supervised pretraining toolkit", "sm3"};
  app.require_subcommand(1);
  Common common;
  std::string data, ckpt, stage1, strategy;
  std::vector<std::string> inputs;

  auto* gen = app.add_subcommand("generate-data", "Write a synthetic paired dataset");
  add_common(gen, common);
  auto* mm = app.add_subcommand("pretrain-mm", "Stage 1: multi-modality contrastive pretraining");
  add_common(mm, common);
  mm->add_option("--data", data, "Dataset manifest")->required();
  mm->add_option("--strategy", strategy, "simclr | concat | sep_shared | sep_sep");
  auto* ml = app.add_subcommand("pretrain-ml", "Stage 2: pseudo-multi-label pretraining");
  add_common(ml, common);
  ml->add_option("--data", data, "Dataset manifest")->required();
  ml->add_option("--stage1", stage1, "Stage-1 checkpoint")->required();
  ml->add_option("--strategy", strategy, "no_proj | proj | msa | tel | te");
  auto* probe = app.add_subcommand("probe", "Linear probe with frozen encoders");
  add_common(probe, common);
  probe->add_option("--data", data, "Dataset manifest")->required();
  probe->add_option("--ckpt", ckpt, "Checkpoint (omit for randomly initialized encoders)");
  auto* ft = app.add_subcommand("finetune", "Fine-tune every parameter");
  add_common(ft, common);
  ft->add_option("--data", data, "Dataset manifest")->required();
  ft->add_option("--ckpt", ckpt, "Checkpoint (omit for randomly initialized encoders)");
  auto* pm = app.add_subcommand("eval-pairmatch", "Cross-modality pair matching on held-out pairs");
  add_common(pm, common);
  pm->add_option("--data", data, "Dataset manifest")->required();
  pm->add_option("--ckpt", ckpt, "Checkpoint (omit for randomly initialized encoders)");
  auto* rep = app.add_subcommand("report", "Merge metric and pair-matching reports into one table");
  add_common(rep, common);
  rep->add_option("--inputs", inputs, "Report JSON files")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "sm3: " << e.what() << '\n';
    return kExitValidation;
  }

  try {
    if (gen->parsed()) return cmd_generate(common, out);
    if (mm->parsed()) return cmd_pretrain_mm(common, data, strategy, out);
    if (ml->parsed()) return cmd_pretrain_ml(common, data, stage1, strategy, out);
    if (probe->parsed()) return cmd_classify(common, data, ckpt, false, out);
    if (ft->parsed()) return cmd_classify(common, data, ckpt, true, out);
    if (pm->parsed()) return cmd_pairmatch(common, data, ckpt, out);
    if (rep->parsed()) return cmd_report(common, inputs, out);
  } catch (const std::exception& e) {
    err << "sm3: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return kExitError;
}

}  // namespace sm3
