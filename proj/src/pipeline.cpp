#include "advg/pipeline.hpp"

#include <cstdio>
#include <cstdlib>
#include <functional>
#include <optional>
#include <ostream>
#include <set>

#include <nlohmann/json.hpp>

#include "advg/errors.hpp"
#include "advg/eval.hpp"
#include "advg/io_util.hpp"
#include "advg/rng.hpp"

namespace advg {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {
std::string fmt_short(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}
}  // namespace

std::string DefenseSpec::tag() const {
  switch (kind) {
    case Kind::none: return "none";
    case Kind::distill: return "distill:T=" + fmt_short(temperature);
    case Kind::decay: return "decay:D=" + fmt_short(decay);
    case Kind::ensemble: return "ensemble:E=" + std::to_string(ensemble);
  }
  return "none";
}

DefenseSpec DefenseSpec::parse(const std::string& text) {
  DefenseSpec d;
  if (text == "none") {
    d.kind = Kind::none;
    return d;
  }
  if (text.rfind("distill:T=", 0) == 0) {
    d.kind = Kind::distill;
    d.temperature = parse_double(text.substr(10));
    if (d.temperature < 1.0)
      throw ConfigError("defense '" + text + "': distillation temperature must be >= 1");
    return d;
  }
  if (text.rfind("decay:D=", 0) == 0) {
    d.kind = Kind::decay;
    d.decay = parse_double(text.substr(8));
    if (!(d.decay > 0.0))
      throw ConfigError("defense '" + text + "': decay coefficient must be > 0");
    return d;
  }
  if (text.rfind("ensemble:E=", 0) == 0) {
    d.kind = Kind::ensemble;
    const long long e = parse_int(text.substr(11));
    if (e < 3 || e % 2 == 0)
      throw ConfigError("defense '" + text + "': ensemble size must be odd and >= 3");
    d.ensemble = static_cast<std::uint32_t>(e);
    return d;
  }
  throw ConfigError("unknown defense '" + text +
                    "' (expected none | distill:T=.. | decay:D=.. | ensemble:E=..)");
}

std::string GridCell::name() const {
  const std::string h = "-H" + std::to_string(hidden_count);
  switch (defense.kind) {
    case DefenseSpec::Kind::none: return "baseline" + h;
    case DefenseSpec::Kind::distill:
      return "distill-T" + fmt_short(defense.temperature) + h;
    case DefenseSpec::Kind::decay: return "decay-D" + fmt_short(defense.decay) + h;
    case DefenseSpec::Kind::ensemble:
      return "ensemble-E" + std::to_string(defense.ensemble) + h;
  }
  return "baseline" + h;
}

std::vector<GridCell> plan_grid(const ExperimentConfig& cfg) {
  std::vector<GridCell> cells;
  for (const auto& d : cfg.defenses) {
    if (d.kind == DefenseSpec::Kind::ensemble) {
      // Ensembles train all members at one depth; the grid uses the first H.
      cells.push_back({d, cfg.hidden_layers.front()});
    } else {
      for (auto h : cfg.hidden_layers) cells.push_back({d, h});
    }
  }
  return cells;
}

void ExperimentConfig::validate() const {
  corpus.validate();
  if (feature_k < 1) throw ConfigError("config: feature_k must be >= 1");
  double sum = 0.0;
  for (double r : split_ratios) {
    if (!(r > 0.0)) throw ConfigError("config: split ratios must be positive");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("config: split ratios must sum to 1");
  if (hidden_layers.empty()) throw ConfigError("config: hidden_layers must be nonempty");
  for (auto h : hidden_layers)
    if (h < 1) throw ConfigError("config: hidden layer counts must be >= 1");
  if (hidden_dim < 1 || projected_dim < 1)
    throw ConfigError("config: hidden_dim and projected_dim must be >= 1");
  if (defenses.empty()) throw ConfigError("config: defense list must be nonempty");
  if (attack_budget < 1) throw ConfigError("config: attack_budget must be >= 1");
  if (strategies.empty()) throw ConfigError("config: strategy list must be nonempty");
  train.validate();
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("experiment config: ") + e.what());
  }
  ExperimentConfig c;
  try {
    c.corpus = CorpusSpec::from_json_text(j.at("corpus").dump());
    c.feature_k = j.value("feature_k", c.feature_k);
    if (j.contains("split_ratios")) {
      const auto r = j.at("split_ratios").get<std::vector<double>>();
      if (r.size() != 3) throw ConfigError("config: split_ratios needs 3 entries");
      c.split_ratios = {r[0], r[1], r[2]};
    }
    if (j.contains("hidden_layers"))
      c.hidden_layers = j.at("hidden_layers").get<std::vector<std::uint32_t>>();
    c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
    c.projected_dim = j.value("projected_dim", c.projected_dim);
    if (j.contains("defenses")) {
      c.defenses.clear();
      for (const auto& d : j.at("defenses"))
        c.defenses.push_back(DefenseSpec::parse(d.get<std::string>()));
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      c.train.initial_step = t.value("initial_step", c.train.initial_step);
      c.train.min_step = t.value("min_step", c.train.min_step);
      c.train.max_epochs = t.value("max_epochs", c.train.max_epochs);
      c.train.batch_size = t.value("batch_size", c.train.batch_size);
      c.train.dropout_rate = t.value("dropout_rate", c.train.dropout_rate);
    }
    c.attack_budget = j.value("attack_budget", c.attack_budget);
    if (j.contains("attack_strategies")) {
      c.strategies.clear();
      for (const auto& s : j.at("attack_strategies")) {
        const auto name = s.get<std::string>();
        if (name == "all") {
          c.strategies = all_strategies();
          break;
        }
        c.strategies.push_back(strategy_from_name(name));
      }
    }
    c.max_attack_samples = j.value("max_attack_samples", c.max_attack_samples);
    c.master_seed = j.value("seed", c.master_seed);
    c.out_dir = j.value("out_dir", c.out_dir);
  } catch (const json::exception& e) {
    throw ParseError(std::string("experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

json config_to_json(const ExperimentConfig& c) {
  json j;
  j["corpus"] = json::parse(c.corpus.to_json_text());
  j["feature_k"] = c.feature_k;
  j["split_ratios"] = {c.split_ratios[0], c.split_ratios[1], c.split_ratios[2]};
  j["hidden_layers"] = c.hidden_layers;
  j["hidden_dim"] = c.hidden_dim;
  j["projected_dim"] = c.projected_dim;
  json defenses = json::array();
  for (const auto& d : c.defenses) defenses.push_back(d.tag());
  j["defenses"] = defenses;
  j["train"] = {{"initial_step", c.train.initial_step},
                {"min_step", c.train.min_step},
                {"max_epochs", c.train.max_epochs},
                {"batch_size", c.train.batch_size},
                {"dropout_rate", c.train.dropout_rate}};
  j["attack_budget"] = c.attack_budget;
  json strategies = json::array();
  for (auto s : c.strategies) strategies.push_back(strategy_name(s));
  j["attack_strategies"] = strategies;
  j["max_attack_samples"] = c.max_attack_samples;
  j["seed"] = c.master_seed;
  j["out_dir"] = c.out_dir;
  return j;
}

}  // namespace

std::string ExperimentConfig::to_json_text() const {
  return config_to_json(*this).dump(2) + "\n";
}

namespace {

// Stage bookkeeping: fingerprint matching against the previous manifest,
// output hash verification, and forced re-execution when an upstream stage
// ran in this invocation.
class StageRunner {
 public:
  StageRunner(fs::path out_dir, std::ostream& log) : out_dir_(std::move(out_dir)), log_(log) {
    const fs::path manifest_path = out_dir_ / "manifest.json";
    if (fs::exists(manifest_path)) {
      try {
        prev_ = json::parse(read_text_file(manifest_path));
      } catch (...) {
        prev_ = json::object();  // unreadable manifest: recompute everything
      }
    } else {
      prev_ = json::object();
    }
    stages_ = json::object();
  }

  bool run(const std::string& name, std::uint64_t fingerprint,
           const std::vector<std::string>& outputs, bool force,
           const std::function<void()>& body) {
    const std::string fp = hash_hex(fingerprint);
    if (!force && can_skip(name, fp, outputs)) {
      log_ << "[skip] " << name << "\n";
      record(name, fp, outputs, /*executed=*/false);
      statuses.push_back({name, false, true});
      return false;
    }
    log_ << "[run ] " << name << "\n";
    try {
      body();
    } catch (const std::exception& e) {
      json entry;
      entry["fingerprint"] = fp;
      entry["status"] = "invalid";
      entry["error"] = e.what();
      stages_[name] = entry;
      statuses.push_back({name, true, false});
      save_manifest();
      log_ << "[fail] " << name << ": " << e.what() << "\n";
      throw;
    }
    record(name, fp, outputs, /*executed=*/true);
    statuses.push_back({name, true, true});
    return true;
  }

  void finalize(std::uint64_t master_seed, const std::string& config_hash) {
    manifest_["tool"] = "advgauntlet";
    manifest_["format_version"] = 1;
    manifest_["master_seed"] = master_seed;
    manifest_["config_hash"] = config_hash;
    manifest_["stages"] = stages_;
    save_manifest();
  }

  std::vector<StageStatus> statuses;

 private:
  bool can_skip(const std::string& name, const std::string& fp,
                const std::vector<std::string>& outputs) const {
    if (!prev_.contains("stages") || !prev_["stages"].contains(name)) return false;
    const json& entry = prev_["stages"][name];
    if (entry.value("status", "") != "ok") return false;
    if (entry.value("fingerprint", "") != fp) return false;
    if (!entry.contains("outputs")) return false;
    for (const auto& rel : outputs) {
      const fs::path p = out_dir_ / rel;
      if (!fs::exists(p)) return false;
      if (!entry["outputs"].contains(rel)) return false;
      if (entry["outputs"][rel].get<std::string>() != hash_file_hex(p)) return false;
    }
    return true;
  }

  void record(const std::string& name, const std::string& fp,
              const std::vector<std::string>& outputs, bool executed) {
    json entry;
    entry["fingerprint"] = fp;
    entry["status"] = "ok";
    json out = json::object();
    for (const auto& rel : outputs) out[rel] = hash_file_hex(out_dir_ / rel);
    entry["outputs"] = out;
    stages_[name] = entry;
    (void)executed;
  }

  void save_manifest() {
    json m = manifest_;
    m["tool"] = "advgauntlet";
    m["format_version"] = 1;
    m["stages"] = stages_;
    if (manifest_.contains("master_seed")) m["master_seed"] = manifest_["master_seed"];
    if (manifest_.contains("config_hash")) m["config_hash"] = manifest_["config_hash"];
    write_text_file(out_dir_ / "manifest.json", m.dump(2) + "\n");
  }

  fs::path out_dir_;
  std::ostream& log_;
  json prev_;
  json stages_;
  json manifest_ = json::object();
};

std::string describe_train_cfg(const ExperimentConfig& cfg) {
  std::string s;
  s += fmt_double(cfg.train.initial_step) + "|" + fmt_double(cfg.train.min_step) +
       "|" + std::to_string(cfg.train.max_epochs) + "|" +
       std::to_string(cfg.train.batch_size) + "|" +
       fmt_double(cfg.train.dropout_rate) + "|" + std::to_string(cfg.hidden_dim) +
       "|" + std::to_string(cfg.projected_dim);
  return s;
}

}  // namespace

PipelineResult run_pipeline(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();

  fs::path out_dir = cfg.out_dir;
  if (const char* env = std::getenv("ADVGAUNTLET_OUT_DIR"); env && *env)
    out_dir = env;
  fs::create_directories(out_dir);
  fs::create_directories(out_dir / "features");
  fs::create_directories(out_dir / "models");
  fs::create_directories(out_dir / "attacks");
  fs::create_directories(out_dir / "eval");
  fs::create_directories(out_dir / "report");

  // The config hash excludes the output directory so runs into different
  // directories from one config are byte-identical.
  json cfg_json = config_to_json(cfg);
  cfg_json.erase("out_dir");
  const std::string config_hash = hash_hex(fnv1a64(cfg_json.dump()));

  const std::uint64_t master = cfg.master_seed;
  StageRunner runner(out_dir, log);

  // --- corpus ---------------------------------------------------------------
  CorpusSpec corpus_spec = cfg.corpus;
  corpus_spec.seed = derive_seed(master, "corpus");
  const bool corpus_ran =
      runner.run("corpus", fnv1a64("corpus-v1|" + corpus_spec.to_json_text()),
                 {"corpus.jsonl"}, /*force=*/false, [&] {
                   write_logs(generate_corpus(corpus_spec), out_dir / "corpus.jsonl");
                 });

  // --- extract ----------------------------------------------------------------
  const std::vector<std::string> feature_files = {
      "features/vocab.tsv", "features/train.tsv", "features/valid.tsv",
      "features/test.tsv"};
  const std::uint64_t split_seed = derive_seed(master, "split");
  const std::uint64_t extract_fp = fnv1a64(
      "extract-v1|k=" + std::to_string(cfg.feature_k) + "|ratios=" +
      fmt_double(cfg.split_ratios[0]) + "," + fmt_double(cfg.split_ratios[1]) + "," +
      fmt_double(cfg.split_ratios[2]) + "|seed=" + std::to_string(split_seed) +
      "|corpus=" + hash_file_hex(out_dir / "corpus.jsonl"));
  const bool extract_ran = runner.run(
      "extract", extract_fp, feature_files, corpus_ran, [&] {
        const auto corpus = read_logs(out_dir / "corpus.jsonl");
        const auto r = run_extract(corpus, cfg.feature_k, cfg.split_ratios, split_seed);
        r.vocab.save(out_dir / "features/vocab.tsv");
        save_dataset(r.train, out_dir / "features/train.tsv");
        save_dataset(r.valid, out_dir / "features/valid.tsv");
        save_dataset(r.test, out_dir / "features/test.tsv");
        log << "       candidates=" << r.candidate_count
            << " dup=" << r.duplicates_dropped
            << " conflicts=" << r.label_conflicts
            << " collisions=" << r.collisions_dropped << "\n";
      });

  const std::string dataset_hash =
      hash_file_hex(out_dir / "features/train.tsv") +
      hash_file_hex(out_dir / "features/valid.tsv") +
      hash_file_hex(out_dir / "features/test.tsv");

  std::optional<DataBundle> bundle;
  auto data = [&]() -> const DataBundle& {
    if (!bundle) {
      bundle = DataBundle{load_dataset(out_dir / "features/train.tsv"),
                          load_dataset(out_dir / "features/valid.tsv"),
                          load_dataset(out_dir / "features/test.tsv")};
    }
    return *bundle;
  };

  std::optional<LabeledDataset> test_split;
  auto test_data = [&]() -> const LabeledDataset& {
    if (!test_split) test_split = load_dataset(out_dir / "features/test.tsv");
    return *test_split;
  };

  // --- per-cell train / attack / eval ----------------------------------------
  const auto cells = plan_grid(cfg);
  const std::uint64_t projection_seed = derive_seed(master, "projection");
  std::vector<std::string> report_inputs;
  bool any_cell_ran = false;

  for (const auto& cell : cells) {
    const std::string name = cell.name();
    const std::string model_file = "models/" + name + ".model";

    TrainConfig tc = cfg.train;
    tc.projected_dim = cfg.projected_dim;
    tc.seed = derive_seed(master, "train", fnv1a64(name));
    tc.projection_seed = projection_seed;

    Arch arch{cell.hidden_count, cfg.hidden_dim};
    std::vector<std::string> train_outputs = {model_file};
    if (cell.defense.kind == DefenseSpec::Kind::ensemble) {
      for (std::uint32_t e = 0; e < cell.defense.ensemble; ++e)
        train_outputs.push_back("models/" + name + ".m" + std::to_string(e) +
                                ".train.csv");
    } else {
      train_outputs.push_back("models/" + name + ".train.csv");
    }

    const std::uint64_t train_fp = fnv1a64(
        "train-v1|" + name + "|" + cell.defense.tag() + "|H=" +
        std::to_string(cell.hidden_count) + "|" + describe_train_cfg(cfg) +
        "|seed=" + std::to_string(tc.seed) + "|proj=" +
        std::to_string(projection_seed) + "|data=" + dataset_hash);

    const bool trained = runner.run("train:" + name, train_fp, train_outputs,
                                    extract_ran, [&] {
      switch (cell.defense.kind) {
        case DefenseSpec::Kind::none: {
          auto r = train_baseline(data(), arch, tc);
          save_model(r.model, out_dir / model_file);
          write_text_file(out_dir / ("models/" + name + ".train.csv"),
                          epoch_log_to_csv(r.log));
          break;
        }
        case DefenseSpec::Kind::decay: {
          TrainConfig c2 = tc;
          c2.weight_decay = cell.defense.decay;
          auto r = train_baseline(data(), arch, c2);
          save_model(r.model, out_dir / model_file);
          write_text_file(out_dir / ("models/" + name + ".train.csv"),
                          epoch_log_to_csv(r.log));
          break;
        }
        case DefenseSpec::Kind::distill: {
          TrainConfig c2 = tc;
          c2.temperature = cell.defense.temperature;
          auto r = train_distilled(data(), arch, c2);
          save_model(r.model, out_dir / model_file);
          write_text_file(out_dir / ("models/" + name + ".train.csv"),
                          epoch_log_to_csv(r.log));
          break;
        }
        case DefenseSpec::Kind::ensemble: {
          auto r = train_ensemble(data(), arch, tc, cell.defense.ensemble);
          save_ensemble(r.members, out_dir / model_file);
          for (std::size_t e = 0; e < r.logs.size(); ++e)
            write_text_file(out_dir / ("models/" + name + ".m" +
                                       std::to_string(e) + ".train.csv"),
                            epoch_log_to_csv(r.logs[e]));
          break;
        }
      }
    });
    any_cell_ran = any_cell_ran || trained;

    const std::string model_hash = hash_file_hex(out_dir / model_file);

    // Attack stage.
    std::string strategy_tags;
    for (auto s : cfg.strategies) strategy_tags += std::string(strategy_name(s)) + ",";
    const std::uint64_t attack_seed = derive_seed(master, "attack", fnv1a64(name));
    const std::vector<std::string> attack_outputs = {
        "attacks/" + name + ".traces.jsonl", "attacks/" + name + ".success.csv",
        "attacks/" + name + ".success.svg"};
    const std::uint64_t attack_fp = fnv1a64(
        "attack-v1|" + name + "|budget=" + std::to_string(cfg.attack_budget) +
        "|cap=" + std::to_string(cfg.max_attack_samples) + "|strategies=" +
        strategy_tags + "|seed=" + std::to_string(attack_seed) + "|model=" +
        model_hash + "|data=" + dataset_hash);
    const bool attacked = runner.run("attack:" + name, attack_fp, attack_outputs,
                                     trained, [&] {
      const auto target = load_target(out_dir / model_file);
      const auto& test = test_data();
      std::vector<SparseBinaryVector> malware;
      for (std::size_t i = 0; i < test.size(); ++i)
        if (test.labels[i]) {
          malware.push_back(test.vectors[i]);
          if (cfg.max_attack_samples && malware.size() >= cfg.max_attack_samples)
            break;
        }
      const auto campaign = run_campaign(target, malware, cfg.strategies,
                                         cfg.attack_budget, attack_seed);
      write_text_file(out_dir / attack_outputs[0], traces_to_jsonl(campaign.traces));
      write_text_file(out_dir / attack_outputs[1], campaign_to_csv(campaign));
      std::vector<Series> series;
      for (const auto& [strategy, rates] : campaign.success_rate) {
        Series s;
        s.label = strategy_name(strategy);
        for (std::size_t k = 0; k < rates.size(); ++k)
          s.points.push_back({static_cast<double>(k + 1), rates[k]});
        series.push_back(std::move(s));
      }
      emit_series_svg(series, "crafting success: " + name, "iteration",
                      "success rate", out_dir / attack_outputs[2]);
    });

    // Eval stage.
    const std::vector<std::string> eval_outputs = {
        "eval/" + name + ".roc.csv", "eval/" + name + ".roc.svg",
        "eval/" + name + ".summary.csv"};
    const std::uint64_t eval_fp = fnv1a64("eval-v1|" + name + "|model=" +
                                          model_hash + "|data=" + dataset_hash);
    const bool evaled = runner.run("eval:" + name, eval_fp, eval_outputs, trained,
                                   [&] {
      const auto target = load_target(out_dir / model_file);
      const auto& test = test_data();
      const auto scored = score_dataset(target, test);
      const RocCurve curve = roc(scored);
      emit_roc_csv(curve, out_dir / eval_outputs[0]);
      emit_roc_svg(curve, "ROC: " + name, out_dir / eval_outputs[1]);
      const double err = test_error_pct(target, test);
      const auto [tpr, thr] = tpr_at_fpr(curve, 1e-4);
      std::string csv = "model,defense,H,test_error_pct,tpr_at_1e-4\n";
      csv += name + "," + target[0].defense + "," +
             std::to_string(cell.hidden_count) + "," + fmt_double(err) + "," +
             fmt_double(tpr) + "\n";
      (void)thr;
      write_text_file(out_dir / eval_outputs[2], csv);
    });
    any_cell_ran = any_cell_ran || attacked || evaled;

    report_inputs.push_back("attacks/" + name + ".success.csv");
    report_inputs.push_back("eval/" + name + ".summary.csv");
  }

  // --- report -----------------------------------------------------------------
  std::string report_src_hash;
  for (const auto& rel : report_inputs) report_src_hash += hash_file_hex(out_dir / rel);
  const std::uint64_t report_fp = fnv1a64("report-v1|" + report_src_hash);
  runner.run("report", report_fp,
             {"report/summary.csv", "report/success_at_budget.csv"}, any_cell_ran,
             [&] {
    std::string summary = "model,defense,H,test_error_pct,tpr_at_1e-4\n";
    std::string success = "model,strategy,success_rate\n";
    for (const auto& cell : cells) {
      const std::string name = cell.name();
      const auto rows = split(read_text_file(out_dir / ("eval/" + name +
                                                        ".summary.csv")), '\n');
      if (rows.size() >= 2 && !rows[1].empty()) summary += rows[1] + "\n";
      const auto lines =
          split(read_text_file(out_dir / ("attacks/" + name + ".success.csv")), '\n');
      for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        const auto f = split(lines[i], ',');
        if (f.size() == 3 && f[1] == std::to_string(cfg.attack_budget))
          success += name + "," + f[0] + "," + f[2] + "\n";
      }
    }
    write_text_file(out_dir / "report/summary.csv", summary);
    write_text_file(out_dir / "report/success_at_budget.csv", success);
  });

  runner.finalize(master, config_hash);

  PipelineResult result;
  result.out_dir = out_dir;
  result.stages = runner.statuses;
  return result;
}

}  // namespace advg
