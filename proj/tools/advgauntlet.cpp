// advgauntlet: behavior-log malware classification workbench.
// Subcommands cover the full workflow: gen-corpus -> extract -> train ->
// attack -> eval -> report, plus `pipeline` to run everything from one config
// with content-hash skipping.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <CLI11.hpp>

#include "advg/attack.hpp"
#include "advg/corpus.hpp"
#include "advg/errors.hpp"
#include "advg/eval.hpp"
#include "advg/features.hpp"
#include "advg/io_util.hpp"
#include "advg/model.hpp"
#include "advg/pipeline.hpp"
#include "advg/train.hpp"

namespace fs = std::filesystem;
using namespace advg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitTraining = 4;
constexpr int kExitIo = 5;

struct ArchFlag {
  std::uint32_t hidden_count = 1;
  std::uint32_t hidden_dim = 128;
};

ArchFlag parse_arch(const std::string& text) {
  // Format: H=<n>,dim=<n>
  ArchFlag a;
  for (const auto& part : split(text, ',')) {
    if (part.rfind("H=", 0) == 0)
      a.hidden_count = static_cast<std::uint32_t>(parse_int(part.substr(2)));
    else if (part.rfind("dim=", 0) == 0)
      a.hidden_dim = static_cast<std::uint32_t>(parse_int(part.substr(4)));
    else
      throw ConfigError("bad --arch component '" + part + "' (expected H=..,dim=..)");
  }
  return a;
}

DataBundle load_bundle(const fs::path& dir) {
  return {load_dataset(dir / "train.tsv"), load_dataset(dir / "valid.tsv"),
          load_dataset(dir / "test.tsv")};
}

std::vector<Strategy> parse_strategies(const std::string& text) {
  if (text == "all") return all_strategies();
  std::vector<Strategy> out;
  for (const auto& name : split(text, ','))
    out.push_back(strategy_from_name(name));
  return out;
}

int run_gen_corpus(const std::string& spec_path, const std::string& out_path) {
  const CorpusSpec spec = CorpusSpec::from_json_text(read_text_file(spec_path));
  write_logs(generate_corpus(spec), out_path);
  std::cout << "wrote " << (spec.n_malware + spec.n_benign) << " logs to "
            << out_path << "\n";
  return kExitOk;
}

int run_extract(const std::string& corpus_path, std::size_t k,
                const std::string& ratios_text, std::uint64_t seed,
                const std::string& out_dir) {
  const auto parts = split(ratios_text, ',');
  if (parts.size() != 3) throw ConfigError("--ratios expects three comma-separated values");
  std::array<double, 3> ratios{parse_double(parts[0]), parse_double(parts[1]),
                               parse_double(parts[2])};
  const auto corpus = read_logs(corpus_path);
  const auto r = run_extract(corpus, k, ratios, seed);
  fs::create_directories(out_dir);
  r.vocab.save(fs::path(out_dir) / "vocab.tsv");
  save_dataset(r.train, fs::path(out_dir) / "train.tsv");
  save_dataset(r.valid, fs::path(out_dir) / "valid.tsv");
  save_dataset(r.test, fs::path(out_dir) / "test.tsv");
  std::cout << "vocabulary " << r.vocab.dim() << " of " << r.candidate_count
            << " candidates; splits " << r.train.size() << "/" << r.valid.size()
            << "/" << r.test.size() << " (dropped " << r.duplicates_dropped
            << " duplicates, " << r.collisions_dropped << " collisions)\n";
  return kExitOk;
}

int run_train(const std::string& data_dir, const std::string& arch_text,
              const std::string& defense_text, std::uint64_t seed,
              std::uint32_t proj_dim, const TrainConfig& base,
              const std::string& out_path) {
  const ArchFlag a = parse_arch(arch_text);
  const DefenseSpec defense = DefenseSpec::parse(defense_text);
  const DataBundle data = load_bundle(data_dir);

  TrainConfig cfg = base;
  cfg.seed = seed;
  cfg.projected_dim = proj_dim;

  Arch arch{a.hidden_count, a.hidden_dim};
  const fs::path out = out_path;
  switch (defense.kind) {
    case DefenseSpec::Kind::none: {
      const auto r = train_baseline(data, arch, cfg);
      save_model(r.model, out);
      write_text_file(out.string() + ".train.csv", epoch_log_to_csv(r.log));
      break;
    }
    case DefenseSpec::Kind::decay: {
      cfg.weight_decay = defense.decay;
      const auto r = train_baseline(data, arch, cfg);
      save_model(r.model, out);
      write_text_file(out.string() + ".train.csv", epoch_log_to_csv(r.log));
      break;
    }
    case DefenseSpec::Kind::distill: {
      cfg.temperature = defense.temperature;
      const auto r = train_distilled(data, arch, cfg);
      save_model(r.model, out);
      write_text_file(out.string() + ".train.csv", epoch_log_to_csv(r.log));
      break;
    }
    case DefenseSpec::Kind::ensemble: {
      const auto r = train_ensemble(data, arch, cfg, defense.ensemble);
      save_ensemble(r.members, out);
      for (std::size_t e = 0; e < r.logs.size(); ++e)
        write_text_file(out.string() + ".m" + std::to_string(e) + ".train.csv",
                        epoch_log_to_csv(r.logs[e]));
      break;
    }
  }
  std::cout << "wrote " << out_path << "\n";
  return kExitOk;
}

int run_attack(const std::string& model_path, const std::string& data_path,
               const std::string& strategy_text, std::uint32_t budget,
               std::uint64_t seed, std::uint32_t max_samples,
               const std::string& out_dir) {
  const auto target = load_target(model_path);
  const auto data = load_dataset(data_path);
  std::vector<SparseBinaryVector> malware;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (data.labels[i]) {
      malware.push_back(data.vectors[i]);
      if (max_samples && malware.size() >= max_samples) break;
    }
  const auto strategies = parse_strategies(strategy_text);
  const auto campaign = run_campaign(target, malware, strategies, budget, seed);
  fs::create_directories(out_dir);
  write_text_file(fs::path(out_dir) / "traces.jsonl", traces_to_jsonl(campaign.traces));
  write_text_file(fs::path(out_dir) / "success.csv", campaign_to_csv(campaign));
  for (const auto& [strategy, rates] : campaign.success_rate)
    std::cout << strategy_name(strategy) << ": success at " << budget << " = "
              << rates.back() << "\n";
  return kExitOk;
}

int run_eval(const std::string& model_path, const std::string& data_path,
             const std::string& name_flag, const std::string& out_dir) {
  const auto target = load_target(model_path);
  const auto data = load_dataset(data_path);
  const std::string name =
      name_flag.empty() ? fs::path(model_path).stem().string() : name_flag;
  fs::create_directories(out_dir);
  const auto scored = score_dataset(target, data);
  const RocCurve curve = roc(scored);
  emit_roc_csv(curve, fs::path(out_dir) / (name + ".roc.csv"));
  emit_roc_svg(curve, "ROC: " + name, fs::path(out_dir) / (name + ".roc.svg"));
  const double err = test_error_pct(target, data);
  const auto [tpr, thr] = tpr_at_fpr(curve, 1e-4);
  std::string csv = "model,defense,H,test_error_pct,tpr_at_1e-4\n";
  csv += name + "," + target[0].defense + "," +
         std::to_string(target[0].hidden_count) + "," + fmt_double(err) + "," +
         fmt_double(tpr) + "\n";
  write_text_file(fs::path(out_dir) / (name + ".summary.csv"), csv);
  std::cout << name << ": test error " << err << "%, tpr@1e-4 " << tpr
            << " (threshold " << thr << ")\n";
  return kExitOk;
}

int run_report(const std::string& exp_dir) {
  const fs::path dir = exp_dir;
  std::string summary = "model,defense,H,test_error_pct,tpr_at_1e-4\n";
  std::string success = "model,strategy,success_rate\n";
  std::vector<fs::path> summaries, successes;
  if (fs::exists(dir / "eval"))
    for (const auto& e : fs::directory_iterator(dir / "eval"))
      if (e.path().extension() == ".csv" &&
          e.path().filename().string().find(".summary.") != std::string::npos)
        summaries.push_back(e.path());
  if (fs::exists(dir / "attacks"))
    for (const auto& e : fs::directory_iterator(dir / "attacks"))
      if (e.path().extension() == ".csv") successes.push_back(e.path());
  std::sort(summaries.begin(), summaries.end());
  std::sort(successes.begin(), successes.end());
  if (summaries.empty() && successes.empty())
    throw ConfigError("report: no eval/ or attacks/ results under " + exp_dir);

  for (const auto& p : summaries) {
    const auto rows = split(read_text_file(p), '\n');
    if (rows.size() >= 2 && !rows[1].empty()) summary += rows[1] + "\n";
  }
  for (const auto& p : successes) {
    const std::string model = p.filename().string().substr(
        0, p.filename().string().find(".success.csv"));
    const auto lines = split(read_text_file(p), '\n');
    // Keep only the final-iteration row per strategy.
    std::map<std::string, std::pair<long long, std::string>> last;
    for (std::size_t i = 1; i < lines.size(); ++i) {
      if (lines[i].empty()) continue;
      const auto f = split(lines[i], ',');
      if (f.size() != 3) continue;
      const long long it = parse_int(f[1]);
      auto& slot = last[f[0]];
      if (it >= slot.first) slot = {it, f[2]};
    }
    for (const auto& [strategy, row] : last)
      success += model + "," + strategy + "," + row.second + "\n";
  }
  fs::create_directories(dir / "report");
  write_text_file(dir / "report/summary.csv", summary);
  write_text_file(dir / "report/success_at_budget.csv", success);
  std::cout << "wrote " << (dir / "report").string() << "\n";
  return kExitOk;
}

int run_pipeline_cmd(const std::string& config_path, const std::string& out_override) {
  ExperimentConfig cfg = ExperimentConfig::from_json_text(read_text_file(config_path));
  if (!out_override.empty()) cfg.out_dir = out_override;
  const auto result = run_pipeline(cfg, std::cout);
  std::size_t ran = 0;
  for (const auto& s : result.stages) ran += s.executed;
  std::cout << "pipeline complete: " << result.stages.size() << " stages, " << ran
            << " executed, manifest at " << (result.out_dir / "manifest.json").string()
            << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"advgauntlet: malware classifier attack/defense workbench"};
  app.require_subcommand(1);

  int threads = 0;
  bool serial = false;
  app.add_option("--threads", threads, "OpenMP thread count (default: runtime)");
  app.add_flag("--serial", serial, "force the serial reference kernels");

  std::string spec_path, out_path, corpus_path, ratios = "0.642,0.113,0.245";
  std::uint64_t seed = 42;
  std::size_t k = 2000;

  auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic behavior-log corpus");
  gen->add_option("--spec", spec_path, "corpus spec JSON file")->required();
  gen->add_option("--out", out_path, "output JSON-lines file")->required();

  auto* ext = app.add_subcommand("extract", "feature selection and vectorization");
  ext->add_option("--corpus", corpus_path, "corpus JSON-lines file")->required();
  ext->add_option("--k", k, "feature budget (top-K by mutual information)");
  ext->add_option("--ratios", ratios, "train,valid,test split ratios");
  ext->add_option("--seed", seed, "split shuffle seed");
  ext->add_option("--out", out_path, "output directory")->required();

  std::string data_path, arch_text = "H=1,dim=128", defense_text = "none";
  std::uint32_t proj_dim = 256;
  TrainConfig train_cfg;
  auto* tr = app.add_subcommand("train", "train a model (baseline or defended)");
  tr->add_option("--data", data_path, "dataset directory from `extract`")->required();
  tr->add_option("--arch", arch_text, "architecture, e.g. H=2,dim=128");
  tr->add_option("--defense", defense_text,
                 "none | distill:T=.. | decay:D=.. | ensemble:E=..");
  tr->add_option("--seed", seed, "training seed");
  tr->add_option("--proj-dim", proj_dim, "random projection output width");
  tr->add_option("--step", train_cfg.initial_step, "initial Adam step size");
  tr->add_option("--min-step", train_cfg.min_step, "stop once the halved step falls below");
  tr->add_option("--max-epochs", train_cfg.max_epochs, "epoch cap");
  tr->add_option("--batch", train_cfg.batch_size, "minibatch size");
  tr->add_option("--dropout", train_cfg.dropout_rate, "hidden dropout rate");
  tr->add_option("--out", out_path, "model file to write")->required();

  std::string model_path, strategy_text = "all";
  std::uint32_t budget = 20, max_samples = 0;
  auto* att = app.add_subcommand("attack", "craft adversarial samples against a model");
  att->add_option("--model", model_path, "model or ensemble file")->required();
  att->add_option("--data", data_path, "dataset file; malware rows are attacked")->required();
  att->add_option("--strategy", strategy_text, "strategy name, comma list, or 'all'");
  att->add_option("--budget", budget, "max feature flips per sample");
  att->add_option("--seed", seed, "randomized-strategy seed");
  att->add_option("--max-samples", max_samples, "cap on attacked samples (0 = all)");
  att->add_option("--out", out_path, "output directory")->required();

  std::string name_flag;
  auto* ev = app.add_subcommand("eval", "ROC, operating points, test error");
  ev->add_option("--model", model_path, "model or ensemble file")->required();
  ev->add_option("--data", data_path, "dataset file")->required();
  ev->add_option("--name", name_flag, "label used in output filenames");
  ev->add_option("--out", out_path, "output directory")->required();

  std::string exp_dir;
  auto* rep = app.add_subcommand("report", "aggregate a finished experiment directory");
  rep->add_option("--exp", exp_dir, "experiment directory")->required();

  std::string config_path, out_override;
  auto* pipe = app.add_subcommand("pipeline", "run the full experiment from a config");
  pipe->add_option("--config", config_path, "experiment config JSON")->required();
  pipe->add_option("--out", out_override, "output directory override");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

#ifdef _OPENMP
  if (threads > 0) omp_set_num_threads(threads);
#endif
  if (serial) kernels::set_default_exec(kernels::Exec::serial);

  // Flag-shaped values are usage errors, not data errors.
  try {
    if (tr->parsed()) {
      parse_arch(arch_text);
      DefenseSpec::parse(defense_text);
    }
    if (att->parsed()) parse_strategies(strategy_text);
  } catch (const std::exception& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (gen->parsed()) return run_gen_corpus(spec_path, out_path);
    if (ext->parsed()) return run_extract(corpus_path, k, ratios, seed, out_path);
    if (tr->parsed())
      return run_train(data_path, arch_text, defense_text, seed, proj_dim,
                       train_cfg, out_path);
    if (att->parsed())
      return run_attack(model_path, data_path, strategy_text, budget, seed,
                        max_samples, out_path);
    if (ev->parsed()) return run_eval(model_path, data_path, name_flag, out_path);
    if (rep->parsed()) return run_report(exp_dir);
    if (pipe->parsed()) return run_pipeline_cmd(config_path, out_override);
  } catch (const TrainingError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitTraining;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
