#include "pcpetl/commands.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "pcpetl/accounting.hpp"
#include "pcpetl/checkpoint.hpp"
#include "pcpetl/errors.hpp"
#include "pcpetl/pcb_io.hpp"

namespace pcpetl {

namespace fs = std::filesystem;

namespace {

std::string sample_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05zu.pcb", i);
  return buf;
}

std::uint64_t path_id(const std::string& s) { return name_stream(s); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
  if (!f) throw DataError("failed writing " + path.string());
}

std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_dataset_dir(const fs::path& dir, const Dataset& data, const RunConfig& cfg) {
  std::error_code ec;
  fs::create_directories(dir / "train", ec);
  if (!ec) fs::create_directories(dir / "test", ec);
  if (ec) throw DataError("cannot create dataset directory " + dir.string() + ": " + ec.message());
  std::vector<ManifestEntry> manifest;
  auto emit = [&](const std::vector<PointCloud>& clouds, const std::string& split) {
    for (std::size_t i = 0; i < clouds.size(); ++i) {
      const std::string rel = split + "/" + sample_name(i);
      write_pcb(dir / rel, clouds[i]);
      manifest.push_back({rel, clouds[i].label});
    }
  };
  emit(data.train, "train");
  emit(data.test, "test");
  write_manifest(dir / "manifest.txt", manifest);
  std::string spec = "seed = " + std::to_string(cfg.seed) + "\n";
  for (const auto& [k, v] : cfg.values())
    if (k.starts_with("data.")) spec += k + " = " + v + "\n";
  write_text(dir / "spec.cfg", spec);
}

Dataset load_dataset_dir(const fs::path& dir) {
  Dataset d;
  for (const auto& e : read_manifest(dir / "manifest.txt")) {
    PointCloud c = read_pcb(dir / e.path);
    if (c.label != e.label) {
      throw DataError(e.path + ": label " + std::to_string(c.label) + " disagrees with manifest label " +
                      std::to_string(e.label));
    }
    c.sample_id = path_id(e.path);
    if (e.path.starts_with("train/")) {
      d.train.push_back(std::move(c));
    } else if (e.path.starts_with("test/")) {
      d.test.push_back(std::move(c));
    } else {
      throw DataError(e.path + ": manifest paths must start with train/ or test/");
    }
  }
  if (d.train.empty()) throw DataError(dir.string() + ": no training samples in manifest");
  return d;
}

std::string scale_stats_csv(const std::vector<std::vector<ScaleRecord>>& batches) {
  std::string out = "batch,layer,mean_scale,adjusted_ratio\n";
  for (std::size_t b = 0; b < batches.size(); ++b) {
    for (std::size_t l = 0; l < batches[b].size(); ++l) {
      out += std::to_string(b) + "," + std::to_string(l + 1) + "," + fmt_real(batches[b][l].mean_scale) + "," +
             fmt_real(batches[b][l].adjusted_ratio) + "\n";
    }
  }
  return out;
}

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string data;

  RunConfig load() const { return load_run_config(config, overrides); }

  Dataset dataset(const RunConfig& cfg) const {
    if (!data.empty()) return load_dataset_dir(data);
    return build_dataset(cfg.dataset_spec());
  }
};

void add_common(CLI::App* cmd, Common& c, bool with_data = true) {
  cmd->add_option("-c,--config", c.config, "config file of `key = value` lines");
  cmd->add_option("--set", c.overrides, "override one key (key=value); repeatable");
  if (with_data) cmd->add_option("--data", c.data, "dataset directory from `gen` (default: generate in memory)");
}

void write_report(const std::string& path, const RunReport& report, const RunConfig& cfg) {
  if (!path.empty()) write_text(path, report.to_jsonl(cfg.values()));
}

void print_summary(std::ostream& out, const RunReport& r) {
  out << std::fixed << std::setprecision(4) << "final train accuracy " << r.final_train_accuracy;
  if (r.final_test_accuracy) out << "  test accuracy " << *r.final_test_accuracy;
  out << "\ntunable " << r.counts.tunable << " / " << r.counts.total << " (" << std::setprecision(3)
      << 100.0 * r.counts.ratio << "%)  wall " << std::setprecision(1) << r.wall_seconds << " s\n";
  out.unsetf(std::ios::floatfield);
}

const std::vector<PointCloud>& pick_split(const Dataset& d, const std::string& split) {
  if (split == "train") return d.train;
  if (split == "test") return d.test;
  throw ConfigError("--split must be train or test, got '" + split + "'");
}

// Full checkpoint alone: load everything. With a delta: the full checkpoint
// provides the pristine backbone, the delta everything tuned.
void load_weights(Model& model, const std::string& ckpt, const std::string& delta) {
  const ConfigHash hash = config_hash(model.config());
  Checkpoint full = read_checkpoint(ckpt);
  if (full.mode != CheckpointMode::Full) throw ConfigError(ckpt + " is a delta checkpoint; pass it via --delta");
  if (delta.empty()) {
    load_checkpoint(full, model.store(), hash);
    return;
  }
  load_checkpoint(full, model.store(), hash, {"backbone.", false});
  load_checkpoint(read_checkpoint(delta), model.store(), hash);
}

void load_backbone(Model& model, const std::string& ckpt) {
  Checkpoint full = read_checkpoint(ckpt);
  if (full.mode != CheckpointMode::Full) throw ConfigError(ckpt + " is not a full checkpoint");
  if (load_checkpoint(full, model.store(), config_hash(model.config()), {"backbone.", false}) == 0) {
    throw ConfigError(ckpt + " holds no backbone tensors");
  }
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Parameter-efficient transfer learning on point-cloud transformers"};
  app.require_subcommand(1);
  app.footer(config_keys_help());
  app.set_help_all_flag("--help-all", "help for every subcommand");

  Common common;
  std::string out_path, report_path, ckpt_path, delta_path, split = "test";
  bool large_scale = false;
  std::size_t batch_size = 0;

  auto* gen = app.add_subcommand("gen", "generate a dataset directory");
  add_common(gen, common, false);
  gen->add_option("-o,--out", out_path, "output directory")->required();

  auto* pretrain = app.add_subcommand("pretrain", "train a backbone and write a full checkpoint");
  add_common(pretrain, common);
  pretrain->add_option("-o,--out", out_path, "checkpoint path")->required();
  pretrain->add_option("--report", report_path, "JSON-lines run report");

  auto* finetune = app.add_subcommand("finetune", "fine-tune from a backbone and write a delta checkpoint");
  add_common(finetune, common);
  finetune->add_option("--backbone", ckpt_path, "full checkpoint with pretrained backbone")->required();
  finetune->add_option("-o,--out", out_path, "delta checkpoint path")->required();
  finetune->add_option("--report", report_path, "JSON-lines run report");

  auto* eval = app.add_subcommand("eval", "evaluate checkpoints on a split");
  add_common(eval, common);
  eval->add_option("--checkpoint", ckpt_path, "full checkpoint")->required();
  eval->add_option("--delta", delta_path, "delta checkpoint applied on top of the backbone");
  eval->add_option("--split", split, "train or test");

  auto* fewshot = app.add_subcommand("fewshot", "n-way m-shot episodes from a pretrained backbone");
  add_common(fewshot, common);
  fewshot->add_option("--backbone", ckpt_path, "full checkpoint with pretrained backbone")->required();

  auto* count = app.add_subcommand("count", "tunable parameters, FLOPs and state per strategy");
  add_common(count, common, false);
  count->add_flag("--large-scale", large_scale, "use the L=12, d=384, r=64 configuration");

  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference check of all gradients");
  add_common(gradcheck_cmd, common, false);

  auto* stats = app.add_subcommand("scale-stats", "per-layer dynamic scale statistics as CSV");
  add_common(stats, common);
  stats->add_option("--checkpoint", ckpt_path, "full checkpoint")->required();
  stats->add_option("--delta", delta_path, "delta checkpoint");
  stats->add_option("--split", split, "train or test");
  stats->add_option("-o,--out", out_path, "CSV path (default: stdout)");
  stats->add_option("--batch-size", batch_size, "samples per evaluation batch (default: eval.batch_size)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, er;
    const int code = app.exit(e, o, er);
    out << o.str();
    err << er.str();
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    RunConfig cfg = common.load();
    if (*gen) {
      Dataset d = build_dataset(cfg.dataset_spec());
      write_dataset_dir(out_path, d, cfg);
      out << "wrote " << d.train.size() << " train and " << d.test.size() << " test samples to " << out_path << "\n";
    } else if (*pretrain) {
      Dataset d = common.dataset(cfg);
      Model model(cfg.model_config(), cfg.seed);
      RunReport r = train(model, d.train, &d.test, cfg.train_config(), &out);
      save_checkpoint(out_path, model.store(), CheckpointMode::Full, config_hash(model.config()));
      write_report(report_path, r, cfg);
      print_summary(out, r);
    } else if (*finetune) {
      Dataset d = common.dataset(cfg);
      Model model(cfg.model_config(), cfg.seed);
      load_backbone(model, ckpt_path);
      RunReport r = train(model, d.train, &d.test, cfg.train_config(), &out);
      save_checkpoint(out_path, model.store(), CheckpointMode::Delta, config_hash(model.config()));
      write_report(report_path, r, cfg);
      print_summary(out, r);
    } else if (*eval) {
      Dataset d = common.dataset(cfg);
      Model model(cfg.model_config(), cfg.seed);
      load_weights(model, ckpt_path, delta_path);
      EvalResult r = evaluate(model, pick_split(d, split), cfg.eval_batch_size);
      out << "accuracy " << fmt_real(r.accuracy()) << " (" << r.correct << "/" << r.total << ")  loss "
          << fmt_real(r.loss) << "\n";
    } else if (*fewshot) {
      Dataset d = common.dataset(cfg);
      auto make = [&](std::size_t way) {
        auto m = std::make_unique<Model>(cfg.model_config(way), cfg.seed);
        load_backbone(*m, ckpt_path);
        return m;
      };
      TrainConfig tc = cfg.train_config();
      tc.epochs = cfg.fewshot.epochs;
      tc.warmup_epochs = std::min(tc.warmup_epochs, tc.epochs ? tc.epochs - 1 : 0);
      FewShotResult r = run_fewshot(make, d.train, cfg.fewshot.way, cfg.fewshot.shot, cfg.fewshot.episodes, tc);
      out << cfg.fewshot.way << "-way " << cfg.fewshot.shot << "-shot over " << cfg.fewshot.episodes
          << " episodes: " << r.formatted() << "\n";
    } else if (*count) {
      ModelConfig base = large_scale ? large_scale_config() : cfg.model_config();
      char line[256];
      std::snprintf(line, sizeof line, "%-16s %12s %12s %9s %10s %14s %12s\n", "strategy", "tunable", "total",
                    "ratio%", "flops", "optim_bytes", "delta/full");
      out << line;
      for (Strategy s : all_strategies()) {
        ModelConfig mc = base;
        mc.petl.strategy = s;
        Model m(mc, cfg.seed);
        const TunableCount c = count_tunable(m.store());
        const double delta_ratio = static_cast<double>(checkpoint_bytes(m.store(), CheckpointMode::Delta)) /
                                   static_cast<double>(checkpoint_bytes(m.store(), CheckpointMode::Full));
        std::snprintf(line, sizeof line, "%-16s %12zu %12zu %9.3f %10.4f %14zu %12.4f\n", to_string(s).c_str(),
                      c.tunable, c.total, 100.0 * c.ratio, flop_ratio(mc), optimizer_state_bytes(m.store()),
                      delta_ratio);
        out << line;
      }
      std::snprintf(line, sizeof line, "adapter weights per layer (no biases, d=%zu, r=%zu): %zu\n",
                    base.backbone.embed_dim, base.petl.rank, adapter_weight_count(base.backbone.embed_dim, base.petl.rank));
      out << line;
    } else if (*gradcheck_cmd) {
      const auto results = run_gradcheck_suite(cfg.seed);
      const GradcheckResult* worst = nullptr;
      bool ok = true;
      char line[256];
      for (const auto& r : results) {
        std::snprintf(line, sizeof line, "%-60s %6zu  rel %.3e  %s\n", r.name.c_str(), r.elements, r.max_rel_error,
                      r.passed ? "PASS" : "FAIL");
        out << line;
        ok = ok && r.passed;
        if (!worst || r.max_rel_error > worst->max_rel_error) worst = &r;
      }
      if (worst) out << "worst: " << worst->name << " rel " << worst->max_rel_error << "\n";
      if (!ok) {
        err << "gradcheck FAILED; worst tensor " << worst->name << " with relative error " << worst->max_rel_error
            << "\n";
        return kExitNumeric;
      }
    } else if (*stats) {
      Dataset d = common.dataset(cfg);
      Model model(cfg.model_config(), cfg.seed);
      load_weights(model, ckpt_path, delta_path);
      EvalResult r = evaluate(model, pick_split(d, split), batch_size ? batch_size : cfg.eval_batch_size);
      const std::string csv = scale_stats_csv(r.batch_stats);
      if (out_path.empty()) {
        out << csv;
      } else {
        write_text(out_path, csv);
      }
    }
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitOk;
}

}  // namespace pcpetl
