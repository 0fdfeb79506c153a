// gfss: synthetic data, two-phase training, evaluation and inspection.
//
// Artifacts go under $GFSS_ARTIFACT_ROOT (default ./artifacts):
//   checkpoints/  logs/  reports/  previews/  data/

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gfss/dataset_io.hpp"
#include "gfss/log.hpp"
#include "gfss/pipeline.hpp"

namespace fs = std::filesystem;
using namespace gfss;

namespace {

class UsageError : public Error {
 public:
  using Error::Error;
};

struct Common {
  std::vector<std::string> configs;
  std::vector<std::string> sets;
  std::string artifacts;
  std::string name = "run";
  std::string data;
};

struct Layout {
  fs::path root;
  fs::path checkpoints() const { return root / "checkpoints"; }
  fs::path logs() const { return root / "logs"; }
  fs::path reports() const { return root / "reports"; }
  fs::path previews() const { return root / "previews"; }
  fs::path data() const { return root / "data"; }
};

Layout layout_of(const Common& c) {
  if (!c.artifacts.empty()) return {c.artifacts};
  if (const char* env = std::getenv("GFSS_ARTIFACT_ROOT"); env && *env) return {env};
  return {"artifacts"};
}

std::map<std::string, std::string> parse_sets(const std::vector<std::string>& sets) {
  std::map<std::string, std::string> out;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + s + "'");
    const std::string key = detail::trim(s.substr(0, eq));
    config_key(key);
    out[key] = s.substr(eq + 1);
  }
  return out;
}

// Files in order, later ones winning, then --set overrides.
TrainConfig build_config(const Common& c, const std::map<std::string, std::string>& extra = {}) {
  TrainConfig cfg;
  for (const auto& f : c.configs) apply_config(cfg, read_config_file(f));
  apply_config(cfg, parse_sets(c.sets));
  apply_config(cfg, extra);
  cfg.validate();
  return cfg;
}

SyntheticDataset dataset_for(const Common& c, const TrainConfig& cfg) {
  if (c.data.empty()) return generate_synthetic_dataset(cfg.dataset_spec());
  return load_dataset(c.data);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

// Mirrors log messages into logs/<name>.log as well as stderr.
class FileLog {
 public:
  FileLog(const fs::path& path) : path_(path) {
    fs::create_directories(path.parent_path());
    out_.open(path, std::ios::app);
    previous_ = log::set_sink([this](log::Level level, std::string_view msg) {
      static const char* names[] = {"debug", "info", "warning", "error"};
      out_ << "[" << names[static_cast<int>(level)] << "] " << msg << "\n";
      out_.flush();
      if (level != log::Level::debug) std::cerr << "[" << names[static_cast<int>(level)] << "] " << msg << "\n";
    });
  }
  ~FileLog() { log::set_sink(std::move(previous_)); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
  std::ofstream out_;
  log::Sink previous_;
};

void print_report(const std::string& label, const MetricsReport& r) {
  std::cout << metrics_table({{label, r}});
}

// ---------------------------------------------------------------------------

int cmd_synth(const Common& c, const std::string& out_dir) {
  const TrainConfig cfg = build_config(c);
  const Layout L = layout_of(c);
  const fs::path dir = out_dir.empty() ? L.data() / c.name : fs::path(out_dir);
  const auto ds = generate_synthetic_dataset(cfg.dataset_spec());
  save_dataset(dir, ds);
  write_text(dir / "config.cfg", config_to_text(cfg));
  std::cout << "wrote " << ds.train.size() << " train and " << ds.test.size() << " test samples to "
            << dir.string() << "\n";
  return 0;
}

int cmd_pretrain(const Common& c, long epochs) {
  std::map<std::string, std::string> extra;
  if (epochs >= 0) extra["epochs_pretrain"] = std::to_string(epochs);
  const TrainConfig cfg = build_config(c, extra);
  const Layout L = layout_of(c);
  FileLog flog(L.logs() / (c.name + ".log"));
  const auto data = prepare_fold(cfg, dataset_for(c, cfg));
  log::info("pretrain: " + std::to_string(data.base_set.size()) + " base images, " +
            std::to_string(cfg.epochs_pretrain) + " epochs, seed " + std::to_string(cfg.seed));
  TrainHooks hooks;
  double sum = 0;
  std::size_t n = 0;
  hooks.on_step = [&](const LossRecord& r) {
    sum += r.loss.total;
    ++n;
  };
  hooks.on_epoch_end = [&](std::size_t e, const GfssModel<float>&) {
    log::info("pretrain epoch " + std::to_string(e + 1) + " mean loss " + std::to_string(n ? sum / n : 0.0));
    sum = 0;
    n = 0;
  };
  TrainResult res;
  try {
    res = pretrain(data.base_set, data.taxonomy, cfg, hooks);
  } catch (const DivergenceError& e) {
    const fs::path p = L.checkpoints() / (c.name + "-pretrain-lastgood.ckpt");
    save_checkpoint(e.last_good(), p);
    log::error(std::string(e.what()) + "; saved " + p.string());
    throw;
  }
  const fs::path ck = L.checkpoints() / (c.name + "-pretrain.ckpt");
  save_checkpoint(res.checkpoint, ck);
  res.log.write_csv(L.logs() / (c.name + "-pretrain-loss.csv"));
  write_text(L.reports() / (c.name + "-pretrain-config.cfg"), config_to_text(cfg));
  const auto r = compute_metrics(evaluate_model(res.model, data.dataset.test, Phase::pretrain),
                                 data.taxonomy, cfg.background_with_base);
  std::cout << "checkpoint " << ck.string() << " (lineage " << res.checkpoint.lineage_id << ")\n"
            << "base mIoU on test " << fmt2(r.miou_base) << "\n";
  return 0;
}

int cmd_finetune(const Common& c, const std::string& from, long epochs) {
  std::map<std::string, std::string> extra;
  if (epochs >= 0) extra["epochs_finetune"] = std::to_string(epochs);
  const TrainConfig cfg = build_config(c, extra);
  const Layout L = layout_of(c);
  FileLog flog(L.logs() / (c.name + ".log"));
  const fs::path src = from.empty() ? L.checkpoints() / (c.name + "-pretrain.ckpt") : fs::path(from);
  const Checkpoint pre = load_checkpoint(src);
  const auto data = prepare_fold(cfg, dataset_for(c, cfg));
  log::info("finetune from " + src.string() + ": " + std::to_string(data.support.size()) +
            " support images, " + std::to_string(cfg.epochs_finetune) + " epochs");
  TrainHooks hooks;
  const std::size_t every = std::max<std::size_t>(1, cfg.epochs_finetune / 10);
  hooks.on_epoch_end = [&](std::size_t e, const GfssModel<float>& m) {
    if ((e + 1) % every != 0) return;
    const auto r = compute_metrics(evaluate_model(m, data.dataset.test, Phase::finetune), data.taxonomy,
                                   cfg.background_with_base);
    log::info("finetune epoch " + std::to_string(e + 1) + " base " + fmt2(r.miou_base) + " novel " +
              fmt2(r.miou_novel));
  };
  TrainResult res;
  try {
    res = finetune(pre, data.support, data.unlabeled_base, data.taxonomy, cfg, hooks);
  } catch (const DivergenceError& e) {
    const fs::path p = L.checkpoints() / (c.name + "-finetune-lastgood.ckpt");
    save_checkpoint(e.last_good(), p);
    log::error(std::string(e.what()) + "; saved " + p.string());
    throw;
  }
  const fs::path ck = L.checkpoints() / (c.name + "-finetune.ckpt");
  save_checkpoint(res.checkpoint, ck);
  res.log.write_csv(L.logs() / (c.name + "-finetune-loss.csv"));
  write_text(L.reports() / (c.name + "-finetune-config.cfg"), config_to_text(cfg));
  std::cout << "checkpoint " << ck.string() << " (lineage " << res.checkpoint.lineage_id << ", parent "
            << res.checkpoint.parent_lineage << ", " << res.calibrations << " calibrations)\n";
  print_report("test", compute_metrics(evaluate_model(res.model, data.dataset.test, Phase::finetune),
                                       data.taxonomy, cfg.background_with_base));
  return 0;
}

int cmd_evaluate(const Common& c, const std::string& checkpoint, const std::string& predictor,
                 const std::string& split) {
  const TrainConfig cfg = build_config(c);
  const Layout L = layout_of(c);
  const auto ds = dataset_for(c, cfg);
  const auto& samples = split == "train" ? ds.train : ds.test;
  const ClassTaxonomy tax = cfg.taxonomy();
  MetricsReport r;
  ClassTaxonomy used = tax;
  if (predictor == "oracle") {
    ConfusionMatrix cm(1 + tax.num_base() + tax.num_novel());
    for (const auto& s : samples) accumulate_confusion(s.mask, s.mask, tax, cm);
    r = compute_metrics(cm, tax, cfg.background_with_base);
  } else if (predictor == "background") {
    r = all_background_report(samples, tax, cfg.background_with_base);
  } else {
    const fs::path src = checkpoint.empty() ? L.checkpoints() / (c.name + "-finetune.ckpt") : fs::path(checkpoint);
    const Checkpoint ck = load_checkpoint(src);
    used = ck.taxonomy;
    r = evaluate_checkpoint(ck, cfg, samples);
  }
  r.fold_index = static_cast<int>(cfg.fold);
  print_report(predictor.empty() ? "model" : predictor, r);
  const std::string tag = c.name + (predictor.empty() ? "" : "-" + predictor);
  write_text(L.reports() / (tag + "-metrics.csv"),
             metrics_csv_header() + "\n" + metrics_csv_row(std::to_string(cfg.fold), r) + "\n");
  write_text(L.reports() / (tag + "-per-class.csv"), per_class_csv(r, used));
  return 0;
}

int cmd_cross_validate(const Common& c) {
  const TrainConfig base_cfg = build_config(c);
  const Layout L = layout_of(c);
  FileLog flog(L.logs() / (c.name + "-cv.log"));
  const auto ds = dataset_for(c, base_cfg);
  const ClassTaxonomy t0 = base_cfg.taxonomy();
  auto run = [&](int fold) {
    TrainConfig cfg = base_cfg;
    cfg.fold = static_cast<std::size_t>(fold);
    cfg.validate();
    log::info("fold " + std::to_string(fold) + " starting");
    const auto data = prepare_fold(cfg, ds);
    FoldRun fr = run_fold(cfg, data);
    fr.finetuned.log.write_csv(L.logs() / (c.name + "-fold" + std::to_string(fold) + "-finetune-loss.csv"));
    fr.pretrained.log.write_csv(L.logs() / (c.name + "-fold" + std::to_string(fold) + "-pretrain-loss.csv"));
    log::info("fold " + std::to_string(fold) + " base " + fmt2(fr.report.miou_base) + " novel " +
              fmt2(fr.report.miou_novel));
    return fr.report;
  };
  const auto cv = cross_validate(run, static_cast<int>(base_cfg.num_folds), t0.num_base(), t0.num_novel(),
                                 base_cfg.background_with_base);
  std::vector<std::pair<std::string, MetricsReport>> rows;
  for (const auto& f : cv.folds)
    if (f.report) rows.emplace_back("fold " + std::to_string(f.fold), *f.report);
  rows.emplace_back("mean", cv.aggregate);
  std::cout << metrics_table(rows);
  write_text(L.reports() / (c.name + "-cv.csv"), cross_validation_csv(cv));
  write_text(L.reports() / (c.name + "-cv-config.cfg"), config_to_text(base_cfg));
  if (!cv.complete) {
    for (const auto& f : cv.folds)
      if (!f.report) log::error("fold " + std::to_string(f.fold) + " failed: " + f.error);
    return 1;
  }
  return 0;
}

int cmd_aug_preview(const Common& c, std::size_t count) {
  const TrainConfig cfg = build_config(c);
  const Layout L = layout_of(c);
  const auto ds = dataset_for(c, cfg);
  if (ds.train.empty()) throw DataError("dataset has no training images");
  Rng rng(cfg.seed, "aug-preview");
  fs::create_directories(L.previews());
  for (std::size_t i = 0; i < count; ++i) {
    const Sample& s = ds.train[i % ds.train.size()];
    AugmentedPair pair;
    pair.weak = weak_augment(s, cfg.crop_size, cfg.crop_size, rng);
    if (cfg.strong_aug == StrongAug::cutout) {
      CutoutCenter center;
      pair.strong = strong_augment(pair.weak, {cfg.cutout_mode, cfg.cutout_size}, rng, &center);
      pair.cutout_center = center;
    } else {
      pair.strong = randaugment_variant(pair.weak, rng, cfg.randaugment_magnitude);
    }
    const fs::path p = L.previews() / (c.name + "-" + std::to_string(i) + ".ppm");
    write_ppm(p, render_pair_preview(pair, cfg.cutout_size));
    std::cout << p.string() << "\n";
  }
  return 0;
}

std::string stats_rows(const std::string& head, const Tensor<float>& theta) {
  const WeightStats s = weight_stats(theta);
  std::string out;
  char buf[128];
  for (std::size_t i = 0; i < s.mu.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%.6g,%.6g\n", head.c_str(), i, s.mu[i], s.sigma[i]);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "%s,mean,%.6g,%.6g\n", head.c_str(), s.mu_bar, s.sigma_bar);
  return out + buf;
}

int cmd_inspect(const Common& c, const std::string& checkpoint) {
  const Layout L = layout_of(c);
  const fs::path src = checkpoint.empty() ? L.checkpoints() / (c.name + "-finetune.ckpt") : fs::path(checkpoint);
  const Checkpoint ck = load_checkpoint(src);
  std::cout << "phase " << phase_name(ck.phase) << ", epoch " << ck.epoch << ", lineage " << ck.lineage_id;
  if (!ck.parent_lineage.empty()) std::cout << ", parent " << ck.parent_lineage;
  std::cout << "\n";
  std::string csv = "head,column,mu,sigma\n";
  for (const char* name : {"clf.base", "clf.novel", "clf.background"}) {
    const auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) throw LoadError(std::string("checkpoint lacks ") + name);
    csv += stats_rows(name, it->second);
  }
  for (const char* name : {"prototypes.base", "prototypes.novel"}) {
    const auto& U = ck.tensors.at(name);
    for (std::size_t i = 0; i < U.rows(); ++i) {
      double s = 0;
      for (std::size_t j = 0; j < U.cols(); ++j) s += double(U(i, j)) * double(U(i, j));
      char buf[96];
      std::snprintf(buf, sizeof buf, "%s,%zu,norm,%.6g\n", name, i, std::sqrt(s));
      csv += buf;
    }
  }
  std::cout << csv;
  write_text(L.reports() / (c.name + "-weights.csv"), csv);
  return 0;
}

int cmd_keys() {
  for (const auto& k : config_keys()) {
    TrainConfig d;
    std::cout << k.name << " = " << k.get(d) << "    # " << k.help << "\n";
  }
  return 0;
}

void add_common(CLI::App* app, Common& c, bool with_data = true) {
  app->add_option("-c,--config", c.configs, "config file(s), applied in order")->check(CLI::ExistingFile);
  app->add_option("-s,--set", c.sets, "key=value override (repeatable)");
  app->add_option("--artifacts", c.artifacts, "artifact root (default $GFSS_ARTIFACT_ROOT or ./artifacts)");
  app->add_option("-n,--name", c.name, "run name used in artifact file names");
  if (with_data) app->add_option("--data", c.data, "dataset directory (default: generate from config)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generalized few-shot segmentation toolkit"};
  app.require_subcommand(1);
  Common c;

  auto* synth = app.add_subcommand("synth-data", "generate the synthetic shapes dataset");
  std::string synth_out;
  add_common(synth, c, false);
  synth->add_option("-o,--out", synth_out, "output directory (default <artifacts>/data/<name>)");

  auto* pre = app.add_subcommand("pretrain", "phase 1 on base classes");
  long pre_epochs = -1;
  add_common(pre, c);
  pre->add_option("--epochs", pre_epochs, "shorthand for --set epochs_pretrain=N");

  auto* ft = app.add_subcommand("finetune", "phase 2 on the support set");
  std::string from;
  long ft_epochs = -1;
  add_common(ft, c);
  ft->add_option("--from", from, "phase-1 checkpoint (default <artifacts>/checkpoints/<name>-pretrain.ckpt)");
  ft->add_option("--epochs", ft_epochs, "shorthand for --set epochs_finetune=N");

  auto* ev = app.add_subcommand("evaluate", "score a checkpoint or a reference predictor");
  std::string ev_ckpt, predictor, split = "test";
  add_common(ev, c);
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint to score");
  ev->add_option("--predictor", predictor, "oracle|background instead of a checkpoint")
      ->check(CLI::IsMember({"oracle", "background"}));
  ev->add_option("--split", split, "train|test")->check(CLI::IsMember({"train", "test"}));

  auto* cv = app.add_subcommand("cross-validate", "pretrain, finetune and evaluate every fold");
  add_common(cv, c);

  auto* aug = app.add_subcommand("aug-preview", "render weak/strong pairs with boxes and cutouts");
  std::size_t count = 8;
  add_common(aug, c);
  aug->add_option("--count", count, "number of pairs");

  auto* ins = app.add_subcommand("inspect-weights", "classifier weight statistics and prototype norms");
  std::string ins_ckpt;
  add_common(ins, c, false);
  ins->add_option("--checkpoint", ins_ckpt, "checkpoint to inspect");

  auto* keys = app.add_subcommand("keys", "list every config key with its default");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*synth) return cmd_synth(c, synth_out);
    if (*pre) return cmd_pretrain(c, pre_epochs);
    if (*ft) return cmd_finetune(c, from, ft_epochs);
    if (*ev) return cmd_evaluate(c, ev_ckpt, predictor, split);
    if (*cv) return cmd_cross_validate(c);
    if (*aug) return cmd_aug_preview(c, count);
    if (*ins) return cmd_inspect(c, ins_ckpt);
    if (*keys) return cmd_keys();
  } catch (const ConfigError& e) {
    std::cerr << "error: invalid configuration: " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const RangeError& e) {
    std::cerr << "error: invalid configuration: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    std::cerr << "see logs under " << layout_of(c).logs().string() << "\n";
    return 1;
  }
  return 0;
}
