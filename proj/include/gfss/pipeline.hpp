#pragma once

// Glue for one fold: dataset, split, support set and the unlabeled base
// pool, plus pretrain -> finetune -> evaluate in a single call.

#include <vector>

#include "gfss/config.hpp"
#include "gfss/data.hpp"
#include "gfss/evaluation.hpp"
#include "gfss/training.hpp"

namespace gfss {

struct FoldData {
  ClassTaxonomy taxonomy;
  SyntheticDataset dataset;
  std::vector<Sample> base_set;        // relabelled, for phase 1
  std::vector<Sample> novel_pool;      // train images holding a novel class
  std::vector<Sample> support;         // K per novel class
  std::vector<Sample> unlabeled_base;  // train images holding a base class
};

inline FoldData prepare_fold(const TrainConfig& cfg, SyntheticDataset dataset) {
  FoldData f;
  f.taxonomy = cfg.taxonomy();
  f.dataset = std::move(dataset);
  f.base_set = base_training_set(f.dataset.train, f.taxonomy);
  for (const auto& s : f.dataset.train) {
    bool novel = false, base = false;
    for (int id : s.classes_present()) {
      novel = novel || f.taxonomy.is_novel(id);
      base = base || f.taxonomy.is_base(id);
    }
    if (novel) f.novel_pool.push_back(s);
    if (base) f.unlabeled_base.push_back(s);
  }
  f.support = sample_support_set(f.novel_pool, f.taxonomy, static_cast<int>(cfg.shots), cfg.seed);
  return f;
}

inline FoldData prepare_fold(const TrainConfig& cfg) {
  return prepare_fold(cfg, generate_synthetic_dataset(cfg.dataset_spec()));
}

inline MetricsReport evaluate_checkpoint(const Checkpoint& c, const TrainConfig& cfg,
                                         const std::vector<Sample>& samples) {
  const auto model = model_from_checkpoint<float>(c, cfg);
  auto r = compute_metrics(evaluate_model(model, samples, c.phase), c.taxonomy, cfg.background_with_base);
  r.fold_index = static_cast<int>(cfg.fold);
  return r;
}

// Pixels predicted as background everywhere; novel mIoU of this predictor
// is the floor a trained model must beat.
inline MetricsReport all_background_report(const std::vector<Sample>& samples,
                                           const ClassTaxonomy& tax, bool background_with_base = true) {
  ConfusionMatrix cm(1 + tax.num_base() + tax.num_novel());
  for (const auto& s : samples)
    accumulate_confusion(Tensor<int>(s.mask.shape(), tax.background_id), s.mask, tax, cm);
  return compute_metrics(cm, tax, background_with_base);
}

struct FoldRun {
  TrainResult pretrained;
  TrainResult finetuned;
  MetricsReport report;
};

inline FoldRun run_fold(const TrainConfig& cfg, const FoldData& data) {
  FoldRun r;
  r.pretrained = pretrain(data.base_set, data.taxonomy, cfg);
  r.finetuned = finetune(r.pretrained.checkpoint, data.support, data.unlabeled_base, data.taxonomy, cfg);
  r.report = evaluate_checkpoint(r.finetuned.checkpoint, cfg, data.dataset.test);
  return r;
}

}  // namespace gfss
