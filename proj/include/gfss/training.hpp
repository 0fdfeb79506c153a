#pragma once

// Two-phase training. Phase 1 fits the extractor, base prototypes and base
// heads on base data. Phase 2 freezes all of that and fits the novel
// prototypes, novel head and modulation block on the support set, with a
// consistency term on unlabeled base images and classifier calibration at
// every epoch boundary.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "gfss/augmentation.hpp"
#include "gfss/checkpoint.hpp"
#include "gfss/config.hpp"
#include "gfss/evaluation.hpp"
#include "gfss/losses.hpp"
#include "gfss/model.hpp"
#include "gfss/optim.hpp"

namespace gfss {

struct LossRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  Phase phase = Phase::pretrain;
  LossBundle loss;
};

struct TrainLog {
  std::vector<LossRecord> records;

  // step,phase,seg,orth,aux,con,total; the component a phase does not use
  // is left empty.
  std::string csv() const {
    std::ostringstream os;
    os << "step,phase,seg,orth,aux,con,total\n";
    char buf[64];
    auto num = [&](double v) {
      std::snprintf(buf, sizeof buf, "%.9g", v);
      return std::string(buf);
    };
    for (const auto& r : records) {
      const bool pre = r.phase == Phase::pretrain;
      os << r.step << "," << phase_name(r.phase) << "," << num(r.loss.seg) << "," << num(r.loss.orth)
         << "," << (pre ? num(r.loss.aux) : "") << "," << (pre ? "" : num(r.loss.con)) << ","
         << num(r.loss.total) << "\n";
    }
    return os.str();
  }

  void write_csv(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << csv();
  }

  // Mean total loss per epoch.
  std::vector<double> epoch_totals() const {
    std::vector<double> sum, n;
    for (const auto& r : records) {
      if (r.epoch >= sum.size()) {
        sum.resize(r.epoch + 1, 0.0);
        n.resize(r.epoch + 1, 0.0);
      }
      sum[r.epoch] += r.loss.total;
      n[r.epoch] += 1;
    }
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] = n[i] > 0 ? sum[i] / n[i] : 0.0;
    return sum;
  }
};

struct TrainHooks {
  std::function<void(const LossRecord&)> on_step;
  std::function<void(std::size_t epoch, const GfssModel<float>&)> on_epoch_end;
  // After the calibration that closes `epoch`.
  std::function<void(std::size_t epoch, const GfssModel<float>&)> on_calibration;
  // Before the first consistency batch of the run is drawn.
  std::function<void(std::size_t step)> on_first_ccl_batch;
};

struct TrainResult {
  Checkpoint checkpoint;
  GfssModel<float> model;
  TrainLog log;
  std::size_t calibrations = 0;
};

// Non-finite loss; carries the state at the start of the failing epoch.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, Checkpoint last_good)
      : Error(what), last_good_(std::move(last_good)) {}
  const Checkpoint& last_good() const { return last_good_; }

 private:
  Checkpoint last_good_;
};

inline Checkpoint make_checkpoint(const GfssModel<float>& model, Phase phase, std::size_t epoch,
                                  const TrainConfig& cfg, const std::string& parent = "") {
  Checkpoint c;
  c.phase = phase;
  c.epoch = epoch;
  c.parent_lineage = parent;
  c.config = config_snapshot(cfg);
  c.taxonomy = model.taxonomy;
  c.rng_states["root_seed"] = std::to_string(cfg.seed);
  c.tensors = model.state();
  c.lineage_id = compute_lineage_id(c);
  return c;
}

namespace detail {

inline bool any_labelled(const std::vector<int>& labels) {
  for (int v : labels)
    if (v >= 0) return true;
  return false;
}

inline void check_finite(const LossBundle& b, const Checkpoint& last_good, std::size_t step) {
  for (double v : {b.seg, b.orth, b.aux, b.con, b.total})
    if (!std::isfinite(v))
      throw DivergenceError("non-finite loss at step " + std::to_string(step) +
                                "; last good state is epoch " + std::to_string(last_good.epoch),
                            last_good);
}

inline Var<float> mean_of(const std::vector<Var<float>>& xs) {
  if (xs.empty()) return Var<float>::constant(Tensor<float>({1}));
  return ag::scale(ag::add_scalars(xs), 1.0f / static_cast<float>(xs.size()));
}

inline LossBundle bundle_of(const LossComponents& c, Phase phase) {
  LossBundle b{c.seg, c.orth, c.aux.value_or(0), c.con.value_or(0), 0};
  b.total = phase == Phase::pretrain ? b.seg + b.orth + b.aux : b.seg + b.orth + b.con;
  return b;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Phase 1

inline TrainResult pretrain(const std::vector<Sample>& base_set, const ClassTaxonomy& tax,
                            const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  if (base_set.empty()) throw DataError("pre-training set is empty");
  tax.validate();
  GfssModel<float> model(cfg, tax);
  model.set_phase(Phase::pretrain);
  Sgd<float> opt(model.trainable_parameters(), cfg.momentum, cfg.weight_decay);
  Rng shuffle_rng(cfg.seed, "pretrain/shuffle");
  Rng aug_rng(cfg.seed, "pretrain/augment");

  const std::size_t B = std::min(cfg.batch_size, base_set.size());
  const std::size_t steps_per_epoch = (base_set.size() + B - 1) / B;
  const std::size_t max_iter = steps_per_epoch * cfg.epochs_pretrain;
  const std::size_t crop = cfg.crop_size;

  TrainResult result;
  std::size_t step = 0;
  std::vector<std::size_t> order(base_set.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs_pretrain; ++epoch) {
    const Checkpoint epoch_start = make_checkpoint(model, Phase::pretrain, epoch, cfg);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle_rng.shuffle(order.begin(), order.end());
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      std::vector<Var<float>> seg_terms, aux_terms;
      for (std::size_t b = s * B; b < std::min(order.size(), (s + 1) * B); ++b) {
        const Sample view = weak_augment(base_set[order[b]], crop, crop, aug_rng);
        const auto labels = channel_labels(view.mask, tax, false);
        if (!detail::any_labelled(labels)) continue;
        const auto f = model.features(view.image);
        const Var<float> lg = ag::upsample_rows(model.logits(f.rows, Phase::pretrain), f.h, f.w, crop, crop);
        seg_terms.push_back(ag::cross_entropy(lg, labels));
        const auto small = downsample_labels(labels, crop, crop, f.h, f.w);
        if (detail::any_labelled(small))
          aux_terms.push_back(auxiliary_loss(f.rows, model.proto_base, small, model.aux,
                                             model.learned_aux_background ? model.aux_background
                                                                          : Var<float>{}));
      }
      const Var<float> seg = detail::mean_of(seg_terms), aux = detail::mean_of(aux_terms);
      const Var<float> orth = model.num_base() >= 2 ? orthogonality_loss(model.proto_base)
                                                    : Var<float>::constant(Tensor<float>({1}));
      const Var<float> total = ag::add_scalars<float>({seg, orth, aux});
      LossRecord rec{step, epoch, Phase::pretrain,
                     detail::bundle_of({seg.value()[0], orth.value()[0], aux.value()[0], std::nullopt},
                                       Phase::pretrain)};
      detail::check_finite(rec.loss, epoch_start, step);
      backward(total);
      opt.step(learning_rate(cfg.lr_schedule_pretrain, cfg.lr_pretrain, step, max_iter, cfg.poly_power));
      opt.zero_grad();
      result.log.records.push_back(rec);
      if (hooks.on_step) hooks.on_step(rec);
      ++step;
    }
    if (hooks.on_epoch_end) hooks.on_epoch_end(epoch, model);
  }
  result.checkpoint = make_checkpoint(model, Phase::pretrain, cfg.epochs_pretrain, cfg);
  result.checkpoint.rng_states["pretrain/shuffle"] = shuffle_rng.state();
  result.checkpoint.rng_states["pretrain/augment"] = aug_rng.state();
  result.model = std::move(model);
  return result;
}

// ---------------------------------------------------------------------------
// Phase 2

// Support-image labels: novel classes keep their channel; base pixels map
// to background unless keep_base is set.
inline std::vector<int> support_labels(const Tensor<int>& mask, const ClassTaxonomy& tax,
                                       bool keep_base) {
  std::vector<int> out(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const int id = mask[i];
    if (!keep_base && tax.is_base(id))
      out[i] = 0;
    else
      out[i] = tax.channel_of(id);
  }
  return out;
}

// Channels a consistency term compares.
inline std::vector<std::size_t> ccl_channels(CclClassifiers which, std::size_t M, std::size_t N) {
  std::vector<std::size_t> out{0};
  if (which != CclClassifiers::novel)
    for (std::size_t i = 0; i < M; ++i) out.push_back(1 + i);
  if (which != CclClassifiers::base)
    for (std::size_t i = 0; i < N; ++i) out.push_back(1 + M + i);
  return out;
}

namespace detail {

// Features of the frozen extractor, memoized per (sample, weak view).
class FeatureCache {
 public:
  explicit FeatureCache(const GfssModel<float>& model, std::size_t capacity = 4096)
      : model_(model), capacity_(capacity) {}

  GfssModel<float>::Features get(const std::string& key, const Tensor<float>& image) {
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    auto f = model_.features(image);
    f.rows = f.rows.detach();
    if (cache_.size() < capacity_) cache_.emplace(key, f);
    return f;
  }

 private:
  const GfssModel<float>& model_;
  std::size_t capacity_;
  std::unordered_map<std::string, GfssModel<float>::Features> cache_;
};

inline std::string view_key(std::size_t index, const WeakParams& p) {
  return std::to_string(index) + (p.flip ? "f" : "n") + std::to_string(p.oy) + "," + std::to_string(p.ox);
}

struct CclItem {
  const Sample* sample;
  std::vector<int> labels;  // used only by the labeled variant
};

// Applies a weak view's flip and crop to a row-major label grid.
inline std::vector<int> warp_labels(const std::vector<int>& labels, std::size_t H, std::size_t W,
                                    const WeakParams& wp, std::size_t crop) {
  std::vector<int> out(crop * crop, -1);
  for (std::size_t y = 0; y < crop; ++y)
    for (std::size_t x = 0; x < crop; ++x) {
      const std::size_t sy = y + wp.oy, px = x + wp.ox;
      if (sy >= H || px >= W) continue;
      const std::size_t sx = wp.flip ? W - 1 - px : px;
      out[y * crop + x] = labels[sy * W + sx];
    }
  return out;
}

}  // namespace detail

inline void apply_calibration(GfssModel<float>& model, const TrainConfig& cfg) {
  CalibrationOptions opts;
  opts.sigma = cfg.ncc_sigma;
  opts.order = cfg.ncc_order;
  if (cfg.ncc == NccMode::on) {
    model.clf_novel.mutable_value() =
        calibrate_novel(model.clf_novel.value(), weight_stats(model.clf_base.value()), opts).theta;
  } else if (cfg.ncc == NccMode::nbcc) {
    auto [b, n] = calibrate_both_variant(model.clf_base.value(), model.clf_novel.value(), opts);
    model.clf_base.mutable_value() = std::move(b.theta);
    model.clf_novel.mutable_value() = std::move(n.theta);
  }
}

inline TrainResult finetune(const Checkpoint& pre, const std::vector<Sample>& support,
                            const std::vector<Sample>& unlabeled_base, const ClassTaxonomy& tax,
                            const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  require_pretrain_checkpoint(pre, tax);
  if (support.empty()) throw DataError("support set is empty");
  GfssModel<float> model = model_from_checkpoint<float>(pre, cfg);
  Rng init_rng(cfg.seed, "finetune/init");
  model.init_novel(cfg, init_rng);
  model.set_phase(Phase::finetune);
  Sgd<float> opt(model.trainable_parameters(), cfg.momentum, cfg.weight_decay, cfg.grad_clip_finetune);

  Rng support_shuffle(cfg.seed, "finetune/support-shuffle");
  Rng support_aug(cfg.seed, "finetune/support-augment");
  Rng ccl_pick(cfg.seed, "finetune/ccl-pick");
  Rng ccl_aug(cfg.seed, "finetune/ccl-augment");

  const std::size_t M = tax.num_base(), N = tax.num_novel(), crop = cfg.crop_size;
  const bool keep_base = cfg.ccl == CclMode::labeled;
  std::vector<std::vector<int>> sup_labels;
  for (const auto& s : support) sup_labels.push_back(support_labels(s.mask, tax, keep_base));

  std::vector<detail::CclItem> pool;
  if (cfg.ccl != CclMode::off) {
    if (cfg.ccl_source != CclSource::novel)
      for (const auto& s : unlabeled_base)
        pool.push_back({&s, channel_labels(relabel_for_pretraining(s, tax).mask, tax, false)});
    if (cfg.ccl_source != CclSource::base)
      for (std::size_t i = 0; i < support.size(); ++i) pool.push_back({&support[i], sup_labels[i]});
    if (pool.empty()) throw DataError("consistency learning is on but its sample pool is empty");
  }
  const auto channels = ccl_channels(cfg.ccl_classifiers, M, N);

  const std::size_t B = std::min(cfg.batch_size, support.size());
  const std::size_t steps_per_epoch = (support.size() + B - 1) / B;
  const std::size_t max_iter = steps_per_epoch * cfg.epochs_finetune;
  const std::size_t BU = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg.ccl_ratio * double(B))));

  detail::FeatureCache cache(model);
  TrainResult result;
  std::size_t step = 0;
  bool ccl_started = false;
  std::vector<std::size_t> order(support.size()), pool_order;
  std::size_t pool_cursor = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs_finetune; ++epoch) {
    const Checkpoint epoch_start = make_checkpoint(model, Phase::finetune, epoch, cfg, pre.lineage_id);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    support_shuffle.shuffle(order.begin(), order.end());
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const Var<float> novel = model.effective_novel_prototypes();
      const Var<float> protos = ag::concat_rows(model.proto_base, novel);
      const Var<float> theta = ag::concat_cols(model.clf_base, model.clf_novel);
      auto logits_up = [&](const GfssModel<float>::Features& f) {
        return ag::upsample_rows(score_rows(f.rows, protos, theta, model.clf_background), f.h, f.w, crop, crop);
      };

      std::vector<Var<float>> seg_terms;
      for (std::size_t b = s * B; b < std::min(order.size(), (s + 1) * B); ++b) {
        const std::size_t idx = order[b];
        WeakParams wp;
        const Sample view = weak_augment(support[idx], crop, crop, support_aug, &wp);
        const auto labels = detail::warp_labels(sup_labels[idx], support[idx].height(), support[idx].width(), wp, crop);
        if (!detail::any_labelled(labels)) continue;
        const auto f = cache.get("s" + detail::view_key(idx, wp), view.image);
        seg_terms.push_back(ag::cross_entropy(logits_up(f), labels));
      }
      const Var<float> seg = detail::mean_of(seg_terms);
      const Var<float> orth = orthogonality_loss(protos);

      Var<float> con = Var<float>::constant(Tensor<float>({1}));
      if (cfg.ccl != CclMode::off) {
        if (!ccl_started) {
          ccl_started = true;
          if (hooks.on_first_ccl_batch) hooks.on_first_ccl_batch(step);
        }
        std::vector<Var<float>> con_terms;
        for (std::size_t u = 0; u < BU; ++u) {
          if (pool_cursor == pool_order.size()) {
            pool_order.resize(pool.size());
            for (std::size_t i = 0; i < pool.size(); ++i) pool_order[i] = i;
            ccl_pick.shuffle(pool_order.begin(), pool_order.end());
            pool_cursor = 0;
          }
          const std::size_t pi = pool_order[pool_cursor++];
          const auto& item = pool[pi];
          WeakParams wp;
          const Sample weak = weak_augment(*item.sample, crop, crop, ccl_aug, &wp);
          const auto fw = cache.get("u" + detail::view_key(pi, wp), weak.image);
          const Var<float> lw = ag::select_cols(logits_up(fw), channels);
          if (cfg.ccl == CclMode::labeled) {
            const auto labels = detail::warp_labels(item.labels, item.sample->height(), item.sample->width(), wp, crop);
            if (detail::any_labelled(labels)) con_terms.push_back(ag::cross_entropy(logits_up(fw), labels));
            continue;
          }
          const Sample strong =
              cfg.strong_aug == StrongAug::cutout
                  ? strong_augment(weak, CutoutOptions{cfg.cutout_mode, cfg.cutout_size}, ccl_aug)
                  : randaugment_variant(weak, ccl_aug, cfg.randaugment_magnitude);
          auto fs = model.features(strong.image);
          fs.rows = fs.rows.detach();
          const Var<float> ls = ag::select_cols(logits_up(fs), channels);
          con_terms.push_back(consistency_loss(lw, ls, cfg.ccl_stop_grad));
        }
        con = detail::mean_of(con_terms);
      }

      const Var<float> total = ag::add_scalars<float>({seg, orth, con});
      LossRecord rec{step, epoch, Phase::finetune,
                     detail::bundle_of({seg.value()[0], orth.value()[0], std::nullopt, con.value()[0]},
                                       Phase::finetune)};
      detail::check_finite(rec.loss, epoch_start, step);
      backward(total);
      opt.step(learning_rate(cfg.lr_schedule_finetune, cfg.lr_finetune, step, max_iter, cfg.poly_power));
      opt.zero_grad();
      result.log.records.push_back(rec);
      if (hooks.on_step) hooks.on_step(rec);
      ++step;
    }
    if (cfg.ncc != NccMode::off) {
      apply_calibration(model, cfg);
      ++result.calibrations;
      if (hooks.on_calibration) hooks.on_calibration(epoch, model);
    }
    if (hooks.on_epoch_end) hooks.on_epoch_end(epoch, model);
  }
  result.checkpoint = make_checkpoint(model, Phase::finetune, cfg.epochs_finetune, cfg, pre.lineage_id);
  result.checkpoint.rng_states["finetune/support-shuffle"] = support_shuffle.state();
  result.checkpoint.rng_states["finetune/ccl-augment"] = ccl_aug.state();
  result.model = std::move(model);
  return result;
}

// ---------------------------------------------------------------------------

template <typename T>
ConfusionMatrix evaluate_model(const GfssModel<T>& model, const std::vector<Sample>& samples,
                               Phase phase) {
  ConfusionMatrix cm(model.num_channels(Phase::finetune));
  for (const auto& s : samples) accumulate_confusion(model.predict(s.image, phase), s.mask, model.taxonomy, cm);
  return cm;
}

}  // namespace gfss
