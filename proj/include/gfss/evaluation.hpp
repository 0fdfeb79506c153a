#pragma once

// Confusion-matrix IoU, base/novel mIoU, the class-weighted Mean, the
// harmonic mean of base and novel mIoU, and fold aggregation.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gfss/data.hpp"
#include "gfss/error.hpp"

namespace gfss {

// Rows are ground truth, columns predictions, both in channel order
// (background, base..., novel...).
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0) : n_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const { return n_; }
  std::uint64_t operator()(std::size_t t, std::size_t p) const { return counts_[t * n_ + p]; }
  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto v : counts_) s += v;
    return s;
  }
  std::uint64_t row_sum(std::size_t t) const {
    std::uint64_t s = 0;
    for (std::size_t p = 0; p < n_; ++p) s += (*this)(t, p);
    return s;
  }
  std::uint64_t col_sum(std::size_t p) const {
    std::uint64_t s = 0;
    for (std::size_t t = 0; t < n_; ++t) s += (*this)(t, p);
    return s;
  }

  // Channel-index form; negative ground truth is ignored.
  void add(int truth, int pred) {
    if (truth < 0) return;
    if (static_cast<std::size_t>(truth) >= n_ || pred < 0 || static_cast<std::size_t>(pred) >= n_)
      throw DataError("confusion: class index (" + std::to_string(truth) + ", " +
                      std::to_string(pred) + ") outside " + std::to_string(n_) + " classes");
    ++counts_[static_cast<std::size_t>(truth) * n_ + static_cast<std::size_t>(pred)];
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.n_ != n_) throw ShapeError("confusion matrices of different size");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    return *this;
  }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

// pred and mask hold class ids; ignore pixels in the mask are skipped.
// Ids outside the taxonomy raise a DataError.
inline void accumulate_confusion(const Tensor<int>& pred, const Tensor<int>& mask,
                                 const ClassTaxonomy& tax, ConfusionMatrix& cm) {
  if (pred.shape() != mask.shape())
    throw ShapeError("prediction " + shape_str(pred.shape()) + " vs mask " + shape_str(mask.shape()));
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] == kIgnoreId) continue;
    if (pred[i] == kIgnoreId) throw DataError("prediction contains the ignore label");
    cm.add(tax.channel_of(mask[i]), tax.channel_of(pred[i]));
  }
}

struct MetricsReport {
  std::vector<std::optional<double>> iou_per_class;  // percent; nullopt when absent
  double miou_base = 0;
  double miou_novel = 0;
  double mean_metric = 0;
  double h_mean = 0;
  int fold_index = -1;
};

// 2ab / (a + b), 0 when both are 0.
inline double harmonic_mean(double base, double novel) {
  return base + novel == 0 ? 0.0 : 2.0 * base * novel / (base + novel);
}

// ((M + 1) base + N novel) / (M + 1 + N) with background grouped with base,
// else (M base + N novel) / (M + N).
inline double weighted_mean(double base, double novel, std::size_t M, std::size_t N,
                            bool background_with_base = true) {
  const double nb = double(M) + (background_with_base ? 1.0 : 0.0);
  return (nb * base + double(N) * novel) / (nb + double(N));
}

inline MetricsReport metrics_from_summary(double miou_base, double miou_novel, std::size_t M,
                                          std::size_t N, bool background_with_base = true) {
  MetricsReport r;
  r.miou_base = miou_base;
  r.miou_novel = miou_novel;
  r.mean_metric = weighted_mean(miou_base, miou_novel, M, N, background_with_base);
  r.h_mean = harmonic_mean(miou_base, miou_novel);
  return r;
}

inline MetricsReport compute_metrics(const ConfusionMatrix& cm, const ClassTaxonomy& tax,
                                     bool background_with_base = true) {
  const std::size_t M = tax.num_base(), N = tax.num_novel(), C = 1 + M + N;
  if (cm.classes() != C)
    throw ShapeError("confusion matrix has " + std::to_string(cm.classes()) + " classes, taxonomy " +
                     std::to_string(C));
  if (cm.total() == 0) throw DataError("compute_metrics: empty confusion matrix");
  MetricsReport r;
  r.iou_per_class.resize(C);
  for (std::size_t i = 0; i < C; ++i) {
    const std::uint64_t tp = cm(i, i), uni = cm.row_sum(i) + cm.col_sum(i) - tp;
    if (uni > 0) r.iou_per_class[i] = 100.0 * double(tp) / double(uni);
  }
  auto average = [&](std::size_t lo, std::size_t hi) {
    double s = 0;
    std::size_t n = 0;
    for (std::size_t i = lo; i < hi; ++i)
      if (r.iou_per_class[i]) {
        s += *r.iou_per_class[i];
        ++n;
      }
    return n ? s / double(n) : 0.0;
  };
  r.miou_base = average(background_with_base ? 0 : 1, 1 + M);
  r.miou_novel = average(1 + M, C);
  r.mean_metric = weighted_mean(r.miou_base, r.miou_novel, M, N, background_with_base);
  r.h_mean = harmonic_mean(r.miou_base, r.miou_novel);
  return r;
}

struct FoldOutcome {
  int fold = 0;
  std::optional<MetricsReport> report;
  std::string error;
};

struct CrossValidationReport {
  std::vector<FoldOutcome> folds;
  MetricsReport aggregate;  // from fold-averaged base and novel mIoU
  bool complete = true;
};

// Runs every fold; failures are recorded and the aggregate covers the
// folds that succeeded. Base and novel mIoU are averaged across folds
// first, then Mean and H-Mean are computed from those averages.
inline CrossValidationReport cross_validate(const std::function<MetricsReport(int)>& run_fold,
                                            int num_folds, std::size_t M, std::size_t N,
                                            bool background_with_base = true) {
  CrossValidationReport out;
  double base = 0, novel = 0;
  int ok = 0;
  for (int f = 0; f < num_folds; ++f) {
    FoldOutcome o{f, std::nullopt, ""};
    try {
      MetricsReport r = run_fold(f);
      r.fold_index = f;
      base += r.miou_base;
      novel += r.miou_novel;
      ++ok;
      o.report = std::move(r);
    } catch (const std::exception& e) {
      o.error = e.what();
      out.complete = false;
    }
    out.folds.push_back(std::move(o));
  }
  if (ok > 0) out.aggregate = metrics_from_summary(base / ok, novel / ok, M, N, background_with_base);
  return out;
}

inline std::string fmt2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string metrics_csv_header() { return "fold,base,novel,mean,h_mean,status"; }

inline std::string metrics_csv_row(const std::string& fold, const MetricsReport& r,
                                   const std::string& status = "ok") {
  return fold + "," + fmt2(r.miou_base) + "," + fmt2(r.miou_novel) + "," + fmt2(r.mean_metric) +
         "," + fmt2(r.h_mean) + "," + status;
}

inline std::string cross_validation_csv(const CrossValidationReport& cv) {
  std::ostringstream os;
  os << metrics_csv_header() << "\n";
  for (const auto& f : cv.folds) {
    if (f.report)
      os << metrics_csv_row(std::to_string(f.fold), *f.report) << "\n";
    else
      os << f.fold << ",,,,,failed: " << f.error << "\n";
  }
  os << metrics_csv_row("mean", cv.aggregate, cv.complete ? "ok" : "partial") << "\n";
  return os.str();
}

// Base | Novel | Mean | H-Mean, one row per entry.
inline std::string metrics_table(const std::vector<std::pair<std::string, MetricsReport>>& rows) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-10s %8s %8s %8s %8s\n", "", "Base", "Novel", "Mean", "H-Mean");
  os << buf;
  for (const auto& [name, r] : rows) {
    std::snprintf(buf, sizeof buf, "%-10s %8.2f %8.2f %8.2f %8.2f\n", name.c_str(), r.miou_base,
                  r.miou_novel, r.mean_metric, r.h_mean);
    os << buf;
  }
  return os.str();
}

inline std::string per_class_csv(const MetricsReport& r, const ClassTaxonomy& tax) {
  std::ostringstream os;
  os << "channel,class_id,group,iou\n";
  for (std::size_t c = 0; c < r.iou_per_class.size(); ++c) {
    const char* group = c == 0 ? "background" : c <= tax.num_base() ? "base" : "novel";
    os << c << "," << tax.id_of_channel(c) << "," << group << ","
       << (r.iou_per_class[c] ? fmt2(*r.iou_per_class[c]) : "") << "\n";
  }
  return os.str();
}

}  // namespace gfss
