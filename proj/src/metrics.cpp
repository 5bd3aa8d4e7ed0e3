#include "bicanet/metrics.hpp"

#include <cstdio>
#include <stdexcept>

namespace bicanet {

ConfusionMatrix::ConfusionMatrix(int num_classes) : num_classes_(num_classes) {
  if (num_classes < 1 || num_classes > 255) throw std::invalid_argument("confusion matrix needs 1..255 classes");
  counts_.assign(static_cast<std::size_t>(num_classes) * num_classes, 0);
}

void ConfusionMatrix::accumulate(const LabelMap& prediction, const LabelMap& truth) {
  if (prediction.n != truth.n || prediction.h != truth.h || prediction.w != truth.w) {
    throw ShapeError("pixels", "prediction and ground truth maps differ in shape");
  }
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int g = truth.data[i];
    if (g == LabelMap::kIgnore) {
      ++ignored_;
      continue;
    }
    const int p = prediction.data[i];
    if (p >= num_classes_) {
      throw std::logic_error("prediction " + std::to_string(p) + " at pixel " + std::to_string(i) +
                             " is outside [0, " + std::to_string(num_classes_) + ")");
    }
    if (g >= num_classes_) {
      throw DataError("label " + std::to_string(g) + " at pixel " + std::to_string(i) + " is outside [0, " +
                      std::to_string(num_classes_) + ")");
    }
    ++counts_[static_cast<std::size_t>(g) * num_classes_ + p];
    ++counted_;
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.num_classes_ != num_classes_) throw std::invalid_argument("cannot merge matrices of different sizes");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  counted_ += other.counted_;
  ignored_ += other.ignored_;
}

std::uint64_t ConfusionMatrix::count(int truth, int prediction) const {
  if (truth < 0 || truth >= num_classes_ || prediction < 0 || prediction >= num_classes_) {
    throw std::out_of_range("confusion matrix index out of range");
  }
  return counts_[static_cast<std::size_t>(truth) * num_classes_ + prediction];
}

void ConfusionMatrix::require_counts() const {
  if (counted_ == 0) throw MetricError("metrics are undefined for an empty confusion matrix");
}

std::vector<std::optional<double>> ConfusionMatrix::class_iou() const {
  std::vector<std::optional<double>> out(num_classes_);
  for (int k = 0; k < num_classes_; ++k) {
    std::uint64_t row = 0, col = 0;
    for (int j = 0; j < num_classes_; ++j) {
      row += count(k, j);
      col += count(j, k);
    }
    const std::uint64_t diag = count(k, k);
    const std::uint64_t uni = row + col - diag;
    if (uni > 0) out[k] = static_cast<double>(diag) / static_cast<double>(uni);
  }
  return out;
}

double ConfusionMatrix::miou(AbsentClassPolicy policy) const {
  require_counts();
  double sum = 0.0;
  int n = 0;
  for (const auto& v : class_iou()) {
    if (v) {
      sum += *v;
      ++n;
    } else if (policy == AbsentClassPolicy::kZero) {
      ++n;
    }
  }
  return sum / n;
}

double ConfusionMatrix::pixel_accuracy() const {
  require_counts();
  std::uint64_t trace = 0;
  for (int k = 0; k < num_classes_; ++k) trace += count(k, k);
  return static_cast<double>(trace) / static_cast<double>(counted_);
}

double ConfusionMatrix::final_score(AbsentClassPolicy policy) const {
  return 0.5 * (pixel_accuracy() + miou(policy));
}

MetricsRow summarize(const ConfusionMatrix& cm, int epoch, const std::string& split, AbsentClassPolicy policy) {
  MetricsRow r;
  r.epoch = epoch;
  r.split = split;
  r.iou = cm.class_iou();
  r.miou = cm.miou(policy);
  r.pixel_accuracy = cm.pixel_accuracy();
  r.final_score = cm.final_score(policy);
  return r;
}

namespace {

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::string metrics_csv_header(int num_classes) {
  std::string s = "epoch,split";
  for (int k = 0; k < num_classes; ++k) s += ",iou_" + std::to_string(k);
  return s + ",miou,pixacc,final_score";
}

std::string metrics_csv_line(const MetricsRow& row) {
  std::string s = std::to_string(row.epoch) + "," + row.split;
  for (const auto& v : row.iou) s += "," + (v ? fixed6(*v) : std::string("nan"));
  return s + "," + fixed6(row.miou) + "," + fixed6(row.pixel_accuracy) + "," + fixed6(row.final_score);
}

}  // namespace bicanet
