#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bicanet/tensor.hpp"

namespace bicanet {

/// How classes that appear in neither prediction nor ground truth enter the mIoU mean.
enum class AbsentClassPolicy {
  kExclude,  ///< left out of the mean (VOC tooling convention)
  kZero,     ///< counted as IoU 0
};

/// L x L pixel counts, rows = ground truth, columns = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  /// Adds every pixel of `prediction` against `truth`; ignored pixels are only
  /// tallied. Throws ShapeError on mismatched maps and std::logic_error on a
  /// prediction outside [0, L).
  void accumulate(const LabelMap& prediction, const LabelMap& truth);
  /// Entrywise sum with another matrix of the same size.
  void merge(const ConfusionMatrix& other);

  int num_classes() const noexcept { return num_classes_; }
  std::uint64_t count(int truth, int prediction) const;
  std::uint64_t counted() const noexcept { return counted_; }
  std::uint64_t ignored() const noexcept { return ignored_; }
  const std::vector<std::uint64_t>& counts() const noexcept { return counts_; }

  /// Per-class IoU; nullopt where the class is absent from both sides.
  std::vector<std::optional<double>> class_iou() const;

  // The three scores throw MetricError when no pixel has been counted.
  double miou(AbsentClassPolicy policy = AbsentClassPolicy::kExclude) const;
  double pixel_accuracy() const;
  /// Arithmetic mean of pixel accuracy and mIoU.
  double final_score(AbsentClassPolicy policy = AbsentClassPolicy::kExclude) const;

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  void require_counts() const;

  int num_classes_;
  std::vector<std::uint64_t> counts_;
  std::uint64_t counted_ = 0;
  std::uint64_t ignored_ = 0;
};

struct MetricsRow {
  int epoch = 0;
  std::string split;
  std::vector<std::optional<double>> iou;
  double miou = 0.0;
  double pixel_accuracy = 0.0;
  double final_score = 0.0;
};

MetricsRow summarize(const ConfusionMatrix& cm, int epoch, const std::string& split,
                     AbsentClassPolicy policy = AbsentClassPolicy::kExclude);

/// "epoch,split,iou_0,...,iou_{L-1},miou,pixacc,final_score"
std::string metrics_csv_header(int num_classes);
/// Fixed six-decimal formatting; absent classes are written as "nan".
std::string metrics_csv_line(const MetricsRow& row);

}  // namespace bicanet
