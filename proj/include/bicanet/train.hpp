#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "bicanet/data.hpp"
#include "bicanet/metrics.hpp"
#include "bicanet/network.hpp"

namespace bicanet {

/// Everything a training run depends on. Serialises to a JSON object with the
/// same field names; unknown keys are rejected when parsing.
struct TrainConfig {
  double lr_base = 1e-2;
  double momentum = 0.99;
  double weight_decay = 1e-4;
  double power = 0.9;
  /// Zero derives epochs * ceil(N / batch).
  std::int64_t max_iter = 0;
  int epochs = 20;
  int batch = 1;
  double lambda = 0.1;
  int crop = 64;
  int num_classes = 4;
  int cardinality = 3;
  int long_kernel = 5;
  int attention_reduction = 4;
  /// Batch-norm on the BCIB down-sampling links.
  bool bcib_batch_norm = false;
  std::uint64_t seed = 1;       ///< parameter initialisation
  std::uint64_t data_seed = 2;  ///< shuffling and augmentation

  AblationFlags ablation;
  BackboneConfig backbone;
  OhemConfig ohem;

  bool augment = true;
  data::AugmentConfig augmentation;  ///< crop extents are taken from `crop`

  /// On-disk dataset; when empty the `synthetic` spec is generated in memory.
  std::string data_dir;
  data::SyntheticSpec synthetic;
  int synthetic_train = 10;
  int synthetic_val = 0;
  std::string train_split = "train";
  std::string val_split = "val";

  std::string output_dir = "run";
  /// Also evaluate the (un-augmented) training split at every epoch end.
  bool eval_train = false;
  int checkpoint_every_epochs = 1;
  AbsentClassPolicy absent_classes = AbsentClassPolicy::kExclude;
};

/// Throws ConfigError on out-of-range fields.
void validate(const TrainConfig& config);
std::string to_json(const TrainConfig& config);
/// Parses a JSON object; fields not present keep their defaults.
TrainConfig train_config_from_json(const std::string& text);
TrainConfig load_train_config(const std::filesystem::path& path);
ModelConfig model_config(const TrainConfig& config);
/// Synthetic-data parameters from a JSON object with SyntheticSpec's field names.
data::SyntheticSpec synthetic_spec_from_json(const std::string& text);

/// Samples of one named split: read from `data_dir`, or regenerated from the
/// synthetic spec (train = indices [0, synthetic_train), val = the next synthetic_val).
std::vector<data::SegSample> load_dataset_split(const TrainConfig& config, const std::string& split);

/// lr_base * (1 - iter / max_iter)^power; iterations past max_iter give 0 and a warning.
double poly_lr(double lr_base, std::int64_t iter, std::int64_t max_iter, double power);

/// SGD with momentum and decoupled-from-BN weight decay:
///   v <- momentum * v + (grad + weight_decay * param)
///   param <- param - lr * v
/// Parameters declared without weight decay (batch-norm scale and shift) skip the decay term.
template <typename T>
class Sgd {
 public:
  Sgd() = default;
  explicit Sgd(const ParamStore<T>& store);

  /// Throws std::runtime_error naming the first learnable tensor without a gradient.
  void step(ParamStore<T>& store, double lr, double momentum, double weight_decay);

  /// Velocity buffers in learnable-declaration order, paired with their names.
  std::vector<std::pair<std::string, Tensor<T>>>& velocity() noexcept { return velocity_; }
  const std::vector<std::pair<std::string, Tensor<T>>>& velocity() const noexcept { return velocity_; }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> velocity_;
};

extern template class Sgd<float>;
extern template class Sgd<double>;

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string config_json;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;   ///< parameters and buffers
  std::vector<std::pair<std::string, Tensor<float>>> momentum;  ///< optimiser velocity
  std::uint64_t iteration = 0;
  std::string rng_state;  ///< textual std::mt19937_64 state
};

/// "BCAN", u32 version, u32 length + config JSON, u32 count + tensors, u32 count +
/// momentum buffers, u64 iteration, u32 length + RNG state. Each tensor is
/// u32 name length, name bytes, 4 u32 extents (n, c, h, w), little-endian f32 data.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
/// Throws ParseError with the byte offset on malformed input.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Argmax labels for one image (1, 3, h, w). `mode` must be kEval or
/// kEvalBatchStats; neither changes the model.
LabelMap predict_labels(const BiCANet<float>& model, const Tensor<float>& image, Mode mode = Mode::kEval);
/// Streams samples one at a time through the frozen model.
ConfusionMatrix evaluate(const BiCANet<float>& model, const std::vector<data::SegSample>& samples,
                         Mode mode = Mode::kEval);

/// One training run: owns the model, optimiser, data and RNG.
class Trainer {
 public:
  explicit Trainer(const TrainConfig& config);

  /// Restores parameters, momentum, iteration and RNG. Refuses (ConfigError
  /// listing the differing fields) when the checkpoint was written for a
  /// different configuration.
  void resume(const std::filesystem::path& checkpoint);
  Checkpoint checkpoint() const;

  /// One SGD iteration on the next batch.
  LossReport step();
  /// Steps until max_iter (or `limit` further iterations), evaluating and
  /// checkpointing at epoch ends. Returns the metrics rows it produced.
  std::vector<MetricsRow> run(std::optional<std::int64_t> limit = std::nullopt);

  MetricsRow evaluate_split(const std::string& split, int epoch, Mode mode = Mode::kEval) const;

  std::int64_t iteration() const noexcept { return iteration_; }
  std::int64_t max_iter() const noexcept { return max_iter_; }
  std::int64_t iterations_per_epoch() const noexcept { return per_epoch_; }
  const std::vector<LossReport>& history() const noexcept { return history_; }
  const TrainConfig& config() const noexcept { return config_; }
  BiCANet<float>& model() noexcept { return model_; }
  const BiCANet<float>& model() const noexcept { return model_; }
  const std::vector<data::SegSample>& split(const std::string& name) const;

 private:
  std::vector<std::size_t> epoch_order(std::int64_t epoch) const;
  void append_metrics(const std::vector<MetricsRow>& rows) const;

  TrainConfig config_;
  BiCANet<float> model_;
  Sgd<float> sgd_;
  std::vector<data::SegSample> train_;
  std::vector<data::SegSample> val_;
  std::mt19937_64 rng_;
  std::int64_t iteration_ = 0;
  std::int64_t per_epoch_ = 1;
  std::int64_t max_iter_ = 1;
  std::vector<LossReport> history_;
};

/// Model rebuilt from a checkpoint's configuration snapshot and tensors.
struct LoadedModel {
  TrainConfig config;
  BiCANet<float> model;
  std::uint64_t iteration = 0;
};
LoadedModel load_model(const std::filesystem::path& checkpoint);

struct PredictionFiles {
  std::filesystem::path color;   ///< P6 palette rendering
  std::filesystem::path labels;  ///< P5 raw class indices
};
/// Inputs whose sides are not multiples of 32 are reflect-padded up to the next
/// multiple and the prediction is cropped back.
PredictionFiles predict_file(const BiCANet<float>& model, const std::filesystem::path& image,
                             const std::filesystem::path& out_dir);

}  // namespace bicanet
