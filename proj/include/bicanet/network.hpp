#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "bicanet/backbone.hpp"
#include "bicanet/blocks.hpp"

namespace bicanet {

/// Which of the three context blocks are active. Nesting is enforced:
/// BCIB requires CCPB and MCFB requires BCIB.
struct AblationFlags {
  bool use_ccpb = true;
  bool use_bcib = true;
  bool use_mcfb = true;

  bool operator==(const AblationFlags&) const = default;
};

/// Throws ConfigError for non-nested flag combinations.
void validate(const AblationFlags& flags);

struct ModelConfig {
  int num_classes = 4;
  BackboneConfig backbone;
  int cardinality = 3;
  /// C' for every CCPB; zero picks C/2 rounded up to a multiple of the cardinality.
  int ccpb_mid_channels = 0;
  int long_kernel = 5;
  /// MCFB global kernel M; normally max(crop height, crop width).
  int global_kernel = 64;
  int attention_reduction = 4;
  /// Normalisation on the BCIB down-sampling links.
  Norm bcib_norm = Norm::kNone;
  AblationFlags ablation;
  NormOptions norm;
};

template <typename T>
struct ModelOutput {
  Var<T> logits;                ///< (n, L, h, w)
  std::array<Var<T>, 4> aux;    ///< per-stage head logits, upsampled to (h, w)
};

/// Every intermediate of one forward pass, for inspection.
template <typename T>
struct ModelTrace {
  std::array<Var<T>, 4> stages;  ///< backbone stages 2..5
  std::array<Var<T>, 4> heads;   ///< per-stage L-channel maps (CCPB or plain 1x1)
  std::array<Var<T>, 4> paths;   ///< after BCIB (equal to heads when ablated)
  Var<T> stacked;                ///< 4L channels at 1/4 resolution
  Var<T> fused;                  ///< attention-weighted, upsampled, optionally MCFB-refined
  ModelOutput<T> output;
};

/// The full segmentation network: backbone, per-stage CCPB heads, BCIB,
/// channel attention over the stacked 4L maps, MCFB at input resolution and
/// a linear classifier.
template <typename T>
class BiCANet {
 public:
  explicit BiCANet(const ModelConfig& config);
  BiCANet(const BiCANet&) = delete;
  BiCANet& operator=(const BiCANet&) = delete;
  BiCANet(BiCANet&&) = default;
  BiCANet& operator=(BiCANet&&) = default;

  ModelOutput<T> forward(Tape<T>& tape, const Var<T>& x, Mode mode) const;
  ModelTrace<T> trace(Tape<T>& tape, const Var<T>& x, Mode mode) const;

  const ModelConfig& config() const noexcept { return config_; }
  ParamStore<T>& params() noexcept { return store_; }
  const ParamStore<T>& params() const noexcept { return store_; }

  const Backbone<T>& backbone() const noexcept { return backbone_; }
  const CcpbBlock<T>& ccpb(int i) const { return ccpb_.at(i); }
  const BcibBlock<T>& bcib() const noexcept { return bcib_; }
  const McfbBlock<T>& mcfb() const noexcept { return mcfb_; }
  const ChannelAttention<T>& attention() const noexcept { return attention_; }

 private:
  ModelConfig config_;
  ParamStore<T> store_;
  Backbone<T> backbone_;
  std::array<CcpbBlock<T>, 4> ccpb_;
  std::array<ConvLayer<T>, 4> plain_heads_;  // used when CCPB is ablated
  BcibBlock<T> bcib_;
  ChannelAttention<T> attention_;
  McfbBlock<T> mcfb_;
  ConvLayer<T> classifier_;
};

/// Same configuration with a different set of active blocks.
ModelConfig ablation_variant(const ModelConfig& base, const AblationFlags& flags);

struct OhemConfig {
  bool enabled = true;
  /// Pixels whose target probability is below this are kept.
  double threshold = 0.7;
  /// Never keep fewer than this fraction (rounded up) of the valid pixels.
  double min_keep_fraction = 0.25;
};

/// Selection mask over pixels for the hard-example-mined loss. Ignored pixels
/// are never selected.
std::vector<std::uint8_t> ohem_select(std::span<const double> target_prob, const LabelMap& labels,
                                      const OhemConfig& config);

struct LossReport {
  double total = 0.0;
  double master = 0.0;
  std::array<double, 4> aux{};
  double lambda = 0.0;
};

template <typename T>
struct Loss {
  Var<T> total;
  LossReport report;
};

/// master + lambda * sum(aux). The master term is mean cross-entropy over the
/// OHEM selection; each auxiliary term is mean cross-entropy over every
/// non-ignored pixel.
template <typename T>
Loss<T> compute_loss(Tape<T>& tape, const ModelOutput<T>& output, const LabelMap& labels, double lambda,
                     const OhemConfig& ohem);

extern template class BiCANet<float>;
extern template class BiCANet<double>;

}  // namespace bicanet
