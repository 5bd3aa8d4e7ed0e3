#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "bicanet/tensor.hpp"

namespace bicanet::data {

// ---------------------------------------------------------------------------
// Raster I/O: binary PGM (P5) and PPM (P6), 8 bits per channel.
// ---------------------------------------------------------------------------

struct Raster {
  int width = 0;
  int height = 0;
  int channels = 1;  ///< 1 for P5, 3 for P6
  std::vector<std::uint8_t> pixels;  ///< row-major, channels interleaved

  bool operator==(const Raster&) const = default;
};

/// Accepts any whitespace and '#' comments in the header; maxval must be 255.
/// Throws ParseError carrying the byte offset of the first problem.
Raster decode_pnm(const std::vector<std::uint8_t>& bytes);
/// Canonical header "P5|P6\n<w> <h>\n255\n" followed by the raw samples.
std::vector<std::uint8_t> encode_pnm(const Raster& raster);

Raster read_pnm(const std::filesystem::path& path);
void write_pnm(const std::filesystem::path& path, const Raster& raster);

/// Reads a P5 label map; values >= num_classes other than 255 raise DataError.
LabelMap read_labels(const std::filesystem::path& path, int num_classes);
void write_labels(const std::filesystem::path& path, const LabelMap& labels, int batch_index = 0);

/// The 256-entry colour table (PASCAL VOC bit-interleaving scheme).
const std::array<std::array<std::uint8_t, 3>, 256>& palette();
/// P6 rendering of a label map through the palette.
Raster colorize(const LabelMap& labels, int batch_index = 0);

/// [0,1] float image (1,3,h,w) <-> 8-bit RGB raster (rounded, clamped).
Raster to_raster(const Tensor<float>& image, int batch_index = 0);
Tensor<float> from_raster(const Raster& raster);

// ---------------------------------------------------------------------------
// Samples and the synthetic shapes generator.
// ---------------------------------------------------------------------------

struct SegSample {
  Tensor<float> image;  ///< (1, 3, h, w) in [0, 1]
  LabelMap labels;      ///< (1, h, w)
};

/// Shapes agree and at least one pixel is not ignored; throws DataError otherwise.
void validate(const SegSample& sample);

enum class Primitive { kRectangle, kDisk, kTriangle, kRing };

/// Primitive drawn for a foreground class (class 0 is background).
Primitive primitive_for_class(int cls);

struct SyntheticSpec {
  int num_classes = 4;
  int min_shapes = 1;
  int max_shapes = 4;
  int width = 64;
  int height = 64;
  /// Per-shape uniform offset added to the class base colour, in [0, 1] units.
  double color_jitter = 0.15;
  /// Probability that a shape is painted with another class's base colour,
  /// which forces the model to rely on shape and surroundings.
  double color_confusion = 0.3;
  /// Standard deviation of per-pixel Gaussian noise.
  double noise = 0.05;
  std::uint64_t seed = 0;
};

/// Throws ConfigError for inconsistent specs.
void validate(const SyntheticSpec& spec);

/// Sample `index` of the stream defined by `spec`; depends only on (spec, index).
SegSample generate_sample(const SyntheticSpec& spec, std::size_t index);
std::vector<SegSample> generate_synthetic(const SyntheticSpec& spec, std::size_t count);

// ---------------------------------------------------------------------------
// Augmentation.
// ---------------------------------------------------------------------------

struct AugmentConfig {
  double scale_min = 0.5;
  double scale_max = 2.0;
  double aspect_min = 0.7;
  double aspect_max = 1.5;
  bool horizontal_flip = true;
  bool vertical_flip = false;
  int crop_height = 64;
  int crop_width = 64;
};

/// Bilinear image resampling and nearest-neighbour labels, half-pixel centres.
SegSample resize(const SegSample& sample, int height, int width);
SegSample flip_horizontal(const SegSample& sample);
SegSample flip_vertical(const SegSample& sample);
/// Window of (height, width) with top-left (y0, x0); may reach outside the
/// sample, where the image is zero and the labels are ignored.
SegSample crop(const SegSample& sample, int y0, int x0, int height, int width);

/// Random scale and aspect ratio, optional flips, then a random crop (padding
/// when the scaled sample is smaller than the crop).
SegSample augment(const SegSample& sample, const AugmentConfig& config, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// On-disk dataset: images/NNNN.ppm, labels/NNNN.pgm, manifest.json.
// ---------------------------------------------------------------------------

struct Manifest {
  int num_classes = 0;
  std::vector<std::pair<std::string, std::vector<std::size_t>>> splits;

  const std::vector<std::size_t>& split(const std::string& name) const;
};

std::string sample_stem(std::size_t index);

/// Generates `count` samples; the last `val_count` form the "val" split and
/// the rest "train".
Manifest write_synthetic_dataset(const std::filesystem::path& dir, const SyntheticSpec& spec,
                                 std::size_t count, std::size_t val_count);

Manifest read_manifest(const std::filesystem::path& dir);
std::vector<SegSample> load_split(const std::filesystem::path& dir, const std::string& split);

}  // namespace bicanet::data
