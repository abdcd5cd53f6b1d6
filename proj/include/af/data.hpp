#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "af/rng.hpp"
#include "af/tensor.hpp"

namespace af {

enum class DataMode { kMtl, kLsd };

const char* mode_name(DataMode m);
DataMode parse_mode(const std::string& name);  // throws invalid_argument

constexpr std::size_t kNumAus = 12;
constexpr std::size_t kImageSize = 64;
constexpr double kVaMissing = -5.0;  // sentinel for absent valence/arousal
constexpr int kClassMissing = -1;    // sentinel for absent expr or AU labels

/// Generator coordinates for one face. All label information is a pure
/// function of the first four fields; jitter_seed only drives pixel noise.
struct FaceLatent {
  double mouth_curve = 0.0;  // [-1,1]; positive curls the mouth corners up
  double eye_open = 0.5;     // [0,1]
  double brow_raise = 0.0;   // [-1,1]
  double brow_knit = 0.0;    // [0,1]; pulls the inner brow ends down
  std::uint64_t jitter_seed = 0;
};

struct Labels {
  double valence = 0.0;
  double arousal = 0.0;
  int expr = 0;
  std::vector<int> aus;  // kNumAus entries of {0,1}
};

/// Expression prototypes in (valence, arousal, brow_raise, brow_knit) space.
/// MTL order: neutral, anger, disgust, fear, happiness, sadness, surprise,
/// other. LSD drops neutral/other and keeps the six basic emotions.
const std::vector<std::array<double, 4>>& expr_prototypes(DataMode m);
const std::vector<std::string>& expr_names(DataMode m);

/// Deterministic raster of the sketch face; grayscale replicated to three
/// channels, uniform pixel noise of amplitude 0.02 seeded by jitter_seed.
/// Throws std::invalid_argument below 32x32.
Tensor render_face(const FaceLatent& latent, std::size_t h, std::size_t w);

/// Pixel box (y0,x0 inclusive, y1,x1 exclusive) that contains every pixel the
/// mouth stroke can touch for any mouth_curve.
struct PixelBox {
  std::size_t y0, x0, y1, x1;
};
PixelBox mouth_region(std::size_t h, std::size_t w);

/// valence = mouth_curve; arousal = 2*eye_open - 1; expression = nearest
/// prototype (ties break toward the lower id); AUs = fixed geometry
/// thresholds. Pure.
Labels label_from_latent(const FaceLatent& latent, DataMode mode);

/// Draws a latent: 3 in 4 anchored near a uniformly chosen prototype, 1 in 4
/// fully random. Keeps every class populated without making them separable
/// by frequency alone.
FaceLatent sample_latent(DataMode mode, Rng& rng);

/// One annotation row. aus is empty in LSD mode.
struct Sample {
  std::string path;
  double valence = kVaMissing;
  double arousal = kVaMissing;
  int expr = kClassMissing;
  std::vector<int> aus;
};

/// Binary 8-bit pixmap I/O. Images are [3 x H x W] in [0,1]; writing
/// quantizes to 255 levels.
void write_ppm(const std::string& path, const Tensor& image);
Tensor load_image(const std::string& path);

/// Renders n faces into out_dir/images plus out_dir/annotations.csv and
/// returns the annotation path. MTL rows carry all three tasks, with one
/// task sentinel-masked on 10% of rows; LSD rows are (path, expr) with six
/// classes. Deterministic in (n, mode, seed).
std::string generate_dataset(std::size_t n, DataMode mode, std::uint64_t seed,
                             const std::string& out_dir,
                             std::size_t size = kImageSize);

std::vector<Sample> parse_annotations(const std::string& path, DataMode mode);
void write_annotations(const std::string& path,
                       const std::vector<Sample>& samples, DataMode mode);

/// All images of a manifest resident in memory as 8-bit channel-major
/// planes; batches convert to doubles on demand.
struct Dataset {
  DataMode mode = DataMode::kMtl;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Sample> meta;
  std::vector<std::vector<std::uint8_t>> pixels;  // 3*H*W each
};
Dataset load_dataset(const std::string& annotation_path, DataMode mode);

struct Batch {
  Tensor images;  // [B, 3, H, W]
  std::vector<double> valence, arousal;
  std::vector<int> expr;
  std::vector<std::vector<int>> aus;  // empty vectors in LSD mode
  std::size_t size() const { return expr.size(); }
};

/// Mirror image across the vertical axis; an exact involution.
Tensor hflip(const Tensor& image);

/// Crop [y0, y0+ch) x [x0, x0+cw) and bilinearly resize back to the source
/// size. A full-frame crop reproduces the input exactly.
Tensor crop_resize(const Tensor& image, std::size_t y0, std::size_t x0,
                   std::size_t ch, std::size_t cw);

/// Seeded epoch shuffling with optional train-time augmentation (crop-resize
/// keeping at least 85% area, horizontal flip p=0.5, brightness scale
/// uniform [0.8,1.2], then clamp to [0,1]). The final partial batch is kept.
class BatchStream {
 public:
  BatchStream(const Dataset& ds, std::size_t batch_size, std::uint64_t seed,
              bool augment);
  void start_epoch(std::size_t epoch);
  bool next(Batch& out);
  std::size_t batches_per_epoch() const;

 private:
  const Dataset* ds_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  bool augment_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  Rng aug_rng_{0};
};

}  // namespace af
