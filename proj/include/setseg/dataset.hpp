#pragma once

#include "setseg/common.hpp"
#include "setseg/geometry.hpp"
#include "setseg/mask_codec.hpp"
#include "setseg/matching.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace setseg {

struct Instance {
  int category = 0;
  BBox box;     // image fractions
  Raster mask;  // binary, image sized
};

struct Sample {
  int id = 0;
  std::string file;  // relative to the annotation file
  Raster image;      // grayscale in [0, 1]; empty when images were not loaded
  int height = 0;
  int width = 0;
  std::vector<Instance> instances;
};

struct Dataset {
  std::vector<std::string> categories;
  std::vector<Sample> samples;
};

// ---- run-length encoding ----------------------------------------------------

/// Uncompressed COCO-style RLE: run lengths over the column-major pixel
/// order, starting with a (possibly empty) run of zeros.
struct Rle {
  int height = 0;
  int width = 0;
  std::vector<std::int64_t> counts;
};

Rle rle_encode(const Raster& binary);
/// Throws DataError unless the runs cover exactly height*width pixels.
Raster rle_decode(const Rle& rle);

/// Even-odd fill of a polygon given as pixel-coordinate vertices; a pixel is
/// inside when its center is.
Raster rasterize_polygon(const std::vector<std::pair<double, double>>& vertices, int height, int width);

/// Tight box of the nonzero pixels in image fractions; all-zero masks give a
/// zero box.
BBox tight_box(const Raster& mask);

// ---- synthetic shapes -------------------------------------------------------

enum class ShapeKind { kDisk = 0, kRectangle = 1, kTriangle = 2 };

struct ShapesConfig {
  std::uint64_t seed = 0;
  int image_size = 64;
  std::vector<ShapeKind> kinds{ShapeKind::kDisk, ShapeKind::kRectangle, ShapeKind::kTriangle};
  int min_objects = 1;
  int max_objects = 3;
  double min_size = 16.0;  // object extent in pixels
  double max_size = 32.0;
  double min_intensity = 0.5;
  double max_intensity = 1.0;
  double gap = 2.0;  // minimum pixel gap between objects' bounding circles
  int max_attempts = 200;

  void validate() const;
};

/// Deterministic dataset of non-overlapping disks, rotated rectangles and
/// triangles on a black background. Category index = shape kind.
Dataset gen_shapes(const ShapesConfig& cfg, int num_images);

/// Pixel-center rasterizations.
Raster draw_disk(int height, int width, double cx, double cy, double radius);
Raster draw_rectangle(int height, int width, double cx, double cy, double w, double h, double angle);
Raster draw_triangle(int height, int width, const std::array<std::pair<double, double>, 3>& vertices);

// ---- annotation documents ---------------------------------------------------

nlohmann::json dataset_to_json(const Dataset& ds);
/// Parses the annotation schema; image rasters are left empty.
Dataset dataset_from_json(const nlohmann::json& doc);

/// Writes `<dir>/annotations.json` and one PGM per image under `<dir>/images`.
void save_dataset(const Dataset& ds, const std::string& dir);
/// Loads an annotation file and, when `load_images`, the referenced images
/// (paths relative to the annotation file's directory).
Dataset load_dataset(const std::string& annotation_path, bool load_images = true);

// ---- images -------------------------------------------------------------------

/// Binary (P5) or ASCII (P2) PGM, or 8/16-bit PNG (color is averaged to gray).
/// Values are scaled to [0, 1].
Raster read_image(const std::string& path);
/// 8-bit binary PGM.
void write_pgm(const std::string& path, const Raster& image);
std::vector<std::uint8_t> encode_pgm(const Raster& image);

// ---- conversion -----------------------------------------------------------------

/// Ground truth in the codec frame: boxes, categories and s x s crops.
/// Instances with empty masks are skipped.
GroundTruthSet ground_truth(const Sample& sample, int side);
/// Every non-empty instance mask cropped to s x s under its box; `skipped`
/// receives the number of empty instances left out.
std::vector<Mask> instance_masks(const Dataset& ds, int side, int* skipped = nullptr);

}  // namespace setseg
