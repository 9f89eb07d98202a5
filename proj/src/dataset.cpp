#include "setseg/dataset.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <cctype>
#include <map>
#include <sstream>

#include "setseg/tensor_io.hpp"

namespace setseg {

namespace fs = std::filesystem;

Rle rle_encode(const Raster& binary) {
  Rle rle{binary.height, binary.width, {}};
  bool current = false;
  std::int64_t run = 0;
  for (int x = 0; x < binary.width; ++x) {
    for (int y = 0; y < binary.height; ++y) {
      const bool on = binary.at(y, x) >= 0.5;
      if (on != current) {
        rle.counts.push_back(run);
        run = 0;
        current = on;
      }
      ++run;
    }
  }
  rle.counts.push_back(run);
  return rle;
}

Raster rle_decode(const Rle& rle) {
  if (rle.height < 0 || rle.width < 0) throw DataError("RLE with negative size");
  Raster out(rle.height, rle.width, 0.0);
  const std::int64_t total = static_cast<std::int64_t>(rle.height) * rle.width;
  std::int64_t pos = 0;
  bool on = false;
  for (std::int64_t run : rle.counts) {
    if (run < 0) throw DataError("RLE with a negative run");
    if (pos + run > total) throw DataError("RLE runs exceed the raster size");
    if (on) {
      for (std::int64_t i = pos; i < pos + run; ++i) {
        const auto x = static_cast<int>(i / rle.height);
        const auto y = static_cast<int>(i % rle.height);
        out.at(y, x) = 1.0;
      }
    }
    pos += run;
    on = !on;
  }
  if (pos != total) throw DataError("RLE runs do not cover the raster");
  return out;
}

Raster rasterize_polygon(const std::vector<std::pair<double, double>>& v, int height, int width) {
  Raster out(height, width, 0.0);
  const size_t n = v.size();
  if (n < 3) return out;
  for (int y = 0; y < height; ++y) {
    const double py = y + 0.5;
    for (int x = 0; x < width; ++x) {
      const double px = x + 0.5;
      bool inside = false;
      for (size_t i = 0, j = n - 1; i < n; j = i++) {
        const auto [xi, yi] = v[i];
        const auto [xj, yj] = v[j];
        if ((yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi) inside = !inside;
      }
      if (inside) out.at(y, x) = 1.0;
    }
  }
  return out;
}

BBox tight_box(const Raster& mask) {
  int x0 = mask.width, y0 = mask.height, x1 = -1, y1 = -1;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (mask.at(y, x) >= 0.5) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
    }
  }
  if (x1 < 0) return {};
  return {static_cast<double>(x0) / mask.width, static_cast<double>(y0) / mask.height,
          static_cast<double>(x1 + 1) / mask.width, static_cast<double>(y1 + 1) / mask.height};
}

// ---- shapes -------------------------------------------------------------------

void ShapesConfig::validate() const {
  if (image_size < 8) throw std::invalid_argument("shapes: image_size must be >= 8");
  if (kinds.empty()) throw std::invalid_argument("shapes: no shape kinds");
  if (min_objects < 0 || max_objects < min_objects) throw std::invalid_argument("shapes: bad object count range");
  if (min_size <= 0.0 || max_size < min_size || max_size + 2.0 > image_size) {
    throw std::invalid_argument("shapes: bad size range");
  }
  if (min_intensity <= 0.0 || max_intensity > 1.0 || max_intensity < min_intensity) {
    throw std::invalid_argument("shapes: intensities must lie in (0, 1]");
  }
  if (gap < 0.0 || max_attempts < 1) throw std::invalid_argument("shapes: bad placement settings");
}

Raster draw_disk(int height, int width, double cx, double cy, double radius) {
  Raster out(height, width, 0.0);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      if (dx * dx + dy * dy <= radius * radius) out.at(y, x) = 1.0;
    }
  }
  return out;
}

Raster draw_rectangle(int height, int width, double cx, double cy, double w, double h, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  std::vector<std::pair<double, double>> corners;
  for (const auto& [u, v] : {std::pair{-0.5, -0.5}, std::pair{0.5, -0.5}, std::pair{0.5, 0.5}, std::pair{-0.5, 0.5}}) {
    const double px = u * w, py = v * h;
    corners.emplace_back(cx + c * px - s * py, cy + s * px + c * py);
  }
  return rasterize_polygon(corners, height, width);
}

Raster draw_triangle(int height, int width, const std::array<std::pair<double, double>, 3>& vertices) {
  return rasterize_polygon({vertices.begin(), vertices.end()}, height, width);
}

namespace {

const char* kind_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::kDisk: return "disk";
    case ShapeKind::kRectangle: return "rectangle";
    case ShapeKind::kTriangle: return "triangle";
  }
  return "shape";
}

struct Placed {
  double cx, cy, radius;
};

}  // namespace

Dataset gen_shapes(const ShapesConfig& cfg, int num_images) {
  cfg.validate();
  if (num_images < 0) throw std::invalid_argument("gen_shapes: negative image count");
  Rng rng(cfg.seed);
  Dataset ds;
  for (ShapeKind k : {ShapeKind::kDisk, ShapeKind::kRectangle, ShapeKind::kTriangle}) ds.categories.push_back(kind_name(k));
  const int n = cfg.image_size;

  for (int i = 0; i < num_images; ++i) {
    Sample sample;
    sample.id = i;
    std::ostringstream name;
    name << "images/" << std::setw(6) << std::setfill('0') << i << ".pgm";
    sample.file = name.str();
    sample.height = sample.width = n;
    sample.image = Raster(n, n, 0.0);

    const int count = rng.uniform_int(cfg.min_objects, cfg.max_objects);
    std::vector<Placed> placed;
    for (int o = 0; o < count; ++o) {
      for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
        const ShapeKind kind = cfg.kinds[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(cfg.kinds.size()) - 1))];
        const double size = rng.uniform(cfg.min_size, cfg.max_size);
        const double r = 0.5 * size;
        const double cx = rng.uniform(r + 1.0, n - r - 1.0);
        const double cy = rng.uniform(r + 1.0, n - r - 1.0);
        const bool clash = std::any_of(placed.begin(), placed.end(), [&](const Placed& p) {
          return std::hypot(p.cx - cx, p.cy - cy) < p.radius + r + cfg.gap;
        });
        if (clash) continue;

        Raster mask;
        switch (kind) {
          case ShapeKind::kDisk: mask = draw_disk(n, n, cx, cy, r); break;
          case ShapeKind::kRectangle: {
            const double w = size * rng.uniform(0.45, 0.7);
            const double h = size * rng.uniform(0.45, 0.7);
            mask = draw_rectangle(n, n, cx, cy, w, h, rng.uniform(0.0, 0.5 * std::numbers::pi));
            break;
          }
          case ShapeKind::kTriangle: {
            const double a0 = rng.uniform(0.0, 2.0 * std::numbers::pi);
            std::array<std::pair<double, double>, 3> v;
            for (int c = 0; c < 3; ++c) {
              const double a = a0 + c * 2.0 * std::numbers::pi / 3.0 + rng.uniform(-0.3, 0.3);
              v[static_cast<size_t>(c)] = {cx + r * std::cos(a), cy + r * std::sin(a)};
            }
            mask = draw_triangle(n, n, v);
            break;
          }
        }
        // Intensities are multiples of 1/255 so a PGM round trip is exact.
        const double intensity = std::round(rng.uniform(cfg.min_intensity, cfg.max_intensity) * 255.0) / 255.0;
        const BBox box = tight_box(mask);
        if (box.degenerate()) continue;
        for (size_t p = 0; p < mask.data.size(); ++p) {
          if (mask.data[p] > 0.0) sample.image.data[p] = intensity;
        }
        sample.instances.push_back({static_cast<int>(kind), box, std::move(mask)});
        placed.push_back({cx, cy, r});
        break;
      }
    }
    ds.samples.push_back(std::move(sample));
  }
  return ds;
}

// ---- annotation JSON ------------------------------------------------------------

nlohmann::json dataset_to_json(const Dataset& ds) {
  nlohmann::json doc;
  doc["images"] = nlohmann::json::array();
  doc["categories"] = nlohmann::json::array();
  doc["instances"] = nlohmann::json::array();
  for (size_t c = 0; c < ds.categories.size(); ++c) doc["categories"].push_back({{"id", c}, {"name", ds.categories[c]}});
  for (const Sample& s : ds.samples) {
    doc["images"].push_back({{"id", s.id}, {"file", s.file}, {"width", s.width}, {"height", s.height}});
    for (const Instance& inst : s.instances) {
      const Rle rle = rle_encode(inst.mask);
      doc["instances"].push_back({{"image_id", s.id},
                                  {"category", inst.category},
                                  {"bbox", {inst.box.x0, inst.box.y0, inst.box.x1, inst.box.y1}},
                                  {"rle", {{"size", {rle.height, rle.width}}, {"counts", rle.counts}}}});
    }
  }
  return doc;
}

Dataset dataset_from_json(const nlohmann::json& doc) {
  Dataset ds;
  try {
    for (const auto& c : doc.at("categories")) ds.categories.push_back(c.at("name").get<std::string>());
    std::map<int, size_t> index;
    for (const auto& im : doc.at("images")) {
      Sample s;
      s.id = im.at("id").get<int>();
      s.file = im.value("file", std::string());
      s.width = im.at("width").get<int>();
      s.height = im.at("height").get<int>();
      if (s.width < 1 || s.height < 1) throw DataError("image " + std::to_string(s.id) + " has a non-positive size");
      if (!index.emplace(s.id, ds.samples.size()).second) throw DataError("duplicate image id " + std::to_string(s.id));
      ds.samples.push_back(std::move(s));
    }
    const int num_categories = static_cast<int>(ds.categories.size());
    for (const auto& a : doc.at("instances")) {
      const int image_id = a.at("image_id").get<int>();
      auto it = index.find(image_id);
      if (it == index.end()) throw DataError("instance references unknown image " + std::to_string(image_id));
      Sample& s = ds.samples[it->second];
      Instance inst;
      inst.category = a.at("category").get<int>();
      if (inst.category < 0 || inst.category >= num_categories) {
        throw DataError("instance category " + std::to_string(inst.category) + " out of range");
      }
      if (a.contains("rle")) {
        Rle rle;
        const auto size = a.at("rle").at("size").get<std::vector<int>>();
        if (size.size() != 2) throw DataError("RLE size must be [height, width]");
        rle.height = size[0];
        rle.width = size[1];
        rle.counts = a.at("rle").at("counts").get<std::vector<std::int64_t>>();
        if (rle.height != s.height || rle.width != s.width) throw DataError("RLE size differs from its image size");
        inst.mask = rle_decode(rle);
      } else if (a.contains("polygon")) {
        std::vector<std::pair<double, double>> pts;
        const auto& poly = a.at("polygon");
        if (!poly.empty() && poly.front().is_array()) {
          for (const auto& p : poly) pts.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
        } else {
          const auto flat = poly.get<std::vector<double>>();
          if (flat.size() % 2 != 0) throw DataError("polygon needs an even number of coordinates");
          for (size_t i = 0; i < flat.size(); i += 2) pts.emplace_back(flat[i], flat[i + 1]);
        }
        inst.mask = rasterize_polygon(pts, s.height, s.width);
      } else {
        throw DataError("instance has neither 'rle' nor 'polygon'");
      }
      if (a.contains("bbox")) {
        const auto b = a.at("bbox").get<std::vector<double>>();
        if (b.size() != 4) throw DataError("bbox must have 4 entries");
        inst.box = BBox{b[0], b[1], b[2], b[3]};
        if (!inst.box.valid()) throw DataError("invalid bbox");
      } else {
        inst.box = tight_box(inst.mask);
      }
      s.instances.push_back(std::move(inst));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed annotation document: ") + e.what());
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "images");
  for (const Sample& s : ds.samples) {
    if (!s.image.empty()) write_pgm((fs::path(dir) / s.file).string(), s.image);
  }
  std::ofstream out(fs::path(dir) / "annotations.json");
  if (!out) throw DataError("cannot write annotations in '" + dir + "'");
  out << dataset_to_json(ds).dump(1) << "\n";
}

Dataset load_dataset(const std::string& annotation_path, bool load_images) {
  std::ifstream in(annotation_path);
  if (!in) throw DataError("cannot open '" + annotation_path + "'");
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("'" + annotation_path + "' is not valid JSON: " + e.what());
  }
  Dataset ds = dataset_from_json(doc);
  if (load_images) {
    const fs::path base = fs::path(annotation_path).parent_path();
    for (Sample& s : ds.samples) {
      s.image = read_image((base / s.file).string());
      if (s.image.height != s.height || s.image.width != s.width) {
        throw DataError("image '" + s.file + "' does not match its annotated size");
      }
    }
  }
  return ds;
}

// ---- images ---------------------------------------------------------------------

namespace {

Raster read_png(const std::string& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_file(&image, path.c_str()) == 0) {
    throw DataError("cannot read PNG '" + path + "': " + image.message);
  }
  image.format = PNG_FORMAT_GRAY;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr) == 0) {
    throw DataError("cannot decode PNG '" + path + "': " + image.message);
  }
  Raster out(static_cast<int>(image.height), static_cast<int>(image.width));
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = buffer[i] / 255.0;
  return out;
}

std::string next_token(std::istream& in) {
  std::string tok;
  while (in) {
    const int c = in.peek();
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  in >> tok;
  return tok;
}

Raster read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  const std::string magic = next_token(in);
  if (magic != "P5" && magic != "P2") throw DataError("'" + path + "' is not a PGM file");
  int width = 0, height = 0, maxval = 0;
  try {
    width = std::stoi(next_token(in));
    height = std::stoi(next_token(in));
    maxval = std::stoi(next_token(in));
  } catch (const std::exception&) {
    throw DataError("malformed PGM header in '" + path + "'");
  }
  if (width < 1 || height < 1 || maxval < 1 || maxval > 65535) throw DataError("unsupported PGM header in '" + path + "'");
  Raster out(height, width);
  if (magic == "P5") {
    in.get();
    const int bytes = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> buf(out.data.size() * static_cast<size_t>(bytes));
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() != static_cast<std::streamsize>(buf.size())) throw DataError("truncated PGM '" + path + "'");
    for (size_t i = 0; i < out.data.size(); ++i) {
      const int v = bytes == 2 ? (buf[2 * i] << 8) | buf[2 * i + 1] : buf[i];
      out.data[i] = static_cast<double>(v) / maxval;
    }
  } else {
    for (double& v : out.data) {
      int x = 0;
      if (!(in >> x)) throw DataError("truncated PGM '" + path + "'");
      v = static_cast<double>(x) / maxval;
    }
  }
  return out;
}

}  // namespace

Raster read_image(const std::string& path) {
  const std::string ext = fs::path(path).extension().string();
  if (ext == ".png" || ext == ".PNG") return read_png(path);
  return read_pgm(path);
}

std::vector<std::uint8_t> encode_pgm(const Raster& image) {
  const std::string header = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (double v : image.data) out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  return out;
}

void write_pgm(const std::string& path, const Raster& image) { write_file_bytes(path, encode_pgm(image)); }

// ---- conversion -------------------------------------------------------------------

GroundTruthSet ground_truth(const Sample& sample, int side) {
  GroundTruthSet gt;
  for (const Instance& inst : sample.instances) {
    if (inst.box.degenerate() || tight_box(inst.mask).degenerate()) continue;
    gt.boxes.push_back(inst.box);
    gt.classes.push_back(inst.category);
    gt.masks.push_back(crop_resize_mask(inst.mask, inst.box, side));
  }
  return gt;
}

std::vector<Mask> instance_masks(const Dataset& ds, int side, int* skipped) {
  std::vector<Mask> out;
  int empty = 0;
  for (const Sample& s : ds.samples) {
    for (const Instance& inst : s.instances) {
      if (inst.box.degenerate() || tight_box(inst.mask).degenerate()) {
        ++empty;
        continue;
      }
      out.push_back(crop_resize_mask(inst.mask, inst.box, side));
    }
  }
  if (skipped != nullptr) *skipped = empty;
  return out;
}

}  // namespace setseg
