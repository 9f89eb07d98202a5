#include "setseg/cli.hpp"
#include "setseg/config.hpp"
#include "setseg/dataset.hpp"
#include "setseg/io.hpp"
#include "setseg/tensor_io.hpp"

#include "support.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

using namespace setseg;
using doctest::Approx;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = 0;
  std::string out;
  std::string err;
};

CliResult run(std::vector<std::string> args) {
  args.insert(args.begin(), "setseg");
  std::vector<const char*> argv;
  for (const std::string& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

// Fresh scratch directory per test case, removed on destruction.
struct ScratchDir {
  fs::path path;
  explicit ScratchDir(const std::string& name) {
    path = fs::temp_directory_path() / ("setseg_cli_" + name);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~ScratchDir() { fs::remove_all(path); }
  std::string operator/(const std::string& leaf) const { return (path / leaf).string(); }
};

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) { std::ofstream(path, std::ios::binary) << text; }

// ---- minimal PNG writer (stored deflate blocks) ---------------------------------

std::uint32_t crc32(const std::uint8_t* data, size_t n, std::uint32_t crc = 0xffffffffu) {
  for (size_t i = 0; i < n; ++i) {
    crc ^= data[i];
    for (int b = 0; b < 8; ++b) crc = (crc >> 1) ^ (0xedb88320u & (0u - (crc & 1u)));
  }
  return crc;
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

void put_chunk(std::vector<std::uint8_t>& out, const char* type, const std::vector<std::uint8_t>& data) {
  put_be32(out, static_cast<std::uint32_t>(data.size()));
  std::vector<std::uint8_t> body(type, type + 4);
  body.insert(body.end(), data.begin(), data.end());
  out.insert(out.end(), body.begin(), body.end());
  put_be32(out, crc32(body.data(), body.size()) ^ 0xffffffffu);
}

std::vector<std::uint8_t> encode_png(int width, int height, int channels, const std::vector<std::uint8_t>& pixels) {
  std::vector<std::uint8_t> raw;
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), pixels.begin() + static_cast<long>(y) * width * channels,
               pixels.begin() + static_cast<long>(y + 1) * width * channels);
  }
  std::vector<std::uint8_t> z{0x78, 0x01, 0x01};
  const auto len = static_cast<std::uint16_t>(raw.size());
  z.push_back(static_cast<std::uint8_t>(len & 0xff));
  z.push_back(static_cast<std::uint8_t>(len >> 8));
  z.push_back(static_cast<std::uint8_t>(~len & 0xff));
  z.push_back(static_cast<std::uint8_t>((~len >> 8) & 0xff));
  z.insert(z.end(), raw.begin(), raw.end());
  std::uint32_t a = 1, b = 0;
  for (std::uint8_t v : raw) {
    a = (a + v) % 65521;
    b = (b + a) % 65521;
  }
  put_be32(z, (b << 16) | a);

  std::vector<std::uint8_t> png{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<std::uint8_t> ihdr;
  put_be32(ihdr, static_cast<std::uint32_t>(width));
  put_be32(ihdr, static_cast<std::uint32_t>(height));
  ihdr.insert(ihdr.end(), {8, static_cast<std::uint8_t>(channels == 3 ? 2 : 0), 0, 0, 0});
  put_chunk(png, "IHDR", ihdr);
  put_chunk(png, "IDAT", z);
  put_chunk(png, "IEND", {});
  return png;
}

// ---- fixtures ------------------------------------------------------------------------

// Small config for end-to-end subcommand runs.
const char* kSmallConfig = R"({
  "seed": 3,
  "model": {"num_queries": 4, "stages": 2, "embedding_dim": 6, "dim": 8, "heads": 2, "dynamic_dim": 2,
            "roi_size": 3, "ffn_dim": 16,
            "level_rule": {"image_size": 32, "canonical_size": 16, "canonical_level": 1},
            "backbone": {"stem_channels": 4, "levels": 2}},
  "codec": {"side": 12},
  "train": {"steps": 4, "batch_size": 2, "log_every": 1},
  "data": {"num_images": 3, "image_size": 32, "min_size": 8, "max_size": 14}
})";

// Dataset of one image per entry, each holding `mask` as its only instance.
Dataset dataset_of(const std::vector<Raster>& masks) {
  Dataset ds;
  ds.categories = {"disk", "rectangle", "triangle"};
  for (size_t i = 0; i < masks.size(); ++i) {
    Sample s;
    s.id = static_cast<int>(i);
    s.file = "images/" + std::to_string(i) + ".pgm";
    s.height = masks[i].height;
    s.width = masks[i].width;
    s.image = masks[i];
    s.instances.push_back({0, tight_box(masks[i]), masks[i]});
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

MaskCodec shapes_codec(int side, int dim) {
  Rng rng(41);
  std::vector<Mask> masks;
  for (int i = 0; i < 40; ++i) masks.push_back(testing::random_shape_mask(rng, side));
  return fit_codec(masks, dim);
}

}  // namespace

// ---- run-length encoding and rasterization ----------------------------------------

TEST_CASE("RLE examples and round trip") {
  Raster r(2, 3);
  // Column-major order: (0,0) (1,0) (0,1) (1,1) (0,2) (1,2).
  r.at(1, 0) = 1;
  r.at(0, 1) = 1;
  r.at(1, 2) = 1;
  const Rle rle = rle_encode(r);
  CHECK(rle.counts == std::vector<std::int64_t>{1, 2, 2, 1});
  CHECK(rle_decode(rle) == r);

  Raster full(2, 2, 1.0);
  CHECK(rle_encode(full).counts == std::vector<std::int64_t>{0, 4});
  CHECK(rle_encode(Raster(3, 1)).counts == std::vector<std::int64_t>{3});

  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    Raster m(rng.uniform_int(1, 12), rng.uniform_int(1, 12));
    const double p = rng.uniform();
    for (double& v : m.data) v = rng.uniform() < p ? 1.0 : 0.0;
    CHECK(rle_decode(rle_encode(m)) == m);
  }

  CHECK_THROWS_AS(rle_decode({2, 2, {1, 2}}), DataError);
  CHECK_THROWS_AS(rle_decode({2, 2, {1, 2, 3}}), DataError);
  CHECK_THROWS_AS(rle_decode({2, 2, {-1, 5}}), DataError);
}

TEST_CASE("polygon rasterization and tight boxes") {
  const Raster sq = rasterize_polygon({{1, 1}, {5, 1}, {5, 4}, {1, 4}}, 8, 8);
  double area = 0;
  for (double v : sq.data) area += v;
  CHECK(area == 12.0);
  CHECK(sq.at(1, 1) == 1.0);
  CHECK(sq.at(3, 4) == 1.0);
  CHECK(sq.at(4, 4) == 0.0);
  CHECK(sq.at(1, 5) == 0.0);
  const BBox b = tight_box(sq);
  CHECK(b.x0 == Approx(1.0 / 8));
  CHECK(b.y0 == Approx(1.0 / 8));
  CHECK(b.x1 == Approx(5.0 / 8));
  CHECK(b.y1 == Approx(4.0 / 8));
  CHECK(tight_box(Raster(4, 4)) == BBox{});

  const Raster tri = rasterize_polygon({{0, 0}, {10, 0}, {0, 10}}, 10, 10);
  double tri_area = 0;
  for (double v : tri.data) tri_area += v;
  CHECK(tri_area == 45.0);  // centers with x + y < 10, strictly below the hypotenuse
}

TEST_CASE("disk rasterization area") {
  for (double r = 10.0; r <= 30.0; r += 2.5) {
    const Raster d = draw_disk(80, 80, 40.3, 39.7, r);
    double area = 0;
    for (double v : d.data) area += v;
    CHECK(std::abs(area - std::numbers::pi * r * r) <= 0.02 * std::numbers::pi * r * r);
  }
}

// ---- synthetic shapes and annotation documents --------------------------------------

TEST_CASE("gen_shapes is deterministic with tight boxes") {
  ShapesConfig cfg;
  cfg.seed = 11;
  const Dataset a = gen_shapes(cfg, 6), b = gen_shapes(cfg, 6);
  CHECK(dataset_to_json(a).dump() == dataset_to_json(b).dump());
  REQUIRE(a.categories.size() == 3);
  for (size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(a.samples[i].image == b.samples[i].image);
    CHECK(encode_pgm(a.samples[i].image) == encode_pgm(b.samples[i].image));
    for (const Instance& inst : a.samples[i].instances) {
      CHECK(inst.box == tight_box(inst.mask));
      CHECK((inst.category >= 0 && inst.category < 3));
    }
  }
  cfg.seed = 12;
  CHECK(dataset_to_json(gen_shapes(cfg, 6)).dump() != dataset_to_json(a).dump());
}

TEST_CASE("annotation documents round trip") {
  ShapesConfig cfg;
  cfg.seed = 13;
  const Dataset ds = gen_shapes(cfg, 4);
  const Dataset back = dataset_from_json(dataset_to_json(ds));
  REQUIRE(back.samples.size() == ds.samples.size());
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    REQUIRE(back.samples[i].instances.size() == ds.samples[i].instances.size());
    for (size_t j = 0; j < ds.samples[i].instances.size(); ++j) {
      CHECK(back.samples[i].instances[j].mask == ds.samples[i].instances[j].mask);
      CHECK(back.samples[i].instances[j].box == ds.samples[i].instances[j].box);
      CHECK(back.samples[i].instances[j].category == ds.samples[i].instances[j].category);
    }
  }

  ScratchDir dir("dataset");
  save_dataset(ds, dir.path.string());
  const Dataset loaded = load_dataset(dir / "annotations.json");
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    const Raster& a = ds.samples[i].image;
    const Raster& b = loaded.samples[i].image;
    REQUIRE(b.height == a.height);
    for (size_t p = 0; p < a.data.size(); ++p) CHECK(std::abs(a.data[p] - b.data[p]) <= 0.5 / 255 + 1e-12);
  }

  json doc = dataset_to_json(ds);
  doc["instances"][0]["category"] = 7;
  CHECK_THROWS_AS(dataset_from_json(doc), DataError);
  doc = dataset_to_json(ds);
  doc["instances"][0]["image_id"] = 999;
  CHECK_THROWS_AS(dataset_from_json(doc), DataError);
  doc = dataset_to_json(ds);
  doc["instances"][0]["rle"]["counts"].push_back(1);
  CHECK_THROWS_AS(dataset_from_json(doc), DataError);
  doc = dataset_to_json(ds);
  doc["instances"][0].erase("rle");
  doc["instances"][0].erase("bbox");
  doc["instances"][0]["polygon"] = {2, 2, 20, 2, 20, 20, 2, 20};
  CHECK(dataset_from_json(doc).samples[0].instances[0].box.x0 == Approx(2.0 / 64));
}

TEST_CASE("PGM and PNG images") {
  ScratchDir dir("images");
  Raster img(3, 5);
  for (int y = 0; y < 3; ++y) {
    for (int x = 0; x < 5; ++x) img.at(y, x) = (y * 5 + x) / 14.0;
  }
  write_pgm(dir / "a.pgm", img);
  const Raster back = read_image(dir / "a.pgm");
  for (size_t i = 0; i < img.data.size(); ++i) CHECK(std::abs(back.data[i] - img.data[i]) <= 0.5 / 255 + 1e-12);
  CHECK(encode_pgm(back) == encode_pgm(img));

  write_text(dir / "b.pgm", "P2\n# comment\n2 2\n10\n0 5\n10 2\n");
  const Raster ascii = read_image(dir / "b.pgm");
  CHECK(ascii.at(0, 1) == Approx(0.5));
  CHECK(ascii.at(1, 0) == 1.0);

  const std::vector<std::uint8_t> gray{0, 51, 102, 153, 204, 255};
  const std::vector<std::uint8_t> png = encode_png(3, 2, 1, gray);
  write_text(dir / "g.png", std::string(png.begin(), png.end()));
  const Raster g = read_image(dir / "g.png");
  REQUIRE(g.height == 2);
  REQUIRE(g.width == 3);
  for (size_t i = 0; i < gray.size(); ++i) CHECK(g.data[i] == Approx(gray[i] / 255.0).epsilon(1e-12));

  const std::vector<std::uint8_t> rgb{255, 0, 0, 0, 255, 255};
  const std::vector<std::uint8_t> cpng = encode_png(2, 1, 3, rgb);
  write_text(dir / "c.png", std::string(cpng.begin(), cpng.end()));
  const Raster c = read_image(dir / "c.png");
  // Color images are reduced to luminance by the decoder.
  CHECK(c.at(0, 0) > 0.0);
  CHECK(c.at(0, 0) < c.at(0, 1));
  CHECK(c.at(0, 1) < 1.0);

  write_text(dir / "bad.pgm", "P5\n4 4\n255\nxx");
  CHECK_THROWS_AS(read_image(dir / "bad.pgm"), DataError);
  CHECK_THROWS_AS(read_image(dir / "missing.png"), DataError);
}

// ---- tensor container ------------------------------------------------------------------

TEST_CASE("tensor container golden bytes") {
  TensorContainer c;
  const std::uint8_t v[2] = {1, 2};
  c.set("a", Tensor::from_u8({2}, v));
  const std::string header = R"({"a":{"dtype":"u8","offset":0,"shape":[2]}})";
  std::vector<std::uint8_t> expected(8, 0);
  expected[0] = static_cast<std::uint8_t>(header.size());
  expected.insert(expected.end(), header.begin(), header.end());
  expected.push_back(1);
  expected.push_back(2);
  CHECK(c.serialize() == expected);

  TensorContainer d;
  const double one = 1.0;
  d.set("x", Tensor::from_f64({}, &one));
  const std::vector<std::uint8_t> bytes = d.serialize();
  const std::string h2 = R"({"x":{"dtype":"f64","offset":0,"shape":[]}})";
  REQUIRE(bytes.size() == 8 + h2.size() + 8);
  CHECK(std::string(bytes.begin() + 8, bytes.begin() + 8 + static_cast<long>(h2.size())) == h2);
  CHECK(std::vector<std::uint8_t>(bytes.end() - 8, bytes.end()) ==
        std::vector<std::uint8_t>{0, 0, 0, 0, 0, 0, 0xf0, 0x3f});
}

TEST_CASE("tensor container round trip is byte exact") {
  Rng rng(2);
  for (int t = 0; t < 30; ++t) {
    TensorContainer c;
    const int count = rng.uniform_int(1, 5);
    for (int i = 0; i < count; ++i) {
      std::vector<int64_t> shape;
      const int rank = rng.uniform_int(0, 3);
      int64_t n = 1;
      for (int r = 0; r < rank; ++r) {
        shape.push_back(rng.uniform_int(0, 4));
        n *= shape.back();
      }
      std::vector<double> vals(static_cast<size_t>(n));
      for (double& v : vals) v = rng.normal() * 1e3;
      std::vector<std::uint8_t> raw(static_cast<size_t>(n));
      for (auto& v : raw) v = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
      const std::string name = "t" + std::to_string(i);
      switch (rng.uniform_int(0, 2)) {
        case 0: c.set(name, Tensor::from_f64(shape, vals.data())); break;
        case 1: c.set(name, Tensor::from_f32(shape, vals.data())); break;
        default: c.set(name, Tensor::from_u8(shape, raw.data())); break;
      }
    }
    const std::vector<std::uint8_t> bytes = c.serialize();
    const TensorContainer back = TensorContainer::deserialize(bytes);
    CHECK(back.tensors() == c.tensors());
    CHECK(back.serialize() == bytes);
  }

  ScratchDir dir("tensor");
  TensorContainer c;
  c.set("m", Tensor::from_matrix(rng.normal_matrix(3, 4, 1.0)));
  c.save(dir / "c.bin");
  CHECK(read_file_bytes(dir / "c.bin") == c.serialize());
  CHECK(TensorContainer::load(dir / "c.bin").get("m") == c.get("m"));
  CHECK(TensorContainer::load(dir / "c.bin").get("m").to_matrix() == c.get("m").to_matrix());
  CHECK_THROWS_AS(c.get("missing"), DataError);
}

TEST_CASE("tensor container validation") {
  const auto make = [](const std::string& header, size_t payload) {
    std::vector<std::uint8_t> out(8, 0);
    const std::uint64_t len = header.size();
    std::memcpy(out.data(), &len, 8);
    out.insert(out.end(), header.begin(), header.end());
    out.resize(out.size() + payload, 0);
    return out;
  };
  CHECK_NOTHROW(TensorContainer::deserialize(make(R"({"a":{"dtype":"u8","offset":0,"shape":[3]}})", 3)));
  CHECK_THROWS_AS(TensorContainer::deserialize({1, 2, 3}), DataError);
  CHECK_THROWS_AS(TensorContainer::deserialize(make(R"({"a":{"dtype":"u8","offset":0,"shape":[3]}})", 2)), DataError);
  CHECK_THROWS_AS(TensorContainer::deserialize(make(R"({"a":{"dtype":"u8","offset":0,"shape":[3]}})", 4)), DataError);
  CHECK_THROWS_AS(TensorContainer::deserialize(make(R"({"a":{"dtype":"u8","offset":0,"shape":[2]},)"
                                                     R"("b":{"dtype":"u8","offset":1,"shape":[2]}})",
                                                     4)),
                  DataError);
  CHECK_THROWS_AS(TensorContainer::deserialize(make(R"({"a":{"dtype":"i32","offset":0,"shape":[1]}})", 4)), DataError);
  CHECK_THROWS_AS(TensorContainer::deserialize(make(R"({"a":{"dtype":"u8","offset":0,"shape":[-1]}})", 0)), DataError);
  CHECK_THROWS_AS(TensorContainer::deserialize(make("[1,2]", 0)), DataError);
  CHECK_THROWS_AS(TensorContainer::deserialize(make("{not json", 0)), DataError);
  std::vector<std::uint8_t> huge = make("{}", 0);
  huge[0] = 0xff;
  CHECK_THROWS_AS(TensorContainer::deserialize(huge), DataError);
}

// ---- config and artifact files ----------------------------------------------------------

TEST_CASE("config parsing") {
  const ToyConfig def;
  const json doc = config_to_json(def);
  CHECK(config_to_json(parse_config(doc)) == doc);
  CHECK(config_to_json(parse_config(json::object())) == doc);

  const ToyConfig small = parse_config(json::parse(kSmallConfig));
  CHECK(small.seed == 3);
  CHECK(small.train.seed == 3);
  CHECK(small.model.num_queries == 4);
  CHECK(small.model.encoder.dim == 8);
  CHECK(small.model.backbone.channels == 8);
  CHECK(small.codec.side == 12);
  CHECK(small.log_every == 1);
  CHECK(small.data.shapes.image_size == 32);
  CHECK(config_to_json(parse_config(config_to_json(small))) == config_to_json(small));

  CHECK_THROWS_AS(parse_config(json{{"modle", json::object()}}), DataError);
  CHECK_THROWS_AS(parse_config(json{{"model", {{"num_query", 3}}}}), DataError);
  CHECK_THROWS_AS(parse_config(json{{"model", {{"num_queries", "ten"}}}}), DataError);
  CHECK_THROWS_AS(parse_config(json{{"model", {{"attention", "sparse"}}}}), DataError);
  CHECK_THROWS_AS(parse_config(json{{"train", {{"log_every", 0}}}}), DataError);
  CHECK_THROWS_AS(parse_config(json::array()), DataError);
}

TEST_CASE("codec, parameter and checkpoint files") {
  ScratchDir dir("io");
  const MaskCodec codec = shapes_codec(10, 7);
  save_codec(dir / "codec.bin", codec);
  const MaskCodec back = load_codec(dir / "codec.bin");
  CHECK(back.basis() == codec.basis());
  CHECK(back.spectrum() == codec.spectrum());
  CHECK(back.side() == 10);
  CHECK_FALSE(back.centered());

  Rng rng(3);
  std::vector<Mask> masks;
  for (int i = 0; i < 20; ++i) masks.push_back(testing::random_shape_mask(rng, 8));
  const MaskCodec centered = fit_codec(masks, 5, true);
  save_codec(dir / "centered.bin", centered);
  CHECK(*load_codec(dir / "centered.bin").mean() == *centered.mean());

  const ad::ParamStore params{{"a", rng.normal_matrix(2, 3, 1.0)}, {"b.w", rng.normal_matrix(1, 4, 1.0)}};
  CHECK(params_from_container(params_to_container(params)) == params);
  save_checkpoint(dir / "ckpt", params, codec, json{{"seed", 5}}, 17);
  const Checkpoint ck = load_checkpoint(dir / "ckpt");
  CHECK(ck.params == params);
  CHECK(ck.codec.basis() == codec.basis());
  CHECK(ck.manifest.at("steps") == 17);
  CHECK(ck.manifest.at("config").at("seed") == 5);
  CHECK(ck.manifest.at("parameters").at("a") == json::array({2, 3}));
  CHECK_THROWS_AS(load_checkpoint(dir / "nowhere"), DataError);

  GroundTruthSet gt;
  gt.boxes = {{0.1, 0.2, 0.3, 0.4}, {0.5, 0.5, 0.9, 0.7}};
  gt.classes = {2, 0};
  gt.masks = {testing::random_shape_mask(rng, 6), testing::random_shape_mask(rng, 6)};
  const GroundTruthSet gt_back = ground_truth_from_container(ground_truth_to_container(gt));
  CHECK(gt_back.boxes == gt.boxes);
  CHECK(gt_back.classes == gt.classes);
  CHECK(gt_back.masks[1].values() == gt.masks[1].values());
  CHECK(ground_truth_from_container(ground_truth_to_container(GroundTruthSet{})).size() == 0);

  PredictionSet pred;
  pred.boxes = gt.boxes;
  pred.probs.resize(2, 3);
  pred.probs << 0.2, 0.3, 0.5, 0.1, 0.1, 0.8;
  pred.embeddings = rng.normal_matrix(2, 7, 1.0);
  const PredictionSet pred_back = predictions_from_container(predictions_to_container(pred));
  CHECK(pred_back.boxes == pred.boxes);
  CHECK(pred_back.probs == pred.probs);
  CHECK(pred_back.embeddings == pred.embeddings);
  PredictionSet bad = pred;
  bad.probs(0, 0) = 0.9;
  CHECK_THROWS_AS(predictions_from_container(predictions_to_container(bad)), DataError);
}

// ---- subcommands -----------------------------------------------------------------------

TEST_CASE("cli usage and exit codes") {
  CHECK(run({}).code == kExitUsage);
  CHECK(run({"--help"}).code == kExitOk);
  CHECK(run({"frobnicate"}).code == kExitUsage);
  CHECK(run({"fit-codec", "--out", "x"}).code == kExitUsage);
  CHECK(run({"--threads", "0", "grad-check"}).code == kExitUsage);
  CHECK(run({"grad-check", "--scope", "bogus"}).code == kExitUsage);

  ScratchDir dir("exit");
  write_text(dir / "broken.json", "{\"images\": [");
  CHECK(run({"fit-codec", "--data", dir / "broken.json", "--out", dir / "c.bin"}).code == kExitData);
  write_text(dir / "cfg.json", R"({"model": {"num_queries": "many"}})");
  CHECK(run({"--config", dir / "cfg.json", "gen-shapes", "--out", dir / "ds"}).code == kExitData);
}

TEST_CASE("gen-shapes is byte-identical across runs") {
  ScratchDir dir("gen");
  REQUIRE(run({"--seed", "21", "gen-shapes", "--out", dir / "a", "--images", "4"}).code == kExitOk);
  REQUIRE(run({"--seed", "21", "gen-shapes", "--out", dir / "b", "--images", "4"}).code == kExitOk);
  CHECK(read_text(dir / "a/annotations.json") == read_text(dir / "b/annotations.json"));
  for (const auto& entry : fs::directory_iterator(dir.path / "a/images")) {
    CHECK(read_text(entry.path().string()) == read_text((dir.path / "b/images" / entry.path().filename()).string()));
  }
  CHECK(json::parse(read_text(dir / "a/annotations.json")).at("images").size() == 4);
  REQUIRE(run({"--seed", "22", "gen-shapes", "--out", dir / "c", "--images", "4"}).code == kExitOk);
  CHECK(read_text(dir / "a/annotations.json") != read_text(dir / "c/annotations.json"));
}

TEST_CASE("fit-codec, spectrum and eval-recon") {
  ScratchDir dir("codec");
  REQUIRE(run({"gen-shapes", "--out", dir / "ds", "--images", "12"}).code == kExitOk);
  const std::string ann = dir / "ds/annotations.json";

  const CliResult fit = run({"fit-codec", "--data", ann, "--dim", "20", "--out", dir / "c20.bin"});
  REQUIRE(fit.code == kExitOk);
  const json report = json::parse(fit.out);
  CHECK(report.at("dim") == 20);
  CHECK(report.at("orthonormality_error").get<double>() <= 1e-8);
  const MaskCodec c20 = load_codec(dir / "c20.bin");
  const Matrix gram = c20.basis().transpose() * c20.basis();
  CHECK((gram - Matrix::Identity(20, 20)).cwiseAbs().maxCoeff() <= 1e-8);

  REQUIRE(run({"fit-codec", "--data", ann, "--dim", "784", "--out", dir / "full.bin"}).code == kExitOk);
  const MaskCodec full = load_codec(dir / "full.bin");
  CHECK(full.dim() == 784);
  const std::vector<Mask> masks = instance_masks(load_dataset(ann), 28);
  CHECK(reconstruction_error(full, masks) <= 1e-18 * static_cast<double>(masks.size()) * 784 + 1e-12);

  const CliResult sweep = run({"eval-recon", "--data", ann, "--l-sweep", "10,20,40"});
  REQUIRE(sweep.code == kExitOk);
  const json reports = json::parse(sweep.out).at("reports");
  REQUIRE(reports.size() == 3);
  for (size_t i = 1; i < reports.size(); ++i) {
    CHECK(reports[i].at("train_error").get<double>() <= reports[i - 1].at("train_error").get<double>());
    CHECK(reports[i].at("mean_iou").get<double>() >= reports[i - 1].at("mean_iou").get<double>() - 1e-9);
  }
  const CliResult full_recon = run({"eval-recon", "--data", ann, "--codec", dir / "full.bin"});
  REQUIRE(full_recon.code == kExitOk);
  CHECK(json::parse(full_recon.out).at("reports")[0].at("mean_iou") == 1.0);
  CHECK(run({"eval-recon", "--data", ann}).code == kExitUsage);

  const CliResult spec = run({"spectrum", "--data", ann, "--top", "784"});
  REQUIRE(spec.code == kExitOk);
  std::istringstream lines(spec.out);
  std::string line;
  std::getline(lines, line);
  CHECK(line == "rank,energy_ratio,cumulative");
  double prev_ratio = 2.0, prev_cum = 0.0, last_cum = 0.0;
  int rows = 0;
  while (std::getline(lines, line)) {
    double ratio = 0, cum = 0;
    int rank = 0;
    REQUIRE(std::sscanf(line.c_str(), "%d,%lf,%lf", &rank, &ratio, &cum) == 3);
    CHECK(rank == ++rows);
    CHECK(ratio <= prev_ratio);
    CHECK(cum >= prev_cum);
    CHECK(cum <= 1.0 + 1e-12);
    prev_ratio = ratio;
    prev_cum = last_cum = cum;
  }
  CHECK(std::abs(last_cum - 1.0) <= 1e-6);

  REQUIRE(run({"spectrum", "--data", ann, "--top", "5", "--out", dir / "s.csv"}).code == kExitOk);
  const std::string csv = read_text(dir / "s.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
}

TEST_CASE("spectrum of identical masks has one row; empty masks are counted") {
  ScratchDir dir("identical");
  const Raster disk = draw_disk(32, 32, 15.5, 16.0, 9.0);
  Dataset ds = dataset_of({disk, disk, disk});
  save_dataset(ds, dir / "same");
  const CliResult spec = run({"spectrum", "--data", dir / "same/annotations.json", "--side", "12"});
  REQUIRE(spec.code == kExitOk);
  std::istringstream rows(spec.out);
  std::string header, row, extra;
  std::getline(rows, header);
  std::getline(rows, row);
  CHECK_FALSE(std::getline(rows, extra));
  int rank = 0;
  double ratio = 0, cum = 0;
  REQUIRE(std::sscanf(row.c_str(), "%d,%lf,%lf", &rank, &ratio, &cum) == 3);
  CHECK(rank == 1);
  CHECK(std::abs(ratio - 1.0) <= 1e-12);
  CHECK(std::abs(cum - 1.0) <= 1e-12);

  ds = dataset_of({disk, Raster(32, 32), draw_disk(32, 32, 10.0, 12.0, 6.0)});
  save_dataset(ds, dir / "empty");
  const CliResult fit = run({"fit-codec", "--data", dir / "empty/annotations.json", "--dim", "2", "--side", "12",
                             "--out", dir / "c.bin"});
  REQUIRE(fit.code == kExitOk);
  CHECK(json::parse(fit.out).at("excluded_empty") == 1);
  CHECK(json::parse(fit.out).at("masks") == 2);
  const CliResult recon = run({"eval-recon", "--data", dir / "empty/annotations.json", "--codec", dir / "c.bin"});
  REQUIRE(recon.code == kExitOk);
  CHECK(json::parse(recon.out).at("excluded_empty") == 1);
  CHECK(json::parse(recon.out).at("reports")[0].at("mean_iou") == 1.0);
}

TEST_CASE("match and loss subcommands") {
  ScratchDir dir("match");
  const MaskCodec codec = shapes_codec(10, 6);
  save_codec(dir / "codec.bin", codec);
  Rng rng(4);

  GroundTruthSet gt;
  for (int i = 0; i < 3; ++i) {
    gt.boxes.push_back(testing::random_box(rng));
    gt.classes.push_back(i % 3);
    gt.masks.push_back(testing::random_shape_mask(rng, 10));
  }
  PredictionSet pred;
  const int k = 6;
  const std::vector<int> copy_at{4, 0, 2};
  pred.probs.resize(k, 4);
  pred.embeddings.resize(k, 6);
  for (int j = 0; j < k; ++j) {
    pred.boxes.push_back(testing::random_box(rng));
    Vector z(4);
    for (int c = 0; c < 4; ++c) z[c] = std::exp(rng.uniform(-1, 1));
    pred.probs.row(j) = (z / z.sum()).transpose();
    pred.embeddings.row(j) = rng.normal_matrix(1, 6, 1.0);
  }
  for (int i = 0; i < 3; ++i) {
    const int j = copy_at[static_cast<size_t>(i)];
    pred.boxes[static_cast<size_t>(j)] = gt.boxes[static_cast<size_t>(i)];
    pred.probs.row(j).setZero();
    pred.probs(j, gt.classes[static_cast<size_t>(i)]) = 1.0;
    pred.embeddings.row(j) = codec.encode(gt.masks[static_cast<size_t>(i)]).transpose();
  }
  ground_truth_to_container(gt).save(dir / "gt.bin");
  predictions_to_container(pred).save(dir / "pred.bin");

  const CliResult m = run({"match", "--gt", dir / "gt.bin", "--pred", dir / "pred.bin", "--codec", dir / "codec.bin"});
  REQUIRE(m.code == kExitOk);
  const json doc = json::parse(m.out);
  CHECK(doc.at("assignment").get<std::vector<int>>() == copy_at);
  double resum = 0.0;
  for (const json& p : doc.at("pairs")) {
    resum += p.at("cost").get<double>();
    CHECK(std::abs(p.at("cost").get<double>() - (p.at("box_cost").get<double>() + p.at("class_cost").get<double>() +
                                                 p.at("mask_cost").get<double>())) <= 1e-12);
    CHECK(p.at("cost").get<double>() == Approx(-4.0).epsilon(1e-12));
  }
  CHECK(std::abs(resum - doc.at("total_cost").get<double>()) <= 1e-9);
  CHECK(doc.at("total_cost").get<double>() == Approx(match(gt, pred, codec, CostWeights{}).total_cost).epsilon(1e-15));

  const CliResult l = run({"loss", "--gt", dir / "gt.bin", "--pred", dir / "pred.bin", "--codec", dir / "codec.bin",
                           "--focal-gamma", "1.5"});
  REQUIRE(l.code == kExitOk);
  SetLossConfig lc;
  lc.focal.gamma = 1.5;
  const LossBreakdown expected = set_loss(gt, pred, match(gt, pred, codec, lc.weights), codec, lc);
  CHECK(json::parse(l.out).at("total").get<double>() == Approx(expected.total).epsilon(1e-14));
  CHECK(json::parse(l.out).at("matched") == 3);

  ground_truth_to_container(GroundTruthSet{}).save(dir / "empty.bin");
  const CliResult e = run({"match", "--gt", dir / "empty.bin", "--pred", dir / "pred.bin", "--codec", dir / "codec.bin"});
  CHECK(e.code == kExitOk);
  CHECK(json::parse(e.out).at("assignment").empty());
  CHECK(json::parse(e.out).at("total_cost") == 0.0);

  PredictionSet two = pred;
  two.boxes.resize(2);
  two.probs.conservativeResize(2, 4);
  two.embeddings.conservativeResize(2, 6);
  predictions_to_container(two).save(dir / "two.bin");
  const CliResult few = run({"match", "--gt", dir / "gt.bin", "--pred", dir / "two.bin", "--codec", dir / "codec.bin"});
  CHECK(few.code == kExitData);
  CHECK(few.err.find("more ground truths than predictions") != std::string::npos);
}

TEST_CASE("grad-check subcommand") {
  const CliResult ok = run({"grad-check", "--scope", "losses", "--points", "5"});
  CHECK(ok.code == kExitOk);
  CHECK(ok.out.find("set_loss") != std::string::npos);
  CHECK(run({"grad-check", "--scope", "heads", "--points", "3"}).code == kExitOk);
  CHECK(run({"grad-check", "--scope", "losses", "--points", "3", "--corrupt"}).code == kExitNumerical);
}

TEST_CASE("train-toy and infer-toy") {
  ScratchDir dir("toy");
  write_text(dir / "cfg.json", kSmallConfig);
  const CliResult a = run({"--config", dir / "cfg.json", "--threads", "1", "train-toy", "--out", dir / "a"});
  REQUIRE(a.code == kExitOk);
  const CliResult b = run({"--config", dir / "cfg.json", "--threads", "1", "train-toy", "--out", dir / "b"});
  REQUIRE(b.code == kExitOk);
  CHECK(read_text(dir / "a/metrics.jsonl") == read_text(dir / "b/metrics.jsonl"));
  CHECK(read_text(dir / "a/final.json") == read_text(dir / "b/final.json"));
  const std::string metrics = read_text(dir / "a/metrics.jsonl");
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 4);

  json zero = json::parse(kSmallConfig);
  zero["train"]["lr"] = 0.0;
  write_text(dir / "zero.json", zero.dump());
  REQUIRE(run({"--config", dir / "zero.json", "train-toy", "--out", dir / "z"}).code == kExitOk);
  const json final_doc = json::parse(read_text(dir / "z/final.json"));
  CHECK(final_doc.at("initial") == final_doc.at("final"));
  CHECK(final_doc.at("loss_reduction") == 0.0);

  const CliResult inf = run({"--config", dir / "cfg.json", "infer-toy", "--checkpoint", dir / "a/checkpoint", "--out",
                             dir / "inf"});
  REQUIRE(inf.code == kExitOk);
  const json preds = json::parse(read_text(dir / "inf/predictions.json"));
  REQUIRE(preds.at("images").size() == 3);
  for (const json& img : preds.at("images")) {
    CHECK(img.at("predictions").size() == 4);
    CHECK(img.at("stages").size() == 2);
  }
  const TensorContainer masks = TensorContainer::load(dir / "inf/masks.bin");
  CHECK(masks.get("image0").shape == std::vector<int64_t>{4, 32, 32});
  CHECK(json::parse(inf.out).at("metrics").at("min_predictions") == 4);

  CHECK(run({"infer-toy", "--checkpoint", dir / "a/checkpoint", "--out", dir / "inf1", "--stages", "1"}).code ==
        kExitOk);
  CHECK(run({"infer-toy", "--checkpoint", dir / "a/checkpoint", "--out", dir / "inf3", "--stages", "3"}).code ==
        kExitData);
}
