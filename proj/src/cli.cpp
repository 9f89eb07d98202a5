#include "setseg/cli.hpp"

#include "setseg/config.hpp"
#include "setseg/gradcheck.hpp"
#include "setseg/io.hpp"
#include "setseg/toy.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

namespace setseg {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Ratios below this fraction of the total energy are treated as zero rows.
constexpr double kZeroEnergy = 1e-12;

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config;
  int threads = 1;
};

ToyConfig resolve_config(const Globals& g) {
  ToyConfig cfg = g.config.empty() ? ToyConfig{} : load_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  cfg.train.threads = g.threads;
  cfg.validate();
  return cfg;
}

void write_text(const std::string& path, const std::string& text) {
  if (const fs::path parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << text;
}

std::vector<Mask> dataset_masks(const std::string& path, int side, int* skipped) {
  const Dataset ds = load_dataset(path, false);
  return instance_masks(ds, side, skipped);
}

double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto idx = static_cast<size_t>(std::ceil(q * static_cast<double>(v.size()))) - (q > 0.0 ? 1 : 0);
  return v[std::min(idx, v.size() - 1)];
}

json recon_report(const MaskCodec& codec, std::span<const Mask> masks) {
  std::vector<double> ious;
  ious.reserve(masks.size());
  for (const Mask& m : masks) ious.push_back(reconstruction_iou(codec, m));
  double mean = 0.0;
  for (double v : ious) mean += v;
  if (!ious.empty()) mean /= static_cast<double>(ious.size());
  return {{"dim", codec.dim()},
          {"mean_iou", mean},
          {"p10_iou", percentile(ious, 0.1)},
          {"p50_iou", percentile(ious, 0.5)},
          {"p90_iou", percentile(ious, 0.9)},
          {"reconstruction_error", reconstruction_error(codec, masks)}};
}

std::vector<int> parse_dims(const std::string& text) {
  std::vector<int> dims;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      size_t used = 0;
      const int v = std::stoi(item, &used);
      if (used != item.size() || v < 1) throw std::invalid_argument(item);
      dims.push_back(v);
    } catch (const std::exception&) {
      throw CLI::ValidationError("--l-sweep", "expected comma-separated positive integers, got '" + text + "'");
    }
  }
  if (dims.empty()) throw CLI::ValidationError("--l-sweep", "no dimensions given");
  return dims;
}

json cost_breakdown(const GroundTruthSet& gt, const PredictionSet& pred, const MaskCodec& codec, const CostWeights& w,
                    const Assignment& a) {
  json pairs = json::array();
  for (size_t i = 0; i < gt.size(); ++i) {
    const auto j = static_cast<size_t>(a.prediction_for_gt[i]);
    const auto row = pred.probs.row(static_cast<Eigen::Index>(j));
    const double box = box_cost(gt.boxes[i], pred.boxes[j], w);
    const double cls = class_cost(gt.classes[i], std::span<const double>(row.data(), static_cast<size_t>(row.size())), w);
    const double mask = mask_cost(gt.masks[i], pred.embeddings.row(static_cast<Eigen::Index>(j)).transpose(), codec, w);
    pairs.push_back({{"gt", i}, {"prediction", j}, {"box_cost", box}, {"class_cost", cls}, {"mask_cost", mask},
                     {"cost", box + cls + mask}});
  }
  return pairs;
}

void add_weight_options(CLI::App* cmd, CostWeights& w) {
  cmd->add_option("--l1", w.l1, "Box L1 weight")->capture_default_str();
  cmd->add_option("--giou", w.giou, "Box GIoU weight")->capture_default_str();
  cmd->add_option("--cls", w.cls, "Class weight")->capture_default_str();
  cmd->add_option("--mask", w.mask, "Mask weight")->capture_default_str();
}

// ---- subcommands ------------------------------------------------------------------

struct GenShapesArgs {
  std::string out;
  std::optional<int> images;
};

int gen_shapes_cmd(const Globals& g, const GenShapesArgs& a, std::ostream& out) {
  ToyConfig cfg = resolve_config(g);
  if (g.seed) cfg.data.shapes.seed = *g.seed;
  const int n = a.images.value_or(cfg.data.num_images);
  if (n < 1) throw CLI::ValidationError("--images", "must be >= 1");
  const Dataset ds = gen_shapes(cfg.data.shapes, n);
  save_dataset(ds, a.out);
  size_t instances = 0;
  for (const Sample& s : ds.samples) instances += s.instances.size();
  out << json{{"annotations", (fs::path(a.out) / "annotations.json").string()},
              {"images", ds.samples.size()},
              {"instances", instances},
              {"seed", cfg.data.shapes.seed}}
             .dump(2)
      << '\n';
  return kExitOk;
}

struct CodecArgs {
  std::string data;
  int dim = kDefaultEmbeddingDim;
  int side = kDefaultMaskSide;
  bool center = false;
  std::string out;
  int top = 10;
};

int fit_codec_cmd(const CodecArgs& a, std::ostream& out) {
  int skipped = 0;
  const std::vector<Mask> masks = dataset_masks(a.data, a.side, &skipped);
  if (masks.empty()) throw DataError("no non-empty instance masks in '" + a.data + "'");
  const PrincipalDecomposition dec = decompose_masks(masks, a.center);
  if (a.dim < 1 || a.dim > a.side * a.side) throw CLI::ValidationError("--dim", "must lie in [1, side^2]");
  const MaskCodec codec = MaskCodec::from_decomposition(dec, a.dim);
  save_codec(a.out, codec);
  const Matrix gram = codec.basis().transpose() * codec.basis();
  const double ortho = (gram - Matrix::Identity(codec.dim(), codec.dim())).cwiseAbs().maxCoeff();
  json top = json::array();
  double kept = 0.0;
  const std::vector<SpectrumEntry> spectrum = energy_spectrum(dec, a.side * a.side);
  for (const SpectrumEntry& e : spectrum) {
    if (e.component < a.dim) kept += e.ratio;
    if (e.component < a.top) top.push_back(e.ratio);
  }
  out << json{{"codec", a.out},
              {"dim", codec.dim()},
              {"side", codec.side()},
              {"centered", codec.centered()},
              {"masks", masks.size()},
              {"excluded_empty", skipped},
              {"retained_energy", kept},
              {"reconstruction_error", reconstruction_error(codec, masks)},
              {"orthonormality_error", ortho},
              {"top_ratios", top}}
             .dump(2)
      << '\n';
  return kExitOk;
}

int spectrum_cmd(const CodecArgs& a, const std::string& csv_path, std::ostream& out) {
  const std::vector<Mask> masks = dataset_masks(a.data, a.side, nullptr);
  if (masks.empty()) throw DataError("no non-empty instance masks in '" + a.data + "'");
  if (a.top < 1) throw CLI::ValidationError("--top", "must be >= 1");
  std::ostringstream csv;
  csv << "rank,energy_ratio,cumulative\n" << std::setprecision(17);
  double cumulative = 0.0;
  for (const SpectrumEntry& e : energy_spectrum(masks, a.top, a.center)) {
    if (e.ratio <= kZeroEnergy) break;
    cumulative += e.ratio;
    csv << e.component + 1 << ',' << e.ratio << ',' << cumulative << '\n';
  }
  if (csv_path.empty()) {
    out << csv.str();
  } else {
    write_text(csv_path, csv.str());
  }
  return kExitOk;
}

struct ReconArgs {
  CodecArgs codec;
  std::string codec_path;
  std::string sweep;
  std::string holdout;
};

int eval_recon_cmd(const ReconArgs& a, std::ostream& out) {
  int skipped = 0, holdout_skipped = 0;
  int side = a.codec.side;
  std::optional<MaskCodec> fixed;
  if (!a.codec_path.empty()) {
    fixed = load_codec(a.codec_path);
    side = fixed->side();
  }
  const std::vector<Mask> train = dataset_masks(a.codec.data, side, &skipped);
  if (train.empty()) throw DataError("no non-empty instance masks in '" + a.codec.data + "'");
  std::vector<Mask> eval_masks = train;
  if (!a.holdout.empty()) eval_masks = dataset_masks(a.holdout, side, &holdout_skipped);

  json reports = json::array();
  if (fixed) {
    reports.push_back(recon_report(*fixed, eval_masks));
  } else {
    const PrincipalDecomposition dec = decompose_masks(train, a.codec.center);
    for (int l : parse_dims(a.sweep)) {
      if (l > side * side) throw CLI::ValidationError("--l-sweep", "dimension exceeds side^2");
      const MaskCodec codec = MaskCodec::from_decomposition(dec, l);
      json r = recon_report(codec, eval_masks);
      r["train_error"] = reconstruction_error(codec, train);
      reports.push_back(std::move(r));
    }
  }
  out << json{{"masks", eval_masks.size()},
              {"excluded_empty", a.holdout.empty() ? skipped : holdout_skipped},
              {"side", side},
              {"reports", reports}}
             .dump(2)
      << '\n';
  return kExitOk;
}

struct MatchArgs {
  std::string gt, pred, codec;
  CostWeights weights;
  FocalParams focal;
  double dice_eps = kDefaultDiceEps;
};

int match_cmd(const MatchArgs& a, std::ostream& out) {
  const GroundTruthSet gt = ground_truth_from_container(TensorContainer::load(a.gt));
  const PredictionSet pred = predictions_from_container(TensorContainer::load(a.pred));
  const MaskCodec codec = load_codec(a.codec);
  gt.validate(pred.num_classes());
  const Assignment asg = match(gt, pred, codec, a.weights);
  out << json{{"assignment", asg.prediction_for_gt},
              {"total_cost", asg.total_cost},
              {"pairs", cost_breakdown(gt, pred, codec, a.weights, asg)}}
             .dump(2)
      << '\n';
  return kExitOk;
}

int loss_cmd(const MatchArgs& a, std::ostream& out) {
  const GroundTruthSet gt = ground_truth_from_container(TensorContainer::load(a.gt));
  const PredictionSet pred = predictions_from_container(TensorContainer::load(a.pred));
  const MaskCodec codec = load_codec(a.codec);
  gt.validate(pred.num_classes());
  const Assignment asg = match(gt, pred, codec, a.weights);
  SetLossConfig cfg;
  cfg.weights = a.weights;
  cfg.focal = a.focal;
  cfg.dice_eps = a.dice_eps;
  const LossBreakdown lb = set_loss(gt, pred, asg, codec, cfg);
  out << json{{"assignment", asg.prediction_for_gt},
              {"total", lb.total},
              {"box_l1", lb.box_l1},
              {"box_giou", lb.box_giou},
              {"cls", lb.cls},
              {"cls_background", lb.cls_background},
              {"mask_l2", lb.mask_l2},
              {"mask_dice", lb.mask_dice},
              {"matched", lb.matched}}
             .dump(2)
      << '\n';
  return kExitOk;
}

struct TrainArgs {
  std::string out;
  std::optional<int> steps;
};

int train_toy_cmd(const Globals& g, const TrainArgs& a, std::ostream& out) {
  ToyConfig cfg = resolve_config(g);
  if (a.steps) {
    if (*a.steps < 0) throw CLI::ValidationError("--steps", "must be >= 0");
    cfg.train.steps = *a.steps;
  }
  fs::create_directories(a.out);
  const ToySetup setup = make_toy(cfg);
  std::unique_ptr<Trainer> trainer = make_trainer(cfg, setup);

  std::ofstream log(fs::path(a.out) / "metrics.jsonl", std::ios::binary);
  if (!log) throw DataError("cannot write metrics in '" + a.out + "'");
  const ToyRunResult r = run_toy(cfg, *trainer, [&](const StepMetrics& m) { log << step_to_json(m).dump() << '\n'; });
  log.close();

  save_checkpoint((fs::path(a.out) / "checkpoint").string(), trainer->params(), trainer->codec(), config_to_json(cfg),
                  trainer->steps_done());
  const json report{{"steps", trainer->steps_done()},
                    {"initial", metrics_to_json(r.initial)},
                    {"final", metrics_to_json(r.final)},
                    {"loss_reduction", r.initial.mean_loss > 0.0 ? 1.0 - r.final.mean_loss / r.initial.mean_loss : 0.0}};
  write_text((fs::path(a.out) / "final.json").string(), report.dump(2) + "\n");
  out << report.dump(2) << '\n';
  return kExitOk;
}

struct InferArgs {
  std::string checkpoint;
  std::string out;
  int stages = 0;
};

int infer_toy_cmd(const Globals& g, const InferArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  ToyConfig cfg = g.config.empty() ? parse_config(ck.manifest.at("config")) : resolve_config(g);
  cfg.train.threads = g.threads;
  if (a.stages < 0) throw CLI::ValidationError("--stages", "must be >= 0");
  const Dataset ds = toy_dataset(cfg.data);
  const std::vector<TrainExample> examples = make_examples(ds, ck.codec.side());

  json images = json::array();
  TensorContainer masks;
  for (size_t i = 0; i < examples.size(); ++i) {
    const TrainExample& ex = examples[i];
    const std::vector<FeatureMap> pyramid = backbone_pyramid(ex.image, ck.params, cfg.model.backbone);
    const InferenceResult r =
        run_inference(pyramid, ck.params, cfg.model, ck.codec, ex.image.height, ex.image.width, a.stages, true);
    json stages = json::array();
    for (size_t s = 0; s < r.trace.predictions.size(); ++s) {
      json boxes = json::array();
      for (const BBox& b : r.trace.predictions[s].boxes) boxes.push_back(b.as_array());
      stages.push_back({{"stage", s}, {"boxes", boxes}});
    }
    json preds = json::array();
    std::vector<double> stacked;
    for (size_t j = 0; j < r.predictions.size(); ++j) {
      preds.push_back({{"box", r.predictions.boxes[j].as_array()}, {"score", r.scores[j]}, {"label", r.labels[j]}});
      const Raster& m = r.masks[j];
      if (m.empty()) {
        stacked.insert(stacked.end(), static_cast<size_t>(ex.image.height) * ex.image.width, 0.0);
      } else {
        stacked.insert(stacked.end(), m.data.begin(), m.data.end());
      }
    }
    masks.set("image" + std::to_string(i),
              Tensor::from_f32({static_cast<int64_t>(r.predictions.size()), ex.image.height, ex.image.width},
                               stacked.data()));
    images.push_back({{"image", ds.samples[i].id}, {"stages", stages}, {"predictions", preds}});
  }
  fs::create_directories(a.out);
  write_text((fs::path(a.out) / "predictions.json").string(), json{{"images", images}}.dump(1) + "\n");
  masks.save((fs::path(a.out) / "masks.bin").string());

  const EvalMetrics m = evaluate(
      examples, [&](size_t i) { return backbone_pyramid(examples[i].image, ck.params, cfg.model.backbone); }, ck.params,
      cfg.model, ck.codec, cfg.train.loss, cfg.eval);
  out << json{{"images", examples.size()}, {"metrics", metrics_to_json(m)}}.dump(2) << '\n';
  return kExitOk;
}

struct GradArgs {
  std::string scope = "all";
  int points = 50;
  bool corrupt = false;
};

int grad_check_cmd(const Globals& g, const GradArgs& a, std::ostream& out) {
  GradSuiteOptions opt;
  opt.points = a.points;
  opt.seed = g.seed.value_or(0);
  opt.corrupt = a.corrupt;
  const std::vector<GradBlockResult> results = run_grad_suite(a.scope, opt);
  bool ok = true;
  out << std::left << std::setw(11) << "scope" << std::setw(22) << "block" << std::right << std::setw(8) << "points"
      << std::setw(13) << "coordinates" << std::setw(14) << "max_rel_err" << "  status\n";
  for (const GradBlockResult& r : results) {
    std::ostringstream err;
    err << std::scientific << std::setprecision(3) << r.max_rel_error;
    out << std::left << std::setw(11) << r.scope << std::setw(22) << r.name << std::right << std::setw(8) << r.points
        << std::setw(13) << r.coordinates << std::setw(14) << err.str() << "  " << (r.passed ? "ok" : "FAIL") << '\n';
    ok = ok && r.passed;
  }
  out << (ok ? "all blocks within " : "some blocks exceed ") << opt.tolerance << '\n';
  return ok ? kExitOk : kExitNumerical;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Set-prediction instance segmentation toolkit"};
  app.name("setseg");
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Seed override");
  app.add_option("--config", g.config, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--threads", g.threads, "Worker threads; 1 is bitwise reproducible")
      ->capture_default_str()
      ->check(CLI::Range(1, 256));

  GenShapesArgs gen;
  CLI::App* gen_cmd = app.add_subcommand("gen-shapes", "Generate the synthetic shapes dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--images", gen.images, "Number of images (default: config data.num_images)");

  CodecArgs fit;
  CLI::App* fit_cmd = app.add_subcommand("fit-codec", "Fit a mask codec on a dataset's instance masks");
  fit_cmd->add_option("--data", fit.data, "Annotation file")->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--dim", fit.dim, "Embedding dimension l")->capture_default_str();
  fit_cmd->add_option("--side", fit.side, "Mask side s")->capture_default_str()->check(CLI::PositiveNumber);
  fit_cmd->add_flag("--center", fit.center, "Subtract the mean mask");
  fit_cmd->add_option("--out", fit.out, "Codec container path")->required();
  fit_cmd->add_option("--top", fit.top, "Ratios listed in the summary")->capture_default_str();

  CodecArgs spec;
  std::string csv_path;
  spec.top = 100;
  CLI::App* spec_cmd = app.add_subcommand("spectrum", "Energy spectrum of the instance masks as CSV");
  spec_cmd->add_option("--data", spec.data, "Annotation file")->required()->check(CLI::ExistingFile);
  spec_cmd->add_option("--top", spec.top, "Number of components")->capture_default_str();
  spec_cmd->add_option("--side", spec.side, "Mask side s")->capture_default_str()->check(CLI::PositiveNumber);
  spec_cmd->add_flag("--center", spec.center, "Subtract the mean mask");
  spec_cmd->add_option("--out", csv_path, "CSV path (default: stdout)");

  ReconArgs recon;
  CLI::App* recon_cmd = app.add_subcommand("eval-recon", "Reconstruction IoU of a codec or an l sweep");
  recon_cmd->add_option("--data", recon.codec.data, "Annotation file")->required()->check(CLI::ExistingFile);
  auto* codec_opt = recon_cmd->add_option("--codec", recon.codec_path, "Codec container")->check(CLI::ExistingFile);
  auto* sweep_opt = recon_cmd->add_option("--l-sweep", recon.sweep, "Comma-separated dimensions, e.g. 10,20,40");
  codec_opt->excludes(sweep_opt);
  recon_cmd->add_option("--side", recon.codec.side, "Mask side s for --l-sweep")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  recon_cmd->add_flag("--center", recon.codec.center, "Subtract the mean mask for --l-sweep");
  recon_cmd->add_option("--holdout", recon.holdout, "Evaluate on this annotation file instead")
      ->check(CLI::ExistingFile);

  MatchArgs match_args;
  CLI::App* match_cmd_app = app.add_subcommand("match", "Optimal assignment of predictions to ground truth");
  CLI::App* loss_cmd_app = app.add_subcommand("loss", "Set loss of a prediction container");
  for (CLI::App* c : {match_cmd_app, loss_cmd_app}) {
    c->add_option("--gt", match_args.gt, "Ground-truth container")->required()->check(CLI::ExistingFile);
    c->add_option("--pred", match_args.pred, "Prediction container")->required()->check(CLI::ExistingFile);
    c->add_option("--codec", match_args.codec, "Codec container")->required()->check(CLI::ExistingFile);
    add_weight_options(c, match_args.weights);
  }
  loss_cmd_app->add_option("--focal-alpha", match_args.focal.alpha, "Focal alpha")->capture_default_str();
  loss_cmd_app->add_option("--focal-gamma", match_args.focal.gamma, "Focal gamma")->capture_default_str();
  loss_cmd_app->add_option("--dice-eps", match_args.dice_eps, "Dice smoothing")->capture_default_str();

  TrainArgs train;
  CLI::App* train_cmd = app.add_subcommand("train-toy", "Train on the toy set; writes checkpoint and metrics");
  train_cmd->add_option("--out", train.out, "Output directory")->required();
  train_cmd->add_option("--steps", train.steps, "Override train.steps");

  InferArgs infer;
  CLI::App* infer_cmd = app.add_subcommand("infer-toy", "Run a checkpoint on the toy set; dumps boxes and masks");
  infer_cmd->add_option("--checkpoint", infer.checkpoint, "Checkpoint directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  infer_cmd->add_option("--out", infer.out, "Output directory")->required();
  infer_cmd->add_option("--stages", infer.stages, "Refinement stages (0: model.stages)")->capture_default_str();

  GradArgs grad;
  CLI::App* grad_cmd = app.add_subcommand("grad-check", "Finite-difference check of every gradient path");
  grad_cmd->add_option("--scope", grad.scope, "all, losses, attention or heads")
      ->capture_default_str()
      ->check(CLI::IsMember({"all", "losses", "attention", "heads"}));
  grad_cmd->add_option("--points", grad.points, "Random points per block")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  grad_cmd->add_flag("--corrupt", grad.corrupt, "Perturb the analytic gradients (negative control)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen_cmd->parsed()) return gen_shapes_cmd(g, gen, out);
    if (fit_cmd->parsed()) return fit_codec_cmd(fit, out);
    if (spec_cmd->parsed()) return spectrum_cmd(spec, csv_path, out);
    if (recon_cmd->parsed()) {
      if (recon.codec_path.empty() && recon.sweep.empty()) {
        throw CLI::ValidationError("eval-recon", "one of --codec or --l-sweep is required");
      }
      return eval_recon_cmd(recon, out);
    }
    if (match_cmd_app->parsed()) return match_cmd(match_args, out);
    if (loss_cmd_app->parsed()) return loss_cmd(match_args, out);
    if (train_cmd->parsed()) return train_toy_cmd(g, train, out);
    if (infer_cmd->parsed()) return infer_toy_cmd(g, infer, out);
    if (grad_cmd->parsed()) return grad_check_cmd(g, grad, out);
  } catch (const CLI::Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::invalid_argument& e) {
    err << "invalid input: " << e.what() << '\n';
    return kExitData;
  } catch (const nlohmann::json::exception& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    err << "i/o error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace setseg
