#include "setseg/train.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

namespace setseg {

double global_norm(const ad::ParamStore& grads) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) sq += g.squaredNorm();
  return std::sqrt(sq);
}

double AdamW::step(ad::ParamStore& params, const ad::ParamStore& grads,
                   const std::function<bool(const std::string&)>& frozen) {
  auto is_frozen = [&](const std::string& name) { return frozen && frozen(name); };
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    if (!is_frozen(name)) sq += g.squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericalError("non-finite gradient norm");
  const double clip = cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm ? cfg_.clip_norm / norm : 1.0;

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (const auto& [name, g] : grads) {
    if (is_frozen(name)) continue;
    Matrix& p = params.at(name);
    auto [mit, m_new] = m_.try_emplace(name, Matrix::Zero(p.rows(), p.cols()));
    auto [vit, v_new] = v_.try_emplace(name, Matrix::Zero(p.rows(), p.cols()));
    Matrix& m = mit->second;
    Matrix& v = vit->second;
    const Matrix gc = clip * g;
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * gc;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * gc.cwiseProduct(gc);
    const Matrix update = (m / bc1).array() / ((v / bc2).array().sqrt() + cfg_.eps);
    p -= cfg_.lr * (update + cfg_.weight_decay * p);
  }
  return norm;
}

std::vector<TrainExample> make_examples(const Dataset& ds, int mask_side) {
  std::vector<TrainExample> out;
  for (const Sample& s : ds.samples) {
    if (s.image.empty()) throw DataError("training needs loaded images");
    TrainExample ex;
    ex.image = s.image;
    ex.gt = ground_truth(s, mask_side);
    for (const Instance& inst : s.instances) {
      if (inst.box.degenerate() || tight_box(inst.mask).degenerate()) continue;
      ex.gt_masks.push_back(inst.mask);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

namespace {

Matrix pixel_column(const Raster& image) {
  return Eigen::Map<const Matrix>(image.data.data(), static_cast<Eigen::Index>(image.data.size()), 1);
}

void shuffle(std::vector<size_t>& v, Rng& rng) {
  for (size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<size_t>(rng.uniform_int(0, static_cast<int>(i) - 1));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace

Trainer::Trainer(ModelConfig model, TrainConfig cfg, MaskCodec codec, ad::ParamStore params,
                 std::vector<TrainExample> data)
    : model_(std::move(model)),
      cfg_(std::move(cfg)),
      codec_(std::move(codec)),
      params_(std::move(params)),
      data_(std::move(data)),
      optimizer_(cfg_.optimizer),
      rng_(cfg_.seed ^ 0x5e7a11d5ULL) {
  model_.validate();
  if (data_.empty()) throw DataError("training set is empty");
  if (cfg_.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (codec_.dim() != model_.embedding_dim) throw std::invalid_argument("codec dimension differs from the model's");
  for (const TrainExample& ex : data_) {
    ex.gt.validate(model_.num_classes);
    if (static_cast<int>(ex.gt.size()) > model_.num_queries) throw DataError("more ground truths than predictions");
  }

  if (cfg_.init_mask_bias) {
    Vector mean = Vector::Zero(model_.embedding_dim);
    int count = 0;
    for (const TrainExample& ex : data_) {
      for (const Mask& m : ex.gt.masks) {
        mean += codec_.encode(m);
        ++count;
      }
    }
    if (count > 0) set_mask_bias(params_, model_, mean / count);
  }
  if (!cfg_.train_backbone) {
    for (TrainExample& ex : data_) ex.pyramid = backbone_pyramid(ex.image, params_, model_.backbone);
  }
  order_.resize(data_.size());
  std::iota(order_.begin(), order_.end(), size_t{0});
  shuffle(order_, rng_);
}

std::vector<FeatureMap> Trainer::pyramid(size_t index) const {
  const TrainExample& ex = data_.at(index);
  if (!cfg_.train_backbone) return ex.pyramid;
  return backbone_pyramid(ex.image, params_, model_.backbone);
}

Trainer::ImageResult Trainer::run_image(size_t index) const {
  const TrainExample& ex = data_[index];
  ad::Tape tape;
  ad::ParamBinder binder(tape, params_, true);
  ad::PyramidVars vars;
  if (cfg_.train_backbone) {
    vars = backbone_forward(tape.constant(pixel_column(ex.image)), ex.image.height, ex.image.width, binder,
                            model_.backbone);
  } else {
    vars = ad::constant_pyramid(tape, ex.pyramid);
  }
  const ad::TrainForward fwd = ad::forward_train(vars, ex.gt, binder, model_, codec_, cfg_.loss);
  tape.backward(fwd.loss);
  ImageResult r;
  r.loss = fwd.loss.scalar();
  for (const LossBreakdown& lb : fwd.losses) r.stage_loss.push_back(lb.total);
  r.grads = binder.gradients();
  return r;
}

std::vector<size_t> Trainer::next_batch() {
  if (cursor_ >= order_.size()) {
    shuffle(order_, rng_);
    cursor_ = 0;
  }
  const size_t end = std::min(order_.size(), cursor_ + static_cast<size_t>(cfg_.batch_size));
  std::vector<size_t> batch(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                            order_.begin() + static_cast<std::ptrdiff_t>(end));
  cursor_ = end;
  return batch;
}

double Trainer::scheduled_lr(int step) const {
  double lr = cfg_.optimizer.lr;
  for (double m : cfg_.lr_milestones) {
    if (step > static_cast<int>(std::lround(m * cfg_.steps))) lr *= cfg_.lr_decay;
  }
  return lr;
}

StepMetrics Trainer::step() {
  const std::vector<size_t> batch = next_batch();
  std::vector<ImageResult> results(batch.size());
  const int threads = std::clamp(cfg_.threads, 1, static_cast<int>(batch.size()));
  if (threads == 1) {
    for (size_t b = 0; b < batch.size(); ++b) results[b] = run_image(batch[b]);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<size_t>(threads));
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (size_t b = static_cast<size_t>(t); b < batch.size(); b += static_cast<size_t>(threads)) {
            results[b] = run_image(batch[b]);
          }
        } catch (...) {
          errors[static_cast<size_t>(t)] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  // Reduction in batch order keeps the result independent of the thread count.
  StepMetrics metrics;
  metrics.step = optimizer_.steps() + 1;
  metrics.stage_loss.assign(static_cast<size_t>(model_.stages), 0.0);
  ad::ParamStore grads;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (size_t b = 0; b < batch.size(); ++b) {
    ImageResult& r = results[b];
    if (!std::isfinite(r.loss)) {
      std::ostringstream msg;
      msg << "non-finite loss at step " << metrics.step << " on image " << batch[b] << " (stage losses:";
      for (double s : r.stage_loss) msg << " " << s;
      msg << ")";
      throw NumericalError(msg.str());
    }
    metrics.loss += inv * r.loss;
    for (size_t s = 0; s < r.stage_loss.size(); ++s) metrics.stage_loss[s] += inv * r.stage_loss[s];
    for (auto& [name, g] : r.grads) {
      auto it = grads.find(name);
      if (it == grads.end()) {
        grads.emplace(name, inv * g);
      } else {
        it->second += inv * g;
      }
    }
  }
  optimizer_.set_lr(scheduled_lr(metrics.step));
  const bool train_backbone = cfg_.train_backbone;
  const bool train_queries = cfg_.train_queries;
  metrics.grad_norm = optimizer_.step(params_, grads, [train_backbone, train_queries](const std::string& name) {
    if (!train_backbone && name.rfind("backbone.", 0) == 0) return true;
    return !train_queries && name == "queries";
  });
  return metrics;
}

std::vector<StepMetrics> Trainer::train_epoch() {
  std::vector<StepMetrics> out;
  do {
    out.push_back(step());
  } while (cursor_ < order_.size());
  return out;
}

EvalMetrics evaluate(const std::vector<TrainExample>& data, const std::function<std::vector<FeatureMap>(size_t)>& pyramid,
                     const ad::ParamStore& params, const ModelConfig& model, const MaskCodec& codec,
                     const SetLossConfig& loss, const EvalConfig& eval) {
  EvalMetrics m;
  m.stage_loss.assign(static_cast<size_t>(model.stages), 0.0);
  m.stage_box_iou.assign(static_cast<size_t>(model.stages), 0.0);
  m.min_predictions = std::numeric_limits<int>::max();
  double mask_sum = 0.0, box_sum = 0.0, dup_sum = 0.0;

  for (size_t i = 0; i < data.size(); ++i) {
    const TrainExample& ex = data[i];
    const std::vector<FeatureMap> levels = pyramid(i);
    ad::Tape tape;
    ad::ParamBinder binder(tape, params, false);
    const ad::TrainForward fwd = ad::forward_train(ad::constant_pyramid(tape, levels), ex.gt, binder, model, codec, loss);
    m.mean_loss += fwd.loss.scalar();
    for (size_t s = 0; s < fwd.losses.size(); ++s) {
      m.stage_loss[s] += fwd.losses[s].total;
      const std::vector<BBox> boxes = matrix_to_boxes(fwd.stages[s].boxes.value());
      for (size_t g = 0; g < ex.gt.size(); ++g) {
        m.stage_box_iou[s] += iou(ex.gt.boxes[g], boxes[static_cast<size_t>(fwd.assignments[s].prediction_for_gt[g])]);
      }
    }

    const PredictionSet pred = to_prediction_set(fwd.stages.back());
    const int k = static_cast<int>(pred.size());
    m.min_predictions = std::min(m.min_predictions, k);
    m.max_predictions = std::max(m.max_predictions, k);
    const int c = pred.num_classes();
    std::vector<double> scores(pred.size());
    std::vector<Raster> masks(pred.size());
    for (size_t j = 0; j < pred.size(); ++j) {
      scores[j] = pred.probs.row(static_cast<Eigen::Index>(j)).head(c).maxCoeff();
      if (scores[j] >= eval.score_threshold && !pred.boxes[j].degenerate()) {
        const Mask soft = codec.decode(pred.embeddings.row(static_cast<Eigen::Index>(j)).transpose());
        masks[j] = paste_mask(soft, pred.boxes[j], ex.image.height, ex.image.width);
      }
    }
    for (size_t g = 0; g < ex.gt.size(); ++g) {
      double best_box = 0.0, best_mask = 0.0;
      int high = 0;
      for (size_t j = 0; j < pred.size(); ++j) {
        const double box_iou = iou(ex.gt.boxes[g], pred.boxes[j]);
        if (scores[j] > eval.high_score && box_iou >= eval.duplicate_iou) ++high;
        if (scores[j] < eval.score_threshold) continue;
        best_box = std::max(best_box, box_iou);
        if (!masks[j].empty()) best_mask = std::max(best_mask, binary_iou(masks[j].data, ex.gt_masks[g].data));
      }
      box_sum += best_box;
      mask_sum += best_mask;
      dup_sum += high;
      m.max_high_score_per_gt = std::max(m.max_high_score_per_gt, high);
      ++m.num_gt;
    }
  }
  const double n_img = static_cast<double>(std::max<size_t>(data.size(), 1));
  m.mean_loss /= n_img;
  for (double& v : m.stage_loss) v /= n_img;
  if (m.num_gt > 0) {
    for (double& v : m.stage_box_iou) v /= m.num_gt;
    m.mean_best_box_iou = box_sum / m.num_gt;
    m.mean_best_mask_iou = mask_sum / m.num_gt;
    m.mean_high_score_per_gt = dup_sum / m.num_gt;
  }
  if (data.empty()) m.min_predictions = 0;
  return m;
}

EvalMetrics evaluate(const Trainer& trainer, const EvalConfig& eval) {
  return evaluate(
      trainer.examples(), [&trainer](size_t i) { return trainer.pyramid(i); }, trainer.params(), trainer.model(),
      trainer.codec(), trainer.config().loss, eval);
}

}  // namespace setseg
