#pragma once

// Desk-scale rate-distortion training: the Adam optimizer, the learning-rate
// schedule, dataset loading with reproducible random crops, and a training
// loop whose full state (parameters, optimizer moments, RNG streams, step
// counter) round-trips through checkpoints bit-exactly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hsc/codec.hpp"
#include "hsc/config.hpp"
#include "hsc/image.hpp"
#include "hsc/model.hpp"

namespace hsc {

// ---------------------------------------------------------------------------
// learning-rate schedule

// Constant base rate for the first 87.5% of the run, then linear decay to
// the final rate over the remaining 12.5%.
inline double lr_schedule(std::int64_t step, std::int64_t total_steps, double base_lr = 1e-4,
                          double final_lr = 1e-5) {
  if (total_steps <= 0) throw std::invalid_argument("lr_schedule: total_steps must be positive");
  if (step < 0 || step > total_steps) throw std::invalid_argument("lr_schedule: step out of range");
  const double knee = 0.875 * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s <= knee) return base_lr;
  const double t = (s - knee) / (static_cast<double>(total_steps) - knee);
  return base_lr + (final_lr - base_lr) * t;
}

// ---------------------------------------------------------------------------
// Adam

// Standard Adam (β1=0.9, β2=0.999, ε=1e-8) over every parameter in a
// registry, in registry (creation) order. Moments are kept in double even
// for float models so an update is the same arithmetic no matter how often
// the run was checkpointed and resumed.
template <typename R>
class AdamT {
 public:
  explicit AdamT(ParamRegistryT<R>& reg, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8)
      : reg_(&reg), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto* p : reg.list()) {
      m_.push_back(TensorT<double>::zeros(p->value.shape));
      v_.push_back(TensorT<double>::zeros(p->value.shape));
    }
  }

  std::int64_t steps_taken() const { return t_; }

  // One update from the gradients currently summed into the registry.
  // Gradients are left untouched; the caller clears them per step.
  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const auto& params = reg_->list();
    for (std::size_t i = 0; i < params.size(); ++i) {
      ParameterT<R>& p = *params[i];
      auto& m = m_[i].data;
      auto& v = v_[i].data;
      for (std::size_t j = 0; j < m.size(); ++j) {
        const double g = static_cast<double>(p.grad.data[j]);
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
        const double update = lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
        p.value.data[j] = static_cast<R>(static_cast<double>(p.value.data[j]) - update);
      }
    }
  }

  // Moment tensors ride in the same checkpoint as the parameters, under
  // "adam.m.<param>" / "adam.v.<param>".
  void store(Checkpoint& ck) const {
    const auto& params = reg_->list();
    for (std::size_t i = 0; i < params.size(); ++i) {
      ck.add_tensor("adam.m." + params[i]->name, m_[i]);
      ck.add_tensor("adam.v." + params[i]->name, v_[i]);
    }
    ck.set_meta("adam.steps", std::to_string(t_));
  }

  void load(const Checkpoint& ck) {
    const auto& params = reg_->list();
    for (std::size_t i = 0; i < params.size(); ++i) {
      TensorT<double> m = ck.get_tensor<double>("adam.m." + params[i]->name);
      TensorT<double> v = ck.get_tensor<double>("adam.v." + params[i]->name);
      if (m.shape != params[i]->value.shape || v.shape != params[i]->value.shape)
        throw std::runtime_error("checkpoint: optimizer moment shape mismatch for '" +
                                 params[i]->name + "'");
      m_[i] = std::move(m);
      v_[i] = std::move(v);
    }
    t_ = std::stoll(ck.require_meta("adam.steps"));
  }

 private:
  ParamRegistryT<R>* reg_;
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<TensorT<double>> m_, v_;
};

using Adam = AdamT<float>;

// ---------------------------------------------------------------------------
// dataset

template <typename R = float>
struct DatasetT {
  std::vector<std::string> names;   // basenames, sorted
  std::vector<TensorT<R>> images;   // parallel to names, each [h, w, 3]
};

using Dataset = DatasetT<float>;

// Loads every .ppm in `dir`, sorted by filename so the sequence is stable
// across platforms. Files that fail to parse or are smaller than
// `min_extent` on either side are skipped with a warning; an empty result
// is an error.
template <typename R = float>
DatasetT<R> load_training_set(const std::string& dir, std::int64_t min_extent,
                              std::ostream* warn = nullptr) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw std::runtime_error("dataset: not a directory: " + dir);
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    if (entry.path().extension() == ".ppm") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  DatasetT<R> ds;
  for (const auto& path : files) {
    try {
      TensorT<R> img = read_ppm<R>(path.string());
      if (img.shape[0] < min_extent || img.shape[1] < min_extent) {
        if (warn)
          *warn << "warning: skipping " << path.filename().string() << ": " << img.shape[1] << "x"
                << img.shape[0] << " is smaller than the " << min_extent << "-pixel crop\n";
        continue;
      }
      ds.names.push_back(path.filename().string());
      ds.images.push_back(std::move(img));
    } catch (const std::exception& ex) {
      if (warn) *warn << "warning: skipping " << path.filename().string() << ": " << ex.what() << "\n";
    }
  }
  if (ds.images.empty()) throw std::runtime_error("dataset: no usable images in " + dir);
  return ds;
}

// Uniform random crop. Draws exactly two values per call — row offset then
// column offset — so a fixed seed reproduces the crop sequence exactly.
template <typename R>
TensorT<R> random_crop(const TensorT<R>& img, std::int64_t size, Rng& rng) {
  if (img.shape.size() != 3)
    throw std::invalid_argument("crop: image must be [h, w, c], got " + shape_str(img.shape));
  const std::int64_t h = img.shape[0], w = img.shape[1], c = img.shape[2];
  if (size <= 0 || size > h || size > w)
    throw std::invalid_argument("crop: size " + std::to_string(size) + " does not fit in " +
                                shape_str(img.shape));
  const std::int64_t oy = rng.uniform_int(h - size + 1);
  const std::int64_t ox = rng.uniform_int(w - size + 1);
  TensorT<R> out({size, size, c});
  for (std::int64_t y = 0; y < size; ++y)
    for (std::int64_t x = 0; x < size; ++x)
      for (std::int64_t k = 0; k < c; ++k)
        out.data[static_cast<std::size_t>((y * size + x) * c + k)] =
            img.data[static_cast<std::size_t>(((oy + y) * w + (ox + x)) * c + k)];
  return out;
}

// ---------------------------------------------------------------------------
// training loop

struct TrainLogRow {
  std::int64_t step = 0;
  double loss = 0.0;
  double bpp = 0.0;
  double mse = 0.0;
  double psnr = 0.0;
  double lr = 0.0;
};

inline void write_log_header(std::ostream& os) { os << "step,loss,bpp,mse,psnr,lr\n"; }

inline void write_log_row(std::ostream& os, const TrainLogRow& r) {
  std::ostringstream line;
  line.precision(8);
  line << r.step << "," << r.loss << "," << r.bpp << "," << r.mse << "," << psnr_str(r.psnr) << ","
       << r.lr;
  os << line.str() << "\n";
}

// Owns one training run: model, optimizer, and the two RNG streams (data
// order / quantization noise). Every piece of state serializes into a
// Checkpoint, and a resumed trainer continues the step sequence
// bit-identically.
template <typename R = float>
class TrainerT {
 public:
  // Fresh run. Parameter init, data order, and quantization noise each get
  // an independent stream derived from the config seed.
  explicit TrainerT(const TrainConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng seeder(cfg_.seed);
    Rng init_rng(seeder.next_u64());
    data_rng_.set_state(seeder.next_u64());
    noise_rng_.set_state(seeder.next_u64());
    model_ = std::make_unique<ModelT<R>>(cfg_.model, init_rng);
    adam_ = std::make_unique<AdamT<R>>(model_->reg);
  }

  // Resume from a checkpoint produced by `checkpoint()`.
  explicit TrainerT(const Checkpoint& ck) {
    cfg_ = train_config_from_string(ck.require_meta("train_config"));
    Rng scratch(0);
    model_ = std::make_unique<ModelT<R>>(cfg_.model, scratch);
    load_params(ck, model_->reg);
    adam_ = std::make_unique<AdamT<R>>(model_->reg);
    adam_->load(ck);
    step_ = std::stoll(ck.require_meta("step"));
    if (step_ < 0 || step_ > cfg_.steps)
      throw std::runtime_error("checkpoint: step counter out of range");
    data_rng_.set_state(std::stoull(ck.require_meta("rng.data")));
    noise_rng_.set_state(std::stoull(ck.require_meta("rng.noise")));
  }

  const TrainConfig& config() const { return cfg_; }
  ModelT<R>& model() { return *model_; }
  const ModelT<R>& model() const { return *model_; }
  std::int64_t step() const { return step_; }
  const std::vector<TrainLogRow>& history() const { return history_; }

  // Full state snapshot; `TrainerT(snapshot)` continues bit-identically.
  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.set_meta("model_config", model_config_to_string(cfg_.model));
    ck.set_meta("train_config", train_config_to_string(cfg_));
    ck.set_meta("step", std::to_string(step_));
    ck.set_meta("rng.data", std::to_string(data_rng_.state()));
    ck.set_meta("rng.noise", std::to_string(noise_rng_.state()));
    store_params(ck, model_->reg);
    adam_->store(ck);
    return ck;
  }

  // Runs one optimizer step: `batch` gradient accumulations (each one crop
  // drawn as image index, then row/col offsets), then Adam. Returns the
  // step's averaged statistics.
  TrainLogRow train_step(const DatasetT<R>& data) {
    if (step_ >= cfg_.steps) throw std::logic_error("train: run is already complete");
    if (data.images.empty()) throw std::invalid_argument("train: empty dataset");
    const std::int64_t step = step_ + 1;
    const double lr = lr_schedule(step, cfg_.steps, cfg_.lr, cfg_.lr_final);
    model_->reg.zero_grads();
    double loss_acc = 0.0, bpp_acc = 0.0, mse_acc = 0.0;
    for (int b = 0; b < cfg_.batch; ++b) {
      const auto idx =
          data_rng_.uniform_int(static_cast<std::int64_t>(data.images.size()));
      TensorT<R> patch = random_crop(data.images[static_cast<std::size_t>(idx)], cfg_.crop, data_rng_);
      try {
        TapeT<R> tape;
        typename TapeT<R>::Scope scope(tape);
        auto x = make_leaf(std::move(patch));
        auto fwd = forward_train(*model_, x, cfg_.lambda, noise_rng_);
        loss_acc += static_cast<double>(fwd.loss->value.data[0]);
        bpp_acc += static_cast<double>(fwd.bpp->value.data[0]);
        mse_acc += static_cast<double>(fwd.mse->value.data[0]);
        // Backward through loss/batch so accumulated gradients average the
        // per-crop objectives.
        tape.backward(scale(fwd.loss, 1.0 / static_cast<double>(cfg_.batch)));
      } catch (const std::exception& e) {
        // A forward failure with corrupted weights (e.g. a NaN reaching the
        // spread predictor's positivity check) gets the same tensor dump as
        // an observed non-finite loss.
        const std::string dump = nonfinite_report();
        if (!dump.empty())
          throw std::runtime_error("train: non-finite loss at step " + std::to_string(step) + " (" +
                                   e.what() + ")" + dump);
        throw;
      }
    }
    TrainLogRow row;
    row.step = step;
    row.loss = loss_acc / cfg_.batch;
    row.bpp = bpp_acc / cfg_.batch;
    row.mse = mse_acc / cfg_.batch;
    row.psnr = psnr_from_mse(row.mse);
    row.lr = lr;
    if (!std::isfinite(row.loss)) throw_nonfinite(row);
    adam_->step(lr);
    step_ = step;
    history_.push_back(row);
    return row;
  }

  // Advances to cfg.steps. CSV rows go to `csv` every log_every steps plus
  // the final step (header written when starting from step 0). When
  // ckpt_path is nonempty, a checkpoint lands there every checkpoint_every
  // steps (0: final only) and always at the end.
  void run(const DatasetT<R>& data, std::ostream* csv = nullptr, const std::string& ckpt_path = {}) {
    if (data.images.empty()) throw std::invalid_argument("train: empty dataset");
    for (std::size_t i = 0; i < data.images.size(); ++i)
      if (data.images[i].shape[0] < cfg_.crop || data.images[i].shape[1] < cfg_.crop)
        throw std::invalid_argument("train: image '" + data.names[i] + "' is smaller than the crop");
    if (csv && step_ == 0) write_log_header(*csv);
    while (step_ < cfg_.steps) {
      const TrainLogRow row = train_step(data);
      const bool last = step_ == cfg_.steps;
      if (csv && ((cfg_.log_every > 0 && step_ % cfg_.log_every == 0) || last))
        write_log_row(*csv, row);
      if (!ckpt_path.empty() &&
          ((cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0) || last))
        checkpoint().save(ckpt_path);
    }
  }

 private:
  // Lists parameters carrying non-finite entries — corrupted values first
  // (the likely root cause), then gradient-only casualties. Empty string
  // when every tensor is finite.
  std::string nonfinite_report() const {
    std::ostringstream vals, grads;
    int nv = 0, ng = 0;
    for (const auto* p : model_->reg.list()) {
      std::size_t bad_v = 0, bad_g = 0;
      for (const auto v : p->value.data)
        if (!std::isfinite(static_cast<double>(v))) ++bad_v;
      for (const auto g : p->grad.data)
        if (!std::isfinite(static_cast<double>(g))) ++bad_g;
      if (bad_v > 0 && nv < 8) {
        vals << (nv ? ", " : "") << p->name << " (" << bad_v << " of " << p->value.data.size() << ")";
        if (++nv == 8) vals << ", ...";
      }
      if (bad_v == 0 && bad_g > 0 && ng < 8) {
        grads << (ng ? ", " : "") << p->name << " (" << bad_g << " of " << p->grad.data.size() << ")";
        if (++ng == 8) grads << ", ...";
      }
    }
    std::string out;
    if (nv > 0) out += "; offending tensors: " + vals.str();
    if (ng > 0) out += "; non-finite gradients only: " + grads.str();
    return out;
  }

  [[noreturn]] void throw_nonfinite(const TrainLogRow& row) const {
    std::ostringstream os;
    os << "train: non-finite loss at step " << row.step << " (loss=" << row.loss
       << ", bpp=" << row.bpp << ", mse=" << row.mse << ")" << nonfinite_report();
    throw std::runtime_error(os.str());
  }

  TrainConfig cfg_;
  std::unique_ptr<ModelT<R>> model_;
  std::unique_ptr<AdamT<R>> adam_;
  Rng data_rng_{0};
  Rng noise_rng_{0};
  std::int64_t step_ = 0;
  std::vector<TrainLogRow> history_;
};

using Trainer = TrainerT<float>;

}  // namespace hsc
