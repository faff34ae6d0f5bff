#pragma once

// AdamW, plateau learning-rate scheduling and the alternating
// discriminator/generator training loop.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "swiftsr/checkpoint.hpp"
#include "swiftsr/data.hpp"
#include "swiftsr/losses.hpp"
#include "swiftsr/metrics.hpp"
#include "swiftsr/models.hpp"

namespace swiftsr {

struct AdamWConfig {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 1e-2f;

  void validate() const {
    if (!(beta1 >= 0.0f && beta1 < 1.0f) || !(beta2 >= 0.0f && beta2 < 1.0f)) {
      throw Error("AdamW betas must lie in [0, 1)");
    }
    if (!(lr > 0.0f) || !(eps > 0.0f)) throw Error("AdamW lr and eps must be positive");
  }
};

/// First/second moments for one parameter tensor.
struct AdamWSlot {
  Tensor m;
  Tensor v;
};

/// Decoupled-weight-decay Adam over a fixed list of parameter tensors.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  AdamWConfig& config() { return cfg_; }
  const AdamWConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return t_; }
  std::map<std::string, AdamWSlot>& slots() { return slots_; }

  /// One update of every (param, grad) pair. A non-finite gradient aborts
  /// the whole step before anything is modified.
  void step(const std::vector<ParamRef>& params) {
    for (const auto& p : params) {
      if (p.value->shape() != p.grad->shape()) {
        throw ShapeError("adamw: gradient shape " + p.grad->shape().str() + " does not match '" + p.name + "' " +
                         p.value->shape().str());
      }
      try {
        tensor_validate_finite(*p.grad);
      } catch (const NonFiniteError& e) {
        throw NonFiniteError(e.index(), "adamw: step aborted, non-finite gradient in '" + p.name +
                                            "' at flat index " + std::to_string(e.index()));
      }
    }
    ++t_;
    for (const auto& p : params) {
      auto it = slots_.find(p.name);
      if (it == slots_.end()) {
        it = slots_.emplace(p.name, AdamWSlot{Tensor(p.value->shape()), Tensor(p.value->shape())}).first;
      }
      apply(*p.value, *p.grad, it->second, t_, cfg_);
    }
  }

  /// m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2;
  /// theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd theta).
  static void apply(Tensor& theta, const Tensor& g, AdamWSlot& s, std::uint64_t t, const AdamWConfig& cfg) {
    const double bc1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(t));
    const float b1 = cfg.beta1, b2 = cfg.beta2;
    const double lr = cfg.lr, wd = cfg.weight_decay, eps = cfg.eps;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      s.m[i] = b1 * s.m[i] + (1.0f - b1) * g[i];
      s.v[i] = b2 * s.v[i] + (1.0f - b2) * g[i] * g[i];
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      theta[i] = static_cast<float>(theta[i] - lr * (mhat / (std::sqrt(vhat) + eps) + wd * theta[i]));
    }
  }

  /// "opt.<prefix>.<param>.m|v" plus "opt.<prefix>.step".
  void save_state(NamedTensors& out, const std::string& prefix) const {
    out.emplace_back("opt." + prefix + ".step", Tensor(vec_shape(1), static_cast<float>(t_)));
    for (const auto& [n, s] : slots_) {
      out.emplace_back("opt." + prefix + "." + n + ".m", s.m);
      out.emplace_back("opt." + prefix + "." + n + ".v", s.v);
    }
  }
  void load_state(const NamedTensors& in, const std::string& prefix) {
    const std::string head = "opt." + prefix + ".";
    slots_.clear();
    t_ = 0;
    for (const auto& [n, t] : in) {
      if (n.rfind(head, 0) != 0) continue;
      const std::string rest = n.substr(head.size());
      if (rest == "step") {
        t_ = static_cast<std::uint64_t>(t[0]);
      } else if (rest.size() > 2 && rest.compare(rest.size() - 2, 2, ".m") == 0) {
        slots_[rest.substr(0, rest.size() - 2)].m = t;
      } else if (rest.size() > 2 && rest.compare(rest.size() - 2, 2, ".v") == 0) {
        slots_[rest.substr(0, rest.size() - 2)].v = t;
      }
    }
  }

 private:
  AdamWConfig cfg_;
  std::uint64_t t_ = 0;
  std::map<std::string, AdamWSlot> slots_;
};

/// Single-tensor form. `step` is the count of updates already applied; an
/// empty slot is zero-initialized.
inline void adamw_step(Tensor& param, const Tensor& grad, AdamWSlot& state, std::uint64_t& step,
                       const AdamWConfig& cfg) {
  cfg.validate();
  require_same_shape(param, grad, "adamw_step");
  tensor_validate_finite(grad);
  if (state.m.empty()) state = AdamWSlot{Tensor(param.shape()), Tensor(param.shape())};
  AdamW::apply(param, grad, state, ++step, cfg);
}

// ---------------------------------------------------------------------------

struct PlateauConfig {
  float factor = 0.5f;
  std::size_t patience = 5;
  float min_lr = 1e-7f;

  void validate() const {
    if (!(factor > 0.0f && factor < 1.0f)) throw Error("plateau factor must lie in (0, 1)");
  }
};

/// Reduce-on-plateau for a minimized metric (strict improvement, no margin).
class PlateauScheduler {
 public:
  PlateauScheduler(PlateauConfig cfg, float lr) : cfg_(cfg), lr_(lr) { cfg_.validate(); }

  float lr() const { return lr_; }
  float best() const { return best_; }
  std::size_t counter() const { return counter_; }

  float step(float metric) {
    if (!std::isfinite(metric)) throw NonFiniteError(0, "plateau_step: non-finite metric");
    if (metric < best_) {
      best_ = metric;
      counter_ = 0;
    } else if (++counter_ > cfg_.patience) {
      lr_ = std::max(lr_ * cfg_.factor, cfg_.min_lr);
      counter_ = 0;
    }
    return lr_;
  }

  void save_state(NamedTensors& out, const std::string& prefix) const {
    out.emplace_back("state." + prefix + ".lr", Tensor(vec_shape(1), lr_));
    out.emplace_back("state." + prefix + ".best", Tensor(vec_shape(1), best_));
    out.emplace_back("state." + prefix + ".counter", Tensor(vec_shape(1), static_cast<float>(counter_)));
  }
  void load_state(const NamedTensors& in, const std::string& prefix) {
    auto get = [&](const char* key) {
      const Tensor* t = find_tensor(in, "state." + prefix + "." + key);
      if (!t) throw FormatError("checkpoint lacks scheduler field '" + prefix + "." + key + "'");
      return (*t)[0];
    };
    lr_ = get("lr");
    best_ = get("best");
    counter_ = static_cast<std::size_t>(get("counter"));
  }

 private:
  PlateauConfig cfg_;
  float lr_;
  float best_ = std::numeric_limits<float>::infinity();
  std::size_t counter_ = 0;
};

inline float plateau_step(PlateauScheduler& sched, float metric) { return sched.step(metric); }

// ---------------------------------------------------------------------------

struct TrainConfig {
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;
  ExtractorConfig extractor;
  PipelineConfig pipeline;
  AdamWConfig opt_g;
  AdamWConfig opt_d;
  PlateauConfig plateau;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::uint64_t extractor_seed = 1234;
  double adversarial_weight = kAdversarialWeight;
  ContentNorm content_norm = ContentNorm::Mean;
  AdversarialReduction adversarial_reduction = AdversarialReduction::Sum;
};

struct TrainState {
  std::size_t epoch = 0;
  std::size_t step = 0;
};

/// Owns both networks, the frozen extractor and both optimizers.
class Trainer {
 public:
  explicit Trainer(TrainConfig cfg)
      : cfg_(std::move(cfg)),
        gen_(build_generator(cfg_.generator, cfg_.seed)),
        disc_(build_discriminator(cfg_.discriminator, derive_seed(cfg_.seed, 0xD15C))),
        fx_(FeatureExtractor::reference(cfg_.extractor_seed, cfg_.extractor)),
        opt_g_(cfg_.opt_g),
        opt_d_(cfg_.opt_d),
        sched_g_(cfg_.plateau, cfg_.opt_g.lr),
        sched_d_(cfg_.plateau, cfg_.opt_d.lr) {}

  ModelGraph& generator() { return gen_; }
  ModelGraph& discriminator() { return disc_; }
  FeatureExtractor& extractor() { return fx_; }
  AdamW& optimizer_g() { return opt_g_; }
  AdamW& optimizer_d() { return opt_d_; }
  TrainState& state() { return state_; }
  const TrainConfig& config() const { return cfg_; }
  PlateauScheduler& scheduler_g() { return sched_g_; }
  PlateauScheduler& scheduler_d() { return sched_d_; }

  /// One discriminator update on (real, detached fake) followed by one
  /// generator update on the perceptual loss.
  LossReport train_step(const Tensor& lr_batch, const Tensor& hr_batch) {
    const Tensor sr = generate(lr_batch, hr_batch);
    LossReport rep;
    rep.discriminator = discriminator_step(sr, hr_batch);
    generator_step(sr, hr_batch, rep);
    return rep;
  }

  /// Generator forward in train mode; keeps the context for generator_step.
  Tensor generate(const Tensor& lr_batch, const Tensor& hr_batch) {
    const Shape& ls = lr_batch.shape();
    const Shape& hs = hr_batch.shape();
    const std::size_t r = cfg_.generator.upscale_factor;
    if (ls.n != hs.n || hs.h != ls.h * r || hs.w != ls.w * r || ls.c != hs.c) {
      throw ShapeError("train_step: lr batch " + ls.str() + " and hr batch " + hs.str() +
                       " are inconsistent with scale " + std::to_string(r));
    }
    gen_.zero_grad();
    return gen_.forward(lr_batch, Pass::train());
  }

  /// D update; `sr` is a constant here, so no gradient reaches the generator.
  double discriminator_step(const Tensor& sr, const Tensor& hr_batch) {
    disc_.zero_grad();
    const Tensor d_real = disc_.forward(hr_batch, Pass::train());
    disc_.backward(discriminator_loss_grad_real(d_real), true);
    const Tensor d_fake = disc_.forward(sr, Pass::train());
    disc_.backward(discriminator_loss_grad_fake(d_fake), true);
    const double loss = discriminator_loss(d_real.data(), d_fake.data());
    check_finite(loss, "discriminator loss");
    opt_d_.config().lr = sched_d_.lr();
    opt_d_.step(disc_.trainable());
    disc_.clear_context();
    return loss;
  }

  /// G update on the perceptual loss of `sr`, which must come from the last
  /// generate() call. D parameter gradients are not accumulated.
  void generator_step(const Tensor& sr, const Tensor& hr_batch, LossReport& rep) {
    const Tensor d_fake_g = disc_.forward(sr, Pass::train());
    rep.adversarial = adversarial_loss(d_fake_g.data(), cfg_.adversarial_reduction);
    auto [content, g_sr] = content_loss_with_grad(fx_, hr_batch, sr, cfg_.content_norm);
    rep.content = content;
    rep.perceptual = perceptual_loss(rep.content, rep.adversarial, cfg_.adversarial_weight);
    check_finite(rep.perceptual, "perceptual loss");
    if (cfg_.adversarial_weight != 0.0) {
      Tensor g_p = adversarial_loss_grad(d_fake_g, cfg_.adversarial_reduction);
      for (float& v : g_p.data()) v = static_cast<float>(v * cfg_.adversarial_weight);
      tensor_add_inplace(g_sr, disc_.backward(g_p, false));
    }
    gen_.backward(g_sr, true);
    opt_g_.config().lr = sched_g_.lr();
    opt_g_.step(gen_.trainable());
    gen_.clear_context();
    disc_.clear_context();
    ++state_.step;
  }

  /// Full training state: both networks, optimizer moments, schedulers and
  /// counters.
  NamedTensors snapshot() {
    NamedTensors all = state_dict(gen_, "generator.");
    NamedTensors d = state_dict(disc_, "discriminator.");
    all.insert(all.end(), d.begin(), d.end());
    opt_g_.save_state(all, "g");
    opt_d_.save_state(all, "d");
    sched_g_.save_state(all, "sched_g");
    sched_d_.save_state(all, "sched_d");
    all.emplace_back("state.epoch", Tensor(vec_shape(1), static_cast<float>(state_.epoch)));
    all.emplace_back("state.step", Tensor(vec_shape(1), static_cast<float>(state_.step)));
    return all;
  }

  void restore(const NamedTensors& all) {
    load_state(gen_, all, "generator.");
    load_state(disc_, all, "discriminator.");
    opt_g_.load_state(all, "g");
    opt_d_.load_state(all, "d");
    sched_g_.load_state(all, "sched_g");
    sched_d_.load_state(all, "sched_d");
    const Tensor* e = find_tensor(all, "state.epoch");
    const Tensor* s = find_tensor(all, "state.step");
    if (!e || !s) throw FormatError("checkpoint lacks training counters");
    state_.epoch = static_cast<std::size_t>((*e)[0]);
    state_.step = static_cast<std::size_t>((*s)[0]);
  }

 private:
  static void check_finite(double v, const char* what) {
    if (!std::isfinite(v)) throw NonFiniteError(0, std::string("train_step aborted: non-finite ") + what);
  }

  TrainConfig cfg_;
  ModelGraph gen_;
  ModelGraph disc_;
  FeatureExtractor fx_;
  AdamW opt_g_;
  AdamW opt_d_;
  PlateauScheduler sched_g_;
  PlateauScheduler sched_d_;
  TrainState state_;
};

// ---------------------------------------------------------------------------

struct ValidationResult {
  double perceptual = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
};

/// Deterministic validation pairs: seeded crop, no augmentation.
inline std::vector<ImagePair> validation_pairs(const std::filesystem::path& dir, PipelineConfig cfg) {
  cfg.flip_prob = 0.0;
  cfg.rot90_prob = 0.0;
  std::vector<ImagePair> out;
  std::size_t i = 0;
  for (const auto& p : list_images(dir)) {
    Rng rng(derive_seed(cfg.seed, 0xBA1000 + i++));
    out.push_back(make_pair(load_image(p), cfg, rng));
  }
  if (out.empty()) throw Error("no validation images in '" + dir.string() + "'");
  return out;
}

inline ValidationResult validate(Trainer& t, const std::vector<ImagePair>& pairs) {
  ValidationResult r;
  SsimConfig sc;
  for (const auto& pair : pairs) {
    Tensor lr = stack({pair.lr.pixels}, 1.0f / 255.0f);
    Tensor hr = stack({pair.hr.pixels}, 1.0f / 255.0f);
    Tensor sr = t.generator().forward(lr, Pass::eval());
    const double content = content_loss(t.extractor().extract(hr), t.extractor().extract(sr), t.config().content_norm);
    const Tensor d = t.discriminator().forward(sr, Pass::eval());
    r.perceptual += content + t.config().adversarial_weight * adversarial_loss(d.data(), t.config().adversarial_reduction);
    Tensor sr255 = stack({sr}, 255.0f);
    for (float& v : sr255.data()) v = std::clamp(v, 0.0f, 255.0f);
    r.psnr += psnr(sr255, pair.hr.pixels, 255.0);
    if (sr255.shape().h >= sc.window_size && sr255.shape().w >= sc.window_size) {
      r.ssim += ssim(sr255, pair.hr.pixels, sc);
    } else {
      r.ssim += std::numeric_limits<double>::quiet_NaN();
    }
  }
  const double n = static_cast<double>(pairs.size());
  r.perceptual /= n;
  r.psnr /= n;
  r.ssim /= n;
  return r;
}

struct FitOptions {
  std::filesystem::path train_dir;
  std::filesystem::path val_dir;
  std::filesystem::path out_dir;
  std::size_t epochs = 1;
  std::optional<std::filesystem::path> resume;
  /// Called after every train_step.
  std::function<void(const TrainState&, const LossReport&)> on_step;
};

struct FitResult {
  std::size_t epochs_run = 0;
  std::size_t steps = 0;
  double best_val_perceptual = std::numeric_limits<double>::infinity();
  std::filesystem::path last_checkpoint;
  std::filesystem::path metric_log;
};

inline constexpr const char* kMetricLogHeader =
    "epoch,step,content,adversarial,perceptual,d_loss,val_psnr,val_ssim,lr_g,lr_d";

/// Train-mode batch norm needs two values per channel. Rejects, before any
/// step runs, a crop and batch split whose smallest batch would leave a
/// single value at some normalized layer.
inline void check_batch_norm_sizes(Trainer& t, const PipelineConfig& p, std::size_t batch, std::size_t files) {
  const std::size_t tail = files % batch;
  const std::size_t n = std::min(files, tail ? tail : batch);
  const Shape lr{n, 3, p.crop_size / p.scale, p.crop_size / p.scale};
  Shape s{n, 3, p.crop_size, p.crop_size};
  Sequential& d = t.discriminator().root();
  std::size_t smallest = lr.n * lr.h * lr.w;
  for (std::size_t i = 0; i < 8 && i < d.size(); ++i) {
    s = d.at(i).output_shape(s);
    smallest = std::min(smallest, s.n * s.h * s.w);
  }
  if (smallest < 2) {
    throw Error("crop_size " + std::to_string(p.crop_size) + " with a batch of " + std::to_string(n) +
                " image(s) leaves one value per channel at a batch-norm layer; use a larger crop or a "
                "batch_size that divides the " + std::to_string(files) + " training images");
  }
}

/// Trains for `epochs` total epochs (continuing from a resumed checkpoint).
/// Writes checkpoint_last.ssrg (full state), generator_last.ssrg,
/// generator_best.ssrg and metrics.csv under out_dir.
inline FitResult fit(const TrainConfig& cfg, const FitOptions& opt) {
  namespace fs = std::filesystem;
  fs::create_directories(opt.out_dir);
  Trainer trainer(cfg);
  if (opt.resume) trainer.restore(read_archive(*opt.resume));

  FitResult res;
  res.metric_log = opt.out_dir / "metrics.csv";
  res.last_checkpoint = opt.out_dir / "checkpoint_last.ssrg";
  const bool append = opt.resume.has_value() && fs::exists(res.metric_log);
  std::ofstream log(res.metric_log, append ? std::ios::app : std::ios::trunc);
  if (!log) throw Error("cannot write metric log '" + res.metric_log.string() + "'");
  if (!append) log << kMetricLogHeader << '\n';

  auto write_checkpoints = [&] {
    write_archive(res.last_checkpoint, trainer.snapshot());
    save_checkpoint(trainer.generator(), opt.out_dir / "generator_last.ssrg");
  };

  if (trainer.state().epoch >= opt.epochs) {
    write_checkpoints();
    if (!fs::exists(opt.out_dir / "generator_best.ssrg")) {
      save_checkpoint(trainer.generator(), opt.out_dir / "generator_best.ssrg");
    }
    return res;
  }

  PipelineConfig pcfg = cfg.pipeline;
  pcfg.seed = cfg.seed;
  Batcher batcher(opt.train_dir, pcfg, cfg.batch_size);
  check_batch_norm_sizes(trainer, pcfg, cfg.batch_size, batcher.file_count());
  const auto val = validation_pairs(opt.val_dir.empty() ? opt.train_dir : opt.val_dir, pcfg);
  res.best_val_perceptual = trainer.scheduler_g().best();

  while (trainer.state().epoch < opt.epochs) {
    const std::size_t epoch = trainer.state().epoch;
    batcher.begin_epoch(epoch);
    LossReport mean;
    std::size_t batches = 0;
    while (auto b = batcher.next()) {
      const LossReport rep = trainer.train_step(b->lr, b->hr);
      if (opt.on_step) opt.on_step(trainer.state(), rep);
      mean.content += rep.content;
      mean.adversarial += rep.adversarial;
      mean.perceptual += rep.perceptual;
      mean.discriminator += rep.discriminator;
      ++batches;
    }
    if (batches > 0) {
      const double n = static_cast<double>(batches);
      mean.content /= n;
      mean.adversarial /= n;
      mean.perceptual /= n;
      mean.discriminator /= n;
    }
    const ValidationResult v = validate(trainer, val);
    const float prev_best = trainer.scheduler_g().best();
    trainer.scheduler_g().step(static_cast<float>(v.perceptual));
    trainer.scheduler_d().step(static_cast<float>(v.perceptual));
    trainer.state().epoch = epoch + 1;
    log << trainer.state().epoch << ',' << trainer.state().step << ',' << format_score(mean.content) << ','
        << format_score(mean.adversarial) << ',' << format_score(mean.perceptual) << ','
        << format_score(mean.discriminator) << ',' << format_score(v.psnr) << ',' << format_score(v.ssim)
        << ',' << trainer.scheduler_g().lr() << ',' << trainer.scheduler_d().lr() << '\n';
    log.flush();
    if (static_cast<float>(v.perceptual) < prev_best) {
      save_checkpoint(trainer.generator(), opt.out_dir / "generator_best.ssrg");
    }
    res.best_val_perceptual = trainer.scheduler_g().best();
    write_checkpoints();
    ++res.epochs_run;
  }
  res.steps = trainer.state().step;
  return res;
}

}  // namespace swiftsr
