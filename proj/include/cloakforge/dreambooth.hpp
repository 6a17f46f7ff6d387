#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cloakforge/checkpoint.hpp"
#include "cloakforge/diffusion.hpp"
#include "cloakforge/image_io.hpp"
#include "cloakforge/optim.hpp"
#include "cloakforge/prompt.hpp"

namespace cloakforge {

struct FinetuneConfig {
  int steps = 400;
  // Adam at 3e-4: plain SGD at desk-scale learning rates barely moves the
  // model in 400 steps, so the adversary would learn nothing either way.
  double learning_rate = 3e-4;
  int batch_size = 2;
  double lambda_prior = 1.0;
  int prior_count = 8;
  PromptSpec instance_prompt = cloakforge::instance_prompt();
  PromptSpec prior_prompt = cloakforge::prior_prompt();
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  bool train_text_encoder = true;

  void validate() const {
    if (steps < 0) throw std::invalid_argument("finetune steps must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("finetune batch_size must be >= 1");
    if (lambda_prior < 0) throw std::invalid_argument("lambda_prior must be >= 0");
    if (prior_count < 0) throw std::invalid_argument("prior_count must be >= 0");
    if (!(learning_rate > 0)) throw std::invalid_argument("learning_rate must be > 0");
    instance_prompt.validate();
    prior_prompt.validate();
  }
};

inline void to_json(nlohmann::json& j, const PromptSpec& p) {
  j = nlohmann::json{{"template", p.templ}, {"identifier", p.identifier}, {"class", p.class_noun}};
}

inline void from_json(const nlohmann::json& j, PromptSpec& p) {
  PromptSpec d;
  p.templ = j.value("template", d.templ);
  p.identifier = j.value("identifier", d.identifier);
  p.class_noun = j.value("class", d.class_noun);
  p.validate();
}

inline void to_json(nlohmann::json& j, const FinetuneConfig& c) {
  j = nlohmann::json{{"steps", c.steps},
                     {"learning_rate", c.learning_rate},
                     {"batch_size", c.batch_size},
                     {"lambda_prior", c.lambda_prior},
                     {"prior_count", c.prior_count},
                     {"instance_prompt", c.instance_prompt},
                     {"prior_prompt", c.prior_prompt},
                     {"seed", c.seed},
                     {"optimizer", to_string(c.optimizer)},
                     {"train_text_encoder", c.train_text_encoder}};
}

inline void from_json(const nlohmann::json& j, FinetuneConfig& c) {
  FinetuneConfig d;
  c.steps = j.value("steps", d.steps);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lambda_prior = j.value("lambda_prior", d.lambda_prior);
  c.prior_count = j.value("prior_count", d.prior_count);
  c.instance_prompt = j.value("instance_prompt", d.instance_prompt);
  c.prior_prompt = j.value("prior_prompt", d.prior_prompt);
  c.seed = j.value("seed", d.seed);
  c.optimizer = optimizer_from_string(j.value("optimizer", to_string(d.optimizer)));
  c.train_text_encoder = j.value("train_text_encoder", d.train_text_encoder);
  c.validate();
}

template <class S>
std::uint64_t parameter_digest(const DenoiserCheckpoint<S>& ck) {
  std::uint64_t h = stable_hash(ck.name);
  for (const auto& t : ck.parameters) {
    std::string_view bytes(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(S));
    h = splitmix64(h ^ stable_hash(bytes));
  }
  for (const auto& v : ck.vocabulary) h = splitmix64(h ^ stable_hash(v));
  return h;
}

struct PriorSet {
  std::vector<Image> images;
  bool from_cache = false;
};

// Class-prior images sampled from the original (pre-finetune) weights. With a
// cache directory, sets are stored losslessly keyed by checkpoint, prompt and
// seed; a cached set of n images is a prefix of any larger set.
inline PriorSet generate_prior_set(const Checkpoint& theta_ori, const PromptSpec& prior, int n, std::uint64_t seed,
                                   const NoiseSchedule& schedule,
                                   const std::optional<std::filesystem::path>& cache_dir = std::nullopt) {
  if (n < 0) throw std::invalid_argument("prior set size must be >= 0");
  PriorSet out;
  if (n == 0) return out;
  std::filesystem::path file;
  if (cache_dir) {
    std::ostringstream key;
    key << std::hex << std::setw(16) << std::setfill('0')
        << splitmix64(parameter_digest(theta_ori) ^ stable_hash(prior.render()) ^ derive_seed(seed, schedule.T));
    file = *cache_dir / ("prior_" + key.str() + ".npy");
    if (std::filesystem::exists(file)) {
      auto batch = read_npy<float>(file);
      if (batch.shape().n >= n) {
        auto all = unstack(batch);
        out.images.assign(all.begin(), all.begin() + n);
        out.from_cache = true;
        return out;
      }
    }
  }
  auto model = restore(theta_ori);
  auto cond = model.embed_prompt(prior);
  out.images = ancestral_sample<float>(model, cond, schedule, seed, n, model.image_shape());
  if (cache_dir) write_npy(file, stack(out.images));
  return out;
}

struct LossRecord {
  int step = 0;
  double instance = 0;
  double prior = 0;
  double total = 0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class S>
struct DreamBoothTerms {
  ad::Var<S> total;
  double instance = 0;
  double prior = 0;
};

// Instance term plus lambda times the prior term, each evaluated with the
// current model at its own (t, eps) draw.
template <class S>
DreamBoothTerms<S> dreambooth_loss_at(const ConditionalUNet<S>& model, const ad::Var<S>& x0, const ad::Var<S>& cond,
                                      const NoiseDraw<S>& draw, const Tensor<S>* prior_batch,
                                      const ad::Var<S>& prior_cond, const NoiseDraw<S>* prior_draw, double lambda,
                                      const NoiseSchedule& schedule) {
  DreamBoothTerms<S> terms;
  auto inst = loss_cond<S>(model, x0, cond, draw.timesteps, draw.eps, schedule);
  terms.instance = static_cast<double>(inst.item());
  terms.total = inst;
  if (lambda > 0) {
    if (!prior_batch || prior_batch->empty()) throw std::invalid_argument("prior term needs a non-empty prior set");
    auto pr = loss_cond<S>(model, ad::Var<S>::constant(*prior_batch), prior_cond, prior_draw->timesteps,
                           prior_draw->eps, schedule);
    terms.prior = static_cast<double>(pr.item());
    terms.total = ad::add(inst, ad::scale(pr, static_cast<S>(lambda)));
  }
  return terms;
}

// Draws (t, eps) for the instance batch, then prior images (uniform with
// replacement, one per instance) and their own (t', eps').
template <class S>
DreamBoothTerms<S> dreambooth_loss(const ConditionalUNet<S>& model, const std::vector<Tensor<S>>& prior_images,
                                   const ad::Var<S>& x0, const ad::Var<S>& cond, const ad::Var<S>& prior_cond,
                                   double lambda, const NoiseSchedule& schedule, Rng& rng) {
  if (lambda > 0 && prior_images.empty()) throw std::invalid_argument("prior term needs a non-empty prior set");
  auto draw = draw_noise<S>(rng, x0.shape(), schedule);
  if (lambda <= 0) return dreambooth_loss_at<S>(model, x0, cond, draw, nullptr, prior_cond, nullptr, 0.0, schedule);
  std::vector<Tensor<S>> picked;
  for (int i = 0; i < x0.shape().n; ++i) {
    picked.push_back(prior_images[rng.uniform_int(0, static_cast<int>(prior_images.size()) - 1)]);
  }
  auto prior_batch = stack(picked);
  auto prior_draw = draw_noise<S>(rng, prior_batch.shape(), schedule);
  return dreambooth_loss_at<S>(model, x0, cond, draw, &prior_batch, prior_cond, &prior_draw, lambda, schedule);
}

// Runs DreamBooth gradient steps on a model it does not own. Optimizer state
// and the minibatch stream persist across calls to run().
class DreamBoothTrainer {
 public:
  DreamBoothTrainer(Denoiser& model, const FinetuneConfig& config, const NoiseSchedule& schedule,
                    std::vector<Image> prior_images, std::uint64_t seed)
      : model_(model),
        config_(config),
        schedule_(schedule),
        priors_(std::move(prior_images)),
        rng_(seed),
        optimizer_(config.optimizer, config.learning_rate) {
    config_.validate();
    if (config_.lambda_prior > 0 && priors_.empty() && config_.steps > 0) {
      throw std::invalid_argument("lambda_prior > 0 requires a prior image set");
    }
  }

  std::vector<LossRecord> run(const std::vector<Image>& instances, int steps) {
    if (instances.empty()) throw std::invalid_argument("finetune needs at least one instance image");
    std::vector<LossRecord> log;
    model_.set_text_encoder_trainable(config_.train_text_encoder);
    for (int s = 0; s < steps; ++s) {
      auto cond = model_.embed_prompt(config_.instance_prompt);
      auto prior_cond = model_.embed_prompt(config_.prior_prompt);
      auto batch = stack(pick_instances(instances));
      auto terms = dreambooth_loss<float>(model_, priors_, ad::Var<float>::constant(batch), cond, prior_cond,
                                          config_.lambda_prior, schedule_, rng_);
      const double total = static_cast<double>(terms.total.item());
      if (!std::isfinite(total)) {
        throw TrainingDiverged("non-finite DreamBooth loss at step " + std::to_string(step_) +
                               " (instance=" + std::to_string(terms.instance) + ", prior=" +
                               std::to_string(terms.prior) + ")");
      }
      model_.zero_grad();
      terms.total.backward();
      optimizer_.step(model_.parameters());
      model_.zero_grad();
      log.push_back({step_++, terms.instance, terms.prior, total});
    }
    model_.set_text_encoder_trainable(true);
    return log;
  }

 private:
  std::vector<Image> pick_instances(const std::vector<Image>& instances) {
    const int n = static_cast<int>(instances.size());
    std::vector<Image> out;
    if (config_.batch_size <= n) {
      std::vector<int> idx(n);
      std::iota(idx.begin(), idx.end(), 0);
      for (int i = 0; i < config_.batch_size; ++i) {
        std::swap(idx[i], idx[rng_.uniform_int(i, n - 1)]);
        out.push_back(instances[idx[i]]);
      }
    } else {
      for (int i = 0; i < config_.batch_size; ++i) out.push_back(instances[rng_.uniform_int(0, n - 1)]);
    }
    return out;
  }

  Denoiser& model_;
  FinetuneConfig config_;
  const NoiseSchedule& schedule_;
  std::vector<Image> priors_;
  Rng rng_;
  Optimizer<float> optimizer_;
  int step_ = 0;
};

struct FinetuneResult {
  Checkpoint checkpoint;
  std::vector<LossRecord> log;
};

inline void check_instances(const std::vector<Image>& instances) {
  if (instances.empty()) throw std::invalid_argument("finetune needs at least one instance image");
  for (const auto& img : instances) {
    for (float v : img.values()) {
      if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("instance image values must lie in [0, 1]");
    }
  }
}

// theta* after config.steps DreamBooth steps from theta_start, given the prior
// set already sampled from theta_ori.
inline FinetuneResult finetune_dreambooth(const Checkpoint& theta_start, const std::vector<Image>& instances,
                                          const FinetuneConfig& config, const NoiseSchedule& schedule,
                                          const std::vector<Image>& prior_images, std::string name = "") {
  config.validate();
  check_instances(instances);
  FinetuneResult result;
  auto model = restore(theta_start);
  if (config.steps > 0) {
    DreamBoothTrainer trainer(model, config, schedule, prior_images, derive_seed(config.seed, "finetune"));
    result.log = trainer.run(instances, config.steps);
  }
  if (name.empty()) name = theta_start.name + "+dreambooth";
  if (config.steps == 0) {
    result.checkpoint = theta_start;
    result.checkpoint.name = name;
  } else {
    result.checkpoint = snapshot(model, name, {config.seed, theta_start.meta.steps + config.steps, theta_start.name});
  }
  return result;
}

inline FinetuneResult finetune_dreambooth(const Checkpoint& theta_start, const std::vector<Image>& instances,
                                          const FinetuneConfig& config, const NoiseSchedule& schedule,
                                          const std::optional<std::filesystem::path>& prior_cache = std::nullopt) {
  auto priors = config.lambda_prior > 0 && config.steps > 0
                    ? generate_prior_set(theta_start, config.prior_prompt, config.prior_count,
                                         derive_seed(config.seed, "prior"), schedule, prior_cache)
                          .images
                    : std::vector<Image>{};
  return finetune_dreambooth(theta_start, instances, config, schedule, priors);
}

inline void write_loss_log(const std::filesystem::path& path, const std::vector<LossRecord>& log) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write loss log " + path.string());
  out << "step,instance_loss,prior_loss,total_loss\n";
  out << std::setprecision(9);
  for (const auto& r : log) out << r.step << ',' << r.instance << ',' << r.prior << ',' << r.total << '\n';
}

}  // namespace cloakforge
