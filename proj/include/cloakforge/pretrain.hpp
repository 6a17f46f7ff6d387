#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "cloakforge/checkpoint.hpp"
#include "cloakforge/diffusion.hpp"
#include "cloakforge/embedder.hpp"
#include "cloakforge/optim.hpp"

namespace cloakforge {

// Base-model training on a pool of background identities. Each sample is
// captioned with its identity token, or with the bare class prompt with
// probability class_prompt_prob; the template alternates between the photo
// and dslr forms so both are in-vocabulary before personalization.
struct PretrainConfig {
  Architecture architecture;
  int steps = 3000;
  int batch_size = 32;
  double learning_rate = 5e-4;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double class_prompt_prob = 0.5;
  double dslr_prob = 0.3;
  // Exponential moving average of the weights; the checkpoint holds the
  // average. 0 disables it.
  double ema_decay = 0.999;
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = nlohmann::json{{"architecture", c.architecture},   {"steps", c.steps},
                     {"batch_size", c.batch_size},       {"learning_rate", c.learning_rate},
                     {"optimizer", to_string(c.optimizer)}, {"class_prompt_prob", c.class_prompt_prob},
                     {"dslr_prob", c.dslr_prob},         {"ema_decay", c.ema_decay},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, PretrainConfig& c) {
  PretrainConfig d;
  c.architecture = j.value("architecture", d.architecture);
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.optimizer = optimizer_from_string(j.value("optimizer", to_string(d.optimizer)));
  c.class_prompt_prob = j.value("class_prompt_prob", d.class_prompt_prob);
  c.dslr_prob = j.value("dslr_prob", d.dslr_prob);
  c.ema_decay = j.value("ema_decay", d.ema_decay);
  c.seed = j.value("seed", d.seed);
}

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<double> losses;
};

inline PretrainResult pretrain_denoiser(const LabeledImages& data, const PretrainConfig& config,
                                        const NoiseSchedule& schedule, std::string name) {
  if (data.names.empty() || data.images.size() != data.names.size()) {
    throw std::invalid_argument("pretraining needs at least one labeled identity");
  }
  if (config.steps < 0 || config.batch_size < 1) throw std::invalid_argument("invalid pretraining config");
  if (!(config.ema_decay >= 0 && config.ema_decay < 1)) throw std::invalid_argument("ema_decay must lie in [0, 1)");
  Denoiser model(config.architecture, derive_seed(config.seed, "init"));
  Optimizer<float> opt(config.optimizer, config.learning_rate);
  Rng rng(derive_seed(config.seed, "pretrain"));
  const int k = static_cast<int>(data.names.size());
  PretrainResult result;
  std::vector<Tensor<float>> ema;
  for (int step = 0; step < config.steps; ++step) {
    std::vector<Image> batch;
    std::vector<PromptSpec> prompts;
    for (int i = 0; i < config.batch_size; ++i) {
      const int id = rng.uniform_int(0, k - 1);
      const auto& imgs = data.images[id];
      batch.push_back(imgs[rng.uniform_int(0, static_cast<int>(imgs.size()) - 1)]);
      const bool bare = rng.uniform() < config.class_prompt_prob;
      const bool dslr = rng.uniform() < config.dslr_prob;
      const std::string token = bare ? "" : data.names[id];
      prompts.push_back(dslr ? dslr_prompt(token) : instance_prompt(token));
    }
    auto x0 = stack(batch);
    auto cond = model.embed_prompts(prompts);
    auto draw = draw_noise<float>(rng, x0.shape(), schedule);
    auto loss = loss_cond<float>(model, ad::Var<float>::constant(x0), cond, draw.timesteps, draw.eps, schedule);
    const double value = loss.item();
    if (!std::isfinite(value)) throw std::runtime_error("pretraining diverged at step " + std::to_string(step));
    model.zero_grad();
    loss.backward();
    opt.step(model.parameters());
    model.zero_grad();
    result.losses.push_back(value);
    if (config.ema_decay > 0) {
      // Warm-up keeps early steps from being dominated by the initialization.
      const double d = std::min(config.ema_decay, (1.0 + step) / (10.0 + step));
      const auto& params = model.parameters();
      ema.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& v = params[i].value();
        if (ema[i].shape() != v.shape()) {
          // New token rows start from their current value.
          Tensor<float> grown = v;
          std::copy(ema[i].data(), ema[i].data() + std::min(ema[i].size(), v.size()), grown.data());
          ema[i] = std::move(grown);
        }
        for (std::size_t k = 0; k < v.size(); ++k) ema[i][k] = static_cast<float>(d * ema[i][k] + (1 - d) * v[k]);
      }
    }
  }
  result.checkpoint = snapshot(model, std::move(name), {config.seed, config.steps, ""});
  if (config.ema_decay > 0 && config.steps > 0) result.checkpoint.parameters = std::move(ema);
  return result;
}

}  // namespace cloakforge
