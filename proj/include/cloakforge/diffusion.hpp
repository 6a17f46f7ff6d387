#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cloakforge/autodiff.hpp"
#include "cloakforge/rng.hpp"
#include "cloakforge/tensor.hpp"

namespace cloakforge {

// Discrete DDPM schedule. Timesteps are 1-indexed: t in {1..T}; index t-1
// into the vectors below.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  double beta(int t) const { return betas.at(t - 1); }
  double alpha(int t) const { return alphas.at(t - 1); }
  double alpha_bar(int t) const { return alpha_bars.at(t - 1); }

  void check_timestep(int t) const {
    if (t < 1 || t > T) {
      throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
    }
  }
};

inline NoiseSchedule schedule_from_betas(std::vector<double> betas) {
  if (betas.empty()) throw std::invalid_argument("noise schedule needs T >= 1");
  NoiseSchedule s;
  s.T = static_cast<int>(betas.size());
  double running = 1.0;
  for (double b : betas) {
    if (!(b > 0.0 && b < 1.0)) throw std::invalid_argument("beta outside (0, 1): " + std::to_string(b));
    s.alphas.push_back(1.0 - b);
    running *= 1.0 - b;
    s.alpha_bars.push_back(running);
  }
  s.betas = std::move(betas);
  return s;
}

inline NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw std::invalid_argument("noise schedule needs T >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("linear schedule requires 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(T);
  for (int i = 0; i < T; ++i) {
    betas[i] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (T - 1);
  }
  return schedule_from_betas(std::move(betas));
}

// Linear betas rescaled so that a T-step chain reaches the same terminal
// signal level as the 1000-step (1e-4, 0.02) chain.
inline NoiseSchedule make_default_schedule(int T = 250) {
  const double k = 1000.0 / T;
  return make_linear_schedule(T, 1e-4 * k, std::min(0.02 * k, 0.999));
}

template <class S>
Tensor<S> forward_noise(const Tensor<S>& x0, int t, const Tensor<S>& eps, const NoiseSchedule& schedule) {
  require_same_shape(x0.shape(), eps.shape(), "forward_noise");
  schedule.check_timestep(t);
  const S a = static_cast<S>(std::sqrt(schedule.alpha_bar(t)));
  const S b = static_cast<S>(std::sqrt(1.0 - schedule.alpha_bar(t)));
  Tensor<S> out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

// Differentiable, batched form: sample n is noised at timesteps[n].
template <class S>
ad::Var<S> forward_noise(const ad::Var<S>& x0, std::span<const int> timesteps, const Tensor<S>& eps,
                         const NoiseSchedule& schedule) {
  require_same_shape(x0.shape(), eps.shape(), "forward_noise");
  if (static_cast<int>(timesteps.size()) != x0.shape().n) {
    throw ShapeError("forward_noise: one timestep per sample required");
  }
  std::vector<S> a, b;
  for (int t : timesteps) {
    schedule.check_timestep(t);
    a.push_back(static_cast<S>(std::sqrt(schedule.alpha_bar(t))));
    b.push_back(static_cast<S>(std::sqrt(1.0 - schedule.alpha_bar(t))));
  }
  return ad::affine_per_sample<S>(x0, a, b, eps);
}

// eps_theta(x_t, t, c): batch of noisy images, one timestep per sample, and a
// conditioning row that is either shared (n == 1) or per-sample.
template <class D, class S>
concept ConditionalDenoiser =
    std::invocable<const D&, const ad::Var<S>&, std::span<const int>, const ad::Var<S>&> &&
    std::convertible_to<std::invoke_result_t<const D&, const ad::Var<S>&, std::span<const int>, const ad::Var<S>&>,
                        ad::Var<S>>;

template <class D, class S>
concept UnconditionalDenoiser =
    std::invocable<const D&, const ad::Var<S>&, std::span<const int>> &&
    std::convertible_to<std::invoke_result_t<const D&, const ad::Var<S>&, std::span<const int>>, ad::Var<S>>;

template <class S, class D>
  requires UnconditionalDenoiser<D, S>
ad::Var<S> loss_uncond(const D& denoiser, const ad::Var<S>& x0, std::span<const int> timesteps,
                       const Tensor<S>& eps, const NoiseSchedule& schedule) {
  auto xt = forward_noise(x0, timesteps, eps, schedule);
  auto pred = denoiser(xt, timesteps);
  require_same_shape(pred.shape(), eps.shape(), "loss_uncond");
  return ad::mse(pred, ad::Var<S>::constant(eps));
}

// Mean squared error between the injected noise and the prediction; gradients
// reach both the denoiser parameters and x0.
template <class S, class D>
  requires ConditionalDenoiser<D, S>
ad::Var<S> loss_cond(const D& denoiser, const ad::Var<S>& x0, const ad::Var<S>& cond, std::span<const int> timesteps,
                     const Tensor<S>& eps, const NoiseSchedule& schedule) {
  auto xt = forward_noise(x0, timesteps, eps, schedule);
  auto pred = denoiser(xt, timesteps, cond);
  require_same_shape(pred.shape(), eps.shape(), "loss_cond");
  return ad::mse(pred, ad::Var<S>::constant(eps));
}

template <class S, class D>
  requires ConditionalDenoiser<D, S>
double loss_cond_value(const D& denoiser, const Tensor<S>& x0, const ad::Var<S>& cond, int t, const Tensor<S>& eps,
                       const NoiseSchedule& schedule) {
  ad::NoGradGuard guard;
  std::vector<int> ts(x0.shape().n, t);
  return static_cast<double>(loss_cond<S>(denoiser, ad::Var<S>::constant(x0), cond, ts, eps, schedule).item());
}

// One (t, eps) draw per sample, t uniform on {1..T}.
template <class S>
struct NoiseDraw {
  std::vector<int> timesteps;
  Tensor<S> eps;
};

template <class S>
NoiseDraw<S> draw_noise(Rng& rng, Shape shape, const NoiseSchedule& schedule) {
  NoiseDraw<S> d;
  for (int n = 0; n < shape.n; ++n) d.timesteps.push_back(rng.uniform_int(1, schedule.T));
  d.eps = rng.normal_tensor<S>(shape);
  return d;
}

struct SampleOptions {
  int batch = 32;
};

// Plain ancestral DDPM sampling from pure Gaussian noise with posterior
// variance beta_t, clipped to [0, 1] at the end. Image i draws from its own
// stream so results do not depend on batching.
template <class S, class D>
  requires ConditionalDenoiser<D, S>
std::vector<Tensor<S>> ancestral_sample(const D& denoiser, const ad::Var<S>& cond, const NoiseSchedule& schedule,
                                        std::uint64_t seed, int count, Shape image_shape,
                                        SampleOptions opts = {}) {
  if (count < 0) throw std::invalid_argument("ancestral_sample: negative count");
  if (opts.batch < 1) throw std::invalid_argument("ancestral_sample: batch must be >= 1");
  ad::NoGradGuard guard;
  std::vector<Tensor<S>> out;
  out.reserve(count);
  const Shape one{1, image_shape.c, image_shape.h, image_shape.w};
  const std::size_t per = one.size();
  for (int start = 0; start < count; start += opts.batch) {
    const int nb = std::min(opts.batch, count - start);
    std::vector<Rng> streams;
    Tensor<S> x(Shape{nb, one.c, one.h, one.w});
    for (int i = 0; i < nb; ++i) {
      streams.emplace_back(derive_seed(seed, static_cast<std::uint64_t>(start + i)));
      auto z = streams.back().normal_tensor<S>(one);
      std::copy(z.data(), z.data() + per, x.data() + i * per);
    }
    std::vector<int> ts(nb);
    for (int t = schedule.T; t >= 1; --t) {
      std::fill(ts.begin(), ts.end(), t);
      auto eps_hat = denoiser(ad::Var<S>::constant(x), std::span<const int>(ts), cond).value();
      const S coef = static_cast<S>(schedule.beta(t) / std::sqrt(1.0 - schedule.alpha_bar(t)));
      const S inv_sqrt_alpha = static_cast<S>(1.0 / std::sqrt(schedule.alpha(t)));
      const S sigma = static_cast<S>(std::sqrt(schedule.beta(t)));
      for (int i = 0; i < nb; ++i) {
        for (std::size_t k = 0; k < per; ++k) {
          const std::size_t idx = i * per + k;
          S v = inv_sqrt_alpha * (x[idx] - coef * eps_hat[idx]);
          if (t > 1) v += sigma * static_cast<S>(streams[i].normal());
          x[idx] = v;
        }
      }
    }
    for (auto& img : unstack(x)) out.push_back(clamp01(std::move(img)));
  }
  return out;
}

}  // namespace cloakforge
