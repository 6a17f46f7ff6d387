#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cloakforge/dreambooth.hpp"

namespace cloakforge {

struct AttackConfig {
  double eta = 0.05;
  double alpha = 0.005;
  int pgd_iters = 100;
  bool targeted = false;
  std::optional<Image> target_image;
  PromptSpec surrogate_prompt = instance_prompt();
  std::uint64_t seed = 0;
  // Draw one timestep per image for the whole attack instead of one per step.
  bool fixed_t = false;

  void validate() const {
    if (!(eta >= 0.0 && eta <= 1.0)) throw std::invalid_argument("eta must lie in [0, 1]");
    if (pgd_iters < 0) throw std::invalid_argument("pgd_iters must be >= 0");
    if (alpha < 0.0 || (pgd_iters > 0 && !(alpha > 0.0))) throw std::invalid_argument("alpha must be > 0");
    if (targeted && !target_image) throw std::invalid_argument("targeted attack needs a target image");
    surrogate_prompt.validate();
  }
};

struct AsplConfig {
  int rounds = 10;
  int clone_steps = 5;
  int pgd_steps = 5;
  int surrogate_steps = 5;

  void validate() const {
    if (rounds < 0 || clone_steps < 0 || pgd_steps < 0 || surrogate_steps < 0) {
      throw std::invalid_argument("ASPL counts must be >= 0");
    }
  }
};

inline void to_json(nlohmann::json& j, const AttackConfig& c) {
  j = nlohmann::json{{"eta", c.eta},
                     {"alpha", c.alpha},
                     {"pgd_iters", c.pgd_iters},
                     {"targeted", c.targeted},
                     {"surrogate_prompt", c.surrogate_prompt},
                     {"seed", c.seed},
                     {"fixed_t", c.fixed_t}};
}

// The target image itself is not part of the JSON form; callers attach it.
inline void from_json(const nlohmann::json& j, AttackConfig& c) {
  AttackConfig d;
  c.eta = j.value("eta", d.eta);
  c.alpha = j.value("alpha", d.alpha);
  c.pgd_iters = j.value("pgd_iters", d.pgd_iters);
  c.targeted = j.value("targeted", d.targeted);
  c.surrogate_prompt = j.value("surrogate_prompt", d.surrogate_prompt);
  c.seed = j.value("seed", d.seed);
  c.fixed_t = j.value("fixed_t", d.fixed_t);
}

inline void to_json(nlohmann::json& j, const AsplConfig& c) {
  j = nlohmann::json{{"rounds", c.rounds},
                     {"clone_steps", c.clone_steps},
                     {"pgd_steps", c.pgd_steps},
                     {"surrogate_steps", c.surrogate_steps}};
}

inline void from_json(const nlohmann::json& j, AsplConfig& c) {
  AsplConfig d;
  c.rounds = j.value("rounds", d.rounds);
  c.clone_steps = j.value("clone_steps", d.clone_steps);
  c.pgd_steps = j.value("pgd_steps", d.pgd_steps);
  c.surrogate_steps = j.value("surrogate_steps", d.surrogate_steps);
  c.validate();
}

// Clamp into the eta-ball around x_orig, then into [0, 1]. For float the ball
// edges are nudged inward when rounding would put them outside eta.
template <class S>
Tensor<S> project_linf(const Tensor<S>& x_adv, const Tensor<S>& x_orig, double eta) {
  require_same_shape(x_adv.shape(), x_orig.shape(), "project_linf");
  Tensor<S> out = Tensor<S>::uninitialized(x_adv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const S x = x_orig[i];
    S lo = static_cast<S>(x - eta), hi = static_cast<S>(x + eta);
    if (static_cast<double>(x) - static_cast<double>(lo) > eta) lo = std::nextafter(lo, x);
    if (static_cast<double>(hi) - static_cast<double>(x) > eta) hi = std::nextafter(hi, x);
    out[i] = std::clamp(std::clamp(x_adv[i], lo, hi), S(0), S(1));
  }
  return out;
}

// eps* = (x_adv_t - sqrt(abar_t) x_tar) / sqrt(1 - abar_t): the noise whose
// removal would land on the target.
template <class S>
Tensor<S> targeted_noise(const Tensor<S>& x_adv_t, const Tensor<S>& x_tar, int t, const NoiseSchedule& schedule) {
  require_same_shape(x_adv_t.shape(), x_tar.shape(), "targeted_noise");
  schedule.check_timestep(t);
  const double a = std::sqrt(schedule.alpha_bar(t)), b = std::sqrt(1.0 - schedule.alpha_bar(t));
  Tensor<S> out = Tensor<S>::uninitialized(x_tar.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<S>((x_adv_t[i] - a * x_tar[i]) / b);
  return out;
}

class AttackDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Signed-gradient ascent (descent when `descend`) on a batch under the
// eta-ball, starting from x_start. grad_fn returns the objective gradient with
// respect to the current batch and the objective value.
template <class S>
using ObjectiveFn = std::function<double(const Tensor<S>& x, int iter, Tensor<S>& grad)>;

template <class S>
Tensor<S> pgd_linf(const Tensor<S>& x_orig, const Tensor<S>& x_start, double eta, double alpha, int iters,
                   bool descend, const ObjectiveFn<S>& objective, std::vector<double>* trace = nullptr) {
  require_same_shape(x_orig.shape(), x_start.shape(), "pgd_linf");
  Tensor<S> x = project_linf(x_start, x_orig, eta);
  if (alpha == 0.0 || eta == 0.0) iters = 0;
  Tensor<S> grad;
  for (int k = 0; k < iters; ++k) {
    const double value = objective(x, k, grad);
    require_same_shape(grad.shape(), x.shape(), "pgd_linf gradient");
    if (!std::isfinite(value) || !all_finite(grad)) {
      throw AttackDiverged("non-finite PGD objective or gradient at iteration " + std::to_string(k));
    }
    if (trace) trace->push_back(value);
    const S step = static_cast<S>(descend ? -alpha : alpha);
    Tensor<S> moved = Tensor<S>::uninitialized(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const S g = grad[i];
      moved[i] = x[i] + (g > 0 ? step : (g < 0 ? -step : S(0)));
    }
    x = project_linf(moved, x_orig, eta);
  }
  return x;
}

// Per-image random streams for PGD; state survives across calls so that
// alternating algorithms keep drawing fresh (t, eps).
struct PgdStreams {
  std::vector<Rng> rngs;
  std::vector<int> fixed_timesteps;

  PgdStreams(std::uint64_t seed, int count, bool fixed_t, const NoiseSchedule& schedule) {
    for (int i = 0; i < count; ++i) rngs.emplace_back(derive_seed(seed, static_cast<std::uint64_t>(i)));
    if (fixed_t) {
      for (auto& r : rngs) fixed_timesteps.push_back(r.uniform_int(1, schedule.T));
    }
  }

  template <class S>
  NoiseDraw<S> draw(Shape batch, const NoiseSchedule& schedule) {
    NoiseDraw<S> d;
    d.eps = Tensor<S>::uninitialized(batch);
    const Shape one{1, batch.c, batch.h, batch.w};
    const std::size_t per = one.size();
    for (int n = 0; n < batch.n; ++n) {
      auto& r = rngs.at(n);
      d.timesteps.push_back(fixed_timesteps.empty() ? r.uniform_int(1, schedule.T) : fixed_timesteps[n]);
      auto e = r.normal_tensor<S>(one);
      std::copy(e.data(), e.data() + per, d.eps.data() + n * per);
    }
    return d;
  }
};

// Untargeted: L_cond at a fresh (t, eps). Targeted: ||eps_hat - eps*||^2 with
// eps* built from the noised adversarial image and the target; eps* depends on
// x, and the gradient flows through it.
template <class S, class D>
  requires ConditionalDenoiser<D, S>
ad::Var<S> attack_objective(const D& denoiser, const ad::Var<S>& x, const ad::Var<S>& cond, const NoiseDraw<S>& draw,
                            const Tensor<S>* target_batch, const NoiseSchedule& schedule) {
  if (!target_batch) return loss_cond<S>(denoiser, x, cond, draw.timesteps, draw.eps, schedule);
  auto xt = forward_noise(x, draw.timesteps, draw.eps, schedule);
  auto pred = denoiser(xt, draw.timesteps, cond);
  std::vector<S> a, b;
  for (int t : draw.timesteps) {
    const double ab = schedule.alpha_bar(t);
    a.push_back(static_cast<S>(1.0 / std::sqrt(1.0 - ab)));
    b.push_back(static_cast<S>(-std::sqrt(ab) / std::sqrt(1.0 - ab)));
  }
  auto eps_star = ad::affine_per_sample<S>(xt, a, b, *target_batch);
  return ad::mse(pred, eps_star);
}

template <class S>
Tensor<S> repeat_batch(const Tensor<S>& one, int n) {
  std::vector<Tensor<S>> items(n, one);
  return stack(items);
}

// PGD against a frozen denoiser on a batch of protected images.
template <class S, class D>
  requires ConditionalDenoiser<D, S>
Tensor<S> pgd_attack(const D& denoiser, const Tensor<S>& x_orig, const Tensor<S>& x_start, const ad::Var<S>& cond,
                     const AttackConfig& config, int iters, const NoiseSchedule& schedule, PgdStreams& streams,
                     std::vector<double>* trace = nullptr) {
  config.validate();
  std::optional<Tensor<S>> target;
  if (config.targeted) {
    const auto& t = *config.target_image;
    Tensor<S> ts(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) ts[i] = static_cast<S>(t[i]);
    target = repeat_batch(ts, x_orig.shape().n);
    require_same_shape(target->shape(), x_orig.shape(), "target image");
  }
  ObjectiveFn<S> objective = [&](const Tensor<S>& x, int, Tensor<S>& grad) {
    auto draw = streams.draw<S>(x.shape(), schedule);
    auto xv = ad::Var<S>::leaf(x);
    auto loss = attack_objective<S>(denoiser, xv, cond, draw, target ? &*target : nullptr, schedule);
    loss.backward();
    grad = xv.grad();
    if (grad.empty()) grad = Tensor<S>(x.shape());
    return static_cast<double>(loss.item());
  };
  return pgd_linf<S>(x_orig, x_start, config.eta, config.alpha, iters, config.targeted, objective, trace);
}

// Copy whose parameters take no gradient, so PGD backpropagates to the input
// only.
template <class S>
ConditionalUNet<S> frozen_copy(const ConditionalUNet<S>& model) {
  ConditionalUNet<S> m(model);
  for (auto& p : m.parameters()) p.set_requires_grad(false);
  return m;
}

enum class Algorithm { kFsmg, kAspl, kTFsmg, kTAspl, kEAspl };

inline std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::kFsmg: return "FSMG";
    case Algorithm::kAspl: return "ASPL";
    case Algorithm::kTFsmg: return "T-FSMG";
    case Algorithm::kTAspl: return "T-ASPL";
    case Algorithm::kEAspl: return "E-ASPL";
  }
  return "?";
}

inline Algorithm algorithm_from_string(const std::string& s) {
  for (auto a : {Algorithm::kFsmg, Algorithm::kAspl, Algorithm::kTFsmg, Algorithm::kTAspl, Algorithm::kEAspl}) {
    if (to_string(a) == s) return a;
  }
  throw std::invalid_argument("unknown defense algorithm '" + s + "'");
}

inline bool is_targeted(Algorithm a) { return a == Algorithm::kTFsmg || a == Algorithm::kTAspl; }

struct PerturbationSet {
  std::vector<Image> original;
  std::vector<Image> perturbed;
  double eta = 0;
  std::string algorithm;
  nlohmann::json provenance;
  nlohmann::json trace = nlohmann::json::array();

  std::vector<Image> deltas() const {
    std::vector<Image> out;
    for (std::size_t i = 0; i < perturbed.size(); ++i) {
      Image d = Tensor<float>::uninitialized(perturbed[i].shape());
      for (std::size_t k = 0; k < d.size(); ++k) d[k] = perturbed[i][k] - original[i][k];
      out.push_back(std::move(d));
    }
    return out;
  }

  // Largest |perturbed - original|, computed in double.
  double max_abs_delta() const {
    double m = 0;
    for (std::size_t i = 0; i < perturbed.size(); ++i)
      for (std::size_t k = 0; k < perturbed[i].size(); ++k)
        m = std::max(m, std::abs(static_cast<double>(perturbed[i][k]) - static_cast<double>(original[i][k])));
    return m;
  }
};

struct DefenseOptions {
  // Where prior sets are cached; none disables caching.
  std::optional<std::filesystem::path> prior_cache;
  // For ensembles: keep inactive lineages on disk instead of in memory.
  std::optional<std::filesystem::path> spill_dir;
};

namespace detail {

inline void check_sets(const std::vector<Image>& x_a, const std::vector<Image>& x_db) {
  if (x_a.empty()) throw std::invalid_argument("defense needs a non-empty clean reference set");
  if (x_db.empty()) throw std::invalid_argument("defense needs a non-empty protected set");
  check_instances(x_a);
  check_instances(x_db);
}

inline std::vector<Image> priors_for(const Checkpoint& ck, const FinetuneConfig& ft, const NoiseSchedule& schedule,
                                     const DefenseOptions& opts) {
  if (ft.lambda_prior <= 0) return {};
  return generate_prior_set(ck, ft.prior_prompt, ft.prior_count, derive_seed(ft.seed, "prior"), schedule,
                            opts.prior_cache)
      .images;
}

inline double mean_total(const std::vector<LossRecord>& log) {
  if (log.empty()) return 0.0;
  double s = 0;
  for (const auto& r : log) s += r.total;
  return s / static_cast<double>(log.size());
}

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline nlohmann::json provenance_of(Algorithm algo, const std::vector<Checkpoint>& surrogates,
                                    const AttackConfig& attack, const FinetuneConfig& ft,
                                    const std::optional<AsplConfig>& loop) {
  nlohmann::json names = nlohmann::json::array();
  for (const auto& ck : surrogates) names.push_back(ck.name);
  nlohmann::json p{{"algorithm", to_string(algo)}, {"surrogates", names}, {"attack", attack}, {"finetune", ft}};
  if (loop) p["aspl"] = *loop;
  return p;
}

inline PerturbationSet make_set(const std::vector<Image>& x_db, const Image& batch, double eta, Algorithm algo,
                                nlohmann::json provenance, nlohmann::json trace) {
  PerturbationSet out;
  out.original = x_db;
  out.perturbed = unstack(batch);
  out.eta = eta;
  out.algorithm = to_string(algo);
  out.provenance = std::move(provenance);
  out.trace = std::move(trace);
  return out;
}

}  // namespace detail

// FSMG and T-FSMG: finetune theta_clean on the clean reference set, then run
// the full PGD budget against it.
inline PerturbationSet fsmg_defend(const Checkpoint& theta_pretrained, const std::vector<Image>& x_a_clean,
                                   const std::vector<Image>& x_db, const AttackConfig& attack,
                                   const FinetuneConfig& finetune, const NoiseSchedule& schedule,
                                   const DefenseOptions& opts = {}) {
  attack.validate();
  finetune.validate();
  detail::check_sets(x_a_clean, x_db);
  const Algorithm algo = attack.targeted ? Algorithm::kTFsmg : Algorithm::kFsmg;
  auto prov = detail::provenance_of(algo, {theta_pretrained}, attack, finetune, std::nullopt);
  const Image x0 = stack(x_db);
  if (attack.eta == 0.0 || attack.pgd_iters == 0) {
    return detail::make_set(x_db, x0, attack.eta, algo, prov, nlohmann::json::array());
  }
  auto priors = detail::priors_for(theta_pretrained, finetune, schedule, opts);
  auto clean = finetune_dreambooth(theta_pretrained, x_a_clean, finetune, schedule, priors,
                                   theta_pretrained.name + "+clean");
  auto surrogate = frozen_copy(restore(clean.checkpoint));
  auto cond = surrogate.embed_prompt(attack.surrogate_prompt);
  PgdStreams streams(derive_seed(attack.seed, "pgd"), x0.shape().n, attack.fixed_t, schedule);
  std::vector<double> objective;
  Image x = pgd_attack<float>(surrogate, x0, x0, cond, attack, attack.pgd_iters, schedule, streams, &objective);
  nlohmann::json trace = nlohmann::json::array();
  trace.push_back({{"phase", "surrogate"}, {"mean_loss", detail::mean_total(clean.log)}});
  trace.push_back({{"phase", "pgd"}, {"objective", objective}});
  return detail::make_set(x_db, x, attack.eta, algo, prov, std::move(trace));
}

// Round-robin alternating surrogate/perturbation learning over one or more
// pretrained lineages. Each round: clone the active lineage's surrogate and
// finetune the clone on clean X_A, PGD the protected set against the clone,
// then train the lineage's surrogate on the current perturbed set.
inline PerturbationSet ensemble_defend(const std::vector<Checkpoint>& theta_list,
                                       const std::vector<Image>& x_a_clean, const std::vector<Image>& x_db,
                                       const AttackConfig& attack, const FinetuneConfig& finetune,
                                       const AsplConfig& loop, const NoiseSchedule& schedule,
                                       const DefenseOptions& opts = {}, std::optional<Algorithm> label = {}) {
  if (theta_list.empty()) throw std::invalid_argument("ensemble defense needs at least one checkpoint");
  attack.validate();
  finetune.validate();
  loop.validate();
  detail::check_sets(x_a_clean, x_db);
  const Shape img = x_db.front().shape();
  for (const auto& ck : theta_list) {
    const Shape s = ck.architecture.image_shape();
    if (s.c != img.c || s.h != img.h || s.w != img.w) {
      throw std::invalid_argument("checkpoint '" + ck.name + "' does not accept " + img.str() + " images");
    }
  }
  const Algorithm algo = label ? *label
                               : (theta_list.size() > 1 ? Algorithm::kEAspl
                                                        : (attack.targeted ? Algorithm::kTAspl : Algorithm::kAspl));
  auto prov = detail::provenance_of(algo, theta_list, attack, finetune, loop);
  const Image x0 = stack(x_db);
  if (attack.eta == 0.0 || loop.rounds == 0 || loop.pgd_steps == 0) {
    return detail::make_set(x_db, x0, attack.eta, algo, prov, nlohmann::json::array());
  }

  struct Lineage {
    std::optional<Checkpoint> resident;
    std::filesystem::path spill;
    std::vector<Image> priors;
  };
  const int L = static_cast<int>(theta_list.size());
  std::vector<Lineage> lineages(L);
  for (int l = 0; l < L; ++l) {
    lineages[l].priors = detail::priors_for(theta_list[l], finetune, schedule, opts);
    if (opts.spill_dir) {
      lineages[l].spill = *opts.spill_dir / ("lineage_" + std::to_string(l) + ".ckpt");
      save_checkpoint(theta_list[l], lineages[l].spill);
    } else {
      lineages[l].resident = theta_list[l];
    }
  }

  PgdStreams streams(derive_seed(attack.seed, "pgd"), x0.shape().n, attack.fixed_t, schedule);
  Image x = x0;
  nlohmann::json trace = nlohmann::json::array();
  for (int r = 0; r < loop.rounds; ++r) {
    const int l = r % L;
    auto& lin = lineages[l];
    Checkpoint current = lin.resident ? *lin.resident : load_checkpoint<float>(lin.spill);

    Denoiser clone = restore(current);
    std::vector<LossRecord> clone_log;
    if (loop.clone_steps > 0) {
      DreamBoothTrainer trainer(clone, finetune, schedule, lin.priors,
                                derive_seed(derive_seed(finetune.seed, "clone"), static_cast<std::uint64_t>(r)));
      clone_log = trainer.run(x_a_clean, loop.clone_steps);
    }

    auto frozen = frozen_copy(clone);
    auto cond = frozen.embed_prompt(attack.surrogate_prompt);
    std::vector<double> objective;
    x = pgd_attack<float>(frozen, x0, x, cond, attack, loop.pgd_steps, schedule, streams, &objective);

    std::vector<LossRecord> surrogate_log;
    if (loop.surrogate_steps > 0) {
      Denoiser surrogate = restore(current);
      DreamBoothTrainer trainer(surrogate, finetune, schedule, lin.priors,
                                derive_seed(derive_seed(finetune.seed, "surrogate"), static_cast<std::uint64_t>(r)));
      surrogate_log = trainer.run(unstack(x), loop.surrogate_steps);
      current = snapshot(surrogate, current.name, current.meta);
    }
    if (lin.resident) {
      lin.resident = std::move(current);
    } else {
      save_checkpoint(current, lin.spill);
    }
    trace.push_back({{"round", r},
                     {"lineage", theta_list[l].name},
                     {"clone_loss", detail::mean_total(clone_log)},
                     {"pgd_objective", detail::mean_of(objective)},
                     {"surrogate_loss", detail::mean_total(surrogate_log)}});
  }
  return detail::make_set(x_db, x, attack.eta, algo, prov, std::move(trace));
}

inline PerturbationSet aspl_defend(const Checkpoint& theta_pretrained, const std::vector<Image>& x_a_clean,
                                   const std::vector<Image>& x_db, const AttackConfig& attack,
                                   const FinetuneConfig& finetune, const AsplConfig& loop,
                                   const NoiseSchedule& schedule, const DefenseOptions& opts = {}) {
  return ensemble_defend({theta_pretrained}, x_a_clean, x_db, attack, finetune, loop, schedule, opts,
                         attack.targeted ? Algorithm::kTAspl : Algorithm::kAspl);
}

// A fixed high-contrast pattern used as x_tar when none is supplied.
inline Image default_target_pattern(Shape image_shape, std::uint64_t seed = 0) {
  Image t(Shape{1, image_shape.c, image_shape.h, image_shape.w});
  Rng rng(derive_seed(seed, "target"));
  std::vector<float> colors;
  for (int c = 0; c < image_shape.c; ++c) colors.push_back(static_cast<float>(rng.uniform()));
  for (int c = 0; c < image_shape.c; ++c)
    for (int y = 0; y < image_shape.h; ++y)
      for (int x = 0; x < image_shape.w; ++x) {
        const bool on = ((x / 4) + (y / 4)) % 2 == 0;
        t.at(0, c, y, x) = on ? colors[c] : 1.0f - colors[c];
      }
  return t;
}

// Dispatches one of the five algorithms. Targeted variants require
// attack.target_image; E-ASPL uses every checkpoint in the list, the others
// only the first.
inline PerturbationSet defend(Algorithm algo, const std::vector<Checkpoint>& surrogates,
                              const std::vector<Image>& x_a_clean, const std::vector<Image>& x_db,
                              AttackConfig attack, const FinetuneConfig& finetune, const AsplConfig& loop,
                              const NoiseSchedule& schedule, const DefenseOptions& opts = {}) {
  if (surrogates.empty()) throw std::invalid_argument("defense needs at least one surrogate checkpoint");
  attack.targeted = is_targeted(algo);
  switch (algo) {
    case Algorithm::kFsmg:
    case Algorithm::kTFsmg:
      return fsmg_defend(surrogates.front(), x_a_clean, x_db, attack, finetune, schedule, opts);
    case Algorithm::kAspl:
    case Algorithm::kTAspl:
      return aspl_defend(surrogates.front(), x_a_clean, x_db, attack, finetune, loop, schedule, opts);
    case Algorithm::kEAspl:
      return ensemble_defend(surrogates, x_a_clean, x_db, attack, finetune, loop, schedule, opts,
                             Algorithm::kEAspl);
  }
  throw std::invalid_argument("unknown algorithm");
}

// Published form: perturbed PNGs, lossless arrays, and a manifest.
inline void save_perturbation_set(const PerturbationSet& set, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t i = 0; i < set.perturbed.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "perturbed_%03zu.png", i);
    write_png(dir / name, set.perturbed[i]);
    files.push_back(name);
  }
  write_npy(dir / "perturbed.npy", stack(set.perturbed));
  write_npy(dir / "deltas.npy", stack(set.deltas()));
  nlohmann::json manifest{{"algorithm", set.algorithm},
                          {"eta", set.eta},
                          {"count", set.perturbed.size()},
                          {"images", files},
                          {"max_abs_delta", set.max_abs_delta()},
                          {"provenance", set.provenance},
                          {"trace", set.trace}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

// Lossless perturbed images from a saved set.
inline std::vector<Image> load_perturbed(const std::filesystem::path& dir) {
  return unstack(read_npy<float>(dir / "perturbed.npy"));
}

}  // namespace cloakforge
