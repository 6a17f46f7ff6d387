#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cloakforge/cloak.hpp"
#include "cloakforge/dataset.hpp"
#include "cloakforge/embedder.hpp"
#include "cloakforge/quality.hpp"

namespace cloakforge {

enum class Setting { kConvenient, kModelMismatch, kTermMismatch, kPromptMismatch, kUncontrolled };

inline std::string to_string(Setting s) {
  switch (s) {
    case Setting::kConvenient: return "convenient";
    case Setting::kModelMismatch: return "model_mismatch";
    case Setting::kTermMismatch: return "term_mismatch";
    case Setting::kPromptMismatch: return "prompt_mismatch";
    case Setting::kUncontrolled: return "uncontrolled";
  }
  return "?";
}

inline Setting setting_from_string(const std::string& s) {
  for (auto v : {Setting::kConvenient, Setting::kModelMismatch, Setting::kTermMismatch, Setting::kPromptMismatch,
                 Setting::kUncontrolled}) {
    if (to_string(v) == s) return v;
  }
  throw std::invalid_argument("unknown setting '" + s + "'");
}

struct RunConfig {
  std::string name = "run";
  Setting setting = Setting::kConvenient;
  Algorithm algorithm = Algorithm::kAspl;
  AttackConfig attack;
  AsplConfig aspl;
  // The defender's surrogate finetuning; its instance prompt is the attack's
  // surrogate prompt.
  FinetuneConfig defender_finetune;
  std::vector<std::string> surrogates{"A"};
  std::string adversary = "A";
  // The adversary's DreamBooth prompt; its prior prompt drops the identifier.
  PromptSpec adversary_prompt = instance_prompt();
  FinetuneConfig adversary_finetune;
  // Defaults to the photo and dslr prompts with the adversary's identifier.
  std::vector<PromptSpec> eval_prompts;
  int k_clean = 0;
  int num_images = 30;
  double tau = 0.5;
  std::uint64_t seed = 0;
  bool include_baseline = true;

  std::vector<PromptSpec> evaluation_prompts() const {
    if (!eval_prompts.empty()) return eval_prompts;
    return {instance_prompt(adversary_prompt.identifier), dslr_prompt(adversary_prompt.identifier)};
  }

  void validate(int per_split = 4) const {
    attack.validate();
    aspl.validate();
    defender_finetune.validate();
    adversary_finetune.validate();
    adversary_prompt.validate();
    if (surrogates.empty()) throw std::invalid_argument("run needs at least one surrogate checkpoint");
    if (num_images < 1) throw std::invalid_argument("num_images must be >= 1");
    if (!(tau > 0 && tau < 1)) throw std::invalid_argument("tau must lie in (0, 1)");
    if (k_clean < 0 || k_clean > per_split) {
      throw std::invalid_argument("k_clean must lie in [0, " + std::to_string(per_split) + "]");
    }
    if (setting != Setting::kUncontrolled && k_clean != 0) {
      throw std::invalid_argument("k_clean is only meaningful in the uncontrolled setting");
    }
    if (setting == Setting::kTermMismatch && adversary_prompt.identifier == attack.surrogate_prompt.identifier) {
      throw std::invalid_argument("term_mismatch needs an adversary identifier different from the defender's");
    }
    if (setting == Setting::kPromptMismatch && adversary_prompt.templ == attack.surrogate_prompt.templ) {
      throw std::invalid_argument("prompt_mismatch needs an adversary template different from the defender's");
    }
    if (setting == Setting::kModelMismatch &&
        std::find(surrogates.begin(), surrogates.end(), adversary) != surrogates.end() && surrogates.size() == 1) {
      throw std::invalid_argument("model_mismatch needs an adversary checkpoint different from the surrogate");
    }
  }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"name", c.name},
                     {"setting", to_string(c.setting)},
                     {"algorithm", to_string(c.algorithm)},
                     {"attack", c.attack},
                     {"aspl", c.aspl},
                     {"defender_finetune", c.defender_finetune},
                     {"surrogates", c.surrogates},
                     {"adversary", c.adversary},
                     {"adversary_prompt", c.adversary_prompt},
                     {"adversary_finetune", c.adversary_finetune},
                     {"eval_prompts", c.eval_prompts},
                     {"k_clean", c.k_clean},
                     {"num_images", c.num_images},
                     {"tau", c.tau},
                     {"seed", c.seed},
                     {"include_baseline", c.include_baseline}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  RunConfig d;
  c.name = j.value("name", d.name);
  c.setting = setting_from_string(j.value("setting", to_string(d.setting)));
  c.algorithm = algorithm_from_string(j.value("algorithm", to_string(d.algorithm)));
  c.attack = j.value("attack", d.attack);
  c.aspl = j.value("aspl", d.aspl);
  c.defender_finetune = j.value("defender_finetune", d.defender_finetune);
  c.surrogates = j.value("surrogates", d.surrogates);
  c.adversary = j.value("adversary", d.adversary);
  c.adversary_prompt = j.value("adversary_prompt", d.adversary_prompt);
  c.adversary_finetune = j.value("adversary_finetune", d.adversary_finetune);
  c.eval_prompts = j.value("eval_prompts", d.eval_prompts);
  c.k_clean = j.value("k_clean", d.k_clean);
  c.num_images = j.value("num_images", d.num_images);
  c.tau = j.value("tau", d.tau);
  c.seed = j.value("seed", d.seed);
  c.include_baseline = j.value("include_baseline", d.include_baseline);
}

struct EvalReport {
  std::string run;
  std::string setting;
  std::string arm;  // "defended" or "baseline"
  std::string subject;
  std::string algorithm;
  double eta = 0;
  int k_clean = 0;
  std::string prompt;
  int n_images = 0;
  double fdfr = 0;
  std::optional<double> ism;
  double quality = 0;
  std::string model;
  std::vector<std::string> surrogates;
  std::uint64_t seed = 0;
  nlohmann::json artifacts = nlohmann::json::object();
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"run", r.run},
                     {"setting", r.setting},
                     {"arm", r.arm},
                     {"subject", r.subject},
                     {"algorithm", r.algorithm},
                     {"eta", r.eta},
                     {"k_clean", r.k_clean},
                     {"prompt", r.prompt},
                     {"n_images", r.n_images},
                     {"fdfr", r.fdfr},
                     {"ism", r.ism ? nlohmann::json(*r.ism) : nlohmann::json(nullptr)},
                     {"quality", r.quality},
                     {"model", r.model},
                     {"surrogates", r.surrogates},
                     {"seed", r.seed},
                     {"artifacts", r.artifacts}};
}

inline void from_json(const nlohmann::json& j, EvalReport& r) {
  r.run = j.at("run").get<std::string>();
  r.setting = j.at("setting").get<std::string>();
  r.arm = j.at("arm").get<std::string>();
  r.subject = j.at("subject").get<std::string>();
  r.algorithm = j.at("algorithm").get<std::string>();
  r.eta = j.at("eta").get<double>();
  r.k_clean = j.at("k_clean").get<int>();
  r.prompt = j.at("prompt").get<std::string>();
  r.n_images = j.at("n_images").get<int>();
  r.fdfr = j.at("fdfr").get<double>();
  r.ism = j.at("ism").is_null() ? std::nullopt : std::optional<double>(j.at("ism").get<double>());
  r.quality = j.at("quality").get<double>();
  r.model = j.at("model").get<std::string>();
  r.surrogates = j.at("surrogates").get<std::vector<std::string>>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.artifacts = j.value("artifacts", nlohmann::json::object());
}

// Content-keyed store for deterministic intermediate results (perturbation
// sets, generated samples). Entries are lossless .npy files, so a hit returns
// exactly what a recomputation would.
class ArtifactCache {
 public:
  ArtifactCache() = default;
  explicit ArtifactCache(std::optional<std::filesystem::path> dir) : dir_(std::move(dir)) {}

  bool enabled() const { return dir_.has_value(); }
  const std::optional<std::filesystem::path>& dir() const { return dir_; }

  template <class F>
  std::vector<Image> images(const std::string& kind, std::uint64_t key, F&& compute) {
    if (!dir_) return compute();
    const auto file = path(kind, key);
    if (std::filesystem::exists(file)) return unstack(read_npy<float>(file));
    auto out = compute();
    if (!out.empty()) write_npy(file, stack(out));
    return out;
  }

  std::filesystem::path path(const std::string& kind, std::uint64_t key) const {
    std::ostringstream name;
    name << kind << '_' << std::hex << std::setw(16) << std::setfill('0') << key << ".npy";
    return *dir_ / name.str();
  }

 private:
  std::optional<std::filesystem::path> dir_;
};

inline std::uint64_t digest_images(const std::vector<Image>& images) {
  std::uint64_t h = stable_hash("images");
  for (const auto& img : images) {
    std::string_view bytes(reinterpret_cast<const char*>(img.data()), img.size() * sizeof(float));
    h = splitmix64(h ^ stable_hash(bytes));
  }
  return h;
}

inline std::uint64_t digest_json(const nlohmann::json& j) { return stable_hash(j.dump()); }

// Everything a run needs besides its config and data.
struct ExperimentContext {
  NoiseSchedule schedule = make_default_schedule();
  std::map<std::string, Checkpoint> checkpoints;
  IdentityEmbedder embedder;
  PristineStats pristine;
  ArtifactCache cache;
  std::ostream* log = nullptr;

  const Checkpoint& checkpoint(const std::string& name) const {
    auto it = checkpoints.find(name);
    if (it == checkpoints.end()) throw std::invalid_argument("unknown checkpoint '" + name + "'");
    return it->second;
  }
  std::optional<std::filesystem::path> prior_cache() const { return cache.dir(); }
};

// Identities the base models are pretrained on, disjoint in seed from any
// evaluation dataset.
struct BackgroundConfig {
  int subjects = 24;
  int images = 24;
  std::uint64_t seed = 1000;
};

inline void to_json(nlohmann::json& j, const BackgroundConfig& c) {
  j = nlohmann::json{{"subjects", c.subjects}, {"images", c.images}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, BackgroundConfig& c) {
  BackgroundConfig d;
  c.subjects = j.value("subjects", d.subjects);
  c.images = j.value("images", d.images);
  c.seed = j.value("seed", d.seed);
}

inline LabeledImages background_identities(const BackgroundConfig& c) {
  if (c.subjects < 1 || c.images < 1) throw std::invalid_argument("background needs >= 1 subject and image");
  LabeledImages out;
  for (int i = 0; i < c.subjects; ++i) {
    out.names.push_back("bg" + std::to_string(i));
    out.images.push_back(toy_subject_images(c.seed, i, c.images));
  }
  return out;
}

// Every PNG of every subject folder, in lexicographic order.
inline LabeledImages labeled_subjects(const std::filesystem::path& root, int image_size = 32, int channels = 3) {
  IngestOptions opts{image_size, channels, 0};
  LabeledImages out;
  std::vector<std::filesystem::path> dirs;
  for (const auto& e : std::filesystem::directory_iterator(root)) {
    if (e.is_directory()) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  for (const auto& dir : dirs) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
      if (e.is_regular_file() && is_png(e.path())) files.push_back(e.path());
    }
    if (files.empty()) continue;
    std::sort(files.begin(), files.end());
    out.names.push_back(dir.filename().string());
    out.images.emplace_back();
    for (const auto& f : files) {
      out.images.back().push_back(
          clamp01(center_crop_resize(to_channels(read_png(f), opts.channels), opts.image_size)));
    }
  }
  return out;
}

// The recognizer knows the evaluation subjects and the background pool; the
// pristine quality model is fit on background images only.
struct Evaluator {
  IdentityEmbedder embedder;
  PristineStats pristine;
};

inline Evaluator build_evaluator(const LabeledImages& subjects, const BackgroundConfig& background,
                                 const EmbedderConfig& config, int pristine_per_identity = 4) {
  LabeledImages all = subjects;
  const auto bg = background_identities(background);
  all.names.insert(all.names.end(), bg.names.begin(), bg.names.end());
  all.images.insert(all.images.end(), bg.images.begin(), bg.images.end());
  Evaluator ev{train_identity_embedder(all, config), {}};
  std::vector<Image> pristine;
  for (const auto& imgs : bg.images) {
    const int n = std::min<int>(pristine_per_identity, static_cast<int>(imgs.size()));
    pristine.insert(pristine.end(), imgs.begin(), imgs.begin() + n);
  }
  ev.pristine = fit_pristine_model(pristine);
  return ev;
}

// (n - k_clean) perturbed images followed by k_clean clean ones, in order;
// n is the perturbed set size.
inline std::vector<Image> mix_uncontrolled(const std::vector<Image>& perturbed, const std::vector<Image>& clean,
                                           int k_clean) {
  const int n = static_cast<int>(perturbed.size());
  if (k_clean < 0 || k_clean > n) throw std::invalid_argument("k_clean must lie in [0, " + std::to_string(n) + "]");
  if (static_cast<int>(clean.size()) < k_clean) {
    throw std::invalid_argument("mix_uncontrolled: only " + std::to_string(clean.size()) + " clean images for k=" +
                                std::to_string(k_clean));
  }
  std::vector<Image> out(perturbed.begin(), perturbed.begin() + (n - k_clean));
  out.insert(out.end(), clean.begin(), clean.begin() + k_clean);
  return out;
}

struct GeneratedSet {
  PromptSpec prompt;
  std::vector<Image> images;
};

// DreamBooth-finetunes `start` on `train` and samples each prompt; cached by
// content.
inline std::vector<GeneratedSet> personalize_and_generate(ExperimentContext& ctx, const Checkpoint& start,
                                                          const std::vector<Image>& train, const FinetuneConfig& ft,
                                                          const std::vector<PromptSpec>& prompts, int count,
                                                          std::uint64_t gen_seed) {
  const std::uint64_t base = splitmix64(parameter_digest(start) ^ digest_images(train) ^ digest_json(ft) ^
                                        derive_seed(gen_seed, static_cast<std::uint64_t>(count)) ^
                                        stable_hash(std::to_string(ctx.schedule.T)));
  std::vector<GeneratedSet> out;
  std::optional<Denoiser> model;
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    const std::uint64_t key = splitmix64(base ^ stable_hash(prompts[p].render()));
    auto imgs = ctx.cache.images("samples", key, [&] {
      if (!model) {
        auto result = finetune_dreambooth(start, train, ft, ctx.schedule, ctx.prior_cache());
        model = restore(result.checkpoint);
      }
      auto cond = model->embed_prompt(prompts[p]);
      return ancestral_sample<float>(*model, cond, ctx.schedule, derive_seed(gen_seed, prompts[p].render()), count,
                                     model->image_shape());
    });
    out.push_back({prompts[p], std::move(imgs)});
  }
  return out;
}

inline PerturbationSet cached_defend(ExperimentContext& ctx, Algorithm algo, const std::vector<Checkpoint>& surrogates,
                                     const std::vector<Image>& x_a, const std::vector<Image>& x_db,
                                     const AttackConfig& attack, const FinetuneConfig& ft, const AsplConfig& loop) {
  std::uint64_t key = splitmix64(stable_hash(to_string(algo)) ^ digest_images(x_a) ^
                                 splitmix64(digest_images(x_db)) ^ digest_json(attack) ^ digest_json(ft) ^
                                 splitmix64(digest_json(loop) + ctx.schedule.T));
  for (const auto& ck : surrogates) key = splitmix64(key ^ parameter_digest(ck));
  if (attack.target_image) key = splitmix64(key ^ digest_images({*attack.target_image}));
  std::optional<PerturbationSet> computed;
  auto perturbed = ctx.cache.images("perturbed", key, [&] {
    DefenseOptions opts{ctx.prior_cache(), std::nullopt};
    computed = defend(algo, surrogates, x_a, x_db, attack, ft, loop, ctx.schedule, opts);
    return computed->perturbed;
  });
  if (computed) return *computed;
  PerturbationSet set;
  set.original = x_db;
  set.perturbed = std::move(perturbed);
  set.eta = attack.eta;
  set.algorithm = to_string(algo);
  set.provenance = {{"algorithm", to_string(algo)}, {"cached", true}, {"attack", attack}};
  return set;
}

struct EvaluatedSet {
  double fdfr = 0;
  std::optional<double> ism;
  double quality = 0;
};

inline EvaluatedSet evaluate_images(const ExperimentContext& ctx, const std::vector<Image>& generated,
                                    const std::vector<Image>& reference, double tau) {
  EvaluatedSet e;
  const auto gen = ctx.embedder.score(generated);
  const auto ref = ctx.embedder.score(reference);
  e.fdfr = fdfr_from_confidence(gen.confidence, tau);
  e.ism = ism_from_embeddings(gen.embeddings, gen.confidence, mean_direction(ref.embeddings), tau);
  e.quality = quality_score(generated, ctx.pristine);
  return e;
}

struct RunResult {
  std::vector<EvalReport> reports;
  std::vector<std::string> failures;
};

namespace detail {

inline std::string slug(std::string s) {
  for (auto& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
  }
  return s;
}

inline void write_images(const std::filesystem::path& dir, const std::string& prefix, const std::vector<Image>& imgs,
                         const std::filesystem::path& root, nlohmann::json& list) {
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof(name), "%s_%02zu.png", prefix.c_str(), i);
    write_png(dir / name, imgs[i]);
    list.push_back(std::filesystem::relative(dir / name, root).generic_string());
  }
}

}  // namespace detail

// Defense, adversary finetune, generation and scoring for every subject. The
// baseline arm finetunes on the clean protected set with the same seeds.
inline RunResult run_setting(const RunConfig& config, const std::vector<SubjectSplit>& splits,
                             ExperimentContext& ctx, const std::optional<std::filesystem::path>& out_dir = {}) {
  const int per_split = splits.empty() ? 4 : static_cast<int>(splits.front().protect.size());
  config.validate(per_split);
  RunResult result;
  std::vector<Checkpoint> surrogates;
  for (const auto& name : config.surrogates) surrogates.push_back(ctx.checkpoint(name));
  const Checkpoint& adversary = ctx.checkpoint(config.adversary);
  const auto prompts = config.evaluation_prompts();

  FinetuneConfig defender_ft = config.defender_finetune;
  defender_ft.instance_prompt = config.attack.surrogate_prompt;
  defender_ft.prior_prompt = config.attack.surrogate_prompt.without_identifier();
  FinetuneConfig adversary_ft = config.adversary_finetune;
  adversary_ft.instance_prompt = config.adversary_prompt;
  adversary_ft.prior_prompt = config.adversary_prompt.without_identifier();

  for (const auto& split : splits) {
    try {
      const std::uint64_t subject_seed = derive_seed(config.seed, split.subject);
      std::optional<std::filesystem::path> dir;
      if (out_dir) {
        dir = *out_dir / config.name / split.subject;
        std::filesystem::create_directories(*dir);
      }
      AttackConfig attack = config.attack;
      attack.seed = derive_seed(subject_seed, "defense");
      if (is_targeted(config.algorithm) && !attack.target_image) {
        attack.target_image = default_target_pattern(split.protect.front().shape(), config.seed);
      }
      FinetuneConfig dft = defender_ft;
      dft.seed = derive_seed(subject_seed, "surrogate");
      FinetuneConfig aft = adversary_ft;
      aft.seed = derive_seed(subject_seed, "adversary");
      const std::uint64_t gen_seed = derive_seed(subject_seed, "generate");

      auto pert = cached_defend(ctx, config.algorithm, surrogates, split.reference, split.protect, attack, dft,
                                config.aspl);
      // The adversary only sees the published 8-bit images.
      std::vector<Image> published;
      for (const auto& img : pert.perturbed) published.push_back(quantize_u8(img));
      const auto defended_train = mix_uncontrolled(published, split.extra_clean, config.k_clean);

      nlohmann::json artifacts{{"clean", nlohmann::json::array()}, {"perturbed", nlohmann::json::array()}};
      if (dir) {
        save_perturbation_set(pert, *dir / "perturbation");
        detail::write_images(*dir, "clean", split.protect, *out_dir, artifacts["clean"]);
        detail::write_images(*dir, "perturbed", published, *out_dir, artifacts["perturbed"]);
      }

      const auto reference = split.all_clean();
      auto emit = [&](const std::string& arm, const std::vector<Image>& train) {
        auto sets = personalize_and_generate(ctx, adversary, train, aft, prompts, config.num_images, gen_seed);
        for (std::size_t p = 0; p < sets.size(); ++p) {
          const auto ev = evaluate_images(ctx, sets[p].images, reference, config.tau);
          EvalReport r;
          r.run = config.name;
          r.setting = to_string(config.setting);
          r.arm = arm;
          r.subject = split.subject;
          r.algorithm = arm == "baseline" ? "none" : to_string(config.algorithm);
          r.eta = arm == "baseline" ? 0.0 : config.attack.eta;
          r.k_clean = arm == "baseline" ? 0 : config.k_clean;
          r.prompt = sets[p].prompt.render();
          r.n_images = static_cast<int>(sets[p].images.size());
          r.fdfr = ev.fdfr;
          r.ism = ev.ism;
          r.quality = ev.quality;
          r.model = adversary.name;
          r.surrogates = config.surrogates;
          r.seed = config.seed;
          r.artifacts = artifacts;
          if (dir) {
            const std::string grid = "samples_" + arm + "_" + std::to_string(p) + ".png";
            write_png(*dir / grid, image_grid(sets[p].images, 10));
            r.artifacts["samples"] = std::filesystem::relative(*dir / grid, *out_dir).generic_string();
          }
          result.reports.push_back(std::move(r));
        }
      };
      emit("defended", defended_train);
      if (config.include_baseline) emit("baseline", split.protect);
      if (ctx.log) *ctx.log << "[" << config.name << "] subject " << split.subject << " done\n";
    } catch (const std::exception& e) {
      result.failures.push_back(split.subject + ": " + e.what());
      if (ctx.log) *ctx.log << "[" << config.name << "] subject " << split.subject << " failed: " << e.what() << "\n";
    }
  }
  return result;
}

// One run per budget with shared seeds, so only eta varies.
inline std::vector<RunResult> sweep_budget(const RunConfig& base, const std::vector<double>& etas,
                                           const std::vector<SubjectSplit>& splits, ExperimentContext& ctx,
                                           const std::optional<std::filesystem::path>& out_dir = {}) {
  for (double eta : etas) {
    if (!(eta >= 0 && eta <= 1)) throw std::invalid_argument("sweep budgets must lie in [0, 1]");
  }
  std::vector<RunResult> out;
  for (double eta : etas) {
    RunConfig cfg = base;
    cfg.attack.eta = eta;
    std::ostringstream name;
    name << base.name << "_eta" << eta;
    cfg.name = name.str();
    cfg.include_baseline = base.include_baseline && out.empty();
    out.push_back(run_setting(cfg, splits, ctx, out_dir));
  }
  return out;
}

// Uncontrolled setting: one run per clean-image count with shared seeds, so
// the defended arms differ only in how many perturbed images are swapped out.
inline std::vector<RunResult> sweep_mixing(const RunConfig& base, const std::vector<int>& k_values,
                                           const std::vector<SubjectSplit>& splits, ExperimentContext& ctx,
                                           const std::optional<std::filesystem::path>& out_dir = {}) {
  std::vector<RunResult> out;
  for (int k : k_values) {
    RunConfig cfg = base;
    cfg.setting = Setting::kUncontrolled;
    cfg.k_clean = k;
    cfg.name = base.name + "_k" + std::to_string(k);
    cfg.include_baseline = base.include_baseline && out.empty();
    out.push_back(run_setting(cfg, splits, ctx, out_dir));
  }
  return out;
}

inline const std::vector<double>& canonical_budgets() {
  static const std::vector<double> grid{0.0, 0.01, 0.03, 0.05, 0.10, 0.15};
  return grid;
}

// Mean of a metric over reports matching a predicate; ISM skips absent values.
template <class Pred>
std::optional<double> mean_metric(const std::vector<EvalReport>& reports, const std::string& metric, Pred pred) {
  double acc = 0;
  int n = 0;
  for (const auto& r : reports) {
    if (!pred(r)) continue;
    if (metric == "ism") {
      if (!r.ism) continue;
      acc += *r.ism;
    } else if (metric == "fdfr") {
      acc += r.fdfr;
    } else {
      acc += r.quality;
    }
    ++n;
  }
  if (n == 0) return std::nullopt;
  return acc / n;
}

struct AggregateRow {
  std::string run, setting, arm, algorithm, model;
  double eta = 0;
  int k_clean = 0;
  int subjects = 0;
  std::map<std::string, std::array<std::optional<double>, 3>> by_prompt;  // fdfr, ism, quality
};

inline std::vector<std::string> prompt_order(const std::vector<EvalReport>& reports) {
  std::vector<std::string> order;
  for (const auto& r : reports) {
    if (std::find(order.begin(), order.end(), r.prompt) == order.end()) order.push_back(r.prompt);
  }
  return order;
}

inline std::vector<AggregateRow> aggregate(const std::vector<EvalReport>& reports) {
  std::vector<AggregateRow> rows;
  auto same = [](const AggregateRow& row, const EvalReport& r) {
    return row.run == r.run && row.arm == r.arm && row.model == r.model && row.eta == r.eta &&
           row.k_clean == r.k_clean && row.algorithm == r.algorithm;
  };
  for (const auto& r : reports) {
    auto it = std::find_if(rows.begin(), rows.end(), [&](const AggregateRow& row) { return same(row, r); });
    if (it == rows.end()) {
      AggregateRow row{r.run, r.setting, r.arm, r.algorithm, r.model, r.eta, r.k_clean, 0, {}};
      rows.push_back(row);
    }
  }
  for (auto& row : rows) {
    std::vector<std::string> subjects;
    for (const auto& r : reports) {
      if (same(row, r) && std::find(subjects.begin(), subjects.end(), r.subject) == subjects.end()) {
        subjects.push_back(r.subject);
      }
    }
    row.subjects = static_cast<int>(subjects.size());
    for (const auto& prompt : prompt_order(reports)) {
      auto pred = [&](const EvalReport& r) { return same(row, r) && r.prompt == prompt; };
      row.by_prompt[prompt] = {mean_metric(reports, "fdfr", pred), mean_metric(reports, "ism", pred),
                               mean_metric(reports, "quality", pred)};
    }
  }
  return rows;
}

// records/NNNN.json per report plus aggregate.csv: one row per (run, arm,
// model, budget, mix), FDFR/ISM/QUALITY columns per prompt.
inline void write_report(const std::vector<EvalReport>& reports, const std::filesystem::path& out_dir) {
  if (reports.empty()) throw std::invalid_argument("write_report: no reports");
  std::filesystem::create_directories(out_dir / "records");
  for (std::size_t i = 0; i < reports.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%04zu.json", i);
    std::ofstream out(out_dir / "records" / name);
    if (!out) throw std::runtime_error("cannot write " + (out_dir / "records" / name).string());
    out << nlohmann::json(reports[i]).dump(2) << '\n';
  }
  const auto prompts = prompt_order(reports);
  std::ofstream csv(out_dir / "aggregate.csv");
  if (!csv) throw std::runtime_error("cannot write " + (out_dir / "aggregate.csv").string());
  csv << "run,setting,arm,algorithm,model,eta,k_clean,subjects";
  for (const auto& p : prompts) csv << ",FDFR [" << p << "],ISM [" << p << "],QUALITY [" << p << "]";
  csv << '\n' << std::setprecision(6);
  for (const auto& row : aggregate(reports)) {
    csv << row.run << ',' << row.setting << ',' << row.arm << ',' << row.algorithm << ',' << row.model << ','
        << row.eta << ',' << row.k_clean << ',' << row.subjects;
    for (const auto& p : prompts) {
      for (const auto& v : row.by_prompt.at(p)) {
        csv << ',';
        if (v) csv << *v;
      }
    }
    csv << '\n';
  }
}

inline std::vector<EvalReport> load_reports(const std::filesystem::path& out_dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(out_dir / "records")) {
    if (e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<EvalReport> out;
  for (const auto& f : files) {
    std::ifstream in(f);
    out.push_back(nlohmann::json::parse(in).get<EvalReport>());
  }
  return out;
}

namespace detail {

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

// Minimal deterministic SVG line chart.
inline void write_line_chart(const std::filesystem::path& path, const std::string& title, const std::string& xlabel,
                             const std::string& ylabel, const std::vector<Series>& series) {
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
    }
  // No finite points (e.g. every ISM null): draw empty axes labeled "no data".
  const bool empty = x0 > x1;
  if (empty) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad, y1 += pad;
  const int W = 480, H = 320, L = 60, R = 150, T = 30, B = 45;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::ofstream out(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << W / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">" << title << "</text>\n"
      << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n"
      << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 8 << "\" text-anchor=\"middle\" font-size=\"12\">"
      << xlabel << "</text>\n"
      << "<text x=\"14\" y=\"" << (T + H - B) / 2 << "\" font-size=\"12\" transform=\"rotate(-90 14 "
      << (T + H - B) / 2 << ")\" text-anchor=\"middle\">" << ylabel << "</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = y0 + (y1 - y0) * i / 4, xv = x0 + (x1 - x0) * i / 4;
    out << "<text x=\"" << L - 4 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\" font-size=\"10\">" << fmt(yv)
        << "</text>\n"
        << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 14 << "\" text-anchor=\"middle\" font-size=\"10\">"
        << fmt(xv) << "</text>\n";
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* col = colors[s % 6];
    out << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
    for (auto [x, y] : series[s].points) out << fmt(px(x)) << ',' << fmt(py(y)) << ' ';
    out << "\"/>\n";
    for (auto [x, y] : series[s].points) {
      out << "<circle cx=\"" << fmt(px(x)) << "\" cy=\"" << fmt(py(y)) << "\" r=\"3\" fill=\"" << col << "\"/>\n";
    }
    out << "<text x=\"" << W - R + 8 << "\" y=\"" << T + 14 * (s + 1) << "\" font-size=\"10\" fill=\"" << col
        << "\">" << series[s].label << "</text>\n";
  }
  if (empty) {
    out << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << (T + H - B) / 2
        << "\" text-anchor=\"middle\" font-size=\"12\">no data</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace detail

// Metric-vs-budget curves (SVG) for every run family with more than one
// budget, and clean/perturbed grids from the image paths stored in records.
// Plots depend only on the records and the files they reference.
inline std::vector<std::filesystem::path> render_plots(const std::vector<EvalReport>& reports,
                                                       const std::filesystem::path& out_dir) {
  if (reports.empty()) throw std::invalid_argument("render_plots: no reports");
  std::filesystem::create_directories(out_dir / "plots");
  std::vector<std::filesystem::path> written;
  const auto prompts = prompt_order(reports);

  std::vector<double> etas;
  for (const auto& r : reports) {
    if (r.arm == "defended" && std::find(etas.begin(), etas.end(), r.eta) == etas.end()) etas.push_back(r.eta);
  }
  std::sort(etas.begin(), etas.end());
  if (etas.size() > 1) {
    for (const std::string metric : {"ism", "fdfr", "quality"}) {
      std::vector<detail::Series> series;
      for (const auto& p : prompts) {
        detail::Series s{p, {}};
        for (double eta : etas) {
          auto v = mean_metric(reports, metric, [&](const EvalReport& r) {
            return r.arm == "defended" && r.eta == eta && r.k_clean == 0 && r.prompt == p;
          });
          if (v) s.points.emplace_back(eta, *v);
        }
        if (!s.points.empty()) series.push_back(std::move(s));
      }
      const auto path = out_dir / "plots" / (metric + "_vs_eta.svg");
      detail::write_line_chart(path, metric + " vs budget", "eta", metric, series);
      written.push_back(path);
    }
  }

  std::vector<std::string> seen;
  for (const auto& r : reports) {
    const std::string key = r.run + "/" + r.subject;
    if (r.arm != "defended" || std::find(seen.begin(), seen.end(), key) != seen.end()) continue;
    seen.push_back(key);
    const auto& clean = r.artifacts.value("clean", nlohmann::json::array());
    const auto& pert = r.artifacts.value("perturbed", nlohmann::json::array());
    if (clean.empty() || clean.size() != pert.size()) continue;
    std::vector<Image> tiles;
    for (const auto& f : clean) tiles.push_back(read_png(out_dir / f.get<std::string>()));
    for (const auto& f : pert) tiles.push_back(read_png(out_dir / f.get<std::string>()));
    // Third row: perturbation magnified 5x around mid-gray.
    for (std::size_t i = 0; i < clean.size(); ++i) {
      Image d(tiles[i].shape());
      for (std::size_t k = 0; k < d.size(); ++k) {
        d[k] = std::clamp(0.5f + 5.0f * (tiles[clean.size() + i][k] - tiles[i][k]), 0.0f, 1.0f);
      }
      tiles.push_back(std::move(d));
    }
    const auto path = out_dir / "plots" / ("grid_" + detail::slug(r.run) + "_" + detail::slug(r.subject) + ".png");
    write_png(path, image_grid(tiles, static_cast<int>(clean.size())));
    written.push_back(path);
  }
  return written;
}

}  // namespace cloakforge
