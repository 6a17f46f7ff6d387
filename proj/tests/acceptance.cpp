// Runs the ten acceptance criteria and prints one PASS/FAIL line per
// criterion. Detail lines are indented. Exit status is nonzero if any fails.
//
//   acceptance --work <dir> --models <dir> [--only 1,3,9]

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"

#include "cloakforge/experiment.hpp"
#include "cloakforge/pretrain.hpp"

using namespace cloakforge;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::vector<std::string> details;

  void note(const std::string& s) { details.push_back(s); }
  bool check(bool ok, const std::string& s) {
    details.push_back(std::string(ok ? "ok   " : "MISS ") + s);
    return ok;
  }
};

std::string num(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

// ---------------------------------------------------------------- fixtures

Architecture tiny_arch() {
  Architecture a;
  a.image_size = 8;
  a.w0 = 4;
  a.w1 = 6;
  a.w2 = 8;
  a.time_dim = 8;
  a.emb_dim = 8;
  a.cond_dim = 6;
  return a;
}

Checkpoint tiny_checkpoint(std::uint64_t seed, const std::string& name) {
  Denoiser m(tiny_arch(), seed);
  m.embed_prompt(instance_prompt());
  m.embed_prompt(prior_prompt());
  return snapshot(m, name);
}

// The toy benchmark: 5 evaluation subjects, base models A and B, and an
// evaluator trained on the subjects plus the background pool.
constexpr int kSubjects = 5;
constexpr std::uint64_t kDatasetSeed = 11;
constexpr std::uint64_t kRunSeed = 7;

struct Bench {
  ExperimentContext ctx;
  std::vector<SubjectSplit> splits;
  fs::path work;
};

Checkpoint load_or_pretrain(const fs::path& models, const std::string& name) {
  const auto ckpt = models / (name + ".ckpt");
  if (fs::exists(ckpt)) return load_checkpoint<float>(ckpt);
  const auto cfg_path = models / (name + ".json");
  if (!fs::exists(cfg_path)) throw std::runtime_error("neither " + ckpt.string() + " nor " + cfg_path.string());
  std::cout << "  pretraining " << name << " from " << cfg_path.string() << " (no shipped checkpoint)\n" << std::flush;
  std::ifstream in(cfg_path);
  const json cfg = json::parse(in);
  const auto& p = cfg.at("pretrain");
  const auto data = background_identities(p.value("background", cfg.value("background", BackgroundConfig{})));
  auto result = pretrain_denoiser(data, p.get<PretrainConfig>(), make_default_schedule(cfg.value("T", 250)),
                                  p.value("name", name));
  save_checkpoint(result.checkpoint, ckpt);
  return result.checkpoint;
}

Bench& bench(const fs::path& work, const fs::path& models) {
  static std::unique_ptr<Bench> b;
  if (b) return *b;
  b = std::make_unique<Bench>();
  b->work = work;
  const auto data = work / "dataset";
  if (!fs::exists(data)) make_toy_dataset(kSubjects, 12, kDatasetSeed, data);
  auto ingest = ingest_dataset(data);
  if (ingest.subjects.size() != kSubjects) throw std::runtime_error("dataset ingest failed");
  b->splits = ingest.subjects;
  for (const std::string name : {"A", "B"}) b->ctx.checkpoints.emplace(name, load_or_pretrain(models, name));
  auto ev = build_evaluator(labeled_subjects(data), BackgroundConfig{}, EmbedderConfig{});
  std::cout << "  evaluator holdout accuracy " << num(ev.embedder.holdout_accuracy, 3) << "\n" << std::flush;
  b->ctx.embedder = std::move(ev.embedder);
  b->ctx.pristine = std::move(ev.pristine);
  b->ctx.cache = ArtifactCache(work / "cache");
  return *b;
}

RunConfig base_run(const std::string& name) {
  RunConfig c;
  c.name = name;
  c.algorithm = Algorithm::kAspl;
  c.surrogates = {"A"};
  c.adversary = "A";
  c.seed = kRunSeed;
  return c;
}

std::vector<EvalReport> all_reports(const std::vector<RunResult>& runs) {
  std::vector<EvalReport> out;
  for (const auto& r : runs) out.insert(out.end(), r.reports.begin(), r.reports.end());
  return out;
}

bool no_failures(Outcome& o, const std::vector<RunResult>& runs) {
  bool ok = true;
  for (const auto& r : runs)
    for (const auto& f : r.failures) {
      o.note("subject failure: " + f);
      ok = false;
    }
  return ok;
}

double mean_of(const std::vector<EvalReport>& rs, const std::string& metric,
               const std::function<bool(const EvalReport&)>& pred) {
  auto v = mean_metric(rs, metric, pred);
  return v ? *v : std::nan("");
}

// ---------------------------------------------------------------- criteria

// 1. Budget invariant across the five algorithms, 100 random configs each.
Outcome budget_invariant(const fs::path& work) {
  Outcome o;
  const auto s = make_default_schedule();
  std::vector<Checkpoint> cks{tiny_checkpoint(1, "A"), tiny_checkpoint(2, "B"), tiny_checkpoint(3, "C")};
  Rng rng(20240);
  double worst_mem = -1, worst_png = -1;
  int checked = 0, violations = 0;
  const auto dir = work / "budget_png";
  for (auto algo : {Algorithm::kFsmg, Algorithm::kAspl, Algorithm::kTFsmg, Algorithm::kTAspl, Algorithm::kEAspl}) {
    for (int cfg = 0; cfg < 100; ++cfg) {
      AttackConfig attack;
      const int kind = cfg % 5;
      attack.eta = kind == 0 ? 0.0 : kind == 1 ? 1.0 / 255 : kind == 2 ? 0.05 : rng.uniform(0.0, 0.3);
      attack.alpha = rng.uniform(0.001, 0.1);
      attack.pgd_iters = rng.uniform_int(1, 6);
      attack.seed = rng.next_u64();
      attack.fixed_t = rng.uniform() < 0.5;
      attack.target_image = default_target_pattern({1, 3, 8, 8}, cfg);
      AsplConfig loop{rng.uniform_int(1, 3), rng.uniform_int(0, 2), rng.uniform_int(1, 3), rng.uniform_int(0, 2)};
      FinetuneConfig ft;
      ft.steps = rng.uniform_int(1, 3);
      ft.prior_count = rng.uniform_int(0, 2);
      ft.lambda_prior = ft.prior_count > 0 ? 1.0 : 0.0;
      ft.seed = rng.next_u64();
      const int n = rng.uniform_int(1, 3);
      std::vector<Image> x_a, x_db;
      for (int i = 0; i < n; ++i) {
        x_a.push_back(center_crop_resize(toy_image(cfg, 0, i), 8));
        Image img({1, 3, 8, 8});
        // Mix of saturated, 8-bit and arbitrary float pixels.
        for (auto& v : img.values()) {
          const double u = rng.uniform();
          v = u < 0.15 ? 0.0f : u < 0.3 ? 1.0f : u < 0.6 ? std::round(rng.uniform() * 255) / 255.0f
                                                          : static_cast<float>(rng.uniform());
        }
        x_db.push_back(img);
      }
      std::vector<Checkpoint> surrogates(cks.begin(), cks.begin() + (algo == Algorithm::kEAspl ? 2 + cfg % 2 : 1));
      auto set = defend(algo, surrogates, x_a, x_db, attack, ft, loop, s);
      const double mem = set.max_abs_delta();
      worst_mem = std::max(worst_mem, mem - attack.eta);
      if (mem > attack.eta) ++violations;
      fs::remove_all(dir);
      save_perturbation_set(set, dir);
      for (std::size_t i = 0; i < set.perturbed.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "perturbed_%03zu.png", i);
        const auto png = read_png(dir / name);
        double m = 0;
        for (std::size_t k = 0; k < png.size(); ++k) {
          m = std::max(m, std::abs(static_cast<double>(png[k]) - static_cast<double>(x_db[i][k])));
        }
        worst_png = std::max(worst_png, m - attack.eta);
        if (m > attack.eta + 1.0 / 255) ++violations;
      }
      ++checked;
    }
  }
  fs::remove_all(dir);
  o.note(std::to_string(checked) + " defenses; worst in-memory excess over eta " + num(worst_mem, 9) +
         ", worst PNG excess " + num(worst_png, 6) + " (limit " + num(1.0 / 255, 6) + ")");
  o.pass = o.check(violations == 0 && checked == 500, std::to_string(violations) + " violations");
  return o;
}

// 2. Input gradients of loss_cond and dreambooth_loss against central
// differences, 50 probes each, on a double-precision model.
Outcome gradient_check() {
  Outcome o;
  const auto s = make_default_schedule();
  auto fc = tiny_checkpoint(4, "g");
  DenoiserCheckpoint<double> ck{fc.name, fc.architecture, fc.vocabulary, {}, fc.meta};
  for (const auto& p : fc.parameters) ck.parameters.push_back(p.cast<double>());
  auto model = restore(ck);
  const std::size_t params = model.parameter_count();
  o.note("model parameters: " + std::to_string(params));
  Rng rng(77);
  std::vector<Tensor<double>> xs;
  for (int i = 0; i < 2; ++i) xs.push_back(center_crop_resize(toy_image(5, 1, i), 8).cast<double>());
  const auto x0 = stack(xs);
  auto prior = center_crop_resize(toy_image(5, 2, 0), 8).cast<double>();
  auto d = draw_noise<double>(rng, x0.shape(), s), dp = draw_noise<double>(rng, prior.shape(), s);
  auto cond = model.embed_prompt(instance_prompt()), pcond = model.embed_prompt(prior_prompt());
  std::vector<Tensor<double>> prior_list{prior};
  const auto prior_batch = stack(prior_list);

  using Loss = std::function<ad::Var<double>(const ad::Var<double>&)>;
  std::vector<std::pair<std::string, Loss>> losses{
      {"loss_cond", [&](const ad::Var<double>& x) { return loss_cond<double>(model, x, cond, d.timesteps, d.eps, s); }},
      {"dreambooth_loss", [&](const ad::Var<double>& x) {
         return dreambooth_loss_at<double>(model, x, cond, d, &prior_batch, pcond, &dp, 1.0, s).total;
       }}};
  bool ok = params < 10000;
  o.check(params < 10000, "parameter count below 1e4");
  for (const auto& [name, f] : losses) {
    auto xv = ad::Var<double>::leaf(x0);
    f(xv).backward();
    const auto grad = xv.grad();
    double worst = 0;
    Rng pick(derive_seed(99, name));
    for (int probe = 0; probe < 50; ++probe) {
      const std::size_t k = pick.uniform_int(0, static_cast<int>(x0.size()) - 1);
      auto up = x0, dn = x0;
      const double h = 1e-3;
      up[k] += h;
      dn[k] -= h;
      const double fd = (f(ad::Var<double>::constant(up)).item() - f(ad::Var<double>::constant(dn)).item()) / (2 * h);
      const double rel = std::abs(grad[k] - fd) / std::max({std::abs(grad[k]), std::abs(fd), 1e-8});
      worst = std::max(worst, rel);
    }
    ok &= o.check(worst <= 1e-3, name + ": worst relative error over 50 probes " + num(worst * 1e6, 3) + "e-6");
  }
  o.pass = ok;
  return o;
}

// 3. One-pixel linear denoiser: the loss gradient has a constant sign, so k
// PGD steps land on clamp(k alpha sign, +-eta).
struct LinearDenoiser {
  double w = 0.5;
  double b = 1000.0;
  ad::Var<float> operator()(const ad::Var<float>& xt, std::span<const int>, const ad::Var<float>&) const {
    return ad::add(ad::scale(xt, static_cast<float>(w)),
                   ad::Var<float>::constant(Tensor<float>(xt.shape(), static_cast<float>(b))));
  }
};

Outcome pgd_oracle() {
  Outcome o;
  const auto s = make_default_schedule();
  auto cond = ad::Var<float>::constant(Tensor<float>({1, 1, 1, 1}));
  bool exact = true;
  // Dyadic step and budget: every iterate is representable, so equality is exact.
  for (double x0 : {0.5, 0.25, 0.3}) {
    for (double w : {0.5, -0.5}) {
      for (int k : {1, 5, 20}) {
        AttackConfig c;
        c.alpha = 1.0 / 256;
        c.eta = 1.0 / 32;
        Tensor<float> x({1, 1, 1, 1}, static_cast<float>(x0));
        PgdStreams streams(3, 1, false, s);
        const double got = static_cast<double>(pgd_attack<float>(LinearDenoiser{w}, x, x, cond, c, k, s, streams)[0]) -
                           static_cast<double>(x[0]);
        const double want = std::clamp(k * c.alpha * (w > 0 ? 1.0 : -1.0), -c.eta, c.eta);
        if (got != want) {
          exact = false;
          o.note("x0=" + num(x0, 2) + " w=" + num(w, 1) + " k=" + std::to_string(k) + ": got " + num(got, 9) +
                 " want " + num(want, 9));
        }
      }
    }
  }
  o.check(exact, "dyadic alpha=1/256, eta=1/32: exact for k in {1,5,20}, 3 starting pixels, both signs");
  // Default alpha=0.005, eta=0.05 in float: within one float ulp of the pixel.
  double worst_ulps = 0;
  for (int k : {1, 5, 20}) {
    AttackConfig c;
    Tensor<float> x({1, 1, 1, 1}, 0.5f);
    PgdStreams streams(3, 1, false, s);
    const float got = pgd_attack<float>(LinearDenoiser{}, x, x, cond, c, k, s, streams)[0];
    const float want = static_cast<float>(0.5 + std::clamp(k * c.alpha, -c.eta, c.eta));
    worst_ulps = std::max(worst_ulps, std::abs(double(got) - double(want)) /
                                          double(std::nextafter(want, 2.0f) - want));
  }
  const bool close = worst_ulps <= 1.0;
  o.check(close, "default alpha=0.005, eta=0.05 in float: worst deviation " + num(worst_ulps, 1) + " ulp");
  o.pass = exact && close;
  return o;
}

// 4. Forward-process moments over 1e5 draws.
Outcome forward_statistics() {
  Outcome o;
  const auto s = make_default_schedule();
  const double x0 = 0.7;
  const int n = 100000;
  bool ok = true;
  for (int t : {1, s.T / 2, s.T}) {
    Rng rng(derive_seed(4, static_cast<std::uint64_t>(t)));
    Tensor<double> x({1, 1, 1, 1}, x0);
    double sum = 0, sq = 0;
    std::vector<double> v(n);
    for (int i = 0; i < n; ++i) {
      Tensor<double> eps({1, 1, 1, 1}, rng.normal());
      v[i] = forward_noise(x, t, eps, s)[0];
      sum += v[i];
    }
    const double mean = sum / n;
    for (double a : v) sq += (a - mean) * (a - mean);
    const double var = sq / (n - 1);
    const double ab = s.alpha_bar(t);
    const double want_mean = std::sqrt(ab) * x0, want_var = 1 - ab;
    const double se_mean = std::sqrt(want_var / n), se_var = want_var * std::sqrt(2.0 / (n - 1));
    const double zm = (mean - want_mean) / se_mean, zv = (var - want_var) / se_var;
    ok &= o.check(std::abs(zm) <= 3 && std::abs(zv) <= 3,
                  "t=" + std::to_string(t) + ": mean z=" + num(zm, 2) + ", variance z=" + num(zv, 2));
  }
  o.pass = ok;
  return o;
}

// 5. ASPL against the no-defense baseline, 5 subjects, both prompts.
std::vector<EvalReport> c5_reports;

Outcome defense_trend(Bench& b) {
  Outcome o;
  auto run = run_setting(base_run("c5_aspl"), b.splits, b.ctx, b.work / "runs");
  bool ok = no_failures(o, {run});
  c5_reports = run.reports;
  write_report(run.reports, b.work / "report_c5");
  for (const auto& p : prompt_order(run.reports)) {
    auto arm = [&](const std::string& a) {
      return [&, a](const EvalReport& r) { return r.arm == a && r.prompt == p; };
    };
    const double ism_d = mean_of(run.reports, "ism", arm("defended")), ism_b = mean_of(run.reports, "ism", arm("baseline"));
    const double fd_d = mean_of(run.reports, "fdfr", arm("defended")), fd_b = mean_of(run.reports, "fdfr", arm("baseline"));
    ok &= o.check(ism_d <= ism_b - 0.05, "'" + p + "' ISM defended " + num(ism_d) + " vs baseline " + num(ism_b));
    ok &= o.check(fd_d >= fd_b + 0.05, "'" + p + "' FDFR defended " + num(fd_d) + " vs baseline " + num(fd_b));
  }
  o.pass = ok && run.reports.size() == 4 * kSubjects;
  return o;
}

// 6. Budget sweep: ISM non-increasing, quality non-decreasing in eta.
Outcome budget_trend(Bench& b) {
  Outcome o;
  const std::vector<double> etas{0.01, 0.05, 0.15};
  auto runs = sweep_budget(base_run("c6"), etas, b.splits, b.ctx, b.work / "runs");
  bool ok = no_failures(o, runs);
  auto rs = all_reports(runs);
  write_report(rs, b.work / "report_c6");
  std::vector<double> ism, quality;
  for (double eta : etas) {
    auto pred = [&](const EvalReport& r) { return r.arm == "defended" && r.eta == eta; };
    ism.push_back(mean_of(rs, "ism", pred));
    quality.push_back(mean_of(rs, "quality", pred));
    o.note("eta " + num(eta, 2) + ": ISM " + num(ism.back()) + ", quality " + num(quality.back(), 3));
  }
  for (std::size_t i = 1; i < etas.size(); ++i) {
    ok &= o.check(ism[i] <= ism[i - 1], "ISM non-increasing " + num(etas[i - 1], 2) + " -> " + num(etas[i], 2));
    ok &= o.check(quality[i] >= quality[i - 1], "quality non-decreasing " + num(etas[i - 1], 2) + " -> " + num(etas[i], 2));
  }
  o.pass = ok;
  return o;
}

// 7. Uncontrolled mixing: ISM non-decreasing in k_clean; k=4 within noise of
// the baseline, i.e. within two standard errors of the paired difference.
Outcome mixing_trend(Bench& b) {
  Outcome o;
  const std::vector<int> ks{0, 1, 2, 3, 4};
  auto runs = sweep_mixing(base_run("c7"), ks, b.splits, b.ctx, b.work / "runs");
  bool ok = no_failures(o, runs);
  auto rs = all_reports(runs);
  write_report(rs, b.work / "report_c7");
  std::vector<double> ism;
  for (int k : ks) {
    ism.push_back(mean_of(rs, "ism", [&](const EvalReport& r) { return r.arm == "defended" && r.k_clean == k; }));
    o.note("k_clean " + std::to_string(k) + ": ISM " + num(ism.back()));
  }
  for (std::size_t i = 1; i < ks.size(); ++i) {
    ok &= o.check(ism[i] >= ism[i - 1], "ISM non-decreasing k=" + std::to_string(ks[i - 1]) + " -> " +
                                            std::to_string(ks[i]));
  }
  std::vector<double> diffs;
  for (const auto& r : rs) {
    if (r.arm != "defended" || r.k_clean != 4 || !r.ism) continue;
    for (const auto& base : rs) {
      if (base.arm == "baseline" && base.subject == r.subject && base.prompt == r.prompt && base.ism) {
        diffs.push_back(*r.ism - *base.ism);
      }
    }
  }
  double mean = 0, var = 0;
  for (double d : diffs) mean += d;
  mean /= std::max<std::size_t>(1, diffs.size());
  for (double d : diffs) var += (d - mean) * (d - mean);
  const double se = diffs.size() > 1 ? std::sqrt(var / (diffs.size() - 1) / diffs.size()) : 0.0;
  const double base_ism = mean_of(rs, "ism", [](const EvalReport& r) { return r.arm == "baseline"; });
  ok &= o.check(diffs.size() >= 2 * kSubjects - 2 && std::abs(mean) <= 2 * se,
                "k=4 vs baseline " + num(base_ism) + ": paired difference " + num(mean) + ", 2 SE " + num(2 * se) +
                    " over " + std::to_string(diffs.size()) + " pairs");
  o.pass = ok;
  return o;
}

// 8. Model mismatch: perturbations made on A, adversary finetunes B.
Outcome mismatch_transfer(Bench& b) {
  Outcome o;
  RunConfig a_only = base_run("c8_aspl_A");
  a_only.setting = Setting::kModelMismatch;
  a_only.adversary = "B";
  RunConfig ens = a_only;
  ens.name = "c8_easpl_AB";
  ens.algorithm = Algorithm::kEAspl;
  ens.surrogates = {"A", "B"};
  ens.include_baseline = false;
  std::vector<RunResult> runs{run_setting(a_only, b.splits, b.ctx, b.work / "runs"),
                              run_setting(ens, b.splits, b.ctx, b.work / "runs")};
  bool ok = no_failures(o, runs);
  auto rs = all_reports(runs);
  write_report(rs, b.work / "report_c8");
  const double base = mean_of(rs, "ism", [](const EvalReport& r) { return r.arm == "baseline"; });
  const double aspl = mean_of(rs, "ism", [](const EvalReport& r) { return r.run == "c8_aspl_A" && r.arm == "defended"; });
  const double easpl = mean_of(rs, "ism", [](const EvalReport& r) { return r.run == "c8_easpl_AB"; });
  ok &= o.check(aspl <= base - 0.03, "ASPL(A) on adversary B: ISM " + num(aspl) + " vs baseline " + num(base));
  ok &= o.check(easpl <= aspl + 0.01, "E-ASPL(A,B) on adversary B: ISM " + num(easpl) + " vs ASPL(A) " + num(aspl));
  o.pass = ok;
  return o;
}

// 9. Metric-layer oracles.
std::vector<double> sample_aggd(Rng& rng, double alpha, double sigma_l, double sigma_r, int n) {
  const double k = std::sqrt(std::tgamma(1 / alpha) / std::tgamma(3 / alpha));
  const double bl = sigma_l * k, br = sigma_r * k;
  std::vector<double> out;
  for (int i = 0; i < n; ++i) {
    const double mag = std::pow(rng.gamma(1 / alpha), 1 / alpha);
    out.push_back(rng.uniform() < bl / (bl + br) ? -bl * mag : br * mag);
  }
  return out;
}

Outcome metric_oracles(Bench& b) {
  Outcome o;
  bool ok = true;
  Rng rng(909);
  for (auto [a, l, r] : {std::tuple{0.8, 0.5, 1.0}, std::tuple{1.5, 1.0, 1.0}, std::tuple{2.5, 0.3, 0.6}}) {
    auto p = aggd_fit(sample_aggd(rng, a, l, r, 200000));
    const double err = std::max({std::abs(p.alpha / a - 1), std::abs(p.sigma_l / l - 1), std::abs(p.sigma_r / r - 1)});
    ok &= o.check(err <= 0.05, "AGGD (" + num(a, 1) + ", " + num(l, 1) + ", " + num(r, 1) + ") recovered as (" +
                                   num(p.alpha, 3) + ", " + num(p.sigma_l, 3) + ", " + num(p.sigma_r, 3) + ")");
  }

  std::vector<Image> clean;
  for (const auto& s : b.splits) clean.insert(clean.end(), s.protect.begin(), s.protect.end());
  auto noisy = clean;
  for (auto& img : noisy)
    for (auto& v : img.values()) v = std::clamp(v + static_cast<float>(rng.normal(0, 0.2)), 0.0f, 1.0f);
  const double q_clean = quality_score(clean, b.ctx.pristine), q_noisy = quality_score(noisy, b.ctx.pristine);
  ok &= o.check(clean.size() == 20 && q_noisy > q_clean, "quality on 20 clean images " + num(q_clean, 3) +
                                                              ", with sigma=0.2 noise " + num(q_noisy, 3));

  double worst_self = 2, set_min = 2;
  for (const auto& s : b.splits) {
    for (const auto& img : s.protect) worst_self = std::min(worst_self, ism_score({img}, {img}, b.ctx.embedder, 0.0).value_or(-1));
    set_min = std::min(set_min, ism_score(s.protect, s.protect, b.ctx.embedder, 0.0).value_or(-1));
  }
  ok &= o.check(worst_self >= 0.99, "self-referenced ISM, worst single image " + num(worst_self, 6));
  o.note("set-level self-referenced ISM, worst subject " + num(set_min, 4));

  std::vector<Image> probe;
  for (const auto& s : b.splits) {
    const auto all = s.all_clean();
    probe.insert(probe.end(), all.begin(), all.end());
  }
  for (const auto& img : noisy) probe.push_back(img);
  Rng junk(5);
  for (int i = 0; i < 20; ++i) probe.push_back(reject_example(junk, {1, 3, 32, 32}));
  const auto conf = b.ctx.embedder.score(probe).confidence;
  double prev = -1;
  bool mono = true;
  std::ostringstream grid;
  for (int i = 1; i <= 19; ++i) {
    const double tau = i * 0.05, f = fdfr_from_confidence(conf, tau);
    mono &= f >= prev;
    prev = f;
    if (i % 6 == 1) grid << " tau " << num(tau, 2) << ": " << num(f, 3);
  }
  ok &= o.check(mono, "FDFR non-decreasing over tau grid 0.05..0.95;" + grid.str());
  o.pass = ok;
  return o;
}

// 10. Criterion 5 again with the artifact cache disabled.
Outcome determinism(Bench& b) {
  Outcome o;
  if (c5_reports.empty()) {
    o.note("criterion 5 did not run");
    return o;
  }
  ExperimentContext fresh = b.ctx;
  fresh.cache = ArtifactCache();
  // A separate output root: artifact paths are stored relative to it.
  auto run = run_setting(base_run("c5_aspl"), b.splits, fresh, b.work / "runs_rerun");
  bool same = run.reports.size() == c5_reports.size();
  for (std::size_t i = 0; same && i < run.reports.size(); ++i) {
    same = json(run.reports[i]).dump() == json(c5_reports[i]).dump();
  }
  o.pass = o.check(same, std::to_string(run.reports.size()) + " reports recomputed without cache, byte-identical JSON");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cloakforge acceptance suite"};
  fs::path work = "acceptance_work", models = "models";
  std::string only;
  app.add_option("--work", work, "scratch directory (dataset, cache, reports)");
  app.add_option("--models", models, "directory with A.ckpt/B.ckpt or their pretraining configs");
  app.add_option("--only", only, "comma-separated criterion numbers");
  CLI11_PARSE(app, argc, argv);
  std::set<int> selected;
  std::stringstream ss(only);
  for (std::string tok; std::getline(ss, tok, ',');) selected.insert(std::stoi(tok));
  fs::create_directories(work);

  struct Criterion {
    int id;
    std::string name;
    std::function<Outcome()> run;
  };
  auto B = [&]() -> Bench& { return bench(work, models); };
  std::vector<Criterion> criteria{
      {1, "budget invariant", [&] { return budget_invariant(work); }},
      {2, "gradient correctness", [] { return gradient_check(); }},
      {3, "PGD linear oracle", [] { return pgd_oracle(); }},
      {4, "forward-process statistics", [] { return forward_statistics(); }},
      {5, "end-to-end defense trend", [&] { return defense_trend(B()); }},
      {6, "budget monotonicity", [&] { return budget_trend(B()); }},
      {7, "uncontrolled-mixing monotonicity", [&] { return mixing_trend(B()); }},
      {8, "mismatch transfer", [&] { return mismatch_transfer(B()); }},
      {9, "metric oracles", [&] { return metric_oracles(B()); }},
      {10, "determinism", [&] { return determinism(B()); }},
  };
  // Determinism compares against the reports criterion 5 produced.
  if (selected.count(10)) selected.insert(5);
  int failed = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.note(std::string("error: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (const auto& d : o.details) std::cout << "    " << d << '\n';
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.name << ") " << num(secs, 1)
              << "s" << std::endl;
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
