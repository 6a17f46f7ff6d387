// cloakforge <subcommand> --config <file> --out <dir> [--seed N]
//
// The config is one JSON document; each subcommand reads the sections it
// needs. Relative paths in the config resolve against the config's folder.
// On failure a single line {"error": {...}} goes to stderr.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "cloakforge/experiment.hpp"
#include "cloakforge/pretrain.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cloakforge;

namespace {

struct CliError : std::runtime_error {
  CliError(std::string code, const std::string& what) : std::runtime_error(what), code(std::move(code)) {}
  std::string code;
};

struct Invocation {
  std::string subcommand;
  json config;
  fs::path base;  // folder of the config file
  fs::path out;
  std::optional<std::uint64_t> seed;

  fs::path resolve(const std::string& p) const { return fs::path(p).is_absolute() ? fs::path(p) : base / p; }

  const json& section(const std::string& name) const {
    if (!config.contains(name)) throw CliError("config", "missing config section '" + name + "'");
    return config.at(name);
  }

  std::uint64_t seed_or(std::uint64_t fallback) const { return seed.value_or(config.value("seed", fallback)); }
};

std::vector<SubjectSplit> load_splits(const Invocation& inv) {
  const auto& d = inv.section("dataset");
  const auto root = inv.resolve(d.at("path").get<std::string>());
  auto result = ingest_dataset(root, {32, 3, d.value("per_split", 4)});
  for (const auto& w : result.warnings) std::clog << "warning: " << w << '\n';
  if (result.subjects.empty()) throw CliError("data", "no usable subjects in " + root.string());
  const int limit = d.value("max_subjects", 0);
  if (limit > 0 && static_cast<int>(result.subjects.size()) > limit) result.subjects.resize(limit);
  return result.subjects;
}

std::map<std::string, Checkpoint> load_checkpoints(const Invocation& inv) {
  std::map<std::string, Checkpoint> out;
  for (const auto& [name, path] : inv.section("checkpoints").items()) {
    const auto file = inv.resolve(path.get<std::string>());
    if (!fs::exists(file)) throw CliError("checkpoint", "checkpoint '" + name + "' not found at " + file.string());
    out[name] = load_checkpoint<float>(file);
  }
  return out;
}

// Loads the recognizer and quality model, training and saving them on first use.
Evaluator load_evaluator(const Invocation& inv) {
  const json ev = inv.config.value("evaluator", json::object());
  const auto emb_path = inv.resolve(ev.value("embedder", "evaluator/embedder.bin"));
  const auto pri_path = inv.resolve(ev.value("pristine", "evaluator/pristine.json"));
  if (fs::exists(emb_path) && fs::exists(pri_path)) return {load_embedder(emb_path), load_pristine(pri_path)};
  const auto& d = inv.section("dataset");
  const auto subjects = labeled_subjects(inv.resolve(d.at("path").get<std::string>()));
  if (subjects.names.empty()) throw CliError("data", "evaluator needs the dataset to train on");
  std::clog << "training evaluator on " << subjects.names.size() << " subjects\n";
  auto built = build_evaluator(subjects, inv.config.value("background", BackgroundConfig{}),
                               ev.value("training", EmbedderConfig{}));
  save_embedder(built.embedder, emb_path);
  save_pristine(built.pristine, pri_path);
  return built;
}

ExperimentContext make_context(const Invocation& inv, bool with_evaluator) {
  ExperimentContext ctx;
  ctx.schedule = make_default_schedule(inv.config.value("T", 250));
  ctx.checkpoints = load_checkpoints(inv);
  if (with_evaluator) {
    auto ev = load_evaluator(inv);
    ctx.embedder = std::move(ev.embedder);
    ctx.pristine = std::move(ev.pristine);
  }
  if (inv.config.contains("cache")) ctx.cache = ArtifactCache(inv.resolve(inv.config.at("cache").get<std::string>()));
  ctx.log = &std::clog;
  return ctx;
}

RunConfig run_config(const Invocation& inv) {
  RunConfig cfg = inv.section("run").get<RunConfig>();
  if (inv.seed) cfg.seed = *inv.seed;
  return cfg;
}

std::vector<Image> read_png_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw CliError("data", "not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && is_png(e.path())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Image> out;
  for (const auto& f : files) out.push_back(clamp01(center_crop_resize(to_channels(read_png(f), 3), 32)));
  if (out.empty()) throw CliError("data", "no PNG images in " + dir.string());
  return out;
}

void finish_report(const std::vector<EvalReport>& reports, const std::vector<std::string>& failures,
                   const fs::path& out) {
  if (reports.empty()) throw CliError("run", "every subject failed; first: " + (failures.empty() ? "?" : failures[0]));
  write_report(reports, out);
  render_plots(reports, out);
  if (!failures.empty()) {
    std::ofstream(out / "failures.txt") << [&] {
      std::string s;
      for (const auto& f : failures) s += f + "\n";
      return s;
    }();
  }
  std::cout << "wrote " << reports.size() << " reports to " << out.string() << '\n';
}

void cmd_make_dataset(const Invocation& inv) {
  const auto& d = inv.section("dataset");
  const int n = make_toy_dataset(d.value("subjects", 10), d.value("images_per_subject", 12),
                                 inv.seed.value_or(d.value("seed", std::uint64_t{0})), inv.out);
  std::cout << "wrote " << n << " images to " << inv.out.string() << '\n';
}

void cmd_pretrain(const Invocation& inv) {
  const auto& p = inv.section("pretrain");
  PretrainConfig cfg = p.get<PretrainConfig>();
  if (inv.seed) cfg.seed = *inv.seed;
  const std::string name = p.value("name", "A");
  const auto data = background_identities(p.value("background", inv.config.value("background", BackgroundConfig{})));
  auto result = pretrain_denoiser(data, cfg, make_default_schedule(inv.config.value("T", 250)), name);
  fs::create_directories(inv.out);
  save_checkpoint(result.checkpoint, inv.out / (name + ".ckpt"));
  std::ofstream log(inv.out / (name + "_loss.csv"));
  log << "step,loss\n";
  for (std::size_t i = 0; i < result.losses.size(); ++i) log << i << ',' << result.losses[i] << '\n';
  std::cout << "wrote " << (inv.out / (name + ".ckpt")).string() << '\n';
}

void cmd_cloak(const Invocation& inv) {
  auto ctx = make_context(inv, false);
  const RunConfig cfg = run_config(inv);
  std::vector<Checkpoint> surrogates;
  for (const auto& s : cfg.surrogates) surrogates.push_back(ctx.checkpoint(s));
  int failed = 0;
  for (const auto& split : load_splits(inv)) {
    try {
      const std::uint64_t subject_seed = derive_seed(cfg.seed, split.subject);
      AttackConfig attack = cfg.attack;
      attack.seed = derive_seed(subject_seed, "defense");
      if (is_targeted(cfg.algorithm) && !attack.target_image) {
        attack.target_image = default_target_pattern(split.protect.front().shape(), cfg.seed);
      }
      FinetuneConfig ft = cfg.defender_finetune;
      ft.instance_prompt = attack.surrogate_prompt;
      ft.prior_prompt = attack.surrogate_prompt.without_identifier();
      ft.seed = derive_seed(subject_seed, "surrogate");
      auto set = cached_defend(ctx, cfg.algorithm, surrogates, split.reference, split.protect, attack, ft, cfg.aspl);
      save_perturbation_set(set, inv.out / split.subject);
      std::cout << split.subject << " max|delta| " << set.max_abs_delta() << '\n';
    } catch (const std::exception& e) {
      ++failed;
      std::clog << "subject " << split.subject << " failed: " << e.what() << '\n';
    }
  }
  if (failed) throw CliError("run", std::to_string(failed) + " subject(s) failed");
}

void cmd_finetune(const Invocation& inv) {
  auto ctx = make_context(inv, false);
  const auto& f = inv.section("finetune");
  FinetuneConfig cfg = f.get<FinetuneConfig>();
  if (inv.seed) cfg.seed = *inv.seed;
  const auto images = read_png_dir(inv.resolve(f.at("images").get<std::string>()));
  auto result = finetune_dreambooth(ctx.checkpoint(f.value("checkpoint", "A")), images, cfg, ctx.schedule,
                                    ctx.prior_cache());
  fs::create_directories(inv.out);
  save_checkpoint(result.checkpoint, inv.out / "finetuned.ckpt");
  write_loss_log(inv.out / "loss.csv", result.log);
  std::cout << "wrote " << (inv.out / "finetuned.ckpt").string() << '\n';
}

void cmd_generate(const Invocation& inv) {
  const auto& g = inv.section("generate");
  const auto ck = load_checkpoint<float>(inv.resolve(g.at("checkpoint").get<std::string>()));
  auto model = restore(ck);
  const auto schedule = make_default_schedule(inv.config.value("T", 250));
  const auto prompts = g.value("prompts", std::vector<PromptSpec>{instance_prompt(), dslr_prompt()});
  const int count = g.value("count", 30);
  const std::uint64_t seed = inv.seed_or(0);
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    auto imgs = ancestral_sample<float>(model, model.embed_prompt(prompts[p]), schedule,
                                        derive_seed(seed, prompts[p].render()), count, model.image_shape());
    const auto dir = inv.out / ("prompt_" + std::to_string(p));
    json list = json::array();
    detail::write_images(dir, "img", imgs, inv.out, list);
    std::ofstream(dir / "prompt.txt") << prompts[p].render() << '\n';
    std::cout << prompts[p].render() << ": " << imgs.size() << " images in " << dir.string() << '\n';
  }
}

void cmd_evaluate(const Invocation& inv) {
  const auto ev = load_evaluator(inv);
  const auto& e = inv.section("evaluate");
  const auto generated = read_png_dir(inv.resolve(e.at("generated").get<std::string>()));
  const auto reference = read_png_dir(inv.resolve(e.at("reference").get<std::string>()));
  const double tau = e.value("tau", 0.5);
  const auto gen = ev.embedder.score(generated);
  const auto ref = ev.embedder.score(reference);
  const auto ism = ism_from_embeddings(gen.embeddings, gen.confidence, mean_direction(ref.embeddings), tau);
  json result{{"n_images", generated.size()},
              {"fdfr", fdfr_from_confidence(gen.confidence, tau)},
              {"ism", ism ? json(*ism) : json(nullptr)},
              {"quality", quality_score(generated, ev.pristine)},
              {"tau", tau}};
  fs::create_directories(inv.out);
  std::ofstream(inv.out / "evaluation.json") << result.dump(2) << '\n';
  std::cout << result.dump() << '\n';
}

void cmd_run_setting(const Invocation& inv) {
  auto ctx = make_context(inv, true);
  auto result = run_setting(run_config(inv), load_splits(inv), ctx, inv.out);
  finish_report(result.reports, result.failures, inv.out);
}

void cmd_sweep(const Invocation& inv) {
  auto ctx = make_context(inv, true);
  const auto& s = inv.section("sweep");
  const auto splits = load_splits(inv);
  std::vector<RunResult> runs;
  if (s.contains("k_clean")) {
    runs = sweep_mixing(run_config(inv), s.at("k_clean").get<std::vector<int>>(), splits, ctx, inv.out);
  } else {
    runs = sweep_budget(run_config(inv), s.value("etas", canonical_budgets()), splits, ctx, inv.out);
  }
  std::vector<EvalReport> reports;
  std::vector<std::string> failures;
  for (auto& r : runs) {
    reports.insert(reports.end(), r.reports.begin(), r.reports.end());
    failures.insert(failures.end(), r.failures.begin(), r.failures.end());
  }
  finish_report(reports, failures, inv.out);
}

// Rebuilds the aggregate table and plots from persisted records only.
void cmd_report(const Invocation& inv) {
  const json r = inv.config.value("report", json::object());
  std::vector<EvalReport> reports;
  std::vector<fs::path> inputs;
  for (const auto& p : r.value("inputs", std::vector<std::string>{})) inputs.push_back(inv.resolve(p));
  if (inputs.empty()) inputs.push_back(inv.out);
  for (const auto& in : inputs) {
    if (!fs::is_directory(in / "records")) throw CliError("data", "no records/ folder in " + in.string());
    auto part = load_reports(in);
    for (auto& rep : part) {
      // Artifact paths are relative to the run folder they came from.
      if (fs::weakly_canonical(in) != fs::weakly_canonical(inv.out)) {
        for (const char* key : {"clean", "perturbed"}) {
          if (!rep.artifacts.contains(key)) continue;
          for (auto& f : rep.artifacts[key]) f = fs::relative(in / f.get<std::string>(), inv.out).generic_string();
        }
      }
      reports.push_back(std::move(rep));
    }
  }
  if (reports.empty()) throw CliError("data", "no records to report");
  fs::create_directories(inv.out);
  write_report(reports, inv.out);
  const auto plots = render_plots(reports, inv.out);
  std::cout << "wrote " << reports.size() << " records and " << plots.size() << " plots to " << inv.out.string()
            << '\n';
}

void emit_error(const std::string& subcommand, const std::string& code, const std::string& message) {
  std::cerr << json{{"error", {{"subcommand", subcommand}, {"code", code}, {"message", message}}}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, void (*)(const Invocation&)>> commands{
      {"make-dataset", cmd_make_dataset}, {"pretrain", cmd_pretrain},       {"cloak", cmd_cloak},
      {"finetune", cmd_finetune},         {"generate", cmd_generate},       {"evaluate", cmd_evaluate},
      {"run-setting", cmd_run_setting},   {"sweep", cmd_sweep},             {"report", cmd_report}};

  CLI::App app{"cloakforge: adversarial protection against diffusion personalization"};
  app.require_subcommand(1);
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  for (const auto& [name, fn] : commands) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "JSON config file")->required();
    sub->add_option("--out", out_dir, "output directory")->required();
    sub->add_option("--seed", seed, "overrides the config's primary seed");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    emit_error(app.get_subcommands().empty() ? "" : app.get_subcommands().front()->get_name(), "usage", e.what());
    return 2;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  Invocation inv{name, {}, {}, out_dir, seed};
  try {
    std::ifstream in(config_path);
    if (!in) throw CliError("config", "cannot open config " + config_path);
    try {
      inv.config = json::parse(in);
    } catch (const json::exception& e) {
      throw CliError("config", std::string("malformed config: ") + e.what());
    }
    inv.base = fs::absolute(config_path).parent_path();
    fs::create_directories(inv.out);
    for (const auto& [cmd, fn] : commands) {
      if (cmd == name) fn(inv);
    }
  } catch (const CliError& e) {
    emit_error(name, e.code, e.what());
    return e.code == "config" ? 2 : 1;
  } catch (const json::exception& e) {
    emit_error(name, "config", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    emit_error(name, "invalid", e.what());
    return 2;
  } catch (const std::exception& e) {
    emit_error(name, "runtime", e.what());
    return 1;
  }
  return 0;
}
