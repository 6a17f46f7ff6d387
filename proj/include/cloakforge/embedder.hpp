#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cloakforge/autodiff.hpp"
#include "cloakforge/image_io.hpp"
#include "cloakforge/optim.hpp"
#include "cloakforge/rng.hpp"

namespace cloakforge {

// Labeled training data: images[k] all belong to class names[k].
struct LabeledImages {
  std::vector<std::string> names;
  std::vector<std::vector<Image>> images;
};

struct EmbedderConfig {
  int steps = 1500;
  int batch_size = 32;
  double learning_rate = 2e-3;
  int embed_dim = 32;
  double holdout_fraction = 0.25;
  double min_accuracy = 0.9;
  // Share of each batch drawn from the synthetic "no subject" class.
  double reject_fraction = 0.2;
  double augment_noise = 0.03;
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const EmbedderConfig& c) {
  j = nlohmann::json{{"steps", c.steps},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"embed_dim", c.embed_dim},
                     {"holdout_fraction", c.holdout_fraction},
                     {"min_accuracy", c.min_accuracy},
                     {"reject_fraction", c.reject_fraction},
                     {"augment_noise", c.augment_noise},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, EmbedderConfig& c) {
  EmbedderConfig d;
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.holdout_fraction = j.value("holdout_fraction", d.holdout_fraction);
  c.min_accuracy = j.value("min_accuracy", d.min_accuracy);
  c.reject_fraction = j.value("reject_fraction", d.reject_fraction);
  c.augment_noise = j.value("augment_noise", d.augment_noise);
  c.seed = j.value("seed", d.seed);
}

class EmbedderAccuracyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Small CNN classifier over the subject identities plus one extra "no
// subject" class. The penultimate layer, l2-normalized, is the identity
// embedding; confidence is the largest softmax mass on a real identity.
class IdentityEmbedder {
 public:
  IdentityEmbedder() = default;

  IdentityEmbedder(std::vector<std::string> names, int channels, int embed_dim, std::uint64_t seed)
      : names_(std::move(names)), channels_(channels), embed_dim_(embed_dim) {
    Rng rng(seed);
    auto gauss = [&](Shape s, double fan_in) {
      Tensor<float> t(s);
      const double std = std::sqrt(2.0 / fan_in);
      for (auto& v : t.values()) v = static_cast<float>(rng.normal() * std);
      return ad::Var<float>::leaf(std::move(t));
    };
    auto zeros = [](Shape s) { return ad::Var<float>::leaf(Tensor<float>(s)); };
    const int k = classes();
    params_ = {gauss({16, channels, 3, 3}, channels * 9), zeros({1, 16, 1, 1}),
               gauss({32, 16, 3, 3}, 16 * 9),             zeros({1, 32, 1, 1}),
               gauss({64, 32, 3, 3}, 32 * 9),             zeros({1, 64, 1, 1}),
               gauss({embed_dim, 64, 1, 1}, 64),          zeros({1, embed_dim, 1, 1}),
               gauss({k, embed_dim, 1, 1}, embed_dim),    zeros({1, k, 1, 1})};
  }

  const std::vector<std::string>& names() const { return names_; }
  int identities() const { return static_cast<int>(names_.size()); }
  int classes() const { return identities() + 1; }
  int reject_class() const { return identities(); }
  int channels() const { return channels_; }
  int embed_dim() const { return embed_dim_; }
  std::vector<ad::Var<float>>& parameters() { return params_; }
  const std::vector<ad::Var<float>>& parameters() const { return params_; }

  struct Forward {
    ad::Var<float> features;
    ad::Var<float> logits;
  };

  Forward forward(const ad::Var<float>& x) const {
    using namespace ad;
    const auto& P = params_;
    ConvGeometry same{3, 1, 1};
    auto h = avgpool2(silu(conv2d(x, P[0], P[1], same)));
    h = avgpool2(silu(conv2d(h, P[2], P[3], same)));
    h = global_avg_pool(silu(conv2d(h, P[4], P[5], same)));
    auto f = linear(h, P[6], P[7]);
    return {f, linear(silu(f), P[8], P[9])};
  }

  struct Scores {
    std::vector<std::vector<double>> embeddings;  // unit length
    std::vector<double> confidence;
    std::vector<int> predicted;  // argmax over all classes, reject included
  };

  Scores score(const std::vector<Image>& images, int batch = 64) const {
    ad::NoGradGuard guard;
    Scores out;
    for (std::size_t start = 0; start < images.size(); start += batch) {
      const std::size_t end = std::min(images.size(), start + batch);
      std::vector<Image> chunk(images.begin() + start, images.begin() + end);
      for (auto& img : chunk) img = to_channels(img, channels_);
      auto fw = forward(ad::Var<float>::constant(stack(chunk)));
      const int n = static_cast<int>(chunk.size());
      const int d = embed_dim_, k = classes();
      for (int i = 0; i < n; ++i) {
        std::vector<double> e(d);
        double norm = 0;
        for (int j = 0; j < d; ++j) {
          e[j] = fw.features.value()[static_cast<std::size_t>(i) * d + j];
          norm += e[j] * e[j];
        }
        norm = std::sqrt(norm);
        for (auto& v : e) v = norm > 0 ? v / norm : 0.0;
        if (norm == 0) e[0] = 1.0;
        out.embeddings.push_back(std::move(e));
        const float* z = fw.logits.value().data() + static_cast<std::size_t>(i) * k;
        const double mx = *std::max_element(z, z + k);
        double sum = 0, best = 0;
        int arg = 0;
        for (int c = 0; c < k; ++c) {
          const double p = std::exp(z[c] - mx);
          sum += p;
          if (z[c] > z[arg]) arg = c;
          if (c < identities()) best = std::max(best, p);
        }
        out.confidence.push_back(best / sum);
        out.predicted.push_back(arg);
      }
    }
    return out;
  }

  std::vector<double> embed(const Image& img) const { return score({img}).embeddings.front(); }
  double confidence(const Image& img) const { return score({img}).confidence.front(); }

  double holdout_accuracy = 0;

 private:
  std::vector<std::string> names_;
  int channels_ = 3;
  int embed_dim_ = 32;
  std::vector<ad::Var<float>> params_;
};

// Out-of-distribution examples for the reject class: white noise, smooth
// random fields and flat colors.
inline Image reject_example(Rng& rng, Shape one) {
  Image img(one);
  const int kind = rng.uniform_int(0, 2);
  if (kind == 0) {
    const double mean = rng.uniform(0.2, 0.8), sd = rng.uniform(0.1, 0.4);
    for (auto& v : img.values()) v = static_cast<float>(std::clamp(rng.normal(mean, sd), 0.0, 1.0));
  } else if (kind == 1) {
    const int g = 4;
    std::vector<double> grid(static_cast<std::size_t>(one.c) * g * g);
    for (auto& v : grid) v = rng.uniform();
    for (int c = 0; c < one.c; ++c)
      for (int y = 0; y < one.h; ++y)
        for (int x = 0; x < one.w; ++x) {
          const double gy = y * (g - 1.0) / (one.h - 1), gx = x * (g - 1.0) / (one.w - 1);
          const int y0 = std::min(static_cast<int>(gy), g - 2), x0 = std::min(static_cast<int>(gx), g - 2);
          const double fy = gy - y0, fx = gx - x0;
          auto at = [&](int yy, int xx) { return grid[(static_cast<std::size_t>(c) * g + yy) * g + xx]; };
          const double v = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                           fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
          img.at(0, c, y, x) = static_cast<float>(v);
        }
  } else {
    for (int c = 0; c < one.c; ++c) {
      const float v = static_cast<float>(rng.uniform());
      for (int y = 0; y < one.h; ++y)
        for (int x = 0; x < one.w; ++x) img.at(0, c, y, x) = v;
    }
  }
  return img;
}

inline IdentityEmbedder train_identity_embedder(const LabeledImages& data, const EmbedderConfig& config = {}) {
  const int k = static_cast<int>(data.names.size());
  if (k < 2 || data.images.size() != data.names.size()) {
    throw std::invalid_argument("identity embedder needs at least 2 labeled identities");
  }
  for (const auto& imgs : data.images) {
    if (imgs.size() < 8) throw std::invalid_argument("identity embedder needs at least 8 images per identity");
  }
  const Shape img_shape = data.images.front().front().shape();
  Rng rng(config.seed);
  IdentityEmbedder model(data.names, img_shape.c, config.embed_dim, derive_seed(config.seed, "init"));

  std::vector<std::pair<const Image*, int>> train, holdout;
  for (int c = 0; c < k; ++c) {
    const auto& imgs = data.images[c];
    const int n_hold = std::max(1, static_cast<int>(std::lround(imgs.size() * config.holdout_fraction)));
    const int n_train = static_cast<int>(imgs.size()) - n_hold;
    for (int i = 0; i < static_cast<int>(imgs.size()); ++i) {
      (i < n_train ? train : holdout).emplace_back(&imgs[i], c);
    }
  }

  Optimizer<float> opt(OptimizerKind::kAdam, config.learning_rate);
  const Shape one{1, img_shape.c, img_shape.h, img_shape.w};
  const int n_reject = static_cast<int>(std::lround(config.batch_size * config.reject_fraction));
  for (int step = 0; step < config.steps; ++step) {
    std::vector<Image> batch;
    std::vector<int> labels;
    for (int i = 0; i < config.batch_size; ++i) {
      if (i < n_reject) {
        batch.push_back(reject_example(rng, one));
        labels.push_back(k);
        continue;
      }
      const auto& [img, label] = train[rng.uniform_int(0, static_cast<int>(train.size()) - 1)];
      Image aug = *img;
      const double sd = rng.uniform(0.0, config.augment_noise);
      for (auto& v : aug.values()) v = std::clamp(v + static_cast<float>(rng.normal(0.0, sd)), 0.0f, 1.0f);
      batch.push_back(std::move(aug));
      labels.push_back(label);
    }
    auto fw = model.forward(ad::Var<float>::constant(stack(batch)));
    auto loss = ad::cross_entropy(fw.logits, labels);
    for (auto& p : model.parameters()) p.zero_grad();
    loss.backward();
    opt.step(model.parameters());
  }
  for (auto& p : model.parameters()) p.zero_grad();

  std::vector<Image> hold_imgs;
  for (const auto& [img, label] : holdout) hold_imgs.push_back(*img);
  auto scores = model.score(hold_imgs);
  int correct = 0;
  for (std::size_t i = 0; i < holdout.size(); ++i) correct += scores.predicted[i] == holdout[i].second;
  model.holdout_accuracy = holdout.empty() ? 1.0 : static_cast<double>(correct) / holdout.size();
  if (model.holdout_accuracy < config.min_accuracy) {
    throw EmbedderAccuracyError("identity embedder reached holdout accuracy " +
                                std::to_string(model.holdout_accuracy) + " < " + std::to_string(config.min_accuracy) +
                                "; the dataset is too hard or too small");
  }
  return model;
}

inline constexpr char kEmbedderMagic[8] = {'C', 'L', 'O', 'A', 'K', 'E', 'M', 'B'};
inline constexpr std::uint32_t kEmbedderVersion = 1;

inline void save_embedder(const IdentityEmbedder& m, const std::filesystem::path& path) {
  nlohmann::json header{{"names", m.names()},
                        {"channels", m.channels()},
                        {"embed_dim", m.embed_dim()},
                        {"holdout_accuracy", m.holdout_accuracy}};
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& p : m.parameters()) {
    const auto s = p.shape();
    shapes.push_back({s.n, s.c, s.h, s.w});
  }
  header["shapes"] = shapes;
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write embedder " + path.string());
  out.write(kEmbedderMagic, 8);
  const std::uint32_t version = kEmbedderVersion;
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(len));
  for (const auto& p : m.parameters()) {
    out.write(reinterpret_cast<const char*>(p.value().data()),
              static_cast<std::streamsize>(p.value().size() * sizeof(float)));
  }
}

inline IdentityEmbedder load_embedder(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open embedder " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || !std::equal(magic, magic + 8, kEmbedderMagic)) {
    throw std::runtime_error(path.string() + " is not an embedder file");
  }
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (version != kEmbedderVersion) throw std::runtime_error("unsupported embedder version " + std::to_string(version));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  auto header = nlohmann::json::parse(text);
  IdentityEmbedder m(header.at("names").get<std::vector<std::string>>(), header.at("channels").get<int>(),
                     header.at("embed_dim").get<int>(), 0);
  m.holdout_accuracy = header.value("holdout_accuracy", 0.0);
  for (auto& p : m.parameters()) {
    in.read(reinterpret_cast<char*>(p.mutable_value().data()),
            static_cast<std::streamsize>(p.value().size() * sizeof(float)));
  }
  if (!in) throw std::runtime_error("truncated embedder file " + path.string());
  return m;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return aa > 0 && bb > 0 ? ab / std::sqrt(aa * bb) : 0.0;
}

// Normalized mean of unit embeddings.
inline std::vector<double> mean_direction(const std::vector<std::vector<double>>& embeddings) {
  if (embeddings.empty()) throw std::invalid_argument("mean_direction: no embeddings");
  std::vector<double> m(embeddings.front().size(), 0.0);
  for (const auto& e : embeddings)
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += e[i];
  double norm = 0;
  for (double v : m) norm += v * v;
  norm = std::sqrt(norm);
  if (norm > 0)
    for (auto& v : m) v /= norm;
  return m;
}

// Mean cosine similarity of gated-in embeddings to the reference direction.
// Empty when nothing passes the gate.
inline std::optional<double> ism_from_embeddings(const std::vector<std::vector<double>>& embeddings,
                                                 const std::vector<double>& confidence,
                                                 const std::vector<double>& reference_direction, double tau) {
  double acc = 0;
  int count = 0;
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    if (confidence[i] < tau) continue;
    acc += cosine(embeddings[i], reference_direction);
    ++count;
  }
  if (count == 0) return std::nullopt;
  return acc / count;
}

inline std::optional<double> ism_score(const std::vector<Image>& images, const std::vector<Image>& reference_clean,
                                       const IdentityEmbedder& embedder, double tau = 0.5) {
  if (images.empty() || reference_clean.empty()) throw std::invalid_argument("ism_score: empty image list");
  const auto ref = embedder.score(reference_clean);
  const auto gen = embedder.score(images);
  return ism_from_embeddings(gen.embeddings, gen.confidence, mean_direction(ref.embeddings), tau);
}

inline double fdfr_from_confidence(const std::vector<double>& confidence, double tau) {
  if (confidence.empty()) throw std::invalid_argument("fdfr: empty image list");
  if (!(tau > 0 && tau < 1)) throw std::invalid_argument("fdfr: tau must lie in (0, 1)");
  const auto failed = std::count_if(confidence.begin(), confidence.end(), [&](double c) { return c < tau; });
  return static_cast<double>(failed) / static_cast<double>(confidence.size());
}

inline double fdfr_analog(const std::vector<Image>& images, const IdentityEmbedder& embedder, double tau = 0.5) {
  if (images.empty()) throw std::invalid_argument("fdfr: empty image list");
  return fdfr_from_confidence(embedder.score(images).confidence, tau);
}

}  // namespace cloakforge
