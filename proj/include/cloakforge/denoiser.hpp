#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cloakforge/autodiff.hpp"
#include "cloakforge/prompt.hpp"
#include "cloakforge/rng.hpp"
#include "cloakforge/tensor.hpp"

namespace cloakforge {

// Layer sizes of the toy conditional UNet: three resolution levels
// (image, /2, /4) with widths w0, w1, w2.
struct Architecture {
  int image_size = 32;
  int channels = 3;
  int w0 = 16;
  int w1 = 32;
  int w2 = 64;
  int time_dim = 32;
  int emb_dim = 64;
  int cond_dim = 32;
  std::uint64_t token_seed = 7;

  bool operator==(const Architecture&) const = default;

  Shape image_shape() const { return Shape{1, channels, image_size, image_size}; }

  void validate() const {
    if (image_size < 4 || image_size % 4 != 0) throw std::invalid_argument("image_size must be a multiple of 4");
    if (channels < 1 || w0 < 1 || w1 < 1 || w2 < 1 || cond_dim < 1 || emb_dim < 1) {
      throw std::invalid_argument("architecture widths must be positive");
    }
    if (time_dim < 2 || time_dim % 2 != 0) throw std::invalid_argument("time_dim must be even");
  }
};

inline void to_json(nlohmann::json& j, const Architecture& a) {
  j = nlohmann::json{{"image_size", a.image_size}, {"channels", a.channels}, {"w0", a.w0},
                     {"w1", a.w1},  {"w2", a.w2},  {"time_dim", a.time_dim}, {"emb_dim", a.emb_dim},
                     {"cond_dim", a.cond_dim}, {"token_seed", a.token_seed}};
}

inline void from_json(const nlohmann::json& j, Architecture& a) {
  Architecture d;
  a.image_size = j.value("image_size", d.image_size);
  a.channels = j.value("channels", d.channels);
  a.w0 = j.value("w0", d.w0);
  a.w1 = j.value("w1", d.w1);
  a.w2 = j.value("w2", d.w2);
  a.time_dim = j.value("time_dim", d.time_dim);
  a.emb_dim = j.value("emb_dim", d.emb_dim);
  a.cond_dim = j.value("cond_dim", d.cond_dim);
  a.token_seed = j.value("token_seed", d.token_seed);
}

template <class S>
Tensor<S> sinusoidal_embedding(std::span<const int> timesteps, int dim) {
  const int half = dim / 2;
  Tensor<S> out(Shape{static_cast<int>(timesteps.size()), dim, 1, 1});
  for (std::size_t n = 0; n < timesteps.size(); ++n) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      const double arg = timesteps[n] * freq;
      out[n * dim + i] = static_cast<S>(std::sin(arg));
      out[n * dim + half + i] = static_cast<S>(std::cos(arg));
    }
  }
  return out;
}

// Conditional noise predictor eps_theta(x_t, t, c). Conditioning enters by
// feature-wise modulation from a joint time/prompt embedding. The prompt
// vector is the mean of learned token embeddings, so the token table is part
// of the trainable parameters.
//
// Copies are deep: a copied model never shares parameter storage.
template <class S>
class ConditionalUNet {
 public:
  ConditionalUNet() = default;

  ConditionalUNet(Architecture arch, std::uint64_t seed) : arch_(arch) {
    arch_.validate();
    Rng rng(seed);
    build(&rng);
  }

  ConditionalUNet(const ConditionalUNet& o) : arch_(o.arch_), vocab_(o.vocab_), index_(o.index_) {
    params_.reserve(o.params_.size());
    for (const auto& p : o.params_) params_.push_back(ad::Var<S>::leaf(p.value(), p.requires_grad()));
  }
  ConditionalUNet& operator=(const ConditionalUNet& o) {
    if (this != &o) *this = ConditionalUNet(o);
    return *this;
  }
  ConditionalUNet(ConditionalUNet&&) noexcept = default;
  ConditionalUNet& operator=(ConditionalUNet&&) noexcept = default;

  const Architecture& architecture() const { return arch_; }
  Shape image_shape() const { return arch_.image_shape(); }

  static std::vector<std::string> parameter_names() {
    return {"tokens",        "time_fc.w",    "time_fc.b",    "cond_fc.w",    "cond_fc.b",   "conv_in.w",
            "conv_in.b",     "block0.w",     "block0.b",     "block0.film.w", "block0.film.b", "down0.w",
            "down0.b",       "block1.w",     "block1.b",     "block1.film.w", "block1.film.b", "down1.w",
            "down1.b",       "mid.a.w",      "mid.a.b",      "mid.film.w",   "mid.film.b",  "mid.b.w",
            "mid.b.b",       "up1.proj.w",   "up1.proj.b",   "up1.w",        "up1.b",       "up1.film.w",
            "up1.film.b",    "up0.proj.w",   "up0.proj.b",   "up0.w",        "up0.b",       "up0.film.w",
            "up0.film.b",    "conv_out.w",   "conv_out.b"};
  }

  std::vector<ad::Var<S>>& parameters() { return params_; }
  const std::vector<ad::Var<S>>& parameters() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value().size();
    return n;
  }

  const std::vector<std::string>& vocabulary() const { return vocab_; }

  void set_text_encoder_trainable(bool trainable) { params_[kTokens].set_requires_grad(trainable); }

  // Token row, adding unknown tokens with a seeded initialization keyed by the
  // token text (independent of insertion order).
  int token_id(const std::string& token) {
    if (auto it = index_.find(token); it != index_.end()) return it->second;
    auto& table = params_[kTokens].mutable_value();
    const int d = arch_.cond_dim;
    const int v = table.shape().n;
    Tensor<S> grown(Shape{v + 1, d, 1, 1});
    std::copy(table.data(), table.data() + table.size(), grown.data());
    Rng rng(derive_seed(arch_.token_seed, token));
    for (int j = 0; j < d; ++j) grown[static_cast<std::size_t>(v) * d + j] = static_cast<S>(rng.normal() * 0.5);
    table = std::move(grown);
    params_[kTokens].zero_grad();
    vocab_.push_back(token);
    index_.emplace(token, v);
    return v;
  }

  // Conditioning vector (1, cond_dim) for a prompt; differentiable w.r.t. the
  // token table.
  ad::Var<S> embed_prompt(const PromptSpec& spec) {
    std::vector<int> ids;
    for (const auto& tok : spec.tokens()) ids.push_back(token_id(tok));
    return ad::mean_rows(params_[kTokens], std::move(ids));
  }

  // One conditioning row per prompt, (N, cond_dim).
  ad::Var<S> embed_prompts(const std::vector<PromptSpec>& specs) {
    std::vector<std::vector<int>> groups;
    for (const auto& spec : specs) {
      auto& ids = groups.emplace_back();
      for (const auto& tok : spec.tokens()) ids.push_back(token_id(tok));
    }
    return ad::mean_rows_batch(params_[kTokens], std::move(groups));
  }

  ad::Var<S> operator()(const ad::Var<S>& xt, std::span<const int> timesteps, const ad::Var<S>& cond) const {
    return predict(xt, timesteps, cond);
  }

  ad::Var<S> predict(const ad::Var<S>& xt, std::span<const int> timesteps, const ad::Var<S>& cond) const {
    using namespace ad;
    const Shape s = xt.shape();
    if (s.c != arch_.channels || s.h != arch_.image_size || s.w != arch_.image_size) {
      throw ShapeError("denoiser input " + s.str() + " does not match architecture");
    }
    if (static_cast<int>(timesteps.size()) != s.n) throw ShapeError("denoiser: one timestep per sample required");
    if (static_cast<int>(cond.shape().per_sample()) != arch_.cond_dim || (cond.shape().n != 1 && cond.shape().n != s.n)) {
      throw ShapeError("denoiser: conditioning " + cond.shape().str() + " has wrong width");
    }
    const auto& P = params_;
    auto temb = Var<S>::constant(sinusoidal_embedding<S>(timesteps, arch_.time_dim));
    auto e = silu(add(linear(temb, P[kTimeW], P[kTimeB]), linear(cond, P[kCondW], P[kCondB])));

    ConvGeometry same{3, 1, 1}, down{3, 2, 1}, pointwise{1, 1, 0};
    auto h0 = conv2d(xt, P[kConvInW], P[kConvInB], same);
    h0 = add(h0, film(conv2d(silu(h0), P[kBlock0W], P[kBlock0B], same), linear(e, P[kBlock0FW], P[kBlock0FB])));
    auto h1 = conv2d(silu(h0), P[kDown0W], P[kDown0B], down);
    h1 = add(h1, film(conv2d(silu(h1), P[kBlock1W], P[kBlock1B], same), linear(e, P[kBlock1FW], P[kBlock1FB])));
    auto h2 = conv2d(silu(h1), P[kDown1W], P[kDown1B], down);
    auto m = film(conv2d(silu(h2), P[kMidAW], P[kMidAB], same), linear(e, P[kMidFW], P[kMidFB]));
    h2 = add(h2, conv2d(silu(m), P[kMidBW], P[kMidBB], same));

    auto u1 = add(upsample2x(conv2d(h2, P[kUp1PW], P[kUp1PB], pointwise)), h1);
    u1 = add(u1, film(conv2d(silu(u1), P[kUp1W], P[kUp1B], same), linear(e, P[kUp1FW], P[kUp1FB])));
    auto u0 = add(upsample2x(conv2d(u1, P[kUp0PW], P[kUp0PB], pointwise)), h0);
    u0 = add(u0, film(conv2d(silu(u0), P[kUp0W], P[kUp0B], same), linear(e, P[kUp0FW], P[kUp0FB])));
    return conv2d(silu(u0), P[kConvOutW], P[kConvOutB], same);
  }

  // Replaces vocabulary and parameter values; shapes must follow the
  // architecture (the token table may have any row count).
  void load_state(std::vector<std::string> vocab, std::vector<Tensor<S>> values) {
    if (values.size() != params_.size()) throw std::invalid_argument("parameter count mismatch on restore");
    for (std::size_t i = 0; i < values.size(); ++i) {
      const Shape want = params_[i].shape();
      const Shape got = values[i].shape();
      const bool ok = i == kTokens ? (got.n == static_cast<int>(vocab.size()) && got.per_sample() == want.per_sample())
                                   : got == want;
      if (!ok) throw ShapeError("restore: parameter " + parameter_names()[i] + " has shape " + got.str());
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      params_[i].mutable_value() = std::move(values[i]);
      params_[i].zero_grad();
    }
    vocab_ = std::move(vocab);
    index_.clear();
    for (std::size_t i = 0; i < vocab_.size(); ++i) index_.emplace(vocab_[i], static_cast<int>(i));
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  enum Index : std::size_t {
    kTokens, kTimeW, kTimeB, kCondW, kCondB, kConvInW, kConvInB, kBlock0W, kBlock0B, kBlock0FW, kBlock0FB,
    kDown0W, kDown0B, kBlock1W, kBlock1B, kBlock1FW, kBlock1FB, kDown1W, kDown1B, kMidAW, kMidAB, kMidFW,
    kMidFB, kMidBW, kMidBB, kUp1PW, kUp1PB, kUp1W, kUp1B, kUp1FW, kUp1FB, kUp0PW, kUp0PB, kUp0W, kUp0B,
    kUp0FW, kUp0FB, kConvOutW, kConvOutB, kCount
  };

  void build(Rng* rng) {
    const auto& a = arch_;
    params_.assign(kCount, {});
    auto gauss = [&](Shape s, double std) {
      Tensor<S> t(s);
      for (auto& v : t.values()) v = static_cast<S>(rng->normal() * std);
      return ad::Var<S>::leaf(std::move(t));
    };
    auto zeros = [](Shape s) { return ad::Var<S>::leaf(Tensor<S>(s)); };
    auto conv = [&](std::size_t wi, int cout, int cin, int k, double gain) {
      params_[wi] = gauss(Shape{cout, cin, k, k}, gain * std::sqrt(2.0 / (cin * k * k)));
      params_[wi + 1] = zeros(Shape{1, cout, 1, 1});
    };
    auto lin = [&](std::size_t wi, int dout, int din, double gain) {
      params_[wi] = gauss(Shape{dout, din, 1, 1}, gain * std::sqrt(1.0 / din));
      params_[wi + 1] = zeros(Shape{1, dout, 1, 1});
    };
    params_[kTokens] = ad::Var<S>::leaf(Tensor<S>(Shape{0, a.cond_dim, 1, 1}));
    lin(kTimeW, a.emb_dim, a.time_dim, 1.0);
    lin(kCondW, a.emb_dim, a.cond_dim, 1.0);
    conv(kConvInW, a.w0, a.channels, 3, 1.0);
    conv(kBlock0W, a.w0, a.w0, 3, 0.5);
    lin(kBlock0FW, 2 * a.w0, a.emb_dim, 0.1);
    conv(kDown0W, a.w1, a.w0, 3, 1.0);
    conv(kBlock1W, a.w1, a.w1, 3, 0.5);
    lin(kBlock1FW, 2 * a.w1, a.emb_dim, 0.1);
    conv(kDown1W, a.w2, a.w1, 3, 1.0);
    conv(kMidAW, a.w2, a.w2, 3, 1.0);
    lin(kMidFW, 2 * a.w2, a.emb_dim, 0.1);
    conv(kMidBW, a.w2, a.w2, 3, 0.5);
    conv(kUp1PW, a.w1, a.w2, 1, 1.0);
    conv(kUp1W, a.w1, a.w1, 3, 0.5);
    lin(kUp1FW, 2 * a.w1, a.emb_dim, 0.1);
    conv(kUp0PW, a.w0, a.w1, 1, 1.0);
    conv(kUp0W, a.w0, a.w0, 3, 0.5);
    lin(kUp0FW, 2 * a.w0, a.emb_dim, 0.1);
    conv(kConvOutW, a.channels, a.w0, 3, 0.2);
  }

  Architecture arch_;
  std::vector<ad::Var<S>> params_;
  std::vector<std::string> vocab_;
  std::map<std::string, int> index_;
};

using Denoiser = ConditionalUNet<float>;

}  // namespace cloakforge
