#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <stdexcept>
#include <vector>

#include "json.hpp"

#include "cloakforge/tensor.hpp"

namespace cloakforge {

// Single-channel float field, row-major.
struct Field {
  int h = 0;
  int w = 0;
  std::vector<double> v;

  double& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
  double at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

inline Field luminance(const Image& img) {
  const Shape s = img.shape();
  Field f{s.h, s.w, std::vector<double>(static_cast<std::size_t>(s.h) * s.w)};
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      if (s.c == 3) {
        f.at(y, x) = 0.299 * img.at(0, 0, y, x) + 0.587 * img.at(0, 1, y, x) + 0.114 * img.at(0, 2, y, x);
      } else {
        f.at(y, x) = img.at(0, 0, y, x);
      }
    }
  return f;
}

inline std::vector<double> gaussian_window(int window) {
  if (window < 3 || window % 2 == 0) throw std::invalid_argument("MSCN window must be odd and >= 3");
  const double sigma = window / 6.0;
  const int r = window / 2;
  std::vector<double> k(window);
  double sum = 0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;
  return k;
}

// Separable Gaussian filter with replicated borders.
inline Field gaussian_blur(const Field& f, const std::vector<double>& k) {
  const int r = static_cast<int>(k.size()) / 2;
  Field tmp{f.h, f.w, std::vector<double>(f.v.size())};
  Field out = tmp;
  for (int y = 0; y < f.h; ++y)
    for (int x = 0; x < f.w; ++x) {
      double acc = 0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * f.at(y, std::clamp(x + i, 0, f.w - 1));
      tmp.at(y, x) = acc;
    }
  for (int y = 0; y < f.h; ++y)
    for (int x = 0; x < f.w; ++x) {
      double acc = 0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp.at(std::clamp(y + i, 0, f.h - 1), x);
      out.at(y, x) = acc;
    }
  return out;
}

// (I - mu) / (sigma + C) with Gaussian-weighted local mean and deviation.
inline Field mscn_transform(const Field& f, int window = 7, double C = 1.0 / 255.0) {
  if (f.h <= window || f.w <= window) throw std::invalid_argument("image must be larger than the MSCN window");
  const auto k = gaussian_window(window);
  Field mu = gaussian_blur(f, k);
  Field sq = f;
  for (auto& v : sq.v) v *= v;
  Field mu2 = gaussian_blur(sq, k);
  Field out{f.h, f.w, std::vector<double>(f.v.size())};
  for (std::size_t i = 0; i < f.v.size(); ++i) {
    const double var = std::max(0.0, mu2.v[i] - mu.v[i] * mu.v[i]);
    out.v[i] = (f.v[i] - mu.v[i]) / (std::sqrt(var) + C);
  }
  return out;
}

struct AggdParams {
  double alpha = 2;
  double sigma_l = 0;
  double sigma_r = 0;
};

// Gamma(2/a)^2 / (Gamma(1/a) Gamma(3/a)), increasing in a.
inline double aggd_ratio(double a) {
  return std::exp(2 * std::lgamma(2 / a) - std::lgamma(1 / a) - std::lgamma(3 / a));
}

namespace detail {

inline AggdParams aggd_moments(const std::vector<double>& x, bool strict) {
  double sl = 0, sr = 0, abs_sum = 0, sq_sum = 0;
  std::size_t nl = 0, nr = 0;
  for (double v : x) {
    if (v < 0) {
      sl += v * v;
      ++nl;
    } else if (v > 0) {
      sr += v * v;
      ++nr;
    }
    abs_sum += std::abs(v);
    sq_sum += v * v;
  }
  if (sq_sum == 0 || (strict && (nl == 0 || nr == 0))) {
    if (strict) throw std::invalid_argument("aggd_fit: degenerate samples");
    return {10.0, 0.0, 0.0};
  }
  AggdParams p;
  p.sigma_l = nl ? std::sqrt(sl / nl) : 0.0;
  p.sigma_r = nr ? std::sqrt(sr / nr) : 0.0;
  const double left = nl ? p.sigma_l : p.sigma_r, right = nr ? p.sigma_r : p.sigma_l;
  const double gamma = left / right;
  const double n = static_cast<double>(x.size());
  const double r_hat = (abs_sum / n) * (abs_sum / n) / (sq_sum / n);
  const double big_r = r_hat * (gamma * gamma * gamma + 1) * (gamma + 1) / ((gamma * gamma + 1) * (gamma * gamma + 1));
  double lo = 0.05, hi = 10.0;
  if (big_r <= aggd_ratio(lo)) {
    p.alpha = lo;
  } else if (big_r >= aggd_ratio(hi)) {
    p.alpha = hi;
  } else {
    for (int it = 0; it < 100; ++it) {
      const double mid = 0.5 * (lo + hi);
      (aggd_ratio(mid) < big_r ? lo : hi) = mid;
    }
    p.alpha = 0.5 * (lo + hi);
  }
  return p;
}

}  // namespace detail

// Moment-matching fit of an asymmetric generalized Gaussian; sigma_l and
// sigma_r are the root mean squares of the negative and positive halves.
inline AggdParams aggd_fit(const std::vector<double>& samples) {
  if (samples.size() < 100) throw std::invalid_argument("aggd_fit needs at least 100 samples");
  return detail::aggd_moments(samples, true);
}

inline constexpr int kQualityFeatures = 36;

// Per scale: AGGD shape and mean variance of the MSCN field, then (alpha,
// mean, sigma_l^2, sigma_r^2) for horizontal, vertical and both diagonal
// neighbor products. Two scales (full, 2x downsampled).
inline std::vector<double> quality_features(const Image& img) {
  std::vector<double> feats;
  Field f = luminance(img);
  for (int scale = 0; scale < 2; ++scale) {
    Field m = mscn_transform(f, 7);
    auto p = detail::aggd_moments(m.v, false);
    feats.push_back(p.alpha);
    feats.push_back((p.sigma_l * p.sigma_l + p.sigma_r * p.sigma_r) / 2);
    const int shifts[4][2] = {{0, 1}, {1, 0}, {1, 1}, {1, -1}};
    for (const auto& s : shifts) {
      std::vector<double> prod;
      for (int y = 0; y + s[0] < m.h; ++y)
        for (int x = std::max(0, -s[1]); x + std::max(0, s[1]) < m.w; ++x) prod.push_back(m.at(y, x) * m.at(y + s[0], x + s[1]));
      auto q = detail::aggd_moments(prod, false);
      const double ratio = q.alpha > 0 ? std::exp(std::lgamma(2 / q.alpha) - 0.5 * (std::lgamma(1 / q.alpha) + std::lgamma(3 / q.alpha))) : 0;
      const double mean = (q.sigma_r - q.sigma_l) * ratio;
      feats.push_back(q.alpha);
      feats.push_back(mean);
      feats.push_back(q.sigma_l * q.sigma_l);
      feats.push_back(q.sigma_r * q.sigma_r);
    }
    if (scale == 0) {
      Field half{f.h / 2, f.w / 2, std::vector<double>(static_cast<std::size_t>(f.h / 2) * (f.w / 2))};
      for (int y = 0; y < half.h; ++y)
        for (int x = 0; x < half.w; ++x)
          half.at(y, x) = 0.25 * (f.at(2 * y, 2 * x) + f.at(2 * y + 1, 2 * x) + f.at(2 * y, 2 * x + 1) + f.at(2 * y + 1, 2 * x + 1));
      f = std::move(half);
    }
  }
  return feats;
}

// Multivariate Gaussian over quality features of pristine images.
struct PristineStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
  double ridge = 0;
  double threshold = 0;
  int fitted_on = 0;

  int dim() const { return static_cast<int>(mean.size()); }
};

inline Eigen::VectorXd mean_features(const std::vector<Image>& images) {
  if (images.empty()) throw std::invalid_argument("quality: empty image list");
  Eigen::VectorXd m = Eigen::VectorXd::Zero(kQualityFeatures);
  for (const auto& img : images) {
    auto f = quality_features(img);
    m += Eigen::Map<const Eigen::VectorXd>(f.data(), kQualityFeatures);
  }
  return m / static_cast<double>(images.size());
}

inline double mahalanobis(const Eigen::VectorXd& d, const PristineStats& stats) {
  Eigen::MatrixXd reg = stats.covariance;
  reg.diagonal().array() += stats.ridge;
  return std::sqrt(std::max(0.0, d.dot(reg.ldlt().solve(d))));
}

// Higher is worse: distance of the set's mean feature vector from the
// pristine model.
inline double quality_score(const std::vector<Image>& images, const PristineStats& stats) {
  return mahalanobis(mean_features(images) - stats.mean, stats);
}

inline PristineStats fit_pristine_model(const std::vector<Image>& clean_images, double ridge_scale = 1e-3) {
  if (clean_images.size() < 20) throw std::invalid_argument("pristine model needs at least 20 clean images");
  const int n = static_cast<int>(clean_images.size());
  Eigen::MatrixXd F(n, kQualityFeatures);
  for (int i = 0; i < n; ++i) {
    auto f = quality_features(clean_images[i]);
    F.row(i) = Eigen::Map<const Eigen::RowVectorXd>(f.data(), kQualityFeatures);
  }
  PristineStats s;
  s.fitted_on = n;
  s.mean = F.colwise().mean().transpose();
  Eigen::MatrixXd centered = F.rowwise() - s.mean.transpose();
  s.covariance = centered.transpose() * centered / std::max(1, n - 1);
  s.ridge = ridge_scale * s.covariance.diagonal().mean() + 1e-12;
  // Calibration: 95th percentile of single-image scores on the fitting set.
  std::vector<double> single;
  for (int i = 0; i < n; ++i) single.push_back(mahalanobis(F.row(i).transpose() - s.mean, s));
  std::sort(single.begin(), single.end());
  s.threshold = single[static_cast<std::size_t>(std::ceil(0.95 * (n - 1)))];
  return s;
}

inline void save_pristine(const PristineStats& s, const std::filesystem::path& path) {
  nlohmann::json j{{"version", 1},
                   {"dim", s.dim()},
                   {"ridge", s.ridge},
                   {"threshold", s.threshold},
                   {"fitted_on", s.fitted_on},
                   {"mean", std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size())},
                   {"covariance", std::vector<double>(s.covariance.data(), s.covariance.data() + s.covariance.size())}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(17) << j.dump() << '\n';
}

inline PristineStats load_pristine(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  auto j = nlohmann::json::parse(in);
  if (j.at("version").get<int>() != 1) throw std::runtime_error("unsupported pristine stats version");
  PristineStats s;
  const int d = j.at("dim").get<int>();
  auto mean = j.at("mean").get<std::vector<double>>();
  auto cov = j.at("covariance").get<std::vector<double>>();
  s.mean = Eigen::Map<Eigen::VectorXd>(mean.data(), d);
  s.covariance = Eigen::Map<Eigen::MatrixXd>(cov.data(), d, d);
  s.ridge = j.at("ridge").get<double>();
  s.threshold = j.at("threshold").get<double>();
  s.fitted_on = j.at("fitted_on").get<int>();
  return s;
}

}  // namespace cloakforge
