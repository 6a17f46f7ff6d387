#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "cloakforge/autodiff.hpp"
#include "cloakforge/image_io.hpp"
#include "cloakforge/rng.hpp"

using namespace cloakforge;
using V = ad::Var<double>;
using T = Tensor<double>;

namespace {

T random_tensor(Rng& rng, Shape s, double scale = 1.0) {
  T t(s);
  for (auto& v : t.values()) v = rng.normal() * scale;
  return t;
}

// Checks every leaf gradient against central differences of a scalar function.
void expect_gradients(std::vector<T> inputs, const std::function<V(const std::vector<V>&)>& f,
                      double tol = 1e-6) {
  std::vector<V> leaves;
  for (auto& t : inputs) leaves.push_back(V::leaf(t));
  f(leaves).backward();
  const double h = 1e-6;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    ASSERT_FALSE(leaves[i].grad().empty()) << "input " << i << " got no gradient";
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      auto eval = [&](double delta) {
        std::vector<V> probe;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          T v = inputs[j];
          if (j == i) v[k] += delta;
          probe.push_back(V::constant(v));
        }
        return f(probe).item();
      };
      const double fd = (eval(h) - eval(-h)) / (2 * h);
      EXPECT_NEAR(leaves[i].grad()[k], fd, tol * std::max(1.0, std::abs(fd))) << "input " << i << " index " << k;
    }
  }
}

V sum_sq(const V& x) { return ad::mse(x, V::constant(T(x.shape()))); }

}  // namespace

TEST(Tensor, StackUnstackRoundTrip) {
  Rng rng(1);
  std::vector<T> items{random_tensor(rng, {1, 2, 3, 3}), random_tensor(rng, {1, 2, 3, 3})};
  auto batch = stack(items);
  EXPECT_EQ(batch.shape(), (Shape{2, 2, 3, 3}));
  EXPECT_EQ(unstack(batch), items);
}

TEST(Tensor, StackRejectsMismatchedShapes) {
  std::vector<T> items{T({1, 1, 2, 2}), T({1, 1, 3, 3})};
  EXPECT_THROW(stack(items), ShapeError);
}

TEST(Tensor, NpyRoundTripIsLossless) {
  Rng rng(2);
  auto t = random_tensor(rng, {3, 2, 4, 5}).cast<float>();
  const auto path = std::filesystem::temp_directory_path() / "cloakforge_npy_roundtrip.npy";
  write_npy(path, t);
  EXPECT_EQ(read_npy<float>(path), t);
  std::filesystem::remove(path);
}

TEST(Autodiff, AddSubScaleGradients) {
  Rng rng(3);
  expect_gradients({random_tensor(rng, {2, 3, 2, 2}), random_tensor(rng, {2, 3, 2, 2})},
                   [](const std::vector<V>& x) { return sum_sq(ad::sub(ad::add(x[0], ad::scale(x[1], 0.7)), x[1])); });
}

TEST(Autodiff, BroadcastBiasAddGradient) {
  Rng rng(4);
  expect_gradients({random_tensor(rng, {2, 3, 2, 2}), random_tensor(rng, {1, 3, 2, 2})},
                   [](const std::vector<V>& x) { return sum_sq(ad::add(x[0], x[1])); });
}

TEST(Autodiff, SiluGradient) {
  Rng rng(5);
  expect_gradients({random_tensor(rng, {2, 2, 3, 3}, 2.0)}, [](const std::vector<V>& x) { return sum_sq(ad::silu(x[0])); });
}

TEST(Autodiff, LinearGradient) {
  Rng rng(6);
  expect_gradients({random_tensor(rng, {3, 4, 1, 1}), random_tensor(rng, {5, 4, 1, 1}), random_tensor(rng, {1, 5, 1, 1})},
                   [](const std::vector<V>& x) { return sum_sq(ad::linear(x[0], x[1], x[2])); });
}

TEST(Autodiff, Conv2dGradientSameAndStrided) {
  Rng rng(7);
  for (ad::ConvGeometry g : {ad::ConvGeometry{3, 1, 1}, ad::ConvGeometry{3, 2, 1}, ad::ConvGeometry{1, 1, 0}}) {
    expect_gradients({random_tensor(rng, {2, 2, 6, 6}), random_tensor(rng, {3, 2, g.kernel, g.kernel}),
                      random_tensor(rng, {1, 3, 1, 1})},
                     [g](const std::vector<V>& x) { return sum_sq(ad::conv2d(x[0], x[1], x[2], g)); });
  }
}

TEST(Autodiff, Conv2dMatchesDirectSum) {
  Rng rng(8);
  auto x = random_tensor(rng, {1, 2, 5, 5});
  auto w = random_tensor(rng, {3, 2, 3, 3});
  auto b = random_tensor(rng, {1, 3, 1, 1});
  auto y = ad::conv2d(V::constant(x), V::constant(w), V::constant(b), {3, 1, 1}).value();
  for (int o = 0; o < 3; ++o)
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 5; ++j) {
        double acc = b[o];
        for (int c = 0; c < 2; ++c)
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              if (i + di < 0 || i + di >= 5 || j + dj < 0 || j + dj >= 5) continue;
              acc += w.at(o, c, di + 1, dj + 1) * x.at(0, c, i + di, j + dj);
            }
        EXPECT_NEAR(y.at(0, o, i, j), acc, 1e-12);
      }
}

TEST(Autodiff, FilmPoolUpsampleGradients) {
  Rng rng(9);
  expect_gradients({random_tensor(rng, {2, 3, 4, 4}), random_tensor(rng, {2, 6, 1, 1})},
                   [](const std::vector<V>& x) { return sum_sq(ad::upsample2x(ad::avgpool2(ad::film(x[0], x[1])))); });
  expect_gradients({random_tensor(rng, {2, 3, 4, 4})},
                   [](const std::vector<V>& x) { return sum_sq(ad::global_avg_pool(x[0])); });
}

TEST(Autodiff, AffinePerSampleGradient) {
  Rng rng(10);
  const std::vector<double> a{0.3, -1.2}, b{0.5, 2.0};
  auto offset = random_tensor(rng, {2, 1, 2, 2});
  expect_gradients({random_tensor(rng, {2, 1, 2, 2})}, [&](const std::vector<V>& x) {
    return sum_sq(ad::affine_per_sample<double>(x[0], a, b, offset));
  });
}

TEST(Autodiff, MeanRowsGradients) {
  Rng rng(11);
  expect_gradients({random_tensor(rng, {4, 3, 1, 1})}, [](const std::vector<V>& x) {
    return sum_sq(ad::add(ad::mean_rows_batch(x[0], {{1}, {1, 3}, {0, 1, 2}}), ad::mean_rows(x[0], {0, 2})));
  });
}

TEST(Autodiff, MseAndCrossEntropyGradients) {
  Rng rng(12);
  expect_gradients({random_tensor(rng, {2, 3, 2, 2}), random_tensor(rng, {2, 3, 2, 2})},
                   [](const std::vector<V>& x) { return ad::mse(x[0], x[1]); });
  expect_gradients({random_tensor(rng, {3, 4, 1, 1})},
                   [](const std::vector<V>& x) { return ad::cross_entropy(x[0], {0, 3, 1}); });
}

TEST(Autodiff, MseValue) {
  auto a = V::constant(T({1, 1, 1, 4}, std::vector<double>{1, 2, 3, 4}));
  auto b = V::constant(T({1, 1, 1, 4}, std::vector<double>{0, 2, 5, 4}));
  EXPECT_DOUBLE_EQ(ad::mse(a, b).item(), (1.0 + 4.0) / 4.0);
}

TEST(Autodiff, NoGradGuardRecordsNothing) {
  auto x = V::leaf(T({1, 1, 2, 2}, 1.0));
  {
    ad::NoGradGuard guard;
    auto y = sum_sq(x);
    y.backward();
  }
  EXPECT_TRUE(x.grad().empty());
}

TEST(Autodiff, SharedSubexpressionAccumulates) {
  auto x = V::leaf(T({1, 1, 1, 1}, 3.0));
  auto y = ad::add(x, x);  // dy/dx = 2
  auto z = ad::mse(y, V::constant(T({1, 1, 1, 1})));
  z.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 2 * 2 * 6.0);
}
