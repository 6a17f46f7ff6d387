#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "cloakforge/checkpoint.hpp"
#include "cloakforge/denoiser.hpp"
#include "cloakforge/optim.hpp"
#include "cloakforge/prompt.hpp"

using namespace cloakforge;

namespace {

Architecture small_arch(int image_size = 8, int channels = 3) {
  Architecture a;
  a.image_size = image_size;
  a.channels = channels;
  a.w0 = 4;
  a.w1 = 6;
  a.w2 = 8;
  a.time_dim = 8;
  a.emb_dim = 8;
  a.cond_dim = 6;
  return a;
}

// Smallest architecture the UNet admits: one channel per level.
Architecture minimal_arch() {
  Architecture a;
  a.image_size = 4;
  a.channels = 1;
  a.w0 = a.w1 = a.w2 = 1;
  a.time_dim = 2;
  a.emb_dim = 1;
  a.cond_dim = 1;
  return a;
}

std::vector<double> conditioning(ConditionalUNet<float>& m, const PromptSpec& p) {
  auto v = m.embed_prompt(p).value();
  return {v.values().begin(), v.values().end()};
}

}  // namespace

TEST(Prompt, RendersTemplates) {
  EXPECT_EQ(instance_prompt().render(), "a photo of sks person");
  EXPECT_EQ(prior_prompt().render(), "a photo of person");
  EXPECT_EQ(dslr_prompt("t@t").render(), "a dslr portrait of t@t person");
  EXPECT_EQ(instance_prompt().without_identifier(), prior_prompt());
}

TEST(Prompt, RejectsMalformedTemplates) {
  EXPECT_THROW((PromptSpec{"a photo of person", "sks", "person"}.validate()), PromptError);
  EXPECT_THROW((PromptSpec{"a photo of [S*] [class]", "sks", "two words"}.validate()), PromptError);
  EXPECT_THROW((PromptSpec{"a photo of [S*] [class]", "s ks", "person"}.validate()), PromptError);
}

TEST(PromptConditioning, SameSpecSameVector) {
  ConditionalUNet<float> m(small_arch(), 1);
  EXPECT_EQ(conditioning(m, instance_prompt()), conditioning(m, instance_prompt()));
}

TEST(PromptConditioning, IdentifierChangesVector) {
  ConditionalUNet<float> m(small_arch(), 1);
  EXPECT_NE(conditioning(m, instance_prompt("sks")), conditioning(m, instance_prompt("t@t")));
}

TEST(PromptConditioning, WidthMatchesArchitecture) {
  ConditionalUNet<float> m(small_arch(), 1);
  EXPECT_EQ(static_cast<int>(conditioning(m, dslr_prompt()).size()), small_arch().cond_dim);
}

TEST(PromptConditioning, TokenInitIndependentOfInsertionOrder) {
  ConditionalUNet<float> a(small_arch(), 1), b(small_arch(), 1);
  conditioning(a, instance_prompt("x"));
  EXPECT_EQ(conditioning(a, instance_prompt("y")), conditioning(b, instance_prompt("y")));
}

TEST(PromptConditioning, BatchedRowsMatchSingle) {
  ConditionalUNet<float> m(small_arch(), 1);
  auto rows = m.embed_prompts({instance_prompt(), prior_prompt(), dslr_prompt()}).value();
  const int d = small_arch().cond_dim;
  std::vector<PromptSpec> specs{instance_prompt(), prior_prompt(), dslr_prompt()};
  for (int r = 0; r < 3; ++r) {
    auto one = conditioning(m, specs[r]);
    for (int j = 0; j < d; ++j) EXPECT_FLOAT_EQ(rows[r * d + j], one[j]);
  }
}

TEST(Denoiser, OutputShapeEqualsInput) {
  ConditionalUNet<float> m(small_arch(), 2);
  Rng rng(3);
  auto x = ad::Var<float>::constant(rng.normal_tensor<float>({3, 3, 8, 8}));
  std::vector<int> ts{1, 50, 250};
  auto cond = m.embed_prompt(instance_prompt());
  EXPECT_EQ(m(x, ts, cond).shape(), x.shape());
}

TEST(Denoiser, InferenceIsDeterministic) {
  ConditionalUNet<float> m(small_arch(), 2);
  Rng rng(4);
  auto x = ad::Var<float>::constant(rng.normal_tensor<float>({2, 3, 8, 8}));
  std::vector<int> ts{5, 6};
  auto cond = m.embed_prompt(instance_prompt());
  EXPECT_EQ(m(x, ts, cond).value(), m(x, ts, cond).value());
}

TEST(Denoiser, PerSampleConditioningMatchesSeparateCalls) {
  ConditionalUNet<float> m(small_arch(), 2);
  Rng rng(5);
  auto xa = rng.normal_tensor<float>({1, 3, 8, 8}), xb = rng.normal_tensor<float>({1, 3, 8, 8});
  std::vector<int> t1{9}, t2{9, 9};
  auto ca = m.embed_prompt(instance_prompt()), cb = m.embed_prompt(dslr_prompt());
  auto both = m(ad::Var<float>::constant(stack(std::vector<Tensor<float>>{xa, xb})), t2,
                m.embed_prompts({instance_prompt(), dslr_prompt()}))
                  .value();
  auto a = m(ad::Var<float>::constant(xa), t1, ca).value();
  auto b = m(ad::Var<float>::constant(xb), t1, cb).value();
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NEAR(both[i], a[i], 1e-5);
    EXPECT_NEAR(both[a.size() + i], b[i], 1e-5);
  }
}

TEST(Denoiser, RejectsWrongShapes) {
  ConditionalUNet<float> m(small_arch(), 2);
  std::vector<int> ts{1};
  auto cond = m.embed_prompt(instance_prompt());
  EXPECT_THROW(m(ad::Var<float>::constant(Tensor<float>({1, 3, 4, 4})), ts, cond), ShapeError);
  EXPECT_THROW(m(ad::Var<float>::constant(Tensor<float>({1, 3, 8, 8})), ts,
                 ad::Var<float>::constant(Tensor<float>({1, 2, 1, 1}))),
               ShapeError);
}

TEST(Denoiser, ParameterGradientMatchesFiniteDifferences) {
  ConditionalUNet<double> m(minimal_arch(), 6);
  Rng rng(7);
  auto x = ad::Var<double>::constant(rng.normal_tensor<double>({2, 1, 4, 4}));
  std::vector<int> ts{20, 140};
  auto cond = m.embed_prompt(instance_prompt());
  auto objective = [&] {
    auto out = m(x, ts, cond);
    return ad::mse(out, ad::Var<double>::constant(Tensor<double>(out.shape())));
  };
  m.zero_grad();
  objective().backward();
  int checked = 0;
  for (std::size_t p = 1; p < m.parameters().size(); ++p) {
    auto& param = m.parameters()[p];
    const auto grad = param.grad();
    ASSERT_FALSE(grad.empty()) << ConditionalUNet<double>::parameter_names()[p];
    for (std::size_t k = 0; k < param.value().size(); ++k) {
      const double orig = param.value()[k], h = 1e-6;
      param.mutable_value()[k] = orig + h;
      const double up = objective().item();
      param.mutable_value()[k] = orig - h;
      const double dn = objective().item();
      param.mutable_value()[k] = orig;
      const double fd = (up - dn) / (2 * h);
      EXPECT_NEAR(grad[k], fd, 1e-3 * std::max(std::abs(fd), 1e-4));
      ++checked;
    }
  }
  EXPECT_GT(checked, 10);
}

TEST(Checkpoint, RestoreSnapshotIsBitIdentical) {
  ConditionalUNet<float> m(small_arch(), 8);
  auto cond_spec = instance_prompt();
  m.embed_prompt(cond_spec);
  auto restored = restore(snapshot(m, "m"));
  Rng rng(9);
  auto x = ad::Var<float>::constant(rng.normal_tensor<float>({2, 3, 8, 8}));
  std::vector<int> ts{3, 33};
  EXPECT_EQ(m(x, ts, m.embed_prompt(cond_spec)).value(), restored(x, ts, restored.embed_prompt(cond_spec)).value());
}

TEST(Checkpoint, TrainingACloneLeavesSourceUnchanged) {
  ConditionalUNet<float> src(small_arch(), 10);
  src.embed_prompt(instance_prompt());
  const auto before = snapshot(src, "src");
  auto copy = clone(src);
  Optimizer<float> opt(OptimizerKind::kAdam, 1e-2);
  Rng rng(11);
  for (int step = 0; step < 10; ++step) {
    auto x = ad::Var<float>::constant(rng.normal_tensor<float>({2, 3, 8, 8}));
    std::vector<int> ts{4, 40};
    auto out = copy(x, ts, copy.embed_prompt(instance_prompt()));
    copy.zero_grad();
    ad::mse(out, ad::Var<float>::constant(Tensor<float>(out.shape()))).backward();
    opt.step(copy.parameters());
  }
  EXPECT_EQ(snapshot(src, "src"), before);
  EXPECT_NE(snapshot(copy, "src").parameters, before.parameters);
}

TEST(Checkpoint, DiskRoundTripPreservesEverything) {
  ConditionalUNet<float> m(small_arch(), 12);
  m.embed_prompt(dslr_prompt("t@t"));
  auto ck = snapshot(m, "unit", {42, 17, "parent"});
  const auto path = std::filesystem::temp_directory_path() / "cloakforge_unit.ckpt";
  save_checkpoint(ck, path);
  auto loaded = load_checkpoint<float>(path);
  EXPECT_EQ(loaded, ck);
  // Byte-level: saving the loaded checkpoint reproduces the file.
  const auto path2 = std::filesystem::temp_directory_path() / "cloakforge_unit2.ckpt";
  save_checkpoint(loaded, path2);
  std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  EXPECT_EQ(sa, sb);
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST(Checkpoint, RejectsForeignFiles) {
  const auto path = std::filesystem::temp_directory_path() / "cloakforge_not_a_ckpt.bin";
  std::ofstream(path) << "definitely not a checkpoint";
  EXPECT_THROW(load_checkpoint<float>(path), CheckpointFormatError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint<float>(path), std::runtime_error);
}

TEST(Checkpoint, RestoreIntoRejectsOtherArchitecture) {
  ConditionalUNet<float> a(small_arch(8), 1), b(small_arch(12), 1);
  EXPECT_THROW(restore_into(a, snapshot(b, "b")), std::invalid_argument);
}

TEST(Optimizer, SgdIsPlainGradientStep) {
  auto p = ad::Var<float>::leaf(Tensor<float>({1, 1, 1, 2}, std::vector<float>{1.0f, -2.0f}));
  ad::mse(p, ad::Var<float>::constant(Tensor<float>(p.shape()))).backward();  // grad = p
  std::vector<ad::Var<float>> params{p};
  Optimizer<float> opt(OptimizerKind::kSgd, 0.5);
  opt.step(params);
  EXPECT_FLOAT_EQ(p.value()[0], 0.5f);
  EXPECT_FLOAT_EQ(p.value()[1], -1.0f);
}

TEST(Optimizer, AdamFirstStepMovesByLearningRate) {
  auto p = ad::Var<float>::leaf(Tensor<float>({1, 1, 1, 2}, std::vector<float>{1.0f, -2.0f}));
  ad::mse(p, ad::Var<float>::constant(Tensor<float>(p.shape()))).backward();
  std::vector<ad::Var<float>> params{p};
  Optimizer<float> opt(OptimizerKind::kAdam, 0.1);
  opt.step(params);
  EXPECT_NEAR(p.value()[0], 0.9f, 1e-6);
  EXPECT_NEAR(p.value()[1], -1.9f, 1e-6);
}
