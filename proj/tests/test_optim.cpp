#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "rise/core/checkpoint.hpp"
#include "rise/core/optim.hpp"

namespace rise {
namespace {

TEST(LrSchedule, WarmupEndHitsBaseRate) {
  OptimizerConfig cfg;  // lr 3e-4, warmup 2000, total 20000
  EXPECT_DOUBLE_EQ(lr_at(cfg, 2000), 3e-4);
}

TEST(LrSchedule, StartsAtZeroAndDecaysToZero) {
  OptimizerConfig cfg;
  EXPECT_DOUBLE_EQ(lr_at(cfg, 0), 0.0);
  EXPECT_NEAR(lr_at(cfg, cfg.total_steps), 0.0, 1e-12);
  EXPECT_NEAR(lr_at(cfg, cfg.total_steps + 500), 0.0, 1e-12);  // clamped past the end
  // midpoint of the cosine segment sits at half the base rate
  EXPECT_NEAR(lr_at(cfg, (2000 + 20000) / 2), 1.5e-4, 1e-12);
}

TEST(AdamW, ZeroGradZeroDecayLeavesParamsUnchanged) {
  ParamStore<float> store;
  Rng rng(1);
  auto p = store.create_randn("p", {4}, rng, 1.0);
  auto before = p.raw();
  OptimizerConfig cfg;
  cfg.weight_decay = 0.0;
  cfg.warmup_steps = 0;
  cfg.lr = 1e-3;
  AdamW<float> opt(store, cfg);
  opt.zero_grad();
  opt.step();
  EXPECT_EQ(p.raw(), before);
}

TEST(AdamW, MissingGradThrows) {
  ParamStore<float> store;
  Rng rng(2);
  store.create_randn("p", {4}, rng, 1.0);
  AdamW<float> opt(store, {});
  EXPECT_THROW(opt.step(), UsageError);
}

TEST(AdamW, HandComputedTwoStepRecurrence) {
  // Single scalar parameter, fixed grads g1 = 0.5, g2 = -0.25; flat lr.
  const double lr = 1e-2, b1 = 0.9, b2 = 0.95, eps = 1e-8;
  ParamStore<double> store;
  auto p = store.create("p", {1});
  p.raw()[0] = 1.0;
  OptimizerConfig cfg;
  cfg.lr = lr;
  cfg.beta1 = b1;
  cfg.beta2 = b2;
  cfg.eps = eps;
  cfg.weight_decay = 0.0;
  cfg.warmup_steps = 0;
  cfg.total_steps = 1000000000;  // cosine decay negligible over two steps
  AdamW<double> opt(store, cfg);

  double x = 1.0, m = 0.0, v = 0.0;
  double grads[2] = {0.5, -0.25};
  for (int t = 1; t <= 2; ++t) {
    double g = grads[t - 1];
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    double mhat = m / (1 - std::pow(b1, t));
    double vhat = v / (1 - std::pow(b2, t));
    double lr_t = lr_at(cfg, t);
    x -= lr_t * mhat / (std::sqrt(vhat) + eps);

    p.zero_grad();
    p.raw_grad()[0] = g;
    opt.step();
    EXPECT_NEAR(p.raw()[0], x, 1e-12) << "step " << t;
  }
}

TEST(AdamW, DecoupledDecayShrinksParam) {
  ParamStore<double> store;
  auto p = store.create("p", {1});
  p.raw()[0] = 2.0;
  OptimizerConfig cfg;
  cfg.lr = 1e-2;
  cfg.weight_decay = 0.1;
  cfg.warmup_steps = 0;
  cfg.total_steps = 1000000000;
  AdamW<double> opt(store, cfg);
  p.zero_grad();
  opt.step();
  double lr1 = lr_at(cfg, 1);
  EXPECT_NEAR(p.raw()[0], 2.0 - lr1 * 0.1 * 2.0, 1e-12);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  namespace fs = std::filesystem;
  auto path = (fs::temp_directory_path() / "rise_ckpt_test.bin").string();
  ParamStore<float> store;
  Rng rng(3);
  auto a = store.create_randn("enc.w", {3, 4}, rng, 1.0);
  auto b = store.create_randn("head.bias", {7}, rng, 1.0);
  save_checkpoint(store, path);

  ParamStore<float> loaded;
  loaded.create("enc.w", {3, 4});
  loaded.create("head.bias", {7});
  load_checkpoint(loaded, path);
  EXPECT_EQ(loaded.find("enc.w")->raw(), a.raw());
  EXPECT_EQ(loaded.find("head.bias")->raw(), b.raw());
  fs::remove(path);
}

TEST(Checkpoint, TruncationAndVersionErrors) {
  namespace fs = std::filesystem;
  auto path = (fs::temp_directory_path() / "rise_ckpt_trunc.bin").string();
  ParamStore<float> store;
  Rng rng(4);
  store.create_randn("p", {64}, rng, 1.0);
  save_checkpoint(store, path);

  // truncate payload
  fs::resize_file(path, fs::file_size(path) - 10);
  ParamStore<float> loaded;
  loaded.create("p", {64});
  EXPECT_THROW(load_checkpoint(loaded, path), FormatError);

  // flip the version digit in the magic
  {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(7);
    f.put('9');
  }
  EXPECT_THROW(load_checkpoint(loaded, path), UnsupportedVersionError);
  fs::remove(path);
}

TEST(Checkpoint, WrongShapeOrUnknownNameThrows) {
  namespace fs = std::filesystem;
  auto path = (fs::temp_directory_path() / "rise_ckpt_shape.bin").string();
  ParamStore<float> store;
  Rng rng(5);
  store.create_randn("p", {8}, rng, 1.0);
  save_checkpoint(store, path);

  ParamStore<float> wrong_shape;
  wrong_shape.create("p", {4});
  EXPECT_THROW(load_checkpoint(wrong_shape, path), UsageError);

  ParamStore<float> wrong_name;
  wrong_name.create("q", {8});
  EXPECT_THROW(load_checkpoint(wrong_name, path), UsageError);
  fs::remove(path);
}

}  // namespace
}  // namespace rise
