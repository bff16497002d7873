#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include "cfbench/data/glyphs.hpp"
#include "cfbench/pred/predictor.hpp"
#include "test_util.hpp"

using namespace cfbench;
using data::Dataset;
using pred::FeatureExtractor;
using pred::Predictor;
using pred::PredictorConfig;
using pred::PredictorSpec;
using pred::Role;

namespace {

Dataset small_glyphs(int n, uint64_t seed) {
  data::GlyphConfig cfg;
  cfg.n = n;
  cfg.seed = seed;
  return data::generate_glyphs(cfg);
}

PredictorSpec digit_spec() {
  PredictorSpec s;
  s.target = "digit";
  s.target_kind = scm::VarKind::categorical;
  s.categories = 10;
  s.feature_dim = 64;
  return s;
}

}  // namespace

TEST_CASE("balanced batches keep class ratios near half") {
  // 10% positives, the imbalance the sampler exists for.
  std::vector<int> labels(1000, 0);
  for (int i = 0; i < 100; ++i) labels[i * 10] = 1;
  nn::Rng rng(7);
  auto batches = pred::balanced_batches(labels, 2, 256, rng);
  CHECK(batches.size() == 4);
  for (const auto& b : batches) {
    REQUIRE(static_cast<int>(b.size()) == 256);
    int pos = 0;
    for (int i : b) pos += labels[i];
    double ratio = static_cast<double>(pos) / b.size();
    CHECK(ratio >= 0.45);
    CHECK(ratio <= 0.55);
  }

  std::vector<int> single(50, 2);
  CHECK_THROWS_AS(pred::balanced_batches(single, 3, 16, rng), ValidationError);
}

TEST_CASE("degenerate single-class target is rejected") {
  Dataset ds = small_glyphs(60, 5);
  for (auto& c : ds.attrs)
    if (c.name == "digit") std::fill(c.cat.begin(), c.cat.end(), 3);
  Predictor p(digit_spec(), 1);
  PredictorConfig cfg;
  cfg.seed = 1;
  CHECK_THROWS_AS(p.fit(ds, cfg), ValidationError);
}

TEST_CASE("glyph digit classifier reaches high validation accuracy") {
  Dataset ds = small_glyphs(1800, 11);
  Predictor p(digit_spec(), 3);
  PredictorConfig cfg;
  cfg.seed = 3;
  cfg.batch = 128;
  cfg.max_epochs = 12;
  cfg.patience = 6;
  auto rep = p.fit(ds, cfg);
  CHECK(rep.best_val_loss < rep.init_val_loss);
  CHECK(rep.val_accuracy >= 0.95);

  // Deterministic outputs, probabilities normalized, duplicate rows agree.
  auto val = ds.indices_of(data::Split::val);
  nn::TensorF imgs({2, ds.height * ds.width});
  for (int64_t c = 0; c < imgs.cols(); ++c) {
    imgs[c] = ds.images[val[0] * imgs.cols() + c];
    imgs[imgs.cols() + c] = imgs[c];
  }
  auto out = p.predict(imgs, {});
  CHECK(out.cls[0] == out.cls[1]);
  for (int i = 0; i < 2; ++i) {
    double sum = 0.0;
    for (int c = 0; c < 10; ++c) sum += out.probs(i, c);
    CHECK(std::abs(sum - 1.0) <= 1e-6);
    // Identical rows may land in different GEMM micro-kernels, so allow
    // last-bit rounding differences between batch positions.
    for (int c = 0; c < 10; ++c)
      CHECK(std::abs(out.probs(i, c) - out.probs(0, c)) <= 1e-9);
  }
  // Repeated calls on the same tensor are bit-identical.
  auto rerun = p.predict(imgs, {});
  for (int c = 0; c < 10; ++c) CHECK(rerun.probs(0, c) == out.probs(0, c));

  // Checkpoint round trip reproduces predictions exactly.
  nn::Checkpoint ck;
  p.save(ck);
  auto path = std::filesystem::temp_directory_path() / "cfbench_pred_test.ckpt";
  nn::save_checkpoint(path.string(), ck);
  Predictor q = Predictor::load(nn::load_checkpoint(path.string()));
  std::filesystem::remove(path);
  CHECK(q.trained());
  CHECK(q.spec().role == Role::evaluation);
  auto out2 = q.predict(imgs, {});
  CHECK(out2.cls[0] == out.cls[0]);
  bool same = true;
  for (int c = 0; c < 10; ++c) same &= out2.probs(0, c) == out.probs(0, c);
  CHECK(same);

  // Held-out accuracy against manifest labels.
  auto test_rows = ds.indices_of(data::Split::test);
  nn::TensorF timgs({static_cast<int>(test_rows.size()), ds.height * ds.width});
  for (size_t i = 0; i < test_rows.size(); ++i)
    for (int64_t c = 0; c < timgs.cols(); ++c)
      timgs[static_cast<int64_t>(i) * timgs.cols() + c] =
          ds.images[test_rows[i] * timgs.cols() + c];
  auto tout = p.predict(timgs, {});
  int hits = 0;
  const auto& labels = ds.attr("digit").cat;
  for (size_t i = 0; i < test_rows.size(); ++i)
    if (tout.cls[static_cast<int>(i)] == labels[test_rows[i]]) ++hits;
  CHECK(static_cast<double>(hits) / test_rows.size() >= 0.95);
}

TEST_CASE("glyph thickness regressor tracks the oracle labels") {
  Dataset ds = small_glyphs(1600, 13);
  PredictorSpec s;
  s.target = "thickness";
  s.target_kind = scm::VarKind::continuous;
  s.children = {"intensity"};  // anti-causal conditioning on the child
  s.feature_dim = 64;
  Predictor p(s, 4);
  PredictorConfig cfg;
  cfg.seed = 4;
  cfg.batch = 128;
  cfg.max_epochs = 14;
  cfg.patience = 6;
  auto rep = p.fit(ds, cfg);
  CHECK(rep.best_val_loss < rep.init_val_loss);

  auto val = ds.indices_of(data::Split::val);
  nn::TensorF imgs({static_cast<int>(val.size()), ds.height * ds.width});
  std::vector<std::vector<scm::Value>> kids(val.size());
  const auto& tn = ds.attr("thickness").num;
  const auto& in = ds.attr("intensity").num;
  for (size_t i = 0; i < val.size(); ++i) {
    for (int64_t c = 0; c < imgs.cols(); ++c)
      imgs[static_cast<int64_t>(i) * imgs.cols() + c] = ds.images[val[i] * imgs.cols() + c];
    kids[i] = {scm::Value::number(in[val[i]])};
  }
  auto out = p.predict(imgs, kids);
  double mae = 0.0;
  for (size_t i = 0; i < val.size(); ++i) {
    CHECK(std::isfinite(out.num[static_cast<int>(i)]));
    mae += std::abs(out.num[static_cast<int>(i)] - tn[val[i]]);
  }
  mae /= static_cast<double>(val.size());
  CHECK(mae <= 0.3);

  // A clean render at a known thickness is recovered within half a pixel.
  data::GlyphParams gp;
  gp.digit = 7;
  gp.thickness = 4.0;
  gp.intensity = data::glyph_intensity(4.0, 0.0);
  auto img = data::render_glyph(gp, 32, 32);
  auto est = p.predict(img, {{scm::Value::number(gp.intensity)}});
  CHECK(std::abs(est.num[0] - 4.0) <= 0.5);

  // Missing child conditioning fails loudly.
  CHECK_THROWS_AS(p.predict(img, {}), ValidationError);
}

TEST_CASE("classifier image gradients point uphill") {
  Dataset ds = small_glyphs(200, 17);
  PredictorSpec s = digit_spec();
  s.feature_dim = 16;
  Predictor p(s, 6);
  PredictorConfig cfg;
  cfg.seed = 6;
  cfg.batch = 64;
  cfg.max_epochs = 2;
  cfg.patience = 2;
  p.fit(ds, cfg);

  nn::TensorF imgs({2, ds.height * ds.width});
  for (int64_t c = 0; c < imgs.cols(); ++c) {
    imgs[c] = ds.images[c];
    imgs[imgs.cols() + c] = ds.images[imgs.cols() + c];
  }
  std::vector<scm::Value> targets = {scm::Value::category(ds.attr("digit").cat[0]),
                                     scm::Value::category(ds.attr("digit").cat[1])};
  auto [loss, grad] = p.loss_and_image_grad(imgs, targets, {});
  CHECK(std::isfinite(loss));
  REQUIRE(grad.numel() == imgs.numel());

  double norm = 0.0;
  for (int64_t i = 0; i < grad.numel(); ++i) norm += grad[i] * grad[i];
  norm = std::sqrt(norm);
  REQUIRE(norm > 0.0);

  auto loss_at = [&](double step) {
    nn::TensorF shifted = imgs;
    for (int64_t i = 0; i < shifted.numel(); ++i)
      shifted[i] += static_cast<float>(step * grad[i] / norm);
    return p.loss_and_image_grad(shifted, targets, {}).first;
  };
  CHECK(loss_at(0.25) > loss);
  CHECK(loss_at(-0.25) < loss);
}

TEST_CASE("feature extractor learns all attributes and round trips") {
  Dataset ds = small_glyphs(900, 19);
  FeatureExtractor fx(ds, 64, 2);
  CHECK(fx.id().find("glyphs") != std::string::npos);
  PredictorConfig cfg;
  cfg.seed = 2;
  cfg.batch = 128;
  cfg.max_epochs = 8;
  cfg.patience = 4;
  auto rep = fx.fit(ds, cfg);
  CHECK(rep.best_val_loss < rep.init_val_loss);

  nn::TensorF imgs({3, ds.height * ds.width});
  for (int64_t c = 0; c < imgs.cols(); ++c) {
    imgs[c] = ds.images[c];
    imgs[imgs.cols() + c] = ds.images[imgs.cols() + c];
    imgs[2 * imgs.cols() + c] = ds.images[c];
  }
  auto f = fx.features(imgs);
  CHECK(f.rows() == 3);
  CHECK(f.cols() == 64);
  bool dup_equal = true, distinct = false;
  for (int c = 0; c < 64; ++c) {
    dup_equal &= f[c] == f[2 * 64 + c];
    distinct |= f[c] != f[64 + c];
  }
  CHECK(dup_equal);
  CHECK(distinct);

  nn::Checkpoint ck;
  fx.save(ck);
  auto path = std::filesystem::temp_directory_path() / "cfbench_fx_test.ckpt";
  nn::save_checkpoint(path.string(), ck);
  FeatureExtractor fy = FeatureExtractor::load(nn::load_checkpoint(path.string()));
  std::filesystem::remove(path);
  CHECK(fy.id() == fx.id());
  auto f2 = fy.features(imgs);
  bool same = true;
  for (int64_t i = 0; i < f.numel(); ++i) same &= f[i] == f2[i];
  CHECK(same);
}

TEST_CASE("predictor roles serialize and validate") {
  CHECK(pred::to_string(Role::evaluation) == "evaluation");
  CHECK(pred::role_from_string("finetune-guidance") == Role::finetune_guidance);
  CHECK_THROWS_AS(pred::role_from_string("teacher"), ValidationError);
}
