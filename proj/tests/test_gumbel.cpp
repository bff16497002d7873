#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "cfbench/flow/gumbel.hpp"
#include "test_util.hpp"

using namespace cfbench;
using flows::CategoricalMechanism;
using flows::TD;
using scm::AbductOptions;
using scm::Value;

namespace {

std::shared_ptr<CategoricalMechanism> root_mech(const std::vector<double>& logits) {
  auto m = std::make_shared<CategoricalMechanism>(static_cast<int>(logits.size()),
                                                  scm::ParentCodec{}, 0, 1);
  m->set_root_logits(Eigen::RowVectorXd::Map(logits.data(), logits.size()));
  m->mark_trained();
  return m;
}

}  // namespace

TEST_CASE("categorical abduction reproduces the observed class") {
  auto m = root_mech({0.9, -0.4, 0.3, -1.2});
  for (int k = 0; k < 4; ++k) {
    AbductOptions mean;
    auto noise = m->abduct(Value::category(k), {}, mean);
    CHECK(m->predict(noise, {}).cat() == k);

    for (uint64_t seed : {1ull, 2ull, 99ull}) {
      AbductOptions s;
      s.latent_mode = AbductOptions::LatentMode::sample;
      s.seed = seed;
      auto sn = m->abduct(Value::category(k), {}, s);
      CHECK(m->predict(sn, {}).cat() == k);
    }
  }
}

TEST_CASE("categorical abduction is deterministic per mode and seed") {
  auto m = root_mech({0.2, 1.1, -0.7});
  AbductOptions mean;
  auto a = m->abduct(Value::category(1), {}, mean);
  auto b = m->abduct(Value::category(1), {}, mean);
  CHECK((a.gumbels.array() == b.gumbels.array()).all());

  AbductOptions s1;
  s1.latent_mode = AbductOptions::LatentMode::sample;
  s1.seed = 5;
  auto c = m->abduct(Value::category(1), {}, s1);
  auto d = m->abduct(Value::category(1), {}, s1);
  CHECK((c.gumbels.array() == d.gumbels.array()).all());
  s1.seed = 6;
  auto e = m->abduct(Value::category(1), {}, s1);
  CHECK((c.gumbels.array() != e.gumbels.array()).any());
}

// Oracle: the abducted noise must be distributed like i.i.d. standard Gumbel
// noise conditioned on producing the observed class. Rejection sampling gives
// that conditional law directly; pushing both versions through new logits
// must then give matching class distributions.
TEST_CASE("categorical counterfactual matches a rejection-sampling oracle") {
  std::vector<double> src{0.9, -0.4, 0.3, -1.2};
  std::vector<double> tgt{-0.8, 1.1, 0.05, -2.0};
  auto src_m = root_mech(src);
  auto tgt_m = root_mech(tgt);
  const int K = 4;
  Eigen::RowVectorXd phi_src = src_m->log_probs({});
  Eigen::RowVectorXd phi_tgt = tgt_m->log_probs({});

  const int observed = 2;
  const int n = 30000;

  // Rejection: keep i.i.d. Gumbel draws whose argmax under the source logits
  // is the observed class.
  std::vector<double> truth(K, 0.0);
  nn::Rng rng(2024);
  int kept = 0;
  while (kept < n) {
    Eigen::RowVectorXd g(K);
    for (int i = 0; i < K; ++i) g[i] = rng.gumbel();
    int arg_src, arg_tgt;
    (phi_src + g).maxCoeff(&arg_src);
    if (arg_src != observed) continue;
    (phi_tgt + g).maxCoeff(&arg_tgt);
    truth[arg_tgt] += 1.0;
    ++kept;
  }
  for (double& t : truth) t /= n;

  // Truncated-Gumbel abduction, one sample per seed.
  std::vector<double> est(K, 0.0);
  for (int s = 0; s < n; ++s) {
    AbductOptions opts;
    opts.latent_mode = AbductOptions::LatentMode::sample;
    opts.seed = static_cast<uint64_t>(s) + 1;
    auto noise = src_m->abduct(Value::category(observed), {}, opts);
    est[tgt_m->predict(noise, {}).cat()] += 1.0;
  }
  for (double& t : est) t /= n;

  for (int i = 0; i < K; ++i) {
    CAPTURE(i);
    CHECK(std::abs(truth[i] - est[i]) < 0.02);
  }
}

TEST_CASE("categorical fit recovers a conditional distribution") {
  // y | c with logits proportional to (2c, -2c, 0.5): fit should get close
  // to the analytic conditional cross-entropy.
  scm::ParentCodec codec;
  codec.entries.push_back({"c", scm::VarKind::continuous, 0, 0.0, 1.0});
  CategoricalMechanism mech(3, codec, 16, 11);

  nn::Rng rng(404);
  auto logits_for = [](double c) {
    Eigen::RowVector3d l(2.0 * c, -2.0 * c, 0.5);
    return l;
  };
  auto sample_set = [&](int n, std::vector<int>& y, TD& ctx) {
    y.resize(n);
    ctx = TD({n, 1});
    double avg_ce = 0.0;
    for (int i = 0; i < n; ++i) {
      double c = rng.uniform(-1.0, 1.0);
      ctx[i] = c;
      Eigen::RowVector3d l = logits_for(c);
      Eigen::RowVector3d p = (l.array() - l.maxCoeff()).exp();
      p /= p.sum();
      double u = rng.uniform(), acc = 0.0;
      int pick = 2;
      for (int k = 0; k < 3; ++k) {
        acc += p[k];
        if (u <= acc) {
          pick = k;
          break;
        }
      }
      y[i] = pick;
      avg_ce -= std::log(p[pick]);
    }
    return avg_ce / n;
  };

  std::vector<int> ty, vy;
  TD tc, vc;
  sample_set(4000, ty, tc);
  double val_ref = sample_set(1000, vy, vc);

  flows::FitOptions opts;
  opts.seed = 21;
  opts.max_epochs = 40;
  opts.batch = 128;
  auto res = mech.fit(ty, tc, vy, vc, opts);
  CHECK(mech.trained());
  CHECK(res.best_val_nll < res.init_val_nll);
  CHECK(res.best_val_nll < val_ref + 0.08);

  // Conditioning must move the log-probabilities in the right direction.
  auto lp_pos = mech.log_probs({Value::number(0.9)});
  auto lp_neg = mech.log_probs({Value::number(-0.9)});
  CHECK(lp_pos[0] > lp_neg[0]);
  CHECK(lp_pos[1] < lp_neg[1]);
}

TEST_CASE("categorical fit rejects single-class labels") {
  CategoricalMechanism mech(3, scm::ParentCodec{}, 0, 1);
  std::vector<int> y(50, 1);
  flows::FitOptions opts;
  CHECK_THROWS_AS(mech.fit(y, TD({50, 1}), y, TD({50, 1}), opts), ValidationError);
}

TEST_CASE("categorical checkpoint round trip preserves behavior") {
  scm::ParentCodec codec;
  codec.entries.push_back({"g", scm::VarKind::categorical, 2, 0.0, 1.0});
  CategoricalMechanism mech(4, codec, 8, 77);
  mech.mark_trained();

  auto path = std::filesystem::temp_directory_path() / "cfbench_cat_ckpt_test.bin";
  nn::Checkpoint ck;
  mech.save(ck);
  nn::save_checkpoint(path.string(), ck);
  auto back = CategoricalMechanism::load(nn::load_checkpoint(path.string()));
  std::filesystem::remove(path);

  CHECK(back->trained());
  CHECK(back->categories() == 4);
  for (int g = 0; g < 2; ++g) {
    auto a = mech.log_probs({Value::category(g)});
    auto b = back->log_probs({Value::category(g)});
    for (int i = 0; i < 4; ++i) CHECK(a[i] == b[i]);
  }
}

TEST_CASE("categorical predict validates the noise payload") {
  auto m = root_mech({0.0, 0.0});
  scm::NoisePayload bad;
  bad.tag = scm::NoisePayload::Tag::scalar;
  CHECK_THROWS_AS(m->predict(bad, {}), ValidationError);
  scm::NoisePayload wrong;
  wrong.tag = scm::NoisePayload::Tag::gumbel;
  wrong.gumbels = Eigen::VectorXd::Zero(3);
  CHECK_THROWS_AS(m->predict(wrong, {}), ValidationError);
}
