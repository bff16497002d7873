#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "cfbench/flow/flows.hpp"
#include "test_util.hpp"

using namespace cfbench;
using flows::DGraph;
using flows::DVar;
using flows::FitOptions;
using flows::FlowConfig;
using flows::FlowStack;
using flows::LayerConfig;
using flows::LayerKind;
using flows::TD;

namespace {

TD const_ctx(int rows, std::vector<double> vals) {
  TD ctx({rows, static_cast<int>(vals.size())});
  for (int r = 0; r < rows; ++r)
    for (size_t c = 0; c < vals.size(); ++c)
      ctx[static_cast<int64_t>(r) * vals.size() + c] = vals[c];
  return ctx;
}

}  // namespace

TEST_CASE("flow round trip is exact in both directions") {
  FlowStack st(FlowConfig::default_stack(3), 17);
  st.set_value_stats(0.4, 2.1);

  nn::Rng rng(5);
  const int n = 2000;
  TD ctx({n, 3});
  for (int64_t i = 0; i < ctx.numel(); ++i) ctx[i] = rng.uniform(-2.0, 2.0);

  TD v({n, 1});
  for (int i = 0; i < n; ++i) v[i] = rng.uniform(-12.0, 12.0);
  TD v_back = st.forward(st.inverse(v, ctx), ctx);
  double worst_v = (v_back.array() - v.array()).abs().maxCoeff();
  CHECK(worst_v < 1e-6);

  TD u({n, 1});
  for (int i = 0; i < n; ++i) u[i] = rng.normal();
  TD u_back = st.inverse(st.forward(u, ctx), ctx);
  double worst_u = (u_back.array() - u.array()).abs().maxCoeff();
  CHECK(worst_u < 1e-6);
}

TEST_CASE("flow density integrates to one") {
  FlowStack st(FlowConfig::default_stack(2), 23);
  st.set_value_stats(0.3, 1.7);
  TD ctx1 = const_ctx(1, {0.8, -1.1});

  // Simpson quadrature over a range wide enough for the tails to vanish.
  const double lo = -40.0, hi = 40.0;
  const int m = 8000;  // panels
  const double h = (hi - lo) / m;
  auto dens = [&](double x) {
    TD v({1, 1});
    v[0] = x;
    return std::exp(st.log_prob(v, ctx1)[0]);
  };
  double total = dens(lo) + dens(hi);
  for (int i = 1; i < m; ++i) total += (i % 2 ? 4.0 : 2.0) * dens(lo + i * h);
  total *= h / 3.0;
  CHECK(total == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("spline graph pass matches the plain evaluation") {
  LayerConfig lc;
  lc.kind = LayerKind::spline;
  lc.hidden = 8;
  lc.bins = 6;
  lc.bound = 3.0;
  FlowConfig cfg;
  cfg.ctx_dim = 2;
  cfg.layers = {lc};
  FlowStack st(cfg, 31);

  nn::Rng rng(9);
  const int n = 64;
  TD ctx({n, 2});
  for (int64_t i = 0; i < ctx.numel(); ++i) ctx[i] = rng.uniform(-1.5, 1.5);
  TD v({n, 1});
  for (int i = 0; i < n; ++i) v[i] = rng.uniform(-4.0, 4.0);  // includes tail rows

  TD eager_ld;
  TD eager_u = st.layers()[0].invert(v, ctx, &eager_ld);

  DGraph g;
  auto [u_node, ld_node] = st.layers()[0].normalize(g, g.constant(v), g.constant(ctx));
  for (int i = 0; i < n; ++i) {
    CHECK(u_node->val[i] == doctest::Approx(eager_u[i]).epsilon(1e-12));
    CHECK(ld_node->val[i] == doctest::Approx(eager_ld[i]).epsilon(1e-12));
  }
}

TEST_CASE("flow log-density gradients match finite differences") {
  FlowConfig cfg;
  cfg.ctx_dim = 2;
  LayerConfig ss;
  ss.kind = LayerKind::scale_shift;
  LayerConfig aff;
  aff.kind = LayerKind::affine;
  aff.hidden = 0;
  LayerConfig sp;
  sp.kind = LayerKind::spline;
  sp.hidden = 6;
  sp.bins = 4;
  sp.bound = 3.0;
  cfg.layers = {ss, aff, sp};
  FlowStack st(cfg, 41);

  nn::Rng rng(3);
  const int n = 12;
  TD ctx({n, 2});
  for (int64_t i = 0; i < ctx.numel(); ++i) ctx[i] = rng.uniform(-1.0, 1.0);
  TD v({n, 1});
  // Mix of interior points and points beyond the spline bound; keep every
  // point away from the boundary so finite differences stay on one branch.
  for (int i = 0; i < n; ++i) v[i] = rng.uniform(-2.0, 2.0);
  v[0] = 4.5;
  v[1] = -4.5;

  nn::ParamList<double> ps;
  st.collect(ps);
  testutil::check_grads(ps, [&](DGraph& g) {
    DVar lp = st.log_prob_nodes(g, g.constant(v), g.constant(ctx));
    return testutil::project(g, lp);
  });
}

TEST_CASE("flow fits a gamma distribution") {
  nn::Rng rng(101);
  const int n_train = 6000, n_val = 1200;
  TD tv({n_train, 1}), vv({n_val, 1});
  for (int i = 0; i < n_train; ++i) tv[i] = rng.gamma(2.0, 2.0);
  for (int i = 0; i < n_val; ++i) vv[i] = rng.gamma(2.0, 2.0);

  FlowStack st(FlowConfig::default_stack(0), 7);
  FitOptions opts;
  opts.seed = 13;
  opts.max_epochs = 60;
  flows::FitResult res = st.fit(tv, TD({n_train, 1}), vv, TD({n_val, 1}), opts);
  CHECK(res.best_val_nll <= res.init_val_nll);
  CHECK(st.trained());

  // Model samples against the analytic CDF of Gamma(shape 2, scale 2):
  // F(x) = 1 - exp(-x/2) * (1 + x/2).
  const int m = 6000;
  TD u({m, 1});
  nn::Rng srng(55);
  for (int i = 0; i < m; ++i) u[i] = srng.normal();
  TD samples = st.forward(u, TD({m, 1}));
  std::vector<double> xs(samples.data(), samples.data() + m);
  double d = testutil::ks_statistic(xs, [](double x) {
    if (x <= 0) return 0.0;
    return 1.0 - std::exp(-x / 2.0) * (1.0 + x / 2.0);
  });
  CHECK(d < 0.05);
}

TEST_CASE("flow fit captures a conditional shift") {
  // v = 3 c - 1 + 0.5 eps; the conditional NLL should approach the entropy
  // of a normal with stddev 0.5.
  nn::Rng rng(77);
  auto make = [&](int n, TD& v, TD& c) {
    v = TD({n, 1});
    c = TD({n, 1});
    for (int i = 0; i < n; ++i) {
      c[i] = rng.uniform(-1.0, 1.0);
      v[i] = 3.0 * c[i] - 1.0 + 0.5 * rng.normal();
    }
  };
  TD tv, tc, vv, vc;
  make(4000, tv, tc);
  make(800, vv, vc);

  FlowConfig cfg;
  cfg.ctx_dim = 1;
  LayerConfig ss;
  ss.kind = LayerKind::scale_shift;
  LayerConfig aff;
  aff.kind = LayerKind::affine;
  aff.hidden = 16;
  cfg.layers = {ss, aff};
  FlowStack st(cfg, 3);

  FitOptions opts;
  opts.seed = 29;
  opts.max_epochs = 50;
  flows::FitResult res = st.fit(tv, tc, vv, vc, opts);

  const double entropy = 0.5 * std::log(2.0 * M_PI * std::exp(1.0) * 0.25);
  CHECK(res.best_val_nll < res.init_val_nll);
  CHECK(res.best_val_nll == doctest::Approx(entropy).epsilon(0.2));

  // The conditional median should track the linear relation.
  for (double c0 : {-0.8, 0.0, 0.9}) {
    TD u({1, 1});
    TD med = st.forward(u, const_ctx(1, {c0}));
    CHECK(med[0] == doctest::Approx(3.0 * c0 - 1.0).epsilon(0.15));
  }
}

TEST_CASE("flow fit rejects a degenerate value column") {
  TD v({100, 1});
  v.array().setConstant(3.25);
  FlowStack st(FlowConfig::default_stack(0), 1);
  FitOptions opts;
  CHECK_THROWS_AS(st.fit(v, TD({100, 1}), v, TD({100, 1}), opts), ValidationError);
}

TEST_CASE("flow checkpoint round trip preserves behavior") {
  FlowStack st(FlowConfig::default_stack(2), 91);
  st.set_value_stats(1.5, 0.7);
  st.mark_trained();

  auto path = std::filesystem::temp_directory_path() / "cfbench_flow_ckpt_test.bin";
  nn::Checkpoint ck;
  st.save(ck, "flow");
  nn::save_checkpoint(path.string(), ck);
  nn::Checkpoint back = nn::load_checkpoint(path.string());
  FlowStack st2 = FlowStack::load(back, "flow");
  std::filesystem::remove(path);

  CHECK(st2.trained());
  CHECK(st2.value_stats() == std::pair<double, double>(1.5, 0.7));

  nn::Rng rng(6);
  TD ctx({50, 2});
  for (int64_t i = 0; i < ctx.numel(); ++i) ctx[i] = rng.uniform(-1.0, 1.0);
  TD v({50, 1});
  for (int i = 0; i < 50; ++i) v[i] = rng.uniform(-5.0, 5.0);

  TD a = st.log_prob(v, ctx), b = st2.log_prob(v, ctx);
  for (int i = 0; i < 50; ++i) CHECK(a[i] == b[i]);
  TD ia = st.inverse(v, ctx), ib = st2.inverse(v, ctx);
  for (int i = 0; i < 50; ++i) CHECK(ia[i] == ib[i]);
}
