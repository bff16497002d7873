#include <doctest.h>

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "cfbench/flow/flows.hpp"
#include "cfbench/flow/gumbel.hpp"
#include "cfbench/scm/graph.hpp"
#include "cfbench/scm/graph_spec.hpp"
#include "test_util.hpp"

using namespace cfbench;
using flows::FlowConfig;
using flows::FlowMechanism;
using flows::FlowStack;
using flows::LayerConfig;
using flows::LayerKind;
using scm::AbductOptions;
using scm::CausalGraph;
using scm::InterventionSet;
using scm::Observation;
using scm::Value;
using scm::VariableSpec;
using scm::VarKind;

namespace {

void set_param(FlowStack& st, const std::string& name, const std::vector<double>& vals) {
  nn::ParamList<double> ps;
  st.collect(ps);
  for (auto* p : ps) {
    if (p->name != name) continue;
    REQUIRE(p->value.numel() == static_cast<int64_t>(vals.size()));
    for (size_t i = 0; i < vals.size(); ++i) p->value[i] = vals[i];
    return;
  }
  FAIL("no parameter named ", name);
}

double raw_scale(double sigma) { return 6.0 * std::atanh(std::log(sigma) / 6.0); }

// x = mu + sigma * eps as a one-layer flow.
std::shared_ptr<FlowMechanism> gaussian_root(double mu, double sigma) {
  FlowConfig cfg;
  cfg.ctx_dim = 0;
  LayerConfig ss;
  ss.kind = LayerKind::scale_shift;
  cfg.layers = {ss};
  FlowStack st(cfg, 1);
  set_param(st, "f.l0.row", {mu, raw_scale(sigma)});
  st.mark_trained();
  return std::make_shared<FlowMechanism>(std::move(st), scm::ParentCodec{});
}

// x = sum_i coeff_i * parent_i + offset + sigma * eps. The codec carries
// arbitrary standardization stats, so the head weights fold them back out.
std::shared_ptr<FlowMechanism> linear_child(const std::vector<std::string>& parents,
                                            const std::vector<double>& means,
                                            const std::vector<double>& stds,
                                            const std::vector<double>& coeffs, double offset,
                                            double sigma) {
  const int d = static_cast<int>(parents.size());
  scm::ParentCodec codec;
  for (int i = 0; i < d; ++i)
    codec.entries.push_back({parents[i], VarKind::continuous, 0, means[i], stds[i]});

  FlowConfig cfg;
  cfg.ctx_dim = d;
  LayerConfig aff;
  aff.kind = LayerKind::affine;
  aff.hidden = 0;
  cfg.layers = {aff};
  FlowStack st(cfg, 1);

  std::vector<double> w(static_cast<size_t>(d) * 2, 0.0);
  double b0 = offset;
  for (int i = 0; i < d; ++i) {
    w[static_cast<size_t>(i) * 2] = coeffs[i] * stds[i];
    b0 += coeffs[i] * means[i];
  }
  set_param(st, "f.l0.head.w", w);
  set_param(st, "f.l0.head.b", {b0, raw_scale(sigma)});
  st.mark_trained();
  return std::make_shared<FlowMechanism>(std::move(st), std::move(codec));
}

VariableSpec cont(const std::string& name, std::vector<std::string> parents = {}) {
  VariableSpec s;
  s.name = name;
  s.kind = VarKind::continuous;
  s.parents = std::move(parents);
  return s;
}

}  // namespace

// Chain with a shared cause: a -> b, a -> c, b -> c, all linear Gaussian.
// Counterfactuals then have closed forms, e.g. under do(b := v) the new c is
// c + delta * (v - b). One thousand randomized queries against that algebra.
TEST_CASE("linear gaussian counterfactuals match the closed form") {
  const double mu_a = 1.2, sd_a = 1.3;
  const double alpha = 0.8, beta = -0.4, sd_b = 0.6;
  const double gamma = -0.5, delta = 1.1, kappa = 0.3, sd_c = 0.9;

  CausalGraph g;
  g.add_variable(cont("a"));
  g.add_variable(cont("b", {"a"}));
  g.add_variable(cont("c", {"a", "b"}));
  g.set_mechanism("a", gaussian_root(mu_a, sd_a));
  g.set_mechanism("b", linear_child({"a"}, {0.5}, {2.0}, {alpha}, beta, sd_b));
  g.set_mechanism("c", linear_child({"a", "b"}, {0.5, 1.0}, {2.0, 1.5}, {gamma, delta}, kappa,
                                    sd_c));

  nn::Rng rng(555);
  double worst = 0.0;
  for (int q = 0; q < 1000; ++q) {
    double ea = rng.normal(), eb = rng.normal(), ec = rng.normal();
    double a = mu_a + sd_a * ea;
    double b = alpha * a + beta + sd_b * eb;
    double c = gamma * a + delta * b + kappa + sd_c * ec;
    Observation obs{{"a", Value::number(a)}, {"b", Value::number(b)}, {"c", Value::number(c)}};

    InterventionSet iv;
    int mode = static_cast<int>(rng.below(5));
    bool do_a = mode == 1 || mode == 4;
    bool do_b = mode == 2 || mode == 4;
    bool do_c = mode == 3;
    double av = rng.uniform(-3.0, 3.0), bv = rng.uniform(-3.0, 3.0), cv = rng.uniform(-3.0, 3.0);
    if (do_a) iv.targets.emplace("a", Value::number(av));
    if (do_b) iv.targets.emplace("b", Value::number(bv));
    if (do_c) iv.targets.emplace("c", Value::number(cv));

    Observation out = scm::counterfactual(g, obs, iv, AbductOptions{});

    double ea_r = (a - mu_a) / sd_a;
    double eb_r = (b - alpha * a - beta) / sd_b;
    double ec_r = (c - gamma * a - delta * b - kappa) / sd_c;
    double a_star = do_a ? av : mu_a + sd_a * ea_r;
    double b_star = do_b ? bv : alpha * a_star + beta + sd_b * eb_r;
    double c_star = do_c ? cv : gamma * a_star + delta * b_star + kappa + sd_c * ec_r;

    worst = std::max(worst, std::abs(out.at("a").num() - a_star));
    worst = std::max(worst, std::abs(out.at("b").num() - b_star));
    worst = std::max(worst, std::abs(out.at("c").num() - c_star));
  }
  CHECK(worst < 1e-8);
}

TEST_CASE("null intervention reproduces the observation") {
  CausalGraph g;
  g.add_variable(cont("a"));
  g.add_variable(cont("b", {"a"}));
  g.set_mechanism("a", gaussian_root(0.0, 1.0));
  g.set_mechanism("b", linear_child({"a"}, {0.0}, {1.0}, {1.5}, 0.2, 0.5));

  nn::Rng rng(8);
  for (int q = 0; q < 200; ++q) {
    double a = rng.uniform(-4.0, 4.0), b = rng.uniform(-4.0, 4.0);
    Observation obs{{"a", Value::number(a)}, {"b", Value::number(b)}};
    Observation out = scm::counterfactual(g, obs, InterventionSet{}, AbductOptions{});
    CHECK(out.at("a").num() == doctest::Approx(a).epsilon(1e-12));
    CHECK(out.at("b").num() == doctest::Approx(b).epsilon(1e-12));
  }
}

TEST_CASE("mutilation is local to descendants of the target") {
  // a -> b and a -> c: intervening on b must leave c at its abducted value.
  CausalGraph g;
  g.add_variable(cont("a"));
  g.add_variable(cont("b", {"a"}));
  g.add_variable(cont("c", {"a"}));
  g.set_mechanism("a", gaussian_root(0.5, 1.1));
  g.set_mechanism("b", linear_child({"a"}, {0.0}, {1.0}, {2.0}, 0.0, 0.7));
  g.set_mechanism("c", linear_child({"a"}, {0.0}, {1.0}, {-1.0}, 1.0, 0.4));

  Observation obs{{"a", Value::number(0.9)}, {"b", Value::number(1.7)},
                  {"c", Value::number(0.3)}};
  InterventionSet on_b;
  on_b.targets.emplace("b", Value::number(-2.0));

  Observation base = scm::counterfactual(g, obs, InterventionSet{}, AbductOptions{});
  Observation cut = scm::counterfactual(g, obs, on_b, AbductOptions{});
  CHECK(cut.at("b").num() == -2.0);
  CHECK(cut.at("a").num() == base.at("a").num());
  CHECK(cut.at("c").num() == base.at("c").num());

  auto view = scm::intervene(g, on_b);
  CHECK(view.parents_of("b").empty());
  CHECK(view.parents_of("c") == std::vector<std::string>{"a"});
}

TEST_CASE("graphs with categorical variables reconstruct and stay deterministic") {
  scm::ParentCodec codec;
  codec.entries.push_back({"a", VarKind::continuous, 0, 0.0, 1.0});
  auto cat = std::make_shared<flows::CategoricalMechanism>(3, codec, 8, 99);
  cat->mark_trained();

  CausalGraph g;
  g.add_variable(cont("a"));
  VariableSpec d;
  d.name = "d";
  d.kind = VarKind::categorical;
  d.categories = 3;
  d.parents = {"a"};
  g.add_variable(d);
  g.set_mechanism("a", gaussian_root(0.0, 1.0));
  g.set_mechanism("d", cat);

  Observation obs{{"a", Value::number(0.4)}, {"d", Value::category(2)}};

  // Identity under the deterministic mode and under sampling.
  Observation out = scm::counterfactual(g, obs, InterventionSet{}, AbductOptions{});
  CHECK(out.at("d").cat() == 2);
  AbductOptions sample;
  sample.latent_mode = AbductOptions::LatentMode::sample;
  sample.seed = 31;
  Observation out_s = scm::counterfactual(g, obs, InterventionSet{}, sample);
  CHECK(out_s.at("d").cat() == 2);

  // Same seed gives the same noise record; the per-variable streams differ.
  auto n1 = scm::abduct(g, obs, sample);
  auto n2 = scm::abduct(g, obs, sample);
  CHECK((n1.at("d").gumbels.array() == n2.at("d").gumbels.array()).all());

  InterventionSet shift;
  shift.targets.emplace("a", Value::number(2.5));
  Observation pushed = scm::counterfactual(g, obs, shift, AbductOptions{});
  CHECK(pushed.at("a").num() == 2.5);
  CHECK(pushed.at("d").cat() >= 0);
  CHECK(pushed.at("d").cat() < 3);
}

TEST_CASE("validation orders variables topologically with name ties") {
  CausalGraph g;
  g.add_variable(cont("z"));
  g.add_variable(cont("y"));
  g.add_variable(cont("x", {"y", "z"}));
  CHECK(scm::validate_graph(g) == std::vector<std::string>{"y", "z", "x"});

  CausalGraph h;
  h.add_variable(cont("c", {"b"}));
  h.add_variable(cont("b", {"a"}));
  h.add_variable(cont("a"));
  CHECK(scm::validate_graph(h) == std::vector<std::string>{"a", "b", "c"});
}

TEST_CASE("validation rejects malformed graphs") {
  CausalGraph cyc;
  cyc.add_variable(cont("a", {"b"}));
  cyc.add_variable(cont("b", {"a"}));
  try {
    scm::validate_graph(cyc);
    FAIL("cycle not detected");
  } catch (const ValidationError& e) {
    std::string msg = e.what();
    CHECK(msg.find("cycle") != std::string::npos);
    CHECK(msg.find('a') != std::string::npos);
    CHECK(msg.find('b') != std::string::npos);
  }

  CausalGraph dangling;
  dangling.add_variable(cont("a", {"ghost"}));
  CHECK_THROWS_AS(scm::validate_graph(dangling), ValidationError);

  CausalGraph self;
  self.add_variable(cont("a", {"a"}));
  CHECK_THROWS_AS(scm::validate_graph(self), ValidationError);

  CausalGraph dup_parent;
  dup_parent.add_variable(cont("a"));
  dup_parent.add_variable(cont("b", {"a", "a"}));
  CHECK_THROWS_AS(scm::validate_graph(dup_parent), ValidationError);

  CausalGraph dup_var;
  dup_var.add_variable(cont("a"));
  CHECK_THROWS_AS(dup_var.add_variable(cont("a")), ValidationError);
}

TEST_CASE("interventions and abduction validate their inputs") {
  CausalGraph g;
  g.add_variable(cont("a"));
  g.set_mechanism("a", gaussian_root(0.0, 1.0));

  InterventionSet unknown;
  unknown.targets.emplace("nope", Value::number(1.0));
  CHECK_THROWS_AS(scm::intervene(g, unknown), ValidationError);

  InterventionSet wrong_kind;
  wrong_kind.targets.emplace("a", Value::category(1));
  CHECK_THROWS_AS(scm::intervene(g, wrong_kind), ValidationError);

  Observation missing;
  CHECK_THROWS_AS(scm::abduct(g, missing, AbductOptions{}), ValidationError);

  Observation wrong;
  wrong.emplace("a", Value::category(0));
  CHECK_THROWS_AS(scm::abduct(g, wrong, AbductOptions{}), ValidationError);

  CausalGraph bare;
  bare.add_variable(cont("a"));
  Observation ok{{"a", Value::number(0.0)}};
  CHECK_THROWS_AS(scm::abduct(bare, ok, AbductOptions{}), ValidationError);

  // Untrained mechanisms must refuse to abduct.
  FlowConfig cfg = FlowConfig::default_stack(0);
  CausalGraph untrained;
  untrained.add_variable(cont("a"));
  untrained.set_mechanism("a", std::make_shared<FlowMechanism>(FlowStack(cfg, 2),
                                                               scm::ParentCodec{}));
  CHECK_THROWS_AS(scm::abduct(untrained, ok, AbductOptions{}), ValidationError);

  CHECK_THROWS_AS(g.set_mechanism("ghost", gaussian_root(0.0, 1.0)), ValidationError);
}

TEST_CASE("graph specs round trip through json and hash structurally") {
  scm::GraphSpec spec;
  spec.variables.push_back(cont("t"));
  VariableSpec d;
  d.name = "d";
  d.kind = VarKind::categorical;
  d.categories = 10;
  spec.variables.push_back(d);
  VariableSpec x;
  x.name = "x";
  x.kind = VarKind::image;
  x.height = 32;
  x.width = 32;
  x.channels = 1;
  x.parents = {"t", "d"};
  spec.variables.push_back(x);
  spec.mechanisms = {{"t", "flow", ""}, {"d", "categorical", ""}, {"x", "hvae", ""}};

  auto j = spec.to_json();
  scm::GraphSpec back = scm::GraphSpec::from_json(j);
  CHECK(back.to_json() == j);
  CHECK(back.binding_for("x") != nullptr);
  CHECK(back.binding_for("x")->family == "hvae");
  CHECK(back.binding_for("ghost") == nullptr);

  std::string h0 = scm::graph_hash(spec);
  scm::GraphSpec filled = spec;
  filled.mechanisms[0].checkpoint = "ck-123";
  CHECK(scm::graph_hash(filled) == h0);  // checkpoint ids are not structural

  scm::GraphSpec edge = spec;
  edge.variables[1].parents = {"t"};
  CHECK(scm::graph_hash(edge) != h0);

  scm::GraphSpec fam = spec;
  fam.mechanisms[2].family = "vae";
  CHECK(scm::graph_hash(fam) != h0);

  CausalGraph skel = scm::build_skeleton(spec);
  CHECK(skel.variables().size() == 3);
  CHECK(skel.has_variable("x"));
  CHECK_FALSE(skel.has_mechanism("x"));
}
