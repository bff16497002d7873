#pragma once

#include <map>
#include <string>
#include <vector>

#include "cfbench/scm/mechanism.hpp"
#include "cfbench/scm/types.hpp"

namespace cfbench::scm {

// Variables in declaration order plus their mechanisms. Assumes causal
// sufficiency: every dependency between variables is an explicit edge.
class CausalGraph {
 public:
  void add_variable(VariableSpec spec);
  void set_mechanism(const std::string& name, MechanismPtr mech);

  bool has_variable(const std::string& name) const { return index_.count(name) > 0; }
  const VariableSpec& spec(const std::string& name) const;
  const Mechanism& mechanism(const std::string& name) const;
  bool has_mechanism(const std::string& name) const;
  const std::vector<VariableSpec>& variables() const { return vars_; }

 private:
  std::vector<VariableSpec> vars_;
  std::map<std::string, size_t> index_;
  std::map<std::string, MechanismPtr> mechs_;
};

// Topological order (ties broken by name so the order is unique), after
// checking for cycles, dangling parents, and duplicate names.
std::vector<std::string> validate_graph(const CausalGraph& g);

// Immutable mutilated view: intervened variables lose their incoming edges
// and their mechanisms; everything else delegates to the base graph.
class MutilatedGraph {
 public:
  MutilatedGraph(const CausalGraph& base, InterventionSet iv);

  const CausalGraph& base() const { return *base_; }
  const InterventionSet& interventions() const { return iv_; }
  bool is_intervened(const std::string& name) const { return iv_.contains(name); }

  // Empty for intervened variables, the declared parents otherwise.
  std::vector<std::string> parents_of(const std::string& name) const;

 private:
  const CausalGraph* base_;
  InterventionSet iv_;
};

// Validates targets (existence + value kind) and returns the view.
MutilatedGraph intervene(const CausalGraph& g, InterventionSet iv);

// Noise abduction for every observed variable. The observation must cover
// the whole graph. Per-variable randomness (LatentMode::sample) is derived
// from opts.seed and the variable name.
NoiseRecord abduct(const CausalGraph& g, const Observation& obs, const AbductOptions& opts);

// Push noise through the mutilated graph in topological order.
Observation predict(const MutilatedGraph& g, const NoiseRecord& noise);

// abduction -> action -> prediction. With an empty intervention set this is
// the mechanism-reconstruction identity.
Observation counterfactual(const CausalGraph& g, const Observation& obs,
                           const InterventionSet& iv, const AbductOptions& opts);

// Kind-compatibility check used at intervention and prediction boundaries.
void check_value_kind(const VariableSpec& spec, const Value& v, const std::string& context);

}  // namespace cfbench::scm
