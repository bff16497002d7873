#include "cfbench/scm/graph.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace cfbench::scm {

std::string to_string(VarKind k) {
  switch (k) {
    case VarKind::continuous: return "continuous";
    case VarKind::categorical: return "categorical";
    case VarKind::image: return "image";
  }
  return "?";
}

VarKind var_kind_from_string(const std::string& s) {
  if (s == "continuous") return VarKind::continuous;
  if (s == "categorical") return VarKind::categorical;
  if (s == "image") return VarKind::image;
  throw ConfigError("unknown variable kind '" + s + "'");
}

void CausalGraph::add_variable(VariableSpec spec) {
  if (spec.name.empty()) throw ValidationError("variable name must be non-empty");
  if (index_.count(spec.name))
    throw ValidationError("duplicate variable '" + spec.name + "'");
  if (spec.kind == VarKind::categorical && spec.categories < 2)
    throw ValidationError("categorical variable '" + spec.name + "' needs >= 2 categories");
  if (spec.kind == VarKind::image && (spec.height < 1 || spec.width < 1 || spec.channels < 1))
    throw ValidationError("image variable '" + spec.name + "' needs positive dimensions");
  index_[spec.name] = vars_.size();
  vars_.push_back(std::move(spec));
}

void CausalGraph::set_mechanism(const std::string& name, MechanismPtr mech) {
  if (!has_variable(name))
    throw ValidationError("mechanism for unknown variable '" + name + "'");
  mechs_[name] = std::move(mech);
}

const VariableSpec& CausalGraph::spec(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("unknown variable '" + name + "'");
  return vars_[it->second];
}

bool CausalGraph::has_mechanism(const std::string& name) const {
  return mechs_.count(name) > 0;
}

const Mechanism& CausalGraph::mechanism(const std::string& name) const {
  auto it = mechs_.find(name);
  if (it == mechs_.end())
    throw ValidationError("variable '" + name + "' has no mechanism attached");
  return *it->second;
}

std::vector<std::string> validate_graph(const CausalGraph& g) {
  const auto& vars = g.variables();
  std::map<std::string, std::vector<std::string>> children;
  std::map<std::string, int> indegree;

  for (const auto& v : vars) indegree[v.name] = 0;
  for (const auto& v : vars) {
    std::set<std::string> seen;
    for (const auto& p : v.parents) {
      if (!g.has_variable(p))
        throw ValidationError("variable '" + v.name + "' lists unknown parent '" + p + "'");
      if (p == v.name)
        throw ValidationError("variable '" + v.name + "' lists itself as parent");
      if (!seen.insert(p).second)
        throw ValidationError("variable '" + v.name + "' lists parent '" + p + "' twice");
      children[p].push_back(v.name);
      ++indegree[v.name];
    }
  }

  // Kahn's algorithm with an ordered frontier: unique, name-stable order.
  std::set<std::string> frontier;
  for (const auto& [name, deg] : indegree)
    if (deg == 0) frontier.insert(name);

  std::vector<std::string> order;
  order.reserve(vars.size());
  while (!frontier.empty()) {
    std::string n = *frontier.begin();
    frontier.erase(frontier.begin());
    order.push_back(n);
    for (const auto& c : children[n])
      if (--indegree[c] == 0) frontier.insert(c);
  }

  if (order.size() != vars.size()) {
    std::ostringstream msg;
    msg << "graph has a cycle through:";
    for (const auto& [name, deg] : indegree)
      if (deg > 0) msg << " '" << name << "'";
    throw ValidationError(msg.str());
  }
  return order;
}

void check_value_kind(const VariableSpec& spec, const Value& v, const std::string& context) {
  if (v.kind() != spec.kind)
    throw ValidationError(context + ": value kind " + to_string(v.kind()) +
                          " does not match variable '" + spec.name + "' (" +
                          to_string(spec.kind) + ")");
  if (spec.kind == VarKind::categorical && (v.cat() < 0 || v.cat() >= spec.categories))
    throw ValidationError(context + ": category " + std::to_string(v.cat()) +
                          " out of range for '" + spec.name + "'");
  if (spec.kind == VarKind::image &&
      v.img().numel() != static_cast<int64_t>(spec.image_numel()))
    throw ValidationError(context + ": image size mismatch for '" + spec.name + "'");
}

MutilatedGraph::MutilatedGraph(const CausalGraph& base, InterventionSet iv)
    : base_(&base), iv_(std::move(iv)) {}

std::vector<std::string> MutilatedGraph::parents_of(const std::string& name) const {
  if (is_intervened(name)) return {};
  return base_->spec(name).parents;
}

MutilatedGraph intervene(const CausalGraph& g, InterventionSet iv) {
  for (const auto& [name, value] : iv.targets) {
    if (!g.has_variable(name))
      throw ValidationError("intervention on unknown variable '" + name + "'");
    check_value_kind(g.spec(name), value, "intervene");
  }
  return MutilatedGraph(g, std::move(iv));
}

namespace {

std::vector<Value> gather_parents(const VariableSpec& spec, const Observation& obs,
                                  const std::string& context) {
  std::vector<Value> out;
  out.reserve(spec.parents.size());
  for (const auto& p : spec.parents) {
    auto it = obs.find(p);
    if (it == obs.end())
      throw ValidationError(context + ": missing value for parent '" + p + "' of '" +
                            spec.name + "'");
    out.push_back(it->second);
  }
  return out;
}

}  // namespace

NoiseRecord abduct(const CausalGraph& g, const Observation& obs, const AbductOptions& opts) {
  validate_graph(g);
  NoiseRecord rec;
  for (const auto& spec : g.variables()) {
    auto it = obs.find(spec.name);
    if (it == obs.end())
      throw ValidationError("abduct: observation is missing variable '" + spec.name + "'");
    check_value_kind(spec, it->second, "abduct");
    if (!g.has_mechanism(spec.name))
      throw ValidationError("abduct: variable '" + spec.name + "' has no mechanism attached");
    const Mechanism& m = g.mechanism(spec.name);
    if (!m.trained())
      throw ValidationError("abduct: mechanism for '" + spec.name + "' is untrained");
    AbductOptions per = opts;
    per.seed = hash_str(opts.seed, spec.name);
    rec[spec.name] = m.abduct(it->second, gather_parents(spec, obs, "abduct"), per);
  }
  return rec;
}

Observation predict(const MutilatedGraph& g, const NoiseRecord& noise) {
  std::vector<std::string> order = validate_graph(g.base());
  Observation out;
  for (const auto& name : order) {
    const VariableSpec& spec = g.base().spec(name);
    if (g.is_intervened(name)) {
      out.emplace(name, g.interventions().targets.at(name));
      continue;
    }
    auto it = noise.find(name);
    if (it == noise.end())
      throw ValidationError("predict: missing noise entry for variable '" + name + "'");
    if (!g.base().has_mechanism(name))
      throw ValidationError("predict: variable '" + name + "' has no mechanism attached");
    const Mechanism& m = g.base().mechanism(name);
    if (!m.trained())
      throw ValidationError("predict: mechanism for '" + name + "' is untrained");
    Value v = m.predict(it->second, gather_parents(spec, out, "predict"));
    check_value_kind(spec, v, "predict");
    out.emplace(name, std::move(v));
  }
  return out;
}

Observation counterfactual(const CausalGraph& g, const Observation& obs,
                           const InterventionSet& iv, const AbductOptions& opts) {
  NoiseRecord noise = abduct(g, obs, opts);
  return predict(intervene(g, iv), noise);
}

}  // namespace cfbench::scm
