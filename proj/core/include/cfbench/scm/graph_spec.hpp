#pragma once

#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "cfbench/scm/graph.hpp"

namespace cfbench::scm {

using Json = nlohmann::ordered_json;

struct MechanismBinding {
  std::string variable;
  std::string family;      // flow | categorical | vae | hvae | gan
  std::string checkpoint;  // artifact id; empty until trained
};

// Declarative description of a graph: what exists and how it is wired.
// Checkpoints embed the content hash of this document so evaluation can
// refuse artifacts trained against a different structure.
struct GraphSpec {
  std::vector<VariableSpec> variables;
  std::vector<MechanismBinding> mechanisms;

  Json to_json() const;
  static GraphSpec from_json(const Json& j);
  static GraphSpec load(const std::string& path);
  void save(const std::string& path) const;

  const MechanismBinding* binding_for(const std::string& variable) const;
};

// Hash of the structural part only (variables, kinds, edges, families);
// checkpoint ids do not participate, so training can fill them in without
// changing the identity of the graph.
std::string graph_hash(const GraphSpec& spec);

// Graph with variables declared but no mechanisms attached.
CausalGraph build_skeleton(const GraphSpec& spec);

}  // namespace cfbench::scm
