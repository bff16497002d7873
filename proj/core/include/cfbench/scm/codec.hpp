#pragma once

#include <Eigen/Core>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "cfbench/scm/types.hpp"

namespace cfbench::scm {

// Numeric encoding of parent values in declared order: standardized scalars
// for continuous parents, one-hot for categorical ones. The stats are fitted
// on training data and travel with the mechanism checkpoint.
struct ParentCodec {
  struct Entry {
    std::string name;
    VarKind kind = VarKind::continuous;
    int categories = 0;
    double mean = 0.0;
    double stddev = 1.0;
  };
  std::vector<Entry> entries;

  int dim() const {
    int d = 0;
    for (const auto& e : entries) d += e.kind == VarKind::categorical ? e.categories : 1;
    return d;
  }

  Eigen::VectorXd encode(const std::vector<Value>& parents) const {
    if (parents.size() != entries.size())
      throw ValidationError("parent codec: expected " + std::to_string(entries.size()) +
                            " parents, got " + std::to_string(parents.size()));
    Eigen::VectorXd out = Eigen::VectorXd::Zero(dim());
    int at = 0;
    for (size_t i = 0; i < entries.size(); ++i) {
      const Entry& e = entries[i];
      if (e.kind == VarKind::continuous) {
        if (e.stddev <= 0) throw ValidationError("parent codec: nonpositive stddev");
        out[at++] = (parents[i].num() - e.mean) / e.stddev;
      } else if (e.kind == VarKind::categorical) {
        int c = parents[i].cat();
        if (c < 0 || c >= e.categories)
          throw ValidationError("parent codec: category out of range for '" + e.name + "'");
        out[at + c] = 1.0;
        at += e.categories;
      } else {
        throw ValidationError("parent codec: image parents are not supported");
      }
    }
    return out;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& e : entries) {
      nlohmann::ordered_json row;
      row["name"] = e.name;
      row["kind"] = to_string(e.kind);
      if (e.kind == VarKind::categorical) row["categories"] = e.categories;
      if (e.kind == VarKind::continuous) {
        row["mean"] = e.mean;
        row["stddev"] = e.stddev;
      }
      arr.push_back(std::move(row));
    }
    return arr;
  }

  static ParentCodec from_json(const nlohmann::ordered_json& arr) {
    ParentCodec c;
    for (const auto& row : arr) {
      Entry e;
      e.name = row.at("name").get<std::string>();
      e.kind = var_kind_from_string(row.at("kind").get<std::string>());
      if (e.kind == VarKind::categorical) e.categories = row.at("categories").get<int>();
      if (e.kind == VarKind::continuous) {
        e.mean = row.at("mean").get<double>();
        e.stddev = row.at("stddev").get<double>();
      }
      c.entries.push_back(std::move(e));
    }
    return c;
  }
};

}  // namespace cfbench::scm
