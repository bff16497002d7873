#pragma once

#include <memory>
#include <string>
#include <vector>

#include "cfbench/scm/types.hpp"

namespace cfbench::scm {

// Invertible structural assignment x = f(noise, parents). Implementations
// must be deterministic given (payload, parents) in predict, and given
// (value, parents, options) in abduct.
class Mechanism {
 public:
  virtual ~Mechanism() = default;

  virtual std::string family() const = 0;
  virtual bool trained() const = 0;

  // Recover the exogenous noise that reproduces `value` under `parents`.
  virtual NoisePayload abduct(const Value& value, const std::vector<Value>& parents,
                              const AbductOptions& opts) const = 0;

  // Apply the mechanism with fixed noise under (possibly new) parents.
  virtual Value predict(const NoisePayload& noise,
                        const std::vector<Value>& parents) const = 0;
};

using MechanismPtr = std::shared_ptr<const Mechanism>;

}  // namespace cfbench::scm
