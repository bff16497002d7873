#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace cfbench {

// Error taxonomy. The CLI maps these to process exit codes, so new failure
// modes should pick (or add) a category instead of throwing std::runtime_error.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad or inconsistent user input: config files, graph specs, CLI arguments.
struct ConfigError : Error {
  using Error::Error;
};

// A precondition of an API call failed (wrong shapes, unknown variable, ...).
struct ValidationError : Error {
  using Error::Error;
};

// Training declared itself unrecoverable (diverged, constraint blew up).
struct TrainingAbort : Error {
  using Error::Error;
};

// Evaluation refused to run (artifact mismatch, incompatible checkpoints).
struct EvaluationRefusal : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

// -------- deterministic hashing ----------------------------------------

uint64_t splitmix64(uint64_t x);

// Order-sensitive seed chaining: derive_seed(seed, "abduct", 17) gives a
// stream seed that is stable across runs and platforms.
uint64_t hash_combine(uint64_t seed, uint64_t v);
uint64_t hash_str(uint64_t seed, const std::string& s);

std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);

// -------- formatting -----------------------------------------------------

// Shortest round-trippable decimal form; used everywhere numbers reach disk
// so that identical runs produce byte-identical files.
std::string fmt_double(double v);

std::string lowercase(std::string s);

}  // namespace cfbench
