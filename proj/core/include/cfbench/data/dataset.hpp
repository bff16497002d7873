#pragma once

#include <string>
#include <vector>

#include "cfbench/nn/tensor.hpp"
#include "cfbench/scm/codec.hpp"
#include "cfbench/scm/types.hpp"

namespace cfbench::data {

enum class Split : uint8_t { train = 0, val = 1, test = 2 };

struct AttrColumn {
  std::string name;
  scm::VarKind kind = scm::VarKind::continuous;
  int categories = 0;
  std::vector<double> num;  // continuous values
  std::vector<int> cat;     // categorical values
};

// Image dataset with scalar/categorical attribute columns and a fixed
// train/val/test split. One binary file on disk: JSON header plus raw
// payload, so loads are exact round trips.
struct Dataset {
  std::string name;
  uint64_t seed = 0;
  int n = 0;
  int height = 0, width = 0, channels = 1;
  std::string image_name = "x";
  nn::TensorF images;  // [n, height*width*channels], values in [0, 1]
  std::vector<AttrColumn> attrs;
  std::vector<uint8_t> split;

  bool has_attr(const std::string& attr_name) const;
  const AttrColumn& attr(const std::string& attr_name) const;
  std::vector<int> indices_of(Split s) const;
  nn::TensorF image_row(int i) const;

  // Attribute values plus the image for one sample, keyed by variable name.
  scm::Observation observation(int i) const;

  void validate() const;
  void save(const std::string& path) const;
  static Dataset load(const std::string& path);
};

// Shuffled 60/15/25 assignment, deterministic in the seed.
std::vector<uint8_t> assign_splits(int n, uint64_t seed);

// Fit standardization statistics of the codec's continuous entries on one
// split; validates that kinds and category counts still match the dataset.
void fit_parent_stats(scm::ParentCodec& codec, const Dataset& ds, Split split);

// Encode the codec's parent set for the given rows into a float matrix
// [rows, codec.dim()].
nn::TensorF encode_parent_rows(const scm::ParentCodec& codec, const Dataset& ds,
                               const std::vector<int>& rows);

// Copy the given image rows into a dense [rows, h*w*c] matrix.
nn::TensorF gather_images(const Dataset& ds, const std::vector<int>& rows);

}  // namespace cfbench::data
