#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "lrlab/matrix.hpp"
#include "lrlab/net.hpp"

namespace lrlab {

struct Dataset {
  Matrix inputs;                    // samples x features (NHWC for images)
  std::vector<std::size_t> labels;  // classification only
  Matrix targets;                   // regression only
  TensorShape input_shape;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return inputs.rows(); }
  bool classification() const noexcept { return !labels.empty(); }
  Batch gather(std::span<const std::size_t> indices) const;
  Batch slice(std::size_t begin, std::size_t end) const;
};

struct DataSplit {
  Dataset train;
  Dataset eval;
};

// Gaussian class clusters: centres ~ N(0, I), samples = centre + spread * N(0, I).
struct BlobsSpec {
  std::size_t classes = 10;
  std::size_t dim = 32;
  std::size_t n = 2048;
  std::size_t eval_n = 512;
  double spread = 1.0;
  std::uint64_t seed = 0;
};

// x ~ N(0, I_m), y = x W* + noise * N(0, I_n) with rank(W*) = true_rank.
struct LowRankRegressionSpec {
  std::size_t m = 32;
  std::size_t n = 16;
  std::size_t true_rank = 4;
  double noise = 0.01;
  std::uint64_t seed = 0;
  std::size_t samples = 2048;
  std::size_t eval_samples = 512;
};

struct IdxSpec {
  std::string images;
  std::string labels;
  // Optional held-out files; otherwise the last eval_fraction of the training
  // files is held out.
  std::string eval_images;
  std::string eval_labels;
  std::string normalization = "unit";
  double eval_fraction = 0.2;
};

using DatasetSpec = std::variant<BlobsSpec, LowRankRegressionSpec, IdxSpec>;

DataSplit make_blobs(const BlobsSpec& spec);
DataSplit make_lowrank_regression(const LowRankRegressionSpec& spec);
DataSplit make_dataset(const DatasetSpec& spec);

// Reads an IDX image file (magic 0x00000803) and label file (0x00000801).
// Pixels are scaled to [0, 1]. Throws FormatError / IoError.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

}  // namespace lrlab
