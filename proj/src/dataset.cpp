#include "lrlab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>

#include "lrlab/errors.hpp"
#include "lrlab/linalg.hpp"
#include "lrlab/rng.hpp"

namespace lrlab {

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::vector<unsigned char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset,
                        const std::string& path) {
  if (bytes.size() < offset + 4) {
    throw FormatError("'" + path + "': truncated header (" + std::to_string(bytes.size()) +
                      " bytes)");
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void check_magic(const std::vector<unsigned char>& bytes, std::uint32_t expected,
                 const std::string& path) {
  const std::uint32_t magic = read_be32(bytes, 0, path);
  if (magic != expected) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "bad IDX magic %02x %02x %02x %02x (expected 0x%08x)",
                  bytes[0], bytes[1], bytes[2], bytes[3], expected);
    throw FormatError("'" + path + "': " + buf);
  }
}

Dataset take_rows(const Dataset& d, std::size_t begin, std::size_t end) {
  Dataset out;
  out.input_shape = d.input_shape;
  out.num_classes = d.num_classes;
  const std::size_t n = end - begin;
  const std::size_t width = d.inputs.cols();
  out.inputs = Matrix(n, width);
  std::copy_n(d.inputs.data().begin() + static_cast<std::ptrdiff_t>(begin * width), n * width,
              out.inputs.data().begin());
  if (d.classification()) {
    out.labels.assign(d.labels.begin() + static_cast<std::ptrdiff_t>(begin),
                      d.labels.begin() + static_cast<std::ptrdiff_t>(end));
  } else {
    const std::size_t tw = d.targets.cols();
    out.targets = Matrix(n, tw);
    std::copy_n(d.targets.data().begin() + static_cast<std::ptrdiff_t>(begin * tw), n * tw,
                out.targets.data().begin());
  }
  return out;
}

Dataset blob_samples(const Matrix& centres, std::size_t n, double spread, Rng rng) {
  const std::size_t classes = centres.rows();
  const std::size_t dim = centres.cols();
  Dataset d;
  d.input_shape = TensorShape{1, 1, dim};
  d.num_classes = classes;
  d.inputs = Matrix(n, dim);
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = rng.below(classes);
    d.labels[i] = label;
    auto row = d.inputs.row(i);
    for (std::size_t j = 0; j < dim; ++j) row[j] = centres(label, j) + spread * rng.normal();
  }
  return d;
}

Dataset regression_samples(const Matrix& w_star, std::size_t n, double noise, Rng rng) {
  Dataset d;
  d.input_shape = TensorShape{1, 1, w_star.rows()};
  d.inputs = gaussian_matrix(rng, n, w_star.rows(), 1.0);
  d.targets = matmul(d.inputs, w_star);
  if (noise > 0.0) d.targets += gaussian_matrix(rng, n, w_star.cols(), noise);
  return d;
}

}  // namespace

Batch Dataset::gather(std::span<const std::size_t> indices) const {
  Batch b;
  const std::size_t width = inputs.cols();
  b.inputs = Matrix(indices.size(), width);
  if (classification()) b.labels.reserve(indices.size());
  if (!classification()) b.targets = Matrix(indices.size(), targets.cols());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    if (i >= size()) throw ShapeError("sample index out of range");
    std::copy_n(inputs.row(i).begin(), width, b.inputs.row(k).begin());
    if (classification()) {
      b.labels.push_back(labels[i]);
    } else {
      std::copy_n(targets.row(i).begin(), targets.cols(), b.targets.row(k).begin());
    }
  }
  return b;
}

Batch Dataset::slice(std::size_t begin, std::size_t end) const {
  std::vector<std::size_t> idx(end - begin);
  for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = begin + k;
  return gather(idx);
}

DataSplit make_blobs(const BlobsSpec& spec) {
  if (spec.classes < 2 || spec.dim < 1 || spec.n < 1 || spec.eval_n < 1) {
    throw InvalidInput("synthetic_blobs needs classes >= 2, dim >= 1, n >= 1, eval_n >= 1");
  }
  if (!(spec.spread > 0.0)) throw InvalidInput("synthetic_blobs spread must be positive");
  const Rng root(spec.seed);
  Rng centre_rng = root.split(0);
  const Matrix centres = gaussian_matrix(centre_rng, spec.classes, spec.dim, 1.0);
  return {blob_samples(centres, spec.n, spec.spread, root.split(1)),
          blob_samples(centres, spec.eval_n, spec.spread, root.split(2))};
}

DataSplit make_lowrank_regression(const LowRankRegressionSpec& spec) {
  if (spec.true_rank < 1 || spec.true_rank > std::min(spec.m, spec.n) || spec.samples < 1 ||
      spec.eval_samples < 1) {
    throw InvalidInput("synthetic_lowrank_regression needs 1 <= true_rank <= min(m, n)");
  }
  if (spec.noise < 0.0) throw InvalidInput("synthetic_lowrank_regression noise must be >= 0");
  const Rng root(spec.seed);
  Rng factor_rng = root.split(0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(spec.m * spec.true_rank));
  const Matrix a = gaussian_matrix(factor_rng, spec.m, spec.true_rank, 1.0);
  const Matrix b = gaussian_matrix(factor_rng, spec.n, spec.true_rank, 1.0);
  const Matrix w_star = matmul_nt(a, b) * scale;
  return {regression_samples(w_star, spec.samples, spec.noise, root.split(1)),
          regression_samples(w_star, spec.eval_samples, spec.noise, root.split(2))};
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = read_bytes(images_path);
  const auto lab = read_bytes(labels_path);
  check_magic(img, kIdxImagesMagic, images_path);
  check_magic(lab, kIdxLabelsMagic, labels_path);
  const std::size_t count = read_be32(img, 4, images_path);
  const std::size_t rows = read_be32(img, 8, images_path);
  const std::size_t cols = read_be32(img, 12, images_path);
  const std::size_t label_count = read_be32(lab, 4, labels_path);
  if (count != label_count) {
    throw FormatError("image count " + std::to_string(count) + " in '" + images_path +
                      "' does not match label count " + std::to_string(label_count) + " in '" +
                      labels_path + "'");
  }
  if (count == 0 || rows == 0 || cols == 0) throw FormatError("'" + images_path + "': empty IDX file");
  const std::size_t pixels = rows * cols;
  if (img.size() != 16 + count * pixels) {
    throw FormatError("'" + images_path + "': expected " + std::to_string(16 + count * pixels) +
                      " bytes, found " + std::to_string(img.size()));
  }
  if (lab.size() != 8 + count) {
    throw FormatError("'" + labels_path + "': expected " + std::to_string(8 + count) +
                      " bytes, found " + std::to_string(lab.size()));
  }
  Dataset d;
  d.input_shape = TensorShape{rows, cols, 1};
  d.inputs = Matrix(count, pixels);
  auto data = d.inputs.data();
  for (std::size_t k = 0; k < count * pixels; ++k) data[k] = static_cast<double>(img[16 + k]) / 255.0;
  d.labels.resize(count);
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < count; ++i) {
    d.labels[i] = lab[8 + i];
    max_label = std::max(max_label, d.labels[i]);
  }
  d.num_classes = std::max<std::size_t>(2, max_label + 1);
  return d;
}

DataSplit make_dataset(const DatasetSpec& spec) {
  if (const auto* blobs = std::get_if<BlobsSpec>(&spec)) return make_blobs(*blobs);
  if (const auto* reg = std::get_if<LowRankRegressionSpec>(&spec)) return make_lowrank_regression(*reg);
  const auto& idx = std::get<IdxSpec>(spec);
  if (idx.normalization != "unit") {
    throw ConfigError("idx normalization must be \"unit\", got \"" + idx.normalization + "\"");
  }
  Dataset train = load_idx(idx.images, idx.labels);
  if (!idx.eval_images.empty()) {
    Dataset eval = load_idx(idx.eval_images, idx.eval_labels);
    const std::size_t classes = std::max(train.num_classes, eval.num_classes);
    train.num_classes = eval.num_classes = classes;
    return {std::move(train), std::move(eval)};
  }
  if (!(idx.eval_fraction > 0.0) || idx.eval_fraction >= 1.0) {
    throw ConfigError("idx eval_fraction must lie in (0, 1)");
  }
  const std::size_t n = train.size();
  const auto held = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(idx.eval_fraction * static_cast<double>(n))));
  if (held >= n) throw FormatError("idx dataset too small to hold out an eval split");
  return {take_rows(train, 0, n - held), take_rows(train, n - held, n)};
}

}  // namespace lrlab
