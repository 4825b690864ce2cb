#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lrlab/matrix.hpp"

namespace lrlab {

// Activations are stored as batch x (h * w * c) matrices in NHWC order; a
// flat feature vector is the shape {1, 1, features}.
struct TensorShape {
  std::size_t h = 1;
  std::size_t w = 1;
  std::size_t c = 1;

  std::size_t size() const noexcept { return h * w * c; }
  bool flat() const noexcept { return h == 1 && w == 1; }
  friend bool operator==(const TensorShape&, const TensorShape&) = default;
};

std::string to_string(const TensorShape& s);

enum class LayerKind { Dense, FactorizedDense, Conv, FactorizedConv, ReLU, Flatten };
enum class HeadKind { SoftmaxCrossEntropy, MSE };
enum class Padding { Same, Valid };

std::string to_string(LayerKind k);
std::string to_string(HeadKind k);
std::string to_string(Padding p);

struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  std::string name;
  // Dense: in = m, out = n. Conv: in = c_in, out = c_out.
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t rank = 0;
  Padding padding = Padding::Same;
  bool bias = true;
  // Whether a dense/conv layer is replaced by its factorized form when the
  // network is converted to low rank.
  bool low_rank_eligible = true;

  static LayerSpec dense(std::size_t m, std::size_t n, bool bias = true);
  static LayerSpec factorized_dense(std::size_t m, std::size_t n, std::size_t r, bool bias = true);
  static LayerSpec conv(std::size_t kh, std::size_t kw, std::size_t c_in, std::size_t c_out,
                        Padding padding = Padding::Same, bool bias = true);
  static LayerSpec factorized_conv(std::size_t kh, std::size_t kw, std::size_t c_in,
                                   std::size_t c_out, std::size_t r,
                                   Padding padding = Padding::Same, bool bias = true);
  static LayerSpec relu();
  static LayerSpec flatten();

  bool affine() const noexcept { return kind != LayerKind::ReLU && kind != LayerKind::Flatten; }
  bool factorized() const noexcept {
    return kind == LayerKind::FactorizedDense || kind == LayerKind::FactorizedConv;
  }
  bool convolutional() const noexcept {
    return kind == LayerKind::Conv || kind == LayerKind::FactorizedConv;
  }
  // Shape of the (composed) weight matrix: (m, n) or (h*w*c_in, c_out).
  std::size_t weight_rows() const noexcept {
    return convolutional() ? kernel_h * kernel_w * in : in;
  }
  std::size_t weight_cols() const noexcept { return out; }
  std::size_t max_rank() const noexcept;
  std::size_t fan_in() const noexcept { return weight_rows(); }
};

// r = ceil(fraction * max_rank), clamped to [1, max_rank].
std::size_t rank_for_fraction(double fraction, std::size_t max_rank);

struct NetworkSpec {
  TensorShape input;
  std::vector<LayerSpec> layers;
  HeadKind head = HeadKind::SoftmaxCrossEntropy;

  // Fills default layer names and checks the shape chain and rank bounds.
  // Throws ShapeError / RankError.
  void validate();
  // Replaces every eligible Dense/Conv layer by its factorized form.
  NetworkSpec factorized(double rank_fraction) const;
  // Replaces every factorized layer by its unfactorized form.
  NetworkSpec unfactorized() const;
  bool has_factorized_layers() const noexcept;
  std::size_t output_size() const;
};

// Named parameter store with deterministic (insertion) iteration order. Every
// mutable access stamps a new version so forward caches can detect staleness.
class ParamSet {
 public:
  using Entry = std::pair<std::string, Matrix>;

  ParamSet();

  void insert(std::string name, Matrix value);
  bool contains(const std::string& name) const;
  const Matrix& at(const std::string& name) const;
  Matrix& mutable_at(const std::string& name);

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::vector<Entry>& mutable_entries();

  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t scalar_count() const noexcept;
  std::uint64_t version() const noexcept { return version_; }

  // Same names, same shapes, zero values.
  ParamSet zeros_like() const;

  friend bool operator==(const ParamSet& a, const ParamSet& b) { return a.entries_ == b.entries_; }

 private:
  void touch();

  std::vector<Entry> entries_;
  std::vector<std::pair<std::string, std::size_t>> index_;  // sorted by name
  std::uint64_t version_;
};

using Gradients = ParamSet;

std::string weight_key(const std::string& layer);
std::string u_key(const std::string& layer);
std::string v_key(const std::string& layer);
std::string bias_key(const std::string& layer);

// Convolution kernel shape descriptor for a factorized conv weight.
struct KernelShape {
  std::size_t h = 1;
  std::size_t w = 1;
  std::size_t c_in = 1;
  std::size_t c_out = 1;
};

// W = U Vᵀ. For conv layers u is (h*w*c_in) x r and v is c_out x r.
struct FactorizedParam {
  Matrix u;
  Matrix v;
  std::optional<KernelShape> kernel;

  std::size_t rank() const noexcept { return u.cols(); }
};

// u * vᵀ. Throws RankError for empty factors and ShapeError when ranks differ.
Matrix compose(const FactorizedParam& p);

// Single conv over an NHWC batch; kernel is (kh*kw*c_in) x c_out. Stride 1.
Matrix conv_forward(const Matrix& input, const TensorShape& shape, const Matrix& kernel,
                    std::size_t kh, std::size_t kw, Padding padding);
// h x w conv to r channels with U, then 1x1 conv with Vᵀ.
Matrix conv_forward_factorized(const Matrix& input, const TensorShape& shape,
                               const FactorizedParam& p, Padding padding);

TensorShape conv_output_shape(const TensorShape& in, std::size_t kh, std::size_t kw,
                              std::size_t c_out, Padding padding);

struct Batch {
  Matrix inputs;                    // batch x input size
  std::vector<std::size_t> labels;  // classification heads
  Matrix targets;                   // regression heads
  std::size_t size() const noexcept { return inputs.rows(); }
};

struct ForwardCache {
  std::uint64_t params_version = 0;
  bool valid = false;
  std::size_t batch = 0;
  std::vector<Matrix> inputs;        // input activation to each layer
  std::vector<Matrix> patches;       // im2col matrices for conv layers
  std::vector<Matrix> intermediate;  // x U for factorized layers
  Matrix output;                     // network output before the head
  Matrix head_grad;                  // d loss / d output
};

struct ForwardResult {
  double loss = 0.0;
  ForwardCache cache;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;  // NaN for regression heads
};

class Network {
 public:
  explicit Network(NetworkSpec spec);

  const NetworkSpec& spec() const noexcept { return spec_; }
  // shapes()[i] is the input shape of layer i; the last entry is the output.
  const std::vector<TensorShape>& shapes() const noexcept { return shapes_; }

  // Checks that params hold exactly the tensors this architecture needs.
  void check_params(const ParamSet& params) const;

  Matrix predict(const ParamSet& params, const Matrix& inputs) const;
  ForwardResult forward(const ParamSet& params, const Batch& batch) const;
  Gradients backward(const ParamSet& params, const ForwardCache& cache) const;
  // Back-propagates an explicit gradient with respect to the network output.
  Gradients backward_from(const ParamSet& params, const ForwardCache& cache,
                          const Matrix& output_grad) const;

  // Head loss and its gradient for given outputs.
  std::pair<double, Matrix> head_loss(const Matrix& outputs, const Batch& batch) const;

 private:
  Matrix run_layers(const ParamSet& params, const Matrix& inputs, ForwardCache* cache) const;

  NetworkSpec spec_;
  std::vector<TensorShape> shapes_;
};

// Composes every factorized layer of `params` into a plain weight, producing
// parameters for spec.unfactorized().
ParamSet compose_params(const NetworkSpec& spec, const ParamSet& params);

}  // namespace lrlab
