#include "lrlab/net.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <string>

#include "lrlab/errors.hpp"

namespace lrlab {

namespace {

std::uint64_t next_version() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

struct PadOffsets {
  std::size_t top = 0;
  std::size_t left = 0;
};

PadOffsets pad_offsets(std::size_t kh, std::size_t kw, Padding padding) {
  if (padding == Padding::Valid) return {};
  return {(kh - 1) / 2, (kw - 1) / 2};
}

// Patch matrix of shape (batch * oh * ow) x (kh * kw * c); row-major patch
// layout (dy, dx, channel) matches a flattened HWIO kernel.
Matrix im2col(const Matrix& input, const TensorShape& in, std::size_t kh, std::size_t kw,
              Padding padding, const TensorShape& out) {
  const std::size_t batch = input.rows();
  const auto pad = pad_offsets(kh, kw, padding);
  Matrix patches(batch * out.h * out.w, kh * kw * in.c);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* src = input.row(b).data();
    for (std::size_t oy = 0; oy < out.h; ++oy) {
      for (std::size_t ox = 0; ox < out.w; ++ox) {
        double* dst = patches.row((b * out.h + oy) * out.w + ox).data();
        for (std::size_t dy = 0; dy < kh; ++dy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy + dy) - static_cast<std::ptrdiff_t>(pad.top);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) continue;
          for (std::size_t dx = 0; dx < kw; ++dx) {
            const auto ix =
                static_cast<std::ptrdiff_t>(ox + dx) - static_cast<std::ptrdiff_t>(pad.left);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.w)) continue;
            const double* pix = src + (static_cast<std::size_t>(iy) * in.w + static_cast<std::size_t>(ix)) * in.c;
            std::copy_n(pix, in.c, dst + (dy * kw + dx) * in.c);
          }
        }
      }
    }
  }
  return patches;
}

// Adjoint of im2col.
Matrix col2im(const Matrix& patches, std::size_t batch, const TensorShape& in, std::size_t kh,
              std::size_t kw, Padding padding, const TensorShape& out) {
  const auto pad = pad_offsets(kh, kw, padding);
  Matrix grad(batch, in.size());
  for (std::size_t b = 0; b < batch; ++b) {
    double* dst = grad.row(b).data();
    for (std::size_t oy = 0; oy < out.h; ++oy) {
      for (std::size_t ox = 0; ox < out.w; ++ox) {
        const double* src = patches.row((b * out.h + oy) * out.w + ox).data();
        for (std::size_t dy = 0; dy < kh; ++dy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy + dy) - static_cast<std::ptrdiff_t>(pad.top);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) continue;
          for (std::size_t dx = 0; dx < kw; ++dx) {
            const auto ix =
                static_cast<std::ptrdiff_t>(ox + dx) - static_cast<std::ptrdiff_t>(pad.left);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.w)) continue;
            double* pix = dst + (static_cast<std::size_t>(iy) * in.w + static_cast<std::size_t>(ix)) * in.c;
            const double* p = src + (dy * kw + dx) * in.c;
            for (std::size_t c = 0; c < in.c; ++c) pix[c] += p[c];
          }
        }
      }
    }
  }
  return grad;
}

void add_bias_rows(Matrix& y, const Matrix& bias) {
  if (bias.rows() != 1 || bias.cols() != y.cols()) {
    throw ShapeError("bias shape does not match layer output width " + std::to_string(y.cols()));
  }
  const double* b = bias.row(0).data();
  for (std::size_t i = 0; i < y.rows(); ++i) {
    double* r = y.row(i).data();
    for (std::size_t j = 0; j < y.cols(); ++j) r[j] += b[j];
  }
}

Matrix column_sums(const Matrix& g) {
  Matrix s(1, g.cols());
  double* out = s.row(0).data();
  for (std::size_t i = 0; i < g.rows(); ++i) {
    const double* r = g.row(i).data();
    for (std::size_t j = 0; j < g.cols(); ++j) out[j] += r[j];
  }
  return s;
}

void require_input(const Matrix& input, const TensorShape& shape, std::string_view what) {
  if (input.cols() != shape.size()) {
    throw ShapeError(std::string(what) + ": input width " + std::to_string(input.cols()) +
                     " does not match shape " + to_string(shape));
  }
}

void require_param_shape(const ParamSet& params, const std::string& key, std::size_t rows,
                         std::size_t cols) {
  if (!params.contains(key)) throw KeyError("missing parameter '" + key + "'");
  const Matrix& m = params.at(key);
  if (m.rows() != rows || m.cols() != cols) {
    throw ShapeError("parameter '" + key + "' has shape " + std::to_string(m.rows()) + "x" +
                     std::to_string(m.cols()) + ", expected " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
}

}  // namespace

std::string to_string(const TensorShape& s) {
  return std::to_string(s.h) + "x" + std::to_string(s.w) + "x" + std::to_string(s.c);
}

std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Dense: return "dense";
    case LayerKind::FactorizedDense: return "factorized_dense";
    case LayerKind::Conv: return "conv";
    case LayerKind::FactorizedConv: return "factorized_conv";
    case LayerKind::ReLU: return "relu";
    case LayerKind::Flatten: return "flatten";
  }
  return "unknown";
}

std::string to_string(HeadKind k) {
  return k == HeadKind::SoftmaxCrossEntropy ? "softmax_cross_entropy" : "mse";
}

std::string to_string(Padding p) { return p == Padding::Same ? "same" : "valid"; }

LayerSpec LayerSpec::dense(std::size_t m, std::size_t n, bool bias) {
  LayerSpec s;
  s.kind = LayerKind::Dense;
  s.in = m;
  s.out = n;
  s.bias = bias;
  return s;
}

LayerSpec LayerSpec::factorized_dense(std::size_t m, std::size_t n, std::size_t r, bool bias) {
  LayerSpec s = dense(m, n, bias);
  s.kind = LayerKind::FactorizedDense;
  s.rank = r;
  return s;
}

LayerSpec LayerSpec::conv(std::size_t kh, std::size_t kw, std::size_t c_in, std::size_t c_out,
                          Padding padding, bool bias) {
  LayerSpec s;
  s.kind = LayerKind::Conv;
  s.kernel_h = kh;
  s.kernel_w = kw;
  s.in = c_in;
  s.out = c_out;
  s.padding = padding;
  s.bias = bias;
  return s;
}

LayerSpec LayerSpec::factorized_conv(std::size_t kh, std::size_t kw, std::size_t c_in,
                                     std::size_t c_out, std::size_t r, Padding padding, bool bias) {
  LayerSpec s = conv(kh, kw, c_in, c_out, padding, bias);
  s.kind = LayerKind::FactorizedConv;
  s.rank = r;
  return s;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::flatten() {
  LayerSpec s;
  s.kind = LayerKind::Flatten;
  return s;
}

std::size_t LayerSpec::max_rank() const noexcept { return std::min(weight_rows(), weight_cols()); }

std::size_t rank_for_fraction(double fraction, std::size_t max_rank) {
  if (!(fraction > 0.0) || fraction > 1.0) {
    throw InvalidInput("rank fraction must lie in (0, 1], got " + std::to_string(fraction));
  }
  // The small slack absorbs representation error such as 0.1 * 30.
  const auto r = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(max_rank) - 1e-9));
  return std::clamp<std::size_t>(r, 1, max_rank);
}

void NetworkSpec::validate() {
  if (layers.empty()) throw ShapeError("network has no layers");
  if (input.size() == 0) throw ShapeError("network input shape must be non-empty");
  TensorShape cur = input;
  std::vector<std::string> seen;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    LayerSpec& l = layers[i];
    if (l.name.empty()) {
      const std::string prefix = l.convolutional() ? "conv"
                                 : l.affine()      ? "fc"
                                                   : to_string(l.kind);
      l.name = prefix + std::to_string(i);
    }
    if (std::find(seen.begin(), seen.end(), l.name) != seen.end()) {
      throw ShapeError("duplicate layer name '" + l.name + "'");
    }
    seen.push_back(l.name);
    const std::string where = "layer '" + l.name + "'";
    switch (l.kind) {
      case LayerKind::Dense:
      case LayerKind::FactorizedDense:
        if (!cur.flat()) throw ShapeError(where + ": dense layer needs a flat input; add flatten");
        if (l.in != cur.c) {
          throw ShapeError(where + ": expects " + std::to_string(l.in) + " inputs, got " +
                           std::to_string(cur.c));
        }
        if (l.out == 0) throw ShapeError(where + ": zero outputs");
        cur = TensorShape{1, 1, l.out};
        break;
      case LayerKind::Conv:
      case LayerKind::FactorizedConv:
        if (l.in != cur.c) {
          throw ShapeError(where + ": expects " + std::to_string(l.in) + " input channels, got " +
                           std::to_string(cur.c));
        }
        if (l.out == 0 || l.kernel_h == 0 || l.kernel_w == 0) {
          throw ShapeError(where + ": zero-sized kernel");
        }
        cur = conv_output_shape(cur, l.kernel_h, l.kernel_w, l.out, l.padding);
        break;
      case LayerKind::Flatten:
        cur = TensorShape{1, 1, cur.size()};
        break;
      case LayerKind::ReLU:
        break;
    }
    if (l.factorized() && (l.rank == 0 || l.rank > l.max_rank())) {
      throw RankError(where + ": rank " + std::to_string(l.rank) + " outside [1, " +
                      std::to_string(l.max_rank()) + "]");
    }
  }
  if (head == HeadKind::SoftmaxCrossEntropy && (!cur.flat() || cur.c < 2)) {
    throw ShapeError("softmax head needs a flat output with at least 2 classes");
  }
}

NetworkSpec NetworkSpec::factorized(double rank_fraction) const {
  NetworkSpec out = *this;
  out.validate();
  for (LayerSpec& l : out.layers) {
    if (!l.low_rank_eligible) continue;
    if (l.kind == LayerKind::Dense) {
      l.kind = LayerKind::FactorizedDense;
      l.rank = rank_for_fraction(rank_fraction, l.max_rank());
    } else if (l.kind == LayerKind::Conv) {
      l.kind = LayerKind::FactorizedConv;
      l.rank = rank_for_fraction(rank_fraction, l.max_rank());
    }
  }
  return out;
}

NetworkSpec NetworkSpec::unfactorized() const {
  NetworkSpec out = *this;
  for (LayerSpec& l : out.layers) {
    if (l.kind == LayerKind::FactorizedDense) l.kind = LayerKind::Dense;
    if (l.kind == LayerKind::FactorizedConv) l.kind = LayerKind::Conv;
    if (!l.factorized()) l.rank = 0;
  }
  return out;
}

bool NetworkSpec::has_factorized_layers() const noexcept {
  return std::any_of(layers.begin(), layers.end(), [](const LayerSpec& l) { return l.factorized(); });
}

std::size_t NetworkSpec::output_size() const {
  NetworkSpec copy = *this;
  copy.validate();
  return Network(copy).shapes().back().size();
}

ParamSet::ParamSet() : version_(next_version()) {}

void ParamSet::insert(std::string name, Matrix value) {
  const auto it = std::lower_bound(index_.begin(), index_.end(), name,
                                   [](const auto& e, const std::string& n) { return e.first < n; });
  if (it != index_.end() && it->first == name) {
    throw KeyError("duplicate parameter '" + name + "'");
  }
  index_.insert(it, {name, entries_.size()});
  entries_.emplace_back(std::move(name), std::move(value));
  touch();
}

bool ParamSet::contains(const std::string& name) const {
  const auto it = std::lower_bound(index_.begin(), index_.end(), name,
                                   [](const auto& e, const std::string& n) { return e.first < n; });
  return it != index_.end() && it->first == name;
}

const Matrix& ParamSet::at(const std::string& name) const {
  const auto it = std::lower_bound(index_.begin(), index_.end(), name,
                                   [](const auto& e, const std::string& n) { return e.first < n; });
  if (it == index_.end() || it->first != name) throw KeyError("no parameter named '" + name + "'");
  return entries_[it->second].second;
}

Matrix& ParamSet::mutable_at(const std::string& name) {
  const Matrix& m = at(name);
  touch();
  return const_cast<Matrix&>(m);
}

std::vector<ParamSet::Entry>& ParamSet::mutable_entries() {
  touch();
  return entries_;
}

std::size_t ParamSet::scalar_count() const noexcept {
  std::size_t n = 0;
  for (const auto& [name, m] : entries_) n += m.size();
  return n;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (const auto& [name, m] : entries_) out.insert(name, Matrix(m.rows(), m.cols()));
  return out;
}

void ParamSet::touch() { version_ = next_version(); }

std::string weight_key(const std::string& layer) { return layer + ".w"; }
std::string u_key(const std::string& layer) { return layer + ".u"; }
std::string v_key(const std::string& layer) { return layer + ".v"; }
std::string bias_key(const std::string& layer) { return layer + ".b"; }

Matrix compose(const FactorizedParam& p) {
  if (p.u.empty() || p.v.empty() || p.rank() == 0) {
    throw RankError("compose: factor rank must be at least 1");
  }
  if (p.u.cols() != p.v.cols()) {
    throw ShapeError("compose: factor ranks differ (" + std::to_string(p.u.cols()) + " vs " +
                     std::to_string(p.v.cols()) + ")");
  }
  if (p.kernel) {
    const auto& k = *p.kernel;
    if (p.u.rows() != k.h * k.w * k.c_in || p.v.rows() != k.c_out) {
      throw ShapeError("compose: factors do not match the kernel shape descriptor");
    }
  }
  return matmul_nt(p.u, p.v);
}

TensorShape conv_output_shape(const TensorShape& in, std::size_t kh, std::size_t kw,
                              std::size_t c_out, Padding padding) {
  if (padding == Padding::Same) return {in.h, in.w, c_out};
  if (in.h < kh || in.w < kw) {
    throw ShapeError("valid convolution: input " + to_string(in) + " smaller than kernel " +
                     std::to_string(kh) + "x" + std::to_string(kw));
  }
  return {in.h - kh + 1, in.w - kw + 1, c_out};
}

Matrix conv_forward(const Matrix& input, const TensorShape& shape, const Matrix& kernel,
                    std::size_t kh, std::size_t kw, Padding padding) {
  require_input(input, shape, "conv_forward");
  if (kernel.rows() != kh * kw * shape.c) {
    throw ShapeError("conv_forward: kernel rows " + std::to_string(kernel.rows()) +
                     " != kh*kw*c_in " + std::to_string(kh * kw * shape.c));
  }
  const TensorShape out = conv_output_shape(shape, kh, kw, kernel.cols(), padding);
  const Matrix patches = im2col(input, shape, kh, kw, padding, out);
  return matmul(patches, kernel).reshaped(input.rows(), out.size());
}

Matrix conv_forward_factorized(const Matrix& input, const TensorShape& shape,
                               const FactorizedParam& p, Padding padding) {
  require_input(input, shape, "conv_forward_factorized");
  if (!p.kernel) throw ShapeError("conv_forward_factorized: missing kernel shape descriptor");
  const KernelShape& k = *p.kernel;
  if (k.c_in != shape.c) throw ShapeError("conv_forward_factorized: channel mismatch");
  if (p.u.cols() != p.v.cols() || p.u.rows() != k.h * k.w * k.c_in || p.v.rows() != k.c_out) {
    throw ShapeError("conv_forward_factorized: factors do not match the kernel shape");
  }
  const TensorShape out = conv_output_shape(shape, k.h, k.w, k.c_out, padding);
  const Matrix patches = im2col(input, shape, k.h, k.w, padding, out);
  return matmul_nt(matmul(patches, p.u), p.v).reshaped(input.rows(), out.size());
}

Network::Network(NetworkSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  TensorShape cur = spec_.input;
  shapes_.push_back(cur);
  for (const LayerSpec& l : spec_.layers) {
    switch (l.kind) {
      case LayerKind::Dense:
      case LayerKind::FactorizedDense: cur = {1, 1, l.out}; break;
      case LayerKind::Conv:
      case LayerKind::FactorizedConv:
        cur = conv_output_shape(cur, l.kernel_h, l.kernel_w, l.out, l.padding);
        break;
      case LayerKind::Flatten: cur = {1, 1, cur.size()}; break;
      case LayerKind::ReLU: break;
    }
    shapes_.push_back(cur);
  }
}

void Network::check_params(const ParamSet& params) const {
  std::size_t expected = 0;
  for (const LayerSpec& l : spec_.layers) {
    if (!l.affine()) continue;
    if (l.factorized()) {
      require_param_shape(params, u_key(l.name), l.weight_rows(), l.rank);
      require_param_shape(params, v_key(l.name), l.weight_cols(), l.rank);
      expected += 2;
    } else {
      require_param_shape(params, weight_key(l.name), l.weight_rows(), l.weight_cols());
      ++expected;
    }
    if (l.bias) {
      require_param_shape(params, bias_key(l.name), 1, l.out);
      ++expected;
    }
  }
  if (params.size() != expected) {
    throw ShapeError("parameter set has " + std::to_string(params.size()) +
                     " tensors, architecture needs " + std::to_string(expected));
  }
}

Matrix Network::run_layers(const ParamSet& params, const Matrix& inputs, ForwardCache* cache) const {
  require_input(inputs, spec_.input, "forward");
  const std::size_t batch = inputs.rows();
  Matrix act = inputs;
  if (cache != nullptr) {
    cache->inputs.assign(spec_.layers.size(), Matrix{});
    cache->patches.assign(spec_.layers.size(), Matrix{});
    cache->intermediate.assign(spec_.layers.size(), Matrix{});
  }
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const LayerSpec& l = spec_.layers[i];
    const TensorShape& in = shapes_[i];
    const TensorShape& out = shapes_[i + 1];
    if (cache != nullptr) cache->inputs[i] = act;
    switch (l.kind) {
      case LayerKind::Dense:
        act = matmul(act, params.at(weight_key(l.name)));
        if (l.bias) add_bias_rows(act, params.at(bias_key(l.name)));
        break;
      case LayerKind::FactorizedDense: {
        Matrix h = matmul(act, params.at(u_key(l.name)));
        act = matmul_nt(h, params.at(v_key(l.name)));
        if (l.bias) add_bias_rows(act, params.at(bias_key(l.name)));
        if (cache != nullptr) cache->intermediate[i] = std::move(h);
        break;
      }
      case LayerKind::Conv:
      case LayerKind::FactorizedConv: {
        Matrix patches = im2col(act, in, l.kernel_h, l.kernel_w, l.padding, out);
        Matrix y;
        if (l.kind == LayerKind::Conv) {
          y = matmul(patches, params.at(weight_key(l.name)));
        } else {
          Matrix h = matmul(patches, params.at(u_key(l.name)));
          y = matmul_nt(h, params.at(v_key(l.name)));
          if (cache != nullptr) cache->intermediate[i] = std::move(h);
        }
        if (l.bias) add_bias_rows(y, params.at(bias_key(l.name)));
        act = y.reshaped(batch, out.size());
        if (cache != nullptr) cache->patches[i] = std::move(patches);
        break;
      }
      case LayerKind::ReLU:
        for (double& x : act.data()) x = x > 0.0 ? x : 0.0;
        break;
      case LayerKind::Flatten:
        break;
    }
    if (!act.all_finite()) {
      throw NumericsError("non-finite activation produced by layer '" + l.name + "'");
    }
  }
  return act;
}

Matrix Network::predict(const ParamSet& params, const Matrix& inputs) const {
  check_params(params);
  return run_layers(params, inputs, nullptr);
}

std::pair<double, Matrix> Network::head_loss(const Matrix& outputs, const Batch& batch) const {
  const std::size_t n = outputs.rows();
  const double inv = 1.0 / static_cast<double>(n);
  Matrix grad(outputs.rows(), outputs.cols());
  double loss = 0.0;
  if (spec_.head == HeadKind::SoftmaxCrossEntropy) {
    if (batch.labels.size() != n) throw ShapeError("label count does not match batch size");
    for (std::size_t i = 0; i < n; ++i) {
      const auto z = outputs.row(i);
      const std::size_t y = batch.labels[i];
      if (y >= z.size()) {
        throw ShapeError("label " + std::to_string(y) + " out of range for " +
                         std::to_string(z.size()) + " classes");
      }
      const double zmax = *std::max_element(z.begin(), z.end());
      double denom = 0.0;
      for (double v : z) denom += std::exp(v - zmax);
      const double log_denom = std::log(denom);
      loss += (zmax + log_denom) - z[y];
      auto g = grad.row(i);
      for (std::size_t j = 0; j < z.size(); ++j) g[j] = std::exp(z[j] - zmax - log_denom) * inv;
      g[y] -= inv;
    }
  } else {
    require_same_shape(outputs, batch.targets, "mse head targets");
    for (std::size_t k = 0; k < outputs.size(); ++k) {
      const double d = outputs.data()[k] - batch.targets.data()[k];
      loss += 0.5 * d * d;
      grad.data()[k] = d * inv;
    }
  }
  loss *= inv;
  if (!std::isfinite(loss)) throw NumericsError("non-finite loss at the " + to_string(spec_.head) + " head");
  return {loss, std::move(grad)};
}

ForwardResult Network::forward(const ParamSet& params, const Batch& batch) const {
  check_params(params);
  if (batch.size() == 0) throw ShapeError("empty batch");
  ForwardResult result;
  result.cache.output = run_layers(params, batch.inputs, &result.cache);
  auto [loss, grad] = head_loss(result.cache.output, batch);
  result.loss = loss;
  result.cache.head_grad = std::move(grad);
  result.cache.batch = batch.size();
  result.cache.params_version = params.version();
  result.cache.valid = true;
  return result;
}

Gradients Network::backward(const ParamSet& params, const ForwardCache& cache) const {
  return backward_from(params, cache, cache.head_grad);
}

Gradients Network::backward_from(const ParamSet& params, const ForwardCache& cache,
                                 const Matrix& output_grad) const {
  if (!cache.valid) throw StateError("backward called without a forward cache");
  if (cache.params_version != params.version()) {
    throw StateError("stale forward cache: parameters changed since forward");
  }
  require_same_shape(output_grad, cache.output, "output gradient");
  Gradients grads = params.zeros_like();
  Matrix g = output_grad;
  for (std::size_t idx = spec_.layers.size(); idx-- > 0;) {
    const LayerSpec& l = spec_.layers[idx];
    const TensorShape& in = shapes_[idx];
    const TensorShape& out = shapes_[idx + 1];
    const Matrix& x = cache.inputs[idx];
    const bool need_input_grad = idx > 0;
    switch (l.kind) {
      case LayerKind::Dense: {
        const Matrix& w = params.at(weight_key(l.name));
        grads.mutable_at(weight_key(l.name)) = matmul_tn(x, g);
        if (l.bias) grads.mutable_at(bias_key(l.name)) = column_sums(g);
        if (need_input_grad) g = matmul_nt(g, w);
        break;
      }
      case LayerKind::FactorizedDense: {
        const Matrix& u = params.at(u_key(l.name));
        const Matrix& v = params.at(v_key(l.name));
        grads.mutable_at(v_key(l.name)) = matmul_tn(g, cache.intermediate[idx]);
        if (l.bias) grads.mutable_at(bias_key(l.name)) = column_sums(g);
        const Matrix dh = matmul(g, v);
        grads.mutable_at(u_key(l.name)) = matmul_tn(x, dh);
        if (need_input_grad) g = matmul_nt(dh, u);
        break;
      }
      case LayerKind::Conv:
      case LayerKind::FactorizedConv: {
        const Matrix gy = g.reshaped(cache.batch * out.h * out.w, out.c);
        const Matrix& patches = cache.patches[idx];
        if (l.bias) grads.mutable_at(bias_key(l.name)) = column_sums(gy);
        Matrix dpatches;
        if (l.kind == LayerKind::Conv) {
          const Matrix& k = params.at(weight_key(l.name));
          grads.mutable_at(weight_key(l.name)) = matmul_tn(patches, gy);
          if (need_input_grad) dpatches = matmul_nt(gy, k);
        } else {
          const Matrix& u = params.at(u_key(l.name));
          const Matrix& v = params.at(v_key(l.name));
          grads.mutable_at(v_key(l.name)) = matmul_tn(gy, cache.intermediate[idx]);
          const Matrix dh = matmul(gy, v);
          grads.mutable_at(u_key(l.name)) = matmul_tn(patches, dh);
          if (need_input_grad) dpatches = matmul_nt(dh, u);
        }
        if (need_input_grad) {
          g = col2im(dpatches, cache.batch, in, l.kernel_h, l.kernel_w, l.padding, out);
        }
        break;
      }
      case LayerKind::ReLU: {
        auto gd = g.data();
        const auto xd = x.data();
        for (std::size_t k = 0; k < gd.size(); ++k)
          if (!(xd[k] > 0.0)) gd[k] = 0.0;
        break;
      }
      case LayerKind::Flatten:
        break;
    }
  }
  return grads;
}

ParamSet compose_params(const NetworkSpec& spec, const ParamSet& params) {
  ParamSet out;
  for (const LayerSpec& l : spec.layers) {
    if (!l.affine()) continue;
    if (l.factorized()) {
      out.insert(weight_key(l.name),
                 compose(FactorizedParam{params.at(u_key(l.name)), params.at(v_key(l.name)), {}}));
    } else {
      out.insert(weight_key(l.name), params.at(weight_key(l.name)));
    }
    if (l.bias) out.insert(bias_key(l.name), params.at(bias_key(l.name)));
  }
  return out;
}

}  // namespace lrlab
