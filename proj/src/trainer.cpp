#include "lrlab/trainer.hpp"

#include <algorithm>
#include <memory>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include "lrlab/errors.hpp"
#include "lrlab/linalg.hpp"

namespace lrlab {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Epoch-wise shuffled minibatches drawn from a dedicated stream.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, Rng rng)
      : order_(n), batch_(std::min(batch, n)), rng_(rng) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    shuffle();
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> idx;
    idx.reserve(batch_);
    while (idx.size() < batch_) {
      if (pos_ == order_.size()) {
        shuffle();
        pos_ = 0;
      }
      idx.push_back(order_[pos_++]);
    }
    return idx;
  }

 private:
  void shuffle() {
    for (std::size_t i = order_.size(); i > 1; --i) {
      const std::size_t j = rng_.below(i);
      std::swap(order_[i - 1], order_[j]);
    }
  }

  std::vector<std::size_t> order_;
  std::size_t batch_;
  Rng rng_;
  std::size_t pos_ = 0;
};

bool weight_layer(const LayerSpec& l) {
  return l.affine() && (l.factorized() || l.low_rank_eligible);
}

Matrix layer_weight(const LayerSpec& l, const ParamSet& params) {
  if (l.factorized()) {
    return compose(FactorizedParam{params.at(u_key(l.name)), params.at(v_key(l.name)), {}});
  }
  return params.at(weight_key(l.name));
}

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
        .count();
  }
};

RunResult run(const NetworkSpec& base_in, const TrainConfig& config,
              const std::optional<SwitchPolicy>& policy, const DataSplit& data,
              const RunOptions& options) {
  config.validate();
  if (policy) policy->validate(config.steps);
  if (data.train.size() == 0) throw InvalidInput("training dataset is empty");
  if (data.eval.size() == 0) throw InvalidInput("eval dataset is empty");

  NetworkSpec base = base_in.unfactorized();
  base.validate();
  if (base.input != data.train.input_shape) {
    throw ShapeError("model input " + to_string(base.input) + " does not match dataset input " +
                     to_string(data.train.input_shape));
  }
  if ((base.head == HeadKind::SoftmaxCrossEntropy) != data.train.classification()) {
    throw ShapeError("model head " + to_string(base.head) + " does not fit the dataset kind");
  }

  const Rng root(config.seed);
  const bool start_low_rank = !policy && config.low_rank;
  const NetworkSpec low_rank_spec = base.factorized(config.rank_fraction);

  RunState state;
  state.spec = start_low_rank ? low_rank_spec : base;
  state.step = options.start_step;
  auto net = std::make_unique<Network>(state.spec);
  if (options.initial_params) {
    state.params = *options.initial_params;
    const bool resumed_low_rank = std::any_of(
        state.params.entries().begin(), state.params.entries().end(),
        [](const ParamSet::Entry& e) { return e.first.ends_with(".u"); });
    if (resumed_low_rank && !start_low_rank) {
      if (!policy) throw ShapeError("checkpoint holds factorized layers but the run is unfactorized");
      state.spec = low_rank_spec;
      state.lr_multiplier = policy->lr_multiplier_after_switch;
      net = std::make_unique<Network>(state.spec);
    }
    net->check_params(state.params);
  } else {
    state.params = initialize_params(*net, root.split(0), config.init);
  }
  state.momentum = state.params.zeros_like();

  BatchSampler sampler(data.train.size(), config.batch_size, root.split(1));
  // Keep the sampler aligned with an uninterrupted run when resuming.
  for (std::size_t t = 0; t < options.start_step; ++t) sampler.next();

  RunResult result;
  const Timer timer;
  double window_sum = 0.0;
  std::size_t window_count = 0;
  const std::size_t ckpt_every = config.checkpoint_interval();

  auto current_lr = [&](std::size_t step) { return learning_rate(config, step) * state.lr_multiplier; };

  auto make_record = [&](std::size_t step) {
    MetricRecord rec;
    rec.step = step;
    rec.wall_ms = config.record_wall_time ? timer.ms() : 0.0;
    rec.loss = window_count > 0 ? window_sum / static_cast<double>(window_count) : kNaN;
    const EvalResult ev = evaluate(*net, state.params, data.eval, config.eval_batch);
    rec.eval_loss = ev.loss;
    rec.eval_acc = ev.accuracy;
    rec.lr = current_lr(std::min(step, config.steps - 1));
    rec.factorized = state.factorized();
    rec.layers = layer_metrics(state.spec, state.params, rec.lr, config.sv_top_k);
    window_sum = 0.0;
    window_count = 0;
    return rec;
  };

  auto emit = [&](MetricRecord rec) {
    if (options.hooks.on_metric) options.hooks.on_metric(rec);
    result.metrics.push_back(std::move(rec));
  };

  for (std::size_t t = options.start_step; t < config.steps; ++t) {
    const bool switch_now = policy && !state.factorized() && t == policy->pretrain_steps;
    if (switch_now) {
      const EvalResult before = evaluate(*net, state.params, data.eval, config.eval_batch);
      state.params = factorize_params(low_rank_spec, state.params, policy->resume_init);
      state.spec = low_rank_spec;
      net = std::make_unique<Network>(state.spec);
      state.momentum = state.params.zeros_like();
      state.lr_multiplier *= policy->lr_multiplier_after_switch;
      result.switch_step = t;
      MetricRecord rec = make_record(t);
      rec.switched = true;
      rec.pre_switch_eval_loss = before.loss;
      rec.pre_switch_eval_acc = before.accuracy;
      emit(std::move(rec));
    } else if (config.eval_every > 0 && t % config.eval_every == 0) {
      emit(make_record(t));
    }

    const auto idx = sampler.next();
    const Batch batch = data.train.gather(idx);
    ForwardResult fwd = net->forward(state.params, batch);
    Gradients grads = net->backward(state.params, fwd.cache);
    apply_penalties(state.spec, state.params, config.reg, config.weight_decay, &grads);
    sgd_step(state.params, state.momentum, grads, current_lr(t), config.momentum);
    state.step = t + 1;
    result.step_losses.push_back(fwd.loss);
    window_sum += fwd.loss;
    ++window_count;

    if (state.step % ckpt_every == 0 || state.step == config.steps) {
      result.checkpoints.emplace_back(state.step, state.params);
      if (options.hooks.on_checkpoint) options.hooks.on_checkpoint(state);
    }
  }
  emit(make_record(config.steps));

  result.final_spec = state.spec;
  result.final_params = std::move(state.params);
  return result;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr must be positive");
  if (!(lr_scale > 0.0) || !std::isfinite(lr_scale)) throw ConfigError("train.lr_scale must be positive");
  if (!(momentum >= 0.0) || momentum >= 1.0) throw ConfigError("train.momentum must lie in [0, 1)");
  if (steps < 1) throw ConfigError("train.steps must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(rank_fraction > 0.0) || rank_fraction > 1.0) {
    throw ConfigError("train.rank_fraction must lie in (0, 1]");
  }
  if (!(reg.lambda >= 0.0)) throw ConfigError("train.reg.lambda must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  if (eval_batch < 1) throw ConfigError("output.eval_batch must be >= 1");
  for (const auto& s : schedule) {
    if (!(s.factor > 0.0)) throw ConfigError("train.schedule factors must be positive");
  }
}

std::size_t TrainConfig::checkpoint_interval() const noexcept {
  if (checkpoint_every > 0) return checkpoint_every;
  return std::max<std::size_t>(1, steps / 10);
}

void SwitchPolicy::validate(std::size_t total_steps) const {
  if (pretrain_steps >= total_steps) {
    throw ConfigError("switch.pretrain_steps must be smaller than train.steps");
  }
  if (resume_init == InitKind::He) throw ConfigError("switch.resume_init must be spectral or spectral_ones");
  if (!(lr_multiplier_after_switch > 0.0)) {
    throw ConfigError("switch.lr_multiplier_after_switch must be positive");
  }
}

double learning_rate(const TrainConfig& config, std::size_t step) {
  double lr = config.lr * config.lr_scale;
  for (const auto& s : config.schedule)
    if (step >= s.step) lr *= s.factor;
  return lr;
}

void sgd_step(ParamSet& params, ParamSet& momentum_buffers, const Gradients& grads, double lr,
              double momentum) {
  if (params.size() != grads.size() || params.size() != momentum_buffers.size()) {
    throw ShapeError("sgd_step: gradient set does not match parameters");
  }
  const auto& pe = params.entries();
  const auto& ge = grads.entries();
  const auto& be = momentum_buffers.entries();
  std::vector<Matrix> new_buf(pe.size());
  std::vector<Matrix> new_param(pe.size());
  for (std::size_t k = 0; k < pe.size(); ++k) {
    if (pe[k].first != ge[k].first || pe[k].first != be[k].first) {
      throw ShapeError("sgd_step: tensor order differs at '" + pe[k].first + "'");
    }
    require_same_shape(pe[k].second, ge[k].second, "sgd_step gradient '" + pe[k].first + "'");
    Matrix buf = be[k].second;
    buf *= momentum;
    buf += ge[k].second;
    Matrix p = pe[k].second;
    p.axpy(-lr, buf);
    if (!p.all_finite() || !buf.all_finite()) {
      throw NumericsError("non-finite update for parameter '" + pe[k].first + "'");
    }
    new_buf[k] = std::move(buf);
    new_param[k] = std::move(p);
  }
  auto& pm = params.mutable_entries();
  auto& bm = momentum_buffers.mutable_entries();
  for (std::size_t k = 0; k < pm.size(); ++k) {
    pm[k].second = std::move(new_param[k]);
    bm[k].second = std::move(new_buf[k]);
  }
}

void sgd_step(RunState& state, const Gradients& grads, const TrainConfig& config) {
  const double lr = learning_rate(config, state.step) * state.lr_multiplier;
  sgd_step(state.params, state.momentum, grads, lr, config.momentum);
  ++state.step;
}

double effective_step_size(const Matrix& w, double lr) {
  const double norm2 = sum_squares(w);
  if (!(norm2 > 0.0)) throw DegenerateInput("effective step size of a zero weight is undefined");
  return lr / norm2;
}

double effective_step_size(const FactorizedParam& p, double lr) {
  return effective_step_size(compose(p), lr);
}

EvalResult evaluate(const Network& net, const ParamSet& params, const Dataset& data, std::size_t batch) {
  if (data.size() == 0) throw InvalidInput("cannot evaluate on an empty dataset");
  net.check_params(params);
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < data.size(); begin += batch) {
    const std::size_t end = std::min(data.size(), begin + batch);
    const Batch b = data.slice(begin, end);
    const Matrix out = net.predict(params, b.inputs);
    const double loss = net.head_loss(out, b).first;
    loss_sum += loss * static_cast<double>(b.size());
    if (data.classification()) {
      for (std::size_t i = 0; i < b.size(); ++i) {
        const auto row = out.row(i);
        const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        if (best == b.labels[i]) ++correct;
      }
    }
  }
  const auto n = static_cast<double>(data.size());
  return {loss_sum / n, data.classification() ? static_cast<double>(correct) / n : kNaN};
}

std::vector<LayerMetrics> layer_metrics(const NetworkSpec& spec, const ParamSet& params, double lr,
                                        std::size_t top_k) {
  std::vector<LayerMetrics> out;
  for (const LayerSpec& l : spec.layers) {
    if (!weight_layer(l)) continue;
    const Matrix w = layer_weight(l, params);
    LayerMetrics m;
    m.layer = l.name;
    const double norm2 = sum_squares(w);
    m.frob = std::sqrt(norm2);
    const auto sigma = singular_values(w);
    m.eff_rank = sigma.front() > 0.0 ? effective_rank_from_sigma(sigma) : kNaN;
    m.eff_step = norm2 > 0.0 ? lr / norm2 : kNaN;
    m.sv_top.assign(sigma.begin(), sigma.begin() + static_cast<std::ptrdiff_t>(std::min(top_k, sigma.size())));
    out.push_back(std::move(m));
  }
  return out;
}

RunResult train(const NetworkSpec& base, const TrainConfig& config, const DataSplit& data,
                const RunOptions& options) {
  return run(base, config, std::nullopt, data, options);
}

RunResult pretrain_switch(const NetworkSpec& base, const TrainConfig& config,
                          const SwitchPolicy& policy, const DataSplit& data,
                          const RunOptions& options) {
  return run(base, config, policy, data, options);
}

}  // namespace lrlab
