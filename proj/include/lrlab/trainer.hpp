#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lrlab/dataset.hpp"
#include "lrlab/net.hpp"
#include "lrlab/rng.hpp"
#include "lrlab/schemes.hpp"

namespace lrlab {

// Multiplies the learning rate by `factor` from `step` onwards.
struct ScheduleStep {
  std::size_t step = 0;
  double factor = 1.0;
};

struct TrainConfig {
  double lr = 0.05;
  // Constant multiplier on the whole schedule (the effective-step-size ablation).
  double lr_scale = 1.0;
  double momentum = 0.9;
  RegPenalty reg;             // applied to factor pairs
  double weight_decay = 0.0;  // applied to unfactorized weight matrices
  std::size_t steps = 2000;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  double rank_fraction = 1.0;
  // Train eligible layers in factorized form from step 0.
  bool low_rank = false;
  InitKind init = InitKind::He;
  std::vector<ScheduleStep> schedule;

  std::size_t eval_every = 100;
  std::size_t checkpoint_every = 0;  // 0: ten checkpoints per run
  std::size_t sv_top_k = 5;
  std::size_t eval_batch = 512;
  bool record_wall_time = false;

  void validate() const;
  std::size_t checkpoint_interval() const noexcept;
};

struct SwitchPolicy {
  std::size_t pretrain_steps = 0;
  InitKind resume_init = InitKind::Spectral;
  double lr_multiplier_after_switch = 0.5;

  void validate(std::size_t total_steps) const;
};

// Learning rate applied to the update taken at `step` (before any switch
// multiplier).
double learning_rate(const TrainConfig& config, std::size_t step);

struct LayerMetrics {
  std::string layer;
  double frob = 0.0;
  double eff_rank = 0.0;
  double eff_step = 0.0;
  std::vector<double> sv_top;
};

struct MetricRecord {
  std::size_t step = 0;
  double wall_ms = 0.0;
  double loss = 0.0;  // mean minibatch loss since the previous record; NaN at step 0
  double eval_loss = 0.0;
  double eval_acc = 0.0;
  double lr = 0.0;
  bool factorized = false;
  bool switched = false;
  std::optional<double> pre_switch_eval_loss;
  std::optional<double> pre_switch_eval_acc;
  std::vector<LayerMetrics> layers;
};

struct RunState {
  std::size_t step = 0;
  NetworkSpec spec;
  ParamSet params;
  ParamSet momentum;
  double lr_multiplier = 1.0;

  bool factorized() const noexcept { return spec.has_factorized_layers(); }
};

struct TrainHooks {
  std::function<void(const MetricRecord&)> on_metric;
  std::function<void(const RunState&)> on_checkpoint;
};

struct RunOptions {
  TrainHooks hooks;
  // Resume from these parameters (names must match the run's architecture).
  std::optional<ParamSet> initial_params;
  std::size_t start_step = 0;
};

struct RunResult {
  std::vector<MetricRecord> metrics;
  std::vector<double> step_losses;  // minibatch data loss of every update
  NetworkSpec final_spec;
  ParamSet final_params;
  std::vector<std::pair<std::size_t, ParamSet>> checkpoints;
  std::optional<std::size_t> switch_step;
};

// buf ← momentum·buf + grad; param ← param − lr·buf. Throws NumericsError if
// any updated value is non-finite (parameters are left untouched then).
void sgd_step(ParamSet& params, ParamSet& momentum_buffers, const Gradients& grads, double lr,
              double momentum);
// Same update on a run state with lr taken from the config schedule.
void sgd_step(RunState& state, const Gradients& grads, const TrainConfig& config);

// lr / ‖W‖_F². Throws DegenerateInput for a zero weight.
double effective_step_size(const Matrix& w, double lr);
double effective_step_size(const FactorizedParam& p, double lr);

EvalResult evaluate(const Network& net, const ParamSet& params, const Dataset& data,
                    std::size_t batch = 512);

// Per-layer spectral measurements for every weight layer of the run.
std::vector<LayerMetrics> layer_metrics(const NetworkSpec& spec, const ParamSet& params, double lr,
                                        std::size_t top_k);

// Trains `base` (unfactorized architecture) per config; when config.low_rank
// is set the eligible layers are factorized from step 0.
RunResult train(const NetworkSpec& base, const TrainConfig& config, const DataSplit& data,
                const RunOptions& options = {});

// Unfactorized training for policy.pretrain_steps, then every eligible layer
// is replaced by spectral factors of its trained weight and training
// continues in low rank with the learning rate scaled by the policy.
RunResult pretrain_switch(const NetworkSpec& base, const TrainConfig& config,
                          const SwitchPolicy& policy, const DataSplit& data,
                          const RunOptions& options = {});

}  // namespace lrlab
