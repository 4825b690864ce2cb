#include "lrlab/config.hpp"

#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "json.hpp"
#include "lrlab/errors.hpp"

namespace lrlab {

namespace {

using json = nlohmann::ordered_json;

// Typed, key-tracking view over one JSON object.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("'" + path_ + "' must be a JSON object");
  }

  bool has(const std::string& key) {
    known_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return convert<T>(key);
  }

  template <typename T>
  T require(const std::string& key) {
    if (!has(key)) throw ConfigError("missing required key '" + where(key) + "'");
    return convert<T>(key);
  }

  const json& raw(const std::string& key) {
    if (!has(key)) throw ConfigError("missing required key '" + where(key) + "'");
    return j_.at(key);
  }

  std::string where(const std::string& key) const { return path_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!known_.count(key)) throw ConfigError("unknown key '" + where(key) + "'");
    }
  }

 private:
  template <typename T>
  T convert(const std::string& key) {
    const json& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("'" + where(key) + "' must be true or false");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("'" + where(key) + "' must be a string");
      return v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("'" + where(key) + "' must be a number");
      return v.get<T>();
    } else {
      if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
        throw ConfigError("'" + where(key) + "' must be a non-negative integer");
      }
      return static_cast<T>(v.get<std::uint64_t>());
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> known_;
};

std::size_t positive(std::size_t v, const std::string& where) {
  if (v == 0) throw ConfigError("'" + where + "' must be positive");
  return v;
}

Padding parse_padding(const std::string& s, const std::string& where) {
  if (s == "same") return Padding::Same;
  if (s == "valid") return Padding::Valid;
  throw ConfigError("'" + where + "' must be \"same\" or \"valid\"");
}

HeadKind parse_head(const std::string& s) {
  if (s == "softmax_cross_entropy" || s == "softmax") return HeadKind::SoftmaxCrossEntropy;
  if (s == "mse") return HeadKind::MSE;
  throw ConfigError("'model.head' must be \"softmax_cross_entropy\" or \"mse\"");
}

std::pair<std::size_t, std::size_t> parse_kernel(const json& k, const std::string& where) {
  if (k.is_number_unsigned()) {
    const auto s = positive(k.get<std::size_t>(), where);
    return {s, s};
  }
  if (k.is_array() && k.size() == 2 && k[0].is_number_unsigned() && k[1].is_number_unsigned()) {
    return {positive(k[0].get<std::size_t>(), where), positive(k[1].get<std::size_t>(), where)};
  }
  throw ConfigError("'" + where + "' must be a positive integer or [h, w]");
}

NetworkSpec parse_model(const json& j) {
  Section model(j, "model");
  NetworkSpec spec;
  const json& input = model.raw("input");
  if (!input.is_array() || (input.size() != 1 && input.size() != 3)) {
    throw ConfigError("'model.input' must be [features] or [h, w, c]");
  }
  std::vector<std::size_t> dims;
  for (const auto& d : input) {
    if (!d.is_number_unsigned() || d.get<std::size_t>() == 0) {
      throw ConfigError("'model.input' entries must be positive integers");
    }
    dims.push_back(d.get<std::size_t>());
  }
  spec.input = dims.size() == 1 ? TensorShape{1, 1, dims[0]} : TensorShape{dims[0], dims[1], dims[2]};
  spec.head = parse_head(model.get<std::string>("head", "softmax_cross_entropy"));

  const json& layers = model.raw("layers");
  if (!layers.is_array() || layers.empty()) throw ConfigError("'model.layers' must be a non-empty array");
  std::vector<bool> explicit_flags;
  TensorShape cur = spec.input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    Section ls(layers[i], "model.layers[" + std::to_string(i) + "]");
    const std::string type = ls.require<std::string>("type");
    LayerSpec l;
    if (type == "dense" || type == "factorized_dense") {
      const auto units = positive(ls.require<std::size_t>("units"), ls.where("units"));
      const std::size_t in = cur.flat() ? cur.c : cur.size();
      l = type == "dense" ? LayerSpec::dense(in, units, ls.get<bool>("bias", true))
                          : LayerSpec::factorized_dense(in, units, ls.require<std::size_t>("rank"),
                                                        ls.get<bool>("bias", true));
      if (!cur.flat()) l.in = cur.c;  // validate() reports the missing flatten
      cur = {1, 1, units};
    } else if (type == "conv" || type == "factorized_conv") {
      const auto [kh, kw] = parse_kernel(ls.raw("kernel"), ls.where("kernel"));
      const auto filters = positive(ls.require<std::size_t>("filters"), ls.where("filters"));
      const Padding pad = parse_padding(ls.get<std::string>("padding", "same"), ls.where("padding"));
      l = type == "conv" ? LayerSpec::conv(kh, kw, cur.c, filters, pad, ls.get<bool>("bias", true))
                         : LayerSpec::factorized_conv(kh, kw, cur.c, filters,
                                                      ls.require<std::size_t>("rank"), pad,
                                                      ls.get<bool>("bias", true));
      cur = conv_output_shape(cur, kh, kw, filters, pad);
    } else if (type == "relu") {
      l = LayerSpec::relu();
    } else if (type == "flatten") {
      l = LayerSpec::flatten();
      cur = {1, 1, cur.size()};
    } else {
      throw ConfigError("'" + ls.where("type") + "': unknown layer type '" + type + "'");
    }
    l.name = ls.get<std::string>("name", "");
    const bool has_flag = l.affine() && ls.has("low_rank");
    explicit_flags.push_back(has_flag);
    if (has_flag) l.low_rank_eligible = ls.get<bool>("low_rank", true);
    ls.finish();
    spec.layers.push_back(std::move(l));
  }
  model.finish();
  apply_default_eligibility(spec, explicit_flags);
  spec.validate();
  return spec;
}

RegPenalty parse_reg(const json& j) {
  Section s(j, "train.reg");
  RegPenalty reg;
  reg.kind = parse_penalty_kind(s.get<std::string>("kind", "none"));
  if (reg.kind == PenaltyKind::WeightDecayFull) {
    throw ConfigError("'train.reg.kind' applies to factor pairs: use none, l2 or frobenius_decay");
  }
  reg.lambda = s.get<double>("lambda", 0.0);
  if (!(reg.lambda >= 0.0)) throw ConfigError("'train.reg.lambda' must be >= 0");
  s.finish();
  return reg;
}

void parse_train(const json& j, TrainConfig& t) {
  Section s(j, "train");
  t.lr = s.get<double>("lr", t.lr);
  t.lr_scale = s.get<double>("lr_scale", t.lr_scale);
  t.momentum = s.get<double>("momentum", t.momentum);
  if (s.has("reg")) t.reg = parse_reg(s.raw("reg"));
  t.weight_decay = s.get<double>("weight_decay", t.weight_decay);
  t.steps = s.get<std::size_t>("steps", t.steps);
  t.batch_size = s.get<std::size_t>("batch_size", t.batch_size);
  t.seed = s.get<std::uint64_t>("seed", t.seed);
  t.rank_fraction = s.get<double>("rank_fraction", t.rank_fraction);
  t.low_rank = s.get<bool>("low_rank", t.low_rank);
  t.init = parse_init_kind(s.get<std::string>("init", to_string(t.init)));
  if (s.has("schedule")) {
    const json& sched = s.raw("schedule");
    if (!sched.is_array()) throw ConfigError("'train.schedule' must be an array");
    for (std::size_t i = 0; i < sched.size(); ++i) {
      Section e(sched[i], "train.schedule[" + std::to_string(i) + "]");
      t.schedule.push_back({e.require<std::size_t>("step"), e.require<double>("factor")});
      e.finish();
    }
  }
  s.finish();
}

void parse_output(const json& j, TrainConfig& t, OutputConfig& o) {
  Section s(j, "output");
  o.dir = s.get<std::string>("dir", o.dir);
  t.eval_every = s.get<std::size_t>("eval_every", t.eval_every);
  t.checkpoint_every = s.get<std::size_t>("checkpoint_every", t.checkpoint_every);
  t.sv_top_k = s.get<std::size_t>("sv_top_k", t.sv_top_k);
  t.eval_batch = s.get<std::size_t>("eval_batch", t.eval_batch);
  t.record_wall_time = s.get<bool>("wall_clock", t.record_wall_time);
  s.finish();
}

SwitchPolicy parse_switch(const json& j, std::size_t steps) {
  Section s(j, "switch");
  SwitchPolicy p = default_switch_policy(steps);
  p.pretrain_steps = s.get<std::size_t>("pretrain_steps", p.pretrain_steps);
  p.resume_init = parse_init_kind(s.get<std::string>("resume_init", to_string(p.resume_init)));
  p.lr_multiplier_after_switch = s.get<double>("lr_multiplier_after_switch", p.lr_multiplier_after_switch);
  s.finish();
  return p;
}

std::string resolve_path(const std::string& p, const std::string& base_dir) {
  if (p.empty() || base_dir.empty()) return p;
  const std::filesystem::path path(p);
  if (path.is_absolute()) return p;
  return (std::filesystem::path(base_dir) / path).lexically_normal().string();
}

DatasetSpec parse_data(const json& j, const std::string& base_dir) {
  Section s(j, "data");
  const std::string kind = s.require<std::string>("kind");
  DatasetSpec out;
  if (kind == "synthetic_blobs") {
    BlobsSpec b;
    b.classes = s.get<std::size_t>("classes", b.classes);
    b.dim = s.get<std::size_t>("dim", b.dim);
    b.n = s.get<std::size_t>("n", b.n);
    b.eval_n = s.get<std::size_t>("eval_n", b.eval_n);
    b.spread = s.get<double>("spread", b.spread);
    b.seed = s.get<std::uint64_t>("seed", b.seed);
    out = b;
  } else if (kind == "synthetic_lowrank_regression") {
    LowRankRegressionSpec r;
    r.m = s.get<std::size_t>("m", r.m);
    r.n = s.get<std::size_t>("n", r.n);
    r.true_rank = s.get<std::size_t>("true_rank", r.true_rank);
    r.noise = s.get<double>("noise", r.noise);
    r.seed = s.get<std::uint64_t>("seed", r.seed);
    r.samples = s.get<std::size_t>("samples", r.samples);
    r.eval_samples = s.get<std::size_t>("eval_samples", r.eval_samples);
    out = r;
  } else if (kind == "idx_images") {
    IdxSpec x;
    x.images = resolve_path(s.require<std::string>("images"), base_dir);
    x.labels = resolve_path(s.require<std::string>("labels"), base_dir);
    x.eval_images = resolve_path(s.get<std::string>("eval_images", ""), base_dir);
    x.eval_labels = resolve_path(s.get<std::string>("eval_labels", ""), base_dir);
    if (x.eval_images.empty() != x.eval_labels.empty()) {
      throw ConfigError("'data.eval_images' and 'data.eval_labels' must be given together");
    }
    x.normalization = s.get<std::string>("normalization", x.normalization);
    if (x.normalization != "unit") throw ConfigError("'data.normalization' must be \"unit\"");
    x.eval_fraction = s.get<double>("eval_fraction", x.eval_fraction);
    out = x;
  } else {
    throw ConfigError("'data.kind' must be synthetic_blobs, synthetic_lowrank_regression or idx_images");
  }
  s.finish();
  return out;
}

json layer_json(const LayerSpec& l) {
  json j;
  j["type"] = to_string(l.kind);
  j["name"] = l.name;
  if (l.kind == LayerKind::Dense || l.kind == LayerKind::FactorizedDense) {
    j["units"] = l.out;
  } else if (l.convolutional()) {
    j["kernel"] = json::array({l.kernel_h, l.kernel_w});
    j["filters"] = l.out;
    j["padding"] = to_string(l.padding);
  }
  if (l.factorized()) j["rank"] = l.rank;
  if (l.affine()) {
    j["bias"] = l.bias;
    j["low_rank"] = l.low_rank_eligible;
  }
  return j;
}

json data_json(const DatasetSpec& d) {
  json j;
  if (const auto* b = std::get_if<BlobsSpec>(&d)) {
    j = {{"kind", "synthetic_blobs"}, {"classes", b->classes}, {"dim", b->dim}, {"n", b->n},
         {"eval_n", b->eval_n}, {"spread", b->spread}, {"seed", b->seed}};
  } else if (const auto* r = std::get_if<LowRankRegressionSpec>(&d)) {
    j = {{"kind", "synthetic_lowrank_regression"}, {"m", r->m}, {"n", r->n},
         {"true_rank", r->true_rank}, {"noise", r->noise}, {"seed", r->seed},
         {"samples", r->samples}, {"eval_samples", r->eval_samples}};
  } else {
    const auto& x = std::get<IdxSpec>(d);
    j = {{"kind", "idx_images"}, {"images", x.images}, {"labels", x.labels}};
    if (!x.eval_images.empty()) {
      j["eval_images"] = x.eval_images;
      j["eval_labels"] = x.eval_labels;
    }
    j["normalization"] = x.normalization;
    j["eval_fraction"] = x.eval_fraction;
  }
  return j;
}

}  // namespace

void apply_default_eligibility(NetworkSpec& spec, const std::vector<bool>& explicit_flags) {
  std::vector<std::size_t> affine;
  for (std::size_t i = 0; i < spec.layers.size(); ++i)
    if (spec.layers[i].affine()) affine.push_back(i);
  for (std::size_t k = 0; k < affine.size(); ++k) {
    const std::size_t i = affine[k];
    if (i < explicit_flags.size() && explicit_flags[i]) continue;
    spec.layers[i].low_rank_eligible = k != 0 && k + 1 != affine.size();
  }
}

SwitchPolicy default_switch_policy(std::size_t total_steps) {
  SwitchPolicy p;
  p.pretrain_steps = total_steps / 6;
  return p;
}

RunConfig parse_config(std::string_view json_text, const std::string& base_dir) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  Section s(root, "config");
  RunConfig cfg;
  try {
    cfg.model = parse_model(s.raw("model"));
  } catch (const ShapeError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  } catch (const RankError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  if (s.has("train")) parse_train(s.raw("train"), cfg.train);
  if (s.has("output")) parse_output(s.raw("output"), cfg.train, cfg.output);
  if (s.has("switch")) cfg.switch_policy = parse_switch(s.raw("switch"), cfg.train.steps);
  cfg.data = parse_data(s.raw("data"), base_dir);
  s.finish();
  cfg.train.validate();
  if (cfg.switch_policy) cfg.switch_policy->validate(cfg.train.steps);
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_config(text, std::filesystem::path(path).parent_path().string());
}

std::string materialize_config(const RunConfig& cfg) {
  json root;
  json model;
  const TensorShape& in = cfg.model.input;
  model["input"] = in.flat() ? json::array({in.c}) : json::array({in.h, in.w, in.c});
  model["head"] = to_string(cfg.model.head);
  model["layers"] = json::array();
  for (const LayerSpec& l : cfg.model.layers) model["layers"].push_back(layer_json(l));
  root["model"] = model;

  const TrainConfig& t = cfg.train;
  json train;
  train["lr"] = t.lr;
  train["lr_scale"] = t.lr_scale;
  train["momentum"] = t.momentum;
  train["reg"] = {{"kind", to_string(t.reg.kind)}, {"lambda", t.reg.lambda}};
  train["weight_decay"] = t.weight_decay;
  train["steps"] = t.steps;
  train["batch_size"] = t.batch_size;
  train["seed"] = t.seed;
  train["rank_fraction"] = t.rank_fraction;
  train["low_rank"] = t.low_rank;
  train["init"] = to_string(t.init);
  train["schedule"] = json::array();
  for (const auto& st : t.schedule) train["schedule"].push_back({{"step", st.step}, {"factor", st.factor}});
  root["train"] = train;

  if (cfg.switch_policy) {
    root["switch"] = {{"pretrain_steps", cfg.switch_policy->pretrain_steps},
                      {"resume_init", to_string(cfg.switch_policy->resume_init)},
                      {"lr_multiplier_after_switch", cfg.switch_policy->lr_multiplier_after_switch}};
  }
  root["data"] = data_json(cfg.data);
  root["output"] = {{"dir", cfg.output.dir},
                    {"eval_every", t.eval_every},
                    {"checkpoint_every", t.checkpoint_interval()},
                    {"sv_top_k", t.sv_top_k},
                    {"eval_batch", t.eval_batch},
                    {"wall_clock", t.record_wall_time}};
  return root.dump(2) + "\n";
}

}  // namespace lrlab
