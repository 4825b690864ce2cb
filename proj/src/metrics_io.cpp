#include "lrlab/metrics_io.hpp"

#include <cmath>
#include <limits>

#include "json.hpp"
#include "lrlab/errors.hpp"

namespace lrlab {

namespace {

using json = nlohmann::ordered_json;

json number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double number_of(const json& j, const char* key) {
  const json& v = j.at(key);
  return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
}

}  // namespace

std::string metric_to_json(const MetricRecord& r) {
  json j;
  j["schema"] = kMetricsSchema;
  j["step"] = r.step;
  j["wall_ms"] = number(r.wall_ms);
  j["loss"] = number(r.loss);
  j["eval_loss"] = number(r.eval_loss);
  j["eval_acc"] = number(r.eval_acc);
  j["lr"] = number(r.lr);
  j["factorized"] = r.factorized;
  if (r.switched) {
    j["switched"] = true;
    j["pre_switch_eval_loss"] = number(r.pre_switch_eval_loss.value_or(NAN));
    j["pre_switch_eval_acc"] = number(r.pre_switch_eval_acc.value_or(NAN));
  }
  json layers = json::object();
  for (const LayerMetrics& l : r.layers) {
    json sv = json::array();
    for (double s : l.sv_top) sv.push_back(number(s));
    layers[l.layer] = {{"frob", number(l.frob)},
                       {"eff_rank", number(l.eff_rank)},
                       {"eff_step", number(l.eff_step)},
                       {"sv_top", sv}};
  }
  j["layers"] = layers;
  return j.dump();
}

MetricRecord metric_from_json(const std::string& line) {
  try {
    const json j = json::parse(line);
    if (j.at("schema").get<int>() != kMetricsSchema) {
      throw FormatError("unsupported metrics schema " + j.at("schema").dump());
    }
    MetricRecord r;
    r.step = j.at("step").get<std::size_t>();
    r.wall_ms = number_of(j, "wall_ms");
    r.loss = number_of(j, "loss");
    r.eval_loss = number_of(j, "eval_loss");
    r.eval_acc = number_of(j, "eval_acc");
    r.lr = number_of(j, "lr");
    r.factorized = j.at("factorized").get<bool>();
    if (j.contains("switched")) {
      r.switched = j.at("switched").get<bool>();
      r.pre_switch_eval_loss = number_of(j, "pre_switch_eval_loss");
      r.pre_switch_eval_acc = number_of(j, "pre_switch_eval_acc");
    }
    for (const auto& [name, l] : j.at("layers").items()) {
      LayerMetrics m;
      m.layer = name;
      m.frob = number_of(l, "frob");
      m.eff_rank = number_of(l, "eff_rank");
      m.eff_step = number_of(l, "eff_step");
      for (const auto& s : l.at("sv_top"))
        m.sv_top.push_back(s.is_null() ? std::numeric_limits<double>::quiet_NaN() : s.get<double>());
      r.layers.push_back(std::move(m));
    }
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed metrics record: ") + e.what());
  }
}

MetricsWriter::MetricsWriter(const std::string& path) : path_(path), out_(path, std::ios::trunc) {
  if (!out_) throw IoError("cannot open metrics file '" + path + "' for writing");
}

void MetricsWriter::write(const MetricRecord& record) {
  if (last_step_ && record.step <= *last_step_) {
    throw StateError("metrics step " + std::to_string(record.step) + " does not follow step " +
                     std::to_string(*last_step_));
  }
  out_ << metric_to_json(record) << '\n';
  out_.flush();
  if (!out_) throw IoError("failed writing metrics file '" + path_ + "'");
  last_step_ = record.step;
}

std::vector<MetricRecord> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics file '" + path + "'");
  std::vector<MetricRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(metric_from_json(line));
    } catch (const FormatError& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace lrlab
