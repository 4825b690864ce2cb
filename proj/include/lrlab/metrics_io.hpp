#pragma once

#include <cstddef>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "lrlab/trainer.hpp"

namespace lrlab {

inline constexpr int kMetricsSchema = 1;

// One JSON object without a trailing newline. Non-finite numbers become null.
std::string metric_to_json(const MetricRecord& record);
MetricRecord metric_from_json(const std::string& line);

// Append-only JSON-lines writer; every record is flushed as it is written.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path);

  // Throws StateError unless record.step exceeds the previous step.
  void write(const MetricRecord& record);
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
  std::ofstream out_;
  std::optional<std::size_t> last_step_;
};

std::vector<MetricRecord> read_metrics(const std::string& path);

}  // namespace lrlab
