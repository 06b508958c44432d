#pragma once

// JSON-lines logger: one compact object per line, safe to share between threads.

#include <mutex>
#include <ostream>
#include <string>

#include "json.hpp"

namespace fgss::util {

class JsonLog {
 public:
  explicit JsonLog(std::ostream& out) : out_(&out) {}

  /// Writes {"ts":..., "event": event, ...fields}.
  void event(const std::string& event, const nlohmann::json& fields = nlohmann::json::object());
  void raw(const nlohmann::json& record);

 private:
  std::ostream* out_;
  std::mutex mu_;
};

}  // namespace fgss::util
