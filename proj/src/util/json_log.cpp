#include "fgss/util/json_log.hpp"

#include "fgss/train/manifest.hpp"

namespace fgss::util {

void JsonLog::event(const std::string& event, const nlohmann::json& fields) {
  nlohmann::json rec = {{"ts", train::utc_timestamp()}, {"event", event}};
  if (fields.is_object()) {
    for (auto it = fields.begin(); it != fields.end(); ++it) rec[it.key()] = it.value();
  }
  raw(rec);
}

void JsonLog::raw(const nlohmann::json& record) {
  const std::string line = record.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
  std::lock_guard lock(mu_);
  *out_ << line << '\n';
  out_->flush();
}

}  // namespace fgss::util
