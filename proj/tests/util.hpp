#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>

namespace testutil {

/// Fresh scratch directory under $FGSS_TEST_TMP (or the system temp dir).
inline std::filesystem::path scratch(const std::string& name) {
  const char* env = std::getenv("FGSS_TEST_TMP");
  const std::filesystem::path root = env ? env : std::filesystem::temp_directory_path() / "fgss_tests";
  const auto p = root / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testutil
