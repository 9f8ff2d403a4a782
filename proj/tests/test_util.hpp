#pragma once

#include <filesystem>
#include <string>
#include <unistd.h>

namespace testutil {

// A fresh, empty directory per name, unique to this process.
inline std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("c4d_test_" + std::to_string(::getpid())) / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
