// Shared helpers for the unit suites.
#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>

#include "lipdistill/random.hpp"
#include "lipdistill/tensor.hpp"

namespace testutil {

inline lipdistill::Tensor random_tensor(lipdistill::Shape shape, lipdistill::Rng& rng,
                                        double lo = -1.0, double hi = 1.0) {
  lipdistill::Tensor t(std::move(shape));
  for (double& v : t.data()) v = lipdistill::uniform(rng, lo, hi);
  return t;
}

/// Fresh scratch directory under $LIPDISTILL_TMP (or the system temp dir).
inline std::filesystem::path scratch(const std::string& name) {
  const char* root = std::getenv("LIPDISTILL_TMP");
  std::filesystem::path dir =
      (root ? std::filesystem::path(root) : std::filesystem::temp_directory_path() / "lipdistill") / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
