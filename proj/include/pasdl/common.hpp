// Copyright 2026 The pasdl Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef PASDL_COMMON_HPP
#define PASDL_COMMON_HPP

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace pasdl {

/// Bad shapes, bad flags, bad file contents. Mapped to exit code 2 by the CLI.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Solver divergence, NaN losses, empty reference windows. Exit code 3.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Dense row-major 2D double grid. Shared by the optics/acoustics/beamform
/// pipeline; the autodiff engine has its own 4D container.
class Grid2 {
 public:
  Grid2() = default;
  Grid2(int rows, int cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows) * cols, fill) {
    if (rows < 0 || cols < 0) throw ConfigError("Grid2: negative dims");
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::int64_t numel() const { return static_cast<std::int64_t>(rows_) * cols_; }

  double& at(int r, int c) { return data_[static_cast<size_t>(r) * cols_ + c]; }
  const double& at(int r, int c) const { return data_[static_cast<size_t>(r) * cols_ + c]; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  const std::vector<double>& vec() const { return data_; }
  std::vector<double>& vec() { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

 private:
  int rows_ = 0, cols_ = 0;
  std::vector<double> data_;
};

/// SplitMix64 step; used to derive independent per-sample / per-parameter
/// seeds from one global seed without correlated streams.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Worker cap for the dataset builder. SDL_THREADS overrides; defaults to
/// hardware concurrency.
int worker_count();

}  // namespace pasdl

#endif  // PASDL_COMMON_HPP
