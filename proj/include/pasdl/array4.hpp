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

#ifndef PASDL_ARRAY4_HPP
#define PASDL_ARRAY4_HPP

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pasdl/common.hpp"

namespace pasdl::diff {

/// (batch, channels, height, width). Height indexes transducer elements,
/// width indexes time samples throughout the network code.
struct Shape4 {
  int b = 0, c = 0, h = 0, w = 0;

  std::int64_t numel() const {
    return static_cast<std::int64_t>(b) * c * h * w;
  }
  bool operator==(const Shape4&) const = default;
  std::string str() const {
    return "(" + std::to_string(b) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

/// Dense row-major 4D tensor of 64-bit floats.
class Array4 {
 public:
  Array4() = default;
  explicit Array4(Shape4 s, double fill = 0.0)
      : shape_(s), data_(static_cast<size_t>(s.numel()), fill) {
    if (s.b < 0 || s.c < 0 || s.h < 0 || s.w < 0)
      throw ConfigError("Array4: negative shape " + s.str());
  }

  static Array4 from(Shape4 s, std::vector<double> data) {
    Array4 a;
    if (static_cast<std::int64_t>(data.size()) != s.numel())
      throw ConfigError("Array4::from: data length " + std::to_string(data.size()) +
                        " does not match shape " + s.str());
    a.shape_ = s;
    a.data_ = std::move(data);
    return a;
  }

  const Shape4& shape() const { return shape_; }
  std::int64_t numel() const { return shape_.numel(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& at(int b, int c, int h, int w) {
    return data_[((static_cast<size_t>(b) * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }
  const double& at(int b, int c, int h, int w) const {
    return data_[((static_cast<size_t>(b) * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }
  double& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double sum() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
  }

  double max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::fabs(v));
    return m;
  }

 private:
  Shape4 shape_;
  std::vector<double> data_;
};

}  // namespace pasdl::diff

#endif  // PASDL_ARRAY4_HPP
