#pragma once

#include <Eigen/Core>

#include "nucleus/tensor.hpp"

namespace nucleus {

/// 2-D grid of 32-bit values, row-major so raw buffers match the [row][col]
/// file layout. Row 0 is the top of the domain; the heater sits on the last
/// row.
using Field = Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Tensor field_to_tensor(const Field& f) {
  return Tensor({static_cast<int>(f.rows()), static_cast<int>(f.cols())},
                std::vector<float>(f.data(), f.data() + f.size()));
}

inline Field tensor_to_field(const Tensor& t) {
  Field f(t.dim(0), t.dim(1));
  std::copy(t.values().begin(), t.values().end(), f.data());
  return f;
}

}  // namespace nucleus
