// Copyright (c) 2026 the dynreg authors
// SPDX-License-Identifier: Apache-2.0
#include "dynreg/tensor.hpp"

#include <sstream>
#include <stdexcept>

namespace dynreg {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

Eigen::Index shape_numel(const Shape& s) {
  Eigen::Index n = 1;
  for (Eigen::Index d : s) n *= d;
  return n;
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw std::invalid_argument("tensor: empty shape");
  for (Eigen::Index d : shape) {
    if (d <= 0)
      throw std::invalid_argument("tensor: non-positive dimension in " + shape_str(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_ = Eigen::ArrayXd::Zero(shape_numel(shape_));
}

Tensor::Tensor(Shape shape, Eigen::ArrayXd data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (shape_numel(shape_) != data_.size())
    throw std::invalid_argument("tensor: shape " + shape_str(shape_) + " expects " +
                                std::to_string(shape_numel(shape_)) + " values, got " +
                                std::to_string(data_.size()));
}

Tensor Tensor::full(Shape shape, Scalar value) {
  Tensor t(std::move(shape));
  t.data_.setConstant(value);
  return t;
}

Tensor Tensor::from(Shape shape, std::initializer_list<Scalar> values) {
  Eigen::ArrayXd data(static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (Scalar v : values) data[i++] = v;
  return Tensor(std::move(shape), std::move(data));
}

Scalar Tensor::item() const {
  if (numel() != 1)
    throw std::invalid_argument("tensor: item() on non-scalar shape " + shape_str(shape_));
  return data_[0];
}

}  // namespace dynreg
