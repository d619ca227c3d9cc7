// Copyright (c) 2026 the dynreg authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the unit test suites.

#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "dynreg/nets.hpp"
#include "dynreg/rng.hpp"
#include "dynreg/tensor.hpp"

namespace testsup {

inline dynreg::Tensor random_tensor(dynreg::Shape shape, dynreg::Rng& rng, double scale = 1.0) {
  dynreg::Tensor t(std::move(shape));
  for (Eigen::Index i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
  return t;
}

inline dynreg::NetSpec tiny_spec(dynreg::Topology topo, dynreg::RegMode reg,
                                 std::uint64_t seed = 7) {
  dynreg::NetSpec spec;
  spec.topology = topo;
  spec.depth = 3;
  spec.base_channels = 3;
  spec.widen = 3;
  spec.growth = 2;
  spec.num_classes = 3;
  spec.input_shape = {2, 4, 4};
  spec.batch_size = 4;
  spec.reg_mode = reg;
  spec.amplitude = 0.5;
  spec.seed = seed;
  return spec;
}

// Scoped temporary directory, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("dynreg_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  os << text;
}

inline std::string read_text(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace testsup
