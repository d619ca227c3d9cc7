// Copyright (c) 2026 the dynreg authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dynreg/tensor.hpp"

namespace dynreg {

enum class Split { train, test };

struct Example {
  Tensor input;  // [C, H, W]
  int label = 0;
};

struct Dataset {
  std::vector<Example> examples;
  int num_classes = 0;
  Split split = Split::train;

  size_t size() const { return examples.size(); }
  Shape input_shape() const;  // shape shared by every example
};

enum class SyntheticKind { gaussians, spirals };

// Deterministic synthetic 2-d point clouds, stored as [2, 1, 1] inputs.
// gaussians: class means equally spaced on a circle, isotropic noise.
// spirals: interleaved arms, noise jitters the points off the arm.
// Exactly per_class examples per class; train and test splits draw from
// disjoint streams of the same seed.
Dataset gen_synthetic(SyntheticKind kind, int per_class, int classes, double noise,
                      std::uint64_t seed, Split split = Split::train);

// IDX image/label pair loader. Magic numbers are big-endian 0x00000803
// (images, 3 trailing dims) and 0x00000801 (labels). Pixels are scaled to
// [0, 1]. Malformed files are rejected with the failing byte offset.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

struct NormStats {
  Eigen::ArrayXd mean;   // per channel
  Eigen::ArrayXd stdev;  // per channel, floored away from zero
};

// Per-channel statistics over a dataset (population standard deviation).
NormStats compute_norm_stats(const Dataset& ds);

// In-place x -> (x - mean) / stdev per channel.
void normalize(Dataset& ds, const NormStats& stats);

// Inverse of the per-channel normalization, for round-trip checks.
Tensor denormalize(const Tensor& input, const NormStats& stats);

// Flat CSV export with header "label,x0,x1,...".
void export_csv(const Dataset& ds, const std::string& path);

// Deterministic epoch iteration: the visit order is a pure function of
// (seed, epoch). Every example appears exactly once per epoch; the final
// batch may be short when the dataset size is not a batch multiple.
class BatchIterator {
 public:
  struct Batch {
    Tensor input;             // [n, C, H, W] with n <= batch_size
    std::vector<int> labels;
    std::vector<int> indices; // dataset positions, for coverage checks
  };

  BatchIterator(const Dataset& ds, int batch_size, std::uint64_t seed, bool shuffle);

  void start_epoch(long epoch);
  std::optional<Batch> next();

  long batches_per_epoch() const;  // ceil(n / batch_size)
  int batch_size() const { return batch_size_; }

 private:
  const Dataset* ds_;
  int batch_size_;
  std::uint64_t seed_;
  bool shuffle_;
  std::vector<int> order_;
  size_t cursor_ = 0;
};

// Gather dataset examples into one [n, C, H, W] batch tensor.
Tensor gather_batch(const Dataset& ds, const std::vector<int>& indices);

}  // namespace dynreg
