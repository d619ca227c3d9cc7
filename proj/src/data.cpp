// Copyright (c) 2026 the dynreg authors
// SPDX-License-Identifier: Apache-2.0
#include "dynreg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "dynreg/error.hpp"
#include "dynreg/rng.hpp"

namespace dynreg {

Shape Dataset::input_shape() const {
  if (examples.empty()) throw std::invalid_argument("dataset: empty");
  return examples.front().input.shape();
}

Dataset gen_synthetic(SyntheticKind kind, int per_class, int classes, double noise,
                      std::uint64_t seed, Split split) {
  if (per_class < 1) throw ConfigError("gen_synthetic: per_class must be >= 1");
  if (classes < 2) throw ConfigError("gen_synthetic: classes must be >= 2");
  if (noise < 0.0) throw ConfigError("gen_synthetic: noise must be >= 0");

  Rng rng(mix_seed(seed, split == Split::train ? 0xD5EED0 : 0xD5EED1));
  Dataset ds;
  ds.num_classes = classes;
  ds.split = split;
  ds.examples.reserve(static_cast<size_t>(per_class) * static_cast<size_t>(classes));

  const double tau = 6.283185307179586476925287;
  for (int c = 0; c < classes; ++c) {
    for (int i = 0; i < per_class; ++i) {
      double x = 0.0, y = 0.0;
      if (kind == SyntheticKind::gaussians) {
        const double ang = tau * static_cast<double>(c) / static_cast<double>(classes);
        x = 2.0 * std::cos(ang) + noise * rng.normal();
        y = 2.0 * std::sin(ang) + noise * rng.normal();
      } else {  // spirals: interleaved arms growing outward from the origin
        const double u = (static_cast<double>(i) + 0.5) / static_cast<double>(per_class);
        const double r = 0.2 + 1.8 * u;
        const double ang = tau * (1.25 * u + static_cast<double>(c) / classes);
        x = r * std::cos(ang) + noise * rng.normal();
        y = r * std::sin(ang) + noise * rng.normal();
      }
      Example ex;
      ex.input = Tensor::from({2, 1, 1}, {x, y});
      ex.label = c;
      ds.examples.push_back(std::move(ex));
    }
  }
  return ds;
}

namespace {

std::uint32_t read_be_u32(std::ifstream& f, const std::string& path, std::size_t offset) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (f.gcount() != 4)
    throw IoError("idx: '" + path + "' truncated at byte offset " + std::to_string(offset));
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw IoError("idx: cannot open images file '" + images_path + "'");
  std::size_t off = 0;
  const std::uint32_t img_magic = read_be_u32(img, images_path, off);
  if (img_magic != 0x00000803u)
    throw IoError("idx: '" + images_path + "' has bad magic 0x" +
                  [&] { char b[16]; std::snprintf(b, sizeof b, "%08x", img_magic); return std::string(b); }() +
                  " at byte offset 0 (expected 0x00000803)");
  off = 4;
  const std::uint32_t count = read_be_u32(img, images_path, off);
  off = 8;
  const std::uint32_t rows = read_be_u32(img, images_path, off);
  off = 12;
  const std::uint32_t cols = read_be_u32(img, images_path, off);
  off = 16;
  if (rows == 0 || cols == 0 || count == 0)
    throw IoError("idx: '" + images_path + "' declares an empty geometry at byte offset 4");

  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw IoError("idx: cannot open labels file '" + labels_path + "'");
  const std::uint32_t lab_magic = read_be_u32(lab, labels_path, 0);
  if (lab_magic != 0x00000801u)
    throw IoError("idx: '" + labels_path + "' has bad magic at byte offset 0 (expected 0x00000801)");
  const std::uint32_t lab_count = read_be_u32(lab, labels_path, 4);
  if (lab_count != count)
    throw IoError("idx: label count " + std::to_string(lab_count) + " (byte offset 4 of '" +
                  labels_path + "') does not match image count " + std::to_string(count));

  Dataset ds;
  ds.num_classes = 0;
  const std::size_t pixels = static_cast<std::size_t>(rows) * cols;
  std::vector<unsigned char> buf(pixels);
  ds.examples.reserve(count);
  for (std::uint32_t n = 0; n < count; ++n) {
    img.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(pixels));
    if (static_cast<std::size_t>(img.gcount()) != pixels)
      throw IoError("idx: '" + images_path + "' truncated at byte offset " +
                    std::to_string(off + static_cast<std::size_t>(img.gcount())));
    Eigen::ArrayXd data(static_cast<Eigen::Index>(pixels));
    for (std::size_t i = 0; i < pixels; ++i)
      data[static_cast<Eigen::Index>(i)] = static_cast<double>(buf[i]) / 255.0;
    Example ex;
    ex.input = Tensor({1, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)},
                      std::move(data));
    off += pixels;

    unsigned char y;
    lab.read(reinterpret_cast<char*>(&y), 1);
    if (lab.gcount() != 1)
      throw IoError("idx: '" + labels_path + "' truncated at byte offset " +
                    std::to_string(8 + n));
    ex.label = static_cast<int>(y);
    ds.num_classes = std::max(ds.num_classes, ex.label + 1);
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

NormStats compute_norm_stats(const Dataset& ds) {
  const Shape shape = ds.input_shape();
  const Eigen::Index C = shape[0], slab = shape[1] * shape[2];
  NormStats st;
  st.mean = Eigen::ArrayXd::Zero(C);
  st.stdev = Eigen::ArrayXd::Zero(C);
  const double m = static_cast<double>(ds.size()) * static_cast<double>(slab);
  for (const Example& ex : ds.examples)
    for (Eigen::Index c = 0; c < C; ++c)
      st.mean[c] += ex.input.array().segment(c * slab, slab).sum();
  st.mean /= m;
  for (const Example& ex : ds.examples)
    for (Eigen::Index c = 0; c < C; ++c)
      st.stdev[c] += (ex.input.array().segment(c * slab, slab) - st.mean[c]).square().sum();
  st.stdev = (st.stdev / m).sqrt().max(1e-12);
  return st;
}

void normalize(Dataset& ds, const NormStats& stats) {
  const Shape shape = ds.input_shape();
  const Eigen::Index C = shape[0], slab = shape[1] * shape[2];
  if (stats.mean.size() != C || stats.stdev.size() != C)
    throw std::invalid_argument("normalize: stats have " + std::to_string(stats.mean.size()) +
                                " channels, dataset has " + std::to_string(C));
  for (Example& ex : ds.examples)
    for (Eigen::Index c = 0; c < C; ++c) {
      auto seg = ex.input.array().segment(c * slab, slab);
      seg = (seg - stats.mean[c]) / stats.stdev[c];
    }
}

Tensor denormalize(const Tensor& input, const NormStats& stats) {
  if (input.rank() != 3)
    throw std::invalid_argument("denormalize: expected a [C, H, W] tensor, got " +
                                shape_str(input.shape()));
  const Eigen::Index C = input.dim(0), slab = input.dim(1) * input.dim(2);
  Tensor out = input;
  for (Eigen::Index c = 0; c < C; ++c) {
    auto seg = out.array().segment(c * slab, slab);
    seg = seg * stats.stdev[c] + stats.mean[c];
  }
  return out;
}

void export_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("export_csv: cannot open '" + path + "'");
  const Eigen::Index numel = ds.examples.empty() ? 0 : ds.examples.front().input.numel();
  out << "label";
  for (Eigen::Index i = 0; i < numel; ++i) out << ",x" << i;
  out << "\n";
  out.precision(12);
  for (const Example& ex : ds.examples) {
    out << ex.label;
    for (Eigen::Index i = 0; i < numel; ++i) out << "," << ex.input[i];
    out << "\n";
  }
  if (!out) throw IoError("export_csv: write failed for '" + path + "'");
}

BatchIterator::BatchIterator(const Dataset& ds, int batch_size, std::uint64_t seed,
                             bool shuffle)
    : ds_(&ds), batch_size_(batch_size), seed_(seed), shuffle_(shuffle) {
  if (batch_size < 1) throw ConfigError("batch iterator: batch_size must be >= 1");
  if (ds.size() == 0) throw ConfigError("batch iterator: empty dataset");
  order_.resize(ds.size());
  std::iota(order_.begin(), order_.end(), 0);
}

void BatchIterator::start_epoch(long epoch) {
  std::iota(order_.begin(), order_.end(), 0);
  if (shuffle_) {
    Rng rng(mix_seed(seed_, 0xE90C4 + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order_.begin(), order_.end(), rng.engine());
  }
  cursor_ = 0;
}

std::optional<BatchIterator::Batch> BatchIterator::next() {
  if (cursor_ >= order_.size()) return std::nullopt;
  const size_t end = std::min(cursor_ + static_cast<size_t>(batch_size_), order_.size());
  Batch b;
  b.indices.assign(order_.begin() + static_cast<long>(cursor_),
                   order_.begin() + static_cast<long>(end));
  b.labels.reserve(b.indices.size());
  for (int idx : b.indices) b.labels.push_back(ds_->examples[static_cast<size_t>(idx)].label);
  b.input = gather_batch(*ds_, b.indices);
  cursor_ = end;
  return b;
}

long BatchIterator::batches_per_epoch() const {
  return static_cast<long>((ds_->size() + static_cast<size_t>(batch_size_) - 1) /
                           static_cast<size_t>(batch_size_));
}

Tensor gather_batch(const Dataset& ds, const std::vector<int>& indices) {
  if (indices.empty()) throw std::invalid_argument("gather_batch: no indices");
  const Shape in = ds.input_shape();
  const Eigen::Index slab = shape_numel(in);
  Tensor out({static_cast<Eigen::Index>(indices.size()), in[0], in[1], in[2]});
  for (size_t i = 0; i < indices.size(); ++i) {
    const Example& ex = ds.examples[static_cast<size_t>(indices[i])];
    out.array().segment(static_cast<Eigen::Index>(i) * slab, slab) = ex.input.array();
  }
  return out;
}

}  // namespace dynreg
