#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sbs/rng.hpp"
#include "sbs/tensor.hpp"

namespace sbs {

struct Dataset {
  Tensor x;                // [n, d]
  std::vector<int> y;     // labels in [0, classes)
  std::size_t classes = 0;

  std::size_t size() const { return x.rows(); }

  void validate() const {
    if (x.rank() != 2 || x.rows() != y.size() || classes == 0) {
      throw std::invalid_argument("Dataset: inconsistent shapes");
    }
    for (int label : y) {
      if (label < 0 || static_cast<std::size_t>(label) >= classes) {
        throw std::invalid_argument("Dataset: label out of range");
      }
    }
  }
};

// Gaussian class blobs with nonnegative-leaning centers, so the unsigned
// activation quantizer at the input loses almost nothing to clipping.
inline Dataset make_blobs(std::size_t n, std::size_t d, std::size_t classes,
                          Rng& rng, double spread = 0.2) {
  if (n == 0 || d == 0 || classes == 0) {
    throw std::invalid_argument("make_blobs: n, d, classes must be positive");
  }
  if (spread <= 0.0) throw std::invalid_argument("make_blobs: spread must be positive");
  std::vector<std::vector<double>> centers(classes, std::vector<double>(d));
  for (auto& c : centers) {
    for (double& v : c) v = 0.3 + 1.5 * rng.uniform();  // in [0.3, 1.8)
  }
  Dataset out;
  out.classes = classes;
  out.x = Tensor::zeros({n, d});
  out.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = rng.integer(classes);
    out.y[i] = static_cast<int>(k);
    for (std::size_t j = 0; j < d; ++j) {
      out.x.at(i, j) = centers[k][j] + spread * rng.normal();
    }
  }
  return out;
}

// Linear responses y = w* . x + noise with x ~ N(0, I) and w* ~ U[0,1]^d.
struct RegressionTask {
  Tensor x;        // [n, d]
  Tensor y;        // [n, 1]
  Tensor w_star;   // [1, d]
  double noise_std = 1.0;

  std::size_t size() const { return x.rows(); }
};

inline RegressionTask make_regression(std::size_t n, std::size_t d, double noise_std,
                                      Rng& rng) {
  if (n == 0 || d == 0) {
    throw std::invalid_argument("make_regression: n and d must be positive");
  }
  if (noise_std < 0.0) {
    throw std::invalid_argument("make_regression: negative noise std");
  }
  RegressionTask task;
  task.noise_std = noise_std;
  task.w_star = Tensor::zeros({1, d});
  for (std::size_t j = 0; j < d; ++j) task.w_star.at(0, j) = rng.uniform();
  task.x = Tensor::zeros({n, d});
  task.y = Tensor::zeros({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double v = rng.normal();
      task.x.at(i, j) = v;
      dot += task.w_star.at(0, j) * v;
    }
    task.y.at(i, 0) = dot + noise_std * rng.normal();
  }
  return task;
}

// Deterministic minibatch order: a fresh Fisher-Yates pass per epoch from a
// forked stream, so batching never perturbs other consumers of the seed.
class BatchPlan {
 public:
  BatchPlan(std::size_t n, std::size_t batch_size) : n_(n), batch_(batch_size) {
    if (n == 0 || batch_size == 0) {
      throw std::invalid_argument("BatchPlan: n and batch size must be positive");
    }
    order_.resize(n);
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
  }

  void reshuffle(Rng& rng) { rng.shuffle(order_); }

  std::size_t batches() const { return (n_ + batch_ - 1) / batch_; }

  std::vector<std::size_t> batch(std::size_t b) const {
    if (b >= batches()) throw std::invalid_argument("BatchPlan: batch out of range");
    const std::size_t lo = b * batch_;
    const std::size_t hi = std::min(lo + batch_, n_);
    return std::vector<std::size_t>(order_.begin() + static_cast<std::ptrdiff_t>(lo),
                                    order_.begin() + static_cast<std::ptrdiff_t>(hi));
  }

 private:
  std::size_t n_, batch_;
  std::vector<std::size_t> order_;
};

inline Tensor take_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  if (x.rank() != 2) throw std::invalid_argument("take_rows: rank-2 tensor required");
  Tensor out = Tensor::zeros({rows.size(), x.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) out.at(i, j) = x.at(rows[i], j);
  }
  return out;
}

inline std::vector<int> take_labels(const std::vector<int>& y,
                                    const std::vector<std::size_t>& rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) out.push_back(y.at(r));
  return out;
}

// Binary dataset file: magic "SBSD", then u32 n, d, classes, then n*d
// little-endian f64 features, then n u32 labels.
inline Dataset load_grid_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_grid_dataset: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "SBSD") {
    throw std::runtime_error("load_grid_dataset: bad magic in " + path);
  }
  auto read_u32 = [&in, &path]() {
    std::uint8_t raw[4];
    in.read(reinterpret_cast<char*>(raw), 4);
    if (!in) throw std::runtime_error("load_grid_dataset: truncated " + path);
    return static_cast<std::uint32_t>(raw[0]) | (static_cast<std::uint32_t>(raw[1]) << 8) |
           (static_cast<std::uint32_t>(raw[2]) << 16) |
           (static_cast<std::uint32_t>(raw[3]) << 24);
  };
  const std::uint32_t n = read_u32(), d = read_u32(), classes = read_u32();
  if (n == 0 || d == 0 || classes == 0) {
    throw std::runtime_error("load_grid_dataset: empty dataset in " + path);
  }
  Dataset out;
  out.classes = classes;
  out.x = Tensor::zeros({n, d});
  in.read(reinterpret_cast<char*>(out.x.data().data()),
          static_cast<std::streamsize>(sizeof(double) * n * d));
  if (!in) throw std::runtime_error("load_grid_dataset: truncated features in " + path);
  out.y.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) out.y[i] = static_cast<int>(read_u32());
  out.validate();
  return out;
}

inline void save_grid_dataset(const std::string& path, const Dataset& data) {
  data.validate();
  std::ofstream outf(path, std::ios::binary);
  if (!outf) throw std::runtime_error("save_grid_dataset: cannot open " + path);
  outf.write("SBSD", 4);
  auto write_u32 = [&outf](std::uint32_t v) {
    std::uint8_t raw[4] = {static_cast<std::uint8_t>(v & 0xff),
                           static_cast<std::uint8_t>((v >> 8) & 0xff),
                           static_cast<std::uint8_t>((v >> 16) & 0xff),
                           static_cast<std::uint8_t>((v >> 24) & 0xff)};
    outf.write(reinterpret_cast<char*>(raw), 4);
  };
  write_u32(static_cast<std::uint32_t>(data.x.rows()));
  write_u32(static_cast<std::uint32_t>(data.x.cols()));
  write_u32(static_cast<std::uint32_t>(data.classes));
  outf.write(reinterpret_cast<const char*>(data.x.data().data()),
             static_cast<std::streamsize>(sizeof(double) * data.x.size()));
  for (int label : data.y) write_u32(static_cast<std::uint32_t>(label));
  if (!outf) throw std::runtime_error("save_grid_dataset: write failed for " + path);
}

}  // namespace sbs
