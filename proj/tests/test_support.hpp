// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "idpo/data.hpp"
#include "idpo/tensor.hpp"
#include "idpo/transformer.hpp"

namespace idpo::testing {

inline ModelConfig tiny_config(int n_layers = 2) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 24;
  c.max_seq_len = 32;
  return c;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double sd = 1.0, bool requires_grad = false) {
  std::normal_distribution<double> normal(0.0, sd);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = normal(rng);
  return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<double> to_vector(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& tag) {
  const auto dir = std::filesystem::temp_directory_path() / ("idpo_test_" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline TokenBatch random_batch(std::size_t batch, std::size_t seq_len, int vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> tok(0, vocab - 1);
  std::vector<std::vector<int>> rows(batch, std::vector<int>(seq_len));
  for (auto& r : rows)
    for (int& t : r) t = tok(rng);
  return TokenBatch::from_rows(rows, 0);
}

}  // namespace idpo::testing
