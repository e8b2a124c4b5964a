#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include <nlohmann/json.hpp>

#include "stackdiff/denoiser.hpp"
#include "stackdiff/embedders.hpp"
#include "stackdiff/util.hpp"

namespace testing {

inline std::filesystem::path data_path(const std::string& rel) { return std::filesystem::path(STACKDIFF_TEST_DATA) / rel; }

inline nlohmann::json load_json(const std::string& rel) { return nlohmann::json::parse(stackdiff::read_file(data_path(rel))); }

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("stackdiff-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

// Text encoder with hand-set token rows: every word maps to a row from the
// table, unknown words and "" to the null row.
class TableEncoder final : public stackdiff::embed::TextEncoder {
 public:
  TableEncoder(int dim, std::map<std::string, std::vector<double>> table) : dim_(dim), table_(std::move(table)) {}

  stackdiff::embed::TokenEmbeddingSequence encode(std::string_view text) const override {
    stackdiff::embed::TokenEmbeddingSequence out;
    out.source_text = std::string(text);
    auto words = stackdiff::embed::HashTextEncoder::tokenize(text);
    if (words.empty()) words.push_back("");
    out.vectors.resize(static_cast<Eigen::Index>(words.size()), dim_);
    for (std::size_t i = 0; i < words.size(); ++i) {
      auto it = table_.find(words[i]);
      for (int k = 0; k < dim_; ++k)
        out.vectors(static_cast<Eigen::Index>(i), k) = it == table_.end() ? 0.0 : it->second[static_cast<std::size_t>(k)];
    }
    return out;
  }
  int dim() const override { return dim_; }
  int context_limit() const override { return 64; }
  std::string identity() const override { return "table"; }

 private:
  int dim_;
  std::map<std::string, std::vector<double>> table_;
};

// A denoiser small enough for finite differences: under 10^4 parameters.
inline stackdiff::DenoiserConfig tiny_denoiser_config(int in_channels = 12, int cond_dim = 8) {
  stackdiff::DenoiserConfig c;
  c.in_channels = in_channels;
  c.base_channels = 4;
  c.multipliers = {1, 2};
  c.blocks_per_scale = 1;
  c.attention_scales = {1};
  c.cond_dim = cond_dim;
  c.context_dim = 8;
  c.time_embed_dim = 8;
  c.heads = 2;
  c.groups = 2;
  c.init_seed = 3;
  return c;
}

inline std::vector<double> normal_values(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  stackdiff::Rng rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> out(n);
  for (auto& v : out) v = d(rng);
  return out;
}

// Counter-based splitmix64 stream shared with tests/oracles/frechet.py.
inline double oracle_uniform(std::uint64_t seed, std::uint64_t k) {
  return static_cast<double>(stackdiff::mix64(seed * 0x100000001B3ull + k) >> 11) * 0x1.0p-53;
}

inline std::vector<stackdiff::Vector> frechet_samples(std::uint64_t seed, int n, int d, double shift) {
  std::vector<stackdiff::Vector> out;
  for (int i = 0; i < n; ++i) {
    stackdiff::Vector v(d);
    double prev = 0.0;
    for (int j = 0; j < d; ++j) {
      const double u = oracle_uniform(seed, static_cast<std::uint64_t>(i) * d + j);
      v(j) = (u - 0.5) * (1.0 + 0.02 * j) + shift * (j % 3) + 0.5 * prev;
      prev = v(j);
    }
    out.push_back(v);
  }
  return out;
}

}  // namespace testing
