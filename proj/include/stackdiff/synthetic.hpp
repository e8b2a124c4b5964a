#pragma once

// Desk-scale stand-in for an instructional corpus. Every image is a known
// function of its article's goal (a colored shape) and its step (how much of
// the shape is filled), which gives the faithfulness and consistency metrics
// exact ground truth.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "stackdiff/corpus.hpp"

namespace stackdiff::synthetic {

struct PaletteColor {
  std::string name;
  std::array<std::uint8_t, 3> rgb;
};

struct FillLevel {
  double fraction;
  std::string phrase;  // canonical step text
  std::string keyword;  // substring that identifies the level in free text
};

struct Vocabulary {
  std::vector<PaletteColor> colors;
  std::vector<std::string> shapes;
  std::vector<FillLevel> levels;

  static Vocabulary standard();
  // Restricts the standard vocabulary to the named colors/shapes (empty = all).
  static Vocabulary subset(const std::vector<std::string>& colors, const std::vector<std::string>& shapes,
                           int level_count);
};

struct Attributes {
  int color = 0;
  int shape = 0;
  int level = 0;
  bool operator==(const Attributes&) const = default;
};

struct SyntheticSpec {
  std::size_t articles = 256;
  int n_steps = 3;
  int min_steps = 0;  // 0 means every article has exactly n_steps
  int image_size = 48;
  int block = 4;  // images are constant on block x block cells
  std::vector<std::string> colors;  // empty = full palette
  std::vector<std::string> shapes;
  int levels = 4;
  std::vector<std::string> categories{"Recipes"};

  void validate() const;
  int grid() const { return image_size / block; }
};

void to_json(nlohmann::json& j, const SyntheticSpec& s);
void from_json(const nlohmann::json& j, SyntheticSpec& s);

inline constexpr std::array<std::uint8_t, 3> kBackground{32, 32, 32};

class Generator {
 public:
  explicit Generator(SyntheticSpec spec);

  const SyntheticSpec& spec() const { return spec_; }
  const Vocabulary& vocabulary() const { return vocab_; }

  std::string goal_text(int color, int shape) const;
  std::string step_text(int level) const;
  Image render(const Attributes& a) const;

  std::vector<corpus::Article> generate(std::uint64_t seed) const;

  // Nearest clean rendering over all attribute combinations (squared error).
  Attributes classify(const Image& image) const;

  // Keyword parse of free text. Unmentioned attributes are nullopt.
  std::optional<int> parse_color(const std::string& text) const;
  std::optional<int> parse_shape(const std::string& text) const;
  std::optional<int> parse_level(const std::string& text) const;

 private:
  SyntheticSpec spec_;
  Vocabulary vocab_;
  std::vector<std::vector<double>> templates_;  // per-cell mean colors for each attribute combo
  std::vector<Attributes> template_attrs_;

  std::vector<double> cell_means(const Image& image) const;
};

std::vector<corpus::Article> generate_synthetic_corpus(const SyntheticSpec& spec, std::uint64_t seed);

}  // namespace stackdiff::synthetic
