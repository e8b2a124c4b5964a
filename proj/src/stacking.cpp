#include "stackdiff/stacking.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

#include <nlohmann/json.hpp>

#include "stackdiff/error.hpp"

namespace stackdiff {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

LatentStack tile(const std::vector<LatentGrid>& latents) {
  if (latents.empty()) throw ShapeError("tile needs at least one latent");
  const auto& first = latents.front();
  for (const auto& l : latents)
    if (!l.same_shape(first)) throw ShapeError("tile: latents differ in shape");
  const int n = static_cast<int>(latents.size());
  LatentStack out(first.channels, first.height, first.width, n);
  const std::size_t plane = static_cast<std::size_t>(first.height) * first.width;
  for (int c = 0; c < first.channels; ++c)
    for (int i = 0; i < n; ++i)
      std::copy_n(latents[static_cast<std::size_t>(i)].values.data() + c * plane, plane,
                  out.values.data() + (static_cast<std::size_t>(c) * n + i) * plane);
  return out;
}

std::vector<LatentGrid> untile(const LatentStack& stack, int n_steps) {
  if (n_steps < 1 || stack.height % n_steps != 0)
    throw ShapeError("untile: height " + std::to_string(stack.height) + " not divisible by " + std::to_string(n_steps));
  const int h = stack.height / n_steps;
  const std::size_t plane = static_cast<std::size_t>(h) * stack.width;
  std::vector<LatentGrid> out(static_cast<std::size_t>(n_steps), LatentGrid(stack.channels, h, stack.width));
  for (int c = 0; c < stack.channels; ++c)
    for (int i = 0; i < n_steps; ++i)
      std::copy_n(stack.values.data() + (static_cast<std::size_t>(c) * n_steps + i) * plane, plane,
                  out[static_cast<std::size_t>(i)].values.data() + c * plane);
  return out;
}

namespace {

constexpr char kStackMagic[4] = {'S', 'D', 'L', 'S'};
constexpr char kCondMagic[4] = {'S', 'D', 'C', 'S'};
constexpr std::uint32_t kFormatVersion = 1;
constexpr std::uint32_t kDtypeF64 = 1;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void doubles(double* out, std::size_t n) {
    need(n * sizeof(double));
    std::memcpy(out, bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }
  void magic(const char (&m)[4]) {
    need(4);
    if (std::memcmp(bytes_.data() + pos_, m, 4) != 0) throw ParseError("bad magic bytes");
    pos_ += 4;
  }
  void finish() const {
    if (pos_ != bytes_.size()) throw ParseError("trailing bytes after payload");
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw ParseError("truncated binary payload");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_latent_stack(const LatentStack& s) {
  std::string out(kStackMagic, 4);
  put<std::uint32_t>(out, kFormatVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.channels));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.step_height()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.width));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.n_steps));
  put<std::uint32_t>(out, kDtypeF64);
  out.append(reinterpret_cast<const char*>(s.values.data()), s.values.size() * sizeof(double));
  return out;
}

LatentStack deserialize_latent_stack(std::string_view bytes) {
  Reader r(bytes);
  r.magic(kStackMagic);
  if (r.get<std::uint32_t>() != kFormatVersion) throw ParseError("unsupported latent stack version");
  const auto c = r.get<std::uint32_t>(), h = r.get<std::uint32_t>(), w = r.get<std::uint32_t>(), n = r.get<std::uint32_t>();
  if (r.get<std::uint32_t>() != kDtypeF64) throw ParseError("unsupported latent dtype");
  if (c == 0 || h == 0 || w == 0 || n == 0 || static_cast<std::uint64_t>(c) * h * w * n > (1ull << 28))
    throw ParseError("implausible latent stack header");
  LatentStack s(static_cast<int>(c), static_cast<int>(h), static_cast<int>(w), static_cast<int>(n));
  r.doubles(s.values.data(), s.values.size());
  r.finish();
  return s;
}

// ---------------------------------------------------------------------------

void CodecConfig::validate() const {
  if (spatial_reduction < 1) throw ConfigError("codec spatial_reduction must be positive");
  if (kind == CodecKind::PooledPatch && (pool < 1 || spatial_reduction % pool != 0))
    throw ConfigError("codec pool must divide spatial_reduction");
}

void to_json(nlohmann::json& j, const CodecConfig& c) {
  j = {{"kind", c.kind == CodecKind::Patch ? "patch" : "pooled_patch"}, {"spatial_reduction", c.spatial_reduction}};
  if (c.kind == CodecKind::PooledPatch) j["pool"] = c.pool;
}

void from_json(const nlohmann::json& j, CodecConfig& c) {
  const auto kind = j.value("kind", std::string("pooled_patch"));
  if (kind == "patch") {
    c.kind = CodecKind::Patch;
  } else if (kind == "pooled_patch") {
    c.kind = CodecKind::PooledPatch;
  } else {
    throw ConfigError("unknown codec kind '" + kind + "'");
  }
  c.spatial_reduction = j.value("spatial_reduction", 8);
  c.pool = j.value("pool", 4);
  c.validate();
}

PatchCodec::PatchCodec(CodecConfig config) : config_(config) { config_.validate(); }

LatentGrid PatchCodec::encode(const Image& image) const {
  const int r = config_.spatial_reduction;
  if (image.empty() || image.width % r != 0 || image.height % r != 0)
    throw ShapeError("image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                     " not divisible by spatial reduction " + std::to_string(r));
  const int pool = config_.kind == CodecKind::Patch ? 1 : config_.pool;
  const int p = config_.patch();
  const int hl = image.height / r, wl = image.width / r;
  LatentGrid out(config_.latent_channels(), hl, wl);
  const double inv = 1.0 / (pool * pool);
  for (int y = 0; y < hl; ++y)
    for (int x = 0; x < wl; ++x)
      for (int dy = 0; dy < p; ++dy)
        for (int dx = 0; dx < p; ++dx)
          for (int c = 0; c < 3; ++c) {
            const int px = (x * p + dx) * pool, py = (y * p + dy) * pool;
            double sum = 0.0;
            for (int j = 0; j < pool; ++j)
              for (int i = 0; i < pool; ++i) sum += image.at(px + i, py + j, c);
            out.at((dy * p + dx) * 3 + c, y, x) = sum * inv / 127.5 - 1.0;
          }
  return out;
}

Image PatchCodec::decode(const LatentGrid& latent) const {
  if (latent.channels != config_.latent_channels())
    throw ShapeError("latent has " + std::to_string(latent.channels) + " channels, codec expects " +
                     std::to_string(config_.latent_channels()));
  const int pool = config_.kind == CodecKind::Patch ? 1 : config_.pool;
  const int p = config_.patch();
  const int r = config_.spatial_reduction;
  Image img(latent.width * r, latent.height * r);
  for (int y = 0; y < latent.height; ++y)
    for (int x = 0; x < latent.width; ++x)
      for (int dy = 0; dy < p; ++dy)
        for (int dx = 0; dx < p; ++dx)
          for (int c = 0; c < 3; ++c) {
            const double v = std::round((latent.at((dy * p + dx) * 3 + c, y, x) + 1.0) * 127.5);
            const auto byte = static_cast<std::uint8_t>(std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 255.0));
            const int px = (x * p + dx) * pool, py = (y * p + dy) * pool;
            for (int j = 0; j < pool; ++j)
              for (int i = 0; i < pool; ++i) img.at(px + i, py + j, c) = byte;
          }
  return img;
}

// ---------------------------------------------------------------------------

Vector step_positional_code(int index, int dim, double gain) {
  if (index < 0) throw ConfigError("step index must be nonnegative");
  if (dim < 2 || dim % 2 != 0) throw ConfigError("positional code dimension must be even and >= 2");
  Vector v(dim);
  for (int k = 0; k < dim / 2; ++k) {
    const double w = std::pow(10000.0, -2.0 * k / dim);
    v[2 * k] = gain * std::sin(index * w);
    v[2 * k + 1] = gain * std::cos(index * w);
  }
  return v;
}

ConditioningSequence build_conditioning(const embed::TokenEmbeddingSequence& goal,
                                        const std::vector<embed::TokenEmbeddingSequence>& steps,
                                        const ConditioningOptions& options) {
  const int d = goal.dim();
  int total = goal.length();
  for (const auto& s : steps) {
    if (s.dim() != d) throw ShapeError("step token dimension differs from goal token dimension");
    total += s.length();
  }
  if (goal.length() < 1) throw ShapeError("goal token sequence is empty");
  ConditioningSequence out;
  out.vectors.resize(total, d);
  out.segments.reserve(static_cast<std::size_t>(total));
  out.n_steps = static_cast<int>(steps.size());
  int row = 0;
  auto append = [&](const embed::TokenEmbeddingSequence& seq, int segment) {
    const Vector phi = options.positional ? step_positional_code(segment, d, options.gain) : Vector::Zero(d);
    for (int t = 0; t < seq.length(); ++t) {
      out.vectors.row(row++) = seq.vectors.row(t) + phi.transpose();
      out.segments.push_back(segment);
    }
  };
  append(goal, 0);
  for (std::size_t i = 0; i < steps.size(); ++i) append(steps[i], static_cast<int>(i + 1));
  return out;
}

ConditioningSequence condition_texts(const embed::TextEncoder& encoder, const std::string& goal,
                                     const std::vector<std::string>& steps, const ConditioningOptions& options) {
  std::vector<embed::TokenEmbeddingSequence> encoded;
  encoded.reserve(steps.size());
  for (const auto& s : steps) encoded.push_back(encoder.encode(s));
  return build_conditioning(encoder.encode(goal), encoded, options);
}

ConditioningSequence null_conditioning(const embed::TextEncoder& encoder, const ConditioningOptions& options) {
  return build_conditioning(encoder.encode(""), {}, options);
}

const ConditioningSequence& drop_conditioning(const ConditioningSequence& cond, const ConditioningSequence& null_cond,
                                              double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("dropout probability must be in [0, 1]");
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  return u < p ? null_cond : cond;
}

std::string serialize_conditioning(const ConditioningSequence& c) {
  std::string out(kCondMagic, 4);
  put<std::uint32_t>(out, kFormatVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.length()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.dim()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.n_steps));
  for (int s : c.segments) put<std::int32_t>(out, s);
  out.append(reinterpret_cast<const char*>(c.vectors.data()), static_cast<std::size_t>(c.vectors.size()) * sizeof(double));
  return out;
}

ConditioningSequence deserialize_conditioning(std::string_view bytes) {
  Reader r(bytes);
  r.magic(kCondMagic);
  if (r.get<std::uint32_t>() != kFormatVersion) throw ParseError("unsupported conditioning version");
  const auto len = r.get<std::uint32_t>(), dim = r.get<std::uint32_t>(), n = r.get<std::uint32_t>();
  if (len == 0 || dim == 0 || static_cast<std::uint64_t>(len) * dim > (1ull << 26)) throw ParseError("implausible conditioning header");
  ConditioningSequence c;
  c.n_steps = static_cast<int>(n);
  c.segments.resize(len);
  for (auto& s : c.segments) {
    s = r.get<std::int32_t>();
    if (s < 0 || s > static_cast<int>(n)) throw ParseError("segment id out of range");
  }
  c.vectors.resize(len, dim);
  r.doubles(c.vectors.data(), static_cast<std::size_t>(c.vectors.size()));
  r.finish();
  return c;
}

}  // namespace stackdiff
