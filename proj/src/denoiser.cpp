#include "stackdiff/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <span>

#include "stackdiff/error.hpp"
#include "stackdiff/util.hpp"

namespace stackdiff {

using nlohmann::json;

void DenoiserConfig::validate() const {
  if (in_channels < 1) throw ConfigError("denoiser in_channels must be positive");
  if (base_channels < 1 || multipliers.empty()) throw ConfigError("denoiser needs a base width and at least one scale");
  for (int m : multipliers)
    if (m < 1 || (base_channels * m) % groups != 0)
      throw ConfigError("denoiser channel multipliers must be positive and yield widths divisible by groups");
  if (blocks_per_scale < 1) throw ConfigError("blocks_per_scale must be >= 1");
  if (attention_scales.empty()) throw ConfigError("attention must be present at one scale at least");
  for (int s : attention_scales)
    if (s < 0 || s >= scales()) throw ConfigError("attention scale index out of range");
  if (cond_dim < 1 || context_dim < 1) throw ConfigError("conditioning widths must be positive");
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0) throw ConfigError("time_embed_dim must be even");
  if (heads < 1 || context_dim % heads != 0) throw ConfigError("context_dim must be divisible by heads");
  for (int m : multipliers)
    if ((base_channels * m) % heads != 0) throw ConfigError("every width must be divisible by heads");
}

bool DenoiserConfig::attends_at(int scale) const {
  return std::find(attention_scales.begin(), attention_scales.end(), scale) != attention_scales.end();
}

void to_json(json& j, const DenoiserConfig& c) {
  j = {{"in_channels", c.in_channels},
       {"base_channels", c.base_channels},
       {"multipliers", c.multipliers},
       {"blocks_per_scale", c.blocks_per_scale},
       {"attention_scales", c.attention_scales},
       {"cond_dim", c.cond_dim},
       {"context_dim", c.context_dim},
       {"time_embed_dim", c.time_embed_dim},
       {"heads", c.heads},
       {"groups", c.groups},
       {"init_seed", c.init_seed}};
}

void from_json(const json& j, DenoiserConfig& c) {
  DenoiserConfig d;
  c.in_channels = j.value("in_channels", d.in_channels);
  c.base_channels = j.value("base_channels", d.base_channels);
  c.multipliers = j.value("multipliers", d.multipliers);
  c.blocks_per_scale = j.value("blocks_per_scale", d.blocks_per_scale);
  c.attention_scales = j.value("attention_scales", d.attention_scales);
  c.cond_dim = j.value("cond_dim", d.cond_dim);
  c.context_dim = j.value("context_dim", d.context_dim);
  c.time_embed_dim = j.value("time_embed_dim", d.time_embed_dim);
  c.heads = j.value("heads", d.heads);
  c.groups = j.value("groups", d.groups);
  c.init_seed = j.value("init_seed", d.init_seed);
}

std::string config_hash(const DenoiserConfig& config) {
  json j = config;
  j.erase("init_seed");
  return to_hex(fnv1a(j.dump()));
}

Vector timestep_embedding(int t, int dim) {
  if (dim < 2 || dim % 2 != 0) throw ConfigError("timestep embedding dimension must be even");
  const int half = dim / 2;
  Vector e(dim);
  for (int k = 0; k < half; ++k) {
    const double w = std::exp(-std::log(10000.0) * k / half);
    e[k] = std::sin(t * w);
    e[half + k] = std::cos(t * w);
  }
  return e;
}

nn::Var to_batch(const std::vector<const LatentGrid*>& latents) {
  if (latents.empty()) throw ShapeError("empty latent batch");
  const auto& f = *latents.front();
  const int C = f.channels, H = f.height, W = f.width;
  nn::Buffer v(latents.size() * f.size());
  for (std::size_t b = 0; b < latents.size(); ++b) {
    if (!latents[b]->same_shape(f)) throw ShapeError("latent batch mixes shapes");
    const double* src = latents[b]->values.data();
    double* dst = v.data() + b * f.size();
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) dst[(static_cast<std::size_t>(y) * W + x) * C + c] = src[(static_cast<std::size_t>(c) * H + y) * W + x];
  }
  return nn::Var::constant({static_cast<int>(latents.size()), H, W, C}, std::move(v));
}

LatentStack from_batch(const nn::Var& batch, int index, int n_steps) {
  const int H = batch.dim(1), W = batch.dim(2), C = batch.dim(3);
  if (H % n_steps != 0) throw ShapeError("batch height not divisible by step count");
  LatentStack out(C, H / n_steps, W, n_steps);
  const double* src = batch.value().data() + static_cast<std::size_t>(index) * H * W * C;
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) out.at(c, y, x) = src[(static_cast<std::size_t>(y) * W + x) * C + c];
  return out;
}

std::pair<nn::Var, std::vector<int>> pack_conditioning(const std::vector<const ConditioningSequence*>& conds, int dim) {
  int L = 0;
  for (const auto* c : conds) {
    if (c->dim() != dim)
      throw ShapeError("conditioning width " + std::to_string(c->dim()) + " does not match cond_dim " + std::to_string(dim));
    if (c->length() < 1) throw ShapeError("empty conditioning sequence");
    L = std::max(L, c->length());
  }
  const int B = static_cast<int>(conds.size());
  nn::Buffer v(static_cast<std::size_t>(B) * L * dim, 0.0);
  std::vector<int> lengths;
  for (int b = 0; b < B; ++b) {
    const auto& m = conds[static_cast<std::size_t>(b)]->vectors;
    std::copy_n(m.data(), m.size(), v.data() + static_cast<std::size_t>(b) * L * dim);
    lengths.push_back(static_cast<int>(m.rows()));
  }
  return {nn::Var::constant({B, L, dim}, std::move(v)), std::move(lengths)};
}

Denoiser::Denoiser(DenoiserConfig config) : config_(std::move(config)), params_(derive_seed(config_.init_seed, {0xde})) {
  config_.validate();
  const auto& c = config_;
  const int time_dim = 4 * c.base_channels;
  time_in_ = nn::Linear(params_, "time.in", c.time_embed_dim, time_dim);
  time_out_ = nn::Linear(params_, "time.out", time_dim, time_dim);
  ctx_in_ = nn::Linear(params_, "ctx.in", c.cond_dim, c.context_dim);
  ctx_norm_ = nn::LayerNorm(params_, "ctx.norm", c.context_dim);
  ctx_attn_ = nn::MultiHeadAttention(params_, "ctx.attn", c.context_dim, c.context_dim, c.heads);
  ctx_out_ = nn::Linear(params_, "ctx.out", c.context_dim, c.context_dim);
  conv_in_ = nn::Conv2d(params_, "conv_in", c.in_channels, c.base_channels, 3, 1, 1);

  levels_.resize(static_cast<std::size_t>(c.scales()));
  int ch = c.base_channels;
  for (int l = 0; l < c.scales(); ++l) {
    auto& lv = levels_[static_cast<std::size_t>(l)];
    const int out = c.base_channels * c.multipliers[static_cast<std::size_t>(l)];
    const std::string p = "down" + std::to_string(l);
    for (int b = 0; b < c.blocks_per_scale; ++b) {
      lv.down_blocks.emplace_back(params_, p + ".res" + std::to_string(b), b == 0 ? ch : out, out, time_dim, c.groups);
      if (c.attends_at(l))
        lv.down_attn.emplace_back(params_, p + ".attn" + std::to_string(b), out, c.context_dim, c.heads);
    }
    ch = out;
    if (l + 1 < c.scales()) lv.downsample = nn::Conv2d(params_, p + ".downsample", ch, ch, 3, 2, 1);
  }
  mid_block_ = nn::ResBlock(params_, "mid.res", ch, ch, time_dim, c.groups);
  mid_attn_ = nn::SpatialTransformer(params_, "mid.attn", ch, c.context_dim, c.heads);
  for (int l = c.scales() - 1; l >= 0; --l) {
    auto& lv = levels_[static_cast<std::size_t>(l)];
    const int skip = c.base_channels * c.multipliers[static_cast<std::size_t>(l)];
    const std::string p = "up" + std::to_string(l);
    for (int b = 0; b < c.blocks_per_scale; ++b) {
      lv.up_blocks.emplace_back(params_, p + ".res" + std::to_string(b), b == 0 ? ch + skip : skip, skip, time_dim, c.groups);
      if (c.attends_at(l)) lv.up_attn.emplace_back(params_, p + ".attn" + std::to_string(b), skip, c.context_dim, c.heads);
    }
    ch = skip;
    if (l > 0) lv.upsample_conv = nn::Conv2d(params_, p + ".upsample", ch, ch, 3, 1, 1);
  }
  out_norm_ = nn::GroupNorm(params_, "out.norm", ch, c.groups);
  conv_out_ = nn::Conv2d(params_, "conv_out", ch, c.in_channels, 3, 1, 1, 0.5);
}

nn::Var Denoiser::forward(const nn::Var& z, const std::vector<int>& t,
                          const std::vector<const ConditioningSequence*>& cond) const {
  const auto& c = config_;
  if (z.shape().size() != 4 || z.dim(3) != c.in_channels)
    throw ShapeError("denoiser input " + nn::shape_string(z.shape()) + " does not have " + std::to_string(c.in_channels) + " channels");
  const int B = z.dim(0);
  if (static_cast<int>(t.size()) != B || static_cast<int>(cond.size()) != B)
    throw ShapeError("denoiser needs one timestep and one conditioning per sample");

  nn::Buffer te(static_cast<std::size_t>(B) * c.time_embed_dim);
  for (int b = 0; b < B; ++b) {
    const Vector e = timestep_embedding(t[static_cast<std::size_t>(b)], c.time_embed_dim);
    std::copy_n(e.data(), c.time_embed_dim, te.data() + static_cast<std::size_t>(b) * c.time_embed_dim);
  }
  nn::Var temb = time_out_(nn::silu(time_in_(nn::Var::constant({B, c.time_embed_dim}, std::move(te)))));

  auto [tokens, lengths] = pack_conditioning(cond, c.cond_dim);
  nn::Var ctx = ctx_in_(tokens);
  ctx = nn::add(ctx, ctx_attn_(ctx_norm_(ctx), ctx_norm_(ctx), lengths));
  ctx = ctx_out_(ctx);

  nn::Var h = conv_in_(z);
  std::vector<nn::Var> skips;
  for (int l = 0; l < c.scales(); ++l) {
    const auto& lv = levels_[static_cast<std::size_t>(l)];
    for (std::size_t b = 0; b < lv.down_blocks.size(); ++b) {
      h = lv.down_blocks[b](h, temb);
      if (!lv.down_attn.empty()) h = lv.down_attn[b](h, ctx, lengths);
    }
    skips.push_back(h);
    if (l + 1 < c.scales()) h = lv.downsample(h);
  }
  h = mid_block_(h, temb);
  h = mid_attn_(h, ctx, lengths);
  for (int l = c.scales() - 1; l >= 0; --l) {
    const auto& lv = levels_[static_cast<std::size_t>(l)];
    h = nn::concat_last(h, skips[static_cast<std::size_t>(l)]);
    for (std::size_t b = 0; b < lv.up_blocks.size(); ++b) {
      h = lv.up_blocks[b](h, temb);
      if (!lv.up_attn.empty()) h = lv.up_attn[b](h, ctx, lengths);
    }
    if (l > 0) {
      const auto& target = skips[static_cast<std::size_t>(l - 1)];
      h = lv.upsample_conv(nn::upsample2x(h, target.dim(1), target.dim(2)));
    }
  }
  return conv_out_(nn::silu(out_norm_(h)));
}

std::vector<LatentStack> Denoiser::predict_batch(const std::vector<const LatentStack*>& z, const std::vector<int>& t,
                                                 const std::vector<const ConditioningSequence*>& cond) const {
  nn::NoGradGuard no_grad;
  std::vector<const LatentGrid*> grids(z.begin(), z.end());
  const nn::Var out = forward(to_batch(grids), t, cond);
  std::vector<LatentStack> res;
  for (std::size_t b = 0; b < z.size(); ++b) res.push_back(from_batch(out, static_cast<int>(b), z[b]->n_steps));
  return res;
}

LatentStack Denoiser::predict(const LatentStack& z_t, int t, const ConditioningSequence& cond) const {
  return predict_batch({&z_t}, {t}, {&cond}).front();
}

std::pair<LatentStack, LatentStack> Denoiser::predict_pair(const LatentStack& z_t, int t, const ConditioningSequence& cond,
                                                           const ConditioningSequence& uncond) const {
  if (&cond == &uncond || cond == uncond) {
    auto once = predict(z_t, t, cond);
    return {once, once};
  }
  auto out = predict_batch({&z_t, &z_t}, {t, t}, {&cond, &uncond});
  return {std::move(out[0]), std::move(out[1])};
}

std::size_t Denoiser::import_parameters(const std::map<std::string, std::vector<double>>& named) {
  std::size_t n = 0;
  for (auto& [name, var] : params_.entries()) {
    auto it = named.find(name);
    if (it == named.end()) continue;
    if (it->second.size() != var.size()) throw ShapeError("parameter " + name + " has mismatched size");
    auto v = var;
    v.mutable_value().assign(it->second.begin(), it->second.end());
    ++n;
  }
  return n;
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'S', 'D', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

void save_checkpoint(const Denoiser& model, const CheckpointMeta& meta, const std::filesystem::path& path,
                     const std::map<std::string, std::vector<double>>& aux) {
  std::string payload;
  json tensors = json::array();
  std::size_t offset = 0;
  auto append = [&](const std::string& name, const nn::Shape& shape, std::span<const double> values) {
    tensors.push_back({{"name", name}, {"shape", shape}, {"offset", offset}, {"count", values.size()}});
    payload.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(double));
    offset += values.size();
  };
  for (const auto& [name, var] : model.parameters().entries()) append(name, var.shape(), var.value());
  for (const auto& [name, values] : aux) append("aux/" + name, {static_cast<int>(values.size())}, values);

  json header = {{"config", model.config()},
                 {"config_hash", model.hash()},
                 {"step", meta.step},
                 {"schedule", meta.schedule},
                 {"parameterization", diffusion::to_string(meta.parameterization)},
                 {"extra", meta.extra},
                 {"tensors", tensors},
                 {"payload_fnv1a", to_hex(fnv1a(payload))}};
  const std::string h = header.dump();
  std::string out(kMagic, 4);
  const std::uint32_t version = kVersion;
  const std::uint64_t hlen = h.size();
  out.append(reinterpret_cast<const char*>(&version), sizeof(version));
  out.append(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out += h;
  out += payload;
  write_file_atomic(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const DenoiserConfig* expected) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint not found: " + path.string());
  const std::string bytes = read_file(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw ParseError("not a checkpoint file: " + path.string());
  std::uint32_t version;
  std::uint64_t hlen;
  std::memcpy(&version, bytes.data() + 4, sizeof(version));
  std::memcpy(&hlen, bytes.data() + 8, sizeof(hlen));
  if (version != kVersion) throw ParseError("unsupported checkpoint version " + std::to_string(version));
  if (hlen > bytes.size() - 16) throw ParseError("checkpoint header is truncated");
  json header;
  try {
    header = json::parse(bytes.substr(16, hlen));
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const std::string_view payload(bytes.data() + 16 + hlen, bytes.size() - 16 - hlen);
  if (to_hex(fnv1a(payload)) != header.at("payload_fnv1a").get<std::string>())
    throw IntegrityError("checkpoint payload checksum mismatch (corrupt file): " + path.string());

  DenoiserConfig config = header.at("config").get<DenoiserConfig>();
  const auto stored_hash = header.at("config_hash").get<std::string>();
  if (config_hash(config) != stored_hash) throw IntegrityError("checkpoint config does not match its recorded hash");
  if (expected && config_hash(*expected) != stored_hash)
    throw ConfigError("checkpoint config hash " + stored_hash + " does not match expected " + config_hash(*expected));

  Checkpoint ck;
  ck.model = std::make_unique<Denoiser>(config);
  ck.meta.step = header.at("step").get<std::int64_t>();
  ck.meta.schedule = header.at("schedule").get<diffusion::NoiseSchedule>();
  ck.meta.parameterization = diffusion::parse_parameterization(header.at("parameterization").get<std::string>());
  ck.meta.extra = header.value("extra", json::object());

  std::map<std::string, std::pair<nn::Shape, std::vector<double>>> stored;
  for (const auto& t : header.at("tensors")) {
    const auto offset = t.at("offset").get<std::size_t>();
    const auto count = t.at("count").get<std::size_t>();
    if ((offset + count) * sizeof(double) > payload.size()) throw ParseError("tensor extends past payload");
    std::vector<double> values(count);
    std::memcpy(values.data(), payload.data() + offset * sizeof(double), count * sizeof(double));
    stored[t.at("name").get<std::string>()] = {t.at("shape").get<nn::Shape>(), std::move(values)};
  }
  std::size_t matched = 0;
  for (auto& [name, var] : ck.model->parameters().entries()) {
    auto it = stored.find(name);
    if (it == stored.end()) throw IntegrityError("checkpoint lacks parameter " + name);
    if (it->second.first != var.shape()) throw IntegrityError("checkpoint parameter " + name + " has the wrong shape");
    auto v = var;
    v.mutable_value().assign(it->second.second.begin(), it->second.second.end());
    ++matched;
  }
  for (auto& [name, entry] : stored)
    if (name.rfind("aux/", 0) == 0) ck.aux[name.substr(4)] = std::move(entry.second);
  if (stored.size() - ck.aux.size() != matched) throw IntegrityError("checkpoint carries parameters unknown to the architecture");
  return ck;
}

}  // namespace stackdiff
