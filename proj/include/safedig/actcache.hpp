#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "safedig/io.hpp"
#include "safedig/rng.hpp"
#include "safedig/tensor.hpp"
#include "safedig/toydit.hpp"

namespace safedig {

enum class CfgKeep { ConditionalOnly, Both };

struct CacheConfig {
  std::size_t stride_N = 6;        // keep one step every N
  std::size_t token_budget = 0;    // retained token count; 0 = all
  std::size_t channel_out = 16;    // projected channel count; 0 = none
  std::uint64_t projection_seed = 0;
  CfgKeep cfg_keep = CfgKeep::ConditionalOnly;
  std::uint64_t base_seed = 42;
  std::size_t batch_size = 2;

  json to_json() const {
    return json{{"stride_N", stride_N},
                {"token_budget", token_budget},
                {"channel_out", channel_out},
                {"projection_seed", projection_seed},
                {"cfg_keep", cfg_keep == CfgKeep::ConditionalOnly ? "conditional_only" : "both"},
                {"base_seed", base_seed},
                {"batch_size", batch_size}};
  }

  void validate(std::size_t source_tokens, std::size_t source_channels) const {
    if (stride_N < 1) throw ConfigError("cache: stride_N must be >= 1");
    if (token_budget > source_tokens)
      throw ConfigError("cache: token budget exceeds source token count");
    if (channel_out > source_channels)
      throw ConfigError("cache: channel_out exceeds source channels");
    if (batch_size < 1) throw ConfigError("cache: batch_size must be >= 1");
  }
};

// Kept-timestep rule: indices {0, N, 2N, ...}.
inline std::vector<std::size_t> kept_step_indices(std::size_t steps, std::size_t stride) {
  std::vector<std::size_t> kept;
  for (std::size_t s = 0; s < steps; s += stride) kept.push_back(s);
  return kept;
}

// ---------------------------------------------------------------------------
// Persisted auxiliary artifacts
// ---------------------------------------------------------------------------

struct ProjectionArtifact {
  Tensor matrix;  // (C, C')
  std::uint64_t seed = 0;
  std::uint64_t checksum = 0;
};

// Gaussian matrix scaled by 1/sqrt(C) so column norms concentrate near 1.
inline ProjectionArtifact make_projection(std::size_t channels, std::size_t channels_out,
                                          std::uint64_t seed) {
  if (channels_out > channels) throw ConfigError("projection: C' must satisfy C' <= C");
  SeededRng rng(seed, fnv1a64("projection"));
  ProjectionArtifact art;
  art.matrix = scale(seeded_gaussian(rng, {channels, channels_out}),
                     1.0f / std::sqrt(static_cast<float>(channels)));
  art.seed = seed;
  auto payload = f32_payload(art.matrix);
  art.checksum = fnv1a64(payload.data(), payload.size());
  return art;
}

inline void save_projection(const fs::path& path, const ProjectionArtifact& art) {
  Container c;
  c.header = json{{"kind", "projection"},
                  {"shape", art.matrix.shape()},
                  {"dtype", "f32"},
                  {"seed", art.seed},
                  {"checksum", hex64(art.checksum)}};
  c.payload = f32_payload(art.matrix);
  write_container(path, c);
}

inline ProjectionArtifact load_projection(const fs::path& path) {
  Container c = read_container(path);
  ProjectionArtifact art;
  art.matrix = tensor_from_f32_payload(c.payload, shape_from_json(c.header.at("shape")),
                                       path.string());
  art.seed = c.header.at("seed").get<std::uint64_t>();
  art.checksum = fnv1a64(c.payload.data(), c.payload.size());
  if (hex64(art.checksum) != c.header.at("checksum").get<std::string>()) {
    throw IoError(path.string() + ": projection checksum mismatch");
  }
  return art;
}

struct TokenIndexArtifact {
  std::vector<std::size_t> indices;  // strictly increasing, all < source tokens

  void validate(std::size_t source_tokens) const {
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= source_tokens) throw ConfigError("token index out of range");
      if (i > 0 && indices[i] <= indices[i - 1])
        throw ConfigError("token indices must be strictly increasing");
    }
  }
};

// Uniform sample without replacement, then sorted, seeded from
// projection_seed + 1 so the index set is reproducible alongside P.
inline TokenIndexArtifact sample_token_indices(std::size_t source_tokens, std::size_t k,
                                               std::uint64_t projection_seed) {
  if (k > source_tokens) throw ConfigError("token budget exceeds source token count");
  SeededRng rng(projection_seed + 1, fnv1a64("token_index"));
  auto perm = seeded_permutation(rng, source_tokens);
  TokenIndexArtifact art;
  art.indices.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(art.indices.begin(), art.indices.end());
  return art;
}

inline void save_token_indices(const fs::path& path, const TokenIndexArtifact& art) {
  write_text_atomic(path, json{{"kind", "token_index"}, {"indices", art.indices}}.dump(2));
}

inline TokenIndexArtifact load_token_indices(const fs::path& path) {
  json j = json::parse(read_text(path));
  TokenIndexArtifact art;
  for (const auto& v : j.at("indices")) art.indices.push_back(v.get<std::size_t>());
  return art;
}

// ---------------------------------------------------------------------------
// Reduction pipeline (Alg. 1 order: stride, token subsample, projection,
// CFG-branch keep, then cast to binary16)
// ---------------------------------------------------------------------------

inline Tensor reduce_activation(const Tensor& acts, const CacheConfig& cfg,
                                const ProjectionArtifact* projection,
                                const TokenIndexArtifact* token_index) {
  if (acts.rank() != 4) throw ShapeError("reduce_activation expects (steps, branches, tokens, channels)");
  std::size_t steps = acts.dim(0), branches = acts.dim(1), tokens = acts.dim(2),
              channels = acts.dim(3);
  cfg.validate(tokens, channels);

  auto kept = kept_step_indices(steps, cfg.stride_N);

  std::vector<std::size_t> tok_keep;
  if (cfg.token_budget > 0) {
    if (token_index == nullptr) throw ConfigError("token budget set but no token index artifact");
    if (token_index->indices.size() != cfg.token_budget)
      throw ConfigError("token index artifact size does not match token budget");
    token_index->validate(tokens);
    tok_keep = token_index->indices;
  } else {
    tok_keep.resize(tokens);
    for (std::size_t i = 0; i < tokens; ++i) tok_keep[i] = i;
  }

  std::size_t ch_out = channels;
  if (cfg.channel_out > 0) {
    if (projection == nullptr) throw ConfigError("channel projection set but no projection artifact");
    if (projection->matrix.dim(0) != channels || projection->matrix.dim(1) != cfg.channel_out)
      throw ConfigError("projection artifact shape does not match config");
    ch_out = cfg.channel_out;
  }

  std::size_t kept_branches = cfg.cfg_keep == CfgKeep::ConditionalOnly ? 1 : branches;

  Tensor out({kept.size(), kept_branches, tok_keep.size(), ch_out});
  float* dst = out.data().data();
  for (std::size_t ks = 0; ks < kept.size(); ++ks) {
    for (std::size_t b = 0; b < kept_branches; ++b) {
      for (std::size_t ti = 0; ti < tok_keep.size(); ++ti) {
        const std::size_t base =
            ((kept[ks] * branches + b) * tokens + tok_keep[ti]) * channels;
        const float* src = acts.data().data() + base;
        if (cfg.channel_out > 0) {
          for (std::size_t c = 0; c < ch_out; ++c) {
            double acc = 0.0;
            for (std::size_t k = 0; k < channels; ++k) {
              acc += static_cast<double>(src[k]) *
                     static_cast<double>(projection->matrix.at2(k, c));
            }
            *dst++ = static_cast<float>(acc);
          }
        } else {
          for (std::size_t c = 0; c < ch_out; ++c) *dst++ = src[c];
        }
      }
    }
  }
  return f16_roundtrip(out);
}

// ---------------------------------------------------------------------------
// Shards and manifests
// ---------------------------------------------------------------------------

struct Shard {
  std::size_t shard_index = 0;
  json header;
  Half16Buffer payload;
};

struct CacheManifest {
  std::string position;
  std::size_t completed_shards = 0;
  std::string config_fingerprint;
  json artifact_checksums;
  std::vector<std::size_t> shard_samples;

  json to_json() const {
    return json{{"position", position},
                {"completed_shards", completed_shards},
                {"config_fingerprint", config_fingerprint},
                {"artifact_checksums", artifact_checksums},
                {"shard_samples", shard_samples}};
  }

  static CacheManifest from_json(const json& j) {
    CacheManifest m;
    m.position = j.at("position").get<std::string>();
    m.completed_shards = j.at("completed_shards").get<std::size_t>();
    m.config_fingerprint = j.at("config_fingerprint").get<std::string>();
    m.artifact_checksums = j.at("artifact_checksums");
    for (const auto& v : j.at("shard_samples")) m.shard_samples.push_back(v.get<std::size_t>());
    return m;
  }
};

// One writer per position directory. Shards land in tmp/, the manifest is the
// single synchronization point and is updated only after a durable write.
class PositionStore {
 public:
  PositionStore(fs::path root, std::string position_path)
      : dir_(std::move(root)), position_(std::move(position_path)) {
    fs::create_directories(shard_dir());
  }

  const fs::path& dir() const { return dir_; }
  fs::path shard_dir() const { return dir_ / "tmp"; }
  fs::path shard_path(std::size_t index) const {
    char name[32];
    std::snprintf(name, sizeof(name), "shard_%05zu.bin", index);
    return shard_dir() / name;
  }
  fs::path manifest_path() const { return dir_ / "manifest.json"; }
  fs::path dataset_path() const { return dir_ / "data.bin"; }
  fs::path metadata_path() const { return dir_ / "meta.json"; }

  std::optional<CacheManifest> read_manifest() const {
    if (!fs::exists(manifest_path())) return std::nullopt;
    return CacheManifest::from_json(json::parse(read_text(manifest_path())));
  }

  Shard write_shard(const Tensor& reduced_batch, const std::vector<int>& timesteps,
                    CacheManifest& manifest) {
    Shard shard;
    shard.shard_index = manifest.completed_shards;
    shard.payload = Half16Buffer::encode(reduced_batch);
    shard.header = json{{"shape", reduced_batch.shape()},
                        {"dtype", "f16"},
                        {"position", position_},
                        {"timesteps", timesteps},
                        {"sample_count", reduced_batch.dim(0)}};
    Container c{shard.header, shard.payload.to_bytes()};
    write_container(shard_path(shard.shard_index), c);
    manifest.completed_shards += 1;
    manifest.shard_samples.push_back(reduced_batch.dim(0));
    write_text_atomic(manifest_path(), manifest.to_json().dump(2));
    return shard;
  }

  Shard read_shard(std::size_t index) const {
    Container c = read_container(shard_path(index));
    Shard s;
    s.shard_index = index;
    s.header = c.header;
    s.payload = Half16Buffer::from_bytes(c.payload, shape_from_json(c.header.at("shape")));
    return s;
  }

  // Concatenates shard payload bytes without re-encoding.
  void consolidate(const CacheManifest& manifest) const {
    std::vector<std::uint8_t> payload;
    json first_header;
    std::size_t total_samples = 0;
    for (std::size_t i = 0; i < manifest.completed_shards; ++i) {
      Container c = read_container(shard_path(i));
      if (i == 0) first_header = c.header;
      total_samples += c.header.at("sample_count").get<std::size_t>();
      payload.insert(payload.end(), c.payload.begin(), c.payload.end());
    }
    if (first_header.is_null()) throw IoError("consolidate: no shards for " + position_);
    auto shape = shape_from_json(first_header.at("shape"));
    shape[0] = total_samples;
    Container out;
    out.header = json{{"shape", shape},
                      {"dtype", "f16"},
                      {"position", position_},
                      {"timesteps", first_header.at("timesteps")},
                      {"sample_count", total_samples}};
    out.payload = std::move(payload);
    write_container(dataset_path(), out);
    json meta = json{{"position", position_},
                     {"config_fingerprint", manifest.config_fingerprint},
                     {"artifact_checksums", manifest.artifact_checksums},
                     {"shards", manifest.completed_shards},
                     {"sample_count", total_samples},
                     {"payload_checksum", hex64(fnv1a64(out.payload.data(), out.payload.size()))}};
    write_text_atomic(metadata_path(), meta.dump(2));
  }

 private:
  fs::path dir_;
  std::string position_;
};

struct ConsolidatedDataset {
  Tensor data;  // (samples, kept_steps, branches, tokens, channels)
  std::vector<int> timesteps;
  json meta;
};

inline ConsolidatedDataset load_dataset(const fs::path& position_dir) {
  fs::path data_path = position_dir / "data.bin";
  if (!fs::exists(data_path)) {
    throw IoError("missing consolidated dataset: " + data_path.string());
  }
  Container c = read_container(data_path);
  ConsolidatedDataset ds;
  ds.data = Half16Buffer::from_bytes(c.payload, shape_from_json(c.header.at("shape"))).decode();
  for (const auto& t : c.header.at("timesteps")) ds.timesteps.push_back(t.get<int>());
  ds.meta = json::parse(read_text(position_dir / "meta.json"));
  return ds;
}

inline std::string sanitize_position(const std::string& dotted_path) {
  std::string s = dotted_path;
  std::replace(s.begin(), s.end(), '.', '_');
  return s;
}

// ---------------------------------------------------------------------------
// run_cache: Algorithm 1 end to end over a toy model
// ---------------------------------------------------------------------------

struct CacheRunOptions {
  bool resume = false;
  // Interrupt after this many batches (simulated fault injection for tests).
  std::optional<std::size_t> stop_after_batches;
};

struct InterruptedError : std::runtime_error {
  explicit InterruptedError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string cache_fingerprint(const CacheConfig& cfg, const ToyDitConfig& model_cfg,
                                     const std::vector<PositionId>& positions) {
  json j = cfg.to_json();
  j["model_seed"] = model_cfg.model_seed;
  j["n_steps"] = model_cfg.n_steps;
  j["guidance"] = model_cfg.guidance;
  std::vector<std::string> pos;
  for (const auto& p : positions) pos.push_back(p.dotted_path());
  j["positions"] = pos;
  return hex64(fnv1a64(j.dump()));
}

inline std::map<PositionId, CacheManifest> run_cache(const ToyDit& model,
                                                     const std::vector<PromptSpec>& prompts,
                                                     const std::vector<PositionId>& positions,
                                                     const CacheConfig& cfg,
                                                     const fs::path& root,
                                                     const CacheRunOptions& opts = {}) {
  if (prompts.empty()) throw ConfigError("run_cache: prompt set is empty");
  const auto& mc = model.config();
  std::string fingerprint = cache_fingerprint(cfg, mc, positions);

  // Prepare and persist the auxiliary artifacts once.
  std::optional<ProjectionArtifact> projection;
  std::optional<TokenIndexArtifact> token_index;
  json checksums = json::object();
  if (cfg.channel_out > 0) {
    fs::path ppath = root / "projection.bin";
    if (fs::exists(ppath)) {
      projection = load_projection(ppath);
    } else {
      projection = make_projection(mc.d_model, cfg.channel_out, cfg.projection_seed);
      save_projection(ppath, *projection);
    }
    checksums["projection"] = hex64(projection->checksum);
  }
  if (cfg.token_budget > 0) {
    fs::path tpath = root / "token_index.json";
    if (fs::exists(tpath)) {
      token_index = load_token_indices(tpath);
    } else {
      token_index = sample_token_indices(mc.n_latent_tokens, cfg.token_budget,
                                         cfg.projection_seed);
      save_token_indices(tpath, *token_index);
    }
    checksums["token_index"] =
        hex64(fnv1a64(json(token_index->indices).dump()));
  }

  std::vector<std::string> labels;
  for (const auto& pos : positions) labels.push_back(sanitize_position(pos.dotted_path()));
  labels.push_back("latent_pooled");  // pooled-latent sidecar rides the same machinery
  const std::size_t latent_slot = labels.size() - 1;

  std::vector<PositionStore> stores;
  std::vector<CacheManifest> manifests;
  for (const auto& label : labels) {
    stores.emplace_back(root / label, label);
    if (auto existing = stores.back().read_manifest()) {
      if (!opts.resume) throw ConfigError("cache output exists; pass resume to continue");
      if (existing->config_fingerprint != fingerprint) {
        throw ConfigError("resume rejected: config fingerprint mismatch at " + label);
      }
      manifests.push_back(*existing);
    } else {
      CacheManifest m;
      m.position = label;
      m.config_fingerprint = fingerprint;
      m.artifact_checksums = checksums;
      manifests.push_back(m);
    }
  }

  const std::size_t batches = (prompts.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t resume_from = batches;
  for (const auto& m : manifests) resume_from = std::min(resume_from, m.completed_shards);

  for (std::size_t j = resume_from; j < batches; ++j) {
    if (opts.stop_after_batches && j >= *opts.stop_after_batches) {
      throw InterruptedError("cache interrupted after batch " + std::to_string(j));
    }
    // RNG seed rule: s = s0 + j per mini-batch.
    SeededRng batch_rng(cfg.base_seed + j);
    std::size_t begin = j * cfg.batch_size;
    std::size_t end = std::min(prompts.size(), begin + cfg.batch_size);

    std::vector<std::vector<Tensor>> reduced_per_prompt(labels.size());
    for (std::size_t p = begin; p < end; ++p) {
      SeededRng prompt_rng = batch_rng.substream(p - begin);
      DenoiseResult run = model.run_denoise(prompts[p], prompt_rng, positions);
      for (std::size_t pi = 0; pi < positions.size(); ++pi) {
        const PositionId& pos = positions[pi];
        const HookCapture& cap = run.captures.at(pos);
        std::size_t steps = cap.steps.size();
        std::size_t branches = cap.steps[0].dim(0), tokens = cap.steps[0].dim(1),
                    channels = cap.steps[0].dim(2);
        Tensor stack({steps, branches, tokens, channels});
        for (std::size_t s = 0; s < steps; ++s) {
          std::copy(cap.steps[s].data().begin(), cap.steps[s].data().end(),
                    stack.data().begin() +
                        static_cast<std::ptrdiff_t>(s * branches * tokens * channels));
        }
        // Text-encoder activations have no latent tokens, so the token index
        // artifact only applies to trunk positions.
        CacheConfig eff = cfg;
        const TokenIndexArtifact* tix = token_index ? &*token_index : nullptr;
        if (pos.family == PositionFamily::TextEncoder) {
          eff.token_budget = 0;
          tix = nullptr;
        }
        reduced_per_prompt[pi].push_back(
            reduce_activation(stack, eff, projection ? &*projection : nullptr, tix));
      }
      // Pooled latent per kept step (latents are shared across CFG branches).
      auto kept = kept_step_indices(run.latents.size(), cfg.stride_N);
      Tensor pooled({kept.size(), 1, 1, mc.d_model});
      for (std::size_t ks = 0; ks < kept.size(); ++ks) {
        Tensor pm = mean_rows(run.latents[kept[ks]]);
        for (std::size_t jch = 0; jch < mc.d_model; ++jch) {
          pooled.data()[ks * mc.d_model + jch] = pm[jch];
        }
      }
      reduced_per_prompt[latent_slot].push_back(f16_roundtrip(pooled));
    }

    std::vector<int> block_ts;
    for (std::size_t s : kept_step_indices(mc.n_steps, cfg.stride_N)) {
      block_ts.push_back(static_cast<int>(mc.n_steps - 1 - s));
    }
    for (std::size_t slot = 0; slot < labels.size(); ++slot) {
      std::vector<int> ts = block_ts;
      if (slot < positions.size() && positions[slot].family == PositionFamily::TextEncoder) {
        ts = {-1};
      }
      const auto& rows = reduced_per_prompt[slot];
      const Tensor& first = rows[0];
      std::vector<std::size_t> shape = {rows.size()};
      for (auto d : first.shape()) shape.push_back(d);
      Tensor batch(shape);
      std::size_t stride = first.size();
      for (std::size_t r = 0; r < rows.size(); ++r) {
        std::copy(rows[r].data().begin(), rows[r].data().end(),
                  batch.data().begin() + static_cast<std::ptrdiff_t>(r * stride));
      }
      stores[slot].write_shard(batch, ts, manifests[slot]);
    }
  }

  // Consolidate into final datasets plus metadata.
  std::map<PositionId, CacheManifest> out;
  for (std::size_t slot = 0; slot < labels.size(); ++slot) {
    stores[slot].consolidate(manifests[slot]);
    if (slot < positions.size()) out[positions[slot]] = manifests[slot];
  }
  return out;
}

}  // namespace safedig
