#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "safedig/io.hpp"
#include "safedig/rng.hpp"
#include "safedig/tensor.hpp"

namespace safedig {

// ---------------------------------------------------------------------------
// Intervention positions
// ---------------------------------------------------------------------------

enum class PositionFamily { TextEncoder = 0, DoubleStream = 1, SingleStream = 2 };

// A named hook location. Positions are totally ordered by depth:
// text encoder, then double-stream blocks by index, then single-stream blocks.
struct PositionId {
  PositionFamily family = PositionFamily::TextEncoder;
  std::size_t index = 0;

  std::string dotted_path() const {
    switch (family) {
      case PositionFamily::TextEncoder:
        return "text_encoder";
      case PositionFamily::DoubleStream:
        return "double_transformer_blocks." + std::to_string(index);
      case PositionFamily::SingleStream:
        return "single_transformer_blocks." + std::to_string(index);
    }
    return {};
  }

  static PositionId parse(const std::string& path) {
    if (path == "text_encoder") return {PositionFamily::TextEncoder, 0};
    auto parse_indexed = [&](const std::string& prefix,
                             PositionFamily family) -> std::optional<PositionId> {
      if (path.rfind(prefix, 0) != 0) return std::nullopt;
      std::string rest = path.substr(prefix.size());
      if (rest.empty() || rest.find_first_not_of("0123456789") != std::string::npos) {
        throw ConfigError("bad position path: " + path);
      }
      return PositionId{family, static_cast<std::size_t>(std::stoull(rest))};
    };
    if (auto p = parse_indexed("double_transformer_blocks.", PositionFamily::DoubleStream)) return *p;
    if (auto p = parse_indexed("single_transformer_blocks.", PositionFamily::SingleStream)) return *p;
    throw ConfigError("unknown position path: " + path);
  }

  friend bool operator==(const PositionId& a, const PositionId& b) {
    return a.family == b.family && a.index == b.index;
  }
  friend bool operator<(const PositionId& a, const PositionId& b) {
    if (a.family != b.family) return static_cast<int>(a.family) < static_cast<int>(b.family);
    return a.index < b.index;
  }
};

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

enum class Polarity { Safe, Harmful };

struct PromptSpec {
  std::int64_t prompt_id = 0;
  std::vector<std::uint32_t> tokens;
  std::string category;
  Polarity polarity = Polarity::Harmful;
  std::int64_t pair_id = -1;
};

// ---------------------------------------------------------------------------
// Model configuration
// ---------------------------------------------------------------------------

inline std::vector<float> linear_beta_schedule(std::size_t n_steps, float beta_start = 1e-4f,
                                               float beta_end = 0.02f) {
  std::vector<float> betas(n_steps);
  for (std::size_t s = 0; s < n_steps; ++s) {
    float f = n_steps == 1 ? 0.0f : static_cast<float>(s) / static_cast<float>(n_steps - 1);
    betas[s] = beta_start + f * (beta_end - beta_start);
  }
  return betas;
}

struct ToyDitConfig {
  std::size_t d_model = 32;
  std::size_t n_text_tokens = 8;
  std::size_t n_latent_tokens = 16;
  std::size_t n_double_blocks = 2;
  std::size_t n_single_blocks = 2;
  std::size_t n_steps = 30;
  float guidance = 7.0f;
  bool use_cfg = true;
  std::vector<float> noise_schedule;  // per-step beta values; linear when empty
  std::size_t vocab_size = 512;
  std::uint64_t model_seed = 7;
  bool planted_concept = false;  // rank-1 category direction on harmful prompts
  float planted_strength = 4.0f;

  std::vector<float> betas() const {
    return noise_schedule.empty() ? linear_beta_schedule(n_steps) : noise_schedule;
  }

  void validate() const {
    if (d_model < 1 || n_text_tokens < 1 || n_latent_tokens < 1 || n_double_blocks < 1 ||
        n_single_blocks < 1 || n_steps < 1 || vocab_size < 2) {
      throw ConfigError("toydit config: all counts must be >= 1");
    }
    for (float b : betas()) {
      if (!(b >= 0.0f && b < 1.0f)) throw ConfigError("toydit config: beta outside [0,1)");
    }
  }

  std::vector<PositionId> all_positions() const {
    std::vector<PositionId> out;
    out.push_back({PositionFamily::TextEncoder, 0});
    for (std::size_t i = 0; i < n_double_blocks; ++i) out.push_back({PositionFamily::DoubleStream, i});
    for (std::size_t i = 0; i < n_single_blocks; ++i) out.push_back({PositionFamily::SingleStream, i});
    return out;
  }

  std::size_t tokens_at(const PositionId& pos) const {
    switch (pos.family) {
      case PositionFamily::TextEncoder:
        return n_text_tokens;
      case PositionFamily::DoubleStream:
        return n_latent_tokens;
      case PositionFamily::SingleStream:
        return n_latent_tokens + n_text_tokens;
    }
    return 0;
  }
};

// cumulative noise schedule: alpha_bar(t) = prod_{s<=t} (1 - beta_s)
inline double alpha_bar(const std::vector<float>& betas, std::size_t t) {
  if (t >= betas.size()) throw ConfigError("timestep out of schedule range");
  double ab = 1.0;
  for (std::size_t s = 0; s <= t; ++s) ab *= (1.0 - static_cast<double>(betas[s]));
  return ab;
}

inline Tensor forward_noise(const Tensor& x0, std::size_t t, const ToyDitConfig& cfg,
                            SeededRng& rng) {
  auto betas = cfg.betas();
  double ab = alpha_bar(betas, t);
  Tensor eps = seeded_gaussian(rng, x0.shape());
  Tensor out(x0.shape());
  float a = static_cast<float>(std::sqrt(ab));
  float b = static_cast<float>(std::sqrt(1.0 - ab));
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  out.validate_finite();
  return out;
}

// ---------------------------------------------------------------------------
// Transformer pieces (single-head attention, exact softmax(QK^T/sqrt(d))V)
// ---------------------------------------------------------------------------

inline constexpr float kLayerNormEps = 1e-5f;

inline Tensor layer_norm(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("layer_norm needs (tokens, d)");
  std::size_t n = x.dim(0), d = x.dim(1);
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x.at2(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double c = x.at2(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < d; ++j) {
      out.at2(i, j) = static_cast<float>((x.at2(i, j) - mean) * inv);
    }
  }
  return out;
}

inline Tensor softmax_rows(const Tensor& x) {
  std::size_t n = x.dim(0), m = x.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, static_cast<double>(x.at2(i, j)));
    double sum = 0.0;
    std::vector<double> e(m);
    for (std::size_t j = 0; j < m; ++j) {
      e[j] = std::exp(static_cast<double>(x.at2(i, j)) - mx);
      sum += e[j];
    }
    for (std::size_t j = 0; j < m; ++j) out.at2(i, j) = static_cast<float>(e[j] / sum);
  }
  return out;
}

struct AttnWeights {
  Tensor wq, wk, wv;  // each (d, d)
};

struct MlpWeights {
  Tensor w1, b1, w2, b2;  // (d, 4d), (4d), (4d, d), (d)
};

inline Tensor attention(const Tensor& q_in, const Tensor& kv_in, const AttnWeights& w) {
  if (q_in.dim(1) != kv_in.dim(1) || q_in.dim(1) != w.wq.dim(0)) {
    throw ShapeError("attention: stream width mismatch");
  }
  Tensor q = matmul(q_in, w.wq);
  Tensor k = matmul(kv_in, w.wk);
  Tensor v = matmul(kv_in, w.wv);
  Tensor scores = matmul(q, transpose(k));
  float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(q.dim(1)));
  scores = scale(scores, inv_sqrt_d);
  return matmul(softmax_rows(scores), v);
}

inline float gelu(float x) {
  return 0.5f * x * (1.0f + std::erf(x / std::sqrt(2.0f)));
}

inline Tensor mlp(const Tensor& x, const MlpWeights& w) {
  Tensor h = matmul(x, w.w1);
  for (std::size_t i = 0; i < h.dim(0); ++i)
    for (std::size_t j = 0; j < h.dim(1); ++j) h.at2(i, j) = gelu(h.at2(i, j) + w.b1[j]);
  Tensor out = matmul(h, w.w2);
  for (std::size_t i = 0; i < out.dim(0); ++i)
    for (std::size_t j = 0; j < out.dim(1); ++j) out.at2(i, j) += w.b2[j];
  out.validate_finite();
  return out;
}

struct DoubleBlockWeights {
  AttnWeights self_x, self_c, cross_xc, cross_cx;
  MlpWeights mlp_x, mlp_c;
};

struct SingleBlockWeights {
  AttnWeights self_s;
  MlpWeights mlp_s;
};

// One Double Stream Block update, exactly in the stated equation order:
// per-stream self-attention, cross-attention both directions, per-stream MLPs,
// all residual with pre-LN.
inline std::pair<Tensor, Tensor> double_stream_step(const Tensor& x, const Tensor& c,
                                                    const DoubleBlockWeights& w) {
  if (x.dim(1) != c.dim(1)) throw ShapeError("double_stream_step: stream width mismatch");
  Tensor xs = add(x, attention(layer_norm(x), layer_norm(x), w.self_x));
  Tensor cs = add(c, attention(layer_norm(c), layer_norm(c), w.self_c));
  Tensor xh = add(xs, attention(layer_norm(xs), layer_norm(cs), w.cross_xc));
  Tensor ch = add(cs, attention(layer_norm(cs), layer_norm(xs), w.cross_cx));
  Tensor xo = add(xh, mlp(layer_norm(xh), w.mlp_x));
  Tensor co = add(ch, mlp(layer_norm(ch), w.mlp_c));
  return {xo, co};
}

inline Tensor single_stream_step(const Tensor& s, const SingleBlockWeights& w) {
  Tensor ss = add(s, attention(layer_norm(s), layer_norm(s), w.self_s));
  return add(ss, mlp(layer_norm(ss), w.mlp_s));
}

// ---------------------------------------------------------------------------
// The toy model
// ---------------------------------------------------------------------------

using Intervention =
    std::function<Tensor(const Tensor& activation, std::size_t step_index, int timestep)>;

struct HookCapture {
  PositionId position;
  std::vector<Tensor> steps;   // each (branches, tokens, d)
  std::vector<int> timesteps;  // scheduler timestep per entry; -1 for the text encoder
};

struct DenoiseResult {
  std::map<PositionId, HookCapture> captures;
  std::vector<Tensor> latents;  // latent state per step, (M, d)
  std::vector<int> latent_timesteps;
  Tensor final_latent;  // (M, d)
};

class ToyDit {
 public:
  explicit ToyDit(ToyDitConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    SeededRng root(cfg_.model_seed, 0);
    std::uint64_t k = 0;
    auto next_mat = [&](std::size_t r, std::size_t c) {
      SeededRng s = root.substream(k++);
      return scale(seeded_gaussian(s, {r, c}), 1.0f / std::sqrt(static_cast<float>(cfg_.d_model)));
    };
    auto next_attn = [&] { return AttnWeights{next_mat(cfg_.d_model, cfg_.d_model),
                                              next_mat(cfg_.d_model, cfg_.d_model),
                                              next_mat(cfg_.d_model, cfg_.d_model)}; };
    auto next_mlp = [&] {
      std::size_t h = 4 * cfg_.d_model;
      return MlpWeights{next_mat(cfg_.d_model, h), Tensor({h}), next_mat(h, cfg_.d_model),
                        Tensor({cfg_.d_model})};
    };

    token_embedding_ = next_mat(cfg_.vocab_size, cfg_.d_model);
    pos_embedding_ = next_mat(cfg_.n_text_tokens, cfg_.d_model);
    enc_attn_ = next_attn();
    enc_mlp_ = next_mlp();
    for (std::size_t i = 0; i < cfg_.n_double_blocks; ++i) {
      double_blocks_.push_back({next_attn(), next_attn(), next_attn(), next_attn(),
                                next_mlp(), next_mlp()});
    }
    for (std::size_t i = 0; i < cfg_.n_single_blocks; ++i) {
      single_blocks_.push_back({next_attn(), next_mlp()});
    }
    w_out_ = next_mat(cfg_.d_model, cfg_.d_model);
  }

  const ToyDitConfig& config() const { return cfg_; }

  // Unit direction planted for a harmful category; fixed by the model seed.
  Tensor category_direction(const std::string& category) const {
    SeededRng s(cfg_.model_seed, fnv1a64(category) | 1);
    return normalized(seeded_gaussian(s, {cfg_.d_model}));
  }

  // C = text_encoder(tokens): embedding lookup + positional offsets + one
  // self-attention/MLP block. Depends only on the prompt, never on (x_t, t).
  Tensor text_encode(const PromptSpec& prompt) const {
    if (prompt.tokens.empty()) throw ConfigError("text_encode: empty token sequence");
    std::size_t n = cfg_.n_text_tokens;
    Tensor c({n, cfg_.d_model});
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t tok = i < prompt.tokens.size() ? prompt.tokens[i] : 0;  // pad
      if (tok >= cfg_.vocab_size) {
        throw ConfigError("text_encode: token id " + std::to_string(tok) +
                          " outside vocabulary of size " + std::to_string(cfg_.vocab_size));
      }
      for (std::size_t j = 0; j < cfg_.d_model; ++j) {
        c.at2(i, j) = token_embedding_.at2(tok, j) + pos_embedding_.at2(i, j);
      }
    }
    c = add(c, attention(layer_norm(c), layer_norm(c), enc_attn_));
    c = add(c, mlp(layer_norm(c), enc_mlp_));
    if (cfg_.planted_concept && prompt.polarity == Polarity::Harmful) {
      Tensor dir = category_direction(prompt.category);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < cfg_.d_model; ++j)
          c.at2(i, j) += cfg_.planted_strength * dir[j];
    }
    c.validate_finite();
    return c;
  }

  DenoiseResult run_denoise(const PromptSpec& prompt, SeededRng& rng,
                            const std::vector<PositionId>& hooks,
                            const std::map<PositionId, Intervention>& interventions = {}) const {
    for (const auto& h : hooks) check_position(h);
    for (const auto& [pos, fn] : interventions) check_position(pos);

    DenoiseResult result;
    for (const auto& h : hooks) result.captures[h] = HookCapture{h, {}, {}};

    const std::size_t branches = cfg_.use_cfg ? 2 : 1;
    std::vector<Tensor> text(branches);
    text[0] = text_encode(prompt);
    if (cfg_.use_cfg) {
      PromptSpec padding;
      padding.tokens.assign(cfg_.n_text_tokens, 0);
      padding.polarity = Polarity::Safe;
      text[1] = text_encode(padding);
    }
    PositionId text_pos{PositionFamily::TextEncoder, 0};
    if (auto it = interventions.find(text_pos); it != interventions.end()) {
      for (std::size_t b = 0; b < branches; ++b) text[b] = it->second(text[b], 0, -1);
    }
    maybe_capture(result, text_pos, text, -1, hooks);

    auto betas = cfg_.betas();
    const std::size_t steps = cfg_.n_steps;
    Tensor x = seeded_gaussian(rng, {cfg_.n_latent_tokens, cfg_.d_model});

    for (std::size_t s = 0; s < steps; ++s) {
      int t = static_cast<int>(steps - 1 - s);
      result.latents.push_back(x);
      result.latent_timesteps.push_back(t);

      std::map<PositionId, std::vector<Tensor>> step_acts;
      std::vector<Tensor> eps(branches);
      for (std::size_t b = 0; b < branches; ++b) {
        eps[b] = trunk_forward(x, text[b], t, s, b, interventions, hooks, step_acts);
      }
      Tensor eps_hat = eps[0];
      if (cfg_.use_cfg) {
        // eps = eps_uncond + g * (eps_cond - eps_uncond)
        for (std::size_t i = 0; i < eps_hat.size(); ++i) {
          eps_hat[i] = eps[1][i] + cfg_.guidance * (eps[0][i] - eps[1][i]);
        }
      }
      for (auto& [pos, acts] : step_acts) maybe_capture(result, pos, acts, t, hooks);

      // Ancestral update toward x_{t-1}.
      double beta = betas[static_cast<std::size_t>(t)];
      double ab = alpha_bar(betas, static_cast<std::size_t>(t));
      double coef = beta / std::sqrt(1.0 - ab);
      double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - beta);
      Tensor next(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) {
        next[i] = static_cast<float>(inv_sqrt_alpha * (x[i] - coef * eps_hat[i]));
      }
      if (t > 0) {
        double ab_prev = alpha_bar(betas, static_cast<std::size_t>(t - 1));
        double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
        Tensor z = seeded_gaussian(rng, x.shape());
        for (std::size_t i = 0; i < next.size(); ++i) {
          next[i] += static_cast<float>(sigma) * z[i];
        }
      }
      next.validate_finite();
      x = next;
    }
    result.final_latent = x;
    return result;
  }

 private:
  void check_position(const PositionId& pos) const {
    switch (pos.family) {
      case PositionFamily::TextEncoder:
        if (pos.index != 0) throw ConfigError("unknown hook path: " + pos.dotted_path());
        return;
      case PositionFamily::DoubleStream:
        if (pos.index >= cfg_.n_double_blocks)
          throw ConfigError("unknown hook path: " + pos.dotted_path());
        return;
      case PositionFamily::SingleStream:
        if (pos.index >= cfg_.n_single_blocks)
          throw ConfigError("unknown hook path: " + pos.dotted_path());
        return;
    }
  }

  static void maybe_capture(DenoiseResult& result, const PositionId& pos,
                            const std::vector<Tensor>& branch_acts, int timestep,
                            const std::vector<PositionId>& hooks) {
    if (std::find(hooks.begin(), hooks.end(), pos) == hooks.end()) return;
    std::size_t branches = branch_acts.size();
    std::size_t tokens = branch_acts[0].dim(0), d = branch_acts[0].dim(1);
    Tensor stacked({branches, tokens, d});
    for (std::size_t b = 0; b < branches; ++b)
      for (std::size_t i = 0; i < tokens; ++i)
        for (std::size_t j = 0; j < d; ++j) stacked.at3(b, i, j) = branch_acts[b].at2(i, j);
    auto& cap = result.captures[pos];
    cap.steps.push_back(std::move(stacked));
    cap.timesteps.push_back(timestep);
  }

  // Runs the trunk for one branch; records (possibly steered) block outputs
  // into step_acts so downstream consumers and hooks see the same tensors.
  Tensor trunk_forward(const Tensor& x_t, const Tensor& c_text, int timestep,
                       std::size_t step_index, std::size_t branch,
                       const std::map<PositionId, Intervention>& interventions,
                       const std::vector<PositionId>& hooks,
                       std::map<PositionId, std::vector<Tensor>>& step_acts) const {
    Tensor x({cfg_.n_latent_tokens, cfg_.d_model});
    Tensor t_emb = timestep_embedding(timestep);
    for (std::size_t i = 0; i < cfg_.n_latent_tokens; ++i)
      for (std::size_t j = 0; j < cfg_.d_model; ++j) x.at2(i, j) = x_t.at2(i, j) + t_emb[j];
    Tensor c = c_text;

    auto touch = [&](const PositionId& pos, Tensor& act) {
      if (auto it = interventions.find(pos); it != interventions.end()) {
        Tensor steered = it->second(act, step_index, timestep);
        require_same_shape(steered, act, "intervention");
        act = std::move(steered);
      }
      if (std::find(hooks.begin(), hooks.end(), pos) != hooks.end()) {
        auto& v = step_acts[pos];
        if (v.size() != branch) throw ConfigError("hook capture out of branch order");
        v.push_back(act);
      }
    };

    for (std::size_t i = 0; i < cfg_.n_double_blocks; ++i) {
      auto [xo, co] = double_stream_step(x, c, double_blocks_[i]);
      x = std::move(xo);
      c = std::move(co);
      // The first tuple branch (latent stream) is the cached/steered tensor.
      touch({PositionFamily::DoubleStream, i}, x);
    }
    Tensor s({cfg_.n_latent_tokens + cfg_.n_text_tokens, cfg_.d_model});
    for (std::size_t i = 0; i < cfg_.n_latent_tokens; ++i)
      for (std::size_t j = 0; j < cfg_.d_model; ++j) s.at2(i, j) = x.at2(i, j);
    for (std::size_t i = 0; i < cfg_.n_text_tokens; ++i)
      for (std::size_t j = 0; j < cfg_.d_model; ++j)
        s.at2(cfg_.n_latent_tokens + i, j) = c.at2(i, j);
    for (std::size_t i = 0; i < cfg_.n_single_blocks; ++i) {
      s = single_stream_step(s, single_blocks_[i]);
      touch({PositionFamily::SingleStream, i}, s);
    }
    Tensor head({cfg_.n_latent_tokens, cfg_.d_model});
    for (std::size_t i = 0; i < cfg_.n_latent_tokens; ++i)
      for (std::size_t j = 0; j < cfg_.d_model; ++j) head.at2(i, j) = s.at2(i, j);
    return matmul(head, w_out_);
  }

  Tensor timestep_embedding(int t) const {
    Tensor emb({cfg_.d_model});
    for (std::size_t j = 0; j < cfg_.d_model; ++j) {
      double freq = std::pow(10000.0, -2.0 * static_cast<double>(j / 2) /
                                          static_cast<double>(cfg_.d_model));
      double arg = static_cast<double>(t) * freq;
      emb[j] = static_cast<float>(j % 2 == 0 ? std::sin(arg) : std::cos(arg));
    }
    return emb;
  }

  ToyDitConfig cfg_;
  Tensor token_embedding_, pos_embedding_;
  AttnWeights enc_attn_;
  MlpWeights enc_mlp_;
  std::vector<DoubleBlockWeights> double_blocks_;
  std::vector<SingleBlockWeights> single_blocks_;
  Tensor w_out_;
};

// ---------------------------------------------------------------------------
// Prompt CSV loader: prompt_id,text,category,polarity,pair_id
// ---------------------------------------------------------------------------

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  fields.push_back(cur);
  return fields;
}

inline std::vector<std::uint32_t> tokenize_text(const std::string& text, std::size_t vocab_size) {
  std::vector<std::uint32_t> tokens;
  std::istringstream in(text);
  std::string word;
  while (in >> word) {
    tokens.push_back(1 + static_cast<std::uint32_t>(fnv1a64(word) % (vocab_size - 1)));
  }
  return tokens;
}

inline std::vector<PromptSpec> load_prompt_csv(const fs::path& path, std::size_t vocab_size) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open prompt CSV: " + path.string());
  std::vector<PromptSpec> prompts;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (first) {
      first = false;
      if (!fields.empty() && fields[0] == "prompt_id") continue;  // header row
    }
    if (fields.size() != 5) {
      throw IoError(path.string() + ": expected 5 CSV columns, got " +
                    std::to_string(fields.size()));
    }
    PromptSpec p;
    p.prompt_id = std::stoll(fields[0]);
    p.tokens = tokenize_text(fields[1], vocab_size);
    if (p.tokens.empty()) throw IoError(path.string() + ": empty prompt text");
    p.category = fields[2];
    if (fields[3] == "safe") {
      p.polarity = Polarity::Safe;
    } else if (fields[3] == "harmful") {
      p.polarity = Polarity::Harmful;
    } else {
      throw IoError(path.string() + ": polarity must be safe|harmful, got " + fields[3]);
    }
    p.pair_id = std::stoll(fields[4]);
    prompts.push_back(std::move(p));
  }
  // Each pair id must map to exactly one safe and one harmful spec.
  std::map<std::int64_t, std::pair<int, int>> pairs;
  for (const auto& p : prompts) {
    if (p.pair_id < 0) continue;
    auto& [safe, harm] = pairs[p.pair_id];
    (p.polarity == Polarity::Safe ? safe : harm) += 1;
  }
  for (const auto& [id, counts] : pairs) {
    if (counts.first != 1 || counts.second != 1) {
      throw IoError(path.string() + ": pair_id " + std::to_string(id) +
                    " must have exactly one safe and one harmful prompt");
    }
  }
  return prompts;
}

}  // namespace safedig
