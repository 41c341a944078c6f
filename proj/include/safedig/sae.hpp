#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "safedig/io.hpp"
#include "safedig/rng.hpp"
#include "safedig/tensor.hpp"

namespace safedig {

// Sparse autoencoder: z = ReLU(a W_enc + b_enc), a_hat = z W_dec + b_dec.
struct SaeModel {
  Tensor w_enc;  // (d, m)
  Tensor b_enc;  // (m)
  Tensor w_dec;  // (m, d)
  Tensor b_dec;  // (d)
  std::size_t expansion_factor = 4;

  std::size_t input_dim() const { return w_enc.dim(0); }
  std::size_t code_dim() const { return w_enc.dim(1); }

  // W_enc ~ uniform(+-1/sqrt(d)), W_dec initialized as the transpose, zero biases.
  static SaeModel init(std::size_t d, std::size_t expansion, std::uint64_t seed) {
    SaeModel m;
    m.expansion_factor = expansion;
    std::size_t code = d * expansion;
    float bound = 1.0f / std::sqrt(static_cast<float>(d));
    SeededRng rng(seed, fnv1a64("sae_init"));
    m.w_enc = seeded_uniform(rng, {d, code}, -bound, bound);
    m.w_dec = transpose(m.w_enc);
    m.b_enc = Tensor({code});
    m.b_dec = Tensor({d});
    return m;
  }

  Tensor encode(const Tensor& a) const {
    Tensor rows = a.rank() == 1 ? a.reshaped({1, a.size()}) : a;
    if (rows.dim(1) != input_dim()) throw ShapeError("sae encode: input width mismatch");
    Tensor z = matmul(rows, w_enc);
    for (std::size_t i = 0; i < z.dim(0); ++i) {
      for (std::size_t j = 0; j < z.dim(1); ++j) {
        float v = z.at2(i, j) + b_enc[j];
        z.at2(i, j) = v > 0.0f ? v : 0.0f;
      }
    }
    return a.rank() == 1 ? z.reshaped({z.size()}) : z;
  }

  Tensor decode(const Tensor& z) const {
    Tensor rows = z.rank() == 1 ? z.reshaped({1, z.size()}) : z;
    if (rows.dim(1) != code_dim()) throw ShapeError("sae decode: code width mismatch");
    Tensor a = matmul(rows, w_dec);
    for (std::size_t i = 0; i < a.dim(0); ++i)
      for (std::size_t j = 0; j < a.dim(1); ++j) a.at2(i, j) += b_dec[j];
    return z.rank() == 1 ? a.reshaped({a.size()}) : a;
  }

  Tensor reconstruct(const Tensor& a) const { return decode(encode(a)); }
};

struct TrainConfig {
  float lambda_l1 = 0.03125f;
  float lr = 0.01f;  // linear decay to zero, no warmup
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  std::uint64_t seed = 42;
  std::uint64_t dead_threshold = 1000;
  std::size_t grad_accumulation = 1;
  std::size_t sample_cap = 900;  // 0 disables the cap

  json to_json() const {
    return json{{"lambda_l1", lambda_l1},   {"lr", lr},
                {"epochs", epochs},         {"batch_size", batch_size},
                {"seed", seed},             {"dead_threshold", dead_threshold},
                {"grad_accumulation", grad_accumulation},
                {"sample_cap", sample_cap}};
  }

  void validate() const {
    if (lambda_l1 < 0.0f) throw ConfigError("sae: lambda_l1 must be >= 0");
    if (dead_threshold < 1) throw ConfigError("sae: dead_threshold must be >= 1");
    if (batch_size < 1 || grad_accumulation < 1)
      throw ConfigError("sae: batch_size and grad_accumulation must be >= 1");
  }
};

// Per-feature steps-since-last-activation counters; a feature is dead once
// its counter exceeds the threshold.
struct DeadFeatureLedger {
  std::uint64_t threshold = 1000;
  std::vector<std::uint64_t> steps_since_active;

  explicit DeadFeatureLedger(std::size_t features = 0, std::uint64_t thr = 1000)
      : threshold(thr), steps_since_active(features, 0) {}

  void observe_batch(const Tensor& z) {
    for (std::size_t j = 0; j < steps_since_active.size(); ++j) {
      bool active = false;
      for (std::size_t i = 0; i < z.dim(0) && !active; ++i) active = z.at2(i, j) > 0.0f;
      if (active) {
        steps_since_active[j] = 0;
      } else {
        steps_since_active[j] += 1;
      }
    }
  }

  std::vector<std::size_t> dead_features() const {
    std::vector<std::size_t> dead;
    for (std::size_t j = 0; j < steps_since_active.size(); ++j) {
      if (steps_since_active[j] > threshold) dead.push_back(j);
    }
    return dead;
  }
};

struct SaeGradients {
  std::vector<double> w_enc, b_enc, w_dec, b_dec;
};

// Mean squared reconstruction error plus lambda * mean code L1, with
// hand-derived gradients for all four parameter blocks (ReLU subgradient 0
// at 0). The forward/backward path runs in double so the analytic gradients
// line up with central finite differences at tight tolerance.
inline double sae_loss_and_grads(const SaeModel& m, const Tensor& batch, float lambda,
                                 SaeGradients* grads = nullptr) {
  if (batch.rank() != 2) throw ShapeError("sae loss: batch must be (n, d)");
  if (batch.dim(1) != m.input_dim()) throw ShapeError("sae loss: input width mismatch");
  const std::size_t n = batch.dim(0), d = m.input_dim(), code = m.code_dim();
  if (n == 0) throw ConfigError("sae loss: empty batch");

  if (grads) {
    grads->w_enc.assign(d * code, 0.0);
    grads->b_enc.assign(code, 0.0);
    grads->w_dec.assign(code * d, 0.0);
    grads->b_dec.assign(d, 0.0);
  }

  const double inv_n = 1.0 / static_cast<double>(n);
  double loss = 0.0;
  std::vector<double> pre(code), z(code), rec(d), drec(d), dz(code);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < code; ++k) {
      double acc = static_cast<double>(m.b_enc[k]);
      for (std::size_t j = 0; j < d; ++j) {
        acc += static_cast<double>(batch.at2(i, j)) * static_cast<double>(m.w_enc.at2(j, k));
      }
      pre[k] = acc;
      z[k] = acc > 0.0 ? acc : 0.0;
      loss += lambda * inv_n * z[k];
    }
    for (std::size_t j = 0; j < d; ++j) {
      double acc = static_cast<double>(m.b_dec[j]);
      for (std::size_t k = 0; k < code; ++k) {
        acc += z[k] * static_cast<double>(m.w_dec.at2(k, j));
      }
      rec[j] = acc;
      double r = acc - static_cast<double>(batch.at2(i, j));
      loss += inv_n * r * r;
      drec[j] = 2.0 * inv_n * r;
    }
    if (!grads) continue;
    for (std::size_t j = 0; j < d; ++j) grads->b_dec[j] += drec[j];
    for (std::size_t k = 0; k < code; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        grads->w_dec[k * d + j] += z[k] * drec[j];
        acc += drec[j] * static_cast<double>(m.w_dec.at2(k, j));
      }
      // L1 subgradient: codes are post-ReLU, so sign(z) is 1 where z > 0.
      dz[k] = acc + (z[k] > 0.0 ? lambda * inv_n : 0.0);
      double dpre = pre[k] > 0.0 ? dz[k] : 0.0;
      grads->b_enc[k] += dpre;
      for (std::size_t j = 0; j < d; ++j) {
        grads->w_enc[j * code + k] += static_cast<double>(batch.at2(i, j)) * dpre;
      }
    }
  }
  return loss;
}

struct TrainResult {
  SaeModel model;
  DeadFeatureLedger ledger;
  std::vector<double> step_losses;
};

// Plain SGD with linear LR decay to zero, optional gradient accumulation,
// deterministic per seed.
inline TrainResult sae_train(SaeModel model, const Tensor& dataset, const TrainConfig& cfg) {
  cfg.validate();
  if (dataset.rank() != 2) throw ShapeError("sae train: dataset must be (n, d)");
  if (dataset.dim(0) == 0) throw ConfigError("sae train: empty dataset");
  if (dataset.dim(1) != model.input_dim()) throw ShapeError("sae train: dataset width mismatch");

  std::size_t rows = dataset.dim(0);
  if (cfg.sample_cap > 0) rows = std::min(rows, cfg.sample_cap);
  const std::size_t d = model.input_dim(), code = model.code_dim();

  TrainResult result{std::move(model), DeadFeatureLedger(code, cfg.dead_threshold), {}};
  const std::size_t batches_per_epoch = (rows + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t steps_per_epoch =
      (batches_per_epoch + cfg.grad_accumulation - 1) / cfg.grad_accumulation;
  const std::size_t total_steps = cfg.epochs * steps_per_epoch;
  if (total_steps == 0) return result;

  SeededRng shuffle_rng(cfg.seed, fnv1a64("sae_shuffle"));
  std::size_t opt_step = 0;
  SaeGradients acc, cur;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = seeded_permutation(shuffle_rng, rows);
    std::size_t micro_in_step = 0;
    for (std::size_t b = 0; b < batches_per_epoch; ++b) {
      std::size_t begin = b * cfg.batch_size;
      std::size_t end = std::min(rows, begin + cfg.batch_size);
      Tensor batch({end - begin, d});
      for (std::size_t r = begin; r < end; ++r) {
        for (std::size_t j = 0; j < d; ++j) batch.at2(r - begin, j) = dataset.at2(order[r], j);
      }
      double loss = sae_loss_and_grads(result.model, batch, cfg.lambda_l1, &cur);
      result.step_losses.push_back(loss);
      result.ledger.observe_batch(result.model.encode(batch));

      if (micro_in_step == 0) {
        acc = cur;
      } else {
        for (std::size_t i = 0; i < acc.w_enc.size(); ++i) acc.w_enc[i] += cur.w_enc[i];
        for (std::size_t i = 0; i < acc.b_enc.size(); ++i) acc.b_enc[i] += cur.b_enc[i];
        for (std::size_t i = 0; i < acc.w_dec.size(); ++i) acc.w_dec[i] += cur.w_dec[i];
        for (std::size_t i = 0; i < acc.b_dec.size(); ++i) acc.b_dec[i] += cur.b_dec[i];
      }
      micro_in_step += 1;
      bool last_micro = micro_in_step == cfg.grad_accumulation || b + 1 == batches_per_epoch;
      if (!last_micro) continue;

      double lr = static_cast<double>(cfg.lr) *
                  (1.0 - static_cast<double>(opt_step) / static_cast<double>(total_steps));
      double inv_micro = 1.0 / static_cast<double>(micro_in_step);
      auto apply = [&](Tensor& p, const std::vector<double>& g) {
        for (std::size_t i = 0; i < p.size(); ++i) {
          p[i] = static_cast<float>(static_cast<double>(p[i]) - lr * inv_micro * g[i]);
        }
      };
      apply(result.model.w_enc, acc.w_enc);
      apply(result.model.b_enc, acc.b_enc);
      apply(result.model.w_dec, acc.w_dec);
      apply(result.model.b_dec, acc.b_dec);
      opt_step += 1;
      micro_in_step = 0;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints: same container framing as shards, dtype "f32"
// ---------------------------------------------------------------------------

inline void save_sae(const fs::path& path, const SaeModel& m, const json& extra = json::object()) {
  Container c;
  std::vector<std::uint8_t> payload;
  for (const Tensor* t : {&m.w_enc, &m.b_enc, &m.w_dec, &m.b_dec}) {
    auto bytes = f32_payload(*t);
    payload.insert(payload.end(), bytes.begin(), bytes.end());
  }
  c.header = json{{"kind", "sae"},
                  {"dtype", "f32"},
                  {"d", m.input_dim()},
                  {"m", m.code_dim()},
                  {"expansion_factor", m.expansion_factor},
                  {"checksum", hex64(fnv1a64(payload.data(), payload.size()))}};
  for (auto it = extra.begin(); it != extra.end(); ++it) c.header[it.key()] = it.value();
  c.payload = std::move(payload);
  write_container(path, c);
}

inline SaeModel load_sae(const fs::path& path, json* header_out = nullptr) {
  Container c = read_container(path);
  if (c.header.value("kind", "") != "sae") throw IoError(path.string() + ": not an SAE checkpoint");
  std::size_t d = c.header.at("d").get<std::size_t>();
  std::size_t code = c.header.at("m").get<std::size_t>();
  std::size_t expect = (d * code + code + code * d + d) * 4;
  if (c.payload.size() != expect) {
    throw IoError(path.string() + ": truncated checkpoint payload (" +
                  std::to_string(c.payload.size()) + " bytes, expected " +
                  std::to_string(expect) + ")");
  }
  if (hex64(fnv1a64(c.payload.data(), c.payload.size())) !=
      c.header.at("checksum").get<std::string>()) {
    throw IoError(path.string() + ": checkpoint checksum mismatch");
  }
  SaeModel m;
  m.expansion_factor = c.header.at("expansion_factor").get<std::size_t>();
  auto take = [&](std::size_t offset, std::vector<std::size_t> shape) {
    std::size_t bytes = Tensor::count(shape) * 4;
    std::vector<std::uint8_t> slice(c.payload.begin() + static_cast<std::ptrdiff_t>(offset),
                                    c.payload.begin() + static_cast<std::ptrdiff_t>(offset + bytes));
    return tensor_from_f32_payload(slice, std::move(shape), path.string());
  };
  std::size_t off = 0;
  m.w_enc = take(off, {d, code});
  off += d * code * 4;
  m.b_enc = take(off, {code});
  off += code * 4;
  m.w_dec = take(off, {code, d});
  off += code * d * 4;
  m.b_dec = take(off, {d});
  if (header_out) *header_out = c.header;
  return m;
}

}  // namespace safedig
