#pragma once

// Adam training over per-annotator samples.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "emphasis/dataset.hpp"
#include "emphasis/eval.hpp"
#include "emphasis/model.hpp"

namespace emphasis {

struct TrainConfig {
  double lr = 1e-4;
  std::size_t batch_size = 16;
  std::size_t epochs = 100;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  double dev_fraction = 0.1;     // sentence-level hold-out for checkpoint selection
  bool select_last = false;      // keep the last epoch instead of the dev-best one
  bool freeze_embeddings = false;
  std::size_t threads = 1;
  // Off unless set.
  double clip_norm = 0.0;
  double weight_decay = 0.0;
  double lr_decay = 1.0;  // multiplicative, per epoch
};

// A gradient or loss that is NaN/Inf; parameters keep their last finite state.
class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t t = 0;
};

using NamedParams = std::vector<std::pair<std::string, Tensor*>>;

// One bias-corrected Adam update over every parameter holding a gradient
// buffer. Nothing changes if any gradient is non-finite.
inline void adam_step(const NamedParams& params, AdamState& state, const TrainConfig& cfg, double lr) {
  if (state.m.empty()) {
    for (const auto& [name, t] : params) {
      state.m.emplace_back(t->size(), 0.0);
      state.v.emplace_back(t->size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam_step: optimizer state does not match parameters");
  double sq_norm = 0.0;
  for (const auto& [name, t] : params) {
    if (!t->has_grad()) continue;
    if (t->size() != t->grad().size()) throw ContractError("adam_step: gradient shape mismatch");
    for (double g : t->grad()) {
      if (!std::isfinite(g)) throw TrainingAborted("non-finite gradient in parameter '" + name + "'");
      sq_norm += g * g;
    }
  }
  const double clip = cfg.clip_norm > 0.0 && std::sqrt(sq_norm) > cfg.clip_norm ? cfg.clip_norm / std::sqrt(sq_norm) : 1.0;
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  const double b1 = cfg.beta1, b2 = cfg.beta2, eps = cfg.adam_eps, wd = cfg.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k].second;
    if (!p.has_grad()) continue;
    const auto size = static_cast<Eigen::Index>(p.size());
    Eigen::Map<Eigen::ArrayXd> theta(p.data().data(), size);
    Eigen::Map<const Eigen::ArrayXd> grad(p.grad().data(), size);
    Eigen::Map<Eigen::ArrayXd> m(state.m[k].data(), size);
    Eigen::Map<Eigen::ArrayXd> v(state.v[k].data(), size);
    if (clip == 1.0 && wd == 0.0) {
      m = b1 * m + (1.0 - b1) * grad;
      v = b2 * v + (1.0 - b2) * grad.square();
    } else {
      const Eigen::ArrayXd g = grad * clip + wd * theta;
      m = b1 * m + (1.0 - b1) * g;
      v = b2 * v + (1.0 - b2) * g.square();
    }
    theta -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
  }
}

// Seeded shuffle of sample indices, cut into batches of at most batch_size;
// within a batch, samples of the same sentence are made adjacent.
inline std::vector<std::vector<std::size_t>> make_batches(std::span<const TrainSample> samples, std::size_t batch_size,
                                                          std::uint64_t seed) {
  if (samples.empty()) throw ContractError("make_batches: no samples");
  if (batch_size == 0) throw ContractError("make_batches: batch size must be positive");
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + batch_size)));
    std::stable_sort(batch.begin(), batch.end(),
                     [&](std::size_t a, std::size_t b) { return samples[a].sentence < samples[b].sentence; });
    batches.push_back(std::move(batch));
  }
  return batches;
}

struct BatchResult {
  double loss = 0.0;              // sum over samples of per-sample NLL
  std::size_t forward_passes = 0;  // distinct sentences encoded
  std::size_t clamped = 0;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace detail

// Forward/backward for one batch; gradients (scaled by 1/|batch|) are
// accumulated into the parameters, which the caller zeroes beforehand.
// Each distinct sentence is encoded once and its annotator samples share
// that pass. The sentences of a batch run as one merged input, split into
// `threads` contiguous chunks when more than one worker is asked for; each
// chunk draws its dropout seed from `rng` in order.
inline BatchResult accumulate_batch(std::span<const Example> examples, std::span<const TrainSample> samples,
                                    std::span<const std::size_t> batch, Model& model, std::mt19937_64& rng,
                                    std::size_t threads = 1) {
  struct Group {
    std::size_t sentence;
    std::vector<std::size_t> members;
  };
  std::vector<Group> groups;
  for (auto s : batch) {
    if (groups.empty() || groups.back().sentence != samples[s].sentence) groups.push_back({samples[s].sentence, {}});
    groups.back().members.push_back(s);
  }
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  BatchResult result;
  result.forward_passes = groups.size();

  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, groups.size()));
  struct Chunk {
    std::size_t begin, end;
    std::uint64_t seed;
  };
  std::vector<Chunk> chunks;
  for (std::size_t w = 0; w < workers; ++w) {
    chunks.push_back({groups.size() * w / workers, groups.size() * (w + 1) / workers, rng()});
  }

  auto run_chunk = [&](const Chunk& c, Tape& tape, bool flush, std::size_t& clamped) {
    std::vector<const SentenceInput*> parts;
    for (std::size_t k = c.begin; k < c.end; ++k) parts.push_back(&examples[groups[k].sentence].input);
    const SentenceInput merged = merge_inputs(parts);
    std::mt19937_64 drop_rng(c.seed);
    ForwardOutput out = forward(tape, merged, model.params, model.config, Mode::train, &drop_rng);
    std::vector<Var> losses;
    for (std::size_t k = c.begin; k < c.end; ++k) {
      const std::size_t lo = merged.bounds[k - c.begin], hi = merged.bounds[k - c.begin + 1];
      std::vector<std::size_t> rows(hi - lo);
      std::iota(rows.begin(), rows.end(), lo);
      Var p = parts.size() == 1 ? out.p : ad::gather_rows(out.p, std::move(rows));
      std::vector<Var> own;
      for (auto s : groups[k].members) own.push_back(nll_loss(p, samples[s].labels, &clamped));
      Var total = own.size() == 1 ? own.front() : ad::sum(ad::concat_cols(own));
      if (!std::isfinite(total.value()[0])) {
        throw TrainingAborted("non-finite loss on sentence '" + examples[groups[k].sentence].id + "'");
      }
      losses.push_back(total);
    }
    Var total = losses.size() == 1 ? losses.front() : ad::sum(ad::concat_cols(losses));
    tape.backward(ad::scale(total, inv_batch), flush);
    return total.value()[0];
  };

  if (workers == 1) {
    Tape tape;
    result.loss = run_chunk(chunks[0], tape, true, result.clamped);
    return result;
  }
  std::vector<std::unique_ptr<Tape>> tapes(chunks.size());
  std::vector<double> losses(chunks.size(), 0.0);
  std::vector<std::size_t> clamps(chunks.size(), 0);
  std::vector<std::exception_ptr> errors(chunks.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < chunks.size(); ++w) {
    pool.emplace_back([&, w] {
      try {
        tapes[w] = std::make_unique<Tape>();
        losses[w] = run_chunk(chunks[w], *tapes[w], false, clamps[w]);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  for (std::size_t w = 0; w < chunks.size(); ++w) {
    tapes[w]->flush_param_grads();
    result.loss += losses[w];
    result.clamped += clamps[w];
  }
  return result;
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean per-sample NLL
  std::optional<MatchReport> dev;
};

// `epoch<TAB>train_loss<TAB>dev match1..4<TAB>dev average`; dev columns are
// "-" without a dev split.
inline std::string format_metrics_line(const EpochMetrics& m) {
  char buf[256];
  if (m.dev) {
    std::snprintf(buf, sizeof buf, "%zu\t%.6f\t%.4f\t%.4f\t%.4f\t%.4f\t%.4f", m.epoch, m.train_loss, m.dev->match[0],
                  m.dev->match[1], m.dev->match[2], m.dev->match[3], m.dev->average);
  } else {
    std::snprintf(buf, sizeof buf, "%zu\t%.6f\t-\t-\t-\t-\t-", m.epoch, m.train_loss);
  }
  return buf;
}

struct TrainResult {
  std::vector<EpochMetrics> log;
  std::size_t selected_epoch = 0;  // 0 = initial parameters
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

// Trains model.params in place. With a dev set and select_last unset, the
// parameters of the epoch with the best dev average are restored at the end.
inline TrainResult train_loop(std::span<const Example> train, std::span<const Example> dev, Model& model,
                              const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  if (!(cfg.lr > 0.0) || cfg.batch_size == 0) throw ContractError("train_loop: lr and batch size must be positive");
  if (!(model.config.dropout >= 0.0 && model.config.dropout < 1.0)) throw ContractError("train_loop: dropout must lie in [0,1)");
  TrainResult result;
  if (cfg.epochs == 0) return result;
  if (train.empty()) throw ContractError("train_loop: empty training set");

  std::vector<TrainSample> samples;
  for (std::size_t s = 0; s < train.size(); ++s) {
    for (std::size_t a = 0; a < kAnnotators; ++a) samples.push_back({s, a, train[s].annotations[a]});
  }
  model.params.word_embed.set_requires_grad(!cfg.freeze_embeddings);
  if (cfg.freeze_embeddings) model.params.word_embed.clear_grad();
  NamedParams params = model.params.named();
  AdamState adam;
  std::mt19937_64 dropout_rng(detail::mix_seed(cfg.seed, 1));
  std::optional<ModelParams> best;
  double best_avg = -1.0;
  double lr = cfg.lr;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto batches = make_batches(samples, cfg.batch_size, detail::mix_seed(cfg.seed, 1000 + epoch));
    double loss_sum = 0.0;
    for (const auto& batch : batches) {
      model.params.zero_grad();
      BatchResult br = accumulate_batch(train, samples, batch, model, dropout_rng, cfg.threads);
      adam_step(params, adam, cfg, lr);
      loss_sum += br.loss;
    }
    lr *= cfg.lr_decay;
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(samples.size());
    if (!dev.empty()) {
      m.dev = evaluate(dev, model, TieMode::strict, cfg.threads);
      if (!cfg.select_last && m.dev->average > best_avg) {
        best_avg = m.dev->average;
        best = model.params;
        result.selected_epoch = epoch;
      }
    }
    if (on_epoch) on_epoch(m);
    result.log.push_back(std::move(m));
  }
  model.params.zero_grad();
  if (best) {
    model.params = std::move(*best);
  } else {
    result.selected_epoch = cfg.epochs;
  }
  return result;
}

// Trains the structure-graph-only classifier (tag-node attention + head) and
// returns its tag-node embedding matrix, |tags| x ssg_dim.
inline Tensor pretrain_ssg(std::span<const Example> train, std::span<const Example> dev, const Model& base,
                           const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  Model ssg;
  ssg.config = base.config;
  ssg.config.variant = Variant::ssg_only;
  ssg.words = base.words;
  ssg.tags = base.tags;
  std::mt19937_64 rng(detail::mix_seed(cfg.seed, 7));
  ssg.params = init_params(ssg.config, ssg.words, ssg.tags.size(), nullptr, rng);
  ssg.params.node_embed = base.params.node_embed;
  ssg.params.node_embed.set_requires_grad(true);
  train_loop(train, dev, ssg, cfg, on_epoch);
  Tensor out = ssg.params.node_embed;
  out.clear_grad();
  return out;
}

}  // namespace emphasis
