#pragma once

// Three-branch emphasis classifier.
//
//   sequence   : word + POS-tag embeddings -> stacked bidirectional GRU
//   similarity : word embeddings -> gated residual GCN over the WSG
//   structure  : tag-node embeddings -> masked self-attention over the SSG,
//                read out at each word's preterminal
//
// Per word, the kept branch outputs are concatenated and mapped by a
// one-hidden-layer network to a distribution over {B, I, O}.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "emphasis/autodiff.hpp"
#include "emphasis/corpus.hpp"
#include "emphasis/dropout.hpp"
#include "emphasis/parse_tree.hpp"
#include "emphasis/wsg.hpp"

namespace emphasis {

using ad::Tape;
using ad::Var;

// Which branches feed the head. `ssg_only` drops the sequence encoder as
// well and is used to pretrain the tag-node embeddings.
enum class Variant { full, no_wsg, no_ssg, no_both, ssg_only };

inline bool uses_sequence(Variant v) { return v != Variant::ssg_only; }
inline bool uses_wsg(Variant v) { return v == Variant::full || v == Variant::no_ssg; }
inline bool uses_ssg(Variant v) { return v == Variant::full || v == Variant::no_wsg || v == Variant::ssg_only; }

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::full:
      return "full";
    case Variant::no_wsg:
      return "no_wsg";
    case Variant::no_ssg:
      return "no_ssg";
    case Variant::no_both:
      return "no_both";
    case Variant::ssg_only:
      return "ssg_only";
  }
  return "?";
}

inline std::optional<Variant> variant_from_string(std::string_view s) {
  for (Variant v : {Variant::full, Variant::no_wsg, Variant::no_ssg, Variant::no_both, Variant::ssg_only}) {
    if (s == to_string(v)) return v;
  }
  return std::nullopt;
}

struct ModelConfig {
  std::size_t word_dim = 300;   // d1
  std::size_t tag_dim = 50;     // d2, POS-tag embedding fed to the GRU
  std::size_t hidden = 512;     // per GRU direction
  std::size_t ssg_dim = 300;    // SSG node embedding size
  std::size_t head_hidden = 256;
  std::size_t gru_layers = 2;
  std::size_t graph_layers = 2;
  double leaky_slope = 0.2;
  double dropout = 0.5;
  Variant variant = Variant::full;

  std::size_t head_input() const {
    std::size_t d = 0;
    if (uses_sequence(variant)) d += 2 * hidden;
    if (uses_ssg(variant)) d += ssg_dim;
    if (uses_wsg(variant)) d += word_dim;
    return d;
  }
};

// Word ids resolve like the embedding table: exact token, then lowercased.
// Id 0 is the out-of-vocabulary row.
class WordVocab {
 public:
  static constexpr std::size_t kUnknown = 0;
  static constexpr const char* kUnknownSymbol = "<unk>";

  WordVocab() { add(kUnknownSymbol); }

  std::size_t add(const std::string& word) {
    auto [it, inserted] = ids_.try_emplace(word, words_.size());
    if (inserted) words_.push_back(word);
    return it->second;
  }

  std::size_t id(std::string_view token) const {
    if (auto it = ids_.find(std::string(token)); it != ids_.end()) return it->second;
    if (auto it = ids_.find(ascii_lower(token)); it != ids_.end()) return it->second;
    return kUnknown;
  }

  bool contains(const std::string& word) const { return ids_.count(word) != 0; }
  const std::vector<std::string>& words() const { return words_; }
  std::size_t size() const { return words_.size(); }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::size_t> ids_;
};

// Gates packed as [update | reset | candidate] along the output axis.
struct GruWeights {
  Tensor W;     // d_in x 3H
  Tensor U_zr;  // H x 2H
  Tensor U_h;   // H x H
  Tensor b;     // 1 x 3H
};

struct GcnWeights {
  Tensor W;   // transform
  Tensor Wg;  // gate
};

struct AttentionWeights {
  Tensor Wk, Wq, Wv;
};

struct HeadWeights {
  Tensor W1, b1, W2, b2;
};

struct ModelParams {
  Tensor word_embed;  // |V| x d1
  Tensor tag_embed;   // |T| x d2
  Tensor node_embed;  // |T| x ssg_dim
  std::vector<std::array<GruWeights, 2>> gru;  // [layer][forward, backward]
  std::vector<GcnWeights> gcn;
  std::vector<AttentionWeights> attn;
  HeadWeights head;

  // Stable name order used by checkpoints and the optimizer.
  std::vector<std::pair<std::string, Tensor*>> named() {
    std::vector<std::pair<std::string, Tensor*>> out{
        {"word_embed", &word_embed}, {"tag_embed", &tag_embed}, {"node_embed", &node_embed}};
    for (std::size_t l = 0; l < gru.size(); ++l) {
      for (std::size_t d = 0; d < 2; ++d) {
        const std::string p = "gru.l" + std::to_string(l) + (d == 0 ? ".fwd." : ".bwd.");
        out.emplace_back(p + "W", &gru[l][d].W);
        out.emplace_back(p + "U_zr", &gru[l][d].U_zr);
        out.emplace_back(p + "U_h", &gru[l][d].U_h);
        out.emplace_back(p + "b", &gru[l][d].b);
      }
    }
    for (std::size_t l = 0; l < gcn.size(); ++l) {
      const std::string p = "gcn.l" + std::to_string(l) + ".";
      out.emplace_back(p + "W", &gcn[l].W);
      out.emplace_back(p + "Wg", &gcn[l].Wg);
    }
    for (std::size_t l = 0; l < attn.size(); ++l) {
      const std::string p = "attn.l" + std::to_string(l) + ".";
      out.emplace_back(p + "Wk", &attn[l].Wk);
      out.emplace_back(p + "Wq", &attn[l].Wq);
      out.emplace_back(p + "Wv", &attn[l].Wv);
    }
    out.emplace_back("head.W1", &head.W1);
    out.emplace_back("head.b1", &head.b1);
    out.emplace_back("head.W2", &head.W2);
    out.emplace_back("head.b2", &head.b2);
    return out;
  }

  void zero_grad() {
    for (auto& [name, t] : named()) t->zero_grad();
  }
};

// Everything needed to run the network: hyper-parameters, vocabularies and weights.
struct Model {
  ModelConfig config;
  WordVocab words;
  TagVocab tags;
  ModelParams params;
};

namespace detail {

inline Tensor glorot(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor t(Shape{fan_in, fan_out});
  for (double& v : t.data()) v = dist(rng);
  return t;
}

inline Tensor uniform(std::size_t rows, std::size_t cols, double limit, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor t(Shape{rows, cols});
  for (double& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace detail

// Vocabulary from the tokens of `records` that the table knows (under the
// key the table resolves them to).
inline WordVocab build_word_vocab(std::span<const SentenceRecord> records, const EmbeddingTable& table) {
  WordVocab vocab;
  for (const SentenceRecord& r : records) {
    for (const std::string& tok : r.tokens) {
      if (auto key = table.resolve(tok)) vocab.add(*key);
    }
  }
  return vocab;
}

// Adds rows for tokens of `records` that are in the table but not yet in the
// model vocabulary, initialised from the table.
inline std::size_t extend_vocabulary(Model& model, std::span<const SentenceRecord> records,
                                     const EmbeddingTable& table) {
  if (table.dim != model.config.word_dim) {
    throw ContractError("extend_vocabulary: table dimension " + std::to_string(table.dim) +
                        " does not match model word_dim " + std::to_string(model.config.word_dim));
  }
  std::vector<std::string> fresh;
  for (const SentenceRecord& r : records) {
    for (const std::string& tok : r.tokens) {
      auto key = table.resolve(tok);
      if (key && !model.words.contains(*key)) {
        model.words.add(*key);
        fresh.push_back(*key);
      }
    }
  }
  if (fresh.empty()) return 0;
  const Tensor& old = model.params.word_embed;
  Tensor grown(Shape{model.words.size(), model.config.word_dim});
  std::copy(old.data().begin(), old.data().end(), grown.data().begin());
  for (std::size_t k = 0; k < fresh.size(); ++k) {
    const auto& v = table.entries.at(fresh[k]);
    std::copy(v.begin(), v.end(), grown.row(old.rows() + k).begin());
  }
  grown.set_requires_grad(old.requires_grad());
  model.params.word_embed = std::move(grown);
  return fresh.size();
}

// Fan-balanced uniform weights, zero biases, word rows from the table.
inline ModelParams init_params(const ModelConfig& cfg, const WordVocab& words, std::size_t num_tags,
                               const EmbeddingTable* table, std::mt19937_64& rng) {
  ModelParams p;
  p.word_embed = Tensor(Shape{words.size(), cfg.word_dim});
  if (table) {
    if (table->dim != cfg.word_dim) {
      throw ContractError("init_params: embedding dimension " + std::to_string(table->dim) +
                          " does not match word_dim " + std::to_string(cfg.word_dim));
    }
    for (std::size_t i = 0; i < words.size(); ++i) {
      auto v = i == WordVocab::kUnknown ? std::span<const double>(table->oov_vector) : table->lookup(words.words()[i]);
      std::copy(v.begin(), v.end(), p.word_embed.row(i).begin());
    }
  } else {
    p.word_embed = detail::uniform(words.size(), cfg.word_dim, 0.1, rng);
  }
  p.tag_embed = detail::uniform(num_tags, cfg.tag_dim, 0.1, rng);
  p.node_embed = detail::uniform(num_tags, cfg.ssg_dim, 0.1, rng);

  const std::size_t H = cfg.hidden;
  p.gru.resize(cfg.gru_layers);
  for (std::size_t l = 0; l < cfg.gru_layers; ++l) {
    const std::size_t d_in = l == 0 ? cfg.word_dim + cfg.tag_dim : 2 * H;
    for (auto& g : p.gru[l]) {
      g.W = detail::glorot(d_in, 3 * H, rng);
      g.U_zr = detail::glorot(H, 2 * H, rng);
      g.U_h = detail::glorot(H, H, rng);
      g.b = Tensor(Shape{1, 3 * H});
    }
  }
  p.gcn.resize(cfg.graph_layers);
  for (auto& g : p.gcn) {
    g.W = detail::glorot(cfg.word_dim, cfg.word_dim, rng);
    g.Wg = detail::glorot(cfg.word_dim, cfg.word_dim, rng);
  }
  p.attn.resize(cfg.graph_layers);
  for (auto& a : p.attn) {
    a.Wk = detail::glorot(cfg.ssg_dim, cfg.ssg_dim, rng);
    a.Wq = detail::glorot(cfg.ssg_dim, cfg.ssg_dim, rng);
    a.Wv = detail::glorot(cfg.ssg_dim, cfg.ssg_dim, rng);
  }
  p.head.W1 = detail::glorot(cfg.head_input(), cfg.head_hidden, rng);
  p.head.b1 = Tensor(Shape{1, cfg.head_hidden});
  p.head.W2 = detail::glorot(cfg.head_hidden, kNumClasses, rng);
  p.head.b2 = Tensor(Shape{1, kNumClasses});
  for (auto& [name, t] : p.named()) t->set_requires_grad(true);
  return p;
}

// Per-sentence model input: ids plus both graphs. A merged batch (see
// merge_inputs) is the same thing with a disjoint-union SSG, a
// block-diagonal A_hat and the sentence boundaries in `bounds`.
struct SentenceInput {
  std::vector<std::size_t> word_ids;
  std::vector<std::size_t> pos_tag_ids;
  StructureGraph ssg;
  Tensor wsg_normalized;  // A_hat, n x n
  std::vector<std::size_t> bounds;  // empty for a single sentence
  std::size_t size() const { return word_ids.size(); }
};

// Aligns a record with its tree and builds both graphs. The WSG is computed
// from the static table vectors.
inline SentenceInput prepare_sentence(const SentenceRecord& record, const ParseTree& tree,
                                      const EmbeddingTable& table, const Model& model) {
  auto report = validate_alignment(tree, record.tokens);
  if (!report.ok) {
    throw ContractError("sentence" + (record.id.empty() ? std::string() : " '" + record.id + "'") + ": " +
                        report.describe());
  }
  SentenceInput in;
  for (const auto& tok : record.tokens) in.word_ids.push_back(model.words.id(tok));
  for (const auto& tag : derive_pos_tags(tree)) in.pos_tag_ids.push_back(model.tags.id(tag));
  in.ssg = build_ssg(tree, model.tags);
  in.wsg_normalized = build_wsg(lookup_sequence(record, table)).normalized;
  return in;
}

// Stacks sentences into one input whose forward pass equals the separate
// passes row for row.
inline SentenceInput merge_inputs(std::span<const SentenceInput* const> parts) {
  SentenceInput out;
  std::size_t words = 0;
  for (const SentenceInput* p : parts) {
    if (!p->bounds.empty()) throw ContractError("merge_inputs: input is already a merged batch");
    words += p->size();
  }
  out.wsg_normalized = Tensor(Shape{words, words});
  out.bounds.push_back(0);
  for (const SentenceInput* p : parts) {
    const std::size_t row0 = out.word_ids.size();
    const std::size_t node0 = out.ssg.num_nodes();
    out.word_ids.insert(out.word_ids.end(), p->word_ids.begin(), p->word_ids.end());
    out.pos_tag_ids.insert(out.pos_tag_ids.end(), p->pos_tag_ids.begin(), p->pos_tag_ids.end());
    const StructureGraph& g = p->ssg;
    out.ssg.node_tags.insert(out.ssg.node_tags.end(), g.node_tags.begin(), g.node_tags.end());
    out.ssg.node_symbols.insert(out.ssg.node_symbols.end(), g.node_symbols.begin(), g.node_symbols.end());
    for (auto [a, b] : g.edges) out.ssg.edges.emplace_back(a + node0, b + node0);
    for (const auto& nb : g.neighbors) {
      auto& dst = out.ssg.neighbors.emplace_back();
      for (auto j : nb) dst.push_back(j + node0);
    }
    for (auto w : g.word_alignment) out.ssg.word_alignment.push_back(w + node0);
    for (std::size_t i = 0; i < p->size(); ++i) {
      for (std::size_t j = 0; j < p->size(); ++j) out.wsg_normalized(row0 + i, row0 + j) = p->wsg_normalized(i, j);
    }
    out.bounds.push_back(out.word_ids.size());
  }
  return out;
}

// Tape handles of one direction's GRU weights.
struct GruVars {
  Var W, U_zr, U_h, b;
};

inline GruVars bind(Tape& tape, GruWeights& w) {
  return {tape.param(w.W), tape.param(w.U_zr), tape.param(w.U_h), tape.param(w.b)};
}

// One GRU step from a precomputed input projection x W + b (1 x 3H).
inline Var gru_step(Var x_proj, Var h_prev, const GruVars& w) {
  const std::size_t H = h_prev.value().cols();
  if (x_proj.value().cols() != 3 * H || w.U_zr.value().rows() != H) {
    throw DimensionError("gru_step: projection " + shape_str(x_proj.value().shape()) + " vs state " +
                         shape_str(h_prev.value().shape()));
  }
  Var zr = ad::sigmoid(ad::add(ad::slice_cols(x_proj, 0, 2 * H), ad::matmul(h_prev, w.U_zr)));
  Var z = ad::slice_cols(zr, 0, H);
  Var r = ad::slice_cols(zr, H, 2 * H);
  Var cand = ad::tanh(ad::add(ad::slice_cols(x_proj, 2 * H, 3 * H), ad::matmul(ad::mul(r, h_prev), w.U_h)));
  // (1 - z) * h_prev + z * cand
  return ad::add(h_prev, ad::mul(z, ad::sub(cand, h_prev)));
}

// z = s(W_z x + U_z h + b_z), r = s(W_r x + U_r h + b_r),
// h~ = tanh(W_h x + U_h (r * h) + b_h), h' = (1 - z) h + z h~.
inline Var gru_cell(Var x, Var h_prev, const GruVars& w) {
  if (x.value().cols() != w.W.value().rows()) {
    throw DimensionError("gru_cell: input " + shape_str(x.value().shape()) + " vs weights " +
                         shape_str(w.W.value().shape()));
  }
  return gru_step(ad::add(ad::matmul(x, w.W), w.b), h_prev, w);
}

// Same recurrence as chaining gru_step from a zero state, recorded as a
// single tape op. `bounds` splits the rows into independent sequences
// (first row of each, then the total); empty means one sequence. All
// sequences advance together, one matrix product per step, and the
// recurrent weight gradients take one product per call.
inline Var gru_sequence(Var x_proj, Var u_zr, Var u_h, bool reverse, std::span<const std::size_t> bounds = {}) {
  using ad::as_mat;
  using ad::RowMat;
  const std::size_t n = x_proj.value().rows();
  const std::size_t H = u_h.value().rows();
  if (x_proj.value().cols() != 3 * H || u_zr.value().rows() != H || u_zr.value().cols() != 2 * H ||
      u_h.value().cols() != H) {
    throw DimensionError("gru_sequence: projection " + shape_str(x_proj.value().shape()) + ", U_zr " +
                         shape_str(u_zr.value().shape()) + ", U_h " + shape_str(u_h.value().shape()));
  }
  std::vector<std::size_t> b(bounds.begin(), bounds.end());
  if (b.empty()) b = {0, n};
  if (b.size() < 2 || b.front() != 0 || b.back() != n || !std::is_sorted(b.begin(), b.end()) ||
      std::adjacent_find(b.begin(), b.end()) != b.end()) {
    throw ContractError("gru_sequence: sequence bounds must rise strictly from 0 to " + std::to_string(n));
  }
  // Sequences longest first, so the ones still running at step k are a prefix.
  std::vector<std::size_t> order(b.size() - 1);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return b[x + 1] - b[x] > b[y + 1] - b[y]; });
  const std::size_t steps = b[order[0] + 1] - b[order[0]];
  // rows[k] = row of each running sequence at step k, in `order`.
  auto rows = std::make_shared<std::vector<std::vector<Eigen::Index>>>(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    for (auto s : order) {
      const std::size_t len = b[s + 1] - b[s];
      if (len <= k) break;
      (*rows)[k].push_back(static_cast<Eigen::Index>(reverse ? b[s + 1] - 1 - k : b[s] + k));
    }
  }
  // Row t of each cache belongs to position t.
  struct Cache {
    RowMat h_prev, zr, cand, rh;
  };
  auto cache = std::make_shared<Cache>();
  cache->h_prev.setZero(n, H);
  cache->zr.resize(n, 2 * H);
  cache->cand.resize(n, H);
  cache->rh.resize(n, H);
  Tensor out(Shape{n, H});
  auto xp = as_mat(x_proj.value());
  auto U_zr = as_mat(u_zr.value());
  auto U_h = as_mat(u_h.value());
  auto Hout = as_mat(out);
  RowMat h = RowMat::Zero(static_cast<Eigen::Index>(order.size()), H);
  RowMat a, c, zr, rh, cand;
  for (std::size_t k = 0; k < steps; ++k) {
    const auto& r = (*rows)[k];
    const auto m = static_cast<Eigen::Index>(r.size());
    auto hs = h.topRows(m);
    a.noalias() = hs * U_zr;
    c.resize(m, H);
    for (Eigen::Index i = 0; i < m; ++i) {
      a.row(i) += xp.row(r[i]).head(2 * H);
      c.row(i) = xp.row(r[i]).tail(H);
    }
    zr = (1.0 + (-a.array()).exp()).inverse().matrix();
    rh = zr.rightCols(H).cwiseProduct(hs);
    c.noalias() += rh * U_h;
    cand = c.array().tanh().matrix();
    for (Eigen::Index i = 0; i < m; ++i) {
      cache->h_prev.row(r[i]) = hs.row(i);
      cache->zr.row(r[i]) = zr.row(i);
      cache->rh.row(r[i]) = rh.row(i);
      cache->cand.row(r[i]) = cand.row(i);
    }
    hs += zr.leftCols(H).cwiseProduct(cand - hs);
    for (Eigen::Index i = 0; i < m; ++i) Hout.row(r[i]) = hs.row(i);
  }
  const std::size_t xi = x_proj.id(), zi = u_zr.id(), hi = u_h.id();
  const auto seqs = static_cast<Eigen::Index>(order.size());
  return x_proj.tape()->record(
      std::move(out), {x_proj, u_zr, u_h}, [xi, zi, hi, n, H, seqs, rows, cache](Tape& tape, std::size_t self) {
        auto U_zr = as_mat(tape.value(zi));
        auto U_h = as_mat(tape.value(hi));
        auto dOut = as_mat(tape.grad(self), n, H);
        RowMat dA(n, 3 * H);  // gradients w.r.t. the pre-activations, [z | r | cand]
        RowMat carry = RowMat::Zero(seqs, H);
        RowMat dh, hp, zr, cand, dcand, drh, dzr;
        for (std::size_t k = rows->size(); k-- > 0;) {
          const auto& r = (*rows)[k];
          const auto m = static_cast<Eigen::Index>(r.size());
          dh.resize(m, H);
          hp.resize(m, H);
          zr.resize(m, 2 * H);
          cand.resize(m, H);
          for (Eigen::Index i = 0; i < m; ++i) {
            dh.row(i) = dOut.row(r[i]) + carry.row(i);
            hp.row(i) = cache->h_prev.row(r[i]);
            zr.row(i) = cache->zr.row(r[i]);
            cand.row(i) = cache->cand.row(r[i]);
          }
          auto z = zr.leftCols(H).array();
          auto rr = zr.rightCols(H).array();
          dcand = (dh.array() * z * (1.0 - cand.array().square())).matrix();
          drh.noalias() = dcand * U_h.transpose();
          dzr.resize(m, 2 * H);
          dzr.leftCols(H) = (dh.array() * (cand - hp).array() * z * (1.0 - z)).matrix();
          dzr.rightCols(H) = (drh.array() * hp.array() * rr * (1.0 - rr)).matrix();
          auto next = carry.topRows(m);
          next = (dh.array() * (1.0 - z) + drh.array() * rr).matrix();
          next.noalias() += dzr * U_zr.transpose();
          for (Eigen::Index i = 0; i < m; ++i) {
            dA.row(r[i]).head(2 * H) = dzr.row(i);
            dA.row(r[i]).tail(H) = dcand.row(i);
          }
        }
        if (auto g = tape.grad(xi); !g.empty()) as_mat(g, n, 3 * H) += dA;
        if (auto g = tape.grad(zi); !g.empty()) {
          as_mat(g, H, 2 * H).noalias() += cache->h_prev.transpose() * dA.leftCols(2 * H);
        }
        if (auto g = tape.grad(hi); !g.empty()) {
          as_mat(g, H, H).noalias() += cache->rh.transpose() * dA.rightCols(H);
        }
      });
}

// Runs one direction over all rows of x; output row t is the state after
// reading position t.
inline Var gru_direction(Var x, const GruVars& w, bool reverse, std::span<const std::size_t> bounds = {}) {
  Var proj = ad::add(ad::matmul(x, w.W), w.b);
  return gru_sequence(proj, w.U_zr, w.U_h, reverse, bounds);
}

// Reference path for gru_direction built from gru_step; used by tests.
inline Var gru_direction_stepwise(Var x, const GruVars& w, bool reverse) {
  Tape& tape = *x.tape();
  const std::size_t n = x.value().rows();
  const std::size_t H = w.U_h.value().rows();
  Var proj = ad::add(ad::matmul(x, w.W), w.b);
  Var h = tape.constant(Tensor(Shape{1, H}));
  std::vector<Var> states(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t t = reverse ? n - 1 - k : k;
    h = gru_step(ad::gather_rows(proj, {t}), h, w);
    states[t] = h;
  }
  return ad::concat_rows(states);
}

inline Var apply_dropout(Var x, double rate, Mode mode, std::mt19937_64* rng) {
  if (mode == Mode::eval || rate == 0.0) return x;
  if (!rng) throw ContractError("dropout in train mode needs a random generator");
  return ad::mul(x, x.tape()->constant(dropout_mask(x.value().shape(), rate, *rng, mode)));
}

// Stacked bidirectional GRU over [word_i, tag_i]; row i of the result is
// [forward state, backward state] of the top layer.
inline Var encode_sequence(Var words, Var tags, ModelParams& params, const ModelConfig& cfg, Mode mode,
                           std::mt19937_64* rng, std::span<const std::size_t> bounds = {}) {
  Tape& tape = *words.tape();
  Var x = ad::concat_cols({words, tags});
  for (std::size_t l = 0; l < params.gru.size(); ++l) {
    GruVars fw = bind(tape, params.gru[l][0]);
    GruVars bw = bind(tape, params.gru[l][1]);
    Var out = ad::concat_cols({gru_direction(x, fw, false, bounds), gru_direction(x, bw, true, bounds)});
    if (l + 1 < params.gru.size()) out = apply_dropout(out, cfg.dropout, mode, rng);
    x = out;
  }
  return x;
}

// H' = leaky_relu(M + (A_hat M) * C) with M = H W and C = sigmoid(H Wg).
// `gate_override` replaces C by a constant (test hook).
inline Var gcn_gated_layer(Var h, Var a_hat, Var w, Var w_gate, double slope,
                           std::optional<double> gate_override = std::nullopt) {
  Var m = ad::matmul(h, w);
  Var gate = gate_override ? h.tape()->constant(Tensor(m.value().shape(), *gate_override))
                           : ad::sigmoid(ad::matmul(h, w_gate));
  return ad::leaky_relu(ad::add(m, ad::mul(ad::matmul(a_hat, m), gate)), slope);
}

// Masked self-attention: node i attends only to neighbors[i], with scores
// q_i . k_j (unscaled) and values v_j.
inline Var graph_attention_layer(Var v, const std::vector<std::vector<std::size_t>>& neighbors, Var w_k, Var w_q,
                                 Var w_v) {
  if (neighbors.size() != v.value().rows()) {
    throw DimensionError("graph_attention_layer: " + std::to_string(neighbors.size()) + " neighbour lists for " +
                         shape_str(v.value().shape()) + " node states");
  }
  for (std::size_t i = 0; i < neighbors.size(); ++i) {
    if (neighbors[i].empty()) {
      throw ContractError("graph_attention_layer: node " + std::to_string(i) + " has no neighbours (missing self-loop)");
    }
  }
  Var keys = ad::matmul(v, w_k);
  Var queries = ad::matmul(v, w_q);
  Var values = ad::matmul(v, w_v);
  Var weights = ad::masked_softmax_rows(ad::matmul(queries, ad::transpose(keys)), neighbors);
  return ad::matmul(weights, values);
}

// softmax(W2 leaky_relu(W1 x + b1) + b2) per row, dropout on x in training.
inline Var classify(Var features, HeadWeights& head, double slope, double dropout, Mode mode,
                    std::mt19937_64* rng) {
  Tape& tape = *features.tape();
  Var x = apply_dropout(features, dropout, mode, rng);
  Var hidden = ad::leaky_relu(ad::add(ad::matmul(x, tape.param(head.W1)), tape.param(head.b1)), slope);
  return ad::softmax_rows(ad::add(ad::matmul(hidden, tape.param(head.W2)), tape.param(head.b2)));
}

inline constexpr double kProbabilityFloor = 1e-12;

// -sum_i log p[i][y_i]; probabilities below 1e-12 are clamped (the clamp
// count is added to *clamped when given).
inline Var nll_loss(Var probs, std::span<const EmphasisLabel> labels, std::size_t* clamped = nullptr) {
  const Tensor& p = probs.value();
  if (p.rows() != labels.size() || p.cols() != kNumClasses) {
    throw DimensionError("nll_loss: probabilities " + shape_str(p.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  std::vector<std::size_t> cls(labels.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    cls[i] = static_cast<std::size_t>(labels[i]);
    double v = p(i, cls[i]);
    if (v < kProbabilityFloor) {
      v = kProbabilityFloor;
      if (clamped) ++*clamped;
    }
    loss -= std::log(v);
  }
  const std::size_t pi = probs.id();
  return probs.tape()->record(Tensor::scalar(loss), {probs}, [pi, cls](Tape& t, std::size_t self) {
    auto gp = t.grad(pi);
    if (gp.empty()) return;
    const Tensor& P = t.value(pi);
    const double g = t.grad(self)[0];
    for (std::size_t i = 0; i < cls.size(); ++i) {
      const double v = P(i, cls[i]);
      if (v >= kProbabilityFloor) gp[i * kNumClasses + cls[i]] -= g / v;
    }
  });
}

struct ForwardOutput {
  Var h;    // n x 2H, absent for ssg_only
  Var w_L;  // n x d1, absent without the WSG branch
  Var v_L;  // n x ssg_dim, absent without the SSG branch
  Var p;    // n x 3
};

inline ForwardOutput forward(Tape& tape, const SentenceInput& in, ModelParams& params, const ModelConfig& cfg,
                             Mode mode, std::mt19937_64* rng = nullptr) {
  if (in.word_ids.empty()) throw ContractError("forward: empty sentence");
  if (in.pos_tag_ids.size() != in.size() || in.ssg.word_alignment.size() != in.size()) {
    throw DimensionError("forward: sentence of " + std::to_string(in.size()) + " words has " +
                         std::to_string(in.pos_tag_ids.size()) + " tags and " +
                         std::to_string(in.ssg.word_alignment.size()) + " aligned tree nodes");
  }
  ForwardOutput out;
  std::vector<Var> parts;
  const bool need_words = uses_sequence(cfg.variant) || uses_wsg(cfg.variant);
  Var words;
  if (need_words) words = ad::gather_rows(tape.param(params.word_embed), in.word_ids);

  if (uses_sequence(cfg.variant)) {
    Var tags = ad::gather_rows(tape.param(params.tag_embed), in.pos_tag_ids);
    out.h = encode_sequence(words, tags, params, cfg, mode, rng, in.bounds);
    parts.push_back(out.h);
  }
  if (uses_ssg(cfg.variant)) {
    Var v = ad::gather_rows(tape.param(params.node_embed), in.ssg.node_tags);
    for (auto& layer : params.attn) {
      v = graph_attention_layer(v, in.ssg.neighbors, tape.param(layer.Wk), tape.param(layer.Wq),
                                tape.param(layer.Wv));
    }
    out.v_L = ad::gather_rows(v, in.ssg.word_alignment);
    parts.push_back(out.v_L);
  }
  if (uses_wsg(cfg.variant)) {
    Var a_hat = tape.constant(in.wsg_normalized);
    Var h = words;
    for (auto& layer : params.gcn) {
      h = gcn_gated_layer(h, a_hat, tape.param(layer.W), tape.param(layer.Wg), cfg.leaky_slope);
    }
    out.w_L = h;
    parts.push_back(out.w_L);
  }
  Var features = parts.size() == 1 ? parts.front() : ad::concat_cols(parts);
  out.p = classify(features, params.head, cfg.leaky_slope, cfg.dropout, mode, rng);
  return out;
}

// p(B) + p(I) per word.
inline std::vector<double> emphasis_scores(const Tensor& probs) {
  std::vector<double> s(probs.rows());
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = probs(i, static_cast<std::size_t>(EmphasisLabel::B)) + probs(i, static_cast<std::size_t>(EmphasisLabel::I));
  }
  return s;
}

// Eval-mode emphasis scores of one sentence.
inline std::vector<double> predict_scores(const SentenceInput& in, Model& model) {
  Tape tape;
  return emphasis_scores(forward(tape, in, model.params, model.config, Mode::eval).p.value());
}

}  // namespace emphasis
