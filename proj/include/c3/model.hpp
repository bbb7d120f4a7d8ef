#pragma once

// The group scorer: member and item embeddings form an unordered token set,
// a stack of masked multi-head self-attention + feed-forward layers with
// residual/layer-norm mixes them, mean pooling collapses the tokens, and a
// sigmoid head produces the interaction probability.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "c3/error.hpp"
#include "c3/numcore.hpp"
#include "c3/random.hpp"
#include "json.hpp"

namespace c3 {

struct ModelConfig {
  std::size_t dim = 32;
  std::size_t layers = 3;
  std::size_t heads = 2;
  std::size_t ff_dim = 0;  // 0 = 4·dim
  double dropout = 0.2;
  /// Whether the contrastive representation also averages the item token.
  bool contrastive_pool_includes_item = false;

  std::size_t ff() const { return ff_dim ? ff_dim : 4 * dim; }

  void validate() const {
    if (dim == 0 || heads == 0 || dim % heads != 0) throw ConfigError("embedding dim must be a positive multiple of heads");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0,1)");
  }

  /// ff_dim 0 and an explicit 4·dim describe the same model.
  bool operator==(const ModelConfig& o) const {
    return dim == o.dim && layers == o.layers && heads == o.heads && ff() == o.ff() && dropout == o.dropout &&
           contrastive_pool_includes_item == o.contrastive_pool_includes_item;
  }
};

struct EncoderLayer {
  Tensor wq, wk, wv, wo;  // d×d; head i owns columns [i·d/h, (i+1)·d/h) of wq/wk/wv
  Tensor w1, b1, w2, b2;  // feed-forward d→ff→d
  Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

class C3Model {
 public:
  ModelConfig config;
  std::size_t num_users = 0;
  std::size_t num_items = 0;
  Tensor user_emb;  // (M+1)×d, last row is padding
  Tensor item_emb;  // N×d
  std::vector<EncoderLayer> layers;
  Tensor head_w;    // d
  Tensor head_b;    // 1

  C3Model() = default;

  /// Uniform(−1/√d, 1/√d) weights and embeddings, zero biases, unit LN gains,
  /// zero padding row.
  C3Model(const ModelConfig& cfg, std::size_t users, std::size_t items, std::uint64_t seed)
      : config(cfg), num_users(users), num_items(items) {
    cfg.validate();
    const std::size_t d = cfg.dim, ff = cfg.ff();
    Rng rng(seed, "init");
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    auto uniform = [&](std::vector<std::size_t> shape) {
      Tensor t(std::move(shape));
      for (double& x : t.data) x = rng.uniform(-bound, bound);
      return t;
    };
    user_emb = uniform({users + 1, d});
    for (double& x : user_emb.row(users)) x = 0.0;
    item_emb = uniform({items, d});
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      EncoderLayer L;
      L.wq = uniform({d, d});
      L.wk = uniform({d, d});
      L.wv = uniform({d, d});
      L.wo = uniform({d, d});
      L.w1 = uniform({d, ff});
      L.b1 = Tensor::vector(ff);
      L.w2 = uniform({ff, d});
      L.b2 = Tensor::vector(d);
      L.ln1_gain = Tensor::vector(d, 1.0);
      L.ln1_bias = Tensor::vector(d);
      L.ln2_gain = Tensor::vector(d, 1.0);
      L.ln2_bias = Tensor::vector(d);
      layers.push_back(std::move(L));
    }
    head_w = uniform({d});
    head_b = Tensor::vector(1);
    for (Tensor* p : parameters()) p->enable_grad();
  }

  std::size_t padding_id() const { return num_users; }

  /// Every trainable tensor with a stable name, in checkpoint order.
  std::vector<std::pair<std::string, Tensor*>> named_parameters() {
    std::vector<std::pair<std::string, Tensor*>> out{{"user_emb", &user_emb}, {"item_emb", &item_emb}};
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& L = layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      for (auto [n, t] : std::initializer_list<std::pair<const char*, Tensor*>>{
               {"wq", &L.wq}, {"wk", &L.wk}, {"wv", &L.wv}, {"wo", &L.wo}, {"w1", &L.w1}, {"b1", &L.b1},
               {"w2", &L.w2}, {"b2", &L.b2}, {"ln1_gain", &L.ln1_gain}, {"ln1_bias", &L.ln1_bias},
               {"ln2_gain", &L.ln2_gain}, {"ln2_bias", &L.ln2_bias}})
        out.emplace_back(p + n, t);
    }
    out.emplace_back("head_w", &head_w);
    out.emplace_back("head_b", &head_b);
    return out;
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> out;
    for (auto& [name, t] : const_cast<C3Model*>(this)->named_parameters()) out.push_back(t);
    return out;
  }

  void zero_grad() {
    for (Tensor* p : parameters()) p->zero_grad();
  }

  bool parameters_equal(const C3Model& other) const {
    const auto a = parameters(), b = other.parameters();
    if (a.size() != b.size() || config != other.config) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i]->shape != b[i]->shape || a[i]->data != b[i]->data) return false;
    return true;
  }
};

// ---------------------------------------------------------------------------
// forward
//
// A trace may hold several examples stacked row-wise ("segments"). Linear
// layers, layer norms and dropout act per token on the stacked matrix;
// attention only mixes tokens inside one segment.

struct LayerTrace {
  Tensor input;                 // H^l
  Tensor q, k, v;               // projections
  std::vector<double> probs;    // per segment, per head: T×T attention weights
  Tensor attn;                  // concatenated heads
  Tensor mhsa;                  // attn·W^O
  Tensor mhsa_drop;
  std::vector<double> keep_attn;
  Tensor res1;                  // H^l + MHSA
  Tensor norm1;                 // H̃^l
  Tensor ff_lin, ff_pre, ff_act, ff_out_lin, ff_out;
  Tensor ff_drop;
  std::vector<double> keep_ff;
  Tensor res2;
};

struct ForwardTrace {
  std::vector<std::size_t> segments{0};  // row offsets, one more than the example count
  std::vector<std::size_t> token_ids;    // user id (padding id when masked) or item id
  std::vector<std::uint8_t> token_is_item;
  std::vector<std::uint8_t> token_mask;  // 1 = attended and pooled
  Tensor input;                          // H^0
  std::vector<LayerTrace> layers;
  Tensor output;                         // H^L

  std::size_t examples() const { return segments.size() - 1; }
  std::size_t tokens() const { return token_mask.size(); }
  std::size_t segment_size(std::size_t s) const { return segments[s + 1] - segments[s]; }
};

/// One (members, item) example. The item is always the last token.
struct ExampleInput {
  std::span<const std::size_t> members;
  std::span<const std::uint8_t> mask;
  std::size_t item;
};

/// Token matrix: member embeddings followed by the item embedding. Masked
/// member positions carry the padding embedding.
inline Tensor build_input(const C3Model& model, std::span<const std::size_t> member_ids,
                          std::span<const std::uint8_t> member_mask, std::size_t item_id) {
  if (member_ids.size() != member_mask.size()) throw DimensionError("build_input: ids and mask lengths differ");
  if (item_id >= model.num_items) throw DataError("build_input: item id out of range");
  std::size_t active = 0;
  for (const auto m : member_mask) active += m;
  if (active == 0) throw DataError("build_input: no unmasked member");
  const std::size_t d = model.config.dim;
  Tensor h = Tensor::matrix(member_ids.size() + 1, d);
  for (std::size_t j = 0; j < member_ids.size(); ++j) {
    std::size_t uid = model.padding_id();
    if (member_mask[j]) {
      if (member_ids[j] >= model.num_users) throw DataError("build_input: member id out of range");
      uid = member_ids[j];
    }
    const auto src = model.user_emb.row(uid);
    std::copy(src.begin(), src.end(), h.row(j).begin());
  }
  const auto src = model.item_emb.row(item_id);
  std::copy(src.begin(), src.end(), h.row(member_ids.size()).begin());
  return h;
}

/// Multi-head scaled dot-product attention within each segment; masked keys
/// get −∞ logits (probability exactly zero).
inline Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                               std::span<const std::uint8_t> key_mask, std::span<const std::size_t> segments,
                               std::vector<double>& probs) {
  const std::size_t d = q.cols(), dk = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  std::size_t prob_size = 0;
  for (std::size_t s = 0; s + 1 < segments.size(); ++s) {
    const std::size_t T = segments[s + 1] - segments[s];
    prob_size += heads * T * T;
  }
  probs.assign(prob_size, 0.0);
  Tensor out = Tensor::matrix(q.rows(), d);
  double* p = probs.data();
  for (std::size_t s = 0; s + 1 < segments.size(); ++s) {
    const std::size_t base = segments[s], T = segments[s + 1] - segments[s];
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dk;
      for (std::size_t i = 0; i < T; ++i, p += T) {
        const double* qi = q.data.data() + (base + i) * d + off;
        for (std::size_t j = 0; j < T; ++j) {
          if (!key_mask[base + j]) {
            p[j] = kNegInf;
            continue;
          }
          const double* kj = k.data.data() + (base + j) * d + off;
          double dot = 0.0;
          for (std::size_t c = 0; c < dk; ++c) dot += qi[c] * kj[c];
          p[j] = dot * scale;
        }
        softmax_inplace({p, T});
        double* oi = out.data.data() + (base + i) * d + off;
        for (std::size_t j = 0; j < T; ++j) {
          if (p[j] == 0.0) continue;
          const double* vj = v.data.data() + (base + j) * d + off;
          for (std::size_t c = 0; c < dk; ++c) oi[c] += p[j] * vj[c];
        }
      }
    }
  }
  return out;
}

/// Single-sequence form.
inline Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                               std::span<const std::uint8_t> key_mask, std::vector<double>& probs) {
  const std::size_t segments[2] = {0, q.rows()};
  return masked_attention(q, k, v, heads, key_mask, segments, probs);
}

inline void masked_attention_backward(Tensor& q, Tensor& k, Tensor& v, std::size_t heads,
                                      std::span<const std::size_t> segments, const std::vector<double>& probs,
                                      const Tensor& out) {
  const std::size_t d = q.cols(), dk = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<double> dp, dlogit;
  const double* p = probs.data();
  for (std::size_t s = 0; s + 1 < segments.size(); ++s) {
    const std::size_t base = segments[s], T = segments[s + 1] - segments[s];
    dp.assign(T, 0.0);
    dlogit.assign(T, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dk;
      for (std::size_t i = 0; i < T; ++i, p += T) {
        const double* dout = out.grad.data() + (base + i) * d + off;
        for (std::size_t j = 0; j < T; ++j) {
          double acc = 0.0;
          if (p[j] != 0.0) {
            const double* vj = v.data.data() + (base + j) * d + off;
            double* dvj = v.grad.data() + (base + j) * d + off;
            for (std::size_t c = 0; c < dk; ++c) {
              acc += dout[c] * vj[c];
              dvj[c] += p[j] * dout[c];
            }
          }
          dp[j] = acc;
          dlogit[j] = 0.0;
        }
        softmax_backward_row({p, T}, dp, dlogit);
        const double* qi = q.data.data() + (base + i) * d + off;
        double* dqi = q.grad.data() + (base + i) * d + off;
        for (std::size_t j = 0; j < T; ++j) {
          if (dlogit[j] == 0.0) continue;
          const double g = dlogit[j] * scale;
          const double* kj = k.data.data() + (base + j) * d + off;
          double* dkj = k.grad.data() + (base + j) * d + off;
          for (std::size_t c = 0; c < dk; ++c) {
            dqi[c] += g * kj[c];
            dkj[c] += g * qi[c];
          }
        }
      }
    }
  }
}

/// Runs the encoder stack over stacked segments. Dropout is active only when
/// `dropout_rng` is given.
inline ForwardTrace encoder_forward(const C3Model& model, Tensor h0, std::span<const std::uint8_t> token_mask,
                                    std::vector<std::size_t> segments, Rng* dropout_rng) {
  if (token_mask.size() != h0.rows()) throw DimensionError("encoder_forward: mask length differs from token count");
  if (segments.size() < 2 || segments.front() != 0 || segments.back() != h0.rows())
    throw DimensionError("encoder_forward: segments do not cover the token rows");
  ForwardTrace tr;
  tr.segments = std::move(segments);
  tr.token_mask.assign(token_mask.begin(), token_mask.end());
  tr.input = std::move(h0);
  const double rate = model.config.dropout;
  Tensor current = tr.input;
  tr.layers.resize(model.layers.size());
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const EncoderLayer& L = model.layers[l];
    LayerTrace& t = tr.layers[l];
    t.input = std::move(current);
    t.q = matmul(t.input, L.wq);
    t.k = matmul(t.input, L.wk);
    t.v = matmul(t.input, L.wv);
    t.attn = masked_attention(t.q, t.k, t.v, model.config.heads, token_mask, tr.segments, t.probs);
    t.mhsa = matmul(t.attn, L.wo);
    if (dropout_rng) {
      t.mhsa_drop = dropout(t.mhsa, rate, *dropout_rng, t.keep_attn);
    } else {
      t.mhsa_drop = t.mhsa;
      t.keep_attn.assign(t.mhsa.size(), 1.0);
    }
    t.res1 = add(t.input, t.mhsa_drop);
    t.norm1 = layer_norm(t.res1, L.ln1_gain, L.ln1_bias);
    t.ff_lin = matmul(t.norm1, L.w1);
    t.ff_pre = add_row_bias(t.ff_lin, L.b1);
    t.ff_act = relu(t.ff_pre);
    t.ff_out_lin = matmul(t.ff_act, L.w2);
    t.ff_out = add_row_bias(t.ff_out_lin, L.b2);
    if (dropout_rng) {
      t.ff_drop = dropout(t.ff_out, rate, *dropout_rng, t.keep_ff);
    } else {
      t.ff_drop = t.ff_out;
      t.keep_ff.assign(t.ff_out.size(), 1.0);
    }
    t.res2 = add(t.norm1, t.ff_drop);
    current = layer_norm(t.res2, L.ln2_gain, L.ln2_bias);
  }
  tr.output = std::move(current);
  require_finite(tr.output, "encoder output");
  return tr;
}

/// Single-sequence form.
inline ForwardTrace encoder_forward(const C3Model& model, Tensor h0, std::span<const std::uint8_t> token_mask,
                                    Rng* dropout_rng) {
  const std::size_t rows = h0.rows();
  return encoder_forward(model, std::move(h0), token_mask, {0, rows}, dropout_rng);
}

/// Stacks the examples and runs the encoder. With `compact`, masked members
/// are dropped instead of padded, which is equivalent and cheaper.
inline ForwardTrace forward_batch(const C3Model& model, std::span<const ExampleInput> examples, Rng* dropout_rng,
                                  bool compact = false) {
  const std::size_t d = model.config.dim;
  std::vector<std::size_t> segments{0};
  std::vector<std::size_t> ids;
  std::vector<std::uint8_t> is_item, mask;
  for (const ExampleInput& ex : examples) {
    if (ex.members.size() != ex.mask.size()) throw DimensionError("forward: ids and mask lengths differ");
    if (ex.item >= model.num_items) throw DataError("forward: item id out of range");
    std::size_t active = 0;
    for (std::size_t j = 0; j < ex.members.size(); ++j) {
      if (ex.mask[j]) {
        if (ex.members[j] >= model.num_users) throw DataError("forward: member id out of range");
        ++active;
      } else if (compact) {
        continue;
      }
      ids.push_back(ex.mask[j] ? ex.members[j] : model.padding_id());
      is_item.push_back(0);
      mask.push_back(ex.mask[j]);
    }
    if (active == 0) throw DataError("forward: no unmasked member");
    ids.push_back(ex.item);
    is_item.push_back(1);
    mask.push_back(1);
    segments.push_back(ids.size());
  }
  Tensor h0 = Tensor::matrix(ids.size(), d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const auto src = is_item[r] ? model.item_emb.row(ids[r]) : model.user_emb.row(ids[r]);
    std::copy(src.begin(), src.end(), h0.row(r).begin());
  }
  ForwardTrace tr = encoder_forward(model, std::move(h0), mask, std::move(segments), dropout_rng);
  tr.token_ids = std::move(ids);
  tr.token_is_item = std::move(is_item);
  return tr;
}

/// Full forward for one (members, item) example.
inline ForwardTrace forward(const C3Model& model, std::span<const std::size_t> member_ids,
                            std::span<const std::uint8_t> member_mask, std::size_t item_id, Rng* dropout_rng) {
  const ExampleInput ex{member_ids, member_mask, item_id};
  return forward_batch(model, {&ex, 1}, dropout_rng);
}

/// Sign pattern of every feed-forward pre-activation (the encoder's only kinks).
inline void append_relu_pattern(const ForwardTrace& tr, std::vector<std::uint8_t>& out) {
  for (const auto& t : tr.layers)
    for (const double x : t.ff_pre.data) out.push_back(x > 0.0 ? 1 : 0);
}

enum class Pooling { members_and_item, members_only };

inline bool pooled_row(const ForwardTrace& tr, std::size_t r, Pooling mode) {
  if (!tr.token_mask[r]) return false;
  return mode == Pooling::members_and_item || !tr.token_is_item[r];
}

/// Mean of the selected unmasked token states, one row per segment.
inline Tensor pool_segments(const ForwardTrace& tr, Pooling mode) {
  const std::size_t d = tr.output.cols();
  Tensor h = Tensor::matrix(tr.examples(), d);
  for (std::size_t s = 0; s < tr.examples(); ++s) {
    std::size_t count = 0;
    double* hs = h.data.data() + s * d;
    for (std::size_t r = tr.segments[s]; r < tr.segments[s + 1]; ++r) {
      if (!pooled_row(tr, r, mode)) continue;
      ++count;
      const double* o = tr.output.data.data() + r * d;
      for (std::size_t c = 0; c < d; ++c) hs[c] += o[c];
    }
    for (std::size_t c = 0; c < d; ++c) hs[c] /= static_cast<double>(count);
  }
  return h;
}

/// Pooled vector of a single-example trace.
inline Tensor pool(const ForwardTrace& tr, Pooling mode) {
  if (tr.examples() != 1) throw DimensionError("pool: trace holds more than one example");
  Tensor h = pool_segments(tr, mode);
  h.shape = {h.cols()};
  return h;
}

struct Scores {
  Tensor pooled;  // one h_{g,i} row per example
  std::vector<double> logits;
  std::vector<double> values;  // σ(W·h + b)
};

/// Mean over unmasked members plus the item token, affine head, sigmoid; per example.
inline Scores pool_and_score_all(const C3Model& model, const ForwardTrace& tr) {
  Scores s;
  s.pooled = pool_segments(tr, Pooling::members_and_item);
  const std::size_t d = s.pooled.cols();
  for (std::size_t e = 0; e < tr.examples(); ++e) {
    double z = model.head_b.data[0];
    for (std::size_t c = 0; c < d; ++c) z += model.head_w.data[c] * s.pooled(e, c);
    s.logits.push_back(z);
    s.values.push_back(sigmoid(z));
    require_finite(s.values.back(), "score");
  }
  return s;
}

struct Score {
  Tensor pooled;  // h_{g,i}
  double logit = 0.0;
  double value = 0.0;
};

inline Score pool_and_score(const C3Model& model, const ForwardTrace& tr) {
  if (tr.examples() != 1) throw DimensionError("pool_and_score: trace holds more than one example");
  Scores all = pool_and_score_all(model, tr);
  all.pooled.shape = {all.pooled.cols()};
  return {std::move(all.pooled), all.logits[0], all.values[0]};
}

inline double score(const C3Model& model, std::span<const std::size_t> member_ids,
                    std::span<const std::uint8_t> member_mask, std::size_t item_id) {
  return pool_and_score(model, forward(model, member_ids, member_mask, item_id, nullptr)).value;
}

/// Scores one member set against many items in a single stacked pass.
inline std::vector<double> score_items(const C3Model& model, std::span<const std::size_t> member_ids,
                                       std::span<const std::uint8_t> member_mask, std::span<const std::size_t> items) {
  std::vector<ExampleInput> ex;
  ex.reserve(items.size());
  for (const auto i : items) ex.push_back({member_ids, member_mask, i});
  if (ex.empty()) return {};
  return pool_and_score_all(model, forward_batch(model, ex, nullptr, true)).values;
}

inline Pooling contrastive_pooling(const C3Model& model) {
  return model.config.contrastive_pool_includes_item ? Pooling::members_and_item : Pooling::members_only;
}

/// Consensus representation h_{g'}: evaluation-mode encoder, mean over the
/// unmasked member tokens.
inline Tensor group_representation(const C3Model& model, std::span<const std::size_t> member_ids,
                                   std::span<const std::uint8_t> member_mask, std::size_t item_id) {
  return pool(forward(model, member_ids, member_mask, item_id, nullptr), contrastive_pooling(model));
}

// ---------------------------------------------------------------------------
// backward

/// Backpropagates tr.output.grad through the encoder into the model's
/// parameter and embedding gradients. The padding row and masked member rows
/// receive nothing.
inline void encoder_backward(C3Model& model, ForwardTrace& tr) {
  const std::size_t d = model.config.dim;
  if (!tr.output.has_grad()) return;
  Tensor* upstream = &tr.output;
  for (std::size_t li = model.layers.size(); li-- > 0;) {
    EncoderLayer& L = model.layers[li];
    LayerTrace& t = tr.layers[li];
    for (Tensor* x : {&t.input, &t.q, &t.k, &t.v, &t.attn, &t.mhsa, &t.mhsa_drop, &t.res1, &t.norm1, &t.ff_lin,
                      &t.ff_pre, &t.ff_act, &t.ff_out_lin, &t.ff_out, &t.ff_drop, &t.res2})
      x->enable_grad();
    layer_norm_backward(t.res2, L.ln2_gain, L.ln2_bias, *upstream);
    add_backward(t.norm1, t.ff_drop, t.res2);
    dropout_backward(t.ff_out, t.ff_drop, t.keep_ff);
    add_row_bias_backward(t.ff_out_lin, L.b2, t.ff_out);
    matmul_backward(t.ff_act, L.w2, t.ff_out_lin);
    relu_backward(t.ff_pre, t.ff_act);
    add_row_bias_backward(t.ff_lin, L.b1, t.ff_pre);
    matmul_backward(t.norm1, L.w1, t.ff_lin);
    layer_norm_backward(t.res1, L.ln1_gain, L.ln1_bias, t.norm1);
    add_backward(t.input, t.mhsa_drop, t.res1);
    dropout_backward(t.mhsa, t.mhsa_drop, t.keep_attn);
    matmul_backward(t.attn, L.wo, t.mhsa);
    masked_attention_backward(t.q, t.k, t.v, model.config.heads, tr.segments, t.probs, t.attn);
    matmul_backward(t.input, L.wq, t.q);
    matmul_backward(t.input, L.wk, t.k);
    matmul_backward(t.input, L.wv, t.v);
    upstream = &t.input;
  }
  const Tensor& dh0 = *upstream;
  for (std::size_t r = 0; r < tr.tokens(); ++r) {
    if (!tr.token_mask[r]) continue;
    Tensor& table = tr.token_is_item[r] ? model.item_emb : model.user_emb;
    double* g = table.grad.data() + tr.token_ids[r] * d;
    const double* src = dh0.grad.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) g[c] += src[c];
  }
}

/// Accumulates into tr.output.grad the gradient implied by d(pooled) (one row per example).
inline void pool_backward(ForwardTrace& tr, Pooling mode, const Tensor& d_pooled) {
  const std::size_t d = tr.output.cols();
  if (!tr.output.has_grad()) tr.output.enable_grad();
  for (std::size_t s = 0; s < tr.examples(); ++s) {
    std::size_t count = 0;
    for (std::size_t r = tr.segments[s]; r < tr.segments[s + 1]; ++r) count += pooled_row(tr, r, mode) ? 1 : 0;
    const double inv = 1.0 / static_cast<double>(count);
    for (std::size_t r = tr.segments[s]; r < tr.segments[s + 1]; ++r) {
      if (!pooled_row(tr, r, mode)) continue;
      for (std::size_t c = 0; c < d; ++c) tr.output.grad[r * d + c] += d_pooled(s, c) * inv;
    }
  }
}

/// Gradient of a loss w.r.t. each example's score: accumulates head gradients
/// and seeds tr.output.grad. Call encoder_backward afterwards.
inline void score_backward(C3Model& model, ForwardTrace& tr, const Scores& s, std::span<const double> d_values) {
  const std::size_t d = s.pooled.cols();
  Tensor d_pooled = Tensor::matrix(tr.examples(), d);
  for (std::size_t e = 0; e < tr.examples(); ++e) {
    const double d_logit = d_values[e] * s.values[e] * (1.0 - s.values[e]);
    model.head_b.grad[0] += d_logit;
    for (std::size_t c = 0; c < d; ++c) {
      model.head_w.grad[c] += d_logit * s.pooled(e, c);
      d_pooled(e, c) = d_logit * model.head_w.data[c];
    }
  }
  pool_backward(tr, Pooling::members_and_item, d_pooled);
}

// ---------------------------------------------------------------------------
// checkpoints: magic "C3CKPT\0\0", version byte, hyper block, named tensors.
// All integers are little-endian u64, all reals little-endian IEEE-754 f64.

inline constexpr char kCheckpointMagic[8] = {'C', '3', 'C', 'K', 'P', 'T', '\0', '\0'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f64(std::ostream& os, double x) { put_u64(os, std::bit_cast<std::uint64_t>(x)); }

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw DataError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

}  // namespace detail

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"dim", c.dim},         {"layers", c.layers},   {"heads", c.heads},
          {"ff_dim", c.ff()},     {"dropout", c.dropout}, {"contrastive_pool_includes_item", c.contrastive_pool_includes_item}};
}

inline void save_checkpoint(const C3Model& model, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint " + path.string());
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  os.put(static_cast<char>(kCheckpointVersion));
  const ModelConfig& c = model.config;
  for (const std::uint64_t v : {std::uint64_t(model.num_users), std::uint64_t(model.num_items), std::uint64_t(c.dim),
                                std::uint64_t(c.layers), std::uint64_t(c.heads), std::uint64_t(c.ff())})
    detail::put_u64(os, v);
  detail::put_f64(os, c.dropout);
  os.put(c.contrastive_pool_includes_item ? 1 : 0);
  auto named = const_cast<C3Model&>(model).named_parameters();
  detail::put_u64(os, named.size());
  for (const auto& [name, t] : named) {
    detail::put_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u64(os, t->shape.size());
    for (const auto s : t->shape) detail::put_u64(os, s);
    for (const double x : t->data) detail::put_f64(os, x);
  }
  if (!os) throw DataError("failed writing checkpoint " + path.string());
  std::ofstream side(path.string() + ".json");
  nlohmann::json j = to_json(c);
  j["num_users"] = model.num_users;
  j["num_items"] = model.num_items;
  j["format_version"] = kCheckpointVersion;
  side << j.dump(2) << '\n';
}

inline C3Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw DataError("not a checkpoint file");
  const int version = is.get();
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  ModelConfig c;
  const auto users = detail::get_u64(is);
  const auto items = detail::get_u64(is);
  c.dim = detail::get_u64(is);
  c.layers = detail::get_u64(is);
  c.heads = detail::get_u64(is);
  c.ff_dim = detail::get_u64(is);
  c.dropout = detail::get_f64(is);
  c.contrastive_pool_includes_item = is.get() == 1;
  C3Model model(c, users, items, 0);
  auto named = model.named_parameters();
  if (detail::get_u64(is) != named.size()) throw DataError("checkpoint tensor count mismatch");
  for (auto& [name, t] : named) {
    std::string stored(detail::get_u64(is), '\0');
    is.read(stored.data(), static_cast<std::streamsize>(stored.size()));
    if (stored != name) throw DataError("checkpoint tensor '" + stored + "' where '" + name + "' expected");
    std::vector<std::size_t> shape(detail::get_u64(is));
    for (auto& s : shape) s = detail::get_u64(is);
    if (shape != t->shape) throw DataError("checkpoint shape mismatch for " + name);
    for (double& x : t->data) x = detail::get_f64(is);
    require_finite(*t, "checkpoint tensor");
  }
  return model;
}

}  // namespace c3
