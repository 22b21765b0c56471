#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "avfuse/autodiff.hpp"
#include "avfuse/fusion.hpp"
#include "avfuse/rng.hpp"
#include "avfuse/tensor.hpp"

namespace avfuse {

struct ModelConfig {
  Index frames = 16;
  Index image_h = 224;
  Index image_w = 224;
  Index cube_t = 2;
  Index cube_h = 16;
  Index cube_w = 16;
  Index embed_dim = 1024;
  Index depth = 24;
  Index heads = 16;
  double mlp_ratio = 4.0;
  Index num_classes = 7;

  static ModelConfig full(Index num_classes = 7) {
    ModelConfig c;
    c.num_classes = num_classes;
    return c;
  }

  // Same structure at roughly 1e4x less compute; fits in a test budget.
  static ModelConfig desk(Index num_classes = 4) {
    ModelConfig c;
    c.image_h = c.image_w = 32;
    c.cube_h = c.cube_w = 8;
    c.embed_dim = 64;
    c.depth = 2;
    c.heads = 4;
    c.mlp_ratio = 1.0;
    c.num_classes = num_classes;
    return c;
  }

  Index slabs() const { return frames / cube_t; }
  Index grid_rows() const { return image_h / cube_h; }
  Index grid_cols() const { return image_w / cube_w; }
  Index tokens() const { return slabs() * grid_rows() * grid_cols(); }
  Index patch_dim() const { return cube_t * cube_h * cube_w; }
  Index head_dim() const { return embed_dim / heads; }
  Index mlp_dim() const { return static_cast<Index>(mlp_ratio * static_cast<double>(embed_dim)); }

  void validate() const {
    if (frames <= 0 || image_h <= 0 || image_w <= 0 || cube_t <= 0 || cube_h <= 0 || cube_w <= 0) {
      throw ContractError("model config: non-positive geometry");
    }
    if (frames % cube_t || image_h % cube_h || image_w % cube_w) {
      throw ContractError("model config: input " + std::to_string(frames) + "x" +
                          std::to_string(image_h) + "x" + std::to_string(image_w) +
                          " not divisible by cube " + std::to_string(cube_t) + "x" +
                          std::to_string(cube_h) + "x" + std::to_string(cube_w));
    }
    if (embed_dim <= 0 || depth < 0 || heads <= 0 || embed_dim % heads) {
      throw ContractError("model config: embed_dim must be positive and divisible by heads");
    }
    if (num_classes < 2) throw ContractError("model config: need at least 2 classes");
    if (mlp_dim() < 1) throw ContractError("model config: mlp_ratio too small");
  }
};

// ---- token geometry ----------------------------------------------------------
// Token order is temporal-slab-major, then grid row, then grid column.
// Within a cube, values are flattened (t, h, w) lexicographic, t outermost.

struct TokenCoord {
  Index slab, row, col;
};

inline TokenCoord token_coord(const ModelConfig& cfg, Index token) {
  const Index per_slab = cfg.grid_rows() * cfg.grid_cols();
  TokenCoord c;
  c.slab = token / per_slab;
  c.row = (token % per_slab) / cfg.grid_cols();
  c.col = token % cfg.grid_cols();
  return c;
}

inline Index token_index(const ModelConfig& cfg, Index slab, Index row, Index col) {
  return (slab * cfg.grid_rows() + row) * cfg.grid_cols() + col;
}

// Offset of pixel (dt, dh, dw) inside its cube's flattened token.
inline Index cube_offset(const ModelConfig& cfg, Index dt, Index dh, Index dw) {
  return (dt * cfg.cube_h + dh) * cfg.cube_w + dw;
}

// The (frame, row, col) a given token element came from.
struct PixelCoord {
  Index frame, row, col;
};

inline PixelCoord token_element_source(const ModelConfig& cfg, Index token, Index offset) {
  const TokenCoord tc = token_coord(cfg, token);
  PixelCoord p;
  p.frame = tc.slab * cfg.cube_t + offset / (cfg.cube_h * cfg.cube_w);
  p.row = tc.row * cfg.cube_h + (offset / cfg.cube_w) % cfg.cube_h;
  p.col = tc.col * cfg.cube_w + offset % cfg.cube_w;
  return p;
}

// Provenance of one token element, resolved through the fused sample's tags.
inline Modality token_element_modality(const ModelConfig& cfg, const FusedSample& sample,
                                       Index token, Index offset) {
  const PixelCoord p = token_element_source(cfg, token, offset);
  return sample.pixel_modality(p.frame, p.row);
}

// Whole-token provenance: visual/audio if every element agrees, mixed otherwise.
inline Modality token_modality(const ModelConfig& cfg, const FusedSample& sample, Index token) {
  Modality first = token_element_modality(cfg, sample, token, 0);
  for (Index o = 1; o < cfg.patch_dim(); ++o) {
    if (token_element_modality(cfg, sample, token, o) != first) return Modality::Mixed;
  }
  return first;
}

template <typename Scalar>
Tensor<Scalar> patchify(const Tensor<float>& x, const ModelConfig& cfg) {
  cfg.validate();
  if (x.rank() != 3 || x.dim(0) != cfg.frames || x.dim(1) != cfg.image_h || x.dim(2) != cfg.image_w) {
    throw ContractError("patchify: input " + shape_str(x.shape()) + " does not match configured " +
                        std::to_string(cfg.frames) + "x" + std::to_string(cfg.image_h) + "x" +
                        std::to_string(cfg.image_w));
  }
  Tensor<Scalar> tokens({cfg.tokens(), cfg.patch_dim()});
  for (Index n = 0; n < cfg.tokens(); ++n) {
    const TokenCoord tc = token_coord(cfg, n);
    Index o = 0;
    for (Index dt = 0; dt < cfg.cube_t; ++dt) {
      for (Index dh = 0; dh < cfg.cube_h; ++dh) {
        for (Index dw = 0; dw < cfg.cube_w; ++dw, ++o) {
          tokens(n, o) = static_cast<Scalar>(
              x(tc.slab * cfg.cube_t + dt, tc.row * cfg.cube_h + dh, tc.col * cfg.cube_w + dw));
        }
      }
    }
  }
  return tokens;
}

template <typename Scalar>
Tensor<float> unpatchify(const Tensor<Scalar>& tokens, const ModelConfig& cfg) {
  if (tokens.rank() != 2 || tokens.rows() != cfg.tokens() || tokens.cols() != cfg.patch_dim()) {
    throw ContractError("unpatchify: token grid " + shape_str(tokens.shape()) + " does not match config");
  }
  Tensor<float> x({cfg.frames, cfg.image_h, cfg.image_w});
  for (Index n = 0; n < cfg.tokens(); ++n) {
    for (Index o = 0; o < cfg.patch_dim(); ++o) {
      const PixelCoord p = token_element_source(cfg, n, o);
      x(p.frame, p.row, p.col) = static_cast<float>(tokens(n, o));
    }
  }
  return x;
}

// ---- parameters ----------------------------------------------------------------

template <typename Scalar>
struct BlockParams {
  Tensor<Scalar> ln1_gain, ln1_bias;
  Tensor<Scalar> q_weight, q_bias;
  Tensor<Scalar> k_weight, k_bias;
  Tensor<Scalar> v_weight, v_bias;
  Tensor<Scalar> out_weight, out_bias;
  Tensor<Scalar> ln2_gain, ln2_bias;
  Tensor<Scalar> fc1_weight, fc1_bias;
  Tensor<Scalar> fc2_weight, fc2_bias;
};

// Fixed sinusoidal position table over token index.
template <typename Scalar>
Tensor<Scalar> sinusoidal_positions(Index n, Index d) {
  Tensor<Scalar> pos({n, d});
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < d; j += 2) {
      const double rate = std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(d));
      const double ang = static_cast<double>(i) * rate;
      pos(i, j) = static_cast<Scalar>(std::sin(ang));
      if (j + 1 < d) pos(i, j + 1) = static_cast<Scalar>(std::cos(ang));
    }
  }
  return pos;
}

template <typename Scalar>
struct ModelParams {
  ModelConfig cfg;
  Tensor<Scalar> embed_weight;  // P x D
  Tensor<Scalar> embed_bias;    // D
  Tensor<Scalar> pos_embed;     // N x D, fixed (not trained)
  std::vector<BlockParams<Scalar>> blocks;
  Tensor<Scalar> head_weight;  // D x K
  Tensor<Scalar> head_bias;    // K

  // Truncated-normal (std 0.02, clipped at 2 std) weights, zero biases,
  // unit layer-norm gains. Deterministic for a given seed.
  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    SplitMix64 rng(seed);
    auto tn = [&rng](Shape shape) {
      Tensor<Scalar> t(std::move(shape));
      for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(rng.next_trunc_normal(0.02));
      t.requires_grad = true;
      return t;
    };
    auto zeros = [](Shape shape) {
      Tensor<Scalar> t(std::move(shape));
      t.requires_grad = true;
      return t;
    };
    auto ones_grad = [](Shape shape) {
      Tensor<Scalar> t = Tensor<Scalar>::ones(std::move(shape));
      t.requires_grad = true;
      return t;
    };

    const Index d = cfg.embed_dim, p = cfg.patch_dim(), m = cfg.mlp_dim(), k = cfg.num_classes;
    ModelParams out;
    out.cfg = cfg;
    out.embed_weight = tn({p, d});
    out.embed_bias = zeros({d});
    out.pos_embed = sinusoidal_positions<Scalar>(cfg.tokens(), d);
    out.blocks.resize(static_cast<std::size_t>(cfg.depth));
    for (auto& b : out.blocks) {
      b.ln1_gain = ones_grad({d});
      b.ln1_bias = zeros({d});
      b.q_weight = tn({d, d});
      b.q_bias = zeros({d});
      b.k_weight = tn({d, d});
      b.k_bias = zeros({d});
      b.v_weight = tn({d, d});
      b.v_bias = zeros({d});
      b.out_weight = tn({d, d});
      b.out_bias = zeros({d});
      b.ln2_gain = ones_grad({d});
      b.ln2_bias = zeros({d});
      b.fc1_weight = tn({d, m});
      b.fc1_bias = zeros({m});
      b.fc2_weight = tn({m, d});
      b.fc2_bias = zeros({d});
    }
    out.head_weight = tn({d, k});
    out.head_bias = zeros({k});
    return out;
  }

  // Visits every learned parameter with its canonical name, in a fixed order.
  // The gradient tape, the optimizer, and the weight files all rely on this
  // order; keep register_tape_model in sync.
  template <typename Fn>
  void for_each_param(Fn&& fn) {
    fn("embed.weight", embed_weight);
    fn("embed.bias", embed_bias);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "block" + std::to_string(i) + ".";
      auto& b = blocks[i];
      fn(p + "ln1.gain", b.ln1_gain);
      fn(p + "ln1.bias", b.ln1_bias);
      fn(p + "attn.q_weight", b.q_weight);
      fn(p + "attn.q_bias", b.q_bias);
      fn(p + "attn.k_weight", b.k_weight);
      fn(p + "attn.k_bias", b.k_bias);
      fn(p + "attn.v_weight", b.v_weight);
      fn(p + "attn.v_bias", b.v_bias);
      fn(p + "attn.out_weight", b.out_weight);
      fn(p + "attn.out_bias", b.out_bias);
      fn(p + "ln2.gain", b.ln2_gain);
      fn(p + "ln2.bias", b.ln2_bias);
      fn(p + "mlp.fc1_weight", b.fc1_weight);
      fn(p + "mlp.fc1_bias", b.fc1_bias);
      fn(p + "mlp.fc2_weight", b.fc2_weight);
      fn(p + "mlp.fc2_bias", b.fc2_bias);
    }
    fn("head.weight", head_weight);
    fn("head.bias", head_bias);
  }

  template <typename Fn>
  void for_each_param(Fn&& fn) const {
    const_cast<ModelParams*>(this)->for_each_param(
        [&fn](const std::string& name, Tensor<Scalar>& t) { fn(name, const_cast<const Tensor<Scalar>&>(t)); });
  }

  std::vector<Tensor<Scalar>*> param_list() {
    std::vector<Tensor<Scalar>*> out;
    for_each_param([&out](const std::string&, Tensor<Scalar>& t) { out.push_back(&t); });
    return out;
  }

  Index param_count() const {
    Index n = 0;
    for_each_param([&n](const std::string&, const Tensor<Scalar>& t) { n += t.size(); });
    return n;
  }

  template <typename Other>
  ModelParams<Other> cast() const {
    ModelParams<Other> out;
    out.cfg = cfg;
    out.embed_weight = embed_weight.template cast<Other>();
    out.embed_bias = embed_bias.template cast<Other>();
    out.pos_embed = pos_embed.template cast<Other>();
    out.blocks.resize(blocks.size());
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const auto& s = blocks[i];
      auto& t = out.blocks[i];
      t.ln1_gain = s.ln1_gain.template cast<Other>();
      t.ln1_bias = s.ln1_bias.template cast<Other>();
      t.q_weight = s.q_weight.template cast<Other>();
      t.q_bias = s.q_bias.template cast<Other>();
      t.k_weight = s.k_weight.template cast<Other>();
      t.k_bias = s.k_bias.template cast<Other>();
      t.v_weight = s.v_weight.template cast<Other>();
      t.v_bias = s.v_bias.template cast<Other>();
      t.out_weight = s.out_weight.template cast<Other>();
      t.out_bias = s.out_bias.template cast<Other>();
      t.ln2_gain = s.ln2_gain.template cast<Other>();
      t.ln2_bias = s.ln2_bias.template cast<Other>();
      t.fc1_weight = s.fc1_weight.template cast<Other>();
      t.fc1_bias = s.fc1_bias.template cast<Other>();
      t.fc2_weight = s.fc2_weight.template cast<Other>();
      t.fc2_bias = s.fc2_bias.template cast<Other>();
    }
    out.head_weight = head_weight.template cast<Other>();
    out.head_bias = head_bias.template cast<Other>();
    out.for_each_param([](const std::string&, Tensor<Other>& t) { t.requires_grad = true; });
    out.pos_embed.requires_grad = false;
    return out;
  }
};

// ---- plain forward with a reusable trace ------------------------------------

template <typename Scalar>
struct BlockTrace {
  Tensor<Scalar> input;       // residual stream entering the block
  Tensor<Scalar> ln1;         // after first layer norm
  Tensor<Scalar> q, k, v;     // projections incl. bias
  std::vector<Tensor<Scalar>> probs;  // per-head attention rows
  Tensor<Scalar> ctx;         // heads re-concatenated
  Tensor<Scalar> after_attn;  // input + attention output
  Tensor<Scalar> ln2;
  Tensor<Scalar> mlp_pre;     // fc1 output before the nonlinearity
  Tensor<Scalar> output;      // block result
};

template <typename Scalar>
struct ForwardTrace {
  Tensor<Scalar> embedded;  // tokens * W + b + positions
  std::vector<BlockTrace<Scalar>> blocks;
  Tensor<Scalar> features;  // encoder output F
  Tensor<Scalar> pooled;    // 1 x D
  Tensor<Scalar> logits;    // 1 x K
};

template <typename Scalar>
Tensor<Scalar> embed_tokens(const ModelParams<Scalar>& params, const Tensor<Scalar>& tokens) {
  if (tokens.rank() != 2 || tokens.cols() != params.cfg.patch_dim() ||
      tokens.rows() != params.cfg.tokens()) {
    throw ContractError("embed: token grid " + shape_str(tokens.shape()) + " does not match config (" +
                        std::to_string(params.cfg.tokens()) + "x" +
                        std::to_string(params.cfg.patch_dim()) + ")");
  }
  Tensor<Scalar> x = add_bias_rows_value(matmul_value(tokens, params.embed_weight), params.embed_bias);
  return add_value(x, params.pos_embed);
}

template <typename Scalar>
Tensor<Scalar> block_forward(const ModelConfig& cfg, const BlockParams<Scalar>& b,
                             const Tensor<Scalar>& x, BlockTrace<Scalar>* trace = nullptr) {
  const Index dh = cfg.head_dim();
  const Scalar att_scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  Tensor<Scalar> ln1 = layer_norm_rows_value(x, b.ln1_gain, b.ln1_bias, Scalar(1e-5));
  Tensor<Scalar> q = add_bias_rows_value(matmul_value(ln1, b.q_weight), b.q_bias);
  Tensor<Scalar> k = add_bias_rows_value(matmul_value(ln1, b.k_weight), b.k_bias);
  Tensor<Scalar> v = add_bias_rows_value(matmul_value(ln1, b.v_weight), b.v_bias);

  const Index n = x.rows();
  Tensor<Scalar> ctx({n, cfg.embed_dim});
  std::vector<Tensor<Scalar>> probs;
  if (trace) probs.reserve(static_cast<std::size_t>(cfg.heads));
  for (Index h = 0; h < cfg.heads; ++h) {
    Tensor<Scalar> scores({n, n});
    scores.matrix().noalias() =
        q.matrix().middleCols(h * dh, dh) * k.matrix().middleCols(h * dh, dh).transpose();
    scores.flat() *= att_scale;
    Tensor<Scalar> w = softmax_rows_value(scores);
    ctx.matrix().middleCols(h * dh, dh).noalias() = w.matrix() * v.matrix().middleCols(h * dh, dh);
    if (trace) probs.push_back(std::move(w));
  }
  Tensor<Scalar> attn_out = add_bias_rows_value(matmul_value(ctx, b.out_weight), b.out_bias);
  Tensor<Scalar> after_attn = add_value(x, attn_out);

  Tensor<Scalar> ln2 = layer_norm_rows_value(after_attn, b.ln2_gain, b.ln2_bias, Scalar(1e-5));
  Tensor<Scalar> mlp_pre = add_bias_rows_value(matmul_value(ln2, b.fc1_weight), b.fc1_bias);
  Tensor<Scalar> mlp_out =
      add_bias_rows_value(matmul_value(gelu_value(mlp_pre), b.fc2_weight), b.fc2_bias);
  Tensor<Scalar> out = add_value(after_attn, mlp_out);

  if (trace) {
    trace->input = x;
    trace->ln1 = std::move(ln1);
    trace->q = std::move(q);
    trace->k = std::move(k);
    trace->v = std::move(v);
    trace->probs = std::move(probs);
    trace->ctx = std::move(ctx);
    trace->after_attn = std::move(after_attn);
    trace->ln2 = std::move(ln2);
    trace->mlp_pre = std::move(mlp_pre);
    trace->output = out;
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> classify_features(const ModelParams<Scalar>& params, const Tensor<Scalar>& f) {
  if (f.rank() != 2 || f.cols() != params.cfg.embed_dim) {
    throw ContractError("classify: features " + shape_str(f.shape()) + " do not match embed_dim " +
                        std::to_string(params.cfg.embed_dim));
  }
  Tensor<Scalar> pooled = mean_rows_value(f);
  return add_bias_rows_value(matmul_value(pooled, params.head_weight), params.head_bias);
}

// tokens -> logits, optionally recording every intermediate stage.
template <typename Scalar>
Tensor<Scalar> forward_plain(const ModelParams<Scalar>& params, const Tensor<Scalar>& tokens,
                             ForwardTrace<Scalar>* trace = nullptr) {
  Tensor<Scalar> x = embed_tokens(params, tokens);
  if (trace) {
    trace->embedded = x;
    trace->blocks.resize(params.blocks.size());
  }
  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    x = block_forward(params.cfg, params.blocks[i], x, trace ? &trace->blocks[i] : nullptr);
  }
  Tensor<Scalar> pooled = mean_rows_value(x);
  Tensor<Scalar> logits =
      add_bias_rows_value(matmul_value(pooled, params.head_weight), params.head_bias);
  if (trace) {
    trace->features = std::move(x);
    trace->pooled = std::move(pooled);
    trace->logits = logits;
  }
  return logits;
}

// ---- tape forward (training path) ---------------------------------------------

template <typename Scalar>
struct TapeBlock {
  Var<Scalar> ln1_gain, ln1_bias;
  Var<Scalar> q_weight, q_bias, k_weight, k_bias, v_weight, v_bias;
  Var<Scalar> out_weight, out_bias;
  Var<Scalar> ln2_gain, ln2_bias;
  Var<Scalar> fc1_weight, fc1_bias, fc2_weight, fc2_bias;
};

template <typename Scalar>
struct TapeModel {
  Var<Scalar> embed_weight, embed_bias, pos_embed;
  std::vector<TapeBlock<Scalar>> blocks;
  Var<Scalar> head_weight, head_bias;
  std::vector<Var<Scalar>> learned;  // same order as ModelParams::for_each_param
};

// Leaf registration mirrors ModelParams::for_each_param ordering exactly.
template <typename Scalar>
TapeModel<Scalar> register_tape_model(Tape<Scalar>& tape, const ModelParams<Scalar>& p) {
  TapeModel<Scalar> m;
  auto leaf = [&](const Tensor<Scalar>& t) {
    Var<Scalar> v = tape.leaf(t);
    m.learned.push_back(v);
    return v;
  };
  m.embed_weight = leaf(p.embed_weight);
  m.embed_bias = leaf(p.embed_bias);
  m.blocks.resize(p.blocks.size());
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    const auto& b = p.blocks[i];
    auto& t = m.blocks[i];
    t.ln1_gain = leaf(b.ln1_gain);
    t.ln1_bias = leaf(b.ln1_bias);
    t.q_weight = leaf(b.q_weight);
    t.q_bias = leaf(b.q_bias);
    t.k_weight = leaf(b.k_weight);
    t.k_bias = leaf(b.k_bias);
    t.v_weight = leaf(b.v_weight);
    t.v_bias = leaf(b.v_bias);
    t.out_weight = leaf(b.out_weight);
    t.out_bias = leaf(b.out_bias);
    t.ln2_gain = leaf(b.ln2_gain);
    t.ln2_bias = leaf(b.ln2_bias);
    t.fc1_weight = leaf(b.fc1_weight);
    t.fc1_bias = leaf(b.fc1_bias);
    t.fc2_weight = leaf(b.fc2_weight);
    t.fc2_bias = leaf(b.fc2_bias);
  }
  m.head_weight = leaf(p.head_weight);
  m.head_bias = leaf(p.head_bias);
  m.pos_embed = tape.leaf(p.pos_embed);  // fixed: not in the learned list
  return m;
}

template <typename Scalar>
Var<Scalar> forward_tape(Tape<Scalar>& tape, const ModelConfig& cfg, const TapeModel<Scalar>& m,
                         const Tensor<Scalar>& tokens) {
  const Index dh = cfg.head_dim();
  const Scalar att_scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  Var<Scalar> x = add(add_bias_rows(matmul(tape.leaf(tokens), m.embed_weight), m.embed_bias),
                      m.pos_embed);
  for (const auto& b : m.blocks) {
    Var<Scalar> ln1 = layer_norm_rows(x, b.ln1_gain, b.ln1_bias, Scalar(1e-5));
    Var<Scalar> q = add_bias_rows(matmul(ln1, b.q_weight), b.q_bias);
    Var<Scalar> k = add_bias_rows(matmul(ln1, b.k_weight), b.k_bias);
    Var<Scalar> v = add_bias_rows(matmul(ln1, b.v_weight), b.v_bias);
    std::vector<Var<Scalar>> heads;
    heads.reserve(static_cast<std::size_t>(cfg.heads));
    for (Index h = 0; h < cfg.heads; ++h) {
      Var<Scalar> qh = slice_cols(q, h * dh, dh);
      Var<Scalar> kh = slice_cols(k, h * dh, dh);
      Var<Scalar> vh = slice_cols(v, h * dh, dh);
      Var<Scalar> w = softmax_rows(scale(matmul(qh, transpose(kh)), att_scale));
      heads.push_back(matmul(w, vh));
    }
    Var<Scalar> ctx = concat_cols(heads);
    Var<Scalar> attn_out = add_bias_rows(matmul(ctx, b.out_weight), b.out_bias);
    x = add(x, attn_out);
    Var<Scalar> ln2 = layer_norm_rows(x, b.ln2_gain, b.ln2_bias, Scalar(1e-5));
    Var<Scalar> h1 = gelu(add_bias_rows(matmul(ln2, b.fc1_weight), b.fc1_bias));
    Var<Scalar> mlp_out = add_bias_rows(matmul(h1, b.fc2_weight), b.fc2_bias);
    x = add(x, mlp_out);
  }
  Var<Scalar> pooled = mean_rows(x);
  return add_bias_rows(matmul(pooled, m.head_weight), m.head_bias);
}

// ---- weight file bridging -------------------------------------------------------

template <typename Scalar>
std::vector<std::pair<std::string, Tensor<float>>> params_to_named(const ModelParams<Scalar>& p) {
  std::vector<std::pair<std::string, Tensor<float>>> out;
  p.for_each_param([&out](const std::string& name, const Tensor<Scalar>& t) {
    out.emplace_back(name, t.template cast<float>());
  });
  out.emplace_back("pos_embed", p.pos_embed.template cast<float>());
  return out;
}

template <typename Scalar>
void load_named_params(ModelParams<Scalar>& p,
                       const std::vector<std::pair<std::string, Tensor<float>>>& named) {
  auto find = [&named](const std::string& name) -> const Tensor<float>& {
    for (const auto& [n, t] : named) {
      if (n == name) return t;
    }
    throw DataError("weight file is missing tensor '" + name + "'");
  };
  auto assign = [&find](const std::string& name, Tensor<Scalar>& dst) {
    const Tensor<float>& src = find(name);
    if (src.shape() != dst.shape()) {
      throw ContractError("weight '" + name + "' has shape " + shape_str(src.shape()) +
                          ", model expects " + shape_str(dst.shape()));
    }
    const bool rg = dst.requires_grad;
    dst = src.template cast<Scalar>();
    dst.requires_grad = rg;
  };
  p.for_each_param(assign);
  assign("pos_embed", p.pos_embed);
  p.pos_embed.requires_grad = false;
}

}  // namespace avfuse
