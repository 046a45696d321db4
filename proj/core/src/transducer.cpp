#include "stirfry/transducer.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace stirfry {

namespace {

constexpr double kMaskValue = -1e30;
constexpr const char* kCkptMagic = "STIRFRYCKPT1\n";

using ERow = Eigen::Map<const Eigen::RowVectorXd>;
using EMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMapMat = Eigen::Map<const EMat>;

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

Tensor sinusoidal_encoding(int max_len, int width) {
  Tensor pe = Tensor::zeros({max_len, width});
  for (int pos = 0; pos < max_len; ++pos) {
    for (int i = 0; i < width; i += 2) {
      const double angle =
          pos * std::exp(-std::log(10000.0) * static_cast<double>(i) / width);
      pe.at(static_cast<std::int64_t>(pos) * width + i) = std::sin(angle);
      if (i + 1 < width)
        pe.at(static_cast<std::int64_t>(pos) * width + i + 1) = std::cos(angle);
    }
  }
  return pe;
}

// Row-normalized adjacency over the 2m feature nodes: leader nodes keep only
// their self-loop, follower nodes average all leader nodes plus themselves.
std::vector<std::vector<double>> node_adjacency(int m) {
  const int n = 2 * m;
  std::vector<std::vector<double>> adj(
      static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(n), 0.0));
  for (int i = 0; i < m; ++i)
    adj[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] = 1.0;
  for (int i = m; i < n; ++i) {
    const double w = 1.0 / (m + 1);
    for (int j = 0; j < m; ++j) adj[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = w;
    adj[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] = w;
  }
  return adj;
}

Tensor causal_mask(int sl) {
  Tensor mask = Tensor::zeros({sl, sl});
  for (int i = 0; i < sl; ++i)
    for (int j = i + 1; j < sl; ++j)
      mask.at(static_cast<std::int64_t>(i) * sl + j) = kMaskValue;
  return mask;
}

Tensor maybe_dropout(const Tensor& x, DropoutCtx* dc) {
  if (!dc || dc->rate <= 0.0 || !dc->rng) return x;
  return dropout(x, dc->rate, *dc->rng);
}

Tensor ffn_apply(const FfnWeights& w, const Tensor& x) {
  Tensor h = relu(add(matmul(x, w.w1), w.b1));
  return add(matmul(h, w.w2), w.b2);
}

// Multi-head attention; q_in supplies the queries, kv_in the keys/values,
// mask is additive over the (rows_q x rows_kv) score matrix.
Tensor attention_block(const AttentionWeights& w, const Tensor& q_in,
                       const Tensor& kv_in, const Tensor& mask, int heads) {
  const int h = q_in.extent(1);
  const int hd = h / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Tensor q = add(matmul(q_in, w.wq), w.bq);
  Tensor k = add(matmul(kv_in, w.wk), w.bk);
  Tensor v = add(matmul(kv_in, w.wv), w.bv);
  std::vector<Tensor> ctx;
  ctx.reserve(static_cast<std::size_t>(heads));
  for (int i = 0; i < heads; ++i) {
    Tensor qh = slice_cols(q, i * hd, hd);
    Tensor kh = slice_cols(k, i * hd, hd);
    Tensor vh = slice_cols(v, i * hd, hd);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_scale);
    scores = add(scores, mask);
    Tensor attn = softmax(scores, -1);
    ctx.push_back(matmul(attn, vh));
  }
  return add(matmul(concat_cols(ctx), w.wo), w.bo);
}

}  // namespace

// ---------------------------------------------------------------------------
// config / params
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  require(h_em >= 2 && n_layers >= 1 && n_heads >= 1 && m_features >= 1,
          "ModelConfig: dimensions must be positive");
  require(h_em % m_features == 0,
          "ModelConfig: h_em must be divisible by m_features");
  require(h_em % n_heads == 0, "ModelConfig: h_em must be divisible by n_heads");
  require(ffn_mult >= 1, "ModelConfig: ffn_mult must be >= 1");
  require(dropout >= 0.0 && dropout < 1.0, "ModelConfig: dropout must be in [0,1)");
  require(max_seq_len >= 2, "ModelConfig: max_seq_len must be >= 2");
}

namespace {

Tensor init_weight(int fan_in, int fan_out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::uniform({fan_in, fan_out}, -bound, bound, rng, true);
}

Tensor init_bias(int n) { return Tensor::zeros({n}, true); }

AttentionWeights init_attention(int h, Rng& rng) {
  AttentionWeights w;
  w.wq = init_weight(h, h, rng);
  w.bq = init_bias(h);
  w.wk = init_weight(h, h, rng);
  w.bk = init_bias(h);
  w.wv = init_weight(h, h, rng);
  w.bv = init_bias(h);
  w.wo = init_weight(h, h, rng);
  w.bo = init_bias(h);
  return w;
}

LayerNormWeights init_ln(int h) {
  return {Tensor::full({h}, 1.0, true), Tensor::zeros({h}, true)};
}

FfnWeights init_ffn(int in, int hidden, int out, Rng& rng) {
  FfnWeights f;
  f.w1 = init_weight(in, hidden, rng);
  f.b1 = init_bias(hidden);
  f.w2 = init_weight(hidden, out, rng);
  f.b2 = init_bias(out);
  return f;
}

template <typename Fn>
void for_each_named_param(ModelParams& p, Fn&& fn) {
  const auto attn = [&](const std::string& prefix, AttentionWeights& w) {
    fn(prefix + ".wq", w.wq);
    fn(prefix + ".bq", w.bq);
    fn(prefix + ".wk", w.wk);
    fn(prefix + ".bk", w.bk);
    fn(prefix + ".wv", w.wv);
    fn(prefix + ".bv", w.bv);
    fn(prefix + ".wo", w.wo);
    fn(prefix + ".bo", w.bo);
  };
  const auto ln = [&](const std::string& prefix, LayerNormWeights& w) {
    fn(prefix + ".gain", w.gain);
    fn(prefix + ".bias", w.bias);
  };
  const auto ffn = [&](const std::string& prefix, FfnWeights& w) {
    fn(prefix + ".w1", w.w1);
    fn(prefix + ".b1", w.b1);
    fn(prefix + ".w2", w.w2);
    fn(prefix + ".b2", w.b2);
  };
  for (std::size_t k = 0; k < p.enc_embed_w.size(); ++k) {
    fn("enc_embed." + std::to_string(k) + ".w", p.enc_embed_w[k]);
    fn("enc_embed." + std::to_string(k) + ".b", p.enc_embed_b[k]);
  }
  for (std::size_t k = 0; k < p.dec_embed_w.size(); ++k) {
    fn("dec_embed." + std::to_string(k) + ".w", p.dec_embed_w[k]);
    fn("dec_embed." + std::to_string(k) + ".b", p.dec_embed_b[k]);
  }
  for (std::size_t l = 0; l < p.encoder.size(); ++l) {
    const std::string base = "enc." + std::to_string(l);
    attn(base + ".attn", p.encoder[l].attn);
    ln(base + ".ln1", p.encoder[l].ln1);
    ffn(base + ".ffn", p.encoder[l].ffn);
    ln(base + ".ln2", p.encoder[l].ln2);
  }
  for (std::size_t l = 0; l < p.decoder.size(); ++l) {
    const std::string base = "dec." + std::to_string(l);
    attn(base + ".attn", p.decoder[l].attn);
    ln(base + ".ln", p.decoder[l].ln);
  }
  fn("gcn.w", p.gcn_w);
  fn("gcn.b", p.gcn_b);
  ffn("graph_ffn", p.graph_ffn);
  attn("cross", p.cross);
  ln("cross_ln", p.cross_ln);
  ffn("cross_ffn", p.cross_ffn);
  ln("cross_ffn_ln", p.cross_ffn_ln);
  fn("head.w", p.head_w);
  fn("head.b", p.head_b);
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  ModelParams p;
  p.config = config;
  const int h = config.h_em;
  const int m = config.m_features;
  const int chunk = config.chunk();

  for (int k = 0; k < m; ++k) {
    p.enc_embed_w.push_back(init_weight(1, chunk, rng));
    p.enc_embed_b.push_back(init_bias(chunk));
  }
  for (int k = 0; k < m; ++k) {
    p.dec_embed_w.push_back(init_weight(1, chunk, rng));
    p.dec_embed_b.push_back(init_bias(chunk));
  }
  for (int l = 0; l < config.n_layers; ++l) {
    EncoderLayer layer;
    layer.attn = init_attention(h, rng);
    layer.ln1 = init_ln(h);
    layer.ffn = init_ffn(h, config.ffn_dim(), h, rng);
    layer.ln2 = init_ln(h);
    p.encoder.push_back(std::move(layer));
  }
  for (int l = 0; l < config.n_layers; ++l) {
    DecoderLayer layer;
    layer.attn = init_attention(h, rng);
    layer.ln = init_ln(h);
    p.decoder.push_back(std::move(layer));
  }
  p.gcn_w = init_weight(chunk, chunk, rng);
  p.gcn_b = init_bias(chunk);
  p.graph_ffn = init_ffn(chunk, h, h, rng);
  p.cross = init_attention(h, rng);
  p.cross_ln = init_ln(h);
  p.cross_ffn = init_ffn(h, config.ffn_dim(), h, rng);
  p.cross_ffn_ln = init_ln(h);
  p.head_w = init_weight(h, m, rng);
  p.head_b = init_bias(m);

  p.pos_encoding = sinusoidal_encoding(config.max_seq_len, h);

  // Fixed mixing tables so the per-timestep graph pass runs as two matrix
  // products over the whole sequence.
  const auto adj = node_adjacency(m);
  const int nodes = 2 * m;
  const int width = nodes * chunk;  // == 2h
  Tensor mix = Tensor::zeros({width, width});
  for (int i = 0; i < nodes; ++i)
    for (int j = 0; j < nodes; ++j) {
      const double a = adj[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      if (a == 0.0) continue;
      for (int c = 0; c < chunk; ++c)
        mix.at(static_cast<std::int64_t>(j * chunk + c) * width + i * chunk + c) = a;
    }
  p.graph_mix = mix;
  Tensor pool = Tensor::zeros({width, chunk});
  for (int i = 0; i < nodes; ++i)
    for (int c = 0; c < chunk; ++c)
      pool.at(static_cast<std::int64_t>(i * chunk + c) * chunk + c) = 1.0 / nodes;
  p.graph_pool = pool;
  return p;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named_parameters() {
  std::vector<std::pair<std::string, Tensor>> out;
  for_each_named_param(*this, [&](const std::string& name, Tensor& t) {
    out.emplace_back(name, t);
  });
  return out;
}

std::vector<Tensor> ModelParams::parameters() {
  std::vector<Tensor> out;
  for_each_named_param(*this,
                       [&](const std::string&, Tensor& t) { out.push_back(t); });
  return out;
}

ModelParams ModelParams::clone() const {
  ModelParams copy = *this;  // shallow handles; constants stay shared
  for_each_named_param(copy, [](const std::string&, Tensor& t) {
    Tensor fresh = t.clone();
    fresh.set_requires_grad(true);
    t = fresh;
  });
  return copy;
}

// ---------------------------------------------------------------------------
// taped forwards
// ---------------------------------------------------------------------------

Tensor embed_sequence(ModelParams& p, bool decoder_side, const Tensor& x) {
  const int m = p.config.m_features;
  require(x.dim() == 2 && x.extent(1) == m, "embed_sequence: input must be (sl x m)");
  auto& w = decoder_side ? p.dec_embed_w : p.enc_embed_w;
  auto& b = decoder_side ? p.dec_embed_b : p.enc_embed_b;
  std::vector<Tensor> parts;
  parts.reserve(static_cast<std::size_t>(m));
  for (int k = 0; k < m; ++k) {
    Tensor col = slice_cols(x, k, 1);
    parts.push_back(
        add(matmul(col, w[static_cast<std::size_t>(k)]), b[static_cast<std::size_t>(k)]));
  }
  return concat_cols(parts);
}

std::vector<double> embed_input(ModelParams& p, bool decoder_side, const Vec6& pose) {
  NoGradGuard ng;
  Tensor x = Tensor::from_data({1, p.config.m_features},
                               std::vector<double>(pose.begin(), pose.end()));
  Tensor e = embed_sequence(p, decoder_side, x);
  return std::vector<double>(e.data(), e.data() + e.size());
}

namespace {

Tensor positional_slice(const ModelParams& p, int sl) {
  Tensor out = Tensor::zeros({sl, p.config.h_em});
  std::memcpy(out.data(), p.pos_encoding.data(),
              static_cast<std::size_t>(sl) * p.config.h_em * sizeof(double));
  return out;
}

}  // namespace

Tensor encode(ModelParams& p, const Tensor& leader, DropoutCtx* dc) {
  const int sl = leader.extent(0);
  require(sl <= p.config.max_seq_len, "encode: sequence exceeds max_seq_len");
  Tensor x = add(embed_sequence(p, false, leader), positional_slice(p, sl));
  x = maybe_dropout(x, dc);
  const Tensor mask =
      p.config.causal_encoder ? causal_mask(sl) : Tensor::zeros({sl, sl});
  for (EncoderLayer& layer : p.encoder) {
    Tensor a = attention_block(layer.attn, x, x, mask, p.config.n_heads);
    a = maybe_dropout(a, dc);
    x = layer_norm(add(x, a), layer.ln1.gain, layer.ln1.bias);
    Tensor f = maybe_dropout(ffn_apply(layer.ffn, x), dc);
    x = layer_norm(add(x, f), layer.ln2.gain, layer.ln2.bias);
  }
  return x;
}

Tensor decode_masked(ModelParams& p, const Tensor& dec_in, DropoutCtx* dc) {
  const int sl = dec_in.extent(0);
  require(sl <= p.config.max_seq_len, "decode_masked: sequence exceeds max_seq_len");
  Tensor x = add(embed_sequence(p, true, dec_in), positional_slice(p, sl));
  x = maybe_dropout(x, dc);
  const Tensor mask = causal_mask(sl);
  for (DecoderLayer& layer : p.decoder) {
    Tensor a = attention_block(layer.attn, x, x, mask, p.config.n_heads);
    a = maybe_dropout(a, dc);
    x = layer_norm(add(x, a), layer.ln.gain, layer.ln.bias);
  }
  return x;
}

Tensor graph_sequence(ModelParams& p, const Tensor& f_en, const Tensor& f_de) {
  require(same_shape(f_en.shape(), f_de.shape()),
          "graph_sequence: encoder/decoder feature shapes differ");
  const int sl = f_en.extent(0);
  const int chunk = p.config.chunk();
  const int nodes = 2 * p.config.m_features;
  Tensor x = concat_cols({f_en, f_de});           // (sl x 2h)
  Tensor mixed = matmul(x, p.graph_mix);          // adjacency mix per node
  Tensor per_node = reshape(mixed, {sl * nodes, chunk});
  Tensor hidden = relu(add(matmul(per_node, p.gcn_w), p.gcn_b));
  Tensor back = reshape(hidden, {sl, nodes * chunk});
  Tensor pooled = matmul(back, p.graph_pool);     // mean over the 12 nodes
  return ffn_apply(p.graph_ffn, pooled);          // (sl x h)
}

Tensor enc_dec_attend_and_predict(ModelParams& p, const Tensor& f_g,
                                  const Tensor& f_de, DropoutCtx* dc) {
  require(f_g.extent(0) == f_de.extent(0),
          "enc_dec_attend_and_predict: graph/decoder lengths differ");
  const int sl = f_g.extent(0);
  const Tensor mask = causal_mask(sl);
  Tensor a = attention_block(p.cross, f_g, f_g, mask, p.config.n_heads);
  a = maybe_dropout(a, dc);
  Tensor d = layer_norm(add(f_de, a), p.cross_ln.gain, p.cross_ln.bias);
  Tensor f = maybe_dropout(ffn_apply(p.cross_ffn, d), dc);
  d = layer_norm(add(d, f), p.cross_ffn_ln.gain, p.cross_ffn_ln.bias);
  return add(matmul(d, p.head_w), p.head_b);
}

Tensor teacher_forced_forward(ModelParams& p, const Tensor& leader,
                              const Tensor& follower, DropoutCtx* dc) {
  require(same_shape(leader.shape(), follower.shape()),
          "teacher_forced_forward: leader/follower shapes differ");
  const int sl = leader.extent(0);
  const int m = p.config.m_features;
  // decoder input: SOS then the follower shifted right by one
  std::vector<double> shifted(static_cast<std::size_t>(sl) * m, 0.0);
  std::memcpy(shifted.data() + m, follower.data(),
              static_cast<std::size_t>(sl - 1) * m * sizeof(double));
  Tensor dec_in = Tensor::from_data({sl, m}, std::move(shifted));
  Tensor f_en = encode(p, leader, dc);
  Tensor f_de = decode_masked(p, dec_in, dc);
  Tensor f_g = graph_sequence(p, f_en, f_de);
  return enc_dec_attend_and_predict(p, f_g, f_de, dc);
}

// ---------------------------------------------------------------------------
// per-row graph path
// ---------------------------------------------------------------------------

CoordGraph build_graph(std::span<const double> en_row, std::span<const double> de_row,
                       const ModelConfig& config) {
  const int h = config.h_em;
  require(static_cast<int>(en_row.size()) == h &&
              static_cast<int>(de_row.size()) == h,
          "build_graph: rows must have width h_em");
  const int m = config.m_features;
  const int chunk = config.chunk();
  CoordGraph g;
  g.chunk = chunk;
  g.nodes.reserve(static_cast<std::size_t>(2 * m));
  for (int k = 0; k < m; ++k)
    g.nodes.emplace_back(en_row.begin() + k * chunk, en_row.begin() + (k + 1) * chunk);
  for (int k = 0; k < m; ++k)
    g.nodes.emplace_back(de_row.begin() + k * chunk, de_row.begin() + (k + 1) * chunk);
  g.adjacency = node_adjacency(m);
  return g;
}

std::vector<double> graph_embed(const CoordGraph& graph, const ModelParams& p) {
  const int chunk = graph.chunk;
  const int nodes = static_cast<int>(graph.nodes.size());
  const int h = p.config.h_em;

  // one graph-convolution layer relu(A N W + b) with a shared node transform,
  // mean-pooled over the nodes
  std::vector<double> pooled(static_cast<std::size_t>(chunk), 0.0);
  std::vector<double> mixed(static_cast<std::size_t>(chunk));
  for (int i = 0; i < nodes; ++i) {
    std::fill(mixed.begin(), mixed.end(), 0.0);
    for (int j = 0; j < nodes; ++j) {
      const double a =
          graph.adjacency[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      if (a == 0.0) continue;
      for (int c = 0; c < chunk; ++c)
        mixed[static_cast<std::size_t>(c)] +=
            a * graph.nodes[static_cast<std::size_t>(j)][static_cast<std::size_t>(c)];
    }
    for (int c = 0; c < chunk; ++c) {
      double v = p.gcn_b.at(c);
      for (int r = 0; r < chunk; ++r)
        v += mixed[static_cast<std::size_t>(r)] *
             p.gcn_w.at(static_cast<std::int64_t>(r) * chunk + c);
      if (v < 0.0) v = 0.0;
      pooled[static_cast<std::size_t>(c)] += v / nodes;
    }
  }
  const int hidden = p.graph_ffn.b1.extent(0);
  std::vector<double> g1(static_cast<std::size_t>(hidden));
  for (int c = 0; c < hidden; ++c) {
    double v = p.graph_ffn.b1.at(c);
    for (int r = 0; r < chunk; ++r)
      v += pooled[static_cast<std::size_t>(r)] *
           p.graph_ffn.w1.at(static_cast<std::int64_t>(r) * hidden + c);
    g1[static_cast<std::size_t>(c)] = v > 0.0 ? v : 0.0;
  }
  std::vector<double> out(static_cast<std::size_t>(h));
  for (int c = 0; c < h; ++c) {
    double v = p.graph_ffn.b2.at(c);
    for (int r = 0; r < hidden; ++r)
      v += g1[static_cast<std::size_t>(r)] *
           p.graph_ffn.w2.at(static_cast<std::int64_t>(r) * h + c);
    out[static_cast<std::size_t>(c)] = v;
  }
  return out;
}

// ---------------------------------------------------------------------------
// incremental inference
// ---------------------------------------------------------------------------

namespace {

// out = x W + b for a single row
void row_affine(const double* x, const Tensor& w, const Tensor& b, double* out) {
  const int rows = w.extent(0), cols = w.extent(1);
  ERow xv(x, rows);
  CMapMat wm(w.data(), rows, cols);
  Eigen::Map<Eigen::RowVectorXd> ov(out, cols);
  ov.noalias() = xv * wm;
  ov += ERow(b.data(), cols);
}

// mirrors the tensor layer_norm arithmetic row-wise
void layer_norm_row(const double* x, const Tensor& gain, const Tensor& bias,
                    double* out, int n) {
  constexpr double kEps = 1e-5;
  double mu = 0.0;
  for (int k = 0; k < n; ++k) mu += x[k];
  mu /= n;
  double var = 0.0;
  for (int k = 0; k < n; ++k) {
    const double d = x[k] - mu;
    var += d * d;
  }
  var /= n;
  const double is = 1.0 / std::sqrt(var + kEps);
  for (int k = 0; k < n; ++k) out[k] = (x[k] - mu) * is * gain.at(k) + bias.at(k);
}

// causal attention of one query row over a cache of t+1 key/value rows
void attend_row(const AttentionWeights& w, const double* q_row,
                const std::vector<double>& k_cache,
                const std::vector<double>& v_cache, int t, int h, int heads,
                double* out) {
  const int hd = h / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> ctx(static_cast<std::size_t>(h), 0.0);
  std::vector<double> scores(static_cast<std::size_t>(t) + 1);
  for (int head = 0; head < heads; ++head) {
    const int off = head * hd;
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j <= t; ++j) {
      double s = 0.0;
      const double* kr = k_cache.data() + static_cast<std::ptrdiff_t>(j) * h + off;
      for (int c = 0; c < hd; ++c) s += q_row[off + c] * kr[c];
      s *= inv_scale;
      scores[static_cast<std::size_t>(j)] = s;
      mx = std::max(mx, s);
    }
    double denom = 0.0;
    for (int j = 0; j <= t; ++j) {
      const double e = std::exp(scores[static_cast<std::size_t>(j)] - mx);
      scores[static_cast<std::size_t>(j)] = e;
      denom += e;
    }
    for (int j = 0; j <= t; ++j) {
      const double a = scores[static_cast<std::size_t>(j)] / denom;
      const double* vr = v_cache.data() + static_cast<std::ptrdiff_t>(j) * h + off;
      for (int c = 0; c < hd; ++c)
        ctx[static_cast<std::size_t>(off + c)] += a * vr[c];
    }
  }
  row_affine(ctx.data(), w.wo, w.bo, out);
}

}  // namespace

InferenceSession::InferenceSession(ModelParams& params, const Tensor& leader_norm)
    : p_(params) {
  sl_ = leader_norm.extent(0);
  NoGradGuard ng;
  Tensor f_en = encode(p_, leader_norm, nullptr);
  f_en_.assign(f_en.data(), f_en.data() + f_en.size());
  dec_k_.resize(p_.decoder.size());
  dec_v_.resize(p_.decoder.size());
}

Vec6 InferenceSession::step(const Vec6& dec_input) {
  if (t_ >= sl_)
    throw std::logic_error("InferenceSession: stepped past the leader length");
  const int h = p_.config.h_em;
  const int m = p_.config.m_features;
  const int chunk = p_.config.chunk();
  const int heads = p_.config.n_heads;

  // decoder-side embedding + positional encoding
  std::vector<double> x(static_cast<std::size_t>(h));
  for (int k = 0; k < m; ++k) {
    const double v = dec_input[static_cast<std::size_t>(k)];
    const Tensor& w = p_.dec_embed_w[static_cast<std::size_t>(k)];
    const Tensor& b = p_.dec_embed_b[static_cast<std::size_t>(k)];
    for (int c = 0; c < chunk; ++c)
      x[static_cast<std::size_t>(k * chunk + c)] = v * w.at(c) + b.at(c);
  }
  const double* pe = p_.pos_encoding.data() + static_cast<std::ptrdiff_t>(t_) * h;
  for (int c = 0; c < h; ++c) x[static_cast<std::size_t>(c)] += pe[c];

  std::vector<double> buf(static_cast<std::size_t>(h));
  std::vector<double> attn_out(static_cast<std::size_t>(h));
  for (std::size_t l = 0; l < p_.decoder.size(); ++l) {
    DecoderLayer& layer = p_.decoder[l];
    std::vector<double> q(static_cast<std::size_t>(h));
    row_affine(x.data(), layer.attn.wq, layer.attn.bq, q.data());
    const std::size_t cache_off = dec_k_[l].size();
    dec_k_[l].resize(cache_off + static_cast<std::size_t>(h));
    dec_v_[l].resize(cache_off + static_cast<std::size_t>(h));
    row_affine(x.data(), layer.attn.wk, layer.attn.bk, dec_k_[l].data() + cache_off);
    row_affine(x.data(), layer.attn.wv, layer.attn.bv, dec_v_[l].data() + cache_off);
    attend_row(layer.attn, q.data(), dec_k_[l], dec_v_[l], t_, h, heads,
               attn_out.data());
    for (int c = 0; c < h; ++c)
      buf[static_cast<std::size_t>(c)] =
          x[static_cast<std::size_t>(c)] + attn_out[static_cast<std::size_t>(c)];
    layer_norm_row(buf.data(), layer.ln.gain, layer.ln.bias, x.data(), h);
  }

  // graph embedding for this timestep
  const std::span<const double> en_row(
      f_en_.data() + static_cast<std::ptrdiff_t>(t_) * h, static_cast<std::size_t>(h));
  const CoordGraph graph = build_graph(en_row, x, p_.config);
  const std::vector<double> g = graph_embed(graph, p_);

  // cross attention over the graph-embedding prefix
  std::vector<double> q(static_cast<std::size_t>(h));
  row_affine(g.data(), p_.cross.wq, p_.cross.bq, q.data());
  const std::size_t cache_off = cross_k_.size();
  cross_k_.resize(cache_off + static_cast<std::size_t>(h));
  cross_v_.resize(cache_off + static_cast<std::size_t>(h));
  row_affine(g.data(), p_.cross.wk, p_.cross.bk, cross_k_.data() + cache_off);
  row_affine(g.data(), p_.cross.wv, p_.cross.bv, cross_v_.data() + cache_off);
  attend_row(p_.cross, q.data(), cross_k_, cross_v_, t_, h, heads, attn_out.data());
  for (int c = 0; c < h; ++c)
    buf[static_cast<std::size_t>(c)] =
        x[static_cast<std::size_t>(c)] + attn_out[static_cast<std::size_t>(c)];
  std::vector<double> d(static_cast<std::size_t>(h));
  layer_norm_row(buf.data(), p_.cross_ln.gain, p_.cross_ln.bias, d.data(), h);

  const int fdim = p_.config.ffn_dim();
  std::vector<double> f1(static_cast<std::size_t>(fdim));
  row_affine(d.data(), p_.cross_ffn.w1, p_.cross_ffn.b1, f1.data());
  for (double& v : f1)
    if (v < 0.0) v = 0.0;
  row_affine(f1.data(), p_.cross_ffn.w2, p_.cross_ffn.b2, buf.data());
  for (int c = 0; c < h; ++c) buf[static_cast<std::size_t>(c)] += d[static_cast<std::size_t>(c)];
  layer_norm_row(buf.data(), p_.cross_ffn_ln.gain, p_.cross_ffn_ln.bias, d.data(), h);

  Vec6 pred{};
  std::vector<double> out(static_cast<std::size_t>(m));
  row_affine(d.data(), p_.head_w, p_.head_b, out.data());
  for (int k = 0; k < m && k < 6; ++k)
    pred[static_cast<std::size_t>(k)] = out[static_cast<std::size_t>(k)];
  ++t_;
  return pred;
}

PoseSeq rollout_autoregressive(ModelParams& params, const PoseSeq& leader,
                               const NormPair& stats) {
  leader.validate();
  const int sl = static_cast<int>(leader.size());
  const int m = params.config.m_features;
  std::vector<double> data(static_cast<std::size_t>(sl) * m);
  for (int i = 0; i < sl; ++i) {
    const Vec6 n = apply_norm(leader.poses[static_cast<std::size_t>(i)], stats.left);
    for (int k = 0; k < m; ++k)
      data[static_cast<std::size_t>(i) * m + k] = n[static_cast<std::size_t>(k)];
  }
  Tensor leader_norm = Tensor::from_data({sl, m}, std::move(data));
  InferenceSession session(params, leader_norm);

  PoseSeq out;
  out.dt = leader.dt;
  out.t = leader.t;
  out.poses.resize(static_cast<std::size_t>(sl));
  Vec6 dec_in = sos_pose();
  for (int t = 0; t < sl; ++t) {
    const Vec6 pred = session.step(dec_in);
    for (double v : pred)
      if (!std::isfinite(v))
        throw std::runtime_error("diverged rollout at step " + std::to_string(t));
    out.poses[static_cast<std::size_t>(t)] = invert_norm(pred, stats.right);
    dec_in = pred;
  }
  return out;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

nlohmann::json config_json(const ModelConfig& c) {
  return {{"h_em", c.h_em},
          {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},
          {"m_features", c.m_features},
          {"ffn_mult", c.ffn_mult},
          {"dropout", c.dropout},
          {"max_seq_len", c.max_seq_len},
          {"causal_encoder", c.causal_encoder}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.h_em = j.value("h_em", c.h_em);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.m_features = j.value("m_features", c.m_features);
  c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
  c.dropout = j.value("dropout", c.dropout);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.causal_encoder = j.value("causal_encoder", c.causal_encoder);
  c.validate();
  return c;
}

nlohmann::json stats_json(const NormStats& s) {
  return {{"mean", std::vector<double>(s.mean.begin(), s.mean.end())},
          {"std", std::vector<double>(s.std.begin(), s.std.end())}};
}

NormStats stats_from_json(const nlohmann::json& j) {
  NormStats s;
  const auto mean = j.at("mean").get<std::vector<double>>();
  const auto std_ = j.at("std").get<std::vector<double>>();
  if (mean.size() != 6 || std_.size() != 6)
    throw std::runtime_error("checkpoint stats must be 6-dimensional");
  std::copy(mean.begin(), mean.end(), s.mean.begin());
  std::copy(std_.begin(), std_.end(), s.std.begin());
  return s;
}

}  // namespace

std::string model_config_to_json_text(const ModelConfig& config) {
  return config_json(config).dump(2);
}

ModelConfig model_config_from_json_text(const std::string& text) {
  try {
    return config_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("model config parse error: ") + e.what());
  }
}

void save_checkpoint(const std::string& path, ModelParams& params,
                     const NormPair& stats, int epoch, const AdamState* adam) {
  auto named = params.named_parameters();
  nlohmann::json header;
  header["config"] = config_json(params.config);
  header["left_stats"] = stats_json(stats.left);
  header["right_stats"] = stats_json(stats.right);
  header["epoch"] = epoch;

  nlohmann::json dir = nlohmann::json::array();
  std::int64_t offset = 0;
  const auto add_entry = [&](const std::string& name, const Shape& shape,
                             std::int64_t count) {
    dir.push_back(
        {{"name", name}, {"shape", shape}, {"offset", offset}, {"count", count}});
    offset += count;
  };
  for (auto& [name, t] : named) add_entry("param/" + name, t.shape(), t.size());
  if (adam) {
    header["adam"] = {{"step_count", adam->step_count},
                      {"beta1", adam->beta1},
                      {"beta2", adam->beta2},
                      {"eps", adam->eps},
                      {"lr", adam->lr}};
    for (std::size_t i = 0; i < named.size(); ++i)
      add_entry("adam_m/" + named[i].first, named[i].second.shape(),
                static_cast<std::int64_t>(adam->m[i].size()));
    for (std::size_t i = 0; i < named.size(); ++i)
      add_entry("adam_v/" + named[i].first, named[i].second.shape(),
                static_cast<std::int64_t>(adam->v[i].size()));
  }
  header["tensors"] = dir;

  const std::string header_text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write(kCkptMagic, static_cast<std::streamsize>(std::strlen(kCkptMagic)));
  const std::uint64_t len = header_text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (auto& [name, t] : named)
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (adam) {
    for (const auto& m : adam->m)
      out.write(reinterpret_cast<const char*>(m.data()),
                static_cast<std::streamsize>(m.size() * sizeof(double)));
    for (const auto& v : adam->v)
      out.write(reinterpret_cast<const char*>(v.data()),
                static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::string magic(std::strlen(kCkptMagic), '\0');
  in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!in || magic != kCkptMagic)
    throw std::runtime_error(path + ": not a checkpoint file (bad magic)");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len == 0 || len > (1ull << 30))
    throw std::runtime_error(path + ": corrupt checkpoint header length");
  std::string header_text(len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error(path + ": truncated checkpoint header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": checkpoint header parse error: " + e.what());
  }

  Checkpoint ckpt;
  const ModelConfig config = config_from_json(header.at("config"));
  ckpt.params = ModelParams::init(config, 0);
  ckpt.stats.left = stats_from_json(header.at("left_stats"));
  ckpt.stats.right = stats_from_json(header.at("right_stats"));
  ckpt.epoch = header.value("epoch", 0);

  auto named = ckpt.params.named_parameters();
  const auto lookup = [&](const std::string& pname) -> Tensor* {
    for (auto& [n, t] : named)
      if (n == pname) return &t;
    return nullptr;
  };
  if (header.contains("adam")) {
    AdamState st =
        AdamState::init(ckpt.params.parameters(), header["adam"].value("lr", 1e-3));
    st.step_count = header["adam"].value("step_count", std::int64_t{0});
    st.beta1 = header["adam"].value("beta1", st.beta1);
    st.beta2 = header["adam"].value("beta2", st.beta2);
    st.eps = header["adam"].value("eps", st.eps);
    ckpt.adam = std::move(st);
  }

  const std::streampos data_start = in.tellg();
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::int64_t offset = entry.at("offset").get<std::int64_t>();
    const std::int64_t count = entry.at("count").get<std::int64_t>();
    double* dst = nullptr;
    if (name.starts_with("param/")) {
      Tensor* t = lookup(name.substr(6));
      if (t && t->size() == count) dst = t->data();
    } else if (name.starts_with("adam_m/") && ckpt.adam) {
      for (std::size_t i = 0; i < named.size(); ++i)
        if (named[i].first == name.substr(7) &&
            static_cast<std::int64_t>(ckpt.adam->m[i].size()) == count)
          dst = ckpt.adam->m[i].data();
    } else if (name.starts_with("adam_v/") && ckpt.adam) {
      for (std::size_t i = 0; i < named.size(); ++i)
        if (named[i].first == name.substr(7) &&
            static_cast<std::int64_t>(ckpt.adam->v[i].size()) == count)
          dst = ckpt.adam->v[i].data();
    }
    if (!dst)
      throw std::runtime_error(path + ": unknown or mismatched tensor " + name);
    in.seekg(data_start +
             static_cast<std::streamoff>(offset * static_cast<std::int64_t>(sizeof(double))));
    in.read(reinterpret_cast<char*>(dst),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!in) throw std::runtime_error(path + ": truncated checkpoint payload at " + name);
  }
  return ckpt;
}

}  // namespace stirfry
