#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stirfry/tensor.hpp"
#include "stirfry/trajectory.hpp"

namespace stirfry {

/// Encoder/decoder widths are tied (h_em = h_en = h_de) and must divide by
/// both the feature count and the head count.
struct ModelConfig {
  int h_em = 210;
  int n_layers = 3;  // stacked encoder layers and masked decoder layers
  int n_heads = 3;
  int m_features = 6;
  int ffn_mult = 2;  // feed-forward hidden width as a multiple of h_em
  double dropout = 0.1;
  int max_seq_len = 2048;
  bool causal_encoder = true;

  int chunk() const { return h_em / m_features; }
  int head_dim() const { return h_em / n_heads; }
  int ffn_dim() const { return h_em * ffn_mult; }
  void validate() const;
};

/// The zero start-of-sequence pose (exact zeros in normalized coordinates).
inline Vec6 sos_pose() { return Vec6{}; }

struct AttentionWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct LayerNormWeights {
  Tensor gain, bias;
};

struct FfnWeights {
  Tensor w1, b1, w2, b2;
};

struct EncoderLayer {
  AttentionWeights attn;
  LayerNormWeights ln1;
  FfnWeights ffn;
  LayerNormWeights ln2;
};

struct DecoderLayer {
  AttentionWeights attn;
  LayerNormWeights ln;
};

/// All learnable weights plus the fixed positional-encoding and
/// graph-mixing tables.
struct ModelParams {
  ModelConfig config;

  std::vector<Tensor> enc_embed_w, enc_embed_b;  // one affine map per feature
  std::vector<Tensor> dec_embed_w, dec_embed_b;
  std::vector<EncoderLayer> encoder;
  std::vector<DecoderLayer> decoder;
  Tensor gcn_w, gcn_b;       // shared per-node transform of the graph conv
  FfnWeights graph_ffn;      // pooled node -> h_em embedding
  AttentionWeights cross;    // K, V and Q all read from the graph embeddings
  LayerNormWeights cross_ln;
  FfnWeights cross_ffn;
  LayerNormWeights cross_ffn_ln;
  Tensor head_w, head_b;     // h_em -> m next-pose regression head

  Tensor pos_encoding;  // (max_seq_len x h_em), sinusoidal, constant
  Tensor graph_mix;     // (2h x 2h) row-normalized adjacency mix, constant
  Tensor graph_pool;    // (2h x chunk) mean pool over the 12 nodes, constant

  /// Fan-in scaled uniform init, fully determined by the seed.
  static ModelParams init(const ModelConfig& config, std::uint64_t seed);

  /// Stable enumeration of the learnable tensors (checkpoint and Adam order).
  std::vector<std::pair<std::string, Tensor>> named_parameters();
  std::vector<Tensor> parameters();

  /// Deep copy (fresh storage for every tensor).
  ModelParams clone() const;
};

/// Dropout configuration for training-time forwards; inference passes null.
struct DropoutCtx {
  double rate = 0.1;
  Rng* rng = nullptr;
};

/// Per-timestep coordination graph: 12 nodes of width h_em/m (six leader
/// feature slices, six follower slices) and a fixed row-normalized
/// leader->follower bipartite adjacency with self-loops.
struct CoordGraph {
  int chunk = 0;
  std::vector<std::vector<double>> nodes;      // 12 x chunk
  std::vector<std::vector<double>> adjacency;  // 12 x 12, rows sum to 1
};

// --- taped forward passes (teacher forcing) -------------------------------

/// Per-feature input embeddings concatenated in feature order; X is (sl x m).
Tensor embed_sequence(ModelParams& p, bool decoder_side, const Tensor& x);
/// Single-pose convenience wrapper (no gradients).
std::vector<double> embed_input(ModelParams& p, bool decoder_side, const Vec6& pose);

/// (sl x m) normalized leader poses -> (sl x h_em).
Tensor encode(ModelParams& p, const Tensor& leader, DropoutCtx* dc = nullptr);
/// (sl x m) shifted decoder inputs (SOS first) -> (sl x h_em).
Tensor decode_masked(ModelParams& p, const Tensor& dec_in, DropoutCtx* dc = nullptr);
/// Per-timestep graph embeddings for all rows at once: (sl x h_em).
Tensor graph_sequence(ModelParams& p, const Tensor& f_en, const Tensor& f_de);
/// Causal attention over the graph-embedding sequence merged into the
/// decoder stream, then the next-pose head: (sl x m).
Tensor enc_dec_attend_and_predict(ModelParams& p, const Tensor& f_g,
                                  const Tensor& f_de, DropoutCtx* dc = nullptr);

/// Full teacher-forced pass. leader and follower are (sl x m) normalized;
/// the decoder sees (SOS, follower[0..sl-2]); row t of the output predicts
/// the follower pose at t.
Tensor teacher_forced_forward(ModelParams& p, const Tensor& leader,
                              const Tensor& follower, DropoutCtx* dc = nullptr);

// --- per-row graph path (used by incremental inference and tests) ---------

CoordGraph build_graph(std::span<const double> en_row, std::span<const double> de_row,
                       const ModelConfig& config);
std::vector<double> graph_embed(const CoordGraph& graph, const ModelParams& p);

// --- autoregressive inference ----------------------------------------------

/// Incremental decoder with cached attention state. Produces the same values
/// as the teacher-forced pass row by row (dropout off), at O(sl) cost per
/// step instead of O(sl^2).
class InferenceSession {
 public:
  InferenceSession(ModelParams& params, const Tensor& leader_norm);

  int length() const { return sl_; }
  /// Feeds the decoder input for position t (SOS at t=0) and returns the
  /// prediction at row t. Must be called with t = 0, 1, 2, ... in order.
  Vec6 step(const Vec6& dec_input);

 private:
  ModelParams& p_;
  int sl_ = 0;
  int t_ = 0;
  std::vector<double> f_en_;                   // sl x h
  std::vector<std::vector<double>> dec_k_, dec_v_;  // per layer, t x h
  std::vector<double> cross_k_, cross_v_;      // t x h
};

struct NormPair {
  NormStats left;
  NormStats right;
};

/// Rolls the model out on a (denormalized) leader trajectory: the decoder is
/// fed SOS and then its own predictions. Output length equals the leader
/// length. Throws std::runtime_error("diverged rollout ...") on NaN.
PoseSeq rollout_autoregressive(ModelParams& params, const PoseSeq& leader,
                               const NormPair& stats);

// --- checkpoints ------------------------------------------------------------

/// Binary container: magic "STIRFRYCKPT1\n", a little-endian u64 JSON header
/// length, the JSON header (config, normalization stats, epoch, named
/// shape-tagged tensor directory, optional Adam scalars), then the raw
/// float64 payload. See README for the exact layout.
struct Checkpoint {
  ModelParams params;
  NormPair stats;
  int epoch = 0;
  std::optional<AdamState> adam;
};

void save_checkpoint(const std::string& path, ModelParams& params,
                     const NormPair& stats, int epoch,
                     const AdamState* adam = nullptr);
Checkpoint load_checkpoint(const std::string& path);

ModelConfig model_config_from_json_text(const std::string& text);
std::string model_config_to_json_text(const ModelConfig& config);

}  // namespace stirfry
