#pragma once

#include "plm/backbones.hpp"
#include "plm/config.hpp"
#include "plm/nn.hpp"

#include <memory>
#include <optional>
#include <vector>

namespace plm {

/// Maps one feature level [B, n, d_feats] to LM-width tokens [B, n_out, d_llm].
template <typename Scalar>
struct Mapper {
  virtual ~Mapper() = default;
  virtual Var<Scalar> forward(const Var<Scalar>& tokens, const ForwardContext& ctx) const = 0;
  virtual void collect(ParamList<Scalar>& out) const = 0;
  /// Output token count for an input of n tokens (evaluation mode).
  virtual Index output_tokens(Index n) const = 0;
};

template <typename Scalar>
struct LinearMapper final : Mapper<Scalar> {
  Linear<Scalar> proj;

  LinearMapper(const std::string& name, Index d_feats, Index d_llm, Rng& rng);
  Var<Scalar> forward(const Var<Scalar>& tokens, const ForwardContext& ctx) const override;
  void collect(ParamList<Scalar>& out) const override { proj.collect(out); }
  Index output_tokens(Index n) const override { return n; }
};

/// Appends learnable queries to the inputs, runs encoder layers, keeps the query outputs.
template <typename Scalar>
struct QueryPool {
  Var<Scalar> queries;  // [n_q, d]
  std::vector<TransformerEncoderLayer<Scalar>> layers;

  QueryPool() = default;
  QueryPool(const std::string& name, Index d, Index n_q, Index n_layers, Index heads, Index d_ff, double dropout,
            Rng& rng);
  Index n_queries() const { return queries.dim(0); }
  /// x [B, n, d] -> [B, n_q, d]
  Var<Scalar> forward(const Var<Scalar>& x, const ForwardContext& ctx) const;
  void collect(ParamList<Scalar>& out) const;
};

template <typename Scalar>
struct QPMapper final : Mapper<Scalar> {
  Linear<Scalar> down;
  QueryPool<Scalar> pool;
  Linear<Scalar> up;
  RMSNorm<Scalar> norm;

  QPMapper(const std::string& name, Index d_feats, Index d_llm, const MappingConfig& cfg, Rng& rng);
  Var<Scalar> forward(const Var<Scalar>& tokens, const ForwardContext& ctx) const override;
  void collect(ParamList<Scalar>& out) const override;
  Index output_tokens(Index) const override { return pool.n_queries(); }
};

/// Token indices (row-major over the grid) of every block, blocks in
/// row-major order over the block lattice. Throws ConfigError when the
/// block extents do not tile the grid.
std::vector<std::vector<Index>> block_indices(const Shape& grid, const Shape& block);

enum class BlockPool { avgpool, linear, qp };

/// embed -> pool each block -> prepend CLS -> RMSNorm -> out projection.
template <typename Scalar>
struct BlockResampler final : Mapper<Scalar> {
  BlockPool kind;
  Shape grid, block;
  std::vector<Index> gather_order;  // block-major token order
  Index block_size = 0;
  Linear<Scalar> embed;
  std::optional<Linear<Scalar>> pool_linear;
  std::optional<QueryPool<Scalar>> pool_qp;
  RMSNorm<Scalar> norm;
  Linear<Scalar> out;

  BlockResampler(const std::string& name, BlockPool kind, Index d_feats, Index d_llm, const Shape& grid,
                 const MappingConfig& cfg, Rng& rng);
  Index n_blocks() const { return static_cast<Index>(gather_order.size()) / block_size; }
  /// Embedded patch tokens [B, n, d_emb] -> one pooled token per block [B, n_blocks, d_emb].
  Var<Scalar> pool_blocks(const Var<Scalar>& patches, const ForwardContext& ctx) const;
  Var<Scalar> forward(const Var<Scalar>& tokens, const ForwardContext& ctx) const override;
  void collect(ParamList<Scalar>& out) const override;
  Index output_tokens(Index) const override { return 1 + n_blocks(); }
};

/// f = f_max with probability spike_p, otherwise clamp(N(f_mean, f_std), f_min, f_max).
double sample_keep_fraction(const RandConfig& cfg, Rng& rng);
Index kept_patches(double f, Index n_patches);

/// Keeps CLS plus a random subset of patches, then project -> RMSNorm -> project.
template <typename Scalar>
struct RandSubsampler final : Mapper<Scalar> {
  RandConfig cfg;
  Linear<Scalar> proj_in;
  RMSNorm<Scalar> norm;
  Linear<Scalar> proj_out;

  RandSubsampler(const std::string& name, Index d_feats, Index d_llm, const RandConfig& cfg, Rng& rng);
  /// Training draws f once per call (shared by the batch) and a subset per example.
  /// Evaluation keeps floor(f_max n) patches chosen with ctx.rng, or all of them
  /// when cfg.eval_keep_all is set.
  Var<Scalar> forward(const Var<Scalar>& tokens, const ForwardContext& ctx) const override;
  void collect(ParamList<Scalar>& out) const override;
  Index output_tokens(Index n) const override;
  /// Row indices kept for each batch element, CLS (index 0) first, ascending.
  std::vector<std::vector<Index>> choose_rows(Index batch, Index n_tokens, double f, Rng& rng) const;
};

/// The mapper selected by cfg.mapping, or nullptr for kind "none".
template <typename Scalar>
std::unique_ptr<Mapper<Scalar>> make_mapper(const AdapterConfig& cfg, Rng& rng);

}  // namespace plm
