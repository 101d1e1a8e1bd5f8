#include "plm/mapping.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace plm {

namespace {

template <typename Scalar>
void check_width(const Var<Scalar>& tokens, Index d, const char* who) {
  if (tokens.rank() != 3 || tokens.dim(2) != d) {
    throw DimensionError(std::string(who) + " expects tokens [B, n, " + std::to_string(d) + "], got " +
                         to_string(tokens.shape()));
  }
}

}  // namespace

template <typename Scalar>
LinearMapper<Scalar>::LinearMapper(const std::string& name, Index d_feats, Index d_llm, Rng& rng)
    : proj(name + ".proj", d_feats, d_llm, true, rng) {}

template <typename Scalar>
Var<Scalar> LinearMapper<Scalar>::forward(const Var<Scalar>& tokens, const ForwardContext&) const {
  check_width(tokens, proj.d_in(), "linear mapper");
  return proj(tokens);
}

template <typename Scalar>
QueryPool<Scalar>::QueryPool(const std::string& name, Index d, Index n_q, Index n_layers, Index heads, Index d_ff,
                             double dropout, Rng& rng) {
  queries = Var<Scalar>::parameter(name + ".queries", normal_tensor<Scalar>({n_q, d}, 0.02, rng));
  for (Index l = 0; l < n_layers; ++l) {
    layers.emplace_back(name + ".layers." + std::to_string(l), d, heads, d_ff, dropout, rng);
  }
}

template <typename Scalar>
Var<Scalar> QueryPool<Scalar>::forward(const Var<Scalar>& x, const ForwardContext& ctx) const {
  check_width(x, queries.dim(1), "query pool");
  auto h = concat<Scalar>({x, broadcast_batch(queries, x.dim(0))}, 1);
  if (layers.empty()) return slice(h, 1, h.dim(1) - n_queries(), h.dim(1));
  // Only the query rows leave the pool, so the last layer computes just those.
  for (std::size_t i = 0; i + 1 < layers.size(); ++i) h = layers[i].forward(h, ctx);
  return layers.back().forward_tail(h, n_queries(), ctx);
}

template <typename Scalar>
void QueryPool<Scalar>::collect(ParamList<Scalar>& out) const {
  out.push_back(queries);
  for (const auto& layer : layers) layer.collect(out);
}

template <typename Scalar>
QPMapper<Scalar>::QPMapper(const std::string& name, Index d_feats, Index d_llm, const MappingConfig& cfg, Rng& rng)
    : down(name + ".down", d_feats, cfg.d_embed, true, rng),
      pool(name + ".pool", cfg.d_embed, cfg.n_q, cfg.l_qp, cfg.heads, cfg.ffn_mult * cfg.d_embed, cfg.dropout, rng),
      up(name + ".up", cfg.d_embed, d_llm, true, rng),
      norm(name + ".norm", d_llm) {}

template <typename Scalar>
Var<Scalar> QPMapper<Scalar>::forward(const Var<Scalar>& tokens, const ForwardContext& ctx) const {
  check_width(tokens, down.d_in(), "query mapper");
  return norm(up(pool.forward(down(tokens), ctx)));
}

template <typename Scalar>
void QPMapper<Scalar>::collect(ParamList<Scalar>& out) const {
  down.collect(out);
  pool.collect(out);
  up.collect(out);
  norm.collect(out);
}

std::vector<std::vector<Index>> block_indices(const Shape& grid, const Shape& block) {
  if (grid.size() != block.size() || grid.empty()) {
    throw ConfigError("mapping.block: block " + to_string(block) + " does not match grid " + to_string(grid));
  }
  const std::size_t rank = grid.size();
  Shape lattice(rank);
  for (std::size_t a = 0; a < rank; ++a) {
    if (block[a] <= 0 || grid[a] % block[a] != 0) {
      throw ConfigError("mapping.block: grid " + to_string(grid) + " does not tile into blocks " + to_string(block));
    }
    lattice[a] = grid[a] / block[a];
  }
  auto unravel = [rank](Index flat, const Shape& extents) {
    Shape coord(rank);
    for (std::size_t a = rank; a-- > 0;) {
      coord[a] = flat % extents[a];
      flat /= extents[a];
    }
    return coord;
  };
  std::vector<std::vector<Index>> out;
  const Index n_blocks = numel(lattice), cells = numel(block);
  for (Index b = 0; b < n_blocks; ++b) {
    const Shape origin = unravel(b, lattice);
    std::vector<Index> members;
    for (Index c = 0; c < cells; ++c) {
      const Shape offset = unravel(c, block);
      Index flat = 0;
      for (std::size_t a = 0; a < rank; ++a) flat = flat * grid[a] + origin[a] * block[a] + offset[a];
      members.push_back(flat);
    }
    out.push_back(std::move(members));
  }
  return out;
}

template <typename Scalar>
BlockResampler<Scalar>::BlockResampler(const std::string& name, BlockPool k, Index d_feats, Index d_llm,
                                       const Shape& g, const MappingConfig& cfg, Rng& rng)
    : kind(k),
      grid(g),
      block(cfg.block.empty() ? default_block(static_cast<Index>(g.size())) : cfg.block),
      embed(name + ".embed", d_feats, cfg.d_embed, true, rng) {
  for (const auto& members : block_indices(grid, block)) {
    gather_order.insert(gather_order.end(), members.begin(), members.end());
  }
  block_size = numel(block);
  if (kind == BlockPool::linear) {
    pool_linear = Linear<Scalar>(name + ".pool", block_size * cfg.d_embed, cfg.d_embed, true, rng);
  } else if (kind == BlockPool::qp) {
    pool_qp = QueryPool<Scalar>(name + ".pool", cfg.d_embed, cfg.n_q, cfg.l_qp, cfg.heads,
                                cfg.ffn_mult * cfg.d_embed, cfg.dropout, rng);
  }
  norm = RMSNorm<Scalar>(name + ".norm", cfg.d_embed);
  out = Linear<Scalar>(name + ".out", cfg.d_embed, d_llm, true, rng);
}

template <typename Scalar>
Var<Scalar> BlockResampler<Scalar>::pool_blocks(const Var<Scalar>& patches, const ForwardContext& ctx) const {
  const Index batch = patches.dim(0), d = patches.dim(2), nb = n_blocks();
  if (patches.dim(1) != numel(grid)) {
    throw ConfigError("model.grid: " + std::to_string(patches.dim(1)) + " patch tokens do not form grid " +
                      to_string(grid));
  }
  auto grouped = index_select(patches, 1, std::span<const Index>(gather_order));
  switch (kind) {
    case BlockPool::avgpool:
      return mean(reshape(grouped, {batch, nb, block_size, d}), 2);
    case BlockPool::linear:
      return (*pool_linear)(reshape(grouped, {batch, nb, block_size * d}));
    case BlockPool::qp: {
      auto pooled = pool_qp->forward(reshape(grouped, {batch * nb, block_size, d}), ctx);
      return reshape(pooled, {batch, nb, d});
    }
  }
  throw ConfigError("mapping.kind: unknown block pooling");
}

template <typename Scalar>
Var<Scalar> BlockResampler<Scalar>::forward(const Var<Scalar>& tokens, const ForwardContext& ctx) const {
  check_width(tokens, embed.d_in(), "block resampler");
  auto e = embed(tokens);
  auto cls = slice(e, 1, 0, 1);
  auto pooled = pool_blocks(slice(e, 1, 1, e.dim(1)), ctx);
  return out(norm(concat<Scalar>({cls, pooled}, 1)));
}

template <typename Scalar>
void BlockResampler<Scalar>::collect(ParamList<Scalar>& out_params) const {
  embed.collect(out_params);
  if (pool_linear) pool_linear->collect(out_params);
  if (pool_qp) pool_qp->collect(out_params);
  norm.collect(out_params);
  out.collect(out_params);
}

double sample_keep_fraction(const RandConfig& cfg, Rng& rng) {
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (coin(rng) < cfg.spike_p) return cfg.f_max;
  std::normal_distribution<double> law(cfg.f_mean, cfg.f_std);
  return std::clamp(law(rng), cfg.f_min, cfg.f_max);
}

Index kept_patches(double f, Index n_patches) {
  return static_cast<Index>(std::floor(f * static_cast<double>(n_patches)));
}

template <typename Scalar>
RandSubsampler<Scalar>::RandSubsampler(const std::string& name, Index d_feats, Index d_llm, const RandConfig& c,
                                       Rng& rng)
    : cfg(c),
      proj_in(name + ".proj_in", d_feats, d_llm, true, rng),
      norm(name + ".norm", d_llm),
      proj_out(name + ".proj_out", d_llm, d_llm, true, rng) {}

template <typename Scalar>
std::vector<std::vector<Index>> RandSubsampler<Scalar>::choose_rows(Index batch, Index n_tokens, double f,
                                                                     Rng& rng) const {
  const Index n = n_tokens - 1;
  const Index keep = kept_patches(f, n);
  if (keep < 1) {
    throw ConfigError("model.grid: " + std::to_string(n) + " patch tokens are too few to subsample");
  }
  std::vector<std::vector<Index>> rows;
  std::vector<Index> pool(static_cast<std::size_t>(n));
  for (Index b = 0; b < batch; ++b) {
    std::iota(pool.begin(), pool.end(), Index{1});
    for (Index i = 0; i < keep; ++i) {
      std::uniform_int_distribution<Index> pick(i, n - 1);
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(pick(rng))]);
    }
    std::vector<Index> chosen(pool.begin(), pool.begin() + keep);
    std::sort(chosen.begin(), chosen.end());
    chosen.insert(chosen.begin(), 0);
    rows.push_back(std::move(chosen));
  }
  return rows;
}

template <typename Scalar>
Var<Scalar> RandSubsampler<Scalar>::forward(const Var<Scalar>& tokens, const ForwardContext& ctx) const {
  check_width(tokens, proj_in.d_in(), "random subsampler");
  const Index n = tokens.dim(1) - 1;
  if (kept_patches(cfg.f_min, n) < 1) {
    throw ConfigError("model.grid: " + std::to_string(n) + " patch tokens are too few to subsample");
  }
  Var<Scalar> kept;
  if (!ctx.train && cfg.eval_keep_all) {
    kept = tokens;
  } else {
    Rng fallback(0);
    Rng& rng = ctx.rng != nullptr ? *ctx.rng : fallback;
    if (ctx.train && ctx.rng == nullptr) throw std::logic_error("random subsampling in training needs a generator");
    const double f = ctx.train ? sample_keep_fraction(cfg, rng) : cfg.f_max;
    kept = gather_rows(tokens, choose_rows(tokens.dim(0), tokens.dim(1), f, rng));
  }
  return proj_out(norm(proj_in(kept)));
}

template <typename Scalar>
void RandSubsampler<Scalar>::collect(ParamList<Scalar>& out) const {
  proj_in.collect(out);
  norm.collect(out);
  proj_out.collect(out);
}

template <typename Scalar>
Index RandSubsampler<Scalar>::output_tokens(Index n) const {
  return cfg.eval_keep_all ? n : 1 + kept_patches(cfg.f_max, n - 1);
}

template <typename Scalar>
std::unique_ptr<Mapper<Scalar>> make_mapper(const AdapterConfig& cfg, Rng& rng) {
  const Index d_feats = cfg.model.d_feats, d_llm = cfg.model.d_llm;
  const std::string name = "mapper";
  switch (cfg.mapping.kind) {
    case MapperKind::linear:
      return std::make_unique<LinearMapper<Scalar>>(name, d_feats, d_llm, rng);
    case MapperKind::qpmapper:
      return std::make_unique<QPMapper<Scalar>>(name, d_feats, d_llm, cfg.mapping, rng);
    case MapperKind::r_avgpool:
      return std::make_unique<BlockResampler<Scalar>>(name, BlockPool::avgpool, d_feats, d_llm, cfg.model.grid,
                                                      cfg.mapping, rng);
    case MapperKind::r_linear:
      return std::make_unique<BlockResampler<Scalar>>(name, BlockPool::linear, d_feats, d_llm, cfg.model.grid,
                                                      cfg.mapping, rng);
    case MapperKind::r_qp:
      return std::make_unique<BlockResampler<Scalar>>(name, BlockPool::qp, d_feats, d_llm, cfg.model.grid,
                                                      cfg.mapping, rng);
    case MapperKind::r_rand:
      return std::make_unique<RandSubsampler<Scalar>>(name, d_feats, d_llm, cfg.mapping.rand, rng);
    case MapperKind::none:
      return nullptr;
  }
  throw ConfigError("mapping.kind: unknown kind");
}

#define PLM_INSTANTIATE_MAPPING(S)        \
  template struct LinearMapper<S>;        \
  template struct QueryPool<S>;           \
  template struct QPMapper<S>;            \
  template struct BlockResampler<S>;      \
  template struct RandSubsampler<S>;      \
  template std::unique_ptr<Mapper<S>> make_mapper(const AdapterConfig&, Rng&);

PLM_INSTANTIATE_MAPPING(float)
PLM_INSTANTIATE_MAPPING(double)

}  // namespace plm
