#pragma once

#include "plm/tensor.hpp"

#include "json.hpp"

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace plm {

enum class ClsMode { cls, mean, all };
enum class MapperKind { linear, qpmapper, r_avgpool, r_linear, r_qp, r_rand, none };
enum class InjectionMode { first_layer, inner_layers, cross_attn };
enum class TaskMode { caption, vqa };

std::string_view name_of(ClsMode m);
std::string_view name_of(MapperKind k);
std::string_view name_of(InjectionMode m);
std::string_view name_of(TaskMode m);

struct ModelDims {
  Index d_llm = 128;
  Index llm_layers = 4;
  Index llm_heads = 4;
  Index vocab = 64;
  Index d_feats = 64;
  Index enc_layers = 4;
  Shape grid{8, 8};
  Index enc_heads = 4;
  Index patch_dim = 16;
  Index max_positions = 512;

  Index llm_ff() const { return 4 * d_llm; }
  Index enc_ff() const { return 4 * d_feats; }
  Index n_patches() const { return numel(grid); }

  bool operator==(const ModelDims&) const = default;
};

/// Trains in minutes on one CPU core.
ModelDims desk_dims();
/// CLIP-L-shaped encoder and 7B-shaped LM; only ever used for arithmetic.
ModelDims full_dims();

struct ExtractionConfig {
  Index n_fl = 1;
  ClsMode cls_mode = ClsMode::all;
};

struct RandConfig {
  double f_min = 1.0 / 16;
  double f_max = 0.5;
  double f_mean = 0.25;
  double f_std = 0.2;
  double spike_p = 0.1;
  bool eval_keep_all = false;
};

struct MappingConfig {
  MapperKind kind = MapperKind::linear;
  Index d_embed = 0;
  Index l_qp = 0;
  Index n_q = 0;
  Shape block;  // empty: 4 for 1D grids, 2x2 for 2D, 1x2x2 for 3D
  RandConfig rand;
  Index ffn_mult = 1;
  Index heads = 8;
  double dropout = 0.1;
};

struct InjectionConfig {
  InjectionMode mode = InjectionMode::first_layer;
  Index n_llm = 0;
  Index n_left = 0;
  bool cross_out_proj = true;
};

struct FinetuneConfig {
  Index n_pt = 0;
  bool bias_tuning = false;
};

struct TrainConfig {
  double lr_max = 8e-4;
  double min_lr_ratio = 1e-4;
  double warmup_frac = 0.2;
  double weight_decay = 0.1;
  double grad_clip = 0.8;
  Index batch = 32;
  Index epochs = 15;
  double label_smoothing = 2e-3;
  std::uint64_t seed = 0;
  Index grad_accum = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct TaskConfig {
  TaskMode mode = TaskMode::caption;
  Index n_attributes = 3;
  Index n_values = 8;
  Index train_size = 4096;
  Index eval_size = 512;
  double noise = 0.05;
  std::uint64_t render_seed = 1234;
};

struct PretrainConfig {
  Index steps = 1500;
  Index batch = 32;
  double lr = 1e-3;
  Index max_context = 72;
  std::uint64_t seed = 1;
  std::uint64_t encoder_seed = 2;
};

/// One point in the extraction x mapping x injection x fine-tuning space.
struct AdapterConfig {
  std::string name = "custom";
  ModelDims model;
  ExtractionConfig extraction;
  MappingConfig mapping;
  InjectionConfig injection;
  FinetuneConfig finetune;
  TrainConfig train;
  TaskConfig task;
  PretrainConfig pretrain;
};

/// Default block extents for a grid of the given rank.
Shape default_block(Index grid_rank);
Shape effective_block(const AdapterConfig& cfg);

std::vector<std::string> preset_names();
std::string preset_summary(std::string_view name);
/// Expands a named preset at the given dims. Widths and layer counts follow
/// the published values at full scale and shrink proportionally otherwise.
AdapterConfig make_preset(std::string_view name, const ModelDims& dims = desk_dims());

/// Throws ConfigError naming the offending dotted key.
void validate(const AdapterConfig& cfg);

nlohmann::json to_json(const AdapterConfig& cfg);
/// Strict parse: unknown keys and kind-inconsistent fields are rejected.
AdapterConfig config_from_json(const nlohmann::json& j);
/// Applies a dotted-path `key=value` override; value is parsed as JSON when possible.
void apply_override(nlohmann::json& j, std::string_view assignment);

}  // namespace plm
