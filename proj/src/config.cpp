#include "plm/config.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>

namespace plm {

using nlohmann::json;

namespace {

template <typename Enum>
struct EnumName {
  Enum value;
  std::string_view name;
};

constexpr EnumName<ClsMode> kClsModes[] = {{ClsMode::cls, "cls"}, {ClsMode::mean, "mean"}, {ClsMode::all, "all"}};
constexpr EnumName<MapperKind> kMapperKinds[] = {
    {MapperKind::linear, "linear"},     {MapperKind::qpmapper, "qpmapper"}, {MapperKind::r_avgpool, "r-avgpool"},
    {MapperKind::r_linear, "r-linear"}, {MapperKind::r_qp, "r-qp"},         {MapperKind::r_rand, "r-rand"},
    {MapperKind::none, "none"}};
constexpr EnumName<InjectionMode> kInjectionModes[] = {{InjectionMode::first_layer, "first-layer"},
                                                       {InjectionMode::inner_layers, "inner-layers"},
                                                       {InjectionMode::cross_attn, "cross-attn"}};
constexpr EnumName<TaskMode> kTaskModes[] = {{TaskMode::caption, "caption"}, {TaskMode::vqa, "vqa"}};

template <typename Enum, std::size_t N>
std::string_view lookup_name(const EnumName<Enum> (&table)[N], Enum v) {
  for (const auto& e : table) {
    if (e.value == v) return e.name;
  }
  return "?";
}

template <typename Enum, std::size_t N>
Enum lookup_value(const EnumName<Enum> (&table)[N], const std::string& s, const std::string& key) {
  for (const auto& e : table) {
    if (e.name == s) return e.value;
  }
  std::string allowed;
  for (const auto& e : table) allowed += (allowed.empty() ? "" : ", ") + std::string(e.name);
  throw ConfigError(key + ": unknown value \"" + s + "\" (expected one of " + allowed + ")");
}

/// Reads one JSON object, remembering which keys were consumed.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }
  bool has(const std::string& k) const { return j_.contains(k); }

  template <typename T>
  void get(const std::string& k, T& out, bool required = false) {
    if (!j_.contains(k)) {
      if (required) throw ConfigError(key(k) + ": required key is missing");
      return;
    }
    seen_.insert(k);
    try {
      const json& v = j_.at(k);
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(key(k) + ": expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError(key(k) + ": expected an integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError(key(k) + ": expected a number");
      }
      out = v.get<T>();
    } catch (const json::exception&) {
      throw ConfigError(key(k) + ": wrong type");
    }
  }

  Section child(const std::string& k, bool required = false) {
    static const json empty = json::object();
    if (!j_.contains(k)) {
      if (required) throw ConfigError(key(k) + ": required section is missing");
      return Section(empty, key(k));
    }
    seen_.insert(k);
    return Section(j_.at(k), key(k));
  }

  /// Rejects keys outside `allowed` and keys never consumed.
  void finish(const std::set<std::string>& allowed = {}) const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k) || (!allowed.empty() && !allowed.count(k))) {
        throw ConfigError(key(k) + ": unknown or unsupported key");
      }
    }
  }

  void reject(const std::string& k, const std::string& why) const {
    if (j_.contains(k)) throw ConfigError(key(k) + ": " + why);
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

Index scaled_width(Index full_width, const ModelDims& dims, Index heads) {
  const double w = static_cast<double>(full_width) * static_cast<double>(dims.d_feats) / 1024.0;
  const Index units = std::max<Index>(1, std::llround(w / static_cast<double>(heads)));
  return units * heads;
}

Index scaled_layers(Index full_count, const ModelDims& dims, Index lo) {
  const double v = static_cast<double>(full_count) * static_cast<double>(dims.llm_layers) / 32.0;
  return std::max<Index>(lo, std::llround(v));
}

void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError(key + ": " + what);
}

bool uses_queries(MapperKind k) { return k == MapperKind::qpmapper || k == MapperKind::r_qp; }
bool is_block(MapperKind k) {
  return k == MapperKind::r_avgpool || k == MapperKind::r_linear || k == MapperKind::r_qp;
}

}  // namespace

std::string_view name_of(ClsMode m) { return lookup_name(kClsModes, m); }
std::string_view name_of(MapperKind k) { return lookup_name(kMapperKinds, k); }
std::string_view name_of(InjectionMode m) { return lookup_name(kInjectionModes, m); }
std::string_view name_of(TaskMode m) { return lookup_name(kTaskModes, m); }

ModelDims desk_dims() { return ModelDims{}; }

ModelDims full_dims() {
  ModelDims d;
  d.d_llm = 4096;
  d.llm_layers = 32;
  d.llm_heads = 32;
  d.vocab = 32000;
  d.d_feats = 1024;
  d.enc_layers = 24;
  d.grid = {16, 16};
  d.enc_heads = 16;
  d.patch_dim = 3 * 14 * 14;
  d.max_positions = 2048;
  return d;
}

Shape default_block(Index grid_rank) {
  switch (grid_rank) {
    case 1:
      return {4};
    case 2:
      return {2, 2};
    case 3:
      return {1, 2, 2};
    default:
      throw ConfigError("model.grid: only 1D, 2D and 3D grids are supported");
  }
}

Shape effective_block(const AdapterConfig& cfg) {
  return cfg.mapping.block.empty() ? default_block(static_cast<Index>(cfg.model.grid.size())) : cfg.mapping.block;
}

namespace {

struct PresetSpec {
  std::string summary;
  std::function<void(AdapterConfig&, const ModelDims&)> apply;
};

const std::map<std::string, PresetSpec>& preset_table() {
  static const std::map<std::string, PresetSpec> table = {
      {"limber-1",
       {"CLS token of the last layer, shared linear projection, first-layer injection",
        [](AdapterConfig& c, const ModelDims&) {
          c.extraction = {1, ClsMode::cls};
          c.mapping.kind = MapperKind::linear;
        }}},
      {"limber-all",
       {"all tokens of the last layer, shared linear projection, first-layer injection",
        [](AdapterConfig& c, const ModelDims&) {
          c.extraction = {1, ClsMode::all};
          c.mapping.kind = MapperKind::linear;
        }}},
      {"mapl",
       {"projection to d_embed=256, 4-layer query mapper with 32 queries, first-layer injection",
        [](AdapterConfig& c, const ModelDims& d) {
          c.extraction = {1, ClsMode::all};
          c.mapping.kind = MapperKind::qpmapper;
          c.mapping.d_embed = scaled_width(256, d, 8);
          c.mapping.l_qp = 4;
          c.mapping.n_q = 32;
        }}},
      {"ep-alm",
       {"CLS tokens of 6 levels, shared linear projection, injected into 12 inner layers leaving out the last",
        [](AdapterConfig& c, const ModelDims& d) {
          c.mapping.kind = MapperKind::linear;
          c.injection.mode = InjectionMode::inner_layers;
          c.injection.n_llm = std::min(scaled_layers(12, d, 1), d.llm_layers - 1);
          c.injection.n_left = scaled_layers(1, d, 1);
          c.extraction = {std::min<Index>({6, c.injection.n_llm, d.enc_layers}), ClsMode::cls};
        }}},
      {"depalm-qp-l0",
       {"query mapper (d_embed=1024, 2 layers, 32 queries), first-layer injection, 1 prompt token",
        [](AdapterConfig& c, const ModelDims& d) {
          c.extraction = {1, ClsMode::all};
          c.mapping.kind = MapperKind::qpmapper;
          c.mapping.d_embed = scaled_width(1024, d, 8);
          c.mapping.l_qp = 2;
          c.mapping.n_q = 32;
          c.finetune.n_pt = 1;
        }}},
      {"depalm-qp-inner",
       {"shared query mapper over 4 levels, injected into 12 inner layers with 3 left out, 16 prompt tokens",
        [](AdapterConfig& c, const ModelDims& d) {
          c.mapping.kind = MapperKind::qpmapper;
          c.mapping.d_embed = scaled_width(1024, d, 8);
          c.mapping.l_qp = 2;
          c.mapping.n_q = 32;
          c.injection.mode = InjectionMode::inner_layers;
          c.injection.n_llm = std::min(scaled_layers(12, d, 1), d.llm_layers - 1);
          c.injection.n_left = scaled_layers(3, d, 1);
          c.extraction = {std::min<Index>({4, c.injection.n_llm, d.enc_layers}), ClsMode::all};
          c.finetune.n_pt = 16;
        }}},
      {"depalm-r-avgpool",
       {"block resampler with 2x2 mean pooling at d_emb=d_LLM, first-layer injection, 1 prompt token",
        [](AdapterConfig& c, const ModelDims& d) {
          c.extraction = {1, ClsMode::all};
          c.mapping.kind = MapperKind::r_avgpool;
          c.mapping.d_embed = d.d_llm;
          c.finetune.n_pt = 1;
        }}},
      {"depalm-r-linear",
       {"block resampler with a linear 4*d_emb -> d_emb pooling at d_emb=d_LLM, first-layer injection",
        [](AdapterConfig& c, const ModelDims& d) {
          c.extraction = {1, ClsMode::all};
          c.mapping.kind = MapperKind::r_linear;
          c.mapping.d_embed = d.d_llm;
          c.finetune.n_pt = 1;
        }}},
      {"depalm-r-qp",
       {"block resampler pooling each block with a 4-layer single-query mapper at d_emb=768",
        [](AdapterConfig& c, const ModelDims& d) {
          c.extraction = {1, ClsMode::all};
          c.mapping.kind = MapperKind::r_qp;
          c.mapping.d_embed = scaled_width(768, d, 8);
          c.mapping.l_qp = 4;
          c.mapping.n_q = 1;
          c.finetune.n_pt = 1;
        }}},
      {"depalm-r-rand",
       {"random token subsampling (f in [1/16, 1/2]), projection + RMSNorm + projection",
        [](AdapterConfig& c, const ModelDims&) {
          c.extraction = {1, ClsMode::all};
          c.mapping.kind = MapperKind::r_rand;
          c.finetune.n_pt = 1;
        }}},
      {"depalm-c-attn",
       {"single gated cross-attention block over 4 levels, inserted into 12 inner layers with 3 left out",
        [](AdapterConfig& c, const ModelDims& d) {
          c.mapping.kind = MapperKind::none;
          c.mapping.d_embed = scaled_width(1024, d, 8);
          c.injection.mode = InjectionMode::cross_attn;
          c.injection.n_llm = std::min(scaled_layers(12, d, 1), d.llm_layers - 1);
          c.injection.n_left = scaled_layers(3, d, 1);
          c.extraction = {std::min<Index>({4, c.injection.n_llm, d.enc_layers}), ClsMode::all};
          c.finetune.n_pt = 1;
        }}},
  };
  return table;
}

}  // namespace

std::vector<std::string> preset_names() {
  // Table order rather than alphabetical.
  return {"limber-1",         "limber-all",      "mapl",          "ep-alm",
          "depalm-qp-l0",     "depalm-qp-inner", "depalm-r-avgpool", "depalm-r-linear",
          "depalm-r-qp",      "depalm-r-rand",   "depalm-c-attn"};
}

std::string preset_summary(std::string_view name) {
  const auto& table = preset_table();
  auto it = table.find(std::string(name));
  if (it == table.end()) throw ConfigError("unknown preset \"" + std::string(name) + "\"");
  return it->second.summary;
}

AdapterConfig make_preset(std::string_view name, const ModelDims& dims) {
  const auto& table = preset_table();
  auto it = table.find(std::string(name));
  if (it == table.end()) throw ConfigError("unknown preset \"" + std::string(name) + "\"");
  AdapterConfig cfg;
  cfg.name = std::string(name);
  cfg.model = dims;
  it->second.apply(cfg, dims);
  return cfg;
}

void validate(const AdapterConfig& c) {
  const ModelDims& m = c.model;
  for (auto [key, v] : {std::pair<const char*, Index>{"model.d_llm", m.d_llm},
                        {"model.llm_layers", m.llm_layers},
                        {"model.llm_heads", m.llm_heads},
                        {"model.vocab", m.vocab},
                        {"model.d_feats", m.d_feats},
                        {"model.enc_layers", m.enc_layers},
                        {"model.enc_heads", m.enc_heads},
                        {"model.patch_dim", m.patch_dim},
                        {"model.max_positions", m.max_positions}}) {
    require(v > 0, key, "must be positive");
  }
  require(m.d_llm % m.llm_heads == 0, "model.llm_heads", "must divide model.d_llm");
  require(m.d_feats % m.enc_heads == 0, "model.enc_heads", "must divide model.d_feats");
  require(!m.grid.empty() && m.grid.size() <= 3, "model.grid", "must have 1 to 3 extents");
  for (Index g : m.grid) require(g > 0, "model.grid", "extents must be positive");

  const ExtractionConfig& e = c.extraction;
  require(e.n_fl >= 1 && e.n_fl <= m.enc_layers, "extraction.n_fl", "must lie in [1, model.enc_layers]");

  const MappingConfig& mp = c.mapping;
  const Index n_tok = m.n_patches();
  if (mp.kind != MapperKind::linear && mp.kind != MapperKind::r_rand) {
    if (mp.kind != MapperKind::none || c.injection.mode == InjectionMode::cross_attn) {
      require(mp.d_embed > 0, "mapping.d_embed", "must be positive");
    }
  }
  if (uses_queries(mp.kind) || mp.kind == MapperKind::none) {
    require(mp.heads > 0, "mapping.heads", "must be positive");
    if (mp.d_embed > 0) require(mp.d_embed % mp.heads == 0, "mapping.d_embed", "must be divisible by mapping.heads");
    require(mp.dropout >= 0 && mp.dropout < 1, "mapping.dropout", "must lie in [0, 1)");
  }
  if (uses_queries(mp.kind)) {
    require(mp.l_qp >= 1, "mapping.l_qp", "must be at least 1");
    require(mp.n_q >= 1, "mapping.n_q", "must be at least 1");
    require(mp.ffn_mult >= 1, "mapping.ffn_mult", "must be at least 1");
  }
  if (mp.kind == MapperKind::r_qp) require(mp.n_q == 1, "mapping.n_q", "block query pooling uses a single query");
  if (is_block(mp.kind) || mp.kind == MapperKind::r_rand) {
    require(e.cls_mode == ClsMode::all, "extraction.cls_mode", "resamplers need patch tokens (use \"all\")");
    require(e.n_fl == 1, "extraction.n_fl", "resamplers read a single level");
  }
  if (is_block(mp.kind)) {
    const Shape block = effective_block(c);
    require(block.size() == m.grid.size(), "mapping.block", "must have one extent per grid axis");
    Index cells = 1;
    for (std::size_t i = 0; i < block.size(); ++i) {
      require(block[i] > 0 && m.grid[i] % block[i] == 0, "mapping.block",
              "grid " + to_string(m.grid) + " does not tile into blocks " + to_string(block));
      cells *= block[i];
    }
    require(cells == 4, "mapping.block", "blocks must hold exactly 4 tokens");
  }
  if (mp.kind == MapperKind::r_rand) {
    const RandConfig& r = mp.rand;
    require(r.f_min > 0 && r.f_min <= r.f_max && r.f_max <= 1, "mapping.rand.f_min",
            "need 0 < f_min <= f_max <= 1");
    require(r.f_std > 0, "mapping.rand.f_std", "must be positive");
    require(r.spike_p >= 0 && r.spike_p <= 1, "mapping.rand.spike_p", "must lie in [0, 1]");
    require(static_cast<Index>(std::floor(r.f_min * static_cast<double>(n_tok))) >= 1, "model.grid",
            "too few patch tokens for the minimum keep fraction");
  }

  const InjectionConfig& inj = c.injection;
  if (inj.mode == InjectionMode::first_layer) {
    require(e.n_fl == 1, "extraction.n_fl", "first-layer injection uses a single level");
    require(mp.kind != MapperKind::none, "mapping.kind", "\"none\" is only valid with cross-attn injection");
  } else {
    require(inj.n_llm >= 1, "injection.n_llm", "must be at least 1");
    require(inj.n_left >= 0, "injection.n_left", "must be non-negative");
    require(inj.n_llm + inj.n_left <= m.llm_layers, "injection.n_llm",
            "n_llm + n_left exceeds model.llm_layers");
    require(e.n_fl <= inj.n_llm, "extraction.n_fl", "cannot exceed injection.n_llm");
  }
  if (inj.mode == InjectionMode::cross_attn) {
    require(mp.kind == MapperKind::none, "mapping.kind", "cross-attn injection carries its own mapping (use \"none\")");
  } else if (inj.mode == InjectionMode::inner_layers) {
    require(mp.kind == MapperKind::linear || mp.kind == MapperKind::qpmapper, "mapping.kind",
            "inner-layer injection supports linear and qpmapper mappings");
  }
  if (mp.kind == MapperKind::qpmapper || mp.kind == MapperKind::linear) {
    // CLS-only levels carry one token; any mapping of that token is allowed.
  }

  require(c.finetune.n_pt >= 0, "finetune.n_pt", "must be non-negative");

  const TrainConfig& t = c.train;
  require(t.lr_max >= 0, "train.lr_max", "must be non-negative");
  require(t.min_lr_ratio > 0 && t.min_lr_ratio <= 1, "train.min_lr_ratio", "must lie in (0, 1]");
  require(t.warmup_frac > 0 && t.warmup_frac < 1, "train.warmup_frac", "must lie in (0, 1)");
  require(t.weight_decay >= 0, "train.weight_decay", "must be non-negative");
  require(t.grad_clip > 0, "train.grad_clip", "must be positive");
  require(t.batch >= 1, "train.batch", "must be at least 1");
  require(t.epochs >= 1, "train.epochs", "must be at least 1");
  require(t.label_smoothing >= 0 && t.label_smoothing < 1, "train.label_smoothing", "must lie in [0, 1)");
  require(t.grad_accum >= 1 && t.batch % t.grad_accum == 0, "train.grad_accum", "must divide train.batch");
  require(t.beta1 >= 0 && t.beta1 < 1, "train.beta1", "must lie in [0, 1)");
  require(t.beta2 >= 0 && t.beta2 < 1, "train.beta2", "must lie in [0, 1)");
  require(t.adam_eps > 0, "train.adam_eps", "must be positive");

  const TaskConfig& task = c.task;
  require(task.n_attributes >= 1 && task.n_values >= 2, "task.n_attributes", "need at least one attribute of 2 values");
  require(2 + task.n_attributes * task.n_values + task.n_attributes <= m.vocab, "model.vocab",
          "too small for the task vocabulary");
  require(task.train_size >= 1 && task.eval_size >= 1, "task.train_size", "must be positive");
  require(task.noise >= 0, "task.noise", "must be non-negative");
  require(c.pretrain.steps >= 0, "pretrain.steps", "must be non-negative");
  require(c.pretrain.batch >= 1, "pretrain.batch", "must be at least 1");
  require(c.pretrain.max_context >= 0, "pretrain.max_context", "must be non-negative");
}

json to_json(const AdapterConfig& c) {
  json j;
  j["name"] = c.name;
  j["model"] = {{"d_llm", c.model.d_llm},         {"llm_layers", c.model.llm_layers},
                {"llm_heads", c.model.llm_heads}, {"vocab", c.model.vocab},
                {"d_feats", c.model.d_feats},     {"enc_layers", c.model.enc_layers},
                {"grid", c.model.grid},           {"enc_heads", c.model.enc_heads},
                {"patch_dim", c.model.patch_dim}, {"max_positions", c.model.max_positions}};
  j["extraction"] = {{"n_fl", c.extraction.n_fl}, {"cls_mode", name_of(c.extraction.cls_mode)}};

  const MappingConfig& mp = c.mapping;
  json mj = {{"kind", name_of(mp.kind)}};
  if (mp.kind != MapperKind::linear && mp.kind != MapperKind::r_rand) mj["d_embed"] = mp.d_embed;
  if (uses_queries(mp.kind)) {
    mj["l_qp"] = mp.l_qp;
    mj["n_q"] = mp.n_q;
    mj["ffn_mult"] = mp.ffn_mult;
  }
  if (uses_queries(mp.kind) || mp.kind == MapperKind::none) {
    mj["heads"] = mp.heads;
    mj["dropout"] = mp.dropout;
  }
  if (is_block(mp.kind)) mj["block"] = effective_block(c);
  if (mp.kind == MapperKind::r_rand) {
    mj["rand"] = {{"f_min", mp.rand.f_min},     {"f_max", mp.rand.f_max},     {"f_mean", mp.rand.f_mean},
                  {"f_std", mp.rand.f_std},     {"spike_p", mp.rand.spike_p}, {"eval_keep_all", mp.rand.eval_keep_all}};
  }
  j["mapping"] = mj;

  json ij = {{"mode", name_of(c.injection.mode)}};
  if (c.injection.mode != InjectionMode::first_layer) {
    ij["n_llm"] = c.injection.n_llm;
    ij["n_left"] = c.injection.n_left;
  }
  if (c.injection.mode == InjectionMode::cross_attn) ij["cross_out_proj"] = c.injection.cross_out_proj;
  j["injection"] = ij;

  j["finetune"] = {{"n_pt", c.finetune.n_pt}, {"bias_tuning", c.finetune.bias_tuning}};
  const TrainConfig& t = c.train;
  j["train"] = {{"lr_max", t.lr_max},
                {"min_lr_ratio", t.min_lr_ratio},
                {"warmup_frac", t.warmup_frac},
                {"weight_decay", t.weight_decay},
                {"grad_clip", t.grad_clip},
                {"batch", t.batch},
                {"epochs", t.epochs},
                {"label_smoothing", t.label_smoothing},
                {"seed", t.seed},
                {"grad_accum", t.grad_accum},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"adam_eps", t.adam_eps}};
  j["task"] = {{"mode", name_of(c.task.mode)},         {"n_attributes", c.task.n_attributes},
               {"n_values", c.task.n_values},          {"train_size", c.task.train_size},
               {"eval_size", c.task.eval_size},        {"noise", c.task.noise},
               {"render_seed", c.task.render_seed}};
  j["pretrain"] = {{"steps", c.pretrain.steps},
                   {"batch", c.pretrain.batch},
                   {"lr", c.pretrain.lr},
                   {"max_context", c.pretrain.max_context},
                   {"seed", c.pretrain.seed},
                   {"encoder_seed", c.pretrain.encoder_seed}};
  return j;
}

AdapterConfig config_from_json(const json& j) {
  AdapterConfig c;
  Section root(j, "");
  root.get("name", c.name);

  {
    Section s = root.child("model");
    ModelDims& m = c.model;
    s.get("d_llm", m.d_llm);
    s.get("llm_layers", m.llm_layers);
    s.get("llm_heads", m.llm_heads);
    s.get("vocab", m.vocab);
    s.get("d_feats", m.d_feats);
    s.get("enc_layers", m.enc_layers);
    s.get("grid", m.grid);
    s.get("enc_heads", m.enc_heads);
    s.get("patch_dim", m.patch_dim);
    s.get("max_positions", m.max_positions);
    s.finish();
  }
  {
    Section s = root.child("extraction");
    s.get("n_fl", c.extraction.n_fl);
    std::string mode = std::string(name_of(c.extraction.cls_mode));
    s.get("cls_mode", mode);
    c.extraction.cls_mode = lookup_value(kClsModes, mode, "extraction.cls_mode");
    s.finish();
  }
  {
    Section s = root.child("mapping", true);
    std::string kind;
    s.get("kind", kind, true);
    MappingConfig& mp = c.mapping;
    mp.kind = lookup_value(kMapperKinds, kind, "mapping.kind");
    std::set<std::string> allowed{"kind"};
    auto take = [&](const char* key, auto& out, bool required) {
      allowed.insert(key);
      s.get(key, out, required);
    };
    switch (mp.kind) {
      case MapperKind::linear:
        break;
      case MapperKind::qpmapper:
        take("d_embed", mp.d_embed, true);
        take("l_qp", mp.l_qp, true);
        take("n_q", mp.n_q, true);
        take("ffn_mult", mp.ffn_mult, false);
        take("heads", mp.heads, false);
        take("dropout", mp.dropout, false);
        break;
      case MapperKind::r_avgpool:
      case MapperKind::r_linear:
        take("d_embed", mp.d_embed, true);
        take("block", mp.block, false);
        break;
      case MapperKind::r_qp:
        mp.n_q = 1;
        take("d_embed", mp.d_embed, true);
        take("l_qp", mp.l_qp, true);
        take("n_q", mp.n_q, false);
        take("block", mp.block, false);
        take("ffn_mult", mp.ffn_mult, false);
        take("heads", mp.heads, false);
        take("dropout", mp.dropout, false);
        break;
      case MapperKind::r_rand: {
        allowed.insert("rand");
        Section r = s.child("rand", true);
        r.get("f_min", mp.rand.f_min);
        r.get("f_max", mp.rand.f_max);
        r.get("f_mean", mp.rand.f_mean);
        r.get("f_std", mp.rand.f_std);
        r.get("spike_p", mp.rand.spike_p);
        r.get("eval_keep_all", mp.rand.eval_keep_all);
        r.finish();
        break;
      }
      case MapperKind::none:
        take("d_embed", mp.d_embed, false);
        take("heads", mp.heads, false);
        take("dropout", mp.dropout, false);
        break;
    }
    s.finish(allowed);
  }
  {
    Section s = root.child("injection");
    std::string mode = std::string(name_of(c.injection.mode));
    s.get("mode", mode);
    c.injection.mode = lookup_value(kInjectionModes, mode, "injection.mode");
    std::set<std::string> allowed{"mode"};
    if (c.injection.mode != InjectionMode::first_layer) {
      allowed.insert({"n_llm", "n_left"});
      s.get("n_llm", c.injection.n_llm, true);
      s.get("n_left", c.injection.n_left, true);
    }
    if (c.injection.mode == InjectionMode::cross_attn) {
      allowed.insert("cross_out_proj");
      s.get("cross_out_proj", c.injection.cross_out_proj);
    }
    s.finish(allowed);
  }
  {
    Section s = root.child("finetune");
    s.get("n_pt", c.finetune.n_pt);
    s.get("bias_tuning", c.finetune.bias_tuning);
    s.finish();
  }
  {
    Section s = root.child("train");
    TrainConfig& t = c.train;
    s.get("lr_max", t.lr_max);
    s.get("min_lr_ratio", t.min_lr_ratio);
    s.get("warmup_frac", t.warmup_frac);
    s.get("weight_decay", t.weight_decay);
    s.get("grad_clip", t.grad_clip);
    s.get("batch", t.batch);
    s.get("epochs", t.epochs);
    s.get("label_smoothing", t.label_smoothing);
    s.get("seed", t.seed);
    s.get("grad_accum", t.grad_accum);
    s.get("beta1", t.beta1);
    s.get("beta2", t.beta2);
    s.get("adam_eps", t.adam_eps);
    s.finish();
  }
  {
    Section s = root.child("task");
    TaskConfig& t = c.task;
    std::string mode = std::string(name_of(t.mode));
    s.get("mode", mode);
    t.mode = lookup_value(kTaskModes, mode, "task.mode");
    s.get("n_attributes", t.n_attributes);
    s.get("n_values", t.n_values);
    s.get("train_size", t.train_size);
    s.get("eval_size", t.eval_size);
    s.get("noise", t.noise);
    s.get("render_seed", t.render_seed);
    s.finish();
  }
  {
    Section s = root.child("pretrain");
    PretrainConfig& p = c.pretrain;
    s.get("steps", p.steps);
    s.get("batch", p.batch);
    s.get("lr", p.lr);
    s.get("max_context", p.max_context);
    s.get("seed", p.seed);
    s.get("encoder_seed", p.encoder_seed);
    s.finish();
  }
  root.finish();
  validate(c);
  return c;
}

void apply_override(json& j, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override \"" + std::string(assignment) + "\" is not of the form key=value");
  }
  const std::string path(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string part = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key \"" + path + "\" has an empty component");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    if (!node->contains(part)) (*node)[part] = json::object();
    node = &(*node)[part];
    if (!node->is_object()) throw ConfigError(path + ": cannot descend into a non-object");
    start = dot + 1;
  }
}

}  // namespace plm
