// SPDX-License-Identifier: Apache-2.0
#include "rsseg/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace rsseg {

Index BackboneConfig::mlp_hidden() const {
  return static_cast<Index>(std::lround(mlp_ratio * static_cast<double>(embed_dim)));
}

void BackboneConfig::validate() const {
  if (patch_size < 1 || image_size < 1) throw ConfigError("backbone: image_size and patch_size must be positive");
  if (image_size % patch_size != 0)
    throw ConfigError("backbone: image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                      std::to_string(patch_size));
  if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0)
    throw ConfigError("backbone: embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                      std::to_string(heads));
  if (depth < 1) throw ConfigError("backbone: depth must be >= 1");
  if (mlp_ratio <= 0) throw ConfigError("backbone: mlp_ratio must be positive");
  for (std::size_t i = 0; i < tap_indices.size(); ++i) {
    if (tap_indices[i] < 0 || tap_indices[i] >= depth)
      throw ConfigError("backbone: tap index " + std::to_string(tap_indices[i]) + " outside [0, depth)");
    if (i > 0 && tap_indices[i] <= tap_indices[i - 1]) throw ConfigError("backbone: tap indices must be strictly increasing");
  }
}

void LocalPathConfig::validate() const {
  if (input_dim < 1 || expand_ratio < 1) throw ConfigError("local: input_dim and expand_ratio must be positive");
  if (lhf_kernel < 3 || lhf_kernel % 2 == 0) throw ConfigError("local: lhf_kernel must be odd and >= 3");
}

void SasmConfig::validate() const {
  if (groups < 1 || group_dim < 1) throw ConfigError("sasm: groups and group_dim must be positive");
  if (filter_size < 1 || filter_size % 2 == 0) throw ConfigError("sasm: filter_size must be odd");
  if (up_factor != 2) throw ConfigError("sasm: up_factor must be 2 so stage resolutions line up with the local path");
  if (num_stages < 1 || num_stages > 2) throw ConfigError("sasm: num_stages must be 1 or 2");
}

void ModelConfig::validate() const {
  backbone.validate();
  if (decoder.num_classes < 1 || decoder.num_classes > 254) throw ConfigError("decoder: num_classes must be in [1, 254]");
  if (decoder.depth < 0) throw ConfigError("decoder: depth must be >= 0");
  if (decoder.scale_init <= 0) throw ConfigError("decoder: scale_init must be positive");
  if (boundary_weight < 0) throw ConfigError("boundary_weight must be >= 0");
  if (head == HeadKind::kLinear) return;
  local.validate();
  sasm.validate();
  if (num_blocks() < 1) throw ConfigError("local: at least one tap index (one local separation block) is required");
  if (backbone.patch_size % 2 != 0 || backbone.patch_size < 4)
    throw ConfigError("local: overlapping patch embedding needs an even patch_size >= 4");
  if (sasm.groups * sasm.group_dim != backbone.embed_dim)
    throw ConfigError("sasm: groups * group_dim (" + std::to_string(sasm.groups * sasm.group_dim) +
                      ") must equal embed_dim (" + std::to_string(backbone.embed_dim) + ")");
  if (loss_mode == LossMode::kBoundary && !local.boundary_head)
    throw ConfigError("loss_mode boundary requires boundary_head = true");
}

void TrainConfig::validate() const {
  if (lr < 0 || weight_decay < 0 || head_lr_mult < 0) throw ConfigError("train: negative learning rate or decay");
  if (iterations < 0 || batch_size < 1) throw ConfigError("train: invalid iterations or batch_size");
  if (train_scenes < 1 || eval_scenes < 0) throw ConfigError("train: invalid scene counts");
  if (log_interval < 1) throw ConfigError("train: log_interval must be >= 1");
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  data.validate();
  if (data.image_size != model.backbone.image_size) throw ConfigError("data image_size must equal model image_size");
  if (data.num_classes != model.decoder.num_classes) throw ConfigError("data num_classes must equal model num_classes");
  if (inference.scales.empty()) throw ConfigError("inference: scales must not be empty");
  for (double s : inference.scales)
    if (s <= 0) throw ConfigError("inference: scales must be positive");
  if (inference.window < 0 || inference.stride < 0) throw ConfigError("inference: window/stride must be >= 0");
  if (metrics.small_area_threshold < 0 || metrics.boundary_tolerance < 0) throw ConfigError("metrics: negative threshold");
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename T>
T parse_number(std::string_view text) {
  text = trim(text);
  T value{};
  const auto* end = text.data() + text.size();
  const auto res = std::from_chars(text.data(), end, value);
  if (res.ec != std::errc() || res.ptr != end) throw ConfigError("invalid number '" + std::string(text) + "'");
  return value;
}

bool parse_bool(std::string_view text) {
  text = trim(text);
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("invalid boolean '" + std::string(text) + "'");
}

template <typename T>
std::vector<T> parse_list(std::string_view text) {
  std::vector<T> out;
  text = trim(text);
  if (text.empty()) return out;
  while (true) {
    const auto comma = text.find(',');
    out.push_back(parse_number<T>(text.substr(0, comma)));
    if (comma == std::string_view::npos) break;
    text.remove_prefix(comma + 1);
  }
  return out;
}

// shortest text that parses back to the same double
std::string fmt(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string fmt(Index v) { return std::to_string(v); }

template <typename T>
std::string join(const std::vector<T>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) out += (i ? "," : "") + fmt(values[i]);
  return out;
}

struct Field {
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define RSSEG_INT(key, member)                                                                  \
  {key, {[](RunConfig& c, std::string_view v) { c.member = parse_number<Index>(v); },          \
         [](const RunConfig& c) { return std::to_string(c.member); }}}
#define RSSEG_U64(key, member)                                                                  \
  {key, {[](RunConfig& c, std::string_view v) { c.member = parse_number<std::uint64_t>(v); },  \
         [](const RunConfig& c) { return std::to_string(c.member); }}}
#define RSSEG_DBL(key, member)                                                                  \
  {key, {[](RunConfig& c, std::string_view v) { c.member = parse_number<double>(v); },         \
         [](const RunConfig& c) { return fmt(c.member); }}}
#define RSSEG_BOOL(key, member)                                                                 \
  {key, {[](RunConfig& c, std::string_view v) { c.member = parse_bool(v); },                   \
         [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }}}

const std::map<std::string, Field, std::less<>>& fields() {
  static const std::map<std::string, Field, std::less<>> table = {
      // model
      {"head",
       {[](RunConfig& c, std::string_view v) {
          v = trim(v);
          if (v == "rsseg") c.model.head = HeadKind::kRsseg;
          else if (v == "linear") c.model.head = HeadKind::kLinear;
          else throw ConfigError("head must be rsseg or linear");
        },
        [](const RunConfig& c) { return std::string(c.model.head == HeadKind::kRsseg ? "rsseg" : "linear"); }}},
      RSSEG_INT("image_size", model.backbone.image_size),
      RSSEG_INT("patch_size", model.backbone.patch_size),
      RSSEG_INT("embed_dim", model.backbone.embed_dim),
      RSSEG_INT("depth", model.backbone.depth),
      RSSEG_INT("heads", model.backbone.heads),
      RSSEG_DBL("mlp_ratio", model.backbone.mlp_ratio),
      {"tap_indices",
       {[](RunConfig& c, std::string_view v) { c.model.backbone.tap_indices = parse_list<Index>(v); },
        [](const RunConfig& c) { return join(c.model.backbone.tap_indices); }}},
      RSSEG_INT("local_dim", model.local.input_dim),
      RSSEG_INT("expand_ratio", model.local.expand_ratio),
      RSSEG_INT("lhf_kernel", model.local.lhf_kernel),
      {"local_operator",
       {[](RunConfig& c, std::string_view v) {
          v = trim(v);
          if (v == "lhf") c.model.local.op = LocalOperator::kHighPass;
          else if (v == "conv") c.model.local.op = LocalOperator::kPlainConv;
          else throw ConfigError("local_operator must be lhf or conv");
        },
        [](const RunConfig& c) {
          return std::string(c.model.local.op == LocalOperator::kHighPass ? "lhf" : "conv");
        }}},
      RSSEG_BOOL("boundary_head", model.local.boundary_head),
      RSSEG_INT("sasm_groups", model.sasm.groups),
      RSSEG_INT("sasm_group_dim", model.sasm.group_dim),
      RSSEG_INT("sasm_filter_size", model.sasm.filter_size),
      RSSEG_INT("sasm_up_factor", model.sasm.up_factor),
      RSSEG_INT("sasm_stages", model.sasm.num_stages),
      RSSEG_INT("num_classes", model.decoder.num_classes),
      RSSEG_INT("decoder_depth", model.decoder.depth),
      RSSEG_DBL("scale_init", model.decoder.scale_init),
      RSSEG_BOOL("dca_aux", model.decoder.aux_losses),
      {"loss_mode",
       {[](RunConfig& c, std::string_view v) {
          v = trim(v);
          if (v == "matching") c.model.loss_mode = LossMode::kMatching;
          else if (v == "boundary") c.model.loss_mode = LossMode::kBoundary;
          else throw ConfigError("loss_mode must be matching or boundary");
        },
        [](const RunConfig& c) {
          return std::string(c.model.loss_mode == LossMode::kMatching ? "matching" : "boundary");
        }}},
      RSSEG_DBL("boundary_weight", model.boundary_weight),
      // training
      RSSEG_U64("seed", train.seed),
      RSSEG_DBL("lr", train.lr),
      RSSEG_DBL("weight_decay", train.weight_decay),
      RSSEG_DBL("head_lr_mult", train.head_lr_mult),
      RSSEG_DBL("beta1", train.beta1),
      RSSEG_DBL("beta2", train.beta2),
      RSSEG_INT("iterations", train.iterations),
      RSSEG_INT("batch_size", train.batch_size),
      RSSEG_INT("warmup_iters", train.warmup_iters),
      RSSEG_DBL("poly_power", train.poly_power),
      RSSEG_INT("log_interval", train.log_interval),
      RSSEG_INT("eval_interval", train.eval_interval),
      RSSEG_INT("train_scenes", train.train_scenes),
      RSSEG_INT("eval_scenes", train.eval_scenes),
      {"dtype",
       {[](RunConfig& c, std::string_view v) {
          v = trim(v);
          if (v == "f32") c.train.dtype = DType::kF32;
          else if (v == "f64") c.train.dtype = DType::kF64;
          else throw ConfigError("dtype must be f32 or f64");
        },
        [](const RunConfig& c) { return std::string(c.train.dtype == DType::kF32 ? "f32" : "f64"); }}},
      // data
      RSSEG_U64("data_seed", data.seed),
      RSSEG_DBL("noise_std", data.noise_std),
      RSSEG_DBL("color_jitter", data.color_jitter),
      RSSEG_INT("min_shapes", data.min_shapes),
      RSSEG_INT("max_shapes", data.max_shapes),
      // inference
      RSSEG_INT("window", inference.window),
      RSSEG_INT("stride", inference.stride),
      {"scales",
       {[](RunConfig& c, std::string_view v) { c.inference.scales = parse_list<double>(v); },
        [](const RunConfig& c) { return join(c.inference.scales); }}},
      RSSEG_BOOL("flip", inference.flip),
      // metrics
      RSSEG_DBL("small_area_threshold", metrics.small_area_threshold),
      RSSEG_INT("boundary_tolerance", metrics.boundary_tolerance),
  };
  return table;
}

#undef RSSEG_INT
#undef RSSEG_U64
#undef RSSEG_DBL
#undef RSSEG_BOOL

}  // namespace

std::vector<double> parse_double_list(std::string_view text) { return parse_list<double>(text); }
std::vector<Index> parse_index_list(std::string_view text) { return parse_list<Index>(text); }

RunConfig parse_config(std::string_view text) {
  RunConfig config;
  std::set<std::string, std::less<>> seen;
  Index line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view value = line.substr(eq + 1);
    const auto it = fields().find(key);
    if (it == fields().end())
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + std::string(key) + "'");
    if (!seen.insert(std::string(key)).second)
      throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + std::string(key) + "'");
    try {
      it->second.set(config, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(line_no) + " (" + std::string(key) + "): " + e.what());
    }
  }
  // image size and class count are shared between the model and the data generator
  config.data.image_size = config.model.backbone.image_size;
  config.data.num_classes = config.model.decoder.num_classes;
  config.validate();
  return config;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string format_config(const RunConfig& config) {
  std::ostringstream os;
  for (const auto& [key, field] : fields()) os << key << " = " << field.get(config) << '\n';
  return os.str();
}

}  // namespace rsseg
