#pragma once

// Flat key=value configuration covering the dataset, backbone, both
// training phases and every ablation switch. Precedence: command-line
// override > config file > built-in default.

#include <algorithm>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gfss/augmentation.hpp"
#include "gfss/backbone.hpp"
#include "gfss/classifiers.hpp"
#include "gfss/data.hpp"
#include "gfss/prototypes.hpp"

namespace gfss {

enum class NccMode { off, on, nbcc };
enum class CclMode { off, unlabeled, labeled };
enum class CclSource { base, novel, both };
enum class CclClassifiers { both, base, novel };
enum class StrongAug { cutout, randaugment };
enum class LrSchedule { constant, poly };
enum class AuxBackground { fixed, learned };

struct TrainConfig {
  // dataset
  std::size_t num_classes = 8;
  std::size_t num_folds = 2;
  std::size_t images_per_class = 20;
  std::size_t test_images_per_class = 10;
  std::size_t height = 64;
  std::size_t width = 64;
  std::uint64_t data_seed = 1;
  double context_probability = 0.6;
  std::size_t max_context_objects = 2;
  // explicit split overriding fold blocks, e.g. "1,2,3" (empty = use fold)
  std::string novel_classes;

  // backbone
  std::string backbone_widths = "16,32,32";
  std::string backbone_strides = "1,2,2,1";
  std::size_t feature_dim = 32;
  std::size_t norm_groups = 4;
  double feature_scale = 1.0;

  // protocol
  std::size_t fold = 0;
  std::size_t shots = 1;
  std::uint64_t seed = 1;

  // optimization
  double lr_pretrain = 0.01;
  double lr_finetune = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double grad_clip_finetune = 0;  // phase-2 global gradient-norm cap, 0 disables
  std::size_t epochs_pretrain = 50;
  std::size_t epochs_finetune = 500;
  std::size_t batch_size = 8;
  std::size_t crop_size = 473;
  LrSchedule lr_schedule_pretrain = LrSchedule::poly;
  LrSchedule lr_schedule_finetune = LrSchedule::constant;
  double poly_power = 0.9;
  double init_scale = 1.0;  // std of classifier init, times 1/sqrt(d)

  // auxiliary loss
  double aux_temperature = 0.1;
  AuxBackground aux_background = AuxBackground::fixed;

  // novel prototype modulation
  ModulationMode npm = ModulationMode::attention;
  bool npm_scaled = false;
  bool fusion_bias = true;
  double cosine_scale = 1.0;
  double npm_init_noise = 0.01;

  // novel classifier calibration
  NccMode ncc = NccMode::on;
  SigmaMode ncc_sigma = SigmaMode::per_class;
  CalibrationOrder ncc_order = CalibrationOrder::shift_then_scale;

  // context consistency learning
  CclMode ccl = CclMode::unlabeled;
  CclSource ccl_source = CclSource::base;
  CclClassifiers ccl_classifiers = CclClassifiers::both;
  bool ccl_stop_grad = true;
  double ccl_ratio = 1.0;  // unlabeled batch size / support batch size
  StrongAug strong_aug = StrongAug::cutout;
  CutoutMode cutout_mode = CutoutMode::bcutout;
  std::size_t cutout_size = 16;
  double randaugment_magnitude = 0.5;

  // evaluation
  bool background_with_base = true;

  DatasetSpec dataset_spec() const {
    DatasetSpec s;
    s.num_classes = static_cast<int>(num_classes);
    s.num_folds = static_cast<int>(num_folds);
    s.images_per_class = static_cast<int>(images_per_class);
    s.test_images_per_class = static_cast<int>(test_images_per_class);
    s.height = height;
    s.width = width;
    s.seed = data_seed;
    s.context_probability = context_probability;
    s.max_context_objects = static_cast<int>(max_context_objects);
    return s;
  }

  BackboneConfig backbone_config() const;
  ClassTaxonomy taxonomy() const;
  void validate() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    std::size_t pos = 0;
    long long x = 0;
    try {
      x = std::stoll(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size() || x < 0) throw ConfigError(key + ": bad list element '" + item + "'");
    out.push_back(static_cast<std::size_t>(x));
  }
  return out;
}

template <typename E>
struct EnumNames {
  std::vector<std::pair<E, const char*>> names;

  E parse(const std::string& key, const std::string& v) const {
    for (const auto& [e, n] : names)
      if (v == n) return e;
    std::string allowed;
    for (const auto& [e, n] : names) allowed += (allowed.empty() ? "" : "|") + std::string(n);
    throw ConfigError(key + ": '" + v + "' is not one of " + allowed);
  }
  std::string name(E e) const {
    for (const auto& [x, n] : names)
      if (x == e) return n;
    return "?";
  }
};

inline const EnumNames<NccMode> kNcc{{{NccMode::off, "off"}, {NccMode::on, "on"}, {NccMode::nbcc, "nbcc"}}};
inline const EnumNames<CclMode> kCcl{
    {{CclMode::off, "off"}, {CclMode::unlabeled, "unlabeled"}, {CclMode::labeled, "labeled"}}};
inline const EnumNames<CclSource> kCclSource{
    {{CclSource::base, "base"}, {CclSource::novel, "novel"}, {CclSource::both, "both"}}};
inline const EnumNames<CclClassifiers> kCclClassifiers{
    {{CclClassifiers::both, "both"}, {CclClassifiers::base, "base"}, {CclClassifiers::novel, "novel"}}};
inline const EnumNames<StrongAug> kStrongAug{
    {{StrongAug::cutout, "cutout"}, {StrongAug::randaugment, "randaugment"}}};
inline const EnumNames<CutoutMode> kCutout{{{CutoutMode::bcutout, "bcutout"},
                                            {CutoutMode::wcutout, "wcutout"},
                                            {CutoutMode::ocutout, "ocutout"},
                                            {CutoutMode::icutout, "icutout"}}};
inline const EnumNames<LrSchedule> kSchedule{{{LrSchedule::constant, "constant"}, {LrSchedule::poly, "poly"}}};
inline const EnumNames<AuxBackground> kAuxBg{
    {{AuxBackground::fixed, "fixed"}, {AuxBackground::learned, "learned"}}};
inline const EnumNames<ModulationMode> kNpm{{{ModulationMode::off, "off"},
                                             {ModulationMode::attention, "attention"},
                                             {ModulationMode::cosine, "cosine"}}};
inline const EnumNames<SigmaMode> kSigma{{{SigmaMode::per_class, "per_class"}, {SigmaMode::averaged, "averaged"}}};
inline const EnumNames<CalibrationOrder> kOrder{{{CalibrationOrder::shift_then_scale, "shift_then_scale"},
                                                 {CalibrationOrder::scale_then_shift, "scale_then_shift"}}};

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

// One entry per settable key: how to read it from text and print it back.
struct ConfigKey {
  std::string name;
  std::string help;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

inline const std::vector<ConfigKey>& config_keys() {
  using detail::format_double;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto size_key = [&](const char* name, std::size_t TrainConfig::*m, const char* help) {
      k.push_back({name, help,
                   [name, m](TrainConfig& c, const std::string& v) {
                     std::size_t pos = 0;
                     long long x = -1;
                     try {
                       x = std::stoll(v, &pos);
                     } catch (const std::exception&) {
                       pos = 0;
                     }
                     if (pos != v.size() || x < 0)
                       throw ConfigError(std::string(name) + ": expected a non-negative integer, got '" + v + "'");
                     c.*m = static_cast<std::size_t>(x);
                   },
                   [m](const TrainConfig& c) { return std::to_string(c.*m); }});
    };
    auto u64_key = [&](const char* name, std::uint64_t TrainConfig::*m, const char* help) {
      k.push_back({name, help,
                   [name, m](TrainConfig& c, const std::string& v) {
                     std::size_t pos = 0;
                     unsigned long long x = 0;
                     try {
                       x = std::stoull(v, &pos);
                     } catch (const std::exception&) {
                       pos = 0;
                     }
                     if (pos != v.size() || v.empty() || v[0] == '-')
                       throw ConfigError(std::string(name) + ": expected an unsigned integer, got '" + v + "'");
                     c.*m = x;
                   },
                   [m](const TrainConfig& c) { return std::to_string(c.*m); }});
    };
    auto real_key = [&](const char* name, double TrainConfig::*m, const char* help) {
      k.push_back({name, help,
                   [name, m](TrainConfig& c, const std::string& v) {
                     std::size_t pos = 0;
                     double x = 0;
                     try {
                       x = std::stod(v, &pos);
                     } catch (const std::exception&) {
                       pos = 0;
                     }
                     if (pos != v.size() || v.empty())
                       throw ConfigError(std::string(name) + ": expected a number, got '" + v + "'");
                     c.*m = x;
                   },
                   [m](const TrainConfig& c) { return format_double(c.*m); }});
    };
    auto bool_key = [&](const char* name, bool TrainConfig::*m, const char* help) {
      k.push_back({name, help,
                   [name, m](TrainConfig& c, const std::string& v) {
                     if (v == "true" || v == "on" || v == "1") c.*m = true;
                     else if (v == "false" || v == "off" || v == "0") c.*m = false;
                     else throw ConfigError(std::string(name) + ": expected true/false, got '" + v + "'");
                   },
                   [m](const TrainConfig& c) { return std::string(c.*m ? "true" : "false"); }});
    };
    auto string_key = [&](const char* name, std::string TrainConfig::*m, const char* help) {
      k.push_back({name, help, [m](TrainConfig& c, const std::string& v) { c.*m = v; },
                   [m](const TrainConfig& c) { return c.*m; }});
    };
    auto enum_key = [&](const char* name, auto TrainConfig::*m, const auto& names, const char* help) {
      k.push_back({name, help,
                   [name, m, &names](TrainConfig& c, const std::string& v) { c.*m = names.parse(name, v); },
                   [m, &names](const TrainConfig& c) { return names.name(c.*m); }});
    };

    size_key("num_classes", &TrainConfig::num_classes, "foreground classes in the dataset");
    size_key("num_folds", &TrainConfig::num_folds, "contiguous class folds");
    size_key("images_per_class", &TrainConfig::images_per_class, "synthetic train images per class");
    size_key("test_images_per_class", &TrainConfig::test_images_per_class, "synthetic test images per class");
    size_key("height", &TrainConfig::height, "synthetic image height");
    size_key("width", &TrainConfig::width, "synthetic image width");
    u64_key("data_seed", &TrainConfig::data_seed, "seed of the synthetic dataset");
    real_key("context_probability", &TrainConfig::context_probability, "chance of extra objects per image");
    size_key("max_context_objects", &TrainConfig::max_context_objects, "upper bound on extra objects");
    string_key("novel_classes", &TrainConfig::novel_classes, "explicit novel class list (overrides fold)");
    string_key("backbone_widths", &TrainConfig::backbone_widths, "channels of all but the last block");
    string_key("backbone_strides", &TrainConfig::backbone_strides, "stride of every block (1 or 2)");
    size_key("feature_dim", &TrainConfig::feature_dim, "feature / prototype / classifier dim d");
    size_key("norm_groups", &TrainConfig::norm_groups, "group-norm groups per block");
    real_key("feature_scale", &TrainConfig::feature_scale, "constant gain on extracted features");
    size_key("fold", &TrainConfig::fold, "fold index whose classes are novel");
    size_key("shots", &TrainConfig::shots, "support images per novel class (K)");
    u64_key("seed", &TrainConfig::seed, "root seed of all training randomness");
    real_key("lr_pretrain", &TrainConfig::lr_pretrain, "initial learning rate, phase 1");
    real_key("lr_finetune", &TrainConfig::lr_finetune, "initial learning rate, phase 2");
    real_key("momentum", &TrainConfig::momentum, "SGD momentum");
    real_key("weight_decay", &TrainConfig::weight_decay, "SGD weight decay");
    real_key("grad_clip_finetune", &TrainConfig::grad_clip_finetune, "phase-2 gradient-norm cap (0 = off)");
    size_key("epochs_pretrain", &TrainConfig::epochs_pretrain, "phase 1 epochs");
    size_key("epochs_finetune", &TrainConfig::epochs_finetune, "phase 2 epochs");
    size_key("batch_size", &TrainConfig::batch_size, "images per step (support batch in phase 2)");
    size_key("crop_size", &TrainConfig::crop_size, "square training crop");
    enum_key("lr_schedule_pretrain", &TrainConfig::lr_schedule_pretrain, detail::kSchedule, "constant|poly");
    enum_key("lr_schedule_finetune", &TrainConfig::lr_schedule_finetune, detail::kSchedule, "constant|poly");
    real_key("poly_power", &TrainConfig::poly_power, "exponent of the poly schedule");
    real_key("init_scale", &TrainConfig::init_scale, "classifier init std in units of 1/sqrt(d)");
    real_key("aux_temperature", &TrainConfig::aux_temperature, "temperature of the auxiliary cosine scores");
    enum_key("aux_background", &TrainConfig::aux_background, detail::kAuxBg, "fixed|learned");
    enum_key("npm", &TrainConfig::npm, detail::kNpm, "off|attention|cosine");
    bool_key("npm_scaled", &TrainConfig::npm_scaled, "divide attention scores by sqrt(d)");
    bool_key("fusion_bias", &TrainConfig::fusion_bias, "bias in the fusion layer");
    real_key("cosine_scale", &TrainConfig::cosine_scale, "multiplier on cosine scores (cosine npm)");
    real_key("npm_init_noise", &TrainConfig::npm_init_noise, "std of noise on identity W_Q/W_K/W_V");
    enum_key("ncc", &TrainConfig::ncc, detail::kNcc, "off|on|nbcc");
    enum_key("ncc_sigma", &TrainConfig::ncc_sigma, detail::kSigma, "per_class|averaged");
    enum_key("ncc_order", &TrainConfig::ncc_order, detail::kOrder, "shift_then_scale|scale_then_shift");
    enum_key("ccl", &TrainConfig::ccl, detail::kCcl, "off|unlabeled|labeled");
    enum_key("ccl_source", &TrainConfig::ccl_source, detail::kCclSource, "base|novel|both");
    enum_key("ccl_classifiers", &TrainConfig::ccl_classifiers, detail::kCclClassifiers, "both|base|novel");
    bool_key("ccl_stop_grad", &TrainConfig::ccl_stop_grad, "no gradient through the weak view");
    real_key("ccl_ratio", &TrainConfig::ccl_ratio, "unlabeled batch size relative to the support batch");
    enum_key("strong_aug", &TrainConfig::strong_aug, detail::kStrongAug, "cutout|randaugment");
    enum_key("cutout_mode", &TrainConfig::cutout_mode, detail::kCutout, "bcutout|wcutout|ocutout|icutout");
    size_key("cutout_size", &TrainConfig::cutout_size, "side of the cutout square");
    real_key("randaugment_magnitude", &TrainConfig::randaugment_magnitude, "max photometric magnitude");
    bool_key("background_with_base", &TrainConfig::background_with_base, "count background in base mIoU");
    return k;
  }();
  return keys;
}

inline const ConfigKey& config_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return k;
  throw ConfigError("unknown config key '" + name + "'");
}

inline void set_config_value(TrainConfig& c, const std::string& key, const std::string& value) {
  config_key(key).set(c, detail::trim(value));
}

inline std::string get_config_value(const TrainConfig& c, const std::string& key) {
  return config_key(key).get(c);
}

// Parses "key = value" lines; '#' starts a comment.
inline std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    config_key(key);
    out[key] = detail::trim(line.substr(eq + 1));
  }
  return out;
}

inline void apply_config(TrainConfig& c, const std::map<std::string, std::string>& values) {
  for (const auto& [k, v] : values) set_config_value(c, k, v);
}

inline std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

// defaults, then file values, then overrides
inline TrainConfig resolve_config(const std::string& file,
                                  const std::map<std::string, std::string>& overrides) {
  TrainConfig c;
  if (!file.empty()) apply_config(c, read_config_file(file));
  apply_config(c, overrides);
  c.validate();
  return c;
}

inline std::map<std::string, std::string> config_snapshot(const TrainConfig& c) {
  std::map<std::string, std::string> out;
  for (const auto& k : config_keys()) out[k.name] = k.get(c);
  return out;
}

inline TrainConfig config_from_snapshot(const std::map<std::string, std::string>& snap) {
  TrainConfig c;
  apply_config(c, snap);
  return c;
}

inline std::string config_to_text(const TrainConfig& c) {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + " = " + k.get(c) + "\n";
  return out;
}

inline BackboneConfig TrainConfig::backbone_config() const {
  BackboneConfig b;
  b.widths = detail::parse_size_list("backbone_widths", backbone_widths);
  b.strides = detail::parse_size_list("backbone_strides", backbone_strides);
  b.feature_dim = feature_dim;
  b.norm_groups = norm_groups;
  b.feature_scale = feature_scale;
  return b;
}

inline ClassTaxonomy TrainConfig::taxonomy() const {
  const auto ids = dataset_spec().class_ids();
  if (novel_classes.empty())
    return split_folds(ids, static_cast<int>(num_folds), static_cast<int>(fold));
  std::vector<int> novel, base;
  for (auto v : detail::parse_size_list("novel_classes", novel_classes))
    novel.push_back(static_cast<int>(v));
  for (int id : ids)
    if (std::find(novel.begin(), novel.end(), id) == novel.end()) base.push_back(id);
  for (int id : novel)
    if (std::find(ids.begin(), ids.end(), id) == ids.end())
      throw ConfigError("novel_classes: class " + std::to_string(id) + " is not in the dataset");
  return split_explicit(base, novel);
}

inline void TrainConfig::validate() const {
  dataset_spec().validate();
  backbone_config().validate();
  taxonomy().validate();
  auto positive = [](double v, const char* name) {
    if (!(v > 0)) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(lr_pretrain, "lr_pretrain");
  positive(lr_finetune, "lr_finetune");
  positive(aux_temperature, "aux_temperature");
  positive(static_cast<double>(batch_size), "batch_size");
  positive(static_cast<double>(shots), "shots");
  positive(static_cast<double>(crop_size), "crop_size");
  positive(ccl_ratio, "ccl_ratio");
  positive(init_scale, "init_scale");
  if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must lie in [0, 1)");
  if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  if (grad_clip_finetune < 0) throw ConfigError("grad_clip_finetune must be non-negative");
  if (randaugment_magnitude < 0 || randaugment_magnitude >= 1)
    throw ConfigError("randaugment_magnitude must lie in [0, 1)");
}

}  // namespace gfss
