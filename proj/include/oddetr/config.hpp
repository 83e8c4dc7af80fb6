// SPDX-License-Identifier: Apache-2.0
//
// Training configuration and its INI file format. Every key has a default;
// unknown sections or keys are errors. A single field table drives parsing,
// serialization and the list of known keys, so the three cannot drift.

#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "oddetr/distill.hpp"
#include "oddetr/errors.hpp"
#include "oddetr/matching.hpp"
#include "oddetr/network.hpp"
#include "oddetr/synthdata.hpp"

namespace oddetr {

enum class MdVariant { standard, conditional, cls_only };
enum class PdVariant { naive, tood_weight, tood_listen2stu, query_prior };
enum class ShareDecoder { automatic, on, off };
enum class OptimizerKind { sgd, adam };

struct TrainConfig {
  ModelConfig model{};
  ShareDecoder share_decoder = ShareDecoder::off;
  DataConfig data{};
  LossConfig loss{};
  CostWeights cost{};

  bool md = false;
  bool pd = false;
  bool aux = false;
  MdVariant md_variant = MdVariant::standard;
  double conditional_iou = 0.5;
  PdVariant pd_variant = PdVariant::tood_listen2stu;
  PdClassTarget pd_cls_target = PdClassTarget::full_vector;
  double pd_alpha = 0.25;
  double pd_beta = 0.75;
  AuxVariant aux_variant = AuxVariant::md;

  double ema_decay = 0.99;
  bool stop_update = false;
  int stop_after_epoch = -1;  ///< -1: use lr_decay_epoch

  int epochs = 20;
  int batch_size = 8;
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  double momentum = 0.9;
  int lr_decay_epoch = 16;
  double decay_factor = 0.1;
  double grad_clip = 0.0;  ///< global-norm clip, 0 disables

  std::uint64_t seed = 0;
  int snapshot_scenes = 200;
  bool reference_mode = true;
  int checkpoint_every = 1;

  /// "section.key" entries that were set explicitly by a config file.
  std::set<std::string> explicit_keys;

  bool distill_enabled() const { return md || pd || aux; }

  /// Model config with data-derived sizes and the share-decoder choice filled in.
  ModelConfig resolved_model() const {
    ModelConfig m = model;
    m.grid = data.grid;
    m.num_classes = data.num_classes;
    m.share_decoder = share_decoder == ShareDecoder::automatic ? distill_enabled() : share_decoder == ShareDecoder::on;
    return m;
  }

  std::optional<int> resolved_stop_epoch() const {
    if (!stop_update) return std::nullopt;
    return stop_after_epoch >= 0 ? stop_after_epoch : lr_decay_epoch;
  }

  MdOptions md_options() const {
    MdOptions o;
    o.regression = md_variant != MdVariant::cls_only;
    o.iou_threshold = md_variant == MdVariant::conditional ? conditional_iou : 0.0;
    return o;
  }

  PdOptions pd_options() const {
    PdOptions o;
    o.alpha = pd_alpha;
    o.beta = pd_beta;
    o.gamma = loss.gamma;
    o.reg = loss.reg;
    o.tood_weight = pd_variant == PdVariant::tood_weight || pd_variant == PdVariant::tood_listen2stu;
    o.listen2stu = pd_variant == PdVariant::tood_listen2stu;
    o.regress_all_pairs = pd_variant == PdVariant::naive;
    o.cls_target = pd_cls_target;
    return o;
  }

  SupervisionConfig supervision() const { return SupervisionConfig{cost, loss, md_options()}; }

  void validate() const;
};

namespace detail {

template <class E>
struct EnumNames {
  std::vector<std::pair<E, const char*>> names;

  std::string to_string(E v) const {
    for (const auto& [e, n] : names)
      if (e == v) return n;
    throw std::logic_error("unnamed enum value");
  }
  E parse(const std::string& key, const std::string& s) const {
    std::string allowed;
    for (const auto& [e, n] : names) {
      if (s == n) return e;
      allowed += std::string(allowed.empty() ? "" : "|") + n;
    }
    throw ConfigError(key + ": '" + s + "' is not one of " + allowed);
  }
};

inline const EnumNames<MdVariant> kMdNames{{{MdVariant::standard, "standard"},
                                            {MdVariant::conditional, "conditional"},
                                            {MdVariant::cls_only, "cls_only"}}};
inline const EnumNames<PdVariant> kPdNames{{{PdVariant::naive, "naive"},
                                            {PdVariant::tood_weight, "tood_weight"},
                                            {PdVariant::tood_listen2stu, "tood_listen2stu"},
                                            {PdVariant::query_prior, "query_prior"}}};
inline const EnumNames<AuxVariant> kAuxNames{{{AuxVariant::md, "md"},
                                              {AuxVariant::re_matching, "re_matching"},
                                              {AuxVariant::original_matching, "original_matching"}}};
inline const EnumNames<PdClassTarget> kPdClsNames{
    {{PdClassTarget::full_vector, "full_vector"}, {PdClassTarget::single_entry, "single_entry"}}};
inline const EnumNames<OptimizerKind> kOptNames{{{OptimizerKind::sgd, "sgd"}, {OptimizerKind::adam, "adam"}}};
inline const EnumNames<ShareDecoder> kShareNames{
    {{ShareDecoder::automatic, "auto"}, {ShareDecoder::on, "true"}, {ShareDecoder::off, "false"}}};

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& key, const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + s + "'");
  }
}

inline long long parse_int(const std::string& key, const std::string& s) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected an integer, got '" + s + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "on" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "off" || s == "no") return false;
  throw ConfigError(key + ": expected true/false, got '" + s + "'");
}

struct Field {
  std::string section, key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
  std::string name() const { return section + "." + key; }
};

class FieldTable {
 public:
  void real(const char* sec, const char* key, double& v) {
    const std::string name = std::string(sec) + "." + key;
    add(sec, key, [&v] { return fmt_double(v); }, [&v, name](const std::string& s) { v = parse_double(name, s); });
  }
  template <class Int>
  void integer(const char* sec, const char* key, Int& v) {
    const std::string name = std::string(sec) + "." + key;
    add(sec, key, [&v] { return std::to_string(v); },
        [&v, name](const std::string& s) { v = static_cast<Int>(parse_int(name, s)); });
  }
  void boolean(const char* sec, const char* key, bool& v) {
    const std::string name = std::string(sec) + "." + key;
    add(sec, key, [&v] { return std::string(v ? "true" : "false"); },
        [&v, name](const std::string& s) { v = parse_bool(name, s); });
  }
  template <class E>
  void enumeration(const char* sec, const char* key, E& v, const EnumNames<E>& names) {
    const std::string name = std::string(sec) + "." + key;
    add(sec, key, [&v, &names] { return names.to_string(v); },
        [&v, &names, name](const std::string& s) { v = names.parse(name, s); });
  }

  const std::vector<Field>& fields() const { return fields_; }

 private:
  void add(const char* sec, const char* key, std::function<std::string()> get,
           std::function<void(const std::string&)> set) {
    fields_.push_back({sec, key, std::move(get), std::move(set)});
  }
  std::vector<Field> fields_;
};

inline FieldTable fields_of(TrainConfig& c) {
  FieldTable t;
  t.integer("model", "d_model", c.model.d_model);
  t.integer("model", "num_queries", c.model.num_queries);
  t.integer("model", "num_stages", c.model.num_stages);
  t.integer("model", "ffn_hidden", c.model.ffn_hidden);
  t.enumeration("model", "share_decoder", c.share_decoder, kShareNames);
  t.real("model", "anchor_size", c.model.anchor_size);
  t.real("model", "class_prior", c.model.class_prior);
  t.real("model", "attn_bias_scale", c.model.attn_bias_scale);

  t.integer("data", "seed", c.data.seed);
  t.integer("data", "num_classes", c.data.num_classes);
  t.integer("data", "max_objects", c.data.max_objects);
  t.integer("data", "grid", c.data.grid);
  t.integer("data", "feature_dim", c.data.feature_dim);
  t.integer("data", "train_scenes", c.data.train_scenes);
  t.integer("data", "val_scenes", c.data.val_scenes);
  t.real("data", "min_size", c.data.min_size);
  t.real("data", "max_size", c.data.max_size);
  t.real("data", "max_pair_iou", c.data.max_pair_iou);
  t.real("data", "noise_sigma", c.data.noise_sigma);
  t.integer("data", "rejection_budget", c.data.rejection_budget);

  t.real("loss", "qfl_gamma", c.loss.gamma);
  t.real("loss", "cls_weight", c.loss.cls_weight);
  t.real("loss", "l1_weight", c.loss.reg.l1);
  t.real("loss", "giou_weight", c.loss.reg.giou);
  t.real("loss", "w_d", c.loss.w_d);
  t.boolean("loss", "downweight_reg", c.loss.downweight_reg);
  t.boolean("loss", "downweight_cls", c.loss.downweight_cls);
  t.real("loss", "cost_class", c.cost.cls);
  t.real("loss", "cost_l1", c.cost.l1);
  t.real("loss", "cost_giou", c.cost.giou);
  t.real("loss", "focal_alpha", c.cost.focal_alpha);
  t.real("loss", "focal_gamma", c.cost.focal_gamma);

  t.boolean("distill", "md", c.md);
  t.boolean("distill", "pd", c.pd);
  t.boolean("distill", "aux", c.aux);
  t.enumeration("distill", "md_variant", c.md_variant, kMdNames);
  t.real("distill", "conditional_iou", c.conditional_iou);
  t.enumeration("distill", "pd_variant", c.pd_variant, kPdNames);
  t.enumeration("distill", "pd_cls_target", c.pd_cls_target, kPdClsNames);
  t.real("distill", "pd_alpha", c.pd_alpha);
  t.real("distill", "pd_beta", c.pd_beta);
  t.enumeration("distill", "aux_variant", c.aux_variant, kAuxNames);

  t.real("ema", "decay", c.ema_decay);
  t.boolean("ema", "stop_update", c.stop_update);
  t.integer("ema", "stop_after_epoch", c.stop_after_epoch);

  t.integer("schedule", "epochs", c.epochs);
  t.integer("schedule", "batch_size", c.batch_size);
  t.real("schedule", "lr", c.lr);
  t.enumeration("schedule", "optimizer", c.optimizer, kOptNames);
  t.real("schedule", "momentum", c.momentum);
  t.integer("schedule", "lr_decay_epoch", c.lr_decay_epoch);
  t.real("schedule", "decay_factor", c.decay_factor);
  t.real("schedule", "grad_clip", c.grad_clip);

  t.integer("run", "seed", c.seed);
  t.integer("run", "snapshot_scenes", c.snapshot_scenes);
  t.boolean("run", "reference_mode", c.reference_mode);
  t.integer("run", "checkpoint_every", c.checkpoint_every);
  return t;
}

}  // namespace detail

inline void TrainConfig::validate() const {
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  // A variant key set away from its default while its toggle is off is
  // almost certainly a mistake in an ablation grid.
  TrainConfig self = *this, defaults;
  const auto mine = detail::fields_of(self).fields();
  const auto base = detail::fields_of(defaults).fields();
  auto set = [&](const std::string& k) {
    if (!explicit_keys.count(k)) return false;
    for (std::size_t i = 0; i < mine.size(); ++i)
      if (mine[i].name() == k) return mine[i].get() != base[i].get();
    return false;
  };
  for (const char* k : {"distill.md_variant", "distill.conditional_iou"})
    need(!set(k) || md, std::string(k) + " requires distill.md = true");
  need(!set("distill.conditional_iou") || md_variant == MdVariant::conditional,
       "distill.conditional_iou requires distill.md_variant = conditional");
  for (const char* k : {"distill.pd_variant", "distill.pd_cls_target", "distill.pd_alpha", "distill.pd_beta"})
    need(!set(k) || pd, std::string(k) + " requires distill.pd = true");
  need(!set("distill.aux_variant") || aux, "distill.aux_variant requires distill.aux = true");
  need(!set("ema.stop_after_epoch") || stop_update, "ema.stop_after_epoch requires ema.stop_update = true");

  need(model.d_model > 0 && model.num_queries > 0 && model.num_stages > 0 && model.ffn_hidden > 0,
       "model sizes must be positive");
  need(model.class_prior > 0 && model.class_prior < 1, "model.class_prior must lie in (0,1)");
  need(model.anchor_size > 0 && model.anchor_size <= 1, "model.anchor_size must lie in (0,1]");
  need(data.num_classes > 0 && data.grid > 0 && data.feature_dim == model.d_model,
       "data.feature_dim must equal model.d_model");
  need(data.max_objects <= model.num_queries, "data.max_objects exceeds model.num_queries");
  need(data.train_scenes > 0 && data.val_scenes > 0, "data splits must be non-empty");
  need(snapshot_scenes > 0 && snapshot_scenes <= data.val_scenes, "run.snapshot_scenes must lie in [1, val_scenes]");
  need(loss.w_d >= 0 && loss.w_d <= 1, "loss.w_d must lie in [0,1]");
  need(conditional_iou >= 0 && conditional_iou <= 1, "distill.conditional_iou must lie in [0,1]");
  need(pd_alpha >= 0 && pd_beta >= 0, "distill.pd_alpha/pd_beta must be non-negative");
  need(ema_decay >= 0 && ema_decay < 1, "ema.decay must lie in [0,1)");
  need(epochs > 0 && batch_size > 0 && lr > 0, "schedule: epochs, batch_size and lr must be positive");
  need(momentum >= 0 && momentum < 1, "schedule.momentum must lie in [0,1)");
  need(decay_factor > 0, "schedule.decay_factor must be positive");
  need(grad_clip >= 0, "schedule.grad_clip must be non-negative");
  need(checkpoint_every >= 1, "run.checkpoint_every must be at least 1");
}

/// Applies "section.key = value" overrides (used by ablation grids).
inline void apply_override(TrainConfig& cfg, const std::string& name, const std::string& value) {
  const auto table = detail::fields_of(cfg);
  for (const auto& f : table.fields())
    if (f.name() == name) {
      f.set(value);
      cfg.explicit_keys.insert(name);
      return;
    }
  throw ConfigError("unknown config key '" + name + "'");
}

inline TrainConfig parse_config(std::istream& in) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }
  TrainConfig cfg;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError("key '" + section + "' outside any section");
    for (const auto& [key, value] : body) apply_override(cfg, section + "." + key, value.data());
  }
  cfg.validate();
  return cfg;
}

inline TrainConfig parse_config_string(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  return parse_config(in);
}

/// Full INI listing of every key (defaults included).
inline std::string to_ini(const TrainConfig& cfg) {
  TrainConfig copy = cfg;
  std::ostringstream out;
  std::string section;
  const auto table = detail::fields_of(copy);
  for (const auto& f : table.fields()) {
    if (f.section != section) {
      out << (section.empty() ? "" : "\n") << '[' << f.section << "]\n";
      section = f.section;
    }
    out << f.key << " = " << f.get() << '\n';
  }
  return out.str();
}

inline std::vector<std::string> known_config_keys() {
  TrainConfig c;
  std::vector<std::string> out;
  const auto table = detail::fields_of(c);
  for (const auto& f : table.fields()) out.push_back(f.name());
  return out;
}

}  // namespace oddetr
