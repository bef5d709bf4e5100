#pragma once

// Run configuration: an INI file with [sections] of key = value pairs. Every
// field is addressable as "section.key" (also for --override), unknown keys
// are errors, and the canonical echo round-trips exactly.

#include <openssl/evp.h>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "ideaprune/corpus.hpp"
#include "ideaprune/error.hpp"
#include "ideaprune/optim.hpp"
#include "ideaprune/prune.hpp"
#include "ideaprune/schedule.hpp"
#include "ideaprune/transformer.hpp"

namespace ideaprune {

enum class RunMode { from_scratch, integrated, naive, resume_ablation };
enum class PruneMethod { iterative_sensitivity, osrp, minitron };
enum class ResumeLr { resumed, restarted };
enum class DataSource { synthetic, corpus };

inline constexpr std::int64_t kAuto = -1;

struct RunConfig {
  // [run]
  RunMode mode = RunMode::integrated;
  std::uint64_t seed = 0;
  PruneMethod method = PruneMethod::iterative_sensitivity;
  ResumeLr resume_lr = ResumeLr::resumed;
  std::string init_checkpoint;

  // [model]
  ModelConfig model;
  std::int64_t target_ffn_hidden = kAuto;  // auto: no pruning

  // [stages]
  StageLengths stages{200, 100, 100};

  // [schedule]
  double eta_p = 0.01;
  double eta_e = 5e-5;
  std::int64_t warmup = 10;
  CosineDenominator denominator = CosineDenominator::normalized;
  double eta[6] = {0.01, 5e-5, 0.01, 5e-5, 0.01, 5e-5};  // naive stages
  std::int64_t stage_warmup[3] = {10, 10, 10};
  std::int64_t restart_warmup = 10;

  // [sparsity]
  double sparsity_target = -1.0;  // auto: 1 - target/h
  std::int64_t sparsity_warmup = kAuto;
  std::int64_t sparsity_steps = kAuto;

  // [importance]
  double lambda = 0.4;
  CombineSpec combine{Reduce::mean, Reduce::max};

  // [optim]
  AdamConfig adam;

  // [kd]
  bool kd_enabled = false;
  std::string kd_teacher;
  double kd_alpha = 0.5;
  double kd_tau = 1.0;

  // [minitron]
  std::int64_t calibration_samples = 256;

  // [data]
  DataSource source = DataSource::synthetic;
  std::string corpus_path;
  double heldout_fraction = 0.1;
  std::uint64_t split_seed = 1234;
  SyntheticSpec synthetic;

  // [train]
  std::int64_t batch_size = 32;

  // [eval]
  std::int64_t eval_every = kAuto;  // auto: 2% of total steps
  std::int64_t eval_sequences = 64;
  std::int64_t eval_batch = 16;

  // [checkpoint]
  std::int64_t checkpoint_every = 0;

  // ---- derived views ----

  std::int64_t total_steps() const { return stages.total(); }

  bool prunes() const { return mode != RunMode::from_scratch; }

  std::size_t target_hidden() const {
    return target_ffn_hidden == kAuto ? model.ffn_hidden : static_cast<std::size_t>(target_ffn_hidden);
  }

  double target_sparsity() const {
    if (sparsity_target >= 0.0) return sparsity_target;
    return 1.0 - static_cast<double>(target_hidden()) / static_cast<double>(model.ffn_hidden);
  }

  CosineSpec global_cosine() const { return {total_steps(), warmup, eta_p, eta_e, denominator}; }

  CosineSpec restart_cosine() const {
    return {stages.prune + stages.recover, restart_warmup, eta_p, eta_e, denominator};
  }

  NaiveScheduleSpec naive_schedule() const {
    return {{stages.pretrain, stage_warmup[0], eta[0], eta[1], denominator},
            {stages.prune, stage_warmup[1], eta[2], eta[3], denominator},
            {stages.recover, stage_warmup[2], eta[4], eta[5], denominator}};
  }

  /// Sparsity ramp on the pruning clock (step - T_l).
  SparsitySpec sparsity_spec() const {
    SparsitySpec s;
    s.target = target_sparsity();
    if (method != PruneMethod::iterative_sensitivity) {
      s.warmup = 0;
      s.steps = 1;
      return s;
    }
    s.warmup = sparsity_warmup != kAuto ? sparsity_warmup : (mode == RunMode::naive ? stage_warmup[1] : 0);
    s.steps = sparsity_steps != kAuto ? sparsity_steps : stages.prune - s.warmup;
    return s;
  }

  std::int64_t effective_eval_every() const {
    return eval_every != kAuto ? eval_every : std::max<std::int64_t>(1, total_steps() / 50);
  }

  void validate() const {
    model.validate();
    if (stages.pretrain < 0 || stages.prune < 0 || stages.recover < 0 || total_steps() < 1) {
      throw ConfigError("stages: lengths must be >= 0 with a positive total");
    }
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (eval_sequences < 1 || eval_batch < 1) throw ConfigError("eval: sequences and batch must be >= 1");
    if (effective_eval_every() < 1) throw ConfigError("eval.every must be >= 1");
    if (checkpoint_every < 0) throw ConfigError("checkpoint.every must be >= 0");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("importance.lambda must lie in [0, 1]");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 && adam.eps > 0.0)) {
      throw ConfigError("optim: need 0 <= beta < 1 and eps > 0");
    }
    if (kd_enabled) {
      if (kd_teacher.empty()) throw ConfigError("kd.teacher is required when kd.enabled = true");
      if (!(kd_alpha >= 0.0 && kd_alpha <= 1.0) || !(kd_tau > 0.0)) throw ConfigError("kd: need alpha in [0,1], tau > 0");
    }
    if (source == DataSource::corpus && corpus_path.empty()) throw ConfigError("data.corpus is required");

    if (mode == RunMode::naive) {
      naive_schedule().validate();
    } else {
      global_cosine().validate();
    }
    if (!prunes()) return;

    if (stages.prune < 1) throw ConfigError("stages.prune must be >= 1 when pruning");
    if (mode == RunMode::resume_ablation) {
      if (init_checkpoint.empty()) throw ConfigError("run.init_checkpoint is required for resume_ablation");
      if (resume_lr == ResumeLr::restarted) restart_cosine().validate();
    }
    const std::size_t h = model.ffn_hidden;
    if (target_hidden() < 1 || target_hidden() > h) {
      throw ConfigError("model.target_ffn_hidden must lie in [1, ffn_hidden]");
    }
    const SparsitySpec s = sparsity_spec();
    s.validate();
    if (retained_for_sparsity(s.target, h) != target_hidden()) {
      throw ConfigError("sparsity.target " + std::to_string(s.target) + " keeps " +
                        std::to_string(retained_for_sparsity(s.target, h)) + " of " + std::to_string(h) +
                        " neurons, but model.target_ffn_hidden is " + std::to_string(target_hidden()));
    }
    if (s.end() > stages.prune) {
      throw ConfigError("sparsity warmup + steps (" + std::to_string(s.end()) + ") exceed stages.prune (" +
                        std::to_string(stages.prune) + ")");
    }
    if (method == PruneMethod::minitron && calibration_samples < 1) {
      throw ConfigError("minitron.calibration_samples must be >= 1");
    }
  }
};

// ---------------------------------------------------------------------------
// Text conversion

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ConfigError(key + ": not a number: '" + s + "'");
  return v;
}

template <class Int>
Int parse_int(const std::string& key, const std::string& s) {
  Int v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ConfigError(key + ": not an integer: '" + s + "'");
  return v;
}

inline std::string to_string(RunMode m) {
  switch (m) {
    case RunMode::from_scratch: return "from_scratch";
    case RunMode::integrated: return "integrated";
    case RunMode::naive: return "naive";
    case RunMode::resume_ablation: return "resume_ablation";
  }
  return "?";
}

inline std::string to_string(PruneMethod m) {
  switch (m) {
    case PruneMethod::iterative_sensitivity: return "iterative_sensitivity";
    case PruneMethod::osrp: return "osrp";
    case PruneMethod::minitron: return "minitron";
  }
  return "?";
}

inline std::string to_string(ResumeLr m) { return m == ResumeLr::resumed ? "resumed" : "restarted"; }
inline std::string to_string(DataSource s) { return s == DataSource::synthetic ? "synthetic" : "corpus"; }
inline std::string to_string(CosineDenominator d) {
  return d == CosineDenominator::normalized ? "normalized" : "as_printed";
}

namespace detail {

struct Field {
  std::string key;  // section.name
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class Member>
Field int_field(std::string key, Member member, bool allow_auto = false) {
  return {key,
          [member, allow_auto](const RunConfig& c) {
            const auto v = member(const_cast<RunConfig&>(c));
            if (allow_auto && static_cast<std::int64_t>(v) == kAuto) return std::string("auto");
            return std::to_string(v);
          },
          [member, allow_auto, key](RunConfig& c, const std::string& s) {
            auto& ref = member(c);
            using T = std::remove_reference_t<decltype(ref)>;
            if (allow_auto && s == "auto") {
              ref = static_cast<T>(kAuto);
              return;
            }
            ref = parse_int<T>(key, s);
            if constexpr (std::is_signed_v<T>) {
              if (ref < 0) throw ConfigError(key + ": must be non-negative");
            }
          }};
}

template <class Member>
Field double_field(std::string key, Member member, bool allow_auto = false) {
  return {key,
          [member, allow_auto](const RunConfig& c) {
            const double v = member(const_cast<RunConfig&>(c));
            if (allow_auto && v < 0.0) return std::string("auto");
            return format_double(v);
          },
          [member, allow_auto, key](RunConfig& c, const std::string& s) {
            if (allow_auto && s == "auto") {
              member(c) = -1.0;
              return;
            }
            const double v = parse_double(key, s);
            if (!std::isfinite(v)) throw ConfigError(key + ": must be finite");
            member(c) = v;
          }};
}

template <class Member>
Field string_field(std::string key, Member member) {
  return {key, [member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)); },
          [member](RunConfig& c, const std::string& s) { member(c) = s; }};
}

template <class Member>
Field bool_field(std::string key, Member member) {
  return {key, [member](const RunConfig& c) { return std::string(member(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [member, key](RunConfig& c, const std::string& s) {
            if (s == "true" || s == "1") {
              member(c) = true;
            } else if (s == "false" || s == "0") {
              member(c) = false;
            } else {
              throw ConfigError(key + ": expected true or false, got '" + s + "'");
            }
          }};
}

template <class E, class Member>
Field enum_field(std::string key, Member member, std::initializer_list<E> options) {
  std::vector<E> opts(options);
  return {key, [member](const RunConfig& c) { return to_string(member(const_cast<RunConfig&>(c))); },
          [member, key, opts](RunConfig& c, const std::string& s) {
            for (E e : opts) {
              if (to_string(e) == s) {
                member(c) = e;
                return;
              }
            }
            std::string allowed;
            for (E e : opts) allowed += (allowed.empty() ? "" : ", ") + to_string(e);
            throw ConfigError(key + ": unknown value '" + s + "' (allowed: " + allowed + ")");
          }};
}

#define IDP_M(expr) [](RunConfig& c) -> auto& { return expr; }

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(enum_field<RunMode>("run.mode", IDP_M(c.mode),
                                    {RunMode::from_scratch, RunMode::integrated, RunMode::naive,
                                     RunMode::resume_ablation}));
    f.push_back(int_field("run.seed", IDP_M(c.seed)));
    f.push_back(enum_field<PruneMethod>("run.pruning_method", IDP_M(c.method),
                                        {PruneMethod::iterative_sensitivity, PruneMethod::osrp,
                                         PruneMethod::minitron}));
    f.push_back(enum_field<ResumeLr>("run.resume_lr", IDP_M(c.resume_lr), {ResumeLr::resumed, ResumeLr::restarted}));
    f.push_back(string_field("run.init_checkpoint", IDP_M(c.init_checkpoint)));

    f.push_back(int_field("model.d_model", IDP_M(c.model.d_model)));
    f.push_back(int_field("model.n_heads", IDP_M(c.model.n_heads)));
    f.push_back(int_field("model.n_layers", IDP_M(c.model.n_layers)));
    f.push_back(int_field("model.ffn_hidden", IDP_M(c.model.ffn_hidden)));
    f.push_back(int_field("model.target_ffn_hidden", IDP_M(c.target_ffn_hidden), true));
    f.push_back(int_field("model.vocab_size", IDP_M(c.model.vocab_size)));
    f.push_back(int_field("model.seq_len", IDP_M(c.model.seq_len)));
    f.push_back(double_field("model.norm_eps", IDP_M(c.model.norm_eps)));
    f.push_back(double_field("model.init_std", IDP_M(c.model.init_std)));

    f.push_back(int_field("stages.pretrain", IDP_M(c.stages.pretrain)));
    f.push_back(int_field("stages.prune", IDP_M(c.stages.prune)));
    f.push_back(int_field("stages.recover", IDP_M(c.stages.recover)));

    f.push_back(double_field("schedule.eta_p", IDP_M(c.eta_p)));
    f.push_back(double_field("schedule.eta_e", IDP_M(c.eta_e)));
    f.push_back(int_field("schedule.warmup", IDP_M(c.warmup)));
    f.push_back(enum_field<CosineDenominator>("schedule.cosine_denominator", IDP_M(c.denominator),
                                              {CosineDenominator::normalized, CosineDenominator::as_printed}));
    f.push_back(double_field("schedule.eta1", IDP_M(c.eta[0])));
    f.push_back(double_field("schedule.eta2", IDP_M(c.eta[1])));
    f.push_back(double_field("schedule.eta3", IDP_M(c.eta[2])));
    f.push_back(double_field("schedule.eta4", IDP_M(c.eta[3])));
    f.push_back(double_field("schedule.eta5", IDP_M(c.eta[4])));
    f.push_back(double_field("schedule.eta6", IDP_M(c.eta[5])));
    f.push_back(int_field("schedule.warmup_pretrain", IDP_M(c.stage_warmup[0])));
    f.push_back(int_field("schedule.warmup_prune", IDP_M(c.stage_warmup[1])));
    f.push_back(int_field("schedule.warmup_recover", IDP_M(c.stage_warmup[2])));
    f.push_back(int_field("schedule.restart_warmup", IDP_M(c.restart_warmup)));

    f.push_back(double_field("sparsity.target", IDP_M(c.sparsity_target), true));
    f.push_back(int_field("sparsity.warmup", IDP_M(c.sparsity_warmup), true));
    f.push_back(int_field("sparsity.steps", IDP_M(c.sparsity_steps), true));

    f.push_back(double_field("importance.lambda", IDP_M(c.lambda)));
    f.push_back(enum_field<Reduce>("importance.f1", IDP_M(c.combine.row), {Reduce::mean, Reduce::max}));
    f.push_back(enum_field<Reduce>("importance.f2", IDP_M(c.combine.across), {Reduce::mean, Reduce::max}));

    f.push_back(double_field("optim.beta1", IDP_M(c.adam.beta1)));
    f.push_back(double_field("optim.beta2", IDP_M(c.adam.beta2)));
    f.push_back(double_field("optim.eps", IDP_M(c.adam.eps)));
    f.push_back(double_field("optim.weight_decay", IDP_M(c.adam.weight_decay)));
    f.push_back(double_field("optim.grad_clip", IDP_M(c.adam.grad_clip)));

    f.push_back(bool_field("kd.enabled", IDP_M(c.kd_enabled)));
    f.push_back(string_field("kd.teacher", IDP_M(c.kd_teacher)));
    f.push_back(double_field("kd.alpha", IDP_M(c.kd_alpha)));
    f.push_back(double_field("kd.tau", IDP_M(c.kd_tau)));

    f.push_back(int_field("minitron.calibration_samples", IDP_M(c.calibration_samples)));

    f.push_back(enum_field<DataSource>("data.source", IDP_M(c.source), {DataSource::synthetic, DataSource::corpus}));
    f.push_back(string_field("data.corpus", IDP_M(c.corpus_path)));
    f.push_back(double_field("data.heldout_fraction", IDP_M(c.heldout_fraction)));
    f.push_back(int_field("data.split_seed", IDP_M(c.split_seed)));
    f.push_back(int_field("data.synthetic_seed", IDP_M(c.synthetic.seed)));
    f.push_back(int_field("data.synthetic_documents", IDP_M(c.synthetic.documents)));
    f.push_back(int_field("data.synthetic_lexicon", IDP_M(c.synthetic.lexicon)));

    f.push_back(int_field("train.batch_size", IDP_M(c.batch_size)));

    f.push_back(int_field("eval.every", IDP_M(c.eval_every), true));
    f.push_back(int_field("eval.sequences", IDP_M(c.eval_sequences)));
    f.push_back(int_field("eval.batch_size", IDP_M(c.eval_batch)));

    f.push_back(int_field("checkpoint.every", IDP_M(c.checkpoint_every)));
    return f;
  }();
  return table;
}

#undef IDP_M

inline const Field& find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace detail

/// Sets one "section.key" field from text.
inline void apply_override(RunConfig& c, const std::string& key, const std::string& value) {
  detail::find_field(key).set(c, value);
}

/// Parses "section.key=value".
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like section.key=value: '" + assignment + "'");
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  apply_override(c, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

inline RunConfig parse_config(const std::string& text) {
  boost::property_tree::ptree pt;
  std::istringstream is(text);
  try {
    boost::property_tree::ini_parser::read_ini(is, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  RunConfig c;
  for (const auto& [section, body] : pt) {
    if (body.empty()) throw ConfigError("key '" + section + "' must live inside a [section]");
    for (const auto& [key, value] : body) apply_override(c, section + "." + key, value.data());
  }
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return parse_config(os.str());
}

/// Canonical INI text: every field, fixed order, shortest round-trip numbers.
inline std::string canonical_text(const RunConfig& c) {
  boost::property_tree::ptree pt;
  for (const auto& f : detail::fields()) {
    const auto dot = f.key.find('.');
    pt.add_child(boost::property_tree::ptree::path_type(f.key.substr(0, dot) + "\x1f" + f.key.substr(dot + 1), '\x1f'),
                 boost::property_tree::ptree(f.get(c)));
  }
  std::ostringstream os;
  boost::property_tree::ini_parser::write_ini(os, pt);
  return os.str();
}

inline std::string config_value(const RunConfig& c, const std::string& key) { return detail::find_field(key).get(c); }

namespace detail {

/// git hash-object framing: sha1("blob <len>\0" + body).
inline std::string git_blob_sha1(const std::string& body) {
  std::string obj = "blob " + std::to_string(body.size());
  obj.push_back('\0');
  obj += body;
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(obj.data(), obj.size(), digest, &len, EVP_sha1(), nullptr) != 1) throw InternalError("sha1 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

}  // namespace detail

inline std::string config_hash(const RunConfig& c) { return detail::git_blob_sha1(canonical_text(c)); }

}  // namespace ideaprune
