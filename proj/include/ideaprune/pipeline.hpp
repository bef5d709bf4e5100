#pragma once

// Training orchestration for every run mode:
//   from_scratch     one cosine over the whole budget, no pruning
//   integrated       one cosine over T_l + T_p + T_r; prune during (T_l, T_l + T_p]
//   naive            three independent warmup + cosine stages
//   resume_ablation  start from a step-T_l checkpoint with a resumed or restarted schedule
//
// Per-step order: gradient, lr, Adam update, sensitivity update, score
// combination, mask selection, mask application (plus optimizer-state
// masking). One-shot methods prune once at the start of step T_l + 1.
// Batches are a pure function of (seed, step), so a run restored from a
// checkpoint continues bit-identically.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ideaprune/checkpoint.hpp"
#include "ideaprune/config.hpp"
#include "ideaprune/corpus.hpp"
#include "ideaprune/error.hpp"
#include "ideaprune/kd.hpp"
#include "ideaprune/metrics.hpp"
#include "ideaprune/optim.hpp"
#include "ideaprune/prune.hpp"
#include "ideaprune/schedule.hpp"
#include "ideaprune/transformer.hpp"

namespace ideaprune {

struct RunData {
  std::vector<std::uint16_t> train_tokens;
  std::vector<std::uint16_t> heldout_tokens;
  std::vector<ManifestEntry> manifest;
  std::size_t train_documents = 0;
  std::size_t heldout_documents = 0;
};

/// Reads a corpus cache, a single text file, or every regular file of a directory (sorted).
inline TokenizedCorpus load_corpus_any(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(path))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    return ingest(files);
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read corpus " + path.string());
  char magic[8] = {};
  in.read(magic, 8);
  if (in.gcount() == 8 && std::memcmp(magic, kCorpusMagic, 8) == 0) return load_corpus(path);
  return ingest({path});
}

inline RunData load_run_data(const RunConfig& c) {
  const TokenizedCorpus corpus = c.source == DataSource::synthetic ? synthetic_corpus(c.synthetic)
                                                                   : load_corpus_any(c.corpus_path);
  CorpusSplit s = split_corpus(corpus, c.heldout_fraction, c.split_seed);
  return {std::move(s.train_tokens), std::move(s.heldout_tokens), corpus.manifest, s.train_docs.size(),
          s.heldout_docs.size()};
}

/// exp(mean next-token NLL) over every position of every batch.
inline double evaluate_perplexity(const ModelConfig& cfg, const ModelWeights& w, std::span<const Batch> batches,
                                  const NeuronMask* mask = nullptr) {
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& b : batches) {
    const ForwardCache fc = model_forward(cfg, w, b, mask);
    for (std::size_t n = 0; n < fc.logits.rows; ++n) nll += log_sum_exp(fc.logits.row(n)) - fc.logits(n, b.targets[n]);
    count += b.tokens();
  }
  if (count == 0) throw DataError("evaluate_perplexity: empty held-out set");
  return std::exp(nll / static_cast<double>(count));
}

struct Teacher {
  ModelConfig model;
  ModelWeights weights;
  std::string config_text;
};

inline Teacher load_teacher(const std::filesystem::path& path) {
  Checkpoint c = load_checkpoint(path);
  return {c.model, std::move(c.weights), std::move(c.config_text)};
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  detail::write_file_atomic(path, text);
}

class Trainer {
 public:
  /// Fresh run (or, for resume_ablation, a run seeded from run.init_checkpoint).
  Trainer(RunConfig cfg, std::shared_ptr<const RunData> data, std::optional<Teacher> teacher = std::nullopt)
      : cfg_(std::move(cfg)), data_(std::move(data)), teacher_(std::move(teacher)) {
    cfg_.validate();
    model_ = cfg_.model;
    if (cfg_.mode == RunMode::resume_ablation) {
      adopt_initial_checkpoint(load_checkpoint(cfg_.init_checkpoint));
    } else {
      Rng init(derive_seed(cfg_.seed, "init"));
      w_ = init_weights(model_, init);
      opt_ = OptimizerState::zeros_like(w_, cfg_.adam);
      mask_ = NeuronMask::all_ones(model_.n_layers, model_.ffn_hidden);
      rng_ = Rng(derive_seed(cfg_.seed, "train"));
    }
    init_common();
  }

  /// Continues a run from one of its own checkpoints.
  static Trainer resume(RunConfig cfg, const Checkpoint& ckpt, std::shared_ptr<const RunData> data,
                        std::optional<Teacher> teacher = std::nullopt) {
    cfg.validate();
    if (ckpt.config_text != canonical_text(cfg)) {
      throw ConfigError("checkpoint was written by a different config (hash " + detail::git_blob_sha1(ckpt.config_text) +
                        ", this run " + config_hash(cfg) + ")");
    }
    Trainer t(std::move(cfg), std::move(data), std::move(teacher), ckpt);
    return t;
  }

  void set_output_dir(std::filesystem::path dir) { out_dir_ = std::move(dir); }

  std::int64_t total_steps() const { return cfg_.total_steps(); }
  std::int64_t step() const { return step_; }
  bool done() const { return step_ >= total_steps(); }

  void run() { run_until(total_steps()); }

  void run_until(std::int64_t last) {
    last = std::min(last, total_steps());
    while (step_ < last) step_once();
  }

  /// One optimizer step: global step t = step() + 1.
  void step_once() {
    const std::int64_t t = step_ + 1;
    const auto started = std::chrono::steady_clock::now();
    const std::int64_t tau = t - cfg_.stages.pretrain;  // pruning clock
    const bool pruning_phase = cfg_.prunes() && tau >= 1 && tau <= cfg_.stages.prune;

    if (pruning_phase && !compacted_ && cfg_.method != PruneMethod::iterative_sensitivity && tau == 1) {
      prune_one_shot(t);
    }

    const Batch batch = stream_->batch(static_cast<std::uint64_t>(t - 1));
    const NeuronMask* mask = compacted_ ? nullptr : &mask_;
    const ForwardCache fc = model_forward(model_, w_, batch, mask);
    double train_loss;
    Tensor2D d_logits;
    if (kd_active(t)) {
      const ForwardCache tc = model_forward(teacher_->model, teacher_->weights, batch);
      KdResult kd = kd_loss(fc.logits, tc.logits, batch.targets, cfg_.kd_alpha, cfg_.kd_tau);
      train_loss = kd.ce;
      if (!std::isfinite(kd.loss)) abort_non_finite(t, "loss");
      d_logits = std::move(kd.d_logits);
    } else {
      LossResult ce = cross_entropy(fc.logits, batch.targets);
      train_loss = ce.loss;
      d_logits = std::move(ce.d_logits);
    }
    if (!std::isfinite(train_loss)) abort_non_finite(t, "loss");
    const ModelWeights grads = model_backward(model_, w_, fc, d_logits, mask);

    const double lr = lr_at(t);
    const bool iterative = pruning_phase && !compacted_ && cfg_.method == PruneMethod::iterative_sensitivity;
    std::vector<FfnWeights> pre_update;
    if (iterative) pre_update = ffn_snapshot(w_);
    try {
      adam_step(w_, grads, opt_, lr);
    } catch (const NonFiniteError&) {
      abort_non_finite(t, "gradient");
    }

    if (iterative) {
      const std::vector<FfnWeights> g = ffn_snapshot(grads);
      update_sensitivity(imp_, pre_update, g);
      for (std::size_t l = 0; l < model_.n_layers; ++l) {
        const Tensor1D c = combine_neuron_scores(imp_, l);
        select_mask(c.values, tau, spec_, mask_, l);
        trace_.push_back(trace_row(t, l, c.values));
      }
      apply_mask(w_, mask_);
      mask_optimizer_state(opt_, mask_);
      if (tau == spec_.end()) compact_now(t, tau);
    }

    step_ = t;
    MetricsRow row;
    row.step = t;
    row.phase = phase_name(t);
    row.lr = lr;
    row.sparsity = scheduled_sparsity(t);
    row.retained = compacted_ ? model_.ffn_hidden : mask_.retained(0);
    row.train_loss = train_loss;
    if (t % cfg_.effective_eval_every() == 0 || t == total_steps()) row.heldout_ppl = heldout_perplexity();
    metrics_.push_back(row);
    wall_ms_ += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();

    if (out_dir_) {
      if (cfg_.prunes() && cfg_.mode != RunMode::resume_ablation && t == cfg_.stages.pretrain) {
        save_checkpoint(checkpoint(), *out_dir_ / "pretrain_end.ckpt");
      }
      if (cfg_.checkpoint_every > 0 && t % cfg_.checkpoint_every == 0) {
        save_checkpoint(checkpoint(), *out_dir_ / ("step_" + std::to_string(t) + ".ckpt"));
      }
    }
  }

  Checkpoint checkpoint() const {
    return {canonical_text(cfg_), step_, model_, w_, opt_, imp_, mask_, compacted_, rng_.serialize()};
  }

  double heldout_perplexity() const {
    return evaluate_perplexity(model_, w_, heldout_, compacted_ ? nullptr : &mask_);
  }

  double lr_at(std::int64_t t) const {
    switch (cfg_.mode) {
      case RunMode::naive:
        return naive_pipeline_lr(t, cfg_.naive_schedule());
      case RunMode::resume_ablation:
        return cfg_.resume_lr == ResumeLr::resumed
                   ? resumed_lr(t - cfg_.stages.pretrain, cfg_.stages, cfg_.global_cosine())
                   : restarted_lr(t - cfg_.stages.pretrain, cfg_.stages, cfg_.restart_cosine());
      default:
        return integrated_lr(t, cfg_.stages, cfg_.global_cosine());
    }
  }

  double scheduled_sparsity(std::int64_t t) const {
    if (!cfg_.prunes()) return 0.0;
    const std::int64_t tau = t - cfg_.stages.pretrain;
    if (tau < 1) return 0.0;
    return cfg_.method == PruneMethod::iterative_sensitivity ? sparsity_at(tau, spec_) : spec_.target;
  }

  std::string phase_name(std::int64_t t) const {
    if (!cfg_.prunes()) return "train";
    if (t <= cfg_.stages.pretrain) return "pretrain";
    if (t <= cfg_.stages.pretrain + cfg_.stages.prune) return "prune";
    return "recover";
  }

  const RunConfig& config() const { return cfg_; }
  const ModelConfig& model() const { return model_; }
  const ModelWeights& weights() const { return w_; }
  const OptimizerState& optimizer() const { return opt_; }
  const NeuronMask& mask() const { return mask_; }
  bool compacted() const { return compacted_; }
  const std::vector<MetricsRow>& metrics() const { return metrics_; }
  const std::vector<TraceRow>& trace() const { return trace_; }
  const std::vector<std::string>& events() const { return events_; }
  std::size_t calibration_samples_used() const { return calibration_used_; }
  double wall_ms() const { return wall_ms_; }
  const RunData& data() const { return *data_; }
  const std::optional<Teacher>& teacher() const { return teacher_; }

  /// Writes metrics.csv, pruning_trace.csv and final.ckpt into `dir`.
  void write_outputs(const std::filesystem::path& dir, const std::string& final_name = "final.ckpt") const {
    write_text_atomic(dir / "metrics.csv", metrics_csv(metrics_));
    write_text_atomic(dir / "pruning_trace.csv", trace_csv(trace_));
    save_checkpoint(checkpoint(), dir / final_name);
  }

 private:
  Trainer(RunConfig cfg, std::shared_ptr<const RunData> data, std::optional<Teacher> teacher, const Checkpoint& ckpt)
      : cfg_(std::move(cfg)), data_(std::move(data)), teacher_(std::move(teacher)) {
    step_ = ckpt.step;
    model_ = ckpt.model;
    w_ = ckpt.weights;
    opt_ = ckpt.optimizer;
    imp_ = ckpt.importance;
    mask_ = ckpt.mask;
    compacted_ = ckpt.compacted;
    rng_.deserialize(ckpt.rng_state);
    if (step_ < 0 || step_ > cfg_.total_steps()) throw ConfigError("checkpoint step outside this run");
    init_common();
  }

  void adopt_initial_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.step != cfg_.stages.pretrain) {
      throw ConfigError("resume_ablation: checkpoint is at step " + std::to_string(ckpt.step) +
                        " but stages.pretrain is " + std::to_string(cfg_.stages.pretrain));
    }
    if (!(ckpt.model == cfg_.model) || ckpt.compacted || !ckpt.mask.is_all_ones()) {
      throw ConfigError("resume_ablation: checkpoint model " + std::to_string(ckpt.model.ffn_hidden) +
                        "-wide FFN does not match the configured unpruned model (" +
                        std::to_string(cfg_.model.ffn_hidden) + ")");
    }
    step_ = ckpt.step;
    w_ = ckpt.weights;
    opt_ = ckpt.optimizer;
    opt_.hp = cfg_.adam;
    mask_ = ckpt.mask;
    rng_.deserialize(ckpt.rng_state);
  }

  void init_common() {
    check_weights(model_, w_);
    if (!data_) throw InternalError("Trainer: no run data");
    for (auto tok : data_->train_tokens) {
      if (tok >= cfg_.model.vocab_size) {
        throw DataError("corpus token " + std::to_string(tok) + " exceeds model.vocab_size " +
                        std::to_string(cfg_.model.vocab_size));
      }
    }
    stream_ = std::make_unique<BatchStream>(data_->train_tokens, static_cast<std::size_t>(cfg_.batch_size),
                                            cfg_.model.seq_len, derive_seed(cfg_.seed, "batches"));
    heldout_ = sequential_batches(data_->heldout_tokens, cfg_.model.seq_len, static_cast<std::size_t>(cfg_.eval_batch),
                                  static_cast<std::size_t>(cfg_.eval_sequences));
    if (heldout_.empty()) throw DataError("held-out split is shorter than one sequence");
    if (cfg_.prunes()) {
      spec_ = cfg_.sparsity_spec();
      if (imp_.scores.empty() && !compacted_) imp_ = ImportanceState::zeros_like(w_, cfg_.lambda, cfg_.combine);
    }
    if (cfg_.kd_enabled) {
      if (!teacher_) teacher_ = load_teacher(cfg_.kd_teacher);
      if (teacher_->model.vocab_size != model_.vocab_size || teacher_->model.seq_len < model_.seq_len) {
        throw ConfigError("kd: teacher vocabulary or context does not match the student");
      }
    }
  }

  bool kd_active(std::int64_t t) const { return cfg_.kd_enabled && t > cfg_.stages.pretrain; }

  TraceRow trace_row(std::int64_t t, std::size_t layer, const std::vector<double>& scores) const {
    TraceRow r{t, layer, mask_.retained(layer), std::nullopt, std::nullopt};
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (mask_.keep[layer][i] == 0) continue;
      r.min_score = r.min_score ? std::min(*r.min_score, scores[i]) : scores[i];
      r.max_score = r.max_score ? std::max(*r.max_score, scores[i]) : scores[i];
    }
    return r;
  }

  void prune_one_shot(std::int64_t t) {
    const std::size_t h = model_.ffn_hidden;
    const std::size_t retain = retained_for_sparsity(spec_.target, h);
    if (cfg_.method == PruneMethod::osrp) {
      mask_ = random_oneshot_mask(model_.n_layers, h, spec_.target, rng_);
      for (std::size_t l = 0; l < model_.n_layers; ++l) trace_.push_back({t, l, mask_.retained(l), {}, {}});
    } else {
      const std::vector<Batch> cal = calibration_batches();
      const std::vector<Tensor1D> c = activation_importance(model_, w_, cal, &mask_);
      events_.push_back("step " + std::to_string(t) + ": minitron consumed " + std::to_string(calibration_used_) +
                        " calibration sequences");
      for (std::size_t l = 0; l < model_.n_layers; ++l) {
        select_mask(c[l].values, retain, mask_, l);
        trace_.push_back(trace_row(t, l, c[l].values));
      }
    }
    events_.push_back("step " + std::to_string(t) + ": " + to_string(cfg_.method) + " mask keeps " +
                      std::to_string(retain) + " of " + std::to_string(h) + " neurons per layer");
    apply_mask(w_, mask_);
    mask_optimizer_state(opt_, mask_);
    compact_now(t, spec_.end());
  }

  std::vector<Batch> calibration_batches() {
    const auto n = static_cast<std::size_t>(cfg_.calibration_samples);
    BatchStream cal(data_->train_tokens, 1, cfg_.model.seq_len, derive_seed(cfg_.seed, "calibration"));
    std::vector<std::size_t> starts;
    for (std::size_t k = 0; k < n; ++k) starts.push_back(cal.starts(k)[0]);
    std::vector<Batch> out;
    constexpr std::size_t kChunk = 16;
    for (std::size_t i = 0; i < starts.size(); i += kChunk) {
      const std::size_t m = std::min(kChunk, starts.size() - i);
      out.push_back(make_batch(data_->train_tokens, std::span<const std::size_t>(starts).subspan(i, m),
                               cfg_.model.seq_len));
    }
    calibration_used_ = n;
    return out;
  }

  void compact_now(std::int64_t t, std::int64_t tau) {
    const std::size_t before = model_.ffn_hidden;
    compact(w_, opt_, imp_, mask_, tau, spec_);
    model_.ffn_hidden = mask_.hidden(0);
    compacted_ = true;
    imp_ = ImportanceState{};
    mask_ = NeuronMask::all_ones(model_.n_layers, model_.ffn_hidden);
    events_.push_back("step " + std::to_string(t) + ": compacted FFN " + std::to_string(before) + " -> " +
                      std::to_string(model_.ffn_hidden));
  }

  [[noreturn]] void abort_non_finite(std::int64_t t, const std::string& what) {
    if (out_dir_) {
      save_checkpoint(checkpoint(), *out_dir_ / "last_good.ckpt");
      write_text_atomic(*out_dir_ / "metrics.csv", metrics_csv(metrics_));
    }
    throw NonFiniteError("non-finite " + what + " at step " + std::to_string(t) +
                         (out_dir_ ? "; state before this step saved to last_good.ckpt" : ""));
  }

  RunConfig cfg_;
  std::shared_ptr<const RunData> data_;
  std::optional<Teacher> teacher_;
  ModelConfig model_;
  ModelWeights w_;
  OptimizerState opt_;
  ImportanceState imp_;
  NeuronMask mask_;
  bool compacted_ = false;
  Rng rng_;
  std::int64_t step_ = 0;
  SparsitySpec spec_;
  std::unique_ptr<BatchStream> stream_;
  std::vector<Batch> heldout_;
  std::vector<MetricsRow> metrics_;
  std::vector<TraceRow> trace_;
  std::vector<std::string> events_;
  std::size_t calibration_used_ = 0;
  double wall_ms_ = 0.0;
  std::optional<std::filesystem::path> out_dir_;
};

}  // namespace ideaprune
