#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "gsnr/error.hpp"
#include "gsnr/io.hpp"
#include "gsnr/model.hpp"
#include "gsnr/parallel.hpp"
#include "gsnr/rng.hpp"

namespace gsnr {

// ============================================================================
// Configuration
// ============================================================================

struct EnsembleConfig {
  int members = 5;
  int epochs = 2;                         // T
  std::vector<int> record_epochs = {1, 2};
  std::vector<std::uint64_t> member_seeds;  // one per member
  int batch_size = 8;
  bool shuffle_per_member = true;
  /// Shuffle stream shared by all members when shuffle_per_member is false.
  std::uint64_t shared_shuffle_seed = 0;
  double lr = 5e-5;

  void validate() const {
    if (members < 1) throw ContractError("ensemble: members must be >= 1");
    if (epochs < 1) throw ContractError("ensemble: epochs must be >= 1");
    if (batch_size < 1) throw ContractError("ensemble: batch_size must be >= 1");
    if (record_epochs.empty()) throw ContractError("ensemble: record_epochs empty");
    for (int e : record_epochs)
      if (e < 1 || e > epochs)
        throw ContractError("ensemble: record_epochs must lie in [1, epochs]");
    if (*std::max_element(record_epochs.begin(), record_epochs.end()) != epochs)
      throw ContractError("ensemble: the terminal epoch must be recorded");
    if (static_cast<int>(member_seeds.size()) != members)
      throw ContractError("ensemble: need exactly one seed per member");
  }
};

inline std::vector<std::uint64_t> default_member_seeds(std::uint64_t base, int members) {
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(members));
  for (int m = 0; m < members; ++m)
    seeds[static_cast<std::size_t>(m)] = derive_seed(base, "member", static_cast<std::uint64_t>(m));
  return seeds;
}

// ============================================================================
// Gradient log
// ============================================================================

/// Dense per-example gradient-norm and loss record indexed
/// (example, member, recorded epoch). Every cell is written exactly once
/// per run; loads from disk track fill state so gaps are reportable.
class GradientLog {
 public:
  GradientLog() = default;
  GradientLog(std::int64_t n_examples, int members, std::vector<int> epochs)
      : n_(n_examples), m_(members), epochs_(std::move(epochs)) {
    std::sort(epochs_.begin(), epochs_.end());
    const std::size_t cells =
        static_cast<std::size_t>(n_) * static_cast<std::size_t>(m_) * epochs_.size();
    norms_.assign(cells, 0.0);
    losses_.assign(cells, 0.0);
    filled_.assign(cells, 0);
    response_tokens_.assign(static_cast<std::size_t>(n_), 0);
  }

  std::int64_t n_examples() const { return n_; }
  int members() const { return m_; }
  const std::vector<int>& epochs() const { return epochs_; }
  std::uint64_t config_hash = 0;

  int epoch_slot(int epoch) const {
    const auto it = std::find(epochs_.begin(), epochs_.end(), epoch);
    if (it == epochs_.end())
      throw ContractError("gradient log does not record epoch " + std::to_string(epoch));
    return static_cast<int>(it - epochs_.begin());
  }

  bool records_epoch(int epoch) const {
    return std::find(epochs_.begin(), epochs_.end(), epoch) != epochs_.end();
  }

  void set_cell(std::int64_t example, int member, int epoch, double norm, double loss) {
    if (example < 0 || example >= n_ || member < 0 || member >= m_)
      throw ContractError("gradient log: cell out of range");
    const std::size_t k = index(example, member, epoch_slot(epoch));
    norms_[k] = norm;
    losses_[k] = loss;
    filled_[k] = 1;
  }

  double norm(std::int64_t example, int member, int epoch) const {
    return norms_[checked_index(example, member, epoch)];
  }

  double loss(std::int64_t example, int member, int epoch) const {
    return losses_[checked_index(example, member, epoch)];
  }

  void set_response_tokens(std::int64_t example, std::int64_t count) {
    response_tokens_.at(static_cast<std::size_t>(example)) = count;
  }

  std::int64_t response_tokens(std::int64_t example) const {
    return response_tokens_.at(static_cast<std::size_t>(example));
  }

  /// Missing (example, member, epoch) triples restricted to `epochs` (all
  /// recorded epochs when empty), up to `limit` entries.
  std::vector<std::tuple<std::int64_t, int, int>> missing_triples(
      const std::vector<int>& epochs = {}, std::size_t limit = 16) const {
    std::vector<std::tuple<std::int64_t, int, int>> out;
    const std::vector<int>& eps = epochs.empty() ? epochs_ : epochs;
    for (std::int64_t i = 0; i < n_ && out.size() < limit; ++i)
      for (int m = 0; m < m_ && out.size() < limit; ++m)
        for (int e : eps) {
          if (!filled_[index(i, m, epoch_slot(e))]) {
            out.emplace_back(i, m, e);
            if (out.size() >= limit) break;
          }
        }
    return out;
  }

  bool is_complete(const std::vector<int>& epochs = {}) const {
    return missing_triples(epochs, 1).empty();
  }

  /// Throw IncompleteLogError naming the gaps if any required cell is unset.
  void require_complete(const std::vector<int>& epochs = {}) const {
    const auto missing = missing_triples(epochs, 8);
    if (missing.empty()) return;
    std::string msg = "gradient log incomplete; missing (example,member,epoch):";
    for (const auto& [i, m, e] : missing)
      msg += " (" + std::to_string(i) + "," + std::to_string(m) + "," + std::to_string(e) + ")";
    throw IncompleteLogError(msg);
  }

  // --------------------------------------------------------------------
  // Persistence: CSV of cells plus a JSON sidecar with the shape metadata.
  // --------------------------------------------------------------------

  std::string to_csv() const {
    std::string out = "example_id,member,epoch,grad_norm,loss,response_tokens\n";
    for (std::int64_t i = 0; i < n_; ++i)
      for (int m = 0; m < m_; ++m)
        for (std::size_t s = 0; s < epochs_.size(); ++s) {
          const std::size_t k = index(i, m, static_cast<int>(s));
          if (!filled_[k]) continue;
          out += std::to_string(i) + ',' + std::to_string(m) + ',' +
                 std::to_string(epochs_[s]) + ',' + format_double(norms_[k]) + ',' +
                 format_double(losses_[k]) + ',' +
                 std::to_string(response_tokens_[static_cast<std::size_t>(i)]) + '\n';
        }
    return out;
  }

  nlohmann::json meta_json() const {
    nlohmann::json j;
    j["config_hash"] = config_hash;
    j["n_examples"] = n_;
    j["members"] = m_;
    j["epochs"] = epochs_;
    return j;
  }

  void save(const std::filesystem::path& csv_path) const {
    atomic_write_file(csv_path, to_csv());
    atomic_write_file(meta_path(csv_path), meta_json().dump(2) + "\n");
  }

  static std::filesystem::path meta_path(const std::filesystem::path& csv_path) {
    return csv_path.string() + ".meta.json";
  }

  static GradientLog load(const std::filesystem::path& csv_path) {
    const nlohmann::json meta = nlohmann::json::parse(read_text_file(meta_path(csv_path)));
    GradientLog log(meta.at("n_examples").get<std::int64_t>(),
                    meta.at("members").get<int>(),
                    meta.at("epochs").get<std::vector<int>>());
    log.config_hash = meta.at("config_hash").get<std::uint64_t>();

    const std::string text = read_text_file(csv_path);
    const auto lines = split_lines(text);
    if (lines.empty() || lines[0] != "example_id,member,epoch,grad_norm,loss,response_tokens")
      throw ParseError("gradient log: bad or missing CSV header in " + csv_path.string());
    for (std::size_t li = 1; li < lines.size(); ++li) {
      if (lines[li].empty()) continue;
      const auto f = split_csv_line(lines[li]);
      const std::string tag = "gradient log line " + std::to_string(li + 1);
      if (f.size() != 6) throw ParseError(tag + ": expected 6 fields");
      const std::int64_t i = parse_int(f[0], tag);
      const int m = static_cast<int>(parse_int(f[1], tag));
      const int e = static_cast<int>(parse_int(f[2], tag));
      if (i < 0 || i >= log.n_ || m < 0 || m >= log.m_ || !log.records_epoch(e))
        throw ParseError(tag + ": cell (" + std::to_string(i) + "," + std::to_string(m) +
                         "," + std::to_string(e) + ") outside the declared shape");
      log.set_cell(i, m, e, parse_double(f[3], tag), parse_double(f[4], tag));
      log.set_response_tokens(i, parse_int(f[5], tag));
    }
    return log;
  }

 private:
  std::size_t index(std::int64_t example, int member, int slot) const {
    return (static_cast<std::size_t>(example) * static_cast<std::size_t>(m_) +
            static_cast<std::size_t>(member)) *
               epochs_.size() +
           static_cast<std::size_t>(slot);
  }

  std::size_t checked_index(std::int64_t example, int member, int epoch) const {
    if (example < 0 || example >= n_ || member < 0 || member >= m_)
      throw ContractError("gradient log: cell out of range");
    const std::size_t k = index(example, member, epoch_slot(epoch));
    if (!filled_[k])
      throw IncompleteLogError("gradient log cell (" + std::to_string(example) + "," +
                               std::to_string(member) + "," + std::to_string(epoch) +
                               ") was never written");
    return k;
  }

  std::int64_t n_ = 0;
  int m_ = 0;
  std::vector<int> epochs_;
  std::vector<double> norms_, losses_;
  std::vector<std::uint8_t> filled_;
  std::vector<std::int64_t> response_tokens_;
};

// ============================================================================
// Loss curves
// ============================================================================

struct LossCurve {
  std::vector<std::pair<std::int64_t, double>> points;  // (step, mini-batch loss)

  std::string to_csv() const {
    std::string out = "step,loss\n";
    for (const auto& [s, l] : points) out += std::to_string(s) + ',' + format_double(l) + '\n';
    return out;
  }

  void save(const std::filesystem::path& path) const { atomic_write_file(path, to_csv()); }

  static LossCurve load(const std::filesystem::path& path) {
    LossCurve c;
    const std::string text = read_text_file(path);
    const auto lines = split_lines(text);
    if (lines.empty() || lines[0] != "step,loss")
      throw ParseError("loss curve: bad header in " + path.string());
    for (std::size_t li = 1; li < lines.size(); ++li) {
      if (lines[li].empty()) continue;
      const auto f = split_csv_line(lines[li]);
      const std::string tag = "loss curve line " + std::to_string(li + 1);
      if (f.size() != 2) throw ParseError(tag + ": expected 2 fields");
      c.points.emplace_back(parse_int(f[0], tag), parse_double(f[1], tag));
    }
    return c;
  }
};

// ============================================================================
// Training
// ============================================================================

/// Mini-batch Adam over one adapter with a frozen backbone. The objective
/// seed (`objective_scale`) is differentiated through the whole backward
/// pass, so an ensemble member computes the gradient of its 1/M share of
/// the averaged objective rather than rescaling afterwards.
class AdapterTrainer {
 public:
  AdapterTrainer(const BackboneParams& backbone,
                 const std::vector<TokenizedExample>& corpus, std::uint64_t seed,
                 std::uint64_t shuffle_seed, double lr, int batch_size,
                 double objective_scale = 1.0)
      : backbone_(backbone),
        corpus_(corpus),
        adapter_(init_adapter(backbone.config, seed)),
        adam_(make_adam_state(adapter_.flat_size(), lr)),
        shuffle_rng_(derive_seed(shuffle_seed, "shuffle")),
        batch_size_(batch_size),
        objective_scale_(objective_scale) {
    if (corpus.empty()) throw ContractError("trainer: corpus is empty");
    order_.resize(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) order_[i] = i;
  }

  std::int64_t steps_per_epoch() const {
    return static_cast<std::int64_t>(
        (corpus_.size() + static_cast<std::size_t>(batch_size_) - 1) /
        static_cast<std::size_t>(batch_size_));
  }

  /// One optimizer step over the next mini-batch; reshuffles at epoch turns.
  void step() {
    if (cursor_ >= corpus_.size()) {
      shuffle_rng_.shuffle(order_);
      cursor_ = 0;
    }
    const std::size_t end = std::min(corpus_.size(), cursor_ + static_cast<std::size_t>(batch_size_));
    const double batch_n = static_cast<double>(end - cursor_);
    Vector grad = Vector::Zero(adapter_.flat_size());
    double loss_sum = 0.0;
    for (std::size_t c = cursor_; c < end; ++c) {
      const TokenizedExample& ex = corpus_[order_[c]];
      LossAndGradient lg = adapter_gradient(backbone_, adapter_, ex,
                                            objective_scale_ / batch_n);
      grad += lg.gradient;
      loss_sum += lg.loss;
    }
    cursor_ = end;
    adam_step(adapter_, grad, adam_);
    curve_.points.emplace_back(step_index_++, loss_sum / batch_n);
  }

  void run_epoch() {
    const std::int64_t steps = steps_per_epoch();
    // align to an epoch boundary
    cursor_ = corpus_.size();
    for (std::int64_t s = 0; s < steps; ++s) step();
  }

  const LoraAdapter& adapter() const { return adapter_; }
  LoraAdapter& adapter() { return adapter_; }
  const LossCurve& curve() const { return curve_; }

 private:
  const BackboneParams& backbone_;
  const std::vector<TokenizedExample>& corpus_;
  LoraAdapter adapter_;
  AdamState adam_;
  Rng shuffle_rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = std::numeric_limits<std::size_t>::max();
  int batch_size_;
  double objective_scale_;
  LossCurve curve_;
  std::int64_t step_index_ = 0;
};

/// One dedicated single-example gradient pass per (example, member); no
/// batching, no parameter update, parameters untouched. Cells land in the
/// given epoch slice of `log`.
inline void record_epoch_gradients(const BackboneParams& backbone,
                                   const std::vector<LoraAdapter>& adapters,
                                   const std::vector<TokenizedExample>& corpus,
                                   int epoch, GradientLog& log) {
  const auto members = static_cast<int>(adapters.size());
  if (log.members() != members || log.n_examples() != static_cast<std::int64_t>(corpus.size()))
    throw ContractError("record_epoch_gradients: log shape mismatch");
  for (std::size_t i = 0; i < corpus.size(); ++i)
    if (corpus[i].id != static_cast<std::int64_t>(i))
      throw ContractError("record_epoch_gradients: corpus ids must be 0..N-1 in order");
  const std::int64_t cells = static_cast<std::int64_t>(corpus.size()) * members;
  parallel_for(cells, [&](std::int64_t cell) {
    const auto i = static_cast<std::size_t>(cell / members);
    const int m = static_cast<int>(cell % members);
    const LossAndGradient lg = adapter_gradient(backbone, adapters[static_cast<std::size_t>(m)],
                                                corpus[i], 1.0);
    log.set_cell(corpus[i].id, m, epoch, lg.gradient.norm(), lg.loss);
  });
  for (const TokenizedExample& ex : corpus)
    log.set_response_tokens(ex.id, ex.masked_in_count());
}

struct EnsembleResult {
  std::vector<LoraAdapter> final_adapters;
  /// Adapter snapshots at each recorded epoch, in member order.
  std::map<int, std::vector<LoraAdapter>> checkpoints;
  GradientLog log;
  std::vector<LossCurve> member_curves;
};

/// Stepwise ensemble driver. train_ensemble() covers the standard protocol;
/// the class itself is exposed so callers can stop at partial epochs.
class EnsembleTrainer {
 public:
  EnsembleTrainer(const std::vector<TokenizedExample>& corpus,
                  const BackboneParams& backbone, const EnsembleConfig& config)
      : corpus_(corpus), backbone_(backbone), config_(config) {
    config.validate();
    if (corpus.empty()) throw ContractError("train_ensemble: corpus is empty");
    for (std::size_t i = 0; i < corpus.size(); ++i)
      if (corpus[i].id != static_cast<std::int64_t>(i))
        throw ContractError("train_ensemble: corpus ids must be 0..N-1 in order");
    trainers_.reserve(static_cast<std::size_t>(config.members));
    for (int m = 0; m < config.members; ++m) {
      const std::uint64_t member_seed = config.member_seeds[static_cast<std::size_t>(m)];
      const std::uint64_t shuffle_seed =
          config.shuffle_per_member ? member_seed : config.shared_shuffle_seed;
      trainers_.emplace_back(backbone, corpus, member_seed, shuffle_seed, config.lr,
                             config.batch_size, 1.0 / config.members);
    }
  }

  /// Advance every member by `steps` optimizer steps (members in parallel).
  void run_steps(std::int64_t steps) {
    parallel_for(static_cast<std::int64_t>(trainers_.size()), [&](std::int64_t m) {
      for (std::int64_t s = 0; s < steps; ++s) trainers_[static_cast<std::size_t>(m)].step();
    });
  }

  void run_epoch() {
    parallel_for(static_cast<std::int64_t>(trainers_.size()),
                 [&](std::int64_t m) { trainers_[static_cast<std::size_t>(m)].run_epoch(); });
  }

  std::vector<LoraAdapter> adapters() const {
    std::vector<LoraAdapter> out;
    out.reserve(trainers_.size());
    for (const AdapterTrainer& t : trainers_) out.push_back(t.adapter());
    return out;
  }

  std::int64_t steps_per_epoch() const { return trainers_.front().steps_per_epoch(); }
  const std::vector<AdapterTrainer>& trainers() const { return trainers_; }

  /// Record the current adapters as the snapshot of `epoch` into `log`.
  void record_into(GradientLog& log, int epoch) const {
    record_epoch_gradients(backbone_, adapters(), corpus_, epoch, log);
  }

  EnsembleResult run(bool with_recording = true) {
    EnsembleResult res;
    res.log = GradientLog(static_cast<std::int64_t>(corpus_.size()), config_.members,
                          config_.record_epochs);
    for (int e = 1; e <= config_.epochs; ++e) {
      run_epoch();
      if (std::find(config_.record_epochs.begin(), config_.record_epochs.end(), e) !=
          config_.record_epochs.end()) {
        res.checkpoints[e] = adapters();
        if (with_recording) record_into(res.log, e);
      }
    }
    res.final_adapters = adapters();
    for (const AdapterTrainer& t : trainers_) res.member_curves.push_back(t.curve());
    return res;
  }

 private:
  const std::vector<TokenizedExample>& corpus_;
  const BackboneParams& backbone_;
  EnsembleConfig config_;
  std::vector<AdapterTrainer> trainers_;
};

/// Train M members under the averaged per-member objective and collect the
/// per-example gradient log at the recorded epochs.
inline EnsembleResult train_ensemble(const std::vector<TokenizedExample>& corpus,
                                     const BackboneParams& backbone,
                                     const EnsembleConfig& config,
                                     std::uint64_t config_hash = 0) {
  EnsembleTrainer trainer(corpus, backbone, config);
  EnsembleResult res = trainer.run();
  res.log.config_hash = config_hash;
  return res;
}

// ============================================================================
// Single-model training (target-model convergence runs, warm training)
// ============================================================================

enum class TrainMode { adapter_only, full_parameter };

struct SingleRunResult {
  LoraAdapter adapter;       // adapter_only mode
  BackboneParams backbone;   // full_parameter mode: the updated weights
  TrainMode mode = TrainMode::adapter_only;
  LossCurve curve;
};

/// Mini-batch Adam over the full backbone parameter vector.
class FullParameterTrainer {
 public:
  FullParameterTrainer(const BackboneParams& backbone,
                       const std::vector<TokenizedExample>& corpus, std::uint64_t seed,
                       double lr, int batch_size)
      : backbone_(backbone),
        corpus_(corpus),
        adam_(make_adam_state(backbone.parameter_count(), lr)),
        shuffle_rng_(derive_seed(seed, "shuffle")),
        batch_size_(batch_size) {
    if (corpus.empty()) throw ContractError("trainer: corpus is empty");
    order_.resize(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) order_[i] = i;
  }

  std::int64_t steps_per_epoch() const {
    return static_cast<std::int64_t>(
        (corpus_.size() + static_cast<std::size_t>(batch_size_) - 1) /
        static_cast<std::size_t>(batch_size_));
  }

  void step() {
    if (cursor_ >= corpus_.size()) {
      shuffle_rng_.shuffle(order_);
      cursor_ = 0;
    }
    const std::size_t end = std::min(corpus_.size(), cursor_ + static_cast<std::size_t>(batch_size_));
    const double batch_n = static_cast<double>(end - cursor_);
    Vector grad = Vector::Zero(backbone_.parameter_count());
    double loss_sum = 0.0;
    for (std::size_t c = cursor_; c < end; ++c) {
      const TokenizedExample& ex = corpus_[order_[c]];
      LossAndGradient lg = backbone_gradient(backbone_, ex, 1.0 / batch_n);
      grad += lg.gradient;
      loss_sum += lg.loss;
    }
    cursor_ = end;
    Vector flat = backbone_to_flat(backbone_);
    adam_step(flat, grad, adam_);
    backbone_from_flat(backbone_, flat);
    curve_.points.emplace_back(step_index_++, loss_sum / batch_n);
  }

  void run_epoch() {
    const std::int64_t steps = steps_per_epoch();
    cursor_ = corpus_.size();
    for (std::int64_t s = 0; s < steps; ++s) step();
  }

  const BackboneParams& backbone() const { return backbone_; }
  const LossCurve& curve() const { return curve_; }

 private:
  BackboneParams backbone_;
  const std::vector<TokenizedExample>& corpus_;
  AdamState adam_;
  Rng shuffle_rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = std::numeric_limits<std::size_t>::max();
  int batch_size_;
  LossCurve curve_;
  std::int64_t step_index_ = 0;
};

/// Standard mini-batch training of one model, logging the loss every step.
inline SingleRunResult train_single(const std::vector<TokenizedExample>& corpus,
                                    const BackboneParams& backbone, std::uint64_t seed,
                                    int epochs, double lr, int batch_size,
                                    TrainMode mode = TrainMode::adapter_only) {
  if (corpus.empty()) throw ContractError("train_single: corpus is empty");
  if (epochs < 1) throw ContractError("train_single: epochs must be >= 1");
  SingleRunResult res;
  res.mode = mode;
  if (mode == TrainMode::adapter_only) {
    AdapterTrainer t(backbone, corpus, seed, seed, lr, batch_size, 1.0);
    for (int e = 0; e < epochs; ++e) t.run_epoch();
    res.adapter = t.adapter();
    res.curve = t.curve();
  } else {
    FullParameterTrainer t(backbone, corpus, seed, lr, batch_size);
    for (int e = 0; e < epochs; ++e) t.run_epoch();
    res.backbone = t.backbone();
    res.curve = t.curve();
  }
  return res;
}

/// Full-parameter training for a fixed number of steps; used to warm the
/// random backbone on the corpus before freezing it.
inline BackboneParams warm_train_backbone(const std::vector<TokenizedExample>& corpus,
                                          const BackboneParams& backbone,
                                          std::uint64_t seed, std::int64_t steps,
                                          double lr, int batch_size) {
  FullParameterTrainer t(backbone, corpus, seed, lr, batch_size);
  for (std::int64_t s = 0; s < steps; ++s) t.step();
  return t.backbone();
}

}  // namespace gsnr
