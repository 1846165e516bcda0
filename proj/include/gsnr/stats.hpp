#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gsnr/ensemble.hpp"
#include "gsnr/error.hpp"
#include "gsnr/io.hpp"

namespace gsnr {

// ============================================================================
// Utility kinds
// ============================================================================

enum class UtilityKind { gsnr, alt1, alt2, alt3 };

inline std::string to_string(UtilityKind k) {
  switch (k) {
    case UtilityKind::gsnr: return "gsnr";
    case UtilityKind::alt1: return "alt1";
    case UtilityKind::alt2: return "alt2";
    case UtilityKind::alt3: return "alt3";
  }
  throw ContractError("unknown utility kind");
}

inline UtilityKind utility_kind_from_string(const std::string& s) {
  if (s == "gsnr") return UtilityKind::gsnr;
  if (s == "alt1") return UtilityKind::alt1;
  if (s == "alt2") return UtilityKind::alt2;
  if (s == "alt3") return UtilityKind::alt3;
  throw ContractError("unknown utility kind '" + s + "'");
}

// ============================================================================
// Per-example statistics
// ============================================================================

struct StatsConfig {
  int early_epoch = 1;  // s
  int late_epoch = 2;   // t
  double epsilon = 1e-8;

  void validate() const {
    if (early_epoch >= late_epoch)
      throw ContractError("stats: early epoch must precede late epoch");
    if (epsilon <= 0) throw ContractError("stats: epsilon must be positive");
  }
};

struct UtilityRecord {
  std::int64_t example_id = 0;
  double g_early = 0.0;  // G^(s): mean gradient norm at the early epoch
  double g_late = 0.0;   // G^(t)
  double v_late = 0.0;   // V^(t): across-member population variance at t
  double delta = 0.0;    // G^(s) - G^(t)
  double utility = 0.0;
  UtilityKind kind = UtilityKind::gsnr;
};

/// Ensemble mean of example i's gradient norms at one epoch.
inline double grad_mean(const GradientLog& log, std::int64_t example, int epoch) {
  double sum = 0.0;
  for (int m = 0; m < log.members(); ++m) sum += log.norm(example, m, epoch);
  return sum / static_cast<double>(log.members());
}

namespace detail {

struct VarianceResult {
  double value = 0.0;
  bool clamped = false;
};

/// Population variance E[x^2] - (E[x])^2 with compensated summation for the
/// second-moment term; clamped at zero against floating-point cancellation.
inline VarianceResult population_variance(const GradientLog& log, std::int64_t example,
                                          int epoch) {
  double sum = 0.0, comp = 0.0;
  double sq_sum = 0.0, sq_comp = 0.0;
  for (int m = 0; m < log.members(); ++m) {
    const double x = log.norm(example, m, epoch);
    double y = x - comp;
    double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
    const double x2 = x * x;
    y = x2 - sq_comp;
    t = sq_sum + y;
    sq_comp = (t - sq_sum) - y;
    sq_sum = t;
  }
  const double n = static_cast<double>(log.members());
  const double mean = sum / n;
  const double raw = sq_sum / n - mean * mean;
  VarianceResult r;
  r.clamped = raw < 0.0;
  r.value = r.clamped ? 0.0 : raw;
  return r;
}

}  // namespace detail

/// Across-member population variance of gradient norms, clamped at >= 0.
inline double grad_variance(const GradientLog& log, std::int64_t example, int epoch) {
  return detail::population_variance(log, example, epoch).value;
}

// ============================================================================
// Utilities
// ============================================================================

/// Relative gradient drop damped by late-epoch ensemble disagreement:
/// u = ((G_s - G_t) / (G_s + eps)) * (1 / (V_t + eps)).
/// Negative when the gradient grew; large disagreement shrinks the score.
inline double gsnr_utility(double g_early, double g_late, double v_late, double eps) {
  return ((g_early - g_late) / (g_early + eps)) * (1.0 / (v_late + eps));
}

/// Ablation variants: raw drop, relative drop, variance-normalized drop.
inline double utility_alt(UtilityKind kind, double g_early, double g_late, double v_late,
                          double eps) {
  switch (kind) {
    case UtilityKind::alt1: return g_early - g_late;
    case UtilityKind::alt2: return (g_early - g_late) / (g_early + eps);
    case UtilityKind::alt3: return (g_early - g_late) / (v_late + eps);
    case UtilityKind::gsnr: return gsnr_utility(g_early, g_late, v_late, eps);
  }
  throw ContractError("utility_alt: unknown kind");
}

struct UtilityComputation {
  std::vector<UtilityRecord> records;  // one per example, in id order
  std::int64_t variance_clamp_count = 0;  // diagnostics
};

/// Per-example statistics and utilities over a complete gradient log.
inline UtilityComputation compute_utilities(const GradientLog& log,
                                            const StatsConfig& config, UtilityKind kind) {
  config.validate();
  log.require_complete({config.early_epoch, config.late_epoch});
  UtilityComputation out;
  out.records.reserve(static_cast<std::size_t>(log.n_examples()));
  for (std::int64_t i = 0; i < log.n_examples(); ++i) {
    UtilityRecord r;
    r.example_id = i;
    r.g_early = grad_mean(log, i, config.early_epoch);
    r.g_late = grad_mean(log, i, config.late_epoch);
    const auto var = detail::population_variance(log, i, config.late_epoch);
    r.v_late = var.value;
    if (var.clamped) ++out.variance_clamp_count;
    r.delta = r.g_early - r.g_late;
    r.kind = kind;
    r.utility = utility_alt(kind, r.g_early, r.g_late, r.v_late, config.epsilon);
    if (!std::isfinite(r.utility))
      throw NumericalError("compute_utilities: non-finite utility for example " +
                               std::to_string(i),
                           i);
    out.records.push_back(r);
  }
  return out;
}

// ============================================================================
// Persistence
// ============================================================================

inline std::string utilities_to_csv(const std::vector<UtilityRecord>& records) {
  std::string out = "example_id,G_s,G_t,V_t,delta,utility,utility_kind\n";
  for (const UtilityRecord& r : records) {
    out += std::to_string(r.example_id) + ',' + format_double(r.g_early) + ',' +
           format_double(r.g_late) + ',' + format_double(r.v_late) + ',' +
           format_double(r.delta) + ',' + format_double(r.utility) + ',' +
           to_string(r.kind) + '\n';
  }
  return out;
}

inline void save_utilities_csv(const std::filesystem::path& path,
                               const std::vector<UtilityRecord>& records) {
  atomic_write_file(path, utilities_to_csv(records));
}

inline std::vector<UtilityRecord> load_utilities_csv(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  const auto lines = split_lines(text);
  if (lines.empty() || lines[0] != "example_id,G_s,G_t,V_t,delta,utility,utility_kind")
    throw ParseError("utilities: bad or missing CSV header in " + path.string());
  std::vector<UtilityRecord> out;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    if (lines[li].empty()) continue;
    const auto f = split_csv_line(lines[li]);
    const std::string tag = "utilities line " + std::to_string(li + 1);
    if (f.size() != 7) throw ParseError(tag + ": expected 7 fields");
    UtilityRecord r;
    r.example_id = parse_int(f[0], tag);
    r.g_early = parse_double(f[1], tag);
    r.g_late = parse_double(f[2], tag);
    r.v_late = parse_double(f[3], tag);
    r.delta = parse_double(f[4], tag);
    r.utility = parse_double(f[5], tag);
    r.kind = utility_kind_from_string(std::string(f[6]));
    out.push_back(r);
  }
  return out;
}

}  // namespace gsnr
