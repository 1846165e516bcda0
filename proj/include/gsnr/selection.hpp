#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "gsnr/corpus.hpp"
#include "gsnr/error.hpp"
#include "gsnr/io.hpp"
#include "gsnr/rng.hpp"
#include "gsnr/stats.hpp"

namespace gsnr {

enum class SelectionMethod { gsnr, alt1, alt2, alt3, random };

inline std::string to_string(SelectionMethod m) {
  switch (m) {
    case SelectionMethod::gsnr: return "gsnr";
    case SelectionMethod::alt1: return "alt1";
    case SelectionMethod::alt2: return "alt2";
    case SelectionMethod::alt3: return "alt3";
    case SelectionMethod::random: return "random";
  }
  throw ContractError("unknown selection method");
}

inline SelectionMethod selection_method_from_string(const std::string& s) {
  if (s == "random") return SelectionMethod::random;
  switch (utility_kind_from_string(s)) {
    case UtilityKind::gsnr: return SelectionMethod::gsnr;
    case UtilityKind::alt1: return SelectionMethod::alt1;
    case UtilityKind::alt2: return SelectionMethod::alt2;
    case UtilityKind::alt3: return SelectionMethod::alt3;
  }
  throw ContractError("unknown selection method '" + s + "'");
}

struct SelectionResult {
  std::vector<std::int64_t> ranked_ids;    // full permutation, best first
  std::vector<std::int64_t> selected_ids;  // first k of ranked_ids
  double selection_fraction = 0.0;         // alpha
  std::int64_t k = 0;
  SelectionMethod method = SelectionMethod::gsnr;
};

namespace detail {

/// k = max(1, ceil(alpha * N)); a tiny slack absorbs the binary
/// representation of alphas like 0.1 whose product lands a hair above an
/// integer.
inline std::int64_t selection_count(double alpha, std::int64_t n) {
  if (!(alpha > 0.0) || alpha > 1.0)
    throw ContractError("selection: alpha must be in (0, 1]");
  const auto k = static_cast<std::int64_t>(
      std::ceil(alpha * static_cast<double>(n) - 1e-9));
  return std::min<std::int64_t>(n, std::max<std::int64_t>(1, k));
}

}  // namespace detail

/// Rank by utility (descending, ties broken by ascending id) and keep the
/// top-alpha fraction.
inline SelectionResult rank_and_select(const std::vector<UtilityRecord>& utilities,
                                       double alpha) {
  const auto n = static_cast<std::int64_t>(utilities.size());
  if (n == 0) throw ContractError("selection: no utility records");
  std::vector<std::uint8_t> seen(static_cast<std::size_t>(n), 0);
  for (const UtilityRecord& r : utilities) {
    if (r.example_id < 0 || r.example_id >= n)
      throw ContractError("selection: example id " + std::to_string(r.example_id) +
                          " outside 0.." + std::to_string(n - 1));
    if (seen[static_cast<std::size_t>(r.example_id)]++)
      throw ContractError("selection: duplicate example id " +
                          std::to_string(r.example_id));
  }

  std::vector<const UtilityRecord*> order(utilities.size());
  for (std::size_t i = 0; i < utilities.size(); ++i) order[i] = &utilities[i];
  std::sort(order.begin(), order.end(), [](const UtilityRecord* a, const UtilityRecord* b) {
    if (a->utility != b->utility) return a->utility > b->utility;
    return a->example_id < b->example_id;
  });

  SelectionResult res;
  res.selection_fraction = alpha;
  res.k = detail::selection_count(alpha, n);
  res.ranked_ids.reserve(utilities.size());
  for (const UtilityRecord* r : order) res.ranked_ids.push_back(r->example_id);
  res.selected_ids.assign(res.ranked_ids.begin(), res.ranked_ids.begin() + res.k);
  switch (utilities.front().kind) {
    case UtilityKind::gsnr: res.method = SelectionMethod::gsnr; break;
    case UtilityKind::alt1: res.method = SelectionMethod::alt1; break;
    case UtilityKind::alt2: res.method = SelectionMethod::alt2; break;
    case UtilityKind::alt3: res.method = SelectionMethod::alt3; break;
  }
  return res;
}

/// Uniform random baseline: a seeded draw of k ids without replacement.
inline SelectionResult select_random(std::int64_t n, double alpha, std::uint64_t seed) {
  if (n < 1) throw ContractError("selection: N must be >= 1");
  SelectionResult res;
  res.method = SelectionMethod::random;
  res.selection_fraction = alpha;
  res.k = detail::selection_count(alpha, n);
  Rng rng(derive_seed(seed, "selection"));
  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), std::int64_t{0});
  rng.shuffle(perm);
  res.ranked_ids = std::move(perm);
  res.selected_ids.assign(res.ranked_ids.begin(), res.ranked_ids.begin() + res.k);
  return res;
}

/// Write the selected examples, in original corpus order, in the input
/// JSONL schema. Round-trips byte-exactly through load_corpus.
inline void export_subset(const SelectionResult& selection,
                          const std::vector<Example>& corpus,
                          const std::filesystem::path& path) {
  std::vector<std::int64_t> ids = selection.selected_ids;
  std::sort(ids.begin(), ids.end());
  std::vector<Example> subset;
  subset.reserve(ids.size());
  for (std::int64_t id : ids) {
    if (id < 0 || id >= static_cast<std::int64_t>(corpus.size()))
      throw ContractError("export_subset: id " + std::to_string(id) + " out of range");
    subset.push_back(corpus[static_cast<std::size_t>(id)]);
  }
  write_corpus_jsonl(path, subset);
}

// ============================================================================
// Selection manifest
// ============================================================================

/// CSV `rank,example_id,utility,selected` over the full ranking. The random
/// baseline has no utility; its column is written as nan.
inline std::string selection_manifest_csv(const SelectionResult& selection,
                                          const std::vector<UtilityRecord>* utilities) {
  std::vector<double> by_id;
  if (utilities) {
    by_id.assign(selection.ranked_ids.size(), std::nan(""));
    for (const UtilityRecord& r : *utilities)
      by_id.at(static_cast<std::size_t>(r.example_id)) = r.utility;
  }
  std::string out = "rank,example_id,utility,selected\n";
  for (std::size_t rank = 0; rank < selection.ranked_ids.size(); ++rank) {
    const std::int64_t id = selection.ranked_ids[rank];
    const double u = utilities ? by_id[static_cast<std::size_t>(id)] : std::nan("");
    out += std::to_string(rank) + ',' + std::to_string(id) + ',' + format_double(u) +
           ',' + (rank < static_cast<std::size_t>(selection.k) ? "1" : "0") + '\n';
  }
  return out;
}

inline void save_selection_manifest(const std::filesystem::path& path,
                                    const SelectionResult& selection,
                                    const std::vector<UtilityRecord>* utilities) {
  atomic_write_file(path, selection_manifest_csv(selection, utilities));
}

}  // namespace gsnr
