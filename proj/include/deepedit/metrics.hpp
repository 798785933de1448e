#pragma once
// Metric kernels. IFR and CKP score deep edits over implication chains and
// contextual edges; the paired-preference rates, fluency and consistency are
// the classical counterfactual-editing metrics.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "deepedit/error.hpp"
#include "deepedit/text.hpp"

namespace deepedit {

struct ChainObservation {
  std::string chain_id;
  int length = 0;
  std::vector<double> pre;
  std::vector<double> post;
};

struct ContextObservation {
  std::string triplet_id;
  double pre = 0.0;
  double post = 0.0;
};

enum class PromptFamily { Direct, Paraphrase, Neighborhood };

struct PreferenceCase {
  std::string case_id;
  PromptFamily family = PromptFamily::Direct;
  double p_new = 0.0;
  double p_old = 0.0;
  // True when p_new/p_old are sampled hit frequencies rather than scores.
  bool sampled = false;
};

struct MetricsReport {
  double ifr_overall = 0.0;
  std::map<int, double> ifr_by_length;
  std::map<int, int> active_chain_counts;
  double ckp = 1.0;
  std::optional<double> efficacy;
  std::optional<double> generalization;
  std::optional<double> specificity;
  std::optional<double> fluency;
  std::optional<double> consistency;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

namespace detail {

inline bool is_probability(double p) { return p >= 0.0 && p <= 1.0; }

inline void validate(const ChainObservation& obs) {
  if (obs.length < 1 || obs.length > 5) {
    throw Error(ErrorCode::InvalidObservation, obs.chain_id + ": length " + std::to_string(obs.length));
  }
  const auto n = static_cast<std::size_t>(obs.length);
  if (obs.pre.size() != n || obs.post.size() != n) {
    throw Error(ErrorCode::InvalidObservation, obs.chain_id + ": probability count does not match length");
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (!is_probability(obs.pre[j]) || !is_probability(obs.post[j])) {
      throw Error(ErrorCode::InvalidObservation, obs.chain_id + ": probability outside [0, 1]");
    }
  }
}

}  // namespace detail

struct Retention {
  double pre = 0.0;   // R: product of pre-edit hop probabilities
  double post = 0.0;  // R': product of post-edit hop probabilities
};

inline Retention chain_retention(const ChainObservation& obs) {
  detail::validate(obs);
  Retention r{1.0, 1.0};
  for (std::size_t j = 0; j < obs.pre.size(); ++j) {
    r.pre *= obs.pre[j];
    r.post *= obs.post[j];
  }
  return r;
}

struct IfrResult {
  double overall = 0.0;
  std::map<int, double> by_length;
  std::map<int, int> active_counts;
};

// Indirect fact recovery: 1/sqrt(n)-weighted mean of R'/R over chains whose
// pre-edit retention is non-zero; 0 when no chain is active. Per-length
// values restrict the same formula to one length.
inline IfrResult ifr(const std::vector<ChainObservation>& observations) {
  struct Acc {
    double weighted = 0.0;
    double weights = 0.0;
  };
  Acc total;
  std::map<int, Acc> per_length;
  IfrResult out;
  for (const auto& obs : observations) {
    const auto r = chain_retention(obs);
    if (r.pre == 0.0) continue;
    const double w = 1.0 / std::sqrt(static_cast<double>(obs.length));
    const double ratio = r.post / r.pre;
    total.weighted += w * ratio;
    total.weights += w;
    per_length[obs.length].weighted += w * ratio;
    per_length[obs.length].weights += w;
    ++out.active_counts[obs.length];
  }
  if (total.weights > 0.0) out.overall = total.weighted / total.weights;
  for (const auto& [n, acc] : per_length) out.by_length[n] = acc.weighted / acc.weights;
  return out;
}

// Connected knowledge preservation: mean p'/p over contextual edges with
// p != 0; 1 when there are none.
inline double ckp(const std::vector<ContextObservation>& observations) {
  double sum = 0.0;
  std::size_t active = 0;
  for (const auto& obs : observations) {
    if (!detail::is_probability(obs.pre) || !detail::is_probability(obs.post)) {
      throw Error(ErrorCode::InvalidObservation, obs.triplet_id + ": probability outside [0, 1]");
    }
    if (obs.pre == 0.0) continue;
    sum += obs.post / obs.pre;
    ++active;
  }
  return active == 0 ? 1.0 : sum / static_cast<double>(active);
}

// Fraction of cases of one prompt family where the edited output strictly
// beats the original (ties fail). Direct -> efficacy, Paraphrase ->
// generalization, Neighborhood -> specificity.
inline double paired_preference_rate(const std::vector<PreferenceCase>& cases, PromptFamily family) {
  std::size_t total = 0;
  std::size_t wins = 0;
  for (const auto& c : cases) {
    if (c.family != family) continue;
    ++total;
    if (c.p_new > c.p_old) ++wins;
  }
  if (total == 0) throw Error(ErrorCode::EmptyFamily, "no preference cases for the requested prompt family");
  return static_cast<double>(wins) / static_cast<double>(total);
}

inline double ngram_entropy(const std::vector<std::string>& tokens, std::size_t n) {
  if (tokens.size() < n) return 0.0;
  std::unordered_map<std::string, std::size_t> counts;
  const std::size_t total = tokens.size() - n + 1;
  for (std::size_t i = 0; i < total; ++i) {
    std::string gram = tokens[i];
    for (std::size_t j = 1; j < n; ++j) gram.append("\x1f").append(tokens[i + j]);
    ++counts[gram];
  }
  double h = 0.0;
  for (const auto& [_, c] : counts) {
    const double g = static_cast<double>(c) / static_cast<double>(total);
    h -= g * std::log2(g);
  }
  return h == 0.0 ? 0.0 : h;  // folds -0.0
}

enum class FluencySign {
  Intended,   // (2/3)·H2 + (4/3)·H3
  AsPrinted,  // (2/3)·H2 − (4/3)·H3
};

inline double fluency(const std::vector<std::string>& tokens, FluencySign sign = FluencySign::Intended) {
  if (tokens.size() < 3) throw Error(ErrorCode::TooShort, "fluency needs at least 3 tokens");
  const double h2 = ngram_entropy(tokens, 2);
  const double h3 = ngram_entropy(tokens, 3);
  const double third = sign == FluencySign::Intended ? 4.0 / 3.0 : -4.0 / 3.0;
  return 2.0 / 3.0 * h2 + third * h3;
}

inline double fluency(std::string_view text_in, FluencySign sign = FluencySign::Intended) {
  return fluency(text::split_whitespace(text_in), sign);
}

// Cosine similarity of smoothed TF-IDF vectors over the two-document corpus
// {generated, reference}: tf = raw count, idf = ln((1 + N) / (1 + df)) + 1.
inline double consistency(const std::vector<std::string>& generated, const std::vector<std::string>& reference) {
  if (generated.empty() || reference.empty()) throw Error(ErrorCode::EmptyText, "consistency needs two texts");
  std::map<std::string, std::pair<double, double>> tf;
  for (const auto& t : generated) tf[t].first += 1.0;
  for (const auto& t : reference) tf[t].second += 1.0;
  constexpr double kDocs = 2.0;
  double dot = 0.0, norm_a = 0.0, norm_b = 0.0;
  for (const auto& [_, counts] : tf) {
    const double df = (counts.first > 0 ? 1.0 : 0.0) + (counts.second > 0 ? 1.0 : 0.0);
    const double idf = std::log((1.0 + kDocs) / (1.0 + df)) + 1.0;
    const double a = counts.first * idf;
    const double b = counts.second * idf;
    dot += a * b;
    norm_a += a * a;
    norm_b += b * b;
  }
  const double sim = dot / (std::sqrt(norm_a) * std::sqrt(norm_b));
  return std::min(1.0, std::max(0.0, sim));
}

inline double consistency(std::string_view generated, std::string_view reference) {
  return consistency(text::normalized_tokens(generated), text::normalized_tokens(reference));
}

}  // namespace deepedit
