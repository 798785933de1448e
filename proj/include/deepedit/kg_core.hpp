#pragma once
// Directed knowledge-graph store: triplets, single-link edge sets, the
// add/remove/modify edit algebra, bounded simple-path enumeration and the
// path-based closure test used to decide whether an edited fact is still
// deducible.

#include <algorithm>
#include <compare>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "deepedit/error.hpp"
#include "deepedit/text.hpp"

namespace deepedit {

inline constexpr int kMaxChainLength = 5;
inline constexpr std::string_view kRedactedPrefix = "REDACTED:";

struct Triplet {
  std::string subject;
  std::string relation;
  std::string object;
  std::vector<std::string> object_aliases;

  // Identity is (subject, relation, object); aliases are annotations.
  friend bool operator==(const Triplet& a, const Triplet& b) {
    return a.subject == b.subject && a.relation == b.relation && a.object == b.object;
  }
  friend std::strong_ordering operator<=>(const Triplet& a, const Triplet& b) {
    return std::tie(a.subject, a.relation, a.object) <=> std::tie(b.subject, b.relation, b.object);
  }

  std::string key() const { return subject + "|" + relation + "|" + object; }
};

// Builds a triplet with whitespace-normalized labels; rejects empty labels or aliases.
inline Triplet make_triplet(std::string_view subject, std::string_view relation, std::string_view object,
                            std::vector<std::string> aliases = {}) {
  Triplet t{text::collapse_whitespace(subject), text::collapse_whitespace(relation),
            text::collapse_whitespace(object), {}};
  if (t.subject.empty() || t.relation.empty() || t.object.empty()) {
    throw Error(ErrorCode::InvalidTriplet, "empty label in (" + std::string(subject) + ", " +
                                               std::string(relation) + ", " + std::string(object) + ")");
  }
  for (auto& a : aliases) {
    auto norm = text::collapse_whitespace(a);
    if (norm.empty()) throw Error(ErrorCode::InvalidTriplet, "empty alias for object '" + t.object + "'");
    t.object_aliases.push_back(std::move(norm));
  }
  return t;
}

inline void validate_triplet(const Triplet& t) {
  auto rebuilt = make_triplet(t.subject, t.relation, t.object, t.object_aliases);
  if (rebuilt.subject != t.subject || rebuilt.relation != t.relation || rebuilt.object != t.object) {
    throw Error(ErrorCode::InvalidTriplet, "labels are not whitespace-normalized: " + t.key());
  }
}

using Path = std::vector<Triplet>;

struct EditDelta;

class KnowledgeGraph {
 public:
  KnowledgeGraph() = default;

  // Validating constructor: the seed must be one of the edges.
  KnowledgeGraph(std::string id, Triplet seed, const std::vector<Triplet>& edges,
                 const std::set<std::string>& extra_entities = {})
      : id_(std::move(id)), seed_(std::move(seed)) {
    validate_triplet(seed_);
    for (const auto& e : edges) insert_edge(e);
    for (const auto& v : extra_entities) {
      if (text::collapse_whitespace(v).empty()) throw Error(ErrorCode::InvalidTriplet, "empty entity label");
      entities_.insert(v);
    }
    if (!has_edge(seed_)) {
      throw Error(ErrorCode::InvariantViolation, "seed edge " + seed_.key() + " missing from graph " + id_);
    }
  }

  const std::string& id() const { return id_; }
  const Triplet& seed() const { return seed_; }
  const std::set<std::string>& entities() const { return entities_; }
  std::size_t edge_count() const { return links_.size(); }

  bool has_entity(const std::string& v) const { return entities_.count(v) != 0; }

  bool has_edge(const Triplet& t) const {
    auto it = links_.find({t.subject, t.object});
    return it != links_.end() && it->second.relation == t.relation;
  }

  const Triplet* link(const std::string& subject, const std::string& object) const {
    auto it = links_.find({subject, object});
    return it == links_.end() ? nullptr : &it->second;
  }

  // Edges sorted by (subject, relation, object).
  std::vector<Triplet> edges() const {
    std::vector<Triplet> out;
    out.reserve(links_.size());
    for (const auto& [_, t] : links_) out.push_back(t);
    std::sort(out.begin(), out.end());
    return out;
  }

  std::vector<Triplet> out_edges(const std::string& subject) const {
    std::vector<Triplet> out;
    for (auto it = links_.lower_bound({subject, std::string()}); it != links_.end() && it->first.first == subject;
         ++it) {
      out.push_back(it->second);
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  std::vector<Triplet> edges_matching(const std::string& subject, const std::string& relation) const {
    std::vector<Triplet> out;
    for (auto& t : out_edges(subject)) {
      if (t.relation == relation) out.push_back(std::move(t));
    }
    return out;
  }

  friend bool operator==(const KnowledgeGraph& a, const KnowledgeGraph& b) {
    if (a.id_ != b.id_ || a.seed_ != b.seed_ || a.entities_ != b.entities_) return false;
    if (a.links_.size() != b.links_.size()) return false;
    for (auto ia = a.links_.begin(), ib = b.links_.begin(); ia != a.links_.end(); ++ia, ++ib) {
      if (ia->second != ib->second || ia->second.object_aliases != ib->second.object_aliases) return false;
    }
    return true;
  }

 private:
  friend KnowledgeGraph apply_delta_impl(const KnowledgeGraph&, const std::vector<EditDelta>&);

  void insert_edge(const Triplet& t) {
    validate_triplet(t);
    auto [it, inserted] = links_.emplace(std::make_pair(t.subject, t.object), t);
    if (!inserted) {
      throw Error(ErrorCode::DuplicateLink, "second link " + t.key() + " between '" + t.subject + "' and '" +
                                                t.object + "' (existing: " + it->second.key() + ")");
    }
    entities_.insert(t.subject);
    entities_.insert(t.object);
  }

  std::string id_;
  Triplet seed_;
  std::set<std::string> entities_;
  std::map<std::pair<std::string, std::string>, Triplet> links_;
};

enum class DeltaKind { Add, Remove, Modify };

struct EditDelta {
  DeltaKind kind = DeltaKind::Add;
  std::optional<Triplet> old;
  std::optional<Triplet> replacement;

  static EditDelta add(Triplet t) { return {DeltaKind::Add, std::nullopt, std::move(t)}; }
  static EditDelta remove(Triplet t) { return {DeltaKind::Remove, std::move(t), std::nullopt}; }
  static EditDelta modify(Triplet from, Triplet to) { return {DeltaKind::Modify, std::move(from), std::move(to)}; }

  friend bool operator==(const EditDelta&, const EditDelta&) = default;
};

enum class EditScope { Shallow, DeepSubject };

struct EditRequest {
  Triplet target;
  std::string new_object;
  EditScope scope = EditScope::Shallow;
};

struct DeducedFact {
  std::pair<std::string, std::string> endpoints;
  std::vector<Path> witness_paths;
  // "∘"-joined hop relations of the first witness; informational only.
  std::string composite_relation;
};

inline void validate_delta(const EditDelta& d) {
  switch (d.kind) {
    case DeltaKind::Add:
      if (!d.replacement || d.old) throw Error(ErrorCode::InvalidDelta, "Add takes only a new triplet");
      validate_triplet(*d.replacement);
      return;
    case DeltaKind::Remove:
      if (!d.old || d.replacement) throw Error(ErrorCode::InvalidDelta, "Remove takes only an old triplet");
      return;
    case DeltaKind::Modify: {
      if (!d.old || !d.replacement) throw Error(ErrorCode::InvalidDelta, "Modify needs old and new triplets");
      validate_triplet(*d.replacement);
      const auto& a = *d.old;
      const auto& b = *d.replacement;
      const bool relation_changed = a.relation != b.relation;
      const bool object_changed = a.object != b.object;
      if (a.subject != b.subject) throw Error(ErrorCode::InvalidDelta, "Modify cannot change the subject");
      if (relation_changed == object_changed) {
        throw Error(ErrorCode::InvalidDelta,
                    "Modify must rewrite exactly one of relation or object: " + a.key() + " -> " + b.key());
      }
      return;
    }
  }
}

inline KnowledgeGraph apply_delta_impl(const KnowledgeGraph& graph, const std::vector<EditDelta>& deltas) {
  std::set<Triplet> removed;
  std::set<Triplet> modified;
  std::vector<Triplet> added;
  for (const auto& d : deltas) {
    validate_delta(d);
    if (d.old) {
      if (!graph.has_edge(*d.old)) throw Error(ErrorCode::MissingEdge, d.old->key());
      auto& bucket = d.kind == DeltaKind::Remove ? removed : modified;
      auto& other = d.kind == DeltaKind::Remove ? modified : removed;
      if (other.count(*d.old) || !bucket.insert(*d.old).second) {
        throw Error(ErrorCode::ConflictingDeltas, "edge " + d.old->key() + " targeted by more than one delta");
      }
    }
    if (d.replacement) added.push_back(*d.replacement);
  }

  KnowledgeGraph out = graph;
  // E' = (E \ (removed ∪ modified-originals)) ∪ added ∪ modified-replacements
  for (const auto& t : removed) out.links_.erase({t.subject, t.object});
  for (const auto& t : modified) out.links_.erase({t.subject, t.object});
  for (const auto& t : added) out.insert_edge(t);
  return out;
}

// Returns a new graph with the deltas applied; the input is never touched.
// Entities are only ever added.
inline KnowledgeGraph apply_delta(const KnowledgeGraph& graph, const std::vector<EditDelta>& deltas) {
  return apply_delta_impl(graph, deltas);
}

inline std::string redacted(const std::string& object) { return std::string(kRedactedPrefix) + object; }

inline bool is_redacted(const std::string& object) { return object.rfind(kRedactedPrefix, 0) == 0; }

// Expands an edit request into graph deltas. DeepSubject rewrites every edge
// leaving the target subject; objects without an entry in `replacements`
// become "REDACTED:<original>".
inline std::vector<EditDelta> expand_edit_request(const KnowledgeGraph& graph, const EditRequest& request,
                                                  const std::map<std::string, std::string>& replacements = {}) {
  if (!graph.has_edge(request.target)) throw Error(ErrorCode::MissingEdge, request.target.key());
  if (request.new_object == request.target.object) {
    throw Error(ErrorCode::InvalidDelta, "new object equals the current object '" + request.new_object + "'");
  }
  auto rewrite = [](const Triplet& t, const std::string& object) {
    return EditDelta::modify(t, make_triplet(t.subject, t.relation, object));
  };
  if (request.scope == EditScope::Shallow) return {rewrite(request.target, request.new_object)};

  std::vector<EditDelta> deltas;
  for (const auto& e : graph.out_edges(request.target.subject)) {
    if (e == request.target) {
      deltas.push_back(rewrite(e, request.new_object));
    } else if (auto it = replacements.find(e.object); it != replacements.end()) {
      deltas.push_back(rewrite(e, it->second));
    } else {
      deltas.push_back(rewrite(e, redacted(e.object)));
    }
  }
  return deltas;
}

inline bool chain_less(const Path& a, const Path& b) {
  if (a.size() != b.size()) return a.size() < b.size();
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

inline void check_length(int max_len) {
  if (max_len < 1 || max_len > kMaxChainLength) {
    throw Error(ErrorCode::InvalidLength, "max_len must be in [1, 5], got " + std::to_string(max_len));
  }
}

// Every simple directed path source -> target with 1..max_len hops, ordered
// by length and then lexicographically by hop triplets.
inline std::vector<Path> enumerate_chains(const KnowledgeGraph& graph, const std::string& source,
                                          const std::string& target, int max_len = kMaxChainLength) {
  check_length(max_len);
  if (!graph.has_entity(source)) throw Error(ErrorCode::UnknownEntity, source);
  if (!graph.has_entity(target)) throw Error(ErrorCode::UnknownEntity, target);

  std::vector<Path> found;
  Path current;
  std::set<std::string> on_path{source};
  std::function<void(const std::string&)> walk = [&](const std::string& node) {
    for (const auto& e : graph.out_edges(node)) {
      if (on_path.count(e.object)) continue;
      current.push_back(e);
      if (e.object == target) {
        found.push_back(current);
      } else if (static_cast<int>(current.size()) < max_len) {
        on_path.insert(e.object);
        walk(e.object);
        on_path.erase(e.object);
      }
      current.pop_back();
    }
  };
  if (source != target) walk(source);
  std::sort(found.begin(), found.end(), chain_less);
  return found;
}

inline std::string composite_relation(const Path& path) {
  std::vector<std::string> rels;
  for (const auto& hop : path) rels.push_back(hop.relation);
  return text::join(rels, "∘");
}

// Bounded surrogate for closure membership: present iff some path of at most
// max_len hops links subject to object.
inline std::optional<DeducedFact> deduces(const KnowledgeGraph& graph, const std::string& subject,
                                          const std::string& object, int max_len = kMaxChainLength) {
  auto paths = enumerate_chains(graph, subject, object, max_len);
  if (paths.empty()) return std::nullopt;
  DeducedFact fact{{subject, object}, std::move(paths), {}};
  fact.composite_relation = composite_relation(fact.witness_paths.front());
  return fact;
}

// True iff hops chain head-to-tail from source to target using only graph edges.
inline bool is_valid_path(const KnowledgeGraph& graph, const Path& path, const std::string& source,
                          const std::string& target) {
  if (path.empty() || path.front().subject != source || path.back().object != target) return false;
  std::set<std::string> seen{source};
  for (std::size_t i = 0; i < path.size(); ++i) {
    if (!graph.has_edge(path[i])) return false;
    if (i + 1 < path.size() && path[i].object != path[i + 1].subject) return false;
    if (!seen.insert(path[i].object).second) return false;
  }
  return true;
}

struct ContextPartition {
  std::vector<Triplet> subject_edges;
  std::vector<Triplet> contextual_edges;
};

inline ContextPartition partition_contextual(const KnowledgeGraph& graph, const std::string& s0) {
  if (!graph.has_entity(s0)) throw Error(ErrorCode::UnknownEntity, s0);
  ContextPartition part;
  for (auto& e : graph.edges()) {
    (e.subject == s0 ? part.subject_edges : part.contextual_edges).push_back(std::move(e));
  }
  return part;
}

}  // namespace deepedit
