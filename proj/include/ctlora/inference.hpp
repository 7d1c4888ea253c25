// Copyright (c) 2026 The ctlora Authors
// SPDX-License-Identifier: Apache-2.0

// Zero-shot prompt-similarity scoring and cosine retrieval.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "ctlora/error.hpp"
#include "ctlora/metrics.hpp"
#include "ctlora/model.hpp"
#include "ctlora/text.hpp"

namespace ctlora::inference {

inline constexpr const char* kDefaultTemplate = "CT scan showing {pathology}";
inline constexpr const char* kPlaceholder = "{pathology}";
inline constexpr double kDefaultTau = 10.0;

using Embedding = std::vector<double>;

struct PromptSet {
  std::vector<std::string> names;
  std::string template_text;
  std::vector<std::string> prompts;
  std::vector<Embedding> embeddings;  // filled by embed_prompts
};

inline std::string render(const std::string& tmpl, const std::string& name) {
  const auto first = tmpl.find(kPlaceholder);
  require(first != std::string::npos, Errc::template_error, "template has no {pathology} placeholder");
  require(tmpl.find(kPlaceholder, first + 1) == std::string::npos, Errc::template_error,
          "template has more than one {pathology} placeholder");
  return tmpl.substr(0, first) + name + tmpl.substr(first + std::string(kPlaceholder).size());
}

inline PromptSet build_prompts(const std::vector<std::string>& names, const std::string& tmpl = kDefaultTemplate) {
  require(!names.empty(), Errc::invalid_input, "no pathology names");
  PromptSet p{names, tmpl, {}, {}};
  for (const auto& n : names) {
    require(!n.empty(), Errc::invalid_input, "empty pathology name");
    p.prompts.push_back(render(tmpl, n));
  }
  return p;
}

/// Eval-mode text embeddings of each prompt (cached in the set).
template <class T>
void embed_prompts(PromptSet& p, const model::Model<T>& m, const text::Vocabulary& vocab,
                   std::set<std::string>* access = nullptr) {
  p.embeddings.clear();
  for (const auto& s : p.prompts) {
    model::Context<T> ctx(m, false, 0, false);
    ctx.access = access;
    p.embeddings.push_back(model::to_vector(model::text_forward(ctx, text::tokenize(s, vocab, m.cfg.text.max_len))));
  }
}

template <class T>
Embedding embed_volume(const model::Model<T>& m, const volume::ModelVolume& v, std::set<std::string>* access = nullptr) {
  model::Context<T> ctx(m, false, 0, false);
  ctx.access = access;
  return model::to_vector(model::vision_forward(ctx, v));
}

inline double norm(const Embedding& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double cosine(const Embedding& a, const Embedding& b) {
  require(a.size() == b.size(), Errc::invalid_input, "cosine: length mismatch");
  const double na = norm(a), nb = norm(b);
  require(na > 0 && nb > 0, Errc::invalid_input, "zero-norm embedding");
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] * b[i];
  return d / (na * nb);
}

inline double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

struct ScoreVector {
  std::vector<double> p;
  double tau = kDefaultTau;
};

/// p_j = sigmoid(cos(v, t_j) * tau).
inline ScoreVector zero_shot_scores(const Embedding& v, const std::vector<Embedding>& prompts, double tau) {
  ScoreVector s{{}, tau};
  for (const auto& t : prompts) s.p.push_back(sigmoid(cosine(v, t) * tau));
  return s;
}

struct ScaleReport {
  double factor = 1;
  double max_abs_diff = 0;
};

inline ScaleReport scale_invariance_check(const Embedding& v, const std::vector<Embedding>& prompts, double tau,
                                          double c) {
  require(c > 0, Errc::invalid_input, "scale factor must be positive");
  Embedding w = v;
  for (auto& x : w) x *= c;
  const auto a = zero_shot_scores(v, prompts, tau), b = zero_shot_scores(w, prompts, tau);
  ScaleReport r{c, 0};
  for (std::size_t j = 0; j < a.p.size(); ++j) r.max_abs_diff = std::max(r.max_abs_diff, std::abs(a.p[j] - b.p[j]));
  return r;
}

struct RetrievalResult {
  std::vector<std::size_t> ranking;       // gallery indices by descending cosine
  std::map<std::size_t, double> recall_at;
  double mrr = 0;
};

/// Ranks the gallery; ties go to the lower index. `relevant` is the index of
/// the designated relevant item.
inline RetrievalResult retrieve(const Embedding& query, const std::vector<Embedding>& gallery,
                                const std::vector<std::size_t>& ks, std::size_t relevant) {
  require(!gallery.empty(), Errc::invalid_input, "empty retrieval gallery");
  require(relevant < gallery.size(), Errc::invalid_input, "relevant index outside gallery");
  std::vector<double> sim(gallery.size());
  for (std::size_t i = 0; i < gallery.size(); ++i) sim[i] = cosine(query, gallery[i]);
  RetrievalResult r;
  r.ranking.resize(gallery.size());
  std::iota(r.ranking.begin(), r.ranking.end(), 0);
  std::stable_sort(r.ranking.begin(), r.ranking.end(), [&](auto a, auto b) { return sim[a] > sim[b]; });
  const auto pos = std::size_t(std::find(r.ranking.begin(), r.ranking.end(), relevant) - r.ranking.begin());
  r.mrr = 1.0 / double(pos + 1);
  for (auto k : ks) r.recall_at[k] = pos < k ? 1.0 : 0.0;
  return r;
}

/// Mean Recall@K and MRR of query i against gallery item i.
inline RetrievalResult retrieve_all(const std::vector<Embedding>& queries, const std::vector<Embedding>& gallery,
                                    const std::vector<std::size_t>& ks) {
  require(queries.size() == gallery.size() && !queries.empty(), Errc::invalid_input,
          "paired retrieval needs one query per gallery item");
  RetrievalResult agg;
  for (auto k : ks) agg.recall_at[k] = 0;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto r = retrieve(queries[i], gallery, ks, i);
    agg.mrr += r.mrr;
    for (auto k : ks) agg.recall_at[k] += r.recall_at.at(k);
  }
  agg.mrr /= double(queries.size());
  for (auto& [k, v] : agg.recall_at) v /= double(queries.size());
  return agg;
}

/// Scores every volume against the prompt set and evaluates against labels.
template <class T>
metrics::MetricsReport zero_shot_eval(const model::Model<T>& m, const PromptSet& prompts,
                                      const std::vector<const volume::ModelVolume*>& vols,
                                      const metrics::BinaryMatrix& labels, double tau, double threshold = 0.5,
                                      metrics::ScoreMatrix* scores_out = nullptr,
                                      std::set<std::string>* access = nullptr) {
  require(prompts.embeddings.size() == prompts.names.size(), Errc::invalid_input, "prompt embeddings not built");
  metrics::ScoreMatrix s{vols.size(), prompts.names.size(), {}};
  for (const auto* v : vols) {
    const auto sv = zero_shot_scores(embed_volume(m, *v, access), prompts.embeddings, tau);
    s.data.insert(s.data.end(), sv.p.begin(), sv.p.end());
  }
  auto r = metrics::evaluate(s, labels, prompts.names, threshold);
  r.tau = tau;
  if (scores_out) *scores_out = std::move(s);
  return r;
}

/// Classification-head probabilities sigmoid(W v + b) in eval mode.
template <class T>
metrics::ScoreMatrix head_scores(const model::Model<T>& m, const std::vector<const volume::ModelVolume*>& vols) {
  metrics::ScoreMatrix s{vols.size(), m.cfg.head.classes, {}};
  for (const auto* v : vols) {
    model::Context<T> ctx(m, false, 0, false);
    const auto z = model::to_vector(model::classify(ctx, model::vision_forward(ctx, *v)));
    for (double x : z) s.data.push_back(sigmoid(x));
  }
  return s;
}

template <class T>
metrics::MetricsReport head_eval(const model::Model<T>& m, const std::vector<const volume::ModelVolume*>& vols,
                                 const metrics::BinaryMatrix& labels, double threshold = 0.5,
                                 metrics::ScoreMatrix* scores_out = nullptr) {
  auto s = head_scores(m, vols);
  auto r = metrics::evaluate(s, labels, model::class_names(), threshold);
  if (scores_out) *scores_out = std::move(s);
  return r;
}

}  // namespace ctlora::inference
