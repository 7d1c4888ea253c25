// Copyright (c) 2026 The ctlora Authors
// SPDX-License-Identifier: Apache-2.0

// Multi-label evaluation: tie-aware AUROC and the accuracy / F1 family.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ctlora/error.hpp"

namespace ctlora::metrics {

/// Row-major N x C matrix of binary decisions.
struct BinaryMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> data;

  std::uint8_t operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

/// Row-major N x C matrix of scores.
struct ScoreMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

struct ConfusionCounts {
  std::vector<std::uint64_t> tp, tn, fp, fn;
};

/// Mann-Whitney AUROC with average ranks for ties. Empty when all labels agree.
inline std::optional<double> auroc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
  require(scores.size() == labels.size() && !scores.empty(), Errc::invalid_input, "auroc: length mismatch or empty");
  const std::size_t n = scores.size();
  std::size_t pos = 0;
  for (auto l : labels) {
    require(l <= 1, Errc::invalid_input, "auroc: labels must be binary");
    pos += l;
  }
  if (pos == 0 || pos == n) return std::nullopt;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  double rank_sum = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]]) rank_sum += avg;
    i = j + 1;
  }
  const double np = static_cast<double>(pos), nn = static_cast<double>(n - pos);
  return (rank_sum - np * (np + 1) / 2) / (np * nn);
}

/// pred = score >= t.
inline BinaryMatrix threshold(const ScoreMatrix& s, double t) {
  BinaryMatrix b{s.rows, s.cols, std::vector<std::uint8_t>(s.data.size())};
  for (std::size_t i = 0; i < s.data.size(); ++i) b.data[i] = s.data[i] >= t ? 1 : 0;
  return b;
}

inline ConfusionCounts confusion(const BinaryMatrix& pred, const BinaryMatrix& truth) {
  require(pred.rows == truth.rows && pred.cols == truth.cols && pred.data.size() == truth.data.size(),
          Errc::invalid_input, "confusion: shape mismatch");
  ConfusionCounts c;
  c.tp.assign(pred.cols, 0);
  c.tn.assign(pred.cols, 0);
  c.fp.assign(pred.cols, 0);
  c.fn.assign(pred.cols, 0);
  for (std::size_t i = 0; i < pred.rows; ++i)
    for (std::size_t j = 0; j < pred.cols; ++j) {
      const auto p = pred(i, j), y = truth(i, j);
      require(p <= 1 && y <= 1, Errc::invalid_input, "confusion: entries must be binary");
      if (p && y) ++c.tp[j];
      else if (!p && !y) ++c.tn[j];
      else if (p) ++c.fp[j];
      else ++c.fn[j];
    }
  return c;
}

struct F1Suite {
  double accuracy = 0;
  double micro_f1 = 0;
  double macro_f1 = 0;
  double weighted_f1 = 0;
  double samples_f1 = 0;
  std::vector<double> per_class_f1;
  std::vector<std::size_t> zero_denominator_classes;  // F1 defined as 0 there
};

inline double f1_from(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn, bool* undefined = nullptr) {
  const std::uint64_t den = 2 * tp + fp + fn;
  if (undefined) *undefined = den == 0;
  return den == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(den);
}

inline F1Suite f1_suite(const BinaryMatrix& pred, const BinaryMatrix& truth) {
  const auto c = confusion(pred, truth);
  F1Suite r;
  const std::size_t C = pred.cols;
  std::uint64_t stp = 0, stn = 0, sfp = 0, sfn = 0, support = 0;
  double weighted = 0;
  for (std::size_t j = 0; j < C; ++j) {
    bool undefined = false;
    const double f = f1_from(c.tp[j], c.fp[j], c.fn[j], &undefined);
    if (undefined) r.zero_denominator_classes.push_back(j);
    r.per_class_f1.push_back(f);
    stp += c.tp[j];
    stn += c.tn[j];
    sfp += c.fp[j];
    sfn += c.fn[j];
    const std::uint64_t sup = c.tp[j] + c.fn[j];
    support += sup;
    weighted += f * static_cast<double>(sup);
  }
  const std::uint64_t total = stp + stn + sfp + sfn;
  r.accuracy = total == 0 ? 0.0 : static_cast<double>(stp + stn) / static_cast<double>(total);
  r.micro_f1 = f1_from(stp, sfp, sfn);
  r.macro_f1 = C == 0 ? 0.0 : std::accumulate(r.per_class_f1.begin(), r.per_class_f1.end(), 0.0) / double(C);
  r.weighted_f1 = support == 0 ? 0.0 : weighted / static_cast<double>(support);
  double samples = 0;
  for (std::size_t i = 0; i < pred.rows; ++i) {
    std::uint64_t tp = 0, fp = 0, fn = 0;
    for (std::size_t j = 0; j < C; ++j) {
      tp += pred(i, j) && truth(i, j);
      fp += pred(i, j) && !truth(i, j);
      fn += !pred(i, j) && truth(i, j);
    }
    // An empty prediction for an empty label set is exact agreement.
    samples += (tp + fp + fn == 0) ? 1.0 : f1_from(tp, fp, fn);
  }
  r.samples_f1 = pred.rows == 0 ? 0.0 : samples / static_cast<double>(pred.rows);
  return r;
}

struct MetricsReport {
  std::vector<std::string> class_names;
  std::vector<std::optional<double>> per_class_auroc;
  double mean_auroc = 0;
  F1Suite f1;
  double threshold = 0.5;
  double tau = 0;  // zero-shot temperature, 0 when not applicable
  std::vector<std::string> excluded_classes;
  std::vector<std::uint64_t> score_histogram;  // 10 equal bins over [0,1]
};

inline MetricsReport evaluate(const ScoreMatrix& scores, const BinaryMatrix& labels,
                              const std::vector<std::string>& class_names, double t = 0.5) {
  require(scores.rows == labels.rows && scores.cols == labels.cols, Errc::invalid_input, "evaluate: shape mismatch");
  require(class_names.size() == scores.cols, Errc::invalid_input, "evaluate: class name count mismatch");
  MetricsReport r;
  r.class_names = class_names;
  r.threshold = t;
  double sum = 0;
  std::size_t used = 0;
  for (std::size_t j = 0; j < scores.cols; ++j) {
    std::vector<double> s(scores.rows);
    std::vector<std::uint8_t> y(scores.rows);
    for (std::size_t i = 0; i < scores.rows; ++i) {
      s[i] = scores(i, j);
      y[i] = labels(i, j);
    }
    auto a = auroc(s, y);
    r.per_class_auroc.push_back(a);
    if (a) {
      sum += *a;
      ++used;
    } else {
      r.excluded_classes.push_back(class_names[j]);
    }
  }
  r.mean_auroc = used ? sum / double(used) : 0.0;
  r.f1 = f1_suite(threshold(scores, t), labels);
  r.score_histogram.assign(10, 0);
  for (double v : scores.data) {
    const auto b = static_cast<std::size_t>(std::clamp(v, 0.0, 1.0) * 10.0);
    ++r.score_histogram[std::min<std::size_t>(b, 9)];
  }
  return r;
}

inline std::string key_for(const std::string& class_name) {
  std::string k = class_name;
  for (auto& ch : k)
    if (ch == ' ') ch = '_';
  return k;
}

/// Flat `key=value` serialization with stable key names.
inline std::string serialize(const MetricsReport& r) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "accuracy=" << r.f1.accuracy << "\n";
  os << "micro_f1=" << r.f1.micro_f1 << "\n";
  os << "macro_f1=" << r.f1.macro_f1 << "\n";
  os << "weighted_f1=" << r.f1.weighted_f1 << "\n";
  os << "samples_f1=" << r.f1.samples_f1 << "\n";
  os << "mean_auroc=" << r.mean_auroc << "\n";
  os << "threshold=" << r.threshold << "\n";
  os << "tau=" << r.tau << "\n";
  for (std::size_t j = 0; j < r.class_names.size(); ++j) {
    os << "auroc." << key_for(r.class_names[j]) << "=";
    if (r.per_class_auroc[j]) os << *r.per_class_auroc[j];
    else os << "degenerate";
    os << "\n";
  }
  for (std::size_t j = 0; j < r.class_names.size(); ++j)
    os << "f1." << key_for(r.class_names[j]) << "=" << r.f1.per_class_f1[j] << "\n";
  os << "excluded=";
  for (std::size_t i = 0; i < r.excluded_classes.size(); ++i) os << (i ? "," : "") << key_for(r.excluded_classes[i]);
  os << "\n";
  os << "score_histogram=";
  for (std::size_t i = 0; i < r.score_histogram.size(); ++i) os << (i ? "," : "") << r.score_histogram[i];
  os << "\n";
  return os.str();
}

/// Parses the scalar keys of a serialized report.
inline std::map<std::string, std::string> parse_flat(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

}  // namespace ctlora::metrics
