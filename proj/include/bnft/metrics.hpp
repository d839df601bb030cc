#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "bnft/data.hpp"
#include "bnft/errors.hpp"
#include "bnft/model.hpp"

namespace bnft {

// Mann-Whitney statistic with midranks for ties:
// (#{pos > neg} + 0.5 #{pos == neg}) / (P N). O(n log n).
inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw DataError("roc_auc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) {
      const int y = labels[order[k]];
      if (y != 0 && y != 1) throw DataError("roc_auc: labels must be 0 or 1");
      if (y == 1) {
        pos_rank_sum += midrank;
        ++positives;
      }
    }
    i = j;
  }
  const std::size_t negatives = scores.size() - positives;
  if (positives == 0 || negatives == 0) throw DataError("roc_auc: both classes must be present");
  const double p = static_cast<double>(positives), n = static_cast<double>(negatives);
  return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

struct AucCell {
  std::string label;
  std::string group;  // empty for ungrouped test sets
  std::optional<double> auc;  // absent when the cell holds a single class
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

struct EvalReport {
  std::vector<AucCell> cells;
  std::size_t samples = 0;
  std::vector<std::string> warnings;

  // Flat mean over every cell with a defined AUC.
  double macro_auc() const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& c : cells) {
      if (c.auc) {
        sum += *c.auc;
        ++n;
      }
    }
    if (n == 0) throw DataError("no cell has a defined AUC");
    return sum / static_cast<double>(n);
  }
};

// Scores are model outputs (N, K). Categorical heads score each class
// one-vs-rest, except a two-class head which reports only the second class
// (the two one-vs-rest AUCs are identical). Groups get one AUC per label.
inline EvalReport make_report(const std::vector<std::vector<double>>& scores, const std::vector<std::vector<float>>& labels,
                              const std::vector<std::string>& groups, LabelKind kind,
                              const std::vector<std::string>& label_names) {
  if (scores.empty()) throw DataError("cannot evaluate an empty test set");
  if (scores.size() != labels.size() || (!groups.empty() && groups.size() != scores.size())) {
    throw DataError("scores, labels and groups differ in length");
  }
  EvalReport report;
  report.samples = scores.size();
  std::vector<std::size_t> label_ids(label_names.size());
  std::iota(label_ids.begin(), label_ids.end(), 0);
  if (kind == LabelKind::Categorical && label_names.size() == 2) label_ids = {1};

  std::map<std::string, std::vector<std::size_t>> by_group;
  for (std::size_t i = 0; i < scores.size(); ++i) by_group[groups.empty() ? std::string() : groups[i]].push_back(i);

  for (const auto& [group, members] : by_group) {
    for (auto k : label_ids) {
      AucCell cell{label_names.at(k), group, std::nullopt, 0, 0};
      std::vector<double> s;
      std::vector<int> y;
      for (auto i : members) {
        s.push_back(scores[i].at(k));
        y.push_back(labels[i].at(k) == 1.0f ? 1 : 0);
        (y.back() ? cell.positives : cell.negatives)++;
      }
      if (cell.positives == 0 || cell.negatives == 0) {
        report.warnings.push_back("label '" + cell.label + "'" + (group.empty() ? "" : " in group '" + group + "'") +
                                  " has a single class; excluded from the macro average");
      } else {
        cell.auc = roc_auc(s, y);
      }
      report.cells.push_back(std::move(cell));
    }
  }
  return report;
}

// Output probabilities over a dataset in evaluation configuration.
template <class T>
std::vector<std::vector<double>> predict(Model<T>& model, const Dataset& data, std::size_t batch_size = 64) {
  InferenceScope<T> scope(model);
  std::vector<std::vector<double>> out;
  const std::size_t k = model.num_outputs();
  for (std::size_t pos = 0; pos < data.size(); pos += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, data.size() - pos));
    std::iota(idx.begin(), idx.end(), pos);
    const auto batch = make_batch<T>(data, idx);
    const auto probs = model.forward(batch.images);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      out.emplace_back(probs.data().begin() + static_cast<std::ptrdiff_t>(b * k),
                       probs.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * k));
    }
  }
  return out;
}

template <class T>
EvalReport evaluate(Model<T>& model, const Dataset& test) {
  if (test.size() == 0) throw DataError("cannot evaluate an empty test set");
  bool grouped = std::any_of(test.groups.begin(), test.groups.end(), [](const auto& g) { return !g.empty(); });
  return make_report(predict(model, test), test.labels, grouped ? test.groups : std::vector<std::string>{},
                     test.label_kind, test.label_names);
}

inline std::string format_number(double v, int precision = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

inline void write_report_csv(std::ostream& out, const EvalReport& r) {
  out << "label,group,auc,positives,negatives\n";
  for (const auto& c : r.cells) {
    out << c.label << ',' << c.group << ',' << (c.auc ? format_number(*c.auc) : "") << ',' << c.positives << ','
        << c.negatives << '\n';
  }
}

inline std::string report_summary(const EvalReport& r) {
  std::ostringstream os;
  os << "label            group        AUC      pos   neg\n";
  for (const auto& c : r.cells) {
    char line[160];
    std::snprintf(line, sizeof line, "%-16s %-12s %-8s %5zu %5zu\n", c.label.c_str(),
                  c.group.empty() ? "-" : c.group.c_str(), c.auc ? format_number(*c.auc, 4).c_str() : "n/a",
                  c.positives, c.negatives);
    os << line;
  }
  os << "macro AUC " << format_number(r.macro_auc(), 4) << " over " << r.samples << " samples\n";
  for (const auto& w : r.warnings) os << "warning: " << w << '\n';
  return os.str();
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
  std::size_t n = 0;
};

inline MeanStd mean_std(const std::vector<double>& xs) {
  if (xs.empty()) throw DataError("mean_std of an empty list");
  MeanStd m;
  m.n = xs.size();
  m.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(m.n);
  if (m.n > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(m.n - 1));
  }
  return m;
}

// AUC fractions rendered in percent, e.g. "96.5 (1.3)".
inline std::string format_cell(const MeanStd& m) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f (%.1f)", 100.0 * m.mean, 100.0 * m.std);
  return buf;
}

}  // namespace bnft
