#include "scenelab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "scenelab/losses.hpp"

namespace scenelab {

ConfusionMatrix::ConfusionMatrix(std::vector<std::string> class_names)
    : classes(std::move(class_names)),
      counts(classes.size() * classes.size(), 0) {}

void ConfusionMatrix::add(int true_idx, int pred_idx, int64_t n) {
  if (true_idx < 0 || true_idx >= size() || pred_idx < 0 ||
      pred_idx >= size()) {
    throw ContractError("confusion: index out of range");
  }
  counts[static_cast<size_t>(true_idx) * size() + pred_idx] += n;
}

int64_t ConfusionMatrix::at(int true_idx, int pred_idx) const {
  return counts[static_cast<size_t>(true_idx) * size() + pred_idx];
}

int64_t ConfusionMatrix::total() const {
  int64_t t = 0;
  for (int64_t c : counts) t += c;
  return t;
}

int64_t ConfusionMatrix::row_sum(int true_idx) const {
  int64_t t = 0;
  for (int p = 0; p < size(); ++p) t += at(true_idx, p);
  return t;
}

std::vector<double> ConfusionMatrix::row_normalized() const {
  std::vector<double> out(counts.size(), 0.0);
  for (int r = 0; r < size(); ++r) {
    const int64_t rs = row_sum(r);
    if (rs == 0) continue;
    for (int p = 0; p < size(); ++p) {
      out[static_cast<size_t>(r) * size() + p] =
          static_cast<double>(at(r, p)) / static_cast<double>(rs);
    }
  }
  return out;
}

double balanced_accuracy(const ConfusionMatrix& cm,
                         std::vector<std::string>* excluded) {
  if (cm.size() == 0 || cm.total() == 0) {
    throw ContractError("balanced_accuracy: empty confusion matrix");
  }
  double acc = 0.0;
  int supported = 0;
  for (int r = 0; r < cm.size(); ++r) {
    const int64_t rs = cm.row_sum(r);
    if (rs == 0) {
      if (excluded) excluded->push_back(cm.classes[r]);
      continue;
    }
    acc += static_cast<double>(cm.at(r, r)) / static_cast<double>(rs);
    ++supported;
  }
  return acc / supported;
}

namespace {

int index_of(const std::vector<std::string>& classes, const std::string& c) {
  const auto it = std::find(classes.begin(), classes.end(), c);
  return it == classes.end() ? -1 : static_cast<int>(it - classes.begin());
}

EvalResult metrics_from(const std::vector<PredictionRow>& predictions,
                        const std::vector<std::string>& classes) {
  EvalResult res;
  res.cm = ConfusionMatrix(classes);
  int64_t correct = 0;
  for (const auto& p : predictions) {
    const int t = index_of(classes, p.true_class);
    const int y = index_of(classes, p.predicted_class);
    if (t < 0 || y < 0) {
      throw ContractError("evaluate: class '" +
                          (t < 0 ? p.true_class : p.predicted_class) +
                          "' not in the class list");
    }
    res.cm.add(t, y);
    correct += t == y;
  }
  res.evaluated = static_cast<int64_t>(predictions.size());
  res.plain_acc = res.evaluated
                      ? static_cast<double>(correct) / res.evaluated
                      : 0.0;
  res.balanced_acc = balanced_accuracy(res.cm, &res.excluded_classes);
  res.per_class_recall.assign(classes.size(), 0.0);
  for (int r = 0; r < res.cm.size(); ++r) {
    const int64_t rs = res.cm.row_sum(r);
    res.per_class_recall[r] =
        rs == 0 ? 0.0 : static_cast<double>(res.cm.at(r, r)) / rs;
  }
  res.audit = predictions;
  return res;
}

}  // namespace

EvalResult evaluate(SceneModel& model, const SampleManifest& manifest,
                    const std::string& split,
                    const std::vector<std::string>& model_classes,
                    const AugmentPolicy& eval_policy,
                    const std::string& base_dir, int batch_size) {
  const auto indices = split_indices(manifest, split);
  if (indices.empty()) {
    throw ContractError("evaluate: split '" + split + "' is empty");
  }
  // every manifest class must exist in the model's head
  std::set<std::string> missing;
  for (size_t idx : indices) {
    const auto& cls = manifest.rows[idx].mapped_class;
    if (index_of(model_classes, cls) < 0) missing.insert(cls);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += " '" + m + "'";
    throw ContractError("evaluate: classes absent from the model head:" +
                        list);
  }

  auto loaded = load_images(manifest, indices, base_dir);
  std::vector<PredictionRow> predictions;
  NoGradGuard ng;
  std::vector<size_t> live;
  for (size_t i = 0; i < indices.size(); ++i) {
    if (loaded.ok[i]) live.push_back(i);
  }
  for (size_t start = 0; start < live.size();
       start += static_cast<size_t>(batch_size)) {
    const size_t stop =
        std::min(live.size(), start + static_cast<size_t>(batch_size));
    std::vector<Tensor> batch;
    for (size_t i = start; i < stop; ++i) {
      Tensor img = apply_eval_transform(loaded.images[live[i]], eval_policy);
      const auto& s = img.shape();
      batch.push_back(reshape(img, {1, s[0], s[1], s[2]}));
    }
    Tensor logits =
        softmax(model.classify(model.encode(concat(batch, 0), false)));
    for (size_t i = start; i < stop; ++i) {
      const auto& row = manifest.rows[indices[live[i]]];
      const int64_t r = static_cast<int64_t>(i - start);
      int best = 0;
      float best_p = logits.at({r, 0});
      for (int c = 1; c < static_cast<int>(model_classes.size()); ++c) {
        if (logits.at({r, c}) > best_p) {
          best_p = logits.at({r, c});
          best = c;
        }
      }
      PredictionRow pr;
      pr.uri = row.uri;
      pr.true_class = row.mapped_class;
      pr.predicted_class = model_classes[best];
      pr.confidence = best_p;
      predictions.push_back(std::move(pr));
    }
  }
  EvalResult res = metrics_from(predictions, model_classes);
  res.skipped = loaded.skipped;
  return res;
}

EvalResult evaluate_images(SceneModel& model, std::span<const Tensor> images,
                           std::span<const int> labels,
                           const std::vector<std::string>& classes,
                           const AugmentPolicy& eval_policy, int batch_size) {
  if (images.empty() || images.size() != labels.size()) {
    throw ContractError("evaluate: image/label mismatch");
  }
  NoGradGuard ng;
  std::vector<PredictionRow> predictions;
  for (size_t start = 0; start < images.size();
       start += static_cast<size_t>(batch_size)) {
    const size_t stop =
        std::min(images.size(), start + static_cast<size_t>(batch_size));
    std::vector<Tensor> batch;
    for (size_t i = start; i < stop; ++i) {
      Tensor img = apply_eval_transform(images[i], eval_policy);
      const auto& s = img.shape();
      batch.push_back(reshape(img, {1, s[0], s[1], s[2]}));
    }
    Tensor probs =
        softmax(model.classify(model.encode(concat(batch, 0), false)));
    for (size_t i = start; i < stop; ++i) {
      const int64_t r = static_cast<int64_t>(i - start);
      int best = 0;
      float best_p = probs.at({r, 0});
      for (int c = 1; c < static_cast<int>(classes.size()); ++c) {
        if (probs.at({r, c}) > best_p) {
          best_p = probs.at({r, c});
          best = c;
        }
      }
      PredictionRow pr;
      pr.uri = "mem:" + std::to_string(i);
      pr.true_class = classes.at(labels[i]);
      pr.predicted_class = classes[best];
      pr.confidence = best_p;
      predictions.push_back(std::move(pr));
    }
  }
  return metrics_from(predictions, classes);
}

EvalResult evaluate_predictions(const std::vector<PredictionRow>& predictions,
                                const std::vector<std::string>& classes) {
  if (predictions.empty()) {
    throw ContractError("evaluate: no predictions");
  }
  return metrics_from(predictions, classes);
}

std::vector<GroupReport> grouped_report(
    const std::vector<PredictionRow>& predictions,
    const std::vector<std::string>& classes) {
  std::map<std::string, std::vector<PredictionRow>> by_group;
  for (const auto& p : predictions) {
    if (p.group_tag.empty()) {
      throw ContractError("grouped_report: prediction for '" + p.uri +
                          "' carries no group tag");
    }
    by_group[p.group_tag].push_back(p);
  }
  std::vector<GroupReport> out;
  for (const auto& [group, rows] : by_group) {
    GroupReport rep;
    rep.group = group;
    rep.metrics = metrics_from(rows, classes);
    std::map<std::string, int64_t> hist;
    for (const auto& r : rows) ++hist[r.true_class];
    for (const auto& cls : classes) {
      const auto it = hist.find(cls);
      if (it != hist.end()) rep.class_histogram.emplace_back(cls, it->second);
    }
    out.push_back(std::move(rep));
  }
  return out;
}

void write_audit(const std::vector<PredictionRow>& rows,
                 const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write audit: " + path);
  os << "# columns=uri\ttrue_class\tpredicted_class\tconfidence\tgroup\n";
  char buf[32];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.6f", static_cast<double>(r.confidence));
    os << r.uri << '\t' << r.true_class << '\t' << r.predicted_class << '\t'
       << buf << '\t' << (r.group_tag.empty() ? "-" : r.group_tag) << '\n';
  }
}

std::vector<PredictionRow> read_audit(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read audit: " + path);
  std::vector<PredictionRow> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    PredictionRow r;
    std::string conf;
    std::getline(ls, r.uri, '\t');
    std::getline(ls, r.true_class, '\t');
    std::getline(ls, r.predicted_class, '\t');
    std::getline(ls, conf, '\t');
    std::getline(ls, r.group_tag, '\t');
    r.confidence = std::strtof(conf.c_str(), nullptr);
    if (r.group_tag == "-") r.group_tag.clear();
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace scenelab
