#pragma once

#include <cmath>
#include <vector>

#include "rcm/model.hpp"

namespace rcm {

/// Streaming per-task metric accumulator so mIoU and F1 aggregate over the
/// whole dataset rather than averaging per-image values.
class MetricAccumulator {
 public:
  explicit MetricAccumulator(MetricKind kind, int num_classes = 0)
      : kind_(kind), classes_(num_classes) {
    if (kind == MetricKind::MIoU && num_classes < 2)
      throw Error("metric: mIoU needs a class count");
    if (kind == MetricKind::MIoU)
      confusion_.assign(static_cast<size_t>(num_classes) * num_classes, 0);
  }

  /// `pred` is the head output for one batch; `label` the matching target.
  /// Dense prediction layouts follow the head contracts in the model.
  void add(const Tensor& pred, const Tensor& label) {
    switch (kind_) {
      case MetricKind::MIoU: {
        // pred [N,C,H,W] logits, label [N,H,W] class map; single-channel
        // preds are thresholded binary masks
        if (pred.dim(1) == 1) {
          add_binary_confusion(pred, label);
        } else {
          int n = pred.dim(0), c = pred.dim(1), h = pred.dim(2), w = pred.dim(3);
          for (int s = 0; s < n; ++s)
            for (int y = 0; y < h; ++y)
              for (int x = 0; x < w; ++x) {
                int best = 0;
                float bv = pred.at4(s, 0, y, x);
                for (int ch = 1; ch < c; ++ch)
                  if (pred.at4(s, ch, y, x) > bv) {
                    bv = pred.at4(s, ch, y, x);
                    best = ch;
                  }
                int lbl = static_cast<int>(label.data[(static_cast<size_t>(s) * h + y) * w + x]);
                confusion_[static_cast<size_t>(lbl) * classes_ + best]++;
              }
        }
        break;
      }
      case MetricKind::F1Edge: {
        // thresholded at 0.5 on the sigmoid, i.e. logit > 0, 0-pixel tolerance
        for (size_t i = 0; i < pred.data.size(); ++i) {
          bool p = pred.data[i] > 0.0f;
          bool t = label.data[i] > 0.5f;
          tp_ += p && t;
          fp_ += p && !t;
          fn_ += !p && t;
        }
        break;
      }
      case MetricKind::MeanErr: {
        if (!pred.same_shape(label)) throw Error("metric: shape mismatch");
        for (size_t i = 0; i < pred.data.size(); ++i)
          err_sum_ += std::abs(static_cast<double>(pred.data[i]) - label.data[i]);
        err_count_ += static_cast<double>(pred.data.size());
        break;
      }
      case MetricKind::Rmse: {
        if (!pred.same_shape(label)) throw Error("metric: shape mismatch");
        for (size_t i = 0; i < pred.data.size(); ++i) {
          double d = static_cast<double>(pred.data[i]) - label.data[i];
          err_sum_ += d * d;
        }
        err_count_ += static_cast<double>(pred.data.size());
        break;
      }
      case MetricKind::Accuracy: {
        // pred [N,C] logits, label [N]
        int n = pred.dim(0), c = pred.dim(1);
        for (int s = 0; s < n; ++s) {
          int best = 0;
          for (int ch = 1; ch < c; ++ch)
            if (pred.at2(s, ch) > pred.at2(s, best)) best = ch;
          tp_ += best == static_cast<int>(label.data[static_cast<size_t>(s)]);
          err_count_ += 1;
        }
        break;
      }
    }
  }

  double value() const {
    switch (kind_) {
      case MetricKind::MIoU: {
        // mean over classes present in the labels
        double sum = 0;
        int present = 0;
        for (int c = 0; c < classes_; ++c) {
          int64_t row = 0, col = 0, diag = confusion_[static_cast<size_t>(c) * classes_ + c];
          for (int j = 0; j < classes_; ++j) {
            row += confusion_[static_cast<size_t>(c) * classes_ + j];
            col += confusion_[static_cast<size_t>(j) * classes_ + c];
          }
          if (row == 0) continue;  // class absent from labels
          present++;
          int64_t uni = row + col - diag;
          sum += uni > 0 ? static_cast<double>(diag) / static_cast<double>(uni) : 0.0;
        }
        if (present == 0) throw Error("metric: empty label set for mIoU");
        return sum / present;
      }
      case MetricKind::F1Edge: {
        double denom = 2.0 * tp_ + fp_ + fn_;
        return denom > 0 ? 2.0 * tp_ / denom : 0.0;
      }
      case MetricKind::MeanErr:
        return err_count_ > 0 ? err_sum_ / err_count_ : 0.0;
      case MetricKind::Rmse:
        return err_count_ > 0 ? std::sqrt(err_sum_ / err_count_) : 0.0;
      case MetricKind::Accuracy:
        return err_count_ > 0 ? static_cast<double>(tp_) / err_count_ : 0.0;
    }
    throw Error("bad metric kind");
  }

 private:
  void add_binary_confusion(const Tensor& pred, const Tensor& label) {
    for (size_t i = 0; i < pred.data.size(); ++i) {
      int p = pred.data[i] > 0.0f ? 1 : 0;
      int t = label.data[i] > 0.5f ? 1 : 0;
      confusion_[static_cast<size_t>(t) * classes_ + p]++;
    }
  }

  MetricKind kind_;
  int classes_ = 0;
  std::vector<int64_t> confusion_;
  int64_t tp_ = 0, fp_ = 0, fn_ = 0;
  double err_sum_ = 0, err_count_ = 0;
};

/// One-shot metric over a single prediction/label pair.
inline double task_metrics(const Tensor& pred, const Tensor& label, MetricKind kind,
                           int num_classes = 0) {
  MetricAccumulator acc(kind, kind == MetricKind::MIoU
                                  ? (num_classes > 0 ? num_classes : (pred.dim(1) == 1 ? 2 : pred.dim(1)))
                                  : 0);
  acc.add(pred, label);
  return acc.value();
}

}  // namespace rcm
