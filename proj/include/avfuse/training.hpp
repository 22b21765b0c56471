#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "avfuse/adamw.hpp"
#include "avfuse/autodiff.hpp"
#include "avfuse/fusion.hpp"
#include "avfuse/model.hpp"
#include "avfuse/rng.hpp"
#include "avfuse/tensor.hpp"

namespace avfuse {

template <typename Scalar>
Scalar cross_entropy(const Tensor<Scalar>& logits, Index label) {
  return cross_entropy_value(logits, label);
}

// ---- metrics -------------------------------------------------------------------

struct EvalReport {
  Index num_classes = 0;
  std::vector<std::int64_t> confusion;  // K x K row-major; rows are true labels
  double war = 0;                       // trace / total
  double uar = 0;                       // mean recall over classes with support
  std::vector<Index> excluded_classes;  // zero-support classes left out of UAR
  std::vector<double> fold_war;         // per-fold breakdown when pooled
  std::vector<double> fold_uar;

  std::int64_t at(Index truth, Index pred) const {
    return confusion[static_cast<std::size_t>(truth * num_classes + pred)];
  }
};

inline EvalReport metrics(const std::vector<Index>& preds, const std::vector<Index>& labels,
                          Index num_classes) {
  if (preds.empty() || preds.size() != labels.size()) {
    throw ContractError("metrics: need equally many predictions and labels, got " +
                        std::to_string(preds.size()) + " and " + std::to_string(labels.size()));
  }
  if (num_classes < 1) throw ContractError("metrics: need at least one class");
  EvalReport r;
  r.num_classes = num_classes;
  r.confusion.assign(static_cast<std::size_t>(num_classes * num_classes), 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const Index p = preds[i], l = labels[i];
    if (p < 0 || p >= num_classes || l < 0 || l >= num_classes) {
      throw ContractError("metrics: class index out of range at sample " + std::to_string(i));
    }
    ++r.confusion[static_cast<std::size_t>(l * num_classes + p)];
  }
  std::int64_t total = 0, diag = 0;
  double recall_sum = 0;
  Index supported = 0;
  for (Index c = 0; c < num_classes; ++c) {
    std::int64_t row = 0;
    for (Index p = 0; p < num_classes; ++p) row += r.at(c, p);
    total += row;
    diag += r.at(c, c);
    if (row == 0) {
      r.excluded_classes.push_back(c);
    } else {
      recall_sum += static_cast<double>(r.at(c, c)) / static_cast<double>(row);
      ++supported;
    }
  }
  r.war = static_cast<double>(diag) / static_cast<double>(total);
  r.uar = supported > 0 ? recall_sum / static_cast<double>(supported) : 0.0;
  return r;
}

// Sums the fold confusions and recomputes the rates over the pooled counts;
// the per-fold rates are kept as a breakdown.
inline EvalReport pool_reports(const std::vector<EvalReport>& folds) {
  if (folds.empty()) throw ContractError("pool_reports: nothing to pool");
  const Index k = folds.front().num_classes;
  EvalReport pooled;
  pooled.num_classes = k;
  pooled.confusion.assign(static_cast<std::size_t>(k * k), 0);
  for (const EvalReport& f : folds) {
    if (f.num_classes != k) throw ContractError("pool_reports: class counts disagree");
    for (std::size_t i = 0; i < f.confusion.size(); ++i) pooled.confusion[i] += f.confusion[i];
    pooled.fold_war.push_back(f.war);
    pooled.fold_uar.push_back(f.uar);
  }
  std::int64_t total = 0, diag = 0;
  double recall_sum = 0;
  Index supported = 0;
  for (Index c = 0; c < k; ++c) {
    std::int64_t row = 0;
    for (Index p = 0; p < k; ++p) row += pooled.at(c, p);
    total += row;
    diag += pooled.at(c, c);
    if (row == 0) {
      pooled.excluded_classes.push_back(c);
    } else {
      recall_sum += static_cast<double>(pooled.at(c, c)) / static_cast<double>(row);
      ++supported;
    }
  }
  pooled.war = total > 0 ? static_cast<double>(diag) / static_cast<double>(total) : 0.0;
  pooled.uar = supported > 0 ? recall_sum / static_cast<double>(supported) : 0.0;
  return pooled;
}

// ---- subject-independent folds ---------------------------------------------------

struct FoldPlan {
  Index k = 0;
  std::map<std::string, Index> assignments;

  Index fold_of(const std::string& subject) const {
    auto it = assignments.find(subject);
    if (it == assignments.end()) {
      throw ContractError("fold plan does not cover subject '" + subject + "'");
    }
    return it->second;
  }
};

inline FoldPlan make_folds(const std::vector<std::string>& subject_ids, Index k,
                           std::uint64_t seed) {
  if (k < 1) throw ContractError("make_folds: k must be at least 1");
  std::vector<std::string> unique(subject_ids);
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  if (static_cast<Index>(unique.size()) < k) {
    throw ContractError("make_folds: " + std::to_string(unique.size()) +
                        " unique subjects cannot fill " + std::to_string(k) + " folds");
  }
  SplitMix64 rng(seed);
  shuffle(unique, rng);
  FoldPlan plan;
  plan.k = k;
  for (std::size_t i = 0; i < unique.size(); ++i) {
    plan.assignments[unique[i]] = static_cast<Index>(i) % k;
  }
  return plan;
}

// ---- training -----------------------------------------------------------------

// One preprocessed clip, ready for the encoder.
struct TokenizedClip {
  Tensor<float> tokens;  // N x P
  Index label = -1;
  std::string subject_id;
  std::string clip_id;
};

struct TrainConfig {
  double lr = 1e-2;
  double weight_decay = 0.05;
  Index epochs = 100;
  Index batch_size = 8;
  std::uint64_t seed = 0;
  Strategy strategy = Strategy::FSLF;
  ModelConfig model = ModelConfig::desk();
  Index threads = 1;  // batch members run in parallel; reduction order is fixed

  void validate() const {
    model.validate();
    if (lr < 0) throw ContractError("train config: learning rate must be non-negative");
    if (weight_decay < 0) throw ContractError("train config: weight decay must be non-negative");
    if (epochs < 1) throw ContractError("train config: need at least one epoch");
    if (batch_size < 1) throw ContractError("train config: need a positive batch size");
    if (threads < 1) throw ContractError("train config: need at least one worker");
  }
};

struct TrainResult {
  ModelParams<float> params;
  std::vector<double> loss_curve;  // mean loss per epoch
  double train_war = 0;            // argmax accuracy over the training clips, final params
};

inline void check_clips(const std::vector<TokenizedClip>& clips, const ModelConfig& model,
                        const char* who) {
  if (clips.empty()) throw ContractError(std::string(who) + ": empty clip set");
  for (const TokenizedClip& c : clips) {
    if (c.tokens.rank() != 2 || c.tokens.rows() != model.tokens() ||
        c.tokens.cols() != model.patch_dim()) {
      throw ContractError(std::string(who) + ": clip '" + c.clip_id + "' token grid " +
                          shape_str(c.tokens.shape()) + " does not match the model (" +
                          std::to_string(model.tokens()) + "x" +
                          std::to_string(model.patch_dim()) + ")");
    }
    if (c.label < 0 || c.label >= model.num_classes) {
      throw ContractError(std::string(who) + ": clip '" + c.clip_id + "' label " +
                          std::to_string(c.label) + " outside the " +
                          std::to_string(model.num_classes) + "-class head");
    }
  }
}

inline Index predict(const ModelParams<float>& params, const Tensor<float>& tokens) {
  const Tensor<float> logits = forward_plain(params, tokens);
  Index best = 0;
  for (Index c = 1; c < logits.size(); ++c) {
    if (logits[c] > logits[best]) best = c;
  }
  return best;
}

inline EvalReport evaluate(const ModelParams<float>& params,
                           const std::vector<TokenizedClip>& clips) {
  check_clips(clips, params.cfg, "evaluate");
  std::vector<Index> preds, labels;
  preds.reserve(clips.size());
  labels.reserve(clips.size());
  for (const TokenizedClip& c : clips) {
    preds.push_back(predict(params, c.tokens));
    labels.push_back(c.label);
  }
  return metrics(preds, labels, params.cfg.num_classes);
}

namespace detail {

// Forward/backward for one clip on its own tape; gradients land in `grads`
// in canonical parameter order.
inline double member_grads(const ModelParams<float>& params, const TokenizedClip& clip,
                           std::vector<Tensor<float>>& grads) {
  Tape<float> tape;
  const TapeModel<float> tm = register_tape_model(tape, params);
  const Var<float> loss =
      cross_entropy_logits(forward_tape(tape, params.cfg, tm, clip.tokens), clip.label);
  tape.backward(loss);
  grads.clear();
  grads.reserve(tm.learned.size());
  for (const auto& v : tm.learned) grads.push_back(v.grad());
  return static_cast<double>(loss.value()[0]);
}

}  // namespace detail

// Mini-batch AdamW over the given clips. Deterministic for a fixed seed: the
// per-epoch order is a seeded shuffle, batch gradients are averaged in batch
// order, and the thread count does not change the arithmetic.
inline TrainResult train(const std::vector<TokenizedClip>& clips, const TrainConfig& cfg) {
  cfg.validate();
  check_clips(clips, cfg.model, "train");

  TrainResult out;
  out.params = ModelParams<float>::init(cfg.model, cfg.seed);
  std::vector<Tensor<float>*> plist = out.params.param_list();
  AdamWState<float> state = AdamWState<float>::like(plist);
  AdamWConfig opt;
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;

  const Index n = static_cast<Index>(clips.size());
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  std::vector<Tensor<float>> grad_acc;
  grad_acc.reserve(plist.size());
  for (const Tensor<float>* p : plist) grad_acc.push_back(Tensor<float>(p->shape()));

  for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    SplitMix64 er(cfg.seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(epoch + 1)));
    shuffle(order, er);
    double epoch_loss = 0;

    for (Index start = 0; start < n; start += cfg.batch_size) {
      const Index members = std::min<Index>(cfg.batch_size, n - start);
      std::vector<std::vector<Tensor<float>>> member_grads(static_cast<std::size_t>(members));
      std::vector<double> member_loss(static_cast<std::size_t>(members), 0.0);

      if (cfg.threads <= 1 || members == 1) {
        for (Index m = 0; m < members; ++m) {
          const TokenizedClip& clip = clips[static_cast<std::size_t>(order[static_cast<std::size_t>(start + m)])];
          member_loss[static_cast<std::size_t>(m)] =
              detail::member_grads(out.params, clip, member_grads[static_cast<std::size_t>(m)]);
        }
      } else {
        std::vector<std::thread> pool;
        std::vector<std::string> errors(static_cast<std::size_t>(members));
        const Index stride = cfg.threads;
        for (Index w = 0; w < std::min<Index>(stride, members); ++w) {
          pool.emplace_back([&, w]() {
            for (Index m = w; m < members; m += stride) {
              const TokenizedClip& clip =
                  clips[static_cast<std::size_t>(order[static_cast<std::size_t>(start + m)])];
              try {
                member_loss[static_cast<std::size_t>(m)] = detail::member_grads(
                    out.params, clip, member_grads[static_cast<std::size_t>(m)]);
              } catch (const std::exception& e) {
                errors[static_cast<std::size_t>(m)] = e.what();
              }
            }
          });
        }
        for (auto& t : pool) t.join();
        for (const std::string& e : errors) {
          if (!e.empty()) throw NumericError(e);
        }
      }

      // fixed-order reduction: member 0, 1, ... regardless of thread timing
      for (auto& g : grad_acc) g.flat().setZero();
      double batch_loss = 0;
      for (Index m = 0; m < members; ++m) {
        batch_loss += member_loss[static_cast<std::size_t>(m)];
        const auto& gs = member_grads[static_cast<std::size_t>(m)];
        for (std::size_t i = 0; i < grad_acc.size(); ++i) grad_acc[i].flat() += gs[i].flat();
      }
      const float inv = 1.0f / static_cast<float>(members);
      for (auto& g : grad_acc) g.flat() *= inv;

      if (!std::isfinite(batch_loss)) {
        throw NumericError("train: loss became non-finite at epoch " + std::to_string(epoch) +
                           ", step " + std::to_string(start / cfg.batch_size) + " (first clip '" +
                           clips[static_cast<std::size_t>(order[static_cast<std::size_t>(start)])]
                               .clip_id +
                           "')");
      }

      std::vector<const Tensor<float>*> gptr;
      gptr.reserve(grad_acc.size());
      for (const auto& g : grad_acc) gptr.push_back(&g);
      adamw_step(plist, gptr, state, opt);
      epoch_loss += batch_loss;
    }
    out.loss_curve.push_back(epoch_loss / static_cast<double>(n));
  }

  std::int64_t hits = 0;
  for (const TokenizedClip& c : clips) hits += (predict(out.params, c.tokens) == c.label);
  out.train_war = static_cast<double>(hits) / static_cast<double>(n);
  return out;
}

// Train/held-out split for one fold of a subject-independent plan.
inline std::pair<std::vector<TokenizedClip>, std::vector<TokenizedClip>> split_by_fold(
    const std::vector<TokenizedClip>& clips, const FoldPlan& plan, Index test_fold) {
  if (test_fold < 0 || test_fold >= plan.k) {
    throw ContractError("split_by_fold: fold " + std::to_string(test_fold) + " outside plan of " +
                        std::to_string(plan.k));
  }
  std::pair<std::vector<TokenizedClip>, std::vector<TokenizedClip>> out;
  for (const TokenizedClip& c : clips) {
    (plan.fold_of(c.subject_id) == test_fold ? out.second : out.first).push_back(c);
  }
  return out;
}

}  // namespace avfuse
