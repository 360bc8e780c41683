#pragma once

#include <atomic>
#include <cstdint>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "drl/model.hpp"
#include "drl/rng.hpp"
#include "drl/tensor.hpp"

namespace drl {

enum class AttackKind { Fgsm, Pgd, Mim, CwLinf, Ensemble };

inline const char* attack_kind_name(AttackKind k) {
  switch (k) {
    case AttackKind::Fgsm: return "fgsm";
    case AttackKind::Pgd: return "pgd";
    case AttackKind::Mim: return "mim";
    case AttackKind::CwLinf: return "cw";
    case AttackKind::Ensemble: return "ensemble";
  }
  return "?";
}

inline AttackKind attack_kind_from_name(const std::string& s) {
  if (s == "fgsm") return AttackKind::Fgsm;
  if (s == "pgd") return AttackKind::Pgd;
  if (s == "mim") return AttackKind::Mim;
  if (s == "cw") return AttackKind::CwLinf;
  if (s == "ensemble") return AttackKind::Ensemble;
  throw ValueError("unknown attack kind: " + s);
}

struct AttackConfig {
  double epsilon = 8.0 / 255.0;  // l-inf budget in input units
  double alpha = -1.0;           // step size; <0 derives epsilon/4
  int steps = 10;
  bool random_start = true;      // uniform start in the eps ball (iterative attacks)
  double momentum_decay = 1.0;   // mim accumulation weight
  double kappa = 0.0;            // cw margin
  double range_lo = 0.0;
  double range_hi = 1.0;
  bool cw_rechoose_target = false;  // re-pick the cw target class every step

  double resolved_alpha() const { return alpha >= 0.0 ? alpha : epsilon / 4.0; }

  void validate() const {
    if (epsilon < 0.0) throw ValueError("attack epsilon must be non-negative");
    if (!(range_lo < range_hi)) throw ValueError("attack valid_range must satisfy lo < hi");
    if (momentum_decay < 0.0) throw ValueError("attack momentum decay must be non-negative");
    if (kappa < 0.0) throw ValueError("attack kappa must be non-negative");
    if (steps > 0 && epsilon > 0.0 && !(resolved_alpha() > 0.0)) {
      throw ValueError("attack alpha must be positive when steps > 0");
    }
  }
};

struct AttackResult {
  Tensor adversarial;                 // same shape as the clean batch
  std::vector<double> final_loss;     // per example, the attack's own objective
  std::vector<std::uint8_t> success;  // per example, prediction != label
};

// Per-coordinate clamp into the eps ball around origin, then into the valid
// input range.
inline Tensor project_linf(const Tensor& candidate, const Tensor& origin, double eps, double lo,
                           double hi) {
  if (candidate.shape() != origin.shape()) throw ShapeError("project_linf: shape mismatch");
  if (!(lo < hi)) throw ValueError("project_linf: lo must be below hi");
  std::vector<double> out(candidate.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double o = origin.at(i);
    double v = std::min(std::max(candidate.at(i), o - eps), o + eps);
    out[i] = std::min(std::max(v, lo), hi);
  }
  return Tensor(candidate.shape(), std::move(out));
}

namespace detail {

// Loss of a batch plus its gradient w.r.t. the batch; parameters stay frozen.
template <typename LossFn>
inline std::vector<double> batch_input_gradient(const Tensor& x_values, LossFn&& loss_of) {
  Tensor x(x_values.shape(), x_values.values(), /*requires_grad=*/true);
  Tensor loss = loss_of(x);
  loss.backward();
  if (!all_finite(x.grad())) throw NumericError("attack: non-finite input gradient");
  return x.grad();
}

inline Tensor random_start_point(const Tensor& clean, const AttackConfig& cfg, Rng& rng) {
  std::vector<double> v(clean.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = clean.at(i) + rng.uniform(-cfg.epsilon, cfg.epsilon);
  }
  return project_linf(Tensor(clean.shape(), std::move(v)), clean, cfg.epsilon, cfg.range_lo,
                      cfg.range_hi);
}

// Mean CE across the given models; single-model reduces to plain softmax_ce.
inline Tensor ensemble_ce(const std::vector<Model>& models, const Tensor& x,
                          const std::vector<int>& y) {
  Tensor acc;
  for (const Model& m : models) {
    Tensor term = softmax_ce(m.forward_logits(x, /*frozen_params=*/true), y);
    acc = acc.defined() ? add(acc, term) : term;
  }
  return mul(acc, 1.0 / static_cast<double>(models.size()));
}

inline std::vector<double> per_example_ce(const std::vector<Model>& models, const Tensor& adv,
                                          const std::vector<int>& y) {
  std::vector<double> loss(adv.shape()[0], 0.0);
  for (const Model& m : models) {
    Tensor rows = cross_entropy_rows(m.forward_logits(adv.detach(), true), y);
    for (std::size_t i = 0; i < loss.size(); ++i) loss[i] += rows.at(i);
  }
  for (double& v : loss) v /= static_cast<double>(models.size());
  return loss;
}

inline std::vector<std::uint8_t> success_flags(const std::vector<Model>& models, const Tensor& adv,
                                               const std::vector<int>& y) {
  Tensor probs;
  for (const Model& m : models) {
    Tensor p = m.forward_softmax(adv.detach(), true);
    probs = probs.defined() ? add(probs, p) : p;
  }
  auto pred = argmax_rows(probs);
  std::vector<std::uint8_t> out(pred.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = pred[i] != y[i] ? 1 : 0;
  }
  return out;
}

// Sign-step iteration shared by fgsm, pgd and the ensemble variant;
// direction +1 ascends the loss.
inline Tensor sign_step_iterate(const std::vector<Model>& models, const Tensor& clean,
                                const std::vector<int>& y, const AttackConfig& cfg, int steps,
                                double alpha, bool random_start, Rng& rng) {
  Tensor x = random_start && cfg.epsilon > 0.0 ? random_start_point(clean, cfg, rng) : clean.detach();
  for (int t = 0; t < steps; ++t) {
    auto g = batch_input_gradient(x, [&](const Tensor& xt) { return ensemble_ce(models, xt, y); });
    std::vector<double> moved(x.size());
    for (std::size_t i = 0; i < moved.size(); ++i) {
      const double s = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
      moved[i] = x.at(i) + alpha * s;
    }
    x = project_linf(Tensor(x.shape(), std::move(moved)), clean, cfg.epsilon, cfg.range_lo,
                     cfg.range_hi);
  }
  return x;
}

inline void check_attack_batch(const Model& model, const Tensor& x, const std::vector<int>& y) {
  if (x.ndim() < 2) throw ShapeError("attack batch needs a leading example dimension");
  check_labels(y, x.shape()[0], static_cast<std::size_t>(model.classes()));
}

}  // namespace detail

// Single sign step of size epsilon along the CE input gradient.
inline AttackResult fgsm(const Model& model, const Tensor& x, const std::vector<int>& y,
                         const AttackConfig& cfg) {
  cfg.validate();
  detail::check_attack_batch(model, x, y);
  std::vector<Model> one{model};
  Rng unused(0);
  Tensor adv = detail::sign_step_iterate(one, x, y, cfg, /*steps=*/1, /*alpha=*/cfg.epsilon,
                                         /*random_start=*/false, unused);
  return AttackResult{adv, detail::per_example_ce(one, adv, y), detail::success_flags(one, adv, y)};
}

// Iterated projected sign ascent on CE.
inline AttackResult pgd(const Model& model, const Tensor& x, const std::vector<int>& y,
                        const AttackConfig& cfg, Rng& rng) {
  cfg.validate();
  if (cfg.steps < 1) throw ValueError("pgd needs steps >= 1");
  detail::check_attack_batch(model, x, y);
  std::vector<Model> one{model};
  Tensor adv = detail::sign_step_iterate(one, x, y, cfg, cfg.steps, cfg.resolved_alpha(),
                                         cfg.random_start, rng);
  return AttackResult{adv, detail::per_example_ce(one, adv, y), detail::success_flags(one, adv, y)};
}

// Momentum attack: per-example l1-normalized gradients accumulate before the
// sign step. A zero-gradient example contributes nothing that step.
inline AttackResult mim(const Model& model, const Tensor& x, const std::vector<int>& y,
                        const AttackConfig& cfg, Rng& rng) {
  cfg.validate();
  if (cfg.steps < 1) throw ValueError("mim needs steps >= 1");
  detail::check_attack_batch(model, x, y);
  std::vector<Model> one{model};
  const std::size_t n = x.shape()[0];
  const std::size_t per = x.size() / n;
  const double alpha = cfg.resolved_alpha();

  Tensor cur = cfg.random_start && cfg.epsilon > 0.0 ? detail::random_start_point(x, cfg, rng)
                                                     : x.detach();
  std::vector<double> momentum(x.size(), 0.0);
  for (int t = 0; t < cfg.steps; ++t) {
    auto g = detail::batch_input_gradient(
        cur, [&](const Tensor& xt) { return softmax_ce(model.forward_logits(xt, true), y); });
    for (std::size_t e = 0; e < n; ++e) {
      double l1 = 0.0;
      for (std::size_t i = 0; i < per; ++i) l1 += std::fabs(g[e * per + i]);
      for (std::size_t i = 0; i < per; ++i) {
        const double normed = l1 > 0.0 ? g[e * per + i] / l1 : 0.0;
        momentum[e * per + i] = cfg.momentum_decay * momentum[e * per + i] + normed;
      }
    }
    std::vector<double> moved(x.size());
    for (std::size_t i = 0; i < moved.size(); ++i) {
      const double s = momentum[i] > 0.0 ? 1.0 : (momentum[i] < 0.0 ? -1.0 : 0.0);
      moved[i] = cur.at(i) + alpha * s;
    }
    cur = project_linf(Tensor(x.shape(), std::move(moved)), x, cfg.epsilon, cfg.range_lo,
                       cfg.range_hi);
  }
  return AttackResult{cur, detail::per_example_ce(one, cur, y),
                      detail::success_flags(one, cur, y)};
}

namespace detail {

inline std::vector<int> cw_target_classes(const Model& model, const Tensor& x,
                                          const std::vector<int>& y) {
  Tensor logits = model.forward_logits(x.detach(), true);
  const std::size_t C = logits.shape()[1];
  std::vector<int> c(y.size());
  for (std::size_t r = 0; r < y.size(); ++r) {
    std::size_t best = static_cast<std::size_t>(y[r]) == 0 ? 1 : 0;
    for (std::size_t k = 0; k < C; ++k) {
      if (k == static_cast<std::size_t>(y[r])) continue;
      if (logits.at(r * C + k) > logits.at(r * C + best)) best = k;
    }
    c[r] = static_cast<int>(best);
  }
  return c;
}

inline Tensor cw_per_example_loss(const Model& model, const Tensor& x, const std::vector<int>& c,
                                  double kappa) {
  Tensor logits = model.forward_logits(x, true);
  Tensor margin = add(sub(row_max_excluding(logits, c), select_class(logits, c)), kappa);
  return relu(margin);
}

}  // namespace detail

// Margin attack: descends L = relu(max_{i != c} f_i - f_c + kappa) where c is
// the strongest wrong class at the clean input (fixed for all steps unless
// cw_rechoose_target is set).
inline AttackResult cw_linf(const Model& model, const Tensor& x, const std::vector<int>& y,
                            const AttackConfig& cfg, Rng& rng) {
  cfg.validate();
  if (cfg.steps < 1) throw ValueError("cw needs steps >= 1");
  detail::check_attack_batch(model, x, y);
  const double alpha = cfg.resolved_alpha();

  std::vector<int> target = detail::cw_target_classes(model, x, y);
  Tensor cur = cfg.random_start && cfg.epsilon > 0.0 ? detail::random_start_point(x, cfg, rng)
                                                     : x.detach();
  for (int t = 0; t < cfg.steps; ++t) {
    if (cfg.cw_rechoose_target) target = detail::cw_target_classes(model, cur, y);
    auto g = detail::batch_input_gradient(cur, [&](const Tensor& xt) {
      return mean(detail::cw_per_example_loss(model, xt, target, cfg.kappa));
    });
    std::vector<double> moved(x.size());
    for (std::size_t i = 0; i < moved.size(); ++i) {
      const double s = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
      moved[i] = cur.at(i) - alpha * s;  // descend the margin loss
    }
    cur = project_linf(Tensor(x.shape(), std::move(moved)), x, cfg.epsilon, cfg.range_lo,
                       cfg.range_hi);
  }
  std::vector<Model> one{model};
  Tensor final_loss = detail::cw_per_example_loss(model, cur.detach(), target, cfg.kappa);
  std::vector<double> loss_values = final_loss.values();
  return AttackResult{cur, std::move(loss_values), detail::success_flags(one, cur, y)};
}

// PGD ascent on the mean of the member models' CE losses.
inline AttackResult ensemble_attack(const std::vector<Model>& models, const Tensor& x,
                                    const std::vector<int>& y, const AttackConfig& cfg, Rng& rng) {
  cfg.validate();
  if (models.empty()) throw ValueError("ensemble_attack needs at least one model");
  if (cfg.steps < 1) throw ValueError("ensemble_attack needs steps >= 1");
  detail::check_attack_batch(models.front(), x, y);
  Tensor adv = detail::sign_step_iterate(models, x, y, cfg, cfg.steps, cfg.resolved_alpha(),
                                         cfg.random_start, rng);
  return AttackResult{adv, detail::per_example_ce(models, adv, y),
                      detail::success_flags(models, adv, y)};
}

inline AttackResult run_attack(AttackKind kind, const std::vector<Model>& models, const Tensor& x,
                               const std::vector<int>& y, const AttackConfig& cfg, Rng& rng) {
  if (models.empty()) throw ValueError("run_attack needs at least one model");
  switch (kind) {
    case AttackKind::Fgsm: return fgsm(models.front(), x, y, cfg);
    case AttackKind::Pgd: return pgd(models.front(), x, y, cfg, rng);
    case AttackKind::Mim: return mim(models.front(), x, y, cfg, rng);
    case AttackKind::CwLinf: return cw_linf(models.front(), x, y, cfg, rng);
    case AttackKind::Ensemble: return ensemble_attack(models, x, y, cfg, rng);
  }
  throw ValueError("unknown attack kind");
}

// Attacks a whole example set in fixed chunks. Each chunk draws its own rng
// substream, so results are identical no matter how many worker threads run,
// and chunks merge back by index.
inline Tensor attack_batch(const std::vector<Model>& models, AttackKind kind, const Tensor& images,
                           const std::vector<int>& labels, const AttackConfig& cfg,
                           const Rng& base_rng, int threads = 1, std::size_t chunk_size = 64) {
  if (images.ndim() < 2) throw ShapeError("attack_batch needs [N x ...] images");
  const std::size_t n = images.shape()[0];
  const std::size_t per = images.size() / n;
  if (labels.size() != n) throw ShapeError("attack_batch label count mismatch");
  if (chunk_size == 0) chunk_size = 1;
  const std::size_t n_chunks = (n + chunk_size - 1) / chunk_size;

  std::vector<double> out(images.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mu;

  auto worker = [&] {
    while (true) {
      const std::size_t c = next.fetch_add(1);
      if (c >= n_chunks) return;
      try {
        const std::size_t begin = c * chunk_size;
        const std::size_t count = std::min(chunk_size, n - begin);
        Shape shape = images.shape();
        shape[0] = count;
        std::vector<double> vals(images.values().begin() + begin * per,
                                 images.values().begin() + (begin + count) * per);
        std::vector<int> y(labels.begin() + begin, labels.begin() + begin + count);
        Rng rng = base_rng.substream(c);
        AttackResult r = run_attack(kind, models, Tensor(std::move(shape), std::move(vals)), y, cfg, rng);
        std::copy(r.adversarial.values().begin(), r.adversarial.values().end(),
                  out.begin() + begin * per);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };

  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  return Tensor(images.shape(), std::move(out));
}

}  // namespace drl
