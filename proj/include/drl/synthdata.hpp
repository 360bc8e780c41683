#pragma once

#include <cstdint>
#include <vector>

#include "drl/dataset.hpp"
#include "drl/rng.hpp"

namespace drl {

// Deterministic image classification task at desk scale: each class owns a
// smooth low-frequency template and samples are noisy draws around it.
// `separation` scales how far templates deviate from mid-gray, `noise` is the
// per-pixel sample sigma; together they set how hard the task is.
struct SynthTaskConfig {
  int classes = 10;
  Shape image_shape = {1, 16, 16};
  std::size_t train_count = 2000;
  std::size_t test_count = 1000;
  double separation = 0.5;
  double noise = 0.18;
  std::uint64_t seed = 0;
};

struct SynthTask {
  AugmentedDataset train;
  AugmentedDataset test;
};

namespace detail {

// 4x4 coarse field bilinearly upsampled to the image plane.
inline std::vector<double> class_template(const SynthTaskConfig& cfg, Rng& rng) {
  const std::size_t planes = cfg.image_shape.size() == 3 ? cfg.image_shape[0] : 1;
  const std::size_t h = cfg.image_shape[cfg.image_shape.size() - 2];
  const std::size_t w = cfg.image_shape[cfg.image_shape.size() - 1];
  constexpr std::size_t G = 4;
  std::vector<double> out(planes * h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    double grid[G][G];
    for (auto& row : grid) {
      for (double& v : row) v = 0.5 + cfg.separation * rng.uniform(-0.5, 0.5);
    }
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        const double u = h > 1 ? static_cast<double>(i) * (G - 1) / (h - 1) : 0.0;
        const double v = w > 1 ? static_cast<double>(j) * (G - 1) / (w - 1) : 0.0;
        const std::size_t i0 = std::min(static_cast<std::size_t>(u), G - 2);
        const std::size_t j0 = std::min(static_cast<std::size_t>(v), G - 2);
        const double fu = u - i0, fv = v - j0;
        out[p * h * w + i * w + j] = (1 - fu) * (1 - fv) * grid[i0][j0] +
                                     (1 - fu) * fv * grid[i0][j0 + 1] +
                                     fu * (1 - fv) * grid[i0 + 1][j0] +
                                     fu * fv * grid[i0 + 1][j0 + 1];
      }
    }
  }
  return out;
}

inline AugmentedDataset sample_split(const SynthTaskConfig& cfg,
                                     const std::vector<std::vector<double>>& templates,
                                     std::size_t count, Rng rng) {
  AugmentedDataset ds;
  ds.classes = cfg.classes;
  ds.image_shape = cfg.image_shape;
  ds.epsilon = 0.0;
  const std::size_t per = shape_numel(cfg.image_shape);
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % cfg.classes);  // balanced classes
    std::vector<double> img(per);
    const auto& tpl = templates[static_cast<std::size_t>(label)];
    for (std::size_t k = 0; k < per; ++k) {
      img[k] = snap_into_interval(tpl[k] + cfg.noise * rng.normal(), 0.0, 1.0);
    }
    Example e;
    e.id = static_cast<std::int64_t>(i);
    e.image = Tensor(cfg.image_shape, std::move(img));
    e.label = label;
    ds.examples.push_back(std::move(e));
  }
  return ds;
}

}  // namespace detail

inline SynthTask make_synthetic_task(const SynthTaskConfig& cfg) {
  if (cfg.classes < 2) throw ValueError("synthetic task needs at least 2 classes");
  if (cfg.image_shape.size() < 2) throw ValueError("synthetic task needs spatial images");
  Rng root(cfg.seed);
  Rng template_rng = root.substream("templates");
  std::vector<std::vector<double>> templates;
  templates.reserve(static_cast<std::size_t>(cfg.classes));
  for (int c = 0; c < cfg.classes; ++c) templates.push_back(detail::class_template(cfg, template_rng));

  SynthTask task;
  task.train = detail::sample_split(cfg, templates, cfg.train_count, root.substream("train"));
  task.test = detail::sample_split(cfg, templates, cfg.test_count, root.substream("test"));
  return task;
}

}  // namespace drl
