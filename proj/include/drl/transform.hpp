#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "drl/rng.hpp"
#include "drl/tensor.hpp"

namespace drl {

enum class TransformKind { GaussianNoise, Blur, Contrast, Occlusion, Chain };

inline const char* transform_kind_name(TransformKind k) {
  switch (k) {
    case TransformKind::GaussianNoise: return "noise";
    case TransformKind::Blur: return "blur";
    case TransformKind::Contrast: return "contrast";
    case TransformKind::Occlusion: return "occlusion";
    case TransformKind::Chain: return "chain";
  }
  return "?";
}

inline TransformKind transform_kind_from_name(const std::string& s) {
  if (s == "noise") return TransformKind::GaussianNoise;
  if (s == "blur") return TransformKind::Blur;
  if (s == "contrast") return TransformKind::Contrast;
  if (s == "occlusion") return TransformKind::Occlusion;
  if (s == "chain") return TransformKind::Chain;
  throw ValueError("unknown transform kind: " + s);
}

// Parametric corruption. Severity runs 0..5 and severity 0 is the identity
// for every kind; outputs always land back in the valid range.
struct TransformSpec {
  TransformKind kind = TransformKind::GaussianNoise;
  double severity = 0.0;
  std::uint64_t seed = 0;
  std::vector<TransformSpec> chain;  // members of a Chain, applied in order

  TransformSpec reseeded(std::uint64_t new_seed) const {
    TransformSpec s = *this;
    s.seed = new_seed;
    return s;
  }

  void validate() const {
    if (severity < 0.0 || severity > 5.0) throw ValueError("transform severity must be in [0, 5]");
    if (kind == TransformKind::Chain) {
      for (const auto& c : chain) {
        if (c.kind == TransformKind::Chain) throw ValueError("nested transform chains not supported");
        c.validate();
      }
    } else if (!chain.empty()) {
      throw ValueError("only chain transforms take members");
    }
  }
};

namespace detail {

// Last two dims are the spatial plane; leading dims are treated as channels.
inline void spatial_dims(const Shape& s, std::size_t& planes, std::size_t& h, std::size_t& w) {
  if (s.size() < 2) throw ShapeError("spatial transform needs at least 2 dims");
  h = s[s.size() - 2];
  w = s[s.size() - 1];
  planes = shape_numel(s) / (h * w);
}

inline std::vector<double> box3_blur(const std::vector<double>& v, std::size_t planes, std::size_t h,
                                     std::size_t w) {
  std::vector<double> out(v.size());
  for (std::size_t p = 0; p < planes; ++p) {
    const double* in = &v[p * h * w];
    double* o = &out[p * h * w];
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        double acc = 0.0;
        int cnt = 0;
        for (int di = -1; di <= 1; ++di) {
          for (int dj = -1; dj <= 1; ++dj) {
            const long ii = static_cast<long>(i) + di, jj = static_cast<long>(j) + dj;
            if (ii < 0 || jj < 0 || ii >= static_cast<long>(h) || jj >= static_cast<long>(w)) continue;
            acc += in[ii * w + jj];
            ++cnt;
          }
        }
        o[i * w + j] = acc / cnt;
      }
    }
  }
  return out;
}

}  // namespace detail

inline Tensor corrupt_transform(const Tensor& x, const TransformSpec& spec, double lo = 0.0,
                                double hi = 1.0) {
  spec.validate();
  if (!(lo < hi)) throw ValueError("corrupt_transform: lo must be below hi");
  if (spec.severity == 0.0) return x.detach();

  std::vector<double> v = x.values();
  Rng rng(spec.seed);
  switch (spec.kind) {
    case TransformKind::GaussianNoise: {
      const double sigma = 0.02 * spec.severity;
      for (double& p : v) p += sigma * rng.normal();
      break;
    }
    case TransformKind::Blur: {
      std::size_t planes, h, w;
      detail::spatial_dims(x.shape(), planes, h, w);
      const double t = spec.severity / 5.0;
      auto blurred = detail::box3_blur(v, planes, h, w);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = (1.0 - t) * v[i] + t * blurred[i];
      break;
    }
    case TransformKind::Contrast: {
      double mu = 0.0;
      for (double p : v) mu += p;
      mu /= static_cast<double>(v.size());
      const double c = 1.0 - 0.15 * spec.severity;
      for (double& p : v) p = mu + c * (p - mu);
      break;
    }
    case TransformKind::Occlusion: {
      std::size_t planes, h, w;
      detail::spatial_dims(x.shape(), planes, h, w);
      const std::size_t side =
          std::min(std::min(h, w),
                   static_cast<std::size_t>(std::ceil(0.12 * spec.severity * std::min(h, w))));
      if (side == 0) break;
      const std::size_t i0 = rng.uniform_index(h - side + 1);
      const std::size_t j0 = rng.uniform_index(w - side + 1);
      for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t i = i0; i < i0 + side; ++i) {
          for (std::size_t j = j0; j < j0 + side; ++j) v[p * h * w + i * w + j] = lo;
        }
      }
      break;
    }
    case TransformKind::Chain: {
      Tensor cur = x.detach();
      std::size_t idx = 0;
      for (const auto& member : spec.chain) {
        // members draw from seeds derived off the chain seed so one chain
        // seed pins the whole sequence
        cur = corrupt_transform(cur, member.reseeded(splitmix64(spec.seed ^ hash_u64(idx++))), lo, hi);
      }
      return cur;
    }
  }
  for (double& p : v) p = std::min(std::max(p, lo), hi);
  return Tensor(x.shape(), std::move(v));
}

// Per-example corruption of a [N x ...] batch; example i uses a seed derived
// from the spec seed and i, so batches are reproducible element-wise.
inline Tensor corrupt_batch(const Tensor& images, const TransformSpec& spec, double lo = 0.0,
                            double hi = 1.0) {
  if (images.ndim() < 2) throw ShapeError("corrupt_batch needs [N x ...] images");
  if (spec.severity == 0.0) return images.detach();
  const std::size_t n = images.shape()[0];
  const std::size_t per = images.size() / n;
  Shape one(images.shape().begin() + 1, images.shape().end());
  std::vector<double> out(images.size());
  for (std::size_t e = 0; e < n; ++e) {
    std::vector<double> vals(images.values().begin() + e * per,
                             images.values().begin() + (e + 1) * per);
    Tensor t = corrupt_transform(Tensor(one, std::move(vals)),
                                 spec.reseeded(splitmix64(spec.seed ^ hash_u64(e))), lo, hi);
    std::copy(t.values().begin(), t.values().end(), out.begin() + e * per);
  }
  return Tensor(images.shape(), std::move(out));
}

}  // namespace drl
