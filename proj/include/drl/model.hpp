#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "drl/bytes.hpp"
#include "drl/rng.hpp"
#include "drl/tensor.hpp"

namespace drl {

enum class ArchKind : std::uint32_t { Linear = 0, Mlp = 1, SmallConv = 2 };
enum class Activation : std::uint32_t { Relu = 0, Tanh = 1 };

inline const char* arch_kind_name(ArchKind k) {
  switch (k) {
    case ArchKind::Linear: return "linear";
    case ArchKind::Mlp: return "mlp";
    case ArchKind::SmallConv: return "small-conv";
  }
  return "?";
}

struct ArchSpec {
  ArchKind kind = ArchKind::Linear;
  Shape input_shape;                // {D} for flat inputs, {C,H,W} for images
  std::vector<std::size_t> hidden;  // mlp: two layer widths; small-conv: two channel counts
  int classes = 2;
  Activation activation = Activation::Relu;

  std::size_t input_numel() const { return shape_numel(input_shape); }

  void validate() const {
    if (classes < 2) throw ValueError("arch needs at least 2 classes");
    if (input_shape.empty()) throw ValueError("arch input shape is empty");
    for (std::size_t d : input_shape) {
      if (d == 0) throw ValueError("arch input dimensions must be positive");
    }
    for (std::size_t w : hidden) {
      if (w == 0) throw ValueError("arch layer widths must be positive");
    }
    switch (kind) {
      case ArchKind::Linear:
        break;
      case ArchKind::Mlp:
        if (hidden.size() != 2) throw ValueError("mlp arch takes exactly two hidden widths");
        break;
      case ArchKind::SmallConv:
        if (hidden.size() != 2) throw ValueError("small-conv arch takes exactly two channel counts");
        if (input_shape.size() != 3) throw ValueError("small-conv arch needs a CxHxW input shape");
        break;
    }
  }

  bool operator==(const ArchSpec&) const = default;
};

inline ArchSpec linear_arch(Shape input_shape, int classes) {
  return ArchSpec{ArchKind::Linear, std::move(input_shape), {}, classes, Activation::Relu};
}
inline ArchSpec mlp_arch(Shape input_shape, int classes, std::vector<std::size_t> hidden = {32, 32},
                         Activation act = Activation::Relu) {
  return ArchSpec{ArchKind::Mlp, std::move(input_shape), std::move(hidden), classes, act};
}
inline ArchSpec small_conv_arch(Shape input_shape, int classes,
                                std::vector<std::size_t> channels = {8, 8},
                                Activation act = Activation::Relu) {
  return ArchSpec{ArchKind::SmallConv, std::move(input_shape), std::move(channels), classes, act};
}

// Classifier with named parameter tensors. Forward evaluation is pure; the
// same parameters may serve concurrent read-only forward passes. Parameter
// values sit on the fp32 grid so checkpoints round-trip bit-exactly.
class Model {
 public:
  Model() = default;
  Model(ArchSpec arch, std::uint64_t seed, std::vector<std::pair<std::string, Tensor>> params)
      : arch_(std::move(arch)), seed_(seed), params_(std::move(params)) {}

  const ArchSpec& arch() const { return arch_; }
  std::uint64_t seed() const { return seed_; }
  int classes() const { return arch_.classes; }

  std::vector<std::pair<std::string, Tensor>>& params() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }

  Tensor& param(const std::string& name) {
    for (auto& [n, t] : params_) {
      if (n == name) return t;
    }
    throw ValueError("unknown parameter: " + name);
  }
  const Tensor& param(const std::string& name) const {
    return const_cast<Model*>(this)->param(name);
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  // Deep copy: parameter tensors share nothing with this model.
  Model clone() const {
    std::vector<std::pair<std::string, Tensor>> copy;
    copy.reserve(params_.size());
    for (const auto& [n, t] : params_) copy.emplace_back(n, t.clone());
    return Model(arch_, seed_, std::move(copy));
  }

  // Logits for a [N x input] batch, differentiable w.r.t. batch and params.
  // With frozen_params the parameters enter the graph as constants: gradients
  // flow to the input only, and no state is shared that a concurrent caller
  // could race on.
  Tensor forward_logits(const Tensor& batch, bool frozen_params = false) const {
    const Tensor x = normalize_batch(batch);
    auto p = [&](const std::string& name) {
      const Tensor& t = param(name);
      return frozen_params ? t.detach() : t;
    };
    const bool use_tanh = arch_.activation == Activation::Tanh;
    auto act = [&](const Tensor& t) { return use_tanh ? drl::tanh(t) : relu(t); };

    switch (arch_.kind) {
      case ArchKind::Linear:
        return add(matmul(x, p("fc.w")), p("fc.b"));
      case ArchKind::Mlp: {
        Tensor h1 = act(add(matmul(x, p("fc1.w")), p("fc1.b")));
        Tensor h2 = act(add(matmul(h1, p("fc2.w")), p("fc2.b")));
        return add(matmul(h2, p("out.w")), p("out.b"));
      }
      case ArchKind::SmallConv: {
        Tensor h1 = act(add(conv2d(x, p("conv1.w"), 1, 1), p("conv1.b")));
        Tensor h2 = act(add(conv2d(h1, p("conv2.w"), 2, 1), p("conv2.b")));
        const auto& s = h2.shape();
        Tensor flat = reshape(h2, {s[0], s[1] * s[2] * s[3]});
        return add(matmul(flat, p("out.w")), p("out.b"));
      }
    }
    throw ValueError("unknown arch kind");
  }

  Tensor forward_softmax(const Tensor& batch, bool frozen_params = false) const {
    return softmax_rows(forward_logits(batch, frozen_params));
  }

  std::vector<int> predict(const Tensor& batch) const {
    return argmax_rows(forward_logits(batch.detach(), /*frozen_params=*/true));
  }

 private:
  // Accepts [N x D] flat batches or [N x C x H x W]; the conv arch requires
  // the image form, dense archs flatten it.
  Tensor normalize_batch(const Tensor& batch) const {
    if (batch.ndim() < 2) throw ShapeError("batch must have a leading example dimension");
    std::size_t per_example = 1;
    for (std::size_t i = 1; i < batch.ndim(); ++i) per_example *= batch.shape()[i];
    if (per_example != arch_.input_numel()) {
      throw ShapeError("batch example size " + std::to_string(per_example) +
                       " does not match arch input " + std::to_string(arch_.input_numel()));
    }
    const std::size_t n = batch.shape()[0];
    if (arch_.kind == ArchKind::SmallConv) {
      Shape want = {n, arch_.input_shape[0], arch_.input_shape[1], arch_.input_shape[2]};
      return batch.shape() == want ? batch : reshape(batch, want);
    }
    return batch.ndim() == 2 ? batch : reshape(batch, {n, per_example});
  }

  ArchSpec arch_;
  std::uint64_t seed_ = 0;
  std::vector<std::pair<std::string, Tensor>> params_;
};

namespace detail {

// Fan-in scaled uniform weights on the fp32 grid, zero biases.
inline Tensor init_weight(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = to_storage(rng.uniform(-bound, bound));
  return Tensor(std::move(shape), std::move(v), /*requires_grad=*/true);
}

inline Tensor init_bias(Shape shape) { return Tensor::zeros(std::move(shape), /*requires_grad=*/true); }

}  // namespace detail

inline Model init_model(const ArchSpec& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(seed);
  std::vector<std::pair<std::string, Tensor>> params;
  const std::size_t d = arch.input_numel();
  const auto c = static_cast<std::size_t>(arch.classes);
  switch (arch.kind) {
    case ArchKind::Linear:
      params.emplace_back("fc.w", detail::init_weight({d, c}, d, rng));
      params.emplace_back("fc.b", detail::init_bias({c}));
      break;
    case ArchKind::Mlp: {
      const std::size_t h1 = arch.hidden[0], h2 = arch.hidden[1];
      params.emplace_back("fc1.w", detail::init_weight({d, h1}, d, rng));
      params.emplace_back("fc1.b", detail::init_bias({h1}));
      params.emplace_back("fc2.w", detail::init_weight({h1, h2}, h1, rng));
      params.emplace_back("fc2.b", detail::init_bias({h2}));
      params.emplace_back("out.w", detail::init_weight({h2, c}, h2, rng));
      params.emplace_back("out.b", detail::init_bias({c}));
      break;
    }
    case ArchKind::SmallConv: {
      const std::size_t ch = arch.input_shape[0], h = arch.input_shape[1], w = arch.input_shape[2];
      const std::size_t c1 = arch.hidden[0], c2 = arch.hidden[1];
      params.emplace_back("conv1.w", detail::init_weight({c1, ch, 3, 3}, ch * 9, rng));
      params.emplace_back("conv1.b", detail::init_bias({c1, 1, 1}));
      params.emplace_back("conv2.w", detail::init_weight({c2, c1, 3, 3}, c1 * 9, rng));
      params.emplace_back("conv2.b", detail::init_bias({c2, 1, 1}));
      const std::size_t oh = (h + 2 - 3) / 2 + 1, ow = (w + 2 - 3) / 2 + 1;
      params.emplace_back("out.w", detail::init_weight({c2 * oh * ow, c}, c2 * oh * ow, rng));
      params.emplace_back("out.b", detail::init_bias({c}));
      break;
    }
  }
  return Model(arch, seed, std::move(params));
}

// --- checkpoint persistence ---
//
// Layout: magic, format version, then a crc32-guarded payload of the arch
// descriptor, init seed, and named parameter tensors as little-endian fp32.

inline constexpr char kCheckpointMagic[8] = {'D', 'R', 'L', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const Model& model, const std::string& path) {
  ByteWriter payload;
  payload.u32(static_cast<std::uint32_t>(model.arch().kind));
  payload.u32(static_cast<std::uint32_t>(model.arch().activation));
  payload.u32(static_cast<std::uint32_t>(model.arch().classes));
  payload.u32(static_cast<std::uint32_t>(model.arch().input_shape.size()));
  for (std::size_t dim : model.arch().input_shape) payload.u64(dim);
  payload.u32(static_cast<std::uint32_t>(model.arch().hidden.size()));
  for (std::size_t v : model.arch().hidden) payload.u64(v);
  payload.u64(model.seed());
  payload.u32(static_cast<std::uint32_t>(model.params().size()));
  for (const auto& [name, t] : model.params()) {
    payload.str(name);
    payload.u32(static_cast<std::uint32_t>(t.ndim()));
    for (std::size_t dim : t.shape()) payload.u64(dim);
    payload.u64(t.size());
    for (double v : t.values()) payload.f32(static_cast<float>(v));
  }

  ByteWriter out;
  out.raw(kCheckpointMagic, sizeof(kCheckpointMagic));
  out.u32(kCheckpointVersion);
  out.u32(crc32_of(payload.bytes()));
  out.raw(payload.bytes().data(), payload.bytes().size());
  write_file_bytes(path, out.bytes());
}

inline Model load_checkpoint(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() < sizeof(kCheckpointMagic) + 8) throw CorruptFileError("checkpoint too short: " + path);
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw CorruptFileError("bad checkpoint magic: " + path);
  }
  ByteReader head(bytes.data() + sizeof(kCheckpointMagic), bytes.size() - sizeof(kCheckpointMagic));
  const std::uint32_t version = head.u32();
  if (version != kCheckpointVersion) {
    throw CorruptFileError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
  }
  const std::uint32_t crc_stored = head.u32();
  const std::size_t payload_off = sizeof(kCheckpointMagic) + 8;
  if (crc32_of(bytes.data() + payload_off, bytes.size() - payload_off) != crc_stored) {
    throw CorruptFileError("checkpoint checksum mismatch: " + path);
  }

  ByteReader in(bytes.data() + payload_off, bytes.size() - payload_off);
  ArchSpec arch;
  arch.kind = static_cast<ArchKind>(in.u32());
  arch.activation = static_cast<Activation>(in.u32());
  arch.classes = static_cast<int>(in.u32());
  const std::uint32_t nin = in.u32();
  if (nin > 8) throw CorruptFileError("implausible input rank in checkpoint");
  for (std::uint32_t i = 0; i < nin; ++i) arch.input_shape.push_back(in.u64());
  const std::uint32_t nhid = in.u32();
  if (nhid > 16) throw CorruptFileError("implausible hidden layer count in checkpoint");
  for (std::uint32_t i = 0; i < nhid; ++i) arch.hidden.push_back(in.u64());
  const std::uint64_t seed = in.u64();
  const std::uint32_t nparams = in.u32();
  if (nparams > 64) throw CorruptFileError("implausible parameter count in checkpoint");

  std::vector<std::pair<std::string, Tensor>> params;
  for (std::uint32_t i = 0; i < nparams; ++i) {
    std::string name = in.str(256);
    const std::uint32_t ndim = in.u32();
    if (ndim == 0 || ndim > 8) throw CorruptFileError("implausible tensor rank in checkpoint");
    Shape shape;
    for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(in.u64());
    const std::uint64_t count = in.u64();
    if (count != shape_numel(shape) || count > (1ULL << 28)) {
      throw CorruptFileError("tensor length field inconsistent in checkpoint");
    }
    std::vector<double> v(count);
    for (std::uint64_t k = 0; k < count; ++k) v[k] = static_cast<double>(in.f32());
    params.emplace_back(std::move(name), Tensor(std::move(shape), std::move(v), /*requires_grad=*/true));
  }
  if (!in.done()) throw CorruptFileError("trailing bytes in checkpoint: " + path);

  try {
    arch.validate();
  } catch (const Error& e) {
    throw CorruptFileError(std::string("checkpoint arch invalid: ") + e.what());
  }
  Model model(arch, seed, std::move(params));
  const Model reference = init_model(arch, seed);
  if (reference.params().size() != model.params().size()) {
    throw CorruptFileError("checkpoint parameter list does not match arch");
  }
  for (std::size_t i = 0; i < reference.params().size(); ++i) {
    if (reference.params()[i].first != model.params()[i].first ||
        reference.params()[i].second.shape() != model.params()[i].second.shape()) {
      throw CorruptFileError("checkpoint parameter " + model.params()[i].first +
                             " does not match arch");
    }
  }
  return model;
}

}  // namespace drl
