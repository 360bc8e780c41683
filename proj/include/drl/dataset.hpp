#pragma once

#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "drl/attack.hpp"
#include "drl/bytes.hpp"
#include "drl/model.hpp"
#include "drl/rng.hpp"
#include "drl/tensor.hpp"

namespace drl {

enum class ExampleSource { Clean, Synthetic, Adversarial };

inline const char* source_name(ExampleSource s) {
  switch (s) {
    case ExampleSource::Clean: return "clean";
    case ExampleSource::Synthetic: return "synthetic";
    case ExampleSource::Adversarial: return "adversarial";
  }
  return "?";
}

inline ExampleSource source_from_name(const std::string& s) {
  if (s == "clean") return ExampleSource::Clean;
  if (s == "synthetic") return ExampleSource::Synthetic;
  if (s == "adversarial") return ExampleSource::Adversarial;
  throw CorruptFileError("unknown example source: " + s);
}

struct Example {
  std::int64_t id = 0;
  Tensor image;  // fp32-grid values inside the valid range
  int label = 0;
  ExampleSource source = ExampleSource::Clean;
  std::int64_t parent_id = -1;  // adversarial only
  std::string attack_tag;       // adversarial only, no whitespace
};

struct DatasetProvenance {
  std::vector<std::string> substitutes;  // checkpoint identifiers
  std::vector<std::string> attacks;      // attack config descriptions
  std::uint64_t seed = 0;
  std::vector<std::string> notes;
};

// Frozen training pool: clean and synthetic originals plus their one-shot
// adversarial copies, linked by (clean_id, adv_id) pairs. Content never
// changes after construction; the hash asserts that.
class AugmentedDataset {
 public:
  int classes = 0;
  Shape image_shape;
  double epsilon = 0.0;
  double range_lo = 0.0;
  double range_hi = 1.0;
  std::vector<Example> examples;
  std::vector<std::pair<std::int64_t, std::int64_t>> pairs;
  DatasetProvenance provenance;

  std::size_t size() const { return examples.size(); }

  const Example& by_id(std::int64_t id) const {
    const auto& index = id_index();
    auto it = index.find(id);
    if (it == index.end()) throw ValueError("dataset has no example id " + std::to_string(id));
    return examples[it->second];
  }

  std::size_t count_source(ExampleSource s) const {
    std::size_t n = 0;
    for (const auto& e : examples) n += e.source == s ? 1 : 0;
    return n;
  }

  // Total images; the one-shot generation cost of this dataset.
  std::size_t data_amount() const { return examples.size(); }

  void invalidate_index() const { index_.clear(); }

  void validate() const {
    if (classes < 2) throw ValueError("dataset needs at least 2 classes");
    if (image_shape.empty()) throw ValueError("dataset image shape is empty");
    if (!(range_lo < range_hi)) throw ValueError("dataset valid range is empty");
    const std::size_t numel = shape_numel(image_shape);
    for (const auto& e : examples) {
      if (e.image.size() != numel) throw ValueError("example image does not match dataset shape");
      if (e.label < 0 || e.label >= classes) {
        throw ValueError("example label out of range: " + std::to_string(e.label));
      }
      for (double v : e.image.values()) {
        if (v < range_lo || v > range_hi) throw ValueError("example pixel outside valid range");
      }
      if (e.source == ExampleSource::Adversarial) {
        if (e.parent_id < 0) throw ValueError("adversarial example without parent");
        const Example& parent = by_id(e.parent_id);
        if (parent.label != e.label) throw ValueError("adversarial label differs from parent");
        for (std::size_t i = 0; i < numel; ++i) {
          if (std::fabs(e.image.at(i) - parent.image.at(i)) > epsilon + 1e-9) {
            throw ValueError("adversarial example breaks the epsilon ball around its parent");
          }
        }
      } else if (e.parent_id >= 0 || !e.attack_tag.empty()) {
        throw ValueError("non-adversarial example carries adversarial metadata");
      }
    }
    for (const auto& [cid, aid] : pairs) {
      const Example& c = by_id(cid);
      const Example& a = by_id(aid);
      if (c.label != a.label) throw ValueError("pair labels mismatch");
    }
  }

  // Order-sensitive digest over every field that defines the dataset.
  // Images are hashed through their fp32 bit patterns, which is exactly what
  // the blob stores, so the hash survives a save/load round trip.
  std::uint64_t content_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    h = hash_u64(static_cast<std::uint64_t>(classes), h);
    for (std::size_t d : image_shape) h = hash_u64(d, h);
    h = hash_double(epsilon, h);
    h = hash_double(range_lo, h);
    h = hash_double(range_hi, h);
    for (const auto& e : examples) {
      h = hash_u64(static_cast<std::uint64_t>(e.id), h);
      h = hash_u64(static_cast<std::uint64_t>(e.label), h);
      h = hash_u64(static_cast<std::uint64_t>(e.source), h);
      h = hash_u64(static_cast<std::uint64_t>(e.parent_id), h);
      h = fnv1a(e.attack_tag, h);
      for (double v : e.image.values()) {
        const float f = static_cast<float>(v);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        h = hash_u64(bits, h);
      }
    }
    for (const auto& [c, a] : pairs) {
      h = hash_u64(static_cast<std::uint64_t>(c), h);
      h = hash_u64(static_cast<std::uint64_t>(a), h);
    }
    return h;
  }

 private:
  const std::unordered_map<std::int64_t, std::size_t>& id_index() const {
    if (index_.size() != examples.size()) {
      index_.clear();
      for (std::size_t i = 0; i < examples.size(); ++i) index_[examples[i].id] = i;
      if (index_.size() != examples.size()) throw ValueError("duplicate example ids in dataset");
    }
    return index_;
  }

  mutable std::unordered_map<std::int64_t, std::size_t> index_;
};

// --- batch assembly ---

inline Tensor stack_images(const AugmentedDataset& ds, const std::vector<std::size_t>& positions) {
  if (positions.empty()) throw ValueError("stack_images on empty selection");
  const std::size_t per = shape_numel(ds.image_shape);
  Shape shape;
  shape.push_back(positions.size());
  shape.insert(shape.end(), ds.image_shape.begin(), ds.image_shape.end());
  std::vector<double> out(positions.size() * per);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const auto& img = ds.examples[positions[i]].image.values();
    std::copy(img.begin(), img.end(), out.begin() + i * per);
  }
  return Tensor(std::move(shape), std::move(out));
}

inline Tensor stack_all_images(const AugmentedDataset& ds) {
  std::vector<std::size_t> idx(ds.examples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return stack_images(ds, idx);
}

inline std::vector<int> gather_labels(const AugmentedDataset& ds,
                                      const std::vector<std::size_t>& positions) {
  std::vector<int> y(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) y[i] = ds.examples[positions[i]].label;
  return y;
}

inline std::vector<int> all_labels(const AugmentedDataset& ds) {
  std::vector<int> y(ds.examples.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = ds.examples[i].label;
  return y;
}

// --- fp32 grid snapping ---

// Rounds to the nearest float, then walks at most a couple of ulps so the
// result stays inside [lo, hi]. The interval must contain a float.
inline double snap_into_interval(double v, double lo, double hi) {
  v = std::min(std::max(v, lo), hi);
  float f = static_cast<float>(v);
  while (static_cast<double>(f) > hi) f = std::nextafterf(f, -std::numeric_limits<float>::infinity());
  while (static_cast<double>(f) < lo) f = std::nextafterf(f, std::numeric_limits<float>::infinity());
  return static_cast<double>(f);
}

// --- one-shot dataset construction ---

struct AttackPlanItem {
  AttackKind kind = AttackKind::Pgd;
  AttackConfig cfg;

  std::string describe() const {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s eps=%a alpha=%a steps=%d rs=%d mu=%a kappa=%a",
                  attack_kind_name(kind), cfg.epsilon, cfg.resolved_alpha(), cfg.steps,
                  cfg.random_start ? 1 : 0, cfg.momentum_decay, cfg.kappa);
    return buf;
  }
};

// Builds the frozen training pool: every (substitute x attack) combination
// contributes one adversarial copy of each pool example. Generation happens
// here exactly once; training never regenerates anything.
inline AugmentedDataset build_drl_dataset(const AugmentedDataset& pool,
                                          const std::vector<Model>& substitutes,
                                          const std::vector<AttackPlanItem>& attacks,
                                          const Rng& rng, int threads = 1,
                                          const std::vector<std::string>& substitute_names = {}) {
  if (substitutes.empty()) throw ValueError("build_drl_dataset needs at least one substitute");
  if (attacks.empty()) throw ValueError("build_drl_dataset needs at least one attack");
  if (pool.examples.empty()) throw ValueError("build_drl_dataset on an empty pool");
  pool.validate();
  if (pool.count_source(ExampleSource::Adversarial) != 0) {
    throw ValueError("pool for dataset construction must hold originals only");
  }
  const std::size_t per = shape_numel(pool.image_shape);
  for (const auto& m : substitutes) {
    if (m.arch().input_numel() != per) throw ShapeError("substitute input does not match pool images");
    if (m.classes() != pool.classes) throw ShapeError("substitute class count does not match pool");
  }

  AugmentedDataset out;
  out.classes = pool.classes;
  out.image_shape = pool.image_shape;
  out.range_lo = pool.range_lo;
  out.range_hi = pool.range_hi;
  out.epsilon = 0.0;
  for (const auto& a : attacks) {
    a.cfg.validate();
    if (a.cfg.range_lo != pool.range_lo || a.cfg.range_hi != pool.range_hi) {
      throw ValueError("attack valid_range differs from pool range");
    }
    out.epsilon = std::max(out.epsilon, a.cfg.epsilon);
  }
  out.examples = pool.examples;
  out.provenance.seed = rng.seed();
  for (std::size_t i = 0; i < substitutes.size(); ++i) {
    std::string name = i < substitute_names.size() ? substitute_names[i] : "";
    if (name.empty()) {
      name = std::string(arch_kind_name(substitutes[i].arch().kind)) + " seed=" +
             std::to_string(substitutes[i].seed());
    }
    out.provenance.substitutes.push_back(name);
  }
  for (const auto& a : attacks) out.provenance.attacks.push_back(a.describe());

  std::int64_t next_id = 0;
  for (const auto& e : pool.examples) next_id = std::max(next_id, e.id + 1);

  Tensor images = stack_all_images(pool);
  std::vector<int> labels = all_labels(pool);

  std::size_t combo = 0;
  for (std::size_t si = 0; si < substitutes.size(); ++si) {
    for (std::size_t ai = 0; ai < attacks.size(); ++ai, ++combo) {
      const auto& item = attacks[ai];
      Tensor adv = attack_batch({substitutes[si]}, item.kind, images, labels, item.cfg,
                                rng.substream(combo), threads);
      const std::string tag =
          std::string(attack_kind_name(item.kind)) + "#s" + std::to_string(si) + "a" + std::to_string(ai);
      for (std::size_t e = 0; e < pool.examples.size(); ++e) {
        const Example& parent = pool.examples[e];
        std::vector<double> img(per);
        for (std::size_t i = 0; i < per; ++i) {
          const double c = parent.image.at(i);
          img[i] = snap_into_interval(adv.at(e * per + i),
                                      std::max(pool.range_lo, c - item.cfg.epsilon),
                                      std::min(pool.range_hi, c + item.cfg.epsilon));
        }
        Example copy;
        copy.id = next_id++;
        copy.image = Tensor(pool.image_shape, std::move(img));
        copy.label = parent.label;
        copy.source = ExampleSource::Adversarial;
        copy.parent_id = parent.id;
        copy.attack_tag = tag;
        out.pairs.emplace_back(parent.id, copy.id);
        out.examples.push_back(std::move(copy));
      }
    }
  }
  out.validate();
  return out;
}

// --- persistence ---
//
// A dataset is a text manifest plus a binary blob of fp32 image regions; the
// manifest records byte offsets and per-region checksums.

inline constexpr int kDatasetVersion = 1;

inline std::string manifest_path_of(const std::string& stem) { return stem + ".manifest"; }
inline std::string blob_path_of(const std::string& stem) { return stem + ".blob"; }

inline void save_dataset(const AugmentedDataset& ds, const std::string& stem) {
  ds.validate();
  ByteWriter blob;
  struct Region {
    std::uint64_t offset;
    std::uint64_t count;
    std::uint32_t crc;
  };
  std::vector<Region> regions;
  regions.reserve(ds.examples.size());
  for (const auto& e : ds.examples) {
    const std::uint64_t offset = blob.bytes().size();
    ByteWriter region;
    for (double v : e.image.values()) region.f32(static_cast<float>(v));
    blob.raw(region.bytes().data(), region.bytes().size());
    regions.push_back({offset, e.image.size(), crc32_of(region.bytes())});
  }
  write_file_bytes(blob_path_of(stem), blob.bytes());

  const std::string blob_name = std::filesystem::path(blob_path_of(stem)).filename().string();
  std::ostringstream m;
  char num[64];
  m << "drl-dataset " << kDatasetVersion << "\n";
  m << "classes " << ds.classes << "\n";
  m << "shape";
  for (std::size_t d : ds.image_shape) m << ' ' << d;
  m << "\n";
  std::snprintf(num, sizeof(num), "%a", ds.epsilon);
  m << "epsilon " << num << "\n";
  std::snprintf(num, sizeof(num), "%a", ds.range_lo);
  m << "range " << num;
  std::snprintf(num, sizeof(num), "%a", ds.range_hi);
  m << ' ' << num << "\n";
  m << "seed " << ds.provenance.seed << "\n";
  m << "blob " << blob_name << "\n";
  m << "blob_size " << blob.bytes().size() << "\n";
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    const Example& e = ds.examples[i];
    m << "example " << e.id << ' ' << e.label << ' ' << source_name(e.source) << ' ';
    if (e.parent_id >= 0) {
      m << e.parent_id;
    } else {
      m << '-';
    }
    m << ' ' << (e.attack_tag.empty() ? "-" : e.attack_tag);
    std::snprintf(num, sizeof(num), " %" PRIu64 " %" PRIu64 " %08x", regions[i].offset,
                  regions[i].count, regions[i].crc);
    m << num << "\n";
  }
  for (const auto& [c, a] : ds.pairs) m << "pair " << c << ' ' << a << "\n";
  for (const auto& s : ds.provenance.substitutes) m << "prov_substitute " << s << "\n";
  for (const auto& s : ds.provenance.attacks) m << "prov_attack " << s << "\n";
  for (const auto& s : ds.provenance.notes) m << "prov_note " << s << "\n";
  m << "counts " << ds.count_source(ExampleSource::Clean) << ' '
    << ds.count_source(ExampleSource::Synthetic) << ' '
    << ds.count_source(ExampleSource::Adversarial) << "\n";
  m << "end\n";

  const std::string text = m.str();
  std::vector<std::uint8_t> bytes(text.begin(), text.end());
  write_file_bytes(manifest_path_of(stem), bytes);
}

inline AugmentedDataset load_dataset(const std::string& stem) {
  const auto manifest_bytes = read_file_bytes(manifest_path_of(stem));
  std::istringstream in(std::string(manifest_bytes.begin(), manifest_bytes.end()));

  std::string line;
  if (!std::getline(in, line)) throw CorruptFileError("dataset manifest is empty");
  {
    std::istringstream head(line);
    std::string tag;
    int version = -1;
    head >> tag >> version;
    if (tag != "drl-dataset") throw CorruptFileError("bad dataset manifest magic");
    if (version != kDatasetVersion) {
      throw CorruptFileError("unsupported dataset version " + std::to_string(version));
    }
  }

  AugmentedDataset ds;
  std::string blob_name;
  std::uint64_t blob_size = 0;
  struct PendingExample {
    Example meta;
    std::uint64_t offset;
    std::uint64_t count;
    std::uint32_t crc;
  };
  std::vector<PendingExample> pending;
  std::size_t counts[3] = {0, 0, 0};
  bool saw_counts = false, saw_end = false;

  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "classes") {
      ls >> ds.classes;
    } else if (key == "shape") {
      std::size_t d;
      while (ls >> d) ds.image_shape.push_back(d);
    } else if (key == "epsilon") {
      std::string v;
      ls >> v;
      ds.epsilon = std::strtod(v.c_str(), nullptr);
    } else if (key == "range") {
      std::string a, b;
      ls >> a >> b;
      ds.range_lo = std::strtod(a.c_str(), nullptr);
      ds.range_hi = std::strtod(b.c_str(), nullptr);
    } else if (key == "seed") {
      ls >> ds.provenance.seed;
    } else if (key == "blob") {
      ls >> blob_name;
    } else if (key == "blob_size") {
      ls >> blob_size;
    } else if (key == "example") {
      PendingExample p;
      std::string source, parent, tag, crc;
      ls >> p.meta.id >> p.meta.label >> source >> parent >> tag >> p.offset >> p.count >> crc;
      if (!ls) throw CorruptFileError("malformed example line: " + line);
      p.meta.source = source_from_name(source);
      p.meta.parent_id = parent == "-" ? -1 : std::stoll(parent);
      p.meta.attack_tag = tag == "-" ? "" : tag;
      p.crc = static_cast<std::uint32_t>(std::stoul(crc, nullptr, 16));
      pending.push_back(std::move(p));
    } else if (key == "pair") {
      std::int64_t c, a;
      ls >> c >> a;
      if (!ls) throw CorruptFileError("malformed pair line: " + line);
      ds.pairs.emplace_back(c, a);
    } else if (key == "prov_substitute" || key == "prov_attack" || key == "prov_note") {
      std::string rest;
      std::getline(ls, rest);
      if (!rest.empty() && rest.front() == ' ') rest.erase(rest.begin());
      if (key == "prov_substitute") ds.provenance.substitutes.push_back(rest);
      if (key == "prov_attack") ds.provenance.attacks.push_back(rest);
      if (key == "prov_note") ds.provenance.notes.push_back(rest);
    } else if (key == "counts") {
      ls >> counts[0] >> counts[1] >> counts[2];
      saw_counts = true;
    } else if (key == "end") {
      saw_end = true;
    } else {
      throw CorruptFileError("unknown manifest key: " + key);
    }
  }
  if (!saw_end) throw CorruptFileError("dataset manifest truncated (no end marker)");
  if (blob_name.empty()) throw CorruptFileError("dataset manifest names no blob");

  const std::string blob_path =
      (std::filesystem::path(manifest_path_of(stem)).parent_path() / blob_name).string();
  const auto blob = read_file_bytes(blob_path);
  if (blob.size() != blob_size) throw CorruptFileError("dataset blob size mismatch");

  const std::size_t per = shape_numel(ds.image_shape);
  for (auto& p : pending) {
    if (p.count != per) throw CorruptFileError("image region length does not match dataset shape");
    if (p.offset + p.count * 4 > blob.size()) throw CorruptFileError("image region out of blob bounds");
    if (crc32_of(blob.data() + p.offset, p.count * 4) != p.crc) {
      throw CorruptFileError("image region checksum mismatch (example " + std::to_string(p.meta.id) + ")");
    }
    ByteReader r(blob.data() + p.offset, p.count * 4);
    std::vector<double> img(per);
    for (std::size_t i = 0; i < per; ++i) img[i] = static_cast<double>(r.f32());
    p.meta.image = Tensor(ds.image_shape, std::move(img));
    ds.examples.push_back(std::move(p.meta));
  }

  try {
    ds.validate();
  } catch (const Error& e) {
    throw CorruptFileError(std::string("dataset fails validation: ") + e.what());
  }
  if (saw_counts) {
    if (counts[0] != ds.count_source(ExampleSource::Clean) ||
        counts[1] != ds.count_source(ExampleSource::Synthetic) ||
        counts[2] != ds.count_source(ExampleSource::Adversarial)) {
      throw CorruptFileError("dataset counts do not reconcile with examples");
    }
  }
  return ds;
}

// --- synthetic ingestion ---

struct IngestResult {
  std::vector<Example> examples;
  std::vector<std::size_t> class_histogram;
  bool imbalance_warning = false;
};

// Pulls externally generated clean data in through the dataset format.
// Examples come back tagged synthetic; a histogram spread above one example
// raises the imbalance flag.
inline IngestResult ingest_synthetic(const std::string& stem, int expected_classes = 0,
                                     const Shape* expected_shape = nullptr) {
  AugmentedDataset ds = load_dataset(stem);
  if (expected_classes > 0 && ds.classes != expected_classes) {
    throw ValueError("synthetic dataset class count mismatch");
  }
  if (expected_shape && ds.image_shape != *expected_shape) {
    throw ValueError("synthetic dataset image shape mismatch");
  }
  if (ds.count_source(ExampleSource::Adversarial) != 0) {
    throw ValueError("synthetic dataset must not contain adversarial examples");
  }
  IngestResult result;
  result.class_histogram.assign(static_cast<std::size_t>(ds.classes), 0);
  for (auto& e : ds.examples) {
    e.source = ExampleSource::Synthetic;
    result.class_histogram[static_cast<std::size_t>(e.label)]++;
    result.examples.push_back(std::move(e));
  }
  std::size_t lo = SIZE_MAX, hi = 0;
  for (std::size_t c : result.class_histogram) {
    lo = std::min(lo, c);
    hi = std::max(hi, c);
  }
  result.imbalance_warning = !result.examples.empty() && hi - lo > 1;
  return result;
}

}  // namespace drl
