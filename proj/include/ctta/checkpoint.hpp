#pragma once

// DACP checkpoint: "DACP", u32 version, u32 spec fingerprint, u32 entry
// count, then entries of (u16 name length, name, u8 rank, u32 extents,
// little-endian f32 values). Parameters come first, followed by the BN
// source statistics as "<layer>.src_mu" / "<layer>.src_sigma".

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ctta/binary_io.hpp"
#include "ctta/errors.hpp"
#include "ctta/segmodel.hpp"

namespace ctta {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;

  friend bool operator==(const CheckpointEntry&, const CheckpointEntry&) = default;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::uint32_t fingerprint = 0;
  std::vector<CheckpointEntry> entries;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

template <class T>
Checkpoint make_checkpoint(const SegModel<T>& model) {
  Checkpoint ck;
  ck.fingerprint = model.fingerprint();
  for (const auto& p : model.params()) {
    CheckpointEntry e{p.name, p.value.shape(), {}};
    e.values.reserve(p.value.size());
    for (T v : p.value.values()) e.values.push_back(static_cast<float>(v));
    ck.entries.push_back(std::move(e));
  }
  for (std::size_t l = 0; l < model.bn_layers().size(); ++l) {
    const auto& s = model.source_stats()[l];
    const std::string& name = model.bn_layers()[l].name;
    CheckpointEntry mu{name + ".src_mu", Shape{s.channels()}, {}};
    CheckpointEntry sd{name + ".src_sigma", Shape{s.channels()}, {}};
    for (std::size_t c = 0; c < s.channels(); ++c) {
      mu.values.push_back(static_cast<float>(s.mu[c]));
      sd.values.push_back(static_cast<float>(s.sigma[c]));
    }
    ck.entries.push_back(std::move(mu));
    ck.entries.push_back(std::move(sd));
  }
  return ck;
}

/// Loads parameters and source statistics into a model built from the same
/// spec. Adam state is cleared and the dynamic BN memory detached.
template <class T>
void apply_checkpoint(SegModel<T>& model, const Checkpoint& ck) {
  if (ck.fingerprint != model.fingerprint()) {
    throw FormatError("checkpoint spec fingerprint " + std::to_string(ck.fingerprint) +
                      " does not match model " + std::to_string(model.fingerprint()));
  }
  const std::size_t expected = model.params().size() + 2 * model.bn_layers().size();
  if (ck.entries.size() != expected) {
    throw FormatError("checkpoint has " + std::to_string(ck.entries.size()) + " entries, expected " +
                      std::to_string(expected));
  }
  std::size_t i = 0;
  for (auto& p : model.params()) {
    const auto& e = ck.entries[i++];
    if (e.name != p.name || e.shape != p.value.shape()) {
      throw FormatError("checkpoint entry '" + e.name + "' " + shape_str(e.shape) +
                        " does not match parameter '" + p.name + "' " + shape_str(p.value.shape()));
    }
    for (std::size_t k = 0; k < e.values.size(); ++k) p.value[k] = static_cast<T>(e.values[k]);
  }
  std::vector<ChannelStats> stats;
  for (const auto& bn : model.bn_layers()) {
    const auto& mu = ck.entries[i++];
    const auto& sd = ck.entries[i++];
    if (mu.name != bn.name + ".src_mu" || sd.name != bn.name + ".src_sigma" ||
        mu.values.size() != bn.channels || sd.values.size() != bn.channels) {
      throw FormatError("checkpoint source statistics for " + bn.name + " are malformed");
    }
    std::vector<double> m(mu.values.begin(), mu.values.end());
    std::vector<double> s(sd.values.begin(), sd.values.end());
    for (double v : s) {
      if (!(v > 0.0)) throw FormatError("checkpoint: nonpositive source sigma in " + bn.name);
    }
    stats.emplace_back(std::move(m), std::move(s));
  }
  model.set_source_stats(std::move(stats));
  model.params().reset_optimizer();
  model.params().zero_grad();
  model.dynamic_bn().reset();
}

inline Bytes encode_checkpoint(const Checkpoint& ck) {
  ByteWriter w;
  w.raw("DACP");
  w.u32(ck.version);
  w.u32(ck.fingerprint);
  w.u32(static_cast<std::uint32_t>(ck.entries.size()));
  for (const auto& e : ck.entries) {
    if (e.name.size() > 0xffff || e.shape.size() > 0xff) throw FormatError("checkpoint entry too large: " + e.name);
    w.u16(static_cast<std::uint16_t>(e.name.size()));
    w.raw(e.name);
    w.u8(static_cast<std::uint8_t>(e.shape.size()));
    for (std::size_t d : e.shape) w.u32(static_cast<std::uint32_t>(d));
    for (float v : e.values) w.f32(v);
  }
  return w.take();
}

inline Checkpoint decode_checkpoint(const Bytes& data, const std::string& what = "checkpoint") {
  ByteReader r(data, what);
  if (r.raw(4) != "DACP") r.fail("bad magic");
  Checkpoint ck;
  ck.version = r.u32();
  if (ck.version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(ck.version));
  ck.fingerprint = r.u32();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const std::uint16_t len = r.u16();
    e.name = r.raw(len);
    const std::uint8_t rank = r.u8();
    if (rank == 0) r.fail("entry '" + e.name + "' has rank 0");
    std::size_t numel = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const std::uint32_t ext = r.u32();
      if (ext == 0) r.fail("entry '" + e.name + "' has a zero extent");
      e.shape.push_back(ext);
      numel *= ext;
    }
    if (numel > r.remaining() / 4) r.fail("entry '" + e.name + "' overruns the file");
    e.values.resize(numel);
    for (float& v : e.values) v = r.f32();
    ck.entries.push_back(std::move(e));
  }
  r.expect_end();
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_file_atomic(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path), path.string());
}

/// Builds a model for `spec` and fills it from the checkpoint at `path`.
template <class T = float>
SegModel<T> load_model(const ModelSpec& spec, const std::filesystem::path& path) {
  SegModel<T> model(spec, 0);
  apply_checkpoint(model, load_checkpoint(path));
  return model;
}

}  // namespace ctta
