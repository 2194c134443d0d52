#include "ddit/checkpoint.hpp"

#include "ddit/binary_io.hpp"

namespace ddit {
namespace {

constexpr std::string_view kMagic = "DDITCKPT";

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  ByteWriter w;
  w.put_raw(kMagic);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint64_t>(ck.config.training_hash());
  w.put<std::uint64_t>(ck.dataset_fingerprint);
  w.put<std::uint64_t>(ck.step);
  w.put_string(ck.config.to_text());
  const auto& tensors = ck.params.tensors();
  w.put<std::uint64_t>(tensors.size());
  for (const auto& [name, t] : tensors) {
    const auto& m = ck.optimizer.m.at(name);
    const auto& v = ck.optimizer.v.at(name);
    if (m.size() != t.size() || v.size() != t.size()) {
      throw std::logic_error("checkpoint: optimizer moments do not match '" + name + "'");
    }
    w.put_string(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.put<std::uint64_t>(d);
    w.put_array<double>(t.values());
    w.put_array<double>(m);
    w.put_array<double>(v);
  }
  w.put<std::uint64_t>(ck.optimizer.step);
  w.put_string(ck.rng_state);
  const auto sum = fnv1a64(std::string_view(reinterpret_cast<const char*>(w.bytes().data()), w.bytes().size()));
  w.put<std::uint64_t>(sum);
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kMagic.size() + 8) throw FormatError("checkpoint: truncated");
  const auto body = bytes.first(bytes.size() - 8);
  ByteReader tail(bytes.last(8));
  if (tail.get<std::uint64_t>() != fnv1a64(std::string_view(reinterpret_cast<const char*>(body.data()), body.size()))) {
    throw FormatError("checkpoint: checksum mismatch (file corrupt or truncated)");
  }
  ByteReader r(body);
  r.expect_magic(kMagic);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ck;
  const auto hash = r.get<std::uint64_t>();
  ck.dataset_fingerprint = r.get<std::uint64_t>();
  ck.step = r.get<std::uint64_t>();
  ck.config = RunConfig::parse(r.get_string());
  if (ck.config.training_hash() != hash) throw FormatError("checkpoint: stored config does not match its hash");
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    auto name = r.get_string();
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw FormatError("checkpoint: implausible rank for '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>();
    const std::size_t n = numel(shape);
    if (n * 3 * sizeof(double) > r.remaining()) throw FormatError("checkpoint: tensor '" + name + "' exceeds file");
    std::vector<double> values(n), m(n), v(n);
    r.get_array<double>(values);
    r.get_array<double>(m);
    r.get_array<double>(v);
    ck.optimizer.m[name] = std::move(m);
    ck.optimizer.v[name] = std::move(v);
    ck.params.add(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  ck.optimizer.step = r.get<std::uint64_t>();
  ck.rng_state = r.get_string();
  if (!r.done()) throw FormatError("checkpoint: trailing bytes");
  if (ck.params.count() != param_count(ck.config.model)) {
    throw FormatError("checkpoint: parameter count does not match the stored model config");
  }
  return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  write_file_atomic(path, encode_checkpoint(ck));
}

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

}  // namespace ddit
