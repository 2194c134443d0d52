#include "ddit/dataset_io.hpp"

#include <fstream>
#include <sstream>

#include "ddit/binary_io.hpp"

namespace ddit {
namespace {

constexpr std::string_view kMagic = "DDITDATA";
constexpr std::uint32_t kVersion = 1;

}  // namespace

std::uint64_t Dataset::config_hash() const {
  std::ostringstream os;
  os << "ddit-world v1 grid=" << world::kGridShape.height << 'x' << world::kGridShape.width << 'x'
     << world::kGridShape.channels << " text_len=" << world::kTextLen << " vocab=" << world::kVocabSize;
  return fnv1a64(os.str());
}

std::uint64_t Dataset::fingerprint() const {
  std::ostringstream os;
  os << config_hash() << ':' << seed << ':' << examples.size();
  return fnv1a64(os.str());
}

Dataset generate_dataset(std::size_t count, std::uint64_t seed) {
  Dataset d;
  d.seed = seed;
  d.examples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, i));
    d.examples.push_back(world::generate_example(rng));
  }
  return d;
}

std::vector<std::uint8_t> encode_dataset(const Dataset& data) {
  const auto& g = world::kGridShape;
  const std::size_t L = world::kTextLen;
  ByteWriter w;
  w.put_raw(kMagic);
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint64_t>(data.config_hash());
  w.put<std::uint64_t>(data.seed);
  w.put<std::uint64_t>(data.examples.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(g.height));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(g.width));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(g.channels));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(L));
  w.put<std::uint32_t>(world::kVocabSize);
  for (const auto& ex : data.examples) {
    if (!(ex.image.shape == g) || ex.caption.size() != L) throw std::invalid_argument("encode_dataset: example shape mismatch");
    w.put_array<double>(ex.image.values);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(ex.scene.objects.size()));
    for (const auto& o : ex.scene.objects) {
      w.put<std::uint8_t>(static_cast<std::uint8_t>(o.shape));
      w.put<std::uint8_t>(static_cast<std::uint8_t>(o.color));
      w.put<std::uint8_t>(static_cast<std::uint8_t>(o.quadrant));
    }
    for (int id : ex.caption.ids) w.put<std::uint16_t>(static_cast<std::uint16_t>(id));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(ex.qa.size()));
    for (const auto& qa : ex.qa) {
      w.put<std::uint8_t>(static_cast<std::uint8_t>(qa.kind));
      w.put<std::uint8_t>(static_cast<std::uint8_t>(qa.answer_pos));
      w.put<std::uint16_t>(static_cast<std::uint16_t>(qa.answer));
      for (int id : qa.sequence.ids) w.put<std::uint16_t>(static_cast<std::uint16_t>(id));
      w.put_array<std::uint8_t>(qa.sequence.frozen);
    }
  }
  return std::move(w.bytes());
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic(kMagic);
  if (r.get<std::uint32_t>() != kVersion) throw FormatError("dataset: unsupported version");
  Dataset d;
  const auto hash = r.get<std::uint64_t>();
  if (hash != d.config_hash()) throw FormatError("dataset: config hash mismatch");
  d.seed = r.get<std::uint64_t>();
  const auto count = r.get<std::uint64_t>();
  const auto& g = world::kGridShape;
  const std::size_t L = world::kTextLen;
  if (r.get<std::uint32_t>() != g.height || r.get<std::uint32_t>() != g.width ||
      r.get<std::uint32_t>() != g.channels || r.get<std::uint32_t>() != L ||
      r.get<std::uint32_t>() != static_cast<std::uint32_t>(world::kVocabSize)) {
    throw FormatError("dataset: header dimensions do not match this build");
  }
  auto read_ids = [&](std::size_t n) {
    std::vector<int> ids(n);
    for (auto& id : ids) {
      id = r.get<std::uint16_t>();
      if (id >= world::kVocabSize) throw FormatError("dataset: token id outside vocabulary");
    }
    return ids;
  };
  if (count > r.remaining() / (g.size() * sizeof(double))) throw FormatError("dataset: truncated");
  d.examples.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    world::Example ex;
    ex.image = ImageGrid(g);
    r.get_array<double>(ex.image.values);
    const auto n_obj = r.get<std::uint8_t>();
    for (std::uint8_t k = 0; k < n_obj; ++k) {
      const auto s = r.get<std::uint8_t>();
      const auto c = r.get<std::uint8_t>();
      const auto q = r.get<std::uint8_t>();
      if (s >= world::kShapes || c >= world::kColors || q >= world::kQuadrants) throw FormatError("dataset: bad object");
      ex.scene.objects.push_back({static_cast<world::ShapeKind>(s), static_cast<world::Color>(c),
                                  static_cast<world::Quadrant>(q)});
    }
    ex.caption = TokenSequence(read_ids(L));
    const auto n_qa = r.get<std::uint8_t>();
    for (std::uint8_t k = 0; k < n_qa; ++k) {
      world::QaPair qa;
      qa.kind = static_cast<world::QuestionKind>(r.get<std::uint8_t>());
      qa.answer_pos = r.get<std::uint8_t>();
      qa.answer = r.get<std::uint16_t>();
      auto ids = read_ids(L);
      std::vector<std::uint8_t> frozen(L);
      r.get_array<std::uint8_t>(frozen);
      qa.sequence = TokenSequence(std::move(ids), std::move(frozen));
      ex.qa.push_back(std::move(qa));
    }
    d.examples.push_back(std::move(ex));
  }
  if (!r.done()) throw FormatError("dataset: trailing bytes");
  return d;
}

std::string dataset_manifest(const Dataset& data, const std::string& path) {
  std::ostringstream os;
  os << "# ddit synthetic dataset manifest\n"
     << "file = " << path << "\n"
     << "format = DDITDATA v" << kVersion << " (little-endian record stream)\n"
     << "count = " << data.examples.size() << "\n"
     << "seed = " << data.seed << "\n"
     << "grid = " << world::kGridShape.height << "x" << world::kGridShape.width << "x"
     << world::kGridShape.channels << "\n"
     << "text_len = " << world::kTextLen << "\n"
     << "vocab = " << world::kVocabSize << "\n"
     << "config_hash = " << std::hex << data.config_hash() << "\n"
     << "fingerprint = " << data.fingerprint() << std::dec << "\n";
  return os.str();
}

void write_dataset(const std::string& path, const Dataset& data) {
  write_file_atomic(path, encode_dataset(data));
  const auto manifest = dataset_manifest(data, path);
  write_file_atomic(path + ".manifest",
                    std::span(reinterpret_cast<const std::uint8_t*>(manifest.data()), manifest.size()));
}

Dataset read_dataset(const std::string& path) { return decode_dataset(read_file(path)); }

}  // namespace ddit
