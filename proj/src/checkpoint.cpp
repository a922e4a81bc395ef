#include "kiss/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <iterator>

namespace kiss {

const CheckpointRecord* Checkpoint::find(std::string_view name) const {
  for (const auto& r : records) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

void Checkpoint::add(std::string name, Shape shape, std::vector<float> values) {
  if (numel(shape) != values.size()) throw std::logic_error("checkpoint record '" + name + "' size mismatch");
  records.push_back(CheckpointRecord{std::move(name), std::move(shape), std::move(values)});
}

void Checkpoint::add_text(std::string name, std::string_view text) {
  std::vector<float> cps(text.begin(), text.end());
  for (std::size_t i = 0; i < text.size(); ++i) cps[i] = static_cast<float>(static_cast<unsigned char>(text[i]));
  add(std::move(name), Shape{text.size()}, std::move(cps));
}

std::string Checkpoint::text(std::string_view name) const {
  const auto* r = find(name);
  if (!r) throw CheckpointError("checkpoint has no record '" + std::string(name) + "'");
  std::string s;
  for (float f : r->values) s.push_back(static_cast<char>(static_cast<unsigned char>(f)));
  return s;
}

namespace {

template <typename U>
void put(std::vector<std::uint8_t>& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put(out, bits);
}

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(crc32(crc, data, static_cast<uInt>(n)));
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::size_t limit) : bytes_(bytes), limit_(limit) {}

  template <typename U>
  U get(const std::string& what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }

  std::string str(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }

  void need(std::size_t n, const std::string& what) const {
    if (pos_ + n > limit_ || pos_ + n < pos_) throw CheckpointError("checkpoint truncated while reading " + what);
  }

  std::size_t pos() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out(Checkpoint::kMagic, Checkpoint::kMagic + 8);
  put<std::uint32_t>(out, Checkpoint::kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.records.size()));
  for (const auto& r : ckpt.records) {
    if (r.name.size() > 0xFFFF) throw CheckpointError("record name too long: '" + r.name.substr(0, 32) + "...'");
    if (r.shape.size() > 0xFF) throw CheckpointError("record '" + r.name + "' has too many dimensions");
    put<std::uint16_t>(out, static_cast<std::uint16_t>(r.name.size()));
    out.insert(out.end(), r.name.begin(), r.name.end());
    out.push_back(0);
    out.push_back(static_cast<std::uint8_t>(r.shape.size()));
    for (auto d : r.shape) put<std::uint64_t>(out, d);
    for (float f : r.values) put_f32(out, f);
  }
  put<std::uint32_t>(out, crc32_of(out.data(), out.size()));
  return out;
}

Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), Checkpoint::kMagic, 8) != 0) {
    throw CheckpointError("bad checkpoint magic: expected 'KISSCKPT'");
  }
  if (bytes.size() < 20) throw CheckpointError("checkpoint truncated: header incomplete");
  Reader r(bytes, bytes.size() - 4);
  r.str(8, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != Checkpoint::kVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(Checkpoint::kVersion) + ")");
  }
  const auto count = r.get<std::uint32_t>("record count");
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string where = "record " + std::to_string(i);
    const auto len = r.get<std::uint16_t>(where + " name length");
    CheckpointRecord rec;
    rec.name = r.str(len, where + " name");
    const auto dtype = r.get<std::uint8_t>("record '" + rec.name + "' dtype");
    if (dtype != 0) throw CheckpointError("record '" + rec.name + "' has unsupported dtype " + std::to_string(dtype));
    const auto rank = r.get<std::uint8_t>("record '" + rec.name + "' rank");
    std::size_t n = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      rec.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>("record '" + rec.name + "' dims")));
      n *= rec.shape.back();
    }
    r.need(n * 4, "record '" + rec.name + "' payload");
    rec.values.resize(n);
    for (auto& f : rec.values) {
      const auto bits = r.get<std::uint32_t>("record '" + rec.name + "' payload");
      std::memcpy(&f, &bits, 4);
    }
    ckpt.records.push_back(std::move(rec));
  }
  if (r.pos() != bytes.size() - 4) throw CheckpointError("checkpoint has trailing bytes before the CRC");
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[bytes.size() - 4 + i]) << (8 * i);
  if (stored != crc32_of(bytes.data(), bytes.size() - 4)) throw CheckpointError("checkpoint CRC32 mismatch");
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize_checkpoint(ckpt);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot open '" + tmp + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write to '" + tmp + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError("cannot move checkpoint into place at '" + path.string() + "': " + ec.message());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

template <typename T>
Checkpoint make_checkpoint(const KissModel<T>& model, const RAdam<T>* optimizer, const RunConfig& config) {
  Checkpoint ckpt;
  const auto& vocab = Vocabulary::standard();
  std::vector<float> cps(vocab.size());
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    cps[i] = static_cast<float>(static_cast<unsigned char>(vocab.symbol(static_cast<int>(i))));
  }
  ckpt.add("vocab", Shape{vocab.size()}, std::move(cps));
  RunConfig stored = config;
  stored.model = model.config();
  for (const auto& key : config_keys()) ckpt.add_text("config." + key.name, get_config_value(stored, key.name));
  const auto& entries = model.params().entries();
  for (const auto& e : entries) {
    std::vector<float> v(e.tensor.data().begin(), e.tensor.data().end());
    ckpt.add("param." + e.name, e.tensor.shape(), std::move(v));
  }
  if (optimizer) {
    ckpt.add("optim.step", Shape{1}, {static_cast<float>(optimizer->steps())});
    ckpt.add("optim.lr", Shape{1}, {static_cast<float>(optimizer->lr())});
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& m = optimizer->first_moments()[i];
      const auto& v = optimizer->second_moments()[i];
      ckpt.add("optim.m." + entries[i].name, entries[i].tensor.shape(), std::vector<float>(m.begin(), m.end()));
      ckpt.add("optim.v." + entries[i].name, entries[i].tensor.shape(), std::vector<float>(v.begin(), v.end()));
    }
  }
  return ckpt;
}

RunConfig config_from_checkpoint(const Checkpoint& ckpt, RunConfig base) {
  if (const auto* v = ckpt.find("vocab")) {
    const auto& vocab = Vocabulary::standard();
    bool same = v->values.size() == vocab.size();
    for (std::size_t i = 0; same && i < vocab.size(); ++i) {
      same = static_cast<int>(v->values[i]) == static_cast<unsigned char>(vocab.symbol(static_cast<int>(i)));
    }
    if (!same) throw CheckpointError("checkpoint vocabulary differs from the built-in vocabulary");
  } else {
    throw CheckpointError("checkpoint has no record 'vocab'");
  }
  for (const auto& key : config_keys()) {
    if (!key.model) continue;
    set_config_value(base, key.name, ckpt.text("config." + key.name));
  }
  return base;
}

template <typename T>
void restore_parameters(ParameterStore<T>& params, const Checkpoint& ckpt) {
  for (auto& e : params.entries()) {
    const auto* r = ckpt.find("param." + e.name);
    if (!r) throw ShapeError("checkpoint is missing parameter '" + e.name + "'");
    if (r->shape != e.tensor.shape()) {
      throw ShapeError("parameter '" + e.name + "' shape mismatch: model " + to_string(e.tensor.shape()) +
                       ", checkpoint " + to_string(r->shape));
    }
  }
  for (auto& e : params.entries()) {
    const auto* r = ckpt.find("param." + e.name);
    auto dst = e.tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(r->values[i]);
  }
}

template <typename T>
void restore_optimizer(RAdam<T>& optimizer, const ParameterStore<T>& params, const Checkpoint& ckpt) {
  const auto* step = ckpt.find("optim.step");
  const auto* lr = ckpt.find("optim.lr");
  if (!step || !lr) throw CheckpointError("checkpoint has no optimizer state");
  const auto& entries = params.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto* m = ckpt.find("optim.m." + entries[i].name);
    const auto* v = ckpt.find("optim.v." + entries[i].name);
    if (!m || !v || m->values.size() != entries[i].tensor.numel() || v->values.size() != entries[i].tensor.numel()) {
      throw ShapeError("optimizer state for '" + entries[i].name + "' missing or mis-shaped");
    }
    optimizer.first_moments()[i].assign(m->values.begin(), m->values.end());
    optimizer.second_moments()[i].assign(v->values.begin(), v->values.end());
  }
  optimizer.set_steps(static_cast<std::size_t>(step->values[0]));
  optimizer.set_lr(static_cast<double>(lr->values[0]));
}

#define KISS_CHECKPOINT(T)                                                                                 \
  template Checkpoint make_checkpoint<T>(const KissModel<T>&, const RAdam<T>*, const RunConfig&);         \
  template void restore_parameters<T>(ParameterStore<T>&, const Checkpoint&);                             \
  template void restore_optimizer<T>(RAdam<T>&, const ParameterStore<T>&, const Checkpoint&);

KISS_CHECKPOINT(float)
KISS_CHECKPOINT(double)

}  // namespace kiss
