#include "uolo/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "uolo/errors.hpp"

namespace uolo {

namespace {

constexpr char kMagic[8] = {'U', 'O', 'L', 'O', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }

 private:
  void le(std::uint64_t v, int n) {
    unsigned char buf[8];
    for (int i = 0; i < n; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(buf, static_cast<std::size_t>(n));
  }
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}

  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (in_.gcount() != static_cast<std::streamsize>(n)) throw DataError(path_ + ": truncated checkpoint");
  }
  std::uint8_t u8() {
    std::uint8_t v = 0;
    bytes(&v, 1);
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  double f64() { return std::bit_cast<double>(le(8)); }
  std::string str(std::size_t limit = 1 << 20) {
    const std::uint32_t n = u32();
    if (n > limit) throw DataError(path_ + ": corrupt string length in checkpoint");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  const std::string& path() const { return path_; }

 private:
  std::uint64_t le(int n) {
    unsigned char buf[8];
    bytes(buf, static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
  }
  std::istream& in_;
  std::string path_;
};

std::vector<NamedTensor> stored_tensors(const UoloModel& model) {
  std::vector<NamedTensor> all = model.parameters();
  for (NamedTensor& b : model.buffers()) all.push_back(std::move(b));
  return all;
}

std::string read_header(Reader& r) {
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) throw DataError(r.path() + ": not a checkpoint file");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw DataError(r.path() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint64_t n = r.u64();
  if (n > (1u << 20)) throw DataError(r.path() + ": corrupt architecture record");
  std::string arch(n, '\0');
  r.bytes(arch.data(), n);
  return arch;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const UoloModel& model,
                     const AdamState& optimizer, const TrainerCounters& counters) {
  std::filesystem::path tmp = path;
  tmp += ".partial";
  try {
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw DataError("cannot write checkpoint " + tmp.string());
      Writer w(out);
      w.bytes(kMagic, 8);
      w.u32(kCheckpointVersion);
      const std::string arch = architecture_json(model.config());
      w.u64(arch.size());
      w.bytes(arch.data(), arch.size());

      const std::vector<NamedTensor> tensors = stored_tensors(model);
      w.u64(tensors.size());
      for (const NamedTensor& t : tensors) {
        w.str(t.name);
        w.u32(static_cast<std::uint32_t>(t.tensor.rank()));
        for (std::size_t d : t.tensor.shape()) w.u64(d);
        for (double v : t.tensor.data()) w.f64(v);
      }

      w.u64(optimizer.size());
      for (const auto& [name, slot] : optimizer) {
        w.str(name);
        w.u64(slot.t);
        w.u64(slot.m.size());
        for (double v : slot.m) w.f64(v);
        for (double v : slot.v) w.f64(v);
      }

      w.u64(counters.step);
      w.u64(counters.det_batches);
      w.u64(counters.seg_batches);
      w.f64(counters.l_unet);
      w.f64(counters.l_yolo);
      w.u8(counters.best_score ? 1 : 0);
      w.f64(counters.best_score.value_or(0.0));
      out.flush();
      if (!out) throw DataError("failed writing checkpoint " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw DataError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
  } catch (...) {
    std::error_code ec;
    std::filesystem::remove(tmp, ec);
    throw;
  }
}

ModelConfig read_checkpoint_architecture(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  Reader r(in, path.string());
  return parse_architecture_json(read_header(r));
}

CheckpointContents load_checkpoint(const std::filesystem::path& path, UoloModel& model) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  Reader r(in, path.string());
  CheckpointContents contents;
  contents.architecture = parse_architecture_json(read_header(r));
  if (!(contents.architecture == model.config())) {
    throw ConfigError("checkpoint " + path.string() + " is incompatible with the configured architecture: stored " +
                      architecture_json(contents.architecture) + ", configured " +
                      architecture_json(model.config()));
  }

  std::map<std::string, Tensor> targets;
  for (NamedTensor& t : stored_tensors(model)) targets.emplace(t.name, t.tensor);
  const std::uint64_t count = r.u64();
  if (count != targets.size()) throw DataError(r.path() + ": parameter count mismatch");
  std::map<std::string, std::vector<double>> staged;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    auto it = targets.find(name);
    if (it == targets.end()) throw DataError(r.path() + ": unknown parameter " + name);
    const std::uint32_t rank = r.u32();
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u64());
    if (shape != it->second.shape()) {
      throw DataError(r.path() + ": shape mismatch for " + name + ": stored " + shape_to_string(shape) +
                      ", expected " + shape_to_string(it->second.shape()));
    }
    std::vector<double> values(it->second.numel());
    for (double& v : values) v = r.f64();
    staged.emplace(name, std::move(values));
  }

  const std::uint64_t slots = r.u64();
  for (std::uint64_t i = 0; i < slots; ++i) {
    const std::string name = r.str();
    auto it = targets.find(name);
    if (it == targets.end()) throw DataError(r.path() + ": optimizer state for unknown parameter " + name);
    AdamSlot slot;
    slot.t = r.u64();
    const std::uint64_t n = r.u64();
    if (n != it->second.numel()) throw DataError(r.path() + ": optimizer state size mismatch for " + name);
    slot.m.resize(n);
    slot.v.resize(n);
    for (double& v : slot.m) v = r.f64();
    for (double& v : slot.v) v = r.f64();
    contents.optimizer.emplace(name, std::move(slot));
  }

  contents.counters.step = r.u64();
  contents.counters.det_batches = r.u64();
  contents.counters.seg_batches = r.u64();
  contents.counters.l_unet = r.f64();
  contents.counters.l_yolo = r.f64();
  const bool has_best = r.u8() != 0;
  const double best = r.f64();
  if (has_best) contents.counters.best_score = best;

  for (auto& [name, values] : staged) {
    Tensor t = targets.at(name);
    std::copy(values.begin(), values.end(), t.data().begin());
  }
  return contents;
}

}  // namespace uolo
