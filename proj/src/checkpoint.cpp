#include "af/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "af/common.hpp"

namespace af {

namespace {

constexpr char kMagic[4] = {'A', 'F', 'R', 'G'};
// Guards against allocating absurd buffers when reading a corrupt file.
constexpr std::uint32_t kMaxCount = 1u << 24;

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_f64(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof bits);
  for (int i = 0; i < 8; ++i)
    out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& path)
      : bytes_(bytes), path_(path) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(
               static_cast<unsigned char>(bytes_[pos_ + i]))
           << (8 * i);
    pos_ += 4;
    return v;
  }

  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i)
      bits |= static_cast<std::uint64_t>(
                  static_cast<unsigned char>(bytes_[pos_ + i]))
              << (8 * i);
    pos_ += 8;
    double d;
    std::memcpy(&d, &bits, sizeof d);
    return d;
  }

  std::string str(std::uint32_t len) {
    need(len);
    std::string s = bytes_.substr(pos_, len);
    pos_ += len;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

  void need(std::size_t n) {
    if (bytes_.size() - pos_ < n)
      throw CheckpointError(msg("truncated checkpoint: ", path_));
  }

 private:
  const std::string& bytes_;
  const std::string& path_;
  std::size_t pos_ = 0;
};

std::uint32_t checked_u32(std::size_t n, const char* what) {
  if (n > std::numeric_limits<std::uint32_t>::max())
    throw CheckpointError(msg(what, " too large for checkpoint: ", n));
  return static_cast<std::uint32_t>(n);
}

}  // namespace

void write_checkpoint(const std::string& path, const CheckpointData& data) {
  std::string out;
  out.append(kMagic, sizeof kMagic);
  put_u32(out, kCheckpointVersion);
  put_u32(out, checked_u32(data.entries.size(), "entry count"));
  for (const auto& [key, value] : data.entries) {
    const std::string line = key + "=" + value;
    put_u32(out, checked_u32(line.size(), "entry"));
    out += line;
  }
  put_u32(out, checked_u32(data.tensors.size(), "tensor count"));
  for (const auto& [name, tensor] : data.tensors) {
    put_u32(out, checked_u32(name.size(), "tensor name"));
    out += name;
    put_u32(out, checked_u32(tensor.shape().size(), "tensor rank"));
    for (std::size_t d : tensor.shape())
      put_u32(out, checked_u32(d, "tensor dim"));
    for (double v : tensor.data()) put_f64(out, v);
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(msg("cannot open ", path, " for writing"));
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  f.flush();
  if (!f) throw IoError(msg("write failed: ", path));
}

CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(msg("cannot open checkpoint ", path));
  std::ostringstream buf;
  buf << f.rdbuf();
  const std::string bytes = buf.str();

  Reader r(bytes, path);
  r.need(4);
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw CheckpointError(msg("not a checkpoint file: ", path));
  r.str(4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError(msg("unsupported checkpoint version ", version,
                              " in ", path, " (expected ", kCheckpointVersion,
                              ")"));

  CheckpointData data;
  const std::uint32_t n_entries = r.u32();
  if (n_entries > kMaxCount)
    throw CheckpointError(msg("implausible entry count in ", path));
  data.entries.reserve(n_entries);
  for (std::uint32_t i = 0; i < n_entries; ++i) {
    const std::string line = r.str(r.u32());
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw CheckpointError(msg("malformed entry \"", line, "\" in ", path));
    data.entries.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }

  const std::uint32_t n_tensors = r.u32();
  if (n_tensors > kMaxCount)
    throw CheckpointError(msg("implausible tensor count in ", path));
  data.tensors.reserve(n_tensors);
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    const std::string name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank > 8)
      throw CheckpointError(msg("implausible rank ", rank, " for tensor \"",
                                name, "\" in ", path));
    Shape shape(rank);
    std::size_t count = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape[d] = r.u32();
      count *= shape[d];
    }
    r.need(8 * count);
    std::vector<double> values(count);
    for (std::size_t k = 0; k < count; ++k) values[k] = r.f64();
    data.tensors.emplace_back(name, Tensor::from(shape, std::move(values)));
  }
  if (!r.done())
    throw CheckpointError(msg("trailing bytes after checkpoint data: ", path));
  return data;
}

namespace {

std::string fmt_f64(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_u64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%llu", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t parse_u64_entry(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const unsigned long long n = std::strtoull(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0')
    throw CheckpointError(msg("bad value for ", key, ": \"", v, "\""));
  return n;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> config_to_entries(
    const ModelConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  out.emplace_back("model.backbone", backbone_name(cfg.backbone));
  out.emplace_back("model.input_size", fmt_u64(cfg.input_size));
  out.emplace_back("model.d_model", fmt_u64(cfg.d_model));
  out.emplace_back("model.n_heads", fmt_u64(cfg.n_heads));
  out.emplace_back("model.d_ff", fmt_u64(cfg.d_ff));
  out.emplace_back("model.n_encoder_layers", fmt_u64(cfg.n_encoder_layers));
  out.emplace_back("model.n_expr_classes", fmt_u64(cfg.n_expr_classes));
  out.emplace_back("model.n_aus", fmt_u64(cfg.n_aus));
  std::string tasks;
  for (Task t : cfg.tasks) {
    if (!tasks.empty()) tasks += ',';
    tasks += task_name(t);
  }
  out.emplace_back("model.tasks", tasks);
  return out;
}

ModelConfig config_from_entries(
    const std::vector<std::pair<std::string, std::string>>& entries) {
  ModelConfig cfg;
  cfg.tasks.clear();
  bool seen[9] = {};
  for (const auto& [key, value] : entries) {
    try {
      if (key == "model.backbone") {
        cfg.backbone = parse_backbone(value);
        seen[0] = true;
      } else if (key == "model.input_size") {
        cfg.input_size = parse_u64_entry(key, value);
        seen[1] = true;
      } else if (key == "model.d_model") {
        cfg.d_model = parse_u64_entry(key, value);
        seen[2] = true;
      } else if (key == "model.n_heads") {
        cfg.n_heads = parse_u64_entry(key, value);
        seen[3] = true;
      } else if (key == "model.d_ff") {
        cfg.d_ff = parse_u64_entry(key, value);
        seen[4] = true;
      } else if (key == "model.n_encoder_layers") {
        cfg.n_encoder_layers = parse_u64_entry(key, value);
        seen[5] = true;
      } else if (key == "model.n_expr_classes") {
        cfg.n_expr_classes = parse_u64_entry(key, value);
        seen[6] = true;
      } else if (key == "model.n_aus") {
        cfg.n_aus = parse_u64_entry(key, value);
        seen[7] = true;
      } else if (key == "model.tasks") {
        std::stringstream ss(value);
        std::string tok;
        while (std::getline(ss, tok, ',')) cfg.tasks.insert(parse_task(tok));
        seen[8] = true;
      }
    } catch (const std::invalid_argument& e) {
      throw CheckpointError(msg("bad value for ", key, ": ", e.what()));
    }
  }
  for (bool s : seen)
    if (!s) throw CheckpointError("checkpoint is missing model config fields");
  return cfg;
}

}  // namespace af
