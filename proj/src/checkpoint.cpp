#include <bit>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "ssmcyto/error.hpp"
#include "ssmcyto/train.hpp"

namespace fs = std::filesystem;

namespace ssmcyto {

namespace {

constexpr char kMagic[8] = {'S', 'S', 'M', 'C', 'Y', 'T', 'O', '1'};

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  template <typename T>
  T get_le(const std::string& what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }

  std::string get_bytes(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const std::string& what) const {
    if (bytes_.size() - pos_ < n) throw FormatError(path_ + ": truncated in " + what);
  }

  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

Checkpoint::Record* find_record(Checkpoint& ckpt, const std::string& name) {
  for (auto& r : ckpt.tensors)
    if (r.name == name) return &r;
  return nullptr;
}

std::vector<Checkpoint::Record> records_from(const ParamStore& store) {
  std::vector<Checkpoint::Record> out;
  for (const Param& p : store.params()) {
    Checkpoint::Record r{p.name, p.value.shape(), {}};
    r.values.reserve(p.value.numel());
    for (double v : p.value.data()) r.values.push_back(static_cast<float>(v));
    out.push_back(std::move(r));
  }
  return out;
}

void load_records(ParamStore& store, const std::vector<Checkpoint::Record>& records) {
  std::vector<const Checkpoint::Record*> match(store.size(), nullptr);
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (!seen.insert(r.name).second) throw FormatError("checkpoint: tensor '" + r.name + "' appears twice");
    std::size_t i = 0;
    while (i < store.size() && store.params()[i].name != r.name) ++i;
    if (i == store.size()) throw FormatError("checkpoint: unexpected tensor '" + r.name + "'");
    if (r.shape != store.params()[i].value.shape()) {
      throw FormatError("checkpoint: tensor '" + r.name + "' has shape " + shape_str(r.shape) + ", model expects " +
                        shape_str(store.params()[i].value.shape()));
    }
    match[i] = &r;
  }
  for (std::size_t i = 0; i < store.size(); ++i)
    if (match[i] == nullptr) throw FormatError("checkpoint: missing tensor '" + store.params()[i].name + "'");
  for (std::size_t i = 0; i < store.size(); ++i) {
    std::span<double> dst = store.params()[i].value.mutable_data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<double>(match[i]->values[k]);
  }
}

Checkpoint make_base_checkpoint(const VisionModel& model, const TrainConfig& cfg,
                                const std::vector<std::string>& classes, const NormStats& stats,
                                const std::vector<std::string>& train_paths, const std::vector<EpochLog>& log) {
  if (classes.size() != model.config().n_classes) {
    throw ConfigError("checkpoint: " + std::to_string(classes.size()) + " class names for a " +
                      std::to_string(model.config().n_classes) + "-class model");
  }
  Checkpoint c;
  nlohmann::json jlog = nlohmann::json::array();
  for (const auto& e : log) jlog.push_back(to_json(e));
  c.header = {{"kind", "base"},
              {"model", to_json(model.config())},
              {"train", to_json(cfg)},
              {"classes", classes},
              {"norm_stats", to_json(stats)},
              {"train_paths", train_paths},
              {"epoch", log.empty() ? 0 : log.back().epoch},
              {"log", jlog}};
  c.tensors = records_from(model.params());
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::string out(kMagic, sizeof kMagic);
  const std::string header = ckpt.header.dump();
  put_le<std::uint64_t>(out, header.size());
  out += header;
  for (const auto& r : ckpt.tensors) {
    if (r.values.size() != shape_numel(r.shape)) {
      throw ContractError("checkpoint: tensor '" + r.name + "' payload does not match its shape");
    }
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out += r.name;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
    for (std::size_t d : r.shape) put_le<std::uint64_t>(out, d);
    for (float v : r.values) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write checkpoint " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("failed writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path);
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader in(bytes, path);
  if (in.get_bytes(sizeof kMagic, "magic") != std::string(kMagic, sizeof kMagic)) {
    throw FormatError(path + ": not an ssmcyto checkpoint (bad magic)");
  }
  const auto header_len = in.get_le<std::uint64_t>("header length");
  Checkpoint c;
  try {
    c.header = nlohmann::json::parse(in.get_bytes(header_len, "header"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": corrupt header: " + e.what());
  }
  if (!c.header.is_object()) throw FormatError(path + ": header is not a JSON object");
  while (!in.done()) {
    Checkpoint::Record r;
    const auto name_len = in.get_le<std::uint32_t>("tensor name length");
    r.name = in.get_bytes(name_len, "tensor name");
    const std::string what = "tensor '" + r.name + "'";
    const auto rank = in.get_le<std::uint32_t>(what);
    if (rank > 8) throw FormatError(path + ": " + what + " has implausible rank " + std::to_string(rank));
    for (std::uint32_t i = 0; i < rank; ++i) r.shape.push_back(in.get_le<std::uint64_t>(what));
    const std::size_t n = shape_numel(r.shape);
    if (n > bytes.size()) throw FormatError(path + ": " + what + " is larger than the file");
    r.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) r.values[i] = std::bit_cast<float>(in.get_le<std::uint32_t>(what));
    c.tensors.push_back(std::move(r));
  }
  return c;
}

BaseModel restore_base_model(const Checkpoint& ckpt, const std::optional<ModelConfig>& expected) {
  BaseModel b;
  ModelConfig cfg;
  try {
    if (ckpt.header.at("kind") != "base") throw FormatError("checkpoint is not a base model");
    cfg = model_config_from_json(ckpt.header.at("model"));
    b.classes = ckpt.header.at("classes").get<std::vector<std::string>>();
    b.stats = norm_stats_from_json(ckpt.header.at("norm_stats"));
    b.train_paths = ckpt.header.at("train_paths").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  if (expected && !(*expected == cfg)) {
    throw ConfigError("checkpoint model config mismatch: stored " + to_json(cfg).dump() + ", expected " +
                      to_json(*expected).dump());
  }
  b.model = std::make_unique<VisionModel>(cfg);
  load_records(b.model->params(), ckpt.tensors);
  b.header = ckpt.header;
  return b;
}

}  // namespace ssmcyto
