#include "fddcsi/store.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "fddcsi/config_io.hpp"

namespace fddcsi {

namespace fs = std::filesystem;

FormatError::FormatError(Kind kind, std::uint64_t offset, const std::string& what)
    : std::runtime_error(to_string(kind) + " at byte " + std::to_string(offset) + ": " + what),
      kind_(kind),
      offset_(offset) {}

std::string to_string(FormatError::Kind kind) {
  switch (kind) {
    case FormatError::Kind::BadMagic: return "bad-magic";
    case FormatError::Kind::UnsupportedVersion: return "unsupported-version";
    case FormatError::Kind::Truncated: return "truncated";
    case FormatError::Kind::Shape: return "shape";
    case FormatError::Kind::Io: return "io";
  }
  return "?";
}

namespace {

using Kind = FormatError::Kind;

constexpr char kDatasetMagic[4] = {'F', 'M', 'C', 'D'};
constexpr char kCheckpointMagic[4] = {'F', 'M', 'C', 'K'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    auto* c = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), c, c + n);
  }
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { uint(v); }
  void u32(std::uint32_t v) { uint(v); }
  void u64(std::uint64_t v) { uint(v); }
  void i64(std::int64_t v) { uint(static_cast<std::uint64_t>(v)); }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void vec(const Eigen::VectorXd& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) f64(v[i]);
  }

  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return in_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n)
      throw FormatError(Kind::Truncated, pos_,
                        std::string("reading ") + what + ": need " + std::to_string(n) + " bytes, " +
                            std::to_string(remaining()) + " left");
  }
  template <typename U>
  U uint(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(in_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::uint8_t u8(const char* what) { return uint<std::uint8_t>(what); }
  std::uint16_t u16(const char* what) { return uint<std::uint16_t>(what); }
  std::uint32_t u32(const char* what) { return uint<std::uint32_t>(what); }
  std::uint64_t u64(const char* what) { return uint<std::uint64_t>(what); }
  std::int64_t i64(const char* what) { return static_cast<std::int64_t>(u64(what)); }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  void vec(Eigen::VectorXd& v, Eigen::Index n, const char* what) {
    need(static_cast<std::size_t>(n) * 8, what);
    v.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = f64(what);
  }

  void magic(const char (&expected)[4], const char* format) {
    if (in_.size() < 4)
      throw FormatError(Kind::Truncated, 0,
                        std::string(format) + ": file of " + std::to_string(in_.size()) + " bytes has no magic");
    if (std::memcmp(in_.data(), expected, 4) != 0)
      throw FormatError(Kind::BadMagic, 0,
                        std::string(format) + ": expected magic '" + std::string(expected, 4) + "', found '" +
                            std::string(reinterpret_cast<const char*>(in_.data()), 4) + "'");
    pos_ = 4;
  }

  /// Total length check once the header has fixed the payload size.
  void expect_total(std::uint64_t expected, const char* format) const {
    if (in_.size() < expected)
      throw FormatError(Kind::Truncated, in_.size(),
                        std::string(format) + ": expected " + std::to_string(expected) + " bytes, file has " +
                            std::to_string(in_.size()));
    if (in_.size() > expected)
      throw FormatError(Kind::Shape, expected,
                        std::string(format) + ": expected " + std::to_string(expected) + " bytes, file has " +
                            std::to_string(in_.size()) + " (trailing data)");
  }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xffffffffu) throw std::invalid_argument(std::string(what) + " does not fit in 32 bits");
  return static_cast<std::uint32_t>(v);
}

bool has_clean_labels(const DatasetFile& file) {
  bool any = false;
  bool all = true;
  for (const auto& t : file.tasks)
    for (const auto& p : t.pairs) {
      const bool c = p.y_clean.size() != 0;
      any = any || c;
      all = all && c;
    }
  if (any && !all) throw std::invalid_argument("dataset: clean labels present on only some pairs");
  return any;
}

}  // namespace

std::size_t DatasetFile::pair_count() const {
  std::size_t n = 0;
  for (const auto& t : tasks) n += t.size();
  return n;
}

namespace {

bool bit_equal(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return a.size() == b.size() &&
         (a.size() == 0 || std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0);
}

bool bit_equal(double a, double b) { return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b); }

}  // namespace

bool DatasetFile::operator==(const DatasetFile& o) const {
  if (M != o.M || role != o.role || !bit_equal(delta_f, o.delta_f) || noise.mode != o.noise.mode ||
      !bit_equal(noise.snr_db, o.noise.snr_db) || noise.pilot_len != o.noise.pilot_len ||
      tasks.size() != o.tasks.size())
    return false;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const auto& a = tasks[t];
    const auto& b = o.tasks[t];
    if (a.env_id != b.env_id || a.role != b.role || a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const auto& p = a.pairs[i];
      const auto& q = b.pairs[i];
      if (!bit_equal(p.f_up, q.f_up) || !bit_equal(p.f_down, q.f_down) || p.user != q.user ||
          !bit_equal(p.x, q.x) || !bit_equal(p.y, q.y) || !bit_equal(p.y_clean, q.y_clean))
        return false;
    }
  }
  return true;
}

void validate(const DatasetFile& file) {
  if (file.M < 1) throw std::invalid_argument("dataset: M must be >= 1");
  const Eigen::Index w = 2 * file.M;
  for (const auto& t : file.tasks) {
    if (t.role != file.role)
      throw std::invalid_argument("dataset: task " + std::to_string(t.env_id) + " has role " + to_string(t.role) +
                                  ", file role is " + to_string(file.role));
    for (const auto& p : t.pairs) {
      if (p.x.size() != w || p.y.size() != w || (p.y_clean.size() != 0 && p.y_clean.size() != w))
        throw std::invalid_argument("dataset: pair width " + std::to_string(p.x.size()) + "/" +
                                    std::to_string(p.y.size()) + " does not match 2M = " + std::to_string(w));
      if (!bit_equal(p.f_down, p.f_up + file.delta_f))
        throw std::invalid_argument("dataset: pair f_down differs from f_up + delta_f");
    }
  }
  has_clean_labels(file);
}

std::vector<std::uint8_t> encode_dataset(const DatasetFile& file) {
  validate(file);
  const bool clean = has_clean_labels(file);
  Writer w;
  w.bytes(kDatasetMagic, 4);
  w.u32(kDatasetVersion);
  w.u32(checked_u32(static_cast<std::size_t>(file.M), "M"));
  w.u32(checked_u32(file.tasks.size(), "env count"));
  w.u8(static_cast<std::uint8_t>(file.role));
  w.u8(static_cast<std::uint8_t>(file.noise.mode));
  w.u8(clean ? 1 : 0);
  w.u8(0);
  w.u64(file.pair_count());
  w.f64(file.delta_f);
  w.f64(file.noise.snr_db);
  w.u32(checked_u32(static_cast<std::size_t>(file.noise.pilot_len), "pilot length"));
  for (const auto& t : file.tasks) {
    w.i64(t.env_id);
    w.u64(t.size());
  }
  for (const auto& t : file.tasks)
    for (const auto& p : t.pairs) {
      w.f64(p.f_up);
      w.vec(p.x);
      w.vec(p.y);
    }
  if (clean)
    for (const auto& t : file.tasks)
      for (const auto& p : t.pairs) w.vec(p.y_clean);
  for (const auto& t : file.tasks)
    for (const auto& p : t.pairs) w.i64(p.user);
  return w.take();
}

DatasetFile decode_dataset(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  r.magic(kDatasetMagic, "dataset");
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kDatasetVersion)
    throw FormatError(Kind::UnsupportedVersion, version_at,
                      "dataset version " + std::to_string(version) + ", supported " + std::to_string(kDatasetVersion));
  DatasetFile file;
  const std::uint32_t M = r.u32("M");
  const std::uint32_t envs = r.u32("env count");
  const std::size_t role_at = r.offset();
  const std::uint8_t role = r.u8("role");
  const std::uint8_t mode = r.u8("noise mode");
  const std::uint8_t clean = r.u8("clean flag");
  r.u8("reserved");
  const std::uint64_t pairs = r.u64("pair count");
  file.delta_f = r.f64("delta_f");
  file.noise.snr_db = r.f64("snr_db");
  file.noise.pilot_len = static_cast<int>(r.u32("pilot length"));
  if (M == 0 || M > (1u << 20)) throw FormatError(Kind::Shape, 8, "dataset M = " + std::to_string(M));
  if (role > static_cast<std::uint8_t>(Role::Train) || mode > static_cast<std::uint8_t>(NoiseMode::Lmmse) ||
      clean > 1)
    throw FormatError(Kind::Shape, role_at, "dataset header has an unknown role, noise mode or clean flag");
  file.M = static_cast<int>(M);
  file.role = static_cast<Role>(role);
  file.noise.mode = static_cast<NoiseMode>(mode);

  const std::uint64_t w = 2ull * M;
  const std::uint64_t header = r.offset();
  const std::uint64_t table = 16ull * envs;
  const std::uint64_t per_pair = 8 + 16 * w + (clean ? 8 * w : 0) + 8;
  if (pairs > (bytes.size() / per_pair) + 1)
    throw FormatError(Kind::Truncated, bytes.size(),
                      "dataset declares " + std::to_string(pairs) + " pairs, file has " +
                          std::to_string(bytes.size()) + " bytes");
  r.expect_total(header + table + pairs * per_pair, "dataset");

  std::uint64_t declared = 0;
  file.tasks.resize(envs);
  std::vector<std::uint64_t> counts(envs);
  for (std::uint32_t e = 0; e < envs; ++e) {
    file.tasks[e].env_id = r.i64("env id");
    file.tasks[e].role = file.role;
    counts[e] = r.u64("env pair count");
    declared += counts[e];
  }
  if (declared != pairs)
    throw FormatError(Kind::Shape, header,
                      "env table sums to " + std::to_string(declared) + " pairs, header declares " +
                          std::to_string(pairs));
  for (std::uint32_t e = 0; e < envs; ++e) {
    auto& t = file.tasks[e];
    t.pairs.resize(counts[e]);
    for (auto& p : t.pairs) {
      p.f_up = r.f64("f_up");
      p.f_down = p.f_up + file.delta_f;
      r.vec(p.x, static_cast<Eigen::Index>(w), "x");
      r.vec(p.y, static_cast<Eigen::Index>(w), "y");
    }
  }
  if (clean)
    for (auto& t : file.tasks)
      for (auto& p : t.pairs) r.vec(p.y_clean, static_cast<Eigen::Index>(w), "clean label");
  for (auto& t : file.tasks)
    for (auto& p : t.pairs) p.user = r.i64("user");
  return file;
}

std::uint64_t checkpoint_digest(const TrainConfig& cfg) { return config_digest(to_json(cfg)); }

std::vector<std::uint8_t> encode_checkpoint(const TrainedModel& model) {
  model.spec.validate();
  Network(model.spec).check_params(model.params);
  Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(checked_u32(model.spec.weight_layers(), "layer count"));
  for (int s : model.spec.sizes) w.u32(checked_u32(static_cast<std::size_t>(s), "width"));
  for (Activation a : model.spec.activations) w.u8(a == Activation::Relu ? 0 : 1);
  w.u8(static_cast<std::uint8_t>(model.provenance));
  w.u8(model.converged ? 1 : 0);
  w.u16(0);
  w.u32(checked_u32(static_cast<std::size_t>(model.derivative_order), "derivative order"));
  w.u32(checked_u32(static_cast<std::size_t>(model.steps), "steps"));
  w.u64(checkpoint_digest(model.config));
  for (const auto& layer : model.params.layers)
    for (Eigen::Index i = 0; i < layer.W.rows(); ++i)
      for (Eigen::Index j = 0; j < layer.W.cols(); ++j) w.f64(layer.W(i, j));
  for (const auto& layer : model.params.layers) w.vec(layer.b);
  return w.take();
}

namespace {

struct CheckpointHeader {
  TrainedModel model;
  std::uint64_t digest = 0;
};

CheckpointHeader decode_checkpoint_impl(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  r.magic(kCheckpointMagic, "checkpoint");
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw FormatError(Kind::UnsupportedVersion, version_at,
                      "checkpoint version " + std::to_string(version) + ", supported " +
                          std::to_string(kCheckpointVersion));
  const std::size_t layers_at = r.offset();
  const std::uint32_t layers = r.u32("layer count");
  if (layers == 0 || layers > 1024)
    throw FormatError(Kind::Shape, layers_at, "checkpoint layer count " + std::to_string(layers));
  CheckpointHeader out;
  TrainedModel& m = out.model;
  std::uint64_t scalars = 0;
  for (std::uint32_t l = 0; l <= layers; ++l) {
    const std::size_t at = r.offset();
    const std::uint32_t width = r.u32("width");
    if (width == 0 || width > (1u << 24))
      throw FormatError(Kind::Shape, at, "checkpoint width " + std::to_string(width));
    m.spec.sizes.push_back(static_cast<int>(width));
    if (l > 0) scalars += static_cast<std::uint64_t>(width) * (m.spec.sizes[l - 1] + 1ull);
  }
  for (std::uint32_t l = 0; l < layers; ++l) {
    const std::size_t at = r.offset();
    const std::uint8_t a = r.u8("activation");
    if (a > 1) throw FormatError(Kind::Shape, at, "unknown activation tag " + std::to_string(a));
    m.spec.activations.push_back(a == 0 ? Activation::Relu : Activation::Linear);
  }
  const std::size_t prov_at = r.offset();
  const std::uint8_t prov = r.u8("provenance");
  if (prov > static_cast<std::uint8_t>(Provenance::Adapted))
    throw FormatError(Kind::Shape, prov_at, "unknown provenance tag " + std::to_string(prov));
  m.provenance = static_cast<Provenance>(prov);
  m.converged = r.u8("converged") != 0;
  r.u16("reserved");
  m.derivative_order = static_cast<int>(r.u32("derivative order"));
  m.steps = static_cast<int>(r.u32("steps"));
  out.digest = r.u64("config digest");
  r.expect_total(r.offset() + 8 * scalars, "checkpoint");

  m.params = zero_params(m.spec);
  for (auto& layer : m.params.layers)
    for (Eigen::Index i = 0; i < layer.W.rows(); ++i)
      for (Eigen::Index j = 0; j < layer.W.cols(); ++j) layer.W(i, j) = r.f64("weight");
  for (auto& layer : m.params.layers) r.vec(layer.b, layer.b.size(), "bias");
  return out;
}

}  // namespace

TrainedModel decode_checkpoint(const std::vector<std::uint8_t>& bytes) { return decode_checkpoint_impl(bytes).model; }

fs::path sidecar_path(const fs::path& path) {
  fs::path p = path;
  p += ".meta.json";
  return p;
}

void write_bytes_atomic(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(Kind::Io, 0, "cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw FormatError(Kind::Io, 0, "write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw FormatError(Kind::Io, 0, "cannot rename into " + path.string());
  }
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  write_bytes_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(Kind::Io, 0, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw FormatError(Kind::Io, 0, "read failed for " + path.string());
  return bytes;
}

void write_dataset(const fs::path& path, const DatasetFile& file) {
  const auto bytes = encode_dataset(file);
  write_bytes_atomic(path, bytes);
  json envs = json::array();
  for (const auto& t : file.tasks) envs.push_back({{"env_id", t.env_id}, {"pairs", t.size()}});
  json meta = {{"format", "FMCD"},
               {"version", kDatasetVersion},
               {"M", file.M},
               {"role", to_string(file.role)},
               {"delta_f", file.delta_f},
               {"noise", to_json(file.noise)},
               {"pair_count", file.pair_count()},
               {"bytes", bytes.size()},
               {"envs", envs}};
  write_text_atomic(sidecar_path(path), meta.dump(2) + "\n");
}

DatasetFile read_dataset(const fs::path& path) { return decode_dataset(read_bytes(path)); }

void write_checkpoint(const fs::path& path, const TrainedModel& model) {
  const auto bytes = encode_checkpoint(model);
  write_bytes_atomic(path, bytes);
  std::vector<std::string> acts;
  for (Activation a : model.spec.activations) acts.push_back(a == Activation::Relu ? "relu" : "linear");
  json meta = {{"format", "FMCK"},
               {"version", kCheckpointVersion},
               {"widths", model.spec.sizes},
               {"activations", acts},
               {"provenance", to_string(model.provenance)},
               {"derivative_order", model.derivative_order},
               {"steps", model.steps},
               {"converged", model.converged},
               {"config_digest", checkpoint_digest(model.config)},
               {"config", to_json(model.config)}};
  write_text_atomic(sidecar_path(path), meta.dump(2) + "\n");
}

TrainedModel read_checkpoint(const fs::path& path) {
  auto decoded = decode_checkpoint_impl(read_bytes(path));
  const fs::path side = sidecar_path(path);
  if (fs::exists(side)) {
    const auto text = read_bytes(side);
    const json meta = json::parse(text.begin(), text.end(), nullptr, false);
    if (!meta.is_discarded() && meta.contains("config")) {
      TrainConfig cfg;
      update_from_json(cfg, meta.at("config"));
      if (checkpoint_digest(cfg) == decoded.digest) decoded.model.config = cfg;
    }
  }
  return decoded.model;
}

}  // namespace fddcsi
