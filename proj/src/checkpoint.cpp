#include "camrw/checkpoint.hpp"

#include "camrw/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

namespace camrw {

namespace {

constexpr char kMagic[8] = {'C', 'A', 'M', 'R', 'W', 'C', 'K', 'P'};
constexpr char kEnd[4] = {'E', 'N', 'D', '!'};

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <class T>
  void le(T v) {
    unsigned char out[sizeof(T)];
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    U u;
    std::memcpy(&u, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T); ++i) out[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xFF);
    bytes(out, sizeof(T));
  }
  const std::vector<char>& data() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  explicit Reader(std::vector<char> buf) : buf_(std::move(buf)) {}
  void bytes(void* p, std::size_t n) {
    if (pos_ + n > buf_.size()) throw CheckpointFormatError("checkpoint truncated");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  template <class T>
  T le() {
    unsigned char in[sizeof(T)];
    bytes(in, sizeof(T));
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(in[i]) << (8 * i);
    T v;
    std::memcpy(&v, &u, sizeof(T));
    return v;
  }
  std::string str(std::size_t n) {
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  std::size_t pos() const { return pos_; }
  const std::vector<char>& data() const { return buf_; }

 private:
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

std::uint64_t fnv1a(const char* p, std::size_t n) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(p[i]);
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

struct Parsed {
  std::map<std::string, std::string> manifest;
  ModelConfig config;
  ad::ParameterStore store;
};

Parsed parse(std::vector<char> buf) {
  if (buf.size() < sizeof(kMagic) + 12 + sizeof(kEnd)) throw CheckpointFormatError("checkpoint truncated");
  const std::size_t body = buf.size() - 8 - sizeof(kEnd);
  if (std::memcmp(buf.data() + buf.size() - sizeof(kEnd), kEnd, sizeof(kEnd)) != 0) {
    throw CheckpointFormatError("checkpoint end marker missing");
  }
  Reader r(std::move(buf));
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) throw CheckpointFormatError("not a checkpoint file");
  const auto version = r.le<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointFormatError("checkpoint format version " + std::to_string(version) + " unsupported");
  }
  {
    Reader tail(std::vector<char>(r.data().begin() + static_cast<std::ptrdiff_t>(body), r.data().end()));
    const auto stored = tail.le<std::uint64_t>();
    if (stored != fnv1a(r.data().data(), body)) throw CheckpointFormatError("checkpoint checksum mismatch");
  }
  Parsed p;
  const auto mlen = r.le<std::uint64_t>();
  if (mlen > body) throw CheckpointFormatError("manifest length out of range");
  p.manifest = parse_key_values(r.str(static_cast<std::size_t>(mlen)));
  p.config = ModelConfig::from_manifest(p.manifest);
  const auto it = p.manifest.find("config_hash");
  if (it == p.manifest.end() || it->second != hex(p.config.hash())) {
    throw CheckpointFormatError("manifest config_hash does not match its configuration");
  }
  const auto count = r.le<std::uint32_t>();
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto nlen = r.le<std::uint32_t>();
    if (nlen > 4096) throw CheckpointFormatError("tensor name too long");
    std::string name = r.str(nlen);
    const auto rank = r.le<std::uint32_t>();
    if (rank != 2) throw CheckpointFormatError("tensor " + name + " has rank " + std::to_string(rank));
    const auto rows = r.le<std::uint32_t>();
    const auto cols = r.le<std::uint32_t>();
    if (static_cast<std::uint64_t>(rows) * cols * 4 > body) throw CheckpointFormatError("tensor size out of range");
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(r.le<float>());
    p.store.add(std::move(name), std::move(m));
  }
  if (r.pos() != body) throw CheckpointFormatError("trailing bytes before checkpoint trailer");
  return p;
}

std::unique_ptr<Seq2SeqModel> build(Parsed p) {
  try {
    p.config.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointFormatError(std::string("invalid configuration in checkpoint: ") + e.what());
  }
  const auto layout = Seq2SeqModel::layout(p.config);
  if (layout.size() != p.store.size()) throw CheckpointFormatError("checkpoint tensor count does not match its config");
  for (const auto& spec : layout) {
    const ad::Parameter* t = p.store.find(spec.name);
    if (t == nullptr) throw CheckpointFormatError("checkpoint missing tensor " + spec.name);
    if (t->value.rows() != spec.rows || t->value.cols() != spec.cols) {
      throw CheckpointFormatError("tensor " + spec.name + " has the wrong shape");
    }
  }
  auto model = std::make_unique<Seq2SeqModel>(p.config, std::move(p.store));
  try {
    model->set_step_counter(std::stoll(p.manifest.at("step")));
    model->set_seed(std::stoull(p.manifest.at("seed")));
  } catch (const std::exception&) {
    throw CheckpointFormatError("manifest step/seed missing or malformed");
  }
  return model;
}

}  // namespace

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

void save_checkpoint(const Seq2SeqModel& model, const std::filesystem::path& path) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.le<std::uint32_t>(kCheckpointVersion);
  std::ostringstream manifest;
  manifest << "format_version = " << kCheckpointVersion << "\n"
           << model.config().to_manifest() << "config_hash = " << hex(model.config().hash()) << "\n"
           << "step = " << model.step_counter() << "\n"
           << "seed = " << model.seed() << "\n";
  const std::string m = manifest.str();
  w.le<std::uint64_t>(m.size());
  w.bytes(m.data(), m.size());
  const auto& params = model.parameters().all();
  w.le<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.le<std::uint32_t>(static_cast<std::uint32_t>(p.name.size()));
    w.bytes(p.name.data(), p.name.size());
    w.le<std::uint32_t>(2);
    w.le<std::uint32_t>(static_cast<std::uint32_t>(p.value.rows()));
    w.le<std::uint32_t>(static_cast<std::uint32_t>(p.value.cols()));
    for (Eigen::Index i = 0; i < p.value.size(); ++i) w.le<float>(static_cast<float>(p.value.data()[i]));
  }
  const std::uint64_t h = fnv1a(w.data().data(), w.data().size());
  w.le<std::uint64_t>(h);
  w.bytes(kEnd, sizeof(kEnd));

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + ec.message());
}

std::unique_ptr<Seq2SeqModel> load_checkpoint(const std::filesystem::path& path) {
  return build(parse(read_file(path)));
}

std::unique_ptr<Seq2SeqModel> load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  Parsed p = parse(read_file(path));
  if (p.config.hash() != expected.hash()) {
    throw CheckpointFormatError("checkpoint config hash " + hex(p.config.hash()) + " does not match expected " +
                                hex(expected.hash()));
  }
  return build(std::move(p));
}

std::map<std::string, std::string> read_checkpoint_manifest(const std::filesystem::path& path) {
  return parse(read_file(path)).manifest;
}

}  // namespace camrw
