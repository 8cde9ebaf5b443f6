#include "fedsim/fault.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "fedsim/error.hpp"
#include "fedsim/hash.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

void WeibullModel::validate() const {
  if (!(lambda_s > 0.0) || !(k > 0.0)) throw Error("weibull: lambda and k must be positive");
}

double weibull_cdf(double t_s, const WeibullModel& model) {
  model.validate();
  if (!(t_s >= 0.0)) throw Error("weibull: t must be >= 0");
  if (t_s == 0.0) return 0.0;
  return -std::expm1(-std::pow(t_s / model.lambda_s, model.k));
}

double weibull_conditional_time(const WeibullModel& model, double horizon_s, double u) {
  const double p = weibull_cdf(horizon_s, model);
  if (p <= 0.0) return u * horizon_s;
  const double t = model.lambda_s * std::pow(-std::log1p(-u * p), 1.0 / model.k);
  return std::min(t, horizon_s);
}

void CheckpointPolicy::validate() const {
  if (!(T_s > 0.0)) throw Error("checkpoint: T must be positive");
  if (!(t_c_s > 0.0) || t_c_s > T_s) throw Error("checkpoint: t_c must lie in (0, T]");
  if (!(t_r_s >= 0.0)) throw Error("checkpoint: t_r must be >= 0");
}

double checkpoint_cost(double t_c_s, const CheckpointPolicy& policy, const WeibullModel& model) {
  if (!(t_c_s > 0.0) || t_c_s > policy.T_s) throw Error("checkpoint_cost: t_c must lie in (0, T]");
  return t_c_s / policy.T_s + weibull_cdf(t_c_s, model) * policy.t_r_s / policy.T_s;
}

double optimal_interval(const CheckpointPolicy& policy, const WeibullModel& model, double grid_s) {
  if (!(grid_s > 0.0)) throw Error("optimal_interval: grid resolution must be positive");
  if (!(policy.T_s > 0.0)) throw Error("optimal_interval: T must be positive");
  if (grid_s > policy.T_s) return policy.T_s;
  const double steps = std::floor(policy.T_s / grid_s * (1.0 + 1e-12));
  if (steps > 1e8) throw Error("optimal_interval: grid too fine");
  const auto n = static_cast<std::uint64_t>(steps);

  double best_t = grid_s;
  double best_c = std::numeric_limits<double>::infinity();
  for (std::uint64_t i = 1; i <= n; ++i) {
    const double t = std::min(static_cast<double>(i) * grid_s, policy.T_s);
    const double c = checkpoint_cost(t, policy, model);
    if (c < best_c) {
      best_c = c;
      best_t = t;
    }
  }
  // T itself is a candidate even when it is not a grid multiple.
  if (static_cast<double>(n) * grid_s < policy.T_s) {
    if (checkpoint_cost(policy.T_s, policy, model) < best_c) best_t = policy.T_s;
  }
  return best_t;
}

DropoutSchedule::DropoutSchedule(double rate, std::uint64_t seed) : rate_(rate), seed_(seed) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw Error("dropout: rate must lie in [0, 1]");
}

bool DropoutSchedule::fails(std::size_t client, std::size_t round) const {
  if (rate_ <= 0.0) return false;
  Engine e = make_engine(derive_seed(seed_, Stream::dropout, {client, round, 0}));
  return uniform01(e) < rate_;
}

double DropoutSchedule::failure_fraction(std::size_t client, std::size_t round) const {
  Engine e = make_engine(derive_seed(seed_, Stream::failure_point, {client, round}));
  return uniform01(e);
}

std::vector<std::vector<bool>> inject_dropout(std::size_t num_clients, std::size_t num_rounds,
                                              double rate, std::uint64_t seed) {
  DropoutSchedule s(rate, seed);
  std::vector<std::vector<bool>> out(num_clients, std::vector<bool>(num_rounds));
  for (std::size_t c = 0; c < num_clients; ++c) {
    for (std::size_t r = 0; r < num_rounds; ++r) out[c][r] = s.fails(c, r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint blob
//
//   "FSCK" | u32 version | sections... | u64 digest
//   section: u32 tag | u64 length | payload
// All integers little-endian; the digest covers every preceding byte.

namespace {

constexpr char kMagic[4] = {'F', 'S', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;
enum : std::uint32_t { kMeta = 1, kParams = 2, kOptim = 3, kProgress = 4 };

class Writer {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::byte*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  template <class T>
  void put(T v) {
    static_assert(std::endian::native == std::endian::little);
    raw(&v, sizeof v);
  }
  std::size_t begin_section(std::uint32_t tag) {
    put(tag);
    put<std::uint64_t>(0);
    return buf_.size();
  }
  void end_section(std::size_t start) {
    const std::uint64_t len = buf_.size() - start;
    std::memcpy(buf_.data() + start - sizeof len, &len, sizeof len);
  }
  std::vector<std::byte> take() { return std::move(buf_); }
  std::vector<std::byte>& buf() { return buf_; }

 private:
  std::vector<std::byte> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::byte> data) : data_(data) {}
  void raw(void* p, std::size_t n) {
    if (pos_ + n > data_.size()) throw CheckpointError("checkpoint: truncated blob");
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  template <class T>
  T get() {
    T v;
    raw(&v, sizeof v);
    return v;
  }
  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) { pos_ = p; }

 private:
  std::span<const std::byte> data_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t blob_digest(std::span<const std::byte> bytes) {
  // FNV-1a over little-endian 64-bit words, then over the trailing bytes.
  std::uint64_t h = Fnv1a::kOffset;
  std::size_t i = 0;
  for (; i + 8 <= bytes.size(); i += 8) {
    std::uint64_t w;
    std::memcpy(&w, bytes.data() + i, 8);
    h = (h ^ w) * Fnv1a::kPrime;
  }
  for (; i < bytes.size(); ++i) h = (h ^ static_cast<std::uint64_t>(bytes[i])) * Fnv1a::kPrime;
  return h;
}

std::vector<std::byte> save_checkpoint(const Checkpoint& c) {
  Writer w;
  w.buf().reserve(64 + c.params.size() * sizeof(double) + 96);
  w.raw(kMagic, 4);
  w.put(kVersion);

  auto s = w.begin_section(kMeta);
  w.put(c.scope);
  w.put(c.round);
  w.put(c.params.spec_digest);
  w.end_section(s);

  s = w.begin_section(kParams);
  w.put<std::uint64_t>(c.params.size());
  w.raw(c.params.values.data(), c.params.size() * sizeof(double));
  w.end_section(s);

  s = w.begin_section(kOptim);
  w.put(c.lr);
  w.put(c.rng_seed);
  w.end_section(s);

  s = w.begin_section(kProgress);
  w.put(c.progress.epoch);
  w.put(c.progress.batch);
  w.put(c.progress.steps);
  w.put(c.progress.elapsed_s);
  w.end_section(s);

  const std::uint64_t digest = blob_digest(w.buf());
  w.put(digest);
  return w.take();
}

Checkpoint restore_checkpoint(std::span<const std::byte> blob) {
  if (blob.size() < 4 + 4 + 8) throw CheckpointError("checkpoint: truncated blob");
  const std::size_t body = blob.size() - 8;
  std::uint64_t stored;
  std::memcpy(&stored, blob.data() + body, 8);
  if (blob_digest(blob.first(body)) != stored) throw CheckpointError("checkpoint: digest mismatch");

  Reader r(blob.first(body));
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError("checkpoint: bad magic");
  if (r.get<std::uint32_t>() != kVersion) throw CheckpointError("checkpoint: unsupported version");

  Checkpoint c;
  unsigned seen = 0;
  while (r.pos() < body) {
    const auto tag = r.get<std::uint32_t>();
    const auto len = r.get<std::uint64_t>();
    const std::size_t start = r.pos();
    if (len > body - start) throw CheckpointError("checkpoint: section overruns blob");
    switch (tag) {
      case kMeta:
        c.scope = r.get<std::int64_t>();
        c.round = r.get<std::uint64_t>();
        c.params.spec_digest = r.get<std::uint64_t>();
        break;
      case kParams: {
        const auto n = r.get<std::uint64_t>();
        if (n * sizeof(double) != len - 8) throw CheckpointError("checkpoint: parameter length mismatch");
        c.params.values.resize(n);
        r.raw(c.params.values.data(), n * sizeof(double));
        break;
      }
      case kOptim:
        c.lr = r.get<double>();
        c.rng_seed = r.get<std::uint64_t>();
        break;
      case kProgress:
        c.progress.epoch = r.get<std::uint64_t>();
        c.progress.batch = r.get<std::uint64_t>();
        c.progress.steps = r.get<std::uint64_t>();
        c.progress.elapsed_s = r.get<double>();
        break;
      default:
        break;  // unknown sections are skipped
    }
    if (tag >= kMeta && tag <= kProgress) seen |= 1U << tag;
    r.seek(start + len);
  }
  if (seen != 0b11110) throw CheckpointError("checkpoint: missing section");
  return c;
}

std::string checkpoint_name(std::int64_t scope, std::uint64_t round, std::uint64_t seq) {
  std::string s = scope == Checkpoint::kGlobalScope ? "global" : "client" + std::to_string(scope);
  return s + "-" + std::to_string(round) + "-" + std::to_string(seq) + ".ckpt";
}

namespace {

std::int64_t scope_of(const std::string& name) {
  if (name.rfind("global-", 0) == 0) return Checkpoint::kGlobalScope;
  if (name.rfind("client", 0) == 0) return std::stoll(name.substr(6, name.find('-') - 6));
  throw Error("checkpoint: unrecognized name '" + name + "'");
}

}  // namespace

void MemoryCheckpointStore::put(const std::string& name, std::vector<std::byte> blob) {
  auto& newest = latest_[scope_of(name)];
  if (!retain_all_ && !newest.empty() && newest != name) blobs_.erase(newest);
  newest = name;
  blobs_[name] = std::move(blob);
}

std::optional<std::vector<std::byte>> MemoryCheckpointStore::get(const std::string& name) const {
  auto it = blobs_.find(name);
  if (it == blobs_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::string> MemoryCheckpointStore::latest(std::int64_t scope) const {
  auto it = latest_.find(scope);
  if (it == latest_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::byte>* MemoryCheckpointStore::find_mutable(const std::string& name) {
  auto it = blobs_.find(name);
  return it == blobs_.end() ? nullptr : &it->second;
}

DirectoryCheckpointStore::DirectoryCheckpointStore(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
}

namespace {

void atomic_write(const std::filesystem::path& path, std::span<const std::byte> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("checkpoint: cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

void DirectoryCheckpointStore::put(const std::string& name, std::vector<std::byte> blob) {
  atomic_write(dir_ / name, blob);
  manifest_[name] = blob_digest(blob);
  latest_[scope_of(name)] = name;
  write_manifest();
}

std::optional<std::vector<std::byte>> DirectoryCheckpointStore::get(const std::string& name) const {
  std::ifstream in(dir_ / name, std::ios::binary);
  if (!in) return std::nullopt;
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> out(raw.size());
  std::memcpy(out.data(), raw.data(), raw.size());
  return out;
}

std::optional<std::string> DirectoryCheckpointStore::latest(std::int64_t scope) const {
  auto it = latest_.find(scope);
  if (it == latest_.end()) return std::nullopt;
  return it->second;
}

void DirectoryCheckpointStore::write_manifest() const {
  std::ostringstream os;
  for (const auto& [name, digest] : manifest_) {
    os << name << ' ' << std::hex << std::setw(16) << std::setfill('0') << digest << std::dec << '\n';
  }
  const std::string text = os.str();
  atomic_write(dir_ / "checkpoints.manifest",
               std::as_bytes(std::span<const char>(text.data(), text.size())));
}

}  // namespace fedsim
