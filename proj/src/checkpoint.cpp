#include "cel/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace cel {

namespace {

constexpr char kMagic[4] = {'C', 'E', 'L', '1'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void rows(const RowMatrix& m) {
    for (double v : m.values()) f32(v);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  bool done() const { return pos_ == in_.size(); }
  std::uint8_t u8() {
    need(1);
    return in_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_++]) << (8 * i);
    return v;
  }
  double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }
  void magic() {
    need(4);
    if (std::memcmp(in_.data() + pos_, kMagic, 4) != 0) throw Error("checkpoint: bad magic");
    pos_ += 4;
  }
  RowMatrix rows(std::uint64_t n, std::uint64_t r) {
    need_elements(n * r, 4);
    RowMatrix m(n, r);
    for (double& v : m.values()) v = f32();
    return m;
  }
  std::vector<Index> assignment(std::uint64_t n, std::uint64_t k) {
    need_elements(n, 4);
    std::vector<Index> a(n);
    for (auto& v : a) {
      v = u32();
      if (v >= k) throw Error("checkpoint: assignment out of range");
    }
    return a;
  }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw Error("checkpoint: truncated");
  }
  void need_elements(std::uint64_t n, std::size_t width) const {
    if (n > (in_.size() - pos_) / width) throw Error("checkpoint: truncated");
  }

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const EmbeddingModel& model) {
  const ClusteredTable& items = model.items();
  const ClusteredTable& users = model.users();
  Writer w;
  w.bytes(kMagic, 4);
  w.u64(model.num_users());
  w.u64(model.num_items());
  w.u64(items.num_clusters());
  w.u64(model.dim());
  w.u64(items.splits);
  for (Index k : items.state.assignment()) w.u32(k);
  w.rows(users.expanded());
  w.rows(items.embeddings);
  w.u8(model.users_clustered() ? 1 : 0);
  if (model.users_clustered()) {
    w.u64(users.num_clusters());
    w.u64(users.splits);
    for (Index k : users.state.assignment()) w.u32(k);
    w.rows(users.embeddings);
  }
  return w.take();
}

EmbeddingModel decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  r.magic();
  const std::uint64_t n = r.u64();
  const std::uint64_t m = r.u64();
  const std::uint64_t mq = r.u64();
  const std::uint64_t dim = r.u64();
  const std::uint64_t q = r.u64();
  if (dim == 0) throw Error("checkpoint: zero dimension");
  if (mq == 0 && m > 0) throw Error("checkpoint: items without clusters");

  std::vector<Index> item_assign = r.assignment(m, mq);
  RowMatrix a = r.rows(n, dim);
  RowMatrix bq = r.rows(mq, dim);

  ClusteredTable items;
  items.state = ClusterState(std::move(item_assign), mq);
  items.embeddings = std::move(bq);
  items.splits = q;

  ClusteredTable users;
  bool users_clustered = false;
  const std::uint8_t marker = r.done() ? 0 : r.u8();
  if (marker == 1) {
    const std::uint64_t mq_u = r.u64();
    const std::uint64_t q_u = r.u64();
    if (mq_u == 0 && n > 0) throw Error("checkpoint: users without clusters");
    std::vector<Index> user_assign = r.assignment(n, mq_u);
    users.state = ClusterState(std::move(user_assign), mq_u);
    users.embeddings = r.rows(mq_u, dim);
    users.splits = q_u;
    users_clustered = true;
  } else if (marker == 0) {
    users = ClusteredTable::identity(std::move(a));
  } else {
    throw Error("checkpoint: bad user-block marker");
  }
  if (!r.done()) throw Error("checkpoint: trailing bytes");
  return EmbeddingModel(std::move(users), std::move(items), users_clustered);
}

void save_checkpoint(const std::filesystem::path& path, const EmbeddingModel& model) {
  const auto bytes = encode_checkpoint(model);
  write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

EmbeddingModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

void attach_counts(ClusteredTable& table, std::vector<std::size_t> counts) {
  std::vector<Index> assign(table.state.assignment().begin(), table.state.assignment().end());
  table.state = ClusterState(std::move(assign), table.num_clusters(), std::move(counts));
}

}  // namespace cel
