#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "scvm/ad/tape.hpp"
#include "scvm/error.hpp"

namespace scvm::ad {

struct ParamEntry {
  std::string name;
  Index rows = 0;
  Index cols = 0;
  std::size_t offset = 0;

  std::size_t size() const { return static_cast<std::size_t>(rows * cols); }
  bool operator==(const ParamEntry&) const = default;
};

// Flat vector of trainable values plus the named (rows x cols) blocks that
// partition it. Blocks are stored column-major and are contiguous, disjoint
// and cover the whole vector in registration order.
class ParamStore {
 public:
  std::size_t add(std::string name, Index rows, Index cols) {
    if (rows <= 0 || cols <= 0) throw ShapeError("parameter '" + name + "' must have positive shape");
    for (const auto& e : layout_)
      if (e.name == name) throw ArgumentError("duplicate parameter name '" + name + "'");
    layout_.push_back(ParamEntry{std::move(name), rows, cols, values_.size()});
    values_.resize(values_.size() + static_cast<std::size_t>(rows * cols), 0.0);
    return layout_.size() - 1;
  }

  std::size_t size() const { return values_.size(); }
  const std::vector<ParamEntry>& layout() const { return layout_; }
  const std::vector<double>& values() const { return values_; }
  std::vector<double>& values() { return values_; }

  Eigen::Map<Eigen::VectorXd> flat() { return {values_.data(), static_cast<Index>(values_.size())}; }
  Eigen::Map<const Eigen::VectorXd> flat() const { return {values_.data(), static_cast<Index>(values_.size())}; }

  Eigen::Map<Mat> view(std::size_t entry) {
    const auto& e = layout_.at(entry);
    return {values_.data() + e.offset, e.rows, e.cols};
  }
  Eigen::Map<const Mat> view(std::size_t entry) const {
    const auto& e = layout_.at(entry);
    return {values_.data() + e.offset, e.rows, e.cols};
  }

  std::size_t find(std::string_view name) const {
    for (std::size_t i = 0; i < layout_.size(); ++i)
      if (layout_[i].name == name) return i;
    throw ArgumentError("no parameter named '" + std::string(name) + "'");
  }

  bool same_layout(const ParamStore& other) const { return layout_ == other.layout_; }

  void assign(const Eigen::VectorXd& v) {
    if (static_cast<std::size_t>(v.size()) != values_.size()) throw ShapeError("parameter vector length mismatch");
    Eigen::VectorXd::Map(values_.data(), v.size()) = v;
  }

 private:
  std::vector<ParamEntry> layout_;
  std::vector<double> values_;
};

// Parameters copied onto a tape, one leaf per layout entry.
struct BoundParams {
  std::vector<Var> vars;
  const Var& operator[](std::size_t i) const { return vars[i]; }
};

inline BoundParams bind(Tape& tape, const ParamStore& store, bool requires_grad) {
  BoundParams b;
  b.vars.reserve(store.layout().size());
  for (std::size_t i = 0; i < store.layout().size(); ++i) b.vars.push_back(tape.leaf(store.view(i), requires_grad));
  return b;
}

inline Eigen::VectorXd collect_grad(const Tape& tape, const BoundParams& bound, const ParamStore& store) {
  Eigen::VectorXd g(static_cast<Index>(store.size()));
  for (std::size_t i = 0; i < store.layout().size(); ++i) {
    const auto& e = store.layout()[i];
    const Mat gi = tape.grad(bound[i]);
    g.segment(static_cast<Index>(e.offset), static_cast<Index>(e.size())) = Eigen::Map<const Eigen::VectorXd>(gi.data(), gi.size());
  }
  return g;
}

// ---------------------------------------------------------------------------
// Binary parameter file. All integers and reals are little-endian.
//
//   bytes  0..7   magic "SCVMPRM\0"
//   u32           format version (currently 1)
//   u32 + bytes   description (UTF-8, free text)
//   u32           number of layout entries
//   per entry:    u32 name length, name bytes, u64 rows, u64 cols
//   u64           number of values
//   f64 * n       values in layout order, each block column-major

inline constexpr std::uint32_t kParamFormatVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, sizeof v);
  put_u64(out, v);
}

class Reader {
 public:
  explicit Reader(const std::string& buf) : buf_(buf) {}
  std::uint64_t uint(int bytes) {
    need(bytes);
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += bytes;
    return v;
  }
  double f64() {
    const std::uint64_t v = uint(8);
    double d;
    std::memcpy(&d, &v, sizeof d);
    return d;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw ArgumentError("parameter file truncated");
  }
  const std::string& buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize(const ParamStore& store, const std::string& description) {
  std::string out = std::string("SCVMPRM") + '\0';
  detail::put_u32(out, kParamFormatVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(description.size()));
  out += description;
  detail::put_u32(out, static_cast<std::uint32_t>(store.layout().size()));
  for (const auto& e : store.layout()) {
    detail::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    detail::put_u64(out, static_cast<std::uint64_t>(e.rows));
    detail::put_u64(out, static_cast<std::uint64_t>(e.cols));
  }
  detail::put_u64(out, store.size());
  for (double v : store.values()) detail::put_f64(out, v);
  return out;
}

struct LoadedParams {
  ParamStore store;
  std::string description;
};

inline LoadedParams deserialize(const std::string& buf) {
  detail::Reader r(buf);
  if (r.bytes(8) != std::string("SCVMPRM") + '\0') throw ArgumentError("not a parameter file (bad magic)");
  const auto version = r.uint(4);
  if (version != kParamFormatVersion) throw ArgumentError("unsupported parameter file version " + std::to_string(version));
  LoadedParams out;
  out.description = r.bytes(r.uint(4));
  const auto n_entries = r.uint(4);
  for (std::uint64_t i = 0; i < n_entries; ++i) {
    std::string name = r.bytes(r.uint(4));
    const auto rows = static_cast<Index>(r.uint(8));
    const auto cols = static_cast<Index>(r.uint(8));
    out.store.add(std::move(name), rows, cols);
  }
  const auto n = r.uint(8);
  if (n != out.store.size()) throw ShapeError("parameter count does not match layout");
  for (auto& v : out.store.values()) v = r.f64();
  if (!r.done()) throw ArgumentError("trailing bytes in parameter file");
  return out;
}

inline void save_params(const std::string& path, const ParamStore& store, const std::string& description) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ArgumentError("cannot open '" + path + "' for writing");
  const std::string buf = serialize(store, description);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline LoadedParams load_params(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArgumentError("cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize(buf);
}

}  // namespace scvm::ad
