#include "refprior/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "refprior/error.hpp"

namespace refprior {

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <class U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& data) : data_(data) {}

  std::size_t pos() const { return pos_; }
  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n)
      throw Error(ErrorKind::Format, std::string("checkpoint truncated reading ") + what,
                  data_.size());
  }
  template <class U>
  U uint(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(data_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::string text(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  const std::vector<std::uint8_t>& data_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint) {
  Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.uint<std::uint32_t>(checkpoint.format_version);
  w.uint<std::uint64_t>(checkpoint.config_text.size());
  w.bytes(checkpoint.config_text.data(), checkpoint.config_text.size());
  w.uint<std::uint64_t>(checkpoint.tensors.size());
  for (const auto& [name, t] : checkpoint.tensors) {
    w.uint<std::uint64_t>(name.size());
    w.bytes(name.data(), name.size());
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(t.dtype()));
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.uint<std::uint64_t>(static_cast<std::uint64_t>(d));
    if (t.dtype() == Dtype::f32) {
      for (float v : t.data<float>()) w.uint<std::uint32_t>(std::bit_cast<std::uint32_t>(v));
    } else {
      for (double v : t.data<double>()) w.uint<std::uint64_t>(std::bit_cast<std::uint64_t>(v));
    }
  }
  return w.take();
}

Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw Error(ErrorKind::Format, "not a checkpoint (bad magic)", 0);
  r.text(4, "magic");
  Checkpoint ck;
  const std::size_t version_at = r.pos();
  ck.format_version = r.uint<std::uint32_t>("format version");
  if (ck.format_version != kCheckpointVersion)
    throw Error(ErrorKind::Format,
                "unsupported checkpoint format version " + std::to_string(ck.format_version) +
                    " (expected " + std::to_string(kCheckpointVersion) + ")",
                version_at);
  const auto config_len = r.uint<std::uint64_t>("config length");
  ck.config_text = r.text(config_len, "config text");
  const auto count = r.uint<std::uint64_t>("tensor count");
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto name_len = r.uint<std::uint64_t>("tensor name length");
    std::string name = r.text(name_len, "tensor name");
    const std::size_t dtype_at = r.pos();
    const auto code = r.uint<std::uint8_t>("dtype");
    if (code > 1)
      throw Error(ErrorKind::Format, "tensor '" + name + "' has unknown dtype code " +
                                         std::to_string(code), dtype_at);
    const auto dtype = static_cast<Dtype>(code);
    const auto rank = r.uint<std::uint32_t>("rank");
    Shape shape;
    std::uint64_t count_values = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const std::size_t dim_at = r.pos();
      const auto d = r.uint<std::uint64_t>("dims");
      if (d > (std::uint64_t{1} << 40) || (d != 0 && count_values > (std::uint64_t{1} << 40) / d))
        throw Error(ErrorKind::Format, "tensor '" + name + "' has implausible dims", dim_at);
      count_values *= d;
      shape.push_back(static_cast<std::int64_t>(d));
    }
    r.need(count_values * (dtype == Dtype::f32 ? 4 : 8), "tensor values");
    Tensor t = Tensor::zeros(shape, dtype);
    if (dtype == Dtype::f32) {
      for (float& v : t.data<float>()) v = std::bit_cast<float>(r.uint<std::uint32_t>("values"));
    } else {
      for (double& v : t.data<double>()) v = std::bit_cast<double>(r.uint<std::uint64_t>("values"));
    }
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (r.pos() != bytes.size())
    throw Error(ErrorKind::Format, "trailing bytes after checkpoint tensor table", r.pos());
  return ck;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::Io, "write failed for '" + path.string() + "'");
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    fail(ErrorKind::Io, "checkpoint '" + path.string() + "' does not exist");
  try {
    return parse_checkpoint(read_file_bytes(path));
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::Format) throw;
    throw Error(ErrorKind::Format, path.string() + ": " + e.message(), e.offset());
  }
}

void assign_parameters(ParameterSet& params, const std::vector<ParameterSet::Entry>& tensors,
                       const std::string& source) {
  if (tensors.size() != params.size())
    fail(ErrorKind::Format, source + ": checkpoint holds " + std::to_string(tensors.size()) +
                                " tensors, model expects " + std::to_string(params.size()));
  for (const auto& [name, value] : tensors) {
    if (!params.contains(name))
      fail(ErrorKind::Format, source + ": unexpected tensor '" + name + "'");
    Tensor target = params.get(name);
    if (target.shape() != value.shape() || target.dtype() != value.dtype())
      fail(ErrorKind::Format, source + ": tensor '" + name + "' is " + shape_str(value.shape()) +
                                  ", model expects " + shape_str(target.shape()));
    target.storage() = value.storage();
  }
}

}  // namespace refprior
