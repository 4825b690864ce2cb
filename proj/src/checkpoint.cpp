#include "lrlab/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "lrlab/errors.hpp"

namespace lrlab {

namespace {

constexpr char kMagic[4] = {'L', 'R', 'L', 'B'};

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>(static_cast<std::uint8_t>(value >> (8 * i))));
  }
}

class Reader {
 public:
  Reader(std::string_view bytes, const std::string& source) : bytes_(bytes), source_(source) {}

  template <typename T>
  T le() {
    need(sizeof(T));
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      value |= static_cast<T>(static_cast<T>(static_cast<std::uint8_t>(bytes_[pos_ + i])) << (8 * i));
    }
    pos_ += sizeof(T);
    return value;
  }

  std::string_view take(std::size_t n) {
    need(n);
    const auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError("checkpoint '" + source_ + "' is truncated at byte " + std::to_string(pos_));
    }
  }

  std::string_view bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace

Digest sha256(std::string_view text) {
  Digest d{};
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), d.data(), &len, EVP_sha256(), nullptr) != 1 || len != d.size()) {
    throw Error("SHA-256 computation failed");
  }
  return d;
}

std::string to_hex(const Digest& d) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s;
  for (std::uint8_t b : d) {
    s.push_back(kHex[b >> 4]);
    s.push_back(kHex[b & 0xF]);
  }
  return s;
}

Digest architecture_digest(const NetworkSpec& spec) {
  NetworkSpec s = spec.unfactorized();
  s.validate();
  std::ostringstream os;
  os << "input " << to_string(s.input) << "\n";
  for (const LayerSpec& l : s.layers) {
    os << to_string(l.kind) << ' ' << l.name << ' ' << l.in << ' ' << l.out << ' ' << l.kernel_h
       << ' ' << l.kernel_w << ' ' << to_string(l.padding) << ' ' << (l.bias ? 1 : 0) << "\n";
  }
  os << "head " << to_string(s.head) << "\n";
  return sha256(os.str());
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, sizeof kMagic);
  put_le<std::uint16_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, ckpt.step);
  out.append(reinterpret_cast<const char*>(ckpt.digest.data()), ckpt.digest.size());
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, m] : ckpt.params.entries()) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_le<std::uint32_t>(out, 2);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
    for (double x : m.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(x));
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes, const std::string& source) {
  Reader in(bytes, source);
  const auto magic = in.take(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) {
    throw FormatError("'" + source + "' is not a checkpoint (bad magic)");
  }
  const auto version = in.le<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("'" + source + "': unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.step = in.le<std::uint64_t>();
  const auto digest = in.take(32);
  std::memcpy(ckpt.digest.data(), digest.data(), 32);
  const auto count = in.le<std::uint32_t>();
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = in.le<std::uint32_t>();
    std::string name(in.take(name_len));
    const auto rank = in.le<std::uint32_t>();
    if (rank < 1 || rank > 2) {
      throw FormatError("'" + source + "': tensor '" + name + "' has unsupported rank " + std::to_string(rank));
    }
    std::size_t rows = 1;
    std::size_t cols = in.le<std::uint32_t>();
    if (rank == 2) {
      rows = cols;
      cols = in.le<std::uint32_t>();
    }
    if (rows == 0 || cols == 0) throw FormatError("'" + source + "': tensor '" + name + "' is empty");
    std::vector<double> values(rows * cols);
    for (double& x : values) x = std::bit_cast<double>(in.le<std::uint64_t>());
    try {
      ckpt.params.insert(std::move(name), Matrix(rows, cols, std::move(values)));
    } catch (const KeyError& e) {
      throw FormatError("'" + source + "': " + e.what());
    }
  }
  if (!in.done()) throw FormatError("'" + source + "': trailing bytes after the last tensor");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    const std::string bytes = encode_checkpoint(ckpt);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("failed writing '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) throw IoError("cannot move checkpoint into place at '" + path + "': " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes, path);
}

}  // namespace lrlab
