#include "brainage/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

#include "brainage/error.hpp"

namespace brainage {
namespace {

constexpr char kMagic[4] = {'T', 'S', 'N', 'W'};

static_assert(std::endian::native == std::endian::little,
              "weights I/O assumes a little-endian host");

void put_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t get_u32(std::istream& in, const std::string& what) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw FormatError("truncated weights file while reading " + what);
  }
  return v;
}

std::uint32_t checked_u32(std::size_t v, const std::string& what) {
  if (v > std::numeric_limits<std::uint32_t>::max()) throw FormatError(what + " too large");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

void write_records(const std::filesystem::path& path, const TensorRecords& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(kMagic, 4);
  put_u32(out, kWeightsFormatVersion);
  for (const auto& [name, a] : records) {
    put_u32(out, checked_u32(name.size(), "name length"));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, checked_u32(a.shape().size(), "rank"));
    for (std::size_t d : a.shape()) put_u32(out, checked_u32(d, "dimension"));
    out.write(reinterpret_cast<const char*>(a.data()),
              static_cast<std::streamsize>(a.size() * sizeof(double)));
  }
  if (!out) throw FormatError("write failed: " + path.string());
}

TensorRecords read_records(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError(path.string() + " is not a TSNW weights file");
  }
  const std::uint32_t version = get_u32(in, "version");
  if (version != kWeightsFormatVersion) {
    throw FormatError("unsupported weights format version " + std::to_string(version));
  }
  TensorRecords records;
  while (in.peek() != std::char_traits<char>::eof()) {
    const std::uint32_t len = get_u32(in, "name length");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw FormatError("truncated record name");
    const std::uint32_t rank = get_u32(in, "rank");
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(get_u32(in, "dimension"));
    Array a(std::move(shape));
    if (!in.read(reinterpret_cast<char*>(a.data()),
                 static_cast<std::streamsize>(a.size() * sizeof(double)))) {
      throw FormatError("truncated data for record " + name);
    }
    if (!records.emplace(name, std::move(a)).second) {
      throw FormatError("duplicate record " + name);
    }
  }
  return records;
}

void export_store(const ParameterStore& store, const std::string& prefix, TensorRecords& records) {
  for (const auto& [name, p] : store.entries()) records[prefix + name] = p.value;
}

void import_store(const TensorRecords& records, const std::string& prefix, ParameterStore& store) {
  for (auto& [name, p] : store.entries()) {
    auto it = records.find(prefix + name);
    if (it == records.end()) throw FormatError("weights file lacks " + prefix + name);
    if (it->second.shape() != p.value.shape()) {
      throw FormatError("shape mismatch for " + prefix + name + ": file " +
                        to_string(it->second.shape()) + ", model " + to_string(p.value.shape()));
    }
    p.value = it->second;
  }
}

void put_scalar(TensorRecords& records, const std::string& name, double value) {
  records[name] = Array(Shape{}, value);
}

double get_scalar(const TensorRecords& records, const std::string& name) {
  auto it = records.find(name);
  if (it == records.end()) throw FormatError("weights file lacks " + name);
  if (it->second.size() != 1) throw FormatError(name + " is not a scalar");
  return it->second[0];
}

}  // namespace brainage
