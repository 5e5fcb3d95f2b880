#include "brainage/data.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "brainage/error.hpp"

namespace brainage {
namespace {

static_assert(std::endian::native == std::endian::little,
              "volume I/O assumes a little-endian host");

constexpr char kVolumeMagic[4] = {'V', 'O', 'L', '1'};
constexpr const char* kManifestHeader = "subject_id,scan_id,age,sex,group,path";

std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) fields.push_back(f);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

}  // namespace

std::string to_string(Sex sex) { return sex == Sex::Male ? "male" : "female"; }

std::string to_string(Group group) {
  switch (group) {
    case Group::HC: return "HC";
    case Group::MCI: return "MCI";
    case Group::AD: return "AD";
  }
  return "?";
}

Sex parse_sex(const std::string& text) {
  if (text == "male") return Sex::Male;
  if (text == "female") return Sex::Female;
  throw ConfigError("unknown sex '" + text + "' (expected male or female)");
}

Group parse_group(const std::string& text) {
  if (text == "HC") return Group::HC;
  if (text == "MCI") return Group::MCI;
  if (text == "AD") return Group::AD;
  throw ConfigError("unknown group '" + text + "' (expected HC, MCI or AD)");
}

// ---------------------------------------------------------------------------
// volumes
// ---------------------------------------------------------------------------

Volume::Volume(std::array<std::uint32_t, 3> d, double fill)
    : dims(d), voxels(std::size_t{d[0]} * d[1] * d[2], fill) {}

void Volume::validate() const {
  if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0) throw DimensionError("volume has a zero dim");
  if (voxels.size() != std::size_t{dims[0]} * dims[1] * dims[2]) {
    throw DimensionError("volume holds " + std::to_string(voxels.size()) +
                         " voxels, dims require " +
                         std::to_string(std::size_t{dims[0]} * dims[1] * dims[2]));
  }
  for (double v : voxels)
    if (!std::isfinite(v)) throw NumericError("volume contains a non-finite voxel");
}

void volume_write(const Volume& volume, const std::filesystem::path& path) {
  volume.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(kVolumeMagic, 4);
  out.write(reinterpret_cast<const char*>(volume.dims.data()), 3 * sizeof(std::uint32_t));
  out.write(reinterpret_cast<const char*>(volume.voxels.data()),
            static_cast<std::streamsize>(volume.voxels.size() * sizeof(double)));
  if (!out) throw FormatError("write failed: " + path.string());
}

Volume volume_read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kVolumeMagic, 4) != 0) {
    throw FormatError(path.string() + " is not a VOL1 volume");
  }
  std::array<std::uint32_t, 3> dims{};
  if (!in.read(reinterpret_cast<char*>(dims.data()), 3 * sizeof(std::uint32_t))) {
    throw FormatError("truncated volume header in " + path.string());
  }
  if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0) {
    throw FormatError("zero dim in " + path.string());
  }
  Volume v(dims);
  if (!in.read(reinterpret_cast<char*>(v.voxels.data()),
               static_cast<std::streamsize>(v.voxels.size() * sizeof(double)))) {
    throw FormatError("truncated voxel data in " + path.string());
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError("trailing bytes after voxel data in " + path.string());
  }
  return v;
}

Mask brain_mask(const Volume& volume) {
  Mask m(volume.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = volume.voxels[i] > 0.0 ? 1 : 0;
  return m;
}

Volume normalize(const Volume& volume, const Mask& mask) {
  if (mask.size() != volume.size()) throw DimensionError("normalize: mask size differs");
  std::size_t n = 0;
  double sum = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) {
      ++n;
      sum += volume.voxels[i];
    }
  if (n == 0) throw PreconditionError("normalize: empty brain mask");
  const double mean = sum / static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) ss += (volume.voxels[i] - mean) * (volume.voxels[i] - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n));
  if (!(sd > 0.0)) throw PreconditionError("normalize: zero variance inside the brain mask");
  Volume out(volume.dims);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) out.voxels[i] = (volume.voxels[i] - mean) / sd;
  return out;
}

Volume normalize(const Volume& volume) { return normalize(volume, brain_mask(volume)); }

// ---------------------------------------------------------------------------
// manifests
// ---------------------------------------------------------------------------

void write_manifest(const std::vector<SampleRecord>& records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << kManifestHeader << '\n';
  for (const SampleRecord& r : records) {
    for (const std::string* s : {&r.subject_id, &r.scan_id, &r.path}) {
      if (s->find_first_of(",\n") != std::string::npos) {
        throw FormatError("manifest field contains a comma or newline: " + *s);
      }
    }
    out << r.subject_id << ',' << r.scan_id << ',' << format_double(r.age) << ','
        << to_string(r.sex) << ',' << to_string(r.group) << ',' << r.path << '\n';
  }
  if (!out) throw FormatError("write failed: " + path.string());
}

std::vector<SampleRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kManifestHeader) {
    throw FormatError(path.string() + ":1: expected header " + kManifestHeader);
  }
  std::vector<SampleRecord> records;
  for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    const auto f = split_csv(line);
    if (f.size() != 6) {
      throw FormatError(where + "expected 6 fields, got " + std::to_string(f.size()));
    }
    SampleRecord r;
    r.subject_id = f[0];
    r.scan_id = f[1];
    const auto parsed = std::from_chars(f[2].data(), f[2].data() + f[2].size(), r.age);
    if (parsed.ec != std::errc() || parsed.ptr != f[2].data() + f[2].size() ||
        !std::isfinite(r.age)) {
      throw FormatError(where + "bad age '" + f[2] + "'");
    }
    try {
      r.sex = parse_sex(f[3]);
      r.group = parse_group(f[4]);
    } catch (const ConfigError& e) {
      throw FormatError(where + e.what());
    }
    r.path = f[5];
    if (r.subject_id.empty() || r.scan_id.empty() || r.path.empty()) {
      throw FormatError(where + "empty identifier or path");
    }
    records.push_back(std::move(r));
  }
  return records;
}

// ---------------------------------------------------------------------------
// phantoms
// ---------------------------------------------------------------------------

void PhantomParams::validate() const {
  if (n_subjects == 0 || scans_per_subject == 0) {
    throw ConfigError("phantom: subject and scan counts must be >= 1");
  }
  if (!(age_lo < age_hi)) throw ConfigError("phantom: age range must satisfy lo < hi");
  if (!(noise_sigma >= 0.0)) throw ConfigError("phantom: noise_sigma must be >= 0");
  double total = 0.0;
  for (double f : group_fractions) {
    if (!(f >= 0.0)) throw ConfigError("phantom: group fractions must be >= 0");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("phantom: group fractions must sum to 1");
  for (std::uint32_t d : dims)
    if (d < 16) throw ConfigError("phantom: dims must be >= 16 per axis");
}

// Semi-axes take 35% of each extent; shell thickness and ventricle radius
// are linear in age over the reference span 20..90 years and scale with the
// head size. The thickness is divided by the squared sex scale so the shell
// volume, not its width, is what sex leaves unchanged.
PhantomGeometry phantom_geometry(std::array<std::uint32_t, 3> dims, double age, Sex sex) {
  for (std::uint32_t d : dims)
    if (d < 16) throw ConfigError("phantom: dims must be >= 16 per axis");
  const double scale = sex == Sex::Male ? 1.0 : 0.97;
  PhantomGeometry g;
  double mean_axis = 0.0;
  for (int a = 0; a < 3; ++a) {
    g.semi_axes[a] = 0.35 * dims[a] * scale;
    mean_axis += 0.35 * dims[a] / 3.0;
  }
  const double unit = mean_axis / 12.0;
  const double t = std::clamp((age - 20.0) / 70.0, -0.25, 1.25);
  g.shell_thickness = unit * (4.5 - 3.0 * t) / (scale * scale);
  g.ventricle_radius = unit * (1.5 + 4.0 * t);
  return g;
}

namespace {

constexpr double kTissue = 0.6, kShell = 1.0, kVentricle = 0.25;

Volume render(std::array<std::uint32_t, 3> dims, const PhantomGeometry& g) {
  Volume v(dims);
  const double mean_axis = (g.semi_axes[0] + g.semi_axes[1] + g.semi_axes[2]) / 3.0;
  const double shell_inner = 1.0 - g.shell_thickness / mean_axis;
  const double c[3] = {(dims[0] - 1) / 2.0, (dims[1] - 1) / 2.0, (dims[2] - 1) / 2.0};
  for (std::size_t z = 0; z < dims[2]; ++z)
    for (std::size_t y = 0; y < dims[1]; ++y)
      for (std::size_t x = 0; x < dims[0]; ++x) {
        const double p[3] = {x - c[0], y - c[1], z - c[2]};
        double r2 = 0.0, d2 = 0.0;
        for (int a = 0; a < 3; ++a) {
          r2 += (p[a] / g.semi_axes[a]) * (p[a] / g.semi_axes[a]);
          d2 += p[a] * p[a];
        }
        if (r2 > 1.0) continue;
        double value = std::sqrt(r2) > shell_inner ? kShell : kTissue;
        if (std::sqrt(d2) <= g.ventricle_radius) value = kVentricle;
        v.at(x, y, z) = value;
      }
  return v;
}

}  // namespace

Volume phantom_render(std::array<std::uint32_t, 3> dims, double age, Sex sex, double noise_sigma,
                      std::mt19937_64& rng) {
  Volume v = render(dims, phantom_geometry(dims, age, sex));
  if (noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, noise_sigma);
    for (double& x : v.voxels)
      if (x > 0.0) x = std::max(x + noise(rng), 0.01);
  }
  return v;
}

ShellCounts phantom_counts(const Volume& v) {
  ShellCounts c;
  for (double x : v.voxels) {
    if (x > 0.0) ++c.head;
    if (x == kShell) ++c.shell;
    if (x == kVentricle) ++c.ventricle;
  }
  return c;
}

double effective_age(double age, Group group, const PhantomParams& params) {
  switch (group) {
    case Group::HC: return age;
    case Group::MCI: return age + params.mci_shift;
    case Group::AD: return age + params.ad_shift;
  }
  return age;
}

std::vector<SampleRecord> phantom_generate(const PhantomParams& params,
                                           const std::filesystem::path& dir) {
  params.validate();
  std::filesystem::create_directories(dir / "volumes");
  std::mt19937_64 rng(params.seed);

  const std::size_t n = params.n_subjects;
  const auto count = [&](double f) { return static_cast<std::size_t>(std::llround(f * n)); };
  const std::size_t n_mci = count(params.group_fractions[1]);
  const std::size_t n_ad = std::min(count(params.group_fractions[2]), n - std::min(n, n_mci));
  std::vector<Group> groups(n, Group::HC);
  std::fill_n(groups.begin(), std::min(n, n_mci), Group::MCI);
  std::fill_n(groups.begin() + std::min(n, n_mci), n_ad, Group::AD);
  std::shuffle(groups.begin(), groups.end(), rng);

  std::uniform_real_distribution<double> age_dist(params.age_lo, params.age_hi);
  std::bernoulli_distribution female(0.5);
  const int width = std::max<int>(4, static_cast<int>(std::to_string(n).size()));
  std::vector<SampleRecord> records;
  for (std::size_t s = 0; s < n; ++s) {
    std::string id = std::to_string(s + 1);
    id = "sub-" + std::string(width - id.size(), '0') + id;
    const double age = age_dist(rng);
    const Sex sex = female(rng) ? Sex::Female : Sex::Male;
    const double eff = effective_age(age, groups[s], params);
    for (std::size_t k = 0; k < params.scans_per_subject; ++k) {
      SampleRecord r{id, id + "_scan-" + std::to_string(k + 1), age, sex, groups[s], {}};
      r.path = "volumes/" + r.scan_id + ".vol";
      volume_write(phantom_render(params.dims, eff, sex, params.noise_sigma, rng), dir / r.path);
      records.push_back(std::move(r));
    }
  }
  return records;
}

// ---------------------------------------------------------------------------
// splits and datasets
// ---------------------------------------------------------------------------

Splits split_subject_level(const std::vector<SampleRecord>& manifest,
                           std::array<double, 3> fractions, std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw PreconditionError("split fractions must be >= 0");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw PreconditionError("split fractions must sum to 1");
  std::set<std::string> unique;
  for (const auto& r : manifest) unique.insert(r.subject_id);
  std::vector<std::string> subjects(unique.begin(), unique.end());
  const std::size_t n = subjects.size();
  if (n < 3) {
    throw PreconditionError("need at least 3 subjects to split, got " + std::to_string(n));
  }
  std::mt19937_64 rng(seed);
  std::shuffle(subjects.begin(), subjects.end(), rng);

  auto target = [&](double f) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(f * n)));
  };
  std::size_t n_val = target(fractions[1]);
  std::size_t n_test = target(fractions[2]);
  while (n_val + n_test > n - 1) (n_val >= n_test ? n_val : n_test)--;
  std::map<std::string, int> which;
  for (std::size_t i = 0; i < n; ++i) {
    which[subjects[i]] = i < n - n_val - n_test ? 0 : (i < n - n_test ? 1 : 2);
  }
  Splits out;
  for (const auto& r : manifest) {
    switch (which.at(r.subject_id)) {
      case 0: out.train.push_back(r); break;
      case 1: out.val.push_back(r); break;
      default: out.test.push_back(r); break;
    }
  }
  return out;
}

Array volume_to_array(const Volume& volume) {
  volume.validate();
  return Array(Shape{1, 1, volume.dims[2], volume.dims[1], volume.dims[0]}, volume.voxels);
}

Volume array_to_volume(const Array& a, std::size_t sample) {
  if (a.rank() != 5 || a.dim(1) != 1) throw DimensionError("expected [N,1,D,H,W] volumes");
  if (sample >= a.dim(0)) throw DimensionError("sample index out of range");
  Volume v({static_cast<std::uint32_t>(a.dim(4)), static_cast<std::uint32_t>(a.dim(3)),
            static_cast<std::uint32_t>(a.dim(2))});
  const double* p = a.data() + sample * v.size();
  std::copy(p, p + v.size(), v.voxels.begin());
  return v;
}

Dataset make_dataset(const std::vector<Volume>& raw, const std::vector<SampleRecord>& records) {
  if (raw.size() != records.size()) throw DimensionError("one volume per record required");
  if (raw.empty()) throw PreconditionError("dataset is empty");
  const auto dims = raw.front().dims;
  const std::size_t voxels = raw.front().size();
  Dataset d;
  d.volumes = Array(Shape{raw.size(), 1, dims[2], dims[1], dims[0]});
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i].dims != dims) {
      throw DimensionError("scan " + records[i].scan_id + " has different dims");
    }
    Mask mask = brain_mask(raw[i]);
    const Volume v = normalize(raw[i], mask);
    std::copy(v.voxels.begin(), v.voxels.end(), d.volumes.data() + i * voxels);
    d.ages.push_back(records[i].age);
    d.sexes.push_back(records[i].sex);
    d.masks.push_back(std::move(mask));
  }
  d.records = records;
  return d;
}

Dataset load_dataset(const std::vector<SampleRecord>& records, const std::filesystem::path& base) {
  std::vector<Volume> raw;
  raw.reserve(records.size());
  for (const auto& r : records) {
    const std::filesystem::path p(r.path);
    raw.push_back(volume_read(p.is_absolute() ? p : base / p));
  }
  return make_dataset(raw, records);
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset d;
  d.volumes = take_rows(volumes, rows);
  for (std::size_t r : rows) {
    if (r >= size()) throw DimensionError("dataset row out of range");
    d.ages.push_back(ages[r]);
    d.sexes.push_back(sexes[r]);
    d.masks.push_back(masks[r]);
    d.records.push_back(records[r]);
  }
  return d;
}

}  // namespace brainage
