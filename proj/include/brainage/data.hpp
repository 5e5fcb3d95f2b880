#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "brainage/tensor.hpp"

namespace brainage {

enum class Sex { Male, Female };
enum class Group { HC, MCI, AD };

std::string to_string(Sex sex);
std::string to_string(Group group);
/// "male"/"female" and "HC"/"MCI"/"AD"; ConfigError otherwise.
Sex parse_sex(const std::string& text);
Group parse_group(const std::string& text);

/// Scalar field with x fastest: index = x + dx * (y + dy * z).
struct Volume {
  std::array<std::uint32_t, 3> dims{};  // dx, dy, dz
  std::vector<double> voxels;

  Volume() = default;
  explicit Volume(std::array<std::uint32_t, 3> dims, double fill = 0.0);

  std::size_t size() const { return voxels.size(); }
  double& at(std::size_t x, std::size_t y, std::size_t z) {
    return voxels[x + dims[0] * (y + dims[1] * z)];
  }
  double at(std::size_t x, std::size_t y, std::size_t z) const {
    return voxels[x + dims[0] * (y + dims[1] * z)];
  }
  /// Throws DimensionError on a size mismatch and NumericError on
  /// non-finite voxels.
  void validate() const;
  bool operator==(const Volume&) const = default;
};

/// "VOL1", three u32 dims, then f64 voxels; little-endian.
void volume_write(const Volume& volume, const std::filesystem::path& path);
Volume volume_read(const std::filesystem::path& path);

using Mask = std::vector<std::uint8_t>;

/// Strictly positive voxels.
Mask brain_mask(const Volume& volume);
/// Standardizes in-mask voxels to mean 0 and (population) std 1 and zeroes
/// the rest. Throws PreconditionError for an empty mask or zero variance.
Volume normalize(const Volume& volume, const Mask& mask);
Volume normalize(const Volume& volume);

struct SampleRecord {
  std::string subject_id;
  std::string scan_id;
  double age = 0.0;
  Sex sex = Sex::Male;
  Group group = Group::HC;
  std::string path;  // relative to the manifest's directory unless absolute
  bool operator==(const SampleRecord&) const = default;
};

/// CSV with header subject_id,scan_id,age,sex,group,path. Ages are written
/// with round-trip precision.
void write_manifest(const std::vector<SampleRecord>& records, const std::filesystem::path& path);
/// Throws FormatError naming the line for malformed rows.
std::vector<SampleRecord> read_manifest(const std::filesystem::path& path);

struct PhantomParams {
  std::size_t n_subjects = 300;
  std::size_t scans_per_subject = 1;
  std::array<std::uint32_t, 3> dims{32, 40, 32};
  double age_lo = 20.0;
  double age_hi = 90.0;
  double noise_sigma = 0.1;
  /// Fractions of subjects in HC, MCI and AD (rounded to counts; the
  /// remainder goes to HC).
  std::array<double, 3> group_fractions{1.0, 0.0, 0.0};
  double mci_shift = 3.5;  // years added to the effective age
  double ad_shift = 7.8;
  std::uint64_t seed = 0;
  void validate() const;
};

/// Geometry of one phantom; sizes in voxels.
struct PhantomGeometry {
  std::array<double, 3> semi_axes{};
  double shell_thickness = 0.0;
  double ventricle_radius = 0.0;
};

/// Head-like ellipsoid: a bright cortical shell that thins with effective
/// age, a darker ventricle that grows with it, and a sex-dependent scale.
PhantomGeometry phantom_geometry(std::array<std::uint32_t, 3> dims, double effective_age, Sex sex);
/// Renders the geometry; Gaussian noise is added inside the head only and
/// clamped so the brain mask stays the head.
Volume phantom_render(std::array<std::uint32_t, 3> dims, double effective_age, Sex sex,
                      double noise_sigma, std::mt19937_64& rng);

struct ShellCounts {
  std::size_t head = 0, shell = 0, ventricle = 0;
};
/// Voxel counts of the noise-free tissue classes.
ShellCounts phantom_counts(const Volume& noise_free);

double effective_age(double age, Group group, const PhantomParams& params);

/// Writes volumes under `dir`/volumes and returns the manifest rows (paths
/// relative to `dir`). Deterministic given the parameters.
std::vector<SampleRecord> phantom_generate(const PhantomParams& params,
                                           const std::filesystem::path& dir);

struct Splits {
  std::vector<SampleRecord> train, val, test;
};

/// Shuffles subjects (not scans) and partitions them by `fractions`.
/// Throws PreconditionError when fractions do not sum to 1 and when there
/// are fewer subjects than splits.
Splits split_subject_level(const std::vector<SampleRecord>& manifest,
                           std::array<double, 3> fractions = {0.70, 0.15, 0.15},
                           std::uint64_t seed = 0);

/// Normalized scans stacked as [N,1,dz,dy,dx] with matching ages, sexes and
/// brain masks.
struct Dataset {
  Array volumes;
  std::vector<double> ages;
  std::vector<Sex> sexes;
  std::vector<Mask> masks;
  std::vector<SampleRecord> records;
  std::size_t size() const { return ages.size(); }
  /// Subset in the given order.
  Dataset subset(std::span<const std::size_t> rows) const;
};

/// Loads and normalizes every record; relative paths resolve against
/// `base`. All volumes must share dims.
Dataset load_dataset(const std::vector<SampleRecord>& records, const std::filesystem::path& base);
Dataset make_dataset(const std::vector<Volume>& raw, const std::vector<SampleRecord>& records);

/// [1,1,dz,dy,dx] view of a volume's voxels (same memory order).
Array volume_to_array(const Volume& volume);
Volume array_to_volume(const Array& a, std::size_t sample = 0);

}  // namespace brainage
