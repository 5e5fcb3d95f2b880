#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "brainage/parameters.hpp"
#include "brainage/tensor.hpp"

namespace brainage {

/// Named tensors as stored in a "TSNW" weights file.
using TensorRecords = std::map<std::string, Array>;

inline constexpr std::uint32_t kWeightsFormatVersion = 1;

/// Layout: "TSNW", u32 version, then records until end of file, each
/// u32 name length, name bytes, u32 rank, u32 dims, f64 values. All
/// integers and floats little-endian.
void write_records(const std::filesystem::path& path, const TensorRecords& records);
TensorRecords read_records(const std::filesystem::path& path);

/// Adds every store tensor to `records` under prefix + name.
void export_store(const ParameterStore& store, const std::string& prefix, TensorRecords& records);
/// Copies prefix + name records into an already-built store. Names and
/// shapes must match exactly.
void import_store(const TensorRecords& records, const std::string& prefix, ParameterStore& store);

/// Scalar metadata records.
void put_scalar(TensorRecords& records, const std::string& name, double value);
double get_scalar(const TensorRecords& records, const std::string& name);

}  // namespace brainage
