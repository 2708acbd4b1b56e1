#pragma once

#include <filesystem>

#include "advnorm/volume.hpp"

namespace advnorm::io {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NIfTI-1 single file (.nii). Channels are stored along dim[4]; spacing comes
// from pixdim[1..3]. Reading accepts uint8/int8/int16/uint16/int32/float32/float64
// in either byte order and applies scl_slope/scl_inter.
void write_nifti(const std::filesystem::path& path, const Volume& v);
Volume read_nifti(const std::filesystem::path& path);
void write_nifti_labels(const std::filesystem::path& path, const LabelMap& labels, Spacing spacing);
LabelMap read_nifti_labels(const std::filesystem::path& path);

// Portable raw: little-endian float32, x fastest, channel-major, with a
// "<path>.txt" sidecar holding shape, channels, spacing and dtype.
void write_raw(const std::filesystem::path& path, const Volume& v);
Volume read_raw(const std::filesystem::path& path);
std::filesystem::path raw_sidecar(const std::filesystem::path& path);

/// Dispatch on extension: ".nii" → NIfTI-1, ".raw" → raw.
void save_volume(const std::filesystem::path& path, const Volume& v);
Volume load_volume(const std::filesystem::path& path);
void save_labels(const std::filesystem::path& path, const LabelMap& labels, Spacing spacing);
LabelMap load_labels(const std::filesystem::path& path);

}  // namespace advnorm::io
