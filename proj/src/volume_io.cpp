#include "advnorm/volume_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace advnorm::io {

namespace {

struct Nifti1Header {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1;
  float intent_p2;
  float intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max;
  float cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax;
  std::int32_t glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code;
  std::int16_t sform_code;
  float quatern_b;
  float quatern_c;
  float quatern_d;
  float qoffset_x;
  float qoffset_y;
  float qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
static_assert(sizeof(Nifti1Header) == 348);
static_assert(std::endian::native == std::endian::little, "volume I/O assumes a little-endian host");

constexpr std::int16_t kUint8 = 2;
constexpr std::int16_t kInt16 = 4;
constexpr std::int16_t kInt32 = 8;
constexpr std::int16_t kFloat32 = 16;
constexpr std::int16_t kFloat64 = 64;
constexpr std::int16_t kInt8 = 256;
constexpr std::int16_t kUint16 = 512;

template <typename T>
T byteswap(T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
  std::memcpy(&v, b, sizeof(T));
  return v;
}

void swap_header(Nifti1Header& h) {
  h.sizeof_hdr = byteswap(h.sizeof_hdr);
  for (auto& d : h.dim) d = byteswap(d);
  h.datatype = byteswap(h.datatype);
  h.bitpix = byteswap(h.bitpix);
  for (auto& p : h.pixdim) p = byteswap(p);
  h.vox_offset = byteswap(h.vox_offset);
  h.scl_slope = byteswap(h.scl_slope);
  h.scl_inter = byteswap(h.scl_inter);
}

Nifti1Header make_header(Vec3i shape, int channels, Spacing spacing, std::int16_t datatype, std::int16_t bitpix) {
  Nifti1Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = channels > 1 ? 4 : 3;
  h.dim[1] = static_cast<std::int16_t>(shape.x);
  h.dim[2] = static_cast<std::int16_t>(shape.y);
  h.dim[3] = static_cast<std::int16_t>(shape.z);
  h.dim[4] = static_cast<std::int16_t>(channels);
  for (int i = 5; i < 8; ++i) h.dim[i] = 1;
  h.datatype = datatype;
  h.bitpix = bitpix;
  h.pixdim[0] = 1.0F;
  h.pixdim[1] = static_cast<float>(spacing.x);
  h.pixdim[2] = static_cast<float>(spacing.y);
  h.pixdim[3] = static_cast<float>(spacing.z);
  for (int i = 4; i < 8; ++i) h.pixdim[i] = 1.0F;
  h.vox_offset = 352.0F;
  h.scl_slope = 1.0F;
  h.xyzt_units = 2;  // mm
  h.qform_code = 0;
  h.sform_code = 1;
  h.srow_x[0] = h.pixdim[1];
  h.srow_y[1] = h.pixdim[2];
  h.srow_z[2] = h.pixdim[3];
  std::memcpy(h.magic, "n+1\0", 4);
  return h;
}

void write_nifti_bytes(const std::filesystem::path& path, const Nifti1Header& h, const void* data, std::size_t bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(&h), sizeof(h));
  const char ext[4] = {0, 0, 0, 0};
  out.write(ext, 4);
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!out) throw IoError("short write to " + path.string());
}

struct NiftiImage {
  Vec3i shape;
  int channels;
  Spacing spacing;
  std::vector<double> values;
};

template <typename T>
void decode(const std::vector<char>& raw, bool swapped, std::vector<double>& out) {
  const std::size_t n = raw.size() / sizeof(T);
  out.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, raw.data() + i * sizeof(T), sizeof(T));
    if (swapped) v = byteswap(v);
    out[i] = static_cast<double>(v);
  }
}

NiftiImage read_nifti_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  Nifti1Header h{};
  in.read(reinterpret_cast<char*>(&h), sizeof(h));
  if (!in) throw IoError(path.string() + ": truncated NIfTI header");
  bool swapped = false;
  if (h.sizeof_hdr != 348) {
    if (byteswap(h.sizeof_hdr) != 348) throw IoError(path.string() + ": not a NIfTI-1 file");
    swapped = true;
    swap_header(h);
  }
  if (std::memcmp(h.magic, "n+1", 3) != 0) throw IoError(path.string() + ": only single-file NIfTI-1 is supported");
  const int ndim = h.dim[0];
  if (ndim < 3 || ndim > 5) throw IoError(path.string() + ": unsupported dimensionality " + std::to_string(ndim));
  NiftiImage img;
  img.shape = {h.dim[1], h.dim[2], h.dim[3]};
  img.channels = 1;
  for (int d = 4; d <= ndim; ++d) img.channels *= std::max<int>(1, h.dim[d]);
  img.spacing = {std::fabs(h.pixdim[1]) > 0 ? std::fabs(h.pixdim[1]) : 1.0,
                 std::fabs(h.pixdim[2]) > 0 ? std::fabs(h.pixdim[2]) : 1.0,
                 std::fabs(h.pixdim[3]) > 0 ? std::fabs(h.pixdim[3]) : 1.0};
  std::size_t elem = 0;
  switch (h.datatype) {
    case kUint8: case kInt8: elem = 1; break;
    case kInt16: case kUint16: elem = 2; break;
    case kInt32: case kFloat32: elem = 4; break;
    case kFloat64: elem = 8; break;
    default: throw IoError(path.string() + ": unsupported NIfTI datatype " + std::to_string(h.datatype));
  }
  const std::size_t count = img.shape.product() * static_cast<std::size_t>(img.channels);
  std::vector<char> raw(count * elem);
  in.seekg(static_cast<std::streamoff>(h.vox_offset));
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!in) throw IoError(path.string() + ": truncated voxel data");
  switch (h.datatype) {
    case kUint8: decode<std::uint8_t>(raw, false, img.values); break;
    case kInt8: decode<std::int8_t>(raw, false, img.values); break;
    case kInt16: decode<std::int16_t>(raw, swapped, img.values); break;
    case kUint16: decode<std::uint16_t>(raw, swapped, img.values); break;
    case kInt32: decode<std::int32_t>(raw, swapped, img.values); break;
    case kFloat32: decode<float>(raw, swapped, img.values); break;
    case kFloat64: decode<double>(raw, swapped, img.values); break;
    default: break;
  }
  if (h.scl_slope != 0.0F && !(h.scl_slope == 1.0F && h.scl_inter == 0.0F)) {
    for (auto& v : img.values) v = v * h.scl_slope + h.scl_inter;
  }
  return img;
}

}  // namespace

void write_nifti(const std::filesystem::path& path, const Volume& v) {
  const auto h = make_header(v.shape(), v.channels(), v.spacing(), kFloat32, 32);
  write_nifti_bytes(path, h, v.data().data(), v.data().size() * sizeof(float));
}

Volume read_nifti(const std::filesystem::path& path) {
  auto img = read_nifti_image(path);
  Volume v(img.shape, img.channels, img.spacing);
  for (std::size_t i = 0; i < img.values.size(); ++i) v.data()[i] = static_cast<float>(img.values[i]);
  return v;
}

void write_nifti_labels(const std::filesystem::path& path, const LabelMap& labels, Spacing spacing) {
  const auto h = make_header(labels.shape(), 1, spacing, kUint8, 8);
  write_nifti_bytes(path, h, labels.data().data(), labels.data().size());
}

LabelMap read_nifti_labels(const std::filesystem::path& path) {
  auto img = read_nifti_image(path);
  if (img.channels != 1) throw IoError(path.string() + ": label volume must have one channel");
  LabelMap labels(img.shape);
  for (std::size_t i = 0; i < img.values.size(); ++i) {
    labels.data()[i] = static_cast<std::uint8_t>(std::lround(img.values[i]));
  }
  return labels;
}

std::filesystem::path raw_sidecar(const std::filesystem::path& path) {
  auto p = path;
  p += ".txt";
  return p;
}

void write_raw(const std::filesystem::path& path, const Volume& v) {
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(v.data().data()), static_cast<std::streamsize>(v.data().size() * sizeof(float)));
    if (!out) throw IoError("short write to " + path.string());
  }
  std::ofstream hdr(raw_sidecar(path));
  if (!hdr) throw IoError("cannot write sidecar for " + path.string());
  hdr.precision(17);
  hdr << "# advnorm raw volume\n"
      << "shape " << v.shape().x << ' ' << v.shape().y << ' ' << v.shape().z << '\n'
      << "channels " << v.channels() << '\n'
      << "spacing " << v.spacing().x << ' ' << v.spacing().y << ' ' << v.spacing().z << '\n'
      << "dtype float32\n"
      << "byte_order little\n"
      << "order x_fastest\n";
}

Volume read_raw(const std::filesystem::path& path) {
  std::ifstream hdr(raw_sidecar(path));
  if (!hdr) throw IoError("missing sidecar " + raw_sidecar(path).string());
  Vec3i shape{};
  int channels = 1;
  Spacing spacing{};
  std::string line;
  while (std::getline(hdr, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key == "shape") {
      ss >> shape.x >> shape.y >> shape.z;
    } else if (key == "channels") {
      ss >> channels;
    } else if (key == "spacing") {
      ss >> spacing.x >> spacing.y >> spacing.z;
    } else if (key == "dtype") {
      std::string dtype;
      ss >> dtype;
      if (dtype != "float32") throw IoError(path.string() + ": unsupported raw dtype " + dtype);
    } else if (key == "byte_order") {
      std::string order;
      ss >> order;
      if (order != "little") throw IoError(path.string() + ": unsupported byte order " + order);
    }
  }
  Volume v(shape, channels, spacing);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.read(reinterpret_cast<char*>(v.data().data()), static_cast<std::streamsize>(v.data().size() * sizeof(float)));
  if (!in) throw IoError(path.string() + ": raw data shorter than its sidecar shape");
  return v;
}

namespace {
bool is_raw(const std::filesystem::path& p) { return p.extension() == ".raw"; }
void check_ext(const std::filesystem::path& p) {
  if (p.extension() != ".raw" && p.extension() != ".nii") {
    throw IoError("unknown volume extension for " + p.string() + " (expected .nii or .raw)");
  }
}
}  // namespace

void save_volume(const std::filesystem::path& path, const Volume& v) {
  check_ext(path);
  is_raw(path) ? write_raw(path, v) : write_nifti(path, v);
}

Volume load_volume(const std::filesystem::path& path) {
  check_ext(path);
  return is_raw(path) ? read_raw(path) : read_nifti(path);
}

void save_labels(const std::filesystem::path& path, const LabelMap& labels, Spacing spacing) {
  check_ext(path);
  if (is_raw(path)) {
    Volume v(labels.shape(), 1, spacing);
    for (std::size_t i = 0; i < labels.data().size(); ++i) v.data()[i] = labels.data()[i];
    write_raw(path, v);
  } else {
    write_nifti_labels(path, labels, spacing);
  }
}

LabelMap load_labels(const std::filesystem::path& path) {
  check_ext(path);
  if (!is_raw(path)) return read_nifti_labels(path);
  const Volume v = read_raw(path);
  LabelMap labels(v.shape());
  for (std::size_t i = 0; i < labels.data().size(); ++i) {
    labels.data()[i] = static_cast<std::uint8_t>(std::lround(v.data()[i]));
  }
  return labels;
}

}  // namespace advnorm::io
