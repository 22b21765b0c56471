#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "avfuse/signal.hpp"
#include "avfuse/tensor.hpp"

#ifdef AVFUSE_HAS_PNG
#include <png.h>
#endif

namespace avfuse {

namespace detail {

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  f.seekg(0, std::ios::end);
  const auto n = f.tellg();
  f.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(n));
  if (n > 0) f.read(reinterpret_cast<char*>(buf.data()), n);
  if (!f) throw DataError("failed reading " + path);
  return buf;
}

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& buf, std::string name)
      : p_(buf.data()), n_(buf.size()), name_(std::move(name)) {}

  std::size_t remaining() const { return n_ - off_; }
  std::size_t offset() const { return off_; }
  void seek(std::size_t off) { off_ = off; }

  std::uint8_t u8() { return take(1)[0]; }
  std::uint16_t u16() {
    const auto* b = take(2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  }
  std::uint32_t u32() {
    const auto* b = take(4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }
  std::int16_t i16() { return static_cast<std::int16_t>(u16()); }
  float f32() {
    const std::uint32_t bits = u32();
    float out;
    std::memcpy(&out, &bits, 4);
    return out;
  }
  std::string str(std::size_t k) {
    const auto* b = take(k);
    return std::string(reinterpret_cast<const char*>(b), k);
  }
  void skip(std::size_t k) { take(k); }

 private:
  const std::uint8_t* take(std::size_t k) {
    if (off_ + k > n_) throw DataError(name_ + ": truncated (need " + std::to_string(k) +
                                       " bytes at offset " + std::to_string(off_) + ")");
    const auto* b = p_ + off_;
    off_ += k;
    return b;
  }

  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t off_ = 0;
  std::string name_;
};

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) {
    buf_.push_back(static_cast<std::uint8_t>(v & 0xff));
    buf_.push_back(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
  }
  void i16(std::int16_t v) { u16(static_cast<std::uint16_t>(v)); }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void str(const std::string& s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  void to_file(const std::string& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + path);
    f.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
    if (!f) throw DataError("failed writing " + path);
  }

  const std::vector<std::uint8_t>& bytes() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

}  // namespace detail

// ---- WAV -------------------------------------------------------------------
// PCM 16-bit little-endian; multichannel input is averaged to mono.

inline Waveform<float> read_wav(const std::string& path) {
  const auto bytes = detail::read_file_bytes(path);
  detail::ByteReader r(bytes, path);
  if (r.str(4) != "RIFF") throw DataError(path + ": not a RIFF file");
  r.u32();  // riff size
  if (r.str(4) != "WAVE") throw DataError(path + ": not a WAVE file");

  std::uint16_t channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool got_fmt = false;
  Waveform<float> w;
  while (r.remaining() >= 8) {
    const std::string id = r.str(4);
    const std::uint32_t size = r.u32();
    if (id == "fmt ") {
      if (size < 16) throw DataError(path + ": fmt chunk too small");
      const std::uint16_t format = r.u16();
      channels = r.u16();
      rate = r.u32();
      r.u32();  // byte rate
      r.u16();  // block align
      bits = r.u16();
      r.skip(size - 16);
      if (format != 1) throw DataError(path + ": only PCM supported, got format " + std::to_string(format));
      if (bits != 16) throw DataError(path + ": only 16-bit samples supported, got " + std::to_string(bits));
      if (channels == 0 || rate == 0) throw DataError(path + ": malformed fmt chunk");
      got_fmt = true;
    } else if (id == "data") {
      if (!got_fmt) throw DataError(path + ": data chunk before fmt");
      const std::size_t frames = size / (2u * channels);
      w.samples.resize(frames);
      for (std::size_t i = 0; i < frames; ++i) {
        float acc = 0.0f;
        for (std::uint16_t c = 0; c < channels; ++c) acc += static_cast<float>(r.i16());
        w.samples[i] = acc / (32768.0f * channels);
      }
      r.skip(size - frames * 2u * channels);
      if (size % 2) r.skip(1);
    } else {
      r.skip(size + (size % 2));
    }
  }
  if (!got_fmt || w.samples.empty()) throw DataError(path + ": no audio data found");
  w.sample_rate = static_cast<Index>(rate);
  return w;
}

inline void write_wav(const std::string& path, const Waveform<float>& w) {
  if (w.sample_rate <= 0) throw ContractError("write_wav: sample_rate must be positive");
  detail::ByteWriter out;
  const std::uint32_t data_size = static_cast<std::uint32_t>(w.samples.size() * 2);
  out.str("RIFF");
  out.u32(36 + data_size);
  out.str("WAVE");
  out.str("fmt ");
  out.u32(16);
  out.u16(1);  // PCM
  out.u16(1);  // mono
  out.u32(static_cast<std::uint32_t>(w.sample_rate));
  out.u32(static_cast<std::uint32_t>(w.sample_rate * 2));
  out.u16(2);
  out.u16(16);
  out.str("data");
  out.u32(data_size);
  for (float x : w.samples) {
    const long q = std::lround(std::min(1.0f, std::max(-1.0f, x)) * 32768.0f);
    out.i16(static_cast<std::int16_t>(std::min(32767l, std::max(-32768l, q))));
  }
  out.to_file(path);
}

// Linear resampling to a new rate; identity when rates match.
inline Waveform<float> linear_resample(const Waveform<float>& w, Index to_rate) {
  if (to_rate <= 0) throw ContractError("linear_resample: target rate must be positive");
  if (w.sample_rate == to_rate || w.samples.empty()) {
    Waveform<float> out = w;
    out.sample_rate = to_rate;
    return out;
  }
  Waveform<float> out;
  out.sample_rate = to_rate;
  const double ratio = static_cast<double>(w.sample_rate) / to_rate;
  const std::size_t n = static_cast<std::size_t>(w.samples.size() / ratio);
  out.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double src = i * ratio;
    const std::size_t j = static_cast<std::size_t>(src);
    const double t = src - j;
    const float a = w.samples[j];
    const float b = j + 1 < w.samples.size() ? w.samples[j + 1] : a;
    out.samples[i] = static_cast<float>(a * (1.0 - t) + b * t);
  }
  return out;
}

// ---- images -----------------------------------------------------------------
// Grayscale frames as H x W tensors in [0,1].

inline Tensor<float> read_pgm(const std::string& path) {
  const auto bytes = detail::read_file_bytes(path);
  std::size_t pos = 0;
  auto next_token = [&]() -> std::string {
    while (pos < bytes.size()) {
      if (std::isspace(bytes[pos])) {
        ++pos;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
    std::string tok;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) tok.push_back(static_cast<char>(bytes[pos++]));
    if (tok.empty()) throw DataError(path + ": truncated header");
    return tok;
  };

  const std::string magic = next_token();
  if (magic != "P5" && magic != "P2") throw DataError(path + ": not a PGM file (got '" + magic + "')");
  const long w = std::stol(next_token());
  const long h = std::stol(next_token());
  const long maxval = std::stol(next_token());
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) throw DataError(path + ": bad PGM header");

  Tensor<float> img({static_cast<Index>(h), static_cast<Index>(w)});
  const float scale = 1.0f / static_cast<float>(maxval);
  if (magic == "P2") {
    for (Index i = 0; i < img.size(); ++i) img[i] = scale * std::stol(next_token());
    return img;
  }
  ++pos;  // single whitespace after maxval
  const std::size_t need = static_cast<std::size_t>(w) * h * (maxval > 255 ? 2 : 1);
  if (bytes.size() - pos < need) throw DataError(path + ": truncated pixel data");
  if (maxval > 255) {
    for (Index i = 0; i < img.size(); ++i) {
      img[i] = scale * static_cast<float>((bytes[pos] << 8) | bytes[pos + 1]);  // PGM stores 16-bit samples big-endian
      pos += 2;
    }
  } else {
    for (Index i = 0; i < img.size(); ++i) img[i] = scale * bytes[pos++];
  }
  return img;
}

inline void write_pgm(const std::string& path, const Tensor<float>& img) {
  if (img.rank() != 2) throw ContractError("write_pgm: rank-2 image required");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path);
  f << "P5\n" << img.cols() << " " << img.rows() << "\n255\n";
  for (Index i = 0; i < img.size(); ++i) {
    const float v = std::min(1.0f, std::max(0.0f, img[i]));
    f.put(static_cast<char>(std::lround(v * 255.0f)));
  }
  if (!f) throw DataError("failed writing " + path);
}

#ifdef AVFUSE_HAS_PNG
// Luminance (ITU-R 601) from RGB.
inline Tensor<float> read_png(const std::string& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw DataError(path + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw DataError(path + ": " + msg);
  }
  Tensor<float> img({static_cast<Index>(image.height), static_cast<Index>(image.width)});
  for (Index i = 0; i < img.size(); ++i) {
    const float r = buf[static_cast<std::size_t>(3 * i)] / 255.0f;
    const float g = buf[static_cast<std::size_t>(3 * i + 1)] / 255.0f;
    const float b = buf[static_cast<std::size_t>(3 * i + 2)] / 255.0f;
    img[i] = 0.299f * r + 0.587f * g + 0.114f * b;
  }
  return img;
}
#endif

inline Tensor<float> read_image(const std::string& path) {
  const auto dot = path.rfind('.');
  std::string ext = dot == std::string::npos ? "" : path.substr(dot);
  for (auto& c : ext) c = static_cast<char>(std::tolower(c));
  if (ext == ".pgm" || ext == ".pnm") return read_pgm(path);
#ifdef AVFUSE_HAS_PNG
  if (ext == ".png") return read_png(path);
#else
  if (ext == ".png") throw DataError(path + ": PNG support not built in");
#endif
  throw DataError(path + ": unsupported image extension '" + ext + "'");
}

// ---- manifest ----------------------------------------------------------------

struct ManifestRow {
  std::string clip_id;
  std::string frames_path;
  std::string audio_path;
  double fps = 0.0;
  Index label = -1;
  std::string subject_id;
};

inline const char* kManifestHeader = "clip_id,frames_path,audio_path,fps,label,subject_id";

inline std::vector<ManifestRow> read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open manifest " + path);
  std::string line;
  if (!std::getline(f, line)) throw DataError(path + ": empty manifest file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader) {
    throw DataError(path + ": bad header '" + line + "', expected '" + kManifestHeader + "'");
  }
  std::vector<ManifestRow> rows;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cols.push_back(cell);
    if (cols.size() != 6) {
      throw DataError(path + ":" + std::to_string(lineno) + ": expected 6 columns, got " +
                      std::to_string(cols.size()));
    }
    ManifestRow row;
    row.clip_id = cols[0];
    row.frames_path = cols[1];
    row.audio_path = cols[2];
    try {
      row.fps = std::stod(cols[3]);
      row.label = static_cast<Index>(std::stol(cols[4]));
    } catch (const std::exception&) {
      throw DataError(path + ":" + std::to_string(lineno) + ": non-numeric fps or label");
    }
    row.subject_id = cols[5];
    if (row.clip_id.empty() || row.fps <= 0.0 || row.label < 0) {
      throw DataError(path + ":" + std::to_string(lineno) + ": invalid row for clip '" +
                      row.clip_id + "'");
    }
    rows.push_back(std::move(row));
  }
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j)
      if (rows[i].clip_id == rows[j].clip_id) {
        throw DataError(path + ": duplicate clip_id '" + rows[i].clip_id + "'");
      }
  return rows;
}

inline void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write manifest " + path);
  f << kManifestHeader << "\n";
  for (const auto& r : rows) {
    f << r.clip_id << "," << r.frames_path << "," << r.audio_path << "," << r.fps << "," << r.label
      << "," << r.subject_id << "\n";
  }
}

// Manifest paths are relative to the manifest's own directory.
inline std::string resolve_relative(const std::string& base_file, const std::string& rel) {
  std::filesystem::path p(rel);
  if (p.is_absolute()) return rel;
  return (std::filesystem::path(base_file).parent_path() / p).string();
}

// ---- weight files -------------------------------------------------------------
// magic "MMDW", u32 version, u32 tensor count; per tensor: u16 name length,
// name bytes, u8 rank, u32 per dim, then f32 little-endian row-major data.

using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

inline void save_weights(const std::string& path,
                         const std::vector<std::pair<std::string, const Tensor<float>*>>& tensors) {
  detail::ByteWriter out;
  out.str("MMDW");
  out.u32(1);
  out.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xffff) throw ContractError("save_weights: name too long: " + name);
    out.u16(static_cast<std::uint16_t>(name.size()));
    out.str(name);
    out.u8(static_cast<std::uint8_t>(t->rank()));
    for (Index d = 0; d < t->rank(); ++d) out.u32(static_cast<std::uint32_t>(t->dim(d)));
    for (Index i = 0; i < t->size(); ++i) out.f32((*t)[i]);
  }
  out.to_file(path);
}

inline NamedTensors load_weights(const std::string& path) {
  const auto bytes = detail::read_file_bytes(path);
  detail::ByteReader r(bytes, path);
  if (r.str(4) != "MMDW") throw DataError(path + ": not a weight file");
  const std::uint32_t version = r.u32();
  if (version != 1) throw DataError(path + ": unsupported weight file version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  NamedTensors out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = r.u16();
    std::string name = r.str(name_len);
    const std::uint8_t rank = r.u8();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<Index>(r.u32());
    Tensor<float> t(shape);
    for (Index j = 0; j < t.size(); ++j) t[j] = r.f32();
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

// ---- clip cache -----------------------------------------------------------------
// magic "MMDC", u32 version, u32 T, u32 H, u32 W, T visual frames then
// T spectrogram images, each H x W f32 little-endian row-major.

struct ClipCache {
  std::vector<Tensor<float>> visual;
  std::vector<Tensor<float>> specs;
};

inline void save_clip_cache(const std::string& path, const ClipCache& c) {
  if (c.visual.empty() || c.visual.size() != c.specs.size()) {
    throw ContractError("save_clip_cache: need equal, nonzero visual/spectrogram counts");
  }
  const Index h = c.visual[0].rows(), w = c.visual[0].cols();
  detail::ByteWriter out;
  out.str("MMDC");
  out.u32(1);
  out.u32(static_cast<std::uint32_t>(c.visual.size()));
  out.u32(static_cast<std::uint32_t>(h));
  out.u32(static_cast<std::uint32_t>(w));
  for (const auto* group : {&c.visual, &c.specs}) {
    for (const auto& frame : *group) {
      if (frame.rank() != 2 || frame.rows() != h || frame.cols() != w) {
        throw ContractError("save_clip_cache: inconsistent frame shape " + shape_str(frame.shape()));
      }
      for (Index i = 0; i < frame.size(); ++i) out.f32(frame[i]);
    }
  }
  out.to_file(path);
}

inline ClipCache load_clip_cache(const std::string& path) {
  const auto bytes = detail::read_file_bytes(path);
  detail::ByteReader r(bytes, path);
  if (r.str(4) != "MMDC") throw DataError(path + ": not a clip cache file");
  const std::uint32_t version = r.u32();
  if (version != 1) throw DataError(path + ": unsupported cache version " + std::to_string(version));
  const Index t = static_cast<Index>(r.u32());
  const Index h = static_cast<Index>(r.u32());
  const Index w = static_cast<Index>(r.u32());
  if (t <= 0 || h <= 0 || w <= 0) throw DataError(path + ": bad cache dimensions");
  ClipCache c;
  for (auto* group : {&c.visual, &c.specs}) {
    group->reserve(static_cast<std::size_t>(t));
    for (Index f = 0; f < t; ++f) {
      Tensor<float> frame({h, w});
      for (Index i = 0; i < frame.size(); ++i) frame[i] = r.f32();
      group->push_back(std::move(frame));
    }
  }
  return c;
}

}  // namespace avfuse
