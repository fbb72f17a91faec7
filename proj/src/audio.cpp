#include "musegen/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "musegen/errors.hpp"

namespace musegen {

namespace {

void put_u32(std::ofstream& f, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

void put_u16(std::ofstream& f, uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  f.write(reinterpret_cast<const char*>(b), 2);
}

uint32_t get_u32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

uint16_t get_u16(const unsigned char* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

}  // namespace

void write_wav(const std::filesystem::path& path, const AudioClip& clip) {
  if (clip.sample_rate <= 0) throw ValidationError("write_wav: sample_rate must be positive");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_wav: cannot open " + path.string());

  const uint32_t n = static_cast<uint32_t>(clip.samples.size());
  const uint32_t data_bytes = n * 2;
  const uint32_t rate = static_cast<uint32_t>(clip.sample_rate);

  f.write("RIFF", 4);
  put_u32(f, 36 + data_bytes);
  f.write("WAVE", 4);
  f.write("fmt ", 4);
  put_u32(f, 16);
  put_u16(f, 1);  // PCM
  put_u16(f, 1);  // mono
  put_u32(f, rate);
  put_u32(f, rate * 2);  // byte rate
  put_u16(f, 2);         // block align
  put_u16(f, 16);        // bits per sample
  f.write("data", 4);
  put_u32(f, data_bytes);

  std::vector<unsigned char> buf(data_bytes);
  for (uint32_t i = 0; i < n; ++i) {
    double s = std::clamp(clip.samples[i], -1.0, 1.0);
    int32_t q = static_cast<int32_t>(std::lround(s * 32767.0));
    q = std::clamp(q, -32768, 32767);
    buf[2 * i] = static_cast<unsigned char>(q & 0xff);
    buf[2 * i + 1] = static_cast<unsigned char>((q >> 8) & 0xff);
  }
  f.write(reinterpret_cast<const char*>(buf.data()), data_bytes);
  if (!f) throw IoError("write_wav: short write to " + path.string());
}

AudioClip read_wav(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingArtifactError("read_wav: cannot open " + path.string());
  std::vector<unsigned char> raw((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  if (raw.size() < 44 || std::memcmp(raw.data(), "RIFF", 4) != 0 ||
      std::memcmp(raw.data() + 8, "WAVE", 4) != 0) {
    throw FormatError("read_wav: not a RIFF/WAVE file: " + path.string());
  }

  // Walk chunks; require 16-bit mono PCM.
  size_t pos = 12;
  int sample_rate = 0;
  bool have_fmt = false;
  AudioClip clip;
  while (pos + 8 <= raw.size()) {
    const char* id = reinterpret_cast<const char*>(raw.data() + pos);
    uint32_t sz = get_u32(raw.data() + pos + 4);
    size_t body = pos + 8;
    if (body + sz > raw.size()) sz = static_cast<uint32_t>(raw.size() - body);
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (sz < 16) throw FormatError("read_wav: short fmt chunk");
      uint16_t fmt = get_u16(raw.data() + body);
      uint16_t channels = get_u16(raw.data() + body + 2);
      sample_rate = static_cast<int>(get_u32(raw.data() + body + 4));
      uint16_t bits = get_u16(raw.data() + body + 14);
      if (fmt != 1 || channels != 1 || bits != 16)
        throw FormatError("read_wav: only 16-bit mono PCM supported: " + path.string());
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      if (!have_fmt) throw FormatError("read_wav: data chunk before fmt");
      uint32_t n = sz / 2;
      clip.samples.resize(n);
      for (uint32_t i = 0; i < n; ++i) {
        int16_t q = static_cast<int16_t>(get_u16(raw.data() + body + 2 * i));
        clip.samples[i] = std::clamp(static_cast<double>(q) / 32767.0, -1.0, 1.0);
      }
    }
    pos = body + sz + (sz & 1);
  }
  if (!have_fmt || clip.samples.empty())
    throw FormatError("read_wav: missing fmt or data chunk: " + path.string());
  clip.sample_rate = sample_rate;
  return clip;
}

}  // namespace musegen
