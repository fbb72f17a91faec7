#pragma once

#include <filesystem>
#include <vector>

namespace musegen {

// Mono waveform. Samples live in [-1, 1].
struct AudioClip {
  int sample_rate = 0;
  std::vector<double> samples;

  double duration_s() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
  }
};

// 16-bit signed PCM mono RIFF/WAVE.
void write_wav(const std::filesystem::path& path, const AudioClip& clip);
AudioClip read_wav(const std::filesystem::path& path);

}  // namespace musegen
