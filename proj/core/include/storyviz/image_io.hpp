#pragma once

#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "storyviz/common.hpp"
#include "storyviz/tensor.hpp"

namespace storyviz {

// Minimal 8-bit RGB PNG writer/reader. Writing one fixed encoding (filter 0
// scanlines, zlib level 6) keeps rebuilt files byte-identical; reading
// supports all five scanline filters so foreign 8-bit RGB files load too.

namespace png_detail {

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

inline uint32_t get_u32(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

inline void put_chunk(std::vector<uint8_t>& out, const char type[4],
                      const uint8_t* data, size_t len) {
  put_u32(out, static_cast<uint32_t>(len));
  const size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  if (len > 0) out.insert(out.end(), data, data + len);
  uint32_t crc = static_cast<uint32_t>(
      ::crc32(0L, out.data() + start, static_cast<uInt>(4 + len)));
  put_u32(out, crc);
}

inline uint8_t paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return static_cast<uint8_t>(a);
  if (pb <= pc) return static_cast<uint8_t>(b);
  return static_cast<uint8_t>(c);
}

}  // namespace png_detail

inline std::vector<uint8_t> encode_png_rgb8(const uint8_t* rgb, int width, int height) {
  SV_CHECK(width > 0 && height > 0, "encode_png_rgb8: empty image");
  using namespace png_detail;
  std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

  uint8_t ihdr[13];
  ihdr[0] = static_cast<uint8_t>(width >> 24);
  ihdr[1] = static_cast<uint8_t>(width >> 16);
  ihdr[2] = static_cast<uint8_t>(width >> 8);
  ihdr[3] = static_cast<uint8_t>(width);
  ihdr[4] = static_cast<uint8_t>(height >> 24);
  ihdr[5] = static_cast<uint8_t>(height >> 16);
  ihdr[6] = static_cast<uint8_t>(height >> 8);
  ihdr[7] = static_cast<uint8_t>(height);
  ihdr[8] = 8;   // bit depth
  ihdr[9] = 2;   // color type: truecolor RGB
  ihdr[10] = 0;  // compression
  ihdr[11] = 0;  // filter method
  ihdr[12] = 0;  // no interlace
  put_chunk(out, "IHDR", ihdr, sizeof(ihdr));

  const size_t stride = static_cast<size_t>(width) * 3;
  std::vector<uint8_t> raw((stride + 1) * static_cast<size_t>(height));
  for (int y = 0; y < height; ++y) {
    raw[(stride + 1) * static_cast<size_t>(y)] = 0;  // filter type 0 (none)
    std::memcpy(raw.data() + (stride + 1) * static_cast<size_t>(y) + 1,
                rgb + stride * static_cast<size_t>(y), stride);
  }

  uLongf bound = ::compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> compressed(bound);
  int rc = ::compress2(compressed.data(), &bound, raw.data(),
                       static_cast<uLong>(raw.size()), 6);
  SV_CHECK(rc == Z_OK, "encode_png_rgb8: deflate failed rc=", rc);
  put_chunk(out, "IDAT", compressed.data(), bound);
  put_chunk(out, "IEND", nullptr, 0);
  return out;
}

struct DecodedPng {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> rgb;  // HWC, 3 bytes per pixel
};

inline DecodedPng decode_png_rgb8(const std::vector<uint8_t>& bytes) {
  using namespace png_detail;
  static const uint8_t kSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  SV_CHECK(bytes.size() > 8 && std::memcmp(bytes.data(), kSig, 8) == 0,
           "decode_png_rgb8: bad signature");

  DecodedPng img;
  std::vector<uint8_t> idat;
  size_t pos = 8;
  bool saw_ihdr = false, saw_iend = false;
  while (pos + 12 <= bytes.size() && !saw_iend) {
    const uint32_t len = get_u32(bytes.data() + pos);
    SV_CHECK(pos + 12 + len <= bytes.size(), "decode_png_rgb8: truncated chunk");
    const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
    const uint8_t* data = bytes.data() + pos + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      SV_CHECK(len == 13, "decode_png_rgb8: bad IHDR length");
      img.width = static_cast<int>(get_u32(data));
      img.height = static_cast<int>(get_u32(data + 4));
      SV_CHECK(data[8] == 8 && data[9] == 2 && data[10] == 0 && data[11] == 0 &&
                   data[12] == 0,
               "decode_png_rgb8: only 8-bit non-interlaced RGB supported");
      saw_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_iend = true;
    }
    pos += 12 + len;
  }
  SV_CHECK(saw_ihdr && saw_iend && !idat.empty(), "decode_png_rgb8: missing chunks");

  const size_t stride = static_cast<size_t>(img.width) * 3;
  std::vector<uint8_t> raw((stride + 1) * static_cast<size_t>(img.height));
  uLongf raw_len = static_cast<uLongf>(raw.size());
  int rc = ::uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size()));
  SV_CHECK(rc == Z_OK && raw_len == raw.size(), "decode_png_rgb8: inflate failed rc=", rc);

  img.rgb.assign(stride * static_cast<size_t>(img.height), 0);
  std::vector<uint8_t> prev(stride, 0);
  for (int y = 0; y < img.height; ++y) {
    const uint8_t* in = raw.data() + (stride + 1) * static_cast<size_t>(y);
    uint8_t* cur = img.rgb.data() + stride * static_cast<size_t>(y);
    const uint8_t filter = in[0];
    for (size_t x = 0; x < stride; ++x) {
      const int rawv = in[1 + x];
      const int a = x >= 3 ? cur[x - 3] : 0;   // left
      const int b = prev[x];                   // up
      const int c = x >= 3 ? prev[x - 3] : 0;  // upper-left
      int v = 0;
      switch (filter) {
        case 0: v = rawv; break;
        case 1: v = rawv + a; break;
        case 2: v = rawv + b; break;
        case 3: v = rawv + (a + b) / 2; break;
        case 4: v = rawv + paeth(a, b, c); break;
        default: SV_CHECK(false, "decode_png_rgb8: bad filter ", int(filter));
      }
      cur[x] = static_cast<uint8_t>(v & 0xff);
    }
    std::memcpy(prev.data(), cur, stride);
  }
  return img;
}

inline void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  SV_CHECK(f.good(), "cannot open for write: ", path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  SV_CHECK(f.good(), "write failed: ", path);
}

inline std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  SV_CHECK(f.good(), "cannot open for read: ", path);
  const std::streamsize n = f.tellg();
  f.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(n));
  f.read(reinterpret_cast<char*>(bytes.data()), n);
  SV_CHECK(f.good(), "read failed: ", path);
  return bytes;
}

// Frame pixels live in [-1,1], CHW. Bytes are HWC, via the linear map
// [-1,1] -> [0,255] with rounding half away from zero.
inline uint8_t frame_value_to_byte(float v) {
  const float scaled = (v + 1.0f) * 127.5f;
  const float rounded = std::round(scaled);  // std::round: half away from zero
  return static_cast<uint8_t>(std::min(255.0f, std::max(0.0f, rounded)));
}

inline float byte_to_frame_value(uint8_t b) {
  return static_cast<float>(b) / 127.5f - 1.0f;
}

// frame: [3, H, W] in [-1,1] -> HWC bytes.
inline std::vector<uint8_t> frame_to_rgb8(const TensorF& frame) {
  SV_CHECK(frame.rank() == 3 && frame.dim(0) == 3, "frame_to_rgb8: expected [3,H,W]");
  const int64_t h = frame.dim(1), w = frame.dim(2);
  std::vector<uint8_t> rgb(static_cast<size_t>(3 * h * w));
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t c = 0; c < 3; ++c) {
        rgb[static_cast<size_t>((y * w + x) * 3 + c)] =
            frame_value_to_byte(frame.at({c, y, x}));
      }
    }
  }
  return rgb;
}

inline TensorF rgb8_to_frame(const std::vector<uint8_t>& rgb, int64_t h, int64_t w) {
  SV_CHECK(static_cast<int64_t>(rgb.size()) == 3 * h * w, "rgb8_to_frame: size mismatch");
  TensorF frame({3, h, w});
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t c = 0; c < 3; ++c) {
        frame.at({c, y, x}) =
            byte_to_frame_value(rgb[static_cast<size_t>((y * w + x) * 3 + c)]);
      }
    }
  }
  return frame;
}

inline void write_frame_png(const std::string& path, const TensorF& frame) {
  const auto rgb = frame_to_rgb8(frame);
  write_file_bytes(path, encode_png_rgb8(rgb.data(), static_cast<int>(frame.dim(2)),
                                         static_cast<int>(frame.dim(1))));
}

inline TensorF read_frame_png(const std::string& path) {
  const DecodedPng img = decode_png_rgb8(read_file_bytes(path));
  return rgb8_to_frame(img.rgb, img.height, img.width);
}

}  // namespace storyviz
