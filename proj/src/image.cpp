#include "awmf/image.hpp"

#include <fstream>
#include <limits>

namespace awmf {

namespace {

// Netpbm header token reader: skips whitespace and '#' comments.
class PnmReader {
 public:
  PnmReader(std::istream& in, const std::string& path) : in_(in), path_(path) {}

  std::string magic() {
    char a = get("magic"), b = get("magic");
    return std::string{a, b};
  }

  long value(const char* what) {
    skip_separators();
    long v = 0;
    bool any = false;
    for (;;) {
      const int c = in_.peek();
      if (c < '0' || c > '9') break;
      in_.get();
      if (v > (std::numeric_limits<long>::max() - 9) / 10) {
        throw DataError(path_ + ": " + what + " overflows");
      }
      v = v * 10 + (c - '0');
      any = true;
    }
    if (!any) throw DataError(path_ + ": malformed header, expected " + std::string(what));
    return v;
  }

  void payload(std::uint8_t* dst, std::size_t n) {
    // Exactly one whitespace byte separates the header from the raster.
    get("payload separator");
    in_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw DataError(path_ + ": unexpected end of pixel data");
    }
  }

 private:
  char get(const char* what) {
    const int c = in_.get();
    if (c == EOF) throw DataError(path_ + ": truncated before " + std::string(what));
    return static_cast<char>(c);
  }

  void skip_separators() {
    for (;;) {
      int c = in_.peek();
      if (c == '#') {
        while (c != EOF && c != '\n') c = in_.get();
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        in_.get();
      } else {
        return;
      }
    }
  }

  std::istream& in_;
  std::string path_;
};

constexpr long kMaxExtent = 1 << 20;

}  // namespace

Raster load_image(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open image: " + path);
  PnmReader r(f, path);
  const std::string magic = r.magic();
  int channels;
  if (magic == "P5") {
    channels = 1;
  } else if (magic == "P6") {
    channels = 3;
  } else {
    throw DataError(path + ": not a binary PGM/PPM file (magic '" + magic + "')");
  }
  const long w = r.value("width");
  const long h = r.value("height");
  if (w <= 0 || h <= 0 || w > kMaxExtent || h > kMaxExtent) {
    throw DataError(path + ": image extents " + std::to_string(w) + "x" +
                    std::to_string(h) + " out of range");
  }
  const long maxval = r.value("maxval");
  if (maxval != 255) {
    throw DataError(path + ": unsupported maxval " + std::to_string(maxval) +
                    " (only 255)");
  }
  Raster out(static_cast<int>(w), static_cast<int>(h), channels);
  r.payload(out.data.data(), out.data.size());
  return out;
}

void save_image(const Raster& raster, const std::string& path) {
  if (raster.channels != 1 && raster.channels != 3) {
    throw DataError("save_image: rasters must have 1 or 3 channels");
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open for writing: " + path);
  f << (raster.channels == 1 ? "P5" : "P6") << "\n"
    << raster.width << " " << raster.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(raster.data.data()),
          static_cast<std::streamsize>(raster.data.size()));
  if (!f) throw DataError("failed writing: " + path);
}

Raster load_labels(const std::string& path) {
  Raster r = load_image(path);
  if (r.channels != 1) throw DataError(path + ": label maps must be single-channel PGM");
  return r;
}

void save_labels(const Raster& labels, const std::string& path) {
  if (labels.channels != 1) throw DataError("label maps must be single-channel");
  save_image(labels, path);
}

}  // namespace awmf
