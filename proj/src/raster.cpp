#include "capsvl/raster.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "capsvl/errors.hpp"

namespace capsvl {

void write_pnm(const std::filesystem::path& path, const Raster& image) {
  if (image.channels != 1 && image.channels != 3) throw InputError("pnm images need 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write " + path.string());
  out << (image.channels == 3 ? "P6" : "P5") << '\n' << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
}

namespace {

std::size_t read_header_int(std::istream& in, const std::filesystem::path& path) {
  in >> std::ws;
  while (in.peek() == '#') {
    std::string comment;
    std::getline(in, comment);
    in >> std::ws;
  }
  long v = -1;
  in >> v;
  if (!in || v <= 0) throw LoadError(path.string() + ": malformed pnm header");
  return static_cast<std::size_t>(v);
}

}  // namespace

Raster read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open image " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P6") throw LoadError(path.string() + ": expected binary PGM/PPM, got '" + magic + "'");
  Raster img;
  img.channels = magic == "P6" ? 3 : 1;
  img.width = read_header_int(in, path);
  img.height = read_header_int(in, path);
  if (read_header_int(in, path) != 255) throw LoadError(path.string() + ": only maxval 255 is supported");
  in.get();
  img.pixels.resize(img.width * img.height * img.channels);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!in) throw LoadError(path.string() + ": truncated pixel data");
  return img;
}

Raster map_to_gray(const std::vector<double>& values, std::size_t width, std::size_t height) {
  Raster img(width, height, 1);
  double mx = 0.0;
  for (double v : values) mx = std::max(mx, v);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const double v = mx > 0 ? values[i] / mx : 0.0;
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
  }
  return img;
}

}  // namespace capsvl
