#include "capsvl/blob.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "capsvl/errors.hpp"

namespace capsvl {

static_assert(std::endian::native == std::endian::little, "blob files are little-endian");

std::filesystem::path sidecar_path(const std::filesystem::path& blob) {
  auto p = blob;
  p += ".json";
  return p;
}

void write_blob(const std::filesystem::path& path, const Blob& blob) {
  std::size_t n = 1;
  for (auto d : blob.shape) n *= d;
  if (n != blob.values.size()) throw InputError("blob shape does not match its value count");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(blob.values.data()),
            static_cast<std::streamsize>(blob.values.size() * sizeof(double)));
  nlohmann::json side = blob.meta;
  side["shape"] = blob.shape;
  side["dtype"] = "float64-le";
  std::ofstream meta(sidecar_path(path));
  if (!meta) throw LoadError("cannot write " + sidecar_path(path).string());
  meta << side.dump(2) << '\n';
}

Blob read_blob(const std::filesystem::path& path) {
  std::ifstream meta(sidecar_path(path));
  if (!meta) throw LoadError("missing blob sidecar " + sidecar_path(path).string());
  Blob b;
  try {
    b.meta = nlohmann::json::parse(meta);
    b.shape = b.meta.at("shape").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(sidecar_path(path).string() + ": " + e.what());
  }
  if (b.meta.value("dtype", "") != "float64-le") throw LoadError(sidecar_path(path).string() + ": unsupported dtype");
  std::size_t n = 1;
  for (auto d : b.shape) n *= d;
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw LoadError("cannot open blob " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != n * sizeof(double))
    throw LoadError(path.string() + ": " + std::to_string(bytes) + " bytes for " + std::to_string(n) + " values");
  in.seekg(0);
  b.values.resize(n);
  in.read(reinterpret_cast<char*>(b.values.data()), static_cast<std::streamsize>(bytes));
  return b;
}

Blob capsule_grid_blob(const capsule::CapsuleGrid& grid) {
  const auto packed = grid.packed();
  Blob b;
  b.shape = packed.shape();
  b.values.assign(packed.data().begin(), packed.data().end());
  b.meta = {{"kind", "capsule_grid"},
            {"h", grid.height()},
            {"w", grid.width()},
            {"C", grid.capsules()},
            {"K", grid.pose_size},
            {"packed_order_version", kPackedOrderVersion}};
  return b;
}

}  // namespace capsvl
