#pragma once

// On-disk dataset layout:
//
//   <root>/<split>/index.txt          one record per line, tab separated:
//                                     sample_id  image  mask  class-ids
//   <root>/<split>/images/<id>.ppm    binary 8-bit RGB
//   <root>/<split>/masks/<id>.pgm     binary 8-bit raw class ids
//
// Other datasets plug in by producing the same index; load_split only
// relies on the index and the two file formats.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "gfss/data.hpp"
#include "gfss/error.hpp"

namespace gfss {

namespace fs = std::filesystem;

struct RgbImage {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> pixels;  // interleaved RGB

  std::uint8_t* at(std::size_t y, std::size_t x) { return &pixels[(y * width + x) * 3]; }
};

namespace detail {

inline std::size_t read_header_int(std::istream& in) {
  std::string tok;
  while (in >> tok) {
    if (tok[0] == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    return static_cast<std::size_t>(std::stoul(tok));
  }
  throw DataError("truncated netpbm header");
}

inline std::vector<std::uint8_t> read_netpbm(const fs::path& path, const char* magic,
                                             std::size_t channels, std::size_t& h,
                                             std::size_t& w) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string m;
  in >> m;
  if (m != magic) throw DataError(path.string() + ": expected " + magic + " file");
  w = read_header_int(in);
  h = read_header_int(in);
  if (read_header_int(in) != 255) throw DataError(path.string() + ": only maxval 255 supported");
  in.get();
  std::vector<std::uint8_t> data(h * w * channels);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (in.gcount() != static_cast<std::streamsize>(data.size()))
    throw DataError(path.string() + ": truncated pixel data");
  return data;
}

inline void write_netpbm(const fs::path& path, const char* magic, std::size_t h, std::size_t w,
                         const std::vector<std::uint8_t>& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << magic << '\n' << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
}

}  // namespace detail

inline RgbImage to_rgb(const Tensor<float>& image) {
  RgbImage out{image.dim(0), image.dim(1), std::vector<std::uint8_t>(image.size())};
  for (std::size_t i = 0; i < image.size(); ++i) out.pixels[i] = denormalize_pixel(image[i], i % 3);
  return out;
}

inline void write_ppm(const fs::path& path, const RgbImage& img) {
  detail::write_netpbm(path, "P6", img.height, img.width, img.pixels);
}

inline void write_image(const fs::path& path, const Tensor<float>& image) {
  write_ppm(path, to_rgb(image));
}

inline Tensor<float> read_image(const fs::path& path) {
  std::size_t h = 0, w = 0;
  auto raw = detail::read_netpbm(path, "P6", 3, h, w);
  Tensor<float> out({h, w, 3});
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = normalize_pixel(raw[i], i % 3);
  return out;
}

inline void write_mask(const fs::path& path, const Tensor<int>& mask) {
  std::vector<std::uint8_t> raw(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] < 0 || mask[i] > 255) throw DataError("mask id does not fit in 8 bits");
    raw[i] = static_cast<std::uint8_t>(mask[i]);
  }
  detail::write_netpbm(path, "P5", mask.dim(0), mask.dim(1), raw);
}

inline Tensor<int> read_mask(const fs::path& path) {
  std::size_t h = 0, w = 0;
  auto raw = detail::read_netpbm(path, "P5", 1, h, w);
  Tensor<int> out({h, w});
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = raw[i];
  return out;
}

inline void save_split(const fs::path& dir, const std::vector<Sample>& samples) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  std::ofstream index(dir / "index.txt");
  if (!index) throw DataError("cannot write " + (dir / "index.txt").string());
  index << "# sample_id\timage\tmask\tclass_ids\n";
  for (const auto& s : samples) {
    const std::string img = "images/" + s.id + ".ppm";
    const std::string msk = "masks/" + s.id + ".pgm";
    write_image(dir / img, s.image);
    write_mask(dir / msk, s.mask);
    index << s.id << '\t' << img << '\t' << msk << '\t';
    const auto ids = s.classes_present();
    for (std::size_t i = 0; i < ids.size(); ++i) index << (i ? "," : "") << ids[i];
    index << '\n';
  }
}

inline std::vector<Sample> load_split(const fs::path& dir) {
  std::ifstream index(dir / "index.txt");
  if (!index) throw DataError("missing dataset index " + (dir / "index.txt").string());
  std::vector<Sample> out;
  std::string line;
  while (std::getline(index, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream rec(line);
    std::string id, img, msk;
    if (!std::getline(rec, id, '\t') || !std::getline(rec, img, '\t') ||
        !std::getline(rec, msk, '\t'))
      throw DataError("malformed index record: " + line);
    Sample s{read_image(dir / img), read_mask(dir / msk), id};
    if (s.image.dim(0) != s.mask.dim(0) || s.image.dim(1) != s.mask.dim(1))
      throw DataError("sample " + id + ": image and mask sizes differ");
    out.push_back(std::move(s));
  }
  return out;
}

inline void save_dataset(const fs::path& root, const SyntheticDataset& ds) {
  save_split(root / "train", ds.train);
  save_split(root / "test", ds.test);
}

inline SyntheticDataset load_dataset(const fs::path& root) {
  return {load_split(root / "train"), load_split(root / "test")};
}

}  // namespace gfss
