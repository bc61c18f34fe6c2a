#ifndef RAINSCALE_NPY_HPP_
#define RAINSCALE_NPY_HPP_

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "rainscale/error.hpp"

namespace rainscale {
namespace npy {

// NPY v1.0, little-endian float64, C order. That is the one interchange
// format the toolkit reads and writes; anything else is rejected.

inline bool machine_is_little_endian() {
  const std::uint16_t probe = 1;
  return *reinterpret_cast<const std::uint8_t*>(&probe) == 1;
}

inline std::string shape_tuple(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << shape[i];
    if (shape.size() == 1 || i + 1 < shape.size()) os << ",";
    if (i + 1 < shape.size()) os << " ";
  }
  os << ")";
  return os.str();
}

inline void save(const std::string& path, const std::vector<std::size_t>& shape,
                 const double* data) {
  require(machine_is_little_endian(), errc::io_failure,
          "npy writer requires a little-endian host");
  std::size_t count = 1;
  for (std::size_t d : shape) count *= d;

  std::string header = "{'descr': '<f8', 'fortran_order': False, 'shape': " +
                       shape_tuple(shape) + ", }";
  // Pad so that magic(6) + version(2) + hlen(2) + header is a multiple of 64.
  const std::size_t base = 6 + 2 + 2;
  std::size_t total = base + header.size() + 1;
  const std::size_t padded = (total + 63) / 64 * 64;
  header.append(padded - total, ' ');
  header.push_back('\n');

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), errc::io_failure, "cannot open for writing: ", path);
  const char magic[8] = {'\x93', 'N', 'U', 'M', 'P', 'Y', '\x01', '\x00'};
  out.write(magic, 8);
  const std::uint16_t hlen = static_cast<std::uint16_t>(header.size());
  char hlen_le[2] = {static_cast<char>(hlen & 0xff), static_cast<char>(hlen >> 8)};
  out.write(hlen_le, 2);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(data),
            static_cast<std::streamsize>(count * sizeof(double)));
  out.flush();
  require(out.good(), errc::io_failure, "write failed: ", path);
}

struct Array {
  std::vector<std::size_t> shape;
  std::vector<double> data;
};

inline Array load(const std::string& path) {
  require(machine_is_little_endian(), errc::io_failure,
          "npy reader requires a little-endian host");
  std::ifstream in(path, std::ios::binary);
  require(in.good(), errc::io_failure, "cannot open: ", path);

  char magic[8];
  in.read(magic, 8);
  require(in.gcount() == 8 && std::memcmp(magic, "\x93NUMPY", 6) == 0,
          errc::io_failure, "not an NPY file: ", path);
  require(magic[6] == 1 && magic[7] == 0, errc::io_failure,
          "unsupported NPY version in ", path);

  unsigned char hlen_le[2];
  in.read(reinterpret_cast<char*>(hlen_le), 2);
  require(in.gcount() == 2, errc::io_failure, "truncated header: ", path);
  const std::size_t hlen = hlen_le[0] | (static_cast<std::size_t>(hlen_le[1]) << 8);

  std::string header(hlen, '\0');
  in.read(header.data(), static_cast<std::streamsize>(hlen));
  require(static_cast<std::size_t>(in.gcount()) == hlen, errc::io_failure,
          "truncated header: ", path);

  require(header.find("'<f8'") != std::string::npos, errc::io_failure,
          "dtype is not little-endian float64: ", path);
  require(header.find("'fortran_order': False") != std::string::npos,
          errc::io_failure, "fortran-order arrays unsupported: ", path);

  const std::size_t lp = header.find('(');
  const std::size_t rp = header.find(')', lp);
  require(lp != std::string::npos && rp != std::string::npos, errc::io_failure,
          "malformed shape in header: ", path);

  Array arr;
  std::string dims = header.substr(lp + 1, rp - lp - 1);
  std::istringstream ds(dims);
  std::string tok;
  while (std::getline(ds, tok, ',')) {
    std::size_t pos = tok.find_first_not_of(" \t");
    if (pos == std::string::npos) continue;
    arr.shape.push_back(std::stoull(tok.substr(pos)));
  }

  std::size_t count = 1;
  for (std::size_t d : arr.shape) count *= d;
  arr.data.resize(count);
  in.read(reinterpret_cast<char*>(arr.data.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  require(static_cast<std::size_t>(in.gcount()) ==
              static_cast<std::size_t>(count * sizeof(double)),
          errc::io_failure, "truncated data: ", path);
  return arr;
}

}  // namespace npy
}  // namespace rainscale

#endif  // RAINSCALE_NPY_HPP_
