// Copyright (C) 2026 The UtterTune Authors
// SPDX-License-Identifier: Apache-2.0

// Named-tensor container shared by adapter files and model checkpoints.
//
//   uttertune-tensors\t<kind>\t<version>\n
//   meta\t<key>\t<value>\n            (zero or more, in insertion order)
//   tensor\t<name>\t<rows>\t<cols>\n   (one per tensor)
//   data\t<payload bytes>\n
//   <payload: every tensor, row-major float32 little-endian, in header order>
//   crc32\t<8 lowercase hex digits>\n  (CRC-32 of every preceding byte)

#pragma once

#include <zlib.h>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "uttertune/error.hpp"

namespace uttertune::tensor_io {

struct NamedTensor {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  bool operator==(const NamedTensor&) const = default;
};

struct TensorFile {
  std::string kind;
  int version = 1;
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<NamedTensor> tensors;

  const std::string& get(const std::string& key) const {
    for (const auto& [k, v] : meta)
      if (k == key) return v;
    throw Error(ErrorCode::kCorruptFile, "missing header field '" + key + "'");
  }

  const NamedTensor& tensor(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw Error(ErrorCode::kCorruptFile, "missing tensor '" + name + "'");
  }

  bool operator==(const TensorFile&) const = default;
};

inline std::uint32_t crc32_of(const std::string& bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + done), chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

inline std::string hex32(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

inline std::string serialize(const TensorFile& file) {
  std::string out = "uttertune-tensors\t" + file.kind + "\t" + std::to_string(file.version) + "\n";
  for (const auto& [k, v] : file.meta) {
    if (k.find_first_of("\t\n") != std::string::npos || v.find_first_of("\t\n") != std::string::npos) {
      throw Error(ErrorCode::kIoError, "header field '" + k + "' contains a tab or newline");
    }
    out += "meta\t" + k + "\t" + v + "\n";
  }
  std::size_t payload = 0;
  for (const auto& t : file.tensors) {
    if (t.data.size() != t.rows * t.cols) {
      throw Error(ErrorCode::kShapeMismatch, "tensor '" + t.name + "' data does not match its shape");
    }
    out += "tensor\t" + t.name + "\t" + std::to_string(t.rows) + "\t" + std::to_string(t.cols) + "\n";
    payload += t.data.size() * 4;
  }
  out += "data\t" + std::to_string(payload) + "\n";
  out.reserve(out.size() + payload + 16);
  for (const auto& t : file.tensors) {
    for (float f : t.data) {
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((u >> (8 * b)) & 0xFF));
    }
  }
  out += "crc32\t" + hex32(crc32_of(out)) + "\n";
  return out;
}

inline TensorFile parse(const std::string& bytes, const std::string& expected_kind, int expected_version) {
  constexpr std::size_t kTrailer = 15;  // "crc32\t" + 8 hex + "\n"
  if (bytes.size() < kTrailer || bytes.compare(bytes.size() - kTrailer, 6, "crc32\t") != 0 ||
      bytes.back() != '\n') {
    throw Error(ErrorCode::kCorruptFile, "missing checksum trailer");
  }
  const std::string body = bytes.substr(0, bytes.size() - kTrailer);
  if (bytes.substr(bytes.size() - 9, 8) != hex32(crc32_of(body))) {
    throw Error(ErrorCode::kCorruptFile, "checksum mismatch");
  }

  std::size_t pos = 0;
  auto line = [&]() {
    const auto nl = body.find('\n', pos);
    if (nl == std::string::npos) throw Error(ErrorCode::kCorruptFile, "truncated header");
    std::string l = body.substr(pos, nl - pos);
    pos = nl + 1;
    std::vector<std::string> fields;
    std::size_t s = 0;
    while (true) {
      const auto tab = l.find('\t', s);
      fields.push_back(l.substr(s, tab - s));
      if (tab == std::string::npos) break;
      s = tab + 1;
    }
    return fields;
  };

  TensorFile file;
  auto magic = line();
  if (magic.size() != 3 || magic[0] != "uttertune-tensors") {
    throw Error(ErrorCode::kCorruptFile, "not a tensor container");
  }
  if (magic[1] != expected_kind) {
    throw Error(ErrorCode::kCorruptFile, "expected a '" + expected_kind + "' file, found '" + magic[1] + "'");
  }
  file.kind = magic[1];
  file.version = std::stoi(magic[2]);
  if (file.version != expected_version) {
    throw Error(ErrorCode::kVersionMismatch, "format version " + magic[2] + ", expected " +
                                                 std::to_string(expected_version));
  }

  std::size_t payload = 0;
  while (true) {
    auto f = line();
    if (f[0] == "meta" && f.size() == 3) {
      file.meta.emplace_back(f[1], f[2]);
    } else if (f[0] == "tensor" && f.size() == 4) {
      NamedTensor t;
      t.name = f[1];
      t.rows = std::stoul(f[2]);
      t.cols = std::stoul(f[3]);
      file.tensors.push_back(std::move(t));
    } else if (f[0] == "data" && f.size() == 2) {
      payload = std::stoul(f[1]);
      break;
    } else {
      throw Error(ErrorCode::kCorruptFile, "unrecognized header line");
    }
  }
  if (body.size() - pos != payload) throw Error(ErrorCode::kCorruptFile, "payload size mismatch");

  for (auto& t : file.tensors) {
    const std::size_t n = t.rows * t.cols;
    if (pos + 4 * n > body.size()) throw Error(ErrorCode::kCorruptFile, "payload shorter than shapes");
    t.data.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) {
        u |= static_cast<std::uint32_t>(static_cast<unsigned char>(body[pos + 4 * i + b])) << (8 * b);
      }
      std::memcpy(&t.data[i], &u, 4);
    }
    pos += 4 * n;
  }
  return file;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::kIoError, "cannot write " + path);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error(ErrorCode::kIoError, "short write to " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::kIoError, "cannot read " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace uttertune::tensor_io
