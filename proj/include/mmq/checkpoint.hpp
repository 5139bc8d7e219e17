#pragma once

// Versioned checkpoint: a text header followed by a little-endian float32
// payload.
//
//   MMQ-CHECKPOINT 1
//   meta <key> <value>
//   param <name> <d0>x<d1>x... f32 <byte offset into payload>
//   payload <byte count>
//   end
//   <payload bytes, parameters concatenated in header order>

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mmq/io.hpp"
#include "mmq/tensor.hpp"

namespace mmq {

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Checkpoint {
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<NamedTensor> params;

  const std::string& meta_value(const std::string& key) const {
    for (const auto& [k, v] : meta)
      if (k == key) return v;
    throw DataError("checkpoint has no '" + key + "' entry");
  }
};

inline constexpr int kCheckpointVersion = 1;

inline std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string header = "MMQ-CHECKPOINT " + std::to_string(kCheckpointVersion) + "\n";
  for (const auto& [k, v] : ckpt.meta) {
    if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ContractError("checkpoint meta entries must be single tokens: " + k);
    }
    header += "meta " + k + " " + v + "\n";
  }
  std::string payload;
  for (const auto& p : ckpt.params) {
    std::string dims;
    for (std::size_t i = 0; i < p.value.rank(); ++i) {
      if (i) dims += "x";
      dims += std::to_string(p.value.dim(i));
    }
    header += "param " + p.name + " " + dims + " f32 " + std::to_string(payload.size()) + "\n";
    for (float v : p.value.data()) io::append_le32(payload, v);
  }
  header += "payload " + std::to_string(payload.size()) + "\nend\n";
  return header + payload;
}

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& source) {
  Checkpoint ckpt;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  auto next_line = [&]() {
    const std::size_t end = bytes.find('\n', pos);
    if (end == std::string_view::npos) throw ParseError(source, line_no + 1, "truncated header");
    std::string line(bytes.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    return line;
  };
  const std::string magic = next_line();
  if (magic != "MMQ-CHECKPOINT " + std::to_string(kCheckpointVersion)) {
    throw ParseError(source, 1, "unsupported checkpoint header '" + magic + "'");
  }
  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset;
  };
  std::vector<Entry> entries;
  std::size_t payload_size = 0;
  while (true) {
    const std::string line = next_line();
    if (line == "end") break;
    auto fields = io::split(line, ' ');
    if (fields[0] == "meta" && fields.size() >= 3) {
      std::string value = line.substr(fields[0].size() + fields[1].size() + 2);
      ckpt.meta.emplace_back(fields[1], value);
    } else if (fields[0] == "param" && fields.size() == 5 && fields[3] == "f32") {
      Entry e{fields[1], {}, 0};
      try {
        for (const auto& d : io::split(fields[2], 'x')) e.shape.push_back(std::stoul(d));
        e.offset = std::stoul(fields[4]);
      } catch (const std::exception&) {
        throw ParseError(source, line_no, "malformed param entry");
      }
      entries.push_back(std::move(e));
    } else if (fields[0] == "payload" && fields.size() == 2) {
      payload_size = std::stoul(fields[1]);
    } else {
      throw ParseError(source, line_no, "unrecognized header line '" + line + "'");
    }
  }
  if (bytes.size() - pos != payload_size) {
    throw DataError(source + ": payload is " + std::to_string(bytes.size() - pos) +
                    " bytes, header declares " + std::to_string(payload_size));
  }
  const auto* base = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
  for (const auto& e : entries) {
    const std::size_t n = numel(e.shape);
    if (e.offset + 4 * n > payload_size) throw DataError(source + ": param " + e.name + " overruns payload");
    std::vector<float> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = io::read_le32(base + e.offset + 4 * i);
    ckpt.params.push_back({e.name, Tensor(e.shape, std::move(data))});
  }
  return ckpt;
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  io::write_file_atomic(path, encode_checkpoint(ckpt));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path), path.string());
}

}  // namespace mmq
