#pragma once

// Parameter checkpoints.
//
//   DIBCKPT 1
//   meta <key> <value...>
//   net <name> <spec text>
//   tensor <net>.<index> <offset> <count> <rows> <cols>
//   end
//   <count * 8 bytes of little-endian IEEE-754 doubles>

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dib/errors.hpp"
#include "dib/models.hpp"

namespace dib {

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::map<std::string, std::string> nets;                 // name -> spec text
  std::map<std::string, std::vector<Tensor>> tensors;      // name -> parameter values in layer order

  void add_net(const std::string& name, const std::string& spec_text, const std::vector<ad::Var>& params) {
    nets[name] = spec_text;
    auto& ts = tensors[name];
    ts.clear();
    for (const auto& p : params) ts.push_back(p->value);
  }

  const std::vector<Tensor>& values(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ArgumentError("checkpoint has no network named " + name);
    return it->second;
  }

  const std::string& spec(const std::string& name) const {
    auto it = nets.find(name);
    if (it == nets.end()) throw ArgumentError("checkpoint has no network named " + name);
    return it->second;
  }
};

namespace detail {

inline void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

inline double get_f64(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(p[b]) << (8 * b);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  std::ostringstream head;
  std::string blob;
  head << "DIBCKPT 1\n";
  for (const auto& [k, v] : ck.meta) head << "meta " << k << ' ' << v << '\n';
  for (const auto& [name, spec] : ck.nets) head << "net " << name << ' ' << spec << '\n';
  std::size_t offset = 0;
  for (const auto& [name, ts] : ck.tensors) {
    for (std::size_t i = 0; i < ts.size(); ++i) {
      head << "tensor " << name << '.' << i << ' ' << offset << ' ' << ts[i].size() << ' ' << ts[i].rows() << ' '
           << (ts[i].rank() == 2 ? ts[i].cols() : 0) << '\n';
      for (double v : ts[i].data) detail::put_f64(blob, v);
      offset += ts[i].size();
    }
  }
  head << "end\n";
  return head.str() + blob;
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  Checkpoint ck;
  std::size_t pos = 0, line_no = 0;
  auto next_line = [&]() {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw ParseError("truncated checkpoint header", line_no + 1);
    std::string l = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    return l;
  };
  if (next_line() != "DIBCKPT 1") throw ParseError("not a checkpoint file", 1);
  struct Entry {
    std::string name;
    std::size_t index, offset, count, rows, cols;
  };
  std::vector<Entry> entries;
  for (;;) {
    const std::string l = next_line();
    if (l == "end") break;
    std::istringstream is(l);
    std::string kind;
    is >> kind;
    if (kind == "meta" || kind == "net") {
      std::string key, rest;
      is >> key;
      std::getline(is >> std::ws, rest);
      (kind == "meta" ? ck.meta : ck.nets)[key] = rest;
    } else if (kind == "tensor") {
      std::string full;
      Entry e{};
      if (!(is >> full >> e.offset >> e.count >> e.rows >> e.cols)) throw ParseError("bad tensor entry", line_no);
      const auto dot = full.rfind('.');
      if (dot == std::string::npos) throw ParseError("tensor name without index", line_no);
      e.name = full.substr(0, dot);
      e.index = std::stoul(full.substr(dot + 1));
      entries.push_back(e);
    } else {
      throw ParseError("unknown checkpoint record '" + kind + "'", line_no);
    }
  }
  const auto* blob = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
  const std::size_t avail = (bytes.size() - pos) / 8;
  for (const auto& e : entries) {
    if (e.offset + e.count > avail) throw ParseError("tensor data past end of file");
    auto& ts = ck.tensors[e.name];
    if (ts.size() != e.index) throw ParseError("tensor entries out of order for " + e.name);
    Tensor t = e.cols ? Tensor::matrix(e.rows, e.cols) : Tensor({e.count});
    if (t.size() != e.count) throw ParseError("tensor shape does not match count for " + e.name);
    for (std::size_t i = 0; i < e.count; ++i) t.data[i] = detail::get_f64(blob + 8 * (e.offset + i));
    ts.push_back(std::move(t));
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ArgumentError("cannot open " + path + " for writing");
  const std::string bytes = serialize_checkpoint(ck);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArgumentError("cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_checkpoint(ss.str());
}

/// Rebuilds an encoder from a checkpoint written by train_encoder.
inline Encoder load_encoder(const Checkpoint& ck, const std::string& name = "encoder") {
  Encoder e(EncoderSpec::from_text(ck.spec(name)), 0);
  e.restore(ck.values(name));
  return e;
}

inline Classifier load_classifier(const Checkpoint& ck, const std::string& name) {
  Classifier c = init_classifier(FamilySpec::from_text(ck.spec(name)), 0);
  c.restore(ck.values(name));
  return c;
}

}  // namespace dib
