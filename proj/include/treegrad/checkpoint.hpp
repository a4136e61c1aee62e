#pragma once

// Text checkpoint format for trees. Layout:
//
//   TREEGRAD-CKPT v1
//   structure <fingerprint>
//   leaves <count>
//   leaf <i> <record>          one line per leaf, in flatten order
//   crc64 <16 hex digits>      FNV-1a over every byte above this line
//
// Records: "tensor <dtype> <shape> <hex bytes|->", "int <n>",
// "float <16 hex bit pattern>", "bool true|false", "fn <name>",
// "opaque <token>", "sentinel". Floats round-trip by bit pattern, so NaN and
// infinities survive. Traced values cannot be saved.

#include <bit>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "pytree.hpp"

namespace treegrad {

inline constexpr std::string_view kCheckpointMagic = "TREEGRAD-CKPT v1";

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

namespace detail {

inline std::string to_hex_u64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

inline std::string bytes_to_hex(std::string_view bytes) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  s.reserve(bytes.size() * 2);
  for (char c : bytes) {
    auto b = static_cast<unsigned char>(c);
    s.push_back(digits[b >> 4]);
    s.push_back(digits[b & 0xf]);
  }
  return s;
}

inline int hex_digit(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

inline std::string hex_to_bytes(std::string_view hex, std::string_view what) {
  if (hex.size() % 2 != 0)
    throw std::invalid_argument("[checkpoint] odd hex length in " + std::string(what));
  std::string out;
  out.reserve(hex.size() / 2);
  for (std::size_t i = 0; i < hex.size(); i += 2) {
    int hi = hex_digit(hex[i]), lo = hex_digit(hex[i + 1]);
    if (hi < 0 || lo < 0)
      throw std::invalid_argument("[checkpoint] invalid hex in " + std::string(what));
    out.push_back(static_cast<char>((hi << 4) | lo));
  }
  return out;
}

inline std::string leaf_record(const Leaf& leaf) {
  if (leaf.is_tensor()) {
    const Tensor& t = leaf.tensor();
    std::string data;
    t.append_le_bytes(data);
    std::string rec = "tensor ";
    rec += dtype_name(t.dtype());
    rec += ' ';
    rec += t.shape().str();
    rec += ' ';
    rec += data.empty() ? std::string("-") : bytes_to_hex(data);
    return rec;
  }
  if (leaf.is_scalar_int()) return "int " + std::to_string(leaf.scalar_int_value());
  if (leaf.is_scalar_float())
    return "float " + to_hex_u64(std::bit_cast<std::uint64_t>(leaf.scalar_float_value()));
  if (leaf.is_scalar_bool()) return leaf.scalar_bool_value() ? "bool true" : "bool false";
  if (leaf.is_function()) return "fn " + leaf.function_ref().name;
  if (leaf.is_opaque()) return "opaque " + std::to_string(leaf.opaque_value().token);
  if (leaf.is_sentinel()) return "sentinel";
  throw std::invalid_argument("[checkpoint] cannot serialise a traced value");
}

inline Shape parse_shape_text(TextCursor& c) {
  c.expect('(');
  std::vector<std::int64_t> dims;
  if (!c.try_take(")")) {
    while (true) {
      std::int64_t d = 0;
      if (!std::isdigit(static_cast<unsigned char>(c.peek()))) c.fail("expected a dimension");
      while (std::isdigit(static_cast<unsigned char>(c.peek()))) d = d * 10 + (c.take() - '0');
      dims.push_back(d);
      if (c.try_take(")")) break;
      c.expect(',');
      if (c.try_take(")")) break;
    }
  }
  return Shape(std::move(dims));
}

inline Leaf parse_leaf_record(std::string_view rec) {
  auto fail = [&rec]() -> Leaf {
    throw std::invalid_argument("[checkpoint] malformed leaf record: " + std::string(rec));
  };
  std::size_t sp = rec.find(' ');
  std::string_view kind = rec.substr(0, sp == std::string_view::npos ? rec.size() : sp);
  std::string_view rest = sp == std::string_view::npos ? std::string_view{} : rec.substr(sp + 1);
  if (kind == "sentinel") return rest.empty() ? Leaf::sentinel() : fail();
  if (rest.empty()) return fail();
  if (kind == "tensor") {
    std::size_t sp1 = rest.find(' ');
    if (sp1 == std::string_view::npos) return fail();
    std::string_view dname = rest.substr(0, sp1);
    std::string_view rem = rest.substr(sp1 + 1);
    std::size_t sp2 = rem.find(' ');
    if (sp2 == std::string_view::npos) return fail();
    TextCursor cur{rem.substr(0, sp2), 0, "checkpoint"};
    Shape shape = parse_shape_text(cur);
    if (cur.pos != sp2) return fail();
    std::string_view hex = rem.substr(sp2 + 1);
    std::string bytes = hex == "-" ? std::string() : hex_to_bytes(hex, "tensor data");
    auto n = static_cast<std::size_t>(shape.numel());
    auto take_u64 = [&bytes](std::size_t i) {
      std::uint64_t w = 0;
      for (int b = 7; b >= 0; --b)
        w = (w << 8) | static_cast<unsigned char>(bytes[i * 8 + static_cast<std::size_t>(b)]);
      return w;
    };
    if (dname == "f64") {
      if (bytes.size() != n * 8)
        throw std::invalid_argument("[checkpoint] tensor data length mismatch");
      std::vector<double> vals(n);
      for (std::size_t i = 0; i < n; ++i) vals[i] = std::bit_cast<double>(take_u64(i));
      return Leaf::tensor(Tensor::from_f64(std::move(shape), std::move(vals)));
    }
    if (dname == "i64") {
      if (bytes.size() != n * 8)
        throw std::invalid_argument("[checkpoint] tensor data length mismatch");
      std::vector<std::int64_t> vals(n);
      for (std::size_t i = 0; i < n; ++i) vals[i] = static_cast<std::int64_t>(take_u64(i));
      return Leaf::tensor(Tensor::from_i64(std::move(shape), std::move(vals)));
    }
    if (dname == "bool") {
      if (bytes.size() != n)
        throw std::invalid_argument("[checkpoint] tensor data length mismatch");
      std::vector<std::uint8_t> vals(bytes.begin(), bytes.end());
      return Leaf::tensor(Tensor::from_bool(std::move(shape), std::move(vals)));
    }
    return fail();
  }
  if (kind == "int") {
    std::size_t used = 0;
    std::int64_t v = 0;
    try {
      v = std::stoll(std::string(rest), &used);
    } catch (const std::exception&) {
      return fail();
    }
    if (used != rest.size()) return fail();
    return Leaf::scalar_int(v);
  }
  if (kind == "float") {
    if (rest.size() != 16) return fail();
    std::uint64_t bits = 0;
    for (char c : rest) {
      int d = hex_digit(c);
      if (d < 0) return fail();
      bits = (bits << 4) | static_cast<std::uint64_t>(d);
    }
    return Leaf::scalar_float(std::bit_cast<double>(bits));
  }
  if (kind == "bool") {
    if (rest == "true") return Leaf::scalar_bool(true);
    if (rest == "false") return Leaf::scalar_bool(false);
    return fail();
  }
  if (kind == "fn") return Leaf::function(FunctionRef{std::string(rest)});
  if (kind == "opaque") {
    std::size_t used = 0;
    std::uint64_t tok = 0;
    try {
      tok = std::stoull(std::string(rest), &used);
    } catch (const std::exception&) {
      return fail();
    }
    if (used != rest.size()) return fail();
    return Leaf::opaque(Opaque{tok});
  }
  return fail();
}

}  // namespace detail

inline void save_checkpoint(std::ostream& out, const PyTree& tree) {
  Flattened f = flatten(tree);
  std::string body(kCheckpointMagic);
  body += "\nstructure ";
  body += f.structure.text();
  body += "\nleaves ";
  body += std::to_string(f.leaves.size());
  body += '\n';
  for (std::size_t i = 0; i < f.leaves.size(); ++i) {
    body += "leaf ";
    body += std::to_string(i);
    body += ' ';
    body += detail::leaf_record(f.leaves[i]);
    body += '\n';
  }
  std::uint64_t crc = fnv1a64(body);
  body += "crc64 ";
  body += detail::to_hex_u64(crc);
  body += '\n';
  out.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!out) throw std::runtime_error("[checkpoint] write failed");
}

inline PyTree load_checkpoint(std::istream& in) {
  std::string text(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>{});
  std::size_t first_nl = text.find('\n');
  std::string_view first_line =
      std::string_view(text).substr(0, first_nl == std::string::npos ? text.size() : first_nl);
  if (!first_line.starts_with("TREEGRAD-CKPT"))
    throw std::invalid_argument("[checkpoint] not a checkpoint file");
  if (first_line != kCheckpointMagic)
    throw std::invalid_argument("[checkpoint] unsupported version '" + std::string(first_line) + "'");

  std::size_t crc_pos = text.rfind("\ncrc64 ");
  if (crc_pos == std::string::npos) throw std::invalid_argument("[checkpoint] missing checksum");
  std::string_view crc_line = std::string_view(text).substr(crc_pos + 1);
  if (crc_line.ends_with('\n')) crc_line.remove_suffix(1);
  std::string_view crc_hex = crc_line.substr(6);
  if (crc_hex.size() != 16) throw std::invalid_argument("[checkpoint] missing checksum");
  std::uint64_t stored = 0;
  for (char c : crc_hex) {
    int d = detail::hex_digit(c);
    if (d < 0) throw std::invalid_argument("[checkpoint] missing checksum");
    stored = (stored << 4) | static_cast<std::uint64_t>(d);
  }
  std::string_view body = std::string_view(text).substr(0, crc_pos + 1);
  if (fnv1a64(body) != stored)
    throw std::invalid_argument("[checkpoint] checksum mismatch (corrupt file)");

  // body lines: magic, structure, leaves, leaf*
  std::vector<std::string_view> lines;
  for (std::size_t pos = 0; pos < body.size();) {
    std::size_t nl = body.find('\n', pos);
    lines.push_back(body.substr(pos, nl - pos));
    pos = nl + 1;
  }
  if (lines.size() < 3 || !lines[1].starts_with("structure ") || !lines[2].starts_with("leaves "))
    throw std::invalid_argument("[checkpoint] malformed header");
  StructureFingerprint structure = StructureFingerprint::parse(std::string(lines[1].substr(10)));
  std::size_t count = 0;
  {
    std::string_view n = lines[2].substr(7);
    if (n.empty()) throw std::invalid_argument("[checkpoint] malformed header");
    for (char c : n) {
      if (!std::isdigit(static_cast<unsigned char>(c)))
        throw std::invalid_argument("[checkpoint] malformed header");
      count = count * 10 + static_cast<std::size_t>(c - '0');
    }
  }
  if (count != structure.leaf_count())
    throw std::invalid_argument("[checkpoint] structure needs " + std::to_string(structure.leaf_count()) +
                                " leaves, file has " + std::to_string(count));
  if (lines.size() != 3 + count)
    throw std::invalid_argument("[checkpoint] expected " + std::to_string(count) + " leaf records, found " +
                                std::to_string(lines.size() - 3));
  std::vector<Leaf> leaves;
  leaves.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::string_view line = lines[3 + i];
    std::string head = "leaf " + std::to_string(i) + " ";
    if (!line.starts_with(head)) throw std::invalid_argument("[checkpoint] leaf records out of order");
    leaves.push_back(detail::parse_leaf_record(line.substr(head.size())));
  }
  return unflatten(structure, leaves);
}

inline void save_checkpoint_file(const std::string& path, const PyTree& tree) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("[checkpoint] cannot open '" + path + "' for writing");
  save_checkpoint(out, tree);
}

inline PyTree load_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("[checkpoint] cannot open '" + path + "'");
  return load_checkpoint(in);
}

}  // namespace treegrad
