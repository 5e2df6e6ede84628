#include "fedrec/serialize.hpp"

#include <cstdint>
#include <fstream>

#include "fedrec/errors.hpp"

namespace fedrec {

namespace {

// host is assumed little-endian (x86/arm64); entries written row-major
void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

void write_matrix(std::ostream& out, const Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double v = m(i, j);
      out.write(reinterpret_cast<const char*>(&v), 8);
    }
}

void read_matrix(std::istream& in, Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      double v = 0;
      in.read(reinterpret_cast<char*>(&v), 8);
      m(i, j) = v;
    }
}

}  // namespace

void save_adapters(const AdapterSet& set, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("save_adapters: cannot open " + path);
  write_u32(out, static_cast<std::uint32_t>(set.size()));
  for (const auto& [id, ap] : set) {
    write_u32(out, static_cast<std::uint32_t>(id.size()));
    out.write(id.data(), static_cast<std::streamsize>(id.size()));
    write_u32(out, static_cast<std::uint32_t>(ap.rank));
    write_u32(out, static_cast<std::uint32_t>(ap.b_mat.rows()));
    write_u32(out, static_cast<std::uint32_t>(ap.a_mat.cols()));
    write_matrix(out, ap.a_mat);
    write_matrix(out, ap.b_mat);
  }
}

AdapterSet load_adapters(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("load_adapters: cannot open " + path);
  AdapterSet set;
  const std::uint32_t count = read_u32(in);
  for (std::uint32_t l = 0; l < count; ++l) {
    const std::uint32_t id_len = read_u32(in);
    std::string id(id_len, '\0');
    in.read(id.data(), id_len);
    AdapterPair ap;
    ap.layer_id = id;
    ap.rank = static_cast<int>(read_u32(in));
    const std::uint32_t d_out = read_u32(in);
    const std::uint32_t d_in = read_u32(in);
    ap.a_mat.resize(ap.rank, d_in);
    ap.b_mat.resize(d_out, ap.rank);
    read_matrix(in, ap.a_mat);
    read_matrix(in, ap.b_mat);
    if (!in) throw ParseError("load_adapters: truncated file " + path);
    set.emplace(id, std::move(ap));
  }
  return set;
}

std::size_t adapter_byte_size(const AdapterSet& set) {
  std::size_t bytes = 4;
  for (const auto& [id, ap] : set)
    bytes += 4 + id.size() + 12 +
             8 * (static_cast<std::size_t>(ap.a_mat.size()) +
                  static_cast<std::size_t>(ap.b_mat.size()));
  return bytes;
}

void save_backbone(const BackboneParams& p, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("save_backbone: cannot open " + path);
  write_u32(out, static_cast<std::uint32_t>(p.config.embed_dim));
  write_u32(out, static_cast<std::uint32_t>(p.config.vocab_size));
  write_u32(out, static_cast<std::uint32_t>(p.config.max_seq_len));
  write_u32(out, static_cast<std::uint32_t>(p.config.num_blocks));
  write_u32(out, p.frozen ? 1u : 0u);
  write_matrix(out, p.token_embedding);
  write_matrix(out, p.positional_embedding);
  for (const auto& blk : p.blocks) {
    write_matrix(out, blk.wq);
    write_matrix(out, blk.wk);
    write_matrix(out, blk.wv);
    write_matrix(out, blk.wo);
  }
  write_matrix(out, p.output_projection);
}

BackboneParams load_backbone(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("load_backbone: cannot open " + path);
  BackboneParams p;
  p.config.embed_dim = static_cast<int>(read_u32(in));
  p.config.vocab_size = static_cast<int>(read_u32(in));
  p.config.max_seq_len = static_cast<int>(read_u32(in));
  p.config.num_blocks = static_cast<int>(read_u32(in));
  p.frozen = read_u32(in) != 0;
  const int d = p.config.embed_dim;
  p.token_embedding.resize(p.config.vocab_size, d);
  p.positional_embedding.resize(p.config.max_seq_len, d);
  read_matrix(in, p.token_embedding);
  read_matrix(in, p.positional_embedding);
  p.blocks.resize(p.config.num_blocks);
  for (auto& blk : p.blocks) {
    blk.wq.resize(d, d);
    blk.wk.resize(d, d);
    blk.wv.resize(d, d);
    blk.wo.resize(d, d);
    read_matrix(in, blk.wq);
    read_matrix(in, blk.wk);
    read_matrix(in, blk.wv);
    read_matrix(in, blk.wo);
  }
  p.output_projection.resize(p.config.vocab_size, d);
  read_matrix(in, p.output_projection);
  if (!in) throw ParseError("load_backbone: truncated file " + path);
  return p;
}

}  // namespace fedrec
