#include "melodi/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "binary_io.hpp"

namespace melodi {

namespace {

constexpr char kMagic[9] = "MLDICKP1";
constexpr std::uint32_t kVersion = 1;

struct Header {
  std::uint64_t hash = 0;
  std::string config_text;
};

Header read_header(std::istream& in) {
  io::expect_magic(in, kMagic);
  if (const auto v = io::get<std::uint32_t>(in); v != kVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(v));
  }
  Header h;
  h.hash = io::get<std::uint64_t>(in);
  h.config_text.resize(io::get<std::uint64_t>(in));
  in.read(h.config_text.data(), static_cast<std::streamsize>(h.config_text.size()));
  if (!in) throw std::runtime_error("truncated checkpoint header");
  return h;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  return in;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp);
    const std::string text = serialize_model_config(model.config());
    io::put_magic(out, kMagic);
    io::put<std::uint32_t>(out, kVersion);
    io::put<std::uint64_t>(out, config_hash(model.config()));
    io::put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    const auto& params = model.store().all();
    io::put<std::uint64_t>(out, params.size());
    for (const Parameter& p : params) {
      io::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
      out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
      io::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensor.rank()));
      for (std::size_t d : p.tensor.shape()) io::put<std::uint64_t>(out, d);
      for (real v : p.tensor.data()) io::put<float>(out, static_cast<float>(v));
    }
    if (!out) throw std::runtime_error("failed writing checkpoint " + tmp);
  }
  std::rename(tmp.c_str(), path.c_str());
}

ModelConfig read_checkpoint_config(const std::string& path) {
  auto in = open_in(path);
  const Header h = read_header(in);
  ModelConfig cfg = parse_config(h.config_text).model;
  if (config_hash(cfg) != h.hash) throw std::runtime_error("checkpoint config hash mismatch in " + path);
  return cfg;
}

void load_checkpoint(const std::string& path, Model& model) {
  auto in = open_in(path);
  const Header h = read_header(in);
  if (h.hash != config_hash(model.config())) {
    throw std::runtime_error("checkpoint " + path + " was written for a different model config");
  }
  auto& params = model.store().all();
  const auto count = io::get<std::uint64_t>(in);
  if (count != params.size()) {
    throw std::runtime_error("checkpoint holds " + std::to_string(count) + " tensors, model has " +
                             std::to_string(params.size()));
  }
  for (Parameter& p : params) {
    std::string name(io::get<std::uint32_t>(in), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    if (name != p.name) throw std::runtime_error("checkpoint record '" + name + "' where '" + p.name + "' expected");
    Shape shape(io::get<std::uint32_t>(in));
    for (std::size_t& d : shape) d = io::get<std::uint64_t>(in);
    if (shape != p.tensor.shape()) {
      throw std::runtime_error("checkpoint shape " + shape_str(shape) + " for " + name + ", model has " +
                               shape_str(p.tensor.shape()));
    }
    for (real& v : p.tensor.mutable_data()) v = static_cast<real>(io::get<float>(in));
  }
}

Model load_model(const std::string& path) {
  Model model(read_checkpoint_config(path));
  load_checkpoint(path, model);
  return model;
}

}  // namespace melodi
