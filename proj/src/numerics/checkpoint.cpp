#include "evis/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace evis {

namespace {

void put_u64(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> bytes{};
  for (std::size_t i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(bytes.data(), 8);
}

std::uint64_t get_u64(std::istream& is) {
  std::array<unsigned char, 8> bytes{};
  is.read(reinterpret_cast<char*>(bytes.data()), 8);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  nlohmann::ordered_json header;
  header["tensors"] = nlohmann::ordered_json::object();
  for (const auto& [name, tensor] : checkpoint.tensors) {
    if (header["tensors"].contains(name)) throw std::invalid_argument("checkpoint: duplicate tensor " + name);
    header["tensors"][name] = tensor.shape();
  }
  header["hyperparameters"] = checkpoint.hyperparameters;
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot write " + path.string());
  put_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, tensor] : checkpoint.tensors) {
    for (double v : tensor.values()) put_u64(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  const std::uint64_t length = get_u64(is);
  std::string text(length, '\0');
  is.read(text.data(), static_cast<std::streamsize>(length));
  if (!is) throw std::runtime_error("checkpoint: truncated header in " + path.string());
  const auto header = nlohmann::ordered_json::parse(text);

  Checkpoint checkpoint;
  if (header.contains("hyperparameters")) checkpoint.hyperparameters = header["hyperparameters"];
  for (const auto& [name, shape_json] : header.at("tensors").items()) {
    Shape shape = shape_json.get<Shape>();
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = std::bit_cast<double>(get_u64(is));
    checkpoint.tensors.emplace_back(name, Tensor(std::move(shape), std::move(values)));
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw std::runtime_error("checkpoint: trailing bytes in " + path.string());
  }
  return checkpoint;
}

}  // namespace evis
