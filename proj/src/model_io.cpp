#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"
#include "tilelm/errors.hpp"
#include "tilelm/model.hpp"

namespace tilelm {

static_assert(std::endian::native == std::endian::little,
              "weight files are little-endian; big-endian hosts need byte swapping");

namespace {

constexpr char kMagic[4] = {'T', 'L', 'M', '1'};
constexpr std::size_t kAlign = 64;

std::size_t align_up(std::size_t n) { return (n + kAlign - 1) / kAlign * kAlign; }

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"head_dim", c.head_dim}, {"d_ff", c.d_ff},
          {"max_seq_len", c.max_seq_len}, {"eos_token", c.eos_token},
          {"tied_embeddings", c.tied_embeddings}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.head_dim = j.at("head_dim").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.eos_token = j.at("eos_token").get<TokenId>();
  c.tied_embeddings = j.value("tied_embeddings", true);
  return c;
}

}  // namespace

// Tensor offsets are relative to the payload section, which starts at the
// first 64-byte boundary after the header.
void save_model(const Model& model, const std::filesystem::path& path) {
  auto tensors = model.tensors();
  nlohmann::json dir = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& t : tensors) {
    const std::size_t bytes = t.data.size() * sizeof(float);
    dir.push_back({{"name", t.name},
                   {"shape", {t.rows, t.cols}},
                   {"offset", offset},
                   {"length", bytes},
                   {"dtype", "f32"}});
    offset = align_up(offset + bytes);
  }
  const std::string header =
      nlohmann::json{{"config", config_to_json(model.config())}, {"tensors", dir}}.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(kMagic, 4);
  const auto hlen = static_cast<std::uint32_t>(header.size());
  out.write(reinterpret_cast<const char*>(&hlen), 4);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  const std::size_t data_start = align_up(8 + header.size());
  std::string pad(data_start - 8 - header.size(), '\0');
  out.write(pad.data(), static_cast<std::streamsize>(pad.size()));
  std::size_t written = 0;
  for (const auto& t : tensors) {
    const std::size_t bytes = t.data.size() * sizeof(float);
    out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(bytes));
    written += bytes;
    pad.assign(align_up(written) - written, '\0');
    out.write(pad.data(), static_cast<std::streamsize>(pad.size()));
    written += pad.size();
  }
  if (!out) throw Error("failed writing " + path.string());
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorruptFile("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw CorruptFile("bad magic");
  std::uint32_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + 4, 4);
  if (8 + static_cast<std::size_t>(hlen) > bytes.size()) throw CorruptFile("truncated header");

  nlohmann::json header;
  ModelConfig config;
  try {
    header = nlohmann::json::parse(bytes.substr(8, hlen));
    config = config_from_json(header.at("config"));
    config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFile(std::string("malformed header: ") + e.what());
  } catch (const InvalidConfig& e) {
    throw CorruptFile(std::string("invalid config: ") + e.what());
  }

  Model model(config);
  auto tensors = model.tensors();
  const auto& dir = header.contains("tensors") ? header["tensors"] : nlohmann::json();
  if (!dir.is_array() || dir.size() != tensors.size())
    throw CorruptFile("tensor directory does not match config");

  const std::size_t data_start = align_up(8 + hlen);
  try {
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const auto& e = dir[i];
      auto& t = tensors[i];
      if (e.at("name").get<std::string>() != t.name)
        throw CorruptFile("expected tensor '" + t.name + "', found '" +
                          e.at("name").get<std::string>() + "'");
      if (e.at("dtype").get<std::string>() != "f32") throw CorruptFile(t.name + ": dtype is not f32");
      const auto shape = e.at("shape").get<std::vector<std::size_t>>();
      if (shape != std::vector<std::size_t>{t.rows, t.cols})
        throw CorruptFile(t.name + ": shape does not match config");
      const std::size_t length = e.at("length").get<std::size_t>();
      const std::size_t offset = e.at("offset").get<std::size_t>();
      if (length != t.data.size() * sizeof(float))
        throw CorruptFile(t.name + ": byte length does not match shape");
      if (offset % kAlign != 0) throw CorruptFile(t.name + ": offset not 64-byte aligned");
      if (data_start + offset + length > bytes.size()) throw CorruptFile(t.name + ": truncated");
      std::memcpy(t.data.data(), bytes.data() + data_start + offset, length);
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFile(std::string("malformed tensor directory: ") + e.what());
  }
  model.finalize();
  return model;
}

}  // namespace tilelm
