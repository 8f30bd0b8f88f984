#include "mitodet/weights_io.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "json_detail.hpp"

namespace mitodet {

namespace {

constexpr char kMagic[5] = {'G', 'N', 'E', 'T', '1'};
constexpr uint32_t kVersion = 1;

void put_u32_le(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

uint32_t get_u32_le(const unsigned char* p) {
  return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) |
         (uint32_t(p[3]) << 24);
}

[[noreturn]] void fail(const std::string& path, size_t offset,
                       const std::string& what) {
  throw IoError("weights file '" + path + "': " + what + " at offset " +
                std::to_string(offset));
}

}  // namespace

void save_weights(const Model& model, const std::string& path) {
  json header;
  header["config"] = json(model.config());
  header["fingerprint"] = model.config().fingerprint();
  header["tensors"] = json::array();
  for (const ParamRef& p : model.params()) {
    header["tensors"].push_back(
        {{"name", p.name}, {"shape", p.shape}, {"dtype", "f32le"}});
  }
  const std::string hjson = header.dump();

  std::string buf;
  buf.append(kMagic, sizeof(kMagic));
  put_u32_le(buf, kVersion);
  put_u32_le(buf, static_cast<uint32_t>(hjson.size()));
  buf += hjson;
  for (const ParamRef& p : model.params()) {
    for (float f : *p.value) {
      uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32_le(buf, bits);
    }
  }

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("short write to '" + path + "'");
}

Model load_weights(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open weights file '" + path + "'");
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)),
                                 std::istreambuf_iterator<char>());

  if (buf.size() < 13) fail(path, buf.size(), "truncated header");
  if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0)
    fail(path, 0, "bad magic");
  const uint32_t version = get_u32_le(buf.data() + 5);
  if (version != kVersion)
    fail(path, 5, "unsupported version " + std::to_string(version));
  const uint32_t hlen = get_u32_le(buf.data() + 9);
  if (13 + size_t(hlen) > buf.size()) fail(path, 13, "truncated JSON header");

  json header;
  try {
    header = json::parse(buf.begin() + 13, buf.begin() + 13 + hlen);
  } catch (const json::exception& e) {
    fail(path, 13, std::string("invalid JSON header (") + e.what() + ")");
  }

  Model model(header.at("config").get<ModelConfig>());
  const std::string fp = header.at("fingerprint").get<std::string>();
  if (fp != model.config().fingerprint())
    fail(path, 13, "config fingerprint mismatch");

  size_t off = 13 + size_t(hlen);
  auto& params = model.params();
  const auto& tensors = header.at("tensors");
  if (tensors.size() != params.size())
    fail(path, 13,
         "header lists " + std::to_string(tensors.size()) + " tensors, model has " +
             std::to_string(params.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& desc = tensors[i];
    const std::string name = desc.at("name").get<std::string>();
    if (name != params[i].name)
      fail(path, off, "tensor '" + name + "' out of order, expected '" +
                          params[i].name + "'");
    if (desc.at("dtype").get<std::string>() != "f32le")
      fail(path, off, "tensor '" + name + "' has unsupported dtype");
    const std::vector<int> shape = desc.at("shape").get<std::vector<int>>();
    if (shape != params[i].shape)
      fail(path, off, "tensor '" + name + "' shape mismatch");
    std::vector<float>& dst = *params[i].value;
    const size_t bytes = dst.size() * 4;
    if (off + bytes > buf.size())
      fail(path, off, "truncated payload for tensor '" + name + "'");
    for (size_t k = 0; k < dst.size(); ++k) {
      const uint32_t bits = get_u32_le(buf.data() + off + k * 4);
      std::memcpy(&dst[k], &bits, 4);
    }
    off += bytes;
  }
  if (off != buf.size()) fail(path, off, "trailing bytes");
  return model;
}

}  // namespace mitodet
