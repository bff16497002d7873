#include "cfbench/nn/serialize.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace cfbench::nn {

namespace {
constexpr char kMagic[8] = {'C', 'F', 'B', 'C', 'K', 'P', 'T', '1'};
}

const Tensor<float>& Checkpoint::f32_at(const std::string& name) const {
  const Entry* e = find(name);
  if (!e || e->dtype != "f32") throw IoError("checkpoint has no f32 tensor '" + name + "'");
  return e->f32;
}

const Tensor<double>& Checkpoint::f64_at(const std::string& name) const {
  const Entry* e = find(name);
  if (!e || e->dtype != "f64") throw IoError("checkpoint has no f64 tensor '" + name + "'");
  return e->f64;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  Json header;
  header["schema_version"] = 1;
  header["meta"] = ck.meta;
  Json table = Json::array();
  for (const auto& e : ck.entries) {
    Json row;
    row["name"] = e.name;
    row["dtype"] = e.dtype;
    row["shape"] = e.dtype == "f32" ? e.f32.shape() : e.f64.shape();
    table.push_back(std::move(row));
  }
  header["tensors"] = std::move(table);
  std::string hbytes = header.dump();

  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out.write(kMagic, sizeof(kMagic));
    uint64_t hlen = hbytes.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(hbytes.data(), static_cast<std::streamsize>(hbytes.size()));
    for (const auto& e : ck.entries) {
      if (e.dtype == "f32")
        out.write(reinterpret_cast<const char*>(e.f32.data()),
                  static_cast<std::streamsize>(e.f32.numel() * sizeof(float)));
      else
        out.write(reinterpret_cast<const char*>(e.f64.data()),
                  static_cast<std::streamsize>(e.f64.numel() * sizeof(double)));
    }
    if (!out) throw IoError("short write on checkpoint: " + path);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("not a checkpoint file: " + path);
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in || hlen > (1ull << 30)) throw IoError("corrupt checkpoint header: " + path);
  std::string hbytes(hlen, '\0');
  in.read(hbytes.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw IoError("truncated checkpoint header: " + path);
  Json header = Json::parse(hbytes, nullptr, false);
  if (header.is_discarded()) throw IoError("unparseable checkpoint header: " + path);
  if (header.value("schema_version", 0) != 1)
    throw IoError("unsupported checkpoint schema in " + path);

  Checkpoint ck;
  ck.meta = header.value("meta", Json::object());
  for (const auto& row : header.at("tensors")) {
    Checkpoint::Entry e;
    e.name = row.at("name").get<std::string>();
    e.dtype = row.at("dtype").get<std::string>();
    std::vector<int> shape = row.at("shape").get<std::vector<int>>();
    if (e.dtype == "f32") {
      e.f32 = Tensor<float>(shape);
      in.read(reinterpret_cast<char*>(e.f32.data()),
              static_cast<std::streamsize>(e.f32.numel() * sizeof(float)));
    } else if (e.dtype == "f64") {
      e.f64 = Tensor<double>(shape);
      in.read(reinterpret_cast<char*>(e.f64.data()),
              static_cast<std::streamsize>(e.f64.numel() * sizeof(double)));
    } else {
      throw IoError("unknown tensor dtype '" + e.dtype + "' in " + path);
    }
    if (!in) throw IoError("truncated checkpoint payload: " + path);
    ck.entries.push_back(std::move(e));
  }
  return ck;
}

}  // namespace cfbench::nn
