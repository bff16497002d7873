#include "cfbench/data/dataset.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "cfbench/nn/rng.hpp"

namespace cfbench::data {

using Json = nlohmann::ordered_json;

namespace {
constexpr char kMagic[8] = {'C', 'F', 'B', 'D', 'S', 'E', 'T', '1'};
}

bool Dataset::has_attr(const std::string& attr_name) const {
  for (const auto& a : attrs)
    if (a.name == attr_name) return true;
  return false;
}

const AttrColumn& Dataset::attr(const std::string& attr_name) const {
  for (const auto& a : attrs)
    if (a.name == attr_name) return a;
  throw ValidationError("dataset '" + name + "' has no attribute '" + attr_name + "'");
}

std::vector<int> Dataset::indices_of(Split s) const {
  std::vector<int> out;
  for (int i = 0; i < n; ++i)
    if (split[i] == static_cast<uint8_t>(s)) out.push_back(i);
  return out;
}

nn::TensorF Dataset::image_row(int i) const {
  if (i < 0 || i >= n) throw ValidationError("dataset index out of range");
  const int64_t d = static_cast<int64_t>(height) * width * channels;
  nn::TensorF img({1, static_cast<int>(d)});
  std::memcpy(img.data(), images.data() + i * d, static_cast<size_t>(d) * sizeof(float));
  return img;
}

scm::Observation Dataset::observation(int i) const {
  scm::Observation obs;
  for (const auto& a : attrs) {
    if (a.kind == scm::VarKind::continuous)
      obs.emplace(a.name, scm::Value::number(a.num[i]));
    else
      obs.emplace(a.name, scm::Value::category(a.cat[i]));
  }
  obs.emplace(image_name, scm::Value::image(image_row(i)));
  return obs;
}

void Dataset::validate() const {
  if (n <= 0) throw ValidationError("dataset is empty");
  const int64_t d = static_cast<int64_t>(height) * width * channels;
  if (d <= 0) throw ValidationError("dataset image shape is degenerate");
  if (images.rows() != n || images.numel() != n * d)
    throw ValidationError("dataset image block has the wrong shape");
  if (static_cast<int>(split.size()) != n)
    throw ValidationError("dataset split column has the wrong length");
  for (uint8_t s : split)
    if (s > 2) throw ValidationError("dataset split column has an invalid tag");
  for (const auto& a : attrs) {
    size_t len = a.kind == scm::VarKind::continuous ? a.num.size() : a.cat.size();
    if (static_cast<int>(len) != n)
      throw ValidationError("attribute '" + a.name + "' has the wrong length");
    if (a.kind == scm::VarKind::categorical)
      for (int c : a.cat)
        if (c < 0 || c >= a.categories)
          throw ValidationError("attribute '" + a.name + "' has an out-of-range category");
  }
}

void Dataset::save(const std::string& path) const {
  validate();
  Json header;
  header["schema_version"] = 1;
  header["name"] = name;
  header["seed"] = seed;
  header["n"] = n;
  header["height"] = height;
  header["width"] = width;
  header["channels"] = channels;
  header["image_name"] = image_name;
  Json cols = Json::array();
  for (const auto& a : attrs) {
    Json row;
    row["name"] = a.name;
    row["kind"] = scm::to_string(a.kind);
    if (a.kind == scm::VarKind::categorical) row["categories"] = a.categories;
    cols.push_back(std::move(row));
  }
  header["attrs"] = std::move(cols);
  std::string hbytes = header.dump();

  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write dataset: " + path);
    out.write(kMagic, sizeof(kMagic));
    uint64_t hlen = hbytes.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(hbytes.data(), static_cast<std::streamsize>(hbytes.size()));
    out.write(reinterpret_cast<const char*>(images.data()),
              static_cast<std::streamsize>(images.numel() * sizeof(float)));
    for (const auto& a : attrs) {
      if (a.kind == scm::VarKind::continuous)
        out.write(reinterpret_cast<const char*>(a.num.data()),
                  static_cast<std::streamsize>(a.num.size() * sizeof(double)));
      else
        out.write(reinterpret_cast<const char*>(a.cat.data()),
                  static_cast<std::streamsize>(a.cat.size() * sizeof(int)));
    }
    out.write(reinterpret_cast<const char*>(split.data()),
              static_cast<std::streamsize>(split.size()));
    if (!out) throw IoError("short write on dataset: " + path);
  }
  std::filesystem::rename(tmp, path);
}

Dataset Dataset::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("not a dataset file: " + path);
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in || hlen > (1ull << 30)) throw IoError("corrupt dataset header: " + path);
  std::string hbytes(hlen, '\0');
  in.read(hbytes.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw IoError("truncated dataset header: " + path);
  Json header = Json::parse(hbytes, nullptr, false);
  if (header.is_discarded()) throw IoError("unparseable dataset header: " + path);
  if (header.value("schema_version", 0) != 1)
    throw IoError("unsupported dataset schema in " + path);

  Dataset ds;
  ds.name = header.at("name").get<std::string>();
  ds.seed = header.at("seed").get<uint64_t>();
  ds.n = header.at("n").get<int>();
  ds.height = header.at("height").get<int>();
  ds.width = header.at("width").get<int>();
  ds.channels = header.at("channels").get<int>();
  ds.image_name = header.at("image_name").get<std::string>();

  const int64_t d = static_cast<int64_t>(ds.height) * ds.width * ds.channels;
  ds.images = nn::TensorF({ds.n, static_cast<int>(d)});
  in.read(reinterpret_cast<char*>(ds.images.data()),
          static_cast<std::streamsize>(ds.images.numel() * sizeof(float)));
  for (const auto& row : header.at("attrs")) {
    AttrColumn a;
    a.name = row.at("name").get<std::string>();
    a.kind = scm::var_kind_from_string(row.at("kind").get<std::string>());
    if (a.kind == scm::VarKind::categorical) {
      a.categories = row.at("categories").get<int>();
      a.cat.resize(ds.n);
      in.read(reinterpret_cast<char*>(a.cat.data()),
              static_cast<std::streamsize>(a.cat.size() * sizeof(int)));
    } else {
      a.num.resize(ds.n);
      in.read(reinterpret_cast<char*>(a.num.data()),
              static_cast<std::streamsize>(a.num.size() * sizeof(double)));
    }
    ds.attrs.push_back(std::move(a));
  }
  ds.split.resize(ds.n);
  in.read(reinterpret_cast<char*>(ds.split.data()), static_cast<std::streamsize>(ds.n));
  if (!in) throw IoError("truncated dataset payload: " + path);
  ds.validate();
  return ds;
}

std::vector<uint8_t> assign_splits(int n, uint64_t seed) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  nn::Rng rng(hash_str(seed, "splits"));
  rng.shuffle(idx);
  int n_train = static_cast<int>(n * 0.60);
  int n_val = static_cast<int>(n * 0.15);
  std::vector<uint8_t> split(n, static_cast<uint8_t>(Split::test));
  for (int i = 0; i < n_train; ++i) split[idx[i]] = static_cast<uint8_t>(Split::train);
  for (int i = n_train; i < n_train + n_val; ++i) split[idx[i]] = static_cast<uint8_t>(Split::val);
  return split;
}

void fit_parent_stats(scm::ParentCodec& codec, const Dataset& ds, Split split) {
  std::vector<int> idx = ds.indices_of(split);
  if (idx.empty()) throw ValidationError("parent stats: empty split");
  for (auto& e : codec.entries) {
    const AttrColumn& col = ds.attr(e.name);
    if (col.kind != e.kind ||
        (e.kind == scm::VarKind::categorical && col.categories != e.categories))
      throw ValidationError("parent stats: attribute '" + e.name + "' changed shape");
    if (e.kind != scm::VarKind::continuous) continue;
    double mean = 0.0;
    for (int i : idx) mean += col.num[i];
    mean /= static_cast<double>(idx.size());
    double var = 0.0;
    for (int i : idx) var += (col.num[i] - mean) * (col.num[i] - mean);
    var /= static_cast<double>(idx.size());
    if (var < 1e-16)
      throw ValidationError("parent stats: attribute '" + e.name + "' is constant");
    e.mean = mean;
    e.stddev = std::sqrt(var);
  }
}

nn::TensorF encode_parent_rows(const scm::ParentCodec& codec, const Dataset& ds,
                               const std::vector<int>& rows) {
  const int P = codec.dim();
  nn::TensorF out({static_cast<int>(rows.size()), P});
  std::vector<scm::Value> row(codec.entries.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    for (size_t e = 0; e < codec.entries.size(); ++e) {
      const AttrColumn& col = ds.attr(codec.entries[e].name);
      row[e] = col.kind == scm::VarKind::categorical ? scm::Value::category(col.cat[rows[i]])
                                                     : scm::Value::number(col.num[rows[i]]);
    }
    Eigen::VectorXd enc = codec.encode(row);
    for (int j = 0; j < P; ++j)
      out[static_cast<int64_t>(i) * P + j] = static_cast<float>(enc[j]);
  }
  return out;
}

nn::TensorF gather_images(const Dataset& ds, const std::vector<int>& rows) {
  const int64_t d = static_cast<int64_t>(ds.height) * ds.width * ds.channels;
  nn::TensorF out({static_cast<int>(rows.size()), static_cast<int>(d)});
  for (size_t i = 0; i < rows.size(); ++i)
    std::copy_n(ds.images.data() + rows[i] * d, d, out.data() + static_cast<int64_t>(i) * d);
  return out;
}

}  // namespace cfbench::data
