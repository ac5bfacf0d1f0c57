#include "chunklm/checkpoint.hpp"

#include <fstream>
#include <sstream>

namespace chunklm {

void Checkpoint::add(const std::string& name, const Tensor& t) {
  arrays.emplace_back(name, t);
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : arrays) {
    if (n == name) return &t;
  }
  return nullptr;
}

const Tensor& Checkpoint::require(const std::string& name) const {
  const Tensor* t = find(name);
  if (!t) throw IoError("checkpoint missing array: " + name);
  return *t;
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream man(path + ".manifest");
  if (!man) throw IoError("cannot write checkpoint manifest: " + path + ".manifest");
  man << "format chunklm-checkpoint v1\n";
  man << "precision " << (precision == Precision::kF32 ? "f32" : "f64") << "\n";
  for (const auto& [k, v] : config) man << "config " << k << " " << v << "\n";
  for (const auto& [name, t] : arrays) {
    man << "tensor " << name;
    for (int i = 0; i < t.rank(); ++i) man << " " << t.dim(i);
    man << "\n";
  }

  std::ofstream bin(path + ".bin", std::ios::binary);
  if (!bin) throw IoError("cannot write checkpoint data: " + path + ".bin");
  for (const auto& [name, t] : arrays) {
    if (precision == Precision::kF32) {
      std::vector<float> buf(static_cast<std::size_t>(t.size()));
      for (std::int64_t i = 0; i < t.size(); ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(t[i]);
      bin.write(reinterpret_cast<const char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
    } else {
      bin.write(reinterpret_cast<const char*>(t.data()),
                static_cast<std::streamsize>(static_cast<std::size_t>(t.size()) * sizeof(double)));
    }
  }
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream man(path + ".manifest");
  if (!man) throw IoError("cannot open checkpoint manifest: " + path + ".manifest");
  Checkpoint ck;
  std::vector<std::pair<std::string, Shape>> entries;
  std::string line;
  while (std::getline(man, line)) {
    std::istringstream is(line);
    std::string tag;
    is >> tag;
    if (tag == "precision") {
      std::string p;
      is >> p;
      if (p == "f32") ck.precision = Precision::kF32;
      else if (p == "f64") ck.precision = Precision::kF64;
      else throw IoError("unknown checkpoint precision: " + p);
    } else if (tag == "config") {
      std::string k;
      is >> k;
      std::string v;
      std::getline(is, v);
      if (!v.empty() && v.front() == ' ') v.erase(0, 1);
      ck.config[k] = v;
    } else if (tag == "tensor") {
      std::string name;
      is >> name;
      Shape shape;
      int d;
      while (is >> d) shape.push_back(d);
      entries.emplace_back(name, shape);
    }
  }

  std::ifstream bin(path + ".bin", std::ios::binary);
  if (!bin) throw IoError("cannot open checkpoint data: " + path + ".bin");
  for (auto& [name, shape] : entries) {
    const std::size_t n = static_cast<std::size_t>(shape_numel(shape));
    std::vector<double> data(n);
    if (ck.precision == Precision::kF32) {
      std::vector<float> buf(n);
      bin.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
      for (std::size_t i = 0; i < n; ++i) data[i] = buf[i];
    } else {
      bin.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
    }
    if (!bin) throw IoError("truncated checkpoint data: " + path + ".bin");
    ck.arrays.emplace_back(name, Tensor(shape, std::move(data)));
  }
  return ck;
}

}  // namespace chunklm
