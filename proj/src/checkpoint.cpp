// SPDX-License-Identifier: Apache-2.0
#include "lipdistill/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace lipdistill::train {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

fs::path blob_path(const fs::path& manifest) {
  fs::path p = manifest;
  p.replace_extension(".bin");
  return p;
}

[[noreturn]] void corrupt(const fs::path& path, const std::string& why) {
  throw std::runtime_error("corrupt checkpoint " + path.string() + ": " + why);
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::string blob;
  json tensors = json::array();
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    const Tensor& t = ckpt.params.values()[i];
    const std::size_t bytes = t.size() * sizeof(double);
    tensors.push_back({{"name", ckpt.params.names()[i]},
                       {"shape", t.shape()},
                       {"offset", blob.size()},
                       {"bytes", bytes}});
    blob.append(reinterpret_cast<const char*>(t.raw()), bytes);
  }
  const fs::path bin = blob_path(path);
  json manifest = {{"format", "lipdistill-checkpoint"},
                   {"version", kCheckpointVersion},
                   {"role", ckpt.role},
                   {"epoch", ckpt.epoch},
                   {"rng_state", ckpt.rng_state},
                   {"config", ckpt.config},
                   {"metrics", ckpt.metrics},
                   {"tensors", tensors},
                   {"blob", {{"file", bin.filename().string()},
                             {"bytes", blob.size()},
                             {"fnv1a", fnv1a(blob.data(), blob.size())}}}};
  {
    std::ofstream out(bin, std::ios::binary | std::ios::trunc);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw std::runtime_error("cannot write " + bin.string());
  }
  std::ofstream out(path, std::ios::trunc);
  out << manifest.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    corrupt(path, e.what());
  }
  if (!manifest.is_object() || manifest.value("format", "") != "lipdistill-checkpoint") {
    corrupt(path, "not a checkpoint manifest");
  }
  const int version = manifest.value("version", -1);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint version mismatch in " + path.string() + ": file has " +
                             std::to_string(version) + ", this build reads " +
                             std::to_string(kCheckpointVersion));
  }

  // Everything is validated into locals first so a failure leaves no partial state.
  try {
    const json& jb = manifest.at("blob");
    const fs::path bin = path.parent_path() / jb.at("file").get<std::string>();
    std::ifstream bin_in(bin, std::ios::binary);
    if (!bin_in) corrupt(path, "missing blob " + bin.string());
    std::ostringstream buf;
    buf << bin_in.rdbuf();
    const std::string blob = buf.str();
    if (blob.size() != jb.at("bytes").get<std::size_t>()) {
      corrupt(path, "blob is " + std::to_string(blob.size()) + " bytes, manifest says " +
                        std::to_string(jb.at("bytes").get<std::size_t>()));
    }
    if (fnv1a(blob.data(), blob.size()) != jb.at("fnv1a").get<std::uint64_t>()) {
      corrupt(path, "blob hash mismatch");
    }

    Checkpoint ckpt;
    for (const auto& jt : manifest.at("tensors")) {
      const auto shape = jt.at("shape").get<Shape>();
      const auto offset = jt.at("offset").get<std::size_t>();
      const auto bytes = jt.at("bytes").get<std::size_t>();
      if (bytes != shape_size(shape) * sizeof(double) || offset + bytes > blob.size()) {
        corrupt(path, "tensor " + jt.at("name").get<std::string>() + " out of range");
      }
      std::vector<double> data(shape_size(shape));
      std::memcpy(data.data(), blob.data() + offset, bytes);
      ckpt.params.add(jt.at("name").get<std::string>(), Tensor(shape, std::move(data)));
    }
    ckpt.role = manifest.at("role").get<std::string>();
    ckpt.epoch = manifest.at("epoch").get<std::size_t>();
    ckpt.rng_state = manifest.at("rng_state").get<std::string>();
    ckpt.config = manifest.at("config");
    ckpt.metrics = manifest.at("metrics");
    return ckpt;
  } catch (const json::exception& e) {
    corrupt(path, e.what());
  } catch (const std::invalid_argument& e) {
    corrupt(path, e.what());
  }
}

void assign_params(nn::ParameterSet& dst, const nn::ParameterSet& src) {
  if (dst.size() != src.size()) {
    throw std::invalid_argument("parameter count mismatch: model has " + std::to_string(dst.size()) +
                                ", checkpoint has " + std::to_string(src.size()));
  }
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const std::string& name = dst.names()[i];
    if (!src.contains(name)) throw std::invalid_argument("checkpoint lacks parameter " + name);
    const Tensor& value = src.get(name);
    if (value.shape() != dst.values()[i].shape()) {
      throw std::invalid_argument("shape mismatch for " + name + ": model " +
                                  shape_to_string(dst.values()[i].shape()) + ", checkpoint " +
                                  shape_to_string(value.shape()));
    }
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst.values()[i] = src.get(dst.names()[i]);
}

}  // namespace lipdistill::train
