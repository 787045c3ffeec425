#include "attnprune/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "attnprune/errors.hpp"

namespace attnprune {

namespace {

using nlohmann::json;

constexpr const char* kCheckpointMagic = "APCK";
constexpr int kCheckpointVersion = 1;
constexpr const char* kDatasetMagic = "APDS";
constexpr int kDatasetVersion = 1;

void write_doubles_le(std::ostream& out, const std::vector<double>& values) {
  for (double v : values) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(buf), 8);
  }
}

void read_doubles_le(std::istream& in, std::vector<double>& values, const std::string& what) {
  std::vector<unsigned char> buf(values.size() * 8);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(in.gcount()) != buf.size()) {
    throw IoError(what + ": payload count mismatch, expected " + std::to_string(buf.size()) +
                  " bytes, got " + std::to_string(in.gcount()));
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[i * 8 + b]) << (8 * b);
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    values[i] = v;
  }
}

json plan_to_json(const PrunePlan& plan) {
  json j;
  j["pattern"] = to_string(plan.pattern);
  j["declared_sparsity"] = plan.declared_sparsity;
  j["achieved_sparsity"] = plan.achieved_sparsity;
  j["n_layers"] = plan.n_layers();
  json removals = json::array();
  for (int l = 0; l < plan.n_layers(); ++l) {
    for (const auto& [h, c] : plan.layers[l].qk()) removals.push_back({l, "qk", h, c});
    for (const auto& [h, c] : plan.layers[l].vo()) removals.push_back({l, "vo", h, c});
  }
  j["removals"] = std::move(removals);
  return j;
}

PrunePlan plan_from_json(const json& j) {
  PrunePlan plan;
  plan.pattern = pattern_from_string(j.at("pattern").get<std::string>());
  plan.declared_sparsity = j.at("declared_sparsity").get<double>();
  plan.achieved_sparsity = j.at("achieved_sparsity").get<double>();
  plan.layers.assign(j.at("n_layers").get<int>(), PruneMask{});
  for (const auto& r : j.at("removals")) {
    const int layer = r.at(0).get<int>();
    const std::string side = r.at(1).get<std::string>();
    const int head = r.at(2).get<int>();
    const int channel = r.at(3).get<int>();
    if (layer < 0 || layer >= plan.n_layers()) {
      throw IoError("checkpoint history: removal layer out of range");
    }
    if (side == "qk") plan.layers[layer].add_qk(head, channel);
    else if (side == "vo") plan.layers[layer].add_vo(head, channel);
    else throw IoError("checkpoint history: unknown side '" + side + "'");
  }
  return plan;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  ckpt.model.validate();

  json manifest;
  manifest["model"] = {
      {"d_in", ckpt.model.d_in},
      {"d", ckpt.model.d},
      {"n_classes", ckpt.model.n_classes},
      {"init_seed", ckpt.model.init_seed},
  };
  json layers = json::array();
  for (const auto& b : ckpt.model.blocks) {
    layers.push_back({{"n_h_qk", b.n_h_qk},
                      {"n_c_qk", b.n_c_qk},
                      {"n_h_vo", b.n_h_vo},
                      {"n_c_vo", b.n_c_vo},
                      {"scale", b.scale}});
  }
  manifest["model"]["layers"] = std::move(layers);
  json history = json::array();
  for (const auto& plan : ckpt.history) history.push_back(plan_to_json(plan));
  manifest["history"] = std::move(history);
  manifest["param_count"] = ckpt.model.param_count();

  const std::string manifest_text = manifest.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  out << "manifest_bytes " << manifest_text.size() << '\n';
  out << manifest_text << '\n';

  write_doubles_le(out, ckpt.model.input_proj.data());
  for (const auto& b : ckpt.model.blocks) {
    write_doubles_le(out, b.w_q.data());
    write_doubles_le(out, b.w_k.data());
    write_doubles_le(out, b.w_v.data());
    write_doubles_le(out, b.w_o.data());
  }
  write_doubles_le(out, ckpt.model.classifier.data());
  if (!out) throw IoError("write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");

  std::string magic;
  int version = -1;
  in >> magic >> version;
  if (magic != kCheckpointMagic) {
    throw IoError("'" + path + "' is not a checkpoint (bad magic '" + magic + "')");
  }
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                  std::to_string(kCheckpointVersion) + ")");
  }
  std::string key;
  std::size_t manifest_bytes = 0;
  in >> key >> manifest_bytes;
  if (key != "manifest_bytes" || !in) throw IoError("checkpoint header: missing manifest length");
  in.ignore(1);  // newline after the length
  std::string manifest_text(manifest_bytes, '\0');
  in.read(manifest_text.data(), static_cast<std::streamsize>(manifest_bytes));
  if (static_cast<std::size_t>(in.gcount()) != manifest_bytes) {
    throw IoError("checkpoint manifest truncated");
  }
  in.ignore(1);  // newline after the manifest

  json manifest;
  try {
    manifest = json::parse(manifest_text);
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }

  Checkpoint ckpt;
  try {
    const json& jm = manifest.at("model");
    ckpt.model.d_in = jm.at("d_in").get<int>();
    ckpt.model.d = jm.at("d").get<int>();
    ckpt.model.n_classes = jm.at("n_classes").get<int>();
    ckpt.model.init_seed = jm.at("init_seed").get<std::uint64_t>();
    ckpt.model.input_proj = Matrix(ckpt.model.d_in, ckpt.model.d);
    for (const auto& jl : jm.at("layers")) {
      AttentionBlock b;
      b.d = ckpt.model.d;
      b.n_h_qk = jl.at("n_h_qk").get<int>();
      b.n_c_qk = jl.at("n_c_qk").get<int>();
      b.n_h_vo = jl.at("n_h_vo").get<int>();
      b.n_c_vo = jl.at("n_c_vo").get<int>();
      b.scale = jl.at("scale").get<double>();
      b.w_q = Matrix(b.qk_rows(), b.d);
      b.w_k = Matrix(b.qk_rows(), b.d);
      b.w_v = Matrix(b.vo_rows(), b.d);
      b.w_o = Matrix(b.d, b.vo_rows());
      ckpt.model.blocks.push_back(std::move(b));
    }
    ckpt.model.classifier = Matrix(ckpt.model.d, ckpt.model.n_classes);
    for (const auto& jp : manifest.at("history")) ckpt.history.push_back(plan_from_json(jp));

    const std::size_t declared = manifest.at("param_count").get<std::size_t>();
    if (declared != ckpt.model.param_count()) {
      throw IoError("checkpoint manifest declares " + std::to_string(declared) +
                    " parameters but the layer shapes sum to " +
                    std::to_string(ckpt.model.param_count()));
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint manifest is missing fields: ") + e.what());
  }

  read_doubles_le(in, ckpt.model.input_proj.data(), "checkpoint");
  for (auto& b : ckpt.model.blocks) {
    read_doubles_le(in, b.w_q.data(), "checkpoint");
    read_doubles_le(in, b.w_k.data(), "checkpoint");
    read_doubles_le(in, b.w_v.data(), "checkpoint");
    read_doubles_le(in, b.w_o.data(), "checkpoint");
  }
  read_doubles_le(in, ckpt.model.classifier.data(), "checkpoint");

  char extra;
  if (in.read(&extra, 1)) {
    throw IoError("checkpoint has trailing bytes past the declared payload");
  }

  check_finite(ckpt.model.input_proj, "checkpoint load");
  for (const auto& b : ckpt.model.blocks) {
    check_finite(b.w_q, "checkpoint load");
    check_finite(b.w_k, "checkpoint load");
    check_finite(b.w_v, "checkpoint load");
    check_finite(b.w_o, "checkpoint load");
  }
  check_finite(ckpt.model.classifier, "checkpoint load");
  ckpt.model.validate();
  return ckpt;
}

namespace {

void save_split(const std::vector<Sample>& split, const DatasetConfig& cfg,
                const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << kDatasetMagic << ' ' << kDatasetVersion << '\n';
  out << "samples " << split.size() << " tokens " << cfg.n_tokens << " d_in " << cfg.d_in << '\n';
  for (const Sample& s : split) {
    std::uint64_t label = static_cast<std::uint64_t>(s.label);
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((label >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(buf), 8);
    write_doubles_le(out, s.tokens.data());
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

std::vector<Sample> load_split(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::string magic, key1, key2, key3;
  int version = -1;
  std::size_t samples = 0;
  int tokens = 0, d_in = 0;
  in >> magic >> version >> key1 >> samples >> key2 >> tokens >> key3 >> d_in;
  if (magic != kDatasetMagic || version != kDatasetVersion || key1 != "samples" ||
      key2 != "tokens" || key3 != "d_in" || !in) {
    throw IoError("'" + path + "' is not a dataset split file");
  }
  in.ignore(1);
  std::vector<Sample> out;
  out.reserve(samples);
  for (std::size_t i = 0; i < samples; ++i) {
    unsigned char buf[8];
    in.read(reinterpret_cast<char*>(buf), 8);
    if (in.gcount() != 8) throw IoError("'" + path + "' truncated at sample " + std::to_string(i));
    std::uint64_t label = 0;
    for (int b = 0; b < 8; ++b) label |= static_cast<std::uint64_t>(buf[b]) << (8 * b);
    Sample s;
    s.label = static_cast<int>(label);
    s.tokens = Matrix(tokens, d_in);
    read_doubles_le(in, s.tokens.data(), "'" + path + "'");
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

void save_dataset(const SynthDataset& dataset, const std::string& dir) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["seed"] = dataset.config.seed;
  manifest["n_train"] = dataset.config.n_train;
  manifest["n_val"] = dataset.config.n_val;
  manifest["n_test"] = dataset.config.n_test;
  manifest["n_tokens"] = dataset.config.n_tokens;
  manifest["d_in"] = dataset.config.d_in;
  manifest["n_classes"] = dataset.config.n_classes;
  manifest["teacher"] = {{"d", dataset.config.teacher_d},
                         {"n_h", dataset.config.teacher_n_h},
                         {"n_c", dataset.config.teacher_n_c},
                         {"layers", dataset.config.teacher_layers}};
  manifest["class_histogram"] = dataset.class_histogram;

  std::ofstream mf(dir + "/manifest.json");
  if (!mf) throw IoError("cannot open '" + dir + "/manifest.json' for writing");
  mf << manifest.dump(2) << '\n';

  save_split(dataset.train, dataset.config, dir + "/train.bin");
  save_split(dataset.val, dataset.config, dir + "/val.bin");
  save_split(dataset.test, dataset.config, dir + "/test.bin");
}

SynthDataset load_dataset(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) throw IoError("cannot open '" + dir + "/manifest.json' for reading");
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    throw IoError(std::string("dataset manifest is not valid JSON: ") + e.what());
  }
  SynthDataset ds;
  try {
    ds.config.seed = manifest.at("seed").get<std::uint64_t>();
    ds.config.n_train = manifest.at("n_train").get<int>();
    ds.config.n_val = manifest.at("n_val").get<int>();
    ds.config.n_test = manifest.at("n_test").get<int>();
    ds.config.n_tokens = manifest.at("n_tokens").get<int>();
    ds.config.d_in = manifest.at("d_in").get<int>();
    ds.config.n_classes = manifest.at("n_classes").get<int>();
    ds.config.teacher_d = manifest.at("teacher").at("d").get<int>();
    ds.config.teacher_n_h = manifest.at("teacher").at("n_h").get<int>();
    ds.config.teacher_n_c = manifest.at("teacher").at("n_c").get<int>();
    ds.config.teacher_layers = manifest.at("teacher").at("layers").get<int>();
    ds.class_histogram = manifest.at("class_histogram").get<std::vector<long>>();
  } catch (const json::exception& e) {
    throw IoError(std::string("dataset manifest is missing fields: ") + e.what());
  }
  ds.train = load_split(dir + "/train.bin");
  ds.val = load_split(dir + "/val.bin");
  ds.test = load_split(dir + "/test.bin");
  if (ds.train.size() != static_cast<std::size_t>(ds.config.n_train) ||
      ds.val.size() != static_cast<std::size_t>(ds.config.n_val) ||
      ds.test.size() != static_cast<std::size_t>(ds.config.n_test)) {
    throw IoError("dataset split sizes disagree with the manifest");
  }
  return ds;
}

}  // namespace attnprune
