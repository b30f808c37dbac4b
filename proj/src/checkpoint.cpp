// SPDX-License-Identifier: Apache-2.0
#include "flans/checkpoint.hpp"

#include <json.hpp>

#include "flans/fts.hpp"

namespace flans {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string model_config_to_json(const ModelConfig& c) {
  json j;
  j["classes"] = c.classes;
  j["alpha"] = c.alpha;
  j["canon"] = {{"group_order", c.canon.group_order}, {"layers", c.canon.layers},   {"hidden", c.canon.hidden},
                {"kernel", c.canon.kernel},           {"pool", c.canon.pool},       {"tie_tolerance", c.canon.tie_tolerance}};
  j["text"] = {{"token_dim", c.text.token_dim}, {"hidden", c.text.hidden}, {"embed_dim", c.text.embed_dim}};
  j["seg"] = {{"channels", c.seg.channels}, {"embed_dim", c.seg.embed_dim}, {"coord_channels", c.seg.coord_channels}};
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  try {
    const auto j = json::parse(text);
    ModelConfig c;
    c.classes = j.at("classes").get<int>();
    c.alpha = j.at("alpha").get<double>();
    const auto& k = j.at("canon");
    c.canon.group_order = k.at("group_order").get<int>();
    c.canon.layers = k.at("layers").get<int>();
    c.canon.hidden = k.at("hidden").get<int>();
    c.canon.kernel = k.at("kernel").get<int>();
    c.canon.pool = k.at("pool").get<int>();
    c.canon.tie_tolerance = k.at("tie_tolerance").get<double>();
    const auto& t = j.at("text");
    c.text.token_dim = t.at("token_dim").get<int>();
    c.text.hidden = t.at("hidden").get<int>();
    c.text.embed_dim = t.at("embed_dim").get<int>();
    const auto& s = j.at("seg");
    c.seg.channels = s.at("channels").get<std::vector<int>>();
    c.seg.embed_dim = s.at("embed_dim").get<int>();
    c.seg.coord_channels = s.at("coord_channels").get<bool>();
    return c;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::IoError, std::string("bad model config: ") + e.what());
  }
}

void save_checkpoint(const fs::path& dir, const FlansModel<float>& model, const CheckpointMeta& meta) {
  std::error_code ec;
  fs::remove_all(dir, ec);
  fs::create_directories(dir / "tensors", ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());
  json index;
  index["version"] = kCheckpointVersion;
  index["model"] = json::parse(model_config_to_json(model.config()));
  index["vocabulary"] = json::parse(model.text().vocab().to_json());
  index["stages"] = meta.stages;
  index["class_names"] = meta.class_names;
  index["seed"] = meta.seed;
  index["rng_state"] = meta.rng_state;
  index["train_config"] = meta.train_config.empty() ? json::object() : json::parse(meta.train_config);
  json tensors = json::array();
  for (const auto* store : model.stores()) {
    for (const auto* p : store->all()) {
      const std::string file = "tensors/" + p->name + ".fts";
      write_fts(dir / file, p->value);
      tensors.push_back({{"name", p->name}, {"file", file}});
    }
  }
  index["tensors"] = tensors;
  write_file(dir / "index.json", index.dump(2));
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
  json index;
  try {
    index = json::parse(read_file(dir / "index.json"));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::IoError, "corrupt checkpoint index: " + std::string(e.what()));
  }
  try {
    if (index.at("version").get<int>() != kCheckpointVersion)
      throw Error(ErrorCode::IoError, "unsupported checkpoint version " + index.at("version").dump());
    CheckpointMeta meta;
    meta.stages = index.at("stages").get<std::vector<std::string>>();
    meta.class_names = index.at("class_names").get<std::vector<std::string>>();
    meta.seed = index.at("seed").get<std::uint64_t>();
    meta.rng_state = index.at("rng_state").get<std::string>();
    if (!index.at("train_config").empty()) meta.train_config = index.at("train_config").dump();
    FlansModel<float> model(Vocabulary::from_json(index.at("vocabulary").dump()),
                            model_config_from_json(index.at("model").dump()), 0);
    std::size_t loaded = 0;
    for (const auto& entry : index.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      Parameter<float>* target = nullptr;
      for (auto* store : model.stores())
        if (auto* p = store->find(name)) target = p;
      if (!target) throw Error(ErrorCode::IoError, "checkpoint tensor " + name + " has no slot in the model");
      Tensor<float> value = read_fts<float>(dir / entry.at("file").get<std::string>());
      if (value.shape() != target->value.shape())
        throw Error(ErrorCode::IoError, "checkpoint tensor " + name + " has shape " + to_string(value.shape()));
      target->value = std::move(value);
      ++loaded;
    }
    if (loaded != model.parameters().size())
      throw Error(ErrorCode::IoError, "checkpoint is missing parameter tensors");
    return {std::move(model), std::move(meta)};
  } catch (const json::exception& e) {
    throw Error(ErrorCode::IoError, "bad checkpoint index: " + std::string(e.what()));
  }
}

}  // namespace flans
