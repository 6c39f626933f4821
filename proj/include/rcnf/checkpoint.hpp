#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "rcnf/dataset.hpp"
#include "rcnf/error.hpp"
#include "rcnf/flow.hpp"
#include "rcnf/task_codec.hpp"

namespace rcnf {

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json net_config_to_json(const RcpqConfig& c) {
  return {{"d_model", c.d_model},
          {"heads", c.heads},
          {"gru_layers", c.gru_layers},
          {"mlp_hidden", c.mlp_hidden},
          {"dropout", c.dropout}};
}

inline RcpqConfig net_config_from_json(const nlohmann::json& j, RcpqConfig c = {}) {
  c.d_model = j.value("d_model", c.d_model);
  c.heads = j.value("heads", c.heads);
  c.gru_layers = j.value("gru_layers", c.gru_layers);
  c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
  c.dropout = j.value("dropout", c.dropout);
  return c;
}

inline nlohmann::json flow_config_to_json(const FlowConfig& c) {
  return {{"T", c.frames},
          {"N", c.points},
          {"K", c.steps},
          {"G", c.groups},
          {"state_dim", c.state_dim},
          {"net", net_config_to_json(c.net)},
          {"score_mode", to_string(c.score_mode)},
          {"use_task_embedding", c.use_task_embedding},
          {"use_robot_state", c.use_robot_state},
          {"seed", c.seed}};
}

inline FlowConfig flow_config_from_json(const nlohmann::json& j, FlowConfig c = {}) {
  try {
    c.frames = j.value("T", c.frames);
    c.points = j.value("N", c.points);
    c.steps = j.value("K", c.steps);
    c.groups = j.value("G", default_groups(c.points));
    c.state_dim = j.value("state_dim", c.state_dim);
    if (j.contains("net")) c.net = net_config_from_json(j.at("net"), c.net);
    if (j.contains("score_mode")) c.score_mode = score_mode_from_string(j.at("score_mode").get<std::string>());
    c.use_task_embedding = j.value("use_task_embedding", c.use_task_embedding);
    c.use_robot_state = j.value("use_robot_state", c.use_robot_state);
    c.seed = j.value("seed", c.seed);
    return c;
  } catch (const nlohmann::json::exception& ex) {
    throw Error(Errc::parse_error, std::string("flow config: ") + ex.what());
  }
}

inline nlohmann::json model_to_json(const FlowModel& m) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& st : m.steps()) {
    steps.push_back({{"actnorm_initialized", st.actnorm.initialized},
                     {"flagged_channels", st.actnorm.flagged_channels},
                     {"perm", st.mixing.perm},
                     {"condition_on_first", st.condition_on_first}});
  }
  nlohmann::json params = nlohmann::json::array();
  for (const auto& [name, v] : m.params().entries()) {
    const auto& val = v.value();
    params.push_back({{"name", name},
                      {"shape", {val.rows(), val.cols()}},
                      {"data", std::vector<double>(val.data(), val.data() + val.size())}});
  }
  return {{"format", "rcnf-checkpoint"},
          {"version", kCheckpointVersion},
          {"config", flow_config_to_json(m.config())},
          {"codebook", codebook_to_json(m.codebook())},
          {"norm_stats", {{"mean", m.norm_stats().mean}, {"std", m.norm_stats().std}}},
          {"steps", steps},
          {"params", params}};
}

inline FlowModel model_from_json(const nlohmann::json& j) {
  try {
    require(j.value("format", std::string()) == "rcnf-checkpoint", Errc::parse_error, "not a model checkpoint");
    require(j.at("version").get<int>() == kCheckpointVersion, Errc::parse_error, "unsupported checkpoint version");
    NormStats ns{j.at("norm_stats").at("mean").get<std::vector<double>>(),
                 j.at("norm_stats").at("std").get<std::vector<double>>()};
    FlowModel m(flow_config_from_json(j.at("config")), codebook_from_json(j.at("codebook")), ns);
    const auto& steps = j.at("steps");
    require(steps.size() == m.steps().size(), Errc::shape_mismatch, "checkpoint step count mismatch");
    for (std::size_t i = 0; i < steps.size(); ++i) {
      auto& st = m.steps()[i];
      st.actnorm.initialized = steps[i].at("actnorm_initialized").get<bool>();
      st.actnorm.flagged_channels = steps[i].at("flagged_channels").get<std::vector<int>>();
      st.mixing.perm = steps[i].at("perm").get<std::vector<Index>>();
      st.condition_on_first = steps[i].at("condition_on_first").get<bool>();
      require(st.mixing.perm.size() == static_cast<std::size_t>(m.config().channels()), Errc::shape_mismatch,
              "checkpoint permutation has the wrong size");
    }
    const auto& params = j.at("params");
    require(params.size() == m.params().entries().size(), Errc::shape_mismatch, "checkpoint parameter count mismatch");
    for (const auto& p : params) {
      Var v = m.params().get(p.at("name").get<std::string>());
      const auto shape = p.at("shape").get<std::vector<Index>>();
      const auto data = p.at("data").get<std::vector<double>>();
      require(shape.size() == 2 && shape[0] == v.rows() && shape[1] == v.cols() &&
                  static_cast<Index>(data.size()) == v.rows() * v.cols(),
              Errc::shape_mismatch, "checkpoint parameter " + p.at("name").get<std::string>() + " has the wrong shape");
      std::copy(data.begin(), data.end(), v.mutable_value().data());
    }
    return m;
  } catch (const nlohmann::json::exception& ex) {
    throw Error(Errc::parse_error, std::string("checkpoint: ") + ex.what());
  }
}

inline void save_model(const FlowModel& m, const std::filesystem::path& path) {
  write_text_file(path, model_to_json(m).dump() + "\n");
}

inline FlowModel load_model(const std::filesystem::path& path) { return model_from_json(read_json_file(path)); }

}  // namespace rcnf
