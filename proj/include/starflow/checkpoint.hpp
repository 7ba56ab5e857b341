#pragma once

// JSON (de)serialization of radius fields, flow configs and whole models.
// Doubles are written in shortest round-trip form, so a saved model reloads
// bit-exactly.

#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "starflow/error.hpp"
#include "starflow/flow.hpp"
#include "starflow/manifolds.hpp"

namespace starflow {

using Json = nlohmann::json;

inline constexpr const char* kCheckpointFormat = "starflow-checkpoint-v1";

inline Json field_to_json(const RadiusField& f) {
  Json j;
  j["kind"] = f.name();
  std::visit(
      [&](const auto& k) {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, SphereShape>) {
          j["c"] = k.c;
        } else if constexpr (std::is_same_v<K, LpBallShape>) {
          j["p"] = k.p;
          j["t"] = k.t;
        } else if constexpr (std::is_same_v<K, DeformedShape>) {
          j["amplitude"] = k.amplitude;
          j["frequency"] = k.frequency;
        }
      },
      f.kind());
  return j;
}

namespace detail {

template <class V>
V json_get(const Json& j, const char* key, V fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<V>();
  } catch (const Json::exception& e) {
    throw InvalidArgument(std::string("field '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline RadiusField field_from_json(const Json& j) {
  if (!j.is_object() || !j.contains("kind")) throw InvalidArgument("manifold: object with a 'kind' is required");
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "sphere") return RadiusField::sphere(detail::json_get(j, "c", 1.0));
  if (kind == "lp_ball" || kind == "lp") {
    if (!j.contains("p")) throw InvalidArgument("manifold: lp_ball requires 'p'");
    return RadiusField::lp_ball(j.at("p").get<double>(), detail::json_get(j, "t", 1.0));
  }
  if (kind == "simplex") return RadiusField::simplex();
  if (kind == "deformed") {
    return RadiusField::deformed(detail::json_get(j, "amplitude", 0.2), detail::json_get(j, "frequency", 3.0));
  }
  throw InvalidArgument("manifold: unknown kind '" + kind + "'");
}

inline Json config_to_json(const FlowConfig& c) {
  return Json{{"layers", c.layers},
              {"blocks", c.blocks},
              {"bins", c.bins},
              {"coupled_blocks", c.coupled_blocks},
              {"frequencies", c.frequencies},
              {"window", c.window},
              {"min_bin", c.min_bin},
              {"min_derivative", c.min_derivative}};
}

inline FlowConfig config_from_json(const Json& j) {
  FlowConfig c;
  if (j.is_null()) return c;
  if (!j.is_object()) throw InvalidArgument("flow: configuration must be an object");
  c.layers = detail::json_get(j, "layers", c.layers);
  c.blocks = detail::json_get(j, "blocks", c.blocks);
  c.bins = detail::json_get(j, "bins", c.bins);
  c.coupled_blocks = detail::json_get(j, "coupled_blocks", c.coupled_blocks);
  c.frequencies = detail::json_get(j, "frequencies", c.frequencies);
  c.window = detail::json_get(j, "window", c.window);
  c.min_bin = detail::json_get(j, "min_bin", c.min_bin);
  c.min_derivative = detail::json_get(j, "min_derivative", c.min_derivative);
  c.validate();
  return c;
}

inline Json model_to_json(const FlowModel& m) {
  std::vector<std::string> boundaries;
  for (std::size_t k = 0; k < m.num_angles(); ++k) boundaries.emplace_back(boundary_name(m.boundary(k)));
  return Json{{"format", kCheckpointFormat},
              {"d", m.dim()},
              {"field", field_to_json(m.field())},
              {"flow", config_to_json(m.config())},
              {"boundaries", boundaries},
              {"params", m.params()}};
}

inline FlowModel model_from_json(const Json& j) {
  if (!j.is_object() || j.value("format", std::string()) != kCheckpointFormat) {
    throw InvalidArgument(std::string("checkpoint: missing or unknown format (expected ") + kCheckpointFormat + ")");
  }
  FlowModel m(j.at("d").get<std::size_t>(), field_from_json(j.at("field")), config_from_json(j.at("flow")));
  const auto b = j.at("boundaries").get<std::vector<std::string>>();
  if (b.size() != m.num_angles()) throw InvalidArgument("checkpoint: boundary list has the wrong length");
  for (std::size_t k = 0; k < b.size(); ++k) {
    if (b[k] != boundary_name(m.boundary(k))) {
      throw InvalidArgument("checkpoint: boundary of angle " + std::to_string(k) + " is '" + b[k] + "', expected '" +
                            boundary_name(m.boundary(k)) + "'");
    }
  }
  m.set_params(j.at("params").get<std::vector<double>>());
  return m;
}

inline void save_checkpoint(const FlowModel& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("checkpoint: cannot write '" + path + "'");
  out << model_to_json(m).dump(1) << '\n';
  if (!out) throw IoError("checkpoint: write to '" + path + "' failed");
}

inline FlowModel load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("checkpoint: cannot open '" + path + "'");
  Json j;
  try {
    in >> j;
  } catch (const Json::exception& e) {
    throw InvalidArgument("checkpoint: '" + path + "' is not valid JSON: " + e.what());
  }
  return model_from_json(j);
}

}  // namespace starflow
