#pragma once

#include "bites/data.hpp"
#include "bites/ite.hpp"
#include "bites/net.hpp"

#include <json.hpp>

#include <string>

namespace bites {

using Json = nlohmann::json;

// Doubles are written with 17 significant digits, so every value survives
// a write/read cycle bit for bit.

namespace io {

inline Json vector_to_json(const Vector& v) { return Json(std::vector<double>(v.data(), v.data() + v.size())); }

inline Vector vector_from_json(const Json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
}

inline Json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

inline Matrix matrix_from_json(const Json& j) {
  const auto rows = j.at("rows").get<Index>();
  const auto cols = j.at("cols").get<Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<Index>(data.size()) != rows * cols) throw DataError("model file: matrix size mismatch");
  return Eigen::Map<const Matrix>(data.data(), rows, cols);
}

inline Json mlp_to_json(const Mlp& m) {
  Json blocks = Json::array();
  for (const auto& b : m.blocks()) {
    Json jb{{"hidden", b.hidden}, {"batch_norm", b.batch_norm}, {"weight", matrix_to_json(b.weight)},
            {"bias", vector_to_json(b.bias)}};
    if (b.has_norm()) {
      jb["bn_scale"] = vector_to_json(b.bn_scale);
      jb["bn_shift"] = vector_to_json(b.bn_shift);
      jb["running_mean"] = vector_to_json(b.running_mean);
      jb["running_var"] = vector_to_json(b.running_var);
    }
    blocks.push_back(std::move(jb));
  }
  return {{"input_dim", m.input_dim()}, {"blocks", std::move(blocks)}};
}

inline Mlp mlp_from_json(const Json& j) {
  std::vector<DenseBlock> blocks;
  for (const auto& jb : j.at("blocks")) {
    DenseBlock b;
    b.hidden = jb.at("hidden").get<bool>();
    b.batch_norm = jb.at("batch_norm").get<bool>();
    b.weight = matrix_from_json(jb.at("weight"));
    b.bias = vector_from_json(jb.at("bias"));
    if (b.has_norm()) {
      b.bn_scale = vector_from_json(jb.at("bn_scale"));
      b.bn_shift = vector_from_json(jb.at("bn_shift"));
      b.running_mean = vector_from_json(jb.at("running_mean"));
      b.running_var = vector_from_json(jb.at("running_var"));
    }
    blocks.push_back(std::move(b));
  }
  return Mlp(j.at("input_dim").get<Index>(), std::move(blocks));
}

inline Json hazard_to_json(const BaselineHazard& h) {
  return {{"time", vector_to_json(h.time)}, {"cumulative", vector_to_json(h.cumulative)}};
}

inline BaselineHazard hazard_from_json(const Json& j) {
  BaselineHazard h;
  h.time = vector_from_json(j.at("time"));
  h.cumulative = vector_from_json(j.at("cumulative"));
  if (h.time.size() != h.cumulative.size()) throw DataError("model file: baseline hazard size mismatch");
  return h;
}

inline Json spec_to_json(const NetworkSpec& s) {
  return {{"input_dim", s.input_dim},         {"shared_layers", s.shared_layers}, {"head_layers", s.head_layers},
          {"dropout_rate", s.dropout_rate}, {"use_batch_norm", s.use_batch_norm}, {"seed", s.seed}};
}

inline NetworkSpec spec_from_json(const Json& j) {
  NetworkSpec s;
  s.input_dim = j.at("input_dim").get<Index>();
  s.shared_layers = j.at("shared_layers").get<std::vector<int>>();
  s.head_layers = j.at("head_layers").get<std::vector<int>>();
  s.dropout_rate = j.at("dropout_rate").get<double>();
  s.use_batch_norm = j.at("use_batch_norm").get<bool>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

inline Json loss_to_json(const BitesLossConfig& c) {
  Json j{{"alpha", c.alpha},
         {"q", c.q ? Json(*c.q) : Json(nullptr)},
         {"ipm_max_points", c.ipm_max_points},
         {"sinkhorn",
          {{"p", c.sinkhorn.p},
           {"epsilon", c.sinkhorn.epsilon},
           {"max_iter", c.sinkhorn.max_iter},
           {"tol", c.sinkhorn.tol},
           {"scaling", c.sinkhorn.scaling}}}};
  return j;
}

inline BitesLossConfig loss_from_json(const Json& j) {
  BitesLossConfig c;
  c.alpha = j.at("alpha").get<double>();
  if (!j.at("q").is_null()) c.q = j.at("q").get<double>();
  c.ipm_max_points = j.at("ipm_max_points").get<int>();
  const auto& s = j.at("sinkhorn");
  c.sinkhorn = SinkhornConfig{s.at("p").get<double>(), s.at("epsilon").get<double>(), s.at("max_iter").get<int>(),
                              s.at("tol").get<double>(), s.at("scaling").get<double>()};
  return c;
}

inline Json history_to_json(const TrainingHistory& h) {
  return {{"train_loss", h.train_loss},
          {"validation_loss", h.validation_loss},
          {"best_epoch", h.best_epoch},
          {"stopped_epoch", h.stopped_epoch},
          {"skipped_ipm_steps", h.skipped_ipm_steps},
          {"skipped_cox_terms", h.skipped_cox_terms}};
}

inline TrainingHistory history_from_json(const Json& j) {
  TrainingHistory h;
  h.train_loss = j.at("train_loss").get<std::vector<double>>();
  h.validation_loss = j.at("validation_loss").get<std::vector<double>>();
  h.best_epoch = j.at("best_epoch").get<int>();
  h.stopped_epoch = j.at("stopped_epoch").get<int>();
  h.skipped_ipm_steps = j.at("skipped_ipm_steps").get<long>();
  h.skipped_cox_terms = j.at("skipped_cox_terms").get<long>();
  return h;
}

inline Json standardizer_to_json(const Standardizer& s) {
  return {{"mean", vector_to_json(s.mean)}, {"sd", vector_to_json(s.sd)}};
}

inline Standardizer standardizer_from_json(const Json& j) {
  Standardizer s;
  s.mean = vector_from_json(j.at("mean"));
  s.sd = vector_from_json(j.at("sd"));
  return s;
}

}  // namespace io

inline Json to_json(const BitesModel& m) {
  return {{"spec", io::spec_to_json(m.spec())},
          {"loss", io::loss_to_json(m.loss_config())},
          {"trunk", io::mlp_to_json(m.network().trunk)},
          {"head0", io::mlp_to_json(m.network().heads[0])},
          {"head1", io::mlp_to_json(m.network().heads[1])},
          {"baseline0", io::hazard_to_json(m.baselines()[0])},
          {"baseline1", io::hazard_to_json(m.baselines()[1])},
          {"history", io::history_to_json(m.history())},
          {"fitted", m.fitted()}};
}

inline BitesModel bites_model_from_json(const Json& j) {
  BitesModel m(io::spec_from_json(j.at("spec")), io::loss_from_json(j.at("loss")));
  m.network().trunk = io::mlp_from_json(j.at("trunk"));
  m.network().heads[0] = io::mlp_from_json(j.at("head0"));
  m.network().heads[1] = io::mlp_from_json(j.at("head1"));
  if (m.network().trunk.input_dim() != m.spec().input_dim ||
      m.network().heads[0].input_dim() != m.network().trunk.output_dim() ||
      m.network().heads[1].input_dim() != m.network().trunk.output_dim())
    throw DataError("model file: network shapes disagree with spec");
  m.baselines()[0] = io::hazard_from_json(j.at("baseline0"));
  m.baselines()[1] = io::hazard_from_json(j.at("baseline1"));
  m.history() = io::history_from_json(j.at("history"));
  m.set_fitted(j.at("fitted").get<bool>());
  return m;
}

inline Json to_json(const DeepSurvModel& m) {
  return {{"spec", io::spec_to_json(m.spec())},
          {"net", io::mlp_to_json(m.network().net)},
          {"baseline", io::hazard_to_json(m.baseline())},
          {"history", io::history_to_json(m.history())},
          {"fitted", m.fitted()}};
}

inline DeepSurvModel deepsurv_model_from_json(const Json& j) {
  DeepSurvModel m(io::spec_from_json(j.at("spec")));
  m.network().net = io::mlp_from_json(j.at("net"));
  if (m.network().net.input_dim() != m.spec().input_dim + 1) throw DataError("model file: network shape mismatch");
  m.baseline() = io::hazard_from_json(j.at("baseline"));
  m.history() = io::history_from_json(j.at("history"));
  m.set_fitted(j.at("fitted").get<bool>());
  return m;
}

inline Json to_json(const CoxTLearner& m) {
  Json arms = Json::array();
  for (int a : {0, 1}) {
    const auto k = static_cast<std::size_t>(a);
    arms.push_back({{"beta", io::vector_to_json(m.arms[k].beta)},
                    {"baseline", io::hazard_to_json(m.baselines[k])},
                    {"objective", m.fits[k].objective},
                    {"iterations", m.fits[k].iterations},
                    {"converged", m.fits[k].converged}});
  }
  return {{"arms", std::move(arms)}, {"fitted", m.fitted}};
}

inline CoxTLearner cox_tlearner_from_json(const Json& j) {
  CoxTLearner m;
  const auto& arms = j.at("arms");
  if (arms.size() != 2) throw DataError("model file: cox t-learner needs two arms");
  for (int a : {0, 1}) {
    const auto k = static_cast<std::size_t>(a);
    const auto& ja = arms.at(k);
    m.arms[k].beta = io::vector_from_json(ja.at("beta"));
    m.baselines[k] = io::hazard_from_json(ja.at("baseline"));
    m.fits[k].model = m.arms[k];
    m.fits[k].objective = ja.at("objective").get<double>();
    m.fits[k].iterations = ja.at("iterations").get<int>();
    m.fits[k].converged = ja.at("converged").get<bool>();
  }
  m.fitted = j.at("fitted").get<bool>();
  return m;
}

}  // namespace bites
