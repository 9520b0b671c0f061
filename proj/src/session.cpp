#include "trajaux/session.hpp"

#include <cmath>

#include "trajaux/error.hpp"

namespace trajaux {

Session::Session(std::string_view loss, std::size_t D, const Hyper& hp, std::uint64_t seed)
    : id_(find_loss(loss).id), D_(D), loss_(make_loss(loss, D, seed, hp)) {}

void Session::set_head(ToyLMHead head) {
  if (head.W.rank() != 2 || head.D() != D_) throw ShapeError("head must be V x " + std::to_string(D_));
  if (!(head.temperature > 0.0)) throw ConfigError("head temperature must be positive");
  head_ = std::move(head);
}

DualValue Session::eval_with_grad(const TrajectoryBatch& batch, std::uint64_t seed) {
  batch.validate();
  if (batch.D() != D_) {
    throw ShapeError("session opened with D = " + std::to_string(D_) + ", batch has D = " +
                     std::to_string(batch.D()));
  }
  DualValue dv = evaluate(*loss_, batch, head(), seed);
  last_ = dv;
  return dv;
}

void Session::step(double lr) {
  if (!last_) throw ConfigError("step needs a preceding evaluation");
  for (const ParamRef& p : loss_->parameters()) {
    if (p.frozen || !last_->has_grad(p.name)) continue;
    const Tensor& g = last_->grad(p.name);
    for (std::size_t i = 0; i < g.size(); ++i) (*p.value)[i] -= lr * g[i];
  }
  last_.reset();
}

void Session::bank_insert(const TrajectoryBatch& batch) {
  batch.validate();
  if (batch.D() != D_) throw ShapeError("bank_insert: batch width does not match the session");
  loss_->bank_insert(batch, eos_clip(batch, loss_->margin, loss_->min_len));
}

DiagnosticsReport Session::diagnose(const TrajectoryBatch& batch, std::uint64_t seed) {
  if (batch.D() != D_) throw ShapeError("diagnose: batch width does not match the session");
  return trajaux::diagnose(batch, *loss_, head(), seed);
}

namespace {

nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

nlohmann::json diagnostics_json(const DiagnosticsReport& rep) {
  nlohmann::json j;
  j["anisotropy"] = num(rep.anisotropy);
  j["curvature"] = {{"radians", num(rep.curvature.radians)},
                    {"rows", rep.curvature.rows},
                    {"skipped_velocities", rep.curvature.skipped_velocities}};
  j["grad_cosine"] = rep.grad_cosine ? num(rep.grad_cosine->value) : nlohmann::json(nullptr);
  if (rep.attribution) {
    static const char* names[3] = {"front", "middle", "end"};
    nlohmann::json a = nlohmann::json::object();
    for (std::size_t k = 0; k < 3; ++k) {
      a[names[k]] = {{"mean", rep.attribution->mean[k]}, {"count", rep.attribution->count[k]}};
    }
    j["attribution"] = std::move(a);
  } else {
    j["attribution"] = nullptr;
  }
  j["flags"] = std::vector<std::string>(rep.flags.begin(), rep.flags.end());
  return j;
}

Hyper parse_hyper(std::string_view text) {
  Hyper out;
  const auto trim = [](std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
  };
  while (!text.empty()) {
    const std::size_t semi = text.find(';');
    const std::string_view item = trim(text.substr(0, semi));
    text = semi == std::string_view::npos ? std::string_view{} : text.substr(semi + 1);
    if (item.empty()) continue;
    const std::size_t eq = item.find('=');
    if (eq == std::string_view::npos) throw ConfigError("option '" + std::string(item) + "' lacks '='");
    const std::string_view key = trim(item.substr(0, eq));
    if (key.empty()) throw ConfigError("option with empty key");
    out[std::string(key)] = std::string(trim(item.substr(eq + 1)));
  }
  return out;
}

}  // namespace trajaux
