#include "trajaux/c_api.h"

#include <cstring>
#include <string>

#include "trajaux/error.hpp"
#include "trajaux/schedule.hpp"
#include "trajaux/session.hpp"

struct trajaux_session {
  trajaux::Session session;
};

namespace {

thread_local std::string g_error;

template <class F>
int guarded(F&& f) {
  try {
    f();
    g_error.clear();
    return TRAJAUX_OK;
  } catch (const trajaux::ConfigError& e) {
    g_error = e.what();
    return TRAJAUX_E_CONFIG;
  } catch (const trajaux::ShapeError& e) {
    g_error = e.what();
    return TRAJAUX_E_SHAPE;
  } catch (const trajaux::DataError& e) {
    g_error = e.what();
    return TRAJAUX_E_DATA;
  } catch (const trajaux::NumericalError& e) {
    g_error = e.what();
    return TRAJAUX_E_NUMERICAL;
  } catch (const std::exception& e) {
    g_error = e.what();
    return TRAJAUX_E_INTERNAL;
  } catch (...) {
    g_error = "unknown failure";
    return TRAJAUX_E_INTERNAL;
  }
}

trajaux::TrajectoryBatch view(const double* hidden, size_t B, size_t S, size_t D, const int64_t* spans,
                              const int32_t* labels) {
  if (!hidden || !spans) throw trajaux::ConfigError("hidden and spans buffers are required");
  if (B == 0 || S == 0 || D == 0) throw trajaux::ShapeError("buffer extents must be positive");
  trajaux::TrajectoryBatch b;
  b.hidden = trajaux::Tensor({B, S, D}, std::vector<double>(hidden, hidden + B * S * D));
  b.spans.resize(B);
  for (size_t i = 0; i < B; ++i) {
    if (spans[2 * i] < 0 || spans[2 * i + 1] < 0) throw trajaux::DataError("negative span bound");
    b.spans[i] = {static_cast<size_t>(spans[2 * i]), static_cast<size_t>(spans[2 * i + 1])};
  }
  if (labels) b.labels.assign(labels, labels + B * S);
  b.validate();
  return b;
}

int need_session(trajaux_session* s) {
  if (s) return TRAJAUX_OK;
  g_error = "null session handle";
  return TRAJAUX_E_CONFIG;
}

}  // namespace

extern "C" {

const char* trajaux_last_error(void) { return g_error.c_str(); }

int trajaux_open(const char* loss, size_t D, const char* options, uint64_t seed, trajaux_session** out) {
  if (!out) {
    g_error = "null output handle";
    return TRAJAUX_E_CONFIG;
  }
  *out = nullptr;
  return guarded([&] {
    if (!loss) throw trajaux::ConfigError("loss id is required");
    const trajaux::Hyper hp = options ? trajaux::parse_hyper(options) : trajaux::Hyper{};
    *out = new trajaux_session{trajaux::Session(loss, D, hp, seed)};
  });
}

void trajaux_close(trajaux_session* s) { delete s; }

int trajaux_set_head(trajaux_session* s, const double* W, size_t V, size_t D, double temperature) {
  if (int rc = need_session(s)) return rc;
  return guarded([&] {
    if (!W || V == 0) throw trajaux::ConfigError("head buffer is required");
    trajaux::ToyLMHead head;
    head.W = trajaux::Tensor({V, D}, std::vector<double>(W, W + V * D));
    head.temperature = temperature;
    s->session.set_head(std::move(head));
  });
}

int trajaux_eval_with_grad(trajaux_session* s, const double* hidden, size_t B, size_t S, size_t D,
                           const int64_t* spans, const int32_t* labels, uint64_t seed, double* value,
                           double* grad) {
  if (int rc = need_session(s)) return rc;
  return guarded([&] {
    if (!value) throw trajaux::ConfigError("value pointer is required");
    const trajaux::DualValue dv = s->session.eval_with_grad(view(hidden, B, S, D, spans, labels), seed);
    *value = dv.value;
    if (grad) {
      const auto g = dv.grad("hidden").data();
      std::memcpy(grad, g.data(), g.size() * sizeof(double));
    }
  });
}

int trajaux_step(trajaux_session* s, double lr) {
  if (int rc = need_session(s)) return rc;
  return guarded([&] { s->session.step(lr); });
}

int trajaux_ema_tick(trajaux_session* s) {
  if (int rc = need_session(s)) return rc;
  return guarded([&] { s->session.ema_tick(); });
}

int trajaux_bank_insert(trajaux_session* s, const double* hidden, size_t B, size_t S, size_t D,
                        const int64_t* spans) {
  if (int rc = need_session(s)) return rc;
  return guarded([&] { s->session.bank_insert(view(hidden, B, S, D, spans, nullptr)); });
}

int trajaux_diagnose(trajaux_session* s, const double* hidden, size_t B, size_t S, size_t D,
                     const int64_t* spans, const int32_t* labels, uint64_t seed, char* buf, size_t cap,
                     size_t* needed) {
  if (int rc = need_session(s)) return rc;
  return guarded([&] {
    const auto rep = s->session.diagnose(view(hidden, B, S, D, spans, labels), seed);
    const std::string text = trajaux::diagnostics_json(rep).dump();
    if (needed) *needed = text.size() + 1;
    if (buf && cap > text.size()) std::memcpy(buf, text.c_str(), text.size() + 1);
  });
}

int trajaux_lambda_at(double lambda0, size_t steps, double warmup_frac, double decay_frac, double floor_ratio,
                      size_t t, double* out) {
  return guarded([&] {
    if (!out) throw trajaux::ConfigError("output pointer is required");
    trajaux::ScheduleConfig cfg{lambda0, steps, warmup_frac, decay_frac, floor_ratio};
    *out = trajaux::lambda_at(cfg, t).value;
  });
}

}  // extern "C"
