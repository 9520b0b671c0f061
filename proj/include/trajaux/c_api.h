#ifndef TRAJAUX_C_API_H
#define TRAJAUX_C_API_H

/* C surface over trajaux::Session. Buffers are caller-owned, row-major
 * doubles; spans are (lo, hi) pairs per row. Every call returns one of the
 * status codes below and never aborts; trajaux_last_error() holds the
 * message of the most recent failure on the calling thread. */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

enum {
  TRAJAUX_OK = 0,
  TRAJAUX_E_INTERNAL = 1,
  TRAJAUX_E_CONFIG = 2,
  TRAJAUX_E_DATA = 3,
  TRAJAUX_E_NUMERICAL = 4,
  TRAJAUX_E_SHAPE = 5
};

typedef struct trajaux_session trajaux_session;

const char* trajaux_last_error(void);

/* options: "key=value;key=value" or NULL */
int trajaux_open(const char* loss, size_t D, const char* options, uint64_t seed, trajaux_session** out);
void trajaux_close(trajaux_session* s);

int trajaux_set_head(trajaux_session* s, const double* W, size_t V, size_t D, double temperature);

/* labels: B*S entries (-100 = unsupervised) or NULL. grad: B*S*D or NULL. */
int trajaux_eval_with_grad(trajaux_session* s, const double* hidden, size_t B, size_t S, size_t D,
                           const int64_t* spans, const int32_t* labels, uint64_t seed, double* value,
                           double* grad);
int trajaux_step(trajaux_session* s, double lr);
int trajaux_ema_tick(trajaux_session* s);
int trajaux_bank_insert(trajaux_session* s, const double* hidden, size_t B, size_t S, size_t D,
                        const int64_t* spans);

/* Writes a NUL-terminated JSON report into buf when it fits; *needed gets
 * the full length including the terminator. */
int trajaux_diagnose(trajaux_session* s, const double* hidden, size_t B, size_t S, size_t D,
                     const int64_t* spans, const int32_t* labels, uint64_t seed, char* buf, size_t cap,
                     size_t* needed);

int trajaux_lambda_at(double lambda0, size_t steps, double warmup_frac, double decay_frac, double floor_ratio,
                      size_t t, double* out);

#ifdef __cplusplus
}
#endif

#endif
