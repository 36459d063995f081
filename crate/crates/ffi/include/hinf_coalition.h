#ifndef HINF_COALITION_H
#define HINF_COALITION_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HcStatus {
  HC_STATUS_OK = 0,
  HC_STATUS_NULL_POINTER = 1,
  HC_STATUS_INVALID_ARGUMENT = 2,
  HC_STATUS_SINGULAR_GROUNDING = 3,
  HC_STATUS_NOT_CONNECTED = 4,
  HC_STATUS_NOT_HURWITZ = 5,
  HC_STATUS_NO_STABILIZING_SOLUTION = 6,
  HC_STATUS_DIMENSION_MISMATCH = 7,
  HC_STATUS_NOT_SYMMETRIC = 8,
  HC_STATUS_INVALID_TOPOLOGY = 9,
  HC_STATUS_INTERNAL = 10,
  HC_STATUS_PANIC = 11,
} HcStatus;

/*
 Opaque solved game (local GAREs plus the grounded Laplacian).
 */
typedef struct HcGame HcGame;

/*
 Opaque communication graph.
 */
typedef struct HcTopology HcTopology;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failing call on this thread, or null. Valid until the next failure.
 */
const char *hc_last_error_message(void);

/*
 Static, nul-terminated version string.
 */
const char *hc_version(void);

/*
 Builds a graph from an `n × n` adjacency matrix and `n` pinning gains.

 # Safety
 `adjacency` must point to `n * n` doubles, `pinning` to `n` doubles and `out` to
 writable storage for one pointer. Free the result with [`hc_topology_free`].
 */
enum HcStatus hc_topology_new(size_t n,
                              const double *adjacency,
                              const double *pinning,
                              size_t n_bar,
                              struct HcTopology **out);

/*
 # Safety
 `top` must be null or a pointer returned by [`hc_topology_new`] and not yet freed.
 */
void hc_topology_free(struct HcTopology *top);

/*
 Algebraic connectivity of the Laplacian (infinite for a single agent).

 # Safety
 `top` must be a live handle and `out` writable.
 */
enum HcStatus hc_topology_lambda2(const struct HcTopology *top, double *out);

/*
 Smallest eigenvalue of the grounded Laplacian `L + G`.

 # Safety
 `top` must be a live handle and `out` writable.
 */
enum HcStatus hc_topology_grounded_min_eigenvalue(const struct HcTopology *top, double *out);

/*
 Solves the local GARE shared by every agent (homogeneous weights).

 `a` is `n × n`, `b` is `n × m1`, `d` is `n × m2`, `q` is `n × n`, `r` is `m1 × m1`.

 # Safety
 All matrix pointers must cover their stated sizes, `top` must be a live handle and
 `out` writable. Free the result with [`hc_game_free`].
 */
enum HcStatus hc_game_new(const struct HcTopology *top,
                          size_t n,
                          size_t m1,
                          size_t m2,
                          const double *a,
                          const double *b,
                          const double *d,
                          const double *q,
                          const double *r,
                          double gamma,
                          struct HcGame **out);

/*
 # Safety
 `game` must be null or a pointer returned by [`hc_game_new`] and not yet freed.
 */
void hc_game_free(struct HcGame *game);

/*
 Copies agent `agent`'s `P` (`n × n`), `K` (`m1 × n`) and `L` (`m2 × n`). Any output may be null.

 # Safety
 `game` must be a live handle; non-null outputs must hold the stated sizes.
 */
enum HcStatus hc_game_local_gains(const struct HcGame *game,
                                  size_t agent,
                                  double *p,
                                  double *k,
                                  double *l);

/*
 Frobenius residual of `blkdiag(P_i)` in the global GARE.

 # Safety
 `game` must be a live handle and `out` writable.
 */
enum HcStatus hc_game_global_residual(const struct HcGame *game, double *out);

/*
 Saddle-point strategies for the stacked neighbor error `delta` (length `N n`).

 # Safety
 `game` must be a live handle; `delta`, `u` and `w` must cover `delta_len`, `N m1`
 and `N m2` doubles.
 */
enum HcStatus hc_game_coupled_strategies(const struct HcGame *game,
                                         const double *delta,
                                         size_t delta_len,
                                         double *u,
                                         size_t u_len,
                                         double *w,
                                         size_t w_len);

/*
 `V(δ) = ½ δᵀ blkdiag(P_i) δ`.

 # Safety
 `game` must be a live handle, `delta` must cover `delta_len` doubles and `out` be writable.
 */
enum HcStatus hc_game_value(const struct HcGame *game,
                            const double *delta,
                            size_t delta_len,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HINF_COALITION_H */
