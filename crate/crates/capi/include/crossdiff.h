#ifndef CROSSDIFF_H
#define CROSSDIFF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
#define CROSSDIFF_OK 0

/**
 * Invalid argument (bad parameter, inadmissible model, bad sizes).
 */
#define CROSSDIFF_ERR_INVALID 1

/**
 * Domain error (evaluation outside the admissible region).
 */
#define CROSSDIFF_ERR_DOMAIN 2

/**
 * Numeric failure (divergence, non-finite values).
 */
#define CROSSDIFF_ERR_NUMERIC 3

/**
 * Null pointer where a value was required.
 */
#define CROSSDIFF_ERR_NULL 4

/**
 * Opaque model handle.
 */
typedef struct CrossdiffModel CrossdiffModel;

/**
 * Opaque steady-state handle; remembers the grid it was solved on.
 */
typedef struct CrossdiffSteady CrossdiffSteady;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message for the calling thread into `buf`
 * (NUL-terminated, truncated to `len`). Returns the full message length.
 *
 * # Safety
 * `buf` must point to `len` writable bytes, or be null (query length only).
 */
uintptr_t crossdiff_last_error(char *buf, uintptr_t len);

/**
 * Create a model with a quadratic kernel K(z) = lambda z^2 / 2. On success
 * writes a handle to `out` and returns CROSSDIFF_OK.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
int crossdiff_model_new(double a1,
                        double a2,
                        double b1,
                        double b2,
                        double gamma,
                        double lambda,
                        double eps,
                        struct CrossdiffModel **out);

/**
 * Free a model handle. Null is a no-op.
 *
 * # Safety
 * `h` must come from `crossdiff_model_new` and not be freed twice.
 */
void crossdiff_model_free(struct CrossdiffModel *h);

/**
 * Check the admissibility conditions without constructing a model; writes 1
 * or 0 to `admissible`.
 *
 * # Safety
 * `admissible` must be a valid pointer.
 */
int crossdiff_validate_params(double a1,
                              double a2,
                              double b1,
                              double b2,
                              double gamma,
                              int *admissible);

/**
 * Evaluate the perturbed-potential map Gamma_eps at (u1, u2).
 *
 * # Safety
 * `v1`, `v2` must be valid pointers; `h` a live model handle.
 */
int crossdiff_gamma_map(const struct CrossdiffModel *h,
                        double u1,
                        double u2,
                        double *v1,
                        double *v2);

/**
 * Invert Gamma_eps at (v1, v2) to tolerance `tol`.
 *
 * # Safety
 * `u1`, `u2` must be valid pointers; `h` a live model handle.
 */
int crossdiff_gamma_inverse(const struct CrossdiffModel *h,
                            double v1,
                            double v2,
                            double tol,
                            double *u1,
                            double *u2);

/**
 * Total energy E_eps of a density pair given as two cell-average arrays of
 * length `n` on the symmetric box [-half_width, half_width].
 *
 * # Safety
 * `rho1`, `rho2` must point to `n` readable doubles; `energy` must be valid.
 */
int crossdiff_energy(const struct CrossdiffModel *h,
                     double half_width,
                     uintptr_t n,
                     const double *rho1,
                     const double *rho2,
                     double *energy);

/**
 * Solve the steady state for quadratic internal energies (a1 = a2 = 2) with
 * the model's quadratic kernel on an n-cell grid.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot; `h` a live model handle.
 */
int crossdiff_steady_solve(const struct CrossdiffModel *h,
                           double half_width,
                           uintptr_t n,
                           double tol,
                           struct CrossdiffSteady **out);

/**
 * Free a steady-state handle. Null is a no-op.
 *
 * # Safety
 * `h` must come from `crossdiff_steady_solve` and not be freed twice.
 */
void crossdiff_steady_free(struct CrossdiffSteady *h);

/**
 * Lagrange constant C_j (species = 0 or 1) of a solved steady state.
 *
 * # Safety
 * `c` must be a valid pointer; `h` a live steady handle.
 */
int crossdiff_steady_constant(const struct CrossdiffSteady *h, int species, double *c);

/**
 * Support radius of species 0 or 1 of a solved steady state.
 *
 * # Safety
 * `r` must be a valid pointer; `h` a live steady handle.
 */
int crossdiff_steady_support(const struct CrossdiffSteady *h, int species, double *r);

/**
 * Copy the steady profile of one species into `buf` (length `n`, the grid
 * size the state was solved on). Writes the cell count to `written`.
 *
 * # Safety
 * `buf` must point to `n` writable doubles; `h` a live steady handle.
 */
int crossdiff_steady_profile(const struct CrossdiffSteady *h,
                             int species,
                             double *buf,
                             uintptr_t n,
                             uintptr_t *written);

/**
 * 1D Wasserstein-2 distance between two unit-mass densities given as
 * cell-average arrays of length `n` on [-half_width, half_width], using
 * `quantiles` quadrature points.
 *
 * # Safety
 * `rho_a`, `rho_b` must point to `n` readable doubles; `d` must be valid.
 */
int crossdiff_w2_distance(double half_width,
                          uintptr_t n,
                          const double *rho_a,
                          const double *rho_b,
                          uintptr_t quantiles,
                          double *d);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CROSSDIFF_H */
