#ifndef CAW_H
#define CAW_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Membership classes returned by [`caw_window_membership`].
 */
typedef enum CawMembership {
  CawMembership_Interior = 0,
  CawMembership_Entry = 1,
  CawMembership_Exit = 2,
  CawMembership_Outside = 3,
} CawMembership;

typedef enum CawStatus {
  CawStatus_Ok = 0,
  CawStatus_NullPointer = 1,
  CawStatus_InvalidArgument = 2,
  /**
   * schedule infeasible or windows not aligned
   */
  CawStatus_Infeasible = 3,
  CawStatus_Internal = 4,
} CawStatus;

typedef struct CawSchedule CawSchedule;

typedef struct CawWindow CawWindow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *caw_last_error(void);

/**
 * Library version as a static string.
 */
const char *caw_version(void);

/**
 * Frees a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void caw_string_free(char *s);

/**
 * Unit window `[0,1]^{m1} × [0,1]^{m2}` with axes labelled `u…s…`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum CawStatus caw_window_unit(uintptr_t m1, uintptr_t m2, struct CawWindow **out);

/**
 * Parses a window from its JSON form.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CawStatus caw_window_from_json(const char *json, struct CawWindow **out);

/**
 * JSON form of a window; free the result with [`caw_string_free`].
 *
 * # Safety
 * `w` must be a live handle and `out` a valid pointer.
 */
enum CawStatus caw_window_to_json(const struct CawWindow *w, char **out);

/**
 * Total dimension of the window.
 *
 * # Safety
 * `w` must be a live handle or null (which gives 0).
 */
uintptr_t caw_window_dim(const struct CawWindow *w);

/**
 * Classifies the point `x[0..len]` against the window.
 *
 * # Safety
 * `w` must be a live handle, `x` must point to `len` doubles and `out`
 * must be valid.
 */
enum CawStatus caw_window_membership(const struct CawWindow *w,
                                     const double *x,
                                     uintptr_t len,
                                     enum CawMembership *out);

/**
 * Releases a window handle. Null is ignored.
 *
 * # Safety
 * `w` must come from this library and not have been freed.
 */
void caw_window_free(struct CawWindow *w);

/**
 * Checks `w1 ⇒ w2` under the affine map `spec`
 * (`affine:a11,…;b1,…[;amp,freq]`). Writes 1 or 0 to `aligned` and the
 * margin (≤ 0 when not aligned) to `margin`; both outputs are set even
 * when the windows are not aligned, in which case the status is `Ok`.
 *
 * # Safety
 * Handles must be live, `spec` NUL-terminated, outputs valid.
 */
enum CawStatus caw_check_alignment_affine(const struct CawWindow *w1,
                                          const struct CawWindow *w2,
                                          const char *spec,
                                          uintptr_t samples,
                                          int32_t *aligned,
                                          double *margin);

/**
 * Solves the chain schedule of a TOML run configuration. Infeasible
 * configurations return `Infeasible` with the witness in the last error.
 *
 * # Safety
 * `toml` must be NUL-terminated and `out` valid.
 */
enum CawStatus caw_schedule_from_toml(const char *toml, struct CawSchedule **out);

/**
 * Number of links in the schedule.
 *
 * # Safety
 * `s` must be a live handle or null (which gives 0).
 */
uintptr_t caw_schedule_link_count(const struct CawSchedule *s);

/**
 * Iterate counts `N, K, M` of link `index` (0-based).
 *
 * # Safety
 * `s` must be a live handle and `counts` must point to 3 writable values.
 */
enum CawStatus caw_schedule_link_counts(const struct CawSchedule *s,
                                        uintptr_t index,
                                        uint64_t *counts);

/**
 * Sum of all iterate counts.
 *
 * # Safety
 * `s` must be a live handle or null (which gives 0).
 */
uint64_t caw_schedule_total_steps(const struct CawSchedule *s);

/**
 * JSON form of the schedule; free the result with [`caw_string_free`].
 *
 * # Safety
 * `s` must be a live handle and `out` a valid pointer.
 */
enum CawStatus caw_schedule_to_json(const struct CawSchedule *s, char **out);

/**
 * Releases a schedule handle. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void caw_schedule_free(struct CawSchedule *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAW_H */
