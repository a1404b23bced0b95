#ifndef STFUSION_H
#define STFUSION_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define STF_OK 0

#define STF_ERR_CONFIG 2

#define STF_ERR_NUMERICAL 3

#define STF_ERR_CHECK_FAILED 4

#define STF_ERR_NULL 5

#define STF_ERR_UTF8 6

/**
 * Opaque experiment configuration.
 */
typedef struct StfConfig StfConfig;

/**
 * Opaque trained student: weights plus its per-epoch metric records.
 */
typedef struct StfStudent StfStudent;

/**
 * Opaque frozen teacher.
 */
typedef struct StfTeacher StfTeacher;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the message of the most recent error on this thread into `buf`
 * (NUL-terminated, truncated to `len`). Returns the full message length.
 *
 * # Safety
 * `buf` must point to `len` writable bytes (or be null to only query the length).
 */
uintptr_t stf_last_error(char *buf, uintptr_t len);

/**
 * Default configuration (the synthetic benchmark preset).
 */
struct StfConfig *stf_config_default(void);

/**
 * Load a configuration from a TOML file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
int32_t stf_config_load(const char *path, struct StfConfig **out);

/**
 * Set one configuration field by its TOML key (value parsed as TOML, e.g.
 * `"42"`, `"0.1"`, `"\"st\""`, `"true"`). Unknown keys are errors.
 *
 * # Safety
 * `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
 */
int32_t stf_config_set(struct StfConfig *cfg, const char *key, const char *value);

/**
 * # Safety
 * `cfg` must come from this library and not be freed twice.
 */
void stf_config_free(struct StfConfig *cfg);

/**
 * Generate one scene with the config's scene parameters and write it to
 * `path` in the text scene format.
 *
 * # Safety
 * `cfg` must be a live handle; `path` a NUL-terminated string.
 */
int32_t stf_gen_scene(const struct StfConfig *cfg, uint64_t scene_seed, const char *path);

/**
 * Train a teacher for the given config and return the frozen handle.
 *
 * # Safety
 * `cfg` must be a live handle; `out` a valid pointer.
 */
int32_t stf_train_teacher(const struct StfConfig *cfg, struct StfTeacher **out);

/**
 * # Safety
 * `teacher` must be a live handle; `path` a NUL-terminated string.
 */
int32_t stf_teacher_save(const struct StfTeacher *teacher, const char *path);

/**
 * # Safety
 * `cfg` must be a live handle; `path` NUL-terminated; `out` valid.
 */
int32_t stf_teacher_load(const struct StfConfig *cfg, const char *path, struct StfTeacher **out);

/**
 * # Safety
 * `teacher` must come from this library and not be freed twice.
 */
void stf_teacher_free(struct StfTeacher *teacher);

/**
 * Train a student. `teacher` may be null when the config's use_sup is off.
 *
 * # Safety
 * Handles must be live; `out` must be a valid pointer.
 */
int32_t stf_train_student(const struct StfConfig *cfg,
                          const struct StfTeacher *teacher,
                          struct StfStudent **out);

/**
 * Number of logged epochs.
 *
 * # Safety
 * `student` must be a live handle (null yields 0).
 */
uintptr_t stf_student_epochs(const struct StfStudent *student);

/**
 * Fetch one epoch's record: detection loss, total loss, and eval AP.
 *
 * # Safety
 * `student` must be live; output pointers may be null to skip a field.
 */
int32_t stf_student_metric(const struct StfStudent *student,
                           uintptr_t epoch,
                           double *l_det,
                           double *l_total,
                           double *ap);

/**
 * # Safety
 * `student` must be a live handle; `path` a NUL-terminated string.
 */
int32_t stf_student_save(const struct StfStudent *student, const char *path);

/**
 * Re-evaluate a student on the config's eval split; writes pooled AP.
 *
 * # Safety
 * Handles must be live; `ap` must be a valid pointer.
 */
int32_t stf_eval(const struct StfConfig *cfg, const struct StfStudent *student, double *ap);

/**
 * # Safety
 * `student` must come from this library and not be freed twice.
 */
void stf_student_free(struct StfStudent *student);

/**
 * Run the whole-model gradient audit. Returns 0 on pass, 4 on a tolerance
 * failure; `max_rel_err` (optional) receives the worst relative error.
 *
 * # Safety
 * `max_rel_err` may be null or must be a valid pointer.
 */
int32_t stf_gradcheck(uint64_t seed, double tol, double *max_rel_err);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* STFUSION_H */
