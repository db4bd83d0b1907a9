/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef CGREPL_H
#define CGREPL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CgreplStatus {
  CGREPL_STATUS_OK = 0,
  CGREPL_STATUS_NOT_FOUND = 1,
  CGREPL_STATUS_ALREADY_EXISTS = 2,
  CGREPL_STATUS_INVALID_ARGUMENT = 3,
  CGREPL_STATUS_CONFLICT = 4,
  CGREPL_STATUS_BACKPRESSURE = 5,
  CGREPL_STATUS_UNAVAILABLE = 6,
  CGREPL_STATUS_UNSUPPORTED = 7,
  CGREPL_STATUS_FAILED_PRECONDITION = 8,
  /**
   * A required pointer argument was null.
   */
  CGREPL_STATUS_NULL_ARGUMENT = 20,
  /**
   * A string argument was not valid UTF-8.
   */
  CGREPL_STATUS_INVALID_UTF8 = 21,
  CGREPL_STATUS_IO = 22,
  /**
   * The library panicked; the handle involved should be freed.
   */
  CGREPL_STATUS_INTERNAL = 99,
} CgreplStatus;

/**
 * Opaque simulation handle.
 */
typedef struct CgreplWorld CgreplWorld;

/**
 * Simulation parameters for [`cgrepl_world_new`].
 */
typedef struct CgreplConfig {
  uint64_t seed;
  uint64_t rtt_ms;
  /**
   * Block size for claims that do not set one; 0 keeps the default.
   */
  size_t block_size;
  /**
   * Record an event trace (see [`cgrepl_world_trace`]).
   */
  bool trace;
} CgreplConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, static storage.
 */
const char *cgrepl_version(void);

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next library call on the same thread.
 */
const char *cgrepl_last_error(void);

/**
 * Creates a simulation. `mode` (`grouped`, `per_volume`, `synchronous`)
 * may be null for the default.
 *
 * # Safety
 * `config` and `out` must be valid pointers; `mode` null or a C string.
 */
enum CgreplStatus cgrepl_world_new(const struct CgreplConfig *config,
                                   const char *mode,
                                   struct CgreplWorld **out);

/**
 * Releases a simulation. Null is ignored.
 *
 * # Safety
 * `world` must come from [`cgrepl_world_new`] and not be used afterwards.
 */
void cgrepl_world_free(struct CgreplWorld *world);

/**
 * Sends one gateway request (`method`, `path` with optional query, JSON
 * `body` or null). Returns `Ok` whenever a response was produced, error
 * responses included; the HTTP-style status lands in `out_status` and the
 * JSON response in `out_body`.
 *
 * # Safety
 * `world` must be a live handle; strings must be C strings; outputs may be
 * null to discard them.
 */
enum CgreplStatus cgrepl_world_request(struct CgreplWorld *world,
                                       const char *method,
                                       const char *path,
                                       const char *body,
                                       uint16_t *out_status,
                                       char **out_body);

/**
 * Runs the simulation forward by `ms` simulated milliseconds.
 *
 * # Safety
 * `world` must be a live handle; `out_events` may be null.
 */
enum CgreplStatus cgrepl_world_advance_ms(struct CgreplWorld *world,
                                          uint64_t ms,
                                          uint64_t *out_events);

/**
 * Runs until no foreground work is pending.
 *
 * # Safety
 * `world` must be a live handle; `out_events` may be null.
 */
enum CgreplStatus cgrepl_world_run_until_quiescent(struct CgreplWorld *world, uint64_t *out_events);

/**
 * Current simulated time in microseconds.
 *
 * # Safety
 * `world` must be a live handle.
 */
enum CgreplStatus cgrepl_world_sim_time_us(struct CgreplWorld *world, uint64_t *out);

/**
 * Hex digest over both sites' volumes and the control-plane records.
 *
 * # Safety
 * `world` must be a live handle; `out` must be valid.
 */
enum CgreplStatus cgrepl_world_state_digest(struct CgreplWorld *world, char **out);

/**
 * The recorded trace, one event per line. Empty unless the world was
 * created with `trace` set.
 *
 * # Safety
 * `world` must be a live handle; `out` must be valid.
 */
enum CgreplStatus cgrepl_world_trace(struct CgreplWorld *world, char **out);

/**
 * Runs scenario text against a fresh simulation. The scenario's exit code
 * (0 pass, 1 failed assertion or error, 2 parse error) goes to
 * `out_exit_code` and its report to `out_report`.
 *
 * # Safety
 * `config` and `text` must be valid; outputs may be null.
 */
enum CgreplStatus cgrepl_run_scenario(const struct CgreplConfig *config,
                                      const char *mode,
                                      const char *text,
                                      int32_t *out_exit_code,
                                      char **out_report);

/**
 * Writes every volume image of both sites into `dir`.
 *
 * # Safety
 * `world` must be a live handle; `dir` a C string.
 */
enum CgreplStatus cgrepl_world_persist(struct CgreplWorld *world, const char *dir);

/**
 * Releases a string returned by the library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void cgrepl_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CGREPL_H */
