#ifndef WMS_H
#define WMS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stdint.h>
#include <stddef.h>

/**
 * Result code of every fallible call.
 */
typedef enum {
  WMS_STATUS_OK = 0,
  WMS_STATUS_NULL_ARGUMENT = 1,
  WMS_STATUS_INVALID_UTF8 = 2,
  WMS_STATUS_INVALID_JSON = 3,
  WMS_STATUS_NOT_FOUND = 4,
  WMS_STATUS_STALE_REVISION = 5,
  WMS_STATUS_ALREADY_EXISTS = 6,
  WMS_STATUS_VALIDATION = 7,
  WMS_STATUS_INVALID_STATE = 8,
  WMS_STATUS_TOO_LARGE = 9,
  WMS_STATUS_IO = 10,
  WMS_STATUS_CORRUPT = 11,
  WMS_STATUS_AUTH = 12,
  WMS_STATUS_INTERNAL = 13,
} WmsStatus;

/**
 * Opaque store handle.
 */
typedef struct WmsStore WmsStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static string.
 */
const char *wms_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on this thread.
 */
const char *wms_last_error(void);

void wms_string_free(char *s);

/**
 * Opens (creating if needed) the store under `data_dir`.
 */
WmsStatus wms_store_open(const char *data_dir, WmsStore **out);

void wms_store_close(WmsStore *h);

WmsStatus wms_store_last_seq(const WmsStore *h, uint64_t *out);

/**
 * Creates an account; the first one must be an admin. Writes the account
 * without its password hash.
 */
WmsStatus wms_user_create(const WmsStore *h,
                          const char *actor,
                          const char *name,
                          const char *email,
                          const char *password,
                          const char *role,
                          char **out_json);

/**
 * `input_json` follows the task creation body: `title`, optional
 * `description`, `priority`, `assignee_ids`, `due_date`.
 */
WmsStatus wms_task_create(const WmsStore *h,
                          const char *actor,
                          const char *input_json,
                          char **out_json);

WmsStatus wms_task_get(const WmsStore *h, const char *id, char **out_json);

/**
 * Lists tasks. `filter_json` may be null or an object with any of
 * `status`, `priority`, `assignee`, `trashed`. Writes
 * `{"items":[...],"total_count":n}`.
 */
WmsStatus wms_task_list(const WmsStore *h,
                        const char *filter_json,
                        uint64_t offset,
                        uint64_t limit,
                        char **out_json);

/**
 * Applies a partial update (`title`, `description`, `status`, `priority`,
 * `assignee_ids`, `due_date`).
 */
WmsStatus wms_task_update(const WmsStore *h,
                          const char *actor,
                          const char *id,
                          uint64_t expected_revision,
                          const char *patch_json,
                          char **out_json);

/**
 * Moves a task to `status` (`todo`, `in_progress` or `done`).
 */
WmsStatus wms_task_transition(const WmsStore *h,
                              const char *actor,
                              const char *id,
                              uint64_t expected_revision,
                              const char *status,
                              char **out_json);

WmsStatus wms_task_trash(const WmsStore *h,
                         const char *actor,
                         const char *id,
                         uint64_t expected_revision,
                         char **out_json);

WmsStatus wms_task_restore(const WmsStore *h,
                           const char *actor,
                           const char *id,
                           uint64_t expected_revision,
                           char **out_json);

WmsStatus wms_dashboard_summary(const WmsStore *h, char **out_json);

/**
 * Writes a JSON array of at most `limit` events with `seq > after_seq`.
 * Account snapshots are redacted.
 */
WmsStatus wms_events_since(const WmsStore *h, uint64_t after_seq, uint64_t limit, char **out_json);

/**
 * Signs `claims_json` (`sub`, `role`, `iat`, `exp`, `jti`) as an HS256
 * token. The key must be at least 32 bytes.
 */
WmsStatus wms_token_issue(const uint8_t *key,
                          uintptr_t key_len,
                          const char *claims_json,
                          char **out_token);

/**
 * Verifies `token` at `now_secs` and writes its claims. Any defect gives
 * `WMS_STATUS_AUTH`.
 */
WmsStatus wms_token_verify(const uint8_t *key,
                           uintptr_t key_len,
                           const char *token,
                           int64_t now_secs,
                           char **out_claims_json);

/**
 * Looks up the policy matrix. `role` is `admin` or `user`; `action` is a
 * snake_case action name such as `task_edit`.
 */
WmsStatus wms_authorize(const char *role, const char *action, bool *out_allowed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WMS_H */
