#ifndef OPAQUEFLOW_H
#define OPAQUEFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every exported function.
typedef enum OfStatus {
  OF_STATUS_OK = 0,
  OF_STATUS_NULL_POINTER = 1,
  OF_STATUS_INVALID_UTF8 = 2,
  OF_STATUS_INVALID_JSON = 3,
  OF_STATUS_INVALID_MANIFEST = 4,
  OF_STATUS_UNKNOWN_HANDLE = 5,
  OF_STATUS_UNKNOWN_QM = 6,
  OF_STATUS_DUPLICATE_QM = 7,
  OF_STATUS_QM_PANICKED = 8,
  OF_STATUS_QM_FAILED = 9,
  OF_STATUS_CONTEXT_ESCAPED = 10,
  OF_STATUS_DUPLICATE_FIELD = 11,
  OF_STATUS_UNKNOWN_FIELD = 12,
  OF_STATUS_UNDECLARED_LABEL = 13,
  OF_STATUS_INVALID_URL = 14,
  OF_STATUS_INVALID_DESTINATION = 15,
  OF_STATUS_POLICY_VIOLATION = 16,
  OF_STATUS_IO = 17,
  OF_STATUS_SCENARIO_FAILED = 18,
  OF_STATUS_PANIC = 19,
} OfStatus;

typedef enum OfArgKind {
  // `json` holds a JSON document.
  OF_ARG_KIND_JSON = 0,
  // `handle` refers to an `OfHandle`.
  OF_ARG_KIND_HANDLE = 1,
} OfArgKind;

// Sandbox context of a running QM callback.
typedef struct OfContext OfContext;

// Opaque reference to a QM result. Its payload is only readable through
// `of_context_declassify`.
typedef struct OfHandle OfHandle;

// A runtime: manifest, QM registry, sensitive fields, handle table and
// attempt log.
typedef struct OfRuntime OfRuntime;

// QM body. `args_json` is a JSON array of the plain argument values
// (handle arguments appear as their payloads). Set the result with
// `of_context_set_result`; returning anything but `OF_STATUS_OK` fails the
// call. May be invoked from any thread that calls into the runtime.
typedef enum OfStatus (*OfQmCallback)(struct OfContext *ctx, const char *args_json, void *user_data);

// One QM argument or sink payload element.
typedef struct OfArg {
  enum OfArgKind kind;
  const char *json;
  const struct OfHandle *handle;
} OfArg;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread, or null. Valid until
// the next call into this library on the same thread.
const char *of_last_error_message(void);

// # Safety
// `s` must be null or a string returned by this library, freed once.
void of_string_free(char *s);

// Validates manifest text.
//
// # Safety
// `text` must be a valid C string.
enum OfStatus of_manifest_check(const char *text);

// Renders the disclosure report of a manifest into `*out`.
//
// # Safety
// `text` must be a valid C string and `out` writable.
enum OfStatus of_manifest_disclose(const char *text, char **out);

// Creates a runtime for the given manifest with a recording transport.
//
// # Safety
// `manifest` must be a valid C string and `out` writable.
enum OfStatus of_runtime_new(const char *manifest, struct OfRuntime **out);

// # Safety
// `rt` must be null or a runtime from `of_runtime_new`, freed once.
void of_runtime_free(struct OfRuntime *rt);

// Registers a sensitive field. `label` is a declared label name, either
// bare (`Taint_UI`) or qualified (`com.example.app/Taint_UI`).
//
// # Safety
// Pointers must be valid.
enum OfStatus of_runtime_register_field(const struct OfRuntime *rt,
                                        const char *field_id,
                                        const char *label);

// # Safety
// Pointers must be valid.
enum OfStatus of_runtime_set_value(const struct OfRuntime *rt,
                                   const char *field_id,
                                   const char *value);

// Read from outside any QM; always yields an empty string.
//
// # Safety
// Pointers must be valid and `out` writable.
enum OfStatus of_runtime_get_text_untrusted(const struct OfRuntime *rt,
                                            const char *field_id,
                                            char **out);

// Registers a QM implemented by `callback`.
//
// # Safety
// Pointers must be valid; `user_data` must outlive the runtime.
enum OfStatus of_runtime_register_qm(const struct OfRuntime *rt,
                                     const char *name,
                                     OfQmCallback callback,
                                     void *user_data);

// Registers the demo QMs used by the built-in scenarios.
//
// # Safety
// `rt` must be valid.
enum OfStatus of_runtime_register_builtin_qms(const struct OfRuntime *rt);

// Runs QM `name` with `args`; on success `*out` receives the result handle.
//
// # Safety
// Pointers must be valid; `args` must hold `len` elements.
enum OfStatus of_qm_call(const struct OfRuntime *rt,
                         const char *name,
                         const struct OfArg *args,
                         size_t len,
                         struct OfHandle **out);

// Comma-separated taint labels of a handle.
//
// # Safety
// Pointers must be valid and `out` writable.
enum OfStatus of_handle_taints(const struct OfRuntime *rt,
                               const struct OfHandle *handle,
                               char **out);

// Hex id of a handle.
//
// # Safety
// Pointers must be valid and `out` writable.
enum OfStatus of_handle_id(const struct OfHandle *handle, char **out);

// # Safety
// `handle` must be null or a handle from this library, freed once.
void of_handle_free(struct OfHandle *handle);

// Sets the JSON result of the running QM.
//
// # Safety
// `json` must be a valid C string.
enum OfStatus of_context_set_result(struct OfContext *ctx, const char *json);

// Taints acquired so far by the running QM, comma-separated.
//
// # Safety
// `out` must be writable.
enum OfStatus of_context_taints(struct OfContext *ctx, char **out);

// Opens a handle inside the QM; `*out` receives its payload as JSON.
//
// # Safety
// Pointers must be valid and `out` writable.
enum OfStatus of_context_declassify(struct OfContext *ctx,
                                    const struct OfHandle *handle,
                                    char **out);

// Trusted read of a sensitive field.
//
// # Safety
// Pointers must be valid and `out` writable.
enum OfStatus of_context_get_text(struct OfContext *ctx, const char *field_id, char **out);

// Mediated NETWORK post of `payload` to `url`.
//
// # Safety
// Pointers must be valid; `payload` must hold `len` elements.
enum OfStatus of_context_network_post(struct OfContext *ctx,
                                      const struct OfArg *payload,
                                      size_t len,
                                      const char *url);

// Mediated SMS send of `payload` to `number`.
//
// # Safety
// Pointers must be valid; `payload` must hold `len` elements.
enum OfStatus of_context_sms_send(struct OfContext *ctx,
                                  const struct OfArg *payload,
                                  size_t len,
                                  const char *number);

// Nested QM call from inside a QM.
//
// # Safety
// Pointers must be valid; `args` must hold `len` elements.
enum OfStatus of_context_call(struct OfContext *ctx,
                              const char *name,
                              const struct OfArg *args,
                              size_t len,
                              struct OfHandle **out);

// Attempt log export, one `ALLOW|DENY <SINK> <dest> taints=<labels>` line
// per attempt.
//
// # Safety
// Pointers must be valid and `out` writable.
enum OfStatus of_runtime_export_log(const struct OfRuntime *rt, char **out);

// Runs a built-in scenario with the recording transport. `*out` receives
// the report. Returns `OF_STATUS_SCENARIO_FAILED` if an expectation fails.
//
// # Safety
// Pointers must be valid and `out` writable.
enum OfStatus of_scenario_run_builtin(const char *name, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OPAQUEFLOW_H */
