#ifndef FOAMFLOW_H
#define FOAMFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum FfStatus {
  FF_STATUS_OK = 0,
  FF_STATUS_NULL_ARGUMENT = 1,
  FF_STATUS_INVALID_UTF8 = 2,
  FF_STATUS_PARSE_ERROR = 3,
  FF_STATUS_NOT_FOUND = 4,
  FF_STATUS_IO = 5,
  FF_STATUS_CONFIG = 6,
  FF_STATUS_LOCKED = 7,
  FF_STATUS_INTERNAL = 8,
  FF_STATUS_PANIC = 9,
} FfStatus;

// The four knowledge-base indices.
typedef enum FfIndexKind {
  FF_INDEX_KIND_TUTORIAL_STRUCTURE = 0,
  FF_INDEX_KIND_TUTORIAL_DETAILS = 1,
  FF_INDEX_KIND_EXECUTION_SCRIPTS = 2,
  FF_INDEX_KIND_COMMAND_DOCUMENTATION = 3,
} FfIndexKind;

// A parsed OpenFOAM dictionary file.
typedef struct FfDict FfDict;

// A loaded knowledge base.
typedef struct FfKnowledgeBase FfKnowledgeBase;

// A running tool server answering JSON-RPC lines.
typedef struct FfServer FfServer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static string.
const char *ff_version(void);

// Message of the last failed call on this thread, or null. Valid until the
// next call on the same thread.
const char *ff_last_error(void);

// Frees a string returned by this library. Null is ignored.
//
// # Safety
// `s` is null or was returned through an out-parameter of this library and
// not yet freed.
void ff_string_free(char *s);

// Parses dictionary text.
//
// # Safety
// `text` is a NUL-terminated string; `out` is a writable pointer.
enum FfStatus ff_dict_parse(const char *text, struct FfDict **out);

// Canonical text of a dictionary.
//
// # Safety
// `dict` is a live handle; `out` is a writable pointer.
enum FfStatus ff_dict_serialize(const struct FfDict *dict, char **out);

// Value at a `/`-separated keyword path: the word for a scalar, the
// canonical text otherwise. `FF_STATUS_NOT_FOUND` when absent.
//
// # Safety
// `dict` is a live handle; `path` is a NUL-terminated string; `out` is a
// writable pointer.
enum FfStatus ff_dict_lookup(const struct FfDict *dict, const char *path, char **out);

// # Safety
// `dict` is null or a handle from [`ff_dict_parse`] not yet freed.
void ff_dict_free(struct FfDict *dict);

// Classifies the output of one command into error records, returned as a
// JSON array of `{severity, message, location}`.
// A timed-out command has no exit code and `exit_code` is ignored.
//
// # Safety
// `log_text` and `command` are NUL-terminated strings; `out` is writable.
enum FfStatus ff_parse_errors(const char *log_text,
                              const char *command,
                              int32_t exit_code,
                              bool timed_out,
                              char **out);

// Loads a knowledge base written by `foamflow build-kb`.
//
// # Safety
// `dir` is a NUL-terminated path; `out` is writable.
enum FfStatus ff_kb_load(const char *dir, struct FfKnowledgeBase **out);

// Number of records in one index; 0 for an index that was never built.
//
// # Safety
// `kb` is a live handle; `out` is writable.
enum FfStatus ff_kb_count(const struct FfKnowledgeBase *kb, enum FfIndexKind kind, size_t *out);

// # Safety
// `kb` is null or a handle from [`ff_kb_load`] not yet freed.
void ff_kb_free(struct FfKnowledgeBase *kb);

// Starts a tool server configured by TOML text in the `--config` file
// format; null means defaults. The environment applies as for the CLI.
//
// # Safety
// `config_toml` is null or a NUL-terminated string; `out` is writable.
enum FfStatus ff_server_start(const char *config_toml, struct FfServer **out);

// Answers one JSON-RPC message. `*out` is null for a notification.
//
// # Safety
// `server` is a live handle; `message` is a NUL-terminated string; `out`
// is writable.
enum FfStatus ff_server_handle(const struct FfServer *server, const char *message, char **out);

// Stops the server after its running jobs finish and releases the store.
//
// # Safety
// `server` is null or a handle from [`ff_server_start`] not yet freed.
void ff_server_free(struct FfServer *server);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FOAMFLOW_H */
