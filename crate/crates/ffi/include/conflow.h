#ifndef CONFLOW_H
#define CONFLOW_H

/* Generated by cbindgen from the conflow-ffi crate; edit the Rust side instead. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Outcome of a call. Anything other than `Ok` leaves a message readable
// through `conflow_last_error`.
typedef enum ConflowStatus {
  CONFLOW_STATUS_OK = 0,
  // A required pointer was null.
  CONFLOW_STATUS_NULL_ARGUMENT = 1,
  // Arguments were present but unusable (bad index, wrong length, ...).
  CONFLOW_STATUS_INVALID_ARGUMENT = 2,
  // The file could not be read or written.
  CONFLOW_STATUS_IO = 3,
  // The file was read but its contents did not parse or validate.
  CONFLOW_STATUS_BAD_DATA = 4,
  // A numeric routine failed.
  CONFLOW_STATUS_COMPUTE = 5,
  // The output buffer is too small; nothing was written.
  CONFLOW_STATUS_BUFFER_TOO_SMALL = 6,
  // A panic was caught at the boundary.
  CONFLOW_STATUS_INTERNAL = 7,
} ConflowStatus;

// Molecules with their conformers, loaded from a JSON-lines file.
typedef struct ConflowDataset ConflowDataset;

// Trained vector-field weights loaded from a checkpoint.
typedef struct ConflowModel ConflowModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static nul-terminated string.
const char *conflow_version(void);

// Message for the most recent failure on this thread. The pointer stays
// valid until the next failing call on the same thread.
const char *conflow_last_error(void);

// Load a dataset from a JSON-lines file. On success stores a new handle in
// `out`; release it with `conflow_dataset_free`.
enum ConflowStatus conflow_dataset_load(const char *path, struct ConflowDataset **out);

// Release a dataset handle. Null is a no-op.
void conflow_dataset_free(struct ConflowDataset *dataset);

// Number of molecules in the dataset.
enum ConflowStatus conflow_dataset_len(const struct ConflowDataset *dataset, uintptr_t *out);

// Atom count of one molecule.
enum ConflowStatus conflow_dataset_atom_count(const struct ConflowDataset *dataset,
                                              uintptr_t molecule,
                                              uintptr_t *out);

// Conformer count of one molecule.
enum ConflowStatus conflow_dataset_conformer_count(const struct ConflowDataset *dataset,
                                                   uintptr_t molecule,
                                                   uintptr_t *out);

// Copy one molecule id into `buf` as a nul-terminated string. `cap` is the
// buffer size in bytes including the terminator; on success `written` (when
// non-null) receives the id length without the terminator.
enum ConflowStatus conflow_dataset_molecule_id(const struct ConflowDataset *dataset,
                                               uintptr_t molecule,
                                               char *buf,
                                               uintptr_t cap,
                                               uintptr_t *written);

// Load model weights from a checkpoint file. On success stores a new handle
// in `out`; release it with `conflow_model_free`.
enum ConflowStatus conflow_model_load(const char *path, struct ConflowModel **out);

// Release a model handle. Null is a no-op.
void conflow_model_free(struct ConflowModel *model);

// Total number of trainable parameters in the model.
enum ConflowStatus conflow_model_parameter_count(const struct ConflowModel *model, uintptr_t *out);

// Sample conformers for one molecule of the dataset. Writes `count` clouds
// of `atom_count * 3` doubles each (x, y, z per atom, clouds back to back)
// into `coords`, whose capacity `cap` is in doubles. The draw is
// deterministic in (model, molecule id, seed).
enum ConflowStatus conflow_sample(const struct ConflowModel *model,
                                  const struct ConflowDataset *dataset,
                                  uintptr_t molecule,
                                  uintptr_t count,
                                  uintptr_t steps,
                                  uint64_t seed,
                                  double *coords,
                                  uintptr_t cap);

// Root-mean-square deviation between two clouds of `points` atoms after
// centering and optimal rotation. Both arrays hold `points * 3` doubles.
enum ConflowStatus conflow_aligned_rmsd(const double *a,
                                        const double *b,
                                        uintptr_t points,
                                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONFLOW_H */
