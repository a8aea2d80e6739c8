/* C ABI for the energy-constrained compression library. */

#ifndef ECC_H
#define ECC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status code returned by every fallible function.
typedef enum EccStatus {
  ECC_STATUS_OK = 0,
  // A required pointer argument was null.
  ECC_STATUS_NULL_ARGUMENT = 1,
  // An argument failed validation (bad length, non-UTF-8 path, ...).
  ECC_STATUS_INVALID_ARGUMENT = 2,
  // The file could not be read.
  ECC_STATUS_IO = 3,
  // The file was read but could not be parsed.
  ECC_STATUS_PARSE = 4,
  // Vector length does not match the model or network.
  ECC_STATUS_LENGTH_MISMATCH = 5,
  // Any other internal failure; see `ecc_last_error_message`.
  ECC_STATUS_INTERNAL = 6,
} EccStatus;

// Loaded bilinear energy model (opaque).
typedef struct EccEnergyModel EccEnergyModel;

// Loaded network checkpoint (opaque).
typedef struct EccNetwork EccNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *ecc_version(void);

// Copies the calling thread's last error message into `buffer` (truncated
// to `length` bytes including the NUL terminator) and returns the full
// message length. A zero return means no error has been recorded.
//
// # Safety
// `buffer` must point to at least `length` writable bytes, or be null
// (in which case only the length is returned).
uintptr_t ecc_last_error_message(char *buffer, uintptr_t length);

// Loads a fitted energy-model file. On success `*out` owns the handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum EccStatus ecc_energy_model_load(const char *path, struct EccEnergyModel **out);

// Releases a model handle; a null handle is a no-op.
//
// # Safety
// `model` must have come from `ecc_energy_model_load` and not be freed twice.
void ecc_energy_model_free(struct EccEnergyModel *model);

// Number of layers the model covers.
//
// # Safety
// `model` and `out` must be valid pointers.
enum EccStatus ecc_energy_model_layers(const struct EccEnergyModel *model, uintptr_t *out);

// Evaluates the estimated energy (joules) at a per-layer sparsity vector of
// `length` entries; the output dimensionality stored in the model file
// closes the final bilinear term.
//
// # Safety
// `s` must point to `length` readable doubles; `out` must be valid.
enum EccStatus ecc_energy_model_eval(const struct EccEnergyModel *model,
                                     const double *s,
                                     uintptr_t length,
                                     double *out);

// Writes the gradient of the energy estimate with respect to each layer
// sparsity into `out_grad` (`length` doubles).
//
// # Safety
// `s` and `out_grad` must point to `length` readable/writable doubles.
enum EccStatus ecc_energy_model_grad(const struct EccEnergyModel *model,
                                     const double *s,
                                     uintptr_t length,
                                     double *out_grad);

// Loads a network checkpoint. On success `*out` owns the handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum EccStatus ecc_network_load(const char *path, struct EccNetwork **out);

// Releases a network handle; a null handle is a no-op.
//
// # Safety
// `network` must have come from `ecc_network_load` and not be freed twice.
void ecc_network_free(struct EccNetwork *network);

// Number of layers in the network.
//
// # Safety
// `network` and `out` must be valid pointers.
enum EccStatus ecc_network_num_layers(const struct EccNetwork *network, uintptr_t *out);

// Network output dimensionality (class count).
//
// # Safety
// `network` and `out` must be valid pointers.
enum EccStatus ecc_network_output_dim(const struct EccNetwork *network, uintptr_t *out);

// Writes each layer's sparsity (count of input channels with nonzero
// weights) into `out` (`length` entries, one per layer).
//
// # Safety
// `out` must point to `length` writable `size_t` slots.
enum EccStatus ecc_network_sparsities(const struct EccNetwork *network,
                                      uintptr_t *out,
                                      uintptr_t length);

// Estimated energy of the network under a loaded model, evaluated at the
// network's current layer sparsities.
//
// # Safety
// All pointers must be valid.
enum EccStatus ecc_network_predicted_energy(const struct EccNetwork *network,
                                            const struct EccEnergyModel *model,
                                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ECC_H */
