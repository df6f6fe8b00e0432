#ifndef MORALIS_H
#define MORALIS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of a fallible call.
typedef enum MoralisStatus {
  MORALIS_STATUS_OK = 0,
  MORALIS_STATUS_NULL_POINTER = 1,
  MORALIS_STATUS_INVALID_ARGUMENT = 2,
  // Malformed or unreadable input file.
  MORALIS_STATUS_DATA_ERROR = 3,
  // The optimiser stopped without meeting its tolerance.
  MORALIS_STATUS_CONVERGENCE_ERROR = 4,
  // Estimation or simulation rejected the inputs.
  MORALIS_STATUS_MODEL_ERROR = 5,
  MORALIS_STATUS_PANIC = 6,
} MoralisStatus;

// Treatment arms: non-VOI then VOI (neutral or market), or VOI in both
// frames in either order.
typedef enum MoralisArm {
  MORALIS_ARM_N = 0,
  MORALIS_ARM_M = 1,
  MORALIS_ARM_A = 2,
  MORALIS_ARM_B = 3,
} MoralisArm;

typedef struct MoralisDataset MoralisDataset;

typedef struct MoralisEstimate MoralisEstimate;

typedef struct MoralisPayoffTable MoralisPayoffTable;

// Population under construction; validated when used.
typedef struct MoralisPopulation MoralisPopulation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent failure on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *moralis_last_error(void);

// Library version as a static NUL-terminated string.
const char *moralis_version(void);

// The built-in 20-row payoff table.
struct MoralisPayoffTable *moralis_payoff_table_builtin(void);

// Reads a payoff CSV (`id,e1,e2,g,l`).
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum MoralisStatus moralis_payoff_table_read(const char *path, struct MoralisPayoffTable **out);

// Number of payoff configurations; 0 for a null handle.
//
// # Safety
// `table` must be null or a live handle.
size_t moralis_payoff_table_len(const struct MoralisPayoffTable *table);

// Switching threshold `(z - beta) / (1 - z)` for payoff `id`.
//
// # Safety
// `table` must be a live handle and `out` writable.
enum MoralisStatus moralis_kappa_threshold(const struct MoralisPayoffTable *table,
                                           uint32_t id,
                                           double beta,
                                           double *out);

// # Safety
// `table` must be null or a handle not yet freed.
void moralis_payoff_table_free(struct MoralisPayoffTable *table);

// Empty population; add types with [`moralis_population_add`].
struct MoralisPopulation *moralis_population_new(void);

// Adds a preference type with the given share. Shares must sum to one by
// the time the population is used.
//
// # Safety
// `pop` must be a live handle.
enum MoralisStatus moralis_population_add(struct MoralisPopulation *pop,
                                          double share,
                                          double beta,
                                          double kappa,
                                          double sigma);

// # Safety
// `pop` must be null or a handle not yet freed.
void moralis_population_free(struct MoralisPopulation *pop);

// Simulates `n_subjects` subjects in one arm.
//
// # Safety
// Handles must be live and `out` writable.
enum MoralisStatus moralis_simulate(const struct MoralisPopulation *pop,
                                    const struct MoralisPayoffTable *table,
                                    enum MoralisArm arm,
                                    size_t n_subjects,
                                    uint64_t seed,
                                    struct MoralisDataset **out);

// Reads a choice dataset CSV against a payoff table.
//
// # Safety
// `path` must be NUL-terminated, `table` live and `out` writable.
enum MoralisStatus moralis_dataset_read(const char *path,
                                        const struct MoralisPayoffTable *table,
                                        struct MoralisDataset **out);

// Writes the dataset as CSV.
//
// # Safety
// `ds` must be live and `path` NUL-terminated.
enum MoralisStatus moralis_dataset_write(const struct MoralisDataset *ds, const char *path);

// Number of decisions; 0 for a null handle.
//
// # Safety
// `ds` must be null or a live handle.
size_t moralis_dataset_len(const struct MoralisDataset *ds);

// Fraction of selfish choices; NaN for a null or empty dataset.
//
// # Safety
// `ds` must be null or a live handle.
double moralis_dataset_selfish_share(const struct MoralisDataset *ds);

// # Safety
// `ds` must be null or a handle not yet freed.
void moralis_dataset_free(struct MoralisDataset *ds);

// Representative-agent maximum likelihood with `starts` random starts
// (0 selects the default).
//
// # Safety
// `ds` must be live and `out` writable.
enum MoralisStatus moralis_fit_representative(const struct MoralisDataset *ds,
                                              size_t starts,
                                              uint64_t seed,
                                              struct MoralisEstimate **out);

// Point estimates `[beta, kappa, sigma]` and their subject-clustered
// standard errors; `se` may be null. Missing clustered errors are NaN.
//
// # Safety
// `est` must be live; `params` must hold 3 doubles, as must `se` if non-null.
enum MoralisStatus moralis_estimate_params(const struct MoralisEstimate *est,
                                           double *params,
                                           double *se);

// Maximised log-likelihood; NaN for a null handle.
//
// # Safety
// `est` must be null or a live handle.
double moralis_estimate_loglik(const struct MoralisEstimate *est);

// # Safety
// `est` must be null or a handle not yet freed.
void moralis_estimate_free(struct MoralisEstimate *est);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MORALIS_H */
