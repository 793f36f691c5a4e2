#ifndef ATTREX_H
#define ATTREX_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AttrexStatus {
  ATTREX_STATUS_OK = 0,
  ATTREX_STATUS_NULL_POINTER = 1,
  ATTREX_STATUS_INVALID_ARGUMENT = 2,
  ATTREX_STATUS_IO = 3,
  ATTREX_STATUS_PARSE = 4,
  ATTREX_STATUS_INVALID_DATA = 5,
  ATTREX_STATUS_NUMERICAL = 6,
  ATTREX_STATUS_NOT_APPLICABLE = 7,
  ATTREX_STATUS_PANIC = 8,
} AttrexStatus;

typedef enum AttrexSplitPart {
  ATTREX_SPLIT_PART_TRAIN = 0,
  ATTREX_SPLIT_PART_VAL = 1,
  ATTREX_SPLIT_PART_TEST = 2,
} AttrexSplitPart;

typedef struct AttrexDataset AttrexDataset;

typedef struct AttrexGeneralModel AttrexGeneralModel;

typedef struct AttrexSjeModel AttrexSjeModel;

typedef struct AttrexSplit AttrexSplit;

typedef struct AttrexSyntheticSpec {
  size_t num_classes;
  size_t num_attributes;
  size_t feature_dim;
  size_t samples_per_class;
  double noise_sigma;
  double class_similarity;
  uint64_t seed;
} AttrexSyntheticSpec;

typedef struct AttrexDatasetInfo {
  size_t num_samples;
  size_t feature_dim;
  size_t num_classes;
  size_t num_attributes;
} AttrexDatasetInfo;

/**
 * Training settings. `hidden_dim == 0` trains on raw features; otherwise a
 * fixed random tanh layer of that width (seeded by `seed`) precedes the model.
 * `margin` is ignored by the general classifier.
 */
typedef struct AttrexTrainConfig {
  double learning_rate;
  size_t epochs;
  double margin;
  double weight_init_sigma;
  uint64_t seed;
  size_t hidden_dim;
} AttrexTrainConfig;

/**
 * Attack settings. A non-positive `alpha` means `epsilon / steps`.
 * `margin` is the ranking margin used by the attribute classifier's loss.
 */
typedef struct AttrexAttackConfig {
  double epsilon;
  double alpha;
  size_t steps;
  double margin;
} AttrexAttackConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *attrex_version(void);

/**
 * Message of the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *attrex_last_error(void);

/**
 * # Safety
 * `spec` must point to a valid spec and `dataset` to writable storage.
 */
enum AttrexStatus attrex_dataset_generate(const struct AttrexSyntheticSpec *spec,
                                          struct AttrexDataset **dataset);

/**
 * Loads the features CSV, attributes CSV and names file.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `dataset` must be writable.
 */
enum AttrexStatus attrex_dataset_load(const char *features,
                                      const char *attributes,
                                      const char *names,
                                      struct AttrexDataset **dataset);

/**
 * Writes `features.csv`, `attributes.csv` and `names.txt` into `dir`.
 *
 * # Safety
 * `dataset` must be a live handle and `dir` a NUL-terminated string.
 */
enum AttrexStatus attrex_dataset_save(const struct AttrexDataset *dataset, const char *dir);

/**
 * # Safety
 * `dataset` must be NULL or a handle not yet freed.
 */
void attrex_dataset_free(struct AttrexDataset *dataset);

/**
 * # Safety
 * `dataset` must be a live handle and `info` writable.
 */
enum AttrexStatus attrex_dataset_info(const struct AttrexDataset *dataset,
                                      struct AttrexDatasetInfo *info);

/**
 * Copies sample `index` into `features` (length `feature_dim`) and `label`.
 *
 * # Safety
 * `features` must hold `len` doubles; `label` must be writable.
 */
enum AttrexStatus attrex_dataset_sample(const struct AttrexDataset *dataset,
                                        size_t index,
                                        double *features,
                                        size_t len,
                                        size_t *label);

/**
 * Stratified split; `ratios` holds train, validation and test fractions.
 *
 * # Safety
 * `ratios` must point to three doubles; `split` must be writable.
 */
enum AttrexStatus attrex_split_new(const struct AttrexDataset *dataset,
                                   const double *ratios,
                                   uint64_t seed,
                                   struct AttrexSplit **split);

/**
 * # Safety
 * `split` must be NULL or a handle not yet freed.
 */
void attrex_split_free(struct AttrexSplit *split);

/**
 * # Safety
 * `split` must be a live handle and `len` writable.
 */
enum AttrexStatus attrex_split_len(const struct AttrexSplit *split,
                                   enum AttrexSplitPart which,
                                   size_t *len);

/**
 * Copies the sample indices of one part; `len` must equal its size.
 *
 * # Safety
 * `indices` must hold `len` elements.
 */
enum AttrexStatus attrex_split_indices(const struct AttrexSplit *split,
                                       enum AttrexSplitPart which,
                                       size_t *indices,
                                       size_t len);

/**
 * Trains the attribute (SJE) classifier on the split's training part.
 *
 * # Safety
 * All pointers must be live handles or valid structs; `model` writable.
 */
enum AttrexStatus attrex_sje_train(const struct AttrexDataset *dataset,
                                   const struct AttrexSplit *split,
                                   const struct AttrexTrainConfig *config,
                                   struct AttrexSjeModel **model);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void attrex_sje_free(struct AttrexSjeModel *model);

/**
 * Number of attributes the model predicts.
 *
 * # Safety
 * `model` must be a live handle and `len` writable.
 */
enum AttrexStatus attrex_sje_num_attributes(const struct AttrexSjeModel *model, size_t *len);

/**
 * # Safety
 * `x` must hold `x_len` doubles and `attributes` `attr_len` doubles.
 */
enum AttrexStatus attrex_sje_predict_attributes(const struct AttrexSjeModel *model,
                                                const double *x,
                                                size_t x_len,
                                                double *attributes,
                                                size_t attr_len);

/**
 * # Safety
 * `x` must hold `x_len` doubles; `class` must be writable.
 */
enum AttrexStatus attrex_sje_predict_class(const struct AttrexSjeModel *model,
                                           const double *x,
                                           size_t x_len,
                                           size_t *class_);

/**
 * Iterative signed-gradient attack on the attribute classifier. Writes the
 * perturbed input (same length as `x`) into `perturbed`.
 *
 * # Safety
 * `x` and `perturbed` must hold `len` doubles; `config` must be valid.
 */
enum AttrexStatus attrex_sje_attack(const struct AttrexSjeModel *model,
                                    const double *x,
                                    size_t len,
                                    size_t label,
                                    const struct AttrexAttackConfig *config,
                                    double *perturbed);

/**
 * Trains the softmax classifier on the split's training part.
 *
 * # Safety
 * All pointers must be live handles or valid structs; `model` writable.
 */
enum AttrexStatus attrex_general_train(const struct AttrexDataset *dataset,
                                       const struct AttrexSplit *split,
                                       const struct AttrexTrainConfig *config,
                                       struct AttrexGeneralModel **model);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void attrex_general_free(struct AttrexGeneralModel *model);

/**
 * # Safety
 * `x` must hold `x_len` doubles; `class` must be writable.
 */
enum AttrexStatus attrex_general_predict_class(const struct AttrexGeneralModel *model,
                                               const double *x,
                                               size_t x_len,
                                               size_t *class_);

/**
 * Attack on the softmax classifier; `config.margin` is ignored.
 *
 * # Safety
 * `x` and `perturbed` must hold `len` doubles; `config` must be valid.
 */
enum AttrexStatus attrex_general_attack(const struct AttrexGeneralModel *model,
                                        const double *x,
                                        size_t len,
                                        size_t label,
                                        const struct AttrexAttackConfig *config,
                                        double *perturbed);

/**
 * Share of the standard model's accuracy drop recovered by the robust one.
 * Returns `NotApplicable` when the attack caused no drop.
 *
 * # Safety
 * `measure` must be writable.
 */
enum AttrexStatus attrex_robustification_measure(double clean_acc_standard,
                                                 double adv_acc_standard,
                                                 double adv_acc_robust,
                                                 double *measure);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATTREX_H */
