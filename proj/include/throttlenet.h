/* C interface to the throttleable network library. */
#ifndef THROTTLENET_H
#define THROTTLENET_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define TN_API __declspec(dllexport)
#else
#define TN_API __attribute__((visibility("default")))
#endif

typedef enum tn_status {
  TN_OK = 0,
  TN_CHECK_FAILED = 1,  /* a verification (gradcheck) failed */
  TN_USAGE_ERROR = 2,   /* bad config, arguments, missing or corrupt files */
  TN_DIVERGED = 3,      /* training produced a non-finite loss */
  TN_INTERNAL_ERROR = 4
} tn_status;

typedef struct tn_experiment tn_experiment;

/* Message for the most recent failure on the calling thread ("" if none). */
TN_API const char* tn_last_error(void);
TN_API const char* tn_version(void);

/* config_path may be NULL (defaults only). */
TN_API tn_status tn_experiment_create(const char* config_path, tn_experiment** out);
TN_API void tn_experiment_destroy(tn_experiment* exp);

/* Dotted override, e.g. key "train.epochs", value "3". Later calls win. */
TN_API tn_status tn_experiment_set(tn_experiment* exp, const char* key, const char* value);
TN_API tn_status tn_experiment_set_out_dir(tn_experiment* exp, const char* dir);
TN_API tn_status tn_experiment_set_seed(tn_experiment* exp, uint64_t seed);

/* Fully resolved config text. The pointer stays valid until the next call
   on the same experiment. */
TN_API tn_status tn_experiment_config(tn_experiment* exp, const char** text);

TN_API tn_status tn_train_datapath(tn_experiment* exp);
/* datapath_checkpoint may be NULL (<out>/datapath.ckpt). */
TN_API tn_status tn_train_controller(tn_experiment* exp, const char* datapath_checkpoint);

typedef struct tn_sweep_summary {
  double auc;
  double peak_accuracy;
  size_t points;
} tn_sweep_summary;

/* Any pointer argument may be NULL: checkpoints default to the output
   directory, strategy to the configured one, csv_path to <out>/curve.csv.
   A controller checkpoint also produces profile.csv next to the curve. */
TN_API tn_status tn_sweep(tn_experiment* exp, const char* datapath_checkpoint, const char* controller_checkpoint,
                          const char* strategy, const char* csv_path, tn_sweep_summary* summary);

/* Called once per checked op (plus "controller"), in order. */
typedef void (*tn_gradcheck_row_fn)(const char* name, double max_error, int passed, void* user);

/* Finite-difference suite. corrupt_op (test fixture, may be NULL) names an
   op whose backward rule is deliberately perturbed for the run. Returns
   TN_CHECK_FAILED when any row fails. */
TN_API tn_status tn_gradcheck(const char* corrupt_op, tn_gradcheck_row_fn row, void* user);

#ifdef __cplusplus
}
#endif

#endif
