#include <stdio.h>
#include <string.h>
#include "attrex.h"

#define CHECK(call)                                                          \
    do {                                                                     \
        AttrexStatus s_ = (call);                                            \
        if (s_ != ATTREX_STATUS_OK) {                                        \
            fprintf(stderr, "%s -> %d: %s\n", #call, (int)s_,                \
                    attrex_last_error() ? attrex_last_error() : "(none)");   \
            return 1;                                                        \
        }                                                                    \
    } while (0)

int main(void) {
    AttrexSyntheticSpec spec = {4, 4, 6, 20, 0.05, 0.5, 3};
    AttrexDataset *ds = NULL;
    CHECK(attrex_dataset_generate(&spec, &ds));

    double ratios[3] = {0.6, 0.0, 0.4};
    AttrexSplit *split = NULL;
    CHECK(attrex_split_new(ds, ratios, 1, &split));
    size_t n_test = 0;
    CHECK(attrex_split_len(split, ATTREX_SPLIT_PART_TEST, &n_test));
    size_t test[64];
    CHECK(attrex_split_indices(split, ATTREX_SPLIT_PART_TEST, test, n_test));

    AttrexTrainConfig cfg = {0.01, 40, 0.1, 0.01, 5, 0};
    AttrexSjeModel *sje = NULL;
    CHECK(attrex_sje_train(ds, split, &cfg, &sje));

    size_t correct = 0;
    double x[6], adv[6];
    size_t label, cls;
    AttrexAttackConfig atk = {0.0, 0.0, 3, 1.0};
    for (size_t i = 0; i < n_test; i++) {
        CHECK(attrex_dataset_sample(ds, test[i], x, 6, &label));
        CHECK(attrex_sje_predict_class(sje, x, 6, &cls));
        correct += cls == label;
        CHECK(attrex_sje_attack(sje, x, 6, label, &atk, adv));
        if (memcmp(x, adv, sizeof x) != 0) {
            fprintf(stderr, "zero-radius attack moved the input\n");
            return 1;
        }
    }

    double r = -1.0;
    if (attrex_robustification_measure(0.9, 0.9, 0.9, &r) != ATTREX_STATUS_NOT_APPLICABLE) return 1;
    if (attrex_dataset_info(NULL, NULL) != ATTREX_STATUS_NULL_POINTER) return 1;

    printf("%s %zu/%zu\n", attrex_version(), correct, n_test);
    attrex_sje_free(sje);
    attrex_split_free(split);
    attrex_dataset_free(ds);
    return 0;
}
