/* Exercises the C header end to end: rank weights, AURAC, a tiny training
 * run through a checkpoint handle, and error reporting. */
#include <math.h>
#include <stdio.h>
#include <string.h>

#include "mlora.h"

#define CHECK(call)                                                            \
    do {                                                                       \
        MloraStatus s_ = (call);                                               \
        if (s_ != MLORA_STATUS_OK) {                                           \
            fprintf(stderr, "%s failed: %d (%s)\n", #call, (int)s_,            \
                    mlora_last_error());                                       \
            return 1;                                                          \
        }                                                                      \
    } while (0)

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: smoke <checkpoint-path>\n");
        return 2;
    }

    size_t ranks[] = {1, 2, 4, 8};
    double p[8];
    CHECK(mlora_compute_p(ranks, 4, 8, MLORA_SCALING_UNIT, p, 8));
    printf("p");
    for (int i = 0; i < 8; i++) printf(" %g", p[i]);
    printf("\n");

    size_t curve_ranks[] = {1, 2};
    double curve_scores[] = {32.4, 33.6};
    double area = 0.0;
    CHECK(mlora_aurac(curve_ranks, curve_scores, 2, false, &area));
    printf("aurac %.4f\n", area);

    size_t bad[] = {1, 16};
    MloraStatus s = mlora_compute_p(bad, 2, 8, MLORA_SCALING_UNIT, p, 8);
    printf("bad-rank status %d message %s\n", (int)s, mlora_last_error());

    const char *config =
        "{\"method\":\"matryoshka\",\"max_rank\":4,\"ranks\":[1,2,4],"
        "\"scaling\":\"unit\",\"learning_rate\":0.01,\"epochs\":1,"
        "\"batch_size\":8,\"seed\":42,\"weight_decay\":0.0,"
        "\"adam_beta1\":0.9,\"adam_beta2\":0.999,\"adam_eps\":1e-8,"
        "\"task\":{\"in_dim\":6,\"out_dim\":5,\"spectrum\":[3.0,1.0],"
        "\"train_size\":32,\"test_size\":16,\"seed\":0}}";
    MloraCheckpoint *ckpt = NULL;
    CHECK(mlora_train_json(config, &ckpt));
    CHECK(mlora_checkpoint_save(ckpt, argv[1]));

    MloraCheckpoint *loaded = NULL;
    CHECK(mlora_checkpoint_load(argv[1], &loaded));
    size_t m = 0, n = 0, r = 0;
    CHECK(mlora_checkpoint_dims(loaded, &m, &n, &r));
    printf("dims %zu %zu %zu\n", m, n, r);

    double w_saved[30], w_loaded[30];
    CHECK(mlora_checkpoint_merge(ckpt, 2, w_saved, 30));
    CHECK(mlora_checkpoint_merge(loaded, 2, w_loaded, 30));
    printf("merge-equal %d\n", memcmp(w_saved, w_loaded, sizeof w_saved) == 0);

    double score = -1.0;
    CHECK(mlora_checkpoint_score(loaded, 4, &score));
    printf("score-in-range %d\n", score >= 0.0 && score <= 100.0);

    mlora_checkpoint_free(ckpt);
    mlora_checkpoint_free(loaded);
    mlora_checkpoint_free(NULL);
    return 0;
}
