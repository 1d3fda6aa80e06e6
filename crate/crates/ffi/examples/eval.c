/* Evaluate a checkpoint on a dataset split directory.
 *   cc eval.c -Iinclude -Ltarget/release -lbevpred_ffi -o eval
 *   ./eval data/eval run/checkpoints/last.ckpt
 */
#include <stdio.h>
#include <stdlib.h>

#include "bevpred.h"

static int check(BpStatus s) {
    if (s != BP_STATUS_OK) {
        fprintf(stderr, "error %d: %s\n", (int)s, bp_last_error());
        exit(1);
    }
    return 0;
}

int main(int argc, char **argv) {
    if (argc != 3) {
        fprintf(stderr, "usage: %s SPLIT_DIR CHECKPOINT\n", argv[0]);
        return 2;
    }
    BpDataset *ds = NULL;
    BpCheckpoint *ck = NULL;
    BpInstanceMaps *maps = NULL;
    check(bp_dataset_open(argv[1], &ds));
    check(bp_checkpoint_open(argv[2], &ck));

    size_t t, h, w;
    check(bp_predict(ck, ds, 0, &maps));
    check(bp_maps_dims(maps, &t, &h, &w));
    uint32_t *ids = malloc(t * h * w * sizeof *ids);
    check(bp_maps_copy(maps, ids, t * h * w));
    size_t fg = 0;
    for (size_t i = 0; i < t * h * w; i++) fg += ids[i] != 0;
    printf("sample 0: %zu frames of %zux%zu, %zu foreground cells\n", t, h, w, fg);

    BpMetrics m;
    check(bp_evaluate(ck, ds, &m));
    printf("iou=%.4f vpq=%.4f id_consistency=%.4f\n", m.iou, m.vpq, m.id_consistency);

    free(ids);
    bp_maps_free(maps);
    bp_checkpoint_free(ck);
    bp_dataset_free(ds);
    return 0;
}
