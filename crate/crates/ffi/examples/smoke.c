/* Minimal C client: build a model, segment a synthetic image, score it. */
#include <stdio.h>
#include <stdlib.h>

#include "samus.h"

int main(void) {
    SamusModel *model = NULL;
    if (samus_model_new_default(0, &model) != SAMUS_STATUS_OK) {
        fprintf(stderr, "new: %s\n", samus_last_error());
        return 1;
    }
    size_t s = 0;
    samus_model_input_size(model, &s);
    float *image = malloc(s * s * sizeof(float));
    unsigned char *gt = malloc(s * s);
    unsigned char *mask = malloc(s * s);
    for (size_t y = 0; y < s; y++) {
        for (size_t x = 0; x < s; x++) {
            long dx = (long)x - (long)s / 2, dy = (long)y - (long)s / 2;
            int inside = dx * dx + dy * dy < (long)(s * s / 16);
            gt[y * s + x] = (unsigned char)inside;
            image[y * s + x] = inside ? 0.7f : 0.2f;
        }
    }
    SamusStatus st = samus_predict_point(model, image, s * s, s / 2.0, s / 2.0, mask, s * s);
    if (st != SAMUS_STATUS_OK) {
        fprintf(stderr, "predict: %s\n", samus_last_error());
        return 1;
    }
    double dice = -1.0;
    samus_dice(mask, gt, s, s, &dice);
    st = samus_predict_point(model, image, 3, 0.0, 0.0, mask, s * s);
    printf("size %zu dice %.3f bad-call status %d version %s\n", s, dice, (int)st, samus_version());
    samus_model_free(model);
    free(image);
    free(gt);
    free(mask);
    return st == SAMUS_STATUS_SHAPE ? 0 : 1;
}
