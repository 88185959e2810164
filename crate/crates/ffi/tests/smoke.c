/* Minimal consumer of include/attnpool.h: load a checkpoint and a clip,
 * classify it, and check the probabilities form a distribution. Driven by
 * the `header_compiles_and_links_from_c` test. */
#include "attnpool.h"

#include <math.h>
#include <stdio.h>
#include <string.h>

int main(int argc, char **argv) {
  if (argc != 3) {
    fprintf(stderr, "usage: smoke <checkpoint.json> <clip.feat>\n");
    return 2;
  }
  if (strlen(attnpool_version()) == 0) {
    fprintf(stderr, "empty version string\n");
    return 1;
  }

  AttnpoolModel *model = NULL;
  AttnpoolClip *clip = NULL;
  if (attnpool_model_load(argv[1], &model) != ATTNPOOL_STATUS_OK) {
    fprintf(stderr, "model load: %s\n", attnpool_last_error());
    return 1;
  }
  if (attnpool_clip_load(argv[2], &clip) != ATTNPOOL_STATUS_OK) {
    fprintf(stderr, "clip load: %s\n", attnpool_last_error());
    return 1;
  }

  size_t classes = attnpool_model_num_classes(model);
  size_t frames = attnpool_clip_frames(clip);
  if (classes == 0 || frames == 0) {
    fprintf(stderr, "degenerate handles: %zu classes, %zu frames\n", classes, frames);
    return 1;
  }

  double probs[64];
  double importance[64];
  if (attnpool_predict(model, clip, ATTNPOOL_POOLING_TP, probs, classes) !=
      ATTNPOOL_STATUS_OK) {
    fprintf(stderr, "predict: %s\n", attnpool_last_error());
    return 1;
  }
  if (attnpool_frame_importance(model, clip, importance, frames) !=
      ATTNPOOL_STATUS_OK) {
    fprintf(stderr, "importance: %s\n", attnpool_last_error());
    return 1;
  }

  double psum = 0.0, isum = 0.0;
  for (size_t c = 0; c < classes; c++) psum += probs[c];
  for (size_t f = 0; f < frames; f++) isum += importance[f];
  if (fabs(psum - 1.0) > 1e-9 || fabs(isum - 1.0) > 1e-9) {
    fprintf(stderr, "not distributions: probs %.12f, importance %.12f\n", psum, isum);
    return 1;
  }

  /* Undersized buffer must be rejected before anything is written. */
  if (attnpool_predict(model, clip, ATTNPOOL_POOLING_TP, probs, classes - 1) !=
      ATTNPOOL_STATUS_BUFFER_TOO_SMALL) {
    fprintf(stderr, "undersized buffer was accepted\n");
    return 1;
  }

  attnpool_clip_free(clip);
  attnpool_model_free(model);
  printf("ok: %zu classes, %zu frames\n", classes, frames);
  return 0;
}
