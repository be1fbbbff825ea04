#include <math.h>
#include <stdio.h>
#include <stdlib.h>

#include "maskbook.h"

#define CHECK(call)                                                      \
  do {                                                                   \
    MbStatus st_ = (call);                                               \
    if (st_ != MB_STATUS_OK) {                                           \
      fprintf(stderr, "%s -> %d: %s\n", #call, st_, mb_last_error());   \
      return 1;                                                          \
    }                                                                    \
  } while (0)

int main(void) {
  enum { LEN = 400 };
  double x[LEN];
  for (int i = 0; i < LEN; i++) x[i] = sin(0.05 * i) + 0.3 * cos(0.31 * i);

  MbStftPlan *plan = NULL;
  CHECK(mb_stft_plan_new(64, 16, 64, MB_WINDOW_SQRT_HANN, 8000, &plan));
  size_t frames = 0, bins = 0;
  CHECK(mb_stft_shape(plan, LEN, &frames, &bins));
  MbComplex *spec = calloc(frames * bins, sizeof(MbComplex));
  CHECK(mb_stft(plan, x, LEN, spec, frames * bins));
  double y[LEN];
  CHECK(mb_istft(plan, spec, frames, bins, LEN, y));
  double err = 0.0;
  for (int i = 0; i < LEN; i++) err = fmax(err, fabs(x[i] - y[i]));
  if (err > 1e-9) {
    fprintf(stderr, "round trip error %g\n", err);
    return 1;
  }

  if (mb_stft(plan, x, LEN, spec, 1) != MB_STATUS_BUFFER_TOO_SMALL || mb_last_error() == NULL) return 1;

  MbPhasebook *book = NULL;
  CHECK(mb_phasebook_uniform(4, &book));
  if (mb_phasebook_size(book) != 4) return 1;

  mb_phasebook_free(book);
  mb_stft_plan_free(plan);
  free(spec);
  printf("ok %s\n", mb_version());
  return 0;
}
