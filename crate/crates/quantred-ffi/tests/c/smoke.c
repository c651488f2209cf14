#include <math.h>
#include <stdio.h>
#include <string.h>

#include "quantred.h"

#define CHECK(cond)                                                      \
  do {                                                                   \
    if (!(cond)) {                                                       \
      const char *msg = qr_last_error_message();                        \
      fprintf(stderr, "check failed at line %d: %s (%s)\n", __LINE__,   \
              #cond, msg ? msg : "no error message");                   \
      return 1;                                                          \
    }                                                                    \
  } while (0)

int main(void) {
  CHECK(strlen(qr_version()) > 0);

  QrAction *e1 = NULL;
  CHECK(qr_action_from_example("E1", &e1) == QR_STATUS_OK);
  size_t dim = 0;
  CHECK(qr_invariant_dim(e1, 2, QR_TWIST_PLAIN, &dim) == QR_STATUS_OK && dim == 1);
  CHECK(qr_invariant_dim(e1, 3, QR_TWIST_PLAIN, &dim) == QR_STATUS_OK && dim == 0);

  /* same action built from raw data */
  size_t factors[] = {1};
  int64_t degrees[] = {1};
  int64_t weights[] = {1, -1};
  int64_t num[] = {0}, den[] = {1};
  QrAction *raw = NULL;
  CHECK(qr_action_new(factors, degrees, 1, weights, 1, num, den, &raw) == QR_STATUS_OK);
  double re[] = {1.0, 0.0}, im[] = {0.0, 0.0}, phi = 0.0;
  CHECK(qr_moment_map(raw, re, im, 2, &phi) == QR_STATUS_OK);
  CHECK(fabs(fabs(phi) - 2.0 * M_PI) < 1e-12);

  QrGram *up = NULL, *down = NULL;
  CHECK(qr_gram_upstairs(e1, 2, QR_TWIST_PLAIN, 1, 2000, 7, &up) == QR_STATUS_OK);
  CHECK(qr_gram_downstairs(e1, 2, QR_TWIST_PLAIN, 1, 2000, 7, &down) == QR_STATUS_OK);
  double gr, gi, ge, v, e;
  CHECK(qr_gram_entry(down, 0, 0, &gr, &gi, &ge) == QR_STATUS_OK);
  CHECK(fabs(gr - 0.25) < 1e-12);
  CHECK(qr_gram_entry(down, 1, 0, &gr, &gi, &ge) == QR_STATUS_OUT_OF_RANGE);
  CHECK(qr_last_error_message() != NULL);
  CHECK(qr_unitarity_defect(up, down, &v, &e) == QR_STATUS_OK && v > 0.0 && v < 1.0);

  CHECK(qr_action_from_example("E7", &raw) == QR_STATUS_CONFIG);
  CHECK(qr_gram_dim(NULL, &dim) == QR_STATUS_NULL_POINTER);

  qr_gram_free(up);
  qr_gram_free(down);
  qr_action_free(e1);
  qr_action_free(raw);
  printf("ok\n");
  return 0;
}
