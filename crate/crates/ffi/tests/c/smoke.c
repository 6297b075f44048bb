#include <stdio.h>
#include <string.h>
#include "signtok.h"

int main(void) {
    uint32_t levels[4] = {5, 5, 5, 5};
    SigntokFsq *fsq = NULL;
    if (signtok_fsq_new(levels, 4, &fsq) != SIGNTOK_STATUS_OK) return 1;
    if (signtok_fsq_vocab_size(fsq) != 625) return 2;
    double z[8] = {0, 0, 0, 0, 50, 50, 50, 50};
    uint32_t idx[2];
    if (signtok_fsq_quantize(fsq, z, 2, idx) != SIGNTOK_STATUS_OK) return 3;
    if (idx[0] != 312 || idx[1] != 624) return 4;
    double back[4];
    if (signtok_fsq_dequantize(fsq, 624, 1, back) != SIGNTOK_STATUS_OK || back[3] != 1.0) return 5;
    signtok_fsq_free(fsq);

    uint32_t bad[1] = {1};
    if (signtok_fsq_new(bad, 1, &fsq) != SIGNTOK_STATUS_ARGUMENT) return 6;
    char msg[128];
    if (signtok_last_error(msg, sizeof msg) == 0 || strstr(msg, "level") == NULL) return 7;

    double a[1] = {0}, b[1] = {3}, d = 0;
    if (signtok_dtw(a, 1, b, 1, 1, &d) != SIGNTOK_STATUS_OK || d != 3.0) return 8;
    printf("ok %s\n", signtok_version());
    return 0;
}
