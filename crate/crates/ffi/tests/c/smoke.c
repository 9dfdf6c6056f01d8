#include <math.h>
#include <stdio.h>
#include "onelora.h"

int main(void) {
    const double w0[6] = {1.0, -2.0, 0.5, 0.0, 3.0, 1.5};
    OneloraLayer *layer = NULL;
    if (onelora_layer_new(ONELORA_METHOD_ONE_LORA, 1, 2, 3, w0, NULL, 0, &layer) != ONELORA_STATUS_OK) {
        fprintf(stderr, "new: %s\n", onelora_last_error());
        return 1;
    }
    const double b[2] = {1.0, -1.0};
    onelora_layer_set_params(layer, b, 2);
    const double x[3] = {1.0, 1.0, 1.0};
    double y[2];
    if (onelora_layer_forward(layer, x, 3, y, 2) != ONELORA_STATUS_OK) return 1;
    onelora_layer_free(layer);
    if (fabs(y[0] - 2.5) > 1e-12 || fabs(y[1] - 1.5) > 1e-12) return 2;

    size_t n = 0;
    if (onelora_param_count(ONELORA_METHOD_LORA, 768, 768, 1, &n) != ONELORA_STATUS_OK || n != 1536) return 3;
    if (onelora_param_count(99, 4, 4, 1, &n) != ONELORA_STATUS_INVALID_ARGUMENT) return 4;
    printf("ok\n");
    return 0;
}
