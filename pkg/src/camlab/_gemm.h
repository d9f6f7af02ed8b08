/* y[o, p] = (float)(bias[o] + sum_r wm[o, r] * cols[r, p]), r ascending.
 *
 * Register-blocked over 4 outputs x 8 positions. Every path adds the same
 * terms in the same order, and -ffp-contract=off keeps mul and add separate,
 * so the SIMD clones picked at load time all produce identical bits. */
#ifndef CAMLAB_GEMM_H
#define CAMLAB_GEMM_H

#include <stddef.h>

#define CAMLAB_OB 4
#define CAMLAB_PB 8

#ifndef CAMLAB_CLONES
#if defined(__GNUC__) && !defined(__clang__) && defined(__x86_64__) && defined(__linux__)
#define CAMLAB_CLONES __attribute__((target_clones("avx512f", "avx2", "default")))
#else
#define CAMLAB_CLONES
#endif
#endif

static inline void camlab_dot_rest(const double *wm, const double *bias, const double *cols,
                                   ptrdiff_t q, ptrdiff_t R, ptrdiff_t P, ptrdiff_t p, float *y)
{
    double s = bias[q];
    for (ptrdiff_t r = 0; r < R; r++)
        s = s + wm[q * R + r] * cols[r * P + p];
    y[q * P + p] = (float)s;
}

#if defined(__GNUC__)
typedef double camlab_v4d __attribute__((vector_size(32), aligned(8)));
#define CAMLAB_VEC 1
#else
#define CAMLAB_VEC 0
#endif

CAMLAB_CLONES
static void camlab_gemm_bias(const double *wm, const double *bias, const double *cols,
                             ptrdiff_t O, ptrdiff_t R, ptrdiff_t P, float *y)
{
    for (ptrdiff_t o = 0; o < O; o += CAMLAB_OB) {
        const int nb = O - o < CAMLAB_OB ? (int)(O - o) : CAMLAB_OB;
        ptrdiff_t p = 0;
#if CAMLAB_VEC
        for (; p + CAMLAB_PB <= P; p += CAMLAB_PB) {
            camlab_v4d acc[CAMLAB_OB][2];
            for (int q = 0; q < nb; q++) {
                const double b = bias[o + q];
                acc[q][0] = (camlab_v4d){b, b, b, b};
                acc[q][1] = acc[q][0];
            }
            for (ptrdiff_t r = 0; r < R; r++) {
                const camlab_v4d c0 = *(const camlab_v4d *)(cols + r * P + p);
                const camlab_v4d c1 = *(const camlab_v4d *)(cols + r * P + p + 4);
                for (int q = 0; q < nb; q++) {
                    const double u = wm[(o + q) * R + r];
                    const camlab_v4d uv = {u, u, u, u};
                    acc[q][0] = acc[q][0] + uv * c0;
                    acc[q][1] = acc[q][1] + uv * c1;
                }
            }
            for (int q = 0; q < nb; q++)
                for (int t = 0; t < 4; t++) {
                    y[(o + q) * P + p + t] = (float)acc[q][0][t];
                    y[(o + q) * P + p + 4 + t] = (float)acc[q][1][t];
                }
        }
#endif
        for (int q = 0; q < nb; q++)
            for (ptrdiff_t pr = p; pr < P; pr++)
                camlab_dot_rest(wm, bias, cols, o + q, R, P, pr, y);
    }
}

/* Batch-summed kernel and bias gradients of a stride-1 'same' conv.
 * g is [B, O, H, W], xp the zero-padded input [B, C, H+K-1, W+K-1], both
 * float64. Each sum runs over (n, i) into per-column partials part[0..W),
 * which are then added in column order. */
CAMLAB_CLONES
static void camlab_conv_wgrad(const double *g, const double *xp, ptrdiff_t B, ptrdiff_t O,
                              ptrdiff_t C, ptrdiff_t H, ptrdiff_t W, ptrdiff_t K,
                              double *gw, double *gb, double *part)
{
    const ptrdiff_t Hp = H + K - 1, Wp = W + K - 1;
    for (ptrdiff_t o = 0; o < O; o++) {
        for (ptrdiff_t j = 0; j < W; j++)
            part[j] = 0.0;
        for (ptrdiff_t n = 0; n < B; n++)
            for (ptrdiff_t i = 0; i < H; i++) {
                const double *grow = g + ((n * O + o) * H + i) * W;
                for (ptrdiff_t j = 0; j < W; j++)
                    part[j] = part[j] + grow[j];
            }
        double acc = 0.0;
        for (ptrdiff_t j = 0; j < W; j++)
            acc = acc + part[j];
        gb[o] = acc;
        for (ptrdiff_t c = 0; c < C; c++)
            for (ptrdiff_t ky = 0; ky < K; ky++)
                for (ptrdiff_t kx = 0; kx < K; kx++) {
                    for (ptrdiff_t j = 0; j < W; j++)
                        part[j] = 0.0;
                    for (ptrdiff_t n = 0; n < B; n++)
                        for (ptrdiff_t i = 0; i < H; i++) {
                            const double *restrict grow = g + ((n * O + o) * H + i) * W;
                            const double *restrict xrow = xp + ((n * C + c) * Hp + i + ky) * Wp + kx;
                            for (ptrdiff_t j = 0; j < W; j++)
                                part[j] = part[j] + grow[j] * xrow[j];
                        }
                    acc = 0.0;
                    for (ptrdiff_t j = 0; j < W; j++)
                        acc = acc + part[j];
                    gw[((o * C + c) * K + ky) * K + kx] = acc;
                }
    }
}

#endif
