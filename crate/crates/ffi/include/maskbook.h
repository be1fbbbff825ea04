#ifndef MASKBOOK_H
#define MASKBOOK_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result codes.
typedef enum MbStatus {
  MB_STATUS_OK = 0,
  MB_STATUS_NULL_POINTER = 1,
  MB_STATUS_INVALID_ARGUMENT = 2,
  MB_STATUS_SHAPE_MISMATCH = 3,
  MB_STATUS_EMPTY = 4,
  MB_STATUS_UNSUPPORTED = 5,
  MB_STATUS_FORMAT = 6,
  MB_STATUS_NUMERICAL = 7,
  MB_STATUS_IO = 8,
  MB_STATUS_BUFFER_TOO_SMALL = 9,
  MB_STATUS_PANIC = 10,
} MbStatus;

// Analysis window family.
typedef enum MbWindow {
  MB_WINDOW_SQRT_HANN = 0,
  MB_WINDOW_HANN = 1,
  MB_WINDOW_RECTANGULAR = 2,
} MbWindow;

// Oracle mask family.
typedef enum MbMaskKind {
  MB_MASK_KIND_IBM = 0,
  MB_MASK_KIND_IRM = 1,
  MB_MASK_KIND_WF = 2,
  MB_MASK_KIND_IAM = 3,
  MB_MASK_KIND_PSF = 4,
  MB_MASK_KIND_TPSF = 5,
  MB_MASK_KIND_ICM = 6,
} MbMaskKind;

// Opaque phasebook.
typedef struct MbPhasebook MbPhasebook;

// Opaque STFT plan.
typedef struct MbStftPlan MbStftPlan;

// Complex number with the layout of `double _Complex`.
typedef struct MbComplex {
  double re;
  double im;
} MbComplex;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer is
// valid until the next call into this library on the same thread.
const char *mb_last_error(void);

// Library version as a static NUL-terminated string.
const char *mb_version(void);

// Create an STFT plan.
//
// # Safety
// `out` must point to writable storage for one pointer.
enum MbStatus mb_stft_plan_new(size_t win_length,
                               size_t hop,
                               size_t dft_size,
                               enum MbWindow window,
                               uint32_t sample_rate,
                               struct MbStftPlan **out);

// Release a plan. NULL is ignored.
//
// # Safety
// `plan` must come from [`mb_stft_plan_new`] and not be used afterwards.
void mb_stft_plan_free(struct MbStftPlan *plan);

// Frames and bins of the STFT of a signal of `len` samples.
//
// # Safety
// `plan` must be a live plan; `frames` and `bins` must be writable.
enum MbStatus mb_stft_shape(const struct MbStftPlan *plan,
                            size_t len,
                            size_t *frames,
                            size_t *bins);

// Forward STFT of `len` samples into `out` (`frames * bins` values).
//
// # Safety
// `signal` must hold `len` doubles and `out` `out_capacity` complex values.
enum MbStatus mb_stft(const struct MbStftPlan *plan,
                      const double *signal,
                      size_t len,
                      struct MbComplex *out,
                      size_t out_capacity);

// Inverse STFT of a `frames x bins` spectrogram, trimmed to `len` samples.
//
// # Safety
// `spec` must hold `frames * bins` values and `out` `len` doubles.
enum MbStatus mb_istft(const struct MbStftPlan *plan,
                       const struct MbComplex *spec,
                       size_t frames,
                       size_t bins,
                       size_t len,
                       double *out);

// Oracle mask of a source `s` against interference `n` in the mixture `x`,
// all `frames x bins`. Real masks are returned with zero imaginary part.
// `guarded` (optional) receives the number of zero-mixture bins.
//
// # Safety
// `s`, `n`, `x` and `out` must each hold `frames * bins` values; `guarded`
// may be NULL.
enum MbStatus mb_oracle_mask(enum MbMaskKind kind,
                             const struct MbComplex *s,
                             const struct MbComplex *n,
                             const struct MbComplex *x,
                             size_t frames,
                             size_t bins,
                             double r_max,
                             struct MbComplex *out,
                             size_t *guarded);

// Bin-wise product `out = mask * x` over `count` values.
//
// # Safety
// All three arrays must hold `count` values.
enum MbStatus mb_apply_mask(const struct MbComplex *mask,
                            const struct MbComplex *x,
                            size_t count,
                            struct MbComplex *out);

// Scale-invariant SDR in dB, clamped to +-120.
//
// # Safety
// `estimate` and `reference` must hold `len` doubles; `out` must be writable.
enum MbStatus mb_si_sdr(const double *estimate, const double *reference, size_t len, double *out);

// Multiple-input spectrogram inversion.
//
// `magnitudes` and `phases` hold `sources` consecutive `frames x bins`
// grids; `out` receives `sources` consecutive signals of `len` samples. With
// `iterations == 0` the output is the plain inverse STFT unless
// `redistribute` is nonzero.
//
// # Safety
// Array sizes must match the stated dimensions.
enum MbStatus mb_misi(const struct MbStftPlan *plan,
                      const double *magnitudes,
                      const double *phases,
                      size_t sources,
                      size_t frames,
                      size_t bins,
                      const double *mixture,
                      size_t len,
                      size_t iterations,
                      bool redistribute,
                      double *out);

// Phasebook from `size` angles in radians.
//
// # Safety
// `atoms` must hold `size` doubles and `out` must be writable.
enum MbStatus mb_phasebook_new(const double *atoms, size_t size, struct MbPhasebook **out);

// Uniform phasebook `{2 pi k / size}` containing 0.
//
// # Safety
// `out` must be writable.
enum MbStatus mb_phasebook_uniform(size_t size, struct MbPhasebook **out);

// Release a phasebook. NULL is ignored.
//
// # Safety
// `book` must come from a phasebook constructor and not be used afterwards.
void mb_phasebook_free(struct MbPhasebook *book);

// Number of atoms, or 0 for NULL.
//
// # Safety
// `book` must be NULL or a live phasebook.
size_t mb_phasebook_size(const struct MbPhasebook *book);

// Copy the atoms (radians, in `(-pi, pi]`) into `out`.
//
// # Safety
// `book` must be live and `out` must hold `capacity` doubles.
enum MbStatus mb_phasebook_atoms(const struct MbPhasebook *book, double *out, size_t capacity);

// Interpolated phase `angle(sum_j p_j e^{i theta_j})` per bin. `probs` is
// `frames x bins x size`; bins whose resultant vanishes get 0 rad and are
// counted in `degenerate` (optional).
//
// # Safety
// `probs` must hold `frames * bins * size` doubles and `out` `frames * bins`.
enum MbStatus mb_phasebook_interpolate(const struct MbPhasebook *book,
                                       const double *probs,
                                       size_t frames,
                                       size_t bins,
                                       double *out,
                                       size_t *degenerate);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MASKBOOK_H */
