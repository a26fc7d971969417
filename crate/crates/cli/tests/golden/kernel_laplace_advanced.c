/* kernel_laplace: generated stencil kernel */
#include <stddef.h>

#define SF_MIN(a, b) ((a) < (b) ? (a) : (b))

static inline long sf_mod(long a, long b)
{
  long r = a % b;
  return r < 0 ? r + b : r;
}

void kernel_laplace(const double *restrict bc_right /* [31] */, double *restrict p /* [961] */, const double *restrict pn /* [961] */)
{
  /* hoisted scalars */
  const double c0 = 2.0;

  #pragma omp parallel for schedule(static)
  for (long xb = 1; xb < 30; xb += 16)
  {
    for (long x = xb; x < SF_MIN(xb + 16, 30); x += 1)
    {
      for (long yb = 1; yb < 30; yb += 16)
      {
        #pragma omp simd
        for (long y = yb; y < SF_MIN(yb + 16, 30); y += 1)
        {
          p[x*31 + y] = 0.5*(pn[(x - 1)*31 + y] + pn[x*31 + (y - 1)] + pn[x*31 + (y + 1)] + pn[(x + 1)*31 + y])/c0;
        }
      }
    }
  }
  #pragma omp parallel for simd schedule(static)
  for (long x = 0; x < 31; x += 1)
  {
    p[x*31 + 0] = 0.0;
  }
  #pragma omp parallel for simd schedule(static)
  for (long x = 0; x < 31; x += 1)
  {
    p[x*31 + 30] = bc_right[x];
  }
  #pragma omp parallel for simd schedule(static)
  for (long y = 0; y < 31; y += 1)
  {
    p[0 + y] = p[31 + y];
  }
  #pragma omp parallel for simd schedule(static)
  for (long y = 0; y < 31; y += 1)
  {
    p[930 + y] = p[899 + y];
  }
}
