/* kernel_acoustic: generated stencil kernel */
#include <stddef.h>

#define SF_MIN(a, b) ((a) < (b) ? (a) : (b))

static inline long sf_mod(long a, long b)
{
  long r = a % b;
  return r < 0 ? r + b : r;
}

void kernel_acoustic(const double *restrict eta /* [3721] */, const double *restrict m /* [3721] */, double *restrict u /* [11163] */, const double *restrict rec_coords /* [101 x 2] */, double *restrict rec_data, const double *restrict src_coords /* [1 x 2] */, double *restrict src_data, const long t_start, const long t_end)
{
  /* hoisted scalars */
  const double c0 = 225.0;
  const double c1 = 4.499999999999999;

  /* hoisted time-invariant precomputations */
  static double q2[3721] __attribute__((aligned(64)));
  for (long x = 0; x < 61; x += 1)
  {
    for (long y = 0; y < 61; y += 1)
    {
      q2[x*61 + y] = 225.0*(2.1213203435596424*eta[x*61 + y] + m[x*61 + y]);
    }
  }

  for (long t = t_start; t < t_end; t += 1)
  {
    const long tm1_3 = sf_mod(t - 1, 3);
    const long t0_3 = sf_mod(t, 3);
    const long tp1_3 = sf_mod(t + 1, 3);
    #pragma omp parallel for schedule(static)
    for (long xb = 1; xb < 60; xb += 16)
    {
      for (long x = xb; x < SF_MIN(xb + 16, 60); x += 1)
      {
        for (long yb = 1; yb < 60; yb += 16)
        {
          #pragma omp simd
          for (long y = yb; y < SF_MIN(yb + 16, 60); y += 1)
          {
            const double t0 = c0;
            const double t1 = c1;
            u[tp1_3*3721 + x*61 + y] = (2.1213203435596424*t0*eta[x*61 + y]*u[t0_3*3721 + x*61 + y] - t0*m[x*61 + y]*u[tm1_3*3721 + x*61 + y] + 2.0*t0*m[x*61 + y]*u[t0_3*3721 + x*61 + y] + t1*u[t0_3*3721 + (x - 1)*61 + y] + t1*u[t0_3*3721 + x*61 + (y - 1)] - 4.0*t1*u[t0_3*3721 + x*61 + y] + t1*u[t0_3*3721 + x*61 + (y + 1)] + t1*u[t0_3*3721 + (x + 1)*61 + y])/q2[x*61 + y];
          }
        }
      }
    }
    /* inject: src <-> u */
    for (long p = 0; p < 1; p += 1)
    {
      const double gx = src_coords[p*2 + 0]/15.0;
      long ix = (long)gx;
      if (ix > 59) ix = 59;
      const double fx = gx - (double)ix;
      const double gy = src_coords[p*2 + 1]/15.0;
      long iy = (long)gy;
      if (iy > 59) iy = 59;
      const double fy = gy - (double)iy;
      const double w00 = (1.0 - fx)*(1.0 - fy);
      const double w01 = (1.0 - fx)*fy;
      const double w10 = fx*(1.0 - fy);
      const double w11 = fx*fy;
      u[tp1_3*3721 + ix*61 + iy] += w00*4.499999999999999*src_data[t*1 + p]/m[ix*61 + iy];
      u[tp1_3*3721 + ix*61 + (iy + 1)] += w01*4.499999999999999*src_data[t*1 + p]/m[ix*61 + (iy + 1)];
      u[tp1_3*3721 + (ix + 1)*61 + iy] += w10*4.499999999999999*src_data[t*1 + p]/m[(ix + 1)*61 + iy];
      u[tp1_3*3721 + (ix + 1)*61 + (iy + 1)] += w11*4.499999999999999*src_data[t*1 + p]/m[(ix + 1)*61 + (iy + 1)];
    }
    /* interpolate: rec <-> u */
    for (long p = 0; p < 101; p += 1)
    {
      const double gx = rec_coords[p*2 + 0]/15.0;
      long ix = (long)gx;
      if (ix > 59) ix = 59;
      const double fx = gx - (double)ix;
      const double gy = rec_coords[p*2 + 1]/15.0;
      long iy = (long)gy;
      if (iy > 59) iy = 59;
      const double fy = gy - (double)iy;
      const double w00 = (1.0 - fx)*(1.0 - fy);
      const double w01 = (1.0 - fx)*fy;
      const double w10 = fx*(1.0 - fy);
      const double w11 = fx*fy;
      rec_data[t*101 + p] = w00*u[tp1_3*3721 + ix*61 + iy] + w01*u[tp1_3*3721 + ix*61 + (iy + 1)] + w10*u[tp1_3*3721 + (ix + 1)*61 + iy] + w11*u[tp1_3*3721 + (ix + 1)*61 + (iy + 1)];
    }
  }
}
