//! Direct kernels for stride-1 "same" convolutions.
//!
//! Outputs are computed in register tiles of 8 columns by up to 4 channels,
//! weight gradients as lane-split dot products. No sum is ever reassociated
//! and every step is a correctly rounded fused multiply-add, so the wide and
//! the portable code paths produce identical bits.

use super::Real;

const LANES: usize = 8;
/// Output channels computed together per input load.
const CO_BLOCK: usize = 8;

fn pad_planes<T: Real>(x: &[T], c: usize, h: usize, w: usize, p: usize) -> Vec<T> {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![T::ZERO; c * hp * wp];
    for ch in 0..c {
        for y in 0..h {
            out[ch * hp * wp + (y + p) * wp + p..][..w].copy_from_slice(&x[ch * h * w + y * w..][..w]);
        }
    }
    out
}

struct Padded<'a, T> {
    data: &'a [T],
    hp: usize,
    wp: usize,
}

impl<T: Real> Padded<'_, T> {
    #[inline(always)]
    fn row(&self, c: usize, y: usize) -> &[T] {
        &self.data[(c * self.hp + y) * self.wp..][..self.wp]
    }
}

/// `CB` output channels starting at `co0`; weights are tap-major
/// (`[ci][ky][kx][co]`). Every output element accumulates its taps in
/// `(ci, ky, kx)` order.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn forward_tile<T: Real, const CB: usize>(
    xp: &Padded<T>,
    cin: usize,
    k: usize,
    wt: &[T],
    cout: usize,
    co0: usize,
    h: usize,
    w: usize,
    out: &mut [T],
) {
    let hw = h * w;
    for y in 0..h {
        let mut x0 = 0;
        while x0 + LANES <= w {
            let mut acc = [[T::ZERO; LANES]; CB];
            for (cb, a) in acc.iter_mut().enumerate() {
                a.copy_from_slice(&out[(co0 + cb) * hw + y * w + x0..][..LANES]);
            }
            for ci in 0..cin {
                for ky in 0..k {
                    let row = &xp.row(ci, y + ky)[x0..];
                    for kx in 0..k {
                        let xv: [T; LANES] = row[kx..kx + LANES].try_into().unwrap();
                        let wrow = &wt[((ci * k + ky) * k + kx) * cout + co0..][..CB];
                        for cb in 0..CB {
                            let wv = wrow[cb];
                            for l in 0..LANES {
                                acc[cb][l] = wv.mul_add(xv[l], acc[cb][l]);
                            }
                        }
                    }
                }
            }
            for (cb, a) in acc.iter().enumerate() {
                out[(co0 + cb) * hw + y * w + x0..][..LANES].copy_from_slice(a);
            }
            x0 += LANES;
        }
        for x in x0..w {
            for cb in 0..CB {
                let o = &mut out[(co0 + cb) * hw + y * w + x];
                let mut a = *o;
                for ci in 0..cin {
                    for ky in 0..k {
                        let row = xp.row(ci, y + ky);
                        for kx in 0..k {
                            a = wt[((ci * k + ky) * k + kx) * cout + co0 + cb].mul_add(row[x + kx], a);
                        }
                    }
                }
                *o = a;
            }
        }
    }
}

/// `out += conv(x, wts)` with `wts` in `[co][ci][ky][kx]` layout.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn forward_impl<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    wts: &[T],
    cout: usize,
    k: usize,
    out: &mut [T],
) {
    let p = (k - 1) / 2;
    let data = pad_planes(x, cin, h, w, p);
    let xp = Padded {
        data: &data,
        hp: h + 2 * p,
        wp: w + 2 * p,
    };
    let taps = cin * k * k;
    let mut wt = vec![T::ZERO; taps * cout];
    for co in 0..cout {
        for t in 0..taps {
            wt[t * cout + co] = wts[co * taps + t];
        }
    }
    let mut co0 = 0;
    while co0 + CO_BLOCK <= cout {
        forward_tile::<T, CO_BLOCK>(&xp, cin, k, &wt, cout, co0, h, w, out);
        co0 += CO_BLOCK;
    }
    while co0 < cout {
        forward_tile::<T, 1>(&xp, cin, k, &wt, cout, co0, h, w, out);
        co0 += 1;
    }
}

/// Input gradient as a forward pass of `g` with transposed, flipped kernels.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn backward_input_impl<T: Real>(
    g: &[T],
    cout: usize,
    h: usize,
    w: usize,
    wts: &[T],
    cin: usize,
    k: usize,
    gx: &mut [T],
) {
    let mut flipped = vec![T::ZERO; wts.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    flipped[((ci * cout + co) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                        wts[((co * cin + ci) * k + ky) * k + kx];
                }
            }
        }
    }
    forward_impl(g, cout, h, w, &flipped, cin, k, gx);
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn weight_pair<T: Real, const KK: usize>(
    g: &[T],
    xp: &Padded<T>,
    co: usize,
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
) -> [T; KK] {
    let mut acc = [[T::ZERO; LANES]; KK];
    for y in 0..h {
        let grow = &g[co * h * w + y * w..][..w];
        let mut x0 = 0;
        while x0 + LANES <= w {
            let gv: [T; LANES] = grow[x0..x0 + LANES].try_into().unwrap();
            for ky in 0..k {
                let row = &xp.row(ci, y + ky)[x0..];
                for kx in 0..k {
                    let xv: [T; LANES] = row[kx..kx + LANES].try_into().unwrap();
                    let a = &mut acc[ky * k + kx];
                    for l in 0..LANES {
                        a[l] = gv[l].mul_add(xv[l], a[l]);
                    }
                }
            }
            x0 += LANES;
        }
        for x in x0..w {
            for ky in 0..k {
                let row = xp.row(ci, y + ky);
                for kx in 0..k {
                    let a = &mut acc[ky * k + kx][x - x0];
                    *a = grow[x].mul_add(row[x + kx], *a);
                }
            }
        }
    }
    let mut out = [T::ZERO; KK];
    for (o, lanes) in out.iter_mut().zip(&acc) {
        for &v in lanes {
            *o += v;
        }
    }
    out
}

/// `gw += correlate(g, x)`, each sum split over fixed lanes then reduced in lane order.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn backward_weight_impl<T: Real>(
    g: &[T],
    cout: usize,
    h: usize,
    w: usize,
    x: &[T],
    cin: usize,
    k: usize,
    gw: &mut [T],
) {
    let p = (k - 1) / 2;
    let data = pad_planes(x, cin, h, w, p);
    let xp = Padded {
        data: &data,
        hp: h + 2 * p,
        wp: w + 2 * p,
    };
    let kk = k * k;
    for co in 0..cout {
        for ci in 0..cin {
            let dst = &mut gw[(co * cin + ci) * kk..][..kk];
            match k {
                3 => {
                    let s = weight_pair::<T, 9>(g, &xp, co, ci, h, w, k);
                    dst.iter_mut().zip(s).for_each(|(d, v)| *d += v);
                }
                5 => {
                    let s = weight_pair::<T, 25>(g, &xp, co, ci, h, w, k);
                    dst.iter_mut().zip(s).for_each(|(d, v)| *d += v);
                }
                _ => {
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut lanes = [T::ZERO; LANES];
                            for y in 0..h {
                                let grow = &g[co * h * w + y * w..][..w];
                                let row = xp.row(ci, y + ky);
                                for x in 0..w {
                                    let a = &mut lanes[x % LANES];
                                    *a = grow[x].mul_add(row[x + kx], *a);
                                }
                            }
                            let mut s = T::ZERO;
                            for v in lanes {
                                s += v;
                            }
                            dst[ky * k + kx] += s;
                        }
                    }
                }
            }
        }
    }
}

macro_rules! dispatch {
    ($(#[$m:meta])* $name:ident => $body:ident ($($arg:ident: $ty:ty),*)) => {
        $(#[$m])*
        #[allow(clippy::too_many_arguments)]
        pub(crate) fn $name<T: Real>($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            {
                if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                    #[target_feature(enable = "avx2,fma")]
                    unsafe fn wide<T: Real>($($arg: $ty),*) {
                        $body($($arg),*)
                    }
                    // SAFETY: AVX2 and FMA support were just detected.
                    return unsafe { wide($($arg),*) };
                }
            }
            $body($($arg),*)
        }
    };
}

dispatch!(
    /// `out += conv(x, wts)`; `out` usually arrives holding the bias.
    forward => forward_impl(x: &[T], cin: usize, h: usize, w: usize, wts: &[T], cout: usize, k: usize, out: &mut [T])
);
dispatch!(
    /// `gx += conv_transpose(g, wts)`.
    backward_input => backward_input_impl(g: &[T], cout: usize, h: usize, w: usize, wts: &[T], cin: usize, k: usize, gx: &mut [T])
);
dispatch!(
    /// `gw += correlate(g, x)`.
    backward_weight => backward_weight_impl(g: &[T], cout: usize, h: usize, w: usize, x: &[T], cin: usize, k: usize, gw: &mut [T])
);
