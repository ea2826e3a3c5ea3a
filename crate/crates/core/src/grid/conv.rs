//! Spatial kernels on `[C, H, W]` grids.
//!
//! Convolution is cross-correlation with zero "same" padding: for an odd
//! `kh x kw` kernel, `out[o, y, x] = sum_{i,dy,dx} k[o, i, dy, dx] *
//! x[i, y + dy - kh/2, x + dx - kw/2]`, with out-of-range taps reading zero.

use crate::error::{Error, Result};
use crate::grid::Grid;

fn chw(g: &Grid, op: &'static str) -> Result<(usize, usize, usize)> {
    match g.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: format!("{op} needs a [C, H, W] grid"),
        }),
    }
}

fn kernel_dims(k: &Grid) -> Result<(usize, usize, usize, usize)> {
    match k.shape() {
        [o, i, kh, kw] if kh % 2 == 1 && kw % 2 == 1 => Ok((*o, *i, *kh, *kw)),
        s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "kernel must be [Cout, Cin, kh, kw] with odd kh, kw".into(),
        }),
    }
}

/// Range of output columns `x` for which `x + dx - pad` lands inside `[0, w)`.
#[inline]
fn valid_cols(w: usize, dx: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(dx);
    let hi = (w + pad).saturating_sub(dx).min(w);
    (lo, hi)
}

/// `out += correlate(src, taps)` on a single plane.
fn correlate_plane(out: &mut [f64], src: &[f64], h: usize, w: usize, taps: &[f64], kh: usize, kw: usize) {
    let (ph, pw) = (kh / 2, kw / 2);
    for y in 0..h {
        let orow = &mut out[y * w..(y + 1) * w];
        for dy in 0..kh {
            let sy = y + dy;
            if sy < ph || sy - ph >= h {
                continue;
            }
            let srow = &src[(sy - ph) * w..(sy - ph + 1) * w];
            if kw == 3 && w >= 2 {
                row3(orow, srow, &taps[dy * 3..dy * 3 + 3]);
                continue;
            }
            for dx in 0..kw {
                let t = taps[dy * kw + dx];
                if t == 0.0 {
                    continue;
                }
                let (lo, hi) = valid_cols(w, dx, pw);
                if lo >= hi {
                    continue;
                }
                let s = &srow[lo + dx - pw..hi + dx - pw];
                for (o, v) in orow[lo..hi].iter_mut().zip(s) {
                    *o += t * v;
                }
            }
        }
    }
}

/// One kernel row of width 3 in a single sweep over the output row.
#[inline]
fn row3(o: &mut [f64], s: &[f64], t: &[f64]) {
    let w = o.len();
    let (t0, t1, t2) = (t[0], t[1], t[2]);
    o[0] += t1 * s[0] + t2 * s[1];
    for (((ov, a), b), c) in o[1..w - 1].iter_mut().zip(&s[..w - 2]).zip(&s[1..w - 1]).zip(&s[2..]) {
        *ov += t0 * a + t1 * b + t2 * c;
    }
    o[w - 1] += t0 * s[w - 2] + t1 * s[w - 1];
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn conv2d(x: &Grid, k: &Grid) -> Result<Grid> {
    let (cin, h, w) = chw(x, "conv2d")?;
    let (cout, kcin, kh, kw) = kernel_dims(k)?;
    if cin != kcin {
        return Err(Error::shape("conv2d", x.shape(), k.shape()));
    }
    let plane = h * w;
    let taps = kh * kw;
    let mut out = vec![0.0; cout * plane];
    let xd = x.data();
    let kd = k.data();
    for (o, oplane) in out.chunks_exact_mut(plane).enumerate() {
        for i in 0..cin {
            let t = &kd[(o * cin + i) * taps..(o * cin + i + 1) * taps];
            correlate_plane(oplane, &xd[i * plane..(i + 1) * plane], h, w, t, kh, kw);
        }
    }
    Ok(Grid::from_parts(vec![cout, h, w], out))
}

/// Gradient of `conv2d` with respect to its input, given the output gradient.
pub fn conv2d_input_grad(grad_out: &Grid, k: &Grid) -> Result<Grid> {
    let (cout, h, w) = chw(grad_out, "conv2d_input_grad")?;
    let (kout, cin, kh, kw) = kernel_dims(k)?;
    if cout != kout {
        return Err(Error::shape("conv2d_input_grad", grad_out.shape(), k.shape()));
    }
    let plane = h * w;
    let taps = kh * kw;
    let kd = k.data();
    let gd = grad_out.data();
    let mut out = vec![0.0; cin * plane];
    let mut flipped = vec![0.0; taps];
    for (i, iplane) in out.chunks_exact_mut(plane).enumerate() {
        for o in 0..cout {
            let t = &kd[(o * cin + i) * taps..(o * cin + i + 1) * taps];
            for (f, v) in flipped.iter_mut().zip(t.iter().rev()) {
                *f = *v;
            }
            correlate_plane(iplane, &gd[o * plane..(o + 1) * plane], h, w, &flipped, kh, kw);
        }
    }
    Ok(Grid::from_parts(vec![cin, h, w], out))
}

/// Gradient of `conv2d` with respect to its kernel.
pub fn conv2d_kernel_grad(grad_out: &Grid, x: &Grid, kh: usize, kw: usize) -> Result<Grid> {
    let (cout, h, w) = chw(grad_out, "conv2d_kernel_grad")?;
    let (cin, xh, xw) = chw(x, "conv2d_kernel_grad")?;
    if (h, w) != (xh, xw) {
        return Err(Error::shape("conv2d_kernel_grad", grad_out.shape(), x.shape()));
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let plane = h * w;
    let gd = grad_out.data();
    let xd = x.data();
    let mut out = vec![0.0; cout * cin * kh * kw];
    for o in 0..cout {
        let gplane = &gd[o * plane..(o + 1) * plane];
        for i in 0..cin {
            let xplane = &xd[i * plane..(i + 1) * plane];
            let base = (o * cin + i) * kh * kw;
            for dy in 0..kh {
                for dx in 0..kw {
                    let (lo, hi) = valid_cols(w, dx, pw);
                    if lo >= hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for y in 0..h {
                        let sy = y + dy;
                        if sy < ph || sy - ph >= h {
                            continue;
                        }
                        let grow = &gplane[y * w + lo..y * w + hi];
                        let srow = &xplane[(sy - ph) * w + lo + dx - pw..(sy - ph) * w + hi + dx - pw];
                        acc += dot(grow, srow);
                    }
                    out[base + dy * kw + dx] = acc;
                }
            }
        }
    }
    Ok(Grid::from_parts(vec![cout, cin, kh, kw], out))
}

/// 2x2 max pooling with stride 2. Returns the pooled grid and, per output
/// element, the flat input index that won (first maximum in scan order).
pub fn maxpool2(x: &Grid) -> Result<(Grid, Vec<u32>)> {
    let (c, h, w) = chw(x, "maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "maxpool2 needs even spatial extents".into(),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = ch * h * w + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = ch * h * w + (2 * y + dy) * w + 2 * xx + dx;
                    if xd[j] > xd[best] {
                        best = j;
                    }
                }
                out.push(xd[best]);
                idx.push(best as u32);
            }
        }
    }
    Ok((Grid::from_parts(vec![c, oh, ow], out), idx))
}

pub fn maxpool2_backward(grad_out: &Grid, indices: &[u32], input_shape: &[usize]) -> Grid {
    let mut out = vec![0.0; crate::grid::numel(input_shape)];
    for (g, &i) in grad_out.data().iter().zip(indices) {
        out[i as usize] += g;
    }
    Grid::from_parts(input_shape.to_vec(), out)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Grid) -> Result<Grid> {
    let (c, h, w) = chw(x, "upsample2")?;
    let (oh, ow) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let src = &xd[ch * h * w + (y / 2) * w..ch * h * w + (y / 2 + 1) * w];
            let dst = &mut out[ch * oh * ow + y * ow..ch * oh * ow + (y + 1) * ow];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / 2];
            }
        }
    }
    Ok(Grid::from_parts(vec![c, oh, ow], out))
}

/// Adjoint of [`upsample2`]: 2x2 block sums.
pub fn upsample2_backward(grad_out: &Grid) -> Result<Grid> {
    let (c, oh, ow) = chw(grad_out, "upsample2_backward")?;
    let (h, w) = (oh / 2, ow / 2);
    let gd = grad_out.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[ch * h * w + (y / 2) * w + x / 2] += gd[ch * oh * ow + y * ow + x];
            }
        }
    }
    Ok(Grid::from_parts(vec![c, h, w], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Distribution, SeededRng};

    /// Direct summation straight from the definition, with explicit bounds checks.
    fn conv_oracle(x: &Grid, k: &Grid) -> Grid {
        let [cin, h, w] = x.shape() else { unreachable!() };
        let [cout, _, kh, kw] = k.shape() else { unreachable!() };
        let (cin, h, w, cout, kh, kw) = (*cin, *h, *w, *cout, *kh, *kw);
        Grid::from_fn(&[cout, h, w], |idx| {
            let o = idx / (h * w);
            let y = (idx / w) % h;
            let xx = idx % w;
            let mut s = 0.0;
            for i in 0..cin {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let sy = y as isize + dy as isize - (kh / 2) as isize;
                        let sx = xx as isize + dx as isize - (kw / 2) as isize;
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        s += k.get(&[o, i, dy, dx]).unwrap()
                            * x.get(&[i, sy as usize, sx as usize]).unwrap();
                    }
                }
            }
            s
        })
    }

    fn random(shape: &[usize], seed: u64) -> Grid {
        SeededRng::new(seed).sample(Distribution::Normal, shape).unwrap()
    }

    #[test]
    fn one_by_one_identity() {
        let x = random(&[1, 5, 4], 1);
        let k = Grid::ones(&[1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &k).unwrap(), x);
    }

    #[test]
    fn all_ones_kernel_on_constant_image() {
        let c = 0.7;
        let x = Grid::full(&[1, 5, 6], c);
        let out = conv2d(&x, &Grid::ones(&[1, 1, 3, 3])).unwrap();
        let oracle = conv_oracle(&x, &Grid::ones(&[1, 1, 3, 3]));
        for (a, b) in out.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((out.get(&[0, 2, 2]).unwrap() - 9.0 * c).abs() < 1e-12);
        assert!((out.get(&[0, 0, 0]).unwrap() - 4.0 * c).abs() < 1e-12);
        assert!((out.get(&[0, 0, 3]).unwrap() - 6.0 * c).abs() < 1e-12);
    }

    #[test]
    fn delta_input_reproduces_flipped_kernel() {
        // Cross-correlation of a centred delta yields the kernel rotated by 180 degrees.
        let mut d = vec![0.0; 25];
        d[12] = 1.0;
        let x = Grid::new(vec![1, 5, 5], d).unwrap();
        let k = Grid::from_fn(&[1, 1, 3, 3], |i| i as f64 + 1.0);
        let out = conv2d(&x, &k).unwrap();
        for dy in 0..3 {
            for dx in 0..3 {
                let v = out.get(&[0, 1 + dy, 1 + dx]).unwrap();
                assert_eq!(v, k.get(&[0, 0, 2 - dy, 2 - dx]).unwrap());
            }
        }
    }

    #[test]
    fn matches_direct_summation() {
        let x = random(&[3, 6, 7], 2);
        for (kh, kw) in [(3, 3), (1, 1), (5, 3)] {
            let k = random(&[4, 3, kh, kw], 3);
            let a = conv2d(&x, &k).unwrap();
            let b = conv_oracle(&x, &k);
            for (p, q) in a.data().iter().zip(b.data()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_mismatch_and_even_kernel_rejected() {
        let x = Grid::zeros(&[2, 4, 4]);
        assert!(conv2d(&x, &Grid::zeros(&[1, 3, 3, 3])).is_err());
        assert!(conv2d(&x, &Grid::zeros(&[1, 2, 2, 2])).is_err());
    }

    #[test]
    fn linearity() {
        let x = random(&[2, 8, 8], 4);
        let y = random(&[2, 8, 8], 5);
        let k = random(&[3, 2, 3, 3], 6);
        let (a, b) = (0.3, -1.7);
        let lhs = conv2d(&x.scale(a).axpy(b, &y).unwrap(), &k).unwrap();
        let rhs = conv2d(&x, &k).unwrap().scale(a).axpy(b, &conv2d(&y, &k).unwrap()).unwrap();
        for (p, q) in lhs.data().iter().zip(rhs.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoints_match_inner_products() {
        // <conv(x,k), g> = <x, conv_input_grad(g,k)> = <k, conv_kernel_grad(g,x)>
        let x = random(&[3, 6, 8], 7);
        let k = random(&[2, 3, 3, 3], 8);
        let g = random(&[2, 6, 8], 9);
        let lhs = conv2d(&x, &k).unwrap().dot(&g).unwrap();
        let via_input = x.dot(&conv2d_input_grad(&g, &k).unwrap()).unwrap();
        let via_kernel = k.dot(&conv2d_kernel_grad(&g, &x, 3, 3).unwrap()).unwrap();
        assert!((lhs - via_input).abs() < 1e-10);
        assert!((lhs - via_kernel).abs() < 1e-10);
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let x = random(&[2, 4, 6], 10);
        let (p, idx) = maxpool2(&x).unwrap();
        assert_eq!(p.shape(), &[2, 2, 3]);
        let g = random(&[2, 2, 3], 11);
        let back = maxpool2_backward(&g, &idx, x.shape());
        assert!((back.sum() - g.sum()).abs() < 1e-12);
        let u = upsample2(&p).unwrap();
        assert_eq!(u.shape(), &[2, 4, 6]);
        let gu = random(&[2, 4, 6], 12);
        let lhs = u.dot(&gu).unwrap();
        let rhs = p.dot(&upsample2_backward(&gu).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
        assert!(maxpool2(&Grid::zeros(&[1, 3, 4])).is_err());
    }
}
