//! Parameter-free Fourier token mixing over sequences and over (shifted)
//! spatial windows of a feature map.

use crate::error::{ensure, shape_err, Result};
use crate::fft::{fft_flops, fft_in_place};
use crate::tensor::Tensor;

/// Real part of the 2-D DFT of `x[T×H]`: a DFT along the sequence axis,
/// then along the hidden axis.
///
/// The two separable transforms commute, so the axis order does not affect
/// the result. The map is linear and self-adjoint under the Frobenius inner
/// product, which the autodiff tape relies on for its backward pass.
pub fn ft_layer(x: &Tensor) -> Result<Tensor> {
    ensure!(x.ndim() == 2, shape_err!("ft_layer expects [T×H], got {:?}", x.shape()));
    let (t, h) = (x.shape()[0], x.shape()[1]);
    Tensor::new(&[t, h], ft_real_2d(x.data(), t, h))
}

pub(crate) fn ft_real_2d(x: &[f64], t: usize, h: usize) -> Vec<f64> {
    let mut re = x.to_vec();
    let mut im = vec![0.0; t * h];
    if t > 1 {
        let mut cr = vec![0.0; t];
        let mut ci = vec![0.0; t];
        for col in 0..h {
            for r in 0..t {
                cr[r] = re[r * h + col];
                ci[r] = 0.0;
            }
            fft_in_place(&mut cr, &mut ci);
            for r in 0..t {
                re[r * h + col] = cr[r];
                im[r * h + col] = ci[r];
            }
        }
    }
    if h > 1 {
        for r in 0..t {
            let span = r * h..(r + 1) * h;
            let (rr, ri) = (&mut re[span.clone()], &mut im[span]);
            fft_in_place(rr, ri);
        }
    }
    re
}

/// `(multiplications, additions)` of one [`ft_layer`] call on `[t×h]`.
pub fn ft_layer_flops(t: usize, h: usize) -> (u64, u64) {
    let (sm, sa) = fft_flops(t);
    let (hm, ha) = fft_flops(h);
    (sm * h as u64 + hm * t as u64, sa * h as u64 + ha * t as u64)
}

/// Window layout over an `H×W×C` map, with zero padding up to a multiple of
/// the window size and an optional cyclic shift.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub map_h: usize,
    pub map_w: usize,
    pub channels: usize,
    pub window_h: usize,
    pub window_w: usize,
    pub shift: (usize, usize),
    padded_h: usize,
    padded_w: usize,
}

impl WindowGrid {
    pub fn new(
        map_h: usize,
        map_w: usize,
        channels: usize,
        window_h: usize,
        window_w: usize,
        shift: (usize, usize),
    ) -> Result<Self> {
        ensure!(
            map_h >= 1 && map_w >= 1 && channels >= 1 && window_h >= 1 && window_w >= 1,
            shape_err!("window grid dims must be >= 1")
        );
        ensure!(
            window_h <= map_h && window_w <= map_w,
            shape_err!("window {window_h}x{window_w} larger than map {map_h}x{map_w}")
        );
        ensure!(
            shift.0 < window_h && shift.1 < window_w,
            shape_err!("shift {shift:?} must be smaller than window {window_h}x{window_w}")
        );
        Ok(Self {
            map_h,
            map_w,
            channels,
            window_h,
            window_w,
            shift,
            padded_h: map_h.div_ceil(window_h) * window_h,
            padded_w: map_w.div_ceil(window_w) * window_w,
        })
    }

    pub fn padded_dims(&self) -> (usize, usize) {
        (self.padded_h, self.padded_w)
    }

    pub fn num_windows(&self) -> usize {
        (self.padded_h / self.window_h) * (self.padded_w / self.window_w)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window_h * self.window_w
    }

    fn check_map(&self, a: &Tensor) -> Result<()> {
        ensure!(
            a.shape() == [self.map_h, self.map_w, self.channels],
            shape_err!(
                "map {:?} incompatible with grid {}x{}x{}",
                a.shape(),
                self.map_h,
                self.map_w,
                self.channels
            )
        );
        Ok(())
    }

    /// For every (window, token) slot, the padded-map position it reads from
    /// after the map has been rolled by `-shift`.
    fn slot_sources(&self) -> Vec<(usize, usize)> {
        let (ph, pw) = (self.padded_h, self.padded_w);
        let (wh, ww) = (self.window_h, self.window_w);
        let mut out = Vec::with_capacity(ph * pw);
        for by in 0..ph / wh {
            for bx in 0..pw / ww {
                for y in 0..wh {
                    for x in 0..ww {
                        let sy = (by * wh + y + self.shift.0) % ph;
                        let sx = (bx * ww + x + self.shift.1) % pw;
                        out.push((sy, sx));
                    }
                }
            }
        }
        out
    }
}

/// Rolls a `[H×W×C]` map: `out[i][j] = a[(i-dy) mod H][(j-dx) mod W]`.
pub fn cyclic_shift(a: &Tensor, dy: isize, dx: isize) -> Result<Tensor> {
    ensure!(a.ndim() == 3, shape_err!("cyclic_shift expects [H×W×C], got {:?}", a.shape()));
    let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut out = vec![0.0; a.numel()];
    for i in 0..h {
        let si = (i as isize - dy).rem_euclid(h as isize) as usize;
        for j in 0..w {
            let sj = (j as isize - dx).rem_euclid(w as isize) as usize;
            out[(i * w + j) * c..(i * w + j + 1) * c]
                .copy_from_slice(&a.data()[(si * w + sj) * c..(si * w + sj + 1) * c]);
        }
    }
    Tensor::new(a.shape(), out)
}

fn pad_map(a: &Tensor, g: &WindowGrid) -> Vec<f64> {
    let (ph, pw, c) = (g.padded_h, g.padded_w, g.channels);
    if (ph, pw) == (g.map_h, g.map_w) {
        return a.data().to_vec();
    }
    let mut out = vec![0.0; ph * pw * c];
    for i in 0..g.map_h {
        let src = &a.data()[i * g.map_w * c..(i + 1) * g.map_w * c];
        out[i * pw * c..i * pw * c + g.map_w * c].copy_from_slice(src);
    }
    out
}

fn crop_map(padded: &[f64], g: &WindowGrid) -> Vec<f64> {
    let (pw, c) = (g.padded_w, g.channels);
    let mut out = Vec::with_capacity(g.map_h * g.map_w * c);
    for i in 0..g.map_h {
        out.extend_from_slice(&padded[i * pw * c..i * pw * c + g.map_w * c]);
    }
    out
}

/// Splits a map into windows, `[H×W×C] -> [N×(H'·W')×C]`. Windows are ordered
/// row-major over the grid and tokens row-major within each window. The
/// grid's shift is not applied here; see [`cyclic_shift`].
pub fn window_partition(a: &Tensor, g: &WindowGrid) -> Result<Tensor> {
    g.check_map(a)?;
    let c = g.channels;
    let (ph, pw) = (g.padded_h, g.padded_w);
    let (wh, ww) = (g.window_h, g.window_w);
    let padded = pad_map(a, g);
    let mut out = Vec::with_capacity(ph * pw * c);
    for by in 0..ph / wh {
        for bx in 0..pw / ww {
            for y in 0..wh {
                let row = by * wh + y;
                let start = (row * pw + bx * ww) * c;
                out.extend_from_slice(&padded[start..start + ww * c]);
            }
        }
    }
    Tensor::new(&[g.num_windows(), wh * ww, c], out)
}

/// Inverse of [`window_partition`], cropping any padding.
pub fn window_reverse(windows: &Tensor, g: &WindowGrid) -> Result<Tensor> {
    let c = g.channels;
    let (ph, pw) = (g.padded_h, g.padded_w);
    let (wh, ww) = (g.window_h, g.window_w);
    ensure!(
        windows.shape() == [g.num_windows(), wh * ww, c],
        shape_err!("windows {:?} incompatible with grid", windows.shape())
    );
    let mut padded = vec![0.0; ph * pw * c];
    let mut src = windows.data().chunks(ww * c);
    for by in 0..ph / wh {
        for bx in 0..pw / ww {
            for y in 0..wh {
                let row = by * wh + y;
                let start = (row * pw + bx * ww) * c;
                padded[start..start + ww * c].copy_from_slice(src.next().expect("window rows"));
            }
        }
    }
    Tensor::new(&[g.map_h, g.map_w, c], crop_map(&padded, g))
}

/// Windowed Fourier transform: roll by `-shift`, partition, apply
/// [`ft_layer`] to every window as an `(H'·W')×C` sequence, reassemble, roll
/// back. Shifted windows wrap around the map edges without masking.
pub fn wft_layer(a: &Tensor, g: &WindowGrid) -> Result<Tensor> {
    g.check_map(a)?;
    Tensor::new(a.shape(), wft_raw(a.data(), g))
}

pub(crate) fn wft_raw(data: &[f64], g: &WindowGrid) -> Vec<f64> {
    let c = g.channels;
    let pw = g.padded_w;
    let padded = if (g.padded_h, g.padded_w) == (g.map_h, g.map_w) {
        data.to_vec()
    } else {
        let t = Tensor::new(&[g.map_h, g.map_w, c], data.to_vec()).expect("checked map");
        pad_map(&t, g)
    };
    let sources = g.slot_sources();
    let tokens = g.tokens_per_window();
    let mut out = vec![0.0; padded.len()];
    let mut buf = vec![0.0; tokens * c];
    for win in sources.chunks(tokens) {
        for (p, &(sy, sx)) in win.iter().enumerate() {
            let s = (sy * pw + sx) * c;
            buf[p * c..(p + 1) * c].copy_from_slice(&padded[s..s + c]);
        }
        let mixed = ft_real_2d(&buf, tokens, c);
        for (p, &(sy, sx)) in win.iter().enumerate() {
            let s = (sy * pw + sx) * c;
            out[s..s + c].copy_from_slice(&mixed[p * c..(p + 1) * c]);
        }
    }
    if (g.padded_h, g.padded_w) == (g.map_h, g.map_w) {
        out
    } else {
        crop_map(&out, g)
    }
}

/// `(multiplications, additions)` of one [`wft_layer`] call.
pub fn wft_layer_flops(g: &WindowGrid) -> (u64, u64) {
    let (m, a) = ft_layer_flops(g.tokens_per_window(), g.channels);
    let n = g.num_windows() as u64;
    (m * n, a * n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft::dft_1d_naive;
    use crate::tensor::ComplexTensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Real part of the 2-D DFT by two passes of the direct sum.
    fn naive_ft(x: &Tensor) -> Tensor {
        let (t, h) = (x.shape()[0], x.shape()[1]);
        let mut re = x.data().to_vec();
        let mut im = vec![0.0; t * h];
        for col in 0..h {
            let v = ComplexTensor::new(
                &[t],
                (0..t).map(|r| re[r * h + col]).collect(),
                (0..t).map(|r| im[r * h + col]).collect(),
            )
            .unwrap();
            let f = dft_1d_naive(&v).unwrap();
            for r in 0..t {
                re[r * h + col] = f.re[r];
                im[r * h + col] = f.im[r];
            }
        }
        for r in 0..t {
            let v = ComplexTensor::new(&[h], re[r * h..(r + 1) * h].to_vec(), im[r * h..(r + 1) * h].to_vec())
                .unwrap();
            let f = dft_1d_naive(&v).unwrap();
            re[r * h..(r + 1) * h].copy_from_slice(&f.re);
        }
        Tensor::new(&[t, h], re).unwrap()
    }

    fn max_rel(a: &Tensor, b: &Tensor) -> f64 {
        a.sub(b).unwrap().max_abs() / b.max_abs().max(1e-300)
    }

    #[test]
    fn ft_small_cases() {
        let one = Tensor::new(&[1, 1], vec![2.5]).unwrap();
        assert_eq!(ft_layer(&one).unwrap(), one);
        let ones = Tensor::full(&[2, 2], 1.0);
        let out = ft_layer(&ones).unwrap();
        let want = [4.0, 0.0, 0.0, 0.0];
        for (a, b) in out.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ft_matches_naive_2d_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (t, h) in [(8, 16), (7, 12), (16, 48)] {
            let x = Tensor::randn(&[t, h], 1.0, &mut rng);
            assert!(max_rel(&ft_layer(&x).unwrap(), &naive_ft(&x)) <= 1e-9);
        }
    }

    #[test]
    fn ft_is_linear_and_self_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[6, 10], 1.0, &mut rng);
        let y = Tensor::randn(&[6, 10], 1.0, &mut rng);
        let lhs = ft_layer(&x.scale(2.0).add(&y).unwrap()).unwrap();
        let rhs = ft_layer(&x).unwrap().scale(2.0).add(&ft_layer(&y).unwrap()).unwrap();
        assert!(max_rel(&lhs, &rhs) <= 1e-9);
        let fx = ft_layer(&x).unwrap();
        let fy = ft_layer(&y).unwrap();
        let a: f64 = fx.data().iter().zip(y.data()).map(|(p, q)| p * q).sum();
        let b: f64 = x.data().iter().zip(fy.data()).map(|(p, q)| p * q).sum();
        assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn partition_counts_and_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = WindowGrid::new(8, 8, 3, 4, 4, (0, 0)).unwrap();
        let a = Tensor::randn(&[8, 8, 3], 1.0, &mut rng);
        let w = window_partition(&a, &g).unwrap();
        assert_eq!(w.shape(), &[4, 16, 3]);
        assert_eq!(window_reverse(&w, &g).unwrap(), a);

        // padded grid
        let gp = WindowGrid::new(6, 7, 2, 4, 4, (1, 2)).unwrap();
        assert_eq!(gp.padded_dims(), (8, 8));
        let b = Tensor::randn(&[6, 7, 2], 1.0, &mut rng);
        assert_eq!(window_reverse(&window_partition(&b, &gp).unwrap(), &gp).unwrap(), b);
    }

    #[test]
    fn partition_is_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = WindowGrid::new(8, 8, 2, 4, 4, (0, 0)).unwrap();
        let a = Tensor::randn(&[8, 8, 2], 1.0, &mut rng);
        let mut b = a.clone();
        b.data_mut()[(1 * 8 + 2) * 2] += 5.0; // pixel (1,2) is in window 0
        let (wa, wb) = (window_partition(&a, &g).unwrap(), window_partition(&b, &g).unwrap());
        let per = 16 * 2;
        assert_ne!(wa.data()[..per], wb.data()[..per]);
        assert_eq!(wa.data()[per..], wb.data()[per..]);
    }

    #[test]
    fn grid_rejects_bad_config() {
        assert!(WindowGrid::new(4, 4, 1, 8, 4, (0, 0)).is_err());
        assert!(WindowGrid::new(8, 8, 1, 4, 4, (4, 0)).is_err());
        let g = WindowGrid::new(8, 8, 1, 4, 4, (0, 0)).unwrap();
        assert!(window_partition(&Tensor::zeros(&[8, 8, 2]), &g).is_err());
    }

    #[test]
    fn shift_semantics() {
        let a = Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(cyclic_shift(&a, 0, 0).unwrap(), a);
        assert_eq!(cyclic_shift(&a, 1, 1).unwrap().data(), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(cyclic_shift(&a, 2, 2).unwrap(), a);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = Tensor::randn(&[5, 7, 3], 1.0, &mut rng);
        let back = cyclic_shift(&cyclic_shift(&b, 2, -3).unwrap(), -2, 3).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn single_window_equals_ft_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = WindowGrid::new(4, 4, 6, 4, 4, (0, 0)).unwrap();
        let a = Tensor::randn(&[4, 4, 6], 1.0, &mut rng);
        let w = wft_layer(&a, &g).unwrap();
        let flat = ft_layer(&a.clone().reshape(&[16, 6]).unwrap()).unwrap();
        assert_eq!(w.data(), flat.data());
    }

    #[test]
    fn wft_windows_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = WindowGrid::new(8, 8, 3, 4, 4, (0, 0)).unwrap();
        let a = Tensor::randn(&[8, 8, 3], 1.0, &mut rng);
        let mut b = a.clone();
        b.data_mut()[0] += 1.0;
        let wa = window_partition(&wft_layer(&a, &g).unwrap(), &g).unwrap();
        let wb = window_partition(&wft_layer(&b, &g).unwrap(), &g).unwrap();
        assert_eq!(wa.data()[48..], wb.data()[48..]);
    }

    #[test]
    fn wft_matches_brute_force_per_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for shift in [(0, 0), (2, 2), (1, 3)] {
            let g = WindowGrid::new(8, 8, 5, 4, 4, shift).unwrap();
            let a = Tensor::randn(&[8, 8, 5], 1.0, &mut rng);
            let got = wft_layer(&a, &g).unwrap();
            let rolled = cyclic_shift(&a, -(shift.0 as isize), -(shift.1 as isize)).unwrap();
            let wins = window_partition(&rolled, &g).unwrap();
            let mut mixed = Vec::new();
            for n in 0..g.num_windows() {
                let win = Tensor::new(&[16, 5], wins.data()[n * 80..(n + 1) * 80].to_vec()).unwrap();
                mixed.extend_from_slice(naive_ft(&win).data());
            }
            let back = window_reverse(&Tensor::new(&[4, 16, 5], mixed).unwrap(), &g).unwrap();
            let want = cyclic_shift(&back, shift.0 as isize, shift.1 as isize).unwrap();
            assert!(max_rel(&got, &want) <= 1e-9, "shift {shift:?}");
        }
    }
}
