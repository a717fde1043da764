//! Discrete Fourier transforms: the direct O(T²) sum and an O(T log T) FFT
//! (iterative radix-2 for powers of two, Bluestein's chirp-z for other lengths).

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use crate::error::{ensure, shape_err, Result};
use crate::tensor::ComplexTensor;

/// Forward DFT by direct summation, `out_k = Σ_t x_t e^{-2πi tk/T}`.
pub fn dft_1d_naive(x: &ComplexTensor) -> Result<ComplexTensor> {
    ensure!(x.shape().len() == 1, shape_err!("dft_1d_naive expects 1-D input, got {:?}", x.shape()));
    let n = x.len();
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for k in 0..n {
        let (mut sr, mut si) = (0.0, 0.0);
        for t in 0..n {
            // reduce tk mod n before scaling to keep the angle small
            let ang = -2.0 * PI * ((t * k) % n) as f64 / n as f64;
            let (s, c) = ang.sin_cos();
            sr += x.re[t] * c - x.im[t] * s;
            si += x.re[t] * s + x.im[t] * c;
        }
        re[k] = sr;
        im[k] = si;
    }
    ComplexTensor::new(&[n], re, im)
}

/// Forward FFT of a 1-D complex tensor of any length `T ≥ 1`.
pub fn fft_1d(x: &ComplexTensor) -> Result<ComplexTensor> {
    ensure!(x.shape().len() == 1, shape_err!("fft_1d expects 1-D input, got {:?}", x.shape()));
    let mut re = x.re.clone();
    let mut im = x.im.clone();
    fft_in_place(&mut re, &mut im);
    ComplexTensor::new(&[x.len()], re, im)
}

/// In-place forward FFT over split real/imaginary buffers of equal length.
pub fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    assert_eq!(re.len(), im.len());
    let n = re.len();
    if n <= 1 {
        return;
    }
    let plan = plan_for(n);
    plan.execute(re, im);
}

/// Real-valued FLOP convention for one length-`n` complex transform: `5 n log₂ n`,
/// split into `2 n log₂ n` multiplications and `3 n log₂ n` additions.
pub fn fft_flops(n: usize) -> (u64, u64) {
    if n <= 1 {
        return (0, 0);
    }
    let nl = n as f64 * (n as f64).log2();
    ((2.0 * nl).round() as u64, (3.0 * nl).round() as u64)
}

thread_local! {
    static PLANS: RefCell<HashMap<usize, Rc<Plan>>> = RefCell::new(HashMap::new());
}

fn plan_for(n: usize) -> Rc<Plan> {
    PLANS.with(|cache| {
        cache
            .borrow_mut()
            .entry(n)
            .or_insert_with(|| Rc::new(Plan::new(n)))
            .clone()
    })
}

enum Plan {
    Radix2(Radix2),
    Bluestein(Bluestein),
}

impl Plan {
    fn new(n: usize) -> Self {
        if n.is_power_of_two() {
            Plan::Radix2(Radix2::new(n))
        } else {
            Plan::Bluestein(Bluestein::new(n))
        }
    }

    fn execute(&self, re: &mut [f64], im: &mut [f64]) {
        match self {
            Plan::Radix2(p) => p.forward(re, im),
            Plan::Bluestein(p) => p.forward(re, im),
        }
    }
}

struct Radix2 {
    n: usize,
    tw_re: Vec<f64>,
    tw_im: Vec<f64>,
    rev: Vec<usize>,
}

impl Radix2 {
    fn new(n: usize) -> Self {
        let bits = n.trailing_zeros();
        let rev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        let (tw_re, tw_im) = (0..n / 2)
            .map(|k| {
                let (s, c) = (-2.0 * PI * k as f64 / n as f64).sin_cos();
                (c, s)
            })
            .unzip();
        Self { n, tw_re, tw_im, rev }
    }

    fn forward(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let j = self.rev[i];
            if i < j {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut m = 2;
        while m <= n {
            let half = m / 2;
            let step = n / m;
            for start in (0..n).step_by(m) {
                for j in 0..half {
                    let (wr, wi) = (self.tw_re[j * step], self.tw_im[j * step]);
                    let (a, b) = (start + j, start + j + half);
                    let tr = wr * re[b] - wi * im[b];
                    let ti = wr * im[b] + wi * re[b];
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            m *= 2;
        }
    }

    /// Unnormalized inverse via the conjugation identity.
    fn inverse_unscaled(&self, re: &mut [f64], im: &mut [f64]) {
        im.iter_mut().for_each(|v| *v = -*v);
        self.forward(re, im);
        im.iter_mut().for_each(|v| *v = -*v);
    }
}

/// Chirp-z evaluation of an arbitrary-length DFT as a power-of-two circular convolution.
struct Bluestein {
    n: usize,
    inner: Radix2,
    chirp_re: Vec<f64>,
    chirp_im: Vec<f64>,
    kernel_re: Vec<f64>,
    kernel_im: Vec<f64>,
}

impl Bluestein {
    fn new(n: usize) -> Self {
        let m = (2 * n - 1).next_power_of_two();
        let inner = Radix2::new(m);
        // w_k = e^{-iπ k²/n}; k² is reduced mod 2n for accuracy.
        let (chirp_re, chirp_im): (Vec<f64>, Vec<f64>) = (0..n)
            .map(|k| {
                let q = (k * k) % (2 * n);
                let (s, c) = (-PI * q as f64 / n as f64).sin_cos();
                (c, s)
            })
            .unzip();
        let mut kernel_re = vec![0.0; m];
        let mut kernel_im = vec![0.0; m];
        for k in 0..n {
            kernel_re[k] = chirp_re[k];
            kernel_im[k] = -chirp_im[k];
            if k > 0 {
                kernel_re[m - k] = chirp_re[k];
                kernel_im[m - k] = -chirp_im[k];
            }
        }
        inner.forward(&mut kernel_re, &mut kernel_im);
        Self {
            n,
            inner,
            chirp_re,
            chirp_im,
            kernel_re,
            kernel_im,
        }
    }

    fn forward(&self, re: &mut [f64], im: &mut [f64]) {
        let (n, m) = (self.n, self.inner.n);
        let mut ar = vec![0.0; m];
        let mut ai = vec![0.0; m];
        for k in 0..n {
            let (cr, ci) = (self.chirp_re[k], self.chirp_im[k]);
            ar[k] = re[k] * cr - im[k] * ci;
            ai[k] = re[k] * ci + im[k] * cr;
        }
        self.inner.forward(&mut ar, &mut ai);
        for k in 0..m {
            let (xr, xi) = (ar[k], ai[k]);
            let (kr, ki) = (self.kernel_re[k], self.kernel_im[k]);
            ar[k] = xr * kr - xi * ki;
            ai[k] = xr * ki + xi * kr;
        }
        self.inner.inverse_unscaled(&mut ar, &mut ai);
        let scale = 1.0 / m as f64;
        for k in 0..n {
            let (xr, xi) = (ar[k] * scale, ai[k] * scale);
            let (cr, ci) = (self.chirp_re[k], self.chirp_im[k]);
            re[k] = xr * cr - xi * ci;
            im[k] = xr * ci + xi * cr;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: &[f64], im: &[f64]) -> ComplexTensor {
        ComplexTensor::new(&[re.len()], re.to_vec(), im.to_vec()).unwrap()
    }

    fn random(n: usize, rng: &mut impl Rng) -> ComplexTensor {
        let re = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let im = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        ComplexTensor::new(&[n], re, im).unwrap()
    }

    fn rel_err(a: &ComplexTensor, b: &ComplexTensor) -> f64 {
        let mut num = 0.0f64;
        for i in 0..a.len() {
            num = num.max((a.re[i] - b.re[i]).hypot(a.im[i] - b.im[i]));
        }
        num / b.norm_sqr().sqrt().max(1e-300)
    }

    #[test]
    fn naive_dft_small_cases() {
        let out = dft_1d_naive(&c(&[1.0; 4], &[0.0; 4])).unwrap();
        for (v, w) in out.re.iter().zip([4.0, 0.0, 0.0, 0.0]) {
            assert!((v - w).abs() < 1e-15);
        }
        let imp = dft_1d_naive(&c(&[1.0, 0.0, 0.0, 0.0], &[0.0; 4])).unwrap();
        assert_eq!(imp.re, vec![1.0; 4]);
        assert_eq!(imp.im, vec![0.0; 4]);
        let shifted = dft_1d_naive(&c(&[0.0, 1.0, 0.0, 0.0], &[0.0; 4])).unwrap();
        let want = [(1.0, 0.0), (0.0, -1.0), (-1.0, 0.0), (0.0, 1.0)];
        for (k, (r, i)) in want.iter().enumerate() {
            assert!((shifted.re[k] - r).abs() < 1e-15 && (shifted.im[k] - i).abs() < 1e-15);
        }
    }

    #[test]
    fn fft_impulse_and_sizes() {
        let mut re = vec![0.0; 8];
        re[0] = 1.0;
        let out = fft_1d(&c(&re, &[0.0; 8])).unwrap();
        assert!(out.re.iter().all(|v| (v - 1.0).abs() < 1e-15));
        assert!(out.im.iter().all(|v| v.abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [64, 12] {
            let x = random(n, &mut rng);
            assert!(rel_err(&fft_1d(&x).unwrap(), &dft_1d_naive(&x).unwrap()) <= 1e-9);
        }
    }

    #[test]
    fn fft_matches_naive_for_every_length_up_to_64() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..=64 {
            let x = random(n, &mut rng);
            let err = rel_err(&fft_1d(&x).unwrap(), &dft_1d_naive(&x).unwrap());
            assert!(err <= 1e-9, "T={n}: {err}");
        }
    }

    #[test]
    fn flop_convention() {
        assert_eq!(fft_flops(1), (0, 0));
        assert_eq!(fft_flops(8), (48, 72));
    }

    proptest! {
        #[test]
        fn parseval_and_linearity(n in 1usize..=80, seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(n, &mut rng);
            let y = random(n, &mut rng);
            let fx = fft_1d(&x).unwrap();
            let fy = fft_1d(&y).unwrap();
            let energy = x.norm_sqr();
            prop_assert!((energy - fx.norm_sqr() / n as f64).abs() <= 1e-9 * energy.max(1e-300));

            let comb = ComplexTensor::new(
                &[n],
                x.re.iter().zip(&y.re).map(|(a, b)| alpha * a + beta * b).collect(),
                x.im.iter().zip(&y.im).map(|(a, b)| alpha * a + beta * b).collect(),
            ).unwrap();
            let fc = fft_1d(&comb).unwrap();
            let scale = fx.norm_sqr().sqrt() + fy.norm_sqr().sqrt();
            for k in 0..n {
                let er = alpha * fx.re[k] + beta * fy.re[k] - fc.re[k];
                let ei = alpha * fx.im[k] + beta * fy.im[k] - fc.im[k];
                prop_assert!(er.hypot(ei) <= 1e-9 * scale.max(1.0));
            }
        }
    }
}
