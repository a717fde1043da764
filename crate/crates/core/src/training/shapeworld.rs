//! Synthetic captioning data: one or two flat-colored shapes on a black
//! 32×32 canvas, captioned from a fixed template grammar.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_LEN: usize = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;
pub const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const STD: [f64; 3] = [0.229, 0.224, 0.225];

pub const COLORS: [(&str, [f64; 3]); 6] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("cyan", [0.0, 1.0, 1.0]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

pub const SHAPES: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether pixel `(y, x)` lies inside the shape drawn in the `s×s` box at `(y0, x0)`.
    fn covers(self, y: usize, x: usize, y0: usize, x0: usize, s: usize) -> bool {
        if y < y0 || x < x0 || y >= y0 + s || x >= x0 + s {
            return false;
        }
        let (dy, dx) = (y - y0, x - x0);
        let c = (s as f64 - 1.0) / 2.0;
        match self {
            Shape::Square => true,
            Shape::Circle => {
                let (fy, fx) = (dy as f64 - c, dx as f64 - c);
                fy * fy + fx * fx <= (c + 0.5) * (c + 0.5)
            }
            // apex at the top centre, base along the bottom row
            Shape::Triangle => {
                let half = (dy as f64 + 1.0) / s as f64 * (c + 0.5);
                (dx as f64 - c).abs() <= half
            }
        }
    }
}

/// Every word the caption templates can produce.
pub fn template_words() -> Vec<&'static str> {
    let mut w = vec!["a", "left", "of"];
    w.extend(COLORS.iter().map(|c| c.0));
    w.extend(SHAPES.iter().map(|s| s.name()));
    w
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeWorldSample {
    /// Channel-normalized `3×32×32` image, values representable in f32.
    pub image: Tensor,
    pub caption: String,
    /// Seed the sample was rendered from.
    pub seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sample `index` in a dataset generated with `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

/// Renders the scene determined by `seed`.
pub fn render_sample(seed: u64) -> ShapeWorldSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(1..=2usize);
    let first = rng.random_range(0..COLORS.len());
    let mut colors = vec![first];
    if count == 2 {
        let mut c = rng.random_range(0..COLORS.len() - 1);
        if c >= first {
            c += 1;
        }
        colors.push(c);
    }
    let half = IMAGE_SIZE / 2;
    let mut objects = Vec::with_capacity(count);
    for (slot, &color) in colors.iter().enumerate() {
        let shape = SHAPES[rng.random_range(0..SHAPES.len())];
        let s = rng.random_range(8..=12usize);
        let x0 = slot * half + rng.random_range(0..=half - s);
        let y0 = rng.random_range(0..=IMAGE_SIZE - s);
        objects.push((shape, color, y0, x0, s));
    }
    let mut data = vec![0.0; IMAGE_LEN];
    for c in 0..CHANNELS {
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let mut v = 0.0;
                for &(shape, color, y0, x0, s) in &objects {
                    if shape.covers(y, x, y0, x0, s) {
                        v = COLORS[color].1[c];
                    }
                }
                let norm = (v - MEAN[c]) / STD[c];
                data[(c * IMAGE_SIZE + y) * IMAGE_SIZE + x] = norm as f32 as f64;
            }
        }
    }
    let phrase = |&(shape, color, ..): &(Shape, usize, usize, usize, usize)| {
        format!("a {} {}", COLORS[color].0, shape.name())
    };
    let caption = match objects.as_slice() {
        [one] => phrase(one),
        [l, r] => format!("{} left of {}", phrase(l), phrase(r)),
        _ => unreachable!("one or two objects"),
    };
    ShapeWorldSample {
        image: Tensor::new(&[CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data).expect("image shape"),
        caption,
        seed,
    }
}

/// `n` samples, deterministic under `seed`.
pub fn gen_shape_world(n: usize, seed: u64) -> Result<Vec<ShapeWorldSample>> {
    ensure!(n >= 1, Error::Config("dataset size must be at least 1".into()));
    Ok(par::map_range(n, |i| render_sample(sample_seed(seed, i as u64))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub seed: u64,
    pub image_shape: [usize; 3],
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.bin";

/// Writes `manifest.json` and `samples.bin` into `dir`. Each record is the
/// sample seed (u64), the image as f32, the caption byte length (u32) and
/// the UTF-8 caption, all little-endian.
pub fn save_dataset(dir: &Path, seed: u64, samples: &[ShapeWorldSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        count: samples.len(),
        seed,
        image_shape: [CHANNELS, IMAGE_SIZE, IMAGE_SIZE],
        mean: MEAN,
        std: STD,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    let mut buf = Vec::with_capacity(samples.len() * (IMAGE_LEN * 4 + 64));
    for s in samples {
        ensure!(
            s.image.numel() == IMAGE_LEN,
            Error::Shape(format!("sample image has {} values", s.image.numel()))
        );
        buf.write_all(&s.seed.to_le_bytes())?;
        for &v in s.image.data() {
            buf.write_all(&(v as f32).to_le_bytes())?;
        }
        buf.write_all(&(s.caption.len() as u32).to_le_bytes())?;
        buf.write_all(s.caption.as_bytes())?;
    }
    fs::write(dir.join(SAMPLES_FILE), buf)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<ShapeWorldSample>)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let bytes = fs::read(dir.join(SAMPLES_FILE))?;
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        ensure!(
            pos + n <= bytes.len(),
            Error::Format("truncated samples file".into())
        );
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    let mut samples = Vec::with_capacity(manifest.count);
    for _ in 0..manifest.count {
        let seed = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let data = take(4 * IMAGE_LEN)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let caption = String::from_utf8(take(len)?.to_vec())
            .map_err(|e| Error::Format(format!("caption is not UTF-8: {e}")))?;
        samples.push(ShapeWorldSample {
            image: Tensor::new(&[CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data)?,
            caption,
            seed,
        });
    }
    ensure!(
        take(1).is_err(),
        Error::Format("trailing bytes in samples file".into())
    );
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioning::{Vocabulary, UNK};

    #[test]
    fn deterministic_and_sized() {
        let a = gen_shape_world(5, 9).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, gen_shape_world(5, 9).unwrap());
        assert_ne!(a, gen_shape_world(5, 10).unwrap());
        assert_eq!(a[3], render_sample(sample_seed(9, 3)));
        assert!(gen_shape_world(0, 1).is_err());
    }

    #[test]
    fn captions_follow_grammar() {
        let v = Vocabulary::build(&template_words(), 1).unwrap();
        for s in gen_shape_world(200, 4).unwrap() {
            assert!(v.tokenize(&s.caption).iter().all(|&t| t != UNK));
            let words: Vec<&str> = s.caption.split(' ').collect();
            assert!(words.len() == 3 || words.len() == 8, "{}", s.caption);
            if words.len() == 8 {
                assert_eq!(&words[3..5], &["left", "of"]);
                assert_ne!(words[1], words[6]);
            }
        }
    }

    #[test]
    fn pixels_are_normalized_colors() {
        let s = render_sample(77);
        for c in 0..3 {
            let lo = (0.0 - MEAN[c]) / STD[c];
            let hi = (1.0 - MEAN[c]) / STD[c];
            for &v in &s.image.data()[c * 1024..(c + 1) * 1024] {
                let ok = (v - lo as f32 as f64).abs() < 1e-12 || (v - hi as f32 as f64).abs() < 1e-12;
                assert!(ok, "{v}");
            }
        }
        // the scene is not blank
        assert!(s.image.data().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn shapes_fill_expected_area() {
        let count = |sh: Shape| {
            (0..12)
                .flat_map(|y| (0..12).map(move |x| (y, x)))
                .filter(|&(y, x)| sh.covers(y, x, 0, 0, 12))
                .count()
        };
        assert_eq!(count(Shape::Square), 144);
        let circ = count(Shape::Circle) as f64;
        assert!((circ - std::f64::consts::PI * 36.0).abs() < 15.0);
        let tri = count(Shape::Triangle) as f64;
        assert!((tri - 72.0).abs() < 15.0);
    }

    #[test]
    fn disk_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_shape_world(7, 3).unwrap();
        save_dataset(dir.path(), 3, &data).unwrap();
        let (m, back) = load_dataset(dir.path()).unwrap();
        assert_eq!(m.count, 7);
        assert_eq!(m.seed, 3);
        assert_eq!(back, data);
        let bin = dir.path().join(SAMPLES_FILE);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 1]).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}
