//! Seeded synthetic defect textures in the MVTec directory layout.
//!
//! Flawless images are a sum of four sinusoid gratings (frequencies and
//! orientations fixed per seed, phases drawn per image) plus white noise.
//! Defective images take a freshly drawn flawless base and add either a dark
//! anti-aliased scratch or a bright Gaussian blob.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{load_dataset, pnm, DatasetLayout};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::tensor::Tensor;

pub const CATEGORY: &str = "synthetic";
pub const IMAGE_SIZE: usize = 64;
const N_GRATINGS: usize = 4;
const GRATING_AMPLITUDE: f64 = 0.02;
const BASE_LEVEL: f64 = 0.5;
const FREQ_RANGE: (f64, f64) = (0.04, 0.12);
const NOISE_SIGMA: f64 = 0.05;
const SCRATCH_GAIN: f64 = 0.3;
const BLOB_AMPLITUDE: f64 = 0.4;
/// A defect must move at least this many pixels by at least `MIN_DIFF`.
const MIN_CHANGED: usize = 10;
const MIN_DIFF: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    TrainGood,
    TestGood,
    TestDefect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DefectKind {
    Scratch,
    Blob,
}

impl DefectKind {
    /// Even defect indices are scratches, odd ones blobs.
    pub fn for_index(index: usize) -> Self {
        if index % 2 == 0 {
            DefectKind::Scratch
        } else {
            DefectKind::Blob
        }
    }

    pub fn folder(self) -> &'static str {
        match self {
            DefectKind::Scratch => "scratch",
            DefectKind::Blob => "blob",
        }
    }
}

/// splitmix64 over the seed, a stream tag and an index.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(split: Split) -> u64 {
    match split {
        Split::TrainGood => 1,
        Split::TestGood => 2,
        Split::TestDefect => 3,
    }
}

const DEFECT_STREAM: u64 = 4;
const TEXTURE_STREAM: u64 = 0;

#[derive(Clone, Copy, Debug)]
struct Grating {
    freq: f64,
    cos: f64,
    sin: f64,
}

fn gratings(seed: u64) -> [Grating; N_GRATINGS] {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TEXTURE_STREAM, 0));
    std::array::from_fn(|_| {
        let freq = rng.gen_range(FREQ_RANGE.0..FREQ_RANGE.1);
        let theta: f64 = rng.gen_range(0.0..PI);
        Grating {
            freq,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    })
}

fn quantize(v: f64) -> f32 {
    pnm::from_byte(pnm::to_byte(v as f32))
}

/// The flawless image at `(split, index)`; values are exact multiples of 1/255.
pub fn flawless_image(seed: u64, split: Split, index: usize) -> Tensor {
    let g = gratings(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream(split), index as u64));
    let phases: [f64; N_GRATINGS] = std::array::from_fn(|_| rng.gen_range(0.0..2.0 * PI));
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let n = IMAGE_SIZE;
    let mut texture = vec![BASE_LEVEL; n * n];
    for y in 0..n {
        for x in 0..n {
            for (gr, ph) in g.iter().zip(phases) {
                let t = gr.cos * x as f64 + gr.sin * y as f64;
                texture[y * n + x] += GRATING_AMPLITUDE * (2.0 * PI * gr.freq * t + ph).sin();
            }
        }
    }
    let mut data = Vec::with_capacity(3 * n * n);
    for _ in 0..3 {
        for &t in &texture {
            data.push(quantize(t + noise.sample(&mut rng)));
        }
    }
    Tensor::new(vec![3, n, n], data).expect("static shape")
}

#[derive(Clone, Debug)]
pub struct DefectSample {
    pub kind: DefectKind,
    pub base: Tensor,
    pub image: Tensor,
    /// `[H * W]`, true where any channel differs from the base.
    pub mask: Vec<bool>,
}

impl DefectSample {
    pub fn mask_area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn dist_to_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((px - a.0) * dx + (py - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Per-pixel factor (scratch) or addend (blob) over one plane.
fn defect_field(kind: DefectKind, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = IMAGE_SIZE as f64;
    let mut field = vec![0.0; IMAGE_SIZE * IMAGE_SIZE];
    match kind {
        DefectKind::Scratch => {
            let len = rng.gen_range(15.0..=40.0);
            let width = rng.gen_range(1.0..=2.0);
            let theta: f64 = rng.gen_range(0.0..PI);
            let (hx, hy) = (0.5 * len * theta.cos(), 0.5 * len * theta.sin());
            let margin = 2.0;
            let cx = rng.gen_range(margin + hx.abs()..n - 1.0 - margin - hx.abs());
            let cy = rng.gen_range(margin + hy.abs()..n - 1.0 - margin - hy.abs());
            let (a, b) = ((cx - hx, cy - hy), (cx + hx, cy + hy));
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    let d = dist_to_segment(x as f64, y as f64, a, b);
                    let cover = (0.5 * width + 0.5 - d).clamp(0.0, 1.0);
                    field[y * IMAGE_SIZE + x] = 1.0 - (1.0 - SCRATCH_GAIN) * cover;
                }
            }
        }
        DefectKind::Blob => {
            let sigma: f64 = rng.gen_range(3.0..=6.0);
            let reach = 2.5 * sigma;
            // Keep the bump's core inside the image.
            let inset = sigma.min(n / 2.0 - 1.0);
            let cx = rng.gen_range(inset..n - 1.0 - inset);
            let cy = rng.gen_range(inset..n - 1.0 - inset);
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    if r2 <= reach * reach {
                        field[y * IMAGE_SIZE + x] = BLOB_AMPLITUDE * (-r2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
        }
    }
    field
}

/// Defective image `index` with its base and change mask. Defect geometry is
/// redrawn until at least 10 pixels change by 0.1 or more.
pub fn defect_sample(seed: u64, index: usize) -> DefectSample {
    let kind = DefectKind::for_index(index);
    let base = flawless_image(seed, Split::TestDefect, index);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, DEFECT_STREAM, index as u64));
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut attempt = 0;
    loop {
        let field = defect_field(kind, &mut rng);
        let data: Vec<f32> = base
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let f = field[i % plane];
                match kind {
                    DefectKind::Scratch => quantize(v as f64 * f),
                    DefectKind::Blob => quantize(v as f64 + f),
                }
            })
            .collect();
        let mut mask = vec![false; plane];
        let mut strong = vec![false; plane];
        for (i, (&a, &b)) in data.iter().zip(base.data()).enumerate() {
            mask[i % plane] |= a != b;
            strong[i % plane] |= (a - b).abs() >= MIN_DIFF;
        }
        attempt += 1;
        if strong.iter().filter(|&&s| s).count() >= MIN_CHANGED || attempt >= 64 {
            let image = Tensor::new(base.shape().to_vec(), data).expect("same shape");
            return DefectSample { kind, base, image, mask };
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthOptions {
    pub n_train: usize,
    pub n_test_good: usize,
    pub n_test_defect: usize,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            n_train: 200,
            n_test_good: 50,
            n_test_defect: 50,
            seed: 7,
        }
    }
}

fn file_name(index: usize, total: usize) -> String {
    let width = total.saturating_sub(1).to_string().len().max(3);
    format!("{index:0width$}.ppm")
}

fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    fsutil::write_atomic(path, &pnm::encode_ppm(image)?)
}

/// Writes `{out_root}/synthetic/{train/good, test/good, test/scratch,
/// test/blob}` and returns the loaded layout.
pub fn synth_dataset(
    out_root: &Path,
    n_train: usize,
    n_test_good: usize,
    n_test_defect: usize,
    seed: u64,
) -> Result<DatasetLayout> {
    if n_train == 0 || n_test_good == 0 || n_test_defect == 0 {
        return Err(Error::Input(format!(
            "counts must be >= 1, got train {n_train}, test good {n_test_good}, test defect {n_test_defect}"
        )));
    }
    let base = out_root.join(CATEGORY);
    let train = base.join("train").join("good");
    let test = base.join("test");
    fsutil::create_dir_all(&train)?;
    fsutil::create_dir_all(&test.join("good"))?;
    for kind in [DefectKind::Scratch, DefectKind::Blob] {
        if n_test_defect > 1 || kind == DefectKind::Scratch {
            fsutil::create_dir_all(&test.join(kind.folder()))?;
        }
    }
    for i in 0..n_train {
        write_ppm(&train.join(file_name(i, n_train)), &flawless_image(seed, Split::TrainGood, i))?;
    }
    for i in 0..n_test_good {
        let path = test.join("good").join(file_name(i, n_test_good));
        write_ppm(&path, &flawless_image(seed, Split::TestGood, i))?;
    }
    for i in 0..n_test_defect {
        let d = defect_sample(seed, i);
        write_ppm(&test.join(d.kind.folder()).join(file_name(i, n_test_defect)), &d.image)?;
    }
    load_dataset(out_root, CATEGORY)
}
