//! Procedural image sources.
//!
//! `REAL` images are smooth band-limited Gaussian random fields with a
//! faint fine-grained texture. Every fake source runs the same pipeline and
//! then stamps one characteristic artifact family on top, with its own
//! per-image parameter ranges.

use std::fmt;
use std::str::FromStr;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// DCT block size used by `G-D`.
pub const BLOCK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GeneratorTag {
    #[serde(rename = "REAL")]
    Real,
    /// Periodic grid overlay; the only fake source seen in training.
    #[serde(rename = "G-TRAIN")]
    GTrain,
    /// Intensity quantization banding.
    #[serde(rename = "G-A")]
    GA,
    /// Spectral notch filtering.
    #[serde(rename = "G-B")]
    GB,
    /// Checkerboard upsampling artifact.
    #[serde(rename = "G-C")]
    GC,
    /// Blockwise DCT coefficient suppression.
    #[serde(rename = "G-D")]
    GD,
    /// Additive fixed-pattern noise.
    #[serde(rename = "G-E")]
    GE,
    /// Ringing from a sharpened blur.
    #[serde(rename = "G-F")]
    GF,
}

impl GeneratorTag {
    pub const ALL: [GeneratorTag; 8] = [
        Self::Real,
        Self::GTrain,
        Self::GA,
        Self::GB,
        Self::GC,
        Self::GD,
        Self::GE,
        Self::GF,
    ];

    /// The seven fake test subsets, in column order.
    pub const TEST_FAKES: [GeneratorTag; 7] =
        [Self::GTrain, Self::GA, Self::GB, Self::GC, Self::GD, Self::GE, Self::GF];

    pub const HELD_OUT: [GeneratorTag; 6] = [Self::GA, Self::GB, Self::GC, Self::GD, Self::GE, Self::GF];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Real => "REAL",
            Self::GTrain => "G-TRAIN",
            Self::GA => "G-A",
            Self::GB => "G-B",
            Self::GC => "G-C",
            Self::GD => "G-D",
            Self::GE => "G-E",
            Self::GF => "G-F",
        }
    }

    pub fn is_fake(self) -> bool {
        self != Self::Real
    }

    pub(crate) fn dir_name(self) -> String {
        self.as_str().to_ascii_lowercase()
    }
}

impl fmt::Display for GeneratorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GeneratorTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown generator `{s}`")))
    }
}

/// Channel-first working image.
struct Canvas {
    size: usize,
    px: Vec<f32>,
}

impl Canvas {
    fn plane(&self, c: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.px[c * n..(c + 1) * n]
    }

    fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.size * self.size;
        &mut self.px[c * n..(c + 1) * n]
    }

    fn map_planes(&mut self, mut f: impl FnMut(&mut [f32])) {
        for c in 0..3 {
            f(self.plane_mut(c));
        }
    }

    fn into_tensor(self) -> Tensor {
        let px = self.px.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Tensor::new(&[3, self.size, self.size], px).expect("3·d·d pixels")
    }
}

fn signed_freq(k: usize, n: usize) -> f32 {
    if k <= n / 2 {
        k as f32
    } else {
        k as f32 - n as f32
    }
}

fn radius(kx: usize, ky: usize, n: usize) -> f32 {
    signed_freq(kx, n).hypot(signed_freq(ky, n))
}

/// In-place 2-D FFT of a `n × n` row-major grid.
fn fft2(data: &mut [Complex<f32>], n: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    for row in data.chunks_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::default(); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = data[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            data[y * n + x] = col[y];
        }
    }
}

fn spectrum(plane: &[f32], n: usize) -> Vec<Complex<f32>> {
    let mut s: Vec<Complex<f32>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2(&mut s, n, false);
    s
}

/// Zero-mean, unit-variance Gaussian field whose spectrum is confined to
/// radial frequencies `1 ≤ r ≤ max_r` with amplitude `1/r`.
fn gaussian_field(n: usize, max_r: f32, rng: &mut Rng) -> Vec<f32> {
    let mut s = vec![Complex::default(); n * n];
    for ky in 0..n {
        for kx in 0..n {
            let r = radius(kx, ky, n);
            if (1.0..=max_r).contains(&r) {
                s[ky * n + kx] = Complex::new(rng.normal(), rng.normal()) / r;
            }
        }
    }
    fft2(&mut s, n, true);
    normalize(s.into_iter().map(|c| c.re).collect())
}

fn normalize(mut v: Vec<f32>) -> Vec<f32> {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let var = v.iter().map(|&x| (f64::from(x) - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    for x in &mut v {
        *x = ((f64::from(*x) - mean) / sd) as f32;
    }
    v
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i - 1;
    }
    if i >= n {
        i = 2 * n - i - 1;
    }
    i.clamp(0, n - 1) as usize
}

/// Separable Gaussian blur with reflected borders.
fn blur(plane: &[f32], n: usize, sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / total).collect();
    let mut tmp = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            tmp[y * n + x] = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * plane[y * n + reflect(x as isize + j as isize - radius, n)])
                .sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * tmp[reflect(y as isize + j as isize - radius, n) * n + x])
                .sum();
        }
    }
    out
}

fn real_canvas(n: usize, rng: &mut Rng) -> Canvas {
    let shared = gaussian_field(n, 6.0, rng);
    let mut px = Vec::with_capacity(3 * n * n);
    for _ in 0..3 {
        let base = rng.uniform_range(0.35, 0.65);
        let own = gaussian_field(n, 6.0, rng);
        let white: Vec<f32> = (0..n * n).map(|_| rng.normal()).collect();
        let texture = normalize(blur(&white, n, 1.2));
        for i in 0..n * n {
            px.push(base + 0.11 * shared[i] + 0.05 * own[i] + 0.012 * texture[i]);
        }
    }
    Canvas { size: n, px }
}

fn grid_overlay(c: &mut Canvas, rng: &mut Rng) {
    let n = c.size;
    let (px, py) = (rng.below(4), rng.below(4));
    let amp = rng.uniform_range(0.05, 0.09);
    c.map_planes(|p| {
        for y in 0..n {
            for x in 0..n {
                if x % 4 == px || y % 4 == py {
                    p[y * n + x] += amp;
                }
            }
        }
    });
}

fn quantize(c: &mut Canvas, rng: &mut Rng) {
    let levels = (6 + rng.below(3)) as f32;
    for v in &mut c.px {
        *v = (v.clamp(0.0, 1.0) * (levels - 1.0)).round() / (levels - 1.0);
    }
}

fn spectral_notch(c: &mut Canvas, rng: &mut Rng) {
    let n = c.size;
    let r0 = rng.uniform_range(1.5, 2.5);
    let r1 = r0 + 1.5;
    c.map_planes(|p| {
        let mut s = spectrum(p, n);
        for ky in 0..n {
            for kx in 0..n {
                if (r0..=r1).contains(&radius(kx, ky, n)) {
                    s[ky * n + kx] = Complex::default();
                }
            }
        }
        fft2(&mut s, n, true);
        for (v, z) in p.iter_mut().zip(&s) {
            *v = z.re / (n * n) as f32;
        }
    });
}

fn checkerboard_upsample(c: &mut Canvas, rng: &mut Rng) {
    let n = c.size;
    let amp = rng.uniform_range(0.04, 0.08);
    c.map_planes(|p| {
        let src = p.to_vec();
        for y in 0..n {
            for x in 0..n {
                let (y0, x0) = (y & !1, x & !1);
                let avg = (src[y0 * n + x0]
                    + src[y0 * n + (x0 + 1).min(n - 1)]
                    + src[(y0 + 1).min(n - 1) * n + x0]
                    + src[(y0 + 1).min(n - 1) * n + (x0 + 1).min(n - 1)])
                    / 4.0;
                let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                p[y * n + x] = avg * (1.0 + amp * sign);
            }
        }
    });
}

fn dct_matrix() -> [[f32; BLOCK]; BLOCK] {
    let mut m = [[0.0; BLOCK]; BLOCK];
    for (u, row) in m.iter_mut().enumerate() {
        let a = if u == 0 {
            (1.0 / BLOCK as f32).sqrt()
        } else {
            (2.0 / BLOCK as f32).sqrt()
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * (std::f32::consts::PI * (2 * x + 1) as f32 * u as f32 / (2 * BLOCK) as f32).cos();
        }
    }
    m
}

fn dct_suppress(c: &mut Canvas, rng: &mut Rng) {
    let n = c.size;
    let keep = 1 + rng.below(2);
    let m = dct_matrix();
    c.map_planes(|p| {
        for by in (0..n).step_by(BLOCK) {
            for bx in (0..n).step_by(BLOCK) {
                let mut blk = [[0.0f32; BLOCK]; BLOCK];
                for y in 0..BLOCK {
                    for x in 0..BLOCK {
                        blk[y][x] = p[(by + y) * n + bx + x];
                    }
                }
                // coeffs = M · blk · Mᵀ, keeping u + v ≤ keep.
                let mut coef = [[0.0f32; BLOCK]; BLOCK];
                for u in 0..BLOCK {
                    for v in 0..BLOCK {
                        if u + v > keep {
                            continue;
                        }
                        let mut s = 0.0;
                        for y in 0..BLOCK {
                            for x in 0..BLOCK {
                                s += m[u][y] * blk[y][x] * m[v][x];
                            }
                        }
                        coef[u][v] = s;
                    }
                }
                for y in 0..BLOCK {
                    for x in 0..BLOCK {
                        let mut s = 0.0;
                        for u in 0..BLOCK {
                            for v in 0..BLOCK {
                                s += m[u][y] * coef[u][v] * m[v][x];
                            }
                        }
                        p[(by + y) * n + bx + x] = s;
                    }
                }
            }
        }
    });
}

/// The per-pixel noise pattern shared by every `G-E` image of a corpus.
fn fixed_pattern(n: usize, corpus_seed: u64) -> Vec<f32> {
    let mut rng = Rng::stream(corpus_seed, "fixed-pattern/G-E");
    (0..3 * n * n).map(|_| rng.normal()).collect()
}

fn sharpened_blur(c: &mut Canvas, rng: &mut Rng) {
    let n = c.size;
    let sigma = rng.uniform_range(0.8, 1.2);
    let amount = rng.uniform_range(2.5, 4.0);
    c.map_planes(|p| {
        let b = blur(p, n, sigma);
        let bb = blur(&b, n, 1.0);
        for i in 0..n * n {
            p[i] = b[i] + amount * (b[i] - bb[i]);
        }
    });
}

/// Renders one image of `tag`. `rng` is the image's own stream;
/// `corpus_seed` keys artifacts that are fixed across a whole generator.
pub fn render(tag: GeneratorTag, size: usize, corpus_seed: u64, rng: &mut Rng) -> Result<Tensor> {
    if size == 0 || !size.is_multiple_of(BLOCK) {
        return Err(Error::Config(format!(
            "image size must be a positive multiple of {BLOCK}, got {size}"
        )));
    }
    let mut c = real_canvas(size, rng);
    match tag {
        GeneratorTag::Real => {}
        GeneratorTag::GTrain => grid_overlay(&mut c, rng),
        GeneratorTag::GA => quantize(&mut c, rng),
        GeneratorTag::GB => spectral_notch(&mut c, rng),
        GeneratorTag::GC => checkerboard_upsample(&mut c, rng),
        GeneratorTag::GD => dct_suppress(&mut c, rng),
        GeneratorTag::GE => {
            let amp = rng.uniform_range(0.03, 0.05);
            for (v, p) in c.px.iter_mut().zip(fixed_pattern(size, corpus_seed)) {
                *v += amp * p;
            }
        }
        GeneratorTag::GF => sharpened_blur(&mut c, rng),
    }
    Ok(c.into_tensor())
}

// ----- designed statistics ------------------------------------------------

fn luminance(image: &Tensor) -> (usize, Vec<f32>) {
    let n = image.shape()[1];
    let c = Canvas {
        size: n,
        px: image.data().to_vec(),
    };
    let lum = (0..n * n)
        .map(|i| (c.plane(0)[i] + c.plane(1)[i] + c.plane(2)[i]) / 3.0)
        .collect();
    (n, lum)
}

fn laplacian_energy(l: &[f32], n: usize) -> f64 {
    let mut s = 0.0f64;
    for y in 1..n - 1 {
        for x in 1..n - 1 {
            let v = 4.0 * l[y * n + x] - l[y * n + x - 1] - l[y * n + x + 1] - l[(y - 1) * n + x] - l[(y + 1) * n + x];
            s += f64::from(v) * f64::from(v);
        }
    }
    s / ((n - 2) * (n - 2)) as f64
}

/// The image statistic each generator's artifact was designed to move.
/// `REAL` has no statistic of its own and uses the grid statistic.
pub fn designed_statistic(tag: GeneratorTag, image: &Tensor) -> f64 {
    let (n, l) = luminance(image);
    match tag {
        GeneratorTag::Real | GeneratorTag::GTrain => {
            // Amplitude of the period-4 component of the row and column means.
            let k = n / 4;
            let mut total = 0.0;
            for along_x in [true, false] {
                let prof: Vec<f64> = (0..n)
                    .map(|i| {
                        (0..n)
                            .map(|j| f64::from(if along_x { l[j * n + i] } else { l[i * n + j] }))
                            .sum::<f64>()
                            / n as f64
                    })
                    .collect();
                let (mut re, mut im) = (0.0, 0.0);
                for (i, v) in prof.iter().enumerate() {
                    let ang = 2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                    re += v * ang.cos();
                    im -= v * ang.sin();
                }
                total += re.hypot(im) / n as f64;
            }
            total
        }
        GeneratorTag::GA => {
            // Share of horizontally adjacent pixels with identical 8-bit values.
            let mut same = 0usize;
            let plane = n * n;
            for c in 0..3 {
                let p = &image.data()[c * plane..(c + 1) * plane];
                for y in 0..n {
                    for x in 0..n - 1 {
                        if super::ppm::to_byte(p[y * n + x]) == super::ppm::to_byte(p[y * n + x + 1]) {
                            same += 1;
                        }
                    }
                }
            }
            same as f64 / (3 * n * (n - 1)) as f64
        }
        GeneratorTag::GB => {
            // Share of non-DC spectral energy at radial frequencies 2.5..=3.
            let s = spectrum(&l, n);
            let (mut band, mut total) = (0.0f64, 0.0f64);
            for ky in 0..n {
                for kx in 0..n {
                    let r = radius(kx, ky, n);
                    if r == 0.0 {
                        continue;
                    }
                    let e = f64::from(s[ky * n + kx].norm_sqr());
                    total += e;
                    if (2.5..=3.0).contains(&r) {
                        band += e;
                    }
                }
            }
            band / total.max(1e-30)
        }
        GeneratorTag::GC => {
            let s: f64 = (0..n * n)
                .map(|i| {
                    let (y, x) = (i / n, i % n);
                    let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                    sign * f64::from(l[i])
                })
                .sum();
            s.abs() / (n * n) as f64
        }
        GeneratorTag::GD => {
            // Mean step across block boundaries over mean step inside blocks.
            let (mut edge, mut ne) = (0.0f64, 0usize);
            let (mut inner, mut ni) = (0.0f64, 0usize);
            for y in 0..n {
                for x in 0..n - 1 {
                    for (a, b, pos) in [
                        (l[y * n + x], l[y * n + x + 1], x),
                        (l[x * n + y], l[(x + 1) * n + y], x),
                    ] {
                        let d = f64::from((a - b).abs());
                        if pos % BLOCK == BLOCK - 1 {
                            edge += d;
                            ne += 1;
                        } else {
                            inner += d;
                            ni += 1;
                        }
                    }
                }
            }
            (edge / ne as f64) / (inner / ni as f64).max(1e-9)
        }
        GeneratorTag::GE | GeneratorTag::GF => laplacian_energy(&l, n),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_roundtrip_through_strings() {
        for t in GeneratorTag::ALL {
            assert_eq!(t.as_str().parse::<GeneratorTag>().unwrap(), t);
        }
        assert!("G-Z".parse::<GeneratorTag>().is_err());
    }

    #[test]
    fn render_is_deterministic_and_in_range() {
        for tag in GeneratorTag::ALL {
            let a = render(tag, 32, 1, &mut Rng::stream(1, "x")).unwrap();
            let b = render(tag, 32, 1, &mut Rng::stream(1, "x")).unwrap();
            assert_eq!(a, b);
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn size_must_be_block_multiple() {
        assert!(render(GeneratorTag::Real, 12, 1, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn dct_matrix_is_orthonormal() {
        let m = dct_matrix();
        for i in 0..BLOCK {
            for j in 0..BLOCK {
                let dot: f32 = (0..BLOCK).map(|k| m[i][k] * m[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-5);
            }
        }
    }
}
