//! Latent-first synthetic data.
//!
//! Every sample is generated from one affect coordinate (v, a) drawn
//! uniformly from [-1,1]^2, so the three label families are mutually
//! consistent functions of a single latent state:
//!
//! - expression: class 0 (neutral) inside the radius-0.15 disc, otherwise
//!   1 + (octant mod 6) where octant indexes the angle of (v, a) in eighths
//!   of the circle starting at -pi;
//! - action units: axis-aligned threshold rules, one per unit (see
//!   [`AU_RULES`]; unit k fires iff `w.(v,a) + c > 0`);
//! - valence/arousal target: the latent plus Gaussian jitter of standard
//!   deviation `label_noise`, clipped back to [-1,1].
//!
//! The rendered image encodes the latent through blob positions and the
//! action units through blob intensities, over Gaussian background noise,
//! clipped to [0,1]:
//!
//! - channel 0: a wide blob sliding in from the left edge along the middle
//!   row, center x = (v-1)/2 * (W-1) — position encodes valence, and the
//!   edge clipping makes its in-image mass monotone in v so the code
//!   survives the model's global pooling;
//! - channel 1: the same construction from the top edge for arousal;
//! - channel 2 (last channel): a free blob at (x,y) proportional to (v,a)
//!   plus eight fixed border blobs whose intensities carry the AU bits.
//!
//! For single- or two-channel images the planes fold together (channel
//! index modulo C).
//!
//! Per-sample randomness comes from an independent stream of one seeded
//! generator, so the dataset is a pure function of the spec and samples can
//! be generated in any order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::model::{NUM_AUS, NUM_EXPRESSIONS};
use crate::objectives::BatchLabels;

/// Axis-aligned action-unit rules: unit k is active iff
/// `w.0 * v + w.1 * a + c > 0`.
pub const AU_RULES: [((f64, f64), f64); NUM_AUS] = [
    ((1.0, 0.0), 0.0),   // v > 0
    ((1.0, 0.0), -0.4),  // v > 0.4
    ((-1.0, 0.0), -0.4), // v < -0.4
    ((0.0, 1.0), 0.0),   // a > 0
    ((0.0, 1.0), -0.4),  // a > 0.4
    ((0.0, -1.0), -0.4), // a < -0.4
    ((1.0, 0.0), 0.3),   // v > -0.3
    ((0.0, -1.0), 0.3),  // a < 0.3
];

const NEUTRAL_RADIUS: f64 = 0.15;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub image_size: (usize, usize, usize),
    pub seed: u64,
    /// Standard deviation of the valence/arousal target jitter.
    pub label_noise: f64,
    /// Per-task probability of dropping the annotation (va, au, expr).
    pub partial_annotation_probs: (f64, f64, f64),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_samples: 64,
            image_size: (3, 32, 32),
            seed: 0,
            label_noise: 0.02,
            partial_annotation_probs: (0.0, 0.0, 0.0),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.image_size;
        if self.n_samples == 0 || c == 0 || h < 4 || w < 4 {
            return Err(Error::InvalidArgument(
                "synthetic spec needs n_samples >= 1 and images at least 4x4".into(),
            ));
        }
        if self.label_noise < 0.0 {
            return Err(Error::InvalidArgument("label_noise must be >= 0".into()));
        }
        let (pva, pau, pexpr) = self.partial_annotation_probs;
        for p in [pva, pau, pexpr] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(
                    "partial annotation probabilities must be in [0,1]".into(),
                ));
            }
        }
        Ok(())
    }
}

pub fn expression_of(v: f64, a: f64) -> usize {
    if v * v + a * a < NEUTRAL_RADIUS * NEUTRAL_RADIUS {
        return 0;
    }
    let angle = a.atan2(v); // [-pi, pi]
    let octant = (((angle + std::f64::consts::PI) / (std::f64::consts::PI / 4.0)) as usize).min(7);
    let class = 1 + octant % (NUM_EXPRESSIONS - 1);
    debug_assert!(class < NUM_EXPRESSIONS);
    class
}

pub fn aus_of(v: f64, a: f64) -> [bool; NUM_AUS] {
    let mut out = [false; NUM_AUS];
    for (k, ((wv, wa), c)) in AU_RULES.iter().enumerate() {
        out[k] = wv * v + wa * a + c > 0.0;
    }
    out
}

fn add_blob(
    image: &mut [f32],
    size: (usize, usize, usize),
    channel: Option<usize>,
    cx: f64,
    cy: f64,
    sigma: f64,
    amplitude: f64,
) {
    let (c, h, w) = size;
    let reach = (3.0 * sigma).ceil() as isize;
    let x0 = ((cx.floor() as isize) - reach).max(0) as usize;
    let x1 = (((cx.ceil() as isize) + reach) as usize).min(w - 1);
    let y0 = ((cy.floor() as isize) - reach).max(0) as usize;
    let y1 = (((cy.ceil() as isize) + reach) as usize).min(h - 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let value = (amplitude * (-d2 * inv).exp()) as f32;
            match channel {
                Some(ch) => image[ch * h * w + y * w + x] += value,
                None => {
                    for ch in 0..c {
                        image[ch * h * w + y * w + x] += value;
                    }
                }
            }
        }
    }
}

/// Gaussian draw via Box-Muller from two uniform variates.
fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Labels and image for one explicit latent coordinate. `rng` supplies the
/// target jitter, annotation drops and pixel noise, in that order.
pub fn sample_from_latent<R: Rng + ?Sized>(
    v: f64,
    a: f64,
    spec: &SyntheticSpec,
    rng: &mut R,
) -> (Vec<f32>, [f32; 2], [bool; NUM_AUS], usize, [bool; 3]) {
    let (c, h, w) = spec.image_size;

    let jitter = |rng: &mut R, x: f64| -> f32 {
        let noisy = x + spec.label_noise * normal(rng);
        noisy.clamp(-1.0, 1.0) as f32
    };
    let va_target = [jitter(rng, v), jitter(rng, a)];
    let aus = aus_of(v, a);
    let expr = expression_of(v, a);

    let (pva, pau, pexpr) = spec.partial_annotation_probs;
    let mut mask = [
        rng.random::<f64>() >= pva,
        rng.random::<f64>() >= pau,
        rng.random::<f64>() >= pexpr,
    ];
    if !(mask[0] || mask[1] || mask[2]) {
        // every sample keeps at least one task; expressions are cheapest
        mask[2] = true;
    }

    let mut image = vec![0.0f32; c * h * w];
    for p in image.iter_mut() {
        *p = (0.05 * normal(rng)) as f32;
    }
    // slide-in blobs: position encodes the coordinate, edge clipping makes
    // the in-image mass monotone in it
    let vx = (w - 1) as f64 * 0.5 * (v - 1.0);
    add_blob(
        &mut image,
        spec.image_size,
        Some(0),
        vx,
        (h - 1) as f64 * 0.5,
        w as f64 / 5.0,
        1.0,
    );
    let ay = (h - 1) as f64 * 0.5 * (a - 1.0);
    add_blob(
        &mut image,
        spec.image_size,
        Some(1 % c),
        (w - 1) as f64 * 0.5,
        ay,
        h as f64 / 5.0,
        1.0,
    );
    // free blob at the affect coordinate
    let cx = (w - 1) as f64 * 0.5 * (1.0 + 0.8 * v);
    let cy = (h - 1) as f64 * 0.5 * (1.0 + 0.8 * a);
    add_blob(
        &mut image,
        spec.image_size,
        Some(2 % c),
        cx,
        cy,
        w as f64 / 8.0,
        0.6,
    );
    // border blobs carry the action-unit bits in their intensities
    for (k, &active) in aus.iter().enumerate() {
        let col = k % 4;
        let bx = (w - 1) as f64 * (1.0 + 2.0 * col as f64) / 8.0;
        let by = if k < 4 {
            (h - 1) as f64 / 8.0
        } else {
            (h - 1) as f64 * 7.0 / 8.0
        };
        let amp = if active { 0.9 } else { 0.05 };
        add_blob(
            &mut image,
            spec.image_size,
            Some(2 % c),
            bx,
            by,
            w as f64 / 14.0,
            amp,
        );
    }
    for p in image.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
    (image, va_target, aus, expr, mask)
}

/// Generate the full dataset; a pure function of the spec (per-sample RNG
/// streams are derived from (seed, sample index)).
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.n_samples;
    let (c, h, w) = spec.image_size;
    let stride = c * h * w;

    let mut images = vec![0.0f32; n * stride];
    let mut labels = BatchLabels {
        n,
        va: vec![0.0; 2 * n],
        au: vec![0.0; NUM_AUS * n],
        expr: vec![0; n],
        mask_va: vec![false; n],
        mask_au: vec![false; n],
        mask_expr: vec![false; n],
    };
    let mut frame_ids = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n);

    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let v = rng.random::<f64>() * 2.0 - 1.0;
        let a = rng.random::<f64>() * 2.0 - 1.0;
        let (image, va, aus, expr, mask) = sample_from_latent(v, a, spec, &mut rng);

        images[i * stride..(i + 1) * stride].copy_from_slice(&image);
        labels.va[i * 2] = va[0];
        labels.va[i * 2 + 1] = va[1];
        for (k, &bit) in aus.iter().enumerate() {
            labels.au[i * NUM_AUS + k] = bit as u8 as f32;
        }
        labels.expr[i] = expr;
        labels.mask_va[i] = mask[0];
        labels.mask_au[i] = mask[1];
        labels.mask_expr[i] = mask[2];
        frame_ids.push(format!("frame_{i:06}"));
        latents.push((v, a));
    }
    labels.validate()?;
    Ok(Dataset {
        image_size: spec.image_size,
        images,
        labels,
        frame_ids,
        latents,
    })
}
