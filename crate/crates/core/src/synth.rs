//! Procedural two-centre dataset generator.
//!
//! Shared blob geometry rendered under two appearance recipes. The
//! renderer for the opposite domain doubles as a ground-truth mapping
//! oracle for evaluating learned domain adaptations: for a sample drawn
//! in domain A, rendering the same geometry with domain-B appearance is
//! exactly the matched image a perfect mapping network would produce.

use crate::dataset::{labelled_count, DomainDataset, Sample, Split};
use crate::tensor::{LabelMask, TensorImage};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeometryParams {
    pub image_size: usize,
    /// 1–3 overlapping lobes; all are kept connected to the primary lobe.
    pub n_lobes: usize,
    /// (min, max) primary radius as a fraction of the image size.
    pub radius_range: (f64, f64),
    /// Radial boundary perturbation amplitude, relative to the radius.
    pub wobble_amp: f64,
    pub seed: u64,
}

impl Default for GeometryParams {
    fn default() -> Self {
        GeometryParams {
            image_size: 64,
            n_lobes: 2,
            radius_range: (0.18, 0.30),
            wobble_amp: 0.25,
            seed: 0,
        }
    }
}

impl GeometryParams {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::invalid("image_size must be at least 8"));
        }
        if !(1..=3).contains(&self.n_lobes) {
            return Err(Error::invalid("n_lobes must be in 1..=3"));
        }
        let (lo, hi) = self.radius_range;
        if !(lo > 0.0 && hi < 0.5 && lo <= hi) {
            return Err(Error::invalid("radius_range must lie within (0, 0.5)"));
        }
        if !(0.0..=0.9).contains(&self.wobble_amp) {
            return Err(Error::invalid("wobble_amp must be in [0, 0.9]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AppearanceParams {
    pub fg_mean: f64,
    pub bg_mean: f64,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    pub gamma: f64,
    pub stripe_amp: f64,
    pub stripe_period: usize,
    pub invert: bool,
    /// Per-sample jitter applied to fg/bg means, for within-domain variety.
    pub mean_jitter: f64,
}

impl AppearanceParams {
    /// Bright blob on a dark background with mild noise.
    pub fn domain_a() -> Self {
        AppearanceParams {
            fg_mean: 0.75,
            bg_mean: 0.30,
            noise_sigma: 0.10,
            blur_sigma: 0.6,
            gamma: 1.0,
            stripe_amp: 0.0,
            stripe_period: 8,
            invert: false,
            mean_jitter: 0.04,
        }
    }

    /// Inverted intensity, gamma-compressed, striped and more blurred.
    pub fn domain_b() -> Self {
        AppearanceParams {
            fg_mean: 0.75,
            bg_mean: 0.30,
            noise_sigma: 0.04,
            blur_sigma: 1.2,
            gamma: 1.8,
            stripe_amp: 0.15,
            stripe_period: 6,
            invert: true,
            mean_jitter: 0.04,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("fg_mean", self.fg_mean), ("bg_mean", self.bg_mean)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must be in [0,1]")));
            }
        }
        if (self.fg_mean - self.bg_mean).abs() < 1e-9 {
            return Err(Error::invalid("fg_mean and bg_mean must differ"));
        }
        if self.noise_sigma < 0.0 || self.blur_sigma < 0.0 || self.stripe_amp < 0.0 {
            return Err(Error::invalid("noise/blur/stripe amplitudes must be non-negative"));
        }
        if self.gamma <= 0.0 {
            return Err(Error::invalid("gamma must be positive"));
        }
        if self.stripe_period < 2 {
            return Err(Error::invalid("stripe_period must be at least 2"));
        }
        if !(0.0..=0.2).contains(&self.mean_jitter) {
            return Err(Error::invalid("mean_jitter must be in [0, 0.2]"));
        }
        Ok(())
    }
}

struct Lobe {
    cy: f64,
    cx: f64,
    radius: f64,
    // radial modulation r(theta) = radius * (1 + amp * sum_k a_k sin(k theta + phi_k))
    harmonics: Vec<(f64, f64, f64)>, // (weight, frequency, phase)
    amp: f64,
}

impl Lobe {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let rho = (dy * dy + dx * dx).sqrt();
        let theta = dy.atan2(dx);
        let mut w = 0.0;
        for (a, k, phi) in &self.harmonics {
            w += a * (k * theta + phi).sin();
        }
        rho <= self.radius * (1.0 + self.amp * w)
    }
}

fn draw_lobe(rng: &mut ChaCha8Rng, cy: f64, cx: f64, radius: f64, amp: f64) -> Lobe {
    let freqs = [2.0, 3.0, 5.0];
    let raw: Vec<f64> = (0..freqs.len()).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let harmonics = freqs
        .iter()
        .zip(&raw)
        .map(|(k, a)| (a / total, *k, rng.random_range(0.0..2.0 * PI)))
        .collect();
    Lobe { cy, cx, radius, harmonics, amp }
}

/// Generate a connected blob mask. Deterministic given `p.seed`;
/// retries internal draws until the foreground fraction lands in
/// [0.02, 0.4], erroring after 100 attempts.
pub fn gen_geometry(p: &GeometryParams) -> Result<LabelMask> {
    p.validate()?;
    let size = p.image_size;
    for attempt in 0..100u64 {
        let mut rng = crate::rng::substream(p.seed, "geometry", attempt);
        let half = size as f64 / 2.0;
        let cy = half + rng.random_range(-0.08..0.08) * size as f64;
        let cx = half + rng.random_range(-0.08..0.08) * size as f64;
        let r0 = rng.random_range(p.radius_range.0..=p.radius_range.1) * size as f64;

        let mut lobes = vec![draw_lobe(&mut rng, cy, cx, r0, p.wobble_amp)];
        for _ in 1..p.n_lobes {
            // centre inside the guaranteed core of the primary lobe
            let ang = rng.random_range(0.0..2.0 * PI);
            let dist = rng.random_range(0.0..0.4) * r0 * (1.0 - p.wobble_amp).max(0.2);
            let radius = rng.random_range(0.45..0.85) * r0;
            lobes.push(draw_lobe(&mut rng, cy + dist * ang.sin(), cx + dist * ang.cos(), radius, p.wobble_amp));
        }

        let mut values = vec![0u8; size * size];
        let mut fg = 0usize;
        for y in 0..size {
            for x in 0..size {
                let py = y as f64 + 0.5;
                let px = x as f64 + 0.5;
                if lobes.iter().any(|l| l.contains(py, px)) {
                    values[y * size + x] = 1;
                    fg += 1;
                }
            }
        }
        let frac = fg as f64 / (size * size) as f64;
        if (0.02..=0.4).contains(&frac) {
            return LabelMask::new(size, size, values);
        }
    }
    Err(Error::invalid(format!(
        "geometry params cannot satisfy foreground-fraction bound after 100 retries (seed {})",
        p.seed
    )))
}

/// Render a mask under an appearance recipe:
/// `clip(blur(noise(gamma(stripes(invert(base))))))` with
/// `base = fg*mask + bg*(1-mask)`.
pub fn render(mask: &LabelMask, a: &AppearanceParams, seed: u64) -> Result<TensorImage> {
    a.validate()?;
    mask.validate()?;
    let (h, w) = (mask.height, mask.width);
    let mut rng = crate::rng::stream(seed, "render");

    let jitter = |rng: &mut ChaCha8Rng, m: f64, j: f64| -> f64 {
        if j == 0.0 {
            m
        } else {
            (m + rng.random_range(-j..j)).clamp(0.02, 0.98)
        }
    };
    let fg = jitter(&mut rng, a.fg_mean, a.mean_jitter);
    let bg = jitter(&mut rng, a.bg_mean, a.mean_jitter);
    let stripe_phase = rng.random_range(0.0..2.0 * PI);

    let mut img = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let m = mask.values[y * w + x] as f64;
            let mut v = fg * m + bg * (1.0 - m);
            if a.invert {
                v = 1.0 - v;
            }
            if a.stripe_amp > 0.0 {
                v += a.stripe_amp * (2.0 * PI * y as f64 / a.stripe_period as f64 + stripe_phase).sin();
            }
            v = v.clamp(0.0, 1.0);
            img[y * w + x] = v.powf(a.gamma);
        }
    }

    if a.noise_sigma > 0.0 {
        let normal = StandardNormal;
        for v in &mut img {
            let n: f64 = normal.sample(&mut rng);
            *v += a.noise_sigma * n;
        }
    }

    if a.blur_sigma > 0.0 {
        img = gaussian_blur(&img, h, w, a.blur_sigma);
    }

    let values: Vec<f32> = img.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    TensorImage::new(h, w, 1, values)
}

fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }

    let clamp = |v: isize, n: usize| -> usize { v.clamp(0, n as isize - 1) as usize };
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sx = clamp(x as isize + ki as isize - radius, w);
                acc += k * img[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sy = clamp(y as isize + ki as isize - radius, h);
                acc += k * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Ground-truth matched sample: the same geometry re-rendered under the
/// other domain's appearance. Shape and structure are identical to
/// `x_a`; only the appearance changes.
pub fn oracle_transform(
    x_a: &TensorImage,
    mask: &LabelMask,
    _params_a: &AppearanceParams,
    params_b: &AppearanceParams,
    seed: u64,
) -> Result<TensorImage> {
    if x_a.height != mask.height || x_a.width != mask.width {
        return Err(Error::invalid("oracle_transform: image/mask shape mismatch"));
    }
    render(mask, params_b, seed)
}

/// Full synthesis config for one two-domain dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_a: usize,
    pub n_b: usize,
    /// Held-out geometry seeds rendered under BOTH appearances; these form
    /// the test splits and the mapping-oracle pairing table.
    pub n_eval_pairs: usize,
    /// Which domain carries labels ("a" or "b").
    pub labelled_domain: String,
    pub label_ratio: f64,
    pub geometry: GeometryParams,
    pub appearance_a: AppearanceParams,
    pub appearance_b: AppearanceParams,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.labelled_domain != "a" && self.labelled_domain != "b" {
            return Err(Error::invalid("labelled_domain must be \"a\" or \"b\""));
        }
        if !(self.label_ratio > 0.0 && self.label_ratio <= 1.0) {
            return Err(Error::invalid("label_ratio outside (0, 1]"));
        }
        if self.n_a == 0 || self.n_b == 0 {
            return Err(Error::invalid("both domains need at least one training sample"));
        }
        self.geometry.validate()?;
        self.appearance_a.validate()?;
        self.appearance_b.validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OraclePair {
    pub geom_seed: u64,
    pub a: String,
    pub b: String,
}

pub struct SynthOutput {
    pub domain_a: DomainDataset,
    pub domain_b: DomainDataset,
    pub pairs: Vec<OraclePair>,
}

fn geom_seed(config_seed: u64, namespace: &str, index: usize) -> u64 {
    use rand::RngCore;
    crate::rng::substream(config_seed, namespace, index as u64).next_u64()
}

/// Generate both domains in memory.
///
/// Training geometry seeds are disjoint between domains (unpaired by
/// construction); only the evaluation pairs share geometry.
pub fn gen_dataset(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let size = config.geometry.image_size;

    let make_mask = |gseed: u64| -> Result<LabelMask> {
        let p = GeometryParams { seed: gseed, image_size: size, ..config.geometry.clone() };
        gen_geometry(&p)
    };

    let mut a_samples = Vec::new();
    let mut b_samples = Vec::new();
    let mut pairs = Vec::new();

    let n_lab_a =
        if config.labelled_domain == "a" { labelled_count(config.n_a, config.label_ratio) } else { 0 };
    let n_lab_b =
        if config.labelled_domain == "b" { labelled_count(config.n_b, config.label_ratio) } else { 0 };
    if config.labelled_domain == "a" && n_lab_a == 0 {
        return Err(Error::invalid("label_ratio yields zero labelled samples in domain a"));
    }
    if config.labelled_domain == "b" && n_lab_b == 0 {
        return Err(Error::invalid("label_ratio yields zero labelled samples in domain b"));
    }

    // Labelled subset: deterministic draw over train indices, keyed like
    // dataset::split_dataset (random key, id tiebreak).
    let pick_labelled = |n: usize, k: usize, stream_name: &str| -> Vec<bool> {
        let mut rng = crate::rng::stream(config.seed, stream_name);
        let mut keyed: Vec<(u64, usize)> = (0..n).map(|i| (rng.random::<u64>(), i)).collect();
        keyed.sort_unstable();
        let mut flags = vec![false; n];
        for (_, i) in keyed.iter().take(k) {
            flags[*i] = true;
        }
        flags
    };
    let lab_a = pick_labelled(config.n_a, n_lab_a, "label-pick-a");
    let lab_b = pick_labelled(config.n_b, n_lab_b, "label-pick-b");

    for i in 0..config.n_a {
        let gseed = geom_seed(config.seed, "geom-a", i);
        let mask = make_mask(gseed)?;
        let image = render(&mask, &config.appearance_a, geom_seed(config.seed, "render-a", i))?;
        let labelled = lab_a[i];
        a_samples.push(Sample {
            id: format!("a_train_{i:04}"),
            image,
            mask: if labelled { Some(mask) } else { None },
            domain: "a".into(),
            split: if labelled { Split::TrainLabelled } else { Split::TrainUnlabelled },
        });
    }
    for i in 0..config.n_b {
        let gseed = geom_seed(config.seed, "geom-b", i);
        let mask = make_mask(gseed)?;
        let image = render(&mask, &config.appearance_b, geom_seed(config.seed, "render-b", i))?;
        let labelled = lab_b[i];
        b_samples.push(Sample {
            id: format!("b_train_{i:04}"),
            image,
            mask: if labelled { Some(mask) } else { None },
            domain: "b".into(),
            split: if labelled { Split::TrainLabelled } else { Split::TrainUnlabelled },
        });
    }

    for i in 0..config.n_eval_pairs {
        let gseed = geom_seed(config.seed, "geom-eval", i);
        let mask = make_mask(gseed)?;
        let render_seed = geom_seed(config.seed, "render-eval", i);
        let img_a = render(&mask, &config.appearance_a, render_seed)?;
        let img_b = render(&mask, &config.appearance_b, render_seed)?;
        let id_a = format!("a_test_{i:04}");
        let id_b = format!("b_test_{i:04}");
        a_samples.push(Sample {
            id: id_a.clone(),
            image: img_a,
            mask: Some(mask.clone()),
            domain: "a".into(),
            split: Split::Test,
        });
        b_samples.push(Sample {
            id: id_b.clone(),
            image: img_b,
            mask: Some(mask),
            domain: "b".into(),
            split: Split::Test,
        });
        pairs.push(OraclePair { geom_seed: gseed, a: id_a, b: id_b });
    }

    Ok(SynthOutput {
        domain_a: DomainDataset::new("domain_a", a_samples)?,
        domain_b: DomainDataset::new("domain_b", b_samples)?,
        pairs,
    })
}

/// Generate and write both manifests plus the pairing table.
pub fn write_dataset(config: &SynthConfig, dir: &Path) -> Result<SynthOutput> {
    let out = gen_dataset(config)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    crate::dataset::save_manifest(&out.domain_a, dir, "domain_a")?;
    crate::dataset::save_manifest(&out.domain_b, dir, "domain_b")?;
    let pairs_json = serde_json::to_string_pretty(&out.pairs)
        .map_err(|e| Error::invalid(format!("pairing table serialization: {e}")))?;
    let path = dir.join("pairs.json");
    fs::write(&path, pairs_json).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}

pub fn load_pairs(path: &Path) -> Result<Vec<OraclePair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk_params(seed: u64) -> GeometryParams {
        GeometryParams { n_lobes: 1, wobble_amp: 0.0, radius_range: (0.25, 0.25), seed, ..Default::default() }
    }

    fn flat(a: &AppearanceParams) -> AppearanceParams {
        AppearanceParams { noise_sigma: 0.0, blur_sigma: 0.0, mean_jitter: 0.0, ..a.clone() }
    }

    #[test]
    fn degenerate_wobble_gives_disk() {
        let p = disk_params(11);
        let mask = gen_geometry(&p).unwrap();
        // every boundary pixel lies within 1 px of the r = 16 circle
        let r = 0.25 * 64.0;
        for y in 0..64usize {
            for x in 0..64usize {
                if mask.get(y, x) == 0 {
                    continue;
                }
                let on_boundary = [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)].iter().any(|(dy, dx)| {
                    let ny = y as i64 + dy;
                    let nx = x as i64 + dx;
                    ny < 0 || nx < 0 || ny >= 64 || nx >= 64 || mask.get(ny as usize, nx as usize) == 0
                });
                if on_boundary {
                    // distance from pixel centre to the lobe centre
                    let cy = mask
                        .values
                        .iter()
                        .enumerate()
                        .filter(|(_, v)| **v == 1)
                        .map(|(i, _)| (i / 64) as f64 + 0.5)
                        .sum::<f64>()
                        / mask.foreground_count() as f64;
                    let cx = mask
                        .values
                        .iter()
                        .enumerate()
                        .filter(|(_, v)| **v == 1)
                        .map(|(i, _)| (i % 64) as f64 + 0.5)
                        .sum::<f64>()
                        / mask.foreground_count() as f64;
                    let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
                    assert!((d - r).abs() <= 1.0, "boundary pixel at distance {d}, radius {r}");
                }
            }
        }
    }

    #[test]
    fn geometry_deterministic() {
        let p = GeometryParams { seed: 77, ..Default::default() };
        assert_eq!(gen_geometry(&p).unwrap(), gen_geometry(&p).unwrap());
    }

    #[test]
    fn geometry_fraction_bounds() {
        for seed in 0..50 {
            let p = GeometryParams { radius_range: (0.2, 0.3), seed, ..Default::default() };
            let mask = gen_geometry(&p).unwrap();
            let frac = mask.foreground_count() as f64 / (64.0 * 64.0);
            assert!((0.02..=0.4).contains(&frac), "fraction {frac} at seed {seed}");
        }
    }

    #[test]
    fn geometry_connected() {
        // BFS from any foreground pixel must reach all of them
        for seed in 0..20 {
            let p = GeometryParams { n_lobes: 3, seed, ..Default::default() };
            let mask = gen_geometry(&p).unwrap();
            let w = mask.width;
            let start = mask.values.iter().position(|v| *v == 1).unwrap();
            let mut seen = vec![false; mask.values.len()];
            let mut queue = std::collections::VecDeque::from([start]);
            seen[start] = true;
            let mut count = 0;
            while let Some(i) = queue.pop_front() {
                count += 1;
                let (y, x) = (i / w, i % w);
                for (dy, dx) in [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)] {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= mask.height as i64 || nx >= w as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.values[j] == 1 && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
            assert_eq!(count, mask.foreground_count(), "disconnected mask at seed {seed}");
        }
    }

    #[test]
    fn identity_appearance_reproduces_mask() {
        let mask = gen_geometry(&disk_params(3)).unwrap();
        let a = AppearanceParams {
            fg_mean: 1.0,
            bg_mean: 0.0,
            gamma: 1.0,
            stripe_amp: 0.0,
            invert: false,
            ..flat(&AppearanceParams::domain_a())
        };
        let img = render(&mask, &a, 1).unwrap();
        for (v, m) in img.values.iter().zip(&mask.values) {
            assert_eq!(*v, *m as f32);
        }
        let inv = AppearanceParams { invert: true, ..a };
        let img = render(&mask, &inv, 1).unwrap();
        for (v, m) in img.values.iter().zip(&mask.values) {
            assert_eq!(*v, 1.0 - *m as f32);
        }
    }

    #[test]
    fn noise_magnitude_matches_half_normal_oracle() {
        let mask = gen_geometry(&disk_params(5)).unwrap();
        let base = AppearanceParams {
            fg_mean: 0.6,
            bg_mean: 0.4,
            ..flat(&AppearanceParams::domain_a())
        };
        let noisy = AppearanceParams { noise_sigma: 0.05, ..base.clone() };
        let clean_img = render(&mask, &base, 9).unwrap();
        let noisy_img = render(&mask, &noisy, 9).unwrap();
        let mean_abs: f64 = clean_img
            .values
            .iter()
            .zip(&noisy_img.values)
            .map(|(c, n)| (*c as f64 - *n as f64).abs())
            .sum::<f64>()
            / clean_img.values.len() as f64;

        // Monte-Carlo oracle for E|sigma * N(0,1)|
        let mut rng = crate::rng::stream(123, "half-normal-oracle");
        let normal = StandardNormal;
        let m = 100_000;
        let oracle: f64 = (0..m)
            .map(|_| {
                let n: f64 = normal.sample(&mut rng);
                (0.05 * n).abs()
            })
            .sum::<f64>()
            / m as f64;
        assert!(mean_abs <= oracle * 1.1, "mean |noise| {mean_abs} vs oracle {oracle}");
        assert!(mean_abs > oracle * 0.5, "noise suspiciously small: {mean_abs}");
    }

    #[test]
    fn oracle_same_params_is_rerender() {
        let mask = gen_geometry(&disk_params(2)).unwrap();
        let a = flat(&AppearanceParams::domain_a());
        let img = render(&mask, &a, 4).unwrap();
        let back = oracle_transform(&img, &mask, &a, &a, 4).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn oracle_preserves_geometry_for_thresholding() {
        let mask = gen_geometry(&GeometryParams { seed: 8, ..Default::default() }).unwrap();
        let a = flat(&AppearanceParams::domain_a());
        let mut b = flat(&AppearanceParams::domain_b());
        b.stripe_amp = 0.0;
        let img_a = render(&mask, &a, 6).unwrap();
        let t_star = oracle_transform(&img_a, &mask, &a, &b, 6).unwrap();
        // domain B is inverted: foreground is darker than background
        let fg_v = (1.0 - b.fg_mean).powf(b.gamma);
        let bg_v = (1.0 - b.bg_mean).powf(b.gamma);
        assert!((fg_v - bg_v).abs() >= 0.3);
        let thr = ((fg_v + bg_v) / 2.0) as f32;
        let pred: Vec<u8> = t_star.values.iter().map(|v| if *v < thr { 1 } else { 0 }).collect();
        assert_eq!(pred, mask.values, "thresholded oracle image must equal the mask");
    }

    #[test]
    fn oracle_gap_exceeds_point_two() {
        let a = AppearanceParams::domain_a();
        let b = AppearanceParams::domain_b();
        let mut total = 0.0;
        for i in 0..100u64 {
            let p = GeometryParams { seed: 1000 + i, ..Default::default() };
            let mask = gen_geometry(&p).unwrap();
            let img_a = render(&mask, &a, 2000 + i).unwrap();
            let t_star = oracle_transform(&img_a, &mask, &a, &b, 2000 + i).unwrap();
            let mae: f64 = img_a
                .values
                .iter()
                .zip(&t_star.values)
                .map(|(x, y)| (*x as f64 - *y as f64).abs())
                .sum::<f64>()
                / img_a.values.len() as f64;
            total += mae;
        }
        assert!(total / 100.0 > 0.2, "mean cross-domain gap {}", total / 100.0);
    }

    fn small_config() -> SynthConfig {
        SynthConfig {
            seed: 42,
            n_a: 9,
            n_b: 7,
            n_eval_pairs: 3,
            labelled_domain: "a".into(),
            label_ratio: 0.25,
            geometry: GeometryParams::default(),
            appearance_a: AppearanceParams::domain_a(),
            appearance_b: AppearanceParams::domain_b(),
        }
    }

    #[test]
    fn dataset_counts_and_pairing() {
        let cfg = SynthConfig { n_a: 99, n_b: 91, label_ratio: 0.2, labelled_domain: "b".into(), n_eval_pairs: 0, ..small_config() };
        let out = gen_dataset(&cfg).unwrap();
        assert_eq!(out.domain_b.counts().0, 18, "20% of 91 rounds to 18 labelled");
        assert_eq!(out.domain_a.counts(), (0, 99, 0));
        assert!(out.pairs.is_empty(), "empty oracle set is valid");
    }

    #[test]
    fn dataset_deterministic() {
        let cfg = small_config();
        let x = gen_dataset(&cfg).unwrap();
        let y = gen_dataset(&cfg).unwrap();
        for (a, b) in x.domain_a.samples.iter().zip(&y.domain_a.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.image, b.image);
            assert_eq!(a.mask, b.mask);
        }
        assert_eq!(x.pairs.len(), y.pairs.len());
    }

    #[test]
    fn appearance_never_moves_geometry() {
        // same geometry seed, two appearances: the stored mask is identical
        let cfg = small_config();
        let out = gen_dataset(&cfg).unwrap();
        for pair in &out.pairs {
            let sa = out.domain_a.get(&pair.a).unwrap();
            let sb = out.domain_b.get(&pair.b).unwrap();
            assert_eq!(sa.mask, sb.mask);
        }
    }

    #[test]
    fn training_geometry_seeds_disjoint() {
        let cfg = small_config();
        let mut seeds = std::collections::BTreeSet::new();
        for i in 0..cfg.n_a {
            assert!(seeds.insert(geom_seed(cfg.seed, "geom-a", i)));
        }
        for i in 0..cfg.n_b {
            assert!(seeds.insert(geom_seed(cfg.seed, "geom-b", i)));
        }
        for i in 0..cfg.n_eval_pairs {
            assert!(seeds.insert(geom_seed(cfg.seed, "geom-eval", i)));
        }
    }

    #[test]
    fn rendered_images_in_unit_range() {
        let cfg = small_config();
        let out = gen_dataset(&cfg).unwrap();
        for s in out.domain_a.samples.iter().chain(&out.domain_b.samples) {
            s.image.validate().unwrap();
            assert!(s.image.values.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
