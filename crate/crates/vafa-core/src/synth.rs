//! Synthetic volumetric segmentation phantoms: multi-class blobs
//! (ellipsoids and boxes) on a textured, noisy background.
//!
//! Classes carry two kinds of evidence with very different robustness:
//!
//! - an intensity band (means `class_gap` apart, validated against the
//!   noise level so local averaging always separates them) — a coarse,
//!   low-frequency cue. A slow sinusoidal shading texture (amplitude
//!   `texture_amp`, a few cycles per volume, too smooth for a small
//!   receptive field to average away) deliberately narrows the usable
//!   intensity margin, so a thresholding-only model stays somewhat
//!   uncertain;
//! - a class-specific noise variance (odd classes draw at `noise_sigma`,
//!   even classes at 0.4x of it) — a broadband, high-frequency cue whose
//!   DCT coefficients are individually small, exactly the content a
//!   learnable quantization table can selectively round away.
//!
//! Together these make the benchmark behave like the regime the attacks
//! target: models that exploit fine 3D structure segment better, and
//! frequency-domain perturbations take exactly that structure away.
//! Train and test samples come from disjoint seed-derived streams;
//! generation is deterministic per (seed, stream, index) regardless of
//! worker count.

use crate::error::SynthError;
use crate::parallel::par_map;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::volume::{LabelField, Volume};

const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;
const PLACEMENT_ATTEMPTS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub extent: [usize; 3],
    /// Total classes including background (class 0).
    pub num_class: usize,
    pub shapes_per_class: usize,
    /// Ellipsoid semi-axis / box half-side range in voxels.
    pub radius_range: [f64; 2],
    /// Spacing between adjacent class intensity means.
    pub class_gap: f64,
    /// Mid-scale of the per-voxel noise; class c draws with
    /// `noise_sigma * (0.5 + 1.5 * c / (num_class - 1))`.
    pub noise_sigma: f64,
    pub texture_amp: f64,
    /// Base texture frequency in cycles per volume; class c uses
    /// `texture_freq + 2c`.
    pub texture_freq: f64,
    /// 0 places shapes at the volume center, 1 uses the full legal range.
    pub center_jitter: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> SynthSpec {
        SynthSpec {
            extent: [64, 64, 64],
            num_class: 4,
            shapes_per_class: 2,
            radius_range: [7.0, 11.0],
            class_gap: 0.2,
            noise_sigma: 0.035,
            texture_amp: 0.08,
            texture_freq: 3.0,
            center_jitter: 1.0,
            train_count: 40,
            test_count: 10,
            seed: 7,
        }
    }
}

impl SynthSpec {
    /// Intensity band center of a class (means centered on 0.5, spaced
    /// `class_gap` apart).
    pub fn class_mean(&self, class: usize) -> f64 {
        0.5 + (class as f64 - (self.num_class as f64 - 1.0) / 2.0) * self.class_gap
    }

    /// Per-voxel noise sigma of a class. Odd classes are "textured"
    /// (full `noise_sigma`), even classes are "smooth" (0.4x), so every
    /// pair of adjacent intensity bands differs strongly in fine-grain
    /// energy.
    pub fn class_sigma(&self, class: usize) -> f64 {
        if class % 2 == 1 {
            self.noise_sigma
        } else {
            0.4 * self.noise_sigma
        }
    }

    /// Worst-case deviation of a voxel of one class from its mean before
    /// clamping (texture amplitude plus 4-sigma-clipped noise).
    pub fn intensity_band_halfwidth(&self, class: usize) -> f64 {
        self.texture_amp + 4.0 * self.class_sigma(class)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::BadSpec(msg));
        if self.num_class < 2 || self.num_class > 64 {
            return bad(format!("num_class {} outside [2, 64]", self.num_class));
        }
        if self.extent.iter().any(|&n| n < 8) {
            return bad(format!("extent {:?} must be >= 8 per axis", self.extent));
        }
        if self.shapes_per_class == 0 {
            return bad("shapes_per_class must be >= 1".into());
        }
        let [rmin, rmax] = self.radius_range;
        if !(1.0 <= rmin && rmin <= rmax) {
            return bad(format!("radius range [{rmin}, {rmax}] invalid"));
        }
        let min_extent = *self.extent.iter().min().unwrap() as f64;
        if 2.0 * rmax + 3.0 > min_extent {
            return bad(format!(
                "radius {rmax} cannot fit inside extent {:?}",
                self.extent
            ));
        }
        if self.noise_sigma < 0.0 || self.texture_amp < 0.0 {
            return bad("noise_sigma and texture_amp must be >= 0".into());
        }
        // learnability guarantee: the band gap must be at least twice the
        // largest per-class sigma, so local averaging always separates
        let max_sigma = self.class_sigma(self.num_class - 1);
        if self.class_gap < 2.0 * max_sigma {
            return bad(format!(
                "class_gap {:.4} < 2 * max class sigma {max_sigma:.4}",
                self.class_gap
            ));
        }
        let lowest = self.class_mean(0) - self.intensity_band_halfwidth(0);
        let highest = self.class_mean(self.num_class - 1)
            + self.intensity_band_halfwidth(self.num_class - 1);
        if lowest < -0.25 || highest > 1.25 {
            return bad(format!(
                "class bands [{lowest:.3}, {highest:.3}] stray too far outside [0, 1]"
            ));
        }
        if !(0.0..=1.0).contains(&self.center_jitter) {
            return bad(format!("center_jitter {} outside [0, 1]", self.center_jitter));
        }
        Ok(())
    }
}

enum ShapeKind {
    Ellipsoid,
    Box,
}

struct Shape {
    kind: ShapeKind,
    center: [f64; 3],
    radii: [f64; 3],
}

impl Shape {
    /// Conservative overlap test on the axis-aligned bounding boxes.
    fn bounding_overlap(&self, other: &Shape) -> bool {
        (0..3).all(|a| {
            (self.center[a] - other.center[a]).abs()
                <= self.radii[a] + other.radii[a] + 1.0
        })
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        match self.kind {
            ShapeKind::Ellipsoid => {
                let mut acc = 0.0;
                for a in 0..3 {
                    let t = (p[a] - self.center[a]) / self.radii[a];
                    acc += t * t;
                }
                acc <= 1.0
            }
            ShapeKind::Box => {
                (0..3).all(|a| (p[a] - self.center[a]).abs() <= self.radii[a])
            }
        }
    }
}

/// Generates train and test splits from disjoint seed streams.
pub fn generate_split(
    spec: &SynthSpec,
    workers: usize,
) -> Result<(Vec<(Volume, LabelField)>, Vec<(Volume, LabelField)>), SynthError> {
    spec.validate()?;
    let train = generate_stream(spec, STREAM_TRAIN, spec.train_count, workers)?;
    let test = generate_stream(spec, STREAM_TEST, spec.test_count, workers)?;
    Ok((train, test))
}

/// Generates `count` samples from one stream.
pub fn generate_stream(
    spec: &SynthSpec,
    stream: u64,
    count: usize,
    workers: usize,
) -> Result<Vec<(Volume, LabelField)>, SynthError> {
    spec.validate()?;
    let indices: Vec<usize> = (0..count).collect();
    let results = par_map(&indices, workers, |_, &i| generate_sample(spec, stream, i));
    results.into_iter().collect()
}

/// One deterministic sample: labels first (with bounded re-draws if a class
/// gets fully painted over), then intensities.
pub fn generate_sample(
    spec: &SynthSpec,
    stream: u64,
    index: usize,
) -> Result<(Volume, LabelField), SynthError> {
    let mut rng = Rng::derive(spec.seed, stream, index as u64);
    let [h, w, d] = spec.extent;
    let voxels = h * w * d;

    let mut classes = vec![0u8; voxels];
    let mut attempt = 0;
    loop {
        attempt += 1;
        classes.fill(0);
        let mut placed: Vec<Shape> = Vec::new();
        for class in 1..spec.num_class {
            for _ in 0..spec.shapes_per_class {
                // prefer disjoint shapes; give up on disjointness (not on
                // the sample) after a bounded number of proposals
                let mut shape = draw_shape(spec, &mut rng);
                for _ in 0..PLACEMENT_ATTEMPTS {
                    if placed.iter().all(|other| !shape.bounding_overlap(other)) {
                        break;
                    }
                    shape = draw_shape(spec, &mut rng);
                }
                rasterize(&shape, spec.extent, class as u8, &mut classes);
                placed.push(shape);
            }
        }
        match first_missing_class(&classes, spec.num_class) {
            None => break,
            Some(missing) => {
                if attempt >= PLACEMENT_ATTEMPTS {
                    return Err(SynthError::Packing {
                        sample: index,
                        class: missing,
                        attempts: attempt,
                    });
                }
            }
        }
    }

    // per-class, per-axis texture tables: sin(2 pi (f * i / n + phase))
    let mut tex = Vec::with_capacity(spec.num_class);
    for class in 0..spec.num_class {
        let f = spec.texture_freq + 2.0 * class as f64;
        let mut axes: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (axis, n) in spec.extent.iter().enumerate() {
            let phase = rng.next_f64();
            axes[axis] = (0..*n)
                .map(|i| (std::f64::consts::TAU * (f * i as f64 / *n as f64 + phase)).sin())
                .collect();
        }
        tex.push(axes);
    }

    let mut data = vec![0.0; voxels];
    let mut idx = 0;
    for ih in 0..h {
        for iw in 0..w {
            for id in 0..d {
                let c = classes[idx] as usize;
                let t = tex[c][0][ih] * tex[c][1][iw] * tex[c][2][id];
                let noise = spec.class_sigma(c) * rng.normal_clipped(4.0);
                data[idx] = (spec.class_mean(c) + spec.texture_amp * t + noise).clamp(0.0, 1.0);
                idx += 1;
            }
        }
    }

    let volume = Volume::from_tensor(Tensor::from_vec(&spec.extent, data))
        .expect("generated volume is finite and in range");
    let labels = LabelField::new(classes, spec.extent, spec.num_class)
        .expect("generated labels are in range");
    Ok((volume, labels))
}

fn draw_shape(spec: &SynthSpec, rng: &mut Rng) -> Shape {
    let kind = if rng.next_f64() < 0.5 { ShapeKind::Ellipsoid } else { ShapeKind::Box };
    let [rmin, rmax] = spec.radius_range;
    let mut radii = [0.0; 3];
    let mut center = [0.0; 3];
    for a in 0..3 {
        radii[a] = rng.uniform(rmin, rmax);
        let n = spec.extent[a] as f64;
        let lo = radii[a] + 1.0;
        let hi = n - 2.0 - radii[a];
        let mid = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo) * spec.center_jitter;
        center[a] = mid + rng.uniform(-half, half);
    }
    Shape { kind, center, radii }
}

fn rasterize(shape: &Shape, extent: [usize; 3], class: u8, classes: &mut [u8]) {
    let [h, w, d] = extent;
    // bounding box keeps rasterization proportional to the shape volume
    let lo = |a: usize| ((shape.center[a] - shape.radii[a]).floor().max(0.0)) as usize;
    let hi = |a: usize, n: usize| {
        ((shape.center[a] + shape.radii[a]).ceil() as usize).min(n - 1)
    };
    for ih in lo(0)..=hi(0, h) {
        for iw in lo(1)..=hi(1, w) {
            for id in lo(2)..=hi(2, d) {
                if shape.contains([ih as f64, iw as f64, id as f64]) {
                    classes[(ih * w + iw) * d + id] = class;
                }
            }
        }
    }
}

fn first_missing_class(classes: &[u8], num_class: usize) -> Option<usize> {
    let mut present = vec![false; num_class];
    for &c in classes {
        present[c as usize] = true;
    }
    present.iter().position(|&p| !p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            extent: [24, 24, 24],
            radius_range: [4.0, 7.0],
            train_count: 2,
            test_count: 1,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_across_runs_and_workers() {
        let spec = small_spec();
        let (t1, e1) = generate_split(&spec, 1).unwrap();
        let (t2, e2) = generate_split(&spec, 4).unwrap();
        for ((va, la), (vb, lb)) in t1.iter().zip(&t2) {
            assert_eq!(va.tensor().data(), vb.tensor().data());
            assert_eq!(la.classes(), lb.classes());
        }
        assert_eq!(e1[0].0.tensor().data(), e2[0].0.tensor().data());
    }

    #[test]
    fn train_and_test_streams_differ() {
        let spec = small_spec();
        let (train, test) = generate_split(&spec, 0).unwrap();
        assert_ne!(train[0].0.tensor().data(), test[0].0.tensor().data());
    }

    #[test]
    fn every_class_present_and_in_range() {
        let spec = small_spec();
        let (train, _) = generate_split(&spec, 0).unwrap();
        for (v, l) in &train {
            let counts = l.class_counts();
            assert!(counts.iter().all(|&c| c > 0), "class missing: {counts:?}");
            assert!(v.tensor().data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn intensities_stay_inside_class_band() {
        let spec = small_spec();
        let (train, _) = generate_split(&spec, 0).unwrap();
        for (v, l) in &train {
            for (&x, &c) in v.tensor().data().iter().zip(l.classes()) {
                let mu = spec.class_mean(c as usize);
                let half = spec.intensity_band_halfwidth(c as usize);
                // clamping can only pull values toward the band center
                let lo = (mu - half).max(0.0) - 1e-12;
                let hi = (mu + half).min(1.0) + 1e-12;
                assert!(
                    (lo..=hi).contains(&x),
                    "voxel {x} outside band for class {c} (mu {mu}, half {half})"
                );
            }
        }
    }

    #[test]
    fn class_sigmas_alternate_smooth_textured() {
        let spec = SynthSpec::default();
        assert!((spec.class_sigma(0) - 0.4 * spec.noise_sigma).abs() < 1e-12);
        assert!((spec.class_sigma(1) - spec.noise_sigma).abs() < 1e-12);
        assert!((spec.class_sigma(2) - 0.4 * spec.noise_sigma).abs() < 1e-12);
        assert!((spec.class_sigma(3) - spec.noise_sigma).abs() < 1e-12);
    }

    #[test]
    fn centered_sphere_volume_fraction_matches_analytic() {
        // num_class = 2, one centered ball of radius 6 in a 32^3 volume
        let spec = SynthSpec {
            extent: [32, 32, 32],
            num_class: 2,
            radius_range: [6.0, 6.0],
            center_jitter: 0.0,
            train_count: 4,
            test_count: 0,
            noise_sigma: 0.02,
            ..SynthSpec::default()
        };
        let (train, _) = generate_split(&spec, 0).unwrap();
        for (_, labels) in &train {
            let count = labels.class_counts()[1] as f64;
            // boxes are drawn half the time; only ellipsoids with equal radii
            // are balls, so compare against whichever shape was drawn:
            // ball = 4/3 pi r^3, box = (2r)^3. One of the two must match.
            let r: f64 = 6.0;
            let ball = 4.0 / 3.0 * std::f64::consts::PI * r * r * r;
            let cube = (2.0 * r) * (2.0 * r) * (2.0 * r);
            let surf_slack = 4.0 * std::f64::consts::PI * r * r * 1.5;
            let ok = (count - ball).abs() <= surf_slack || (count - cube).abs() <= surf_slack;
            assert!(ok, "count {count} matches neither ball {ball} nor cube {cube}");
        }
    }

    #[test]
    fn infeasible_spec_rejected() {
        let spec = SynthSpec { radius_range: [30.0, 40.0], extent: [32, 32, 32], ..SynthSpec::default() };
        assert!(matches!(spec.validate(), Err(SynthError::BadSpec(_))));
        let spec = SynthSpec { noise_sigma: 0.2, num_class: 4, ..SynthSpec::default() };
        // max class sigma 0.4; gap 0.1 < 0.8
        assert!(matches!(spec.validate(), Err(SynthError::BadSpec(_))));
    }
}
