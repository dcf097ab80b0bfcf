//! Hard evaluation metrics: per-class Dice similarity (DSC) and the 95th
//! percentile symmetric surface distance (HD95).
//!
//! Conventions, pinned so independent re-implementations agree exactly:
//! - DSC of a class absent from both prediction and ground truth is 1.
//! - A voxel is a boundary voxel of class c when it belongs to c and any of
//!   its six face neighbors does not (out-of-extent counts as "does not").
//! - HD95 pools the directed boundary distances of both directions and
//!   takes the nearest-rank 95th percentile (rank ceil(0.95 * n), 1-based).
//!   Both boundaries empty -> 0; exactly one empty -> undefined for that
//!   class, excluded from the mean and counted in the report.
//! - Distances are Euclidean in voxel units (no spacing metadata).
//!
//! Surface distances are computed with an exact squared Euclidean distance
//! transform (per-axis parabola envelopes), so runtime stays linear in the
//! voxel count per class.

use crate::volume::LabelField;

/// Aggregate segmentation quality for one (prediction, ground-truth) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mean_dsc: f64,
    pub per_class_dsc: Vec<f64>,
    /// None when every class was undefined.
    pub mean_hd95: Option<f64>,
    pub per_class_hd95: Vec<Option<f64>>,
    /// Classes whose HD95 was undefined (present on exactly one side).
    pub hd95_undefined: usize,
    /// Mean patch SSIM between the clean and perturbed volume, when the
    /// evaluation involved an attack.
    pub mean_ssim_vs_clean: Option<f64>,
    pub ssim_window: Option<usize>,
}

impl MetricsReport {
    pub fn compute(pred: &LabelField, gt: &LabelField) -> MetricsReport {
        let (per_class_dsc, mean_dsc) = dsc(pred, gt);
        let (per_class_hd95, mean_hd95, hd95_undefined) = hd95(pred, gt);
        MetricsReport {
            mean_dsc,
            per_class_dsc,
            mean_hd95,
            per_class_hd95,
            hd95_undefined,
            mean_ssim_vs_clean: None,
            ssim_window: None,
        }
    }

    pub fn with_ssim(mut self, mean_ssim: f64, window: usize) -> MetricsReport {
        self.mean_ssim_vs_clean = Some(mean_ssim);
        self.ssim_window = Some(window);
        self
    }
}

fn check_pair(pred: &LabelField, gt: &LabelField) {
    assert_eq!(pred.extent(), gt.extent(), "metric extent mismatch");
    assert_eq!(pred.num_class(), gt.num_class(), "metric class count mismatch");
}

/// Per-class hard Dice `2|P inter G| / (|P| + |G|)` and its mean over all
/// classes, background included.
pub fn dsc(pred: &LabelField, gt: &LabelField) -> (Vec<f64>, f64) {
    check_pair(pred, gt);
    let c = pred.num_class();
    let mut inter = vec![0usize; c];
    let mut pc = vec![0usize; c];
    let mut gc = vec![0usize; c];
    for (&p, &g) in pred.classes().iter().zip(gt.classes()) {
        pc[p as usize] += 1;
        gc[g as usize] += 1;
        if p == g {
            inter[p as usize] += 1;
        }
    }
    let per: Vec<f64> = (0..c)
        .map(|k| {
            if pc[k] + gc[k] == 0 {
                1.0
            } else {
                2.0 * inter[k] as f64 / (pc[k] + gc[k]) as f64
            }
        })
        .collect();
    let mean = per.iter().sum::<f64>() / c as f64;
    (per, mean)
}

/// Per-class HD95, its mean over defined classes, and the undefined count.
pub fn hd95(pred: &LabelField, gt: &LabelField) -> (Vec<Option<f64>>, Option<f64>, usize) {
    check_pair(pred, gt);
    let c = pred.num_class();
    let extent = pred.extent();
    let mut per: Vec<Option<f64>> = Vec::with_capacity(c);
    for class in 0..c {
        let bp = boundary_voxels(pred, class as u8);
        let bg = boundary_voxels(gt, class as u8);
        per.push(match (bp.is_empty(), bg.is_empty()) {
            (true, true) => Some(0.0),
            (true, false) | (false, true) => None,
            (false, false) => Some(hd95_from_boundaries(&bp, &bg, extent)),
        });
    }
    let defined: Vec<f64> = per.iter().filter_map(|v| *v).collect();
    let mean = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    let undefined = per.iter().filter(|v| v.is_none()).count();
    (per, mean, undefined)
}

/// Flat indices of the boundary voxels of one class.
pub fn boundary_voxels(labels: &LabelField, class: u8) -> Vec<usize> {
    let [h, w, d] = labels.extent();
    let cls = labels.classes();
    let mut out = Vec::new();
    for ih in 0..h {
        for iw in 0..w {
            for id in 0..d {
                let idx = (ih * w + iw) * d + id;
                if cls[idx] != class {
                    continue;
                }
                let inside = ih > 0
                    && cls[idx - w * d] == class
                    && ih + 1 < h
                    && cls[idx + w * d] == class
                    && iw > 0
                    && cls[idx - d] == class
                    && iw + 1 < w
                    && cls[idx + d] == class
                    && id > 0
                    && cls[idx - 1] == class
                    && id + 1 < d
                    && cls[idx + 1] == class;
                if !inside {
                    out.push(idx);
                }
            }
        }
    }
    out
}

fn hd95_from_boundaries(a: &[usize], b: &[usize], extent: [usize; 3]) -> f64 {
    let dist_b = edt_sq_from_set(b, extent);
    let dist_a = edt_sq_from_set(a, extent);
    let mut pooled: Vec<f64> = Vec::with_capacity(a.len() + b.len());
    pooled.extend(a.iter().map(|&i| dist_b[i].sqrt()));
    pooled.extend(b.iter().map(|&i| dist_a[i].sqrt()));
    percentile_nearest_rank(&mut pooled, 0.95)
}

/// Nearest-rank percentile: rank = ceil(p * n), 1-based. Sorts in place.
pub fn percentile_nearest_rank(values: &mut [f64], p: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = (p * values.len() as f64).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1]
}

/// Exact squared Euclidean distance transform from a voxel set, via
/// per-axis lower parabola envelopes.
pub fn edt_sq_from_set(set: &[usize], extent: [usize; 3]) -> Vec<f64> {
    let [h, w, d] = extent;
    let n = h * w * d;
    let mut f = vec![f64::INFINITY; n];
    for &i in set {
        f[i] = 0.0;
    }
    // pass along D (contiguous lines)
    let mut scratch = Scratch::new(h.max(w).max(d));
    for line in 0..h * w {
        let start = line * d;
        scratch.transform_contiguous(&mut f[start..start + d]);
    }
    // pass along W (stride d)
    for ih in 0..h {
        for id in 0..d {
            scratch.transform_strided(&mut f, ih * w * d + id, d, w);
        }
    }
    // pass along H (stride w*d)
    for iw in 0..w {
        for id in 0..d {
            scratch.transform_strided(&mut f, iw * d + id, w * d, h);
        }
    }
    f
}

/// Reusable buffers for the 1-D distance transform.
struct Scratch {
    buf: Vec<f64>,
    sites: Vec<usize>,
    bounds: Vec<f64>,
    envelope_len: usize,
    cursor: usize,
}

impl Scratch {
    fn new(max_len: usize) -> Scratch {
        Scratch {
            buf: vec![0.0; max_len],
            sites: vec![0; max_len],
            bounds: vec![0.0; max_len + 1],
            envelope_len: 0,
            cursor: 0,
        }
    }

    fn transform_contiguous(&mut self, f: &mut [f64]) {
        let n = f.len();
        self.buf[..n].copy_from_slice(f);
        self.dt1d(n);
        let out = &mut f[..n];
        for (q, o) in out.iter_mut().enumerate() {
            *o = self.eval_at(q);
        }
    }

    fn transform_strided(&mut self, f: &mut [f64], start: usize, stride: usize, n: usize) {
        for i in 0..n {
            self.buf[i] = f[start + i * stride];
        }
        self.dt1d(n);
        for q in 0..n {
            f[start + q * stride] = self.eval_at(q);
        }
    }

    /// Builds the lower envelope of parabolas q -> (q - i)^2 + buf[i].
    fn dt1d(&mut self, n: usize) {
        let f = &self.buf;
        let v = &mut self.sites;
        let z = &mut self.bounds;
        let mut k = 0usize;
        let mut started = false;
        for q in 0..n {
            if f[q] == f64::INFINITY {
                continue;
            }
            if !started {
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                started = true;
                continue;
            }
            loop {
                let p = v[k];
                let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                    / (2 * q - 2 * p) as f64;
                if s <= z[k] {
                    if k == 0 {
                        v[0] = q;
                        z[0] = f64::NEG_INFINITY;
                        z[1] = f64::INFINITY;
                        break;
                    }
                    k -= 1;
                } else {
                    k += 1;
                    v[k] = q;
                    z[k] = s;
                    z[k + 1] = f64::INFINITY;
                    break;
                }
            }
        }
        self.envelope_len = if started { k + 1 } else { 0 };
        self.cursor = 0;
    }

    fn eval_at(&mut self, q: usize) -> f64 {
        if self.envelope_len == 0 {
            return f64::INFINITY;
        }
        while self.cursor + 1 < self.envelope_len && self.bounds[self.cursor + 1] < q as f64 {
            self.cursor += 1;
        }
        let p = self.sites[self.cursor];
        let dq = q as f64 - p as f64;
        dq * dq + self.buf[p]
    }
}
