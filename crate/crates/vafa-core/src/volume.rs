//! Dense single-channel 3D volumes, per-voxel label fields, and the
//! non-overlapping cubic patch grid used by the frequency perturbation
//! pipeline.
//!
//! Axis order is (H, W, D) everywhere, row-major with D fastest. Volumes
//! whose extent is not divisible by the patch side are replicate-padded at
//! the high end of each axis before splitting (zero padding would inject
//! artificial high-frequency energy into border patches); `merge` crops the
//! padding away again, so split-then-merge is bit-identical on the original
//! extent.

use crate::error::VolumeError;
use crate::tensor::Tensor;

/// Single-channel volumetric sample with a declared intensity range.
/// The canonical internal range is [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    data: Tensor,
    lo: f64,
    hi: f64,
}

impl Volume {
    pub fn new(data: Tensor, lo: f64, hi: f64) -> Result<Volume, VolumeError> {
        if data.rank() != 3 {
            return Err(VolumeError::BadShape(format!(
                "volume must be rank 3, got shape {:?}",
                data.shape()
            )));
        }
        if data.shape().iter().any(|&n| n == 0) {
            return Err(VolumeError::BadShape("every axis extent must be >= 1".into()));
        }
        if lo >= hi {
            return Err(VolumeError::BadShape(format!("intensity range [{lo}, {hi}] is empty")));
        }
        if let Some(index) = data.data().iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite { index });
        }
        Ok(Volume { data, lo, hi })
    }

    /// Canonical-range volume over [0, 1].
    pub fn from_tensor(data: Tensor) -> Result<Volume, VolumeError> {
        Volume::new(data, 0.0, 1.0)
    }

    pub fn extent(&self) -> [usize; 3] {
        [self.data.shape()[0], self.data.shape()[1], self.data.shape()[2]]
    }

    pub fn intensity_range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Every voxel clamped into [lo, hi]. Idempotent.
    pub fn clamp(&self, lo: f64, hi: f64) -> Volume {
        assert!(lo < hi, "clamp range [{lo}, {hi}] is empty");
        Volume { data: self.data.map(|v| v.clamp(lo, hi)), lo, hi }
    }
}

/// Per-voxel class labels plus a derived one-hot view.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelField {
    classes: Vec<u8>,
    extent: [usize; 3],
    num_class: usize,
}

impl LabelField {
    pub fn new(classes: Vec<u8>, extent: [usize; 3], num_class: usize) -> Result<LabelField, VolumeError> {
        if num_class < 2 || num_class > 256 {
            return Err(VolumeError::BadShape(format!("num_class {num_class} outside [2, 256]")));
        }
        if extent.iter().any(|&n| n == 0) {
            return Err(VolumeError::BadShape("every axis extent must be >= 1".into()));
        }
        let voxels = extent[0] * extent[1] * extent[2];
        if classes.len() != voxels {
            return Err(VolumeError::BadShape(format!(
                "label payload {} != extent product {voxels}",
                classes.len()
            )));
        }
        if let Some(index) = classes.iter().position(|&c| (c as usize) >= num_class) {
            return Err(VolumeError::BadLabel {
                index,
                value: classes[index] as u32,
                num_class,
            });
        }
        Ok(LabelField { classes, extent, num_class })
    }

    pub fn extent(&self) -> [usize; 3] {
        self.extent
    }

    pub fn num_class(&self) -> usize {
        self.num_class
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    /// One-hot view of shape (NumClass, H, W, D); sums to exactly 1 over the
    /// class axis at every voxel.
    pub fn one_hot(&self) -> Tensor {
        let voxels = self.classes.len();
        let mut data = vec![0.0; self.num_class * voxels];
        for (i, &c) in self.classes.iter().enumerate() {
            data[c as usize * voxels + i] = 1.0;
        }
        Tensor::from_vec(
            &[self.num_class, self.extent[0], self.extent[1], self.extent[2]],
            data,
        )
    }

    /// Voxel count per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_class];
        for &c in &self.classes {
            counts[c as usize] += 1;
        }
        counts
    }
}

/// Non-overlapping tiling of a (possibly padded) volume by cubic patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    side: usize,
    orig: [usize; 3],
    padded: [usize; 3],
    tiles: [usize; 3],
}

impl PatchGrid {
    pub fn new(orig: [usize; 3], side: usize) -> Result<PatchGrid, VolumeError> {
        if side < 2 {
            return Err(VolumeError::BadShape(format!("patch side {side} must be >= 2")));
        }
        let tiles = [orig[0].div_ceil(side), orig[1].div_ceil(side), orig[2].div_ceil(side)];
        let padded = [tiles[0] * side, tiles[1] * side, tiles[2] * side];
        Ok(PatchGrid { side, orig, padded, tiles })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn patch_shape(&self) -> [usize; 3] {
        [self.side; 3]
    }

    pub fn original_extent(&self) -> [usize; 3] {
        self.orig
    }

    pub fn padded_extent(&self) -> [usize; 3] {
        self.padded
    }

    /// Voxels of replicate padding added at the high end of each axis.
    pub fn padding(&self) -> [usize; 3] {
        [self.padded[0] - self.orig[0], self.padded[1] - self.orig[1], self.padded[2] - self.orig[2]]
    }

    pub fn num_patches(&self) -> usize {
        self.tiles[0] * self.tiles[1] * self.tiles[2]
    }

    /// Origin offsets of each patch within the padded volume, in row-major
    /// tile order (H-major, then W, then D).
    pub fn offsets(&self) -> Vec<[usize; 3]> {
        let mut out = Vec::with_capacity(self.num_patches());
        for th in 0..self.tiles[0] {
            for tw in 0..self.tiles[1] {
                for td in 0..self.tiles[2] {
                    out.push([th * self.side, tw * self.side, td * self.side]);
                }
            }
        }
        out
    }
}

/// Replicate-pads a rank-3 tensor at the high end of each axis.
pub fn pad_replicate(t: &Tensor, padded: [usize; 3]) -> Tensor {
    let [h, w, d] = [t.shape()[0], t.shape()[1], t.shape()[2]];
    let [ph, pw, pd] = padded;
    assert!(ph >= h && pw >= w && pd >= d);
    if [h, w, d] == padded {
        return t.clone();
    }
    let src = t.data();
    let mut out = vec![0.0; ph * pw * pd];
    for ih in 0..ph {
        let sh = ih.min(h - 1);
        for iw in 0..pw {
            let sw = iw.min(w - 1);
            let src_row = &src[(sh * w + sw) * d..(sh * w + sw) * d + d];
            let dst_row = &mut out[(ih * pw + iw) * pd..(ih * pw + iw) * pd + pd];
            dst_row[..d].copy_from_slice(src_row);
            for id in d..pd {
                dst_row[id] = src_row[d - 1];
            }
        }
    }
    Tensor::from_vec(&[ph, pw, pd], out)
}

/// Crops a rank-3 tensor to `extent` (anchored at the origin).
pub fn crop(t: &Tensor, extent: [usize; 3]) -> Tensor {
    let [ph, pw, pd] = [t.shape()[0], t.shape()[1], t.shape()[2]];
    let [h, w, d] = extent;
    assert!(h <= ph && w <= pw && d <= pd);
    if [ph, pw, pd] == extent {
        return t.clone();
    }
    let src = t.data();
    let mut out = Vec::with_capacity(h * w * d);
    for ih in 0..h {
        for iw in 0..w {
            let base = (ih * pw + iw) * pd;
            out.extend_from_slice(&src[base..base + d]);
        }
    }
    Tensor::from_vec(&[h, w, d], out)
}

/// Embeds a rank-3 tensor at the origin of a zero tensor of `padded` extent.
pub fn embed_zeros(t: &Tensor, padded: [usize; 3]) -> Tensor {
    let [h, w, d] = [t.shape()[0], t.shape()[1], t.shape()[2]];
    let [ph, pw, pd] = padded;
    assert!(h <= ph && w <= pw && d <= pd);
    let mut out = Tensor::zeros(&[ph, pw, pd]);
    {
        let dst = out.data_mut();
        let src = t.data();
        for ih in 0..h {
            for iw in 0..w {
                let s = (ih * w + iw) * d;
                let p = (ih * pw + iw) * pd;
                dst[p..p + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}

pub fn extract_block(t: &Tensor, offset: [usize; 3], side: usize) -> Tensor {
    let [_, w, d] = [t.shape()[0], t.shape()[1], t.shape()[2]];
    let mut out = Vec::with_capacity(side * side * side);
    for ih in 0..side {
        for iw in 0..side {
            let base = ((offset[0] + ih) * w + offset[1] + iw) * d + offset[2];
            out.extend_from_slice(&t.data()[base..base + side]);
        }
    }
    Tensor::from_vec(&[side, side, side], out)
}

pub fn place_block(t: &mut Tensor, offset: [usize; 3], block: &Tensor) {
    let [_, w, d] = [t.shape()[0], t.shape()[1], t.shape()[2]];
    let side = block.shape()[0];
    for ih in 0..side {
        for iw in 0..side {
            let dst = ((offset[0] + ih) * w + offset[1] + iw) * d + offset[2];
            let src = (ih * side + iw) * side;
            t.data_mut()[dst..dst + side].copy_from_slice(&block.data()[src..src + side]);
        }
    }
}

/// Splits a volume into cubic patches tiling the replicate-padded extent.
/// Patch order matches `PatchGrid::offsets`.
pub fn split(v: &Volume, patch_shape: (usize, usize, usize)) -> Result<(Vec<Tensor>, PatchGrid), VolumeError> {
    let (h, w, d) = patch_shape;
    if h != w || w != d {
        return Err(VolumeError::BadShape(format!(
            "patch shape ({h}, {w}, {d}) must be cubic"
        )));
    }
    let grid = PatchGrid::new(v.extent(), h)?;
    let padded = pad_replicate(v.tensor(), grid.padded_extent());
    let patches = grid
        .offsets()
        .iter()
        .map(|&off| extract_block(&padded, off, grid.side()))
        .collect();
    Ok((patches, grid))
}

/// Splits an arbitrary rank-3 tensor with an existing grid (padding applied
/// the same way as `split`).
pub fn split_tensor(t: &Tensor, grid: &PatchGrid) -> Vec<Tensor> {
    let padded = pad_replicate(t, grid.padded_extent());
    grid.offsets().iter().map(|&off| extract_block(&padded, off, grid.side())).collect()
}

/// Reassembles patches into a tensor of the grid's original extent
/// (padding cropped away).
pub fn merge(patches: &[Tensor], grid: &PatchGrid) -> Result<Tensor, VolumeError> {
    if patches.len() != grid.num_patches() {
        return Err(VolumeError::GridMismatch(format!(
            "{} patches for a grid of {}",
            patches.len(),
            grid.num_patches()
        )));
    }
    let shape = grid.patch_shape();
    for (i, p) in patches.iter().enumerate() {
        if p.shape() != shape {
            return Err(VolumeError::GridMismatch(format!(
                "patch {i} has shape {:?}, grid expects {:?}",
                p.shape(),
                shape
            )));
        }
    }
    let mut padded = Tensor::zeros(&grid.padded_extent());
    for (off, p) in grid.offsets().iter().zip(patches) {
        place_block(&mut padded, *off, p);
    }
    Ok(crop(&padded, grid.original_extent()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_volume(rng: &mut Rng, extent: [usize; 3]) -> Volume {
        let n = extent[0] * extent[1] * extent[2];
        let data: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        Volume::from_tensor(Tensor::from_vec(&extent, data)).unwrap()
    }

    #[test]
    fn split_exact_tiling_counts() {
        let mut rng = Rng::new(0);
        let v = random_volume(&mut rng, [64, 64, 64]);
        let (patches, grid) = split(&v, (32, 32, 32)).unwrap();
        assert_eq!(patches.len(), 8);
        assert_eq!(grid.padding(), [0, 0, 0]);
        // tiling partition: patch voxel counts sum to the padded volume
        let total: usize = patches.iter().map(|p| p.len()).sum();
        let [ph, pw, pd] = grid.padded_extent();
        assert_eq!(total, ph * pw * pd);
    }

    #[test]
    fn split_pads_non_divisible() {
        let mut rng = Rng::new(1);
        let v = random_volume(&mut rng, [48, 48, 48]);
        let (patches, grid) = split(&v, (32, 32, 32)).unwrap();
        assert_eq!(grid.padded_extent(), [64, 64, 64]);
        assert_eq!(grid.padding(), [16, 16, 16]);
        assert_eq!(patches.len(), 8);
    }

    #[test]
    fn non_cubic_patch_rejected() {
        let mut rng = Rng::new(2);
        let v = random_volume(&mut rng, [16, 16, 16]);
        assert!(split(&v, (8, 8, 4)).is_err());
        assert!(split(&v, (1, 1, 1)).is_err());
    }

    #[test]
    fn merge_round_trip_identity() {
        let mut rng = Rng::new(3);
        for &extent in &[[33usize, 33, 33], [32, 32, 32], [20, 36, 40]] {
            let v = random_volume(&mut rng, extent);
            let (patches, grid) = split(&v, (32, 32, 32)).unwrap();
            let back = merge(&patches, &grid).unwrap();
            assert_eq!(back, *v.tensor(), "round trip differs for {extent:?}");
        }
    }

    #[test]
    fn merge_single_patch_is_identity() {
        let mut rng = Rng::new(4);
        let v = random_volume(&mut rng, [16, 16, 16]);
        let (patches, grid) = split(&v, (16, 16, 16)).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(merge(&patches, &grid).unwrap(), *v.tensor());
    }

    #[test]
    fn merge_patch_count_checked() {
        let mut rng = Rng::new(5);
        let v = random_volume(&mut rng, [64, 64, 64]);
        let (mut patches, grid) = split(&v, (32, 32, 32)).unwrap();
        patches.pop();
        assert!(merge(&patches, &grid).is_err());
    }

    #[test]
    fn perturbing_one_patch_leaves_others_bit_exact() {
        let mut rng = Rng::new(6);
        let v = random_volume(&mut rng, [64, 64, 64]);
        let (mut patches, grid) = split(&v, (32, 32, 32)).unwrap();
        let original = v.tensor().clone();
        patches[3] = patches[3].map(|x| x + 0.25);
        let merged = merge(&patches, &grid).unwrap();
        // every voxel outside patch 3 must be bit-identical
        let off = grid.offsets()[3];
        for ih in 0..64 {
            for iw in 0..64 {
                for id in 0..64 {
                    let inside = (off[0]..off[0] + 32).contains(&ih)
                        && (off[1]..off[1] + 32).contains(&iw)
                        && (off[2]..off[2] + 32).contains(&id);
                    let a = merged.at(&[ih, iw, id]);
                    let b = original.at(&[ih, iw, id]);
                    if inside {
                        assert_eq!(a, b + 0.25);
                    } else {
                        assert_eq!(a.to_bits(), b.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn split_merge_round_trip_random_shapes() {
        // 200 random extents across patch sizes {8, 16, 32}
        let mut rng = Rng::new(7);
        for trial in 0..200 {
            let side = [8usize, 16, 32][trial % 3];
            let extent = [
                1 + rng.below(40),
                1 + rng.below(40),
                1 + rng.below(40),
            ];
            let v = random_volume(&mut rng, extent);
            let (patches, grid) = split(&v, (side, side, side)).unwrap();
            let back = merge(&patches, &grid).unwrap();
            assert_eq!(back, *v.tensor(), "trial {trial} extent {extent:?} side {side}");
        }
    }

    #[test]
    fn clamp_contract() {
        let t = Tensor::from_vec(&[1, 1, 3], vec![-0.5, 0.5, 1.2]);
        let v = Volume::new(t, -1.0, 2.0).unwrap();
        let c = v.clamp(0.0, 1.0);
        assert_eq!(c.tensor().data(), &[0.0, 0.5, 1.0]);
        // idempotent
        assert_eq!(c.clamp(0.0, 1.0), c);
        // all-zeros unchanged
        let z = Volume::from_tensor(Tensor::zeros(&[2, 2, 2])).unwrap();
        assert_eq!(z.clamp(0.0, 1.0).tensor().data(), Tensor::zeros(&[2, 2, 2]).data());
    }

    #[test]
    fn volume_rejects_non_finite() {
        let t = Tensor::from_vec(&[1, 1, 2], vec![0.0, f64::NAN]);
        assert!(matches!(Volume::from_tensor(t), Err(VolumeError::NonFinite { index: 1 })));
    }

    #[test]
    fn one_hot_sums_to_one_and_argmax_matches() {
        let mut rng = Rng::new(8);
        let extent = [5, 4, 3];
        let n = 60;
        let classes: Vec<u8> = (0..n).map(|_| rng.below(4) as u8).collect();
        let lf = LabelField::new(classes.clone(), extent, 4).unwrap();
        let oh = lf.one_hot();
        for i in 0..n {
            let mut sum = 0.0;
            let mut argmax = 0;
            let mut best = f64::NEG_INFINITY;
            for c in 0..4 {
                let v = oh.data()[c * n + i];
                sum += v;
                if v > best {
                    best = v;
                    argmax = c;
                }
            }
            assert_eq!(sum, 1.0);
            assert_eq!(argmax as u8, classes[i]);
        }
    }

    #[test]
    fn label_field_rejects_out_of_range() {
        let r = LabelField::new(vec![0, 1, 5, 0], [1, 2, 2], 4);
        assert!(matches!(r, Err(VolumeError::BadLabel { index: 2, value: 5, .. })));
    }
}
