//! Minimal bit-exact binary format for volumes with optional labels, plus
//! dataset directory helpers (train/ and test/ subdirectories and a
//! checksum manifest).
//!
//! Layout (little endian):
//!
//! ```text
//! offset  0  magic   "VSEGVOL\0"
//!         8  version u16 (= 1)
//!        10  dtype   u8  (0 = f64 LE)
//!        11  flags   u8  (bit 0: label payload present)
//!        12  axis order, 3 bytes ("HWD")
//!        15  reserved u8 (= 0)
//!        16  extent  3 x u32
//!        28  intensity lo, hi: 2 x f64
//!        44  num_class u16 (0 when no labels)
//!        46  voxel payload  H*W*D x f64
//!         +  label payload  H*W*D x u8 (if flags bit 0)
//! ```

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::FileError;
use crate::rng::fnv1a64;
use crate::tensor::Tensor;
use crate::volume::{LabelField, Volume};

const MAGIC: &[u8; 8] = b"VSEGVOL\0";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 46;

/// A volume plus optional per-voxel labels, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeFile {
    pub volume: Volume,
    pub labels: Option<LabelField>,
}

pub fn save(path: &Path, file: &VolumeFile) -> Result<(), FileError> {
    let [h, w, d] = file.volume.extent();
    if let Some(l) = &file.labels {
        assert_eq!(l.extent(), file.volume.extent(), "label extent mismatch");
    }
    let voxels = h * w * d;
    let mut out: Vec<u8> =
        Vec::with_capacity(HEADER_LEN + voxels * 8 + file.labels.is_some() as usize * voxels);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(0); // dtype f64
    out.push(file.labels.is_some() as u8);
    out.extend_from_slice(b"HWD");
    out.push(0);
    for n in [h, w, d] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    let (lo, hi) = file.volume.intensity_range();
    out.extend_from_slice(&lo.to_le_bytes());
    out.extend_from_slice(&hi.to_le_bytes());
    out.extend_from_slice(
        &(file.labels.as_ref().map(|l| l.num_class() as u16).unwrap_or(0)).to_le_bytes(),
    );
    debug_assert_eq!(out.len(), HEADER_LEN);
    for v in file.volume.tensor().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(l) = &file.labels {
        out.extend_from_slice(l.classes());
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<VolumeFile, FileError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse(&bytes)
}

pub fn parse(bytes: &[u8]) -> Result<VolumeFile, FileError> {
    // header first; the magic is checked before any payload is touched
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(FileError::BadMagic {
            offset: 0,
            expected: MAGIC,
            got: bytes.get(..8).unwrap_or(bytes).to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(FileError::Truncated {
            offset: bytes.len(),
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != VERSION {
        return Err(FileError::BadVersion { offset: 8, got: version });
    }
    let dtype = bytes[10];
    if dtype != 0 {
        return Err(FileError::Corrupt { offset: 10, what: format!("unknown dtype {dtype}") });
    }
    let has_labels = match bytes[11] {
        0 => false,
        1 => true,
        f => return Err(FileError::Corrupt { offset: 11, what: format!("bad flags {f}") }),
    };
    if &bytes[12..15] != b"HWD" {
        return Err(FileError::Corrupt {
            offset: 12,
            what: format!("unsupported axis order {:?}", &bytes[12..15]),
        });
    }
    let mut extent = [0usize; 3];
    for (a, e) in extent.iter_mut().enumerate() {
        let off = 16 + 4 * a;
        *e = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if *e == 0 {
            return Err(FileError::Corrupt { offset: off, what: "zero extent".into() });
        }
    }
    let lo = f64::from_le_bytes(bytes[28..36].try_into().unwrap());
    let hi = f64::from_le_bytes(bytes[36..44].try_into().unwrap());
    let num_class = u16::from_le_bytes(bytes[44..46].try_into().unwrap()) as usize;

    let voxels = extent[0] * extent[1] * extent[2];
    let want = HEADER_LEN + voxels * 8 + if has_labels { voxels } else { 0 };
    if bytes.len() != want {
        return Err(FileError::Truncated {
            offset: HEADER_LEN.min(bytes.len()),
            expected: want,
            actual: bytes.len(),
        });
    }
    let data: Vec<f64> = bytes[HEADER_LEN..HEADER_LEN + voxels * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let volume = Volume::new(Tensor::from_vec(&extent, data), lo, hi).map_err(|e| {
        FileError::Corrupt { offset: HEADER_LEN, what: e.to_string() }
    })?;
    let labels = if has_labels {
        let payload = bytes[HEADER_LEN + voxels * 8..].to_vec();
        Some(LabelField::new(payload, extent, num_class).map_err(|e| FileError::Corrupt {
            offset: HEADER_LEN + voxels * 8,
            what: e.to_string(),
        })?)
    } else {
        None
    };
    Ok(VolumeFile { volume, labels })
}

pub fn checksum(path: &Path) -> Result<u64, FileError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(fnv1a64(&bytes))
}

/// Writes a dataset as `train/sample_NNN.vvol`, `test/sample_NNN.vvol`,
/// and a `manifest.txt` of `path<TAB>fnv64` lines (sorted by path).
pub fn save_dataset(
    dir: &Path,
    train: &[(Volume, LabelField)],
    test: &[(Volume, LabelField)],
) -> Result<(), FileError> {
    let mut entries: Vec<(String, u64)> = Vec::new();
    for (sub, samples) in [("train", train), ("test", test)] {
        let subdir = dir.join(sub);
        std::fs::create_dir_all(&subdir)?;
        for (i, (v, l)) in samples.iter().enumerate() {
            let name = format!("{sub}/sample_{i:03}.vvol");
            let path = dir.join(&name);
            save(&path, &VolumeFile { volume: v.clone(), labels: Some(l.clone()) })?;
            entries.push((name, checksum(&path)?));
        }
    }
    entries.sort();
    let mut manifest = String::new();
    for (name, sum) in &entries {
        manifest.push_str(&format!("{name}\t{sum:016x}\n"));
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Loads one split ("train" or "test") of a dataset directory, in file
/// name order. Every sample must carry labels.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<(Volume, LabelField)>, FileError> {
    let subdir = dir.join(split);
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&subdir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "vvol").unwrap_or(false))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let f = load(&p)?;
        let labels = f.labels.ok_or_else(|| FileError::Corrupt {
            offset: 11,
            what: format!("{} has no label payload", p.display()),
        })?;
        out.push((f.volume, labels));
    }
    Ok(out)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<(String, u64)>, FileError> {
    let text = std::fs::read_to_string(dir.join("manifest.txt"))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (name, sum) = line.split_once('\t').ok_or_else(|| FileError::Corrupt {
            offset: lineno,
            what: format!("manifest line {lineno} has no tab separator"),
        })?;
        let sum = u64::from_str_radix(sum, 16).map_err(|_| FileError::Corrupt {
            offset: lineno,
            what: format!("manifest line {lineno} has a bad checksum"),
        })?;
        out.push((name.to_string(), sum));
    }
    Ok(out)
}
