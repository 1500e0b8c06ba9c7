//! CIFAR-100 binary records and the FC100 superclass split.
//!
//! A record is 3074 bytes: coarse label, fine label, then 3072 pixel bytes
//! as three 32×32 planes (R, G, B), row-major.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{split_by_superclass, write_atomic, DatasetSplit, LabeledStore};
use crate::{Error, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD_LEN: usize = CIFAR_PIXELS + 2;

pub const FC100_TRAIN: [usize; 12] = [1, 2, 3, 4, 5, 6, 9, 10, 15, 17, 18, 19];
pub const FC100_VAL: [usize; 4] = [8, 11, 13, 16];
pub const FC100_TEST: [usize; 4] = [0, 7, 12, 14];

/// Coarse label of each fine label in the official distribution.
pub const CIFAR_FINE_TO_COARSE: [u8; 100] = [
    4, 1, 14, 8, 0, 6, 7, 7, 18, 3, 3, 14, 9, 18, 7, 11, 3, 9, 7, 11, 6, 11, 5, 10, 7, 6, 13, 15, 3, 15, 0, 11, 1, 10,
    12, 14, 16, 9, 11, 5, 5, 19, 8, 8, 15, 13, 14, 17, 18, 10, 16, 4, 17, 4, 2, 0, 17, 4, 18, 17, 10, 3, 2, 12, 12, 16,
    12, 1, 9, 19, 2, 10, 0, 1, 16, 12, 9, 13, 15, 13, 16, 19, 2, 4, 6, 19, 5, 5, 8, 19, 18, 1, 2, 15, 6, 0, 17, 8, 14,
    13,
];

/// Decoded records, still as raw bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct CifarRecords {
    pub coarse: Vec<u8>,
    pub fine: Vec<u8>,
    /// `CIFAR_PIXELS` bytes per record.
    pub pixels: Vec<u8>,
}

impl CifarRecords {
    pub fn len(&self) -> usize {
        self.fine.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fine.is_empty()
    }

    pub fn pixels_of(&self, i: usize) -> &[u8] {
        &self.pixels[i * CIFAR_PIXELS..(i + 1) * CIFAR_PIXELS]
    }
}

/// Parses a byte buffer of whole records. `base_offset` is added to the
/// offsets reported in errors.
pub fn decode_cifar(bytes: &[u8], base_offset: u64) -> Result<CifarRecords> {
    let whole = bytes.len() / CIFAR_RECORD_LEN;
    if bytes.len() % CIFAR_RECORD_LEN != 0 {
        let at = whole * CIFAR_RECORD_LEN;
        return Err(Error::Format {
            offset: base_offset + at as u64,
            message: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD_LEN} bytes",
                bytes.len() - at
            ),
        });
    }
    let mut out = CifarRecords {
        coarse: Vec::with_capacity(whole),
        fine: Vec::with_capacity(whole),
        pixels: Vec::with_capacity(whole * CIFAR_PIXELS),
    };
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        let at = base_offset + (r * CIFAR_RECORD_LEN) as u64;
        if rec[0] >= 20 {
            return Err(Error::Format { offset: at, message: format!("coarse label {} is not below 20", rec[0]) });
        }
        if rec[1] >= 100 {
            return Err(Error::Format { offset: at + 1, message: format!("fine label {} is not below 100", rec[1]) });
        }
        out.coarse.push(rec[0]);
        out.fine.push(rec[1]);
        out.pixels.extend_from_slice(&rec[2..]);
    }
    Ok(out)
}

pub fn encode_cifar_record(coarse: u8, fine: u8, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), CIFAR_PIXELS);
    let mut out = Vec::with_capacity(CIFAR_RECORD_LEN);
    out.push(coarse);
    out.push(fine);
    out.extend_from_slice(pixels);
    out
}

/// Averages non-overlapping `f×f` blocks of a `[C, side, side]` image,
/// `f = side / target`.
pub fn downsample_area(image: &[f32], channels: usize, side: usize, target: usize) -> Vec<f32> {
    assert!(target > 0 && side % target == 0, "{side} is not a multiple of {target}");
    let f = side / target;
    let inv = 1.0 / (f * f) as f32;
    let mut out = vec![0.0f32; channels * target * target];
    for c in 0..channels {
        for y in 0..side {
            for x in 0..side {
                out[(c * target + y / f) * target + x / f] += image[(c * side + y) * side + x];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CifarOptions {
    /// Output side length; must divide 32.
    pub side: usize,
    /// Standardize channels with statistics of the FC100 training classes.
    pub normalize: bool,
}

impl Default for CifarOptions {
    fn default() -> Self {
        Self { side: CIFAR_SIDE, normalize: true }
    }
}

fn record_files(dir: &Path) -> Result<Vec<PathBuf>> {
    for base in [dir.to_path_buf(), dir.join("cifar-100-binary")] {
        let train = base.join("train.bin");
        if train.is_file() {
            let test = base.join("test.bin");
            return Ok(if test.is_file() { vec![train, test] } else { vec![train] });
        }
    }
    Err(Error::io(dir.join("train.bin"), std::io::Error::new(std::io::ErrorKind::NotFound, "CIFAR-100 train.bin not found")))
}

/// Loads `train.bin` and, when present, `test.bin` from `dir` (or its
/// `cifar-100-binary` subdirectory) into one store. Pixels are scaled to
/// `[0, 1]`.
pub fn load_cifar100(dir: &Path, options: CifarOptions) -> Result<LabeledStore> {
    if options.side == 0 || CIFAR_SIDE % options.side != 0 {
        return Err(Error::InvalidConfig(format!("image side {} must divide {CIFAR_SIDE}", options.side)));
    }
    let s = options.side;
    let mut data = Vec::new();
    let mut fine = Vec::new();
    let mut coarse = Vec::new();
    for path in record_files(dir)? {
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let recs = decode_cifar(&bytes, 0).map_err(|e| match e {
            Error::Format { offset, message } => {
                Error::Format { offset, message: format!("{}: {message}", path.display()) }
            }
            other => other,
        })?;
        data.reserve(recs.len() * 3 * s * s);
        for i in 0..recs.len() {
            let img: Vec<f32> = recs.pixels_of(i).iter().map(|&b| b as f32 / 255.0).collect();
            if s == CIFAR_SIDE {
                data.extend_from_slice(&img);
            } else {
                data.extend(downsample_area(&img, 3, CIFAR_SIDE, s));
            }
        }
        fine.extend(recs.fine.iter().map(|&v| v as u16));
        coarse.extend(recs.coarse.iter().map(|&v| v as u16));
    }
    let mut store = LabeledStore::new(vec![3, s, s], data, fine, coarse)?;
    if options.normalize {
        let train: Vec<usize> =
            store.classes().into_iter().filter(|&c| store.coarse_of(c).is_some_and(|k| FC100_TRAIN.contains(&k))).collect();
        let norm = store.fit_normalization(&train)?;
        store.apply_normalization(norm)?;
    }
    Ok(store)
}

#[derive(Clone, Debug)]
pub struct Fc100Splits {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
}

impl Fc100Splits {
    pub fn all(&self) -> [&DatasetSplit; 3] {
        [&self.train, &self.val, &self.test]
    }
}

/// Partitions the store's fine classes by superclass into the FC100
/// train/val/test splits.
pub fn fc100_split(store: &Arc<LabeledStore>) -> Result<Fc100Splits> {
    let mut seen = [false; 20];
    for c in store.classes() {
        match store.coarse_of(c) {
            Some(k) if k < 20 => seen[k] = true,
            Some(k) => return Err(Error::InvalidConfig(format!("coarse label {k} is outside 0..20"))),
            None => {}
        }
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::InvalidConfig(format!("coarse label {missing} has no classes; FC100 needs all 20")));
    }
    let mut v = split_by_superclass(store, &[("train", &FC100_TRAIN), ("val", &FC100_VAL), ("test", &FC100_TEST)])?;
    let test = v.pop().expect("three splits");
    let val = v.pop().expect("three splits");
    let train = v.pop().expect("three splits");
    Ok(Fc100Splits { train, val, test })
}

struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
    amp: f64,
}

fn random_waves<R: Rng + ?Sized>(rng: &mut R, n: usize, amp: f64) -> Vec<Wave> {
    (0..n)
        .map(|_| Wave {
            fy: rng.random_range(-2.0..2.0),
            fx: rng.random_range(-2.0..2.0),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            amp: rng.random_range(0.5..1.0) * amp,
        })
        .collect()
}

struct ClassPattern {
    base: [f64; 3],
    waves: [Vec<Wave>; 3],
}

impl ClassPattern {
    fn value(&self, c: usize, y: f64, x: f64, dy: f64, dx: f64) -> f64 {
        let mut v = self.base[c];
        for w in &self.waves[c] {
            v += w.amp * (std::f64::consts::TAU * (w.fy * (y + dy) + w.fx * (x + dx)) + w.phase).cos();
        }
        v
    }
}

/// Writes a stand-in for the CIFAR-100 binary distribution into `dir`:
/// `train.bin` and `test.bin` in the exact record format, the official
/// fine-to-coarse mapping, and `train_per_class` / `test_per_class` records
/// per fine class. Each class is a smooth colour pattern (a superclass
/// component plus a class component) rendered under random translation,
/// brightness jitter and pixel noise.
pub fn standin_cifar100(dir: &Path, train_per_class: usize, test_per_class: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let supers: Vec<[Vec<Wave>; 3]> =
        (0..20).map(|_| [random_waves(&mut rng, 2, 30.0), random_waves(&mut rng, 2, 30.0), random_waves(&mut rng, 2, 30.0)]).collect();
    let patterns: Vec<ClassPattern> = (0..100)
        .map(|f| {
            let s = CIFAR_FINE_TO_COARSE[f] as usize;
            let mut waves: [Vec<Wave>; 3] = [random_waves(&mut rng, 2, 35.0), random_waves(&mut rng, 2, 35.0), random_waves(&mut rng, 2, 35.0)];
            for (c, w) in waves.iter_mut().enumerate() {
                w.extend(supers[s][c].iter().map(|sw| Wave { fy: sw.fy, fx: sw.fx, phase: sw.phase, amp: sw.amp }));
            }
            ClassPattern { base: [rng.random_range(70.0..185.0), rng.random_range(70.0..185.0), rng.random_range(70.0..185.0)], waves }
        })
        .collect();
    let noise = Normal::new(0.0, 50.0).expect("valid std");
    let side = CIFAR_SIDE as f64;
    for (name, per_class) in [("train.bin", train_per_class), ("test.bin", test_per_class)] {
        let mut bytes = Vec::with_capacity(100 * per_class * CIFAR_RECORD_LEN);
        let mut pixels = vec![0u8; CIFAR_PIXELS];
        // interleave classes the way the official files do
        for _ in 0..per_class {
            for (f, pat) in patterns.iter().enumerate() {
                let (dy, dx) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
                let bright = rng.random_range(-40.0..40.0);
                for c in 0..3 {
                    for y in 0..CIFAR_SIDE {
                        for x in 0..CIFAR_SIDE {
                            let v = pat.value(c, y as f64 / side, x as f64 / side, dy, dx) + bright + noise.sample(&mut rng);
                            pixels[(c * CIFAR_SIDE + y) * CIFAR_SIDE + x] = v.round().clamp(0.0, 255.0) as u8;
                        }
                    }
                }
                bytes.extend(encode_cifar_record(CIFAR_FINE_TO_COARSE[f], f as u8, &pixels));
            }
        }
        write_atomic(&dir.join(name), &bytes)?;
    }
    Ok(())
}
