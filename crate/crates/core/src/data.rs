//! CIFAR-10/100 binary ingestion, preprocessing and shuffled batching.

use std::fs;
use std::path::Path;

use ecvit_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const SIDE: usize = 32;
pub const PIXELS: usize = 3 * SIDE * SIDE;
pub const MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
/// Reflection padding before the random crop.
pub const CROP_PAD: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Cifar10,
    Cifar100,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Variant {
    pub fn record_len(self) -> usize {
        match self {
            Variant::Cifar10 => 1 + PIXELS,
            Variant::Cifar100 => 2 + PIXELS,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Variant::Cifar10 => 10,
            Variant::Cifar100 => 100,
        }
    }

    /// File names of the standard distribution.
    pub fn files(self, split: Split) -> Vec<String> {
        match (self, split) {
            (Variant::Cifar10, Split::Train) => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            (Variant::Cifar10, Split::Test) => vec!["test_batch.bin".into()],
            (Variant::Cifar100, Split::Train) => vec!["train.bin".into()],
            (Variant::Cifar100, Split::Test) => vec!["test.bin".into()],
        }
    }
}

/// Raw images (`u8`, channel-planar 3x32x32 per record) with labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub variant: Variant,
    pub split: Split,
    pub pixels: Vec<u8>,
    /// Fine labels for CIFAR-100.
    pub labels: Vec<u8>,
    /// CIFAR-100 coarse labels, kept for byte-exact rewriting.
    pub coarse: Option<Vec<u8>>,
    /// Source file names and their record counts, in load order.
    pub files: Vec<(String, usize)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.variant.num_classes()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * PIXELS..(i + 1) * PIXELS]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// Decodes records from one file's bytes.
    pub fn parse(variant: Variant, split: Split, name: &str, bytes: &[u8]) -> Result<Self> {
        let rec = variant.record_len();
        if bytes.is_empty() || !bytes.len().is_multiple_of(rec) {
            return Err(Error::Format {
                path: name.into(),
                expected: format!("a positive multiple of {rec} bytes"),
                actual: bytes.len() as u64,
            });
        }
        let n = bytes.len() / rec;
        let mut ds = Dataset {
            variant,
            split,
            pixels: Vec::with_capacity(n * PIXELS),
            labels: Vec::with_capacity(n),
            coarse: (variant == Variant::Cifar100).then(|| Vec::with_capacity(n)),
            files: vec![(name.to_string(), n)],
        };
        for (i, r) in bytes.chunks_exact(rec).enumerate() {
            let (head, px) = r.split_at(rec - PIXELS);
            let label = *head.last().expect("label byte");
            if label as usize >= variant.num_classes() {
                return Err(Error::Format {
                    path: name.into(),
                    expected: format!("labels below {} (record {i})", variant.num_classes()),
                    actual: label as u64,
                });
            }
            if let Some(c) = &mut ds.coarse {
                c.push(head[0]);
            }
            ds.labels.push(label);
            ds.pixels.extend_from_slice(px);
        }
        Ok(ds)
    }

    /// Encodes records `range` back to the binary format.
    pub fn encode(&self, range: std::ops::Range<usize>) -> Vec<u8> {
        let mut out = Vec::with_capacity(range.len() * self.variant.record_len());
        for i in range {
            if let Some(c) = &self.coarse {
                out.push(c[i]);
            }
            out.push(self.labels[i]);
            out.extend_from_slice(self.image(i));
        }
        out
    }

    fn append(&mut self, other: Dataset) {
        self.pixels.extend(other.pixels);
        self.labels.extend(other.labels);
        if let (Some(a), Some(b)) = (&mut self.coarse, other.coarse) {
            a.extend(b);
        }
        self.files.extend(other.files);
    }

    /// Writes the dataset with the same file layout it was loaded from.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut start = 0;
        for (name, n) in &self.files {
            let path = dir.join(name);
            fs::write(&path, self.encode(start..start + n)).map_err(|e| Error::io(&path, e))?;
            start += n;
        }
        Ok(())
    }

    /// The records at `indices`, as a single-file dataset.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut ds = Dataset {
            variant: self.variant,
            split: self.split,
            pixels: Vec::with_capacity(indices.len() * PIXELS),
            labels: Vec::with_capacity(indices.len()),
            coarse: self.coarse.as_ref().map(|_| Vec::new()),
            files: vec![("subset.bin".into(), indices.len())],
        };
        for &i in indices {
            ds.pixels.extend_from_slice(self.image(i));
            ds.labels.push(self.labels[i]);
            if let (Some(dst), Some(src)) = (&mut ds.coarse, &self.coarse) {
                dst.push(src[i]);
            }
        }
        ds
    }

    /// Per-channel mean and population standard deviation of pixels in `[0,1]`.
    pub fn channel_stats(&self) -> ([f64; 3], [f64; 3]) {
        let mut sum = [0u64; 3];
        let mut sq = [0u64; 3];
        for img in self.pixels.chunks_exact(PIXELS) {
            for (c, plane) in img.chunks_exact(SIDE * SIDE).enumerate() {
                for &p in plane {
                    sum[c] += p as u64;
                    sq[c] += (p as u64) * (p as u64);
                }
            }
        }
        let count = (self.len() * SIDE * SIDE) as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            let m = sum[c] as f64 / count;
            mean[c] = m / 255.0;
            std[c] = (sq[c] as f64 / count - m * m).max(0.0).sqrt() / 255.0;
        }
        (mean, std)
    }
}

/// Loads every file of a split from a standard CIFAR directory.
pub fn load_cifar(dir: &Path, variant: Variant, split: Split) -> Result<Dataset> {
    let mut out: Option<Dataset> = None;
    for name in variant.files(split) {
        let path = dir.join(&name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let part = Dataset::parse(variant, split, &name, &bytes).map_err(|e| match e {
            Error::Format { expected, actual, .. } => Error::Format {
                path: path.clone(),
                expected,
                actual,
            },
            e => e,
        })?;
        match &mut out {
            Some(ds) => ds.append(part),
            None => out = Some(part),
        }
    }
    Ok(out.expect("every split names at least one file"))
}

pub fn standardize(x: f32, channel: usize) -> f32 {
    (x - MEAN[channel]) / STD[channel]
}

pub fn destandardize(z: f32, channel: usize) -> f32 {
    z * STD[channel] + MEAN[channel]
}

/// Mirror index into `0..len` for positions up to `len - 1` outside it.
fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Random crop of the reflection-padded image plus a coin-flip mirror.
/// Input and output are 3x32x32 planes in `[0,1]`.
pub fn augment<R: Rng>(img: &[f32], rng: &mut R) -> Vec<f32> {
    let dy = rng.random_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
    let dx = rng.random_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
    let flip = rng.random_bool(0.5);
    let mut out = vec![0.0; PIXELS];
    for c in 0..3 {
        for y in 0..SIDE {
            let sy = reflect(y as isize + dy, SIDE);
            for x in 0..SIDE {
                let xx = if flip { SIDE - 1 - x } else { x };
                let sx = reflect(xx as isize + dx, SIDE);
                out[(c * SIDE + y) * SIDE + x] = img[(c * SIDE + sy) * SIDE + sx];
            }
        }
    }
    out
}

/// Bilinear resize of `[C, h, w]` planes, half-pixel centres, edge clamped.
pub fn resize_bilinear(src: &[f32], channels: usize, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f32> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f32 / out as f32;
        (0..out)
            .map(|o| {
                let s = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f32);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f32)
            })
            .collect()
    };
    let ty = taps(oh, h);
    let tx = taps(ow, w);
    let mut out = vec![0.0; channels * oh * ow];
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(c * oh + y) * ow + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Batch of records to standardized `[B, 3, H, W]`; augmented when `rng` is
/// given.
pub fn preprocess(
    ds: &Dataset,
    indices: &[usize],
    target_hw: (usize, usize),
    mut rng: Option<&mut ChaCha8Rng>,
) -> Tensor<f32> {
    let (oh, ow) = target_hw;
    let mut data = Vec::with_capacity(indices.len() * 3 * oh * ow);
    for &i in indices {
        let mut img: Vec<f32> = ds.image(i).iter().map(|&p| p as f32 / 255.0).collect();
        if let Some(r) = rng.as_deref_mut() {
            img = augment(&img, r);
        }
        let mut img = resize_bilinear(&img, 3, (SIDE, SIDE), target_hw);
        for (c, plane) in img.chunks_exact_mut(oh * ow).enumerate() {
            for v in plane {
                *v = standardize(*v, c);
            }
        }
        data.extend(img);
    }
    Tensor::new(vec![indices.len(), 3, oh, ow], data).expect("batch shape")
}

/// Visit order for one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Augmentation randomness for one epoch, independent of the shuffle.
pub fn augment_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_5a5a_c3c3_3c3c);
    rng.set_stream(epoch);
    rng
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// One epoch of shuffled batches; the final short batch is kept.
pub struct BatchIterator<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    target_hw: (usize, usize),
    aug: Option<ChaCha8Rng>,
}

impl<'a> BatchIterator<'a> {
    pub fn new(
        ds: &'a Dataset,
        batch: usize,
        target_hw: (usize, usize),
        seed: u64,
        epoch: u64,
        shuffle: bool,
        augment: bool,
    ) -> Self {
        let order = if shuffle {
            epoch_order(ds.len(), seed, epoch)
        } else {
            (0..ds.len()).collect()
        };
        BatchIterator {
            ds,
            order,
            pos: 0,
            batch: batch.max(1),
            target_hw,
            aug: augment.then(|| augment_rng(seed, epoch)),
        }
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch)
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(Batch {
            images: preprocess(self.ds, idx, self.target_hw, self.aug.as_mut()),
            labels: idx.iter().map(|&i| self.ds.label(i)).collect(),
        })
    }
}

/// Random records in the binary layout, for fixtures and offline runs.
pub fn synthetic(variant: Variant, split: Split, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bytes = Vec::with_capacity(n * variant.record_len());
    for _ in 0..n {
        if variant == Variant::Cifar100 {
            bytes.push(rng.random_range(0..20u8));
        }
        bytes.push(rng.random_range(0..variant.num_classes() as u8));
        bytes.extend((0..PIXELS).map(|_| rng.random::<u8>()));
    }
    Dataset::parse(variant, split, "synthetic.bin", &bytes).expect("well-formed records")
}

/// Learnable stand-in: each class has its own mean colour, plus per-pixel
/// noise of up to ±`noise` levels. Labels cycle through the classes.
pub fn synthetic_separable(variant: Variant, split: Split, n: usize, noise: u8, seed: u64) -> Dataset {
    let classes = variant.num_classes();
    let mut palette_rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let palette: Vec<[u8; 3]> = (0..classes)
        .map(|_| std::array::from_fn(|_| palette_rng.random_range(40..216u8)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bytes = Vec::with_capacity(n * variant.record_len());
    let half = SIDE * SIDE;
    for i in 0..n {
        let label = i % classes;
        if variant == Variant::Cifar100 {
            bytes.push((label / 5) as u8);
        }
        bytes.push(label as u8);
        for p in 0..PIXELS {
            let base = palette[label][p / half] as i32;
            let jitter = rng.random_range(-(noise as i32)..=noise as i32);
            bytes.push((base + jitter).clamp(0, 255) as u8);
        }
    }
    Dataset::parse(variant, split, "synthetic.bin", &bytes).expect("well-formed records")
}
