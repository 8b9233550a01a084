//! In-memory image datasets, loaders, the synthetic generator and cutout.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labelled images stored as one flat `f32` buffer, channel-planar per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: [usize; 3],
    classes: usize,
    images: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(shape: [usize; 3], classes: usize, images: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 || classes == 0 {
            return Err(Error::invalid("dataset needs a positive image shape and class count"));
        }
        if images.len() != per * labels.len() {
            return Err(Error::shape(format!(
                "{} pixel values for {} images of shape {shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label, classes });
        }
        Ok(Dataset {
            shape,
            classes,
            images,
            labels,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.pixels();
        &self.images[i * per..(i + 1) * per]
    }

    fn pixels(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.pixels());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            shape: self.shape,
            classes: self.classes,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Images `indices` stacked into `[n,C,H,W]`, with their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let sub = self.subset(indices);
        let [c, h, w] = self.shape;
        let x = Tensor::new(vec![indices.len(), c, h, w], sub.images).expect("subset has matching length");
        (x, sub.labels)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Index batches of `size` over a permutation drawn from `rng` (or in
    /// order when `rng` is `None`). The last batch may be smaller.
    pub fn batches<R: Rng + ?Sized>(&self, size: usize, rng: Option<&mut R>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(rng) = rng {
            order.shuffle(rng);
        }
        order.chunks(size.max(1)).map(|c| c.to_vec()).collect()
    }
}

/// Class-stratified split into a `ratio` part and the remainder. The first
/// part holds `round(ratio * len)` examples; each class contributes the floor
/// or ceiling of its share, remainders going to the largest fractional parts
/// (lowest class first on ties).
pub fn split_stratified(data: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    if data.len() < 2 {
        return Err(Error::invalid("cannot split fewer than two examples"));
    }
    let counts = data.class_counts();
    let shares: Vec<f64> = counts.iter().map(|&c| ratio * c as f64).collect();
    let mut take: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let target = (ratio * data.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        (shares[b] - shares[b].floor())
            .total_cmp(&(shares[a] - shares[a].floor()))
            .then(a.cmp(&b))
    });
    let missing = target.saturating_sub(take.iter().sum());
    let extra: Vec<usize> = order
        .into_iter()
        .filter(|&c| take[c] < counts[c])
        .take(missing)
        .collect();
    for c in extra {
        take[c] += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = Vec::new();
    let mut second = Vec::new();
    for class in 0..data.classes {
        let mut members: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == class).collect();
        members.shuffle(&mut rng);
        first.extend_from_slice(&members[..take[class]]);
        second.extend_from_slice(&members[take[class]..]);
    }
    if first.is_empty() || second.is_empty() {
        return Err(Error::invalid("split leaves one side empty"));
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((data.subset(&first), data.subset(&second)))
}

/// Zeroes a `size x size` square centred at a uniformly drawn pixel, clipped
/// at the borders. `image` is `[C,H,W]`.
pub fn cutout<R: Rng + ?Sized>(image: &Tensor<f32>, size: usize, rng: &mut R) -> Result<Tensor<f32>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape(format!("cutout expects [C,H,W], got {:?}", image.shape())));
    };
    let mut out = image.clone();
    cutout_in_place(out.data_mut(), [c, h, w], size, rng)?;
    Ok(out)
}

pub fn cutout_in_place<R: Rng + ?Sized>(pixels: &mut [f32], shape: [usize; 3], size: usize, rng: &mut R) -> Result<()> {
    let [c, h, w] = shape;
    if size == 0 || size > h.min(w) {
        return Err(Error::invalid(format!(
            "cutout size {size} must lie in 1..={}",
            h.min(w)
        )));
    }
    let cy = rng.gen_range(0..h);
    let cx = rng.gen_range(0..w);
    let (y0, x0) = (cy.saturating_sub(size / 2), cx.saturating_sub(size / 2));
    let (y1, x1) = ((cy + size - size / 2).min(h), (cx + size - size / 2).min(w));
    for ch in 0..c {
        for y in y0..y1 {
            let row = (ch * h + y) * w;
            pixels[row + x0..row + x1].fill(0.0);
        }
    }
    Ok(())
}

/// Per-channel affine normalization `(x/255 - mean) / std` for byte images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn cifar10() -> Self {
        Normalization {
            mean: vec![0.4914, 0.4822, 0.4465],
            std: vec![0.2470, 0.2435, 0.2616],
        }
    }

    pub fn unit(channels: usize) -> Self {
        Normalization {
            mean: vec![0.5; channels],
            std: vec![0.5; channels],
        }
    }

    fn check(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels || self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid(format!(
                "normalization needs {channels} means and positive stds"
            )));
        }
        Ok(())
    }

    pub fn encode(&self, byte: u8, channel: usize) -> f32 {
        ((byte as f64 / 255.0 - self.mean[channel]) / self.std[channel]) as f32
    }

    /// Inverse of [`Normalization::encode`], rounded to the nearest byte.
    pub fn decode(&self, value: f32, channel: usize) -> u8 {
        let v = (value as f64 * self.std[channel] + self.mean[channel]) * 255.0;
        v.round().clamp(0.0, 255.0) as u8
    }
}

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Parses CIFAR-10 binary records (one label byte, then 1024 bytes per
/// channel). At most `limit` records are kept.
pub fn parse_cifar_records(bytes: &[u8], norm: &Normalization, limit: Option<usize>) -> Result<Dataset> {
    norm.check(3)?;
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let offset = (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64;
        return Err(Error::Format {
            offset,
            msg: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD} bytes",
                bytes.len() % CIFAR_RECORD
            ),
        });
    }
    let n = (bytes.len() / CIFAR_RECORD).min(limit.unwrap_or(usize::MAX));
    let mut images = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).take(n).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format {
                offset: (r * CIFAR_RECORD) as u64,
                msg: format!("label byte {} outside 0..=9", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        images.extend(rec[1..].iter().enumerate().map(|(i, &b)| norm.encode(b, i / 1024)));
    }
    Dataset::new(CIFAR_SHAPE, 10, images, labels)
}

/// Re-encodes one image of a CIFAR-shaped dataset as a 3073-byte record.
pub fn encode_cifar_record(data: &Dataset, i: usize, norm: &Normalization) -> Result<Vec<u8>> {
    if data.shape != CIFAR_SHAPE || data.labels[i] > 9 {
        return Err(Error::invalid("not a CIFAR-10 shaped example"));
    }
    let mut out = Vec::with_capacity(CIFAR_RECORD);
    out.push(data.labels[i] as u8);
    out.extend(data.image(i).iter().enumerate().map(|(j, &v)| norm.decode(v, j / 1024)));
    Ok(out)
}

fn load_cifar_files(dir: &Path, files: &[&str], norm: &Normalization, limit: Option<usize>) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for f in files {
        let path = dir.join(f);
        let chunk = read_file(&path)?;
        if chunk.len() % CIFAR_RECORD != 0 {
            let offset = (chunk.len() / CIFAR_RECORD * CIFAR_RECORD) as u64;
            return Err(Error::File {
                path,
                msg: format!("truncated record at byte offset {offset}"),
            });
        }
        bytes.extend_from_slice(&chunk);
        if limit.is_some_and(|l| bytes.len() / CIFAR_RECORD >= l) {
            break;
        }
    }
    parse_cifar_records(&bytes, norm, limit)
}

/// Loads `(train, test)` from a directory holding the CIFAR-10 binary batches.
pub fn load_cifar10(
    dir: &Path,
    norm: &Normalization,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
) -> Result<(Dataset, Dataset)> {
    let train = load_cifar_files(dir, &CIFAR_TRAIN_FILES, norm, train_limit)?;
    let test = load_cifar_files(dir, &[CIFAR_TEST_FILE], norm, test_limit)?;
    Ok((train, test))
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: at as u64,
            msg: "unexpected end of IDX header".into(),
        })
}

/// Parses an IDX image file (`0x00000803`, dims n, h, w, or n, c, h, w for
/// magic `0x00000804`) and its label file (`0x00000801`).
pub fn parse_idx(images: &[u8], labels: &[u8], classes: usize, norm: &Normalization) -> Result<Dataset> {
    let magic = be_u32(images, 0)?;
    let rank = match magic {
        0x0803 => 3,
        0x0804 => 4,
        m => {
            return Err(Error::Format {
                offset: 0,
                msg: format!("image magic {m:#010x} is not an unsigned-byte rank 3 or 4 IDX file"),
            })
        }
    };
    let dims = (0..rank)
        .map(|i| be_u32(images, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let shape = if rank == 3 {
        [1, dims[1], dims[2]]
    } else {
        [dims[1], dims[2], dims[3]]
    };
    let n = dims[0];
    let header = 4 + 4 * rank;
    let per: usize = shape.iter().product();
    if images.len() != header + n * per {
        return Err(Error::Format {
            offset: images.len().min(header + n * per) as u64,
            msg: format!("expected {} image bytes, file has {}", header + n * per, images.len()),
        });
    }
    if be_u32(labels, 0)? != 0x0801 {
        return Err(Error::Format {
            offset: 0,
            msg: "label file is not an unsigned-byte rank-1 IDX file".into(),
        });
    }
    let ln = be_u32(labels, 4)? as usize;
    if ln != n || labels.len() != 8 + n {
        return Err(Error::Format {
            offset: 4,
            msg: format!("{ln} labels ({} bytes) for {n} images", labels.len()),
        });
    }
    norm.check(shape[0])?;
    let data = images[header..]
        .iter()
        .enumerate()
        .map(|(i, &b)| norm.encode(b, (i % per) / (shape[1] * shape[2])))
        .collect();
    Dataset::new(shape, classes, data, labels[8..].iter().map(|&l| l as usize).collect())
}

/// Procedural class-conditional images.
///
/// Class `c` owns an oriented sinusoid whose angle, spatial frequency and
/// per-channel phase depend on `c`. Each example adds i.i.d. Gaussian noise
/// of standard deviation `noise`; `phase_jitter` shifts the pattern by a
/// random phase in `[0, phase_jitter * 2pi)`. Pixels are scaled so the
/// template has unit variance and the sum is divided by `sqrt(1 + noise^2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    /// `[channels, height, width]`.
    pub shape: [usize; 3],
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
    pub phase_jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            shape: [3, 16, 16],
            train_per_class: 200,
            test_per_class: 50,
            noise: 0.1,
            phase_jitter: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.shape.contains(&0) || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::invalid(
                "synthetic data needs 2+ classes, a positive shape and examples per class",
            ));
        }
        if !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.phase_jitter) {
            return Err(Error::invalid("noise must be non-negative and phase_jitter in [0, 1]"));
        }
        Ok(())
    }

    fn template(&self, class: usize, phase: f64) -> Vec<f32> {
        use std::f64::consts::PI;
        let [c, h, w] = self.shape;
        let angle = PI * class as f64 / self.classes as f64;
        let freq = 1.0 + (class % 3) as f64;
        let (ca, sa) = (angle.cos(), angle.sin());
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let psi = 2.0 * PI * ((class * 7 + ch * 3) % 11) as f64 / 11.0;
            for y in 0..h {
                for x in 0..w {
                    let u = (x as f64 / w as f64) * ca + (y as f64 / h as f64) * sa;
                    out.push((2f64.sqrt() * (2.0 * PI * freq * u + psi + phase).sin()) as f32);
                }
            }
        }
        out
    }

    fn draw(&self, per_class: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
        let scale = 1.0 / (1.0 + self.noise * self.noise).sqrt();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..per_class {
            for class in 0..self.classes {
                let phase = if self.phase_jitter > 0.0 {
                    rng.gen_range(0.0..self.phase_jitter) * 2.0 * std::f64::consts::PI
                } else {
                    0.0
                };
                for t in self.template(class, phase) {
                    let e: f64 = rng.sample(StandardNormal);
                    images.push(((t as f64 + self.noise * e) * scale) as f32);
                }
                labels.push(class);
            }
        }
        Dataset::new(self.shape, self.classes, images, labels)
    }

    /// `(train, test)`, both balanced and interleaved by class.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let train = self.draw(self.train_per_class, &mut rng)?;
        let test = self.draw(self.test_per_class, &mut rng)?;
        Ok((train, test))
    }
}

/// Where a run's images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Cifar10Binary {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
        #[serde(default)]
        normalization: Option<Normalization>,
    },
    IdxImages {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        classes: usize,
        #[serde(default)]
        normalization: Option<Normalization>,
    },
    Synthetic(SyntheticSpec),
}

impl DatasetSpec {
    /// Loads `(train, test)`. Relative paths are resolved against `base`.
    pub fn load(&self, base: &Path) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::Cifar10Binary {
                dir,
                train_limit,
                test_limit,
                normalization,
            } => {
                let norm = normalization.clone().unwrap_or_else(Normalization::cifar10);
                load_cifar10(&base.join(dir), &norm, *train_limit, *test_limit)
            }
            DatasetSpec::IdxImages {
                train_images,
                train_labels,
                test_images,
                test_labels,
                classes,
                normalization,
            } => {
                let load = |i: &PathBuf, l: &PathBuf| -> Result<Dataset> {
                    let imgs = read_file(&base.join(i))?;
                    let channels = match be_u32(&imgs, 0)? {
                        0x0804 => be_u32(&imgs, 8)? as usize,
                        _ => 1,
                    };
                    let norm = normalization.clone().unwrap_or_else(|| Normalization::unit(channels));
                    parse_idx(&imgs, &read_file(&base.join(l))?, *classes, &norm)
                };
                Ok((load(train_images, train_labels)?, load(test_images, test_labels)?))
            }
            DatasetSpec::Synthetic(s) => s.generate(),
        }
    }
}
