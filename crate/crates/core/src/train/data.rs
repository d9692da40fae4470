//! Labelled image sets: the synthetic position task and the raw binary format.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATA_MAGIC: &[u8; 8] = b"VIPDATA1";

/// Images `[N, side, side, channels]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let &[n, h, w, _] = images.shape() else {
            return Err(Error::Dataset(format!("images must be [N, H, W, C], got {:?}", images.shape())));
        };
        if h != w {
            return Err(Error::Dataset(format!("images must be square, got {h}x{w}")));
        }
        if labels.len() != n {
            return Err(Error::Dataset(format!("{} labels for {n} images", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[3]
    }

    fn sample_len(&self) -> usize {
        self.side() * self.side() * self.channels()
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let shape = [indices.len(), self.side(), self.side(), self.channels()];
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("gathered extents"), labels)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(DATA_MAGIC)?;
        for v in [self.len(), self.side(), self.channels(), self.classes] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let per = self.sample_len();
        for (i, &label) in self.labels.iter().enumerate() {
            w.write_all(&(label as u32).to_le_bytes())?;
            for v in &self.images.data()[i * per..(i + 1) * per] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let truncated = |what: &str| Error::Dataset(format!("truncated file while reading {what}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| truncated("magic"))?;
        if &magic != DATA_MAGIC {
            return Err(Error::Dataset(format!("bad magic {:?}, expected VIPDATA1", String::from_utf8_lossy(&magic))));
        }
        let u32_at = |r: &mut dyn Read, what: &str| -> Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| truncated(what))?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let n = u32_at(&mut r, "count")?;
        let side = u32_at(&mut r, "side")?;
        let channels = u32_at(&mut r, "channels")?;
        let classes = u32_at(&mut r, "classes")?;
        let per = side * side * channels;
        let mut labels = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * per);
        let mut buf = vec![0u8; per * 4];
        for i in 0..n {
            labels.push(u32_at(&mut r, "label")?);
            r.read_exact(&mut buf).map_err(|_| truncated(&format!("sample {i}")))?;
            data.extend(buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).unwrap_or(0) != 0 {
            return Err(Error::Dataset("trailing bytes after the last sample".into()));
        }
        Dataset::new(Tensor::new([n, side, side, channels], data)?, labels, classes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

/// Position-coded task: one fixed motif per image, placed in the cell of a
/// `rows × cols` grid given by the class. The motif is identical for all
/// classes, so only its location identifies the label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub side: usize,
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub motif_size: usize,
    /// Std of the Gaussian background.
    pub noise: f64,
    /// Motif amplitude is drawn from `[amplitude_min, 1]` per image.
    pub amplitude_min: f64,
    /// Generator seed, independent of the training seed.
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            side: 32,
            channels: 3,
            rows: 4,
            cols: 2,
            train_per_class: 100,
            val_per_class: 25,
            motif_size: 6,
            noise: 0.5,
            amplitude_min: 0.6,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn classes(&self) -> usize {
        self.rows * self.cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.channels == 0 {
            return Err(Error::Config("synthetic rows, cols and channels must be positive".into()));
        }
        if self.side % self.rows != 0 || self.side % self.cols != 0 {
            return Err(Error::Config(format!(
                "synthetic side {} not divisible into {}x{} cells",
                self.side, self.rows, self.cols
            )));
        }
        let (ch, cw) = (self.side / self.rows, self.side / self.cols);
        if self.motif_size == 0 || self.motif_size > ch.min(cw) {
            return Err(Error::Config(format!(
                "motif size {} does not fit a {ch}x{cw} cell",
                self.motif_size
            )));
        }
        if !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.amplitude_min) {
            return Err(Error::Config("noise must be non-negative and amplitude_min in [0, 1]".into()));
        }
        Ok(())
    }

    /// Class of the cell at (row band, column band).
    pub fn class_of(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    /// The shared motif, `motif_size² × channels`, values in `{−1, 1}`.
    pub fn motif(&self) -> Vec<f32> {
        let k = self.motif_size;
        let mut out = Vec::with_capacity(k * k * self.channels);
        for y in 0..k {
            for x in 0..k {
                for c in 0..self.channels {
                    // A ring with a channel-dependent checker inside.
                    let edge = y == 0 || x == 0 || y == k - 1 || x == k - 1;
                    let v = if edge { 1.0 } else if (x + y + c) % 2 == 0 { 1.0 } else { -1.0 };
                    out.push(v);
                }
            }
        }
        out
    }

    fn generate(&self, per_class: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
        let (side, ch, k) = (self.side, self.channels, self.motif_size);
        let (cell_h, cell_w) = (side / self.rows, side / self.cols);
        let motif = self.motif();
        let noise = Normal::new(0.0, self.noise).map_err(|e| Error::Config(e.to_string()))?;
        let classes = self.classes();
        let n = per_class * classes;
        let mut data = Vec::with_capacity(n * side * side * ch);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            // Interleaved so every prefix is class balanced.
            let label = i % classes;
            let (row, col) = (label / self.cols, label % self.cols);
            let mut img: Vec<f32> = (0..side * side * ch).map(|_| noise.sample(rng) as f32).collect();
            let top = row * cell_h + rng.random_range(0..=cell_h - k);
            let left = col * cell_w + rng.random_range(0..=cell_w - k);
            let amp = rng.random_range(self.amplitude_min..=1.0) as f32;
            for y in 0..k {
                for x in 0..k {
                    for c in 0..ch {
                        img[((top + y) * side + left + x) * ch + c] += amp * motif[(y * k + x) * ch + c];
                    }
                }
            }
            data.extend(img);
            labels.push(label);
        }
        Dataset::new(Tensor::new([n, side, side, ch], data)?, labels, classes)
    }
}

/// Train and validation splits drawn from one seeded stream.
pub fn synth_dataset(spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = spec.generate(spec.train_per_class, &mut rng)?;
    let val = spec.generate(spec.val_per_class, &mut rng)?;
    Ok((train, val))
}
