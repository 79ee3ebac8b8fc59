//! Dataset ingestion: the big-endian IDX binary format used by MNIST and
//! Fashion-MNIST (with transparent gzip support), plus a synthetic
//! union-of-subspaces generator used as a correctness oracle.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ksc::SubspaceSet;
use crate::linalg::Matrix;

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

/// An image dataset with pixels scaled into the unit interval.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// Row-major: sample, then row, then column, then channel.
    pub images: Vec<f64>,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub labels: Option<Vec<usize>>,
    pub name: String,
}

impl Dataset {
    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Borrow of sample `i`'s pixels.
    pub fn image(&self, i: usize) -> &[f64] {
        let sz = self.pixels_per_image();
        &self.images[i * sz..(i + 1) * sz]
    }

    /// Concatenates two datasets with identical geometry.
    pub fn concat(mut self, other: Dataset) -> Result<Dataset> {
        if self.height != other.height
            || self.width != other.width
            || self.channels != other.channels
        {
            return Err(Error::Dim("concat of datasets with mixed shapes".into()));
        }
        self.images.extend(other.images);
        self.labels = match (self.labels, other.labels) {
            (Some(mut a), Some(b)) => {
                a.extend(b);
                Some(a)
            }
            _ => None,
        };
        self.n += other.n;
        Ok(self)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn read_u32_be(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{}: truncated header", path.display())))
}

/// Parses an IDX image file (magic 2051) and optionally its label file
/// (magic 2049), checking magics, payload lengths, and count consistency.
/// Pixel bytes are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let bytes = read_file(images_path)?;
    let magic = read_u32_be(&bytes, 0, images_path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "{}: image magic {magic}, expected {IMAGE_MAGIC}",
            images_path.display()
        )));
    }
    let n = read_u32_be(&bytes, 4, images_path)? as usize;
    let height = read_u32_be(&bytes, 8, images_path)? as usize;
    let width = read_u32_be(&bytes, 12, images_path)? as usize;
    let payload = &bytes[16..];
    if payload.len() != n * height * width {
        return Err(Error::Format(format!(
            "{}: payload of {} bytes for {n} images of {height}x{width}",
            images_path.display(),
            payload.len()
        )));
    }
    let images: Vec<f64> = payload.iter().map(|&b| b as f64 / 255.0).collect();

    let labels = match labels_path {
        None => None,
        Some(lp) => {
            let lbytes = read_file(lp)?;
            let lmagic = read_u32_be(&lbytes, 0, lp)?;
            if lmagic != LABEL_MAGIC {
                return Err(Error::Format(format!(
                    "{}: label magic {lmagic}, expected {LABEL_MAGIC}",
                    lp.display()
                )));
            }
            let ln = read_u32_be(&lbytes, 4, lp)? as usize;
            let lpayload = &lbytes[8..];
            if lpayload.len() != ln {
                return Err(Error::Format(format!(
                    "{}: payload of {} bytes for {ln} labels",
                    lp.display(),
                    lpayload.len()
                )));
            }
            if ln != n {
                return Err(Error::Format(format!(
                    "count mismatch: {n} images vs {ln} labels"
                )));
            }
            Some(lpayload.iter().map(|&b| b as usize).collect())
        }
    };

    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Ok(Dataset {
        images,
        n,
        height,
        width,
        channels: 1,
        labels,
        name,
    })
}

/// Writes a dataset back to IDX image/label files. Pixels are rounded to
/// bytes, so loading a saved dataset is bit-identical for data that came
/// from IDX in the first place.
pub fn save_idx(ds: &Dataset, images_path: &Path, labels_path: Option<&Path>) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + ds.images.len());
    bytes.extend(IMAGE_MAGIC.to_be_bytes());
    bytes.extend((ds.n as u32).to_be_bytes());
    bytes.extend((ds.height as u32).to_be_bytes());
    bytes.extend((ds.width as u32).to_be_bytes());
    bytes.extend(ds.images.iter().map(|&v| (v * 255.0).round() as u8));
    write_atomic(images_path, &bytes)?;

    if let (Some(lp), Some(labels)) = (labels_path, ds.labels.as_ref()) {
        let mut lbytes = Vec::with_capacity(8 + labels.len());
        lbytes.extend(LABEL_MAGIC.to_be_bytes());
        lbytes.extend((labels.len() as u32).to_be_bytes());
        lbytes.extend(labels.iter().map(|&l| l as u8));
        write_atomic(lp, &lbytes)?;
    }
    Ok(())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    f.write_all(bytes)
        .map_err(|e| Error::io(tmp.display().to_string(), e))?;
    f.sync_all()
        .map_err(|e| Error::io(tmp.display().to_string(), e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Specification of a synthetic union-of-subspaces sample.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub k: usize,
    pub d: usize,
    pub p: usize,
    pub points_per_cluster: usize,
    pub noise_sigma: f64,
    pub outlier_count: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            k: 5,
            d: 20,
            p: 3,
            points_per_cluster: 200,
            noise_sigma: 0.01,
            outlier_count: 0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.p == 0 || self.p > self.d || self.points_per_cluster == 0 {
            return Err(Error::Config(format!("synth spec {self:?}")));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config(format!("noise_sigma {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Samples points from k random p-dimensional subspaces: orthonormal bases
/// from QR of Gaussian matrices, unit-scale Gaussian coefficients, isotropic
/// noise; optional uniform gross outliers in [−3,3]ᵈ labeled −1 are
/// appended after the clustered points.
pub fn gen_synth(spec: &SynthSpec) -> Result<(Matrix, Vec<i64>, SubspaceSet)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let truth = crate::ksc::random_subspace_set(spec.k, spec.d, spec.p, &mut rng)?;

    let n = spec.k * spec.points_per_cluster + spec.outlier_count;
    let mut rows = Vec::with_capacity(n * spec.d);
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.k {
        let basis = truth.get(c).matrix();
        for _ in 0..spec.points_per_cluster {
            let coef: Vec<f64> = (0..spec.p)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mut z = basis.mul_vec(&coef)?;
            if spec.noise_sigma > 0.0 {
                for zi in z.iter_mut() {
                    let g: f64 = rng.sample(StandardNormal);
                    *zi += spec.noise_sigma * g;
                }
            }
            rows.extend(z);
            labels.push(c as i64);
        }
    }
    for _ in 0..spec.outlier_count {
        rows.extend((0..spec.d).map(|_| rng.gen_range(-3.0..3.0)));
        labels.push(-1);
    }
    Ok((Matrix::from_vec(n, spec.d, rows)?, labels, truth))
}
