//! Dataset ingestion, balanced subsetting, mini-batching and matched pairs.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use flate2::read::GzDecoder;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, seeded_rng};
use crate::scalar::Real;

/// Labelled inputs, stored row-major (`len × dim`), entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T: Real> {
    inputs: Vec<T>,
    dim: usize,
    labels: Vec<usize>,
    class_count: usize,
    source: String,
}

impl<T: Real> Dataset<T> {
    pub fn new(
        inputs: Vec<T>,
        dim: usize,
        labels: Vec<usize>,
        class_count: usize,
        source: impl Into<String>,
    ) -> Result<Self> {
        if inputs.len() != dim * labels.len() {
            return Err(Error::ShapeError(format!(
                "{} input values for {} samples of dimension {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::FormatError(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if inputs
            .iter()
            .any(|v| !v.is_finite() || *v < T::zero() || *v > T::one())
        {
            return Err(Error::FormatError("input values must lie in [0, 1]".into()));
        }
        Ok(Self {
            inputs,
            dim,
            labels,
            class_count,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn input(&self, i: usize) -> &[T] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// Indices of each class, ascending.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_count];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    /// Copy of the selected rows, labels unchanged.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            inputs.extend_from_slice(self.input(i));
        }
        Self {
            inputs,
            dim: self.dim,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            source: self.source.clone(),
        }
    }
}

/// Decoded content of an IDX file.
#[derive(Clone, Debug, PartialEq)]
pub enum IdxData<T> {
    /// `count` images of `rows × cols`, flattened row-major, scaled to `[0, 1]`.
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        pixels: Vec<T>,
    },
    Labels(Vec<u8>),
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::TruncatedFile(format!("header ends before byte {}", at + 4)))
}

pub fn parse_idx<T: Real>(bytes: &[u8]) -> Result<IdxData<T>> {
    let magic = be_u32(bytes, 0)?;
    let dims: Vec<usize> = match magic {
        IDX_IMAGES => (0..3)
            .map(|k| be_u32(bytes, 4 + 4 * k).map(|v| v as usize))
            .collect::<Result<_>>()?,
        IDX_LABELS => vec![be_u32(bytes, 4)? as usize],
        other => {
            return Err(Error::FormatError(format!(
                "unknown IDX magic 0x{other:08x}"
            )))
        }
    };
    let header = 4 + 4 * dims.len();
    let expected = dims.iter().product::<usize>();
    let payload = &bytes[header..];
    if payload.len() < expected {
        return Err(Error::TruncatedFile(format!(
            "payload has {} bytes, header declares {expected}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::FormatError(format!(
            "payload has {} bytes, header declares {expected}",
            payload.len()
        )));
    }
    Ok(match magic {
        IDX_IMAGES => IdxData::Images {
            count: dims[0],
            rows: dims[1],
            cols: dims[2],
            pixels: payload.iter().map(|&b| pixel(b)).collect(),
        },
        _ => IdxData::Labels(payload.to_vec()),
    })
}

fn pixel<T: Real>(b: u8) -> T {
    T::count(b as usize) / T::lit(255.0)
}

/// Inverse of [`parse_idx`]; pixel values are rounded back to bytes.
pub fn serialize_idx<T: Real>(data: &IdxData<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    match data {
        IdxData::Images {
            count,
            rows,
            cols,
            pixels,
        } => {
            if pixels.len() != count * rows * cols {
                return Err(Error::ShapeError(format!(
                    "{} pixels for {count} images of {rows}x{cols}",
                    pixels.len()
                )));
            }
            out.extend_from_slice(&IDX_IMAGES.to_be_bytes());
            for d in [count, rows, cols] {
                out.extend_from_slice(&(*d as u32).to_be_bytes());
            }
            for v in pixels {
                let b = (v.as_f64() * 255.0).round();
                if !(0.0..=255.0).contains(&b) {
                    return Err(Error::FormatError(format!("pixel value {v} outside [0, 1]")));
                }
                out.push(b as u8);
            }
        }
        IdxData::Labels(labels) => {
            out.extend_from_slice(&IDX_LABELS.to_be_bytes());
            out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
            out.extend_from_slice(labels);
        }
    }
    Ok(out)
}

/// Reads a file, transparently inflating it when it starts with the gzip magic.
pub fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    gunzip_if_needed(raw).map_err(|e| Error::io(path, e))
}

fn gunzip_if_needed(raw: Vec<u8>) -> std::io::Result<Vec<u8>> {
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Loads an images/labels IDX pair (either may be gzipped).
pub fn load_idx_dataset<T: Real>(
    images: &Path,
    labels: &Path,
    class_count: usize,
) -> Result<Dataset<T>> {
    let img = parse_idx::<T>(&read_maybe_gzip(images)?)?;
    let lab = parse_idx::<T>(&read_maybe_gzip(labels)?)?;
    let (count, rows, cols, pixels) = match img {
        IdxData::Images {
            count,
            rows,
            cols,
            pixels,
        } => (count, rows, cols, pixels),
        IdxData::Labels(_) => {
            return Err(Error::FormatError(format!(
                "{} holds labels, expected images",
                images.display()
            )))
        }
    };
    let labels_raw = match lab {
        IdxData::Labels(l) => l,
        IdxData::Images { .. } => {
            return Err(Error::FormatError(format!(
                "{} holds images, expected labels",
                labels.display()
            )))
        }
    };
    if labels_raw.len() != count {
        return Err(Error::ShapeError(format!(
            "{count} images but {} labels",
            labels_raw.len()
        )));
    }
    Dataset::new(
        pixels,
        rows * cols,
        labels_raw.into_iter().map(usize::from).collect(),
        class_count,
        images.display().to_string(),
    )
}

const CIFAR_RECORD: usize = 3073;

/// CIFAR-10 binary batch: 1 label byte then 3072 channel-major pixel bytes per record.
pub fn parse_cifar10<T: Real>(bytes: &[u8]) -> Result<Dataset<T>> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::FormatError(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut inputs = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (k, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::FormatError(format!(
                "record {k} has label byte {}",
                rec[0]
            )));
        }
        labels.push(rec[0] as usize);
        inputs.extend(rec[1..].iter().map(|&b| pixel::<T>(b)));
    }
    Dataset::new(inputs, CIFAR_RECORD - 1, labels, 10, "cifar10")
}

/// Byte source for [`fetch_dataset`].
pub trait Transport: Sync {
    fn get(&self, url: &str) -> std::result::Result<Vec<u8>, String>;
}

/// HTTP(S) via ureq, plus `file://` URLs read from disk.
#[derive(Clone, Debug, Default)]
pub struct DefaultTransport;

impl Transport for DefaultTransport {
    fn get(&self, url: &str) -> std::result::Result<Vec<u8>, String> {
        if let Some(path) = url.strip_prefix("file://") {
            return fs::read(path).map_err(|e| format!("{path}: {e}"));
        }
        let mut resp = ureq::get(url).call().map_err(|e| e.to_string())?;
        resp.body_mut()
            .with_config()
            .limit(1 << 30)
            .read_to_vec()
            .map_err(|e| e.to_string())
    }
}

#[derive(Clone, Debug)]
pub struct FetchOptions {
    pub attempts: usize,
    /// Delay before the second attempt; doubles after each failure.
    pub backoff: Duration,
    /// Inflate gzip payloads before writing.
    pub decompress: bool,
}

impl Default for FetchOptions {
    fn default() -> Self {
        Self {
            attempts: 3,
            backoff: Duration::from_millis(500),
            decompress: true,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn sidecar(dest: &Path) -> PathBuf {
    let mut s = dest.as_os_str().to_owned();
    s.push(".sha256");
    PathBuf::from(s)
}

/// True when `dest` holds the verified payload for `expected_sha256`.
///
/// The sidecar records the digest of the downloaded payload and of the bytes
/// written, so a decompressed file can still be validated against the source
/// digest.
pub fn cache_is_valid(dest: &Path, expected_sha256: &str) -> bool {
    let Ok(meta) = fs::read_to_string(sidecar(dest)) else {
        return false;
    };
    let mut lines = meta.lines();
    let (Some(src), Some(written)) = (lines.next(), lines.next()) else {
        return false;
    };
    if !src.eq_ignore_ascii_case(expected_sha256) {
        return false;
    }
    match fs::read(dest) {
        Ok(bytes) => sha256_hex(&bytes) == written,
        Err(_) => false,
    }
}

/// Downloads `url`, verifies its SHA-256 and writes it atomically to `dest`.
///
/// A valid cached copy short-circuits the download.
pub fn fetch_dataset(
    url: &str,
    expected_sha256: &str,
    dest: &Path,
    transport: &dyn Transport,
    opts: &FetchOptions,
) -> Result<PathBuf> {
    if cache_is_valid(dest, expected_sha256) {
        log::info!("{} already present", dest.display());
        return Ok(dest.to_path_buf());
    }
    let mut delay = opts.backoff;
    let mut last_err = String::from("no attempts made");
    let mut payload = None;
    for attempt in 1..=opts.attempts.max(1) {
        match transport.get(url) {
            Ok(bytes) => {
                payload = Some(bytes);
                break;
            }
            Err(e) => {
                log::warn!("fetch {url} attempt {attempt} failed: {e}");
                last_err = e;
                if attempt < opts.attempts {
                    std::thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }
    let payload = payload.ok_or_else(|| {
        Error::NetworkError(format!(
            "{url}: {last_err} (after {} attempts)",
            opts.attempts.max(1)
        ))
    })?;
    let actual = sha256_hex(&payload);
    if !actual.eq_ignore_ascii_case(expected_sha256) {
        let _ = fs::remove_file(dest);
        let _ = fs::remove_file(sidecar(dest));
        return Err(Error::ChecksumError {
            path: dest.to_path_buf(),
            expected: expected_sha256.to_ascii_lowercase(),
            actual,
        });
    }
    let body = if opts.decompress {
        gunzip_if_needed(payload).map_err(|e| Error::io(dest, e))?
    } else {
        payload
    };
    write_atomic(dest, &body)?;
    write_atomic(
        &sidecar(dest),
        format!("{actual}\n{}\n", sha256_hex(&body)).as_bytes(),
    )?;
    Ok(dest.to_path_buf())
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// `per_class` samples of each listed class, labels remapped to positions in `classes`.
pub fn balanced_subset<T: Real>(
    d: &Dataset<T>,
    classes: &[usize],
    per_class: usize,
    seed: u64,
) -> Result<Dataset<T>> {
    let by_class = d.class_indices();
    let mut inputs = Vec::with_capacity(classes.len() * per_class * d.dim);
    let mut labels = Vec::with_capacity(classes.len() * per_class);
    for (new_label, &c) in classes.iter().enumerate() {
        let pool = by_class.get(c).cloned().unwrap_or_default();
        if pool.len() < per_class {
            return Err(Error::InsufficientClassData {
                class: c,
                available: pool.len(),
                requested: per_class,
            });
        }
        let mut pool = pool;
        pool.shuffle(&mut seeded_rng(derive_seed(seed, &[c as u64])));
        let mut chosen = pool[..per_class].to_vec();
        chosen.sort_unstable();
        for i in chosen {
            inputs.extend_from_slice(d.input(i));
            labels.push(new_label);
        }
    }
    Dataset::new(inputs, d.dim, labels, classes.len(), d.source.clone())
}

/// Sample indices of one mini-batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MiniBatch {
    pub indices: Vec<usize>,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Partitions the data into batches holding exactly `B/C` samples of every class.
pub fn stratified_batches<T: Real>(
    d: &Dataset<T>,
    batch: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<MiniBatch>> {
    let c = d.class_count;
    if batch == 0 || c == 0 || batch % c != 0 {
        return Err(Error::BatchShapeError(format!(
            "batch size {batch} is not a multiple of {c} classes"
        )));
    }
    let per = batch / c;
    let mut by_class = d.class_indices();
    let n_c = by_class[0].len();
    if by_class.iter().any(|v| v.len() != n_c) || n_c % per != 0 {
        return Err(Error::BatchShapeError(format!(
            "class sizes {:?} cannot be split into groups of {per}",
            by_class.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    for (k, idx) in by_class.iter_mut().enumerate() {
        idx.shuffle(&mut seeded_rng(derive_seed(seed, &[epoch, k as u64])));
    }
    Ok((0..n_c / per)
        .map(|b| MiniBatch {
            indices: by_class
                .iter()
                .flat_map(|idx| idx[b * per..(b + 1) * per].iter().copied())
                .collect(),
        })
        .collect())
}

/// Plain random partition into batches of `B`; the last batch may be short.
pub fn shuffled_batches<T: Real>(
    d: &Dataset<T>,
    batch: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<MiniBatch>> {
    if batch == 0 {
        return Err(Error::BatchShapeError("batch size 0".into()));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut seeded_rng(derive_seed(seed, &[epoch, u64::MAX])));
    Ok(order
        .chunks(batch)
        .map(|c| MiniBatch {
            indices: c.to_vec(),
        })
        .collect())
}

/// Per-class counts for a batch of `B` over `C` classes: `⌊B/C⌋` each, with the
/// `B mod C` extra slots going to a random rotation of the classes.
pub fn balanced_counts(batch: usize, classes: usize, rng: &mut impl Rng) -> Vec<usize> {
    let base = batch / classes;
    let extra = batch % classes;
    let offset = if extra == 0 { 0 } else { rng.random_range(0..classes) };
    (0..classes)
        .map(|k| base + usize::from((k + classes - offset) % classes < extra))
        .collect()
}

/// Draws a batch with the given per-class counts, without replacement within each class.
pub fn draw_batch(
    by_class: &[Vec<usize>],
    counts: &[usize],
    rng: &mut impl Rng,
) -> Result<MiniBatch> {
    let mut indices = Vec::with_capacity(counts.iter().sum());
    for (k, (pool, &n)) in by_class.iter().zip(counts).enumerate() {
        if pool.len() < n {
            return Err(Error::InsufficientClassData {
                class: k,
                available: pool.len(),
                requested: n,
            });
        }
        indices.extend(pool.choose_multiple(rng, n).copied());
    }
    Ok(MiniBatch { indices })
}

/// For each sample of `nu`, its nearest same-class neighbour in `mu`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pairing<T: Real> {
    /// `(p, p′)` dataset indices, in the order of `nu`.
    pub pairs: Vec<(usize, usize)>,
    pub distances: Vec<T>,
    /// Number of `mu` samples chosen by more than one `p`.
    pub reused_partners: usize,
}

pub fn match_pairs<T: Real>(nu: &MiniBatch, mu: &MiniBatch, d: &Dataset<T>) -> Result<Pairing<T>> {
    let found: Vec<(usize, usize, T)> = nu
        .indices
        .par_iter()
        .map(|&p| {
            let y = d.label(p);
            let xp = d.input(p);
            let mut best: Option<(usize, T)> = None;
            for &k in &mu.indices {
                if d.label(k) != y {
                    continue;
                }
                let dist2 = xp
                    .iter()
                    .zip(d.input(k))
                    .fold(T::zero(), |acc, (a, b)| acc + (*a - *b) * (*a - *b));
                let better = match best {
                    None => true,
                    Some((bk, bd)) => dist2 < bd || (dist2 == bd && k < bk),
                };
                if better {
                    best = Some((k, dist2));
                }
            }
            best.map(|(k, d2)| (p, k, d2.sqrt())).ok_or_else(|| {
                Error::PairingError(format!("class {y} of sample {p} is absent from the partner batch"))
            })
        })
        .collect::<Result<_>>()?;
    let mut partners: Vec<usize> = found.iter().map(|f| f.1).collect();
    partners.sort_unstable();
    let reused_partners = partners
        .chunk_by(|a, b| a == b)
        .filter(|g| g.len() > 1)
        .count();
    Ok(Pairing {
        pairs: found.iter().map(|f| (f.0, f.1)).collect(),
        distances: found.iter().map(|f| f.2).collect(),
        reused_partners,
    })
}
