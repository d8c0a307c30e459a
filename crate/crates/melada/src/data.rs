//! Multi-domain datasets: synthetic benchmark generation, the MELD v1
//! interchange format, and domain bookkeeping.
//!
//! MELD v1 layout (all integers little-endian):
//!   magic "MELD", u32 version = 1, u32 n_domains;
//!   per domain: u32 subject_id, u32 n_samples, u32 seq_len, u32 feat_dim,
//!   u32 n_classes, then n_samples labels (u8 each), then n_samples frames
//!   of seq_len * feat_dim f64 values, little-endian, row-major.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use std::io::{Read, Write};
use std::path::Path;

pub const MELD_MAGIC: [u8; 4] = *b"MELD";
pub const MELD_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Synthetic,
    Imported,
}

/// One windowed sequence with its class label. `frames` is seq_len rows of
/// feat_dim values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub frames: Vec<f64>,
    pub label: u8,
}

/// One subject's labeled samples; the unit of episodic partitioning.
#[derive(Clone, Debug)]
pub struct Domain {
    pub subject_id: u32,
    pub seq_len: usize,
    pub feat_dim: usize,
    pub n_classes: usize,
    pub samples: Vec<SequenceSample>,
    pub provenance: Provenance,
}

impl PartialEq for Domain {
    // provenance is bookkeeping, not data
    fn eq(&self, other: &Self) -> bool {
        self.subject_id == other.subject_id
            && self.seq_len == other.seq_len
            && self.feat_dim == other.feat_dim
            && self.n_classes == other.n_classes
            && self.samples == other.samples
    }
}

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub n_domains: usize,
    pub n_classes: usize,
    pub feat_dim: usize,
    pub seq_len: usize,
    pub samples_per_class: usize,
    pub shift_strength: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_domains: 8,
            n_classes: 3,
            feat_dim: 20,
            seq_len: 15,
            samples_per_class: 120,
            shift_strength: 0.6,
            noise_sigma: 0.3,
            seed: 42,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.n_domains < 1
            || self.n_classes < 1
            || self.feat_dim < 1
            || self.seq_len < 1
            || self.samples_per_class < 1
        {
            return Err(Error::invalid("all synthetic spec counts must be >= 1"));
        }
        if self.shift_strength < 0.0 {
            return Err(Error::invalid("shift strength must be >= 0"));
        }
        if self.n_classes > 256 {
            return Err(Error::invalid("labels are stored as u8"));
        }
        Ok(())
    }
}

/// Generates the synthetic multi-domain benchmark.
///
/// Class base means are drawn once; domain s then applies the affine
/// perturbation x -> (I + eps R_s) x + eps b_s to Gaussian class-conditional
/// frames. The draw order is fixed (means, then per domain: R row-major,
/// b, then per class / sample / frame / dim noise) so the output is
/// byte-identical for a given seed.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<Vec<Domain>> {
    spec.validate()?;
    let mut rng = SplitMix64::new(spec.seed);
    let d = spec.feat_dim;
    let eps = spec.shift_strength;

    let class_means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| (0..d).map(|_| rng.next_normal()).collect())
        .collect();

    let mut domains = Vec::with_capacity(spec.n_domains);
    for subject in 0..spec.n_domains {
        // The per-domain shift is translation-dominant: b_s carries most of the
        // displacement while R_s adds a mild distortion. b_s is drawn inside the
        // span of the class means, so it displaces a subject's classes toward
        // where *other* classes sit for the remaining subjects. A model cannot
        // become invariant to those directions without losing the class signal,
        // so the shift must be corrected per subject — the situation test-time
        // alignment is designed for.
        let r_mat: Vec<f64> = (0..d * d)
            .map(|_| rng.next_normal() / d as f64)
            .collect();
        let b_vec: Vec<f64> = {
            let coeffs: Vec<f64> = (0..spec.n_classes).map(|_| rng.next_normal()).collect();
            let scale = 2.0 / (spec.n_classes as f64).sqrt();
            (0..d)
                .map(|i| {
                    scale
                        * coeffs
                            .iter()
                            .zip(&class_means)
                            .map(|(c, m)| c * m[i])
                            .sum::<f64>()
                })
                .collect()
        };
        let mut samples = Vec::with_capacity(spec.n_classes * spec.samples_per_class);
        for class in 0..spec.n_classes {
            for _ in 0..spec.samples_per_class {
                let mut frames = Vec::with_capacity(spec.seq_len * d);
                for _ in 0..spec.seq_len {
                    let raw: Vec<f64> = (0..d)
                        .map(|j| class_means[class][j] + spec.noise_sigma * rng.next_normal())
                        .collect();
                    for i in 0..d {
                        let mut v = raw[i] + eps * b_vec[i];
                        for j in 0..d {
                            v += eps * r_mat[i * d + j] * raw[j];
                        }
                        frames.push(v);
                    }
                }
                samples.push(SequenceSample { frames, label: class as u8 });
            }
        }
        domains.push(Domain {
            subject_id: subject as u32,
            seq_len: spec.seq_len,
            feat_dim: d,
            n_classes: spec.n_classes,
            samples,
            provenance: Provenance::Synthetic,
        });
    }
    Ok(domains)
}

/// Serializes domains into the MELD v1 byte image.
pub fn serialize_dataset(domains: &[Domain]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MELD_MAGIC);
    out.extend_from_slice(&MELD_VERSION.to_le_bytes());
    out.extend_from_slice(&(domains.len() as u32).to_le_bytes());
    for dom in domains {
        out.extend_from_slice(&dom.subject_id.to_le_bytes());
        out.extend_from_slice(&(dom.samples.len() as u32).to_le_bytes());
        out.extend_from_slice(&(dom.seq_len as u32).to_le_bytes());
        out.extend_from_slice(&(dom.feat_dim as u32).to_le_bytes());
        out.extend_from_slice(&(dom.n_classes as u32).to_le_bytes());
        for s in &dom.samples {
            out.push(s.label);
        }
        for s in &dom.samples {
            for v in &s.frames {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn write_dataset(domains: &[Domain], path: &Path) -> Result<()> {
    let bytes = serialize_dataset(domains);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated(format!(
                "expected {n} more bytes for {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a MELD v1 byte image.
pub fn parse_dataset(bytes: &[u8]) -> Result<Vec<Domain>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MELD_MAGIC {
        return Err(Error::BadMagic {
            expected: MELD_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = r.u32("version")?;
    if version != MELD_VERSION {
        return Err(Error::BadVersion(version));
    }
    let n_domains = r.u32("domain count")?;
    let mut domains = Vec::with_capacity(n_domains as usize);
    for _ in 0..n_domains {
        let subject_id = r.u32("subject id")?;
        let n_samples = r.u32("sample count")? as usize;
        let seq_len = r.u32("sequence length")? as usize;
        let feat_dim = r.u32("feature dim")? as usize;
        let n_classes = r.u32("class count")? as usize;
        let labels = r.take(n_samples, "labels")?.to_vec();
        for &l in &labels {
            if (l as usize) >= n_classes {
                return Err(Error::invalid(format!(
                    "label {l} out of range for {n_classes} classes (subject {subject_id})"
                )));
            }
        }
        let frame_len = seq_len * feat_dim;
        let mut samples = Vec::with_capacity(n_samples);
        for (i, label) in labels.into_iter().enumerate() {
            let raw = r.take(frame_len * 8, &format!("sample {i} frames"))?;
            let frames: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect();
            samples.push(SequenceSample { frames, label });
        }
        domains.push(Domain {
            subject_id,
            seq_len,
            feat_dim,
            n_classes,
            samples,
            provenance: Provenance::Imported,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Truncated(format!(
            "{} trailing bytes after last domain",
            bytes.len() - r.pos
        )));
    }
    Ok(domains)
}

pub fn read_dataset(path: &Path) -> Result<Vec<Domain>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_dataset(&bytes)
}

/// CSV mirror of the dataset for inspection: one row per frame with
/// subject, sample, label and step columns.
pub fn write_dataset_csv(domains: &[Domain], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "subject,sample,label,step")?;
    let dim = domains.first().map(|d| d.feat_dim).unwrap_or(0);
    for j in 0..dim {
        write!(f, ",f{j}")?;
    }
    writeln!(f)?;
    for dom in domains {
        for (i, s) in dom.samples.iter().enumerate() {
            for t in 0..dom.seq_len {
                write!(f, "{},{},{},{}", dom.subject_id, i, s.label, t)?;
                for j in 0..dom.feat_dim {
                    write!(f, ",{}", s.frames[t * dom.feat_dim + j])?;
                }
                writeln!(f)?;
            }
        }
    }
    Ok(())
}

/// SHA-256 of the serialized dataset, hex-encoded.
pub fn dataset_sha256(domains: &[Domain]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(serialize_dataset(domains));
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
