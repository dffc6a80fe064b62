//! Per-residue physicochemical descriptors and their z-scored form.
//!
//! Each residue carries a 5-vector `[aromatic, charge, hbond, hydrophobicity,
//! mass_ratio]`. The shipped table lives in `data/descriptors.tsv` and is
//! embedded at compile time; its SHA-256 is pinned in [`DESCRIPTOR_SHA256`].
//! Statistics for z-scoring are population mean/std over exactly the 20
//! canonical residues. `X` and every special token map to the zero vector.

use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::vocab::{self, TokenId, CANONICAL, X};

pub const N_DESCRIPTORS: usize = 5;
pub const DESCRIPTOR_NAMES: [&str; N_DESCRIPTORS] =
    ["aromatic", "charge", "hbond", "hydrophobicity", "mass_ratio"];

pub type Descriptor = [f64; N_DESCRIPTORS];

pub const DESCRIPTOR_TSV: &str = include_str!("../data/descriptors.tsv");
pub const DESCRIPTOR_SHA256: &str =
    "02878643f2a37b525f272cdeb42b1bec3b482d541d23139e27812fa770f56543";

#[derive(Debug)]
pub struct DescriptorTable {
    /// Indexed by residue id; row 20 is `X`.
    raw: [Descriptor; 21],
    mu: Descriptor,
    sigma: Descriptor,
    scored: [Descriptor; 21],
    checksum: String,
    reads: AtomicU64,
}

impl Clone for DescriptorTable {
    fn clone(&self) -> Self {
        DescriptorTable {
            raw: self.raw,
            mu: self.mu,
            sigma: self.sigma,
            scored: self.scored,
            checksum: self.checksum.clone(),
            reads: AtomicU64::new(0),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl DescriptorTable {
    /// The shipped table.
    pub fn standard() -> Self {
        Self::from_tsv(DESCRIPTOR_TSV).expect("embedded descriptor table is valid")
    }

    /// Parses `symbol<TAB>v1..v5` rows; `#` lines are comments. All 20
    /// canonical residues must be present; an `X` row, if given, must be zero.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut raw = [[0.0; N_DESCRIPTORS]; 21];
        let mut seen = [false; 21];
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 1 + N_DESCRIPTORS {
                return Err(Error::DataFile(format!("line {}: expected 6 fields", n + 1)));
            }
            let mut chars = fields[0].chars();
            let id = match (chars.next(), chars.next()) {
                (Some(c), None) => vocab::residue_id(c),
                _ => None,
            }
            .ok_or_else(|| Error::DataFile(format!("line {}: bad residue {:?}", n + 1, fields[0])))?;
            if seen[id] {
                return Err(Error::DataFile(format!("line {}: duplicate residue", n + 1)));
            }
            seen[id] = true;
            for (k, f) in fields[1..].iter().enumerate() {
                raw[id][k] = f
                    .trim()
                    .parse()
                    .map_err(|_| Error::DataFile(format!("line {}: bad number {f:?}", n + 1)))?;
            }
        }
        if let Some(missing) = (0..20).find(|&i| !seen[i]) {
            return Err(Error::DataFile(format!("missing residue {}", CANONICAL[missing])));
        }
        if raw[X].iter().any(|&v| v != 0.0) {
            return Err(Error::DataFile("X must map to the zero descriptor".into()));
        }

        let mut mu = [0.0; N_DESCRIPTORS];
        let mut sigma = [0.0; N_DESCRIPTORS];
        for k in 0..N_DESCRIPTORS {
            mu[k] = raw[..20].iter().map(|r| r[k]).sum::<f64>() / 20.0;
            let var = raw[..20].iter().map(|r| (r[k] - mu[k]).powi(2)).sum::<f64>() / 20.0;
            sigma[k] = var.sqrt();
            if !(sigma[k] > 0.0) {
                return Err(Error::DataFile(format!("{} has zero variance", DESCRIPTOR_NAMES[k])));
            }
        }
        let mut scored = [[0.0; N_DESCRIPTORS]; 21];
        for i in 0..20 {
            for k in 0..N_DESCRIPTORS {
                scored[i][k] = (raw[i][k] - mu[k]) / sigma[k];
            }
        }
        Ok(DescriptorTable {
            raw,
            mu,
            sigma,
            scored,
            checksum: sha256_hex(text.as_bytes()),
            reads: AtomicU64::new(0),
        })
    }

    pub fn mu(&self) -> &Descriptor {
        &self.mu
    }

    pub fn sigma(&self) -> &Descriptor {
        &self.sigma
    }

    /// SHA-256 (hex) of the source text the table was parsed from.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Raw descriptor of a residue character; `X` gives the zero vector.
    pub fn descriptor_raw(&self, residue: char) -> Result<Descriptor> {
        let id = vocab::residue_id(residue).ok_or(Error::UnknownResidue(residue))?;
        self.reads.fetch_add(1, Ordering::Relaxed);
        Ok(self.raw[id])
    }

    /// Z-scored descriptor of a token id. Zero for `X` and special tokens.
    pub fn zscore(&self, id: TokenId) -> Descriptor {
        self.reads.fetch_add(1, Ordering::Relaxed);
        if id < 20 {
            self.scored[id]
        } else {
            [0.0; N_DESCRIPTORS]
        }
    }

    /// Number of lookups served so far.
    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }
}

impl Default for DescriptorTable {
    fn default() -> Self {
        Self::standard()
    }
}

/// Free-function form over the shipped table.
pub fn descriptor_raw(residue: char) -> Result<Descriptor> {
    DescriptorTable::standard().descriptor_raw(residue)
}
