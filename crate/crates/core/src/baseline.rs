//! Nearest-neighbour retrieval baseline: return a training receptor from the
//! training context most similar to the query context.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::Triple;
use crate::error::{Error, Result};
use crate::metrics::{SimilarityQuery, SubstitutionMatrix};

#[derive(Debug, Clone)]
struct Entry {
    /// `mhc + peptide`.
    key: String,
    encoded: Vec<usize>,
    self_score: i32,
    /// Sorted receptors, duplicates kept.
    receptors: Vec<String>,
}

/// Training triples grouped by concatenated context, in lexicographic order.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    entries: Vec<Entry>,
    matrix: SubstitutionMatrix,
}

impl RetrievalIndex {
    pub fn build(train: &[Triple], matrix: &SubstitutionMatrix) -> Result<Self> {
        let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for t in train {
            groups.entry(format!("{}{}", t.mhc, t.peptide)).or_default().push(t.tcr.clone());
        }
        let entries = groups
            .into_par_iter()
            .map(|(key, mut receptors)| {
                receptors.sort();
                let q = SimilarityQuery::new(&key, matrix)?;
                let encoded = q.encode(&key)?;
                let self_score = q.self_score_of(&encoded);
                Ok(Entry { key, encoded, self_score, receptors })
            })
            .collect::<Result<_>>()?;
        Ok(RetrievalIndex { entries, matrix: matrix.clone() })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of indexed triples.
    pub fn n_triples(&self) -> usize {
        self.entries.iter().map(|e| e.receptors.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub tcr: String,
    /// Concatenated training context it came from.
    pub context: String,
    pub similarity: f64,
}

/// The lexicographically first receptor of the most similar training
/// context. Equal similarities go to the lexicographically first context.
pub fn ann_retrieve(mhc: &str, peptide: &str, index: &RetrievalIndex) -> Result<Retrieval> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let query = format!("{mhc}{peptide}");
    let q = SimilarityQuery::new(&query, &index.matrix)?;
    let sims: Vec<f64> = index.entries.par_iter().map(|e| q.against(&e.encoded, e.self_score)).collect();
    let mut best = 0;
    for (i, &s) in sims.iter().enumerate() {
        if s > sims[best] {
            best = i;
        }
    }
    let e = &index.entries[best];
    Ok(Retrieval { tcr: e.receptors[0].clone(), context: e.key.clone(), similarity: sims[best] })
}
