//! String-level comparison of generated and reference receptors.
//!
//! Three metrics: unit-cost Levenshtein distance, longest common subsequence
//! length, and a Smith-Waterman local-alignment score under BLOSUM62 with
//! affine gaps, normalized to `[0, 1]` by the larger self-alignment score.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLOSUM62_TXT: &str = include_str!("../data/blosum62.txt");
pub const BLOSUM62_SHA256: &str =
    "80f789e6ad4cf190fb953b4539007de83a30ae90a14b56ee6ad6b2a6c56ade84";

pub const DEFAULT_GAP_OPEN: i32 = 10;
pub const DEFAULT_GAP_EXTEND: i32 = 1;

/// Minimum number of single-character insertions, deletions and
/// substitutions turning `a` into `b`.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Length of the longest common (not necessarily contiguous) subsequence.
pub fn lcs_len(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            cur[j] = if a[i - 1] == b[j - 1] {
                prev[j - 1] + 1
            } else {
                prev[j].max(cur[j - 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Integer substitution scores plus affine gap penalties. A gap of length
/// `k` costs `gap_open + (k - 1) * gap_extend`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubstitutionMatrix {
    symbols: Vec<char>,
    lookup: [Option<u8>; 128],
    scores: Vec<i32>,
    pub gap_open: i32,
    pub gap_extend: i32,
}

impl SubstitutionMatrix {
    /// BLOSUM62 with `gap_open = 10`, `gap_extend = 1`.
    pub fn blosum62() -> Self {
        Self::parse(BLOSUM62_TXT).expect("embedded BLOSUM62 is valid")
    }

    /// Parses the NCBI matrix layout: `#` comments, a header row of column
    /// symbols, then one row per symbol.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::DataFile("matrix has no header".into()))?;
        let symbols: Vec<char> = header
            .split_whitespace()
            .map(|s| {
                let mut c = s.chars();
                match (c.next(), c.next()) {
                    (Some(ch), None) if ch.is_ascii() => Ok(ch),
                    _ => Err(Error::DataFile(format!("bad column symbol {s:?}"))),
                }
            })
            .collect::<Result<_>>()?;
        let n = symbols.len();
        let mut lookup = [None; 128];
        for (i, &c) in symbols.iter().enumerate() {
            lookup[c as usize] = Some(i as u8);
        }
        let mut scores = vec![i32::MIN; n * n];
        let mut rows_seen = 0;
        for line in lines {
            let mut fields = line.split_whitespace();
            let sym = fields.next().and_then(|s| s.chars().next()).unwrap_or(' ');
            let row = lookup
                .get(sym as usize)
                .copied()
                .flatten()
                .ok_or_else(|| Error::DataFile(format!("row for unknown symbol {sym:?}")))?
                as usize;
            let values: Vec<i32> = fields
                .map(|f| f.parse().map_err(|_| Error::DataFile(format!("bad score {f:?}"))))
                .collect::<Result<_>>()?;
            if values.len() != n {
                return Err(Error::DataFile(format!("row {sym} has {} scores, want {n}", values.len())));
            }
            scores[row * n..(row + 1) * n].copy_from_slice(&values);
            rows_seen += 1;
        }
        if rows_seen != n || scores.contains(&i32::MIN) {
            return Err(Error::DataFile("matrix is not square".into()));
        }
        Ok(SubstitutionMatrix {
            symbols,
            lookup,
            scores,
            gap_open: DEFAULT_GAP_OPEN,
            gap_extend: DEFAULT_GAP_EXTEND,
        })
    }

    pub fn with_gaps(mut self, gap_open: i32, gap_extend: i32) -> Self {
        self.gap_open = gap_open;
        self.gap_extend = gap_extend;
        self
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    fn index(&self, c: char) -> Result<usize> {
        self.lookup
            .get(c as usize)
            .copied()
            .flatten()
            .map(usize::from)
            .ok_or(Error::UnknownResidue(c))
    }

    pub fn score(&self, a: char, b: char) -> Result<i32> {
        let n = self.symbols.len();
        Ok(self.scores[self.index(a)? * n + self.index(b)?])
    }

    fn encode(&self, s: &str) -> Result<Vec<usize>> {
        s.chars().map(|c| self.index(c)).collect()
    }

    /// Optimal local alignment score (Gotoh recursion).
    pub fn local_score(&self, a: &str, b: &str) -> Result<i32> {
        let a = self.encode(a)?;
        let b = self.encode(b)?;
        Ok(self.local_score_encoded(&a, &b))
    }

    fn local_score_encoded(&self, a: &[usize], b: &[usize]) -> i32 {
        let n = self.symbols.len();
        let (open, extend) = (self.gap_open, self.gap_extend);
        let neg = i32::MIN / 4;
        let m = b.len();
        // h/f hold row i-1 on entry to row i.
        let mut h = vec![0i32; m + 1];
        let mut f = vec![neg; m + 1];
        let mut best = 0;
        for &ai in a {
            let row = &self.scores[ai * n..(ai + 1) * n];
            let mut diag = 0; // h[i-1][j-1]
            let mut e = neg;
            let mut h_left = 0; // h[i][j-1]
            for j in 1..=m {
                e = (h_left - open).max(e - extend);
                f[j] = (h[j] - open).max(f[j] - extend);
                let v = 0.max(diag + row[b[j - 1]]).max(e).max(f[j]);
                diag = h[j];
                h[j] = v;
                h_left = v;
                best = best.max(v);
            }
        }
        best
    }
}

impl Default for SubstitutionMatrix {
    fn default() -> Self {
        Self::blosum62()
    }
}

/// Denominator used to map a local alignment score into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `max(S(a,a), S(b,b))`; the default.
    MaxSelf,
    MinSelf,
    MeanSelf,
    GeometricSelf,
}

impl Normalization {
    pub const ALL: [Normalization; 4] =
        [Normalization::MaxSelf, Normalization::MinSelf, Normalization::MeanSelf, Normalization::GeometricSelf];

    fn denominator(self, saa: i32, sbb: i32) -> f64 {
        let (x, y) = (f64::from(saa), f64::from(sbb));
        match self {
            Normalization::MaxSelf => x.max(y),
            Normalization::MinSelf => x.min(y),
            Normalization::MeanSelf => 0.5 * (x + y),
            Normalization::GeometricSelf => (x * y).sqrt(),
        }
    }
}

/// Normalized Smith-Waterman similarity `S(a,b) / max(S(a,a), S(b,b))`.
pub fn similarity_sw(a: &str, b: &str, matrix: &SubstitutionMatrix) -> Result<f64> {
    similarity_sw_with(a, b, matrix, Normalization::MaxSelf)
}

pub fn similarity_sw_with(
    a: &str,
    b: &str,
    matrix: &SubstitutionMatrix,
    norm: Normalization,
) -> Result<f64> {
    let ea = matrix.encode(a)?;
    let eb = matrix.encode(b)?;
    if ea == eb {
        return Ok(1.0);
    }
    let sab = matrix.local_score_encoded(&ea, &eb);
    let saa = matrix.local_score_encoded(&ea, &ea);
    let sbb = matrix.local_score_encoded(&eb, &eb);
    let den = norm.denominator(saa, sbb);
    if den <= 0.0 {
        return Ok(0.0);
    }
    Ok((f64::from(sab) / den).clamp(0.0, 1.0))
}

/// Similarity against many targets with the query's self-score computed once.
pub(crate) struct SimilarityQuery<'m> {
    matrix: &'m SubstitutionMatrix,
    encoded: Vec<usize>,
    self_score: i32,
}

impl<'m> SimilarityQuery<'m> {
    pub(crate) fn new(query: &str, matrix: &'m SubstitutionMatrix) -> Result<Self> {
        let encoded = matrix.encode(query)?;
        let self_score = matrix.local_score_encoded(&encoded, &encoded);
        Ok(SimilarityQuery { matrix, encoded, self_score })
    }

    pub(crate) fn encode(&self, s: &str) -> Result<Vec<usize>> {
        self.matrix.encode(s)
    }

    pub(crate) fn self_score_of(&self, encoded: &[usize]) -> i32 {
        self.matrix.local_score_encoded(encoded, encoded)
    }

    pub(crate) fn against(&self, other: &[usize], other_self: i32) -> f64 {
        if self.encoded == other {
            return 1.0;
        }
        let den = f64::from(self.self_score.max(other_self));
        if den <= 0.0 {
            return 0.0;
        }
        let s = self.matrix.local_score_encoded(&self.encoded, other);
        (f64::from(s) / den).clamp(0.0, 1.0)
    }
}

/// One (reference, generated) comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub mhc: String,
    pub peptide: String,
    pub actual: String,
    pub generated: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub mhc: String,
    pub peptide: String,
    pub actual: String,
    pub generated: String,
    pub levenshtein: usize,
    pub similarity: f64,
    pub lcs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub levenshtein: MeanStd,
    pub similarity: MeanStd,
    pub lcs: MeanStd,
}

impl Summary {
    fn of<'a>(rows: impl IntoIterator<Item = &'a PairMetrics> + Clone) -> Self {
        Summary {
            n: rows.clone().into_iter().count(),
            levenshtein: MeanStd::of(rows.clone().into_iter().map(|r| r.levenshtein as f64)),
            similarity: MeanStd::of(rows.clone().into_iter().map(|r| r.similarity)),
            lcs: MeanStd::of(rows.into_iter().map(|r| r.lcs as f64)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Grouping {
    pub by_mhc: bool,
    pub by_peptide: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pairs: Vec<PairMetrics>,
    pub overall: Summary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub by_mhc: Option<BTreeMap<String, Summary>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub by_peptide: Option<BTreeMap<String, Summary>>,
}

pub fn pair_metrics(pair: &EvalPair, matrix: &SubstitutionMatrix) -> Result<PairMetrics> {
    Ok(PairMetrics {
        mhc: pair.mhc.clone(),
        peptide: pair.peptide.clone(),
        actual: pair.actual.clone(),
        generated: pair.generated.clone(),
        levenshtein: levenshtein(&pair.actual, &pair.generated),
        similarity: similarity_sw(&pair.actual, &pair.generated, matrix)?,
        lcs: lcs_len(&pair.actual, &pair.generated),
    })
}

/// Per-pair metrics plus mean and population std, overall and per group.
pub fn evaluate(
    pairs: &[EvalPair],
    grouping: Grouping,
    matrix: &SubstitutionMatrix,
) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let rows: Vec<PairMetrics> =
        pairs.par_iter().map(|p| pair_metrics(p, matrix)).collect::<Result<_>>()?;
    let group = |key: fn(&PairMetrics) -> &str| {
        let mut groups: BTreeMap<String, Vec<&PairMetrics>> = BTreeMap::new();
        for r in &rows {
            groups.entry(key(r).to_string()).or_default().push(r);
        }
        groups
            .into_iter()
            .map(|(k, v)| (k, Summary::of(v.iter().copied())))
            .collect::<BTreeMap<_, _>>()
    };
    let by_mhc = grouping.by_mhc.then(|| group(|r| &r.mhc));
    let by_peptide = grouping.by_peptide.then(|| group(|r| &r.peptide));
    Ok(MetricsReport { overall: Summary::of(rows.iter()), by_mhc, by_peptide, pairs: rows })
}

/// Fit of one (gap model, normalization) convention to reference similarities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationFit {
    pub gap_open: i32,
    pub gap_extend: i32,
    pub normalization: Normalization,
    pub max_abs_error: f64,
    pub values: Vec<f64>,
}

/// Scores every convention in the grid against `(a, b, reference)` rows,
/// best fit first.
pub fn calibrate_similarity(
    rows: &[(&str, &str, f64)],
    gaps: &[(i32, i32)],
    matrix: &SubstitutionMatrix,
) -> Result<Vec<CalibrationFit>> {
    let mut fits = Vec::new();
    for &(open, extend) in gaps {
        let m = matrix.clone().with_gaps(open, extend);
        for norm in Normalization::ALL {
            let values = rows
                .iter()
                .map(|(a, b, _)| similarity_sw_with(a, b, &m, norm))
                .collect::<Result<Vec<_>>>()?;
            let max_abs_error = values
                .iter()
                .zip(rows)
                .map(|(v, (_, _, r))| (v - r).abs())
                .fold(0.0, f64::max);
            fits.push(CalibrationFit { gap_open: open, gap_extend: extend, normalization: norm, max_abs_error, values });
        }
    }
    fits.sort_by(|x, y| x.max_abs_error.total_cmp(&y.max_abs_error));
    Ok(fits)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Smith-Waterman-Beyer: every gap length considered explicitly.
    fn local_score_oracle(a: &[char], b: &[char], m: &SubstitutionMatrix) -> i32 {
        let gap = |k: usize| m.gap_open + (k as i32 - 1) * m.gap_extend;
        let mut h = vec![vec![0i32; b.len() + 1]; a.len() + 1];
        let mut best = 0;
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let mut v = 0.max(h[i - 1][j - 1] + m.score(a[i - 1], b[j - 1]).unwrap());
                for k in 1..=i {
                    v = v.max(h[i - k][j] - gap(k));
                }
                for k in 1..=j {
                    v = v.max(h[i][j - k] - gap(k));
                }
                h[i][j] = v;
                best = best.max(v);
            }
        }
        best
    }

    #[test]
    fn matrix_file_is_pinned_and_well_formed() {
        assert_eq!(crate::physchem::sha256_hex(BLOSUM62_TXT.as_bytes()), BLOSUM62_SHA256);
        let m = SubstitutionMatrix::blosum62();
        assert_eq!(m.symbols().len(), 24);
        for &a in m.symbols() {
            for &b in m.symbols() {
                assert_eq!(m.score(a, b).unwrap(), m.score(b, a).unwrap());
            }
        }
        for a in crate::vocab::CANONICAL {
            let d = m.score(a, a).unwrap();
            for b in crate::vocab::CANONICAL {
                assert!(m.score(a, b).unwrap() <= d);
            }
            assert_eq!(m.score('X', a).unwrap(), m.score(a, 'X').unwrap());
        }
        assert_eq!(m.score('W', 'W').unwrap(), 11);
        assert_eq!(m.score('C', 'C').unwrap(), 9);
        assert_eq!(m.score('A', 'R').unwrap(), -1);
        assert_eq!((m.gap_open, m.gap_extend), (10, 1));
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein("CASSPGTVAYEQYF", "CASSPGTAYEQYF"), 1);
        assert_eq!(levenshtein("CASSQSPGGMQYF", "CASSQSPGGTQYF"), 1);
        assert_eq!(levenshtein("", "ABC"), 3);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("CASS", "CASS"), 0);
    }

    #[test]
    fn lcs_examples() {
        assert_eq!(lcs_len("CASSPGTVAYEQYF", "CASSPGTAYEQYF"), 13);
        assert_eq!(lcs_len("CASSLGPNTGELFF", "CASSLAGNTGELFF"), 13);
        assert_eq!(lcs_len("ABC", "XYZ"), 0);
        assert_eq!(lcs_len("", "XYZ"), 0);
    }

    #[test]
    fn similarity_examples() {
        let m = SubstitutionMatrix::blosum62();
        assert_eq!(similarity_sw("CASSLGF", "CASSLGF", &m).unwrap(), 1.0);
        assert_eq!(similarity_sw("", "", &m).unwrap(), 1.0);
        let s = similarity_sw("CASSPGTVAYEQYF", "CASSPGTAYEQYF", &m).unwrap();
        // Frozen from a gap-enumerating oracle: S(a,b)=63, S(a,a)=77, S(b,b)=73.
        // The single deletion costs a full gap-open, so the pair lands near 0.82.
        let a: Vec<char> = "CASSPGTVAYEQYF".chars().collect();
        let b: Vec<char> = "CASSPGTAYEQYF".chars().collect();
        assert_eq!(local_score_oracle(&a, &b, &m), 63);
        assert_eq!(local_score_oracle(&a, &a, &m), 77);
        assert_eq!(local_score_oracle(&b, &b, &m), 73);
        assert!((s - 63.0 / 77.0).abs() < 1e-15);
        // W vs P scores -4, G vs W -2: no positive cell anywhere.
        assert_eq!(similarity_sw("WWW", "PPG", &m).unwrap(), 0.0);
        assert!(matches!(similarity_sw("CAS1", "CAS", &m), Err(Error::UnknownResidue('1'))));
    }

    #[test]
    fn gotoh_matches_explicit_gap_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let alphabet: Vec<char> = "ACDEGKLSWY".chars().collect();
        for gaps in [(10, 1), (4, 1), (3, 2), (1, 1), (2, 0)] {
            let m = SubstitutionMatrix::blosum62().with_gaps(gaps.0, gaps.1);
            for _ in 0..300 {
                let la = rng.gen_range(0..12);
                let lb = rng.gen_range(0..12);
                let a: Vec<char> = (0..la).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect();
                let b: Vec<char> = (0..lb).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect();
                let sa: String = a.iter().collect();
                let sb: String = b.iter().collect();
                assert_eq!(m.local_score(&sa, &sb).unwrap(), local_score_oracle(&a, &b, &m), "{sa} {sb} {gaps:?}");
            }
        }
    }

    #[test]
    fn evaluate_summaries() {
        let m = SubstitutionMatrix::blosum62();
        let p = |mhc: &str, a: &str, g: &str| EvalPair {
            mhc: mhc.into(),
            peptide: "GILGFVFTL".into(),
            actual: a.into(),
            generated: g.into(),
        };
        let one = evaluate(&[p("H1", "CASSIRSSYEQYF", "CASSIRSSYEQYF")], Grouping::default(), &m).unwrap();
        assert_eq!(one.overall.levenshtein.mean, 0.0);
        assert_eq!(one.overall.similarity.mean, 1.0);
        assert_eq!(one.overall.lcs.mean, 13.0);
        assert_eq!(one.overall.lcs.std, 0.0);

        let pairs = vec![p("H1", "CASSIRSSYEQYF", "CASSDRSSYEQYF"), p("H2", "CASSF", "CAS")];
        let g = Grouping { by_mhc: true, by_peptide: true };
        let r = evaluate(&pairs, g, &m).unwrap();
        assert_eq!(r.overall.levenshtein.mean, 1.5);
        assert_eq!(r.overall.levenshtein.std, 0.5);
        assert_eq!(r.by_mhc.as_ref().unwrap().len(), 2);
        assert_eq!(r.by_peptide.as_ref().unwrap()["GILGFVFTL"].n, 2);

        let doubled: Vec<_> = pairs.iter().chain(pairs.iter()).cloned().collect();
        let r2 = evaluate(&doubled, g, &m).unwrap();
        assert_eq!(r2.overall.levenshtein, r.overall.levenshtein);
        assert_eq!(r2.overall.similarity, r.overall.similarity);
        assert_eq!(r2.overall.lcs, r.overall.lcs);

        assert!(matches!(evaluate(&[], g, &m), Err(Error::EmptyInput)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn similarity_is_symmetric_and_bounded(
                a in "[ACDEFGHIKLMNPQRSTVWYX]{0,16}",
                b in "[ACDEFGHIKLMNPQRSTVWYX]{0,16}",
            ) {
                let m = SubstitutionMatrix::blosum62();
                let ab = similarity_sw(&a, &b, &m).unwrap();
                let ba = similarity_sw(&b, &a, &m).unwrap();
                prop_assert_eq!(ab, ba);
                prop_assert!((0.0..=1.0).contains(&ab));
                if ab == 1.0 && a != b {
                    let s = m.local_score(&a, &b).unwrap();
                    prop_assert_eq!(s, m.local_score(&a, &a).unwrap());
                    prop_assert_eq!(s, m.local_score(&b, &b).unwrap());
                }
            }

            #[test]
            fn metric_bounds(a in "[ACGT]{0,12}", b in "[ACGT]{0,12}", c in "[ACGT]{0,12}") {
                let (la, lb) = (a.len(), b.len());
                let lev = levenshtein(&a, &b);
                let lcs = lcs_len(&a, &b);
                prop_assert!(lcs <= la.min(lb));
                prop_assert!(lev >= la.abs_diff(lb));
                prop_assert!(lev <= la + lb - 2 * lcs);
                prop_assert!(levenshtein(&a, &c) <= lev + levenshtein(&b, &c));
                prop_assert_eq!(lev, levenshtein(&b, &a));
            }
        }
    }
}
