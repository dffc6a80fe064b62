//! Triple files and context-disjoint splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EvalPair;
use crate::model::EncodedPair;
use crate::vocab::{self, MAX_TCR_LEN, SRC_LEN};

/// Minimum number of distinct contexts a split needs.
pub const MIN_CONTEXTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub mhc: String,
    pub peptide: String,
    pub tcr: String,
}

impl Triple {
    pub fn context(&self) -> Context {
        (self.mhc.clone(), self.peptide.clone())
    }

    pub fn encode(&self) -> Result<EncodedPair> {
        EncodedPair::new(&self.mhc, &self.peptide, &self.tcr)
    }
}

/// `(mhc, peptide)`.
pub type Context = (String, String);

fn normalize(field: &str, what: &str, line: usize) -> Result<String> {
    let s = field.trim().to_ascii_uppercase();
    if s.is_empty() {
        return Err(Error::MalformedRow { line, reason: format!("empty {what}") });
    }
    if let Some(c) = s.chars().find(|&c| vocab::residue_id(c).is_none()) {
        return Err(Error::MalformedRow { line, reason: format!("unknown residue {c:?} in {what}") });
    }
    Ok(s)
}

/// Header positions of the named columns.
fn columns(header: &str, names: &[&str]) -> Result<Vec<usize>> {
    let cols: Vec<String> = header.split('\t').map(|c| c.trim().to_ascii_lowercase()).collect();
    names
        .iter()
        .map(|n| cols.iter().position(|c| c == n).ok_or_else(|| Error::MissingColumn(n.to_string())))
        .collect()
}

fn rows(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r'))).filter(|(_, l)| !l.trim().is_empty())
}

/// Parses a tab-separated file with an `mhc`, `peptide` and `tcr` header (any
/// column order, extra columns ignored). Residues are upper-cased.
pub fn parse_tsv(text: &str) -> Result<Vec<Triple>> {
    let mut it = rows(text);
    let (_, header) = it.next().ok_or(Error::EmptyInput)?;
    let idx = columns(header, &["mhc", "peptide", "tcr"])?;
    let width = idx.iter().max().unwrap() + 1;
    let mut out = Vec::new();
    for (line, row) in it {
        let f: Vec<&str> = row.split('\t').collect();
        if f.len() < width {
            return Err(Error::MalformedRow { line, reason: format!("expected at least {width} fields, found {}", f.len()) });
        }
        let t = Triple {
            mhc: normalize(f[idx[0]], "mhc", line)?,
            peptide: normalize(f[idx[1]], "peptide", line)?,
            tcr: normalize(f[idx[2]], "tcr", line)?,
        };
        let src = t.mhc.len() + t.peptide.len() + 1;
        if src > SRC_LEN {
            return Err(Error::MalformedRow { line, reason: format!("source of {src} tokens exceeds {SRC_LEN}") });
        }
        if t.tcr.len() > MAX_TCR_LEN {
            return Err(Error::MalformedRow {
                line,
                reason: format!("receptor of {} residues exceeds {MAX_TCR_LEN}", t.tcr.len()),
            });
        }
        out.push(t);
    }
    Ok(out)
}

pub fn load_tsv(path: &Path) -> Result<Vec<Triple>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&text)
}

/// Contexts only (`mhc`, `peptide` columns); a `tcr` column is ignored.
pub fn parse_contexts(text: &str) -> Result<Vec<Context>> {
    let mut it = rows(text);
    let (_, header) = it.next().ok_or(Error::EmptyInput)?;
    let idx = columns(header, &["mhc", "peptide"])?;
    let width = idx.iter().max().unwrap() + 1;
    let mut out = Vec::new();
    for (line, row) in it {
        let f: Vec<&str> = row.split('\t').collect();
        if f.len() < width {
            return Err(Error::MalformedRow { line, reason: format!("expected at least {width} fields, found {}", f.len()) });
        }
        out.push((normalize(f[idx[0]], "mhc", line)?, normalize(f[idx[1]], "peptide", line)?));
    }
    Ok(out)
}

pub fn load_contexts(path: &Path) -> Result<Vec<Context>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_contexts(&text)
}

pub fn format_tsv(triples: &[Triple]) -> String {
    let mut s = String::from("mhc\tpeptide\ttcr\n");
    for t in triples {
        s.push_str(&format!("{}\t{}\t{}\n", t.mhc, t.peptide, t.tcr));
    }
    s
}

pub fn write_tsv(path: &Path, triples: &[Triple]) -> Result<()> {
    std::fs::write(path, format_tsv(triples)).map_err(|e| Error::io(path, e))
}

fn label(field: &str, what: &str, line: usize) -> Result<String> {
    let s = field.trim();
    if s.is_empty() {
        return Err(Error::MalformedRow { line, reason: format!("empty {what}") });
    }
    Ok(s.to_string())
}

fn fields(row: &str, width: usize, line: usize) -> Result<Vec<&str>> {
    let f: Vec<&str> = row.split('\t').collect();
    if f.len() < width {
        return Err(Error::MalformedRow { line, reason: format!("expected at least {width} fields, found {}", f.len()) });
    }
    Ok(f)
}

/// Evaluation pairs: `mhc`, `peptide`, `actual`, `generated` columns. The
/// context columns are free-form labels (an allele name is fine); the two
/// receptors must be residue strings.
pub fn parse_pairs(text: &str) -> Result<Vec<EvalPair>> {
    let mut it = rows(text);
    let (_, header) = it.next().ok_or(Error::EmptyInput)?;
    let idx = columns(header, &["mhc", "peptide", "actual", "generated"])?;
    let width = idx.iter().max().unwrap() + 1;
    it.map(|(line, row)| {
        let f = fields(row, width, line)?;
        Ok(EvalPair {
            mhc: label(f[idx[0]], "mhc", line)?,
            peptide: label(f[idx[1]], "peptide", line)?,
            actual: normalize(f[idx[2]], "actual", line)?,
            generated: normalize(f[idx[3]], "generated", line)?,
        })
    })
    .collect()
}

/// One line of `generate` / `baseline ann` output. Fields that a producer
/// does not have are written as `NA`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRow {
    pub mhc: String,
    pub peptide: String,
    pub rank: usize,
    pub generated: String,
    pub e_llh: Option<f64>,
    pub logprob: Option<f64>,
    pub start: Option<usize>,
    pub temperature: Option<f64>,
    pub beam: Option<usize>,
}

pub const GENERATED_HEADER: &str = "mhc\tpeptide\trank\tgenerated\te_llh\tlogprob\tstart\ttemperature\tbeam";

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub fn format_generated(rows: &[GeneratedRow]) -> String {
    let mut s = format!("{GENERATED_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.mhc,
            r.peptide,
            r.rank,
            r.generated,
            opt(&r.e_llh),
            opt(&r.logprob),
            opt(&r.start),
            opt(&r.temperature),
            opt(&r.beam)
        ));
    }
    s
}

fn parse_opt<T: std::str::FromStr>(s: Option<&str>, what: &str, line: usize) -> Result<Option<T>> {
    match s.map(str::trim) {
        None | Some("NA") | Some("") => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| Error::MalformedRow { line, reason: format!("bad {what} {v:?}") }),
    }
}

/// Reads generator output. Only `mhc`, `peptide` and `generated` are
/// required; a missing `rank` column numbers rows per context in file order.
pub fn parse_generated(text: &str) -> Result<Vec<GeneratedRow>> {
    let mut it = rows(text);
    let (_, header) = it.next().ok_or(Error::EmptyInput)?;
    let idx = columns(header, &["mhc", "peptide", "generated"])?;
    let optional = ["rank", "e_llh", "logprob", "start", "temperature", "beam"].map(|n| columns(header, &[n]).ok().map(|v| v[0]));
    let width = idx.iter().max().unwrap() + 1;
    let mut seen: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut out = Vec::new();
    for (line, row) in it {
        let f = fields(row, width, line)?;
        let get = |i: Option<usize>| i.and_then(|i| f.get(i).copied());
        let mhc = label(f[idx[0]], "mhc", line)?;
        let peptide = label(f[idx[1]], "peptide", line)?;
        let counter = seen.entry((mhc.clone(), peptide.clone())).or_insert(0);
        *counter += 1;
        let rank = parse_opt(get(optional[0]), "rank", line)?.unwrap_or(*counter);
        out.push(GeneratedRow {
            generated: normalize(f[idx[2]], "generated", line)?,
            mhc,
            peptide,
            rank,
            e_llh: parse_opt(get(optional[1]), "e_llh", line)?,
            logprob: parse_opt(get(optional[2]), "logprob", line)?,
            start: parse_opt(get(optional[3]), "start", line)?,
            temperature: parse_opt(get(optional[4]), "temperature", line)?,
            beam: parse_opt(get(optional[5]), "beam", line)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSet {
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub assignment: BTreeMap<Context, Split>,
}

impl SplitSet {
    pub fn get(&self, s: Split) -> &[Triple] {
        match s {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Distinct contexts per split.
    pub fn context_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in self.assignment.values() {
            c[*s as usize] += 1;
        }
        c
    }
}

/// Integer shares of `n` proportional to `ratios` by the largest-remainder
/// method. Ties in the remainder go to the earlier share.
pub fn apportion(n: usize, ratios: &[usize]) -> Vec<usize> {
    let total: usize = ratios.iter().sum();
    let mut shares: Vec<usize> = ratios.iter().map(|r| n * r / total).collect();
    let mut rest = n - shares.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(n * ratios[i] % total));
    for i in order {
        if rest == 0 {
            break;
        }
        shares[i] += 1;
        rest -= 1;
    }
    shares
}

/// Groups contexts that share an MHC or a peptide.
fn components(contexts: &[Context]) -> Vec<Vec<Context>> {
    let mut parent: Vec<usize> = (0..contexts.len()).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let mut by_key: BTreeMap<(u8, &str), usize> = BTreeMap::new();
    for (i, (m, p)) in contexts.iter().enumerate() {
        for key in [(0u8, m.as_str()), (1u8, p.as_str())] {
            match by_key.get(&key) {
                Some(&j) => {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
                None => {
                    by_key.insert(key, i);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<Context>> = BTreeMap::new();
    for (i, c) in contexts.iter().enumerate() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(c.clone());
    }
    groups.into_values().collect()
}

/// Assigns whole contexts to train/valid/test in proportion to `ratios`.
///
/// Sorted distinct contexts are shuffled with the seed and cut by
/// largest-remainder shares. In `strict` mode, contexts connected through a
/// shared MHC or peptide move together, so no allele or peptide crosses a
/// split; the shares then hold only approximately.
pub fn split_contexts(triples: &[Triple], ratios: [usize; 3], seed: u64, strict: bool) -> Result<SplitSet> {
    if ratios.iter().sum::<usize>() == 0 {
        return Err(Error::InvalidConfig("split ratios must not all be zero".into()));
    }
    let contexts: Vec<Context> = triples.iter().map(Triple::context).collect::<BTreeSet<_>>().into_iter().collect();
    if contexts.len() < MIN_CONTEXTS {
        return Err(Error::TooFewContexts { needed: MIN_CONTEXTS, found: contexts.len() });
    }
    let targets = apportion(contexts.len(), &ratios);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = BTreeMap::new();
    if strict {
        let mut groups = components(&contexts);
        groups.shuffle(&mut rng);
        let mut filled = [0usize; 3];
        for g in groups {
            // The split with the largest unfilled share; ties to the earlier.
            let s = (0..3)
                .max_by_key(|&i| (targets[i] as i64 - filled[i] as i64, std::cmp::Reverse(i)))
                .unwrap();
            filled[s] += g.len();
            for c in g {
                assignment.insert(c, Split::ALL[s]);
            }
        }
    } else {
        let mut shuffled = contexts;
        shuffled.shuffle(&mut rng);
        let mut it = shuffled.into_iter();
        for (s, &n) in Split::ALL.iter().zip(&targets) {
            for c in it.by_ref().take(n) {
                assignment.insert(c, *s);
            }
        }
    }
    let mut out = SplitSet { train: vec![], valid: vec![], test: vec![], assignment };
    for t in triples {
        match out.assignment[&t.context()] {
            Split::Train => out.train.push(t.clone()),
            Split::Valid => out.valid.push(t.clone()),
            Split::Test => out.test.push(t.clone()),
        }
    }
    Ok(out)
}
