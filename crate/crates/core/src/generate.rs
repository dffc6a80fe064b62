//! Inference: beam search, multi-start candidate pooling, legality
//! filtering, likelihood rescoring and diverse top-k selection.

use std::cmp::Ordering;
use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{SimilarityQuery, SubstitutionMatrix};
use crate::model::{self, DecoderState, ModelParams, SourceMemory};
use crate::physchem::DescriptorTable;
use crate::vocab::{self, TokenId, EOS, MAX_TCR_LEN, SOS};

/// Autoregressive next-token scorer driven by [`beam_search`].
pub trait StepScorer: Sync {
    type State: Clone + Send + Sync;

    /// State after the start token, with the first next-token logits.
    fn start(&self) -> (Self::State, Vec<f64>);
    /// Consumes `token` and returns the following logits.
    fn step(&self, state: &mut Self::State, token: usize) -> Vec<f64>;
    fn eos(&self) -> usize;
    /// Tokens that may extend a hypothesis.
    fn emittable(&self) -> &[usize];
}

/// Canonical residue ids; generation never emits `X` or special tokens.
const RESIDUE_IDS: [usize; 20] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19];

/// The transformer as a [`StepScorer`] for one encoded context.
pub struct ModelScorer<'a> {
    params: &'a ModelParams,
    table: &'a DescriptorTable,
    memory: SourceMemory,
}

impl<'a> ModelScorer<'a> {
    pub fn new(params: &'a ModelParams, table: &'a DescriptorTable, src: &[TokenId]) -> Self {
        ModelScorer { params, table, memory: model::encode_memory(params, table, src) }
    }
}

impl StepScorer for ModelScorer<'_> {
    type State = DecoderState;

    fn start(&self) -> (DecoderState, Vec<f64>) {
        let mut s = DecoderState::new(self.params);
        let logits = model::decoder_step(self.params, self.table, &self.memory, &mut s, SOS);
        (s, logits)
    }

    fn step(&self, state: &mut DecoderState, token: usize) -> Vec<f64> {
        model::decoder_step(self.params, self.table, &self.memory, state, token)
    }

    fn eos(&self) -> usize {
        EOS
    }

    fn emittable(&self) -> &[usize] {
        &RESIDUE_IDS
    }
}

/// A finished hypothesis: emitted tokens (EOS excluded) and the summed
/// temperature-scaled log-probability including EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub logprob: f64,
}

struct Beam<S> {
    tokens: Vec<usize>,
    score: f64,
    live: Option<(S, Vec<f64>)>,
}

/// (parent, token or None for carry-over, score, finished)
type Cand = (usize, Option<usize>, f64, bool);

/// Best first; equal scores in lexicographic token order, finished before
/// live.
fn rank(a: (f64, &[usize], bool), b: (f64, &[usize], bool)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)).then_with(|| b.2.cmp(&a.2))
}

/// Beam search in which finished hypotheses keep competing for the `beam`
/// slots. At every step the candidates are the finished hypotheses already in
/// the beam plus every one-token extension (EOS included) of the live ones;
/// the best `beam` survive. Hypotheses with `max_len` tokens can only take
/// EOS. Search ends when the whole beam is finished, and the beam is returned
/// best first.
///
/// With `beam = 1` this is greedy decoding. With `beam` at least the number
/// of sequences of length `<= max_len` nothing is pruned and the first result
/// is the exact MAP sequence.
pub fn beam_search<S: StepScorer>(scorer: &S, beam: usize, max_len: usize, temperature: f64) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::InvalidConfig("beam width must be positive".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    let eos = scorer.eos();
    let mut hyps = vec![Beam { tokens: vec![], score: 0.0, live: Some(scorer.start()) }];
    while hyps.iter().any(|h| h.live.is_some()) {
        let mut cands: Vec<Cand> = Vec::new();
        for (i, h) in hyps.iter().enumerate() {
            match &h.live {
                None => cands.push((i, None, h.score, true)),
                Some((_, logits)) => {
                    let lp = model::log_probs(logits, temperature);
                    cands.push((i, Some(eos), h.score + lp[eos], true));
                    if h.tokens.len() < max_len {
                        for &t in scorer.emittable() {
                            cands.push((i, Some(t), h.score + lp[t], false));
                        }
                    }
                }
            }
        }
        let key = |c: &Cand| -> Vec<usize> {
            let mut t = hyps[c.0].tokens.clone();
            if let (Some(tok), false) = (c.1, c.3) {
                t.push(tok);
            }
            t
        };
        let mut keyed: Vec<(Vec<usize>, Cand)> = cands.into_iter().map(|c| (key(&c), c)).collect();
        keyed.sort_by(|a, b| rank((a.1 .2, &a.0, a.1 .3), (b.1 .2, &b.0, b.1 .3)));
        keyed.truncate(beam);

        let next: Vec<Beam<S::State>> = keyed
            .into_par_iter()
            .map(|(tokens, (parent, tok, score, finished))| {
                let live = if finished {
                    None
                } else {
                    let (state, _) = hyps[parent].live.as_ref().expect("live parent");
                    let mut s = state.clone();
                    let logits = scorer.step(&mut s, tok.expect("extension token"));
                    Some((s, logits))
                };
                Beam { tokens, score, live }
            })
            .collect();
        hyps = next;
    }
    Ok(hyps.into_iter().map(|h| Hypothesis { tokens: h.tokens, logprob: h.score }).collect())
}

/// Argmax decoding that recomputes the full teacher-forced pass at every
/// step. Independent of the incremental path used by [`beam_search`].
pub fn greedy_decode(
    params: &ModelParams,
    table: &DescriptorTable,
    src: &[TokenId],
    max_len: usize,
) -> Hypothesis {
    let mut prefix = vec![SOS];
    let mut logprob = 0.0;
    loop {
        let logits = model::teacher_forced_logits(params, table, src, &prefix);
        let lp = model::log_probs(logits.row(prefix.len() - 1), 1.0);
        let emitted = prefix.len() - 1;
        // Ties favour EOS, then the lower residue id, as in the beam ordering.
        let mut best = EOS;
        if emitted < max_len {
            for &t in &RESIDUE_IDS {
                if lp[t] > lp[best] {
                    best = t;
                }
            }
        }
        logprob += lp[best];
        if best == EOS {
            return Hypothesis { tokens: prefix[1..].to_vec(), logprob };
        }
        prefix.push(best);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// The `k` best distinct candidates by `e_llh`.
    Unique,
    /// Maximal marginal relevance over `e_llh` and alignment similarity.
    Mmr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    /// The best finished hypothesis of each start.
    Map,
    /// Every finished hypothesis in each start's final beam.
    Wide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub n_starts: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub beam_min: usize,
    pub beam_max: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub k: usize,
    pub selection: Selection,
    pub mmr_lambda: f64,
    pub pool: Pool,
    /// Raw pool size limit per context.
    pub candidate_cap: usize,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            n_starts: 20,
            t_min: 0.6,
            t_max: 1.0,
            beam_min: 3,
            beam_max: 10,
            len_min: 10,
            len_max: MAX_TCR_LEN,
            k: 20,
            selection: Selection::Unique,
            mmr_lambda: 0.5,
            pool: Pool::Map,
            candidate_cap: 1024,
            seed: 0,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_starts == 0 || self.k == 0 || self.candidate_cap == 0 {
            return bad("n_starts, k and candidate_cap must be positive");
        }
        if !(self.t_min > 0.0 && self.t_min <= self.t_max && self.t_max.is_finite()) {
            return bad("temperatures must satisfy 0 < t_min <= t_max");
        }
        if self.beam_min == 0 || self.beam_min > self.beam_max {
            return bad("beam widths must satisfy 1 <= beam_min <= beam_max");
        }
        if self.len_min == 0 || self.len_min > self.len_max || self.len_max > MAX_TCR_LEN {
            return bad("lengths must satisfy 1 <= len_min <= len_max <= 26");
        }
        if !(0.0..=1.0).contains(&self.mmr_lambda) {
            return bad("mmr_lambda must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Start {
    pub index: usize,
    pub temperature: f64,
    pub beam: usize,
}

/// Per-start temperature and beam width, drawn uniformly from the configured
/// ranges by a stream seeded with `cfg.seed`.
pub fn draw_starts(cfg: &GenerateConfig) -> Vec<Start> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_starts)
        .map(|index| {
            let temperature = rng.gen_range(cfg.t_min..=cfg.t_max);
            let beam = rng.gen_range(cfg.beam_min..=cfg.beam_max);
            Start { index, temperature, beam }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCandidate {
    pub sequence: String,
    /// Search score at the start's temperature.
    pub logprob: f64,
    pub start: Start,
}

/// Runs one beam search per start and pools the results in start order.
pub fn multi_start(
    params: &ModelParams,
    table: &DescriptorTable,
    mhc: &str,
    peptide: &str,
    cfg: &GenerateConfig,
) -> Result<Vec<RawCandidate>> {
    cfg.validate()?;
    let src = encode_context(mhc, peptide)?;
    let scorer = ModelScorer::new(params, table, &src);
    let per_start: Vec<Vec<RawCandidate>> = draw_starts(cfg)
        .into_par_iter()
        .map(|start| {
            let mut hyps = beam_search(&scorer, start.beam, cfg.len_max, start.temperature)?;
            if cfg.pool == Pool::Map {
                hyps.truncate(1);
            }
            Ok(hyps
                .into_iter()
                .map(|h| RawCandidate { sequence: vocab::decode_ids(&h.tokens), logprob: h.logprob, start })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut pool: Vec<RawCandidate> = per_start.into_iter().flatten().collect();
    pool.truncate(cfg.candidate_cap);
    Ok(pool)
}

fn encode_context(mhc: &str, peptide: &str) -> Result<Vec<TokenId>> {
    let s = vocab::encode_source(mhc, peptide, &vocab::build_vocab())?;
    Ok(s.ids[..s.active_len()].to_vec())
}

/// Keeps candidates whose length lies in `[len_min, len_max]` and that do not
/// reproduce a training receptor.
pub fn legality_filter(
    pool: Vec<RawCandidate>,
    cfg: &GenerateConfig,
    training: &HashSet<String>,
) -> Vec<RawCandidate> {
    pool.into_iter()
        .filter(|c| {
            let n = c.sequence.len();
            n >= cfg.len_min && n <= cfg.len_max && !training.contains(&c.sequence)
        })
        .collect()
}

/// Mean negative log-likelihood per token of `seq` followed by EOS, under
/// teacher forcing at temperature 1.
pub fn score_llh(params: &ModelParams, table: &DescriptorTable, src: &[TokenId], seq: &str) -> Result<f64> {
    if seq.is_empty() {
        return Err(Error::EmptySequence);
    }
    let t = vocab::encode_target(seq, &vocab::build_vocab())?;
    let ids = &t.ids[..t.active_len()];
    let logits = model::teacher_forced_logits(params, table, src, &ids[..ids.len() - 1]);
    let mut nll = 0.0;
    for (i, &y) in ids[1..].iter().enumerate() {
        nll -= model::log_probs(logits.row(i), 1.0)[y];
    }
    Ok(nll / (ids.len() - 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub sequence: String,
    pub e_llh: f64,
    pub logprob: f64,
    pub start: Start,
}

fn by_rank(a: &Candidate, b: &Candidate) -> Ordering {
    a.e_llh.total_cmp(&b.e_llh).then_with(|| a.sequence.cmp(&b.sequence))
}

/// Rescores legal candidates, keeps the first occurrence of each sequence and
/// sorts by `e_llh` ascending (ties lexicographic).
pub fn rank_candidates(
    params: &ModelParams,
    table: &DescriptorTable,
    src: &[TokenId],
    legal: Vec<RawCandidate>,
) -> Result<Vec<Candidate>> {
    let mut seen = HashSet::new();
    let unique: Vec<RawCandidate> = legal.into_iter().filter(|c| seen.insert(c.sequence.clone())).collect();
    let mut ranked: Vec<Candidate> = unique
        .into_par_iter()
        .map(|c| {
            let e_llh = score_llh(params, table, src, &c.sequence)?;
            Ok(Candidate { sequence: c.sequence, e_llh, logprob: c.logprob, start: c.start })
        })
        .collect::<Result<_>>()?;
    ranked.sort_by(by_rank);
    Ok(ranked)
}

/// Picks up to `k` candidates from a ranked pool.
///
/// MMR relevance is `-e_llh` min-max scaled to `[0, 1]` over the pool (all
/// ones when constant); redundancy is the highest alignment similarity to an
/// already selected candidate. Each pick maximizes
/// `lambda * relevance - (1 - lambda) * redundancy`, ties by rank.
pub fn select_diverse(
    ranked: &[Candidate],
    k: usize,
    selection: Selection,
    lambda: f64,
    matrix: &SubstitutionMatrix,
) -> Result<Vec<Candidate>> {
    let mut pool: Vec<&Candidate> = Vec::with_capacity(ranked.len());
    let mut seen = HashSet::new();
    for c in ranked {
        if seen.insert(c.sequence.as_str()) {
            pool.push(c);
        }
    }
    pool.sort_by(|a, b| by_rank(a, b));
    if selection == Selection::Unique || pool.len() <= 1 {
        return Ok(pool.into_iter().take(k).cloned().collect());
    }

    let lo = pool.iter().map(|c| c.e_llh).fold(f64::INFINITY, f64::min);
    let hi = pool.iter().map(|c| c.e_llh).fold(f64::NEG_INFINITY, f64::max);
    let relevance: Vec<f64> =
        pool.iter().map(|c| if hi > lo { (hi - c.e_llh) / (hi - lo) } else { 1.0 }).collect();
    let encoded: Vec<(Vec<usize>, i32)> = pool
        .iter()
        .map(|c| {
            let q = SimilarityQuery::new(&c.sequence, matrix)?;
            let e = q.encode(&c.sequence)?;
            let s = q.self_score_of(&e);
            Ok((e, s))
        })
        .collect::<Result<_>>()?;

    let mut redundancy = vec![0.0f64; pool.len()];
    let mut taken = vec![false; pool.len()];
    let mut out = Vec::with_capacity(k.min(pool.len()));
    while out.len() < k.min(pool.len()) {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..pool.len()).filter(|&i| !taken[i]) {
            let score = lambda * relevance[i] - (1.0 - lambda) * redundancy[i];
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((i, score));
            }
        }
        let (pick, _) = best.expect("pool has untaken candidates");
        taken[pick] = true;
        out.push(pool[pick].clone());
        let q = SimilarityQuery::new(&pool[pick].sequence, matrix)?;
        let updates: Vec<(usize, f64)> = (0..pool.len())
            .into_par_iter()
            .filter(|&i| !taken[i])
            .map(|i| (i, q.against(&encoded[i].0, encoded[i].1)))
            .collect();
        for (i, s) in updates {
            redundancy[i] = redundancy[i].max(s);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub mhc: String,
    pub peptide: String,
    pub raw: usize,
    pub legal: usize,
    pub ranked: Vec<Candidate>,
    pub selected: Vec<Candidate>,
}

/// The full pipeline for one context.
pub fn generate(
    params: &ModelParams,
    table: &DescriptorTable,
    mhc: &str,
    peptide: &str,
    cfg: &GenerateConfig,
    training: &HashSet<String>,
    matrix: &SubstitutionMatrix,
) -> Result<CandidateSet> {
    let raw = multi_start(params, table, mhc, peptide, cfg)?;
    let n_raw = raw.len();
    let legal = legality_filter(raw, cfg, training);
    let n_legal = legal.len();
    let src = encode_context(mhc, peptide)?;
    let ranked = rank_candidates(params, table, &src, legal)?;
    let selected = select_diverse(&ranked, cfg.k, cfg.selection, cfg.mmr_lambda, matrix)?;
    Ok(CandidateSet { mhc: mhc.to_string(), peptide: peptide.to_string(), raw: n_raw, legal: n_legal, ranked, selected })
}

/// [`generate`] over many contexts; output order follows the input.
pub fn generate_many(
    params: &ModelParams,
    table: &DescriptorTable,
    contexts: &[(String, String)],
    cfg: &GenerateConfig,
    training: &HashSet<String>,
    matrix: &SubstitutionMatrix,
) -> Result<Vec<CandidateSet>> {
    contexts.par_iter().map(|(m, p)| generate(params, table, m, p, cfg, training, matrix)).collect()
}

/// Distinct receptors of a training set.
pub fn training_receptors<'a>(tcrs: impl IntoIterator<Item = &'a str>) -> HashSet<String> {
    tcrs.into_iter().map(str::to_string).collect()
}
