//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a gating criterion fails.
//!
//! Run alone with `cargo test -p tcrgen --test acceptance`.

mod common;

use std::collections::{BTreeSet, HashSet};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcrgen::checkpoint;
use tcrgen::data::{self, split_contexts, Triple};
use tcrgen::generate::{
    beam_search, generate, greedy_decode, training_receptors, GenerateConfig, ModelScorer, Pool, Selection,
    StepScorer,
};
use tcrgen::metrics::{calibrate_similarity, lcs_len, levenshtein, SubstitutionMatrix};
use tcrgen::model::{
    attn_phys_decomposition, batch_loss, teacher_forced_logits, EncodedPair, ModelConfig, ModelParams,
};
use tcrgen::params::Parameters;
use tcrgen::physchem::{DescriptorTable, N_DESCRIPTORS};
use tcrgen::train::{perplexity, train, TrainConfig, TrainOutcome};
use tcrgen::vocab::{self, SOS, VOCAB_SIZE};

// Pinned thresholds.
const METRIC_RUNTIME: Duration = Duration::from_secs(1);
const SIM_TOL: f64 = 0.01;
const ORACLE_PAIRS: usize = 100_000;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_ABS_FLOOR: f64 = 1e-8;
const GRAD_STEP: f64 = 1e-4;
const GRAD_RUNTIME: Duration = Duration::from_secs(120);
const OVERFIT_LOSS: f64 = 0.1;
const OVERFIT_STEPS: usize = 2000;
const OVERFIT_RECALL: f64 = 0.9;
const OVERFIT_PPL: f64 = 1.2;
const OVERFIT_RUNTIME: Duration = Duration::from_secs(600);
const BEAM_LOGPROB_TOL: f64 = 1e-12;
const ZSCORE_TOL: f64 = 1e-10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Suite {
    failed: Vec<&'static str>,
    /// Criterion numbers to run, from `ACCEPTANCE_ONLY=1,5`; all when unset.
    only: Option<Vec<String>>,
}

impl Suite {
    fn run(&mut self, id: &'static str, gating: bool, f: impl FnOnce() -> Outcome) {
        let number = id.split(' ').next().unwrap().trim_end_matches(char::is_alphabetic);
        if self.only.as_ref().is_some_and(|o| !o.iter().any(|n| n == number)) {
            return;
        }
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        let verdict = match (o.pass, gating) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (non-gating)",
        };
        println!("{verdict:<17} {id:<28} {} [{secs:.2}s]", o.detail);
        if !o.pass && gating {
            self.failed.push(id);
        }
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_tcrgen")
}

fn run_cli(args: &[&str]) -> std::process::Output {
    let out = Command::new(bin()).args(args).output().expect("spawn tcrgen");
    if !out.status.success() {
        panic!("tcrgen {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

// ---------------------------------------------------------------------------
// 1. Metric golden corpus

fn metric_golden() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let pairs = fixture("demo_pairs.tsv");
    let t = Instant::now();
    run_cli(&["evaluate", "--pairs", path_str(&pairs), "--out", path_str(&report)]);
    let elapsed = t.elapsed();

    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let rows = json["pairs"].as_array().unwrap();
    let lev: Vec<u64> = rows.iter().map(|r| r["levenshtein"].as_u64().unwrap()).collect();
    let lcs: Vec<u64> = rows.iter().map(|r| r["lcs"].as_u64().unwrap()).collect();
    let lev_ok = lev == [1, 1, 1, 3, 2, 1, 1, 3, 1, 4];
    let lcs_ok = lcs == [13, 12, 13, 13, 13, 12, 11, 12, 13, 12];

    let text = std::fs::read_to_string(&pairs).unwrap();
    let refs: Vec<(String, String, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[2].to_string(), f[3].to_string(), f[5].parse().unwrap())
        })
        .collect();
    let rows_ref: Vec<(&str, &str, f64)> = refs.iter().map(|(a, b, s)| (a.as_str(), b.as_str(), *s)).collect();
    let mut gaps = Vec::new();
    for open in 1..=15 {
        for extend in 1..=open {
            gaps.push((open, extend));
        }
    }
    let fits = calibrate_similarity(&rows_ref, &gaps, &SubstitutionMatrix::blosum62()).unwrap();
    let best = &fits[0];
    let dice_err = refs
        .iter()
        .map(|(a, b, s)| (2.0 * lcs_len(a, b) as f64 / (a.len() + b.len()) as f64 - s).abs())
        .fold(0.0, f64::max);
    let sim = if best.max_abs_error <= SIM_TOL {
        format!("sim calibrated: open {} extend {} {:?}", best.gap_open, best.gap_extend, best.normalization)
    } else {
        format!(
            "sim not reproduced by any SW convention (best open {} extend {} {:?}, max err {:.3}); \
             2*LCS/(|a|+|b|) max err {:.4}",
            best.gap_open, best.gap_extend, best.normalization, best.max_abs_error, dice_err
        )
    };
    outcome(
        lev_ok && lcs_ok && elapsed < METRIC_RUNTIME,
        format!("lev {lev_ok} lcs {lcs_ok} runtime {:.0} ms; {sim}", elapsed.as_secs_f64() * 1e3),
    )
}

// ---------------------------------------------------------------------------
// 2. Oracle equivalence

fn all_strings(alphabet: &[u8], max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for &c in alphabet {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn oracle_equivalence() -> Outcome {
    let alphabet = b"ACDE";
    let mut mismatches = 0;
    let mut checked = 0;
    let small = all_strings(alphabet, 4);
    for a in &small {
        for b in &small {
            let (sa, sb) = (std::str::from_utf8(a).unwrap(), std::str::from_utf8(b).unwrap());
            mismatches += usize::from(levenshtein(sa, sb) != levenshtein_oracle(a, b));
            mismatches += usize::from(lcs_len(sa, sb) != lcs_oracle(a, b));
            checked += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<u8> {
        let n = rng.gen_range(0..=7);
        (0..n).map(|_| alphabet[rng.gen_range(0..4)]).collect()
    };
    for _ in 0..ORACLE_PAIRS {
        let (a, b) = (draw(&mut rng), draw(&mut rng));
        let (sa, sb) = (std::str::from_utf8(&a).unwrap(), std::str::from_utf8(&b).unwrap());
        mismatches += usize::from(levenshtein(sa, sb) != levenshtein_oracle(&a, &b));
        mismatches += usize::from(lcs_len(sa, sb) != lcs_oracle(&a, &b));
        checked += 1;
    }
    outcome(mismatches == 0, format!("{checked} pairs, {mismatches} mismatches"))
}

// ---------------------------------------------------------------------------
// 3. Gradient correctness

fn gradient_correctness() -> Outcome {
    let table = DescriptorTable::standard();
    let cfg = grad_check_config(true);
    let mut p = ModelParams::init(&cfg).unwrap();
    randomize(&mut p, 29, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    // Source: 7 + 4 residues plus SEP = 12 tokens. Target: 6 residues plus
    // SOS and EOS = 8 tokens.
    let batch = vec![
        EncodedPair::new(&random_residues(&mut rng, 7), &random_residues(&mut rng, 4), &random_residues(&mut rng, 6))
            .unwrap(),
        EncodedPair::new(&random_residues(&mut rng, 7), &random_residues(&mut rng, 4), &random_residues(&mut rng, 6))
            .unwrap(),
    ];
    assert!(batch.iter().all(|e| e.src.len() == 12 && e.tgt.len() == 8));
    let t = Instant::now();
    let r = gradient_check(&p, &batch, &table, 0.1, GRAD_STEP, GRAD_REL_TOL, GRAD_ABS_FLOOR);
    let elapsed = t.elapsed();
    let mut detail = format!(
        "d={} {} components in {} tensors, {} failures, worst rel {:.2e}",
        cfg.d_model(),
        r.checked,
        r.tensors,
        r.failures.len(),
        r.worst_rel
    );
    if let Some(f) = r.failures.first() {
        detail.push_str(&format!("; first {f:?}"));
    }
    outcome(r.failures.is_empty() && elapsed < GRAD_RUNTIME && cfg.phys_enabled, detail)
}

// ---------------------------------------------------------------------------
// 4. Causality

fn causality() -> Outcome {
    let table = DescriptorTable::standard();
    let mut p = ModelParams::init(&ModelConfig { seed: 8, ..ModelConfig::with_width(16, 2) }).unwrap();
    randomize(&mut p, 9, 0.3);
    let mut violations = 0;
    let mut compared = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n_src = rng.gen_range(2..=20);
        let src: Vec<usize> = (0..n_src).map(|_| rng.gen_range(0..20)).collect();
        let n = rng.gen_range(2..=12);
        let mut tgt: Vec<usize> = vec![SOS];
        tgt.extend((1..n).map(|_| rng.gen_range(0..20)));
        let j = rng.gen_range(0..n);
        let base = teacher_forced_logits(&p, &table, &src, &tgt);
        let mut changed = tgt.clone();
        changed[j] = (tgt[j] + 1 + rng.gen_range(0..VOCAB_SIZE - 1)) % VOCAB_SIZE;
        let after = teacher_forced_logits(&p, &table, &src, &changed);
        for i in 0..j {
            compared += 1;
            if base.row(i).iter().zip(after.row(i)).any(|(a, b)| a.to_bits() != b.to_bits()) {
                violations += 1;
            }
        }
    }
    outcome(violations == 0, format!("100 inputs, {compared} earlier rows compared, {violations} changed"))
}

// ---------------------------------------------------------------------------
// 5. Overfit capacity

fn overfit_corpus() -> Vec<Triple> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let alleles: Vec<String> = (0..4).map(|_| random_residues(&mut rng, 34)).collect();
    let mut peptides = BTreeSet::new();
    let mut out = Vec::new();
    while out.len() < 32 {
        let peptide = random_residues(&mut rng, 9);
        if !peptides.insert(peptide.clone()) {
            continue;
        }
        let n = rng.gen_range(6..=10);
        let tcr = format!("CASS{}F", random_residues(&mut rng, n));
        out.push(Triple { mhc: alleles[out.len() % 4].clone(), peptide, tcr });
    }
    out
}

fn overfit_model_config() -> ModelConfig {
    ModelConfig { d_ff: Some(64), seed: 3, ..ModelConfig::with_width(32, 2) }
}

fn overfit_train_config() -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        weight_decay: 0.0,
        batch_size: 32,
        max_epochs: OVERFIT_STEPS,
        max_steps: Some(OVERFIT_STEPS),
        patience: OVERFIT_STEPS,
        label_smoothing: 0.0,
        // Train past the threshold so greedy decoding is stable.
        target_loss: Some(OVERFIT_LOSS / 10.0),
        seed: 11,
        ..TrainConfig::default()
    }
}

fn encode_all(triples: &[Triple]) -> Vec<EncodedPair> {
    triples.iter().map(|t| t.encode().unwrap()).collect()
}

fn overfit(slot: &mut Option<(Vec<Triple>, TrainOutcome)>) -> Outcome {
    let table = DescriptorTable::standard();
    let corpus = overfit_corpus();
    let enc = encode_all(&corpus);
    let t = Instant::now();
    let out = train(&enc, &enc, &overfit_model_config(), &overfit_train_config(), &table).unwrap();
    let loss = batch_loss(&enc, &out.best, &table, 0.0).unwrap();
    let ppl = perplexity(&out.best, &table, &enc).unwrap();
    let recalled = enc
        .iter()
        .zip(&corpus)
        .filter(|(e, t)| vocab::decode_ids(&greedy_decode(&out.best, &table, &e.src, vocab::MAX_TCR_LEN).tokens) == t.tcr)
        .count();
    let elapsed = t.elapsed();
    let recall = recalled as f64 / corpus.len() as f64;
    let steps = out.report.total_steps;
    // One step per epoch at this batch size.
    let first_below = out.report.epochs.iter().find(|e| e.train_loss < OVERFIT_LOSS).map(|e| e.epoch);
    let pass = loss < OVERFIT_LOSS
        && first_below.is_some()
        && steps <= OVERFIT_STEPS
        && recall >= OVERFIT_RECALL
        && ppl < OVERFIT_PPL
        && elapsed < OVERFIT_RUNTIME;
    let detail = format!(
        "step loss < {OVERFIT_LOSS} first at step {first_below:?}; loss {loss:.4} after {steps} steps ({:?}), \
         train ppl {ppl:.4}, greedy recall {recalled}/32",
        out.report.stop_reason
    );
    *slot = Some((corpus, out));
    outcome(pass, detail)
}

// ---------------------------------------------------------------------------
// 6. Ablation contract

fn ablation() -> Outcome {
    let base = ModelConfig { d_ff: Some(32), seed: 4, ..ModelConfig::with_width(16, 2) };
    let phys = ModelParams::init(&base).unwrap().num_params();
    let ablated_cfg = ModelConfig { phys_enabled: false, ..base.clone() };
    let ablated = ModelParams::init(&ablated_cfg).unwrap().num_params();

    let corpus = overfit_corpus();
    let enc = encode_all(&corpus);
    let tc = TrainConfig { batch_size: 8, max_epochs: 2, seed: 1, ..TrainConfig::default() };
    let gc = GenerateConfig { n_starts: 3, beam_min: 2, beam_max: 3, len_min: 1, k: 5, seed: 2, ..Default::default() };
    let matrix = SubstitutionMatrix::blosum62();
    let training = training_receptors(corpus.iter().map(|t| t.tcr.as_str()));
    let pipeline_reads = |cfg: &ModelConfig| {
        let table = DescriptorTable::standard();
        let out = train(&enc, &enc, cfg, &tc, &table).unwrap();
        let set = generate(&out.best, &table, &corpus[0].mhc, &corpus[0].peptide, &gc, &training, &matrix).unwrap();
        (table.reads(), set.raw)
    };
    let (reads_ablated, raw_ablated) = pipeline_reads(&ablated_cfg);
    let (reads_phys, _) = pipeline_reads(&base);

    // The same CLI pipeline with and without the flag.
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    data::write_tsv(&d.join("train.tsv"), &corpus[..24]).unwrap();
    data::write_tsv(&d.join("valid.tsv"), &corpus[24..]).unwrap();
    let mut cli_phys = Vec::new();
    for (name, flag) in [("ablated", Some("--no-phys")), ("phys", None)] {
        let ckpt = d.join(format!("{name}.ckpt"));
        let generated = d.join(format!("{name}.tsv"));
        let mut args = vec![
            "train", "--data", path_str(d), "--out", path_str(&ckpt), "--seed", "3", "--d-tok", "8", "--d-phys", "4",
            "--d-pos", "4", "--n-head", "2", "--n-enc", "1", "--n-dec", "1", "--max-epochs", "15", "--batch-size", "8",
            "--lr", "0.003",
        ];
        args.extend(flag);
        run_cli(&args);
        run_cli(&[
            "generate", "--checkpoint", path_str(&ckpt), "--contexts", path_str(&d.join("valid.tsv")), "--train",
            path_str(&d.join("train.tsv")), "--out", path_str(&generated), "--seed", "5", "--n-starts", "2",
            "--beam-max", "3", "--len-min", "1",
        ]);
        run_cli(&[
            "evaluate", "--truth", path_str(&d.join("valid.tsv")), "--generated", path_str(&generated), "--out",
            path_str(&d.join(format!("{name}.json"))),
        ]);
        cli_phys.push(checkpoint::load(&ckpt).unwrap().params.config.phys_enabled);
    }

    let pass = ablated < phys && reads_ablated == 0 && reads_phys > 0 && raw_ablated > 0 && cli_phys == [false, true];
    outcome(
        pass,
        format!(
            "params {ablated} < {phys}; descriptor reads ablated {reads_ablated}, phys {reads_phys}; \
             CLI train/generate/evaluate ok, phys_enabled {cli_phys:?}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Beam search

/// Toy scorer over `{0, 1, 2}` plus EOS = 3 whose logits depend on the whole
/// prefix through a seeded generator.
struct ToyModel {
    seed: u64,
}

impl ToyModel {
    fn logits(&self, prefix: &[usize]) -> Vec<f64> {
        let key = prefix.iter().fold(1u64, |k, &t| k * 4 + t as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(1_000_003).wrapping_add(key));
        (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect()
    }

    fn log_softmax(&self, prefix: &[usize]) -> Vec<f64> {
        let l = self.logits(prefix);
        let lse = l.iter().map(|v| v.exp()).sum::<f64>().ln();
        l.iter().map(|v| v - lse).collect()
    }
}

impl StepScorer for ToyModel {
    type State = Vec<usize>;

    fn start(&self) -> (Vec<usize>, Vec<f64>) {
        (vec![], self.logits(&[]))
    }

    fn step(&self, state: &mut Vec<usize>, token: usize) -> Vec<f64> {
        state.push(token);
        self.logits(state)
    }

    fn eos(&self) -> usize {
        3
    }

    fn emittable(&self) -> &[usize] {
        &[0, 1, 2]
    }
}

/// Exhaustive MAP over every sequence of length <= `max_len`.
fn brute_force_map(m: &ToyModel, max_len: usize) -> (Vec<usize>, f64) {
    let mut best = (vec![], f64::NEG_INFINITY);
    let mut stack = vec![(vec![], 0.0)];
    while let Some((prefix, score)) = stack.pop() {
        let lp = m.log_softmax(&prefix);
        let done = score + lp[3];
        if done > best.1 || (done == best.1 && prefix < best.0) {
            best = (prefix.clone(), done);
        }
        if prefix.len() < max_len {
            for t in 0..3 {
                let mut next = prefix.clone();
                next.push(t);
                stack.push((next, score + lp[t]));
            }
        }
    }
    best
}

/// The overfit model when criterion 5 ran, otherwise a short run on the same
/// corpus. A random initialization almost never emits EOS at a varying step.
fn trained_params(trained: &Option<(Vec<Triple>, TrainOutcome)>) -> (Vec<Triple>, ModelParams) {
    match trained {
        Some((c, o)) => (c.clone(), o.best.clone()),
        None => {
            let corpus = overfit_corpus();
            let enc = encode_all(&corpus);
            let tc = TrainConfig { max_steps: Some(300), target_loss: None, ..overfit_train_config() };
            let out = train(&enc, &enc, &overfit_model_config(), &tc, &DescriptorTable::standard()).unwrap();
            (corpus, out.best)
        }
    }
}

fn beam_vs_greedy(trained: &Option<(Vec<Triple>, TrainOutcome)>) -> Outcome {
    let table = DescriptorTable::standard();
    let (corpus, p) = trained_params(trained);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut sources: Vec<Vec<usize>> = encode_all(&corpus).into_iter().map(|e| e.src).collect();
    while sources.len() < 100 {
        let mhc = &corpus[rng.gen_range(0..corpus.len())].mhc;
        sources.push(EncodedPair::new(mhc, &random_residues(&mut rng, 9), "C").unwrap().src);
    }
    let mut equal = 0;
    let mut lengths = BTreeSet::new();
    for src in &sources {
        let scorer = ModelScorer::new(&p, &table, src);
        let beam = beam_search(&scorer, 1, vocab::MAX_TCR_LEN, 1.0).unwrap();
        let greedy = greedy_decode(&p, &table, src, vocab::MAX_TCR_LEN);
        lengths.insert(greedy.tokens.len());
        if beam[0].tokens == greedy.tokens && (beam[0].logprob - greedy.logprob).abs() <= BEAM_LOGPROB_TOL {
            equal += 1;
        }
    }
    outcome(equal == 100, format!("{equal}/100 contexts equal; greedy lengths {lengths:?}"))
}

fn beam_vs_brute_force() -> Outcome {
    const MAX_LEN: usize = 4;
    // 1 + 3 + 9 + 27 + 81 sequences.
    const ALL: usize = 121;
    let mut exact = 0;
    let mut narrow_bound_ok = true;
    let mut narrow_misses = 0;
    for seed in 0..50 {
        let m = ToyModel { seed };
        let (map, map_lp) = brute_force_map(&m, MAX_LEN);
        let top = &beam_search(&m, ALL, MAX_LEN, 1.0).unwrap()[0];
        if top.tokens == map && (top.logprob - map_lp).abs() <= BEAM_LOGPROB_TOL {
            exact += 1;
        }
        for b in [1, 2, 3] {
            let h = &beam_search(&m, b, MAX_LEN, 1.0).unwrap()[0];
            narrow_bound_ok &= h.logprob <= map_lp + BEAM_LOGPROB_TOL;
            narrow_misses += usize::from(h.tokens != map);
        }
    }
    outcome(
        exact == 50 && narrow_bound_ok,
        format!("width {ALL}: {exact}/50 MAP; widths 1-3 never exceed MAP, {narrow_misses}/150 miss it"),
    )
}

// ---------------------------------------------------------------------------
// 8. Pipeline determinism and containment

fn pipeline(trained: &Option<(Vec<Triple>, TrainOutcome)>) -> Outcome {
    let table = DescriptorTable::standard();
    let matrix = SubstitutionMatrix::blosum62();
    let (corpus, params) = trained_params(trained);
    let training = training_receptors(corpus.iter().map(|t| t.tcr.as_str()));
    let cfg = GenerateConfig { n_starts: 8, len_min: 8, len_max: 16, k: 10, pool: Pool::Wide, seed: 99, ..Default::default() };
    let mut deterministic = true;
    let mut contained = true;
    let mut mmr_equal = true;
    let mut selected = 0;
    for t in corpus.iter().take(4) {
        let a = generate(&params, &table, &t.mhc, &t.peptide, &cfg, &training, &matrix).unwrap();
        let b = generate(&params, &table, &t.mhc, &t.peptide, &cfg, &training, &matrix).unwrap();
        deterministic &= a == b;
        selected += a.selected.len();
        contained &= a.selected.iter().all(|c| {
            let n = c.sequence.len();
            n >= cfg.len_min && n <= cfg.len_max && !training.contains(&c.sequence)
        });
        let mmr_cfg = GenerateConfig { selection: Selection::Mmr, mmr_lambda: 1.0, ..cfg.clone() };
        let m = generate(&params, &table, &t.mhc, &t.peptide, &mmr_cfg, &training, &matrix).unwrap();
        mmr_equal &= m.selected == a.selected;
    }

    // Excluding the current top candidate removes it and nothing else.
    let t = &corpus[0];
    let open = generate(&params, &table, &t.mhc, &t.peptide, &cfg, &HashSet::new(), &matrix).unwrap();
    let mut exclusion_ok = true;
    if let Some(top) = open.selected.first() {
        let set: HashSet<String> = [top.sequence.clone()].into();
        let closed = generate(&params, &table, &t.mhc, &t.peptide, &cfg, &set, &matrix).unwrap();
        exclusion_ok = closed.selected.iter().all(|c| c.sequence != top.sequence)
            && closed.ranked.iter().map(|c| &c.sequence).eq(open.ranked.iter().skip(1).map(|c| &c.sequence));
    }
    outcome(
        deterministic && contained && mmr_equal && exclusion_ok && selected > 0,
        format!(
            "{selected} selected over 4 contexts; deterministic {deterministic}, contained {contained}, \
             exclusion {exclusion_ok}, mmr(1)=unique {mmr_equal}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. Split hygiene

/// Hare quotas with exact integer remainders; ties to the lower index.
fn apportion_oracle(n: usize, ratios: &[usize]) -> Vec<usize> {
    let total: usize = ratios.iter().sum();
    let mut seats: Vec<usize> = vec![0; ratios.len()];
    let mut left = n;
    for (i, r) in ratios.iter().enumerate() {
        seats[i] = (n * r) / total;
        left -= seats[i];
    }
    while left > 0 {
        // Largest remaining fractional part among shares not yet topped up.
        let mut pick: Option<usize> = None;
        for i in 0..ratios.len() {
            if seats[i] * total > n * ratios[i] {
                continue;
            }
            let frac = n * ratios[i] - seats[i] * total;
            if pick.is_none_or(|j| frac > n * ratios[j] - seats[j] * total) {
                pick = Some(i);
            }
        }
        let i = pick.unwrap();
        seats[i] += 1;
        left -= 1;
    }
    seats
}

fn split_hygiene() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut triples = Vec::new();
    let mut contexts = BTreeSet::new();
    while contexts.len() < 500 {
        let ctx = (random_residues(&mut rng, 12), random_residues(&mut rng, 9));
        if contexts.insert(ctx.clone()) {
            for _ in 0..rng.gen_range(1..=3) {
                let n = rng.gen_range(8..=14);
                triples.push(Triple { mhc: ctx.0.clone(), peptide: ctx.1.clone(), tcr: random_residues(&mut rng, n) });
            }
        }
    }
    let expected = apportion_oracle(500, &[7, 1, 2]);
    let mut bad = 0;
    for seed in 0..100 {
        let s = split_contexts(&triples, [7, 1, 2], seed, false).unwrap();
        let keys: Vec<BTreeSet<(String, String)>> =
            [&s.train, &s.valid, &s.test].iter().map(|v| v.iter().map(Triple::context).collect()).collect();
        let disjoint = keys[0].is_disjoint(&keys[1]) && keys[0].is_disjoint(&keys[2]) && keys[1].is_disjoint(&keys[2]);
        let counts: Vec<usize> = keys.iter().map(BTreeSet::len).collect();
        let complete = s.train.len() + s.valid.len() + s.test.len() == triples.len();
        if !(disjoint && complete && counts == expected) {
            bad += 1;
        }
    }
    outcome(bad == 0, format!("100 seeds, expected counts {expected:?}, {bad} violations"))
}

// ---------------------------------------------------------------------------
// 10. Directional smoke test (non-gating)

/// Receptors whose core mirrors the peptide through a chemistry-preserving
/// substitution, so descriptor similarity carries signal.
fn synthetic_corpus(seed: u64, n: usize) -> Vec<Triple> {
    let table = DescriptorTable::standard();
    let nearest: Vec<u8> = (0..20)
        .map(|i| {
            let zi = table.zscore(i);
            let j = (0..20)
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let d = |j: usize| table.zscore(j).iter().zip(&zi).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            RESIDUES[j]
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alleles: Vec<String> = (0..10).map(|_| random_residues(&mut rng, 34)).collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mhc = alleles[rng.gen_range(0..alleles.len())].clone();
        let peptide = random_residues(&mut rng, 9);
        for _ in 0..10 {
            let core: String = peptide.bytes().skip(2).take(5).map(|c| {
                let i = RESIDUES.iter().position(|&r| r == c).unwrap();
                if rng.gen_bool(0.8) { nearest[i] as char } else { RESIDUES[rng.gen_range(0..20)] as char }
            }).collect();
            let n_tail = rng.gen_range(1..=3);
            let tail = random_residues(&mut rng, n_tail);
            out.push(Triple { mhc: mhc.clone(), peptide: peptide.clone(), tcr: format!("CASS{core}{tail}F") });
        }
    }
    out.truncate(n);
    out
}

fn directional_smoke() -> Outcome {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5 {
        let corpus = synthetic_corpus(seed, 2000);
        let split = split_contexts(&corpus, [7, 1, 2], seed, false).unwrap();
        let (tr, va) = (encode_all(&split.train), encode_all(&split.valid));
        let tc = TrainConfig { lr: 2e-3, batch_size: 64, max_epochs: 4, seed, ..TrainConfig::default() };
        let mut ppl = [0.0; 2];
        for (k, phys) in [true, false].into_iter().enumerate() {
            let mc = ModelConfig { d_ff: Some(64), phys_enabled: phys, seed, ..ModelConfig::with_width(32, 2) };
            let table = DescriptorTable::standard();
            ppl[k] = train(&tr, &va, &mc, &tc, &table).unwrap().report.best_valid_ppl;
        }
        wins += usize::from(ppl[0] <= ppl[1]);
        pairs.push(format!("{:.3}/{:.3}", ppl[0], ppl[1]));
    }
    outcome(wins >= 3, format!("phys <= ablated valid ppl in {wins}/5 seeds (phys/ablated: {})", pairs.join(" ")))
}

// ---------------------------------------------------------------------------
// 11. Physchem table sanity

fn physchem_sanity() -> Outcome {
    let table = DescriptorTable::standard();
    let mut worst = 0.0f64;
    for k in 0..N_DESCRIPTORS {
        let col: Vec<f64> = (0..20).map(|i| table.zscore(i)[k]).collect();
        let mean = col.iter().sum::<f64>() / 20.0;
        let std = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 20.0).sqrt();
        worst = worst.max(mean.abs()).max((std - 1.0).abs());
    }
    let mut p = ModelParams::init(&ModelConfig { seed: 6, ..ModelConfig::with_width(16, 2) }).unwrap();
    randomize(&mut p, 7, 0.5);
    let residues: Vec<char> = vocab::CANONICAL.to_vec();
    let mut symmetric = true;
    let mut nonzero = false;
    for &a in &residues {
        for &b in &residues {
            let ab = attn_phys_decomposition(&p, &table, a, b).unwrap();
            let ba = attn_phys_decomposition(&p, &table, b, a).unwrap();
            symmetric &= ab == ba;
            nonzero |= ab != 0.0;
        }
    }
    p.fusion.phys_proj.as_mut().unwrap().data.iter_mut().for_each(|x| *x = 0.0);
    let zero = residues
        .iter()
        .all(|&a| residues.iter().all(|&b| attn_phys_decomposition(&p, &table, a, b).unwrap() == 0.0));
    outcome(
        worst <= ZSCORE_TOL && symmetric && nonzero && zero,
        format!("max |mean|,|std-1| {worst:.1e}; decomposition symmetric {symmetric}, zero at W=0 {zero}"),
    )
}

fn main() {
    // Skip when invoked by `cargo test -- --list` and similar harness probes.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let only = std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let mut suite = Suite { failed: vec![], only };
    let mut trained = None;
    suite.run("1 metric golden corpus", true, metric_golden);
    suite.run("2 oracle equivalence", true, oracle_equivalence);
    suite.run("3 gradient correctness", true, gradient_correctness);
    suite.run("4 causality", true, causality);
    suite.run("5 overfit capacity", true, || overfit(&mut trained));
    suite.run("6 ablation contract", true, ablation);
    suite.run("7a beam b=1 equals greedy", true, || beam_vs_greedy(&trained));
    suite.run("7b beam equals brute MAP", true, beam_vs_brute_force);
    suite.run("8 pipeline determinism", true, || pipeline(&trained));
    suite.run("9 split hygiene", true, split_hygiene);
    suite.run("10 directional smoke", false, directional_smoke);
    suite.run("11 physchem sanity", true, physchem_sanity);
    if !suite.failed.is_empty() {
        eprintln!("failed: {}", suite.failed.join(", "));
        std::process::exit(1);
    }
}
