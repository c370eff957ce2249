//! Stage orchestration. Every stage reads declared inputs from the work
//! directory, writes into a scratch directory and is moved into place with a
//! manifest only when it succeeds.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use claimcraft_core::eval_expenditure::{build_expenditure_instances, expenditure_metrics, predict_all, write_instances_jsonl, write_metrics_csv, ForecastSpec};
use claimcraft_core::eval_onset::{compare_models, frequent_endpoints, horizon_sweep, prevalence, write_comparison_csv, write_endpoint_csv, ComparisonReport, EvalSequence, SweepSpec, RARE_PREVALENCE};
use claimcraft_core::rwe::{attach_embeddings, build_study_frame, derive_study, run_study, write_results_csv, StudyConfig, StudyDefinition, StudyResult, MIN_OUTCOME_PREVALENCE};
use claimcraft_core::stats::PairedTable;
use claimcraft_core::synthgen::{apply_inclusion_criteria, generate_cohort, read_cohort_jsonl, write_cohort_jsonl, EnrolleeRecord};
use claimcraft_core::tokenizer::{age_steps, read_sequences_bin, tokenize_cohort, write_sequences_bin, write_sequences_text};
use claimcraft_core::training::{build_posttrain_pairs, default_pair_count, posttrain, pretrain, pretrain_examples, unigram_entropy, write_loss_csv, write_pairs_text, StepReport, Validation};
use claimcraft_core::vocab::{build_vocabulary, tok, Category, Crosswalk, Vocabulary};
use claimcraft_core::ModelF32;
use claimcraft_core::seed::sub_seed;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::PipelineConfig;
use crate::manifest::{hash_diff, list_files, rel_key, sha256_bytes, sha256_file, Manifest, MANIFEST_NAME};
use crate::report;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Held-out windows scored at each validation check.
pub const MAX_VALIDATION_EXAMPLES: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Generate,
    Tokenize,
    Pretrain,
    Posttrain,
    EvalOnset,
    EvalCost,
    Rwe,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [Stage::Generate, Stage::Tokenize, Stage::Pretrain, Stage::Posttrain, Stage::EvalOnset, Stage::EvalCost, Stage::Rwe, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Tokenize => "tokenize",
            Stage::Pretrain => "pretrain",
            Stage::Posttrain => "posttrain",
            Stage::EvalOnset => "eval-onset",
            Stage::EvalCost => "eval-cost",
            Stage::Rwe => "rwe",
            Stage::Report => "report",
        }
    }

    /// Output directory under the work dir.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::Generate => "cohort",
            Stage::Tokenize => "tokens",
            Stage::Pretrain => "pretrain",
            Stage::Posttrain => "posttrain",
            Stage::EvalOnset => "onset",
            Stage::EvalCost => "cost",
            Stage::Rwe => "rwe",
            Stage::Report => "report",
        }
    }

    fn by_dir(dir: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.dir() == dir)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0:#}")]
    Config(anyhow::Error),
    #[error("{stage} refused: {reason}\n{diff}re-run the producing stage, or pass --force to proceed anyway")]
    Refused { stage: &'static str, reason: String, diff: String },
    #[error("{stage} failed: {source:#}")]
    Stage { stage: &'static str, source: anyhow::Error },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

/// One declared input: a work-dir file (`dir/name`) or an external file.
#[derive(Clone, Debug)]
struct Input {
    key: String,
    path: PathBuf,
    producer: Option<Stage>,
}

pub struct Runner {
    cfg: PipelineConfig,
    work: PathBuf,
    force: bool,
    quiet: bool,
}

fn log(stage: Stage, msg: impl AsRef<str>) {
    eprintln!("[{}] {}", stage.name(), msg.as_ref());
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Split {
    holdout_fraction: f64,
    holdout: Vec<u64>,
}

/// Everything downstream stages need from the tokenize stage.
struct Tokens {
    vocab: Vocabulary,
    seqs: Vec<(u64, Vec<u32>)>,
    holdout: HashSet<u64>,
}

impl Tokens {
    fn part(&self, held_out: bool) -> Vec<(u64, Vec<u32>)> {
        self.seqs.iter().filter(|(id, _)| self.holdout.contains(id) == held_out).cloned().collect()
    }
}

fn progress(stage: Stage, total: usize, every: usize, quiet: bool) -> impl FnMut(&StepReport) {
    let mut n = 0usize;
    move |r: &StepReport| {
        n += 1;
        if !quiet && (n % every == 0 || n == total) {
            log(stage, format!("step {n}/{total} ce {:.4} lr {:.2e} grad-norm {:.3}", r.loss.ce, r.lr, r.grad_norm));
        }
    }
}

impl Runner {
    pub fn new(cfg: PipelineConfig, force: bool) -> Self {
        let work = cfg.work_dir.clone();
        Runner { cfg, work, force, quiet: false }
    }

    pub fn quiet(mut self, quiet: bool) -> Self {
        self.quiet = quiet;
        self
    }

    pub fn work_dir(&self) -> &Path {
        &self.work
    }

    fn path(&self, key: &str) -> PathBuf {
        self.work.join(key)
    }

    fn inputs(&self, stage: Stage) -> Vec<Input> {
        let w = |key: &str| {
            let producer = key.split('/').next().and_then(Stage::by_dir);
            Input { key: key.to_string(), path: self.path(key), producer }
        };
        let tokens = ["tokens/vocab.tsv", "tokens/sequences.bin", "tokens/split.json"];
        let mut v: Vec<Input> = match stage {
            Stage::Generate => vec![],
            Stage::Tokenize => vec![w("cohort/cohort.jsonl"), w("cohort/crosswalk.tsv")],
            Stage::Pretrain => tokens.iter().map(|k| w(k)).collect(),
            Stage::Posttrain => tokens.iter().chain(&["pretrain/model.ckpt"]).map(|k| w(k)).collect(),
            Stage::EvalOnset => tokens.iter().chain(&["pretrain/model.ckpt", "posttrain/model.ckpt"]).map(|k| w(k)).collect(),
            Stage::EvalCost => ["cohort/cohort.jsonl"].iter().chain(&tokens).chain(&["pretrain/model.ckpt", "posttrain/model.ckpt"]).map(|k| w(k)).collect(),
            Stage::Rwe => ["cohort/cohort.jsonl", "tokens/vocab.tsv", "tokens/sequences.bin", "pretrain/model.ckpt"].iter().map(|k| w(k)).collect(),
            Stage::Report => [
                "onset/endpoints.csv",
                "onset/endpoints_pretrained.csv",
                "onset/endpoints_posttrained.csv",
                "onset/comparison.csv",
                "cost/metrics.csv",
                "rwe/results_covariates.csv",
                "rwe/results_embeddings.csv",
                "rwe/summary.csv",
            ]
            .iter()
            .map(|k| w(k))
            .collect(),
        };
        if stage == Stage::Rwe {
            if let Some(f) = &self.cfg.rwe.study_file {
                v.push(Input { key: "external/study_file".into(), path: f.clone(), producer: None });
            }
        }
        v
    }

    /// The configuration slice a stage depends on. File paths are left out;
    /// the files themselves are hashed as inputs.
    fn stage_config(&self, stage: Stage) -> serde_json::Value {
        let c = &self.cfg;
        match stage {
            Stage::Generate => json!({ "cohort": c.cohort, "inclusion": c.inclusion }),
            Stage::Tokenize => json!({ "split": c.split, "seed": c.seed }),
            Stage::Pretrain => json!({ "model": c.model, "pretrain": c.pretrain, "seed": c.seed }),
            Stage::Posttrain => json!({ "posttrain": c.posttrain, "seed": c.seed }),
            Stage::EvalOnset => json!({ "onset": c.onset, "seed": c.seed }),
            Stage::EvalCost => json!({ "cost": c.cost, "seed": c.seed }),
            Stage::Rwe => {
                let mut r = c.rwe.clone();
                r.study_file = None;
                json!({ "rwe": r, "seed": c.seed })
            }
            Stage::Report => json!({}),
        }
    }

    pub fn run_all(&self) -> Result<(), PipelineError> {
        for s in Stage::ALL {
            self.run(s)?;
        }
        Ok(())
    }

    pub fn run(&self, stage: Stage) -> Result<Outcome, PipelineError> {
        let fail = |source: anyhow::Error| PipelineError::Stage { stage: stage.name(), source };
        let inputs = self.inputs(stage);
        for i in &inputs {
            if !i.path.is_file() {
                let hint = i.producer.map_or(String::new(), |p| format!("; run `claimcraft {}` first", p.name()));
                return Err(fail(anyhow!("missing input {} ({}){hint}", i.key, i.path.display())));
            }
        }
        self.check_producers(stage, &inputs)?;
        let mut input_hashes = BTreeMap::new();
        for i in &inputs {
            input_hashes.insert(i.key.clone(), sha256_file(&i.path).map_err(fail)?);
        }
        let cfg_sha = sha256_bytes(serde_json::to_string(&self.stage_config(stage)).map_err(|e| fail(e.into()))?.as_bytes());
        let dir = self.path(stage.dir());
        let previous = Manifest::read(&dir.join(MANIFEST_NAME)).map_err(fail)?;
        if let Some(m) = &previous {
            let actual = actual_hashes(&dir, &m.outputs);
            let intact = m.outputs.iter().all(|(k, v)| actual.get(k) == Some(&Some(v.clone())));
            if !intact && !self.force {
                return Err(PipelineError::Refused {
                    stage: stage.name(),
                    reason: format!("outputs in {} no longer match its manifest", dir.display()),
                    diff: hash_diff(&m.outputs, &actual),
                });
            }
            let same = m.config_sha256 == cfg_sha && m.inputs == input_hashes && m.tool_version == TOOL_VERSION && m.seed == self.cfg.seed;
            if intact && same && !self.force {
                log(stage, "up-to-date");
                return Ok(Outcome::UpToDate);
            }
        }

        fs::create_dir_all(&self.work).with_context(|| format!("creating {}", self.work.display())).map_err(fail)?;
        let tmp = self.work.join(format!(".tmp-{}", stage.dir()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| fail(e.into()))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| fail(e.into()))?;
        if !self.quiet {
            log(stage, "running");
        }
        if let Err(e) = self.execute(stage, &tmp) {
            let q = self.quarantine(stage, &tmp);
            let e = match q {
                Ok(p) => e.context(format!("partial outputs moved to {}", p.display())),
                Err(qe) => e.context(format!("could not quarantine partial outputs: {qe:#}")),
            };
            return Err(fail(e));
        }
        self.commit(stage, &tmp, &dir, cfg_sha, input_hashes).map_err(fail)?;
        log(stage, format!("done -> {}", dir.display()));
        Ok(Outcome::Ran)
    }

    /// Inputs produced by earlier stages must still match their producers' manifests.
    fn check_producers(&self, stage: Stage, inputs: &[Input]) -> Result<(), PipelineError> {
        let mut by_producer: BTreeMap<&str, Vec<&Input>> = BTreeMap::new();
        for i in inputs {
            if let Some(p) = i.producer {
                by_producer.entry(p.dir()).or_default().push(i);
            }
        }
        for (pdir, ins) in by_producer {
            let mpath = self.path(pdir).join(MANIFEST_NAME);
            let m = Manifest::read(&mpath).map_err(|source| PipelineError::Stage { stage: stage.name(), source })?;
            let Some(m) = m else {
                if self.force {
                    continue;
                }
                return Err(PipelineError::Refused { stage: stage.name(), reason: format!("{} has no manifest", self.path(pdir).display()), diff: String::new() });
            };
            let mut recorded = BTreeMap::new();
            let mut actual = BTreeMap::new();
            for i in ins {
                let name = i.key[pdir.len() + 1..].to_string();
                let want = m.outputs.get(&name).cloned().unwrap_or_default();
                let got = sha256_file(&i.path).ok();
                if got.as_ref() != Some(&want) {
                    recorded.insert(i.key.clone(), want);
                    actual.insert(i.key.clone(), got);
                }
            }
            if !recorded.is_empty() {
                if self.force {
                    log(stage, format!("warning: inputs from {pdir} differ from their manifest; continuing because of --force"));
                    continue;
                }
                return Err(PipelineError::Refused {
                    stage: stage.name(),
                    reason: format!("inputs from the {pdir} stage differ from its manifest"),
                    diff: hash_diff(&recorded, &actual),
                });
            }
        }
        Ok(())
    }

    fn commit(&self, stage: Stage, tmp: &Path, dir: &Path, config_sha256: String, inputs: BTreeMap<String, String>) -> Result<()> {
        let mut outputs = BTreeMap::new();
        for f in list_files(tmp)? {
            outputs.insert(rel_key(&f), sha256_file(&tmp.join(&f))?);
        }
        let m = Manifest { stage: stage.name().into(), tool_version: TOOL_VERSION.into(), seed: self.cfg.seed, config_sha256, inputs, outputs };
        m.write(&tmp.join(MANIFEST_NAME))?;
        if dir.exists() {
            fs::remove_dir_all(dir).with_context(|| format!("removing {}", dir.display()))?;
        }
        fs::rename(tmp, dir).with_context(|| format!("moving {} into place", tmp.display()))
    }

    fn quarantine(&self, stage: Stage, tmp: &Path) -> Result<PathBuf> {
        let qdir = self.work.join("quarantine");
        fs::create_dir_all(&qdir)?;
        let mut n = 1;
        let target = loop {
            let t = qdir.join(format!("{}-{n}", stage.dir()));
            if !t.exists() {
                break t;
            }
            n += 1;
        };
        fs::rename(tmp, &target)?;
        Ok(target)
    }

    fn execute(&self, stage: Stage, out: &Path) -> Result<()> {
        match stage {
            Stage::Generate => self.generate(out),
            Stage::Tokenize => self.tokenize(out),
            Stage::Pretrain => self.pretrain(out),
            Stage::Posttrain => self.posttrain(out),
            Stage::EvalOnset => self.eval_onset(out),
            Stage::EvalCost => self.eval_cost(out),
            Stage::Rwe => self.rwe(out),
            Stage::Report => report::render(&self.work, out),
        }
    }

    fn records(&self) -> Result<Vec<EnrolleeRecord>> {
        let p = self.path("cohort/cohort.jsonl");
        Ok(read_cohort_jsonl(open(&p)?).with_context(|| format!("reading {}", p.display()))?)
    }

    fn tokens(&self) -> Result<Tokens> {
        let vocab = Vocabulary::read_tsv(open(&self.path("tokens/vocab.tsv"))?)?;
        let seqs = read_sequences_bin(open(&self.path("tokens/sequences.bin"))?)?;
        let split: Split = serde_json::from_reader(open(&self.path("tokens/split.json"))?).context("parsing tokens/split.json")?;
        Ok(Tokens { vocab, seqs, holdout: split.holdout.into_iter().collect() })
    }

    fn model(&self, key: &str) -> Result<ModelF32> {
        let (state, _) = ModelF32::load(open(&self.path(key))?).with_context(|| format!("loading {key}"))?;
        Ok(state)
    }

    fn save_model(&self, state: &ModelF32, path: &Path, stage: Stage) -> Result<()> {
        let meta: BTreeMap<String, String> =
            [("stage".to_string(), stage.name().to_string()), ("seed".to_string(), self.cfg.seed.to_string()), ("tool_version".to_string(), TOOL_VERSION.to_string())].into();
        let mut w = create(path)?;
        state.save(&mut w, &meta)?;
        w.flush()?;
        Ok(())
    }

    fn generate(&self, out: &Path) -> Result<()> {
        let cohort = generate_cohort(&self.cfg.cohort)?;
        let (records, tally) = apply_inclusion_criteria(cohort.records, &self.cfg.inclusion);
        if !self.quiet {
            log(Stage::Generate, format!("{} generated, {} retained", tally.input, tally.retained));
        }
        let mut w = create(&out.join("cohort.jsonl"))?;
        write_cohort_jsonl(&mut w, &records)?;
        w.flush()?;
        let mut w = create(&out.join("crosswalk.tsv"))?;
        cohort.universe.crosswalk.write_tsv(&mut w)?;
        w.flush()?;
        write_json(&out.join("exclusions.json"), &tally)
    }

    fn tokenize(&self, out: &Path) -> Result<()> {
        let records = self.records()?;
        let cw = Crosswalk::read_tsv(open(&self.path("cohort/crosswalk.tsv"))?)?;
        let vocab = build_vocabulary(&records, &cw)?;
        let seqs = tokenize_cohort(&records, &cw, &vocab)?;
        let mut w = create(&out.join("vocab.tsv"))?;
        vocab.write_tsv(&mut w)?;
        w.flush()?;
        let pairs: Vec<(u64, &[u32])> = seqs.iter().map(|s| (s.enrollee_id, s.ids.as_slice())).collect();
        let mut w = create(&out.join("sequences.bin"))?;
        write_sequences_bin(&mut w, &pairs)?;
        w.flush()?;
        let mut w = create(&out.join("sequences.txt"))?;
        write_sequences_text(&mut w, &seqs)?;
        w.flush()?;
        // Membership depends only on the enrollee id, so it is stable when
        // the cohort grows.
        let seed = self.cfg.stage_seed("split");
        let frac = self.cfg.split.holdout_fraction;
        let holdout: Vec<u64> = seqs.iter().map(|s| s.enrollee_id).filter(|&id| (sub_seed(seed, id) >> 11) as f64 / (1u64 << 53) as f64 <= frac).collect();
        if !self.quiet {
            log(Stage::Tokenize, format!("{} tokens in vocabulary, {} sequences, {} held out", vocab.len(), seqs.len(), holdout.len()));
        }
        write_json(&out.join("split.json"), &Split { holdout_fraction: frac, holdout })
    }

    fn pretrain(&self, out: &Path) -> Result<()> {
        let t = self.tokens()?;
        let spec = &self.cfg.pretrain.train;
        let ids = |v: Vec<(u64, Vec<u32>)>| v.into_iter().map(|(_, s)| s).collect::<Vec<_>>();
        let train = pretrain_examples(&ids(t.part(false)), spec.window, &t.vocab);
        let mut val = pretrain_examples(&ids(t.part(true)), spec.window, &t.vocab);
        val.truncate(MAX_VALIDATION_EXAMPLES);
        let baseline = unigram_entropy(&val);
        let validation = Validation { examples: val, stop_below: self.cfg.pretrain.stop_below_unigram.then_some(baseline) };
        let state = ModelF32::new(self.cfg.model.config(t.vocab.len(), self.cfg.stage_seed("model-init")))?;
        if !self.quiet {
            log(Stage::Pretrain, format!("{} parameters, {} training windows, unigram baseline {baseline:.4} nats", state.param_count(), train.len()));
        }
        let res = pretrain(state, &train, spec, Some(&validation), progress(Stage::Pretrain, spec.total_steps, spec.eval_every, self.quiet))?;
        self.save_model(&res.state, &out.join("model.ckpt"), Stage::Pretrain)?;
        let mut w = create(&out.join("curve.csv"))?;
        write_loss_csv(&mut w, &res.curve)?;
        w.flush()?;
        let mut w = create(&out.join("validation.csv"))?;
        writeln!(w, "step,ce,unigram_entropy")?;
        for v in &res.validation {
            writeln!(w, "{},{:.8},{baseline:.8}", v.step, v.ce)?;
        }
        w.flush()?;
        let final_ce = res.validation.last().map(|v| v.ce);
        write_json(
            &out.join("summary.json"),
            &json!({
                "parameters": res.state.param_count(),
                "training_windows": train.len(),
                "validation_windows": validation.examples.len(),
                "unigram_entropy": baseline,
                "final_validation_ce": final_ce,
                "below_unigram": final_ce.is_some_and(|c| c < baseline),
                "steps_run": res.steps_run,
                "stopped_early": res.stopped_early,
            }),
        )
    }

    fn posttrain(&self, out: &Path) -> Result<()> {
        let t = self.tokens()?;
        let state = self.model("pretrain/model.ckpt")?;
        let train: Vec<Vec<u32>> = t.part(false).into_iter().map(|(_, s)| s).collect();
        let count = self.cfg.posttrain.pairs.unwrap_or_else(|| default_pair_count(train.len()));
        let pairs = build_posttrain_pairs(&train, &t.vocab, count, state.config().max_positions, self.cfg.stage_seed("posttrain-pairs"));
        if pairs.is_empty() {
            bail!("no eligible post-training pairs in the training split");
        }
        let mut w = create(&out.join("pairs.txt"))?;
        write_pairs_text(&mut w, &pairs, &t.vocab)?;
        w.flush()?;
        let spec = &self.cfg.posttrain.train;
        if !self.quiet {
            log(Stage::Posttrain, format!("{} instruction pairs", pairs.len()));
        }
        let res = posttrain(state, &pairs, &t.vocab, spec, progress(Stage::Posttrain, spec.total_steps, spec.eval_every, self.quiet))?;
        self.save_model(&res.state, &out.join("model.ckpt"), Stage::Posttrain)?;
        let mut w = create(&out.join("curve.csv"))?;
        write_loss_csv(&mut w, &res.curve)?;
        w.flush()?;
        write_json(&out.join("summary.json"), &json!({ "pairs": pairs.len(), "steps_run": res.steps_run }))
    }

    fn endpoints(&self, vocab: &Vocabulary, seqs: &[EvalSequence]) -> Result<Vec<u32>> {
        let oc = &self.cfg.onset;
        if oc.endpoints.is_empty() {
            let mut e = frequent_endpoints(seqs, vocab, oc.min_count);
            e.truncate(oc.max_endpoints);
            return Ok(e);
        }
        let mut out = Vec::new();
        for code in &oc.endpoints {
            let stem = code.split('.').next().unwrap_or(code);
            let t = tok(Category::Dx, format!("MAJOR_{stem}"));
            let id = vocab.id(&t).ok_or_else(|| anyhow!("endpoint {code} never occurs in the corpus (no {t} token)"))?;
            if !out.contains(&id) {
                out.push(id);
            }
        }
        Ok(out)
    }

    fn eval_onset(&self, out: &Path) -> Result<()> {
        let t = self.tokens()?;
        let oc = &self.cfg.onset;
        let steps = age_steps(&t.vocab);
        let eval: Vec<EvalSequence> = t.part(true).into_iter().map(|(id, ids)| EvalSequence::new(id, ids, &t.vocab, &steps)).collect::<Result<_, _>>()?;
        let endpoints = self.endpoints(&t.vocab, &eval)?;
        if endpoints.is_empty() && !self.quiet {
            log(Stage::EvalOnset, format!("warning: no endpoint occurs in at least {} held-out sequences", oc.min_count));
        }
        let mut w = create(&out.join("endpoints.csv"))?;
        writeln!(w, "endpoint,prevalence,sequences")?;
        for &k in &endpoints {
            writeln!(w, "{},{:.6},{}", t.vocab.text(k)?, prevalence(&eval, k), eval.iter().filter(|s| s.ids.contains(&k)).count())?;
        }
        w.flush()?;
        let sweep = SweepSpec { horizons: oc.horizons_days.clone(), control_ratio: oc.control_ratio, aggregation: oc.aggregation, seed: self.cfg.stage_seed("onset") };
        let mut tables = Vec::new();
        for (name, key) in [("pretrained", "pretrain/model.ckpt"), ("posttrained", "posttrain/model.ckpt")] {
            let state = self.model(key)?;
            let rows = horizon_sweep(&state, &t.vocab, &eval, &endpoints, &sweep)?;
            let mut w = create(&out.join(format!("endpoints_{name}.csv")))?;
            write_endpoint_csv(&mut w, &rows, &t.vocab)?;
            w.flush()?;
            let at: Vec<(String, f64)> =
                rows.iter().filter(|r| r.delta_days == oc.compare_horizon_days).filter_map(|r| r.auc.map(|a| (r.endpoint.clone(), a))).collect();
            if !self.quiet {
                log(Stage::EvalOnset, format!("{name}: {} of {} endpoints scored at {} days", at.len(), endpoints.len(), oc.compare_horizon_days));
            }
            tables.push((name.to_string(), at));
        }
        let table = PairedTable::harmonize(&tables)?;
        let prev: Vec<f64> = table.labels.iter().map(|l| t.vocab.id(l).map_or(0.0, |k| prevalence(&eval, k))).collect();
        let report = if table.labels.is_empty() {
            ComparisonReport { all: vec![], rare: vec![], rare_labels: vec![] }
        } else {
            compare_models(&table, "pretrained", &prev, RARE_PREVALENCE, oc.bootstrap_resamples, self.cfg.stage_seed("onset-compare"))?
        };
        let mut w = create(&out.join("comparison.csv"))?;
        write_comparison_csv(&mut w, &table, &report)?;
        w.flush()?;
        Ok(())
    }

    fn eval_cost(&self, out: &Path) -> Result<()> {
        let t = self.tokens()?;
        let cc = &self.cfg.cost;
        let records: Vec<EnrolleeRecord> = self.records()?.into_iter().filter(|r| t.holdout.contains(&r.enrollee_id)).collect();
        let build = build_expenditure_instances(&records, &t.part(true), &t.vocab)?;
        let mut instances = build.instances.clone();
        instances.sort_by_key(|i| i.enrollee_id);
        if cc.max_instances > 0 {
            instances.truncate(cc.max_instances);
        }
        if instances.is_empty() {
            bail!("no held-out enrollee has a full year of follow-up to forecast");
        }
        let mut w = create(&out.join("instances.jsonl"))?;
        write_instances_jsonl(&mut w, &instances)?;
        w.flush()?;
        let mut skipped: BTreeMap<String, usize> = BTreeMap::new();
        for (reason, n) in build.skip_counts() {
            skipped.insert(serde_json::to_value(reason)?.as_str().unwrap_or("unknown").to_string(), n);
        }
        write_json(&out.join("skipped.json"), &skipped)?;
        if !self.quiet {
            log(Stage::EvalCost, format!("{} instances, {} enrollees skipped", instances.len(), build.skipped.len()));
        }
        let spec = ForecastSpec { n_samples: cc.n_samples, max_new: cc.max_new, aggregation: cc.aggregation, sampling: cc.sampling.clone() };
        let targets: Vec<f64> = instances.iter().map(|i| i.target).collect();
        let mut pw = create(&out.join("predictions.csv"))?;
        writeln!(pw, "model,enrollee_id,year,target,estimate,partial_samples,prompt_clipped")?;
        let mut metrics = Vec::new();
        for (name, key) in [("pretrained", "pretrain/model.ckpt"), ("posttrained", "posttrain/model.ckpt")] {
            let state = self.model(key)?;
            let fc = predict_all(&state, &t.vocab, &instances, &spec, self.cfg.stage_seed("cost"))?;
            for (i, f) in instances.iter().zip(&fc) {
                writeln!(pw, "{name},{},{},{:.2},{:.2},{},{}", i.enrollee_id, i.year, i.target, f.estimate, f.partial, f.prompt_clipped)?;
            }
            let preds: Vec<f64> = fc.iter().map(|f| f.estimate).collect();
            metrics.push(("holdout".to_string(), name.to_string(), expenditure_metrics(&preds, &targets, &cc.thresholds)?));
        }
        pw.flush()?;
        let mut w = create(&out.join("metrics.csv"))?;
        write_metrics_csv(&mut w, &metrics)?;
        w.flush()?;
        Ok(())
    }

    fn rwe(&self, out: &Path) -> Result<()> {
        let rc = &self.cfg.rwe;
        let records = self.records()?;
        let vocab = Vocabulary::read_tsv(open(&self.path("tokens/vocab.tsv"))?)?;
        let seqs = read_sequences_bin(open(&self.path("tokens/sequences.bin"))?)?;
        let def: StudyDefinition = match &rc.study_file {
            Some(f) => serde_json::from_reader(open(f)?).with_context(|| format!("parsing study file {}", f.display()))?,
            None => derive_study(&records, rc.n_primary, rc.n_nco)?,
        };
        write_json(&out.join("study.json"), &def)?;
        let fb = build_study_frame(&records, &seqs, &vocab, &def)?;
        write_json(&out.join("frame_exclusions.json"), &fb.excluded)?;
        let (a, b) = fb.frame.arm_counts();
        if !self.quiet {
            log(Stage::Rwe, format!("arms {:?} vs {:?}: {a} and {b} units, {} outcomes", def.arm_a, def.arm_b, def.outcomes.len()));
        }
        let base = StudyConfig { use_embeddings: false, caliper: rc.caliper, lasso: rc.lasso.clone(), min_prevalence: MIN_OUTCOME_PREVALENCE, level: rc.level };
        let cov = run_study(&fb.frame, &base).context("covariate-only analysis")?;
        let state = self.model("pretrain/model.ckpt")?;
        if !self.quiet {
            log(Stage::Rwe, format!("embeddings from pretrain/model.ckpt, {} pooling", serde_json::to_value(rc.pooling)?.as_str().unwrap_or("?")));
        }
        let mut frame = fb.frame.clone();
        attach_embeddings(&mut frame, &state, &vocab, &fb.sequences, rc.pooling)?;
        let emb = run_study(&frame, &StudyConfig { use_embeddings: true, ..base }).context("embedding-augmented analysis")?;
        for (name, r) in [("covariates", &cov), ("embeddings", &emb)] {
            let mut w = create(&out.join(format!("results_{name}.csv")))?;
            write_results_csv(&mut w, r, rc.level)?;
            w.flush()?;
        }
        let mut w = create(&out.join("summary.csv"))?;
        writeln!(w, "analysis,pooling,units,arm_a,arm_b,features,selected,lambda,ps_auc,pairs,unmatched_a,null_mu,null_sigma,ease")?;
        for (name, r) in [("covariates", &cov), ("embeddings", &emb)] {
            write_summary_row(&mut w, name, if r.use_embeddings { serde_json::to_value(rc.pooling)?.as_str().unwrap_or("").to_string() } else { String::new() }, a, b, r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn write_summary_row<W: Write>(w: &mut W, name: &str, pooling: String, a: usize, b: usize, r: &StudyResult) -> Result<()> {
    let f = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
    writeln!(
        w,
        "{name},{pooling},{},{a},{b},{},{},{:.6e},{:.6},{},{},{},{},{}",
        a + b,
        r.ps.n_features,
        r.ps.n_selected,
        r.ps.lambda,
        r.ps.auc,
        r.n_pairs,
        r.n_unmatched,
        f(r.null.as_ref().map(|n| n.mu)),
        f(r.null.as_ref().map(|n| n.sigma)),
        f(r.ease)
    )?;
    Ok(())
}

fn actual_hashes(dir: &Path, recorded: &BTreeMap<String, String>) -> BTreeMap<String, Option<String>> {
    recorded.keys().map(|k| (k.clone(), sha256_file(&dir.join(k)).ok())).collect()
}

/// Rows of a simple comma-separated file, header first; stops at the first blank line.
pub fn read_csv_section(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut rows = Vec::new();
    for line in open(path)?.lines() {
        let line = line?;
        if line.trim().is_empty() {
            break;
        }
        rows.push(line.split(',').map(str::to_string).collect());
    }
    Ok(rows)
}

/// Data rows keyed by header name.
pub fn csv_records(rows: &[Vec<String>]) -> Vec<HashMap<String, String>> {
    let Some((head, body)) = rows.split_first() else { return Vec::new() };
    body.iter().map(|r| head.iter().cloned().zip(r.iter().cloned()).collect()).collect()
}
