//! Criteria that train models.

use claimcraft_core::eval_onset::{horizon_sweep, EvalSequence, SweepRow, SweepSpec};
use claimcraft_core::model::{ModelConfig, TrainExample};
use claimcraft_core::rwe::{
    attach_embeddings, confounded_corpus, confounded_vocabulary, run_study, simulate_confounded_study, ConfoundedSpec, Pooling,
    StudyConfig,
};
use claimcraft_core::stats::wilcoxon_signed_rank;
use claimcraft_core::synthgen::{generate_cohort, CodeRef, CohortSpec, PlantedRule};
use claimcraft_core::tokenizer::{age_steps, tokenize_cohort};
use claimcraft_core::training::{
    build_posttrain_pairs, posttrain, pretrain, pretrain_examples, unigram_entropy, TrainSpec, Validation,
};
use claimcraft_core::vocab::{build_vocabulary, Vocabulary};
use claimcraft_core::ModelF32;

use crate::{ensure, Check};

/// Token ids of a generated cohort split into training and held-out
/// enrollees (ids divisible by `every`).
struct Corpus {
    vocab: Vocabulary,
    train: Vec<Vec<u32>>,
    holdout: Vec<(u64, Vec<u32>)>,
}

fn corpus(spec: &CohortSpec, every: u64) -> Result<Corpus, String> {
    let c = generate_cohort(spec).map_err(|e| e.to_string())?;
    let vocab = build_vocabulary(&c.records, &c.universe.crosswalk).map_err(|e| e.to_string())?;
    let seqs = tokenize_cohort(&c.records, &c.universe.crosswalk, &vocab).map_err(|e| e.to_string())?;
    let (mut train, mut holdout) = (Vec::new(), Vec::new());
    for s in seqs {
        if s.enrollee_id % every == 0 {
            holdout.push((s.enrollee_id, s.ids));
        } else {
            train.push(s.ids);
        }
    }
    Ok(Corpus { vocab, train, holdout })
}

/// At most `n` examples spread evenly over `all`.
fn spread(all: Vec<TrainExample>, n: usize) -> Vec<TrainExample> {
    let step = all.len().div_ceil(n).max(1);
    all.into_iter().step_by(step).collect()
}

pub fn pretrain_sanity() -> Check {
    let data = corpus(&CohortSpec { seed: 6, n_enrollees: 2000, ..Default::default() }, 10)?;
    let spec = TrainSpec { total_steps: 2000, eval_every: 25, seed: 6, ..Default::default() };
    let examples = pretrain_examples(&data.train, spec.window, &data.vocab);
    let held: Vec<Vec<u32>> = data.holdout.iter().map(|(_, s)| s.clone()).collect();
    let val = spread(pretrain_examples(&held, spec.window, &data.vocab), 128);
    let baseline = unigram_entropy(&val);
    let model = ModelF32::new(ModelConfig { seed: 6, ..ModelConfig::desk(data.vocab.len()) }).map_err(|e| e.to_string())?;
    let params = model.param_count();
    let validation = Validation { examples: val, stop_below: Some(baseline) };
    let out = pretrain(model, &examples, &spec, Some(&validation), |_| {}).map_err(|e| e.to_string())?;
    let best = out.validation.iter().map(|v| v.ce).fold(f64::INFINITY, f64::min);
    let crossed = out.validation.iter().find(|v| v.ce < baseline);
    ensure!(crossed.is_some(), "validation CE {best:.4} never fell below unigram entropy {baseline:.4} in {} steps", out.steps_run);
    let at = crossed.expect("checked");
    Ok(format!(
        "{params} parameters, {} training windows; validation CE {:.4} < unigram {baseline:.4} at step {}",
        examples.len(),
        at.ce,
        at.step
    ))
}

fn planted_rules(n: usize, precursor_rate: f64) -> Vec<PlantedRule> {
    (0..n)
        .map(|k| PlantedRule {
            precursor: vec![CodeRef::dx(format!("Q{}.1", 50 + k))],
            target_dx: format!("Q{}.0", 60 + k),
            lag_months: (2, 6),
            hazard_given_precursor: 1.0,
            background_hazard: 0.02,
            precursor_rate,
        })
        .collect()
}

/// Small model shared by the onset and bias-reduction criteria.
fn small_model(vocab: usize, seed: u64) -> Result<ModelF32, String> {
    let cfg = ModelConfig { d_model: 64, n_layers: 2, n_heads: 4, n_kv_heads: 2, ffn_size: 128, max_positions: 256, seed, ..ModelConfig::desk(vocab) };
    ModelF32::new(cfg).map_err(|e| e.to_string())
}

fn all_stratum_auc(rows: &[SweepRow]) -> Result<Vec<(String, f64, f64)>, String> {
    rows.iter()
        .map(|r| match (r.auc, r.variance) {
            (Some(a), Some(v)) => Ok((r.endpoint.clone(), a, v.sqrt())),
            _ => Err(format!("{}: {} ({} cases, {} controls)", r.endpoint, r.status, r.cases, r.controls)),
        })
        .collect()
}

pub fn planted_onset() -> Check {
    let n_rules = 10;
    let spec = CohortSpec { seed: 7, n_enrollees: 2000, planted_rules: planted_rules(n_rules, 0.3), ..Default::default() };
    let data = corpus(&spec, 5)?;
    let v = &data.vocab;
    let pre_spec = TrainSpec { total_steps: 600, peak_lr: 3e-3, warmup_steps: 50, eval_every: 600, seed: 7, ..Default::default() };
    let examples = pretrain_examples(&data.train, pre_spec.window, v);
    let pre = pretrain(small_model(v.len(), 7)?, &examples, &pre_spec, None, |_| {}).map_err(|e| e.to_string())?.state;
    let post_spec = TrainSpec { total_steps: 1500, peak_lr: 1e-3, warmup_steps: 100, eval_every: 1500, seed: 7, ..Default::default() };
    let pairs = build_posttrain_pairs(&data.train, v, 8000, 256, 7);
    let post = posttrain(pre.clone(), &pairs, v, &post_spec, |_| {}).map_err(|e| e.to_string())?.state;

    let steps = age_steps(v);
    let seqs: Vec<EvalSequence> =
        data.holdout.iter().map(|(id, s)| EvalSequence::new(*id, s.clone(), v, &steps)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let endpoints: Vec<u32> = (0..n_rules)
        .map(|k| v.id(&format!("<DX-MAJOR_Q{}>", 60 + k)).ok_or(format!("target Q{} never occurs", 60 + k)))
        .collect::<Result<_, _>>()?;
    let sweep = SweepSpec { horizons: vec![30.0], seed: 7, ..Default::default() };
    let score = |m: &ModelF32| horizon_sweep(m, v, &seqs, &endpoints, &sweep).map_err(|e| e.to_string()).and_then(|r| all_stratum_auc(&r));
    let (before, after) = (score(&pre)?, score(&post)?);

    let weak: Vec<String> = after
        .iter()
        .filter(|(_, auc, sd)| !(*auc >= 0.90 && auc - 1.959963984540054 * sd > 0.5))
        .map(|(name, auc, sd)| format!("{name} {auc:.3}±{:.3}", 1.959963984540054 * sd))
        .collect();
    ensure!(weak.is_empty(), "post-trained AUC below 0.90 or CI touching 0.5: {}", weak.join(", "));
    let worst = after.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let diffs: Vec<f64> = after.iter().zip(&before).map(|(a, b)| a.1 - b.1).collect();
    let mean = |x: &[(String, f64, f64)]| x.iter().map(|r| r.1).sum::<f64>() / x.len() as f64;
    let (mb, ma) = (mean(&before), mean(&after));
    let w = wilcoxon_signed_rank(&diffs).map_err(|e| e.to_string())?;
    ensure!(ma > mb && w.p < 0.05, "mean AUC {ma:.4} post vs {mb:.4} pre, Wilcoxon p {:.4}", w.p);
    Ok(format!("{n_rules} endpoints: min post AUC {worst:.4}; mean {ma:.4} post vs {mb:.4} pre, Wilcoxon p {:.4}", w.p))
}

pub fn bias_reduction() -> Check {
    let spec = ConfoundedSpec { n_units: 2000, ..Default::default() };
    let v = confounded_vocabulary(&spec);
    let corpus = confounded_corpus(&spec, &v, 13).map_err(|e| e.to_string())?;
    let longest = corpus.iter().map(Vec::len).max().unwrap_or(0);
    let train = TrainSpec { total_steps: 400, peak_lr: 3e-3, warmup_steps: 40, eval_every: 400, seed: 13, ..Default::default() };
    let examples = pretrain_examples(&corpus, train.window, &v);
    let model = pretrain(small_model(v.len(), 13)?, &examples, &train, None, |_| {}).map_err(|e| e.to_string())?.state;

    let reps = 20;
    let mut wins = 0;
    let mut pairs = Vec::new();
    for rep in 0..reps {
        let mut sim = simulate_confounded_study(&spec, &v, 1000 + rep).map_err(|e| e.to_string())?;
        let cov = run_study(&sim.frame, &StudyConfig::default()).map_err(|e| e.to_string())?;
        attach_embeddings(&mut sim.frame, &model, &v, &sim.sequences, Pooling::Mean).map_err(|e| e.to_string())?;
        let emb = run_study(&sim.frame, &StudyConfig { use_embeddings: true, ..Default::default() }).map_err(|e| e.to_string())?;
        let (a, b) = (cov.ease.ok_or("no null for covariates")?, emb.ease.ok_or("no null with embeddings")?);
        wins += (b < a) as usize;
        pairs.push(format!("{a:.3}->{b:.3}"));
    }
    ensure!(wins >= 18, "embedding PS lowered EASE in {wins}/{reps} replications: {}", pairs.join(" "));
    Ok(format!("EASE lowered in {wins}/{reps} replications (longest history {longest} tokens): {}", pairs[..4].join(" ")))
}
