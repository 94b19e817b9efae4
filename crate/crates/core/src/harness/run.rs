use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::baseline::magnitude_prune;
use super::config::ExperimentConfig;
use super::corpus::Corpus;
use super::eval::{eval_ppl, ModelRef};
use super::stats::{export_mask_stats, mask_stats};
use crate::error::{Error, Result};
use crate::minimax::{
    multiplier_report, write_trace_csv, ConstraintStatus, MultiplierReport, RunConfig, RunOutput,
    Trainer,
};
use crate::model::{Checkpoint, ModelConfig, ModelParams, UnitKind};
use crate::prune::{fuse_masks, prune_model, random_batches, verify_equivalence, Pruned};
use crate::sparsity::{actual_sparsity, resource};

/// Masked and fused logits must agree to this.
pub const FUSION_TOL: f64 = 1e-10;
/// Fused and materialised logits must agree to this.
pub const EXCISION_TOL: f64 = 1e-8;
/// Random sequences used for equivalence checks.
pub const EQUIVALENCE_BATCHES: usize = 16;
/// Iterations averaged for the reported final training loss.
pub const LOSS_TAIL: usize = 50;

/// Everything a pruning run reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSummary {
    pub iterations: usize,
    pub seed: u64,
    pub target_sparsity: f64,
    pub final_loss: f64,
    /// Mean training loss over the last [`LOSS_TAIL`] iterations.
    pub tail_loss: f64,
    pub s_head: f64,
    pub s_inter: f64,
    pub heads_removed: usize,
    pub channels_removed: usize,
    pub total_params: usize,
    pub budget: f64,
    /// `M(s)` at the final continuous `s`.
    pub resource: f64,
    /// Fraction of prunable parameters whose mask is zero after hard pruning.
    pub achieved_sparsity: f64,
    pub pruned_params: usize,
    /// Cross-layer variance of head counts and FFN widths of the small model.
    pub head_width_variance: f64,
    pub inter_width_variance: f64,
    pub fusion_diff: f64,
    pub excision_diff: f64,
    pub status: ConstraintStatus,
    pub multipliers: MultiplierReport,
    pub unplanned_zeros: usize,
    /// Per kind: units in the lowest bin, the top bin and in between.
    pub head_mask_extremes: (usize, usize, usize),
    pub inter_mask_extremes: (usize, usize, usize),
    pub dense_ppl: f64,
    pub pruned_ppl: f64,
    pub magnitude_ppl: f64,
    pub wall_clock_secs: f64,
}

impl PruneSummary {
    pub fn equivalence_ok(&self) -> bool {
        self.fusion_diff < FUSION_TOL && self.excision_diff < EXCISION_TOL
    }
}

/// Result of [`prune_experiment`], kept in memory.
pub struct PruneResult {
    pub output: RunOutput,
    pub pruned: Pruned,
    pub summary: PruneSummary,
}

/// Variance across layers of the per-layer head count and FFN width.
pub fn structure_variance(cfg: &ModelConfig, params: &ModelParams) -> (f64, f64) {
    let var = |xs: Vec<f64>| {
        let n = xs.len().max(1) as f64;
        let mean = xs.iter().sum::<f64>() / n;
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
    };
    let heads = params
        .layers
        .iter()
        .map(|l| (l.wq.cols() / cfg.head_dim) as f64)
        .collect();
    let widths = params.layers.iter().map(|l| l.w_up.cols() as f64).collect();
    (var(heads), var(widths))
}

/// Trains masks on `params`, prunes, checks equivalence and evaluates.
pub fn prune_experiment(
    cfg: &ModelConfig,
    params: &ModelParams,
    corpus: &Corpus,
    run: &RunConfig,
) -> Result<PruneResult> {
    let start = Instant::now();
    let trainer = Trainer::new(cfg, params, run.clone())?;
    let output = trainer.run_with(corpus.train(), |r| {
        if r.iteration % 100 == 0 {
            log::info!(
                "t={} loss={:.4} s=({:.3}, {:.2}) y={:.3} z={:.3e} M(s)-M_prune={:.0}",
                r.iteration,
                r.loss,
                r.s_head,
                r.s_inter,
                r.y,
                r.z,
                r.resource - trainer.rm.budget
            );
        }
    })?;
    let rm = &output.resource_model;
    let st = &output.state;
    let pruned = prune_model(cfg, params, &st.masks, &st.sparsity, Some(&st.lora))?;

    let batches = random_batches(cfg, EQUIVALENCE_BATCHES, cfg.seq_len, run.seed ^ 0x5eed);
    let masked = ModelRef {
        cfg,
        params,
        masks: Some(&pruned.zeroed),
        lora: Some(&st.lora),
    };
    let fused = ModelRef::dense(cfg, &pruned.fused);
    let small = ModelRef::dense(&pruned.small_cfg, &pruned.small);
    let fusion_diff = verify_equivalence(masked, fused, &batches)?;
    let excision_diff = verify_equivalence(fused, small, &batches)?;

    let window = cfg.seq_len;
    let dense_ppl = eval_ppl(ModelRef::dense(cfg, params), corpus.eval(), window)?;
    let pruned_ppl = eval_ppl(small, corpus.eval(), window)?;
    let (hk, ik) = (
        st.sparsity.count(UnitKind::Head),
        st.sparsity.count(UnitKind::Inter),
    );
    let (_, mag, mag_cfg) = magnitude_prune(cfg, params, hk, ik)?;
    let magnitude_ppl = eval_ppl(ModelRef::dense(&mag_cfg, &mag), corpus.eval(), window)?;

    let (head_width_variance, inter_width_variance) =
        structure_variance(&pruned.small_cfg, &pruned.small);
    let stats = mask_stats(&st.masks);
    let tail = &output.trace[output.trace.len().saturating_sub(LOSS_TAIL)..];
    let summary = PruneSummary {
        iterations: run.iterations,
        seed: run.seed,
        target_sparsity: run.target_sparsity,
        final_loss: output.trace.last().map_or(f64::NAN, |r| r.loss),
        tail_loss: tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64,
        s_head: st.sparsity.s_head,
        s_inter: st.sparsity.s_inter,
        heads_removed: hk,
        channels_removed: ik,
        total_params: rm.total,
        budget: rm.budget,
        resource: resource(rm, &st.sparsity),
        achieved_sparsity: actual_sparsity(&pruned.zeroed, cfg, rm.total)?,
        pruned_params: pruned.small.prunable_count(),
        head_width_variance,
        inter_width_variance,
        fusion_diff,
        excision_diff,
        status: output.status.clone(),
        multipliers: multiplier_report(&output.trace, rm.budget, 100),
        unplanned_zeros: pruned.unplanned_zeros,
        head_mask_extremes: stats.extremes(UnitKind::Head),
        inter_mask_extremes: stats.extremes(UnitKind::Inter),
        dense_ppl,
        pruned_ppl,
        magnitude_ppl,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(PruneResult {
        output,
        pruned,
        summary,
    })
}

fn load_teacher(exp: &ExperimentConfig) -> Result<(ModelConfig, ModelParams)> {
    let path = &exp.data.teacher;
    if !path.exists() {
        return Err(Error::Config(format!(
            "teacher checkpoint {} not found",
            path.display()
        )));
    }
    let ck = Checkpoint::load(path)?;
    if !exp.model_keys.is_empty() && ck.config != exp.model {
        return Err(Error::Config(format!(
            "model settings {:?} disagree with checkpoint {}",
            exp.model_keys,
            path.display()
        )));
    }
    let params = ck.params()?;
    Ok((ck.config, params))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `prune`: full pipeline with artifacts in `out_dir`. Artifacts are written
/// before constraint and equivalence failures are reported.
pub fn prune_cmd(exp: &ExperimentConfig) -> Result<PruneSummary> {
    let (cfg, params) = load_teacher(exp)?;
    let corpus = exp.data.corpus()?;
    let dir = &exp.data.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fs::write(dir.join("config.toml"), exp.to_toml()?).map_err(|e| Error::io(dir, e))?;

    let res = prune_experiment(&cfg, &params, &corpus, &exp.run)?;
    let st = &res.output.state;
    write_trace_csv(&dir.join("trace.csv"), &res.output.trace)?;
    export_mask_stats(dir, &st.masks)?;
    res.pruned.plan.save(&dir.join("plan.json"))?;
    Checkpoint::new(&res.pruned.small_cfg, &res.pruned.small).save(&dir.join("pruned.json"))?;
    let mut state = Checkpoint::new(&cfg, &params);
    state.masks = Some(st.masks.clone());
    state.lora = Some(st.lora.clone());
    state.sparsity = Some(st.sparsity.clone());
    state.save(&dir.join("state.json"))?;
    write_json(&dir.join("summary.json"), &res.summary)?;

    let s = &res.summary;
    if !s.equivalence_ok() {
        return Err(Error::Numerical {
            iteration: s.iterations,
            detail: format!(
                "pruned model diverges from the masked one (fusion {:.2e}, excision {:.2e})",
                s.fusion_diff, s.excision_diff
            ),
        });
    }
    if !s.status.met() {
        return Err(Error::ConstraintNotMet(s.status.describe()));
    }
    Ok(res.summary)
}

/// `pretrain`: trains the dense teacher and saves it to `teacher`.
pub fn pretrain_cmd(exp: &ExperimentConfig) -> Result<super::pretrain::PretrainReport> {
    let corpus = exp.data.corpus()?;
    let (params, report) =
        super::pretrain::pretrain_with(&exp.model, &corpus, &exp.pretrain, |t, l| {
            if t % 50 == 0 {
                log::info!("pretrain step {t} loss {l:.4}");
            }
        })?;
    if let Some(parent) = exp
        .data
        .teacher
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
    {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Checkpoint::new(&exp.model, &params).save(&exp.data.teacher)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub prunable_params: usize,
    pub masked: bool,
    pub eval_ppl: f64,
}

/// `eval`: held-out perplexity of a checkpoint, with its masks and adapters
/// when it carries them.
pub fn eval_cmd(exp: &ExperimentConfig, checkpoint: &Path) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let params = ck.params()?;
    let corpus = exp.data.corpus()?;
    let model = ModelRef {
        cfg: &ck.config,
        params: &params,
        masks: ck.masks.as_ref(),
        lora: ck.lora.as_ref(),
    };
    Ok(EvalReport {
        checkpoint: checkpoint.display().to_string(),
        n_heads: ck.config.n_heads,
        d_ffn: ck.config.d_ffn,
        prunable_params: params.prunable_count(),
        masked: ck.masks.is_some(),
        eval_ppl: eval_ppl(model, corpus.eval(), ck.config.seq_len)?,
    })
}

/// Which setting a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// `eta1`.
    DecayRate,
    IntervalStart,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "decay_rate" | "eta1" => Ok(SweepParam::DecayRate),
            "interval_start" => Ok(SweepParam::IntervalStart),
            _ => Err(Error::Config(format!(
                "sweep parameter must be decay_rate or interval_start, got `{s}`"
            ))),
        }
    }

    pub fn apply(self, run: &mut RunConfig, value: f64) -> Result<()> {
        match self {
            SweepParam::DecayRate => run.eta1 = value,
            SweepParam::IntervalStart => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!(
                        "interval_start {value} is not a positive integer"
                    )));
                }
                run.interval_start = value as usize;
            }
        }
        Ok(())
    }
}

/// One run of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub value: f64,
    pub seed: u64,
    pub summary: Option<PruneSummary>,
    pub error: Option<String>,
    /// Every `trace_stride`-th cross-layer width variance of the FFN masks.
    pub inter_width_var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub trace_stride: usize,
    pub entries: Vec<SweepEntry>,
}

impl SweepReport {
    /// Median tail loss per value, over the successful seeds.
    pub fn median_tail_loss(&self, value: f64) -> Option<f64> {
        let mut xs: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| e.value == value)
            .filter_map(|e| e.summary.as_ref().map(|s| s.tail_loss))
            .collect();
        if xs.is_empty() {
            return None;
        }
        xs.sort_by(f64::total_cmp);
        Some(xs[xs.len() / 2])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record([
            "value",
            "seed",
            "ok",
            "constraints_met",
            "tail_loss",
            "achieved_sparsity",
            "resource_gap",
            "pruned_ppl",
            "error",
        ])?;
        for e in &self.entries {
            let mut row = vec![e.value.to_string(), e.seed.to_string()];
            match &e.summary {
                Some(s) => row.extend([
                    "true".into(),
                    s.status.met().to_string(),
                    s.tail_loss.to_string(),
                    s.achieved_sparsity.to_string(),
                    s.status.resource_gap.to_string(),
                    s.pruned_ppl.to_string(),
                    String::new(),
                ]),
                None => row.extend([
                    "false".into(),
                    "false".into(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    e.error.clone().unwrap_or_default(),
                ]),
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// One pruning run per `(value, seed)`. A failing run is recorded and the
/// others continue.
pub fn sweep(
    cfg: &ModelConfig,
    params: &ModelParams,
    corpus: &Corpus,
    base: &RunConfig,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
) -> Result<SweepReport> {
    if values.len() < 2 {
        return Err(Error::Config("a sweep needs at least two values".into()));
    }
    let stride = (base.iterations / 200).max(1);
    let jobs: Vec<(f64, u64)> = values
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let entries = jobs
        .par_iter()
        .map(|&(value, seed)| {
            let mut run = base.clone();
            run.seed = seed;
            let res = param
                .apply(&mut run, value)
                .and_then(|_| prune_experiment(cfg, params, corpus, &run));
            match res {
                Ok(r) => SweepEntry {
                    value,
                    seed,
                    inter_width_var: r
                        .output
                        .trace
                        .iter()
                        .step_by(stride)
                        .map(|t| t.inter_width_var)
                        .collect(),
                    summary: Some(r.summary),
                    error: None,
                },
                Err(e) => {
                    log::warn!("sweep run {value} (seed {seed}) failed: {e}");
                    SweepEntry {
                        value,
                        seed,
                        summary: None,
                        error: Some(e.to_string()),
                        inter_width_var: Vec::new(),
                    }
                }
            }
        })
        .collect();
    Ok(SweepReport {
        param,
        trace_stride: stride,
        entries,
    })
}

/// `sweep`: runs [`sweep`] on the teacher and writes `sweep.csv` and
/// `sweep.json` into `out_dir`.
pub fn sweep_cmd(
    exp: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
) -> Result<SweepReport> {
    let (cfg, params) = load_teacher(exp)?;
    let corpus = exp.data.corpus()?;
    let report = sweep(&cfg, &params, &corpus, &exp.run, param, values, seeds)?;
    let dir = &exp.data.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    report.write_csv(&dir.join("sweep.csv"))?;
    write_json(&dir.join("sweep.json"), &report)?;
    Ok(report)
}

/// `stats`: mask statistics of a checkpoint that carries masks.
pub fn stats_cmd(checkpoint: &Path, out_dir: &Path) -> Result<super::stats::MaskStats> {
    let ck = Checkpoint::load(checkpoint)?;
    let masks = ck
        .masks
        .ok_or_else(|| Error::Config(format!("{} carries no masks", checkpoint.display())))?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    export_mask_stats(out_dir, &masks)
}

/// Fused weights of a masked checkpoint, for callers that want the
/// full-size model with masks folded in.
pub fn fused_params(ck: &Checkpoint) -> Result<ModelParams> {
    let params = ck.params()?;
    match &ck.masks {
        Some(m) => fuse_masks(&ck.config, &params, m, ck.lora.as_ref()),
        None => Ok(params),
    }
}
