use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{interval_schedule, RunConfig};
use super::optim::AdamW;
use super::trace::StepRecord;
use crate::diffcore::{Bindings, Tensor};
use crate::error::{Error, Result};
use crate::model::{
    bind_lora, bind_masks, bind_params, check_tokens, GraphOptions, LmGraph, LoraSet, MaskSet,
    MaskTensors, ModelConfig, ModelParams, Trainable, UnitKind,
};
use crate::objective::{teacher_hidden_key, DistillGraph, LossParts, TARGETS, TEACHER_LOGITS};
use crate::sparsity::{
    grad_s_resource, grad_s_sparsity, group_mass, prox, resource, smallest_k_indices,
    ResourceModel, SparsityState, ACTIVE_MASK_THRESHOLD,
};

/// Mutable optimisation state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub t: usize,
    pub masks: MaskSet,
    pub sparsity: SparsityState,
    pub lora: LoraSet,
    pub mask_opt: AdamW,
    pub lora_opt: AdamW,
}

/// The two parts of an s-gradient: `y * sum_l proxy` and the resource term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SGradient {
    pub sparsity: f64,
    pub resource: f64,
}

impl SGradient {
    pub fn total(&self) -> f64 {
        self.sparsity + self.resource
    }
}

/// `y * sum_l grad_s_sparsity(m^l, s) + grad_s_resource(z)` for one group.
pub fn s_gradient(
    masks: &MaskSet,
    s: &SparsityState,
    rm: &ResourceModel,
    kind: UnitKind,
) -> Result<SGradient> {
    let mut proxy = 0.0;
    for row in masks.get(kind) {
        proxy += grad_s_sparsity(row, s.s(kind))?;
    }
    Ok(SGradient {
        sparsity: s.y * proxy,
        resource: grad_s_resource(rm, s.z, kind),
    })
}

/// Steps 2-4 of an iteration: descend on `s`, then ascend on `y` and `z`.
/// `masks` are the already-updated masks. Returns the s-gradients used.
pub fn update_sparsity_vars(
    masks: &MaskSet,
    s: &mut SparsityState,
    rm: &ResourceModel,
    cfg: &ModelConfig,
    run: &RunConfig,
) -> Result<[SGradient; 2]> {
    let gh = s_gradient(masks, s, rm, UnitKind::Head)?;
    let gi = s_gradient(masks, s, rm, UnitKind::Inter)?;
    for (kind, g) in [(UnitKind::Head, gh), (UnitKind::Inter, gi)] {
        let hi = (kind.width(cfg) - 1) as f64;
        let v = s.s_mut(kind);
        *v = (*v - run.eta2 * g.total()).clamp(0.0, hi);
    }
    let mass = group_mass(masks, s, UnitKind::Head)? + group_mass(masks, s, UnitKind::Inter)?;
    s.y += run.eta3 * mass;
    s.z = (s.z + run.eta4 * (resource(rm, s) - rm.budget)).max(0.0);
    Ok([gh, gi])
}

/// Variance across layers of the number of entries above the active threshold.
pub fn width_variance(rows: &[Vec<f64>]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let counts: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().filter(|&&v| v > ACTIVE_MASK_THRESHOLD).count() as f64)
        .collect();
    let mean = counts.iter().sum::<f64>() / counts.len() as f64;
    counts.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / counts.len() as f64
}

/// Whether the run met its constraints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintStatus {
    /// `M(s) <= M_prune + channel_cost`.
    pub resource_met: bool,
    /// Every smallest-`ceil(s)` mask entry is below the active threshold.
    pub sparsity_met: bool,
    pub resource_gap: f64,
    pub max_pruned_mask: f64,
}

impl ConstraintStatus {
    pub fn met(&self) -> bool {
        self.resource_met && self.sparsity_met
    }

    pub fn describe(&self) -> String {
        format!(
            "M(s) - M_prune = {:.1} (resource {}), largest mask among the smallest ceil(s) = {:.3e} (sparsity {})",
            self.resource_gap,
            if self.resource_met { "met" } else { "NOT met" },
            self.max_pruned_mask,
            if self.sparsity_met { "met" } else { "NOT met" },
        )
    }
}

pub fn constraint_status(
    masks: &MaskSet,
    s: &SparsityState,
    rm: &ResourceModel,
) -> Result<ConstraintStatus> {
    let gap = resource(rm, s) - rm.budget;
    let mut worst: f64 = 0.0;
    for kind in UnitKind::BOTH {
        let k = s.count(kind);
        for row in masks.get(kind) {
            for i in smallest_k_indices(row, k.min(row.len()))? {
                worst = worst.max(row[i].abs());
            }
        }
    }
    Ok(ConstraintStatus {
        resource_met: gap <= rm.channel_cost as f64,
        sparsity_met: worst < ACTIVE_MASK_THRESHOLD,
        resource_gap: gap,
        max_pruned_mask: worst,
    })
}

pub struct RunOutput {
    pub state: TrainState,
    pub trace: Vec<StepRecord>,
    pub status: ConstraintStatus,
    pub resource_model: ResourceModel,
}

/// Draws `batch` windows of `window + 1` tokens; the extra token supplies
/// next-token targets.
pub struct WindowSampler<'d> {
    tokens: &'d [usize],
    window: usize,
    rng: ChaCha8Rng,
}

impl<'d> WindowSampler<'d> {
    pub fn new(tokens: &'d [usize], window: usize, seed: u64) -> Result<Self> {
        if tokens.len() < window + 1 {
            return Err(Error::InvalidArgument(format!(
                "{} tokens cannot fill a window of {}",
                tokens.len(),
                window + 1
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(WindowSampler {
            tokens,
            window,
            rng,
        })
    }

    pub fn next_batch(&mut self, batch: usize) -> Vec<Vec<usize>> {
        let span = self.tokens.len() - self.window;
        (0..batch)
            .map(|_| {
                let start = self.rng.random_range(0..span);
                self.tokens[start..start + self.window + 1].to_vec()
            })
            .collect()
    }
}

/// Teacher and student graphs plus the frozen dense weights.
pub struct Trainer<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ModelParams,
    pub run: RunConfig,
    pub rm: ResourceModel,
    teacher: LmGraph,
    student: DistillGraph,
}

type GradMap = BTreeMap<String, Vec<f64>>;

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ModelParams, run: RunConfig) -> Result<Self> {
        run.validate()?;
        cfg.validate_dense()?;
        params.validate(cfg)?;
        if run.window > cfg.seq_len {
            return Err(Error::Config(format!(
                "window {} exceeds seq_len {}",
                run.window, cfg.seq_len
            )));
        }
        let rm = ResourceModel::new(cfg, run.target_sparsity)?;
        let teacher = LmGraph::build(cfg, GraphOptions::dense(), run.window)?;
        let opts = GraphOptions {
            masks: true,
            lora_targets: run.lora_targets(),
            lora_rank: run.lora_rank,
            trainable: Trainable::MasksAndLora,
        };
        let student = DistillGraph::build(cfg, opts, run.window, &run.distill())?;
        Ok(Trainer {
            cfg,
            params,
            run,
            rm,
            teacher,
            student,
        })
    }

    /// All-ones masks, `s = y = z = 0` and freshly initialised adapters.
    pub fn init_state(&self) -> Result<TrainState> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.run.seed);
        let lora = LoraSet::init(
            self.cfg,
            self.run.lora_rank,
            &self.run.lora_targets(),
            &mut rng,
        )?;
        Ok(TrainState {
            t: 0,
            masks: MaskSet::ones(self.cfg),
            sparsity: SparsityState::default(),
            lora,
            mask_opt: AdamW::new(self.run.mask_lr, 0.0),
            lora_opt: AdamW::new(self.run.lora_lr, 0.0),
        })
    }

    fn sequence_grads(
        &self,
        masks: &MaskTensors,
        lora: &LoraSet,
        window: &[usize],
    ) -> Result<(LossParts, GradMap)> {
        let n = self.run.window;
        if window.len() != n + 1 {
            return Err(Error::Shape(format!(
                "training window has {} tokens, expected {}",
                window.len(),
                n + 1
            )));
        }
        check_tokens(self.cfg, &window[..n])?;
        if window[n] >= self.cfg.vocab_size {
            return Err(Error::OutOfRange(format!("target token {}", window[n])));
        }
        let ids = Tensor::ids(&window[..n]);
        let targets = Tensor::ids(&window[1..]);

        let mut tb = Bindings::new();
        tb.bind("tokens", &ids);
        bind_params(&mut tb, self.params);
        let tv = self.teacher.graph.forward(&tb)?;
        let t_logits = tv.get(self.teacher.logits);
        let t_hidden: Vec<&Tensor> = self.teacher.hiddens.iter().map(|&h| tv.get(h)).collect();
        let keys: Vec<String> = (0..t_hidden.len()).map(teacher_hidden_key).collect();

        let mut sb = Bindings::new();
        sb.bind("tokens", &ids);
        bind_params(&mut sb, self.params);
        bind_masks(&mut sb, masks);
        bind_lora(&mut sb, lora);
        sb.bind(TEACHER_LOGITS, t_logits);
        for (k, h) in keys.iter().zip(&t_hidden) {
            sb.bind(k.clone(), h);
        }
        if self.student.lm_loss.is_some() {
            sb.bind(TARGETS, &targets);
        }
        let g = &self.student;
        let sv = g.lm.graph.forward(&sb)?;
        let parts = LossParts {
            total: sv.get(g.loss).item()?,
            kl: sv.get(g.kl).item()?,
            layer_mse: sv.get(g.layer_mse).item()?,
            lm: match g.lm_loss {
                Some(id) => sv.get(id).item()?,
                None => 0.0,
            },
        };
        let grads = g.lm.graph.backward(&sv, g.loss)?;
        let map = grads
            .into_map()
            .into_iter()
            .map(|(k, t)| (k, t.into_data()))
            .collect();
        Ok((parts, map))
    }

    /// Batch-mean loss and gradients, reduced in batch order.
    pub fn batch_gradients(
        &self,
        state: &TrainState,
        batch: &[Vec<usize>],
    ) -> Result<(LossParts, GradMap)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let masks = state.masks.to_tensors();
        let per_seq: Vec<(LossParts, GradMap)> = batch
            .par_iter()
            .map(|w| self.sequence_grads(&masks, &state.lora, w))
            .collect::<Result<_>>()?;
        let inv = 1.0 / batch.len() as f64;
        let mut loss = LossParts::default();
        let mut sum: GradMap = BTreeMap::new();
        for (parts, grads) in per_seq {
            loss.total += parts.total * inv;
            loss.kl += parts.kl * inv;
            loss.layer_mse += parts.layer_mse * inv;
            loss.lm += parts.lm * inv;
            for (k, g) in grads {
                match sum.get_mut(&k) {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a += v * inv;
                        }
                    }
                    None => {
                        sum.insert(k, g.iter().map(|v| v * inv).collect());
                    }
                }
            }
        }
        Ok((loss, sum))
    }

    /// One iteration of the minimax scheme.
    pub fn step(&self, state: &mut TrainState, batch: &[Vec<usize>]) -> Result<StepRecord> {
        let t = state.t;
        let numerical = |detail: String| Error::Numerical {
            iteration: t,
            detail,
        };
        let (loss, grads) = self.batch_gradients(state, batch).map_err(|e| match e {
            Error::NonFinite(d) => numerical(d),
            other => other,
        })?;
        if !loss.total.is_finite() {
            return Err(numerical(format!("loss is {}", loss.total)));
        }
        let take = |name: &str| {
            grads
                .get(name)
                .ok_or_else(|| Error::Unbound(format!("gradient for `{name}`")))
        };

        // (1) masks: AdamW, clamp, prox
        state.mask_opt.begin_step();
        for kind in UnitKind::BOTH {
            for l in 0..self.cfg.n_layers {
                let key = kind.key(l);
                let g = take(&key)?;
                let row = &mut state.masks.get_mut(kind)[l];
                state.mask_opt.update(&key, row, g)?;
            }
        }
        state.masks.clamp();
        let s = &state.sparsity;
        let interval = interval_schedule(t, &self.run);
        let inter_prox = t.is_multiple_of(interval);
        for l in 0..self.cfg.n_layers {
            state.masks.head[l] = prox(&state.masks.head[l], s.s_head, self.run.eta1, s.y)?;
            if inter_prox {
                state.masks.inter[l] = prox(&state.masks.inter[l], s.s_inter, self.run.eta1, s.y)?;
            }
        }

        // (2)-(4) sparsity levels and multipliers
        let [gh, gi] = update_sparsity_vars(
            &state.masks,
            &mut state.sparsity,
            &self.rm,
            self.cfg,
            &self.run,
        )?;

        // (5) adapters
        state.lora_opt.begin_step();
        for (name, tensor) in state.lora.named_mut() {
            let g = take(&name)?;
            state.lora_opt.update(&name, tensor.data_mut(), g)?;
        }
        if let Some((name, _)) = state
            .lora
            .named()
            .into_iter()
            .find(|(_, t)| t.data().iter().any(|v| !v.is_finite()))
        {
            return Err(numerical(format!("adapter {name} became non-finite")));
        }

        let s = &state.sparsity;
        let per_layer = |kind: UnitKind| -> Result<Vec<f64>> {
            let k = s.count(kind);
            state
                .masks
                .get(kind)
                .iter()
                .map(|row| crate::sparsity::smallest_k_sqnorm(row, k.min(row.len())).map(|v| v.0))
                .collect()
        };
        let record = StepRecord {
            iteration: t,
            loss: loss.total,
            kl: loss.kl,
            layer_mse: loss.layer_mse,
            lm_loss: loss.lm,
            s_head: s.s_head,
            s_inter: s.s_inter,
            grad_s_head: gh.total(),
            grad_s_inter: gi.total(),
            y: s.y,
            z: s.z,
            resource: resource(&self.rm, s),
            interval,
            inter_prox,
            head_mass: per_layer(UnitKind::Head)?,
            inter_mass: per_layer(UnitKind::Inter)?,
            head_width_var: width_variance(&state.masks.head),
            inter_width_var: width_variance(&state.masks.inter),
        };
        state.t += 1;
        Ok(record)
    }

    /// Runs `iterations` steps on windows sampled from `train_tokens`.
    pub fn run(&self, train_tokens: &[usize]) -> Result<RunOutput> {
        self.run_with(train_tokens, |_| {})
    }

    /// As [`Trainer::run`], calling `observe` after every step.
    pub fn run_with<F: FnMut(&StepRecord)>(
        &self,
        train_tokens: &[usize],
        mut observe: F,
    ) -> Result<RunOutput> {
        let mut sampler = WindowSampler::new(train_tokens, self.run.window, self.run.seed)?;
        let mut state = self.init_state()?;
        let mut trace = Vec::with_capacity(self.run.iterations);
        while state.t < self.run.iterations {
            let batch = sampler.next_batch(self.run.batch_size);
            let rec = self.step(&mut state, &batch)?;
            observe(&rec);
            trace.push(rec);
        }
        let status = constraint_status(&state.masks, &state.sparsity, &self.rm)?;
        Ok(RunOutput {
            state,
            trace,
            status,
            resource_model: self.rm.clone(),
        })
    }
}
