use std::borrow::Cow;

use rand::seq::index;
use serde_json::json;

use super::memory::{gdumb_rebalance, replay_store};
use super::projection::{agem_project, gem_project};
use super::regularizers::{
    compute_fisher, ewc_penalty, ewc_penalty_gradient, online_ewc_penalty, online_ewc_penalty_gradient,
    si_consolidate, si_observe, si_penalty, si_penalty_gradient, EwcState, OnlineEwcState, SiState,
};
use super::{Strategy, StrategyConfig};
use crate::autodiff::{softmax_rows, GradientVector, LayoutEntry, ParameterVector, Tensor};
use crate::checkpoint::{Checkpoint, NamedArray};
use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::models::{build_model, DistillTarget, Model};
use crate::seed;

fn kind(name: &str) -> String {
    format!("strategy:{name}")
}

fn new_checkpoint(name: &str, config: &StrategyConfig, extra: serde_json::Value) -> Checkpoint {
    Checkpoint {
        kind: kind(name),
        metadata: json!({ "config": config, "state": extra }),
        arrays: Vec::new(),
    }
}

fn expect_kind<'a>(ck: &'a Checkpoint, name: &str, config: &StrategyConfig) -> Result<&'a serde_json::Value> {
    if ck.kind != kind(name) {
        return Err(Error::Data(format!("checkpoint `{}` cannot restore strategy `{name}`", ck.kind)));
    }
    let stored: StrategyConfig = serde_json::from_value(ck.metadata["config"].clone())?;
    if &stored != config {
        return Err(Error::Data(format!("checkpoint was taken with {stored}, strategy is {config}")));
    }
    Ok(&ck.metadata["state"])
}

fn meta_usize(v: &serde_json::Value, key: &str) -> Result<usize> {
    v[key]
        .as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| Error::Data(format!("strategy checkpoint lacks `{key}`")))
}

fn push_dataset(ck: &mut Checkpoint, prefix: &str, ds: &TaskDataset) -> serde_json::Value {
    let n = ds.len();
    let to_f64 = |v: Vec<f64>| v;
    ck.arrays.push(NamedArray {
        name: format!("{prefix}.x"),
        shape: vec![n, ds.timesteps, ds.features],
        data: ds.x.clone(),
    });
    ck.arrays.push(NamedArray::vector(
        format!("{prefix}.labels"),
        to_f64(ds.labels.iter().map(|&y| f64::from(y)).collect()),
    ));
    ck.arrays.push(NamedArray::vector(
        format!("{prefix}.patient_ids"),
        ds.patient_ids.iter().map(|&p| p as f64).collect(),
    ));
    ck.arrays.push(NamedArray::vector(
        format!("{prefix}.source_indices"),
        ds.source_indices.iter().map(|&i| i as f64).collect(),
    ));
    json!({ "name": ds.name, "timesteps": ds.timesteps, "features": ds.features })
}

fn read_dataset(ck: &Checkpoint, prefix: &str, meta: &serde_json::Value) -> Result<TaskDataset> {
    let name = meta["name"].as_str().unwrap_or_default();
    TaskDataset::new(
        name,
        meta_usize(meta, "timesteps")?,
        meta_usize(meta, "features")?,
        ck.array(&format!("{prefix}.x"))?.data.clone(),
        ck.array(&format!("{prefix}.labels"))?.data.iter().map(|&y| y as u8).collect(),
        ck.array(&format!("{prefix}.patient_ids"))?.data.iter().map(|&p| p as i64).collect(),
        ck.array(&format!("{prefix}.source_indices"))?.data.iter().map(|&i| i as usize).collect(),
    )
}

fn push_buffers(ck: &mut Checkpoint, buffers: &[TaskDataset]) -> serde_json::Value {
    let metas: Vec<serde_json::Value> = buffers
        .iter()
        .enumerate()
        .map(|(k, b)| push_dataset(ck, &format!("buffer.{k}"), b))
        .collect();
    serde_json::Value::Array(metas)
}

fn read_buffers(ck: &Checkpoint, metas: &serde_json::Value) -> Result<Vec<TaskDataset>> {
    metas
        .as_array()
        .ok_or_else(|| Error::Data("strategy checkpoint lacks buffer metadata".into()))?
        .iter()
        .enumerate()
        .map(|(k, m)| read_dataset(ck, &format!("buffer.{k}"), m))
        .collect()
}

fn push_params(ck: &mut Checkpoint, name: &str, p: &ParameterVector) -> serde_json::Value {
    ck.arrays.push(NamedArray::vector(name, p.values().to_vec()));
    json!(p.layout())
}

fn read_params(ck: &Checkpoint, name: &str, layout: &serde_json::Value) -> Result<ParameterVector> {
    let layout: Vec<LayoutEntry> = serde_json::from_value(layout.clone())?;
    ParameterVector::from_parts(layout, ck.array(name)?.data.clone())
}

fn read_vec(ck: &Checkpoint, name: &str) -> Result<Vec<f64>> {
    Ok(ck.array(name)?.data.clone())
}

/// Buffered samples followed by the current task, or the task alone when
/// nothing is buffered.
fn with_memory<'a>(buffers: &[TaskDataset], train: &'a TaskDataset) -> Result<Cow<'a, TaskDataset>> {
    if buffers.iter().all(TaskDataset::is_empty) {
        return Ok(Cow::Borrowed(train));
    }
    let parts = buffers.iter().filter(|b| !b.is_empty()).chain(std::iter::once(train));
    let merged = TaskDataset::concat(&train.name, parts)?.expect("at least the current task");
    Ok(Cow::Owned(merged))
}

pub struct Naive {
    config: StrategyConfig,
}

impl Naive {
    pub fn new(config: StrategyConfig) -> Self {
        Self { config }
    }
}

impl Strategy for Naive {
    fn name(&self) -> &'static str {
        "naive"
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(new_checkpoint(self.name(), &self.config, json!({})))
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        expect_kind(ck, self.name(), &self.config).map(|_| ())
    }
}

/// Trains each task on the union of every training set seen so far.
pub struct Cumulative {
    config: StrategyConfig,
    seen: Vec<TaskDataset>,
}

impl Cumulative {
    pub fn new(config: StrategyConfig) -> Self {
        Self {
            config,
            seen: Vec::new(),
        }
    }
}

impl Strategy for Cumulative {
    fn name(&self) -> &'static str {
        "cumulative"
    }

    fn training_set<'a>(&self, _task: usize, train: &'a TaskDataset) -> Result<Cow<'a, TaskDataset>> {
        with_memory(&self.seen, train)
    }

    fn after_task(&mut self, _task: usize, _model: &Model, train: &TaskDataset) -> Result<()> {
        self.seen.push(train.clone());
        Ok(())
    }

    fn buffer_sizes(&self) -> Vec<usize> {
        self.seen.iter().map(TaskDataset::len).collect()
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = new_checkpoint(self.name(), &self.config, json!({}));
        let metas = push_buffers(&mut ck, &self.seen);
        ck.metadata["state"] = json!({ "buffers": metas });
        Ok(ck)
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let state = expect_kind(ck, self.name(), &self.config)?;
        self.seen = read_buffers(ck, &state["buffers"])?;
        Ok(())
    }
}

pub struct Ewc {
    config: StrategyConfig,
    state: EwcState,
}

impl Ewc {
    pub fn new(config: StrategyConfig, lambda: f64) -> Self {
        Self {
            config,
            state: EwcState::new(lambda),
        }
    }

    pub fn state(&self) -> &EwcState {
        &self.state
    }
}

impl Strategy for Ewc {
    fn name(&self) -> &'static str {
        "ewc"
    }

    fn loss_penalty(&self, params: &ParameterVector) -> Result<Option<(f64, GradientVector)>> {
        if self.state.lambda == 0.0 || self.state.anchors.is_empty() {
            return Ok(None);
        }
        Ok(Some((ewc_penalty(params, &self.state)?, ewc_penalty_gradient(params, &self.state)?)))
    }

    fn after_task(&mut self, _task: usize, model: &Model, train: &TaskDataset) -> Result<()> {
        let fisher = compute_fisher(model, train)?;
        self.state.push(model.params().clone(), fisher)
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = new_checkpoint(self.name(), &self.config, json!({}));
        let mut layout = serde_json::Value::Null;
        for (k, (a, f)) in self.state.anchors.iter().zip(&self.state.fishers).enumerate() {
            layout = push_params(&mut ck, &format!("anchor.{k}"), a);
            ck.arrays.push(NamedArray::vector(format!("fisher.{k}"), f.clone()));
        }
        ck.metadata["state"] = json!({ "tasks": self.state.anchors.len(), "layout": layout });
        Ok(ck)
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let state = expect_kind(ck, self.name(), &self.config)?;
        let mut restored = EwcState::new(self.state.lambda);
        for k in 0..meta_usize(state, "tasks")? {
            restored.push(
                read_params(ck, &format!("anchor.{k}"), &state["layout"])?,
                read_vec(ck, &format!("fisher.{k}"))?,
            )?;
        }
        self.state = restored;
        Ok(())
    }
}

pub struct OnlineEwc {
    config: StrategyConfig,
    state: OnlineEwcState,
}

impl OnlineEwc {
    pub fn new(config: StrategyConfig, lambda: f64, decay: f64) -> Result<Self> {
        Ok(Self {
            config,
            state: OnlineEwcState::new(lambda, decay)?,
        })
    }

    pub fn state(&self) -> &OnlineEwcState {
        &self.state
    }
}

impl Strategy for OnlineEwc {
    fn name(&self) -> &'static str {
        "online_ewc"
    }

    fn loss_penalty(&self, params: &ParameterVector) -> Result<Option<(f64, GradientVector)>> {
        if self.state.lambda == 0.0 || self.state.anchor.is_none() {
            return Ok(None);
        }
        Ok(Some((
            online_ewc_penalty(params, &self.state)?,
            online_ewc_penalty_gradient(params, &self.state)?,
        )))
    }

    fn after_task(&mut self, _task: usize, model: &Model, train: &TaskDataset) -> Result<()> {
        let fisher = compute_fisher(model, train)?;
        self.state.consolidate(model.params().clone(), fisher)
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = new_checkpoint(self.name(), &self.config, json!({}));
        if let (Some(a), Some(f)) = (&self.state.anchor, &self.state.running_fisher) {
            let layout = push_params(&mut ck, "anchor", a);
            ck.arrays.push(NamedArray::vector("running_fisher", f.clone()));
            ck.metadata["state"] = json!({ "layout": layout });
        }
        Ok(ck)
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let state = expect_kind(ck, self.name(), &self.config)?;
        if state.get("layout").is_some() {
            self.state.anchor = Some(read_params(ck, "anchor", &state["layout"])?);
            self.state.running_fisher = Some(read_vec(ck, "running_fisher")?);
        } else {
            self.state.anchor = None;
            self.state.running_fisher = None;
        }
        Ok(())
    }
}

pub struct Si {
    config: StrategyConfig,
    strength: f64,
    damping: f64,
    state: Option<SiState>,
}

impl Si {
    pub fn new(config: StrategyConfig, strength: f64, damping: f64) -> Self {
        Self {
            config,
            strength,
            damping,
            state: None,
        }
    }

    pub fn state(&self) -> Option<&SiState> {
        self.state.as_ref()
    }
}

impl Strategy for Si {
    fn name(&self) -> &'static str {
        "si"
    }

    fn before_task(&mut self, _task: usize, model: &mut Model, _train: &TaskDataset) -> Result<()> {
        if self.state.is_none() {
            self.state = Some(SiState::new(self.strength, self.damping, model.param_count())?);
        }
        self.state.as_mut().expect("initialized above").begin_task(model.params())
    }

    fn loss_penalty(&self, params: &ParameterVector) -> Result<Option<(f64, GradientVector)>> {
        match &self.state {
            Some(s) if self.strength != 0.0 && s.anchor.is_some() => {
                Ok(Some((si_penalty(params, s)?, si_penalty_gradient(params, s)?)))
            }
            _ => Ok(None),
        }
    }

    fn per_step_observe(&mut self, data_grad: &GradientVector, delta: &[f64]) -> Result<()> {
        match self.state.as_mut() {
            Some(s) => si_observe(s, data_grad, delta),
            None => Err(Error::Usage("SI observed a step before its first task began".into())),
        }
    }

    fn after_task(&mut self, _task: usize, model: &Model, _train: &TaskDataset) -> Result<()> {
        match self.state.as_mut() {
            Some(s) => si_consolidate(s, model.params()),
            None => Err(Error::Usage("SI task ended before it began".into())),
        }
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = new_checkpoint(self.name(), &self.config, json!({}));
        if let Some(s) = &self.state {
            ck.arrays.push(NamedArray::vector("omega", s.omega.clone()));
            ck.arrays.push(NamedArray::vector("importance", s.importance.clone()));
            ck.arrays.push(NamedArray::vector("task_start", s.task_start.clone()));
            let layout = s.anchor.as_ref().map(|a| push_params(&mut ck, "anchor", a));
            ck.metadata["state"] = json!({ "initialized": true, "layout": layout });
        }
        Ok(ck)
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let state = expect_kind(ck, self.name(), &self.config)?;
        if state.get("initialized").is_none() {
            self.state = None;
            return Ok(());
        }
        let omega = read_vec(ck, "omega")?;
        let mut s = SiState::new(self.strength, self.damping, omega.len())?;
        s.omega = omega;
        s.importance = read_vec(ck, "importance")?;
        s.task_start = read_vec(ck, "task_start")?;
        if !state["layout"].is_null() {
            s.anchor = Some(read_params(ck, "anchor", &state["layout"])?);
        }
        self.state = Some(s);
        Ok(())
    }
}

/// Output distillation toward a frozen copy of the model taken at the start
/// of each task after the first.
pub struct Lwf {
    config: StrategyConfig,
    alpha: f64,
    temperature: f64,
    teacher: Option<Model>,
}

impl Lwf {
    pub fn new(config: StrategyConfig, alpha: f64, temperature: f64) -> Self {
        Self {
            config,
            alpha,
            temperature,
            teacher: None,
        }
    }

    pub fn teacher(&self) -> Option<&Model> {
        self.teacher.as_ref()
    }
}

impl Strategy for Lwf {
    fn name(&self) -> &'static str {
        "lwf"
    }

    fn before_task(&mut self, task: usize, model: &mut Model, _train: &TaskDataset) -> Result<()> {
        if task > 0 {
            self.teacher = Some(model.clone());
        }
        Ok(())
    }

    fn distill_target(&self, batch: &Tensor) -> Result<Option<DistillTarget>> {
        match &self.teacher {
            Some(teacher) if self.alpha != 0.0 => {
                let logits = teacher.logits(batch)?;
                Ok(Some(DistillTarget {
                    teacher_probs: softmax_rows(&logits, self.temperature)?.into_data(),
                    alpha: self.alpha,
                    temperature: self.temperature,
                }))
            }
            _ => Ok(None),
        }
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = new_checkpoint(self.name(), &self.config, json!({}));
        if let Some(t) = &self.teacher {
            let inner = t.to_checkpoint();
            ck.arrays.extend(inner.arrays.into_iter().map(|mut a| {
                a.name = format!("teacher/{}", a.name);
                a
            }));
            ck.metadata["state"] = json!({ "teacher": inner.metadata });
        }
        Ok(ck)
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let state = expect_kind(ck, self.name(), &self.config)?;
        self.teacher = match state.get("teacher") {
            Some(meta) => {
                let inner = Checkpoint {
                    kind: "model".into(),
                    metadata: meta.clone(),
                    arrays: ck
                        .arrays
                        .iter()
                        .filter_map(|a| {
                            a.name.strip_prefix("teacher/").map(|n| NamedArray {
                                name: n.to_string(),
                                shape: a.shape.clone(),
                                data: a.data.clone(),
                            })
                        })
                        .collect(),
                };
                Some(Model::from_checkpoint(&inner)?)
            }
            None => None,
        };
        Ok(())
    }
}

/// Keeps a uniform sample of up to `budget` examples per task and mixes every
/// buffer into later tasks' training sets.
pub struct Replay {
    config: StrategyConfig,
    budget: usize,
    seed: u64,
    buffers: Vec<TaskDataset>,
}

impl Replay {
    pub fn new(config: StrategyConfig, budget: usize, run_seed: u64) -> Self {
        Self {
            config,
            budget,
            seed: run_seed,
            buffers: Vec::new(),
        }
    }

    pub fn buffers(&self) -> &[TaskDataset] {
        &self.buffers
    }
}

impl Strategy for Replay {
    fn name(&self) -> &'static str {
        "replay"
    }

    fn training_set<'a>(&self, _task: usize, train: &'a TaskDataset) -> Result<Cow<'a, TaskDataset>> {
        with_memory(&self.buffers, train)
    }

    fn after_task(&mut self, task: usize, _model: &Model, train: &TaskDataset) -> Result<()> {
        let idx = replay_store(
            train.len(),
            self.budget,
            seed::derive_indexed(self.seed, "replay/store", task as u64),
        );
        self.buffers.push(train.subset(&idx));
        Ok(())
    }

    fn buffer_sizes(&self) -> Vec<usize> {
        self.buffers.iter().map(TaskDataset::len).collect()
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = new_checkpoint(self.name(), &self.config, json!({}));
        let metas = push_buffers(&mut ck, &self.buffers);
        ck.metadata["state"] = json!({ "buffers": metas });
        Ok(ck)
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let state = expect_kind(ck, self.name(), &self.config)?;
        self.buffers = read_buffers(ck, &state["buffers"])?;
        Ok(())
    }
}

/// Greedy class-agnostic buffer with a total budget split evenly over seen
/// tasks. In retrain mode every task starts from a freshly initialized model
/// trained on the rebalanced buffer alone.
pub struct GDumb {
    config: StrategyConfig,
    budget: usize,
    retrain: bool,
    seed: u64,
    buffers: Vec<TaskDataset>,
}

impl GDumb {
    pub fn new(config: StrategyConfig, budget: usize, retrain: bool, run_seed: u64) -> Self {
        Self {
            config,
            budget,
            retrain,
            seed: run_seed,
            buffers: Vec::new(),
        }
    }

    pub fn buffers(&self) -> &[TaskDataset] {
        &self.buffers
    }
}

impl Strategy for GDumb {
    fn name(&self) -> &'static str {
        "gdumb"
    }

    fn before_task(&mut self, task: usize, model: &mut Model, train: &TaskDataset) -> Result<()> {
        if self.retrain {
            self.buffers.push(train.clone());
            gdumb_rebalance(&mut self.buffers, self.budget)?;
            let init = seed::derive_indexed(self.seed, "gdumb/init", task as u64);
            *model = build_model(model.spec(), model.input_dims(), init)?;
        }
        Ok(())
    }

    fn training_set<'a>(&self, _task: usize, train: &'a TaskDataset) -> Result<Cow<'a, TaskDataset>> {
        if self.retrain {
            let merged = TaskDataset::concat(&train.name, self.buffers.iter())?;
            Ok(Cow::Owned(merged.unwrap_or_else(|| train.empty_like(&train.name))))
        } else {
            with_memory(&self.buffers, train)
        }
    }

    fn after_task(&mut self, _task: usize, _model: &Model, train: &TaskDataset) -> Result<()> {
        if !self.retrain {
            self.buffers.push(train.clone());
            gdumb_rebalance(&mut self.buffers, self.budget)?;
        }
        Ok(())
    }

    fn buffer_sizes(&self) -> Vec<usize> {
        self.buffers.iter().map(TaskDataset::len).collect()
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = new_checkpoint(self.name(), &self.config, json!({}));
        let metas = push_buffers(&mut ck, &self.buffers);
        ck.metadata["state"] = json!({ "buffers": metas });
        Ok(ck)
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let state = expect_kind(ck, self.name(), &self.config)?;
        self.buffers = read_buffers(ck, &state["buffers"])?;
        Ok(())
    }
}

fn store_for_task(budget: usize, seed_value: u64, label: &str, task: usize, train: &TaskDataset) -> TaskDataset {
    let idx = replay_store(train.len(), budget, seed::derive_indexed(seed_value, label, task as u64));
    train.subset(&idx)
}

/// Projects each step's gradient so that no past task's buffered loss
/// increases to first order.
pub struct Gem {
    config: StrategyConfig,
    budget: usize,
    margin: f64,
    seed: u64,
    class_weights: [f64; 2],
    buffers: Vec<TaskDataset>,
}

impl Gem {
    pub fn new(config: StrategyConfig, budget: usize, margin: f64, run_seed: u64, class_weights: [f64; 2]) -> Self {
        Self {
            config,
            budget,
            margin,
            seed: run_seed,
            class_weights,
            buffers: Vec::new(),
        }
    }
}

impl Strategy for Gem {
    fn name(&self) -> &'static str {
        "gem"
    }

    fn transform_gradient(&mut self, model: &Model, g: GradientVector) -> Result<GradientVector> {
        let mut refs = Vec::with_capacity(self.buffers.len());
        for buf in self.buffers.iter().filter(|b| !b.is_empty()) {
            let (x, y) = buf.full_batch()?;
            refs.push(model.loss_and_grad(&x, &y, &self.class_weights, None)?.1);
        }
        if refs.is_empty() {
            return Ok(g);
        }
        gem_project(&g, &refs, self.margin)
    }

    fn after_task(&mut self, task: usize, _model: &Model, train: &TaskDataset) -> Result<()> {
        self.buffers.push(store_for_task(self.budget, self.seed, "gem/store", task, train));
        Ok(())
    }

    fn buffer_sizes(&self) -> Vec<usize> {
        self.buffers.iter().map(TaskDataset::len).collect()
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = new_checkpoint(self.name(), &self.config, json!({}));
        let metas = push_buffers(&mut ck, &self.buffers);
        ck.metadata["state"] = json!({ "buffers": metas });
        Ok(ck)
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let state = expect_kind(ck, self.name(), &self.config)?;
        self.buffers = read_buffers(ck, &state["buffers"])?;
        Ok(())
    }
}

/// Projects against the gradient of a random sample drawn from all buffers.
pub struct Agem {
    config: StrategyConfig,
    budget: usize,
    sample_size: usize,
    seed: u64,
    class_weights: [f64; 2],
    buffers: Vec<TaskDataset>,
    union: Option<TaskDataset>,
    steps: u64,
}

impl Agem {
    pub fn new(
        config: StrategyConfig,
        budget: usize,
        sample_size: usize,
        run_seed: u64,
        class_weights: [f64; 2],
    ) -> Self {
        Self {
            config,
            budget,
            sample_size,
            seed: run_seed,
            class_weights,
            buffers: Vec::new(),
            union: None,
            steps: 0,
        }
    }

    fn rebuild_union(&mut self) -> Result<()> {
        self.union = TaskDataset::concat("memory", self.buffers.iter().filter(|b| !b.is_empty()))?;
        Ok(())
    }
}

impl Strategy for Agem {
    fn name(&self) -> &'static str {
        "agem"
    }

    fn transform_gradient(&mut self, model: &Model, g: GradientVector) -> Result<GradientVector> {
        let Some(memory) = &self.union else { return Ok(g) };
        if self.sample_size == 0 {
            return Ok(g);
        }
        let k = self.sample_size.min(memory.len());
        let mut rng = seed::rng(seed::derive_indexed(self.seed, "agem/sample", self.steps));
        self.steps += 1;
        let mut idx = index::sample(&mut rng, memory.len(), k).into_vec();
        idx.sort_unstable();
        let (x, y) = memory.batch(&idx)?;
        let g_ref = model.loss_and_grad(&x, &y, &self.class_weights, None)?.1;
        Ok(agem_project(&g, &g_ref))
    }

    fn after_task(&mut self, task: usize, _model: &Model, train: &TaskDataset) -> Result<()> {
        self.buffers.push(store_for_task(self.budget, self.seed, "agem/store", task, train));
        self.rebuild_union()
    }

    fn buffer_sizes(&self) -> Vec<usize> {
        self.buffers.iter().map(TaskDataset::len).collect()
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = new_checkpoint(self.name(), &self.config, json!({}));
        let metas = push_buffers(&mut ck, &self.buffers);
        ck.metadata["state"] = json!({ "buffers": metas, "steps": self.steps });
        Ok(ck)
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let state = expect_kind(ck, self.name(), &self.config)?;
        self.buffers = read_buffers(ck, &state["buffers"])?;
        self.steps = state["steps"]
            .as_u64()
            .ok_or_else(|| Error::Data("A-GEM checkpoint lacks `steps`".into()))?;
        self.rebuild_union()
    }
}
