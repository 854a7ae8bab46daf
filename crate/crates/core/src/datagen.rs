//! Synthetic domain-shifted cohorts, the on-disk dataset format, and the
//! task split / patient-level partition used by every experiment.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub key: String,
    pub values: Vec<String>,
    /// Standard deviation of each value's random mean offset, per feature.
    #[serde(default)]
    pub offset_scale: f64,
    /// Explicit offsets, one row of length `n_timevarying + n_statics` per
    /// value. Added on top of the random offsets.
    #[serde(default)]
    pub offsets: Option<Vec<Vec<f64>>>,
    /// How far each value's outcome signature departs from the shared one:
    /// 0 keeps the shared direction, 1 draws an independent direction.
    #[serde(default)]
    pub direction_shift: f64,
    /// Per-value outcome prevalence, overriding the cohort's base rate.
    #[serde(default)]
    pub prevalence: Option<Vec<f64>>,
}

impl DomainSpec {
    pub fn named(key: &str, values: &[&str]) -> Self {
        Self {
            key: key.into(),
            values: values.iter().map(|v| v.to_string()).collect(),
            offset_scale: 0.0,
            offsets: None,
            direction_shift: 0.0,
            prevalence: None,
        }
    }

    pub fn numbered(key: &str, prefix: &str, n: usize) -> Self {
        let values: Vec<String> = (0..n).map(|i| format!("{prefix}{i:02}")).collect();
        Self {
            key: key.into(),
            values,
            offset_scale: 0.0,
            offsets: None,
            direction_shift: 0.0,
            prevalence: None,
        }
    }

    pub fn with_shift(mut self, offset_scale: f64, direction_shift: f64) -> Self {
        self.offset_scale = offset_scale;
        self.direction_shift = direction_shift;
        self
    }
}

/// Inclusive range of admissions per patient, drawn uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmissionsRange {
    pub min: usize,
    pub max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftProfile {
    pub name: String,
    pub n_patients: usize,
    pub admissions: AdmissionsRange,
    pub timesteps: usize,
    pub n_timevarying: usize,
    pub n_statics: usize,
    /// Base outcome prevalence.
    pub prevalence: f64,
    /// Standard deviation of the per-step innovation noise.
    pub noise_scale: f64,
    /// Standard deviation of each patient's persistent feature offset.
    pub patient_effect_scale: f64,
    /// AR(1) coefficient of the latent trajectories.
    pub ar_coefficient: f64,
    /// Size of the outcome signal at the last timestep.
    pub signal_strength: f64,
    pub domains: Vec<DomainSpec>,
}

pub const PRESETS: &[&str] = &["default", "strong-shift", "hospital-20"];

impl ShiftProfile {
    /// Five domain keys with the usual category counts and mild shift.
    pub fn default_profile(n_hospitals: usize) -> Self {
        Self {
            name: "default".into(),
            n_patients: 4000,
            admissions: AdmissionsRange { min: 1, max: 3 },
            timesteps: 48,
            n_timevarying: 8,
            n_statics: 2,
            prevalence: 0.10,
            noise_scale: 0.5,
            patient_effect_scale: 0.3,
            ar_coefficient: 0.8,
            signal_strength: 1.5,
            domains: vec![
                DomainSpec::named("age", &["18-29", "30-39", "40-49", "50-59", "60-69", "70+"]).with_shift(0.5, 0.3),
                DomainSpec::named("ward", &["micu", "sicu", "ccu", "csru", "tsicu"]).with_shift(0.5, 0.3),
                DomainSpec::named("season", &["winter", "spring", "summer", "autumn"]).with_shift(0.3, 0.2),
                DomainSpec::named("ethnicity", &["white", "black", "hispanic", "asian", "other"]).with_shift(0.3, 0.2),
                DomainSpec::numbered("hospital", "h", n_hospitals).with_shift(0.5, 0.4),
            ],
        }
    }

    /// Three domains with large mean offsets and unrelated outcome signatures.
    pub fn strong_shift() -> Self {
        Self {
            name: "strong-shift".into(),
            n_patients: 1800,
            admissions: AdmissionsRange { min: 1, max: 1 },
            timesteps: 48,
            n_timevarying: 8,
            n_statics: 2,
            prevalence: 0.25,
            noise_scale: 0.5,
            patient_effect_scale: 0.2,
            ar_coefficient: 0.8,
            signal_strength: 2.0,
            domains: vec![DomainSpec::named("domain", &["a", "b", "c"]).with_shift(3.0, 1.0)],
        }
    }

    /// Twenty hospitals with moderate, heterogeneous shift.
    pub fn hospital20() -> Self {
        Self {
            name: "hospital-20".into(),
            n_patients: 4000,
            admissions: AdmissionsRange { min: 1, max: 1 },
            timesteps: 48,
            n_timevarying: 8,
            n_statics: 2,
            prevalence: 0.25,
            noise_scale: 0.5,
            patient_effect_scale: 0.2,
            ar_coefficient: 0.8,
            signal_strength: 2.0,
            domains: vec![DomainSpec::numbered("hospital", "h", 20).with_shift(2.0, 1.0)],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default_profile(20)),
            "strong-shift" => Ok(Self::strong_shift()),
            "hospital-20" => Ok(Self::hospital20()),
            other => Err(Error::Config(format!(
                "unknown profile `{other}` (presets: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn n_features(&self) -> usize {
        self.n_timevarying + self.n_statics
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("profile `{}`: {msg}", self.name)));
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        if self.admissions.min == 0 || self.admissions.max < self.admissions.min {
            return bad(format!(
                "admissions range {}..={} is empty or allows zero",
                self.admissions.min, self.admissions.max
            ));
        }
        if self.timesteps == 0 || self.n_timevarying == 0 {
            return bad("timesteps and n_timevarying must be positive".into());
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return bad(format!("prevalence {} is outside (0, 1)", self.prevalence));
        }
        if !(0.0..=1.0).contains(&self.ar_coefficient) {
            return bad(format!("ar_coefficient {} is outside [0, 1]", self.ar_coefficient));
        }
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("patient_effect_scale", self.patient_effect_scale),
            ("signal_strength", self.signal_strength),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        let mut keys = HashSet::new();
        for d in &self.domains {
            if !keys.insert(d.key.as_str()) {
                return bad(format!("domain key `{}` appears twice", d.key));
            }
            if d.values.is_empty() {
                return bad(format!("domain `{}` has no values", d.key));
            }
            if d.values.iter().collect::<HashSet<_>>().len() != d.values.len() {
                return bad(format!("domain `{}` repeats a value", d.key));
            }
            if !(d.offset_scale >= 0.0) || !(0.0..=1.0).contains(&d.direction_shift) {
                return bad(format!(
                    "domain `{}` needs offset_scale >= 0 and direction_shift in [0, 1]",
                    d.key
                ));
            }
            if let Some(p) = &d.prevalence {
                if p.len() != d.values.len() || p.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
                    return bad(format!(
                        "domain `{}` prevalence needs one value in (0, 1) per domain value",
                        d.key
                    ));
                }
            }
            if let Some(o) = &d.offsets {
                if o.len() != d.values.len() || o.iter().any(|row| row.len() != self.n_features()) {
                    return bad(format!(
                        "domain `{}` offsets need {} rows of length {}",
                        d.key,
                        d.values.len(),
                        self.n_features()
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainColumn {
    pub key: String,
    pub vocabulary: Vec<String>,
    pub codes: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortDataset {
    pub n_samples: usize,
    pub timesteps: usize,
    pub n_timevarying: usize,
    pub n_statics: usize,
    /// `[N, T, Dt]` row-major.
    pub timevarying: Vec<f64>,
    /// `[N, Ds]` row-major.
    pub statics: Vec<f64>,
    pub labels: Vec<u8>,
    pub patient_ids: Vec<i64>,
    pub domains: Vec<DomainColumn>,
}

impl CohortDataset {
    pub fn validate(&self) -> Result<()> {
        let n = self.n_samples;
        if self.timevarying.len() != n * self.timesteps * self.n_timevarying
            || self.statics.len() != n * self.n_statics
            || self.labels.len() != n
            || self.patient_ids.len() != n
        {
            return Err(Error::Data(format!("cohort arrays do not agree on {n} samples")));
        }
        if self.labels.iter().any(|&y| y > 1) {
            return Err(Error::Data("cohort labels must be binary".into()));
        }
        for d in &self.domains {
            if d.codes.len() != n || d.codes.iter().any(|&c| c as usize >= d.vocabulary.len()) {
                return Err(Error::Data(format!("domain column `{}` is inconsistent", d.key)));
            }
        }
        Ok(())
    }

    pub fn domain(&self, key: &str) -> Result<&DomainColumn> {
        self.domains.iter().find(|d| d.key == key).ok_or_else(|| {
            let known: Vec<&str> = self.domains.iter().map(|d| d.key.as_str()).collect();
            Error::Config(format!("domain key `{key}` not in cohort (have: {})", known.join(", ")))
        })
    }

    /// Samples at `indices` with statics repeated over time, as one task.
    pub fn task(&self, name: &str, indices: &[usize]) -> Result<TaskDataset> {
        let (t, dt, ds) = (self.timesteps, self.n_timevarying, self.n_statics);
        let d = dt + ds;
        let mut x = Vec::with_capacity(indices.len() * t * d);
        for &i in indices {
            let st = &self.statics[i * ds..(i + 1) * ds];
            for step in 0..t {
                let base = (i * t + step) * dt;
                x.extend_from_slice(&self.timevarying[base..base + dt]);
                x.extend_from_slice(st);
            }
        }
        TaskDataset::new(
            name,
            t,
            d,
            x,
            indices.iter().map(|&i| self.labels[i]).collect(),
            indices.iter().map(|&i| self.patient_ids[i]).collect(),
            indices.to_vec(),
        )
    }
}

fn normal(rng: &mut seed::Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normal_vec(rng: &mut seed::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Generates a cohort in which every domain value shifts the feature means
/// and rotates the direction along which the outcome shows up. Each sample is
/// an AR(1) trajectory pulled toward
/// `patient effect + domain offsets + y * signal * ramp(t) * direction`,
/// where the ramp grows linearly to 1 at the final step.
pub fn generate_cohort(profile: &ShiftProfile, seed_value: u64) -> Result<CohortDataset> {
    profile.validate()?;
    let d = profile.n_features();
    let (t_len, dt, ds) = (profile.timesteps, profile.n_timevarying, profile.n_statics);

    let mut dir_rng = seed::substream(seed_value, "cohort/direction");
    let shared = unit(normal_vec(&mut dir_rng, d));
    // Per-key, per-value offsets and direction perturbations.
    let mut offsets = Vec::with_capacity(profile.domains.len());
    let mut perturb = Vec::with_capacity(profile.domains.len());
    for spec in &profile.domains {
        let mut o_rng = seed::substream(seed_value, &format!("cohort/offsets/{}", spec.key));
        let mut p_rng = seed::substream(seed_value, &format!("cohort/directions/{}", spec.key));
        let rows: Vec<Vec<f64>> = (0..spec.values.len())
            .map(|v| {
                let mut row: Vec<f64> = normal_vec(&mut o_rng, d).into_iter().map(|z| z * spec.offset_scale).collect();
                if let Some(explicit) = &spec.offsets {
                    row.iter_mut().zip(&explicit[v]).for_each(|(a, b)| *a += b);
                }
                row
            })
            .collect();
        offsets.push(rows);
        perturb.push(
            (0..spec.values.len())
                .map(|_| unit(normal_vec(&mut p_rng, d)))
                .collect::<Vec<_>>(),
        );
    }

    let mut patient_rng = seed::substream(seed_value, "cohort/patients");
    let mut sample_rng = seed::substream(seed_value, "cohort/samples");
    let base_logit = logit(profile.prevalence);

    let mut cohort = CohortDataset {
        n_samples: 0,
        timesteps: t_len,
        n_timevarying: dt,
        n_statics: ds,
        timevarying: Vec::new(),
        statics: Vec::new(),
        labels: Vec::new(),
        patient_ids: Vec::new(),
        domains: profile
            .domains
            .iter()
            .map(|s| DomainColumn {
                key: s.key.clone(),
                vocabulary: s.values.clone(),
                codes: Vec::new(),
            })
            .collect(),
    };

    let mut mean = vec![0.0; d];
    let mut direction = vec![0.0; d];
    let mut state = vec![0.0; dt];
    for pid in 0..profile.n_patients {
        let codes: Vec<usize> = profile
            .domains
            .iter()
            .map(|s| patient_rng.gen_range(0..s.values.len()))
            .collect();
        let effect: Vec<f64> = normal_vec(&mut patient_rng, d)
            .into_iter()
            .map(|z| z * profile.patient_effect_scale)
            .collect();
        let n_adm = patient_rng.gen_range(profile.admissions.min..=profile.admissions.max);

        mean.copy_from_slice(&effect);
        direction.copy_from_slice(&shared);
        let mut z = base_logit;
        for (k, spec) in profile.domains.iter().enumerate() {
            let c = codes[k];
            mean.iter_mut().zip(&offsets[k][c]).for_each(|(m, o)| *m += o);
            let s = spec.direction_shift;
            direction
                .iter_mut()
                .zip(&perturb[k][c])
                .for_each(|(a, p)| *a = (1.0 - s) * *a + s * p);
            if let Some(p) = &spec.prevalence {
                z += logit(p[c]) - base_logit;
            }
        }
        let direction = unit(direction.clone());
        let prevalence = 1.0 / (1.0 + (-z).exp());

        for _ in 0..n_adm {
            let y = u8::from(sample_rng.gen::<f64>() < prevalence);
            let signal = f64::from(y) * profile.signal_strength;
            for j in 0..dt {
                state[j] = mean[j] + profile.noise_scale * normal(&mut sample_rng);
            }
            for step in 0..t_len {
                let ramp = if t_len > 1 { step as f64 / (t_len - 1) as f64 } else { 1.0 };
                for j in 0..dt {
                    let target = mean[j] + signal * ramp * direction[j];
                    if step > 0 {
                        state[j] = profile.ar_coefficient * state[j]
                            + (1.0 - profile.ar_coefficient) * target
                            + profile.noise_scale * normal(&mut sample_rng);
                    } else if profile.noise_scale == 0.0 {
                        state[j] = target;
                    }
                }
                cohort.timevarying.extend_from_slice(&state);
            }
            for j in dt..d {
                let v = mean[j] + signal * direction[j] + profile.noise_scale * normal(&mut sample_rng);
                cohort.statics.push(v);
            }
            cohort.labels.push(y);
            cohort.patient_ids.push(pid as i64);
            for (col, &c) in cohort.domains.iter_mut().zip(&codes) {
                col.codes.push(c as u32);
            }
            cohort.n_samples += 1;
        }
    }
    Ok(cohort)
}

/// How tasks are ordered.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOrder {
    /// Shuffle surviving domains with this seed.
    Random(u64),
    /// Exactly these domain values, in this order.
    Curriculum(Vec<String>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub domain_key: String,
    pub order: TaskOrder,
    pub tasks: Vec<TaskDataset>,
}

/// One task per domain value of `key`. Domains without both outcome classes
/// are dropped with a warning.
pub fn split_tasks(cohort: &CohortDataset, key: &str, order: &TaskOrder) -> Result<TaskStream> {
    cohort.validate()?;
    let col = cohort.domain(key)?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); col.vocabulary.len()];
    for (i, &c) in col.codes.iter().enumerate() {
        members[c as usize].push(i);
    }
    let usable = |v: usize| -> bool {
        let idx = &members[v];
        let pos = idx.iter().filter(|&&i| cohort.labels[i] == 1).count();
        if pos == 0 {
            warn!("domain {key}={} has no positive outcomes and is excluded", col.vocabulary[v]);
            false
        } else if pos == idx.len() {
            warn!("domain {key}={} has no negative outcomes and is excluded", col.vocabulary[v]);
            false
        } else {
            true
        }
    };
    let chosen: Vec<usize> = match order {
        TaskOrder::Random(order_seed) => {
            let mut kept: Vec<usize> = (0..col.vocabulary.len()).filter(|&v| usable(v)).collect();
            kept.shuffle(&mut seed::substream(*order_seed, "task-order"));
            kept
        }
        TaskOrder::Curriculum(names) => {
            let mut seen = HashSet::new();
            let mut out = Vec::new();
            for name in names {
                let v = col.vocabulary.iter().position(|x| x == name).ok_or_else(|| {
                    Error::Config(format!("curriculum names `{name}`, which is not a value of `{key}`"))
                })?;
                if !seen.insert(v) {
                    return Err(Error::Config(format!("curriculum lists `{name}` twice")));
                }
                if usable(v) {
                    out.push(v);
                }
            }
            out
        }
    };
    if chosen.len() < 2 {
        return Err(Error::Config(format!(
            "splitting by `{key}` leaves {} usable task(s); at least 2 are needed",
            chosen.len()
        )));
    }
    let tasks = chosen
        .iter()
        .map(|&v| cohort.task(&col.vocabulary[v], &members[v]))
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskStream {
        domain_key: key.to_string(),
        order: order.clone(),
        tasks,
    })
}

/// Sample indices of each split, ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<usize>,
    pub validation: Option<Vec<usize>>,
    pub test: Vec<usize>,
}

/// Allocates patients 70:15:15 (or 70:30 without validation): floor for
/// train, floor for validation, the rest to test. Every admission follows its
/// patient.
pub fn partition_task(task: &TaskDataset, with_validation: bool, seed_value: u64) -> Result<Partition> {
    let mut patients: Vec<i64> = Vec::new();
    let mut seen = HashSet::new();
    for &p in &task.patient_ids {
        if seen.insert(p) {
            patients.push(p);
        }
    }
    let parts = if with_validation { 3 } else { 2 };
    let n = patients.len();
    if n < parts {
        return Err(Error::Config(format!(
            "task `{}` has {n} patient(s), fewer than its {parts} partitions",
            task.name
        )));
    }
    patients.shuffle(&mut seed::rng(seed_value));
    let n_train = n * 70 / 100;
    let n_val = if with_validation { n * 15 / 100 } else { 0 };
    let mut bucket: HashMap<i64, u8> = HashMap::with_capacity(n);
    for (rank, &p) in patients.iter().enumerate() {
        let b = if rank < n_train {
            0
        } else if rank < n_train + n_val {
            1
        } else {
            2
        };
        bucket.insert(p, b);
    }
    let mut split: [Vec<usize>; 3] = Default::default();
    for (i, p) in task.patient_ids.iter().enumerate() {
        split[bucket[p] as usize].push(i);
    }
    let [train, validation, test] = split;
    for (name, idx) in [("train", &train), ("validation", &validation), ("test", &test)] {
        if (name != "validation" || with_validation) && !idx.iter().any(|&i| task.labels[i] == 1) {
            warn!("task `{}`: {name} partition has no positive outcomes", task.name);
        }
    }
    Ok(Partition {
        train,
        validation: with_validation.then_some(validation),
        test,
    })
}

pub const DATASET_FORMAT: &str = "clstream-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    file: String,
    dtype: String,
    shape: Vec<usize>,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainEntry {
    key: String,
    vocabulary: Vec<String>,
    blob: BlobEntry,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    format: String,
    version: u32,
    n_samples: usize,
    timesteps: usize,
    n_timevarying: usize,
    n_statics: usize,
    timevarying: BlobEntry,
    statics: BlobEntry,
    labels: BlobEntry,
    patient_ids: BlobEntry,
    domains: Vec<DomainEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn f64_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn i64_bytes(v: impl Iterator<Item = i64>) -> Vec<u8> {
    v.flat_map(|x| x.to_le_bytes()).collect()
}

fn write_blob(dir: &Path, file: &str, dtype: &str, shape: Vec<usize>, bytes: Vec<u8>) -> Result<BlobEntry> {
    let path = dir.join(file);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok(BlobEntry {
        file: file.into(),
        dtype: dtype.into(),
        shape,
        byte_len: bytes.len() as u64,
    })
}

/// Writes `manifest.json` plus one little-endian blob per array into `dir`.
pub fn write_dataset(cohort: &CohortDataset, dir: &Path) -> Result<()> {
    cohort.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = cohort.n_samples;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        n_samples: n,
        timesteps: cohort.timesteps,
        n_timevarying: cohort.n_timevarying,
        n_statics: cohort.n_statics,
        timevarying: write_blob(
            dir,
            "timevarying.f64",
            "f64",
            vec![n, cohort.timesteps, cohort.n_timevarying],
            f64_bytes(&cohort.timevarying),
        )?,
        statics: write_blob(dir, "statics.f64", "f64", vec![n, cohort.n_statics], f64_bytes(&cohort.statics))?,
        labels: write_blob(
            dir,
            "labels.i64",
            "i64",
            vec![n],
            i64_bytes(cohort.labels.iter().map(|&y| i64::from(y))),
        )?,
        patient_ids: write_blob(dir, "patient_ids.i64", "i64", vec![n], i64_bytes(cohort.patient_ids.iter().copied()))?,
        domains: cohort
            .domains
            .iter()
            .map(|col| {
                Ok(DomainEntry {
                    key: col.key.clone(),
                    vocabulary: col.vocabulary.clone(),
                    blob: write_blob(
                        dir,
                        &format!("domain_{}.i64", col.key),
                        "i64",
                        vec![n],
                        i64_bytes(col.codes.iter().map(|&c| i64::from(c))),
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

fn read_blob(dir: &Path, entry: &BlobEntry, dtype: &str) -> Result<Vec<[u8; 8]>> {
    let path = dir.join(&entry.file);
    if entry.dtype != dtype {
        return Err(Error::format(&path, format!("expected dtype {dtype}, manifest says {}", entry.dtype)));
    }
    let expected = entry.shape.iter().product::<usize>() as u64 * 8;
    if entry.byte_len != expected {
        return Err(Error::format(
            &path,
            format!("manifest byte_len {} disagrees with shape {:?} ({expected} bytes)", entry.byte_len, entry.shape),
        ));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() as u64 != expected {
        return Err(Error::format(
            &path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    Ok(bytes.chunks_exact(8).map(|c| c.try_into().expect("8-byte chunk")).collect())
}

fn check_shape(dir: &Path, entry: &BlobEntry, shape: &[usize]) -> Result<()> {
    if entry.shape != shape {
        return Err(Error::format(
            dir.join(&entry.file),
            format!("shape {:?} does not match manifest dimensions {shape:?}", entry.shape),
        ));
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<CohortDataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest =
        serde_json::from_slice(&text).map_err(|e| Error::format(&path, format!("unreadable manifest: {e}")))?;
    if m.format != DATASET_FORMAT || m.version != DATASET_VERSION {
        return Err(Error::format(&path, format!("unsupported format {} v{}", m.format, m.version)));
    }
    let n = m.n_samples;
    check_shape(dir, &m.timevarying, &[n, m.timesteps, m.n_timevarying])?;
    check_shape(dir, &m.statics, &[n, m.n_statics])?;
    check_shape(dir, &m.labels, &[n])?;
    check_shape(dir, &m.patient_ids, &[n])?;
    let as_f64 = |e: &BlobEntry| -> Result<Vec<f64>> {
        Ok(read_blob(dir, e, "f64")?.into_iter().map(f64::from_le_bytes).collect())
    };
    let as_i64 = |e: &BlobEntry| -> Result<Vec<i64>> {
        Ok(read_blob(dir, e, "i64")?.into_iter().map(i64::from_le_bytes).collect())
    };
    let labels = as_i64(&m.labels)?
        .into_iter()
        .map(|y| match y {
            0 | 1 => Ok(y as u8),
            other => Err(Error::format(dir.join(&m.labels.file), format!("label {other} is not binary"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut domains = Vec::with_capacity(m.domains.len());
    for entry in &m.domains {
        check_shape(dir, &entry.blob, &[n])?;
        let codes = as_i64(&entry.blob)?
            .into_iter()
            .map(|c| {
                u32::try_from(c)
                    .ok()
                    .filter(|&c| (c as usize) < entry.vocabulary.len())
                    .ok_or_else(|| {
                        Error::format(
                            dir.join(&entry.blob.file),
                            format!("code {c} outside vocabulary of {}", entry.vocabulary.len()),
                        )
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        domains.push(DomainColumn {
            key: entry.key.clone(),
            vocabulary: entry.vocabulary.clone(),
            codes,
        });
    }
    let cohort = CohortDataset {
        n_samples: n,
        timesteps: m.timesteps,
        n_timevarying: m.n_timevarying,
        n_statics: m.n_statics,
        timevarying: as_f64(&m.timevarying)?,
        statics: as_f64(&m.statics)?,
        labels,
        patient_ids: as_i64(&m.patient_ids)?,
        domains,
    };
    cohort.validate()?;
    Ok(cohort)
}

/// Per-domain sample counts and positives, keyed by domain value.
pub fn domain_summary(cohort: &CohortDataset, key: &str) -> Result<BTreeMap<String, (usize, usize)>> {
    let col = cohort.domain(key)?;
    let mut out: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (i, &c) in col.codes.iter().enumerate() {
        let e = out.entry(col.vocabulary[c as usize].clone()).or_default();
        e.0 += 1;
        e.1 += usize::from(cohort.labels[i]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(n_patients: usize) -> ShiftProfile {
        let mut p = ShiftProfile::strong_shift();
        p.n_patients = n_patients;
        p.timesteps = 6;
        p
    }

    /// Cohort with explicit per-domain label counts; features are the sample index.
    fn counted(domains: &[(&str, usize, usize)]) -> CohortDataset {
        let mut labels = Vec::new();
        let mut codes = Vec::new();
        for (c, &(_, pos, neg)) in domains.iter().enumerate() {
            labels.extend(std::iter::repeat(1u8).take(pos));
            labels.extend(std::iter::repeat(0u8).take(neg));
            codes.extend(std::iter::repeat(c as u32).take(pos + neg));
        }
        let n = labels.len();
        CohortDataset {
            n_samples: n,
            timesteps: 1,
            n_timevarying: 1,
            n_statics: 0,
            timevarying: (0..n).map(|i| i as f64).collect(),
            statics: Vec::new(),
            labels,
            patient_ids: (0..n as i64).collect(),
            domains: vec![DomainColumn {
                key: "site".into(),
                vocabulary: domains.iter().map(|d| d.0.to_string()).collect(),
                codes,
            }],
        }
    }

    #[test]
    fn same_seed_gives_identical_cohort() {
        let p = small(200);
        assert_eq!(generate_cohort(&p, 3).unwrap(), generate_cohort(&p, 3).unwrap());
        assert_ne!(generate_cohort(&p, 3).unwrap().timevarying, generate_cohort(&p, 4).unwrap().timevarying);
    }

    #[test]
    fn prevalence_is_close_to_target() {
        let mut p = ShiftProfile::default_profile(5);
        p.n_patients = 5000;
        p.admissions = AdmissionsRange { min: 1, max: 1 };
        p.timesteps = 2;
        let c = generate_cohort(&p, 11).unwrap();
        let frac = c.labels.iter().map(|&y| f64::from(y)).sum::<f64>() / c.n_samples as f64;
        assert!((frac - 0.10).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn no_shift_profile_has_equal_domain_means() {
        let mut p = small(400);
        p.noise_scale = 0.0;
        p.patient_effect_scale = 0.0;
        p.domains = vec![DomainSpec::named("domain", &["a", "b"])];
        let c = generate_cohort(&p, 5).unwrap();
        let width = c.timesteps * c.n_timevarying;
        // class-conditional feature means per domain
        let mut sums = [[vec![0.0; width], vec![0.0; width]], [vec![0.0; width], vec![0.0; width]]];
        let mut counts = [[0usize; 2]; 2];
        for i in 0..c.n_samples {
            let (dom, y) = (c.domains[0].codes[i] as usize, c.labels[i] as usize);
            counts[dom][y] += 1;
            for (s, v) in sums[dom][y].iter_mut().zip(&c.timevarying[i * width..(i + 1) * width]) {
                *s += v;
            }
        }
        for y in 0..2 {
            assert!(counts[0][y] > 0 && counts[1][y] > 0);
            for j in 0..width {
                let a = sums[0][y][j] / counts[0][y] as f64;
                let b = sums[1][y][j] / counts[1][y] as f64;
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_profiles_are_rejected() {
        let mut p = small(10);
        p.n_patients = 0;
        assert!(matches!(generate_cohort(&p, 0), Err(Error::Config(_))));
        let mut p = small(10);
        p.prevalence = 1.0;
        assert!(matches!(generate_cohort(&p, 0), Err(Error::Config(_))));
        assert!(ShiftProfile::preset("nope").is_err());
        for name in PRESETS {
            ShiftProfile::preset(name).unwrap().validate().unwrap();
        }
    }

    /// Midpoint mean-difference probe fit on one domain's time-averaged features,
    /// scored by balanced error on another.
    fn cross_domain_error(c: &CohortDataset, fit: u32, eval: u32) -> f64 {
        let dt = c.n_timevarying;
        let summary = |i: usize| -> Vec<f64> {
            let mut m = vec![0.0; dt];
            for t in 0..c.timesteps {
                for j in 0..dt {
                    m[j] += c.timevarying[(i * c.timesteps + t) * dt + j] / c.timesteps as f64;
                }
            }
            m
        };
        let class_mean = |dom: u32, y: u8| -> Vec<f64> {
            let rows: Vec<Vec<f64>> = (0..c.n_samples)
                .filter(|&i| c.domains[0].codes[i] == dom && c.labels[i] == y)
                .map(summary)
                .collect();
            (0..dt).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect()
        };
        let (m0, m1) = (class_mean(fit, 0), class_mean(fit, 1));
        let w: Vec<f64> = m1.iter().zip(&m0).map(|(a, b)| a - b).collect();
        let mid: Vec<f64> = m1.iter().zip(&m0).map(|(a, b)| (a + b) / 2.0).collect();
        let mut wrong = [0usize; 2];
        let mut total = [0usize; 2];
        for i in (0..c.n_samples).filter(|&i| c.domains[0].codes[i] == eval) {
            let s: f64 = summary(i).iter().zip(&mid).zip(&w).map(|((x, m), w)| (x - m) * w).sum();
            let y = c.labels[i] as usize;
            total[y] += 1;
            wrong[y] += usize::from((s >= 0.0) != (y == 1));
        }
        0.5 * (wrong[0] as f64 / total[0] as f64 + wrong[1] as f64 / total[1] as f64)
    }

    #[test]
    fn larger_offsets_never_reduce_cross_domain_error() {
        let mut previous = 0.0;
        for scale in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let mut err = 0.0;
            for s in 0..8 {
                let mut p = small(600);
                p.domains = vec![DomainSpec::named("domain", &["a", "b"]).with_shift(scale, 0.0)];
                err += cross_domain_error(&generate_cohort(&p, 100 + s).unwrap(), 0, 1) / 8.0;
            }
            assert!(err + 0.01 >= previous, "scale {scale}: {err} < {previous}");
            previous = err;
        }
        assert!(previous > 0.3, "far domain should be near chance, got {previous}");
    }

    #[test]
    fn zero_positive_domain_is_dropped() {
        let c = counted(&[("A", 5, 95), ("B", 0, 100), ("C", 3, 97)]);
        let s = split_tasks(&c, "site", &TaskOrder::Random(0)).unwrap();
        let mut names: Vec<&str> = s.tasks.iter().map(|t| t.name.as_str()).collect();
        names.sort();
        assert_eq!(names, ["A", "C"]);
        assert_eq!(s.tasks.iter().map(|t| t.len()).sum::<usize>(), 200);
    }

    #[test]
    fn single_domain_is_an_error() {
        let c = counted(&[("A", 5, 95)]);
        assert!(matches!(split_tasks(&c, "site", &TaskOrder::Random(0)), Err(Error::Config(_))));
        assert!(matches!(split_tasks(&c, "nope", &TaskOrder::Random(0)), Err(Error::Config(_))));
    }

    #[test]
    fn curriculum_is_followed_exactly() {
        let c = counted(&[("A", 5, 95), ("B", 0, 100), ("C", 3, 97)]);
        let order = TaskOrder::Curriculum(vec!["C".into(), "A".into()]);
        let s = split_tasks(&c, "site", &order).unwrap();
        assert_eq!(s.tasks.iter().map(|t| t.name.as_str()).collect::<Vec<_>>(), ["C", "A"]);
        let bad = TaskOrder::Curriculum(vec!["C".into(), "Z".into()]);
        assert!(split_tasks(&c, "site", &bad).is_err());
    }

    fn task_with_patients(patients: &[(i64, usize)]) -> TaskDataset {
        let mut ids = Vec::new();
        for &(p, n) in patients {
            ids.extend(std::iter::repeat(p).take(n));
        }
        let n = ids.len();
        let labels = (0..n).map(|i| (i % 2) as u8).collect();
        TaskDataset::new("t", 1, 1, vec![0.0; n], labels, ids, (0..n).collect()).unwrap()
    }

    fn patients_of(task: &TaskDataset, idx: &[usize]) -> HashSet<i64> {
        idx.iter().map(|&i| task.patient_ids[i]).collect()
    }

    #[test]
    fn hundred_patients_split_70_15_15() {
        let task = task_with_patients(&(0..100).map(|p| (p, 1)).collect::<Vec<_>>());
        let part = partition_task(&task, true, 9).unwrap();
        assert_eq!(part.train.len(), 70);
        assert_eq!(part.validation.as_ref().unwrap().len(), 15);
        assert_eq!(part.test.len(), 15);
    }

    #[test]
    fn ten_patients_split_7_3_deterministically() {
        let task = task_with_patients(&(0..10).map(|p| (p, 1)).collect::<Vec<_>>());
        let a = partition_task(&task, false, 4).unwrap();
        assert_eq!((a.train.len(), a.test.len()), (7, 3));
        assert!(a.validation.is_none());
        assert_eq!(a, partition_task(&task, false, 4).unwrap());
    }

    #[test]
    fn admissions_follow_their_patient() {
        let task = task_with_patients(&[(0, 1), (1, 3), (2, 1), (3, 1), (4, 2)]);
        for s in 0..20 {
            let part = partition_task(&task, true, s).unwrap();
            let groups = [&part.train, part.validation.as_ref().unwrap(), &part.test];
            let holder: Vec<usize> = groups
                .iter()
                .enumerate()
                .filter(|(_, g)| g.iter().any(|&i| task.patient_ids[i] == 1))
                .map(|(k, _)| k)
                .collect();
            assert_eq!(holder.len(), 1);
            let k = holder[0];
            assert_eq!(groups[k].iter().filter(|&&i| task.patient_ids[i] == 1).count(), 3);
        }
        assert!(partition_task(&task_with_patients(&[(0, 2), (1, 1)]), true, 0).is_err());
    }

    #[test]
    fn dataset_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ShiftProfile::default_profile(3);
        p.n_patients = 60;
        p.timesteps = 4;
        let c = generate_cohort(&p, 1).unwrap();
        write_dataset(&c, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), c);

        let blob = dir.path().join("statics.f64");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        let expected = format!("expected {} bytes, found {}", bytes.len(), bytes.len() - 3);
        assert!(err.contains(&expected), "{err}");
    }

    #[test]
    fn hand_written_dataset_loads() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        // two samples, T=2, Dt=1, Ds=1
        let write = |name: &str, bytes: Vec<u8>| fs::write(d.join(name), bytes).unwrap();
        write("tv.bin", [1.5f64, -2.0, 0.25, 8.0].iter().flat_map(|x| x.to_le_bytes()).collect());
        write("st.bin", [3.0f64, 4.0].iter().flat_map(|x| x.to_le_bytes()).collect());
        write("y.bin", [0i64, 1].iter().flat_map(|x| x.to_le_bytes()).collect());
        write("pid.bin", [70i64, 71].iter().flat_map(|x| x.to_le_bytes()).collect());
        write("ward.bin", [1i64, 0].iter().flat_map(|x| x.to_le_bytes()).collect());
        let manifest = serde_json::json!({
            "format": "clstream-dataset", "version": 1,
            "n_samples": 2, "timesteps": 2, "n_timevarying": 1, "n_statics": 1,
            "timevarying": {"file": "tv.bin", "dtype": "f64", "shape": [2, 2, 1], "byte_len": 32},
            "statics": {"file": "st.bin", "dtype": "f64", "shape": [2, 1], "byte_len": 16},
            "labels": {"file": "y.bin", "dtype": "i64", "shape": [2], "byte_len": 16},
            "patient_ids": {"file": "pid.bin", "dtype": "i64", "shape": [2], "byte_len": 16},
            "domains": [{"key": "ward", "vocabulary": ["micu", "ccu"],
                         "blob": {"file": "ward.bin", "dtype": "i64", "shape": [2], "byte_len": 16}}]
        });
        fs::write(d.join(MANIFEST_FILE), manifest.to_string()).unwrap();
        let c = load_dataset(d).unwrap();
        assert_eq!(c.timevarying, vec![1.5, -2.0, 0.25, 8.0]);
        assert_eq!(c.statics, vec![3.0, 4.0]);
        assert_eq!(c.labels, vec![0, 1]);
        assert_eq!(c.patient_ids, vec![70, 71]);
        assert_eq!(c.domains[0].codes, vec![1, 0]);
        let task = c.task("all", &[0, 1]).unwrap();
        assert_eq!(task.x, vec![1.5, 3.0, -2.0, 3.0, 0.25, 4.0, 8.0, 4.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn partitions_never_share_patients(
            sizes in prop::collection::vec(1usize..4, 3..60),
            with_validation in any::<bool>(),
            s in any::<u64>(),
        ) {
            let patients: Vec<(i64, usize)> = sizes.iter().enumerate().map(|(p, &n)| (p as i64 * 7, n)).collect();
            let task = task_with_patients(&patients);
            let part = partition_task(&task, with_validation, s).unwrap();
            let tr = patients_of(&task, &part.train);
            let te = patients_of(&task, &part.test);
            let va = patients_of(&task, part.validation.as_deref().unwrap_or(&[]));
            prop_assert!(tr.is_disjoint(&te) && tr.is_disjoint(&va) && va.is_disjoint(&te));
            let total = part.train.len() + part.test.len() + part.validation.map_or(0, |v| v.len());
            prop_assert_eq!(total, task.len());
        }

        #[test]
        fn split_is_a_partition_of_retained_samples(
            n_patients in 30usize..120,
            s in any::<u64>(),
            order_seed in any::<u64>(),
        ) {
            let mut p = small(n_patients);
            p.timesteps = 2;
            p.domains = vec![DomainSpec::numbered("site", "s", 4).with_shift(1.0, 0.5)];
            let c = generate_cohort(&p, s).unwrap();
            let summary = domain_summary(&c, "site").unwrap();
            match split_tasks(&c, "site", &TaskOrder::Random(order_seed)) {
                Ok(stream) => {
                    let mut all: Vec<usize> = stream.tasks.iter().flat_map(|t| t.source_indices.clone()).collect();
                    let retained: usize = summary.values().filter(|(n, pos)| *pos > 0 && pos < n).map(|(n, _)| n).sum();
                    prop_assert_eq!(all.len(), retained);
                    all.sort_unstable();
                    all.dedup();
                    prop_assert_eq!(all.len(), retained);
                    for t in &stream.tasks {
                        prop_assert!(t.positives() > 0 && t.positives() < t.len());
                    }
                }
                Err(e) => prop_assert!(matches!(e, Error::Config(_))),
            }
        }
    }
}
