//! Training loop, checkpoints, evaluation and ablation runs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::config::RunConfig;
use crate::container::Container;
use crate::inference::{decode_instances, detections, InferenceConfig};
use crate::matching::{match_predictions, training_loss, GroundTruthSet, LossBreakdown};
use crate::metrics::{BoxApAccumulator, InstanceSegResult, MetricAccumulator, MetricRow, RoiSpec};
use crate::model::{forward, PredictionBundle};
use crate::nn::{clip_grad_norm, AdamW, AdamWConfig, Binder, ParamStore};
use crate::tensor::Tensor;
use crate::world::{config_hash, Dataset, Sample};
use crate::{Error, Result};

/// Warm-up followed by cosine annealing to zero over `total` steps.
pub fn lr_at(base: f64, warmup: usize, step: u64, total: u64) -> f64 {
    let (s, w) = (step as f64, warmup as f64);
    if s < w {
        return base * (s + 1.0) / w;
    }
    let span = (total as f64 - w).max(1.0);
    let p = ((s - w) / span).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Shuffled sample order of one epoch.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut rng);
    v
}

/// Summary of one finished epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub eval: Vec<MetricRow>,
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub store: ParamStore,
    pub opt: AdamW,
    pub best_vpq: Option<f64>,
    pub history: Vec<EpochRow>,
    /// Running sums of the current epoch.
    pub epoch_loss: LossBreakdown,
    pub epoch_grad_norm: f64,
    pub epoch_steps: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// World-config hash of the data the model was trained on.
    pub data_hash: String,
    pub state: TrainState,
}

const CKPT_KIND: &str = "checkpoint";

fn parse_attr<T: std::str::FromStr>(c: &Container, k: &str) -> Result<T> {
    c.require_attr(k)?
        .parse()
        .map_err(|_| Error::Data(format!("checkpoint attribute {k} unparsable")))
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let s = &self.state;
        let mut c = Container::new(CKPT_KIND);
        c.set_attr("config", self.config.to_toml());
        c.set_attr("config_hash", self.config.hash());
        c.set_attr("data_hash", self.data_hash.clone());
        c.set_attr("step", s.step.to_string());
        c.set_attr("store_seed", s.store.seed().to_string());
        c.set_attr("opt_step", s.opt.step.to_string());
        c.set_attr("opt_config", serde_json::to_string(&s.opt.cfg).expect("serialises"));
        c.set_attr("best_vpq", serde_json::to_string(&s.best_vpq).expect("serialises"));
        c.set_attr("history", serde_json::to_string(&s.history).expect("serialises"));
        c.set_attr("epoch_loss", serde_json::to_string(&s.epoch_loss).expect("serialises"));
        c.set_attr("epoch_grad_norm", format!("{:?}", s.epoch_grad_norm));
        c.set_attr("epoch_steps", s.epoch_steps.to_string());
        for (name, t) in s.store.iter() {
            c.put_f64(&format!("p/{name}"), t.shape(), t.data())?;
        }
        for (name, t) in &s.opt.first {
            c.put_f64(&format!("m/{name}"), t.shape(), t.data())?;
        }
        for (name, t) in &s.opt.second {
            c.put_f64(&format!("v/{name}"), t.shape(), t.data())?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind() != CKPT_KIND {
            return Err(Error::Data(format!("expected a checkpoint, got a {} container", c.kind())));
        }
        let config = RunConfig::from_toml(c.require_attr("config")?)?;
        if config.hash() != c.require_attr("config_hash")? {
            return Err(Error::Data("checkpoint config does not match its recorded hash".into()));
        }
        let json = |k: &str| -> Result<serde_json::Value> {
            serde_json::from_str(c.require_attr(k)?).map_err(|e| Error::Data(format!("checkpoint attribute {k}: {e}")))
        };
        let mut store = ParamStore::new(parse_attr(c, "store_seed")?);
        let mut opt = AdamW::new(
            serde_json::from_value::<AdamWConfig>(json("opt_config")?).map_err(|e| Error::Data(e.to_string()))?,
        );
        opt.step = parse_attr(c, "opt_step")?;
        let names: Vec<String> = c.names().map(str::to_string).collect();
        for n in &names {
            let (shape, data) = c.get_f64(n)?;
            let t = Tensor::new(&shape, data);
            if let Some(p) = n.strip_prefix("p/") {
                store.insert(p, t);
            } else if let Some(p) = n.strip_prefix("m/") {
                opt.first.insert(p.to_string(), t);
            } else if let Some(p) = n.strip_prefix("v/") {
                opt.second.insert(p.to_string(), t);
            }
        }
        let data_err = |e: serde_json::Error| Error::Data(format!("checkpoint: {e}"));
        Ok(Self {
            config,
            data_hash: c.require_attr("data_hash")?.to_string(),
            state: TrainState {
                step: parse_attr(c, "step")?,
                store,
                opt,
                best_vpq: serde_json::from_value(json("best_vpq")?).map_err(data_err)?,
                history: serde_json::from_value(json("history")?).map_err(data_err)?,
                epoch_loss: serde_json::from_value(json("epoch_loss")?).map_err(data_err)?,
                epoch_grad_norm: parse_attr(c, "epoch_grad_norm")?,
                epoch_steps: parse_attr(c, "epoch_steps")?,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Per-step statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Global gradient norm before and after clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

fn add_breakdown(a: &mut LossBreakdown, b: &LossBreakdown, s: f64) {
    a.cls += s * b.cls;
    a.box_l1 += s * b.box_l1;
    a.dice += s * b.dice;
    a.mask_l1 += s * b.mask_l1;
    a.mask_bce += s * b.mask_bce;
    a.flow += s * b.flow;
    a.aux += s * b.aux;
    a.total += s * b.total;
}

fn check_data(cfg: &RunConfig, ds: &Dataset, what: &str) -> Result<()> {
    let want = config_hash(&cfg.data.world);
    if ds.manifest.config_hash != want {
        return Err(Error::Config(format!(
            "{what} dataset was generated with world config {} but the run expects {}",
            &ds.manifest.config_hash[..12.min(ds.manifest.config_hash.len())],
            &want[..12]
        )));
    }
    if ds.is_empty() {
        return Err(Error::Data(format!("{what} dataset is empty")));
    }
    Ok(())
}

/// Samples and ground truth prepared once per dataset.
struct Prepared<'d> {
    sample: &'d Sample,
    input: Tensor,
    gt: GroundTruthSet,
}

fn prepare(ds: &Dataset) -> Vec<Prepared<'_>> {
    ds.samples
        .iter()
        .map(|s| Prepared {
            sample: s,
            input: s.input_tensor(),
            gt: GroundTruthSet::from_sample(s, ds.manifest.dt),
        })
        .collect()
}

pub struct Trainer<'d> {
    pub cfg: RunConfig,
    pub state: TrainState,
    train: Vec<Prepared<'d>>,
    eval: &'d Dataset,
    data_hash: String,
}

impl<'d> Trainer<'d> {
    /// Fresh parameters, initialised by one forward pass.
    pub fn new(cfg: RunConfig, train: &'d Dataset, eval: &'d Dataset) -> Result<Self> {
        cfg.validate()?;
        check_data(&cfg, train, "train")?;
        check_data(&cfg, eval, "eval")?;
        let mut store = ParamStore::new(cfg.train.seed);
        {
            let tape = Tape::new();
            let b = Binder::new(&tape, &mut store);
            forward(&b, &cfg.model, &train.samples[0].input_tensor())?;
        }
        let opt = AdamW::new(AdamWConfig {
            weight_decay: cfg.train.weight_decay,
            ..Default::default()
        });
        Ok(Self {
            data_hash: train.manifest.config_hash.clone(),
            state: TrainState {
                step: 0,
                store,
                opt,
                best_vpq: None,
                history: Vec::new(),
                epoch_loss: LossBreakdown::default(),
                epoch_grad_norm: 0.0,
                epoch_steps: 0,
            },
            cfg,
            train: prepare(train),
            eval,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint, train: &'d Dataset, eval: &'d Dataset) -> Result<Self> {
        check_data(&ck.config, train, "train")?;
        check_data(&ck.config, eval, "eval")?;
        if ck.data_hash != train.manifest.config_hash {
            return Err(Error::Config("checkpoint was trained on different data".into()));
        }
        Ok(Self {
            cfg: ck.config,
            state: ck.state,
            train: prepare(train),
            eval,
            data_hash: ck.data_hash,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            data_hash: self.data_hash.clone(),
            state: self.state.clone(),
        }
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.cfg.train.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.cfg.train.epochs as u64
    }

    pub fn done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    /// Sample indices of the batch at `step`.
    pub fn batch_at(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let order = epoch_order(self.cfg.train.seed, step / spe, self.train.len());
        let b = self.cfg.train.batch_size;
        let pos = (step % spe) as usize * b;
        order[pos..(pos + b).min(order.len())].to_vec()
    }

    /// One clipped optimiser step on the next batch.
    pub fn step(&mut self) -> Result<StepStats> {
        let step = self.state.step;
        let batch = self.batch_at(step);
        let lr = lr_at(self.cfg.train.lr, self.cfg.train.warmup_steps, step, self.total_steps());
        let inv = 1.0 / batch.len() as f64;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss = LossBreakdown::default();
        for &i in &batch {
            let p = &self.train[i];
            let tape = Tape::new();
            let b = Binder::new(&tape, &mut self.state.store);
            let fw = forward(&b, &self.cfg.model, &p.input)?;
            let bundle = fw.bundle();
            let nan = |what: &str| {
                Error::Numeric(format!(
                    "non-finite {what} at step {step}, batch samples {batch:?} (sample {i}, seed {})",
                    p.sample.seed
                ))
            };
            if !bundle.all_finite() {
                return Err(nan("prediction"));
            }
            let matched = match_predictions(&bundle, &p.gt, &self.cfg.loss)?;
            let (l, br) = training_loss(&fw, &p.gt, &matched, &self.cfg.loss);
            if !br.total.is_finite() {
                return Err(nan(&format!("loss {br:?}")));
            }
            let g = tape.backward(l);
            for (k, mut v) in b.param_grads(&g) {
                v.scale_in_place(inv);
                match grads.get_mut(&k) {
                    Some(acc) => acc.add_assign(&v),
                    None => {
                        grads.insert(k, v);
                    }
                }
            }
            add_breakdown(&mut loss, &br, inv);
        }
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.train.clip);
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient norm at step {step}, batch samples {batch:?}"
            )));
        }
        let clipped_norm = crate::nn::grad_norm(&grads);
        self.state.opt.update(&mut self.state.store, &grads, lr);
        self.state.step += 1;
        add_breakdown(&mut self.state.epoch_loss, &loss, 1.0);
        self.state.epoch_grad_norm += grad_norm;
        self.state.epoch_steps += 1;
        Ok(StepStats {
            step,
            lr,
            loss,
            grad_norm,
            clipped_norm,
        })
    }

    fn eval_subset(&self) -> Dataset {
        let n = match self.cfg.train.eval_samples {
            0 => self.eval.len(),
            k => k.min(self.eval.len()),
        };
        Dataset {
            manifest: self.eval.manifest.clone(),
            samples: self.eval.samples[..n].to_vec(),
        }
    }

    fn close_epoch(&mut self, run_dir: Option<&Path>) -> Result<()> {
        let spe = self.steps_per_epoch();
        let epoch = self.state.step / spe;
        let n = self.state.epoch_steps.max(1) as f64;
        let mut mean = LossBreakdown::default();
        add_breakdown(&mut mean, &self.state.epoch_loss, 1.0 / n);
        let every = self.cfg.train.eval_every as u64;
        let want_eval = self.done() || (every > 0 && epoch % every == 0);
        let mut eval_rows = Vec::new();
        let mut improved = false;
        if want_eval {
            let rep = evaluate(&self.state.store, &self.cfg, &self.eval_subset(), "train-eval")?;
            let v = rep.primary().vpq;
            if self.state.best_vpq.is_none_or(|b| v > b) {
                self.state.best_vpq = Some(v);
                improved = true;
            }
            eval_rows = rep.rows;
        }
        let row = EpochRow {
            epoch,
            step: self.state.step,
            lr: lr_at(self.cfg.train.lr, self.cfg.train.warmup_steps, self.state.step.saturating_sub(1), self.total_steps()),
            loss: mean,
            grad_norm: self.state.epoch_grad_norm / n,
            eval: eval_rows,
        };
        info!(
            "epoch {} step {} loss {:.4} (cls {:.4} dice {:.4} flow {:.4}) grad {:.3}{}",
            row.epoch,
            row.step,
            row.loss.total,
            row.loss.cls,
            row.loss.dice,
            row.loss.flow,
            row.grad_norm,
            row.eval.iter().map(|r| format!(" | {r}")).collect::<String>()
        );
        self.state.history.push(row);
        self.state.epoch_loss = LossBreakdown::default();
        self.state.epoch_grad_norm = 0.0;
        self.state.epoch_steps = 0;
        if let Some(dir) = run_dir {
            let layout = RunLayout::new(dir);
            if improved {
                self.checkpoint().save(&layout.best_checkpoint())?;
            }
        }
        Ok(())
    }

    /// Trains until done, or until `stop_at` steps have been taken. With a
    /// run directory, the latest state is saved after every epoch and when
    /// stopping.
    pub fn run(&mut self, run_dir: Option<&Path>, stop_at: Option<u64>) -> Result<()> {
        let layout = run_dir.map(RunLayout::new);
        if let Some(l) = &layout {
            l.create()?;
            write_file(&l.config(), self.cfg.to_toml().as_bytes())?;
        }
        let spe = self.steps_per_epoch();
        while !self.done() && stop_at.is_none_or(|s| self.state.step < s) {
            self.step()?;
            if self.state.step % spe == 0 {
                self.close_epoch(run_dir)?;
                if let Some(l) = &layout {
                    self.save_last(l)?;
                }
            }
        }
        if let Some(l) = &layout {
            self.save_last(l)?;
        }
        Ok(())
    }

    fn save_last(&self, l: &RunLayout) -> Result<()> {
        self.checkpoint().save(&l.last_checkpoint())?;
        let mut text = String::new();
        for r in &self.state.history {
            text.push_str(&serde_json::to_string(r).expect("serialises"));
            text.push('\n');
        }
        write_file(&l.history(), text.as_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Files of one run directory.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.root.clone(), self.root.join("checkpoints"), self.plots()] {
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("last.ckpt")
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("best.ckpt")
    }

    pub fn history(&self) -> PathBuf {
        self.root.join("history.jsonl")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
}

/// Metric rows of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub samples: usize,
    /// One row per ROI at the configured threshold.
    pub rows: Vec<MetricRow>,
    /// `(threshold, rows)` for every swept threshold.
    pub sweep: Vec<(f64, Vec<MetricRow>)>,
    /// Toy box AP at box IoU 0.5 on the current frame, and mean velocity
    /// error (m/s) of its true positives.
    pub box_ap: Option<f64>,
    pub velocity_error: Option<f64>,
}

impl EvalReport {
    /// Row of the largest ROI.
    pub fn primary(&self) -> &MetricRow {
        self.rows.last().expect("at least one roi")
    }

    pub fn row(&self, roi: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.roi == roi)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "model={} samples={} vpq=mean-per-frame", self.model, self.samples)?;
        for r in &self.rows {
            writeln!(f, "{r}")?;
        }
        for (d, rows) in &self.sweep {
            for r in rows {
                writeln!(f, "sweep threshold={d} roi={} iou={:.4} vpq={:.4}", r.roi, r.iou, r.vpq)?;
            }
        }
        match (self.box_ap, self.velocity_error) {
            (Some(ap), v) => writeln!(
                f,
                "toy_box_ap@0.5={ap:.4} toy_velocity_error_mps={}",
                v.map_or("n/a".to_string(), |v| format!("{v:.4}"))
            ),
            (None, _) => writeln!(f, "toy_box_ap@0.5=n/a"),
        }
    }
}

fn sorted_rois(cfg: &RunConfig) -> Vec<RoiSpec> {
    let mut rois = cfg.eval.rois.clone();
    rois.sort_by(|a, b| a.half_extent.total_cmp(&b.half_extent));
    rois
}

/// Accumulates metrics over decoded predictions.
struct EvalSink {
    thresholds: Vec<f64>,
    /// `acc[k][r]`: threshold `k`, ROI `r`.
    acc: Vec<Vec<MetricAccumulator>>,
    boxes: BoxApAccumulator,
    any_boxes: bool,
}

impl EvalSink {
    fn new(cfg: &RunConfig, frames: usize) -> Self {
        let mut thresholds = vec![cfg.inference.score_threshold];
        thresholds.extend(cfg.eval.threshold_sweep.iter().copied());
        let rois = sorted_rois(cfg);
        Self {
            acc: thresholds
                .iter()
                .map(|_| rois.iter().map(|r| MetricAccumulator::new(r.clone(), frames)).collect())
                .collect(),
            thresholds,
            boxes: BoxApAccumulator::default(),
            any_boxes: false,
        }
    }

    fn finish(self, model: &str, samples: usize) -> EvalReport {
        let mut rows: Vec<Vec<MetricRow>> = self
            .acc
            .iter()
            .map(|per_roi| per_roi.iter().map(|a| a.report(model)).collect())
            .collect();
        let main = rows.remove(0);
        EvalReport {
            model: model.to_string(),
            samples,
            rows: main,
            sweep: self.thresholds[1..].iter().copied().zip(rows).collect(),
            box_ap: self.any_boxes.then(|| self.boxes.ap()),
            velocity_error: self.boxes.velocity_error(),
        }
    }
}

/// Model output of one sample with frozen parameters.
pub fn predict(store: &ParamStore, cfg: &RunConfig, sample: &Sample) -> Result<PredictionBundle> {
    let mut store = store.clone();
    let tape = Tape::new();
    let b = Binder::frozen(&tape, &mut store);
    let fw = forward(&b, &cfg.model, &sample.input_tensor())?;
    let p = fw.bundle();
    if !p.all_finite() {
        return Err(Error::Numeric(format!("non-finite prediction for sample {}", sample.index)));
    }
    Ok(p)
}

/// Decoded instances and metrics over a dataset.
pub fn evaluate(store: &ParamStore, cfg: &RunConfig, ds: &Dataset, model: &str) -> Result<EvalReport> {
    check_data(cfg, ds, "eval")?;
    let frames = ds.manifest.t_out + 1;
    let mut sink = EvalSink::new(cfg, frames);
    let dt = ds.manifest.dt;
    for s in &ds.samples {
        let p = predict(store, cfg, s)?;
        for (k, &d) in sink.thresholds.iter().enumerate() {
            let icfg = InferenceConfig {
                score_threshold: d,
                ..cfg.inference.clone()
            };
            let seg = decode_instances(&p, &s.grid, &icfg)?;
            for a in &mut sink.acc[k] {
                a.add(&seg, &s.frames)?;
            }
        }
        if p.boxes.is_some() {
            sink.any_boxes = true;
            let gt: Vec<_> = s.frames[0].boxes.values().copied().collect();
            sink.boxes.add(&detections(&p, &s.grid, dt, cfg.inference.reduction), &gt);
        }
    }
    Ok(sink.finish(model, ds.len()))
}

/// Evaluates a checkpoint after checking it was trained on this kind of
/// data.
pub fn evaluate_checkpoint(ck: &Checkpoint, ds: &Dataset, model: &str) -> Result<EvalReport> {
    if ck.data_hash != ds.manifest.config_hash {
        return Err(Error::Config(format!(
            "checkpoint data hash {} does not match dataset {}",
            ck.data_hash, ds.manifest.config_hash
        )));
    }
    evaluate(&ck.state.store, &ck.config, ds, model)
}

/// Static-world prediction: the current frame repeated for every future
/// frame.
pub fn copy_last_frame(sample: &Sample) -> InstanceSegResult {
    let now = &sample.frames[0].instance_ids;
    InstanceSegResult {
        grid: sample.grid,
        frames: vec![now.clone(); sample.frames.len()],
    }
}

pub fn baseline_report(cfg: &RunConfig, ds: &Dataset) -> Result<EvalReport> {
    let frames = ds.manifest.t_out + 1;
    let mut sink = EvalSink::new(cfg, frames);
    sink.thresholds.truncate(1);
    sink.acc.truncate(1);
    for s in &ds.samples {
        let seg = copy_last_frame(s);
        for a in &mut sink.acc[0] {
            a.add(&seg, &s.frames)?;
        }
    }
    Ok(sink.finish("copy-last-frame", ds.len()))
}

/// One axis of an ablation grid: a config key and the values it takes.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl AblationAxis {
    /// `key=v1,v2,...`
    pub fn parse(spec: &str) -> Result<Self> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("ablation axis {spec:?} is not key=v1,v2")))?;
        let values: Vec<String> = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("ablation axis {k} has no values")));
        }
        Ok(Self {
            key: k.trim().to_string(),
            values,
        })
    }
}

/// Every combination of axis values, as override lists.
pub fn ablation_variants(axes: &[AblationAxis]) -> Vec<Vec<String>> {
    let mut out = vec![Vec::new()];
    for a in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                a.values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(format!("{}={}", a.key, v));
                    p
                })
            })
            .collect();
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// Per-seed primary-ROI scores.
    pub vpq: Vec<f64>,
    pub iou: Vec<f64>,
    pub mean_vpq: f64,
    pub mean_iou: f64,
    /// Difference to the first variant's mean VPQ.
    pub delta_vpq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub roi: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "roi={} seeds={:?} vpq=mean-per-frame", self.roi, self.seeds)?;
        writeln!(f, "{:<40} {:>9} {:>9} {:>10}", "variant", "iou", "vpq", "delta_vpq")?;
        for r in &self.rows {
            writeln!(f, "{:<40} {:>9.4} {:>9.4} {:>+10.4}", r.variant, r.mean_iou, r.mean_vpq, r.delta_vpq)?;
        }
        Ok(())
    }
}

/// Trains and evaluates every variant with every seed. Seeds set both
/// parameter initialisation and data order, so variants are paired.
pub fn run_ablation(
    base: &RunConfig,
    axes: &[AblationAxis],
    seeds: &[u64],
    train: &Dataset,
    eval: &Dataset,
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows: Vec<AblationRow> = Vec::new();
    let mut roi = String::new();
    for overrides in ablation_variants(axes) {
        let name = if overrides.is_empty() { "base".to_string() } else { overrides.join(" ") };
        let mut vpq = Vec::new();
        let mut iou = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            for o in &overrides {
                cfg = cfg.with_override(o)?;
            }
            cfg.train.seed = seed;
            info!("ablation variant [{name}] seed {seed}");
            let mut t = Trainer::new(cfg.clone(), train, eval)?;
            let dir = out_dir.map(|d| d.join(format!("{}-seed{seed}", sanitize(&name))));
            t.run(dir.as_deref(), None)?;
            let rep = evaluate(&t.state.store, &cfg, eval, &name)?;
            roi = rep.primary().roi.clone();
            vpq.push(rep.primary().vpq);
            iou.push(rep.primary().iou);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        rows.push(AblationRow {
            variant: name,
            mean_vpq: mean(&vpq),
            mean_iou: mean(&iou),
            vpq,
            iou,
            delta_vpq: 0.0,
        });
    }
    let first = rows[0].mean_vpq;
    for r in &mut rows {
        r.delta_vpq = r.mean_vpq - first;
    }
    Ok(AblationTable {
        roi,
        seeds: seeds.to_vec(),
        rows,
    })
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' }).collect()
}

#[cfg(test)]
mod tests;
