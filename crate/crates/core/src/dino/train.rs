use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::head::{head_forward, init_head, HeadConfig, DINO_HEAD, IBOT_HEAD};
use super::loss::{center_update, dino_global_loss, ema_update, ibot_masked_loss, koleo_regularizer, teacher_targets};
use super::schedule::{ScheduleConfig, ScheduleState};
use crate::nn::{adamw_step, save_checkpoint, AdamW, Gradients, NnError, ParamStore, Real, Tape, Tensor, Var};
use crate::rng::keyed_rng;
use crate::views::{make_views, ViewBatch, ViewConfig, ViewError};
use crate::vit::{cls_rows, init_vit, vit_tokens, VitConfig};

#[derive(Debug, thiserror::Error)]
pub enum SslError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    View(#[from] ViewError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("batch source: {0}")]
    Source(String),
    #[error("non-finite loss at step {step}; state dumped to {dump:?}")]
    NonFinite { step: u64, dump: Option<PathBuf> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub ibot: f64,
    pub koleo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ibot: 1.0, koleo: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslConfig {
    pub vit: VitConfig,
    pub head: HeadConfig,
    pub views: ViewConfig,
    pub schedule: ScheduleConfig,
    pub loss: LossWeights,
    pub center_momentum: f64,
    pub steps: u64,
    /// Save checkpoints every this many steps (0 disables periodic saves).
    pub checkpoint_every: u64,
    pub workers: usize,
    pub seed: u64,
    pub checked: bool,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            vit: VitConfig::default(),
            head: HeadConfig::default(),
            views: ViewConfig::default(),
            schedule: ScheduleConfig::default(),
            loss: LossWeights::default(),
            center_momentum: 0.9,
            steps: 100,
            checkpoint_every: 0,
            workers: 1,
            seed: 0,
            checked: false,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<(), SslError> {
        self.vit.validate()?;
        self.head.validate()?;
        self.views.validate()?;
        self.schedule.validate().map_err(SslError::Config)?;
        if self.views.global_size != self.vit.image_size {
            return Err(SslError::Config("global crop size must equal the model image size".into()));
        }
        if self.views.patch_size != self.vit.patch_size {
            return Err(SslError::Config("view patch size must equal the model patch size".into()));
        }
        if self.views.n_global < 2 {
            return Err(SslError::Config("at least two global crops are required".into()));
        }
        if self.workers == 0 {
            return Err(SslError::Config("workers must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return Err(SslError::Config("center momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Student and teacher parameters plus the two running centers.
#[derive(Debug, Clone)]
pub struct SslModel<T> {
    pub student: ParamStore<T>,
    pub teacher: ParamStore<T>,
    pub dino_center: Vec<T>,
    pub ibot_center: Vec<T>,
}

impl<T: Real> SslModel<T> {
    pub fn new(cfg: &SslConfig) -> Result<Self, SslError> {
        let mut student = ParamStore::new();
        init_vit(&cfg.vit, cfg.seed, &mut student)?;
        init_head(&cfg.head, DINO_HEAD, cfg.vit.dim, cfg.seed, &mut student)?;
        init_head(&cfg.head, IBOT_HEAD, cfg.vit.dim, cfg.seed, &mut student)?;
        let teacher = student.detached();
        let k = cfg.head.prototypes;
        Ok(Self {
            student,
            teacher,
            dino_center: vec![T::zero(); k],
            ibot_center: vec![T::zero(); k],
        })
    }

    /// Backbone-only parameters of the teacher (or student).
    pub fn backbone(&self, teacher: bool) -> ParamStore<T> {
        let src = if teacher { &self.teacher } else { &self.student };
        let mut out = ParamStore::new();
        for (name, e) in src.iter() {
            if !name.starts_with(DINO_HEAD) && !name.starts_with(IBOT_HEAD) {
                out.insert(name, e.value.clone());
            }
        }
        out
    }
}

/// Crops of one worker's tiles, stacked crop-major (`crop * tiles + tile`).
#[derive(Debug, Clone)]
pub struct CropBatch<T> {
    pub tiles: usize,
    pub global_size: usize,
    pub local_size: usize,
    pub globals: Vec<Vec<T>>,
    pub locals: Vec<Vec<T>>,
    pub masks: Vec<Vec<bool>>,
}

impl<T: Real> CropBatch<T> {
    pub fn from_views(views: &[ViewBatch]) -> Result<Self, SslError> {
        let first = views.first().ok_or_else(|| SslError::Source("empty view batch".into()))?;
        let (ng, nl) = (first.globals.len(), first.locals.len());
        if views.iter().any(|v| v.globals.len() != ng || v.locals.len() != nl || v.masks.len() != ng) {
            return Err(SslError::Source("inconsistent crop counts".into()));
        }
        let conv = |d: &[f32]| d.iter().map(|&v| T::c(v as f64)).collect::<Vec<T>>();
        let mut globals = Vec::with_capacity(ng * views.len());
        let mut masks = Vec::with_capacity(ng * views.len());
        for g in 0..ng {
            for v in views {
                globals.push(conv(&v.globals[g].data));
                masks.push(v.masks[g].clone());
            }
        }
        let mut locals = Vec::with_capacity(nl * views.len());
        for l in 0..nl {
            for v in views {
                locals.push(conv(&v.locals[l].data));
            }
        }
        Ok(Self {
            tiles: views.len(),
            global_size: first.globals[0].size,
            local_size: first.locals.first().map_or(0, |c| c.size),
            globals,
            locals,
            masks,
        })
    }

    pub fn n_global(&self) -> usize {
        self.globals.len() / self.tiles
    }

    pub fn n_local(&self) -> usize {
        self.locals.len() / self.tiles
    }

    /// Rows of the masked patch tokens within the stacked global output.
    pub fn masked_rows(&self, n: usize) -> Vec<usize> {
        self.masks
            .iter()
            .enumerate()
            .flat_map(|(i, m)| {
                m.iter().enumerate().filter(|(_, &b)| b).map(move |(j, _)| i * (n + 1) + 1 + j)
            })
            .collect()
    }
}

/// Teacher distributions on the unmasked global crops.
#[derive(Debug, Clone)]
pub struct TeacherOutput<T> {
    pub dino_logits: Tensor<T>,
    pub ibot_logits: Tensor<T>,
    /// One `[tiles, K]` target per global crop.
    pub dino_probs: Vec<Tensor<T>>,
    /// `[masked, K]`, in the order of [`CropBatch::masked_rows`].
    pub ibot_probs: Tensor<T>,
}

fn slices<T: Real>(t: &Tensor<T>, parts: usize) -> Result<Vec<Tensor<T>>, NnError> {
    let (r, c) = t.dims2();
    let step = r / parts;
    (0..parts)
        .map(|i| Tensor::matrix(step, c, t.data()[i * step * c..(i + 1) * step * c].to_vec()))
        .collect()
}

pub fn teacher_forward<T: Real>(
    model: &SslModel<T>,
    cfg: &SslConfig,
    batch: &CropBatch<T>,
    temp: f64,
) -> Result<TeacherOutput<T>, NnError> {
    let mut tape = Tape::no_grad();
    let n = (batch.global_size / cfg.vit.patch_size).pow(2);
    let imgs: Vec<&[T]> = batch.globals.iter().map(Vec::as_slice).collect();
    let out = vit_tokens(&mut tape, &model.teacher, &cfg.vit, &imgs, batch.global_size, None)?;
    let cls = tape.select_rows(out, &cls_rows(imgs.len(), n))?;
    let dino = head_forward(&mut tape, &model.teacher, DINO_HEAD, cls)?;
    let dino_logits = tape.value(dino.logits).clone();
    let rows = batch.masked_rows(n);
    let k = cfg.head.prototypes;
    let ibot_logits = if rows.is_empty() {
        Tensor::zeros(&[0, k])
    } else {
        let p = tape.select_rows(out, &rows)?;
        let h = head_forward(&mut tape, &model.teacher, IBOT_HEAD, p)?;
        tape.value(h.logits).clone()
    };
    let t = T::c(temp);
    let probs = teacher_targets(&dino_logits, t, &model.dino_center)?;
    let ibot_probs = if rows.is_empty() {
        Tensor::zeros(&[0, k])
    } else {
        teacher_targets(&ibot_logits, t, &model.ibot_center)?
    };
    Ok(TeacherOutput {
        dino_probs: slices(&probs, batch.n_global())?,
        ibot_probs,
        dino_logits,
        ibot_logits,
    })
}

pub struct LossParts {
    pub total: Var,
    pub dino: Var,
    pub ibot: Var,
    pub koleo: Var,
}

/// Student objective: global DINO loss + weighted masked-token loss + weighted KoLeo.
pub fn student_loss<T: Real>(
    tape: &mut Tape<T>,
    student: &ParamStore<T>,
    cfg: &SslConfig,
    batch: &CropBatch<T>,
    teacher: &TeacherOutput<T>,
    student_temp: f64,
) -> Result<LossParts, NnError> {
    let b = batch.tiles;
    let n = (batch.global_size / cfg.vit.patch_size).pow(2);
    let imgs: Vec<&[T]> = batch.globals.iter().map(Vec::as_slice).collect();
    let masks: Vec<&[bool]> = batch.masks.iter().map(Vec::as_slice).collect();
    let gout = vit_tokens(tape, student, &cfg.vit, &imgs, batch.global_size, Some(&masks))?;
    let gcls = tape.select_rows(gout, &cls_rows(imgs.len(), n))?;
    let ghead = head_forward(tape, student, DINO_HEAD, gcls)?;
    let mut views = Vec::new();
    for g in 0..batch.n_global() {
        views.push(tape.slice_rows(ghead.logits, g * b, (g + 1) * b)?);
    }
    if batch.n_local() > 0 {
        let nl = (batch.local_size / cfg.vit.patch_size).pow(2);
        let limgs: Vec<&[T]> = batch.locals.iter().map(Vec::as_slice).collect();
        let lout = vit_tokens(tape, student, &cfg.vit, &limgs, batch.local_size, None)?;
        let lcls = tape.select_rows(lout, &cls_rows(limgs.len(), nl))?;
        let lhead = head_forward(tape, student, DINO_HEAD, lcls)?;
        for l in 0..batch.n_local() {
            views.push(tape.slice_rows(lhead.logits, l * b, (l + 1) * b)?);
        }
    }
    let st = T::c(student_temp);
    let dino = dino_global_loss(tape, &views, &teacher.dino_probs, st)?;
    let rows = batch.masked_rows(n);
    let ibot_logits = if rows.is_empty() {
        None
    } else {
        let p = tape.select_rows(gout, &rows)?;
        Some(head_forward(tape, student, IBOT_HEAD, p)?.logits)
    };
    let ibot = ibot_masked_loss(tape, ibot_logits, &teacher.ibot_probs, st)?;
    let koleo = if cfg.loss.koleo != 0.0 && tape.dims(ghead.bottleneck).0 >= 2 {
        koleo_regularizer(tape, ghead.bottleneck)?
    } else {
        tape.constant(Tensor::scalar(T::zero()))?
    };
    let wi = tape.scale(ibot, T::c(cfg.loss.ibot))?;
    let wk = tape.scale(koleo, T::c(cfg.loss.koleo))?;
    let total = tape.add(dino, wi)?;
    let total = tape.add(total, wk)?;
    Ok(LossParts { total, dino, ibot, koleo })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub dino: f64,
    pub ibot: f64,
    pub koleo: f64,
    pub lr: f64,
    pub teacher_temp: f64,
    pub student_temp: f64,
    pub momentum: f64,
}

struct WorkerResult<T> {
    tape: Tape<T>,
    grads: Gradients<T>,
    teacher: TeacherOutput<T>,
    parts: [f64; 4],
}

fn run_worker<T: Real>(
    model: &SslModel<T>,
    cfg: &SslConfig,
    batch: &CropBatch<T>,
    sched: &ScheduleState,
) -> Result<WorkerResult<T>, NnError> {
    let teacher = teacher_forward(model, cfg, batch, sched.teacher_temp)?;
    let mut tape = Tape::new().with_checked(cfg.checked);
    let parts = student_loss(&mut tape, &model.student, cfg, batch, &teacher, sched.student_temp)?;
    let grads = tape.backward(parts.total)?;
    let vals = [parts.total, parts.dino, parts.ibot, parts.koleo].map(|v| tape.scalar(v).f64());
    Ok(WorkerResult {
        tape,
        grads,
        teacher,
        parts: vals,
    })
}

fn stack<T: Real>(ts: &[&Tensor<T>], cols: usize) -> Tensor<T> {
    let data: Vec<T> = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
    let rows = data.len() / cols;
    Tensor::matrix(rows, cols, data).expect("stacked rows")
}

/// One optimization step over per-worker batches. Gradients are averaged in
/// worker order; the teacher and centers are updated once.
pub fn ssl_step<T: Real>(
    model: &mut SslModel<T>,
    cfg: &SslConfig,
    batches: &[CropBatch<T>],
    step: u64,
) -> Result<StepMetrics, SslError> {
    if batches.is_empty() {
        return Err(SslError::Source("no worker batches".into()));
    }
    let sched = cfg.schedule.at(step);
    let results: Vec<Result<WorkerResult<T>, NnError>> = {
        let m = &*model;
        if batches.len() == 1 {
            vec![run_worker(m, cfg, &batches[0], &sched)]
        } else {
            batches.par_iter().map(|b| run_worker(m, cfg, b, &sched)).collect()
        }
    };
    let results = results.into_iter().collect::<Result<Vec<_>, _>>().map_err(|e| match e {
        NnError::NonFinite(_) => SslError::NonFinite { step, dump: None },
        e => SslError::Nn(e),
    })?;
    let w = results.len() as f64;
    let mut parts = [0.0; 4];
    for r in &results {
        for (p, v) in parts.iter_mut().zip(r.parts) {
            *p += v / w;
        }
    }
    let metrics = StepMetrics {
        step,
        loss: parts[0],
        dino: parts[1],
        ibot: parts[2],
        koleo: parts[3],
        lr: sched.lr,
        teacher_temp: sched.teacher_temp,
        student_temp: sched.student_temp,
        momentum: sched.momentum,
    };
    if !parts.iter().all(|v| v.is_finite()) {
        return Err(SslError::NonFinite { step, dump: None });
    }
    model.student.zero_grads();
    for r in &results {
        r.tape.accumulate_into(&r.grads, &mut model.student)?;
    }
    model.student.scale_grads(T::c(1.0 / w));
    if !model.teacher.grads_untouched() {
        return Err(SslError::Config("teacher received gradients".into()));
    }
    let opt = AdamW {
        lr: sched.lr,
        weight_decay: cfg.schedule.weight_decay,
        ..AdamW::default()
    };
    adamw_step(&mut model.student, &opt)?;
    ema_update(&mut model.teacher, &model.student, sched.momentum)?;
    let k = cfg.head.prototypes;
    let dl: Vec<&Tensor<T>> = results.iter().map(|r| &r.teacher.dino_logits).collect();
    center_update(&mut model.dino_center, &stack(&dl, k), cfg.center_momentum)?;
    let il: Vec<&Tensor<T>> = results.iter().map(|r| &r.teacher.ibot_logits).collect();
    center_update(&mut model.ibot_center, &stack(&il, k), cfg.center_momentum)?;
    Ok(metrics)
}

/// Supplies per-worker view batches for a step.
pub trait ViewSource: Sync {
    fn views(&self, step: u64) -> Result<Vec<Vec<ViewBatch>>, SslError>;
}

/// The same views at every step.
pub struct FixedViews(pub Vec<Vec<ViewBatch>>);

impl ViewSource for FixedViews {
    fn views(&self, _step: u64) -> Result<Vec<Vec<ViewBatch>>, SslError> {
        Ok(self.0.clone())
    }
}

/// Fresh augmentations of tiles returned by a loader, keyed by (seed, step, worker, tile).
pub struct TileViews<F> {
    pub loader: F,
    pub views: ViewConfig,
    pub seed: u64,
}

impl<F> ViewSource for TileViews<F>
where
    F: Fn(u64) -> Result<Vec<Vec<RgbImage>>, SslError> + Sync,
{
    fn views(&self, step: u64) -> Result<Vec<Vec<ViewBatch>>, SslError> {
        let tiles = (self.loader)(step)?;
        tiles
            .iter()
            .enumerate()
            .map(|(w, ts)| {
                ts.iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let seed = rand::RngCore::next_u64(&mut keyed_rng(self.seed, &[step, w as u64, i as u64]));
                        make_views(t, &self.views, seed).map_err(SslError::from)
                    })
                    .collect()
            })
            .collect()
    }
}

pub struct SslRun<T> {
    pub model: SslModel<T>,
    pub metrics: Vec<StepMetrics>,
}

fn save_model<T: Real>(model: &SslModel<T>, dir: &Path, tag: &str) -> Result<(), SslError> {
    fs::create_dir_all(dir)?;
    save_checkpoint(&model.student, &dir.join(format!("student{tag}.ckpt")))?;
    save_checkpoint(&model.teacher, &dir.join(format!("teacher{tag}.ckpt")))?;
    let centers = serde_json::json!({
        "dino": model.dino_center.iter().map(|v| v.f64()).collect::<Vec<_>>(),
        "ibot": model.ibot_center.iter().map(|v| v.f64()).collect::<Vec<_>>(),
    });
    fs::write(dir.join(format!("centers{tag}.json")), serde_json::to_vec(&centers)?)?;
    Ok(())
}

/// Run training for `cfg.steps` steps. With an output directory, metrics go to
/// `metrics.csv` and checkpoints to `checkpoints/`.
pub fn train_ssl<T: Real>(
    cfg: &SslConfig,
    source: &dyn ViewSource,
    out: Option<&Path>,
) -> Result<SslRun<T>, SslError> {
    cfg.validate()?;
    let mut model = SslModel::new(cfg)?;
    let mut metrics = Vec::with_capacity(cfg.steps as usize);
    let mut writer = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(csv::Writer::from_path(dir.join("metrics.csv"))?)
        }
        None => None,
    };
    for step in 0..cfg.steps {
        let views = source.views(step)?;
        let batches = views
            .iter()
            .map(|v| CropBatch::from_views(v))
            .collect::<Result<Vec<CropBatch<T>>, _>>()?;
        let m = match ssl_step(&mut model, cfg, &batches, step) {
            Ok(m) => m,
            Err(SslError::NonFinite { step, .. }) => {
                let dump = match out {
                    Some(dir) => {
                        let d = dir.join("abort");
                        save_model(&model, &d, "")?;
                        fs::write(
                            d.join("state.json"),
                            serde_json::to_vec_pretty(&serde_json::json!({
                                "step": step,
                                "schedule": cfg.schedule.at(step),
                                "history": metrics,
                            }))?,
                        )?;
                        Some(d)
                    }
                    None => None,
                };
                log::error!("non-finite loss at step {step}");
                return Err(SslError::NonFinite { step, dump });
            }
            Err(e) => return Err(e),
        };
        log::debug!("step {step} loss {:.6}", m.loss);
        if let Some(w) = writer.as_mut() {
            w.serialize(m)?;
        }
        metrics.push(m);
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
                save_model(&model, &dir.join("checkpoints"), &format!("_{:06}", step + 1))?;
            }
        }
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }
    if let Some(dir) = out {
        save_model(&model, dir, "")?;
    }
    Ok(SslRun { model, metrics })
}
