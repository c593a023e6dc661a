//! Cross-attention aggregator over tile embeddings with a directly learned
//! query, trained per specimen on the highest-scoring slide.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evalstat::{auroc, StatError};
use crate::nn::{adamw_step, trunc_normal, AdamW, NnError, ParamStore, Tape, Tensor, Var};
use crate::rng::keyed_rng;

#[derive(Debug, thiserror::Error)]
pub enum AggError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("training needs both classes (positives {pos}, negatives {neg})")]
    SingleClass { pos: usize, neg: usize },
    #[error("invalid specimen {0}")]
    Bag(String),
    #[error("empty learning-rate grid")]
    EmptyGrid,
    #[error("invalid aggregator config: {0}")]
    Config(String),
    #[error(transparent)]
    Stat(#[from] StatError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgataConfig {
    pub key_dim: usize,
    pub value_dim: usize,
    /// Widths of the ReLU layers between pooling and the output layer.
    pub head_hidden: Vec<usize>,
    pub classes: usize,
    pub positive_class: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for AgataConfig {
    fn default() -> Self {
        Self {
            key_dim: 256,
            value_dim: 512,
            head_hidden: vec![512],
            classes: 2,
            positive_class: 1,
            lr: 3e-4,
            weight_decay: 0.01,
            epochs: 25,
            shuffle: true,
            seed: 0,
        }
    }
}

impl AgataConfig {
    pub fn param_shapes(&self, in_dim: usize) -> Vec<(String, Vec<usize>)> {
        let mut v = vec![
            ("query".to_string(), vec![1, self.key_dim]),
            ("key.w".to_string(), vec![in_dim, self.key_dim]),
            ("key.b".to_string(), vec![1, self.key_dim]),
            ("value.w".to_string(), vec![self.key_dim, self.value_dim]),
            ("value.b".to_string(), vec![1, self.value_dim]),
        ];
        let mut prev = self.value_dim;
        for (i, &h) in self.head_hidden.iter().enumerate() {
            v.push((format!("head.{i}.w"), vec![prev, h]));
            v.push((format!("head.{i}.b"), vec![1, h]));
            prev = h;
        }
        v.push(("head.out.w".to_string(), vec![prev, self.classes]));
        v.push(("head.out.b".to_string(), vec![1, self.classes]));
        v
    }

    pub fn validate(&self) -> Result<(), AggError> {
        if self.classes < 2 || self.positive_class >= self.classes {
            return Err(AggError::Config("need >= 2 classes and a valid positive class".into()));
        }
        if self.key_dim == 0 || self.value_dim == 0 || self.head_hidden.contains(&0) {
            return Err(AggError::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

pub fn init_agata(cfg: &AgataConfig, in_dim: usize, seed: u64) -> Result<ParamStore<f64>, AggError> {
    cfg.validate()?;
    let mut rng = keyed_rng(seed, &[0x6167]);
    let mut store = ParamStore::new();
    for (name, shape) in cfg.param_shapes(in_dim) {
        let t = if name.ends_with(".b") {
            Tensor::zeros(&shape)
        } else {
            trunc_normal(&mut rng, &shape, 0.02)
        };
        store.insert(name, t);
    }
    Ok(store)
}

fn linear(tape: &mut Tape<f64>, s: &ParamStore<f64>, name: &str, x: Var) -> Result<Var, NnError> {
    crate::vit::linear(tape, s, name, x)
}

/// Row order sorting tiles lexicographically; pooling in this order makes the
/// output bit-identical under any permutation of the input rows.
pub fn canonical_order(x: &Tensor<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x.rows()).collect();
    order.sort_by(|&a, &b| {
        x.row_slice(a)
            .iter()
            .zip(x.row_slice(b))
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Tape forward of one slide `[n, d]`: returns `(logits [1, C], attention [1, n])`
/// with attention in the input row order.
pub fn agata_logits(
    tape: &mut Tape<f64>,
    store: &ParamStore<f64>,
    cfg: &AgataConfig,
    x: Var,
) -> Result<(Var, Var), NnError> {
    let order = canonical_order(tape.value(x));
    let identity = order.iter().enumerate().all(|(i, &o)| i == o);
    let x = if identity { x } else { tape.select_rows(x, &order)? };
    let k = linear(tape, store, "key", x)?;
    let k = tape.gelu(k)?;
    let v = linear(tape, store, "value", k)?;
    let v = tape.gelu(v)?;
    let q = tape.param(store, "query")?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let a = tape.softmax(scores)?;
    let mut h = tape.matmul(a, v)?;
    for i in 0..cfg.head_hidden.len() {
        h = linear(tape, store, &format!("head.{i}"), h)?;
        h = tape.relu(h)?;
    }
    let logits = linear(tape, store, "head.out", h)?;
    if identity {
        return Ok((logits, a));
    }
    let mut inverse = vec![0; order.len()];
    for (k, &o) in order.iter().enumerate() {
        inverse[o] = k;
    }
    let at = tape.transpose(a)?;
    let at = tape.select_rows(at, &inverse)?;
    let a = tape.transpose(at)?;
    Ok((logits, a))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgataOutput {
    pub probabilities: Vec<f64>,
    pub attention: Vec<f64>,
}

pub fn agata_forward(store: &ParamStore<f64>, cfg: &AgataConfig, tiles: &Tensor<f64>) -> Result<AgataOutput, AggError> {
    let expect = store.value("key.w").ok_or_else(|| NnError::MissingParam("key.w".into()))?.rows();
    if tiles.rows() == 0 {
        return Err(AggError::Bag("slide without tiles".into()));
    }
    if tiles.cols() != expect {
        return Err(NnError::Shape(format!("embedding width {} vs {expect}", tiles.cols())).into());
    }
    let mut tape = Tape::no_grad();
    let x = tape.constant(tiles.clone())?;
    let (logits, a) = agata_logits(&mut tape, store, cfg, x)?;
    let p = tape.softmax(logits)?;
    Ok(AgataOutput {
        probabilities: tape.value(p).data().to_vec(),
        attention: tape.value(a).data().to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideTiles {
    pub slide_id: String,
    /// `[tiles, dim]`.
    pub embeddings: Tensor<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecimenBag {
    pub specimen_id: String,
    pub slides: Vec<SlideTiles>,
    pub label: usize,
    pub source: String,
}

impl SpecimenBag {
    pub fn validate(&self, dim: usize) -> Result<(), AggError> {
        if self.slides.is_empty() {
            return Err(AggError::Bag(format!("{} has no slides", self.specimen_id)));
        }
        for s in &self.slides {
            if s.embeddings.rows() == 0 || s.embeddings.cols() != dim {
                return Err(AggError::Bag(format!(
                    "{}/{}: {:?} embeddings, expected width {dim}",
                    self.specimen_id,
                    s.slide_id,
                    s.embeddings.dims2()
                )));
            }
        }
        Ok(())
    }
}

/// Positive-class probability of every slide.
pub fn slide_scores(store: &ParamStore<f64>, cfg: &AgataConfig, bag: &SpecimenBag) -> Result<Vec<f64>, AggError> {
    bag.slides
        .par_iter()
        .map(|s| Ok(agata_forward(store, cfg, &s.embeddings)?.probabilities[cfg.positive_class]))
        .collect()
}

/// Index of the slide with the highest positive probability (lowest index on ties).
pub fn mil_select(store: &ParamStore<f64>, cfg: &AgataConfig, bag: &SpecimenBag) -> Result<usize, AggError> {
    let scores = slide_scores(store, cfg, bag)?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Specimen score: the maximum slide probability.
pub fn specimen_score(store: &ParamStore<f64>, cfg: &AgataConfig, bag: &SpecimenBag) -> Result<f64, AggError> {
    Ok(slide_scores(store, cfg, bag)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

pub struct MilLoss {
    pub loss: Var,
    pub selected: usize,
    /// Leaf of every slide's embeddings, in slide order.
    pub inputs: Vec<Var>,
}

/// Cross-entropy of the selected slide. Every slide's embeddings are placed on
/// the tape as leaves, but only the selected one enters the loss.
pub fn mil_loss(
    tape: &mut Tape<f64>,
    store: &ParamStore<f64>,
    cfg: &AgataConfig,
    bag: &SpecimenBag,
) -> Result<MilLoss, AggError> {
    let selected = mil_select(store, cfg, bag)?;
    let inputs = bag
        .slides
        .iter()
        .map(|s| tape.leaf(s.embeddings.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let (logits, _) = agata_logits(tape, store, cfg, inputs[selected])?;
    let loss = tape.cross_entropy(logits, &[bag.label])?;
    Ok(MilLoss { loss, selected, inputs })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_auroc: f64,
    pub val_auroc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedAggregator {
    pub params: ParamStore<f64>,
    pub best_epoch: usize,
    pub best_auroc: f64,
    pub log: Vec<EpochLog>,
}

fn bag_auroc(store: &ParamStore<f64>, cfg: &AgataConfig, bags: &[SpecimenBag]) -> Result<f64, AggError> {
    let scores = bags.iter().map(|b| specimen_score(store, cfg, b)).collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<bool> = bags.iter().map(|b| b.label == cfg.positive_class).collect();
    Ok(auroc(&scores, &labels)?)
}

/// One AdamW step per specimen for `cfg.epochs` epochs; returns the
/// parameters of the epoch with the best validation AUROC (training AUROC
/// when no validation bags are given; earliest epoch on ties).
pub fn train_aggregator(
    train: &[SpecimenBag],
    val: &[SpecimenBag],
    cfg: &AgataConfig,
) -> Result<TrainedAggregator, AggError> {
    cfg.validate()?;
    let first = train.first().ok_or(AggError::SingleClass { pos: 0, neg: 0 })?;
    let dim = first.slides.first().map_or(0, |s| s.embeddings.cols());
    for b in train.iter().chain(val) {
        b.validate(dim)?;
        if b.label >= cfg.classes {
            return Err(AggError::Bag(format!("{} has label {}", b.specimen_id, b.label)));
        }
    }
    let pos = train.iter().filter(|b| b.label == cfg.positive_class).count();
    if pos == 0 || pos == train.len() {
        return Err(AggError::SingleClass {
            pos,
            neg: train.len() - pos,
        });
    }
    let val_usable = !val.is_empty() && {
        let vp = val.iter().filter(|b| b.label == cfg.positive_class).count();
        vp > 0 && vp < val.len()
    };
    let mut store = init_agata(cfg, dim, cfg.seed)?;
    let opt = AdamW {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let mut best: Option<(usize, f64, ParamStore<f64>)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        if cfg.shuffle {
            use rand::seq::SliceRandom;
            order.shuffle(&mut keyed_rng(cfg.seed, &[epoch as u64]));
        }
        let mut total = 0.0;
        for &i in &order {
            let mut tape = Tape::new();
            let ml = mil_loss(&mut tape, &store, cfg, &train[i])?;
            total += tape.scalar(ml.loss);
            let grads = tape.backward(ml.loss)?;
            store.zero_grads();
            tape.accumulate_into(&grads, &mut store)?;
            adamw_step(&mut store, &opt)?;
        }
        let train_auroc = bag_auroc(&store, cfg, train)?;
        let val_auroc = if val_usable { Some(bag_auroc(&store, cfg, val)?) } else { None };
        let score = val_auroc.unwrap_or(train_auroc);
        log.push(EpochLog {
            epoch,
            train_loss: total / train.len() as f64,
            train_auroc,
            val_auroc,
        });
        log::info!("epoch {epoch} loss {:.5} train auroc {train_auroc:.4} val {val_auroc:?}", total / train.len() as f64);
        if best.as_ref().is_none_or(|(_, b, _)| score > *b) {
            best = Some((epoch, score, store.detached()));
        }
    }
    let (best_epoch, best_auroc, params) = match best {
        Some(b) => b,
        None => (0, bag_auroc(&store, cfg, train)?, store.detached()),
    };
    Ok(TrainedAggregator {
        params,
        best_epoch,
        best_auroc,
        log,
    })
}

#[derive(Debug, Clone)]
pub struct GridSearch {
    pub best_lr: f64,
    pub best: TrainedAggregator,
    /// `(lr, best validation AUROC)` for each distinct grid point, ascending lr.
    pub results: Vec<(f64, f64)>,
}

/// Train one model per distinct learning rate; keep the best by validation
/// AUROC, preferring the smaller learning rate on ties.
pub fn lr_grid_search(
    train: &[SpecimenBag],
    val: &[SpecimenBag],
    cfg: &AgataConfig,
    grid: &[f64],
) -> Result<GridSearch, AggError> {
    let mut lrs: Vec<f64> = grid.to_vec();
    lrs.sort_by(f64::total_cmp);
    lrs.dedup();
    if lrs.is_empty() {
        return Err(AggError::EmptyGrid);
    }
    let mut best: Option<(f64, TrainedAggregator)> = None;
    let mut results = Vec::new();
    for lr in lrs {
        let run = train_aggregator(train, val, &AgataConfig { lr, ..cfg.clone() })?;
        results.push((lr, run.best_auroc));
        if best.as_ref().is_none_or(|(_, b)| run.best_auroc > b.best_auroc) {
            best = Some((lr, run));
        }
    }
    let (best_lr, best) = best.expect("non-empty grid");
    Ok(GridSearch { best_lr, best, results })
}
