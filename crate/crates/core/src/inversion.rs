//! Gradient-based inversion of a trained ViT.
//!
//! Four strategies share one optimisation loop:
//!
//! * dense: all `N` patches for all `T` steps;
//! * sparse: scheduled pruning of the least important patches, discarded for good;
//! * fixed selection: one subset chosen at a configured step, then inverted to the end;
//! * progressive detachment: the top-`K` patches are frozen and exported at
//!   each detachment point while the remainder keeps optimising.
//!
//! An event scheduled at iteration `t` (pruning, selection or detachment)
//! happens after exactly `t` completed optimisation steps.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cost::FlopCounter;
use crate::error::{Error, Result};
use crate::optim::{adam_update, AdamConfig, AdamState};
use crate::tensor::{PixelPair, Real, Tape, Tensor, Var};
use crate::vit::{cls_importance, ImageGeometry, Patch, ViTModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Dmi,
    Smi,
    Pri,
    FixedSelection,
}

impl Method {
    pub fn code(self) -> u8 {
        match self {
            Method::Dmi => 0,
            Method::Smi => 1,
            Method::Pri => 2,
            Method::FixedSelection => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Method::Dmi,
            1 => Method::Smi,
            2 => Method::Pri,
            3 => Method::FixedSelection,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Dmi => "dmi",
            Method::Smi => "smi",
            Method::Pri => "pri",
            Method::FixedSelection => "fixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().as_str() {
            "dmi" => Method::Dmi,
            "smi" => Method::Smi,
            "pri" => Method::Pri,
            "fixed" | "fixed-selection" => Method::FixedSelection,
            _ => return None,
        })
    }
}

/// Which patches a selection keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Criterion {
    /// Highest CLS attention.
    High,
    /// Lowest CLS attention.
    Low,
    /// Uniform random subset from the job's seeded stream.
    Random,
    /// Smallest row-major positions (the top rows of the grid).
    Top,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [Criterion::High, Criterion::Low, Criterion::Random, Criterion::Top];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::High => "high",
            Criterion::Low => "low",
            Criterion::Random => "random",
            Criterion::Top => "top",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().as_str() {
            "high" | "high-attention" => Criterion::High,
            "low" | "low-attention" => Criterion::Low,
            "random" => Criterion::Random,
            "top" | "fixed-top-region" => Criterion::Top,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub iterations: usize,
    /// Weight of the total-variation term.
    pub tv_weight: f64,
    pub adam: AdamConfig,
    pub method: Method,
    /// Division factor for progressive detachment.
    pub v: usize,
    /// `(iteration, ratio)` pruning points for sparse inversion.
    pub schedule: Vec<(usize, f64)>,
    pub criterion: Criterion,
    /// Iteration at which fixed selection picks its subset.
    pub select_at: usize,
    /// Fraction of the grid absent from a fixed-selection output.
    pub sparsity: f64,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            iterations: 4000,
            tv_weight: 1e-4,
            adam: AdamConfig::default(),
            method: Method::Pri,
            v: 4,
            schedule: vec![(50, 0.3), (100, 0.3), (200, 0.3), (300, 0.3)],
            criterion: Criterion::High,
            select_at: 50,
            sparsity: 0.76,
            seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self, num_patches: usize) -> Result<()> {
        let t = self.iterations;
        if t == 0 && self.method != Method::Dmi {
            return Err(Error::contract(format!("{} needs at least one iteration", self.method.name())));
        }
        if !(self.tv_weight >= 0.0 && self.tv_weight.is_finite()) {
            return Err(Error::contract("tv weight must be finite and non-negative"));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::contract("learning rate must be positive"));
        }
        match self.method {
            Method::Dmi => {}
            Method::Pri => {
                if self.v < 2 {
                    return Err(Error::contract(format!("division factor must be >= 2, got {}", self.v)));
                }
                if self.v > num_patches {
                    return Err(Error::contract(format!(
                        "division factor {} exceeds patch count {num_patches}",
                        self.v
                    )));
                }
                if t < self.v {
                    return Err(Error::contract(format!("iterations {t} < division factor {}", self.v)));
                }
            }
            Method::Smi => {
                let mut prev = None;
                for &(it, ratio) in &self.schedule {
                    if !(ratio > 0.0 && ratio < 1.0) {
                        return Err(Error::contract(format!("pruning ratio {ratio} not in (0, 1)")));
                    }
                    if it >= t {
                        return Err(Error::contract(format!("pruning iteration {it} not below T = {t}")));
                    }
                    if prev.is_some_and(|p| it <= p) {
                        return Err(Error::contract("pruning iterations must be strictly increasing"));
                    }
                    prev = Some(it);
                }
                let mut active = num_patches;
                for &(_, ratio) in &self.schedule {
                    active -= (ratio * active as f64).floor() as usize;
                }
                if active == 0 {
                    return Err(Error::contract("pruning schedule empties the active set"));
                }
            }
            Method::FixedSelection => {
                if self.select_at >= t {
                    return Err(Error::contract(format!(
                        "selection iteration {} not below T = {t}",
                        self.select_at
                    )));
                }
                if !(self.sparsity >= 0.0 && self.sparsity < 1.0) {
                    return Err(Error::contract(format!("sparsity {} not in [0, 1)", self.sparsity)));
                }
            }
        }
        Ok(())
    }

    /// Number of patches a fixed-selection run keeps: `⌈(1 − sparsity)·N⌉`.
    pub fn fixed_keep(&self, num_patches: usize) -> usize {
        let keep = ((1.0 - self.sparsity) * num_patches as f64 - 1e-9).ceil() as usize;
        keep.clamp(1, num_patches)
    }
}

/// Detachment points `k·⌊T/v⌋` for `k = 1..v−1`.
pub fn detachment_schedule(iterations: usize, v: usize) -> Result<Vec<usize>> {
    if v < 2 {
        return Err(Error::contract(format!("division factor must be >= 2, got {v}")));
    }
    if iterations < v {
        return Err(Error::contract(format!("iterations {iterations} < division factor {v}")));
    }
    let step = iterations / v;
    Ok((1..v).map(|k| k * step).collect())
}

/// The `k` positions with the largest scores, ties to the smaller position.
/// Returned in increasing position order.
pub fn select_top_k(scores: &[f64], positions: &[usize], k: usize) -> Result<Vec<usize>> {
    if scores.len() != positions.len() {
        return Err(Error::shape(format!(
            "{} scores for {} positions",
            scores.len(),
            positions.len()
        )));
    }
    if k > scores.len() {
        return Err(Error::contract(format!("cannot select {k} of {} patches", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(positions[a].cmp(&positions[b]))
    });
    let mut out: Vec<usize> = idx[..k].iter().map(|&i| positions[i]).collect();
    out.sort_unstable();
    Ok(out)
}

/// Positions kept when `keep` patches survive under `criterion`.
pub fn retain_by_criterion(
    criterion: Criterion,
    scores: &[f64],
    positions: &[usize],
    keep: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    match criterion {
        Criterion::High => select_top_k(scores, positions, keep),
        Criterion::Low => {
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            select_top_k(&neg, positions, keep)
        }
        Criterion::Random => {
            if keep > positions.len() {
                return Err(Error::contract(format!("cannot select {keep} of {} patches", positions.len())));
            }
            let mut out: Vec<usize> = sample(rng, positions.len(), keep).into_iter().map(|i| positions[i]).collect();
            out.sort_unstable();
            Ok(out)
        }
        Criterion::Top => {
            let zero = vec![0.0; positions.len()];
            select_top_k(&zero, positions, keep)
        }
    }
}

/// Adjacent pixel pairs (horizontal, vertical and both diagonals) whose
/// endpoints both lie in the given patches. `parts[i]` is the patch at
/// `positions[i]`.
pub fn tv_pairs(geom: &ImageGeometry, positions: &[usize]) -> Vec<PixelPair> {
    let n = geom.num_patches();
    let mut part_of = vec![usize::MAX; n];
    for (i, &p) in positions.iter().enumerate() {
        if p < n {
            part_of[p] = i;
        }
    }
    let (h, w, c, p) = (geom.height as isize, geom.width as isize, geom.channels, geom.patch as isize);
    let cols = geom.grid_cols() as isize;
    let locate = |y: isize, x: isize| -> Option<(usize, usize)> {
        if y < 0 || x < 0 || y >= h || x >= w {
            return None;
        }
        let pos = ((y / p) * cols + x / p) as usize;
        let part = part_of[pos];
        if part == usize::MAX {
            return None;
        }
        let offset = (((y % p) * p + x % p) as usize) * c;
        Some((part, offset))
    };
    let mut pairs = Vec::new();
    for &pos in positions {
        let (gr, gc) = geom.grid_of(pos);
        for dy in 0..p {
            for dx in 0..p {
                let y = gr as isize * p + dy;
                let x = gc as isize * p + dx;
                let a = locate(y, x).expect("pixel of an active patch");
                for (ny, nx) in [(y, x + 1), (y + 1, x), (y + 1, x + 1), (y + 1, x - 1)] {
                    if let Some(b) = locate(ny, nx) {
                        pairs.push(PixelPair { part_a: a.0, offset_a: a.1, part_b: b.0, offset_b: b.1 });
                    }
                }
            }
        }
    }
    pairs
}

/// Total variation of a patch set, restricted to pairs inside it.
pub fn tv_reg<T: Real>(patches: &[Patch<T>], geom: &ImageGeometry) -> Result<T> {
    if patches.is_empty() {
        return Err(Error::contract("total variation of an empty patch set"));
    }
    let positions: Vec<usize> = patches.iter().map(|p| p.position).collect();
    let pairs = tv_pairs(geom, &positions);
    let mut tape = Tape::new();
    let parts: Vec<Var> = patches.iter().map(|p| tape.constant(Tensor::row(p.pixels.clone()))).collect();
    let tv = tape.pair_norm_sum(&parts, &pairs, geom.channels)?;
    Ok(tape.value(tv).item())
}

/// Inversion loss and its gradient with respect to every patch.
#[derive(Clone, Debug)]
pub struct LossEval<T> {
    pub loss: T,
    pub cross_entropy: T,
    pub tv: T,
    /// One gradient per input patch, in input order.
    pub grads: Vec<Vec<T>>,
    pub counter: FlopCounter,
}

/// `CE(f(patches), label) + λ·TV(patches)` with input gradients.
pub fn inversion_loss<T: Real>(
    model: &ViTModel<T>,
    patches: &[Patch<T>],
    label: usize,
    tv_weight: f64,
) -> Result<LossEval<T>> {
    let positions: Vec<usize> = patches.iter().map(|p| p.position).collect();
    let pairs = tv_pairs(&model.config.geometry(), &positions);
    let pixels: Vec<&[T]> = patches.iter().map(|p| p.pixels.as_slice()).collect();
    loss_with_pairs(model, &positions, &pixels, &pairs, label, tv_weight)
}

fn loss_with_pairs<T: Real>(
    model: &ViTModel<T>,
    positions: &[usize],
    pixels: &[&[T]],
    pairs: &[PixelPair],
    label: usize,
    tv_weight: f64,
) -> Result<LossEval<T>> {
    if label >= model.config.classes {
        return Err(Error::Label { label, classes: model.config.classes });
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let leaves: Vec<Var> = pixels.iter().map(|px| tape.leaf(Tensor::row(px.to_vec()), true)).collect();
    let tokens: Vec<(usize, Var)> = positions.iter().copied().zip(leaves.iter().copied()).collect();
    let pass = model.forward_on(&mut tape, &bound, &tokens)?;
    let ce = tape.cross_entropy(pass.logits, &[label])?;
    let tv = tape.pair_norm_sum(&leaves, pairs, model.config.channels)?;
    let weighted = tape.scale(tv, T::lit(tv_weight));
    let loss = tape.add(ce, weighted)?;
    let mut grads = tape.backward(loss)?;
    Ok(LossEval {
        loss: tape.value(loss).item(),
        cross_entropy: tape.value(ce).item(),
        tv: tape.value(tv).item(),
        grads: leaves
            .iter()
            .map(|&v| grads.take(v).map(Tensor::into_data).expect("leaf requires grad"))
            .collect(),
        counter: tape.counter().clone(),
    })
}

/// A frozen inversion result: a subset of patches with their grid positions.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseImage {
    pub geometry: ImageGeometry,
    pub method: Method,
    /// Division factor of the producing run (1 for single-output methods).
    pub v: usize,
    /// Detachment index `1..=v` for progressive detachment, 0 otherwise.
    pub k: usize,
    pub label: usize,
    pub seed: u64,
    /// Completed steps when the pixels were frozen.
    pub iteration: usize,
    /// Sorted by increasing position.
    pub patches: Vec<Patch<f32>>,
}

impl SparseImage {
    pub fn positions(&self) -> Vec<usize> {
        self.patches.iter().map(|p| p.position).collect()
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.patches.len() as f64 / self.geometry.num_patches() as f64
    }
}

/// One active patch with its own optimiser state.
#[derive(Clone, Debug)]
pub struct ActivePatch {
    pub position: usize,
    pub pixels: Vec<f32>,
    adam: AdamState<f32>,
}

/// State handed to an observer after every completed step (and once before
/// the first).
pub struct Progress<'a> {
    pub completed: usize,
    pub active: &'a [ActivePatch],
    pub emitted: &'a [SparseImage],
}

#[derive(Clone, Debug)]
pub struct InversionOutcome {
    pub images: Vec<SparseImage>,
    /// The full random initialisation, position order.
    pub init: Vec<Patch<f32>>,
    /// Active patches during each step.
    pub active_trace: Vec<usize>,
    pub loss_trace: Vec<f32>,
    /// Patches still active right after each detachment, in detachment order.
    pub residuals: Vec<Vec<Patch<f32>>>,
    /// Forward units of the optimisation steps.
    pub counter: FlopCounter,
    /// Forward units of importance scoring passes.
    pub scoring: FlopCounter,
}

/// Seeded i.i.d. standard-normal pixels for every grid position.
pub fn random_init(geom: &ImageGeometry, seed: u64) -> Vec<Patch<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..geom.num_patches())
        .map(|position| Patch {
            position,
            pixels: (0..geom.patch_len())
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z as f32
                })
                .collect(),
        })
        .collect()
}

fn snapshot(active: &[ActivePatch]) -> Vec<Patch<f32>> {
    let mut out: Vec<Patch<f32>> = active
        .iter()
        .map(|a| Patch { position: a.position, pixels: a.pixels.clone() })
        .collect();
    out.sort_by_key(|p| p.position);
    out
}

/// Run the inversion selected by `cfg.method`.
pub fn invert(model: &ViTModel<f32>, label: usize, cfg: &InversionConfig) -> Result<InversionOutcome> {
    invert_observed(model, label, cfg, &mut |_| {})
}

pub fn dmi_invert(model: &ViTModel<f32>, label: usize, cfg: &InversionConfig) -> Result<InversionOutcome> {
    invert(model, label, &InversionConfig { method: Method::Dmi, ..cfg.clone() })
}

pub fn smi_invert(model: &ViTModel<f32>, label: usize, cfg: &InversionConfig) -> Result<InversionOutcome> {
    invert(model, label, &InversionConfig { method: Method::Smi, ..cfg.clone() })
}

pub fn fixed_selection_invert(model: &ViTModel<f32>, label: usize, cfg: &InversionConfig) -> Result<InversionOutcome> {
    invert(model, label, &InversionConfig { method: Method::FixedSelection, ..cfg.clone() })
}

pub fn pri_invert(model: &ViTModel<f32>, label: usize, cfg: &InversionConfig) -> Result<InversionOutcome> {
    invert(model, label, &InversionConfig { method: Method::Pri, ..cfg.clone() })
}

struct Run<'a> {
    model: &'a ViTModel<f32>,
    cfg: &'a InversionConfig,
    label: usize,
    geom: ImageGeometry,
    active: Vec<ActivePatch>,
    emitted: Vec<SparseImage>,
    scoring: FlopCounter,
    rng: ChaCha8Rng,
}

impl Run<'_> {
    fn scores(&mut self) -> Result<Vec<f64>> {
        let patches: Vec<Patch<f32>> = self
            .active
            .iter()
            .map(|a| Patch { position: a.position, pixels: a.pixels.clone() })
            .collect();
        let out = self.model.forward(&patches)?;
        self.scoring.merge(&out.counter);
        let layer = self.model.config.importance_layer_index();
        Ok(cls_importance(&out.attention, patches.len(), layer)?
            .into_iter()
            .map(f64::from)
            .collect())
    }

    fn needs_scores(&self, criterion: Criterion) -> bool {
        matches!(criterion, Criterion::High | Criterion::Low)
    }

    /// Keep `keep` active patches chosen by `criterion`; return the removed ones.
    fn retain(&mut self, criterion: Criterion, keep: usize) -> Result<Vec<ActivePatch>> {
        let positions: Vec<usize> = self.active.iter().map(|a| a.position).collect();
        let scores = if self.needs_scores(criterion) { self.scores()? } else { vec![0.0; positions.len()] };
        let kept = retain_by_criterion(criterion, &scores, &positions, keep, &mut self.rng)?;
        let (stay, gone): (Vec<ActivePatch>, Vec<ActivePatch>) =
            self.active.drain(..).partition(|a| kept.binary_search(&a.position).is_ok());
        self.active = stay;
        Ok(gone)
    }

    /// Remove and return the `k` most important active patches.
    fn detach_top(&mut self, k: usize) -> Result<Vec<ActivePatch>> {
        let positions: Vec<usize> = self.active.iter().map(|a| a.position).collect();
        let scores = self.scores()?;
        let chosen = select_top_k(&scores, &positions, k)?;
        let (gone, stay): (Vec<ActivePatch>, Vec<ActivePatch>) =
            self.active.drain(..).partition(|a| chosen.binary_search(&a.position).is_ok());
        self.active = stay;
        Ok(gone)
    }

    fn emit(&mut self, patches: Vec<Patch<f32>>, k: usize, iteration: usize) {
        let v = if self.cfg.method == Method::Pri { self.cfg.v } else { 1 };
        self.emitted.push(SparseImage {
            geometry: self.geom,
            method: self.cfg.method,
            v,
            k,
            label: self.label,
            seed: self.cfg.seed,
            iteration,
            patches,
        });
    }
}

/// [`invert`] with a callback after every completed step.
pub fn invert_observed(
    model: &ViTModel<f32>,
    label: usize,
    cfg: &InversionConfig,
    observer: &mut dyn FnMut(&Progress<'_>),
) -> Result<InversionOutcome> {
    let geom = model.config.geometry();
    let n = geom.num_patches();
    cfg.validate(n)?;
    if label >= model.config.classes {
        return Err(Error::Label { label, classes: model.config.classes });
    }
    let t = cfg.iterations;
    let init = random_init(&geom, cfg.seed);
    let detach_at = if cfg.method == Method::Pri { detachment_schedule(t, cfg.v)? } else { Vec::new() };
    let top_k = if cfg.method == Method::Pri { n / cfg.v } else { 0 };

    let mut run = Run {
        model,
        cfg,
        label,
        geom,
        active: init
            .iter()
            .map(|p| ActivePatch {
                position: p.position,
                pixels: p.pixels.clone(),
                adam: AdamState::new(p.pixels.len(), cfg.adam),
            })
            .collect(),
        emitted: Vec::new(),
        scoring: FlopCounter::default(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15),
    };
    let mut counter = FlopCounter::default();
    let mut active_trace = Vec::with_capacity(t);
    let mut loss_trace = Vec::with_capacity(t);
    let mut residuals = Vec::new();
    let mut pairs = tv_pairs(&geom, &init.iter().map(|p| p.position).collect::<Vec<_>>());

    observer(&Progress { completed: 0, active: &run.active, emitted: &run.emitted });
    for step in 0..t {
        let mut changed = false;
        match cfg.method {
            Method::Dmi => {}
            Method::Pri => {
                if let Some(k) = detach_at.iter().position(|&at| at == step) {
                    let detached = run.detach_top(top_k)?;
                    run.emit(snapshot(&detached), k + 1, step);
                    residuals.push(snapshot(&run.active));
                    changed = true;
                }
            }
            Method::Smi => {
                if let Some(&(_, ratio)) = cfg.schedule.iter().find(|s| s.0 == step) {
                    let active = run.active.len();
                    let remove = (ratio * active as f64).floor() as usize;
                    if remove >= active {
                        return Err(Error::contract("pruning schedule empties the active set"));
                    }
                    if remove > 0 {
                        run.retain(cfg.criterion, active - remove)?;
                        changed = true;
                    }
                }
            }
            Method::FixedSelection => {
                if step == cfg.select_at {
                    run.retain(cfg.criterion, cfg.fixed_keep(n))?;
                    changed = true;
                }
            }
        }
        if changed {
            let positions: Vec<usize> = run.active.iter().map(|a| a.position).collect();
            pairs = tv_pairs(&geom, &positions);
        }

        let positions: Vec<usize> = run.active.iter().map(|a| a.position).collect();
        let pixels: Vec<&[f32]> = run.active.iter().map(|a| a.pixels.as_slice()).collect();
        let eval = loss_with_pairs(model, &positions, &pixels, &pairs, label, cfg.tv_weight)?;
        if !eval.loss.is_finite() {
            return Err(Error::NonFinite { iteration: step + 1, value: eval.loss as f64 });
        }
        counter.merge(&eval.counter);
        for (slot, g) in run.active.iter_mut().zip(&eval.grads) {
            adam_update(&mut slot.pixels, g, &mut slot.adam);
        }
        active_trace.push(run.active.len());
        loss_trace.push(eval.loss);
        observer(&Progress { completed: step + 1, active: &run.active, emitted: &run.emitted });
    }

    let final_k = if cfg.method == Method::Pri { cfg.v } else { 0 };
    let rest = snapshot(&run.active);
    run.emit(rest, final_k, t);
    Ok(InversionOutcome {
        images: run.emitted,
        init,
        active_trace,
        loss_trace,
        residuals,
        counter,
        scoring: run.scoring,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(detachment_schedule(4000, 4).unwrap(), vec![1000, 2000, 3000]);
        assert_eq!(detachment_schedule(10, 3).unwrap(), vec![3, 6]);
        assert_eq!(detachment_schedule(9, 2).unwrap(), vec![4]);
        assert!(detachment_schedule(3, 4).is_err());
        assert!(detachment_schedule(10, 1).is_err());
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(select_top_k(&[0.1, 0.9, 0.5], &[0, 1, 2], 2).unwrap(), vec![1, 2]);
        assert_eq!(select_top_k(&[0.3; 4], &[7, 2, 9, 4], 2).unwrap(), vec![2, 4]);
        assert_eq!(select_top_k(&[0.2, 0.1], &[3, 5], 2).unwrap(), vec![3, 5]);
        assert!(select_top_k(&[0.2], &[3], 2).is_err());
    }

    #[test]
    fn tv_two_by_two() {
        let geom = ImageGeometry { height: 2, width: 2, channels: 1, patch: 2 };
        let patch = Patch { position: 0, pixels: vec![0.0f64, 1.0, 0.0, 1.0] };
        assert_eq!(tv_reg(&[patch], &geom).unwrap(), 4.0);
    }

    #[test]
    fn tv_constant_image_is_zero() {
        let geom = ImageGeometry { height: 8, width: 8, channels: 3, patch: 4 };
        let patches: Vec<Patch<f64>> = (0..4).map(|p| Patch { position: p, pixels: vec![0.7; 48] }).collect();
        assert_eq!(tv_reg(&patches, &geom).unwrap(), 0.0);
    }

    #[test]
    fn tv_pairs_across_patch_boundary() {
        let geom = ImageGeometry { height: 2, width: 4, channels: 1, patch: 2 };
        // Each 2x2 patch has 6 internal pairs; the shared column edge adds
        // 2 horizontal and 2 diagonal pairs.
        assert_eq!(tv_pairs(&geom, &[0]).len(), 6);
        assert_eq!(tv_pairs(&geom, &[0, 1]).len(), 16);
    }

    #[test]
    fn fixed_keep_counts() {
        let cfg = InversionConfig { sparsity: 0.76, ..Default::default() };
        assert_eq!(cfg.fixed_keep(16), 4);
        let cfg = InversionConfig { sparsity: 0.75, ..Default::default() };
        assert_eq!(cfg.fixed_keep(16), 4);
    }

    #[test]
    fn config_constraints() {
        let mut cfg = InversionConfig { iterations: 400, ..Default::default() };
        cfg.v = 1;
        assert!(cfg.validate(16).is_err());
        cfg.v = 17;
        assert!(cfg.validate(16).is_err());
        cfg.v = 4;
        assert!(cfg.validate(16).is_ok());
        let smi = InversionConfig { method: Method::Smi, iterations: 300, ..Default::default() };
        assert!(smi.validate(16).is_err());
        let smi = InversionConfig {
            method: Method::Smi,
            iterations: 400,
            schedule: vec![(100, 0.3), (50, 0.3)],
            ..Default::default()
        };
        assert!(smi.validate(16).is_err());
        let dense = InversionConfig { method: Method::Dmi, iterations: 0, ..Default::default() };
        assert!(dense.validate(16).is_ok());
    }

    #[test]
    fn random_retention_is_seeded() {
        let scores = vec![0.0; 10];
        let positions: Vec<usize> = (0..10).collect();
        let a = retain_by_criterion(Criterion::Random, &scores, &positions, 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = retain_by_criterion(Criterion::Random, &scores, &positions, 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn high_and_low_disjoint() {
        let scores = [0.3, 0.1, 0.8, 0.6, 0.05, 0.4];
        let positions: Vec<usize> = (0..6).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hi = retain_by_criterion(Criterion::High, &scores, &positions, 3, &mut rng).unwrap();
        let lo = retain_by_criterion(Criterion::Low, &scores, &positions, 3, &mut rng).unwrap();
        assert_eq!(hi, vec![2, 3, 5]);
        assert_eq!(lo, vec![0, 1, 4]);
        let top = retain_by_criterion(Criterion::Top, &scores, &positions, 4, &mut rng).unwrap();
        assert_eq!(top, vec![0, 1, 2, 3]);
    }
}
