//! Downstream checks on inverted images: a procedural shape dataset, data-free
//! distillation, teacher-confidence statistics, one-class distillation and the
//! patch-selection comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::{invert, Criterion, InversionConfig, Method, SparseImage};
use crate::optim::{SgdConfig, SgdState};
use crate::tensor::{softmax_slice, Tape, Tensor, Var};
use crate::vit::{argmax, patchify, ImageGeometry, Patch, ViTModel};

/// Shapes in class order; the dataset uses the first `classes` of them.
pub const SHAPES: [&str; 8] = ["disk", "bar", "cross", "ring", "square", "frame", "triangle", "x"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { classes: 4, train_per_class: 400, val_per_class: 100, noise: 0.1, seed: 42 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub config: DatasetConfig,
    pub geometry: ImageGeometry,
    /// `[H, W, C]` images; the first `classes·train_per_class` are training data.
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

impl ToyDataset {
    pub fn geometry(&self) -> ImageGeometry {
        self.geometry
    }

    fn train_len(&self) -> usize {
        self.config.classes * self.config.train_per_class
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index < self.train_len() {
            Split::Train
        } else {
            Split::Val
        }
    }

    pub fn indices(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.train_len(),
            Split::Val => self.train_len()..self.images.len(),
        }
    }

    /// `(patches, label)` pairs of one split under `geom`.
    pub fn patch_split(&self, split: Split, geom: &ImageGeometry) -> Result<Vec<(Vec<Patch<f32>>, usize)>> {
        self.indices(split)
            .map(|i| Ok((patchify(&self.images[i], geom)?, self.labels[i])))
            .collect()
    }
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    let dist = (dx * dx + dy * dy).sqrt();
    match shape {
        0 => dist <= r,
        1 => ay <= 0.3 * r && ax <= r,
        2 => (ax <= 0.25 * r && ay <= r) || (ay <= 0.25 * r && ax <= r),
        3 => dist <= r && dist >= 0.6 * r,
        4 => ax.max(ay) <= 0.8 * r,
        5 => ax.max(ay) <= 0.85 * r && ax.max(ay) >= 0.5 * r,
        6 => dy >= -r && dy <= r && ax <= (dy + r) * 0.5,
        _ => (ax - ay).abs() <= 0.25 * r && ax.max(ay) <= r,
    }
}

fn render(geom: &ImageGeometry, shape: usize, noise: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (h, w, c) = (geom.height, geom.width, geom.channels);
    let size = h.min(w) as f64;
    let cx = w as f64 * 0.5 + rng.random_range(-0.15..0.15) * size;
    let cy = h as f64 * 0.5 + rng.random_range(-0.15..0.15) * size;
    let r = rng.random_range(0.22..0.34) * size;
    let bg: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..-0.3)).collect();
    let fg: Vec<f64> = (0..c).map(|_| rng.random_range(0.3..1.0)).collect();
    let normal = rand_distr::Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let hit = inside(shape, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r);
            for ch in 0..c {
                let base = if hit { fg[ch] } else { bg[ch] };
                let eps: f64 = rng.sample(normal);
                data.push((base + eps) as f32);
            }
        }
    }
    Tensor::new(vec![h, w, c], data).expect("sized above")
}

/// Class-balanced procedural shapes, deterministic per seed.
pub fn gen_toy_dataset(cfg: &DatasetConfig, geom: &ImageGeometry) -> Result<ToyDataset> {
    if cfg.classes < 2 || cfg.classes > SHAPES.len() {
        return Err(Error::contract(format!(
            "toy dataset supports 2..={} classes, got {}",
            SHAPES.len(),
            cfg.classes
        )));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::contract("noise level must be finite and non-negative"));
    }
    let total = cfg.classes * (cfg.train_per_class + cfg.val_per_class);
    let (images, labels): (Vec<_>, Vec<_>) = (0..total)
        .map(|i| {
            let label = i % cfg.classes;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            (render(geom, label, cfg.noise, &mut rng), label)
        })
        .unzip();
    Ok(ToyDataset { config: cfg.clone(), geometry: *geom, images, labels })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub temperature: f64,
    pub sgd: SgdConfig,
    pub batch_size: usize,
    /// Passes over the synthetic set; 1 uses every batch exactly once.
    pub epochs: usize,
    /// Stop after this many batches when set.
    pub max_batches: Option<usize>,
    /// Seed of the fresh student initialisation and batch order.
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { temperature: 1.0, sgd: SgdConfig::default(), batch_size: 16, epochs: 1, max_batches: None, seed: 11 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::contract(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub batches: usize,
    pub batch_loss: Vec<f64>,
    pub val_accuracy: f64,
}

/// Train `student` to match the teacher's softened outputs on each sparse
/// image's own token set.
pub fn distill(
    teacher: &ViTModel<f32>,
    mut student: ViTModel<f32>,
    images: &[SparseImage],
    cfg: &DistillConfig,
    val: &[(Vec<Patch<f32>>, usize)],
) -> Result<(ViTModel<f32>, DistillReport)> {
    use rand::seq::SliceRandom;

    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::contract("distillation needs at least one image"));
    }
    if teacher.config.geometry() != student.config.geometry() || teacher.config.classes != student.config.classes {
        return Err(Error::contract("teacher and student must share input geometry and classes"));
    }
    let tau = cfg.temperature as f32;
    let targets: Vec<Vec<f32>> = images
        .par_iter()
        .map(|img| {
            let logits = teacher.forward(&img.patches)?.logits;
            Ok(softmax_slice(&logits.iter().map(|z| z / tau).collect::<Vec<_>>()))
        })
        .collect::<Result<_>>()?;

    let mut sgd = SgdState::<f32>::new(student.params().len(), cfg.sgd);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd157_111d);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let limit = cfg.max_batches.unwrap_or(usize::MAX);
    let mut batch_loss = Vec::new();

    'outer: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if batch_loss.len() >= limit {
                break 'outer;
            }
            let per_sample: Vec<Result<(Vec<Vec<f32>>, f64)>> = chunk
                .par_iter()
                .map(|&i| {
                    let mut tape = Tape::new();
                    let bound = student.bind(&mut tape, true);
                    let tokens: Vec<(usize, Var)> = images[i]
                        .patches
                        .iter()
                        .map(|p| (p.position, tape.constant(Tensor::row(p.pixels.clone()))))
                        .collect();
                    let pass = student.forward_on(&mut tape, &bound, &tokens)?;
                    let loss = tape.kl_div(pass.logits, &targets[i], tau)?;
                    let value = tape.value(loss).item() as f64;
                    let mut grads = tape.backward(loss)?;
                    let g = bound
                        .vars()
                        .iter()
                        .map(|&v| grads.take(v).map(Tensor::into_data).unwrap_or_default())
                        .collect();
                    Ok((g, value))
                })
                .collect();
            let mut sum: Vec<Vec<f32>> = student.params().iter().map(|p| vec![0.0; p.numel()]).collect();
            let mut loss = 0.0;
            for item in per_sample {
                let (g, l) = item?;
                loss += l;
                for (acc, gi) in sum.iter_mut().zip(g) {
                    for (a, x) in acc.iter_mut().zip(gi) {
                        *a += x;
                    }
                }
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite { iteration: batch_loss.len() + 1, value: loss });
            }
            let inv = 1.0 / chunk.len() as f32;
            for (slot, (param, g)) in student.params_mut().into_iter().zip(sum).enumerate() {
                let g = Tensor::new(param.shape().to_vec(), g.into_iter().map(|x| x * inv).collect())?;
                sgd.step(slot, param, &g)?;
            }
            batch_loss.push(loss / chunk.len() as f64);
        }
    }
    let val_accuracy = crate::vit::accuracy(&student, val)?;
    Ok((student, DistillReport { batches: batch_loss.len(), batch_loss, val_accuracy }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceStats {
    pub confidences: Vec<f64>,
    /// 21 edges of 20 equal bins over [0, 1].
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub median: f64,
}

pub const CONFIDENCE_BINS: usize = 20;

impl ConfidenceStats {
    pub fn from_confidences(confidences: Vec<f64>) -> Result<Self> {
        if confidences.is_empty() {
            return Err(Error::contract("confidence statistics need at least one image"));
        }
        let mut counts = vec![0usize; CONFIDENCE_BINS];
        for &c in &confidences {
            let bin = ((c * CONFIDENCE_BINS as f64).floor().max(0.0) as usize).min(CONFIDENCE_BINS - 1);
            counts[bin] += 1;
        }
        let mean = confidences.iter().sum::<f64>() / confidences.len() as f64;
        let mut sorted = confidences.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 { sorted[mid] } else { 0.5 * (sorted[mid - 1] + sorted[mid]) };
        Ok(Self {
            bin_edges: (0..=CONFIDENCE_BINS).map(|i| i as f64 / CONFIDENCE_BINS as f64).collect(),
            confidences,
            counts,
            mean,
            median,
        })
    }
}

/// Teacher maximum softmax probability of each patch set.
pub fn confidence_stats(teacher: &ViTModel<f32>, sets: &[Vec<Patch<f32>>]) -> Result<ConfidenceStats> {
    let values: Vec<f64> = sets
        .par_iter()
        .map(|s| {
            let p = teacher.predict_probs(s)?;
            Ok(p.iter().cloned().fold(0.0f32, f32::max) as f64)
        })
        .collect::<Result<_>>()?;
    ConfidenceStats::from_confidences(values)
}

/// Teacher probability of `label` on one patch set.
pub fn class_confidence(teacher: &ViTModel<f32>, patches: &[Patch<f32>], label: usize) -> Result<f64> {
    let p = teacher.predict_probs(patches)?;
    p.get(label)
        .map(|&x| x as f64)
        .ok_or(Error::Label { label, classes: p.len() })
}

/// Synthesise `count` images with `cfg`. Trajectory `j` targets label
/// `labels[j % labels.len()]` with seed `seed_base + j`; progressive
/// detachment needs `count / v` trajectories, the other methods `count`.
pub fn synthesize(
    teacher: &ViTModel<f32>,
    cfg: &InversionConfig,
    count: usize,
    labels: &[usize],
    seed_base: u64,
) -> Result<Vec<SparseImage>> {
    if labels.is_empty() {
        return Err(Error::contract("no target labels"));
    }
    let per = if cfg.method == Method::Pri { cfg.v.max(1) } else { 1 };
    let trajectories = count.div_ceil(per);
    let runs: Vec<Vec<SparseImage>> = (0..trajectories)
        .into_par_iter()
        .map(|j| {
            let job = InversionConfig { seed: seed_base + j as u64, ..cfg.clone() };
            Ok(invert(teacher, labels[j % labels.len()], &job)?.images)
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<SparseImage> = runs.into_iter().flatten().collect();
    out.truncate(count);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub inversion: InversionConfig,
    pub distill: DistillConfig,
    /// Synthetic images per student.
    pub images: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneClassReport {
    pub target: usize,
    pub method: Method,
    /// `confusion[true][predicted]` on the validation split.
    pub confusion: Vec<Vec<usize>>,
    pub per_class_accuracy: Vec<f64>,
    pub off_target_accuracy: f64,
    /// Fraction of off-target inputs the student assigns to the target.
    pub off_target_to_target: f64,
}

pub fn confusion_matrix(model: &ViTModel<f32>, data: &[(Vec<Patch<f32>>, usize)]) -> Result<Vec<Vec<usize>>> {
    let c = model.config.classes;
    let preds: Vec<usize> = data
        .par_iter()
        .map(|(p, _)| Ok(argmax(&model.forward(p)?.logits)))
        .collect::<Result<_>>()?;
    let mut m = vec![vec![0usize; c]; c];
    for ((_, y), p) in data.iter().zip(preds) {
        if *y >= c {
            return Err(Error::Label { label: *y, classes: c });
        }
        m[*y][p] += 1;
    }
    Ok(m)
}

/// Distil a fresh student from images of a single class and evaluate it on
/// every class.
pub fn one_class_experiment(
    teacher: &ViTModel<f32>,
    target: usize,
    exp: &ExperimentConfig,
    val: &[(Vec<Patch<f32>>, usize)],
) -> Result<OneClassReport> {
    let c = teacher.config.classes;
    if target >= c {
        return Err(Error::Label { label: target, classes: c });
    }
    let images = synthesize(teacher, &exp.inversion, exp.images, &[target], exp.seed)?;
    let student = ViTModel::init(teacher.config.clone(), exp.distill.seed)?;
    let (student, _) = distill(teacher, student, &images, &exp.distill, val)?;
    let confusion = confusion_matrix(&student, val)?;
    let per_class_accuracy: Vec<f64> = confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n: usize = row.iter().sum();
            if n == 0 { 0.0 } else { row[i] as f64 / n as f64 }
        })
        .collect();
    let off: Vec<usize> = (0..c).filter(|&i| i != target).collect();
    let off_target_accuracy = off.iter().map(|&i| per_class_accuracy[i]).sum::<f64>() / off.len() as f64;
    let off_total: usize = off.iter().map(|&i| confusion[i].iter().sum::<usize>()).sum();
    let off_hits: usize = off.iter().map(|&i| confusion[i][target]).sum();
    Ok(OneClassReport {
        target,
        method: exp.inversion.method,
        confusion,
        per_class_accuracy,
        off_target_accuracy,
        off_target_to_target: if off_total == 0 { 0.0 } else { off_hits as f64 / off_total as f64 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub criterion: Criterion,
    pub kept_patches: usize,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionStudy {
    pub sparsity: f64,
    pub rows: Vec<SelectionRow>,
    pub spread: f64,
}

/// Fixed-subset inversion under each criterion, followed by distillation.
pub fn selection_study(
    teacher: &ViTModel<f32>,
    criteria: &[Criterion],
    sparsity: f64,
    exp: &ExperimentConfig,
    val: &[(Vec<Patch<f32>>, usize)],
) -> Result<SelectionStudy> {
    let labels: Vec<usize> = (0..teacher.config.classes).collect();
    let mut rows = Vec::with_capacity(criteria.len());
    for &criterion in criteria {
        let inv = InversionConfig { method: Method::FixedSelection, criterion, sparsity, ..exp.inversion.clone() };
        let images = synthesize(teacher, &inv, exp.images, &labels, exp.seed)?;
        let student = ViTModel::init(teacher.config.clone(), exp.distill.seed)?;
        let (_, report) = distill(teacher, student, &images, &exp.distill, val)?;
        rows.push(SelectionRow {
            criterion,
            kept_patches: inv.fixed_keep(teacher.config.num_patches()),
            val_accuracy: report.val_accuracy,
        });
    }
    let hi = rows.iter().map(|r| r.val_accuracy).fold(f64::NEG_INFINITY, f64::max);
    let lo = rows.iter().map(|r| r.val_accuracy).fold(f64::INFINITY, f64::min);
    Ok(SelectionStudy { sparsity, spread: if rows.is_empty() { 0.0 } else { hi - lo }, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::ViTConfig;

    #[test]
    fn dataset_is_deterministic_and_balanced() {
        let cfg = DatasetConfig { train_per_class: 5, val_per_class: 2, ..Default::default() };
        let geom = ViTConfig::default().geometry();
        let a = gen_toy_dataset(&cfg, &geom).unwrap();
        let b = gen_toy_dataset(&cfg, &geom).unwrap();
        assert_eq!(a, b);
        for class in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&y| y == class).count(), 7);
        }
        assert_eq!(a.indices(Split::Val).len(), 8);
        assert!(gen_toy_dataset(&DatasetConfig { classes: 9, ..cfg.clone() }, &geom).is_err());
    }

    #[test]
    fn histogram_counts_and_median() {
        let s = ConfidenceStats::from_confidences(vec![0.25, 1.0, 0.5, 0.26]).unwrap();
        assert_eq!(s.counts.iter().sum::<usize>(), 4);
        assert_eq!(s.counts[5], 2);
        assert_eq!(s.counts[19], 1);
        assert_eq!(s.median, 0.38);
        assert_eq!(s.bin_edges.len(), 21);
    }

    #[test]
    fn uniform_teacher_confidence() {
        let cfg = ViTConfig::default();
        let mut model = ViTModel::<f32>::init(cfg.clone(), 1).unwrap();
        model.head_w = Tensor::zeros(&[cfg.dim, cfg.classes]);
        let sets = vec![vec![Patch { position: 3, pixels: vec![0.5; cfg.patch_len()] }]];
        let s = confidence_stats(&model, &sets).unwrap();
        assert!((s.confidences[0] - 0.25).abs() < 1e-7);
    }
}
