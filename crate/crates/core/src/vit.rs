//! A small pre-norm Vision Transformer that runs on arbitrary subsets of
//! patch positions.
//!
//! Each patch carries its original grid position; the learned positional
//! table is indexed by that position, so dropping patches never shifts the
//! embedding of the ones that remain. Row 0 of the table belongs to the CLS
//! token.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{ffn_layer_units, sa_layer_units, CostTerm, FlopCounter};
use crate::error::{Error, Result};
use crate::harness::ToyDataset;
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{softmax_slice, Real, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub classes: usize,
    /// Layer whose CLS attention scores patches; `None` is the last layer.
    pub importance_layer: Option<usize>,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            channels: 3,
            patch_size: 8,
            dim: 64,
            layers: 4,
            heads: 4,
            classes: 4,
            importance_layer: None,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_height == 0 || self.image_width == 0 || self.channels == 0 {
            return Err(Error::contract("image geometry must be positive"));
        }
        if self.image_height % p != 0 || self.image_width % p != 0 {
            return Err(Error::contract(format!(
                "patch size {p} must divide {}x{}",
                self.image_height, self.image_width
            )));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::contract(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 || self.classes < 2 {
            return Err(Error::contract("need at least one layer and two classes"));
        }
        if let Some(l) = self.importance_layer {
            if l >= self.layers {
                return Err(Error::contract(format!(
                    "importance layer {l} out of range for {} layers",
                    self.layers
                )));
            }
        }
        Ok(())
    }

    pub fn geometry(&self) -> ImageGeometry {
        ImageGeometry {
            height: self.image_height,
            width: self.image_width,
            channels: self.channels,
            patch: self.patch_size,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.geometry().num_patches()
    }

    pub fn patch_len(&self) -> usize {
        self.geometry().patch_len()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.dim
    }

    pub fn importance_layer_index(&self) -> usize {
        self.importance_layer.unwrap_or(self.layers - 1)
    }
}

/// Pixel layout shared by images, patches and sparse-image files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl ImageGeometry {
    pub fn grid_rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn grid_cols(&self) -> usize {
        self.width / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Grid (row, col) of a row-major patch position.
    pub fn grid_of(&self, position: usize) -> (usize, usize) {
        (position / self.grid_cols(), position % self.grid_cols())
    }
}

/// One `P×P×C` pixel block (row-major, channels last) at a grid position.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch<T> {
    pub position: usize,
    pub pixels: Vec<T>,
}

/// Split an `[H, W, C]` image into row-major patches.
pub fn patchify<T: Real>(image: &Tensor<T>, geom: &ImageGeometry) -> Result<Vec<Patch<T>>> {
    if image.shape() != [geom.height, geom.width, geom.channels] {
        return Err(Error::shape(format!(
            "image {:?} does not match {}x{}x{}",
            image.shape(),
            geom.height,
            geom.width,
            geom.channels
        )));
    }
    if geom.patch == 0 || geom.height % geom.patch != 0 || geom.width % geom.patch != 0 {
        return Err(Error::shape(format!("patch size {} does not tile the image", geom.patch)));
    }
    let (p, c, w) = (geom.patch, geom.channels, geom.width);
    let src = image.data();
    let patches = (0..geom.num_patches())
        .map(|pos| {
            let (gr, gc) = geom.grid_of(pos);
            let mut pixels = Vec::with_capacity(geom.patch_len());
            for y in 0..p {
                let start = ((gr * p + y) * w + gc * p) * c;
                pixels.extend_from_slice(&src[start..start + p * c]);
            }
            Patch { position: pos, pixels }
        })
        .collect();
    Ok(patches)
}

/// Reassemble a full patch set (any order) into an `[H, W, C]` image.
pub fn unpatchify<T: Real>(patches: &[Patch<T>], geom: &ImageGeometry) -> Result<Tensor<T>> {
    let n = geom.num_patches();
    let mut seen = vec![false; n];
    let mut out = vec![T::zero(); geom.height * geom.width * geom.channels];
    for patch in patches {
        if patch.position >= n || seen[patch.position] || patch.pixels.len() != geom.patch_len() {
            return Err(Error::shape(format!("bad patch at position {}", patch.position)));
        }
        seen[patch.position] = true;
        write_patch(&mut out, geom, patch.position, &patch.pixels);
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::shape("unpatchify needs every grid position"));
    }
    Tensor::new(vec![geom.height, geom.width, geom.channels], out)
}

pub(crate) fn write_patch<T: Copy>(dst: &mut [T], geom: &ImageGeometry, position: usize, pixels: &[T]) {
    let (p, c, w) = (geom.patch, geom.channels, geom.width);
    let (gr, gc) = geom.grid_of(position);
    for y in 0..p {
        let start = ((gr * p + y) * w + gc * p) * c;
        dst[start..start + p * c].copy_from_slice(&pixels[y * p * c..(y + 1) * p * c]);
    }
}

/// Post-softmax CLS attention rows, `[layer][head][token]`, token 0 = CLS.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord<T> {
    pub layers: Vec<Vec<Vec<T>>>,
}

/// Importance of each active patch: mean over heads of the CLS→patch
/// attention at `layer`, CLS→CLS excluded and not renormalised.
pub fn cls_importance<T: Real>(record: &AttentionRecord<T>, active: usize, layer: usize) -> Result<Vec<T>> {
    let heads = record
        .layers
        .get(layer)
        .ok_or_else(|| Error::contract(format!("no attention recorded for layer {layer}")))?;
    if heads.is_empty() {
        return Err(Error::contract("attention record has no heads"));
    }
    if let Some(row) = heads.iter().find(|r| r.len() != active + 1) {
        return Err(Error::contract(format!(
            "attention row of length {} for {} active patches",
            row.len(),
            active
        )));
    }
    let h = T::from_usize(heads.len()).unwrap();
    Ok((0..active)
        .map(|j| heads.iter().map(|row| row[j + 1]).sum::<T>() / h)
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub qkv_w: Tensor<T>,
    pub qkv_b: Tensor<T>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

impl<T: Real> Block<T> {
    fn params(&self) -> [&Tensor<T>; 12] {
        [
            &self.ln1_g, &self.ln1_b, &self.qkv_w, &self.qkv_b, &self.proj_w, &self.proj_b,
            &self.ln2_g, &self.ln2_b, &self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b,
        ]
    }

    fn params_mut(&mut self) -> [&mut Tensor<T>; 12] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.qkv_w, &mut self.qkv_b,
            &mut self.proj_w, &mut self.proj_b, &mut self.ln2_g, &mut self.ln2_b,
            &mut self.fc1_w, &mut self.fc1_b, &mut self.fc2_w, &mut self.fc2_b,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTModel<T> {
    pub config: ViTConfig,
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    /// `[N+1, d]`; row 0 is the CLS slot, row `1+p` grid position `p`.
    pub pos: Tensor<T>,
    pub cls: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub norm_g: Tensor<T>,
    pub norm_b: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

/// Model weights registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    vars: Vec<Var>,
}

impl BoundModel {
    /// Vars in [`ViTModel::params`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Output of a forward pass recorded on a tape.
#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    /// `[1, classes]`.
    pub logits: Var,
    pub attention: AttentionRecord<T>,
}

/// Shapes of every parameter tensor in canonical order.
pub fn param_shapes(cfg: &ViTConfig) -> Vec<Vec<usize>> {
    let (d, f) = (cfg.dim, cfg.ffn_dim());
    let mut shapes = vec![
        vec![cfg.patch_len(), d],
        vec![d],
        vec![cfg.num_patches() + 1, d],
        vec![1, d],
    ];
    for _ in 0..cfg.layers {
        shapes.extend([
            vec![d],
            vec![d],
            vec![d, 3 * d],
            vec![3 * d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
        ]);
    }
    shapes.extend([vec![d], vec![d], vec![d, cfg.classes], vec![cfg.classes]]);
    shapes
}

impl<T: Real> ViTModel<T> {
    /// Weights ~ N(0, 0.02²), biases zero, LayerNorm gains one.
    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |shape: &[usize]| {
            Tensor::from_fn(shape, |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::lit(0.02 * z)
            })
        };
        let (d, f) = (config.dim, config.ffn_dim());
        let patch_w = normal(&[config.patch_len(), d]);
        let pos = normal(&[config.num_patches() + 1, d]);
        let cls = normal(&[1, d]);
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            blocks.push(Block {
                ln1_g: Tensor::full(&[d], T::one()),
                ln1_b: Tensor::zeros(&[d]),
                qkv_w: normal(&[d, 3 * d]),
                qkv_b: Tensor::zeros(&[3 * d]),
                proj_w: normal(&[d, d]),
                proj_b: Tensor::zeros(&[d]),
                ln2_g: Tensor::full(&[d], T::one()),
                ln2_b: Tensor::zeros(&[d]),
                fc1_w: normal(&[d, f]),
                fc1_b: Tensor::zeros(&[f]),
                fc2_w: normal(&[f, d]),
                fc2_b: Tensor::zeros(&[d]),
            });
        }
        let head_w = normal(&[d, config.classes]);
        Ok(Self {
            patch_b: Tensor::zeros(&[d]),
            norm_g: Tensor::full(&[d], T::one()),
            norm_b: Tensor::zeros(&[d]),
            head_b: Tensor::zeros(&[config.classes]),
            config,
            patch_w,
            pos,
            cls,
            blocks,
            head_w,
        })
    }

    /// Rebuild from tensors in [`ViTModel::params`] order.
    pub fn from_params(config: ViTConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        if params.len() != shapes.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, (p, s)) in params.iter().zip(&shapes).enumerate() {
            if p.shape() != s.as_slice() {
                return Err(Error::shape(format!("parameter {i}: {:?} vs {:?}", p.shape(), s)));
            }
        }
        let mut it = params.into_iter();
        let mut next = || it.next().expect("length checked");
        let patch_w = next();
        let patch_b = next();
        let pos = next();
        let cls = next();
        let blocks = (0..config.layers)
            .map(|_| Block {
                ln1_g: next(),
                ln1_b: next(),
                qkv_w: next(),
                qkv_b: next(),
                proj_w: next(),
                proj_b: next(),
                ln2_g: next(),
                ln2_b: next(),
                fc1_w: next(),
                fc1_b: next(),
                fc2_w: next(),
                fc2_b: next(),
            })
            .collect();
        Ok(Self {
            patch_w,
            patch_b,
            pos,
            cls,
            blocks,
            norm_g: next(),
            norm_b: next(),
            head_w: next(),
            head_b: next(),
            config,
        })
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.patch_w, &self.patch_b, &self.pos, &self.cls];
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend([&self.norm_g, &self.norm_b, &self.head_w, &self.head_b]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.patch_w, &mut self.patch_b, &mut self.pos, &mut self.cls];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend([&mut self.norm_g, &mut self.norm_b, &mut self.head_w, &mut self.head_b]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ViTModel<U> {
        let params = self.params().into_iter().map(|p| p.cast()).collect();
        ViTModel::from_params(self.config.clone(), params).expect("same layout")
    }

    /// Register all weights on `tape`; `trainable` decides whether they
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundModel {
        let vars = self
            .params()
            .into_iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect();
        BoundModel { vars }
    }

    fn check_positions(&self, positions: impl Iterator<Item = usize>) -> Result<usize> {
        let n = self.config.num_patches();
        let mut seen = vec![false; n];
        let mut count = 0;
        for p in positions {
            if p >= n {
                return Err(Error::contract(format!("patch position {p} out of range (N = {n})")));
            }
            if seen[p] {
                return Err(Error::contract(format!("duplicate patch position {p}")));
            }
            seen[p] = true;
            count += 1;
        }
        if count == 0 {
            return Err(Error::contract("forward needs at least one active patch"));
        }
        Ok(count)
    }

    /// Token matrix `[S+1, d]` before the first encoder block: CLS row then
    /// one row per input patch in input order, each plus its positional row.
    pub fn embed(&self, tape: &mut Tape<T>, bound: &BoundModel, tokens: &[(usize, Var)]) -> Result<Var> {
        self.check_positions(tokens.iter().map(|t| t.0))?;
        let v = &bound.vars;
        let (patch_w, patch_b, pos, cls) = (v[0], v[1], v[2], v[3]);
        let pixel_vars: Vec<Var> = tokens.iter().map(|t| t.1).collect();
        let stacked = tape.concat_rows(&pixel_vars)?;
        if tape.value(stacked).shape()[1] != self.config.patch_len() {
            return Err(Error::shape(format!(
                "patch of {} values, expected {}",
                tape.value(stacked).shape()[1],
                self.config.patch_len()
            )));
        }
        let projected = tape.matmul(stacked, patch_w)?;
        let projected = tape.add_row(projected, patch_b)?;
        let with_cls = tape.concat_rows(&[cls, projected])?;
        let rows: Vec<usize> = std::iter::once(0).chain(tokens.iter().map(|t| t.0 + 1)).collect();
        let pos_rows = tape.gather_rows(pos, &rows)?;
        tape.add(with_cls, pos_rows)
    }

    /// Forward over the given `(position, pixels [1, P²C])` tokens.
    pub fn forward_on(&self, tape: &mut Tape<T>, bound: &BoundModel, tokens: &[(usize, Var)]) -> Result<ForwardPass<T>> {
        let cfg = &self.config;
        let (d, dh) = (cfg.dim, cfg.head_dim());
        let n_tokens = tokens.len() + 1;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let eps = T::lit(LAYER_NORM_EPS);
        let mut x = self.embed(tape, bound, tokens)?;
        let mut attention = Vec::with_capacity(cfg.layers);

        for layer in 0..cfg.layers {
            let w = &bound.vars[4 + 12 * layer..4 + 12 * (layer + 1)];
            let h = tape.layer_norm(x, w[0], w[1], eps)?;
            let qkv = tape.matmul_counted(h, w[2], CostTerm::SelfAttention)?;
            let qkv = tape.add_row(qkv, w[3])?;
            let mut heads = Vec::with_capacity(cfg.heads);
            let mut rows = Vec::with_capacity(cfg.heads);
            for head in 0..cfg.heads {
                let q = tape.slice_cols(qkv, head * dh, dh)?;
                let k = tape.slice_cols(qkv, d + head * dh, dh)?;
                let v = tape.slice_cols(qkv, 2 * d + head * dh, dh)?;
                let scores = tape.matmul_bt_counted(q, k, CostTerm::SelfAttention)?;
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax(scores, 1)?;
                rows.push(tape.value(attn).data()[..n_tokens].to_vec());
                heads.push(tape.matmul_counted(attn, v, CostTerm::SelfAttention)?);
            }
            attention.push(rows);
            let merged = tape.concat_cols(&heads)?;
            let proj = tape.matmul_counted(merged, w[4], CostTerm::SelfAttention)?;
            let proj = tape.add_row(proj, w[5])?;
            x = tape.add(x, proj)?;

            let h2 = tape.layer_norm(x, w[6], w[7], eps)?;
            let f1 = tape.matmul_counted(h2, w[8], CostTerm::Ffn)?;
            let f1 = tape.add_row(f1, w[9])?;
            let f1 = tape.gelu(f1);
            let f2 = tape.matmul_counted(f1, w[10], CostTerm::Ffn)?;
            let f2 = tape.add_row(f2, w[11])?;
            x = tape.add(x, f2)?;

            let (n, dd) = (n_tokens as u64, d as u64);
            let counter = tape.counter_mut();
            counter.exclude(CostTerm::SelfAttention, sa_layer_units(n, dd) - sa_layer_units(n - 1, dd));
            counter.exclude(CostTerm::Ffn, ffn_layer_units(n, dd) - ffn_layer_units(n - 1, dd));
        }

        let tail = &bound.vars[4 + 12 * cfg.layers..];
        let xn = tape.layer_norm(x, tail[0], tail[1], eps)?;
        let cls_out = tape.gather_rows(xn, &[0])?;
        let logits = tape.matmul(cls_out, tail[2])?;
        let logits = tape.add_row(logits, tail[3])?;
        Ok(ForwardPass { logits, attention: AttentionRecord { layers: attention } })
    }

    /// Gradient-free forward on plain patches.
    pub fn forward(&self, patches: &[Patch<T>]) -> Result<Inference<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let tokens: Vec<(usize, Var)> = patches
            .iter()
            .map(|p| (p.position, tape.constant(Tensor::row(p.pixels.clone()))))
            .collect();
        let pass = self.forward_on(&mut tape, &bound, &tokens)?;
        Ok(Inference {
            logits: tape.value(pass.logits).data().to_vec(),
            attention: pass.attention,
            counter: tape.counter().clone(),
        })
    }

    pub fn predict_probs(&self, patches: &[Patch<T>]) -> Result<Vec<T>> {
        Ok(softmax_slice(&self.forward(patches)?.logits))
    }

    pub fn predict(&self, patches: &[Patch<T>]) -> Result<usize> {
        Ok(argmax(&self.forward(patches)?.logits))
    }
}

#[derive(Clone, Debug)]
pub struct Inference<T> {
    pub logits: Vec<T>,
    pub attention: AttentionRecord<T>,
    pub counter: FlopCounter,
}

pub fn argmax<T: Real>(xs: &[T]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc })
        .0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 12, batch_size: 32, lr: 1e-3, seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// Sum over the batch of per-sample weight gradients, in batch order.
fn batch_gradients(
    model: &ViTModel<f32>,
    samples: &[(Vec<Patch<f32>>, usize)],
) -> Result<(Vec<Vec<f32>>, f64)> {
    let per_sample: Vec<Result<(Vec<Vec<f32>>, f64)>> = samples
        .par_iter()
        .map(|(patches, label)| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let tokens: Vec<(usize, Var)> = patches
                .iter()
                .map(|p| (p.position, tape.constant(Tensor::row(p.pixels.clone()))))
                .collect();
            let pass = model.forward_on(&mut tape, &bound, &tokens)?;
            let loss = tape.cross_entropy(pass.logits, &[*label])?;
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
    let mut total: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
    let mut loss = 0.0;
    for item in per_sample {
        let (g, l) = item?;
        loss += l;
        for (acc, gi) in total.iter_mut().zip(g) {
            for (a, v) in acc.iter_mut().zip(gi) {
                *a += v;
            }
        }
    }
    Ok((total, loss))
}

pub fn accuracy(model: &ViTModel<f32>, images: &[(Vec<Patch<f32>>, usize)]) -> Result<f64> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<Result<bool>> = images
        .par_iter()
        .map(|(p, y)| Ok(model.predict(p)? == *y))
        .collect();
    let mut correct = 0usize;
    for h in hits {
        correct += h? as usize;
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Supervised training on the toy dataset with Adam and mean cross-entropy.
/// Aborts on the first non-finite batch loss.
pub fn train_teacher(
    dataset: &ToyDataset,
    config: &ViTConfig,
    train: &TrainConfig,
) -> Result<(ViTModel<f32>, TrainReport)> {
    use rand::seq::SliceRandom;

    let mut model = ViTModel::<f32>::init(config.clone(), train.seed)?;
    if dataset.geometry() != config.geometry() {
        return Err(Error::contract("dataset geometry differs from model config"));
    }
    if let Some(&bad) = dataset.labels.iter().find(|&&y| y >= config.classes) {
        return Err(Error::Label { label: bad, classes: config.classes });
    }
    let geom = config.geometry();
    let train_set = dataset.patch_split(crate::harness::Split::Train, &geom)?;
    let val_set = dataset.patch_split(crate::harness::Split::Val, &geom)?;
    let mut states: Vec<AdamState<f32>> = model
        .params()
        .iter()
        .map(|p| AdamState::new(p.numel(), AdamConfig::with_lr(train.lr)))
        .collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed_7ea1);
    let mut epoch_loss = Vec::with_capacity(train.epochs);
    let batch = train.batch_size.max(1);
    let mut step = 0usize;

    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut running = 0.0;
        for chunk in order.chunks(batch) {
            let samples: Vec<(Vec<Patch<f32>>, usize)> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (grads, loss) = batch_gradients(&model, &samples)?;
            step += 1;
            if !loss.is_finite() {
                return Err(Error::NonFinite { iteration: step, value: loss });
            }
            running += loss;
            let inv = 1.0 / samples.len() as f32;
            for ((param, state), g) in model.params_mut().into_iter().zip(&mut states).zip(grads) {
                let g: Vec<f32> = g.into_iter().map(|v| v * inv).collect();
                crate::optim::adam_update(param.data_mut(), &g, state);
            }
        }
        epoch_loss.push(running / train_set.len().max(1) as f64);
    }

    let report = TrainReport {
        epochs: train.epochs,
        epoch_loss,
        train_accuracy: accuracy(&model, &train_set)?,
        val_accuracy: accuracy(&model, &val_set)?,
    };
    Ok((model, report))
}
