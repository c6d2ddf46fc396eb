//! Central finite-difference checks of every tape operation, the inversion
//! loss input gradient and the training weight gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vit_inversion::inversion::inversion_loss;
use vit_inversion::tensor::{cross_entropy_slice, PixelPair, Tape, Tensor, Var};
use vit_inversion::vit::{param_shapes, Patch, ViTConfig, ViTModel};

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

fn weights(n: usize) -> Tensor<f64> {
    Tensor::new(vec![n], (0..n).map(|i| (0.7 * i as f64 + 0.3).sin()).collect()).unwrap()
}

fn scalar_of(tape: &mut Tape<f64>, out: Var) -> Var {
    let n = tape.value(out).numel();
    if n == 1 {
        return out;
    }
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(weights(n).reshape(shape).unwrap());
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

fn evaluate(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let s = scalar_of(&mut tape, out);
    tape.value(s).item()
}

fn check_op(shapes: &[&[usize]], seed: u64, build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(s, &mut rng)).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let s = scalar_of(&mut tape, out);
    let grads = tape.backward(s).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).unwrap().data().to_vec();
        for j in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let numeric = (evaluate(&plus, build) - evaluate(&minus, build)) / (2.0 * H);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

fn assert_op(name: &str, shapes: &[&[usize]], build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) {
    for seed in 0..SEEDS {
        let err = check_op(shapes, seed, build);
        assert!(err < TOL, "{name} seed {seed}: max relative error {err:e}");
    }
}

#[test]
fn matmul_gradient() {
    assert_op("matmul", &[&[3, 4], &[4, 5]], &|t, v| t.matmul(v[0], v[1]).unwrap());
}

#[test]
fn matmul_bt_gradient() {
    assert_op("matmul_bt", &[&[3, 4], &[5, 4]], &|t, v| t.matmul_bt(v[0], v[1]).unwrap());
}

#[test]
fn add_and_mul_gradient() {
    assert_op("add_mul", &[&[3, 4], &[3, 4]], &|t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        t.mul(s, v[0]).unwrap()
    });
}

#[test]
fn add_row_gradient() {
    assert_op("add_row", &[&[3, 4], &[1, 4]], &|t, v| t.add_row(v[0], v[1]).unwrap());
}

#[test]
fn scale_and_sum_gradient() {
    assert_op("scale_sum", &[&[2, 3]], &|t, v| {
        let s = t.scale(v[0], -1.7);
        t.sum(s)
    });
}

#[test]
fn softmax_gradient_both_axes() {
    assert_op("softmax rows", &[&[3, 5]], &|t, v| t.softmax(v[0], 1).unwrap());
    assert_op("softmax cols", &[&[3, 5]], &|t, v| t.softmax(v[0], 0).unwrap());
}

#[test]
fn layer_norm_gradient() {
    assert_op("layer_norm", &[&[3, 6], &[1, 6], &[1, 6]], &|t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-6).unwrap()
    });
}

#[test]
fn gelu_gradient() {
    assert_op("gelu", &[&[4, 4]], &|t, v| t.gelu(v[0]));
}

#[test]
fn slicing_and_concatenation_gradient() {
    assert_op("slice_concat", &[&[3, 6], &[2, 6]], &|t, v| {
        let a = t.slice_cols(v[0], 1, 3).unwrap();
        let b = t.slice_cols(v[0], 4, 2).unwrap();
        let joined = t.concat_cols(&[b, a]).unwrap();
        let wide = t.concat_cols(&[joined, v[0]]).unwrap();
        let tall = t.concat_cols(&[v[1], v[1]]).unwrap();
        let tall = t.slice_cols(tall, 0, 11).unwrap();
        t.concat_rows(&[wide, tall]).unwrap()
    });
}

#[test]
fn gather_rows_gradient() {
    assert_op("gather_rows", &[&[5, 3]], &|t, v| t.gather_rows(v[0], &[4, 0, 4, 2]).unwrap());
}

#[test]
fn cross_entropy_gradient() {
    assert_op("cross_entropy", &[&[3, 4]], &|t, v| t.cross_entropy(v[0], &[2, 0, 3]).unwrap());
}

#[test]
fn kl_divergence_gradient() {
    let target = [0.1, 0.2, 0.3, 0.4, 0.7, 0.0, 0.2, 0.1];
    assert_op("kl_div", &[&[2, 4]], &|t, v| t.kl_div(v[0], &target, 2.5).unwrap());
}

#[test]
fn pair_norm_sum_gradient() {
    let pairs = [
        PixelPair { part_a: 0, offset_a: 0, part_b: 0, offset_b: 3 },
        PixelPair { part_a: 0, offset_a: 3, part_b: 1, offset_b: 0 },
        PixelPair { part_a: 1, offset_a: 3, part_b: 0, offset_b: 0 },
    ];
    assert_op("pair_norm_sum", &[&[1, 6], &[1, 6]], &|t, v| t.pair_norm_sum(v, &pairs, 3).unwrap());
}

fn toy_config() -> ViTConfig {
    ViTConfig {
        image_height: 16,
        image_width: 16,
        channels: 3,
        patch_size: 4,
        dim: 16,
        layers: 2,
        heads: 2,
        classes: 4,
        importance_layer: None,
    }
}

fn random_model(cfg: &ViTConfig, seed: u64, std: f64) -> ViTModel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).unwrap();
    let params = param_shapes(cfg)
        .iter()
        .map(|shape| Tensor::from_fn(shape, |_| normal.sample(&mut rng)))
        .collect();
    ViTModel::from_params(cfg.clone(), params).unwrap()
}

fn random_patches(cfg: &ViTConfig, positions: &[usize], rng: &mut ChaCha8Rng) -> Vec<Patch<f64>> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    positions
        .iter()
        .map(|&position| Patch {
            position,
            pixels: (0..cfg.patch_len()).map(|_| normal.sample(rng)).collect(),
        })
        .collect()
}

fn input_gradient_error(positions: &[usize], seed: u64) -> f64 {
    let cfg = toy_config();
    let model = random_model(&cfg, seed, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let patches = random_patches(&cfg, positions, &mut rng);
    let label = rng.random_range(0..cfg.classes);
    let tv_weight = 0.05;
    let eval = inversion_loss(&model, &patches, label, tv_weight).unwrap();
    let mut worst: f64 = 0.0;
    for (i, patch) in patches.iter().enumerate() {
        for j in 0..patch.pixels.len() {
            let mut plus = patches.clone();
            plus[i].pixels[j] += H;
            let mut minus = patches.clone();
            minus[i].pixels[j] -= H;
            let lp = inversion_loss(&model, &plus, label, tv_weight).unwrap().loss;
            let lm = inversion_loss(&model, &minus, label, tv_weight).unwrap().loss;
            worst = worst.max(rel_err(eval.grads[i][j], (lp - lm) / (2.0 * H)));
        }
    }
    worst
}

#[test]
fn inversion_loss_input_gradient_dense() {
    let all: Vec<usize> = (0..16).collect();
    for seed in 0..SEEDS {
        let err = input_gradient_error(&all, seed);
        assert!(err < TOL, "seed {seed}: max relative error {err:e}");
    }
}

#[test]
fn inversion_loss_input_gradient_sparse_subset() {
    for seed in 0..SEEDS {
        let err = input_gradient_error(&[0, 1, 5, 6, 10, 15], seed);
        assert!(err < TOL, "seed {seed}: max relative error {err:e}");
    }
}

fn training_loss(model: &ViTModel<f64>, patches: &[Patch<f64>], label: usize) -> f64 {
    cross_entropy_slice(&model.forward(patches).unwrap().logits, label)
}

#[test]
fn weight_gradient_matches_finite_differences() {
    let cfg = toy_config();
    let positions: Vec<usize> = (0..16).collect();
    for seed in 0..5 {
        let model = random_model(&cfg, seed, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let patches = random_patches(&cfg, &positions, &mut rng);
        let label = (seed % 4) as usize;

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let tokens: Vec<(usize, Var)> = patches
            .iter()
            .map(|p| (p.position, tape.constant(Tensor::row(p.pixels.clone()))))
            .collect();
        let pass = model.forward_on(&mut tape, &bound, &tokens).unwrap();
        let ce = tape.cross_entropy(pass.logits, &[label]).unwrap();
        let grads = tape.backward(ce).unwrap();

        for (slot, &var) in bound.vars().iter().enumerate() {
            let analytic = grads.get(var).unwrap().data().to_vec();
            for _ in 0..6 {
                let j = rng.random_range(0..analytic.len());
                let mut plus = model.clone();
                plus.params_mut()[slot].data_mut()[j] += H;
                let mut minus = model.clone();
                minus.params_mut()[slot].data_mut()[j] -= H;
                let numeric =
                    (training_loss(&plus, &patches, label) - training_loss(&minus, &patches, label)) / (2.0 * H);
                let err = rel_err(analytic[j], numeric);
                assert!(err < TOL, "seed {seed} param {slot}[{j}]: {} vs {numeric}, error {err:e}", analytic[j]);
            }
        }
    }
}
