use std::sync::Arc;

use wm_core::action::{chunk_frustums, dual_attention, FrustumTokens, TokenGeometry};
use wm_core::gradcheck::check;
use wm_core::model::{ChunkSpec, Layout, Model, ModelConfig};
use wm_core::rng;
use wm_core::tape::{AttnMask, RopeTable, Tape, TokenMats, Var};
use wm_core::world::{CameraPose, DiscreteAction, Intrinsics};
use wm_core::{Result, Tensor};

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn randn(seed: u64, shape: &[usize]) -> Tensor<f64> {
    rng::normal(&mut rng::seeded(seed), shape)
}

/// Random linear functional of `y`, so no gradient cancels by symmetry.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = tape.leaf(randn(seed ^ 0xfeed, tape.shape(y)));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn assert_op(name: &str, inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    let r = check(inputs, H, |t, v| {
        let y = f(t, v)?;
        if t.value(y).numel() == 1 {
            Ok(y)
        } else {
            probe(t, y, 7)
        }
    })
    .unwrap();
    assert!(r.max_rel_error() < TOL, "{name}: {:?}", r.rel_errors);
}

#[test]
fn elementwise_and_linear_ops() {
    let (a, b) = (randn(1, &[3, 4]), randn(2, &[3, 4]));
    assert_op("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    assert_op("sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    assert_op("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    assert_op("add_scalar", &[a.clone()], |t, v| Ok(t.add_scalar(v[0], 0.7)));
    assert_op("scale", &[a.clone()], |t, v| Ok(t.scale(v[0], -1.3)));
    assert_op("scale_by", &[a.clone(), randn(3, &[1])], |t, v| t.scale_by(v[0], v[1]));
    assert_op("matmul", &[a.clone(), randn(4, &[4, 5])], |t, v| t.matmul(v[0], v[1]));
    assert_op("add_row", &[a.clone(), randn(5, &[4])], |t, v| t.add_row(v[0], v[1]));
    assert_op("silu", &[a.clone()], |t, v| Ok(t.silu(v[0])));
    assert_op("gelu", &[a.clone()], |t, v| Ok(t.gelu(v[0])));
    assert_op("layer_norm", &[a.clone()], |t, v| t.layer_norm(v[0]));
    assert_op("mse", &[a.clone(), b.clone()], |t, v| t.mse(v[0], v[1]));
    assert_op("sum", &[a.clone()], |t, v| Ok(t.sum(v[0])));
}

#[test]
fn structural_ops() {
    let a = randn(11, &[5, 6]);
    assert_op("gather_rows", &[a.clone()], |t, v| t.gather_rows(v[0], Arc::from(vec![4, 0, 0, 2])));
    assert_op("slice_cols", &[a.clone()], |t, v| t.slice_cols(v[0], 1, 3));
    assert_op("slice_rows", &[a.clone()], |t, v| t.slice_rows(v[0], 2, 2));
    assert_op("concat_rows", &[a.clone(), randn(12, &[2, 6])], |t, v| t.concat_rows(&[v[0], v[1]]));
}

#[test]
fn attention_ops() {
    let (q, k, v) = (randn(21, &[5, 8]), randn(22, &[6, 8]), randn(23, &[6, 8]));
    let mask = AttnMask::from_fn(5, 6, |i, j| j <= i + 1).unwrap();
    assert_op("attention", &[q.clone(), k.clone(), v.clone()], |t, x| t.attention(x[0], x[1], x[2], &mask, 2));
    let table = Arc::new(RopeTable::from_axes(&[[0, 1], [3, 0], [7, 2], [-2, 5], [11, 1]], &[1, 1], 10_000.0));
    assert_op("rope", &[q.clone()], |t, x| t.rope(x[0], table.clone(), 2));
    let mats: Vec<[f64; 16]> = (0..5).map(|i| std::array::from_fn(|j| ((i * 16 + j) as f64 * 0.37).sin())).collect();
    let mats = Arc::new(TokenMats::new(mats));
    assert_op("token_mats", &[q], |t, x| t.token_mats(x[0], mats.clone(), 2));
}

fn pose(x: f64, z: f64, yaw: f64) -> CameraPose {
    CameraPose::from_yaw(x, z, yaw, Intrinsics::hfov90(8, 8))
}

#[test]
fn dual_attention_with_gate() {
    let tpf = 2;
    let poses = [pose(2.5, 2.5, 0.0), pose(2.75, 2.5, 15.0), pose(3.0, 2.6, 30.0), pose(3.1, 2.9, 45.0)];
    let fr = FrustumTokens::new(&chunk_frustums(&poses, tpf, 0.25).unwrap());
    let rope = Arc::new(RopeTable::new_1d(&[0, 0, 1, 1, 2, 2, 3, 3], 4, 10_000.0));
    let geom = TokenGeometry { rope, frustums: Some(fr) };
    let mask = AttnMask::from_fn(8, 8, |i, j| j / 2 <= i / 2).unwrap();
    let inputs = [randn(31, &[8, 16]), randn(32, &[8, 16]), randn(33, &[8, 16]), Tensor::from_f64(&[1], &[0.6]).unwrap()];
    assert_op("dual_attention", &inputs, |t, x| dual_attention(t, x[0], x[1], x[2], &geom, &geom, &mask, 2, Some(x[3])));
}

fn tiny() -> ModelConfig {
    ModelConfig { dim: 16, heads: 2, blocks: 1, patch: 4, frame_width: 8, frame_height: 4, time_features: 8, ..ModelConfig::default() }
}

fn specs() -> Vec<ChunkSpec> {
    let p0 = [pose(2.5, 2.5, 0.0), pose(2.75, 2.5, 0.0), pose(3.0, 2.5, 15.0), pose(3.0, 2.6, 30.0)];
    let p1 = [pose(3.1, 2.7, 30.0), pose(3.2, 2.9, 45.0), pose(3.2, 3.1, 45.0), pose(3.3, 3.2, 60.0)];
    vec![
        ChunkSpec { noise_level: 0.3, keys: DiscreteAction::FORWARD, poses: p0, position: 0 },
        ChunkSpec { noise_level: 0.8, keys: DiscreteAction(DiscreteAction::FORWARD.0 | DiscreteAction::TURN_RIGHT.0), poses: p1, position: 1 },
    ]
}

/// A model whose zero-initialized parameters are randomized, so every path
/// through the block carries gradient.
fn excited_model() -> Model<f64> {
    let mut model = Model::<f64>::new(tiny()).unwrap();
    let ids: Vec<(usize, Vec<usize>, bool)> =
        model.params.iter().map(|(id, name, t)| (id, t.shape().to_vec(), name.starts_with("keys.w2") || name.ends_with("pose_gate") || name.starts_with("keys.b"))).collect();
    for (id, shape, zeroed) in ids {
        if zeroed {
            *model.params.get_mut(id) = rng::normal_scaled(&mut rng::seeded(id as u64 + 100), &shape, 0.3);
        }
    }
    model
}

#[test]
fn full_block_input_gradient() {
    let model = excited_model();
    let specs = specs();
    let n = model.cfg.tokens_per_chunk() * specs.len();
    let x = randn(41, &[n, model.cfg.latent_channels()]);
    let r = check(&[x], H, |t, v| {
        let y = model.forward(t, v[0], &specs, Layout::Causal)?;
        probe(t, y, 9)
    })
    .unwrap();
    assert!(r.max_rel_error() < TOL, "{:?}", r.rel_errors);
}

#[test]
fn full_block_parameter_gradients() {
    let mut model = excited_model();
    let specs = specs();
    let n = model.cfg.tokens_per_chunk() * specs.len();
    let x = randn(42, &[n, model.cfg.latent_channels()]);
    let loss_of = |m: &Model<f64>, grad: bool| {
        let mut t = if grad { Tape::new() } else { Tape::inference() };
        let xv = t.leaf(x.clone());
        let y = m.forward(&mut t, xv, &specs, Layout::Causal).unwrap();
        let l = probe(&mut t, y, 10).unwrap();
        (t.value(l).data()[0], if grad { Some(t.backward(l).unwrap()) } else { None })
    };
    let grads = loss_of(&model, true).1.unwrap();
    let ids: Vec<(usize, String)> = model.params.iter().map(|(id, name, _)| (id, name.to_string())).collect();
    let mut worst = (0.0f64, String::new());
    for (id, name) in ids {
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(model.params.get(id).shape()));
        let numel = analytic.numel();
        // strided subset of large matrices keeps the suite fast
        let stride = (numel / 24).max(1);
        let (mut diff, mut norm_a, mut norm_n) = (0.0f64, 0.0f64, 0.0f64);
        for j in (0..numel).step_by(stride) {
            let orig = model.params.get(id).data()[j];
            model.params.get_mut(id).data_mut()[j] = orig + H;
            let up = loss_of(&model, false).0;
            model.params.get_mut(id).data_mut()[j] = orig - H;
            let down = loss_of(&model, false).0;
            model.params.get_mut(id).data_mut()[j] = orig;
            let num = (up - down) / (2.0 * H);
            let a = analytic.data()[j];
            diff += (a - num).powi(2);
            norm_a += a * a;
            norm_n += num * num;
        }
        let rel = diff.sqrt() / norm_a.sqrt().max(norm_n.sqrt()).max(1e-10);
        if rel > worst.0 {
            worst = (rel, name.clone());
        }
        assert!(norm_a > 0.0 || name.starts_with("keys.table"), "{name} received no gradient");
    }
    assert!(worst.0 < TOL, "worst parameter {} rel err {}", worst.1, worst.0);
}
