//! The invariant and gradient suite behind the `check` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{ConditioningBundle, JointMode};
use crate::dit::{DiTConfig, DiTParams};
use crate::error::Result;
use crate::flow::{forward_diffuse, velocity_target};
use crate::numerics::{grad_check, relative_error, GradCheckReport, Tape, Tensor, Var};
use crate::params::Bound;

/// Finite-difference step.
pub const H: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckLine {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err <= TOLERANCE
    }
}

type OpFn<'a> = Box<dyn Fn(&mut Tape, Var) -> Result<Var> + 'a>;

/// Every differentiable tape op, each checked at `seeds` random points.
pub fn op_grad_checks(seeds: std::ops::Range<u64>) -> Result<Vec<CheckLine>> {
    let mut lines: Vec<CheckLine> = Vec::new();
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let a = Tensor::randn(&[3, 4], &mut rng);
        let b = Tensor::randn(&[3, 4], &mut rng);
        let w = Tensor::randn(&[4, 5], &mut rng);
        let row = Tensor::randn(&[4], &mut rng);
        let kv = Tensor::randn(&[5, 4], &mut rng);
        let probe = Tensor::randn(&[3, 4], &mut rng);
        let pos = a.map(|v| v.abs() + 0.5);
        let vals = kv.map(f64::cos);

        // A weighted sum makes every output coordinate matter.
        let weigh = |tp: &mut Tape, y: Var| -> Result<Var> {
            let n = tp.value(y).numel();
            let wts: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.7 + seed as f64).sin()).collect();
            let shape = tp.shape(y).to_vec();
            let wv = tp.constant(Tensor::new(&shape, wts)?);
            let p = tp.mul(y, wv)?;
            tp.sum(p)
        };
        let cases: Vec<(&str, OpFn, &Tensor)> = vec![
            ("add", Box::new(|tp: &mut Tape, x| {
                let c = tp.constant(b.clone());
                let y = tp.add(x, c)?;
                weigh(tp, y)
            }), &a),
            ("sub", Box::new(|tp: &mut Tape, x| {
                let c = tp.constant(b.clone());
                let y = tp.sub(c, x)?;
                weigh(tp, y)
            }), &a),
            ("mul", Box::new(|tp: &mut Tape, x| {
                let y = tp.mul(x, x)?;
                weigh(tp, y)
            }), &a),
            ("scale", Box::new(|tp: &mut Tape, x| {
                let y = tp.scale(x, -2.5)?;
                weigh(tp, y)
            }), &a),
            ("add_scalar", Box::new(|tp: &mut Tape, x| {
                let y = tp.add_scalar(x, 1.0)?;
                let y = tp.mul(y, y)?;
                weigh(tp, y)
            }), &a),
            ("add_row", Box::new(|tp: &mut Tape, x| {
                let c = tp.constant(a.clone());
                let y = tp.add_row(c, x)?;
                let y = tp.mul(y, y)?;
                weigh(tp, y)
            }), &row),
            ("mul_row", Box::new(|tp: &mut Tape, x| {
                let c = tp.constant(a.clone());
                let y = tp.mul_row(c, x)?;
                let y = tp.mul(y, y)?;
                weigh(tp, y)
            }), &row),
            ("matmul_lhs", Box::new(|tp: &mut Tape, x| {
                let c = tp.constant(w.clone());
                let y = tp.matmul(x, c)?;
                weigh(tp, y)
            }), &a),
            ("matmul_rhs", Box::new(|tp: &mut Tape, x| {
                let c = tp.constant(a.clone());
                let y = tp.matmul(c, x)?;
                weigh(tp, y)
            }), &w),
            ("linear", Box::new(|tp: &mut Tape, x| {
                let c = tp.constant(w.clone());
                let bias = tp.constant(Tensor::new(&[5], vec![0.1, -0.2, 0.3, 0.0, 1.0])?);
                let y = tp.linear(x, c, Some(bias))?;
                let y = tp.gelu(y)?;
                weigh(tp, y)
            }), &a),
            ("gelu", Box::new(|tp: &mut Tape, x| {
                let y = tp.gelu(x)?;
                weigh(tp, y)
            }), &a),
            ("log", Box::new(|tp: &mut Tape, x| {
                let y = tp.log(x)?;
                weigh(tp, y)
            }), &pos),
            ("softmax_rows", Box::new(|tp: &mut Tape, x| {
                let y = tp.softmax(x, 1)?;
                weigh(tp, y)
            }), &a),
            ("softmax_cols", Box::new(|tp: &mut Tape, x| {
                let y = tp.softmax(x, 0)?;
                weigh(tp, y)
            }), &a),
            ("normalize", Box::new(|tp: &mut Tape, x| {
                let y = tp.normalize(x, 1e-5)?;
                weigh(tp, y)
            }), &a),
            ("layer_norm", Box::new(|tp: &mut Tape, x| {
                let g = tp.constant(row.clone());
                let bb = tp.constant(row.map(|v| v * 0.3));
                let y = tp.layer_norm(x, g, bb, 1e-5)?;
                weigh(tp, y)
            }), &a),
            ("layer_norm_gain", Box::new(|tp: &mut Tape, x| {
                let c = tp.constant(a.clone());
                let bb = tp.constant(row.clone());
                let y = tp.layer_norm(c, x, bb, 1e-5)?;
                weigh(tp, y)
            }), &row),
            ("attention_q", Box::new(|tp: &mut Tape, x| {
                let k = tp.constant(kv.clone());
                let v = tp.constant(vals.clone());
                let y = tp.attention(x, k, v, 2)?;
                weigh(tp, y)
            }), &a),
            ("attention_k", Box::new(|tp: &mut Tape, x| {
                let q = tp.constant(a.clone());
                let v = tp.constant(vals.clone());
                let y = tp.attention(q, x, v, 2)?;
                weigh(tp, y)
            }), &kv),
            ("attention_v", Box::new(|tp: &mut Tape, x| {
                let q = tp.constant(a.clone());
                let k = tp.constant(kv.clone());
                let y = tp.attention(q, k, x, 1)?;
                weigh(tp, y)
            }), &kv),
            ("self_attention", Box::new(|tp: &mut Tape, x| {
                let y = tp.attention(x, x, x, 2)?;
                weigh(tp, y)
            }), &a),
            ("concat", Box::new(|tp: &mut Tape, x| {
                let c = tp.constant(b.clone());
                let y = tp.concat(&[c, x, x])?;
                let y = tp.gelu(y)?;
                weigh(tp, y)
            }), &a),
            ("slice_outer", Box::new(|tp: &mut Tape, x| {
                let y = tp.slice_outer(x, 1, 3)?;
                let y = tp.gelu(y)?;
                weigh(tp, y)
            }), &a),
            ("slice_cols", Box::new(|tp: &mut Tape, x| {
                let y = tp.slice_cols(x, 1, 3)?;
                let y = tp.gelu(y)?;
                weigh(tp, y)
            }), &a),
            ("gather", Box::new(|tp: &mut Tape, x| {
                let y = tp.gather(x, vec![0, 5, 5, 11, 2], &[5])?;
                let y = tp.gelu(y)?;
                weigh(tp, y)
            }), &a),
            ("reshape", Box::new(|tp: &mut Tape, x| {
                let y = tp.reshape(x, &[2, 6])?;
                let y = tp.softmax(y, 1)?;
                weigh(tp, y)
            }), &a),
            ("sum", Box::new(|tp: &mut Tape, x| {
                let y = tp.gelu(x)?;
                tp.sum(y)
            }), &a),
            ("mean", Box::new(|tp: &mut Tape, x| {
                let y = tp.gelu(x)?;
                tp.mean(y)
            }), &a),
            ("mse", Box::new(|tp: &mut Tape, x| {
                let c = tp.constant(probe.clone());
                tp.mse(x, c)
            }), &a),
        ];
        for (name, f, theta) in cases {
            let report = grad_check(|tp, x| f(tp, x), theta, H)?;
            match lines.iter_mut().find(|l| l.name == name) {
                Some(l) => l.report.merge(&report),
                None => lines.push(CheckLine { name: name.to_string(), report }),
            }
        }
    }
    Ok(lines)
}

/// Small generator and bundle for the end-to-end check: 2 blocks, a
/// 4-frame 8×8 latent, one reference slot and both cross-attention streams.
pub fn tiny_setup(seed: u64) -> Result<(DiTParams, ConditioningBundle, Tensor, Tensor, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cz = 3;
    let config = DiTConfig {
        depth: 2,
        d_model: 12,
        heads: 2,
        patch: (1, 2, 2),
        d_cond: 8,
        d_mllm: 6,
        connector_hidden: 10,
        gamma: 0.7,
        latent_channels: cz,
        ffn_mult: 2,
        max_slots: 8,
        max_side: 8,
    };
    let mut dit = DiTParams::new(config, &mut rng)?;
    // Perturb every parameter off its initial value.
    for t in dit.store.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.random_range(-1.0..1.0);
        }
    }
    let bundle = ConditioningBundle {
        h_mllm: Tensor::randn(&[3, 6], &mut rng),
        c_text: Tensor::randn(&[2, 8], &mut rng),
        c_clip: Tensor::randn(&[4, 8], &mut rng),
        c_vae: vec![Tensor::randn(&[cz, 8, 8], &mut rng)],
        m_ref: Tensor::ones(&[1, 1, 8, 8]),
        mode: JointMode::MllmAndText,
        dropped: false,
    };
    let z0 = Tensor::randn(&[4, cz, 8, 8], &mut rng);
    let eps = Tensor::randn(&[4, cz, 8, 8], &mut rng);
    Ok((dit, bundle, z0, eps, 0.37))
}

/// Flow-matching loss gradient of the tiny generator against central
/// differences at `per_param` sampled coordinates of every parameter.
pub fn end_to_end_check(seed: u64, per_param: usize) -> Result<CheckLine> {
    let (mut dit, bundle, z0, eps, t) = tiny_setup(seed)?;
    let z_t = forward_diffuse(&z0, &eps, t)?;
    let target = velocity_target(&z0, &eps)?;
    let loss_of = |dit: &DiTParams, trainable: bool| -> Result<(f64, Option<crate::params::Gradients>)> {
        let mut tape = Tape::new();
        let mut p = if trainable { Bound::trainable(&dit.store) } else { Bound::frozen(&dit.store) };
        let v = dit.u_theta(&mut tape, &mut p, &z_t, t, &bundle)?;
        let tg = tape.constant(target.clone());
        let l = tape.mse(v, tg)?;
        let value = tape.value(l).item();
        if !trainable {
            return Ok((value, None));
        }
        tape.backward(l)?;
        Ok((value, Some(p.gradients(&tape))))
    };
    let grads = loss_of(&dit, true)?.1.expect("trainable pass");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let mut report = GradCheckReport::default();
    let mut flat = 0;
    for (pi, g) in grads.0.iter().enumerate() {
        let n = g.numel();
        for _ in 0..per_param.min(n) {
            let i = rng.random_range(0..n);
            let x0 = dit.store.tensors()[pi].data()[i];
            dit.store.tensors_mut()[pi].data_mut()[i] = x0 + H;
            let plus = loss_of(&dit, false)?.0;
            dit.store.tensors_mut()[pi].data_mut()[i] = x0 - H;
            let minus = loss_of(&dit, false)?.0;
            dit.store.tensors_mut()[pi].data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * H);
            report.record(flat + i, g.data()[i], numeric);
        }
        flat += n;
    }
    debug_assert!(report.max_rel_err == 0.0 || relative_error(report.analytic, report.numeric) == report.max_rel_err);
    Ok(CheckLine { name: "end_to_end_dit".to_string(), report })
}

/// Full suite: every op over ten seeds, then the end-to-end model.
pub fn run_check() -> Result<Vec<CheckLine>> {
    let mut lines = op_grad_checks(0..10)?;
    lines.push(end_to_end_check(7, 4)?);
    Ok(lines)
}
