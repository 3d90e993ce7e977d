//! Central finite-difference gradient checking.
//!
//! The numerical side only ever runs forward passes, so it is independent of
//! every backward rule it checks. Non-scalar outputs are reduced with a fixed
//! random projection `sum(out * r)` so that every output element contributes
//! with an O(1) weight.
//!
//! Relative error per element is `|a - n| / max(|a|, |n|, 1e-4)`; elements
//! whose gradient is below the floor are held to an absolute error of 1e-8.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::losses::{self, AdversarialForm, LossCoeffs};
use crate::lstm::{bilstm_sequence, LstmVars};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

/// Builds the scalar loss on a fresh graph from the given input handles.
pub trait LossBuilder: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>> LossBuilder for F {}

fn eval<F: LossBuilder>(inputs: &[Tensor<f64>], build: &F) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let l = build(&mut g, &vars)?;
    Ok(g.value(l).item())
}

/// Max relative error between backward and central differences over all
/// elements of all `inputs` whose index is flagged in `check`.
pub fn check_with<F: LossBuilder>(inputs: &[Tensor<f64>], check: &[bool], build: F) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(check)
        .map(|(t, &c)| {
            if c {
                g.variable(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
        .collect();
    let l = build(&mut g, &vars)?;
    g.backward(l)?;
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, (&v, &c)) in vars.iter().zip(check).enumerate() {
        if !c {
            continue;
        }
        let zeros = alloc::vec![0.0; inputs[k].len()];
        let analytic = g.grad(v).map(|s| s.to_vec()).unwrap_or(zeros);
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + FD_STEP;
            let up = eval(&probe, &build)?;
            probe[k].data_mut()[i] = x0 - FD_STEP;
            let down = eval(&probe, &build)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

pub fn check<F: LossBuilder>(inputs: &[Tensor<f64>], build: F) -> Result<f64> {
    let all = alloc::vec![true; inputs.len()];
    check_with(inputs, &all, build)
}

/// `sum(out * r)` with `r` drawn from a fixed stream, so repeated forward
/// passes reduce with identical weights.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::seed(seed);
    let r: Vec<f64> = (0..g.value(out).len()).map(|_| rng.normal()).collect();
    let rv = g.constant(Tensor::new(g.shape(out).to_vec(), r)?);
    let m = g.mul(out, rv)?;
    Ok(g.sum(m))
}

pub fn random(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal() * scale).collect()).expect("shape")
}

pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.range(lo, hi)).collect()).expect("shape")
}

type Case = (Vec<Tensor<f64>>, Vec<bool>);

fn run_op<G, F>(name: &str, instances: usize, seed: u64, gen: G, build: F) -> Result<GradCheckReport>
where
    G: Fn(&mut Rng) -> Case,
    F: LossBuilder,
{
    let mut rng = Rng::derive(seed, name.len() as u64 ^ name.bytes().map(u64::from).sum::<u64>());
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (inputs, mask) = gen(&mut rng);
        worst = worst.max(check_with(&inputs, &mask, &build)?);
    }
    Ok(GradCheckReport {
        op: name.into(),
        instances,
        max_rel_error: worst,
    })
}

fn all(ts: Vec<Tensor<f64>>) -> Case {
    let m = alloc::vec![true; ts.len()];
    (ts, m)
}

fn size(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Finite-difference check of every differentiable primitive and loss.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    let n = instances;
    let mut out = Vec::new();

    out.push(run_op(
        "conv2d",
        n,
        seed,
        |r| {
            let (ci, co, h, w) = (size(r, 1, 3), size(r, 1, 3), size(r, 1, 5), size(r, 1, 5));
            let k = if r.bernoulli(0.5) { 3 } else { 1 };
            all(alloc::vec![
                random(r, &[ci, h, w], 1.0),
                random(r, &[co, ci, k, k], 0.5),
                random(r, &[co], 0.5)
            ])
        },
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]))?;
            project(g, y, 1)
        },
    )?);
    out.push(run_op(
        "maxpool2d",
        n,
        seed,
        |r| {
            let (c, h, w) = (size(r, 1, 3), 2 * size(r, 1, 3), 2 * size(r, 1, 3));
            all(alloc::vec![random(r, &[c, h, w], 1.0)])
        },
        |g, v| {
            let y = g.maxpool2d(v[0])?;
            project(g, y, 2)
        },
    )?);
    out.push(run_op(
        "upconv2d",
        n,
        seed,
        |r| {
            let (ci, co, h, w) = (size(r, 1, 3), size(r, 1, 3), size(r, 1, 3), size(r, 1, 3));
            all(alloc::vec![
                random(r, &[ci, h, w], 1.0),
                random(r, &[co, ci, 2, 2], 0.5),
                random(r, &[co], 0.5)
            ])
        },
        |g, v| {
            let y = g.upconv2d(v[0], v[1], Some(v[2]))?;
            project(g, y, 3)
        },
    )?);
    out.push(run_op(
        "dense",
        n,
        seed,
        |r| {
            let (i, o) = (size(r, 1, 6), size(r, 1, 6));
            all(alloc::vec![
                random(r, &[i], 1.0),
                random(r, &[o, i], 0.5),
                random(r, &[o], 0.5)
            ])
        },
        |g, v| {
            let y = g.dense(v[0], v[1], Some(v[2]))?;
            project(g, y, 4)
        },
    )?);
    let unary: [(&str, fn(&mut Graph<f64>, Var) -> Result<Var>); 6] = [
        ("relu", |g, x| Ok(g.relu(x))),
        ("leaky_relu", |g, x| Ok(g.leaky_relu(x, 0.2))),
        ("sigmoid", |g, x| Ok(g.sigmoid(x))),
        ("tanh", |g, x| Ok(g.tanh(x))),
        ("softmax_channel", |g, x| g.softmax_channel(x)),
        ("global_avg_pool", |g, x| g.global_avg_pool(x)),
    ];
    for (name, f) in unary {
        out.push(run_op(
            name,
            n,
            seed,
            |r| {
                let s = [size(r, 1, 4), size(r, 1, 3), size(r, 1, 3)];
                all(alloc::vec![random(r, &s, 1.5)])
            },
            move |g, v| {
                let y = f(g, v[0])?;
                project(g, y, 5)
            },
        )?);
    }
    out.push(run_op(
        "ln",
        n,
        seed,
        |r| {
            let s = [size(r, 1, 4), size(r, 1, 3)];
            all(alloc::vec![uniform(r, &s, 0.1, 2.0)])
        },
        |g, v| {
            let y = g.ln(v[0]);
            project(g, y, 6)
        },
    )?);
    out.push(run_op(
        "add_sub_mul_scale",
        n,
        seed,
        |r| {
            let s = [size(r, 1, 6)];
            all(alloc::vec![random(r, &s, 1.0), random(r, &s, 1.0)])
        },
        |g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(v[0], v[1])?;
            let m = g.mul(a, b)?;
            let s = g.scale(m, 0.7);
            let q = g.mul(s, v[0])?;
            project(g, q, 6)
        },
    )?);
    out.push(run_op(
        "concat_slice_reshape",
        n,
        seed,
        |r| {
            let (h, w, c1, c2) = (size(r, 1, 3), size(r, 1, 3), size(r, 1, 3), size(r, 1, 3));
            all(alloc::vec![random(r, &[c1, h, w], 1.0), random(r, &[c2, h, w], 1.0)])
        },
        |g, v| {
            let c = g.concat_channel(&[v[0], v[1], v[0]])?;
            let lead = g.shape(c)[0];
            let s = g.slice_channel(c, 1, lead - 1)?;
            let len = g.value(s).len();
            let flat = g.reshape(s, &[len])?;
            project(g, flat, 7)
        },
    )?);
    out.push(run_op(
        "dropout",
        n,
        seed,
        |r| {
            let len = size(r, 1, 30);
            all(alloc::vec![random(r, &[len], 1.0)])
        },
        |g, v| {
            let mut rng = Rng::seed(99);
            let y = g.dropout(v[0], 0.5, true, &mut rng)?;
            project(g, y, 8)
        },
    )?);
    out.push(run_op(
        "instance_norm",
        n,
        seed,
        |r| {
            let c = size(r, 1, 3);
            let (h, w) = (size(r, 2, 4), size(r, 1, 4));
            all(alloc::vec![
                random(r, &[c, h, w], 1.0),
                uniform(r, &[c], 0.5, 1.5),
                random(r, &[c], 0.5)
            ])
        },
        |g, v| {
            let y = g.instance_norm(v[0], v[1], v[2])?;
            project(g, y, 9)
        },
    )?);
    out.push(run_op(
        "add_channel_bias",
        n,
        seed,
        |r| {
            let (c, h, w) = (size(r, 1, 3), size(r, 1, 3), size(r, 1, 3));
            all(alloc::vec![random(r, &[c, h, w], 1.0), random(r, &[c], 1.0)])
        },
        |g, v| {
            let y = g.add_channel_bias(v[0], v[1])?;
            project(g, y, 10)
        },
    )?);
    out.push(run_op(
        "sum_mean_add_n",
        n,
        seed,
        |r| {
            let s = [size(r, 1, 5)];
            all(alloc::vec![random(r, &s, 1.0), random(r, &s, 1.0)])
        },
        |g, v| {
            let a = g.add_n(&[v[0], v[1], v[0]])?;
            let sq = g.mul(a, a)?;
            let s = g.sum(sq);
            let m = g.mean(v[1]);
            let mm = g.mul(m, m)?;
            g.add(s, mm)
        },
    )?);
    out.push(run_op(
        "bilstm_sequence",
        n,
        seed,
        |r| {
            let (f, h, len) = (size(r, 1, 4), size(r, 1, 3), size(r, 1, 4));
            let mut ts = Vec::new();
            for _ in 0..2 {
                ts.push(random(r, &[4 * h, f], 0.6));
                ts.push(random(r, &[4 * h, h], 0.6));
                ts.push(random(r, &[4 * h], 0.3));
            }
            for _ in 0..len {
                ts.push(random(r, &[f], 1.0));
            }
            all(ts)
        },
        |g, v| {
            let h = g.shape(v[1])[1];
            let fwd = LstmVars {
                wx: v[0],
                wh: v[1],
                b: v[2],
            };
            let bwd = LstmVars {
                wx: v[3],
                wh: v[4],
                b: v[5],
            };
            let o = bilstm_sequence(g, fwd, bwd, h, &v[6..])?;
            let cat = g.concat_channel(&o.outputs)?;
            let both = g.concat_channel(&[cat, o.summary])?;
            project(g, both, 11)
        },
    )?);
    out.push(run_op(
        "bce",
        n,
        seed,
        |r| {
            let len = size(r, 1, 8);
            let t = Tensor::new(
                [len],
                (0..len).map(|_| if r.bernoulli(0.5) { 1.0 } else { 0.0 }).collect(),
            )
            .unwrap();
            (alloc::vec![uniform(r, &[len], 0.05, 0.95), t], alloc::vec![true, false])
        },
        |g, v| {
            let t = g.value(v[1]).data().to_vec();
            g.bce(v[0], &t)
        },
    )?);
    out.push(run_op(
        "adversarial_losses",
        n,
        seed,
        |r| {
            let s = [1, size(r, 1, 3), size(r, 1, 3)];
            all(alloc::vec![uniform(r, &s, 0.05, 0.95), uniform(r, &s, 0.05, 0.95)])
        },
        |g, v| {
            let d = losses::discriminator_loss(g, &[v[0]], &[v[1]])?;
            let ns = losses::generator_adversarial(g, &[v[1]], AdversarialForm::NonSaturating)?;
            let mm = losses::generator_adversarial(g, &[v[1]], AdversarialForm::Minimax)?;
            let s = g.scale(mm, 0.5);
            g.add_n(&[d, ns, s])
        },
    )?);
    out.push(run_op(
        "weighted_cce",
        n,
        seed,
        |r| {
            let (c, p) = (size(r, 2, 4), size(r, 1, 6));
            let labels = Tensor::new([p], (0..p).map(|_| r.below(c) as f64).collect()).unwrap();
            (
                alloc::vec![random(r, &[c, p], 1.0), labels, uniform(r, &[c], 0.2, 3.0)],
                alloc::vec![true, false, false],
            )
        },
        |g, v| {
            // softmax in front keeps probabilities normalised under perturbation
            let probs = g.softmax_channel(v[0])?;
            let labels: Vec<u8> = g.value(v[1]).data().iter().map(|&l| l as u8).collect();
            let w = g.value(v[2]).data().to_vec();
            g.weighted_cce(probs, &labels, &w)
        },
    )?);
    out.push(run_op(
        "weighted_l1",
        n,
        seed,
        |r| {
            let d = size(r, 2, 5);
            let label = r.below(d);
            let t = Tensor::new([d], losses::one_hot(label, d)).unwrap();
            (
                alloc::vec![uniform(r, &[d], 0.05, 0.95), t, uniform(r, &[d], 0.2, 3.0)],
                alloc::vec![true, false, false],
            )
        },
        |g, v| {
            let t = g.value(v[1]).data().to_vec();
            let w = g.value(v[2]).data().to_vec();
            g.weighted_l1(v[0], &t, &w)
        },
    )?);
    out.push(run_op(
        "total_generator_loss",
        n,
        seed,
        |r| {
            let s = [1, 2, 2];
            all(alloc::vec![
                uniform(r, &s, 0.05, 0.95),
                random(r, &[3, 4], 1.0),
                uniform(r, &[2], 0.05, 0.95)
            ])
        },
        |g, v| {
            let adv = losses::generator_adversarial(g, &[v[0]], AdversarialForm::NonSaturating)?;
            let probs = g.softmax_channel(v[1])?;
            let seg = g.weighted_cce(probs, &[0, 2, 1, 2], &[0.7, 1.3, 2.2])?;
            let cls = g.weighted_l1(v[2], &[1.0, 0.0], &[1.5, 0.5])?;
            let c = LossCoeffs {
                adv: 0.5,
                seg: 1.0,
                cls: 2.0,
            };
            losses::total_generator_loss_var(g, adv, seg, cls, &c)
        },
    )?);
    out.push(run_op(
        "generator_adversarial_toy",
        n,
        seed,
        |r| {
            // x: 1 channel, 1x2 image; generator = 1x1 conv to 2 classes +
            // softmax; discriminator = fixed 1x1 conv on [x, y] + sigmoid.
            (
                alloc::vec![
                    random(r, &[1, 1, 2], 1.0),
                    random(r, &[2, 1, 1, 1], 0.8),
                    random(r, &[2], 0.5),
                    random(r, &[1, 3, 1, 1], 0.8),
                    random(r, &[1], 0.3),
                ],
                alloc::vec![false, true, true, false, false],
            )
        },
        |g, v| {
            let logits = g.conv2d(v[0], v[1], Some(v[2]))?;
            let y = g.softmax_channel(logits)?;
            let xy = g.concat_channel(&[v[0], y])?;
            let d = g.conv2d(xy, v[3], Some(v[4]))?;
            let s = g.sigmoid(d);
            losses::generator_adversarial(g, &[s], AdversarialForm::NonSaturating)
        },
    )?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_composite_matches() {
        let x = Tensor::from_f64([3], &[0.3, -1.2, 2.0]).unwrap();
        let err = check(&[x], |g, v| {
            let t = g.tanh(v[0]);
            let s = g.mul(t, v[0])?;
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(err < 1e-8, "{}", err);
    }

    #[test]
    fn small_suite_passes() {
        for r in run_suite(3, 5).unwrap() {
            assert!(r.max_rel_error < 1e-4, "{}: {}", r.op, r.max_rel_error);
        }
    }
}
