//! Analytic gradients against central finite differences.

use proptest::prelude::*;
use rand::Rng as _;
use repaug::augment::{AugmentationSpec, Method};
use repaug::autodiff::{HingeAnchor, Tape, Var};
use repaug::loss::{self, LossConfig, LossKind, PairSet};
use repaug::{rng, EncoderConfig, EncoderModel, Side, Tensor};
use std::rc::Rc;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-7;

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng::from_seed(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Checks every entry of every input of `f`.
fn check<F>(inputs: &[Tensor], f: F) -> Result<(), String>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&tape, &vars);
    let grads = root.backward().map_err(|e| e.to_string())?;
    let eval = |xs: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
        f(&tape, &vars).item()
    };
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let (fp, f0, fm) = (eval(&plus), eval(inputs), eval(&minus));
            let a = analytic.data()[i];
            let central = (fp - fm) / (2.0 * STEP);
            // A hinge kink inside the stencil spoils the central difference;
            // one of the one-sided differences then stays on a smooth piece.
            let one_sided = [(fp - f0) / STEP, (f0 - fm) / STEP];
            if !close(a, central) && !one_sided.iter().any(|&n| close(a, n)) {
                return Err(format!("input {k} entry {i}: analytic {a} numeric {central}"));
            }
        }
    }
    Ok(())
}

fn close(a: f64, n: f64) -> bool {
    let diff = (a - n).abs();
    diff <= ABS_FLOOR || diff <= REL_TOL * a.abs().max(n.abs())
}

/// Reduces a tensor-valued op to a scalar with fixed random weights.
fn weighted<'t>(tape: &'t Tape, v: Var<'t>, seed: u64) -> Var<'t> {
    let w = random(&v.shape(), -1.0, 1.0, seed);
    v.mul(tape.constant(w)).unwrap().sum()
}

fn away_from_zero(t: Tensor) -> Tensor {
    t.map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_and_transpose(seed in any::<u64>()) {
        let a = random(&[3, 4], -2.0, 2.0, seed);
        let b = random(&[3, 4], -2.0, 2.0, seed ^ 1);
        check(&[a, b], |t, v| weighted(t, v[0].matmul(v[1].t()).unwrap(), seed)).unwrap();
    }

    #[test]
    fn elementwise_binary(seed in any::<u64>()) {
        let a = random(&[2, 5], -2.0, 2.0, seed);
        let b = random(&[2, 5], -2.0, 2.0, seed ^ 2);
        let s = random(&[], -2.0, 2.0, seed ^ 3);
        check(&[a, b, s], |t, v| {
            let x = v[0].add(v[1]).unwrap();
            let y = v[0].sub(v[1]).unwrap().mul(v[1]).unwrap();
            let z = x.mul(v[2]).unwrap().add(v[2]).unwrap().sub(v[2].scale(0.5)).unwrap();
            weighted(t, z.add(y.scale(-1.5)).unwrap(), seed)
        }).unwrap();
    }

    #[test]
    fn elementwise_unary(seed in any::<u64>()) {
        let x = away_from_zero(random(&[3, 3], -2.0, 2.0, seed));
        check(&[x], |t, v| {
            let x = v[0];
            let s = x.exp().add(x.tanh()).unwrap().add(x.relu()).unwrap();
            let s = s.add(x.softplus()).unwrap().add(x.log_sigmoid()).unwrap();
            weighted(t, s, seed)
        }).unwrap();
    }

    #[test]
    fn log_on_positive_inputs(seed in any::<u64>()) {
        let x = random(&[4], 0.1, 2.0, seed);
        check(&[x], |t, v| weighted(t, v[0].log().unwrap(), seed)).unwrap();
    }

    #[test]
    fn reductions(seed in any::<u64>()) {
        let x = random(&[4, 3], -2.0, 2.0, seed);
        check(&[x], |t, v| {
            let a = weighted(t, v[0].row_sum(), seed);
            let b = v[0].mean().scale(3.0);
            a.add(b).unwrap()
        }).unwrap();
    }

    #[test]
    fn logsumexp_plain_and_masked(seed in any::<u64>()) {
        let x = random(&[4, 4], -2.0, 2.0, seed);
        let mask: Vec<bool> = (0..16).map(|k| k % 4 != k / 4).collect();
        check(&[x], |t, v| {
            let a = weighted(t, v[0].row_logsumexp(None).unwrap(), seed);
            let b = weighted(t, v[0].row_logsumexp(Some(Rc::new(mask.clone()))).unwrap(), seed ^ 9);
            a.add(b).unwrap()
        }).unwrap();
    }

    #[test]
    fn gathers_and_concat(seed in any::<u64>()) {
        let x = random(&[3, 2], -2.0, 2.0, seed);
        let y = random(&[2, 2], -2.0, 2.0, seed ^ 4);
        check(&[x, y], |t, v| {
            let g = v[0].gather_rows(&[2, 0, 2, 1]).unwrap();
            let c = Var::concat_rows(&[g, v[1]]).unwrap();
            let e = c.gather_entries(&[0, 3, 3, 11]).unwrap();
            weighted(t, c, seed).add(weighted(t, e, seed ^ 5)).unwrap()
        }).unwrap();
    }

    #[test]
    fn row_normalization(seed in any::<u64>()) {
        let x = random(&[3, 4], -2.0, 2.0, seed);
        check(&[x], |t, v| weighted(t, v[0].normalize_rows(1e-8), seed)).unwrap();
    }

    #[test]
    fn hinge(seed in any::<u64>()) {
        let d = random(&[3, 3], -2.0, 2.0, seed);
        let anchors = Rc::new(vec![
            HingeAnchor { row: 0, positives: vec![0], negatives: vec![1, 2] },
            HingeAnchor { row: 2, positives: vec![2, 1], negatives: vec![0] },
        ]);
        check(&[d], |_, v| v[0].hinge(anchors.clone(), 0.7).unwrap()).unwrap();
    }

    #[test]
    fn plain_losses(seed in any::<u64>()) {
        let q = random(&[4, 8], -1.0, 1.0, seed);
        let c = random(&[4, 8], -1.0, 1.0, seed ^ 6);
        for kind in [LossKind::InfoNce, LossKind::Triplet, LossKind::Logistic] {
            let cfg = LossConfig { kind, margin: 1.0, ..LossConfig::default() };
            check(&[q.clone(), c.clone()], |_, v| loss::plain_variant(&cfg, v[0], v[1]).unwrap()).unwrap();
        }
    }

    #[test]
    fn augmented_losses_through_every_method(seed in any::<u64>()) {
        let q = random(&[4, 8], -1.0, 1.0, seed);
        let c = random(&[4, 8], -1.0, 1.0, seed ^ 7);
        for method in Method::ALL {
            let spec = AugmentationSpec::for_method(method);
            for kind in [LossKind::InfoNce, LossKind::Triplet, LossKind::Logistic] {
                let cfg = LossConfig { kind, margin: 1.0, ..LossConfig::default() };
                check(&[q.clone(), c.clone()], |_, v| {
                    let (qp, cp, pairs) = loss::augmented_pools(v[0], v[1], &spec, 2, seed).unwrap();
                    loss::augmented_variant(&cfg, qp, cp, &pairs).unwrap()
                }).map_err(|e| format!("{method} {kind:?}: {e}")).unwrap();
            }
        }
    }

    #[test]
    fn augmented_infonce_on_fixed_pools(seed in any::<u64>()) {
        let pairs = PairSet::new(4, 2).unwrap();
        let q = random(&[12, 8], -1.0, 1.0, seed);
        let c = random(&[12, 8], -1.0, 1.0, seed ^ 8);
        check(&[q, c], |_, v| loss::augmented_infonce(v[0], v[1], &pairs, 0.5).unwrap()).unwrap();
    }
}

fn encoder_check(cfg: EncoderConfig) {
    let model = EncoderModel::new(cfg, 9).unwrap();
    let xq = random(&[4, 5], -1.0, 1.0, 21);
    let xc = random(&[4, 5], -1.0, 1.0, 22);
    let loss_of = |m: &EncoderModel| {
        let tape = Tape::new();
        let enc = m.bind(&tape);
        let q = enc.forward(Side::Query, tape.constant(xq.clone())).unwrap();
        let c = enc.forward(Side::Item, tape.constant(xc.clone())).unwrap();
        let l = loss::infonce(q, c, 1.0).unwrap();
        let value = l.item();
        let mut g = l.backward().unwrap();
        (value, enc.params().iter().map(|&p| g.take(p)).collect::<Vec<_>>())
    };
    let (_, analytic) = loss_of(&model);
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let mut plus = model.clone();
            plus.params_mut()[k].data_mut()[i] += STEP;
            let mut minus = model.clone();
            minus.params_mut()[k].data_mut()[i] -= STEP;
            let numeric = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * STEP);
            let a = grad.data()[i];
            let diff = (a - numeric).abs();
            assert!(
                diff <= ABS_FLOOR || diff <= REL_TOL * a.abs().max(numeric.abs()),
                "param {k} entry {i}: {a} vs {numeric}"
            );
        }
    }
}

#[test]
fn shared_encoder_parameters() {
    encoder_check(EncoderConfig { layer_sizes: vec![5, 4, 3], normalize_output: false, shared_towers: true });
}

#[test]
fn separate_normalized_encoder_parameters() {
    encoder_check(EncoderConfig { layer_sizes: vec![5, 4, 3], normalize_output: true, shared_towers: false });
}
