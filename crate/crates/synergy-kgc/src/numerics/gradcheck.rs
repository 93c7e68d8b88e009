//! Central-difference gradient verification.
//!
//! [`check_gradients`] compares the gradients currently stored in a
//! [`ParamSet`] against symmetric finite differences of a caller-supplied
//! forward function, perturbing every element of every parameter.
//! [`verify_primitives`] runs a self-contained check over each tape
//! operation in isolation on small seeded inputs.

use rand::Rng;

use crate::error::Result;
use crate::numerics::param::{ParamId, ParamSet};
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::tensor::Tensor;
use crate::rng::{derive, Stream};

/// Relative error with the denominator floored at `1e-3`, so symmetric
/// rounding noise on near-zero gradients does not register as disagreement.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-3);
    (a - b).abs() / denom
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_element: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub elements_checked: usize,
}

/// Verifies the gradients stored in `params` (from a backward pass at the
/// current values) against central differences of `forward` with the given
/// step. `forward` must be a deterministic pure function of the parameter
/// values; any internal randomness (dropout masks, neighbor subsampling)
/// has to be re-derived identically on every call. Parameter values are
/// perturbed transiently and restored exactly.
pub fn check_gradients<F>(params: &mut ParamSet, step: f64, mut forward: F) -> Result<CheckOutcome>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let mut outcome = CheckOutcome {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_element: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        elements_checked: 0,
    };
    let n_params = params.len();
    for idx in 0..n_params {
        let id = ParamId(idx);
        let n_elems = params.get(id).value.len();
        for k in 0..n_elems {
            let original = params.get(id).value.data()[k];
            params.get_mut(id).value.data_mut()[k] = original + step;
            let plus = forward(params)?;
            params.get_mut(id).value.data_mut()[k] = original - step;
            let minus = forward(params)?;
            params.get_mut(id).value.data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let analytic = params.get(id).grad.data()[k];
            let err = relative_error(analytic, numeric);
            outcome.elements_checked += 1;
            if err > outcome.max_rel_err {
                outcome.max_rel_err = err;
                outcome.worst_param = params.get(id).name.clone();
                outcome.worst_element = k;
                outcome.worst_analytic = analytic;
                outcome.worst_numeric = numeric;
            }
        }
    }
    Ok(outcome)
}

#[derive(Debug)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub outcome: CheckOutcome,
}

type Builder = Box<dyn Fn(&mut Tape, &ParamSet) -> Result<NodeId>>;

fn run_case(
    name: &'static str,
    params: &mut ParamSet,
    step: f64,
    build: Builder,
) -> Result<PrimitiveCheck> {
    params.zero_grads();
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    tape.backward(loss, params)?;
    let outcome = check_gradients(params, step, |ps| {
        let mut t = Tape::new();
        let l = build(&mut t, ps)?;
        Ok(t.value(l).scalar_value())
    })?;
    Ok(PrimitiveCheck { name, outcome })
}

fn seeded_vec(rng: &mut impl Rng, n: usize) -> Tensor {
    Tensor::uniform(vec![n], -1.0, 1.0, rng)
}

/// Checks every differentiable tape operation in isolation against central
/// differences on small seeded inputs. Returns one record per primitive.
pub fn verify_primitives(step: f64) -> Result<Vec<PrimitiveCheck>> {
    let mut rng = derive(0x5eed, Stream::Init, 0);
    let mut checks = Vec::new();
    let d = 6;

    // Shared reduction weights keep each loss asymmetric in its inputs so
    // index mix-ups cannot cancel out.
    let red = seeded_vec(&mut rng, d);

    {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::glorot_uniform(d, d, &mut rng), true);
        let x = ps.add("x", seeded_vec(&mut rng, d), true);
        let b = ps.add("b", seeded_vec(&mut rng, d), true);
        let red = red.clone();
        checks.push(run_case(
            "affine",
            &mut ps,
            step,
            Box::new(move |t, ps| {
                let wn = t.param(ps, w)?;
                let xn = t.param(ps, x)?;
                let bn = t.param(ps, b)?;
                let y = t.affine(wn, xn, Some(bn))?;
                t.dot_const(y, red.clone())
            }),
        )?);
    }

    {
        let mut ps = ParamSet::new();
        let a = ps.add("a", seeded_vec(&mut rng, d), true);
        let b = ps.add("b", seeded_vec(&mut rng, d), true);
        let red = red.clone();
        checks.push(run_case(
            "add",
            &mut ps,
            step,
            Box::new(move |t, ps| {
                let an = t.param(ps, a)?;
                let bn = t.param(ps, b)?;
                let y = t.add(an, bn)?;
                t.dot_const(y, red.clone())
            }),
        )?);
    }

    {
        let mut ps = ParamSet::new();
        let a = ps.add("a", seeded_vec(&mut rng, 3), true);
        let b = ps.add("b", seeded_vec(&mut rng, 3), true);
        let red = seeded_vec(&mut rng, 6);
        checks.push(run_case(
            "concat",
            &mut ps,
            step,
            Box::new(move |t, ps| {
                let an = t.param(ps, a)?;
                let bn = t.param(ps, b)?;
                let y = t.concat(an, bn)?;
                t.dot_const(y, red.clone())
            }),
        )?);
    }

    for (name, which) in [("tanh", 0u8), ("sigmoid", 1u8), ("softmax", 2u8)] {
        let mut ps = ParamSet::new();
        let x = ps.add("x", seeded_vec(&mut rng, d), true);
        let red = red.clone();
        checks.push(run_case(
            name,
            &mut ps,
            step,
            Box::new(move |t, ps| {
                let xn = t.param(ps, x)?;
                let y = match which {
                    0 => t.tanh(xn)?,
                    1 => t.sigmoid(xn)?,
                    _ => t.softmax(xn)?,
                };
                t.dot_const(y, red.clone())
            }),
        )?);
    }

    {
        let mut ps = ParamSet::new();
        let x = ps.add("x", seeded_vec(&mut rng, d), true);
        let gain = ps.add("gain", seeded_vec(&mut rng, d), true);
        let bias = ps.add("bias", seeded_vec(&mut rng, d), true);
        let red = red.clone();
        checks.push(run_case(
            "layer_norm",
            &mut ps,
            step,
            Box::new(move |t, ps| {
                let xn = t.param(ps, x)?;
                let gn = t.param(ps, gain)?;
                let bn = t.param(ps, bias)?;
                let y = t.layer_norm(xn, gn, bn)?;
                t.dot_const(y, red.clone())
            }),
        )?);
    }

    {
        let mut ps = ParamSet::new();
        let x = ps.add("x", seeded_vec(&mut rng, 16), true);
        let red = seeded_vec(&mut rng, 16);
        checks.push(run_case(
            "dropout",
            &mut ps,
            step,
            Box::new(move |t, ps| {
                // The mask must be identical on every call, so the stream is
                // re-derived inside the builder.
                let mut mask_rng = derive(0xd70, Stream::Dropout, 0);
                let xn = t.param(ps, x)?;
                let y = t.dropout(xn, 0.3, true, &mut mask_rng)?;
                t.dot_const(y, red.clone())
            }),
        )?);
    }

    {
        let mut ps = ParamSet::new();
        let a = ps.add("a", seeded_vec(&mut rng, d), true);
        let b = ps.add("b", seeded_vec(&mut rng, d), true);
        checks.push(run_case(
            "cosine",
            &mut ps,
            step,
            Box::new(move |t, ps| {
                let an = t.param(ps, a)?;
                let bn = t.param(ps, b)?;
                t.cosine(an, bn)
            }),
        )?);
    }

    {
        let mut ps = ParamSet::new();
        let rows: Vec<ParamId> = (0..3)
            .map(|i| ps.add(format!("row{i}"), seeded_vec(&mut rng, d), true))
            .collect();
        let cols: Vec<ParamId> = (0..3)
            .map(|i| ps.add(format!("col{i}"), seeded_vec(&mut rng, d), true))
            .collect();
        let red = seeded_vec(&mut rng, 9);
        checks.push(run_case(
            "cosine_matrix",
            &mut ps,
            step,
            Box::new(move |t, ps| {
                let rn: Vec<NodeId> = rows.iter().map(|&p| t.param(ps, p)).collect::<Result<_>>()?;
                let cn: Vec<NodeId> = cols.iter().map(|&p| t.param(ps, p)).collect::<Result<_>>()?;
                let m = t.cosine_matrix(&rn, &cn)?;
                t.dot_const(m, red.clone())
            }),
        )?);
    }

    for (name, heads) in [("attend_single_head", 1usize), ("attend_multi_head", 3)] {
        let mut ps = ParamSet::new();
        let q = ps.add("q", seeded_vec(&mut rng, d), true);
        let members: Vec<ParamId> = (0..4)
            .map(|i| ps.add(format!("u{i}"), seeded_vec(&mut rng, d), true))
            .collect();
        let red = red.clone();
        checks.push(run_case(
            name,
            &mut ps,
            step,
            Box::new(move |t, ps| {
                let qn = t.param(ps, q)?;
                let un: Vec<NodeId> = members
                    .iter()
                    .map(|&p| t.param(ps, p))
                    .collect::<Result<_>>()?;
                let y = t.attend(qn, &un, heads)?;
                t.dot_const(y, red.clone())
            }),
        )?);
    }

    {
        let mut ps = ParamSet::new();
        let pre = ps.add("pre", Tensor::vector(vec![0.4]), true);
        let on = ps.add("on", seeded_vec(&mut rng, d), true);
        let off = ps.add("off", seeded_vec(&mut rng, d), true);
        let red = red.clone();
        checks.push(run_case(
            "gate_blend",
            &mut ps,
            step,
            Box::new(move |t, ps| {
                let pn = t.param(ps, pre)?;
                let alpha = t.sigmoid(pn)?;
                let on_n = t.param(ps, on)?;
                let off_n = t.param(ps, off)?;
                let y = t.gate_blend(alpha, on_n, off_n)?;
                t.dot_const(y, red.clone())
            }),
        )?);
    }

    {
        let mut ps = ParamSet::new();
        let xs: Vec<ParamId> = (0..3)
            .map(|i| ps.add(format!("x{i}"), seeded_vec(&mut rng, d), true))
            .collect();
        let red = red.clone();
        checks.push(run_case(
            "mean_vecs",
            &mut ps,
            step,
            Box::new(move |t, ps| {
                let nodes: Vec<NodeId> =
                    xs.iter().map(|&p| t.param(ps, p)).collect::<Result<_>>()?;
                let y = t.mean_vecs(&nodes)?;
                t.dot_const(y, red.clone())
            }),
        )?);
    }

    {
        let mut ps = ParamSet::new();
        let queries: Vec<ParamId> = (0..3)
            .map(|i| ps.add(format!("q{i}"), seeded_vec(&mut rng, d), true))
            .collect();
        let cands: Vec<ParamId> = (0..3)
            .map(|i| ps.add(format!("c{i}"), seeded_vec(&mut rng, d), true))
            .collect();
        checks.push(run_case(
            "info_nce",
            &mut ps,
            step,
            Box::new(move |t, ps| {
                let qn: Vec<NodeId> = queries
                    .iter()
                    .map(|&p| t.param(ps, p))
                    .collect::<Result<_>>()?;
                let cn: Vec<NodeId> =
                    cands.iter().map(|&p| t.param(ps, p)).collect::<Result<_>>()?;
                let scores = t.cosine_matrix(&qn, &cn)?;
                t.info_nce(scores, 0.05, 0.02)
            }),
        )?);
    }

    {
        let mut ps = ParamSet::new();
        let x = ps.add("x", seeded_vec(&mut rng, d), true);
        let target = seeded_vec(&mut rng, d);
        checks.push(run_case(
            "sq_dist_to_const",
            &mut ps,
            step,
            Box::new(move |t, ps| {
                let xn = t.param(ps, x)?;
                t.sq_dist_to_const(xn, target.clone())
            }),
        )?);
    }

    {
        let mut ps = ParamSet::new();
        let x = ps.add("x", seeded_vec(&mut rng, d), true);
        let red_a = red.clone();
        let red_b = seeded_vec(&mut rng, d);
        checks.push(run_case(
            "weighted_sum",
            &mut ps,
            step,
            Box::new(move |t, ps| {
                let xn = t.param(ps, x)?;
                let a = t.dot_const(xn, red_a.clone())?;
                let b = t.dot_const(xn, red_b.clone())?;
                t.weighted_sum(&[(a, 1.0), (b, 0.1)])
            }),
        )?);
    }

    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_matches_central_differences() {
        let checks = verify_primitives(1e-5).unwrap();
        assert!(checks.len() >= 15);
        for c in &checks {
            assert!(
                c.outcome.max_rel_err < 1e-6,
                "{}: rel err {} at {}[{}] (analytic {}, numeric {})",
                c.name,
                c.outcome.max_rel_err,
                c.outcome.worst_param,
                c.outcome.worst_element,
                c.outcome.worst_analytic,
                c.outcome.worst_numeric
            );
        }
    }

    #[test]
    fn check_gradients_flags_a_wrong_gradient() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::vector(vec![1.0, 2.0]), true);
        // Claim dL/dx = [1, 1] for L = x0 + 2 x1.
        ps.accumulate_grad(id, &Tensor::vector(vec![1.0, 1.0])).unwrap();
        let outcome = check_gradients(&mut ps, 1e-5, |ps| {
            let v = ps.get(id).value.data();
            Ok(v[0] + 2.0 * v[1])
        })
        .unwrap();
        assert!(outcome.max_rel_err > 0.4);
        assert_eq!(outcome.worst_element, 1);
    }

    #[test]
    fn perturbation_restores_values_exactly() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::vector(vec![0.123456789, -9.87]), true);
        let before = ps.get(id).value.clone();
        check_gradients(&mut ps, 1e-5, |ps| Ok(ps.get(id).value.data().iter().sum()))
            .unwrap();
        for (a, b) in before.data().iter().zip(ps.get(id).value.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
