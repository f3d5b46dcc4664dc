//! Central finite-difference checks against the tape's analytic gradients.
//!
//! Checks run in `f64`. The relative error of one entry is
//! `|a - n| / max(|a|, |n|, GRAD_FLOOR)`; the floor keeps gradients that are
//! zero up to rounding from reporting huge relative errors.

use crate::error::Result;
use crate::param::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Location of the worst entry, e.g. `"input 1[3]"` or `"encoder.0.w_q[7]"`.
    pub worst: String,
    pub checked: usize,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64, location: impl FnOnce() -> String) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if self.worst.is_empty() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", location());
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Reduces a non-scalar output to a scalar with fixed, uneven weights so
/// every output entry influences the loss differently.
fn reduce(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    if tape.value(out).numel() == 1 {
        return Ok(out);
    }
    let shape = tape.shape(out).to_vec();
    let n = tape.value(out).numel();
    let weights: Vec<f64> = (0..n).map(|i| (i as f64 * 1.37 + 0.41).sin()).collect();
    let w = tape.constant(Tensor::new(shape, weights)?);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Compares gradients with respect to free inputs of `f`.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let loss = reduce(&mut tape, out)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let loss = reduce(&mut tape, out)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheck::default();
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[k].numel()];
        let analytic = grads.get(*var).unwrap_or(&zeros).to_vec();
        for i in 0..inputs[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            report.record(analytic[i], numeric, || format!("input {k}[{i}]"));
        }
    }
    Ok(report)
}

/// Compares gradients of a scalar loss with respect to every trainable
/// parameter entry in `store`.
pub fn check_params<F>(store: &mut ParamStore<f64>, h: f64, mut f: F) -> Result<GradCheck>
where
    F: FnMut(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    tape.backward_into(loss, store)?;

    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut report = GradCheck::default();
    for id in ids {
        let n = store.value(id).numel();
        let analytic = store
            .get(id)
            .grad
            .as_ref()
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let plus = {
                let mut t = Tape::new();
                let l = f(store, &mut t)?;
                t.value(l).item()
            };
            store.value_mut(id).data_mut()[i] = orig - h;
            let minus = {
                let mut t = Tape::new();
                let l = f(store, &mut t)?;
                t.value(l).item()
            };
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let name = &store.get(id).name;
            report.record(analytic[i], numeric, || format!("{name}[{i}]"));
        }
    }
    store.zero_grad();
    Ok(report)
}

/// Finite-difference checks of every differentiable primitive on random
/// inputs drawn from `seed`. Returns one report per case.
pub fn check_primitives(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::ops::BatchNormMode;

    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_t = |shape: &[usize]| -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect())
            .expect("shape")
    };

    let mut out = Vec::new();
    let a23 = rand_t(&[2, 3]);
    let b23 = rand_t(&[2, 3]);
    out.push(("add", check_inputs(&[a23.clone(), b23.clone()], H, |t, v| t.add(v[0], v[1]))?));
    out.push(("sub", check_inputs(&[a23.clone(), b23.clone()], H, |t, v| t.sub(v[0], v[1]))?));
    out.push(("mul", check_inputs(&[a23.clone(), b23.clone()], H, |t, v| t.mul(v[0], v[1]))?));
    out.push(("add_bias", check_inputs(&[a23.clone(), rand_t(&[3])], H, |t, v| t.add_bias(v[0], v[1]))?));
    out.push(("scale", check_inputs(std::slice::from_ref(&a23), H, |t, v| Ok(t.scale(v[0], -0.7)))?));
    out.push(("sum", check_inputs(std::slice::from_ref(&a23), H, |t, v| Ok(t.sum(v[0])))?));
    out.push(("mean", check_inputs(std::slice::from_ref(&a23), H, |t, v| Ok(t.mean(v[0])))?));
    out.push(("matmul", check_inputs(&[rand_t(&[3, 4]), rand_t(&[4, 2])], H, |t, v| t.matmul(v[0], v[1]))?));
    out.push((
        "batch_matmul",
        check_inputs(&[rand_t(&[2, 3, 4]), rand_t(&[2, 4, 2])], H, |t, v| t.batch_matmul(v[0], v[1], false))?,
    ));
    out.push((
        "batch_matmul_trans_b",
        check_inputs(&[rand_t(&[2, 3, 4]), rand_t(&[2, 5, 4])], H, |t, v| t.batch_matmul(v[0], v[1], true))?,
    ));
    out.push((
        "linear",
        check_inputs(&[rand_t(&[2, 3, 4]), rand_t(&[4, 2]), rand_t(&[2])], H, |t, v| {
            t.linear(v[0], v[1], Some(v[2]))
        })?,
    ));
    out.push((
        "reshape_permute",
        check_inputs(&[rand_t(&[2, 3, 4])], H, |t, v| {
            let p = t.permute(v[0], &[2, 0, 1])?;
            t.reshape(p, &[8, 3])
        })?,
    ));
    out.push(("transpose", check_inputs(&[rand_t(&[3, 2])], H, |t, v| t.transpose(v[0]))?));
    out.push((
        "concat",
        check_inputs(&[rand_t(&[2, 3]), rand_t(&[2, 1]), rand_t(&[2, 2])], H, |t, v| t.concat(v, 1))?,
    ));
    out.push((
        "gather_rows",
        check_inputs(&[rand_t(&[4, 3])], H, |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]))?,
    ));
    out.push(("relu", check_inputs(&[rand_t(&[3, 4])], H, |t, v| Ok(t.relu(v[0])))?));
    out.push(("leaky_relu", check_inputs(&[rand_t(&[3, 4])], H, |t, v| Ok(t.leaky_relu(v[0], 0.01)))?));
    out.push(("softmax_last", check_inputs(&[rand_t(&[3, 4])], H, |t, v| t.softmax(v[0], 1))?));
    out.push(("softmax_first", check_inputs(&[rand_t(&[3, 4])], H, |t, v| t.softmax(v[0], 0))?));
    out.push((
        "masked_softmax",
        check_inputs(&[rand_t(&[4, 3, 3])], H, |t, v| {
            t.masked_softmax(v[0], &[true, true, false, true, false, true])
        })?,
    ));
    out.push((
        "layer_norm",
        check_inputs(&[rand_t(&[3, 5]), rand_t(&[5]), rand_t(&[5])], H, |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5)
        })?,
    ));
    out.push((
        "batch_norm_train",
        check_inputs(&[rand_t(&[4, 3, 5]), rand_t(&[3]), rand_t(&[3])], H, |t, v| {
            Ok(t.batch_norm(v[0], v[1], v[2], BatchNormMode::Train, 1e-5)?.0)
        })?,
    ));
    let running_mean = [0.1, -0.2, 0.3];
    let running_var = [0.5, 1.5, 0.9];
    out.push((
        "batch_norm_eval",
        check_inputs(&[rand_t(&[4, 3]), rand_t(&[3]), rand_t(&[3])], H, |t, v| {
            let mode = BatchNormMode::Eval {
                mean: &running_mean,
                var: &running_var,
            };
            Ok(t.batch_norm(v[0], v[1], v[2], mode, 1e-5)?.0)
        })?,
    ));
    out.push((
        "conv1d",
        check_inputs(&[rand_t(&[2, 3, 7]), rand_t(&[4, 3, 3]), rand_t(&[4])], H, |t, v| {
            t.conv1d(v[0], v[1], v[2], 1, 1)
        })?,
    ));
    out.push((
        "conv1d_stride2",
        check_inputs(&[rand_t(&[2, 2, 8]), rand_t(&[3, 2, 3]), rand_t(&[3])], H, |t, v| {
            t.conv1d(v[0], v[1], v[2], 2, 1)
        })?,
    ));
    out.push(("max_pool1d", check_inputs(&[rand_t(&[2, 3, 7])], H, |t, v| t.max_pool1d(v[0], 2, 2))?));
    out.push((
        "dropout",
        check_inputs(&[rand_t(&[3, 4])], H, |t, v| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            t.dropout(v[0], 0.3, &mut mask_rng)
        })?,
    ));
    let targets: Vec<usize> = (0..3).map(|i| (i * 2 + seed as usize) % 4).collect();
    out.push((
        "cross_entropy",
        check_inputs(&[rand_t(&[3, 4])], H, |t, v| t.cross_entropy(v[0], &targets))?,
    ));
    Ok(out)
}
