//! Central finite-difference checks of analytic gradients in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Build graphs in training mode; the dropout mask is replayed from `seed`.
    pub train: bool,
    pub seed: u64,
    /// Probe at most this many entries per tensor, evenly strided.
    pub max_entries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, floor: 1e-3, train: false, seed: 0, max_entries: usize::MAX }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub entries: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn probe_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let stride = len as f64 / max as f64;
    (0..max).map(|i| (i as f64 * stride) as usize).collect()
}

/// Compares gradients of `f` with respect to every input tensor and every
/// trainable parameter against central differences. Non-scalar outputs are
/// contracted with a fixed random tensor first.
pub fn check_gradients<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let mut projection: Option<Tensor<f64>> = None;
    let mut eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>], grads: bool| -> Result<(f64, Graph<f64>, Vec<Var>)> {
        let mut g = Graph::new(opts.train, opts.seed);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, store, &vars)?;
        let loss = if g.value(out).len() == 1 {
            out
        } else {
            let shape = g.shape(out).to_vec();
            let w = projection.get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
                Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0))
            });
            if w.shape() != shape.as_slice() {
                return Err(Error::shape("check_gradients", w.shape(), &shape));
            }
            let w = g.constant(w.clone());
            let p = g.mul(out, w)?;
            g.sum_all(p)?
        };
        let value = g.value(loss).item();
        if grads {
            g.backward(loss)?;
        }
        Ok((value, g, vars))
    };

    let (_, graph, vars) = eval(store, inputs, true)?;
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: String::new(), entries: 0 };
    let mut record = |label: String, analytic: f64, numeric: f64| {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
        report.entries += 1;
        if err > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = format!("{label}: analytic {analytic:e}, numeric {numeric:e}");
        }
    };
    let h = opts.step;

    for (k, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[k].shape());
        let analytic = graph.grad(*v).unwrap_or(&zero).clone();
        for i in probe_indices(inputs[k].len(), opts.max_entries) {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += h;
            let up = eval(store, &xs, false)?.0;
            xs[k].data_mut()[i] -= 2.0 * h;
            let down = eval(store, &xs, false)?.0;
            record(format!("input {k}[{i}]"), analytic.data()[i], (up - down) / (2.0 * h));
        }
    }

    let names: Vec<(String, Option<Var>)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| (n.to_string(), graph.param_vars().find(|(m, _)| *m == n).map(|(_, v)| v)))
        .collect();
    for (name, var) in names {
        let value = store.value(&name)?;
        let zero = Tensor::zeros(value.shape());
        let analytic = var.and_then(|v| graph.grad(v)).unwrap_or(&zero).clone();
        for i in probe_indices(value.len(), opts.max_entries) {
            let mut s = store.clone();
            s.get_mut(&name).expect("present").value.data_mut()[i] += h;
            let up = eval(&s, inputs, false)?.0;
            s.get_mut(&name).expect("present").value.data_mut()[i] -= 2.0 * h;
            let down = eval(&s, inputs, false)?.0;
            record(format!("{name}[{i}]"), analytic.data()[i], (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}
