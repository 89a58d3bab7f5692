//! Central-difference gradient checking.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::perturb::SplitMix64;

/// Comparison of analytic and numeric gradients for one input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub input: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, zero when both vanish.
    pub fn relative_error(&self) -> f64 {
        let diff: f64 = self
            .analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = self.analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = self.numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        if denom < 1e-12 {
            0.0
        } else {
            diff / denom
        }
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor], projection: &mut Option<Tensor>, seed: u64) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let shape = g.value(out).shape().to_vec();
    let loss = if g.value(out).len() == 1 {
        out
    } else {
        let w = projection.get_or_insert_with(|| {
            let mut r = SplitMix64::new(seed);
            let n = shape.iter().product();
            Tensor::new(&shape, (0..n).map(|_| (r.unit() * 2.0 - 1.0) as f32).collect()).unwrap()
        });
        g.weighted_sum(out, w.clone())?
    };
    Ok((g, vars, loss))
}

/// Compare `backward` against central differences with step `eps` for every
/// element of every input. Non-scalar outputs are projected onto a fixed
/// random direction first.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], eps: f32, seed: u64) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if inputs.is_empty() {
        return Err(Error::invalid("gradient check needs at least one input"));
    }
    let mut projection = None;
    let (mut g, vars, loss) = evaluate(&f, inputs, &mut projection, seed)?;
    g.backward(loss)?;
    let mut out = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(*v) {
            Some(gr) => gr.iter().map(|&x| x as f64).collect(),
            None => vec![0.0; inputs[i].len()],
        };
        let mut numeric = Vec::with_capacity(inputs[i].len());
        let mut probe = inputs.to_vec();
        for k in 0..inputs[i].len() {
            let base = inputs[i].data()[k];
            probe[i].data_mut()[k] = base + eps;
            let (gp, _, lp) = evaluate(&f, &probe, &mut projection, seed)?;
            probe[i].data_mut()[k] = base - eps;
            let (gm, _, lm) = evaluate(&f, &probe, &mut projection, seed)?;
            probe[i].data_mut()[k] = base;
            let d = (gp.value(lp).item() as f64 - gm.value(lm).item() as f64) / (2.0 * eps as f64);
            numeric.push(d);
        }
        out.push(GradCheck {
            input: i,
            analytic,
            numeric,
        });
    }
    Ok(out)
}
