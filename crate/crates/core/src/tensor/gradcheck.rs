//! Central-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{Graph, NdArray, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub epsilon: f64,
    /// Relative disagreement between one-sided differences above which a
    /// point is treated as lying on a kink and excluded.
    pub kink_tolerance: f64,
    /// Magnitude below which errors are measured absolutely.
    pub abs_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            epsilon: 1e-6,
            kink_tolerance: 1e-3,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(input, element)` pairs skipped because the function is not
    /// differentiable there.
    pub excluded: Vec<(usize, usize)>,
}

/// Deterministic projection weights used to reduce a non-scalar output.
fn projection(len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x005e_ed0f_9e4d);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn evaluate<F>(inputs: &[NdArray<f64>], build: &F) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.parameter(a.clone())).collect();
    let mut out = build(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        let w = projection(g.value(out).len());
        out = g.dot_const(out, w)?;
    }
    Ok((g, vars, out))
}

impl GradCheck {
    /// Check every element of every input.
    pub fn run<F>(&self, inputs: &[NdArray<f64>], build: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let all: Vec<(usize, usize)> = inputs
            .iter()
            .enumerate()
            .flat_map(|(i, a)| (0..a.len()).map(move |j| (i, j)))
            .collect();
        self.run_subset(inputs, build, &all)
    }

    /// Check only the listed `(input, element)` coordinates.
    pub fn run_subset<F>(
        &self,
        inputs: &[NdArray<f64>],
        build: F,
        coords: &[(usize, usize)],
    ) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let (mut g, vars, out) = evaluate(inputs, &build)?;
        g.backward(out)?;
        let f0 = g.value(out).item();
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, a)| {
                g.grad(v)
                    .map(|gr| gr.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; a.len()])
            })
            .collect();

        let mut report = GradCheckReport::default();
        let mut probe = inputs.to_vec();
        for &(i, j) in coords {
            let x = probe[i].data()[j];
            probe[i].data_mut()[j] = x + self.epsilon;
            let fp = output_of(evaluate(&probe, &build)?);
            probe[i].data_mut()[j] = x - self.epsilon;
            let fm = output_of(evaluate(&probe, &build)?);
            probe[i].data_mut()[j] = x;

            let fwd = (fp - f0) / self.epsilon;
            let bwd = (f0 - fm) / self.epsilon;
            let scale = fwd.abs().max(bwd.abs()).max(1.0);
            if (fwd - bwd).abs() > self.kink_tolerance * scale {
                report.excluded.push((i, j));
                continue;
            }
            let numeric = (fp - fm) / (2.0 * self.epsilon);
            let a = analytic[i][j];
            let denom = a.abs().max(numeric.abs()).max(self.abs_floor);
            let rel = (a - numeric).abs() / denom;
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
        Ok(report)
    }
}

fn output_of((g, _, out): (Graph<f64>, Vec<Var>, Var)) -> f64 {
    g.value(out).item()
}
