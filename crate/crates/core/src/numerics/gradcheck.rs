use super::{Graph, Rng, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter index, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: Option<(f64, f64)>,
    pub coords_checked: usize,
    pub pass: bool,
}

/// Finite-difference gradient checker.
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, floor')`,
/// where `a` is the analytic and `n` the numeric derivative. `floor'` is the
/// larger of `floor` and the rounding noise of the central difference,
/// `noise_ulps · ε · max(|L|, 1) / (2h)`, divided by `tol`: a coordinate whose
/// true derivative is zero still yields a numeric value of a few ulps of the
/// loss over `2h`.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub h: f64,
    pub tol: f64,
    pub floor: f64,
    pub noise_ulps: f64,
    /// Cap on coordinates probed per parameter tensor; `None` probes all.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Multiplies every analytic gradient before comparison (negative control).
    pub corrupt: Option<f64>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            noise_ulps: 1000.0,
            max_coords: None,
            seed: 0,
            corrupt: None,
        }
    }
}

impl GradCheck {
    pub fn with_tol(tol: f64) -> Self {
        GradCheck { tol, ..Default::default() }
    }

    /// Checks `f` at `params`. `f` builds a scalar loss on a fresh graph from
    /// the leaves it is handed (one per parameter tensor, same order).
    pub fn run<F>(&self, f: F, params: &[Tensor<f64>]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::new();
            let leaves: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
            let loss = f(&mut g, &leaves)?;
            Ok(g.value(loss).item())
        };

        let mut g = Graph::new();
        let leaves: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
        let loss = f(&mut g, &leaves)?;
        let noise = self.noise_ulps * f64::EPSILON * g.value(loss).item().abs().max(1.0) / (2.0 * self.h);
        let floor = self.floor.max(noise / self.tol);
        let grads = g.backward(loss)?;
        let analytic: Vec<Tensor<f64>> = leaves.iter().map(|&v| grads.wrt(v)).collect();

        let mut rng = Rng::new(self.seed);
        let mut probe = params.to_vec();
        let mut report = GradCheckReport {
            max_rel_err: 0.0,
            worst: None,
            worst_values: None,
            coords_checked: 0,
            pass: true,
        };
        for (pi, p) in params.iter().enumerate() {
            let coords: Vec<usize> = match self.max_coords {
                Some(k) if k < p.numel() => rng.sample_sorted(p.numel(), k),
                _ => (0..p.numel()).collect(),
            };
            for c in coords {
                let base = p.data()[c];
                probe[pi].data_mut()[c] = base + self.h;
                let up = eval(&probe)?;
                probe[pi].data_mut()[c] = base - self.h;
                let down = eval(&probe)?;
                probe[pi].data_mut()[c] = base;
                let numeric = (up - down) / (2.0 * self.h);
                let mut a = analytic[pi].data()[c];
                if let Some(k) = self.corrupt {
                    a *= k;
                }
                if !numeric.is_finite() || !a.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("gradient check, parameter {pi} coordinate {c} (analytic {a}, numeric {numeric})"),
                    });
                }
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                report.coords_checked += 1;
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = Some((pi, c));
                    report.worst_values = Some((a, numeric));
                }
            }
        }
        report.pass = report.max_rel_err < self.tol;
        Ok(report)
    }
}

/// Convenience wrapper with default settings at the given tolerance.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    GradCheck { h, tol, ..Default::default() }.run(f, params)
}
