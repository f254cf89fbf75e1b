use std::io::Write;

use crate::error::{Error, Result};
use crate::graph::{CustomOp, Graph, Var};
use crate::instrument;
use crate::tensor::Tensor;

pub const THRESHOLD: f64 = 1.0;
/// Accumulations within this distance below the threshold still fire, so
/// rounding in `α·S/Σα` never loses the last label.
pub const FIRE_TOLERANCE: f64 = 1e-10;

/// What happens to weight left in the accumulator after the last frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualPolicy {
    /// Drop it (training, where scaling leaves nothing behind).
    Discard,
    /// Fire it as one more label when it is at least 0.5.
    #[default]
    Round,
}

/// One contiguous share of an encoder step's weight given to a label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Piece {
    pub step: usize,
    pub weight: f64,
    /// The piece starts where the previous step ended (first piece of its step).
    lower_moves: bool,
    /// The piece ends where its step ends (the step was fully consumed).
    upper_moves: bool,
}

/// Which encoder steps (and how much of each) went into every fired label.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FiringPlan {
    /// Completed labels; each list of fractions sums to 1.
    pub labels: Vec<Vec<Piece>>,
    /// Weight accumulated after the last fire.
    pub residual: f64,
    pub residual_pieces: Vec<Piece>,
    /// Whether the residual was emitted as a final (renormalized) label.
    pub tail_fired: bool,
}

impl FiringPlan {
    /// Labels emitted, including a fired tail.
    pub fn fire_count(&self) -> usize {
        self.labels.len() + usize::from(self.tail_fired)
    }

    /// Per-label `(first_step, last_step)`; the tail, if fired, comes last.
    pub fn spans(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self
            .labels
            .iter()
            .map(|p| (p[0].step, p[p.len() - 1].step))
            .collect();
        if self.tail_fired {
            let p = &self.residual_pieces;
            out.push((p[0].step, p[p.len() - 1].step));
        }
        out
    }

    /// Weight carried from label `i`'s firing step into the next label.
    pub fn carry(&self, i: usize) -> f64 {
        let last = self.labels[i].last().expect("non-empty label").step;
        let next = self
            .labels
            .get(i + 1)
            .map(|p| &p[..])
            .unwrap_or(&self.residual_pieces);
        next.first()
            .filter(|p| p.step == last)
            .map_or(0.0, |p| p.weight)
    }
}

fn check_finite(alpha: &[f64], h: &Tensor) -> Result<()> {
    if let Some(u) = alpha.iter().position(|a| !a.is_finite()) {
        return Err(Error::NonFinite {
            context: "CIF weights".into(),
            index: u,
        });
    }
    if let Some(i) = h.first_non_finite() {
        return Err(Error::NonFinite {
            context: "CIF encoder step".into(),
            index: i / h.last_dim().max(1),
        });
    }
    Ok(())
}

/// The left-to-right accumulator. Only builds the plan.
pub fn firing_plan(alpha: &[f64], policy: ResidualPolicy) -> FiringPlan {
    let mut plan = FiringPlan::default();
    let mut current: Vec<Piece> = Vec::new();
    let mut a = 0.0;
    for (u, &w) in alpha.iter().enumerate() {
        instrument::bump(|c| c.cif_steps += 1);
        let mut rest = w;
        let mut first = true;
        loop {
            if a + rest < THRESHOLD - FIRE_TOLERANCE {
                if rest > 0.0 {
                    current.push(Piece {
                        step: u,
                        weight: rest,
                        lower_moves: first,
                        upper_moves: true,
                    });
                }
                a += rest;
                break;
            }
            let used = (THRESHOLD - a).min(rest);
            current.push(Piece {
                step: u,
                weight: used,
                lower_moves: first,
                upper_moves: false,
            });
            plan.labels.push(std::mem::take(&mut current));
            first = false;
            a = 0.0;
            rest -= used;
            if rest <= 0.0 {
                break;
            }
        }
    }
    plan.residual = a;
    plan.residual_pieces = current;
    plan.tail_fired = policy == ResidualPolicy::Round && a >= 0.5;
    plan
}

/// Integrated embeddings `c_i = Σ fraction · h_u` for every label of `plan`;
/// a fired tail is renormalized by the residual weight.
pub fn integrate(h: &Tensor, plan: &FiringPlan) -> Tensor {
    let d = h.last_dim();
    let mut out = Vec::with_capacity(plan.fire_count() * d);
    let mut emit = |pieces: &[Piece], norm: f64| {
        let mut c = vec![0.0; d];
        for p in pieces {
            for (ci, hi) in c.iter_mut().zip(h.row(p.step)) {
                *ci += p.weight / norm * hi;
            }
        }
        out.extend(c);
    };
    for label in &plan.labels {
        emit(label, 1.0);
    }
    if plan.tail_fired {
        emit(&plan.residual_pieces, plan.residual);
    }
    Tensor::matrix(plan.fire_count(), d, out)
}

/// Runs the accumulator over `h: U×d` with weights `alpha` and returns the
/// fired embeddings together with the plan.
pub fn integrate_and_fire(
    h: &Tensor,
    alpha: &[f64],
    policy: ResidualPolicy,
) -> Result<(Tensor, FiringPlan)> {
    if h.rank() != 2 || h.rows() != alpha.len() {
        return Err(Error::dim("integrate_and_fire", h.shape(), &[alpha.len()]));
    }
    check_finite(alpha, h)?;
    let plan = firing_plan(alpha, policy);
    Ok((integrate(h, &plan), plan))
}

/// `α · S / Σα`.
pub fn scale_weights(alpha: &[f64], s: usize) -> Result<Vec<f64>> {
    let sum: f64 = alpha.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::DegenerateWeights(sum));
    }
    let k = s as f64 / sum;
    Ok(alpha.iter().map(|a| a * k).collect())
}

struct ScaleOp {
    sum: f64,
    target: f64,
}

impl CustomOp for ScaleOp {
    fn name(&self) -> &'static str {
        "scale_weights"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let alpha = inputs[0].data();
        let mean: f64 = grad.iter().zip(alpha).map(|(g, a)| g * a).sum::<f64>() / self.sum;
        let k = self.target / self.sum;
        vec![Some(grad.iter().map(|g| k * (g - mean)).collect())]
    }
}

pub fn scale_weights_graph(g: &mut Graph<'_>, alpha: Var, s: usize) -> Result<Var> {
    let a = g.value(alpha);
    let scaled = scale_weights(a.data(), s)?;
    let sum = a.data().iter().sum();
    let value = Tensor::vector(scaled);
    Ok(g.custom(
        &[alpha],
        value,
        Box::new(ScaleOp {
            sum,
            target: s as f64,
        }),
    ))
}

struct FireOp {
    labels: Vec<Vec<Piece>>,
}

impl CustomOp for FireOp {
    fn name(&self) -> &'static str {
        "integrate_and_fire"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let h = inputs[0];
        let (u_len, d) = (h.rows(), h.last_dim());
        let mut dh = vec![0.0; u_len * d];
        // Each piece weight is `upper - lower` where either bound is the
        // running sum C_u / C_{u-1} or a constant label boundary.
        let mut upper = vec![0.0; u_len];
        let mut lower = vec![0.0; u_len];
        for (i, label) in self.labels.iter().enumerate() {
            let gc = &grad[i * d..(i + 1) * d];
            for p in label {
                let row = &mut dh[p.step * d..(p.step + 1) * d];
                let mut gw = 0.0;
                for ((r, g), hv) in row.iter_mut().zip(gc).zip(h.row(p.step)) {
                    *r += p.weight * g;
                    gw += g * hv;
                }
                if p.upper_moves {
                    upper[p.step] += gw;
                }
                if p.lower_moves {
                    lower[p.step] += gw;
                }
            }
        }
        // dα_v = Σ_{u≥v} upper_u − Σ_{u≥v+1} lower_u
        let mut dalpha = vec![0.0; u_len];
        let (mut su, mut sl) = (0.0, 0.0);
        for v in (0..u_len).rev() {
            su += upper[v];
            dalpha[v] = su - sl;
            sl += lower[v];
        }
        vec![Some(dh), Some(dalpha)]
    }
}

/// Differentiable integrate-and-fire over `h: U×d` and `alpha: U`. Fires
/// only complete labels (the residual is discarded), as in training.
pub fn integrate_and_fire_graph(
    g: &mut Graph<'_>,
    h: Var,
    alpha: Var,
) -> Result<(Var, FiringPlan)> {
    let (ht, at) = (g.value(h), g.value(alpha));
    let (c, plan) = integrate_and_fire(ht, at.data(), ResidualPolicy::Discard)?;
    let op = FireOp {
        labels: plan.labels.clone(),
    };
    Ok((g.custom(&[h, alpha], c, Box::new(op)), plan))
}

/// One line per fired label: `utt_id`, label position, first and last
/// encoder step, and the weight carried into the next label (for the
/// tail: the residual weight).
pub fn write_alignment(w: &mut impl Write, utt_id: &str, plan: &FiringPlan) -> std::io::Result<()> {
    for (i, (first, last)) in plan.spans().into_iter().enumerate() {
        let carry = if i < plan.labels.len() {
            plan.carry(i)
        } else {
            plan.residual
        };
        writeln!(w, "{utt_id}\t{i}\t{first}\t{last}\t{carry:.6}")?;
    }
    Ok(())
}
