use crate::error::{Error, Result};
use crate::graph::{CustomOp, Graph, Var};
use crate::tensor::{log_softmax_in_place, log_sum_exp, softmax_in_place, Tensor};

struct SmoothedCe {
    targets: Vec<Option<usize>>,
    eps: f64,
    count: usize,
}

impl CustomOp for SmoothedCe {
    fn name(&self) -> &'static str {
        "cross_entropy_smoothed"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let logits = inputs[0];
        let v = logits.last_dim();
        let scale = grad[0] / self.count.max(1) as f64;
        let mut out = vec![0.0; logits.len()];
        for (r, target) in self.targets.iter().enumerate() {
            let Some(y) = *target else { continue };
            let row = &mut out[r * v..(r + 1) * v];
            row.copy_from_slice(logits.row(r));
            softmax_in_place(row);
            for (k, x) in row.iter_mut().enumerate() {
                let q = self.eps / v as f64 + if k == y { 1.0 - self.eps } else { 0.0 };
                *x = (*x - q) * scale;
            }
        }
        vec![Some(out)]
    }
}

/// Label-smoothed cross entropy of `logits: S×V` against `refs`, averaged
/// over positions whose reference is not `pad`. The target distribution is
/// `(1−ε)·onehot + ε/V`.
pub fn cross_entropy_smoothed(
    g: &mut Graph<'_>,
    logits: Var,
    refs: &[usize],
    eps: f64,
    pad: usize,
) -> Result<Var> {
    let lv = g.value(logits);
    if lv.rank() != 2 || lv.rows() != refs.len() {
        return Err(Error::dim(
            "cross_entropy_smoothed",
            lv.shape(),
            &[refs.len()],
        ));
    }
    let v = lv.last_dim();
    let mut targets = Vec::with_capacity(refs.len());
    let mut total = 0.0;
    let mut row = vec![0.0; v];
    for (r, &y) in refs.iter().enumerate() {
        if y == pad {
            targets.push(None);
            continue;
        }
        if y >= v {
            return Err(Error::LabelOutOfVocab { label: y, vocab: v });
        }
        row.copy_from_slice(lv.row(r));
        log_softmax_in_place(&mut row);
        let smooth: f64 = row.iter().sum::<f64>() / v as f64;
        total -= (1.0 - eps) * row[y] + eps * smooth;
        targets.push(Some(y));
    }
    let count = targets.iter().flatten().count();
    let value = Tensor::scalar(if count == 0 {
        0.0
    } else {
        total / count as f64
    });
    Ok(g.custom(
        &[logits],
        value,
        Box::new(SmoothedCe {
            targets,
            eps,
            count,
        }),
    ))
}

/// Frames needed to emit `refs` under CTC: one per label plus one blank
/// between each pair of equal neighbours.
pub fn ctc_min_frames(refs: &[usize]) -> usize {
    refs.len() + refs.windows(2).filter(|w| w[0] == w[1]).count()
}

struct Lattice {
    /// Log-probabilities, U×V.
    lp: Vec<f64>,
    v: usize,
    ext: Vec<usize>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_z: f64,
}

fn ctc_lattice(logits: &Tensor, refs: &[usize], blank: usize) -> Result<Lattice> {
    let (u, v) = (logits.rows(), logits.last_dim());
    for &y in refs {
        if y >= v || y == blank {
            return Err(Error::LabelOutOfVocab { label: y, vocab: v });
        }
    }
    let required = ctc_min_frames(refs);
    if u < required {
        return Err(Error::InfeasibleAlignment {
            frames: u,
            required,
        });
    }
    let mut lp = logits.data().to_vec();
    lp.chunks_mut(v).for_each(log_softmax_in_place);
    let mut ext = Vec::with_capacity(2 * refs.len() + 1);
    ext.push(blank);
    for &y in refs {
        ext.push(y);
        ext.push(blank);
    }
    let n = ext.len();
    let skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; u * n];
    alpha[0] = lp[blank];
    if n > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..u {
        for s in 0..n {
            let prev = &alpha[(t - 1) * n..t * n];
            let mut a = prev[s];
            if s >= 1 {
                a = log_sum_exp(a, prev[s - 1]);
            }
            if skip(s) {
                a = log_sum_exp(a, prev[s - 2]);
            }
            alpha[t * n + s] = a + lp[t * v + ext[s]];
        }
    }
    let last = &alpha[(u - 1) * n..];
    let log_z = if n > 1 {
        log_sum_exp(last[n - 1], last[n - 2])
    } else {
        last[0]
    };

    let mut beta = vec![ninf; u * n];
    beta[(u - 1) * n + n - 1] = lp[(u - 1) * v + blank];
    if n > 1 {
        beta[(u - 1) * n + n - 2] = lp[(u - 1) * v + ext[n - 2]];
    }
    for t in (0..u - 1).rev() {
        for s in 0..n {
            let next = &beta[(t + 1) * n..(t + 2) * n];
            let mut b = next[s];
            if s + 1 < n {
                b = log_sum_exp(b, next[s + 1]);
            }
            if s + 2 < n && skip(s + 2) {
                b = log_sum_exp(b, next[s + 2]);
            }
            beta[t * n + s] = b + lp[t * v + ext[s]];
        }
    }
    Ok(Lattice {
        lp,
        v,
        ext,
        alpha,
        beta,
        log_z,
    })
}

/// Negative log-likelihood of `refs` under the CTC lattice of `logits: U×V`.
pub fn ctc_nll(logits: &Tensor, refs: &[usize], blank: usize) -> Result<f64> {
    Ok(-ctc_lattice(logits, refs, blank)?.log_z)
}

struct CtcOp {
    /// Posterior occupancy of each (frame, symbol), U×V.
    occupancy: Vec<f64>,
    softmax: Vec<f64>,
    scale: f64,
}

impl CustomOp for CtcOp {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let k = grad[0] * self.scale;
        let out = self
            .softmax
            .iter()
            .zip(&self.occupancy)
            .map(|(p, o)| k * (p - o))
            .collect();
        vec![Some(out)]
    }
}

/// CTC negative log-likelihood, multiplied by `scale`.
pub fn ctc_loss(
    g: &mut Graph<'_>,
    logits: Var,
    refs: &[usize],
    blank: usize,
    scale: f64,
) -> Result<Var> {
    let lat = ctc_lattice(g.value(logits), refs, blank)?;
    let (n, v) = (lat.ext.len(), lat.v);
    let u = lat.lp.len() / v;
    let mut occupancy = vec![0.0; u * v];
    for t in 0..u {
        for s in 0..n {
            let i = t * n + s;
            let x = lat.alpha[i] + lat.beta[i] - lat.lp[t * v + lat.ext[s]] - lat.log_z;
            occupancy[t * v + lat.ext[s]] += x.exp();
        }
    }
    let softmax = lat.lp.iter().map(|x| x.exp()).collect();
    let value = Tensor::scalar(-lat.log_z * scale);
    Ok(g.custom(
        &[logits],
        value,
        Box::new(CtcOp {
            occupancy,
            softmax,
            scale,
        }),
    ))
}

/// `|Σα − S|` over unscaled weights.
pub fn quantity_loss(g: &mut Graph<'_>, alpha: Var, s: usize) -> Var {
    let total = g.sum(alpha);
    let diff = g.add_scalar(total, -(s as f64));
    g.abs(diff)
}
