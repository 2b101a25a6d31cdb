use capt_numerics::ops::log_softmax_rows;
use capt_numerics::{GradRecord, Tensor, Var};

use crate::{Result, TrainError};

const LOG_FLOOR: f64 = 1e-12;

/// −Σⱼ yⱼ log p(cⱼ|x) with the log clamped at 1e-12.
pub fn loss_ori(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(TrainError::Contract(format!("{} probabilities vs {} labels", p.len(), y.len())));
    }
    Ok(-p.iter().zip(y).map(|(p, y)| y * p.max(LOG_FLOOR).ln()).sum::<f64>())
}

/// Symmetric InfoNCE over L matched rows: row i of `fi` pairs with row i
/// of `ft`; similarities are dot products (cosines for unit rows).
pub fn loss_confuse(fi: &Tensor, ft: &Tensor, tau: f64) -> Result<f64> {
    let l = fi.rows();
    if l == 0 || fi.ndim() != 2 || ft.shape() != fi.shape() {
        return Err(TrainError::Contract(format!(
            "loss_confuse needs two equal L×d lists with L ≥ 1, got {:?} and {:?}",
            fi.shape(),
            ft.shape()
        )));
    }
    let sims = capt_numerics::matmul(fi, &ft.transpose())?;
    let a = log_softmax_rows(&sims, tau)?;
    let b = log_softmax_rows(&sims.transpose(), tau)?;
    let total: f64 = (0..l).map(|i| a.at(i, i) + b.at(i, i)).sum();
    Ok(-total / l as f64)
}

/// Tape form of [`loss_confuse`]; `fi` and `ft` are L×d.
pub fn loss_confuse_tape(rec: &mut GradRecord, fi: Var, ft: Var, tau: f64) -> Result<Var> {
    let l = rec.value(fi).rows();
    if l == 0 || rec.value(ft).rows() != l {
        return Err(TrainError::Contract("loss_confuse needs matched non-empty lists".into()));
    }
    let ftt = rec.transpose(ft);
    let s = rec.matmul(fi, ftt)?;
    let a = rec.log_softmax_rows(s, tau)?;
    let st = rec.transpose(s);
    let b = rec.log_softmax_rows(st, tau)?;
    let diag: Vec<(usize, usize)> = (0..l).map(|i| (i, i)).collect();
    let da = rec.gather(a, &diag)?;
    let db = rec.gather(b, &diag)?;
    let both = rec.add(da, db)?;
    let total = rec.sum(both);
    Ok(rec.scale(total, -1.0 / l as f64))
}

/// Cross-entropy of a 1×d feature against candidate text rows (k×d),
/// target at `target` within the candidates.
pub fn loss_ori_tape(rec: &mut GradRecord, g: Var, candidates_t: Var, target: usize, tau: f64) -> Result<Var> {
    let s = rec.matmul(g, candidates_t)?;
    let ls = rec.log_softmax_rows(s, tau)?;
    let picked = rec.gather(ls, &[(0, target)])?;
    Ok(rec.scale(picked, -1.0))
}
