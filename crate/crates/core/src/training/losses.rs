use crate::autodiff::{Tape, Var};
use crate::captioning::{argmax, PAD};
use crate::error::{ensure, Error, Result};
use crate::nn::Linear;
use crate::tensor::{log_softmax, softmax, Tensor};

fn check_targets(tape: &Tape<'_>, logits: Var, targets: &[usize]) -> Result<(usize, usize)> {
    let l = tape.value(logits);
    ensure!(
        l.ndim() == 2 && l.rows() == targets.len(),
        Error::Contract(format!(
            "{} targets for logits of shape {:?}",
            targets.len(),
            l.shape()
        ))
    );
    let v = l.cols();
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::Domain(format!("target {bad} outside vocabulary of {v}")));
    }
    Ok((l.rows(), v))
}

/// Mean negative log-likelihood of `targets` under `logits[T×V]`, skipping `PAD`.
pub fn xe_loss(tape: &mut Tape<'_>, logits: Var, targets: &[usize]) -> Result<Var> {
    let (_, v) = check_targets(tape, logits, targets)?;
    let idx: Vec<usize> = targets
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != PAD)
        .map(|(r, &t)| r * v + t)
        .collect();
    ensure!(
        !idx.is_empty(),
        Error::Contract("no non-PAD targets".into())
    );
    let n = idx.len();
    let lp = tape.log_softmax(logits);
    let picked = tape.gather(lp, idx, &[n])?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

/// `(correct, counted)` argmax predictions over non-PAD targets.
pub fn token_hits(logits: &Tensor, targets: &[usize]) -> (usize, usize) {
    let mut hits = 0;
    let mut total = 0;
    for (r, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        total += 1;
        if argmax(logits.row(r)) == t {
            hits += 1;
        }
    }
    (hits, total)
}

/// `KL(softmax(teacher) ‖ softmax(student))` averaged over rows plus the mean
/// squared error between (adapted) student features and teacher features.
pub fn kd_loss(
    tape: &mut Tape<'_>,
    student_logits: Var,
    teacher_logits: &Tensor,
    student_feat: Var,
    teacher_feat: &Tensor,
    adapter: Option<&Linear>,
) -> Result<Var> {
    ensure!(
        tape.shape(student_logits) == teacher_logits.shape(),
        Error::Contract(format!(
            "student logits {:?} vs teacher {:?}",
            tape.shape(student_logits),
            teacher_logits.shape()
        ))
    );
    let rows = teacher_logits.rows() as f64;
    let p_t = softmax(teacher_logits);
    let lp_t = log_softmax(teacher_logits);
    let entropy_term: f64 = p_t
        .data()
        .iter()
        .zip(lp_t.data())
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, l)| p * l)
        .sum();
    let lp_s = tape.log_softmax(student_logits);
    let cross = tape.mul_const(lp_s, &p_t)?;
    let cross = tape.sum(cross);
    let neg = tape.scale(cross, -1.0 / rows);
    let c = tape.constant(Tensor::scalar(entropy_term / rows));
    let kl = tape.add(neg, c)?;

    let feat = match adapter {
        Some(a) => a.forward(tape, student_feat)?,
        None => student_feat,
    };
    ensure!(
        tape.shape(feat) == teacher_feat.shape(),
        Error::Contract(format!(
            "student features {:?} vs teacher {:?} after adapter",
            tape.shape(feat),
            teacher_feat.shape()
        ))
    );
    let t = tape.constant(teacher_feat.clone());
    let d = tape.sub(feat, t)?;
    let sq = tape.mul(d, d)?;
    let mse = tape.mean(sq);
    tape.add(kl, mse)
}
