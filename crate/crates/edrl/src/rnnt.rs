//! Exact negative log marginal probability of a label sequence over all
//! monotone alignments, by forward dynamic programming in log space.
//!
//! Convention: the final action is a blank consuming the last frame, matching
//! the decoder's termination rule, so
//!   alpha(t,u) = logaddexp(alpha(t-1,u) + blank(t-1,u),
//!                          alpha(t,u-1) + emit_{y_u}(t,u-1))
//!   loss = -(alpha(T-1,U) + blank(T-1,U))

use crate::beam::Action;
use crate::error::{Error, Result};
use crate::model::LatticeLogProbs;
use crate::tensor::{Eager, Ops, Tensor};

/// Negative log-likelihood over lattice rows (rows[t][u] of shape [1, V+1]).
/// Differentiable when `rows` live on a tape.
pub fn rnnt_nll<B: Ops>(
    b: &B,
    rows: &[Vec<B::V>],
    labels: &[usize],
    vocab_size: usize,
) -> Result<B::V> {
    let t_len = rows.len();
    let u_len = labels.len();
    if t_len == 0 {
        return Err(Error::Contract("lattice must have T >= 1".into()));
    }
    if rows[0].len() != u_len + 1 {
        return Err(Error::Contract(format!(
            "lattice has {} label rows but got {} labels",
            rows[0].len() - 1,
            u_len
        )));
    }
    let blank = vocab_size;
    for &l in labels {
        if l >= vocab_size {
            return Err(Error::Contract(format!(
                "label id {l} >= vocab_size {vocab_size}"
            )));
        }
    }

    // alpha[u], rolled over t.
    let mut alpha: Vec<Option<B::V>> = vec![None; u_len + 1];
    alpha[0] = Some(b.constant(Tensor::scalar(0.0)));
    for u in 1..=u_len {
        let emit = b.index(&rows[0][u - 1], labels[u - 1])?;
        alpha[u] = Some(b.add(alpha[u - 1].as_ref().unwrap(), &emit)?);
    }
    for t in 1..t_len {
        let mut next: Vec<Option<B::V>> = vec![None; u_len + 1];
        for u in 0..=u_len {
            let from_blank = {
                let bl = b.index(&rows[t - 1][u], blank)?;
                b.add(alpha[u].as_ref().unwrap(), &bl)?
            };
            next[u] = Some(if u > 0 {
                let emit = b.index(&rows[t][u - 1], labels[u - 1])?;
                let from_emit = b.add(next[u - 1].as_ref().unwrap(), &emit)?;
                b.logaddexp(&from_blank, &from_emit)?
            } else {
                from_blank
            });
        }
        alpha = next;
    }
    let final_blank = b.index(&rows[t_len - 1][u_len], blank)?;
    let total = b.add(alpha[u_len].as_ref().unwrap(), &final_blank)?;
    Ok(b.scale(&total, -1.0))
}

/// Convenience wrapper over a materialized grid (no gradient).
pub fn rnnt_nll_grid(lat: &LatticeLogProbs, labels: &[usize]) -> Result<f64> {
    let b = Eager;
    let rows = grid_rows(&b, &b.constant(lat.grid.clone()), lat.t_len, lat.u_len)?;
    Ok(b.value(&rnnt_nll(&b, &rows, labels, lat.vocab_size)?).item())
}

/// Split a dense [T, U+1, V+1] grid value into lattice rows.
pub fn grid_rows<B: Ops>(
    b: &B,
    grid: &B::V,
    t_len: usize,
    u_len: usize,
) -> Result<Vec<Vec<B::V>>> {
    let mut rows = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let tr = b.row(grid, t)?;
        let mut urow = Vec::with_capacity(u_len + 1);
        for u in 0..=u_len {
            urow.push(b.row(&tr, u)?);
        }
        rows.push(urow);
    }
    Ok(rows)
}

/// Test oracle: every action string with exactly `t_len` blanks and `u_len`
/// emissions, ending in a blank. Guarded to tiny sizes.
pub fn enumerate_alignments(t_len: usize, u_len: usize) -> Result<Vec<Vec<Action>>> {
    if t_len == 0 {
        return Err(Error::Contract("alignments need T >= 1".into()));
    }
    if t_len * u_len > 64 {
        return Err(Error::Guard(format!(
            "enumerate_alignments refuses T*U = {} > 64",
            t_len * u_len
        )));
    }
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(blanks_left: usize, emits_left: usize, cur: &mut Vec<Action>, out: &mut Vec<Vec<Action>>) {
        if blanks_left == 0 && emits_left == 0 {
            out.push(cur.clone());
            return;
        }
        // the last action must be a blank
        if blanks_left > 1 || (blanks_left == 1 && emits_left == 0) {
            cur.push(Action::Blank);
            rec(blanks_left - 1, emits_left, cur, out);
            cur.pop();
        }
        if emits_left > 0 && blanks_left > 0 {
            cur.push(Action::Emit(0)); // token identity filled by the caller
            rec(blanks_left, emits_left - 1, cur, out);
            cur.pop();
        }
    }
    rec(t_len, u_len, &mut cur, &mut out);
    Ok(out)
}

/// Oracle score of one alignment against a grid, with emissions bound to
/// `labels` in order.
pub fn alignment_logprob(lat: &LatticeLogProbs, labels: &[usize], actions: &[Action]) -> f64 {
    let v1 = lat.vocab_size + 1;
    let at = |t: usize, u: usize, k: usize| {
        lat.grid.data()[(t * (lat.u_len + 1) + u) * v1 + k]
    };
    let (mut t, mut u) = (0usize, 0usize);
    let mut total = 0.0;
    for a in actions {
        match a {
            Action::Blank => {
                total += at(t, u, lat.vocab_size);
                t += 1;
            }
            Action::Emit(_) => {
                total += at(t, u, labels[u]);
                u += 1;
            }
        }
    }
    total
}

/// Brute-force reference: -logsumexp over all enumerated alignments.
pub fn rnnt_nll_bruteforce(lat: &LatticeLogProbs, labels: &[usize]) -> Result<f64> {
    let aligns = enumerate_alignments(lat.t_len, labels.len())?;
    let scores: Vec<f64> = aligns
        .iter()
        .map(|a| alignment_logprob(lat, labels, a))
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(-(m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_lattice(
        t_len: usize,
        u_len: usize,
        vocab_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> LatticeLogProbs {
        let v1 = vocab_size + 1;
        let mut data = Vec::with_capacity(t_len * (u_len + 1) * v1);
        for _ in 0..t_len * (u_len + 1) {
            let logits: Vec<f64> = (0..v1).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            data.extend(logits.iter().map(|v| v - lse));
        }
        LatticeLogProbs {
            grid: Tensor::new(vec![t_len, u_len + 1, v1], data).unwrap(),
            t_len,
            u_len,
            vocab_size,
        }
    }

    #[test]
    fn alignment_counts() {
        assert_eq!(enumerate_alignments(1, 0).unwrap().len(), 1);
        assert_eq!(enumerate_alignments(1, 1).unwrap().len(), 1);
        assert_eq!(enumerate_alignments(2, 1).unwrap().len(), 2);
        // C(T-1+U, U) paths end in a final blank
        assert_eq!(enumerate_alignments(3, 2).unwrap().len(), 6);
        for a in enumerate_alignments(3, 2).unwrap() {
            assert_eq!(a.last(), Some(&Action::Blank));
            assert_eq!(a.iter().filter(|x| **x == Action::Blank).count(), 3);
        }
    }

    #[test]
    fn alignment_guard() {
        assert!(enumerate_alignments(10, 10).is_err());
    }

    #[test]
    fn empty_labels_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lat = random_lattice(4, 0, 3, &mut rng);
        let loss = rnnt_nll_grid(&lat, &[]).unwrap();
        let v1 = 4;
        let direct: f64 = (0..4)
            .map(|t| lat.grid.data()[t * v1 + 3])
            .sum();
        assert!((loss + direct).abs() < 1e-12);
    }

    #[test]
    fn single_path_closed_form() {
        // T=1, U=1: emit then blank
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lat = random_lattice(1, 1, 3, &mut rng);
        let loss = rnnt_nll_grid(&lat, &[2]).unwrap();
        let v1 = 4;
        let emit = lat.grid.data()[2]; // (t=0,u=0,k=2)
        let blank = lat.grid.data()[v1 + 3]; // (t=0,u=1,k=blank)
        assert!((loss + emit + blank).abs() < 1e-12);
    }

    #[test]
    fn matches_bruteforce_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lat = random_lattice(3, 2, 3, &mut rng);
        assert_eq!(enumerate_alignments(3, 2).unwrap().len(), 6);
        let labels = [0usize, 1];
        let dp = rnnt_nll_grid(&lat, &labels).unwrap();
        let bf = rnnt_nll_bruteforce(&lat, &labels).unwrap();
        assert!((dp - bf).abs() <= 1e-9, "dp={dp} bf={bf}");
        assert!(dp >= 0.0);
    }

    #[test]
    fn label_out_of_range_is_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lat = random_lattice(2, 1, 3, &mut rng);
        assert!(rnnt_nll_grid(&lat, &[3]).is_err());
    }

    #[test]
    fn monotone_in_label_probability() {
        // raising the label token's log-prob on one cell (other entries
        // untouched) weakly increases every alignment's probability, so the
        // loss never increases
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let lat = random_lattice(3, 2, 3, &mut rng);
            let labels = [1usize, 0];
            let base = rnnt_nll_grid(&lat, &labels).unwrap();
            let (t, u) = (rng.gen_range(0..3), rng.gen_range(0..2usize));
            let mut grid = lat.grid.clone();
            let v1 = 4;
            let off = (t * 3 + u) * v1;
            grid.data_mut()[off + labels[u]] += 0.5;
            let boosted = LatticeLogProbs {
                grid,
                ..lat.clone()
            };
            let after = rnnt_nll_grid(&boosted, &labels).unwrap();
            assert!(after <= base + 1e-12, "after={after} base={base}");
        }
    }

    #[test]
    fn gradient_wrt_lattice_matches_finite_differences() {
        use crate::tensor::{finite_diff, Tape};
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lat = random_lattice(3, 2, 2, &mut rng);
        let labels = [0usize, 1];
        let run = |data: &[f64]| -> (Tape, crate::tensor::Var) {
            let tape = Tape::new();
            let grid = tape.param(
                "grid",
                &Tensor::new(vec![3, 3, 3], data.to_vec()).unwrap(),
            );
            let rows = grid_rows(&tape, &grid, 3, 2).unwrap();
            let loss = rnnt_nll(&tape, &rows, &labels, 2).unwrap();
            (tape, loss)
        };
        let (tape, loss) = run(lat.grid.data());
        let g = tape.backward(loss).unwrap();
        let analytic = g.get("grid").unwrap().to_vec();
        let mut f = |d: &[f64]| {
            let (tape, loss) = run(d);
            tape.value(&loss).item()
        };
        let fd = finite_diff(&mut f, lat.grid.data(), 1e-5);
        for (a, n) in analytic.iter().zip(&fd) {
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!((a - n).abs() / denom <= 1e-4, "{a} vs {n}");
        }
    }
}
