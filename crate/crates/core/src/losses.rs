//! Adaptation objectives recorded on a [`Tape`].
//!
//! A loss that has nothing to supervise (empty mask, no neighbours, no
//! confident sample) is returned as an unrecorded zero scalar; use
//! [`is_active`] to tell it apart from a recorded loss.

use crate::autodiff::{softmax_rows, Tape, Tensor};
use crate::bank::argmax;
use crate::{Error, Result};

/// Floor used in place of `log 0` for prototype probabilities.
pub const LOG_FLOOR: f64 = 1e-12;

/// Whether `loss` is recorded on a tape and can carry gradients.
pub fn is_active(loss: &Tensor) -> bool {
    loss.node_id().is_some() && loss.requires_grad()
}

/// `mask[i] = argmax p_i == argmax y_i`.
pub fn consistency_mask(p: &Tensor, y: &Tensor) -> Result<Vec<bool>> {
    if p.rows() != y.rows() || p.cols() != y.cols() {
        return Err(Error::shape(
            "consistency_mask",
            format!("{:?} vs {:?}", p.shape(), y.shape()),
        ));
    }
    Ok((0..p.rows()).map(|i| argmax(p.row(i)) == argmax(y.row(i))).collect())
}

/// Masked soft self-distillation:
/// `Σ_i (-Σ_k σ(p_i)_k log y_ik) M_i / Σ_i M_i`, with `y` held constant.
pub fn tsd_loss(tape: &mut Tape, p: &Tensor, y: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let (b, c) = (p.rows(), p.cols());
    if y.rows() != b || y.cols() != c || mask.len() != b || p.shape().len() != 2 {
        return Err(Error::shape(
            "tsd_loss",
            format!("p {:?}, y {:?}, mask {}", p.shape(), y.shape(), mask.len()),
        ));
    }
    let reliable = mask.iter().filter(|&&m| m).count();
    if reliable == 0 {
        return Ok(Tensor::scalar(0.0));
    }
    let inv = 1.0 / reliable as f64;
    let mut weights = vec![0.0; b * c];
    for i in 0..b {
        if !mask[i] {
            continue;
        }
        for k in 0..c {
            let yk = y.row(i)[k];
            let log_y = if yk > 0.0 { yk.ln() } else { LOG_FLOOR.ln() };
            weights[i * c + k] = -log_y * inv;
        }
    }
    let probs = tape.softmax(p)?;
    let weighted = tape.mul(&probs, &Tensor::matrix(b, c, weights)?)?;
    tape.sum(&weighted)
}

/// A stored bank neighbour: embedding and logits, both constants.
#[derive(Clone, Copy, Debug)]
pub struct StoredNeighbor<'a> {
    pub z: &'a [f64],
    pub logits: &'a [f64],
}

/// Local clustering over a batch: for each sample with neighbours,
/// `(1/K) Σ_j sg(sim(z, z_j)) ||σ(p) - σ(p_j)||²`, averaged over those
/// samples. Similarities pass through a stop-gradient.
pub fn mslc_loss_batch(tape: &mut Tape, z: &Tensor, p: &Tensor, neighbors: &[Vec<StoredNeighbor>]) -> Result<Tensor> {
    let (b, d, c) = (z.rows(), z.cols(), p.cols());
    if z.shape().len() != 2 || p.shape().len() != 2 || p.rows() != b || neighbors.len() != b {
        return Err(Error::shape(
            "mslc_loss",
            format!("z {:?}, p {:?}, {} neighbour lists", z.shape(), p.shape(), neighbors.len()),
        ));
    }
    let rows: usize = neighbors.iter().map(Vec::len).sum();
    let with_neighbors = neighbors.iter().filter(|n| !n.is_empty()).count();
    if rows == 0 {
        return Ok(Tensor::scalar(0.0));
    }
    let mut select = vec![0.0; rows * b];
    let mut nz = Vec::with_capacity(rows * d);
    let mut nprobs = Vec::with_capacity(rows * c);
    let mut factor = Vec::with_capacity(rows);
    let mut r = 0;
    for (i, list) in neighbors.iter().enumerate() {
        for n in list {
            if n.z.len() != d || n.logits.len() != c {
                return Err(Error::shape("mslc_loss", "neighbour width differs from the batch"));
            }
            select[r * b + i] = 1.0;
            nz.extend_from_slice(n.z);
            nprobs.extend(softmax_rows(n.logits, 1, c));
            factor.push(1.0 / (list.len() as f64 * with_neighbors as f64));
            r += 1;
        }
    }
    let select = Tensor::matrix(rows, b, select)?;
    let z_rep = tape.matmul(&select, z)?;
    let sims = tape.cosine_similarity(&z_rep, &Tensor::matrix(rows, d, nz)?)?;
    let sims = tape.stop_gradient(&sims)?;
    let scaled = tape.mul(&sims, &Tensor::matrix(rows, 1, factor)?)?;
    let weights = tape.matmul(&scaled, &Tensor::filled(vec![1, c], 1.0))?;

    let probs = tape.softmax(p)?;
    let p_rep = tape.matmul(&select, &probs)?;
    let diff = tape.sub(&p_rep, &Tensor::matrix(rows, c, nprobs)?)?;
    let sq = tape.square(&diff)?;
    let weighted = tape.mul(&sq, &weights)?;
    tape.sum(&weighted)
}

/// Single-sample local clustering; `z` is `[1,d]` and `p` is `[1,C]`.
pub fn mslc_loss(tape: &mut Tape, z: &Tensor, p: &Tensor, neighbors: &[StoredNeighbor]) -> Result<Tensor> {
    if z.rows() != 1 || p.rows() != 1 {
        return Err(Error::shape("mslc_loss", "expected single-row z and p"));
    }
    mslc_loss_batch(tape, z, p, &[neighbors.to_vec()])
}

/// `tsd + lambda * mslc`.
pub fn total_loss(tape: &mut Tape, tsd: &Tensor, mslc: &Tensor, lambda: f64) -> Result<Tensor> {
    if lambda < 0.0 {
        return Err(Error::invalid("lambda must be nonnegative"));
    }
    match (is_active(tsd), is_active(mslc)) {
        (false, false) => Ok(Tensor::scalar(tsd.item() + lambda * mslc.item())),
        (true, false) if mslc.item() == 0.0 => Ok(tsd.clone()),
        _ => {
            let weighted = tape.scale(mslc, lambda)?;
            tape.add(tsd, &weighted)
        }
    }
}

/// Mean prediction entropy over the batch.
pub fn tent_entropy_loss(tape: &mut Tape, p: &Tensor) -> Result<Tensor> {
    let b = p.rows();
    if b == 0 {
        return Ok(Tensor::scalar(0.0));
    }
    let probs = tape.softmax(p)?;
    let log_probs = tape.log_softmax(p)?;
    let prod = tape.mul(&probs, &log_probs)?;
    let total = tape.sum(&prod)?;
    tape.scale(&total, -1.0 / b as f64)
}

/// Hard pseudo-label cross-entropy over samples whose top softmax
/// probability reaches `threshold`. Returns the loss and the number of
/// qualifying samples.
pub fn pl_loss(tape: &mut Tape, p: &Tensor, threshold: f64) -> Result<(Tensor, usize)> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("pseudo-label threshold must lie in (0, 1)"));
    }
    let (b, c) = (p.rows(), p.cols());
    let probs = softmax_rows(p.values(), b, c);
    let picked: Vec<Option<usize>> = (0..b)
        .map(|i| {
            let row = &probs[i * c..(i + 1) * c];
            let k = argmax(row);
            (row[k] >= threshold).then_some(k)
        })
        .collect();
    let n = picked.iter().flatten().count();
    if n == 0 {
        return Ok((Tensor::scalar(0.0), 0));
    }
    let mut weights = vec![0.0; b * c];
    for (i, k) in picked.iter().enumerate() {
        if let Some(k) = k {
            weights[i * c + k] = -1.0 / n as f64;
        }
    }
    let log_probs = tape.log_softmax(p)?;
    let weighted = tape.mul(&log_probs, &Tensor::matrix(b, c, weights)?)?;
    Ok((tape.sum(&weighted)?, n))
}

/// Cross-entropy against known labels, used for source training.
pub fn cross_entropy(tape: &mut Tape, p: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = (p.rows(), p.cols());
    if labels.len() != b || b == 0 {
        return Err(Error::shape("cross_entropy", "one label per row required"));
    }
    let mut weights = vec![0.0; b * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::invalid(format!("label {y} out of range for {c} classes")));
        }
        weights[i * c + y] = -1.0 / b as f64;
    }
    let log_probs = tape.log_softmax(p)?;
    let weighted = tape.mul(&log_probs, &Tensor::matrix(b, c, weights)?)?;
    tape.sum(&weighted)
}

/// Scalar pieces of one adaptation objective.
#[derive(Clone, Debug)]
pub struct LossBundle {
    pub tsd: f64,
    pub mslc: f64,
    pub total: Tensor,
    pub mask: Vec<bool>,
    pub num_reliable: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn probs(rng: &mut ChaCha8Rng, b: usize, c: usize) -> Tensor {
        let raw: Vec<f64> = (0..b * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::matrix(b, c, softmax_rows(&raw, b, c)).unwrap()
    }

    #[test]
    fn mask_examples() {
        let p = Tensor::matrix(1, 2, vec![2.0, 1.0]).unwrap();
        let y = Tensor::matrix(1, 2, vec![0.1, 0.9]).unwrap();
        assert_eq!(consistency_mask(&p, &y).unwrap(), vec![false]);
        assert_eq!(consistency_mask(&p, &p).unwrap(), vec![true]);
        assert!(consistency_mask(&p, &Tensor::matrix(1, 3, vec![0.0; 3]).unwrap()).is_err());
    }

    #[test]
    fn tsd_uniform_is_ln2() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::matrix(1, 2, vec![0.3, 0.3]).unwrap());
        let y = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        let l = tsd_loss(&mut tape, &p, &y, &[true]).unwrap();
        assert_abs_diff_eq!(l.item(), 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn tsd_at_equality_is_mean_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = Tensor::matrix(3, 4, softmax_rows(&logits, 3, 4)).unwrap();
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::matrix(3, 4, logits.clone()).unwrap());
        let l = tsd_loss(&mut tape, &p, &y, &[true; 3]).unwrap();
        let mean_h = (0..3).map(|i| crate::bank::entropy(&logits[i * 4..i * 4 + 4])).sum::<f64>() / 3.0;
        assert_abs_diff_eq!(l.item(), mean_h, epsilon = 1e-12);
    }

    #[test]
    fn tsd_all_masked_is_inactive_zero() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = Tensor::matrix(2, 2, vec![0.5; 4]).unwrap();
        let l = tsd_loss(&mut tape, &p, &y, &[false, false]).unwrap();
        assert_eq!(l.item(), 0.0);
        assert!(!is_active(&l));
    }

    #[test]
    fn tsd_zero_probability_is_floored() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let y = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let l = tsd_loss(&mut tape, &p, &y, &[true]).unwrap();
        assert!(l.item().is_finite());
        assert_abs_diff_eq!(l.item(), -0.5 * LOG_FLOOR.ln(), epsilon = 1e-12);
    }

    #[test]
    fn tsd_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits: Vec<f64> = (0..24).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = probs(&mut rng, 8, 3);
        let mask: Vec<bool> = (0..8).map(|i| i % 3 != 0).collect();
        let perm = [3usize, 7, 0, 5, 1, 6, 2, 4];
        let permute = |v: &[f64]| -> Vec<f64> { perm.iter().flat_map(|&i| v[i * 3..i * 3 + 3].to_vec()).collect() };
        let mut t1 = Tape::new();
        let p1 = t1.leaf(Tensor::matrix(8, 3, logits.clone()).unwrap());
        let l1 = tsd_loss(&mut t1, &p1, &y, &mask).unwrap().item();
        let mut t2 = Tape::new();
        let p2 = t2.leaf(Tensor::matrix(8, 3, permute(&logits)).unwrap());
        let y2 = Tensor::matrix(8, 3, permute(y.values())).unwrap();
        let m2: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
        let l2 = tsd_loss(&mut t2, &p2, &y2, &m2).unwrap().item();
        assert_abs_diff_eq!(l1, l2, epsilon = 1e-14);
    }

    #[test]
    fn mslc_examples() {
        // identical predictions: zero loss whatever the similarity
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 0.5]).unwrap());
        let p = tape.leaf(Tensor::matrix(1, 2, vec![0.2, -0.4]).unwrap());
        let nz = [0.3, 0.9];
        let logits = [0.2, -0.4];
        let l = mslc_loss(&mut tape, &z, &p, &[StoredNeighbor { z: &nz, logits: &logits }]).unwrap();
        assert_abs_diff_eq!(l.item(), 0.0, epsilon = 1e-15);

        // sim 1, σ(p)≈[1,0], σ(p_j)≈[0,1] → 2
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let p = tape.leaf(Tensor::matrix(1, 2, vec![800.0, 0.0]).unwrap());
        let nz = [2.0, 2.0];
        let logits = [0.0, 800.0];
        let l = mslc_loss(&mut tape, &z, &p, &[StoredNeighbor { z: &nz, logits: &logits }]).unwrap();
        assert_abs_diff_eq!(l.item(), 2.0, epsilon = 1e-10);

        let mut tape = Tape::new();
        let l = mslc_loss(&mut tape, &z.detach(), &p.detach(), &[]).unwrap();
        assert_eq!(l.item(), 0.0);
        assert!(!is_active(&l));
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0]));
        let tsd = tape.sum(&x).unwrap();
        let half = tape.scale(&x, 0.5).unwrap();
        let mslc = tape.sum(&half).unwrap();
        let t = total_loss(&mut tape, &tsd, &mslc, 0.1).unwrap();
        assert_abs_diff_eq!(t.item(), 1.05, epsilon = 1e-15);
        let t0 = total_loss(&mut tape, &tsd, &mslc, 0.0).unwrap();
        assert_eq!(t0.item(), tsd.item());
        assert!(total_loss(&mut tape, &tsd, &mslc, -1.0).is_err());
    }

    #[test]
    fn tent_examples() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::matrix(2, 4, vec![0.5; 8]).unwrap());
        let l = tent_entropy_loss(&mut tape, &p).unwrap();
        assert_abs_diff_eq!(l.item(), 4f64.ln(), epsilon = 1e-12);
        let p = tape.leaf(Tensor::matrix(1, 3, vec![60.0, 0.0, 0.0]).unwrap());
        let l = tent_entropy_loss(&mut tape, &p).unwrap();
        assert!(l.item() < 1e-20);
    }

    #[test]
    fn pl_examples() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::matrix(2, 2, vec![0.1, 0.0, 0.0, 0.2]).unwrap());
        let (l, n) = pl_loss(&mut tape, &p, 0.9).unwrap();
        assert_eq!(n, 0);
        assert!(!is_active(&l));

        // σ(p) = [0.95, 0.05]
        let logit = (0.95f64 / 0.05).ln();
        let p = tape.leaf(Tensor::matrix(2, 2, vec![logit, 0.0, 0.0, 0.1]).unwrap());
        let (l, n) = pl_loss(&mut tape, &p, 0.9).unwrap();
        assert_eq!(n, 1);
        assert_abs_diff_eq!(l.item(), -(0.95f64.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(l.item(), 0.0513, epsilon = 1e-4);
        assert!(pl_loss(&mut tape, &p, 1.0).is_err());
    }

    #[test]
    fn gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10 {
            let logits: Vec<f64> = (0..32).map(|_| rng.random_range(-2.0..2.0)).collect();
            let point = Tensor::matrix(8, 4, logits).unwrap();
            let y = probs(&mut rng, 8, 4);
            let mask: Vec<bool> = (0..8).map(|_| rng.random_bool(0.7)).collect();
            let err = finite_difference_check(|t, p| tsd_loss(t, p, &y, &mask), &point, 1e-5).unwrap();
            assert!(err < 1e-4, "tsd {err}");
            let err = finite_difference_check(|t, p| tent_entropy_loss(t, p), &point, 1e-5).unwrap();
            assert!(err < 1e-4, "tent {err}");
            let err = finite_difference_check(|t, p| Ok(pl_loss(t, p, 0.3)?.0), &point, 1e-5).unwrap();
            assert!(err < 1e-4, "pl {err}");
        }
    }

    struct Case {
        z: Vec<f64>,
        logits: Vec<f64>,
        bank_z: Vec<Vec<f64>>,
        bank_p: Vec<Vec<f64>>,
        lists: Vec<Vec<usize>>,
    }

    fn case(rng: &mut ChaCha8Rng, b: usize, d: usize, c: usize) -> Case {
        let mut gen = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.5..1.5)).collect() };
        let z = gen(b * d);
        let logits = gen(b * c);
        let bank_z: Vec<Vec<f64>> = (0..6).map(|_| gen(d)).collect();
        let bank_p: Vec<Vec<f64>> = (0..6).map(|_| gen(c)).collect();
        let lists = (0..b).map(|i| (0..(i % 4)).map(|j| (i + 2 * j) % 6).collect()).collect();
        Case { z, logits, bank_z, bank_p, lists }
    }

    impl Case {
        fn neighbors(&self) -> Vec<Vec<StoredNeighbor<'_>>> {
            self.lists
                .iter()
                .map(|l| l.iter().map(|&j| StoredNeighbor { z: &self.bank_z[j], logits: &self.bank_p[j] }).collect())
                .collect()
        }
    }

    fn mslc_oracle(cs: &Case, b: usize, d: usize, c: usize) -> f64 {
        let mut total = 0.0;
        let mut counted = 0;
        for i in 0..b {
            let list = &cs.lists[i];
            if list.is_empty() {
                continue;
            }
            counted += 1;
            let zi = &cs.z[i * d..(i + 1) * d];
            let pi = softmax_rows(&cs.logits[i * c..(i + 1) * c], 1, c);
            let mut acc = 0.0;
            for &j in list {
                let zj = &cs.bank_z[j];
                let dot: f64 = zi.iter().zip(zj).map(|(a, b)| a * b).sum();
                let na = zi.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = zj.iter().map(|v| v * v).sum::<f64>().sqrt();
                let sim = dot / ((na + 1e-12) * (nb + 1e-12));
                let pj = softmax_rows(&cs.bank_p[j], 1, c);
                let sq: f64 = pi.iter().zip(&pj).map(|(a, b)| (a - b).powi(2)).sum();
                acc += sim * sq;
            }
            total += acc / list.len() as f64;
        }
        total / counted as f64
    }

    #[test]
    fn mslc_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let cs = case(&mut rng, 7, 5, 3);
            let mut tape = Tape::new();
            let z = tape.leaf(Tensor::matrix(7, 5, cs.z.clone()).unwrap());
            let p = tape.leaf(Tensor::matrix(7, 3, cs.logits.clone()).unwrap());
            let l = mslc_loss_batch(&mut tape, &z, &p, &cs.neighbors()).unwrap();
            assert_abs_diff_eq!(l.item(), mslc_oracle(&cs, 7, 5, 3), epsilon = 1e-12);
        }
    }

    #[test]
    fn mslc_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..50 {
            let cs = case(&mut rng, 5, 4, 3);
            let z = Tensor::matrix(5, 4, cs.z.clone()).unwrap();
            let point = Tensor::matrix(5, 3, cs.logits.clone()).unwrap();
            let nb = cs.neighbors();
            let err = finite_difference_check(|t, p| mslc_loss_batch(t, &z, p, &nb), &point, 1e-5).unwrap();
            assert!(err < 1e-4, "mslc {err}");
        }
    }

    #[test]
    fn mslc_similarity_carries_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let cs = case(&mut rng, 6, 4, 3);
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::matrix(6, 4, cs.z.clone()).unwrap());
        let p = tape.leaf(Tensor::matrix(6, 3, cs.logits.clone()).unwrap());
        let l = mslc_loss_batch(&mut tape, &z, &p, &cs.neighbors()).unwrap();
        let grads = tape.backward(&l).unwrap();
        assert!(grads.get(&z).unwrap().values().iter().all(|&g| g == 0.0));
        let gp = grads.get(&p).unwrap();

        // same loss with similarities frozen as literal numbers
        let mut tape = Tape::new();
        let p2 = tape.leaf(Tensor::matrix(6, 3, cs.logits.clone()).unwrap());
        let probs = tape.softmax(&p2).unwrap();
        let mut acc: Option<Tensor> = None;
        let counted = cs.lists.iter().filter(|l| !l.is_empty()).count() as f64;
        for i in 0..6 {
            for &j in &cs.lists[i] {
                let zi = &cs.z[i * 4..(i + 1) * 4];
                let sim = crate::autodiff::cosine(zi, &cs.bank_z[j]);
                let mut sel = vec![0.0; 6];
                sel[i] = 1.0;
                let row = tape.matmul(&Tensor::matrix(1, 6, sel).unwrap(), &probs).unwrap();
                let pj = Tensor::matrix(1, 3, softmax_rows(&cs.bank_p[j], 1, 3)).unwrap();
                let diff = tape.sub(&row, &pj).unwrap();
                let sq = tape.square(&diff).unwrap();
                let s = tape.sum(&sq).unwrap();
                let term = tape.scale(&s, sim / (cs.lists[i].len() as f64 * counted)).unwrap();
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(&a, &term).unwrap(),
                });
            }
        }
        let l2 = acc.unwrap();
        let g2 = tape.backward(&l2).unwrap().get(&p2).unwrap();
        for (a, b) in gp.values().iter().zip(g2.values()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }
}
