//! Acceptance suite: one PASS/FAIL line per criterion; exits nonzero if any
//! criterion fails.

use std::collections::HashSet;
use std::fs;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tta_cli::config::RunConfig;
use tta_cli::harness::{self, Prepared, SweepParam};
use tta_core::adapt::{adapt_stream, Ablation, AdaptConfig, Method};
use tta_core::autodiff::{finite_difference_check, softmax_rows, Tape, Tensor};
use tta_core::bank::{argmax, entropy, knn, prototypes, MemoryBank};
use tta_core::data::stream_batches;
use tta_core::losses::{
    consistency_mask, is_active, mslc_loss_batch, pl_loss, tent_entropy_loss, total_loss, tsd_loss, StoredNeighbor,
};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn probs(rng: &mut ChaCha8Rng, b: usize, c: usize) -> Tensor {
    Tensor::matrix(b, c, softmax_rows(&uniform(rng, b * c, -2.0, 2.0), b, c)).unwrap()
}

/// A random batch with neighbour lists drawn from a random stored set.
struct MslcCase {
    z: Vec<f64>,
    logits: Vec<f64>,
    bank_z: Vec<Vec<f64>>,
    bank_p: Vec<Vec<f64>>,
    lists: Vec<Vec<usize>>,
    b: usize,
    d: usize,
    c: usize,
}

impl MslcCase {
    fn new(rng: &mut ChaCha8Rng, b: usize, d: usize, c: usize) -> Self {
        let n = 8;
        let bank_z = (0..n).map(|_| uniform(rng, d, -1.5, 1.5)).collect();
        let bank_p = (0..n).map(|_| uniform(rng, c, -2.0, 2.0)).collect();
        let lists = (0..b)
            .map(|_| {
                let k = rng.random_range(0..4);
                (0..k).map(|_| rng.random_range(0..n)).collect()
            })
            .collect();
        MslcCase {
            z: uniform(rng, b * d, -1.5, 1.5),
            logits: uniform(rng, b * c, -2.0, 2.0),
            bank_z,
            bank_p,
            lists,
            b,
            d,
            c,
        }
    }

    fn neighbors(&self) -> Vec<Vec<StoredNeighbor<'_>>> {
        self.lists
            .iter()
            .map(|l| l.iter().map(|&j| StoredNeighbor { z: &self.bank_z[j], logits: &self.bank_p[j] }).collect())
            .collect()
    }

    fn z(&self) -> Tensor {
        Tensor::matrix(self.b, self.d, self.z.clone()).unwrap()
    }

    fn p(&self) -> Tensor {
        Tensor::matrix(self.b, self.c, self.logits.clone()).unwrap()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / ((na + 1e-12) * (nb + 1e-12))
    }

    /// The objective with every similarity frozen into a plain number,
    /// recorded term by term.
    fn constant_similarity_loss(&self, tape: &mut Tape, p: &Tensor) -> Option<Tensor> {
        let probs = tape.softmax(p).unwrap();
        let counted = self.lists.iter().filter(|l| !l.is_empty()).count() as f64;
        let mut acc: Option<Tensor> = None;
        for i in 0..self.b {
            for &j in &self.lists[i] {
                let sim = Self::cosine(&self.z[i * self.d..(i + 1) * self.d], &self.bank_z[j]);
                let mut sel = vec![0.0; self.b];
                sel[i] = 1.0;
                let row = tape.matmul(&Tensor::matrix(1, self.b, sel).unwrap(), &probs).unwrap();
                let pj = Tensor::matrix(1, self.c, softmax_rows(&self.bank_p[j], 1, self.c)).unwrap();
                let diff = tape.sub(&row, &pj).unwrap();
                let sq = tape.square(&diff).unwrap();
                let s = tape.sum(&sq).unwrap();
                let term = tape.scale(&s, sim / (self.lists[i].len() as f64 * counted)).unwrap();
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(&a, &term).unwrap(),
                });
            }
        }
        acc
    }
}

fn criterion_1() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let instances = 60;
    let mut worst = [0.0f64; 6];
    let names = ["per-sample TSD", "batch TSD", "MSLC", "total", "Tent", "PL"];
    for _ in 0..instances {
        let (b, c) = (6, 4);
        let y1 = probs(&mut rng, 1, c);
        let x1 = Tensor::matrix(1, c, uniform(&mut rng, c, -2.0, 2.0)).unwrap();
        let e = finite_difference_check(|t, p| tsd_loss(t, p, &y1, &[true]), &x1, 1e-5).map_err(|e| e.to_string())?;
        worst[0] = worst[0].max(e);

        let y = probs(&mut rng, b, c);
        let mut mask: Vec<bool> = (0..b).map(|_| rng.random_bool(0.6)).collect();
        mask[0] = true;
        let x = Tensor::matrix(b, c, uniform(&mut rng, b * c, -2.0, 2.0)).unwrap();
        let e = finite_difference_check(|t, p| tsd_loss(t, p, &y, &mask), &x, 1e-5).map_err(|e| e.to_string())?;
        worst[1] = worst[1].max(e);

        let mut case = MslcCase::new(&mut rng, b, 5, c);
        case.lists[0] = vec![0, 1];
        let z = case.z();
        let nb = case.neighbors();
        let e = finite_difference_check(|t, p| mslc_loss_batch(t, &z, p, &nb), &case.p(), 1e-5).map_err(|e| e.to_string())?;
        worst[2] = worst[2].max(e);

        let e = finite_difference_check(
            |t, p| {
                let tsd = tsd_loss(t, p, &y, &mask)?;
                let mslc = mslc_loss_batch(t, &z, p, &nb)?;
                total_loss(t, &tsd, &mslc, 0.1)
            },
            &case.p(),
            1e-5,
        )
        .map_err(|e| e.to_string())?;
        worst[3] = worst[3].max(e);

        let e = finite_difference_check(|t, p| tent_entropy_loss(t, p), &x, 1e-5).map_err(|e| e.to_string())?;
        worst[4] = worst[4].max(e);

        let sharp = Tensor::matrix(b, c, uniform(&mut rng, b * c, -4.0, 4.0)).unwrap();
        let e = finite_difference_check(|t, p| Ok(pl_loss(t, p, 0.5)?.0), &sharp, 1e-5).map_err(|e| e.to_string())?;
        worst[5] = worst[5].max(e);
    }
    let detail: Vec<String> = names.iter().zip(&worst).map(|(n, w)| format!("{n} {w:.1e}")).collect();
    ensure(worst.iter().all(|&w| w < 1e-4), || format!("max relative error ≥ 1e-4: {}", detail.join(", ")))?;
    Ok(format!("{instances} instances each; max rel err {}", detail.join(", ")))
}

fn random_bank(rng: &mut ChaCha8Rng, n: usize, d: usize, c: usize) -> MemoryBank {
    let w = Tensor::matrix(c, d, uniform(rng, c * d, -1.0, 1.0)).unwrap();
    let mut bank = MemoryBank::init_from_classifier(&w).unwrap();
    let extra = n.saturating_sub(c);
    if extra > 0 {
        let z = Tensor::matrix(extra, d, uniform(rng, extra * d, -1.0, 1.0)).unwrap();
        let p = Tensor::matrix(extra, c, uniform(rng, extra * c, -3.0, 3.0)).unwrap();
        bank.insert_batch(&z, &p).unwrap();
    }
    bank
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    // prototypes with the entropy filter against sort-and-average
    let mut proto_checks = 0;
    for trial in 0..60 {
        let (d, c) = (6, 4);
        let n = rng.random_range(c..=200);
        let bank = random_bank(&mut rng, n, d, c);
        let m = [1, 5, 20][trial % 3];
        let got = prototypes(&bank, Some(m));
        for k in 0..c {
            let mut members: Vec<(f64, u64, &Vec<f64>)> = bank
                .entries()
                .iter()
                .filter(|e| argmax(&e.p) == k)
                .map(|e| (entropy(&e.p), e.insert_index, &e.z))
                .collect();
            // lowest entropy first, older first among equals
            members.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let keep = members.len().saturating_sub(m).max(1);
            let mut survivors: Vec<(f64, u64, &Vec<f64>)> = members[..keep].to_vec();
            survivors.sort_by_key(|s| s.1);
            let mut mean = vec![0.0; d];
            for s in &survivors {
                for (a, v) in mean.iter_mut().zip(s.2) {
                    *a += v;
                }
            }
            mean.iter_mut().for_each(|a| *a /= survivors.len() as f64);
            ensure(got.centroids[k] == mean && got.support_count[k] == survivors.len(), || {
                format!("prototype mismatch (bank {n}, M {m}, class {k})")
            })?;
            proto_checks += 1;
        }
    }

    // KNN against an exhaustive scan
    let mut knn_checks = 0;
    for trial in 0..100 {
        let d = 8;
        let n = rng.random_range(5..=500);
        let bank = random_bank(&mut rng, n, d, 5);
        let q = uniform(&mut rng, d, -1.0, 1.0);
        let k = [1, 3, 5, 10][trial % 4];
        let exclude: HashSet<u64> = if trial % 2 == 0 { HashSet::from([rng.random_range(0..n as u64)]) } else { HashSet::new() };
        let mut all: Vec<(f64, u64)> = bank
            .entries()
            .iter()
            .filter(|e| !exclude.contains(&e.insert_index))
            .map(|e| (MslcCase::cosine(&q, &e.z), e.insert_index))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let expected: Vec<u64> = all.iter().take(k).map(|a| a.1).collect();
        let got: Vec<u64> = knn(&bank, &q, k, &exclude).iter().map(|n| n.entry.insert_index).collect();
        ensure(got == expected, || format!("knn mismatch (bank {n}, K {k})"))?;
        knn_checks += 1;
    }

    // per-sample and batch self-distillation against a loop
    let mut tsd_err = 0.0f64;
    for _ in 0..100 {
        let (b, c) = (9, 5);
        let logits = uniform(&mut rng, b * c, -3.0, 3.0);
        let y = probs(&mut rng, b, c);
        let mask: Vec<bool> = (0..b).map(|_| rng.random_bool(0.5)).collect();
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::matrix(b, c, logits.clone()).unwrap());
        let got = tsd_loss(&mut tape, &p, &y, &mask).map_err(|e| e.to_string())?.item();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..b {
            if mask[i] {
                let s = softmax_rows(&logits[i * c..(i + 1) * c], 1, c);
                let ce: f64 = -(0..c).map(|k| s[k] * y.row(i)[k].ln()).sum::<f64>();
                num += ce;
                den += 1.0;
            }
        }
        let expected = if den == 0.0 { 0.0 } else { num / den };
        tsd_err = tsd_err.max((got - expected).abs());
    }
    ensure(tsd_err <= 1e-12, || format!("self-distillation loop error {tsd_err:e}"))?;

    // local clustering against the constant-similarity oracle
    let (mut mslc_val, mut mslc_grad) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let mut case = MslcCase::new(&mut rng, 7, 6, 4);
        case.lists[0] = vec![2, 3, 5];
        let mut tape = Tape::new();
        let z = tape.leaf(case.z());
        let p = tape.leaf(case.p());
        let l = mslc_loss_batch(&mut tape, &z, &p, &case.neighbors()).map_err(|e| e.to_string())?;
        let g = tape.backward(&l).map_err(|e| e.to_string())?.get(&p).unwrap();
        let mut t2 = Tape::new();
        let p2 = t2.leaf(case.p());
        let l2 = case.constant_similarity_loss(&mut t2, &p2).unwrap();
        let g2 = t2.backward(&l2).map_err(|e| e.to_string())?.get(&p2).unwrap();
        mslc_val = mslc_val.max((l.item() - l2.item()).abs());
        for (a, b) in g.values().iter().zip(g2.values()) {
            mslc_grad = mslc_grad.max((a - b).abs());
        }
    }
    ensure(mslc_val <= 1e-12 && mslc_grad <= 1e-12, || {
        format!("local clustering oracle error: value {mslc_val:e}, gradient {mslc_grad:e}")
    })?;

    // consistency mask against scalar argmax comparison
    for _ in 0..200 {
        let p = Tensor::matrix(5, 3, uniform(&mut rng, 15, -1.0, 1.0)).unwrap();
        let y = probs(&mut rng, 5, 3);
        let got = consistency_mask(&p, &y).map_err(|e| e.to_string())?;
        for i in 0..5 {
            let ap = (0..3).fold(0, |best, k| if p.row(i)[k] > p.row(i)[best] { k } else { best });
            let ay = (0..3).fold(0, |best, k| if y.row(i)[k] > y.row(i)[best] { k } else { best });
            ensure(got[i] == (ap == ay), || "consistency mask mismatch".into())?;
        }
    }
    Ok(format!(
        "{proto_checks} prototype classes exact, {knn_checks} knn queries identical, TSD err {tsd_err:.1e}, MSLC err {:.1e}",
        mslc_val.max(mslc_grad)
    ))
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3003);
    let mut changed = 0;
    for _ in 0..50 {
        let mut case = MslcCase::new(&mut rng, 6, 5, 3);
        case.lists[0] = vec![1, 4];
        // z feeds only the similarity factor
        let mut tape = Tape::new();
        let z = tape.leaf(case.z());
        let p = tape.leaf(case.p());
        let l = mslc_loss_batch(&mut tape, &z, &p, &case.neighbors()).map_err(|e| e.to_string())?;
        let grads = tape.backward(&l).map_err(|e| e.to_string())?;
        let gz = grads.get(&z).unwrap();
        ensure(gz.values().iter().all(|&v| v == 0.0), || "nonzero gradient through the similarity".into())?;

        // perturbing only the similarity input moves the value, not the
        // (zero) gradient through it
        let mut shifted = case.z.clone();
        shifted.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        let mut t2 = Tape::new();
        let z2 = t2.leaf(Tensor::matrix(case.b, case.d, shifted).unwrap());
        let p2 = t2.leaf(case.p());
        let l2 = mslc_loss_batch(&mut t2, &z2, &p2, &case.neighbors()).map_err(|e| e.to_string())?;
        let g2 = t2.backward(&l2).map_err(|e| e.to_string())?;
        ensure(g2.get(&z2).unwrap().values().iter().all(|&v| v == 0.0), || "perturbed path carries gradient".into())?;
        if (l2.item() - l.item()).abs() > 1e-9 {
            changed += 1;
        }

        // with logits computed from z, the gradient equals the one of the
        // graph with similarities frozen to constants
        let w = Tensor::matrix(case.c, case.d, uniform(&mut rng, case.c * case.d, -1.0, 1.0)).unwrap();
        let mut t3 = Tape::new();
        let z3 = t3.leaf(case.z());
        let wt = t3.transpose(&w).map_err(|e| e.to_string())?;
        let p3 = t3.matmul(&z3, &wt).map_err(|e| e.to_string())?;
        let l3 = mslc_loss_batch(&mut t3, &z3, &p3, &case.neighbors()).map_err(|e| e.to_string())?;
        let g3 = t3.backward(&l3).map_err(|e| e.to_string())?.get(&z3).unwrap();
        let mut t4 = Tape::new();
        let z4 = t4.leaf(case.z());
        let wt4 = t4.transpose(&w).map_err(|e| e.to_string())?;
        let p4 = t4.matmul(&z4, &wt4).map_err(|e| e.to_string())?;
        let l4 = case.constant_similarity_loss(&mut t4, &p4).unwrap();
        let g4 = t4.backward(&l4).map_err(|e| e.to_string())?.get(&z4).unwrap();
        let err = g3.values().iter().zip(g4.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(err <= 1e-12, || format!("retained-path gradient differs by {err:e}"))?;
    }
    ensure(changed == 50, || format!("similarity perturbation changed the loss in only {changed}/50 cases"))?;
    Ok("similarity gradient exactly zero; perturbation changes value only; retained path matches constant-similarity graph".into())
}

fn criterion_4(prepared: &Prepared) -> Check {
    let (b, c) = (5, 3);
    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::matrix(b, c, vec![0.3; b * c]).unwrap());
    let y = Tensor::matrix(b, c, vec![1.0 / 3.0; b * c]).unwrap();
    let tsd = tsd_loss(&mut tape, &p, &y, &[false; 5]).map_err(|e| e.to_string())?;
    ensure(tsd.item() == 0.0 && !is_active(&tsd), || format!("masked TSD = {}", tsd.item()))?;
    let total = total_loss(&mut tape, &tsd, &Tensor::scalar(0.0), 0.1).map_err(|e| e.to_string())?;
    ensure(!is_active(&total) && total.item() == 0.0, || "masked total loss is active".into())?;

    // dead features mask every sample; no step may touch the parameters
    let mut model = prepared.model.clone();
    let last = model.parameters().iter().position(|p| p.name == "head.weight").unwrap() - 2;
    for i in [last, last + 1] {
        model.parameters_mut()[i].values.iter_mut().for_each(|v| *v = 0.0);
    }
    let before = model.clone();
    let stream = stream_batches(&prepared.target.subset(&(0..300).collect::<Vec<_>>()), 64, 0).map_err(|e| e.to_string())?;
    let cfg = AdaptConfig {
        ablation: Ablation { sd: true, ef: true, cf: true, mslc: false },
        ..AdaptConfig::default()
    };
    let metrics = adapt_stream(&mut model, &stream, &cfg).map_err(|e| e.to_string())?;
    ensure(model.parameters() == before.parameters(), || "parameters moved on fully masked batches".into())?;
    ensure(metrics.per_batch_loss.iter().all(|l| !l.is_nan()), || "NaN loss".into())?;
    ensure(metrics.skipped_batches == stream.len() && metrics.optimizer_steps == 0, || {
        format!("{} skipped, {} steps", metrics.skipped_batches, metrics.optimizer_steps)
    })?;

    // short final batches
    let idx: Vec<usize> = (0..129).collect();
    let short = stream_batches(&prepared.target.subset(&idx), 64, 3).map_err(|e| e.to_string())?;
    ensure(short.last().map(|b| b.len()) == Some(1), || "expected a final batch of one".into())?;
    for method in Method::ALL {
        let mut m = prepared.model.clone();
        let cfg = AdaptConfig { method, ..AdaptConfig::default() };
        let r = adapt_stream(&mut m, &short, &cfg).map_err(|e| format!("{method}: {e}"))?;
        ensure(r.per_batch_size == vec![64, 64, 1], || format!("{method}: batches {:?}", r.per_batch_size))?;
        ensure(r.cumulative_accuracy.is_finite(), || format!("{method}: non-finite accuracy"))?;
    }
    Ok("masked batch: zero inactive loss, no parameter change, no NaN; final batch of 1 ok for all methods".into())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn accuracies(prepared: &[Prepared], cfg_for: impl Fn(u64) -> AdaptConfig) -> Result<Vec<f64>, String> {
    prepared
        .iter()
        .map(|p| {
            let cfg = cfg_for(p.seed);
            let stream = stream_batches(&p.target, cfg.batch_size, p.seed).map_err(|e| e.to_string())?;
            let mut m = p.model.clone();
            Ok(adapt_stream(&mut m, &stream, &cfg).map_err(|e| e.to_string())?.cumulative_accuracy)
        })
        .collect()
}

fn method_means(prepared: &[Prepared]) -> Result<Vec<(Method, f64)>, String> {
    Method::ALL
        .into_iter()
        .map(|method| {
            let accs = accuracies(prepared, |seed| AdaptConfig { method, seed, ..AdaptConfig::default() })?;
            Ok((method, mean(&accs)))
        })
        .collect()
}

fn lookup(means: &[(Method, f64)], m: Method) -> f64 {
    means.iter().find(|(x, _)| *x == m).map(|(_, v)| *v).unwrap()
}

fn fmt_means(means: &[(Method, f64)]) -> String {
    means.iter().map(|(m, v)| format!("{m} {:.2}", 100.0 * v)).collect::<Vec<_>>().join(", ")
}

fn criterion_5(means: &[(Method, f64)], elapsed: Duration) -> Check {
    let ours = lookup(means, Method::Ours);
    let erm = lookup(means, Method::Erm);
    let best_other = [Method::Tent, Method::Pl, Method::Bn].iter().map(|&m| lookup(means, m)).fold(f64::MIN, f64::max);
    let detail = format!("{} ({:.0} s)", fmt_means(means), elapsed.as_secs_f64());
    ensure(ours >= erm + 0.03, || format!("ours - erm = {:+.2} points < 3: {detail}", 100.0 * (ours - erm)))?;
    ensure(ours >= best_other, || format!("ours below best baseline by {:.2} points: {detail}", 100.0 * (best_other - ours)))?;
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(detail)
}

fn criterion_6(prepared: &[Prepared]) -> Check {
    let mut rungs = Vec::new();
    for (name, ablation) in Ablation::ladder() {
        let accs = accuracies(prepared, |seed| AdaptConfig { seed, ablation, ..AdaptConfig::default() })?;
        rungs.push((name, mean(&accs)));
    }
    let detail = rungs.iter().map(|(n, v)| format!("{n} {:.2}", 100.0 * v)).collect::<Vec<_>>().join(", ");
    for w in rungs.windows(2) {
        ensure(w[1].1 >= w[0].1 - 0.005, || format!("{} drops {:.2} points below {}: {detail}", w[1].0, 100.0 * (w[0].1 - w[1].1), w[0].0))?;
    }
    ensure(rungs[3].1 > rungs[0].1, || format!("full ladder not above SD: {detail}"))?;
    Ok(detail)
}

fn criterion_7(cov: &[(Method, f64)], label: &[(Method, f64)]) -> Check {
    let mut parts = Vec::new();
    let mut ok = true;
    for m in [Method::Ours, Method::Tent, Method::Pl] {
        let g_label = lookup(label, m) - lookup(label, Method::Erm);
        let g_cov = lookup(cov, m) - lookup(cov, Method::Erm);
        ok &= g_label < g_cov;
        parts.push(format!("{m} label {:+.2} vs covariate {:+.2}", 100.0 * g_label, 100.0 * g_cov));
    }
    let detail = parts.join("; ");
    ensure(ok, || format!("label-shift gain not below covariate gain: {detail}"))?;
    Ok(detail)
}

fn criterion_8(prepared: &Prepared) -> Check {
    let full = stream_batches(&prepared.target, 64, prepared.seed).map_err(|e| e.to_string())?;
    for method in Method::ALL {
        let cfg = AdaptConfig { method, ..AdaptConfig::default() };
        let mut m = prepared.model.clone();
        let whole = adapt_stream(&mut m, &full, &cfg).map_err(|e| e.to_string())?;
        for cut in [1, 17, 40] {
            let mut m = prepared.model.clone();
            let prefix = adapt_stream(&mut m, &full[..cut], &cfg).map_err(|e| e.to_string())?;
            ensure(prefix.predictions[..] == whole.predictions[..cut], || format!("{method}: prefix {cut} differs"))?;
            ensure(
                prefix.per_batch_loss.iter().zip(&whole.per_batch_loss).all(|(a, b)| a.to_bits() == b.to_bits()),
                || format!("{method}: prefix {cut} losses differ"),
            )?;
        }
    }
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    for d in &dirs {
        let cfg = RunConfig {
            seeds: vec![0],
            output_dir: d.path().to_path_buf(),
            ..RunConfig::default()
        };
        harness::run(&cfg).map_err(|e| e.to_string())?;
    }
    let mut files = 0;
    for entry in fs::read_dir(dirs[0].path().join("runs")).map_err(|e| e.to_string())? {
        let name = entry.map_err(|e| e.to_string())?.file_name();
        let a = fs::read(dirs[0].path().join("runs").join(&name)).map_err(|e| e.to_string())?;
        let b = fs::read(dirs[1].path().join("runs").join(&name)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{name:?} differs between identical runs"))?;
        files += 1;
    }
    ensure(files == Method::ALL.len(), || format!("expected {} run files, found {files}", Method::ALL.len()))?;
    Ok(format!("prefixes bit-exact for all methods; {files} per-run CSVs byte-identical across reruns"))
}

fn criterion_9() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = RunConfig {
        seeds: vec![0],
        output_dir: dir.path().to_path_buf(),
        ..RunConfig::default()
    };
    let grids = [
        (SweepParam::K, vec!["1", "3", "5", "10", "15", "20"]),
        (SweepParam::M, vec!["1", "5", "20", "50", "100", "NA"]),
    ];
    let mut parts = Vec::new();
    for (param, values) in grids {
        let values: Vec<String> = values.into_iter().map(String::from).collect();
        harness::sweep(&cfg, param, &values).map_err(|e| e.to_string())?;
        let text = fs::read_to_string(dir.path().join(format!("sweep_{}.csv", param.name()))).map_err(|e| e.to_string())?;
        let lines: Vec<&str> = text.lines().collect();
        ensure(lines.first() == Some(&"value,mean_accuracy,std"), || format!("bad header in sweep_{}", param.name()))?;
        ensure(lines.len() == 7, || format!("sweep_{} has {} rows", param.name(), lines.len() - 1))?;
        for (line, v) in lines[1..].iter().zip(&values) {
            let f: Vec<&str> = line.split(',').collect();
            let acc: f64 = f.get(1).and_then(|x| x.parse().ok()).unwrap_or(f64::NAN);
            let std: f64 = f.get(2).and_then(|x| x.parse().ok()).unwrap_or(f64::NAN);
            ensure(f.len() == 3 && f[0] == v && (0.0..=1.0).contains(&acc) && std >= 0.0, || format!("malformed row `{line}`"))?;
        }
        parts.push(format!("{} sweep 6 rows", param.name()));
    }
    Ok(parts.join(", "))
}

fn prepare_seeds(kind: &str) -> Result<Vec<Prepared>, String> {
    let cfg = RunConfig::from_toml(&format!("benchmark = \"{kind}\"\n"), &[]).map_err(|e| e.to_string())?;
    cfg.seeds.iter().map(|&s| harness::prepare(&cfg, s).map_err(|e| e.to_string())).collect()
}

fn main() {
    let mut failures = 0;
    let mut report = |n: usize, title: &str, start: Instant, r: Check| {
        let secs = start.elapsed().as_secs_f64();
        match r {
            Ok(d) => println!("PASS [{n}] {title}: {d} [{secs:.1} s]"),
            Err(d) => {
                failures += 1;
                println!("FAIL [{n}] {title}: {d} [{secs:.1} s]");
            }
        }
    };

    let t = Instant::now();
    report(1, "gradient soundness", t, criterion_1());
    let t = Instant::now();
    report(2, "oracle equivalence", t, criterion_2());
    let t = Instant::now();
    report(3, "detachment semantics", t, criterion_3());

    let t = Instant::now();
    let covariate = prepare_seeds("covariate");
    let cov_means = covariate.as_ref().map_err(Clone::clone).and_then(|p| method_means(p));
    let behavioural_time = t.elapsed();

    let t = Instant::now();
    let r = covariate.as_ref().map_err(Clone::clone).and_then(|p| criterion_4(&p[0]));
    report(4, "degenerate-batch safety", t, r);

    let t = Instant::now();
    let r = cov_means.as_ref().map_err(Clone::clone).and_then(|m| criterion_5(m, behavioural_time));
    report(5, "behavioural ordering (covariate shift)", t - behavioural_time, r);

    let t = Instant::now();
    let r = covariate.as_ref().map_err(Clone::clone).and_then(|p| criterion_6(p));
    report(6, "ablation ladder", t, r);

    let t = Instant::now();
    let r = prepare_seeds("label-shift")
        .and_then(|p| method_means(&p))
        .and_then(|label| criterion_7(cov_means.as_ref().map_err(Clone::clone)?, &label));
    report(7, "label-shift degradation", t, r);

    let t = Instant::now();
    let r = covariate.as_ref().map_err(Clone::clone).and_then(|p| criterion_8(&p[0]));
    report(8, "online causality and determinism", t, r);

    let t = Instant::now();
    report(9, "sensitivity sweeps", t, criterion_9());

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
