//! Memory bank of past embeddings and logits, entropy-filtered class
//! prototypes, prototype classification and nearest-neighbour retrieval.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::io::Write;

use crate::autodiff::{log_softmax_rows, norm, softmax_rows, Tensor, COSINE_NORM_EPS};
use crate::{Error, Result};

/// Logit magnitude given to the class of a classifier-initialized entry.
pub const INIT_LOGIT_SCALE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    ClassifierInit,
    Stream,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub z: Vec<f64>,
    pub p: Vec<f64>,
    /// Shannon entropy of `softmax(p)` in nats.
    pub entropy: f64,
    pub pseudo_label: usize,
    pub insert_index: u64,
    pub origin: Origin,
    z_norm: f64,
}

impl BankEntry {
    fn new(z: Vec<f64>, p: Vec<f64>, insert_index: u64, origin: Origin) -> Self {
        BankEntry {
            entropy: entropy(&p),
            pseudo_label: argmax(&p),
            z_norm: norm(&z),
            z,
            p,
            insert_index,
            origin,
        }
    }
}

/// Shannon entropy `-Σ σ(p) log σ(p)` of a logit vector, computed through the
/// max-shifted log-softmax.
pub fn entropy(p: &[f64]) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let ls = log_softmax_rows(p, 1, p.len());
    let h: f64 = -ls.iter().map(|&l| l.exp() * l).sum::<f64>();
    h.clamp(0.0, (p.len() as f64).ln())
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Append-only store of `(z, p)` pairs, seeded with one entry per class.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    entries: Vec<BankEntry>,
    dim: usize,
    num_classes: usize,
    next_index: u64,
    /// Maximum number of stream entries; older ones are evicted first.
    stream_cap: Option<usize>,
}

impl MemoryBank {
    /// One entry per class: `z` is the class's head weight row and `p` the
    /// one-hot logits scaled by [`INIT_LOGIT_SCALE`].
    pub fn init_from_classifier(head_weights: &Tensor) -> Result<MemoryBank> {
        if head_weights.shape().len() != 2 {
            return Err(Error::shape("init_from_classifier", "head weights must be a C×d matrix"));
        }
        let (c, d) = (head_weights.shape()[0], head_weights.shape()[1]);
        if c < 2 || d == 0 {
            return Err(Error::invalid("head must have at least two classes and a nonzero width"));
        }
        let mut bank = MemoryBank {
            entries: Vec::with_capacity(c),
            dim: d,
            num_classes: c,
            next_index: 0,
            stream_cap: None,
        };
        for k in 0..c {
            let row = head_weights.row(k);
            if row.iter().all(|&w| w == 0.0) {
                return Err(Error::invalid(format!("head weight row {k} is zero")));
            }
            let mut p = vec![0.0; c];
            p[k] = INIT_LOGIT_SCALE;
            bank.push(row.to_vec(), p, Origin::ClassifierInit);
        }
        Ok(bank)
    }

    /// Caps the number of stream entries kept (FIFO); classifier entries are
    /// never evicted.
    pub fn with_stream_cap(mut self, cap: Option<usize>) -> Self {
        self.stream_cap = cap;
        self.evict();
        self
    }

    fn push(&mut self, z: Vec<f64>, p: Vec<f64>, origin: Origin) -> u64 {
        let idx = self.next_index;
        self.next_index += 1;
        self.entries.push(BankEntry::new(z, p, idx, origin));
        idx
    }

    fn evict(&mut self) {
        let Some(cap) = self.stream_cap else { return };
        let stream = self.entries.iter().filter(|e| e.origin == Origin::Stream).count();
        let mut excess = stream.saturating_sub(cap);
        if excess == 0 {
            return;
        }
        self.entries.retain(|e| {
            if excess > 0 && e.origin == Origin::Stream {
                excess -= 1;
                false
            } else {
                true
            }
        });
    }

    /// Appends one entry per row, in order. Returns the assigned insert indices.
    pub fn insert_batch(&mut self, z_batch: &Tensor, p_batch: &Tensor) -> Result<Vec<u64>> {
        let (b, d) = (z_batch.rows(), z_batch.cols());
        if z_batch.is_empty() && p_batch.is_empty() {
            return Ok(Vec::new());
        }
        if d != self.dim || p_batch.cols() != self.num_classes || p_batch.rows() != b {
            return Err(Error::shape(
                "insert_batch",
                format!(
                    "expected z of width {} and p of width {} with equal rows, got {:?} and {:?}",
                    self.dim,
                    self.num_classes,
                    z_batch.shape(),
                    p_batch.shape()
                ),
            ));
        }
        let ids = (0..b)
            .map(|i| self.push(z_batch.row(i).to_vec(), p_batch.row(i).to_vec(), Origin::Stream))
            .collect();
        self.evict();
        Ok(ids)
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Writes one CSV record per entry:
    /// `insert_index,pseudo_label,entropy,z0..,p0..`.
    pub fn dump_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = vec!["insert_index".to_string(), "pseudo_label".into(), "entropy".into()];
        header.extend((0..self.dim).map(|j| format!("z{j}")));
        header.extend((0..self.num_classes).map(|k| format!("p{k}")));
        writeln!(w, "{}", header.join(","))?;
        for e in &self.entries {
            let mut row = vec![e.insert_index.to_string(), e.pseudo_label.to_string(), e.entropy.to_string()];
            row.extend(e.z.iter().map(|v| v.to_string()));
            row.extend(e.p.iter().map(|v| v.to_string()));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Per-class centroids of bank embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub centroids: Vec<Vec<f64>>,
    pub support_count: Vec<usize>,
}

/// Class prototypes from the bank. With `drop_highest = Some(m)`, the `m`
/// highest-entropy entries of every class are ignored (newer entries go first
/// on equal entropy); a class that would be emptied keeps its single
/// lowest-entropy entry.
pub fn prototypes(bank: &MemoryBank, drop_highest: Option<usize>) -> PrototypeSet {
    let c = bank.num_classes;
    let mut by_class: Vec<Vec<&BankEntry>> = vec![Vec::new(); c];
    for e in &bank.entries {
        by_class[e.pseudo_label].push(e);
    }
    let mut centroids = Vec::with_capacity(c);
    let mut support_count = Vec::with_capacity(c);
    for members in by_class {
        let survivors: Vec<&BankEntry> = match drop_highest {
            None => members,
            Some(m) => {
                let mut ranked = members.clone();
                // highest entropy first; newer first among equals
                ranked.sort_by(|a, b| {
                    b.entropy
                        .partial_cmp(&a.entropy)
                        .unwrap_or(Ordering::Equal)
                        .then(b.insert_index.cmp(&a.insert_index))
                });
                if ranked.len() > m {
                    let mut kept = ranked.split_off(m);
                    kept.sort_by_key(|e| e.insert_index);
                    kept
                } else {
                    ranked.last().map(|e| vec![*e]).unwrap_or_default()
                }
            }
        };
        assert!(!survivors.is_empty(), "every class has a classifier-initialized entry");
        let mut centroid = vec![0.0; bank.dim];
        for e in &survivors {
            for (c, z) in centroid.iter_mut().zip(&e.z) {
                *c += z;
            }
        }
        let n = survivors.len() as f64;
        centroid.iter_mut().for_each(|v| *v /= n);
        centroids.push(centroid);
        support_count.push(survivors.len());
    }
    PrototypeSet {
        centroids,
        support_count,
    }
}

/// Softmax over cosine similarities between `z` and every prototype.
pub fn proto_classify(z: &[f64], protos: &PrototypeSet) -> Result<Vec<f64>> {
    let zn = norm(z);
    if zn == 0.0 {
        return Err(Error::invalid("cannot classify a zero embedding"));
    }
    let sims: Vec<f64> = protos
        .centroids
        .iter()
        .map(|c| {
            let dot: f64 = z.iter().zip(c).map(|(a, b)| a * b).sum();
            dot / ((zn + COSINE_NORM_EPS) * (norm(c) + COSINE_NORM_EPS))
        })
        .collect();
    Ok(softmax_rows(&sims, 1, sims.len()))
}

/// [`proto_classify`] applied to every row of a batch.
pub fn proto_classify_batch(z: &Tensor, protos: &PrototypeSet) -> Result<Tensor> {
    let c = protos.centroids.len();
    let mut out = Vec::with_capacity(z.rows() * c);
    for i in 0..z.rows() {
        out.extend(proto_classify(z.row(i), protos)?);
    }
    Tensor::matrix(z.rows(), c, out)
}

#[derive(Clone, Copy, Debug)]
pub struct Neighbor<'a> {
    pub entry: &'a BankEntry,
    pub sim: f64,
}

/// The `k` entries most cosine-similar to `z`, skipping `exclude`d insert
/// indices. Ties go to the smaller insert index; results are in descending
/// similarity. Returns fewer than `k` when the bank runs out.
pub fn knn<'a>(bank: &'a MemoryBank, z: &[f64], k: usize, exclude: &HashSet<u64>) -> Vec<Neighbor<'a>> {
    let zn = norm(z) + COSINE_NORM_EPS;
    let mut scored: Vec<Neighbor<'a>> = bank
        .entries
        .iter()
        .filter(|e| !exclude.contains(&e.insert_index))
        .map(|e| {
            let dot: f64 = z.iter().zip(&e.z).map(|(a, b)| a * b).sum();
            Neighbor {
                entry: e,
                sim: dot / (zn * (e.z_norm + COSINE_NORM_EPS)),
            }
        })
        .collect();
    let order = |a: &Neighbor, b: &Neighbor| {
        b.sim
            .partial_cmp(&a.sim)
            .unwrap_or(Ordering::Equal)
            .then(a.entry.insert_index.cmp(&b.entry.insert_index))
    };
    if k == 0 {
        return Vec::new();
    }
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_by(order);
    scored
}
