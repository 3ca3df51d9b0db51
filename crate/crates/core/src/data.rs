//! Synthetic clustered datasets, vector-space augmentations, seeded batch
//! iteration and a reader for the CIFAR binary layout.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Additive Gaussian noise scale.
    pub sigma: f64,
    /// Per-sample scale drawn from `U(1 − j, 1 + j)`.
    pub scale_jitter: f64,
    /// Probability of zeroing each coordinate.
    pub mask_prob: f64,
}

impl AugmentParams {
    pub const NONE: AugmentParams = AugmentParams {
        sigma: 0.0,
        scale_jitter: 0.0,
        mask_prob: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma >= 0.0
            && self.sigma.is_finite()
            && (0.0..1.0).contains(&self.scale_jitter)
            && (0.0..1.0).contains(&self.mask_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("augmentation {self:?}")))
        }
    }
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            sigma: 0.15,
            scale_jitter: 0.2,
            mask_prob: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Minimum pairwise distance between the unit-norm cluster means.
    pub separation: f64,
    /// Within-cluster Gaussian spread.
    pub spread: f64,
    pub augment: AugmentParams,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            per_class: 100,
            dim: 32,
            separation: 1.0,
            spread: 0.15,
            augment: AugmentParams::default(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Largest separation achievable by `k` unit vectors (regular simplex).
    pub fn max_separation(k: usize) -> f64 {
        (2.0 * k as f64 / (k as f64 - 1.0)).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if k < 2 {
            return Err(Error::BadSpec(format!("need at least 2 classes, got {k}")));
        }
        if self.per_class == 0 || self.dim == 0 {
            return Err(Error::BadSpec("empty dataset".into()));
        }
        if k > self.dim {
            return Err(Error::BadSpec(format!(
                "{k} classes do not fit in {} dimensions",
                self.dim
            )));
        }
        if !(self.separation >= 0.0) || self.separation > Self::max_separation(k) + 1e-12 {
            return Err(Error::BadSpec(format!(
                "separation {} unreachable for {k} unit means (max {:.4})",
                self.separation,
                Self::max_separation(k)
            )));
        }
        if !(self.spread >= 0.0) || !self.spread.is_finite() {
            return Err(Error::BadSpec(format!("spread {}", self.spread)));
        }
        self.augment
            .validate()
            .map_err(|e| Error::BadSpec(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Matrix,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != samples.rows() {
            return Err(Error::ShapeMismatch {
                expected: (samples.rows(), 1),
                found: (labels.len(), 1),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::IndexOutOfRange {
                index: l,
                len: num_classes,
            });
        }
        let ids = (0..labels.len()).collect();
        Ok(Self {
            samples,
            labels,
            ids,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    /// Rows `idx`, re-indexed densely.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: self.samples.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: (0..idx.len()).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Stratified split: the first `train_frac` of every (shuffled) class
    /// goes to the first dataset.
    pub fn split(&self, train_frac: f64, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
        if !(0.0 < train_frac && train_frac < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "train fraction {train_frac}"
            )));
        }
        let mut train = Vec::new();
        let mut held = Vec::new();
        for c in 0..self.num_classes {
            let mut members: Vec<usize> =
                (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            rng.shuffle(&mut members);
            let cut = (members.len() as f64 * train_frac).round() as usize;
            train.extend_from_slice(&members[..cut]);
            held.extend_from_slice(&members[cut..]);
        }
        train.sort_unstable();
        held.sort_unstable();
        Ok((self.subset(&train), self.subset(&held)))
    }
}

/// Unit-norm cluster means forming a randomly rotated regular simplex, so the
/// pairwise distance is the maximum `√(2K/(K−1))`.
fn simplex_means(k: usize, dim: usize, rng: &mut Rng) -> Matrix {
    // random orthonormal k-frame by Gram-Schmidt
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for b in &basis {
            let p = crate::linalg::dot(&v, b);
            crate::linalg::axpy(-p, b, &mut v);
        }
        let n = crate::linalg::norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    let frame = Matrix::from_rows(&basis);
    let centered = frame.centered();
    let mut out = centered;
    for i in 0..k {
        let row = out.row_mut(i);
        let n = crate::linalg::norm(row);
        row.iter_mut().for_each(|x| *x /= n);
    }
    out
}

pub fn synth_generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let means = simplex_means(spec.num_classes, spec.dim, &mut rng);
    let n = spec.num_classes * spec.per_class;
    let mut samples = Matrix::zeros(n, spec.dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.num_classes;
        let mu = means.row(c);
        let row = samples.row_mut(i);
        for (x, m) in row.iter_mut().zip(mu) {
            *x = m + spec.spread * rng.normal();
        }
        labels.push(c);
    }
    Dataset::new(samples, labels, spec.num_classes)
}

/// Scale jitter, then additive noise, then coordinate masking.
pub fn augment(x: &Matrix, params: &AugmentParams, rng: &mut Rng) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let s = if params.scale_jitter > 0.0 {
            rng.uniform_range(1.0 - params.scale_jitter, 1.0 + params.scale_jitter)
        } else {
            1.0
        };
        for v in out.row_mut(i) {
            *v *= s;
            if params.sigma > 0.0 {
                *v += params.sigma * rng.normal();
            }
            if params.mask_prob > 0.0 && rng.uniform() < params.mask_prob {
                *v = 0.0;
            }
        }
    }
    out
}

/// `n` augmented views of the same samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch {
    pub views: Vec<Matrix>,
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
}

impl ViewBatch {
    pub fn view_a(&self) -> &Matrix {
        &self.views[0]
    }

    pub fn view_b(&self) -> &Matrix {
        &self.views[1]
    }
}

/// Endless epoch-shuffled batches. A trailing partial batch is dropped.
#[derive(Debug, Clone)]
pub struct BatchIter {
    ds: Dataset,
    batch: usize,
    n_views: usize,
    params: AugmentParams,
    order: Vec<usize>,
    pos: usize,
    shuffle_rng: Rng,
    aug_rng: Rng,
    epoch: usize,
}

pub fn batch_iter(
    ds: &Dataset,
    batch: usize,
    n_views: usize,
    params: AugmentParams,
    rng: &Rng,
) -> Result<BatchIter> {
    if batch > ds.len() {
        return Err(Error::BatchTooLarge {
            batch,
            len: ds.len(),
        });
    }
    if batch == 0 {
        return Err(Error::InvalidParameter("batch size 0".into()));
    }
    if n_views < 2 {
        return Err(Error::TooFewViews(n_views));
    }
    params.validate()?;
    Ok(BatchIter {
        ds: ds.clone(),
        batch,
        n_views,
        params,
        order: Vec::new(),
        pos: 0,
        shuffle_rng: rng.fork(1),
        aug_rng: rng.fork(2),
        epoch: 0,
    })
}

impl BatchIter {
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch(&mut self) -> ViewBatch {
        if self.order.is_empty() || self.pos + self.batch > self.order.len() {
            self.order = (0..self.ds.len()).collect();
            self.shuffle_rng.shuffle(&mut self.order);
            self.pos = 0;
            self.epoch += 1;
        }
        let idx = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        let clean = self.ds.samples.select_rows(&idx);
        let views = (0..self.n_views)
            .map(|_| augment(&clean, &self.params, &mut self.aug_rng))
            .collect();
        ViewBatch {
            views,
            ids: idx.iter().map(|&i| self.ds.ids[i]).collect(),
            labels: idx.iter().map(|&i| self.ds.labels[i]).collect(),
        }
    }
}

impl Iterator for BatchIter {
    type Item = ViewBatch;

    fn next(&mut self) -> Option<ViewBatch> {
        Some(self.next_batch())
    }
}

pub const CIFAR_PIXELS: usize = 3072;
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.247, 0.243, 0.261];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarLayout {
    /// One label byte per record.
    Cifar10,
    /// Coarse and fine label bytes; the fine label is kept.
    Cifar100,
}

impl CifarLayout {
    pub fn record_len(self) -> usize {
        match self {
            CifarLayout::Cifar10 => 1 + CIFAR_PIXELS,
            CifarLayout::Cifar100 => 2 + CIFAR_PIXELS,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarLayout::Cifar10 => 10,
            CifarLayout::Cifar100 => 100,
        }
    }
}

/// Picks the layout whose record length divides the file length, preferring
/// CIFAR-100 when both do.
pub fn detect_cifar_layout(len: usize) -> Result<CifarLayout> {
    if len == 0 {
        return Err(Error::MalformedFile("empty file".into()));
    }
    for layout in [CifarLayout::Cifar100, CifarLayout::Cifar10] {
        if len.is_multiple_of(layout.record_len()) {
            return Ok(layout);
        }
    }
    let rec = CifarLayout::Cifar10.record_len();
    Err(Error::TruncatedRecord {
        record: len / rec,
        got: len % rec,
        want: rec,
    })
}

pub fn cifar_parse(
    bytes: &[u8],
    layout: Option<CifarLayout>,
    subset: Option<usize>,
) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(Error::MalformedFile("empty file".into()));
    }
    let layout = match layout {
        Some(l) => l,
        None => detect_cifar_layout(bytes.len())?,
    };
    let rec = layout.record_len();
    let whole = bytes.len() / rec;
    if !bytes.len().is_multiple_of(rec) {
        return Err(Error::TruncatedRecord {
            record: whole,
            got: bytes.len() % rec,
            want: rec,
        });
    }
    let n = subset.map_or(whole, |s| s.min(whole));
    let label_bytes = rec - CIFAR_PIXELS;
    let mut samples = Matrix::zeros(n, CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, record) in bytes.chunks_exact(rec).take(n).enumerate() {
        let label = record[label_bytes - 1] as usize;
        if label >= layout.num_classes() {
            return Err(Error::MalformedFile(format!(
                "record {i} has label {label}"
            )));
        }
        labels.push(label);
        let row = samples.row_mut(i);
        for (j, (&p, out)) in record[label_bytes..].iter().zip(row.iter_mut()).enumerate() {
            let ch = j / 1024;
            *out = (p as f64 / 255.0 - CIFAR_MEAN[ch]) / CIFAR_STD[ch];
        }
    }
    Dataset::new(samples, labels, layout.num_classes())
}

pub fn cifar_read(path: &Path, subset: Option<usize>) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    cifar_parse(&bytes, None, subset)
}

/// Writes `id,label,f0..fD-1` rows.
pub fn write_dataset_csv<W: Write>(ds: &Dataset, w: &mut W) -> Result<()> {
    write!(w, "id,label")?;
    for j in 0..ds.dim() {
        write!(w, ",f{j}")?;
    }
    writeln!(w)?;
    for i in 0..ds.len() {
        write!(w, "{},{}", ds.ids[i], ds.labels[i])?;
        for v in ds.samples.row(i) {
            write!(w, ",{v:?}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_dataset_csv<R: BufRead>(r: R) -> Result<Dataset> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::MalformedFile("empty csv".into()))??;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.len() < 3 || cols[0] != "id" || cols[1] != "label" {
        return Err(Error::MalformedFile(format!("bad header `{header}`")));
    }
    let dim = cols.len() - 2;
    let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::MalformedFile(format!("line {}", n + 2));
        let mut it = line.trim().split(',');
        let id: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let label: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let feats: Vec<f64> = it
            .map(|s| s.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if feats.len() != dim {
            return Err(bad());
        }
        rows.push((id, label, feats));
    }
    rows.sort_by_key(|r| r.0);
    if rows.iter().enumerate().any(|(i, r)| r.0 != i) {
        return Err(Error::MalformedFile("ids are not dense".into()));
    }
    let num_classes = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    let labels = rows.iter().map(|r| r.1).collect();
    let data = rows.into_iter().flat_map(|r| r.2).collect::<Vec<_>>();
    let n = data.len() / dim;
    Dataset::new(Matrix::from_vec(n, dim, data)?, labels, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_masses() {
        let spec = SyntheticSpec {
            num_classes: 2,
            per_class: 5,
            dim: 3,
            separation: 2.0,
            spread: 0.0,
            augment: AugmentParams::NONE,
            seed: 1,
        };
        let ds = synth_generate(&spec).unwrap();
        let (a, b) = (ds.samples.row(0), ds.samples.row(1));
        let dist: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!((dist - 2.0).abs() < 1e-9);
        for i in 0..ds.len() {
            assert_eq!(ds.samples.row(i), ds.samples.row(ds.labels[i]));
        }
    }

    #[test]
    fn default_dataset_is_balanced_and_deterministic() {
        let ds = synth_generate(&SyntheticSpec::default()).unwrap();
        assert_eq!(ds.len(), 1000);
        for c in 0..10 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == c).count(), 100);
        }
        assert_eq!(ds, synth_generate(&SyntheticSpec::default()).unwrap());
        assert_eq!(ds.ids, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn bad_specs() {
        let base = SyntheticSpec::default();
        for spec in [
            SyntheticSpec {
                num_classes: 1,
                ..base.clone()
            },
            SyntheticSpec {
                separation: 1.6,
                ..base.clone()
            },
            SyntheticSpec {
                num_classes: 40,
                ..base.clone()
            },
        ] {
            assert!(matches!(synth_generate(&spec), Err(Error::BadSpec(_))));
        }
    }

    #[test]
    fn zero_augmentation_is_identity() {
        let mut rng = Rng::new(3);
        let x = Matrix::random_normal(4, 5, &mut rng);
        assert_eq!(augment(&x, &AugmentParams::NONE, &mut rng), x);
    }

    #[test]
    fn noise_energy_matches_dimension() {
        let mut rng = Rng::new(4);
        let d = 32;
        let x = Matrix::zeros(10_000, d);
        let p = AugmentParams {
            sigma: 0.1,
            ..AugmentParams::NONE
        };
        let y = augment(&x, &p, &mut rng);
        let mean_sq = y.data().iter().map(|v| v * v).sum::<f64>() / 10_000.0;
        let expected = d as f64 * 0.01;
        assert!((mean_sq - expected).abs() < 0.05 * expected);
    }

    #[test]
    fn full_batch_covers_every_id() {
        let ds = synth_generate(&SyntheticSpec {
            per_class: 3,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let rng = Rng::new(5);
        let mut it = batch_iter(&ds, ds.len(), 2, AugmentParams::default(), &rng).unwrap();
        for _ in 0..2 {
            let b = it.next_batch();
            let mut ids = b.ids.clone();
            ids.sort_unstable();
            assert_eq!(ids, ds.ids);
        }
        assert_eq!(it.epoch(), 2);
    }

    #[test]
    fn multi_view_batches_and_determinism() {
        let ds = synth_generate(&SyntheticSpec::default()).unwrap();
        let rng = Rng::new(6);
        let mut a = batch_iter(&ds, 16, 10, AugmentParams::default(), &rng).unwrap();
        let mut b = batch_iter(&ds, 16, 10, AugmentParams::default(), &rng).unwrap();
        let (x, y) = (a.next_batch(), b.next_batch());
        assert_eq!(x.views.len(), 10);
        assert_ne!(x.views[0], x.views[1]);
        assert_eq!(x, y);
        assert!(matches!(
            batch_iter(&ds, 1001, 2, AugmentParams::default(), &rng),
            Err(Error::BatchTooLarge { .. })
        ));
        assert!(matches!(
            batch_iter(&ds, 8, 1, AugmentParams::default(), &rng),
            Err(Error::TooFewViews(1))
        ));
    }

    fn crafted_record(layout: CifarLayout, label: u8, pixel: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut rec = match layout {
            CifarLayout::Cifar10 => vec![label],
            CifarLayout::Cifar100 => vec![3, label],
        };
        rec.extend((0..CIFAR_PIXELS).map(pixel));
        rec
    }

    #[test]
    fn cifar_known_bytes() {
        let mut bytes = crafted_record(CifarLayout::Cifar100, 42, |_| 0);
        bytes.extend(crafted_record(CifarLayout::Cifar100, 7, |j| {
            if j < 1024 {
                255
            } else {
                51
            }
        }));
        let ds = cifar_parse(&bytes, None, None).unwrap();
        assert_eq!(ds.labels, vec![42, 7]);
        assert_eq!(ds.num_classes, 100);
        let r0 = ds.samples.row(0);
        assert!((r0[0] - (-0.4914 / 0.247)).abs() < 1e-12);
        assert!((r0[2048] - (-0.4465 / 0.261)).abs() < 1e-12);
        let r1 = ds.samples.row(1);
        assert!((r1[5] - (1.0 - 0.4914) / 0.247).abs() < 1e-12);
        assert!((r1[1500] - (0.2 - 0.4822) / 0.243).abs() < 1e-12);

        let c10 = crafted_record(CifarLayout::Cifar10, 9, |_| 255);
        let ds = cifar_parse(&c10, None, None).unwrap();
        assert_eq!((ds.labels[0], ds.num_classes), (9, 10));
    }

    #[test]
    fn cifar_errors_and_subset() {
        assert!(matches!(
            cifar_parse(&[], None, None),
            Err(Error::MalformedFile(_))
        ));
        let mut bytes = crafted_record(CifarLayout::Cifar10, 1, |_| 0);
        bytes.pop();
        assert!(matches!(
            cifar_parse(&bytes, Some(CifarLayout::Cifar10), None),
            Err(Error::TruncatedRecord { record: 0, .. })
        ));
        let mut bytes = Vec::new();
        for k in 0..5u8 {
            bytes.extend(crafted_record(CifarLayout::Cifar100, k, |_| k));
        }
        let ds = cifar_parse(&bytes, None, Some(3)).unwrap();
        assert_eq!(ds.labels, vec![0, 1, 2]);
    }

    #[test]
    fn csv_round_trip() {
        let ds = synth_generate(&SyntheticSpec {
            per_class: 2,
            dim: 12,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&ds, &mut buf).unwrap();
        assert!(buf.starts_with(b"id,label,f0,f1,"));
        let back = read_dataset_csv(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn stratified_split() {
        let ds = synth_generate(&SyntheticSpec::default()).unwrap();
        let (tr, te) = ds.split(0.8, &mut Rng::new(1)).unwrap();
        assert_eq!((tr.len(), te.len()), (800, 200));
        assert_eq!(te.labels.iter().filter(|&&l| l == 3).count(), 20);
    }
}
