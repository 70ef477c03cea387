//! Synthetic datasets for the three model families and the six-way
//! membership split.
//!
//! Datasets persist as CSV with a one-line preamble
//! `# shape=<rows>x<cols> dtype=<f64|u32>` followed by a header row and a
//! row-major payload. Split plans persist as JSON.

use crate::error::{invalid, Error, Result};
use crate::io::{csv_bytes, fmt_f64, parse_f64, read_string, write_bytes};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

/// Labelled points for the classifier family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsDataset {
    /// `[n, d]`
    pub points: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

/// Token sequences for the language-model family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqDataset {
    pub sequences: Vec<Vec<usize>>,
    pub vocab_size: usize,
    /// Row-stochastic transition matrix the sequences were drawn from.
    pub source: Vec<Vec<f64>>,
}

/// Points in the unit box for the diffusion family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffDataset {
    /// `[n, d]`, entries in `[0, 1]`
    pub points: Tensor,
}

impl ClsDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.shape()[1]
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.points.row(i)
    }
}

impl SeqDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.sequences.first().map_or(0, Vec::len)
    }
}

impl DiffDataset {
    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.shape()[1]
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.points.row(i)
    }
}

/// Gaussian blobs centred on the vertices of a regular `k_classes`-gon of
/// radius 1 in the plane. Points are 2-D.
pub fn gen_gaussian_mixture(k_classes: usize, n_per_class: usize, spread: f64, rng: &mut Rng) -> Result<ClsDataset> {
    gen_gaussian_mixture_in(k_classes, n_per_class, spread, 2, rng)
}

/// As [`gen_gaussian_mixture`] in `dim >= 2` dimensions: centres lie in the
/// first two coordinates, noise is isotropic in all of them.
pub fn gen_gaussian_mixture_in(
    k_classes: usize,
    n_per_class: usize,
    spread: f64,
    dim: usize,
    rng: &mut Rng,
) -> Result<ClsDataset> {
    if k_classes < 2 {
        return Err(invalid(format!("gaussian mixture: need k_classes >= 2, got {k_classes}")));
    }
    if n_per_class < 4 {
        return Err(invalid(format!("gaussian mixture: need n_per_class >= 4, got {n_per_class}")));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(invalid(format!("gaussian mixture: spread must be >= 0, got {spread}")));
    }
    if dim < 2 {
        return Err(invalid(format!("gaussian mixture: dim must be >= 2, got {dim}")));
    }
    let n = k_classes * n_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k_classes;
        let angle = 2.0 * std::f64::consts::PI * c as f64 / k_classes as f64;
        for j in 0..dim {
            let centre = match j {
                0 => angle.cos(),
                1 => angle.sin(),
                _ => 0.0,
            };
            data.push(centre + spread * rng.normal());
        }
        labels.push(c);
    }
    Ok(ClsDataset {
        points: Tensor::new(&[n, dim], data)?,
        labels,
        n_classes: k_classes,
    })
}

/// Samples one transition matrix `softmax(Z / temperature)` with Gaussian
/// `Z`, then `n_seq` chains of length `seq_len` with a uniform first token.
pub fn gen_markov_sequences(
    vocab_size: usize,
    n_seq: usize,
    seq_len: usize,
    temperature: f64,
    rng: &mut Rng,
) -> Result<SeqDataset> {
    if vocab_size < 4 {
        return Err(invalid(format!("markov: vocab_size must be >= 4, got {vocab_size}")));
    }
    if seq_len < 8 {
        return Err(invalid(format!("markov: seq_len must be >= 8, got {seq_len}")));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(invalid(format!("markov: temperature must be > 0, got {temperature}")));
    }
    let source = markov_source(vocab_size, temperature, &mut rng.split("source"));
    let mut draw = rng.split("chains");
    let sequences = (0..n_seq)
        .map(|_| {
            let mut s = Vec::with_capacity(seq_len);
            s.push(draw.below(vocab_size));
            while s.len() < seq_len {
                let row = &source[*s.last().unwrap()];
                s.push(sample_categorical(row, draw.uniform()));
            }
            s
        })
        .collect();
    Ok(SeqDataset {
        sequences,
        vocab_size,
        source,
    })
}

/// The transition matrix [`gen_markov_sequences`] draws for a given stream.
pub fn markov_source(vocab_size: usize, temperature: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..vocab_size)
        .map(|_| {
            let z: Vec<f64> = (0..vocab_size).map(|_| rng.normal() / temperature).collect();
            let mut out = vec![0.0; vocab_size];
            crate::tensor::log_softmax_row(&z, &mut out);
            out.iter().map(|v| v.exp()).collect()
        })
        .collect()
}

fn sample_categorical(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Shannon entropy (nats) of a probability row.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// `n_modes` Gaussian bumps with centres uniform in `[0.2, 0.8]^dim`, clamped
/// into the unit box.
pub fn gen_unit_box_mixture(n: usize, dim: usize, n_modes: usize, spread: f64, rng: &mut Rng) -> Result<DiffDataset> {
    if n == 0 || dim == 0 || n_modes == 0 {
        return Err(invalid("unit box mixture: n, dim and n_modes must be positive"));
    }
    if !(spread >= 0.0) {
        return Err(invalid(format!("unit box mixture: spread must be >= 0, got {spread}")));
    }
    let centres: Vec<Vec<f64>> = (0..n_modes)
        .map(|_| (0..dim).map(|_| rng.uniform_in(0.2, 0.8)).collect())
        .collect();
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let c = &centres[rng.below(n_modes)];
        for cj in c {
            data.push((cj + spread * rng.normal()).clamp(0.0, 1.0));
        }
    }
    Ok(DiffDataset {
        points: Tensor::new(&[n, dim], data)?,
    })
}

/// Six pairwise-disjoint id sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// Members of the target model.
    pub tar_train: Vec<usize>,
    /// Non-members drawn from the same generator.
    pub tar_held: Vec<usize>,
    /// Members of the shadow population used only to learn the pattern.
    pub shadow_train: Vec<usize>,
    /// Non-members of the shadow population.
    pub shadow_held: Vec<usize>,
    /// Training set of the reference model.
    pub ref_train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Minimum number of ids in each subset.
pub const MIN_SUBSET: usize = 8;

pub const SUBSET_NAMES: [&str; 6] = ["tar_train", "tar_held", "shadow_train", "shadow_held", "ref_train", "test"];

/// Randomly assigns `floor(f_i * n_total)` ids to each subset; leftovers are
/// discarded.
pub fn make_split(n_total: usize, fractions: [f64; 6], rng: &mut Rng) -> Result<SplitPlan> {
    if fractions.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
        return Err(invalid(format!("split: fractions must be positive, got {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if total > 1.0 + 1e-12 {
        return Err(invalid(format!("split: fractions sum to {total} > 1")));
    }
    let sizes = fractions.map(|f| (f * n_total as f64 + 1e-9).floor() as usize);
    if sizes.iter().any(|&s| s < MIN_SUBSET) {
        let minimum = fractions
            .iter()
            .map(|f| (MIN_SUBSET as f64 / f - 1e-9).ceil() as usize)
            .max()
            .unwrap();
        return Err(invalid(format!(
            "split: n_total = {n_total} gives subset sizes {sizes:?}; at least {minimum} ids are needed for {MIN_SUBSET} per subset"
        )));
    }
    SplitPlan::with_sizes(n_total, sizes, rng)
}

impl SplitPlan {
    /// Random split with explicit subset sizes.
    pub fn with_sizes(n_total: usize, sizes: [usize; 6], rng: &mut Rng) -> Result<SplitPlan> {
        let need: usize = sizes.iter().sum();
        if need > n_total {
            return Err(invalid(format!("split: sizes {sizes:?} need {need} ids, only {n_total} available")));
        }
        let mut ids: Vec<usize> = (0..n_total).collect();
        rng.shuffle(&mut ids);
        let mut off = 0;
        let mut take = |k: usize| {
            let mut v = ids[off..off + k].to_vec();
            v.sort_unstable();
            off += k;
            v
        };
        Ok(SplitPlan {
            tar_train: take(sizes[0]),
            tar_held: take(sizes[1]),
            shadow_train: take(sizes[2]),
            shadow_held: take(sizes[3]),
            ref_train: take(sizes[4]),
            test: take(sizes[5]),
            seed: rng.seed(),
        })
    }

    pub fn subsets(&self) -> [(&'static str, &[usize]); 6] {
        [
            (SUBSET_NAMES[0], &self.tar_train),
            (SUBSET_NAMES[1], &self.tar_held),
            (SUBSET_NAMES[2], &self.shadow_train),
            (SUBSET_NAMES[3], &self.shadow_held),
            (SUBSET_NAMES[4], &self.ref_train),
            (SUBSET_NAMES[5], &self.test),
        ]
    }

    /// Errors naming the first pair of subsets that share an id.
    pub fn check_disjoint(&self) -> Result<()> {
        let subsets = self.subsets();
        for i in 0..6 {
            let a: HashSet<usize> = subsets[i].1.iter().copied().collect();
            if a.len() != subsets[i].1.len() {
                return Err(invalid(format!("split: {} contains duplicate ids", subsets[i].0)));
            }
            for sj in &subsets[i + 1..] {
                if let Some(id) = sj.1.iter().find(|id| a.contains(id)) {
                    return Err(invalid(format!(
                        "split: {} and {} share id {id}",
                        subsets[i].0, sj.0
                    )));
                }
            }
        }
        Ok(())
    }

    /// Evaluation population `tar_train ∪ tar_held` with membership bits.
    pub fn eval_population(&self) -> Vec<(usize, bool)> {
        self.tar_train
            .iter()
            .map(|&i| (i, true))
            .chain(self.tar_held.iter().map(|&i| (i, false)))
            .collect()
    }

    /// Stable fingerprint of the shadow ids.
    pub fn shadow_fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for id in &self.shadow_train {
            h.update(b"m");
            h.update((*id as u64).to_le_bytes());
        }
        for id in &self.shadow_held {
            h.update(b"n");
            h.update((*id as u64).to_le_bytes());
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let plan: SplitPlan = crate::io::read_json(path)?;
        plan.check_disjoint()?;
        Ok(plan)
    }
}

fn preamble(rows: usize, cols: usize, dtype: &str) -> String {
    format!("# shape={rows}x{cols} dtype={dtype}\n")
}

fn parse_preamble(text: &str) -> Result<(usize, usize, String, &str)> {
    let (first, rest) = text
        .split_once('\n')
        .ok_or_else(|| Error::Format("dataset: missing preamble".into()))?;
    let bad = || Error::Format(format!("dataset: malformed preamble {first:?}"));
    let body = first.strip_prefix("# ").ok_or_else(bad)?;
    let mut rows = None;
    let mut cols = None;
    let mut dtype = None;
    for field in body.split_whitespace() {
        match field.split_once('=') {
            Some(("shape", s)) => {
                let (r, c) = s.split_once('x').ok_or_else(bad)?;
                rows = Some(r.parse().map_err(|_| bad())?);
                cols = Some(c.parse().map_err(|_| bad())?);
            }
            Some(("dtype", d)) => dtype = Some(d.to_string()),
            _ => return Err(bad()),
        }
    }
    Ok((rows.ok_or_else(bad)?, cols.ok_or_else(bad)?, dtype.ok_or_else(bad)?, rest))
}

fn read_rows(body: &str, cols: usize) -> Result<Vec<Vec<String>>> {
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != cols {
            return Err(Error::Format(format!("dataset: expected {cols} columns, found {}", rec.len())));
        }
        out.push(rec.iter().map(str::to_string).collect());
    }
    Ok(out)
}

fn write_with_preamble(path: &Path, pre: String, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut bytes = pre.into_bytes();
    bytes.extend(csv_bytes(header, rows)?);
    write_bytes(path, &bytes)
}

impl ClsDataset {
    /// Columns `x0..x{d-1},label`; dtype f64 (labels are integral).
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let d = self.dim();
        let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        let rows: Vec<Vec<String>> = (0..self.len())
            .map(|i| {
                let mut r: Vec<String> = self.point(i).iter().map(|v| fmt_f64(*v)).collect();
                r.push(self.labels[i].to_string());
                r
            })
            .collect();
        let h: Vec<&str> = header.iter().map(String::as_str).collect();
        write_with_preamble(path, preamble(self.len(), d + 1, "f64"), &h, &rows)
    }

    pub fn load_csv(path: &Path, n_classes: usize) -> Result<Self> {
        let text = read_string(path)?;
        let (n, cols, _, body) = parse_preamble(&text)?;
        let rows = read_rows(body, cols)?;
        if rows.len() != n {
            return Err(Error::Format(format!("dataset: preamble says {n} rows, found {}", rows.len())));
        }
        let mut data = Vec::with_capacity(n * (cols - 1));
        let mut labels = Vec::with_capacity(n);
        for r in &rows {
            for v in &r[..cols - 1] {
                data.push(parse_f64(v)?);
            }
            let y: usize = r[cols - 1]
                .parse()
                .map_err(|_| Error::Format(format!("dataset: bad label {:?}", r[cols - 1])))?;
            if y >= n_classes {
                return Err(Error::Format(format!("dataset: label {y} >= {n_classes}")));
            }
            labels.push(y);
        }
        Ok(Self {
            points: Tensor::new(&[n, cols - 1], data)?,
            labels,
            n_classes,
        })
    }
}

impl DiffDataset {
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let d = self.dim();
        let header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        let rows: Vec<Vec<String>> = (0..self.len())
            .map(|i| self.point(i).iter().map(|v| fmt_f64(*v)).collect())
            .collect();
        let h: Vec<&str> = header.iter().map(String::as_str).collect();
        write_with_preamble(path, preamble(self.len(), d, "f64"), &h, &rows)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = read_string(path)?;
        let (n, cols, _, body) = parse_preamble(&text)?;
        let rows = read_rows(body, cols)?;
        let data = rows.iter().flatten().map(|v| parse_f64(v)).collect::<Result<Vec<_>>>()?;
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format("dataset: diffusion points must lie in [0, 1]".into()));
        }
        Ok(Self {
            points: Tensor::new(&[n, cols], data)?,
        })
    }
}

impl SeqDataset {
    /// Token columns `t0..t{n-1}`; dtype u32. The transition matrix is not
    /// stored.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let n = self.seq_len();
        let header: Vec<String> = (0..n).map(|j| format!("t{j}")).collect();
        let rows: Vec<Vec<String>> = self
            .sequences
            .iter()
            .map(|s| s.iter().map(|t| t.to_string()).collect())
            .collect();
        let h: Vec<&str> = header.iter().map(String::as_str).collect();
        write_with_preamble(path, preamble(self.len(), n, "u32"), &h, &rows)
    }

    pub fn load_csv(path: &Path, vocab_size: usize) -> Result<Self> {
        let text = read_string(path)?;
        let (_, cols, _, body) = parse_preamble(&text)?;
        let rows = read_rows(body, cols)?;
        let mut sequences = Vec::with_capacity(rows.len());
        for r in rows {
            let s = r
                .iter()
                .map(|v| match v.parse::<usize>() {
                    Ok(t) if t < vocab_size => Ok(t),
                    _ => Err(Error::Format(format!("dataset: bad token {v:?}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            sequences.push(s);
        }
        Ok(Self {
            sequences,
            vocab_size,
            source: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    #[test]
    fn mixture_contract() {
        let a = gen_gaussian_mixture(4, 100, 0.3, &mut Rng::new(7)).unwrap();
        let b = gen_gaussian_mixture(4, 100, 0.3, &mut Rng::new(7)).unwrap();
        assert_eq!(a.len(), 400);
        assert_eq!(a.points.shape(), &[400, 2]);
        assert!(a.labels.iter().all(|&y| y < 4));
        for c in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&y| y == c).count(), 100);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn zero_spread_collapses_to_centres() {
        let d = gen_gaussian_mixture(4, 5, 0.0, &mut Rng::new(1)).unwrap();
        for i in 0..d.len() {
            let angle = std::f64::consts::FRAC_PI_2 * d.labels[i] as f64;
            assert_eq!(d.point(i), &[angle.cos(), angle.sin()]);
        }
    }

    #[test]
    fn mixture_rejects_bad_arguments() {
        let mut r = Rng::new(0);
        assert!(gen_gaussian_mixture(1, 10, 0.3, &mut r).is_err());
        assert!(gen_gaussian_mixture(3, 3, 0.3, &mut r).is_err());
        assert!(gen_gaussian_mixture(3, 10, -1.0, &mut r).is_err());
    }

    #[test]
    fn markov_contract() {
        let d = gen_markov_sequences(16, 256, 32, 1.0, &mut Rng::new(3)).unwrap();
        assert_eq!(d.len(), 256);
        assert!(d.sequences.iter().all(|s| s.len() == 32 && s.iter().all(|&t| t < 16)));
        for row in &d.source {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(gen_markov_sequences(16, 4, 32, 0.0, &mut Rng::new(3)).is_err());
    }

    #[test]
    fn markov_entropy_falls_with_temperature() {
        let mean_entropy = |t: f64| {
            let src = markov_source(16, t, &mut Rng::new(11));
            src.iter().map(|r| entropy(r)).sum::<f64>() / 16.0
        };
        let grid = [2.0, 1.0, 0.5, 0.25];
        let h: Vec<f64> = grid.iter().map(|&t| mean_entropy(t)).collect();
        for w in h.windows(2) {
            assert!(w[1] < w[0], "{h:?}");
        }
        let cold = markov_source(16, 1e-3, &mut Rng::new(11));
        assert!(cold.iter().all(|r| r.iter().cloned().fold(0.0, f64::max) > 0.999));
    }

    #[test]
    fn unit_box_in_range() {
        let d = gen_unit_box_mixture(200, 8, 3, 0.3, &mut Rng::new(5)).unwrap();
        assert!(d.points.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn equal_sixths() {
        let p = make_split(600, [1.0 / 6.0; 6], &mut Rng::new(9)).unwrap();
        for (_, s) in p.subsets() {
            assert_eq!(s.len(), 100);
        }
        p.check_disjoint().unwrap();
    }

    #[test]
    fn oversubscribed_fractions_rejected() {
        let f = [0.2, 0.2, 0.2, 0.2, 0.2, 0.1];
        assert!(make_split(600, f, &mut Rng::new(9)).is_err());
    }

    #[test]
    fn too_small_split_names_minimum() {
        let err = make_split(30, [1.0 / 6.0; 6], &mut Rng::new(9)).unwrap_err();
        assert!(err.to_string().contains("48"), "{err}");
    }

    #[test]
    fn overlap_is_detected() {
        let mut p = make_split(600, [1.0 / 6.0; 6], &mut Rng::new(9)).unwrap();
        p.test.push(p.shadow_train[0]);
        assert!(p.check_disjoint().is_err());
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = gen_gaussian_mixture(3, 6, 0.3, &mut Rng::new(2)).unwrap();
        c.save_csv(&dir.path().join("c.csv")).unwrap();
        assert_eq!(ClsDataset::load_csv(&dir.path().join("c.csv"), 3).unwrap(), c);
        let first = std::fs::read_to_string(dir.path().join("c.csv")).unwrap();
        assert!(first.starts_with("# shape=18x3 dtype=f64\nx0,x1,label\n"));

        let s = gen_markov_sequences(8, 5, 10, 1.0, &mut Rng::new(2)).unwrap();
        s.save_csv(&dir.path().join("s.csv")).unwrap();
        let back = SeqDataset::load_csv(&dir.path().join("s.csv"), 8).unwrap();
        assert_eq!(back.sequences, s.sequences);

        let d = gen_unit_box_mixture(7, 3, 2, 0.2, &mut Rng::new(2)).unwrap();
        d.save_csv(&dir.path().join("d.csv")).unwrap();
        assert_eq!(DiffDataset::load_csv(&dir.path().join("d.csv")).unwrap(), d);

        let p = make_split(600, [1.0 / 6.0; 6], &mut Rng::new(9)).unwrap();
        p.save(&dir.path().join("split.json")).unwrap();
        assert_eq!(SplitPlan::load(&dir.path().join("split.json")).unwrap(), p);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn splits_are_disjoint(seed in any::<u64>(), n in 48usize..2000) {
            let p = make_split(n, [1.0 / 6.0; 6], &mut Rng::new(seed)).unwrap();
            let subsets = p.subsets();
            for i in 0..6 {
                for j in (i + 1)..6 {
                    let a: HashSet<_> = subsets[i].1.iter().collect();
                    prop_assert!(subsets[j].1.iter().all(|x| !a.contains(x)));
                }
            }
        }
    }
}
