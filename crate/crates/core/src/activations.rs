//! Streaming cross-correlation of features between two models.
//!
//! Both models see identical token sequences. At each capture point the
//! per-token feature vectors are folded into sufficient statistics (sums,
//! sums of squares and the cross-product matrix, all `f64`), which merge by
//! fieldwise addition and finalize to a Pearson correlation matrix.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::Permutation;
use crate::container::{self, ContainerError};
use crate::model::forward::encode;
use crate::model::{
    CapturePoint, CaptureSpec, Checkpoint, ModelError, SeqBatch, TransformerConfig,
    FIRST_CONTENT, PAD,
};
use crate::numerics::Matrix;
use crate::trainer::{frame, SyntheticCorpus};

pub const MAGIC: &[u8; 4] = b"PWS1";

/// Floor added to the variance before taking the square root.
pub const STD_EPS: f64 = 1e-8;

/// Sequences per forward pass during capture.
const CAPTURE_BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum ActivationError {
    #[error("checkpoints disagree on {0}")]
    ConfigMismatch(String),
    #[error("no tokens captured")]
    NoTokens,
    #[error("correlation needs at least 2 tokens, got {0}")]
    TooFewTokens(u64),
    #[error("capture spec is empty")]
    EmptySpec,
    #[error("feature width mismatch at {point}: expected {expected}, found {found}")]
    Width {
        point: CapturePoint,
        expected: usize,
        found: usize,
    },
    #[error("statistics for {0} are missing")]
    MissingPoint(CapturePoint),
    #[error("cannot merge statistics with different shapes")]
    Incompatible,
    #[error("malformed stats file: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// Which positions contribute features.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenFilter {
    /// Every non-PAD position, including CLS, SEP and MASK.
    #[default]
    NonPad,
    /// Vocabulary tokens only.
    ContentOnly,
}

impl TokenFilter {
    pub fn keeps(self, token: u32) -> bool {
        match self {
            TokenFilter::NonPad => token != PAD,
            TokenFilter::ContentOnly => token >= FIRST_CONTENT,
        }
    }
}

/// Sufficient statistics for the correlation between two feature sets.
#[derive(Debug, Clone, PartialEq)]
pub struct JointFeatureStats {
    point: CapturePoint,
    n: u64,
    d_a: usize,
    d_b: usize,
    sum_a: Vec<f64>,
    sum_b: Vec<f64>,
    sumsq_a: Vec<f64>,
    sumsq_b: Vec<f64>,
    /// Row-major `d_a × d_b` accumulation of `x_a x_bᵀ`.
    cross: Vec<f64>,
}

impl JointFeatureStats {
    pub fn new(point: CapturePoint, d_a: usize, d_b: usize) -> Self {
        Self {
            point,
            n: 0,
            d_a,
            d_b,
            sum_a: vec![0.0; d_a],
            sum_b: vec![0.0; d_b],
            sumsq_a: vec![0.0; d_a],
            sumsq_b: vec![0.0; d_b],
            cross: vec![0.0; d_a * d_b],
        }
    }

    pub fn point(&self) -> CapturePoint {
        self.point
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d_a, self.d_b)
    }

    /// Folds in one token per row of `xa`/`xb`.
    pub fn accumulate(&mut self, xa: &Matrix, xb: &Matrix) -> Result<(), ActivationError> {
        if xa.rows() != xb.rows() || xa.cols() != self.d_a || xb.cols() != self.d_b {
            return Err(ActivationError::Incompatible);
        }
        let t = xa.rows();
        if t == 0 {
            return Ok(());
        }
        let a: Vec<f64> = xa.data().iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = xb.data().iter().map(|&v| v as f64).collect();
        for r in 0..t {
            for (i, &v) in a[r * self.d_a..(r + 1) * self.d_a].iter().enumerate() {
                self.sum_a[i] += v;
                self.sumsq_a[i] += v * v;
            }
            for (j, &v) in b[r * self.d_b..(r + 1) * self.d_b].iter().enumerate() {
                self.sum_b[j] += v;
                self.sumsq_b[j] += v * v;
            }
        }
        if self.d_a > 0 && self.d_b > 0 {
            // SAFETY: `a` is t×d_a read transposed, `b` is t×d_b and `cross`
            // is d_a×d_b, all row-major with the strides given.
            unsafe {
                matrixmultiply::dgemm(
                    self.d_a,
                    t,
                    self.d_b,
                    1.0,
                    a.as_ptr(),
                    1,
                    self.d_a as isize,
                    b.as_ptr(),
                    self.d_b as isize,
                    1,
                    1.0,
                    self.cross.as_mut_ptr(),
                    self.d_b as isize,
                    1,
                );
            }
        }
        self.n += t as u64;
        Ok(())
    }

    /// Fieldwise addition; the point label of `self` is kept.
    pub fn merge(&mut self, other: &Self) -> Result<(), ActivationError> {
        if self.dims() != other.dims() {
            return Err(ActivationError::Incompatible);
        }
        self.n += other.n;
        let pairs = [
            (&mut self.sum_a, &other.sum_a),
            (&mut self.sum_b, &other.sum_b),
            (&mut self.sumsq_a, &other.sumsq_a),
            (&mut self.sumsq_b, &other.sumsq_b),
            (&mut self.cross, &other.cross),
        ];
        for (x, y) in pairs {
            x.iter_mut().zip(y).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    /// Stats over the token-axis concatenation of several points of equal width.
    pub fn concatenated(
        label: CapturePoint,
        parts: &[&JointFeatureStats],
    ) -> Result<Self, ActivationError> {
        let first = parts.first().ok_or(ActivationError::NoTokens)?;
        let mut out = Self::new(label, first.d_a, first.d_b);
        for p in parts {
            out.merge(p)?;
        }
        Ok(out)
    }

    fn moments(sum: &[f64], sumsq: &[f64], n: f64) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut std = Vec::with_capacity(sum.len());
        let mut dead = Vec::with_capacity(sum.len());
        for (q, m) in sumsq.iter().zip(&mean) {
            let var = (q / n - m * m).max(0.0);
            dead.push(var <= 1e-12 * (m * m).max(1.0));
            std.push((var + STD_EPS).sqrt());
        }
        (mean, std, dead)
    }

    /// Pearson correlation with population standard deviations. Features with
    /// (numerically) zero variance get exactly-zero rows or columns.
    pub fn finalize(&self) -> Result<CorrelationMatrix, ActivationError> {
        if self.n < 2 {
            return Err(ActivationError::TooFewTokens(self.n));
        }
        let n = self.n as f64;
        let (mean_a, std_a, dead_a) = Self::moments(&self.sum_a, &self.sumsq_a, n);
        let (mean_b, std_b, dead_b) = Self::moments(&self.sum_b, &self.sumsq_b, n);
        let mut values = Matrix::zeros(self.d_a, self.d_b);
        for i in 0..self.d_a {
            if dead_a[i] {
                continue;
            }
            let row = values.row_mut(i);
            for j in 0..self.d_b {
                if dead_b[j] {
                    continue;
                }
                let cov = self.cross[i * self.d_b + j] / n - mean_a[i] * mean_b[j];
                row[j] = (cov / (std_a[i] * std_b[j])) as f32;
            }
        }
        Ok(CorrelationMatrix {
            values,
            point: self.point,
            n_tokens: self.n,
        })
    }
}

/// Finalized `d_a × d_b` correlation between two models' features.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub values: Matrix,
    pub point: CapturePoint,
    pub n_tokens: u64,
}

impl CorrelationMatrix {
    /// Mean of `C[i, π(i)]`; the plain diagonal when `perm` is `None`.
    pub fn mean_diagonal(&self, perm: Option<&Permutation>) -> f64 {
        let d = self.values.rows().min(self.values.cols());
        if d == 0 {
            return 0.0;
        }
        let total: f64 = (0..d)
            .map(|i| self.values.get(i, perm.map_or(i, |p| p.map()[i])) as f64)
            .sum();
        total / d as f64
    }
}

/// Per-point statistics from one capture run.
pub type StatsMap = BTreeMap<CapturePoint, JointFeatureStats>;

fn check_pair(a: &TransformerConfig, b: &TransformerConfig) -> Result<(), ActivationError> {
    let fields = [
        ("num_layers", a.num_layers, b.num_layers),
        ("d_model", a.d_model, b.d_model),
        ("num_heads", a.num_heads, b.num_heads),
        ("d_ff", a.d_ff, b.d_ff),
        ("vocab_size", a.vocab_size, b.vocab_size),
        ("max_positions", a.max_positions, b.max_positions),
    ];
    for (name, x, y) in fields {
        if x != y {
            return Err(ActivationError::ConfigMismatch(format!("{name} ({x} vs {y})")));
        }
    }
    Ok(())
}

/// Row indices of kept tokens, truncated to `limit`.
fn kept_rows(tokens: &[u32], filter: TokenFilter, limit: usize) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| filter.keeps(t))
        .map(|(i, _)| i)
        .take(limit)
        .collect()
}

fn accumulate_chunk<S: AsRef<[u32]> + Sync>(
    a: &Checkpoint,
    b: &Checkpoint,
    seqs: &[S],
    spec: &CaptureSpec,
    filter: TokenFilter,
    limit: usize,
) -> Result<StatsMap, ActivationError> {
    let batch = SeqBatch::new(seqs);
    batch.validate(a)?;
    let rows = kept_rows(batch.tokens(), filter, limit);
    let ea = encode(a, &batch, spec, false);
    let eb = encode(b, &batch, spec, false);
    let mut out = StatsMap::new();
    for &p in spec.points() {
        let fa = crate::model::forward::gather_rows(&ea.captures[&p], &rows);
        let fb = crate::model::forward::gather_rows(&eb.captures[&p], &rows);
        let mut s = JointFeatureStats::new(p, fa.cols(), fb.cols());
        s.accumulate(&fa, &fb)?;
        out.insert(p, s);
    }
    Ok(out)
}

/// Runs both checkpoints over model-ready `inputs` and accumulates statistics
/// at every point in `spec`. At most `budget` kept tokens are consumed; the
/// last sequence is cut short if needed.
pub fn capture_joint<S: AsRef<[u32]> + Sync>(
    a: &Checkpoint,
    b: &Checkpoint,
    inputs: &[S],
    spec: &CaptureSpec,
    filter: TokenFilter,
    budget: Option<usize>,
) -> Result<StatsMap, ActivationError> {
    check_pair(a.config(), b.config())?;
    if spec.is_empty() {
        return Err(ActivationError::EmptySpec);
    }
    spec.validate(a.config())?;
    // Plan the per-chunk token limits up front so chunks can run in parallel.
    let mut remaining = budget.unwrap_or(usize::MAX);
    let mut chunks = Vec::new();
    for chunk in inputs.chunks(CAPTURE_BATCH) {
        if remaining == 0 {
            break;
        }
        let kept: usize = chunk
            .iter()
            .map(|s| s.as_ref().iter().filter(|&&t| filter.keeps(t)).count())
            .sum();
        let take = kept.min(remaining);
        remaining -= take;
        if take > 0 {
            chunks.push((chunk, take));
        }
    }
    if chunks.is_empty() {
        return Err(ActivationError::NoTokens);
    }
    let parts: Vec<StatsMap> = chunks
        .par_iter()
        .map(|(chunk, take)| accumulate_chunk(a, b, chunk, spec, filter, *take))
        .collect::<Result<_, _>>()?;
    let mut parts = parts.into_iter();
    let mut total = parts.next().expect("at least one chunk");
    for part in parts {
        for (p, s) in total.iter_mut() {
            s.merge(&part[p])?;
        }
    }
    Ok(total)
}

/// [`capture_joint`] over a corpus, framing each sequence with CLS/SEP.
pub fn capture_corpus(
    a: &Checkpoint,
    b: &Checkpoint,
    corpus: &SyntheticCorpus,
    spec: &CaptureSpec,
    filter: TokenFilter,
    budget: Option<usize>,
) -> Result<StatsMap, ActivationError> {
    let max = a.config().max_positions;
    let framed: Vec<Vec<u32>> = corpus.sequences.iter().map(|s| frame(s, max)).collect();
    capture_joint(a, b, &framed, spec, filter, budget)
}

pub fn finalize_correlation(stats: &JointFeatureStats) -> Result<CorrelationMatrix, ActivationError> {
    stats.finalize()
}

#[derive(Debug, Serialize, Deserialize)]
struct PointEntry {
    n: u64,
    d_a: usize,
    d_b: usize,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct StatsHeader {
    dtype: String,
    points: BTreeMap<CapturePoint, PointEntry>,
}

/// PWS1 bytes. Each point's payload is `sum_a, sum_b, sumsq_a, sumsq_b,
/// cross` as little-endian `f64`.
pub fn stats_to_bytes(stats: &StatsMap) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut points = BTreeMap::new();
    for (p, s) in stats {
        let offset = payload.len() as u64;
        for part in [&s.sum_a, &s.sum_b, &s.sumsq_a, &s.sumsq_b, &s.cross] {
            container::f64s_to_le(part, &mut payload);
        }
        let len = (payload.len() as u64 - offset) / 8;
        points.insert(
            *p,
            PointEntry {
                n: s.n,
                d_a: s.d_a,
                d_b: s.d_b,
                offset,
                len,
            },
        );
    }
    let header = StatsHeader {
        dtype: "f64".into(),
        points,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn stats_from_bytes(bytes: &[u8]) -> Result<StatsMap, ActivationError> {
    let (header, payload) = container::parse(bytes, MAGIC)?;
    let header: StatsHeader =
        serde_json::from_value(header).map_err(|e| ActivationError::Format(e.to_string()))?;
    if header.dtype != "f64" {
        return Err(ActivationError::Format(format!("unsupported dtype {:?}", header.dtype)));
    }
    let mut out = StatsMap::new();
    for (p, e) in header.points {
        let expected = 2 * e.d_a + 2 * e.d_b + e.d_a * e.d_b;
        if e.len != expected as u64 {
            return Err(ActivationError::Format(format!(
                "{p}: {} values for widths {}x{}",
                e.len, e.d_a, e.d_b
            )));
        }
        let raw = container::slice(&payload, e.offset, e.len, 8, &p.to_string())?;
        let values = container::le_to_f64s(raw);
        let mut s = JointFeatureStats::new(p, e.d_a, e.d_b);
        s.n = e.n;
        let (da, db) = (e.d_a, e.d_b);
        s.sum_a.copy_from_slice(&values[..da]);
        s.sum_b.copy_from_slice(&values[da..da + db]);
        s.sumsq_a.copy_from_slice(&values[da + db..2 * da + db]);
        s.sumsq_b.copy_from_slice(&values[2 * da + db..2 * da + 2 * db]);
        s.cross.copy_from_slice(&values[2 * da + 2 * db..]);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ActivationError::Format(format!("{p}: non-finite accumulator")));
        }
        out.insert(p, s);
    }
    Ok(out)
}

pub fn save_stats<P: AsRef<Path>>(path: P, stats: &StatsMap) -> Result<(), ActivationError> {
    std::fs::write(path, stats_to_bytes(stats)).map_err(ContainerError::from)?;
    Ok(())
}

pub fn load_stats<P: AsRef<Path>>(path: P) -> Result<StatsMap, ActivationError> {
    let bytes = std::fs::read(path).map_err(ContainerError::from)?;
    stats_from_bytes(&bytes)
}

/// Looks up a point, naming it in the error when absent.
pub fn require(stats: &StatsMap, p: CapturePoint) -> Result<&JointFeatureStats, ActivationError> {
    stats.get(&p).ok_or(ActivationError::MissingPoint(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const P: CapturePoint = CapturePoint::FfHidden(0);

    fn stats_of(xa: &Matrix, xb: &Matrix) -> JointFeatureStats {
        let mut s = JointFeatureStats::new(P, xa.cols(), xb.cols());
        s.accumulate(xa, xb).unwrap();
        s
    }

    /// Textbook two-pass Pearson correlation with the same std floor.
    fn two_pass(xa: &Matrix, xb: &Matrix) -> Vec<Vec<f64>> {
        let n = xa.rows() as f64;
        let col = |m: &Matrix, j: usize| (0..m.rows()).map(|r| m.get(r, j) as f64).collect::<Vec<_>>();
        let centered = |v: Vec<f64>| {
            let mu = v.iter().sum::<f64>() / n;
            v.into_iter().map(|x| x - mu).collect::<Vec<_>>()
        };
        let ca: Vec<Vec<f64>> = (0..xa.cols()).map(|j| centered(col(xa, j))).collect();
        let cb: Vec<Vec<f64>> = (0..xb.cols()).map(|j| centered(col(xb, j))).collect();
        let sd = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / n + STD_EPS).sqrt();
        ca.iter()
            .map(|u| {
                cb.iter()
                    .map(|w| u.iter().zip(w).map(|(x, y)| x * y).sum::<f64>() / n / (sd(u) * sd(w)))
                    .collect()
            })
            .collect()
    }

    fn close(c: &CorrelationMatrix, oracle: &[Vec<f64>], tol: f64) {
        for (i, row) in oracle.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let got = c.values.get(i, j) as f64;
                assert!((got - v).abs() <= tol, "({i},{j}) {got} vs {v}");
            }
        }
    }

    #[test]
    fn identity_and_anticorrelation() {
        let x = Matrix::from_rows(&[
            vec![1.0, 0.5],
            vec![2.0, -1.0],
            vec![0.0, 3.0],
            vec![4.0, 1.5],
        ]);
        let c = stats_of(&x, &x).finalize().unwrap();
        close(&c, &[vec![1.0, two_pass(&x, &x)[0][1]], vec![two_pass(&x, &x)[1][0], 1.0]], 1e-6);
        let neg = Matrix::from_vec(4, 2, x.data().iter().map(|v| -v).collect()).unwrap();
        let c = stats_of(&x, &neg).finalize().unwrap();
        assert!((c.values.get(0, 0) + 1.0).abs() < 1e-6);
        assert!((c.values.get(1, 1) + 1.0).abs() < 1e-6);
    }

    #[test]
    fn hand_written_columns_match_two_pass() {
        let xa = Matrix::from_rows(&[
            vec![1.0, 2.0, 0.5],
            vec![3.0, 1.0, 0.25],
            vec![2.0, 2.0, 1.0],
            vec![5.0, 0.0, 0.75],
            vec![4.0, 3.0, 0.0],
        ]);
        let xb = Matrix::from_rows(&[
            vec![0.0, 1.0, 9.0],
            vec![1.0, 1.0, 7.0],
            vec![0.5, 2.0, 8.0],
            vec![2.0, 0.0, 6.0],
            vec![1.5, 3.0, 5.0],
        ]);
        close(&stats_of(&xa, &xb).finalize().unwrap(), &two_pass(&xa, &xb), 1e-6);
    }

    #[test]
    fn dead_features_are_zero() {
        let xa = Matrix::from_rows(&[vec![1.0, 7.0], vec![2.0, 7.0], vec![3.0, 7.0]]);
        let c = stats_of(&xa, &xa).finalize().unwrap();
        assert_eq!(c.values.get(1, 1), 0.0);
        assert_eq!(c.values.get(0, 1), 0.0);
        assert_eq!(c.values.get(1, 0), 0.0);
        assert!((c.values.get(0, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn too_few_tokens() {
        let x = Matrix::from_rows(&[vec![1.0]]);
        assert!(matches!(
            stats_of(&x, &x).finalize(),
            Err(ActivationError::TooFewTokens(1))
        ));
    }

    #[test]
    fn split_batches_merge_to_single_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xa = Matrix::from_vec(200, 5, (0..1000).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let xb = Matrix::from_vec(200, 4, (0..800).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let whole = stats_of(&xa, &xb).finalize().unwrap();
        let half = |m: &Matrix, lo: usize| {
            let rows: Vec<usize> = (lo..lo + 100).collect();
            crate::model::forward::gather_rows(m, &rows)
        };
        let mut s = stats_of(&half(&xa, 0), &half(&xb, 0));
        s.merge(&stats_of(&half(&xa, 100), &half(&xb, 100))).unwrap();
        let merged = s.finalize().unwrap();
        assert!(whole.values.max_abs_diff(&merged.values) <= 1e-6);
    }

    #[test]
    fn permuting_b_features_permutes_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xa = Matrix::from_vec(50, 6, (0..300).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let xb = Matrix::from_vec(50, 6, (0..300).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let p = Permutation::new(vec![4, 2, 0, 5, 1, 3]).unwrap();
        let mut pb = Matrix::zeros(50, 6);
        for r in 0..50 {
            pb.row_mut(r).copy_from_slice(&p.apply(xb.row(r)));
        }
        let c = stats_of(&xa, &xb).finalize().unwrap();
        let cp = stats_of(&xa, &pb).finalize().unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(cp.values.get(i, j), c.values.get(i, p.map()[j]));
            }
        }
    }

    fn tiny() -> (Checkpoint, Checkpoint) {
        let cfg = TransformerConfig::new(2, 8, 2, 16, 20, 12);
        (init_model(&cfg, 1).unwrap(), init_model(&cfg, 2).unwrap())
    }

    fn probe_inputs(n: usize, seed: u64) -> Vec<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.gen_range(3..10);
                frame(&(0..len).map(|_| rng.gen_range(FIRST_CONTENT..20)).collect::<Vec<_>>(), 12)
            })
            .collect()
    }

    #[test]
    fn self_capture_has_unit_diagonal() {
        let (a, _) = tiny();
        let spec = CaptureSpec::all(a.config());
        let stats = capture_joint(&a, &a, &probe_inputs(40, 1), &spec, TokenFilter::NonPad, None).unwrap();
        for s in stats.values() {
            let c = s.finalize().unwrap();
            for i in 0..c.values.rows() {
                // The variance floor pulls low-variance features at init
                // slightly below 1.
                let v = c.values.get(i, i);
                assert!(v == 0.0 || (v - 1.0).abs() < 1e-3, "{} {i}: {v}", s.point());
            }
        }
    }

    #[test]
    fn budget_caps_tokens_exactly() {
        let (a, b) = tiny();
        let spec = CaptureSpec::new([P]);
        let inputs = probe_inputs(80, 2);
        let total: usize = inputs.iter().map(Vec::len).sum();
        let s = capture_joint(&a, &b, &inputs, &spec, TokenFilter::NonPad, Some(101)).unwrap();
        assert_eq!(s[&P].n(), 101);
        let s = capture_joint(&a, &b, &inputs, &spec, TokenFilter::NonPad, Some(202)).unwrap();
        assert_eq!(s[&P].n(), 202);
        let s = capture_joint(&a, &b, &inputs, &spec, TokenFilter::NonPad, None).unwrap();
        assert_eq!(s[&P].n() as usize, total);
        assert!(matches!(
            capture_joint(&a, &b, &inputs, &spec, TokenFilter::NonPad, Some(0)),
            Err(ActivationError::NoTokens)
        ));
        let content = capture_joint(&a, &b, &inputs, &spec, TokenFilter::ContentOnly, None).unwrap();
        assert_eq!(content[&P].n() as usize, total - 2 * inputs.len());
    }

    #[test]
    fn trailing_pad_leaves_correlations_unchanged() {
        let (a, b) = tiny();
        let spec = CaptureSpec::all(a.config());
        let inputs = probe_inputs(30, 3);
        let padded: Vec<Vec<u32>> = inputs
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.resize(12, PAD);
                s
            })
            .collect();
        let x = capture_joint(&a, &b, &inputs, &spec, TokenFilter::NonPad, None).unwrap();
        let y = capture_joint(&a, &b, &padded, &spec, TokenFilter::NonPad, None).unwrap();
        for (p, s) in &x {
            assert_eq!(s.n(), y[p].n());
            let d = s.finalize().unwrap().values.max_abs_diff(&y[p].finalize().unwrap().values);
            assert!(d <= 1e-5, "{p}: {d}");
        }
    }

    #[test]
    fn config_mismatch_rejected() {
        let (a, _) = tiny();
        let other = init_model(&TransformerConfig::new(2, 8, 2, 24, 20, 12), 1).unwrap();
        let spec = CaptureSpec::new([P]);
        assert!(matches!(
            capture_joint(&a, &other, &probe_inputs(2, 0), &spec, TokenFilter::NonPad, None),
            Err(ActivationError::ConfigMismatch(_))
        ));
    }

    #[test]
    fn stats_file_round_trip() {
        let (a, b) = tiny();
        let spec = CaptureSpec::all(a.config());
        let stats = capture_joint(&a, &b, &probe_inputs(10, 4), &spec, TokenFilter::NonPad, None).unwrap();
        let bytes = stats_to_bytes(&stats);
        assert_eq!(stats_from_bytes(&bytes).unwrap(), stats);
        assert!(stats_from_bytes(&bytes[..bytes.len() - 9]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            stats_from_bytes(&bad),
            Err(ActivationError::Container(ContainerError::BadMagic { .. }))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn streaming_matches_two_pass(
            n in 2usize..60,
            da in 1usize..6,
            db in 1usize..6,
            split in 0usize..60,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shift: f32 = rng.gen_range(-5.0..5.0);
            let mut gen = |cols: usize| {
                Matrix::from_vec(n, cols, (0..n * cols).map(|_| shift + rng.gen_range(-1.0f32..1.0)).collect())
                    .unwrap()
            };
            let xa = gen(da);
            let xb = gen(db);
            let k = split % n;
            let lo: Vec<usize> = (0..k).collect();
            let hi: Vec<usize> = (k..n).collect();
            let g = crate::model::forward::gather_rows;
            let mut s = stats_of(&g(&xa, &lo), &g(&xb, &lo));
            s.merge(&stats_of(&g(&xa, &hi), &g(&xb, &hi))).unwrap();
            let c = s.finalize().unwrap();
            let oracle = two_pass(&xa, &xb);
            for (i, row) in oracle.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    prop_assert!((c.values.get(i, j) as f64 - v).abs() <= 1e-6);
                    prop_assert!((c.values.get(i, j) as f64).abs() <= 1.0 + 1e-5);
                }
            }
        }
    }
}
