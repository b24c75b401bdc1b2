//! Observation batches: hidden ρ-Bernoulli feature vectors `x` and the
//! observations `y = Ax` they induce, with optional ground-truth retention.
//!
//! Sample `k` is generated from its own RNG stream (stream index = sample
//! index, base seed recorded in the batch), so batches are bitwise
//! reproducible per `(dictionary, seed, N)` regardless of how generation
//! work is scheduled. Only fully independent Bernoulli coordinates are
//! produced — the downstream statistics are stated for that model.
//!
//! Batches are immutable after construction and safe for concurrent
//! read-only use; per-pixel means are computed once on demand and cached.
//! Desk-scale batches (N ≤ a few 10⁵ at n ≤ 1024) are kept fully in memory.

use crate::error::Error;
use crate::model::Dictionary;
use crate::numeric::CompensatedSum;
use crate::rng;
use crate::Result;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

/// A batch of N observations, sample-major.
#[derive(Debug)]
pub struct SampleBatch {
    n: usize,
    n_samples: usize,
    rho: f64,
    seed: u64,
    /// `y[k*n .. (k+1)*n]` is observation k.
    y: Vec<f64>,
    /// Sorted active-feature indices per sample, when ground truth is kept.
    hidden: Option<Vec<Vec<u32>>>,
    /// Feature count, recorded only alongside `hidden` (0 otherwise); the
    /// observations alone do not determine m.
    m_features: usize,
    pixel_mean: OnceLock<Vec<f64>>,
}

impl Clone for SampleBatch {
    fn clone(&self) -> Self {
        SampleBatch {
            n: self.n,
            n_samples: self.n_samples,
            rho: self.rho,
            seed: self.seed,
            y: self.y.clone(),
            hidden: self.hidden.clone(),
            m_features: self.m_features,
            pixel_mean: OnceLock::new(),
        }
    }
}

impl SampleBatch {
    /// Assembles a batch from raw parts, validating dimensions.
    pub fn from_parts(
        n: usize,
        rho: f64,
        seed: u64,
        y: Vec<f64>,
        hidden: Option<Vec<Vec<u32>>>,
        m_features: usize,
    ) -> Result<Self> {
        if n == 0 || y.is_empty() || y.len() % n != 0 {
            return Err(Error::InvalidInput(format!(
                "observation buffer of {} values is not a positive multiple of n = {n}",
                y.len()
            )));
        }
        let n_samples = y.len() / n;
        if let Some(h) = &hidden {
            if h.len() != n_samples {
                return Err(Error::InvalidInput(format!(
                    "hidden vectors: {} of {n_samples} samples",
                    h.len()
                )));
            }
            if let Some(bad) = h
                .iter()
                .flat_map(|active| active.iter())
                .find(|&&j| j as usize >= m_features)
            {
                return Err(Error::InvalidInput(format!(
                    "hidden feature index {bad} out of range for m = {m_features}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::InvalidInput(format!("rho = {rho} outside [0,1]")));
        }
        Ok(SampleBatch {
            n,
            n_samples,
            rho,
            seed,
            y,
            hidden,
            m_features,
            pixel_mean: OnceLock::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Observation `k`.
    #[inline]
    pub fn sample(&self, k: usize) -> &[f64] {
        &self.y[k * self.n..(k + 1) * self.n]
    }

    /// Active-feature index sets, if ground truth was kept.
    pub fn hidden(&self) -> Option<&[Vec<u32>]> {
        self.hidden.as_deref()
    }

    /// Feature count recorded with the ground truth (0 when absent).
    pub fn m_features(&self) -> usize {
        self.m_features
    }

    /// Per-pixel empirical mean Ê[y], computed once and cached.
    pub fn pixel_mean(&self) -> &[f64] {
        self.pixel_mean.get_or_init(|| empirical_pixel_mean(self))
    }
}

/// Draws `n_samples` i.i.d. observations `y = Ax` with `x` ρ-Bernoulli
/// (ρ from the dictionary's regime), deterministically per seed.
pub fn draw_batch(
    dict: &Dictionary,
    n_samples: usize,
    seed: u64,
    keep_hidden: bool,
) -> Result<SampleBatch> {
    if n_samples == 0 {
        return Err(Error::InvalidInput("n_samples must be ≥ 1".into()));
    }
    let n = dict.n();
    let m = dict.m();
    let rho = dict.params().rho;
    let columns: Vec<Vec<(u32, f64)>> = (0..m).map(|j| dict.column_nonzeros(j)).collect();
    let mut y = vec![0.0f64; n * n_samples];
    let mut hidden = keep_hidden.then(|| Vec::with_capacity(n_samples));
    for k in 0..n_samples {
        let mut stream = rng::rng_stream(seed, k as u64);
        let row = &mut y[k * n..(k + 1) * n];
        let mut active: Vec<u32> = Vec::new();
        for (j, column) in columns.iter().enumerate() {
            if rng::bernoulli(&mut stream, rho) {
                active.push(j as u32);
                for &(i, v) in column {
                    row[i as usize] += v;
                }
            }
        }
        if let Some(h) = hidden.as_mut() {
            h.push(active);
        }
    }
    SampleBatch::from_parts(n, rho, seed, y, hidden, m)
}

/// Arithmetic mean of each pixel over the batch (compensated summation).
pub fn empirical_pixel_mean(batch: &SampleBatch) -> Vec<f64> {
    let n = batch.n();
    let mut sums = vec![CompensatedSum::new(); n];
    for k in 0..batch.n_samples() {
        let row = batch.sample(k);
        for (acc, &v) in sums.iter_mut().zip(row) {
            acc.add(v);
        }
    }
    let inv = 1.0 / batch.n_samples() as f64;
    sums.into_iter().map(|acc| acc.value() * inv).collect()
}

/// Writes the batch in the text format: header `N n rho seed has_hidden`,
/// then N lines of n observations; with ground truth, N further lines of
/// m-character bit strings.
pub fn write_batch(batch: &SampleBatch, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "{} {} {:.16e} {} {}",
        batch.n_samples(),
        batch.n(),
        batch.rho(),
        batch.seed(),
        u8::from(batch.hidden().is_some())
    )?;
    for k in 0..batch.n_samples() {
        let row = batch.sample(k);
        let mut line = String::with_capacity(row.len() * 24);
        for (i, &v) in row.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            line.push_str(&format!("{v:.16e}"));
        }
        writeln!(w, "{line}")?;
    }
    if let Some(hidden) = batch.hidden() {
        let m = batch.m_features();
        for active in hidden {
            let mut bits = vec![b'0'; m];
            for &j in active {
                bits[j as usize] = b'1';
            }
            w.write_all(&bits)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a batch written by [`write_batch`].
pub fn read_batch(path: &Path) -> Result<SampleBatch> {
    let parse_err = |message: String| Error::Parse {
        path: path.display().to_string(),
        message,
    };
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err("empty file".into()))??;
    let tok: Vec<&str> = header.split_whitespace().collect();
    if tok.len() != 5 {
        return Err(parse_err(format!(
            "header has {} fields, expected 5",
            tok.len()
        )));
    }
    let n_samples: usize = tok[0]
        .parse()
        .map_err(|e| parse_err(format!("bad N: {e}")))?;
    let n: usize = tok[1]
        .parse()
        .map_err(|e| parse_err(format!("bad n: {e}")))?;
    let rho: f64 = tok[2]
        .parse()
        .map_err(|e| parse_err(format!("bad rho: {e}")))?;
    let seed: u64 = tok[3]
        .parse()
        .map_err(|e| parse_err(format!("bad seed: {e}")))?;
    let has_hidden = match tok[4] {
        "0" => false,
        "1" => true,
        other => return Err(parse_err(format!("bad has_hidden flag {other:?}"))),
    };
    let mut y = Vec::with_capacity(n * n_samples);
    let mut taken = 0usize;
    let mut hidden: Option<Vec<Vec<u32>>> = has_hidden.then(Vec::new);
    let mut m_features = 0usize;
    for line in lines {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if taken < n_samples {
            for piece in trimmed.split_whitespace() {
                y.push(
                    piece
                        .parse::<f64>()
                        .map_err(|e| parse_err(format!("sample {taken}: bad value: {e}")))?,
                );
            }
            taken += 1;
        } else if let Some(h) = hidden.as_mut() {
            if h.len() == n_samples {
                return Err(parse_err("trailing content after hidden vectors".into()));
            }
            if m_features == 0 {
                m_features = trimmed.len();
            } else if trimmed.len() != m_features {
                return Err(parse_err(format!(
                    "hidden line {} has {} bits, expected {m_features}",
                    h.len(),
                    trimmed.len()
                )));
            }
            let mut active = Vec::new();
            for (j, c) in trimmed.bytes().enumerate() {
                match c {
                    b'0' => {}
                    b'1' => active.push(j as u32),
                    other => {
                        return Err(parse_err(format!(
                            "hidden line {}: unexpected byte {other:#x}",
                            h.len()
                        )))
                    }
                }
            }
            h.push(active);
        } else {
            return Err(parse_err("trailing content after observations".into()));
        }
    }
    if y.len() != n * n_samples {
        return Err(parse_err(format!(
            "expected {} observation values, found {}",
            n * n_samples,
            y.len()
        )));
    }
    if let Some(h) = &hidden {
        if h.len() != n_samples {
            return Err(parse_err(format!(
                "expected {n_samples} hidden vectors, found {}",
                h.len()
            )));
        }
    }
    SampleBatch::from_parts(n, rho, seed, y, hidden, m_features)
}
