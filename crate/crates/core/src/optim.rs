//! Named parameter storage, Adam, and the finite-difference gradient check.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Ordered collection of named dense arrays. Iteration order is the
/// registration order, so reductions over parameters are deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    mats: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, mat: Mat) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.mats.push(mat);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index.get(name).map(|&i| &self.mats[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.index
            .get(name)
            .copied()
            .map(move |i| &mut self.mats[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.mats.iter())
    }

    pub fn mats(&self) -> &[Mat] {
        &self.mats
    }

    pub fn mats_mut(&mut self) -> &mut [Mat] {
        &mut self.mats
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Sum of squared entries over every registered array.
    pub fn norm_sq(&self) -> f64 {
        self.mats.iter().map(Mat::norm_sq).sum()
    }

    pub fn total_len(&self) -> usize {
        self.mats.iter().map(|m| m.rows() * m.cols()).sum()
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .mats
                .iter()
                .zip(other.mats.iter())
                .all(|(a, b)| a.same_shape(b))
    }

    pub fn first_non_finite(&self) -> Option<(String, usize, usize)> {
        for (name, m) in self.iter() {
            if let Some((r, c)) = m.first_non_finite() {
                return Some((name.to_string(), r, c));
            }
        }
        None
    }

    /// Flat binary checkpoint: count, then per array its name, shape, and
    /// row-major f64 values, all little-endian.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (name, m) in self.iter() {
            buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<ParamStore> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let corrupt = |reason: String| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason,
        };
        let mut cur = 0usize;
        let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
            let end = *cur + n;
            let s = bytes
                .get(*cur..end)
                .ok_or_else(|| corrupt("truncated".into()))?;
            *cur = end;
            Ok(s)
        };
        let read_u64 = |cur: &mut usize| -> Result<u64> {
            Ok(u64::from_le_bytes(take(cur, 8)?.try_into().unwrap()))
        };
        let count = read_u64(&mut cur)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u64(&mut cur)? as usize;
            let name = std::str::from_utf8(take(&mut cur, name_len)?)
                .map_err(|_| corrupt("bad name".into()))?
                .to_string();
            let rows = read_u64(&mut cur)? as usize;
            let cols = read_u64(&mut cur)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()));
            }
            store
                .register(&name, Mat::from_vec(rows, cols, data)?)
                .map_err(|_| corrupt(format!("duplicate name {name:?}")))?;
        }
        if cur != bytes.len() {
            return Err(corrupt("trailing bytes".into()));
        }
        Ok(store)
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates mirroring a ParamStore's layout.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl AdamState {
    pub fn for_store(store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store
            .mats()
            .iter()
            .map(|m| Mat::zeros(m.rows(), m.cols()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update over every array in the store.
///
/// Non-finite gradient entries reject the whole update and report where the
/// first bad entry sits.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if lr <= 0.0 || !lr.is_finite() {
        return Err(Error::Config(format!(
            "adam learning rate {lr} must be positive"
        )));
    }
    if !params.same_layout(grads) {
        return Err(Error::ShapeMismatch(
            "adam: grads do not mirror params".into(),
        ));
    }
    if let Some((name, r, c)) = grads.first_non_finite() {
        return Err(Error::NonFinite {
            context: "adam gradient".into(),
            detail: format!("parameter {name:?} entry ({r},{c})"),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);
    for (idx, g) in grads.mats().iter().enumerate() {
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let p = &mut params.mats_mut()[idx];
        for ((pi, gi), (mi, vi)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data().iter())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *pi -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    if let Some((name, r, c)) = params.first_non_finite() {
        return Err(Error::NonFinite {
            context: "adam update".into(),
            detail: format!("parameter {name:?} entry ({r},{c})"),
        });
    }
    Ok(())
}

/// Central-difference check of an analytic gradient on randomly probed
/// coordinates. Returns the max relative error with denominator
/// max(|analytic|, |numeric|, 1e-8). The probed parameters are restored
/// exactly.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &mut ParamStore,
    analytic: &ParamStore,
    probe_count: usize,
    h: f64,
    rng: &mut impl Rng,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> f64,
{
    if !params.same_layout(analytic) {
        return Err(Error::ShapeMismatch(
            "finite_diff: grads do not mirror params".into(),
        ));
    }
    if h <= 0.0 {
        return Err(Error::Config("finite_diff: h must be positive".into()));
    }
    let total = params.total_len();
    if total == 0 {
        return Ok(0.0);
    }
    let mut worst = 0.0f64;
    for _ in 0..probe_count {
        let flat = rng.gen_range(0..total);
        // Locate (array, offset) for the flat coordinate.
        let mut remaining = flat;
        let mut which = 0usize;
        for (idx, m) in params.mats().iter().enumerate() {
            let len = m.rows() * m.cols();
            if remaining < len {
                which = idx;
                break;
            }
            remaining -= len;
        }
        let original = params.mats()[which].data()[remaining];
        params.mats_mut()[which].data_mut()[remaining] = original + h;
        let plus = loss_fn(params);
        params.mats_mut()[which].data_mut()[remaining] = original - h;
        let minus = loss_fn(params);
        params.mats_mut()[which].data_mut()[remaining] = original;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.mats()[which].data()[remaining];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
