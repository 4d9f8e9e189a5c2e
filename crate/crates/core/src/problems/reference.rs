//! Reference solutions on space-time grids and their `SPINN-REF-1` file format.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::format;

pub const MAGIC: &str = "SPINN-REF-1";

/// Field samples on a tensor grid `t x axes[0] x axes[1] ...`, row-major, one array per component.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSolution {
    pub problem: String,
    pub t: Vec<f64>,
    pub axes: Vec<Vec<f64>>,
    /// Period of each spatial axis.
    pub period: Vec<f64>,
    pub fields: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    problem: String,
    shape: Vec<usize>,
    components: usize,
    period: Vec<f64>,
}

impl ReferenceSolution {
    pub fn new(problem: impl Into<String>, t: Vec<f64>, axes: Vec<Vec<f64>>, period: Vec<f64>, fields: Vec<Vec<f64>>) -> Result<Self> {
        let r = Self { problem: problem.into(), t, axes, period, fields };
        r.validate()?;
        Ok(r)
    }

    pub fn shape(&self) -> Vec<usize> {
        std::iter::once(self.t.len()).chain(self.axes.iter().map(Vec::len)).collect()
    }

    pub fn points_per_slice(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn components(&self) -> usize {
        self.fields.len()
    }

    /// Component `c` at time index `ti`.
    pub fn slice(&self, c: usize, ti: usize) -> &[f64] {
        let n = self.points_per_slice();
        &self.fields[c][ti * n..(ti + 1) * n]
    }

    /// Physical coordinates of the spatial grid, row-major.
    pub fn spatial_points(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new()];
        for axis in &self.axes {
            out = out.into_iter().flat_map(|p| axis.iter().map(move |&x| [p.as_slice(), &[x]].concat())).collect();
        }
        out
    }

    fn validate(&self) -> Result<()> {
        let n: usize = self.shape().iter().product();
        if self.fields.is_empty() || self.fields.iter().any(|f| f.len() != n) {
            return Err(Error::Shape(format!(
                "fields of lengths {:?} on a {:?} grid",
                self.fields.iter().map(Vec::len).collect::<Vec<_>>(),
                self.shape()
            )));
        }
        if self.period.len() != self.axes.len() {
            return Err(Error::Shape(format!("{} periods for {} axes", self.period.len(), self.axes.len())));
        }
        let all = self.t.iter().chain(self.axes.iter().flatten()).chain(self.fields.iter().flatten());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite reference data".into()));
        }
        Ok(())
    }

    /// Drops a trailing grid point that repeats the first one period later, after
    /// checking that the field repeats too.
    pub fn drop_periodic_endpoints(&mut self) -> Result<()> {
        for a in 0..self.axes.len() {
            let ax = &self.axes[a];
            let n = ax.len();
            if n < 2 || ((ax[n - 1] - ax[0]) - self.period[a]).abs() > 1e-9 * self.period[a] {
                continue;
            }
            let shape = self.shape();
            let inner: usize = shape[a + 2..].iter().product();
            let outer: usize = shape[..a + 1].iter().product();
            for f in &mut self.fields {
                let mut kept = Vec::with_capacity(f.len() / n * (n - 1));
                for o in 0..outer {
                    let block = &f[o * n * inner..(o + 1) * n * inner];
                    let (first, last) = (&block[..inner], &block[(n - 1) * inner..]);
                    if first.iter().zip(last).any(|(x, y)| (x - y).abs() > 1e-8 * (1.0 + x.abs())) {
                        return Err(Error::Format(format!("axis {a} endpoint repeats the first coordinate but not its values")));
                    }
                    kept.extend_from_slice(&block[..(n - 1) * inner]);
                }
                *f = kept;
            }
            self.axes[a].pop();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = Header { problem: self.problem.clone(), shape: self.shape(), components: self.components(), period: self.period.clone() };
        let mut blocks: Vec<&[f64]> = vec![&self.t];
        blocks.extend(self.axes.iter().map(Vec::as_slice));
        blocks.extend(self.fields.iter().map(Vec::as_slice));
        format::encode(MAGIC, json!(header), &blocks)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, mut blocks) = format::decode(MAGIC, bytes)?;
        let h: Header = serde_json::from_value(h).map_err(|e| Error::Format(format!("reference header: {e}")))?;
        let d = h.shape.len().checked_sub(1).ok_or_else(|| Error::Format("empty shape".into()))?;
        if blocks.len() != 1 + d + h.components {
            return Err(Error::Format(format!("{} blocks for shape {:?} with {} components", blocks.len(), h.shape, h.components)));
        }
        let fields = blocks.split_off(1 + d);
        let axes = blocks.split_off(1);
        let t = blocks.pop().unwrap();
        let mut r = Self { problem: h.problem, t, axes, period: h.period, fields };
        if r.shape() != h.shape {
            return Err(Error::Shape(format!("axis lengths {:?} disagree with header shape {:?}", r.shape(), h.shape)));
        }
        r.validate()?;
        r.drop_periodic_endpoints()?;
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&format::read(path)?)
    }

    /// Grid sizes when every axis is the uniform power-of-two grid `lo + j (hi - lo) / m`.
    pub fn torus_sizes(&self, lo: &[f64], hi: &[f64]) -> Option<Vec<usize>> {
        let mut m = Vec::new();
        for (a, ax) in self.axes.iter().enumerate() {
            let n = ax.len();
            let h = (hi[a] - lo[a]) / n as f64;
            let uniform = n.is_power_of_two() && ax.iter().enumerate().all(|(j, &x)| (x - (lo[a] + j as f64 * h)).abs() < 1e-12 * (1.0 + x.abs()));
            if !uniform {
                return None;
            }
            m.push(n);
        }
        Some(m)
    }
}
