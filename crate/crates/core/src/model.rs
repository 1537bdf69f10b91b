//! Scoring models `h_q(x; w)` with analytic parameter gradients.
//!
//! Every model exposes its parameters as one flat [`ParamVector`] so the
//! optimizer can treat gradients and momentum buffers as plain slices.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// A named, contiguous range of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<Segment>,
}

impl ParamVector {
    /// Zero-initialized vector with segments laid out back to back.
    pub fn zeros(segments: &[(&str, usize)]) -> ParamVector {
        let mut layout = Vec::with_capacity(segments.len());
        let mut offset = 0;
        for &(name, len) in segments {
            layout.push(Segment {
                name: name.to_string(),
                offset,
                len,
            });
            offset += len;
        }
        ParamVector {
            values: vec![0.0; offset],
            layout,
        }
    }

    pub fn from_parts(values: Vec<f64>, layout: Vec<Segment>) -> Result<ParamVector> {
        let mut expected = 0;
        for seg in &layout {
            if seg.offset != expected {
                return Err(Error::Checkpoint(format!(
                    "segment {} starts at {} but previous segment ends at {}",
                    seg.name, seg.offset, expected
                )));
            }
            expected += seg.len;
        }
        if expected != values.len() {
            return Err(Error::Checkpoint(format!(
                "layout covers {} values but vector has {}",
                expected,
                values.len()
            )));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable view of the values. The length cannot change.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.layout.iter().find(|s| s.name == name)
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.segment(name)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }
}

/// A bounded score function over (query row, catalog item) pairs.
///
/// Implementors provide the unchecked accessors; the checked wrappers validate
/// ids first. Reading methods take `&self` and may run concurrently.
pub trait ScoringModel {
    fn params(&self) -> &ParamVector;
    fn params_mut(&mut self) -> &mut ParamVector;
    /// `B_h`: every score satisfies `|h| <= B_h`.
    fn score_bound(&self) -> f64;
    fn num_queries(&self) -> usize;
    fn num_items(&self) -> usize;

    /// Score without id validation; panics on out-of-range ids.
    fn score_raw(&self, q: usize, x: usize) -> f64;

    /// Adds `coef * grad_w h_q(x; w)` into `out`.
    fn accumulate_gradient(&self, q: usize, x: usize, coef: f64, out: &mut [f64]);

    fn check_ids(&self, q: usize, x: usize) -> Result<()> {
        if q >= self.num_queries() {
            return Err(Error::Lookup {
                kind: "query",
                index: q,
                len: self.num_queries(),
            });
        }
        if x >= self.num_items() {
            return Err(Error::Lookup {
                kind: "item",
                index: x,
                len: self.num_items(),
            });
        }
        Ok(())
    }

    fn score(&self, q: usize, x: usize) -> Result<f64> {
        self.check_ids(q, x)?;
        Ok(self.score_raw(q, x))
    }

    fn score_gradient(&self, q: usize, x: usize) -> Result<Vec<f64>> {
        self.check_ids(q, x)?;
        let mut g = vec![0.0; self.params().len()];
        self.accumulate_gradient(q, x, 1.0, &mut g);
        Ok(g)
    }

    fn scores(&self, q: usize, items: &[usize]) -> Result<Vec<f64>> {
        items.iter().map(|&x| self.score(q, x)).collect()
    }
}

/// `h_q(x) = B_h * tanh((u_q . v_x + b_x) / s)`.
///
/// Layout: `query_emb` (N x d, row-major), `item_emb` (M x d), `item_bias` (M).
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizationScorer {
    params: ParamVector,
    num_queries: usize,
    num_items: usize,
    dim: usize,
    bound: f64,
    scale: f64,
}

const QUERY_EMB: &str = "query_emb";
const ITEM_EMB: &str = "item_emb";
const ITEM_BIAS: &str = "item_bias";
const INIT_STD: f64 = 0.1;

impl FactorizationScorer {
    /// Embeddings are i.i.d. `N(0, 0.1^2)`; biases start at zero.
    pub fn init(
        num_queries: usize,
        num_items: usize,
        dim: usize,
        bound: f64,
        scale: f64,
        seed: u64,
    ) -> Result<FactorizationScorer> {
        let mut m = Self::zeros(num_queries, num_items, dim, bound, scale)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let emb_len = (num_queries + num_items) * dim;
        for w in &mut m.params.values_mut()[..emb_len] {
            *w = normal.sample(&mut rng);
        }
        Ok(m)
    }

    pub fn zeros(
        num_queries: usize,
        num_items: usize,
        dim: usize,
        bound: f64,
        scale: f64,
    ) -> Result<FactorizationScorer> {
        if num_queries == 0 || num_items == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "model dimensions must be positive, got N={num_queries}, M={num_items}, d={dim}"
            )));
        }
        if !(bound > 0.0 && bound.is_finite()) || !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!(
                "score bound and scale must be positive, got B_h={bound}, s={scale}"
            )));
        }
        let params = ParamVector::zeros(&[
            (QUERY_EMB, num_queries * dim),
            (ITEM_EMB, num_items * dim),
            (ITEM_BIAS, num_items),
        ]);
        Ok(FactorizationScorer {
            params,
            num_queries,
            num_items,
            dim,
            bound,
            scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    fn item_emb_offset(&self) -> usize {
        self.num_queries * self.dim
    }

    fn bias_offset(&self) -> usize {
        (self.num_queries + self.num_items) * self.dim
    }

    #[inline]
    fn pre_activation(&self, q: usize, x: usize) -> f64 {
        let d = self.dim;
        let w = self.params.values();
        let u = &w[q * d..(q + 1) * d];
        let io = self.item_emb_offset() + x * d;
        let v = &w[io..io + d];
        let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        (dot + w[self.bias_offset() + x]) / self.scale
    }

    /// Writes the checkpoint format:
    ///
    /// ```text
    /// magic        8 bytes  "FRNKCKP1"
    /// bound        f64 LE
    /// scale        f64 LE
    /// N, M, d      3 x u64 LE
    /// segments     u32 LE count, then per segment:
    ///                u16 LE name length, name (UTF-8), u64 LE offset, u64 LE length
    /// values       u64 LE count, then count x f64 LE
    /// ```
    pub fn write_checkpoint(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&self.bound.to_le_bytes())?;
        w.write_all(&self.scale.to_le_bytes())?;
        for v in [self.num_queries, self.num_items, self.dim] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&(self.params.layout().len() as u32).to_le_bytes())?;
        for seg in self.params.layout() {
            w.write_all(&(seg.name.len() as u16).to_le_bytes())?;
            w.write_all(seg.name.as_bytes())?;
            w.write_all(&(seg.offset as u64).to_le_bytes())?;
            w.write_all(&(seg.len as u64).to_le_bytes())?;
        }
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for v in self.params.values() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<FactorizationScorer> {
        let ck = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(ck)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic header".into()));
        }
        let bound = read_f64(r).map_err(ck)?;
        let scale = read_f64(r).map_err(ck)?;
        let n = read_u64(r).map_err(ck)? as usize;
        let m = read_u64(r).map_err(ck)? as usize;
        let d = read_u64(r).map_err(ck)? as usize;
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4).map_err(ck)?;
        let count = u32::from_le_bytes(buf4) as usize;
        let mut layout = Vec::with_capacity(count);
        for _ in 0..count {
            let mut buf2 = [0u8; 2];
            r.read_exact(&mut buf2).map_err(ck)?;
            let mut name = vec![0u8; u16::from_le_bytes(buf2) as usize];
            r.read_exact(&mut name).map_err(ck)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("segment name is not UTF-8".into()))?;
            let offset = read_u64(r).map_err(ck)? as usize;
            let len = read_u64(r).map_err(ck)? as usize;
            layout.push(Segment { name, offset, len });
        }
        let total = read_u64(r).map_err(ck)? as usize;
        let mut values = Vec::with_capacity(total);
        for _ in 0..total {
            values.push(read_f64(r).map_err(ck)?);
        }
        let params = ParamVector::from_parts(values, layout)?;
        let mut model = FactorizationScorer::zeros(n, m, d, bound, scale)?;
        if params.layout() != model.params.layout() {
            return Err(Error::Checkpoint(
                "segment layout does not match the declared dimensions".into(),
            ));
        }
        model.params = params;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FactorizationScorer> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(&mut std::io::BufReader::new(file))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FRNKCKP1";

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

impl ScoringModel for FactorizationScorer {
    fn params(&self) -> &ParamVector {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    fn score_bound(&self) -> f64 {
        self.bound
    }

    fn num_queries(&self) -> usize {
        self.num_queries
    }

    fn num_items(&self) -> usize {
        self.num_items
    }

    fn score_raw(&self, q: usize, x: usize) -> f64 {
        assert!(q < self.num_queries && x < self.num_items);
        self.bound * self.pre_activation(q, x).tanh()
    }

    fn accumulate_gradient(&self, q: usize, x: usize, coef: f64, out: &mut [f64]) {
        assert!(q < self.num_queries && x < self.num_items);
        let t = self.pre_activation(q, x).tanh();
        // d h / d (pre-activation numerator)
        let g = coef * self.bound * (1.0 - t * t) / self.scale;
        let d = self.dim;
        let uo = q * d;
        let io = self.item_emb_offset() + x * d;
        let w = self.params.values();
        for k in 0..d {
            out[uo + k] += g * w[io + k];
            out[io + k] += g * w[uo + k];
        }
        out[self.bias_offset() + x] += g;
    }
}

/// Largest observed `|h(w) - h(w')| / ||w - w'||` over random parameter pairs
/// near `model`'s parameters; a diagnostic, not a certified constant.
pub fn empirical_lipschitz(
    model: &FactorizationScorer,
    trials: usize,
    radius: f64,
    rng: &mut impl Rng,
) -> f64 {
    let mut best: f64 = 0.0;
    let mut a = model.clone();
    let mut b = model.clone();
    for _ in 0..trials {
        for (wa, (wb, w0)) in a
            .params
            .values_mut()
            .iter_mut()
            .zip(b.params.values_mut().iter_mut().zip(model.params.values()))
        {
            *wa = w0 + radius * (rng.random::<f64>() - 0.5);
            *wb = w0 + radius * (rng.random::<f64>() - 0.5);
        }
        let q = rng.random_range(0..model.num_queries);
        let x = rng.random_range(0..model.num_items);
        let dist: f64 = a
            .params
            .values()
            .iter()
            .zip(b.params.values())
            .map(|(p, r)| (p - r) * (p - r))
            .sum::<f64>()
            .sqrt();
        if dist > 0.0 {
            best = best.max((a.score_raw(q, x) - b.score_raw(q, x)).abs() / dist);
        }
    }
    best
}
