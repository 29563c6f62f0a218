//! Per-token encoder: embedding lookup, linear projection, L2 normalization.
//!
//! There is no cross-token mixing, so encoding is equivariant under any
//! reordering of the input tokens. The same parameter type serves teacher
//! and student, query and document roles.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::text::TokenId;

const PARAMS_MAGIC: &[u8; 8] = b"OPTENC\0\0";
pub const PARAMS_VERSION: u32 = 1;
const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub vocab: usize,
    pub hidden: usize,
    pub out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `vocab × hidden` token embeddings.
    pub embed: Array2<f64>,
    /// `hidden × out` output projection.
    pub proj: Array2<f64>,
}

/// `L × d` matrix whose rows are unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix(Array2<f64>);

impl TokenMatrix {
    /// Wraps rows that are already unit norm; rejects anything else.
    pub fn from_unit_rows(rows: Array2<f64>) -> Result<Self> {
        for (i, row) in rows.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!("row {i} has norm {n}")));
            }
        }
        Ok(Self(rows))
    }

    /// Normalizes every row of `rows`.
    pub fn normalized(mut rows: Array2<f64>) -> Self {
        for mut row in rows.rows_mut() {
            let n = row.dot(&row).sqrt().max(f64::MIN_POSITIVE);
            row.mapv_inplace(|x| x / n);
        }
        Self(rows)
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }
}

/// Sparse gradient over [`EncoderParams`]: only touched embedding rows are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub embed_rows: BTreeMap<TokenId, Array1<f64>>,
    pub proj: Array2<f64>,
}

impl ParamGrad {
    pub fn zeros(dims: EncoderDims) -> Self {
        Self {
            embed_rows: BTreeMap::new(),
            proj: Array2::zeros((dims.hidden, dims.out)),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrad) {
        for (id, row) in &other.embed_rows {
            match self.embed_rows.get_mut(id) {
                Some(acc) => *acc += row,
                None => {
                    self.embed_rows.insert(*id, row.clone());
                }
            }
        }
        self.proj += &other.proj;
    }

    pub fn scale(&mut self, factor: f64) {
        for row in self.embed_rows.values_mut() {
            row.mapv_inplace(|x| x * factor);
        }
        self.proj.mapv_inplace(|x| x * factor);
    }

    pub fn is_finite(&self) -> bool {
        self.proj.iter().all(|x| x.is_finite())
            && self.embed_rows.values().all(|r| r.iter().all(|x| x.is_finite()))
    }
}

/// Forward-pass intermediates needed by [`EncoderParams::backward`].
#[derive(Debug, Clone)]
pub struct EncodeCache {
    ids: Vec<TokenId>,
    norms: Vec<f64>,
}

/// Random parameters uniform in `[-0.1, 0.1]`, reproducible from `seed`.
pub fn init_params(dims: EncoderDims, seed: u64) -> Result<EncoderParams> {
    if dims.vocab == 0 || dims.hidden == 0 || dims.out < 2 {
        return Err(Error::InvalidInput(format!("invalid encoder dims {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embed = Array2::from_shape_simple_fn((dims.vocab, dims.hidden), || {
        rng.gen_range(-INIT_SCALE..=INIT_SCALE)
    });
    let proj = Array2::from_shape_simple_fn((dims.hidden, dims.out), || {
        rng.gen_range(-INIT_SCALE..=INIT_SCALE)
    });
    Ok(EncoderParams { embed, proj })
}

impl EncoderParams {
    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            vocab: self.embed.nrows(),
            hidden: self.embed.ncols(),
            out: self.proj.ncols(),
        }
    }

    pub fn encode(&self, ids: &[TokenId]) -> Result<TokenMatrix> {
        Ok(self.encode_with_cache(ids)?.0)
    }

    pub fn encode_with_cache(&self, ids: &[TokenId]) -> Result<(TokenMatrix, EncodeCache)> {
        let vocab = self.embed.nrows();
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab_size: vocab,
            });
        }
        let rows: Vec<usize> = ids.iter().map(|&id| id as usize).collect();
        let mut out = self.embed.select(Axis(0), &rows).dot(&self.proj);
        let mut norms = Vec::with_capacity(ids.len());
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt().max(f64::MIN_POSITIVE);
            row.mapv_inplace(|x| x / n);
            norms.push(n);
        }
        Ok((
            TokenMatrix(out),
            EncodeCache {
                ids: ids.to_vec(),
                norms,
            },
        ))
    }

    /// Chain rule from `d loss / d output_rows` back to the parameters.
    ///
    /// For a unit row `s = u/‖u‖` the Jacobian is `(I − s sᵀ)/‖u‖`, which
    /// projects the upstream gradient onto the tangent space of the sphere.
    pub fn backward(&self, output: &TokenMatrix, cache: &EncodeCache, upstream: &Array2<f64>) -> ParamGrad {
        let mut grad = ParamGrad::zeros(self.dims());
        let raw_grad = normalize_backward(output.rows(), &cache.norms, upstream);
        // d/d proj = Σ_i embed[id_i]ᵀ ⊗ raw_grad_i ; d/d embed[id_i] = raw_grad_i · projᵀ
        let embed_grad = raw_grad.dot(&self.proj.t());
        for (i, &id) in cache.ids.iter().enumerate() {
            let e = self.embed.row(id as usize);
            let g = raw_grad.row(i);
            for (h, &eh) in e.iter().enumerate() {
                let mut prow = grad.proj.row_mut(h);
                prow.scaled_add(eh, &g);
            }
            match grad.embed_rows.get_mut(&id) {
                Some(acc) => *acc += &embed_grad.row(i),
                None => {
                    grad.embed_rows.insert(id, embed_grad.row(i).to_owned());
                }
            }
        }
        grad
    }

    /// In-place `params -= lr * grad`.
    pub fn apply_gradient(&mut self, grad: &ParamGrad, lr: f64) {
        for (&id, row) in &grad.embed_rows {
            self.embed.row_mut(id as usize).scaled_add(-lr, row);
        }
        self.proj.scaled_add(-lr, &grad.proj);
    }

    pub fn is_finite(&self) -> bool {
        self.embed.iter().chain(self.proj.iter()).all(|x| x.is_finite())
    }

    /// Binary layout (little endian): 8-byte magic `OPTENC\0\0`, `u32`
    /// version, three `u64` dims (vocab, hidden, out), then the embedding
    /// and projection payloads as row-major `f64`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dims = self.dims();
        let mut buf = Vec::with_capacity(36 + 8 * (self.embed.len() + self.proj.len()));
        buf.extend_from_slice(PARAMS_MAGIC);
        buf.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
        for d in [dims.vocab, dims.hidden, dims.out] {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in self.embed.iter().chain(self.proj.iter()) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut cursor = Cursor { bytes: &bytes, pos: 0 };
        let truncated = || Error::format(path, "truncated parameter file");

        if cursor.take(8).ok_or_else(truncated)? != PARAMS_MAGIC {
            return Err(Error::format(path, "bad magic, not an encoder parameter file"));
        }
        let version = u32::from_le_bytes(cursor.take(4).ok_or_else(truncated)?.try_into().unwrap());
        if version != PARAMS_VERSION {
            return Err(Error::Version {
                path: path.into(),
                found: version,
                expected: PARAMS_VERSION,
            });
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = u64::from_le_bytes(cursor.take(8).ok_or_else(truncated)?.try_into().unwrap()) as usize;
        }
        let [vocab, hidden, out] = dims;
        let n_embed = vocab.checked_mul(hidden).ok_or_else(|| Error::format(path, "dims overflow"))?;
        let n_proj = hidden.checked_mul(out).ok_or_else(|| Error::format(path, "dims overflow"))?;
        let expected = n_embed
            .checked_add(n_proj)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::format(path, "dims overflow"))?;
        if cursor.remaining() != expected {
            return Err(if cursor.remaining() < expected {
                truncated()
            } else {
                Error::format(path, "payload longer than the header declares")
            });
        }
        let mut read_f64s = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| f64::from_le_bytes(cursor.take(8).unwrap().try_into().unwrap()))
                .collect()
        };
        let embed = Array2::from_shape_vec((vocab, hidden), read_f64s(n_embed))
            .map_err(|e| Error::format(path, e.to_string()))?;
        let proj = Array2::from_shape_vec((hidden, out), read_f64s(n_proj))
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Self { embed, proj })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let slice = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(slice)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Backward pass of row-wise L2 normalization.
///
/// `unit` holds the normalized rows, `norms` the pre-normalization norms.
pub fn normalize_backward(unit: &Array2<f64>, norms: &[f64], upstream: &Array2<f64>) -> Array2<f64> {
    let mut out = upstream.clone();
    for ((mut g, s), &n) in out.rows_mut().into_iter().zip(unit.rows()).zip(norms) {
        let radial = g.dot(&s);
        g.scaled_add(-radial, &s);
        g.mapv_inplace(|x| x / n);
    }
    out
}
