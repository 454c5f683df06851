//! Token-level reference encoder: a hashed-vocabulary embedding lookup with
//! an optional linear map, producing one `n×h` matrix of non-normalized
//! token embeddings per text.
//!
//! This is the only place model weights enter the system. Everything
//! downstream consumes token embedding matrices, so embeddings exported by
//! any external backbone can be substituted through the cache file format
//! (see [`crate::ranker`]).

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::mat::Mat;
use crate::wire::{self, WireError};

/// Reserved token id for texts that produce no tokens.
pub const EMPTY_SENTINEL_ID: u32 = 0;

/// Checkpoint file magic.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UWEP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid dimensions: vocab_size {vocab_size}, dim {dim} (both must be >= 1)")]
    InvalidDims { vocab_size: usize, dim: usize },
    #[error("token id {id} out of range for vocab size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("bad checkpoint {path}: {reason}")]
    BadCheckpoint { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A tokenized text: hashed token ids plus whether truncation happened.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub truncated: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// 64-bit FNV-1a over a byte slice.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Lowercases, splits on whitespace and punctuation boundaries, and hashes
/// each token into `[0, vocab_size)` with FNV-1a. Texts without any
/// alphanumeric content map to the single sentinel id 0 so downstream
/// matrices always have at least one row.
pub fn tokenize(text: &str, vocab_size: usize, max_tokens: Option<usize>) -> TokenSequence {
    let mut ids = Vec::new();
    let mut token = String::new();
    let flush = |token: &mut String, ids: &mut Vec<u32>| {
        if !token.is_empty() {
            ids.push((fnv1a64(token.as_bytes()) % vocab_size as u64) as u32);
            token.clear();
        }
    };
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for lower in ch.to_lowercase() {
                token.push(lower);
            }
        } else {
            flush(&mut token, &mut ids);
        }
    }
    flush(&mut token, &mut ids);

    if ids.is_empty() {
        ids.push(EMPTY_SENTINEL_ID);
    }
    let mut truncated = false;
    if let Some(max) = max_tokens {
        let max = max.max(1);
        if ids.len() > max {
            ids.truncate(max);
            truncated = true;
        }
    }
    TokenSequence { ids, truncated }
}

/// Optional linear map applied after the table lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `h×h` weight, row-major: `out_j = sum_k in_k * weight[k][j] + bias[j]`.
    pub weight: Mat,
    pub bias: Vec<f64>,
}

/// Parameters of the reference encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub vocab_size: usize,
    pub dim: usize,
    /// `vocab_size×h` embedding table.
    pub table: Mat,
    pub projection: Option<Projection>,
}

impl EncoderParams {
    /// Convenience: tokenize with this encoder's vocabulary size.
    pub fn tokenize(&self, text: &str, max_tokens: Option<usize>) -> TokenSequence {
        tokenize(text, self.vocab_size, max_tokens)
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let mut n = self.vocab_size * self.dim;
        if let Some(p) = &self.projection {
            n += p.weight.rows() * p.weight.cols() + p.bias.len();
        }
        n
    }
}

/// Draws fresh parameters from a seeded generator.
///
/// Table and projection-weight entries are i.i.d. normal with mean zero and
/// standard deviation `1/sqrt(h)`; the projection bias starts at zero. The
/// same seed yields bit-identical parameters.
pub fn init_params(
    seed: u64,
    vocab_size: usize,
    dim: usize,
    with_projection: bool,
) -> Result<EncoderParams, EncoderError> {
    if vocab_size < 1 || dim < 1 {
        return Err(EncoderError::InvalidDims { vocab_size, dim });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (dim as f64).sqrt();
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            })
            .collect()
    };
    let table = Mat::from_vec(vocab_size, dim, draw(vocab_size * dim, &mut rng));
    let projection = if with_projection {
        let weight = Mat::from_vec(dim, dim, draw(dim * dim, &mut rng));
        Some(Projection {
            weight,
            bias: vec![0.0; dim],
        })
    } else {
        None
    };
    Ok(EncoderParams {
        vocab_size,
        dim,
        table,
        projection,
    })
}

/// Encodes a token sequence into its `n×h` embedding matrix.
///
/// Row `i` is the table row of token `i`, passed through the projection when
/// one is configured. Pure in `(params, tokens)`.
pub fn encode(params: &EncoderParams, tokens: &TokenSequence) -> Result<Mat, EncoderError> {
    let h = params.dim;
    let mut out = Mat::zeros(tokens.len(), h);
    for (i, &id) in tokens.ids.iter().enumerate() {
        if id as usize >= params.vocab_size {
            return Err(EncoderError::TokenOutOfRange {
                id,
                vocab_size: params.vocab_size,
            });
        }
        let emb = params.table.row(id as usize);
        match &params.projection {
            None => out.row_mut(i).copy_from_slice(emb),
            Some(p) => {
                let row = out.row_mut(i);
                for j in 0..h {
                    let mut acc = p.bias[j];
                    for (k, &e) in emb.iter().enumerate() {
                        acc += e * p.weight.get(k, j);
                    }
                    row[j] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone)]
pub struct GradientStore {
    pub table: Mat,
    pub proj_weight: Option<Mat>,
    pub proj_bias: Option<Vec<f64>>,
}

impl GradientStore {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        GradientStore {
            table: Mat::zeros(params.vocab_size, params.dim),
            proj_weight: params
                .projection
                .as_ref()
                .map(|p| Mat::zeros(p.weight.rows(), p.weight.cols())),
            proj_bias: params.projection.as_ref().map(|p| vec![0.0; p.bias.len()]),
        }
    }

    /// Name of the first parameter block containing a non-finite entry.
    pub fn first_non_finite_block(&self) -> Option<&'static str> {
        if !self.table.is_finite() {
            return Some("table");
        }
        if let Some(w) = &self.proj_weight {
            if !w.is_finite() {
                return Some("projection weight");
            }
        }
        if let Some(b) = &self.proj_bias {
            if b.iter().any(|v| !v.is_finite()) {
                return Some("projection bias");
            }
        }
        None
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.table.as_mut_slice() {
            *v *= factor;
        }
        if let Some(w) = &mut self.proj_weight {
            for v in w.as_mut_slice() {
                *v *= factor;
            }
        }
        if let Some(b) = &mut self.proj_bias {
            for v in b.iter_mut() {
                *v *= factor;
            }
        }
    }
}

/// Accumulates the gradient of `encode` into `grads`, given the gradient
/// `d_out` of the loss with respect to the encoded matrix.
pub fn encode_backward(
    params: &EncoderParams,
    tokens: &TokenSequence,
    d_out: &Mat,
    grads: &mut GradientStore,
) {
    debug_assert_eq!(d_out.rows(), tokens.len());
    debug_assert_eq!(d_out.cols(), params.dim);
    let h = params.dim;
    match &params.projection {
        None => {
            for (i, &id) in tokens.ids.iter().enumerate() {
                let row = grads.table.row_mut(id as usize);
                for (g, d) in row.iter_mut().zip(d_out.row(i)) {
                    *g += d;
                }
            }
        }
        Some(p) => {
            let dw = grads.proj_weight.as_mut().expect("projection grads");
            let db = grads.proj_bias.as_mut().expect("projection grads");
            for (i, &id) in tokens.ids.iter().enumerate() {
                let emb = params.table.row(id as usize);
                let d = d_out.row(i);
                // d table row = d_out · W^T, dW += emb ⊗ d_out, db += d_out
                for j in 0..h {
                    db[j] += d[j];
                }
                for k in 0..h {
                    let ek = emb[k];
                    let dwk = dw.row_mut(k);
                    for j in 0..h {
                        dwk[j] += ek * d[j];
                    }
                }
                let drow: Vec<f64> = (0..h)
                    .map(|k| {
                        let wk = p.weight.row(k);
                        let mut acc = 0.0;
                        for j in 0..h {
                            acc += d[j] * wk[j];
                        }
                        acc
                    })
                    .collect();
                let grow = grads.table.row_mut(id as usize);
                for (g, dv) in grow.iter_mut().zip(&drow) {
                    *g += dv;
                }
            }
        }
    }
}

/// Writes a checkpoint: magic, version, vocab_size, dim, projection flag,
/// then little-endian f32 values row-major (table, then projection weight
/// and bias when present).
pub fn save_checkpoint(params: &EncoderParams, path: impl AsRef<Path>) -> Result<(), EncoderError> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(17 + params.param_count() * 4);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    wire::put_u32(&mut buf, CHECKPOINT_VERSION);
    wire::put_u32(&mut buf, params.vocab_size as u32);
    wire::put_u32(&mut buf, params.dim as u32);
    buf.push(u8::from(params.projection.is_some()));
    wire::put_f32_slice(&mut buf, params.table.as_slice());
    if let Some(p) = &params.projection {
        wire::put_f32_slice(&mut buf, p.weight.as_slice());
        wire::put_f32_slice(&mut buf, &p.bias);
    }
    fs::write(path, buf).map_err(|source| EncoderError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a checkpoint written by [`save_checkpoint`]. Values are stored at
/// f32 precision.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EncoderParams, EncoderError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| EncoderError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |reason: &str| EncoderError::BadCheckpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut rd = wire::Reader::new(&bytes);
    let run = |rd: &mut wire::Reader| -> Result<EncoderParams, WireError> {
        rd.expect_magic(CHECKPOINT_MAGIC)?;
        let version = rd.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(WireError::Version(version));
        }
        let vocab_size = rd.u32()? as usize;
        let dim = rd.u32()? as usize;
        let with_projection = rd.u8()? != 0;
        let table = Mat::from_vec(vocab_size, dim, rd.f32_vec(vocab_size * dim)?);
        let projection = if with_projection {
            let weight = Mat::from_vec(dim, dim, rd.f32_vec(dim * dim)?);
            let bias = rd.f32_vec(dim)?;
            Some(Projection { weight, bias })
        } else {
            None
        };
        rd.expect_end()?;
        Ok(EncoderParams {
            vocab_size,
            dim,
            table,
            projection,
        })
    };
    let params = run(&mut rd).map_err(|e| bad(&e.to_string()))?;
    if params.vocab_size < 1 || params.dim < 1 {
        return Err(bad("zero dimensions"));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_maps_to_sentinel() {
        let t = tokenize("", 1000, None);
        assert_eq!(t.ids, vec![EMPTY_SENTINEL_ID]);
        assert!(!t.truncated);
        // punctuation-only text degenerates the same way
        assert_eq!(tokenize("?!...", 1000, None).ids, vec![EMPTY_SENTINEL_ID]);
    }

    #[test]
    fn tokenization_is_case_invariant() {
        let a = tokenize("Data Scientist", 1000, None);
        let b = tokenize("data scientist", 1000, None);
        assert_eq!(a.ids.len(), 2);
        assert_eq!(a.ids, b.ids);
    }

    #[test]
    fn punctuation_splits_tokens() {
        let a = tokenize("self-taught engineer", 1 << 20, None);
        let b = tokenize("self taught engineer", 1 << 20, None);
        assert_eq!(a.ids, b.ids);
        assert_eq!(a.ids.len(), 3);
    }

    #[test]
    fn token_budget_truncates() {
        let text = (0..70).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let t = tokenize(&text, 1 << 16, Some(64));
        assert_eq!(t.len(), 64);
        assert!(t.truncated);
        let free = tokenize(&text, 1 << 16, None);
        assert_eq!(free.len(), 70);
        assert!(!free.truncated);
    }

    #[test]
    fn fnv1a_matches_independent_reference() {
        // straight from the FNV-1a definition
        fn reference(bytes: &[u8]) -> u64 {
            let mut h: u64 = 14695981039346656037;
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(1099511628211);
            }
            h
        }
        for word in ["data", "scientist", "a", "ütf8 ünïcode"] {
            assert_eq!(fnv1a64(word.as_bytes()), reference(word.as_bytes()));
        }
        let vocab = 997;
        let t = tokenize("data", vocab, None);
        assert_eq!(t.ids[0] as u64, reference(b"data") % vocab as u64);
    }

    #[test]
    fn same_seed_identical_params() {
        let a = init_params(7, 100, 8, true).unwrap();
        let b = init_params(7, 100, 8, true).unwrap();
        assert_eq!(a, b);
        let c = init_params(8, 100, 8, true).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn table_variance_tracks_one_over_h() {
        let p = init_params(0, 1000, 16, false).unwrap();
        assert_eq!(p.table.rows(), 1000);
        assert_eq!(p.table.cols(), 16);
        let vals = p.table.as_slice();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (vals.len() - 1) as f64;
        let target = 1.0 / 16.0;
        assert!(
            (var - target).abs() / target < 0.2,
            "sample variance {var} not within 20% of {target}"
        );
    }

    #[test]
    fn invalid_dims_rejected() {
        assert!(init_params(0, 0, 8, false).is_err());
        assert!(init_params(0, 10, 0, false).is_err());
    }

    #[test]
    fn encode_is_table_lookup_without_projection() {
        let p = init_params(3, 50, 4, false).unwrap();
        let tokens = TokenSequence {
            ids: vec![7],
            truncated: false,
        };
        let e = encode(&p, &tokens).unwrap();
        assert_eq!(e.rows(), 1);
        assert_eq!(e.row(0), p.table.row(7));
    }

    #[test]
    fn repeated_token_repeats_rows() {
        let p = init_params(3, 50, 4, false).unwrap();
        let tokens = TokenSequence {
            ids: vec![5, 5],
            truncated: false,
        };
        let e = encode(&p, &tokens).unwrap();
        assert_eq!(e.row(0), e.row(1));
    }

    #[test]
    fn identity_projection_matches_no_projection() {
        let mut p = init_params(3, 50, 4, false).unwrap();
        let plain = encode(
            &p,
            &TokenSequence {
                ids: vec![1, 2, 3],
                truncated: false,
            },
        )
        .unwrap();
        let mut weight = Mat::zeros(4, 4);
        for i in 0..4 {
            weight.set(i, i, 1.0);
        }
        p.projection = Some(Projection {
            weight,
            bias: vec![0.0; 4],
        });
        let projected = encode(
            &p,
            &TokenSequence {
                ids: vec![1, 2, 3],
                truncated: false,
            },
        )
        .unwrap();
        assert_eq!(plain, projected);
    }

    #[test]
    fn encode_rejects_out_of_range_token() {
        let p = init_params(3, 10, 4, false).unwrap();
        let err = encode(
            &p,
            &TokenSequence {
                ids: vec![10],
                truncated: false,
            },
        )
        .unwrap_err();
        assert!(matches!(err, EncoderError::TokenOutOfRange { .. }));
    }

    #[test]
    fn checkpoint_round_trip_preserves_f32_values() {
        let p = init_params(11, 20, 6, true).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(&p, f.path()).unwrap();
        let loaded = load_checkpoint(f.path()).unwrap();
        assert_eq!(loaded.vocab_size, p.vocab_size);
        assert_eq!(loaded.dim, p.dim);
        // storage is f32: reloaded values equal the f32 rounding of the originals
        for (orig, got) in p.table.as_slice().iter().zip(loaded.table.as_slice()) {
            assert_eq!(*got, f64::from(*orig as f32));
        }
        // a second round trip is bit-exact
        let f2 = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(&loaded, f2.path()).unwrap();
        assert_eq!(std::fs::read(f.path()).unwrap(), std::fs::read(f2.path()).unwrap());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), b"NOPE").unwrap();
        assert!(matches!(
            load_checkpoint(f.path()),
            Err(EncoderError::BadCheckpoint { .. })
        ));
    }
}
