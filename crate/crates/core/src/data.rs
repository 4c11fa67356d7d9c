//! In-memory regression datasets with joint-structured targets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};

/// `inputs: n × input_dim`; `targets: n × (k·d)` with column `j·d + a` for
/// joint `j`, axis `a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Array,
    pub targets: Array,
    pub k: usize,
    pub d: usize,
}

impl Dataset {
    pub fn new(inputs: Array, targets: Array, k: usize, d: usize) -> Result<Self> {
        let (n, _) = inputs.dims2()?;
        let (m, cols) = targets.dims2()?;
        if n != m {
            return Err(Error::invalid(format!("{n} inputs but {m} targets")));
        }
        if k == 0 || d == 0 || cols != k * d {
            return Err(Error::invalid(format!("targets have {cols} columns, expected k*d = {}", k * d)));
        }
        if let Some(i) = inputs.first_non_finite() {
            return Err(Error::invalid(format!("non-finite input at element {i}")));
        }
        if let Some(i) = targets.first_non_finite() {
            return Err(Error::invalid(format!("non-finite target at element {i}")));
        }
        Ok(Dataset { inputs, targets, k, d })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        if idx.is_empty() {
            return Err(Error::invalid("empty selection"));
        }
        let gather = |a: &Array| {
            let c = a.cols();
            let mut out = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                out.extend_from_slice(a.row(i));
            }
            Array::matrix(idx.len(), c, out)
        };
        Ok(Dataset {
            inputs: gather(&self.inputs)?,
            targets: gather(&self.targets)?,
            k: self.k,
            d: self.d,
        })
    }

    /// First `n` rows (or all of them).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

/// Train / validation / test membership decided per index by a seeded hash.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn mix64(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// 80/10/10 split; an index's bucket depends only on `(seed, index)`.
pub fn hash_split(n: usize, seed: u64) -> Split {
    let mut s = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let salt = mix64(seed ^ 0x5851_F42D_4C95_7F2D);
    for i in 0..n {
        match mix64(salt ^ i as u64) % 10 {
            0 => s.val.push(i),
            1 => s.test.push(i),
            _ => s.train.push(i),
        }
    }
    s
}

/// Shuffled mini-batch index lists for one epoch; the last batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Independent generator for one purpose (`stream`) under a run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}
