//! Block-wise causal attention over `[spatial | semantic | action]` tokens.
//!
//! The spatial and semantic tokens form a prefix with full bidirectional
//! attention. Action tokens see the whole prefix and every token of their own
//! or an earlier chunk. Prefix tokens never see action tokens.

use std::fmt;

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentLayout {
    pub n_spatial: usize,
    pub n_semantic: usize,
    pub n_action: usize,
    /// Action tokens per chunk. Must divide `n_action` when there are action tokens.
    pub chunk_size: usize,
}

impl SegmentLayout {
    pub fn new(
        n_spatial: usize,
        n_semantic: usize,
        n_action: usize,
        chunk_size: usize,
    ) -> Result<Self> {
        let layout = Self {
            n_spatial,
            n_semantic,
            n_action,
            chunk_size,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_action > 0 && (self.chunk_size == 0 || !self.n_action.is_multiple_of(self.chunk_size)) {
            return Err(Error::InvalidInput(format!(
                "{} action tokens cannot be split into chunks of {}",
                self.n_action, self.chunk_size
            )));
        }
        Ok(())
    }

    pub fn prefix_len(&self) -> usize {
        self.n_spatial + self.n_semantic
    }

    pub fn total(&self) -> usize {
        self.prefix_len() + self.n_action
    }

    /// Chunk index of token `i`, `None` for prefix tokens.
    pub fn chunk_of(&self, i: usize) -> Option<usize> {
        i.checked_sub(self.prefix_len())
            .map(|j| j / self.chunk_size)
    }
}

/// `allow[q][k]`: may query token `q` attend to key token `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockCausalMask {
    n: usize,
    allow: Vec<bool>,
}

impl BlockCausalMask {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allow[query * self.n + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.allow[query * self.n..(query + 1) * self.n]
    }
}

/// `#` for allowed, `.` for blocked, one row per query token.
impl fmt::Display for BlockCausalMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for q in 0..self.n {
            let line: String = self
                .row(q)
                .iter()
                .map(|&a| if a { '#' } else { '.' })
                .collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

pub fn build_mask(layout: &SegmentLayout) -> Result<BlockCausalMask> {
    layout.validate()?;
    let n = layout.total();
    let mut allow = vec![false; n * n];
    for q in 0..n {
        for k in 0..n {
            allow[q * n + k] = match (layout.chunk_of(q), layout.chunk_of(k)) {
                (None, None) => true,
                (None, Some(_)) => false,
                (Some(_), None) => true,
                (Some(cq), Some(ck)) => ck <= cq,
            };
        }
    }
    Ok(BlockCausalMask { n, allow })
}

/// Single-head scaled dot-product attention restricted to allowed keys.
///
/// Blocked keys are skipped entirely rather than given a large negative
/// score, so a query's output never reads them.
pub fn masked_attention(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    mask: &BlockCausalMask,
) -> Result<Vec<Vec<f64>>> {
    let n = mask.size();
    check_len("attention queries", n, q.len())?;
    check_len("attention keys", n, k.len())?;
    check_len("attention values", n, v.len())?;
    let d = q.first().map_or(0, Vec::len);
    let dv = v.first().map_or(0, Vec::len);
    for i in 0..n {
        check_len("attention query width", d, q[i].len())?;
        check_len("attention key width", d, k[i].len())?;
        check_len("attention value width", dv, v[i].len())?;
    }
    let scale = 1.0 / (d.max(1) as f64).sqrt();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let keys: Vec<usize> = (0..n).filter(|&j| mask.allows(i, j)).collect();
        if keys.is_empty() {
            return Err(Error::InvalidInput(format!(
                "attention row {i} has no allowed keys"
            )));
        }
        let scores: Vec<f64> = keys
            .iter()
            .map(|&j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = weights.iter().sum();
        let mut row = vec![0.0; dv];
        for (&j, w) in keys.iter().zip(&weights) {
            let p = w / z;
            for (o, x) in row.iter_mut().zip(&v[j]) {
                *o += p * x;
            }
        }
        out.push(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::RngStream;
    use proptest::prelude::*;

    fn grid(mask: &BlockCausalMask) -> Vec<String> {
        mask.to_string().lines().map(str::to_owned).collect()
    }

    #[test]
    fn pure_causal_limit() {
        let m = build_mask(&SegmentLayout::new(0, 0, 3, 1).unwrap()).unwrap();
        assert_eq!(grid(&m), ["#..", "##.", "###"]);
    }

    #[test]
    fn pure_prefix_limit() {
        let m = build_mask(&SegmentLayout::new(2, 3, 0, 0).unwrap()).unwrap();
        assert!(grid(&m).iter().all(|r| r == "#####"));
    }

    #[test]
    fn mixed_layout_by_hand() {
        let m = build_mask(&SegmentLayout::new(2, 2, 2, 1).unwrap()).unwrap();
        assert_eq!(
            grid(&m),
            ["####..", "####..", "####..", "####..", "#####.", "######"]
        );
    }

    #[test]
    fn chunks_see_each_other_within_chunk() {
        let m = build_mask(&SegmentLayout::new(1, 0, 4, 2).unwrap()).unwrap();
        assert_eq!(grid(&m), ["#....", "###..", "###..", "#####", "#####"]);
    }

    #[test]
    fn invalid_chunking_rejected() {
        assert!(SegmentLayout::new(1, 1, 3, 2).is_err());
        assert!(SegmentLayout::new(1, 1, 3, 0).is_err());
        let bad = SegmentLayout {
            n_spatial: 0,
            n_semantic: 0,
            n_action: 4,
            chunk_size: 3,
        };
        assert!(build_mask(&bad).is_err());
    }

    #[test]
    fn uniform_average_for_identical_keys() {
        let m = build_mask(&SegmentLayout::new(3, 0, 0, 0).unwrap()).unwrap();
        let q = vec![vec![0.3, -1.0]; 3];
        let k = vec![vec![1.0, 2.0]; 3];
        let v = vec![vec![1.0, 0.0], vec![2.0, 3.0], vec![3.0, 6.0]];
        let out = masked_attention(&q, &k, &v, &m).unwrap();
        for row in out {
            assert!((row[0] - 2.0).abs() < 1e-15 && (row[1] - 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_allowed_key_copies_value_row() {
        // pure causal over one-token chunks: row 0 sees only key 0
        let m = build_mask(&SegmentLayout::new(0, 0, 1, 1).unwrap()).unwrap();
        let v = vec![vec![0.123, -4.5]];
        let out = masked_attention(&[vec![9.0, 9.0]], &[vec![-3.0, 1.0]], &v, &m).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn rejects_shape_errors() {
        let m = build_mask(&SegmentLayout::new(1, 0, 1, 1).unwrap()).unwrap();
        assert!(masked_attention(&[vec![1.0]], &[vec![1.0]], &[vec![1.0]], &m).is_err());
    }

    proptest! {
        #[test]
        fn prefix_outputs_ignore_action_tokens(
            ns in 0usize..4, nm in 0usize..4, chunks in 1usize..4, cs in 1usize..3, seed in any::<u64>()
        ) {
            prop_assume!(ns + nm > 0);
            let layout = SegmentLayout::new(ns, nm, chunks * cs, cs).unwrap();
            let m = build_mask(&layout).unwrap();
            let n = layout.total();
            let mut rng = RngStream::new(seed, 0);
            let mk = |rng: &mut RngStream| (0..n).map(|_| rng.gaussian_vec(3)).collect::<Vec<_>>();
            let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let base = masked_attention(&q, &k, &v, &m).unwrap();
            let target = layout.prefix_len() + (seed as usize % layout.n_action);
            let (mut k2, mut v2) = (k.clone(), v.clone());
            k2[target][0] += 1.0;
            v2[target][1] -= 2.0;
            let moved = masked_attention(&q, &k2, &v2, &m).unwrap();
            for i in 0..layout.prefix_len() {
                prop_assert_eq!(&base[i], &moved[i]);
            }
        }
    }
}
