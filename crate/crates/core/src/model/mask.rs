//! Additive attention masks over `{0, -inf}`.

use std::sync::Arc;

use super::ModelError;
use crate::numeric::{SharedMask, Tensor};
use crate::text::PackedSequence;

/// `L×L` additive mask; row `i` lists which key positions query `i` may see.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    len: usize,
    additive: SharedMask,
}

impl AttentionMask {
    /// Builds a mask from an allow predicate over `(query, key)` positions.
    pub fn from_fn(len: usize, allow: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = vec![f64::NEG_INFINITY; len * len];
        for i in 0..len {
            for j in 0..len {
                if allow(i, j) {
                    data[i * len + j] = 0.0;
                }
            }
        }
        Self {
            len,
            additive: Arc::new(Tensor::new(vec![len, len], data).expect("square mask")),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.additive.data()[i * self.len + j] == 0.0
    }

    /// Key positions visible from query row `i`, ascending.
    pub fn allowed_set(&self, i: usize) -> Vec<usize> {
        (0..self.len).filter(|&j| self.allowed(i, j)).collect()
    }

    pub fn additive(&self) -> &SharedMask {
        &self.additive
    }

    /// Every row sees at least one position and nothing strictly later.
    pub fn validate(&self) -> Result<(), ModelError> {
        for i in 0..self.len {
            if !(0..self.len).any(|j| self.allowed(i, j)) {
                return Err(ModelError::Contract(format!("mask row {i} is empty")));
            }
            if let Some(j) = (i + 1..self.len).find(|&j| self.allowed(i, j)) {
                return Err(ModelError::Contract(format!(
                    "mask row {i} attends to later position {j}"
                )));
            }
        }
        Ok(())
    }
}

/// Standard lower-triangular mask.
pub fn build_causal_mask(len: usize) -> AttentionMask {
    AttentionMask::from_fn(len, |i, j| j <= i)
}

/// Causal over the session region; response-region rows see only the
/// session special tokens and response positions up to themselves.
pub fn build_session_mask(seq: &PackedSequence) -> AttentionMask {
    let n = seq.n_session();
    let response_start = seq.session_special_range().end;
    AttentionMask::from_fn(seq.len(), |i, j| {
        if j > i {
            false
        } else if i < response_start {
            true
        } else {
            j >= n
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn causal_examples() {
        let m = build_causal_mask(1);
        assert_eq!(m.allowed_set(0), vec![0]);
        let m = build_causal_mask(3);
        assert_eq!(m.allowed_set(2), vec![0, 1, 2]);
        for l in 1..8 {
            let m = build_causal_mask(l);
            m.validate().unwrap();
            for i in 0..l {
                assert_eq!(m.allowed_set(i), (0..=i).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn session_mask_worked_example() {
        // positions 0..6: s s e e r f f
        let seq = PackedSequence::from_parts(&[20, 21], &[30], 2);
        let m = build_session_mask(&seq);
        m.validate().unwrap();
        assert_eq!(m.allowed_set(3), vec![0, 1, 2, 3]);
        assert_eq!(m.allowed_set(4), vec![2, 3, 4]);
        assert_eq!(m.allowed_set(5), vec![2, 3, 4, 5]);
        assert_eq!(m.allowed_set(6), vec![2, 3, 4, 5, 6]);
    }

    #[test]
    fn validate_catches_future_attention() {
        let m = AttentionMask::from_fn(3, |_, _| true);
        assert!(m.validate().is_err());
        let m = AttentionMask::from_fn(3, |i, j| i > 0 && j < i);
        assert!(m.validate().is_err());
    }

    proptest! {
        #[test]
        fn response_rows_never_see_session_tokens(n in 0usize..16, m in 0usize..16, t in 1usize..4) {
            let seq = PackedSequence::from_parts(&vec![20; n], &vec![30; m], t);
            let mask = build_session_mask(&seq);
            mask.validate().unwrap();
            for i in seq.response_region() {
                for j in 0..n {
                    prop_assert!(!mask.allowed(i, j));
                }
                for j in seq.session_special_range() {
                    prop_assert!(mask.allowed(i, j));
                }
            }
            for i in 0..n + t {
                prop_assert_eq!(mask.allowed_set(i), (0..=i).collect::<Vec<_>>());
            }
        }
    }
}
