//! Row-major shape arithmetic and broadcast stride mapping.

use crate::error::{DmkdError, Result};

/// Row-major strides for `shape`; the last axis always has stride 1.
pub fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Strides that read `b_shape` as if it had `out_shape`, aligning trailing
/// axes. Axes that `b` is missing, or where `b` has extent 1 against a larger
/// output extent, get stride 0. Returns an error when the shapes are
/// incompatible. Only the right operand broadcasts; callers pass the left
/// operand's shape as `out_shape`.
pub fn broadcast_strides(op: &str, out_shape: &[usize], b_shape: &[usize]) -> Result<Vec<usize>> {
    if b_shape.len() > out_shape.len() {
        return Err(DmkdError::ShapeMismatch {
            op: op.to_string(),
            details: format!("rhs rank {} exceeds lhs rank {}", b_shape.len(), out_shape.len()),
        });
    }
    let offset = out_shape.len() - b_shape.len();
    let b_strides = strides_for(b_shape);
    let mut out = vec![0; out_shape.len()];
    for i in 0..b_shape.len() {
        let o = out_shape[offset + i];
        let b = b_shape[i];
        if b == o {
            out[offset + i] = b_strides[i];
        } else if b == 1 {
            out[offset + i] = 0;
        } else {
            return Err(DmkdError::ShapeMismatch {
                op: op.to_string(),
                details: format!("cannot broadcast rhs {:?} to lhs {:?}", b_shape, out_shape),
            });
        }
    }
    Ok(out)
}

/// Visits every flat index of `shape` paired with the flat index obtained by
/// walking `mapped_strides` (as produced by [`broadcast_strides`]) in step.
pub fn for_each_mapped(shape: &[usize], mapped_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let mut counter = vec![0usize; shape.len()];
    let mut mapped = 0usize;
    for flat in 0..total {
        f(flat, mapped);
        // Increment the multi-index from the last axis, carrying leftward.
        for axis in (0..shape.len()).rev() {
            counter[axis] += 1;
            mapped += mapped_strides[axis];
            if counter[axis] < shape[axis] {
                break;
            }
            mapped -= mapped_strides[axis] * shape[axis];
            counter[axis] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_row_major() {
        assert_eq!(strides_for(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_for(&[5]), vec![1]);
        assert_eq!(strides_for(&[]), Vec::<usize>::new());
    }

    #[test]
    fn broadcast_missing_and_unit_axes() {
        // [C,1,1] against [C,H,W]: channel axis keeps its stride, spatial go 0.
        let s = broadcast_strides("mul", &[3, 4, 5], &[3, 1, 1]).unwrap();
        assert_eq!(s, vec![1, 0, 0]);
        // [1,H,W] against [C,H,W].
        let s = broadcast_strides("mul", &[3, 4, 5], &[1, 4, 5]).unwrap();
        assert_eq!(s, vec![0, 5, 1]);
        // Trailing alignment of a lower-rank rhs.
        let s = broadcast_strides("mul", &[2, 3, 4], &[3, 4]).unwrap();
        assert_eq!(s, vec![0, 4, 1]);
    }

    #[test]
    fn broadcast_rejects_mismatch() {
        assert!(broadcast_strides("mul", &[3, 4], &[2, 4]).is_err());
        assert!(broadcast_strides("mul", &[3], &[3, 1]).is_err());
    }

    #[test]
    fn mapped_walk_matches_naive_modular_arithmetic() {
        let out_shape = [2usize, 3, 4];
        let b_shape = [3usize, 1];
        let mapped = broadcast_strides("mul", &out_shape, &b_shape).unwrap();
        let out_strides = strides_for(&out_shape);
        let mut seen = Vec::new();
        for_each_mapped(&out_shape, &mapped, |flat, m| seen.push((flat, m)));
        assert_eq!(seen.len(), 24);
        for (flat, m) in seen {
            // Recompute the mapped index from the multi-index directly.
            let mut expect = 0;
            for axis in 0..out_shape.len() {
                let idx = (flat / out_strides[axis]) % out_shape[axis];
                expect += idx * mapped[axis];
            }
            assert_eq!(m, expect);
        }
    }
}
