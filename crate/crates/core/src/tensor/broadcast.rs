use crate::error::{Error, Result};

use super::numel;

/// Trailing-dimension broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_end(a, rank - 1 - i);
        let db = dim_from_end(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch { lhs: a.to_vec(), rhs: b.to_vec() });
            }
        };
    }
    Ok(out)
}

fn dim_from_end(shape: &[usize], k: usize) -> usize {
    if k < shape.len() {
        shape[shape.len() - 1 - k]
    } else {
        1
    }
}

/// For every element of `out_shape`, the flat index of the broadcast source.
pub(crate) fn source_index(src: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n = numel(out_shape);
    if src == out_shape {
        return (0..n).collect();
    }
    if numel(src) == 1 {
        return vec![0; n];
    }
    let rank = out_shape.len();
    let offset = rank - src.len();
    // Stride of each output axis in the source (0 where broadcast).
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= src[i];
    }
    let mut index = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        index.push(flat);
        for axis in (0..rank).rev() {
            counter[axis] += 1;
            flat += strides[axis];
            if counter[axis] < out_shape[axis] {
                break;
            }
            flat -= strides[axis] * counter[axis];
            counter[axis] = 0;
        }
    }
    index
}

/// Sums an output-shaped gradient back onto a broadcast source.
pub(crate) fn reduce_to(g: &[f64], index: &[usize], src_len: usize) -> Vec<f64> {
    if index.len() == src_len {
        // Identity mapping (same shape).
        return g.to_vec();
    }
    let mut out = vec![0.0; src_len];
    for (gi, &si) in g.iter().zip(index) {
        out[si] += gi;
    }
    out
}
