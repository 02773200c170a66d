//! Sparse aggregation kernels shared by the convolution layers.
//!
//! Edges are `(src, dst)` pairs sorted by `(dst, src)`; "aggregating" a
//! node means summing (or max-pooling) over its in-edges, i.e. over all
//! `src` with an edge into it. Every kernel checks that the edge set was
//! built for the same node count as the feature matrix.

use crate::error::{Result, SpellError};
use crate::graph::EdgeSet;
use crate::tensor::{Matrix, Real};

/// Branch widths of the inception middle layer, plus a 1-hop maxpool of
/// the unprojected input.
pub const INCEPTION_WIDTHS: [usize; 3] = [16, 32, 64];

fn check_nodes<T: Real>(op: &'static str, x: &Matrix<T>, edges: &EdgeSet) -> Result<()> {
    if x.rows() != edges.node_count() as usize {
        return Err(SpellError::shapes(op, x.shape(), (edges.node_count() as usize, x.cols())));
    }
    Ok(())
}

/// `out[dst] += x[src]` over all edges: sum over in-neighbours.
pub fn agg_src_to_dst<T: Real>(x: &Matrix<T>, edges: &EdgeSet) -> Result<Matrix<T>> {
    check_nodes("agg_src_to_dst", x, edges)?;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for &(s, d) in edges.edges() {
        let src_row = x.row(s as usize);
        for (o, &v) in out.row_mut(d as usize).iter_mut().zip(src_row) {
            *o = *o + v;
        }
    }
    Ok(out)
}

/// `out[src] += g[dst]` over all edges: the adjoint of [`agg_src_to_dst`],
/// used to push gradients back through an aggregation.
pub fn agg_dst_to_src<T: Real>(g: &Matrix<T>, edges: &EdgeSet) -> Result<Matrix<T>> {
    check_nodes("agg_dst_to_src", g, edges)?;
    let mut out = Matrix::zeros(g.rows(), g.cols());
    for &(s, d) in edges.edges() {
        let dst_row = g.row(d as usize);
        for (o, &v) in out.row_mut(s as usize).iter_mut().zip(dst_row) {
            *o = *o + v;
        }
    }
    Ok(out)
}

/// Edge-indexed gather: `out[e] = x[dst_e]`.
pub fn gather_by_dst<T: Real>(x: &Matrix<T>, edges: &EdgeSet) -> Result<Matrix<T>> {
    check_nodes("gather_by_dst", x, edges)?;
    let mut out = Matrix::zeros(edges.len(), x.cols());
    for (e, &(_, d)) in edges.edges().iter().enumerate() {
        out.row_mut(e).copy_from_slice(x.row(d as usize));
    }
    Ok(out)
}

/// Sums edge-indexed rows into their destination node:
/// `out[v] = sum over e with dst_e = v of m[e]`.
pub fn edge_rows_sum_by_dst<T: Real>(m: &Matrix<T>, edges: &EdgeSet) -> Result<Matrix<T>> {
    if m.rows() != edges.len() {
        return Err(SpellError::shapes("edge_rows_sum_by_dst", m.shape(), (edges.len(), m.cols())));
    }
    let mut out = Matrix::zeros(edges.node_count() as usize, m.cols());
    for (e, &(_, d)) in edges.edges().iter().enumerate() {
        let src = m.row(e);
        for (o, &v) in out.row_mut(d as usize).iter_mut().zip(src) {
            *o = *o + v;
        }
    }
    Ok(out)
}

/// Sums edge-indexed rows into their source node.
pub fn edge_rows_sum_by_src<T: Real>(m: &Matrix<T>, edges: &EdgeSet) -> Result<Matrix<T>> {
    if m.rows() != edges.len() {
        return Err(SpellError::shapes("edge_rows_sum_by_src", m.shape(), (edges.len(), m.cols())));
    }
    let mut out = Matrix::zeros(edges.node_count() as usize, m.cols());
    for (e, &(s, _)) in edges.edges().iter().enumerate() {
        let src = m.row(e);
        for (o, &v) in out.row_mut(s as usize).iter_mut().zip(src) {
            *o = *o + v;
        }
    }
    Ok(out)
}

/// Per-feature max over in-neighbours. Returns the pooled matrix and, per
/// output element, the source node that won (first maximum on ties, which
/// makes the backward routing deterministic). Requires every node to have
/// at least one in-edge; self-loops guarantee that for our graphs.
pub fn maxpool_in_neighbors<T: Real>(
    x: &Matrix<T>,
    edges: &EdgeSet,
) -> Result<(Matrix<T>, Vec<u32>)> {
    check_nodes("maxpool_in_neighbors", x, edges)?;
    let (n, d) = x.shape();
    let mut out = Matrix::zeros(n, d);
    let mut argmax = vec![u32::MAX; n * d];
    let mut seen = vec![false; n];
    for &(s, dst) in edges.edges() {
        let (s, dst) = (s as usize, dst as usize);
        let xr = x.row(s);
        if !seen[dst] {
            out.row_mut(dst).copy_from_slice(xr);
            argmax[dst * d..(dst + 1) * d].iter_mut().for_each(|a| *a = s as u32);
            seen[dst] = true;
        } else {
            let or = out.row_mut(dst);
            let ar = &mut argmax[dst * d..(dst + 1) * d];
            for j in 0..d {
                if xr[j] > or[j] {
                    or[j] = xr[j];
                    ar[j] = s as u32;
                }
            }
        }
    }
    if let Some(v) = seen.iter().position(|&s| !s) {
        return Err(SpellError::validation(format!(
            "maxpool: node {v} has no in-edges (self-loops missing?)"
        )));
    }
    Ok((out, argmax))
}

/// Adjoint of the maxpool: routes each upstream gradient element to the
/// source node that produced the maximum.
pub fn maxpool_backward<T: Real>(
    grad_out: &Matrix<T>,
    argmax: &[u32],
) -> Matrix<T> {
    let (n, d) = grad_out.shape();
    assert_eq!(argmax.len(), n * d);
    let mut dx = Matrix::zeros(n, d);
    for v in 0..n {
        let gr = grad_out.row(v);
        for j in 0..d {
            let s = argmax[v * d + j] as usize;
            dx[(s, j)] = dx[(s, j)] + gr[j];
        }
    }
    dx
}
