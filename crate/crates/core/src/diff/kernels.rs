//! Dense kernels shared by forward and backward passes.

use super::NeighborTable;
use crate::Execution;

/// Rows of the conv output handled per work item, rounded to whole frames so
/// that gradient scatter never crosses a chunk.
const CONV_CHUNK_ROWS: usize = 2048;

/// `C = beta * C + A * B` over strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(c.len() > last(m, n, rsc, csc));
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() > last(m, k, rsa, csa));
    assert!(b.len() > last(k, n, rsb, csb));
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn frames_per_chunk(cells: usize) -> usize {
    (CONV_CHUNK_ROWS / cells.max(1)).max(1)
}

/// Copy `x[frame_base + table[cell, s], :]` for every row of a chunk into
/// `buf` (rows x c_in); sentinels become zero rows.
fn gather_rows(x: &[f64], c_in: usize, table: &NeighborTable, s: usize, row0: usize, rows: usize, buf: &mut [f64]) {
    let cells = table.cells;
    for r in 0..rows {
        let global = row0 + r;
        let frame_base = global - global % cells;
        let dst = &mut buf[r * c_in..(r + 1) * c_in];
        match table.get(global % cells, s) {
            Some(src) => {
                let src = frame_base + src;
                dst.copy_from_slice(&x[src * c_in..(src + 1) * c_in]);
            }
            None => dst.fill(0.0),
        }
    }
}

pub(crate) struct ConvDims {
    pub rows: usize,
    pub c_in: usize,
    pub c_out: usize,
}

pub(crate) fn neighbor_conv_forward(
    x: &[f64],
    kernel: &[f64],
    bias: &[f64],
    table: &NeighborTable,
    d: &ConvDims,
    exec: Execution,
) -> Vec<f64> {
    let s_len = table.kernel_size;
    let mut y = vec![0.0; d.rows * d.c_out];
    let chunk_rows = frames_per_chunk(table.cells) * table.cells;
    exec.for_each_chunk_mut(&mut y, chunk_rows * d.c_out, |ci, out| {
        let rows = out.len() / d.c_out;
        let row0 = ci * chunk_rows;
        let mut g = vec![0.0; rows * d.c_in];
        for s in 0..s_len {
            gather_rows(x, d.c_in, table, s, row0, rows, &mut g);
            // out (rows x c_out) += g (rows x c_in) * K_s^T, K_s[o, c] = kernel[o, c, s]
            gemm(
                rows,
                d.c_in,
                d.c_out,
                &g,
                (d.c_in, 1),
                &kernel[s..],
                (s_len, d.c_in * s_len),
                out,
                (d.c_out, 1),
                1.0,
            );
        }
        for row in out.chunks_mut(d.c_out) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
    });
    y
}

/// Gradients of the neighbor convolution. `dx` is only computed when
/// `want_dx`; kernel and bias gradients are reduced over chunks in chunk
/// order.
pub(crate) fn neighbor_conv_backward(
    x: &[f64],
    kernel: &[f64],
    dy: &[f64],
    table: &NeighborTable,
    d: &ConvDims,
    want_dx: bool,
    exec: Execution,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let s_len = table.kernel_size;
    let chunk_rows = frames_per_chunk(table.cells) * table.cells;
    let chunks = d.rows.div_ceil(chunk_rows);
    let partials = exec.map_range(chunks, |ci| {
        let row0 = ci * chunk_rows;
        let rows = chunk_rows.min(d.rows - row0);
        let dy_c = &dy[row0 * d.c_out..(row0 + rows) * d.c_out];
        let mut g = vec![0.0; rows * d.c_in];
        let mut dk = vec![0.0; kernel.len()];
        for s in 0..s_len {
            gather_rows(x, d.c_in, table, s, row0, rows, &mut g);
            // dK_s (c_out x c_in) += dy_c^T * g
            gemm(
                d.c_out,
                rows,
                d.c_in,
                dy_c,
                (1, d.c_out),
                &g,
                (d.c_in, 1),
                &mut dk[s..],
                (d.c_in * s_len, s_len),
                1.0,
            );
        }
        let mut db = vec![0.0; d.c_out];
        for row in dy_c.chunks(d.c_out) {
            for (b, v) in db.iter_mut().zip(row) {
                *b += v;
            }
        }
        (dk, db)
    });
    let mut dk = vec![0.0; kernel.len()];
    let mut db = vec![0.0; d.c_out];
    for (pk, pb) in partials {
        dk.iter_mut().zip(&pk).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(&pb).for_each(|(a, b)| *a += b);
    }

    let dx = want_dx.then(|| {
        let mut dx = vec![0.0; x.len()];
        exec.for_each_chunk_mut(&mut dx, chunk_rows * d.c_in, |ci, dx_c| {
            let row0 = ci * chunk_rows;
            let rows = dx_c.len() / d.c_in;
            let dy_c = &dy[row0 * d.c_out..(row0 + rows) * d.c_out];
            let mut dg = vec![0.0; rows * d.c_in];
            for s in 0..s_len {
                // dg (rows x c_in) = dy_c (rows x c_out) * K_s (c_out x c_in)
                gemm(
                    rows,
                    d.c_out,
                    d.c_in,
                    dy_c,
                    (d.c_out, 1),
                    &kernel[s..],
                    (d.c_in * s_len, s_len),
                    &mut dg,
                    (d.c_in, 1),
                    0.0,
                );
                for r in 0..rows {
                    let global = row0 + r;
                    let cell = global % table.cells;
                    if let Some(src) = table.get(cell, s) {
                        let local = r - cell + src;
                        let dst = &mut dx_c[local * d.c_in..(local + 1) * d.c_in];
                        for (a, b) in dst.iter_mut().zip(&dg[r * d.c_in..(r + 1) * d.c_in]) {
                            *a += b;
                        }
                    }
                }
            }
        });
        dx
    });
    (dk, db, dx)
}
