//! Irregular convolution: a convolution whose kernel taps each cell's own
//! neighbor list instead of a fixed window.
//!
//! With the 3x3 spatial index this is exactly a zero-padded 3x3
//! convolution, which is how the CNN+LSTM baseline is built.

use std::sync::Arc;

use rand::Rng;

use crate::diff::{NeighborTable, ParamId, ParamStore, Tape, Var};
use crate::similarity::NeighborIndex;
use crate::{Error, Result};

/// Filter counts of the three-layer stack.
pub const DEFAULT_FILTERS: [usize; 3] = [32, 16, 1];

pub fn neighbor_table(index: &NeighborIndex) -> Result<Arc<NeighborTable>> {
    Ok(Arc::new(NeighborTable::new(index.cells(), index.kernel_size, index.kernel_table())?))
}

#[derive(Clone, Debug)]
pub struct IrConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `out x in x S`
    pub kernel: ParamId,
    /// One bias per output channel, shared by all cells.
    pub bias: ParamId,
    /// Rectify the output (hidden layers).
    pub rectify: bool,
}

impl IrConvLayer {
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        rectify: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((in_channels * kernel_size) as f64).sqrt();
        let kernel = params.add_uniform(
            format!("{name}.kernel"),
            vec![out_channels, in_channels, kernel_size],
            bound,
            rng,
        );
        let bias = params.add_uniform(format!("{name}.bias"), vec![out_channels], bound, rng);
        IrConvLayer {
            in_channels,
            out_channels,
            kernel,
            bias,
            rectify,
        }
    }

    /// `x` is `(frames * cells) x in_channels`; output `(frames * cells) x out_channels`.
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var, table: &Arc<NeighborTable>) -> Result<Var> {
        let c_in = tape.shape(x).get(1).copied().unwrap_or(0);
        if c_in != self.in_channels {
            return Err(Error::shape("irconv_forward", tape.shape(x), &[0, self.in_channels]));
        }
        let y = tape.neighbor_conv(x, bound[self.kernel.0], bound[self.bias.0], table.clone())?;
        Ok(if self.rectify { tape.relu(y) } else { y })
    }
}

/// Three stacked layers sharing one neighbor index; rectifier after every
/// layer but the last.
#[derive(Clone, Debug)]
pub struct IrConvStack {
    pub layers: Vec<IrConvLayer>,
    pub table: Arc<NeighborTable>,
}

impl IrConvStack {
    pub fn new(params: &mut ParamStore, prefix: &str, filters: &[usize], table: Arc<NeighborTable>, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(filters.len());
        let mut c_in = 1;
        for (l, &c_out) in filters.iter().enumerate() {
            let last = l + 1 == filters.len();
            let name = format!("{prefix}.conv{}", l + 1);
            layers.push(IrConvLayer::new(params, &name, c_in, c_out, table.kernel_size, !last, rng));
            c_in = c_out;
        }
        IrConvStack { layers, table }
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(1, |l| l.out_channels)
    }

    /// `x` holds single-channel frames, `(frames * cells) x 1`.
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        self.layers
            .iter()
            .try_fold(x, |h, layer| layer.forward(tape, bound, h, &self.table))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;
    use crate::similarity::build_spatial_neighbors;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Moore offsets in kernel-slot order: center, then row-major.
    const OFFSETS: [(i64, i64); 9] = [(0, 0), (-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

    /// Plain zero-padded 3x3 convolution over `c_in x w x h` input.
    fn dense_conv(x: &[Vec<Vec<f64>>], kernel: &[f64], bias: &[f64], c_out: usize, relu: bool) -> Vec<Vec<Vec<f64>>> {
        let (c_in, w, h) = (x.len(), x[0].len(), x[0][0].len());
        let mut y = vec![vec![vec![0.0; h]; w]; c_out];
        for o in 0..c_out {
            for i in 0..w {
                for j in 0..h {
                    let mut acc = bias[o];
                    for c in 0..c_in {
                        for (s, (di, dj)) in OFFSETS.iter().enumerate() {
                            let (ii, jj) = (i as i64 + di, j as i64 + dj);
                            if ii < 0 || jj < 0 || ii >= w as i64 || jj >= h as i64 {
                                continue;
                            }
                            acc += x[c][ii as usize][jj as usize] * kernel[(o * c_in + c) * 9 + s];
                        }
                    }
                    y[o][i][j] = if relu { acc.max(0.0) } else { acc };
                }
            }
        }
        y
    }

    fn spatial(w: usize, h: usize) -> Arc<NeighborTable> {
        neighbor_table(&build_spatial_neighbors(w, h)).unwrap()
    }

    fn frame_tensor(x: &[Vec<f64>]) -> Tensor {
        let data: Vec<f64> = x.iter().flatten().copied().collect();
        Tensor::new(vec![data.len(), 1], data).unwrap()
    }

    fn random_frame(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<Vec<f64>> {
        (0..w).map(|_| (0..h).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = IrConvLayer::new(&mut params, "l", 1, 2, 9, false, &mut rng);
        params.get_mut(layer.kernel).data_mut().fill(0.0);
        params.get_mut(layer.bias).data_mut().copy_from_slice(&[0.25, -3.0]);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(frame_tensor(&random_frame(&mut rng, 4, 4)));
        let y = layer.forward(&mut tape, &bound, x, &spatial(4, 4)).unwrap();
        for row in tape.value(y).data().chunks(2) {
            assert_eq!(row, &[0.25, -3.0]);
        }
    }

    #[test]
    fn self_only_kernel_is_identity() {
        let table = Arc::new(NeighborTable::new(6, 1, (0..6).map(Some).collect()).unwrap());
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = IrConvLayer::new(&mut params, "l", 1, 1, 1, false, &mut rng);
        params.get_mut(layer.kernel).data_mut()[0] = 1.0;
        params.get_mut(layer.bias).data_mut()[0] = 0.0;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let input = frame_tensor(&random_frame(&mut rng, 2, 3));
        let x = tape.constant(input.clone());
        let y = layer.forward(&mut tape, &bound, x, &table).unwrap();
        assert_eq!(tape.value(y).data(), input.data());
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = IrConvLayer::new(&mut params, "l", 2, 1, 9, false, &mut rng);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(vec![16, 1]));
        assert!(layer.forward(&mut tape, &bound, x, &spatial(4, 4)).is_err());
    }

    #[test]
    fn spatial_index_matches_dense_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (w, h) = (6, 5);
        for _ in 0..10 {
            let mut params = ParamStore::new();
            let layer = IrConvLayer::new(&mut params, "l", 1, 3, 9, false, &mut rng);
            let frame = random_frame(&mut rng, w, h);
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let x = tape.constant(frame_tensor(&frame));
            let y = layer.forward(&mut tape, &bound, x, &spatial(w, h)).unwrap();
            let oracle = dense_conv(&[frame], params.get(layer.kernel).data(), params.get(layer.bias).data(), 3, false);
            for (r, row) in tape.value(y).data().chunks(3).enumerate() {
                for o in 0..3 {
                    assert!((row[o] - oracle[o][r / h][r % h]).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn spatial_stack_matches_dense_cnn() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (5, 6);
        let mut params = ParamStore::new();
        let stack = IrConvStack::new(&mut params, "branch.closeness", &DEFAULT_FILTERS, spatial(w, h), &mut rng);
        let frame = random_frame(&mut rng, w, h);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(frame_tensor(&frame));
        let y = stack.forward(&mut tape, &bound, x).unwrap();

        let mut dense = vec![frame];
        for layer in &stack.layers {
            dense = dense_conv(
                &dense,
                params.get(layer.kernel).data(),
                params.get(layer.bias).data(),
                layer.out_channels,
                layer.rectify,
            );
        }
        for (r, v) in tape.value(y).data().iter().enumerate() {
            assert!((v - dense[0][r / h][r % h]).abs() <= 1e-10);
        }
        assert_eq!(params.name(stack.layers[2].bias), "branch.closeness.conv3.bias");
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = ParamStore::new();
        let stack = IrConvStack::new(&mut params, "s", &DEFAULT_FILTERS, spatial(4, 4), &mut rng);
        for l in &stack.layers {
            params.get_mut(l.bias).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(vec![16, 1]));
        let y = stack.forward(&mut tape, &bound, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_without_bias_or_rectifier() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamStore::new();
        let layer = IrConvLayer::new(&mut params, "l", 1, 4, 9, false, &mut rng);
        params.get_mut(layer.bias).data_mut().fill(0.0);
        let frame = random_frame(&mut rng, 4, 4);
        let scaled: Vec<Vec<f64>> = frame.iter().map(|r| r.iter().map(|v| -2.5 * v).collect()).collect();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let a = tape.constant(frame_tensor(&frame));
        let b = tape.constant(frame_tensor(&scaled));
        let ya = layer.forward(&mut tape, &bound, a, &spatial(4, 4)).unwrap();
        let yb = layer.forward(&mut tape, &bound, b, &spatial(4, 4)).unwrap();
        for (u, v) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
            assert!((-2.5 * u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_neighbors_with_weights_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cells = 7;
        let s = 5;
        let mut index = Vec::new();
        for c in 0..cells {
            index.push(Some(c));
            for k in 1..s {
                index.push(Some((c + k * 2) % cells));
            }
        }
        let perm = [0usize, 3, 1, 4, 2];
        let permuted: Vec<Option<usize>> = (0..cells).flat_map(|c| perm.iter().map(move |&p| (c, p))).map(|(c, p)| index[c * s + p]).collect();
        let t1 = Arc::new(NeighborTable::new(cells, s, index).unwrap());
        let t2 = Arc::new(NeighborTable::new(cells, s, permuted).unwrap());
        let mut params = ParamStore::new();
        let layer = IrConvLayer::new(&mut params, "l", 1, 2, s, true, &mut rng);
        let k = params.get(layer.kernel).data().to_vec();
        let mut params2 = params.clone();
        let k2 = params2.get_mut(layer.kernel).data_mut();
        for o in 0..2 {
            for (slot, &p) in perm.iter().enumerate() {
                k2[o * s + slot] = k[o * s + p];
            }
        }
        let input = Tensor::new(vec![cells * 2, 1], (0..cells * 2).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let run = |params: &ParamStore, table: &Arc<NeighborTable>| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let x = tape.constant(input.clone());
            let y = layer.forward(&mut tape, &bound, x, table).unwrap();
            tape.value(y).data().to_vec()
        };
        let (a, b) = (run(&params, &t1), run(&params2, &t2));
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
