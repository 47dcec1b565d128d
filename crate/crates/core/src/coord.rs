//! Position operators: coordinate-channel augmentation and coordinate-
//! preserving max pooling.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, TensorId};
use crate::tensor::Tensor;

/// Max-pool output plus the per-channel locations of each region's maximum.
///
/// `coords` has `2C` channels laid out as X for every input channel, then Y
/// for every input channel; values are local to the pooling region and
/// normalized to `[-1, 1]`. The coordinate channels are constants: no gradient
/// flows through them.
#[derive(Debug, Clone, Copy)]
pub struct CoordPoolOutput {
    pub pooled: TensorId,
    pub coords: TensorId,
}

fn axis_coord<T: Scalar>(index: usize, extent: usize) -> T {
    if extent <= 1 {
        T::ZERO
    } else {
        T::from_f64(2.0 * index as f64 / (extent - 1) as f64 - 1.0)
    }
}

pub(crate) fn add_coord_backward<T: Scalar>(g: &[T], in_shape: &[usize], buf: &mut [T]) {
    let (b, c, hw) = (in_shape[0], in_shape[1], in_shape[2] * in_shape[3]);
    for bi in 0..b {
        let src = &g[bi * (c + 2) * hw..bi * (c + 2) * hw + c * hw];
        let dst = &mut buf[bi * c * hw..(bi + 1) * c * hw];
        for (d, s) in dst.iter_mut().zip(src.iter()) {
            *d += *s;
        }
    }
}

pub(crate) fn coord_pool_backward<T: Scalar>(
    g: &[T],
    argmax: &[u32],
    in_shape: &[usize],
    buf: &mut [T],
) {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let planes = b * c;
    let out_hw = g.len() / planes;
    for p in 0..planes {
        let plane = &mut buf[p * h * w..(p + 1) * h * w];
        for i in 0..out_hw {
            plane[argmax[p * out_hw + i] as usize] += g[p * out_hw + i];
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Appends two coordinate channels to a BCHW tensor: an X channel holding
    /// `2*j/(W-1) - 1` at column `j` and a Y channel holding `2*i/(H-1) - 1`
    /// at row `i` (all zeros when the extent is 1). Corner pixels therefore map
    /// to exactly (-1,-1) and (1,1).
    pub fn add_coord(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::ShapeExpected {
                op: "add_coord",
                expected: vec![0, 0, 0, 0],
                got: shape,
            });
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        let xv = self.data(x);
        let mut out = Vec::with_capacity(b * (c + 2) * hw);
        let mut xplane = Vec::with_capacity(hw);
        let mut yplane = Vec::with_capacity(hw);
        for i in 0..h {
            for j in 0..w {
                xplane.push(axis_coord::<T>(j, w));
                yplane.push(axis_coord::<T>(i, h));
            }
        }
        for bi in 0..b {
            out.extend_from_slice(&xv[bi * c * hw..(bi + 1) * c * hw]);
            out.extend_from_slice(&xplane);
            out.extend_from_slice(&yplane);
        }
        let value = Tensor::from_vec(vec![b, c + 2, h, w], out)?;
        self.push("add_coord", value, Op::AddCoord { x })
    }

    /// Max pooling that additionally emits the normalized in-region coordinates
    /// of each maximum. Ties break on the first occurrence in row-major order;
    /// the pooled path routes gradients to the argmax locations while the
    /// coordinate channels are emitted as constants.
    pub fn coord_pool(&mut self, x: TensorId, kernel: usize, stride: usize) -> Result<CoordPoolOutput> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::ShapeExpected {
                op: "coord_pool",
                expected: vec![0, 0, 0, 0],
                got: shape,
            });
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if kernel == 0 || stride == 0 || h < kernel || (h - kernel) % stride != 0 {
            return Err(Error::PoolShape {
                axis: "height",
                extent: h,
                kernel,
                stride,
            });
        }
        if w < kernel || (w - kernel) % stride != 0 {
            return Err(Error::PoolShape {
                axis: "width",
                extent: w,
                kernel,
                stride,
            });
        }
        let ho = (h - kernel) / stride + 1;
        let wo = (w - kernel) / stride + 1;
        let xv = self.data(x);
        let mut pooled = vec![T::ZERO; b * c * ho * wo];
        let mut argmax = vec![0u32; b * c * ho * wo];
        // coords layout: X for all C channels, then Y for all C channels
        let mut coords = vec![T::ZERO; b * 2 * c * ho * wo];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &xv[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                let pout = (bi * c + ci) * ho * wo;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let (y0, x0) = (oy * stride, ox * stride);
                        let mut best = plane[y0 * w + x0];
                        let mut best_dy = 0usize;
                        let mut best_dx = 0usize;
                        for dy in 0..kernel {
                            for dx in 0..kernel {
                                let v = plane[(y0 + dy) * w + (x0 + dx)];
                                if v > best {
                                    best = v;
                                    best_dy = dy;
                                    best_dx = dx;
                                }
                            }
                        }
                        pooled[pout + oy * wo + ox] = best;
                        argmax[pout + oy * wo + ox] =
                            ((y0 + best_dy) * w + (x0 + best_dx)) as u32;
                        let cbase = bi * 2 * c * ho * wo;
                        coords[cbase + ci * ho * wo + oy * wo + ox] =
                            axis_coord::<T>(best_dx, kernel);
                        coords[cbase + (c + ci) * ho * wo + oy * wo + ox] =
                            axis_coord::<T>(best_dy, kernel);
                    }
                }
            }
        }
        let pooled_value = Tensor::from_vec(vec![b, c, ho, wo], pooled)?;
        let pooled_id = self.push(
            "coord_pool",
            pooled_value,
            Op::CoordPool { x, argmax },
        )?;
        let coords_id = self.constant(Tensor::from_vec(vec![b, 2 * c, ho, wo], coords)?);
        Ok(CoordPoolOutput {
            pooled: pooled_id,
            coords: coords_id,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn corners_map_to_unit_square() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 5, 7]), false);
        let y = tape.add_coord(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 5, 7]);
        let d = tape.data(y);
        let hw = 35;
        // X channel at (0,0) and (H-1,W-1)
        assert_eq!(d[hw], -1.0);
        assert_eq!(d[hw + 34], 1.0);
        // Y channel
        assert_eq!(d[2 * hw], -1.0);
        assert_eq!(d[2 * hw + 34], 1.0);
        // center pixel of odd-sized map is (0,0)
        let center = 2 * 7 + 3;
        assert_eq!(d[hw + center], 0.0);
        assert_eq!(d[2 * hw + center], 0.0);
    }

    #[test]
    fn original_channels_pass_through_and_degenerate_extents_are_zero() {
        let mut tape = Tape::<f64>::new();
        let data = Tensor::from_vec(vec![1, 2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let x = tape.leaf(data, false);
        let y = tape.add_coord(x).unwrap();
        let d = tape.data(y);
        assert_eq!(&d[..6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        // H == 1 makes the Y channel all zeros
        assert_eq!(&d[9..12], &[0.0, 0.0, 0.0]);
        // X channel unaffected
        assert_eq!(&d[6..9], &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn coord_channels_do_not_depend_on_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::full(vec![1, 1, 4, 4], 3.5), false);
        let b = tape.leaf(Tensor::full(vec![1, 1, 4, 4], -2.0), false);
        let ya = tape.add_coord(a).unwrap();
        let yb = tape.add_coord(b).unwrap();
        assert_eq!(&tape.data(ya)[16..], &tape.data(yb)[16..]);
    }

    #[test]
    fn simple_region_max_and_coords() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            true,
        );
        let out = tape.coord_pool(x, 2, 2).unwrap();
        assert_eq!(tape.data(out.pooled), &[4.0]);
        // max is bottom-right: (X, Y) = (1, 1)
        assert_eq!(tape.data(out.coords), &[1.0, 1.0]);
    }

    #[test]
    fn constant_region_ties_break_to_first() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![1, 1, 2, 2], 7.0), false);
        let out = tape.coord_pool(x, 2, 2).unwrap();
        assert_eq!(tape.data(out.pooled), &[7.0]);
        assert_eq!(tape.data(out.coords), &[-1.0, -1.0]);
    }

    #[test]
    fn matches_max_pool_oracle_and_routes_one_unit_per_region() {
        let mut r = rng::seeded(99, 0);
        let data: Vec<f64> = (0..2 * 3 * 6 * 4).map(|_| r.random::<f64>()).collect();
        let t = Tensor::from_vec(vec![2, 3, 6, 4], data.clone()).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t, true);
        let out = tape.coord_pool(x, 2, 2).unwrap();
        // oracle: brute-force max per region
        let (ho, wo) = (3, 2);
        for bc in 0..6 {
            let plane = &data[bc * 24..(bc + 1) * 24];
            for oy in 0..ho {
                for ox in 0..wo {
                    let m = (0..2)
                        .flat_map(|dy| (0..2).map(move |dx| plane[(2 * oy + dy) * 4 + 2 * ox + dx]))
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(tape.data(out.pooled)[bc * ho * wo + oy * wo + ox], m);
                }
            }
        }
        let s = tape.reduce_sum(out.pooled).unwrap();
        tape.backward(s).unwrap();
        let grad = tape.grad(x).unwrap();
        // each pooling region routed exactly one unit of gradient
        for bc in 0..6 {
            for oy in 0..ho {
                for ox in 0..wo {
                    let total: f64 = (0..2)
                        .flat_map(|dy| {
                            (0..2).map(move |dx| grad[bc * 24 + (2 * oy + dy) * 4 + 2 * ox + dx])
                        })
                        .sum();
                    assert_eq!(total, 1.0);
                }
            }
        }
    }

    #[test]
    fn round_trip_gather_reproduces_pooled() {
        let mut r = rng::seeded(123, 1);
        let data: Vec<f64> = (0..1 * 2 * 4 * 4).map(|_| r.random::<f64>()).collect();
        let t = Tensor::from_vec(vec![1, 2, 4, 4], data.clone()).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t, false);
        let out = tape.coord_pool(x, 2, 2).unwrap();
        let coords = tape.data(out.coords);
        let pooled = tape.data(out.pooled);
        for ci in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let cx = coords[ci * 4 + oy * 2 + ox];
                    let cy = coords[(2 + ci) * 4 + oy * 2 + ox];
                    // denormalize local coords back to input indices
                    let dx = ((cx + 1.0) / 2.0) as usize;
                    let dy = ((cy + 1.0) / 2.0) as usize;
                    let v = data[ci * 16 + (2 * oy + dy) * 4 + (2 * ox + dx)];
                    assert_eq!(v, pooled[ci * 4 + oy * 2 + ox]);
                }
            }
        }
    }

    #[test]
    fn non_divisible_extent_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 5, 4]), false);
        match tape.coord_pool(x, 2, 2) {
            Err(Error::PoolShape { axis, extent, kernel, stride }) => {
                assert_eq!(axis, "height");
                assert_eq!((extent, kernel, stride), (5, 2, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
