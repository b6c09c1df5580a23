//! Reference strided cross-correlation: im2col followed by one GEMM.

use ndarray::{Array2, ArrayView3, ArrayViewMut3, Axis};

use crate::gfb::FilterBank;

/// Raw responses of every kernel to one image, same contract as the
/// spectral path.
pub(crate) fn correlate_direct(bank: &FilterBank, image: ArrayView3<'_, f32>, mut out: ArrayViewMut3<'_, f32>) {
    let g = bank.geometry();
    let (c, h, w) = image.dim();
    let k = g.kernel_size;
    let pad = g.padding() as isize;
    let s = g.stride;
    let ho = h.div_ceil(s);
    let wo = w.div_ceil(s);

    let mut cols = Array2::<f32>::zeros((c * k * k, ho * wo));
    for ch in 0..c {
        for ty in 0..k {
            for tx in 0..k {
                let row = (ch * k + ty) * k + tx;
                for oy in 0..ho {
                    let y = (s * oy) as isize + ty as isize - pad;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let x = (s * ox) as isize + tx as isize - pad;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        cols[[row, oy * wo + ox]] = image[[ch, y as usize, x as usize]];
                    }
                }
            }
        }
    }
    let weights = bank
        .kernels()
        .view()
        .into_shape_with_order((bank.num_kernels(), c * k * k))
        .expect("contiguous kernels");
    let res = weights.dot(&cols);
    for (j, row) in res.axis_iter(Axis(0)).enumerate() {
        let plane = row.into_shape_with_order((ho, wo)).expect("row of output plane");
        out.index_axis_mut(Axis(0), j).assign(&plane);
    }
}
