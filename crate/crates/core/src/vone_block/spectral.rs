//! Strided cross-correlation through polyphase FFT.
//!
//! With stride `s` and padding `pad`, output `y[o] = sum_t x[s*o + t - pad] k[t]`
//! splits into `s` phases per axis: writing `t - pad = s*m + p`,
//! `y[o] = sum_p sum_m x_p[o + m] k_p[m]` with `x_p[n] = x[s*n + p]` and
//! `k_p[m] = k[s*m + p + pad]`. Each phase is a stride-1 correlation at the
//! output resolution, done as a circular convolution on a grid large enough
//! to avoid wrap-around. Two real kernels share one complex spectrum
//! (`k_a + i k_b`), so one inverse transform yields both responses.

use std::sync::Arc;

use ndarray::{ArrayView3, ArrayViewMut3};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::gfb::FilterBank;

type C32 = Complex<f32>;

#[derive(Debug, Clone, Copy)]
struct AxisPhase {
    /// Phase offset `p` in input pixels.
    offset: usize,
    /// Number of input samples in this phase.
    len: usize,
    m_min: isize,
    m_max: isize,
}

#[derive(Debug, Clone)]
struct AxisPlan {
    input: usize,
    output: usize,
    fft_len: usize,
    phases: Vec<AxisPhase>,
}

fn next_smooth(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for f in [2, 3, 5] {
            while r.is_multiple_of(f) {
                r /= f;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

impl AxisPlan {
    fn new(input: usize, stride: usize, k: usize) -> AxisPlan {
        let pad = (k - 1) / 2;
        let output = input.div_ceil(stride);
        let mut phases = Vec::new();
        for p in 0..stride {
            let len = if p < input { (input - p).div_ceil(stride) } else { 0 };
            let ms: Vec<isize> = (0..k)
                .map(|t| t as isize - pad as isize)
                .filter(|u| u.rem_euclid(stride as isize) as usize == p)
                .map(|u| u.div_euclid(stride as isize))
                .collect();
            if ms.is_empty() {
                continue;
            }
            phases.push(AxisPhase {
                offset: p,
                len,
                m_min: *ms.iter().min().unwrap(),
                m_max: *ms.iter().max().unwrap(),
            });
        }
        let needed = phases
            .iter()
            .map(|ph| (output as isize + ph.m_max).max(ph.len as isize - ph.m_min) as usize)
            .max()
            .unwrap_or(output);
        AxisPlan { input, output, fft_len: next_smooth(needed), phases }
    }
}

/// Kernel spectra of a bank for a fixed input size.
pub(crate) struct SpectralConv {
    rows: AxisPlan,
    cols: AxisPlan,
    stride: usize,
    pad: usize,
    groups: usize,
    num_kernels: usize,
    pairs: usize,
    /// `[pair][group][phase_y][phase_x]` planes, each stored column-major
    /// (`ix * ny + iy`).
    spectra: Vec<C32>,
    fwd_x: Arc<dyn Fft<f32>>,
    fwd_y: Arc<dyn Fft<f32>>,
    inv_x: Arc<dyn Fft<f32>>,
    inv_y: Arc<dyn Fft<f32>>,
}

impl SpectralConv {
    pub fn new(bank: &FilterBank, height: usize, width: usize) -> SpectralConv {
        let g = bank.geometry();
        let k = g.kernel_size;
        let rows = AxisPlan::new(height, g.stride, k);
        let cols = AxisPlan::new(width, g.stride, k);
        let (ny, nx) = (rows.fft_len, cols.fft_len);
        let mut planner = FftPlanner::<f32>::new();
        let fwd_x = planner.plan_fft_forward(nx);
        let fwd_y = planner.plan_fft_forward(ny);
        let inv_x = planner.plan_fft_inverse(nx);
        let inv_y = planner.plan_fft_inverse(ny);

        let groups = if bank.is_channel_replicated() { 1 } else { g.input_channels };
        let num_kernels = bank.num_kernels();
        let pairs = num_kernels.div_ceil(2);
        let plane = nx * ny;
        let n_phase = rows.phases.len() * cols.phases.len();
        let mut spectra = vec![C32::default(); pairs * groups * n_phase * plane];
        let scale = 1.0 / plane as f32;

        let mut conv = SpectralConv {
            rows,
            cols,
            stride: g.stride,
            pad: g.padding(),
            groups,
            num_kernels,
            pairs,
            spectra: Vec::new(),
            fwd_x,
            fwd_y,
            inv_x,
            inv_y,
        };

        let mut buf = vec![C32::default(); plane];
        let mut scratch = conv.scratch();
        let kernels = bank.kernels();
        for q in 0..pairs {
            for grp in 0..groups {
                for (iy, py) in conv.rows.phases.iter().enumerate() {
                    for (ix, px) in conv.cols.phases.iter().enumerate() {
                        buf.iter_mut().for_each(|v| *v = C32::default());
                        for my in py.m_min..=py.m_max {
                            let ty = (conv.stride as isize * my + py.offset as isize + conv.pad as isize) as usize;
                            let ry = (-my).rem_euclid(ny as isize) as usize;
                            for mx in px.m_min..=px.m_max {
                                let tx = (conv.stride as isize * mx + px.offset as isize + conv.pad as isize) as usize;
                                let rx = (-mx).rem_euclid(nx as isize) as usize;
                                let a = kernels[[2 * q, grp, ty, tx]];
                                let b = if 2 * q + 1 < num_kernels {
                                    kernels[[2 * q + 1, grp, ty, tx]]
                                } else {
                                    0.0
                                };
                                buf[ry * nx + rx] = C32::new(a * scale, b * scale);
                            }
                        }
                        let idx = conv.spectrum_index(q, grp, iy * conv.cols.phases.len() + ix);
                        conv.forward_2d(&mut buf, &mut spectra[idx..idx + plane], &mut scratch);
                    }
                }
            }
        }
        conv.spectra = spectra;
        conv
    }

    pub fn output_shape(&self) -> (usize, usize) {
        (self.rows.output, self.cols.output)
    }

    pub fn input_shape(&self) -> (usize, usize) {
        (self.rows.input, self.cols.input)
    }

    fn n_phase(&self) -> usize {
        self.rows.phases.len() * self.cols.phases.len()
    }

    fn plane(&self) -> usize {
        self.rows.fft_len * self.cols.fft_len
    }

    fn spectrum_index(&self, pair: usize, group: usize, phase: usize) -> usize {
        ((pair * self.groups + group) * self.n_phase() + phase) * self.plane()
    }

    fn scratch(&self) -> Vec<C32> {
        let n = [&self.fwd_x, &self.fwd_y, &self.inv_x, &self.inv_y]
            .iter()
            .map(|f| f.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        vec![C32::default(); n]
    }

    /// Row-major `[ny][nx]` input, column-major `[nx][ny]` spectrum out.
    fn forward_2d(&self, buf: &mut [C32], out: &mut [C32], scratch: &mut [C32]) {
        let (ny, nx) = (self.rows.fft_len, self.cols.fft_len);
        self.fwd_x.process_with_scratch(buf, scratch);
        for iy in 0..ny {
            for ix in 0..nx {
                out[ix * ny + iy] = buf[iy * nx + ix];
            }
        }
        self.fwd_y.process_with_scratch(out, scratch);
    }

    /// Raw responses of every kernel to one image `[C, H, W]`, written into
    /// `out` `[num_kernels, H_out, W_out]`.
    pub fn correlate(&self, image: ArrayView3<'_, f32>, mut out: ArrayViewMut3<'_, f32>) {
        let (ny, nx) = (self.rows.fft_len, self.cols.fft_len);
        let (ho, wo) = self.output_shape();
        let plane = self.plane();
        let n_phase = self.n_phase();
        let channels = image.shape()[0];
        let mut scratch = self.scratch();

        // image spectra [group][phase]
        let mut image_spectra = vec![C32::default(); self.groups * n_phase * plane];
        let mut buf = vec![C32::default(); plane];
        for grp in 0..self.groups {
            for (iy, py) in self.rows.phases.iter().enumerate() {
                for (ix, px) in self.cols.phases.iter().enumerate() {
                    buf.iter_mut().for_each(|v| *v = C32::default());
                    for n in 0..py.len {
                        let y = self.stride * n + py.offset;
                        for m in 0..px.len {
                            let x = self.stride * m + px.offset;
                            let v = if self.groups == 1 {
                                (0..channels).map(|c| image[[c, y, x]]).sum::<f32>()
                            } else {
                                image[[grp, y, x]]
                            };
                            buf[n * nx + m] = C32::new(v, 0.0);
                        }
                    }
                    let idx = (grp * n_phase + iy * self.cols.phases.len() + ix) * plane;
                    self.forward_2d(&mut buf, &mut image_spectra[idx..idx + plane], &mut scratch);
                }
            }
        }

        let mut acc = vec![C32::default(); plane];
        let mut rows = vec![C32::default(); ho * nx];
        for q in 0..self.pairs {
            acc.iter_mut().for_each(|v| *v = C32::default());
            for grp in 0..self.groups {
                for ph in 0..n_phase {
                    let s = self.spectrum_index(q, grp, ph);
                    let x = (grp * n_phase + ph) * plane;
                    let kern = &self.spectra[s..s + plane];
                    let img = &image_spectra[x..x + plane];
                    for ((a, k), i) in acc.iter_mut().zip(kern).zip(img) {
                        *a += k * i;
                    }
                }
            }
            // inverse along y for every column, then along x for kept rows only
            self.inv_y.process_with_scratch(&mut acc, &mut scratch);
            for oy in 0..ho {
                for ix in 0..nx {
                    rows[oy * nx + ix] = acc[ix * ny + oy];
                }
            }
            self.inv_x.process_with_scratch(&mut rows, &mut scratch);
            let ka = 2 * q;
            let kb = 2 * q + 1;
            for oy in 0..ho {
                for ox in 0..wo {
                    let v = rows[oy * nx + ox];
                    out[[ka, oy, ox]] = v.re;
                    if kb < self.num_kernels {
                        out[[kb, oy, ox]] = v.im;
                    }
                }
            }
        }
    }
}
