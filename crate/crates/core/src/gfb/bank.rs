use std::f64::consts::FRAC_PI_2;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, Array4, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::kernel::{make_gabor_kernel, CellType, ChannelDescriptor, GaborParams};
use crate::container::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

const BANK_MAGIC: &[u8; 8] = b"VONEBANK";
const BANK_VERSION: u32 = 1;

/// Spatial geometry shared by every kernel of a bank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BankGeometry {
    /// Pixels per degree of visual angle.
    pub ppd: f64,
    pub stride: usize,
    /// Kernel side in pixels (odd).
    pub kernel_size: usize,
    pub input_channels: usize,
    /// Expected input height and width in pixels.
    pub input_size: usize,
}

impl Default for BankGeometry {
    /// 64 px covering a 2 degree field of view (32 ppd), stride 2, 25 px kernels.
    fn default() -> Self {
        BankGeometry { ppd: 32.0, stride: 2, kernel_size: 25, input_channels: 3, input_size: 64 }
    }
}

impl BankGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.ppd.is_finite() && self.ppd > 0.0) {
            return Err(Error::param("ppd", format!("{} must be positive", self.ppd)));
        }
        if self.stride == 0 {
            return Err(Error::param("stride", "must be at least 1"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::param("kernel_size", format!("{} is not odd", self.kernel_size)));
        }
        if self.input_channels == 0 || self.input_size == 0 {
            return Err(Error::param("input", "channels and size must be non-zero"));
        }
        Ok(())
    }

    /// Zero padding applied on each border, `(k - 1) / 2`.
    pub fn padding(&self) -> usize {
        (self.kernel_size - 1) / 2
    }

    /// Output side length, `ceil(input / stride)`.
    pub fn output_size(&self) -> usize {
        self.input_size.div_ceil(self.stride)
    }
}

/// Which descriptor a kernel belongs to and whether it is the `phase + pi/2`
/// member of a complex quadrature pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelSlot {
    pub descriptor: usize,
    pub quadrature: bool,
}

/// Immutable fixed-weight Gabor filter bank.
///
/// Kernels are laid out `[num_kernels, input_channels, k, k]`, one per simple
/// channel and two consecutive ones (phase, phase + pi/2) per complex
/// channel, in descriptor order. Each kernel is copied to every input channel
/// scaled by `1 / input_channels`, so the bank responds to luminance.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    geometry: BankGeometry,
    descriptors: Vec<ChannelDescriptor>,
    kernels: Array4<f32>,
    slots: Vec<KernelSlot>,
    n_simple: usize,
}

/// Builds the bank from descriptors listed simple-first, with
/// `channel_index` equal to the list position.
pub fn build_filter_bank(
    descriptors: Vec<ChannelDescriptor>,
    geometry: BankGeometry,
) -> Result<FilterBank> {
    geometry.validate()?;
    if descriptors.is_empty() {
        return Err(Error::param("descriptors", "empty descriptor list"));
    }
    let n_simple = check_descriptor_order(&descriptors)?;

    let slots = kernel_slots(&descriptors);
    let k = geometry.kernel_size;
    let c = geometry.input_channels;
    let mut kernels = Array4::<f32>::zeros((slots.len(), c, k, k));
    for (j, slot) in slots.iter().enumerate() {
        let plane = kernel_plane(&descriptors[slot.descriptor].params, slot.quadrature, &geometry)?;
        for ch in 0..c {
            kernels.slice_mut(s![j, ch, .., ..]).assign(&plane);
        }
    }
    Ok(FilterBank { geometry, descriptors, kernels, slots, n_simple })
}

fn check_descriptor_order(descriptors: &[ChannelDescriptor]) -> Result<usize> {
    let n_simple = descriptors.iter().take_while(|d| d.cell_type == CellType::Simple).count();
    if descriptors[n_simple..].iter().any(|d| d.cell_type == CellType::Simple) {
        return Err(Error::param("descriptors", "simple channels must precede complex channels"));
    }
    for (i, d) in descriptors.iter().enumerate() {
        if d.channel_index != i {
            return Err(Error::param(
                "descriptors",
                format!("descriptor at position {i} has channel_index {}", d.channel_index),
            ));
        }
        d.params.validate()?;
    }
    Ok(n_simple)
}

fn kernel_slots(descriptors: &[ChannelDescriptor]) -> Vec<KernelSlot> {
    descriptors
        .iter()
        .enumerate()
        .flat_map(|(i, d)| {
            (0..d.cell_type.kernels_per_channel())
                .map(move |q| KernelSlot { descriptor: i, quadrature: q == 1 })
        })
        .collect()
}

/// One input-channel plane of a bank kernel: the unit-norm Gabor divided by
/// the number of input channels, rounded to f32.
fn kernel_plane(params: &GaborParams, quadrature: bool, geometry: &BankGeometry) -> Result<Array2<f32>> {
    let mut p = *params;
    if quadrature {
        p.phase += FRAC_PI_2;
    }
    let g = make_gabor_kernel(&p, geometry.ppd, geometry.kernel_size)?;
    if g.undersampled {
        log::debug!("kernel for {p:?} has a sub-pixel envelope");
    }
    let scale = geometry.input_channels as f64;
    Ok(g.weights.mapv(|v| (v / scale) as f32))
}

impl FilterBank {
    pub fn geometry(&self) -> &BankGeometry {
        &self.geometry
    }

    pub fn descriptors(&self) -> &[ChannelDescriptor] {
        &self.descriptors
    }

    /// `[num_kernels, input_channels, k, k]`.
    pub fn kernels(&self) -> &Array4<f32> {
        &self.kernels
    }

    pub fn slots(&self) -> &[KernelSlot] {
        &self.slots
    }

    pub fn num_kernels(&self) -> usize {
        self.slots.len()
    }

    pub fn num_channels(&self) -> usize {
        self.descriptors.len()
    }

    pub fn n_simple(&self) -> usize {
        self.n_simple
    }

    pub fn n_complex(&self) -> usize {
        self.descriptors.len() - self.n_simple
    }

    /// Index of the first kernel owned by descriptor `i`.
    pub fn first_kernel_of(&self, i: usize) -> usize {
        // simple channels come first and own one kernel each
        if i < self.n_simple {
            i
        } else {
            self.n_simple + 2 * (i - self.n_simple)
        }
    }

    /// Kernel `j`, input channel `ch`.
    pub fn kernel(&self, j: usize, ch: usize) -> ArrayView2<'_, f32> {
        self.kernels.slice(s![j, ch, .., ..])
    }

    /// True when every input channel of every kernel holds the same plane.
    pub fn is_channel_replicated(&self) -> bool {
        let c = self.geometry.input_channels;
        (0..self.num_kernels()).all(|j| (1..c).all(|ch| self.kernel(j, ch) == self.kernel(j, 0)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let g = &self.geometry;
        let mut w = ByteWriter::default();
        w.bytes(BANK_MAGIC);
        w.u32(BANK_VERSION);
        w.f64(g.ppd);
        w.u32(g.stride as u32);
        w.u32(g.kernel_size as u32);
        w.u32(g.input_channels as u32);
        w.u32(g.input_size as u32);
        w.u32(self.n_simple() as u32);
        w.u32(self.n_complex() as u32);
        w.u32(self.num_kernels() as u32);
        for d in &self.descriptors {
            w.u8(match d.cell_type {
                CellType::Simple => 0,
                CellType::Complex => 1,
            });
            w.u32(d.channel_index as u32);
            let p = &d.params;
            for v in [p.theta, p.sf, p.phase, p.nx, p.ny] {
                w.f64(v);
            }
        }
        for &v in self.kernels.iter() {
            w.f32(v);
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<FilterBank> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != BANK_MAGIC {
            return Err(Error::format(None, "not a filter bank container"));
        }
        let version = r.u32()?;
        if version != BANK_VERSION {
            return Err(Error::format(None, format!("unsupported bank version {version}")));
        }
        let geometry = BankGeometry {
            ppd: r.f64()?,
            stride: r.u32()? as usize,
            kernel_size: r.u32()? as usize,
            input_channels: r.u32()? as usize,
            input_size: r.u32()? as usize,
        };
        geometry.validate()?;
        let n_simple = r.u32()? as usize;
        let n_complex = r.u32()? as usize;
        let num_kernels = r.u32()? as usize;
        if num_kernels != n_simple + 2 * n_complex {
            return Err(Error::format(
                None,
                format!("{num_kernels} kernels for {n_simple} simple + {n_complex} complex channels"),
            ));
        }
        let mut descriptors = Vec::with_capacity(n_simple + n_complex);
        for _ in 0..n_simple + n_complex {
            let cell_type = match r.u8()? {
                0 => CellType::Simple,
                1 => CellType::Complex,
                other => return Err(Error::format(None, format!("bad cell type tag {other}"))),
            };
            let channel_index = r.u32()? as usize;
            let params = GaborParams {
                theta: r.f64()?,
                sf: r.f64()?,
                phase: r.f64()?,
                nx: r.f64()?,
                ny: r.f64()?,
            };
            descriptors.push(ChannelDescriptor { cell_type, params, channel_index });
        }
        if descriptors.is_empty() {
            return Err(Error::format(None, "bank has no channels"));
        }
        let counted = check_descriptor_order(&descriptors)?;
        if counted != n_simple {
            return Err(Error::format(None, "header simple count disagrees with descriptors"));
        }
        let k = geometry.kernel_size;
        let len = num_kernels * geometry.input_channels * k * k;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f32()?);
        }
        if !r.is_empty() {
            return Err(Error::format(None, "trailing bytes after kernel data"));
        }
        let kernels = Array4::from_shape_vec((num_kernels, geometry.input_channels, k, k), data)
            .map_err(|e| Error::format(None, e.to_string()))?;
        let slots = kernel_slots(&descriptors);
        Ok(FilterBank { geometry, descriptors, kernels, slots, n_simple })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FilterBank> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        FilterBank::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { reason, .. } => Error::format(Some(path.to_path_buf()), reason),
            other => other,
        })
    }

    /// SHA-256 of the serialized bank, hex encoded.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Writes kernel `j` (input channel 0) as an 8-bit binary PGM, mapping
    /// `[-max|w|, max|w|]` onto `[0, 255]`.
    pub fn write_kernel_pgm(&self, j: usize, out: &mut impl Write) -> std::io::Result<()> {
        let plane = self.kernel(j, 0);
        let k = self.geometry.kernel_size;
        let max = plane.iter().fold(0f32, |m, v| m.max(v.abs())).max(f32::MIN_POSITIVE);
        write!(out, "P5\n{k} {k}\n255\n")?;
        let pixels: Vec<u8> = plane
            .iter()
            .map(|v| ((v / max * 0.5 + 0.5) * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        out.write_all(&pixels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(i: usize, cell_type: CellType, theta: f64, sf: f64) -> ChannelDescriptor {
        ChannelDescriptor {
            cell_type,
            params: GaborParams { theta, sf, phase: 0.3, nx: 0.6, ny: 0.8 },
            channel_index: i,
        }
    }

    fn small_bank() -> FilterBank {
        let d = vec![
            desc(0, CellType::Simple, 0.0, 2.0),
            desc(1, CellType::Simple, 45.0, 4.0),
            desc(2, CellType::Complex, 90.0, 3.0),
        ];
        build_filter_bank(d, BankGeometry { kernel_size: 11, input_size: 16, ..Default::default() })
            .unwrap()
    }

    #[test]
    fn kernel_count_and_slots() {
        let bank = small_bank();
        assert_eq!(bank.num_kernels(), 4);
        assert_eq!(bank.first_kernel_of(2), 2);
        assert_eq!(bank.slots()[3], KernelSlot { descriptor: 2, quadrature: true });
        assert!(bank.is_channel_replicated());
    }

    #[test]
    fn single_simple_channel() {
        let bank =
            build_filter_bank(vec![desc(0, CellType::Simple, 10.0, 2.0)], BankGeometry::default())
                .unwrap();
        assert_eq!(bank.num_kernels(), 1);
    }

    #[test]
    fn rejects_empty_and_misordered() {
        assert!(build_filter_bank(vec![], BankGeometry::default()).is_err());
        let d = vec![desc(0, CellType::Complex, 0.0, 2.0), desc(1, CellType::Simple, 0.0, 2.0)];
        assert!(build_filter_bank(d, BankGeometry::default()).is_err());
        let d = vec![desc(3, CellType::Simple, 0.0, 2.0)];
        assert!(build_filter_bank(d, BankGeometry::default()).is_err());
    }

    #[test]
    fn container_round_trip() {
        let bank = small_bank();
        let back = FilterBank::from_bytes(&bank.to_bytes()).unwrap();
        assert_eq!(bank, back);
        assert_eq!(bank.checksum(), back.checksum());
    }

    #[test]
    fn container_rejects_truncation_and_bad_magic() {
        let bytes = small_bank().to_bytes();
        assert!(FilterBank::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(FilterBank::from_bytes(&bad).is_err());
    }

    #[test]
    fn pgm_has_header_and_payload() {
        let bank = small_bank();
        let mut buf = Vec::new();
        bank.write_kernel_pgm(0, &mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n11 11\n255\n"));
        assert_eq!(buf.len(), b"P5\n11 11\n255\n".len() + 121);
    }
}
