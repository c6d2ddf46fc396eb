//! Binary persistence for sparse images and model checkpoints, and portable
//! pixmap dumps.
//!
//! All integers and floats are little-endian.
//!
//! Sparse image (`PRI1`):
//!
//! ```text
//! magic "PRI1" | version u16 | H u16 | W u16 | C u8 | P u8 | N u16
//! method u8 | v u8 | k u8 | label u16 | seed u64 | iteration u32 | patch_count u16
//! patch_count × { position u16 | P·P·C × f32 }
//! ```
//!
//! Checkpoint (`VTC1`):
//!
//! ```text
//! magic "VTC1" | version u16
//! H W C P dim layers heads classes : u32 each | importance_layer i32 (-1 = last)
//! metadata_len u32 | metadata (UTF-8 JSON)
//! tensor_count u32 | tensor_count × { rank u8 | rank × u32 dims | numel × f32 }
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::inversion::{Method, SparseImage};
use crate::tensor::Tensor;
use crate::vit::{ImageGeometry, Patch, ViTConfig, ViTModel};

pub const SPARSE_MAGIC: &[u8; 4] = b"PRI1";
pub const SPARSE_VERSION: u16 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VTC1";
pub const CHECKPOINT_VERSION: u16 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, at: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated: need {n} bytes at offset {}, have {}", self.at, self.buf.len()))
        })?;
        let out = &self.buf[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.at)));
        }
        Ok(())
    }
}

fn narrow<T: TryFrom<usize>>(value: usize, what: &str) -> Result<T> {
    T::try_from(value).map_err(|_| Error::Format(format!("{what} = {value} does not fit the header field")))
}

pub fn encode_sparse_image(img: &SparseImage) -> Result<Vec<u8>> {
    let g = &img.geometry;
    let plen = g.patch_len();
    let mut out = Vec::with_capacity(33 + img.patches.len() * (2 + 4 * plen));
    out.extend_from_slice(SPARSE_MAGIC);
    out.extend_from_slice(&SPARSE_VERSION.to_le_bytes());
    out.extend_from_slice(&narrow::<u16>(g.height, "H")?.to_le_bytes());
    out.extend_from_slice(&narrow::<u16>(g.width, "W")?.to_le_bytes());
    out.push(narrow::<u8>(g.channels, "C")?);
    out.push(narrow::<u8>(g.patch, "P")?);
    out.extend_from_slice(&narrow::<u16>(g.num_patches(), "N")?.to_le_bytes());
    out.push(img.method.code());
    out.push(narrow::<u8>(img.v, "v")?);
    out.push(narrow::<u8>(img.k, "k")?);
    out.extend_from_slice(&narrow::<u16>(img.label, "label")?.to_le_bytes());
    out.extend_from_slice(&img.seed.to_le_bytes());
    out.extend_from_slice(&narrow::<u32>(img.iteration, "iteration")?.to_le_bytes());
    out.extend_from_slice(&narrow::<u16>(img.patches.len(), "patch_count")?.to_le_bytes());
    let mut prev: Option<usize> = None;
    for p in &img.patches {
        if prev.is_some_and(|q| p.position <= q) || p.position >= g.num_patches() {
            return Err(Error::Format(format!("patch positions must be increasing and < N, got {}", p.position)));
        }
        if p.pixels.len() != plen {
            return Err(Error::Format(format!("patch of {} values, expected {plen}", p.pixels.len())));
        }
        prev = Some(p.position);
        out.extend_from_slice(&(p.position as u16).to_le_bytes());
        for v in &p.pixels {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_sparse_image(bytes: &[u8]) -> Result<SparseImage> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != SPARSE_MAGIC {
        return Err(Error::Format("bad magic, expected PRI1".into()));
    }
    let version = r.u16()?;
    if version != SPARSE_VERSION {
        return Err(Error::Format(format!("unsupported sparse image version {version}")));
    }
    let height = r.u16()? as usize;
    let width = r.u16()? as usize;
    let channels = r.u8()? as usize;
    let patch = r.u8()? as usize;
    let n = r.u16()? as usize;
    if patch == 0 || channels == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::Format(format!("inconsistent geometry {height}x{width}x{channels}, P={patch}")));
    }
    let geometry = ImageGeometry { height, width, channels, patch };
    if geometry.num_patches() != n {
        return Err(Error::Format(format!("N = {n} but geometry implies {}", geometry.num_patches())));
    }
    let code = r.u8()?;
    let method = Method::from_code(code).ok_or_else(|| Error::Format(format!("unknown method code {code}")))?;
    let v = r.u8()? as usize;
    let k = r.u8()? as usize;
    let label = r.u16()? as usize;
    let seed = r.u64()?;
    let iteration = r.u32()? as usize;
    let count = r.u16()? as usize;
    let mut patches = Vec::with_capacity(count);
    for _ in 0..count {
        let position = r.u16()? as usize;
        if position >= n || patches.last().is_some_and(|p: &Patch<f32>| position <= p.position) {
            return Err(Error::Format(format!("position {position} out of order or range")));
        }
        patches.push(Patch { position, pixels: r.f32s(geometry.patch_len())? });
    }
    r.finish()?;
    Ok(SparseImage { geometry, method, v, k, label, seed, iteration, patches })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_sparse_image(img: &SparseImage, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_sparse_image(img)?)
}

pub fn load_sparse_image(path: impl AsRef<Path>) -> Result<SparseImage> {
    decode_sparse_image(&read_file(path.as_ref())?)
}

/// A model with free-form JSON metadata (training report, dataset config).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ViTModel<f32>,
    pub metadata: String,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let cfg = &ckpt.model.config;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        cfg.image_height,
        cfg.image_width,
        cfg.channels,
        cfg.patch_size,
        cfg.dim,
        cfg.layers,
        cfg.heads,
        cfg.classes,
    ] {
        out.extend_from_slice(&narrow::<u32>(v, "config field")?.to_le_bytes());
    }
    let imp: i32 = match cfg.importance_layer {
        Some(l) => narrow(l, "importance layer")?,
        None => -1,
    };
    out.extend_from_slice(&imp.to_le_bytes());
    out.extend_from_slice(&narrow::<u32>(ckpt.metadata.len(), "metadata length")?.to_le_bytes());
    out.extend_from_slice(ckpt.metadata.as_bytes());
    let params = ckpt.model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for t in params {
        out.push(narrow::<u8>(t.shape().len(), "rank")?);
        for &d in t.shape() {
            out.extend_from_slice(&narrow::<u32>(d, "dimension")?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic, expected VTC1".into()));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut f = [0usize; 8];
    for slot in &mut f {
        *slot = r.u32()? as usize;
    }
    let imp = r.i32()?;
    let config = ViTConfig {
        image_height: f[0],
        image_width: f[1],
        channels: f[2],
        patch_size: f[3],
        dim: f[4],
        layers: f[5],
        heads: f[6],
        classes: f[7],
        importance_layer: if imp < 0 { None } else { Some(imp as usize) },
    };
    config.validate().map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let meta_len = r.u32()? as usize;
    let metadata = String::from_utf8(r.take(meta_len)?.to_vec())
        .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor size overflow".into()))?;
        let data = r.f32s(numel)?;
        tensors.push(Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?);
    }
    r.finish()?;
    let model = ViTModel::from_params(config, tensors).map_err(|e| Error::Format(format!("checkpoint weights: {e}")))?;
    Ok(Checkpoint { model, metadata })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path.as_ref())?)
}

/// Binary `P6` pixmap: active patches at their grid positions, everything
/// else black. Values are min-max scaled over the active pixels; a constant
/// image renders mid-gray. One channel is replicated to gray; beyond three,
/// only the first three are shown.
pub fn render_ppm(img: &SparseImage) -> Vec<u8> {
    let g = &img.geometry;
    let (lo, hi) = img
        .patches
        .iter()
        .flat_map(|p| p.pixels.iter())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let scale = |x: f32| -> u8 {
        if !(hi > lo) {
            128
        } else {
            (((x - lo) / (hi - lo)) * 255.0).round().clamp(0.0, 255.0) as u8
        }
    };
    let mut rgb = vec![0u8; g.height * g.width * 3];
    let (p, c) = (g.patch, g.channels);
    for patch in &img.patches {
        let (gr, gc) = g.grid_of(patch.position);
        for y in 0..p {
            for x in 0..p {
                let src = (y * p + x) * c;
                let dst = ((gr * p + y) * g.width + gc * p + x) * 3;
                for ch in 0..3 {
                    rgb[dst + ch] = scale(patch.pixels[src + ch.min(c - 1)]);
                }
            }
        }
    }
    let mut out = format!("P6\n{} {}\n255\n", g.width, g.height).into_bytes();
    out.extend_from_slice(&rgb);
    out
}

pub fn save_ppm(img: &SparseImage, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &render_ppm(img))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_image() -> SparseImage {
        let geometry = ImageGeometry { height: 8, width: 8, channels: 3, patch: 4 };
        SparseImage {
            geometry,
            method: Method::Pri,
            v: 2,
            k: 1,
            label: 3,
            seed: 0xdead_beef,
            iteration: 50,
            patches: vec![
                Patch { position: 1, pixels: (0..48).map(|i| i as f32 * 0.5).collect() },
                Patch { position: 3, pixels: (0..48).map(|i| -(i as f32)).collect() },
            ],
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode_sparse_image(&sample_image()).unwrap();
        assert_eq!(&bytes[..4], b"PRI1");
        assert_eq!(bytes.len(), 33 + 2 * (2 + 48 * 4));
        assert_eq!(u16::from_le_bytes([bytes[12], bytes[13]]), 4);
        assert_eq!(bytes[14], 2);
        assert_eq!(bytes[15], 2);
        assert_eq!(u16::from_le_bytes([bytes[31], bytes[32]]), 2);
    }

    #[test]
    fn sparse_round_trip() {
        let img = sample_image();
        let bytes = encode_sparse_image(&img).unwrap();
        let back = decode_sparse_image(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(encode_sparse_image(&back).unwrap(), bytes);
    }

    #[test]
    fn corruption_rejected() {
        let bytes = encode_sparse_image(&sample_image()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_sparse_image(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_sparse_image(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_sparse_image(&extra), Err(Error::Format(_))));
        let mut version = bytes;
        version[4] = 9;
        assert!(matches!(decode_sparse_image(&version), Err(Error::Format(_))));
    }

    #[test]
    fn ppm_black_and_gray() {
        let img = sample_image();
        let ppm = render_ppm(&img);
        let header = b"P6\n8 8\n255\n";
        assert_eq!(&ppm[..header.len()], header);
        let body = &ppm[header.len()..];
        // Patch 0 (top-left) is inactive.
        assert_eq!(&body[..3], &[0, 0, 0]);
        let mut flat = img.clone();
        for p in &mut flat.patches {
            p.pixels.iter_mut().for_each(|x| *x = 2.5);
        }
        let ppm = render_ppm(&flat);
        let body = &ppm[header.len()..];
        let pixel = (4) * 3;
        assert_eq!(&body[pixel..pixel + 3], &[128, 128, 128]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ViTConfig { dim: 8, heads: 2, layers: 1, ..Default::default() };
        let ckpt = Checkpoint { model: ViTModel::init(cfg, 5).unwrap(), metadata: "{\"a\":1}".into() };
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        let mut bad = bytes.clone();
        bad[3] = b'0';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }
}
