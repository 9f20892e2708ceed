//! File formats: UVT1 tensor containers, PNG images, basis files and
//! coefficient text files.
//!
//! A UVT1 container is the magic `UVT1`, a little-endian `u32` record
//! count, then per record: `u32` name length, UTF-8 name, `u32` rank, one
//! `u32` per dimension, a `u8` dtype tag and the row-major little-endian
//! payload. Tags: 1 = f32, 2 = i32, 3 = u8, 4 = f64.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use uvmakeup_tensor::Tensor;

use crate::error::{io_err, Error, Result};
use crate::morphable::{BasisParts, FaceCoefficients, MorphableBasis, Projection};

pub const MAGIC: &[u8; 4] = b"UVT1";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    U8(Vec<u8>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::I32(_) => 2,
            TensorData::U8(_) => 3,
            TensorData::F64(_) => 4,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn width(tag: u8) -> Option<usize> {
        match tag {
            1 | 2 => Some(4),
            3 => Some(1),
            4 => Some(8),
            _ => None,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::I32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

/// An ordered set of uniquely named tensor records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    records: Vec<Record>,
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "UVT1 container",
        detail: detail.into(),
    }
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: Record) -> Result<()> {
        if self.get(&record.name).is_some() {
            return Err(format_err(format!(
                "duplicate record name {:?}",
                record.name
            )));
        }
        let n: usize = record.dims.iter().product();
        if n != record.data.len() {
            return Err(format_err(format!(
                "record {:?}: dims {:?} need {n} elements, payload has {}",
                record.name,
                record.dims,
                record.data.len()
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        self.push(Record {
            name: name.into(),
            dims: t.shape().to_vec(),
            data: TensorData::F64(t.data().to_vec()),
        })
    }

    pub fn push_f64(
        &mut self,
        name: impl Into<String>,
        dims: &[usize],
        data: Vec<f64>,
    ) -> Result<()> {
        self.push(Record {
            name: name.into(),
            dims: dims.to_vec(),
            data: TensorData::F64(data),
        })
    }

    pub fn push_u8(
        &mut self,
        name: impl Into<String>,
        dims: &[usize],
        data: Vec<u8>,
    ) -> Result<()> {
        self.push(Record {
            name: name.into(),
            dims: dims.to_vec(),
            data: TensorData::U8(data),
        })
    }

    pub fn push_i32(
        &mut self,
        name: impl Into<String>,
        dims: &[usize],
        data: Vec<i32>,
    ) -> Result<()> {
        self.push(Record {
            name: name.into(),
            dims: dims.to_vec(),
            data: TensorData::I32(data),
        })
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Record> {
        self.get(name)
            .ok_or_else(|| format_err(format!("missing record {name:?}")))
    }

    /// A record converted to an `f64` tensor.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let r = self.require(name)?;
        Ok(Tensor::new(&r.dims, r.data.to_f64())?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
            for &d in &r.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(r.data.tag());
            match &r.data {
                TensorData::F32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::I32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
                TensorData::F64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(format_err("bad magic"));
        }
        let count = cur.u32()?;
        let mut c = Container::new();
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| format_err("record name is not UTF-8"))?
                .to_string();
            let rank = cur.u32()? as usize;
            let dims = (0..rank)
                .map(|_| cur.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let tag = cur.take(1)?[0];
            let width = TensorData::width(tag)
                .ok_or_else(|| format_err(format!("unknown dtype tag {tag}")))?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| format_err("dims overflow"))?;
            let payload = cur.take(
                n.checked_mul(width)
                    .ok_or_else(|| format_err("payload overflow"))?,
            )?;
            let data = match tag {
                1 => TensorData::F32(
                    payload
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                2 => TensorData::I32(
                    payload
                        .chunks_exact(4)
                        .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                3 => TensorData::U8(payload.to_vec()),
                _ => TensorData::F64(
                    payload
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
            };
            c.push(Record { name, dims, data })?;
        }
        if cur.pos != bytes.len() {
            return Err(format_err(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes()).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Loads an 8-bit RGB PNG (alpha dropped) as a `[3, H, W]` tensor in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Saves a `[3, H, W]` or `[1, H, W]` tensor as an 8-bit PNG, rounding half up.
pub fn save_png(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = t.dims3()?;
    let plane = h * w;
    match c {
        3 => {
            let buf: Vec<u8> = (0..plane)
                .flat_map(|p| (0..3).map(move |ch| quantize(t.data()[ch * plane + p])))
                .collect();
            image::RgbImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer size")
                .save(path)?;
        }
        1 => {
            let buf: Vec<u8> = t.data().iter().map(|&v| quantize(v)).collect();
            image::GrayImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer size")
                .save(path)?;
        }
        _ => {
            return Err(Error::Format {
                what: "PNG image",
                detail: format!("expected 1 or 3 channels, got {c}"),
            })
        }
    }
    Ok(())
}

fn flat3(v: &[[f64; 3]]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

fn unflat3(v: &[f64]) -> Vec<[f64; 3]> {
    v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn as_indices(r: &Record) -> Result<Vec<usize>> {
    match &r.data {
        TensorData::I32(v) if v.iter().all(|&x| x >= 0) => {
            Ok(v.iter().map(|&x| x as usize).collect())
        }
        _ => Err(Error::Format {
            what: "basis file",
            detail: format!("{} must hold nonnegative int32 indices", r.name),
        }),
    }
}

pub fn basis_to_container(basis: &MorphableBasis) -> Result<Container> {
    let p = basis.to_parts();
    let v = p.mean_shape.len();
    let mut c = Container::new();
    c.push_f64("mean_shape", &[v, 3], flat3(&p.mean_shape))?;
    c.push_f64("id_basis", &[v, 3, p.k_id], p.id_basis)?;
    c.push_f64("exp_basis", &[v, 3, p.k_exp], p.exp_basis)?;
    c.push_f64("mean_texture", &[v, 3], flat3(&p.mean_texture))?;
    c.push_f64("tex_basis", &[v, 3, p.k_tex], p.tex_basis)?;
    let tris: Vec<i32> = p.triangles.iter().flatten().map(|&i| i as i32).collect();
    c.push_i32("triangles", &[p.triangles.len(), 3], tris)?;
    c.push_i32(
        "mirror_map",
        &[v],
        p.mirror_map.iter().map(|&i| i as i32).collect(),
    )?;
    let uv: Vec<f64> = basis.uv_coords().iter().flatten().copied().collect();
    c.push_f64("uv_coords", &[v, 2], uv)?;
    Ok(c)
}

/// Rebuilds a basis; `uv_coords` are recomputed by the unwrap and must agree
/// with the stored ones.
pub fn basis_from_container(c: &Container) -> Result<MorphableBasis> {
    let k = |name: &str| -> Result<usize> {
        let r = c.require(name)?;
        r.dims.get(2).copied().ok_or_else(|| Error::Format {
            what: "basis file",
            detail: format!("{name} must be rank 3"),
        })
    };
    let tris = as_indices(c.require("triangles")?)?;
    let basis = MorphableBasis::from_parts(BasisParts {
        mean_shape: unflat3(&c.require("mean_shape")?.data.to_f64()),
        id_basis: c.require("id_basis")?.data.to_f64(),
        k_id: k("id_basis")?,
        exp_basis: c.require("exp_basis")?.data.to_f64(),
        k_exp: k("exp_basis")?,
        mean_texture: unflat3(&c.require("mean_texture")?.data.to_f64()),
        tex_basis: c.require("tex_basis")?.data.to_f64(),
        k_tex: k("tex_basis")?,
        triangles: tris.chunks_exact(3).map(|t| [t[0], t[1], t[2]]).collect(),
        mirror_map: as_indices(c.require("mirror_map")?)?,
    })?;
    if let Some(r) = c.get("uv_coords") {
        let stored = r.data.to_f64();
        let ours: Vec<f64> = basis.uv_coords().iter().flatten().copied().collect();
        if stored.len() != ours.len() || stored.iter().zip(&ours).any(|(a, b)| (a - b).abs() > 1e-9)
        {
            return Err(Error::Format {
                what: "basis file",
                detail: "uv_coords disagree with the cylindrical unwrap of mean_shape".into(),
            });
        }
    }
    Ok(basis)
}

fn join(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// `key = v1 v2 ...` lines for `alpha_id`, `alpha_exp`, `alpha_tex` and
/// the 12 row-major projection entries. Values use the shortest exact
/// decimal form, so parsing restores them bit for bit.
pub fn coefficients_to_text(c: &FaceCoefficients) -> String {
    format!(
        "alpha_id = {}\nalpha_exp = {}\nalpha_tex = {}\nprojection = {}\n",
        join(&c.alpha_id),
        join(&c.alpha_exp),
        join(&c.alpha_tex),
        join(&c.projection.flat())
    )
}

pub fn coefficients_from_text(text: &str) -> Result<FaceCoefficients> {
    let err = |detail: String| Error::Format {
        what: "coefficients file",
        detail,
    };
    let mut fields: [Option<Vec<f64>>; 4] = Default::default();
    const KEYS: [&str; 4] = ["alpha_id", "alpha_exp", "alpha_tex", "projection"];
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, values) = line
            .split_once('=')
            .ok_or_else(|| err(format!("line {}: expected `key = values`", n + 1)))?;
        let key = key.trim();
        let slot = KEYS
            .iter()
            .position(|k| *k == key)
            .ok_or_else(|| err(format!("line {}: unknown key {key:?}", n + 1)))?;
        let parsed = values
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| err(format!("line {}: bad number {s:?}", n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if fields[slot].replace(parsed).is_some() {
            return Err(err(format!("line {}: duplicate key {key:?}", n + 1)));
        }
    }
    let [id, exp, tex, proj] = fields;
    let missing = |k: &str| err(format!("missing key {k:?}"));
    Ok(FaceCoefficients {
        alpha_id: id.ok_or_else(|| missing("alpha_id"))?,
        alpha_exp: exp.ok_or_else(|| missing("alpha_exp"))?,
        alpha_tex: tex.ok_or_else(|| missing("alpha_tex"))?,
        projection: Projection::from_flat(&proj.ok_or_else(|| missing("projection"))?)?,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn container_round_trip_all_dtypes() {
        let mut c = Container::new();
        c.push(Record {
            name: "a".into(),
            dims: vec![2, 2],
            data: TensorData::F32(vec![1.5, -2.0, f32::MIN_POSITIVE, 0.0]),
        })
        .unwrap();
        c.push_i32("idx", &[3], vec![0, -7, i32::MAX]).unwrap();
        c.push_u8("mask", &[1, 2, 2], vec![0, 1, 1, 0]).unwrap();
        c.push_f64("π", &[], vec![std::f64::consts::PI]).unwrap();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.tensor("π").unwrap().item(), std::f64::consts::PI);
    }

    #[test]
    fn header_layout() {
        let mut c = Container::new();
        c.push_u8("m", &[2], vec![7, 9]).unwrap();
        let b = c.to_bytes();
        let want: Vec<u8> = [
            &b"UVT1"[..],
            &1u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            b"m",
            &1u32.to_le_bytes(),
            &2u32.to_le_bytes(),
            &[3u8, 7, 9],
        ]
        .concat();
        assert_eq!(b, want);
    }

    #[test]
    fn rejects_malformed_input() {
        let mut c = Container::new();
        c.push_f64("x", &[2], vec![1.0, 2.0]).unwrap();
        assert!(c.push_f64("x", &[1], vec![0.0]).is_err());
        assert!(c.push_f64("y", &[3], vec![0.0]).is_err());
        let b = c.to_bytes();
        assert!(Container::from_bytes(&b[..b.len() - 1]).is_err());
        assert!(Container::from_bytes(&[b.as_slice(), &[0]].concat()).is_err());
        assert!(Container::from_bytes(b"UVT2\0\0\0\0").is_err());
        let mut bad_tag = b.clone();
        bad_tag[4 + 4 + 4 + 1 + 4 + 4] = 9;
        assert!(Container::from_bytes(&bad_tag).is_err());
    }

    #[test]
    fn basis_file_round_trip() {
        let basis = MorphableBasis::synthetic(3);
        let c = basis_to_container(&basis).unwrap();
        let back = basis_from_container(&Container::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.to_parts(), basis.to_parts());
        assert_eq!(back.uv_coords(), basis.uv_coords());
    }

    #[test]
    fn coefficient_text_round_trip_and_errors() {
        let c = FaceCoefficients {
            alpha_id: vec![0.1, -1e-17, 3.0],
            alpha_exp: vec![],
            alpha_tex: vec![2.5],
            projection: Projection::weak_perspective(12.0, -3.0, 1.0, 80.0, 64.0, 60.5),
        };
        let back = coefficients_from_text(&coefficients_to_text(&c)).unwrap();
        assert_eq!(back, c);
        assert!(coefficients_from_text("alpha_id = 1\n").is_err());
        assert!(coefficients_from_text("beta = 1\n").is_err());
        assert!(coefficients_from_text("alpha_id = x\n").is_err());
    }

    #[test]
    fn png_quantization_rounds_half_up() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let t = Tensor::new(
            &[3, 1, 2],
            vec![0.5 / 255.0, 1.0, 0.2, 0.0, 1.49 / 255.0, 2.0],
        )
        .unwrap();
        save_png(&path, &t).unwrap();
        let back = load_png(&path).unwrap();
        let want = [1.0 / 255.0, 1.0, 51.0 / 255.0, 0.0, 1.0 / 255.0, 1.0];
        for (a, b) in back.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let gray = dir.path().join("m.png");
        save_png(&gray, &Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap()).unwrap();
        assert_eq!(load_png(&gray).unwrap().shape(), &[3, 1, 2]);
    }

    proptest! {
        #[test]
        fn f64_records_round_trip_bit_exactly(values in prop::collection::vec(any::<f64>(), 0..64)) {
            let mut c = Container::new();
            c.push_f64("v", &[values.len()], values.clone()).unwrap();
            let back = Container::from_bytes(&c.to_bytes()).unwrap();
            let TensorData::F64(got) = &back.records()[0].data else { panic!() };
            prop_assert!(got.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
