//! Minimal NIfTI-1 reader/writer for single-file `.nii` / `.nii.gz` volumes.
//!
//! Only what the pipeline needs: 3D single-channel images, little- or
//! big-endian sources, common datatypes, sform/qform affines. Written files
//! are always little-endian NIfTI-1 with an sform affine; images are stored
//! as 32-bit floats and labels as 8-bit unsigned integers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array3, ShapeBuilder};

use crate::error::{Error, Result};
use crate::volume::{Affine, LabelMap, Volume, NUM_CLASSES};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: f32 = 352.0;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

struct Header {
    dim: [i16; 8],
    datatype: i16,
    pixdim: [f32; 8],
    vox_offset: f32,
    scl_slope: f32,
    scl_inter: f32,
    qform_code: i16,
    sform_code: i16,
    quatern: [f32; 3],
    qoffset: [f32; 3],
    srow: [[f32; 4]; 3],
}

fn parse_header<E: ByteOrder>(buf: &[u8]) -> Header {
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = E::read_i16(&buf[40 + 2 * i..]);
    }
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = E::read_f32(&buf[76 + 4 * i..]);
    }
    let mut srow = [[0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = E::read_f32(&buf[280 + 16 * r + 4 * c..]);
        }
    }
    Header {
        dim,
        datatype: E::read_i16(&buf[70..]),
        pixdim,
        vox_offset: E::read_f32(&buf[108..]),
        scl_slope: E::read_f32(&buf[112..]),
        scl_inter: E::read_f32(&buf[116..]),
        qform_code: E::read_i16(&buf[252..]),
        sform_code: E::read_i16(&buf[254..]),
        quatern: [
            E::read_f32(&buf[256..]),
            E::read_f32(&buf[260..]),
            E::read_f32(&buf[264..]),
        ],
        qoffset: [
            E::read_f32(&buf[268..]),
            E::read_f32(&buf[272..]),
            E::read_f32(&buf[276..]),
        ],
        srow,
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let file = File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut head = [0u8; 2];
    let n = reader.read(&mut head)?;
    let mut bytes = Vec::new();
    if n == 2 && head == [0x1f, 0x8b] {
        let file = File::open(path)?;
        MultiGzDecoder::new(BufReader::new(file)).read_to_end(&mut bytes)?;
    } else {
        bytes.extend_from_slice(&head[..n]);
        reader.read_to_end(&mut bytes)?;
    }
    Ok(bytes)
}

fn decode_voxels<E: ByteOrder>(raw: &[u8], datatype: i16, n: usize) -> Result<Vec<f64>> {
    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::UnsupportedFormat(format!("NIfTI datatype {other}"))),
    };
    if raw.len() < n * width {
        return Err(Error::UnsupportedFormat("truncated NIfTI data section".into()));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let b = &raw[i * width..];
        let v = match datatype {
            DT_UINT8 => b[0] as f64,
            DT_INT8 => b[0] as i8 as f64,
            DT_INT16 => E::read_i16(b) as f64,
            DT_UINT16 => E::read_u16(b) as f64,
            DT_INT32 => E::read_i32(b) as f64,
            DT_UINT32 => E::read_u32(b) as f64,
            DT_FLOAT32 => E::read_f32(b) as f64,
            DT_FLOAT64 => E::read_f64(b),
            _ => unreachable!(),
        };
        out.push(v);
    }
    Ok(out)
}

fn quaternion_affine(h: &Header) -> Affine {
    let (b, c, d) = (h.quatern[0] as f64, h.quatern[1] as f64, h.quatern[2] as f64);
    let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
    let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
    let (sx, sy, sz) = (h.pixdim[1] as f64, h.pixdim[2] as f64, qfac * h.pixdim[3] as f64);
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ];
    let mut aff = [[0.0; 4]; 4];
    for i in 0..3 {
        aff[i][0] = r[i][0] * sx;
        aff[i][1] = r[i][1] * sy;
        aff[i][2] = r[i][2] * sz;
        aff[i][3] = h.qoffset[i] as f64;
    }
    aff[3][3] = 1.0;
    aff
}

struct Decoded {
    data: Array3<f64>,
    spacing: [f64; 3],
    affine: Affine,
}

fn load_decoded(path: &Path) -> Result<Decoded> {
    let bytes = read_all(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(Error::UnsupportedFormat("file shorter than a NIfTI-1 header".into()));
    }
    let little = LittleEndian::read_i32(&bytes) == 348;
    let big = BigEndian::read_i32(&bytes) == 348;
    if !little && !big {
        return Err(Error::UnsupportedFormat("not a NIfTI-1 file (bad sizeof_hdr)".into()));
    }
    let header = if little {
        parse_header::<LittleEndian>(&bytes)
    } else {
        parse_header::<BigEndian>(&bytes)
    };

    let ndim = header.dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(Error::UnsupportedFormat(format!("dim[0] = {ndim}")));
    }
    if ndim != 3 {
        // tolerate trailing singleton dims only
        if ndim < 3 || header.dim[4..=(ndim as usize)].iter().any(|&d| d > 1) {
            return Err(Error::UnsupportedFormat(format!(
                "expected a 3D single-channel volume, got dim {:?}",
                &header.dim[..=(ndim as usize).min(7)]
            )));
        }
    }
    let (nx, ny, nz) = (header.dim[1] as usize, header.dim[2] as usize, header.dim[3] as usize);
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(Error::UnsupportedFormat("zero-sized dimension".into()));
    }

    let offset = (header.vox_offset.max(HEADER_SIZE as f32)) as usize;
    if bytes.len() < offset {
        return Err(Error::UnsupportedFormat("vox_offset beyond end of file".into()));
    }
    let n = nx * ny * nz;
    let mut voxels = if little {
        decode_voxels::<LittleEndian>(&bytes[offset..], header.datatype, n)?
    } else {
        decode_voxels::<BigEndian>(&bytes[offset..], header.datatype, n)?
    };
    let slope = header.scl_slope;
    if slope != 0.0 && !(slope == 1.0 && header.scl_inter == 0.0) {
        for v in &mut voxels {
            *v = *v * slope as f64 + header.scl_inter as f64;
        }
    }

    let affine = if header.sform_code > 0 {
        let mut a = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..4 {
                a[i][j] = header.srow[i][j] as f64;
            }
        }
        a[3][3] = 1.0;
        a
    } else if header.qform_code > 0 {
        quaternion_affine(&header)
    } else {
        let mut a = [[0.0; 4]; 4];
        for i in 0..3 {
            a[i][i] = header.pixdim[i + 1].abs().max(f32::MIN_POSITIVE) as f64;
        }
        a[3][3] = 1.0;
        a
    };
    let mut spacing = [0.0; 3];
    for j in 0..3 {
        spacing[j] = (0..3).map(|i| affine[i][j] * affine[i][j]).sum::<f64>().sqrt();
        if spacing[j] <= 0.0 || !spacing[j].is_finite() {
            return Err(Error::UnsupportedFormat(format!("degenerate spacing on axis {j}")));
        }
    }

    // on-disk order is x-fastest
    let data = Array3::from_shape_vec((nx, ny, nz).f(), voxels)
        .map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
    Ok(Decoded { data: data.as_standard_layout().to_owned(), spacing, affine })
}

fn case_id_from_path(path: &Path) -> String {
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("case");
    name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}

/// Load an image volume, optionally with its paired label map.
pub fn load_case(image_path: &Path, label_path: Option<&Path>) -> Result<(Volume, Option<LabelMap>)> {
    let decoded = load_decoded(image_path)?;
    let volume = Volume::new(
        decoded.data.mapv(|v| v as f32),
        decoded.spacing,
        decoded.affine,
        case_id_from_path(image_path),
    )?;
    let label = match label_path {
        None => None,
        Some(lp) => {
            let dl = load_decoded(lp)?;
            if dl.data.shape() != volume.data.shape() {
                return Err(Error::Alignment(format!(
                    "label shape {:?} != image shape {:?}",
                    dl.data.shape(),
                    volume.data.shape()
                )));
            }
            let mut values = Array3::<u8>::zeros(volume.data.raw_dim());
            for (out, &v) in values.iter_mut().zip(dl.data.iter()) {
                if (v - v.round()).abs() > 1e-6 {
                    return Err(Error::CorruptLabel(format!("non-integer label value {v}")));
                }
                let r = v.round();
                if !(0.0..NUM_CLASSES as f64).contains(&r) {
                    return Err(Error::CorruptLabel(format!("label value {r} outside 0..=3")));
                }
                *out = r as u8;
            }
            Some(LabelMap::new(values, volume.spacing, volume.affine, volume.id.clone())?)
        }
    };
    Ok((volume, label))
}

fn write_header(
    out: &mut Vec<u8>,
    shape: [usize; 3],
    spacing: [f64; 3],
    affine: &Affine,
    datatype: i16,
    bitpix: i16,
) {
    let mut h = vec![0u8; HEADER_SIZE];
    LittleEndian::write_i32(&mut h[0..], HEADER_SIZE as i32);
    h[39] = 0; // dim_info
    let dims: [i16; 8] = [3, shape[0] as i16, shape[1] as i16, shape[2] as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut h[70..], datatype);
    LittleEndian::write_i16(&mut h[72..], bitpix);
    let pixdim: [f32; 8] = [
        1.0,
        spacing[0] as f32,
        spacing[1] as f32,
        spacing[2] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut h[108..], VOX_OFFSET);
    LittleEndian::write_f32(&mut h[112..], 1.0); // scl_slope
    LittleEndian::write_f32(&mut h[116..], 0.0); // scl_inter
    h[123] = 2; // xyzt_units: mm
    LittleEndian::write_i16(&mut h[252..], 0); // qform_code
    LittleEndian::write_i16(&mut h[254..], 1); // sform_code: scanner
    for r in 0..3 {
        for c in 0..4 {
            LittleEndian::write_f32(&mut h[280 + 16 * r + 4 * c..], affine[r][c] as f32);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    out.extend_from_slice(&h);
    out.extend_from_slice(&[0u8; 4]); // no extensions
}

fn write_bytes(path: &Path, payload: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let file = File::create(path)?;
    let gz = path.extension().and_then(|e| e.to_str()) == Some("gz");
    if gz {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::fast());
        enc.write_all(payload)?;
        enc.finish()?;
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(payload)?;
    }
    Ok(())
}

/// Write a volume as float32 gzip NIfTI-1.
pub fn save_volume(volume: &Volume, path: &Path) -> Result<()> {
    volume.validate()?;
    let shape = volume.shape();
    let mut payload = Vec::with_capacity(HEADER_SIZE + 4 + 4 * volume.data.len());
    write_header(&mut payload, shape, volume.spacing, &volume.affine, DT_FLOAT32, 32);
    // x-fastest order
    for &v in volume.data.t().iter() {
        payload.write_f32::<LittleEndian>(v)?;
    }
    write_bytes(path, &payload)
}

/// Write a label map as uint8 gzip NIfTI-1.
pub fn save_label(label: &LabelMap, path: &Path) -> Result<()> {
    label.validate()?;
    let shape = label.shape();
    let mut payload = Vec::with_capacity(HEADER_SIZE + 4 + label.data.len());
    write_header(&mut payload, shape, label.spacing, &label.affine, DT_UINT8, 8);
    for &v in label.data.t().iter() {
        payload.push(v);
    }
    write_bytes(path, &payload)
}

/// Paths produced by [`save_case`].
#[derive(Debug, Clone)]
pub struct SavedCase {
    pub image_path: PathBuf,
    pub label_path: Option<PathBuf>,
}

/// Save a case into `dir` using the cohort layout
/// `dir/images/<id>.nii.gz` + `dir/labels/<id>.nii.gz`.
pub fn save_case(volume: &Volume, label: Option<&LabelMap>, dir: &Path) -> Result<SavedCase> {
    if let Some(l) = label {
        l.check_aligned(volume)?;
    }
    let image_path = dir.join("images").join(format!("{}.nii.gz", volume.id));
    save_volume(volume, &image_path)?;
    let label_path = match label {
        Some(l) => {
            let p = dir.join("labels").join(format!("{}.nii.gz", volume.id));
            save_label(l, &p)?;
            Some(p)
        }
        None => None,
    };
    Ok(SavedCase { image_path, label_path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use tempfile::tempdir;

    fn probe_volume() -> Volume {
        let data = Array3::from_shape_fn((5, 4, 3), |(x, y, z)| (x * 100 + y * 10 + z) as f32 * 0.25 - 3.0);
        Volume::with_spacing(data, [0.7, 0.7, 1.0], "probe").unwrap()
    }

    #[test]
    fn round_trip_volume_is_lossless() {
        let dir = tempdir().unwrap();
        let v = probe_volume();
        let path = dir.path().join("probe.nii.gz");
        save_volume(&v, &path).unwrap();
        let (back, _) = load_case(&path, None).unwrap();
        assert_eq!(back.data, v.data);
        for i in 0..3 {
            assert!((back.spacing[i] - v.spacing[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn header_spacing_passes_through() {
        let dir = tempdir().unwrap();
        let v = probe_volume();
        let path = dir.path().join("probe.nii");
        save_volume(&v, &path).unwrap();
        let (back, _) = load_case(&path, None).unwrap();
        assert!((back.spacing[0] - 0.7).abs() < 1e-6);
        assert!((back.spacing[2] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn round_trip_label_is_lossless() {
        let dir = tempdir().unwrap();
        let v = probe_volume();
        let labels = Array3::from_shape_fn((5, 4, 3), |(x, y, z)| ((x + y + z) % 4) as u8);
        let l = LabelMap::with_spacing(labels, v.spacing, "probe").unwrap();
        let saved = save_case(&v, Some(&l), dir.path()).unwrap();
        let (_, back) = load_case(&saved.image_path, saved.label_path.as_deref()).unwrap();
        assert_eq!(back.unwrap().data, l.data);
    }

    #[test]
    fn missing_file_is_not_found() {
        assert!(matches!(
            load_case(Path::new("/nonexistent/x.nii.gz"), None),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn out_of_range_label_value_rejected() {
        let dir = tempdir().unwrap();
        let v = probe_volume();
        // write a "label" as a float volume with value 5
        let bad = Volume::with_spacing(Array3::from_elem((5, 4, 3), 5.0), v.spacing, "bad").unwrap();
        let img = dir.path().join("img.nii.gz");
        let lbl = dir.path().join("lbl.nii.gz");
        save_volume(&v, &img).unwrap();
        save_volume(&bad, &lbl).unwrap();
        assert!(matches!(load_case(&img, Some(&lbl)), Err(Error::CorruptLabel(_))));
    }

    #[test]
    fn non_integer_label_rejected() {
        let dir = tempdir().unwrap();
        let v = probe_volume();
        let bad = Volume::with_spacing(Array3::from_elem((5, 4, 3), 0.5), v.spacing, "bad").unwrap();
        let img = dir.path().join("img.nii.gz");
        let lbl = dir.path().join("lbl.nii.gz");
        save_volume(&v, &img).unwrap();
        save_volume(&bad, &lbl).unwrap();
        assert!(matches!(load_case(&img, Some(&lbl)), Err(Error::CorruptLabel(_))));
    }

    #[test]
    fn label_shape_mismatch_rejected() {
        let dir = tempdir().unwrap();
        let v = probe_volume();
        let l = LabelMap::with_spacing(Array3::zeros((4, 4, 3)), v.spacing, "probe").unwrap();
        let img = dir.path().join("img.nii.gz");
        let lbl = dir.path().join("lbl.nii.gz");
        save_volume(&v, &img).unwrap();
        save_label(&l, &lbl).unwrap();
        assert!(matches!(load_case(&img, Some(&lbl)), Err(Error::Alignment(_))));
        assert!(matches!(save_case(&v, Some(&l), dir.path()), Err(Error::Alignment(_))));
    }

    #[test]
    fn save_without_label_writes_only_image() {
        let dir = tempdir().unwrap();
        let v = probe_volume();
        let saved = save_case(&v, None, dir.path()).unwrap();
        assert!(saved.image_path.exists());
        assert!(saved.label_path.is_none());
        assert!(!dir.path().join("labels").exists());
    }
}
