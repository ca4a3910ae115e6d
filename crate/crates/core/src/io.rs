//! File formats: PFM float maps, 8-bit PNG, the FLO4 flow container and the
//! GF4D field checkpoint. Every writer goes through a temporary file that is
//! renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::buffer::{FlowMap, Image, Mask};
use crate::error::{io_err, Error, Result};
use crate::field::{
    ControlPoint, DeformationNet, Gaussian3D, GaussianField, NetShape, ParamGroup, Timeline,
};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GF4D";
pub const CHECKPOINT_VERSION: u32 = 1;
const TRAINER_TAG: &[u8; 4] = b"TRST";
pub const FLOW_MAGIC: &[u8; 4] = b"FLO4";

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn format(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Little-endian cursor over a byte slice.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| format("array too large"))?)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn counted_f32(&mut self, expect: Option<usize>, what: &str) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        if let Some(e) = expect {
            if n != e {
                return Err(format(format!("{what}: header says {n} values, expected {e}")));
            }
        }
        Ok(self.f32s(n)?.into_iter().map(f64::from).collect())
    }

    fn counted_u32(&mut self, what: &str) -> Result<Vec<u32>> {
        let n = self.u32()? as usize;
        let b = self
            .take(n.checked_mul(4).ok_or_else(|| format(format!("{what}: array too large")))?)?;
        Ok(b.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn counted_f64(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        let b = self.take(n.checked_mul(8).ok_or_else(|| format("array too large"))?)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_counted_f32(out: &mut Vec<u8>, values: impl ExactSizeIterator<Item = f64>) {
    put_u32(out, values.len() as u32);
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn put_counted_u32(out: &mut Vec<u8>, values: &[u32]) {
    put_u32(out, values.len() as u32);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_counted_f64(out: &mut Vec<u8>, values: &[f64]) {
    put_u32(out, values.len() as u32);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Optimizer and schedule state stored after the field in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerSection {
    pub iteration: u64,
    pub stage: u32,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub counters: Vec<u64>,
    pub arrays: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub field: GaussianField,
    pub trainer: Option<TrainerSection>,
}

/// Serializes a field (and optional trainer state). Field values are stored
/// as `f32`; trainer arrays as `f64`.
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let f = &ck.field;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    for group in [
        ParamGroup::Position,
        ParamGroup::Orientation,
        ParamGroup::LogScale,
        ParamGroup::OpacityLogit,
        ParamGroup::Color,
    ] {
        put_counted_f32(&mut out, f.group_values(group).into_iter());
    }
    put_counted_f32(
        &mut out,
        f.control_points.iter().flat_map(|c| c.rest_position).collect::<Vec<_>>().into_iter(),
    );
    put_counted_f32(&mut out, f.group_values(ParamGroup::RbfLogRadius).into_iter());
    let knn: Vec<u32> = f.knn.iter().flat_map(|k| k.map(|v| v as u32)).collect();
    put_counted_u32(&mut out, &knn);
    put_counted_f32(&mut out, f.deformation.params().into_iter());
    let shape = f.deformation.shape();
    put_counted_u32(
        &mut out,
        &[
            f.gaussians.len() as u32,
            f.control_points.len() as u32,
            f.timeline.frames as u32,
            f.timeline.canonical as u32,
            shape.position_bands as u32,
            shape.time_bands as u32,
            shape.hidden_width as u32,
            shape.hidden_layers as u32,
        ],
    );
    if let Some(t) = &ck.trainer {
        out.extend_from_slice(TRAINER_TAG);
        out.extend_from_slice(&t.iteration.to_le_bytes());
        put_u32(&mut out, t.stage);
        out.extend_from_slice(&t.rng_seed.to_le_bytes());
        out.extend_from_slice(&t.rng_word_pos.to_le_bytes());
        put_u32(&mut out, t.counters.len() as u32);
        for c in &t.counters {
            out.extend_from_slice(&c.to_le_bytes());
        }
        put_u32(&mut out, t.arrays.len() as u32);
        for a in &t.arrays {
            put_counted_f64(&mut out, a);
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(format("not a GF4D checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let pos = r.counted_f32(None, "positions")?;
    if pos.len() % 3 != 0 {
        return Err(format("positions: count is not a multiple of 3"));
    }
    let n = pos.len() / 3;
    let orient = r.counted_f32(Some(4 * n), "orientations")?;
    let scale = r.counted_f32(Some(3 * n), "log_scales")?;
    let opacity = r.counted_f32(Some(n), "opacity_logits")?;
    let color = r.counted_f32(Some(3 * n), "colors")?;
    let rest = r.counted_f32(None, "control rest positions")?;
    if rest.len() % 3 != 0 {
        return Err(format("control rest positions: count is not a multiple of 3"));
    }
    let m = rest.len() / 3;
    let rbf = r.counted_f32(Some(m), "rbf_log_radii")?;
    let knn = r.counted_u32("knn")?;
    let net = r.counted_f32(None, "network")?;
    let meta = r.counted_u32("meta")?;
    if meta.len() != 8 {
        return Err(format("meta: expected 8 entries"));
    }
    if meta[0] as usize != n || meta[1] as usize != m {
        return Err(format("meta: Gaussian or control count disagrees with arrays"));
    }
    let expect_knn = if m > 0 { 3 * n } else { 0 };
    if knn.len() != expect_knn {
        return Err(format(format!("knn: {} entries, expected {expect_knn}", knn.len())));
    }
    if knn.iter().any(|&k| k as usize >= m) {
        return Err(format("knn: index out of range"));
    }
    let frames = meta[2] as usize;
    if frames == 0 || meta[3] as usize == 0 || meta[3] as usize > frames {
        return Err(format("meta: bad timeline"));
    }
    let shape = NetShape {
        position_bands: meta[4] as usize,
        time_bands: meta[5] as usize,
        hidden_width: meta[6] as usize,
        hidden_layers: meta[7] as usize,
    };
    if shape.hidden_width == 0 || shape.hidden_width > 4096 || shape.hidden_layers > 64 || shape.position_bands > 32 || shape.time_bands > 32 {
        return Err(format("meta: implausible network shape"));
    }
    let mut deformation = DeformationNet::new(&shape, 0);
    if deformation.param_count() != net.len() {
        return Err(format(format!(
            "network: {} values, shape implies {}",
            net.len(),
            deformation.param_count()
        )));
    }
    deformation.for_each_param_mut(|i, p| *p = net[i]);
    let gaussians = (0..n)
        .map(|i| Gaussian3D {
            position: [pos[3 * i], pos[3 * i + 1], pos[3 * i + 2]],
            orientation: [orient[4 * i], orient[4 * i + 1], orient[4 * i + 2], orient[4 * i + 3]],
            log_scale: [scale[3 * i], scale[3 * i + 1], scale[3 * i + 2]],
            opacity_logit: opacity[i],
            color: [color[3 * i], color[3 * i + 1], color[3 * i + 2]],
        })
        .collect();
    let control_points = (0..m)
        .map(|j| ControlPoint {
            rest_position: [rest[3 * j], rest[3 * j + 1], rest[3 * j + 2]],
            rbf_log_radius: rbf[j],
        })
        .collect();
    let knn = knn.chunks_exact(3).map(|c| [c[0] as usize, c[1] as usize, c[2] as usize]).collect();
    let mut timeline = Timeline::new(frames);
    timeline.canonical = meta[3] as usize;
    let field = GaussianField {
        gaussians,
        control_points,
        deformation,
        knn,
        timeline,
    };
    field.validate().map_err(|e| format(e.to_string()))?;

    let trainer = if r.done() {
        None
    } else {
        if r.take(4)? != TRAINER_TAG {
            return Err(format("unexpected trailing bytes"));
        }
        let iteration = r.u64()?;
        let stage = r.u32()?;
        let rng_seed = r.u64()?;
        let rng_word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let nc = r.u32()? as usize;
        let counters = (0..nc).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let na = r.u32()? as usize;
        let arrays = (0..na).map(|_| r.counted_f64()).collect::<Result<Vec<_>>>()?;
        if !r.done() {
            return Err(format("unexpected trailing bytes"));
        }
        Some(TrainerSection {
            iteration,
            stage,
            rng_seed,
            rng_word_pos,
            counters,
            arrays,
        })
    };
    Ok(Checkpoint { field, trainer })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    atomic_write(path, &encode_checkpoint(ck))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes)
}

/// PFM bytes for a 1- or 3-channel image (little-endian, rows bottom to top).
pub fn encode_pfm(img: &Image) -> Result<Vec<u8>> {
    let tag = match img.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::InvalidArgument(format!("PFM needs 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            for c in 0..img.channels {
                out.extend_from_slice(&(img.at(x, y, c) as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Image> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format("PFM: truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        t => return Err(format(format!("PFM: bad tag {t:?}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format("PFM: bad size"));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let scale: f64 = fields[3].parse().map_err(|_| format("PFM: bad scale"))?;
    let little = scale < 0.0;
    let need = w * h * channels * 4;
    if bytes.len() < pos + need {
        return Err(format("PFM: truncated data"));
    }
    let mut img = Image::zeros(w, h, channels);
    let mut i = pos;
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..channels {
                let b: [u8; 4] = bytes[i..i + 4].try_into().unwrap();
                let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
                img.set(x, y, c, v as f64);
                i += 4;
            }
        }
    }
    Ok(img)
}

pub fn write_pfm(img: &Image, path: &Path) -> Result<()> {
    atomic_write(path, &encode_pfm(img)?)
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    decode_pfm(&fs::read(path).map_err(io_err(path))?)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit PNG of a 1- or 3-channel image with values in `[0, 1]`.
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let data: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    let color = match img.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(Error::InvalidArgument(format!("PNG needs 1 or 3 channels, got {c}"))),
    };
    let mut out = Vec::new();
    image::ImageEncoder::write_image(
        image::codecs::png::PngEncoder::new(&mut out),
        &data,
        img.width as u32,
        img.height as u32,
        color,
    )?;
    Ok(out)
}

pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    atomic_write(path, &encode_png(img)?)
}

/// Reads a PNG as RGB or grayscale in `[0, 1]`, keeping its channel count.
pub fn read_png(path: &Path) -> Result<Image> {
    let dynimg = image::open(path)?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    Ok(match dynimg.color().channel_count() {
        1 | 2 => {
            let g = dynimg.to_luma8();
            Image {
                width: w,
                height: h,
                channels: 1,
                data: g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
            }
        }
        _ => {
            let g = dynimg.to_rgb8();
            Image {
                width: w,
                height: h,
                channels: 3,
                data: g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
            }
        }
    })
}

pub fn write_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    write_png(&mask.to_image(), path)
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = read_png(path)?;
    let (w, c) = (img.width, img.channels);
    Ok(Mask::from_fn(img.width, img.height, |x, y| img.data[(y * w + x) * c] > 0.5))
}

pub fn encode_flo4(flow: &FlowMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.data.len() * 9);
    out.extend_from_slice(FLOW_MAGIC);
    put_u32(&mut out, flow.width as u32);
    put_u32(&mut out, flow.height as u32);
    for f in &flow.data {
        out.extend_from_slice(&(f[0] as f32).to_le_bytes());
        out.extend_from_slice(&(f[1] as f32).to_le_bytes());
    }
    out.extend(flow.valid.iter().map(|&v| v as u8));
    out
}

pub fn decode_flo4(bytes: &[u8]) -> Result<FlowMap> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != FLOW_MAGIC {
        return Err(format("not a FLO4 flow file (bad magic)"));
    }
    let (w, h) = (r.u32()? as usize, r.u32()? as usize);
    let n = w.checked_mul(h).ok_or_else(|| format("FLO4: size overflow"))?;
    let vals = r.f32s(n.checked_mul(2).ok_or_else(|| format("FLO4: size overflow"))?)?;
    let valid = r.take(n)?.iter().map(|&b| b != 0).collect();
    if !r.done() {
        return Err(format("FLO4: trailing bytes"));
    }
    Ok(FlowMap {
        width: w,
        height: h,
        data: vals.chunks_exact(2).map(|c| [c[0] as f64, c[1] as f64]).collect(),
        valid,
    })
}

pub fn write_flo4(flow: &FlowMap, path: &Path) -> Result<()> {
    atomic_write(path, &encode_flo4(flow))
}

pub fn read_flo4(path: &Path) -> Result<FlowMap> {
    decode_flo4(&fs::read(path).map_err(io_err(path))?)
}

/// Flow as a 3-channel PFM: `(dx, dy, valid)`.
pub fn flow_to_image(flow: &FlowMap) -> Image {
    Image::from_fn(flow.width, flow.height, 3, |x, y, c| {
        let p = y * flow.width + x;
        match c {
            2 => flow.valid[p] as u8 as f64,
            _ => flow.data[p][c],
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::NetShape;
    use crate::math::QUAT_IDENTITY;

    fn small_field() -> GaussianField {
        let gaussians: Vec<_> = (0..12)
            .map(|i| Gaussian3D {
                position: [i as f64 * 0.1, (i % 3) as f64 * 0.2, -(i as f64) * 0.05],
                orientation: QUAT_IDENTITY,
                log_scale: [-2.0, -2.1, -2.2],
                opacity_logit: 0.3 * i as f64,
                color: [0.1, 0.5, 1.2],
            })
            .collect();
        let shape = NetShape {
            hidden_width: 8,
            hidden_layers: 2,
            ..Default::default()
        };
        let mut f = GaussianField::new_static(gaussians, Timeline::new(5), &shape, 4);
        f.attach_controls(5, 0).unwrap();
        f.round_to_f32();
        f
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let ck = Checkpoint {
            field: small_field(),
            trainer: Some(TrainerSection {
                iteration: 17,
                stage: 1,
                rng_seed: 99,
                rng_word_pos: 12345,
                counters: vec![3, 4],
                arrays: vec![vec![0.1, 1e-300], vec![]],
            }),
        };
        let bytes = encode_checkpoint(&ck);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let bytes = encode_checkpoint(&Checkpoint {
            field: small_field(),
            trainer: None,
        });
        for cut in [0, 3, 8, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn pfm_and_png_round_trip() {
        let img = Image::from_fn(5, 4, 3, |x, y, c| (x * 7 + y * 3 + c) as f64 * 0.25);
        let back = decode_pfm(&encode_pfm(&img).unwrap()).unwrap();
        assert_eq!(back, img);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let q = Image::from_fn(5, 4, 3, |x, y, c| ((x + y + c) % 5) as f64 / 4.0);
        write_png(&q, &p).unwrap();
        let r = read_png(&p).unwrap();
        for (a, b) in q.data.iter().zip(&r.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn flo4_round_trip() {
        let f = FlowMap::from_fn(6, 3, |x, y| (x != y).then_some([x as f64 * 0.5, -(y as f64)]));
        assert_eq!(decode_flo4(&encode_flo4(&f)).unwrap(), f);
        assert!(decode_flo4(b"FLO4\x01\0\0\0").is_err());
    }
}
