//! File formats. JSON is emitted canonically (sorted keys, floats with 17
//! significant digits) so that write → read → write is byte-identical. Binary
//! files share one container layout:
//!
//! ```text
//! magic [4] | version u32 | header length u32 | JSON header | payload
//! ```
//!
//! with all integers and payload values little-endian.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::body_model::{Basis, ParametricBodyModel, PartLabel};
use crate::deform::SkinningVolume;
use crate::gaussian::{DecoderParams, UvFeaturePlane};
use crate::nn::{ConvShape, ConvStack};
use crate::render::Image;
use crate::{Error, Result, Vec3};

pub const PLANE_MAGIC: [u8; 4] = *b"E3GP";
pub const VOLUME_MAGIC: [u8; 4] = *b"E3SV";
pub const MODEL_MAGIC: [u8; 4] = *b"E3BM";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"E3CK";
pub const FORMAT_VERSION: u32 = 1;
/// Encoding exponent for 8-bit images: stored = linear^(1/2.2).
pub const PNG_GAMMA: f64 = 2.2;

// ---------------------------------------------------------------- JSON

/// Canonical JSON text: sorted object keys, no whitespace, floats printed
/// with 17 significant digits, integers verbatim, trailing newline.
pub fn to_canonical_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_canonical(&mut out, &v);
    out.push('\n');
    Ok(out)
}

fn write_canonical(out: &mut String, v: &Value) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                let _ = write!(out, "{i}");
            } else if let Some(u) = n.as_u64() {
                let _ = write!(out, "{u}");
            } else {
                let _ = write!(out, "{:.16e}", n.as_f64().unwrap_or(f64::NAN));
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("strings serialize")),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(out, item);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("strings serialize"));
                out.push(':');
                write_canonical(out, &map[k]);
            }
            out.push('}');
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_file(path, to_canonical_json(value)?.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

// ---------------------------------------------------------------- containers

fn encode_container(magic: [u8; 4], header: &Value, payload: &[u8]) -> Result<Vec<u8>> {
    let header = to_canonical_json(header)?;
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

fn decode_container(bytes: &[u8], magic: [u8; 4]) -> Result<(Value, &[u8])> {
    let name = String::from_utf8_lossy(&magic).into_owned();
    if bytes.len() < 12 || bytes[..4] != magic {
        return Err(Error::MalformedHeader(format!("not a {name} file (bad magic)")));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::MalformedHeader(format!("{name} version {version} is not supported")));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::MalformedHeader(format!("{name} header is truncated")))?;
    let header: Value = serde_json::from_slice(header)
        .map_err(|e| Error::MalformedHeader(format!("{name} header is not valid JSON: {e}")))?;
    Ok((header, &bytes[12 + len..]))
}

fn push_f32(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(4 * values.len());
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

fn take<'a>(payload: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if payload.len() < n {
        return Err(Error::DimensionMismatch(format!(
            "{what}: payload has {} bytes, {n} needed",
            payload.len()
        )));
    }
    let (head, tail) = payload.split_at(n);
    *payload = tail;
    Ok(head)
}

fn take_f32(payload: &mut &[u8], n: usize, what: &str) -> Result<Vec<f64>> {
    let raw = take(payload, 4 * n, what)?;
    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(what, "non-finite value"));
    }
    Ok(values)
}

fn expect_end(payload: &[u8], what: &str) -> Result<()> {
    if payload.is_empty() {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!("{what}: {} trailing payload bytes", payload.len())))
    }
}

fn header_usize(h: &Value, key: &str, what: &str) -> Result<usize> {
    h.get(key)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| Error::MalformedHeader(format!("{what} header lacks integer `{key}`")))
}

fn header_vec3(v: Option<&Value>, what: &str) -> Result<Vec3> {
    let arr = v
        .and_then(Value::as_array)
        .filter(|a| a.len() == 3)
        .ok_or_else(|| Error::MalformedHeader(format!("{what} needs a 3-vector")))?;
    let mut out = Vec3::zeros();
    for (i, x) in arr.iter().enumerate() {
        out[i] = x.as_f64().ok_or_else(|| Error::MalformedHeader(format!("{what} has a non-number")))?;
    }
    Ok(out)
}

/// Generic tensor file: JSON manifest plus concatenated `f32` values. The
/// manifest must be an object; a `values` count is added to it.
pub fn encode_checkpoint(manifest: &Value, data: &[f64]) -> Result<Vec<u8>> {
    let mut header = manifest.clone();
    header
        .as_object_mut()
        .ok_or_else(|| Error::InvalidArgument("checkpoint manifest must be a JSON object".into()))?
        .insert("values".into(), json!(data.len()));
    let mut payload = Vec::new();
    push_f32(&mut payload, data);
    encode_container(CHECKPOINT_MAGIC, &header, &payload)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Value, Vec<f64>)> {
    let (header, mut payload) = decode_container(bytes, CHECKPOINT_MAGIC)?;
    let n = header_usize(&header, "values", "checkpoint")?;
    let data = take_f32(&mut payload, n, "checkpoint")?;
    expect_end(payload, "checkpoint")?;
    Ok((header, data))
}

// ---------------------------------------------------------------- plane

pub fn encode_plane(plane: &UvFeaturePlane) -> Result<Vec<u8>> {
    plane.validate()?;
    let header = json!({
        "resolution": plane.resolution,
        "channels": plane.channels,
        "split_index": plane.split_index(),
    });
    let mut payload = Vec::new();
    push_f32(&mut payload, &plane.data);
    encode_container(PLANE_MAGIC, &header, &payload)
}

pub fn decode_plane(bytes: &[u8]) -> Result<UvFeaturePlane> {
    let (h, mut payload) = decode_container(bytes, PLANE_MAGIC)?;
    let resolution = header_usize(&h, "resolution", "plane")?;
    let channels = header_usize(&h, "channels", "plane")?;
    let split = header_usize(&h, "split_index", "plane")?;
    let mut plane = UvFeaturePlane::zeros(resolution, channels)?;
    if split != plane.split_index() {
        return Err(Error::MalformedHeader(format!(
            "plane split_index {split} must be half of {channels} channels"
        )));
    }
    plane.data = take_f32(&mut payload, plane.data.len(), "plane")?;
    expect_end(payload, "plane")?;
    Ok(plane)
}

pub fn save_plane(path: &Path, plane: &UvFeaturePlane) -> Result<()> {
    write_file(path, &encode_plane(plane)?)
}

pub fn load_plane(path: &Path) -> Result<UvFeaturePlane> {
    decode_plane(&read_file(path)?).map_err(|e| in_file(path, e))
}

/// Attaches the file name to format errors.
fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::MalformedHeader(m) => Error::MalformedHeader(format!("{}: {m}", path.display())),
        Error::DimensionMismatch(m) => Error::DimensionMismatch(format!("{}: {m}", path.display())),
        Error::Format { context, message } => Error::Format {
            context: format!("{} ({context})", path.display()),
            message,
        },
        other => other,
    }
}

// ---------------------------------------------------------------- volume

pub fn encode_volume(volume: &SkinningVolume) -> Result<Vec<u8>> {
    let header = json!({
        "resolution": volume.resolution,
        "bounds": { "min": volume.min.as_slice(), "max": volume.max.as_slice() },
        "n_joints": volume.n_joints,
        "k": volume.k,
    });
    let mut payload = Vec::new();
    push_f32(&mut payload, &volume.weights);
    encode_container(VOLUME_MAGIC, &header, &payload)
}

pub fn decode_volume(bytes: &[u8]) -> Result<SkinningVolume> {
    let (h, mut payload) = decode_container(bytes, VOLUME_MAGIC)?;
    let resolution = header_usize(&h, "resolution", "volume")?;
    let n_joints = header_usize(&h, "n_joints", "volume")?;
    let k = header_usize(&h, "k", "volume")?;
    let bounds = h.get("bounds");
    let min = header_vec3(bounds.and_then(|b| b.get("min")), "volume bounds.min")?;
    let max = header_vec3(bounds.and_then(|b| b.get("max")), "volume bounds.max")?;
    let n = resolution
        .checked_pow(3)
        .and_then(|v| v.checked_mul(n_joints))
        .ok_or_else(|| Error::MalformedHeader("volume dimensions overflow".into()))?;
    let weights = take_f32(&mut payload, n, "volume")?;
    expect_end(payload, "volume")?;
    let volume = SkinningVolume {
        resolution,
        min,
        max,
        n_joints,
        k,
        weights,
    };
    volume.validate()?;
    Ok(volume)
}

pub fn save_volume(path: &Path, volume: &SkinningVolume) -> Result<()> {
    write_file(path, &encode_volume(volume)?)
}

pub fn load_volume(path: &Path) -> Result<SkinningVolume> {
    decode_volume(&read_file(path)?).map_err(|e| in_file(path, e))
}

// ---------------------------------------------------------------- decoders

fn stack_shapes(stack: &ConvStack) -> Value {
    Value::Array(
        stack
            .layers
            .iter()
            .map(|l| json!([l.in_channels, l.out_channels, l.kernel]))
            .collect(),
    )
}

fn parse_shapes(v: Option<&Value>, what: &str) -> Result<Vec<ConvShape>> {
    let bad = || Error::MalformedHeader(format!("decoder header: `{what}` must be a list of [in, out, kernel]"));
    v.and_then(Value::as_array)
        .ok_or_else(bad)?
        .iter()
        .map(|l| {
            let a = l.as_array().filter(|a| a.len() == 3).ok_or_else(bad)?;
            let d: Vec<usize> = a.iter().map(|x| x.as_u64().map(|x| x as usize)).collect::<Option<_>>().ok_or_else(bad)?;
            Ok(ConvShape::new(d[0], d[1], d[2]))
        })
        .collect()
}

pub fn encode_decoders(params: &DecoderParams) -> Result<Vec<u8>> {
    let header = json!({
        "geometry": stack_shapes(&params.geometry),
        "appearance": stack_shapes(&params.appearance),
    });
    let mut payload = Vec::new();
    push_f32(&mut payload, &params.geometry.params);
    push_f32(&mut payload, &params.appearance.params);
    encode_container(CHECKPOINT_MAGIC, &header, &payload)
}

pub fn decode_decoders(bytes: &[u8]) -> Result<DecoderParams> {
    let (h, mut payload) = decode_container(bytes, CHECKPOINT_MAGIC)?;
    let mut geometry = ConvStack::zeros(parse_shapes(h.get("geometry"), "geometry")?)?;
    let mut appearance = ConvStack::zeros(parse_shapes(h.get("appearance"), "appearance")?)?;
    geometry.params = take_f32(&mut payload, geometry.params.len(), "geometry decoder")?;
    appearance.params = take_f32(&mut payload, appearance.params.len(), "appearance decoder")?;
    expect_end(payload, "decoders")?;
    let params = DecoderParams { geometry, appearance };
    params.validate()?;
    Ok(params)
}

pub fn save_decoders(path: &Path, params: &DecoderParams) -> Result<()> {
    write_file(path, &encode_decoders(params)?)
}

pub fn load_decoders(path: &Path) -> Result<DecoderParams> {
    decode_decoders(&read_file(path)?).map_err(|e| in_file(path, e))
}

// ---------------------------------------------------------------- body model

const MODEL_FIELDS: [(&str, &str); 10] = [
    ("vertices", "f32"),
    ("faces", "u32"),
    ("joints_rest", "f32"),
    ("skinning_weights", "f32"),
    ("shape_basis", "f32"),
    ("pose_basis", "f32"),
    ("expr_basis", "f32"),
    ("joint_regressor", "f32"),
    ("uv_coords", "f32"),
    ("part_labels", "u8"),
];

fn dtype_size(dtype: &str) -> usize {
    match dtype {
        "u8" => 1,
        _ => 4,
    }
}

fn model_lengths(nv: usize, nf: usize, nj: usize, ns: usize, np: usize, ne: usize) -> [usize; 10] {
    [nv * 3, nf * 3, nj * 3, nv * nj, nv * 3 * ns, nv * 3 * np, nv * 3 * ne, nj * nv, nf * 6, nv]
}

pub fn encode_model(model: &ParametricBodyModel) -> Result<Vec<u8>> {
    model.validate()?;
    encode_model_unchecked(model)
}

fn encode_model_unchecked(model: &ParametricBodyModel) -> Result<Vec<u8>> {
    let (nv, nf, nj) = (model.n_vertices(), model.faces.len(), model.n_joints());
    let (ns, np, ne) = (model.shape_basis.n_coeffs, model.pose_basis.n_coeffs, model.expr_basis.n_coeffs);
    let lens = model_lengths(nv, nf, nj, ns, np, ne);
    let mut fields = Vec::new();
    let mut offset = 0;
    for ((name, dtype), len) in MODEL_FIELDS.iter().zip(lens) {
        fields.push(json!({ "name": name, "dtype": dtype, "offset": offset, "len": len }));
        offset += len * dtype_size(dtype);
    }
    let header = json!({
        "endianness": "LE",
        "counts": {
            "vertices": nv, "faces": nf, "joints": nj,
            "shape": ns, "pose": np, "expression": ne,
        },
        "joint_names": model.joint_names,
        "parents": model.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect::<Vec<_>>(),
        "fields": fields,
    });
    let flat3 = |v: &[Vec3]| v.iter().flat_map(|p| [p.x, p.y, p.z]).collect::<Vec<f64>>();
    let mut payload = Vec::with_capacity(offset);
    push_f32(&mut payload, &flat3(&model.vertices));
    for f in &model.faces {
        for i in f {
            payload.extend_from_slice(&i.to_le_bytes());
        }
    }
    push_f32(&mut payload, &flat3(&model.joints_rest));
    push_f32(&mut payload, &model.skinning_weights);
    push_f32(&mut payload, &model.shape_basis.data);
    push_f32(&mut payload, &model.pose_basis.data);
    push_f32(&mut payload, &model.expr_basis.data);
    push_f32(&mut payload, &model.joint_regressor);
    push_f32(&mut payload, &model.uv_coords.iter().flatten().flatten().copied().collect::<Vec<_>>());
    payload.extend(model.part_labels.iter().map(|l| *l as u8));
    encode_container(MODEL_MAGIC, &header, &payload)
}

pub fn decode_model(bytes: &[u8]) -> Result<ParametricBodyModel> {
    let (h, payload) = decode_container(bytes, MODEL_MAGIC)?;
    if h.get("endianness").and_then(Value::as_str) != Some("LE") {
        return Err(Error::MalformedHeader("model endianness tag must be \"LE\"".into()));
    }
    let counts = h.get("counts").ok_or_else(|| Error::MalformedHeader("model header lacks `counts`".into()))?;
    let c = |k: &str| header_usize(counts, k, "model counts");
    let (nv, nf, nj) = (c("vertices")?, c("faces")?, c("joints")?);
    let (ns, np, ne) = (c("shape")?, c("pose")?, c("expression")?);
    let joint_names: Vec<String> = h
        .get("joint_names")
        .cloned()
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| Error::MalformedHeader(format!("joint_names: {e}")))?
        .ok_or_else(|| Error::MalformedHeader("model header lacks `joint_names`".into()))?;
    let parents: Vec<i64> = h
        .get("parents")
        .cloned()
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| Error::MalformedHeader(format!("parents: {e}")))?
        .ok_or_else(|| Error::MalformedHeader("model header lacks `parents`".into()))?;
    if joint_names.len() != nj || parents.len() != nj {
        return Err(Error::DimensionMismatch(format!(
            "{} joint names and {} parents for {nj} joints",
            joint_names.len(),
            parents.len()
        )));
    }
    let parents = parents
        .into_iter()
        .map(|p| match p {
            -1 => Ok(None),
            p if p >= 0 && (p as usize) < nj => Ok(Some(p as usize)),
            p => Err(Error::InvalidModel(format!("parent index {p} out of range"))),
        })
        .collect::<Result<Vec<_>>>()?;

    let fields = h
        .get("fields")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::MalformedHeader("model header lacks `fields`".into()))?;
    if fields.len() != MODEL_FIELDS.len() {
        return Err(Error::MalformedHeader(format!("model declares {} fields, expected {}", fields.len(), MODEL_FIELDS.len())));
    }
    let lens = model_lengths(nv, nf, nj, ns, np, ne);
    let mut offset = 0;
    for ((field, (name, dtype)), len) in fields.iter().zip(MODEL_FIELDS).zip(lens) {
        let got_name = field.get("name").and_then(Value::as_str);
        let got_dtype = field.get("dtype").and_then(Value::as_str);
        if got_name != Some(name) || got_dtype != Some(dtype) {
            return Err(Error::MalformedHeader(format!("expected field `{name}` ({dtype}) in declared order")));
        }
        let got_len = header_usize(field, "len", name)?;
        let got_off = header_usize(field, "offset", name)?;
        if got_len != len || got_off != offset {
            return Err(Error::DimensionMismatch(format!(
                "field `{name}` declares {got_len} values at byte {got_off}, counts imply {len} at {offset}"
            )));
        }
        offset += len * dtype_size(dtype);
    }
    if payload.len() != offset {
        return Err(Error::DimensionMismatch(format!("model payload is {} bytes, header implies {offset}", payload.len())));
    }

    let mut p = payload;
    let vec3s = |v: Vec<f64>| v.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect::<Vec<_>>();
    let vertices = vec3s(take_f32(&mut p, lens[0], "vertices")?);
    let faces: Vec<[u32; 3]> = take(&mut p, 4 * lens[1], "faces")?
        .chunks_exact(12)
        .map(|c| std::array::from_fn(|i| u32::from_le_bytes(c[4 * i..4 * i + 4].try_into().expect("4 bytes"))))
        .collect();
    let joints_rest = vec3s(take_f32(&mut p, lens[2], "joints_rest")?);
    let skinning_weights = take_f32(&mut p, lens[3], "skinning_weights")?;
    let basis = |data: Vec<f64>, n_coeffs: usize| Basis { n_coeffs, data };
    let shape_basis = basis(take_f32(&mut p, lens[4], "shape_basis")?, ns);
    let pose_basis = basis(take_f32(&mut p, lens[5], "pose_basis")?, np);
    let expr_basis = basis(take_f32(&mut p, lens[6], "expr_basis")?, ne);
    let joint_regressor = take_f32(&mut p, lens[7], "joint_regressor")?;
    let uv_coords = take_f32(&mut p, lens[8], "uv_coords")?
        .chunks_exact(6)
        .map(|c| [[c[0], c[1]], [c[2], c[3]], [c[4], c[5]]])
        .collect();
    let part_labels = take(&mut p, lens[9], "part_labels")?
        .iter()
        .map(|&b| PartLabel::from_u8(b).ok_or_else(|| Error::InvalidModel(format!("unknown part label {b}"))))
        .collect::<Result<Vec<_>>>()?;

    let model = ParametricBodyModel {
        vertices,
        faces,
        joint_names,
        joints_rest,
        parents,
        skinning_weights,
        shape_basis,
        pose_basis,
        expr_basis,
        joint_regressor,
        uv_coords,
        part_labels,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model(path: &Path, model: &ParametricBodyModel) -> Result<()> {
    write_file(path, &encode_model(model)?)
}

pub fn load_model(path: &Path) -> Result<ParametricBodyModel> {
    decode_model(&read_file(path)?).map_err(|e| in_file(path, e))
}

// ---------------------------------------------------------------- images

fn encode_channel(v: f64) -> u8 {
    (v.clamp(0.0, 1.0).powf(1.0 / PNG_GAMMA) * 255.0).round() as u8
}

fn decode_channel(b: u8) -> f64 {
    (b as f64 / 255.0).powf(PNG_GAMMA)
}

/// 8-bit PNG with the display gamma applied.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| encode_channel(v)).collect();
    save_rgb8(path, img.width, img.height, bytes)
}

/// Inverse of `save_png`: linear values in `[0,1]`.
pub fn load_png(path: &Path) -> Result<Image> {
    let rgb = open_image(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Image::from_data(w as usize, h as usize, rgb.into_raw().into_iter().map(decode_channel).collect())
}

/// Linear image quantised exactly as `save_png` would store it.
pub fn quantize_like_png(img: &Image) -> Image {
    Image {
        data: img.data.iter().map(|&v| decode_channel(encode_channel(v))).collect(),
        ..img.clone()
    }
}

fn save_rgb8(path: &Path, width: usize, height: usize, bytes: Vec<u8>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let buf = image::RgbImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::ShapeMismatch("image buffer size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| encode_error(path, e))
}

fn encode_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    let bytes = read_file(path)?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Single-channel 8-bit PNG as `(width, height, bytes)`.
pub fn load_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

pub fn save_gray_png(path: &Path, width: usize, height: usize, bytes: Vec<u8>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let buf = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::ShapeMismatch("mask buffer size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| encode_error(path, e))
}

/// `dir/name`, for building output paths.
pub fn join(dir: &Path, name: impl AsRef<Path>) -> PathBuf {
    dir.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::{generate_toy_model, subdivide, PoseShapeParams};
    use crate::deform::build_skinning_volume;
    use crate::gaussian::DecoderConfig;
    use crate::render::Camera;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn canonical_json_sorts_keys_and_fixes_float_format() {
        let v = json!({"b": 1.5, "a": [1, -2, 0.1], "c": {"z": true, "y": null}});
        let text = to_canonical_json(&v).unwrap();
        assert_eq!(
            text,
            "{\"a\":[1,-2,1.0000000000000001e-1],\"b\":1.5000000000000000e0,\"c\":{\"y\":null,\"z\":true}}\n"
        );
        let back: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(to_canonical_json(&back).unwrap(), text);
    }

    #[test]
    fn canonical_floats_round_trip_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let x: f64 = f64::from_bits(rng.gen::<u64>());
            if !x.is_finite() {
                continue;
            }
            let text = to_canonical_json(&x).unwrap();
            let y: f64 = serde_json::from_str(&text).unwrap();
            assert_eq!(x.to_bits(), y.to_bits(), "{text}");
        }
    }

    #[test]
    fn pose_and_camera_json_round_trip_byte_identical() {
        let model = generate_toy_model(0, 1);
        let mut params = PoseShapeParams::zeros(&model);
        params.theta[7] = 0.3;
        params.beta[0] = -1.25;
        params.translation = [0.1, 0.0, -2.0];
        let text = to_canonical_json(&params).unwrap();
        let back: PoseShapeParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back, params);
        assert_eq!(to_canonical_json(&back).unwrap(), text);

        let cam = Camera::look_at(Vec3::new(0.3, 1.0, 3.0), Vec3::new(0.0, 1.0, 0.0), Vec3::y(), 200.0, 64, 48).unwrap();
        let text = to_canonical_json(&cam).unwrap();
        let back: Camera = serde_json::from_str(&text).unwrap();
        assert_eq!(to_canonical_json(&back).unwrap(), text);
        assert!((back.rotation - cam.rotation).abs().max() == 0.0);
    }

    #[test]
    fn plane_round_trips_and_rejects_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plane = UvFeaturePlane::random(8, 6, 0.5, &mut rng).unwrap();
        let bytes = encode_plane(&plane).unwrap();
        let back = decode_plane(&bytes).unwrap();
        assert_eq!(encode_plane(&back).unwrap(), bytes);
        for (a, b) in plane.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 1e-7 * a.abs().max(1.0));
        }

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_plane(&bad), Err(Error::MalformedHeader(_))));
        assert!(matches!(decode_plane(&bytes[..bytes.len() - 4]), Err(Error::DimensionMismatch(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_plane(&extra), Err(Error::DimensionMismatch(_))));
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_plane(&nan), Err(Error::Format { .. })));
    }

    #[test]
    fn volume_and_decoders_round_trip_byte_identical() {
        let mesh = subdivide(&generate_toy_model(0, 1), 0);
        let volume = build_skinning_volume(&mesh, 4, 8).unwrap();
        let bytes = encode_volume(&volume).unwrap();
        let back = decode_volume(&bytes).unwrap();
        assert_eq!(back.resolution, 8);
        assert_eq!(encode_volume(&back).unwrap(), bytes);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dec = DecoderParams::init(16, &DecoderConfig::default(), &mut rng).unwrap();
        let bytes = encode_decoders(&dec).unwrap();
        let back = decode_decoders(&bytes).unwrap();
        assert_eq!(back.geometry.layers, dec.geometry.layers);
        assert_eq!(encode_decoders(&back).unwrap(), bytes);
    }

    #[test]
    fn checkpoint_carries_manifest_and_values() {
        let data = vec![1.0, -2.5, 3.25];
        let bytes = encode_checkpoint(&json!({"kind": "test"}), &data).unwrap();
        let (header, back) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, data);
        assert_eq!(header["kind"], "test");
        assert!(encode_checkpoint(&json!([1]), &data).is_err());
    }

    #[test]
    fn model_round_trips_byte_identical() {
        let model = generate_toy_model(4, 1);
        let bytes = encode_model(&model).unwrap();
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back.faces, model.faces);
        assert_eq!(back.parents, model.parents);
        assert_eq!(back.part_labels, model.part_labels);
        assert_eq!(encode_model(&back).unwrap(), bytes);
    }

    #[test]
    fn model_loader_reports_distinct_diagnostics() {
        let model = generate_toy_model(4, 1);
        let mut bad = model.clone();
        let nj = bad.n_joints();
        for w in &mut bad.skinning_weights[5 * nj..6 * nj] {
            *w *= 0.8;
        }
        let bytes = encode_model_unchecked(&bad).unwrap();
        match decode_model(&bytes) {
            Err(Error::WeightNotNormalized { row, sum }) => {
                assert_eq!(row, 5);
                assert!((sum - 0.8).abs() < 1e-6);
            }
            other => panic!("expected normalization error, got {other:?}"),
        }

        let good = encode_model(&model).unwrap();
        assert!(matches!(decode_model(&good[..good.len() - 1]), Err(Error::DimensionMismatch(_))));
        let mut header_broken = good.clone();
        header_broken[12] = b'#';
        assert!(matches!(decode_model(&header_broken), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn png_round_trip_is_stable_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = (0..7 * 5 * 3).map(|_| rng.gen::<f64>()).collect();
        let img = Image::from_data(7, 5, data).unwrap();
        let a = dir.path().join("a.png");
        save_png(&a, &img).unwrap();
        let back = load_png(&a).unwrap();
        assert_eq!(back, quantize_like_png(&img));
        let b = dir.path().join("b.png");
        save_png(&b, &back).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert!(matches!(load_png(&dir.path().join("missing.png")), Err(Error::MissingFile(_))));
        std::fs::write(dir.path().join("junk.png"), b"not a png").unwrap();
        assert!(matches!(load_png(&dir.path().join("junk.png")), Err(Error::Decode { .. })));
    }

    #[test]
    fn gamma_encoding_matches_oracle() {
        assert_eq!(encode_channel(0.0), 0);
        assert_eq!(encode_channel(1.0), 255);
        assert_eq!(encode_channel(0.5), (0.5f64.powf(1.0 / 2.2) * 255.0).round() as u8);
        assert_eq!(encode_channel(0.5), 186);
        for b in 0..=255u8 {
            assert_eq!(encode_channel(decode_channel(b)), b);
        }
    }
}
