//! Frame directories (binary PPM plus a JSON manifest) and the checkpoint
//! format.
//!
//! Checkpoint layout, little-endian: magic `LGCV`, `u32` version, `u32`
//! tensor count, then per tensor a `u16` name length, the UTF-8 name, a `u8`
//! rank, `rank` `u32` dims and the `f32` values.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LgcModel, ModelConfig, ParamStore};
use crate::numerics::Array;
use crate::training::{TrainState, TrainingConfig};

pub const MAGIC: &[u8; 4] = b"LGCV";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint (bad magic {found:?})")]
    BadMagic { path: PathBuf, found: Vec<u8> },
    #[error("{path}: unsupported checkpoint version {found} (expected {VERSION})")]
    Version { path: PathBuf, found: u32 },
    #[error("{path}: truncated while reading {what}")]
    Truncated { path: PathBuf, what: String },
    #[error("{path}: {bytes} unexpected trailing bytes")]
    TrailingBytes { path: PathBuf, bytes: usize },
    #[error("{path}: tensor name is not valid UTF-8")]
    BadName { path: PathBuf },
    #[error("checkpoint tensor {0:?} is not part of the model")]
    UnknownTensor(String),
    #[error("checkpoint lacks model tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?}: checkpoint shape {found:?}, model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {name:?} cannot be stored: {reason}")]
    Unstorable { name: String, reason: String },
    #[error("{path}: malformed PPM: {reason}")]
    BadPpm { path: PathBuf, reason: String },
    #[error("{path}: malformed manifest: {reason}")]
    BadManifest { path: PathBuf, reason: String },
    #[error("{path}: {reason}")]
    ManifestMismatch { path: PathBuf, reason: String },
    #[error("fragment must be [frames, 3, H, W] with values in [-1, 1]; {0}")]
    BadFragment(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serializes named tensors in the order given.
pub fn encode_tensors<'a>(
    tensors: impl IntoIterator<Item = (&'a str, &'a Array<f32>)>,
) -> Result<Vec<u8>, IoError> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let unstorable = |name: &str, reason: &str| IoError::Unstorable {
        name: name.to_string(),
        reason: reason.to_string(),
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| unstorable("*", "too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, a) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| unstorable(name, "name too long"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(a.shape().len()).map_err(|_| unstorable(name, "rank above 255"))?;
        out.push(rank);
        for &d in a.shape() {
            let d = u32::try_from(d).map_err(|_| unstorable(name, "dimension above u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in a.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: impl FnOnce() -> String) -> Result<&'a [u8], IoError> {
        if self.bytes.len() - self.pos < n {
            return Err(IoError::Truncated {
                path: self.path.to_path_buf(),
                what: what(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: impl FnOnce() -> String) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint byte stream; `path` only labels diagnostics.
pub fn decode_tensors(bytes: &[u8], path: &Path) -> Result<Vec<(String, Array<f32>)>, IoError> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic = r.take(4, || "magic".into()).map_err(|_| IoError::BadMagic {
        path: path.to_path_buf(),
        found: bytes[..bytes.len().min(4)].to_vec(),
    })?;
    if magic != MAGIC {
        return Err(IoError::BadMagic {
            path: path.to_path_buf(),
            found: magic.to_vec(),
        });
    }
    let version = r.u32(|| "version".into())?;
    if version != VERSION {
        return Err(IoError::Version {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let count = r.u32(|| "tensor count".into())?;
    let mut out = Vec::new();
    for i in 0..count {
        let header = || format!("header of tensor #{i}");
        let len = u16::from_le_bytes(r.take(2, header)?.try_into().unwrap()) as usize;
        let name = r.take(len, header)?;
        let name = std::str::from_utf8(name)
            .map_err(|_| IoError::BadName {
                path: path.to_path_buf(),
                })?
            .to_string();
        let rank = r.take(1, || format!("rank of tensor {name:?}"))?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(|| format!("shape of tensor {name:?}"))? as usize);
        }
        let elems = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| IoError::Truncated {
                path: path.to_path_buf(),
                what: format!("data of tensor {name:?} (shape overflows)"),
            })?;
        let raw = r.take(elems, || format!("data of tensor {name:?}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let a = Array::from_vec(shape, data).expect("length matches shape");
        out.push((name, a));
    }
    if r.pos != bytes.len() {
        return Err(IoError::TrailingBytes {
            path: path.to_path_buf(),
            bytes: bytes.len() - r.pos,
        });
    }
    Ok(out)
}

pub fn write_tensors<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Array<f32>)>,
) -> Result<(), IoError> {
    let bytes = encode_tensors(tensors)?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Array<f32>)>, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_tensors(&bytes, path)
}

/// Writes every parameter of the store in registration order.
pub fn save_checkpoint(params: &ParamStore<f32>, path: &Path) -> Result<(), IoError> {
    write_tensors(path, params.iter().map(|(_, n, a)| (n, a)))
}

/// Replaces `store`'s values with the checkpoint's. Names and shapes must
/// agree exactly in both directions.
pub fn assign_tensors(
    store: &mut ParamStore<f32>,
    tensors: Vec<(String, Array<f32>)>,
) -> Result<(), IoError> {
    let mut seen = vec![false; store.len()];
    let mut staged = Vec::with_capacity(tensors.len());
    for (name, a) in tensors {
        let id = store.id(&name).ok_or_else(|| IoError::UnknownTensor(name.clone()))?;
        let expected = store.get(id).shape();
        if a.shape() != expected {
            return Err(IoError::ShapeMismatch {
                expected: expected.to_vec(),
                found: a.shape().to_vec(),
                name,
            });
        }
        seen[id.index()] = true;
        staged.push((id, a));
    }
    if let Some(missing) = store.ids().find(|id| !seen[id.index()]) {
        return Err(IoError::MissingTensor(store.name(missing).to_string()));
    }
    for (id, a) in staged {
        *store.get_mut(id) = a;
    }
    Ok(())
}

pub fn load_checkpoint(model: &mut LgcModel<f32>, path: &Path) -> Result<(), IoError> {
    let tensors = read_tensors(path)?;
    assign_tensors(model.params_mut(), tensors)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: String,
}

/// `[−1, 1]` → byte, rounding half up.
pub fn quantize(v: f32) -> u8 {
    let scaled = (v.clamp(-1.0, 1.0) as f64 + 1.0) / 2.0 * 255.0;
    (scaled + 0.5).floor().min(255.0) as u8
}

pub fn dequantize(b: u8) -> f32 {
    (b as f64 / 255.0 * 2.0 - 1.0) as f32
}

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:04}.ppm")
}

/// Encodes one `[3, H, W]` plane-major frame as binary PPM.
pub fn encode_ppm(frame: &[f32], height: usize, width: usize) -> Vec<u8> {
    let plane = height * width;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            out.push(quantize(frame[c * plane + p]));
        }
    }
    out
}

/// Decodes a binary PPM into a plane-major `[3, H, W]` frame.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f32>), IoError> {
    let bad = |reason: &str| IoError::BadPpm {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("incomplete header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("expected P6 magic"));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad {what}")));
    let width = num(fields[1], "width")?;
    let height = num(fields[2], "height")?;
    if num(fields[3], "maxval")? != 255 {
        return Err(bad("maxval must be 255"));
    }
    if width == 0 || height == 0 {
        return Err(bad("empty image"));
    }
    // exactly one whitespace byte separates the header from the pixels
    pos += 1;
    let plane = width * height;
    let pixels = bytes.get(pos..).unwrap_or(&[]);
    if pixels.len() != 3 * plane {
        return Err(bad(&format!(
            "expected {} pixel bytes, found {}",
            3 * plane,
            pixels.len()
        )));
    }
    let mut frame = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            frame[c * plane + p] = dequantize(pixels[3 * p + c]);
        }
    }
    Ok((height, width, frame))
}

/// Writes `[L, 3, H, W]` as `frame_0000.ppm …` plus `manifest.json`.
pub fn save_frames(fragment: &Array<f32>, dir: &Path) -> Result<(), IoError> {
    let &[frames, channels, height, width] = fragment.shape() else {
        return Err(IoError::BadFragment(format!("got shape {:?}", fragment.shape())));
    };
    if channels != 3 {
        return Err(IoError::BadFragment(format!("got {channels} channels")));
    }
    if !fragment.is_finite() {
        return Err(IoError::BadFragment("values are not finite".into()));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let len = 3 * height * width;
    for (i, frame) in fragment.data().chunks(len).enumerate() {
        let path = dir.join(frame_name(i));
        fs::write(&path, encode_ppm(frame, height, width)).map_err(io_err(&path))?;
    }
    let manifest = Manifest {
        frames,
        height,
        width,
        channels: "rgb".into(),
    };
    let path = dir.join(MANIFEST);
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &manifest).map_err(|e| IoError::BadManifest {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    w.write_all(b"\n").map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, IoError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| IoError::BadManifest {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if m.channels != "rgb" {
        return Err(IoError::BadManifest {
            path,
            reason: format!("unsupported channel order {:?}", m.channels),
        });
    }
    Ok(m)
}

/// Reads a frame directory back as `[L, 3, H, W]`.
pub fn load_frames(dir: &Path) -> Result<Array<f32>, IoError> {
    let m = read_manifest(dir)?;
    let mut data = Vec::with_capacity(m.frames * 3 * m.height * m.width);
    for i in 0..m.frames {
        let path = dir.join(frame_name(i));
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let (h, w, frame) = decode_ppm(&bytes, &path)?;
        if (h, w) != (m.height, m.width) {
            return Err(IoError::ManifestMismatch {
                path,
                reason: format!("frame is {w}x{h}, manifest says {}x{}", m.width, m.height),
            });
        }
        data.extend(frame);
    }
    let extra = dir.join(frame_name(m.frames));
    if extra.exists() {
        return Err(IoError::ManifestMismatch {
            path: extra,
            reason: format!("manifest lists {} frames but more are present", m.frames),
        });
    }
    Ok(Array::from_vec([m.frames, 3, m.height, m.width], data).expect("length matches shape"))
}

/// Every subdirectory of `root` holding a manifest, sorted by name.
pub fn clip_dirs(root: &Path) -> Result<Vec<PathBuf>, IoError> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let path = entry.path();
        if path.join(MANIFEST).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Everything besides the parameters needed to resume a run; stored as
/// JSON next to the checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub global_disabled: bool,
    pub step: usize,
    pub adam_updates: u64,
    /// Position of the training stream, as a decimal string (it is a u128).
    pub rng_word_pos: String,
}

pub fn meta_path(ckpt: &Path) -> PathBuf {
    suffixed(ckpt, ".json")
}

pub fn adam_path(ckpt: &Path) -> PathBuf {
    suffixed(ckpt, ".adam")
}

pub fn loss_log_path(ckpt: &Path) -> PathBuf {
    suffixed(ckpt, ".loss.tsv")
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn read_meta(ckpt: &Path) -> Result<RunMeta, IoError> {
    let path = meta_path(ckpt);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| IoError::BadManifest {
        path,
        reason: e.to_string(),
    })
}

/// Writes the parameters, the optimizer moments and the run metadata.
pub fn save_train_state(state: &TrainState<f32>, ckpt: &Path) -> Result<(), IoError> {
    let params = state.model.params();
    save_checkpoint(params, ckpt)?;
    let mut names = Vec::with_capacity(2 * params.len());
    for (id, name, _) in params.iter() {
        names.push((format!("m.{name}"), &state.adam.first[id.index()]));
        names.push((format!("v.{name}"), &state.adam.second[id.index()]));
    }
    write_tensors(&adam_path(ckpt), names.iter().map(|(n, a)| (n.as_str(), *a)))?;
    let meta = RunMeta {
        format_version: VERSION,
        model: state.model.config().clone(),
        training: state.config.clone(),
        global_disabled: state.model.global_disabled(),
        step: state.step,
        adam_updates: state.adam.updates,
        rng_word_pos: state.rng.get_word_pos().to_string(),
    };
    let path = meta_path(ckpt);
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

/// Model described by the checkpoint's metadata, with its parameters loaded.
pub fn load_model(ckpt: &Path) -> Result<LgcModel<f32>, IoError> {
    let meta = read_meta(ckpt)?;
    let mut model = LgcModel::new(meta.model.clone(), 0).map_err(|e| IoError::BadManifest {
        path: meta_path(ckpt),
        reason: e.to_string(),
    })?;
    if meta.global_disabled {
        model.disable_global_context();
    }
    load_checkpoint(&mut model, ckpt)?;
    Ok(model)
}

/// Restores a run saved by [`save_train_state`], continuing under `training`
/// (which may only differ in `max_steps`).
pub fn load_train_state(
    ckpt: &Path,
    training: TrainingConfig,
) -> Result<TrainState<f32>, IoError> {
    let meta = read_meta(ckpt)?;
    let incompatible = |reason: String| IoError::ManifestMismatch {
        path: meta_path(ckpt),
        reason,
    };
    let comparable = TrainingConfig {
        max_steps: meta.training.max_steps,
        ..training.clone()
    };
    if comparable != meta.training {
        return Err(incompatible(format!(
            "checkpoint was trained with {:?}, cannot resume with {:?}",
            meta.training, training
        )));
    }
    let model = load_model(ckpt)?;
    let mut state = TrainState::new(model, training).map_err(|e| incompatible(e.to_string()))?;
    let mut moments = read_tensors(&adam_path(ckpt))?.into_iter();
    let ids: Vec<_> = state.model.params().ids().collect();
    for id in ids {
        let name = state.model.params().name(id).to_string();
        for (prefix, slot) in [("m", &mut state.adam.first), ("v", &mut state.adam.second)] {
            let expected = format!("{prefix}.{name}");
            match moments.next() {
                Some((n, a)) if n == expected && a.shape() == slot[id.index()].shape() => {
                    slot[id.index()] = a;
                }
                Some((n, _)) if n != expected => return Err(IoError::UnknownTensor(n)),
                Some((n, a)) => {
                    return Err(IoError::ShapeMismatch {
                        name: n,
                        expected: slot[id.index()].shape().to_vec(),
                        found: a.shape().to_vec(),
                    })
                }
                None => return Err(IoError::MissingTensor(expected)),
            }
        }
    }
    if let Some((n, _)) = moments.next() {
        return Err(IoError::UnknownTensor(n));
    }
    state.step = meta.step;
    state.adam.updates = meta.adam_updates;
    let pos: u128 = meta
        .rng_word_pos
        .parse()
        .map_err(|_| incompatible(format!("bad stream position {:?}", meta.rng_word_pos)))?;
    state.rng.set_word_pos(pos);
    Ok(state)
}
