use std::path::{Path, PathBuf};

use super::{read_bytes, write_atomic};
use crate::attention::VideoFeatures;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::FeatureMap;

pub const FEATURE_MAGIC: &[u8; 4] = b"VFB1";
const HEADER_LEN: usize = 16;

pub fn feature_path(dir: impl AsRef<Path>, video_id: &str) -> PathBuf {
    dir.as_ref().join(format!("{video_id}.vfb"))
}

/// `VFB1`, then `R`, `C`, `T` as little-endian u32, then `T·R·C` little-endian
/// f32 in `(t, r, c)` row-major order.
pub fn encode_feature_frames(frames: &Tensor) -> Result<Vec<u8>> {
    let s = frames.shape();
    if s.len() != 3 {
        return Err(Error::dim("feature frames", s, &[]));
    }
    let (t, r, c) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * frames.len());
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [r, c, t] {
        let v = u32::try_from(v).map_err(|_| Error::Config(format!("extent {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &x in frames.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses a feature file into its `T × R × C` frame stack.
pub fn decode_feature_frames(bytes: &[u8], origin: &str) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            origin,
            format!("file is {} bytes, header needs 16", bytes.len()),
        ));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(
            format!("{origin}@0"),
            "bad magic, expected VFB1",
        ));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as u64;
    let (r, c, t) = (word(4), word(8), word(12));
    if r == 0 || c == 0 || t == 0 {
        return Err(Error::format(
            format!("{origin}@4"),
            format!("extents must be positive, got R={r} C={c} T={t}"),
        ));
    }
    let expected = t
        .checked_mul(r)
        .and_then(|x| x.checked_mul(c))
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| Error::format(format!("{origin}@4"), "payload size overflows"))?;
    let actual = (bytes.len() - HEADER_LEN) as u64;
    if actual != expected {
        return Err(Error::format(
            format!("{origin}@{HEADER_LEN}"),
            format!("payload is {actual} bytes, header implies {expected}"),
        ));
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::format(
            format!("{origin}@{}", HEADER_LEN + 4 * i),
            "non-finite feature value",
        ));
    }
    Tensor::new(vec![t as usize, r as usize, c as usize], data)
}

pub fn write_feature_file(path: impl AsRef<Path>, frames: &Tensor) -> Result<()> {
    write_atomic(path.as_ref(), &encode_feature_frames(frames)?)
}

pub fn read_feature_frames(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_feature_frames(&read_bytes(path)?, &path.display().to_string())
}

/// Reads `<dir>/<video_id>.vfb` and max-pools its frames.
pub fn load_features(dir: impl AsRef<Path>, video_id: &str) -> Result<VideoFeatures> {
    let frames = read_feature_frames(feature_path(dir, video_id))?;
    VideoFeatures::from_frames(&frames)
}

/// Loads every distinct id once.
pub fn load_feature_map<'a>(
    dir: impl AsRef<Path>,
    video_ids: impl IntoIterator<Item = &'a str>,
) -> Result<FeatureMap> {
    let mut map = FeatureMap::new();
    for id in video_ids {
        if !map.contains_key(id) {
            map.insert(id.to_string(), load_features(dir.as_ref(), id)?);
        }
    }
    Ok(map)
}
