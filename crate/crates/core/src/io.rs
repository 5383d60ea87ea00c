//! On-disk formats: binary PPM frames, 16-bit PGM maps, box lists, flat
//! `key=value` configs and the dataset manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{BBox, ConcatDirection, Frame, FrameSequence, SeedCam};
use crate::losses::ColocMode;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

/// First line of every manifest.
pub const MANIFEST_TAG: &str = "colocam-manifest v1";
pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Netpbm header fields after the magic.
struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn skip_space(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        match bytes.get(pos) {
            Some(b'#') => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => pos += 1,
            _ => return pos,
        }
    }
}

fn header_number(bytes: &[u8], pos: usize, what: &str) -> Result<(usize, usize)> {
    let start = skip_space(bytes, pos);
    let mut end = start;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(Error::parse(start, format!("expected {what}")));
    }
    let text = std::str::from_utf8(&bytes[start..end]).expect("ascii digits");
    let v = text
        .parse()
        .map_err(|_| Error::parse(start, format!("{what} {text} is too large")))?;
    Ok((v, end))
}

fn read_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::parse(
            0,
            format!(
                "expected magic {:?}",
                std::str::from_utf8(magic).unwrap_or("?")
            ),
        ));
    }
    let (width, pos) = header_number(bytes, 2, "width")?;
    let (height, pos) = header_number(bytes, pos, "height")?;
    let (maxval, pos) = header_number(bytes, pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::parse(pos, format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::parse(
            pos,
            format!("maxval {maxval} outside 1..=65535"),
        ));
    }
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => {}
        _ => {
            return Err(Error::parse(
                pos,
                "expected one whitespace byte before the raster",
            ))
        }
    }
    Ok(Header {
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

/// Raster samples scaled to `[0, 1]`.
fn read_samples(bytes: &[u8], h: &Header, per_pixel: usize) -> Result<Vec<f64>> {
    let wide = h.maxval > 255;
    let count = h
        .width
        .checked_mul(h.height)
        .and_then(|n| n.checked_mul(per_pixel))
        .ok_or_else(|| Error::parse(h.data_start, "image dimensions overflow"))?;
    let need = count * if wide { 2 } else { 1 };
    let have = bytes.len() - h.data_start;
    if have < need {
        return Err(Error::parse(
            bytes.len(),
            format!("raster truncated: missing {} of {need} bytes", need - have),
        ));
    }
    if have > need {
        return Err(Error::parse(
            h.data_start + need,
            format!("{} trailing bytes after the raster", have - need),
        ));
    }
    let data = &bytes[h.data_start..];
    let max = h.maxval as f64;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let v = if wide {
            u16::from_be_bytes([data[2 * i], data[2 * i + 1]]) as usize
        } else {
            data[i] as usize
        };
        if v > h.maxval {
            let at = h.data_start + if wide { 2 * i } else { i };
            return Err(Error::parse(
                at,
                format!("sample {v} exceeds maxval {}", h.maxval),
            ));
        }
        out.push(v as f64 / max);
    }
    Ok(out)
}

/// Binary 8-bit PPM. Channels are rounded to the nearest integer.
pub fn write_frame(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
    for px in frame.pixels() {
        out.extend(px.map(|c| c.round().clamp(0.0, 255.0) as u8));
    }
    out
}

/// Reads a binary PPM of any maxval, rescaled to `[0, 255]`.
pub fn read_frame(bytes: &[u8]) -> Result<Frame> {
    let h = read_header(bytes, b"P6")?;
    let s = read_samples(bytes, &h, 3)?;
    let px = s
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]].map(|v| v * 255.0))
        .collect();
    Frame::new(h.height, h.width, px)
}

/// Binary 16-bit PGM of values in `[0, 1]`.
pub fn write_map(values: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if height == 0 || width == 0 || values.len() != height * width {
        return Err(Error::Shape {
            expected: height * width,
            actual: values.len(),
        });
    }
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRange(format!("map value {v} outside [0, 1]")));
        }
        out.extend(((v * 65535.0).round() as u16).to_be_bytes());
    }
    Ok(out)
}

/// Reads a binary PGM; returns `(height, width, values in [0, 1])`.
pub fn read_map(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let h = read_header(bytes, b"P5")?;
    let v = read_samples(bytes, &h, 1)?;
    Ok((h.height, h.width, v))
}

/// One `frame_index x_min y_min x_max y_max` line per box.
pub fn write_boxes(boxes: &[BBox]) -> String {
    let mut s = String::new();
    for (k, b) in boxes.iter().enumerate() {
        let _ = writeln!(s, "{k} {} {} {} {}", b.x_min, b.y_min, b.x_max, b.y_max);
    }
    s
}

/// Inverse of [`write_boxes`]. Indices must run `0, 1, 2, ...`.
pub fn read_boxes(text: &str) -> Result<Vec<BBox>> {
    let mut out = Vec::new();
    for (offset, line) in lines_with_offsets(text) {
        if line.trim().is_empty() {
            continue;
        }
        let mut nums = [0usize; 5];
        let mut fields = line.split_whitespace();
        for (i, slot) in nums.iter_mut().enumerate() {
            let f = fields
                .next()
                .ok_or_else(|| Error::parse(offset, format!("expected 5 fields, found {i}")))?;
            *slot = f
                .parse()
                .map_err(|_| Error::parse(offset, format!("field {f:?} is not a count")))?;
        }
        if fields.next().is_some() {
            return Err(Error::parse(offset, "more than 5 fields"));
        }
        if nums[0] != out.len() {
            return Err(Error::parse(
                offset,
                format!("frame index {} where {} was expected", nums[0], out.len()),
            ));
        }
        let b = BBox::new(nums[1], nums[2], nums[3], nums[4])
            .map_err(|e| Error::parse(offset, e.to_string()))?;
        out.push(b);
    }
    Ok(out)
}

fn lines_with_offsets(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut offset = 0;
    text.split_inclusive('\n').map(move |l| {
        let at = offset;
        offset += l.len();
        (at, l.trim_end_matches(['\n', '\r']))
    })
}

/// One `key=value` line of a config file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    /// Byte offset of the value.
    pub offset: usize,
}

/// Parses flat `key=value` text. `#` starts a comment line; blank lines
/// are skipped; keys may not repeat.
pub fn parse_kv(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (offset, line) in lines_with_offsets(text) {
        let trimmed = line.trim_start();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let eq = line
            .find('=')
            .ok_or_else(|| Error::parse(offset, "expected key=value"))?;
        let key = line[..eq].trim();
        if key.is_empty() {
            return Err(Error::parse(offset, "empty key"));
        }
        if out.iter().any(|e| e.key == key) {
            return Err(Error::parse(offset, format!("duplicate key {key:?}")));
        }
        let raw = &line[eq + 1..];
        let lead = raw.len() - raw.trim_start().len();
        out.push(Entry {
            key: key.to_string(),
            value: raw.trim().to_string(),
            offset: offset + eq + 1 + lead,
        });
    }
    Ok(out)
}

fn value<T: std::str::FromStr>(e: &Entry) -> Result<T> {
    e.value
        .parse()
        .map_err(|_| Error::parse(e.offset, format!("bad value {:?} for {}", e.value, e.key)))
}

fn color(e: &Entry) -> Result<[f64; 3]> {
    let parts: Vec<&str> = e.value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::parse(
            e.offset,
            format!("{} needs three comma-separated values", e.key),
        ));
    }
    let mut c = [0.0; 3];
    for (slot, p) in c.iter_mut().zip(parts) {
        *slot = p
            .parse()
            .map_err(|_| Error::parse(e.offset, format!("bad color component {p:?}")))?;
    }
    Ok(c)
}

fn unknown(e: &Entry) -> Error {
    Error::parse(e.offset, format!("unknown key {:?}", e.key))
}

pub fn synth_config_from_kv(entries: &[Entry]) -> Result<SynthConfig> {
    let mut c = SynthConfig::default();
    for e in entries {
        match e.key.as_str() {
            "frames" => c.frames = value(e)?,
            "height" => c.height = value(e)?,
            "width" => c.width = value(e)?,
            "shape" => c.shape = value(e)?,
            "object_color" => c.object_color = color(e)?,
            "extent" => c.extent = value(e)?,
            "motion" => c.motion = value(e)?,
            "speed" => c.speed = value(e)?,
            "background" => c.background = value(e)?,
            "background_color_a" => c.background_colors[0] = color(e)?,
            "background_color_b" => c.background_colors[1] = color(e)?,
            "pixel_noise" => c.pixel_noise = value(e)?,
            "under_activation" => c.under_activation = value(e)?,
            "blur" => c.blur = value(e)?,
            "false_blobs" => c.false_blobs = value(e)?,
            "blob_strength" => c.blob_strength = value(e)?,
            "blob_radius" => c.blob_radius = value(e)?,
            "weak_fraction" => c.weak_fraction = value(e)?,
            "weak_gain" => c.weak_gain = value(e)?,
            "color_drift" => c.color_drift = value(e)?,
            "seed" => c.seed = value(e)?,
            _ => return Err(unknown(e)),
        }
    }
    c.validate()?;
    Ok(c)
}

fn join(c: [f64; 3]) -> String {
    format!("{},{},{}", c[0], c[1], c[2])
}

/// `key=value` lines that [`synth_config_from_kv`] reads back unchanged.
pub fn synth_config_to_kv(c: &SynthConfig) -> String {
    let rows = [
        ("frames", c.frames.to_string()),
        ("height", c.height.to_string()),
        ("width", c.width.to_string()),
        ("shape", c.shape.to_string()),
        ("object_color", join(c.object_color)),
        ("extent", c.extent.to_string()),
        ("motion", c.motion.to_string()),
        ("speed", c.speed.to_string()),
        ("background", c.background.to_string()),
        ("background_color_a", join(c.background_colors[0])),
        ("background_color_b", join(c.background_colors[1])),
        ("pixel_noise", c.pixel_noise.to_string()),
        ("under_activation", c.under_activation.to_string()),
        ("blur", c.blur.to_string()),
        ("false_blobs", c.false_blobs.to_string()),
        ("blob_strength", c.blob_strength.to_string()),
        ("blob_radius", c.blob_radius.to_string()),
        ("weak_fraction", c.weak_fraction.to_string()),
        ("weak_gain", c.weak_gain.to_string()),
        ("color_drift", c.color_drift.to_string()),
        ("seed", c.seed.to_string()),
    ];
    rows.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Applies entries on top of `base`.
pub fn train_config_from_kv(entries: &[Entry], base: TrainConfig) -> Result<TrainConfig> {
    let mut c = base;
    for e in entries {
        match e.key.as_str() {
            "n_frames" => c.n_frames = value(e)?,
            "lambda" => c.lambda = value(e)?,
            "lambda_c" => c.lambda_c = value(e)?,
            "lambda_c_mode" => c.lambda_c_mode = value::<ColocMode>(e)?,
            "epochs" => c.epochs = value(e)?,
            "learning_rate" => c.learning_rate = value(e)?,
            "z_init" => c.z_init = value(e)?,
            "z_factor" => c.z_factor = value(e)?,
            "z_max" => c.z_max = value(e)?,
            "sampling" => c.sampling = value(e)?,
            "direction" => c.direction = value::<ConcatDirection>(e)?,
            "seed" => c.seed = value(e)?,
            "samples_per_side" => c.samples_per_side = value(e)?,
            "size_barrier" => c.size_barrier = value(e)?,
            "pseudo_labels" => c.pseudo_labels = value(e)?,
            "spatial_bandwidth" => c.kernel.spatial_bandwidth = value(e)?,
            "color_bandwidth" => c.kernel.color_bandwidth = value(e)?,
            "shifts" => c.kernel.shifts = value(e)?,
            "steps_per_epoch" => c.steps_per_epoch = Some(value(e)?),
            _ => return Err(unknown(e)),
        }
    }
    c.validate()?;
    Ok(c)
}

/// `key=value` lines that [`train_config_from_kv`] reads back unchanged.
pub fn train_config_to_kv(c: &TrainConfig) -> String {
    let mut rows = vec![
        ("n_frames", c.n_frames.to_string()),
        ("lambda", c.lambda.to_string()),
        ("lambda_c", c.lambda_c.to_string()),
        ("lambda_c_mode", c.lambda_c_mode.to_string()),
        ("epochs", c.epochs.to_string()),
        ("learning_rate", c.learning_rate.to_string()),
        ("z_init", c.z_init.to_string()),
        ("z_factor", c.z_factor.to_string()),
        ("z_max", c.z_max.to_string()),
        ("sampling", c.sampling.to_string()),
        ("direction", c.direction.to_string()),
        ("seed", c.seed.to_string()),
        ("samples_per_side", c.samples_per_side.to_string()),
        ("size_barrier", c.size_barrier.to_string()),
        ("pseudo_labels", c.pseudo_labels.to_string()),
        ("spatial_bandwidth", c.kernel.spatial_bandwidth.to_string()),
        ("color_bandwidth", c.kernel.color_bandwidth.to_string()),
        ("shifts", c.kernel.shifts.to_string()),
    ];
    if let Some(s) = c.steps_per_epoch {
        rows.push(("steps_per_epoch", s.to_string()));
    }
    rows.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// One clip's files, relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoEntry {
    pub id: usize,
    pub frames: usize,
    pub frame_dir: String,
    pub seed_dir: String,
    pub boxes: String,
}

impl VideoEntry {
    fn standard(id: usize, frames: usize) -> Self {
        let dir = format!("video_{id:03}");
        Self {
            id,
            frames,
            frame_dir: format!("{dir}/frames"),
            seed_dir: format!("{dir}/seeds"),
            boxes: format!("{dir}/boxes.txt"),
        }
    }

    pub fn frame_path(&self, k: usize) -> String {
        format!("{}/{k:04}.ppm", self.frame_dir)
    }

    pub fn seed_path(&self, k: usize) -> String {
        format!("{}/{k:04}.pgm", self.seed_dir)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub videos: Vec<VideoEntry>,
    /// Generator settings, echoed as `config key=value` lines.
    pub config: Vec<(String, String)>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("{MANIFEST_TAG}\n");
        for (k, v) in &self.config {
            let _ = writeln!(s, "config {k}={v}");
        }
        for v in &self.videos {
            let _ = writeln!(
                s,
                "video {} {} {} {} {}",
                v.id, v.frames, v.frame_dir, v.seed_dir, v.boxes
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = lines_with_offsets(text);
        match lines.next() {
            Some((_, tag)) if tag == MANIFEST_TAG => {}
            _ => return Err(Error::parse(0, format!("expected {MANIFEST_TAG:?}"))),
        }
        let mut m = DatasetManifest {
            videos: Vec::new(),
            config: Vec::new(),
        };
        for (offset, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("config ") {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| Error::parse(offset, "config line without '='"))?;
                m.config.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("video ") {
                let f: Vec<&str> = rest.split_whitespace().collect();
                if f.len() != 5 {
                    return Err(Error::parse(
                        offset,
                        format!("video line has {} fields, expected 5", f.len()),
                    ));
                }
                let num = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| Error::parse(offset, format!("{s:?} is not a count")))
                };
                m.videos.push(VideoEntry {
                    id: num(f[0])?,
                    frames: num(f[1])?,
                    frame_dir: f[2].to_string(),
                    seed_dir: f[3].to_string(),
                    boxes: f[4].to_string(),
                });
            } else {
                return Err(Error::parse(offset, "expected a config or video line"));
            }
        }
        Ok(m)
    }
}

/// A clip as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoData {
    pub id: usize,
    pub frames: FrameSequence,
    pub seeds: Vec<SeedCam>,
    pub boxes: Vec<BBox>,
}

/// Writes the clips and a manifest under `root`.
pub fn save_dataset(
    root: &Path,
    videos: &[VideoData],
    config: Vec<(String, String)>,
) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest {
        videos: Vec::new(),
        config,
    };
    for v in videos {
        let entry = VideoEntry::standard(v.id, v.frames.len());
        for (k, f) in v.frames.frames().iter().enumerate() {
            write_file(&root.join(entry.frame_path(k)), &write_frame(f))?;
        }
        for (k, s) in v.seeds.iter().enumerate() {
            write_file(
                &root.join(entry.seed_path(k)),
                &write_map(s.values(), s.height(), s.width())?,
            )?;
        }
        write_file(&root.join(&entry.boxes), write_boxes(&v.boxes).as_bytes())?;
        manifest.videos.push(entry);
    }
    write_file(&root.join(MANIFEST_FILE), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

fn tag_path(err: Error, path: &Path) -> Error {
    match err {
        Error::Parse { offset, message } => {
            Error::parse(offset, format!("{}: {message}", path.display()))
        }
        other => other,
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_file(path)?).map_err(|e| {
        Error::parse(
            e.utf8_error().valid_up_to(),
            format!("{}: not UTF-8", path.display()),
        )
    })
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    DatasetManifest::parse(&read_text(&path)?).map_err(|e| tag_path(e, &path))
}

/// Loads every clip a manifest lists, checking counts and shapes.
pub fn load_dataset(root: &Path) -> Result<(DatasetManifest, Vec<VideoData>)> {
    let manifest = load_manifest(root)?;
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for e in &manifest.videos {
        let mut frames = Vec::with_capacity(e.frames);
        let mut seeds = Vec::with_capacity(e.frames);
        for k in 0..e.frames {
            let p: PathBuf = root.join(e.frame_path(k));
            frames.push(read_frame(&read_file(&p)?).map_err(|err| tag_path(err, &p))?);
            let p = root.join(e.seed_path(k));
            let (h, w, v) = read_map(&read_file(&p)?).map_err(|err| tag_path(err, &p))?;
            seeds.push(SeedCam::new(h, w, v)?);
        }
        let p = root.join(&e.boxes);
        let boxes = read_boxes(&read_text(&p)?).map_err(|err| tag_path(err, &p))?;
        if boxes.len() != e.frames {
            return Err(Error::InvalidSequence(format!(
                "video {}: {} boxes for {} frames",
                e.id,
                boxes.len(),
                e.frames
            )));
        }
        videos.push(VideoData {
            id: e.id,
            frames: FrameSequence::new(frames, ConcatDirection::Horizontal)?,
            seeds,
            boxes,
        });
    }
    Ok((manifest, videos))
}

/// Logits as `CLGT` magic, then `frames height width` as little-endian
/// u64, then `[l0, l1]` per pixel as little-endian f64.
pub fn write_logits(frames: &[&[[f64; 2]]], height: usize, width: usize) -> Vec<u8> {
    let mut out = b"CLGT".to_vec();
    for n in [frames.len(), height, width] {
        out.extend((n as u64).to_le_bytes());
    }
    for f in frames {
        for px in *f {
            out.extend(px[0].to_le_bytes());
            out.extend(px[1].to_le_bytes());
        }
    }
    out
}

/// Inverse of [`write_logits`]: `(height, width, per-frame logits)`.
pub fn read_logits(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<[f64; 2]>>)> {
    if bytes.len() < 4 || &bytes[..4] != b"CLGT" {
        return Err(Error::parse(0, "expected magic \"CLGT\""));
    }
    if bytes.len() < 28 {
        return Err(Error::parse(
            bytes.len(),
            format!("header truncated: missing {} of 28 bytes", 28 - bytes.len()),
        ));
    }
    let field = |i: usize| {
        u64::from_le_bytes(bytes[4 + 8 * i..12 + 8 * i].try_into().expect("8 bytes")) as usize
    };
    let (n, h, w) = (field(0), field(1), field(2));
    let need = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(16))
        .ok_or_else(|| Error::parse(4, "dimensions overflow"))?;
    let have = bytes.len() - 28;
    if have != need {
        return Err(Error::parse(
            bytes.len(),
            format!("expected {need} bytes of logits, found {have}"),
        ));
    }
    let vals: Vec<f64> = bytes[28..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let frames = vals
        .chunks_exact(2 * h * w.max(1))
        .take(n)
        .map(|c| c.chunks_exact(2).map(|p| [p[0], p[1]]).collect())
        .collect();
    Ok((h, w, frames))
}
