//! Frame sources: binary PGM/PPM image sequences and deterministic
//! synthetic scenes of moving squares.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::message::{Detection, FaroRecord, Frame, Payload, PixelFormat};

#[derive(Debug, Error)]
pub enum MediaError {
    #[error("source not found: {0}")]
    SourceNotFound(PathBuf),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("cannot decode {path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("invalid source config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn decode_err(path: &str, reason: impl Into<String>) -> MediaError {
    MediaError::Decode { path: path.to_string(), reason: reason.into() }
}

// ---------------------------------------------------------------- PNM

/// Parses a binary PGM (P5) or PPM (P6) image with maxval ≤ 255.
pub fn decode_pnm(bytes: &[u8], name: &str) -> Result<Frame, MediaError> {
    let format = match bytes.get(..2) {
        Some(b"P5") => PixelFormat::Gray8,
        Some(b"P6") => PixelFormat::Rgb24,
        _ => return Err(decode_err(name, "not a binary PGM/PPM file")),
    };
    let mut pos = 2;
    let mut header = [0u32; 3];
    for slot in header.iter_mut() {
        // Whitespace and comments may separate header tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(decode_err(name, "truncated header"));
        }
        *slot = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| decode_err(name, "header value out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(decode_err(name, "missing whitespace after header"));
    }
    pos += 1;
    let [width, height, maxval] = header;
    if maxval == 0 || maxval > 255 {
        return Err(MediaError::UnsupportedFormat(format!("{name}: maxval {maxval} (only 8-bit samples)")));
    }
    if width == 0 || height == 0 {
        return Err(decode_err(name, "zero image dimension"));
    }
    let len = (width as usize)
        .checked_mul(height as usize)
        .and_then(|n| n.checked_mul(format.bytes_per_pixel()))
        .ok_or_else(|| decode_err(name, "image too large"))?;
    let data = bytes
        .get(pos..pos + len)
        .ok_or_else(|| decode_err(name, format!("raster has {} of {len} bytes", bytes.len() - pos)))?;
    Frame::new(width, height, format, data.to_vec()).map_err(|e| decode_err(name, e.to_string()))
}

pub fn encode_pnm(frame: &Frame) -> Vec<u8> {
    let magic = match frame.pixel_format {
        PixelFormat::Gray8 => "P5",
        PixelFormat::Rgb24 => "P6",
    };
    let mut out = format!("{magic}\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend_from_slice(&frame.data);
    out
}

pub fn read_pnm(path: &Path) -> Result<Frame, MediaError> {
    if !path.exists() {
        return Err(MediaError::SourceNotFound(path.to_path_buf()));
    }
    decode_pnm(&fs::read(path)?, &path.display().to_string())
}

pub fn write_pnm(path: &Path, frame: &Frame) -> Result<(), MediaError> {
    fs::write(path, encode_pnm(frame))?;
    Ok(())
}

fn is_pnm_name(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm" | "ppm" | "pnm")
    )
}

// ---------------------------------------------------------- synthetic

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSquare {
    pub x: u32,
    pub y: u32,
    pub side: u32,
    pub intensity: u8,
    /// Pixels per frame.
    pub velocity: (i32, i32),
    /// Depth of the square's surface pattern; 0 draws a flat square.
    #[serde(default)]
    pub texture: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub width: u32,
    pub height: u32,
    pub squares: Vec<SyntheticSquare>,
    pub background_intensity: u8,
}

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

impl SyntheticScene {
    pub fn validate(&self) -> Result<(), MediaError> {
        if self.width == 0 || self.height == 0 {
            return Err(MediaError::InvalidConfig("scene must have positive size".into()));
        }
        for (i, s) in self.squares.iter().enumerate() {
            if s.side == 0 || s.x + s.side > self.width || s.y + s.side > self.height {
                return Err(MediaError::InvalidConfig(format!("square {i} is not inside the frame at t=0")));
            }
            let floor = s.intensity as i32 - s.texture as i32;
            if floor <= self.background_intensity as i32 + 50 {
                return Err(MediaError::InvalidConfig(format!(
                    "square {i} is not at least 50 levels above the background"
                )));
            }
        }
        Ok(())
    }

    /// `count` squares of distinct surface patterns, each in its own
    /// horizontal band so they never touch while moving sideways.
    pub fn random(seed: u64, width: u32, height: u32, count: usize) -> Result<Self, MediaError> {
        let band = height / count.max(1) as u32;
        if count == 0 || band < 16 || width < 32 {
            return Err(MediaError::InvalidConfig(format!("{width}x{height} is too small for {count} squares")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let background_intensity = rng.gen_range(10..=40);
        let max_side = (band - 4).min(28).min(width / 2);
        let squares = (0..count as u32)
            .map(|k| {
                let side = rng.gen_range(12.min(max_side)..=max_side);
                let speed = rng.gen_range(1..=3);
                SyntheticSquare {
                    x: rng.gen_range(0..=width - side),
                    y: k * band + (band - side) / 2,
                    side,
                    intensity: rng.gen_range(180..=255),
                    velocity: (if rng.gen() { speed } else { -speed }, 0),
                    texture: rng.gen_range(20..=40),
                }
            })
            .collect();
        let scene = Self { width, height, squares, background_intensity };
        scene.validate()?;
        Ok(scene)
    }

    /// Top-left corner of square `i` at frame `t`, clamped to the frame.
    pub fn position(&self, i: usize, t: u64) -> (u32, u32) {
        let s = &self.squares[i];
        let step = |p: u32, v: i32, limit: u32| -> u32 {
            let moved = p as i64 + v as i64 * t as i64;
            moved.clamp(0, (limit - s.side) as i64) as u32
        };
        (step(s.x, s.velocity.0, self.width), step(s.y, s.velocity.1, self.height))
    }

    /// Surface value of square `i` at offset (dx, dy) from its corner.
    pub fn square_pixel(&self, i: usize, dx: u32, dy: u32) -> u8 {
        let s = &self.squares[i];
        if s.texture == 0 {
            return s.intensity;
        }
        let theta = i as f64 * GOLDEN_ANGLE;
        let u = (dx as f64 + 0.5) / s.side as f64;
        let v = (dy as f64 + 0.5) / s.side as f64;
        let wave = 0.5 + 0.5 * (std::f64::consts::TAU * 1.5 * (u * theta.cos() + v * theta.sin())).sin();
        s.intensity - (s.texture as f64 * wave).round() as u8
    }

    pub fn render(&self, t: u64) -> Frame {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut data = vec![self.background_intensity; w * h];
        for i in 0..self.squares.len() {
            let (x0, y0) = self.position(i, t);
            let side = self.squares[i].side;
            for dy in 0..side {
                let row = (y0 + dy) as usize * w;
                for dx in 0..side {
                    data[row + (x0 + dx) as usize] = self.square_pixel(i, dx, dy);
                }
            }
        }
        Frame { width: self.width, height: self.height, pixel_format: PixelFormat::Gray8, data }
    }
}

// ------------------------------------------------------------- sources

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SourceKind {
    ImageSequence,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub kind: SourceKind,
    /// A file or directory for image sequences; a decimal seed for
    /// synthetic scenes.
    pub path_or_seed: String,
    pub fps_limit: Option<f64>,
    #[serde(rename = "loop", default)]
    pub looping: bool,
    pub frame_count: Option<u64>,
    /// Overrides the seed-generated scene.
    #[serde(default)]
    pub scene: Option<SyntheticScene>,
}

pub const DEFAULT_SCENE_WIDTH: u32 = 160;
pub const DEFAULT_SCENE_HEIGHT: u32 = 120;
pub const DEFAULT_SCENE_SQUARES: usize = 3;

impl SourceConfig {
    pub fn image_sequence(path: impl Into<String>) -> Self {
        Self {
            kind: SourceKind::ImageSequence,
            path_or_seed: path.into(),
            fps_limit: None,
            looping: false,
            frame_count: None,
            scene: None,
        }
    }

    pub fn synthetic(seed: u64, frame_count: Option<u64>) -> Self {
        Self {
            kind: SourceKind::Synthetic,
            path_or_seed: seed.to_string(),
            fps_limit: None,
            looping: false,
            frame_count,
            scene: None,
        }
    }

    /// `synthetic`, `synthetic:<seed>`, or a path.
    pub fn parse(spec: &str) -> Self {
        match spec.strip_prefix("synthetic") {
            Some("") => Self::synthetic(0, None),
            Some(rest) if rest.starts_with(':') && rest[1..].parse::<u64>().is_ok() => {
                Self::synthetic(rest[1..].parse().unwrap(), None)
            }
            _ => Self::image_sequence(spec),
        }
    }

    pub fn with_fps(mut self, fps: f64) -> Self {
        self.fps_limit = Some(fps);
        self
    }

    pub fn with_loop(mut self, looping: bool) -> Self {
        self.looping = looping;
        self
    }

    pub fn validate(&self) -> Result<(), MediaError> {
        if self.fps_limit.is_some_and(|f| !(f > 0.0 && f.is_finite())) {
            return Err(MediaError::InvalidConfig("fps_limit must be positive".into()));
        }
        if self.frame_count == Some(0) {
            return Err(MediaError::InvalidConfig("frame_count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn scene(&self) -> Result<SyntheticScene, MediaError> {
        if let Some(scene) = &self.scene {
            scene.validate()?;
            return Ok(scene.clone());
        }
        let seed = self
            .path_or_seed
            .parse()
            .map_err(|_| MediaError::InvalidConfig(format!("synthetic seed `{}` is not an integer", self.path_or_seed)))?;
        SyntheticScene::random(seed, DEFAULT_SCENE_WIDTH, DEFAULT_SCENE_HEIGHT, DEFAULT_SCENE_SQUARES)
    }
}

/// Produces raw frames for a [`Source`]. New input kinds (camera SDKs,
/// codecs, network streams) plug in here.
pub trait FrameProvider: Send {
    /// `None` at end of stream. A decode error consumes the bad frame.
    fn next_frame(&mut self) -> Option<Result<Frame, MediaError>>;
    /// Restarts from the first frame; false if unsupported.
    fn rewind(&mut self) -> bool;
    fn describe(&self) -> String;
}

struct ImageSequence {
    files: Vec<PathBuf>,
    next: usize,
}

impl FrameProvider for ImageSequence {
    fn next_frame(&mut self) -> Option<Result<Frame, MediaError>> {
        let path = self.files.get(self.next)?;
        self.next += 1;
        Some(read_pnm(path))
    }

    fn rewind(&mut self) -> bool {
        self.next = 0;
        true
    }

    fn describe(&self) -> String {
        match self.files.first().and_then(|f| f.parent()) {
            Some(dir) => dir.display().to_string(),
            None => "images".into(),
        }
    }
}

struct SyntheticProvider {
    scene: SyntheticScene,
    frame_count: Option<u64>,
    t: u64,
    seed: String,
}

impl FrameProvider for SyntheticProvider {
    fn next_frame(&mut self) -> Option<Result<Frame, MediaError>> {
        if self.frame_count.is_some_and(|n| self.t >= n) {
            return None;
        }
        let frame = self.scene.render(self.t);
        self.t += 1;
        Some(Ok(frame))
    }

    fn rewind(&mut self) -> bool {
        self.t = 0;
        true
    }

    fn describe(&self) -> String {
        format!("synthetic:{}", self.seed)
    }
}

/// A single-owner frame iterator.
pub struct Source {
    provider: Box<dyn FrameProvider>,
    source_id: String,
    looping: bool,
    interval: Option<Duration>,
    last_return: Option<Instant>,
    next_seq: u64,
    skipped: Vec<MediaError>,
}

impl std::fmt::Debug for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Source").field("source_id", &self.source_id).field("next_seq", &self.next_seq).finish()
    }
}

pub fn open_source(config: &SourceConfig) -> Result<Source, MediaError> {
    config.validate()?;
    let provider: Box<dyn FrameProvider> = match config.kind {
        SourceKind::Synthetic => Box::new(SyntheticProvider {
            scene: config.scene()?,
            frame_count: config.frame_count,
            t: 0,
            seed: config.path_or_seed.clone(),
        }),
        SourceKind::ImageSequence => {
            let path = Path::new(&config.path_or_seed);
            if !path.exists() {
                return Err(MediaError::SourceNotFound(path.to_path_buf()));
            }
            let files = if path.is_dir() {
                let mut files: Vec<PathBuf> = fs::read_dir(path)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.is_file() && is_pnm_name(p))
                    .collect();
                files.sort();
                if files.is_empty() {
                    return Err(MediaError::UnsupportedFormat(format!(
                        "{} holds no .pgm/.ppm files",
                        path.display()
                    )));
                }
                files
            } else if is_pnm_name(path) {
                vec![path.to_path_buf()]
            } else {
                return Err(MediaError::UnsupportedFormat(format!("{} is not a .pgm/.ppm file", path.display())));
            };
            Box::new(ImageSequence { files, next: 0 })
        }
    };
    Ok(Source::from_provider(provider, config.fps_limit, config.looping))
}

impl Source {
    pub fn from_provider(provider: Box<dyn FrameProvider>, fps_limit: Option<f64>, looping: bool) -> Self {
        Self {
            source_id: provider.describe(),
            provider,
            looping,
            interval: fps_limit.map(|f| Duration::from_secs_f64(1.0 / f)),
            last_return: None,
            next_seq: 0,
            skipped: Vec::new(),
        }
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    /// Decode failures encountered so far; those frames were skipped.
    pub fn skipped(&self) -> &[MediaError] {
        &self.skipped
    }

    /// The next frame as a record, or `None` at end of stream.
    pub fn grab(&mut self) -> Option<FaroRecord> {
        let frame = self.next_good_frame()?;
        if let (Some(interval), Some(last)) = (self.interval, self.last_return) {
            let due = last + interval;
            let now = Instant::now();
            if due > now {
                thread::sleep(due - now);
            }
        }
        let record = FaroRecord::new(Payload::Frame(frame)).with_sequence(self.next_seq).with_source(&self.source_id);
        self.next_seq += 1;
        self.last_return = Some(Instant::now());
        Some(record)
    }

    fn next_good_frame(&mut self) -> Option<Frame> {
        let mut rewound_without_frame = false;
        loop {
            match self.provider.next_frame() {
                Some(Ok(frame)) => return Some(frame),
                Some(Err(e)) => {
                    log::warn!("{}: skipping frame: {e}", self.source_id);
                    self.skipped.push(e);
                }
                None => {
                    // A second empty pass means nothing in the loop decodes.
                    if !self.looping || rewound_without_frame || !self.provider.rewind() {
                        return None;
                    }
                    rewound_without_frame = true;
                    continue;
                }
            }
            rewound_without_frame = false;
        }
    }
}

impl Iterator for Source {
    type Item = FaroRecord;

    fn next(&mut self) -> Option<FaroRecord> {
        self.grab()
    }
}

/// RGB copy of `frame` with each detection box outlined.
pub fn annotate(frame: &Frame, detections: &[Detection], color: [u8; 3]) -> Frame {
    let (w, h) = (frame.width, frame.height);
    let mut data = Vec::with_capacity(w as usize * h as usize * 3);
    for y in 0..h {
        for x in 0..w {
            match frame.pixel_format {
                PixelFormat::Gray8 => {
                    let v = frame.luma(x, y);
                    data.extend_from_slice(&[v, v, v]);
                }
                PixelFormat::Rgb24 => {
                    let i = (y * w + x) as usize * 3;
                    data.extend_from_slice(&frame.data[i..i + 3]);
                }
            }
        }
    }
    let mut put = |x: u32, y: u32| {
        if x < w && y < h {
            let i = (y * w + x) as usize * 3;
            data[i..i + 3].copy_from_slice(&color);
        }
    };
    for d in detections {
        let b = d.bbox;
        let (x1, y1) = (b.x + b.w.max(1) - 1, b.y + b.h.max(1) - 1);
        for x in b.x..=x1 {
            put(x, b.y);
            put(x, y1);
        }
        for y in b.y..=y1 {
            put(b.x, y);
            put(x1, y);
        }
    }
    Frame { width: w, height: h, pixel_format: PixelFormat::Rgb24, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_square(texture: u8) -> SyntheticScene {
        SyntheticScene {
            width: 40,
            height: 30,
            squares: vec![SyntheticSquare { x: 5, y: 5, side: 20, intensity: 200, velocity: (3, -2), texture }],
            background_intensity: 20,
        }
    }

    #[test]
    fn pnm_round_trip() {
        let gray = Frame::gray(3, 2, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(decode_pnm(&encode_pnm(&gray), "g").unwrap(), gray);
        let rgb = Frame::new(1, 2, PixelFormat::Rgb24, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(decode_pnm(&encode_pnm(&rgb), "c").unwrap(), rgb);
    }

    #[test]
    fn pnm_header_comments() {
        let bytes = b"P5\n# made by hand\n2 # width\n1\n255\n\x07\x09";
        let f = decode_pnm(bytes, "x").unwrap();
        assert_eq!((f.width, f.height, f.data.clone()), (2, 1, vec![7, 9]));
    }

    #[test]
    fn pnm_rejects_bad_input() {
        assert!(matches!(decode_pnm(b"P2\n1 1\n255\n0", "x"), Err(MediaError::Decode { .. })));
        assert!(matches!(decode_pnm(b"P5\n2 2\n255\n\x00", "x"), Err(MediaError::Decode { .. })));
        assert!(matches!(decode_pnm(b"P5\n1 1\n65535\n\x00\x00", "x"), Err(MediaError::UnsupportedFormat(_))));
        assert!(decode_pnm(b"P5\n1", "x").is_err());
    }

    #[test]
    fn flat_square_pixel_count() {
        let frame = one_square(0).render(0);
        assert_eq!(frame.data.iter().filter(|&&v| v > 20).count(), 400);
    }

    #[test]
    fn textured_square_stays_above_background() {
        let scene = one_square(40);
        scene.validate().unwrap();
        let frame = scene.render(0);
        assert_eq!(frame.data.iter().filter(|&&v| v > 20).count(), 400);
        assert!(frame.data.iter().filter(|&&v| v > 20).any(|&v| v != 200));
    }

    #[test]
    fn squares_clamp_at_borders() {
        let scene = one_square(0);
        assert_eq!(scene.position(0, 1), (8, 3));
        assert_eq!(scene.position(0, 100), (20, 0));
    }

    #[test]
    fn scene_validation() {
        let mut s = one_square(0);
        s.squares[0].x = 30;
        assert!(s.validate().is_err());
        let mut s = one_square(0);
        s.squares[0].intensity = 60;
        assert!(s.validate().is_err());
    }

    #[test]
    fn random_scenes_are_deterministic() {
        let a = SyntheticScene::random(7, 160, 120, 3).unwrap();
        assert_eq!(a, SyntheticScene::random(7, 160, 120, 3).unwrap());
        assert_ne!(a, SyntheticScene::random(8, 160, 120, 3).unwrap());
        assert_eq!(a.render(5), SyntheticScene::random(7, 160, 120, 3).unwrap().render(5));
    }

    #[test]
    fn synthetic_frame_count() {
        let src = open_source(&SourceConfig::synthetic(1, Some(10))).unwrap();
        let seqs: Vec<u64> = src.map(|r| r.sequence_no).collect();
        assert_eq!(seqs, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn parse_source_spec() {
        assert_eq!(SourceConfig::parse("synthetic").kind, SourceKind::Synthetic);
        assert_eq!(SourceConfig::parse("synthetic:42").path_or_seed, "42");
        assert_eq!(SourceConfig::parse("frames/").kind, SourceKind::ImageSequence);
    }

    #[test]
    fn config_invariants() {
        assert!(open_source(&SourceConfig::synthetic(1, Some(0))).is_err());
        assert!(open_source(&SourceConfig::synthetic(1, None).with_fps(0.0)).is_err());
    }

    #[test]
    fn annotate_draws_outline() {
        let frame = Frame::gray(5, 5, vec![0; 25]).unwrap();
        let det = Detection {
            bbox: crate::message::BoundingBox { x: 1, y: 1, w: 3, h: 3 },
            score: 1.0,
            label: "x".into(),
            detection_id: 0,
        };
        let out = annotate(&frame, &[det], [255, 0, 0]);
        let red = out.data.chunks(3).filter(|p| p == &[255, 0, 0]).count();
        assert_eq!(red, 8);
    }
}
