//! Decoded video segments and their on-disk representations.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{arg, Error, Result};

pub const CHANNELS: usize = 3;
pub const MIN_SIDE: usize = 16;

/// Dynamic-range tag carried alongside the samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeTag {
    Sdr,
    HdrLike,
}

/// A decoded RGB video segment stored as interleaved `T x H x W x 3` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: usize,
    height: usize,
    width: usize,
    bit_depth: u8,
    frame_rate: f64,
    range: RangeTag,
    samples: Vec<u16>,
}

/// JSON header written in front of raw sample files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub dtype: String,
    pub bit_depth: u8,
    pub frame_rate: f64,
    pub range: RangeTag,
}

impl FrameSequence {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        bit_depth: u8,
        frame_rate: f64,
        range: RangeTag,
        samples: Vec<u16>,
    ) -> Result<Self> {
        if frames == 0 {
            return arg("frame sequence needs at least one frame");
        }
        if height < MIN_SIDE || width < MIN_SIDE {
            return arg(format!("frames must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}"));
        }
        if bit_depth != 8 && bit_depth != 10 {
            return arg(format!("unsupported bit depth {bit_depth}"));
        }
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return arg("frame rate must be positive");
        }
        if samples.len() != frames * height * width * CHANNELS {
            return arg(format!(
                "sample count {} does not match {frames}x{height}x{width}x{CHANNELS}",
                samples.len()
            ));
        }
        let max = (1u32 << bit_depth) - 1;
        if let Some(v) = samples.iter().find(|&&v| u32::from(v) > max) {
            return arg(format!("sample {v} exceeds {bit_depth}-bit range"));
        }
        Ok(Self { frames, height, width, bit_depth, frame_rate, range, samples })
    }

    /// Builds a sequence from a per-sample function `f(t, y, x, c)`; values are clamped and rounded.
    pub fn from_fn(
        frames: usize,
        height: usize,
        width: usize,
        bit_depth: u8,
        frame_rate: f64,
        range: RangeTag,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let max = f64::from((1u32 << bit_depth) - 1);
        let mut samples = Vec::with_capacity(frames * height * width * CHANNELS);
        for t in 0..frames {
            for y in 0..height {
                for x in 0..width {
                    for c in 0..CHANNELS {
                        samples.push(f(t, y, x, c).round().clamp(0.0, max) as u16);
                    }
                }
            }
        }
        Self::new(frames, height, width, bit_depth, frame_rate, range, samples)
    }

    /// A sequence with the same metadata as `self` but different samples.
    pub fn with_samples(&self, samples: Vec<u16>) -> Result<Self> {
        Self::new(self.frames, self.height, self.width, self.bit_depth, self.frame_rate, self.range, samples)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn range(&self) -> RangeTag {
        self.range
    }

    pub fn max_value(&self) -> f64 {
        f64::from((1u32 << self.bit_depth) - 1)
    }

    pub fn samples(&self) -> &[u16] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<u16> {
        self.samples
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * CHANNELS
    }

    pub fn frame(&self, t: usize) -> &[u16] {
        let n = self.frame_len();
        &self.samples[t * n..(t + 1) * n]
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.height + y) * self.width + x) * CHANNELS + c
    }

    #[inline]
    pub fn get(&self, t: usize, y: usize, x: usize, c: usize) -> u16 {
        self.samples[self.index(t, y, x, c)]
    }

    /// True when geometry, bit depth and channel count agree.
    pub fn same_geometry(&self, other: &Self) -> bool {
        self.frames == other.frames
            && self.height == other.height
            && self.width == other.width
            && self.bit_depth == other.bit_depth
    }

    pub fn check_same_geometry(&self, other: &Self) -> Result<()> {
        if self.same_geometry(other) {
            Ok(())
        } else {
            arg(format!(
                "geometry mismatch: {}x{}x{}@{}bit vs {}x{}x{}@{}bit",
                self.frames, self.height, self.width, self.bit_depth,
                other.frames, other.height, other.width, other.bit_depth
            ))
        }
    }

    /// Spatio-temporal crop.
    pub fn crop(&self, t0: usize, frames: usize, y0: usize, x0: usize, height: usize, width: usize) -> Result<Self> {
        if t0 + frames > self.frames || y0 + height > self.height || x0 + width > self.width {
            return arg("crop window exceeds sequence bounds");
        }
        let mut samples = Vec::with_capacity(frames * height * width * CHANNELS);
        for t in t0..t0 + frames {
            for y in y0..y0 + height {
                let start = self.index(t, y, x0, 0);
                samples.extend_from_slice(&self.samples[start..start + width * CHANNELS]);
            }
        }
        Self::new(frames, height, width, self.bit_depth, self.frame_rate, self.range, samples)
    }

    /// Frames `[start, start + len)`; frames past the end repeat the final frame.
    pub fn frame_window(&self, start: usize, len: usize) -> Result<Self> {
        if start >= self.frames {
            return arg("window start past end of sequence");
        }
        let mut samples = Vec::with_capacity(len * self.frame_len());
        for t in start..start + len {
            samples.extend_from_slice(self.frame(t.min(self.frames - 1)));
        }
        Self::new(len, self.height, self.width, self.bit_depth, self.frame_rate, self.range, samples)
    }

    /// Center crop to the largest multiple of `multiple` in each spatial dimension.
    pub fn center_crop_to_multiple(&self, multiple: usize) -> Result<Self> {
        let h = self.height / multiple * multiple;
        let w = self.width / multiple * multiple;
        if h == 0 || w == 0 {
            return arg(format!("frame {}x{} smaller than {multiple}", self.height, self.width));
        }
        if h == self.height && w == self.width {
            return Ok(self.clone());
        }
        self.crop(0, self.frames, (self.height - h) / 2, (self.width - w) / 2, h, w)
    }

    /// Concatenates sequences of identical spatial geometry along time.
    pub fn concat(parts: &[FrameSequence]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Argument("nothing to concatenate".into()))?;
        let mut samples = Vec::new();
        let mut frames = 0;
        for p in parts {
            if p.height != first.height || p.width != first.width || p.bit_depth != first.bit_depth {
                return arg("cannot concatenate sequences of different geometry");
            }
            samples.extend_from_slice(&p.samples);
            frames += p.frames;
        }
        Self::new(frames, first.height, first.width, first.bit_depth, first.frame_rate, first.range, samples)
    }

    /// Hex SHA-256 over header fields and samples.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.header()).expect("header serializes"));
        for s in &self.samples {
            h.update(s.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn header(&self) -> RawHeader {
        RawHeader {
            frames: self.frames,
            height: self.height,
            width: self.width,
            channels: CHANNELS,
            dtype: if self.bit_depth == 8 { "u8".into() } else { "u16le".into() },
            bit_depth: self.bit_depth,
            frame_rate: self.frame_rate,
            range: self.range,
        }
    }

    /// Writes the raw tensor format: one JSON header line, then little-endian samples.
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.samples.len() * 2 + 256);
        serde_json::to_writer(&mut out, &self.header())?;
        out.push(b'\n');
        if self.bit_depth == 8 {
            out.extend(self.samples.iter().map(|&s| s as u8));
        } else {
            for s in &self.samples {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn read_raw(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(fs::File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: RawHeader = serde_json::from_str(line.trim_end())?;
        if header.channels != CHANNELS {
            return arg(format!("expected {CHANNELS} channels, header says {}", header.channels));
        }
        let mut body = Vec::new();
        reader.read_to_end(&mut body)?;
        let samples: Vec<u16> = match header.dtype.as_str() {
            "u8" => body.into_iter().map(u16::from).collect(),
            "u16le" => {
                if body.len() % 2 != 0 {
                    return arg("odd byte count in u16 sample file");
                }
                body.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect()
            }
            other => return arg(format!("unknown dtype {other}")),
        };
        Self::new(
            header.frames,
            header.height,
            header.width,
            header.bit_depth,
            header.frame_rate,
            header.range,
            samples,
        )
    }

    /// Reads a directory of per-frame PNG images.
    ///
    /// When `frames.json` is present it lists the frame files in order along with
    /// `frame_rate`, `bit_depth` and `range`; otherwise all `*.png` files are taken
    /// in lexical order as 8-bit SDR at 30 fps.
    pub fn read_png_dir(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct PngManifest {
            frames: Vec<String>,
            #[serde(default = "default_rate")]
            frame_rate: f64,
            #[serde(default = "default_depth")]
            bit_depth: u8,
            #[serde(default = "default_range")]
            range: RangeTag,
        }
        fn default_rate() -> f64 {
            30.0
        }
        fn default_depth() -> u8 {
            8
        }
        fn default_range() -> RangeTag {
            RangeTag::Sdr
        }

        let manifest_path = dir.join("frames.json");
        let manifest = if manifest_path.exists() {
            serde_json::from_slice::<PngManifest>(&fs::read(&manifest_path)?)?
        } else {
            let mut names: Vec<String> = fs::read_dir(dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
                .collect();
            names.sort();
            PngManifest { frames: names, frame_rate: 30.0, bit_depth: 8, range: RangeTag::Sdr }
        };
        if manifest.frames.is_empty() {
            return arg(format!("no frames found in {}", dir.display()));
        }
        let max = f64::from((1u32 << manifest.bit_depth) - 1);
        let mut samples = Vec::new();
        let (mut height, mut width) = (0, 0);
        for (i, name) in manifest.frames.iter().enumerate() {
            let img = image::open(dir.join(name))?.into_rgb16();
            let (w, h) = (img.width() as usize, img.height() as usize);
            if i == 0 {
                (height, width) = (h, w);
            } else if (h, w) != (height, width) {
                return arg(format!("frame {name} has size {w}x{h}, expected {width}x{height}"));
            }
            samples.extend(img.into_raw().into_iter().map(|v| (f64::from(v) / 65535.0 * max).round() as u16));
        }
        Self::new(
            manifest.frames.len(),
            height,
            width,
            manifest.bit_depth,
            manifest.frame_rate,
            manifest.range,
            samples,
        )
    }

    /// Loads either a raw tensor file or a PNG frame directory.
    pub fn load(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Self::read_png_dir(path)
        } else {
            Self::read_raw(path)
        }
    }
}
