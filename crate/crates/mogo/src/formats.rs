//! Motion and token file formats.
//!
//! - MGO1: `"MGO1" | u32 N | u32 D | f32 fps | N*D f32`, little-endian.
//! - CSV: header `f0,...,f{D-1}`, one frame per row. No fps column; the
//!   caller supplies one.
//! - JSON: `{"fps": float, "frames": [[...], ...]}`.
//! - MGT1: `"MGT1" | u32 n | u32 layers | n*layers u32`.
//! - Captions: `<stem>.txt`, one caption per non-empty line.

use std::fs;
use std::path::{Path, PathBuf};

use mogo_core::motion::MotionSequence;
use mogo_core::rvq::TokenGrid;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CSV_FPS: f32 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Mgo1,
    Csv,
    Json,
}

impl Format {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "mgo1" | "mgo" => Some(Format::Mgo1),
            "csv" => Some(Format::Csv),
            "json" => Some(Format::Json),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Format::Mgo1 => "mgo1",
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor over a byte slice.
pub(crate) struct Reader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {} (wanted {n} more)", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> std::result::Result<f32, String> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn encode_mgo1(seq: &MotionSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + seq.data().len() * 4);
    out.extend_from_slice(b"MGO1");
    out.extend_from_slice(&(seq.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(seq.dim() as u32).to_le_bytes());
    out.extend_from_slice(&seq.fps().to_le_bytes());
    for v in seq.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_mgo1(bytes: &[u8]) -> std::result::Result<MotionSequence, String> {
    let mut r = Reader::new(bytes);
    if r.take(4)
        .map_err(|_| "file too short for the MGO1 magic".to_string())?
        != b"MGO1"
    {
        return Err("bad magic, expected MGO1".into());
    }
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let fps = r.f32()?;
    let want = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(4))
        .ok_or("frame count overflows")?;
    if r.buf.len() - r.pos != want {
        return Err(format!(
            "header says {n}x{d} floats ({want} bytes), payload has {} bytes",
            r.buf.len() - r.pos
        ));
    }
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n * d {
        let v = r.f32()?;
        if !v.is_finite() {
            return Err(format!(
                "non-finite value at frame {}, channel {}",
                i / d.max(1),
                i % d.max(1)
            ));
        }
        data.push(v);
    }
    MotionSequence::new(n, d, fps, data).map_err(|e| e.to_string())
}

pub fn encode_csv(seq: &MotionSequence) -> String {
    let mut s = (0..seq.dim())
        .map(|c| format!("f{c}"))
        .collect::<Vec<_>>()
        .join(",");
    s.push('\n');
    for t in 0..seq.frames() {
        // `{}` prints the shortest string that parses back to the same f32
        s.push_str(
            &seq.frame(t)
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        s.push('\n');
    }
    s
}

pub fn decode_csv(text: &str, fps: f32) -> std::result::Result<MotionSequence, String> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or("empty CSV")?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    for (i, c) in cols.iter().enumerate() {
        if *c != format!("f{i}") {
            return Err(format!(
                "row 1, column {}: header expected f{i}, found {c:?}",
                i + 1
            ));
        }
    }
    let d = cols.len();
    let mut data = Vec::new();
    let mut n = 0;
    for (ln, line) in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != d {
            return Err(format!(
                "row {}: {} columns, header has {d}",
                ln + 1,
                cells.len()
            ));
        }
        for (c, cell) in cells.iter().enumerate() {
            let v: f32 = cell.trim().parse().map_err(|_| {
                format!(
                    "row {}, column {}: not a number: {:?}",
                    ln + 1,
                    c + 1,
                    cell.trim()
                )
            })?;
            if !v.is_finite() {
                return Err(format!(
                    "row {}, column {}: non-finite value",
                    ln + 1,
                    c + 1
                ));
            }
            data.push(v);
        }
        n += 1;
    }
    MotionSequence::new(n, d, fps, data).map_err(|e| e.to_string())
}

#[derive(Serialize, Deserialize)]
struct JsonMotion {
    fps: f32,
    frames: Vec<Vec<f32>>,
}

pub fn encode_json(seq: &MotionSequence) -> String {
    let m = JsonMotion {
        fps: seq.fps(),
        frames: (0..seq.frames()).map(|t| seq.frame(t).to_vec()).collect(),
    };
    serde_json::to_string(&m).expect("plain data serializes")
}

pub fn decode_json(text: &str) -> std::result::Result<MotionSequence, String> {
    let m: JsonMotion = serde_json::from_str(text)
        .map_err(|e| format!("line {}, column {}: {e}", e.line(), e.column()))?;
    let d = m.frames.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(m.frames.len() * d);
    for (t, f) in m.frames.iter().enumerate() {
        if f.len() != d {
            return Err(format!("frame {t}: {} values, frame 0 has {d}", f.len()));
        }
        data.extend_from_slice(f);
    }
    MotionSequence::new(m.frames.len(), d, m.fps, data).map_err(|e| e.to_string())
}

pub fn load_motion(path: &Path, format: Option<Format>) -> Result<MotionSequence> {
    load_motion_fps(path, format, DEFAULT_CSV_FPS)
}

/// As [`load_motion`], with the frame rate CSV files are read at.
pub fn load_motion_fps(
    path: &Path,
    format: Option<Format>,
    csv_fps: f32,
) -> Result<MotionSequence> {
    let format = format
        .or_else(|| Format::from_path(path))
        .ok_or_else(|| Error::config(format!("{}: unknown motion format", path.display())))?;
    let bytes = read(path)?;
    let text = || String::from_utf8(bytes.clone()).map_err(|e| Error::parse(path, e));
    match format {
        Format::Mgo1 => decode_mgo1(&bytes),
        Format::Csv => decode_csv(&text()?, csv_fps),
        Format::Json => decode_json(&text()?),
    }
    .map_err(|m| Error::parse(path, m))
}

pub fn save_motion(path: &Path, seq: &MotionSequence, format: Option<Format>) -> Result<()> {
    let format = format
        .or_else(|| Format::from_path(path))
        .unwrap_or(Format::Mgo1);
    match format {
        Format::Mgo1 => write_file(path, &encode_mgo1(seq)),
        Format::Csv => write_file(path, encode_csv(seq).as_bytes()),
        Format::Json => write_file(path, encode_json(seq).as_bytes()),
    }
}

pub fn encode_mgt1(grid: &TokenGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + grid.ids.len() * 4);
    out.extend_from_slice(b"MGT1");
    out.extend_from_slice(&(grid.n as u32).to_le_bytes());
    out.extend_from_slice(&(grid.layers as u32).to_le_bytes());
    for id in &grid.ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    out
}

pub fn decode_mgt1(bytes: &[u8]) -> std::result::Result<TokenGrid, String> {
    let mut r = Reader::new(bytes);
    if r.take(4)
        .map_err(|_| "file too short for the MGT1 magic".to_string())?
        != b"MGT1"
    {
        return Err("bad magic, expected MGT1".into());
    }
    let n = r.u32()? as usize;
    let layers = r.u32()? as usize;
    if r.buf.len() - r.pos != n * layers * 4 {
        return Err(format!(
            "header says {n}x{layers} ids, payload has {} bytes",
            r.buf.len() - r.pos
        ));
    }
    let ids = (0..n * layers)
        .map(|_| r.u32())
        .collect::<std::result::Result<Vec<_>, _>>()?;
    TokenGrid::new(n, layers, ids).map_err(|e| e.to_string())
}

pub fn load_tokens(path: &Path) -> Result<TokenGrid> {
    decode_mgt1(&read(path)?).map_err(|m| Error::parse(path, m))
}

pub fn save_tokens(path: &Path, grid: &TokenGrid) -> Result<()> {
    write_file(path, &encode_mgt1(grid))
}

pub fn caption_path(motion: &Path) -> PathBuf {
    motion.with_extension("txt")
}

pub fn load_captions(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn save_captions(path: &Path, captions: &[String]) -> Result<()> {
    if let Some(c) = captions.iter().find(|c| c.contains('\n')) {
        return Err(Error::config(format!("caption spans several lines: {c:?}")));
    }
    let mut s = captions.join("\n");
    s.push('\n');
    write_file(path, s.as_bytes())
}
