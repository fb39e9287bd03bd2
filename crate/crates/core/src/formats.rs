//! Frame ingestion (PGM/PPM directories, Y4M luma) and `.flo` flow dumps.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::imaging::{Frame, ImagingError};
use crate::optflow::MotionField;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: {source}")]
    Frame { path: String, source: ImagingError },
    #[error("{path}: no frames found")]
    Empty { path: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.display().to_string(), source }
}

fn parse_err(path: &Path, message: impl Into<String>) -> FormatError {
    FormatError::Parse { path: path.display().to_string(), message: message.into() }
}

/// Reads whitespace-separated header tokens, skipping `#` comments. Leaves
/// the reader positioned after the single whitespace byte that ends the
/// last token.
fn header_tokens(bytes: &[u8], count: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return None;
    }
    Some((tokens, i + 1))
}

/// Decodes a binary PGM (P5) or PPM (P6, converted to luma) image.
pub fn decode_pnm(bytes: &[u8], index: u64, path: &Path) -> Result<Frame, FormatError> {
    let (tokens, offset) = header_tokens(bytes, 4).ok_or_else(|| parse_err(path, "truncated header"))?;
    let channels = match tokens[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(parse_err(path, format!("unsupported magic {other:?}, expected P5 or P6"))),
    };
    let num = |s: &str, what: &str| -> Result<usize, FormatError> {
        s.parse::<usize>().map_err(|_| parse_err(path, format!("bad {what} {s:?}")))
    };
    let width = num(&tokens[1], "width")?;
    let height = num(&tokens[2], "height")?;
    let maxval = num(&tokens[3], "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(parse_err(path, format!("maxval {maxval} is not 8-bit")));
    }
    let need = width * height * channels;
    let body = &bytes[offset..];
    if body.len() < need {
        return Err(parse_err(path, format!("expected {need} sample bytes, found {}", body.len())));
    }
    let body = &body[..need];
    let rescale = |b: &[u8]| -> Vec<u8> {
        if maxval == 255 {
            b.to_vec()
        } else {
            b.iter().map(|&v| ((v as usize * 255 + maxval / 2) / maxval).min(255) as u8).collect()
        }
    };
    let frame = if channels == 1 {
        Frame::from_gray8(width, height, index, &rescale(body))
    } else {
        Frame::from_rgb8(width, height, index, &rescale(body))
    };
    frame.map_err(|source| FormatError::Frame { path: path.display().to_string(), source })
}

pub fn read_pgm(path: impl AsRef<Path>, index: u64) -> Result<Frame, FormatError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_pnm(&bytes, index, path)
}

pub fn encode_pgm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
    out.extend(frame.to_gray8());
    out
}

pub fn write_pgm(path: impl AsRef<Path>, frame: &Frame) -> Result<(), FormatError> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(frame)).map_err(io_err(path))
}

/// Boxed stream of frames with consecutive indices starting at 0.
pub type FrameStream = Box<dyn Iterator<Item = Result<Frame, FormatError>> + Send>;

/// `.pgm`/`.ppm` files of a directory in lexicographic order.
pub struct PnmDirectory {
    files: std::vec::IntoIter<PathBuf>,
    next_index: u64,
}

impl PnmDirectory {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, FormatError> {
        let dir = dir.as_ref();
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("ppm"))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(FormatError::Empty { path: dir.display().to_string() });
        }
        Ok(Self { files: files.into_iter(), next_index: 0 })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.len() == 0
    }
}

impl Iterator for PnmDirectory {
    type Item = Result<Frame, FormatError>;

    fn next(&mut self) -> Option<Self::Item> {
        let path = self.files.next()?;
        let index = self.next_index;
        self.next_index += 1;
        Some(read_pgm(&path, index))
    }
}

/// YUV4MPEG2 reader yielding the luma plane of each frame.
pub struct Y4mReader<R> {
    reader: R,
    path: PathBuf,
    width: usize,
    height: usize,
    chroma_bytes: usize,
    next_index: u64,
    failed: bool,
}

impl Y4mReader<BufReader<fs::File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(io_err(path))?;
        Self::new(BufReader::new(file), path)
    }
}

impl<R: BufRead> Y4mReader<R> {
    pub fn new(mut reader: R, path: &Path) -> Result<Self, FormatError> {
        let mut header = Vec::new();
        reader.read_until(b'\n', &mut header).map_err(io_err(path))?;
        let header = String::from_utf8_lossy(&header);
        let mut parts = header.split_ascii_whitespace();
        if parts.next() != Some("YUV4MPEG2") {
            return Err(parse_err(path, "missing YUV4MPEG2 signature"));
        }
        let (mut width, mut height, mut colorspace) = (0usize, 0usize, "420jpeg".to_string());
        for p in parts {
            let (tag, value) = p.split_at(1);
            match tag {
                "W" => width = value.parse().map_err(|_| parse_err(path, format!("bad width {value:?}")))?,
                "H" => height = value.parse().map_err(|_| parse_err(path, format!("bad height {value:?}")))?,
                "C" => colorspace = value.to_string(),
                _ => {}
            }
        }
        if width == 0 || height == 0 {
            return Err(parse_err(path, "header lacks W or H"));
        }
        let (cw, ch) = (width.div_ceil(2), height.div_ceil(2));
        let chroma_bytes = match colorspace.as_str() {
            "420jpeg" | "420paldv" | "420mpeg2" | "420" => 2 * cw * ch,
            "422" => 2 * cw * height,
            "444" => 2 * width * height,
            "mono" => 0,
            other => return Err(parse_err(path, format!("unsupported colorspace {other:?}"))),
        };
        Ok(Self { reader, path: path.to_path_buf(), width, height, chroma_bytes, next_index: 0, failed: false })
    }

    pub fn dimensions(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn read_frame(&mut self) -> Result<Option<Frame>, FormatError> {
        let mut line = Vec::new();
        let n = self.reader.read_until(b'\n', &mut line).map_err(io_err(&self.path))?;
        if n == 0 {
            return Ok(None);
        }
        if !line.starts_with(b"FRAME") {
            return Err(parse_err(&self.path, format!("frame {} lacks FRAME marker", self.next_index)));
        }
        let mut luma = vec![0u8; self.width * self.height];
        self.reader
            .read_exact(&mut luma)
            .map_err(|_| parse_err(&self.path, format!("frame {} truncated", self.next_index)))?;
        let mut chroma = vec![0u8; self.chroma_bytes];
        self.reader
            .read_exact(&mut chroma)
            .map_err(|_| parse_err(&self.path, format!("frame {} truncated", self.next_index)))?;
        let frame = Frame::from_gray8(self.width, self.height, self.next_index, &luma)
            .map_err(|source| FormatError::Frame { path: self.path.display().to_string(), source })?;
        self.next_index += 1;
        Ok(Some(frame))
    }
}

impl<R: BufRead> Iterator for Y4mReader<R> {
    type Item = Result<Frame, FormatError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.read_frame() {
            Ok(f) => f.map(Ok),
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

/// Writes frames as a monochrome Y4M stream.
pub fn write_y4m(mut out: impl Write, frames: &[Frame], fps: u32) -> std::io::Result<()> {
    let Some(first) = frames.first() else {
        return Ok(());
    };
    writeln!(out, "YUV4MPEG2 W{} H{} F{fps}:1 Ip A1:1 Cmono", first.width(), first.height())?;
    for f in frames {
        out.write_all(b"FRAME\n")?;
        out.write_all(&f.to_gray8())?;
    }
    Ok(())
}

/// Opens a directory of PGM/PPM files, a single PGM/PPM file or a `.y4m` file.
pub fn open_frames(path: impl AsRef<Path>) -> Result<FrameStream, FormatError> {
    let path = path.as_ref();
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    if path.is_dir() {
        Ok(Box::new(PnmDirectory::open(path)?))
    } else if ext.as_deref() == Some("y4m") {
        Ok(Box::new(Y4mReader::open(path)?))
    } else if path.exists() && matches!(ext.as_deref(), Some("pgm" | "ppm" | "pnm")) {
        Ok(Box::new(std::iter::once(read_pgm(path, 0))))
    } else if path.exists() {
        Err(parse_err(path, "expected a PGM file, a directory of PGM files or a .y4m file"))
    } else {
        Err(FormatError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        })
    }
}

const FLO_MAGIC: &[u8; 4] = b"PIEH";

/// Middlebury `.flo`: magic, little-endian width and height, interleaved
/// little-endian `f32` `(dx, dy)` pairs.
pub fn encode_flo(field: &MotionField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * field.width() * field.height());
    out.extend_from_slice(FLO_MAGIC);
    out.extend_from_slice(&(field.width() as i32).to_le_bytes());
    out.extend_from_slice(&(field.height() as i32).to_le_bytes());
    for (dx, dy) in field.dx().iter().zip(field.dy()) {
        out.extend_from_slice(&dx.to_le_bytes());
        out.extend_from_slice(&dy.to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8], path: &Path) -> Result<MotionField, FormatError> {
    if bytes.len() < 12 || &bytes[..4] != FLO_MAGIC {
        return Err(parse_err(path, "missing PIEH magic"));
    }
    let word = |i: usize| i32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let (w, h) = (word(4), word(8));
    if w <= 0 || h <= 0 {
        return Err(parse_err(path, format!("bad dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let body = &bytes[12..];
    if body.len() != 8 * w * h {
        return Err(parse_err(path, format!("expected {} payload bytes, found {}", 8 * w * h, body.len())));
    }
    let mut dx = Vec::with_capacity(w * h);
    let mut dy = Vec::with_capacity(w * h);
    for pair in body.chunks_exact(8) {
        dx.push(f32::from_le_bytes(pair[..4].try_into().unwrap()));
        dy.push(f32::from_le_bytes(pair[4..].try_into().unwrap()));
    }
    MotionField::from_components(w, h, dx, dy).map_err(|e| parse_err(path, e.to_string()))
}

pub fn write_flo(path: impl AsRef<Path>, field: &MotionField) -> Result<(), FormatError> {
    let path = path.as_ref();
    fs::write(path, encode_flo(field)).map_err(io_err(path))
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<MotionField, FormatError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_flo(&bytes, path)
}
