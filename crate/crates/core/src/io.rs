//! File formats: frame directories, JSON Lines tracks, PNG masks, JSON reports.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudolabel::Mask;
use crate::tracker::{Frame, ParticleTrack, TrackPoint};

const FRAME_EXTENSIONS: &[&str] = &["png", "pgm", "ppm", "pnm"];

/// Sorted paths of the files in `dir` whose extension is one of `extensions`.
fn list_files(dir: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| extensions.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

fn decode(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_frame(path: &Path, index: usize) -> Result<Frame> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let frame = if img.color().has_color() {
        Frame::from_rgb8(w, h, index, img.to_rgb8().as_raw())
    } else {
        Frame::from_luma8(w, h, index, img.to_luma8().as_raw())
    };
    frame.map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads every PNG/PGM frame in `dir`, ordered by file name. Frame `i` gets index `i`.
pub fn load_frames(dir: &Path) -> Result<Vec<Frame>> {
    let files = list_files(dir, FRAME_EXTENSIONS)?;
    if files.is_empty() {
        return Err(Error::EmptyInput(format!("no PNG/PGM frames in {}", dir.display())));
    }
    let mut frames: Vec<Frame> = Vec::with_capacity(files.len());
    for (i, path) in files.iter().enumerate() {
        let frame = load_frame(path, i)?;
        if let Some(first) = frames.first() {
            if !first.same_size(&frame) {
                return Err(Error::FrameSizeMismatch);
            }
        }
        frames.push(frame);
    }
    Ok(frames)
}

pub fn save_frame(frame: &Frame, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = frame.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    let img =
        GrayImage::from_raw(frame.width() as u32, frame.height() as u32, bytes).expect("buffer matches frame size");
    save_image(&DynamicImage::ImageLuma8(img), path)
}

fn save_image(img: &DynamicImage, path: &Path) -> Result<()> {
    img.save_with_format(path, ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Serialize, Deserialize)]
struct TrackRecord {
    id: u64,
    points: Vec<(usize, f64, f64)>,
}

pub fn write_tracks<W: Write>(tracks: &[ParticleTrack], mut out: W) -> std::io::Result<()> {
    for t in tracks {
        let record = TrackRecord {
            id: t.id,
            points: t.points.iter().map(|p| (p.t, p.x, p.y)).collect(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_tracks(tracks: &[ParticleTrack], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_tracks(tracks, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// Parses JSON Lines tracks. Blank lines are skipped; errors carry the 1-based line number.
pub fn read_tracks<R: BufRead>(reader: R, origin: &Path) -> Result<Vec<ParticleTrack>> {
    let mut tracks = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: line_no,
            message,
        };
        let record: TrackRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if record.points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(parse_err("frame indices must be strictly increasing".into()));
        }
        tracks.push(ParticleTrack {
            id: record.id,
            points: record
                .points
                .into_iter()
                .map(|(t, x, y)| TrackPoint { t, x, y })
                .collect(),
            alive: true,
        });
    }
    Ok(tracks)
}

pub fn load_tracks(path: &Path) -> Result<Vec<ParticleTrack>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_tracks(BufReader::new(file), path)
}

pub fn mask_file_name(frame_index: usize) -> String {
    format!("mask_{frame_index:06}.png")
}

pub fn gt_mask_file_name(frame_index: usize) -> String {
    format!("gt_mask_{frame_index:06}.png")
}

/// Trailing decimal digits of a file stem, e.g. `gt_mask_000020.png` -> 20.
pub fn frame_index_from_name(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem.chars().rev().take_while(char::is_ascii_digit).collect();
    if digits.is_empty() {
        return None;
    }
    digits.chars().rev().collect::<String>().parse().ok()
}

/// 8-bit PNG, background 0 and foreground 255.
pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let bytes = mask.bits().iter().map(|b| if *b { 255u8 } else { 0 }).collect();
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, bytes).expect("buffer matches mask size");
    save_image(&DynamicImage::ImageLuma8(img), path)
}

/// Any gray value of at least 128 is foreground.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = decode(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let bits = img.pixels().map(|Luma([v])| *v >= 128).collect();
    let keyframe = frame_index_from_name(path).unwrap_or(0);
    Ok(Mask::from_bits(w, h, bits)?.with_keyframe(keyframe))
}

/// PNG masks in `dir` keyed by the frame index parsed from each file name.
pub fn list_masks(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for path in list_files(dir, &["png"])? {
        let idx = frame_index_from_name(&path).ok_or_else(|| Error::Image {
            path: path.clone(),
            message: "mask file name carries no frame index".into(),
        })?;
        out.push((idx, path));
    }
    out.sort_by_key(|(i, _)| *i);
    Ok(out)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}
