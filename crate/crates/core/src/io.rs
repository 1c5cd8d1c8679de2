//! Frame directories: lexicographically ordered 8-bit RGB PNG files.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;
use crate::video::VideoSegment;

fn is_png(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

pub fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?.into_iter().filter(|p| is_png(p)).collect())
}

/// Videos under `root`: the directory itself if it holds frames, otherwise
/// each subdirectory that does, in name order.
pub fn list_videos(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !frame_files(root)?.is_empty() {
        let name = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "video".into());
        return Ok(vec![(name, root.to_path_buf())]);
    }
    let mut videos = vec![];
    for p in sorted_entries(root)? {
        if p.is_dir() && !frame_files(&p)?.is_empty() {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            videos.push((name, p));
        }
    }
    if videos.is_empty() {
        return Err(invalid!("no PNG frames found under {}", root.display()));
    }
    Ok(videos)
}

pub fn read_frames(dir: &Path) -> Result<VideoSegment> {
    let files = frame_files(dir)?;
    if files.is_empty() {
        return Err(invalid!("no PNG frames in {}", dir.display()));
    }
    let mut data = vec![];
    let mut size = None;
    for f in &files {
        let img = image::open(f)
            .map_err(|source| Error::Image {
                path: f.clone(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        if *size.get_or_insert((w, h)) != (w, h) {
            return Err(invalid!("{} is {w}x{h}, earlier frames differ", f.display()));
        }
        let (w, h) = (w as usize, h as usize);
        let raw = img.as_raw();
        for c in 0..3 {
            for i in 0..h * w {
                data.push(raw[i * 3 + c] as f64 / 255.0);
            }
        }
    }
    let (w, h) = size.unwrap();
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    VideoSegment::new(
        Tensor::from_vec(&[files.len(), 3, h as usize, w as usize], data)?,
        name,
        0,
    )
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `frame_00000.png`, `frame_00001.png`, ... into `dir`.
pub fn write_frames(dir: &Path, video: &VideoSegment) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (video.height(), video.width());
    for t in 0..video.len() {
        let f = video.frame(t);
        let d = f.data();
        let mut raw = vec![0u8; h * w * 3];
        for c in 0..3 {
            for i in 0..h * w {
                raw[i * 3 + c] = to_u8(d[c * h * w + i]);
            }
        }
        let path = dir.join(format!("frame_{t:05}.png"));
        save_rgb(&path, w, h, raw)?;
    }
    Ok(())
}

/// Writes an (H, W, 3) image tensor with values in `[0, 1]`.
pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    if img.rank() != 3 || img.dim(2) != 3 {
        return Err(invalid!("image must be (H, W, 3), got {:?}", img.shape()));
    }
    let raw = img.data().iter().map(|v| to_u8(*v)).collect();
    save_rgb(path, img.dim(1), img.dim(0), raw)
}

fn save_rgb(path: &Path, w: usize, h: usize, raw: Vec<u8>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| invalid!("image buffer size mismatch"))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}
