//! Staged file output, PGM encoding and hashing.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dualguide_core::checkpoint::Checkpoint;
use dualguide_core::Tensor;
use sha2::{Digest, Sha256};

/// Files are written beside their destination with a `.partial` suffix and
/// renamed into place on [`Staging::commit`]. Dropping an uncommitted staging
/// area deletes everything it wrote.
#[derive(Default)]
pub struct Staging {
    pending: Vec<(PathBuf, PathBuf)>,
    committed: bool,
}

impl Staging {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("cannot create directory {}", dir.display()))?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".partial");
        let tmp = PathBuf::from(tmp);
        // record before writing so a failed write is cleaned up too
        self.pending.push((tmp.clone(), path.to_path_buf()));
        fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(())
    }

    /// Bytes staged for `path`, if any.
    pub fn staged(&self, path: &Path) -> Option<Vec<u8>> {
        self.pending
            .iter()
            .rev()
            .find(|(_, dst)| dst == path)
            .and_then(|(tmp, _)| fs::read(tmp).ok())
    }

    pub fn commit(mut self) -> Result<Vec<PathBuf>> {
        let mut done = Vec::with_capacity(self.pending.len());
        for (tmp, dst) in &self.pending {
            fs::rename(tmp, dst).with_context(|| format!("cannot move {} into place", dst.display()))?;
            done.push(dst.clone());
        }
        self.committed = true;
        Ok(done)
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            for (tmp, _) in &self.pending {
                let _ = fs::remove_file(tmp);
            }
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Quantise a `[1, 1, H, W]` image in [0, 1] to 8-bit binary PGM.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 1 {
        bail!("PGM output needs a single grayscale image, got shape {s:?}");
    }
    Ok(pgm_bytes(s[3], s[2], &quantize(image.data())))
}

pub fn quantize(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parse an 8-bit binary PGM into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Panel> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            bail!("truncated PGM header");
        }
        fields.push(std::str::from_utf8(&bytes[start..pos])?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        bail!("only 8-bit binary PGM (P5, maxval 255) is supported");
    }
    let (w, h): (usize, usize) = (fields[1].parse()?, fields[2].parse()?);
    let data = &bytes[pos + 1..];
    if data.len() != w * h {
        bail!("PGM payload has {} bytes, expected {}", data.len(), w * h);
    }
    Ok((w, h, data.to_vec()))
}

/// Decoded grayscale image: width, height and row-major pixels.
pub type Panel = (usize, usize, Vec<u8>);

/// Side-by-side strip of equal-size images with one mid-grey column between panels.
pub fn strip(panels: &[Panel]) -> Result<Vec<u8>> {
    let (w, h, _) = panels.first().context("strip needs at least one panel")?;
    if panels.iter().any(|(pw, ph, _)| pw != w || ph != h) {
        bail!("strip panels differ in size");
    }
    let width = panels.len() * w + panels.len() - 1;
    let mut pixels = Vec::with_capacity(width * h);
    for row in 0..*h {
        for (k, (_, _, p)) in panels.iter().enumerate() {
            if k > 0 {
                pixels.push(128);
            }
            pixels.extend_from_slice(&p[row * w..(row + 1) * w]);
        }
    }
    Ok(pgm_bytes(width, *h, &pixels))
}

/// One full-precision image in the shared tensor checkpoint format.
pub fn tensor_file(name: &str, t: &Tensor) -> Vec<u8> {
    Checkpoint {
        meta: Default::default(),
        tensors: vec![(name.to_string(), t.clone())],
    }
    .to_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let img = Tensor::new(vec![1, 1, 2, 3], vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        let bytes = encode_pgm(&img).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let (w, h, px) = decode_pgm(&bytes).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(px, vec![0, 128, 255, 64, 191, 26]);
    }

    #[test]
    fn strip_width_has_separators() {
        let p = (4, 2, vec![7u8; 8]);
        let bytes = strip(&[p.clone(), p.clone(), p.clone(), p]).unwrap();
        let (w, h, px) = decode_pgm(&bytes).unwrap();
        assert_eq!((w, h), (4 * 4 + 3, 2));
        assert_eq!(px[4], 128);
    }

    #[test]
    fn uncommitted_staging_cleans_up() {
        let dir = std::env::temp_dir().join(format!("dualguide-staging-{}", std::process::id()));
        let target = dir.join("a.txt");
        {
            let mut s = Staging::new();
            s.write(&target, b"x").unwrap();
        }
        assert!(!target.exists());
        assert!(fs::read_dir(&dir).unwrap().next().is_none());
        let mut s = Staging::new();
        s.write(&target, b"y").unwrap();
        s.commit().unwrap();
        assert_eq!(fs::read(&target).unwrap(), b"y");
        fs::remove_dir_all(dir).unwrap();
    }
}
