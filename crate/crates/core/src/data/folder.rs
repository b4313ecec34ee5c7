//! `class_name/<image>.ppm` folder loader (binary P6, 8-bit).

use std::fs;
use std::path::Path;

use super::{channel_stats, normalize_in_place, ClassRecord, Dataset};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Loaded dataset plus notices about skipped files.
#[derive(Debug)]
pub struct FolderLoad {
    pub dataset: Dataset,
    pub warnings: Vec<String>,
}

/// Decodes a binary PPM into a 3×H×W tensor with values in `[0, 1]`.
pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(Error::Format("not a binary PPM (P6)".into()));
    }
    let num = |s: String| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Format(format!("bad PPM header field `{s}`")))
    };
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval == 0 || maxval > 255 || w == 0 || h == 0 {
        return Err(Error::Format(format!(
            "unsupported PPM: {w}×{h}, maxval {maxval} (8-bit only)"
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let raster = bytes
        .get(start..start + 3 * w * h)
        .ok_or_else(|| Error::Format("truncated PPM raster".into()))?;
    let mut data = vec![0.0; 3 * w * h];
    for (p, rgb) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + p] = rgb[c] as f64 / maxval as f64;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Bilinear resize of a C×H×W tensor to C×S×S with half-pixel centers:
/// source coordinate `(d + 0.5)·in/out − 0.5`, clamped to the image.
pub fn resize_bilinear(img: &Tensor, size: usize) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::Invalid(format!("resize expects C×H×W, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = img.data();
    let coord = |d: usize, n_in: usize| -> (usize, usize, f64) {
        let f = ((d as f64 + 0.5) * n_in as f64 / size as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, f - i0 as f64)
    };
    let mut out = vec![0.0; c * size * size];
    for y in 0..size {
        let (y0, y1, ty) = coord(y, h);
        for x in 0..size {
            let (x0, x1, tx) = coord(x, w);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(ch * h + yy) * w + xx];
                out[(ch * size + y) * size + x] = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x1))
                    + ty * ((1.0 - tx) * at(y1, x0) + tx * at(y1, x1));
            }
        }
    }
    Tensor::new(vec![c, size, size], out)
}

/// Each subdirectory of `root` is a class (sorted by name); images are
/// resized to `size` and normalized per channel with dataset statistics.
pub fn load_image_folder(root: &Path, size: usize) -> Result<FolderLoad> {
    let mut dirs: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    dirs.sort_by_key(|e| e.file_name());
    if dirs.is_empty() {
        return Err(Error::Data(format!("{} contains no class folders", root.display())));
    }
    let mut warnings = Vec::new();
    let mut classes = Vec::with_capacity(dirs.len());
    for (id, dir) in dirs.iter().enumerate() {
        let name = dir.file_name().to_string_lossy().into_owned();
        let mut files: Vec<_> = fs::read_dir(dir.path())?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .collect();
        files.sort_by_key(|e| e.file_name());
        let mut instances = Vec::new();
        for f in files {
            let decoded = fs::read(f.path())
                .map_err(Error::from)
                .and_then(|b| parse_ppm(&b))
                .and_then(|t| resize_bilinear(&t, size));
            match decoded {
                Ok(t) => instances.push(t),
                Err(e) => {
                    let msg = format!("skipping {}: {e}", f.path().display());
                    log::warn!("{msg}");
                    warnings.push(msg);
                }
            }
        }
        if instances.is_empty() {
            return Err(Error::Data(format!("class folder `{name}` has no readable images")));
        }
        classes.push(ClassRecord { id, name, instances });
    }
    let all: Vec<&Tensor> = classes.iter().flat_map(|c| &c.instances).collect();
    let (mean, std) = channel_stats(&all);
    for c in &mut classes {
        c.instances
            .iter_mut()
            .for_each(|t| normalize_in_place(t, &mean, &std));
    }
    Ok(FolderLoad {
        dataset: Dataset::new(classes)?,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ppm(w: usize, h: usize, seed: u8) -> Vec<u8> {
        let mut b = format!("P6\n# test\n{w} {h}\n255\n").into_bytes();
        b.extend((0..3 * w * h).map(|i| (i as u8).wrapping_mul(seed).wrapping_add(seed)));
        b
    }

    #[test]
    fn parses_header_and_raster() {
        let t = parse_ppm(&ppm(2, 1, 1)).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        // pixel 0 = bytes (1,2,3), pixel 1 = (4,5,6)
        assert_eq!(t.at(&[0, 0, 1]), 4.0 / 255.0);
        assert_eq!(t.at(&[2, 0, 0]), 3.0 / 255.0);
        assert!(parse_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(parse_ppm(b"P6\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let t = Tensor::from_fn(&[3, 4, 4], |i| i as f64);
        assert_eq!(resize_bilinear(&t, 4).unwrap(), t);
        let c = Tensor::full(&[3, 5, 7], 0.25);
        assert!(resize_bilinear(&c, 3).unwrap().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn two_folders_three_files() {
        let dir = tempfile::tempdir().unwrap();
        for (ci, cls) in ["b_cls", "a_cls"].iter().enumerate() {
            std::fs::create_dir(dir.path().join(cls)).unwrap();
            for f in 0..3 {
                std::fs::write(dir.path().join(cls).join(format!("{f}.ppm")), ppm(6, 5, (ci * 3 + f + 1) as u8))
                    .unwrap();
            }
        }
        let load = load_image_folder(dir.path(), 8).unwrap();
        assert_eq!(load.dataset.n_classes(), 2);
        assert_eq!(load.dataset.class(0).name, "a_cls");
        assert!(load.dataset.classes().iter().all(|c| c.instances.len() == 3));
        assert_eq!(load.dataset.image(0, 0).shape(), &[3, 8, 8]);
        let again = load_image_folder(dir.path(), 8).unwrap();
        assert_eq!(again.dataset.classes(), load.dataset.classes());
    }

    #[test]
    fn unreadable_file_is_skipped_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("c")).unwrap();
        std::fs::write(dir.path().join("c/ok.ppm"), ppm(3, 3, 2)).unwrap();
        std::fs::write(dir.path().join("c/bad.ppm"), b"garbage").unwrap();
        let load = load_image_folder(dir.path(), 4).unwrap();
        assert_eq!(load.dataset.class(0).instances.len(), 1);
        assert_eq!(load.warnings.len(), 1);
    }

    #[test]
    fn empty_inputs_fail() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_image_folder(dir.path(), 4).is_err());
        std::fs::create_dir(dir.path().join("empty")).unwrap();
        assert!(load_image_folder(dir.path(), 4).is_err());
    }
}
