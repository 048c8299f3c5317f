//! Directory-of-images to flat binary conversion.
//!
//! Source layout: `<src>/<class-name>/<image>.ppm`, binary PPM (P6, 8-bit).
//! Class indices follow the sorted class-directory names. All images must
//! share one geometry; the output is `<split>.bin` + `<split>.meta` in the
//! record layout the loader reads.

use std::fs;
use std::path::Path;

use mnclglf_core::data::{write_dataset, Dataset, Split};
use mnclglf_core::error::{Error, Result};
use ndarray::Array4;

fn parse_ppm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let text_err = |msg: &str| Error::Format {
        offset: 0,
        message: format!("{}: {msg}", path.display()),
    };
    // header: "P6" <ws> width <ws> height <ws> maxval <single ws> raster
    let mut pos = 0usize;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(text_err("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| text_err("bad header"))?);
    }
    pos += 1; // single whitespace after maxval
    if fields[0] != "P6" {
        return Err(text_err("not a binary P6 ppm"));
    }
    let w: usize = fields[1].parse().map_err(|_| text_err("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| text_err("bad height"))?;
    let maxval: usize = fields[3].parse().map_err(|_| text_err("bad maxval"))?;
    if maxval != 255 {
        return Err(text_err("only maxval 255 supported"));
    }
    let need = w * h * 3;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Format {
            offset: pos as u64,
            message: format!("{}: raster truncated", path.display()),
        })?
        .to_vec();
    Ok((h, w, raster))
}

pub fn convert_dir(src: &Path, out: &Path, split_name: &str) -> Result<Dataset> {
    let mut class_dirs: Vec<_> = fs::read_dir(src)
        .map_err(|e| Error::io(format!("reading {}", src.display()), e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Validation(format!(
            "{} holds no class directories",
            src.display()
        )));
    }
    if class_dirs.len() > 256 {
        return Err(Error::Validation(
            "more than 256 classes cannot use the one-byte label layout".into(),
        ));
    }
    let mut records: Vec<(u8, usize, usize, Vec<u8>)> = Vec::new();
    for (class, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(format!("reading {}", dir.display()), e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map(|x| x == "ppm").unwrap_or(false))
            .collect();
        files.sort();
        for f in files {
            let bytes =
                fs::read(&f).map_err(|e| Error::io(format!("reading {}", f.display()), e))?;
            let (h, w, raster) = parse_ppm(&bytes, &f)?;
            records.push((class as u8, h, w, raster));
        }
    }
    if records.is_empty() {
        return Err(Error::Validation("no .ppm images found".into()));
    }
    let (h, w) = (records[0].1, records[0].2);
    let n = records.len();
    let mut images = Array4::<u8>::zeros((n, 3, h, w));
    let mut labels = Vec::with_capacity(n);
    for (i, (label, rh, rw, raster)) in records.into_iter().enumerate() {
        if rh != h || rw != w {
            return Err(Error::Validation(format!(
                "image {i} is {rh}x{rw}, expected {h}x{w}; resize offline first"
            )));
        }
        labels.push(label);
        // interleaved rgb -> planar
        let raw = images.as_slice_mut().unwrap();
        let base = i * 3 * h * w;
        for px in 0..h * w {
            raw[base + px] = raster[px * 3];
            raw[base + h * w + px] = raster[px * 3 + 1];
            raw[base + 2 * h * w + px] = raster[px * 3 + 2];
        }
    }
    let ds = Dataset {
        images,
        labels,
        class_count: class_dirs.len(),
        split: if split_name == "train" {
            Split::Train
        } else {
            Split::Eval
        },
    };
    write_dataset(&ds, out, split_name)?;
    Ok(ds)
}
