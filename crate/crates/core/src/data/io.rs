use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageReader};

use super::to_grayscale;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Decoded images in filename order, with a note for every skipped file.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<(String, Tensor)>,
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn shape(&self) -> Option<&[usize]> {
        self.images.first().map(|(_, t)| t.shape())
    }
}

fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

/// Decodes an 8-bit grayscale or RGB PNG, or a binary PGM, into `[1, h, w]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let is_png = has_extension(path, "png");
    let is_pgm = has_extension(path, "pgm");
    if !is_png && !is_pgm {
        return Err(Error::Dataset(format!("{}: unsupported file type", path.display())));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if is_pgm && !bytes.starts_with(b"P5") {
        return Err(Error::Dataset(format!("{}: only binary (P5) PGM is supported", path.display())));
    }
    let decoded = ImageReader::new(std::io::Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    match decoded {
        DynamicImage::ImageLuma8(buf) => Tensor::new(buf.into_raw().into_iter().map(|p| p as f64 / 255.0).collect(), &[1, h, w]),
        DynamicImage::ImageRgb8(buf) => {
            let raw = buf.into_raw();
            let mut planar = vec![0.0; 3 * h * w];
            for (i, px) in raw.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    planar[c * h * w + i] = px[c] as f64 / 255.0;
                }
            }
            to_grayscale(&Tensor::new(planar, &[3, h, w])?)
        }
        other => Err(Error::Dataset(format!(
            "{}: unsupported color type {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Loads `<root>/<split>/*`, sorted by filename and truncated to `limit` images.
/// Unreadable or unsupported files are skipped with a warning.
pub fn load_dataset(root: &Path, split: Split, limit: Option<usize>) -> Result<Dataset> {
    let dir = root.join(split.dir_name());
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&dir, err)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file())
        .collect();
    files.sort();

    let limit = limit.unwrap_or(usize::MAX);
    let mut images = Vec::new();
    let mut warnings = Vec::new();
    for path in files {
        if images.len() == limit {
            break;
        }
        match load_image(&path) {
            Ok(img) => {
                let id = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                images.push((id, img));
            }
            Err(e) => {
                log::warn!("skipping {e}");
                warnings.push(e.to_string());
            }
        }
    }
    if images.is_empty() {
        return Err(Error::Dataset(format!("no usable images in {}", dir.display())));
    }
    Ok(Dataset { images, warnings })
}

/// Quantizes to 8 bits as `round(p * 255)`, clamped.
pub fn image_to_u8(img: &Tensor) -> Vec<u8> {
    img.data().iter().map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

/// Writes a `[1, h, w]` image as 8-bit PNG or binary PGM, chosen by extension.
pub fn save_image(img: &Tensor, path: &Path) -> Result<()> {
    let [1, h, w] = *img.shape() else {
        return Err(Error::Config(format!("save_image expects [1, h, w], got {:?}", img.shape())));
    };
    let pixels = image_to_u8(img);
    if has_extension(path, "pgm") {
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        out.extend_from_slice(&pixels);
        return std::fs::write(path, out).map_err(|e| Error::io(path, e));
    }
    if !has_extension(path, "png") {
        return Err(Error::Config(format!("{}: output must be .png or .pgm", path.display())));
    }
    let buf = GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer matches dimensions");
    buf.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage, RgbaImage};

    fn gray_png(path: &Path, value: u8, size: u32) {
        GrayImage::from_pixel(size, size, image::Luma([value])).save(path).unwrap();
    }

    #[test]
    fn known_pixel_value() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        gray_png(&p, 128, 3);
        let t = load_image(&p).unwrap();
        assert_eq!(t.shape(), &[1, 3, 3]);
        assert_eq!(t.data()[0], 128.0 / 255.0);
        assert!((t.data()[0] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn rgb_png_becomes_luminance() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        RgbImage::from_pixel(2, 2, Rgb([255, 0, 0])).save(&p).unwrap();
        assert!((load_image(&p).unwrap().data()[0] - 0.299).abs() < 1e-12);
    }

    #[test]
    fn skips_bad_files_and_respects_limit() {
        let dir = tempfile::tempdir().unwrap();
        let train = dir.path().join("train");
        std::fs::create_dir(&train).unwrap();
        for (name, v) in [("b.png", 10), ("a.png", 20), ("c.pgm", 30)] {
            if name.ends_with("pgm") {
                let mut bytes = b"P5\n4 4\n255\n".to_vec();
                bytes.extend([v; 16]);
                std::fs::write(train.join(name), bytes).unwrap();
            } else {
                gray_png(&train.join(name), v, 4);
            }
        }
        std::fs::write(train.join("broken.png"), b"not a png").unwrap();
        let ds = load_dataset(dir.path(), Split::Train, Some(10)).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.warnings.len(), 1);
        let ids: Vec<&str> = ds.images.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, ["a.png", "b.png", "c.pgm"]);
        assert_eq!(ds.images[2].1.data()[0], 30.0 / 255.0);

        let two = load_dataset(dir.path(), Split::Train, Some(2)).unwrap();
        assert_eq!(two.images.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>(), ["a.png", "b.png"]);
    }

    #[test]
    fn unsupported_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let test = dir.path().join("test");
        std::fs::create_dir(&test).unwrap();
        RgbaImage::new(2, 2).save(test.join("x.png")).unwrap();
        std::fs::write(test.join("y.pgm"), b"P2\n1 1\n255\n7\n").unwrap();
        assert!(matches!(load_dataset(dir.path(), Split::Test, None), Err(Error::Dataset(_))));
        assert!(matches!(load_dataset(dir.path(), Split::Train, None), Err(Error::Io { .. })));
    }

    #[test]
    fn save_round_trips_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::new(vec![0.0, 0.2, 0.5, 1.0, 0.7, 0.999], &[1, 2, 3]).unwrap();
        for name in ["o.png", "o.pgm"] {
            let p = dir.path().join(name);
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            let expect: Vec<f64> = image_to_u8(&img).iter().map(|&v| v as f64 / 255.0).collect();
            assert_eq!(back.data(), expect.as_slice());
        }
        assert!(save_image(&img, &dir.path().join("o.jpg")).is_err());
    }
}
