//! Two-class grayscale image sets: a seeded synthetic generator and a P5 PGM
//! directory loader.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `(1, H, W)`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub height: usize,
    pub width: usize,
}

impl DatasetSplit {
    /// `[N_0, N_1]` over the training list.
    pub fn class_counts(&self) -> [usize; 2] {
        let mut n = [0; 2];
        for s in &self.train {
            n[s.label] += 1;
        }
        n
    }
}

pub const MIN_SYNTHETIC_SIZE: usize = 16;
pub const NOISE_SIGMA: f64 = 0.05;

/// Train/test sizes for one class: 80/20 with at least two training images.
fn split_sizes(n: usize) -> (usize, usize) {
    let test = n / 5;
    let train = (n - test).max(2.min(n));
    (train, n - train)
}

/// Ellipse plus 2-4 strokes: horizontal for class 0, vertical for class 1.
pub fn generate_synthetic(n_per_class: usize, size: usize, seed: u64) -> Result<DatasetSplit> {
    if n_per_class < 2 {
        return Err(Error::Config(format!("need at least 2 images per class, got {n_per_class}")));
    }
    if size < MIN_SYNTHETIC_SIZE {
        return Err(Error::Config(format!(
            "image size {size} is below the minimum of {MIN_SYNTHETIC_SIZE}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let (n_train, _) = split_sizes(n_per_class);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in 0..2 {
        for i in 0..n_per_class {
            let image = draw_synthetic(label, size, &mut rng, &noise);
            let sample = LabeledImage {
                image,
                label,
                id: format!("syn{seed}-c{label}-{i:05}"),
            };
            if i < n_train {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    Ok(DatasetSplit {
        train,
        test,
        height: size,
        width: size,
    })
}

fn draw_synthetic(label: usize, size: usize, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Tensor {
    let s = size as f64;
    let mut px = vec![0f64; size * size];

    let cx = s / 2.0 + rng.random_range(-2.0..2.0);
    let cy = s / 2.0 + rng.random_range(-2.0..2.0);
    let rx = s * rng.random_range(0.25..0.35);
    let ry = s * rng.random_range(0.30..0.40);
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                px[y * size + x] = 0.4;
            }
        }
    }

    let strokes = rng.random_range(2..=4);
    for _ in 0..strokes {
        let len = rng.random_range(size * 3 / 10..=size * 6 / 10);
        let thick = rng.random_range(1..=2);
        let along = rng.random_range(0..=size - len);
        let across = rng.random_range(0..=size - thick);
        for t in 0..thick {
            for l in 0..len {
                let (y, x) = if label == 0 {
                    (across + t, along + l)
                } else {
                    (along + l, across + t)
                };
                px[y * size + x] = 0.9;
            }
        }
    }

    let data = px
        .into_iter()
        .map(|v| (v + noise.sample(rng)).clamp(0.0, 1.0) as f32)
        .collect();
    Tensor::new(vec![1, size, size], data).expect("size checked")
}

/// Parses a binary (P5) PGM with maxval at most 255 into a `(1, H, W)` tensor in `[0, 1]`.
pub fn parse_pgm(bytes: &[u8]) -> Result<Tensor> {
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
            return Err(Error::Format("unexpected end of PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P5" {
        return Err(Error::Format(format!("expected binary PGM (P5), found {magic:?}")));
    }
    let mut number = |what: &str| -> Result<usize> {
        let t = token()?;
        t.parse()
            .ok()
            .filter(|&v: &usize| v > 0)
            .ok_or_else(|| Error::Format(format!("bad PGM {what}: {t:?}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval > 255 {
        return Err(Error::Format(format!("16-bit PGM (maxval {maxval}) not supported")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let raster = &bytes[(pos + 1).min(bytes.len())..];
    let n = width * height;
    if raster.len() < n {
        return Err(Error::Format(format!(
            "PGM raster holds {} bytes, {width}x{height} needs {n}",
            raster.len()
        )));
    }
    let scale = maxval as f32;
    Tensor::new(
        vec![1, height, width],
        raster[..n].iter().map(|&b| (b as f32 / scale).min(1.0)).collect(),
    )
}

/// Nearest-neighbor resize of a `(C, H, W)` map: output cell `(y, x)` reads
/// source `(y·H/h, x·W/w)`, rounded down.
pub fn resize_nearest(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (c, h, w) = image.chw()?;
    if height == 0 || width == 0 {
        return Err(Error::Config("resize target must be non-empty".into()));
    }
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        let plane = image.channel(ch);
        for y in 0..height {
            let sy = y * h / height;
            for x in 0..width {
                out.push(plane[sy * w + x * w / width]);
            }
        }
    }
    Tensor::new(vec![c, height, width], out)
}

/// Loads `<dir>/0/*` and `<dir>/1/*` as P5 PGM files, resized to `height × width`.
pub fn load_pgm_dir(dir: impl AsRef<Path>, height: usize, width: usize) -> Result<DatasetSplit> {
    let dir = dir.as_ref();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in 0..2 {
        let class_dir = dir.join(label.to_string());
        let mut files: Vec<_> = std::fs::read_dir(&class_dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.is_file());
        files.sort();
        if files.is_empty() {
            return Err(Error::Empty(format!("class directory {} has no images", class_dir.display())));
        }
        let (n_train, _) = split_sizes(files.len());
        for (i, path) in files.iter().enumerate() {
            let raw = parse_pgm(&std::fs::read(path)?)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            let sample = LabeledImage {
                image: resize_nearest(&raw, height, width)?,
                label,
                id: format!("{label}/{}", path.file_name().unwrap_or_default().to_string_lossy()),
            };
            if i < n_train {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    Ok(DatasetSplit {
        train,
        test,
        height,
        width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(6, 32, 7).unwrap();
        let b = generate_synthetic(6, 32, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(6, 32, 8).unwrap();
        assert_ne!(a.train[0].image, c.train[0].image);
    }

    #[test]
    fn small_class_keeps_two_training_images() {
        let d = generate_synthetic(2, 16, 1).unwrap();
        assert_eq!(d.class_counts(), [2, 2]);
        assert!(d.test.is_empty());
        assert!(generate_synthetic(1, 32, 1).is_err());
        assert!(generate_synthetic(4, 15, 1).is_err());
    }

    #[test]
    fn split_is_balanced_and_disjoint() {
        let d = generate_synthetic(25, 32, 3).unwrap();
        assert_eq!(d.class_counts(), [20, 20]);
        assert_eq!(d.test.iter().filter(|s| s.label == 0).count(), 5);
        let mut ids: Vec<_> = d.train.iter().chain(&d.test).map(|s| s.id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 50);
        for s in d.train.iter().chain(&d.test) {
            assert_eq!(s.image.shape(), &[1, 32, 32]);
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn class_mean_intensity_difference_is_small() {
        // Both classes share the same stroke and ellipse distributions up to a
        // transpose, so their mean intensities agree in expectation.
        let d = generate_synthetic(100, 32, 11).unwrap();
        let mut sum = [0f64; 2];
        let mut n = [0usize; 2];
        for s in d.train.iter().chain(&d.test) {
            sum[s.label] += s.image.data().iter().map(|&v| v as f64).sum::<f64>();
            n[s.label] += s.image.len();
        }
        let diff = sum[0] / n[0] as f64 - sum[1] / n[1] as f64;
        assert!(diff.abs() <= 0.05, "class mean difference {diff}");
    }

    #[test]
    fn strokes_follow_class_orientation() {
        // Row-wise energy varies more for horizontal strokes than column-wise.
        let d = generate_synthetic(20, 32, 5).unwrap();
        let mut agree = 0;
        for s in &d.train {
            let px = s.image.data();
            let row_max = (0..32).map(|y| (0..32).map(|x| px[y * 32 + x]).sum::<f32>()).fold(0.0, f32::max);
            let col_max = (0..32).map(|x| (0..32).map(|y| px[y * 32 + x]).sum::<f32>()).fold(0.0, f32::max);
            if (row_max > col_max) == (s.label == 0) {
                agree += 1;
            }
        }
        assert!(agree >= 28, "{agree}/32");
    }

    #[test]
    fn pgm_two_by_two() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 255, 0]);
        let t = parse_pgm(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 1.0, 0.0]);

        let mut commented = b"P5\n# made by hand\n2 2\n255\n".to_vec();
        commented.extend_from_slice(&[0, 255, 255, 0]);
        assert_eq!(parse_pgm(&commented).unwrap(), t);
    }

    #[test]
    fn pgm_ascii_rejected() {
        let err = parse_pgm(b"P2\n2 2\n255\n0 255 255 0\n").unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(matches!(parse_pgm(b"P5\n2 x\n255\n"), Err(Error::Format(_))));
        assert!(matches!(parse_pgm(b"P5\n4 4\n255\n\x01\x02"), Err(Error::Format(_))));
    }

    #[test]
    fn nearest_resize_index_map() {
        let t = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let r = resize_nearest(&t, 2, 2).unwrap();
        // rows {0, 2} x cols {0, 2}
        assert_eq!(r.data(), &[0.0, 2.0, 8.0, 10.0]);
        let up = resize_nearest(&r, 4, 4).unwrap();
        assert_eq!(&up.data()[..4], &[0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn pgm_directory() {
        let dir = tempfile::tempdir().unwrap();
        for label in 0..2 {
            let d = dir.path().join(label.to_string());
            std::fs::create_dir(&d).unwrap();
            for i in 0..5 {
                let mut bytes = b"P5 4 4 255\n".to_vec();
                bytes.extend((0..16).map(|v| (v * 10 + i + label * 100) as u8));
                std::fs::write(d.join(format!("img{i}.pgm")), bytes).unwrap();
            }
        }
        let split = load_pgm_dir(dir.path(), 2, 2).unwrap();
        assert_eq!(split.class_counts(), [4, 4]);
        assert_eq!(split.test.len(), 2);
        assert_eq!(split.test[0].id, "0/img4.pgm");
        assert_eq!(split.train[0].image.data()[1], 20.0 / 255.0);

        std::fs::write(dir.path().join("1").join("zz.pgm"), b"P2\n1 1\n255\n0\n").unwrap();
        assert!(matches!(load_pgm_dir(dir.path(), 2, 2), Err(Error::Format(_))));

        let empty = tempfile::tempdir().unwrap();
        std::fs::create_dir(empty.path().join("0")).unwrap();
        std::fs::create_dir(empty.path().join("1")).unwrap();
        assert!(matches!(load_pgm_dir(empty.path(), 2, 2), Err(Error::Empty(_))));
    }
}
