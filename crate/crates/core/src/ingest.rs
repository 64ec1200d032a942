//! IDX (MNIST) parsing and conversion of digit images into point clouds of
//! `(row, col, intensity)` triples.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use thiserror::Error;

use crate::data::CoordNorm;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("bad IDX magic number {found:#010x}")]
    BadMagic { found: u32 },

    #[error("IDX file truncated at byte offset {offset}: expected {expected} bytes in total")]
    Truncated { offset: usize, expected: usize },

    #[error("IDX dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("IDX file has {extra} trailing bytes after the payload")]
    TrailingBytes { extra: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IdxData {
    /// `count` images of `rows × cols` bytes, row-major, concatenated.
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        pixels: Vec<u8>,
    },
    Labels(Vec<u8>),
}

/// Reads an IDX file, gunzipping it first if it starts with the gzip magic.
pub fn parse_idx(path: &Path) -> Result<IdxData> {
    let raw = fs::read(path)?;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        out
    } else {
        raw
    };
    Ok(parse_idx_bytes(&bytes)?)
}

pub fn parse_idx_bytes(bytes: &[u8]) -> std::result::Result<IdxData, IdxError> {
    let word = |i: usize| -> std::result::Result<u32, IdxError> {
        let off = 4 * i;
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or(IdxError::Truncated {
                offset: bytes.len(),
                expected: off + 4,
            })
    };
    let magic = word(0)?;
    let (dims, header) = match magic {
        IMAGES_MAGIC => (vec![word(1)?, word(2)?, word(3)?], 16),
        LABELS_MAGIC => (vec![word(1)?], 8),
        found => return Err(IdxError::BadMagic { found }),
    };
    if dims.iter().skip(1).any(|&d| d == 0) {
        return Err(IdxError::DimensionMismatch(format!("zero image dimension in {dims:?}")));
    }
    let payload = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| IdxError::DimensionMismatch(format!("dimensions {dims:?} overflow")))?;
    let expected = header + payload;
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            offset: bytes.len(),
            expected,
        });
    }
    if bytes.len() > expected {
        return Err(IdxError::TrailingBytes {
            extra: bytes.len() - expected,
        });
    }
    let body = bytes[header..].to_vec();
    Ok(if magic == IMAGES_MAGIC {
        IdxData::Images {
            count: dims[0] as usize,
            rows: dims[1] as usize,
            cols: dims[2] as usize,
            pixels: body,
        }
    } else {
        IdxData::Labels(body)
    })
}

/// Serializes images or labels in the IDX format (uncompressed).
pub fn encode_idx(data: &IdxData) -> Vec<u8> {
    let mut out = Vec::new();
    match data {
        IdxData::Images { count, rows, cols, pixels } => {
            for w in [IMAGES_MAGIC, *count as u32, *rows as u32, *cols as u32] {
                out.extend(w.to_be_bytes());
            }
            out.extend(pixels);
        }
        IdxData::Labels(l) => {
            out.extend(LABELS_MAGIC.to_be_bytes());
            out.extend((l.len() as u32).to_be_bytes());
            out.extend(l);
        }
    }
    out
}

/// Grayscale images scaled to `[0, 1]` with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Digits {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

/// Loads a matching pair of IDX image and label files.
pub fn load_digits(images: &Path, labels: &Path) -> Result<Digits> {
    let IdxData::Images { count, rows, cols, pixels } = parse_idx(images)? else {
        return Err(IdxError::DimensionMismatch(format!("{} holds labels, not images", images.display())).into());
    };
    let IdxData::Labels(labels) = parse_idx(labels)? else {
        return Err(IdxError::DimensionMismatch(format!("{} holds images, not labels", labels.display())).into());
    };
    if labels.len() != count {
        return Err(IdxError::DimensionMismatch(format!("{count} images but {} labels", labels.len())).into());
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(IdxError::DimensionMismatch(format!("label {bad} outside 0..=9")).into());
    }
    let images = pixels
        .chunks_exact(rows * cols)
        .map(|px| px.iter().map(|&p| p as f64 / 255.0).collect())
        .collect();
    Ok(Digits {
        rows,
        cols,
        images,
        labels,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    /// `max_points × 3` rows of (row, col, intensity).
    pub points: Matrix,
    pub label: u8,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CloudParams {
    pub rows: usize,
    pub cols: usize,
    pub threshold: f64,
    pub max_points: usize,
    pub norm: CoordNorm,
}

impl Default for CloudParams {
    fn default() -> Self {
        CloudParams {
            rows: 28,
            cols: 28,
            threshold: 0.5,
            max_points: 200,
            norm: CoordNorm::Standardize,
        }
    }
}

/// Keeps pixels brighter than the threshold, takes the `max_points`
/// brightest (ties in raster order), pads a short list with survivors drawn
/// uniformly with replacement, then rescales the row and column coordinates
/// within the cloud.
pub fn image_to_pointcloud(image: &[f64], label: u8, params: &CloudParams, rng: &mut Rng) -> Result<PointCloud> {
    if image.len() != params.rows * params.cols {
        return Err(Error::dim(format!(
            "image has {} pixels, expected {}x{}",
            image.len(),
            params.rows,
            params.cols
        )));
    }
    if params.max_points == 0 {
        return Err(Error::usage("max_points must be positive"));
    }
    let mut lit: Vec<usize> = (0..image.len()).filter(|&i| image[i] > params.threshold).collect();
    if lit.is_empty() {
        return Err(Error::domain("blank image: no pixel above the threshold"));
    }
    // stable sort keeps raster order among equal intensities
    lit.sort_by(|&a, &b| image[b].total_cmp(&image[a]));
    lit.truncate(params.max_points);
    let survivors = lit.len();
    while lit.len() < params.max_points {
        lit.push(lit[rng.below(survivors)]);
    }
    let mut points = Matrix::zeros(params.max_points, 3);
    for (k, &i) in lit.iter().enumerate() {
        let row = points.row_mut(k);
        row[0] = (i / params.cols) as f64;
        row[1] = (i % params.cols) as f64;
        row[2] = image[i];
    }
    for c in 0..2 {
        let col: Vec<f64> = points.iter_rows().map(|r| r[c]).collect();
        let n = col.len() as f64;
        let (shift, scale) = match params.norm {
            CoordNorm::Standardize => {
                let mean = col.iter().sum::<f64>() / n;
                let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
                (mean, if sd > 0.0 { sd } else { 1.0 })
            }
            CoordNorm::MinMax => {
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (lo, if hi > lo { hi - lo } else { 1.0 })
            }
        };
        for k in 0..params.max_points {
            let v = &mut points.row_mut(k)[c];
            *v = (*v - shift) / scale;
        }
    }
    Ok(PointCloud { points, label })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn images_file(count: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for w in [IMAGES_MAGIC, count, 2, 2] {
            b.extend(w.to_be_bytes());
        }
        b.extend(pixels);
        b
    }

    #[test]
    fn parses_images_and_labels() {
        let img = parse_idx_bytes(&images_file(2, &[0, 1, 2, 3, 4, 5, 6, 7])).unwrap();
        assert_eq!(
            img,
            IdxData::Images {
                count: 2,
                rows: 2,
                cols: 2,
                pixels: (0..8).collect()
            }
        );
        let lab = parse_idx_bytes(&encode_idx(&IdxData::Labels(vec![3, 9]))).unwrap();
        assert_eq!(lab, IdxData::Labels(vec![3, 9]));
        assert_eq!(encode_idx(&img), images_file(2, &[0, 1, 2, 3, 4, 5, 6, 7]));
    }

    #[test]
    fn distinct_errors() {
        let mut bad = encode_idx(&IdxData::Labels(vec![1]));
        bad[3] = 0x02; // 2050
        assert!(matches!(parse_idx_bytes(&bad), Err(IdxError::BadMagic { found: 2050 })));
        let short = images_file(2, &[0; 5]);
        match parse_idx_bytes(&short) {
            Err(IdxError::Truncated { offset, expected }) => assert_eq!((offset, expected), (21, 24)),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_idx_bytes(&[0, 0, 8]), Err(IdxError::Truncated { offset: 3, .. })));
        let mut zero = images_file(1, &[]);
        zero[11] = 0;
        assert!(matches!(parse_idx_bytes(&zero), Err(IdxError::DimensionMismatch(_))));
        assert!(matches!(parse_idx_bytes(&images_file(1, &[0; 5])), Err(IdxError::TrailingBytes { extra: 1 })));
    }

    #[test]
    fn gzip_files_and_pairing() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.idx.gz");
        let lp = dir.path().join("lab.idx");
        let mut gz = flate2::write::GzEncoder::new(fs::File::create(&ip).unwrap(), flate2::Compression::default());
        gz.write_all(&images_file(2, &[0, 255, 0, 0, 51, 0, 0, 0])).unwrap();
        gz.finish().unwrap();
        fs::write(&lp, encode_idx(&IdxData::Labels(vec![4, 7]))).unwrap();
        let d = load_digits(&ip, &lp).unwrap();
        assert_eq!(d.labels, vec![4, 7]);
        assert_eq!(d.images[0], vec![0.0, 1.0, 0.0, 0.0]);
        assert!((d.images[1][0] - 0.2).abs() < 1e-15);
        fs::write(&lp, encode_idx(&IdxData::Labels(vec![4]))).unwrap();
        assert!(matches!(load_digits(&ip, &lp), Err(Error::Idx(IdxError::DimensionMismatch(_)))));
        assert!(matches!(load_digits(&lp, &lp), Err(Error::Idx(IdxError::DimensionMismatch(_)))));
    }

    fn image_with(lit: usize) -> Vec<f64> {
        (0..784).map(|i| if i < lit { 0.6 + 0.4 * (i % 7) as f64 / 7.0 } else { 0.2 }).collect()
    }

    #[test]
    fn exactly_max_points_survivors() {
        let img = image_with(200);
        let p = CloudParams::default();
        let c = image_to_pointcloud(&img, 3, &p, &mut Rng::new(0)).unwrap();
        assert_eq!(c.points.shape(), (200, 3));
        let mut got: Vec<f64> = c.points.iter_rows().map(|r| r[2]).collect();
        let mut want: Vec<f64> = img[..200].to_vec();
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        assert_eq!(got, want);
    }

    #[test]
    fn short_clouds_are_resampled() {
        let img = image_with(150);
        let p = CloudParams {
            norm: CoordNorm::MinMax,
            ..CloudParams::default()
        };
        let c = image_to_pointcloud(&img, 1, &p, &mut Rng::new(1)).unwrap();
        assert_eq!(c.points.rows(), 200);
        // every point is one of the 150 lit pixels: rows 0..5 of the image
        for r in c.points.iter_rows() {
            assert!(r[2] > 0.5 && r[2] <= 1.0);
            assert!((0.0..=1.0).contains(&r[0]) && (0.0..=1.0).contains(&r[1]));
        }
        let again = image_to_pointcloud(&img, 1, &p, &mut Rng::new(1)).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn top_intensities_with_raster_ties() {
        let mut img = vec![0.0; 784];
        img[10] = 0.9;
        img[5] = 0.7;
        img[700] = 0.7;
        img[3] = 0.7;
        let p = CloudParams {
            max_points: 3,
            norm: CoordNorm::MinMax,
            ..CloudParams::default()
        };
        let c = image_to_pointcloud(&img, 0, &p, &mut Rng::new(0)).unwrap();
        // 0.9 at pixel 10, then the 0.7 ties in raster order: 3 and 5
        let cols: Vec<f64> = c.points.iter_rows().map(|r| r[1]).collect();
        assert_eq!(cols, vec![1.0, 0.0, 2.0 / 7.0]);
        assert_eq!(c.points.iter_rows().map(|r| r[0]).collect::<Vec<_>>(), vec![0.0; 3]);
    }

    #[test]
    fn standardized_coordinates() {
        let c = image_to_pointcloud(&image_with(300), 0, &CloudParams::default(), &mut Rng::new(0)).unwrap();
        for k in 0..2 {
            let col: Vec<f64> = c.points.iter_rows().map(|r| r[k]).collect();
            let m = col.iter().sum::<f64>() / 200.0;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 200.0;
            assert!(m.abs() < 1e-12 && ((v - 1.0).abs() < 1e-12 || v == 0.0));
        }
    }

    #[test]
    fn blank_image_rejected() {
        let e = image_to_pointcloud(&[0.0; 784], 0, &CloudParams::default(), &mut Rng::new(0)).unwrap_err();
        assert!(matches!(e, Error::Domain(_)));
    }
}
