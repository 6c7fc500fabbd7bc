//! Dataset loading and preparation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-major feature matrix with class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// Image height and width when rows are flattened images.
    pub image_shape: Option<(usize, usize)>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, class_names: Vec<String>, provenance: impl Into<String>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.len(),
                actual: labels.len(),
            });
        }
        if let Some(first) = features.first() {
            if let Some(row) = features.iter().find(|r| r.len() != first.len()) {
                return Err(Error::DimensionMismatch {
                    expected: first.len(),
                    actual: row.len(),
                });
            }
        }
        if features.iter().flatten().any(|v| v.is_nan()) {
            return Err(Error::InvalidArgument("dataset contains NaN features".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                limit: class_names.len(),
            });
        }
        Ok(Self {
            features,
            labels,
            class_names,
            image_shape: None,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, |r| r.len())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            image_shape: self.image_shape,
            provenance: self.provenance.clone(),
        }
    }

    /// Rescale every feature column to `[0, 1]`; constant columns become 0.
    pub fn min_max_scale(&mut self) {
        let d = self.dim();
        for k in 0..d {
            let (lo, hi) = self
                .features
                .iter()
                .map(|r| r[k])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            let span = hi - lo;
            for row in &mut self.features {
                row[k] = if span > 0.0 { (row[k] - lo) / span } else { 0.0 };
            }
        }
    }
}

const IRIS_CLASSES: [&str; 3] = ["setosa", "versicolor", "virginica"];

fn iris_label(raw: &str) -> Option<usize> {
    let s = raw.trim().trim_matches('"').to_ascii_lowercase();
    let s = s.strip_prefix("iris-").unwrap_or(&s);
    IRIS_CLASSES
        .iter()
        .position(|c| *c == s)
        .or_else(|| s.parse::<usize>().ok().filter(|&i| i < IRIS_CLASSES.len()))
}

/// Four numeric columns and a species column; a header row is optional.
pub fn load_iris_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if rec.len() != 5 {
            return Err(parse_err(line, format!("expected 5 columns, found {}", rec.len())));
        }
        let nums: std::result::Result<Vec<f64>, _> = rec.iter().take(4).map(str::parse::<f64>).collect();
        let nums = match nums {
            Ok(v) => v,
            Err(_) if line == 1 => continue,
            Err(e) => return Err(parse_err(line, format!("bad number: {e}"))),
        };
        let label = iris_label(&rec[4]).ok_or_else(|| parse_err(line, format!("unknown label '{}'", &rec[4])))?;
        features.push(nums);
        labels.push(label);
    }
    if features.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }
    Dataset::new(
        features,
        labels,
        IRIS_CLASSES.iter().map(|s| s.to_string()).collect(),
        format!("iris csv {}", path.display()),
    )
}

fn read_u32_be(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: "truncated header".into(),
        })
}

/// Parsed IDX image file: `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = read_u32_be(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        });
    }
    let n = read_u32_be(&bytes, 4, path)? as usize;
    let rows = read_u32_be(&bytes, 8, path)? as usize;
    let cols = read_u32_be(&bytes, 12, path)? as usize;
    let need = n * rows * cols;
    if bytes.len() - 16 < need {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("truncated payload: {} of {need} bytes", bytes.len() - 16),
        });
    }
    Ok((n, rows, cols, bytes[16..16 + need].to_vec()))
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = read_u32_be(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let n = read_u32_be(&bytes, 4, path)? as usize;
    if bytes.len() - 8 < n {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("truncated payload: {} of {n} labels", bytes.len() - 8),
        });
    }
    Ok(bytes[8..8 + n].to_vec())
}

/// Serialise images and labels as an IDX pair.
pub fn write_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, rows: usize, cols: usize, pixels: &[u8], labels: &[u8]) -> Result<()> {
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, labels.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + labels.len());
    for v in [IDX_LABELS_MAGIC, labels.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    fs::write(images_path.as_ref(), img).map_err(|e| Error::io(images_path.as_ref(), e))?;
    fs::write(labels_path.as_ref(), lab).map_err(|e| Error::io(labels_path.as_ref(), e))
}

/// Loads an IDX image/label pair, keeps only `keep_classes` (relabelled
/// `0..` in ascending order of the original label) and scales pixels to `[0,1]`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, keep_classes: &[u8]) -> Result<Dataset> {
    let (n, rows, cols, pixels) = read_idx_images(&images)?;
    let raw_labels = read_idx_labels(&labels)?;
    if raw_labels.len() != n {
        return Err(Error::Format {
            path: labels.as_ref().to_path_buf(),
            message: format!("{} labels for {n} images", raw_labels.len()),
        });
    }
    let mut keep: Vec<u8> = keep_classes.to_vec();
    keep.sort_unstable();
    keep.dedup();
    if keep.is_empty() {
        return Err(Error::InvalidArgument("keep_classes is empty".into()));
    }
    let size = rows * cols;
    let mut features = Vec::new();
    let mut out_labels = Vec::new();
    for (i, &l) in raw_labels.iter().enumerate() {
        if let Ok(k) = keep.binary_search(&l) {
            features.push(pixels[i * size..(i + 1) * size].iter().map(|&p| p as f64 / 255.0).collect());
            out_labels.push(k);
        }
    }
    let mut ds = Dataset::new(
        features,
        out_labels,
        keep.iter().map(|c| c.to_string()).collect(),
        format!("idx {} / {}", images.as_ref().display(), labels.as_ref().display()),
    )?;
    ds.image_shape = Some((rows, cols));
    Ok(ds)
}

/// `k×k` mean pooling of every image, flattened row-major.
pub fn downsample_flatten(dataset: &Dataset, k: usize) -> Result<Dataset> {
    let (rows, cols) = dataset
        .image_shape
        .ok_or_else(|| Error::InvalidArgument("dataset rows are not images".into()))?;
    if k == 0 || rows % k != 0 || cols % k != 0 {
        return Err(Error::InvalidArgument(format!("pool factor {k} does not divide {rows}x{cols}")));
    }
    let (pr, pc) = (rows / k, cols / k);
    let area = (k * k) as f64;
    let features = dataset
        .features
        .iter()
        .map(|img| {
            let mut out = vec![0.0; pr * pc];
            for r in 0..rows {
                for c in 0..cols {
                    out[(r / k) * pc + c / k] += img[r * cols + c];
                }
            }
            out.iter_mut().for_each(|v| *v /= area);
            out
        })
        .collect();
    Ok(Dataset {
        features,
        labels: dataset.labels.clone(),
        class_names: dataset.class_names.clone(),
        image_shape: Some((pr, pc)),
        provenance: format!("{} pooled {k}x{k}", dataset.provenance),
    })
}

/// Train/test index partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class shuffled split. The overall train size is
/// `round(train_fraction · M)`, apportioned across classes by largest
/// remainder so each class is within one sample of its exact share.
pub fn stratified_indices(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    let counts = dataset.class_counts();
    if let Some((y, &c)) = counts.iter().enumerate().find(|(_, &c)| c < 2) {
        return Err(Error::InvalidArgument(format!(
            "class {} has {c} sample(s); stratified split needs at least 2",
            dataset.class_names[y]
        )));
    }
    let exact: Vec<f64> = counts.iter().map(|&c| c as f64 * train_fraction).collect();
    let mut take: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let target = (dataset.len() as f64 * train_fraction).round() as usize;
    let mut by_remainder: Vec<usize> = (0..counts.len()).collect();
    by_remainder.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut missing = target.saturating_sub(take.iter().sum());
    for &y in by_remainder.iter().cycle().take(counts.len() * 2) {
        if missing == 0 {
            break;
        }
        if take[y] < counts[y] - 1 {
            take[y] += 1;
            missing -= 1;
        }
    }
    for (t, &c) in take.iter_mut().zip(&counts) {
        *t = (*t).clamp(1, c - 1);
    }

    let mut rng = rng_for(seed, Stream::Split);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (y, &n_train) in take.iter().enumerate() {
        let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == y).collect();
        idx.shuffle(&mut rng);
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

pub fn stratified_split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let split = stratified_indices(dataset, train_fraction, seed)?;
    Ok((dataset.subset(&split.train), dataset.subset(&split.test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn blobs(per_class: &[usize]) -> Dataset {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (y, &n) in per_class.iter().enumerate() {
            for i in 0..n {
                features.push(vec![y as f64, i as f64]);
                labels.push(y);
            }
        }
        let names = (0..per_class.len()).map(|y| y.to_string()).collect();
        Dataset::new(features, labels, names, "test").unwrap()
    }

    #[test]
    fn iris_single_row() {
        let f = write_tmp("5.1,3.5,1.4,0.2,setosa\n");
        let d = load_iris_csv(f.path()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.dim(), 4);
        assert_eq!(d.features[0], vec![5.1, 3.5, 1.4, 0.2]);
        assert_eq!(d.labels, vec![0]);
    }

    #[test]
    fn iris_header_and_variants() {
        let f = write_tmp("a,b,c,d,species\n1,2,3,4,Iris-virginica\n1,2,3,4,1\n");
        let d = load_iris_csv(f.path()).unwrap();
        assert_eq!(d.labels, vec![2, 1]);
    }

    #[test]
    fn iris_errors() {
        let f = write_tmp("");
        assert!(matches!(load_iris_csv(f.path()), Err(Error::Parse { .. })));
        let f = write_tmp("5.1,3.5,1.4,0.2,setosa\n5.1,x,1.4,0.2,setosa\n");
        match load_iris_csv(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let f = write_tmp("5.1,3.5,1.4,0.2,rose\n");
        assert!(matches!(load_iris_csv(f.path()), Err(Error::Parse { line: 1, .. })));
        let f = write_tmp("5.1,3.5,1.4,setosa\n");
        assert!(load_iris_csv(f.path()).is_err());
    }

    #[test]
    fn idx_errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        write_idx(&img, &lab, 2, 2, &[0, 1, 2, 3, 4, 5, 6, 7], &[0, 1]).unwrap();
        // swapped files: magic mismatch on the images path
        let err = load_idx(&lab, &img, &[0, 1]).unwrap_err();
        assert!(err.to_string().contains(&lab.display().to_string()), "{err}");

        let bytes = fs::read(&img).unwrap();
        fs::write(&img, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_idx(&img, &lab, &[0, 1]), Err(Error::Format { .. })));

        write_idx(&img, &lab, 2, 2, &[0; 8], &[0, 1]).unwrap();
        let lab3 = dir.path().join("lab3");
        let img3 = dir.path().join("img3");
        write_idx(&img3, &lab3, 2, 2, &[0; 12], &[0, 1, 1]).unwrap();
        assert!(load_idx(&img, &lab3, &[0, 1]).is_err());
    }

    #[test]
    fn idx_filter_and_relabel() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        write_idx(&img, &lab, 1, 2, &[0, 255, 10, 20, 30, 40], &[7, 3, 7]).unwrap();
        let d = load_idx(&img, &lab, &[7, 3]).unwrap();
        assert_eq!(d.labels, vec![1, 0, 1]);
        assert_eq!(d.features[0], vec![0.0, 1.0]);
        let d = load_idx(&img, &lab, &[7]).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels, vec![0, 0]);
    }

    #[test]
    fn downsample_examples() {
        let mut checker = Dataset::new(
            vec![(0..28 * 28).map(|i| ((i / 28 + i % 28) % 2) as f64).collect(), vec![0.3; 784]],
            vec![0, 0],
            vec!["0".into()],
            "t",
        )
        .unwrap();
        checker.image_shape = Some((28, 28));
        let p = downsample_flatten(&checker, 4).unwrap();
        assert_eq!(p.dim(), 49);
        assert!(p.features[0].iter().all(|v| *v == 0.5));
        assert!(p.features[1].iter().all(|v| (v - 0.3).abs() < 1e-15));
        assert_eq!(downsample_flatten(&checker, 1).unwrap().dim(), 784);
        assert!(downsample_flatten(&checker, 5).is_err());
        assert!(downsample_flatten(&checker, 0).is_err());
    }

    #[test]
    fn split_iris_shape() {
        let d = blobs(&[50, 50, 50]);
        let s = stratified_indices(&d, 0.75, 1).unwrap();
        assert!(s.train.len() == 112 || s.train.len() == 113);
        assert_eq!(s.train.len() + s.test.len(), 150);
        for y in 0..3 {
            let n = s.train.iter().filter(|&&i| d.labels[i] == y).count();
            assert!(n == 37 || n == 38, "{n}");
        }
        assert_eq!(s, stratified_indices(&d, 0.75, 1).unwrap());
    }

    #[test]
    fn split_preconditions() {
        let d = blobs(&[5, 5]);
        assert!(stratified_indices(&d, 1.0, 0).is_err());
        assert!(stratified_indices(&d, 0.0, 0).is_err());
        let d = blobs(&[5, 1]);
        assert!(stratified_indices(&d, 0.75, 0).is_err());
        // every class keeps at least one test and one train sample
        let d = blobs(&[2, 2, 3]);
        let s = stratified_indices(&d, 0.75, 4).unwrap();
        for y in 0..3 {
            assert!(s.train.iter().any(|&i| d.labels[i] == y));
            assert!(s.test.iter().any(|&i| d.labels[i] == y));
        }
    }

    #[test]
    fn min_max_scaling() {
        let mut d = Dataset::new(vec![vec![1.0, 5.0], vec![3.0, 5.0]], vec![0, 0], vec!["a".into()], "t").unwrap();
        d.min_max_scale();
        assert_eq!(d.features, vec![vec![0.0, 0.0], vec![1.0, 0.0]]);
    }
}
