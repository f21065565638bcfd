//! Datasets, file formats, synthetic blobs and label-noise injection.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

const BINARY_MAGIC: &[u8; 4] = b"LSFT";
const BINARY_VERSION: u16 = 1;
const CSV_META_PREFIX: &str = "# num_classes=";

/// Features plus given labels and, when known, the hidden true labels.
///
/// Image ids are the row indices `0..N`. Training and detection code only
/// ever reads `given_labels`; `true_labels` exist for metrics and oracle
/// relabeling.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f32>,
    given_labels: Vec<usize>,
    true_labels: Option<Vec<usize>>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Array2<f32>,
        given_labels: Vec<usize>,
        true_labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::validation(format!(
                "num_classes must be at least 2, got {num_classes}"
            )));
        }
        let n = features.nrows();
        if given_labels.len() != n {
            return Err(Error::validation(format!(
                "{} labels for {} feature rows",
                given_labels.len(),
                n
            )));
        }
        if let Some(truth) = &true_labels {
            if truth.len() != n {
                return Err(Error::validation(format!(
                    "{} true labels for {} given labels",
                    truth.len(),
                    n
                )));
            }
        }
        let check = |labels: &[usize], what: &str| -> Result<()> {
            match labels.iter().position(|&l| l >= num_classes) {
                Some(i) => Err(Error::validation(format!(
                    "{what} {} of image {i} outside [0, {num_classes})",
                    labels[i]
                ))),
                None => Ok(()),
            }
        };
        check(&given_labels, "label")?;
        if let Some(truth) = &true_labels {
            check(truth, "true label")?;
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite feature at row {}",
                i / features.ncols().max(1)
            )));
        }
        Ok(Dataset {
            features,
            given_labels,
            true_labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.given_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.given_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ids(&self) -> std::ops::Range<usize> {
        0..self.len()
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn given_labels(&self) -> &[usize] {
        &self.given_labels
    }

    pub fn true_labels(&self) -> Option<&[usize]> {
        self.true_labels.as_deref()
    }

    pub fn require_truth(&self) -> Result<&[usize]> {
        self.true_labels().ok_or(Error::MissingTruth)
    }

    /// Per-image flag `given != true`. Requires true labels.
    pub fn noisy_mask(&self) -> Result<Vec<bool>> {
        let truth = self.require_truth()?;
        Ok(self
            .given_labels
            .iter()
            .zip(truth)
            .map(|(g, t)| g != t)
            .collect())
    }

    pub fn noisy_count(&self) -> Result<usize> {
        Ok(self.noisy_mask()?.into_iter().filter(|&b| b).count())
    }

    /// Copy of the dataset with replaced given labels. Features and truth are shared values.
    pub fn with_given_labels(&self, given_labels: Vec<usize>) -> Result<Self> {
        Dataset::new(
            self.features.clone(),
            given_labels,
            self.true_labels.clone(),
            self.num_classes,
        )
    }

    /// Rows `rows` (in that order) as a new dataset with ids renumbered from 0.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.len()) {
            return Err(Error::validation(format!("row {bad} out of range")));
        }
        let features = self.features.select(ndarray::Axis(0), rows);
        let given = rows.iter().map(|&r| self.given_labels[r]).collect();
        let truth = self
            .true_labels
            .as_ref()
            .map(|t| rows.iter().map(|&r| t[r]).collect());
        Dataset::new(features, given, truth, self.num_classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Csv,
    Binary,
}

impl FileFormat {
    /// `.csv` is CSV, anything else is the binary format.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => FileFormat::Csv,
            _ => FileFormat::Binary,
        }
    }
}

pub fn load_dataset(path: &Path, format: FileFormat) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        FileFormat::Csv => parse_csv(&bytes),
        FileFormat::Binary => parse_binary(&bytes).map_err(|e| match e {
            Error::Validation(m) => Error::format(path, m),
            other => other,
        }),
    }
}

pub fn save_dataset(dataset: &Dataset, path: &Path, format: FileFormat) -> Result<()> {
    let bytes = match format {
        FileFormat::Csv => to_csv(dataset),
        FileFormat::Binary => to_binary(dataset),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_csv(d: &Dataset) -> Vec<u8> {
    let mut out = String::new();
    out.push_str(&format!("{CSV_META_PREFIX}{}\n", d.num_classes));
    let mut header = vec!["label".to_string()];
    if d.true_labels.is_some() {
        header.push("true_label".to_string());
    }
    header.extend((0..d.dim()).map(|j| format!("f{j}")));
    out.push_str(&header.join(","));
    out.push('\n');
    for (i, row) in d.features.rows().into_iter().enumerate() {
        out.push_str(&d.given_labels[i].to_string());
        if let Some(t) = &d.true_labels {
            out.push(',');
            out.push_str(&t[i].to_string());
        }
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out.into_bytes()
}

fn parse_csv(bytes: &[u8]) -> Result<Dataset> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        line: 1,
        message: format!("invalid UTF-8: {e}"),
    })?;
    let (declared_classes, body, line_offset) = match text.strip_prefix(CSV_META_PREFIX) {
        Some(rest) => {
            let (meta, body) = rest.split_once('\n').unwrap_or((rest, ""));
            let c = meta.trim().parse::<usize>().map_err(|e| Error::Parse {
                line: 1,
                message: format!("bad num_classes: {e}"),
            })?;
            (Some(c), body, 1)
        }
        None => (None, text, 0),
    };

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: line_offset + 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.get(0) != Some("label") {
        return Err(Error::Parse {
            line: line_offset + 1,
            message: "first column must be `label`".into(),
        });
    }
    let has_truth = headers.get(1) == Some("true_label");
    let first_feature = if has_truth { 2 } else { 1 };
    let dim = headers.len() - first_feature;
    for (j, name) in headers.iter().skip(first_feature).enumerate() {
        if name != format!("f{j}") {
            return Err(Error::Parse {
                line: line_offset + 1,
                message: format!("expected column f{j}, found `{name}`"),
            });
        }
    }

    let mut given = Vec::new();
    let mut truth = Vec::new();
    let mut features = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: line_offset + e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = line_offset + record.position().map_or(0, |p| p.line() as usize);
        let parse_label = |s: &str| {
            s.parse::<usize>().map_err(|e| Error::Parse {
                line,
                message: format!("bad label `{s}`: {e}"),
            })
        };
        given.push(parse_label(&record[0])?);
        if has_truth {
            truth.push(parse_label(&record[1])?);
        }
        for field in record.iter().skip(first_feature) {
            let v = field.parse::<f32>().map_err(|e| Error::Parse {
                line,
                message: format!("bad feature `{field}`: {e}"),
            })?;
            features.push(v);
        }
    }
    if given.is_empty() {
        return Err(Error::validation("no rows"));
    }
    let num_classes = declared_classes.unwrap_or_else(|| {
        let max = given.iter().chain(&truth).copied().max().unwrap_or(0);
        (max + 1).max(2)
    });
    let n = given.len();
    let features = Array2::from_shape_vec((n, dim), features)
        .map_err(|e| Error::validation(e.to_string()))?;
    Dataset::new(
        features,
        given,
        has_truth.then_some(truth),
        num_classes,
    )
}

fn to_binary(d: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + d.len() * (8 + 4 * d.dim()));
    out.extend_from_slice(BINARY_MAGIC);
    // Writes into a Vec cannot fail.
    out.write_u16::<LittleEndian>(BINARY_VERSION).unwrap();
    out.write_u64::<LittleEndian>(d.len() as u64).unwrap();
    out.write_u64::<LittleEndian>(d.dim() as u64).unwrap();
    out.write_u32::<LittleEndian>(d.num_classes as u32).unwrap();
    out.write_u8(d.true_labels.is_some() as u8).unwrap();
    for &l in &d.given_labels {
        out.write_u32::<LittleEndian>(l as u32).unwrap();
    }
    if let Some(t) = &d.true_labels {
        for &l in t {
            out.write_u32::<LittleEndian>(l as u32).unwrap();
        }
    }
    for &v in d.features.iter() {
        out.write_f32::<LittleEndian>(v).unwrap();
    }
    out.flush().unwrap();
    out
}

fn parse_binary(bytes: &[u8]) -> Result<Dataset> {
    let truncated = |_| Error::validation("truncated binary dataset");
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(truncated)?;
    if &magic != BINARY_MAGIC {
        return Err(Error::validation("bad magic, expected LSFT"));
    }
    let version = cur.read_u16::<LittleEndian>().map_err(truncated)?;
    if version != BINARY_VERSION {
        return Err(Error::validation(format!("unsupported version {version}")));
    }
    let n = cur.read_u64::<LittleEndian>().map_err(truncated)? as usize;
    let dim = cur.read_u64::<LittleEndian>().map_err(truncated)? as usize;
    let c = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let has_truth = cur.read_u8().map_err(truncated)? != 0;
    let expected = 27 + n * 4 * (1 + has_truth as usize) + n * dim * 4;
    if bytes.len() != expected {
        return Err(Error::validation(format!(
            "size {} does not match header (expected {expected})",
            bytes.len()
        )));
    }
    if n == 0 {
        return Err(Error::validation("no rows"));
    }
    let read_labels = |cur: &mut Cursor<&[u8]>| -> Result<Vec<usize>> {
        (0..n)
            .map(|_| {
                cur.read_u32::<LittleEndian>()
                    .map(|v| v as usize)
                    .map_err(truncated)
            })
            .collect()
    };
    let given = read_labels(&mut cur)?;
    let truth = if has_truth {
        Some(read_labels(&mut cur)?)
    } else {
        None
    };
    let mut features = vec![0f32; n * dim];
    cur.read_f32_into::<LittleEndian>(&mut features)
        .map_err(truncated)?;
    let features = Array2::from_shape_vec((n, dim), features)
        .map_err(|e| Error::validation(e.to_string()))?;
    Dataset::new(features, given, truth, c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub n_per_class: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub seed: u64,
}

/// Unit-variance Gaussian clusters, one per class, with class means at mutual
/// distance at least `separation`. Rows are interleaved by class.
pub fn make_blobs(spec: &BlobSpec) -> Result<Dataset> {
    let BlobSpec {
        n_per_class,
        num_classes,
        dim,
        separation,
        seed,
    } = *spec;
    if n_per_class < 1 || num_classes < 2 || dim < 1 {
        return Err(Error::validation(
            "blobs need n_per_class >= 1, num_classes >= 2, dim >= 1",
        ));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::validation("separation must be positive"));
    }
    let mut rng = seed::rng(seed);

    // Random centers, rescaled so the closest pair sits exactly at `separation`.
    let mut means = Array2::<f64>::zeros((num_classes, dim));
    means.mapv_inplace(|_| rng.sample(StandardNormal));
    let mut min_dist = f64::INFINITY;
    for a in 0..num_classes {
        for b in a + 1..num_classes {
            let d = (&means.row(a) - &means.row(b)).mapv(|v| v * v).sum().sqrt();
            min_dist = min_dist.min(d);
        }
    }
    if !(min_dist > 0.0) {
        return Err(Error::validation("coincident blob centers"));
    }
    means *= separation / min_dist;

    let n = n_per_class * num_classes;
    let mut features = Array2::<f32>::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        labels.push(c);
        for j in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            features[[i, j]] = (means[[c, j]] + z) as f32;
        }
    }
    Dataset::new(features, labels.clone(), Some(labels), num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoisePattern {
    /// Flip to a uniformly random different class.
    Symmetric,
    /// Flip class `c` to `(c + 1) mod C`.
    Pair,
}

impl std::str::FromStr for NoisePattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" | "sym" => Ok(NoisePattern::Symmetric),
            "pair" => Ok(NoisePattern::Pair),
            other => Err(Error::validation(format!("unknown noise pattern `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub pattern: NoisePattern,
    pub rate: f64,
    pub seed: u64,
}

/// Number of corrupted images for `rate` over `n` images: `floor(rate * n)`,
/// robust to the product landing a hair under an integer.
pub fn corruption_count(rate: f64, n: usize) -> usize {
    let exact = rate * n as f64;
    let floored = exact.floor();
    if exact - floored > 1.0 - 1e-9 {
        floored as usize + 1
    } else {
        floored as usize
    }
}

/// Corrupts exactly `floor(rate * N)` labels picked by a seeded permutation.
/// The original labels are kept as `true_labels`.
pub fn inject_noise(dataset: &Dataset, spec: &NoiseSpec) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&spec.rate) {
        return Err(Error::validation(format!(
            "noise rate {} outside [0, 1]",
            spec.rate
        )));
    }
    if let Some(truth) = dataset.true_labels() {
        if truth != dataset.given_labels() {
            return Err(Error::validation(
                "dataset already carries label noise (given != true)",
            ));
        }
    }
    let n = dataset.len();
    let c = dataset.num_classes();
    let count = corruption_count(spec.rate, n);
    let original = dataset.given_labels().to_vec();
    let mut given = original.clone();

    let mut rng = seed::rng(spec.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for &i in &order[..count] {
        let label = original[i];
        given[i] = match spec.pattern {
            NoisePattern::Pair => (label + 1) % c,
            NoisePattern::Symmetric => {
                let r = rng.random_range(0..c - 1);
                if r >= label {
                    r + 1
                } else {
                    r
                }
            }
        };
    }
    Dataset::new(dataset.features.clone(), given, Some(original), c)
}

/// Training images whose noise status is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldSubset {
    pub ids: Vec<usize>,
    pub given_labels: Vec<usize>,
    pub true_labels: Vec<usize>,
}

impl GoldSubset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions within the subset whose given label is wrong.
    pub fn noisy_positions(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.given_labels[i] != self.true_labels[i])
    }

    pub fn clean_positions(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.given_labels[i] == self.true_labels[i])
    }
}

/// Uniform sample without replacement, ids sorted ascending.
pub fn draw_gold_subset(dataset: &Dataset, size: usize, seed: u64) -> Result<GoldSubset> {
    if size > dataset.len() {
        return Err(Error::validation(format!(
            "gold subset of {size} from {} images",
            dataset.len()
        )));
    }
    let truth = dataset.require_truth()?;
    let mut rng = seed::rng(seed);
    let mut ids = rand::seq::index::sample(&mut rng, dataset.len(), size).into_vec();
    ids.sort_unstable();
    Ok(GoldSubset {
        given_labels: ids.iter().map(|&i| dataset.given_labels()[i]).collect(),
        true_labels: ids.iter().map(|&i| truth[i]).collect(),
        ids,
    })
}

/// Disjoint train/test partition; rows index the source dataset.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

pub fn split_train_test(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<Split> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::validation(format!(
            "test fraction {test_fraction} outside [0, 1)"
        )));
    }
    let n = dataset.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::validation(format!(
            "test fraction {test_fraction} leaves an empty split of {n} images"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    let mut test_rows = order[..n_test].to_vec();
    let mut train_rows = order[n_test..].to_vec();
    test_rows.sort_unstable();
    train_rows.sort_unstable();
    Ok(Split {
        train: dataset.select(&train_rows)?,
        test: dataset.select(&test_rows)?,
        train_rows,
        test_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> Dataset {
        Dataset::new(
            array![[0.0, 1.0, 2.0, 3.0], [1.5, -2.0, 0.25, 1e-3], [4.0, 5.0, 6.0, 7.0], [
                -1.0, -1.0, -1.0, -1.0
            ]],
            vec![0, 1, 1, 0],
            None,
            2,
        )
        .unwrap()
    }

    #[test]
    fn csv_readback() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(
            &path,
            "label,f0,f1,f2,f3\n0,1,2,3,4\n1,1,2,3,4\n1,0,0,0,0\n0,5,5,5,5\n",
        )
        .unwrap();
        let d = load_dataset(&path, FileFormat::Csv).unwrap();
        assert_eq!((d.len(), d.dim(), d.num_classes()), (4, 4, 2));
        assert_eq!(d.given_labels(), &[0, 1, 1, 0]);
        assert!(d.true_labels().is_none());
    }

    #[test]
    fn empty_file_has_no_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        fs::write(&path, "label,f0\n").unwrap();
        let err = load_dataset(&path, FileFormat::Csv).unwrap_err();
        assert!(err.to_string().contains("no rows"), "{err}");
        fs::write(&path, "").unwrap();
        assert!(load_dataset(&path, FileFormat::Csv).is_err());
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, "label,f0\n0,1.0\n1,abc\n").unwrap();
        match load_dataset(&path, FileFormat::Csv).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn label_out_of_declared_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        fs::write(&path, "# num_classes=2\nlabel,f0\n0,1.0\n2,1.0\n").unwrap();
        assert!(matches!(
            load_dataset(&path, FileFormat::Csv),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn true_label_column_round_trips() {
        let d = inject_noise(
            &tiny(),
            &NoiseSpec {
                pattern: NoisePattern::Pair,
                rate: 0.5,
                seed: 3,
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (name, fmt) in [("a.csv", FileFormat::Csv), ("a.bin", FileFormat::Binary)] {
            let path = dir.path().join(name);
            save_dataset(&d, &path, fmt).unwrap();
            let back = load_dataset(&path, fmt).unwrap();
            assert_eq!(back, d);
            assert!(back.true_labels().is_some());
        }
    }

    #[test]
    fn binary_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        fs::write(&path, b"NOPE\x01\x00").unwrap();
        assert!(load_dataset(&path, FileFormat::Binary).is_err());
    }

    #[test]
    fn tiny_blobs() {
        let d = make_blobs(&BlobSpec {
            n_per_class: 1,
            num_classes: 2,
            dim: 1,
            separation: 10.0,
            seed: 0,
        })
        .unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.given_labels(), &[0, 1]);
    }

    #[test]
    fn blobs_are_deterministic() {
        let spec = BlobSpec {
            n_per_class: 20,
            num_classes: 4,
            dim: 3,
            separation: 5.0,
            seed: 11,
        };
        assert_eq!(make_blobs(&spec).unwrap(), make_blobs(&spec).unwrap());
    }

    #[test]
    fn zero_rate_is_identity() {
        let d = tiny();
        let out = inject_noise(
            &d,
            &NoiseSpec {
                pattern: NoisePattern::Symmetric,
                rate: 0.0,
                seed: 9,
            },
        )
        .unwrap();
        assert_eq!(out.given_labels(), d.given_labels());
        assert_eq!(out.features(), d.features());
    }

    #[test]
    fn rate_out_of_range() {
        for rate in [-0.1, 1.5, f64::NAN] {
            let spec = NoiseSpec {
                pattern: NoisePattern::Pair,
                rate,
                seed: 0,
            };
            assert!(inject_noise(&tiny(), &spec).is_err());
        }
    }

    #[test]
    fn corruption_count_floors() {
        assert_eq!(corruption_count(0.4, 50_000), 20_000);
        assert_eq!(corruption_count(0.29, 100), 29);
        assert_eq!(corruption_count(0.999, 10), 9);
        assert_eq!(corruption_count(1.0, 7), 7);
    }

    #[test]
    fn gold_subset_sizes() {
        let d = inject_noise(
            &tiny(),
            &NoiseSpec {
                pattern: NoisePattern::Pair,
                rate: 0.5,
                seed: 1,
            },
        )
        .unwrap();
        let all = draw_gold_subset(&d, 4, 5).unwrap();
        assert_eq!(all.ids, vec![0, 1, 2, 3]);
        assert_eq!(all.noisy_positions().count(), 2);
        assert!(draw_gold_subset(&d, 5, 5).is_err());
        assert_eq!(draw_gold_subset(&d, 2, 8).unwrap(), draw_gold_subset(&d, 2, 8).unwrap());
    }

    #[test]
    fn gold_requires_truth() {
        assert!(matches!(
            draw_gold_subset(&tiny(), 1, 0),
            Err(Error::MissingTruth)
        ));
    }

    #[test]
    fn split_is_disjoint_and_covering() {
        let d = make_blobs(&BlobSpec {
            n_per_class: 10,
            num_classes: 3,
            dim: 2,
            separation: 4.0,
            seed: 2,
        })
        .unwrap();
        let s = split_train_test(&d, 0.2, 4).unwrap();
        assert_eq!(s.test.len(), 6);
        assert_eq!(s.train.len(), 24);
        let mut all: Vec<usize> = s.train_rows.iter().chain(&s.test_rows).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
    }
}
