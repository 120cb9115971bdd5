//! Domain-partitioned datasets: in-memory layout, series windowing, input
//! standardization, and a manifest-driven CSV loader.
//!
//! A time-indexed corpus is a sequence of domains `t = 1..tau` (sources)
//! followed by one or more future target domains. Each domain carries rows of
//! `[tokens, input_dim]` inputs and `[output_dim]` targets. Tabular data uses
//! a single token per row; forecasting windows use one token per step.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    InDomainTest,
    Validation,
    TargetTest,
}

/// One split of one domain, in row-major storage.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    /// 1-based position in the domain sequence.
    pub domain_index: usize,
    pub split: Split,
    pub rows: usize,
    pub tokens: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    /// `[rows, tokens, input_dim]`
    pub x: Vec<f64>,
    /// `[rows, output_dim]`
    pub y: Vec<f64>,
    /// For variable-length windows: count of real (right-aligned) tokens per
    /// row; leading `tokens - len` slots are padding.
    pub lengths: Option<Vec<usize>>,
}

impl DomainDataset {
    pub fn new(
        domain_index: usize,
        split: Split,
        tokens: usize,
        input_dim: usize,
        output_dim: usize,
        x: Vec<f64>,
        y: Vec<f64>,
    ) -> Result<DomainDataset> {
        if tokens == 0 || input_dim == 0 || output_dim == 0 {
            return Err(Error::Data(format!(
                "domain {domain_index}: dims must be positive (tokens {tokens}, input {input_dim}, output {output_dim})"
            )));
        }
        let per_row = tokens * input_dim;
        if x.len() % per_row != 0 {
            return Err(Error::Data(format!(
                "domain {domain_index}: input length {} is not a multiple of {per_row}",
                x.len()
            )));
        }
        let rows = x.len() / per_row;
        if rows == 0 {
            return Err(Error::Data(format!("domain {domain_index} is empty")));
        }
        if y.len() != rows * output_dim {
            return Err(Error::Data(format!(
                "domain {domain_index}: {rows} rows but {} target values",
                y.len()
            )));
        }
        for (i, v) in x.iter().chain(y.iter()).enumerate() {
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "domain {domain_index}: non-finite value at flat offset {i}"
                )));
            }
        }
        Ok(DomainDataset {
            domain_index,
            split,
            rows,
            tokens,
            input_dim,
            output_dim,
            x,
            y,
            lengths: None,
        })
    }

    /// `[rows, tokens, input_dim]` constant tensor.
    pub fn x_tensor(&self) -> Tensor {
        Tensor::new(self.x.clone(), &[self.rows, self.tokens, self.input_dim])
            .expect("validated layout")
    }

    /// `[rows, output_dim]` constant tensor.
    pub fn y_tensor(&self) -> Tensor {
        Tensor::new(self.y.clone(), &[self.rows, self.output_dim]).expect("validated layout")
    }

    /// Copy of the selected rows, preserving order.
    pub fn select_rows(&self, idx: &[usize], split: Split) -> DomainDataset {
        let per_row = self.tokens * self.input_dim;
        let mut x = Vec::with_capacity(idx.len() * per_row);
        let mut y = Vec::with_capacity(idx.len() * self.output_dim);
        for &r in idx {
            x.extend_from_slice(&self.x[r * per_row..(r + 1) * per_row]);
            y.extend_from_slice(&self.y[r * self.output_dim..(r + 1) * self.output_dim]);
        }
        DomainDataset {
            domain_index: self.domain_index,
            split,
            rows: idx.len(),
            tokens: self.tokens,
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            x,
            y,
            lengths: self
                .lengths
                .as_ref()
                .map(|l| idx.iter().map(|&r| l[r]).collect()),
        }
    }

    /// Leading `fraction` of rows as train, remainder as in-domain test.
    /// Row order is preserved (time order for series data).
    pub fn split_head_tail(&self, fraction: f64) -> Result<(DomainDataset, DomainDataset)> {
        if !(0.0..1.0).contains(&fraction) || fraction <= 0.0 {
            return Err(Error::Config(format!(
                "train fraction must be in (0, 1), got {fraction}"
            )));
        }
        let head = ((self.rows as f64) * fraction).round() as usize;
        let head = head.clamp(1, self.rows.saturating_sub(1).max(1));
        if head >= self.rows {
            return Err(Error::Data(format!(
                "domain {} has {} rows; too few to split",
                self.domain_index, self.rows
            )));
        }
        let train_idx: Vec<usize> = (0..head).collect();
        let test_idx: Vec<usize> = (head..self.rows).collect();
        Ok((
            self.select_rows(&train_idx, Split::Train),
            self.select_rows(&test_idx, Split::InDomainTest),
        ))
    }
}

// ---------------------------------------------------------------------------
// Windowing

#[derive(Debug, Clone, Copy)]
pub enum WindowMode {
    Fixed,
    /// Window lengths drawn uniformly from `[window/2, window]`, right-aligned
    /// within the fixed span and front-padded. The draw is seeded, so a given
    /// seed always yields the same lengths.
    Variable { seed: u64 },
}

/// Slide a `window -> horizon` predictor view over a scalar series.
/// Produces inputs `[rows, window, 1]` and targets `[rows, horizon]`.
pub fn window_series(
    series: &[f64],
    window: usize,
    horizon: usize,
    stride: usize,
    mode: WindowMode,
    domain_index: usize,
    split: Split,
) -> Result<DomainDataset> {
    if window == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "window, horizon and stride must be positive (got {window}, {horizon}, {stride})"
        )));
    }
    if series.len() < window + horizon {
        return Err(Error::Data(format!(
            "series of {} points is shorter than window {window} + horizon {horizon}",
            series.len()
        )));
    }
    let rows = (series.len() - window - horizon) / stride + 1;
    let mut x = Vec::with_capacity(rows * window);
    let mut y = Vec::with_capacity(rows * horizon);
    for r in 0..rows {
        let start = r * stride;
        x.extend_from_slice(&series[start..start + window]);
        y.extend_from_slice(&series[start + window..start + window + horizon]);
    }
    let mut ds = DomainDataset::new(domain_index, split, window, 1, horizon, x, y)?;
    if let WindowMode::Variable { seed } = mode {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let lo = (window / 2).max(1);
        ds.lengths = Some((0..rows).map(|_| rng.random_range(lo..=window)).collect());
    }
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Standardization

/// Per-feature affine normalizer, fitted on source-train inputs only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fit over every token of every row of the given (train) splits.
    pub fn fit(train: &[&DomainDataset]) -> Result<Standardizer> {
        let first = train
            .first()
            .ok_or_else(|| Error::Data("no training domains to standardize on".into()))?;
        let dim = first.input_dim;
        let mut count = 0usize;
        let mut mean = vec![0.0; dim];
        for ds in train {
            if ds.input_dim != dim {
                return Err(Error::Data(format!(
                    "domain {}: feature width {} differs from {}",
                    ds.domain_index, ds.input_dim, dim
                )));
            }
            for chunk in ds.x.chunks_exact(dim) {
                count += 1;
                for (m, &v) in mean.iter_mut().zip(chunk) {
                    *m += v;
                }
            }
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        let mut var = vec![0.0; dim];
        for ds in train {
            for chunk in ds.x.chunks_exact(dim) {
                for (j, &v) in chunk.iter().enumerate() {
                    var[j] += (v - mean[j]) * (v - mean[j]);
                }
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / count as f64).sqrt();
                // constant features pass through unscaled
                if s < 1e-12 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, ds: &mut DomainDataset) {
        for chunk in ds.x.chunks_exact_mut(self.mean.len()) {
            for (j, v) in chunk.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Manifest-driven CSV loading

/// Describes how to read a raw CSV into domain-partitioned datasets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// CSV file with a UTF-8 header row.
    pub path: PathBuf,
    pub feature_columns: Vec<String>,
    pub target_columns: Vec<String>,
    /// Column whose (optionally bucketed) value keys the domain.
    pub domain_column: String,
    /// `"verbatim"` keys domains by the raw cell; `"month"` truncates an
    /// ISO-like date to its `YYYY-MM` prefix.
    #[serde(default = "default_bucket")]
    pub domain_bucket: String,
    /// Leading fraction of each source domain kept for training.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Trailing domains held out entirely as future test targets.
    #[serde(default = "default_target_domains")]
    pub target_domains: usize,
}

fn default_bucket() -> String {
    "verbatim".into()
}
fn default_train_fraction() -> f64 {
    0.9
}
fn default_target_domains() -> usize {
    1
}

impl DatasetManifest {
    pub fn from_toml_str(text: &str) -> Result<DatasetManifest> {
        let m: DatasetManifest =
            toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m = Self::from_toml_str(&text)?;
        // interpret a relative data path against the manifest location
        if m.path.is_relative() {
            if let Some(dir) = path.as_ref().parent() {
                m.path = dir.join(&m.path);
            }
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_columns.is_empty() {
            return Err(Error::Config("manifest lists no feature columns".into()));
        }
        if self.target_columns.is_empty() {
            return Err(Error::Config("manifest lists no target columns".into()));
        }
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.domain_bucket != "verbatim" && self.domain_bucket != "month" {
            return Err(Error::Config(format!(
                "unknown domain_bucket {:?} (expected \"verbatim\" or \"month\")",
                self.domain_bucket
            )));
        }
        Ok(())
    }

    fn bucket(&self, raw: &str) -> String {
        match self.domain_bucket.as_str() {
            "month" => raw.chars().take(7).collect(),
            _ => raw.to_string(),
        }
    }
}

/// Sources are split head/tail per the manifest fraction; the trailing
/// domains become whole target-test sets.
#[derive(Debug, Clone)]
pub struct PartitionedData {
    /// Per source domain: (train split, in-domain test split).
    pub sources: Vec<(DomainDataset, DomainDataset)>,
    pub targets: Vec<DomainDataset>,
}

impl PartitionedData {
    pub fn num_source_domains(&self) -> usize {
        self.sources.len()
    }

    pub fn source_train(&self) -> Vec<&DomainDataset> {
        self.sources.iter().map(|(tr, _)| tr).collect()
    }
}

/// Read and partition a CSV corpus as described by the manifest.
pub fn load_partitioned(manifest: &DatasetManifest) -> Result<PartitionedData> {
    let file = std::fs::File::open(&manifest.path)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest.path.display())))?;
    load_partitioned_from(manifest, file)
}

/// [`load_partitioned`] over any byte source instead of the manifest path.
pub fn load_partitioned_from(
    manifest: &DatasetManifest,
    source: impl std::io::Read,
) -> Result<PartitionedData> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("csv header: {e}")))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("missing column {name:?} in CSV header")))
    };
    let domain_col = col(&manifest.domain_column)?;
    let feature_cols: Vec<usize> = manifest
        .feature_columns
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;
    let target_cols: Vec<usize> = manifest
        .target_columns
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;

    // Keyed rows, keeping first-appearance order per key.
    let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("row {}: {e}", line + 2)))?;
        let parse = |idx: usize| -> Result<f64> {
            let cell = record.get(idx).ok_or_else(|| {
                Error::Data(format!("row {}: missing field {}", line + 2, idx))
            })?;
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("row {}: {cell:?} is not a number", line + 2)))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("row {}: non-finite value", line + 2)));
            }
            Ok(v)
        };
        let raw_key = record
            .get(domain_col)
            .ok_or_else(|| Error::Data(format!("row {}: missing domain field", line + 2)))?;
        let key = manifest.bucket(raw_key.trim());
        let entry = groups.entry(key).or_default();
        for &c in &feature_cols {
            entry.0.push(parse(c)?);
        }
        for &c in &target_cols {
            entry.1.push(parse(c)?);
        }
    }
    if groups.is_empty() {
        return Err(Error::Data("CSV contains no data rows".into()));
    }

    // Numeric keys sort numerically; anything else lexicographically.
    let mut keys: Vec<String> = groups.keys().cloned().collect();
    if keys.iter().all(|k| k.parse::<i64>().is_ok()) {
        keys.sort_by_key(|k| k.parse::<i64>().expect("checked"));
    }
    if keys.len() < manifest.target_domains + 2 {
        return Err(Error::Data(format!(
            "found {} domains; need at least {} sources plus {} targets",
            keys.len(),
            2,
            manifest.target_domains
        )));
    }

    let input_dim = manifest.feature_columns.len();
    let output_dim = manifest.target_columns.len();
    let num_sources = keys.len() - manifest.target_domains;
    let mut sources = Vec::with_capacity(num_sources);
    let mut targets = Vec::new();
    for (i, key) in keys.iter().enumerate() {
        let (x, y) = groups.remove(key).expect("key from map");
        let t = i + 1;
        if i < num_sources {
            let full = DomainDataset::new(t, Split::Train, 1, input_dim, output_dim, x, y)
                .map_err(|e| Error::Data(format!("domain {key:?}: {e}")))?;
            sources.push(full.split_head_tail(manifest.train_fraction)?);
        } else {
            targets.push(
                DomainDataset::new(t, Split::TargetTest, 1, input_dim, output_dim, x, y)
                    .map_err(|e| Error::Data(format!("domain {key:?}: {e}")))?,
            );
        }
    }
    Ok(PartitionedData { sources, targets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn window_count_matches_closed_form() {
        let series: Vec<f64> = (0..2600).map(|t| t as f64).collect();
        let ds = window_series(&series, 20, 1, 1, WindowMode::Fixed, 1, Split::Train).unwrap();
        assert_eq!(ds.rows, 2580);
        assert_eq!(ds.x[..3], [0.0, 1.0, 2.0]);
        assert_eq!(ds.y[0], 20.0);
        assert_eq!(ds.y[2579], 2599.0);
    }

    #[test]
    fn window_rejects_short_series() {
        let err =
            window_series(&[1.0; 10], 20, 1, 1, WindowMode::Fixed, 1, Split::Train).unwrap_err();
        assert!(err.to_string().contains("shorter"), "{err}");
    }

    #[test]
    fn variable_windows_are_seed_deterministic_and_bounded() {
        let series: Vec<f64> = (0..200).map(|t| (t as f64).sin()).collect();
        let a = window_series(&series, 20, 1, 1, WindowMode::Variable { seed: 9 }, 1, Split::Train)
            .unwrap();
        let b = window_series(&series, 20, 1, 1, WindowMode::Variable { seed: 9 }, 1, Split::Train)
            .unwrap();
        let c = window_series(&series, 20, 1, 1, WindowMode::Variable { seed: 10 }, 1, Split::Train)
            .unwrap();
        assert_eq!(a.lengths, b.lengths);
        assert_ne!(a.lengths, c.lengths);
        let lens = a.lengths.unwrap();
        assert!(lens.iter().all(|&l| (10..=20).contains(&l)));
    }

    #[test]
    fn standardizer_fits_train_only() {
        let train = DomainDataset::new(
            1,
            Split::Train,
            1,
            2,
            1,
            vec![0.0, 10.0, 2.0, 30.0],
            vec![0.0, 0.0],
        )
        .unwrap();
        let s = Standardizer::fit(&[&train]).unwrap();
        assert_eq!(s.mean, vec![1.0, 20.0]);
        let mut other = DomainDataset::new(2, Split::TargetTest, 1, 2, 1, vec![1.0, 20.0], vec![0.0])
            .unwrap();
        s.apply(&mut other);
        assert_eq!(other.x, vec![0.0, 0.0]);
    }

    #[test]
    fn split_head_tail_keeps_time_order() {
        let ds = DomainDataset::new(
            1,
            Split::Train,
            1,
            1,
            1,
            (0..10).map(f64::from).collect(),
            (0..10).map(f64::from).collect(),
        )
        .unwrap();
        let (train, test) = ds.split_head_tail(0.9).unwrap();
        assert_eq!(train.rows, 9);
        assert_eq!(test.rows, 1);
        assert_eq!(test.x, vec![9.0]);
        assert_eq!(test.split, Split::InDomainTest);
    }

    #[test]
    fn rejects_non_finite_rows() {
        let err = DomainDataset::new(1, Split::Train, 1, 1, 1, vec![f64::NAN], vec![0.0])
            .unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
    }

    fn write_csv(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("data.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn csv_loader_partitions_domains() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("day,f1,f2,label\n");
        for d in 1..=4 {
            for r in 0..20 {
                body.push_str(&format!("{d},{},{},{}\n", r, r * d, (r + d) % 2));
            }
        }
        let path = write_csv(dir.path(), &body);
        let manifest = DatasetManifest {
            path,
            feature_columns: vec!["f1".into(), "f2".into()],
            target_columns: vec!["label".into()],
            domain_column: "day".into(),
            domain_bucket: "verbatim".into(),
            train_fraction: 0.9,
            target_domains: 1,
        };
        let parts = load_partitioned(&manifest).unwrap();
        assert_eq!(parts.sources.len(), 3);
        assert_eq!(parts.targets.len(), 1);
        assert_eq!(parts.sources[0].0.rows, 18);
        assert_eq!(parts.sources[0].1.rows, 2);
        assert_eq!(parts.targets[0].rows, 20);
        assert_eq!(parts.targets[0].domain_index, 4);
        assert_eq!(parts.sources[0].0.input_dim, 2);
    }

    #[test]
    fn csv_loader_names_missing_columns_and_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(dir.path(), "day,f1,label\n1,0.5,1\n");
        let mut manifest = DatasetManifest {
            path: path.clone(),
            feature_columns: vec!["nope".into()],
            target_columns: vec!["label".into()],
            domain_column: "day".into(),
            domain_bucket: "verbatim".into(),
            train_fraction: 0.9,
            target_domains: 1,
        };
        let err = load_partitioned(&manifest).unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");

        manifest.feature_columns = vec!["f1".into()];
        let path2 = write_csv(dir.path(), "day,f1,label\n1,oops,1\n");
        manifest.path = path2;
        let err = load_partitioned(&manifest).unwrap_err();
        assert!(err.to_string().contains("oops"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn month_bucketing_groups_by_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("ts,f1,y\n");
        for (m, rows) in [("2020-01", 10), ("2020-02", 10), ("2020-03", 10)] {
            for r in 0..rows {
                body.push_str(&format!("{m}-{:02},{},{}\n", r + 1, r, r));
            }
        }
        let path = write_csv(dir.path(), &body);
        let manifest = DatasetManifest {
            path,
            feature_columns: vec!["f1".into()],
            target_columns: vec!["y".into()],
            domain_column: "ts".into(),
            domain_bucket: "month".into(),
            train_fraction: 0.9,
            target_domains: 1,
        };
        let parts = load_partitioned(&manifest).unwrap();
        assert_eq!(parts.sources.len(), 2);
        assert_eq!(parts.targets.len(), 1);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(128))]

        #[test]
        fn csv_loader_never_panics(bytes in proptest::collection::vec(proptest::prelude::any::<u8>(), 0..500)) {
            let manifest = DatasetManifest {
                path: "unused.csv".into(),
                feature_columns: vec!["f0".into(), "f1".into()],
                target_columns: vec!["y".into()],
                domain_column: "t".into(),
                domain_bucket: "verbatim".into(),
                train_fraction: 0.9,
                target_domains: 1,
            };
            let _ = load_partitioned_from(&manifest, bytes.as_slice());
        }

        #[test]
        fn manifest_parser_never_panics(text in "\\PC*") {
            let _ = DatasetManifest::from_toml_str(&text);
        }
    }
}
